//! IoU metrics and the frozen-weights fold evaluation protocol.
//!
//! Per-class IoU aggregates intersections and unions across a class's
//! episodes before dividing (micro within class), and mIoU is the
//! unweighted mean over classes (macro across classes). FB-IoU ignores
//! classes: foreground and background counts aggregate over all episodes
//! and the two IoUs are averaged.

use crate::config::Config;
use crate::data::{sample_episode, ManifestRecord};
use crate::error::{Error, Result};
use crate::io::write_tensor;
use crate::model::forward_episode;
use crate::par::parallel_map;
use crate::params::{BoundParams, ParamSet};
use crate::rng::PortableRng;
use crate::tensor::{Tape, TensorData};
use crate::train::threshold_mask;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Intersection over union of two binary masks; both empty counts as a
/// perfect 1.0.
pub fn iou(pred: &TensorData<f32>, gt: &TensorData<f32>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "iou",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    for t in [pred, gt] {
        if !t.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::contract("iou expects binary masks"));
        }
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += u64::from(p == 1.0 && g == 1.0);
        union += u64::from(p == 1.0 || g == 1.0);
    }
    Ok(ratio(inter, union))
}

fn ratio(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pixel counts for one evaluated episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeEval {
    pub class_id: usize,
    pub fg_inter: u64,
    pub fg_union: u64,
    pub bg_inter: u64,
    pub bg_union: u64,
}

pub fn evaluate_masks(
    class_id: usize,
    pred: &TensorData<f32>,
    gt: &TensorData<f32>,
) -> Result<EpisodeEval> {
    // reuse the validation in iou, then recount both polarities
    iou(pred, gt)?;
    let mut e = EpisodeEval {
        class_id,
        fg_inter: 0,
        fg_union: 0,
        bg_inter: 0,
        bg_union: 0,
    };
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (pf, gf) = (p == 1.0, g == 1.0);
        e.fg_inter += u64::from(pf && gf);
        e.fg_union += u64::from(pf || gf);
        e.bg_inter += u64::from(!pf && !gf);
        e.bg_union += u64::from(!pf || !gf);
    }
    Ok(e)
}

/// Per-class IoU over class-aggregated counts.
pub fn per_class_iou(evals: &[EpisodeEval]) -> Result<BTreeMap<usize, f64>> {
    if evals.is_empty() {
        return Err(Error::contract("no episodes to aggregate"));
    }
    let mut counts: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for e in evals {
        let c = counts.entry(e.class_id).or_insert((0, 0));
        c.0 += e.fg_inter;
        c.1 += e.fg_union;
    }
    Ok(counts
        .into_iter()
        .map(|(k, (i, u))| (k, ratio(i, u)))
        .collect())
}

/// Unweighted class mean of the per-class IoUs.
pub fn miou(evals: &[EpisodeEval]) -> Result<f64> {
    let per = per_class_iou(evals)?;
    Ok(per.values().sum::<f64>() / per.len() as f64)
}

/// Mean of class-agnostic foreground and background IoU.
pub fn fb_iou(evals: &[EpisodeEval]) -> Result<f64> {
    if evals.is_empty() {
        return Err(Error::contract("no episodes to aggregate"));
    }
    let (mut fi, mut fu, mut bi, mut bu) = (0u64, 0u64, 0u64, 0u64);
    for e in evals {
        fi += e.fg_inter;
        fu += e.fg_union;
        bi += e.bg_inter;
        bu += e.bg_union;
    }
    Ok((ratio(fi, fu) + ratio(bi, bu)) / 2.0)
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_class_iou: BTreeMap<usize, f64>,
    pub miou: f64,
    pub fb_iou: f64,
    pub fold_index: usize,
    pub episode_count: usize,
    pub shots: usize,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,class,value\n");
        for (c, v) in &self.per_class_iou {
            writeln!(s, "iou,{c},{v:.6}").unwrap();
        }
        writeln!(s, "miou,,{:.6}", self.miou).unwrap();
        writeln!(s, "fb_iou,,{:.6}", self.fb_iou).unwrap();
        writeln!(s, "episodes,,{}", self.episode_count).unwrap();
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "fold {} | {}-shot | {} episodes\n",
            self.fold_index, self.shots, self.episode_count
        );
        for (c, v) in &self.per_class_iou {
            writeln!(s, "  class {c:>3}: IoU {v:.4}").unwrap();
        }
        writeln!(s, "  mIoU   {:.4}", self.miou).unwrap();
        writeln!(s, "  FB-IoU {:.4}", self.fb_iou).unwrap();
        s
    }
}

/// Samples episodes from the test classes, runs the frozen model with the
/// 0.5 threshold, and aggregates the metric report. Optionally dumps each
/// predicted probability map as a tensor file.
pub fn evaluate_fold(
    params: &ParamSet<f32>,
    cfg: &Config,
    records: &[ManifestRecord],
    base: &Path,
    test_classes: &[usize],
    episodes: usize,
    rng: &mut PortableRng,
    dump_masks: Option<&Path>,
) -> Result<MetricReport> {
    if let Some(dir) = dump_masks {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let eps: Vec<_> = (0..episodes)
        .map(|_| sample_episode(records, base, test_classes, cfg.shots, rng))
        .collect::<Result<_>>()?;
    let outputs = parallel_map(eps.into_iter().enumerate().collect(), |(i, ep)| {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(params, cfg, &mut tape);
        let out = forward_episode(&mut tape, &bound, cfg, &ep)?;
        let prob = tape.value(out.mask).clone();
        let gs = ep.query_mask.shape();
        let hard = threshold_mask(&prob, gs[1], gs[2])?;
        let eval = evaluate_masks(ep.class_id, &hard, &ep.query_mask)?;
        Ok::<_, Error>((i, prob, eval))
    });
    let mut evals = Vec::with_capacity(episodes);
    for r in outputs {
        let (i, prob, eval) = r?;
        if let Some(dir) = dump_masks {
            write_tensor(&dir.join(format!("pred_{i:05}.ptns")), &prob)?;
        }
        evals.push(eval);
    }
    Ok(MetricReport {
        per_class_iou: per_class_iou(&evals)?,
        miou: miou(&evals)?,
        fb_iou: fb_iou(&evals)?,
        fold_index: cfg.fold,
        episode_count: evals.len(),
        shots: cfg.shots,
    })
}
