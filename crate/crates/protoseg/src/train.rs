//! Dice loss, Adam, and the episodic training loop.

use crate::config::Config;
use crate::data::{sample_episode, Episode, ManifestRecord};
use crate::error::{Error, Result};
use crate::model::forward_episode;
use crate::par::parallel_map;
use crate::params::{init_params, trainable_names, BoundParams, ParamSet};
use crate::protoprior::resize_mask;
use crate::rng::PortableRng;
use crate::tensor::{Scalar, Tape, TensorData, Var};
use std::collections::BTreeMap;
use std::path::Path;

pub const DICE_EPS: f64 = 1.0;

/// Smoothed dice loss against a binary ground-truth mask. The prediction is
/// bilinearly upsampled to the ground-truth size first.
pub fn dice_loss<F: Scalar>(tape: &mut Tape<F>, pred: Var, gt: &TensorData<F>) -> Result<Var> {
    let (ps, gs) = (tape.value(pred).shape().to_vec(), gt.shape().to_vec());
    if ps.len() != 3 || ps[0] != 1 || gs.len() != 3 || gs[0] != 1 {
        return Err(Error::ShapeMismatch {
            op: "dice_loss",
            lhs: ps,
            rhs: gs,
        });
    }
    if !gt
        .data()
        .iter()
        .all(|&v| v == F::zero() || v == F::one())
    {
        return Err(Error::contract(
            "dice_loss ground truth must be binary {0,1}",
        ));
    }
    let up = tape.bilinear_resize(pred, gs[1], gs[2])?;
    let g = tape.constant(gt.clone());
    let pg = tape.mul(up, g)?;
    let inter = tape.sum_all(pg);
    let p_sum = tape.sum_all(up);
    let g_sum: f64 = gt.data().iter().map(|v| v.to_f64_c()).sum();
    let eps = F::from_f64_c(DICE_EPS);
    let num = tape.scale(inter, F::from_f64_c(2.0));
    let num = tape.add_scalar(num, eps);
    let den = tape.add_scalar(p_sum, F::from_f64_c(g_sum) + eps);
    let frac = tape.div(num, den)?;
    let neg = tape.scale(frac, F::from_f64_c(-1.0));
    Ok(tape.add_scalar(neg, F::one()))
}

/// Bias-corrected Adam over named parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One optimizer step over `names`; every named parameter must have a
/// gradient.
pub fn adam_step(
    params: &mut ParamSet<f32>,
    grads: &BTreeMap<String, Vec<f32>>,
    names: &[String],
    state: &mut AdamState,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for name in names {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing gradient for parameter {name:?}")))?;
        let p = params.get_mut(name)?;
        if g.len() != p.numel() {
            return Err(Error::contract(format!(
                "gradient length mismatch for {name:?}"
            )));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for ((w, &gi), (mi, vi)) in p
            .data_mut()
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let gi = gi as f64;
            let md = state.beta1 * *mi as f64 + (1.0 - state.beta1) * gi;
            let vd = state.beta2 * *vi as f64 + (1.0 - state.beta2) * gi * gi;
            *mi = md as f32;
            *vi = vd as f32;
            let mhat = md / bc1;
            let vhat = vd / bc2;
            *w -= (state.lr * mhat / (vhat.sqrt() + state.eps)) as f32;
        }
    }
    Ok(())
}

/// Per-step record: the per-episode dice values and their mean (the batch
/// loss of the training objective).
#[derive(Debug, Clone)]
pub struct StepReport {
    pub losses: Vec<f32>,
    pub mean: f32,
}

pub struct TrainOutcome {
    pub params: ParamSet<f32>,
    pub trace: Vec<StepReport>,
}

/// Forward + backward for one episode under its own tape; returns the dice
/// value and the per-parameter gradients.
fn episode_grads(
    cfg: &Config,
    params: &ParamSet<f32>,
    ep: &Episode,
) -> Result<(f32, BTreeMap<String, Vec<f32>>)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(params, cfg, &mut tape);
    let out = forward_episode(&mut tape, &bound, cfg, ep)?;
    let loss = dice_loss(&mut tape, out.mask, &ep.query_mask)?;
    tape.backward(loss)?;
    let mut grads = bound.grads(&tape);
    // the top backbone stage feeds only the detached prior mask, so the
    // loss never reaches it; such parameters get a zero gradient
    for name in trainable_names(cfg) {
        grads
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; params.get(&name).map(|t| t.numel()).unwrap_or(0)]);
    }
    Ok((tape.value(loss).item(), grads))
}

/// Episodic training: per step, `cfg.batch` episodes are sampled from the
/// train classes, their gradients averaged, and one Adam step applied.
/// Fully determined by `cfg.seed`; episodes within a batch may run in
/// parallel but gradients are reduced in a fixed order, so the trace is
/// bit-identical either way.
pub fn train_run(
    cfg: &Config,
    records: &[ManifestRecord],
    base: &Path,
    train_classes: &[usize],
    mut progress: impl FnMut(usize, &StepReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = init_params(cfg, cfg.seed);
    let names = trainable_names(cfg);
    let mut adam = AdamState::new(cfg.lr);
    let mut rng = PortableRng::new(cfg.seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let episodes: Vec<Episode> = (0..cfg.batch)
            .map(|_| sample_episode(records, base, train_classes, cfg.shots, &mut rng))
            .collect::<Result<_>>()?;
        let results = parallel_map(episodes, |ep| episode_grads(cfg, &params, &ep));
        let mut losses = Vec::with_capacity(cfg.batch);
        let mut mean_grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for r in results {
            let (loss, grads) = r?;
            losses.push(loss);
            for (name, g) in grads {
                match mean_grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g.iter()) {
                            *a += b;
                        }
                    }
                    None => {
                        mean_grads.insert(name, g);
                    }
                }
            }
        }
        let inv = 1.0 / cfg.batch as f32;
        for g in mean_grads.values_mut() {
            for v in g.iter_mut() {
                *v *= inv;
            }
        }
        adam_step(&mut params, &mean_grads, &names, &mut adam)?;
        let mean = losses.iter().sum::<f32>() / cfg.batch as f32;
        let report = StepReport { losses, mean };
        progress(step, &report);
        trace.push(report);
    }
    Ok(TrainOutcome { params, trace })
}

/// Hard {0,1} mask from a probability map at the 0.5 threshold, upsampled
/// to the requested size first.
pub fn threshold_mask(pred: &TensorData<f32>, h: usize, w: usize) -> Result<TensorData<f32>> {
    let up = resize_mask(pred, h, w)?;
    let data = up.data().iter().map(|&v| f32::from(v >= 0.5)).collect();
    TensorData::new(vec![1, h, w], data)
}
