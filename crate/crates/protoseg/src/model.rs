//! End-to-end episode forward pass: backbone features for supports and
//! query, prototype pooling, prior mask, pixel decoding, and the mask
//! prediction head (transformer decoder or the 1x1 conv baseline).

use crate::backbone::{extract_features, merge_midlevel};
use crate::config::Config;
use crate::data::Episode;
use crate::decoder::{decode_mask_embedding, predict_mask};
use crate::error::Result;
use crate::params::BoundParams;
use crate::pixel_decoder::{enrich_features, fuse_query_inputs};
use crate::protoprior::{
    average_prior_masks, average_prototypes, masked_average_pool, prior_mask,
};
use crate::tensor::{Scalar, Tape, TensorData, Var};

/// Everything a caller may want from one forward pass.
pub struct ForwardOutput<F> {
    /// [1, H/8, W/8] probability map.
    pub mask: Var,
    /// [1, C] mask embedding; absent for the conv-head baseline.
    pub embedding: Option<Var>,
    /// [C] averaged class prototype.
    pub prototype: Var,
    /// Averaged prior mask actually fed to the fusion (zeros when disabled).
    pub prior: TensorData<F>,
    /// Set when any support had no foreground after resizing.
    pub empty_support_foreground: bool,
}

pub fn forward_episode<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    cfg: &Config,
    ep: &Episode,
) -> Result<ForwardOutput<F>> {
    forward_episode_with(tape, bound, cfg, ep, None)
}

/// Forward pass with an optional externally supplied prior mask. The prior
/// is detached by construction, so finite-difference verification must pin
/// it while parameters are perturbed; everything else treats it exactly as
/// the internally computed one.
pub fn forward_episode_with<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    cfg: &Config,
    ep: &Episode,
    prior_override: Option<&TensorData<F>>,
) -> Result<ForwardOutput<F>> {
    let qimg = tape.constant(ep.query_image.map_into::<F>());
    let qf = extract_features(tape, bound, cfg, qimg)?;
    let qm = merge_midlevel(tape, bound, qf.c3, qf.c4)?;
    let q5 = tape.value(qf.c5).clone();
    let (h, w) = {
        let s = tape.value(qm).shape();
        (s[1], s[2])
    };

    let mut protos = Vec::with_capacity(ep.supports.len());
    let mut priors = Vec::with_capacity(ep.supports.len());
    let mut empty = false;
    for (img, msk) in &ep.supports {
        let simg = tape.constant(img.map_into::<F>());
        let sf = extract_features(tape, bound, cfg, simg)?;
        let sm = merge_midlevel(tape, bound, sf.c3, sf.c4)?;
        let mask = msk.map_into::<F>();
        let pooled = masked_average_pool(tape, sm, &mask)?;
        empty |= pooled.empty_foreground;
        protos.push(pooled.p);
        if cfg.use_prior && prior_override.is_none() {
            let s5 = tape.value(sf.c5).clone();
            let pm = prior_mask(&q5, &s5, &mask)?;
            empty |= pm.empty_foreground;
            priors.push(pm.m);
        }
    }
    let prototype = average_prototypes(tape, &protos)?;
    let prior = match prior_override {
        Some(p) => p.clone(),
        None if cfg.use_prior => {
            let refs: Vec<&TensorData<F>> = priors.iter().collect();
            average_prior_masks(&refs)?
        }
        None => TensorData::zeros(vec![1, h, w]),
    };

    let fused = fuse_query_inputs(tape, bound, qm, &prior, prototype)?;
    let enriched = enrich_features(tape, bound, cfg, fused)?;

    let (mask, embedding) = if cfg.use_transformer {
        let q = decode_mask_embedding(tape, bound, cfg, prototype, qm)?;
        (predict_mask(tape, q, enriched)?, Some(q))
    } else {
        let hw = bound.var("head.w")?;
        let hb = bound.var("head.b")?;
        let logits = tape.conv2d(enriched, hw, hb, 1, 1)?;
        (tape.sigmoid(logits), None)
    };
    Ok(ForwardOutput {
        mask,
        embedding,
        prototype,
        prior,
        empty_support_foreground: empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_image, binarize_mask, SynthSpec};
    use crate::params::{init_params, BoundParams};
    use crate::rng::PortableRng;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.dim = 8;
        cfg.backbone_widths = [4, 6, 8];
        cfg.c4_channels = 10;
        cfg.c5_channels = 10;
        cfg.image_size = 16;
        cfg
    }

    fn synth_episode(k: usize, size: usize, seed: u64) -> Episode {
        let mut spec = SynthSpec::default();
        spec.image_size = size;
        spec.distractors = 0;
        let mut rng = PortableRng::new(seed);
        let mut pairs: Vec<_> = (0..k + 1)
            .map(|_| {
                let (img, msk) = render_image(&spec, 0, &mut rng);
                (img, binarize_mask(&msk, 0))
            })
            .collect();
        let (query_image, query_mask) = pairs.pop().unwrap();
        Episode {
            supports: pairs,
            query_image,
            query_mask,
            class_id: 0,
        }
    }

    #[test]
    fn mask_shape_is_input_over_8() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 1);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &cfg, &mut tape);
        let ep = synth_episode(1, 16, 2);
        let out = forward_episode(&mut tape, &bound, &cfg, &ep).unwrap();
        assert_eq!(tape.value(out.mask).shape(), &[1, 2, 2]);
        assert!(tape.value(out.mask).data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(out.embedding.is_some());
    }

    #[test]
    fn five_shot_consumes_five_supports_and_averages() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 3);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &cfg, &mut tape);
        let ep = synth_episode(5, 16, 4);
        assert_eq!(ep.supports.len(), 5);
        let out = forward_episode(&mut tape, &bound, &cfg, &ep).unwrap();
        // prototype is the mean of the five per-support prototypes
        let qimg = tape.constant(ep.query_image.map_into::<f32>());
        let _ = qimg;
        let mut singles = Vec::new();
        for (img, msk) in &ep.supports {
            let sv = tape.constant(img.clone());
            let sf = extract_features(&mut tape, &bound, &cfg, sv).unwrap();
            let sm = merge_midlevel(&mut tape, &bound, sf.c3, sf.c4).unwrap();
            let pooled = masked_average_pool(&mut tape, sm, msk).unwrap();
            singles.push(tape.value(pooled.p).data().to_vec());
        }
        let got = tape.value(out.prototype).data();
        for c in 0..cfg.dim {
            let want: f32 = singles.iter().map(|s| s[c]).sum::<f32>() / 5.0;
            assert!((got[c] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn one_shot_equals_five_identical_supports() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 5);
        let ep1 = synth_episode(1, 16, 6);
        let mut ep5 = ep1.clone();
        ep5.supports = vec![ep1.supports[0].clone(); 5];

        let mut t1 = Tape::new();
        let b1 = BoundParams::bind(&params, &cfg, &mut t1);
        let o1 = forward_episode(&mut t1, &b1, &cfg, &ep1).unwrap();
        let mut t5 = Tape::new();
        let b5 = BoundParams::bind(&params, &cfg, &mut t5);
        let o5 = forward_episode(&mut t5, &b5, &cfg, &ep5).unwrap();
        for (a, b) in t1
            .value(o1.mask)
            .data()
            .iter()
            .zip(t5.value(o5.mask).data())
        {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn prior_ablation_feeds_zeros_and_still_runs() {
        let mut cfg = tiny_cfg();
        cfg.use_prior = false;
        let params = init_params(&cfg, 7);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &cfg, &mut tape);
        let ep = synth_episode(1, 16, 8);
        let out = forward_episode(&mut tape, &bound, &cfg, &ep).unwrap();
        assert!(out.prior.data().iter().all(|&v| v == 0.0));
        assert!(tape.value(out.mask).all_finite());
    }

    #[test]
    fn conv_head_baseline_skips_the_decoder() {
        let mut cfg = tiny_cfg();
        cfg.use_transformer = false;
        let params = init_params(&cfg, 9);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &cfg, &mut tape);
        let ep = synth_episode(1, 16, 10);
        let out = forward_episode(&mut tape, &bound, &cfg, &ep).unwrap();
        assert!(out.embedding.is_none());
        assert_eq!(tape.value(out.mask).shape(), &[1, 2, 2]);
    }
}
