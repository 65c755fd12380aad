//! Finite-difference verification entry points: per-op spot checks plus a
//! whole-pipeline gradient check on a tiny episode, all in f64.

use crate::config::Config;
use crate::data::{binarize_mask, render_image, Episode, SynthSpec};
use crate::error::Result;
use crate::model::{forward_episode, forward_episode_with};
use crate::params::{init_params, BoundParams};
use crate::rng::PortableRng;
use crate::tensor::{grad_check, grad_check_sampled, TensorData};
use crate::train::dice_loss;

pub const GRAD_TOL: f64 = 1e-4;
const STEP: f64 = 1e-4;

fn rand_tensor(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> TensorData<f64> {
    let mut rng = PortableRng::new(seed);
    let n: usize = shape.iter().product();
    TensorData::new(shape, (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).unwrap()
}

/// Max relative finite-difference error per differentiable op family.
pub fn op_grad_checks() -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    let x = rand_tensor(vec![2, 3], -1.0, 1.0, 1);
    out.push((
        "elementwise",
        grad_check(
            |t, v| {
                let s = t.sigmoid(v);
                let r = t.relu(s);
                let m = t.mul(r, v)?;
                Ok(t.sum_all(m))
            },
            &x,
            STEP,
        )?,
    ));
    out.push((
        "matmul",
        grad_check(
            |t, v| {
                let w = t.constant(rand_tensor(vec![3, 2], -1.0, 1.0, 2));
                let y = t.matmul(v, w)?;
                Ok(t.sum_all(y))
            },
            &x,
            STEP,
        )?,
    ));
    let img = rand_tensor(vec![2, 4, 4], -1.0, 1.0, 3);
    out.push((
        "conv2d",
        grad_check(
            |t, v| {
                let k = t.constant(rand_tensor(vec![3, 2, 3, 3], -0.5, 0.5, 4));
                let b = t.constant(rand_tensor(vec![3], -0.1, 0.1, 5));
                let y = t.conv2d(v, k, b, 1, 1)?;
                Ok(t.sum_all(y))
            },
            &img,
            STEP,
        )?,
    ));
    out.push((
        "softmax",
        grad_check(
            |t, v| {
                let s = t.softmax(v);
                let w = t.constant(rand_tensor(vec![2, 3], -1.0, 1.0, 6));
                let m = t.mul(s, w)?;
                Ok(t.sum_all(m))
            },
            &x,
            STEP,
        )?,
    ));
    out.push((
        "layer_norm",
        grad_check(
            |t, v| {
                let g = t.constant(rand_tensor(vec![3], 0.5, 1.5, 7));
                let b = t.constant(rand_tensor(vec![3], -0.5, 0.5, 8));
                let y = t.layer_norm(v, g, b, 1e-5)?;
                let w = t.constant(rand_tensor(vec![2, 3], -1.0, 1.0, 9));
                let m = t.mul(y, w)?;
                Ok(t.sum_all(m))
            },
            &x,
            STEP,
        )?,
    ));
    out.push((
        "resize_pool",
        grad_check(
            |t, v| {
                let up = t.bilinear_resize(v, 7, 5)?;
                let down = t.avg_pool_to(up, 2, 2)?;
                Ok(t.sum_all(down))
            },
            &img,
            STEP,
        )?,
    ));
    Ok(out)
}

/// Configuration of the pipeline check: 16x16 images through narrow widths,
/// so the full forward + dice loss stays cheap in f64. 16 is the floor:
/// 8x8 would collapse the feature maps to a single position, where attention
/// softmaxes over one element and loses its gradient to the Q projection.
pub fn pipeline_check_config() -> Config {
    let mut cfg = Config::default();
    cfg.dim = 4;
    cfg.n_heads = 2;
    cfg.backbone_widths = [2, 3, 4];
    cfg.c4_channels = 4;
    cfg.c5_channels = 4;
    cfg.image_size = 16;
    cfg
}

fn tiny_episode(seed: u64) -> Episode {
    let mut spec = SynthSpec::default();
    spec.image_size = 16;
    spec.distractors = 0;
    let mut rng = PortableRng::new(seed);
    let (simg, smsk) = render_image(&spec, 0, &mut rng);
    let (qimg, qmsk) = render_image(&spec, 0, &mut rng);
    Episode {
        supports: vec![(simg, binarize_mask(&smsk, 0))],
        query_image: qimg,
        query_mask: binarize_mask(&qmsk, 0),
        class_id: 0,
    }
}

/// Whole-pipeline gradient check: forward episode + dice loss differentiated
/// against every parameter tensor, probing a deterministic random subset of
/// coordinates per tensor (exhaustive differencing would need two forward
/// passes per scalar parameter).
///
/// Every parameter gets a small random jitter first. At the pristine
/// initialization the zero biases put many relu pre-activations exactly at
/// the kink (dead channels feed exact zeros forward), where the analytic
/// subgradient and a central difference legitimately disagree at any step
/// size; jitter moves the check to a generic point. The pipeline step is
/// also smaller than the per-op one so that the remaining kinks are
/// unlikely to fall inside any difference window.
pub fn pipeline_grad_check(coords_per_tensor: usize, seed: u64) -> Result<f64> {
    const PIPELINE_STEP: f64 = 1e-5;
    let cfg = pipeline_check_config();
    let mut params = init_params(&cfg, seed).cast::<f64>();
    let mut jitter = PortableRng::new(seed.wrapping_add(3));
    let names_all: Vec<String> = params.tensors().keys().cloned().collect();
    for name in &names_all {
        for v in params.get_mut(name)?.data_mut() {
            *v += jitter.uniform_in(-0.05, 0.05);
        }
    }
    let names: Vec<String> = params.tensors().keys().cloned().collect();
    let tensors: Vec<TensorData<f64>> = params.tensors().values().cloned().collect();
    let ep = tiny_episode(seed.wrapping_add(1));
    // the prior mask is detached from the tape, so it must stay fixed while
    // parameters are perturbed: compute it once at the initial weights
    let prior = {
        let mut tape = crate::tensor::Tape::<f64>::new();
        let bound = BoundParams::bind(&params, &cfg, &mut tape);
        forward_episode(&mut tape, &bound, &cfg, &ep)?.prior
    };
    grad_check_sampled(
        |tape, vars| {
            let bound = BoundParams::from_pairs(
                names.iter().cloned().zip(vars.iter().copied()),
            );
            let out = forward_episode_with(tape, &bound, &cfg, &ep, Some(&prior))?;
            dice_loss(tape, out.mask, &ep.query_mask.map_into::<f64>())
        },
        &tensors,
        PIPELINE_STEP,
        coords_per_tensor,
        seed.wrapping_add(2),
    )
}
