//! Pixel decoder: fuses query features with the prior mask and the
//! broadcast prototype, then enriches the result through a multi-scale
//! top-down branch stack into the final pixel embedding.

use crate::config::{Config, PixelDecoderKind};
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::tensor::{Scalar, Tape, TensorData, Var};

/// Channel-concat [xqm | prior | broadcast prototype] (2C+1 channels) and
/// project back to C channels with a 1x1 conv.
pub fn fuse_query_inputs<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    xqm: Var,
    prior: &TensorData<F>,
    proto: Var,
) -> Result<Var> {
    let xs = tape.value(xqm).shape().to_vec();
    if xs.len() != 3 {
        return Err(Error::contract(format!(
            "fuse_query_inputs expects [C,h,w] query features, got {xs:?}"
        )));
    }
    let (h, w) = (xs[1], xs[2]);
    if prior.shape() != [1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "fuse_query_inputs",
            lhs: xs,
            rhs: prior.shape().to_vec(),
        });
    }
    let pr = tape.constant(prior.clone());
    let pb = tape.broadcast_chan(proto, h, w)?;
    let cat = tape.concat_axis0(&[xqm, pr, pb])?;
    let fw = bound.var("fuse.w")?;
    let fb = bound.var("fuse.b")?;
    tape.conv2d(cat, fw, fb, 1, 1)
}

fn branch_head<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    scale: usize,
    x: Var,
) -> Result<Var> {
    let (h, w) = {
        let s = tape.value(x).shape();
        (s[1], s[2])
    };
    let pooled = tape.avg_pool_to(x, (h / scale).max(1), (w / scale).max(1))?;
    let w1 = bound.var(&format!("pixdec.branch{scale}.conv1.w"))?;
    let b1 = bound.var(&format!("pixdec.branch{scale}.conv1.b"))?;
    let y = tape.conv2d(pooled, w1, b1, 1, 1)?;
    Ok(tape.relu(y))
}

fn branch_tail<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    scale: usize,
    x: Var,
) -> Result<Var> {
    let w3 = bound.var(&format!("pixdec.branch{scale}.conv3.w"))?;
    let b3 = bound.var(&format!("pixdec.branch{scale}.conv3.b"))?;
    let y = tape.conv2d(x, w3, b3, 1, 1)?;
    Ok(tape.relu(y))
}

/// Multi-scale enrichment: pooled branches at scales {1, 1/2, 1/4}, each
/// 1x1 conv + ReLU, coarser outputs upsampled and added into the next
/// finer branch before its 3x3 conv, then a 1x1 merge. Output shape equals
/// input shape.
pub fn enrich_features<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    cfg: &Config,
    x: Var,
) -> Result<Var> {
    match cfg.pixel_decoder {
        PixelDecoderKind::Fem => {
            let mut carry: Option<Var> = None;
            for scale in [4usize, 2, 1] {
                let head = branch_head(tape, bound, scale, x)?;
                let pre = match carry {
                    Some(coarser) => {
                        let (bh, bw) = {
                            let s = tape.value(head).shape();
                            (s[1], s[2])
                        };
                        let up = tape.bilinear_resize(coarser, bh, bw)?;
                        tape.add(head, up)?
                    }
                    None => head,
                };
                carry = Some(branch_tail(tape, bound, scale, pre)?);
            }
            let finest = carry.unwrap();
            let ow = bound.var("pixdec.out.w")?;
            let ob = bound.var("pixdec.out.b")?;
            tape.conv2d(finest, ow, ob, 1, 1)
        }
        PixelDecoderKind::ConvStack => {
            let w1 = bound.var("pixdec.stack1.w")?;
            let b1 = bound.var("pixdec.stack1.b")?;
            let y = tape.conv2d(x, w1, b1, 1, 1)?;
            let y = tape.relu(y);
            let w2 = bound.var("pixdec.stack2.w")?;
            let b2 = bound.var("pixdec.stack2.b")?;
            tape.conv2d(y, w2, b2, 1, 1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_params, BoundParams};
    use crate::rng::PortableRng;
    use crate::tensor::TensorData;

    fn small_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.dim = 4;
        cfg.backbone_widths = [2, 3, 4];
        cfg.c4_channels = 5;
        cfg.c5_channels = 6;
        cfg
    }

    fn rand_map(c: usize, h: usize, w: usize, seed: u64) -> TensorData<f32> {
        let mut rng = PortableRng::new(seed);
        TensorData::new(
            vec![c, h, w],
            (0..c * h * w).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn fuse_concat_is_129_channels_for_default_dim() {
        let cfg = Config::default();
        let params = init_params(&cfg, 1);
        assert_eq!(params.get("fuse.w").unwrap().shape(), &[64, 129, 1, 1]);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &cfg, &mut tape);
        let xqm = tape.constant(rand_map(64, 2, 2, 2));
        let prior = TensorData::filled(vec![1, 2, 2], 0.5f32);
        let proto = tape.constant(TensorData::filled(vec![64], 0.1f32));
        let out = fuse_query_inputs(&mut tape, &bound, xqm, &prior, proto).unwrap();
        assert_eq!(tape.value(out).shape(), &[64, 2, 2]);
    }

    #[test]
    fn fuse_zero_weights_gives_bias_map() {
        let cfg = small_cfg();
        let mut params = init_params(&cfg, 3);
        let fw = params.get_mut("fuse.w").unwrap();
        for v in fw.data_mut() {
            *v = 0.0;
        }
        let fb = params.get_mut("fuse.b").unwrap();
        for v in fb.data_mut() {
            *v = -1.25;
        }
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &cfg, &mut tape);
        let xqm = tape.constant(rand_map(4, 3, 3, 4));
        let prior = TensorData::filled(vec![1, 3, 3], 1.0f32);
        let proto = tape.constant(TensorData::filled(vec![4], 2.0f32));
        let out = fuse_query_inputs(&mut tape, &bound, xqm, &prior, proto).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn fuse_hand_arithmetic_single_pixel() {
        // C=1: inputs [xqm=2 | prior=0.5 | proto=3], kernel [1,2,3], bias 0.25
        // -> 1*2 + 2*0.5 + 3*3 + 0.25 = 12.25
        let mut cfg = small_cfg();
        cfg.dim = 1;
        cfg.backbone_widths = [1, 1, 1];
        cfg.c4_channels = 1;
        cfg.c5_channels = 1;
        let mut params = init_params(&cfg, 3);
        *params.get_mut("fuse.w").unwrap() =
            TensorData::new(vec![1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        *params.get_mut("fuse.b").unwrap() = TensorData::filled(vec![1], 0.25);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &cfg, &mut tape);
        let xqm = tape.constant(TensorData::filled(vec![1, 1, 1], 2.0));
        let prior = TensorData::filled(vec![1, 1, 1], 0.5f32);
        let proto = tape.constant(TensorData::filled(vec![1], 3.0));
        let out = fuse_query_inputs(&mut tape, &bound, xqm, &prior, proto).unwrap();
        assert_eq!(tape.value(out).data(), &[12.25]);
    }

    #[test]
    fn fuse_spatial_mismatch_is_error() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 5);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &cfg, &mut tape);
        let xqm = tape.constant(rand_map(4, 3, 3, 6));
        let prior = TensorData::filled(vec![1, 2, 2], 0.5f32);
        let proto = tape.constant(TensorData::filled(vec![4], 0.0f32));
        assert!(matches!(
            fuse_query_inputs(&mut tape, &bound, xqm, &prior, proto),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn enrich_preserves_shape_at_multiple_sizes() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 7);
        for (h, w) in [(8, 8), (4, 12), (16, 16)] {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&params, &cfg, &mut tape);
            let x = tape.constant(rand_map(4, h, w, 8));
            let out = enrich_features(&mut tape, &bound, &cfg, x).unwrap();
            assert_eq!(tape.value(out).shape(), &[4, h, w]);
            assert!(tape.value(out).all_finite());
        }
    }

    #[test]
    fn enrich_zero_input_zero_bias_gives_zero() {
        // all biases initialize to zero, so a zero input stays zero through
        // every pooled branch
        let cfg = small_cfg();
        let params = init_params(&cfg, 9);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &cfg, &mut tape);
        let x = tape.constant(TensorData::zeros(vec![4, 8, 8]));
        let out = enrich_features(&mut tape, &bound, &cfg, x).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convstack_matches_direct_composition() {
        let mut cfg = small_cfg();
        cfg.pixel_decoder = PixelDecoderKind::ConvStack;
        let params = init_params(&cfg, 11);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &cfg, &mut tape);
        let x = tape.constant(rand_map(4, 6, 6, 12));
        let got = enrich_features(&mut tape, &bound, &cfg, x).unwrap();
        // independent composition of the same convs on the same tape
        let w1 = bound.var("pixdec.stack1.w").unwrap();
        let b1 = bound.var("pixdec.stack1.b").unwrap();
        let w2 = bound.var("pixdec.stack2.w").unwrap();
        let b2 = bound.var("pixdec.stack2.b").unwrap();
        let y = tape.conv2d(x, w1, b1, 1, 1).unwrap();
        let y = tape.relu(y);
        let want = tape.conv2d(y, w2, b2, 1, 1).unwrap();
        assert_eq!(tape.value(got).data(), tape.value(want).data());
    }

    #[test]
    fn gradient_reaches_prototype_through_fusion() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 13);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &cfg, &mut tape);
        let xqm = tape.constant(rand_map(4, 8, 8, 14));
        let prior = TensorData::filled(vec![1, 8, 8], 0.3f32);
        let proto = tape.leaf(TensorData::new(vec![4], vec![0.1, -0.2, 0.3, 0.4]).unwrap(), true);
        let fused = fuse_query_inputs(&mut tape, &bound, xqm, &prior, proto).unwrap();
        let out = enrich_features(&mut tape, &bound, &cfg, fused).unwrap();
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        let g = tape.grad(proto).expect("prototype must receive gradient");
        assert!(g.iter().any(|&v| v != 0.0));
    }
}
