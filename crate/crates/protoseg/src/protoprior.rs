//! Class prototype via masked average pooling, k-shot averaging, and the
//! training-free prior mask from high-level feature affinity.
//!
//! The prior mask is computed on raw buffers outside the tape: no gradient
//! flows through it by construction.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, TensorData, Var};

pub const MAP_EPS: f64 = 1e-6;
pub const COSINE_EPS: f64 = 1e-8;

/// Result of masked average pooling: the prototype vector plus a flag set
/// when the resized support mask had no foreground mass.
pub struct PooledPrototype {
    /// [C] channel vector.
    pub p: Var,
    pub empty_foreground: bool,
}

/// Bilinear resize of a raw [1,H,W] mask to (h, w), off any gradient path.
pub fn resize_mask<F: Scalar>(mask: &TensorData<F>, h: usize, w: usize) -> Result<TensorData<F>> {
    let mut scratch = Tape::new();
    let m = scratch.constant(mask.clone());
    let r = scratch.bilinear_resize(m, h, w)?;
    Ok(scratch.value(r).clone())
}

/// Masked average pooling: the support mask is resized to the feature size
/// and used as soft weights; p_c = sum(x_c * m) / max(sum(m), eps).
pub fn masked_average_pool<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    mask: &TensorData<F>,
) -> Result<PooledPrototype> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::contract(format!(
            "masked_average_pool expects [C,h,w] features, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let resized = resize_mask(mask, h, w)?;
    let mass: f64 = resized.data().iter().map(|v| v.to_f64_c()).sum();
    let empty = mass <= MAP_EPS;
    let denom = mass.max(MAP_EPS);
    let m = tape.constant(resized);
    let mb = tape.broadcast_spat(m, c)?;
    let weighted = tape.mul(x, mb)?;
    let sums = tape.sum_spatial(weighted)?;
    let p = tape.scale(sums, F::from_f64_c(1.0 / denom));
    Ok(PooledPrototype {
        p,
        empty_foreground: empty,
    })
}

/// Elementwise mean of k prototypes (order-invariant).
pub fn average_prototypes<F: Scalar>(tape: &mut Tape<F>, protos: &[Var]) -> Result<Var> {
    average_vars(tape, protos, "average_prototypes")
}

fn average_vars<F: Scalar>(tape: &mut Tape<F>, vars: &[Var], what: &str) -> Result<Var> {
    if vars.is_empty() {
        return Err(Error::contract(format!("{what}: empty input list")));
    }
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, F::from_f64_c(1.0 / vars.len() as f64)))
}

/// Training-free prior mask: per query pixel, the maximum cosine similarity
/// against support foreground pixels (support mask resized and thresholded
/// at 0.5), min-max normalized to [0,1]. A constant similarity field
/// normalizes to all zeros; an empty foreground yields zeros plus a flag.
pub struct PriorMask<F> {
    /// [1,h,w] values in [0,1].
    pub m: TensorData<F>,
    pub empty_foreground: bool,
}

pub fn prior_mask<F: Scalar>(
    q5: &TensorData<F>,
    s5: &TensorData<F>,
    support_mask: &TensorData<F>,
) -> Result<PriorMask<F>> {
    let (qs, ss) = (q5.shape(), s5.shape());
    if qs.len() != 3 || ss.len() != 3 || qs[0] != ss[0] {
        return Err(Error::ShapeMismatch {
            op: "prior_mask",
            lhs: qs.to_vec(),
            rhs: ss.to_vec(),
        });
    }
    let (c, h, w) = (qs[0], qs[1], qs[2]);
    let (sh, sw) = (ss[1], ss[2]);
    let resized = resize_mask(support_mask, sh, sw)?;
    let fg: Vec<usize> = (0..sh * sw)
        .filter(|&i| resized.data()[i].to_f64_c() >= 0.5)
        .collect();
    if fg.is_empty() {
        return Ok(PriorMask {
            m: TensorData::zeros(vec![1, h, w]),
            empty_foreground: true,
        });
    }
    let feat = |t: &TensorData<F>, idx: usize, hw: usize| -> Vec<f64> {
        (0..c).map(|ch| t.data()[ch * hw + idx].to_f64_c()).collect()
    };
    let norms_s: Vec<f64> = fg
        .iter()
        .map(|&v| feat(s5, v, sh * sw).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut relation = vec![0.0f64; h * w];
    for u in 0..h * w {
        let fq = feat(q5, u, h * w);
        let nq = fq.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut best = f64::NEG_INFINITY;
        for (fi, &v) in fg.iter().enumerate() {
            let fs = feat(s5, v, sh * sw);
            let dot: f64 = fq.iter().zip(fs.iter()).map(|(a, b)| a * b).sum();
            let cos = dot / (nq * norms_s[fi]).max(COSINE_EPS);
            best = best.max(cos);
        }
        relation[u] = best;
    }
    let lo = relation.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = relation.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // floating-point jitter makes a mathematically-constant field vary at
    // the last few bits; treat spreads below this as constant
    let data: Vec<F> = if hi - lo <= 1e-9 {
        vec![F::zero(); h * w]
    } else {
        relation
            .iter()
            .map(|&r| F::from_f64_c((r - lo) / (hi - lo)))
            .collect()
    };
    Ok(PriorMask {
        m: TensorData::new(vec![1, h, w], data)?,
        empty_foreground: false,
    })
}

/// Elementwise mean of k prior masks.
pub fn average_prior_masks<F: Scalar>(masks: &[&TensorData<F>]) -> Result<TensorData<F>> {
    if masks.is_empty() {
        return Err(Error::contract("average_prior_masks: empty input list"));
    }
    let shape = masks[0].shape().to_vec();
    for m in masks {
        if m.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "average_prior_masks",
                lhs: shape,
                rhs: m.shape().to_vec(),
            });
        }
    }
    let inv = 1.0 / masks.len() as f64;
    let data: Vec<F> = (0..masks[0].numel())
        .map(|i| {
            F::from_f64_c(masks.iter().map(|m| m.data()[i].to_f64_c()).sum::<f64>() * inv)
        })
        .collect();
    TensorData::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::PortableRng;

    fn t(shape: &[usize], data: &[f64]) -> TensorData<f64> {
        TensorData::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn map_constant_feature_gives_constant_prototype() {
        let mut tape = Tape::new();
        let x = tape.constant(TensorData::filled(vec![3, 2, 2], 0.7f64));
        let mask = t(&[1, 2, 2], &[1.0, 0.0, 1.0, 0.0]);
        let out = masked_average_pool(&mut tape, x, &mask).unwrap();
        for &v in tape.value(out.p).data() {
            assert!((v - 0.7).abs() < 1e-9);
        }
        assert!(!out.empty_foreground);
    }

    #[test]
    fn map_hand_masked_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let mask = t(&[1, 2, 2], &[1.0, 1.0, 0.0, 0.0]);
        let out = masked_average_pool(&mut tape, x, &mask).unwrap();
        assert!((tape.value(out.p).data()[0] - 1.5).abs() < 1e-9);
    }

    #[test]
    fn map_empty_mask_guards_to_zero_with_warning() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2, 2], &[1.0; 8]));
        let mask = TensorData::zeros(vec![1, 2, 2]);
        let out = masked_average_pool(&mut tape, x, &mask).unwrap();
        assert!(tape.value(out.p).data().iter().all(|&v| v == 0.0));
        assert!(out.empty_foreground);
    }

    #[test]
    fn map_invariant_under_joint_spatial_permutation() {
        let mut rng = PortableRng::new(31);
        let feats: Vec<f64> = (0..2 * 4).map(|_| rng.uniform()).collect();
        let mvals: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
        let perm = [2usize, 0, 3, 1];
        let feats_p: Vec<f64> = (0..2)
            .flat_map(|c| perm.iter().map(move |&i| (c, i)))
            .map(|(c, i)| feats[c * 4 + i])
            .collect();
        let mvals_p: Vec<f64> = perm.iter().map(|&i| mvals[i]).collect();

        let mut tape = Tape::new();
        let x1 = tape.constant(t(&[2, 2, 2], &feats));
        let a = masked_average_pool(&mut tape, x1, &t(&[1, 2, 2], &mvals)).unwrap();
        let x2 = tape.constant(t(&[2, 2, 2], &feats_p));
        let b = masked_average_pool(&mut tape, x2, &t(&[1, 2, 2], &mvals_p)).unwrap();
        for (u, v) in tape.value(a.p).data().iter().zip(tape.value(b.p).data()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn map_prototype_in_convex_hull_of_masked_features() {
        let mut rng = PortableRng::new(32);
        let feats: Vec<f64> = (0..3 * 9).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let mvals: Vec<f64> = (0..9).map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 }).collect();
        if mvals.iter().sum::<f64>() == 0.0 {
            return;
        }
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 3, 3], &feats));
        let out = masked_average_pool(&mut tape, x, &t(&[1, 3, 3], &mvals)).unwrap();
        for c in 0..3 {
            let masked: Vec<f64> = (0..9)
                .filter(|&i| mvals[i] == 1.0)
                .map(|i| feats[c * 9 + i])
                .collect();
            let lo = masked.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = tape.value(out.p).data()[c];
            assert!(p >= lo - 1e-9 && p <= hi + 1e-9);
        }
    }

    #[test]
    fn average_prototypes_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 3.0]));
        let b = tape.constant(t(&[2], &[2.0, 5.0]));
        // k = 1 is the identity
        let one = average_prototypes(&mut tape, &[a]).unwrap();
        assert_eq!(tape.value(one).data(), &[1.0, 3.0]);
        // hand mean
        let m = average_prototypes(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.value(m).data(), &[1.5, 4.0]);
        // v and -v cancel
        let neg = tape.scale(a, -1.0);
        let z = average_prototypes(&mut tape, &[a, neg]).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
        // empty list is a contract error
        assert!(average_prototypes(&mut tape, &[]).is_err());
    }

    #[test]
    fn prior_constant_field_normalizes_to_zeros() {
        // q5 == s5 with full foreground: relation is 1 everywhere, min-max
        // of a constant field maps to zeros
        let mut rng = PortableRng::new(33);
        let f: Vec<f64> = (0..2 * 4).map(|_| rng.uniform_in(0.1, 1.0)).collect();
        let q5 = t(&[2, 2, 2], &f);
        let mask = TensorData::filled(vec![1, 2, 2], 1.0f64);
        let out = prior_mask(&q5, &q5, &mask).unwrap();
        assert!(out.m.data().iter().all(|&v| v == 0.0));
        assert!(!out.empty_foreground);
    }

    #[test]
    fn prior_collinear_pixel_maps_to_one_orthogonal_to_zero() {
        // one support foreground feature along channel 0; query pixel 0 is
        // collinear with it, the rest orthogonal
        let q5 = t(&[2, 2, 2], &[2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let s5 = t(&[2, 1, 1], &[1.0, 0.0]);
        let mask = TensorData::filled(vec![1, 1, 1], 1.0f64);
        let out = prior_mask(&q5, &s5, &mask).unwrap();
        let d = out.m.data();
        assert!((d[0] - 1.0).abs() < 1e-9);
        for &v in &d[1..] {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn prior_matches_brute_force_double_loop() {
        let mut rng = PortableRng::new(34);
        let q: Vec<f64> = (0..2 * 4).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let s: Vec<f64> = (0..2 * 4).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mvals = [1.0, 0.0, 1.0, 1.0];
        let q5 = t(&[2, 2, 2], &q);
        let s5 = t(&[2, 2, 2], &s);
        let out = prior_mask(&q5, &s5, &t(&[1, 2, 2], &mvals)).unwrap();

        // independent oracle: direct double loop over all pixel pairs
        let mut raw = [0.0f64; 4];
        for u in 0..4 {
            let qu = [q[u], q[4 + u]];
            let nq = (qu[0] * qu[0] + qu[1] * qu[1]).sqrt();
            let mut best = f64::NEG_INFINITY;
            for v in 0..4 {
                if mvals[v] < 0.5 {
                    continue;
                }
                let sv = [s[v], s[4 + v]];
                let ns = (sv[0] * sv[0] + sv[1] * sv[1]).sqrt();
                let cos = (qu[0] * sv[0] + qu[1] * sv[1]) / (nq * ns).max(1e-8);
                best = best.max(cos);
            }
            raw[u] = best;
        }
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (got, &r) in out.m.data().iter().zip(raw.iter()) {
            let want = if hi > lo { (r - lo) / (hi - lo) } else { 0.0 };
            assert!((got - want).abs() < 1e-9);
        }
        assert!(out.m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn prior_empty_foreground_yields_zeros_and_warning() {
        let q5 = TensorData::filled(vec![2, 2, 2], 1.0f64);
        let s5 = TensorData::filled(vec![2, 2, 2], 1.0f64);
        let mask = TensorData::zeros(vec![1, 2, 2]);
        let out = prior_mask(&q5, &s5, &mask).unwrap();
        assert!(out.empty_foreground);
        assert!(out.m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn average_prior_masks_examples() {
        let a = t(&[1, 2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let b = t(&[1, 2, 2], &[1.0, 1.0, 0.0, 0.0]);
        let one = average_prior_masks(&[&a]).unwrap();
        assert_eq!(one.data(), a.data());
        let m = average_prior_masks(&[&a, &b]).unwrap();
        assert_eq!(m.data(), &[0.5, 1.0, 0.5, 0.0]);
        let zeros = TensorData::zeros(vec![1, 2, 2]);
        let ones = TensorData::filled(vec![1, 2, 2], 1.0f64);
        let half = average_prior_masks(&[&zeros, &ones]).unwrap();
        assert!(half.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn prior_has_no_gradient_path() {
        // prior is computed on raw buffers; nothing can reach the tape
        let mut tape = Tape::<f64>::new();
        let q5v = tape.leaf(TensorData::filled(vec![2, 2, 2], 1.0), true);
        let q5 = tape.value(q5v).clone();
        let mask = TensorData::filled(vec![1, 2, 2], 1.0f64);
        let out = prior_mask(&q5, &q5, &mask).unwrap();
        let pv = tape.constant(out.m);
        let s = tape.sum_all(pv);
        tape.backward(s).unwrap();
        assert!(tape.grad(q5v).is_none());
    }
}
