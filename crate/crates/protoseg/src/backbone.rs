//! Shared-weight CNN backbone: three downsampling stages to H/8, then two
//! dilated stride-1 stages so the mid- and high-level maps share the H/8
//! resolution, plus the 1x1 merge of the two mid-level maps.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::tensor::{Scalar, Tape, Var};

/// Mid-level (c3, c4) and high-level (c5) feature maps, all at H/8 x W/8.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePack {
    pub c3: Var,
    pub c4: Var,
    pub c5: Var,
}

fn conv_block<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    name: &str,
    x: Var,
    stride: usize,
    dilation: usize,
) -> Result<Var> {
    let w = bound.var(&format!("{name}.w"))?;
    let b = bound.var(&format!("{name}.b"))?;
    let y = tape.conv2d(x, w, b, stride, dilation)?;
    Ok(tape.relu(y))
}

/// Runs the backbone on one [3,H,W] image. The same weights serve support
/// and query images.
pub fn extract_features<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    _cfg: &Config,
    image: Var,
) -> Result<FeaturePack> {
    let shape = tape.value(image).shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::config(format!(
            "backbone expects a [3,H,W] image, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::config(format!(
            "image size {h}x{w} must be divisible by 8"
        )));
    }
    let mut x = image;
    for stage in 1..=3 {
        let p = format!("backbone.stage{stage}");
        x = conv_block(tape, bound, &format!("{p}.conv_a"), x, 1, 1)?;
        x = conv_block(tape, bound, &format!("{p}.conv_b"), x, 1, 1)?;
        x = conv_block(tape, bound, &format!("{p}.down"), x, 2, 1)?;
    }
    let c3 = x;
    let mut y = conv_block(tape, bound, "backbone.stage4.conv_a", c3, 1, 2)?;
    y = conv_block(tape, bound, "backbone.stage4.conv_b", y, 1, 2)?;
    let c4 = y;
    let mut z = conv_block(tape, bound, "backbone.stage5.conv_a", c4, 1, 2)?;
    z = conv_block(tape, bound, "backbone.stage5.conv_b", z, 1, 2)?;
    let c5 = z;
    Ok(FeaturePack { c3, c4, c5 })
}

/// Channel-concat of the mid-level maps followed by the shared 1x1 merge
/// convolution to C channels.
pub fn merge_midlevel<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    c3: Var,
    c4: Var,
) -> Result<Var> {
    let (s3, s4) = (tape.value(c3).shape(), tape.value(c4).shape());
    if s3[1..] != s4[1..] {
        return Err(Error::ShapeMismatch {
            op: "merge_midlevel",
            lhs: s3.to_vec(),
            rhs: s4.to_vec(),
        });
    }
    let cat = tape.concat_axis0(&[c3, c4])?;
    let w = bound.var("merge.w")?;
    let b = bound.var("merge.b")?;
    tape.conv2d(cat, w, b, 1, 1)
}
