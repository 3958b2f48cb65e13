//! Binary disk targets and the focal-weighted BCE objective.

use crate::diff::{Primitive, Var};
use crate::error::{Error, Result};
use crate::params::Ctx;
use crate::tensor::Tensor4;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthSpec {
    pub center: (f64, f64),
    pub radius: f64,
    pub visible: bool,
}

impl GroundTruthSpec {
    pub fn visible(x: f64, y: f64, radius: f64) -> Self {
        GroundTruthSpec {
            center: (x, y),
            radius,
            visible: true,
        }
    }

    pub fn hidden(radius: f64) -> Self {
        GroundTruthSpec {
            center: (0.0, 0.0),
            radius,
            visible: false,
        }
    }
}

/// `(1, 1, height, width)` map with ones on the disk `(x−cx)² + (y−cy)² ≤ r²`.
pub fn make_gt_heatmap(spec: &GroundTruthSpec, height: usize, width: usize) -> Result<Tensor4> {
    if height == 0 || width == 0 {
        return Err(Error::Invalid("heatmap dimensions must be positive".into()));
    }
    if !(spec.radius > 0.0) {
        return Err(Error::Invalid(format!("radius must be positive, got {}", spec.radius)));
    }
    let mut out = Tensor4::zeros([1, 1, height, width]);
    if !spec.visible {
        return Ok(out);
    }
    let (cx, cy) = spec.center;
    let r2 = spec.radius * spec.radius;
    for y in 0..height {
        for x in 0..width {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r2 {
                out.set([0, 0, y, x], 1.0);
            }
        }
    }
    Ok(out)
}

/// Scalar loss with the pixel count it averages over.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub count: usize,
}

/// `−(1/N) Σ (1−p)² y log p + p² (1−y) log(1−p)` with clamped `p`.
pub fn wbce_loss(p: &Tensor4, y: &Tensor4) -> Result<LossValue> {
    if p.shape() != y.shape() {
        return Err(Error::shape("wbce", format!("{:?} vs {:?}", p.shape(), y.shape())));
    }
    let n = p.len();
    let s: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&pi, &yi)| {
            let pi = pi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            (1.0 - pi).powi(2) * yi * pi.ln() + pi * pi * (1.0 - yi) * (1.0 - pi).ln()
        })
        .sum();
    Ok(LossValue {
        loss: -s / n as f64,
        count: n,
    })
}

/// Tape version of [`wbce_loss`].
pub fn wbce_on_tape(ctx: &mut Ctx, p: Var, target: &Tensor4) -> Result<Var> {
    if ctx.value(p).shape() != target.shape() {
        return Err(Error::shape(
            "wbce",
            format!("{:?} vs {:?}", ctx.value(p).shape(), target.shape()),
        ));
    }
    let y = ctx.constant(target.clone());
    ctx.apply(Primitive::Wbce { clamp: PROB_CLAMP }, &[p, y])
}
