//! Motion direction decoupling.
//!
//! Frame differences are split into brightening and darkening polarity
//! fields, each mapped through a learnable sigmoid, and interleaved with the
//! raw frames into a 13-channel network input:
//! `[I(t-1), A(t-1→t), I(t), A(t→t+1), I(t+1)]`.

use crate::diff::{ParamId, Primitive, Var};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor4;

/// Small constant in the attention slope denominator.
pub const ATTENTION_EPS: f64 = 1e-6;
pub const INIT_ALPHA: f64 = 1.0;
pub const INIT_BETA: f64 = 0.0;

/// Three consecutive RGB frames, each `(B, 3, H, W)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTriplet {
    frames: [Tensor4; 3],
}

impl FrameTriplet {
    pub fn new(prev: Tensor4, current: Tensor4, next: Tensor4) -> Result<Self> {
        let shape = prev.shape();
        for f in [&prev, &current, &next] {
            if f.shape() != shape {
                return Err(Error::shape(
                    "frame_triplet",
                    format!("{:?} vs {:?}", shape, f.shape()),
                ));
            }
            if f.channels() != 3 {
                return Err(Error::shape(
                    "frame_triplet",
                    format!("frames must have 3 channels, got {}", f.channels()),
                ));
            }
            if f.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Invalid("frame values must lie in [0, 1]".into()));
            }
        }
        Ok(FrameTriplet {
            frames: [prev, current, next],
        })
    }

    pub fn prev(&self) -> &Tensor4 {
        &self.frames[0]
    }

    pub fn current(&self) -> &Tensor4 {
        &self.frames[1]
    }

    pub fn next(&self) -> &Tensor4 {
        &self.frames[2]
    }

    pub fn frames(&self) -> &[Tensor4; 3] {
        &self.frames
    }

    pub fn shape(&self) -> [usize; 4] {
        self.frames[0].shape()
    }

    /// Stack several single-window triplets along the batch axis.
    pub fn batch(items: &[&FrameTriplet]) -> Result<Self> {
        let pick = |i: usize| -> Result<Tensor4> {
            let parts: Vec<&Tensor4> = items.iter().map(|t| &t.frames[i]).collect();
            Tensor4::concat_batch(&parts)
        };
        Ok(FrameTriplet {
            frames: [pick(0)?, pick(1)?, pick(2)?],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interval {
    PrevToCurrent,
    CurrentToNext,
}

/// Signed frame difference `later − earlier`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffMap {
    pub delta: Tensor4,
    pub interval: Interval,
}

/// Nonnegative brightening (`positive`) and darkening (`negative`) parts of a difference.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarityFields {
    pub positive: Tensor4,
    pub negative: Tensor4,
}

/// Slope/offset parameters of the attention sigmoid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionParams {
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
}

impl Default for AttentionParams {
    fn default() -> Self {
        AttentionParams {
            alpha: INIT_ALPHA,
            beta: INIT_BETA,
            eps: ATTENTION_EPS,
        }
    }
}

impl AttentionParams {
    pub fn new(alpha: f64, beta: f64) -> Self {
        AttentionParams {
            alpha,
            beta,
            eps: ATTENTION_EPS,
        }
    }

    /// `k(α) = 5 / (0.45·|tanh α| + ε)`
    pub fn slope(&self) -> f64 {
        crate::diff::attention_slope(self.alpha, self.eps)
    }

    /// `m(β) = 0.6·tanh β`
    pub fn offset(&self) -> f64 {
        crate::diff::attention_offset(self.beta)
    }

    /// `σ(k·(|x| − m))` for a single value.
    pub fn eval(&self, x: f64) -> f64 {
        crate::diff::sigmoid(self.slope() * (x.abs() - self.offset()))
    }
}

pub fn raw_difference(earlier: &Tensor4, later: &Tensor4, interval: Interval) -> Result<DiffMap> {
    if earlier.shape() != later.shape() {
        return Err(Error::shape(
            "raw_difference",
            format!("{:?} vs {:?}", earlier.shape(), later.shape()),
        ));
    }
    Ok(DiffMap {
        delta: later.zip_map(earlier, |l, e| l - e)?,
        interval,
    })
}

pub fn polarity_decompose(delta: &Tensor4) -> Result<PolarityFields> {
    delta.ensure_finite("polarity_decompose")?;
    Ok(PolarityFields {
        positive: delta.map(|v| v.max(0.0)),
        negative: delta.map(|v| (-v).max(0.0)),
    })
}

/// Per-pixel mean over channels: `(B, C, H, W) → (B, 1, H, W)`.
pub fn channel_mean(t: &Tensor4) -> Tensor4 {
    let [b, c, h, w] = t.shape();
    let mut out = Tensor4::zeros([b, 1, h, w]);
    for bi in 0..b {
        let dst = out.plane_slice_mut(bi, 0);
        for ci in 0..c {
            for (d, s) in dst.iter_mut().zip(t.plane_slice(bi, ci)) {
                *d += s;
            }
        }
        for d in dst.iter_mut() {
            *d /= c as f64;
        }
    }
    out
}

/// Elementwise attention mapping of an intensity field.
pub fn attention_map(x: &Tensor4, params: &AttentionParams) -> Tensor4 {
    let k = params.slope();
    let m = params.offset();
    x.map(|v| crate::diff::sigmoid(k * (v.abs() - m)))
}

/// Two-channel stack `[A(P⁺), A(P⁻)]` for one interval.
pub fn attention_maps(diff: &DiffMap, params: &AttentionParams) -> Result<Tensor4> {
    let pol = polarity_decompose(&diff.delta)?;
    let pos = attention_map(&channel_mean(&pol.positive), params);
    let neg = attention_map(&channel_mean(&pol.negative), params);
    Tensor4::concat_channels(&[&pos, &neg])
}

/// The 13-channel interleaved input.
pub fn build_input(triplet: &FrameTriplet, a1: &Tensor4, a2: &Tensor4) -> Result<Tensor4> {
    let [b, _, h, w] = triplet.shape();
    for a in [a1, a2] {
        if a.shape() != [b, 2, h, w] {
            return Err(Error::shape(
                "build_input",
                format!("attention stack {:?}, expected {:?}", a.shape(), [b, 2, h, w]),
            ));
        }
    }
    Tensor4::concat_channels(&[triplet.prev(), a1, triplet.current(), a2, triplet.next()])
}

/// Which motion encoding feeds the attention mapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionEncoding {
    /// Separate brightening and darkening fields.
    Polarity,
    /// Sign-free `|Δ|`, placed in both attention slots of an interval.
    Absolute,
}

/// Learnable attention mapping recorded on the tape.
#[derive(Clone, Debug)]
pub struct MotionModule {
    pub encoding: MotionEncoding,
    /// `(α, β)` for the brightening field (or the only pair when shared).
    pub positive: (ParamId, ParamId),
    /// `(α, β)` for the darkening field; equal to `positive` when shared.
    pub negative: (ParamId, ParamId),
}

impl MotionModule {
    pub fn new(store: &mut ParamStore, encoding: MotionEncoding, shared: bool) -> Self {
        let mut pair = |suffix: &str| {
            (
                store.add(format!("mdd.alpha{suffix}"), Tensor4::scalar(INIT_ALPHA), false),
                store.add(format!("mdd.beta{suffix}"), Tensor4::scalar(INIT_BETA), false),
            )
        };
        if shared {
            let p = pair("");
            MotionModule {
                encoding,
                positive: p,
                negative: p,
            }
        } else {
            let p = pair(".pos");
            let n = pair(".neg");
            MotionModule {
                encoding,
                positive: p,
                negative: n,
            }
        }
    }

    fn map(&self, ctx: &mut Ctx, field: Tensor4, pair: (ParamId, ParamId)) -> Result<Var> {
        let x = ctx.constant(field);
        let inputs = [x, ctx.p(pair.0), ctx.p(pair.1)];
        ctx.apply(Primitive::MotionAttention { eps: ATTENTION_EPS }, &inputs)
    }

    /// Two-channel attention stack for one interval.
    pub fn interval_maps(&self, ctx: &mut Ctx, earlier: &Tensor4, later: &Tensor4) -> Result<Var> {
        let diff = raw_difference(earlier, later, Interval::PrevToCurrent)?;
        match self.encoding {
            MotionEncoding::Polarity => {
                let pol = polarity_decompose(&diff.delta)?;
                let pos = self.map(ctx, channel_mean(&pol.positive), self.positive)?;
                let neg = self.map(ctx, channel_mean(&pol.negative), self.negative)?;
                ctx.apply(Primitive::Concat, &[pos, neg])
            }
            MotionEncoding::Absolute => {
                let abs = channel_mean(&diff.delta.map(f64::abs));
                let a = self.map(ctx, abs, self.positive)?;
                ctx.apply(Primitive::Concat, &[a, a])
            }
        }
    }

    /// Attention stacks for both intervals of a triplet.
    pub fn forward(&self, ctx: &mut Ctx, triplet: &FrameTriplet) -> Result<[Var; 2]> {
        let a1 = self.interval_maps(ctx, triplet.prev(), triplet.current())?;
        let a2 = self.interval_maps(ctx, triplet.current(), triplet.next())?;
        Ok([a1, a2])
    }
}

/// Tape version of [`build_input`].
pub fn build_input_on_tape(ctx: &mut Ctx, triplet: &FrameTriplet, a1: Var, a2: Var) -> Result<Var> {
    let f0 = ctx.constant(triplet.prev().clone());
    let f1 = ctx.constant(triplet.current().clone());
    let f2 = ctx.constant(triplet.next().clone());
    ctx.apply(Primitive::Concat, &[f0, a1, f1, a2, f2])
}
