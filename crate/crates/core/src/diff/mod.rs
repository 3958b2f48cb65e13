//! Tape-based reverse-mode differentiation over a fixed primitive set.
//!
//! Every primitive has a forward rule and an exact gradient rule. Models
//! record their forward pass on a [`Tape`]; [`Tape::backward`] walks it in
//! reverse and returns gradients keyed by [`ParamId`].

mod check;
pub(crate) mod gemm;
mod ops;
mod tape;

pub use check::{finite_diff_check, finite_diff_check_many};
pub use ops::{pixel_shuffle, pixel_unshuffle, Saved, SIGMOID_LIMIT};
pub(crate) use ops::{attention_offset, attention_slope, sigmoid};
pub use tape::{Gradients, ParamId, Tape, Var};

/// Whether stochastic and statistics-tracking primitives run in training form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}

/// The closed set of differentiable operations.
///
/// Token-shaped tensors use `(groups, groups, tokens, features)` so that
/// `matmul`, `linear`, `layer_norm` and `softmax` act on the last two axes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Inputs: `x (B,Cin,H,W)`, `w (Cout,Cin,kh,kw)`, optional `bias (1,1,1,Cout)`.
    Conv2d { stride: usize, padding: usize },
    Relu,
    Sigmoid,
    Tanh,
    /// Elementwise with per-axis broadcasting of size-1 dimensions.
    Add,
    Subtract,
    Multiply,
    /// `(B,C,n,k) × (B|1, C|1, k, m)`; with `transpose_rhs` the right operand is stored `(…, m, k)`.
    MatMul { transpose_rhs: bool },
    /// Inputs: `x`, `gamma (1,1,1,d)`, `beta (1,1,1,d)`; normalizes the last axis.
    LayerNorm { eps: f64 },
    /// Softmax over the last axis.
    Softmax,
    /// Channel-axis concatenation of any number of inputs.
    Concat,
    SliceChannels { start: usize, len: usize },
    /// Inverted dropout; identity in [`Mode::Infer`] or at rate 0.
    Dropout { rate: f64, mode: Mode, seed: u64 },
    PixelShuffle { factor: usize },
    /// 2×2 window, stride 2.
    MaxPool2d,
    /// Nearest-neighbour ×2.
    Upsample2,
    /// Inputs: `x`, `gamma (1,C,1,1)`, `beta (1,C,1,1)`, `running_mean (1,C,1,1)`, `running_var (1,C,1,1)`.
    /// Train mode normalizes with batch statistics and ignores the running inputs.
    BatchNorm2d { mode: Mode, eps: f64 },
    /// Inputs: `x (…, n, din)`, `w (1,1,din,dout)`, optional `bias (1,1,1,dout)`.
    Linear,
    /// `(B,C,H,W) → (B,C,(H/p)(W/p),p²)`.
    Patchify { patch: usize },
    /// Inverse of `Patchify` back to `(B,C,height,width)`.
    Unpatchify {
        patch: usize,
        height: usize,
        width: usize,
    },
    /// `(B,C,H,W) → (B,H,C,W)`.
    SwapChannelHeight,
    /// `(B,C,n,d) → (B,C·heads,n,d/heads)`.
    SplitHeads { heads: usize },
    /// Inverse of `SplitHeads`.
    MergeHeads { heads: usize },
    Scale { factor: f64 },
    /// Sum of all elements to a `(1,1,1,1)` scalar.
    Sum,
    /// Inputs: `x`, `alpha (1,1,1,1)`, `beta (1,1,1,1)`.
    /// `σ(k(α)·(|x| − m(β)))` with `k = 5/(0.45|tanh α| + eps)`, `m = 0.6 tanh β`.
    MotionAttention { eps: f64 },
    /// Inputs: probabilities `p`, targets `y`; focal-weighted binary cross entropy, mean over elements.
    Wbce { clamp: f64 },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Add => "add",
            Primitive::Subtract => "subtract",
            Primitive::Multiply => "multiply",
            Primitive::MatMul { .. } => "matmul",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Softmax => "softmax",
            Primitive::Concat => "concat",
            Primitive::SliceChannels { .. } => "slice_channels",
            Primitive::Dropout { .. } => "dropout",
            Primitive::PixelShuffle { .. } => "pixel_shuffle",
            Primitive::MaxPool2d => "max_pool2d",
            Primitive::Upsample2 => "nearest_upsample",
            Primitive::BatchNorm2d { .. } => "batch_norm2d",
            Primitive::Linear => "linear",
            Primitive::Patchify { .. } => "patchify",
            Primitive::Unpatchify { .. } => "unpatchify",
            Primitive::SwapChannelHeight => "swap_channel_height",
            Primitive::SplitHeads { .. } => "split_heads",
            Primitive::MergeHeads { .. } => "merge_heads",
            Primitive::Scale { .. } => "scale",
            Primitive::Sum => "sum",
            Primitive::MotionAttention { .. } => "motion_attention",
            Primitive::Wbce { .. } => "wbce",
        }
    }
}
