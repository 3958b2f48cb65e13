//! Residual spatio-temporal refinement of the three-frame heatmap drafts.
//!
//! Pipeline: decoder features → 1×1 draft logits → motion-aware fusion →
//! stochastic context masking (training only) → factorized
//! temporal/spatial transformer that predicts a residual → `σ(base + Δ)`.

use rand_chacha::ChaCha8Rng;

use crate::diff::{Mode, ParamId, Primitive, Var};
use crate::error::{Error, Result};
use crate::params::{uniform_init, Conv, Ctx, LayerNorm, Linear, ParamStore};
use crate::tensor::Tensor4;

/// Frames per window.
pub const FRAMES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockOrder {
    TemporalFirst,
    SpatialFirst,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsattConfig {
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub temporal_blocks: usize,
    pub spatial_blocks: usize,
    /// Feed-forward width as a multiple of `dim`.
    pub ffn_mult: usize,
    /// Stochastic context masking rate.
    pub mask_rate: f64,
    pub order: BlockOrder,
}

impl Default for TsattConfig {
    fn default() -> Self {
        TsattConfig {
            patch: 4,
            dim: 32,
            heads: 4,
            temporal_blocks: 1,
            spatial_blocks: 1,
            ffn_mult: 2,
            mask_rate: 0.1,
            order: BlockOrder::TemporalFirst,
        }
    }
}

impl TsattConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.patch == 0 || !height.is_multiple_of(self.patch) || !width.is_multiple_of(self.patch) {
            return Err(Error::Divisibility {
                height,
                width,
                divisor: self.patch,
            });
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!("mask rate {} outside [0, 1)", self.mask_rate)));
        }
        Ok(())
    }

    /// Spatial tokens per frame.
    pub fn spatial_tokens(&self, height: usize, width: usize) -> usize {
        (height / self.patch) * (width / self.patch)
    }

    /// Tokens across the whole window.
    pub fn token_count(&self, height: usize, width: usize) -> usize {
        FRAMES * self.spatial_tokens(height, width)
    }
}

/// Pre-norm transformer block: `x + MHA(LN x)`, then `x + FFN(LN x)`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    norm1: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
    dim: usize,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize, ffn_mult: usize) -> Self {
        AttentionBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), dim, dim * ffn_mult),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), dim * ffn_mult, dim),
            heads,
            dim,
        }
    }

    /// Self-attention over axis 2 of `(G, C, N, dim)`, independently per `(G, C)` group.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.norm1.forward(ctx, x)?;
        let split = Primitive::SplitHeads { heads: self.heads };
        let head_dim = (self.dim / self.heads) as f64;
        let q = self.query.forward(ctx, h)?;
        // 1/√d_head applied to the queries rather than the N×N scores
        let q = ctx.apply(
            Primitive::Scale {
                factor: 1.0 / head_dim.sqrt(),
            },
            &[q],
        )?;
        let q = ctx.apply(split.clone(), &[q])?;
        let k = self.key.forward(ctx, h)?;
        let k = ctx.apply(split.clone(), &[k])?;
        let v = self.value.forward(ctx, h)?;
        let v = ctx.apply(split, &[v])?;
        let scores = ctx.apply(Primitive::MatMul { transpose_rhs: true }, &[q, k])?;
        let attn = ctx.apply(Primitive::Softmax, &[scores])?;
        let mixed = ctx.apply(Primitive::MatMul { transpose_rhs: false }, &[attn, v])?;
        let merged = ctx.apply(Primitive::MergeHeads { heads: self.heads }, &[mixed])?;
        let o = self.out.forward(ctx, merged)?;
        let x = ctx.apply(Primitive::Add, &[x, o])?;
        let h = self.norm2.forward(ctx, x)?;
        let f = self.ff1.forward(ctx, h)?;
        let f = ctx.apply(Primitive::Relu, &[f])?;
        let f = self.ff2.forward(ctx, f)?;
        ctx.apply(Primitive::Add, &[x, f])
    }
}

/// MACs of one self-attention block (projections, scores, value mixing, output
/// projection) over `tokens` tokens of width `dim`; feed-forward excluded.
pub fn attention_macs(tokens: usize, dim: usize) -> u64 {
    let (n, d) = (tokens as u64, dim as u64);
    3 * n * d * d + n * n * d + n * n * d + n * d * d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Temporal,
    Spatial,
}

/// Transformer head estimating the residual correction map.
#[derive(Clone, Debug)]
pub struct TsattHead {
    cfg: TsattConfig,
    height: usize,
    width: usize,
    embed: Linear,
    spatial_pos: ParamId,
    temporal_pos: ParamId,
    blocks: Vec<(Axis, AttentionBlock)>,
    final_norm: LayerNorm,
    proj: Linear,
}

impl TsattHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &TsattConfig, height: usize, width: usize) -> Result<Self> {
        cfg.validate(height, width)?;
        let p2 = cfg.patch * cfg.patch;
        let d = cfg.dim;
        let s = cfg.spatial_tokens(height, width);
        let embed = Linear::new(store, rng, "tsatt.embed", p2, d);
        let spatial_pos = store.add("tsatt.pos.spatial", uniform_init(rng, [1, 1, s, d], 3, 0.02), false);
        let temporal_pos = store.add("tsatt.pos.temporal", uniform_init(rng, [1, FRAMES, 1, d], 3, 0.02), false);
        let mut order = Vec::new();
        let temporal = std::iter::repeat_n(Axis::Temporal, cfg.temporal_blocks);
        let spatial = std::iter::repeat_n(Axis::Spatial, cfg.spatial_blocks);
        match cfg.order {
            BlockOrder::TemporalFirst => order.extend(temporal.chain(spatial)),
            BlockOrder::SpatialFirst => order.extend(spatial.chain(temporal)),
        }
        let blocks = order
            .into_iter()
            .enumerate()
            .map(|(i, axis)| {
                let tag = match axis {
                    Axis::Temporal => "temporal",
                    Axis::Spatial => "spatial",
                };
                (axis, AttentionBlock::new(store, rng, &format!("tsatt.block{i}.{tag}"), d, cfg.heads, cfg.ffn_mult))
            })
            .collect();
        let final_norm = LayerNorm::new(store, "tsatt.final_norm", d);
        let proj = Linear::zeroed(store, "tsatt.proj", d, p2);
        Ok(TsattHead {
            cfg: cfg.clone(),
            height,
            width,
            embed,
            spatial_pos,
            temporal_pos,
            blocks,
            final_norm,
            proj,
        })
    }

    pub fn config(&self) -> &TsattConfig {
        &self.cfg
    }

    /// Embedded tokens `(B, 3, S, dim)` with both positional encodings added.
    pub fn embed(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let [_, c, h, w] = ctx.value(x).shape();
        if c != FRAMES || h != self.height || w != self.width {
            return Err(Error::shape(
                "tsatt_head",
                format!("expected (B, {FRAMES}, {}, {}), got {:?}", self.height, self.width, ctx.value(x).shape()),
            ));
        }
        let patches = ctx.apply(Primitive::Patchify { patch: self.cfg.patch }, &[x])?;
        let tokens = self.embed.forward(ctx, patches)?;
        let sp = ctx.p(self.spatial_pos);
        let tokens = ctx.apply(Primitive::Add, &[tokens, sp])?;
        let tp = ctx.p(self.temporal_pos);
        ctx.apply(Primitive::Add, &[tokens, tp])
    }

    /// Attention over the 3 frames sharing each spatial index.
    pub fn temporal_block(&self, ctx: &mut Ctx, block: &AttentionBlock, tokens: Var) -> Result<Var> {
        let t = ctx.apply(Primitive::SwapChannelHeight, &[tokens])?;
        let t = block.forward(ctx, t)?;
        ctx.apply(Primitive::SwapChannelHeight, &[t])
    }

    pub fn first_temporal_block(&self) -> Option<&AttentionBlock> {
        self.blocks.iter().find(|(a, _)| *a == Axis::Temporal).map(|(_, b)| b)
    }

    pub fn spatial_pos(&self) -> ParamId {
        self.spatial_pos
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut tokens = self.embed(ctx, x)?;
        for (axis, block) in &self.blocks {
            tokens = match axis {
                Axis::Temporal => self.temporal_block(ctx, block, tokens)?,
                Axis::Spatial => block.forward(ctx, tokens)?,
            };
        }
        let tokens = self.final_norm.forward(ctx, tokens)?;
        let patches = self.proj.forward(ctx, tokens)?;
        ctx.apply(
            Primitive::Unpatchify {
                patch: self.cfg.patch,
                height: self.height,
                width: self.width,
            },
            &[patches],
        )
    }

    /// Per-sample multiply-accumulates.
    pub fn macs(&self) -> u64 {
        let d = self.cfg.dim as u64;
        let p2 = (self.cfg.patch * self.cfg.patch) as u64;
        let s = self.cfg.spatial_tokens(self.height, self.width);
        let n = (FRAMES * s) as u64;
        let ffn = 2 * n * d * d * self.cfg.ffn_mult as u64;
        let mut total = n * p2 * d + n * d * p2;
        for (axis, _) in &self.blocks {
            total += ffn;
            total += match axis {
                Axis::Temporal => s as u64 * attention_macs(FRAMES, self.cfg.dim),
                Axis::Spatial => FRAMES as u64 * attention_macs(s, self.cfg.dim),
            };
        }
        total
    }
}

/// The full refinement head: draft, optional motion fusion, masking, residual.
#[derive(Clone, Debug)]
pub struct RstrHead {
    pub draft: Conv,
    pub fusion: Option<Conv>,
    pub tsatt: TsattHead,
    in_channels: usize,
}

/// Intermediate values of one refinement pass.
#[derive(Clone, Copy, Debug)]
pub struct RefineTrace {
    pub draft: Var,
    pub draft_mdd: Var,
    pub masked: Var,
    pub residual: Var,
    pub heatmaps: Var,
}

/// 1×1 draft convolution `C_dec → 3` with bias.
pub fn draft_conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, in_channels: usize) -> Conv {
    Conv::new(store, rng, "head.draft", in_channels, FRAMES, 1, true, 1.0)
}

impl RstrHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &TsattConfig,
        in_channels: usize,
        with_motion: bool,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let draft = draft_conv(store, rng, in_channels);
        let fusion = with_motion.then(|| {
            // identity on the draft channels, zero on the attention channels
            let cin = FRAMES + 4;
            let w = Tensor4::from_fn([FRAMES, cin, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
            let weight = store.add("head.fusion.weight", w, true);
            let bias = store.add("head.fusion.bias", Tensor4::zeros([1, 1, 1, FRAMES]), false);
            Conv {
                weight,
                bias: Some(bias),
                stride: 1,
                padding: 0,
            }
        });
        let tsatt = TsattHead::new(store, rng, cfg, height, width)?;
        Ok(RstrHead {
            draft,
            fusion,
            tsatt,
            in_channels,
        })
    }

    pub fn make_draft(&self, ctx: &mut Ctx, features: Var) -> Result<Var> {
        self.draft.forward(ctx, features)
    }

    /// `[draft(3), a1(2), a2(2)] → 1×1 conv → 3`; identity when no fusion is configured.
    pub fn fuse_motion(&self, ctx: &mut Ctx, draft: Var, attention: Option<[Var; 2]>) -> Result<Var> {
        match (&self.fusion, attention) {
            (Some(conv), Some([a1, a2])) => {
                let cat = ctx.apply(Primitive::Concat, &[draft, a1, a2])?;
                conv.forward(ctx, cat)
            }
            (None, _) => Ok(draft),
            (Some(_), None) => Err(Error::Invalid("motion fusion requires attention maps".into())),
        }
    }

    pub fn stochastic_mask(&self, ctx: &mut Ctx, x: Var, seed: u64) -> Result<Var> {
        stochastic_mask(ctx, x, self.tsatt.cfg.mask_rate, ctx.mode, seed)
    }

    pub fn forward(&self, ctx: &mut Ctx, features: Var, attention: Option<[Var; 2]>, seed: u64) -> Result<RefineTrace> {
        let draft = self.make_draft(ctx, features)?;
        let draft_mdd = self.fuse_motion(ctx, draft, attention)?;
        let masked = self.stochastic_mask(ctx, draft_mdd, seed)?;
        let residual = self.tsatt.forward(ctx, masked)?;
        let heatmaps = refine(ctx, masked, residual)?;
        Ok(RefineTrace {
            draft,
            draft_mdd,
            masked,
            residual,
            heatmaps,
        })
    }

    pub fn macs(&self, height: usize, width: usize) -> u64 {
        let hw = (height * width) as u64;
        let cin = self.in_channels as u64;
        let mut total = cin * FRAMES as u64 * hw;
        if self.fusion.is_some() {
            total += (FRAMES as u64 + 4) * FRAMES as u64 * hw;
        }
        total + self.tsatt.macs()
    }
}

/// Inverted dropout in train mode, identity in infer mode.
pub fn stochastic_mask(ctx: &mut Ctx, x: Var, rate: f64, mode: Mode, seed: u64) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Invalid(format!("mask rate {rate} outside [0, 1)")));
    }
    ctx.apply(Primitive::Dropout { rate, mode, seed }, &[x])
}

/// `σ(base + Δ)`.
pub fn refine(ctx: &mut Ctx, base: Var, residual: Var) -> Result<Var> {
    if ctx.value(base).shape() != ctx.value(residual).shape() {
        return Err(Error::shape(
            "refine",
            format!("{:?} vs {:?}", ctx.value(base).shape(), ctx.value(residual).shape()),
        ));
    }
    let sum = ctx.apply(Primitive::Add, &[base, residual])?;
    ctx.apply(Primitive::Sigmoid, &[sum])
}
