//! Pipeline variants wiring motion encoding, backbone, and heads together.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::diff::{Mode, Primitive, Tape, Var};
use crate::error::{Error, Result};
use crate::mdd::{build_input_on_tape, FrameTriplet, MotionEncoding, MotionModule};
use crate::params::{Conv, Ctx, ParamStore};
use crate::rstr::{draft_conv, RstrHead, TsattConfig, FRAMES};
use crate::supervision::wbce_on_tape;
use crate::tensor::Tensor4;

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Raw frames only, plain sigmoid head.
    V2,
    /// Sign-free `|Δ|` attention, plain head.
    V4Like,
    /// Polarity attention, plain head.
    V2Mdd,
    /// Raw frames, refinement head.
    V2Rstr,
    /// Polarity attention and refinement head.
    V5,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::V2, Variant::V4Like, Variant::V2Mdd, Variant::V2Rstr, Variant::V5];

    pub fn motion(self) -> Option<MotionEncoding> {
        match self {
            Variant::V2 | Variant::V2Rstr => None,
            Variant::V4Like => Some(MotionEncoding::Absolute),
            Variant::V2Mdd | Variant::V5 => Some(MotionEncoding::Polarity),
        }
    }

    pub fn refines(self) -> bool {
        matches!(self, Variant::V2Rstr | Variant::V5)
    }

    pub fn input_channels(self) -> usize {
        if self.motion().is_some() {
            13
        } else {
            9
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::V2 => "v2",
            Variant::V4Like => "v4like",
            Variant::V2Mdd => "v2_mdd",
            Variant::V2Rstr => "v2_rstr",
            Variant::V5 => "v5",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected v2, v4like, v2_mdd, v2_rstr, v5)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub height: usize,
    pub width: usize,
    pub backbone: BackboneConfig,
    pub tsatt: TsattConfig,
    /// One `(α, β)` pair for both polarities.
    pub shared_attention: bool,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::V5,
            height: 48,
            width: 64,
            backbone: BackboneConfig::default(),
            tsatt: TsattConfig::default(),
            shared_attention: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
enum Head {
    Plain(Conv),
    Refine(RstrHead),
}

/// Recorded outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub input: Var,
    pub attention: Option<[Var; 2]>,
    pub features: Var,
    pub draft: Var,
    pub draft_mdd: Option<Var>,
    pub residual: Option<Var>,
    /// `(B, 3, H, W)` probabilities.
    pub heatmaps: Var,
}

/// A configured model and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    motion: Option<MotionModule>,
    backbone: Backbone,
    head: Head,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let d = config.backbone.divisor();
        if !config.height.is_multiple_of(d) || !config.width.is_multiple_of(d) {
            return Err(Error::Divisibility {
                height: config.height,
                width: config.width,
                divisor: d,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let motion = config
            .variant
            .motion()
            .map(|enc| MotionModule::new(&mut store, enc, config.shared_attention));
        let backbone = Backbone::new(&mut store, &mut rng, &config.backbone, config.variant.input_channels())?;
        let cdec = config.backbone.out_channels();
        let head = if config.variant.refines() {
            Head::Refine(RstrHead::new(
                &mut store,
                &mut rng,
                &config.tsatt,
                cdec,
                config.variant.motion().is_some(),
                config.height,
                config.width,
            )?)
        } else {
            Head::Plain(draft_conv(&mut store, &mut rng, cdec))
        };
        Ok(Model {
            config,
            store,
            motion,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn rstr(&self) -> Option<&RstrHead> {
        match &self.head {
            Head::Refine(r) => Some(r),
            Head::Plain(_) => None,
        }
    }

    pub fn motion(&self) -> Option<&MotionModule> {
        self.motion.as_ref()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Learnable scalar count.
    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    /// Per-sample multiply-accumulates for the configured resolution.
    pub fn estimate_flops(&self) -> u64 {
        let (h, w) = (self.config.height, self.config.width);
        let hw = (h * w) as u64;
        let head = match &self.head {
            Head::Plain(_) => (self.config.backbone.out_channels() * FRAMES) as u64 * hw,
            Head::Refine(r) => r.macs(h, w),
        };
        self.backbone.macs(h, w) + head
    }

    /// Network input for a triplet: 9 raw channels, or 13 with motion attention.
    pub fn build_input(&self, ctx: &mut Ctx, triplet: &FrameTriplet) -> Result<(Var, Option<[Var; 2]>)> {
        let [_, _, h, w] = triplet.shape();
        if (h, w) != (self.config.height, self.config.width) {
            return Err(Error::shape(
                "model",
                format!("frames are {h}x{w}, model expects {}x{}", self.config.height, self.config.width),
            ));
        }
        match &self.motion {
            Some(m) => {
                let [a1, a2] = m.forward(ctx, triplet)?;
                let x = build_input_on_tape(ctx, triplet, a1, a2)?;
                Ok((x, Some([a1, a2])))
            }
            None => {
                let f: Vec<Var> = triplet.frames().iter().map(|f| ctx.constant(f.clone())).collect();
                Ok((ctx.apply(Primitive::Concat, &f)?, None))
            }
        }
    }

    /// Record a full forward pass. `mask_seed` drives stochastic context masking in train mode.
    pub fn forward(&self, ctx: &mut Ctx, triplet: &FrameTriplet, mask_seed: u64) -> Result<ForwardOutput> {
        let (input, attention) = self.build_input(ctx, triplet)?;
        let features = self.backbone.forward(ctx, input)?;
        match &self.head {
            Head::Plain(conv) => {
                let draft = conv.forward(ctx, features)?;
                let heatmaps = ctx.apply(Primitive::Sigmoid, &[draft])?;
                Ok(ForwardOutput {
                    input,
                    attention,
                    features,
                    draft,
                    draft_mdd: None,
                    residual: None,
                    heatmaps,
                })
            }
            Head::Refine(r) => {
                let t = r.forward(ctx, features, attention, mask_seed)?;
                Ok(ForwardOutput {
                    input,
                    attention,
                    features,
                    draft: t.draft,
                    draft_mdd: Some(t.draft_mdd),
                    residual: Some(t.residual),
                    heatmaps: t.heatmaps,
                })
            }
        }
    }

    /// Forward pass plus WBCE against `(B, 3, H, W)` targets.
    pub fn loss(&self, ctx: &mut Ctx, triplet: &FrameTriplet, targets: &Tensor4, mask_seed: u64) -> Result<(ForwardOutput, Var)> {
        let out = self.forward(ctx, triplet, mask_seed)?;
        let loss = wbce_on_tape(ctx, out.heatmaps, targets)?;
        Ok((out, loss))
    }

    /// Inference-mode heatmaps `(B, 3, H, W)`.
    pub fn predict(&self, triplet: &FrameTriplet) -> Result<Tensor4> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Infer);
        let out = self.forward(&mut ctx, triplet, 0)?;
        Ok(ctx.value(out.heatmaps).clone())
    }
}
