//! Symmetric U-Net encoder-decoder producing full-resolution decoder features
//! for all three frames of a window in a single pass.

use rand_chacha::ChaCha8Rng;

use crate::diff::{Primitive, Var};
use crate::error::{Error, Result};
use crate::params::{ConvBnRelu, Ctx, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Channel width per resolution level; the last entry is the bottleneck.
    pub widths: Vec<usize>,
    pub convs_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: vec![8, 16, 32, 64],
            convs_per_stage: 2,
        }
    }
}

impl BackboneConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Required divisibility of the input height and width.
    pub fn divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    /// Channel count of the decoder output.
    pub fn out_channels(&self) -> usize {
        self.widths[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config("backbone needs at least two levels".into()));
        }
        if self.widths.contains(&0) || self.convs_per_stage == 0 {
            return Err(Error::Config("backbone widths and convs per stage must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Stage {
    convs: Vec<ConvBnRelu>,
    in_channels: usize,
}

impl Stage {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, n: usize) -> Self {
        let convs = (0..n)
            .map(|i| {
                let c_in = if i == 0 { cin } else { cout };
                ConvBnRelu::new(store, rng, &format!("{name}.{i}"), c_in, cout)
            })
            .collect();
        Stage { convs, in_channels: cin }
    }

    fn forward(&self, ctx: &mut Ctx, mut x: Var) -> Result<Var> {
        for c in &self.convs {
            x = c.forward(ctx, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    in_channels: usize,
    encoder: Vec<Stage>,
    bottleneck: Stage,
    decoder: Vec<Stage>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &BackboneConfig, in_channels: usize) -> Result<Self> {
        config.validate()?;
        let w = &config.widths;
        let n = config.convs_per_stage;
        let depth = w.len() - 1;
        let mut encoder = Vec::with_capacity(depth);
        let mut cin = in_channels;
        for (i, &width) in w[..depth].iter().enumerate() {
            encoder.push(Stage::new(store, rng, &format!("backbone.enc{i}"), cin, width, n));
            cin = width;
        }
        let bottleneck = Stage::new(store, rng, "backbone.mid", cin, w[depth], n);
        let mut decoder = Vec::with_capacity(depth);
        let mut below = w[depth];
        for i in (0..depth).rev() {
            decoder.push(Stage::new(store, rng, &format!("backbone.dec{i}"), below + w[i], w[i], n));
            below = w[i];
        }
        // skip integrity: every decoder stage consumes upsampled + matching encoder channels
        for (stage, i) in decoder.iter().zip((0..depth).rev()) {
            let upsampled = if i + 1 == depth { w[depth] } else { w[i + 1] };
            if stage.in_channels != upsampled + w[i] {
                return Err(Error::Config(format!(
                    "decoder level {i} expects {} input channels, skip path provides {}",
                    stage.in_channels,
                    upsampled + w[i]
                )));
            }
        }
        Ok(Backbone {
            config: config.clone(),
            in_channels,
            encoder,
            bottleneck,
            decoder,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let [_, c, h, w] = ctx.value(x).shape();
        if c != self.in_channels {
            return Err(Error::shape(
                "backbone",
                format!("expected {} input channels, got {c}", self.in_channels),
            ));
        }
        let d = self.config.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::Divisibility {
                height: h,
                width: w,
                divisor: d,
            });
        }
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut cur = x;
        for stage in &self.encoder {
            let f = stage.forward(ctx, cur)?;
            skips.push(f);
            cur = ctx.apply(Primitive::MaxPool2d, &[f])?;
        }
        cur = self.bottleneck.forward(ctx, cur)?;
        for stage in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let up = ctx.apply(Primitive::Upsample2, &[cur])?;
            let cat = ctx.apply(Primitive::Concat, &[up, skip])?;
            cur = stage.forward(ctx, cat)?;
        }
        Ok(cur)
    }

    /// Multiply-accumulates of one forward pass for an `h×w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let conv = |cin: usize, cout: usize, hh: usize, ww: usize| (cout * cin * 9 * hh * ww) as u64;
        let stage_macs = |s: &Stage, cout: usize, hh: usize, ww: usize| {
            (0..s.convs.len())
                .map(|i| conv(if i == 0 { s.in_channels } else { cout }, cout, hh, ww))
                .sum::<u64>()
        };
        let wd = &self.config.widths;
        let depth = wd.len() - 1;
        let mut total = 0;
        for (i, s) in self.encoder.iter().enumerate() {
            total += stage_macs(s, wd[i], h >> i, w >> i);
        }
        total += stage_macs(&self.bottleneck, wd[depth], h >> depth, w >> depth);
        for (s, i) in self.decoder.iter().zip((0..depth).rev()) {
            total += stage_macs(s, wd[i], h >> i, w >> i);
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{Mode, Tape};
    use crate::tensor::Tensor4;
    use rand::SeedableRng;

    #[test]
    fn output_matches_input_resolution() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&mut store, &mut rng, &BackboneConfig::default(), 13).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Infer);
        let x = ctx.constant(Tensor4::zeros([1, 13, 48, 64]));
        let y = bb.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.value(y).shape(), [1, 8, 48, 64]);
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&mut store, &mut rng, &BackboneConfig::default(), 9).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Infer);
        let x = ctx.constant(Tensor4::zeros([1, 9, 44, 64]));
        let err = bb.forward(&mut ctx, x).unwrap_err();
        assert!(matches!(err, Error::Divisibility { divisor: 8, .. }), "{err}");
    }
}
