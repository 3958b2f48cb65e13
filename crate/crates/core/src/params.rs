//! Learnable parameters, non-learnable buffers, and the per-pass binding context.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{Mode, ParamId, Primitive, Saved, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor4,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor4,
}

/// Ordered registry of named parameters and buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor4) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor4 {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4 {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor4 {
        &self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Fold running-statistic updates recorded during a training pass into the buffers.
    pub fn apply_bn_updates(&mut self, tape: &Tape, updates: &[BnUpdate]) -> Result<()> {
        for u in updates {
            let Some(Saved::BatchStats { mean, var, .. }) = tape.saved(u.node) else {
                return Err(Error::Invalid("batch-norm node without batch statistics".into()));
            };
            let n = u.count as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let rm = self.buffers[u.mean.0].value.data_mut();
            for (r, m) in rm.iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.buffers[u.var.0].value.data_mut();
            for (r, v) in rv.iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
        Ok(())
    }
}

/// Fan-in scaled uniform initialization: `U(-b, b)` with `b = gain·√(3/fan_in)`.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: [usize; 4], fan_in: usize, gain: f64) -> Tensor4 {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor4::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// A batch-norm node whose batch statistics should update running buffers.
#[derive(Clone, Copy, Debug)]
pub struct BnUpdate {
    pub node: Var,
    pub mean: BufferId,
    pub var: BufferId,
    pub count: usize,
}

/// Everything a forward pass needs: the tape, read-only parameters, and the mode.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub mode: Mode,
    bound: HashMap<ParamId, Var>,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Ctx {
            tape,
            store,
            mode,
            bound: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    /// Tape handle for a parameter; each parameter is bound once per pass.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let v = self.tape.param(id, self.store.value(id).clone());
        self.bound.insert(id, v);
        v
    }

    pub fn buffer(&mut self, id: BufferId) -> Var {
        self.tape.constant(self.store.buffer(id).clone())
    }

    pub fn constant(&mut self, t: Tensor4) -> Var {
        self.tape.constant(t)
    }

    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        self.tape.apply(prim, inputs)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        self.tape.value(v)
    }
}

/// Convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, [cout, cin, kernel, kernel], fan_in, gain),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor4::zeros([1, 1, 1, cout]), false));
        Conv {
            weight,
            bias,
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut inputs = vec![x, ctx.p(self.weight)];
        if let Some(b) = self.bias {
            inputs.push(ctx.p(b));
        }
        ctx.apply(
            Primitive::Conv2d {
                stride: self.stride,
                padding: self.padding,
            },
            &inputs,
        )
    }
}

/// 3×3 convolution → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl ConvBnRelu {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        let conv = Conv::new(store, rng, &format!("{name}.conv"), cin, cout, 3, false, 2f64.sqrt());
        let gamma = store.add(format!("{name}.bn.gamma"), Tensor4::filled([1, cout, 1, 1], 1.0), false);
        let beta = store.add(format!("{name}.bn.beta"), Tensor4::zeros([1, cout, 1, 1]), false);
        let running_mean = store.add_buffer(format!("{name}.bn.running_mean"), Tensor4::zeros([1, cout, 1, 1]));
        let running_var = store.add_buffer(format!("{name}.bn.running_var"), Tensor4::filled([1, cout, 1, 1], 1.0));
        ConvBnRelu {
            conv,
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let c = self.conv.forward(ctx, x)?;
        let inputs = [
            c,
            ctx.p(self.gamma),
            ctx.p(self.beta),
            ctx.buffer(self.running_mean),
            ctx.buffer(self.running_var),
        ];
        let mode = ctx.mode;
        let bn = ctx.apply(Primitive::BatchNorm2d { mode, eps: BN_EPS }, &inputs)?;
        if mode == Mode::Train {
            let [b, _, h, w] = ctx.value(c).shape();
            ctx.bn_updates.push(BnUpdate {
                node: bn,
                mean: self.running_mean,
                var: self.running_var,
                count: b * h * w,
            });
        }
        ctx.apply(Primitive::Relu, &[bn])
    }
}

/// Token-wise affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, [1, 1, din, dout], din, 1.0), true);
        let bias = store.add(format!("{name}.bias"), Tensor4::zeros([1, 1, 1, dout]), false);
        Linear { weight, bias }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor4::zeros([1, 1, din, dout]), true);
        let bias = store.add(format!("{name}.bias"), Tensor4::zeros([1, 1, 1, dout]), false);
        Linear { weight, bias }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let inputs = [x, ctx.p(self.weight), ctx.p(self.bias)];
        ctx.apply(Primitive::Linear, &inputs)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor4::filled([1, 1, 1, dim], 1.0), false),
            beta: store.add(format!("{name}.beta"), Tensor4::zeros([1, 1, 1, dim]), false),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let inputs = [x, ctx.p(self.gamma), ctx.p(self.beta)];
        ctx.apply(Primitive::LayerNorm { eps: Self::EPS }, &inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_param_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Conv::new(&mut store, &mut rng, "c", 3, 4, 3, true, 1.0);
        assert_eq!(store.count(), 3 * 4 * 9 + 4);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = ConvBnRelu::new(&mut store, &mut rng, "l", 1, 1);
        let x = Tensor4::from_fn([2, 1, 2, 2], |[b, _, y, x]| (b * 4 + y * 2 + x) as f64);
        let mut tape = Tape::new();
        let snapshot = store.clone();
        let updates = {
            let mut ctx = Ctx::new(&mut tape, &snapshot, Mode::Train);
            let xv = ctx.constant(x);
            layer.forward(&mut ctx, xv).unwrap();
            ctx.bn_updates.clone()
        };
        store.apply_bn_updates(&tape, &updates).unwrap();
        let Some(Saved::BatchStats { mean, var, .. }) = tape.saved(updates[0].node) else {
            panic!("missing stats");
        };
        let rm = store.buffer(layer.running_mean).data()[0];
        let rv = store.buffer(layer.running_var).data()[0];
        assert!((rm - 0.1 * mean[0]).abs() < 1e-12);
        assert!((rv - (0.9 + 0.1 * var[0] * 8.0 / 7.0)).abs() < 1e-12);
    }
}
