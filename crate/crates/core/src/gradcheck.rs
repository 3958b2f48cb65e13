//! Finite-difference verification of every primitive and of the model's
//! learnable pieces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneConfig;
use crate::diff::{finite_diff_check_many, Mode, ParamId, Primitive, Tape, Var};
use crate::error::Result;
use crate::mdd::{FrameTriplet, MotionEncoding, MotionModule, ATTENTION_EPS};
use crate::model::{Model, ModelConfig, Variant};
use crate::params::{Ctx, ParamStore};
use crate::rstr::TsattConfig;
use crate::supervision::{wbce_on_tape, PROB_CLAMP};
use crate::tensor::Tensor4;

/// Central-difference step for primitive checks.
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    /// `primitive` or `module`.
    pub group: &'static str,
    pub name: String,
    pub seed: u64,
    /// Largest relative error over all checked entries.
    pub error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor4 {
    Tensor4::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1.5]` and random sign, away from the kinks at zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4 {
    Tensor4::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced well beyond the difference step, shuffled.
fn distinct(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4 {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0 + rng.gen_range(0.0..0.01)).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor4::from_vec(shape, vals).expect("length matches")
}

/// Inputs with `|x|` within a few slope widths of the offset, where the map is not saturated.
fn motion_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor4> {
    let alpha: f64 = rng.gen_range(0.3..2.0);
    let beta: f64 = rng.gen_range(-1.0..1.0);
    let m = crate::mdd::AttentionParams::new(alpha, beta).offset();
    let width = 1.0 / crate::mdd::AttentionParams::new(alpha, beta).slope();
    let x = Tensor4::from_fn([1, 1, 3, 4], |_| {
        let mag = (m + rng.gen_range(-3.0..3.0) * width).abs().max(0.02);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    });
    vec![x, Tensor4::scalar(alpha), Tensor4::scalar(beta)]
}

struct Case {
    name: &'static str,
    prim: Primitive,
    inputs: Vec<Tensor4>,
    /// Inputs recorded as constants (no gradient check), by position.
    constants: Vec<usize>,
}

fn cases(seed: u64) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut r;
    let case = |name, prim, inputs| Case {
        name,
        prim,
        inputs,
        constants: Vec::new(),
    };
    let mut v = vec![
        case(
            "conv2d",
            Primitive::Conv2d { stride: 1, padding: 1 },
            vec![uniform(rng, [2, 2, 5, 5], -1.0, 1.0), uniform(rng, [3, 2, 3, 3], -1.0, 1.0), uniform(rng, [1, 1, 1, 3], -1.0, 1.0)],
        ),
        case(
            "conv2d_strided",
            Primitive::Conv2d { stride: 2, padding: 0 },
            vec![uniform(rng, [1, 2, 5, 5], -1.0, 1.0), uniform(rng, [2, 2, 3, 3], -1.0, 1.0)],
        ),
        case("relu", Primitive::Relu, vec![off_zero(rng, [1, 2, 3, 4])]),
        case("sigmoid", Primitive::Sigmoid, vec![uniform(rng, [1, 2, 3, 4], -2.0, 2.0)]),
        case("tanh", Primitive::Tanh, vec![uniform(rng, [1, 2, 3, 4], -2.0, 2.0)]),
        case(
            "add",
            Primitive::Add,
            vec![uniform(rng, [2, 3, 2, 4], -1.0, 1.0), uniform(rng, [1, 3, 1, 4], -1.0, 1.0)],
        ),
        case(
            "subtract",
            Primitive::Subtract,
            vec![uniform(rng, [2, 3, 2, 4], -1.0, 1.0), uniform(rng, [2, 1, 2, 1], -1.0, 1.0)],
        ),
        case(
            "multiply",
            Primitive::Multiply,
            vec![uniform(rng, [2, 3, 2, 4], -1.0, 1.0), uniform(rng, [1, 3, 2, 4], -1.0, 1.0)],
        ),
        case(
            "matmul",
            Primitive::MatMul { transpose_rhs: false },
            vec![uniform(rng, [2, 2, 3, 4], -1.0, 1.0), uniform(rng, [1, 2, 4, 5], -1.0, 1.0)],
        ),
        case(
            "matmul_transposed",
            Primitive::MatMul { transpose_rhs: true },
            vec![uniform(rng, [2, 2, 3, 4], -1.0, 1.0), uniform(rng, [2, 2, 5, 4], -1.0, 1.0)],
        ),
        case(
            "layer_norm",
            Primitive::LayerNorm { eps: 1e-5 },
            vec![uniform(rng, [1, 2, 3, 6], -1.0, 1.0), uniform(rng, [1, 1, 1, 6], 0.5, 1.5), uniform(rng, [1, 1, 1, 6], -0.5, 0.5)],
        ),
        case("softmax", Primitive::Softmax, vec![uniform(rng, [1, 2, 3, 5], -2.0, 2.0)]),
        case(
            "concat",
            Primitive::Concat,
            vec![uniform(rng, [1, 2, 3, 3], -1.0, 1.0), uniform(rng, [1, 1, 3, 3], -1.0, 1.0)],
        ),
        case(
            "slice_channels",
            Primitive::SliceChannels { start: 1, len: 2 },
            vec![uniform(rng, [1, 4, 3, 3], -1.0, 1.0)],
        ),
        case(
            "dropout",
            Primitive::Dropout {
                rate: 0.3,
                mode: Mode::Train,
                seed,
            },
            vec![uniform(rng, [1, 2, 4, 4], -1.0, 1.0)],
        ),
        case(
            "pixel_shuffle",
            Primitive::PixelShuffle { factor: 2 },
            vec![uniform(rng, [1, 8, 3, 3], -1.0, 1.0)],
        ),
        case("max_pool2d", Primitive::MaxPool2d, vec![distinct(rng, [1, 2, 4, 6])]),
        case("nearest_upsample", Primitive::Upsample2, vec![uniform(rng, [1, 2, 3, 3], -1.0, 1.0)]),
        case(
            "batch_norm2d_train",
            Primitive::BatchNorm2d {
                mode: Mode::Train,
                eps: 1e-5,
            },
            vec![
                uniform(rng, [3, 2, 3, 3], -1.0, 1.0),
                uniform(rng, [1, 2, 1, 1], 0.5, 1.5),
                uniform(rng, [1, 2, 1, 1], -0.5, 0.5),
                uniform(rng, [1, 2, 1, 1], -0.2, 0.2),
                uniform(rng, [1, 2, 1, 1], 0.5, 1.5),
            ],
        ),
        case(
            "batch_norm2d_infer",
            Primitive::BatchNorm2d {
                mode: Mode::Infer,
                eps: 1e-5,
            },
            vec![
                uniform(rng, [2, 2, 3, 3], -1.0, 1.0),
                uniform(rng, [1, 2, 1, 1], 0.5, 1.5),
                uniform(rng, [1, 2, 1, 1], -0.5, 0.5),
                uniform(rng, [1, 2, 1, 1], -0.2, 0.2),
                uniform(rng, [1, 2, 1, 1], 0.5, 1.5),
            ],
        ),
        case(
            "linear",
            Primitive::Linear,
            vec![uniform(rng, [1, 2, 3, 4], -1.0, 1.0), uniform(rng, [1, 1, 4, 5], -1.0, 1.0), uniform(rng, [1, 1, 1, 5], -1.0, 1.0)],
        ),
        case("patchify", Primitive::Patchify { patch: 2 }, vec![uniform(rng, [1, 2, 4, 6], -1.0, 1.0)]),
        case(
            "unpatchify",
            Primitive::Unpatchify {
                patch: 2,
                height: 4,
                width: 6,
            },
            vec![uniform(rng, [1, 2, 6, 4], -1.0, 1.0)],
        ),
        case("swap_channel_height", Primitive::SwapChannelHeight, vec![uniform(rng, [1, 2, 3, 4], -1.0, 1.0)]),
        case("split_heads", Primitive::SplitHeads { heads: 2 }, vec![uniform(rng, [1, 2, 3, 4], -1.0, 1.0)]),
        case("merge_heads", Primitive::MergeHeads { heads: 2 }, vec![uniform(rng, [1, 4, 3, 2], -1.0, 1.0)]),
        case("scale", Primitive::Scale { factor: 0.7 }, vec![uniform(rng, [1, 2, 2, 3], -1.0, 1.0)]),
        case("sum", Primitive::Sum, vec![uniform(rng, [1, 2, 2, 3], -1.0, 1.0)]),
        case(
            "motion_attention",
            Primitive::MotionAttention { eps: ATTENTION_EPS },
            motion_inputs(rng),
        ),
    ];
    let p = uniform(rng, [1, 2, 3, 3], 0.1, 0.9);
    let y = Tensor4::from_fn([1, 2, 3, 3], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
    v.push(Case {
        name: "wbce",
        prim: Primitive::Wbce { clamp: PROB_CLAMP },
        inputs: vec![p, y],
        constants: vec![1],
    });
    v
}

/// Check one primitive on the given inputs with loss `Σ R ⊙ prim(inputs)` for a fixed random `R`.
fn check_case(c: &Case, seed: u64) -> Result<f64> {
    let probe = {
        let vals: Vec<&Tensor4> = c.inputs.iter().collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant((*t).clone())).collect();
        let out = tape.apply(c.prim.clone(), &vars)?;
        tape.value(out).shape()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let weights = uniform(&mut rng, probe, 0.5, 1.5);
    let free: Vec<usize> = (0..c.inputs.len()).filter(|i| !c.constants.contains(i)).collect();
    let points: Vec<Tensor4> = free.iter().map(|&i| c.inputs[i].clone()).collect();
    finite_diff_check_many(
        |tape, vars| {
            let mut all = Vec::with_capacity(c.inputs.len());
            let mut next = vars.iter();
            for (i, t) in c.inputs.iter().enumerate() {
                if c.constants.contains(&i) {
                    all.push(tape.constant(t.clone()));
                } else {
                    all.push(*next.next().expect("one var per free input"));
                }
            }
            let out = tape.apply(c.prim.clone(), &all)?;
            let w = tape.constant(weights.clone());
            let prod = tape.apply(Primitive::Multiply, &[out, w])?;
            tape.apply(Primitive::Sum, &[prod])
        },
        &points,
        STEP,
    )
}

/// Every primitive at one seed.
pub fn check_primitives(seed: u64) -> Result<Vec<CheckResult>> {
    cases(seed)
        .iter()
        .map(|c| {
            Ok(CheckResult {
                group: "primitive",
                name: c.name.to_string(),
                seed,
                error: check_case(c, seed)?,
            })
        })
        .collect()
}

/// Relative-error floor for whole-model checks. Gradients that are exactly
/// zero (e.g. attention key biases, which softmax ignores) otherwise compare
/// roundoff of order `ε·|L|/step` against the floor.
pub const MODULE_FLOOR: f64 = 1e-7;

/// Compare tape gradients of `f` against central differences over the store's parameters.
pub fn check_store<F>(store: &ParamStore, ids: &[ParamId], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, s, Mode::Train);
        let out = f(&mut ctx)?;
        Ok(ctx.value(out).data()[0])
    };
    let mut tape = Tape::new();
    let out = {
        let mut ctx = Ctx::new(&mut tape, store, Mode::Train);
        f(&mut ctx)?
    };
    let grads = tape.backward(out)?;
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for &id in ids {
        let zero = Tensor4::zeros(store.value(id).shape());
        let analytic = grads.get(id).unwrap_or(&zero).clone();
        for i in 0..analytic.len() {
            let orig = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(MODULE_FLOOR));
        }
    }
    Ok(worst)
}

fn random_triplet(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> FrameTriplet {
    let f = |rng: &mut ChaCha8Rng| uniform(rng, [b, 3, h, w], 0.0, 1.0);
    let (a, c, d) = (f(rng), f(rng), f(rng));
    FrameTriplet::new(a, c, d).expect("valid frames")
}

/// Gradients of the shared `(α, β)` through both attention maps of a triplet.
pub fn check_motion_params(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let module = MotionModule::new(&mut store, MotionEncoding::Polarity, true);
    store.value_mut(module.positive.0).data_mut()[0] = rng.gen_range(0.3..2.0);
    store.value_mut(module.positive.1).data_mut()[0] = rng.gen_range(-0.8..0.8);
    let triplet = random_triplet(&mut rng, 1, 4, 5);
    let weights = uniform(&mut rng, [1, 4, 4, 5], 0.5, 1.5);
    let ids = [module.positive.0, module.positive.1];
    let error = check_store(&store, &ids, STEP, |ctx| {
        let [a1, a2] = module.forward(ctx, &triplet)?;
        let both = ctx.apply(Primitive::Concat, &[a1, a2])?;
        let w = ctx.constant(weights.clone());
        let prod = ctx.apply(Primitive::Multiply, &[both, w])?;
        ctx.apply(Primitive::Sum, &[prod])
    })?;
    Ok(CheckResult {
        group: "module",
        name: "mdd_alpha_beta".into(),
        seed,
        error,
    })
}

/// A small V5 configuration used for end-to-end checks.
pub fn tiny_v5_config(seed: u64) -> ModelConfig {
    ModelConfig {
        variant: Variant::V5,
        height: 8,
        width: 8,
        backbone: BackboneConfig {
            widths: vec![2, 4],
            convs_per_stage: 1,
        },
        tsatt: TsattConfig {
            patch: 4,
            dim: 4,
            heads: 2,
            ..TsattConfig::default()
        },
        shared_attention: true,
        seed,
    }
}

/// WBCE loss of a tiny V5 model, differentiated with respect to every parameter.
pub fn check_tiny_v5(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(tiny_v5_config(seed))?;
    // move off the zero/identity initialization so every path carries gradient
    for p in model.store_mut().params_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let triplet = random_triplet(&mut rng, 2, 8, 8);
    let targets = Tensor4::from_fn([2, 3, 8, 8], |_| if rng.gen_bool(0.1) { 1.0 } else { 0.0 });
    let ids: Vec<ParamId> = model.store().ids().collect();
    let error = check_store(model.store(), &ids, STEP, |ctx| {
        let out = model.forward(ctx, &triplet, seed)?;
        wbce_on_tape(ctx, out.heatmaps, &targets)
    })?;
    Ok(CheckResult {
        group: "module",
        name: "v5_end_to_end".into(),
        seed,
        error,
    })
}

/// The whole suite over `seeds`.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &s in seeds {
        out.extend(check_primitives(s)?);
        out.push(check_motion_params(s)?);
        out.push(check_tiny_v5(s)?);
    }
    Ok(out)
}

/// Largest error per `(group, name)`, in first-seen order.
pub fn summarize(results: &[CheckResult]) -> Vec<(&'static str, String, f64)> {
    let mut out: Vec<(&'static str, String, f64)> = Vec::new();
    for r in results {
        match out.iter_mut().find(|(g, n, _)| *g == r.group && *n == r.name) {
            Some(e) => e.2 = e.2.max(r.error),
            None => out.push((r.group, r.name.clone(), r.error)),
        }
    }
    out
}
