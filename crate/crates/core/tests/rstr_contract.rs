use heattrack::diff::{Mode, Primitive, Tape};
use heattrack::mdd::FrameTriplet;
use heattrack::model::{Model, ModelConfig, Variant};
use heattrack::params::{Ctx, ParamStore};
use heattrack::rstr::{RstrHead, TsattConfig, FRAMES};
use heattrack::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: [usize; 4], scale: f64) -> Tensor4 {
    Tensor4::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn triplet(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> FrameTriplet {
    let mut f = || Tensor4::from_fn([b, 3, h, w], |_| rng.gen_range(0.0..1.0));
    FrameTriplet::new(f(), f(), f()).unwrap()
}

/// Head with perturbed weights so the residual path is not trivially zero.
fn trained_like_head(seed: u64, mask_rate: f64, with_motion: bool) -> (ParamStore, RstrHead) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TsattConfig {
        mask_rate,
        dim: 8,
        heads: 2,
        ..TsattConfig::default()
    };
    let head = RstrHead::new(&mut store, &mut rng, &cfg, 6, with_motion, 8, 8).unwrap();
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    (store, head)
}

fn run_head(store: &ParamStore, head: &RstrHead, mode: Mode, features: &Tensor4, attn: Option<[&Tensor4; 2]>, seed: u64) -> Tensor4 {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, mode);
    let f = ctx.constant(features.clone());
    let a = attn.map(|[a, b]| [ctx.constant(a.clone()), ctx.constant(b.clone())]);
    let t = head.forward(&mut ctx, f, a, seed).unwrap();
    ctx.value(t.heatmaps).clone()
}

#[test]
fn zero_mask_rate_train_path_equals_infer_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (i, with_motion) in [false, true].into_iter().enumerate() {
        let (store, head) = trained_like_head(i as u64, 0.0, with_motion);
        for k in 0..50 {
            let x = random(&mut rng, [2, 6, 8, 8], 2.0);
            let a1 = Tensor4::from_fn([2, 2, 8, 8], |_| rng.gen_range(0.0..1.0));
            let a2 = Tensor4::from_fn([2, 2, 8, 8], |_| rng.gen_range(0.0..1.0));
            let attn = with_motion.then_some([&a1, &a2]);
            let train = run_head(&store, &head, Mode::Train, &x, attn, k);
            let infer = run_head(&store, &head, Mode::Infer, &x, attn, k + 1000);
            assert_eq!(train, infer, "input {k}");
            assert!(train.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }
}

#[test]
fn masking_only_acts_in_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (store, head) = trained_like_head(4, 0.3, false);
    let x = random(&mut rng, [1, 6, 8, 8], 2.0);
    let a = run_head(&store, &head, Mode::Infer, &x, None, 1);
    let b = run_head(&store, &head, Mode::Infer, &x, None, 2);
    assert_eq!(a, b);
    let t1 = run_head(&store, &head, Mode::Train, &x, None, 1);
    let t1b = run_head(&store, &head, Mode::Train, &x, None, 1);
    let t2 = run_head(&store, &head, Mode::Train, &x, None, 2);
    assert_eq!(t1, t1b);
    assert_ne!(t1, a);
    assert_ne!(t1, t2);
}

#[test]
fn cold_start_is_sigmoid_of_draft() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for variant in [Variant::V5, Variant::V2Rstr] {
        let model = Model::new(ModelConfig {
            variant,
            height: 16,
            width: 16,
            ..ModelConfig::default()
        })
        .unwrap();
        let t = triplet(&mut rng, 2, 16, 16);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, model.store(), Mode::Infer);
        let out = model.forward(&mut ctx, &t, 0).unwrap();
        let residual = ctx.value(out.residual.unwrap()).clone();
        assert!(residual.data().iter().all(|&v| v == 0.0));
        assert_eq!(ctx.value(out.draft_mdd.unwrap()), ctx.value(out.draft));
        let expect = ctx.apply(Primitive::Sigmoid, &[out.draft]).unwrap();
        assert_eq!(ctx.value(out.heatmaps), ctx.value(expect));
    }
}

#[test]
fn input_channels_and_output_resolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for variant in Variant::ALL {
        let (h, w) = (16, 24);
        let model = Model::new(ModelConfig {
            variant,
            height: h,
            width: w,
            ..ModelConfig::default()
        })
        .unwrap();
        let t = triplet(&mut rng, 2, h, w);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, model.store(), Mode::Infer);
        let (x, attn) = model.build_input(&mut ctx, &t).unwrap();
        let expect = if variant == Variant::V2 || variant == Variant::V2Rstr { 9 } else { 13 };
        assert_eq!(ctx.value(x).shape(), [2, expect, h, w], "{variant}");
        assert_eq!(variant.input_channels(), expect);
        assert_eq!(attn.is_some(), expect == 13);
        assert_eq!(model.predict(&t).unwrap().shape(), [2, FRAMES, h, w]);
    }
}

#[test]
fn token_count() {
    let cfg = TsattConfig::default();
    assert_eq!(cfg.token_count(48, 64), 3 * 12 * 16);
    assert_eq!(cfg.token_count(16, 24), 3 * 4 * 6);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let head = RstrHead::new(&mut store, &mut rng, &cfg, 8, false, 16, 24).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Infer);
    let x = ctx.constant(Tensor4::zeros([1, 3, 16, 24]));
    let tokens = head.tsatt.embed(&mut ctx, x).unwrap();
    let [_, f, s, d] = ctx.value(tokens).shape();
    assert_eq!(f * s, cfg.token_count(16, 24));
    assert_eq!(d, cfg.dim);
}

#[test]
fn bad_sizes_are_rejected() {
    let cfg = TsattConfig::default();
    assert!(cfg.validate(18, 24).is_err());
    let odd_heads = TsattConfig { heads: 5, ..cfg.clone() };
    assert!(odd_heads.validate(16, 16).is_err());
}

#[test]
fn temporal_block_commutes_with_spatial_permutation() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = TsattConfig::default();
    let head = RstrHead::new(&mut store, &mut rng, &cfg, 8, false, 16, 16).unwrap();
    let block = head.tsatt.first_temporal_block().unwrap();
    let s = cfg.spatial_tokens(16, 16);
    let d = cfg.dim;
    let tokens = random(&mut rng, [1, FRAMES, s, d], 1.0);
    let mut perm: Vec<usize> = (0..s).collect();
    for i in (1..s).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let permute = |t: &Tensor4| Tensor4::from_fn(t.shape(), |[b, f, i, k]| t.at([b, f, perm[i], k]));
    let run = |t: &Tensor4| {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Infer);
        let v = ctx.constant(t.clone());
        let out = head.tsatt.temporal_block(&mut ctx, block, v).unwrap();
        ctx.value(out).clone()
    };
    let a = permute(&run(&tokens));
    let b = run(&permute(&tokens));
    assert!(a.max_abs_diff(&b) < 1e-12);
}
