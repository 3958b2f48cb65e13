//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 7–9 train three variants on three seeds twice over, so this target
//! takes roughly half an hour on one core.

use std::process::ExitCode;
use std::time::Instant;

use heattrack::diff::{Mode, Primitive, Tape};
use heattrack::eval::{
    classify_frame, compute_metrics, evaluate_model, extract_coordinate, ConfusionCounts, EvalConfig,
};
use heattrack::gradcheck::{run_suite, summarize};
use heattrack::mdd::{attention_map, polarity_decompose, AttentionParams, FrameTriplet};
use heattrack::model::{Model, ModelConfig, Variant};
use heattrack::params::{Ctx, ParamStore};
use heattrack::rstr::{refine, RstrHead, TsattConfig, FRAMES};
use heattrack::supervision::{make_gt_heatmap, wbce_loss, GroundTruthSpec};
use heattrack::synth::{generate_split, windows, Sequence, SplitConfig};
use heattrack::train::{fit, loss_log_csv, lr_at_epoch, window_triplet, AdamState, FitOptions, TrainConfig};
use heattrack::{Result, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one criterion.
struct Verdict {
    pass: bool,
    /// A failure caused only by a reference value that disagrees with its own inputs.
    reference_slip: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: String) -> Self {
        Verdict {
            pass,
            reference_slip: false,
            detail,
        }
    }
}

// ---------------------------------------------------------------- criterion 1

/// `(tp, fp1, fp2, tn, fn, acc, precision, recall, f1)` of the six reference rows.
const REFERENCE_ROWS: [(u64, u64, u64, u64, u64, f64, f64, f64, f64); 6] = [
    (15988, 108, 23, 626, 937, 0.9396, 0.9919, 0.9446, 0.9677),
    (15669, 47, 8, 641, 1317, 0.9224, 0.9965, 0.9225, 0.9581),
    (16573, 116, 13, 636, 344, 0.9733, 0.9923, 0.9797, 0.9859),
    (10615, 54, 3, 180, 461, 0.9542, 0.9947, 0.9584, 0.9762),
    (10555, 52, 9, 174, 523, 0.9484, 0.9943, 0.9528, 0.9731),
    (10864, 80, 2, 181, 186, 0.9763, 0.9925, 0.9832, 0.9878),
];

fn metric_oracle() -> Verdict {
    const TOL: f64 = 5e-5;
    let names = ["accuracy", "precision", "recall", "f1"];
    let mut misses = Vec::new();
    let mut worst: f64 = 0.0;
    for (row, (tp, fp1, fp2, tn, fn_, a, p, r, f)) in REFERENCE_ROWS.into_iter().enumerate() {
        let m = compute_metrics(&ConfusionCounts::new(tp, fp1, fp2, tn, fn_));
        let got = [m.accuracy.value, m.precision.value, m.recall.value, m.f1.value];
        for ((name, g), want) in names.iter().zip(got).zip([a, p, r, f]) {
            let dev = (g - want).abs();
            worst = worst.max(dev);
            if dev > TOL {
                // a value the counts round to differently at four places
                let rounds_same = ((g * 1e4).round() - (want * 1e4).round()).abs() < 0.5;
                misses.push((row + 1, *name, g, want, dev, rounds_same));
            }
        }
    }
    let pass = misses.is_empty();
    let mut detail = format!("24 values, worst |dev| {worst:.2e} (tol {TOL:e})");
    for (row, name, g, want, dev, _) in &misses {
        detail.push_str(&format!("; row {row} {name} {g:.7} vs {want} dev {dev:.2e}"));
    }
    let reference_slip = !pass && misses.iter().all(|m| !m.5 && m.4 < 5.1e-5);
    Verdict {
        pass,
        reference_slip,
        detail,
    }
}

// ---------------------------------------------------------------- criterion 2

const PRIMITIVES: [&str; 27] = [
    "conv2d",
    "relu",
    "sigmoid",
    "tanh",
    "add",
    "subtract",
    "multiply",
    "matmul",
    "layer_norm",
    "softmax",
    "concat",
    "slice_channels",
    "dropout",
    "pixel_shuffle",
    "max_pool2d",
    "nearest_upsample",
    "batch_norm2d",
    "linear",
    "patchify",
    "unpatchify",
    "swap_channel_height",
    "split_heads",
    "merge_heads",
    "scale",
    "sum",
    "motion_attention",
    "wbce",
];

fn gradient_suite() -> Result<Verdict> {
    const TOL: f64 = 1e-4;
    let results = run_suite(&[0, 1, 2, 3, 4])?;
    let summary = summarize(&results);
    let uncovered: Vec<&str> = PRIMITIVES
        .iter()
        .copied()
        .filter(|p| !summary.iter().any(|(_, n, _)| n.starts_with(p)))
        .collect();
    let modules = ["mdd_alpha_beta", "v5_end_to_end"];
    let missing_modules = modules.iter().filter(|m| !summary.iter().any(|(_, n, _)| n == *m)).count();
    let bad: Vec<String> = summary
        .iter()
        .filter(|(_, _, e)| !(e.is_finite() && *e < TOL))
        .map(|(_, n, e)| format!("{n} {e:.2e}"))
        .collect();
    let worst = summary.iter().map(|s| s.2).fold(0.0, f64::max);
    let e2e = summary.iter().find(|s| s.1 == "v5_end_to_end").map_or(f64::NAN, |s| s.2);
    let mut detail = format!(
        "{} checks over 5 seeds, worst rel err {worst:.2e}, tiny V5 {e2e:.2e} (tol {TOL:e})",
        results.len()
    );
    if !uncovered.is_empty() {
        detail.push_str(&format!("; unchecked: {}", uncovered.join(" ")));
    }
    if !bad.is_empty() {
        detail.push_str(&format!("; over tolerance: {}", bad.join(", ")));
    }
    Ok(Verdict::new(uncovered.is_empty() && missing_modules == 0 && bad.is_empty(), detail))
}

// ---------------------------------------------------------------- criterion 3

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mdd_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut broken = Vec::new();
    for i in 0..1000 {
        let delta = Tensor4::from_fn([1, 3, 6, 6], |_| rng.gen_range(-1.0..1.0));
        let p = polarity_decompose(&delta).unwrap();
        let disjoint = p.positive.data().iter().zip(p.negative.data()).all(|(a, b)| a.min(*b) == 0.0);
        let exact = p
            .positive
            .data()
            .iter()
            .zip(p.negative.data())
            .zip(delta.data())
            .all(|((a, b), d)| a - b == *d);
        let alpha = if i % 10 == 0 { 0.0 } else { rng.gen_range(-4.0..4.0) };
        let params = AttentionParams::new(alpha, rng.gen_range(-4.0..4.0));
        let a = attention_map(&delta, &params);
        let b = attention_map(&delta.map(|v| -v), &params);
        let range = a.data().iter().all(|&v| v > 0.0 && v < 1.0);
        let even = a.data() == b.data();
        if !(disjoint && exact && range && even) {
            broken.push(i);
        }
    }
    let half = [0.0, 0.25, 1.0, 3.0].iter().all(|&beta| {
        let p = AttentionParams::new(0.7, beta);
        p.eval(p.offset()) == 0.5
    });
    const LITERAL: f64 = 0.99617;
    // half a unit in the literal's last digit
    const LITERAL_TOL: f64 = 5e-6;
    let a = AttentionParams::new(10.0, 0.0).eval(0.5);
    let closed_form = sigmoid(5.0 / (0.45 * 10f64.tanh() + 1e-6) * 0.5);
    let matches_formula = a == closed_form;
    let matches_literal = (a - LITERAL).abs() <= LITERAL_TOL;
    let invariants = broken.is_empty() && half && matches_formula;
    let detail = format!(
        "1000 tensors, {} violations; A(m)=0.5: {half}; A(α=10,β=0,x=0.5) = {a:.7} (closed form {closed_form:.7}), \
         literal {LITERAL} ± {LITERAL_TOL:e}: {}",
        broken.len(),
        if matches_literal { "match" } else { "mismatch" }
    );
    Verdict {
        pass: invariants && matches_literal,
        reference_slip: invariants && !matches_literal && (a - LITERAL).abs() < 2.5e-5,
        detail,
    }
}

// ---------------------------------------------------------------- criterion 4

fn rstr_mode_consistency() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let cfg = TsattConfig {
        mask_rate: 0.0,
        ..TsattConfig::default()
    };
    let head = RstrHead::new(&mut store, &mut rng, &cfg, 8, true, 16, 16)?;
    // move off the cold-start initialization so the residual path is live
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let run = |mode: Mode, f: &Tensor4, a: &[Tensor4; 2], seed: u64| -> Result<Tensor4> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, mode);
        let fv = ctx.constant(f.clone());
        let av = [ctx.constant(a[0].clone()), ctx.constant(a[1].clone())];
        let t = head.forward(&mut ctx, fv, Some(av), seed)?;
        Ok(ctx.value(t.heatmaps).clone())
    };
    let mut mismatches = 0;
    let mut live_residual = false;
    for k in 0..100u64 {
        let f = Tensor4::from_fn([2, 8, 16, 16], |_| rng.gen_range(-2.0..2.0));
        let a = [0, 1].map(|_| Tensor4::from_fn([2, 2, 16, 16], |_| rng.gen_range(0.0..1.0)));
        let train = run(Mode::Train, &f, &a, k)?;
        let infer = run(Mode::Infer, &f, &a, k ^ 0xdead)?;
        mismatches += usize::from(train != infer);
        live_residual |= train.data().iter().any(|&v| v != 0.5);
    }
    let mut cold = true;
    for variant in [Variant::V5, Variant::V2Rstr] {
        let model = Model::new(ModelConfig {
            variant,
            ..ModelConfig::default()
        })?;
        let triplet = random_triplet(&mut rng, 2, 48, 64);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, model.store(), Mode::Infer);
        let out = model.forward(&mut ctx, &triplet, 0)?;
        let expect = ctx.apply(Primitive::Sigmoid, &[out.draft])?;
        cold &= ctx.value(out.heatmaps) == ctx.value(expect);
    }
    Ok(Verdict::new(
        mismatches == 0 && live_residual && cold,
        format!("ρ=0: {mismatches}/100 train/infer mismatches; cold start H = σ(Draft) exactly: {cold}"),
    ))
}

fn random_triplet(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> FrameTriplet {
    let mut f = || Tensor4::from_fn([b, 3, h, w], |_| rng.gen_range(0.0..1.0));
    FrameTriplet::new(f(), f(), f()).expect("same shapes")
}

// ---------------------------------------------------------------- criterion 5

fn shape_contract() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut problems = Vec::new();
    for (h, w) in [(48, 64), (32, 32)] {
        for variant in Variant::ALL {
            let model = Model::new(ModelConfig {
                variant,
                height: h,
                width: w,
                ..ModelConfig::default()
            })?;
            let t = random_triplet(&mut rng, 1, h, w);
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, model.store(), Mode::Infer);
            let (x, _) = model.build_input(&mut ctx, &t)?;
            let want = if variant.motion().is_some() { 13 } else { 9 };
            if ctx.value(x).shape() != [1, want, h, w] {
                problems.push(format!("{variant} input {:?}", ctx.value(x).shape()));
            }
            let out = model.forward(&mut ctx, &t, 0)?;
            if ctx.value(out.heatmaps).shape() != [1, FRAMES, h, w] {
                problems.push(format!("{variant} output {:?}", ctx.value(out.heatmaps).shape()));
            }
            if let Some(r) = model.rstr() {
                let draft = ctx.value(out.draft_mdd.expect("refining variant")).clone();
                let dv = ctx.constant(draft);
                let tokens = r.tsatt.embed(&mut ctx, dv)?;
                let [_, f, s, _] = ctx.value(tokens).shape();
                let p = TsattConfig::default().patch;
                if f * s != 3 * (h / p) * (w / p) {
                    problems.push(format!("{variant} tokens {}", f * s));
                }
            }
        }
    }
    Ok(Verdict::new(
        problems.is_empty(),
        format!(
            "5 variants at 64x48 and 32x32: 9 channels for v2/v2_rstr, 13 for motion variants, \
             3·(H/4)·(W/4) tokens, full-resolution outputs{}",
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join(", ")) }
        ),
    ))
}

// ---------------------------------------------------------------- criterion 6

fn gt_and_loss() -> Result<Verdict> {
    let disk = make_gt_heatmap(&GroundTruthSpec::visible(10.0, 10.0, 2.0), 21, 21)?.sum();
    let wbce = wbce_loss(&Tensor4::scalar(0.5), &Tensor4::scalar(1.0))?.loss;
    let cfg = TrainConfig::default();
    let lrs = [lr_at_epoch(&cfg, 0)?, lr_at_epoch(&cfg, 20)?, lr_at_epoch(&cfg, 25)?];
    let lr_ok = lrs.iter().zip([1e-4, 1e-5, 1e-6]).all(|(g, w)| (g - w).abs() <= 1e-12 * w);
    let wbce_ok = (wbce - 0.25 * 2f64.ln()).abs() <= 1e-9;
    Ok(Verdict::new(
        disk == 13.0 && wbce_ok && lr_ok,
        format!("r=2 disk {disk} px; WBCE(0.5,1) = {wbce:.12}; lr at 0/20/25 = {:e}/{:e}/{:e}", lrs[0], lrs[1], lrs[2]),
    ))
}

// ---------------------------------------------------------------- criteria 7–9

const SEEDS: [u64; 3] = [0, 1, 2];
const VARIANTS: [Variant; 3] = [Variant::V2, Variant::V2Rstr, Variant::V5];

struct Trained {
    variant: Variant,
    seed: u64,
    log: String,
    counts: ConfusionCounts,
    model: Model,
}

fn train_one(variant: Variant, seed: u64, data: &(Vec<Sequence>, Vec<Sequence>)) -> Result<Trained> {
    let start = Instant::now();
    let mut model = Model::new(ModelConfig {
        variant,
        seed,
        ..ModelConfig::default()
    })?;
    let mut state = AdamState::new(model.store());
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };
    let log = fit(&mut model, &mut state, &data.0, &cfg, FitOptions::default())?;
    let (counts, _) = evaluate_model(&model, &data.1, &EvalConfig::default())?;
    eprintln!(
        "  trained {variant} seed {seed}: {} epochs, FN {} FP {} ({:.0}s)",
        log.len(),
        counts.fn_,
        counts.fp(),
        start.elapsed().as_secs_f64()
    );
    Ok(Trained {
        variant,
        seed,
        log: loss_log_csv(&log),
        counts,
        model,
    })
}

fn train_all() -> Result<Vec<Trained>> {
    let mut out = Vec::new();
    for seed in SEEDS {
        let data = generate_split(&SplitConfig {
            seed,
            ..SplitConfig::default()
        })?;
        for variant in VARIANTS {
            out.push(train_one(variant, seed, &data)?);
        }
    }
    Ok(out)
}

fn find(runs: &[Trained], variant: Variant, seed: u64) -> &Trained {
    runs.iter()
        .find(|r| r.variant == variant && r.seed == seed)
        .expect("every variant/seed pair is trained")
}

fn desk_training(runs: &[Trained]) -> Verdict {
    let v5 = compute_metrics(&find(runs, Variant::V5, 0).counts);
    let v2 = compute_metrics(&find(runs, Variant::V2, 0).counts);
    let epochs = TrainConfig::desk().epochs;
    Verdict::new(
        epochs <= 15 && v5.f1.value >= 0.90 && v5.recall.value > v2.recall.value,
        format!(
            "seed 0, {epochs} epochs: v5 F1 {:.4} (≥ 0.90), recall v5 {:.4} vs v2 {:.4}",
            v5.f1.value, v5.recall.value, v2.recall.value
        ),
    )
}

fn ablation_ordering(runs: &[Trained]) -> Verdict {
    let mut held = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let [v2, rstr, v5] = VARIANTS.map(|v| find(runs, v, seed).counts);
        let ok = rstr.fn_ < v2.fn_ && v5.fn_ < v2.fn_ && v5.fp() as f64 <= 1.1 * rstr.fp() as f64;
        held += usize::from(ok);
        parts.push(format!(
            "seed {seed} FN {}/{}/{} FP {}/{}/{} {}",
            v2.fn_,
            rstr.fn_,
            v5.fn_,
            v2.fp(),
            rstr.fp(),
            v5.fp(),
            if ok { "holds" } else { "fails" }
        ));
    }
    Verdict::new(
        held * 2 > SEEDS.len(),
        format!("{held}/3 seeds (v2/v2_rstr/v5): {}", parts.join("; ")),
    )
}

fn determinism(first: &[Trained], second: &[Trained]) -> Verdict {
    let same = first
        .iter()
        .zip(second)
        .filter(|(a, b)| a.log == b.log && a.counts == b.counts && a.model.store() == b.model.store())
        .count();
    Verdict::new(
        same == first.len() && first.len() == second.len(),
        format!("{same}/{} repeated runs with bit-identical loss logs, weights and counts", first.len()),
    )
}

/// Middle-frame F1 of a trained refining model: intact, with the middle draft
/// zeroed, and with the refinement head removed (`σ(Draft)`).
fn masking_recovery(model: &Model, val: &[Sequence]) -> Result<[f64; 3]> {
    let r = model.rstr().expect("refining variant");
    let cfg = EvalConfig::default();
    let mut counts = [ConfusionCounts::default(); 3];
    for seq in val {
        for chunk in windows(seq.len()).chunks(4) {
            let ts = chunk.iter().map(|&k| window_triplet(seq, k)).collect::<Result<Vec<_>>>()?;
            let triplet = FrameTriplet::batch(&ts.iter().collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, model.store(), Mode::Infer);
            let (x, attn) = model.build_input(&mut ctx, &triplet)?;
            let feats = model.backbone().forward(&mut ctx, x)?;
            let draft = r.make_draft(&mut ctx, feats)?;
            let fused = r.fuse_motion(&mut ctx, draft, attn)?;
            let full = {
                let res = r.tsatt.forward(&mut ctx, fused)?;
                refine(&mut ctx, fused, res)?
            };
            let keep = ctx.constant(Tensor4::from_fn(ctx.value(fused).shape(), |[_, c, _, _]| {
                if c == 1 {
                    0.0
                } else {
                    1.0
                }
            }));
            let blanked = ctx.apply(Primitive::Multiply, &[fused, keep])?;
            let zeroed = {
                let res = r.tsatt.forward(&mut ctx, blanked)?;
                refine(&mut ctx, blanked, res)?
            };
            let bare = ctx.apply(Primitive::Sigmoid, &[draft])?;
            for (i, heat) in [full, zeroed, bare].into_iter().enumerate() {
                let maps = ctx.value(heat);
                for (b, &k) in chunk.iter().enumerate() {
                    let map = maps.slice_batch(b, 1)?.slice_channels(1, 1)?;
                    let frame = &seq.frames[k + 1];
                    let det = extract_coordinate(k + 1, map.data(), map.width(), &cfg);
                    let gt = if frame.visible {
                        GroundTruthSpec::visible(frame.center.0, frame.center.1, cfg.tolerance)
                    } else {
                        GroundTruthSpec::hidden(cfg.tolerance)
                    };
                    counts[i].record(classify_frame(&det, &gt, &cfg));
                }
            }
        }
    }
    Ok(counts.map(|c| compute_metrics(&c).f1.value))
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    let started = Instant::now();
    let mut verdicts: Vec<(u32, &str, Result<Verdict>)> = vec![
        (1, "metric oracle", Ok(metric_oracle())),
        (2, "gradient suite", gradient_suite()),
        (3, "MDD algebra", Ok(mdd_algebra())),
        (4, "R-STR mode consistency", rstr_mode_consistency()),
        (5, "channel/shape contract", shape_contract()),
        (6, "GT/loss checks", gt_and_loss()),
    ];
    eprintln!("training {} runs, then repeating them", SEEDS.len() * VARIANTS.len());
    let first = train_all();
    let second = train_all();
    let mut recovery = None;
    match (&first, &second) {
        (Ok(a), Ok(b)) => {
            verdicts.push((7, "desk-scale training", Ok(desk_training(a))));
            verdicts.push((8, "ablation ordering", Ok(ablation_ordering(a))));
            verdicts.push((9, "determinism", Ok(determinism(a, b))));
            let val = generate_split(&SplitConfig::default()).map(|s| s.1);
            recovery = Some(val.and_then(|v| masking_recovery(&find(a, Variant::V5, 0).model, &v)));
        }
        (Err(e), _) | (_, Err(e)) => {
            for (id, name) in [(7, "desk-scale training"), (8, "ablation ordering"), (9, "determinism")] {
                verdicts.push((id, name, Err(heattrack::Error::Invalid(format!("training failed: {e}")))));
            }
        }
    }

    let mut hard = 0;
    let mut passed = 0;
    for (id, name, v) in &verdicts {
        match v {
            Ok(v) if v.pass => {
                passed += 1;
                println!("PASS  {id} {name}: {}", v.detail);
            }
            Ok(v) if v.reference_slip => {
                println!("FAIL  {id} {name}: {} [reference value inconsistent with its own inputs]", v.detail);
            }
            Ok(v) => {
                hard += 1;
                println!("FAIL  {id} {name}: {}", v.detail);
            }
            Err(e) => {
                hard += 1;
                println!("FAIL  {id} {name}: error: {e}");
            }
        }
    }
    match recovery {
        Some(Ok([full, zeroed, bare])) => println!(
            "INFO  masking recovery (v5 seed 0, middle frame F1): intact {full:.4}, middle draft zeroed {zeroed:.4}, \
             head removed {bare:.4}; zeroing costs less than removing the head: {}",
            full - zeroed < full - bare
        ),
        Some(Err(e)) => println!("INFO  masking recovery: error: {e}"),
        None => {}
    }
    println!(
        "{passed}/{} criteria passed, {hard} unexplained failures ({:.0}s)",
        verdicts.len(),
        started.elapsed().as_secs_f64()
    );
    if hard == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
