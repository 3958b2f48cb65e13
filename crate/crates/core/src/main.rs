use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use heattrack::checkpoint;
use heattrack::config::{resolve, KeyValues, RunConfig};
use heattrack::eval::{
    classify_frame, compute_metrics, csv_report, evaluate_model, extract_coordinate, predict_sequence, text_report,
    ConfusionCounts, ReportRow,
};
use heattrack::gradcheck;
use heattrack::model::{Model, Variant};
use heattrack::supervision::GroundTruthSpec;
use heattrack::synth::{generate_sequence, generate_split, read_dataset, scene_for, write_dataset, write_ppm, Sequence};
use heattrack::train::{fit, loss_log_csv, AdamState, FitOptions, LossRecord, TrainConfig};
use heattrack::{Error, Result, Tensor4};

#[derive(Parser)]
#[command(name = "heattrack", version, about = "Heatmap tracking of small fast objects")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or report on raw confusion counts.
    Eval(EvalArgs),
    /// Write heatmaps, overlays and detections for every frame.
    Infer(InferArgs),
    /// Finite-difference check of every primitive and module.
    Gradcheck(GradcheckArgs),
    /// Parameter count and multiply-accumulates per sample.
    Stats(StatsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write `train/` and `val/` per the split settings.
    #[arg(long)]
    split: bool,
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 30 epochs at 1e-4, decayed ×0.1 at epochs 20 and 25.
    Full,
    /// 6 epochs at 1e-3 with window stride 3, sized for one CPU core.
    Desk,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Training recipe the other settings start from.
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report on `TP,FP1,FP2,TN,FN` instead of running a model.
    #[arg(long, value_name = "TP,FP1,FP2,TN,FN")]
    counts: Option<String>,
    /// Row label in the report.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only this sequence.
    #[arg(long)]
    sequence: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("heattrack: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn flag<T: std::fmt::Display>(kv: &mut KeyValues, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        kv.set(key, v);
    }
}

fn path_flag(kv: &mut KeyValues, key: &str, v: &Option<PathBuf>) {
    flag(kv, key, &v.as_ref().map(|p| p.display()));
}

fn run(cli: Cli) -> Result<ExitCode> {
    let file = cli.config.as_deref().map(KeyValues::load).transpose()?;
    let mut flags = KeyValues::new();
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        flags.set(k.trim(), v.trim());
    }
    flag(&mut flags, "seed", &cli.seed);
    let mut base = RunConfig::default();
    match &cli.command {
        Command::Synth(a) => {
            path_flag(&mut flags, "paths.data", &a.out);
            flag(&mut flags, "split.train_sequences", &a.sequences);
            flag(&mut flags, "scene.frames", &a.frames);
        }
        Command::Train(a) => {
            if let Preset::Desk = a.preset {
                base.train = TrainConfig::desk();
            }
            path_flag(&mut flags, "paths.data", &a.data);
            path_flag(&mut flags, "paths.out", &a.out);
            flag(&mut flags, "variant", &a.variant);
            flag(&mut flags, "train.epochs", &a.epochs);
            flag(&mut flags, "train.lr", &a.lr);
        }
        Command::Eval(a) => {
            path_flag(&mut flags, "paths.checkpoint", &a.checkpoint);
            path_flag(&mut flags, "paths.data", &a.data);
            path_flag(&mut flags, "paths.out", &a.out);
            flag(&mut flags, "eval.tolerance", &a.tolerance);
            flag(&mut flags, "eval.threshold", &a.threshold);
        }
        Command::Infer(a) => {
            path_flag(&mut flags, "paths.checkpoint", &a.checkpoint);
            path_flag(&mut flags, "paths.data", &a.data);
            path_flag(&mut flags, "paths.out", &a.out);
        }
        Command::Gradcheck(_) => {}
        Command::Stats(a) => {
            flag(&mut flags, "variant", &a.variant);
            flag(&mut flags, "scene.height", &a.height);
            flag(&mut flags, "scene.width", &a.width);
        }
    }
    let run = resolve(base, file.as_ref(), &flags)?;
    match cli.command {
        Command::Synth(a) => synth(&run, a.split),
        Command::Train(_) => train(&run),
        Command::Eval(a) => eval(&run, a.counts.as_deref(), a.model),
        Command::Infer(a) => infer(&run, a.sequence.as_deref()),
        Command::Gradcheck(a) => grad(run.seed, a.seeds, a.tolerance),
        Command::Stats(_) => stats(&run),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// `root/<part>` when it holds a dataset, otherwise `root`.
fn dataset_dir(root: &Path, part: &str) -> PathBuf {
    let sub = root.join(part);
    if sub.join("manifest.txt").exists() {
        sub
    } else {
        root.to_path_buf()
    }
}

fn load_dataset(root: &Path, part: &str) -> Result<Vec<Sequence>> {
    if !root.exists() {
        return Err(Error::Dataset(format!("{} does not exist", root.display())));
    }
    read_dataset(&dataset_dir(root, part))
}

fn synth(run: &RunConfig, split: bool) -> Result<ExitCode> {
    let cfg = run.split_config();
    cfg.scene.validate()?;
    let root = &run.data;
    if split {
        let (train, val) = generate_split(&cfg)?;
        let a = write_dataset(&train, &root.join("train"))?;
        let b = write_dataset(&val, &root.join("val"))?;
        println!(
            "wrote {} train and {} val sequences ({} frames) to {}",
            train.len(),
            val.len(),
            a.total_frames() + b.total_frames(),
            root.display()
        );
    } else {
        let seqs = (0..cfg.train_sequences)
            .map(|i| {
                Ok(Sequence {
                    name: format!("seq_{i:03}"),
                    frames: generate_sequence(&scene_for(&cfg.scene, cfg.seed, i))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = write_dataset(&seqs, root)?;
        println!("wrote {} sequences ({} frames) to {}", seqs.len(), m.total_frames(), root.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn train(run: &RunConfig) -> Result<ExitCode> {
    let data = load_dataset(&run.data, "train")?;
    let (w, h) = data[0]
        .size()
        .ok_or_else(|| Error::Dataset(format!("{}: empty sequence", data[0].name)))?;
    if let Some(s) = data.iter().find(|s| s.size() != Some((w, h))) {
        return Err(Error::Dataset(format!("{}: frame size differs from {w}x{h}", s.name)));
    }
    let mut model = Model::new(run.model_config(h, w))?;
    let mut state = AdamState::new(model.store());
    let cfg = run.train_config();
    create_dir(&run.out)?;
    let start = Instant::now();
    let mut progress = |_: &Model, _: &AdamState, log: &[LossRecord]| {
        if let Some(r) = log.last() {
            eprintln!(
                "epoch {:>3}  step {:>6}  lr {:.1e}  loss {:.6}  [{:.0}s]",
                r.epoch,
                r.step,
                r.lr,
                r.loss,
                start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    };
    let log = fit(
        &mut model,
        &mut state,
        &data,
        &cfg,
        FitOptions {
            max_steps: None,
            on_epoch: Some(&mut progress),
        },
    )?;
    let ckpt = run.out.join("model.ckpt");
    checkpoint::save(&ckpt, run, &model, &state)?;
    write_file(&run.out.join("loss_log.csv"), loss_log_csv(&log).as_bytes())?;
    write_file(&run.out.join("config.txt"), run.to_kv().to_text().as_bytes())?;
    println!("wrote {} and {}", ckpt.display(), run.out.join("loss_log.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn parse_counts(s: &str) -> Result<ConfusionCounts> {
    let v: Vec<u64> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("--counts expects five integers, got `{s}`")))?;
    match v[..] {
        [tp, fp1, fp2, tn, fn_] => Ok(ConfusionCounts::new(tp, fp1, fp2, tn, fn_)),
        _ => Err(Error::Config(format!("--counts expects five integers, got `{s}`"))),
    }
}

fn eval(run: &RunConfig, counts: Option<&str>, label: Option<String>) -> Result<ExitCode> {
    run.eval.validate()?;
    let row = match counts {
        Some(s) => ReportRow {
            model: label.unwrap_or_else(|| "counts".into()),
            counts: parse_counts(s)?,
        },
        None => {
            let ck = checkpoint::load(&run.checkpoint)?;
            let data = load_dataset(&run.data, "val")?;
            let (counts, _) = evaluate_model(&ck.model, &data, &run.eval)?;
            ReportRow {
                model: label.unwrap_or_else(|| ck.model.variant().to_string()),
                counts,
            }
        }
    };
    let rows = [row];
    let text = text_report(&rows);
    print!("{text}");
    create_dir(&run.out)?;
    write_file(&run.out.join("report.txt"), text.as_bytes())?;
    write_file(&run.out.join("report.csv"), csv_report(&rows)?.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

/// Gray levels of the overlay crosses.
const PRED_MARK: f64 = 1.0;
const GT_MARK: f64 = 0.0;

fn draw_cross(img: &mut Tensor4, cx: f64, cy: f64, value: f64) {
    let (h, w) = (img.height() as i64, img.width() as i64);
    let (x0, y0) = (cx.round() as i64, cy.round() as i64);
    for d in -3i64..=3 {
        for (x, y) in [(x0 + d, y0), (x0, y0 + d)] {
            if (0..w).contains(&x) && (0..h).contains(&y) {
                for c in 0..3 {
                    img.set([0, c, y as usize, x as usize], value);
                }
            }
        }
    }
}

fn write_pgm(path: &Path, map: &Tensor4) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    bytes.extend(map.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    write_file(path, &bytes)
}

fn infer(run: &RunConfig, only: Option<&str>) -> Result<ExitCode> {
    let ck = checkpoint::load(&run.checkpoint)?;
    let mut data = load_dataset(&run.data, "val")?;
    if let Some(name) = only {
        data.retain(|s| s.name == name);
        if data.is_empty() {
            return Err(Error::Dataset(format!("no sequence named `{name}`")));
        }
    }
    let cfg = &run.eval;
    cfg.validate()?;
    let mut total = ConfusionCounts::default();
    for seq in &data {
        let dir = run.out.join(&seq.name);
        create_dir(&dir)?;
        let maps = predict_sequence(&ck.model, seq, 4)?;
        let mut csv = String::from("frame,visible,x,y,confidence,outcome\n");
        for (k, (map, frame)) in maps.iter().zip(&seq.frames).enumerate() {
            let det = extract_coordinate(k, map.data(), map.width(), cfg);
            let gt = if frame.visible {
                GroundTruthSpec::visible(frame.center.0, frame.center.1, cfg.tolerance)
            } else {
                GroundTruthSpec::hidden(cfg.tolerance)
            };
            let outcome = classify_frame(&det, &gt, cfg);
            total.record(outcome);
            write_pgm(&dir.join(format!("heat_{k:06}.pgm")), map)?;
            let mut overlay = frame.image.clone();
            if frame.visible {
                draw_cross(&mut overlay, frame.center.0, frame.center.1, GT_MARK);
            }
            let (x, y) = match det.center {
                Some((x, y)) => {
                    draw_cross(&mut overlay, x / cfg.scale.0, y / cfg.scale.1, PRED_MARK);
                    (format!("{x:.3}"), format!("{y:.3}"))
                }
                None => (String::new(), String::new()),
            };
            write_ppm(&dir.join(format!("overlay_{k:06}.ppm")), &overlay)?;
            let _ = writeln!(
                csv,
                "{k},{},{x},{y},{:.6},{outcome:?}",
                u8::from(frame.visible),
                det.confidence
            );
        }
        write_file(&dir.join("detections.csv"), csv.as_bytes())?;
    }
    let m = compute_metrics(&total);
    println!(
        "{} frames in {} sequences written to {}; F1 {:.4}",
        total.total(),
        data.len(),
        run.out.display(),
        m.f1.value
    );
    Ok(ExitCode::SUCCESS)
}

fn grad(seed: u64, seeds: u64, tolerance: f64) -> Result<ExitCode> {
    let seeds: Vec<u64> = (seed..seed + seeds.max(1)).collect();
    let results = gradcheck::run_suite(&seeds)?;
    let mut failed = 0;
    let mut out = std::io::stdout().lock();
    for (group, name, err) in gradcheck::summarize(&results) {
        let ok = err < tolerance;
        failed += usize::from(!ok);
        let _ = writeln!(out, "{:<10} {:<24} {:>10.3e}  {}", group, name, err, if ok { "ok" } else { "FAIL" });
    }
    let _ = writeln!(out, "{} seeds, tolerance {:e}: {} failing", seeds.len(), tolerance, failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn stats(run: &RunConfig) -> Result<ExitCode> {
    let sc = &run.split.scene;
    let model = Model::new(run.model_config(sc.height, sc.width))?;
    println!("variant  {}", model.variant());
    println!("input    {}x{}", sc.width, sc.height);
    println!("params   {}", model.count_params());
    println!("macs     {}", model.estimate_flops());
    Ok(ExitCode::SUCCESS)
}
