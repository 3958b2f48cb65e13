//! Train one variant on the default synthetic split and report validation metrics per epoch.
//!
//! `cargo run --release --example desk_run -- v5 15 0`

use std::time::Instant;

use heattrack::eval::{compute_metrics, evaluate_model, EvalConfig};
use heattrack::model::{Model, ModelConfig, Variant};
use heattrack::synth::{generate_split, SplitConfig};
use heattrack::train::{fit, AdamState, FitOptions, TrainConfig};

fn main() -> heattrack::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let variant: Variant = args.get(1).map_or("v5", String::as_str).parse()?;
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(15);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let split = SplitConfig { seed, ..SplitConfig::default() };
    let (train, val) = generate_split(&split)?;
    let mut model = Model::new(ModelConfig { variant, seed, ..ModelConfig::default() })?;
    let mut state = AdamState::new(model.store());
    let desk = TrainConfig::desk();
    let milestones = desk.milestones.iter().copied().filter(|&m| m < epochs).collect();
    let cfg = TrainConfig { epochs, seed, milestones, ..desk };
    let start = Instant::now();
    let mut report = |m: &Model, _: &AdamState, log: &[heattrack::train::LossRecord]| {
        let r = log.last().unwrap();
        let (c, _) = evaluate_model(m, &val, &EvalConfig::default())?;
        let mt = compute_metrics(&c);
        println!(
            "{variant} epoch {:2} loss {:.5} f1 {:.4} recall {:.4} tp {} fp1 {} fp2 {} tn {} fn {}  [{:.0}s]",
            r.epoch, r.loss, mt.f1.value, mt.recall.value, c.tp, c.fp1, c.fp2, c.tn, c.fn_,
            start.elapsed().as_secs_f64()
        );
        Ok(())
    };
    fit(&mut model, &mut state, &train, &cfg, FitOptions { max_steps: None, on_epoch: Some(&mut report) })?;
    Ok(())
}
