use heattrack::config::{resolve, KeyValues, RunConfig};
use heattrack::model::Variant;
use heattrack::Error;

fn kv(text: &str) -> KeyValues {
    KeyValues::parse(text).unwrap()
}

#[test]
fn precedence_matrix() {
    // (file value, flag value, expected)
    let cases: [(Option<&str>, Option<&str>, f64); 4] = [
        (None, None, 1e-4),
        (Some("2e-3"), None, 2e-3),
        (None, Some("5e-4"), 5e-4),
        (Some("2e-3"), Some("5e-4"), 5e-4),
    ];
    for (file, flag, expect) in cases {
        let f = file.map(|v| kv(&format!("train.lr = {v}\n")));
        let mut flags = KeyValues::new();
        if let Some(v) = flag {
            flags.set("train.lr", v);
        }
        let run = resolve(RunConfig::default(), f.as_ref(), &flags).unwrap();
        assert_eq!(run.train.lr, expect, "file {file:?} flag {flag:?}");
    }
}

#[test]
fn untouched_keys_keep_lower_layers() {
    let file = kv("variant = v2\nseed = 7\ntrain.epochs = 3\n");
    let mut flags = KeyValues::new();
    flags.set("seed", 9);
    let run = resolve(RunConfig::default(), Some(&file), &flags).unwrap();
    assert_eq!(run.variant, Variant::V2);
    assert_eq!(run.seed, 9);
    assert_eq!(run.train.epochs, 3);
    assert_eq!(run.train.milestones, RunConfig::default().train.milestones);
}

#[test]
fn unknown_or_malformed_keys_are_config_errors() {
    let bad = kv("train.learning_rate = 1\n");
    assert!(matches!(resolve(RunConfig::default(), Some(&bad), &KeyValues::new()), Err(Error::Config(_))));
    let mut flags = KeyValues::new();
    flags.set("train.epochs", "many");
    assert!(resolve(RunConfig::default(), None, &flags).is_err());
}

#[test]
fn kv_round_trip() {
    let mut run = RunConfig::default();
    run.variant = Variant::V2Rstr;
    run.train.milestones = vec![3, 4];
    run.tsatt.mask_rate = 0.25;
    let text = run.to_kv().to_text();
    let back = resolve(RunConfig::default(), Some(&kv(&text)), &KeyValues::new()).unwrap();
    assert_eq!(back, run);
}
