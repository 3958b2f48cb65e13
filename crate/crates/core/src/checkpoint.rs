//! Versioned checkpoints: a `key = value` manifest plus a little-endian f64 blob.
//!
//! The manifest records the run configuration, the frame size, the optimizer
//! step and one registry line per stored tensor:
//! `tensor.00012 = <kind> <name> <b>,<c>,<h>,<w> <byte offset>`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{split_list, KeyValues, RunConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor4;
use crate::train::AdamState;

pub const FORMAT: &str = "heattrack-checkpoint";
pub const VERSION: u32 = 1;

const RESERVED: &[&str] = &["format", "version", "data", "model.height", "model.width", "optimizer.step", "tensors"];

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub model: Model,
    pub state: AdamState,
}

/// Path of the binary blob stored next to `manifest`.
pub fn data_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

struct Entry<'a> {
    kind: &'static str,
    name: &'a str,
    value: &'a Tensor4,
}

fn entries<'a>(model: &'a Model, state: &'a AdamState) -> Vec<Entry<'a>> {
    let store = model.store();
    let mut out = Vec::new();
    for p in store.params() {
        out.push(Entry {
            kind: "param",
            name: &p.name,
            value: &p.value,
        });
    }
    for b in store.buffers() {
        out.push(Entry {
            kind: "buffer",
            name: &b.name,
            value: &b.value,
        });
    }
    for (p, m) in store.params().iter().zip(&state.m) {
        out.push(Entry {
            kind: "adam_m",
            name: &p.name,
            value: m,
        });
    }
    for (p, v) in store.params().iter().zip(&state.v) {
        out.push(Entry {
            kind: "adam_v",
            name: &p.name,
            value: v,
        });
    }
    out
}

pub fn save(manifest: &Path, run: &RunConfig, model: &Model, state: &AdamState) -> Result<()> {
    if !state.matches(model.store()) {
        return Err(Error::Checkpoint("optimizer state does not match the model".into()));
    }
    let data = data_path(manifest);
    let mc = model.config();
    let mut kv = run.to_kv();
    // the model is authoritative for its own architecture
    kv.merge(&run.with_model(mc).model_kv());
    kv.set("format", FORMAT);
    kv.set("version", VERSION);
    kv.set(
        "data",
        data.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
    );
    kv.set("model.height", mc.height);
    kv.set("model.width", mc.width);
    kv.set("optimizer.step", state.step);
    let list = entries(model, state);
    kv.set("tensors", list.len());
    let mut blob = Vec::new();
    for (i, e) in list.iter().enumerate() {
        let s = e.value.shape();
        kv.set(
            &format!("tensor.{i:05}"),
            format!("{} {} {},{},{},{} {}", e.kind, e.name, s[0], s[1], s[2], s[3], blob.len()),
        );
        for v in e.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&data, blob).map_err(|e| Error::io(&data, e))?;
    let text = format!("# {FORMAT} manifest\n{}", kv.to_text());
    fs::write(manifest, text).map_err(|e| Error::io(manifest, e))
}

pub fn load(manifest: &Path) -> Result<Checkpoint> {
    if !manifest.exists() {
        return Err(Error::Checkpoint(format!("{} does not exist", manifest.display())));
    }
    let kv = KeyValues::load(manifest)?;
    let bad = |why: String| Error::Checkpoint(format!("{}: {why}", manifest.display()));
    if kv.get_str("format") != Some(FORMAT) {
        return Err(bad("not a checkpoint manifest".into()));
    }
    let version: u32 = kv.require("version")?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version} (expected {VERSION})")));
    }
    let mut run_kv = KeyValues::new();
    for (k, v) in kv.iter() {
        if !RESERVED.contains(&k) && !k.starts_with("tensor.") {
            run_kv.set(k, v);
        }
    }
    let mut run = RunConfig::default();
    run.apply(&run_kv)?;
    let height: usize = kv.require("model.height")?;
    let width: usize = kv.require("model.width")?;
    let mut model = Model::new(run.model_config(height, width))?;
    let mut state = AdamState::new(model.store());
    state.step = kv.require("optimizer.step")?;

    let data_name: String = kv.require("data")?;
    let data_file = manifest.parent().unwrap_or(Path::new("")).join(data_name);
    let blob = fs::read(&data_file).map_err(|e| Error::io(&data_file, e))?;
    let count: usize = kv.require("tensors")?;
    let expected: Vec<(String, String, [usize; 4])> = entries(&model, &state)
        .iter()
        .map(|e| (e.kind.to_string(), e.name.to_string(), e.value.shape()))
        .collect();
    if count != expected.len() {
        return Err(bad(format!("{count} tensors recorded, model needs {}", expected.len())));
    }
    let mut values = Vec::with_capacity(count);
    for (i, (kind, name, shape)) in expected.iter().enumerate() {
        let key = format!("tensor.{i:05}");
        let line: String = kv.require(&key)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [k, n, s, off] = parts[..] else {
            return Err(bad(format!("{key}: malformed entry `{line}`")));
        };
        let dims: Vec<usize> = split_list(&key, s)?;
        if k != kind || n != name || dims != shape {
            return Err(bad(format!(
                "{key}: found {k} {n} {dims:?}, model expects {kind} {name} {shape:?}"
            )));
        }
        let off: usize = off.parse().map_err(|_| bad(format!("{key}: bad offset `{off}`")))?;
        let len = shape.iter().product::<usize>();
        let bytes = blob
            .get(off..off + 8 * len)
            .ok_or_else(|| bad(format!("{key}: data file too short")))?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        values.push(Tensor4::from_vec(*shape, data)?);
    }
    let np = model.store().params().len();
    let mut it = values.into_iter();
    let store = model.store_mut();
    for p in store.params_mut() {
        p.value = it.next().expect("counted");
    }
    for b in store.buffers_mut() {
        b.value = it.next().expect("counted");
    }
    state.m = it.by_ref().take(np).collect();
    state.v = it.collect();
    Ok(Checkpoint { run, model, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn data_path_appends_suffix() {
        assert_eq!(data_path(Path::new("a/m.ckpt")), PathBuf::from("a/m.ckpt.bin"));
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut run = RunConfig::default();
        run.variant = Variant::V2Mdd;
        run.backbone.widths = vec![4, 8];
        let mut model = Model::new(run.model_config(16, 16)).unwrap();
        model.store_mut().params_mut()[0].value.data_mut()[0] = 0.123456789;
        let mut state = AdamState::new(model.store());
        state.step = 7;
        state.m[1].data_mut()[0] = -3.5;
        save(&path, &run, &model, &state).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.run, run);
        assert_eq!(ck.state, state);
        for (a, b) in ck.model.store().params().iter().zip(model.store().params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut run = RunConfig::default();
        run.variant = Variant::V2;
        run.backbone.widths = vec![4, 8];
        let model = Model::new(run.model_config(16, 16)).unwrap();
        save(&path, &run, &model, &AdamState::new(model.store())).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("backbone.widths = 4,8", "backbone.widths = 4,6");
        fs::write(&path, text).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
