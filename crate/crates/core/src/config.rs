//! Plain-text `dotted.key = value` configuration and the combined run configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{ModelConfig, Variant};
use crate::rstr::{BlockOrder, TsattConfig};
use crate::synth::SplitConfig;
use crate::train::TrainConfig;

/// Ordered `key = value` pairs. Blank lines and `#` comments are ignored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)));
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if kv.map.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Later values win.
    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    pub fn to_text(&self) -> String {
        self.map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub(crate) fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn split_list<T: FromStr>(key: &str, s: &str) -> Result<Vec<T>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse list item `{p}`")))
        })
        .collect()
}

impl FromStr for BlockOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal_first" => Ok(BlockOrder::TemporalFirst),
            "spatial_first" => Ok(BlockOrder::SpatialFirst),
            _ => Err(Error::Config(format!("unknown block order `{s}`"))),
        }
    }
}

impl Display for BlockOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BlockOrder::TemporalFirst => "temporal_first",
            BlockOrder::SpatialFirst => "spatial_first",
        })
    }
}

/// Every setting a command can use.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub tsatt: TsattConfig,
    pub shared_attention: bool,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub split: SplitConfig,
    pub data: PathBuf,
    pub out: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::V5,
            seed: 0,
            backbone: BackboneConfig::default(),
            tsatt: TsattConfig::default(),
            shared_attention: true,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            split: SplitConfig::default(),
            data: PathBuf::from("data"),
            out: PathBuf::from("out"),
            checkpoint: PathBuf::from("out/model.ckpt"),
        }
    }
}

macro_rules! take {
    ($kv:expr, $key:expr, $slot:expr) => {
        if let Some(v) = $kv.get($key)? {
            $slot = v;
        }
    };
}

impl RunConfig {
    /// Keys understood by [`RunConfig::apply`].
    pub const KEYS: &'static [&'static str] = &[
        "variant",
        "seed",
        "paths.data",
        "paths.out",
        "paths.checkpoint",
        "model.shared_attention",
        "backbone.widths",
        "backbone.convs_per_stage",
        "tsatt.patch",
        "tsatt.dim",
        "tsatt.heads",
        "tsatt.temporal_blocks",
        "tsatt.spatial_blocks",
        "tsatt.ffn_mult",
        "tsatt.mask_rate",
        "tsatt.order",
        "train.lr",
        "train.batch_size",
        "train.epochs",
        "train.milestones",
        "train.gamma",
        "train.weight_decay",
        "train.beta1",
        "train.beta2",
        "train.eps",
        "train.clip",
        "train.window_stride",
        "train.gt_radius",
        "eval.tolerance",
        "eval.threshold",
        "eval.scale_x",
        "eval.scale_y",
        "scene.width",
        "scene.height",
        "scene.frames",
        "scene.ball_radius",
        "scene.speed_min",
        "scene.speed_max",
        "scene.texture",
        "scene.distractors",
        "scene.noise",
        "scene.occluders",
        "split.train_sequences",
        "split.val_sequences",
    ];

    /// Overwrite the fields named in `kv`. Unknown keys are rejected.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(k) = kv.keys().find(|k| !Self::KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown configuration key `{k}`")));
        }
        take!(kv, "variant", self.variant);
        take!(kv, "seed", self.seed);
        take!(kv, "paths.data", self.data);
        take!(kv, "paths.out", self.out);
        take!(kv, "paths.checkpoint", self.checkpoint);
        take!(kv, "model.shared_attention", self.shared_attention);
        if let Some(s) = kv.get_str("backbone.widths") {
            self.backbone.widths = split_list("backbone.widths", s)?;
        }
        take!(kv, "backbone.convs_per_stage", self.backbone.convs_per_stage);
        let t = &mut self.tsatt;
        take!(kv, "tsatt.patch", t.patch);
        take!(kv, "tsatt.dim", t.dim);
        take!(kv, "tsatt.heads", t.heads);
        take!(kv, "tsatt.temporal_blocks", t.temporal_blocks);
        take!(kv, "tsatt.spatial_blocks", t.spatial_blocks);
        take!(kv, "tsatt.ffn_mult", t.ffn_mult);
        take!(kv, "tsatt.mask_rate", t.mask_rate);
        take!(kv, "tsatt.order", t.order);
        let tr = &mut self.train;
        take!(kv, "train.lr", tr.lr);
        take!(kv, "train.batch_size", tr.batch_size);
        take!(kv, "train.epochs", tr.epochs);
        if let Some(s) = kv.get_str("train.milestones") {
            tr.milestones = split_list("train.milestones", s)?;
        }
        take!(kv, "train.gamma", tr.gamma);
        take!(kv, "train.weight_decay", tr.weight_decay);
        take!(kv, "train.beta1", tr.beta1);
        take!(kv, "train.beta2", tr.beta2);
        take!(kv, "train.eps", tr.eps);
        if let Some(s) = kv.get_str("train.clip") {
            tr.clip = match s {
                "" | "none" | "off" => None,
                _ => Some(kv.require("train.clip")?),
            };
        }
        take!(kv, "train.window_stride", tr.window_stride);
        take!(kv, "train.gt_radius", tr.gt_radius);
        take!(kv, "eval.tolerance", self.eval.tolerance);
        take!(kv, "eval.threshold", self.eval.threshold);
        take!(kv, "eval.scale_x", self.eval.scale.0);
        take!(kv, "eval.scale_y", self.eval.scale.1);
        let sc = &mut self.split.scene;
        take!(kv, "scene.width", sc.width);
        take!(kv, "scene.height", sc.height);
        take!(kv, "scene.frames", sc.frames);
        take!(kv, "scene.ball_radius", sc.ball_radius);
        take!(kv, "scene.speed_min", sc.speed.0);
        take!(kv, "scene.speed_max", sc.speed.1);
        take!(kv, "scene.texture", sc.texture);
        take!(kv, "scene.distractors", sc.distractors);
        take!(kv, "scene.noise", sc.noise);
        if let Some(n) = kv.get::<usize>("scene.occluders")? {
            let template = crate::synth::SceneConfig::default().occluders;
            sc.occluders = template.into_iter().cycle().take(n).collect();
        }
        take!(kv, "split.train_sequences", self.split.train_sequences);
        take!(kv, "split.val_sequences", self.split.val_sequences);
        Ok(())
    }

    /// The settings that define a model's architecture.
    pub fn model_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("variant", self.variant);
        kv.set("seed", self.seed);
        kv.set("model.shared_attention", self.shared_attention);
        kv.set("backbone.widths", join(&self.backbone.widths));
        kv.set("backbone.convs_per_stage", self.backbone.convs_per_stage);
        let t = &self.tsatt;
        kv.set("tsatt.patch", t.patch);
        kv.set("tsatt.dim", t.dim);
        kv.set("tsatt.heads", t.heads);
        kv.set("tsatt.temporal_blocks", t.temporal_blocks);
        kv.set("tsatt.spatial_blocks", t.spatial_blocks);
        kv.set("tsatt.ffn_mult", t.ffn_mult);
        kv.set("tsatt.mask_rate", t.mask_rate);
        kv.set("tsatt.order", t.order);
        kv
    }

    /// Every field as key/value pairs; `apply` of the result reproduces `self`.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.model_kv();
        kv.set("paths.data", self.data.display());
        kv.set("paths.out", self.out.display());
        kv.set("paths.checkpoint", self.checkpoint.display());
        let tr = &self.train;
        kv.set("train.lr", tr.lr);
        kv.set("train.batch_size", tr.batch_size);
        kv.set("train.epochs", tr.epochs);
        kv.set("train.milestones", join(&tr.milestones));
        kv.set("train.gamma", tr.gamma);
        kv.set("train.weight_decay", tr.weight_decay);
        kv.set("train.beta1", tr.beta1);
        kv.set("train.beta2", tr.beta2);
        kv.set("train.eps", tr.eps);
        kv.set("train.clip", tr.clip.map_or("none".to_string(), |c| c.to_string()));
        kv.set("train.window_stride", tr.window_stride);
        kv.set("train.gt_radius", tr.gt_radius);
        kv.set("eval.tolerance", self.eval.tolerance);
        kv.set("eval.threshold", self.eval.threshold);
        kv.set("eval.scale_x", self.eval.scale.0);
        kv.set("eval.scale_y", self.eval.scale.1);
        let sc = &self.split.scene;
        kv.set("scene.width", sc.width);
        kv.set("scene.height", sc.height);
        kv.set("scene.frames", sc.frames);
        kv.set("scene.ball_radius", sc.ball_radius);
        kv.set("scene.speed_min", sc.speed.0);
        kv.set("scene.speed_max", sc.speed.1);
        kv.set("scene.texture", sc.texture);
        kv.set("scene.distractors", sc.distractors);
        kv.set("scene.noise", sc.noise);
        kv.set("scene.occluders", sc.occluders.len());
        kv.set("split.train_sequences", self.split.train_sequences);
        kv.set("split.val_sequences", self.split.val_sequences);
        kv
    }

    /// Model configuration at the given frame size.
    pub fn model_config(&self, height: usize, width: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            height,
            width,
            backbone: self.backbone.clone(),
            tsatt: self.tsatt.clone(),
            shared_attention: self.shared_attention,
            seed: self.seed,
        }
    }

    /// Copy with the architecture fields taken from `mc`.
    pub fn with_model(&self, mc: &ModelConfig) -> RunConfig {
        RunConfig {
            variant: mc.variant,
            seed: mc.seed,
            backbone: mc.backbone.clone(),
            tsatt: mc.tsatt.clone(),
            shared_attention: mc.shared_attention,
            ..self.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            seed: self.seed,
            ..self.split.clone()
        }
    }
}

/// Settings layered in increasing priority: `base`, then the config file, then
/// command-line flags.
pub fn resolve(base: RunConfig, file: Option<&KeyValues>, flags: &KeyValues) -> Result<RunConfig> {
    let mut run = base;
    if let Some(f) = file {
        run.apply(f)?;
    }
    run.apply(flags)?;
    Ok(run)
}
