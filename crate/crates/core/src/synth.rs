//! Deterministic bouncing-ball videos with occluders, distractors and
//! sensor noise, plus the PPM + CSV dataset layout.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Sub-samples per axis used for edge coverage.
const SUPERSAMPLE: usize = 4;

/// Axis-aligned rectangle drifting linearly and bouncing off the image border.
#[derive(Clone, Debug, PartialEq)]
pub struct Occluder {
    /// Top-left corner at frame 0.
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    /// Pixels per frame.
    pub vx: f64,
    pub vy: f64,
    pub color: [f64; 3],
}

impl Occluder {
    /// Top-left corner at frame `t`.
    pub fn position(&self, t: usize, img_w: usize, img_h: usize) -> (f64, f64) {
        let x = reflect(self.x, self.vx, t, 0.0, (img_w as f64 - self.width).max(0.0));
        let y = reflect(self.y, self.vy, t, 0.0, (img_h as f64 - self.height).max(0.0));
        (x, y)
    }

    /// Whether the point lies inside the rectangle at frame `t`.
    pub fn covers(&self, t: usize, img_w: usize, img_h: usize, px: f64, py: f64) -> bool {
        let (x, y) = self.position(t, img_w, img_h);
        px >= x && px < x + self.width && py >= y && py < y + self.height
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub ball_radius: f64,
    /// Speed range in pixels per frame; direction is drawn uniformly.
    pub speed: (f64, f64),
    /// Fixed start position and velocity. Drawn from `seed` when absent.
    pub start: Option<(f64, f64)>,
    pub velocity: Option<(f64, f64)>,
    pub ball_color: [f64; 3],
    pub background: [f64; 3],
    /// Amplitude of a static low-frequency background pattern.
    pub texture: f64,
    /// Static ball-coloured discs placed from `seed`.
    pub distractors: usize,
    pub occluders: Vec<Occluder>,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 48,
            frames: 120,
            ball_radius: 2.0,
            speed: (1.5, 3.5),
            start: None,
            velocity: None,
            ball_color: [0.85, 0.85, 0.7],
            background: [0.3, 0.42, 0.3],
            texture: 0.08,
            distractors: 1,
            occluders: vec![Occluder {
                x: 20.0,
                y: 0.0,
                width: 6.0,
                height: 48.0,
                vx: 0.4,
                vy: 0.0,
                color: [0.22, 0.22, 0.26],
            }],
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SceneConfig {
    /// A scene with no occluders, distractors, texture or noise.
    pub fn plain(width: usize, height: usize, frames: usize) -> Self {
        SceneConfig {
            width,
            height,
            frames,
            texture: 0.0,
            distractors: 0,
            occluders: Vec::new(),
            noise: 0.0,
            ..SceneConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 3 {
            return Err(Error::Invalid(format!("a sequence needs at least 3 frames, got {}", self.frames)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("scene dimensions must be positive".into()));
        }
        let limit = self.width.min(self.height) as f64 / 2.0;
        if !(self.ball_radius > 0.0) || self.ball_radius >= limit {
            return Err(Error::Invalid(format!(
                "ball radius {} must lie in (0, {limit})",
                self.ball_radius
            )));
        }
        if !(self.speed.0 >= 0.0 && self.speed.1 >= self.speed.0) {
            return Err(Error::Invalid(format!("bad speed range {:?}", self.speed)));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Invalid("noise must be nonnegative".into()));
        }
        Ok(())
    }

    /// Range the ball centre is confined to along each axis.
    pub fn bounds(&self) -> ((f64, f64), (f64, f64)) {
        let r = self.ball_radius;
        ((r, self.width as f64 - 1.0 - r), (r, self.height as f64 - 1.0 - r))
    }
}

/// Position after `t` steps of velocity `v` from `x0`, reflecting elastically off `[lo, hi]`.
pub fn reflect(x0: f64, v: f64, t: usize, lo: f64, hi: f64) -> f64 {
    let mut x = x0;
    let mut v = v;
    for _ in 0..t {
        x += v;
        // a single step never crosses the whole interval for the speeds used here,
        // but loop anyway so large steps stay in range
        loop {
            if x > hi {
                x = 2.0 * hi - x;
                v = -v;
            } else if x < lo {
                x = 2.0 * lo - x;
                v = -v;
            } else {
                break;
            }
            if hi <= lo {
                x = lo;
                break;
            }
        }
    }
    x
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFrame {
    /// `(1, 3, H, W)` in `[0, 1]`, quantized to 8 bits.
    pub image: Tensor4,
    pub visible: bool,
    /// True ball centre, kept even when the ball is hidden.
    pub center: (f64, f64),
}

/// Everything drawn below the ball: background colour, texture and distractors.
#[derive(Clone, Debug)]
struct Backdrop {
    image: Tensor4,
}

impl Backdrop {
    fn new(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Self {
        let (w, h) = (cfg.width, cfg.height);
        let (fx, fy, px, py): (f64, f64, f64, f64) = (
            rng.gen_range(1.0..3.0),
            rng.gen_range(1.0..3.0),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        );
        let mut image = Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| {
            let u = x as f64 / w as f64 * std::f64::consts::TAU * fx + px;
            let v = y as f64 / h as f64 * std::f64::consts::TAU * fy + py;
            cfg.background[c] + cfg.texture * 0.5 * (u.sin() + v.cos())
        });
        let ((x0, x1), (y0, y1)) = cfg.bounds();
        for _ in 0..cfg.distractors {
            let cx = rng.gen_range(x0..=x1);
            let cy = rng.gen_range(y0..=y1);
            paint_disk(&mut image, cx, cy, cfg.ball_radius, cfg.ball_color);
        }
        Backdrop { image }
    }
}

/// Fraction of pixel `(x, y)` covered by the disk, by regular supersampling.
fn coverage(x: usize, y: usize, cx: f64, cy: f64, r: f64) -> f64 {
    let r2 = r * r;
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let dx = x as f64 - 0.5 + (sx as f64 + 0.5) * step - cx;
            let dy = y as f64 - 0.5 + (sy as f64 + 0.5) * step - cy;
            if dx * dx + dy * dy <= r2 {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

fn paint_disk(img: &mut Tensor4, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
    let [_, _, h, w] = img.shape();
    let ylo = (cy - r - 1.0).floor().max(0.0) as usize;
    let yhi = ((cy + r + 1.0).ceil().max(0.0) as usize).min(h.saturating_sub(1));
    let xlo = (cx - r - 1.0).floor().max(0.0) as usize;
    let xhi = ((cx + r + 1.0).ceil().max(0.0) as usize).min(w.saturating_sub(1));
    for y in ylo..=yhi {
        for x in xlo..=xhi {
            let a = coverage(x, y, cx, cy, r);
            if a > 0.0 {
                for (c, &col) in color.iter().enumerate() {
                    let v = img.at([0, c, y, x]);
                    img.set([0, c, y, x], (1.0 - a) * v + a * col);
                }
            }
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Ball trajectory and per-frame rendering state drawn from the seed.
struct Scene {
    start: (f64, f64),
    velocity: (f64, f64),
    backdrop: Backdrop,
}

fn setup(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Scene {
    let ((x0, x1), (y0, y1)) = cfg.bounds();
    let start = cfg
        .start
        .unwrap_or_else(|| (rng.gen_range(x0..=x1), rng.gen_range(y0..=y1)));
    let velocity = cfg.velocity.unwrap_or_else(|| {
        let speed = if cfg.speed.1 > cfg.speed.0 {
            rng.gen_range(cfg.speed.0..cfg.speed.1)
        } else {
            cfg.speed.0
        };
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        (speed * angle.cos(), speed * angle.sin())
    });
    let backdrop = Backdrop::new(cfg, rng);
    Scene {
        start,
        velocity,
        backdrop,
    }
}

/// Ball centre at frame `t`.
pub fn ball_center(cfg: &SceneConfig, start: (f64, f64), velocity: (f64, f64), t: usize) -> (f64, f64) {
    let ((x0, x1), (y0, y1)) = cfg.bounds();
    (reflect(start.0, velocity.0, t, x0, x1), reflect(start.1, velocity.1, t, y0, y1))
}

/// Noise-free, occluder-free frame with the ball at `center`, quantized like a generated frame.
pub fn render_clean(cfg: &SceneConfig, center: (f64, f64)) -> Result<Tensor4> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scene = setup(cfg, &mut rng);
    let mut img = scene.backdrop.image.clone();
    paint_disk(&mut img, center.0, center.1, cfg.ball_radius, cfg.ball_color);
    for v in img.data_mut() {
        *v = quantize(*v);
    }
    Ok(img)
}

/// Render a full labelled sequence. Same configuration, same output, bit for bit.
pub fn generate_sequence(cfg: &SceneConfig) -> Result<Vec<LabeledFrame>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scene = setup(cfg, &mut rng);
    let noise = if cfg.noise > 0.0 {
        Some(Normal::new(0.0, cfg.noise).map_err(|e| Error::Invalid(e.to_string()))?)
    } else {
        None
    };
    let (w, h) = (cfg.width, cfg.height);
    let mut out = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let center = ball_center(cfg, scene.start, scene.velocity, t);
        let mut img = scene.backdrop.image.clone();
        paint_disk(&mut img, center.0, center.1, cfg.ball_radius, cfg.ball_color);
        let mut visible = true;
        for occ in &cfg.occluders {
            let (ox, oy) = occ.position(t, w, h);
            // pixel centres inside the rectangle are painted over
            for y in 0..h {
                let fy = y as f64;
                if fy < oy || fy >= oy + occ.height {
                    continue;
                }
                for x in 0..w {
                    let fx = x as f64;
                    if fx >= ox && fx < ox + occ.width {
                        for c in 0..3 {
                            img.set([0, c, y, x], occ.color[c]);
                        }
                    }
                }
            }
            if occ.covers(t, w, h, center.0, center.1) {
                visible = false;
            }
        }
        if let Some(dist) = &noise {
            for v in img.data_mut() {
                *v += dist.sample(&mut rng);
            }
        }
        for v in img.data_mut() {
            *v = quantize(*v);
        }
        out.push(LabeledFrame {
            image: img,
            visible,
            center,
        });
    }
    Ok(out)
}

/// Start indices of every 3-frame window: `n − 2` overlapping windows.
pub fn windows(frames: usize) -> Vec<usize> {
    (0..frames.saturating_sub(2)).collect()
}

/// Windows covering every frame exactly once (the last may overlap its predecessor).
pub fn tiling_windows(frames: usize) -> Vec<usize> {
    if frames < 3 {
        return Vec::new();
    }
    let mut starts: Vec<usize> = (0..frames / 3).map(|i| i * 3).collect();
    if !frames.is_multiple_of(3) {
        starts.push(frames - 3);
    }
    starts
}

/// A decoded sequence: frames plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<LabeledFrame>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn size(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.image.width(), f.image.height()))
    }
}

/// Train/validation split of synthetic sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub scene: SceneConfig,
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            scene: SceneConfig::default(),
            train_sequences: 8,
            val_sequences: 2,
            seed: 0,
        }
    }
}

/// Per-sequence seed: distinct streams for every `(seed, index)` pair.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(1)
}

/// Scene for sequence `index` of a split: the base scene reseeded, with the
/// occluder's start shifted so crossings fall at different times.
pub fn scene_for(base: &SceneConfig, seed: u64, index: usize) -> SceneConfig {
    let s = sequence_seed(seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5EED);
    let mut cfg = base.clone();
    cfg.seed = s;
    for occ in &mut cfg.occluders {
        let span = (base.width as f64 - occ.width).max(0.0);
        occ.x = rng.gen_range(0.0..=span);
        if rng.gen_bool(0.5) {
            occ.vx = -occ.vx;
        }
    }
    cfg
}

pub fn generate_split(cfg: &SplitConfig) -> Result<(Vec<Sequence>, Vec<Sequence>)> {
    let make = |range: std::ops::Range<usize>, prefix: &str| -> Result<Vec<Sequence>> {
        range
            .enumerate()
            .map(|(k, i)| {
                Ok(Sequence {
                    name: format!("{prefix}{k:03}"),
                    frames: generate_sequence(&scene_for(&cfg.scene, cfg.seed, i))?,
                })
            })
            .collect()
    };
    let train = make(0..cfg.train_sequences, "train_")?;
    let val = make(cfg.train_sequences..cfg.train_sequences + cfg.val_sequences, "val_")?;
    Ok((train, val))
}

/// What [`write_dataset`] put on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    /// `(sequence directory name, frame count)`.
    pub sequences: Vec<(String, usize)>,
}

impl Manifest {
    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(|(_, n)| n).sum()
    }
}

/// Binary 8-bit PPM of a `(1, 3, H, W)` image.
pub fn write_ppm(path: &Path, img: &Tensor4) -> Result<()> {
    let [b, c, h, w] = img.shape();
    if b != 1 || c != 3 {
        return Err(Error::shape("ppm", format!("expected (1, 3, H, W), got {:?}", img.shape())));
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                bytes.push((img.at([0, ch, y, x]).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ppm_token(data: &[u8], pos: &mut usize) -> Option<usize> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    std::str::from_utf8(&data[start..*pos]).ok()?.parse().ok()
}

pub fn read_ppm(path: &Path) -> Result<Tensor4> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Dataset(format!("{}: {why}", path.display()));
    if !data.starts_with(b"P6") {
        return Err(bad("not a binary PPM"));
    }
    let mut pos = 2;
    let w = ppm_token(&data, &mut pos).ok_or_else(|| bad("missing width"))?;
    let h = ppm_token(&data, &mut pos).ok_or_else(|| bad("missing height"))?;
    let max = ppm_token(&data, &mut pos).ok_or_else(|| bad("missing maxval"))?;
    if max != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    pos += 1;
    let body = data.get(pos..pos + 3 * w * h).ok_or_else(|| bad("truncated pixel data"))?;
    let mut img = Tensor4::zeros([1, 3, h, w]);
    for (i, px) in body.chunks_exact(3).enumerate() {
        let (y, x) = (i / w, i % w);
        for c in 0..3 {
            img.set([0, c, y, x], px[c] as f64 / 255.0);
        }
    }
    Ok(img)
}

fn write_labels(path: &Path, frames: &[LabeledFrame]) -> Result<()> {
    let io = |e: csv::Error| Error::Dataset(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["frame", "visibility", "x", "y"]).map_err(io)?;
    for (k, f) in frames.iter().enumerate() {
        if f.visible {
            w.write_record([k.to_string(), "1".into(), f.center.0.to_string(), f.center.1.to_string()])
        } else {
            w.write_record([k.to_string(), "0".into(), String::new(), String::new()])
        }
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write `root/<seq>/frames/%06d.ppm` and `root/<seq>/labels.csv` for every sequence.
pub fn write_dataset(sequences: &[Sequence], root: &Path) -> Result<Manifest> {
    let mut manifest = Manifest {
        root: root.to_path_buf(),
        sequences: Vec::new(),
    };
    for seq in sequences {
        let dir = root.join(&seq.name);
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        for (k, f) in seq.frames.iter().enumerate() {
            write_ppm(&frames_dir.join(format!("{k:06}.ppm")), &f.image)?;
        }
        write_labels(&dir.join("labels.csv"), &seq.frames)?;
        manifest.sequences.push((seq.name.clone(), seq.frames.len()));
    }
    let list = root.join("manifest.txt");
    let mut text = String::new();
    for (name, n) in &manifest.sequences {
        text.push_str(&format!("{name} {n}\n"));
    }
    fs::File::create(&list)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(&list, e))?;
    Ok(manifest)
}

/// Read one sequence directory. Hidden frames get centre `(0, 0)`.
pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let labels = dir.join("labels.csv");
    let file = fs::File::open(&labels).map_err(|e| Error::io(&labels, e))?;
    let bad = |why: String| Error::Dataset(format!("{}: {why}", labels.display()));
    let mut rdr = csv::Reader::from_reader(BufReader::new(file));
    let mut frames = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let k: usize = field(0).parse().map_err(|_| bad(format!("row {row}: bad frame index")))?;
        if k != row {
            return Err(bad(format!("row {row}: frame index {k} out of order")));
        }
        let visible = match field(1).as_str() {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("row {row}: visibility `{other}`"))),
        };
        let coord = |i: usize| -> Result<f64> {
            let s = field(i);
            if s.is_empty() {
                return if visible {
                    Err(bad(format!("row {row}: visible frame without coordinates")))
                } else {
                    Ok(0.0)
                };
            }
            s.parse().map_err(|_| bad(format!("row {row}: bad coordinate `{s}`")))
        };
        let center = (coord(2)?, coord(3)?);
        let image = read_ppm(&dir.join("frames").join(format!("{k:06}.ppm")))?;
        frames.push(LabeledFrame { image, visible, center });
    }
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sequence { name, frames })
}

/// Read every sequence listed in `root/manifest.txt`, or every subdirectory
/// holding a `labels.csv` when there is no manifest.
pub fn read_dataset(root: &Path) -> Result<Vec<Sequence>> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let list = root.join("manifest.txt");
    let names: Vec<String> = if list.exists() {
        let f = fs::File::open(&list).map_err(|e| Error::io(&list, e))?;
        BufReader::new(f)
            .lines()
            .map(|l| l.map_err(|e| Error::io(&list, e)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter_map(|l| l.split_whitespace().next().map(str::to_string))
            .collect()
    } else {
        let mut names: Vec<String> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("labels.csv").exists())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        names
    };
    if names.is_empty() {
        return Err(Error::Dataset(format!("no sequences under {}", root.display())));
    }
    names.iter().map(|n| read_sequence(&root.join(n))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_stays_in_range() {
        for t in 0..200 {
            let x = reflect(5.0, 3.7, t, 2.0, 61.0);
            assert!((2.0..=61.0).contains(&x));
        }
    }

    #[test]
    fn tiling_covers_each_frame() {
        for n in 3..20 {
            let mut seen = vec![false; n];
            for s in tiling_windows(n) {
                for k in s..s + 3 {
                    seen[k] = true;
                }
            }
            assert!(seen.iter().all(|&b| b));
        }
        assert_eq!(windows(12).len(), 10);
    }

    #[test]
    fn oversized_ball_is_rejected() {
        let cfg = SceneConfig {
            ball_radius: 24.0,
            ..SceneConfig::default()
        };
        assert!(generate_sequence(&cfg).is_err());
    }

    #[test]
    fn coverage_is_full_inside_and_zero_far_away() {
        assert_eq!(coverage(10, 10, 10.0, 10.0, 3.0), 1.0);
        assert_eq!(coverage(20, 10, 10.0, 10.0, 3.0), 0.0);
        let edge = coverage(13, 10, 10.0, 10.0, 3.0);
        assert!(edge > 0.0 && edge < 1.0);
    }
}
