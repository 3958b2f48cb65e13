//! Peak extraction, five-way frame classification and tracking metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mdd::FrameTriplet;
use crate::model::Model;
use crate::supervision::GroundTruthSpec;
use crate::synth::{tiling_windows, Sequence};
use crate::tensor::Tensor4;
use crate::train::window_triplet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    /// Euclidean hit radius in original-resolution pixels.
    pub tolerance: f64,
    pub threshold: f64,
    /// Model-to-original scale factors `(sx, sy)`.
    pub scale: (f64, f64),
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tolerance: 4.0,
            threshold: 0.5,
            scale: (1.0, 1.0),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(self.scale.0 > 0.0 && self.scale.1 > 0.0) {
            return Err(Error::Config(format!("scale factors must be positive, got {:?}", self.scale)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub frame: usize,
    /// Centre in original-resolution pixels.
    pub center: Option<(f64, f64)>,
    /// Highest heatmap value in the chosen component, or the global maximum when nothing fires.
    pub confidence: f64,
}

/// Peak of a single `height × width` heatmap (row-major).
///
/// Pixels strictly above the threshold form 8-connected components. The
/// largest wins; equal areas go to the higher peak, then to the component
/// found first in scan order.
pub fn extract_coordinate(frame: usize, heatmap: &[f64], width: usize, cfg: &EvalConfig) -> Detection {
    let height = if width == 0 { 0 } else { heatmap.len() / width };
    let global_max = heatmap.iter().copied().fold(0.0, f64::max);
    let mut label = vec![usize::MAX; heatmap.len()];
    let mut best: Option<(usize, f64, f64, f64)> = None; // (area, peak, cx, cy)
    let mut stack = Vec::new();
    let mut members = Vec::new();
    for start in 0..heatmap.len() {
        if heatmap[start] <= cfg.threshold || label[start] != usize::MAX {
            continue;
        }
        label[start] = start;
        stack.push(start);
        members.clear();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (y, x) = (i / width, i % width);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= height as i64 || nx >= width as i64 {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if label[j] == usize::MAX && heatmap[j] > cfg.threshold {
                        label[j] = start;
                        stack.push(j);
                    }
                }
            }
        }
        let area = members.len();
        let peak = members.iter().map(|&i| heatmap[i]).fold(f64::MIN, f64::max);
        let better = match best {
            None => true,
            Some((a, p, ..)) => area > a || (area == a && peak > p),
        };
        if better {
            // weights relative to the peak keep flat blobs exact
            let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
            members.sort_unstable();
            for &i in &members {
                let v = heatmap[i] / peak;
                sw += v;
                sx += v * (i % width) as f64;
                sy += v * (i / width) as f64;
            }
            best = Some((area, peak, sx / sw, sy / sw));
        }
    }
    match best {
        Some((_, peak, cx, cy)) => Detection {
            frame,
            center: Some((cx * cfg.scale.0, cy * cfg.scale.1)),
            confidence: peak,
        },
        None => Detection {
            frame,
            center: None,
            confidence: global_max,
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Outcome {
    Tp,
    Fp1,
    Fp2,
    Tn,
    Fn,
}

/// Five-way outcome for one frame. Distance exactly at the tolerance counts as a hit.
pub fn classify_frame(pred: &Detection, gt: &GroundTruthSpec, cfg: &EvalConfig) -> Outcome {
    match (gt.visible, pred.center) {
        (true, Some((x, y))) => {
            let d = ((x - gt.center.0).powi(2) + (y - gt.center.1).powi(2)).sqrt();
            if d <= cfg.tolerance {
                Outcome::Tp
            } else {
                Outcome::Fp1
            }
        }
        (true, None) => Outcome::Fn,
        (false, Some(_)) => Outcome::Fp2,
        (false, None) => Outcome::Tn,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp1: u64,
    pub fp2: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp1: u64, fp2: u64, tn: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, fp1, fp2, tn, fn_ }
    }

    pub fn fp(&self) -> u64 {
        self.fp1 + self.fp2
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp1 + self.fp2 + self.tn + self.fn_
    }

    pub fn record(&mut self, o: Outcome) {
        match o {
            Outcome::Tp => self.tp += 1,
            Outcome::Fp1 => self.fp1 += 1,
            Outcome::Fp2 => self.fp2 += 1,
            Outcome::Tn => self.tn += 1,
            Outcome::Fn => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp1 += other.fp1;
        self.fp2 += other.fp2;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

/// A ratio with a flag for a zero denominator (value reported as 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metric {
    pub value: f64,
    pub defined: bool,
}

impl Metric {
    fn ratio(num: f64, den: f64) -> Self {
        if den > 0.0 {
            Metric {
                value: num / den,
                defined: true,
            }
        } else {
            Metric {
                value: 0.0,
                defined: false,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: Metric,
    pub precision: Metric,
    pub recall: Metric,
    pub f1: Metric,
}

pub fn compute_metrics(c: &ConfusionCounts) -> Metrics {
    let tp = c.tp as f64;
    let precision = Metric::ratio(tp, (c.tp + c.fp()) as f64);
    let recall = Metric::ratio(tp, (c.tp + c.fn_) as f64);
    let f1 = if precision.defined && recall.defined {
        Metric::ratio(2.0 * precision.value * recall.value, precision.value + recall.value)
    } else {
        Metric::ratio(0.0, 0.0)
    };
    Metrics {
        accuracy: Metric::ratio((c.tp + c.tn) as f64, c.total() as f64),
        precision,
        recall,
        f1,
    }
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub counts: ConfusionCounts,
}

fn fmt_metric(m: Metric) -> String {
    if m.defined {
        format!("{:.4}", m.value)
    } else {
        "undef".to_string()
    }
}

/// Fixed-width table: Model, Acc, Precision, Recall, F1, Total, TP, FP1, FP2, FP, TN, FN.
pub fn text_report(rows: &[ReportRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>7} {:>9} {:>7} {:>7} {:>7} {:>7} {:>5} {:>5} {:>5} {:>6} {:>6}",
        "Model", "Acc", "Precision", "Recall", "F1", "Total", "TP", "FP1", "FP2", "FP", "TN", "FN"
    );
    for r in rows {
        let m = compute_metrics(&r.counts);
        let c = &r.counts;
        let _ = writeln!(
            s,
            "{:<12} {:>7} {:>9} {:>7} {:>7} {:>7} {:>7} {:>5} {:>5} {:>5} {:>6} {:>6}",
            r.model,
            fmt_metric(m.accuracy),
            fmt_metric(m.precision),
            fmt_metric(m.recall),
            fmt_metric(m.f1),
            c.total(),
            c.tp,
            c.fp1,
            c.fp2,
            c.fp(),
            c.tn,
            c.fn_
        );
    }
    s
}

pub fn csv_report(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Invalid(format!("report: {e}"));
    w.write_record(["model", "acc", "precision", "recall", "f1", "total", "tp", "fp1", "fp2", "fp", "tn", "fn"])
        .map_err(err)?;
    for r in rows {
        let m = compute_metrics(&r.counts);
        let c = &r.counts;
        w.write_record([
            r.model.clone(),
            format!("{:.6}", m.accuracy.value),
            format!("{:.6}", m.precision.value),
            format!("{:.6}", m.recall.value),
            format!("{:.6}", m.f1.value),
            c.total().to_string(),
            c.tp.to_string(),
            c.fp1.to_string(),
            c.fp2.to_string(),
            c.fp().to_string(),
            c.tn.to_string(),
            c.fn_.to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("report: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(format!("report: {e}")))
}

/// Inference heatmaps for every frame of `seq`, each `(1, 1, H, W)`.
///
/// Windows tile the sequence; a frame covered twice keeps its first prediction.
pub fn predict_sequence(model: &Model, seq: &Sequence, batch: usize) -> Result<Vec<Tensor4>> {
    let starts = tiling_windows(seq.len());
    let mut out: Vec<Option<Tensor4>> = vec![None; seq.len()];
    for chunk in starts.chunks(batch.max(1)) {
        let triplets = chunk.iter().map(|&k| window_triplet(seq, k)).collect::<Result<Vec<_>>>()?;
        let heat = model.predict(&FrameTriplet::batch(&triplets.iter().collect::<Vec<_>>())?)?;
        for (b, &k) in chunk.iter().enumerate() {
            let sample = heat.slice_batch(b, 1)?;
            for j in 0..3 {
                if out[k + j].is_none() {
                    out[k + j] = Some(sample.slice_channels(j, 1)?);
                }
            }
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(i, h)| h.ok_or_else(|| Error::Dataset(format!("{}: frame {i} not covered", seq.name))))
        .collect()
}

/// Detections and outcomes for every frame of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEval {
    pub name: String,
    pub detections: Vec<Detection>,
    pub outcomes: Vec<Outcome>,
    pub counts: ConfusionCounts,
}

/// Run the full protocol over `seqs`. Labels are scaled by `cfg.scale` like the predictions.
pub fn evaluate_model(model: &Model, seqs: &[Sequence], cfg: &EvalConfig) -> Result<(ConfusionCounts, Vec<SequenceEval>)> {
    cfg.validate()?;
    let mut total = ConfusionCounts::default();
    let mut per_seq = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let maps = predict_sequence(model, seq, 4)?;
        let mut ev = SequenceEval {
            name: seq.name.clone(),
            detections: Vec::with_capacity(seq.len()),
            outcomes: Vec::with_capacity(seq.len()),
            counts: ConfusionCounts::default(),
        };
        for (k, (map, frame)) in maps.iter().zip(&seq.frames).enumerate() {
            let det = extract_coordinate(k, map.data(), map.width(), cfg);
            let gt = if frame.visible {
                GroundTruthSpec::visible(frame.center.0 * cfg.scale.0, frame.center.1 * cfg.scale.1, cfg.tolerance)
            } else {
                GroundTruthSpec::hidden(cfg.tolerance)
            };
            let o = classify_frame(&det, &gt, cfg);
            ev.counts.record(o);
            ev.detections.push(det);
            ev.outcomes.push(o);
        }
        total.merge(&ev.counts);
        per_seq.push(ev);
    }
    Ok((total, per_seq))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_with(width: usize, height: usize, blobs: &[(usize, usize, usize, f64)]) -> Vec<f64> {
        // (x0, y0, side, value) squares
        let mut m = vec![0.1; width * height];
        for &(x0, y0, side, v) in blobs {
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    m[y * width + x] = v;
                }
            }
        }
        m
    }

    #[test]
    fn single_blob_centroid() {
        let m = map_with(32, 32, &[(9, 19, 3, 0.9)]);
        let d = extract_coordinate(0, &m, 32, &EvalConfig::default());
        assert_eq!(d.center, Some((10.0, 20.0)));
    }

    #[test]
    fn nothing_above_threshold() {
        let m = vec![0.49; 64];
        assert_eq!(extract_coordinate(3, &m, 8, &EvalConfig::default()).center, None);
    }

    #[test]
    fn largest_component_wins() {
        let m = map_with(32, 32, &[(2, 2, 2, 0.99), (20, 20, 3, 0.6)]);
        let d = extract_coordinate(0, &m, 32, &EvalConfig::default());
        assert_eq!(d.center, Some((21.0, 21.0)));
        assert_eq!(d.confidence, 0.6);
    }

    #[test]
    fn equal_area_tie_goes_to_higher_peak_then_scan_order() {
        let m = map_with(32, 32, &[(2, 2, 2, 0.7), (20, 20, 2, 0.8)]);
        assert_eq!(extract_coordinate(0, &m, 32, &EvalConfig::default()).center, Some((20.5, 20.5)));
        let m = map_with(32, 32, &[(2, 2, 2, 0.8), (20, 20, 2, 0.8)]);
        assert_eq!(extract_coordinate(0, &m, 32, &EvalConfig::default()).center, Some((2.5, 2.5)));
    }

    #[test]
    fn classification_partition() {
        let cfg = EvalConfig::default();
        let gt = GroundTruthSpec::visible(10.0, 10.0, 3.0);
        let at = |x: f64, y: f64| Detection {
            frame: 0,
            center: Some((x, y)),
            confidence: 0.9,
        };
        let none = Detection {
            frame: 0,
            center: None,
            confidence: 0.1,
        };
        assert_eq!(classify_frame(&at(13.0, 10.0), &gt, &cfg), Outcome::Tp);
        assert_eq!(classify_frame(&at(14.0, 10.0), &gt, &cfg), Outcome::Tp);
        assert_eq!(classify_frame(&at(15.0, 10.0), &gt, &cfg), Outcome::Fp1);
        assert_eq!(classify_frame(&none, &gt, &cfg), Outcome::Fn);
        let hidden = GroundTruthSpec::hidden(3.0);
        assert_eq!(classify_frame(&at(1.0, 1.0), &hidden, &cfg), Outcome::Fp2);
        assert_eq!(classify_frame(&none, &hidden, &cfg), Outcome::Tn);
    }

    #[test]
    fn all_negative_counts() {
        let m = compute_metrics(&ConfusionCounts::new(0, 0, 0, 50, 0));
        assert_eq!(m.accuracy.value, 1.0);
        assert!(!m.precision.defined && !m.recall.defined && !m.f1.defined);
    }

    #[test]
    fn report_has_columns() {
        let rows = [ReportRow {
            model: "v5".into(),
            counts: ConfusionCounts::new(16573, 116, 13, 636, 344),
        }];
        let text = text_report(&rows);
        assert!(text.contains("0.9859"));
        let csv = csv_report(&rows).unwrap();
        assert!(csv.starts_with("model,acc,precision,recall,f1,total,tp,fp1,fp2,fp,tn,fn\n"));
        assert!(csv.contains(",17682,16573,116,13,129,636,344"));
    }
}
