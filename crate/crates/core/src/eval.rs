//! Detection scoring: TP/FP/FN matching at an angle tolerance, PR curves
//! over confidence thresholds, max F1, L1 errors among true positives, and
//! sweeps over SNR and target count with shared scene sets.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{steering_matrix, ArrayGeometry};
use crate::baselines::{extract_peaks, iaa_spectrum, matched_filter, IaaConfig};
use crate::detection::{Detection, DetectionSet};
use crate::error::{AoaError, Result};
use crate::model::ModelWeights;
use crate::scene::{generate_scene, mix_seed, Scene, SceneConfig, SeedNamespace, Target};
use crate::svg::{Chart, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// A detection is a TP if any ground truth lies within tolerance.
    #[default]
    ManyToOne,
    /// Greedy one-to-one pairing by ascending angle error.
    OneToOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpPair {
    pub gt_index: usize,
    pub detection_index: usize,
    pub angle_error_deg: f64,
    pub mag_error_db: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp_pairs: Vec<TpPair>,
    pub fp_indices: Vec<usize>,
    pub fn_indices: Vec<usize>,
    /// Ground truths with some detection within tolerance.
    pub matched_gt_indices: Vec<usize>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.tp_pairs.len()
    }

    pub fn fp(&self) -> usize {
        self.fp_indices.len()
    }

    pub fn false_negatives(&self) -> usize {
        self.fn_indices.len()
    }

    pub fn matched_gt(&self) -> usize {
        self.matched_gt_indices.len()
    }
}

fn pair(det_index: usize, d: &Detection, gt_index: usize, g: &Target) -> TpPair {
    TpPair {
        gt_index,
        detection_index: det_index,
        angle_error_deg: (d.angle_deg - g.angle_deg).abs(),
        mag_error_db: (d.magnitude_db - g.magnitude_db).abs(),
    }
}

/// Scores already-thresholded detections against ground truth.
pub fn match_detections(
    detections: &[Detection],
    gt: &[Target],
    angle_tol_deg: f64,
    rule: MatchRule,
) -> Result<MatchResult> {
    if !(angle_tol_deg > 0.0) {
        return Err(AoaError::InvalidArgument(format!(
            "angle tolerance must be positive, got {angle_tol_deg}"
        )));
    }
    let mut out = MatchResult::default();
    match rule {
        MatchRule::ManyToOne => {
            let mut covered = vec![false; gt.len()];
            for (i, d) in detections.iter().enumerate() {
                let mut nearest: Option<(usize, f64)> = None;
                for (j, g) in gt.iter().enumerate() {
                    let e = (d.angle_deg - g.angle_deg).abs();
                    if e <= angle_tol_deg {
                        covered[j] = true;
                    }
                    if nearest.is_none_or(|(_, best)| e < best) {
                        nearest = Some((j, e));
                    }
                }
                match nearest {
                    Some((j, e)) if e <= angle_tol_deg => out.tp_pairs.push(pair(i, d, j, &gt[j])),
                    _ => out.fp_indices.push(i),
                }
            }
            out.fn_indices = (0..gt.len()).filter(|&j| !covered[j]).collect();
            out.matched_gt_indices = (0..gt.len()).filter(|&j| covered[j]).collect();
        }
        MatchRule::OneToOne => {
            let mut cand: Vec<(f64, usize, usize)> = Vec::new();
            for (i, d) in detections.iter().enumerate() {
                for (j, g) in gt.iter().enumerate() {
                    let e = (d.angle_deg - g.angle_deg).abs();
                    if e <= angle_tol_deg {
                        cand.push((e, i, j));
                    }
                }
            }
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut det_used = vec![false; detections.len()];
            let mut gt_used = vec![false; gt.len()];
            for (_, i, j) in cand {
                if !det_used[i] && !gt_used[j] {
                    det_used[i] = true;
                    gt_used[j] = true;
                    out.tp_pairs.push(pair(i, &detections[i], j, &gt[j]));
                }
            }
            out.tp_pairs.sort_by_key(|p| p.detection_index);
            out.fp_indices = (0..detections.len()).filter(|&i| !det_used[i]).collect();
            out.fn_indices = (0..gt.len()).filter(|&j| !gt_used[j]).collect();
            out.matched_gt_indices = (0..gt.len()).filter(|&j| gt_used[j]).collect();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub false_negatives: usize,
}

impl PrPoint {
    pub fn f1(&self) -> f64 {
        let s = self.precision + self.recall;
        if s > 0.0 {
            2.0 * self.precision * self.recall / s
        } else {
            0.0
        }
    }
}

/// `n` uniform thresholds covering `[0, 1]`.
pub fn uniform_thresholds(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

fn filtered(set: &DetectionSet, threshold: f64) -> Vec<Detection> {
    set.above(threshold).copied().collect()
}

/// Per-scene matches at one threshold, index-ordered.
pub fn match_at(
    outputs: &[DetectionSet],
    gts: &[&[Target]],
    threshold: f64,
    angle_tol_deg: f64,
    rule: MatchRule,
) -> Result<Vec<MatchResult>> {
    outputs
        .par_iter()
        .zip(gts.par_iter())
        .map(|(o, g)| match_detections(&filtered(o, threshold), g, angle_tol_deg, rule))
        .collect()
}

/// Precision and recall aggregated over scenes at each threshold.
/// Precision is 1 when nothing survives; recall is 1 when there is no
/// ground truth at all.
pub fn pr_curve(
    outputs: &[DetectionSet],
    gts: &[&[Target]],
    thresholds: &[f64],
    angle_tol_deg: f64,
    rule: MatchRule,
) -> Result<Vec<PrPoint>> {
    if outputs.len() != gts.len() {
        return Err(AoaError::Dimension {
            context: "detector outputs vs ground truth scenes",
            expected: gts.len(),
            got: outputs.len(),
        });
    }
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(AoaError::InvalidArgument("thresholds must be sorted ascending".into()));
    }
    thresholds
        .iter()
        .map(|&t| {
            let results = match_at(outputs, gts, t, angle_tol_deg, rule)?;
            let (tp, fp, fn_) = results
                .iter()
                .fold((0, 0, 0), |(a, b, c), r| (a + r.tp(), b + r.fp(), c + r.false_negatives()));
            // Under many-to-one matching several TPs can share one gt, so
            // recall counts matched gts rather than TP detections.
            let covered: usize = results.iter().map(|r| r.matched_gt()).sum();
            let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = if covered + fn_ == 0 {
                1.0
            } else {
                covered as f64 / (covered + fn_) as f64
            };
            Ok(PrPoint {
                threshold: t,
                precision,
                recall,
                tp,
                fp,
                false_negatives: fn_,
            })
        })
        .collect()
}

/// Best F1 over the curve and the index of the point attaining it (the
/// lowest threshold among ties).
pub fn max_f1_point(points: &[PrPoint]) -> Result<(f64, usize)> {
    if points.is_empty() {
        return Err(AoaError::InvalidArgument("max F1 of an empty PR curve".into()));
    }
    let mut best = (points[0].f1(), 0);
    for (i, p) in points.iter().enumerate().skip(1) {
        if p.f1() > best.0 {
            best = (p.f1(), i);
        }
    }
    Ok(best)
}

pub fn max_f1(points: &[PrPoint]) -> Result<f64> {
    max_f1_point(points).map(|(f, _)| f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mean_angle_l1_deg: Option<f64>,
    pub mean_mag_l1_db: Option<f64>,
    pub tp_count: usize,
}

pub fn error_metrics(results: &[MatchResult]) -> ErrorMetrics {
    let pairs: Vec<&TpPair> = results.iter().flat_map(|r| &r.tp_pairs).collect();
    let n = pairs.len();
    let mean = |f: fn(&TpPair) -> f64| {
        (n > 0).then(|| pairs.iter().map(|p| f(p)).sum::<f64>() / n as f64)
    };
    ErrorMetrics {
        mean_angle_l1_deg: mean(|p| p.angle_error_deg),
        mean_mag_l1_db: mean(|p| p.mag_error_db),
        tp_count: n,
    }
}

/// Anything that maps snapshots to detection sets.
pub trait Detector: Sync {
    fn name(&self) -> String;

    /// Configuration recorded alongside reports.
    fn describe(&self) -> serde_json::Value;

    fn detect_batch(&self, geometry: &ArrayGeometry, snapshots: &[&[Complex64]]) -> Result<Vec<DetectionSet>>;
}

pub struct AaetrDetector<'a> {
    pub weights: &'a ModelWeights,
}

impl Detector for AaetrDetector<'_> {
    fn name(&self) -> String {
        "aaetr".into()
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "method": "aaetr",
            "model": self.weights.config(),
            "parameter_count": self.weights.parameter_count(),
        })
    }

    fn detect_batch(&self, geometry: &ArrayGeometry, snapshots: &[&[Complex64]]) -> Result<Vec<DetectionSet>> {
        self.weights.forward_batch(geometry, snapshots)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralMethod {
    Iaa,
    MatchedFilter,
}

/// Grid spectrum followed by peak extraction. The matched filter uses
/// only the grid and peak settings of `config`.
#[derive(Debug, Clone)]
pub struct SpectralDetector {
    pub method: SpectralMethod,
    pub config: IaaConfig,
}

impl SpectralDetector {
    pub fn iaa(config: IaaConfig) -> Self {
        Self {
            method: SpectralMethod::Iaa,
            config,
        }
    }

    pub fn matched_filter(config: IaaConfig) -> Self {
        Self {
            method: SpectralMethod::MatchedFilter,
            config,
        }
    }
}

impl Detector for SpectralDetector {
    fn name(&self) -> String {
        match self.method {
            SpectralMethod::Iaa => "iaa".into(),
            SpectralMethod::MatchedFilter => "mf".into(),
        }
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "method": self.method,
            "config": self.config,
        })
    }

    fn detect_batch(&self, geometry: &ArrayGeometry, snapshots: &[&[Complex64]]) -> Result<Vec<DetectionSet>> {
        self.config.validate()?;
        let steering = steering_matrix(geometry, &self.config.grid()?)?;
        snapshots
            .par_iter()
            .map(|y| {
                let spectrum = match self.method {
                    SpectralMethod::Iaa => iaa_spectrum(y, &steering, &self.config)?,
                    SpectralMethod::MatchedFilter => matched_filter(y, &steering)?,
                };
                extract_peaks(&spectrum, &self.config.peaks)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub snr_db: f64,
    pub n_targets: usize,
    pub dynamic_range_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub snr_db: Vec<f64>,
    pub n_targets: Vec<usize>,
    pub dynamic_range_db: Option<f64>,
    pub scenes_per_condition: usize,
    pub angle_tol_deg: f64,
    pub thresholds: usize,
    pub match_rule: MatchRule,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EvalConfig {
    /// SNR {25, 35} × N {2, 4}, 500 scenes each.
    pub fn desk() -> Self {
        Self {
            snr_db: vec![25.0, 35.0],
            n_targets: vec![2, 4],
            dynamic_range_db: Some(13.0),
            scenes_per_condition: 500,
            angle_tol_deg: 0.5,
            thresholds: 101,
            match_rule: MatchRule::ManyToOne,
            seed: 0,
        }
    }

    /// SNR 15..35 step 5 × N 2..10, 4000 scenes each.
    pub fn published() -> Self {
        Self {
            snr_db: vec![15.0, 20.0, 25.0, 30.0, 35.0],
            n_targets: (2..=10).collect(),
            scenes_per_condition: 4000,
            ..Self::desk()
        }
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let mut out = Vec::new();
        for &snr_db in &self.snr_db {
            for &n_targets in &self.n_targets {
                out.push(Condition {
                    snr_db,
                    n_targets,
                    dynamic_range_db: self.dynamic_range_db,
                });
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_empty() || self.n_targets.is_empty() {
            return Err(AoaError::config("eval.snr_db", "sweep grid must be non-empty"));
        }
        if !(self.angle_tol_deg > 0.0) {
            return Err(AoaError::config("eval.angle_tol_deg", "must be positive"));
        }
        if self.thresholds < 2 {
            return Err(AoaError::config("eval.thresholds", "need at least 2 thresholds"));
        }
        Ok(())
    }
}

/// Seed of one sweep condition; depends only on the eval seed and the
/// condition, never on grid order or detector.
pub fn condition_seed(eval_seed: u64, c: &Condition) -> u64 {
    let base = SeedNamespace::Eval.seed(eval_seed);
    let dr = c.dynamic_range_db.map_or(u64::MAX, f64::to_bits);
    mix_seed(mix_seed(mix_seed(base, c.snr_db.to_bits()), c.n_targets as u64), dr)
}

/// The scene set evaluated for a condition.
pub fn condition_scenes(
    base: &SceneConfig,
    geometry: &ArrayGeometry,
    condition: &Condition,
    count: usize,
    eval_seed: u64,
) -> Result<Vec<Scene>> {
    let mut cfg = base.clone().with_snr(condition.snr_db).with_fixed_n(condition.n_targets);
    cfg.n_max = cfg.n_max.max(condition.n_targets);
    if let Some(dr) = condition.dynamic_range_db {
        cfg = cfg.with_dynamic_range(dr);
    }
    cfg.validate()?;
    let seed = condition_seed(eval_seed, condition);
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(&cfg, geometry, mix_seed(seed, i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detector: String,
    pub condition: Condition,
    pub pr_points: Vec<PrPoint>,
    pub max_f1: f64,
    pub best_threshold: f64,
    pub mean_angle_l1_deg: Option<f64>,
    pub mean_mag_l1_db: Option<f64>,
    pub sample_count: usize,
    pub angle_tol_deg: f64,
    pub match_rule: MatchRule,
}

/// Scores one detector on an explicit scene set.
pub fn evaluate_scenes(
    detector: &dyn Detector,
    geometry: &ArrayGeometry,
    scenes: &[Scene],
    condition: Condition,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let snaps: Vec<&[Complex64]> = scenes.iter().map(|s| s.snapshot.as_slice()).collect();
    let outputs = detector.detect_batch(geometry, &snaps)?;
    let gts: Vec<&[Target]> = scenes.iter().map(|s| s.targets.as_slice()).collect();
    let thresholds = uniform_thresholds(config.thresholds);
    let pr = pr_curve(&outputs, &gts, &thresholds, config.angle_tol_deg, config.match_rule)?;
    let (f1, best) = max_f1_point(&pr)?;
    let at_best = match_at(&outputs, &gts, pr[best].threshold, config.angle_tol_deg, config.match_rule)?;
    let errors = error_metrics(&at_best);
    Ok(EvalReport {
        detector: detector.name(),
        condition,
        best_threshold: pr[best].threshold,
        pr_points: pr,
        max_f1: f1,
        mean_angle_l1_deg: errors.mean_angle_l1_deg,
        mean_mag_l1_db: errors.mean_mag_l1_db,
        sample_count: scenes.len(),
        angle_tol_deg: config.angle_tol_deg,
        match_rule: config.match_rule,
    })
}

/// Evaluates every grid condition on its fixed scene set.
pub fn run_sweep(
    detector: &dyn Detector,
    geometry: &ArrayGeometry,
    base: &SceneConfig,
    config: &EvalConfig,
) -> Result<Vec<EvalReport>> {
    config.validate()?;
    config
        .conditions()
        .into_iter()
        .map(|c| {
            let scenes = condition_scenes(base, geometry, &c, config.scenes_per_condition, config.seed)?;
            evaluate_scenes(detector, geometry, &scenes, c, config)
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// One row per condition and threshold.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("detector,snr_db,n_targets,dynamic_range_db,threshold,precision,recall,f1,tp,fp,fn\n");
    for r in reports {
        for p in &r.pr_points {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.detector,
                r.condition.snr_db,
                r.condition.n_targets,
                opt(r.condition.dynamic_range_db),
                p.threshold,
                p.precision,
                p.recall,
                p.f1(),
                p.tp,
                p.fp,
                p.false_negatives
            ));
        }
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub detector: String,
    pub condition: Condition,
    pub max_f1: f64,
    pub best_threshold: f64,
    pub mean_angle_l1_deg: Option<f64>,
    pub mean_mag_l1_db: Option<f64>,
    pub sample_count: usize,
}

pub fn summarize(reports: &[EvalReport]) -> Vec<ConditionSummary> {
    reports
        .iter()
        .map(|r| ConditionSummary {
            detector: r.detector.clone(),
            condition: r.condition,
            max_f1: r.max_f1,
            best_threshold: r.best_threshold,
            mean_angle_l1_deg: r.mean_angle_l1_deg,
            mean_mag_l1_db: r.mean_mag_l1_db,
            sample_count: r.sample_count,
        })
        .collect()
}

/// PR curves of every report for one target count, all SNRs and detectors.
pub fn pr_curves_svg(reports: &[EvalReport], n_targets: usize) -> String {
    let series = reports
        .iter()
        .filter(|r| r.condition.n_targets == n_targets)
        .map(|r| Series {
            label: format!("{} {} dB", r.detector, r.condition.snr_db),
            points: r.pr_points.iter().map(|p| (p.recall, p.precision)).collect(),
            markers: false,
        })
        .collect();
    Chart {
        title: format!("Precision-recall, N = {n_targets}"),
        x_label: "recall".into(),
        y_label: "precision".into(),
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
        series,
        vlines: Vec::new(),
    }
    .render()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    MaxF1,
    AngleError,
    MagnitudeError,
}

/// A metric against target count, one line per detector and SNR.
pub fn metric_vs_n_svg(reports: &[EvalReport], metric: Metric) -> String {
    let mut keys: Vec<(String, u64)> = Vec::new();
    for r in reports {
        let k = (r.detector.clone(), r.condition.snr_db.to_bits());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let value = |r: &EvalReport| match metric {
        Metric::MaxF1 => Some(r.max_f1),
        Metric::AngleError => r.mean_angle_l1_deg,
        Metric::MagnitudeError => r.mean_mag_l1_db,
    };
    let series: Vec<Series> = keys
        .iter()
        .map(|(det, snr)| Series {
            label: format!("{det} {} dB", f64::from_bits(*snr)),
            points: reports
                .iter()
                .filter(|r| &r.detector == det && r.condition.snr_db.to_bits() == *snr)
                .filter_map(|r| value(r).map(|v| (r.condition.n_targets as f64, v)))
                .collect(),
            markers: true,
        })
        .collect();
    let ns = reports.iter().map(|r| r.condition.n_targets as f64);
    let x_lo = ns.clone().fold(f64::INFINITY, f64::min);
    let x_hi = ns.fold(f64::NEG_INFINITY, f64::max);
    let x_range = if x_hi > x_lo { (x_lo, x_hi) } else { (x_lo - 1.0, x_lo + 1.0) };
    let (title, y_label, y_range) = match metric {
        Metric::MaxF1 => ("Max F1 vs target count", "max F1", (0.0, 1.0)),
        Metric::AngleError => {
            let hi = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).fold(0.0, f64::max);
            ("Angle L1 error vs target count", "mean |angle error| (deg)", (0.0, (hi * 1.1).max(1e-3)))
        }
        Metric::MagnitudeError => {
            let hi = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).fold(0.0, f64::max);
            ("Magnitude L1 error vs target count", "mean |magnitude error| (dB)", (0.0, (hi * 1.1).max(1e-3)))
        }
    };
    Chart {
        title: title.into(),
        x_label: "targets per scene".into(),
        y_label: y_label.into(),
        x_range,
        y_range,
        series,
        vlines: Vec::new(),
    }
    .render()
}
