//! Bipartite matching between ground truth and query slots, and the set
//! prediction objective built on it.
//!
//! The assignment is solved as a rectangular N×M problem. Padding the
//! ground truth with M−N empty rows of zero cost (the square permutation
//! form) yields the same matched pairs, since those rows contribute nothing
//! whichever query they take.

use serde::{Deserialize, Serialize};

use crate::detection::{Detection, DetectionSet};
use crate::error::{AoaError, Result};
use crate::scene::Target;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight per normalized angle unit (error / field of view).
    pub w_theta: f64,
    /// Weight per normalized magnitude unit (error / magnitude span).
    pub w_alpha: f64,
    /// Weight of `−log(1 − p)` on unmatched queries. Zero reproduces the
    /// objective with matched terms only.
    pub w_noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_theta: 5.0,
            w_alpha: 2.0,
            w_noobj: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("loss.w_theta", self.w_theta),
            ("loss.w_alpha", self.w_alpha),
            ("loss.w_noobj", self.w_noobj),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AoaError::config(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss weights together with the spans used to normalize regression errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchCriterion {
    pub weights: LossWeights,
    pub angle_span_deg: f64,
    pub mag_span_db: f64,
}

impl MatchCriterion {
    pub fn new(weights: LossWeights, angle_span_deg: f64, mag_span_db: f64) -> Self {
        Self {
            weights,
            angle_span_deg,
            mag_span_db,
        }
    }
}

fn check_confidence(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(AoaError::invalid(format!("confidence must lie in (0, 1), got {p}")))
    }
}

/// `−log p̃ + w_θ·|θ − θ̃|/span_θ + w_α·|α − α̃|/span_α`.
pub fn match_cost(gt: &Target, pred: &Detection, criterion: &MatchCriterion) -> Result<f64> {
    check_confidence(pred.confidence)?;
    Ok(cost_unchecked(gt, pred, criterion))
}

fn cost_unchecked(gt: &Target, pred: &Detection, c: &MatchCriterion) -> f64 {
    -pred.confidence.ln()
        + c.weights.w_theta * (gt.angle_deg - pred.angle_deg).abs() / c.angle_span_deg
        + c.weights.w_alpha * (gt.magnitude_db - pred.magnitude_db).abs() / c.mag_span_db
}

/// Ground truth to query assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// `(gt_index, query_index)` ordered by gt index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl Assignment {
    /// Checks the one-to-one structure against `n` ground truths and `m` queries.
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        if self.pairs.len() != n {
            return Err(AoaError::invalid(format!(
                "assignment has {} pairs for {n} ground truths",
                self.pairs.len()
            )));
        }
        let mut seen = vec![false; m];
        for (i, &(g, q)) in self.pairs.iter().enumerate() {
            if g != i || q >= m || seen[q] {
                return Err(AoaError::invalid("assignment is not one-to-one"));
            }
            seen[q] = true;
        }
        let unmatched: Vec<usize> = (0..m).filter(|&q| !seen[q]).collect();
        if unmatched != self.unmatched_queries {
            return Err(AoaError::invalid("unmatched query list is inconsistent"));
        }
        Ok(())
    }

    fn from_columns(cols: Vec<usize>, m: usize) -> Self {
        let mut used = vec![false; m];
        for &c in &cols {
            used[c] = true;
        }
        Self {
            pairs: cols.into_iter().enumerate().collect(),
            unmatched_queries: (0..m).filter(|&q| !used[q]).collect(),
        }
    }
}

/// Minimum-cost assignment of each row to a distinct column for an
/// `rows × cols` matrix with `rows ≤ cols` (shortest augmenting path with
/// potentials). Returns the column of each row.
///
/// Ties are broken deterministically: the column scan is in ascending index
/// order with strict comparisons, so lower query indices win equal costs.
pub fn solve_rectangular(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<usize>> {
    if rows > cols {
        return Err(AoaError::invalid(format!(
            "cannot assign {rows} rows to {cols} columns"
        )));
    }
    if cost.len() != rows * cols {
        return Err(AoaError::Dimension {
            context: "assignment cost matrix",
            expected: rows * cols,
            got: cost.len(),
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(AoaError::invalid("assignment costs must be finite"));
    }
    if rows == 0 {
        return Ok(Vec::new());
    }
    // 1-based arrays; column 0 is the virtual start.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    Ok(assign)
}

/// Cost matrix `N × M` of [`match_cost`] between every ground truth and query.
pub fn cost_matrix(
    gt: &[Target],
    predictions: &DetectionSet,
    criterion: &MatchCriterion,
) -> Result<Vec<f64>> {
    for d in predictions {
        check_confidence(d.confidence)?;
    }
    let mut out = Vec::with_capacity(gt.len() * predictions.len());
    for t in gt {
        for d in predictions {
            out.push(cost_unchecked(t, d, criterion));
        }
    }
    Ok(out)
}

/// Exact optimal injective map from ground truths to query slots.
pub fn optimal_assignment(
    gt: &[Target],
    predictions: &DetectionSet,
    criterion: &MatchCriterion,
) -> Result<Assignment> {
    let (n, m) = (gt.len(), predictions.len());
    if n > m {
        return Err(AoaError::invalid(format!(
            "{n} ground-truth targets exceed {m} query slots"
        )));
    }
    let cost = cost_matrix(gt, predictions, criterion)?;
    let cols = solve_rectangular(&cost, n, m)?;
    Ok(Assignment::from_columns(cols, m))
}

/// Correctly rounded sum of `values`, independent of their order
/// (Shewchuk's exact partials with a final round-half-even fixup).
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// Sum of matched costs of an assignment, correctly rounded so that tied
/// assignments report identical totals.
pub fn assignment_cost(
    gt: &[Target],
    predictions: &DetectionSet,
    assignment: &Assignment,
    criterion: &MatchCriterion,
) -> f64 {
    exact_sum(
        assignment
            .pairs
            .iter()
            .map(|&(g, q)| cost_unchecked(&gt[g], &predictions.detections[q], criterion)),
    )
}

/// Per-term breakdown of the objective; the four parts sum to the total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls_pos: f64,
    pub cls_neg: f64,
    pub angle: f64,
    pub magnitude: f64,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        self.cls_pos + self.cls_neg + self.angle + self.magnitude
    }

    pub fn add(&mut self, other: &LossComponents) {
        self.cls_pos += other.cls_pos;
        self.cls_neg += other.cls_neg;
        self.angle += other.angle;
        self.magnitude += other.magnitude;
    }

    pub fn scale(&mut self, s: f64) {
        self.cls_pos *= s;
        self.cls_neg *= s;
        self.angle *= s;
        self.magnitude *= s;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DetectionGrad {
    pub angle_deg: f64,
    pub magnitude_db: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetLoss {
    pub total: f64,
    pub components: LossComponents,
    /// Gradient of `total` with respect to each query's outputs.
    pub grad: Vec<DetectionGrad>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Matched terms `−log p̃ + w_θ|Δθ| + w_α|Δα|` (normalized) plus
/// `w_noobj·(−log(1 − p̃))` over unmatched queries, averaged over the M
/// query slots. The assignment is treated as fixed.
pub fn training_loss(
    gt: &[Target],
    predictions: &DetectionSet,
    assignment: &Assignment,
    criterion: &MatchCriterion,
) -> Result<SetLoss> {
    let m = predictions.len();
    if m == 0 {
        return Err(AoaError::invalid("prediction set has no query slots"));
    }
    assignment.validate(gt.len(), m)?;
    for d in predictions {
        check_confidence(d.confidence)?;
    }
    let w = criterion.weights;
    let inv_m = 1.0 / m as f64;
    let mut comp = LossComponents::default();
    let mut grad = vec![DetectionGrad::default(); m];
    for &(g, q) in &assignment.pairs {
        let t = &gt[g];
        let d = &predictions.detections[q];
        let da = d.angle_deg - t.angle_deg;
        let dm = d.magnitude_db - t.magnitude_db;
        comp.cls_pos -= d.confidence.ln();
        comp.angle += w.w_theta * da.abs() / criterion.angle_span_deg;
        comp.magnitude += w.w_alpha * dm.abs() / criterion.mag_span_db;
        grad[q] = DetectionGrad {
            angle_deg: inv_m * w.w_theta * sign(da) / criterion.angle_span_deg,
            magnitude_db: inv_m * w.w_alpha * sign(dm) / criterion.mag_span_db,
            confidence: -inv_m / d.confidence,
        };
    }
    for &q in &assignment.unmatched_queries {
        let p = predictions.detections[q].confidence;
        comp.cls_neg -= w.w_noobj * (-p).ln_1p();
        grad[q].confidence = inv_m * w.w_noobj / (1.0 - p);
    }
    comp.scale(inv_m);
    Ok(SetLoss {
        total: comp.total(),
        components: comp,
        grad,
    })
}
