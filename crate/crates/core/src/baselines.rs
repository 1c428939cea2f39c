//! Grid-based angle spectra: matched-filter beamformer and single-snapshot
//! IAA, plus peak extraction that turns a spectrum into ranked detections.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::array::{uniform_grid, SteeringMatrix};
use crate::detection::{Detection, DetectionSet};
use crate::error::{AoaError, Result};
use crate::linalg::{CMatrix, Cholesky};

/// Linear power over a uniform angle grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularSpectrum {
    pub grid: Vec<f64>,
    pub power: Vec<f64>,
    pub complex_amplitude: Option<Vec<Complex64>>,
}

impl AngularSpectrum {
    pub fn new(grid: Vec<f64>, power: Vec<f64>) -> Result<Self> {
        let s = Self {
            grid,
            power,
            complex_amplitude: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.len() != self.power.len() {
            return Err(AoaError::Dimension {
                context: "spectrum power",
                expected: self.grid.len(),
                got: self.power.len(),
            });
        }
        if self.power.iter().any(|p| !(*p >= 0.0)) {
            return Err(AoaError::invalid("spectrum power must be nonnegative"));
        }
        check_uniform_grid(&self.grid)
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        if self.grid.len() < 2 {
            0.0
        } else {
            (self.grid[self.grid.len() - 1] - self.grid[0]) / (self.grid.len() - 1) as f64
        }
    }

    /// Power in dB, floored at `floor_db`.
    pub fn power_db(&self, floor_db: f64) -> Vec<f64> {
        self.power
            .iter()
            .map(|&p| power_to_db(p).max(floor_db))
            .collect()
    }

    /// CSV with header `angle_deg,power_db`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("angle_deg,power_db\n");
        for (a, p) in self.grid.iter().zip(&self.power) {
            out.push_str(&format!("{a:.6},{:.6}\n", power_to_db(*p).max(-400.0)));
        }
        out
    }

    pub fn argmax(&self) -> Option<usize> {
        self.power
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
    }
}

pub(crate) fn power_to_db(p: f64) -> f64 {
    if p > 0.0 {
        10.0 * p.log10()
    } else {
        f64::NEG_INFINITY
    }
}

/// Strictly increasing with uniform spacing (relative error ≤ 1e-9).
pub fn check_uniform_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(AoaError::invalid("angle grid is empty"));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(AoaError::invalid("angle grid must be strictly increasing"));
    }
    if grid.len() > 2 {
        let step = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
        if grid
            .windows(2)
            .any(|w| ((w[1] - w[0]) - step).abs() > 1e-9 * step.abs())
        {
            return Err(AoaError::invalid("angle grid must be uniform"));
        }
    }
    Ok(())
}

fn check_snapshot(snapshot: &[Complex64], steering: &SteeringMatrix) -> Result<()> {
    if snapshot.len() != steering.element_count() {
        return Err(AoaError::Dimension {
            context: "snapshot vs steering matrix",
            expected: steering.element_count(),
            got: snapshot.len(),
        });
    }
    Ok(())
}

/// Normalized beamformer: `s_g = a_g^H y / K`, `p_g = |s_g|²`.
pub fn matched_filter(snapshot: &[Complex64], steering: &SteeringMatrix) -> Result<AngularSpectrum> {
    check_snapshot(snapshot, steering)?;
    let k = steering.element_count() as f64;
    let amp: Vec<Complex64> = steering
        .columns()
        .map(|a| a.iter().zip(snapshot).map(|(a, y)| a.conj() * y).sum::<Complex64>() / k)
        .collect();
    Ok(AngularSpectrum {
        grid: steering.grid().to_vec(),
        power: amp.iter().map(|s| s.norm_sqr()).collect(),
        complex_amplitude: Some(amp),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IaaConfig {
    pub grid_size: usize,
    pub theta_min_deg: f64,
    pub theta_max_deg: f64,
    pub iterations: usize,
    /// Diagonal loading relative to `trace(R)/K`.
    pub diagonal_loading: f64,
    /// Peak extraction applied when the spectrum is used as a detector.
    pub peaks: PeakConfig,
}

impl Default for IaaConfig {
    fn default() -> Self {
        Self {
            grid_size: 512,
            theta_min_deg: -60.0,
            theta_max_deg: 60.0,
            iterations: 15,
            diagonal_loading: 1e-6,
            peaks: PeakConfig::default(),
        }
    }
}

impl IaaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 3 {
            return Err(AoaError::config("iaa.grid_size", "must be at least 3"));
        }
        if self.iterations == 0 {
            return Err(AoaError::config("iaa.iterations", "must be at least 1"));
        }
        if !(self.diagonal_loading >= 0.0 && self.diagonal_loading.is_finite()) {
            return Err(AoaError::config(
                "iaa.diagonal_loading",
                "must be finite and nonnegative",
            ));
        }
        if !(self.theta_max_deg > self.theta_min_deg) {
            return Err(AoaError::config(
                "iaa.theta_min_deg",
                "must be below theta_max_deg",
            ));
        }
        self.peaks.validate()
    }

    pub fn grid(&self) -> Result<Vec<f64>> {
        uniform_grid(self.theta_min_deg, self.theta_max_deg, self.grid_size)
    }
}

/// Model covariance `A·diag(p)·A^H + ε·(trace/K)·I`, Hermitian by
/// construction.
pub fn iaa_covariance(steering: &SteeringMatrix, power: &[f64], loading: f64) -> CMatrix {
    let k = steering.element_count();
    let mut r = CMatrix::zeros(k);
    for (a, &p) in steering.columns().zip(power) {
        if p == 0.0 {
            continue;
        }
        for i in 0..k {
            let ai = a[i] * p;
            for j in i..k {
                let v = r.get(i, j) + ai * a[j].conj();
                r.set(i, j, v);
            }
        }
    }
    let load = loading * r.trace().re / k as f64;
    for i in 0..k {
        let d = r.get(i, i).re + load;
        r.set(i, i, Complex64::new(d, 0.0));
        for j in i + 1..k {
            r.set(j, i, r.get(i, j).conj());
        }
    }
    r
}

/// Single-snapshot Iterative Adaptive Approach.
///
/// Starts from matched-filter power, then each iteration rebuilds the model
/// covariance and re-estimates every grid amplitude as
/// `s_g = a_g^H R⁻¹ y / (a_g^H R⁻¹ a_g)`. One Cholesky factorization per
/// iteration serves all grid points.
pub fn iaa_spectrum(
    snapshot: &[Complex64],
    steering: &SteeringMatrix,
    config: &IaaConfig,
) -> Result<AngularSpectrum> {
    if config.iterations == 0 {
        return Err(AoaError::invalid("IAA needs at least one iteration"));
    }
    let mut spectrum = matched_filter(snapshot, steering)?;
    if spectrum.power.iter().all(|&p| p == 0.0) {
        return Ok(spectrum);
    }
    let k = steering.element_count();
    let mut amp = vec![Complex64::new(0.0, 0.0); steering.len()];
    let mut col = vec![Complex64::new(0.0, 0.0); k];
    for _ in 0..config.iterations {
        let r = iaa_covariance(steering, &spectrum.power, config.diagonal_loading);
        let chol = Cholesky::factor(&r)?;
        let mut w = snapshot.to_vec();
        chol.forward_substitute(&mut w);
        for (g, a) in steering.columns().enumerate() {
            col.copy_from_slice(a);
            chol.forward_substitute(&mut col);
            let num: Complex64 = col.iter().zip(&w).map(|(b, w)| b.conj() * w).sum();
            let den: f64 = col.iter().map(|b| b.norm_sqr()).sum();
            amp[g] = num / den;
        }
        for (p, s) in spectrum.power.iter_mut().zip(&amp) {
            *p = s.norm_sqr();
        }
    }
    spectrum.complex_amplitude = Some(amp);
    Ok(spectrum)
}

/// Peak extraction settings.
///
/// Confidence is the logistic map `1 / (1 + exp(−(m − center)/scale))` of
/// the refined peak magnitude `m` in dB, so confidence thresholds translate
/// into magnitude thresholds the same way for every spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeakConfig {
    pub max_peaks: usize,
    pub confidence_center_db: f64,
    pub confidence_scale_db: f64,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self {
            max_peaks: 16,
            confidence_center_db: -20.0,
            confidence_scale_db: 4.0,
        }
    }
}

impl PeakConfig {
    pub fn confidence(&self, magnitude_db: f64) -> f64 {
        let c = 1.0 / (1.0 + (-(magnitude_db - self.confidence_center_db) / self.confidence_scale_db).exp());
        c.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_peaks == 0 {
            return Err(AoaError::config("iaa.peaks.max_peaks", "must be at least 1"));
        }
        if !(self.confidence_scale_db > 0.0) {
            return Err(AoaError::config(
                "iaa.peaks.confidence_scale_db",
                "must be positive",
            ));
        }
        Ok(())
    }
}

/// Interior local maxima, refined by a 3-point parabola in dB, sorted by
/// magnitude and truncated to `max_peaks`.
pub fn extract_peaks(spectrum: &AngularSpectrum, config: &PeakConfig) -> Result<DetectionSet> {
    if config.max_peaks == 0 {
        return Err(AoaError::invalid("max_peaks must be at least 1"));
    }
    let n = spectrum.len();
    if n < 3 {
        return Err(AoaError::invalid(format!(
            "peak extraction needs at least 3 spectrum cells, got {n}"
        )));
    }
    let p = &spectrum.power;
    let step = spectrum.spacing();
    let db = |v: f64| power_to_db(v.max(1e-300));
    let mut peaks = Vec::new();
    let mut g = 1;
    while g + 1 < n {
        if p[g] > p[g - 1] {
            // walk the plateau, keep its leftmost cell
            let mut end = g;
            while end + 1 < n && p[end + 1] == p[g] {
                end += 1;
            }
            if end + 1 < n && p[end + 1] < p[g] {
                let (l, c, r) = (db(p[g - 1]), db(p[g]), db(p[g + 1]));
                let curv = l - 2.0 * c + r;
                let delta = if curv < 0.0 {
                    (0.5 * (l - r) / curv).clamp(-0.5, 0.5)
                } else {
                    0.0
                };
                let mag = c - 0.25 * (l - r) * delta;
                peaks.push((g, spectrum.grid[g] + delta * step, mag));
            }
            g = end + 1;
        } else {
            g += 1;
        }
    }
    peaks.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    peaks.truncate(config.max_peaks);
    Ok(DetectionSet::new(
        peaks
            .into_iter()
            .map(|(_, angle, mag)| Detection {
                angle_deg: angle,
                magnitude_db: mag,
                confidence: config.confidence(mag),
            })
            .collect(),
    ))
}
