//! Labeled scene sampling and single-snapshot array synthesis.
//!
//! A snapshot is `y = Σ_m lin(α_m)·e^{jφ_m}·a(θ_m) + n` with circular
//! complex Gaussian noise. The noise level is set from the per-element SNR
//! of the strongest target in the scene.

use std::ops::Range;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{steering_vector, ArrayGeometry};
use crate::error::{AoaError, Result};

/// Linear amplitude of a dB magnitude (20·log10 convention).
pub fn db_to_amplitude(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

pub fn amplitude_to_db(amplitude: f64) -> f64 {
    20.0 * amplitude.log10()
}

/// SplitMix64 finalizer; used to derive independent seeds from
/// `(base, index)` pairs.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Disjoint seed spaces so training scenes never coincide with evaluation
/// scenes drawn from the same user seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedNamespace {
    Train,
    Eval,
    Validation,
}

impl SeedNamespace {
    pub fn seed(self, user_seed: u64) -> u64 {
        let tag = match self {
            SeedNamespace::Train => 0x7261_696E_0000_0001,
            SeedNamespace::Eval => 0x6576_616C_0000_0002,
            SeedNamespace::Validation => 0x7661_6C69_0000_0003,
        };
        mix_seed(user_seed ^ tag, 0)
    }
}

const TARGET_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub angle_deg: f64,
    pub magnitude_db: f64,
    pub phase_rad: f64,
}

impl Target {
    pub fn new(angle_deg: f64, magnitude_db: f64, phase_rad: f64) -> Self {
        Self {
            angle_deg,
            magnitude_db,
            phase_rad,
        }
    }

    pub fn amplitude(&self) -> f64 {
        db_to_amplitude(self.magnitude_db)
    }

    /// Complex reflection coefficient `lin(α)·e^{jφ}`.
    pub fn reflection(&self) -> Complex64 {
        Complex64::from_polar(self.amplitude(), self.phase_rad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_max: usize,
    pub theta_min_deg: f64,
    pub theta_max_deg: f64,
    pub alpha_min_db: f64,
    pub alpha_max_db: f64,
    /// When set, `alpha_max_db − alpha_min_db` must equal this spread.
    pub dynamic_range_db: Option<f64>,
    pub snr_db: f64,
    /// Exact target count for evaluation sweeps; `None` samples `U{0, n_max}`.
    pub fixed_n: Option<usize>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SceneConfig {
    /// Small-array training configuration: up to 4 targets, 13 dB window.
    pub fn desk() -> Self {
        Self {
            n_max: 4,
            theta_min_deg: -60.0,
            theta_max_deg: 60.0,
            alpha_min_db: -13.0,
            alpha_max_db: 0.0,
            dynamic_range_db: Some(13.0),
            snr_db: 35.0,
            fixed_n: None,
        }
    }

    /// Up to 10 targets, the upper end of the evaluation target counts.
    pub fn full() -> Self {
        Self {
            n_max: 10,
            ..Self::desk()
        }
    }

    /// Places the magnitude window `[top − spread, top]`.
    pub fn with_dynamic_range(mut self, spread_db: f64) -> Self {
        self.alpha_min_db = self.alpha_max_db - spread_db;
        self.dynamic_range_db = Some(spread_db);
        self
    }

    pub fn with_fixed_n(mut self, n: usize) -> Self {
        self.fixed_n = Some(n);
        self
    }

    pub fn with_snr(mut self, snr_db: f64) -> Self {
        self.snr_db = snr_db;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |key: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(AoaError::config(key, format!("must be finite, got {v}")))
            }
        };
        finite("scene.theta_min_deg", self.theta_min_deg)?;
        finite("scene.theta_max_deg", self.theta_max_deg)?;
        finite("scene.alpha_min_db", self.alpha_min_db)?;
        finite("scene.alpha_max_db", self.alpha_max_db)?;
        if self.snr_db.is_nan() {
            return Err(AoaError::config("scene.snr_db", "must not be NaN"));
        }
        if self.theta_min_deg >= self.theta_max_deg {
            return Err(AoaError::config(
                "scene.theta_min_deg",
                "must be strictly below theta_max_deg",
            ));
        }
        if self.theta_min_deg < -90.0 || self.theta_max_deg > 90.0 {
            return Err(AoaError::config(
                "scene.theta_min_deg",
                "field of view must lie within [-90, 90] degrees",
            ));
        }
        if self.alpha_min_db > self.alpha_max_db {
            return Err(AoaError::config(
                "scene.alpha_min_db",
                "must not exceed alpha_max_db",
            ));
        }
        if let Some(dr) = self.dynamic_range_db {
            let spread = self.alpha_max_db - self.alpha_min_db;
            if (spread - dr).abs() > 1e-9 {
                return Err(AoaError::config(
                    "scene.dynamic_range_db",
                    format!("is {dr} but alpha window spans {spread} dB"),
                ));
            }
        }
        if let Some(n) = self.fixed_n {
            if n > self.n_max {
                return Err(AoaError::config(
                    "scene.fixed_n",
                    format!("{n} exceeds n_max {}", self.n_max),
                ));
            }
        }
        Ok(())
    }
}

/// Ground truth plus the synthesized measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub targets: Vec<Target>,
    pub snapshot: Vec<Complex64>,
    pub noise_sigma: f64,
    pub snr_db: f64,
    pub seed: u64,
}

impl Scene {
    pub fn target_count(&self) -> usize {
        self.targets.len()
    }
}

/// Draws the target list for one scene; deterministic in `seed`.
pub fn sample_scene(config: &SceneConfig, seed: u64) -> Vec<Target> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, TARGET_STREAM));
    let n = match config.fixed_n {
        Some(n) => n,
        None => rng.random_range(0..=config.n_max),
    };
    let tau = std::f64::consts::TAU;
    (0..n)
        .map(|_| {
            let angle = uniform(&mut rng, config.theta_min_deg, config.theta_max_deg);
            let mag = uniform(&mut rng, config.alpha_min_db, config.alpha_max_db);
            let phase = uniform(&mut rng, 0.0, tau);
            Target::new(angle, mag, phase)
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        lo + (hi - lo) * rng.random::<f64>()
    } else {
        lo
    }
}

/// Noise-free array response `Σ lin(α)·e^{jφ}·a(θ)`.
pub fn noiseless_snapshot(geometry: &ArrayGeometry, targets: &[Target]) -> Result<Vec<Complex64>> {
    let mut y = vec![Complex64::new(0.0, 0.0); geometry.element_count()];
    for t in targets {
        let a = steering_vector(geometry, t.angle_deg)?;
        let c = t.reflection();
        for (yk, ak) in y.iter_mut().zip(&a.entries) {
            *yk += c * ak;
        }
    }
    Ok(y)
}

/// Adds i.i.d. circular complex Gaussian noise with `E|n_k|² = sigma²`.
pub fn add_noise(snapshot: &mut [Complex64], sigma: f64, seed: u64) {
    if sigma == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, NOISE_STREAM));
    let s = sigma / std::f64::consts::SQRT_2;
    for y in snapshot.iter_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *y += Complex64::new(s * re, s * im);
    }
}

/// Per-element noise standard deviation for a given SNR relative to the
/// strongest target. `reference_db` is used when `targets` is empty.
pub fn noise_sigma(targets: &[Target], snr_db: f64, reference_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        return 0.0;
    }
    let strongest = targets
        .iter()
        .map(|t| t.magnitude_db)
        .fold(f64::NEG_INFINITY, f64::max);
    let ref_db = if strongest.is_finite() {
        strongest
    } else {
        reference_db
    };
    db_to_amplitude(ref_db - snr_db)
}

/// Synthesizes one snapshot and returns it with the noise sigma used.
///
/// `empty_reference_db` sets the noise level of target-free scenes; the
/// stream passes the config's `alpha_max_db`.
pub fn synthesize_snapshot(
    geometry: &ArrayGeometry,
    targets: &[Target],
    snr_db: f64,
    empty_reference_db: f64,
    seed: u64,
) -> Result<(Vec<Complex64>, f64)> {
    let mut y = noiseless_snapshot(geometry, targets)?;
    let sigma = noise_sigma(targets, snr_db, empty_reference_db);
    add_noise(&mut y, sigma, seed);
    Ok((y, sigma))
}

/// Builds a complete scene from a seed.
pub fn generate_scene(config: &SceneConfig, geometry: &ArrayGeometry, seed: u64) -> Result<Scene> {
    let targets = sample_scene(config, seed);
    let (snapshot, noise_sigma) =
        synthesize_snapshot(geometry, &targets, config.snr_db, config.alpha_max_db, seed)?;
    Ok(Scene {
        targets,
        snapshot,
        noise_sigma,
        snr_db: config.snr_db,
        seed,
    })
}

/// Indexable, unbounded scene sequence. Scene `i` depends only on
/// `(config, geometry, start_seed, i)`.
#[derive(Debug, Clone)]
pub struct SceneStream {
    config: SceneConfig,
    geometry: ArrayGeometry,
    start_seed: u64,
}

impl SceneStream {
    pub fn new(config: SceneConfig, geometry: ArrayGeometry, start_seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            geometry,
            start_seed,
        })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geometry
    }

    pub fn scene_seed(&self, index: u64) -> u64 {
        mix_seed(self.start_seed, index)
    }

    pub fn scene(&self, index: u64) -> Scene {
        generate_scene(&self.config, &self.geometry, self.scene_seed(index))
            .expect("validated config and finite sampled angles")
    }

    /// Scenes for an index range, generated in parallel and returned in
    /// index order.
    pub fn range(&self, indices: Range<u64>) -> Vec<Scene> {
        let idx: Vec<u64> = indices.collect();
        idx.par_iter().map(|&i| self.scene(i)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = Scene> + '_ {
        (0u64..).map(move |i| self.scene(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::uniform_linear_array;

    fn ula16() -> ArrayGeometry {
        uniform_linear_array(16, 0.002, 0.004).unwrap()
    }

    #[test]
    fn fixed_count_respects_dynamic_range() {
        let cfg = SceneConfig::full().with_dynamic_range(13.0).with_fixed_n(10);
        for seed in 0..50 {
            let t = sample_scene(&cfg, seed);
            assert_eq!(t.len(), 10);
            let hi = t.iter().map(|t| t.magnitude_db).fold(f64::MIN, f64::max);
            let lo = t.iter().map(|t| t.magnitude_db).fold(f64::MAX, f64::min);
            assert!(hi - lo <= 13.0);
            for x in &t {
                assert!((-60.0..=60.0).contains(&x.angle_deg));
                assert!((0.0..std::f64::consts::TAU).contains(&x.phase_rad));
            }
        }
    }

    #[test]
    fn zero_targets_gives_pure_noise() {
        let cfg = SceneConfig::desk().with_fixed_n(0);
        let scene = generate_scene(&cfg, &ula16(), 3).unwrap();
        assert!(scene.targets.is_empty());
        // noise referenced to the top of the magnitude window
        assert!((scene.noise_sigma - db_to_amplitude(0.0 - 35.0)).abs() < 1e-15);
        assert!(scene.snapshot.iter().any(|y| y.norm() > 0.0));
    }

    #[test]
    fn same_seed_same_targets() {
        let cfg = SceneConfig::desk();
        assert_eq!(sample_scene(&cfg, 77), sample_scene(&cfg, 77));
        assert_ne!(sample_scene(&cfg, 77), sample_scene(&cfg, 78));
    }

    #[test]
    fn target_count_is_uniform_over_zero_to_nmax() {
        let cfg = SceneConfig::desk();
        let mut hist = [0usize; 5];
        for seed in 0..5000 {
            hist[sample_scene(&cfg, seed).len()] += 1;
        }
        for h in hist {
            assert!((800..1200).contains(&h), "{hist:?}");
        }
    }

    #[test]
    fn noiseless_single_target_exact() {
        let g = ula16();
        let t = Target::new(17.0, -3.0, 1.2);
        let (y, sigma) = synthesize_snapshot(&g, &[t], f64::INFINITY, 0.0, 9).unwrap();
        assert_eq!(sigma, 0.0);
        let a = steering_vector(&g, 17.0).unwrap();
        for (yk, ak) in y.iter().zip(&a.entries) {
            assert!((yk - t.reflection() * ak).norm() < 1e-15);
        }
    }

    #[test]
    fn noise_power_matches_sigma() {
        // Monte Carlo over 1000 snapshots of 16 elements.
        let sigma = 0.3;
        let mut acc = 0.0;
        let mut n = 0usize;
        for seed in 0..1000u64 {
            let mut y = vec![Complex64::new(0.0, 0.0); 16];
            add_noise(&mut y, sigma, seed);
            acc += y.iter().map(|v| v.norm_sqr()).sum::<f64>();
            n += y.len();
        }
        let mean = acc / n as f64;
        assert!((mean / (sigma * sigma) - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn snapshot_is_linear_in_targets() {
        let g = ula16();
        let a = [Target::new(-20.0, -2.0, 0.3), Target::new(5.0, -9.0, 2.0)];
        let b = [Target::new(33.0, -5.0, 4.0)];
        let union: Vec<Target> = a.iter().chain(&b).copied().collect();
        let sigma = 0.01;
        let mut y_union = noiseless_snapshot(&g, &union).unwrap();
        add_noise(&mut y_union, sigma, 5);
        let ya = noiseless_snapshot(&g, &a).unwrap();
        let yb = noiseless_snapshot(&g, &b).unwrap();
        let mut noise = vec![Complex64::new(0.0, 0.0); 16];
        add_noise(&mut noise, sigma, 5);
        for k in 0..16 {
            let sum = ya[k] + yb[k] + noise[k];
            assert!((y_union[k] - sum).norm() <= 1e-12 * y_union[k].norm().max(1.0));
        }
    }

    #[test]
    fn scene_regenerates_bit_exactly() {
        let cfg = SceneConfig::desk();
        let g = ula16();
        let s = generate_scene(&cfg, &g, 4242).unwrap();
        let (y, sigma) =
            synthesize_snapshot(&g, &s.targets, cfg.snr_db, cfg.alpha_max_db, s.seed).unwrap();
        assert_eq!(y, s.snapshot);
        assert_eq!(sigma, s.noise_sigma);
    }

    #[test]
    fn stream_is_indexable_and_split_invariant() {
        let stream = SceneStream::new(SceneConfig::desk(), ula16(), 11).unwrap();
        let all = stream.range(0..100);
        assert_eq!(all, stream.range(0..100));
        let mut split = stream.range(0..50);
        split.extend(stream.range(50..100));
        assert_eq!(all, split);
        assert_eq!(stream.iter().nth(37).unwrap(), all[37]);
    }

    #[test]
    fn namespaces_are_disjoint() {
        let s = 5;
        assert_ne!(SeedNamespace::Train.seed(s), SeedNamespace::Eval.seed(s));
        assert_ne!(SeedNamespace::Eval.seed(s), SeedNamespace::Validation.seed(s));
    }

    #[test]
    fn config_validation() {
        assert!(SceneConfig::desk().validate().is_ok());
        let mut c = SceneConfig::desk();
        c.theta_min_deg = 70.0;
        assert!(matches!(c.validate(), Err(AoaError::Config { .. })));
        let mut c = SceneConfig::desk();
        c.dynamic_range_db = Some(10.0);
        assert!(c.validate().is_err());
        assert!(SceneConfig::desk().with_fixed_n(5).validate().is_err());
    }
}
