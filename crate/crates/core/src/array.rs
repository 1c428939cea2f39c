//! Virtual array geometry and far-field steering vectors.
//!
//! Phases follow `exp(+j·(2π/λ)·⟨p, u(θ)⟩)` with `u(θ) = (cos θ, sin θ, 0)`.
//! The simulator and every estimator share this one convention. Angles are
//! azimuth in degrees at every public interface.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{AoaError, Result};

/// Carrier wavelength of a 77 GHz automotive radar, in meters.
pub const WAVELENGTH_77GHZ: f64 = 299_792_458.0 / 77.0e9;

/// Positions of the K virtual elements and the carrier wavelength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryFile", into = "GeometryFile")]
pub struct ArrayGeometry {
    positions: Vec<[f64; 3]>,
    wavelength: f64,
}

/// On-disk geometry layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometryFile {
    pub wavelength_m: f64,
    pub positions_m: Vec<[f64; 3]>,
}

impl TryFrom<GeometryFile> for ArrayGeometry {
    type Error = AoaError;

    fn try_from(file: GeometryFile) -> Result<Self> {
        ArrayGeometry::new(file.positions_m, file.wavelength_m)
    }
}

impl From<ArrayGeometry> for GeometryFile {
    fn from(g: ArrayGeometry) -> Self {
        GeometryFile {
            wavelength_m: g.wavelength,
            positions_m: g.positions,
        }
    }
}

impl ArrayGeometry {
    pub fn new(positions: Vec<[f64; 3]>, wavelength: f64) -> Result<Self> {
        if !(wavelength.is_finite() && wavelength > 0.0) {
            return Err(AoaError::Geometry(format!(
                "wavelength must be positive and finite, got {wavelength}"
            )));
        }
        if positions.len() < 2 {
            return Err(AoaError::Geometry(format!(
                "need at least 2 elements, got {}",
                positions.len()
            )));
        }
        if let Some(k) = positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(AoaError::Geometry(format!("element {k} has a non-finite coordinate")));
        }
        if let Some((a, b)) = find_coincident(&positions, 1e-9 * wavelength) {
            return Err(AoaError::Geometry(format!(
                "elements {a} and {b} share the same position"
            )));
        }
        Ok(Self {
            positions,
            wavelength,
        })
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn element_count(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    /// Element positions expressed in carrier wavelengths.
    pub fn positions_in_wavelengths(&self) -> Vec<[f64; 3]> {
        self.positions
            .iter()
            .map(|p| [p[0] / self.wavelength, p[1] / self.wavelength, p[2] / self.wavelength])
            .collect()
    }

    /// Reorders the elements; `order[k]` is the old index placed at slot `k`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.element_count() {
            return Err(AoaError::Dimension {
                context: "geometry permutation",
                expected: self.element_count(),
                got: order.len(),
            });
        }
        let positions = order.iter().map(|&k| self.positions[k]).collect();
        ArrayGeometry::new(positions, self.wavelength)
    }

    /// Shifts every element by the same offset.
    pub fn translated(&self, offset: [f64; 3]) -> Result<Self> {
        let positions = self
            .positions
            .iter()
            .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
            .collect();
        ArrayGeometry::new(positions, self.wavelength)
    }

    /// Half-wavelength uniform linear array at 77 GHz.
    pub fn half_wave_ula(count: usize) -> Result<Self> {
        uniform_linear_array(count, WAVELENGTH_77GHZ / 2.0, WAVELENGTH_77GHZ)
    }

    /// Default 48-element sparse MIMO layout: 6 transmitters and 8 receivers
    /// along the y-axis.
    ///
    /// Receivers sit at {0, 1, 2, 3, 5, 7, 10, 13}·λ/2 and transmitters at
    /// multiples of 14·λ/2, so all 48 pairwise sums are distinct and the
    /// virtual aperture spans 83·λ/2 with gaps. This is a synthetic stand-in
    /// for a production long-range radar layout.
    pub fn sparse_mimo_48() -> Self {
        let half = WAVELENGTH_77GHZ / 2.0;
        let rx: Vec<[f64; 3]> = [0.0, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0, 13.0]
            .iter()
            .map(|&u| [0.0, u * half, 0.0])
            .collect();
        let tx: Vec<[f64; 3]> = (0..6).map(|i| [0.0, 14.0 * i as f64 * half, 0.0]).collect();
        mimo_virtual_array(&tx, &rx, WAVELENGTH_77GHZ).expect("fixture sums are distinct")
    }
}

fn find_coincident(positions: &[[f64; 3]], tol: f64) -> Option<(usize, usize)> {
    for (a, pa) in positions.iter().enumerate() {
        for (b, pb) in positions.iter().enumerate().skip(a + 1) {
            let d2: f64 = pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum();
            if d2.sqrt() <= tol {
                return Some((a, b));
            }
        }
    }
    None
}

/// `count` elements on the y-axis at `y_k = k·spacing`.
pub fn uniform_linear_array(count: usize, spacing: f64, wavelength: f64) -> Result<ArrayGeometry> {
    if count < 2 {
        return Err(AoaError::Geometry(format!(
            "a linear array needs at least 2 elements, got {count}"
        )));
    }
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(AoaError::Geometry(format!(
            "element spacing must be positive, got {spacing}"
        )));
    }
    let positions = (0..count).map(|k| [0.0, k as f64 * spacing, 0.0]).collect();
    ArrayGeometry::new(positions, wavelength)
}

/// Virtual array of a MIMO radar: every transmitter/receiver position sum,
/// ordered transmitter-major.
pub fn mimo_virtual_array(
    tx_positions: &[[f64; 3]],
    rx_positions: &[[f64; 3]],
    wavelength: f64,
) -> Result<ArrayGeometry> {
    if tx_positions.is_empty() || rx_positions.is_empty() {
        return Err(AoaError::Geometry(
            "need at least one transmitter and one receiver".into(),
        ));
    }
    let mut positions = Vec::with_capacity(tx_positions.len() * rx_positions.len());
    for tx in tx_positions {
        for rx in rx_positions {
            positions.push([tx[0] + rx[0], tx[1] + rx[1], tx[2] + rx[2]]);
        }
    }
    if let Some((a, b)) = find_coincident(&positions, 1e-9 * wavelength) {
        return Err(AoaError::Geometry(format!(
            "virtual elements {a} and {b} coincide; redundant virtual elements are not supported"
        )));
    }
    ArrayGeometry::new(positions, wavelength)
}

/// Per-element phase response to a plane wave from one azimuth.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub angle_deg: f64,
    pub entries: Vec<Complex64>,
}

fn direction(angle_deg: f64) -> [f64; 3] {
    let t = angle_deg.to_radians();
    [t.cos(), t.sin(), 0.0]
}

fn fill_steering(geometry: &ArrayGeometry, angle_deg: f64, out: &mut [Complex64]) {
    let u = direction(angle_deg);
    let k0 = 2.0 * std::f64::consts::PI / geometry.wavelength;
    for (e, p) in out.iter_mut().zip(&geometry.positions) {
        let phase = k0 * (p[0] * u[0] + p[1] * u[1] + p[2] * u[2]);
        *e = Complex64::from_polar(1.0, phase);
    }
}

pub fn steering_vector(geometry: &ArrayGeometry, angle_deg: f64) -> Result<SteeringVector> {
    if !angle_deg.is_finite() {
        return Err(AoaError::invalid(format!("steering angle must be finite, got {angle_deg}")));
    }
    let mut entries = vec![Complex64::new(0.0, 0.0); geometry.element_count()];
    fill_steering(geometry, angle_deg, &mut entries);
    Ok(SteeringVector { angle_deg, entries })
}

/// K×G matrix of steering vectors, stored column-major (one contiguous
/// column per grid angle).
#[derive(Debug, Clone)]
pub struct SteeringMatrix {
    elements: usize,
    grid: Vec<f64>,
    data: Vec<Complex64>,
}

impl SteeringMatrix {
    pub fn element_count(&self) -> usize {
        self.elements
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn column(&self, g: usize) -> &[Complex64] {
        &self.data[g * self.elements..(g + 1) * self.elements]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[Complex64]> {
        self.data.chunks_exact(self.elements)
    }
}

pub fn steering_matrix(geometry: &ArrayGeometry, grid_deg: &[f64]) -> Result<SteeringMatrix> {
    if grid_deg.is_empty() {
        return Err(AoaError::invalid("angle grid is empty"));
    }
    if grid_deg.iter().any(|a| !a.is_finite()) {
        return Err(AoaError::invalid("angle grid contains a non-finite value"));
    }
    if grid_deg.windows(2).any(|w| w[1] <= w[0]) {
        return Err(AoaError::invalid("angle grid must be strictly increasing"));
    }
    let k = geometry.element_count();
    let mut data = vec![Complex64::new(0.0, 0.0); k * grid_deg.len()];
    for (col, &angle) in data.chunks_exact_mut(k).zip(grid_deg) {
        fill_steering(geometry, angle, col);
    }
    Ok(SteeringMatrix {
        elements: k,
        grid: grid_deg.to_vec(),
        data,
    })
}

/// `count` uniformly spaced angles from `start` to `end` inclusive.
pub fn uniform_grid(start_deg: f64, end_deg: f64, count: usize) -> Result<Vec<f64>> {
    if count < 2 || !(end_deg > start_deg) {
        return Err(AoaError::invalid(format!(
            "grid needs count >= 2 and end > start, got {count} over [{start_deg}, {end_deg}]"
        )));
    }
    let step = (end_deg - start_deg) / (count - 1) as f64;
    Ok((0..count).map(|g| start_deg + g as f64 * step).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LAMBDA: f64 = 0.004;

    #[test]
    fn two_element_ula_positions() {
        let g = uniform_linear_array(2, LAMBDA / 2.0, LAMBDA).unwrap();
        assert_eq!(g.positions(), &[[0.0, 0.0, 0.0], [0.0, LAMBDA / 2.0, 0.0]]);
    }

    #[test]
    fn sixteen_element_ula_span() {
        let g = uniform_linear_array(16, LAMBDA / 2.0, LAMBDA).unwrap();
        assert_eq!(g.element_count(), 16);
        let span = g.positions()[15][1] - g.positions()[0][1];
        assert!((span - 7.5 * LAMBDA).abs() < 1e-15);
        assert!(g.positions().iter().all(|p| p[0] == 0.0 && p[2] == 0.0));
    }

    #[test]
    fn ula_rejects_bad_arguments() {
        assert!(uniform_linear_array(1, LAMBDA / 2.0, LAMBDA).is_err());
        assert!(uniform_linear_array(4, 0.0, LAMBDA).is_err());
        assert!(uniform_linear_array(4, -1.0, LAMBDA).is_err());
        assert!(uniform_linear_array(4, 1.0, 0.0).is_err());
    }

    #[test]
    fn geometry_rejects_duplicates_and_nan() {
        assert!(ArrayGeometry::new(vec![[0.0; 3], [0.0; 3]], LAMBDA).is_err());
        assert!(ArrayGeometry::new(vec![[0.0; 3], [f64::NAN, 0.0, 0.0]], LAMBDA).is_err());
    }

    #[test]
    fn mimo_six_by_eight_gives_48() {
        let g = ArrayGeometry::sparse_mimo_48();
        assert_eq!(g.element_count(), 48);
    }

    #[test]
    fn mimo_single_tx_translates_rx() {
        let rx: Vec<_> = (0..4).map(|k| [0.0, k as f64 * LAMBDA / 2.0, 0.0]).collect();
        let tx = [[0.01, 0.02, 0.0]];
        let g = mimo_virtual_array(&tx, &rx, LAMBDA).unwrap();
        for (v, r) in g.positions().iter().zip(&rx) {
            for c in 0..3 {
                assert!((v[c] - (r[c] + tx[0][c])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mimo_coincident_sums_rejected() {
        let tx = [[0.0, 0.0, 0.0], [0.0, 1.0e-3, 0.0]];
        let rx = [[0.0, 0.0, 0.0], [0.0, 1.0e-3, 0.0]];
        assert!(mimo_virtual_array(&tx, &rx, LAMBDA).is_err());
    }

    #[test]
    fn broadside_steering_is_all_ones() {
        let g = uniform_linear_array(8, LAMBDA / 2.0, LAMBDA).unwrap();
        let a = steering_vector(&g, 0.0).unwrap();
        for e in &a.entries {
            assert!((e - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn thirty_degrees_cycles_quarter_turns() {
        let g = uniform_linear_array(8, LAMBDA / 2.0, LAMBDA).unwrap();
        let a = steering_vector(&g, 30.0).unwrap();
        let cycle = [
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 1.0),
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.0, -1.0),
        ];
        for (k, e) in a.entries.iter().enumerate() {
            assert!((e - cycle[k % 4]).norm() < 1e-12, "k={k} {e}");
        }
    }

    #[test]
    fn steering_rejects_nan_angle() {
        let g = uniform_linear_array(4, LAMBDA / 2.0, LAMBDA).unwrap();
        assert!(steering_vector(&g, f64::NAN).is_err());
    }

    #[test]
    fn single_angle_matrix_matches_vector() {
        let g = ArrayGeometry::sparse_mimo_48();
        let m = steering_matrix(&g, &[12.5]).unwrap();
        let v = steering_vector(&g, 12.5).unwrap();
        assert_eq!(m.column(0), &v.entries[..]);
    }

    #[test]
    fn matrix_shape_and_modulus() {
        let g = uniform_linear_array(16, LAMBDA / 2.0, LAMBDA).unwrap();
        let grid = uniform_grid(-60.0, 60.0, 512).unwrap();
        let m = steering_matrix(&g, &grid).unwrap();
        assert_eq!(m.element_count(), 16);
        assert_eq!(m.len(), 512);
        assert!(m.columns().flatten().all(|e| (e.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn matrix_rejects_unsorted_grid() {
        let g = uniform_linear_array(4, LAMBDA / 2.0, LAMBDA).unwrap();
        assert!(steering_matrix(&g, &[1.0, 0.0]).is_err());
        assert!(steering_matrix(&g, &[1.0, 1.0]).is_err());
        assert!(steering_matrix(&g, &[]).is_err());
    }

    #[test]
    fn mirrored_columns_are_conjugate() {
        let g = uniform_linear_array(16, LAMBDA / 2.0, LAMBDA).unwrap();
        let grid = uniform_grid(-60.0, 60.0, 121).unwrap();
        let m = steering_matrix(&g, &grid).unwrap();
        for gi in 0..grid.len() {
            let mirror = grid.len() - 1 - gi;
            assert!((grid[gi] + grid[mirror]).abs() < 1e-12);
            for (a, b) in m.column(gi).iter().zip(m.column(mirror)) {
                assert!((a - b.conj()).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn geometry_json_round_trip_and_validation() {
        let g = uniform_linear_array(3, LAMBDA / 2.0, LAMBDA).unwrap();
        let text = serde_json::to_string(&g).unwrap();
        assert!(text.contains("wavelength_m") && text.contains("positions_m"));
        let back: ArrayGeometry = serde_json::from_str(&text).unwrap();
        assert_eq!(back, g);
        let bad = r#"{"wavelength_m": 0.004, "positions_m": [[0,0,0],[0,0,0]]}"#;
        assert!(serde_json::from_str::<ArrayGeometry>(bad).is_err());
    }

    proptest! {
        #[test]
        fn unit_modulus_for_random_geometry(
            coords in proptest::collection::vec(-0.1f64..0.1, 3 * 6),
            angle in -90.0f64..90.0,
        ) {
            let positions: Vec<[f64; 3]> = coords.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            if let Ok(g) = ArrayGeometry::new(positions, LAMBDA) {
                let a = steering_vector(&g, angle).unwrap();
                for e in &a.entries {
                    prop_assert!((e.norm() - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn translation_preserves_beampattern(
            offset in proptest::array::uniform3(-0.05f64..0.05),
            source in -60.0f64..60.0,
            look in -60.0f64..60.0,
        ) {
            let g = uniform_linear_array(8, LAMBDA / 2.0, LAMBDA).unwrap();
            let shifted = g.translated(offset).unwrap();
            let y = steering_vector(&g, source).unwrap().entries;
            let y_shift = steering_vector(&shifted, source).unwrap().entries;
            let a = steering_vector(&g, look).unwrap().entries;
            let a_shift = steering_vector(&shifted, look).unwrap().entries;
            let bf = |a: &[Complex64], y: &[Complex64]| -> f64 {
                a.iter().zip(y).map(|(a, y)| a.conj() * y).sum::<Complex64>().norm()
            };
            prop_assert!((bf(&a, &y) - bf(&a_shift, &y_shift)).abs() < 1e-9);
        }
    }
}
