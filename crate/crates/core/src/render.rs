//! Gridless detections back onto an angle grid, and overlay plots.

use crate::baselines::{check_uniform_grid, AngularSpectrum};
use crate::detection::DetectionSet;
use crate::error::{AoaError, Result};
use crate::scene::Target;
use crate::svg::{Chart, Series};

#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    pub spectrum: AngularSpectrum,
    /// Detections outside the grid, folded into the nearest edge cell.
    pub clipped: usize,
}

/// Summation splatting with a triangular kernel: each detection at or above
/// `confidence_threshold` adds its linear power `lin(α̃)²` to the two
/// nearest cells, weighted by proximity.
pub fn splat(detections: &DetectionSet, grid: &[f64], confidence_threshold: f64) -> Result<Splat> {
    check_uniform_grid(grid)?;
    let g = grid.len();
    let mut power = vec![0.0; g];
    let mut clipped = 0;
    let step = if g > 1 { (grid[g - 1] - grid[0]) / (g - 1) as f64 } else { 1.0 };
    for d in detections.above(confidence_threshold) {
        let p = 10f64.powf(d.magnitude_db / 10.0);
        if d.angle_deg < grid[0] || d.angle_deg > grid[g - 1] {
            clipped += 1;
            let edge = if d.angle_deg < grid[0] { 0 } else { g - 1 };
            power[edge] += p;
            continue;
        }
        let f = (d.angle_deg - grid[0]) / step;
        let i = (f.floor() as usize).min(g - 1);
        let w = f - i as f64;
        if w == 0.0 || i + 1 == g {
            power[i] += p;
        } else {
            power[i] += (1.0 - w) * p;
            power[i + 1] += w * p;
        }
    }
    if clipped > 0 {
        log::warn!("splat: {clipped} detection(s) outside the grid clipped to the edge cells");
    }
    Ok(Splat {
        spectrum: AngularSpectrum::new(grid.to_vec(), power)?,
        clipped,
    })
}

/// Overlaid dB traces sharing one grid, with dashed ground-truth markers.
pub fn render_comparison(spectra: &[(String, AngularSpectrum)], gt: &[Target]) -> Result<String> {
    let first = spectra
        .first()
        .ok_or_else(|| AoaError::invalid("nothing to render"))?;
    for (name, s) in spectra {
        if s.grid != first.1.grid {
            return Err(AoaError::invalid(format!("spectrum {name} uses a different grid")));
        }
    }
    let top = spectra
        .iter()
        .flat_map(|(_, s)| s.power.iter())
        .fold(0.0f64, |m, &p| m.max(p));
    let top_db = if top > 0.0 { 10.0 * top.log10() } else { 0.0 };
    let floor_db = top_db - 60.0;
    let series = spectra
        .iter()
        .map(|(name, s)| Series {
            label: name.clone(),
            points: s.grid.iter().copied().zip(s.power_db(floor_db)).collect(),
            markers: false,
        })
        .collect();
    let grid = &first.1.grid;
    let x_range = if grid.len() > 1 {
        (grid[0], grid[grid.len() - 1])
    } else {
        (grid[0] - 1.0, grid[0] + 1.0)
    };
    Ok(Chart {
        title: "Angular spectrum".into(),
        x_label: "angle (deg)".into(),
        y_label: "power (dB)".into(),
        x_range,
        y_range: (floor_db, top_db + 3.0),
        series,
        vlines: gt
            .iter()
            .map(|t| (t.angle_deg, format!("target {:.2} deg, {:.1} dB", t.angle_deg, t.magnitude_db)))
            .collect(),
    }
    .render())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::uniform_grid;
    use crate::detection::Detection;
    use proptest::prelude::*;

    fn det(angle: f64, mag: f64, conf: f64) -> Detection {
        Detection {
            angle_deg: angle,
            magnitude_db: mag,
            confidence: conf,
        }
    }

    fn grid() -> Vec<f64> {
        uniform_grid(-60.0, 60.0, 121).unwrap()
    }

    #[test]
    fn on_grid_and_midpoint() {
        let s = splat(&DetectionSet::new(vec![det(10.0, 0.0, 0.9)]), &grid(), 0.5).unwrap();
        assert_eq!(s.spectrum.power[70], 1.0);
        assert_eq!(s.spectrum.power.iter().filter(|&&p| p != 0.0).count(), 1);
        let s = splat(&DetectionSet::new(vec![det(10.5, -10.0, 0.9)]), &grid(), 0.5).unwrap();
        assert!((s.spectrum.power[70] - 0.05).abs() < 1e-15);
        assert!((s.spectrum.power[71] - 0.05).abs() < 1e-15);
        let end = splat(&DetectionSet::new(vec![det(60.0, 0.0, 0.9)]), &grid(), 0.5).unwrap();
        assert_eq!(end.spectrum.power[120], 1.0);
    }

    #[test]
    fn threshold_and_clipping() {
        let dets = DetectionSet::new(vec![det(0.0, 0.0, 0.2), det(75.0, 0.0, 0.9), det(-61.0, -3.0, 0.9)]);
        let s = splat(&dets, &grid(), 0.5).unwrap();
        assert_eq!(s.clipped, 2);
        assert_eq!(s.spectrum.power[60], 0.0);
        assert_eq!(s.spectrum.power[120], 1.0);
        assert!((s.spectrum.power[0] - 10f64.powf(-0.3)).abs() < 1e-15);
        assert!(splat(&dets, &[1.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn comparison_svg() {
        let g = grid();
        let a = splat(&DetectionSet::new(vec![det(10.0, 0.0, 0.9)]), &g, 0.5).unwrap().spectrum;
        let svg = render_comparison(&[("aaetr".into(), a.clone())], &[]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        let gt = [Target::new(10.0, 0.0, 0.0)];
        let two = [("a".to_string(), a.clone()), ("b".to_string(), a.clone())];
        let svg2 = render_comparison(&two, &gt).unwrap();
        assert_eq!(svg2, render_comparison(&two, &gt).unwrap());
        assert_eq!(svg2.matches("stroke-dasharray").count(), 1);
        let other = AngularSpectrum::new(uniform_grid(-60.0, 60.0, 11).unwrap(), vec![1.0; 11]).unwrap();
        assert!(render_comparison(&[("a".into(), a), ("b".into(), other)], &[]).is_err());
        assert!(render_comparison(&[], &[]).is_err());
    }

    fn dets_strategy() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec((-60.0f64..=60.0, -30.0f64..5.0, 0.0f64..1.0), 0..20)
            .prop_map(|v| v.into_iter().map(|(a, m, c)| det(a, m, c)).collect())
    }

    proptest! {
        #[test]
        fn splat_conserves_power(d in dets_strategy(), thr in 0.0f64..1.0) {
            let set = DetectionSet::new(d);
            let s = splat(&set, &grid(), thr).unwrap();
            let want: f64 = set.above(thr).map(|d| 10f64.powf(d.magnitude_db / 10.0)).sum();
            let got: f64 = s.spectrum.power.iter().sum();
            prop_assert!((got - want).abs() <= 1e-12 * want.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn splat_is_linear(a in dets_strategy(), b in dets_strategy()) {
            let g = grid();
            let sa = splat(&DetectionSet::new(a.clone()), &g, 0.3).unwrap().spectrum.power;
            let sb = splat(&DetectionSet::new(b.clone()), &g, 0.3).unwrap().spectrum.power;
            let union: Vec<Detection> = a.into_iter().chain(b).collect();
            let su = splat(&DetectionSet::new(union), &g, 0.3).unwrap().spectrum.power;
            for i in 0..g.len() {
                prop_assert!((su[i] - sa[i] - sb[i]).abs() <= 1e-12 * su[i].max(1e-300));
            }
        }
    }
}
