//! The single JSON configuration with sections
//! `{geometry, scene, model, loss, train, iaa, eval}`.
//!
//! Every section is optional and falls back to the desk defaults. Unknown
//! keys are rejected; parse errors carry the path of the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::array::{ArrayGeometry, GeometryFile};
use crate::baselines::IaaConfig;
use crate::error::{AoaError, Result};
use crate::eval::EvalConfig;
use crate::matching::LossWeights;
use crate::model::ModelConfig;
use crate::scene::SceneConfig;
use crate::train::{TrainConfig, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometrySpec {
    /// Half-wavelength uniform linear array at 77 GHz.
    HalfWaveUla { elements: usize },
    /// 6 × 8 MIMO virtual array at 77 GHz.
    SparseMimo48,
    /// Explicit element positions in meters.
    Positions {
        wavelength_m: f64,
        positions_m: Vec<[f64; 3]>,
    },
    /// Geometry JSON file (`wavelength_m`, `positions_m`), relative paths
    /// resolved against the config file.
    File { path: PathBuf },
}

impl Default for GeometrySpec {
    fn default() -> Self {
        GeometrySpec::HalfWaveUla { elements: 16 }
    }
}

impl GeometrySpec {
    pub fn build(&self, base_dir: Option<&Path>) -> Result<ArrayGeometry> {
        let g = match self {
            GeometrySpec::HalfWaveUla { elements } => ArrayGeometry::half_wave_ula(*elements),
            GeometrySpec::SparseMimo48 => Ok(ArrayGeometry::sparse_mimo_48()),
            GeometrySpec::Positions {
                wavelength_m,
                positions_m,
            } => ArrayGeometry::try_from(GeometryFile {
                wavelength_m: *wavelength_m,
                positions_m: positions_m.clone(),
            }),
            GeometrySpec::File { path } => {
                let full = match base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                ArrayGeometry::from_json_file(&full)
            }
        };
        g.map_err(|e| AoaError::config("geometry", e.to_string()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub geometry: GeometrySpec,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainOptions,
    pub iaa: IaaConfig,
    pub eval: EvalConfig,
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.iaa.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    pub fn train_config(&self, base_dir: Option<&Path>) -> Result<TrainConfig> {
        let c = TrainConfig {
            options: self.train.clone(),
            geometry: self.geometry.build(base_dir)?,
            scene: self.scene.clone(),
            model: self.model.clone(),
            loss: self.loss,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Overlays `patch` onto `base` key by key. Objects carrying a `kind` tag
/// select a variant and replace the base object wholesale.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) if !p.contains_key("kind") => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// Deserializes a JSON value on top of the defaults, so a partial section
/// keeps the default of every key it omits. Errors carry the offending key
/// path.
pub fn from_value(value: Value) -> Result<AppConfig> {
    let mut full = serde_json::to_value(AppConfig::default())?;
    merge(&mut full, value);
    let cfg: AppConfig = serde_path_to_error::deserialize(full).map_err(|e| {
        let path = e.path().to_string();
        AoaError::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Sets `key` (dot separated, e.g. `train.batch_size`) to `raw`, parsed
/// as JSON when possible and as a string otherwise.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(AoaError::config(key, "malformed override key"));
    }
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(AoaError::config(key, format!("`{}` is not an object", parts[..i].join("."))));
            }
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Reads a config file (or the defaults when `path` is `None`) and
/// applies `key=value` overrides.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<AppConfig> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| AoaError::config("<file>", format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| AoaError::config("<root>", format!("invalid JSON: {e}")))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| AoaError::config(o.as_str(), "override must look like key=value"))?;
        apply_override(&mut value, k.trim(), v.trim())?;
    }
    from_value(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_config_is_desk_defaults() {
        let c = from_value(json!({})).unwrap();
        assert_eq!(c, AppConfig::default());
        assert_eq!(c.model, ModelConfig::desk());
        let t = c.train_config(None).unwrap();
        assert_eq!(t.geometry.element_count(), 16);
    }

    #[test]
    fn errors_point_at_keys() {
        match from_value(json!({"train": {"batch_size": "big"}})) {
            Err(AoaError::Config { key, .. }) => assert_eq!(key, "train.batch_size"),
            other => panic!("{other:?}"),
        }
        match from_value(json!({"scene": {"snr": 3}})) {
            Err(AoaError::Config { key, .. }) => assert!(key.starts_with("scene"), "{key}"),
            other => panic!("{other:?}"),
        }
        match from_value(json!({"scene": {"theta_min_deg": 10, "theta_max_deg": 0}})) {
            Err(AoaError::Config { key, .. }) => assert_eq!(key, "scene.theta_min_deg"),
            other => panic!("{other:?}"),
        }
        match from_value(json!({"iaa": {"peaks": {"max_peaks": 0}}})) {
            Err(AoaError::Config { key, .. }) => assert_eq!(key, "iaa.peaks.max_peaks"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_and_geometry() {
        let mut v = json!({"train": {"batch_size": 8}});
        apply_override(&mut v, "train.batch_size", "64").unwrap();
        apply_override(&mut v, "geometry.kind", "sparse_mimo48").unwrap();
        apply_override(&mut v, "eval.match_rule", "one_to_one").unwrap();
        let c = from_value(v).unwrap();
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.geometry, GeometrySpec::SparseMimo48);
        assert_eq!(c.geometry.build(None).unwrap().element_count(), 48);
        // partial nested sections keep their own defaults
        let c = from_value(json!({"train": {"monitor": {"scenes_per_condition": 7}}})).unwrap();
        assert_eq!(c.train.monitor.scenes_per_condition, 7);
        assert_eq!(c.train.monitor.angle_tol_deg, TrainOptions::default().monitor.angle_tol_deg);
        assert_eq!(c.train.monitor.n_targets, vec![2]);
        let c = from_value(json!({"model": {"position_encoding": {"kind": "fourier", "frequency_scale": 2.0}}})).unwrap();
        assert_eq!(
            c.model.position_encoding,
            crate::model::PositionEncoding::Fourier { frequency_scale: 2.0 }
        );
        let mut bad = json!({"train": 3});
        assert!(apply_override(&mut bad, "train.batch_size", "1").is_err());

        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("g.json"),
            r#"{"wavelength_m": 0.004, "positions_m": [[0,0,0],[0,0.002,0],[0,0.004,0]]}"#,
        )
        .unwrap();
        let spec = GeometrySpec::File { path: "g.json".into() };
        assert_eq!(spec.build(Some(dir.path())).unwrap().element_count(), 3);
        let cfg_path = dir.path().join("c.json");
        std::fs::write(&cfg_path, r#"{"geometry": {"kind": "file", "path": "g.json"}}"#).unwrap();
        let c = load(Some(&cfg_path), &["scene.snr_db=20".into()]).unwrap();
        assert_eq!(c.scene.snr_db, 20.0);
        assert_eq!(c.train_config(Some(dir.path())).unwrap().geometry.element_count(), 3);
    }
}
