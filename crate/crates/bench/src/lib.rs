//! Shared fixtures for the benchmarks.

use aoa_core::array::ArrayGeometry;
use aoa_core::scene::{Scene, SceneConfig, SceneStream};

pub fn desk_scenes(count: u64) -> (ArrayGeometry, Vec<Scene>) {
    let geometry = ArrayGeometry::half_wave_ula(16).expect("valid ULA");
    let stream = SceneStream::new(SceneConfig::desk(), geometry.clone(), 1).expect("valid config");
    (geometry, stream.range(0..count))
}
