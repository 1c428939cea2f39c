//! Scene shards on disk.
//!
//! JSON lines, one scene per line:
//! `{"seed":1,"snr_db":35.0,"targets":[{"angle_deg":..,"mag_db":..,"phase_rad":..}],"snapshot":[[re,im],..]}`
//!
//! Packed binary, all little-endian: magic `AOA1`, `u32` K, `u64` scene
//! count, then per scene `u64` seed, `f32` snr_db, `u32` N, N × (`f32`
//! angle_deg, `f32` mag_db, `f32` phase_rad), K × (`f32` re, `f32` im).

use std::io::{BufRead, Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{AoaError, Result};
use crate::scene::{Scene, Target};

pub const BINARY_MAGIC: &[u8; 4] = b"AOA1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetRecord {
    pub angle_deg: f64,
    pub mag_db: f64,
    pub phase_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub seed: u64,
    pub snr_db: f64,
    pub targets: Vec<TargetRecord>,
    pub snapshot: Vec<[f64; 2]>,
}

impl From<&Scene> for SceneRecord {
    fn from(s: &Scene) -> Self {
        Self {
            seed: s.seed,
            snr_db: s.snr_db,
            targets: s
                .targets
                .iter()
                .map(|t| TargetRecord {
                    angle_deg: t.angle_deg,
                    mag_db: t.magnitude_db,
                    phase_rad: t.phase_rad,
                })
                .collect(),
            snapshot: s.snapshot.iter().map(|c| [c.re, c.im]).collect(),
        }
    }
}

impl SceneRecord {
    pub fn targets(&self) -> Vec<Target> {
        self.targets
            .iter()
            .map(|t| Target::new(t.angle_deg, t.mag_db, t.phase_rad))
            .collect()
    }

    pub fn snapshot(&self) -> Vec<Complex64> {
        self.snapshot.iter().map(|&[re, im]| Complex64::new(re, im)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardFormat {
    Jsonl,
    Binary,
}

pub fn write_jsonl<W: Write>(out: &mut W, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut *out, &SceneRecord::from(s))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<SceneRecord>> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            serde_json::from_str(&line?).map_err(|e| AoaError::Dataset(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_binary<W: Write>(out: &mut W, element_count: usize, scenes: &[Scene]) -> Result<()> {
    out.write_all(BINARY_MAGIC)?;
    out.write_all(&(element_count as u32).to_le_bytes())?;
    out.write_all(&(scenes.len() as u64).to_le_bytes())?;
    for s in scenes {
        if s.snapshot.len() != element_count {
            return Err(AoaError::Dimension {
                context: "shard snapshot length",
                expected: element_count,
                got: s.snapshot.len(),
            });
        }
        out.write_all(&s.seed.to_le_bytes())?;
        out.write_all(&(s.snr_db as f32).to_le_bytes())?;
        out.write_all(&(s.targets.len() as u32).to_le_bytes())?;
        for t in &s.targets {
            for v in [t.angle_deg, t.magnitude_db, t.phase_rad] {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        for c in &s.snapshot {
            out.write_all(&(c.re as f32).to_le_bytes())?;
            out.write_all(&(c.im as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| AoaError::Dataset(format!("binary shard truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }
}

/// Returns the element count and the scenes.
pub fn read_binary<R: Read>(mut input: R) -> Result<(usize, Vec<SceneRecord>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != BINARY_MAGIC {
        return Err(AoaError::Dataset("not an AOA1 shard".into()));
    }
    let k = c.u32()? as usize;
    let count = c.u64()?;
    let mut scenes = Vec::new();
    for _ in 0..count {
        let seed = c.u64()?;
        let snr_db = c.f32()?;
        let n = c.u32()? as usize;
        let mut targets = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            targets.push(TargetRecord {
                angle_deg: c.f32()?,
                mag_db: c.f32()?,
                phase_rad: c.f32()?,
            });
        }
        let mut snapshot = Vec::with_capacity(k);
        for _ in 0..k {
            snapshot.push([c.f32()?, c.f32()?]);
        }
        scenes.push(SceneRecord {
            seed,
            snr_db,
            targets,
            snapshot,
        });
    }
    if c.pos != bytes.len() {
        return Err(AoaError::Dataset("trailing bytes after the last scene".into()));
    }
    Ok((k, scenes))
}
