//! Sample-set directories: `manifest.json` plus one binary file per group.
//!
//! Group file layout (little-endian):
//!
//! ```text
//! magic "LGRP" | u32 version | u64 M | u64 N | u32 cadence minutes
//! | i64 window start (unix seconds) | u8 provenance
//! | M·N f64 kW (row-major) | M f64 temperature
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use chrono::DateTime;
use serde::{Deserialize, Serialize};

use super::{DataError, Label, LoadGroup, Provenance, SampleSet, TIMESTAMP_FORMAT};

pub const MANIFEST: &str = "manifest.json";
const MAGIC: &[u8; 4] = b"LGRP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    file: String,
    id: String,
    label: Label,
    provenance: Provenance,
    start: String,
    meters: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    shape: Option<(usize, usize)>,
    notes: BTreeMap<String, String>,
    groups: Vec<Entry>,
}

fn encode_group(g: &LoadGroup) -> Vec<u8> {
    let mut b = Vec::with_capacity(40 + 8 * (g.kw.len() + g.temperature.len()));
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(g.m as u64).to_le_bytes());
    b.extend_from_slice(&(g.n as u64).to_le_bytes());
    b.extend_from_slice(&g.cadence_min.to_le_bytes());
    b.extend_from_slice(&g.start.and_utc().timestamp().to_le_bytes());
    b.push(g.provenance.code());
    for v in g.kw.iter().chain(&g.temperature) {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], DataError> {
        if self.0.len() < n {
            return Err(DataError::Store("truncated group file".into()));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn arr<const K: usize>(&mut self) -> Result<[u8; K], DataError> {
        Ok(self.take(K)?.try_into().expect("length checked"))
    }
}

fn decode_group(bytes: &[u8], e: &Entry) -> Result<LoadGroup, DataError> {
    let mut c = Cursor(bytes);
    if c.take(4)? != MAGIC {
        return Err(DataError::Store(format!("{}: bad magic", e.file)));
    }
    let version = u32::from_le_bytes(c.arr()?);
    if version != VERSION {
        return Err(DataError::Store(format!("{}: unsupported version {version}", e.file)));
    }
    let m = u64::from_le_bytes(c.arr()?) as usize;
    let n = u64::from_le_bytes(c.arr()?) as usize;
    let cadence_min = u32::from_le_bytes(c.arr()?);
    let secs = i64::from_le_bytes(c.arr()?);
    let provenance = Provenance::from_code(c.arr::<1>()?[0]).ok_or_else(|| DataError::Store(format!("{}: bad provenance", e.file)))?;
    let start = DateTime::from_timestamp(secs, 0)
        .ok_or_else(|| DataError::Store(format!("{}: bad timestamp", e.file)))?
        .naive_utc();
    let mut read = |count: usize| -> Result<Vec<f64>, DataError> {
        (0..count).map(|_| Ok(f64::from_le_bytes(c.arr()?))).collect()
    };
    let kw = read(m * n)?;
    let temperature = read(m)?;
    if !c.0.is_empty() {
        return Err(DataError::Store(format!("{}: trailing bytes", e.file)));
    }
    Ok(LoadGroup {
        id: e.id.clone(),
        start,
        cadence_min,
        m,
        n,
        kw,
        temperature,
        provenance,
        meters: e.meters.clone(),
    })
}

/// Writes `set` into `dir` (created if needed).
pub fn save_set(dir: &Path, set: &SampleSet) -> Result<(), DataError> {
    std::fs::create_dir_all(dir.join("groups"))?;
    let mut groups = Vec::with_capacity(set.len());
    for (i, (g, label)) in set.iter().enumerate() {
        if let Label::Machine { confidence, .. } = label {
            if !(0.0..=1.0).contains(confidence) {
                return Err(DataError::Store(format!("confidence {confidence} of {} outside [0, 1]", g.id)));
            }
        }
        let file = format!("groups/{i:06}.bin");
        std::fs::write(dir.join(&file), encode_group(g))?;
        groups.push(Entry {
            file,
            id: g.id.clone(),
            label: *label,
            provenance: g.provenance,
            start: g.start.format(TIMESTAMP_FORMAT).to_string(),
            meters: g.meters.clone(),
        });
    }
    let manifest = Manifest {
        version: VERSION,
        shape: set.shape()?,
        notes: set.notes.clone(),
        groups,
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_set(dir: &Path) -> Result<SampleSet, DataError> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != VERSION {
        return Err(DataError::Store(format!("unsupported manifest version {}", manifest.version)));
    }
    let mut set = SampleSet {
        notes: manifest.notes,
        ..SampleSet::default()
    };
    for e in &manifest.groups {
        let g = decode_group(&std::fs::read(dir.join(&e.file))?, e)?;
        if g.provenance != e.provenance {
            return Err(DataError::Store(format!("{}: provenance differs from manifest", e.file)));
        }
        set.push(g, e.label);
    }
    Ok(set)
}
