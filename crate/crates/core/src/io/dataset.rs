//! Case directories: a JSON manifest plus one tensor file per array.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<case>/logits.swut   f32 (1, C, spatial...)
//! <dir>/<case>/labels.swut   i32 (1, spatial...)
//! <dir>/<case>/tap<k>.swut   f32 (1, C_k, spatial_k...)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor_file::{read_field, read_labels, write_field, write_labels};
use super::{read_json, write_json};
use crate::error::{Error, Result};
use crate::synth::SynthCase;

pub const DATASET_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub num_classes: usize,
    pub tap_channels: Vec<usize>,
    pub cases: Vec<String>,
}

pub fn write_dataset(dir: &Path, cases: &[SynthCase]) -> Result<()> {
    let first = cases
        .first()
        .ok_or_else(|| Error::InvalidArgument("refusing to write an empty dataset".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        schema_version: DATASET_SCHEMA,
        num_classes: first.logits.channels(),
        tap_channels: first.taps.iter().map(|t| t.channels()).collect(),
        cases: cases.iter().map(|c| c.id.clone()).collect(),
    };
    for c in cases {
        let cd = dir.join(&c.id);
        fs::create_dir_all(&cd).map_err(|e| Error::io(&cd, e))?;
        write_field(&cd.join("logits.swut"), &c.logits)?;
        write_labels(&cd.join("labels.swut"), &c.labels)?;
        for (k, t) in c.taps.iter().enumerate() {
            write_field(&cd.join(format!("tap{k}.swut")), t)?;
        }
    }
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let m: Manifest = read_json(&path)?;
    if m.schema_version != DATASET_SCHEMA {
        return Err(Error::format(&path, format!("unsupported schema version {}", m.schema_version)));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SynthCase>> {
    let m = read_manifest(dir)?;
    m.cases
        .iter()
        .map(|id| {
            let cd = dir.join(id);
            let logits = read_field(&cd.join("logits.swut"))?;
            let labels = read_labels(&cd.join("labels.swut"))?;
            let taps = (0..m.tap_channels.len())
                .map(|k| read_field(&cd.join(format!("tap{k}.swut"))))
                .collect::<Result<Vec<_>>>()?;
            if logits.channels() != m.num_classes {
                return Err(Error::format(&cd, "logit channels disagree with the manifest"));
            }
            labels.check_aligned(&logits).map_err(|e| Error::format(&cd, e.to_string()))?;
            labels.check_range(m.num_classes).map_err(|e| Error::format(&cd, e.to_string()))?;
            for (t, &ch) in taps.iter().zip(&m.tap_channels) {
                if t.channels() != ch {
                    return Err(Error::format(&cd, "tap channels disagree with the manifest"));
                }
            }
            Ok(SynthCase {
                id: id.clone(),
                taps,
                logits,
                labels,
            })
        })
        .collect()
}
