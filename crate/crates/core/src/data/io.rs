//! Dataset container: a little-endian binary body plus a JSON sidecar.
//!
//! Binary layout:
//!
//! ```text
//! "TADE" | version u32 | n u32 | d u32 | C u32 | n × label u32 | n·d × feature f64
//! ```
//!
//! Features are row-major. The sidecar sits next to the body with a `.json`
//! extension and carries the class-count profile.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, LongTailProfile};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

pub const DATASET_MAGIC: &[u8; 4] = b"TADE";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// JSON sidecar contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format: String,
    pub version: u32,
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    pub profile: LongTailProfile,
}

pub fn sidecar_path(bin_path: &Path) -> PathBuf {
    bin_path.with_extension("json")
}

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::Format(format!("{what} {value} does not fit in u32")))
}

pub fn save_dataset(bin_path: &Path, data: &Dataset) -> Result<()> {
    data.validate()?;
    let n = data.len();
    let d = data.dim();
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * n + 8 * n * d);
    bytes.extend_from_slice(DATASET_MAGIC);
    bytes.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    bytes.extend_from_slice(&to_u32(n, "sample count")?.to_le_bytes());
    bytes.extend_from_slice(&to_u32(d, "dimension")?.to_le_bytes());
    bytes.extend_from_slice(&to_u32(data.class_count(), "class count")?.to_le_bytes());
    for &y in &data.labels {
        bytes.extend_from_slice(&to_u32(y, "label")?.to_le_bytes());
    }
    for x in data.features.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::File::create(bin_path)?.write_all(&bytes)?;

    let meta = DatasetMeta {
        format: "TADE".into(),
        version: DATASET_VERSION,
        samples: n,
        dim: d,
        classes: data.class_count(),
        profile: data.profile.clone(),
    };
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    fs::write(sidecar_path(bin_path), json)?;
    Ok(())
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

pub fn load_dataset(bin_path: &Path) -> Result<Dataset> {
    let bytes = fs::read(bin_path)?;
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(sidecar_path(bin_path))?)?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format(format!("{} is not a dataset file", bin_path.display())));
    }
    let version = read_u32(&bytes, 4);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n = read_u32(&bytes, 8) as usize;
    let d = read_u32(&bytes, 12) as usize;
    let classes = read_u32(&bytes, 16) as usize;
    if (n, d, classes) != (meta.samples, meta.dim, meta.classes) || classes != meta.profile.class_count {
        return Err(Error::Format("binary header disagrees with the JSON sidecar".into()));
    }
    let expected = HEADER_LEN + 4 * n + 8 * n * d;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "dataset body has {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let labels = (0..n)
        .map(|i| read_u32(&bytes, HEADER_LEN + 4 * i) as usize)
        .collect();
    let features = bytes[HEADER_LEN + 4 * n..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let data = Dataset {
        features: Matrix::from_vec(n, d, features)?,
        labels,
        profile: meta.profile,
    };
    data.validate()?;
    Ok(data)
}
