//! Model checkpoint file.
//!
//! ```text
//! "TADM" | version u32 | header_len u32 | header JSON (header_len bytes)
//!        | parameters f64 LE | optimizer velocity f64 LE (optional)
//! ```
//!
//! Parameter order is listed in the header's `layers` field: backbone layers
//! first, then each expert head; every layer stores its weights (row-major,
//! `fan_in × fan_out`) followed by its bias. When present, the velocity
//! buffer follows the same order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExpertModel, ModelSpec, Params};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TADM";
const VERSION: u32 = 1;

/// One tensor in the parameter blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub input_dim: usize,
    pub experts: usize,
    pub classes: usize,
    pub seed: u64,
    pub spec: ModelSpec,
    /// Training-set class counts, used for many/medium/few grouping.
    pub train_counts: Vec<usize>,
    pub epochs_completed: usize,
    pub param_count: usize,
    pub has_velocity: bool,
    pub layers: Vec<LayerShape>,
}

/// A trained (or partially trained) model with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ExpertModel,
    pub seed: u64,
    pub train_counts: Vec<usize>,
    pub epochs_completed: usize,
    /// Flat momentum buffer in parameter order.
    pub velocity: Option<Vec<f64>>,
}

fn layer_shapes(params: &Params) -> Vec<LayerShape> {
    let named = params
        .backbone
        .iter()
        .enumerate()
        .map(|(i, l)| (format!("backbone.{i}"), l))
        .chain(params.heads.iter().enumerate().flat_map(|(k, head)| {
            head.iter()
                .enumerate()
                .map(move |(i, l)| (format!("expert{}.{i}", k + 1), l))
        }));
    named
        .flat_map(|(name, l)| {
            [
                LayerShape {
                    name: format!("{name}.weight"),
                    rows: l.weights.rows(),
                    cols: l.weights.cols(),
                },
                LayerShape {
                    name: format!("{name}.bias"),
                    rows: 1,
                    cols: l.bias.len(),
                },
            ]
        })
        .collect()
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        let spec = self.model.spec().clone();
        CheckpointHeader {
            input_dim: spec.input_dim,
            experts: spec.experts,
            classes: spec.classes,
            seed: self.seed,
            train_counts: self.train_counts.clone(),
            epochs_completed: self.epochs_completed,
            param_count: self.model.param_count(),
            has_velocity: self.velocity.is_some(),
            layers: layer_shapes(self.model.params()),
            spec,
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let n = ckpt.model.param_count();
    if let Some(v) = &ckpt.velocity {
        if v.len() != n {
            return Err(Error::Shape(format!("velocity of length {} for {n} parameters", v.len())));
        }
    }
    let header = serde_json::to_vec(&ckpt.header())?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Format("checkpoint header too large".into()))?;
    let mut bytes = Vec::with_capacity(12 + header.len() + 16 * n);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&header_len.to_le_bytes());
    bytes.extend_from_slice(&header);
    let params = ckpt.model.params().to_flat();
    for x in params.iter().chain(ckpt.velocity.iter().flatten()) {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    if word(4) != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", word(4))));
    }
    let header_end = 12 + word(8) as usize;
    if bytes.len() < header_end {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..header_end])?;
    let n = header.param_count;
    let blob = &bytes[header_end..];
    let expected = if header.has_velocity { 16 * n } else { 8 * n };
    if blob.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint body has {} bytes, expected {expected}",
            blob.len()
        )));
    }
    let mut params = Params::zeros(&header.spec);
    params.set_flat(&read_f64s(&blob[..8 * n]))?;
    if layer_shapes(&params) != header.layers {
        return Err(Error::Format("layer table disagrees with the model spec".into()));
    }
    let velocity = header.has_velocity.then(|| read_f64s(&blob[8 * n..]));
    Ok(Checkpoint {
        model: ExpertModel::from_params(header.spec, params)?,
        seed: header.seed,
        train_counts: header.train_counts,
        epochs_completed: header.epochs_completed,
        velocity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngState;

    fn checkpoint(with_velocity: bool) -> Checkpoint {
        let spec = ModelSpec::with_half_width_heads(4, vec![6, 6], 3, 5);
        let model = ExpertModel::init(spec, &mut RngState::new(3, 0)).unwrap();
        let n = model.param_count();
        Checkpoint {
            model,
            seed: 3,
            train_counts: vec![50, 20, 9, 4, 2],
            epochs_completed: 7,
            velocity: with_velocity.then(|| (0..n).map(|i| i as f64 * 1e-3).collect()),
        }
    }

    #[test]
    fn round_trip_with_and_without_velocity() {
        let dir = tempfile::tempdir().unwrap();
        for with_velocity in [false, true] {
            let path = dir.path().join("m.ckpt");
            let ckpt = checkpoint(with_velocity);
            save_checkpoint(&path, &ckpt).unwrap();
            assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
        }
    }

    #[test]
    fn header_documents_layer_order() {
        let h = checkpoint(false).header();
        let names: Vec<&str> = h.layers.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(&names[..4], &["backbone.0.weight", "backbone.0.bias", "backbone.1.weight", "backbone.1.bias"]);
        assert_eq!(names[4], "expert1.0.weight");
        assert_eq!(*names.last().unwrap(), "expert3.1.bias");
        let total: usize = h.layers.iter().map(|l| l.rows * l.cols).sum();
        assert_eq!(total, h.param_count);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &checkpoint(false)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
