//! Binary model files: `ZSY1`, a little-endian `u32` header length, a JSON
//! header, then every parameter as little-endian `f32` in declared order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{build_model, AblationMode, Model, ModelConfig};
use crate::semantics::PrototypeTable;
use crate::tensor::Tensor;
use crate::train::{EpochLog, TrainConfig};

const MAGIC: &[u8; 3] = b"ZSY";
pub const FORMAT_VERSION: u8 = b'1';

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub ablation_mode: AblationMode,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    #[serde(default)]
    pub loss_history: Vec<EpochLog>,
    /// Prototypes the semantic branch was trained against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototypes: Option<PrototypeTable>,
    pub param_shapes: Vec<Vec<usize>>,
}

impl CheckpointHeader {
    pub fn for_model(model: &Model) -> Self {
        Self {
            ablation_mode: model.config.ablation,
            model: model.config.clone(),
            train: None,
            epoch: 0,
            loss_history: Vec::new(),
            prototypes: None,
            param_shapes: model.params.iter().map(|p| p.shape().to_vec()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode_checkpoint(model: &Model, header: &CheckpointHeader) -> Result<Vec<u8>> {
    let mut header = header.clone();
    header.param_shapes = model.params.iter().map(|p| p.shape().to_vec()).collect();
    header.model = model.config.clone();
    header.ablation_mode = model.config.ablation;
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| corrupt("header too large"))?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * model.num_parameters());
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for p in &model.params {
        for &v in p.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(corrupt(format!("file is {} bytes, too short for a checkpoint", bytes.len())));
    }
    if &bytes[..3] != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    if bytes[3] != FORMAT_VERSION {
        return Err(corrupt(format!(
            "checkpoint format version {} is not supported; this build reads version {}",
            char::from(bytes[3]),
            char::from(FORMAT_VERSION)
        )));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(8..8 + len)
        .ok_or_else(|| corrupt(format!("header needs {len} bytes but the file ends early")))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    let mut model = build_model(header.model.clone())?;
    let expected: Vec<Vec<usize>> = model.params.iter().map(|p| p.shape().to_vec()).collect();
    if expected != header.param_shapes {
        return Err(corrupt("parameter shapes in the header disagree with the model configuration"));
    }
    let payload = &bytes[8 + len..];
    let want = 4 * model.num_parameters();
    if payload.len() != want {
        return Err(corrupt(format!("payload has {} bytes, expected {want}", payload.len())));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))));
    for p in &mut model.params {
        let data: Vec<f64> = values.by_ref().take(p.len()).collect();
        *p = Tensor::new(p.shape(), data)?.with_grad();
    }
    Ok(Checkpoint { header, model })
}

pub fn save_checkpoint(path: &Path, model: &Model, header: &CheckpointHeader) -> Result<()> {
    fs::write(path, encode_checkpoint(model, header)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Rejects a checkpoint whose grid does not match the data it is applied to.
pub fn check_grid(header: &CheckpointHeader, s: usize, image_size: usize) -> Result<()> {
    let g = &header.model.grid;
    if g.s != s {
        return Err(Error::Config(format!("checkpoint grid has S={} but the data config uses S={s}", g.s)));
    }
    if g.image_size != image_size {
        return Err(Error::Config(format!(
            "checkpoint expects {}×{} images but the data has {image_size}×{image_size}",
            g.image_size, g.image_size
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{GridSpec, LayerSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(ablation: AblationMode) -> Model {
        build_model(ModelConfig {
            grid: GridSpec::new(4, vec![(1.0, 1.0), (2.0, 1.5)], 16).unwrap(),
            h: 4,
            c_f: 6,
            backbone: vec![LayerSpec::new(4, 3, 2), LayerSpec::new(6, 3, 2)],
            ablation,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_preserves_forward() {
        let m = model(AblationMode::Full);
        let bytes = encode_checkpoint(&m, &CheckpointHeader::for_model(&m)).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..3 {
            let img = Tensor::new(&[3, 16, 16], (0..768).map(|_| rng.gen::<f64>()).collect()).unwrap();
            let a = m.forward(&img).unwrap();
            let b = back.model.forward(&img).unwrap();
            for (x, y) in [(&a.t_l, &b.t_l), (&a.t_s, &b.t_s), (&a.t_c, &b.t_c)] {
                let d = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                assert!(d < 1e-5, "{d}");
            }
        }
        // Rounded parameters survive a second trip exactly.
        let mut rounded = m.clone();
        rounded.round_to_f32();
        assert_eq!(back.model.params, rounded.params);
    }

    #[test]
    fn header_records_ablation() {
        let m = model(AblationMode::Visual);
        let bytes = encode_checkpoint(&m, &CheckpointHeader::for_model(&m)).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.header.ablation_mode, AblationMode::Visual);
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let json: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        assert_eq!(json["ablation_mode"], "visual");
    }

    #[test]
    fn truncation_and_magic_rejected() {
        let m = model(AblationMode::Full);
        let bytes = encode_checkpoint(&m, &CheckpointHeader::for_model(&m)).unwrap();
        for cut in [3, 20, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Checkpoint(_))), "{cut}");
        }
        let mut v2 = bytes.clone();
        v2[3] = b'2';
        let msg = decode_checkpoint(&v2).unwrap_err().to_string();
        assert!(msg.contains("version 2") && msg.contains("version 1"), "{msg}");
        let mut junk = bytes;
        junk[0] = b'X';
        assert!(decode_checkpoint(&junk).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn grid_mismatch_names_both_sizes() {
        let m = model(AblationMode::Full);
        let h = CheckpointHeader::for_model(&m);
        assert!(check_grid(&h, 4, 16).is_ok());
        let msg = check_grid(&h, 7, 16).unwrap_err().to_string();
        assert!(msg.contains("S=4") && msg.contains("S=7"), "{msg}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.zsy");
        let m = model(AblationMode::Semantic);
        save_checkpoint(&path, &m, &CheckpointHeader::for_model(&m)).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model.config, m.config);
    }
}
