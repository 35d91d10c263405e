//! Checkpoint archive: a tar file holding `config.json` (model config,
//! format version, training history, weights checksum) and
//! `weights.safetensors`.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backbone::{Backbone, Conv3x3};
use super::head::{Dense, Head};
use super::{EpochRecord, Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const CONFIG_ENTRY: &str = "config.json";
const WEIGHTS_ENTRY: &str = "weights.safetensors";

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    format_version: u32,
    model_config: ModelConfig,
    train_history: Vec<EpochRecord>,
    weights_sha256: String,
}

struct Tensor {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn f32_tensor(name: String, shape: Vec<usize>, data: &[f32]) -> Tensor {
    Tensor {
        name,
        dtype: Dtype::F32,
        shape,
        bytes: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
    }
}

fn f64_tensor(name: String, shape: Vec<usize>, data: &[f64]) -> Tensor {
    Tensor {
        name,
        dtype: Dtype::F64,
        shape,
        bytes: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
    }
}

const HEAD_LAYERS: [&str; 3] = ["hidden1", "hidden2", "output"];

fn weights_blob(model: &Model) -> Vec<u8> {
    let mut tensors = Vec::new();
    for (i, conv) in model.backbone().convs().iter().enumerate() {
        let w = conv.weight.as_standard_layout();
        tensors.push(f32_tensor(
            format!("backbone.{i:02}.weight"),
            vec![conv.weight.nrows(), conv.weight.ncols()],
            w.as_slice().expect("standard layout"),
        ));
        tensors.push(f32_tensor(
            format!("backbone.{i:02}.bias"),
            vec![conv.bias.len()],
            conv.bias.as_slice().expect("contiguous"),
        ));
    }
    for (name, layer) in HEAD_LAYERS.iter().zip(model.head().layers()) {
        let w = layer.weight.as_standard_layout();
        tensors.push(f64_tensor(
            format!("head.{name}.weight"),
            vec![layer.weight.nrows(), layer.weight.ncols()],
            w.as_slice().expect("standard layout"),
        ));
        tensors.push(f64_tensor(
            format!("head.{name}.bias"),
            vec![layer.bias.len()],
            layer.bias.as_slice().expect("contiguous"),
        ));
    }
    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|t| {
            let view = TensorView::new(t.dtype, t.shape.clone(), &t.bytes).expect("consistent tensor");
            (t.name.clone(), view)
        })
        .collect();
    safetensors::serialize(views, &None).expect("serializable tensors")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Model {
    /// SHA-256 of the serialized weights; identifies the exact parameters.
    pub fn checksum(&self) -> String {
        sha256_hex(&weights_blob(self))
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let blob = weights_blob(model);
    let config = CheckpointConfig {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model_config: model.config().clone(),
        train_history: model.history().to_vec(),
        weights_sha256: sha256_hex(&blob),
    };
    let config_json =
        serde_json::to_vec_pretty(&config).map_err(|e| Error::json("checkpoint config", e))?;

    let mut builder = tar::Builder::new(Vec::new());
    for (name, data) in [(CONFIG_ENTRY, config_json.as_slice()), (WEIGHTS_ENTRY, blob.as_slice())] {
        let mut header = tar::Header::new_gnu();
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_cksum();
        builder
            .append_data(&mut header, name, data)
            .map_err(|e| Error::io(path, e))?;
    }
    let archive = builder.into_inner().map_err(|e| Error::io(path, e))?;

    let tmp = path.with_extension("tmp");
    fs::write(&tmp, archive).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_entries(path: &Path) -> Result<HashMap<String, Vec<u8>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |e: std::io::Error| Error::Checksum(format!("{}: corrupt archive: {e}", path.display()));
    let mut archive = tar::Archive::new(file);
    let mut entries = HashMap::new();
    for entry in archive.entries().map_err(corrupt)? {
        let mut entry = entry.map_err(corrupt)?;
        let name = entry.path().map_err(corrupt)?.to_string_lossy().into_owned();
        let mut data = Vec::with_capacity(entry.size() as usize);
        entry.read_to_end(&mut data).map_err(corrupt)?;
        if data.len() as u64 != entry.size() {
            return Err(Error::Checksum(format!("{}: truncated entry {name}", path.display())));
        }
        entries.insert(name, data);
    }
    Ok(entries)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut entries = read_entries(path)?;
    let missing = |name: &str| Error::Checksum(format!("{}: archive lacks {name}", path.display()));
    let config_bytes = entries.remove(CONFIG_ENTRY).ok_or_else(|| missing(CONFIG_ENTRY))?;

    #[derive(Deserialize)]
    struct VersionProbe {
        format_version: u32,
    }
    let probe: VersionProbe = serde_json::from_slice(&config_bytes)
        .map_err(|e| Error::Checksum(format!("{}: unreadable config: {e}", path.display())))?;
    if probe.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Version {
            found: probe.format_version,
            supported: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let config: CheckpointConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| Error::Checksum(format!("{}: unreadable config: {e}", path.display())))?;

    let blob = entries.remove(WEIGHTS_ENTRY).ok_or_else(|| missing(WEIGHTS_ENTRY))?;
    let actual = sha256_hex(&blob);
    if actual != config.weights_sha256 {
        return Err(Error::Checksum(format!(
            "{}: weights sha256 {actual} does not match recorded {}",
            path.display(),
            config.weights_sha256
        )));
    }
    let tensors = SafeTensors::deserialize(&blob)
        .map_err(|e| Error::Checksum(format!("{}: bad weights blob: {e}", path.display())))?;

    let bad = |name: &str| Error::Checksum(format!("{}: bad tensor {name}", path.display()));
    let conv_count = tensors
        .names()
        .iter()
        .filter(|n| n.starts_with("backbone.") && n.ends_with(".weight"))
        .count();
    let mut convs = Vec::with_capacity(conv_count);
    for i in 0..conv_count {
        let wname = format!("backbone.{i:02}.weight");
        let bname = format!("backbone.{i:02}.bias");
        let (wshape, w) = read_f32(&tensors, &wname).ok_or_else(|| bad(&wname))?;
        let (_, b) = read_f32(&tensors, &bname).ok_or_else(|| bad(&bname))?;
        convs.push(Conv3x3 {
            weight: Array2::from_shape_vec((wshape[0], wshape[1]), w).map_err(|_| bad(&wname))?,
            bias: Array1::from_vec(b),
        });
    }
    let mut layers = Vec::with_capacity(3);
    for name in HEAD_LAYERS {
        let wname = format!("head.{name}.weight");
        let bname = format!("head.{name}.bias");
        let (wshape, w) = read_f64(&tensors, &wname).ok_or_else(|| bad(&wname))?;
        let (_, b) = read_f64(&tensors, &bname).ok_or_else(|| bad(&bname))?;
        layers.push(Dense {
            weight: Array2::from_shape_vec((wshape[0], wshape[1]), w).map_err(|_| bad(&wname))?,
            bias: Array1::from_vec(b),
        });
    }
    let mut layers = layers.into_iter();
    let head = Head {
        hidden1: layers.next().expect("three layers"),
        hidden2: layers.next().expect("three layers"),
        output: layers.next().expect("three layers"),
    };
    let backbone = Backbone::from_parts(config.model_config.backbone.clone(), convs);
    Ok(Model::from_parts(
        config.model_config,
        backbone,
        head,
        config.train_history,
    ))
}

fn read_f32(tensors: &SafeTensors<'_>, name: &str) -> Option<(Vec<usize>, Vec<f32>)> {
    let view = tensors.tensor(name).ok()?;
    (view.dtype() == Dtype::F32 && view.shape().len() <= 2).then(|| {
        let data = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        (view.shape().to_vec(), data)
    })
}

fn read_f64(tensors: &SafeTensors<'_>, name: &str) -> Option<(Vec<usize>, Vec<f64>)> {
    let view = tensors.tensor(name).ok()?;
    (view.dtype() == Dtype::F64 && view.shape().len() <= 2).then(|| {
        let data = view
            .data()
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        (view.shape().to_vec(), data)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{build_model, train, TrainConfig};
    use crate::dataset::Split;
    use crate::synthetic::tiny_dataset;

    fn trained() -> (tempfile::TempDir, crate::dataset::DatasetManifest, Model) {
        let (dir, m) = tiny_dataset(2);
        let model = build_model(&ModelConfig::compact(32, 2, (4, 3)), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..Default::default()
        };
        let (model, _) = train(model, &m.split_samples(Split::Train), &cfg, &[]).unwrap();
        (dir, m, model)
    }

    #[test]
    fn round_trip_preserves_weights_history_and_predictions() {
        let (dir, m, model) = trained();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.checksum(), model.checksum());
        let test = m.split_samples(Split::Test);
        assert_eq!(back.predict_proba(&test).unwrap(), model.predict_proba(&test).unwrap());
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let (dir, _m, model) = trained();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save_checkpoint(&model, &a).unwrap();
        save_checkpoint(&model, &b).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    fn rewrite(path: &Path, edit: impl FnOnce(&mut serde_json::Value)) {
        let mut entries = read_entries(path).unwrap();
        let mut cfg: serde_json::Value = serde_json::from_slice(&entries[CONFIG_ENTRY]).unwrap();
        edit(&mut cfg);
        entries.insert(CONFIG_ENTRY.into(), serde_json::to_vec(&cfg).unwrap());
        let mut builder = tar::Builder::new(Vec::new());
        for name in [CONFIG_ENTRY, WEIGHTS_ENTRY] {
            let data = &entries[name];
            let mut header = tar::Header::new_gnu();
            header.set_size(data.len() as u64);
            header.set_cksum();
            builder.append_data(&mut header, name, data.as_slice()).unwrap();
        }
        fs::write(path, builder.into_inner().unwrap()).unwrap();
    }

    #[test]
    fn future_format_version_is_rejected() {
        let (dir, _m, model) = trained();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        rewrite(&path, |cfg| cfg["format_version"] = 2.into());
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Version { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn tampered_and_truncated_files_fail_checksum() {
        let (dir, _m, model) = trained();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        rewrite(&path, |cfg| cfg["weights_sha256"] = "00".into());
        assert!(matches!(load_checkpoint(&path), Err(Error::Checksum(_))));

        save_checkpoint(&model, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checksum(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_checkpoint(&dir.path().join("nope.ckpt")),
            Err(Error::Io { .. })
        ));
    }
}
