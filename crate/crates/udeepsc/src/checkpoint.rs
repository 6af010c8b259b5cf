//! Single-file binary checkpoint: a versioned JSON manifest followed by the
//! raw parameter (and optimizer) data in little-endian f64.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::AdamW;
use crate::scalar::Scalar;
use crate::tasks::{TaskId, TaskRegistry};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"UDSCCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    model_config: ModelConfig,
    task_ids: Vec<TaskId>,
    data_seed: u64,
    master_seed: u64,
    step: u64,
    precision: String,
    params: Vec<(String, usize, usize)>,
    has_optimizer: bool,
    optimizer_step: u64,
    train_config: Option<serde_json::Value>,
}

/// In-memory checkpoint contents, precision-erased to f64.
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub task_ids: Vec<TaskId>,
    pub data_seed: u64,
    pub master_seed: u64,
    pub step: u64,
    pub precision: String,
    pub train_config: Option<serde_json::Value>,
    pub params: Vec<(String, Array2<f64>)>,
    pub opt: Option<OptState>,
}

/// Optimizer moments plus the update count.
pub type OptState = (Vec<Array2<f64>>, Vec<Array2<f64>>, u64);

fn write_mats(out: &mut Vec<u8>, mats: impl Iterator<Item = Array2<f64>>) {
    for m in mats {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_mat(data: &[u8], at: &mut usize, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let need = rows * cols * 8;
    if *at + need > data.len() {
        return Err(Error::Checkpoint("truncated parameter data".into()));
    }
    let mut m = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&data[*at..*at + 8]);
            m[[r, c]] = f64::from_le_bytes(buf);
            *at += 8;
        }
    }
    Ok(m)
}

/// Save a model (and optionally its optimizer) to one binary archive.
pub fn save<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    opt: Option<&AdamW<T>>,
    data_seed: u64,
    master_seed: u64,
    step: u64,
    train_config: Option<serde_json::Value>,
) -> Result<()> {
    let manifest = Manifest {
        version: VERSION,
        model_config: model.config.clone(),
        task_ids: model.registry.ids(),
        data_seed,
        master_seed,
        step,
        precision: std::any::type_name::<T>().to_string(),
        params: model
            .params
            .iter()
            .map(|(n, v)| (n.to_string(), v.nrows(), v.ncols()))
            .collect(),
        has_optimizer: opt.is_some(),
        optimizer_step: opt.map(|o| o.step_count).unwrap_or(0),
        train_config,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut blob = Vec::new();
    write_mats(
        &mut blob,
        model.params.iter().map(|(_, v)| v.mapv(|x| x.to_f64_lossy())),
    );
    if let Some(opt) = opt {
        let (m, v, _) = opt.state();
        write_mats(&mut blob, m.iter().map(|a| a.mapv(|x| x.to_f64_lossy())));
        write_mats(&mut blob, v.iter().map(|a| a.mapv(|x| x.to_f64_lossy())));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&manifest_bytes)?;
        f.write_all(&blob)?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Load an archive into an in-memory checkpoint.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[0..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint archive".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "archive version {version}, expected {VERSION}"
        )));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if 20 + mlen > bytes.len() {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[20..20 + mlen])?;
    let mut at = 20 + mlen;
    let mut params = Vec::with_capacity(manifest.params.len());
    for (name, rows, cols) in &manifest.params {
        params.push((name.clone(), read_mat(&bytes, &mut at, *rows, *cols)?));
    }
    let opt = if manifest.has_optimizer {
        let mut m = Vec::with_capacity(manifest.params.len());
        for (_, rows, cols) in &manifest.params {
            m.push(read_mat(&bytes, &mut at, *rows, *cols)?);
        }
        let mut v = Vec::with_capacity(manifest.params.len());
        for (_, rows, cols) in &manifest.params {
            v.push(read_mat(&bytes, &mut at, *rows, *cols)?);
        }
        Some((m, v, manifest.optimizer_step))
    } else {
        None
    };
    Ok(Checkpoint {
        model_config: manifest.model_config,
        task_ids: manifest.task_ids,
        data_seed: manifest.data_seed,
        master_seed: manifest.master_seed,
        step: manifest.step,
        precision: manifest.precision,
        train_config: manifest.train_config,
        params,
        opt,
    })
}

/// Rebuild the model (and optimizer state, if stored) from a checkpoint.
pub fn restore_model<T: Scalar>(ckpt: &Checkpoint) -> Result<(Model<T>, Option<AdamW<T>>)> {
    let registry = TaskRegistry::subset(
        ckpt.data_seed,
        ckpt.model_config.dec_layers,
        &ckpt.task_ids,
    );
    let mut model = Model::<T>::new(ckpt.model_config.clone(), registry)?;
    if model.params.len() != ckpt.params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: model {} vs archive {}",
            model.params.len(),
            ckpt.params.len()
        )));
    }
    for (i, (name, values)) in ckpt.params.iter().enumerate() {
        let id = crate::nn::ParamId(i);
        if model.params.name(id) != name {
            return Err(Error::Checkpoint(format!(
                "parameter {i} is {} in the model but {name} in the archive",
                model.params.name(id)
            )));
        }
        if model.params.value(id).dim() != values.dim() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?} vs archived {:?}",
                model.params.value(id).dim(),
                values.dim()
            )));
        }
        *model.params.value_mut(id) = values.mapv(crate::scalar::s::<T>);
    }
    let opt = ckpt.opt.as_ref().map(|(m, v, t)| {
        let mut adam = AdamW::new(&model.params, 1e-4, 0.0, None);
        adam.restore(
            m.iter().map(|a| a.mapv(crate::scalar::s::<T>)).collect(),
            v.iter().map(|a| a.mapv(crate::scalar::s::<T>)).collect(),
            *t,
        );
        adam
    });
    Ok((model, opt))
}
