//! Corpus directory layout: `corpus.json` indexing one subdirectory per
//! layer, each holding a tensor container with `weight`, `calib` and `eval`
//! entries.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use lrq_core::batch::{ActivationBatch, WeightMatrix};
use lrq_core::tensorio::{load_tensor, ManifestWriter, TensorData};

pub const TENSOR_STEM: &str = "tensors";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusLayer {
    pub name: String,
    pub dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub layers: Vec<CorpusLayer>,
}

pub fn write_index(dir: &Path, index: &CorpusIndex) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("corpus.json");
    std::fs::write(&path, serde_json::to_string_pretty(index)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_index(dir: &Path) -> anyhow::Result<CorpusIndex> {
    let path = dir.join("corpus.json");
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn layer_manifest(corpus: &Path, layer: &CorpusLayer) -> PathBuf {
    corpus
        .join(&layer.dir)
        .join(format!("{TENSOR_STEM}.manifest.json"))
}

/// Save a layer's tensors; activations are stored with their `[B, N, C]`
/// shape, weights as `[rows, cols]`.
pub fn save_layer_tensors(
    dir: &Path,
    weight: &WeightMatrix,
    calib: &ActivationBatch,
    eval: &ActivationBatch,
) -> anyhow::Result<PathBuf> {
    let mut w = ManifestWriter::new(dir, TENSOR_STEM);
    w.add("weight", &TensorData::Real(weight.clone().into_dyn()))?;
    w.add("calib", &batch_tensor(calib))?;
    w.add("eval", &batch_tensor(eval))?;
    Ok(w.finish()?)
}

fn batch_tensor(batch: &ActivationBatch) -> TensorData {
    let (rows, channels) = batch.tokens().dim();
    let flat: Vec<f64> = batch.tokens().iter().copied().collect();
    let shaped = ArrayD::from_shape_vec(
        IxDyn(&[batch.batches(), batch.tokens_per_batch(), channels]),
        flat,
    )
    .expect("token matrix is (B*N) x C");
    debug_assert_eq!(rows, batch.batches() * batch.tokens_per_batch());
    TensorData::Real(shaped)
}

pub fn load_weight(manifest: &Path) -> anyhow::Result<WeightMatrix> {
    let t = load_tensor(manifest, "weight")?.into_real()?;
    Ok(t.into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| anyhow::anyhow!("weight tensor in {} is not 2-D", manifest.display()))?)
}

pub fn load_batch(manifest: &Path, name: &str) -> anyhow::Result<ActivationBatch> {
    let t = load_tensor(manifest, name)?.into_real()?;
    let dims = t.shape().to_vec();
    if dims.len() != 3 {
        bail!(
            "activation tensor '{name}' in {} must be [B, N, C], got {dims:?}",
            manifest.display()
        );
    }
    let (b, n, c) = (dims[0], dims[1], dims[2]);
    let flat: Vec<f64> = t.iter().copied().collect();
    let tokens = Array2::from_shape_vec((b * n, c), flat).expect("checked dims");
    Ok(ActivationBatch::new(b, n, tokens)?)
}
