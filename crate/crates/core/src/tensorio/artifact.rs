//! Artifact containers: quantized weights, shift forms, rotation plans,
//! smoothing vectors.
//!
//! Element-wise data (codes, masks, exponents, residuals, rotation blocks,
//! permutations) is stored as binary entries in the container dtypes;
//! per-channel scalar parameters are embedded in the manifest's `artifact`
//! object as JSON numbers, which round-trip f64 bit-exactly. Rotation blocks
//! are f32-representable by construction, so their real32 entries round-trip
//! bit-exactly too.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intpipe::{ShiftArtifact, ShiftConfig};
use crate::rotation::{
    is_valid_permutation, BlockDiag, DualTransform, RotationKind, RotationPlan, SmoothingVector,
    Transform,
};
use crate::tensorio::manifest::{ManifestWriter, TensorData, TensorManifest};
use crate::twinlog::{ChannelParams, SignMasks, TwinLogArtifact};
use crate::uniquant::{UniformArtifact, UniformParams};

const ORTHOGONALITY_TOL: f64 = 1e-5;

/// Any artifact the container can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    TwinLog(TwinLogArtifact),
    Shift(ShiftArtifact),
    Rotation(RotationPlan),
    Uniform(UniformArtifact),
    Smoothing(SmoothingVector),
}

impl Artifact {
    fn kind_prefix(&self) -> &'static str {
        match self {
            Artifact::TwinLog(_) => "twinlog",
            Artifact::Shift(_) => "shift",
            Artifact::Rotation(_) => "rotation",
            Artifact::Uniform(_) => "uniform",
            Artifact::Smoothing(_) => "smoothing",
        }
    }
}

impl From<TwinLogArtifact> for Artifact {
    fn from(a: TwinLogArtifact) -> Self {
        Artifact::TwinLog(a)
    }
}
impl From<ShiftArtifact> for Artifact {
    fn from(a: ShiftArtifact) -> Self {
        Artifact::Shift(a)
    }
}
impl From<RotationPlan> for Artifact {
    fn from(a: RotationPlan) -> Self {
        Artifact::Rotation(a)
    }
}
impl From<UniformArtifact> for Artifact {
    fn from(a: UniformArtifact) -> Self {
        Artifact::Uniform(a)
    }
}
impl From<SmoothingVector> for Artifact {
    fn from(a: SmoothingVector) -> Self {
        Artifact::Smoothing(a)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockMeta {
    start: usize,
    size: usize,
    /// Identity blocks carry no tensor entry.
    stored: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ArtifactMeta {
    Twinlog {
        bits: u32,
        params: Vec<ChannelParams>,
    },
    Shift {
        precision: u32,
    },
    Rotation {
        transform: RotationKind,
        channels: usize,
        block_size: usize,
        threshold: f64,
        j_observed: f64,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        r1_blocks: Vec<BlockMeta>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        r2_blocks: Vec<BlockMeta>,
    },
    Uniform {
        bits: u32,
        params: Vec<UniformParams>,
    },
    Smoothing {
        migration_strength: f64,
        d: Vec<f64>,
    },
}

// ── encoding helpers ────────────────────────────────────────────────────────

fn bits_tensor(m: &Array2<bool>) -> TensorData {
    TensorData::Bit(m.clone().into_dyn())
}

fn bytes_tensor(m: &Array2<u32>) -> Result<TensorData> {
    let mut out = ArrayD::<u8>::zeros(IxDyn(&[m.nrows(), m.ncols()]));
    for ((r, c), &v) in m.indexed_iter() {
        if v > u8::MAX as u32 {
            return Err(Error::InvalidParam(format!(
                "code {v} does not fit a byte entry"
            )));
        }
        out[[r, c]] = v as u8;
    }
    Ok(TensorData::Byte(out))
}

fn i32_tensor_from_u32(m: &Array2<u32>) -> Result<TensorData> {
    let mut out = ArrayD::<i32>::zeros(IxDyn(&[m.nrows(), m.ncols()]));
    for ((r, c), &v) in m.indexed_iter() {
        if v > i32::MAX as u32 {
            return Err(Error::InvalidParam(format!("value {v} overflows int32")));
        }
        out[[r, c]] = v as i32;
    }
    Ok(TensorData::Int(out))
}

fn i32_tensor_from_i32(m: &Array2<i32>) -> TensorData {
    TensorData::Int(m.clone().into_dyn())
}

fn real_tensor(m: &Array2<f64>) -> TensorData {
    TensorData::Real(m.clone().into_dyn())
}

fn as_bool2(t: TensorData, what: &str) -> Result<Array2<bool>> {
    match t {
        TensorData::Bit(a) => a
            .into_dimensionality()
            .map_err(|_| Error::DimMismatch(format!("{what} is not 2-D"))),
        _ => Err(Error::Manifest {
            path: PathBuf::new(),
            message: format!("{what} must be a bit tensor"),
        }),
    }
}

fn as_u32_from_bytes(t: TensorData, what: &str) -> Result<Array2<u32>> {
    match t {
        TensorData::Byte(a) => {
            let a: Array2<u8> = a
                .into_dimensionality()
                .map_err(|_| Error::DimMismatch(format!("{what} is not 2-D")))?;
            Ok(a.mapv(|v| v as u32))
        }
        _ => Err(Error::Manifest {
            path: PathBuf::new(),
            message: format!("{what} must be a uint8 tensor"),
        }),
    }
}

fn as_u32_from_i32(t: TensorData, what: &str) -> Result<Array2<u32>> {
    let a = as_i32(t, what)?;
    let mut out = Array2::<u32>::zeros(a.dim());
    for ((r, c), &v) in a.indexed_iter() {
        if v < 0 {
            return Err(Error::Manifest {
                path: PathBuf::new(),
                message: format!("{what} holds negative value {v}"),
            });
        }
        out[[r, c]] = v as u32;
    }
    Ok(out)
}

fn as_i32(t: TensorData, what: &str) -> Result<Array2<i32>> {
    match t {
        TensorData::Int(a) => a
            .into_dimensionality()
            .map_err(|_| Error::DimMismatch(format!("{what} is not 2-D"))),
        _ => Err(Error::Manifest {
            path: PathBuf::new(),
            message: format!("{what} must be an int32 tensor"),
        }),
    }
}

fn as_real2(t: TensorData, what: &str) -> Result<Array2<f64>> {
    match t {
        TensorData::Real(a) => a
            .into_dimensionality()
            .map_err(|_| Error::DimMismatch(format!("{what} is not 2-D"))),
        _ => Err(Error::Manifest {
            path: PathBuf::new(),
            message: format!("{what} must be a real32 tensor"),
        }),
    }
}

fn add_masks(w: &mut ManifestWriter, masks: &SignMasks) -> Result<()> {
    w.add("mask_pos", &bits_tensor(&masks.pos))?;
    w.add("mask_neg", &bits_tensor(&masks.neg))?;
    w.add("mask_zero", &bits_tensor(&masks.zero))
}

fn block_metas(b: &BlockDiag) -> Vec<BlockMeta> {
    b.blocks()
        .map(|(start, size, block)| BlockMeta {
            start,
            size,
            stored: block.is_some(),
        })
        .collect()
}

fn add_blockdiag(w: &mut ManifestWriter, prefix: &str, b: &BlockDiag) -> Result<()> {
    for (i, (_, _, block)) in b.blocks().enumerate() {
        if let Some(m) = block {
            w.add(&format!("{prefix}.{i}"), &real_tensor(m))?;
        }
    }
    Ok(())
}

// ── save ────────────────────────────────────────────────────────────────────

/// Pick the first unused `<kind>-NNN` stem so several artifacts can share a
/// directory with distinct manifests.
fn unique_stem(dir: &Path, prefix: &str) -> String {
    let mut n = 0usize;
    loop {
        let stem = format!("{prefix}-{n:03}");
        if !dir.join(format!("{stem}.manifest.json")).exists() {
            return stem;
        }
        n += 1;
    }
}

/// Serialize an artifact into `dir`; returns the manifest path. Round-trip
/// loading reproduces the artifact bit-exactly.
pub fn save_artifact(artifact: &Artifact, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = unique_stem(dir, artifact.kind_prefix());
    let mut w = ManifestWriter::new(dir, &stem);
    let meta = match artifact {
        Artifact::TwinLog(a) => {
            w.add("codes", &bytes_tensor(&a.codes)?)?;
            add_masks(&mut w, &a.masks)?;
            ArtifactMeta::Twinlog {
                bits: a.bits,
                params: a.params.clone(),
            }
        }
        Artifact::Shift(a) => {
            w.add("f_pos", &i32_tensor_from_i32(&a.f_pos))?;
            w.add("f_neg", &i32_tensor_from_i32(&a.f_neg))?;
            w.add("res_pos", &i32_tensor_from_u32(&a.res_pos)?)?;
            w.add("res_neg", &i32_tensor_from_u32(&a.res_neg)?)?;
            add_masks(&mut w, &a.masks)?;
            ArtifactMeta::Shift {
                precision: a.config.precision,
            }
        }
        Artifact::Rotation(p) => {
            let (r1_blocks, r2_blocks) = match &p.transform {
                Transform::Dual(d) => {
                    add_blockdiag(&mut w, "r1", &d.r1)?;
                    add_blockdiag(&mut w, "r2", &d.r2)?;
                    let perm: Vec<i32> = d.perm.iter().map(|&i| i as i32).collect();
                    let perm =
                        Array2::from_shape_vec((1, perm.len()), perm).expect("shape matches");
                    w.add("perm", &i32_tensor_from_i32(&perm))?;
                    (block_metas(&d.r1), block_metas(&d.r2))
                }
                _ => (Vec::new(), Vec::new()),
            };
            ArtifactMeta::Rotation {
                transform: p.kind(),
                channels: p.channels,
                block_size: p.block_size,
                threshold: p.threshold,
                j_observed: p.j_observed,
                r1_blocks,
                r2_blocks,
            }
        }
        Artifact::Uniform(a) => {
            w.add("codes", &i32_tensor_from_u32(&a.codes)?)?;
            ArtifactMeta::Uniform {
                bits: a.bits,
                params: a.params.clone(),
            }
        }
        Artifact::Smoothing(s) => ArtifactMeta::Smoothing {
            migration_strength: s.migration_strength,
            d: s.d.clone(),
        },
    };
    w.set_artifact(serde_json::to_value(&meta).expect("artifact metadata serializes"));
    w.finish()
}

// ── load ────────────────────────────────────────────────────────────────────

struct EntryReader<'a> {
    manifest: &'a TensorManifest,
    dir: &'a Path,
    manifest_path: &'a Path,
}

impl EntryReader<'_> {
    fn get(&self, name: &str) -> Result<TensorData> {
        let entry = self
            .manifest
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::UnknownTensor {
                name: name.to_string(),
                path: self.manifest_path.to_path_buf(),
            })?;
        super::manifest::decode_entry_in(self.dir, entry)
    }

    fn masks(&self) -> Result<SignMasks> {
        let masks = SignMasks {
            pos: as_bool2(self.get("mask_pos")?, "mask_pos")?,
            neg: as_bool2(self.get("mask_neg")?, "mask_neg")?,
            zero: as_bool2(self.get("mask_zero")?, "mask_zero")?,
        };
        masks.validate()?;
        Ok(masks)
    }

    fn blockdiag(&self, prefix: &str, metas: &[BlockMeta]) -> Result<BlockDiag> {
        let mut parts = Vec::with_capacity(metas.len());
        for (i, meta) in metas.iter().enumerate() {
            let block = if meta.stored {
                Some(as_real2(
                    self.get(&format!("{prefix}.{i}"))?,
                    &format!("{prefix}.{i}"),
                )?)
            } else {
                None
            };
            parts.push((meta.start, meta.size, block));
        }
        let b = BlockDiag::from_blocks(parts)?;
        if b.orthogonality_deviation() >= ORTHOGONALITY_TOL {
            return Err(Error::Manifest {
                path: self.manifest_path.to_path_buf(),
                message: format!("{prefix} blocks are not orthogonal within {ORTHOGONALITY_TOL}"),
            });
        }
        Ok(b)
    }
}

/// Load any artifact back from its manifest.
pub fn load_artifact(manifest_path: &Path) -> Result<Artifact> {
    let manifest = super::manifest::read_manifest(manifest_path)?;
    let meta_value = manifest.artifact.clone().ok_or_else(|| Error::Manifest {
        path: manifest_path.to_path_buf(),
        message: "manifest carries no artifact metadata".into(),
    })?;
    let meta: ArtifactMeta =
        serde_json::from_value(meta_value).map_err(|e| Error::Parse {
            path: manifest_path.to_path_buf(),
            source: e,
        })?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let reader = EntryReader {
        manifest: &manifest,
        dir,
        manifest_path,
    };
    Ok(match meta {
        ArtifactMeta::Twinlog { bits, params } => {
            let codes = as_u32_from_bytes(reader.get("codes")?, "codes")?;
            let masks = reader.masks()?;
            if codes.dim() != masks.dims() || params.len() != codes.nrows() {
                return Err(Error::MaskInconsistency(
                    "twinlog artifact shapes disagree".into(),
                ));
            }
            Artifact::TwinLog(TwinLogArtifact {
                bits,
                codes,
                masks,
                params,
            })
        }
        ArtifactMeta::Shift { precision } => {
            let artifact = ShiftArtifact {
                config: ShiftConfig::new(precision)?,
                masks: reader.masks()?,
                f_pos: as_i32(reader.get("f_pos")?, "f_pos")?,
                f_neg: as_i32(reader.get("f_neg")?, "f_neg")?,
                res_pos: as_u32_from_i32(reader.get("res_pos")?, "res_pos")?,
                res_neg: as_u32_from_i32(reader.get("res_neg")?, "res_neg")?,
            };
            artifact.validate_residual_range()?;
            Artifact::Shift(artifact)
        }
        ArtifactMeta::Rotation {
            transform,
            channels,
            block_size,
            threshold,
            j_observed,
            r1_blocks,
            r2_blocks,
        } => {
            let transform = match transform {
                RotationKind::Identity => Transform::Identity,
                RotationKind::Hadamard => Transform::Hadamard,
                RotationKind::Dual => {
                    let r1 = reader.blockdiag("r1", &r1_blocks)?;
                    let r2 = reader.blockdiag("r2", &r2_blocks)?;
                    let perm = as_i32(reader.get("perm")?, "perm")?;
                    let perm: Vec<usize> = perm.iter().map(|&v| v as usize).collect();
                    if !is_valid_permutation(&perm) || perm.len() != channels {
                        return Err(Error::Manifest {
                            path: manifest_path.to_path_buf(),
                            message: "perm is not a valid permutation".into(),
                        });
                    }
                    Transform::Dual(DualTransform { r1, perm, r2 })
                }
            };
            Artifact::Rotation(RotationPlan {
                channels,
                block_size,
                threshold,
                j_observed,
                transform,
            })
        }
        ArtifactMeta::Uniform { bits, params } => {
            let codes = as_u32_from_i32(reader.get("codes")?, "codes")?;
            if params.len() != codes.nrows() {
                return Err(Error::DimMismatch(
                    "uniform artifact param count disagrees with rows".into(),
                ));
            }
            Artifact::Uniform(UniformArtifact {
                bits,
                codes,
                params,
            })
        }
        ArtifactMeta::Smoothing {
            migration_strength,
            d,
        } => Artifact::Smoothing(SmoothingVector {
            d,
            migration_strength,
        }),
    })
}
