//! Image codecs and checkpoint persistence.
//!
//! A checkpoint is a directory holding `meta.json` (format tag, schedule,
//! configuration, training state and a SHA-256 per blob) next to one raw
//! little-endian `f32` blob per generator part, one for the critic and one
//! for the training image.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::model::{GrowingGenerator, PatchCritic};
use crate::pyramid::PyramidSpec;
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, TrainState, Trainer};
use crate::Rng;

pub const CHECKPOINT_FORMAT: &str = "consingan-ckpt-v1";
const META_FILE: &str = "meta.json";

/// Loads a PNG or JPEG as a `[3,H,W]` tensor in `[-1, 1]`. Grayscale and
/// alpha inputs are converted to RGB.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

/// Maps `[-1, 1]` back to 8 bits (round half to even) and writes the format
/// implied by the extension.
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = image.chw();
    if c != 3 {
        return Err(Error::invalid(format!("can only save RGB images, got {c} channels")));
    }
    let d = image.data();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|ch| to_u8(d[ch * h * w + i])))
    });
    let tmp = temp_sibling(path);
    buf.save(&tmp).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(&tmp, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round_ties_even() as u8
}

/// `dir/.name.tmp` next to the target, keeping the target's extension so
/// encoders can infer the format.
fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".tmp-{name}"))
}

/// Writes `bytes` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = temp_sibling(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobMeta {
    pub file: String,
    pub sha256: String,
    pub shapes: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub stage_count: usize,
    pub channels: usize,
    pub noise_amp: f32,
    pub seed: u64,
    pub pyramid: PyramidSpec,
    pub config: TrainConfig,
    pub state: TrainState,
    pub stem: BlobMeta,
    pub stages: Vec<BlobMeta>,
    pub head: BlobMeta,
    pub critic: BlobMeta,
    pub image: BlobMeta,
}

/// Self-contained training snapshot.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub spec: PyramidSpec,
    pub image: Tensor,
    pub generator: GrowingGenerator,
    pub critic: PatchCritic,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn of(trainer: &Trainer) -> Checkpoint {
        Checkpoint {
            config: trainer.cfg.clone(),
            spec: trainer.spec.clone(),
            image: trainer.image().clone(),
            generator: trainer.generator.clone(),
            critic: trainer.critic.clone(),
            state: trainer.state.clone(),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        Trainer::from_parts(
            self.config,
            self.spec,
            &self.image,
            self.generator,
            self.critic,
            self.state,
        )
    }
}

fn encode(tensors: &[&Tensor]) -> (Vec<u8>, Vec<Vec<usize>>) {
    let mut bytes = Vec::with_capacity(tensors.iter().map(|t| t.len() * 4).sum());
    for t in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (bytes, tensors.iter().map(|t| t.shape().to_vec()).collect())
}

fn blob(dir: &Path, file: &str, tensors: &[&Tensor]) -> Result<BlobMeta> {
    let (bytes, shapes) = encode(tensors);
    let path = dir.join(file);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(BlobMeta {
        file: file.to_string(),
        sha256: sha256_hex(&bytes),
        shapes,
    })
}

fn values(vars: Vec<&Var>) -> Vec<&Tensor> {
    vars.into_iter().map(Var::value).collect()
}

/// Writes the checkpoint into a temporary sibling directory and renames it
/// into place, replacing any previous checkpoint at `dir`.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::invalid(format!("checkpoint path {} has no name", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = dir.parent().map(Path::to_path_buf).unwrap_or_default();
    if !parent.as_os_str().is_empty() {
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    }
    let tmp = parent.join(format!(".tmp-{name}"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let g = &ckpt.generator;
    let stem = blob(&tmp, "stem.bin", &values(g.stem.params()))?;
    let stages = g
        .stages
        .iter()
        .enumerate()
        .map(|(s, stage)| blob(&tmp, &format!("stage_{s:03}.bin"), &values(stage.params())))
        .collect::<Result<Vec<_>>>()?;
    let head = blob(&tmp, "head.bin", &values(g.head_params()))?;
    let critic = blob(&tmp, "critic.bin", &values(ckpt.critic.params()))?;
    let image = blob(&tmp, "image.bin", &[&ckpt.image])?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.to_string(),
        stage_count: g.stage_count(),
        channels: g.channels,
        noise_amp: g.noise_amp,
        seed: ckpt.config.seed,
        pyramid: ckpt.spec.clone(),
        config: ckpt.config.clone(),
        state: ckpt.state.clone(),
        stem,
        stages,
        head,
        critic,
        image,
    };
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::Internal(e.to_string()))?;
    let meta_path = tmp.join(META_FILE);
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn corrupt(dir: &Path, message: impl Into<String>) -> Error {
    Error::Corrupt {
        path: dir.to_path_buf(),
        message: message.into(),
    }
}

fn read_blob(dir: &Path, meta: &BlobMeta) -> Result<Vec<Tensor>> {
    let path = dir.join(&meta.file);
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => corrupt(dir, format!("missing blob {}", meta.file)),
        _ => Error::io(&path, e),
    })?;
    if sha256_hex(&bytes) != meta.sha256 {
        return Err(corrupt(dir, format!("hash mismatch in {}", meta.file)));
    }
    let expected: usize = meta.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if bytes.len() != expected * 4 {
        return Err(corrupt(
            dir,
            format!("{} holds {} bytes, expected {}", meta.file, bytes.len(), expected * 4),
        ));
    }
    let mut floats = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    Ok(meta
        .shapes
        .iter()
        .map(|shape| {
            let n = shape.iter().product();
            Tensor::new(shape.clone(), floats.by_ref().take(n).collect())
        })
        .collect())
}

fn assign(dir: &Path, what: &str, targets: Vec<&mut Var>, values: Vec<Tensor>) -> Result<()> {
    if targets.len() != values.len() {
        return Err(corrupt(
            dir,
            format!("{what}: {} tensors, expected {}", values.len(), targets.len()),
        ));
    }
    for (t, v) in targets.into_iter().zip(values) {
        if t.shape() != v.shape() {
            return Err(corrupt(
                dir,
                format!("{what}: shape {:?}, expected {:?}", v.shape(), t.shape()),
            ));
        }
        *t = Var::param(v);
    }
    Ok(())
}

pub fn read_checkpoint_meta(dir: &Path) -> Result<CheckpointMeta> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => corrupt(dir, format!("missing {META_FILE}")),
        _ => Error::io(&meta_path, e),
    })?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| corrupt(dir, format!("unreadable {META_FILE}: {e}")))?;
    let found = value.get("format").and_then(|f| f.as_str()).unwrap_or("<none>");
    if found != CHECKPOINT_FORMAT {
        return Err(Error::Incompatible {
            found: found.to_string(),
            expected: CHECKPOINT_FORMAT.to_string(),
        });
    }
    serde_json::from_value(value).map_err(|e| corrupt(dir, format!("malformed {META_FILE}: {e}")))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta = read_checkpoint_meta(dir)?;
    if meta.stages.len() != meta.stage_count || meta.stage_count == 0 {
        return Err(corrupt(dir, "stage count does not match the stage blobs"));
    }
    // Build the skeleton, then overwrite every weight.
    let mut scratch = Rng::seed_from_u64(0);
    let mut g = GrowingGenerator::new(
        meta.channels,
        meta.noise_amp,
        meta.pyramid.resolutions.clone(),
        &mut scratch,
    )?;
    for _ in 1..meta.stage_count {
        g.grow(&mut scratch)?;
    }
    assign(dir, "stem", g.stem.params_mut(), read_blob(dir, &meta.stem)?)?;
    for (s, b) in meta.stages.iter().enumerate() {
        let values = read_blob(dir, b)?;
        assign(dir, &b.file, g.stages[s].params_mut(), values)?;
    }
    assign(dir, "head", g.head_params_mut(), read_blob(dir, &meta.head)?)?;
    let mut critic = PatchCritic::new(meta.config.channels, &mut scratch)?;
    assign(dir, "critic", critic.params_mut(), read_blob(dir, &meta.critic)?)?;
    let image = read_blob(dir, &meta.image)?
        .pop()
        .ok_or_else(|| corrupt(dir, "image blob is empty"))?;
    Ok(Checkpoint {
        config: meta.config,
        spec: meta.pyramid,
        image,
        generator: g,
        critic,
        state: meta.state,
    })
}

/// Accepts either a checkpoint directory or a run directory, in which case
/// the latest stage checkpoint is picked.
pub fn resolve_checkpoint_dir(path: &Path) -> Result<PathBuf> {
    if path.join(META_FILE).exists() {
        return Ok(path.to_path_buf());
    }
    let root = path.join("checkpoints");
    let mut candidates: Vec<PathBuf> = match fs::read_dir(&root) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(META_FILE).exists())
            .collect(),
        Err(_) => Vec::new(),
    };
    candidates.sort();
    candidates
        .pop()
        .ok_or_else(|| corrupt(path, "no checkpoint found (expected meta.json or checkpoints/)"))
}
