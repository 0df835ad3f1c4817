//! On-disk formats: FETV feature files, the dataset manifest, annotation
//! tracks, MTSC checkpoints and JSON/JSONL outputs.
//!
//! Every writer goes through [`write_atomic`], so a failed run never leaves a
//! partial file behind.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::synth::Split;
use crate::types::{AnnotationTrack, Architecture, CategoryCatalog, HeadLayout, VideoFeatures};

pub const FEATURE_MAGIC: &[u8; 4] = b"FETV";
pub const FEATURE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTSC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
const FEATURE_HEADER: usize = 16;
// magic, version, arch, state-background flag, N, D, H, parameter count
const CHECKPOINT_HEADER: usize = 4 + 4 + 1 + 1 + 4 + 4 + 4 + 8;

/// Write `path` by filling a temp file in the same directory and renaming it.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(tmp.path(), fs::Permissions::from_mode(0o644)).map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

fn truncated(path: &Path, expected: usize, found: usize) -> Error {
    Error::Truncated { path: path.to_path_buf(), expected, found }
}

/// Serialize a `T x D` matrix as FETV (values stored as 32-bit floats).
pub fn encode_features(frames: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_HEADER + frames.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(frames.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.ncols() as u32).to_le_bytes());
    for v in frames.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: "FETV" });
    }
    if bytes.len() < FEATURE_HEADER {
        return Err(truncated(path, FEATURE_HEADER, bytes.len()));
    }
    let version = u32_at(bytes, 4);
    if version != FEATURE_VERSION {
        return Err(Error::Version { path: path.to_path_buf(), version });
    }
    let (rows, cols) = (u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize);
    let expected = FEATURE_HEADER + rows * cols * 4;
    if bytes.len() < expected {
        return Err(truncated(path, expected, bytes.len()));
    }
    if bytes.len() > expected {
        return Err(Error::Invalid(format!("{}: {} trailing bytes after payload", path.display(), bytes.len() - expected)));
    }
    let values = bytes[FEATURE_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Dimension(e.to_string()))
}

pub fn write_features(path: &Path, frames: &Array2<f64>) -> Result<()> {
    let bytes = encode_features(frames);
    write_atomic(path, |w| w.write_all(&bytes).map_err(|e| Error::io(path, e)))
}

pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    decode_features(&read_bytes(path)?, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub id: String,
    pub label: usize,
    pub fps: f64,
    pub num_frames: usize,
    /// Relative to the manifest's directory.
    pub feature_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub catalog: CategoryCatalog,
    pub videos: Vec<ManifestVideo>,
    /// Relative to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<String>,
}

/// A manifest together with every video's features.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub videos: Vec<VideoFeatures>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl Dataset {
    pub fn catalog(&self) -> &CategoryCatalog {
        &self.manifest.catalog
    }

    /// Videos not tagged as test; untagged videos count as training data.
    pub fn training_videos(&self) -> Vec<VideoFeatures> {
        self.select(|s| s != Some(Split::Test))
    }

    pub fn select(&self, keep: impl Fn(Option<Split>) -> bool) -> Vec<VideoFeatures> {
        self.manifest
            .videos
            .iter()
            .zip(&self.videos)
            .filter(|(m, _)| keep(m.split))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn annotations_path(&self) -> Option<PathBuf> {
        self.manifest.annotations.as_ref().map(|a| self.root.join(a))
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, |w| {
        for row in rows {
            serde_json::to_writer(&mut *w, row).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    })
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = read_json(path)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Version { path: path.to_path_buf(), version: manifest.format_version });
    }
    Ok(manifest)
}

/// Read a manifest and all referenced feature files, checking each header
/// against the manifest and every video against the catalog.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut videos = Vec::with_capacity(manifest.videos.len());
    let mut dim = None;
    for entry in &manifest.videos {
        let path = root.join(&entry.feature_file);
        let frames = read_features(&path)?;
        if frames.nrows() != entry.num_frames {
            return Err(Error::Dimension(format!(
                "{}: header has {} frames, manifest says {}",
                path.display(),
                frames.nrows(),
                entry.num_frames
            )));
        }
        if *dim.get_or_insert(frames.ncols()) != frames.ncols() {
            return Err(Error::Dimension(format!(
                "{}: feature dimension {} differs from {}",
                path.display(),
                frames.ncols(),
                dim.unwrap_or_default()
            )));
        }
        let video = VideoFeatures::new(entry.id.clone(), entry.label, entry.fps, frames);
        video.validate(&manifest.catalog)?;
        videos.push(video);
    }
    Ok(Dataset { manifest, videos, root })
}

/// Write features under `dir/features/` and the manifest at `dir/manifest.json`.
pub fn write_dataset(
    dir: &Path,
    catalog: &CategoryCatalog,
    videos: &[(&VideoFeatures, Option<Split>)],
    annotations: Option<&[AnnotationTrack]>,
) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(videos.len());
    for (video, split) in videos {
        let rel = format!("features/{}.fetv", video.id);
        write_features(&dir.join(&rel), &video.frames)?;
        entries.push(ManifestVideo {
            id: video.id.clone(),
            label: video.label,
            fps: video.fps,
            num_frames: video.num_frames(),
            feature_file: rel,
            split: *split,
        });
    }
    let annotations_rel = match annotations {
        Some(tracks) => {
            write_json(&dir.join("annotations.json"), &tracks)?;
            Some("annotations.json".to_string())
        }
        None => None,
    };
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        catalog: catalog.clone(),
        videos: entries,
        annotations: annotations_rel,
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationTrack>> {
    read_json(path)
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let layout = params.layout();
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER + params.num_params() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(layout.architecture.tag());
    out.push(layout.state_background as u8);
    out.extend_from_slice(&(layout.categories as u32).to_le_bytes());
    out.extend_from_slice(&(params.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(params.hidden() as u32).to_le_bytes());
    out.extend_from_slice(&(params.num_params() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: "MTSC" });
    }
    if bytes.len() < CHECKPOINT_HEADER {
        return Err(truncated(path, CHECKPOINT_HEADER, bytes.len()));
    }
    let version = u32_at(bytes, 4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { path: path.to_path_buf(), version });
    }
    let arch = Architecture::from_tag(bytes[8])
        .ok_or_else(|| Error::Invalid(format!("{}: unknown architecture tag {}", path.display(), bytes[8])))?;
    let state_background = match bytes[9] {
        0 => false,
        1 => true,
        other => return Err(Error::Invalid(format!("{}: bad state-background flag {other}", path.display()))),
    };
    let n = u32_at(bytes, 10) as usize;
    let dim = u32_at(bytes, 14) as usize;
    let hidden = u32_at(bytes, 18) as usize;
    let count = u64_at(bytes, 22) as usize;
    let expected = CHECKPOINT_HEADER + count * 8;
    if bytes.len() < expected {
        return Err(truncated(path, expected, bytes.len()));
    }
    if bytes.len() > expected {
        return Err(Error::Invalid(format!("{}: {} trailing bytes after parameters", path.display(), bytes.len() - expected)));
    }
    let values = bytes[CHECKPOINT_HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ModelParams::from_values(HeadLayout::new(arch, n, state_background), dim, hidden, values)
}

/// Sidecar holding the catalog next to a checkpoint: `<ckpt>.catalog.json`.
pub fn catalog_sidecar(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".catalog.json");
    PathBuf::from(name)
}

pub fn write_checkpoint(path: &Path, params: &ModelParams, catalog: &CategoryCatalog) -> Result<()> {
    if catalog.len() != params.layout().categories {
        return Err(Error::Dimension(format!(
            "catalog has {} categories, model has {}",
            catalog.len(),
            params.layout().categories
        )));
    }
    let bytes = encode_checkpoint(params);
    write_json(&catalog_sidecar(path), catalog)?;
    write_atomic(path, |w| w.write_all(&bytes).map_err(|e| Error::io(path, e)))
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelParams, CategoryCatalog)> {
    let params = decode_checkpoint(&read_bytes(path)?, path)?;
    let catalog: CategoryCatalog = read_json(&catalog_sidecar(path))?;
    if catalog.len() != params.layout().categories {
        return Err(Error::Dimension(format!(
            "sidecar catalog has {} categories, checkpoint has {}",
            catalog.len(),
            params.layout().categories
        )));
    }
    Ok((params, catalog))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn features_round_trip_bit_exact() {
        let m = array![[1.5, -2.25], [0.1f32 as f64, 3.0], [7.0, 1e-3f32 as f64]];
        let bytes = encode_features(&m);
        assert_eq!(bytes.len(), 16 + 6 * 4);
        let back = decode_features(&bytes, Path::new("m")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_mid_row() {
        let m = array![[1.0, 2.0], [3.0, 4.0]];
        let bytes = encode_features(&m);
        let err = decode_features(&bytes[..bytes.len() - 6], Path::new("m")).unwrap_err();
        assert_eq!(err.code(), "truncated_payload");
        assert!(err.to_string().contains("truncated payload"));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_features(&array![[1.0]]);
        bytes[0] = b'X';
        assert_eq!(decode_features(&bytes, Path::new("m")).unwrap_err().code(), "bad_magic");
    }
}
