use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crc::{Crc, CRC_64_ECMA_182};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "1";
pub const BUNDLE_MANIFEST: &str = "manifest.json";

pub(crate) const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

pub(crate) fn checksum_hex(bytes: &[u8]) -> String {
    format!("{:016x}", CRC64.checksum(bytes))
}

/// A trial label: a class id, or raw self-assessment ratings to be
/// binarized later (e.g. `{"arousal": 6.1, "valence": 3.0}`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(usize),
    Ratings(BTreeMap<String, f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub trial_id: usize,
    pub label: Label,
    /// `(channels, samples)`.
    pub data: Tensor,
}

impl Trial {
    pub fn n_samples(&self) -> usize {
        self.data.shape()[1]
    }
}

/// All recordings of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct EegBundle {
    pub subject_id: String,
    pub sample_rate_hz: f64,
    pub channel_names: Vec<String>,
    pub trials: Vec<Trial>,
}

impl EegBundle {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Contract(format!("sample rate {} must be positive", self.sample_rate_hz)));
        }
        for t in &self.trials {
            let s = t.data.shape();
            if s.len() != 2 || s[0] != self.channel_names.len() {
                return Err(Error::dim(format!(
                    "trial {} has shape {s:?}, bundle declares {} channels",
                    t.trial_id,
                    self.channel_names.len()
                )));
            }
        }
        let mut ids: Vec<usize> = self.trials.iter().map(|t| t.trial_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract(format!("duplicate trial id in subject {}", self.subject_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TrialEntry {
    trial_id: usize,
    label: Label,
    n_samples: usize,
    file: String,
    crc64: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleManifest {
    format_version: String,
    subject_id: String,
    sample_rate_hz: f64,
    channel_names: Vec<String>,
    trials: Vec<TrialEntry>,
}

pub(crate) fn trial_file_name(id: usize) -> String {
    format!("trial_{id}.raw")
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_manifest<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads a file after checking its length, so a wrong manifest never
/// causes a read past the declared size.
pub(crate) fn read_exact_len(path: &Path, expected: u64, context: &str) -> Result<Vec<u8>> {
    let meta = fs::metadata(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    if meta.len() != expected {
        return Err(Error::SizeMismatch {
            context: context.to_string(),
            expected,
            found: meta.len(),
        });
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.json` plus one `trial_<id>.raw` per trial into `dir`.
/// Samples are stored as little-endian `f32`, channel-major.
pub fn write_bundle(bundle: &EegBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut trials = Vec::with_capacity(bundle.trials.len());
    for t in &bundle.trials {
        let mut bytes = Vec::with_capacity(t.data.numel() * 4);
        for &v in t.data.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let file = trial_file_name(t.trial_id);
        write_file(&dir.join(&file), &bytes)?;
        trials.push(TrialEntry {
            trial_id: t.trial_id,
            label: t.label.clone(),
            n_samples: t.n_samples(),
            file,
            crc64: checksum_hex(&bytes),
        });
    }
    let manifest = BundleManifest {
        format_version: FORMAT_VERSION.to_string(),
        subject_id: bundle.subject_id.clone(),
        sample_rate_hz: bundle.sample_rate_hz,
        channel_names: bundle.channel_names.clone(),
        trials,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(BUNDLE_MANIFEST), text.as_bytes())
}

pub fn load_bundle(dir: &Path) -> Result<EegBundle> {
    let mpath = dir.join(BUNDLE_MANIFEST);
    let m: BundleManifest = read_manifest(&mpath)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(m.format_version));
    }
    let n_ch = m.channel_names.len();
    let mut trials = Vec::with_capacity(m.trials.len());
    for e in m.trials {
        if e.file.contains(['/', '\\']) || e.file == ".." {
            return Err(Error::Manifest {
                path: mpath.clone(),
                reason: format!("trial file `{}` must be a plain file name", e.file),
            });
        }
        let expected = (n_ch as u64)
            .checked_mul(e.n_samples as u64)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Manifest {
                path: mpath.clone(),
                reason: format!("trial {} size overflows", e.trial_id),
            })?;
        let context = format!("trial {}", e.trial_id);
        let bytes = read_exact_len(&dir.join(&e.file), expected, &context)?;
        if checksum_hex(&bytes) != e.crc64 {
            return Err(Error::Checksum(context));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        trials.push(Trial {
            trial_id: e.trial_id,
            label: e.label,
            data: Tensor::new(vec![n_ch, e.n_samples], data)?,
        });
    }
    let b = EegBundle {
        subject_id: m.subject_id,
        sample_rate_hz: m.sample_rate_hz,
        channel_names: m.channel_names,
        trials,
    };
    b.validate()?;
    Ok(b)
}

fn subject_dir(root: &Path, subject: &str) -> PathBuf {
    root.join(format!("subject_{subject}"))
}

/// Writes each bundle into `root/subject_<id>/`.
pub fn write_bundles(bundles: &[EegBundle], root: &Path) -> Result<()> {
    for b in bundles {
        write_bundle(b, &subject_dir(root, &b.subject_id))?;
    }
    Ok(())
}

/// Loads every `subject_*` directory under `root`, ordered by directory name.
pub fn load_bundles(root: &Path) -> Result<Vec<EegBundle>> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("subject_"))
        })
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_bundle(d)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingDimension {
    Arousal,
    Valence,
}

impl RatingDimension {
    pub fn key(self) -> &'static str {
        match self {
            Self::Arousal => "arousal",
            Self::Valence => "valence",
        }
    }
}

/// Class 1 when the rating is strictly above `threshold`, else 0.
pub fn binarize_rating(rating: f64, threshold: f64) -> Result<usize> {
    if !(1.0..=9.0).contains(&rating) {
        return Err(Error::RatingOutOfRange(rating));
    }
    Ok(usize::from(rating > threshold))
}

/// Binarizes one dimension of a ratings map.
pub fn binarize_deap_labels(
    ratings: &BTreeMap<String, f64>,
    dimension: RatingDimension,
    threshold: f64,
) -> Result<usize> {
    let r = ratings
        .get(dimension.key())
        .ok_or_else(|| Error::Contract(format!("trial has no `{}` rating", dimension.key())))?;
    binarize_rating(*r, threshold)
}
