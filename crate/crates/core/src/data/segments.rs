use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::{checksum_hex, read_exact_len, read_manifest, write_file, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SEGMENTS_MANIFEST: &str = "segments.manifest";
pub const SEGMENTS_BLOB: &str = "segments.blob";

/// One normalized model input with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub subject_id: String,
    pub trial_id: usize,
    /// Position of the window within its trial.
    pub index: usize,
    pub label: usize,
    /// `(channels, samples)`.
    pub data: Tensor,
}

/// The output of preprocessing: equally shaped labelled segments.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSet {
    pub sample_rate_hz: f64,
    pub channel_names: Vec<String>,
    pub n_classes: usize,
    pub segments: Vec<Segment>,
    pub warnings: Vec<String>,
}

impl SegmentSet {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// `(channels, samples)` shared by every segment.
    pub fn segment_shape(&self) -> Result<[usize; 2]> {
        let first = self
            .segments
            .first()
            .ok_or_else(|| Error::Contract("segment set is empty".into()))?;
        let s = first.data.shape();
        let shape = [s[0], s[1]];
        if self.segments.iter().any(|x| x.data.shape() != shape) {
            return Err(Error::Contract("segments differ in shape".into()));
        }
        Ok(shape)
    }

    /// Subject ids in first-seen order.
    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.segments {
            if !out.contains(&s.subject_id) {
                out.push(s.subject_id.clone());
            }
        }
        out
    }

    /// Trial ids of one subject, sorted.
    pub fn trials_of(&self, subject: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .segments
            .iter()
            .filter(|s| s.subject_id == subject)
            .map(|s| s.trial_id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.segments[i].label).collect()
    }

    /// Stacks the listed segments into a `(B, channels, samples)` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<&Tensor> = indices.iter().map(|&i| &self.segments[i].data).collect();
        Tensor::stack(&items)
    }

    /// Copy of the listed segments.
    pub fn subset(&self, indices: &[usize]) -> SegmentSet {
        SegmentSet {
            sample_rate_hz: self.sample_rate_hz,
            channel_names: self.channel_names.clone(),
            n_classes: self.n_classes,
            segments: indices.iter().map(|&i| self.segments[i].clone()).collect(),
            warnings: Vec::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SegmentEntry {
    subject_id: String,
    trial_id: usize,
    index: usize,
    label: usize,
}

#[derive(Serialize, Deserialize)]
struct SegmentsManifest {
    format_version: String,
    sample_rate_hz: f64,
    channel_names: Vec<String>,
    n_classes: usize,
    n_channels: usize,
    n_samples: usize,
    warnings: Vec<String>,
    segments: Vec<SegmentEntry>,
    blob_crc64: String,
}

/// Writes `segments.manifest` and a little-endian `f64` blob into `dir`.
pub fn save_segments(set: &SegmentSet, dir: &Path) -> Result<()> {
    let [c, t] = if set.is_empty() { [set.channel_names.len(), 0] } else { set.segment_shape()? };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(set.len() * c * t * 8);
    for s in &set.segments {
        for v in s.data.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = SegmentsManifest {
        format_version: FORMAT_VERSION.into(),
        sample_rate_hz: set.sample_rate_hz,
        channel_names: set.channel_names.clone(),
        n_classes: set.n_classes,
        n_channels: c,
        n_samples: t,
        warnings: set.warnings.clone(),
        segments: set
            .segments
            .iter()
            .map(|s| SegmentEntry {
                subject_id: s.subject_id.clone(),
                trial_id: s.trial_id,
                index: s.index,
                label: s.label,
            })
            .collect(),
        blob_crc64: checksum_hex(&blob),
    };
    write_file(&dir.join(SEGMENTS_BLOB), &blob)?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(SEGMENTS_MANIFEST), text.as_bytes())
}

pub fn load_segments(dir: &Path) -> Result<SegmentSet> {
    let mpath = dir.join(SEGMENTS_MANIFEST);
    let m: SegmentsManifest = read_manifest(&mpath)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(m.format_version));
    }
    let per = m.n_channels.checked_mul(m.n_samples).ok_or_else(|| Error::Manifest {
        path: mpath.clone(),
        reason: "segment size overflows".into(),
    })?;
    let expected = (per as u64)
        .checked_mul(m.segments.len() as u64)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::Manifest {
            path: mpath.clone(),
            reason: "blob size overflows".into(),
        })?;
    let blob = read_exact_len(&dir.join(SEGMENTS_BLOB), expected, SEGMENTS_BLOB)?;
    if checksum_hex(&blob) != m.blob_crc64 {
        return Err(Error::Checksum(SEGMENTS_BLOB.into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut segments = Vec::with_capacity(m.segments.len());
    for (k, e) in m.segments.into_iter().enumerate() {
        if e.label >= m.n_classes {
            return Err(Error::InvalidLabel {
                label: e.label,
                n_classes: m.n_classes,
            });
        }
        segments.push(Segment {
            subject_id: e.subject_id,
            trial_id: e.trial_id,
            index: e.index,
            label: e.label,
            data: Tensor::new(vec![m.n_channels, m.n_samples], values[k * per..(k + 1) * per].to_vec())?,
        });
    }
    Ok(SegmentSet {
        sample_rate_hz: m.sample_rate_hz,
        channel_names: m.channel_names,
        n_classes: m.n_classes,
        segments,
        warnings: m.warnings,
    })
}
