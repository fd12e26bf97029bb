//! Interpretability exports: SK channel attention per EEG channel,
//! class-token self-attention traces, composed temporal kernels and
//! intermediate feature tables.

mod render;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use render::{
    bar_chart_svg, write_channel_attention, write_features, write_kernels, write_self_attention, explain_file_stem,
};

use crate::data::SegmentSet;
use crate::error::{Error, Result};
use crate::model::Mactn;
use crate::tensor::Tensor;

/// Rescales `xs` linearly onto `[lo, hi]`. A constant input maps to the midpoint.
pub fn min_max(xs: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mn = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(mx > mn) {
        return vec![(lo + hi) / 2.0; xs.len()];
    }
    xs.iter().map(|x| lo + (hi - lo) * (x - mn) / (mx - mn)).collect()
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// SK stream weights averaged over samples and folded back onto EEG channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelAttention {
    pub kernel_sizes: Vec<usize>,
    pub channel_names: Vec<String>,
    /// Feature channels averaged into each EEG channel.
    pub group_size: usize,
    pub n_samples: usize,
    /// `streams x feature channels`, mean over samples.
    pub feature_weights: Vec<Vec<f64>>,
    /// `streams x EEG channels`, before normalization.
    pub aggregated: Vec<Vec<f64>>,
    /// `aggregated` min-max scaled to [-1, 1] per stream.
    pub normalized: Vec<Vec<f64>>,
}

impl ChannelAttention {
    /// Index of the most attended EEG channel of each stream.
    pub fn argmax_channels(&self) -> Vec<usize> {
        self.normalized.iter().map(|s| argmax(s)).collect()
    }
}

/// Runs eval-mode forwards over `x` (`(B, M, T)`) and aggregates the SK weights.
pub fn extract_channel_attention(model: &Mactn, x: &Tensor, channel_names: &[String]) -> Result<ChannelAttention> {
    let cfg = model.config();
    if x.ndim() != 3 || x.shape()[0] == 0 {
        return Err(Error::Contract("channel attention needs a non-empty (B, M, T) sample set".into()));
    }
    if !(cfg.ablation.ltfe && cfg.ablation.sk_attention) {
        return Err(Error::Config("model has no SK attention to explain".into()));
    }
    if channel_names.len() != cfg.n_channels {
        return Err(Error::dim(format!(
            "{} channel names for a {}-channel model",
            channel_names.len(),
            cfg.n_channels
        )));
    }
    let b = x.shape()[0];
    let c = cfg.d_embed();
    let group = c / cfg.n_channels;
    let mut feature_weights = vec![vec![0.0; c]; cfg.sk_kernel_sizes.len()];
    let rows: Vec<Tensor> = (0..b).map(|i| x.index_outer(i)).collect();
    for chunk in rows.chunks(32) {
        let (_, trace) = model.forward(&Tensor::stack(&chunk.iter().collect::<Vec<_>>())?, true)?;
        for (mean, w) in feature_weights.iter_mut().zip(&trace.sk_stream_weights) {
            for row in w.data().chunks(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v / b as f64;
                }
            }
        }
    }
    let aggregated: Vec<Vec<f64>> = feature_weights
        .iter()
        .map(|mean| mean.chunks(group).map(|g| g.iter().sum::<f64>() / group as f64).collect())
        .collect();
    let normalized = aggregated.iter().map(|a| min_max(a, -1.0, 1.0)).collect();
    Ok(ChannelAttention {
        kernel_sizes: cfg.sk_kernel_sizes.clone(),
        channel_names: channel_names.to_vec(),
        group_size: group,
        n_samples: b,
        feature_weights,
        aggregated,
        normalized,
    })
}

/// Class-token attention over the time tokens of one segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfAttentionTrace {
    /// Per encoder layer: class-token row averaged over heads, self entry dropped.
    pub per_layer: Vec<Vec<f64>>,
    /// Mean of `per_layer`.
    pub raw: Vec<f64>,
    /// `raw` min-max scaled to [0, 1].
    pub normalized: Vec<f64>,
    pub seconds_per_token: f64,
    /// Centre time of each token in seconds.
    pub token_times_s: Vec<f64>,
}

/// Self-attention trace of one `(M, T)` segment.
pub fn extract_self_attention(model: &Mactn, segment: &Tensor) -> Result<SelfAttentionTrace> {
    let cfg = model.config();
    if segment.shape() != [cfg.n_channels, cfg.input_len] {
        return Err(Error::dim(format!(
            "segment {:?}, model expects [{}, {}]",
            segment.shape(),
            cfg.n_channels,
            cfg.input_len
        )));
    }
    if !cfg.ablation.gtfe || cfg.n_encoder_layers == 0 {
        return Err(Error::Config("model has no self-attention to explain".into()));
    }
    let (_, trace) = model.forward(segment, true)?;
    let mut per_layer = Vec::new();
    for map in &trace.attention_maps {
        // (1, h, S+1, S+1); row 0 is the class token's query
        let (h, s1) = (map.shape()[1], map.shape()[2]);
        let mut row = vec![0.0; s1 - 1];
        for head in 0..h {
            let base = head * s1 * s1;
            for (j, r) in row.iter_mut().enumerate() {
                *r += map.data()[base + j + 1] / h as f64;
            }
        }
        per_layer.push(row);
    }
    let n = per_layer[0].len();
    let raw: Vec<f64> = (0..n)
        .map(|j| per_layer.iter().map(|l| l[j]).sum::<f64>() / per_layer.len() as f64)
        .collect();
    let spt = cfg.seconds_per_token();
    Ok(SelfAttentionTrace {
        normalized: min_max(&raw, 0.0, 1.0),
        token_times_s: (0..n).map(|i| (i as f64 + 0.5) * spt).collect(),
        per_layer,
        raw,
        seconds_per_token: spt,
    })
}

/// Full discrete convolution of two tap sequences (`a.len() + b.len() - 1` taps).
pub fn compose_taps(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposedKernel {
    /// Feature channel after both layers.
    pub channel: usize,
    /// EEG channel it descends from.
    pub source_channel: usize,
    pub taps: Vec<f64>,
    /// Constant offset contributed by the first layer's bias.
    pub bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposedKernels {
    /// Applied first, then second.
    pub layers: [String; 2],
    /// True when nothing nonlinear sits between the two layers.
    pub exact: bool,
    pub sample_rate_hz: f64,
    pub kernels: Vec<ComposedKernel>,
}

impl ComposedKernels {
    pub fn window_s(&self) -> f64 {
        self.kernels.first().map_or(0.0, |k| k.taps.len() as f64 / self.sample_rate_hz)
    }
}

/// Equivalent single kernels of two stacked depthwise layers.
///
/// Only `depth.conv1` followed by `depth.conv2` share a per-channel lineage
/// with no nonlinearity in between; other pairs are rejected.
pub fn compose_kernels(model: &Mactn, first: &str, second: &str) -> Result<ComposedKernels> {
    if (first, second) != ("depth.conv1", "depth.conv2") {
        return Err(Error::Contract(format!(
            "`{first}` -> `{second}` is not a depthwise pair with matching channel lineage"
        )));
    }
    let p = model.params();
    let get = |n: &str| {
        p.get(n)
            .ok_or_else(|| Error::Config(format!("model has no `{n}`; is the depth block disabled?")))
    };
    let (w1, b1, w2) = (get("depth.conv1.weight")?, get("depth.conv1.bias")?, get("depth.conv2.weight")?);
    let (c, k1, k2) = (w1.shape()[0], w1.shape()[2], w2.shape()[2]);
    if w2.shape()[0] != c {
        return Err(Error::Contract(format!("{c} channels into {} channels", w2.shape()[0])));
    }
    let mult = model.config().channel_multiplier;
    let kernels = (0..c)
        .map(|o| {
            let a = &w1.data()[o * k1..(o + 1) * k1];
            let b = &w2.data()[o * k2..(o + 1) * k2];
            ComposedKernel {
                channel: o,
                source_channel: o / mult,
                taps: compose_taps(a, b),
                bias: b1.data()[o] * b.iter().sum::<f64>(),
            }
        })
        .collect();
    Ok(ComposedKernels {
        layers: [first.to_string(), second.to_string()],
        exact: true,
        sample_rate_hz: model.config().sample_rate_hz,
        kernels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureStage {
    PostLtfe,
    PostGtfe,
}

impl FromStr for FeatureStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post_ltfe" => Ok(Self::PostLtfe),
            "post_gtfe" => Ok(Self::PostGtfe),
            other => Err(Error::Config(format!("unknown feature stage `{other}`"))),
        }
    }
}

impl fmt::Display for FeatureStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PostLtfe => "post_ltfe",
            Self::PostGtfe => "post_gtfe",
        })
    }
}

/// Flattened stage features, one row per segment in index order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub stage: FeatureStage,
    pub segment_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

/// Stable id of a segment: `<subject>_t<trial>_w<window>`.
pub fn segment_id(data: &SegmentSet, i: usize) -> String {
    let s = &data.segments[i];
    format!("{}_t{}_w{}", s.subject_id, s.trial_id, s.index)
}

pub fn export_features(model: &Mactn, data: &SegmentSet, idx: &[usize], stage: FeatureStage) -> Result<FeatureTable> {
    if idx.is_empty() {
        return Err(Error::Contract("no segments to export".into()));
    }
    let mut rows = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(32) {
        let (_, trace) = model.forward(&data.batch(chunk)?, true)?;
        let t = match stage {
            FeatureStage::PostLtfe => trace.post_ltfe,
            FeatureStage::PostGtfe => trace.post_gtfe,
        }
        .ok_or_else(|| Error::Config(format!("stage {stage} is disabled in this model")))?;
        let width = t.numel() / chunk.len();
        rows.extend(t.data().chunks(width).map(<[f64]>::to_vec));
    }
    Ok(FeatureTable {
        stage,
        segment_ids: idx.iter().map(|&i| segment_id(data, i)).collect(),
        labels: data.labels(idx),
        rows,
    })
}
