//! Turning raw recordings into normalized fixed-length model inputs.

mod filter;
mod montage;

use serde::{Deserialize, Serialize};

pub use filter::{apply_filter, design_butterworth, filter_signal, FilterKind, FilterSpec, Sos};
pub use montage::{
    names, ChannelSelection, MontageSpec, DEAP_SOURCE_CHANNELS, THU_EP_SOURCE_CHANNELS,
};

use crate::data::{binarize_deap_labels, EegBundle, Label, RatingDimension, Segment, SegmentSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guards the z-score against constant channels.
pub const ZSCORE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window_len_s: f64,
    pub step_s: f64,
    pub sample_rate_hz: f64,
}

impl WindowSpec {
    pub fn new(window_len_s: f64, step_s: f64, sample_rate_hz: f64) -> Result<Self> {
        if !(step_s > 0.0 && window_len_s >= step_s && sample_rate_hz > 0.0) {
            return Err(Error::Config(format!(
                "window {window_len_s} s / step {step_s} s at {sample_rate_hz} Hz: need window >= step > 0"
            )));
        }
        Ok(Self {
            window_len_s,
            step_s,
            sample_rate_hz,
        })
    }

    fn samples(&self, seconds: f64, what: &str) -> Result<usize> {
        let n = seconds * self.sample_rate_hz;
        if (n - n.round()).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "{what} of {seconds} s is not a whole number of samples at {} Hz",
                self.sample_rate_hz
            )));
        }
        Ok(n.round() as usize)
    }

    pub fn window_samples(&self) -> Result<usize> {
        self.samples(self.window_len_s, "window")
    }

    pub fn step_samples(&self) -> Result<usize> {
        self.samples(self.step_s, "step")
    }
}

/// Number of windows that fit: `floor((n - window) / step) + 1`, or 0.
pub fn segment_count(n_samples: usize, window: usize, step: usize) -> usize {
    if n_samples < window || step == 0 {
        0
    } else {
        (n_samples - window) / step + 1
    }
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    pub segments: Vec<Tensor>,
    /// Set when the trial is shorter than one window.
    pub warning: Option<String>,
}

/// Cuts a `(channels, samples)` trial into overlapping windows; each
/// segment owns its data.
pub fn segment_sliding(x: &Tensor, spec: &WindowSpec) -> Result<Segmentation> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::dim(format!("segment_sliding expects (channels, samples), got {s:?}")));
    }
    let (c, t) = (s[0], s[1]);
    let (w, step) = (spec.window_samples()?, spec.step_samples()?);
    let n = segment_count(t, w, step);
    let warning = (n == 0).then(|| format!("trial of {t} samples is shorter than the {w}-sample window"));
    let segments = (0..n)
        .map(|k| {
            let start = k * step;
            let mut data = Vec::with_capacity(c * w);
            for ch in 0..c {
                data.extend_from_slice(&x.data()[ch * t + start..ch * t + start + w]);
            }
            Tensor::new(vec![c, w], data)
        })
        .collect::<Result<_>>()?;
    Ok(Segmentation { segments, warning })
}

/// Keeps every `factor`-th sample starting at index 0.
pub fn resample_down(x: &Tensor, factor: usize) -> Result<Tensor> {
    let s = x.shape();
    if factor == 0 {
        return Err(Error::Config("downsampling factor must be >= 1".into()));
    }
    if s.len() != 2 {
        return Err(Error::dim(format!("resample_down expects (channels, samples), got {s:?}")));
    }
    let (c, t) = (s[0], s[1]);
    let out_len = t / factor;
    if out_len == 0 {
        return Err(Error::dim(format!("{t} samples leave nothing after downsampling by {factor}")));
    }
    let mut data = Vec::with_capacity(c * out_len);
    for row in x.data().chunks(t) {
        data.extend((0..out_len).map(|i| row[i * factor]));
    }
    Tensor::new(vec![c, out_len], data)
}

/// Integer decimation factor between two rates.
pub fn decimation_factor(from_hz: f64, to_hz: f64) -> Result<usize> {
    let f = from_hz / to_hz;
    if !(f >= 1.0) || (f - f.round()).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "{from_hz} Hz -> {to_hz} Hz is not an integer downsampling factor"
        )));
    }
    Ok(f.round() as usize)
}

/// Per-channel `(x - mean) / (std + eps)` with the population std.
pub fn zscore_segment(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 || s[1] == 0 {
        return Err(Error::dim(format!("zscore expects (channels, samples), got {s:?}")));
    }
    let t = s[1];
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(t) {
        let mean = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
        let denom = var.sqrt() + ZSCORE_EPS;
        out.extend(row.iter().map(|v| (v - mean) / denom));
    }
    Tensor::new(s.to_vec(), out)
}

/// Preprocessing recipe. The named profiles reproduce the two published
/// setups; any field can be overridden for a custom profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub profile: String,
    pub montage: Option<MontageSpec>,
    pub channels: Option<ChannelSelection>,
    pub window_s: f64,
    pub step_s: f64,
    /// Band-stop corners in Hz.
    pub notch_hz: Option<(f64, f64)>,
    /// Band-pass corners in Hz.
    pub bandpass_hz: Option<(f64, f64)>,
    pub filter_order: usize,
    pub target_rate_hz: Option<f64>,
    pub zscore: bool,
    /// Ratings dimension to binarize; `None` expects class labels.
    pub rating_dimension: Option<RatingDimension>,
    pub rating_threshold: f64,
    /// Declared class count; inferred from the labels when absent.
    pub n_classes: Option<usize>,
}

impl PipelineConfig {
    /// Bipolar montage, 14 s / 4 s windows at the native rate, 48-52 Hz
    /// notch, 0.5-45 Hz band-pass, 250 -> 125 Hz, z-score.
    pub fn thu_ep() -> Self {
        Self {
            profile: "thu_ep".into(),
            montage: Some(MontageSpec::thu_ep_default()),
            channels: None,
            window_s: 14.0,
            step_s: 4.0,
            notch_hz: Some((48.0, 52.0)),
            bandpass_hz: Some((0.5, 45.0)),
            filter_order: 6,
            target_rate_hz: Some(125.0),
            zscore: true,
            rating_dimension: None,
            rating_threshold: 5.0,
            n_classes: Some(9),
        }
    }

    /// 28-channel selection, 12 s / 4 s windows, z-score, binary labels.
    pub fn deap(dimension: RatingDimension) -> Self {
        Self {
            profile: "deap".into(),
            montage: None,
            channels: Some(ChannelSelection::deap_default()),
            window_s: 12.0,
            step_s: 4.0,
            notch_hz: None,
            bandpass_hz: None,
            filter_order: 6,
            target_rate_hz: None,
            zscore: true,
            rating_dimension: Some(dimension),
            rating_threshold: 5.0,
            n_classes: Some(2),
        }
    }

    /// Windowing and z-score only.
    pub fn custom(window_s: f64, step_s: f64) -> Self {
        Self {
            profile: "custom".into(),
            montage: None,
            channels: None,
            window_s,
            step_s,
            notch_hz: None,
            bandpass_hz: None,
            filter_order: 6,
            target_rate_hz: None,
            zscore: true,
            rating_dimension: None,
            rating_threshold: 5.0,
            n_classes: None,
        }
    }

    pub fn for_profile(name: &str) -> Result<Self> {
        match name {
            "thu_ep" => Ok(Self::thu_ep()),
            "deap" => Ok(Self::deap(RatingDimension::Arousal)),
            "custom" => Ok(Self::custom(4.0, 4.0)),
            other => Err(Error::Config(format!("unknown dataset profile `{other}`"))),
        }
    }
}

fn trial_class(label: &Label, cfg: &PipelineConfig) -> Result<usize> {
    match (label, cfg.rating_dimension) {
        (Label::Class(c), None) => Ok(*c),
        (Label::Ratings(r), Some(dim)) => binarize_deap_labels(r, dim, cfg.rating_threshold),
        (Label::Class(_), Some(_)) => Err(Error::Config(
            "profile binarizes ratings but the trial carries a class label".into(),
        )),
        (Label::Ratings(_), None) => Err(Error::Config(
            "trial carries ratings; choose a rating dimension".into(),
        )),
    }
}

/// Runs the recipe over every bundle, in the order: channel selection or
/// montage, segmentation, notch, band-pass, downsampling, z-score.
pub fn preprocess_pipeline(bundles: &[EegBundle], cfg: &PipelineConfig) -> Result<SegmentSet> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::Contract("no recordings to preprocess".into()))?;
    let fs = first.sample_rate_hz;
    if bundles.iter().any(|b| b.sample_rate_hz != fs) {
        return Err(Error::Contract("recordings mix sample rates".into()));
    }
    let window = WindowSpec::new(cfg.window_s, cfg.step_s, fs)?;
    let notch = cfg
        .notch_hz
        .map(|(lo, hi)| design_butterworth(FilterKind::Bandstop, lo, hi, cfg.filter_order, fs))
        .transpose()?;
    let bandpass = cfg
        .bandpass_hz
        .map(|(lo, hi)| design_butterworth(FilterKind::Bandpass, lo, hi, cfg.filter_order, fs))
        .transpose()?;
    let factor = match cfg.target_rate_hz {
        Some(target) => decimation_factor(fs, target)?,
        None => 1,
    };

    let mut channel_names: Option<Vec<String>> = None;
    let mut segments = Vec::new();
    let mut warnings = Vec::new();
    for b in bundles {
        b.validate()?;
        let out_names = match (&cfg.montage, &cfg.channels) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("use either a montage or a channel selection, not both".into()))
            }
            (Some(m), None) => {
                m.validate(&b.channel_names)?;
                m.output_names()
            }
            (None, Some(s)) => s.names.clone(),
            (None, None) => b.channel_names.clone(),
        };
        match &channel_names {
            None => channel_names = Some(out_names),
            Some(n) if *n != out_names => {
                return Err(Error::Contract(format!("subject {} yields different channels", b.subject_id)))
            }
            _ => {}
        }
        for trial in &b.trials {
            let label = trial_class(&trial.label, cfg)?;
            let x = match (&cfg.montage, &cfg.channels) {
                (Some(m), _) => m.apply(&trial.data, &b.channel_names)?,
                (None, Some(s)) => s.apply(&trial.data, &b.channel_names)?,
                (None, None) => trial.data.clone(),
            };
            let seg = segment_sliding(&x, &window)?;
            if let Some(w) = seg.warning {
                warnings.push(format!("subject {} trial {}: {w}", b.subject_id, trial.trial_id));
            }
            for (index, mut s) in seg.segments.into_iter().enumerate() {
                if let Some(f) = &notch {
                    s = apply_filter(&s, f)?;
                }
                if let Some(f) = &bandpass {
                    s = apply_filter(&s, f)?;
                }
                if factor > 1 {
                    s = resample_down(&s, factor)?;
                }
                if cfg.zscore {
                    s = zscore_segment(&s)?;
                }
                segments.push(Segment {
                    subject_id: b.subject_id.clone(),
                    trial_id: trial.trial_id,
                    index,
                    label,
                    data: s,
                });
            }
        }
    }
    let inferred = segments.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let n_classes = cfg.n_classes.unwrap_or(inferred);
    if let Some(bad) = segments.iter().find(|s| s.label >= n_classes) {
        return Err(Error::InvalidLabel {
            label: bad.label,
            n_classes,
        });
    }
    Ok(SegmentSet {
        sample_rate_hz: fs / factor as f64,
        channel_names: channel_names.unwrap_or_default(),
        n_classes,
        segments,
        warnings,
    })
}
