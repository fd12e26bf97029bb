use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sub-block switches for ablation runs. Everything is on by default.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Whole convolutional front end (depth block, pools, separable blocks, SK).
    pub ltfe: bool,
    /// Class token + transformer stack. When off, the flattened front-end
    /// feature map feeds the classifier directly.
    pub gtfe: bool,
    pub depth_block: bool,
    pub sconv_block: bool,
    pub sk_attention: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            ltfe: true,
            gtfe: true,
            depth_block: true,
            sconv_block: true,
            sk_attention: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// EEG channels entering the network.
    pub n_channels: usize,
    /// Samples per segment.
    pub input_len: usize,
    pub sample_rate_hz: f64,
    /// Feature maps per EEG channel produced by the first depthwise conv.
    pub channel_multiplier: usize,
    pub conv_kernel: usize,
    pub n_sconv_blocks: usize,
    pub pool1: usize,
    pub pool2: usize,
    pub sk_kernel_sizes: Vec<usize>,
    pub sk_reduction: usize,
    pub sk_min_dim: usize,
    pub n_encoder_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub n_classes: usize,
    pub dropout_p: f64,
    #[serde(default)]
    pub ablation: Ablation,
}

impl ModelConfig {
    /// 30 bipolar channels, 14 s at 125 Hz, nine emotion classes.
    pub fn thu_ep() -> Self {
        Self {
            n_channels: 30,
            input_len: 1750,
            sample_rate_hz: 125.0,
            channel_multiplier: 4,
            conv_kernel: 15,
            n_sconv_blocks: 2,
            pool1: 4,
            pool2: 5,
            sk_kernel_sizes: vec![1, 3, 5, 7],
            sk_reduction: 4,
            sk_min_dim: 32,
            n_encoder_layers: 6,
            n_heads: 8,
            head_dim: 256,
            mlp_dim: 128,
            n_classes: 9,
            dropout_p: 0.5,
            ablation: Ablation::default(),
        }
    }

    /// 28 channels, 12 s at 128 Hz, binary arousal or valence.
    pub fn deap() -> Self {
        Self {
            n_channels: 28,
            input_len: 1536,
            sample_rate_hz: 128.0,
            n_classes: 2,
            ..Self::thu_ep()
        }
    }

    /// Small configuration for gradient checks and desk-scale experiments.
    pub fn miniature(n_channels: usize, input_len: usize, n_classes: usize) -> Self {
        Self {
            n_channels,
            input_len,
            channel_multiplier: 2,
            n_encoder_layers: 1,
            n_heads: 2,
            head_dim: 8,
            mlp_dim: 16,
            sk_kernel_sizes: vec![1, 3],
            sk_min_dim: 4,
            n_classes,
            ..Self::thu_ep()
        }
    }

    /// Preset by dataset profile name.
    pub fn for_profile(name: &str) -> Result<Self> {
        match name {
            "thu_ep" => Ok(Self::thu_ep()),
            "deap" => Ok(Self::deap()),
            other => Err(Error::Config(format!("no model preset for profile `{other}`"))),
        }
    }

    /// Same architecture with a different segment length.
    pub fn with_input_len(mut self, input_len: usize) -> Self {
        self.input_len = input_len;
        self
    }

    /// K₂: feature channels after the first depthwise convolution.
    pub fn k2(&self) -> usize {
        self.n_channels * self.channel_multiplier
    }

    /// Channel count of the feature map handed to the transformer.
    pub fn d_embed(&self) -> usize {
        if self.ablation.ltfe && self.ablation.depth_block {
            self.k2()
        } else {
            self.n_channels
        }
    }

    /// Length after the depth block (the first pooling input).
    pub(crate) fn depth_block_len(&self) -> usize {
        if self.ablation.depth_block {
            self.input_len.saturating_sub(2 * (self.conv_kernel - 1))
        } else {
            self.input_len
        }
    }

    /// Token count entering the transformer (without the class token).
    pub fn d_seq(&self) -> usize {
        if !self.ablation.ltfe {
            return self.input_len;
        }
        self.depth_block_len() / self.pool1 / self.pool2
    }

    /// Bottleneck width of the SK fuse step: `max(C / r, L)`.
    pub fn sk_dim(&self) -> usize {
        (self.d_embed() / self.sk_reduction).max(self.sk_min_dim)
    }

    pub fn seconds_per_token(&self) -> f64 {
        self.input_len as f64 / self.sample_rate_hz / self.d_seq() as f64
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_channels", self.n_channels),
            ("input_len", self.input_len),
            ("channel_multiplier", self.channel_multiplier),
            ("conv_kernel", self.conv_kernel),
            ("pool1", self.pool1),
            ("pool2", self.pool2),
            ("sk_reduction", self.sk_reduction),
            ("sk_min_dim", self.sk_min_dim),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("mlp_dim", self.mlp_dim),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} not in [0, 1)", self.dropout_p)));
        }
        if self.sample_rate_hz <= 0.0 {
            return Err(Error::Config("sample_rate_hz must be positive".into()));
        }
        if self.ablation.ltfe {
            if self.conv_kernel % 2 == 0 && self.ablation.sconv_block && self.n_sconv_blocks > 0 {
                return Err(Error::Config(format!(
                    "separable conv kernel {} must be odd for length-preserving padding",
                    self.conv_kernel
                )));
            }
            if self.ablation.sk_attention {
                if self.sk_kernel_sizes.len() < 2 {
                    return Err(Error::Config("SK attention needs at least two streams".into()));
                }
                if let Some(k) = self.sk_kernel_sizes.iter().find(|&&k| k % 2 == 0 || k == 0) {
                    return Err(Error::Config(format!(
                        "SK kernel size {k} is even; symmetric padding needs odd kernels"
                    )));
                }
            }
            if self.ablation.depth_block && self.input_len <= 2 * (self.conv_kernel - 1) {
                return Err(Error::Config(format!(
                    "input_len {} too short for two {}-tap valid convolutions",
                    self.input_len, self.conv_kernel
                )));
            }
        }
        if self.d_seq() == 0 {
            return Err(Error::Config(format!(
                "input_len {} leaves no tokens after pooling",
                self.input_len
            )));
        }
        if self.ablation.gtfe && self.n_encoder_layers > 0 && self.d_embed() < 2 {
            return Err(Error::Config("layer norm needs an embedding of width >= 2".into()));
        }
        Ok(())
    }
}
