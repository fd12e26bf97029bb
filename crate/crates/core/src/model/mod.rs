//! The convolution + transformer classifier.
//!
//! Layout of a forward pass on a `(B, M, T)` batch:
//!
//! 1. depth block: depthwise conv `M -> M*C1`, depthwise conv `K2 -> K2`,
//!    BN / ReLU / dropout, then average pooling by `pool1`;
//! 2. `n_sconv_blocks` separable blocks (two length-preserving separable
//!    convs each, then BN / ReLU / dropout), average pooling by `pool2`;
//! 3. selective-kernel channel attention;
//! 4. transpose to `(d_seq, K2)` tokens, prepend the class token, add the
//!    position encoding, run the encoder stack;
//! 5. the class-token row goes through the linear head.
//!
//! Every stage can be switched off through [`Ablation`].

mod blocks;
mod config;
mod flops;
mod params;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use blocks::{
    depth_conv_block, encoder_layer, mhsa, prepend_class_token, separable_conv_block, sk_attention,
    BlockCtx, DepthBlockWeights, EncoderWeights, MhsaWeights, SConvBlockWeights, SepConvWeights,
    SkBranchWeights, SkOutput, SkWeights,
};
pub use config::{Ablation, ModelConfig};
pub use flops::count_flops;
pub use params::ParameterStore;

use crate::autograd::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Conv1dSpec, Mode, RunningStats, BN_MOMENTUM};
use crate::tensor::Tensor;

/// Intermediates captured by a forward pass.
///
/// `step_shapes` is always filled (per-sample shapes, batch axis dropped);
/// the tensors are captured only when tracing is requested.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub step_shapes: Vec<(String, Vec<usize>)>,
    /// One `(B, C)` weight vector per SK stream.
    pub sk_stream_weights: Vec<Tensor>,
    /// One `(B, h, S + 1, S + 1)` map per encoder layer.
    pub attention_maps: Vec<Tensor>,
    /// `(B, C, d_seq)` front-end output.
    pub post_ltfe: Option<Tensor>,
    /// `(B, E)` class-token embedding after the encoder stack.
    pub post_gtfe: Option<Tensor>,
}

/// Result of recording a forward pass on a tape.
pub struct TapeForward<'t> {
    pub logits: Var<'t>,
    /// Parameter leaves, in [`ParameterStore`] order.
    pub params: Vec<Var<'t>>,
    /// Batch statistics of every train-mode BN layer, by layer name.
    pub bn_stats: Vec<(String, BatchStats)>,
    pub trace: ForwardTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mactn {
    config: ModelConfig,
    params: ParameterStore,
    bn: BTreeMap<String, RunningStats>,
}

struct Lookup<'a, 't> {
    store: &'a ParameterStore,
    vars: &'a [Var<'t>],
}

impl<'t> Lookup<'_, 't> {
    fn get(&self, name: &str) -> Result<Var<'t>> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }
}

fn per_sample(shape: Vec<usize>) -> Vec<usize> {
    shape[1..].to_vec()
}

impl Mactn {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        let mut bn = BTreeMap::new();
        let cfg = &config;
        let e = cfg.d_embed();
        let p = cfg.conv_kernel;

        let add_norm = |params: &mut ParameterStore, prefix: &str, width: usize| -> Result<()> {
            params.insert(format!("{prefix}.gamma"), Tensor::full(vec![width], 1.0))?;
            params.insert(format!("{prefix}.beta"), Tensor::zeros(vec![width]))
        };

        if cfg.ablation.ltfe {
            if cfg.ablation.depth_block {
                let c1 = Conv1dSpec::depthwise(cfg.n_channels, cfg.channel_multiplier, p, 0).with_bias(true);
                let (w, b) = c1.init(&mut rng);
                params.insert("depth.conv1.weight", w)?;
                params.insert("depth.conv1.bias", b.expect("bias requested"))?;
                let c2 = Conv1dSpec::depthwise(e, 1, p, 0);
                params.insert("depth.conv2.weight", c2.init(&mut rng).0)?;
                add_norm(&mut params, "depth.bn", e)?;
                bn.insert("depth.bn".to_string(), RunningStats::new(e));
            }
            if cfg.ablation.sconv_block {
                for i in 1..=cfg.n_sconv_blocks {
                    for (j, point_bias) in [(1, true), (2, false)] {
                        let prefix = format!("sconv{i}.sep{j}");
                        let d = Conv1dSpec::depthwise(e, 1, p, (p - 1) / 2).with_bias(true);
                        let (w, b) = d.init(&mut rng);
                        params.insert(format!("{prefix}.depth.weight"), w)?;
                        params.insert(format!("{prefix}.depth.bias"), b.expect("bias requested"))?;
                        let pw = Conv1dSpec::pointwise(e, e).with_bias(point_bias);
                        let (w, b) = pw.init(&mut rng);
                        params.insert(format!("{prefix}.point.weight"), w)?;
                        if let Some(b) = b {
                            params.insert(format!("{prefix}.point.bias"), b)?;
                        }
                    }
                    add_norm(&mut params, &format!("sconv{i}.bn"), e)?;
                    bn.insert(format!("sconv{i}.bn"), RunningStats::new(e));
                }
            }
            if cfg.ablation.sk_attention {
                for (j, &k) in cfg.sk_kernel_sizes.iter().enumerate() {
                    let spec = Conv1dSpec::depthwise(e, 1, k, (k - 1) / 2);
                    params.insert(format!("sk.branch{j}.weight"), spec.init(&mut rng).0)?;
                    add_norm(&mut params, &format!("sk.branch{j}.bn"), e)?;
                    bn.insert(format!("sk.branch{j}.bn"), RunningStats::new(e));
                }
                let d = cfg.sk_dim();
                params.insert("sk.fc.weight", nn::init_linear(e, d, &mut rng))?;
                for j in 0..cfg.sk_kernel_sizes.len() {
                    params.insert(format!("sk.select{j}.weight"), nn::init_linear(d, e, &mut rng))?;
                }
            }
        }

        if cfg.ablation.gtfe {
            let s = cfg.d_seq();
            let mut gauss = |shape: Vec<usize>| {
                Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
            };
            params.insert("gtfe.cls_token", gauss(vec![1, e]))?;
            params.insert("gtfe.pos_embed", gauss(vec![s + 1, e]))?;
            let hd = cfg.n_heads * cfg.head_dim;
            for l in 1..=cfg.n_encoder_layers {
                let pre = format!("encoder{l}");
                add_norm(&mut params, &format!("{pre}.ln1"), e)?;
                for proj in ["wq", "wk", "wv"] {
                    params.insert(format!("{pre}.attn.{proj}"), nn::init_linear(e, hd, &mut rng))?;
                }
                params.insert(format!("{pre}.attn.wo"), nn::init_linear(hd, e, &mut rng))?;
                params.insert(format!("{pre}.attn.bo"), Tensor::zeros(vec![e]))?;
                add_norm(&mut params, &format!("{pre}.ln2"), e)?;
                params.insert(format!("{pre}.mlp.w1"), nn::init_linear(e, cfg.mlp_dim, &mut rng))?;
                params.insert(format!("{pre}.mlp.b1"), Tensor::zeros(vec![cfg.mlp_dim]))?;
                params.insert(format!("{pre}.mlp.w2"), nn::init_linear(cfg.mlp_dim, e, &mut rng))?;
                params.insert(format!("{pre}.mlp.b2"), Tensor::zeros(vec![e]))?;
            }
            params.insert("head.weight", nn::init_linear(e, cfg.n_classes, &mut rng))?;
        } else {
            let width = e * cfg.d_seq();
            params.insert("head.weight", nn::init_linear(width, cfg.n_classes, &mut rng))?;
        }
        params.insert("head.bias", Tensor::zeros(vec![cfg.n_classes]))?;

        Ok(Self { config, params, bn })
    }

    /// Reassembles a model from stored parts, checking them against the
    /// layout `config` implies.
    pub fn from_parts(
        config: ModelConfig,
        params: ParameterStore,
        bn: BTreeMap<String, RunningStats>,
    ) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        let expected: Vec<(&str, &[usize])> = template.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != found {
            return Err(Error::Contract(
                "parameter names/shapes do not match the configuration".into(),
            ));
        }
        let bn_ok = template.bn.len() == bn.len()
            && template
                .bn
                .iter()
                .all(|(k, v)| {
                    bn.get(k).is_some_and(|r| {
                        r.mean.len() == v.mean.len()
                            && r.var.len() == v.var.len()
                            && r.mean.iter().all(|x| x.is_finite())
                            && r.var.iter().all(|x| x.is_finite() && *x >= 0.0)
                    })
                });
        if !bn_ok {
            return Err(Error::Contract("batch-norm statistics do not match the configuration".into()));
        }
        Ok(Self { config, params, bn })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &BTreeMap<String, RunningStats> {
        &self.bn
    }

    pub fn bn_stats_mut(&mut self) -> &mut BTreeMap<String, RunningStats> {
        &mut self.bn
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) {
        for (name, st) in updates {
            if let Some(r) = self.bn.get_mut(name) {
                r.update(st, BN_MOMENTUM);
            }
        }
    }

    fn running(&self, name: &str) -> Result<&RunningStats> {
        self.bn
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing batch-norm stats `{name}`")))
    }

    /// Records a forward pass of `(B, M, T)` input on `tape`.
    pub fn forward_tape<'t>(
        &self,
        tape: &'t Tape,
        input: Var<'t>,
        mode: Mode,
        tracing: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<TapeForward<'t>> {
        let cfg = &self.config;
        let in_shape = input.shape();
        if in_shape.len() != 3 || in_shape[1] != cfg.n_channels || in_shape[2] != cfg.input_len {
            return Err(Error::dim(format!(
                "model expects (B, {}, {}), got {in_shape:?}",
                cfg.n_channels, cfg.input_len
            )));
        }
        let batch = in_shape[0];
        let vars: Vec<Var<'t>> = self.params.tensors().map(|t| tape.param(t)).collect();
        let p = Lookup {
            store: &self.params,
            vars: &vars,
        };
        let mut trace = ForwardTrace::default();
        let mut bn_stats = Vec::new();
        let record = |trace: &mut ForwardTrace, name: &str, v: &Var<'t>| {
            trace.step_shapes.push((name.to_string(), per_sample(v.shape())));
        };
        let mut keep_stats = |name: &str, st: Option<BatchStats>| {
            if let Some(st) = st {
                bn_stats.push((name.to_string(), st));
            }
        };
        let mut ctx = BlockCtx {
            mode,
            dropout_p: cfg.dropout_p,
            rng,
        };

        record(&mut trace, "input", &input);
        let mut h = input;
        if cfg.ablation.ltfe {
            if cfg.ablation.depth_block {
                let w = DepthBlockWeights {
                    conv1_w: p.get("depth.conv1.weight")?,
                    conv1_b: p.get("depth.conv1.bias")?,
                    conv2_w: p.get("depth.conv2.weight")?,
                    bn_gamma: p.get("depth.bn.gamma")?,
                    bn_beta: p.get("depth.bn.beta")?,
                };
                let (h1, out, st) = depth_conv_block(
                    h,
                    &w,
                    cfg.channel_multiplier,
                    cfg.conv_kernel,
                    self.running("depth.bn")?,
                    &mut ctx,
                )?;
                keep_stats("depth.bn", st);
                record(&mut trace, "depth_conv1", &h1);
                record(&mut trace, "depth_conv2", &out);
                h = out;
            }
            h = nn::avg_pool1d(h, cfg.pool1)?;
            record(&mut trace, "pool1", &h);
            if cfg.ablation.sconv_block {
                for i in 1..=cfg.n_sconv_blocks {
                    let sep = |j: usize, bias: bool| -> Result<SepConvWeights<'t>> {
                        let pre = format!("sconv{i}.sep{j}");
                        Ok(SepConvWeights {
                            depth_w: p.get(&format!("{pre}.depth.weight"))?,
                            depth_b: p.get(&format!("{pre}.depth.bias"))?,
                            point_w: p.get(&format!("{pre}.point.weight"))?,
                            point_b: if bias {
                                Some(p.get(&format!("{pre}.point.bias"))?)
                            } else {
                                None
                            },
                        })
                    };
                    let w = SConvBlockWeights {
                        sep1: sep(1, true)?,
                        sep2: sep(2, false)?,
                        bn_gamma: p.get(&format!("sconv{i}.bn.gamma"))?,
                        bn_beta: p.get(&format!("sconv{i}.bn.beta"))?,
                    };
                    let name = format!("sconv{i}.bn");
                    let (h1, out, st) =
                        separable_conv_block(h, &w, cfg.conv_kernel, self.running(&name)?, &mut ctx)?;
                    keep_stats(&name, st);
                    record(&mut trace, &format!("sconv{i}.sep1"), &h1);
                    record(&mut trace, &format!("sconv{i}.sep2"), &out);
                    h = out;
                }
            }
            h = nn::avg_pool1d(h, cfg.pool2)?;
            record(&mut trace, "pool2", &h);
            if cfg.ablation.sk_attention {
                let n = cfg.sk_kernel_sizes.len();
                let branches = cfg
                    .sk_kernel_sizes
                    .iter()
                    .enumerate()
                    .map(|(j, &kernel)| {
                        Ok(SkBranchWeights {
                            kernel,
                            conv_w: p.get(&format!("sk.branch{j}.weight"))?,
                            bn_gamma: p.get(&format!("sk.branch{j}.bn.gamma"))?,
                            bn_beta: p.get(&format!("sk.branch{j}.bn.beta"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let select = (0..n)
                    .map(|j| p.get(&format!("sk.select{j}.weight")))
                    .collect::<Result<Vec<_>>>()?;
                let w = SkWeights {
                    branches,
                    fc: p.get("sk.fc.weight")?,
                    select,
                };
                let names: Vec<String> = (0..n).map(|j| format!("sk.branch{j}.bn")).collect();
                let running = names
                    .iter()
                    .map(|nm| self.running(nm))
                    .collect::<Result<Vec<_>>>()?;
                let sk = sk_attention(h, &w, &running, mode)?;
                for (nm, st) in names.iter().zip(sk.stats) {
                    keep_stats(nm, st);
                }
                if tracing {
                    let wv = sk.weights.value();
                    let c = cfg.d_embed();
                    for j in 0..n {
                        let data: Vec<f64> = (0..batch)
                            .flat_map(|b| wv.data()[(b * n + j) * c..(b * n + j + 1) * c].to_vec())
                            .collect();
                        trace.sk_stream_weights.push(Tensor::from_parts(vec![batch, c], data));
                    }
                }
                h = sk.out;
                record(&mut trace, "sk", &h);
            }
            if tracing {
                trace.post_ltfe = Some(h.value());
            }
        }

        let logits = if cfg.ablation.gtfe {
            let tokens = h.transpose(1, 2)?;
            record(&mut trace, "reshape", &tokens);
            let cls = p.get("gtfe.cls_token")?;
            trace.step_shapes.push(("class_token".to_string(), cls.shape()));
            let mut x = prepend_class_token(tokens, cls, p.get("gtfe.pos_embed")?)?;
            record(&mut trace, "concat_pos", &x);
            for l in 1..=cfg.n_encoder_layers {
                let pre = format!("encoder{l}");
                let g = |s: &str| p.get(&format!("{pre}.{s}"));
                let w = EncoderWeights {
                    ln1_gamma: g("ln1.gamma")?,
                    ln1_beta: g("ln1.beta")?,
                    attn: MhsaWeights {
                        wq: g("attn.wq")?,
                        wk: g("attn.wk")?,
                        wv: g("attn.wv")?,
                        wo: g("attn.wo")?,
                        bo: g("attn.bo")?,
                        n_heads: cfg.n_heads,
                        head_dim: cfg.head_dim,
                    },
                    ln2_gamma: g("ln2.gamma")?,
                    ln2_beta: g("ln2.beta")?,
                    w1: g("mlp.w1")?,
                    b1: g("mlp.b1")?,
                    w2: g("mlp.w2")?,
                    b2: g("mlp.b2")?,
                };
                let (out, maps) = encoder_layer(x, &w)?;
                if tracing {
                    trace.attention_maps.push(maps.value());
                }
                x = out;
                record(&mut trace, &pre, &x);
            }
            let e = cfg.d_embed();
            let cls_out = x.narrow(1, 0, 1)?.reshape(&[batch, e])?;
            record(&mut trace, "extract_cls", &cls_out);
            if tracing {
                trace.post_gtfe = Some(cls_out.value());
            }
            cls_out.linear(p.get("head.weight")?, Some(p.get("head.bias")?))?
        } else {
            let s = h.shape();
            let flat = h.reshape(&[batch, s[1] * s[2]])?;
            record(&mut trace, "flatten", &flat);
            flat.linear(p.get("head.weight")?, Some(p.get("head.bias")?))?
        };
        record(&mut trace, "fc", &logits);

        Ok(TapeForward {
            logits,
            params: vars,
            bn_stats,
            trace,
        })
    }

    /// Eval-mode forward of `(B, M, T)` or a single `(M, T)` segment.
    pub fn forward(&self, x: &Tensor, tracing: bool) -> Result<(Tensor, ForwardTrace)> {
        let batched = match x.ndim() {
            3 => x.clone(),
            2 => x.clone().reshape([1, x.shape()[0], x.shape()[1]].to_vec())?,
            _ => return Err(Error::dim(format!("model input of shape {:?}", x.shape()))),
        };
        let tape = Tape::new();
        let input = tape.constant(batched);
        // eval mode never draws from the stream
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward_tape(&tape, input, Mode::Eval, tracing, &mut rng)?;
        Ok((out.logits.value(), out.trace))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, false)?.0)
    }
}
