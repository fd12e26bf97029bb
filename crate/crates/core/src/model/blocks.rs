//! The network's sub-blocks as functions of explicitly passed weights.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchStats, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Conv1dSpec, Mode, RunningStats};
use crate::tensor::Tensor;

/// Per-call settings shared by the convolutional blocks.
pub struct BlockCtx<'r> {
    pub mode: Mode,
    pub dropout_p: f64,
    pub rng: &'r mut ChaCha8Rng,
}

/// BN -> ReLU -> dropout, the order listed for every conv block.
fn bn_relu_dropout<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    running: &RunningStats,
    ctx: &mut BlockCtx<'_>,
) -> Result<(Var<'t>, Option<BatchStats>)> {
    let (h, stats) = nn::batch_norm1d(x, gamma, beta, running, ctx.mode)?;
    let h = nn::dropout(h.relu()?, ctx.dropout_p, ctx.mode, ctx.rng)?;
    Ok((h, stats))
}

pub struct DepthBlockWeights<'t> {
    pub conv1_w: Var<'t>,
    pub conv1_b: Var<'t>,
    pub conv2_w: Var<'t>,
    pub bn_gamma: Var<'t>,
    pub bn_beta: Var<'t>,
}

/// Two valid depthwise convolutions (channel expansion by `multiplier`, then
/// one-to-one), then BN, ReLU and dropout. Returns the intermediate after the
/// first convolution for shape bookkeeping.
pub fn depth_conv_block<'t>(
    x: Var<'t>,
    w: &DepthBlockWeights<'t>,
    multiplier: usize,
    kernel: usize,
    running: &RunningStats,
    ctx: &mut BlockCtx<'_>,
) -> Result<(Var<'t>, Var<'t>, Option<BatchStats>)> {
    let m = x.shape()[1];
    let c1 = Conv1dSpec::depthwise(m, multiplier, kernel, 0).with_bias(true);
    let h1 = nn::depthwise_conv1d(x, &c1, w.conv1_w, Some(w.conv1_b))?;
    let c2 = Conv1dSpec::depthwise(m * multiplier, 1, kernel, 0);
    let h2 = nn::depthwise_conv1d(h1, &c2, w.conv2_w, None)?;
    let (out, stats) = bn_relu_dropout(h2, w.bn_gamma, w.bn_beta, running, ctx)?;
    Ok((h1, out, stats))
}

pub struct SepConvWeights<'t> {
    pub depth_w: Var<'t>,
    pub depth_b: Var<'t>,
    pub point_w: Var<'t>,
    pub point_b: Option<Var<'t>>,
}

fn sep_conv<'t>(x: Var<'t>, w: &SepConvWeights<'t>, kernel: usize) -> Result<Var<'t>> {
    let c = x.shape()[1];
    let depth = Conv1dSpec::depthwise(c, 1, kernel, (kernel - 1) / 2).with_bias(true);
    let point = Conv1dSpec::pointwise(c, c).with_bias(w.point_b.is_some());
    nn::separable_conv1d(x, &depth, w.depth_w, Some(w.depth_b), &point, w.point_w, w.point_b)
}

pub struct SConvBlockWeights<'t> {
    pub sep1: SepConvWeights<'t>,
    pub sep2: SepConvWeights<'t>,
    pub bn_gamma: Var<'t>,
    pub bn_beta: Var<'t>,
}

/// Two length-preserving separable convolutions, then BN, ReLU, dropout.
/// Returns the intermediate after the first separable convolution too.
pub fn separable_conv_block<'t>(
    x: Var<'t>,
    w: &SConvBlockWeights<'t>,
    kernel: usize,
    running: &RunningStats,
    ctx: &mut BlockCtx<'_>,
) -> Result<(Var<'t>, Var<'t>, Option<BatchStats>)> {
    let h1 = sep_conv(x, &w.sep1, kernel)?;
    let h2 = sep_conv(h1, &w.sep2, kernel)?;
    let (out, stats) = bn_relu_dropout(h2, w.bn_gamma, w.bn_beta, running, ctx)?;
    Ok((h1, out, stats))
}

pub struct SkBranchWeights<'t> {
    pub kernel: usize,
    pub conv_w: Var<'t>,
    pub bn_gamma: Var<'t>,
    pub bn_beta: Var<'t>,
}

pub struct SkWeights<'t> {
    pub branches: Vec<SkBranchWeights<'t>>,
    /// Squeeze projection, `(C, d)`.
    pub fc: Var<'t>,
    /// One `(d, C)` select projection per branch.
    pub select: Vec<Var<'t>>,
}

pub struct SkOutput<'t> {
    pub out: Var<'t>,
    /// Per-channel stream weights, `(B, n_streams, C)`.
    pub weights: Var<'t>,
    pub stats: Vec<Option<BatchStats>>,
}

/// Selective-kernel channel attention on a `(B, C, T)` map.
///
/// Split: one depthwise conv + BN + ReLU branch per kernel size.
/// Fuse: sum the branches, average over time, project to `d`.
/// Select: per-channel softmax across branches; output is the weighted sum.
pub fn sk_attention<'t>(
    x: Var<'t>,
    w: &SkWeights<'t>,
    running: &[&RunningStats],
    mode: Mode,
) -> Result<SkOutput<'t>> {
    let shape = x.shape();
    let (b, c) = (shape[0], shape[1]);
    if w.branches.len() < 2 || w.select.len() != w.branches.len() || running.len() != w.branches.len() {
        return Err(Error::Config("SK attention needs matching branch, select and BN lists of length >= 2".into()));
    }
    let mut streams = Vec::with_capacity(w.branches.len());
    let mut stats = Vec::with_capacity(w.branches.len());
    for (br, rs) in w.branches.iter().zip(running) {
        if br.kernel % 2 == 0 {
            return Err(Error::Config(format!("SK kernel {} is even", br.kernel)));
        }
        let spec = Conv1dSpec::depthwise(c, 1, br.kernel, (br.kernel - 1) / 2);
        let u = nn::depthwise_conv1d(x, &spec, br.conv_w, None)?;
        let (u, st) = nn::batch_norm1d(u, br.bn_gamma, br.bn_beta, rs, mode)?;
        streams.push(u.relu()?);
        stats.push(st);
    }
    let mut fused = streams[0];
    for s in &streams[1..] {
        fused = fused.add(*s)?;
    }
    let squeezed = fused.mean_axis(2)?; // (B, C)
    let z = squeezed.matmul(w.fc)?; // (B, d)
    let mut logits = Vec::with_capacity(streams.len());
    for sel in &w.select {
        logits.push(z.matmul(*sel)?.reshape(&[b, 1, c])?);
    }
    let weights = x.tape().concat(&logits, 1)?.softmax(1)?;
    let mut out: Option<Var<'t>> = None;
    for (i, u) in streams.iter().enumerate() {
        let a = weights.narrow(1, i, 1)?.reshape(&[b, c, 1])?;
        let term = u.mul(a)?;
        out = Some(match out {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    Ok(SkOutput {
        out: out.expect("at least two streams"),
        weights,
        stats,
    })
}

pub struct MhsaWeights<'t> {
    /// `(E, h * d_k)` projections.
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    /// `(h * d_k, E)` output projection and its `(E)` bias.
    pub wo: Var<'t>,
    pub bo: Var<'t>,
    pub n_heads: usize,
    pub head_dim: usize,
}

/// Splits `(B, S, h*d)` into `(B*h, S, d)`.
fn split_heads<'t>(x: Var<'t>, heads: usize, dim: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let (b, n) = (s[0], s[1]);
    x.reshape(&[b, n, heads, dim])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * heads, n, dim])
}

/// Multi-head scaled dot-product self-attention over `(B, S, E)`.
/// Returns the output and the attention maps `(B, h, S, S)`.
pub fn mhsa<'t>(x: Var<'t>, w: &MhsaWeights<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("mhsa expects (B, S, E), got {s:?}")));
    }
    let (b, n) = (s[0], s[1]);
    let (h, d) = (w.n_heads, w.head_dim);
    let q = split_heads(x.linear(w.wq, None)?, h, d)?;
    let k = split_heads(x.linear(w.wk, None)?, h, d)?;
    let v = split_heads(x.linear(w.wv, None)?, h, d)?;
    let scores = q.bmm(k, true)?.scale(1.0 / (d as f64).sqrt())?;
    let attn = scores.softmax(2)?; // (B*h, S, S)
    let ctx = attn
        .bmm(v, false)?
        .reshape(&[b, h, n, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, n, h * d])?;
    let out = ctx.linear(w.wo, Some(w.bo))?;
    Ok((out, attn.reshape(&[b, h, n, n])?))
}

pub struct EncoderWeights<'t> {
    pub ln1_gamma: Var<'t>,
    pub ln1_beta: Var<'t>,
    pub attn: MhsaWeights<'t>,
    pub ln2_gamma: Var<'t>,
    pub ln2_beta: Var<'t>,
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

/// Pre-norm encoder layer with residuals after both the attention and the
/// feed-forward module.
pub fn encoder_layer<'t>(x: Var<'t>, w: &EncoderWeights<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (a, maps) = mhsa(nn::layer_norm(x, w.ln1_gamma, w.ln1_beta)?, &w.attn)?;
    let sa = a.add(x)?;
    let hidden = nn::layer_norm(sa, w.ln2_gamma, w.ln2_beta)?
        .linear(w.w1, Some(w.b1))?
        .relu()?;
    let out = hidden.linear(w.w2, Some(w.b2))?.add(sa)?;
    Ok((out, maps))
}

/// `(1, E)` class token broadcast over a batch and prepended to `(B, S, E)`
/// tokens, then a `(S + 1, E)` position encoding added.
pub fn prepend_class_token<'t>(tokens: Var<'t>, cls: Var<'t>, pos: Var<'t>) -> Result<Var<'t>> {
    let s = tokens.shape();
    let (b, e) = (s[0], s[2]);
    let zeros = tokens.tape().constant(Tensor::zeros(vec![b, 1, e]));
    let cls_b = zeros.add(cls.reshape(&[1, 1, e])?)?;
    tokens.tape().concat(&[cls_b, tokens], 1)?.add(pos)
}
