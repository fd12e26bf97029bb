use super::ModelConfig;

/// Floating-point operations of one forward pass on a single segment,
/// counting two per multiply-accumulate in convolutions, linear maps and
/// the two attention products. Norms, activations, softmax and pooling are
/// not counted.
pub fn count_flops(cfg: &ModelConfig) -> u64 {
    let e = cfg.d_embed() as u64;
    let p = cfg.conv_kernel as u64;
    let mut total = 0u64;
    let mut len = cfg.input_len as u64;

    if cfg.ablation.ltfe {
        if cfg.ablation.depth_block {
            let t1 = len - (p - 1);
            let t2 = t1 - (p - 1);
            total += 2 * e * p * t1 + 2 * e * p * t2;
            len = t2;
        }
        len /= cfg.pool1 as u64;
        if cfg.ablation.sconv_block {
            // each block: two (depthwise + pointwise) pairs
            let sep = 2 * e * p * len + 2 * e * e * len;
            total += cfg.n_sconv_blocks as u64 * 2 * sep;
        }
        len /= cfg.pool2 as u64;
        if cfg.ablation.sk_attention {
            let d = cfg.sk_dim() as u64;
            let n = cfg.sk_kernel_sizes.len() as u64;
            let convs: u64 = cfg.sk_kernel_sizes.iter().map(|&k| 2 * e * k as u64 * len).sum();
            total += convs + 2 * e * d + n * 2 * d * e;
        }
    }

    let n_cls = cfg.n_classes as u64;
    if cfg.ablation.gtfe {
        let s = len + 1;
        let (h, dk) = (cfg.n_heads as u64, cfg.head_dim as u64);
        let hd = h * dk;
        let mlp = cfg.mlp_dim as u64;
        let per_layer = 3 * 2 * s * e * hd // q, k, v
            + 2 * 2 * h * s * s * dk       // scores and weighted values
            + 2 * s * hd * e               // output projection
            + 2 * 2 * s * e * mlp;
        total += cfg.n_encoder_layers as u64 * per_layer + 2 * e * n_cls;
    } else {
        total += 2 * e * len * n_cls;
    }
    total
}
