//! Minimal windowed-attention encoder: patch embedding, then per stage two
//! pre-norm blocks (plain windowed multi-head self-attention, then the same
//! with windows cyclically shifted by half a window), each followed by a
//! two-layer token MLP, with 2x patch merging between stages.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::hfsnet::{init_linear, init_ln, Forward, NetworkConfig};
use crate::tensor::{Graph, ParamSet, Tensor, Var};

const MLP_RATIO: usize = 2;

pub fn init_attention(params: &mut ParamSet, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) {
    init_conv_patch(params, "attn.embed", 2, cfg.embed_dim, cfg.patch_size, rng);
    for s in 0..cfg.scales {
        let dim = cfg.embed_at(s);
        for blk in 0..2 {
            let pre = format!("attn.s{s}.blk{blk}");
            init_ln(params, &format!("{pre}.ln1"), dim);
            init_linear(params, &format!("{pre}.wq"), dim, dim, rng);
            init_linear(params, &format!("{pre}.wk"), dim, dim, rng);
            init_linear(params, &format!("{pre}.wv"), dim, dim, rng);
            init_linear(params, &format!("{pre}.proj"), dim, dim, rng);
            init_ln(params, &format!("{pre}.ln2"), dim);
            init_linear(params, &format!("{pre}.mlp.fc1"), dim, MLP_RATIO * dim, rng);
            init_linear(params, &format!("{pre}.mlp.fc2"), MLP_RATIO * dim, dim, rng);
        }
        if s + 1 < cfg.scales {
            init_ln(params, &format!("attn.s{s}.merge.ln"), 4 * dim);
            init_linear(params, &format!("attn.s{s}.merge.fc"), 4 * dim, 2 * dim, rng);
        }
    }
}

fn init_conv_patch(
    params: &mut ParamSet,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) {
    params.insert(
        format!("{prefix}.w"),
        crate::hfsnet::uniform_fan_in(&[cout, cin, k, k], cin * k * k, rng),
    );
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

/// Windowed multi-head self-attention over a `(B, H, W, E)` token grid.
/// `shift > 0` rolls the grid before partitioning and rolls back after.
fn window_attention(
    fwd: &mut Forward,
    prefix: &str,
    tokens: Var,
    heads: usize,
    window: usize,
    shift: usize,
) -> Result<Var> {
    let shape = fwd.graph.value(tokens).shape().to_vec();
    let (b, h, w, e) = (shape[0], shape[1], shape[2], shape[3]);
    let hd = e / heads;
    let t = window * window;
    let (nh, nw) = (h / window, w / window);
    let nwin = b * nh * nw;

    let g = &mut *fwd.graph;
    let shifted = if shift > 0 {
        g.roll_hw(tokens, -(shift as i64), -(shift as i64))
    } else {
        tokens
    };
    // partition into windows: (B, nh, ws, nw, ws, E) -> (B*nh*nw, ws*ws, E)
    let part = g.reshape(shifted, &[b, nh, window, nw, window, e]);
    let part = g.permute(part, &[0, 1, 3, 2, 4, 5]);
    let part = g.reshape(part, &[nwin * t, e]);

    let q = fwd.linear(&format!("{prefix}.wq"), part)?;
    let k = fwd.linear(&format!("{prefix}.wk"), part)?;
    let v = fwd.linear(&format!("{prefix}.wv"), part)?;

    let g = &mut *fwd.graph;
    let to_heads = |g: &mut Graph, x: Var| {
        let x = g.reshape(x, &[nwin, t, heads, hd]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[nwin * heads, t, hd])
    };
    let qh = to_heads(g, q);
    let kh = to_heads(g, k);
    let vh = to_heads(g, v);

    let kt = g.transpose_last2(kh);
    let scores = g.matmul(qh, kt);
    let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
    let attn = g.softmax_last(scores);
    let ctx = g.matmul(attn, vh);

    let ctx = g.reshape(ctx, &[nwin, heads, t, hd]);
    let ctx = g.permute(ctx, &[0, 2, 1, 3]);
    let ctx = g.reshape(ctx, &[nwin * t, e]);
    let out = fwd.linear(&format!("{prefix}.proj"), ctx)?;

    // reverse the window partition
    let g = &mut *fwd.graph;
    let out = g.reshape(out, &[b, nh, nw, window, window, e]);
    let out = g.permute(out, &[0, 1, 3, 2, 4, 5]);
    let out = g.reshape(out, &[b, h, w, e]);
    if shift > 0 {
        Ok(g.roll_hw(out, shift as i64, shift as i64))
    } else {
        Ok(out)
    }
}

fn attention_block(
    fwd: &mut Forward,
    prefix: &str,
    tokens: Var,
    heads: usize,
    window: usize,
    shift: usize,
) -> Result<Var> {
    let shape = fwd.graph.value(tokens).shape().to_vec();
    let (b, h, w, e) = (shape[0], shape[1], shape[2], shape[3]);
    let normed = fwd.layer_norm(&format!("{prefix}.ln1"), tokens)?;
    let attended = window_attention(fwd, prefix, normed, heads, window, shift)?;
    let tokens = fwd.graph.add(tokens, attended);

    let normed = fwd.layer_norm(&format!("{prefix}.ln2"), tokens)?;
    let flat = fwd.graph.reshape(normed, &[b * h * w, e]);
    let hidden = fwd.linear(&format!("{prefix}.mlp.fc1"), flat)?;
    let hidden = fwd.graph.relu(hidden);
    let mlp = fwd.linear(&format!("{prefix}.mlp.fc2"), hidden)?;
    let mlp = fwd.graph.reshape(mlp, &[b, h, w, e]);
    Ok(fwd.graph.add(tokens, mlp))
}

/// One encoder stage: two attention blocks (second with shifted windows).
/// Input and output are `(B, H, W, E)` token grids.
pub fn attention_stage_graph(
    fwd: &mut Forward,
    stage: usize,
    tokens: Var,
    cfg: &NetworkConfig,
) -> Result<Var> {
    let window = cfg.window_size;
    let tokens = attention_block(
        fwd,
        &format!("attn.s{stage}.blk0"),
        tokens,
        cfg.attn_heads,
        window,
        0,
    )?;
    attention_block(
        fwd,
        &format!("attn.s{stage}.blk1"),
        tokens,
        cfg.attn_heads,
        window,
        window / 2,
    )
}

/// 2x2 patch merging: concatenate each 2x2 token neighborhood and project
/// from 4E to 2E.
fn patch_merge(fwd: &mut Forward, stage: usize, tokens: Var) -> Result<Var> {
    let shape = fwd.graph.value(tokens).shape().to_vec();
    let (b, h, w, e) = (shape[0], shape[1], shape[2], shape[3]);
    let g = &mut *fwd.graph;
    let x = g.reshape(tokens, &[b, h / 2, 2, w / 2, 2, e]);
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5]);
    let x = g.reshape(x, &[b, h / 2, w / 2, 4 * e]);
    let x = fwd.layer_norm(&format!("attn.s{stage}.merge.ln"), x)?;
    let flat = fwd.graph.reshape(x, &[b * (h / 2) * (w / 2), 4 * e]);
    let merged = fwd.linear(&format!("attn.s{stage}.merge.fc"), flat)?;
    Ok(fwd.graph.reshape(merged, &[b, h / 2, w / 2, 2 * e]))
}

/// Full attention path over the `(B, 2, H, W)` input: returns the per-stage
/// feature maps `T_s` in `(B, E_s, H_s, W_s)` layout.
pub fn attention_path(fwd: &mut Forward, x0: Var, cfg: &NetworkConfig) -> Result<Vec<Var>> {
    let embedded = fwd.conv("attn.embed", x0, cfg.patch_size, 0)?;
    let mut tokens = fwd.graph.permute(embedded, &[0, 2, 3, 1]);
    let mut features = Vec::with_capacity(cfg.scales);
    for s in 0..cfg.scales {
        tokens = attention_stage_graph(fwd, s, tokens, cfg)?;
        features.push(fwd.graph.permute(tokens, &[0, 3, 1, 2]));
        if s + 1 < cfg.scales {
            tokens = patch_merge(fwd, s, tokens)?;
        }
    }
    Ok(features)
}

/// Standalone value-level stage op over a `(B, E, H, W)` feature map.
pub fn attention_stage_forward(
    x: &Tensor,
    params: &ParamSet,
    stage: usize,
    cfg: &NetworkConfig,
) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(crate::error::FpsError::shape("(B, E, H, W)", format!("{shape:?}")));
    }
    if shape[2] % cfg.window_size != 0 || shape[3] % cfg.window_size != 0 {
        return Err(crate::error::FpsError::shape(
            format!("spatial dims divisible by window {}", cfg.window_size),
            format!("{}x{}", shape[2], shape[3]),
        ));
    }
    let mut graph = Graph::new();
    let mut buffers = ParamSet::new();
    let mut fwd = Forward::new(
        &mut graph,
        params,
        &mut buffers,
        crate::hfsnet::Mode::Infer,
        false,
    );
    let xv = fwd.graph.leaf(x.clone());
    let tokens = fwd.graph.permute(xv, &[0, 2, 3, 1]);
    let out = attention_stage_graph(&mut fwd, stage, tokens, cfg)?;
    let back = fwd.graph.permute(out, &[0, 3, 1, 2]);
    Ok(graph.value(back).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg() -> NetworkConfig {
        NetworkConfig::toy()
    }

    fn setup(seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_attention(&mut params, &cfg(), &mut rng);
        params
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn attention_rows_are_probability_vectors() {
        // run a raw window attention and inspect the softmax node values
        let params = setup(1);
        let x = rand_t(&[1, 4, 8, 8], 2);
        let mut graph = Graph::new();
        let mut buffers = ParamSet::new();
        let mut fwd = Forward::new(&mut graph, &params, &mut buffers, crate::hfsnet::Mode::Infer, false);
        let xv = fwd.graph.leaf(x);
        let tokens = fwd.graph.permute(xv, &[0, 2, 3, 1]);
        let normed = fwd.layer_norm("attn.s0.blk0.ln1", tokens).unwrap();
        let _ = window_attention(&mut fwd, "attn.s0.blk0", normed, 2, 2, 0).unwrap();
        // the softmax node is identifiable by rows summing to 1 with all
        // entries nonnegative; scan the graph for it
        let mut found = false;
        for id in 0..graph.len() {
            let t = graph.value(Var(id));
            let shape = t.shape();
            if shape.len() == 3 && shape[1] == 4 && shape[2] == 4 {
                let ok = t.data().chunks_exact(4).all(|row| {
                    row.iter().all(|&v| v >= 0.0)
                        && (row.iter().sum::<f64>() - 1.0).abs() < 1e-6
                });
                if ok {
                    found = true;
                }
            }
        }
        assert!(found, "no attention probability node found");
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero_output() {
        let params = setup(3);
        let x = Tensor::zeros(&[1, 4, 8, 8]);
        let y = attention_stage_forward(&x, &params, 0, &cfg()).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn batch_permutation_equivariance() {
        let params = setup(4);
        let a = rand_t(&[1, 4, 8, 8], 5);
        let b = rand_t(&[1, 4, 8, 8], 6);
        let mut ab = a.to_vec();
        ab.extend_from_slice(b.data());
        let mut ba = b.to_vec();
        ba.extend_from_slice(a.data());
        let y_ab = attention_stage_forward(&Tensor::from_vec(&[2, 4, 8, 8], ab), &params, 0, &cfg()).unwrap();
        let y_ba = attention_stage_forward(&Tensor::from_vec(&[2, 4, 8, 8], ba), &params, 0, &cfg()).unwrap();
        let n = y_ab.len() / 2;
        assert_eq!(&y_ab.data()[..n], &y_ba.data()[n..]);
        assert_eq!(&y_ab.data()[n..], &y_ba.data()[..n]);
    }

    #[test]
    fn stage_rejects_bad_window_divisibility() {
        let params = setup(7);
        let x = rand_t(&[1, 4, 6, 6], 8);
        let mut c = cfg();
        c.window_size = 4;
        assert!(attention_stage_forward(&x, &params, 0, &c).is_err());
    }
}
