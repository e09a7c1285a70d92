//! Frequency-aware adaptive selection: each channel branch generates its own
//! per-sample low-pass kernels (GAP -> 1x1 conv -> BN -> per-group softmax
//! over the taps), splits the features into the low band and its residual
//! high band, and recombines them with sigmoid-bounded attention weights.
//!
//! The softmax makes every low-pass kernel nonnegative with taps summing to
//! one, so `low + high` reconstructs the input exactly.

use rand_chacha::ChaCha8Rng;

use crate::error::{FpsError, Result};
use crate::hfsnet::{init_bn, init_linear, Forward, NetworkConfig};
use crate::tensor::{Graph, ParamSet, Tensor, Var};

/// Initial modulator bias: sigmoid(4) ~ 0.982, close enough to 1 that a fresh
/// layer is near identity while keeping a usable gradient.
const MODULATOR_BIAS_INIT: f64 = 4.0;

pub fn init_fas(
    params: &mut ParamSet,
    buffers: &mut ParamSet,
    prefix: &str,
    channels: usize,
    cfg: &NetworkConfig,
    rng: &mut ChaCha8Rng,
) {
    let cb = channels / cfg.fas_branches;
    let g = cfg.fas_groups;
    for (i, &k) in cfg.fas_kernels.iter().enumerate() {
        let pre = format!("{prefix}.br{i}");
        init_linear(params, &format!("{pre}.gen.fc"), cb, g * k * k, rng);
        init_bn(params, buffers, &format!("{pre}.gen.bn"), g * k * k);
        init_linear(params, &format!("{pre}.mod.fuse"), cb, cb, rng);
        init_linear(params, &format!("{pre}.mod.low"), cb, cb, rng);
        init_linear(params, &format!("{pre}.mod.high"), cb, cb, rng);
        params.set(&format!("{pre}.mod.low.b"), Tensor::full(&[cb], MODULATOR_BIAS_INIT)).unwrap();
        params.set(&format!("{pre}.mod.high.b"), Tensor::full(&[cb], MODULATOR_BIAS_INIT)).unwrap();
    }
}

/// Force the modulator to emit attention weights of exactly 1.0 (sigmoid
/// saturates to 1.0 in f64 at bias 40), turning the branch into `low + high`.
pub fn force_identity_modulator(params: &mut ParamSet, prefix: &str, branches: usize) -> Result<()> {
    for i in 0..branches {
        for gate in ["low", "high"] {
            let wname = format!("{prefix}.br{i}.mod.{gate}.w");
            let bname = format!("{prefix}.br{i}.mod.{gate}.b");
            let w = params.get(&wname)?.clone();
            params.set(&wname, Tensor::zeros(w.shape()))?;
            let b = params.get(&bname)?.clone();
            params.set(&bname, Tensor::full(b.shape(), 40.0))?;
        }
    }
    Ok(())
}

/// Decomposition of one branch, exposed for the reconstruction-identity
/// tests: `low + high == branch input` exactly.
pub struct BranchBands {
    pub low: Var,
    pub high: Var,
    pub filters: Var,
}

pub(crate) fn branch_bands(
    fwd: &mut Forward,
    prefix: &str,
    xi: Var,
    kernel: usize,
    groups: usize,
) -> Result<BranchBands> {
    let shape = fwd.graph.value(xi).shape().to_vec();
    let (b, cb) = (shape[0], shape[1]);
    // filter generation: GAP -> FC -> BN -> per-group softmax over taps
    let gap = fwd.graph.spatial_mean(xi);
    let logits = fwd.linear(&format!("{prefix}.gen.fc"), gap)?;
    let logits4 = fwd.graph.reshape(logits, &[b, groups * kernel * kernel, 1, 1]);
    let normed = fwd.batch_norm(&format!("{prefix}.gen.bn"), logits4)?;
    let grouped = fwd.graph.reshape(normed, &[b, groups, kernel * kernel]);
    let soft = fwd.graph.softmax_last(grouped);
    let filters = fwd.graph.reshape(soft, &[b, groups, kernel, kernel]);

    let low = fwd.graph.dyn_group_conv(xi, filters);
    // high band = input - low band; identical to convolving with
    // (identity kernel - low-pass kernel) and exact in floating point
    let high = fwd.graph.sub(xi, low);
    let _ = cb;
    Ok(BranchBands { low, high, filters })
}

/// Build the FAS subgraph: split into branches, decompose, modulate, concat.
pub fn fas_graph(fwd: &mut Forward, prefix: &str, x: Var, cfg: &NetworkConfig) -> Result<Var> {
    let shape = fwd.graph.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(FpsError::shape("(B, C, H, W)", format!("{shape:?}")));
    }
    let c = shape[1];
    let div = cfg.fas_branches * cfg.fas_groups;
    if c % div != 0 {
        return Err(FpsError::shape(
            format!("channels divisible by branches*groups = {div}"),
            format!("{c}"),
        ));
    }
    let cb = c / cfg.fas_branches;
    let mut outs = Vec::with_capacity(cfg.fas_branches);
    for (i, &k) in cfg.fas_kernels.iter().enumerate() {
        let pre = format!("{prefix}.br{i}");
        let xi = fwd.graph.slice_channels(x, i * cb, (i + 1) * cb);
        let bands = branch_bands(fwd, &pre, xi, k, cfg.fas_groups)?;

        // modulator: fuse the recombined bands, then gate each band with a
        // sigmoid-bounded per-channel weight
        let fused = fwd.graph.add(bands.low, bands.high);
        let gap = fwd.graph.spatial_mean(fused);
        let fuse = fwd.linear(&format!("{pre}.mod.fuse"), gap)?;
        let fuse = fwd.graph.relu(fuse);
        let wl_logit = fwd.linear(&format!("{pre}.mod.low"), fuse)?;
        let wh_logit = fwd.linear(&format!("{pre}.mod.high"), fuse)?;
        let w_low = fwd.graph.sigmoid(wl_logit);
        let w_high = fwd.graph.sigmoid(wh_logit);
        let low_scaled = fwd.graph.scale_bc(bands.low, w_low);
        let high_scaled = fwd.graph.scale_bc(bands.high, w_high);
        outs.push(fwd.graph.add(low_scaled, high_scaled));
    }
    Ok(fwd.graph.concat_channels(&outs))
}

/// Standalone value-level op.
pub fn fas_forward(
    x: &Tensor,
    params: &ParamSet,
    bn_buffers: &mut ParamSet,
    prefix: &str,
    cfg: &NetworkConfig,
    mode: crate::hfsnet::Mode,
) -> Result<Tensor> {
    let mut graph = Graph::new();
    let mut fwd = Forward::new(&mut graph, params, bn_buffers, mode, false);
    let xv = fwd.graph.leaf(x.clone());
    let out = fas_graph(&mut fwd, prefix, xv, cfg)?;
    Ok(graph.value(out).clone())
}

/// Value-level band decomposition of every branch, for the identity tests.
pub fn fas_bands(
    x: &Tensor,
    params: &ParamSet,
    bn_buffers: &mut ParamSet,
    prefix: &str,
    cfg: &NetworkConfig,
    mode: crate::hfsnet::Mode,
) -> Result<Vec<(Tensor, Tensor, Tensor, Tensor)>> {
    let mut graph = Graph::new();
    let mut fwd = Forward::new(&mut graph, params, bn_buffers, mode, false);
    let xv = fwd.graph.leaf(x.clone());
    let c = x.shape()[1];
    let cb = c / cfg.fas_branches;
    let mut result = Vec::new();
    let mut handles = Vec::new();
    for (i, &k) in cfg.fas_kernels.iter().enumerate() {
        let xi = fwd.graph.slice_channels(xv, i * cb, (i + 1) * cb);
        let bands = branch_bands(&mut fwd, &format!("{prefix}.br{i}"), xi, k, cfg.fas_groups)?;
        handles.push((xi, bands));
    }
    for (xi, bands) in handles {
        result.push((
            graph.value(xi).clone(),
            graph.value(bands.low).clone(),
            graph.value(bands.high).clone(),
            graph.value(bands.filters).clone(),
        ));
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hfsnet::Mode;
    use rand::SeedableRng;

    fn setup(channels: usize, cfg: &NetworkConfig, seed: u64) -> (ParamSet, ParamSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        init_fas(&mut params, &mut buffers, "t", channels, cfg, &mut rng);
        (params, buffers)
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn bands_reconstruct_input_exactly() {
        let cfg = NetworkConfig::toy();
        let (params, mut buffers) = setup(8, &cfg, 1);
        let x = rand_t(&[2, 8, 8, 8], 2);
        let bands = fas_bands(&x, &params, &mut buffers, "t", &cfg, Mode::Train).unwrap();
        assert_eq!(bands.len(), 2);
        for (xi, low, high, _) in bands {
            let sum = low.add(&high);
            assert!(xi.max_abs_diff(&sum) < 1e-12);
        }
    }

    #[test]
    fn low_pass_kernels_are_simplex_points() {
        let cfg = NetworkConfig::toy();
        let (params, mut buffers) = setup(8, &cfg, 3);
        let x = rand_t(&[3, 8, 4, 4], 4);
        let bands = fas_bands(&x, &params, &mut buffers, "t", &cfg, Mode::Train).unwrap();
        for (bi, (_, _, _, filters)) in bands.iter().enumerate() {
            let k = cfg.fas_kernels[bi];
            for chunk in filters.data().chunks_exact(k * k) {
                assert!(chunk.iter().all(|&v| v >= 0.0));
                let sum: f64 = chunk.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forced_unit_modulator_is_identity() {
        let cfg = NetworkConfig::toy();
        let (mut params, mut buffers) = setup(8, &cfg, 5);
        force_identity_modulator(&mut params, "t", cfg.fas_branches).unwrap();
        let x = rand_t(&[2, 8, 6, 6], 6);
        let y = fas_forward(&x, &params, &mut buffers, "t", &cfg, Mode::Train).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn constant_input_passes_low_band_in_interior() {
        // softmax kernels have DC gain 1, so a constant plane is reproduced
        // away from the zero-padded boundary
        let cfg = NetworkConfig::toy();
        let (params, mut buffers) = setup(8, &cfg, 7);
        let x = Tensor::full(&[1, 8, 10, 10], 1.75);
        let bands = fas_bands(&x, &params, &mut buffers, "t", &cfg, Mode::Train).unwrap();
        for (bi, (_, low, _, _)) in bands.iter().enumerate() {
            let k = cfg.fas_kernels[bi];
            let margin = k / 2;
            for c in 0..4 {
                for i in margin..10 - margin {
                    for j in margin..10 - margin {
                        let v = low.data()[(c * 10 + i) * 10 + j];
                        assert!(
                            (v - 1.75).abs() < 1e-12,
                            "branch {bi} c{c} ({i},{j}): {v}"
                        );
                    }
                }
            }
            // boundary rows are attenuated by the zero padding
            let corner = low.data()[0];
            assert!(corner.abs() < 1.75 + 1e-12);
        }
    }

    #[test]
    fn rejects_indivisible_channels() {
        let cfg = NetworkConfig::toy();
        let (params, mut buffers) = setup(8, &cfg, 8);
        let x = rand_t(&[1, 6, 4, 4], 9);
        assert!(matches!(
            fas_forward(&x, &params, &mut buffers, "t", &cfg, Mode::Train),
            Err(FpsError::ShapeMismatch { .. })
        ));
    }
}
