//! Compact frequency-aware selection: channel-split into a global and a local
//! branch, decompose each into a low band (spatial means) and the residual
//! high band, rescale both with learnable per-channel weights, re-concatenate.
//!
//! With all weights at 1 the layer is the identity, which is also its
//! initialization.

use crate::error::{FpsError, Result};
use crate::hfsnet::Forward;
use crate::tensor::{Graph, ParamSet, Tensor, Var};

pub fn init_cfas(params: &mut ParamSet, prefix: &str, channels: usize) {
    let half = channels / 2;
    params.insert(format!("{prefix}.pg_low"), Tensor::full(&[half], 1.0));
    params.insert(format!("{prefix}.pg_high"), Tensor::full(&[half], 1.0));
    params.insert(format!("{prefix}.pl_low"), Tensor::full(&[channels - half], 1.0));
    params.insert(format!("{prefix}.pl_high"), Tensor::full(&[channels - half], 1.0));
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(FpsError::shape("(B, C, H, W)", format!("{shape:?}")));
    }
    let [b, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    if c % 2 != 0 {
        return Err(FpsError::shape("even channel count", format!("{c}")));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(FpsError::shape("even spatial dims", format!("{h}x{w}")));
    }
    Ok((b, c, h, w))
}

/// Build the cFAS subgraph on `x` using the four weight vectors under
/// `prefix`.
pub fn cfas_graph(fwd: &mut Forward, prefix: &str, x: Var) -> Result<Var> {
    let (_, c, h, w) = validate_shape(fwd.graph.value(x).shape())?;
    let half = c / 2;
    let pg_low = fwd.p(&format!("{prefix}.pg_low"))?;
    let pg_high = fwd.p(&format!("{prefix}.pg_high"))?;
    let pl_low = fwd.p(&format!("{prefix}.pl_low"))?;
    let pl_high = fwd.p(&format!("{prefix}.pl_high"))?;
    let g = &mut *fwd.graph;

    // global branch: low band is the per-channel spatial mean
    let yg = g.slice_channels(x, 0, half);
    let gap = g.spatial_mean(yg);
    let low_g = g.broadcast_spatial(gap, h, w);
    let high_g = g.sub(yg, low_g);
    let low_gs = g.scale_channels(low_g, pg_low);
    let high_gs = g.scale_channels(high_g, pg_high);
    let out_g = g.add(low_gs, high_gs);

    // local branch: low band is the mean of each 2x2 spatial quadrant
    let yl = g.slice_channels(x, half, c);
    let pooled = g.avg_pool2d(yl, h / 2, w / 2);
    let low_l = g.upsample_nearest(pooled, h / 2, w / 2);
    let high_l = g.sub(yl, low_l);
    let low_ls = g.scale_channels(low_l, pl_low);
    let high_ls = g.scale_channels(high_l, pl_high);
    let out_l = g.add(low_ls, high_ls);

    Ok(g.concat_channels(&[out_g, out_l]))
}

/// Standalone value-level op over a parameter set holding the four weight
/// vectors under `prefix`.
pub fn cfas_forward(y: &Tensor, params: &ParamSet, prefix: &str) -> Result<Tensor> {
    let mut graph = Graph::new();
    let mut buffers = ParamSet::new();
    let mut fwd = Forward::new(
        &mut graph,
        params,
        &mut buffers,
        crate::hfsnet::Mode::Infer,
        false,
    );
    let x = fwd.graph.leaf(y.clone());
    let out = cfas_graph(&mut fwd, prefix, x)?;
    Ok(graph.value(out).clone())
}
