//! Feature-aware architecture integration: regresses modulation fields beta
//! and gamma from the attention features with 3x3 convolutions (resampled to
//! the CNN grid first) and emits `concat[x_s, beta * m_s + gamma]`.

use rand_chacha::ChaCha8Rng;

use crate::error::{FpsError, Result};
use crate::hfsnet::{init_conv, Forward};
use crate::tensor::{Graph, ParamSet, Tensor, Var};

pub fn init_fai(
    params: &mut ParamSet,
    prefix: &str,
    attn_channels: usize,
    cnn_channels: usize,
    rng: &mut ChaCha8Rng,
) {
    // beta starts at exactly 1 and gamma at exactly 0, so a fresh merge is
    // `concat[x_s, m_s]`
    init_conv(params, &format!("{prefix}.beta"), attn_channels, cnn_channels, 3, rng);
    params.set(
        &format!("{prefix}.beta.w"),
        Tensor::zeros(&[cnn_channels, attn_channels, 3, 3]),
    ).unwrap();
    params.set(&format!("{prefix}.beta.b"), Tensor::full(&[cnn_channels], 1.0)).unwrap();
    init_conv(params, &format!("{prefix}.gamma"), attn_channels, cnn_channels, 3, rng);
    params.set(
        &format!("{prefix}.gamma.w"),
        Tensor::zeros(&[cnn_channels, attn_channels, 3, 3]),
    ).unwrap();
}

/// Build the merge subgraph for one scale.
pub fn fai_graph(fwd: &mut Forward, prefix: &str, x_s: Var, m_s: Var, t_s: Var) -> Result<Var> {
    let m_shape = fwd.graph.value(m_s).shape().to_vec();
    let x_shape = fwd.graph.value(x_s).shape().to_vec();
    if m_shape.len() != 4 || x_shape.len() != 4 {
        return Err(FpsError::shape("(B, C, H, W)", format!("{m_shape:?} / {x_shape:?}")));
    }
    if x_shape[2] != m_shape[2] || x_shape[3] != m_shape[3] || x_shape[0] != m_shape[0] {
        return Err(FpsError::shape(
            format!("x_s on the {}x{} grid of m_s", m_shape[2], m_shape[3]),
            format!("{}x{}", x_shape[2], x_shape[3]),
        ));
    }
    let t_resized = fwd.graph.bilinear_resize(t_s, m_shape[2], m_shape[3]);
    let beta = fwd.conv(&format!("{prefix}.beta"), t_resized, 1, 1)?;
    let gamma = fwd.conv(&format!("{prefix}.gamma"), t_resized, 1, 1)?;
    let beta_shape = fwd.graph.value(beta).shape();
    if beta_shape[1] != m_shape[1] {
        return Err(FpsError::shape_in(
            format!("{} modulation channels", m_shape[1]),
            format!("{}", beta_shape[1]),
            prefix,
        ));
    }
    let modulated = fwd.graph.mul(beta, m_s);
    let modulated = fwd.graph.add(modulated, gamma);
    Ok(fwd.graph.concat_channels(&[x_s, modulated]))
}

/// Standalone value-level op.
pub fn fai_merge(
    x_s: &Tensor,
    m_s: &Tensor,
    t_s: &Tensor,
    params: &ParamSet,
    prefix: &str,
) -> Result<Tensor> {
    let mut graph = Graph::new();
    let mut buffers = ParamSet::new();
    let mut fwd = Forward::new(
        &mut graph,
        params,
        &mut buffers,
        crate::hfsnet::Mode::Infer,
        false,
    );
    let xv = fwd.graph.leaf(x_s.clone());
    let mv = fwd.graph.leaf(m_s.clone());
    let tv = fwd.graph.leaf(t_s.clone());
    let out = fai_graph(&mut fwd, prefix, xv, mv, tv)?;
    Ok(graph.value(out).clone())
}
