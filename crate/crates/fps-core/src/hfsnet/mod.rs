//! The hierarchical frequency-selection network: a CNN path (UBlock plus
//! residual blocks, frequency-selective layers after every convolution) and a
//! windowed-attention path, merged per scale by feature-aware modulation and
//! decoded into multi-scale quantitative-map heads.

pub mod attention;
pub mod cfas;
pub mod fai;
pub mod fas;
pub mod gradcheck;

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{FpsError, Result};
use crate::tensor::{Graph, ParamSet, Tensor, Var};

pub use gradcheck::{
    check_gradients, AttentionStageOp, CfasOp, DifferentiableOp, FaiOp, FasOp,
    GradCheckReport, HfsnetOp,
};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics vs frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Number of scales S; the decoder emits one output head per scale.
    pub scales: usize,
    /// Channel count of the finest CNN scale; doubles per scale.
    pub base_channels: usize,
    /// Output map channels (2 for T2+ADC; configurable for other tasks).
    pub out_channels: usize,
    /// Attention window edge, in tokens.
    pub window_size: usize,
    pub attn_heads: usize,
    /// Token embedding dim of the first attention stage; doubles per stage.
    pub embed_dim: usize,
    /// Patch size of the attention stem.
    pub patch_size: usize,
    /// Frequency-selection branch count and per-branch kernel sizes.
    pub fas_branches: usize,
    pub fas_kernels: Vec<usize>,
    pub fas_groups: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            scales: 3,
            base_channels: 32,
            out_channels: 2,
            window_size: 4,
            attn_heads: 2,
            embed_dim: 16,
            patch_size: 2,
            fas_branches: 2,
            fas_kernels: vec![3, 5],
            fas_groups: 4,
        }
    }
}

impl NetworkConfig {
    /// A small configuration for gradient checks and fast tests.
    pub fn toy() -> Self {
        NetworkConfig {
            scales: 3,
            base_channels: 8,
            out_channels: 2,
            window_size: 2,
            attn_heads: 2,
            embed_dim: 4,
            patch_size: 2,
            fas_branches: 2,
            fas_kernels: vec![3, 5],
            fas_groups: 2,
        }
    }

    pub fn channels_at(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    pub fn embed_at(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales < 2 {
            return Err(FpsError::InvalidInput("scales must be >= 2".into()));
        }
        let div = self.fas_branches * self.fas_groups;
        if self.fas_kernels.len() != self.fas_branches {
            return Err(FpsError::InvalidInput(format!(
                "{} kernel sizes for {} branches",
                self.fas_kernels.len(),
                self.fas_branches
            )));
        }
        for &k in &self.fas_kernels {
            if k % 2 == 0 {
                return Err(FpsError::InvalidInput(format!("kernel size {k} must be odd")));
            }
        }
        if self.base_channels % div != 0 {
            return Err(FpsError::InvalidInput(format!(
                "base_channels {} must divide by branches*groups {div}",
                self.base_channels
            )));
        }
        if self.base_channels % 2 != 0 {
            return Err(FpsError::InvalidInput("base_channels must be even".into()));
        }
        if self.embed_dim % self.attn_heads != 0 {
            return Err(FpsError::InvalidInput(format!(
                "embed_dim {} must divide by attn_heads {}",
                self.embed_dim, self.attn_heads
            )));
        }
        Ok(())
    }

    /// Validate an input plane size against every divisibility constraint.
    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        let down = 1usize << (self.scales - 1);
        if h % down != 0 || w % down != 0 {
            return Err(FpsError::InvalidInput(format!(
                "input {h}x{w} must divide by 2^(S-1) = {down}"
            )));
        }
        for stage in 0..self.scales {
            let rh = h / (self.patch_size << stage);
            let rw = w / (self.patch_size << stage);
            if rh == 0
                || rw == 0
                || rh % self.window_size != 0
                || rw % self.window_size != 0
                || h % (self.patch_size << stage) != 0
                || w % (self.patch_size << stage) != 0
            {
                return Err(FpsError::InvalidInput(format!(
                    "attention stage {stage} resolution {rh}x{rw} incompatible with window {}",
                    self.window_size
                )));
            }
        }
        // every cFAS site needs even spatial dims; the coarsest scale is the
        // binding constraint
        if (h / down) % 2 != 0 || (w / down) % 2 != 0 {
            return Err(FpsError::InvalidInput(format!(
                "coarsest scale {}x{} must be even",
                h / down,
                w / down
            )));
        }
        Ok(())
    }
}

/// Graph-building context for one forward pass: caches one leaf per parameter
/// name so gradients accumulate onto a single tensor, and owns the
/// batch-norm running buffers for the pass.
pub struct Forward<'a> {
    pub graph: &'a mut Graph,
    pub params: &'a ParamSet,
    pub bn_buffers: &'a mut ParamSet,
    pub mode: Mode,
    /// In train mode, whether running statistics are written back.
    pub update_stats: bool,
    vars: HashMap<String, Var>,
}

impl<'a> Forward<'a> {
    pub fn new(
        graph: &'a mut Graph,
        params: &'a ParamSet,
        bn_buffers: &'a mut ParamSet,
        mode: Mode,
        update_stats: bool,
    ) -> Self {
        Forward { graph, params, bn_buffers, mode, update_stats, vars: HashMap::new() }
    }

    /// Leaf var for a named parameter, cached per name.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = self.graph.leaf(t);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// The param-name -> leaf-var map accumulated during the pass.
    pub fn param_vars(&self) -> &HashMap<String, Var> {
        &self.vars
    }

    pub fn conv(&mut self, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(self.graph.conv2d(x, w, b, stride, pad))
    }

    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(self.graph.linear(x, w, b))
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(self.graph.layer_norm(x, g, b, LN_EPS))
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.g"))?;
        let beta = self.p(&format!("{prefix}.b"))?;
        let mean_name = format!("{prefix}.mean");
        let var_name = format!("{prefix}.var");
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = self.graph.batch_norm_train(x, gamma, beta, BN_EPS);
                if self.update_stats {
                    let old_mean = self.bn_buffers.get(&mean_name)?.clone();
                    let old_var = self.bn_buffers.get(&var_name)?.clone();
                    let m = BN_MOMENTUM;
                    self.bn_buffers
                        .set(&mean_name, old_mean.zip(&mean, |o, n| (1.0 - m) * o + m * n))?;
                    self.bn_buffers
                        .set(&var_name, old_var.zip(&var, |o, n| (1.0 - m) * o + m * n))?;
                }
                Ok(y)
            }
            Mode::Infer => {
                let mean = self.bn_buffers.get(&mean_name)?.clone();
                let var = self.bn_buffers.get(&var_name)?.clone();
                Ok(self.graph.batch_norm_infer(x, gamma, beta, &mean, &var, BN_EPS))
            }
        }
    }

    /// conv + BN + relu + cFAS, the repeating CNN unit.
    fn conv_unit(&mut self, prefix: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv(&format!("{prefix}.conv"), x, stride, 1)?;
        let y = self.batch_norm(&format!("{prefix}.bn"), y)?;
        let y = self.graph.relu(y);
        cfas::cfas_graph(self, &format!("{prefix}.cfas"), y)
    }
}

// ---- initialization ----

pub(crate) fn uniform_fan_in(
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

pub(crate) fn init_conv(
    params: &mut ParamSet,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) {
    params.insert(
        format!("{prefix}.w"),
        uniform_fan_in(&[cout, cin, k, k], cin * k * k, rng),
    );
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

pub(crate) fn init_linear(
    params: &mut ParamSet,
    prefix: &str,
    din: usize,
    dout: usize,
    rng: &mut ChaCha8Rng,
) {
    params.insert(format!("{prefix}.w"), uniform_fan_in(&[din, dout], din, rng));
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[dout]));
}

pub(crate) fn init_bn(params: &mut ParamSet, buffers: &mut ParamSet, prefix: &str, c: usize) {
    params.insert(format!("{prefix}.g"), Tensor::full(&[c], 1.0));
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[c]));
    buffers.insert(format!("{prefix}.mean"), Tensor::zeros(&[c]));
    buffers.insert(format!("{prefix}.var"), Tensor::full(&[c], 1.0));
}

pub(crate) fn init_ln(params: &mut ParamSet, prefix: &str, d: usize) {
    params.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0));
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
}

fn init_conv_unit(
    params: &mut ParamSet,
    buffers: &mut ParamSet,
    prefix: &str,
    cin: usize,
    cout: usize,
    rng: &mut ChaCha8Rng,
) {
    init_conv(params, &format!("{prefix}.conv"), cin, cout, 3, rng);
    init_bn(params, buffers, &format!("{prefix}.bn"), cout);
    cfas::init_cfas(params, &format!("{prefix}.cfas"), cout);
}

/// Deterministic parameter initialization. Returns (learnable parameters,
/// batch-norm running buffers).
pub fn init_parameters(cfg: &NetworkConfig, seed: u64) -> Result<(ParamSet, ParamSet)> {
    use rand::SeedableRng;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let mut buf = ParamSet::new();

    // CNN path: UBlock at full resolution
    let c0 = cfg.base_channels;
    init_conv_unit(&mut p, &mut buf, "cnn.ublock.stem", 2, c0, &mut rng);
    init_conv_unit(&mut p, &mut buf, "cnn.ublock.enc", c0, c0, &mut rng);
    init_conv_unit(&mut p, &mut buf, "cnn.ublock.down", c0, 2 * c0, &mut rng);
    init_conv_unit(&mut p, &mut buf, "cnn.ublock.mid", 2 * c0, 2 * c0, &mut rng);
    init_conv_unit(&mut p, &mut buf, "cnn.ublock.up", 2 * c0, c0, &mut rng);
    init_conv_unit(&mut p, &mut buf, "cnn.ublock.fuse", 2 * c0, c0, &mut rng);
    fas::init_fas(&mut p, &mut buf, "cnn.ublock.fas", c0, cfg, &mut rng);

    // residual blocks, one per coarser scale
    for s in 1..cfg.scales {
        let cin = cfg.channels_at(s - 1);
        let cout = cfg.channels_at(s);
        let pre = format!("cnn.res{s}");
        init_conv_unit(&mut p, &mut buf, &format!("{pre}.down"), cin, cout, &mut rng);
        for unit in 0..2 {
            init_conv_unit(&mut p, &mut buf, &format!("{pre}.u{unit}.a"), cout, cout, &mut rng);
            init_conv(&mut p, &format!("{pre}.u{unit}.b.conv"), cout, cout, 3, &mut rng);
            init_bn(&mut p, &mut buf, &format!("{pre}.u{unit}.b.bn"), cout);
            cfas::init_cfas(&mut p, &format!("{pre}.u{unit}.out.cfas"), cout);
        }
        fas::init_fas(&mut p, &mut buf, &format!("{pre}.fas"), cout, cfg, &mut rng);
    }

    // attention path
    attention::init_attention(&mut p, cfg, &mut rng);

    // per-scale feature merging
    for s in 0..cfg.scales {
        fai::init_fai(&mut p, &format!("fai.s{s}"), cfg.embed_at(s), cfg.channels_at(s), &mut rng);
    }

    // decoder and heads; decoder scale s consumes scale s+1
    for s in 0..cfg.scales - 1 {
        let cin = cfg.channels_at(s + 1) + 2;
        let cout = cfg.channels_at(s) + 2;
        init_conv_unit(&mut p, &mut buf, &format!("dec.s{s}"), cin, cout, &mut rng);
    }
    for s in 0..cfg.scales {
        init_conv(&mut p, &format!("head.s{s}"), cfg.channels_at(s) + 2, cfg.out_channels, 1, &mut rng);
    }

    Ok((p, buf))
}

// ---- forward pass ----

/// All scale outputs of one pass (finest first) plus the parameter-leaf map
/// for gradient extraction.
pub struct ForwardPass {
    pub outputs: Vec<Var>,
    pub param_vars: HashMap<String, Var>,
}

fn ublock(fwd: &mut Forward, x0: Var, cfg: &NetworkConfig) -> Result<Var> {
    let stem = fwd.conv_unit("cnn.ublock.stem", x0, 1)?;
    let enc = fwd.conv_unit("cnn.ublock.enc", stem, 1)?;
    let down = fwd.conv_unit("cnn.ublock.down", enc, 2)?;
    let mid = fwd.conv_unit("cnn.ublock.mid", down, 1)?;
    let shape = fwd.graph.value(mid).shape().to_vec();
    let up = fwd.graph.bilinear_resize(mid, shape[2] * 2, shape[3] * 2);
    let up = fwd.conv_unit("cnn.ublock.up", up, 1)?;
    let cat = fwd.graph.concat_channels(&[up, enc]);
    let fuse = fwd.conv_unit("cnn.ublock.fuse", cat, 1)?;
    fas::fas_graph(fwd, "cnn.ublock.fas", fuse, cfg)
}

fn res_block(fwd: &mut Forward, x: Var, scale: usize, cfg: &NetworkConfig) -> Result<Var> {
    let pre = format!("cnn.res{scale}");
    let mut h = fwd.conv_unit(&format!("{pre}.down"), x, 2)?;
    for unit in 0..2 {
        let t = fwd.conv_unit(&format!("{pre}.u{unit}.a"), h, 1)?;
        let u = fwd.conv(&format!("{pre}.u{unit}.b.conv"), t, 1, 1)?;
        let u = fwd.batch_norm(&format!("{pre}.u{unit}.b.bn"), u)?;
        let sum = fwd.graph.add(u, h);
        let act = fwd.graph.relu(sum);
        h = cfas::cfas_graph(fwd, &format!("{pre}.u{unit}.out.cfas"), act)?;
    }
    fas::fas_graph(fwd, &format!("{pre}.fas"), h, cfg)
}

/// Build the full network graph over an input batch `(B, 2, H, W)`.
pub fn forward_graph(fwd: &mut Forward, x0: &Tensor, cfg: &NetworkConfig) -> Result<ForwardPass> {
    let shape = x0.shape();
    if shape.len() != 4 || shape[1] != 2 {
        return Err(FpsError::shape("(B, 2, H, W)", format!("{shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    cfg.validate_input(h, w)?;
    if !x0.is_finite() {
        return Err(FpsError::InvalidInput("non-finite network input".into()));
    }
    let x0v = fwd.graph.leaf(x0.clone());
    let outputs = forward_graph_inner(fwd, x0v, h, w, cfg)?;
    Ok(ForwardPass { outputs, param_vars: fwd.param_vars().clone() })
}

/// Network body over an existing input leaf.
pub(crate) fn forward_graph_inner(
    fwd: &mut Forward,
    x0v: Var,
    h: usize,
    w: usize,
    cfg: &NetworkConfig,
) -> Result<Vec<Var>> {
    // CNN path: M_s per scale
    let mut cnn_feats = Vec::with_capacity(cfg.scales);
    let m1 = ublock(fwd, x0v, cfg).map_err(|e| e.with_context("ublock"))?;
    cnn_feats.push(m1);
    for s in 1..cfg.scales {
        let prev = cnn_feats[s - 1];
        let m = res_block(fwd, prev, s, cfg).map_err(|e| e.with_context("res block"))?;
        cnn_feats.push(m);
    }

    // attention path: T_s per stage
    let attn_feats = attention::attention_path(fwd, x0v, cfg)
        .map_err(|e| e.with_context("attention path"))?;

    // merge per scale
    let mut merged = Vec::with_capacity(cfg.scales);
    for s in 0..cfg.scales {
        let xs = fwd.graph.bilinear_resize(x0v, h >> s, w >> s);
        let mi = fai::fai_graph(fwd, &format!("fai.s{s}"), xs, cnn_feats[s], attn_feats[s])
            .map_err(|e| e.with_context("feature merge"))?;
        merged.push(mi);
    }

    // decoder from the coarsest scale upward
    let mut decoded = vec![None; cfg.scales];
    decoded[cfg.scales - 1] = Some(merged[cfg.scales - 1]);
    for s in (0..cfg.scales - 1).rev() {
        let coarse = decoded[s + 1].unwrap();
        let cshape = fwd.graph.value(coarse).shape().to_vec();
        let up = fwd.graph.bilinear_resize(coarse, cshape[2] * 2, cshape[3] * 2);
        let refined = fwd.conv_unit(&format!("dec.s{s}"), up, 1)?;
        decoded[s] = Some(fwd.graph.add(refined, merged[s]));
    }

    let mut outputs = Vec::with_capacity(cfg.scales);
    for s in 0..cfg.scales {
        let o = fwd.conv(&format!("head.s{s}"), decoded[s].unwrap(), 1, 0)?;
        outputs.push(o);
    }
    Ok(outputs)
}

/// Value-level forward: builds a throwaway graph and returns the S output
/// tensors, finest first.
pub fn hfsnet_forward(
    x0: &Tensor,
    params: &ParamSet,
    bn_buffers: &mut ParamSet,
    cfg: &NetworkConfig,
    mode: Mode,
) -> Result<Vec<Tensor>> {
    let mut graph = Graph::new();
    let update = mode == Mode::Train;
    let mut fwd = Forward::new(&mut graph, params, bn_buffers, mode, update);
    let pass = forward_graph(&mut fwd, x0, cfg)?;
    let outs: Vec<Tensor> = pass.outputs.iter().map(|&v| graph.value(v).clone()).collect();
    for (i, o) in outs.iter().enumerate() {
        if !o.is_finite() {
            return Err(FpsError::Divergence { term: format!("network output scale {i}") });
        }
    }
    Ok(outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn forward_shapes_match_scale_contract() {
        let cfg = NetworkConfig::toy();
        let (params, mut buf) = init_parameters(&cfg, 0).unwrap();
        let x = rand_input(&[1, 2, 64, 64], 1);
        let outs = hfsnet_forward(&x, &params, &mut buf, &cfg, Mode::Train).unwrap();
        assert_eq!(outs.len(), 3);
        assert_eq!(outs[0].shape(), &[1, 2, 64, 64]);
        assert_eq!(outs[1].shape(), &[1, 2, 32, 32]);
        assert_eq!(outs[2].shape(), &[1, 2, 16, 16]);
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let cfg = NetworkConfig::toy();
        let (params, mut buf) = init_parameters(&cfg, 0).unwrap();
        let zeroed: ParamSet = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        let x = rand_input(&[1, 2, 16, 16], 2);
        let outs = hfsnet_forward(&x, &zeroed, &mut buf, &cfg, Mode::Train).unwrap();
        for o in outs {
            assert_eq!(o.max_abs(), 0.0);
        }
    }

    #[test]
    fn duplicated_sample_duplicates_outputs_in_infer_mode() {
        let cfg = NetworkConfig::toy();
        let (params, mut buf) = init_parameters(&cfg, 3).unwrap();
        let x1 = rand_input(&[1, 2, 16, 16], 4);
        // warm the running stats with one training pass
        let _ = hfsnet_forward(&x1, &params, &mut buf, &cfg, Mode::Train).unwrap();
        let mut doubled = x1.to_vec();
        doubled.extend_from_slice(x1.data());
        let x2 = Tensor::from_vec(&[2, 2, 16, 16], doubled);
        let o1 = hfsnet_forward(&x1, &params, &mut buf.clone(), &cfg, Mode::Infer).unwrap();
        let o2 = hfsnet_forward(&x2, &params, &mut buf.clone(), &cfg, Mode::Infer).unwrap();
        for (a, b) in o1.iter().zip(o2.iter()) {
            let n = a.len();
            assert_eq!(&b.data()[..n], a.data(), "first copy");
            assert_eq!(&b.data()[n..], a.data(), "second copy");
        }
    }

    #[test]
    fn init_is_deterministic_and_statistically_centered() {
        let cfg = NetworkConfig::default();
        let (p1, _) = init_parameters(&cfg, 42).unwrap();
        let (p2, _) = init_parameters(&cfg, 42).unwrap();
        assert_eq!(p1, p2);
        let (p3, _) = init_parameters(&cfg, 43).unwrap();
        assert!(p1 != p3);

        for (name, t) in p1.iter() {
            // conv weights with fan-in >= 64 should have near-zero mean
            if name.ends_with(".conv.w") && t.shape().len() == 4 {
                let fan_in = t.shape()[1] * t.shape()[2] * t.shape()[3];
                if fan_in >= 64 && t.len() >= 256 && t.max_abs() > 0.0 {
                    assert!(
                        t.mean().abs() < 0.05,
                        "{name}: mean {} too far from 0",
                        t.mean()
                    );
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = NetworkConfig::toy();
        let (params, buf) = init_parameters(&cfg, 5).unwrap();
        let x = rand_input(&[2, 2, 16, 16], 6);
        let o1 = hfsnet_forward(&x, &params, &mut buf.clone(), &cfg, Mode::Train).unwrap();
        let o2 = hfsnet_forward(&x, &params, &mut buf.clone(), &cfg, Mode::Train).unwrap();
        for (a, b) in o1.iter().zip(o2.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn invalid_input_sizes_are_rejected() {
        let cfg = NetworkConfig::toy();
        let (params, mut buf) = init_parameters(&cfg, 0).unwrap();
        let x = rand_input(&[1, 2, 20, 20], 7);
        assert!(hfsnet_forward(&x, &params, &mut buf, &cfg, Mode::Train).is_err());
        let x = rand_input(&[1, 3, 16, 16], 8);
        assert!(hfsnet_forward(&x, &params, &mut buf, &cfg, Mode::Train).is_err());
    }
}
