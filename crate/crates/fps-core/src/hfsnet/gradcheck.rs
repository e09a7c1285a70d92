//! Finite-difference verification of analytic gradients: every learnable
//! tensor (and the input) is probed with central differences against the
//! tape's reverse pass.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FpsError, Result};
use crate::hfsnet::{attention, cfas, fai, fas, Forward, Mode, NetworkConfig};
use crate::tensor::{Graph, ParamSet, Tensor, Var};

/// An operation under gradient test: builds its subgraph over the parameter
/// context plus one input leaf and reduces to a scalar test loss.
pub trait DifferentiableOp {
    fn build(&self, fwd: &mut Forward, input: Var) -> Result<Var>;
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    /// (tensor name, max relative error over probed entries)
    pub per_tensor: Vec<(String, f64)>,
    pub probes: usize,
}

/// Deterministic random projection to a scalar: `mean(out * fixed)`.
pub fn project_loss(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = g.leaf(Tensor::rand_uniform(&shape, -1.0, 1.0, &mut rng));
    let weighted = g.mul(out, proj);
    g.mean_all(weighted)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs().max(n.abs()) + 1e-6)
}

fn eval_loss(
    op: &dyn DifferentiableOp,
    params: &ParamSet,
    bn_buffers: &ParamSet,
    input: &Tensor,
) -> Result<f64> {
    let mut graph = Graph::new();
    let mut buffers = bn_buffers.clone();
    let mut fwd = Forward::new(&mut graph, params, &mut buffers, Mode::Train, false);
    let iv = fwd.graph.leaf(input.clone());
    let loss = op.build(&mut fwd, iv)?;
    Ok(graph.value(loss).item())
}

/// Compare analytic gradients of `op` against central finite differences.
/// At most `max_probes_per_tensor` entries of each tensor are probed (seeded
/// choice); pass 0 to probe everything.
pub fn check_gradients(
    op: &dyn DifferentiableOp,
    params: &ParamSet,
    bn_buffers: &ParamSet,
    input: &Tensor,
    step: f64,
    max_probes_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    // analytic pass
    let mut graph = Graph::new();
    let mut buffers = bn_buffers.clone();
    let mut fwd = Forward::new(&mut graph, params, &mut buffers, Mode::Train, false);
    let iv = fwd.graph.leaf(input.clone());
    let loss = op.build(&mut fwd, iv)?;
    let param_vars = fwd.param_vars().clone();
    let grads = graph.backward(loss);

    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, var) in &param_vars {
        let grad = grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(graph.value(*var).shape()));
        if !grad.is_finite() {
            return Err(FpsError::Divergence { term: format!("gradient of {name}") });
        }
        tensors.push((name.clone(), grad));
    }
    let input_grad = grads[iv.0]
        .clone()
        .unwrap_or_else(|| Tensor::zeros(input.shape()));
    if !input_grad.is_finite() {
        return Err(FpsError::Divergence { term: "gradient of input".into() });
    }
    tensors.push(("input".to_string(), input_grad));
    tensors.sort_by(|a, b| a.0.cmp(&b.0));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_tensor = Vec::new();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut probes = 0usize;

    for (name, analytic) in &tensors {
        let n = analytic.len();
        let indices: Vec<usize> = if max_probes_per_tensor == 0 || n <= max_probes_per_tensor {
            (0..n).collect()
        } else {
            let mut picked: Vec<usize> = (0..max_probes_per_tensor)
                .map(|_| rng.random_range(0..n))
                .collect();
            picked.sort_unstable();
            picked.dedup();
            picked
        };
        let mut tensor_max = 0.0f64;
        for &k in &indices {
            probes += 1;
            let (fp, fm) = if name == "input" {
                let orig = input.data()[k];
                let plus = input.with_value_at(k, orig + step);
                let minus = input.with_value_at(k, orig - step);
                (
                    eval_loss(op, params, bn_buffers, &plus)?,
                    eval_loss(op, params, bn_buffers, &minus)?,
                )
            } else {
                let base = params.get(name)?;
                let orig = base.data()[k];
                let mut plus_params = params.clone();
                plus_params.set(name, base.with_value_at(k, orig + step))?;
                let mut minus_params = params.clone();
                minus_params.set(name, base.with_value_at(k, orig - step))?;
                (
                    eval_loss(op, &plus_params, bn_buffers, input)?,
                    eval_loss(op, &minus_params, bn_buffers, input)?,
                )
            };
            let numeric = (fp - fm) / (2.0 * step);
            let e = rel_err(analytic.data()[k], numeric);
            tensor_max = tensor_max.max(e);
        }
        if tensor_max > max_rel {
            max_rel = tensor_max;
            worst = name.clone();
        }
        per_tensor.push((name.clone(), tensor_max));
    }

    Ok(GradCheckReport { max_rel_err: max_rel, worst_tensor: worst, per_tensor, probes })
}

// ---- adapters for the spec-level ops ----

pub struct CfasOp {
    pub prefix: String,
}

impl DifferentiableOp for CfasOp {
    fn build(&self, fwd: &mut Forward, input: Var) -> Result<Var> {
        let out = cfas::cfas_graph(fwd, &self.prefix, input)?;
        Ok(project_loss(fwd.graph, out, 7001))
    }
}

pub struct FasOp {
    pub prefix: String,
    pub cfg: NetworkConfig,
}

impl DifferentiableOp for FasOp {
    fn build(&self, fwd: &mut Forward, input: Var) -> Result<Var> {
        let out = fas::fas_graph(fwd, &self.prefix, input, &self.cfg)?;
        Ok(project_loss(fwd.graph, out, 7002))
    }
}

/// Input var feeds the attention features; the CNN features and the
/// downsampled image are fixed.
pub struct FaiOp {
    pub prefix: String,
    pub x_s: Tensor,
    pub m_s: Tensor,
}

impl DifferentiableOp for FaiOp {
    fn build(&self, fwd: &mut Forward, input: Var) -> Result<Var> {
        let xs = fwd.graph.leaf(self.x_s.clone());
        let ms = fwd.graph.leaf(self.m_s.clone());
        let out = fai::fai_graph(fwd, &self.prefix, xs, ms, input)?;
        Ok(project_loss(fwd.graph, out, 7003))
    }
}

pub struct AttentionStageOp {
    pub stage: usize,
    pub cfg: NetworkConfig,
}

impl DifferentiableOp for AttentionStageOp {
    fn build(&self, fwd: &mut Forward, input: Var) -> Result<Var> {
        let tokens = fwd.graph.permute(input, &[0, 2, 3, 1]);
        let out = attention::attention_stage_graph(fwd, self.stage, tokens, &self.cfg)?;
        Ok(project_loss(fwd.graph, out, 7004))
    }
}

/// The whole network; the loss projects every scale output.
pub struct HfsnetOp {
    pub cfg: NetworkConfig,
}

impl DifferentiableOp for HfsnetOp {
    fn build(&self, fwd: &mut Forward, input: Var) -> Result<Var> {
        let x0 = fwd.graph.value(input).clone();
        // forward_graph inserts its own input leaf; rebuild on top of the
        // probe tensor while keeping `input` wired into the tape
        let pass = forward_graph_on(fwd, input, &x0, &self.cfg)?;
        let mut total = None;
        for (s, &out) in pass.iter().enumerate() {
            let l = project_loss(fwd.graph, out, 7100 + s as u64);
            total = Some(match total {
                Some(acc) => fwd.graph.add(acc, l),
                None => l,
            });
        }
        Ok(total.expect("at least one scale"))
    }
}

/// forward_graph wired onto an existing input leaf.
fn forward_graph_on(
    fwd: &mut Forward,
    input: Var,
    x0: &Tensor,
    cfg: &NetworkConfig,
) -> Result<Vec<Var>> {
    let shape = x0.shape();
    if shape.len() != 4 || shape[1] != 2 {
        return Err(FpsError::shape("(B, 2, H, W)", format!("{shape:?}")));
    }
    cfg.validate_input(shape[2], shape[3])?;
    let pass = crate::hfsnet::forward_graph_inner(fwd, input, shape[2], shape[3], cfg)?;
    Ok(pass)
}
