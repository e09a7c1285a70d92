//! Mean-teacher optimization: a student network updated by gradient descent
//! on the combined supervised, consistency and unsupervised losses, and a
//! teacher whose weights are the running average of student snapshots.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FpsError, Result};
use crate::fpsd;
use crate::hfsnet::{forward_graph, Forward, Mode, NetworkConfig};
use crate::kspace::{fft2, perturb_image, ComplexImage, DistanceMap, PerturbationConfig};
use crate::phantom::{ParameterMaps, SamplePair, ADC_SCALE, T2_SCALE};
use crate::tensor::{Graph, ParamSet, Tensor, Var};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Weight of the spectral term inside the spatial+frequency loss.
    pub lambda_freq: f64,
    pub perturbation: PerturbationConfig,
    pub network: NetworkConfig,
    pub seed: u64,
    /// Checkpoint period in iterations (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            total_iterations: 1000,
            lr_start: 1e-4,
            lr_end: 1e-6,
            lambda_freq: 0.1,
            perturbation: PerturbationConfig::default(),
            network: NetworkConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iterations < 1 {
            return Err(FpsError::InvalidInput("total_iterations must be >= 1".into()));
        }
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(FpsError::InvalidInput(format!(
                "require lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.batch_size == 0 {
            return Err(FpsError::InvalidInput("batch_size must be >= 1".into()));
        }
        self.perturbation.validate()?;
        self.network.validate()
    }

    /// FNV-1a over the debug form; stored in checkpoints to catch resumes
    /// under a different configuration.
    pub fn content_hash(&self) -> u64 {
        let repr = format!("{self:?}");
        let mut h: u64 = 0xcbf29ce484222325;
        for byte in repr.as_bytes() {
            h ^= *byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Paired student/teacher parameters plus optimizer moments and the
/// batch-norm running buffers (owned by the student, shared for inference).
#[derive(Debug, Clone)]
pub struct TeacherStudentState {
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub bn_buffers: ParamSet,
    pub opt_m: ParamSet,
    pub opt_v: ParamSet,
    pub iteration: usize,
    pub seed: u64,
}

impl TeacherStudentState {
    pub fn init(network: &NetworkConfig, seed: u64) -> Result<Self> {
        let (student, bn_buffers) = crate::hfsnet::init_parameters(network, seed)?;
        let teacher = student.clone();
        let zeros = |src: &ParamSet| -> ParamSet {
            src.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect()
        };
        Ok(TeacherStudentState {
            opt_m: zeros(&student),
            opt_v: zeros(&student),
            teacher,
            student,
            bn_buffers,
            iteration: 0,
            seed,
        })
    }
}

// ---- losses ----

/// Spatial+frequency distance: `mean|x - y| + lambda * mean|fft2(x) - fft2(y)|`,
/// the spectral term taken per trailing (H, W) plane under the unitary
/// transform. Value-level version for evaluation and oracles.
pub fn sf_loss(x: &Tensor, y: &Tensor, lambda_freq: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(FpsError::shape(format!("{:?}", x.shape()), format!("{:?}", y.shape())));
    }
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(FpsError::shape("rank >= 2", format!("{shape:?}")));
    }
    let n = x.len() as f64;
    let spatial = x
        .data()
        .iter()
        .zip(y.data().iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    let w = shape[shape.len() - 1];
    let h = shape[shape.len() - 2];
    let planes = x.len() / (h * w);
    let mut spectral = 0.0;
    for p in 0..planes {
        let base = p * h * w;
        let diff: Vec<f64> = (0..h * w)
            .map(|k| x.data()[base + k] - y.data()[base + k])
            .collect();
        let img = ComplexImage::from_real(h, w, diff)?;
        let spec = fft2(&img)?;
        for i in 0..h {
            for j in 0..w {
                spectral += spec.get(i, j).norm();
            }
        }
    }
    Ok(spatial + lambda_freq * spectral / n)
}

/// Graph node version of [`sf_loss`].
pub fn sf_loss_graph(g: &mut Graph, x: Var, y: Var, lambda_freq: f64) -> Var {
    let spatial = g.l1_mean(x, y);
    let spectral = g.spectral_l1_mean(x, y);
    let scaled = g.scale(spectral, lambda_freq);
    g.add(spatial, scaled)
}

/// Ramp weight of the unlabeled-stream loss: `exp(-5 p^2)` with
/// `p = 1 - iteration/total`, strictly increasing from `e^-5` to 1.
pub fn lambda_real(iteration: usize, total: usize) -> Result<f64> {
    if total < 1 {
        return Err(FpsError::InvalidInput("total iterations must be >= 1".into()));
    }
    if iteration > total {
        return Err(FpsError::InvalidInput(format!(
            "iteration {iteration} exceeds total {total}"
        )));
    }
    let p = 1.0 - iteration as f64 / total as f64;
    Ok((-5.0 * p * p).exp())
}

/// `teacher = alpha * teacher + (1 - alpha) * student` with
/// `alpha = 1 - 1/(iteration + 1)`; at iteration 0 the teacher becomes an
/// exact copy, and after n steps it equals the mean of the n+1 student
/// snapshots.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, iteration: usize) -> Result<()> {
    let alpha = 1.0 - 1.0 / (iteration as f64 + 1.0);
    teacher.blend_from(student, alpha)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossReport {
    pub l_con: f64,
    pub l_sup: f64,
    pub l_sup_teacher: f64,
    pub l_un_syn: f64,
    pub l_un_real: f64,
    pub lambda_real: f64,
    pub total: f64,
}

impl LossReport {
    fn first_non_finite(&self) -> Option<&'static str> {
        [
            (self.l_con, "l_con"),
            (self.l_sup, "l_sup"),
            (self.l_sup_teacher, "l_sup_teacher"),
            (self.l_un_syn, "l_un_syn"),
            (self.l_un_real, "l_un_real"),
            (self.total, "total"),
        ]
        .iter()
        .find(|(v, _)| !v.is_finite())
        .map(|(_, n)| *n)
    }
}

/// Combined objective over one step's four forward passes.
///
/// - consistency: per-scale student-vs-teacher distance on both streams
/// - supervised: student (and, monitored only, teacher) against the targets
/// - unsupervised: student-vs-teacher at full resolution per stream
///
/// Teacher outputs enter as constants; the returned `Var` carries gradient
/// for every term except the teacher-supervised one, which is constant and
/// participates only in the reported total.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_graph(
    g: &mut Graph,
    student_syn: &[Var],
    student_real: &[Var],
    teacher_syn: &[Tensor],
    teacher_real: &[Tensor],
    targets: &Tensor,
    iteration: usize,
    total_iterations: usize,
    lambda_freq: f64,
) -> Result<(Var, LossReport)> {
    let s = student_syn.len();
    if student_real.len() != s || teacher_syn.len() != s || teacher_real.len() != s {
        return Err(FpsError::shape(
            format!("{s} scale outputs in all four streams"),
            format!(
                "{}/{}/{}",
                student_real.len(),
                teacher_syn.len(),
                teacher_real.len()
            ),
        ));
    }
    let lam = lambda_real(iteration, total_iterations)?;

    let mut l_con: Option<Var> = None;
    for k in 0..s {
        let ts = g.leaf(teacher_syn[k].clone());
        let tr = g.leaf(teacher_real[k].clone());
        let con_s = sf_loss_graph(g, student_syn[k], ts, lambda_freq);
        let con_r = sf_loss_graph(g, student_real[k], tr, lambda_freq);
        let pair = g.add(con_s, con_r);
        l_con = Some(match l_con {
            Some(acc) => g.add(acc, pair),
            None => pair,
        });
    }
    let l_con = l_con.expect("at least one scale");

    let target_leaf = g.leaf(targets.clone());
    let l_sup = sf_loss_graph(g, student_syn[0], target_leaf, lambda_freq);

    let teacher_syn_full = g.leaf(teacher_syn[0].clone());
    let l_un_syn = sf_loss_graph(g, student_syn[0], teacher_syn_full, lambda_freq);
    let teacher_real_full = g.leaf(teacher_real[0].clone());
    let l_un_real = sf_loss_graph(g, student_real[0], teacher_real_full, lambda_freq);

    // teacher-vs-target is a constant of the step
    let l_sup_teacher = sf_loss(&teacher_syn[0], targets, lambda_freq)?;

    let un_real_scaled = g.scale(l_un_real, lam);
    let mut grad_total = g.add(l_con, l_sup);
    grad_total = g.add(grad_total, l_un_syn);
    grad_total = g.add(grad_total, un_real_scaled);

    let report = LossReport {
        l_con: g.value(l_con).item(),
        l_sup: g.value(l_sup).item(),
        l_sup_teacher,
        l_un_syn: g.value(l_un_syn).item(),
        l_un_real: g.value(l_un_real).item(),
        lambda_real: lam,
        total: g.value(grad_total).item() + l_sup_teacher,
    };
    Ok((grad_total, report))
}

// ---- optimizer ----

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Decoupled adaptive-momentum step with bias correction; `t` is 1-based.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &HashMap<String, Tensor>,
    opt_m: &mut ParamSet,
    opt_v: &mut ParamSet,
    lr: f64,
    t: usize,
) -> Result<()> {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let Some(grad) = grads.get(&name) else { continue };
        let m = opt_m.get(&name)?.zip(grad, |m, g| ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g);
        let v = opt_v.get(&name)?.zip(grad, |v, g| ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g);
        let theta = params.get(&name)?.clone();
        let mut out = theta.to_vec();
        for (i, slot) in out.iter_mut().enumerate() {
            let mhat = m.data()[i] / bc1;
            let vhat = v.data()[i] / bc2;
            *slot -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
        params.set(&name, Tensor::from_vec(theta.shape(), out))?;
        opt_m.set(&name, m)?;
        opt_v.set(&name, v)?;
    }
    Ok(())
}

/// Cosine decay from `lr_start` to `lr_end` over the full run.
pub fn cosine_lr(iteration: usize, cfg: &TrainConfig) -> f64 {
    let t = (iteration as f64 / cfg.total_iterations as f64).clamp(0.0, 1.0);
    cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
}

// ---- data preparation ----

/// Network input: the complex planes scaled by `1/max|img|` per image.
pub fn image_to_input(img: &ComplexImage) -> Tensor {
    let peak = img.max_modulus();
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let mut values = Vec::with_capacity(2 * img.re().len());
    values.extend(img.re().iter().map(|v| v * scale));
    values.extend(img.im().iter().map(|v| v * scale));
    Tensor::from_vec(&[2, img.height(), img.width()], values)
}

fn stack_inputs(images: &[&ComplexImage]) -> Tensor {
    let (h, w) = (images[0].height(), images[0].width());
    let mut values = Vec::with_capacity(images.len() * 2 * h * w);
    for img in images {
        values.extend(image_to_input(img).data());
    }
    Tensor::from_vec(&[images.len(), 2, h, w], values)
}

fn stack_targets(targets: &[&ParameterMaps]) -> Tensor {
    let (h, w) = (targets[0].height, targets[0].width);
    let mut values = Vec::with_capacity(targets.len() * 2 * h * w);
    for maps in targets {
        values.extend(maps.normalized_targets());
    }
    Tensor::from_vec(&[targets.len(), 2, h, w], values)
}

/// Per-(step, image, stream) perturbation seed, decorrelated by SplitMix64.
fn perturb_seed(base: u64, iteration: usize, index: usize, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(iteration as u64 + 1))
        .wrapping_add(0x94d049bb133111ebu64.wrapping_mul(index as u64 + 1))
        .wrapping_add(stream);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

// ---- the step ----

#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub iteration: usize,
    pub losses: LossReport,
    pub lr: f64,
}

fn forward_values(
    params: &ParamSet,
    bn_buffers: &mut ParamSet,
    cfg: &NetworkConfig,
    input: &Tensor,
) -> Result<Vec<Tensor>> {
    let mut graph = Graph::new();
    let mut fwd = Forward::new(&mut graph, params, bn_buffers, Mode::Train, false);
    let pass = forward_graph(&mut fwd, input, cfg)?;
    Ok(pass.outputs.iter().map(|&v| graph.value(v).clone()).collect())
}

/// One optimization step: perturb both streams, run the teacher on the
/// perturbed copies, the student on the clean ones, descend on the combined
/// loss, then fold the student into the teacher by running average.
pub fn train_step(
    state: &mut TeacherStudentState,
    labeled: &[SamplePair],
    unlabeled: &[SamplePair],
    dmap: &DistanceMap,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    cfg.validate()?;
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(FpsError::InvalidInput("batches must be non-empty".into()));
    }
    let iter = state.iteration;

    // perturbed copies for the teacher
    let perturbed = |pairs: &[SamplePair], stream: u64| -> Result<Vec<ComplexImage>> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let pcfg = PerturbationConfig {
                    seed: perturb_seed(cfg.perturbation.seed ^ cfg.seed, iter, i, stream),
                    ..cfg.perturbation.clone()
                };
                perturb_image(&p.input, dmap, &pcfg)
            })
            .collect()
    };
    let syn_pert = perturbed(labeled, 1)?;
    let real_pert = perturbed(unlabeled, 2)?;

    let syn_inputs = stack_inputs(&labeled.iter().map(|p| &p.input).collect::<Vec<_>>());
    let real_inputs = stack_inputs(&unlabeled.iter().map(|p| &p.input).collect::<Vec<_>>());
    let syn_pert_inputs = stack_inputs(&syn_pert.iter().collect::<Vec<_>>());
    let real_pert_inputs = stack_inputs(&real_pert.iter().collect::<Vec<_>>());
    let targets = stack_targets(&labeled.iter().map(|p| &p.target).collect::<Vec<_>>());

    // teacher passes on the perturbed streams; graphs are dropped right away
    let teacher_syn = forward_values(&state.teacher, &mut state.bn_buffers, &cfg.network, &syn_pert_inputs)?;
    let teacher_real = forward_values(&state.teacher, &mut state.bn_buffers, &cfg.network, &real_pert_inputs)?;

    // student graph over both streams, with running-stat updates
    let mut graph = Graph::new();
    let mut fwd = Forward::new(&mut graph, &state.student, &mut state.bn_buffers, Mode::Train, true);
    let syn_pass = forward_graph(&mut fwd, &syn_inputs, &cfg.network)?;
    let real_pass = forward_graph(&mut fwd, &real_inputs, &cfg.network)?;
    let param_vars = syn_pass.param_vars.clone();

    let (loss_var, report) = total_loss_graph(
        &mut graph,
        &syn_pass.outputs,
        &real_pass.outputs,
        &teacher_syn,
        &teacher_real,
        &targets,
        iter,
        cfg.total_iterations,
        cfg.lambda_freq,
    )?;
    if let Some(term) = report.first_non_finite() {
        return Err(FpsError::Divergence { term: term.into() });
    }

    let grads_by_node = graph.backward(loss_var);
    let mut grads: HashMap<String, Tensor> = HashMap::new();
    for (name, var) in &param_vars {
        if let Some(gr) = &grads_by_node[var.0] {
            if !gr.is_finite() {
                return Err(FpsError::Divergence { term: format!("gradient of {name}") });
            }
            grads.insert(name.clone(), gr.clone());
        }
    }
    drop(graph);

    let lr = cosine_lr(iter, cfg);
    adam_step(&mut state.student, &grads, &mut state.opt_m, &mut state.opt_v, lr, iter + 1)?;
    ema_update(&mut state.teacher, &state.student, iter)?;
    state.iteration += 1;

    Ok(StepReport { iteration: iter, losses: report, lr })
}

/// Source-only baseline step: supervised loss on the labeled stream alone,
/// no teacher involvement beyond the running average.
pub fn supervised_step(
    state: &mut TeacherStudentState,
    labeled: &[SamplePair],
    cfg: &TrainConfig,
) -> Result<StepReport> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(FpsError::InvalidInput("batch must be non-empty".into()));
    }
    let iter = state.iteration;
    let inputs = stack_inputs(&labeled.iter().map(|p| &p.input).collect::<Vec<_>>());
    let targets = stack_targets(&labeled.iter().map(|p| &p.target).collect::<Vec<_>>());

    let mut graph = Graph::new();
    let mut fwd = Forward::new(&mut graph, &state.student, &mut state.bn_buffers, Mode::Train, true);
    let pass = forward_graph(&mut fwd, &inputs, &cfg.network)?;
    let param_vars = pass.param_vars.clone();
    let target_leaf = graph.leaf(targets);
    let loss = sf_loss_graph(&mut graph, pass.outputs[0], target_leaf, cfg.lambda_freq);
    let loss_val = graph.value(loss).item();
    if !loss_val.is_finite() {
        return Err(FpsError::Divergence { term: "l_sup".into() });
    }
    let grads_by_node = graph.backward(loss);
    let mut grads: HashMap<String, Tensor> = HashMap::new();
    for (name, var) in &param_vars {
        if let Some(gr) = &grads_by_node[var.0] {
            if !gr.is_finite() {
                return Err(FpsError::Divergence { term: format!("gradient of {name}") });
            }
            grads.insert(name.clone(), gr.clone());
        }
    }
    drop(graph);

    let lr = cosine_lr(iter, cfg);
    adam_step(&mut state.student, &grads, &mut state.opt_m, &mut state.opt_v, lr, iter + 1)?;
    ema_update(&mut state.teacher, &state.student, iter)?;
    state.iteration += 1;
    Ok(StepReport {
        iteration: iter,
        losses: LossReport {
            l_sup: loss_val,
            lambda_real: lambda_real(iter, cfg.total_iterations)?,
            total: loss_val,
            ..Default::default()
        },
        lr,
    })
}

/// Source-only baseline loop with the same batch schedule as [`train_loop`].
pub fn supervised_loop(
    state: &mut TeacherStudentState,
    labeled: &[SamplePair],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if labeled.is_empty() {
        if cfg.total_iterations > state.iteration {
            return Err(FpsError::InvalidInput("empty dataset".into()));
        }
        return Ok(log);
    }
    while state.iteration < cfg.total_iterations {
        let li = batch_indices(labeled.len(), cfg.batch_size, state.iteration, cfg.seed, 11);
        let lb: Vec<SamplePair> = li.iter().map(|&i| labeled[i].clone()).collect();
        log.rows.push(supervised_step(state, &lb, cfg)?);
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(dir, state, cfg)?;
    }
    Ok(log)
}

// ---- the loop ----

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<StepReport>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "iteration\tl_con\tl_sup\tl_sup_teacher\tl_un_syn\tl_un_real\tlambda_real\tlr\ttotal\n",
        );
        for r in &self.rows {
            let l = &r.losses;
            writeln!(
                out,
                "{}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}",
                r.iteration,
                l.l_con,
                l.l_sup,
                l.l_sup_teacher,
                l.l_un_syn,
                l.l_un_real,
                l.lambda_real,
                r.lr,
                l.total
            )
            .expect("write to string");
        }
        out
    }
}

/// Deterministic batch schedule: per-epoch permutation drawn from
/// (seed, stream, epoch), consumed in fixed-size chunks. Reconstructible
/// from the iteration index alone, which makes resume exact.
fn batch_indices(
    n: usize,
    batch_size: usize,
    iteration: usize,
    seed: u64,
    stream: u64,
) -> Vec<usize> {
    let bs = batch_size.min(n);
    let per_epoch = (n / bs).max(1);
    let epoch = iteration / per_epoch;
    let slot = iteration % per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ stream.wrapping_mul(0x9e3779b97f4a7c15) ^ (epoch as u64).wrapping_mul(0x2545f4914f6cdd1d),
    );
    order.shuffle(&mut rng);
    order[slot * bs..(slot + 1) * bs].to_vec()
}

/// Run `train_step` from the state's current iteration up to the configured
/// total, checkpointing every `checkpoint_every` iterations.
pub fn train_loop(
    state: &mut TeacherStudentState,
    labeled: &[SamplePair],
    unlabeled: &[SamplePair],
    dmap: &DistanceMap,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    train_segment(state, labeled, unlabeled, dmap, cfg, cfg.total_iterations, checkpoint_dir)
}

/// Like [`train_loop`] but stops at `until`, which must not exceed the
/// configured total. The schedule (learning rate, ramp weight, batch order)
/// is a pure function of the iteration index, so segmented runs glued by
/// checkpoints reproduce an uninterrupted run bit for bit.
pub fn train_segment(
    state: &mut TeacherStudentState,
    labeled: &[SamplePair],
    unlabeled: &[SamplePair],
    dmap: &DistanceMap,
    cfg: &TrainConfig,
    until: usize,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if until > cfg.total_iterations {
        return Err(FpsError::State(format!(
            "segment end {until} beyond configured total {}",
            cfg.total_iterations
        )));
    }
    if state.iteration > cfg.total_iterations {
        return Err(FpsError::State(format!(
            "state iteration {} beyond configured total {}",
            state.iteration, cfg.total_iterations
        )));
    }
    let mut log = TrainLog::default();
    if labeled.is_empty() || unlabeled.is_empty() {
        if until > state.iteration {
            return Err(FpsError::InvalidInput("empty dataset".into()));
        }
        return Ok(log);
    }
    while state.iteration < until {
        let li = batch_indices(labeled.len(), cfg.batch_size, state.iteration, cfg.seed, 11);
        let ui = batch_indices(unlabeled.len(), cfg.batch_size, state.iteration, cfg.seed, 13);
        let lb: Vec<SamplePair> = li.iter().map(|&i| labeled[i].clone()).collect();
        let ub: Vec<SamplePair> = ui.iter().map(|&i| unlabeled[i].clone()).collect();
        let report = train_step(state, &lb, &ub, dmap, cfg)?;
        log.rows.push(report);
        if let Some(dir) = checkpoint_dir {
            let due = cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0;
            if due {
                save_checkpoint(dir, state, cfg)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(dir, state, cfg)?;
    }
    Ok(log)
}

// ---- checkpoints ----

const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint directory layout: `state.fpsb` (tensor bundle with
/// `student.`/`teacher.`/`bn.`/`opt_m.`/`opt_v.` prefixes) plus a
/// `manifest.txt` key=value file.
pub fn save_checkpoint(dir: &Path, state: &TeacherStudentState, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bundle = fpsd::Bundle::new();
    let mut add = |prefix: &str, set: &ParamSet| {
        for (name, t) in set.iter() {
            bundle.insert(
                format!("{prefix}.{name}"),
                fpsd::FpsdArray::f64(t.shape().to_vec(), t.to_vec()),
            );
        }
    };
    add("student", &state.student);
    add("teacher", &state.teacher);
    add("bn", &state.bn_buffers);
    add("opt_m", &state.opt_m);
    add("opt_v", &state.opt_v);
    fpsd::write_bundle(&dir.join("state.fpsb"), &bundle)?;

    let manifest = format!(
        "version={}\niteration={}\nseed={}\nconfig_hash={:016x}\n",
        CHECKPOINT_VERSION,
        state.iteration,
        state.seed,
        cfg.content_hash()
    );
    let tmp = dir.join("manifest.txt.tmp");
    fs::write(&tmp, &manifest)?;
    fs::rename(tmp, dir.join("manifest.txt"))?;
    Ok(())
}

/// Load a checkpoint; when `expect` is given, the stored config hash must
/// match it.
pub fn load_checkpoint(dir: &Path, expect: Option<&TrainConfig>) -> Result<TeacherStudentState> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut fields: HashMap<&str, &str> = HashMap::new();
    for line in manifest.lines() {
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k, v);
        }
    }
    let get = |k: &str| -> Result<&str> {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| FpsError::State(format!("checkpoint manifest missing {k}")))
    };
    let version: u32 = get("version")?
        .parse()
        .map_err(|_| FpsError::State("bad checkpoint version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(FpsError::State(format!("unsupported checkpoint version {version}")));
    }
    let iteration: usize = get("iteration")?
        .parse()
        .map_err(|_| FpsError::State("bad iteration".into()))?;
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| FpsError::State("bad seed".into()))?;
    if let Some(cfg) = expect {
        let stored = u64::from_str_radix(get("config_hash")?, 16)
            .map_err(|_| FpsError::State("bad config hash".into()))?;
        if stored != cfg.content_hash() {
            return Err(FpsError::State(
                "checkpoint was written under a different configuration".into(),
            ));
        }
    }

    let bundle = fpsd::read_bundle(&dir.join("state.fpsb"))?;
    let mut split: HashMap<&str, ParamSet> = HashMap::new();
    for (name, arr) in &bundle {
        let (prefix, rest) = name
            .split_once('.')
            .ok_or_else(|| FpsError::State(format!("unprefixed checkpoint tensor {name}")))?;
        split
            .entry(match prefix {
                "student" => "student",
                "teacher" => "teacher",
                "bn" => "bn",
                "opt_m" => "opt_m",
                "opt_v" => "opt_v",
                other => {
                    return Err(FpsError::State(format!("unknown checkpoint prefix {other}")))
                }
            })
            .or_default()
            .insert(rest.to_string(), Tensor::new(arr.dims.clone(), arr.values.clone())?);
    }
    let mut take = |k: &str| -> Result<ParamSet> {
        split
            .remove(k)
            .ok_or_else(|| FpsError::State(format!("checkpoint missing {k} tensors")))
    };
    let state = TeacherStudentState {
        student: take("student")?,
        teacher: take("teacher")?,
        bn_buffers: take("bn")?,
        opt_m: take("opt_m")?,
        opt_v: take("opt_v")?,
        iteration,
        seed,
    };
    if !state.student.manifest_matches(&state.teacher) {
        return Err(FpsError::State("student/teacher manifests differ".into()));
    }
    Ok(state)
}

// ---- inference ----

/// Full-resolution maps in physical units from one complex input image.
pub fn infer_parameter_maps(
    params: &ParamSet,
    bn_buffers: &ParamSet,
    network: &NetworkConfig,
    img: &ComplexImage,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let input = image_to_input(img);
    let batched = input.reshaped(&[1, 2, img.height(), img.width()]);
    let mut buffers = bn_buffers.clone();
    let outs = crate::hfsnet::hfsnet_forward(&batched, params, &mut buffers, network, Mode::Infer)?;
    let full = &outs[0];
    let n = img.height() * img.width();
    let t2 = full.data()[..n].iter().map(|v| v * T2_SCALE).collect();
    let adc = full.data()[n..2 * n].iter().map(|v| v * ADC_SCALE).collect();
    Ok((t2, adc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::PerturbMode;
    use crate::phantom::{self, DomainTag};

    fn toy_cfg(iters: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            total_iterations: iters,
            lr_start: 1e-3,
            lr_end: 1e-5,
            lambda_freq: 0.1,
            perturbation: PerturbationConfig {
                mode: PerturbMode::FullSpectrum,
                epsilon: 0.5,
                seed: 7,
            },
            network: NetworkConfig::toy(),
            seed,
            checkpoint_every: 0,
        }
    }

    fn toy_dataset(n: usize, tag: DomainTag, seed0: u64) -> Vec<SamplePair> {
        (0..n)
            .map(|i| {
                let maps =
                    phantom::generate_parameter_maps(seed0 + i as u64, 16, 16, 3, 0.3).unwrap();
                let input = phantom::forward_signal(&maps, &phantom::default_echoes()).unwrap();
                SamplePair {
                    id: format!("p{i}"),
                    domain_tag: tag,
                    input,
                    target: maps,
                }
            })
            .collect()
    }

    fn toy_dmap() -> DistanceMap {
        let raw: Vec<f64> = (0..256).map(|k| (k % 17) as f64 / 16.0).collect();
        DistanceMap::from_raw(16, 16, raw, (4, 4)).unwrap()
    }

    #[test]
    fn sf_loss_of_identical_stacks_is_zero() {
        let x = Tensor::from_vec(&[2, 4, 4], (0..32).map(|v| v as f64).collect());
        assert_eq!(sf_loss(&x, &x, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn sf_loss_constant_offset_matches_direct_evaluation() {
        // both terms evaluated with an explicit two-transform oracle on 4x4
        let x = Tensor::from_vec(&[1, 4, 4], (0..16).map(|v| v as f64 * 0.25).collect());
        let c = 0.375;
        let y = x.map(|v| v + c);
        let got = sf_loss(&x, &y, 0.1).unwrap();
        // spatial term: c; spectral term: the DC spike of a constant is
        // sqrt(HW)*c under the unitary transform, averaged over HW entries
        let spectral = (16.0f64).sqrt() * c / 16.0;
        let expect = c + 0.1 * spectral;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn sf_loss_matches_two_term_oracle_on_random_stacks() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(&[2, 8, 8], -1.0, 1.0, &mut rng);
        let y = Tensor::rand_uniform(&[2, 8, 8], -1.0, 1.0, &mut rng);
        let got = sf_loss(&x, &y, 0.1).unwrap();

        let mut spatial = 0.0;
        let mut spectral = 0.0;
        for p in 0..2 {
            let xp = ComplexImage::from_real(8, 8, x.data()[p * 64..(p + 1) * 64].to_vec()).unwrap();
            let yp = ComplexImage::from_real(8, 8, y.data()[p * 64..(p + 1) * 64].to_vec()).unwrap();
            let fx = fft2(&xp).unwrap();
            let fy = fft2(&yp).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    spatial += (xp.get(i, j).re - yp.get(i, j).re).abs();
                    spectral += (fx.get(i, j) - fy.get(i, j)).norm();
                }
            }
        }
        let expect = spatial / 128.0 + 0.1 * spectral / 128.0;
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn lambda_real_endpoints_and_midpoint() {
        assert_eq!(lambda_real(1000, 1000).unwrap(), 1.0);
        assert!((lambda_real(0, 1000).unwrap() - (-5.0f64).exp()).abs() < 1e-15);
        assert!((lambda_real(500, 1000).unwrap() - (-1.25f64).exp()).abs() < 1e-15);
        assert!((lambda_real(500, 1000).unwrap() - 0.28650).abs() < 1e-5);
        assert!(lambda_real(5, 4).is_err());
    }

    #[test]
    fn lambda_real_is_strictly_increasing_and_bounded() {
        let mut prev = 0.0;
        for i in 0..=200 {
            let v = lambda_real(i, 200).unwrap();
            assert!(v > prev);
            assert!(v > (-5.0f64).exp() - 1e-12 && v <= 1.0);
            prev = v;
        }
    }

    #[test]
    fn ema_first_step_copies_student() {
        let net = NetworkConfig::toy();
        let mut state = TeacherStudentState::init(&net, 1).unwrap();
        let (other, _) = crate::hfsnet::init_parameters(&net, 2).unwrap();
        state.teacher = other;
        ema_update(&mut state.teacher, &state.student, 0).unwrap();
        for (name, t) in state.student.iter() {
            assert_eq!(state.teacher.get(name).unwrap().data(), t.data());
        }
    }

    #[test]
    fn ema_tracks_running_mean_of_snapshots() {
        let net = NetworkConfig::toy();
        let mut state = TeacherStudentState::init(&net, 3).unwrap();
        let mut snapshots: Vec<ParamSet> = Vec::new();
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for step in 0..20 {
            // jitter the student, snapshot it, fold into the teacher
            let jittered: ParamSet = state
                .student
                .iter()
                .map(|(n, t)| {
                    let noise: f64 = rng.random_range(-0.01..0.01);
                    (n.clone(), t.map(|v| v + noise))
                })
                .collect();
            state.student = jittered;
            snapshots.push(state.student.clone());
            ema_update(&mut state.teacher, &state.student, step).unwrap();
        }
        for (name, t) in state.teacher.iter() {
            let mut mean = vec![0.0; t.len()];
            for snap in &snapshots {
                for (m, v) in mean.iter_mut().zip(snap.get(name).unwrap().data()) {
                    *m += v / snapshots.len() as f64;
                }
            }
            for (a, b) in t.data().iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-6, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ema_converges_to_constant_student() {
        let net = NetworkConfig::toy();
        let mut state = TeacherStudentState::init(&net, 6).unwrap();
        let (other, _) = crate::hfsnet::init_parameters(&net, 7).unwrap();
        state.teacher = other;
        for step in 0..3 {
            ema_update(&mut state.teacher, &state.student, step).unwrap();
        }
        // step 0 already copies; later steps keep it fixed
        for (name, t) in state.student.iter() {
            let tt = state.teacher.get(name).unwrap();
            assert!(t.max_abs_diff(tt) < 1e-12, "{name}");
        }
    }

    #[test]
    fn total_loss_zero_when_everything_agrees() {
        let mut g = Graph::new();
        let out = Tensor::from_vec(&[1, 2, 4, 4], (0..32).map(|v| v as f64 * 0.1).collect());
        let coarse = Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|v| v as f64 * 0.1).collect());
        let sv = vec![g.leaf(out.clone()), g.leaf(coarse.clone())];
        let rv = vec![g.leaf(out.clone()), g.leaf(coarse.clone())];
        let (_, report) = total_loss_graph(
            &mut g,
            &sv,
            &rv,
            &[out.clone(), coarse.clone()],
            &[out.clone(), coarse.clone()],
            &out,
            10,
            10,
            0.1,
        )
        .unwrap();
        assert_eq!(report.total, 0.0);
        assert_eq!(report.l_con, 0.0);
        assert_eq!(report.l_sup, 0.0);
        assert_eq!(report.l_sup_teacher, 0.0);
    }

    #[test]
    fn total_loss_matches_sum_of_sf_losses_at_final_iteration() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mk = |rng: &mut ChaCha8Rng, shape: &[usize]| Tensor::rand_uniform(shape, -1.0, 1.0, rng);
        let s_full = mk(&mut rng, &[1, 2, 4, 4]);
        let s_half = mk(&mut rng, &[1, 2, 2, 2]);
        let r_full = mk(&mut rng, &[1, 2, 4, 4]);
        let r_half = mk(&mut rng, &[1, 2, 2, 2]);
        let ts_full = mk(&mut rng, &[1, 2, 4, 4]);
        let ts_half = mk(&mut rng, &[1, 2, 2, 2]);
        let tr_full = mk(&mut rng, &[1, 2, 4, 4]);
        let tr_half = mk(&mut rng, &[1, 2, 2, 2]);
        let targets = mk(&mut rng, &[1, 2, 4, 4]);

        let mut g = Graph::new();
        let sv = vec![g.leaf(s_full.clone()), g.leaf(s_half.clone())];
        let rv = vec![g.leaf(r_full.clone()), g.leaf(r_half.clone())];
        let (_, report) = total_loss_graph(
            &mut g,
            &sv,
            &rv,
            &[ts_full.clone(), ts_half.clone()],
            &[tr_full.clone(), tr_half.clone()],
            &targets,
            50,
            50,
            0.1,
        )
        .unwrap();

        let lam = 0.1;
        let l_con = sf_loss(&s_full, &ts_full, lam).unwrap()
            + sf_loss(&r_full, &tr_full, lam).unwrap()
            + sf_loss(&s_half, &ts_half, lam).unwrap()
            + sf_loss(&r_half, &tr_half, lam).unwrap();
        let l_sup = sf_loss(&s_full, &targets, lam).unwrap();
        let l_sup_t = sf_loss(&ts_full, &targets, lam).unwrap();
        let l_un_syn = sf_loss(&s_full, &ts_full, lam).unwrap();
        let l_un_real = sf_loss(&r_full, &tr_full, lam).unwrap();
        // lambda_real = 1 at the final iteration
        let expect = l_con + l_sup + l_sup_t + l_un_syn + l_un_real;
        assert!((report.total - expect).abs() < 1e-9, "{} vs {expect}", report.total);
        assert_eq!(report.lambda_real, 1.0);
    }

    #[test]
    fn zero_lr_keeps_student_fixed_while_teacher_tracks() {
        let mut cfg = toy_cfg(4, 21);
        cfg.lr_start = 1e-30;
        cfg.lr_end = 1e-31;
        let labeled = toy_dataset(2, DomainTag::Synthetic, 100);
        let unlabeled = toy_dataset(2, DomainTag::Real, 200);
        let mut state = TeacherStudentState::init(&cfg.network, 1).unwrap();
        // teacher starts different
        let (other, _) = crate::hfsnet::init_parameters(&cfg.network, 99).unwrap();
        state.teacher = other;
        let before = state.student.clone();
        train_step(&mut state, &labeled, &unlabeled, &toy_dmap(), &cfg).unwrap();
        for (name, t) in before.iter() {
            let after = state.student.get(name).unwrap();
            assert!(t.max_abs_diff(after) < 1e-16, "{name} moved");
        }
        // teacher snapped to the student at iteration 0
        for (name, t) in state.student.iter() {
            assert!(state.teacher.get(name).unwrap().max_abs_diff(t) < 1e-16, "{name}");
        }
    }

    #[test]
    fn identical_networks_with_zero_perturbation_have_zero_unsupervised_terms() {
        let mut cfg = toy_cfg(4, 22);
        cfg.perturbation.epsilon = 0.0;
        let labeled = toy_dataset(2, DomainTag::Synthetic, 300);
        let unlabeled = toy_dataset(2, DomainTag::Real, 400);
        let mut state = TeacherStudentState::init(&cfg.network, 2).unwrap();
        let report = train_step(&mut state, &labeled, &unlabeled, &toy_dmap(), &cfg).unwrap();
        assert_eq!(report.losses.l_un_syn, 0.0);
        assert_eq!(report.losses.l_un_real, 0.0);
        assert_eq!(report.losses.l_con, 0.0);
    }

    #[test]
    fn short_training_reduces_supervised_loss() {
        let mut worse = 0;
        for seed in 0..3 {
            let cfg = toy_cfg(50, 30 + seed);
            let labeled = toy_dataset(4, DomainTag::Synthetic, 500);
            let unlabeled = toy_dataset(4, DomainTag::Real, 600);
            let mut state = TeacherStudentState::init(&cfg.network, seed).unwrap();
            let log = train_loop(&mut state, &labeled, &unlabeled, &toy_dmap(), &cfg, None).unwrap();
            let first = log.rows[0].losses.l_sup;
            let last = log.rows.last().unwrap().losses.l_sup;
            if last >= first {
                worse += 1;
            }
        }
        assert_eq!(worse, 0, "supervised loss failed to decrease on some seeds");
    }

    #[test]
    fn zero_iterations_returns_empty_log() {
        let net = NetworkConfig::toy();
        let mut state = TeacherStudentState::init(&net, 3).unwrap();
        let mut cfg = toy_cfg(1, 23);
        cfg.total_iterations = 1;
        state.iteration = 1; // already at the end
        let labeled = toy_dataset(2, DomainTag::Synthetic, 700);
        let unlabeled = toy_dataset(2, DomainTag::Real, 800);
        let log = train_loop(&mut state, &labeled, &unlabeled, &toy_dmap(), &cfg, None).unwrap();
        assert!(log.rows.is_empty());
    }

    #[test]
    fn lambda_real_is_monotone_in_the_log() {
        let cfg = toy_cfg(8, 24);
        let labeled = toy_dataset(2, DomainTag::Synthetic, 900);
        let unlabeled = toy_dataset(2, DomainTag::Real, 1000);
        let mut state = TeacherStudentState::init(&cfg.network, 4).unwrap();
        let log = train_loop(&mut state, &labeled, &unlabeled, &toy_dmap(), &cfg, None).unwrap();
        for pair in log.rows.windows(2) {
            assert!(pair[1].losses.lambda_real >= pair[0].losses.lambda_real);
        }
    }

    #[test]
    fn resume_is_bitwise_identical_to_uninterrupted_run() {
        let dir = std::env::temp_dir().join("fps_train_resume");
        let _ = fs::remove_dir_all(&dir);
        let cfg = toy_cfg(6, 25);
        let labeled = toy_dataset(3, DomainTag::Synthetic, 1100);
        let unlabeled = toy_dataset(3, DomainTag::Real, 1200);
        let dmap = toy_dmap();

        // uninterrupted
        let mut full = TeacherStudentState::init(&cfg.network, 9).unwrap();
        train_loop(&mut full, &labeled, &unlabeled, &dmap, &cfg, None).unwrap();

        // first half, checkpoint, resume
        let mut first = TeacherStudentState::init(&cfg.network, 9).unwrap();
        train_segment(&mut first, &labeled, &unlabeled, &dmap, &cfg, 3, None).unwrap();
        save_checkpoint(&dir, &first, &cfg).unwrap();
        let mut resumed = load_checkpoint(&dir, Some(&cfg)).unwrap();
        assert_eq!(resumed.iteration, 3);
        train_loop(&mut resumed, &labeled, &unlabeled, &dmap, &cfg, None).unwrap();

        for (name, t) in full.student.iter() {
            let r = resumed.student.get(name).unwrap();
            for (a, b) in t.data().iter().zip(r.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "student {name}");
            }
        }
        for (name, t) in full.teacher.iter() {
            let r = resumed.teacher.get(name).unwrap();
            for (a, b) in t.data().iter().zip(r.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "teacher {name}");
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn checkpoint_rejects_config_mismatch() {
        let dir = std::env::temp_dir().join("fps_ckpt_mismatch");
        let _ = fs::remove_dir_all(&dir);
        let cfg = toy_cfg(4, 26);
        let state = TeacherStudentState::init(&cfg.network, 1).unwrap();
        save_checkpoint(&dir, &state, &cfg).unwrap();
        let mut other = cfg.clone();
        other.lambda_freq = 0.5;
        assert!(matches!(
            load_checkpoint(&dir, Some(&other)),
            Err(FpsError::State(_))
        ));
        fs::remove_dir_all(&dir).unwrap();
    }
}
