//! Experiment configuration: a flat `key = value` text grammar with
//! `[section]` headers, one documented default per key, unknown-key
//! rejection, and bounds validation against the module invariants.
//!
//! Keys may be written inside their section (`batch_size = 4` under
//! `[train]`) or fully qualified anywhere (`train.batch_size = 4`).

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{FpsError, Result};
use crate::hfsnet::NetworkConfig;
use crate::kspace::{PerturbMode, PerturbationConfig};
use crate::phantom::DomainShiftConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSection {
    pub height: usize,
    pub width: usize,
    pub n_shapes: usize,
    pub lesion_prob: f64,
    pub n_train: usize,
    pub n_val: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSection {
    pub lowfreq_gain: f64,
    pub lowfreq_radius: f64,
    pub noise_sigma: f64,
    pub bias_strength: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub batch_size: usize,
    pub total_iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lambda_freq: f64,
    pub checkpoint_every: usize,
    pub syn_dir: String,
    pub real_dir: String,
    pub dmap: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbSection {
    pub mode: PerturbMode,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    /// Display-range MAE mask; equal bounds mean the full mask.
    pub display_min: f64,
    pub display_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub phantom: PhantomSection,
    pub shift: ShiftSection,
    pub network: NetworkConfig,
    pub train: TrainSection,
    pub perturb: PerturbSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            phantom: PhantomSection {
                height: 64,
                width: 64,
                n_shapes: 5,
                lesion_prob: 0.3,
                n_train: 200,
                n_val: 50,
            },
            shift: ShiftSection {
                lowfreq_gain: 1.5,
                lowfreq_radius: 0.15,
                noise_sigma: 0.03,
                bias_strength: 0.15,
            },
            network: NetworkConfig::default(),
            train: TrainSection {
                batch_size: 4,
                total_iterations: 1000,
                lr_start: 1e-4,
                lr_end: 1e-6,
                lambda_freq: 0.1,
                checkpoint_every: 0,
                syn_dir: String::new(),
                real_dir: String::new(),
                dmap: String::new(),
            },
            perturb: PerturbSection { mode: PerturbMode::FullSpectrum, epsilon: 1.0 },
            eval: EvalSection { display_min: 0.0, display_max: 0.0 },
        }
    }
}

const SECTIONS: [&str; 6] = ["phantom", "shift", "network", "train", "perturb", "eval"];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| FpsError::Config {
        line,
        message: format!("key {key}: cannot parse {value:?}"),
    })
}

impl ExperimentConfig {
    /// Parse the text grammar; unknown keys and malformed lines are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut key_lines: HashMap<String, usize> = HashMap::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(FpsError::Config {
                        line: lineno,
                        message: format!("malformed section header {line:?}"),
                    });
                };
                if !SECTIONS.contains(&name) {
                    return Err(FpsError::Config {
                        line: lineno,
                        message: format!("unknown section [{name}]"),
                    });
                }
                section = name.to_string();
                continue;
            }
            let Some((key_part, value)) = line.split_once('=') else {
                return Err(FpsError::Config {
                    line: lineno,
                    message: format!("expected key = value, got {line:?}"),
                });
            };
            let key_part = key_part.trim();
            let qualified = if key_part.contains('.') {
                key_part.to_string()
            } else if section.is_empty() {
                return Err(FpsError::Config {
                    line: lineno,
                    message: format!("key {key_part} outside any section; qualify it or add a section header"),
                });
            } else {
                format!("{section}.{key_part}")
            };
            cfg.apply(&qualified, value.trim(), lineno)?;
            key_lines.insert(qualified, lineno);
        }
        cfg.validate(&key_lines)?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "phantom.height" => self.phantom.height = parse_num(key, value, line)?,
            "phantom.width" => self.phantom.width = parse_num(key, value, line)?,
            "phantom.n_shapes" => self.phantom.n_shapes = parse_num(key, value, line)?,
            "phantom.lesion_prob" => self.phantom.lesion_prob = parse_num(key, value, line)?,
            "phantom.n_train" => self.phantom.n_train = parse_num(key, value, line)?,
            "phantom.n_val" => self.phantom.n_val = parse_num(key, value, line)?,
            "shift.lowfreq_gain" => self.shift.lowfreq_gain = parse_num(key, value, line)?,
            "shift.lowfreq_radius" => self.shift.lowfreq_radius = parse_num(key, value, line)?,
            "shift.noise_sigma" => self.shift.noise_sigma = parse_num(key, value, line)?,
            "shift.bias_strength" => self.shift.bias_strength = parse_num(key, value, line)?,
            "network.scales" => self.network.scales = parse_num(key, value, line)?,
            "network.base_channels" => self.network.base_channels = parse_num(key, value, line)?,
            "network.out_channels" => self.network.out_channels = parse_num(key, value, line)?,
            "network.window_size" => self.network.window_size = parse_num(key, value, line)?,
            "network.attn_heads" => self.network.attn_heads = parse_num(key, value, line)?,
            "network.embed_dim" => self.network.embed_dim = parse_num(key, value, line)?,
            "network.patch_size" => self.network.patch_size = parse_num(key, value, line)?,
            "network.fas_branches" => self.network.fas_branches = parse_num(key, value, line)?,
            "network.fas_groups" => self.network.fas_groups = parse_num(key, value, line)?,
            "network.fas_kernels" => {
                let kernels: Result<Vec<usize>> = value
                    .split(',')
                    .map(|tok| parse_num::<usize>(key, tok, line))
                    .collect();
                self.network.fas_kernels = kernels?;
            }
            "train.batch_size" => self.train.batch_size = parse_num(key, value, line)?,
            "train.total_iterations" => self.train.total_iterations = parse_num(key, value, line)?,
            "train.lr_start" => self.train.lr_start = parse_num(key, value, line)?,
            "train.lr_end" => self.train.lr_end = parse_num(key, value, line)?,
            "train.lambda_freq" => self.train.lambda_freq = parse_num(key, value, line)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_num(key, value, line)?,
            "train.syn_dir" => self.train.syn_dir = value.to_string(),
            "train.real_dir" => self.train.real_dir = value.to_string(),
            "train.dmap" => self.train.dmap = value.to_string(),
            "perturb.mode" => {
                self.perturb.mode = match value {
                    "single-frequency" => PerturbMode::SingleFrequency,
                    "full-spectrum" => PerturbMode::FullSpectrum,
                    other => {
                        return Err(FpsError::Config {
                            line,
                            message: format!(
                                "key {key}: expected single-frequency or full-spectrum, got {other:?}"
                            ),
                        })
                    }
                }
            }
            "perturb.epsilon" => self.perturb.epsilon = parse_num(key, value, line)?,
            "eval.display_min" => self.eval.display_min = parse_num(key, value, line)?,
            "eval.display_max" => self.eval.display_max = parse_num(key, value, line)?,
            other => {
                return Err(FpsError::Config {
                    line,
                    message: format!("unknown key {other}"),
                })
            }
        }
        Ok(())
    }

    fn validate(&self, key_lines: &HashMap<String, usize>) -> Result<()> {
        let at = |key: &str| key_lines.get(key).copied().unwrap_or(0);
        let bound = |cond: bool, key: &str, detail: String| -> Result<()> {
            if cond {
                Ok(())
            } else {
                Err(FpsError::Config {
                    line: at(key),
                    message: format!("bound violation for {key}: {detail}"),
                })
            }
        };
        bound(self.phantom.height >= 16, "phantom.height", format!("{} < 16", self.phantom.height))?;
        bound(self.phantom.width >= 16, "phantom.width", format!("{} < 16", self.phantom.width))?;
        bound(self.phantom.n_shapes >= 1, "phantom.n_shapes", "must be >= 1".into())?;
        bound(
            (0.0..=1.0).contains(&self.phantom.lesion_prob),
            "phantom.lesion_prob",
            format!("{} outside [0, 1]", self.phantom.lesion_prob),
        )?;
        bound(
            self.shift.lowfreq_gain >= 0.0 && self.shift.lowfreq_gain.is_finite(),
            "shift.lowfreq_gain",
            format!("{}", self.shift.lowfreq_gain),
        )?;
        bound(
            self.shift.lowfreq_radius > 0.0 && self.shift.lowfreq_radius <= 1.0,
            "shift.lowfreq_radius",
            format!("{} outside (0, 1]", self.shift.lowfreq_radius),
        )?;
        bound(self.shift.noise_sigma >= 0.0, "shift.noise_sigma", format!("{}", self.shift.noise_sigma))?;
        bound(self.shift.bias_strength >= 0.0, "shift.bias_strength", format!("{}", self.shift.bias_strength))?;
        self.network.validate().map_err(|e| FpsError::Config {
            line: at("network.base_channels"),
            message: format!("network section: {e}"),
        })?;
        bound(self.train.batch_size >= 1, "train.batch_size", "must be >= 1".into())?;
        bound(self.train.total_iterations >= 1, "train.total_iterations", "must be >= 1".into())?;
        bound(
            self.train.lr_start >= self.train.lr_end && self.train.lr_end > 0.0,
            "train.lr_start",
            format!("need lr_start >= lr_end > 0, got {} and {}", self.train.lr_start, self.train.lr_end),
        )?;
        bound(self.train.lambda_freq >= 0.0, "train.lambda_freq", format!("{}", self.train.lambda_freq))?;
        bound(
            self.perturb.epsilon >= 0.0 && self.perturb.epsilon.is_finite(),
            "perturb.epsilon",
            format!("{} must be >= 0", self.perturb.epsilon),
        )?;
        bound(
            self.eval.display_max >= self.eval.display_min,
            "eval.display_max",
            "display_max must be >= display_min".into(),
        )?;
        Ok(())
    }

    /// Canonical text form; `parse(serialize(parse(x)))` is a fixed point.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let k = &self.network.fas_kernels;
        let kernels = k.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let mode = match self.perturb.mode {
            PerturbMode::SingleFrequency => "single-frequency",
            PerturbMode::FullSpectrum => "full-spectrum",
        };
        let _ = writeln!(out, "[phantom]");
        let _ = writeln!(out, "height = {}", self.phantom.height);
        let _ = writeln!(out, "width = {}", self.phantom.width);
        let _ = writeln!(out, "n_shapes = {}", self.phantom.n_shapes);
        let _ = writeln!(out, "lesion_prob = {}", self.phantom.lesion_prob);
        let _ = writeln!(out, "n_train = {}", self.phantom.n_train);
        let _ = writeln!(out, "n_val = {}", self.phantom.n_val);
        let _ = writeln!(out, "\n[shift]");
        let _ = writeln!(out, "lowfreq_gain = {}", self.shift.lowfreq_gain);
        let _ = writeln!(out, "lowfreq_radius = {}", self.shift.lowfreq_radius);
        let _ = writeln!(out, "noise_sigma = {}", self.shift.noise_sigma);
        let _ = writeln!(out, "bias_strength = {}", self.shift.bias_strength);
        let _ = writeln!(out, "\n[network]");
        let _ = writeln!(out, "scales = {}", self.network.scales);
        let _ = writeln!(out, "base_channels = {}", self.network.base_channels);
        let _ = writeln!(out, "out_channels = {}", self.network.out_channels);
        let _ = writeln!(out, "window_size = {}", self.network.window_size);
        let _ = writeln!(out, "attn_heads = {}", self.network.attn_heads);
        let _ = writeln!(out, "embed_dim = {}", self.network.embed_dim);
        let _ = writeln!(out, "patch_size = {}", self.network.patch_size);
        let _ = writeln!(out, "fas_branches = {}", self.network.fas_branches);
        let _ = writeln!(out, "fas_kernels = {kernels}");
        let _ = writeln!(out, "fas_groups = {}", self.network.fas_groups);
        let _ = writeln!(out, "\n[train]");
        let _ = writeln!(out, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(out, "total_iterations = {}", self.train.total_iterations);
        let _ = writeln!(out, "lr_start = {}", self.train.lr_start);
        let _ = writeln!(out, "lr_end = {}", self.train.lr_end);
        let _ = writeln!(out, "lambda_freq = {}", self.train.lambda_freq);
        let _ = writeln!(out, "checkpoint_every = {}", self.train.checkpoint_every);
        let _ = writeln!(out, "syn_dir = {}", self.train.syn_dir);
        let _ = writeln!(out, "real_dir = {}", self.train.real_dir);
        let _ = writeln!(out, "dmap = {}", self.train.dmap);
        let _ = writeln!(out, "\n[perturb]");
        let _ = writeln!(out, "mode = {mode}");
        let _ = writeln!(out, "epsilon = {}", self.perturb.epsilon);
        let _ = writeln!(out, "\n[eval]");
        let _ = writeln!(out, "display_min = {}", self.eval.display_min);
        let _ = writeln!(out, "display_max = {}", self.eval.display_max);
        out
    }

    pub fn shift_config(&self, seed: u64) -> DomainShiftConfig {
        DomainShiftConfig {
            lowfreq_gain: self.shift.lowfreq_gain,
            lowfreq_radius: self.shift.lowfreq_radius,
            noise_sigma: self.shift.noise_sigma,
            bias_strength: self.shift.bias_strength,
            seed,
        }
    }

    pub fn perturbation(&self, seed: u64) -> PerturbationConfig {
        PerturbationConfig { mode: self.perturb.mode, epsilon: self.perturb.epsilon, seed }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            total_iterations: self.train.total_iterations,
            lr_start: self.train.lr_start,
            lr_end: self.train.lr_end,
            lambda_freq: self.train.lambda_freq,
            perturbation: self.perturbation(seed),
            network: self.network.clone(),
            seed,
            checkpoint_every: self.train.checkpoint_every,
        }
    }
}
