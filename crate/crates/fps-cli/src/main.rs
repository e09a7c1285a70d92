//! `fps`: batch driver for the frequency-aware perturbation and selection
//! pipeline. Every command is deterministic given its config and seeds.

mod commands;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "fps",
    version,
    about = "Frequency-guided domain adaptation for quantitative-map reconstruction",
    after_help = "The FPS_THREADS environment variable caps internal parallelism."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired synthetic and shifted-"real" phantom datasets.
    GenData {
        /// Experiment config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (creates syn_train/, syn_val/, real_train/,
        /// real_val/, rois/).
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the per-frequency Wasserstein distance map between two corpora.
    Distmap {
        /// Synthetic dataset directory.
        #[arg(long)]
        syn: PathBuf,
        /// Real-domain dataset directory.
        #[arg(long)]
        real: PathBuf,
        /// Output FPSD file ([2, H, W]: raw and normalized planes).
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit distance-guided perturbed copies of a dataset.
    Perturb {
        /// Input dataset directory.
        #[arg(long)]
        input: PathBuf,
        /// Distance map FPSD file.
        #[arg(long)]
        dmap: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the mean-teacher adaptation loop (or a source-only baseline).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint directory; also receives loss_log.tsv.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured iteration count (0 = save initialization
        /// only).
        #[arg(long)]
        iters: Option<usize>,
        /// Resume from an existing checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train on the labeled stream only.
        #[arg(long, default_value_t = false)]
        supervised: bool,
    },
    /// Evaluate a checkpoint on a dataset: metrics, regression and agreement
    /// tables, graymap exports.
    Eval {
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory with ground-truth targets.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Which parameter set to evaluate.
        #[arg(long, default_value = "teacher")]
        model: String,
    },
    /// Histogram features, logistic regression and ROC over a ROI cohort.
    Classify {
        /// Directory of per-subject ROI value tables.
        #[arg(long)]
        rois: PathBuf,
        /// Output prefix (writes <out>/cohort.tsv and <out>/roc.tsv).
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit diffusion tensors and derive FA/MD/AD/RD maps.
    DtiFit {
        /// DWI stack FPSD ([K, H, W]); omit with --demo.
        #[arg(long)]
        dwi: Option<PathBuf>,
        /// Gradient scheme table (rows: gx gy gz b); omit with --demo.
        #[arg(long)]
        scheme: Option<PathBuf>,
        /// Generate a synthetic tensor field, synthesize the DWI stack, then
        /// fit it back and report the recovery error.
        #[arg(long, default_value_t = false)]
        demo: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collate metric TSVs under a directory into one summary table.
    Report {
        #[arg(long)]
        dir: PathBuf,
        /// Summary output path (defaults to <dir>/summary.tsv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_threads() {
    if let Ok(v) = std::env::var("FPS_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, seed, out } => commands::gen_data(config.as_deref(), seed, &out),
        Command::Distmap { syn, real, out } => commands::distmap(&syn, &real, &out),
        Command::Perturb { input, dmap, config, seed, out } => {
            commands::perturb(&input, &dmap, config.as_deref(), seed, &out)
        }
        Command::Train { config, seed, out, iters, resume, supervised } => {
            commands::train(config.as_deref(), seed, &out, iters, resume.as_deref(), supervised)
        }
        Command::Eval { checkpoint, data, config, out, model } => {
            commands::eval(&checkpoint, &data, config.as_deref(), &out, &model)
        }
        Command::Classify { rois, out } => commands::classify(&rois, &out),
        Command::DtiFit { dwi, scheme, demo, seed, out } => {
            commands::dti_fit(dwi.as_deref(), scheme.as_deref(), demo, seed, &out)
        }
        Command::Report { dir, out } => commands::report(&dir, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
