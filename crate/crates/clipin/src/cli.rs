//! Command-line front end: one binary covering corpus generation, training,
//! evaluation, ablation, gradient verification, and checkpoint inspection.
//!
//! Exit codes: 0 success (including `--help`/`--version`), 1 usage error,
//! 2 runtime or validation failure. Every command honors the global `--seed`
//! and `--config`; flags override the config file, which overrides defaults.
//! Commands that produce artifacts write them under `--out` together with a
//! `manifest.tsv` of (path, bytes, fnv1a) rows.

use crate::data::{self, SyntheticCorpus, QUANTILE_BUCKETS};
use crate::error::{Error, Result};
use crate::eval::{evaluate_corpus, evaluate_zsc, Branch, EvalReport, ProbeConfig};
use crate::gradcheck::{run_sweep, sweep_tsv_rows, SweepSettings, SWEEP_HEADER};
use crate::model::DimsConfig;
use crate::numerics::Rng;
use crate::train::{
    ablation_table_tsv, checkpoint, run_ablation_suite, run_training, TrainConfig,
};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "clipin",
    version,
    about = "Contrastive + non-contrastive multimodal pretraining at desk scale",
    propagate_version = true
)]
struct Cli {
    /// Root seed; overrides the config file's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config file of `key = value` lines (keys = TrainConfig field names).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// Every training-config field (except the global `seed`) as a flag, so the
/// command line, the config file, and the struct share one vocabulary.
#[derive(Args, Debug, Default)]
struct TrainOverrides {
    /// Base learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Linear-warmup length in steps (0 disables).
    #[arg(long)]
    warmup_iters: Option<u64>,
    /// AdamW first-moment coefficient.
    #[arg(long)]
    adam_beta1: Option<f64>,
    /// AdamW second-moment coefficient.
    #[arg(long)]
    adam_beta2: Option<f64>,
    /// AdamW epsilon (added outside the square root).
    #[arg(long)]
    adam_eps: Option<f64>,
    /// Decoupled weight decay.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long)]
    grad_clip: Option<f64>,
    /// EMA coefficient of the target tower.
    #[arg(long)]
    ema_beta: Option<f64>,
    /// Contrastive softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Learn log-temperature instead of fixing tau.
    #[arg(long, value_name = "BOOL")]
    learnable_tau: Option<bool>,
    /// Loss combination: fixed | learnable.
    #[arg(long)]
    weighting: Option<String>,
    /// Dims preset: desk | tiny | micro | paper-ratio.
    #[arg(long)]
    dims: Option<String>,
    /// Keep the contrastive family (must stay true).
    #[arg(long, value_name = "BOOL")]
    use_contrastive: Option<bool>,
    /// Enable the cross-modal online/target family.
    #[arg(long, value_name = "BOOL")]
    use_inter: Option<bool>,
    /// Enable the within-modal online/target family.
    #[arg(long, value_name = "BOOL")]
    use_intra: Option<bool>,
    /// Route the contrastive heads through the shared pre-projectors.
    #[arg(long, value_name = "BOOL")]
    share_pre_projectors: Option<bool>,
    /// Samples per step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Steps to run.
    #[arg(long)]
    total_steps: Option<u64>,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Corpus size.
    #[arg(long)]
    data_n: Option<usize>,
    /// Latent dimensions behind each sample.
    #[arg(long)]
    latent_k: Option<usize>,
    /// Multi-label attribute count (first latents' signs).
    #[arg(long)]
    classes: Option<usize>,
    /// Pixel noise after rendering.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Probability a sample reuses the previous sample's latents.
    #[arg(long)]
    redundancy_rate: Option<f64>,
    /// Probability a caption keeps only a subset of its tokens.
    #[arg(long)]
    looseness_rate: Option<f64>,
    /// Horizontal-flip probability per view.
    #[arg(long)]
    flip_prob: Option<f64>,
    /// Per-channel multiplicative jitter strength.
    #[arg(long)]
    jitter_strength: Option<f64>,
    /// Probability a non-pad token is masked per view.
    #[arg(long)]
    token_mask_prob: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        macro_rules! fold {
            ($($f:ident),+ $(,)?) => {
                $( if let Some(v) = &self.$f { cfg.set(stringify!($f), &v.to_string())?; } )+
            };
        }
        fold!(
            lr,
            warmup_iters,
            adam_beta1,
            adam_beta2,
            adam_eps,
            weight_decay,
            grad_clip,
            ema_beta,
            tau,
            learnable_tau,
            weighting,
            dims,
            use_contrastive,
            use_inter,
            use_intra,
            share_pre_projectors,
            batch_size,
            total_steps,
            checkpoint_every,
            data_n,
            latent_k,
            classes,
            noise_sigma,
            redundancy_rate,
            looseness_rate,
            flip_prob,
            jitter_strength,
            token_mask_prob,
        );
        Ok(())
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired corpus (PPM pairs, pairs.tsv, labels.tsv).
    GenData {
        /// Number of samples (alias for --data-n).
        #[arg(long)]
        n: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Train, or resume from a checkpoint; writes a log and checkpoints.
    Train {
        /// Artifact directory (train_log.tsv, checkpoints, manifest).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint to resume from; its config wins except total_steps.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Linear-probe a checkpoint on its training corpus.
    EvalProbe {
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Feature tap: encoder | pre | cl.
        #[arg(long, default_value = "cl")]
        branch: String,
        /// Optional artifact directory (report.tsv, report.jsonl, manifest).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-shot classification of a checkpoint via class prompts.
    EvalZsc {
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Optional artifact directory (report.tsv, report.jsonl, manifest).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the four wiring presets; print the table.
    Ablate {
        /// Artifact directory (one subdirectory per row plus ablation.tsv).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Compare analytic gradients against finite differences.
    GradCheck {
        /// Independent sweeps, seeded seed, seed+1, ...
        #[arg(long, default_value_t = 20)]
        trials: u64,
        /// Dims preset to sweep (defaults to the config's).
        #[arg(long)]
        dims: Option<String>,
        /// Wiring to sweep (defaults to the config's).
        #[arg(long, value_name = "BOOL")]
        share_pre_projectors: Option<bool>,
        /// Coordinates sampled per tensor; 0 sweeps every coordinate.
        #[arg(long, default_value_t = 2)]
        coords_per_tensor: usize,
        /// Batch size of the probe inputs.
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Print a checkpoint's header, tensor table, and config echo.
    InspectCkpt {
        /// Checkpoint to inspect.
        #[arg(long)]
        ckpt: PathBuf,
    },
}

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn base_config(seed: Option<u64>, config: &Option<PathBuf>) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// The corpus a config describes, at the given model dims. Identical to what
/// training generates for that config.
fn corpus_for(cfg: &TrainConfig, dims: &DimsConfig) -> Result<SyntheticCorpus> {
    let vocab_needed = 2 + cfg.latent_k * 2 * QUANTILE_BUCKETS;
    if vocab_needed > dims.vocab_size {
        return Err(Error::Config(format!(
            "latent_k {} needs a vocab of {vocab_needed} but the model embeds {}",
            cfg.latent_k, dims.vocab_size
        )));
    }
    SyntheticCorpus::generate(
        cfg.latent_spec(),
        dims.image_side,
        dims.max_text_len,
        cfg.data_n,
        &Rng::new(cfg.seed).stream("corpus"),
    )
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> =
        std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Writes `manifest.tsv` listing every artifact under `dir` (path relative to
/// `dir`, byte size, fnv1a hash), excluding the manifest itself.
fn write_manifest(dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    let mut rows = String::from("path\tbytes\tfnv1a\n");
    for path in files {
        if path.file_name().is_some_and(|n| n == "manifest.tsv") {
            continue;
        }
        let rel = path.strip_prefix(dir).unwrap_or(&path);
        rows.push_str(&format!(
            "{}\t{}\t{:016x}\n",
            rel.display(),
            std::fs::metadata(&path)?.len(),
            data::fnv1a_file(&path)?
        ));
    }
    std::fs::write(dir.join("manifest.tsv"), rows)?;
    Ok(())
}

fn write_report(report: &EvalReport, out: &Option<PathBuf>) -> Result<()> {
    print!("{}", report.to_tsv());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.tsv"), report.to_tsv())?;
        std::fs::write(dir.join("report.jsonl"), format!("{}\n", report.to_jsonl()?))?;
        write_manifest(dir)?;
    }
    Ok(())
}

/// Loads a checkpoint and rebuilds (model, corpus config). `--config`
/// redirects the evaluation corpus; `--seed` re-seeds it; by default both
/// come from the checkpoint, reproducing the training corpus.
fn checkpointed_model(
    ckpt: &Path,
    seed: Option<u64>,
    config: &Option<PathBuf>,
) -> Result<(crate::model::ModelState, TrainConfig)> {
    let data = checkpoint::load_checkpoint(ckpt)?;
    let (state, _opt, train_cfg) = checkpoint::restore_training(&data)?;
    let mut eval_cfg = match config {
        Some(path) => TrainConfig::from_file(path)?,
        None => train_cfg,
    };
    if let Some(seed) = seed {
        eval_cfg.seed = seed;
    }
    Ok((state, eval_cfg))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { n, out, overrides } => {
            let mut cfg = base_config(cli.seed, &cli.config)?;
            overrides.apply(&mut cfg)?;
            if let Some(n) = n {
                cfg.data_n = n;
            }
            // only the generator-facing fields matter here; training-only
            // couplings like data_n >= batch_size are checked by `train`
            cfg.latent_spec().validate()?;
            let dims = cfg.dims_config()?;
            dims.validate()?;
            let corpus = corpus_for(&cfg, &dims)?;
            std::fs::create_dir_all(&out)?;
            data::save_corpus(&corpus, &out)?;
            let fingerprint = data::fingerprint_dir(&out)?;
            write_manifest(&out)?;
            println!(
                "wrote {} pairs to {} (fingerprint {fingerprint:016x})",
                corpus.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train { out, resume, overrides } => {
            let mut cfg = base_config(cli.seed, &cli.config)?;
            overrides.apply(&mut cfg)?;
            let outputs = run_training(&cfg, out.as_deref(), resume.as_deref())?;
            match (outputs.trace.first(), outputs.trace.last()) {
                (Some(first), Some(last)) => println!(
                    "steps {}..{}: total {:.9} -> {:.9}",
                    first.step, last.step, first.breakdown.total, last.breakdown.total
                ),
                _ => println!("no steps executed (model already at step {})", outputs.state.step),
            }
            if let Some(dir) = &out {
                write_manifest(dir)?;
                println!("artifacts in {}", dir.display());
            }
            Ok(())
        }
        Command::EvalProbe { ckpt, branch, out } => {
            let (state, eval_cfg) = checkpointed_model(&ckpt, cli.seed, &cli.config)?;
            let corpus = corpus_for(&eval_cfg, &state.dims)?;
            let report = evaluate_corpus(
                &state,
                &corpus,
                Branch::by_name(&branch)?,
                &ProbeConfig::default(),
                true,
            )?;
            write_report(&report, &out)
        }
        Command::EvalZsc { ckpt, out } => {
            let (state, eval_cfg) = checkpointed_model(&ckpt, cli.seed, &cli.config)?;
            let corpus = corpus_for(&eval_cfg, &state.dims)?;
            let report = evaluate_zsc(&state, &corpus)?;
            write_report(&report, &out)
        }
        Command::Ablate { out, overrides } => {
            let mut cfg = base_config(cli.seed, &cli.config)?;
            overrides.apply(&mut cfg)?;
            let (rows, _outputs) = run_ablation_suite(&cfg, out.as_deref())?;
            let table = ablation_table_tsv(&rows);
            print!("{table}");
            if let Some(dir) = &out {
                std::fs::write(dir.join("ablation.tsv"), &table)?;
                write_manifest(dir)?;
            }
            Ok(())
        }
        Command::GradCheck { trials, dims, share_pre_projectors, coords_per_tensor, batch, tol } => {
            let cfg = base_config(cli.seed, &cli.config)?;
            let settings = SweepSettings {
                dims: DimsConfig::by_name(dims.as_deref().unwrap_or(&cfg.dims))?,
                share_pre_projectors: share_pre_projectors
                    .unwrap_or(cfg.share_pre_projectors),
                batch,
                coords_per_tensor,
                tol,
            };
            if trials == 0 {
                return Err(Error::Config("trials must be positive".into()));
            }
            println!("{SWEEP_HEADER}");
            let mut worst = 0.0f64;
            for trial in 0..trials {
                let report = run_sweep(&settings, cfg.seed.wrapping_add(trial))?;
                print!("{}", sweep_tsv_rows(&report));
                worst = worst.max(report.max_rel_err());
            }
            println!("# worst max_rel_err {worst:.3e} over {trials} trials (tol {tol:.0e})");
            if worst < tol {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "gradient check failed: worst relative error {worst:.3e} >= tol {tol:.0e}"
                )))
            }
        }
        Command::InspectCkpt { ckpt } => {
            let data = checkpoint::load_checkpoint(&ckpt)?;
            print!("{}", checkpoint::summary(&data));
            Ok(())
        }
    }
}
