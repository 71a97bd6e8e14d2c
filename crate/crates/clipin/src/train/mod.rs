//! The optimization loop: per-step forward of every enabled loss family,
//! backward, AdamW update of the online tower, EMA update of the target
//! tower, plus logging, checkpointing, and the four-row ablation harness.

pub mod adamw;
pub mod checkpoint;
pub mod config;

pub use adamw::AdamW;
pub use config::{AblationFlags, TrainConfig};

use crate::data::{PairBatch, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::eval::{evaluate_corpus, Branch, ProbeConfig};
use crate::losses::{
    info_nce_loss, inter_modal_loss, intra_modal_loss, total_loss, LossBreakdown, LossTerms,
    Temperature,
};
use crate::model::ModelState;
use crate::numerics::{Rng, Tensor, TokenMatrix};
use std::io::Write;
use std::path::Path;

/// Linear warmup to the base rate, constant afterwards.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_iters == 0 {
        cfg.lr
    } else {
        cfg.lr * (((step + 1) as f64 / cfg.warmup_iters as f64).min(1.0))
    }
}

/// Borrowed views of one batch; view 1 feeds online paths, view 2 targets.
pub struct StepInputs<'a> {
    pub images_v1: &'a Tensor,
    pub images_v2: &'a Tensor,
    pub tokens_v1: &'a TokenMatrix,
    pub tokens_v2: &'a TokenMatrix,
}

impl<'a> StepInputs<'a> {
    pub fn from_batch(batch: &'a PairBatch) -> StepInputs<'a> {
        StepInputs {
            images_v1: &batch.images_v1,
            images_v2: &batch.images_v2,
            tokens_v1: &batch.tokens_v1,
            tokens_v2: &batch.tokens_v2,
        }
    }
}

/// Runs the forward pass for every enabled loss family and combines them.
/// Online branches read view 1; target branches read view 2 behind a
/// stop-gradient. Returns the total plus the per-family terms.
pub fn forward_losses(
    state: &ModelState,
    inp: &StepInputs,
    cfg: &TrainConfig,
) -> Result<(Tensor, LossTerms)> {
    let flags = cfg.ablation();
    flags.validate()?;
    let need_ncl = flags.use_inter || flags.use_intra;
    let img = state.image_online(inp.images_v1, need_ncl)?;
    let txt = state.text_online(inp.tokens_v1, need_ncl)?;
    let mut terms = LossTerms::default();
    let temperature = if cfg.learnable_tau {
        Temperature::Learnable(state.online.log_tau.clone())
    } else {
        Temperature::Fixed(cfg.tau)
    };
    terms.cl = Some(info_nce_loss(&img.cl, &txt.cl, &temperature)?);
    if need_ncl {
        let u_tgt = state.image_target(inp.images_v2)?;
        let v_tgt = state.text_target(inp.tokens_v2)?;
        let ncl_i = img.ncl.as_ref().expect("requested above");
        let ncl_t = txt.ncl.as_ref().expect("requested above");
        if flags.use_inter {
            let u = state.online.q_inter_i.forward(ncl_i)?;
            let v = state.online.q_inter_t.forward(ncl_t)?;
            terms.inter = Some(inter_modal_loss(&u, &v, &u_tgt, &v_tgt)?);
        }
        if flags.use_intra {
            let u = state.online.q_intra_i.forward(ncl_i)?;
            let v = state.online.q_intra_t.forward(ncl_t)?;
            terms.intra = Some(intra_modal_loss(&u, &u_tgt, &v, &v_tgt)?);
        }
    }
    let total = total_loss(&terms, cfg.weighting, &state.online.s_inter, &state.online.s_intra)?;
    Ok((total, terms))
}

fn online_grad_norm(model: &ModelState) -> f64 {
    let mut sq = 0.0;
    for (_, t) in model.named_online() {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    sq.sqrt()
}

/// One full training step: forward, finiteness check, backward, optional
/// gradient clipping, AdamW on the online tower, EMA on the target tower,
/// step counter bump. Returns the forward loss breakdown.
pub fn train_step(
    state: &mut ModelState,
    batch: &PairBatch,
    cfg: &TrainConfig,
    opt: &mut AdamW,
) -> Result<LossBreakdown> {
    state.clear_grads();
    let (total, terms) = forward_losses(state, &StepInputs::from_batch(batch), cfg)?;
    let breakdown = LossBreakdown::from_terms(
        &terms,
        cfg.weighting,
        &state.online.s_inter,
        &state.online.s_intra,
        total.scalar_value(),
    );
    if !breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss { step: state.step, dump: breakdown.dump() });
    }
    total.backward()?;
    let grad_scale = if cfg.grad_clip > 0.0 {
        let norm = online_grad_norm(state);
        if norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        }
    } else {
        1.0
    };
    opt.step_model(state, lr_at(state.step, cfg), grad_scale)?;
    state.ema_update(cfg.ema_beta);
    state.step += 1;
    Ok(breakdown)
}

/// TSV header of the per-step training log.
pub const LOG_HEADER: &str = "step\tl_cl_i2t\tl_cl_t2i\tl_inter_i2t\tl_inter_t2i\tl_intra_i\tl_intra_t\tlambda_inter\tlambda_intra\ttotal\tlr";

/// One logged step.
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub breakdown: LossBreakdown,
}

impl TraceRow {
    pub fn tsv_line(&self) -> String {
        let f = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.9}"));
        let b = &self.breakdown;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}",
            self.step,
            f(b.l_cl_i2t),
            f(b.l_cl_t2i),
            f(b.l_inter_i2t),
            f(b.l_inter_t2i),
            f(b.l_intra_i),
            f(b.l_intra_t),
            b.lambda_inter,
            b.lambda_intra,
            b.total,
            self.lr
        )
    }
}

/// Everything a finished (or zero-step) run hands back.
pub struct TrainOutputs {
    pub state: ModelState,
    pub opt: AdamW,
    /// The effective config (the checkpoint's when resuming).
    pub cfg: TrainConfig,
    /// Rows for the steps executed in this call.
    pub trace: Vec<TraceRow>,
    pub corpus: SyntheticCorpus,
}

/// Runs (or resumes) a training job. The corpus, model init, batch order and
/// augmentations all derive from the config seed, so a given (config, step
/// range) is bit-reproducible; resuming from a checkpoint continues the
/// uninterrupted sequence exactly.
///
/// When `out_dir` is given, writes `train_log.tsv`, periodic checkpoints
/// (`checkpoint_XXXXXX.clpn` every `checkpoint_every` steps) and
/// `checkpoint_final.clpn`. When resuming, the caller's `total_steps` wins;
/// everything else comes from the checkpoint.
pub fn run_training(
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainOutputs> {
    let (mut state, mut opt, cfg) = match resume {
        Some(path) => {
            let data = checkpoint::load_checkpoint(path)?;
            let (state, opt, mut loaded) = checkpoint::restore_training(&data)?;
            loaded.total_steps = cfg.total_steps;
            (state, opt, loaded)
        }
        None => {
            cfg.validate()?;
            let dims = cfg.dims_config()?;
            let state = ModelState::init(
                dims,
                cfg.share_pre_projectors,
                &Rng::new(cfg.seed).stream("model"),
            )?;
            (state, AdamW::from_config(cfg), cfg.clone())
        }
    };
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let corpus = SyntheticCorpus::generate(
        cfg.latent_spec(),
        state.dims.image_side,
        state.dims.max_text_len,
        cfg.data_n,
        &root.stream("corpus"),
    )?;
    let aug = cfg.augment();
    let data_rng = root.stream("data");
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut file = std::fs::File::create(dir.join("train_log.tsv"))?;
            writeln!(file, "{LOG_HEADER}")?;
            Some(file)
        }
        None => None,
    };
    let mut trace = Vec::new();
    while state.step < cfg.total_steps {
        let step = state.step;
        let batch = corpus.batch_for_step(step, cfg.batch_size, &aug, &data_rng)?;
        let lr = lr_at(step, &cfg);
        let breakdown = train_step(&mut state, &batch, &cfg, &mut opt).map_err(|e| match e {
            e @ Error::NonFiniteLoss { .. } => e,
            other => Error::Step { step, source: Box::new(other) },
        })?;
        let row = TraceRow { step, lr, breakdown };
        if let Some(file) = log.as_mut() {
            writeln!(file, "{}", row.tsv_line())?;
        }
        trace.push(row);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let name = format!("checkpoint_{:06}.clpn", step + 1);
                checkpoint::save_checkpoint(&dir.join(name), &state, &opt, &cfg)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save_checkpoint(&dir.join("checkpoint_final.clpn"), &state, &opt, &cfg)?;
    }
    Ok(TrainOutputs { state, opt, cfg, trace, corpus })
}

// ---- ablation harness ----

/// The four wiring presets, weakest to strongest.
pub fn ablation_presets() -> [(&'static str, AblationFlags); 4] {
    let flags = |inter, intra, share| AblationFlags {
        use_contrastive: true,
        use_inter: inter,
        use_intra: intra,
        share_pre_projectors: share,
    };
    [
        ("cl", flags(false, false, false)),
        ("cl+inter", flags(true, false, false)),
        ("cl+inter+intra", flags(true, true, false)),
        ("cl+inter+intra+share", flags(true, true, true)),
    ]
}

/// One evaluated ablation row.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: &'static str,
    pub flags: AblationFlags,
    pub mean_auc: f64,
    pub map: f64,
    pub zsc_top1: Option<f64>,
}

/// Trains the four presets from the same base config and seed, then probes
/// and zero-shot-classifies each. Row artifacts land under
/// `out_dir/<label>/` when an output directory is given.
pub fn run_ablation_suite(
    base: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Vec<AblationRow>, Vec<TrainOutputs>)> {
    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    for (label, flags) in ablation_presets() {
        let cfg = base.with_flags(flags);
        let row_dir = out_dir.map(|d| d.join(label));
        let out = run_training(&cfg, row_dir.as_deref(), None)?;
        let report =
            evaluate_corpus(&out.state, &out.corpus, Branch::Cl, &ProbeConfig::default(), true)?;
        rows.push(AblationRow {
            label,
            flags,
            mean_auc: report.mean_auc,
            map: report.map,
            zsc_top1: report.zsc_top1,
        });
        outputs.push(out);
    }
    Ok((rows, outputs))
}

pub fn ablation_table_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "row\tuse_contrastive\tuse_inter\tuse_intra\tshare_pre_projectors\tmean_auc\tmap\tzsc_top1\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\n",
            r.label,
            r.flags.use_contrastive,
            r.flags.use_inter,
            r.flags.use_intra,
            r.flags.share_pre_projectors,
            r.mean_auc,
            r.map,
            r.zsc_top1.map_or("nan".to_string(), |v| format!("{v:.6}"))
        ));
    }
    out
}
