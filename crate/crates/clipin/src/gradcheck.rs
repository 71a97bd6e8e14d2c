//! End-to-end gradient verification: central finite differences over the
//! online parameters, swept per loss family and for the combined objective in
//! both weighting modes. The combined and contrastive-only sweeps run through
//! the same forward as the trainer, so a pass certifies the real training
//! gradients, not a lookalike.

use crate::error::Result;
use crate::losses::{inter_modal_loss, intra_modal_loss, Weighting};
use crate::model::{DimsConfig, ModelState};
use crate::numerics::{max_rel_err, no_grad, Rng, Tensor, TokenMatrix};
use crate::train::{forward_losses, StepInputs, TrainConfig};
use std::collections::BTreeMap;

/// Which objective a sweep differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossSelect {
    /// Symmetric InfoNCE alone (fixed temperature).
    Cl,
    /// Cross-modal online-vs-target alignment alone.
    Inter,
    /// Within-modal online-vs-target alignment alone.
    Intra,
    /// All three families, unit weights.
    CombinedFixed,
    /// All three families, uncertainty weighting and learnable temperature.
    CombinedLearnable,
}

impl LossSelect {
    pub const ALL: [LossSelect; 5] = [
        LossSelect::Cl,
        LossSelect::Inter,
        LossSelect::Intra,
        LossSelect::CombinedFixed,
        LossSelect::CombinedLearnable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossSelect::Cl => "cl",
            LossSelect::Inter => "inter",
            LossSelect::Intra => "intra",
            LossSelect::CombinedFixed => "combined-fixed",
            LossSelect::CombinedLearnable => "combined-learnable",
        }
    }
}

/// The scalar under test. The contrastive and combined variants run through
/// the trainer's own forward; the single-family variants isolate one loss.
pub fn loss_value(state: &ModelState, inp: &StepInputs, select: LossSelect) -> Result<Tensor> {
    match select {
        LossSelect::Cl | LossSelect::CombinedFixed | LossSelect::CombinedLearnable => {
            let mut cfg = TrainConfig::default();
            cfg.share_pre_projectors = state.share_pre_projectors;
            let combined = select != LossSelect::Cl;
            cfg.use_inter = combined;
            cfg.use_intra = combined;
            if select == LossSelect::CombinedLearnable {
                cfg.weighting = Weighting::Learnable;
                cfg.learnable_tau = true;
            }
            let (total, _) = forward_losses(state, inp, &cfg)?;
            Ok(total)
        }
        LossSelect::Inter => {
            let img = state.image_online(inp.images_v1, true)?;
            let txt = state.text_online(inp.tokens_v1, true)?;
            let u = state.online.q_inter_i.forward(img.ncl.as_ref().expect("requested"))?;
            let v = state.online.q_inter_t.forward(txt.ncl.as_ref().expect("requested"))?;
            let u_tgt = state.image_target(inp.images_v2)?;
            let v_tgt = state.text_target(inp.tokens_v2)?;
            let (a, b) = inter_modal_loss(&u, &v, &u_tgt, &v_tgt)?;
            a.add(&b)
        }
        LossSelect::Intra => {
            let img = state.image_online(inp.images_v1, true)?;
            let txt = state.text_online(inp.tokens_v1, true)?;
            let u = state.online.q_intra_i.forward(img.ncl.as_ref().expect("requested"))?;
            let v = state.online.q_intra_t.forward(txt.ncl.as_ref().expect("requested"))?;
            let u_tgt = state.image_target(inp.images_v2)?;
            let v_tgt = state.text_target(inp.tokens_v2)?;
            let (a, b) = intra_modal_loss(&u, &u_tgt, &v, &v_tgt)?;
            a.add(&b)
        }
    }
}

/// Relative finite-difference step sizes, largest first. A comparison that
/// misses the tolerance is retried down the ladder: a ReLU kink crossed
/// inside the central-difference interval poisons the estimate at one step
/// size but not at a smaller one, while a genuine analytic-gradient bug
/// disagrees at every step size and still fails.
pub const FD_LADDER: [f64; 3] = [1e-5, 3e-7, 1e-8];

/// One sweep's shape and budget.
#[derive(Clone, Copy, Debug)]
pub struct SweepSettings {
    pub dims: DimsConfig,
    pub share_pre_projectors: bool,
    pub batch: usize,
    /// Coordinates checked per tensor; 0 means every coordinate.
    pub coords_per_tensor: usize,
    /// Disagreement threshold that triggers the retry ladder.
    pub tol: f64,
}

impl SweepSettings {
    /// Exhaustive sweep at the smallest dims; runs in well under a second.
    pub fn micro() -> SweepSettings {
        SweepSettings {
            dims: DimsConfig::micro(),
            share_pre_projectors: true,
            batch: 4,
            coords_per_tensor: 0,
            tol: 1e-4,
        }
    }
}

/// Outcome of one (seed, loss family) sweep.
#[derive(Clone, Debug)]
pub struct SelectReport {
    pub select: LossSelect,
    /// Tensors carrying an analytic gradient under this family.
    pub tensors_checked: usize,
    /// Tensors the family's graph never touches (no gradient, not swept).
    pub tensors_skipped: usize,
    pub coords_checked: usize,
    /// Comparisons that needed a smaller step size (kink crossings).
    pub ladder_retries: usize,
    pub max_rel_err: f64,
    /// `name[flat_index]` of the worst coordinate.
    pub worst: String,
}

/// All five families for one seed.
#[derive(Clone, Debug)]
pub struct SweepReport {
    pub seed: u64,
    pub share_pre_projectors: bool,
    pub rows: Vec<SelectReport>,
}

impl SweepReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

pub const SWEEP_HEADER: &str =
    "seed\tselect\tshare_pre_projectors\ttensors\tskipped\tcoords\tretries\tmax_rel_err\tworst";

pub fn sweep_tsv_rows(report: &SweepReport) -> String {
    let mut out = String::new();
    for r in &report.rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3e}\t{}\n",
            report.seed,
            r.select.name(),
            report.share_pre_projectors,
            r.tensors_checked,
            r.tensors_skipped,
            r.coords_checked,
            r.ladder_retries,
            r.max_rel_err,
            r.worst
        ));
    }
    out
}

struct Inputs {
    images_v1: Tensor,
    images_v2: Tensor,
    tokens_v1: TokenMatrix,
    tokens_v2: TokenMatrix,
}

impl Inputs {
    fn borrow(&self) -> StepInputs<'_> {
        StepInputs {
            images_v1: &self.images_v1,
            images_v2: &self.images_v2,
            tokens_v1: &self.tokens_v1,
            tokens_v2: &self.tokens_v2,
        }
    }
}

fn random_inputs(dims: &DimsConfig, batch: usize, rng: &Rng) -> Result<Inputs> {
    let image = |r: &mut Rng| -> Result<Tensor> {
        let v: Vec<f64> = (0..batch * dims.image_dim()).map(|_| r.next_f64()).collect();
        Tensor::new(&[batch, 3, dims.image_side, dims.image_side], v)
    };
    // every position gets a real token: the pad path is covered elsewhere and
    // a pad-free batch keeps the pooled gradient dense
    let tokens = |r: &mut Rng| -> Result<TokenMatrix> {
        let v: Vec<u32> = (0..batch * dims.max_text_len)
            .map(|_| 2 + r.below(dims.vocab_size as u64 - 2) as u32)
            .collect();
        TokenMatrix::new(batch, dims.max_text_len, v)
    };
    Ok(Inputs {
        images_v1: image(&mut rng.stream("images").substream(0))?,
        images_v2: image(&mut rng.stream("images").substream(1))?,
        tokens_v1: tokens(&mut rng.stream("tokens").substream(0))?,
        tokens_v2: tokens(&mut rng.stream("tokens").substream(1))?,
    })
}

/// Central difference of the selected loss along one coordinate of one named
/// online tensor; the tensor is restored afterwards.
fn fd_coordinate(
    state: &mut ModelState,
    inputs: &Inputs,
    select: LossSelect,
    name: &str,
    original: &Tensor,
    coord: usize,
    h: f64,
) -> Result<f64> {
    let mut eval_at = |delta: f64| -> Result<f64> {
        let mut vals = original.values().to_vec();
        vals[coord] += delta;
        let probe = Tensor::param(original.shape(), vals)?;
        assert!(state.replace_online(name, probe), "unknown parameter {name}");
        no_grad(|| Ok(loss_value(state, &inputs.borrow(), select)?.scalar_value()))
    };
    let result = (|| Ok((eval_at(h)? - eval_at(-h)?) / (2.0 * h)))();
    state.replace_online(name, original.clone());
    result
}

/// Sweeps every loss family at one seed: backward once for the analytic
/// gradients, then compare each selected coordinate against central finite
/// differences, shrinking the step down [`FD_LADDER`] when a comparison
/// misses the tolerance.
pub fn run_sweep(settings: &SweepSettings, seed: u64) -> Result<SweepReport> {
    let root = Rng::new(seed);
    let mut state = ModelState::init(
        settings.dims,
        settings.share_pre_projectors,
        &root.stream("model"),
    )?;
    let inputs = random_inputs(&settings.dims, settings.batch, &root.stream("inputs"))?;
    let mut rows = Vec::new();
    for select in LossSelect::ALL {
        state.clear_grads();
        let total = loss_value(&state, &inputs.borrow(), select)?;
        total.backward()?;
        let mut analytic: BTreeMap<String, (Tensor, Vec<f64>)> = BTreeMap::new();
        let mut tensors_skipped = 0;
        for (name, t) in state.named_online() {
            match t.grad() {
                Some(g) => {
                    analytic.insert(name, (t.clone(), g.to_vec()));
                }
                None => tensors_skipped += 1,
            }
        }
        let mut row = SelectReport {
            select,
            tensors_checked: analytic.len(),
            tensors_skipped,
            coords_checked: 0,
            ladder_retries: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        };
        for (name, (original, grad)) in &analytic {
            let coords: Vec<usize> = if settings.coords_per_tensor == 0
                || settings.coords_per_tensor >= grad.len()
            {
                (0..grad.len()).collect()
            } else {
                let mut idx: Vec<usize> = (0..grad.len()).collect();
                root.stream("coords").stream(select.name()).stream(name).shuffle(&mut idx);
                let mut picked = idx[..settings.coords_per_tensor].to_vec();
                picked.sort_unstable();
                picked
            };
            for coord in coords {
                let scale = original.values()[coord].abs().max(1.0);
                let mut rel = f64::INFINITY;
                for (rung, h_rel) in FD_LADDER.iter().enumerate() {
                    let fd =
                        fd_coordinate(&mut state, &inputs, select, name, original, coord, h_rel * scale)?;
                    rel = max_rel_err(&grad[coord..=coord], &[fd]);
                    if rel < settings.tol {
                        break;
                    }
                    if rung + 1 < FD_LADDER.len() {
                        row.ladder_retries += 1;
                    }
                }
                row.coords_checked += 1;
                if rel > row.max_rel_err {
                    row.max_rel_err = rel;
                    row.worst = format!("{name}[{coord}]");
                }
            }
        }
        rows.push(row);
    }
    Ok(SweepReport { seed, share_pre_projectors: settings.share_pre_projectors, rows })
}
