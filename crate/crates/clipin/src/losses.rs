//! Training objectives: symmetric InfoNCE over in-batch negatives, plus the
//! non-contrastive inter-/intra-modal terms (negative cosine against the
//! momentum branch), combined with fixed or learnable weighting.
//!
//! Conventions, used consistently everywhere:
//! - each individual term is a mean over the batch;
//! - a loss family's two directions are summed (inter = I2T + T2I,
//!   contrastive = I2T + T2I, intra = image + text);
//! - target-branch features enter behind a stop-gradient boundary.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Softmax temperature for the contrastive loss: either a fixed positive
/// constant or a learnable log-temperature tensor (tau = exp(log_tau)).
#[derive(Clone, Debug)]
pub enum Temperature {
    Fixed(f64),
    Learnable(Tensor),
}

fn expect_feature_pair(a: &Tensor, b: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match (a.shape(), b.shape()) {
        ([n, d], [n2, d2]) if n == n2 && d == d2 => Ok((*n, *d)),
        _ => Err(Error::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        }),
    }
}

/// Mean over the batch of row-wise cosine similarity between l2-normalized
/// `a` and `b`, negated — the non-contrastive alignment loss. Range [-1, 1].
fn neg_mean_cosine(a: &Tensor, b: &Tensor, op: &'static str) -> Result<Tensor> {
    expect_feature_pair(a, b, op)?;
    let na = a.l2_normalize()?;
    let nb = b.l2_normalize()?;
    Ok(na.mul(&nb)?.sum_rows()?.mean_all().neg())
}

/// Cross-modal online-vs-target alignment: predictor outputs on one modality
/// against the momentum features of the other. Returns (I2T, T2I) scalars.
/// `v_tgt`/`u_tgt` must come from behind a stop-gradient boundary.
pub fn inter_modal_loss(
    u: &Tensor,
    v: &Tensor,
    u_tgt: &Tensor,
    v_tgt: &Tensor,
) -> Result<(Tensor, Tensor)> {
    debug_assert!(!u_tgt.requires_grad() && !v_tgt.requires_grad());
    let i2t = neg_mean_cosine(u, v_tgt, "inter_modal_loss")?;
    let t2i = neg_mean_cosine(v, u_tgt, "inter_modal_loss")?;
    Ok((i2t, t2i))
}

/// Within-modality online-vs-target alignment (image, text) for the intra
/// predictors. Returns (image, text) scalars.
pub fn intra_modal_loss(
    u_intra: &Tensor,
    u_tgt: &Tensor,
    v_intra: &Tensor,
    v_tgt: &Tensor,
) -> Result<(Tensor, Tensor)> {
    debug_assert!(!u_tgt.requires_grad() && !v_tgt.requires_grad());
    let image = neg_mean_cosine(u_intra, u_tgt, "intra_modal_loss")?;
    let text = neg_mean_cosine(v_intra, v_tgt, "intra_modal_loss")?;
    Ok((image, text))
}

/// Symmetric InfoNCE over the B x B cosine-similarity matrix with diagonal
/// positives: cross-entropy per row (I2T) and per column (T2I), each averaged
/// over the batch. Needs at least two samples to have any negatives.
pub fn info_nce_loss(u: &Tensor, v: &Tensor, tau: &Temperature) -> Result<(Tensor, Tensor)> {
    let (b, _) = expect_feature_pair(u, v, "info_nce_loss")?;
    if b < 2 {
        return Err(Error::BatchTooSmall { got: b, min: 2 });
    }
    let nu = u.l2_normalize()?;
    let nv = v.l2_normalize()?;
    let sim = nu.matmul(&nv.transpose()?)?;
    let logits = match tau {
        Temperature::Fixed(t) => {
            if *t <= 0.0 {
                return Err(Error::NonPositiveTau(*t));
            }
            sim.scale(1.0 / t)
        }
        Temperature::Learnable(log_tau) => sim.mul_scalar_t(&log_tau.neg().exp())?,
    };
    let i2t = logits.logsumexp_rows()?.sub(&logits.diag()?)?.mean_all();
    let logits_t = logits.transpose()?;
    let t2i = logits_t.logsumexp_rows()?.sub(&logits_t.diag()?)?.mean_all();
    Ok((i2t, t2i))
}

/// How the loss families are combined into the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// total = L_CL + L_inter + L_intra (unit weights).
    Fixed,
    /// Uncertainty-style learnable weights lambda_i = exp(-s_i):
    /// total = L_CL + lambda_inter*(L_inter+2) + lambda_intra*(L_intra+2)
    ///       + s_inter + s_intra.
    /// The +2 shift keeps each weighted family non-negative (each direction
    /// of a cosine loss lives in [-1,1], so a summed family lives in [-2,2]).
    Learnable,
}

/// Scalar graph nodes for the enabled loss families; a disabled family is
/// simply absent and contributes nothing (not even its s_i term).
#[derive(Clone, Default)]
pub struct LossTerms {
    pub cl: Option<(Tensor, Tensor)>,
    pub inter: Option<(Tensor, Tensor)>,
    pub intra: Option<(Tensor, Tensor)>,
}

/// Combines the enabled families into the total training loss. The
/// contrastive family is mandatory; `s_inter`/`s_intra` are only read in
/// learnable mode.
pub fn total_loss(
    terms: &LossTerms,
    weighting: Weighting,
    s_inter: &Tensor,
    s_intra: &Tensor,
) -> Result<Tensor> {
    let (cl_i2t, cl_t2i) = terms.cl.as_ref().ok_or(Error::MissingComponent("contrastive"))?;
    let mut total = cl_i2t.add(cl_t2i)?;
    match weighting {
        Weighting::Fixed => {
            if let Some((a, b)) = &terms.inter {
                total = total.add(&a.add(b)?)?;
            }
            if let Some((a, b)) = &terms.intra {
                total = total.add(&a.add(b)?)?;
            }
        }
        Weighting::Learnable => {
            if let Some((a, b)) = &terms.inter {
                let lambda = s_inter.neg().exp();
                let shifted = a.add(b)?.add_const(2.0);
                total = total.add(&shifted.mul_scalar_t(&lambda)?)?.add(s_inter)?;
            }
            if let Some((a, b)) = &terms.intra {
                let lambda = s_intra.neg().exp();
                let shifted = a.add(b)?.add_const(2.0);
                total = total.add(&shifted.mul_scalar_t(&lambda)?)?.add(s_intra)?;
            }
        }
    }
    Ok(total)
}

/// Per-step scalar record of every loss component. Disabled families have
/// absent fields; the lambda columns echo the effective weights (1.0 in
/// fixed mode).
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub l_cl_i2t: Option<f64>,
    pub l_cl_t2i: Option<f64>,
    pub l_inter_i2t: Option<f64>,
    pub l_inter_t2i: Option<f64>,
    pub l_intra_i: Option<f64>,
    pub l_intra_t: Option<f64>,
    pub lambda_inter: f64,
    pub lambda_intra: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(
        terms: &LossTerms,
        weighting: Weighting,
        s_inter: &Tensor,
        s_intra: &Tensor,
        total: f64,
    ) -> LossBreakdown {
        let pair = |p: &Option<(Tensor, Tensor)>| match p {
            Some((a, b)) => (Some(a.scalar_value()), Some(b.scalar_value())),
            None => (None, None),
        };
        let (l_cl_i2t, l_cl_t2i) = pair(&terms.cl);
        let (l_inter_i2t, l_inter_t2i) = pair(&terms.inter);
        let (l_intra_i, l_intra_t) = pair(&terms.intra);
        let (lambda_inter, lambda_intra) = match weighting {
            Weighting::Fixed => (1.0, 1.0),
            Weighting::Learnable => {
                ((-s_inter.scalar_value()).exp(), (-s_intra.scalar_value()).exp())
            }
        };
        LossBreakdown {
            l_cl_i2t,
            l_cl_t2i,
            l_inter_i2t,
            l_inter_t2i,
            l_intra_i,
            l_intra_t,
            lambda_inter,
            lambda_intra,
            total,
        }
    }

    /// Human-readable dump for diagnostics (e.g. the non-finite-loss abort).
    pub fn dump(&self) -> String {
        let f = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.6}"));
        format!(
            "total={:.6} cl_i2t={} cl_t2i={} inter_i2t={} inter_t2i={} intra_i={} intra_t={} lambda_inter={:.6} lambda_intra={:.6}",
            self.total,
            f(self.l_cl_i2t),
            f(self.l_cl_t2i),
            f(self.l_inter_i2t),
            f(self.l_inter_t2i),
            f(self.l_intra_i),
            f(self.l_intra_t),
            self.lambda_inter,
            self.lambda_intra,
        )
    }
}
