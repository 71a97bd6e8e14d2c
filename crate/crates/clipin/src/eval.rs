//! Evaluation: linear probing, prompt-based zero-shot classification,
//! ranking metrics (AUC / average precision), and collapse diagnostics.
//!
//! Everything here is read-only over the model and bit-deterministic:
//! fixed split rule, fixed probe schedule, documented tie handling.

use crate::data::{BitMatrix, Codebook, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::model::{ModelState, PAD_TOKEN};
use crate::numerics::{no_grad, Tensor, TokenMatrix};
use serde::Serialize;

/// Which activation the probe / feature extraction taps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// Raw encoder output [N, d_enc].
    Encoder,
    /// Shared pre-projector output [N, d_pre].
    Pre,
    /// Contrastive embedding [N, d_cl] (default tap).
    Cl,
}

impl Branch {
    pub fn by_name(name: &str) -> Result<Branch> {
        match name {
            "encoder" => Ok(Branch::Encoder),
            "pre" => Ok(Branch::Pre),
            "cl" => Ok(Branch::Cl),
            other => Err(Error::Config(format!("unknown branch '{other}'"))),
        }
    }
}

/// Un-augmented online image features at the chosen tap, no graph recorded.
pub fn extract_image_features(state: &ModelState, images: &Tensor, branch: Branch) -> Result<Tensor> {
    no_grad(|| {
        let fwd = state.image_online(images, false)?;
        Ok(match branch {
            Branch::Encoder => fwd.enc,
            Branch::Pre => fwd.pre,
            Branch::Cl => fwd.cl,
        })
    })
}

/// Un-augmented online text features at the chosen tap, no graph recorded.
pub fn extract_text_features(
    state: &ModelState,
    tokens: &TokenMatrix,
    branch: Branch,
) -> Result<Tensor> {
    no_grad(|| {
        let fwd = state.text_online(tokens, false)?;
        Ok(match branch {
            Branch::Encoder => fwd.enc,
            Branch::Pre => fwd.pre,
            Branch::Cl => fwd.cl,
        })
    })
}

// ---- ranking metrics ----

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties worth one half. Computed via average ranks in O(n log n).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // average rank (1-based) across each tied block
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            rank[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels.iter().zip(&rank).filter(|(l, _)| **l).map(|(_, r)| r).sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision: mean of precision-at-rank over the positions of the
/// positives in descending score order; equal scores keep input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if !labels.iter().any(|&l| l) {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort: ties stay in input order
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &idx) in order.iter().enumerate() {
        if labels[idx] {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Ok(sum / hits as f64)
}

// ---- collapse diagnostics ----

/// (min per-dimension std of l2-normalized rows, effective rank).
///
/// Effective rank = exp(entropy of the normalized singular-value
/// distribution) of the normalized feature matrix: 1 when every row is the
/// same direction, d for an isotropic orthonormal set.
pub fn collapse_diagnostics(features: &Tensor) -> Result<(f64, f64)> {
    let normalized = no_grad(|| features.l2_normalize())?;
    let [n, d] = normalized.shape() else {
        return Err(Error::ShapeMismatch {
            op: "collapse diagnostics",
            detail: format!("expected [N, d], got {:?}", normalized.shape()),
        });
    };
    let (n, d) = (*n, *d);
    let y = normalized.values();
    let mut std_min = f64::INFINITY;
    for j in 0..d {
        let mean: f64 = (0..n).map(|i| y[i * d + j]).sum::<f64>() / n as f64;
        let var: f64 = (0..n).map(|i| (y[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        std_min = std_min.min(var.sqrt());
    }
    // singular values of Y via the d x d Gram matrix (d is small here)
    let mut gram = nalgebra::DMatrix::<f64>::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let dot: f64 = (0..n).map(|i| y[i * d + a] * y[i * d + b]).sum();
            gram[(a, b)] = dot;
            gram[(b, a)] = dot;
        }
    }
    let eig = nalgebra::SymmetricEigen::new(gram);
    // eigenvalues of a rank-deficient Gram matrix carry O(eps * lambda_max)
    // noise that the square root would inflate; clamp them to exact zeros
    let lambda_max = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l));
    let cutoff = lambda_max * d as f64 * f64::EPSILON;
    let sigmas: Vec<f64> =
        eig.eigenvalues.iter().map(|&l| if l > cutoff { l.sqrt() } else { 0.0 }).collect();
    Ok((std_min, effective_rank_from_sigmas(&sigmas)))
}

/// exp(entropy) of sigma / sum(sigma); zero singular values contribute 0.
pub fn effective_rank_from_sigmas(sigmas: &[f64]) -> f64 {
    let total: f64 = sigmas.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let entropy: f64 = sigmas
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    entropy.exp()
}

// ---- linear probe ----

/// Probe schedule: full-batch logistic regression per class.
#[derive(Clone, Copy, Debug)]
pub struct ProbeConfig {
    pub iters: usize,
    pub lr: f64,
    /// Leading fraction of rows used for fitting; the rest is held out.
    pub train_frac: f64,
}

impl Default for ProbeConfig {
    fn default() -> ProbeConfig {
        ProbeConfig { iters: 500, lr: 0.1, train_frac: 0.8 }
    }
}

/// Per-class one-vs-rest probe results on the held-out split.
#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    /// None for classes skipped as degenerate.
    pub per_class_auc: Vec<Option<f64>>,
    pub per_class_ap: Vec<Option<f64>>,
    pub mean_auc: f64,
    pub map: f64,
    pub skipped_classes: Vec<usize>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Trains one-vs-rest logistic regressions by full-batch gradient descent on
/// the leading `train_frac` rows and scores the held-out tail. Classes whose
/// training split sees a single label value, or whose held-out split cannot
/// support the metric, are skipped and flagged.
pub fn linear_probe(features: &Tensor, labels: &BitMatrix, cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    let [n, d] = features.shape() else {
        return Err(Error::ShapeMismatch {
            op: "linear probe",
            detail: format!("expected [N, d] features, got {:?}", features.shape()),
        });
    };
    let (n, d) = (*n, *d);
    if labels.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "linear probe",
            detail: format!("{n} feature rows vs {} label rows", labels.rows()),
        });
    }
    let n_train = ((cfg.train_frac * n as f64).floor() as usize).clamp(1, n.saturating_sub(1));
    if n < 2 {
        return Err(Error::BatchTooSmall { got: n, min: 2 });
    }
    let x = features.values();
    let classes = labels.cols();
    let mut per_class_auc = vec![None; classes];
    let mut per_class_ap = vec![None; classes];
    let mut skipped = Vec::new();
    for c in 0..classes {
        let y: Vec<f64> = (0..n).map(|i| labels.get(i, c) as u8 as f64).collect();
        let train_pos: f64 = y[..n_train].iter().sum();
        if train_pos == 0.0 || train_pos == n_train as f64 {
            skipped.push(c);
            continue;
        }
        // logistic regression from zero init: w -= lr * X^T (p - y) / n
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..cfg.iters {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for i in 0..n_train {
                let row = &x[i * d..(i + 1) * d];
                let z: f64 = row.iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>() + b;
                let err = sigmoid(z) - y[i];
                for (g, xi) in gw.iter_mut().zip(row) {
                    *g += err * xi;
                }
                gb += err;
            }
            let inv = 1.0 / n_train as f64;
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= cfg.lr * g * inv;
            }
            b -= cfg.lr * gb * inv;
        }
        let scores: Vec<f64> = (n_train..n)
            .map(|i| {
                let row = &x[i * d..(i + 1) * d];
                row.iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>() + b
            })
            .collect();
        let held: Vec<bool> = (n_train..n).map(|i| labels.get(i, c)).collect();
        match (auc(&scores, &held), average_precision(&scores, &held)) {
            (Ok(a), Ok(ap)) => {
                per_class_auc[c] = Some(a);
                per_class_ap[c] = Some(ap);
            }
            _ => skipped.push(c),
        }
    }
    let mean = |v: &[Option<f64>]| {
        let kept: Vec<f64> = v.iter().flatten().copied().collect();
        if kept.is_empty() { f64::NAN } else { kept.iter().sum::<f64>() / kept.len() as f64 }
    };
    if skipped.len() == classes {
        return Err(Error::DegenerateClass(skipped[0]));
    }
    Ok(ProbeOutcome {
        mean_auc: mean(&per_class_auc),
        map: mean(&per_class_ap),
        per_class_auc,
        per_class_ap,
        skipped_classes: skipped,
    })
}

// ---- zero-shot classification ----

/// One canonical prompt per class, padded to the model's text length.
pub fn class_prompts(codebook: &Codebook, classes: usize, max_text_len: usize) -> Result<TokenMatrix> {
    if classes == 0 {
        return Err(Error::EmptyPrompts);
    }
    let rows: Vec<Vec<u32>> = (0..classes).map(|c| vec![codebook.prompt_token(c)]).collect();
    Ok(TokenMatrix::from_rows(&rows, max_text_len, PAD_TOKEN))
}

/// score[n, c] = cosine(image embedding n, prompt embedding c); both sides
/// come from the online contrastive branch.
pub fn zero_shot_classify(
    state: &ModelState,
    images: &Tensor,
    prompts: &TokenMatrix,
) -> Result<Tensor> {
    if prompts.rows() == 0 {
        return Err(Error::EmptyPrompts);
    }
    let u = extract_image_features(state, images, Branch::Cl)?;
    let v = extract_text_features(state, prompts, Branch::Cl)?;
    no_grad(|| zsc_scores_from_features(&u, &v))
}

/// Cosine score matrix from raw (unnormalized) feature matrices.
pub fn zsc_scores_from_features(image_feats: &Tensor, prompt_feats: &Tensor) -> Result<Tensor> {
    image_feats.l2_normalize()?.matmul(&prompt_feats.l2_normalize()?.transpose()?)
}

/// Top-1 accuracy restricted to rows with exactly one positive label, so
/// argmax against C prompts has a well-defined answer and chance level 1/C.
/// Ties pick the lowest class index. None when no row qualifies.
pub fn zsc_top1(scores: &Tensor, labels: &BitMatrix) -> Result<Option<f64>> {
    let [n, c] = scores.shape() else {
        return Err(Error::ShapeMismatch {
            op: "zero-shot top-1",
            detail: format!("expected [N, C] scores, got {:?}", scores.shape()),
        });
    };
    let (n, c) = (*n, *c);
    if labels.rows() != n || labels.cols() != c {
        return Err(Error::ShapeMismatch {
            op: "zero-shot top-1",
            detail: format!("scores [{n}, {c}] vs labels [{}, {}]", labels.rows(), labels.cols()),
        });
    }
    let s = scores.values();
    let mut total = 0usize;
    let mut correct = 0usize;
    for i in 0..n {
        let row = labels.row(i);
        if row.iter().filter(|&&b| b).count() != 1 {
            continue;
        }
        let truth = row.iter().position(|&b| b).expect("exactly one positive");
        let mut best = 0;
        for j in 1..c {
            if s[i * c + j] > s[i * c + best] {
                best = j;
            }
        }
        total += 1;
        correct += (best == truth) as usize;
    }
    Ok(if total == 0 { None } else { Some(correct as f64 / total as f64) })
}

/// Per-class AUC / AP of a score matrix against a label matrix; classes
/// without both label values (or without positives, for AP) are skipped.
pub fn per_class_metrics(
    scores: &Tensor,
    labels: &BitMatrix,
) -> Result<(Vec<Option<f64>>, Vec<Option<f64>>, Vec<usize>)> {
    let [n, c] = scores.shape() else {
        return Err(Error::ShapeMismatch {
            op: "per-class metrics",
            detail: format!("expected [N, C] scores, got {:?}", scores.shape()),
        });
    };
    let (n, c) = (*n, *c);
    let s = scores.values();
    let mut aucs = vec![None; c];
    let mut aps = vec![None; c];
    let mut skipped = Vec::new();
    for j in 0..c {
        let col: Vec<f64> = (0..n).map(|i| s[i * c + j]).collect();
        let lab: Vec<bool> = (0..n).map(|i| labels.get(i, j)).collect();
        match (auc(&col, &lab), average_precision(&col, &lab)) {
            (Ok(a), Ok(p)) => {
                aucs[j] = Some(a);
                aps[j] = Some(p);
            }
            _ => skipped.push(j),
        }
    }
    Ok((aucs, aps, skipped))
}

// ---- report ----

/// One evaluation run, serializable as TSV or a single JSONL record.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    /// Which tap produced the probed features.
    pub branch: String,
    pub per_class_auc: Vec<Option<f64>>,
    pub mean_auc: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub zsc_top1: Option<f64>,
    pub feature_std_min: f64,
    pub effective_rank: f64,
    pub skipped_classes: Vec<usize>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("nan".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let join = |v: &[Option<f64>]| {
            v.iter().map(|&x| fmt_opt(x)).collect::<Vec<_>>().join(",")
        };
        let skipped =
            self.skipped_classes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "branch\tmean_auc\tmap\tzsc_top1\tfeature_std_min\teffective_rank\tper_class_auc\tper_class_ap\tskipped_classes\n{}\t{:.6}\t{:.6}\t{}\t{:.6}\t{:.6}\t{}\t{}\t{}\n",
            self.branch,
            self.mean_auc,
            self.map,
            fmt_opt(self.zsc_top1),
            self.feature_std_min,
            self.effective_rank,
            join(&self.per_class_auc),
            join(&self.per_class_ap),
            skipped
        )
    }

    pub fn to_jsonl(&self) -> Result<String> {
        // serde_json writes non-finite floats as null, which is what we want
        // for skipped-class placeholders
        serde_json::to_string(self).map_err(|e| Error::Config(format!("serialize report: {e}")))
    }
}

/// Full evaluation pipeline on a generated corpus: linear probe at `branch`,
/// collapse diagnostics on the same features, and (optionally) zero-shot
/// classification through the contrastive branch.
pub fn evaluate_corpus(
    state: &ModelState,
    corpus: &SyntheticCorpus,
    branch: Branch,
    probe_cfg: &ProbeConfig,
    with_zsc: bool,
) -> Result<EvalReport> {
    let images = corpus.all_images()?;
    let labels = corpus.labels()?;
    let features = extract_image_features(state, &images, branch)?;
    let probe = linear_probe(&features, &labels, probe_cfg)?;
    let (std_min, eff_rank) = collapse_diagnostics(&features)?;
    let zsc = if with_zsc {
        let prompts =
            class_prompts(&corpus.codebook, corpus.spec.classes, state.dims.max_text_len)?;
        let scores = zero_shot_classify(state, &images, &prompts)?;
        zsc_top1(&scores, &labels)?
    } else {
        None
    };
    Ok(EvalReport {
        branch: format!("{branch:?}").to_lowercase(),
        per_class_auc: probe.per_class_auc,
        mean_auc: probe.mean_auc,
        per_class_ap: probe.per_class_ap,
        map: probe.map,
        zsc_top1: zsc,
        feature_std_min: std_min,
        effective_rank: eff_rank,
        skipped_classes: probe.skipped_classes,
    })
}

/// Zero-shot evaluation report: per-class metrics come from the similarity
/// scores themselves rather than a trained probe.
pub fn evaluate_zsc(state: &ModelState, corpus: &SyntheticCorpus) -> Result<EvalReport> {
    let images = corpus.all_images()?;
    let labels = corpus.labels()?;
    let prompts = class_prompts(&corpus.codebook, corpus.spec.classes, state.dims.max_text_len)?;
    let scores = zero_shot_classify(state, &images, &prompts)?;
    let (aucs, aps, skipped) = per_class_metrics(&scores, &labels)?;
    let top1 = zsc_top1(&scores, &labels)?;
    let features = extract_image_features(state, &images, Branch::Cl)?;
    let (std_min, eff_rank) = collapse_diagnostics(&features)?;
    let mean = |v: &[Option<f64>]| {
        let kept: Vec<f64> = v.iter().flatten().copied().collect();
        if kept.is_empty() { f64::NAN } else { kept.iter().sum::<f64>() / kept.len() as f64 }
    };
    Ok(EvalReport {
        branch: "cl".to_string(),
        mean_auc: mean(&aucs),
        map: mean(&aps),
        per_class_auc: aucs,
        per_class_ap: aps,
        zsc_top1: top1,
        feature_std_min: std_min,
        effective_rank: eff_rank,
        skipped_classes: skipped,
    })
}
