//! The four-branch model: online and momentum (target) towers for each
//! modality.
//!
//! Online image path: f_theta -> g_pre_i -> { g_cl_i (contrastive head),
//! g_ncl_i (non-contrastive head) -> q_inter_i / q_intra_i }. Text mirrors it
//! with f_phi. The target tower duplicates the trunks and projectors up to
//! g_ncl, holds frozen copies of the online weights at init, and afterwards
//! tracks them by exponential moving average; no gradient ever flows into it.
//!
//! With `share_pre_projectors` off (the "plain CLIP + separate branch"
//! ablation) the contrastive head reads the encoder output directly instead
//! of g_pre, so the contrastive loss cannot influence the shared projector.

use crate::error::{Error, Result};
use crate::numerics::{embed_mean_pool, Rng, Tensor, TokenMatrix};

/// Token id reserved for padding (never embedded).
pub const PAD_TOKEN: u32 = 0;
/// Token id reserved for the mask used by text augmentation.
pub const MASK_TOKEN: u32 = 1;
/// Epsilon inside every layer-norm variance.
pub const LN_EPS: f64 = 1e-5;

/// All width/shape hyperparameters in one place.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DimsConfig {
    /// Images are 3 x image_side x image_side.
    pub image_side: usize,
    /// Encoder output width (both modalities).
    pub d_enc: usize,
    /// Shared pre-projector width.
    pub d_pre: usize,
    /// Contrastive embedding width.
    pub d_cl: usize,
    /// Non-contrastive embedding width.
    pub d_ncl: usize,
    /// Hidden width of the inter/intra predictors.
    pub predictor_bottleneck: usize,
    /// Token embedding rows (includes pad and mask).
    pub vocab_size: usize,
    /// Fixed token sequence length.
    pub max_text_len: usize,
}

impl DimsConfig {
    /// Desk preset: small enough to train in minutes on one core while
    /// keeping the widths ordered like the full-scale setup (contrastive
    /// head narrower than the pre-projector, non-contrastive head widest).
    pub fn desk() -> DimsConfig {
        DimsConfig {
            image_side: 16,
            d_enc: 64,
            d_pre: 128,
            d_cl: 64,
            d_ncl: 1024,
            predictor_bottleneck: 256,
            vocab_size: 66,
            max_text_len: 16,
        }
    }

    /// Small preset that keeps the full 66-token codebook, so end-to-end
    /// train/eval loops run in milliseconds in the self-tests.
    pub fn tiny() -> DimsConfig {
        DimsConfig {
            image_side: 6,
            d_enc: 10,
            d_pre: 12,
            d_cl: 6,
            d_ncl: 16,
            predictor_bottleneck: 7,
            vocab_size: 66,
            max_text_len: 8,
        }
    }

    /// Tiny preset for exhaustive finite-difference sweeps (every dim <= 16).
    pub fn micro() -> DimsConfig {
        DimsConfig {
            image_side: 3,
            d_enc: 6,
            d_pre: 8,
            d_cl: 4,
            d_ncl: 12,
            predictor_bottleneck: 5,
            vocab_size: 14,
            max_text_len: 4,
        }
    }

    /// Full-scale width ratios (pre/contrastive/non-contrastive =
    /// 1024/512/8192). Provided for inspection; not meant to be trained here.
    pub fn paper_ratio() -> DimsConfig {
        DimsConfig {
            image_side: 224,
            d_enc: 768,
            d_pre: 1024,
            d_cl: 512,
            d_ncl: 8192,
            predictor_bottleneck: 2048,
            vocab_size: 66,
            max_text_len: 77,
        }
    }

    pub fn by_name(name: &str) -> Result<DimsConfig> {
        match name {
            "desk" => Ok(DimsConfig::desk()),
            "tiny" => Ok(DimsConfig::tiny()),
            "micro" => Ok(DimsConfig::micro()),
            "paper-ratio" => Ok(DimsConfig::paper_ratio()),
            other => Err(Error::Config(format!("unknown dims preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.image_side,
            self.d_enc,
            self.d_pre,
            self.d_cl,
            self.d_ncl,
            self.predictor_bottleneck,
            self.vocab_size,
            self.max_text_len,
        ];
        if all.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("all dims must be positive: {self:?}")));
        }
        // the contrastive space is the narrowest, the non-contrastive the widest
        if !(self.d_cl < self.d_pre && self.d_pre < self.d_ncl) {
            return Err(Error::Config(format!(
                "dims must satisfy d_cl < d_pre < d_ncl, got {}/{}/{}",
                self.d_cl, self.d_pre, self.d_ncl
            )));
        }
        if self.vocab_size <= MASK_TOKEN as usize {
            return Err(Error::Config("vocab must cover pad and mask tokens".into()));
        }
        Ok(())
    }

    /// Flattened image width: 3 * side * side.
    pub fn image_dim(&self) -> usize {
        3 * self.image_side * self.image_side
    }
}

/// Named traversal over every tensor in a (sub)module, used by the optimizer,
/// EMA update, checkpoints, and gradient sweeps. The two variants must agree
/// on order and names, which the `visit_fields!` macro guarantees.
pub(crate) trait Visit {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

impl Visit for Tensor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(prefix.to_string(), self);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(prefix.to_string(), self);
    }
}

macro_rules! visit_fields {
    ($ty:ty, $($field:ident),+ $(,)?) => {
        impl Visit for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
                $( self.$field.visit(&format!("{prefix}.{}", stringify!($field)), f); )+
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
                $( self.$field.visit_mut(&format!("{prefix}.{}", stringify!($field)), f); )+
            }
        }
    };
}

/// y = x W + b with W stored [in, out].
#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}
visit_fields!(Linear, weight, bias);

impl Linear {
    fn init(rng: &Rng, name: &str, d_in: usize, d_out: usize) -> Linear {
        let mut r = rng.stream(name);
        let a = (6.0 / (d_in + d_out) as f64).sqrt();
        let w: Vec<f64> = (0..d_in * d_out).map(|_| r.uniform(-a, a)).collect();
        Linear {
            weight: Tensor::param(&[d_in, d_out], w).expect("init values are finite"),
            bias: Tensor::param(&[d_out], vec![0.0; d_out]).expect("zeros are finite"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}
visit_fields!(LayerNorm, gain, bias);

impl LayerNorm {
    fn init(d: usize) -> LayerNorm {
        LayerNorm {
            gain: Tensor::param(&[d], vec![1.0; d]).expect("ones are finite"),
            bias: Tensor::param(&[d], vec![0.0; d]).expect("zeros are finite"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain, &self.bias, LN_EPS)
    }
}

/// flatten -> linear -> layer-norm -> relu -> linear; output [B, d_enc].
#[derive(Clone)]
pub struct ImageEncoder {
    pub lin1: Linear,
    pub ln: LayerNorm,
    pub lin2: Linear,
}
visit_fields!(ImageEncoder, lin1, ln, lin2);

impl ImageEncoder {
    fn init(rng: &Rng, name: &str, dims: &DimsConfig) -> ImageEncoder {
        ImageEncoder {
            lin1: Linear::init(rng, &format!("{name}.lin1"), dims.image_dim(), dims.d_enc),
            ln: LayerNorm::init(dims.d_enc),
            lin2: Linear::init(rng, &format!("{name}.lin2"), dims.d_enc, dims.d_enc),
        }
    }

    pub fn forward(&self, images: &Tensor, dims: &DimsConfig) -> Result<Tensor> {
        let s = dims.image_side;
        let b = match images.shape() {
            [b, 3, h, w] if *h == s && *w == s => *b,
            other => {
                return Err(Error::ShapeMismatch {
                    op: "image encoder",
                    detail: format!("expected [B,3,{s},{s}], got {other:?}"),
                })
            }
        };
        let flat = images.reshape(&[b, dims.image_dim()])?;
        self.lin2.forward(&self.ln.forward(&self.lin1.forward(&flat)?)?.relu())
    }
}

/// token embedding table -> masked mean-pool -> linear; output [B, d_enc].
#[derive(Clone)]
pub struct TextEncoder {
    pub table: Tensor,
    pub lin: Linear,
}
visit_fields!(TextEncoder, table, lin);

impl TextEncoder {
    fn init(rng: &Rng, name: &str, dims: &DimsConfig) -> TextEncoder {
        let (v, d) = (dims.vocab_size, dims.d_enc);
        let mut r = rng.stream(&format!("{name}.table"));
        let a = (6.0 / (v + d) as f64).sqrt();
        let tv: Vec<f64> = (0..v * d).map(|_| r.uniform(-a, a)).collect();
        TextEncoder {
            table: Tensor::param(&[v, d], tv).expect("init values are finite"),
            lin: Linear::init(rng, &format!("{name}.lin"), d, d),
        }
    }

    pub fn forward(&self, tokens: &TokenMatrix) -> Result<Tensor> {
        self.lin.forward(&embed_mean_pool(&self.table, tokens, PAD_TOKEN)?)
    }
}

/// Shared pre-projector: linear -> layer-norm -> relu; output [B, d_pre].
#[derive(Clone)]
pub struct PreProjector {
    pub lin: Linear,
    pub ln: LayerNorm,
}
visit_fields!(PreProjector, lin, ln);

impl PreProjector {
    fn init(rng: &Rng, name: &str, dims: &DimsConfig) -> PreProjector {
        PreProjector {
            lin: Linear::init(rng, &format!("{name}.lin"), dims.d_enc, dims.d_pre),
            ln: LayerNorm::init(dims.d_pre),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.ln.forward(&self.lin.forward(x)?)?.relu())
    }
}

/// Two-layer MLP (linear -> layer-norm -> relu -> linear) used for the
/// non-contrastive projector and for the predictors.
#[derive(Clone)]
pub struct MlpHead {
    pub lin1: Linear,
    pub ln: LayerNorm,
    pub lin2: Linear,
}
visit_fields!(MlpHead, lin1, ln, lin2);

impl MlpHead {
    fn init(rng: &Rng, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> MlpHead {
        MlpHead {
            lin1: Linear::init(rng, &format!("{name}.lin1"), d_in, d_hidden),
            ln: LayerNorm::init(d_hidden),
            lin2: Linear::init(rng, &format!("{name}.lin2"), d_hidden, d_out),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.lin2.forward(&self.ln.forward(&self.lin1.forward(x)?)?.relu())
    }
}

/// Every trainable tensor: trunks, projectors, predictors, loss weights and
/// the (optionally learnable) log-temperature.
#[derive(Clone)]
pub struct OnlineParams {
    pub f_theta: ImageEncoder,
    pub f_phi: TextEncoder,
    pub g_pre_i: PreProjector,
    pub g_pre_t: PreProjector,
    pub g_ncl_i: MlpHead,
    pub g_ncl_t: MlpHead,
    pub g_cl_i: Linear,
    pub g_cl_t: Linear,
    pub q_inter_i: MlpHead,
    pub q_inter_t: MlpHead,
    pub q_intra_i: MlpHead,
    pub q_intra_t: MlpHead,
    pub s_inter: Tensor,
    pub s_intra: Tensor,
    pub log_tau: Tensor,
}
visit_fields!(
    OnlineParams,
    f_theta,
    f_phi,
    g_pre_i,
    g_pre_t,
    g_ncl_i,
    g_ncl_t,
    g_cl_i,
    g_cl_t,
    q_inter_i,
    q_inter_t,
    q_intra_i,
    q_intra_t,
    s_inter,
    s_intra,
    log_tau,
);

impl OnlineParams {
    /// Traverses only the sub-modules mirrored by the target tower, in the
    /// target's field order, so EMA can zip the two traversals.
    fn visit_shared<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.f_theta.visit(&format!("{prefix}.f_theta"), f);
        self.f_phi.visit(&format!("{prefix}.f_phi"), f);
        self.g_pre_i.visit(&format!("{prefix}.g_pre_i"), f);
        self.g_pre_t.visit(&format!("{prefix}.g_pre_t"), f);
        self.g_ncl_i.visit(&format!("{prefix}.g_ncl_i"), f);
        self.g_ncl_t.visit(&format!("{prefix}.g_ncl_t"), f);
    }
}

/// Momentum tower: frozen mirrors of the online trunks and projectors.
#[derive(Clone)]
pub struct TargetParams {
    pub f_theta: ImageEncoder,
    pub f_phi: TextEncoder,
    pub g_pre_i: PreProjector,
    pub g_pre_t: PreProjector,
    pub g_ncl_i: MlpHead,
    pub g_ncl_t: MlpHead,
}
visit_fields!(TargetParams, f_theta, f_phi, g_pre_i, g_pre_t, g_ncl_i, g_ncl_t);

impl TargetParams {
    /// Frozen value copies of the online tower (the step-0 initialization).
    fn from_online(online: &OnlineParams) -> TargetParams {
        let mut t = TargetParams {
            f_theta: online.f_theta.clone(),
            f_phi: online.f_phi.clone(),
            g_pre_i: online.g_pre_i.clone(),
            g_pre_t: online.g_pre_t.clone(),
            g_ncl_i: online.g_ncl_i.clone(),
            g_ncl_t: online.g_ncl_t.clone(),
        };
        t.visit_mut("target", &mut |_, tensor| *tensor = tensor.stop_grad());
        t
    }
}

/// Should a named parameter receive weight decay? Layer-norm gains/biases,
/// the loss weights and the temperature are exempt.
pub fn decays(name: &str) -> bool {
    !(name.contains(".ln.")
        || name.ends_with(".s_inter")
        || name.ends_with(".s_intra")
        || name.ends_with(".log_tau"))
}

/// Intermediate activations of one online branch.
pub struct OnlineForward {
    /// Encoder output [B, d_enc].
    pub enc: Tensor,
    /// Shared pre-projector output [B, d_pre].
    pub pre: Tensor,
    /// Contrastive embedding [B, d_cl].
    pub cl: Tensor,
    /// Non-contrastive embedding [B, d_ncl]; only when requested.
    pub ncl: Option<Tensor>,
}

/// The full trainable system plus its step counter.
#[derive(Clone)]
pub struct ModelState {
    pub dims: DimsConfig,
    /// When false, the contrastive heads read the encoder output directly
    /// (ablation: no coupling between the two objectives).
    pub share_pre_projectors: bool,
    pub online: OnlineParams,
    pub target: TargetParams,
    pub step: u64,
}

impl ModelState {
    pub fn init(dims: DimsConfig, share_pre_projectors: bool, rng: &Rng) -> Result<ModelState> {
        dims.validate()?;
        let init = rng.stream("init");
        // each tensor draws from a stream keyed by its own name, so widening
        // or adding one layer never shifts any other layer's initialization
        let cl_in = if share_pre_projectors { dims.d_pre } else { dims.d_enc };
        let online = OnlineParams {
            f_theta: ImageEncoder::init(&init, "online.f_theta", &dims),
            f_phi: TextEncoder::init(&init, "online.f_phi", &dims),
            g_pre_i: PreProjector::init(&init, "online.g_pre_i", &dims),
            g_pre_t: PreProjector::init(&init, "online.g_pre_t", &dims),
            g_ncl_i: MlpHead::init(&init, "online.g_ncl_i", dims.d_pre, dims.d_ncl, dims.d_ncl),
            g_ncl_t: MlpHead::init(&init, "online.g_ncl_t", dims.d_pre, dims.d_ncl, dims.d_ncl),
            g_cl_i: Linear::init(&init, "online.g_cl_i", cl_in, dims.d_cl),
            g_cl_t: Linear::init(&init, "online.g_cl_t", cl_in, dims.d_cl),
            q_inter_i: MlpHead::init(
                &init,
                "online.q_inter_i",
                dims.d_ncl,
                dims.predictor_bottleneck,
                dims.d_ncl,
            ),
            q_inter_t: MlpHead::init(
                &init,
                "online.q_inter_t",
                dims.d_ncl,
                dims.predictor_bottleneck,
                dims.d_ncl,
            ),
            q_intra_i: MlpHead::init(
                &init,
                "online.q_intra_i",
                dims.d_ncl,
                dims.predictor_bottleneck,
                dims.d_ncl,
            ),
            q_intra_t: MlpHead::init(
                &init,
                "online.q_intra_t",
                dims.d_ncl,
                dims.predictor_bottleneck,
                dims.d_ncl,
            ),
            s_inter: Tensor::param(&[], vec![0.0]).expect("zero is finite"),
            s_intra: Tensor::param(&[], vec![0.0]).expect("zero is finite"),
            log_tau: Tensor::param(&[], vec![0.07f64.ln()]).expect("finite"),
        };
        let target = TargetParams::from_online(&online);
        Ok(ModelState { dims, share_pre_projectors, online, target, step: 0 })
    }

    /// Online image branch. `need_ncl` skips the wide non-contrastive head
    /// when only the contrastive embedding is needed.
    pub fn image_online(&self, images: &Tensor, need_ncl: bool) -> Result<OnlineForward> {
        let enc = self.online.f_theta.forward(images, &self.dims)?;
        let pre = self.online.g_pre_i.forward(&enc)?;
        let cl_in = if self.share_pre_projectors { &pre } else { &enc };
        let cl = self.online.g_cl_i.forward(cl_in)?;
        let ncl = if need_ncl { Some(self.online.g_ncl_i.forward(&pre)?) } else { None };
        Ok(OnlineForward { enc, pre, cl, ncl })
    }

    /// Online text branch; mirrors [`ModelState::image_online`].
    pub fn text_online(&self, tokens: &TokenMatrix, need_ncl: bool) -> Result<OnlineForward> {
        let enc = self.online.f_phi.forward(tokens)?;
        let pre = self.online.g_pre_t.forward(&enc)?;
        let cl_in = if self.share_pre_projectors { &pre } else { &enc };
        let cl = self.online.g_cl_t.forward(cl_in)?;
        let ncl = if need_ncl { Some(self.online.g_ncl_t.forward(&pre)?) } else { None };
        Ok(OnlineForward { enc, pre, cl, ncl })
    }

    /// Target image branch: momentum non-contrastive embedding behind a
    /// stop-gradient boundary.
    pub fn image_target(&self, images: &Tensor) -> Result<Tensor> {
        let enc = self.target.f_theta.forward(images, &self.dims)?;
        let ncl = self.target.g_ncl_i.forward(&self.target.g_pre_i.forward(&enc)?)?;
        Ok(ncl.stop_grad())
    }

    /// Target text branch; mirrors [`ModelState::image_target`].
    pub fn text_target(&self, tokens: &TokenMatrix) -> Result<Tensor> {
        let enc = self.target.f_phi.forward(tokens)?;
        let ncl = self.target.g_ncl_t.forward(&self.target.g_pre_t.forward(&enc)?)?;
        Ok(ncl.stop_grad())
    }

    /// target <- beta * target + (1 - beta) * online, tensor by tensor.
    /// Applied after each optimizer step.
    pub fn ema_update(&mut self, beta: f64) {
        let mut online_values: Vec<(String, Vec<f64>)> = Vec::new();
        self.online.visit_shared("online", &mut |name, t| {
            online_values.push((name, t.values().to_vec()));
        });
        let mut i = 0;
        self.target.visit_mut("target", &mut |name, t| {
            let (oname, ovals) = &online_values[i];
            debug_assert_eq!(
                name.trim_start_matches("target"),
                oname.trim_start_matches("online"),
                "online/target traversals diverged"
            );
            let mixed: Vec<f64> = t
                .values()
                .iter()
                .zip(ovals)
                .map(|(tv, ov)| beta * tv + (1.0 - beta) * ov)
                .collect();
            *t = Tensor::new(t.shape(), mixed).expect("EMA of finite values is finite");
            i += 1;
        });
    }

    /// Named read-only view of every online tensor (optimizer order).
    pub fn named_online(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.online.visit("online", &mut |name, t| out.push((name, t)));
        out
    }

    /// Named read-only view of every target tensor.
    pub fn named_target(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.target.visit("target", &mut |name, t| out.push((name, t)));
        out
    }

    /// Applies `f` to every online tensor slot (name, slot) in order.
    pub fn update_online(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.online.visit_mut("online", f);
    }

    /// Applies `f` to every target tensor slot; used by checkpoint restore.
    pub fn update_target(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.target.visit_mut("target", f);
    }

    /// Replaces one online tensor by name; used by gradient sweeps.
    pub fn replace_online(&mut self, name: &str, value: Tensor) -> bool {
        let mut replaced = false;
        self.online.visit_mut("online", &mut |n, t| {
            if n == name {
                *t = value.clone();
                replaced = true;
            }
        });
        replaced
    }

    pub fn clear_grads(&mut self) {
        self.online.visit_mut("online", &mut |_, t| t.clear_grad());
    }
}
