//! Causal encoder plus latent-space autoregressive rollout.
//!
//! The encoder is the standard mean-field loop with a causal triangle on the
//! temporal scores, so every latent summarizes its past only. Rollout then
//! alternates: emit a patch from the newest latent, re-embed it, add a learned
//! transition term, and run a restricted mean-field update for the one new
//! slice against the cache. During training a teacher runs the same causal
//! encoder over history plus ground-truth future; because the operator is
//! causal, teacher and student agree on every history position, and the
//! distillation loss compares only the future latents.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StptError};
use crate::model::bank::{BankTensors, FactorBank, HeadTensors, MlpIds, MlpTensors};
use crate::model::mfvi::{
    embed_patches, init_state, joint_softmax, message_f_chan, message_g, mfvi_iterate, mlp2,
    normalize_z, z_update, BeliefState, ForwardCtx, MaskSet,
};
use crate::model::rope::rope_tables;
use crate::model::ModelConfig;
use crate::scalar::{Scalar, NEG_SENTINEL};
use crate::tensor::tape::{ParamId, ParamStore, Tape, TensorId};
use crate::tensor::Tensor;
use rand::Rng;

/// Distillation term comparing student and teacher future latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillLoss {
    SmoothL1,
    SmoothL1PlusCosine,
    /// Reserved: a divergence under the squared-softmax normalizer. The exact
    /// form is unsettled, so selecting it is a configuration error.
    KlUnderSquaredSoftmax,
}

impl Default for DistillLoss {
    fn default() -> Self {
        DistillLoss::SmoothL1
    }
}

/// Settings for the autoregressive path.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArConfig {
    /// Encoder mean-field iterations.
    #[serde(default = "default_k")]
    pub k_enc: usize,
    /// Per-step decoder iterations.
    #[serde(default = "default_k")]
    pub k_dec: usize,
    /// Future patches to roll out.
    pub p_f: usize,
    /// Weight on the latent distillation term.
    #[serde(default = "default_lambda_latent")]
    pub lambda_latent: f64,
    #[serde(default)]
    pub distill: DistillLoss,
}

fn default_k() -> usize {
    2
}
fn default_lambda_latent() -> f64 {
    0.1
}

impl ArConfig {
    pub fn new(p_f: usize) -> Self {
        Self {
            k_enc: 2,
            k_dec: 2,
            p_f,
            lambda_latent: default_lambda_latent(),
            distill: DistillLoss::SmoothL1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_f == 0 {
            return Err(StptError::InvalidConfig("p_f must be at least 1".into()));
        }
        if self.lambda_latent < 0.0 {
            return Err(StptError::InvalidConfig("lambda_latent must be non-negative".into()));
        }
        Ok(())
    }
}

/// Parameters owned by the autoregressive path: the transition prior, the
/// decoder's own topic FFN, and a separate damping scalar for cache appends.
/// Ternary factors, the unary embed, and the patch head come from the shared
/// [`FactorBank`].
pub struct ArParams {
    pub transition: MlpIds,
    pub dec_topic: MlpIds,
    pub damping_logit: ParamId,
}

impl ArParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let transition = crate::model::bank::insert_mlp(
            store,
            &format!("{}ar.transition", prefix),
            cfg.d,
            cfg.d,
            cfg.d,
            rng,
        )?;
        let dec_topic = crate::model::bank::insert_mlp(
            store,
            &format!("{}ar.dec_topic", prefix),
            cfg.d,
            cfg.d_ff,
            cfg.d,
            rng,
        )?;
        let logit = (cfg.alpha_init / (1.0 - cfg.alpha_init)).ln();
        let damping_logit = store.insert(
            &format!("{}ar.damping.logit", prefix),
            Tensor::from_f64(&[1], &[logit])?,
        )?;
        Ok(Self { transition, dec_topic, damping_logit })
    }

    pub fn register<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> ArTensors {
        let mlp = |tape: &mut Tape<T>, ids: &MlpIds| MlpTensors {
            w1: tape.param(store, ids.w1),
            b1: tape.param(store, ids.b1),
            w2: tape.param(store, ids.w2),
            b2: tape.param(store, ids.b2),
        };
        let transition = mlp(tape, &self.transition);
        let dec_topic = mlp(tape, &self.dec_topic);
        let logit = tape.param(store, self.damping_logit);
        let alpha = tape.sigmoid(logit);
        ArTensors { transition, dec_topic, alpha }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.transition.w1,
            self.transition.b1,
            self.transition.w2,
            self.transition.b2,
            self.dec_topic.w1,
            self.dec_topic.b1,
            self.dec_topic.w2,
            self.dec_topic.b2,
            self.damping_logit,
        ]
    }
}

/// [`ArParams`] registered on a tape.
pub struct ArTensors {
    pub transition: MlpTensors,
    pub dec_topic: MlpTensors,
    /// Cache-append damping weight in (0, 1).
    pub alpha: TensorId,
}

/// Additive `[P, P]` triangle: target `t` may attend sources `s < t` only
/// (`s = t` is excluded separately as the self entry).
pub fn causal_mask<T: Scalar>(p_total: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[p_total, p_total]);
    for t in 0..p_total {
        for s in t + 1..p_total {
            m.set(&[t, s], T::cst(NEG_SENTINEL));
        }
    }
    m
}

/// Forward context with the causal triangle installed on the temporal axis.
pub fn causal_ctx<T: Scalar>(tape: &mut Tape<T>, cfg: &ModelConfig) -> ForwardCtx<T> {
    let masks = MaskSet { time: Some(causal_mask(cfg.n_patches)), chan: None };
    ForwardCtx::build(tape, cfg, &masks)
}

/// Runs the causal encoder over `x_patches` `[B, N, P, p]` and returns the
/// belief state; `cfg.n_patches` must match the patch axis. With `N = 1` the
/// first position has no admissible parent and the update errors.
pub fn causal_encoder<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    bt: &BankTensors,
    x_patches: TensorId,
    k_enc: usize,
) -> Result<BeliefState> {
    let ctx = causal_ctx(tape, cfg);
    let mut state = init_state(tape, cfg, bt, x_patches)?;
    mfvi_iterate(tape, cfg, bt, &ctx, &mut state, None, k_enc)?;
    Ok(state)
}

/// Emits the next patch from the newest cached latent: `[B, N, d] -> [B, N, p]`.
pub fn predict_patch<T: Scalar>(
    tape: &mut Tape<T>,
    head: &HeadTensors,
    z_prev: TensorId,
) -> Result<TensorId> {
    let zs = tape.shape(z_prev).to_vec();
    let (b, n, d) = (zs[0], zs[1], zs[2]);
    let flat = tape.reshape(z_prev, &[b * n, d])?;
    let out = tape.matmul(flat, head.w)?;
    let out = tape.add(out, head.b)?;
    let p = tape.shape(out)[1];
    tape.reshape(out, &[b, n, p])
}

/// Evidence for the new slice: re-embedded prediction plus the transition
/// prior on the previous latent. `x_hat` is `[B, N, p]`, `z_prev` `[B, N, d]`;
/// the result is `[B, N, 1, d]`.
pub fn dual_unary<T: Scalar>(
    tape: &mut Tape<T>,
    unary: &MlpTensors,
    transition: &MlpTensors,
    x_hat: TensorId,
    z_prev: TensorId,
) -> Result<TensorId> {
    let xs = tape.shape(x_hat).to_vec();
    let (b, n, p) = (xs[0], xs[1], xs[2]);
    let d = tape.shape(z_prev)[2];
    let x_flat = tape.reshape(x_hat, &[b * n, p])?;
    let u_patch = mlp2(tape, unary, x_flat)?;
    let z_flat = tape.reshape(z_prev, &[b * n, d])?;
    let u_trans = mlp2(tape, transition, z_flat)?;
    let u = tape.add(u_patch, u_trans)?;
    let d_out = tape.shape(u)[1];
    tape.reshape(u, &[b, n, 1, d_out])
}

/// Diagnostics for one rollout step.
#[derive(Debug, Clone, Serialize)]
pub struct StepTrace {
    /// 1-based step index.
    pub k: usize,
    pub pred_mean: f64,
    pub pred_std: f64,
    /// Share of pairwise-belief mass on temporal candidates in the last
    /// decoder round, averaged over batch, channels, and heads.
    pub temporal_mass: f64,
}

/// One restricted mean-field update for a single new slice against a
/// read-only cache. `unary_new` is `[B, N, 1, d]`, `cache` `[B, N, L, d]`.
/// Returns the refined slice and the temporal attention mass of the final
/// round.
pub fn single_step_mfvi<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    bt: &BankTensors,
    ar: &ArTensors,
    unary_new: TensorId,
    cache: TensorId,
    k_dec: usize,
) -> Result<(TensorId, f64)> {
    let cs = tape.shape(cache).to_vec();
    let (b, n, l, d) = (cs[0], cs[1], cs[2], cs[3]);
    if l == 0 {
        return Err(StptError::InvalidConfig("single-step update needs a non-empty cache".into()));
    }
    let d_h = cfg.d_head();

    // Self-channel sentinel for the simultaneous new latents.
    let mut chan_mask = Tensor::<T>::zeros(&[n, 1, n]);
    for i in 0..n {
        chan_mask.set(&[i, 0, i], T::cst(NEG_SENTINEL));
    }
    let chan_mask = tape.constant(chan_mask);

    let rope_keys = cfg.rope_time.then(|| rope_tables::<T>(0, l, d_h, cfg.rope_base));
    let rope_query = cfg.rope_time.then(|| rope_tables::<T>(l, 1, d_h, cfg.rope_base));
    let rope_chan = cfg.rope_chan.then(|| rope_tables::<T>(0, n, d_h, cfg.rope_base));

    // Cache keys per head are fixed across decoder rounds.
    let cache2 = tape.reshape(cache, &[b * n * l, d])?;
    let mut k_time = Vec::with_capacity(cfg.n_heads);
    for c in 0..cfg.n_heads {
        let k = tape.matmul(cache2, bt.v_time[c])?;
        k_time.push(tape.reshape(k, &[b * n, l, d_h])?);
    }

    let mut z = normalize_z(tape, cfg.z_normalizer, unary_new)?;
    let mut temporal_mass = 1.0;
    for _ in 0..k_dec {
        let mut m_time_total: Option<TensorId> = None;
        let mut m_chan_total: Option<TensorId> = None;
        let mut mass_acc = 0.0;
        for c in 0..cfg.n_heads {
            let z2 = tape.reshape(z, &[b * n, d])?;
            let q = tape.matmul(z2, bt.u_time[c])?;
            let q = tape.reshape(q, &[b * n, 1, d_h])?;
            let (q_r, k_r) = match (&rope_query, &rope_keys) {
                (Some(tq), Some(tk)) => {
                    (tape.rope(q, &tq.cos, &tq.sin)?, tape.rope(k_time[c], &tk.cos, &tk.sin)?)
                }
                _ => (q, k_time[c]),
            };
            let k_t = tape.permute(k_r, &[0, 2, 1])?;
            let f_time = tape.bmm(q_r, k_t)?;
            let f_time = tape.scale(f_time, 1.0 / (d_h as f64).sqrt());
            let f_time = tape.reshape(f_time, &[b, n, 1, l])?;

            let (f_chan, k_chan) =
                message_f_chan(tape, z, bt.u_chan[c], bt.v_chan[c], rope_chan.as_ref())?;
            let f_chan = tape.add(f_chan, chan_mask)?;

            let qh = joint_softmax(tape, f_time, f_chan, cfg.lambda_h)?;
            {
                let v = tape.value(qh);
                let rows = v.numel() / (l + n);
                let mut s = 0.0;
                for row in v.data().chunks(l + n) {
                    s += row[..l].iter().map(|x| x.to64()).sum::<f64>();
                }
                mass_acc += s / rows as f64;
            }

            let (m_t, m_c) = message_g(tape, qh, k_time[c], k_chan, bt.u_time[c], bt.u_chan[c])?;
            m_time_total = Some(match m_time_total {
                Some(acc) => tape.add(acc, m_t)?,
                None => m_t,
            });
            m_chan_total = Some(match m_chan_total {
                Some(acc) => tape.add(acc, m_c)?,
                None => m_c,
            });
        }
        temporal_mass = mass_acc / cfg.n_heads as f64;

        let z2 = tape.reshape(z, &[b * n, d])?;
        let topic = mlp2(tape, &ar.dec_topic, z2)?;
        let m_time = tape.reshape(m_time_total.unwrap(), &[b, n, 1, d])?;
        let m_chan = tape.reshape(m_chan_total.unwrap(), &[b, n, 1, d])?;
        let topic = tape.reshape(topic, &[b, n, 1, d])?;
        let s = tape.add_many(&[unary_new, m_time, m_chan, topic])?;
        z = z_update(tape, cfg.z_normalizer, z, s, bt.alpha)?;
    }
    Ok((z, temporal_mass))
}

/// Result of a rollout: predicted patches `[B, N, P_f, p]`, the grown cache
/// `[B, N, P + P_f, d]`, the future slices `[B, N, P_f, d]`, and per-step
/// diagnostics.
pub struct RolloutOut {
    pub y_hat: TensorId,
    pub cache: TensorId,
    pub future_z: TensorId,
    pub trace: Vec<StepTrace>,
}

/// Encodes history and rolls the latent chain `p_f` steps forward.
pub fn rollout<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    ar_cfg: &ArConfig,
    bt: &BankTensors,
    ar: &ArTensors,
    patch_head: &HeadTensors,
    x_hist: TensorId,
) -> Result<RolloutOut> {
    ar_cfg.validate()?;
    let state = causal_encoder(tape, cfg, bt, x_hist, ar_cfg.k_enc)?;
    rollout_from_cache(tape, cfg, ar_cfg, bt, ar, patch_head, state.z)
}

/// Rollout continuing from an existing cache (used by training to share the
/// student encoder with diagnostics).
pub fn rollout_from_cache<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    ar_cfg: &ArConfig,
    bt: &BankTensors,
    ar: &ArTensors,
    patch_head: &HeadTensors,
    cache0: TensorId,
) -> Result<RolloutOut> {
    let cs = tape.shape(cache0).to_vec();
    let (b, n, _, d) = (cs[0], cs[1], cs[2], cs[3]);
    let mut cache = cache0;
    let mut preds = Vec::with_capacity(ar_cfg.p_f);
    let mut future = Vec::with_capacity(ar_cfg.p_f);
    let mut trace = Vec::with_capacity(ar_cfg.p_f);
    let one = tape.scalar_const(1.0);
    for k in 1..=ar_cfg.p_f {
        let l = tape.shape(cache)[2];
        let z_prev4 = tape.slice(cache, 2, l - 1, 1)?;
        let z_prev = tape.reshape(z_prev4, &[b, n, d])?;
        let x_hat = predict_patch(tape, patch_head, z_prev)?;
        let u = dual_unary(tape, &bt.unary, &ar.transition, x_hat, z_prev)?;
        let (z_new, temporal_mass) =
            single_step_mfvi(tape, cfg, bt, ar, u, cache, ar_cfg.k_dec)?;

        let keep = tape.mul(z_prev4, ar.alpha)?;
        let fresh_w = tape.sub(one, ar.alpha)?;
        let fresh = tape.mul(z_new, fresh_w)?;
        let z_app = tape.add(keep, fresh)?;
        cache = tape.concat(&[cache, z_app], 2)?;
        future.push(z_app);

        let pv = tape.value(x_hat);
        let mean = pv.data().iter().map(|x| x.to64()).sum::<f64>() / pv.numel() as f64;
        let var = pv.data().iter().map(|x| (x.to64() - mean).powi(2)).sum::<f64>()
            / pv.numel() as f64;
        trace.push(StepTrace { k, pred_mean: mean, pred_std: var.sqrt(), temporal_mass });

        let p = tape.shape(x_hat)[2];
        preds.push(tape.reshape(x_hat, &[b, n, 1, p])?);
    }
    let y_hat = tape.concat(&preds, 2)?;
    let future_z = tape.concat(&future, 2)?;
    Ok(RolloutOut { y_hat, cache, future_z, trace })
}

/// Loss pieces of one training step.
pub struct ArLoss {
    pub total: TensorId,
    pub pred_mse: f64,
    pub distill: f64,
}

fn cosine_gap<T: Scalar>(tape: &mut Tape<T>, a: TensorId, b: TensorId) -> Result<TensorId> {
    let dot_e = tape.mul(a, b)?;
    let dot = tape.sum_last(dot_e);
    let aa = tape.mul(a, a)?;
    let na = tape.sum_last(aa);
    let na = tape.add_scalar(na, 1e-12);
    let na = tape.sqrt(na);
    let bb = tape.mul(b, b)?;
    let nb = tape.sum_last(bb);
    let nb = tape.add_scalar(nb, 1e-12);
    let nb = tape.sqrt(nb);
    let denom = tape.mul(na, nb)?;
    let cos = tape.div(dot, denom)?;
    let neg = tape.scale(cos, -1.0);
    let gap = tape.add_scalar(neg, 1.0);
    Ok(tape.mean_all(gap))
}

/// Teacher targets: the future slices of a causal encode over history plus
/// ground-truth future. Everything past the shared unary embedding runs with
/// gradients off, so the returned latents act as fixed targets; by causality
/// the history positions coincide with the student's and are dropped here.
pub fn teacher_targets<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    ar_cfg: &ArConfig,
    bt: &BankTensors,
    x_hist: TensorId,
    y: TensorId,
) -> Result<TensorId> {
    let p_hist = tape.shape(x_hist)[2];
    let full = tape.concat(&[x_hist, y], 2)?;
    let mut cfg_full = cfg.clone();
    cfg_full.n_patches = p_hist + ar_cfg.p_f;
    let unary_full = embed_patches(tape, &bt.unary, full)?;
    let was = tape.grad_enabled();
    tape.set_grad_enabled(false);
    let ctx_full = causal_ctx(tape, &cfg_full);
    let z0 = normalize_z(tape, cfg.z_normalizer, unary_full)?;
    let mut teacher = BeliefState { z: z0, qh: Vec::new(), unary: unary_full, qm: None };
    let r = mfvi_iterate(tape, &cfg_full, &bt, &ctx_full, &mut teacher, None, ar_cfg.k_enc);
    tape.set_grad_enabled(was);
    r?;
    tape.slice(teacher.z, 2, p_hist, ar_cfg.p_f)
}

/// Student objective against given future-latent targets: rollout from the
/// history, prediction MSE, plus the weighted distillation term.
pub fn student_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    ar_cfg: &ArConfig,
    bt: &BankTensors,
    ar: &ArTensors,
    patch_head: &HeadTensors,
    x_hist: TensorId,
    y: TensorId,
    targets: TensorId,
) -> Result<ArLoss> {
    let out = rollout(tape, cfg, ar_cfg, bt, ar, patch_head, x_hist)?;
    let l_pred = tape.mse(out.y_hat, y)?;

    let l_distill = match ar_cfg.distill {
        DistillLoss::SmoothL1 => tape.smooth_l1(out.future_z, targets)?,
        DistillLoss::SmoothL1PlusCosine => {
            let s = tape.smooth_l1(out.future_z, targets)?;
            let c = cosine_gap(tape, out.future_z, targets)?;
            tape.add(s, c)?
        }
        DistillLoss::KlUnderSquaredSoftmax => {
            return Err(StptError::InvalidConfig(
                "kl_under_squared_softmax distillation is reserved and has no defined form"
                    .into(),
            ))
        }
    };
    let weighted = tape.scale(l_distill, ar_cfg.lambda_latent);
    let total = tape.add(l_pred, weighted)?;
    Ok(ArLoss {
        total,
        pred_mse: tape.value(l_pred).data()[0].to64(),
        distill: tape.value(l_distill).data()[0].to64(),
    })
}

/// One teacher-student step: returns the combined loss ready for backward.
///
/// `x_hist` is `[B, N, P, p]`, `y` `[B, N, P_f, p]`. The teacher encodes the
/// concatenated sequence with gradients stopped after the shared unary
/// embedding, so its latents act as fixed targets. Finite-difference probes of
/// this loss must hold the targets at their unperturbed values (see
/// [`teacher_targets`] plus [`student_loss`]); the raw composite differs from
/// the backward pass exactly by the blocked teacher paths.
pub fn training_step<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    ar_cfg: &ArConfig,
    bank: &FactorBank,
    store: &ParamStore<T>,
    ar_params: &ArParams,
    x_hist: TensorId,
    y: TensorId,
) -> Result<ArLoss> {
    ar_cfg.validate()?;
    let xs = tape.shape(x_hist).to_vec();
    let ys = tape.shape(y).to_vec();
    if xs[0] != ys[0] || xs[1] != ys[1] || xs[3] != ys[3] || ys[2] != ar_cfg.p_f {
        return Err(StptError::ShapeMismatch {
            op: "ar_training_step",
            details: format!("history {:?} vs future {:?} (p_f = {})", xs, ys, ar_cfg.p_f),
        });
    }

    let bt = bank.register(tape, store);
    let ar = ar_params.register(tape, store);
    let patch_head = bank.patch_head(tape, store);

    let targets = teacher_targets(tape, cfg, ar_cfg, &bt, x_hist, y)?;
    student_loss(tape, cfg, ar_cfg, &bt, &ar, &patch_head, x_hist, y, targets)
}
