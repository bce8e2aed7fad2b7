//! Parameter container for one CRF model: unary embed MLP, per-head ternary
//! matrices on both axes, the topic FFN, output heads, and the damping logit.

use rand::Rng;

use crate::error::Result;
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::tape::{ParamId, ParamStore, Tape, TensorId};
use crate::tensor::Tensor;

/// Two-layer MLP parameter handles.
#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Same MLP registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MlpTensors {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// Linear head registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadTensors {
    pub w: TensorId,
    pub b: TensorId,
}

pub struct FactorBank {
    pub prefix: String,
    pub unary: MlpIds,
    /// Ternary maps, one `[d, d_h]` quadruple per head: query/key on the
    /// temporal axis and query/key on the channel axis.
    pub u_time: Vec<ParamId>,
    pub v_time: Vec<ParamId>,
    pub u_chan: Vec<ParamId>,
    pub v_chan: Vec<ParamId>,
    pub topic: MlpIds,
    /// Whole-window forecast head `[P*d, pred_len]`.
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// Per-patch readout head `[d, p]`.
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub damping_logit: ParamId,
}

/// Everything the mean-field loop reads, as tape tensors. Building this from
/// generated (rather than stored) matrices is how conditional factor
/// generation plugs in without touching the update code.
pub struct BankTensors {
    pub unary: MlpTensors,
    pub u_time: Vec<TensorId>,
    pub v_time: Vec<TensorId>,
    pub u_chan: Vec<TensorId>,
    pub v_chan: Vec<TensorId>,
    pub topic: MlpTensors,
    /// Damping weight in (0, 1), already through the sigmoid.
    pub alpha: TensorId,
}

fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn insert_mlp<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
    rng: &mut R,
) -> Result<MlpIds> {
    let w1 = store.insert(
        &format!("{}.w1", name),
        Tensor::randn(&[d_in, d_hidden], xavier_std(d_in, d_hidden), rng),
    )?;
    let b1 = store.insert(&format!("{}.b1", name), Tensor::zeros(&[d_hidden]))?;
    let w2 = store.insert(
        &format!("{}.w2", name),
        Tensor::randn(&[d_hidden, d_out], xavier_std(d_hidden, d_out), rng),
    )?;
    let b2 = store.insert(&format!("{}.b2", name), Tensor::zeros(&[d_out]))?;
    Ok(MlpIds { w1, b1, w2, b2 })
}

impl FactorBank {
    /// Creates and initializes all potentials. Draw order is fixed, so one
    /// seed yields one bank.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let d_h = cfg.d_head();
        let unary =
            insert_mlp(store, &format!("{}unary", prefix), cfg.patch_len, cfg.d_ff, d, rng)?;

        let ternary_std = 0.02;
        let mut u_time = Vec::with_capacity(cfg.n_heads);
        let mut v_time = Vec::with_capacity(cfg.n_heads);
        let mut u_chan = Vec::with_capacity(cfg.n_heads);
        let mut v_chan = Vec::with_capacity(cfg.n_heads);
        for c in 0..cfg.n_heads {
            u_time.push(store.insert(
                &format!("{}ternary.time.u.{}", prefix, c),
                Tensor::randn(&[d, d_h], ternary_std, rng),
            )?);
            v_time.push(store.insert(
                &format!("{}ternary.time.v.{}", prefix, c),
                Tensor::randn(&[d, d_h], ternary_std, rng),
            )?);
            u_chan.push(store.insert(
                &format!("{}ternary.chan.u.{}", prefix, c),
                Tensor::randn(&[d, d_h], ternary_std, rng),
            )?);
            v_chan.push(store.insert(
                &format!("{}ternary.chan.v.{}", prefix, c),
                Tensor::randn(&[d, d_h], ternary_std, rng),
            )?);
        }

        let topic = insert_mlp(store, &format!("{}topic", prefix), d, cfg.d_ff, d, rng)?;

        let flat = cfg.n_patches * d;
        let head_w = store.insert(
            &format!("{}head.w", prefix),
            Tensor::randn(&[flat, cfg.pred_len], xavier_std(flat, cfg.pred_len), rng),
        )?;
        let head_b = store.insert(&format!("{}head.b", prefix), Tensor::zeros(&[cfg.pred_len]))?;
        let patch_w = store.insert(
            &format!("{}patch_head.w", prefix),
            Tensor::randn(&[d, cfg.patch_len], xavier_std(d, cfg.patch_len), rng),
        )?;
        let patch_b =
            store.insert(&format!("{}patch_head.b", prefix), Tensor::zeros(&[cfg.patch_len]))?;

        let logit = (cfg.alpha_init / (1.0 - cfg.alpha_init)).ln();
        let damping_logit = store
            .insert(&format!("{}damping.logit", prefix), Tensor::from_f64(&[1], &[logit])?)?;

        Ok(Self {
            prefix: prefix.to_string(),
            unary,
            u_time,
            v_time,
            u_chan,
            v_chan,
            topic,
            head_w,
            head_b,
            patch_w,
            patch_b,
            damping_logit,
        })
    }

    /// Registers the CRF potentials on a tape for one forward pass.
    pub fn register<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> BankTensors {
        let mlp = |tape: &mut Tape<T>, ids: &MlpIds| MlpTensors {
            w1: tape.param(store, ids.w1),
            b1: tape.param(store, ids.b1),
            w2: tape.param(store, ids.w2),
            b2: tape.param(store, ids.b2),
        };
        let unary = mlp(tape, &self.unary);
        let u_time = self.u_time.iter().map(|&p| tape.param(store, p)).collect();
        let v_time = self.v_time.iter().map(|&p| tape.param(store, p)).collect();
        let u_chan = self.u_chan.iter().map(|&p| tape.param(store, p)).collect();
        let v_chan = self.v_chan.iter().map(|&p| tape.param(store, p)).collect();
        let topic = mlp(tape, &self.topic);
        let logit = tape.param(store, self.damping_logit);
        let alpha = tape.sigmoid(logit);
        BankTensors { unary, u_time, v_time, u_chan, v_chan, topic, alpha }
    }

    pub fn forecast_head<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
    ) -> HeadTensors {
        HeadTensors { w: tape.param(store, self.head_w), b: tape.param(store, self.head_b) }
    }

    pub fn patch_head<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
    ) -> HeadTensors {
        HeadTensors { w: tape.param(store, self.patch_w), b: tape.param(store, self.patch_b) }
    }

    /// All parameter handles owned by this bank.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.unary.w1,
            self.unary.b1,
            self.unary.w2,
            self.unary.b2,
            self.topic.w1,
            self.topic.b1,
            self.topic.w2,
            self.topic.b2,
            self.head_w,
            self.head_b,
            self.patch_w,
            self.patch_b,
            self.damping_logit,
        ];
        ids.extend(self.u_time.iter().copied());
        ids.extend(self.v_time.iter().copied());
        ids.extend(self.u_chan.iter().copied());
        ids.extend(self.v_chan.iter().copied());
        ids
    }
}
