//! Instance normalization, Adam training loops, metrics, and the noise sweep.
//!
//! Three trainers share the loop skeleton: the whole-window forecaster (with
//! optional graph priors), the causal latent-autoregressive variant, and the
//! conditional factor generator. All of them early-stop on validation score,
//! restore the best checkpoint, and are bit-deterministic given (config,
//! seed). Metrics are always computed on denormalized outputs.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StptError};
use crate::factor_gen::{
    denoise_v, diffusion_loss, encode_attrs, ddim_sample, AttrMode, AttrParams,
    DiffusionSchedule, FgParams, GenConfig,
};
use crate::latent_ar::{rollout, training_step, ArConfig, ArParams, StepTrace};
use crate::model::bank::FactorBank;
use crate::model::mfvi::{forecast, init_state, mfvi_iterate, ForwardCtx, MaskSet};
use crate::model::ModelConfig;
use crate::priors::{
    indep_mask, IndepSpec, LagRelation, LagSpec, PeriodicitySpec, PriorParams, PriorRuntime,
    PriorSpec,
};
use crate::synth::{add_noise, SeriesDataset, PRED_LEN, SEQ_LEN};
use crate::tensor::adam::AdamState;
use crate::tensor::tape::{ParamStore, Tape, TensorId};
use crate::tensor::Tensor;

/// Channels flatter than this are treated as constant during normalization.
pub const REVIN_STD_FLOOR: f64 = 1e-8;

/// Reference seed triple for multi-seed tables.
pub const SEEDS3: [u64; 3] = [42, 142, 242];

// ── RevIN ────────────────────────────────────────────────────────────────

/// Per-instance, per-channel moments of a normalized batch; both `[B, N]`.
#[derive(Debug, Clone)]
pub struct RevinState {
    pub mean: Tensor<f64>,
    pub std: Tensor<f64>,
}

/// Normalizes `[B, N, L]` with each window's own moments.
pub fn revin_normalize(x: &Tensor<f64>) -> (Tensor<f64>, RevinState) {
    let s = x.shape();
    let (b, n, l) = (s[0], s[1], s[2]);
    let mut mean = Tensor::zeros(&[b, n]);
    let mut std = Tensor::zeros(&[b, n]);
    let mut out = x.clone();
    for bi in 0..b {
        for c in 0..n {
            let row = &x.data()[(bi * n + c) * l..(bi * n + c + 1) * l];
            let m = row.iter().sum::<f64>() / l as f64;
            let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / l as f64;
            let sd = var.sqrt().max(REVIN_STD_FLOOR);
            mean.set(&[bi, c], m);
            std.set(&[bi, c], sd);
            for v in &mut out.data_mut()[(bi * n + c) * l..(bi * n + c + 1) * l] {
                *v = (*v - m) / sd;
            }
        }
    }
    (out, RevinState { mean, std })
}

/// Normalizes another window (e.g. the target) with previously saved moments.
pub fn revin_apply(y: &Tensor<f64>, st: &RevinState) -> Tensor<f64> {
    let s = y.shape();
    let (b, n, l) = (s[0], s[1], s[2]);
    let mut out = y.clone();
    for bi in 0..b {
        for c in 0..n {
            let m = st.mean.at(&[bi, c]);
            let sd = st.std.at(&[bi, c]);
            for v in &mut out.data_mut()[(bi * n + c) * l..(bi * n + c + 1) * l] {
                *v = (*v - m) / sd;
            }
        }
    }
    out
}

/// Exact inverse of [`revin_apply`].
pub fn revin_denormalize(y: &Tensor<f64>, st: &RevinState) -> Tensor<f64> {
    let s = y.shape();
    let (b, n, l) = (s[0], s[1], s[2]);
    let mut out = y.clone();
    for bi in 0..b {
        for c in 0..n {
            let m = st.mean.at(&[bi, c]);
            let sd = st.std.at(&[bi, c]);
            for v in &mut out.data_mut()[(bi * n + c) * l..(bi * n + c + 1) * l] {
                *v = *v * sd + m;
            }
        }
    }
    out
}

// ── Metrics ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
}

/// Mean squared and absolute error over every (sample, channel, step) entry.
pub fn eval_metrics(y_hat: &Tensor<f64>, y: &Tensor<f64>) -> Result<MetricReport> {
    if y_hat.shape() != y.shape() {
        return Err(StptError::ShapeMismatch {
            op: "eval_metrics",
            details: format!("{:?} vs {:?}", y_hat.shape(), y.shape()),
        });
    }
    let count = y.numel() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (&a, &b) in y_hat.data().iter().zip(y.data()) {
        se += (a - b) * (a - b);
        ae += (a - b).abs();
    }
    Ok(MetricReport { mse: se / count, mae: ae / count })
}

/// Per-seed results aggregated to mean and population std.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub per_seed: Vec<(u64, MetricReport)>,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

pub fn summarize_seeds(per_seed: Vec<(u64, MetricReport)>) -> MultiSeedReport {
    let n = per_seed.len().max(1) as f64;
    let mse_mean = per_seed.iter().map(|(_, r)| r.mse).sum::<f64>() / n;
    let mae_mean = per_seed.iter().map(|(_, r)| r.mae).sum::<f64>() / n;
    let mse_std =
        (per_seed.iter().map(|(_, r)| (r.mse - mse_mean).powi(2)).sum::<f64>() / n).sqrt();
    let mae_std =
        (per_seed.iter().map(|(_, r)| (r.mae - mae_mean).powi(2)).sum::<f64>() / n).sqrt();
    MultiSeedReport { per_seed, mse_mean, mse_std, mae_mean, mae_std }
}

// ── Configuration ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub max_epochs: usize,
    /// Epochs without a new best validation score before stopping.
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_seq")]
    pub seq_len: usize,
    /// Kept for loader parity with decoder-overlap baselines; unused here.
    #[serde(default = "d_label")]
    pub label_len: usize,
    #[serde(default = "d_pred")]
    pub pred_len: usize,
}

fn d_lr() -> f64 {
    1e-3
}
fn d_batch() -> usize {
    32
}
fn d_epochs() -> usize {
    10
}
fn d_patience() -> usize {
    3
}
fn d_seq() -> usize {
    SEQ_LEN
}
fn d_label() -> usize {
    48
}
fn d_pred() -> usize {
    PRED_LEN
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::fast()
    }
}

impl TrainConfig {
    /// Few-shot synthetic regime: short schedule, early stop at patience 3.
    pub fn fast() -> Self {
        Self {
            lr: d_lr(),
            batch_size: d_batch(),
            max_epochs: d_epochs(),
            patience: d_patience(),
            seq_len: d_seq(),
            label_len: d_label(),
            pred_len: d_pred(),
        }
    }

    /// Longer schedule used by the wider generation-scale models.
    pub fn long() -> Self {
        Self { lr: 5e-4, max_epochs: 50, patience: 5, ..Self::fast() }
    }

    pub fn validate(&self, mcfg: &ModelConfig, ds: &SeriesDataset) -> Result<()> {
        mcfg.validate()?;
        let err = |m: String| Err(StptError::InvalidConfig(m));
        if self.batch_size == 0 || self.max_epochs == 0 {
            return err("batch size and epoch budget must be positive".into());
        }
        if self.batch_size > ds.train.len() {
            return err(format!(
                "batch size {} exceeds train split of {}",
                self.batch_size,
                ds.train.len()
            ));
        }
        if mcfg.seq_len() != self.seq_len {
            return err(format!(
                "model covers {} input steps but the loader provides {}",
                mcfg.seq_len(),
                self.seq_len
            ));
        }
        if self.seq_len + self.pred_len != ds.series_len() {
            return err(format!(
                "seq {} + pred {} does not tile series of length {}",
                self.seq_len,
                self.pred_len,
                ds.series_len()
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return err(format!("learning rate must be positive and finite, got {}", self.lr));
        }
        Ok(())
    }
}

/// Narrow model used by the few-shot studies.
pub fn forecaster_model(n_channels: usize) -> ModelConfig {
    ModelConfig {
        n_channels,
        patch_len: 8,
        n_patches: SEQ_LEN / 8,
        d: 64,
        d_ff: 128,
        n_heads: 8,
        k_iters: 3,
        pred_len: PRED_LEN,
        ..ModelConfig::tiny(n_channels, SEQ_LEN / 8)
    }
}

/// Wider model paired with [`TrainConfig::long`].
pub fn wide_model(n_channels: usize) -> ModelConfig {
    ModelConfig { d: 256, d_ff: 512, ..forecaster_model(n_channels) }
}

// ── Variants and prior wiring ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "+period")]
    Period,
    #[serde(rename = "+trend")]
    Trend,
    #[serde(rename = "+lag")]
    Lag,
    #[serde(rename = "+indep")]
    Indep,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Period => "+period",
            Variant::Trend => "+trend",
            Variant::Lag => "+lag",
            Variant::Indep => "+indep",
        }
    }
}

/// Builds the prior wiring a variant needs from dataset ground truth.
pub fn prior_spec_for(variant: Variant, ds: &SeriesDataset) -> PriorSpec {
    match variant {
        Variant::Vanilla => PriorSpec::default(),
        Variant::Period => PriorSpec {
            periodicity: Some(PeriodicitySpec {
                periods: ds
                    .channels
                    .iter()
                    .map(|c| c.periods.iter().map(|&p| p as f64).collect())
                    .collect(),
                gamma: 5.0,
            }),
            ..Default::default()
        },
        Variant::Trend => PriorSpec { trend: Some(Default::default()), ..Default::default() },
        Variant::Lag => PriorSpec {
            lag: Some(LagSpec {
                relations: ds
                    .pairs
                    .iter()
                    .map(|p| LagRelation { src: p.src, dst: p.dst, tau: p.tau as f64 })
                    .collect(),
                eta: 200.0,
            }),
            ..Default::default()
        },
        Variant::Indep => PriorSpec {
            indep: Some(IndepSpec { groups: ds.channel_groups() }),
            ..Default::default()
        },
    }
}

// ── Forecaster training ──────────────────────────────────────────────────

pub struct TrainedForecaster {
    pub model: ModelConfig,
    pub prior: PriorSpec,
    pub bank: FactorBank,
    pub prior_params: PriorParams,
    pub store: ParamStore<f64>,
    /// Mean training loss per epoch, normalized scale.
    pub train_losses: Vec<f64>,
    /// Denormalized validation MSE per epoch.
    pub val_history: Vec<f64>,
    pub best_val_mse: f64,
    pub epochs_run: usize,
}

fn gather_windows(
    ds: &SeriesDataset,
    idxs: &[usize],
    seq: usize,
) -> (Tensor<f64>, Tensor<f64>) {
    let n = ds.n_channels();
    let l = ds.series_len();
    let pred = l - seq;
    let mut x = Tensor::zeros(&[idxs.len(), n, seq]);
    let mut y = Tensor::zeros(&[idxs.len(), n, pred]);
    for (bi, &s) in idxs.iter().enumerate() {
        for c in 0..n {
            for t in 0..seq {
                x.set(&[bi, c, t], ds.data.at(&[s, c, t]));
            }
            for t in 0..pred {
                y.set(&[bi, c, t], ds.data.at(&[s, c, seq + t]));
            }
        }
    }
    (x, y)
}

fn spec_has_runtime(spec: &PriorSpec) -> bool {
    spec.periodicity.is_some() || spec.trend.is_some() || spec.lag.is_some()
}

fn chan_mask_for(spec: &PriorSpec, n_channels: usize) -> Result<MaskSet<f64>> {
    Ok(MaskSet {
        time: None,
        chan: match &spec.indep {
            Some(g) => Some(indep_mask(&g.groups, n_channels)?),
            None => None,
        },
    })
}

/// Normalized-scale forecast of one prepared batch.
fn forward_norm(
    tape: &mut Tape<f64>,
    mcfg: &ModelConfig,
    bank: &FactorBank,
    store: &ParamStore<f64>,
    spec: &PriorSpec,
    pp: &PriorParams,
    x_patches: Tensor<f64>,
) -> Result<TensorId> {
    let x = tape.constant(x_patches);
    let bt = bank.register(tape, store);
    let head = bank.forecast_head(tape, store);
    let masks = chan_mask_for(spec, mcfg.n_channels)?;
    let ctx = ForwardCtx::build(tape, mcfg, &masks);
    let rt = if spec_has_runtime(spec) {
        Some(PriorRuntime::register(
            tape,
            store,
            spec,
            pp,
            mcfg.n_channels,
            mcfg.n_patches,
            mcfg.patch_len,
        )?)
    } else {
        None
    };
    let mut state = init_state(tape, mcfg, &bt, x)?;
    mfvi_iterate(tape, mcfg, &bt, &ctx, &mut state, rt.as_ref(), mcfg.k_iters)?;
    forecast(tape, &head, state.z)
}

fn norm_batch(
    ds: &SeriesDataset,
    idxs: &[usize],
    mcfg: &ModelConfig,
) -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>, RevinState)> {
    let (x, y) = gather_windows(ds, idxs, mcfg.seq_len());
    let (x_norm, st) = revin_normalize(&x);
    let y_norm = revin_apply(&y, &st);
    let b = idxs.len();
    let xp = x_norm.reshaped(&[b, mcfg.n_channels, mcfg.n_patches, mcfg.patch_len])?;
    Ok((xp, y_norm, y, st))
}

pub fn train_forecaster(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    spec: &PriorSpec,
    ds: &SeriesDataset,
    seed: u64,
) -> Result<TrainedForecaster> {
    tcfg.validate(mcfg, ds)?;
    spec.validate(mcfg.n_channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bank = FactorBank::new(&mut store, mcfg, "", &mut rng)?;
    let pp = PriorParams::new(&mut store, spec, mcfg.d, mcfg.n_channels, "", &mut rng)?;

    let train_idx: Vec<usize> = ds.train.clone().collect();
    let steps_per_epoch = train_idx.len().div_ceil(tcfg.batch_size);
    let mut adam = AdamState::new(tcfg.lr, Some(tcfg.max_epochs * steps_per_epoch));

    let mut out = TrainedForecaster {
        model: mcfg.clone(),
        prior: spec.clone(),
        bank,
        prior_params: pp,
        store: ParamStore::new(),
        train_losses: Vec::new(),
        val_history: Vec::new(),
        best_val_mse: f64::INFINITY,
        epochs_run: 0,
    };

    let mut best_snap = store.snapshot();
    let mut best = f64::INFINITY;
    let mut bad = 0usize;
    let mut order = train_idx;
    let mut step = 0usize;

    for epoch in 0..tcfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tcfg.batch_size) {
            let (xp, y_norm, _, _) = norm_batch(ds, chunk, mcfg)?;
            let mut tape = Tape::new();
            store.zero_grads();
            let y_hat =
                forward_norm(&mut tape, mcfg, &out.bank, &store, spec, &out.prior_params, xp)?;
            let y_t = tape.constant(y_norm);
            let loss = tape.mse(y_hat, y_t)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(StptError::Diverged {
                    step,
                    what: format!("epoch {} train loss = {}", epoch, lv),
                });
            }
            epoch_loss += lv * chunk.len() as f64;
            tape.backward(loss, &mut store)?;
            adam.step_all(&mut store);
            step += 1;
        }
        out.train_losses.push(epoch_loss / order.len() as f64);

        let val = eval_split(mcfg, tcfg, &out.bank, &store, spec, &out.prior_params, ds, ds.val.clone())?;
        out.val_history.push(val.mse);
        out.epochs_run = epoch + 1;
        if val.mse < best {
            best = val.mse;
            best_snap = store.snapshot();
            bad = 0;
        } else {
            bad += 1;
            if bad >= tcfg.patience {
                break;
            }
        }
    }

    store.restore(&best_snap);
    out.best_val_mse = best;
    out.store = store;
    Ok(out)
}

fn eval_split(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    bank: &FactorBank,
    store: &ParamStore<f64>,
    spec: &PriorSpec,
    pp: &PriorParams,
    ds: &SeriesDataset,
    range: Range<usize>,
) -> Result<MetricReport> {
    let idxs: Vec<usize> = range.collect();
    if idxs.is_empty() {
        return Ok(MetricReport { mse: 0.0, mae: 0.0 });
    }
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut count = 0.0;
    for chunk in idxs.chunks(tcfg.batch_size) {
        let (xp, _, y_raw, st) = norm_batch(ds, chunk, mcfg)?;
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let y_hat = forward_norm(&mut tape, mcfg, bank, store, spec, pp, xp)?;
        let y_den = revin_denormalize(tape.value(y_hat), &st);
        for (&a, &b) in y_den.data().iter().zip(y_raw.data()) {
            se += (a - b) * (a - b);
            ae += (a - b).abs();
        }
        count += y_raw.numel() as f64;
    }
    Ok(MetricReport { mse: se / count, mae: ae / count })
}

/// Denormalized metrics of a trained forecaster over one split range.
pub fn evaluate_forecaster(
    f: &TrainedForecaster,
    tcfg: &TrainConfig,
    ds: &SeriesDataset,
    range: Range<usize>,
) -> Result<MetricReport> {
    eval_split(&f.model, tcfg, &f.bank, &f.store, &f.prior, &f.prior_params, ds, range)
}

/// Trains one variant and reports test metrics.
pub fn train_and_eval(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    variant: Variant,
    ds: &SeriesDataset,
    seed: u64,
) -> Result<(TrainedForecaster, MetricReport)> {
    let spec = prior_spec_for(variant, ds);
    let f = train_forecaster(mcfg, tcfg, &spec, ds, seed)?;
    let report = evaluate_forecaster(&f, tcfg, ds, ds.test.clone())?;
    Ok((f, report))
}

// ── Noise sweep ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    /// Mean over seeds of MSE(vanilla) - MSE(prior variant).
    pub delta_mse: f64,
    pub vanilla_mse: f64,
    pub prior_mse: f64,
    pub per_seed: Vec<(u64, f64, f64)>,
}

/// One sweep cell: corrupts the base set at `sigma` (the noise seed equals
/// the training seed), then trains the vanilla baseline and the prior variant
/// on the same noisy copy. Returns (vanilla, variant) test metrics.
pub fn sweep_cell(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    variant: Variant,
    base: &SeriesDataset,
    sigma: f64,
    seed: u64,
) -> Result<(MetricReport, MetricReport)> {
    let noisy = add_noise(base, sigma, seed)?;
    let (_, vanilla) = train_and_eval(mcfg, tcfg, Variant::Vanilla, &noisy, seed)?;
    let (_, prior) = train_and_eval(mcfg, tcfg, variant, &noisy, seed)?;
    Ok((vanilla, prior))
}

/// Trains vanilla and one prior variant on noise-corrupted copies of the
/// dataset and tabulates the MSE gap per noise level. Each seed draws its own
/// corruption so the mean covers both sources of variation.
pub fn noise_sweep(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    variant: Variant,
    base: &SeriesDataset,
    sigmas: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let (vanilla, prior) = sweep_cell(mcfg, tcfg, variant, base, sigma, seed)?;
            per_seed.push((seed, vanilla.mse, prior.mse));
        }
        let n = per_seed.len() as f64;
        let vanilla_mse = per_seed.iter().map(|r| r.1).sum::<f64>() / n;
        let prior_mse = per_seed.iter().map(|r| r.2).sum::<f64>() / n;
        rows.push(SweepRow {
            sigma,
            delta_mse: vanilla_mse - prior_mse,
            vanilla_mse,
            prior_mse,
            per_seed,
        });
    }
    Ok(rows)
}

// ── Latent-AR training ───────────────────────────────────────────────────

pub struct TrainedAr {
    pub model: ModelConfig,
    pub ar: ArConfig,
    pub bank: FactorBank,
    pub ar_params: ArParams,
    pub store: ParamStore<f64>,
    pub train_losses: Vec<f64>,
    pub val_history: Vec<f64>,
    pub best_val_mse: f64,
    pub epochs_run: usize,
}

fn ar_norm_batch(
    ds: &SeriesDataset,
    idxs: &[usize],
    mcfg: &ModelConfig,
    p_f: usize,
) -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>, RevinState)> {
    let (xp, y_norm, y_raw, st) = norm_batch(ds, idxs, mcfg)?;
    let b = idxs.len();
    let yp = y_norm.reshaped(&[b, mcfg.n_channels, p_f, mcfg.patch_len])?;
    Ok((xp, yp, y_raw, st))
}

pub fn train_latent_ar(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    ar_cfg: &ArConfig,
    ds: &SeriesDataset,
    seed: u64,
) -> Result<TrainedAr> {
    tcfg.validate(mcfg, ds)?;
    ar_cfg.validate()?;
    if ar_cfg.p_f * mcfg.patch_len != tcfg.pred_len {
        return Err(StptError::InvalidConfig(format!(
            "p_f {} x patch {} does not tile pred_len {}",
            ar_cfg.p_f, mcfg.patch_len, tcfg.pred_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bank = FactorBank::new(&mut store, mcfg, "", &mut rng)?;
    let ar_params = ArParams::new(&mut store, mcfg, "", &mut rng)?;

    let train_idx: Vec<usize> = ds.train.clone().collect();
    let steps_per_epoch = train_idx.len().div_ceil(tcfg.batch_size);
    let mut adam = AdamState::new(tcfg.lr, Some(tcfg.max_epochs * steps_per_epoch));

    let mut out = TrainedAr {
        model: mcfg.clone(),
        ar: ar_cfg.clone(),
        bank,
        ar_params,
        store: ParamStore::new(),
        train_losses: Vec::new(),
        val_history: Vec::new(),
        best_val_mse: f64::INFINITY,
        epochs_run: 0,
    };

    let mut best_snap = store.snapshot();
    let mut best = f64::INFINITY;
    let mut bad = 0usize;
    let mut order = train_idx;
    let mut step = 0usize;

    for epoch in 0..tcfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tcfg.batch_size) {
            let (xp, yp, _, _) = ar_norm_batch(ds, chunk, mcfg, ar_cfg.p_f)?;
            let mut tape = Tape::new();
            store.zero_grads();
            let x_id = tape.constant(xp);
            let y_id = tape.constant(yp);
            let loss = training_step(
                &mut tape,
                mcfg,
                ar_cfg,
                &out.bank,
                &store,
                &out.ar_params,
                x_id,
                y_id,
            )?;
            let lv = tape.value(loss.total).data()[0];
            if !lv.is_finite() {
                return Err(StptError::Diverged {
                    step,
                    what: format!("epoch {} latent-ar loss = {}", epoch, lv),
                });
            }
            epoch_loss += lv * chunk.len() as f64;
            tape.backward(loss.total, &mut store)?;
            adam.step_all(&mut store);
            step += 1;
        }
        out.train_losses.push(epoch_loss / order.len() as f64);

        let val = ar_eval_split(mcfg, tcfg, ar_cfg, &out.bank, &out.ar_params, &store, ds, ds.val.clone())?;
        out.val_history.push(val.mse);
        out.epochs_run = epoch + 1;
        if val.mse < best {
            best = val.mse;
            best_snap = store.snapshot();
            bad = 0;
        } else {
            bad += 1;
            if bad >= tcfg.patience {
                break;
            }
        }
    }

    store.restore(&best_snap);
    out.best_val_mse = best;
    out.store = store;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn ar_eval_split(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    ar_cfg: &ArConfig,
    bank: &FactorBank,
    ar_params: &ArParams,
    store: &ParamStore<f64>,
    ds: &SeriesDataset,
    range: Range<usize>,
) -> Result<MetricReport> {
    let idxs: Vec<usize> = range.collect();
    if idxs.is_empty() {
        return Ok(MetricReport { mse: 0.0, mae: 0.0 });
    }
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut count = 0.0;
    for chunk in idxs.chunks(tcfg.batch_size) {
        let (xp, _, y_raw, st) = ar_norm_batch(ds, chunk, mcfg, ar_cfg.p_f)?;
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let x_id = tape.constant(xp);
        let bt = bank.register(&mut tape, store);
        let ar = ar_params.register(&mut tape, store);
        let head = bank.patch_head(&mut tape, store);
        let out = rollout(&mut tape, mcfg, ar_cfg, &bt, &ar, &head, x_id)?;
        let b = chunk.len();
        let flat = tape.reshape(out.y_hat, &[b, mcfg.n_channels, tcfg.pred_len])?;
        let y_den = revin_denormalize(tape.value(flat), &st);
        for (&a, &bv) in y_den.data().iter().zip(y_raw.data()) {
            se += (a - bv) * (a - bv);
            ae += (a - bv).abs();
        }
        count += y_raw.numel() as f64;
    }
    Ok(MetricReport { mse: se / count, mae: ae / count })
}

pub fn evaluate_ar(
    f: &TrainedAr,
    tcfg: &TrainConfig,
    ds: &SeriesDataset,
    range: Range<usize>,
) -> Result<MetricReport> {
    ar_eval_split(&f.model, tcfg, &f.ar, &f.bank, &f.ar_params, &f.store, ds, range)
}

/// Rolls one window out step by step and returns the denormalized forecast
/// `[N, pred_len]` together with the per-step decoder trace.
pub fn rollout_sample(
    f: &TrainedAr,
    tcfg: &TrainConfig,
    ds: &SeriesDataset,
    idx: usize,
) -> Result<(Tensor<f64>, Vec<StepTrace>)> {
    let mcfg = &f.model;
    let (xp, _, _, st) = ar_norm_batch(ds, &[idx], mcfg, f.ar.p_f)?;
    let mut tape = Tape::new();
    tape.set_grad_enabled(false);
    let x_id = tape.constant(xp);
    let bt = f.bank.register(&mut tape, &f.store);
    let ar = f.ar_params.register(&mut tape, &f.store);
    let head = f.bank.patch_head(&mut tape, &f.store);
    let out = rollout(&mut tape, mcfg, &f.ar, &bt, &ar, &head, x_id)?;
    let flat = tape.reshape(out.y_hat, &[1, mcfg.n_channels, tcfg.pred_len])?;
    let y = revin_denormalize(tape.value(flat), &st)
        .reshaped(&[mcfg.n_channels, tcfg.pred_len])?;
    Ok((y, out.trace))
}

// ── Conditional generator training ───────────────────────────────────────

pub struct TrainedGenerator {
    pub model: ModelConfig,
    pub gen: GenConfig,
    pub sched: DiffusionSchedule,
    pub bank: FactorBank,
    pub fg: FgParams,
    pub attrs: AttrParams,
    pub store: ParamStore<f64>,
    pub train_losses: Vec<f64>,
    pub val_history: Vec<f64>,
    pub best_val_mse: f64,
    pub epochs_run: usize,
}

/// Normalized history window of one sample as `[1, N, P, p]`.
fn gen_sample_x0(ds: &SeriesDataset, idx: usize, mcfg: &ModelConfig) -> Result<Tensor<f64>> {
    let (xp, _, _, _) = norm_batch(ds, &[idx], mcfg)?;
    Ok(xp)
}

/// Trains the condition-generated denoiser on per-sample diffusion losses.
/// Attributes come from the dataset's generator metadata; conditions drop to
/// the null embedding with probability `p_null`.
pub fn train_generator(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    gcfg: &GenConfig,
    attr_mode: AttrMode,
    attr_dim: usize,
    ds: &SeriesDataset,
    seed: u64,
) -> Result<TrainedGenerator> {
    tcfg.validate(mcfg, ds)?;
    gcfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bank = FactorBank::new(&mut store, mcfg, "", &mut rng)?;
    let attrs = AttrParams::new(&mut store, &ds.attr_cards, attr_dim, attr_mode, "", &mut rng)?;
    let c_dim = ds.attr_cards.len() * attr_dim;
    let fg = FgParams::new(&mut store, mcfg, c_dim, "", &mut rng)?;
    let sched = DiffusionSchedule::quadratic(gcfg)?;

    let train_idx: Vec<usize> = ds.train.clone().collect();
    let steps_per_epoch = train_idx.len().div_ceil(tcfg.batch_size);
    let mut adam = AdamState::new(tcfg.lr, Some(tcfg.max_epochs * steps_per_epoch));

    let mut out = TrainedGenerator {
        model: mcfg.clone(),
        gen: gcfg.clone(),
        sched,
        bank,
        fg,
        attrs,
        store: ParamStore::new(),
        train_losses: Vec::new(),
        val_history: Vec::new(),
        best_val_mse: f64::INFINITY,
        epochs_run: 0,
    };

    let mut best_snap = store.snapshot();
    let mut best = f64::INFINITY;
    let mut bad = 0usize;
    let mut order = train_idx;
    let mut step = 0usize;

    for epoch in 0..tcfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tcfg.batch_size) {
            store.zero_grads();
            let inv = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let x0 = gen_sample_x0(ds, idx, mcfg)?;
                let t = rng.gen_range(0..gcfg.t_train);
                let noise = Tensor::randn(x0.shape(), 1.0, &mut rng);
                let drop = rng.gen::<f64>() < gcfg.p_null;
                let mut tape = Tape::new();
                let c = if drop {
                    None
                } else {
                    let at = out.attrs.register(&mut tape, &store);
                    Some(encode_attrs(&mut tape, &at, &ds.meta[idx].attrs)?)
                };
                let loss = diffusion_loss(
                    &mut tape, mcfg, gcfg, &out.sched, &out.bank, &out.fg, &store, &x0, c, t,
                    &noise,
                )?;
                let scaled = tape.scale(loss.total, inv);
                let lv = tape.value(scaled).data()[0];
                if !lv.is_finite() {
                    return Err(StptError::Diverged {
                        step,
                        what: format!("epoch {} diffusion loss = {}", epoch, lv),
                    });
                }
                epoch_loss += lv;
                tape.backward(scaled, &mut store)?;
            }
            adam.step_all(&mut store);
            step += 1;
        }
        out.train_losses.push(epoch_loss / steps_per_epoch as f64);

        let val = gen_eval_split(mcfg, gcfg, &out, &store, ds, ds.val.clone(), seed)?;
        out.val_history.push(val.mse);
        out.epochs_run = epoch + 1;
        if val.mse < best {
            best = val.mse;
            best_snap = store.snapshot();
            bad = 0;
        } else {
            bad += 1;
            if bad >= tcfg.patience {
                break;
            }
        }
    }

    store.restore(&best_snap);
    out.best_val_mse = best;
    out.store = store;
    Ok(out)
}

/// v-space denoising error over a split with a frozen evaluation stream, so
/// epochs stay comparable.
fn gen_eval_split(
    mcfg: &ModelConfig,
    gcfg: &GenConfig,
    g: &TrainedGenerator,
    store: &ParamStore<f64>,
    ds: &SeriesDataset,
    range: Range<usize>,
    seed: u64,
) -> Result<MetricReport> {
    let idxs: Vec<usize> = range.collect();
    if idxs.is_empty() {
        return Ok(MetricReport { mse: 0.0, mae: 0.0 });
    }
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6576_616c);
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut count = 0.0;
    for &idx in &idxs {
        let x0 = gen_sample_x0(ds, idx, mcfg)?;
        let t = eval_rng.gen_range(0..gcfg.t_train);
        let noise = Tensor::randn(x0.shape(), 1.0, &mut eval_rng);
        let x_t = g.sched.q_sample(&x0, t, &noise)?;
        let v_t = g.sched.v_target(&x0, &noise, t)?;
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let at = g.attrs.register(&mut tape, store);
        let c = encode_attrs(&mut tape, &at, &ds.meta[idx].attrs)?;
        let xt_id = tape.constant(x_t);
        let v_pred = denoise_v(&mut tape, mcfg, gcfg, &g.bank, &g.fg, store, xt_id, Some(c), t)?;
        for (&a, &b) in tape.value(v_pred).data().iter().zip(v_t.data()) {
            se += (a - b) * (a - b);
            ae += (a - b).abs();
        }
        count += v_t.numel() as f64;
    }
    Ok(MetricReport { mse: se / count, mae: ae / count })
}

pub fn evaluate_generator(
    g: &TrainedGenerator,
    ds: &SeriesDataset,
    range: Range<usize>,
    seed: u64,
) -> Result<MetricReport> {
    gen_eval_split(&g.model, &g.gen, g, &g.store, ds, range, seed)
}

/// Draws one guided sample for an attribute assignment; returns `[N, P * p]`
/// on the normalized scale.
pub fn sample_conditional<R: Rng + ?Sized>(
    g: &TrainedGenerator,
    attrs: &[usize],
    rng: &mut R,
) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    tape.set_grad_enabled(false);
    let at = g.attrs.register(&mut tape, &g.store);
    let c = encode_attrs(&mut tape, &at, attrs)?;
    let c_val = tape.value(c).clone();
    ddim_sample(&g.model, &g.gen, &g.sched, &g.bank, &g.fg, &g.store, &c_val, rng)
}

/// Convenience wrapper drawing the sample from a fresh seeded stream.
pub fn sample_conditional_seeded(
    g: &TrainedGenerator,
    attrs: &[usize],
    seed: u64,
) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_conditional(g, attrs, &mut rng)
}

// ── Worker pool ──────────────────────────────────────────────────────────

/// Runs independent grid cells on a bounded worker pool. Results come back in
/// cell order, so callers stay deterministic for any worker count.
pub fn run_grid<T, R, F>(jobs: usize, cells: Vec<T>, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| StptError::InvalidConfig(format!("worker pool: {}", e)))?;
    Ok(pool.install(|| {
        use rayon::prelude::*;
        cells.into_par_iter().map(f).collect()
    }))
}

// ── Tests ────────────────────────────────────────────────────────────────
