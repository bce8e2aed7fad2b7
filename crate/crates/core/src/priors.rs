//! Graph priors: structured potentials injected into the mean-field loop.
//!
//! Four mechanisms are supported: periodicity modulation of temporal scores,
//! a per-channel trend chain with its own belief track, cross-channel lag
//! edges, and channel-independence masking. The first three add terms to the
//! Z update; independence is an additive mask on channel candidates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StptError};
use crate::scalar::{Scalar, NEG_SENTINEL};
use crate::tensor::tape::{ParamId, ParamStore, Tape, TensorId};
use crate::tensor::Tensor;

/// Belief rows whose normalizer falls below this keep their previous value.
pub const ABS_NORM_FLOOR: f64 = 1e-12;

// ── Declarative specs ────────────────────────────────────────────────────

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub periodicity: Option<PeriodicitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trend: Option<TrendSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lag: Option<LagSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indep: Option<IndepSpec>,
}

/// Declared cycle lengths per channel, in raw time steps. Channels with an
/// empty list are left unmodulated.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodicitySpec {
    pub periods: Vec<Vec<f64>>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrendSpec {
    #[serde(default = "default_d_m")]
    pub d_m: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagSpec {
    pub relations: Vec<LagRelation>,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

/// Channel `dst` follows channel `src` with a delay of `tau` raw steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagRelation {
    pub src: usize,
    pub dst: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndepSpec {
    pub groups: Vec<Vec<usize>>,
}

fn default_gamma() -> f64 {
    5.0
}
fn default_d_m() -> usize {
    64
}
fn default_eta() -> f64 {
    200.0
}

impl Default for TrendSpec {
    fn default() -> Self {
        Self { d_m: default_d_m() }
    }
}

impl PriorSpec {
    pub fn validate(&self, n_channels: usize) -> Result<()> {
        if let Some(p) = &self.periodicity {
            if p.periods.len() != n_channels {
                return Err(StptError::InvalidConfig(format!(
                    "periodicity lists {} channels, model has {}",
                    p.periods.len(),
                    n_channels
                )));
            }
            if p.periods.iter().flatten().any(|&t| t <= 0.0) {
                return Err(StptError::InvalidConfig("periods must be positive".into()));
            }
        }
        if let Some(t) = &self.trend {
            if t.d_m == 0 {
                return Err(StptError::InvalidConfig("trend d_m must be positive".into()));
            }
        }
        if let Some(l) = &self.lag {
            for r in &l.relations {
                if r.src >= n_channels || r.dst >= n_channels {
                    return Err(StptError::InvalidConfig(format!(
                        "lag relation ({}, {}) out of range for {} channels",
                        r.src, r.dst, n_channels
                    )));
                }
                if r.tau < 0.0 {
                    return Err(StptError::InvalidConfig("lag tau must be non-negative".into()));
                }
            }
        }
        if let Some(ind) = &self.indep {
            validate_partition(&ind.groups, n_channels)?;
        }
        Ok(())
    }
}

fn validate_partition(groups: &[Vec<usize>], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for g in groups {
        for &i in g {
            if i >= n {
                return Err(StptError::InvalidConfig(format!(
                    "group member {} out of range for {} channels",
                    i, n
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(StptError::InvalidConfig(format!("channel {} appears twice", i)));
            }
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(StptError::InvalidConfig(format!("channel {} missing from partition", missing)));
    }
    Ok(())
}

// ── Static tensors ───────────────────────────────────────────────────────

/// Periodicity affinity matrix for one channel: entry `[t, s]` is the mean of
/// `cos(2 pi (s - t) / (T_k / p))` over the declared cycle lengths, or 1
/// everywhere when none are declared. Distances are in patch units.
pub fn periodicity_matrix<T: Scalar>(periods: &[f64], n_patches: usize, patch_len: usize) -> Tensor<T> {
    if periods.is_empty() {
        return Tensor::full(&[n_patches, n_patches], T::one());
    }
    let mut m = Tensor::zeros(&[n_patches, n_patches]);
    let two_pi = std::f64::consts::TAU;
    for t in 0..n_patches {
        for s in 0..n_patches {
            let dist = s as f64 - t as f64;
            let mean = periods
                .iter()
                .map(|&tk| (two_pi * dist / (tk / patch_len as f64)).cos())
                .sum::<f64>()
                / periods.len() as f64;
            m.set(&[t, s], T::cst(mean));
        }
    }
    m
}

/// Additive channel mask `[N, 1, N]`: zero inside a group, mask sentinel across
/// groups and for every pair under an all-singleton partition.
pub fn indep_mask<T: Scalar>(groups: &[Vec<usize>], n_channels: usize) -> Result<Tensor<T>> {
    validate_partition(groups, n_channels)?;
    let mut group_of = vec![0usize; n_channels];
    for (gi, g) in groups.iter().enumerate() {
        for &i in g {
            group_of[i] = gi;
        }
    }
    let mut mask = Tensor::zeros(&[n_channels, 1, n_channels]);
    for i in 0..n_channels {
        for j in 0..n_channels {
            if group_of[i] != group_of[j] {
                mask.set(&[i, 0, j], T::cst(NEG_SENTINEL));
            }
        }
    }
    Ok(mask)
}

// ── Learnable parameters ─────────────────────────────────────────────────

pub struct TrendParams {
    /// Emission maps, one `[d_m, d]` per channel.
    pub b: Vec<ParamId>,
    /// Transition maps, one `[d_m, d_m]` per channel.
    pub k: Vec<ParamId>,
    pub d_m: usize,
}

pub struct PriorParams {
    pub trend: Option<TrendParams>,
    /// One `[d, d]` coupling matrix per lag relation.
    pub lag: Option<Vec<ParamId>>,
}

impl PriorParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        spec: &PriorSpec,
        d: usize,
        n_channels: usize,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate(n_channels)?;
        let trend = match &spec.trend {
            None => None,
            Some(t) => {
                let mut b = Vec::with_capacity(n_channels);
                let mut k = Vec::with_capacity(n_channels);
                for i in 0..n_channels {
                    b.push(store.insert(
                        &format!("{}prior.trend.b.{}", prefix, i),
                        Tensor::randn(&[t.d_m, d], 0.2, rng),
                    )?);
                    k.push(store.insert(
                        &format!("{}prior.trend.k.{}", prefix, i),
                        Tensor::randn(&[t.d_m, t.d_m], 0.2, rng),
                    )?);
                }
                Some(TrendParams { b, k, d_m: t.d_m })
            }
        };
        let lag = match &spec.lag {
            None => None,
            Some(l) => {
                let mut ws = Vec::with_capacity(l.relations.len());
                for (idx, _) in l.relations.iter().enumerate() {
                    ws.push(store.insert(
                        &format!("{}prior.lag.w.{}", prefix, idx),
                        Tensor::randn(&[d, d], 0.02, rng),
                    )?);
                }
                Some(ws)
            }
        };
        Ok(Self { trend, lag })
    }
}

// ── Per-forward runtime ──────────────────────────────────────────────────

struct TrendRt {
    b: Vec<TensorId>,
    k: Vec<TensorId>,
    d_m: usize,
}

struct LagRt {
    w: TensorId,
    dst: usize,
    src: usize,
    off_lo: usize,
    off_hi: usize,
    w_lo: f64,
    w_hi: f64,
}

/// Prior state registered on one tape for one forward pass.
pub struct PriorRuntime<T: Scalar> {
    /// `[1, N, P, P]` multiplicative factor (gamma already folded in).
    pub period_mod: Option<TensorId>,
    trend: Option<TrendRt>,
    lag: Option<Vec<LagRt>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> PriorRuntime<T> {
    pub fn register(
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        spec: &PriorSpec,
        params: &PriorParams,
        n_channels: usize,
        n_patches: usize,
        patch_len: usize,
    ) -> Result<Self> {
        let period_mod = spec.periodicity.as_ref().map(|p| {
            let mut data = Vec::with_capacity(n_channels * n_patches * n_patches);
            for periods in &p.periods {
                let m = periodicity_matrix::<T>(periods, n_patches, patch_len);
                let gamma = T::cst(p.gamma);
                data.extend(m.data().iter().map(|&v| v * gamma));
            }
            let t = Tensor::new(&[1, n_channels, n_patches, n_patches], data)
                .expect("period mod shape");
            tape.constant(t)
        });

        let trend = params.trend.as_ref().map(|tp| TrendRt {
            b: tp.b.iter().map(|&pid| tape.param(store, pid)).collect(),
            k: tp.k.iter().map(|&pid| tape.param(store, pid)).collect(),
            d_m: tp.d_m,
        });

        let lag = match (&spec.lag, &params.lag) {
            (Some(l), Some(ws)) => {
                let mut rts = Vec::with_capacity(l.relations.len());
                for (rel, &wpid) in l.relations.iter().zip(ws) {
                    let delta = rel.tau / patch_len as f64;
                    let off_lo = delta.floor() as usize;
                    let beta = delta - delta.floor();
                    rts.push(LagRt {
                        w: tape.param(store, wpid),
                        dst: rel.dst,
                        src: rel.src,
                        off_lo,
                        off_hi: off_lo + 1,
                        w_lo: (1.0 - beta) * l.eta,
                        w_hi: beta * l.eta,
                    });
                }
                Some(rts)
            }
            _ => None,
        };

        Ok(Self { period_mod, trend, lag, _marker: std::marker::PhantomData })
    }

    pub fn has_trend(&self) -> bool {
        self.trend.is_some()
    }

    pub fn trend_d_m(&self) -> Option<usize> {
        self.trend.as_ref().map(|t| t.d_m)
    }

    /// Messages to add to the Z update for this iteration. The trend chain
    /// advances its own belief track (`qm`, shaped `[B, N, P, d_m]`) once per
    /// call and emits through the per-channel emission map.
    pub fn messages(
        &self,
        tape: &mut Tape<T>,
        z: TensorId,
        qm: &mut Option<TensorId>,
    ) -> Result<Vec<TensorId>> {
        let mut out = Vec::new();
        if let Some(trend) = &self.trend {
            out.push(trend_message(tape, trend, z, qm)?);
        }
        if let Some(lag) = &self.lag {
            if let Some(msg) = lag_message(tape, lag, z)? {
                out.push(msg);
            }
        }
        Ok(out)
    }
}

/// Uniform initial trend beliefs.
pub fn init_qm<T: Scalar>(
    tape: &mut Tape<T>,
    batch: usize,
    n_channels: usize,
    n_patches: usize,
    d_m: usize,
) -> TensorId {
    tape.constant(Tensor::full(
        &[batch, n_channels, n_patches, d_m],
        T::one() / T::cst(d_m as f64),
    ))
}

fn trend_message<T: Scalar>(
    tape: &mut Tape<T>,
    rt: &TrendRt,
    z: TensorId,
    qm_slot: &mut Option<TensorId>,
) -> Result<TensorId> {
    let zs = tape.shape(z).to_vec();
    let (b, n, p, d) = (zs[0], zs[1], zs[2], zs[3]);
    let d_m = rt.d_m;
    let qm = match *qm_slot {
        Some(id) => id,
        None => {
            let id = init_qm(tape, b, n, p, d_m);
            *qm_slot = Some(id);
            id
        }
    };

    let mut qm_parts = Vec::with_capacity(n);
    let mut msg_parts = Vec::with_capacity(n);
    for i in 0..n {
        let z_i = tape.slice(z, 1, i, 1)?;
        let z_flat = tape.reshape(z_i, &[b * p, d])?;
        let qm_i = tape.slice(qm, 1, i, 1)?;
        let qm_i = tape.reshape(qm_i, &[b, p, d_m])?;

        // Neighbor beliefs shifted along the patch axis; boundary terms drop.
        let zero_row = tape.zeros(&[b, 1, d_m]);
        let fwd = if p > 1 {
            let head = tape.slice(qm_i, 1, 0, p - 1)?;
            tape.concat(&[zero_row, head], 1)?
        } else {
            zero_row
        };
        let zero_row2 = tape.zeros(&[b, 1, d_m]);
        let bwd = if p > 1 {
            let tail = tape.slice(qm_i, 1, 1, p - 1)?;
            tape.concat(&[tail, zero_row2], 1)?
        } else {
            zero_row2
        };

        let k = rt.k[i];
        let k_t = tape.permute(k, &[1, 0])?;
        let b_mat = rt.b[i];
        let b_t = tape.permute(b_mat, &[1, 0])?;

        let fwd_flat = tape.reshape(fwd, &[b * p, d_m])?;
        let bwd_flat = tape.reshape(bwd, &[b * p, d_m])?;
        let term_prev = tape.matmul(fwd_flat, k)?;
        let term_next = tape.matmul(bwd_flat, k_t)?;
        let term_obs = tape.matmul(z_flat, b_t)?;
        let arg = {
            let s = tape.add(term_prev, term_next)?;
            tape.add(s, term_obs)?
        };

        // AbsNorm with a fallback: rows whose L1 mass is below the floor keep
        // their previous belief. The row selector depends only on forward
        // values, so it enters the tape as a constant.
        let mag = tape.abs(arg);
        let norm = tape.sum_last(mag);
        let (mask_v, inv_v) = {
            let nv = tape.value(norm);
            let floor = T::cst(ABS_NORM_FLOOR);
            let mut mask = Tensor::zeros(nv.shape());
            let mut inv = Tensor::zeros(nv.shape());
            for ((&x, m), iv) in
                nv.data().iter().zip(mask.data_mut()).zip(inv.data_mut())
            {
                if x >= floor {
                    *m = T::one();
                } else {
                    *iv = T::one();
                }
            }
            (mask, inv)
        };
        let mask_c = tape.constant(mask_v);
        let inv_c = tape.constant(inv_v);
        let denom = tape.add(norm, inv_c)?;
        let unit = tape.div(mag, denom)?;
        let qm_flat = tape.reshape(qm_i, &[b * p, d_m])?;
        let kept = tape.mul(unit, mask_c)?;
        let fallback = tape.mul(qm_flat, inv_c)?;
        let safe = tape.add(kept, fallback)?;
        let summed = tape.add(qm_flat, safe)?;
        let qm_new = tape.scale(summed, 0.5);

        let msg = tape.matmul(qm_new, b_mat)?;
        qm_parts.push(tape.reshape(qm_new, &[b, 1, p, d_m])?);
        msg_parts.push(tape.reshape(msg, &[b, 1, p, d])?);
    }

    *qm_slot = Some(tape.concat(&qm_parts, 1)?);
    tape.concat(&msg_parts, 1)
}

fn lag_message<T: Scalar>(
    tape: &mut Tape<T>,
    rels: &[LagRt],
    z: TensorId,
) -> Result<Option<TensorId>> {
    if rels.is_empty() {
        return Ok(None);
    }
    let zs = tape.shape(z).to_vec();
    let (b, n, p, d) = (zs[0], zs[1], zs[2], zs[3]);
    let mut acc: Vec<Option<TensorId>> = vec![None; n];
    for rel in rels {
        let z_src = tape.slice(z, 1, rel.src, 1)?;
        let z_flat = tape.reshape(z_src, &[b * p, d])?;
        let m = tape.matmul(z_flat, rel.w)?;
        let m = tape.reshape(m, &[b, p, d])?;
        for (off, weight) in [(rel.off_lo, rel.w_lo), (rel.off_hi, rel.w_hi)] {
            if weight == 0.0 || off >= p {
                // Fractional part zero, or the target falls past the window.
                continue;
            }
            let shifted = if off == 0 {
                m
            } else {
                let head = tape.slice(m, 1, 0, p - off)?;
                let pad = tape.zeros(&[b, off, d]);
                tape.concat(&[pad, head], 1)?
            };
            let contrib = tape.scale(shifted, weight);
            acc[rel.dst] = Some(match acc[rel.dst] {
                Some(prev) => tape.add(prev, contrib)?,
                None => contrib,
            });
        }
    }
    let mut parts = Vec::with_capacity(n);
    for slot in acc {
        let part = match slot {
            Some(id) => tape.reshape(id, &[b, 1, p, d])?,
            None => tape.zeros(&[b, 1, p, d]),
        };
        parts.push(part);
    }
    Ok(Some(tape.concat(&parts, 1)?))
}

// ── Tests ────────────────────────────────────────────────────────────────
