//! Acceptance battery: one test per criterion the suite must uphold, each
//! printing a single PASS/FAIL line with the measured quantities. Numeric
//! identities run at tight tolerances; the desk-scale training studies check
//! directional effects, not absolute scores.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stpt_core::check::{finite_diff_check, rel_err};
use stpt_core::factor_gen::{
    conditional_forward, denoise_v, diffusion_loss, encode_attrs, AttrMode, AttrParams,
    DiffusionSchedule, FgParams, GenConfig,
};
use stpt_core::latent_ar::{
    causal_encoder, rollout, single_step_mfvi, student_loss, teacher_targets, training_step,
    ArConfig, ArParams,
};
use stpt_core::model::bank::FactorBank;
use stpt_core::model::mfvi::{
    forecast, init_state, message_f_time, mfvi_iterate, normalize_z, z_update, ForwardCtx,
    MaskSet,
};
use stpt_core::model::{ModelConfig, ZNormalizer};
use stpt_core::priors::{
    indep_mask, periodicity_matrix, IndepSpec, LagRelation, LagSpec, PeriodicitySpec,
    PriorParams, PriorRuntime, PriorSpec, TrendSpec,
};
use stpt_core::synth::{
    generate, lag_pair_argmax, noise_residual_std, top_power_bin, SynthSpec, SynthTask,
};
use stpt_core::tensor::tape::{ParamStore, Tape};
use stpt_core::tensor::Tensor;
use stpt_core::train::{
    forecaster_model, noise_sweep, train_and_eval, TrainConfig, Variant, SEEDS3,
};

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn report(number: u32, name: &str, ok: bool, detail: &str, secs: f64) {
    println!("criterion {:02} {}: {} ({}) [{:.2}s]", number, name, verdict(ok), detail, secs);
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fresh_bank(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, FactorBank, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bank = FactorBank::new(&mut store, cfg, "", &mut rng).unwrap();
    (store, bank, rng)
}

// ── 1: attention scores equal the label-basis double sum ─────────────────

#[test]
fn criterion_01_low_rank_score_equivalence() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for &(n, p, d, heads, seed) in
        &[(3usize, 4usize, 8usize, 2usize, 21u64), (2, 3, 4, 1, 22), (3, 2, 8, 2, 23)]
    {
        let mut cfg = ModelConfig::tiny(n, p);
        cfg.d = d;
        cfg.d_ff = d;
        cfg.n_heads = heads;
        cfg.rope_time = false;
        cfg.rope_chan = false;
        let (store, bank, mut rng) = fresh_bank(&cfg, seed);
        let mut tape = Tape::new();
        let bt = bank.register(&mut tape, &store);
        let x = tape.constant(Tensor::randn(&[2, n, p, cfg.patch_len], 1.0, &mut rng));
        let state = init_state(&mut tape, &cfg, &bt, x).unwrap();
        let zv = tape.value(state.z).clone();
        for h in 0..heads {
            let (f_time, _) =
                message_f_time(&mut tape, state.z, bt.u_time[h], bt.v_time[h], None).unwrap();
            let d_h = cfg.d_head();
            let u = store.value(bank.u_time[h]).clone();
            let v = store.value(bank.v_time[h]).clone();
            let mut psi = vec![0.0; d * d];
            for a in 0..d {
                for b in 0..d {
                    let mut acc = 0.0;
                    for c in 0..d_h {
                        acc += u.at(&[a, c]) * v.at(&[b, c]);
                    }
                    psi[a * d + b] = acc / (d_h as f64).sqrt();
                }
            }
            let fv = tape.value(f_time).clone();
            for bi in 0..2 {
                for i in 0..n {
                    for t in 0..p {
                        for s in 0..p {
                            let mut acc = 0.0;
                            for a in 0..d {
                                for b in 0..d {
                                    acc += zv.at(&[bi, i, t, a])
                                        * zv.at(&[bi, i, s, b])
                                        * psi[a * d + b];
                                }
                            }
                            worst = worst.max(rel_err(acc, fv.at(&[bi, i, t, s])));
                        }
                    }
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = worst < 1e-12 && secs < 1.0;
    report(1, "low-rank score equivalence", ok, &format!("worst rel err {:.2e}", worst), secs);
    assert!(ok, "worst rel err {:.2e} in {:.2}s", worst, secs);
}

// ── 2: joint softmax rows normalize with zero self/masked mass ───────────

#[test]
fn criterion_02_joint_softmax_normalization() {
    let t0 = Instant::now();
    let cfg = ModelConfig::tiny(3, 4);
    let groups = vec![vec![0usize, 1], vec![2]];
    let mut worst = 0.0f64;
    let mut self_mass = 0.0f64;
    let mut masked_mass = 0.0f64;
    for i in 0..1000u64 {
        let (store, bank, mut rng) = fresh_bank(&cfg, 5000 + i);
        let masked = i % 2 == 1;
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let bt = bank.register(&mut tape, &store);
        let masks = MaskSet {
            time: None,
            chan: if masked { Some(indep_mask(&groups, 3).unwrap()) } else { None },
        };
        let ctx = ForwardCtx::build(&mut tape, &cfg, &masks);
        let x = tape.constant(Tensor::randn(&[1, 3, 4, cfg.patch_len], 1.0, &mut rng));
        let mut state = init_state(&mut tape, &cfg, &bt, x).unwrap();
        mfvi_iterate(&mut tape, &cfg, &bt, &ctx, &mut state, None, 1).unwrap();
        let p = cfg.n_patches;
        let width = p + cfg.n_channels;
        for &qh in &state.qh {
            let v = tape.value(qh);
            for (r, row) in v.data().chunks(width).enumerate() {
                let sum: f64 = row.iter().sum();
                worst = worst.max((sum - 1.0).abs());
                let i_ch = (r / p) % cfg.n_channels;
                let t = r % p;
                self_mass = self_mass.max(row[t].abs()).max(row[p + i_ch].abs());
                if masked {
                    for j in 0..cfg.n_channels {
                        if (i_ch < 2) != (j < 2) {
                            masked_mass = masked_mass.max(row[p + j].abs());
                        }
                    }
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = worst < 1e-12 && self_mass == 0.0 && masked_mass == 0.0 && secs < 10.0;
    report(
        2,
        "joint softmax normalization",
        ok,
        &format!(
            "worst row dev {:.2e}, self mass {:.1e}, masked mass {:.1e}, 1000 instances",
            worst, self_mass, masked_mass
        ),
        secs,
    );
    assert!(ok);
}

// ── 3: zero damping is a fixed point everywhere z_update runs ────────────

#[test]
fn criterion_03_zero_damping_fixed_point() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;

    // Direct update.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::randn(&[2, 3, 4, 8], 1.0, &mut rng));
        let z = normalize_z(&mut tape, ZNormalizer::Softmax, z).unwrap();
        let s = tape.constant(Tensor::randn(&[2, 3, 4, 8], 1.0, &mut rng));
        let alpha = tape.scalar_const(0.0);
        let out = z_update(&mut tape, ZNormalizer::Softmax, z, s, alpha).unwrap();
        worst = worst.max(tape.value(out).max_abs_diff(tape.value(z)));
    }

    // Encoder sweep with the damping logit driven to zero weight.
    let cfg = ModelConfig::tiny(3, 4);
    let (mut store, bank, mut rng) = fresh_bank(&cfg, 32);
    let id = store.id_of("damping.logit").unwrap();
    store.value_mut(id).data_mut()[0] = -1e3;
    {
        let mut tape = Tape::new();
        let bt = bank.register(&mut tape, &store);
        let ctx = ForwardCtx::build(&mut tape, &cfg, &MaskSet::default());
        let x = tape.constant(Tensor::randn(&[1, 3, 4, cfg.patch_len], 1.0, &mut rng));
        let mut state = init_state(&mut tape, &cfg, &bt, x).unwrap();
        let z_before = tape.value(state.z).clone();
        mfvi_iterate(&mut tape, &cfg, &bt, &ctx, &mut state, None, 3).unwrap();
        worst = worst.max(tape.value(state.z).max_abs_diff(&z_before));
    }

    // Autoregressive single-slice update against a cache.
    {
        let ar_params = {
            let mut r3 = ChaCha8Rng::seed_from_u64(34);
            ArParams::new(&mut store, &cfg, "", &mut r3).unwrap()
        };
        let mut tape = Tape::new();
        let bt = bank.register(&mut tape, &store);
        let ar = ar_params.register(&mut tape, &store);
        let unary_new = tape.constant(Tensor::randn(&[1, 3, 1, cfg.d], 1.0, &mut rng));
        let cache = tape.constant(Tensor::randn(&[1, 3, 4, cfg.d], 0.3, &mut rng));
        let init = normalize_z(&mut tape, cfg.z_normalizer, unary_new).unwrap();
        let (z, _) =
            single_step_mfvi(&mut tape, &cfg, &bt, &ar, unary_new, cache, 3).unwrap();
        worst = worst.max(tape.value(z).max_abs_diff(tape.value(init)));
    }

    let secs = t0.elapsed().as_secs_f64();
    let ok = worst <= 1e-15 && secs < 1.0;
    report(3, "zero damping fixed point", ok, &format!("worst drift {:.2e}", worst), secs);
    assert!(ok);
}

// ── 4: causality and teacher/student history identity ────────────────────

#[test]
fn criterion_04_causality_and_history_identity() {
    let t0 = Instant::now();
    let p_hist = 4usize;
    let p_f = 2usize;
    let p_total = p_hist + p_f;
    let mut cfg_hist = ModelConfig::tiny(2, p_hist);
    cfg_hist.k_iters = 2;
    let mut cfg_full = cfg_hist.clone();
    cfg_full.n_patches = p_total;
    let (store, bank, mut rng) = fresh_bank(&cfg_hist, 41);
    let x = Tensor::randn(&[1, 2, p_hist, cfg_hist.patch_len], 1.0, &mut rng);
    let y = Tensor::randn(&[1, 2, p_f, cfg_hist.patch_len], 1.0, &mut rng);

    let encode = |cfg: &ModelConfig, val: &Tensor<f64>| -> Tensor<f64> {
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let bt = bank.register(&mut tape, &store);
        let xid = tape.constant(val.clone());
        let state = causal_encoder(&mut tape, cfg, &bt, xid, cfg.k_iters).unwrap();
        tape.value(state.z).clone()
    };

    let mut full = Tensor::<f64>::zeros(&[1, 2, p_total, cfg_hist.patch_len]);
    for c in 0..2 {
        for k in 0..cfg_hist.patch_len {
            for t in 0..p_hist {
                full.set(&[0, c, t, k], x.at(&[0, c, t, k]));
            }
            for t in 0..p_f {
                full.set(&[0, c, p_hist + t, k], y.at(&[0, c, t, k]));
            }
        }
    }

    // Future perturbations must leave history latents untouched.
    let base = encode(&cfg_full, &full);
    let mut causal_worst = 0.0f64;
    for pos in [p_hist, p_total - 1] {
        let mut bumped = full.clone();
        for c in 0..2 {
            for k in 0..cfg_hist.patch_len {
                let v = bumped.at(&[0, c, pos, k]);
                bumped.set(&[0, c, pos, k], v + 0.5);
            }
        }
        let z2 = encode(&cfg_full, &bumped);
        for c in 0..2 {
            for t in 0..p_hist {
                for a in 0..cfg_hist.d {
                    causal_worst = causal_worst
                        .max((z2.at(&[0, c, t, a]) - base.at(&[0, c, t, a])).abs());
                }
            }
        }
    }

    // The teacher (history plus future) and the student (history alone)
    // agree on every history position.
    let student = encode(&cfg_hist, &x);
    let mut ts_worst = 0.0f64;
    for c in 0..2 {
        for t in 0..p_hist {
            for a in 0..cfg_hist.d {
                ts_worst = ts_worst
                    .max((base.at(&[0, c, t, a]) - student.at(&[0, c, t, a])).abs());
            }
        }
    }

    let secs = t0.elapsed().as_secs_f64();
    let ok = causal_worst <= 1e-12 && ts_worst <= 1e-12 && secs < 5.0;
    report(
        4,
        "causality and history identity",
        ok,
        &format!("future leak {:.2e}, teacher/student gap {:.2e}", causal_worst, ts_worst),
        secs,
    );
    assert!(ok);
}

// ── 5: tape gradients match central finite differences ───────────────────

#[test]
fn criterion_05_gradients_match_finite_differences() {
    let t0 = Instant::now();

    // (a) Whole-window forward with all four priors, plus the MSE head.
    let score_forward = {
        let mut cfg = ModelConfig::tiny(3, 4);
        cfg.k_iters = 2;
        let spec = PriorSpec {
            periodicity: Some(PeriodicitySpec {
                periods: vec![vec![8.0], vec![], vec![16.0]],
                gamma: 5.0,
            }),
            trend: Some(TrendSpec { d_m: 6 }),
            lag: Some(LagSpec {
                relations: vec![LagRelation { src: 0, dst: 2, tau: 6.0 }],
                eta: 3.0,
            }),
            indep: Some(IndepSpec { groups: vec![vec![0, 2], vec![1]] }),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut store = ParamStore::<f64>::new();
        let bank = FactorBank::new(&mut store, &cfg, "", &mut rng).unwrap();
        let params =
            PriorParams::new(&mut store, &spec, cfg.d, cfg.n_channels, "", &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[2, 3, 4, cfg.patch_len], 1.0, &mut rng);
        let target = Tensor::<f64>::randn(&[2, 3, cfg.pred_len], 1.0, &mut rng);
        let masks = MaskSet {
            time: None,
            chan: Some(indep_mask(&[vec![0, 2], vec![1]], 3).unwrap()),
        };
        let run = |store: &ParamStore<f64>| -> stpt_core::error::Result<f64> {
            let mut tape = Tape::new();
            let bt = bank.register(&mut tape, store);
            let ctx = ForwardCtx::build(&mut tape, &cfg, &masks);
            let rt = PriorRuntime::register(
                &mut tape,
                store,
                &spec,
                &params,
                cfg.n_channels,
                cfg.n_patches,
                cfg.patch_len,
            )?;
            let xid = tape.constant(x.clone());
            let mut state = init_state(&mut tape, &cfg, &bt, xid)?;
            mfvi_iterate(&mut tape, &cfg, &bt, &ctx, &mut state, Some(&rt), cfg.k_iters)?;
            let head = bank.forecast_head(&mut tape, store);
            let pred = forecast(&mut tape, &head, state.z)?;
            let tid = tape.constant(target.clone());
            let loss = tape.mse(pred, tid)?;
            Ok(tape.value(loss).data()[0])
        };
        {
            let mut tape = Tape::new();
            let bt = bank.register(&mut tape, &store);
            let ctx = ForwardCtx::build(&mut tape, &cfg, &masks);
            let rt = PriorRuntime::register(
                &mut tape,
                &store,
                &spec,
                &params,
                cfg.n_channels,
                cfg.n_patches,
                cfg.patch_len,
            )
            .unwrap();
            let xid = tape.constant(x.clone());
            let mut state = init_state(&mut tape, &cfg, &bt, xid).unwrap();
            mfvi_iterate(&mut tape, &cfg, &bt, &ctx, &mut state, Some(&rt), cfg.k_iters)
                .unwrap();
            let head = bank.forecast_head(&mut tape, &store);
            let pred = forecast(&mut tape, &head, state.z).unwrap();
            let tid = tape.constant(target.clone());
            let loss = tape.mse(pred, tid).unwrap();
            store.zero_grads();
            tape.backward(loss, &mut store).unwrap();
        }
        let ids = store.ids();
        finite_diff_check(&mut store, &ids, 1e-5, 2, run).unwrap()
    };

    // (b) One autoregressive training step. The teacher is a stop-gradient
    // target, so the probe freezes it at the unperturbed parameters.
    let score_ar = {
        let mut cfg = ModelConfig::tiny(2, 3);
        cfg.d = 4;
        cfg.d_ff = 4;
        cfg.n_heads = 2;
        let ar_cfg = ArConfig::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut store = ParamStore::<f64>::new();
        let bank = FactorBank::new(&mut store, &cfg, "", &mut rng).unwrap();
        let ar = ArParams::new(&mut store, &cfg, "", &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[1, 2, 3, cfg.patch_len], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[1, 2, 2, cfg.patch_len], 1.0, &mut rng);
        let frozen = {
            let mut tape = Tape::new();
            let bt = bank.register(&mut tape, &store);
            let xid = tape.constant(x.clone());
            let yid = tape.constant(y.clone());
            let t = teacher_targets(&mut tape, &cfg, &ar_cfg, &bt, xid, yid).unwrap();
            tape.value(t).clone()
        };
        let run = |store: &ParamStore<f64>| -> stpt_core::error::Result<f64> {
            let mut tape = Tape::new();
            let bt = bank.register(&mut tape, store);
            let art = ar.register(&mut tape, store);
            let head = bank.patch_head(&mut tape, store);
            let xid = tape.constant(x.clone());
            let yid = tape.constant(y.clone());
            let tid = tape.constant(frozen.clone());
            let loss =
                student_loss(&mut tape, &cfg, &ar_cfg, &bt, &art, &head, xid, yid, tid)?;
            Ok(tape.value(loss.total).data()[0])
        };
        {
            let mut tape = Tape::new();
            let xid = tape.constant(x.clone());
            let yid = tape.constant(y.clone());
            let loss =
                training_step(&mut tape, &cfg, &ar_cfg, &bank, &store, &ar, xid, yid).unwrap();
            store.zero_grads();
            tape.backward(loss.total, &mut store).unwrap();
        }
        let ids = store.ids();
        finite_diff_check(&mut store, &ids, 1e-5, 2, run).unwrap()
    };

    // (c) One denoising step of the conditional generator, away from the
    // neutral initialization so every modulation pathway is active.
    let score_gen = {
        let cfg = ModelConfig::tiny(3, 4);
        let gcfg = GenConfig { t_train: 40, sample_steps: 8, ..GenConfig::default() };
        let sched = DiffusionSchedule::quadratic(&gcfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut store = ParamStore::<f64>::new();
        let bank = FactorBank::new(&mut store, &cfg, "", &mut rng).unwrap();
        let fg = FgParams::new(&mut store, &cfg, 6, "", &mut rng).unwrap();
        for id in store.ids() {
            for v in store.value_mut(id).data_mut() {
                *v += 0.05 * rng.gen::<f64>() - 0.025;
            }
        }
        let x0 = Tensor::<f64>::randn(&[1, 3, 4, cfg.patch_len], 1.0, &mut rng);
        let noise = Tensor::<f64>::randn(&[1, 3, 4, cfg.patch_len], 1.0, &mut rng);
        let c = Tensor::<f64>::randn(&[1, 6], 1.0, &mut rng);
        let t_step = 13usize;
        let run = |store: &ParamStore<f64>| -> stpt_core::error::Result<f64> {
            let mut tape = Tape::new();
            let cid = tape.constant(c.clone());
            let loss = diffusion_loss(
                &mut tape,
                &cfg,
                &gcfg,
                &sched,
                &bank,
                &fg,
                store,
                &x0,
                Some(cid),
                t_step,
                &noise,
            )?;
            Ok(tape.value(loss.total).data()[0])
        };
        {
            let mut tape = Tape::new();
            let cid = tape.constant(c.clone());
            let loss = diffusion_loss(
                &mut tape,
                &cfg,
                &gcfg,
                &sched,
                &bank,
                &fg,
                &store,
                &x0,
                Some(cid),
                t_step,
                &noise,
            )
            .unwrap();
            store.zero_grads();
            tape.backward(loss.total, &mut store).unwrap();
        }
        let ids = store.ids();
        finite_diff_check(&mut store, &ids, 1e-5, 2, run).unwrap()
    };

    let secs = t0.elapsed().as_secs_f64();
    let worst = score_forward.score.max(score_ar.score).max(score_gen.score);
    let checked = score_forward.checked + score_ar.checked + score_gen.checked;
    let ok = worst < 1e-4 && secs < 120.0;
    report(
        5,
        "finite-difference gradients",
        ok,
        &format!(
            "{} elements over forward/autoregressive/denoise, worst {:.2e}",
            checked, worst
        ),
        secs,
    );
    assert!(ok, "worst fd score {:.2e}", worst);
}

// ── 6: prior mechanics ───────────────────────────────────────────────────

#[test]
fn criterion_06_prior_mechanics() {
    let t0 = Instant::now();
    let mut notes: Vec<String> = Vec::new();
    let mut ok = true;

    // Periodicity: unit diagonal, bounded entries, exact unit peaks at every
    // multiple of the patch-scale period, all-ones fallback when undeclared.
    {
        let m = periodicity_matrix::<f64>(&[24.0], 12, 8);
        let mut dev = 0.0f64;
        for t in 0..12 {
            dev = dev.max((m.at(&[t, t]) - 1.0).abs());
            for s in 0..12 {
                if m.at(&[t, s]).abs() > 1.0 + 1e-12 {
                    ok = false;
                }
            }
        }
        for &k in &[3usize, 6, 9] {
            dev = dev.max((m.at(&[0, k]) - 1.0).abs());
        }
        ok &= dev < 1e-12;
        ok &= periodicity_matrix::<f64>(&[], 6, 8).data().iter().all(|&v| v == 1.0);
        notes.push(format!("period dev {:.1e}", dev));
    }

    // Lag: a fractional delay is the convex split of its integer neighbours
    // (weights summing to one), and an integer delay hits a single target.
    {
        let n = 2;
        let p = 5;
        let d = 4;
        let msg_for = |tau: f64| -> Tensor<f64> {
            let spec = PriorSpec {
                lag: Some(LagSpec {
                    relations: vec![LagRelation { src: 0, dst: 1, tau }],
                    eta: 2.0,
                }),
                ..Default::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(61);
            let mut store = ParamStore::<f64>::new();
            let params = PriorParams::new(&mut store, &spec, d, n, "", &mut rng).unwrap();
            let mut tape = Tape::new();
            let rt =
                PriorRuntime::register(&mut tape, &store, &spec, &params, n, p, 8).unwrap();
            let mut zr = ChaCha8Rng::seed_from_u64(62);
            let z = tape.constant(Tensor::randn(&[1, n, p, d], 1.0, &mut zr));
            let mut qm = None;
            let msgs = rt.messages(&mut tape, z, &mut qm).unwrap();
            tape.value(msgs[0]).clone()
        };
        let m8 = msg_for(8.0);
        let m16 = msg_for(16.0);
        let m12 = msg_for(12.0);
        let mut interp = 0.0f64;
        for ((a, b), c) in m8.data().iter().zip(m16.data()).zip(m12.data()) {
            interp = interp.max((0.5 * (a + b) - c).abs());
        }
        let mut stray = 0.0f64;
        for t in 0..p {
            for a in 0..d {
                stray = stray.max(m8.at(&[0, 0, t, a]).abs());
            }
        }
        for a in 0..d {
            stray = stray.max(m8.at(&[0, 1, 0, a]).abs());
        }
        ok &= interp < 1e-12 && stray == 0.0;
        notes.push(format!("lag interp {:.1e}, stray {:.1e}", interp, stray));
    }

    // Trend: the motif belief stays a distribution through every update.
    {
        let spec = PriorSpec { trend: Some(TrendSpec { d_m: 6 }), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let mut store = ParamStore::<f64>::new();
        let params = PriorParams::new(&mut store, &spec, 4, 2, "", &mut rng).unwrap();
        let mut tape = Tape::new();
        let rt = PriorRuntime::register(&mut tape, &store, &spec, &params, 2, 3, 8).unwrap();
        let z = tape.constant(Tensor::randn(&[1, 2, 3, 4], 1.0, &mut rng));
        let mut qm = None;
        let mut dev = 0.0f64;
        for _ in 0..3 {
            rt.messages(&mut tape, z, &mut qm).unwrap();
            for row in tape.value(qm.unwrap()).data().chunks(6) {
                let s: f64 = row.iter().sum();
                dev = dev.max((s - 1.0).abs());
            }
        }
        ok &= dev < 1e-12;
        notes.push(format!("trend row dev {:.1e}", dev));
    }

    // Channel independence: cross-group candidates get exactly zero mass in
    // a live forward pass.
    {
        let cfg = ModelConfig::tiny(3, 4);
        let (store, bank, mut rng) = fresh_bank(&cfg, 64);
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let bt = bank.register(&mut tape, &store);
        let masks = MaskSet {
            time: None,
            chan: Some(indep_mask(&[vec![0, 1], vec![2]], 3).unwrap()),
        };
        let ctx = ForwardCtx::build(&mut tape, &cfg, &masks);
        let x = tape.constant(Tensor::randn(&[1, 3, 4, cfg.patch_len], 1.0, &mut rng));
        let mut state = init_state(&mut tape, &cfg, &bt, x).unwrap();
        mfvi_iterate(&mut tape, &cfg, &bt, &ctx, &mut state, None, 2).unwrap();
        let p = cfg.n_patches;
        let width = p + cfg.n_channels;
        let mut cross = 0.0f64;
        for &qh in &state.qh {
            for (r, row) in tape.value(qh).data().chunks(width).enumerate() {
                let i_ch = (r / p) % cfg.n_channels;
                for j in 0..cfg.n_channels {
                    if (i_ch < 2) != (j < 2) {
                        cross = cross.max(row[p + j].abs());
                    }
                }
            }
        }
        ok &= cross == 0.0;
        notes.push(format!("cross-group mass {:.1e}", cross));
    }

    let secs = t0.elapsed().as_secs_f64();
    let ok = ok && secs < 10.0;
    report(6, "prior mechanics", ok, &notes.join("; "), secs);
    assert!(ok);
}

// ── 7: dataset oracles ───────────────────────────────────────────────────

#[test]
fn criterion_07_dataset_oracles() {
    let t0 = Instant::now();
    let mut ok = true;
    let mut notes = Vec::new();

    let lag = generate(&SynthSpec::new(SynthTask::Lag, 100, 71).noiseless()).unwrap();
    let mut misses = 0usize;
    for s in 0..lag.n_samples() {
        for pair in &lag.pairs {
            if lag_pair_argmax(&lag, s, pair) != 8 {
                misses += 1;
            }
        }
    }
    ok &= misses == 0 && lag.pairs.len() == 3;
    notes.push(format!("lag argmax misses {}/300", misses));

    let per = generate(&SynthSpec::new(SynthTask::Periodicity, 10, 72).noiseless()).unwrap();
    let mut bad_bins = 0usize;
    for s in 0..per.n_samples() {
        for (ch, want) in [(0usize, 8usize), (1, 16), (2, 4)] {
            if top_power_bin(&per.series(s, ch)) != want {
                bad_bins += 1;
            }
        }
    }
    ok &= bad_bins == 0;
    notes.push(format!("fft bin misses {}", bad_bins));

    let resid = noise_residual_std(&SynthSpec::new(SynthTask::Trend, 100, 73)).unwrap();
    ok &= (resid - 0.1).abs() <= 0.01;
    notes.push(format!("trend residual {:.4}", resid));

    let secs = t0.elapsed().as_secs_f64();
    let ok = ok && secs < 30.0;
    report(7, "dataset oracles", ok, &notes.join("; "), secs);
    assert!(ok);
}

// ── 8 and 9: desk-scale prior studies on the lag task ────────────────────

struct LagStudy {
    vanilla: Vec<f64>,
    lag: Vec<f64>,
    indep: Vec<f64>,
    wall: f64,
}

static LAG_STUDY: OnceLock<LagStudy> = OnceLock::new();

/// Nine full trainings (vanilla, +lag, +indep at three seeds each), shared
/// between the two criteria that read them.
fn lag_study() -> &'static LagStudy {
    LAG_STUDY.get_or_init(|| {
        let t0 = Instant::now();
        let ds = generate(&SynthSpec::new(SynthTask::Lag, 150, 42)).unwrap();
        let mcfg = forecaster_model(6);
        let tcfg = TrainConfig::fast();
        let mut study =
            LagStudy { vanilla: Vec::new(), lag: Vec::new(), indep: Vec::new(), wall: 0.0 };
        for &seed in &SEEDS3 {
            let (_, v) = train_and_eval(&mcfg, &tcfg, Variant::Vanilla, &ds, seed).unwrap();
            let (_, l) = train_and_eval(&mcfg, &tcfg, Variant::Lag, &ds, seed).unwrap();
            let (_, i) = train_and_eval(&mcfg, &tcfg, Variant::Indep, &ds, seed).unwrap();
            study.vanilla.push(v.mse);
            study.lag.push(l.mse);
            study.indep.push(i.mse);
        }
        study.wall = t0.elapsed().as_secs_f64();
        study
    })
}

#[test]
fn criterion_08_lag_prior_beats_vanilla() {
    let s = lag_study();
    let mv = mean(&s.vanilla);
    let ml = mean(&s.lag);
    let gain = (mv - ml) / mv;
    let ok = ml < mv && gain >= 0.05 && s.wall < 1200.0;
    report(
        8,
        "lag prior gain at desk scale",
        ok,
        &format!("+lag mse {:.4} vs vanilla {:.4}, {:.1}% better, 3 seeds", ml, mv, gain * 100.0),
        s.wall,
    );
    assert!(ok, "+lag {:.4} vanilla {:.4} gain {:.3}", ml, mv, gain);
}

#[test]
fn criterion_09_indep_prior_is_null_on_lag() {
    let s = lag_study();
    let mv = mean(&s.vanilla);
    let mi = mean(&s.indep);
    let drift = (mi - mv).abs() / mv;
    let ok = drift <= 0.05;
    report(
        9,
        "independence prior null effect",
        ok,
        &format!("+indep mse {:.4} vs vanilla {:.4}, {:.2}% apart (shared runs)", mi, mv, drift * 100.0),
        0.0,
    );
    assert!(ok, "+indep {:.4} vanilla {:.4} drift {:.3}", mi, mv, drift);
}

// ── 10: trend gap grows with the noise level ─────────────────────────────

#[test]
fn criterion_10_trend_gap_expands_with_noise() {
    let t0 = Instant::now();
    let ds = generate(&SynthSpec::new(SynthTask::Trend, 150, 42)).unwrap();
    let rows = noise_sweep(
        &forecaster_model(10),
        &TrainConfig::fast(),
        Variant::Trend,
        &ds,
        &[0.1, 0.8],
        &SEEDS3,
    )
    .unwrap();
    let (d_low, d_high) = (rows[0].delta_mse, rows[1].delta_mse);
    let secs = t0.elapsed().as_secs_f64();
    let ok = d_low > 0.0 && d_high > d_low && secs < 1800.0;
    report(
        10,
        "trend gap expands with noise",
        ok,
        &format!("delta at 0.1 = {:+.4}, at 0.8 = {:+.4}, 3 seeds", d_low, d_high),
        secs,
    );
    assert!(ok, "delta(0.1) {:+.4} delta(0.8) {:+.4}", d_low, d_high);
}

// ── 11: conditional and unconditional denoisers agree at initialization ──

#[test]
fn criterion_11_neutral_mix_identity() {
    let t0 = Instant::now();
    let cfg = ModelConfig::tiny(3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let mut store = ParamStore::<f64>::new();
    let bank = FactorBank::new(&mut store, &cfg, "", &mut rng).unwrap();
    let fg = FgParams::new(&mut store, &cfg, 6, "", &mut rng).unwrap();
    let gcfg = GenConfig { t_train: 40, sample_steps: 8, ..GenConfig::default() };
    let x = Tensor::randn(&[1, 3, 4, cfg.patch_len], 1.0, &mut rng);
    let c = Tensor::randn(&[1, 6], 1.0, &mut rng);

    let mut tape = Tape::new();
    let xid = tape.constant(x);
    let cid = tape.constant(c);
    let cond =
        denoise_v(&mut tape, &cfg, &gcfg, &bank, &fg, &store, xid, Some(cid), 13).unwrap();
    let bt = bank.register(&mut tape, &store);
    let head = bank.patch_head(&mut tape, &store);
    let plain = conditional_forward(&mut tape, &cfg, &bt, &head, None, xid, cfg.k_iters).unwrap();
    let identical = tape
        .value(cond)
        .data()
        .iter()
        .zip(tape.value(plain).data())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let mut astore = ParamStore::<f64>::new();
    let at = AttrParams::new(&mut astore, &[3, 4], 5, AttrMode::Independent, "", &mut rng)
        .unwrap();
    let mut tape = Tape::new();
    let att = at.register(&mut tape, &astore);
    let enc = encode_attrs(&mut tape, &att, &[2, 1]).unwrap();
    let block = tape.slice(enc, 1, 5, 5).unwrap();
    let sq = tape.mul(block, block).unwrap();
    let loss = tape.sum_all(sq);
    astore.zero_grads();
    tape.backward(loss, &mut astore).unwrap();
    let cross_zero = astore.grad(at.tables[0]).data().iter().all(|&v| v == 0.0);

    let secs = t0.elapsed().as_secs_f64();
    let ok = identical && cross_zero && secs < 10.0;
    report(
        11,
        "neutral-mix identity",
        ok,
        &format!("bit-identical {}, cross-attribute grads zero {}", identical, cross_zero),
        secs,
    );
    assert!(ok);
}

// ── 12: DDIM and v-parameterization round trips ──────────────────────────

#[test]
fn criterion_12_ddim_round_trip() {
    let t0 = Instant::now();
    let gcfg = GenConfig { t_train: 40, sample_steps: 8, ..GenConfig::default() };
    let sched = DiffusionSchedule::quadratic(&gcfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(121);
    let x0 = Tensor::<f64>::randn(&[2, 12], 1.0, &mut rng);
    let noise = Tensor::<f64>::randn(&[2, 12], 1.0, &mut rng);
    let mut recon = 0.0f64;
    let mut v_trip = 0.0f64;
    for t in [0usize, 17, 39] {
        let x_t = sched.q_sample(&x0, t, &noise).unwrap();
        let v = sched.v_target(&x0, &noise, t).unwrap();
        v_trip = v_trip.max(sched.x0_from_v(&x_t, &v, t).unwrap().max_abs_diff(&x0));
        recon = recon.max(sched.ddim_step(&x_t, &v, t, None).unwrap().max_abs_diff(&x0));
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = recon <= 1e-10 && v_trip <= 1e-12 && secs < 1.0;
    report(
        12,
        "ddim round trip",
        ok,
        &format!("oracle recon {:.1e}, v round trip {:.1e}", recon, v_trip),
        secs,
    );
    assert!(ok);
}

// ── 13: rollout determinism and cache integrity ──────────────────────────

#[test]
fn criterion_13_rollout_determinism_and_cache() {
    let t0 = Instant::now();
    let mut cfg = ModelConfig::tiny(2, 4);
    cfg.k_iters = 2;
    let ar_cfg = ArConfig::new(3);
    let mut rng = ChaCha8Rng::seed_from_u64(131);
    let mut store = ParamStore::<f64>::new();
    let bank = FactorBank::new(&mut store, &cfg, "", &mut rng).unwrap();
    let ar_params = ArParams::new(&mut store, &cfg, "", &mut rng).unwrap();
    let x = Tensor::randn(&[1, 2, 4, cfg.patch_len], 1.0, &mut rng);

    let roll = || -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let bt = bank.register(&mut tape, &store);
        let ar = ar_params.register(&mut tape, &store);
        let head = bank.patch_head(&mut tape, &store);
        let xid = tape.constant(x.clone());
        let hist = causal_encoder(&mut tape, &cfg, &bt, xid, ar_cfg.k_enc).unwrap();
        let out = rollout(&mut tape, &cfg, &ar_cfg, &bt, &ar, &head, xid).unwrap();
        (
            tape.value(out.y_hat).clone(),
            tape.value(out.cache).clone(),
            tape.value(hist.z).clone(),
        )
    };
    let (y1, cache, hist) = roll();
    let (y2, _, _) = roll();
    let deterministic = y1.data().iter().zip(y2.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let mut cache_ok = true;
    for c in 0..2 {
        for t in 0..cfg.n_patches {
            for a in 0..cfg.d {
                if cache.at(&[0, c, t, a]).to_bits() != hist.at(&[0, c, t, a]).to_bits() {
                    cache_ok = false;
                }
            }
        }
    }

    let secs = t0.elapsed().as_secs_f64();
    let ok = deterministic && cache_ok && secs < 5.0;
    report(
        13,
        "rollout determinism and cache integrity",
        ok,
        &format!("bit-identical {}, history slices intact {}", deterministic, cache_ok),
        secs,
    );
    assert!(ok);
}
