//! Subcommand implementations. Every command writes into a content-addressed
//! directory, is deterministic given config and seed, and touches nothing but
//! local files.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde_json::json;

use stpt_core::factor_gen::GenConfig;
use stpt_core::io::{
    append_results, fnv1a_64, load_dataset, read_results, save_dataset, summarize_results,
    write_series_csv, write_sidecar, write_trace_jsonl, ResultRow, SampleSidecar,
};
use stpt_core::latent_ar::ArConfig;
use stpt_core::synth::{add_noise, generate, SeriesDataset};
use stpt_core::train::{
    evaluate_ar, evaluate_forecaster, evaluate_generator, prior_spec_for, rollout_sample,
    run_grid, sample_conditional_seeded, train_forecaster, train_generator, train_latent_ar,
    MetricReport, Variant,
};
use stpt_core::verify::{all_passed, render_table, run_battery, VerifyOptions};

use crate::config::{ExperimentConfig, RunVariant};

pub struct Flags {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: usize,
    pub force: bool,
    pub out: Option<PathBuf>,
}

fn require_config(flags: &Flags) -> Result<ExperimentConfig> {
    let path = flags.config.as_deref().context("this command needs --config")?;
    ExperimentConfig::load(path)
}

fn out_root(cfg: &ExperimentConfig, flags: &Flags) -> PathBuf {
    flags
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn seeds_for(cfg: &ExperimentConfig, flags: &Flags) -> Vec<u64> {
    flags.seed.map(|s| vec![s]).unwrap_or_else(|| cfg.seeds.clone())
}

// ── gen-data ─────────────────────────────────────────────────────────────

pub fn cmd_gen_data(flags: &Flags) -> Result<i32> {
    let mut cfg = require_config(flags)?;
    if let Some(seed) = flags.seed {
        cfg.dataset_seed = seed;
    }
    let spec = cfg.synth_spec();
    let key = serde_json::to_vec(&spec)?;
    let dir = out_root(&cfg, flags)
        .join(format!("data-{}-{:016x}", cfg.task_slug(), fnv1a_64(&key)));
    if dir.join("manifest.json").exists() && !flags.force {
        let ds = load_dataset(&dir).context("existing archive failed verification")?;
        println!(
            "{}: {} samples already archived, skipping (--force regenerates)",
            dir.display(),
            ds.n_samples()
        );
        return Ok(0);
    }
    let t0 = Instant::now();
    let ds = generate(&spec)?;
    let manifest = save_dataset(&ds, &dir)?;
    println!(
        "wrote {} ({} samples x {} channels x {} steps, {:.1}s)",
        manifest.display(),
        ds.n_samples(),
        ds.n_channels(),
        ds.series_len(),
        t0.elapsed().as_secs_f64()
    );
    Ok(0)
}

// ── run / sweep-noise ────────────────────────────────────────────────────

#[derive(Clone, Copy)]
struct Cell {
    variant: RunVariant,
    sigma: f64,
    seed: u64,
}

struct CellOutcome {
    cell: Cell,
    report: Result<MetricReport, String>,
    wall: f64,
}

/// Trains one grid cell from scratch. Corruption noise (sigma > 0) reuses the
/// training seed, so the vanilla and variant rows of a sweep cell see the
/// same noisy copy.
fn run_cell(cfg: &ExperimentConfig, base: &SeriesDataset, cell: Cell) -> CellOutcome {
    let t0 = Instant::now();
    let report = (|| -> stpt_core::error::Result<MetricReport> {
        let owned;
        let ds = if cell.sigma > 0.0 {
            owned = add_noise(base, cell.sigma, cell.seed)?;
            &owned
        } else {
            base
        };
        let mcfg = cfg.model_config();
        match cell.variant {
            RunVariant::LatentAr => {
                let ar = cfg
                    .ar
                    .clone()
                    .unwrap_or_else(|| ArConfig::new(cfg.train.pred_len / mcfg.patch_len));
                let f = train_latent_ar(&mcfg, &cfg.train, &ar, ds, cell.seed)?;
                evaluate_ar(&f, &cfg.train, ds, ds.test.clone())
            }
            RunVariant::PtFg => {
                let gcfg = cfg.diffusion.clone().unwrap_or_default();
                let g = train_generator(
                    &mcfg,
                    &cfg.train,
                    &gcfg,
                    cfg.attr_mode,
                    cfg.attr_dim,
                    ds,
                    cell.seed,
                )?;
                evaluate_generator(&g, ds, ds.test.clone(), cell.seed)
            }
            other => {
                let variant = other.as_prior().expect("prior variant");
                let spec = match (&cfg.prior, variant) {
                    (Some(p), v) if v != Variant::Vanilla => p.clone(),
                    _ => prior_spec_for(variant, ds),
                };
                let f = train_forecaster(&mcfg, &cfg.train, &spec, ds, cell.seed)?;
                evaluate_forecaster(&f, &cfg.train, ds, ds.test.clone())
            }
        }
    })()
    .map_err(|e| e.to_string());
    CellOutcome { cell, report, wall: t0.elapsed().as_secs_f64() }
}

fn completed_cells(path: &Path) -> Result<HashSet<(String, u64, u64)>> {
    if !path.exists() {
        return Ok(HashSet::new());
    }
    Ok(read_results(path)?
        .into_iter()
        .map(|r| (r.variant, r.sigma.to_bits(), r.seed))
        .collect())
}

fn execute_grid(
    cfg: &ExperimentConfig,
    flags: &Flags,
    variants: &[RunVariant],
    sigmas: &[f64],
) -> Result<i32> {
    let ds = generate(&cfg.synth_spec())?;
    let dir = cfg.run_dir(&out_root(cfg, flags));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let results_path = dir.join("results.csv");
    if flags.force && results_path.exists() {
        fs::remove_file(&results_path)?;
    }
    let done = completed_cells(&results_path)?;

    let mut cells = Vec::new();
    let mut skipped = 0usize;
    for &sigma in sigmas {
        for &variant in variants {
            for &seed in &seeds_for(cfg, flags) {
                if done.contains(&(variant.label().to_string(), sigma.to_bits(), seed)) {
                    skipped += 1;
                } else {
                    cells.push(Cell { variant, sigma, seed });
                }
            }
        }
    }
    if skipped > 0 {
        println!("{} cells already recorded, skipping (--force reruns)", skipped);
    }

    let outcomes = run_grid(flags.jobs, cells, |cell| run_cell(cfg, &ds, cell))?;
    let mut rows = Vec::with_capacity(outcomes.len());
    let mut failures = 0usize;
    for o in &outcomes {
        let (mse, mae) = match &o.report {
            Ok(r) => (r.mse, r.mae),
            Err(msg) => {
                eprintln!(
                    "cell {}/sigma={}/seed={} failed: {}",
                    o.cell.variant.label(),
                    o.cell.sigma,
                    o.cell.seed,
                    msg
                );
                failures += 1;
                (f64::NAN, f64::NAN)
            }
        };
        println!(
            "{:10} sigma {:<4} seed {:<4} mse {:<10.4} mae {:<10.4} [{:.1}s]",
            o.cell.variant.label(),
            o.cell.sigma,
            o.cell.seed,
            mse,
            mae,
            o.wall
        );
        rows.push(ResultRow {
            task: cfg.task_slug().to_string(),
            variant: o.cell.variant.label().to_string(),
            n: cfg.n_samples,
            sigma: o.cell.sigma,
            seed: o.cell.seed,
            mse,
            mae,
            wall_time: o.wall,
        });
    }
    append_results(&results_path, &rows)?;
    write_grid_summary(cfg, &dir, &results_path)?;
    println!("results in {}", dir.display());
    if failures > 0 {
        eprintln!("{} of {} cells diverged", failures, outcomes.len());
        return Ok(1);
    }
    Ok(0)
}

/// Per-cell aggregates plus, when the vanilla baseline is present, the MSE
/// delta of every other variant against it at the same noise level.
fn write_grid_summary(cfg: &ExperimentConfig, dir: &Path, results: &Path) -> Result<()> {
    let rows = read_results(results)?;
    let cells = summarize_results(&rows);
    let mut deltas = Vec::new();
    for cell in &cells {
        if cell.variant == "vanilla" {
            continue;
        }
        if let Some(base) = cells
            .iter()
            .find(|c| c.variant == "vanilla" && c.sigma.to_bits() == cell.sigma.to_bits())
        {
            deltas.push(json!({
                "variant": cell.variant,
                "sigma": cell.sigma,
                "vanilla_mse": base.mse_mean,
                "variant_mse": cell.mse_mean,
                "delta_mse": base.mse_mean - cell.mse_mean,
            }));
        }
    }
    let summary = json!({
        "config_hash": format!("{:016x}", cfg.hash()),
        "task": cfg.task_slug(),
        "cells": cells,
        "deltas": deltas,
    });
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

pub fn cmd_run(flags: &Flags) -> Result<i32> {
    let cfg = require_config(flags)?;
    let variants: Vec<RunVariant> = match cfg.variant.as_prior() {
        Some(Variant::Vanilla) | None => vec![cfg.variant],
        Some(_) => vec![RunVariant::Vanilla, cfg.variant],
    };
    execute_grid(&cfg, flags, &variants, &[0.0])
}

pub fn cmd_sweep_noise(flags: &Flags) -> Result<i32> {
    let cfg = require_config(flags)?;
    match cfg.variant.as_prior() {
        Some(v) if v != Variant::Vanilla => {}
        _ => bail!(
            "sweep-noise contrasts a prior variant against vanilla; set variant to one of +period, +trend, +lag, +indep"
        ),
    }
    let sigmas = cfg.sigmas.clone();
    execute_grid(&cfg, flags, &[RunVariant::Vanilla, cfg.variant], &sigmas)
}

// ── rollout-ar ───────────────────────────────────────────────────────────

pub fn cmd_rollout_ar(flags: &Flags) -> Result<i32> {
    let cfg = require_config(flags)?;
    let ds = generate(&cfg.synth_spec())?;
    let mcfg = cfg.model_config();
    let seed = flags.seed.unwrap_or(cfg.seeds[0]);
    let ar = cfg
        .ar
        .clone()
        .unwrap_or_else(|| ArConfig::new(cfg.train.pred_len / mcfg.patch_len));
    let t0 = Instant::now();
    let f = train_latent_ar(&mcfg, &cfg.train, &ar, &ds, seed)?;
    let idx = ds.test.start;
    let (y, trace) = rollout_sample(&f, &cfg.train, &ds, idx)?;
    let report = evaluate_ar(&f, &cfg.train, &ds, idx..idx + 1)?;

    let dir = cfg
        .run_dir(&out_root(&cfg, flags))
        .join(format!("rollout-seed{}", seed));
    fs::create_dir_all(&dir)?;
    write_series_csv(&dir.join("prediction.csv"), &y)?;
    write_trace_jsonl(&dir.join("trace.jsonl"), &trace)?;
    fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&json!({
            "task": cfg.task_slug(),
            "seed": seed,
            "sample": idx,
            "mse": report.mse,
            "mae": report.mae,
            "best_val_mse": f.best_val_mse,
            "epochs_run": f.epochs_run,
        }))?,
    )?;
    println!(
        "rolled {} future patches for sample {} (mse {:.4}) into {} [{:.1}s]",
        trace.len(),
        idx,
        report.mse,
        dir.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(0)
}

// ── gen-conditional ──────────────────────────────────────────────────────

pub fn cmd_gen_conditional(flags: &Flags) -> Result<i32> {
    let cfg = require_config(flags)?;
    let ds = generate(&cfg.synth_spec())?;
    let mcfg = cfg.model_config();
    let seed = flags.seed.unwrap_or(cfg.seeds[0]);
    let gcfg: GenConfig = cfg.diffusion.clone().unwrap_or_default();
    let attrs = cfg
        .condition
        .clone()
        .unwrap_or_else(|| vec![0; ds.attr_cards.len()]);
    if attrs.len() != ds.attr_cards.len() {
        bail!(
            "condition needs {} attribute levels, got {}",
            ds.attr_cards.len(),
            attrs.len()
        );
    }
    for (k, (&a, &card)) in attrs.iter().zip(&ds.attr_cards).enumerate() {
        if a >= card {
            bail!("attribute {} level {} out of range (cardinality {})", k, a, card);
        }
    }

    let t0 = Instant::now();
    let g = train_generator(&mcfg, &cfg.train, &gcfg, cfg.attr_mode, cfg.attr_dim, &ds, seed)?;
    // Distinct stream for the draw so it does not replay initialization noise.
    let sample = sample_conditional_seeded(&g, &attrs, seed ^ 0x7361_6d70)?;

    let dir = cfg
        .run_dir(&out_root(&cfg, flags))
        .join(format!("sample-seed{}", seed));
    fs::create_dir_all(&dir)?;
    write_series_csv(&dir.join("series.csv"), &sample)?;
    write_sidecar(
        &dir.join("sidecar.json"),
        &SampleSidecar { condition: attrs.clone(), seed, guidance: gcfg.guidance_scale },
    )?;
    println!(
        "sampled condition {:?} ({} channels x {} steps) into {} [{:.1}s]",
        attrs,
        sample.shape()[0],
        sample.shape()[1],
        dir.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(0)
}

// ── verify ───────────────────────────────────────────────────────────────

pub fn cmd_verify(fault_causal_mask: bool) -> Result<i32> {
    if fault_causal_mask {
        println!("fault injection: causal mask corrupted on purpose");
    }
    let t0 = Instant::now();
    let outcomes = run_battery(&VerifyOptions { corrupt_causal_mask: fault_causal_mask });
    print!("{}", render_table(&outcomes));
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!(
        "{}/{} checks passed in {:.1}s",
        passed,
        outcomes.len(),
        t0.elapsed().as_secs_f64()
    );
    Ok(if all_passed(&outcomes) { 0 } else { 1 })
}
