//! `sweep`: error over a grid of step sizes, methods and seeds.

use std::path::Path;

use odeirls::estimate::Method;
use odeirls::ObservationSet;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{check_step, hash_json, ExperimentConfig};
use crate::error::CliError;
use crate::output::{num, write_atomic, write_json, Table};
use crate::run::run_fit;

pub struct SweepArgs {
    pub dts: Vec<f64>,
    pub methods: Option<Vec<Method>>,
    pub replicates: u64,
}

#[derive(Debug, Serialize)]
struct SweepPlan {
    config: ExperimentConfig,
    dts: Vec<f64>,
    methods: Vec<Method>,
    seeds: Vec<u64>,
}

#[derive(Debug, Serialize)]
struct CellFailure {
    dt: f64,
    method: Method,
    seed: u64,
    message: String,
}

#[derive(Debug, Serialize)]
struct SweepRecord<'a> {
    plan: &'a SweepPlan,
    config_hash: &'a str,
    cells: usize,
    failures: Vec<CellFailure>,
    elapsed_s: f64,
}

/// One row per `(dt, method, seed)` in that nesting order. Cells run in
/// parallel; a failed cell records `NaN` and the sweep carries on.
pub fn sweep_cmd(cfg: &ExperimentConfig, args: &SweepArgs, out: &Path) -> Result<(), CliError> {
    let start = std::time::Instant::now();
    if args.dts.is_empty() {
        return Err(CliError::Config("the dt list is empty".into()));
    }
    if args.replicates == 0 {
        return Err(CliError::Config("replicates must be at least 1".into()));
    }
    for &dt in &args.dts {
        check_step(cfg.h, dt)?;
    }
    let plan = SweepPlan {
        config: cfg.resolved(),
        dts: args.dts.clone(),
        methods: args.methods.clone().unwrap_or_else(|| vec![cfg.method]),
        seeds: (0..args.replicates).map(|r| cfg.seed + r).collect(),
    };
    let hash = hash_json(&plan);

    let protocol = cfg.protocol();
    let data: Vec<Result<ObservationSet, String>> = plan
        .seeds
        .par_iter()
        .map(|&seed| {
            protocol
                .generate_with_tolerance(seed, cfg.noise, cfg.reference_tol)
                .map(|d| d.observations)
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut cells = Vec::new();
    for &dt in &plan.dts {
        for &method in &plan.methods {
            for s in 0..plan.seeds.len() {
                cells.push((dt, method, s));
            }
        }
    }
    let results: Vec<Result<f64, String>> = cells
        .par_iter()
        .map(|&(dt, method, s)| {
            let obs = data[s].clone()?;
            let cell = ExperimentConfig {
                dt,
                method,
                seed: plan.seeds[s],
                ..cfg.clone()
            };
            let (result, failure) = run_fit(&cell, &protocol, obs).map_err(|e| e.to_string())?;
            if let Some(e) = failure {
                return Err(e.to_string());
            }
            protocol.error(&result.theta_hat).map_err(|e| e.to_string())
        })
        .collect();

    let mut table = Table::new(["dt", "method", "seed", "error"]);
    let mut failures = Vec::new();
    for (&(dt, method, s), r) in cells.iter().zip(results) {
        let seed = plan.seeds[s];
        let error = r.unwrap_or_else(|message| {
            eprintln!("warning: dt = {dt}, {method}, seed {seed} failed: {message}");
            failures.push(CellFailure { dt, method, seed, message });
            f64::NAN
        });
        table.push(vec![num(dt), method.to_string(), seed.to_string(), num(error)]);
    }
    let seed_label = format!("{}..={}", plan.seeds[0], plan.seeds[plan.seeds.len() - 1]);
    write_atomic(&out.join("sweep.csv"), &table.render(&hash, &seed_label))?;
    let n_failed = failures.len();
    write_json(
        &out.join("sweep.json"),
        &SweepRecord {
            plan: &plan,
            config_hash: &hash,
            cells: cells.len(),
            failures,
            elapsed_s: start.elapsed().as_secs_f64(),
        },
    )?;
    println!("wrote {} cells ({n_failed} failed) to {}", cells.len(), out.display());
    Ok(())
}
