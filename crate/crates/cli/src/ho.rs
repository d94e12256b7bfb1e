//! `ho`: closed-form mean squared errors for the harmonic oscillator.

use std::path::Path;

use nalgebra::Vector2;
use odeirls::inference::HoAnalysis;
use odeirls::Scheme;
use serde::Serialize;

use crate::config::hash_json;
use crate::error::CliError;
use crate::output::{num, write_atomic, Table};

#[derive(Debug, Clone, Serialize)]
pub struct HoArgs {
    pub schemes: Vec<Scheme>,
    pub dt: f64,
    pub h: f64,
    pub ks: Vec<usize>,
    pub theta: [f64; 2],
    pub gamma_sq: f64,
}

/// Expands `1,5,10..=20` style lists.
pub fn parse_ks(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = |item: &str| CliError::Config(format!("bad K value `{item}`"));
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        match item.split_once("..=") {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| bad(item))?;
                let b: usize = b.trim().parse().map_err(|_| bad(item))?;
                out.extend(a..=b);
            }
            None => out.push(item.parse().map_err(|_| bad(item))?),
        }
    }
    if out.is_empty() || out.contains(&0) {
        return Err(CliError::Config("K values must be positive".into()));
    }
    Ok(out)
}

/// Columns `K, ml, qml_<scheme>…`.
pub fn ho_table(args: &HoArgs) -> Result<Table, CliError> {
    if !(args.gamma_sq > 0.0) {
        return Err(CliError::Config("gamma_sq must be positive".into()));
    }
    let header = ["K".to_string(), "ml".to_string()]
        .into_iter()
        .chain(args.schemes.iter().map(|s| format!("qml_{s}")));
    let mut table = Table::new(header);
    let theta = Vector2::from(args.theta);
    for &k in &args.ks {
        let mut row = vec![k.to_string(), num(2.0 * args.gamma_sq / k as f64)];
        for &scheme in &args.schemes {
            let a = HoAnalysis::new(scheme, args.dt, args.h, k, theta, args.gamma_sq)?;
            row.push(num(a.mse_qml));
        }
        table.push(row);
    }
    Ok(table)
}

pub fn ho_cmd(args: &HoArgs, out: &Path) -> Result<(), CliError> {
    let table = ho_table(args)?;
    write_atomic(&out.join("ho.csv"), &table.render(&hash_json(args), "none"))?;
    println!("wrote {} rows to {}", args.ks.len(), out.display());
    Ok(())
}
