use std::io::Write;

use log::warn;
use rayon::prelude::*;

use super::train_and_eval;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::filtering::FilterMode;
use crate::spectral::Backend;
use crate::synthbench::EvalReport;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: FilterMode,
    pub backend: Backend,
    pub final_loss: f64,
    pub eval: EvalReport,
}

/// Trains and scores one adapter model per (mode, backend) pair. Rows come
/// back in the order of `modes` then `backends`.
pub fn ablate(cfg: &RunConfig, modes: &[FilterMode], backends: &[Backend]) -> Result<Vec<AblationRow>> {
    if modes.is_empty() || backends.is_empty() {
        return Err(Error::Config("ablation needs at least one mode and one backend".into()));
    }
    let cells: Vec<(FilterMode, Backend)> = modes
        .iter()
        .flat_map(|&m| backends.iter().map(move |&b| (m, b)))
        .collect();
    cells
        .par_iter()
        .map(|&(mode, backend)| {
            let mut c = cfg.clone();
            c.adapter.enabled = true;
            c.filter.mode = mode;
            c.filter.backend = backend;
            let out = train_and_eval(&c)?;
            Ok(AblationRow {
                mode,
                backend,
                final_loss: out.train.final_loss,
                eval: out.eval,
            })
        })
        .collect()
}

fn domain_header(report: Option<&EvalReport>) -> String {
    report
        .map(|r| {
            r.domains
                .iter()
                .filter(|d| d.domain != "clean")
                .map(|d| format!(",{}", d.domain))
                .collect()
        })
        .unwrap_or_default()
}

fn domain_values(report: &EvalReport) -> String {
    report
        .domains
        .iter()
        .filter(|d| d.domain != "clean")
        .map(|d| format!(",{}", d.summary.miou))
        .collect()
}

/// `mode,backend,final_loss,clean_miou,avg_miou,<domains>`
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut out: W) -> Result<()> {
    writeln!(
        out,
        "mode,backend,final_loss,clean_miou,avg_miou{}",
        domain_header(rows.first().map(|r| &r.eval))
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}{}",
            r.mode,
            r.backend,
            r.final_loss,
            r.eval.clean_miou(),
            r.eval.corrupted_average(),
            domain_values(&r.eval)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub rl: f64,
    pub rh: f64,
    pub eval: EvalReport,
}

/// One run per valid `(R_L, R_H)` pair, sorted by `R_L` then `R_H`.
/// Pairs with `R_L ≤ 0` or `R_L ≥ R_H` are skipped with a warning.
pub fn sweep(cfg: &RunConfig, rl_grid: &[f64], rh_grid: &[f64]) -> Result<Vec<SweepRow>> {
    let mut pairs = Vec::new();
    for &rl in rl_grid {
        for &rh in rh_grid {
            if rl > 0.0 && rl < rh && rh.is_finite() {
                pairs.push((rl, rh));
            } else {
                warn!("skipping cutoff pair rl={rl}, rh={rh}: need 0 < rl < rh");
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Config("no valid cutoff pair in the sweep grid".into()));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pairs.dedup();
    pairs
        .par_iter()
        .map(|&(rl, rh)| {
            let mut c = cfg.clone();
            c.adapter.enabled = true;
            c.filter.rl = rl;
            c.filter.rh = rh;
            Ok(SweepRow {
                rl,
                rh,
                eval: train_and_eval(&c)?.eval,
            })
        })
        .collect()
}

/// `rl,rh,avg_miou,<domains>`
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "rl,rh,avg_miou{}", domain_header(rows.first().map(|r| &r.eval)))?;
    for r in rows {
        writeln!(
            out,
            "{},{},{}{}",
            r.rl,
            r.rh,
            r.eval.corrupted_average(),
            domain_values(&r.eval)
        )?;
    }
    Ok(())
}
