//! `archsearch analyze`: thin wrappers over the analysis toolkit.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use archsearch_core::analysis::{
    first_crossing, fit_power_law, pareto_front, reference_curves, savings_from_offset, speedup_factor, AnalysisError,
    ComputeAxis, FitMethod, LossCurve, ParetoPoint,
};
use archsearch_core::trainer::CURVE_HEADER;
use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::run_dir::RunDir;

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Power law `L = a C^-k` per input.
    Fit,
    /// Baseline compute over the treatment's compute at the baseline's final loss.
    Speedup,
    /// Compute multiple from the offset of two parallel power laws.
    Savings,
    /// Non-dominated points of a `label,seconds,loss` table.
    Pareto,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Step,
    Seconds,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Curve CSVs or train run directories. Speedup and savings take the
    /// baseline first, then the treatment.
    inputs: Vec<PathBuf>,
    /// Compute axis when reading trainer curves.
    #[arg(long, value_enum, default_value_t = Axis::Step)]
    axis: Axis,
    /// Fit only the lower frontier of each curve.
    #[arg(long)]
    frontier: bool,
    /// Largest relative exponent mismatch accepted in savings mode.
    #[arg(long, default_value_t = 0.1)]
    tolerance: f64,
    /// Speedup mode: use the shipped reference curves instead of inputs.
    #[arg(long)]
    reference: bool,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Exit nonzero when a speedup is not reached.
    #[arg(long)]
    strict: bool,
}

#[derive(Serialize)]
struct Snapshot {
    mode: Mode,
    inputs: Vec<(String, String)>,
    axis: Axis,
    frontier: bool,
    tolerance: f64,
    reference: bool,
}

fn input_file(p: &Path) -> PathBuf {
    if p.is_dir() { p.join("curve.csv") } else { p.to_path_buf() }
}

fn label_of(p: &Path) -> String {
    let named = if p.is_dir() { p } else { p.parent().filter(|d| d.join("config.json").exists()).unwrap_or(p) };
    named.file_stem().or_else(|| named.file_name()).map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into())
}

/// Trainer CSVs (with the curve header) or plain `compute,loss` tables.
fn read_curve(p: &Path, axis: Axis) -> Result<LossCurve> {
    let file = input_file(p);
    let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    let label = label_of(p);
    let header = text.lines().next().unwrap_or("").trim();
    if header == CURVE_HEADER {
        let axis = match axis {
            Axis::Step => ComputeAxis::Step,
            Axis::Seconds => ComputeAxis::WallSeconds,
        };
        return LossCurve::from_csv(label, &text, axis).with_context(|| file.display().to_string());
    }
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        match (cols.first().map(|c| c.parse::<f64>()), cols.get(1).map(|c| c.parse::<f64>())) {
            (Some(Ok(c)), Some(Ok(l))) => points.push((c, l)),
            _ if n == 0 => continue,
            _ if line.trim().is_empty() => continue,
            _ => bail!("{}: line {}: expected compute,loss", file.display(), n + 1),
        }
    }
    LossCurve::new(label, points).with_context(|| file.display().to_string())
}

fn read_pareto(p: &Path) -> Result<Vec<ParetoPoint>> {
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() < 3 || line.trim().is_empty() {
            continue;
        }
        match (cols[1].parse(), cols[2].parse()) {
            (Ok(seconds), Ok(loss)) => out.push(ParetoPoint { label: cols[0].into(), seconds, loss }),
            _ if n == 0 => continue,
            _ => bail!("{}: line {}: expected label,seconds,loss", p.display(), n + 1),
        }
    }
    Ok(out)
}

fn fit_points(c: &LossCurve, frontier: bool) -> Vec<(f64, f64)> {
    if frontier {
        archsearch_core::analysis::lower_frontier(&c.points)
    } else {
        c.points.clone()
    }
}

fn speedup_json(base: &LossCurve, treat: &LossCurve) -> (serde_json::Value, bool) {
    let target = base.final_loss();
    match speedup_factor(base, treat) {
        Ok(s) => (
            serde_json::json!({
                "baseline": base.label, "treatment": treat.label, "speedup": s,
                "target_loss": target, "crossing_compute": first_crossing(treat, target),
            }),
            true,
        ),
        Err(AnalysisError::NotReached { target, best_loss }) => (
            serde_json::json!({
                "baseline": base.label, "treatment": treat.label, "speedup": null,
                "not_reached": { "target_loss": target, "best_loss": best_loss },
            }),
            false,
        ),
        Err(e) => (serde_json::json!({ "baseline": base.label, "treatment": treat.label, "error": e.to_string() }), false),
    }
}

pub fn cmd_analyze(a: &AnalyzeArgs, root: &Path) -> Result<i32> {
    let needed = match a.mode {
        Mode::Fit | Mode::Pareto => 1,
        Mode::Speedup if a.reference => 0,
        Mode::Speedup | Mode::Savings => 2,
    };
    if a.inputs.len() < needed || (matches!(a.mode, Mode::Speedup | Mode::Savings) && !a.reference && a.inputs.len() != 2) {
        bail!("{} mode needs {needed} input(s), got {}", serde_json::to_value(a.mode)?.as_str().unwrap_or("this"), a.inputs.len());
    }
    let mut inputs = Vec::new();
    for p in &a.inputs {
        let f = input_file(p);
        let bytes = std::fs::read(&f).with_context(|| format!("reading {}", f.display()))?;
        inputs.push((f.display().to_string(), crate::run_dir::sha256_hex(&bytes)));
    }
    let snap = Snapshot {
        mode: a.mode,
        inputs,
        axis: a.axis,
        frontier: a.frontier,
        tolerance: a.tolerance,
        reference: a.reference,
    };
    let dir = RunDir::create("analyze", &snap, a.run_dir.as_deref(), root)?;
    let mut failed = false;
    let out = match a.mode {
        Mode::Fit => {
            let mut rows = Vec::new();
            let mut csv = String::from("label,a,k,log_rms_residual\n");
            for p in &a.inputs {
                let c = read_curve(p, a.axis)?;
                let f = fit_power_law(&fit_points(&c, a.frontier), FitMethod::default())?;
                println!("{}: a = {:.9}, k = {:.9}", c.label, f.a, f.k);
                csv.push_str(&format!("{},{},{},{}\n", c.label, f.a, f.k, f.residual));
                rows.push(serde_json::json!({ "label": c.label, "fit": f }));
            }
            dir.write_text("fits.csv", &csv)?;
            serde_json::json!({ "mode": "fit", "fits": rows })
        }
        Mode::Speedup if a.reference => {
            let refs = reference_curves();
            let mut rows = Vec::new();
            for g in &refs.groups {
                let base = g.baseline.curve();
                for t in &g.treatments {
                    let (v, ok) = speedup_json(&base, &t.curve());
                    match v["speedup"].as_f64() {
                        Some(s) => println!("{:<28} {:<28} {s:.3}x", g.name, t.label),
                        None => println!("{:<28} {:<28} not reached", g.name, t.label),
                    }
                    failed |= !ok;
                    rows.push(serde_json::json!({ "group": g.name, "result": v }));
                }
            }
            serde_json::json!({ "mode": "speedup", "reference": true, "results": rows })
        }
        Mode::Speedup => {
            let (base, treat) = (read_curve(&a.inputs[0], a.axis)?, read_curve(&a.inputs[1], a.axis)?);
            let (v, ok) = speedup_json(&base, &treat);
            match v["speedup"].as_f64() {
                Some(s) => println!(
                    "speedup {s} (treatment reaches loss {:.6} at compute {})",
                    base.final_loss(),
                    v["crossing_compute"]
                ),
                None => println!("speedup not reached: treatment never gets to loss {:.6}", base.final_loss()),
            }
            failed = !ok;
            serde_json::json!({ "mode": "speedup", "result": v })
        }
        Mode::Savings => {
            let (base, treat) = (read_curve(&a.inputs[0], a.axis)?, read_curve(&a.inputs[1], a.axis)?);
            let fb = fit_power_law(&fit_points(&base, a.frontier), FitMethod::default())?;
            let ft = fit_power_law(&fit_points(&treat, a.frontier), FitMethod::default())?;
            let s = savings_from_offset(&fb, &ft, a.tolerance)?;
            println!("compute multiple b = {:.6} (shared k = {:.6})", s.b, s.k);
            serde_json::json!({ "mode": "savings", "baseline_fit": fb, "treatment_fit": ft, "savings": s })
        }
        Mode::Pareto => {
            let mut points = Vec::new();
            for p in &a.inputs {
                points.extend(read_pareto(p)?);
            }
            let front = pareto_front(&points);
            let mut csv = String::from("label,seconds,loss\n");
            for p in &front {
                println!("{:<24} {:>12} {:>12}", p.label, p.seconds, p.loss);
                csv.push_str(&format!("{},{},{}\n", p.label, p.seconds, p.loss));
            }
            let dropped: Vec<&str> =
                points.iter().filter(|p| !front.contains(p)).map(|p| p.label.as_str()).collect();
            dir.write_text("pareto.csv", &csv)?;
            serde_json::json!({ "mode": "pareto", "front": front, "dominated": dropped })
        }
    };
    dir.write_json("analysis.json", &out)?;
    println!("run directory {}", dir.path.display());
    Ok(if failed && a.strict { 1 } else { 0 })
}
