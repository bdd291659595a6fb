//! Power-law fits, speedup factors, compute savings and Pareto fronts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("fit failed: {0}")]
    FitFailed(String),
    #[error("treatment never reaches the target loss {target}; best was {best_loss}")]
    NotReached { target: f64, best_loss: f64 },
    #[error("fits are not parallel: exponents {k_baseline} and {k_treatment}")]
    AssumptionViolated { k_baseline: f64, k_treatment: f64 },
}

/// Validation loss against training compute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub label: String,
    /// `(compute, loss)` with compute strictly increasing.
    pub points: Vec<(f64, f64)>,
}

/// Which column of a trainer CSV is the compute axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComputeAxis {
    Step,
    WallSeconds,
}

impl LossCurve {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Result<Self, AnalysisError> {
        if points.is_empty() {
            return Err(AnalysisError::InvalidData("empty curve".into()));
        }
        if points.iter().any(|&(c, l)| !c.is_finite() || !l.is_finite()) {
            return Err(AnalysisError::InvalidData("non-finite sample".into()));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(AnalysisError::InvalidData("compute must be strictly increasing".into()));
        }
        Ok(Self { label: label.into(), points })
    }

    /// Reads `step,wall_seconds,train_loss,valid_loss` rows, dropping
    /// samples at zero compute.
    pub fn from_csv(label: impl Into<String>, text: &str, axis: ComputeAxis) -> Result<Self, AnalysisError> {
        let mut points = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let num = |i: usize| -> Result<f64, AnalysisError> {
                cols.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| AnalysisError::InvalidData(format!("line {}: bad column {i}", n + 1)))
            };
            let c = match axis {
                ComputeAxis::Step => num(0)?,
                ComputeAxis::WallSeconds => num(1)?,
            };
            if c > 0.0 {
                points.push((c, num(3)?));
            }
        }
        Self::new(label, points)
    }

    pub fn final_loss(&self) -> f64 {
        self.points.last().expect("non-empty").1
    }

    pub fn total_compute(&self) -> f64 {
        self.points.last().expect("non-empty").0
    }

    pub fn best_loss(&self) -> f64 {
        self.points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min)
    }

    pub fn rescaled(&self, beta: f64) -> Self {
        Self { label: self.label.clone(), points: self.points.iter().map(|&(c, l)| (c * beta, l)).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// Huber loss on log-space residuals.
    Huber { delta: f64 },
    LeastSquares,
}

impl Default for FitMethod {
    fn default() -> Self {
        FitMethod::Huber { delta: 0.1 }
    }
}

/// `l = a * c^(-k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub k: f64,
    /// Root mean square residual in log space.
    pub residual: f64,
    pub method: FitMethod,
}

impl PowerLawFit {
    pub fn predict(&self, c: f64) -> f64 {
        self.a * c.powf(-self.k)
    }

    /// Compute needed to reach loss `l`.
    pub fn compute_for(&self, l: f64) -> f64 {
        (self.a / l).powf(1.0 / self.k)
    }
}

fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> Option<(f64, f64)> {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for i in 0..x.len() {
        sxy += w[i] * (x[i] - mx) * (y[i] - my);
        sxx += w[i] * (x[i] - mx) * (x[i] - mx);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}

/// Fits `log l = log a - k log c`, by iteratively reweighted least squares
/// for the Huber loss.
pub fn fit_power_law(points: &[(f64, f64)], method: FitMethod) -> Result<PowerLawFit, AnalysisError> {
    if points.len() < 3 {
        return Err(AnalysisError::InvalidData(format!("{} points, need at least 3", points.len())));
    }
    if points.iter().any(|&(c, l)| !(c > 0.0 && l > 0.0 && c.is_finite() && l.is_finite())) {
        return Err(AnalysisError::InvalidData("compute and loss must be positive".into()));
    }
    let x: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mut w = vec![1.0; x.len()];
    let degenerate = || AnalysisError::InvalidData("compute values are all equal".into());
    let (mut intercept, mut slope) = weighted_line(&x, &y, &w).ok_or_else(degenerate)?;
    if let FitMethod::Huber { delta } = method {
        for _ in 0..200 {
            for i in 0..x.len() {
                let r = (y[i] - intercept - slope * x[i]).abs();
                w[i] = if r <= delta { 1.0 } else { delta / r };
            }
            let (ni, ns) = weighted_line(&x, &y, &w).ok_or_else(degenerate)?;
            let moved = (ni - intercept).abs() + (ns - slope).abs();
            (intercept, slope) = (ni, ns);
            if moved < 1e-15 {
                break;
            }
        }
    }
    let residual = (x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    let (a, k) = (intercept.exp(), -slope);
    if !(a > 0.0 && a.is_finite() && k > 0.0) {
        return Err(AnalysisError::FitFailed(format!("a = {a}, k = {k}")));
    }
    Ok(PowerLawFit { a, k, residual, method })
}

/// Lower convex hull in `(log c, log l)`, in increasing compute.
pub fn lower_frontier(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points.iter().copied().filter(|&(c, l)| c > 0.0 && l > 0.0).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup_by(|b, a| a.0 == b.0);
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        let (o, a, b) = ((o.0.ln(), o.1.ln()), (a.0.ln(), a.1.ln()), (b.0.ln(), b.1.ln()));
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for p in pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull
}

/// Compute at which `curve` first reaches `target`, interpolating linearly in
/// `(log c, log l)` between samples.
pub fn first_crossing(curve: &LossCurve, target: f64) -> Option<f64> {
    let p = &curve.points;
    let i = p.iter().position(|&(_, l)| l <= target)?;
    if i == 0 || p[i].1 == target {
        return Some(p[i].0);
    }
    let (c0, l0) = p[i - 1];
    let (c1, l1) = p[i];
    let t = if l0 > 0.0 && l1 > 0.0 && target > 0.0 {
        (target.ln() - l0.ln()) / (l1.ln() - l0.ln())
    } else {
        (target - l0) / (l1 - l0)
    };
    Some((c0.ln() + t * (c1.ln() - c0.ln())).exp())
}

/// Baseline total compute over the treatment's compute at parity with the
/// baseline's final loss.
pub fn speedup_factor(baseline: &LossCurve, treatment: &LossCurve) -> Result<f64, AnalysisError> {
    let target = baseline.final_loss();
    let c = first_crossing(treatment, target)
        .ok_or(AnalysisError::NotReached { target, best_loss: treatment.best_loss() })?;
    Ok(baseline.total_compute() / c)
}

/// Compute savings implied by two parallel power laws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Savings {
    /// Baseline compute over treatment compute at equal loss.
    pub b: f64,
    /// Shared exponent.
    pub k: f64,
    pub a_baseline: f64,
    pub a_treatment: f64,
}

impl Savings {
    pub fn baseline_compute(&self, l: f64) -> f64 {
        (self.a_baseline / l).powf(1.0 / self.k)
    }

    pub fn treatment_compute(&self, l: f64) -> f64 {
        self.baseline_compute(l) / self.b
    }

    /// Compute saved at loss `l`.
    pub fn savings_at(&self, l: f64) -> f64 {
        self.baseline_compute(l) * (1.0 - 1.0 / self.b)
    }

    /// `l(s) = a_baseline (1 - 1/b)^k s^(-k)`; infinite when nothing is saved.
    pub fn loss_at_savings(&self, s: f64) -> f64 {
        self.a_baseline * (1.0 - 1.0 / self.b).powf(self.k) * s.powf(-self.k)
    }
}

/// Reads the compute multiple off the vertical offset of two fits with
/// near-equal exponents. `tolerance` bounds `|k_b - k_t|` relative to their
/// mean.
pub fn savings_from_offset(
    baseline: &PowerLawFit,
    treatment: &PowerLawFit,
    tolerance: f64,
) -> Result<Savings, AnalysisError> {
    let k = (baseline.k + treatment.k) / 2.0;
    if (baseline.k - treatment.k).abs() > tolerance * k {
        return Err(AnalysisError::AssumptionViolated { k_baseline: baseline.k, k_treatment: treatment.k });
    }
    let b = ((baseline.a.ln() - treatment.a.ln()) / k).exp();
    Ok(Savings { b, k, a_baseline: baseline.a, a_treatment: treatment.a })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub label: String,
    pub seconds: f64,
    pub loss: f64,
}

/// True when `a` is no worse on both axes and better on one.
pub fn dominates(a: &ParetoPoint, b: &ParetoPoint) -> bool {
    a.seconds <= b.seconds && a.loss <= b.loss && (a.seconds < b.seconds || a.loss < b.loss)
}

/// Points no other point dominates, ordered by inference time.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut sorted: Vec<&ParetoPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.seconds.total_cmp(&b.seconds).then(a.loss.total_cmp(&b.loss)));
    let mut out: Vec<ParetoPoint> = Vec::new();
    let mut best = f64::INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        // Points with equal time are compared together.
        let mut j = i;
        while j < sorted.len() && sorted[j].seconds == sorted[i].seconds {
            j += 1;
        }
        let group_min = sorted[i].loss;
        if group_min < best {
            out.extend(sorted[i..j].iter().filter(|p| p.loss == group_min).map(|p| (*p).clone()));
            best = group_min;
        }
        i = j;
    }
    out
}

/// Reference curves for the search task, shipped with the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCurves {
    pub compute_unit: String,
    pub loss_unit: String,
    pub budget: f64,
    pub groups: Vec<ReferenceGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceGroup {
    pub name: String,
    pub baseline: ReferenceCurve,
    pub treatments: Vec<ReferenceCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCurve {
    pub label: String,
    pub perplexity: f64,
    #[serde(default)]
    pub speedup: Option<f64>,
    pub a: f64,
    pub k: f64,
    pub points: Vec<(f64, f64)>,
}

impl ReferenceCurve {
    pub fn curve(&self) -> LossCurve {
        LossCurve::new(self.label.clone(), self.points.clone()).expect("shipped curves are valid")
    }
}

pub const REFERENCE_CURVES_JSON: &str = include_str!("../data/search_task_curves.json");

pub fn reference_curves() -> ReferenceCurves {
    serde_json::from_str(REFERENCE_CURVES_JSON).expect("shipped curves parse")
}
