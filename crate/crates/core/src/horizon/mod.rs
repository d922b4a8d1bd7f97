//! Total-regularization analysis: sweep grids, after-peak selection, the
//! linear fit `metric = β_B − R`, R assignment, collapse export and the
//! paired bootstrap.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::numerics::RngStream;
use crate::trainer::{RunRecord, TrainConfig};

/// Minimum number of regression points.
pub const MIN_FIT_POINTS: usize = 6;

/// Above this condition number of `XᵀX` the fit falls back to a pseudo-inverse.
pub const PINV_CONDITION: f64 = 1e10;

/// Scaled singular values below this mark the design as rank deficient.
const RANK_TOL: f64 = 1e-10;

const COLUMNS: [&str; 5] = ["alpha_cr", "alpha_rd", "alpha_t", "dropout", "intercept"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    AlphaCr,
    AlphaRd,
    AlphaT,
    Dropout,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::AlphaCr => "alpha_cr",
            SweepAxis::AlphaRd => "alpha_rd",
            SweepAxis::AlphaT => "alpha_t",
            SweepAxis::Dropout => "dropout",
        }
    }
}

/// The four knobs of one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperPoint {
    pub alpha_cr: f64,
    pub alpha_rd: f64,
    pub alpha_t: f64,
    pub dropout: f64,
}

impl HyperPoint {
    pub fn of_record(r: &RunRecord) -> Self {
        Self {
            alpha_cr: r.alpha_cr,
            alpha_rd: r.alpha_rd,
            alpha_t: r.alpha_t,
            dropout: r.dropout,
        }
    }

    fn alphas(&self) -> [f64; 3] {
        [self.alpha_cr, self.alpha_rd, self.alpha_t]
    }

    fn key(&self) -> [u64; 4] {
        [self.alpha_cr, self.alpha_rd, self.alpha_t, self.dropout].map(|v| (v + 0.0).to_bits())
    }

    fn alpha_key(&self) -> [u64; 3] {
        self.alphas().map(|v| (v + 0.0).to_bits())
    }

    fn set(&mut self, axis: SweepAxis, v: f64) {
        match axis {
            SweepAxis::AlphaCr => self.alpha_cr = v,
            SweepAxis::AlphaRd => self.alpha_rd = v,
            SweepAxis::AlphaT => self.alpha_t = v,
            SweepAxis::Dropout => self.dropout = v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    /// Values of the untuned α's; taps and metrics are copied to every point.
    pub base_weights: LossWeights,
    pub base_dropout: f64,
    pub axes: BTreeMap<SweepAxis, Vec<f64>>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            base_weights: LossWeights {
                alpha_cr: 1.0,
                alpha_rd: 5.0,
                alpha_t: 1.0,
                ..LossWeights::default()
            },
            base_dropout: 0.1,
            axes: BTreeMap::new(),
            seeds: vec![0],
        }
    }
}

impl SweepSpec {
    /// The published grid: each α tuned separately against dropout 0.05–0.30.
    pub fn paper_grid() -> Self {
        let mut axes = BTreeMap::new();
        axes.insert(SweepAxis::AlphaCr, vec![0.2, 1.0, 5.0]);
        axes.insert(SweepAxis::AlphaRd, vec![2.0, 5.0, 8.0]);
        axes.insert(SweepAxis::AlphaT, vec![1.0, 0.5, 0.1, 0.0]);
        axes.insert(SweepAxis::Dropout, vec![0.05, 0.10, 0.15, 0.20, 0.25, 0.30]);
        Self {
            axes,
            ..Self::default()
        }
    }

    pub fn base_point(&self) -> HyperPoint {
        HyperPoint {
            alpha_cr: self.base_weights.alpha_cr,
            alpha_rd: self.base_weights.alpha_rd,
            alpha_t: self.base_weights.alpha_t,
            dropout: self.base_dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::Config("sweep needs at least one axis".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        for (axis, values) in &self.axes {
            if values.is_empty() {
                return Err(Error::Config(format!("axis {} has no values", axis.name())));
            }
            for v in values {
                let ok = v.is_finite() && *v >= 0.0 && (*axis != SweepAxis::Dropout || *v < 1.0);
                if !ok {
                    return Err(Error::Config(format!(
                        "axis {} value {v} out of range",
                        axis.name()
                    )));
                }
            }
        }
        self.base_weights.validate()?;
        if !(0.0..1.0).contains(&self.base_dropout) {
            return Err(Error::Config(format!(
                "base dropout {} outside [0, 1)",
                self.base_dropout
            )));
        }
        Ok(())
    }

    /// Unique hyperparameter points, one axis at a time, crossed with dropout.
    pub fn points(&self) -> Result<Vec<HyperPoint>> {
        self.validate()?;
        let base = self.base_point();
        let dropouts = self
            .axes
            .get(&SweepAxis::Dropout)
            .cloned()
            .unwrap_or_else(|| vec![self.base_dropout]);
        let mut variants = Vec::new();
        for (axis, values) in self.axes.iter().filter(|(a, _)| **a != SweepAxis::Dropout) {
            for v in values {
                let mut p = base;
                p.set(*axis, *v);
                variants.push(p);
            }
        }
        if variants.is_empty() {
            variants.push(base);
        }
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for v in variants {
            for d in &dropouts {
                let p = HyperPoint { dropout: *d, ..v };
                if seen.insert(p.key()) {
                    out.push(p);
                }
            }
        }
        Ok(out)
    }
}

/// Grid points × seeds as full training configurations. Non-swept knobs
/// (schedule, taps, batch size) come from `template`.
pub fn expand_grid(spec: &SweepSpec, template: &TrainConfig) -> Result<Vec<TrainConfig>> {
    let mut out = Vec::new();
    for p in spec.points()? {
        for seed in &spec.seeds {
            let mut c = template.clone();
            c.weights = LossWeights {
                alpha_cr: p.alpha_cr,
                alpha_rd: p.alpha_rd,
                alpha_t: p.alpha_t,
                ..spec.base_weights.clone()
            };
            c.dropout = p.dropout;
            c.seed = *seed;
            out.push(c);
        }
    }
    Ok(out)
}

/// Index just past the first maximum of a dropout-ordered metric series.
fn after_peak(metrics: &[f64]) -> usize {
    let mut peak = 0;
    for (i, m) in metrics.iter().enumerate() {
        if *m > metrics[peak] {
            peak = i;
        }
    }
    (peak + 1).min(metrics.len())
}

/// `(dropout, metric)` points strictly after the first maximum of the
/// dropout-sorted series.
pub fn select_over_regularized(series: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut sorted = series.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let metrics: Vec<f64> = sorted.iter().map(|p| p.1).collect();
    sorted.split_off(after_peak(&metrics))
}

/// One seed-averaged configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionPoint {
    pub point: HyperPoint,
    pub metric: f64,
    pub n_seeds: usize,
}

/// Averages the dev metric of successful records sharing hyperparameters.
/// Output is ordered by `(alpha_cr, alpha_rd, alpha_t, dropout)`.
pub fn aggregate(records: &[RunRecord]) -> Vec<RegressionPoint> {
    let mut groups: BTreeMap<[u64; 4], (HyperPoint, Vec<f64>)> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.failed) {
        let p = HyperPoint::of_record(r);
        groups
            .entry(p.key())
            .or_insert_with(|| (p, Vec::new()))
            .1
            .push(r.dev_metric);
    }
    let mut out: Vec<RegressionPoint> = groups
        .into_values()
        .map(|(point, mut metrics)| {
            metrics.sort_by(f64::total_cmp);
            RegressionPoint {
                point,
                metric: metrics.iter().sum::<f64>() / metrics.len() as f64,
                n_seeds: metrics.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        let ka = [
            a.point.alpha_cr,
            a.point.alpha_rd,
            a.point.alpha_t,
            a.point.dropout,
        ];
        let kb = [
            b.point.alpha_cr,
            b.point.alpha_rd,
            b.point.alpha_t,
            b.point.dropout,
        ];
        ka.iter()
            .zip(&kb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    out
}

/// Pools the after-peak points of every fixed-α dropout series.
pub fn over_regularized(points: &[RegressionPoint]) -> Vec<RegressionPoint> {
    let mut series: BTreeMap<[u64; 3], Vec<RegressionPoint>> = BTreeMap::new();
    for p in points {
        series.entry(p.point.alpha_key()).or_default().push(*p);
    }
    let mut out = Vec::new();
    for mut s in series.into_values() {
        s.sort_by(|a, b| a.point.dropout.total_cmp(&b.point.dropout));
        let metrics: Vec<f64> = s.iter().map(|p| p.metric).collect();
        out.extend_from_slice(&s[after_peak(&metrics)..]);
    }
    out
}

/// The fitted total-regularization model. `beta_r` is fixed to −1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub beta_cr: f64,
    pub beta_rd: f64,
    pub beta_t: f64,
    pub beta_do: f64,
    pub beta_f: f64,
    #[serde(rename = "beta_B")]
    pub beta_b: f64,
    #[serde(rename = "beta_R")]
    pub beta_r: f64,
    pub n_points: usize,
    pub residual_rms: f64,
    pub std_errors: StdErrors,
    /// True when the pseudo-inverse path was taken.
    pub pseudo_inverse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdErrors {
    pub beta_cr: f64,
    pub beta_rd: f64,
    pub beta_t: f64,
    pub beta_do: f64,
    pub beta_f: f64,
    #[serde(rename = "beta_B")]
    pub beta_b: f64,
}

/// The published report: six β's plus fit quality, nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReport {
    pub beta_cr: f64,
    pub beta_rd: f64,
    pub beta_t: f64,
    pub beta_do: f64,
    pub beta_f: f64,
    #[serde(rename = "beta_B")]
    pub beta_b: f64,
    pub residual_rms: f64,
    pub n_points: usize,
}

impl RegressionFit {
    /// A fit from published coefficients, with no uncertainty attached.
    pub fn from_betas(beta_cr: f64, beta_rd: f64, beta_t: f64, beta_do: f64, beta_b: f64) -> Self {
        Self {
            beta_cr,
            beta_rd,
            beta_t,
            beta_do,
            beta_f: -beta_t,
            beta_b,
            beta_r: -1.0,
            n_points: 0,
            residual_rms: 0.0,
            std_errors: StdErrors {
                beta_cr: 0.0,
                beta_rd: 0.0,
                beta_t: 0.0,
                beta_do: 0.0,
                beta_f: 0.0,
                beta_b: 0.0,
            },
            pseudo_inverse: false,
        }
    }

    pub fn report(&self) -> FitReport {
        FitReport {
            beta_cr: self.beta_cr,
            beta_rd: self.beta_rd,
            beta_t: self.beta_t,
            beta_do: self.beta_do,
            beta_f: self.beta_f,
            beta_b: self.beta_b,
            residual_rms: self.residual_rms,
            n_points: self.n_points,
        }
    }

    /// Predicted metric `β_B + β_R·R`.
    pub fn predict(&self, p: &HyperPoint) -> f64 {
        self.beta_b + self.beta_r * total_r(self, p)
    }
}

/// `R = β_cr·α_cr + β_rd·α_rd + β_t·α_t + β_do·d + β_f`.
pub fn total_r(fit: &RegressionFit, p: &HyperPoint) -> f64 {
    fit.beta_cr * p.alpha_cr
        + fit.beta_rd * p.alpha_rd
        + fit.beta_t * p.alpha_t
        + fit.beta_do * p.dropout
        + fit.beta_f
}

fn design(points: &[RegressionPoint]) -> (DMatrix<f64>, DVector<f64>) {
    let x = DMatrix::from_fn(points.len(), 5, |i, j| {
        let p = &points[i].point;
        [p.alpha_cr, p.alpha_rd, p.alpha_t, p.dropout, 1.0][j]
    });
    let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.metric));
    (x, y)
}

/// Names the columns participating in a (near-)null combination.
fn collinear_columns(x: &DMatrix<f64>) -> Option<Vec<&'static str>> {
    let mut scaled = x.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        let n = col.norm();
        if n == 0.0 {
            return Some(vec![COLUMNS[j]]);
        }
        col /= n;
    }
    let svd = scaled.svd(false, true);
    let (k, smin) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, s)| (k, *s))?;
    if smin > RANK_TOL {
        return None;
    }
    let v = svd.v_t?.row(k).transpose();
    let vmax = v.amax();
    Some(
        (0..5)
            .filter(|&j| v[j].abs() > 0.05 * vmax)
            .map(|j| COLUMNS[j])
            .collect(),
    )
}

/// Ordinary least squares of the metric on `(α_cr, α_rd, α_t, d, 1)`,
/// mapped onto the β parameterization.
pub fn fit_regression(points: &[RegressionPoint]) -> Result<RegressionFit> {
    if points.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientData {
            needed: MIN_FIT_POINTS,
            got: points.len(),
        });
    }
    if points.iter().any(|p| !p.metric.is_finite()) {
        return Err(Error::Numeric(
            "non-finite metric in regression input".into(),
        ));
    }
    let (x, y) = design(points);
    if let Some(cols) = collinear_columns(&x) {
        return Err(Error::Analysis(format!(
            "design matrix is rank deficient; collinear columns: {}",
            cols.join(", ")
        )));
    }
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let sv = xtx.clone().svd(false, false).singular_values;
    let cond = sv.max() / sv.min();

    let (coef, inv, pseudo) = match xtx.clone().cholesky() {
        Some(chol) if cond <= PINV_CONDITION => {
            let mut c = chol.solve(&xty);
            let r = &y - &x * &c;
            c += chol.solve(&(x.transpose() * r));
            (c, chol.inverse(), false)
        }
        _ => {
            let pinv = xtx
                .pseudo_inverse(f64::EPSILON * sv.max())
                .map_err(|e| Error::Analysis(e.to_string()))?;
            (&pinv * &xty, pinv, true)
        }
    };

    let resid = &y - &x * &coef;
    let n = points.len();
    let rss = resid.norm_squared();
    let dof = n.saturating_sub(5).max(1) as f64;
    let cov = inv * (rss / dof);
    let se = |i: usize| cov[(i, i)].max(0.0).sqrt();
    let se_b = (cov[(4, 4)] + cov[(2, 2)] + 2.0 * cov[(2, 4)])
        .max(0.0)
        .sqrt();

    let beta_t = -coef[2];
    Ok(RegressionFit {
        beta_cr: -coef[0],
        beta_rd: -coef[1],
        beta_t,
        beta_do: -coef[3],
        beta_f: -beta_t,
        beta_b: coef[4] + coef[2],
        beta_r: -1.0,
        n_points: n,
        residual_rms: (rss / n as f64).sqrt(),
        std_errors: StdErrors {
            beta_cr: se(0),
            beta_rd: se(1),
            beta_t: se(2),
            beta_do: se(3),
            beta_f: se(2),
            beta_b: se_b,
        },
        pseudo_inverse: pseudo,
    })
}

/// Tuning family of a point relative to the sweep's base α's: the single α
/// that differs, `"base"` when none does, `"mixed"` otherwise.
pub fn family_of(p: &HyperPoint, base: &HyperPoint) -> String {
    let names = ["alpha_cr", "alpha_rd", "alpha_t"];
    let diff: Vec<&str> = p
        .alphas()
        .iter()
        .zip(base.alphas())
        .zip(names)
        .filter(|((a, b), _)| (*a + 0.0).to_bits() != (b + 0.0).to_bits())
        .map(|(_, n)| n)
        .collect();
    match diff.as_slice() {
        [] => "base".to_string(),
        [one] => (*one).to_string(),
        _ => "mixed".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseRow {
    #[serde(rename = "R")]
    pub r: f64,
    pub metric: f64,
    pub family: String,
    pub dropout: f64,
}

/// Annotates every record with its R, in input order.
pub fn collapse_export(
    fit: &RegressionFit,
    records: &[RunRecord],
    base: &HyperPoint,
) -> Vec<CollapseRow> {
    records
        .iter()
        .map(|rec| {
            let p = HyperPoint::of_record(rec);
            CollapseRow {
                r: total_r(fit, &p),
                metric: rec.dev_metric,
                family: family_of(&p, base),
                dropout: rec.dropout,
            }
        })
        .collect()
}

pub fn write_collapse_csv<W: Write>(rows: &[CollapseRow], mut out: W) -> Result<()> {
    writeln!(out, "R,metric,family,dropout")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.r, r.metric, r.family, r.dropout)?;
    }
    Ok(())
}

/// Least-squares line `metric = a + b·R` through the rows and its largest
/// absolute residual.
pub fn collapse_line(rows: &[CollapseRow]) -> Result<(f64, f64, f64)> {
    if rows.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: rows.len(),
        });
    }
    let n = rows.len() as f64;
    let mr = rows.iter().map(|r| r.r).sum::<f64>() / n;
    let mm = rows.iter().map(|r| r.metric).sum::<f64>() / n;
    let sxx: f64 = rows.iter().map(|r| (r.r - mr).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Analysis("all rows share one R value".into()));
    }
    let sxy: f64 = rows.iter().map(|r| (r.r - mr) * (r.metric - mm)).sum();
    let slope = sxy / sxx;
    let intercept = mm - slope * mr;
    let max_resid = rows
        .iter()
        .map(|r| (r.metric - intercept - slope * r.r).abs())
        .fold(0.0, f64::max);
    Ok((intercept, slope, max_resid))
}

/// Synthetic run records whose dev metric is `fit.predict(p)` plus Gaussian
/// noise of standard deviation `sigma`, one per point, in input order.
pub fn planted_records(
    fit: &RegressionFit,
    points: &[HyperPoint],
    sigma: f64,
    seed: u64,
) -> Vec<RunRecord> {
    let mut rng = RngStream::new(seed, 0).next_generator();
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    points
        .iter()
        .map(|p| {
            let metric = fit.predict(p)
                + if sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
            RunRecord {
                alpha_cr: p.alpha_cr,
                alpha_rd: p.alpha_rd,
                alpha_t: p.alpha_t,
                dropout: p.dropout,
                dev_metric: metric,
                test_metric: metric,
                curve: vec![(0, metric)],
                seed,
                config_hash: String::new(),
                failed: false,
            }
        })
        .collect()
}

/// One-sided paired bootstrap: the fraction of resamples in which system A
/// does not beat system B. Ties count against significance.
pub fn paired_bootstrap(a: &[f64], b: &[f64], n_resamples: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "score lists differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 10 {
        return Err(Error::Usage(format!(
            "need at least 10 paired items, got {}",
            a.len()
        )));
    }
    if n_resamples < 1000 {
        return Err(Error::Usage(format!(
            "need at least 1000 resamples, got {n_resamples}"
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let n = a.len();
    let mut rng = RngStream::new(seed, 0).next_generator();
    let mut not_better = 0usize;
    for _ in 0..n_resamples {
        let (mut sa, mut sb) = (0.0, 0.0);
        for _ in 0..n {
            let i = rng.random_range(0..n);
            sa += a[i];
            sb += b[i];
        }
        if sa <= sb {
            not_better += 1;
        }
    }
    Ok(not_better as f64 / n_resamples as f64)
}
