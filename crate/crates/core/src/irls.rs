//! Maximum-likelihood logistic regression by iteratively reweighted least
//! squares. Every iteration solves a weighted least-squares problem through an
//! orthogonal factorization of the weighted design; the normal equations are
//! never formed.
//!
//! The optimized objective is the binomial log-likelihood minus
//! `(ridge / 2) * ‖β₁..‖²`. The intercept is not penalized.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::model::{check_rows, inverse_logit, softplus, CompensatedSum, LabeledVector, ModelError};

/// Coefficient vectors are capped at this length (intercept included).
pub const MAX_COLUMNS: usize = 1000;

const MIN_WEIGHT: f64 = 1e-12;
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("responses are all successes or all failures")]
    DegenerateData,
    #[error("weighted design has rank {rank} < {columns} columns")]
    RankDeficient { rank: usize, columns: usize },
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
    #[error("{0} columns exceed the cap of {MAX_COLUMNS}")]
    TooManyColumns(usize),
    #[error("invalid least-squares input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Relative change of the penalized deviance between iterations.
    pub tolerance: f64,
    pub ridge: f64,
    pub separation_eta_bound: f64,
    /// Convergence also requires `‖g‖∞ ≤ gradient_tolerance · (1 + ‖g(0)‖∞)`.
    pub gradient_tolerance: f64,
    pub max_step_halvings: usize,
    /// Keep the first iteration's triangular factor and solve later iterations
    /// with factor-preconditioned conjugate gradients instead of refactoring.
    pub reuse_factorization: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iterations: 25,
            tolerance: 1e-8,
            ridge: 1e-6,
            separation_eta_bound: 30.0,
            gradient_tolerance: 1e-9,
            max_step_halvings: 10,
            reuse_factorization: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::InvalidConfig(m.to_string()));
        if self.max_iterations < 1 {
            return bad("max_iterations must be at least 1");
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return bad("tolerance must be positive");
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad("ridge must be non-negative");
        }
        if !(self.separation_eta_bound > 0.0) {
            return bad("separation_eta_bound must be positive");
        }
        if !(self.gradient_tolerance > 0.0 && self.gradient_tolerance.is_finite()) {
            return bad("gradient_tolerance must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitWarning {
    /// Some `|ηᵢ|` exceeded the configured bound, or the final linear
    /// predictor ranks every success above every failure.
    SeparationDetected { iteration: usize, max_abs_eta: f64 },
    NotConverged { iterations: usize },
    /// No step-halving reduced the objective; iteration stopped early.
    StepHalvingExhausted { iteration: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Unpenalized deviance at `beta`.
    pub final_deviance: f64,
    pub warnings: Vec<FitWarning>,
    /// Penalized deviance after each accepted iteration, starting point first.
    pub deviance_trace: Vec<f64>,
}

impl FitResult {
    pub fn separation_detected(&self) -> bool {
        self.warnings
            .iter()
            .any(|w| matches!(w, FitWarning::SeparationDetected { .. }))
    }
}

/// The one-hot design `X` with responses; column 0 is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    rows: Vec<LabeledVector>,
    n_features: usize,
}

impl DesignMatrix {
    /// `n_features` counts the intercept.
    pub fn new(rows: Vec<LabeledVector>, n_features: usize) -> Result<Self, FitError> {
        check_rows(n_features, &rows)?;
        let successes: u64 = rows.iter().map(|r| r.response() as u64).sum();
        let trials: u64 = rows.iter().map(|r| r.trials() as u64).sum();
        if successes == 0 || successes == trials {
            return Err(FitError::DegenerateData);
        }
        Ok(DesignMatrix { rows, n_features })
    }

    pub fn rows(&self) -> &[LabeledVector] {
        &self.rows
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    fn etas(&self, beta: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.eta(beta)).collect()
    }

    /// Dense weighted copy `[√w ⊙ X; √ridge · I₋₀]` for the orthogonal solve.
    fn weighted_dense(&self, weights: &[f64], ridge: f64) -> DMatrix<f64> {
        let p = self.n_features;
        let n = self.rows.len();
        let extra = if ridge > 0.0 { p - 1 } else { 0 };
        let mut a = DMatrix::zeros(n + extra, p);
        for (i, (row, &w)) in self.rows.iter().zip(weights).enumerate() {
            let s = w.sqrt();
            a[(i, 0)] = s;
            for &j in row.active() {
                a[(i, j)] = s;
            }
        }
        let sr = ridge.sqrt();
        for j in 1..=extra {
            a[(n + j - 1, j)] = sr;
        }
        a
    }
}

fn saturated_log_likelihood(rows: &[LabeledVector]) -> f64 {
    let xlogx = |a: f64, b: f64| if a > 0.0 { a * (a / b).ln() } else { 0.0 };
    let mut total = CompensatedSum::default();
    for r in rows {
        let (y, m) = (r.response() as f64, r.trials() as f64);
        total.add(xlogx(y, m) + xlogx(m - y, m));
    }
    total.value()
}

fn deviance_from_etas(rows: &[LabeledVector], etas: &[f64], saturated: f64) -> f64 {
    let mut ll = CompensatedSum::default();
    for (r, &eta) in rows.iter().zip(etas) {
        ll.add(r.response() as f64 * eta - r.trials() as f64 * softplus(eta));
    }
    (-2.0 * (ll.value() - saturated)).max(0.0)
}

/// `−2 (ℓ(β) − ℓ_saturated)`; zero when the fit reproduces every `yᵢ/mᵢ`.
pub fn deviance(beta: &[f64], design: &DesignMatrix) -> Result<f64, FitError> {
    if beta.len() != design.n_features {
        return Err(FitError::InvalidInput(format!(
            "beta has {} entries for {} columns",
            beta.len(),
            design.n_features
        )));
    }
    let etas = design.etas(beta);
    let d = deviance_from_etas(&design.rows, &etas, saturated_log_likelihood(&design.rows));
    if d.is_finite() {
        Ok(d)
    } else {
        Err(ModelError::NonFinite("deviance").into())
    }
}

fn ridge_penalty(beta: &[f64], ridge: f64) -> f64 {
    ridge * beta[1..].iter().map(|b| b * b).sum::<f64>()
}

/// Gradient of the penalized log-likelihood, `Xᵀ(y − mμ) − ridge·β₋₀`.
fn penalized_gradient(design: &DesignMatrix, beta: &[f64], etas: &[f64], ridge: f64) -> Vec<f64> {
    let mut g = vec![0.0; design.n_features];
    for (r, &eta) in design.rows.iter().zip(etas) {
        let resid = r.response() as f64 - r.trials() as f64 * inverse_logit(eta);
        g[0] += resid;
        for &j in r.active() {
            g[j] += resid;
        }
    }
    for j in 1..g.len() {
        g[j] -= ridge * beta[j];
    }
    g
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn check_weights(design: &DesignMatrix, weights: &[f64], response: &[f64]) -> Result<(), FitError> {
    let n = design.rows.len();
    if weights.len() != n || response.len() != n {
        return Err(FitError::InvalidInput(format!(
            "{} rows, {} weights, {} responses",
            n,
            weights.len(),
            response.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(FitError::InvalidInput("weights must be finite and non-negative".into()));
    }
    if response.iter().any(|z| !z.is_finite()) {
        return Err(FitError::InvalidInput("working response must be finite".into()));
    }
    Ok(())
}

fn numerical_rank(r: &DMatrix<f64>) -> usize {
    let diag: Vec<f64> = (0..r.ncols().min(r.nrows())).map(|i| r[(i, i)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    diag.iter().filter(|&&d| d > RANK_TOLERANCE * max && d > 0.0).count()
}

/// Solves `argmin Σ wᵢ (zᵢ − xᵢᵀβ)² + ridge ‖β₋₀‖²` by Householder QR of the
/// weighted, ridge-augmented design.
pub fn weighted_least_squares(
    design: &DesignMatrix,
    weights: &[f64],
    working_response: &[f64],
    ridge: f64,
) -> Result<Vec<f64>, FitError> {
    check_weights(design, weights, working_response)?;
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(FitError::InvalidConfig("ridge must be non-negative".into()));
    }
    let p = design.n_features;
    let a = design.weighted_dense(weights, ridge);
    if a.nrows() < p {
        return Err(FitError::RankDeficient { rank: a.nrows(), columns: p });
    }
    let mut b = DVector::zeros(a.nrows());
    for (i, (&w, &z)) in weights.iter().zip(working_response).enumerate() {
        b[i] = w.sqrt() * z;
    }
    let qr = a.qr();
    qr.q_tr_mul(&mut b);
    let r = qr.r();
    let rank = numerical_rank(&r);
    if rank < p {
        return Err(FitError::RankDeficient { rank, columns: p });
    }
    let rhs = b.rows(0, p).into_owned();
    let beta = r
        .solve_upper_triangular(&rhs)
        .ok_or(FitError::RankDeficient { rank, columns: p })?;
    Ok(beta.iter().copied().collect())
}

/// Standard errors `sqrt(diag((XᵀWX + ridge·I₋₀)⁻¹))` at `beta`.
pub fn standard_errors(design: &DesignMatrix, beta: &[f64], ridge: f64) -> Result<Vec<f64>, FitError> {
    let etas = design.etas(beta);
    let weights: Vec<f64> = design
        .rows
        .iter()
        .zip(&etas)
        .map(|(r, &eta)| {
            let mu = inverse_logit(eta);
            r.trials() as f64 * mu * (1.0 - mu)
        })
        .collect();
    let p = design.n_features;
    let r = design.weighted_dense(&weights, ridge).qr().r();
    let rank = numerical_rank(&r);
    if rank < p {
        return Err(FitError::RankDeficient { rank, columns: p });
    }
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(FitError::RankDeficient { rank, columns: p })?;
    Ok((0..p)
        .map(|j| r_inv.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// Conjugate-gradient least squares on the weighted design, right-preconditioned
/// with a fixed upper-triangular factor. Converges to the same minimizer as the
/// direct QR solve; returns `None` if the iteration budget runs out.
struct ReusedFactor {
    r: DMatrix<f64>,
}

impl ReusedFactor {
    fn apply(design: &DesignMatrix, sw: &[f64], sr: f64, v: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, &s) in design.rows.iter().zip(sw) {
            out.push(s * row.eta(v));
        }
        if sr > 0.0 {
            out.extend(v[1..].iter().map(|x| sr * x));
        }
    }

    fn apply_transpose(design: &DesignMatrix, sw: &[f64], sr: f64, r: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        let n = design.rows.len();
        for ((row, &s), &ri) in design.rows.iter().zip(sw).zip(&r[..n]) {
            let t = s * ri;
            out[0] += t;
            for &j in row.active() {
                out[j] += t;
            }
        }
        if sr > 0.0 {
            for j in 1..out.len() {
                out[j] += sr * r[n + j - 1];
            }
        }
    }

    fn solve(
        &self,
        design: &DesignMatrix,
        weights: &[f64],
        z: &[f64],
        ridge: f64,
        warm: &[f64],
    ) -> Option<Vec<f64>> {
        let p = design.n_features;
        let sw: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
        let sr = ridge.sqrt();
        let mut b: Vec<f64> = sw.iter().zip(z).map(|(s, z)| s * z).collect();
        if sr > 0.0 {
            b.extend(std::iter::repeat_n(0.0, p - 1));
        }
        let r_solve = |v: &[f64]| -> Option<DVector<f64>> {
            self.r.solve_upper_triangular(&DVector::from_column_slice(v))
        };
        let rt_solve = |v: &[f64]| -> Option<DVector<f64>> {
            self.r.tr_solve_upper_triangular(&DVector::from_column_slice(v))
        };
        let mut atv = vec![0.0; p];
        let mut av = Vec::with_capacity(b.len());

        // scale for the stopping rule: ‖R⁻ᵀ Aᵀ b‖
        Self::apply_transpose(design, &sw, sr, &b, &mut atv);
        let scale = rt_solve(&atv)?.norm().max(f64::MIN_POSITIVE);

        let mut u: DVector<f64> = &self.r * DVector::from_column_slice(warm);
        Self::apply(design, &sw, sr, r_solve(u.as_slice())?.as_slice(), &mut av);
        let mut resid: Vec<f64> = b.iter().zip(&av).map(|(b, a)| b - a).collect();
        Self::apply_transpose(design, &sw, sr, &resid, &mut atv);
        let mut s = rt_solve(&atv)?;
        let mut dir = s.clone();
        let mut gamma = s.norm_squared();
        let budget = 4 * p + 50;
        for _ in 0..budget {
            if gamma.sqrt() <= 1e-13 * scale {
                return Some(r_solve(u.as_slice())?.iter().copied().collect());
            }
            Self::apply(design, &sw, sr, r_solve(dir.as_slice())?.as_slice(), &mut av);
            let q2: f64 = av.iter().map(|x| x * x).sum();
            if q2 <= 0.0 {
                break;
            }
            let alpha = gamma / q2;
            u.axpy(alpha, &dir, 1.0);
            for (r, q) in resid.iter_mut().zip(&av) {
                *r -= alpha * q;
            }
            Self::apply_transpose(design, &sw, sr, &resid, &mut atv);
            s = rt_solve(&atv)?;
            let gamma_next = s.norm_squared();
            dir = &s + (gamma_next / gamma) * dir;
            gamma = gamma_next;
        }
        if gamma.sqrt() <= 1e-10 * scale {
            Some(r_solve(u.as_slice())?.iter().copied().collect())
        } else {
            None
        }
    }
}

/// True when no row mixes outcomes and every success scores strictly above
/// every failure.
fn predictor_separates(rows: &[LabeledVector], etas: &[f64]) -> bool {
    let mut min_success = f64::INFINITY;
    let mut max_failure = f64::NEG_INFINITY;
    for (r, &eta) in rows.iter().zip(etas) {
        if r.response() > 0 {
            min_success = min_success.min(eta);
        }
        if r.response() < r.trials() {
            max_failure = max_failure.max(eta);
        }
    }
    min_success > max_failure
}

struct WorkingProblem {
    weights: Vec<f64>,
    response: Vec<f64>,
}

fn working_problem(design: &DesignMatrix, etas: &[f64]) -> WorkingProblem {
    let mut weights = Vec::with_capacity(etas.len());
    let mut response = Vec::with_capacity(etas.len());
    for (r, &eta) in design.rows.iter().zip(etas) {
        let m = r.trials() as f64;
        let mu = inverse_logit(eta);
        let w = (m * mu * (1.0 - mu)).max(MIN_WEIGHT * m);
        weights.push(w);
        response.push(eta + (r.response() as f64 - m * mu) / w);
    }
    WorkingProblem { weights, response }
}

/// Fits `β̂` by IRLS with step-halving on the penalized deviance.
///
/// Non-convergence is reported through `converged = false` and a warning, with
/// the best iterate returned. Separation is a warning as well: with a positive
/// ridge the optimum stays finite.
pub fn fit(design: &DesignMatrix, config: &FitConfig) -> Result<FitResult, FitError> {
    config.validate()?;
    let p = design.n_features;
    if p > MAX_COLUMNS {
        return Err(FitError::TooManyColumns(p));
    }
    let rows = &design.rows;
    let saturated = saturated_log_likelihood(rows);
    let successes: f64 = rows.iter().map(|r| r.response() as f64).sum();
    let trials: f64 = rows.iter().map(|r| r.trials() as f64).sum();

    let zero = vec![0.0; p];
    let g0 = inf_norm(&penalized_gradient(design, &zero, &design.etas(&zero), config.ridge));
    let gradient_bound = config.gradient_tolerance * (1.0 + g0);

    let mut beta = vec![0.0; p];
    beta[0] = crate::model::logit((successes + 0.5) / (trials + 1.0))?;
    let mut etas = design.etas(&beta);
    let mut objective = deviance_from_etas(rows, &etas, saturated) + ridge_penalty(&beta, config.ridge);
    let mut trace = vec![objective];
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut reused: Option<ReusedFactor> = None;

    while iterations < config.max_iterations {
        iterations += 1;
        let work = working_problem(design, &etas);
        let proposal = if config.reuse_factorization {
            if reused.is_none() {
                let a = design.weighted_dense(&work.weights, config.ridge);
                let r = a.qr().r();
                let rank = numerical_rank(&r);
                if rank < p {
                    return Err(FitError::RankDeficient { rank, columns: p });
                }
                reused = Some(ReusedFactor { r });
            }
            let factor = reused.as_ref().expect("initialized above");
            match factor.solve(design, &work.weights, &work.response, config.ridge, &beta) {
                Some(b) => b,
                None => {
                    debug!(iteration = iterations, "reused factor stalled; refactoring");
                    weighted_least_squares(design, &work.weights, &work.response, config.ridge)?
                }
            }
        } else {
            weighted_least_squares(design, &work.weights, &work.response, config.ridge)?
        };

        let slack = 1e-12 * (1.0 + objective.abs());
        let mut candidate = proposal;
        let mut cand_etas = design.etas(&candidate);
        let mut cand_obj = deviance_from_etas(rows, &cand_etas, saturated)
            + ridge_penalty(&candidate, config.ridge);
        let mut halvings = 0;
        while !(cand_obj <= objective + slack) && halvings < config.max_step_halvings {
            halvings += 1;
            for (c, b) in candidate.iter_mut().zip(&beta) {
                *c = 0.5 * (*c + b);
            }
            cand_etas = design.etas(&candidate);
            cand_obj = deviance_from_etas(rows, &cand_etas, saturated)
                + ridge_penalty(&candidate, config.ridge);
        }
        debug!(iteration = iterations, deviance = cand_obj, halvings, "irls step");
        if !(cand_obj <= objective + slack) {
            warnings.push(FitWarning::StepHalvingExhausted { iteration: iterations });
            let g = penalized_gradient(design, &beta, &etas, config.ridge);
            converged = inf_norm(&g) <= gradient_bound;
            break;
        }

        let change = (objective - cand_obj).abs() / (cand_obj.abs() + 0.1);
        beta = candidate;
        etas = cand_etas;
        objective = cand_obj;
        trace.push(objective);

        let max_abs_eta = inf_norm(&etas);
        if max_abs_eta > config.separation_eta_bound
            && !warnings
                .iter()
                .any(|w| matches!(w, FitWarning::SeparationDetected { .. }))
        {
            warnings.push(FitWarning::SeparationDetected { iteration: iterations, max_abs_eta });
        }

        let g = penalized_gradient(design, &beta, &etas, config.ridge);
        if change < config.tolerance && inf_norm(&g) <= gradient_bound {
            converged = true;
            break;
        }
    }
    let already_flagged = warnings
        .iter()
        .any(|w| matches!(w, FitWarning::SeparationDetected { .. }));
    if !already_flagged && predictor_separates(rows, &etas) {
        warnings.push(FitWarning::SeparationDetected { iteration: iterations, max_abs_eta: inf_norm(&etas) });
    }
    if !converged {
        warnings.push(FitWarning::NotConverged { iterations });
    }
    let final_deviance = deviance_from_etas(rows, &etas, saturated);
    debug!(iterations, converged, deviance = final_deviance, "irls finished");
    Ok(FitResult { beta, converged, iterations, final_deviance, warnings, deviance_trace: trace })
}
