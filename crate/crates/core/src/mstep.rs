//! Closed-form maximizers of the expected complete-data log-likelihood.
//!
//! One [`sweep`] updates the blocks in Gauss–Seidel order: row loadings, column loadings,
//! intercepts, row autoregression, column autoregression, the two variances, then the
//! transition matrix. Every block is the exact maximizer given the blocks already updated,
//! so a sweep never decreases [`q_function`].

use crate::error::{Error, Result};
use crate::estep::{contract_c, contract_moments, contract_r, PosteriorMoments};
use crate::linalg::{right_solve_spd, Mat};
use crate::model::{MatrixSeries, ModelParams, RegimeParams};

/// Lower bound for both variance estimates.
pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Transition probabilities are clipped to `[ε, 1 − ε]`.
pub const TRANSITION_EPS: f64 = 1e-8;

/// Everything an M-step needs: data, posterior moments computed under `prev`, and `prev` itself.
#[derive(Debug, Clone, Copy)]
pub struct MStepInput<'a> {
    pub series: &'a MatrixSeries,
    pub moments: &'a PosteriorMoments,
    pub prev: &'a ModelParams,
}

impl MStepInput<'_> {
    fn check(&self) -> Result<()> {
        if self.series.len() != self.moments.len() {
            return Err(Error::Dimension(format!(
                "series has {} observations but moments cover {}",
                self.series.len(),
                self.moments.len()
            )));
        }
        let r = self.prev.dims.factor_len() as f64;
        for k in 0..self.prev.dims.regimes {
            let mass = self.moments.regime_mass(k);
            if !(mass > r) {
                return Err(Error::MStep {
                    regime: k,
                    reason: format!("effective sample size {mass:.3} does not exceed factor dimension {r}"),
                });
            }
        }
        Ok(())
    }

    /// Active `(t, w)` pairs for regime `k`, `t` one-based.
    fn weights(&self, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (1..=self.moments.len()).filter_map(move |t| {
            let m = self.moments.at(t, k);
            m.is_active().then_some((t, m.w))
        })
    }
}

fn solve(regime: usize, what: &str, num: &Mat, gram: &Mat) -> Result<Mat> {
    right_solve_spd(num, gram).map_err(|e| Error::MStep { regime, reason: format!("{what}: {e}") })
}

/// Row loadings given the previous column loadings, then column loadings given the new rows.
pub fn update_loadings(input: &MStepInput) -> Result<Vec<(Mat, Mat)>> {
    let d = input.prev.dims;
    (0..d.regimes)
        .map(|k| {
            let col_prev = &input.prev.regimes[k].col_loading;
            let mut num = Mat::zeros(d.rows, d.row_factors);
            let mut gram = Mat::zeros(d.row_factors, d.row_factors);
            for (t, w) in input.weights(k) {
                let f = input.moments.factor(t, k);
                num += input.series.get(t - 1) * col_prev * f.transpose() * w;
                gram += contract_c(&input.moments.at(t, k).p2, col_prev) * w;
            }
            let row = solve(k, "row loading", &num, &gram)?;

            let mut num = Mat::zeros(d.cols, d.col_factors);
            let mut gram = Mat::zeros(d.col_factors, d.col_factors);
            for (t, w) in input.weights(k) {
                let f = input.moments.factor(t, k);
                num += input.series.get(t - 1).transpose() * &row * f * w;
                gram += contract_r(&input.moments.at(t, k).p2, &row) * w;
            }
            let col = solve(k, "column loading", &num, &gram)?;
            Ok((row, col))
        })
        .collect()
}

/// Weighted residual sum `Σ_t Σ_k w E‖Y_t − R_k F_t C_kᵀ‖²` for the given loadings.
fn obs_residual(input: &MStepInput, loadings: &[(Mat, Mat)]) -> f64 {
    let mut total = 0.0;
    for (k, (row, col)) in loadings.iter().enumerate() {
        let rtr = row.transpose() * row;
        for (t, w) in input.weights(k) {
            let y = input.series.get(t - 1);
            let f = input.moments.factor(t, k);
            let quad = (&rtr * contract_c(&input.moments.at(t, k).p2, col)).trace();
            let cross = (row.transpose() * y * col * f.transpose()).trace();
            total += w * (quad - 2.0 * cross + y.norm_squared());
        }
    }
    total
}

/// Observation noise variance for the given loadings.
pub fn update_obs_var(input: &MStepInput, loadings: &[(Mat, Mat)]) -> f64 {
    let d = input.prev.dims;
    let count = (input.series.len() * d.obs_len()) as f64;
    (obs_residual(input, loadings) / count).max(VARIANCE_FLOOR)
}

/// Intercepts given the previous autoregressions, then row autoregressions given the new
/// intercepts and previous column autoregressions. Returns `(B_k, Φ_k)` per regime.
pub fn update_dynamics(input: &MStepInput) -> Result<Vec<(Mat, Mat)>> {
    let d = input.prev.dims;
    (0..d.regimes)
        .map(|k| {
            let reg = &input.prev.regimes[k];
            let (phi_prev, gamma) = (&reg.row_ar, &reg.col_ar);
            let mut mass = 0.0;
            let mut sum = Mat::zeros(d.row_factors, d.col_factors);
            for (t, w) in input.weights(k) {
                let f = input.moments.factor(t, k);
                let f_prev = input.moments.factor_prev(t, k);
                sum += (f - phi_prev * f_prev * gamma.transpose()) * w;
                mass += w;
            }
            let intercept = sum / mass;

            let mut num = Mat::zeros(d.row_factors, d.row_factors);
            let mut gram = Mat::zeros(d.row_factors, d.row_factors);
            for (t, w) in input.weights(k) {
                let sc = contract_moments(input.moments.at(t, k), phi_prev, gamma);
                let f_prev = input.moments.factor_prev(t, k);
                num += (sc.p2k - &intercept * gamma * f_prev.transpose()) * w;
                gram += sc.pstar2k * w;
            }
            let phi = solve(k, "row autoregression", &num, &gram)?;
            Ok((intercept, phi))
        })
        .collect()
}

/// Column autoregressions given the new intercepts and row autoregressions.
pub fn update_gamma(input: &MStepInput, dynamics: &[(Mat, Mat)]) -> Result<Vec<Mat>> {
    let d = input.prev.dims;
    dynamics
        .iter()
        .enumerate()
        .map(|(k, (intercept, phi))| {
            let gamma_prev = &input.prev.regimes[k].col_ar;
            let mut num = Mat::zeros(d.col_factors, d.col_factors);
            let mut gram = Mat::zeros(d.col_factors, d.col_factors);
            for (t, w) in input.weights(k) {
                let sc = contract_moments(input.moments.at(t, k), phi, gamma_prev);
                let f_prev = input.moments.factor_prev(t, k);
                num += (sc.p1k.transpose() - intercept.transpose() * phi * f_prev) * w;
                gram += sc.pstar1k * w;
            }
            solve(k, "column autoregression", &num, &gram)
        })
        .collect()
}

/// Weighted `Σ_t Σ_k w E‖F_t − B_k − Φ_k F_{t−1} Γ_kᵀ‖²` for the given regime parameters.
fn state_residual(input: &MStepInput, regimes: &[RegimeParams]) -> f64 {
    let mut total = 0.0;
    for (k, reg) in regimes.iter().enumerate() {
        let (b, phi, gamma) = (&reg.intercept, &reg.row_ar, &reg.col_ar);
        for (t, w) in input.weights(k) {
            let sc = contract_moments(input.moments.at(t, k), phi, gamma);
            let f = input.moments.factor(t, k);
            let f_prev = input.moments.factor_prev(t, k);
            let value = sc.pk.trace() - 2.0 * (&f * b.transpose()).trace() - 2.0 * (&sc.p2k * phi.transpose()).trace()
                + b.norm_squared()
                + 2.0 * (b * gamma * f_prev.transpose() * phi.transpose()).trace()
                + (phi * &sc.pstar2k * phi.transpose()).trace();
            total += w * value;
        }
    }
    total
}

/// State noise variance for the given regime parameters.
pub fn update_state_var(input: &MStepInput, regimes: &[RegimeParams]) -> f64 {
    let count = (input.series.len() * input.prev.dims.factor_len()) as f64;
    (state_residual(input, regimes) / count).max(VARIANCE_FLOOR)
}

/// Transition matrix from the smoothed pair weights, clipped to `[ε, 1 − ε]` and renormalized.
pub fn update_transition(pm: &PosteriorMoments) -> Result<Mat> {
    let m = pm.dims.regimes;
    if m == 1 {
        return Ok(Mat::from_element(1, 1, 1.0));
    }
    let mut counts = Mat::zeros(m, m);
    for step in &pm.steps {
        for (k, mom) in step.iter().enumerate() {
            for i in 0..m {
                counts[(i, k)] += mom.w_pair[i];
            }
        }
    }
    let mut out = Mat::zeros(m, m);
    for i in 0..m {
        let total = counts.row(i).sum();
        if !(total > 0.0) {
            return Err(Error::MStep { regime: i, reason: "no posterior mass leaves this regime".into() });
        }
        let clipped: Vec<f64> = (0..m)
            .map(|k| (counts[(i, k)] / total).clamp(TRANSITION_EPS, 1.0 - TRANSITION_EPS))
            .collect();
        let sum: f64 = clipped.iter().sum();
        for k in 0..m {
            out[(i, k)] = clipped[k] / sum;
        }
        // Push the rounding residue into the largest entry so the row sums to one.
        let largest = (0..m).max_by(|&a, &b| out[(i, a)].total_cmp(&out[(i, b)])).expect("m > 0");
        let rest: f64 = (0..m).filter(|&k| k != largest).map(|k| out[(i, k)]).sum();
        out[(i, largest)] = 1.0 - rest;
    }
    Ok(out)
}

/// One full M-step producing the next parameter iterate.
pub fn sweep(input: &MStepInput) -> Result<ModelParams> {
    input.check()?;
    let loadings = update_loadings(input)?;
    let dynamics = update_dynamics(input)?;
    let gammas = update_gamma(input, &dynamics)?;
    let regimes: Vec<RegimeParams> = loadings
        .iter()
        .zip(&dynamics)
        .zip(gammas)
        .map(|(((row, col), (intercept, phi)), gamma)| RegimeParams {
            row_loading: row.clone(),
            col_loading: col.clone(),
            intercept: intercept.clone(),
            row_ar: phi.clone(),
            col_ar: gamma,
        })
        .collect();
    let obs_var = update_obs_var(input, &loadings);
    let state_var = update_state_var(input, &regimes);
    let transition = update_transition(input.moments)?;
    Ok(ModelParams { dims: input.prev.dims, regimes, obs_var, state_var, transition })
}

/// Expected complete-data log-likelihood split by block, without additive constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QValue {
    pub observation: f64,
    pub state: f64,
    pub regime: f64,
}

impl QValue {
    pub fn total(&self) -> f64 {
        self.observation + self.state + self.regime
    }
}

/// Evaluates the expected complete-data log-likelihood of `params` under fixed moments.
pub fn q_function(series: &MatrixSeries, pm: &PosteriorMoments, params: &ModelParams) -> QValue {
    let input = MStepInput { series, moments: pm, prev: params };
    let n = series.len() as f64;
    let loadings: Vec<(Mat, Mat)> =
        params.regimes.iter().map(|r| (r.row_loading.clone(), r.col_loading.clone())).collect();
    let obs_count = n * params.dims.obs_len() as f64;
    let state_count = n * params.dims.factor_len() as f64;
    let observation =
        -0.5 * obs_count * params.obs_var.ln() - obs_residual(&input, &loadings) / (2.0 * params.obs_var);
    let state =
        -0.5 * state_count * params.state_var.ln() - state_residual(&input, &params.regimes) / (2.0 * params.state_var);
    let mut regime = 0.0;
    for step in &pm.steps {
        for (k, mom) in step.iter().enumerate() {
            for (i, &w) in mom.w_pair.iter().enumerate() {
                if w > 0.0 {
                    regime += w * params.transition[(i, k)].ln();
                }
            }
        }
    }
    QValue { observation, state, regime }
}
