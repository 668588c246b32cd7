//! The estimation loop: filter, smoother, posterior moments and M-step until the parameter
//! change falls below a threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estep::compute_moments;
use crate::filter::filter_pass;
use crate::init::{build_init, InitConfig};
use crate::linalg::{frob2, projection, Mat};
use crate::model::{normalize_identification, Dims, MatrixSeries, ModelParams};
use crate::mstep::{sweep, MStepInput};
use crate::smoother::smooth_pass;

/// Relative log-likelihood drop that stops the loop.
pub const DECREASE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    /// Data-driven starting values.
    Auto,
    /// Start from the given parameters.
    Provided { params: ModelParams },
}

fn default_eps() -> f64 {
    1e-6
}

fn default_max_iter() -> usize {
    500
}

fn default_true() -> bool {
    true
}

fn auto_init() -> InitStrategy {
    InitStrategy::Auto
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Convergence threshold on the squared parameter change.
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "auto_init")]
    pub init: InitStrategy,
    /// Stop and keep the better iterate when the log-likelihood drops by more than
    /// [`DECREASE_TOL`] relative.
    #[serde(default = "default_true")]
    pub track_loglik: bool,
    /// Seed for the randomized parts of automatic initialization.
    #[serde(default)]
    pub seed: u64,
    /// Preferred output position of the regime that fixes the rotation.
    #[serde(default)]
    pub anchor: usize,
    /// Target number of initialization segments.
    #[serde(default)]
    pub segments: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            eps: default_eps(),
            max_iter: default_max_iter(),
            init: InitStrategy::Auto,
            track_loglik: true,
            seed: 0,
            anchor: 0,
            segments: None,
        }
    }
}

impl FitConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::InvalidInput(format!("eps={} must be positive", self.eps)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    /// The log-likelihood fell; the previous iterate was returned.
    LikelihoodDecrease,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Identification-normalized parameters.
    pub theta: ModelParams,
    /// Parameters as produced by the last M-step.
    pub theta_raw: ModelParams,
    /// Smoothed factors `Σ_k w_{t|n}^{(k)} F_{t|n}^{(k)}` in the coordinates of `theta`.
    pub factors: Vec<Mat>,
    /// Most probable zero-based regime per time point, labelled as in `theta`.
    pub states: Vec<usize>,
    /// Smoothed regime probabilities, `n × M`, columns ordered as in `theta`.
    pub weights: Mat,
    /// Observed-data log-likelihood at the start of every iteration.
    pub loglik_trace: Vec<f64>,
    /// Squared parameter change of every completed M-step.
    pub distance_trace: Vec<f64>,
    /// Log-likelihood at the returned parameters.
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stop: StopReason,
}

/// Observed-data log-likelihood from the filter's predictive decomposition.
pub fn observed_loglik(params: &ModelParams, series: &MatrixSeries) -> Result<f64> {
    Ok(filter_pass(params, series)?.total_loglik)
}

/// Squared parameter change with loadings compared through their column-space projections.
pub fn param_distance(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in a.regimes.iter().zip(&b.regimes) {
        total += frob2(&(projection(&x.row_loading)? - projection(&y.row_loading)?));
        total += frob2(&(projection(&x.col_loading)? - projection(&y.col_loading)?));
        total += frob2(&(&x.intercept - &y.intercept));
        total += frob2(&(&x.row_ar - &y.row_ar));
        total += frob2(&(&x.col_ar - &y.col_ar));
    }
    total += (a.obs_var - b.obs_var).powi(2) + (a.state_var - b.state_var).powi(2);
    total += frob2(&(&a.transition - &b.transition));
    Ok(total)
}

fn stage(iteration: usize, name: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Em { iteration, stage: name, source: Box::new(e) }
}

/// Fits the model by EM.
pub fn fit(series: &MatrixSeries, dims: Dims, config: &FitConfig) -> Result<FitResult> {
    config.check()?;
    dims.check()?;
    if series.rows() != dims.rows || series.cols() != dims.cols {
        return Err(Error::Dimension(format!(
            "series is {}x{} but dims say {}x{}",
            series.rows(),
            series.cols(),
            dims.rows,
            dims.cols
        )));
    }
    let mut theta = match &config.init {
        InitStrategy::Provided { params } => {
            if params.dims != dims {
                return Err(Error::Dimension("provided initial parameters do not match dims".into()));
            }
            params.check()?;
            params.clone()
        }
        InitStrategy::Auto => {
            let init_config = InitConfig { segments: config.segments, seed: config.seed, ..InitConfig::default() };
            build_init(series, dims, &init_config)?.params
        }
    };

    let mut loglik_trace = Vec::new();
    let mut distance_trace = Vec::new();
    let mut previous: Option<ModelParams> = None;
    let mut stop = StopReason::MaxIterations;
    for iteration in 1..=config.max_iter {
        let filt = filter_pass(&theta, series).map_err(stage(iteration, "filter"))?;
        let ll = filt.total_loglik;
        if !ll.is_finite() {
            return Err(stage(iteration, "filter")(Error::InvalidInput(format!("log-likelihood is {ll}"))));
        }
        let dropped = config.track_loglik && loglik_trace.last().is_some_and(|&last: &f64| ll < last - DECREASE_TOL * last.abs());
        loglik_trace.push(ll);
        if dropped {
            log::warn!(
                "log-likelihood fell from {} to {ll} at iteration {iteration}; keeping the previous iterate",
                loglik_trace[loglik_trace.len() - 2]
            );
            theta = previous.take().expect("a drop needs an earlier iterate");
            stop = StopReason::LikelihoodDecrease;
            break;
        }
        let smooth = smooth_pass(&theta, &filt).map_err(stage(iteration, "smoother"))?;
        let moments = compute_moments(&theta, &filt, &smooth).map_err(stage(iteration, "moments"))?;
        let next = sweep(&MStepInput { series, moments: &moments, prev: &theta }).map_err(stage(iteration, "m-step"))?;
        let dis = param_distance(&theta, &next).map_err(stage(iteration, "distance"))?;
        log::debug!("iteration {iteration}: loglik {ll:.6}, change {dis:.3e}");
        distance_trace.push(dis);
        previous = Some(std::mem::replace(&mut theta, next));
        if dis <= config.eps {
            stop = StopReason::Converged;
            break;
        }
    }
    finish(series, theta, loglik_trace, distance_trace, stop, config.anchor)
}

fn finish(
    series: &MatrixSeries,
    theta_raw: ModelParams,
    loglik_trace: Vec<f64>,
    distance_trace: Vec<f64>,
    stop: StopReason,
    anchor: usize,
) -> Result<FitResult> {
    let iterations = loglik_trace.len();
    let final_stage = |e| Error::Em { iteration: iterations, stage: "final e-step", source: Box::new(e) };
    let filt = filter_pass(&theta_raw, series).map_err(final_stage)?;
    let smooth = smooth_pass(&theta_raw, &filt).map_err(final_stage)?;
    let norm = normalize_identification(&theta_raw, anchor.min(theta_raw.dims.regimes - 1))
        .map_err(|e| Error::Em { iteration: iterations, stage: "normalization", source: Box::new(e) })?;
    let dims = theta_raw.dims;
    let n = series.len();
    let mut weights = Mat::zeros(n, dims.regimes);
    let mut factors = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    for t in 1..=n {
        let step = smooth.at(t);
        let mut f = Mat::zeros(dims.row_factors, dims.col_factors);
        for k in 0..dims.regimes {
            f += Mat::from_column_slice(dims.row_factors, dims.col_factors, step.f_n[k].as_slice()) * step.w_n[k];
        }
        factors.push(norm.rotate_factor(&f));
        for (i, &src) in norm.order.iter().enumerate() {
            weights[(t - 1, i)] = step.w_n[src];
        }
        let row = weights.row(t - 1);
        states.push((0..dims.regimes).max_by(|&a, &b| row[a].total_cmp(&row[b])).expect("M >= 1"));
    }
    Ok(FitResult {
        theta: norm.params,
        theta_raw,
        factors,
        states,
        weights,
        loglik: filt.total_loglik,
        loglik_trace,
        distance_trace,
        iterations,
        converged: stop == StopReason::Converged,
        stop,
    })
}
