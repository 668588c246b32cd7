//! Forward pass: per regime-pair Kalman prediction and correction, log-domain
//! regime filtering, and moment-matching collapse of the `M × M` pair posteriors.
//!
//! The correction never forms `pq × pq` matrices. With `Λ = C ⊗ R` it only needs
//! the `r × r` Gram matrix `ΛᵀΛ = CᵀC ⊗ RᵀR` and the projection `Λᵀy = vec(RᵀYC)`.

use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::linalg::{kron, logsumexp, sqrt_psd, stable_sum, symmetrize, vec, Mat, Vector};
use crate::model::{stationary_dist, MatrixSeries, ModelParams, RegimeParams};

/// Regime weights below this are treated as zero when collapsing.
pub const WEIGHT_FLOOR: f64 = 1e-300;

/// Initial factor covariance at time zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialCov {
    /// Exactly known initial factor.
    #[default]
    Zero,
    /// `σ_ε² I`, for starts where a zero covariance is ill-conditioned.
    StateVar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FilterConfig {
    pub initial_cov: InitialCov,
}

/// Gaussian posterior of the factor for one (previous, current) regime pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPosterior {
    pub f_pred: Vector,
    pub v_pred: Mat,
    pub f_corr: Vector,
    pub v_corr: Mat,
    pub log_density: f64,
}

/// Collapsed per-regime state.
#[derive(Debug, Clone, PartialEq)]
pub struct Collapsed {
    pub w_marg: Vector,
    pub f: Vec<Vector>,
    pub v: Vec<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    /// Row-major `M × M` grid indexed `[from * M + to]`.
    pub pair: Vec<PairPosterior>,
    /// `w_joint[(i, k)] = P(s_{t-1}=i, s_t=k | y_1..y_t)`.
    pub w_joint: Mat,
    pub w_marg: Vector,
    pub f_coll: Vec<Vector>,
    pub v_coll: Vec<Mat>,
    pub loglik_increment: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    /// State at time zero.
    pub initial: Collapsed,
    pub steps: Vec<FilterStep>,
    pub total_loglik: f64,
}

impl FilterOutput {
    /// Collapsed filtered state at time `t`, where `t = 0` is the initial state.
    pub fn collapsed(&self, t: usize) -> (&Vector, &[Vector], &[Mat]) {
        if t == 0 {
            (&self.initial.w_marg, &self.initial.f, &self.initial.v)
        } else {
            let s = &self.steps[t - 1];
            (&s.w_marg, &s.f_coll, &s.v_coll)
        }
    }
}

/// Per-regime quantities reused at every time step.
#[derive(Debug, Clone)]
pub(crate) struct RegimeCache {
    pub psi: Mat,
    pub beta: Vector,
    /// `ΛᵀΛ = CᵀC ⊗ RᵀR`.
    pub gram: Mat,
    pub gram_sqrt: Mat,
}

impl RegimeCache {
    pub fn new(reg: &RegimeParams) -> Self {
        let ctc = reg.col_loading.transpose() * &reg.col_loading;
        let rtr = reg.row_loading.transpose() * &reg.row_loading;
        let mut gram = kron(&ctc, &rtr);
        symmetrize(&mut gram);
        let gram_sqrt = sqrt_psd(&gram);
        Self { psi: reg.transition_kron(), beta: reg.intercept_vec(), gram, gram_sqrt }
    }

    pub fn all(params: &ModelParams) -> Vec<Self> {
        params.regimes.iter().map(Self::new).collect()
    }
}

/// Sufficient statistics of one observation under one regime.
#[derive(Debug, Clone)]
pub(crate) struct ObsStats {
    /// `‖Y‖²`.
    pub sq_norm: f64,
    /// `Λᵀy = vec(RᵀYC)`.
    pub proj: Vector,
    pub obs_len: usize,
}

impl ObsStats {
    pub fn new(reg: &RegimeParams, y: &Mat) -> Self {
        Self {
            sq_norm: y.norm_squared(),
            proj: vec(&(reg.row_loading.transpose() * y * &reg.col_loading)),
            obs_len: y.len(),
        }
    }
}

pub(crate) fn predict_cached(cache: &RegimeCache, state_var: f64, f_prev: &Vector, v_prev: &Mat) -> (Vector, Mat) {
    let f = &cache.beta + &cache.psi * f_prev;
    let mut v = &cache.psi * v_prev * cache.psi.transpose();
    for i in 0..v.nrows() {
        v[(i, i)] += state_var;
    }
    symmetrize(&mut v);
    (f, v)
}

pub(crate) fn correct_cached(
    cache: &RegimeCache,
    obs_var: f64,
    stats: &ObsStats,
    f_pred: &Vector,
    v_pred: &Mat,
) -> Result<(Vector, Mat)> {
    let r = f_pred.len();
    let system = Mat::identity(r, r) + v_pred * &cache.gram / obs_var;
    let mut v_corr = system.lu().solve(v_pred).ok_or(Error::Singular {
        condition: f64::INFINITY,
    })?;
    symmetrize(&mut v_corr);
    let resid = &stats.proj - &cache.gram * f_pred;
    let f_corr = f_pred + &v_corr * resid / obs_var;
    Ok((f_corr, v_corr))
}

pub(crate) fn log_density_cached(
    cache: &RegimeCache,
    obs_var: f64,
    stats: &ObsStats,
    f_pred: &Vector,
    v_pred: &Mat,
    v_corr: &Mat,
) -> Result<f64> {
    let mut sandwich = &cache.gram_sqrt * v_pred * &cache.gram_sqrt;
    symmetrize(&mut sandwich);
    let eig = SymmetricEigen::new(sandwich).eigenvalues;
    let mut log_det = 0.0;
    for &d in eig.iter() {
        let factor = 1.0 + d / obs_var;
        if !(factor > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: 0 });
        }
        log_det += factor.ln();
    }
    let s2 = obs_var;
    let s4 = s2 * s2;
    let u = &stats.proj;
    let af = &cache.gram * f_pred;
    let vu = v_corr * u;
    let vaf = v_corr * &af;
    let a1 = stats.sq_norm / s2;
    let a2 = 2.0 * u.dot(f_pred) / s2;
    let a3 = f_pred.dot(&af) / s2;
    let b1 = u.dot(&vu) / s4;
    let b2 = 2.0 * u.dot(&vaf) / s4;
    let b3 = af.dot(&vaf) / s4;
    let quad = a1 - a2 + a3 - b1 + b2 - b3;
    let n = stats.obs_len as f64;
    Ok(-0.5 * n * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * log_det - 0.5 * quad)
}

/// One-step prediction `β_k + Ψ_k f`, `Ψ_k V Ψ_kᵀ + σ_ε² I` into regime `to`.
pub fn predict_pair(params: &ModelParams, to: usize, f_prev: &Vector, v_prev: &Mat) -> (Vector, Mat) {
    predict_cached(&RegimeCache::new(&params.regimes[to]), params.state_var, f_prev, v_prev)
}

/// Measurement update under regime `k` using only `r × r` solves.
pub fn correct_pair(params: &ModelParams, k: usize, y: &Mat, f_pred: &Vector, v_pred: &Mat) -> Result<(Vector, Mat)> {
    let reg = &params.regimes[k];
    correct_cached(&RegimeCache::new(reg), params.obs_var, &ObsStats::new(reg, y), f_pred, v_pred)
}

/// Log predictive density of `y` under regime `k` given the predicted factor moments.
pub fn pair_log_density(
    params: &ModelParams,
    k: usize,
    y: &Mat,
    f_pred: &Vector,
    v_pred: &Mat,
    v_corr: &Mat,
) -> Result<f64> {
    let reg = &params.regimes[k];
    log_density_cached(&RegimeCache::new(reg), params.obs_var, &ObsStats::new(reg, y), f_pred, v_pred, v_corr)
}

/// Prior predictive joint weights `p_ik · w_{t-1|t-1}^{(i)}`, in log domain.
fn log_prior(prev_marg: &Vector, transition: &Mat) -> Mat {
    let m = prev_marg.len();
    Mat::from_fn(m, m, |i, k| prev_marg[i].ln() + transition[(i, k)].ln())
}

/// Regime update. `prev_marg` is `w_{t-1|t-1}`; returns the posterior joint and marginal
/// weights and the log predictive likelihood of the observation.
pub fn hamilton_step(prev_marg: &Vector, transition: &Mat, log_densities: &Mat) -> Option<(Mat, Vector, f64)> {
    let m = prev_marg.len();
    let prior = log_prior(prev_marg, transition);
    let log_post = Mat::from_fn(m, m, |i, k| {
        let v = prior[(i, k)] + log_densities[(i, k)];
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    });
    let increment = logsumexp(log_post.as_slice());
    if !increment.is_finite() {
        return None;
    }
    let mut joint = log_post.map(|v| (v - increment).exp());
    let total = joint.sum();
    joint /= total;
    let marg = Vector::from_iterator(m, (0..m).map(|k| joint.column(k).sum()));
    Some((joint, marg, increment))
}

/// Same as [`hamilton_step`] but starting from a joint weight matrix.
pub fn hamilton_step_joint(prev_joint: &Mat, transition: &Mat, log_densities: &Mat) -> Option<(Mat, Vector, f64)> {
    let m = prev_joint.ncols();
    let prev_marg = Vector::from_iterator(m, (0..m).map(|i| prev_joint.column(i).sum()));
    hamilton_step(&prev_marg, transition, log_densities)
}

/// Moment-matched mixture over the previous regime for every current regime.
///
/// Regimes with (numerically) zero posterior weight carry the prior-weighted predictions.
pub fn collapse(
    w_joint: &Mat,
    w_marg: &Vector,
    pair: &[PairPosterior],
    prior_joint: &Mat,
) -> (Vec<Vector>, Vec<Mat>) {
    let m = w_marg.len();
    let mut fs = Vec::with_capacity(m);
    let mut vs = Vec::with_capacity(m);
    for k in 0..m {
        let (weights, use_pred): (Vec<f64>, bool) = if w_marg[k] >= WEIGHT_FLOOR {
            ((0..m).map(|i| w_joint[(i, k)] / w_marg[k]).collect(), false)
        } else {
            let col: Vec<f64> = (0..m).map(|i| prior_joint[(i, k)]).collect();
            let s: f64 = col.iter().sum();
            if s > 0.0 && s.is_finite() {
                (col.iter().map(|w| w / s).collect(), true)
            } else {
                (vec![1.0 / m as f64; m], true)
            }
        };
        let moments = |i: usize| {
            let p = &pair[i * m + k];
            if use_pred {
                (&p.f_pred, &p.v_pred)
            } else {
                (&p.f_corr, &p.v_corr)
            }
        };
        let r = pair[k].f_pred.len();
        let mut f = Vector::zeros(r);
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                f += moments(i).0 * w;
            }
        }
        let mut v = Mat::zeros(r, r);
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                let (fi, vi) = moments(i);
                let d = &f - fi;
                v += (vi + &d * d.transpose()) * w;
            }
        }
        symmetrize(&mut v);
        fs.push(f);
        vs.push(v);
    }
    (fs, vs)
}

/// Initial collapsed state: zero mean, configured covariance, stationary regime weights.
pub fn initial_state(params: &ModelParams, config: &FilterConfig) -> Result<Collapsed> {
    let m = params.dims.regimes;
    let r = params.dims.factor_len();
    let pi = stationary_dist(&params.transition)?.probs;
    let v0 = match config.initial_cov {
        InitialCov::Zero => Mat::zeros(r, r),
        InitialCov::StateVar => Mat::identity(r, r) * params.state_var,
    };
    Ok(Collapsed { w_marg: pi, f: vec![Vector::zeros(r); m], v: vec![v0; m] })
}

/// Runs the filter over the whole series.
pub fn filter_pass(params: &ModelParams, series: &MatrixSeries) -> Result<FilterOutput> {
    filter_pass_with(params, series, &FilterConfig::default())
}

pub fn filter_pass_with(params: &ModelParams, series: &MatrixSeries, config: &FilterConfig) -> Result<FilterOutput> {
    params.check()?;
    let d = params.dims;
    if series.rows() != d.rows || series.cols() != d.cols {
        return Err(Error::Dimension(format!(
            "series is {}x{} but parameters expect {}x{}",
            series.rows(),
            series.cols(),
            d.rows,
            d.cols
        )));
    }
    let m = d.regimes;
    let caches = RegimeCache::all(params);
    let initial = initial_state(params, config)?;
    let mut steps: Vec<FilterStep> = Vec::with_capacity(series.len());
    for (idx, y) in series.iter().enumerate() {
        let t = idx + 1;
        let (prev_marg, prev_f, prev_v) = match steps.last() {
            Some(s) => (&s.w_marg, &s.f_coll, &s.v_coll),
            None => (&initial.w_marg, &initial.f, &initial.v),
        };
        let stats: Vec<ObsStats> = params.regimes.iter().map(|reg| ObsStats::new(reg, y)).collect();
        let mut pair = Vec::with_capacity(m * m);
        let mut log_dens = Mat::zeros(m, m);
        for i in 0..m {
            for k in 0..m {
                let wrap = |e: Error| Error::FilterStep { t, from: i, to: k, source: Box::new(e) };
                let (f_pred, v_pred) = predict_cached(&caches[k], params.state_var, &prev_f[i], &prev_v[i]);
                let (f_corr, v_corr) =
                    correct_cached(&caches[k], params.obs_var, &stats[k], &f_pred, &v_pred).map_err(wrap)?;
                let ld = log_density_cached(&caches[k], params.obs_var, &stats[k], &f_pred, &v_pred, &v_corr)
                    .map_err(wrap)?;
                log_dens[(i, k)] = ld;
                pair.push(PairPosterior { f_pred, v_pred, f_corr, v_corr, log_density: ld });
            }
        }
        let (w_joint, w_marg, inc) =
            hamilton_step(prev_marg, &params.transition, &log_dens).ok_or(Error::DegenerateFilter { t })?;
        let prior = Mat::from_fn(m, m, |i, k| prev_marg[i] * params.transition[(i, k)]);
        let (f_coll, v_coll) = collapse(&w_joint, &w_marg, &pair, &prior);
        steps.push(FilterStep { pair, w_joint, w_marg, f_coll, v_coll, loglik_increment: inc });
    }
    let total_loglik = stable_sum(steps.iter().map(|s| s.loglik_increment));
    Ok(FilterOutput { initial, steps, total_loglik })
}
