//! Synthetic data generation for the switching matrix factor model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inv_sqrt_spd, Mat, Vector};
use crate::model::{spectral_radius_switching, stationary_dist, Dims, MatrixSeries, ModelParams, RegimeParams};

/// Steps simulated and discarded before recording so the factors start near stationarity.
pub const BURN_IN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDist {
    Gaussian,
    /// Centered χ²₁ innovations rescaled to variance σ².
    Chisq1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Loadings and dynamics all switch.
    FullSwitching,
    /// Dynamics switch, loadings are shared across regimes.
    StateOnly,
    /// A single regime.
    Static,
}

fn default_stay() -> f64 {
    0.95
}

fn default_state_var() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dims: Dims,
    /// Series length.
    pub n: usize,
    /// Intercept scale of the first regime (`b`).
    #[serde(rename = "b")]
    pub intercept_scale: f64,
    /// AR(1) coefficient of the idiosyncratic errors (`ψ`).
    #[serde(rename = "psi")]
    pub error_ar: f64,
    /// Marginal variance of every error entry (`σ²`).
    #[serde(rename = "sigma2")]
    pub obs_var: f64,
    #[serde(rename = "sigma_eps2", default = "default_state_var")]
    pub state_var: f64,
    pub error_dist: ErrorDist,
    pub variant: ModelVariant,
    /// Diagonal of the transition matrix; the remainder is spread evenly.
    #[serde(default = "default_stay")]
    pub stay_prob: f64,
    pub seed: u64,
}

impl SimConfig {
    /// The reference design: 10×10 observations, 2×2 factors, two persistent regimes.
    pub fn reference(n: usize, seed: u64) -> Self {
        Self {
            dims: Dims::new(10, 10, 2, 2, 2),
            n,
            intercept_scale: 0.5,
            error_ar: 0.1,
            obs_var: 1.0,
            state_var: 1.0,
            error_dist: ErrorDist::Gaussian,
            variant: ModelVariant::FullSwitching,
            stay_prob: 0.95,
            seed,
        }
    }

    fn effective_dims(&self) -> Dims {
        let mut d = self.dims;
        if self.variant == ModelVariant::Static {
            d.regimes = 1;
        }
        d
    }

    pub fn check(&self) -> Result<()> {
        self.dims.check()?;
        if self.n < 1 {
            return Err(Error::InvalidInput("series length must be positive".into()));
        }
        if !(self.error_ar.abs() < 1.0) {
            return Err(Error::InvalidInput(format!("psi={} must satisfy |psi| < 1", self.error_ar)));
        }
        if !(self.obs_var > 0.0) || !(self.state_var > 0.0) {
            return Err(Error::InvalidInput("variances must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.stay_prob) {
            return Err(Error::InvalidInput(format!("stay_prob={} outside [0,1]", self.stay_prob)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub series: MatrixSeries,
    pub factors: Vec<Mat>,
    /// Zero-based regime labels.
    pub states: Vec<usize>,
    pub truth: ModelParams,
}

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn sample_index<R: Rng + ?Sized>(probs: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Markov chain path of length `n` started at `start`.
pub fn simulate_chain_from<R: Rng + ?Sized>(transition: &Mat, n: usize, start: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut s = start;
    for t in 0..n {
        if t > 0 {
            s = sample_index(transition.row(s).iter().copied(), rng);
        }
        out.push(s);
    }
    out
}

/// Markov chain path of length `n` with the initial state drawn from the stationary law.
pub fn simulate_chain<R: Rng + ?Sized>(transition: &Mat, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let pi = stationary_dist(transition)?.probs;
    let start = sample_index(pi.iter().copied(), rng);
    Ok(simulate_chain_from(transition, n, start, rng))
}

/// Disjoint contiguous row blocks of near-equal size, one per column.
pub fn support_mask(rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |i, j| if i * cols / rows == j { 1.0 } else { 0.0 })
}

/// Rescales `x` to `√scale · X (XᵀX)^{-1/2}`, so the result satisfies `LᵀL = scale·I`.
pub fn orthonormalize_loading(x: &Mat, scale: f64) -> Result<Mat> {
    if let Some(j) = x.column_iter().position(|c| c.iter().all(|&v| v == 0.0)) {
        return Err(Error::InvalidInput(format!("loading column {j} is identically zero")));
    }
    let g = x.transpose() * x;
    Ok(x * inv_sqrt_spd(&g)? * scale.sqrt())
}

fn masked_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Mat> {
    let mask = support_mask(rows, cols);
    let raw = Mat::from_fn(rows, cols, |_, _| rng.random_range(2.0..4.0));
    orthonormalize_loading(&raw.component_mul(&mask), rows as f64)
}

/// Per-regime `(R, C)` with U(2,4) entries on disjoint supports, normalized to `RᵀR = pI`, `CᵀC = qI`.
pub fn simulate_loadings<R: Rng + ?Sized>(dims: &Dims, shared: bool, rng: &mut R) -> Result<Vec<(Mat, Mat)>> {
    let mut out: Vec<(Mat, Mat)> = Vec::with_capacity(dims.regimes);
    for k in 0..dims.regimes {
        if shared && k > 0 {
            out.push(out[0].clone());
            continue;
        }
        let r = masked_uniform(dims.rows, dims.row_factors, rng)?;
        let c = masked_uniform(dims.cols, dims.col_factors, rng)?;
        out.push((r, c));
    }
    Ok(out)
}

/// Runs the factor recursion from `initial` with the given innovations.
pub fn propagate_factors(truth: &ModelParams, labels: &[usize], initial: &Mat, innovations: &[Mat]) -> Vec<Mat> {
    let sd = truth.state_var.sqrt();
    let mut prev = initial.clone();
    labels
        .iter()
        .zip(innovations)
        .map(|(&s, eps)| {
            let reg = &truth.regimes[s];
            let next = &reg.intercept + &reg.row_ar * &prev * reg.col_ar.transpose() + eps * sd;
            prev = next.clone();
            next
        })
        .collect()
}

/// Factor path along `labels` starting from a zero matrix, with standard normal innovations.
pub fn simulate_factors<R: Rng + ?Sized>(truth: &ModelParams, labels: &[usize], rng: &mut R) -> Vec<Mat> {
    let (k1, k2) = (truth.dims.row_factors, truth.dims.col_factors);
    let eps: Vec<Mat> = labels.iter().map(|_| Mat::from_fn(k1, k2, |_, _| std_normal(rng))).collect();
    propagate_factors(truth, labels, &Mat::zeros(k1, k2), &eps)
}

fn innovation<R: Rng + ?Sized>(dist: ErrorDist, chi: &ChiSquared<f64>, rng: &mut R) -> f64 {
    match dist {
        ErrorDist::Gaussian => std_normal(rng),
        ErrorDist::Chisq1 => (chi.sample(rng) - 1.0) / std::f64::consts::SQRT_2,
    }
}

/// Entrywise AR(1) error matrices with stationary marginal variance σ².
pub fn simulate_errors<R: Rng + ?Sized>(config: &SimConfig, n: usize, rng: &mut R) -> Vec<Mat> {
    let (p, q) = (config.dims.rows, config.dims.cols);
    let sd = config.obs_var.sqrt();
    let psi = config.error_ar;
    let scale = (1.0 - psi * psi).sqrt();
    let chi = ChiSquared::new(1.0).expect("one degree of freedom is valid");
    let mut prev = Mat::from_fn(p, q, |_, _| sd * innovation(config.error_dist, &chi, rng));
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let next = Mat::from_fn(p, q, |i, j| psi * prev[(i, j)] + scale * sd * innovation(config.error_dist, &chi, rng));
        out.push(next.clone());
        prev = next;
    }
    out
}

fn linspace_diag(top: f64, k: usize) -> Mat {
    let vals: Vec<f64> = (0..k)
        .map(|i| if k == 1 { top } else { top - 0.2 * i as f64 / (k - 1) as f64 })
        .collect();
    Mat::from_diagonal(&Vector::from_vec(vals))
}

fn reference_transition(m: usize, stay: f64) -> Mat {
    if m == 1 {
        return Mat::from_element(1, 1, 1.0);
    }
    let off = (1.0 - stay) / (m - 1) as f64;
    Mat::from_fn(m, m, |i, j| if i == j { stay } else { off })
}

fn intercept_scale(config: &SimConfig, k: usize, m: usize) -> f64 {
    if k == 0 {
        config.intercept_scale
    } else {
        0.1 * (m - k) as f64 / (m - 1) as f64
    }
}

/// Draws the true parameters for a configuration.
pub fn simulate_truth<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Result<ModelParams> {
    config.check()?;
    let dims = config.effective_dims();
    let (k1, k2, m) = (dims.row_factors, dims.col_factors, dims.regimes);
    let beta = Mat::from_fn(k1, k2, |_, _| rng.random_range(0.0..1.0));
    let loadings = simulate_loadings(&dims, config.variant == ModelVariant::StateOnly, rng)?;
    let regimes = loadings
        .into_iter()
        .enumerate()
        .map(|(k, (r, c))| {
            let top = 0.9 - 0.2 * k as f64;
            RegimeParams {
                row_loading: r,
                col_loading: c,
                intercept: &beta * intercept_scale(config, k, m),
                row_ar: linspace_diag(top, k1),
                col_ar: linspace_diag(top, k2),
            }
        })
        .collect();
    let truth = ModelParams {
        dims,
        regimes,
        obs_var: config.obs_var,
        state_var: config.state_var,
        transition: reference_transition(m, config.stay_prob),
    };
    truth.check()?;
    match spectral_radius_switching(&truth) {
        Ok(rho) if rho >= 1.0 => log::warn!("simulated factor process is not stationary (spectral radius {rho:.4})"),
        Err(e) => log::warn!("could not certify stationarity: {e}"),
        _ => {}
    }
    Ok(truth)
}

/// Simulates a full dataset. Identical configurations give identical output.
pub fn simulate(config: &SimConfig) -> Result<SimOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let truth = simulate_truth(config, &mut rng)?;
    simulate_with_truth(config, truth, &mut rng)
}

/// Simulates data from given true parameters, discarding a burn-in period.
pub fn simulate_with_truth<R: Rng + ?Sized>(config: &SimConfig, truth: ModelParams, rng: &mut R) -> Result<SimOutput> {
    let total = config.n + BURN_IN;
    let labels = simulate_chain(&truth.transition, total, rng)?;
    let factors_all = simulate_factors(&truth, &labels, rng);
    let errors = simulate_errors(config, config.n, rng);
    let states = labels[BURN_IN..].to_vec();
    let factors = factors_all[BURN_IN..].to_vec();
    let obs = states
        .iter()
        .zip(&factors)
        .zip(errors)
        .map(|((&s, f), e)| truth.regimes[s].common(f) + e)
        .collect();
    Ok(SimOutput { series: MatrixSeries::new(obs)?, factors, states, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{kron, vec};
    use nalgebra::dmatrix;

    #[test]
    fn absorbing_and_single_state_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(simulate_chain_from(&Mat::identity(2, 2), 50, 0, &mut rng).iter().all(|&s| s == 0));
        let one = simulate_chain(&dmatrix![1.0], 20, &mut rng).unwrap();
        assert!(one.iter().all(|&s| s == 0));
    }

    #[test]
    fn chain_transition_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = dmatrix![0.95, 0.05; 0.05, 0.95];
        let s = simulate_chain(&p, 100_000, &mut rng).unwrap();
        let mut counts = [[0.0_f64; 2]; 2];
        for w in s.windows(2) {
            counts[w[0]][w[1]] += 1.0;
        }
        for i in 0..2 {
            let row = counts[i][0] + counts[i][1];
            let phat = counts[i][i] / row;
            let se = (0.95 * 0.05 / row).sqrt();
            assert!((phat - 0.95).abs() < 0.01);
            assert!((phat - 0.95).abs() < 3.0 * se + 1e-3);
        }
    }

    #[test]
    fn constant_loading_normalizes() {
        let x = Mat::from_element(7, 1, 3.0);
        let r = orthonormalize_loading(&x, 7.0).unwrap();
        assert!(r.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(((r.transpose() * &r)[(0, 0)] - 7.0).abs() < 1e-10);
        assert!(orthonormalize_loading(&Mat::zeros(3, 1), 3.0).is_err());
    }

    #[test]
    fn loadings_orthonormal_with_disjoint_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = Dims::new(10, 7, 3, 2, 2);
        for _ in 0..50 {
            for (r, c) in simulate_loadings(&dims, false, &mut rng).unwrap() {
                assert!((r.transpose() * &r - Mat::identity(3, 3) * 10.0).amax() < 1e-10);
                assert!((c.transpose() * &c - Mat::identity(2, 2) * 7.0).amax() < 1e-10);
                for i in 0..10 {
                    assert_eq!(r.row(i).iter().filter(|&&v| v != 0.0).count(), 1);
                }
            }
        }
    }

    fn one_regime(b: Mat, phi: Mat, gamma: Mat) -> ModelParams {
        let (k1, k2) = b.shape();
        ModelParams {
            dims: Dims::new(k1, k2, k1, k2, 1),
            regimes: vec![RegimeParams {
                row_loading: Mat::identity(k1, k1),
                col_loading: Mat::identity(k2, k2),
                intercept: b,
                row_ar: phi,
                col_ar: gamma,
            }],
            obs_var: 1.0,
            state_var: 1.0,
            transition: dmatrix![1.0],
        }
    }

    #[test]
    fn zero_innovations_reach_fixed_point() {
        let b = dmatrix![0.5, 0.2; -0.1, 0.3];
        let phi = dmatrix![0.6, 0.1; 0.0, 0.5];
        let gamma = dmatrix![0.7, 0.0; 0.2, 0.4];
        let truth = one_regime(b.clone(), phi.clone(), gamma.clone());
        let n = 400;
        let zeros = vec![Mat::zeros(2, 2); n];
        let path = propagate_factors(&truth, &vec![0; n], &Mat::zeros(2, 2), &zeros);
        let a = Mat::identity(4, 4) - kron(&gamma, &phi);
        let fixed = a.lu().solve(&vec(&b)).unwrap();
        assert!((vec(path.last().unwrap()) - fixed).amax() < 1e-10);
    }

    #[test]
    fn white_factors_without_dynamics() {
        let truth = one_regime(Mat::zeros(2, 1), Mat::zeros(2, 2), Mat::zeros(1, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = simulate_factors(&truth, &vec![0; 20_000], &mut rng);
        let var: f64 = f.iter().map(|m| m[(1, 0)] * m[(1, 0)]).sum::<f64>() / f.len() as f64;
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn factor_covariance_matches_lyapunov() {
        let phi = dmatrix![0.7, 0.0; 0.0, 0.5];
        let truth = one_regime(Mat::zeros(2, 2), phi.clone(), phi.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let path = simulate_factors(&truth, &vec![0; 10_000], &mut rng);
        let psi = kron(&phi, &phi);
        // vec(Σ) = (I − Ψ⊗Ψ)⁻¹ vec(I)
        let big = Mat::identity(16, 16) - kron(&psi, &psi);
        let sigma = big.lu().solve(&vec(&Mat::identity(4, 4))).unwrap();
        let mut emp = Mat::zeros(4, 4);
        for f in &path[100..] {
            let v = vec(f);
            emp += &v * v.transpose();
        }
        emp /= (path.len() - 100) as f64;
        for i in 0..4 {
            let want = sigma[i * 4 + i];
            assert!((emp[(i, i)] - want).abs() < 0.1 * want, "{} vs {want}", emp[(i, i)]);
        }
    }

    #[test]
    fn error_process_moments() {
        let mut cfg = SimConfig::reference(100_000, 0);
        cfg.dims = Dims::new(1, 1, 1, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e: Vec<f64> = simulate_errors(&cfg, cfg.n, &mut rng).iter().map(|m| m[(0, 0)]).collect();
        let n = e.len() as f64;
        let mean = e.iter().sum::<f64>() / n;
        let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let lag = e.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / n / var;
        assert!((var - 1.0).abs() < 0.05);
        assert!((lag - 0.1).abs() < 0.02);

        cfg.error_ar = 0.0;
        cfg.error_dist = ErrorDist::Chisq1;
        cfg.obs_var = 2.0;
        let e: Vec<f64> = simulate_errors(&cfg, cfg.n, &mut rng).iter().map(|m| m[(0, 0)]).collect();
        let mean = e.iter().sum::<f64>() / n;
        let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05);
        assert!((var - 2.0).abs() < 0.1);
    }

    #[test]
    fn deterministic_and_variants() {
        let cfg = SimConfig::reference(60, 9);
        assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());

        let mut st = cfg.clone();
        st.variant = ModelVariant::Static;
        let out = simulate(&st).unwrap();
        assert!(out.states.iter().all(|&s| s == 0));
        assert_eq!(out.truth.dims.regimes, 1);

        let mut so = cfg.clone();
        so.variant = ModelVariant::StateOnly;
        let out = simulate(&so).unwrap();
        assert_eq!(out.truth.regimes[0].row_loading, out.truth.regimes[1].row_loading);
        assert_eq!(out.truth.regimes[0].col_loading, out.truth.regimes[1].col_loading);
        assert_eq!(out.series.len(), 60);
        assert_eq!(out.factors.len(), 60);
    }

    #[test]
    fn reference_truth_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = simulate_truth(&SimConfig::reference(10, 0), &mut rng).unwrap();
        assert!((&t.regimes[0].row_ar - dmatrix![0.9, 0.0; 0.0, 0.7]).amax() < 1e-15);
        assert!((&t.regimes[1].col_ar - dmatrix![0.7, 0.0; 0.0, 0.5]).amax() < 1e-15);
        let ratio = t.regimes[1].intercept[(0, 1)] / t.regimes[0].intercept[(0, 1)];
        assert!((ratio - 0.2).abs() < 1e-12);
        assert!(spectral_radius_switching(&t).unwrap() < 1.0);
    }
}
