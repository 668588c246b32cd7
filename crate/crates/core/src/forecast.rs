//! One-step-ahead forecasts and a rolling-origin comparison harness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit, FitConfig};
use crate::error::{Error, Result};
use crate::filter::{filter_pass, predict_pair, FilterOutput};
use crate::linalg::{Mat, Vector};
use crate::model::{Dims, MatrixSeries, ModelParams};

/// Guard added to `|y|` in percentage errors.
pub const MAPE_GUARD: f64 = 1e-8;
/// Shortest training window accepted by [`rolling_eval`].
pub const MIN_WINDOW: usize = 30;
/// Shortest history accepted by [`ar1_forecast`].
pub const MIN_AR1_HISTORY: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: Mat,
    /// Predictive probability of each regime at the forecast time.
    pub regime_probs: Vector,
}

/// Mixture mean of the next observation given the filter state at the end of `filt`.
pub fn predict_one(params: &ModelParams, filt: &FilterOutput) -> Prediction {
    let dims = params.dims;
    let (w, f, v) = filt.collapsed(filt.steps.len());
    let mut mean = Mat::zeros(dims.rows, dims.cols);
    let mut regime_probs = Vector::zeros(dims.regimes);
    for (k, reg) in params.regimes.iter().enumerate() {
        let mut factor = Mat::zeros(dims.row_factors, dims.col_factors);
        for i in 0..dims.regimes {
            let weight = params.transition[(i, k)] * w[i];
            if weight == 0.0 {
                continue;
            }
            let (f_pred, _) = predict_pair(params, k, &f[i], &v[i]);
            factor += Mat::from_column_slice(dims.row_factors, dims.col_factors, f_pred.as_slice()) * weight;
            regime_probs[k] += weight;
        }
        mean += reg.common(&factor);
    }
    Prediction { mean, regime_probs }
}

/// Fits `x_t = a + b x_{t-1}` by least squares and returns `a + b x_last`.
pub fn ar1_forecast(history: &[f64]) -> Result<f64> {
    if history.len() < MIN_AR1_HISTORY {
        return Err(Error::InvalidInput(format!(
            "AR(1) needs at least {MIN_AR1_HISTORY} values, got {}",
            history.len()
        )));
    }
    let last = *history.last().expect("nonempty");
    let lagged = &history[..history.len() - 1];
    let current = &history[1..];
    let m = lagged.len() as f64;
    let mean_x = lagged.iter().sum::<f64>() / m;
    let mean_y = current.iter().sum::<f64>() / m;
    let sxx: f64 = lagged.iter().map(|x| (x - mean_x).powi(2)).sum();
    if sxx <= f64::EPSILON * mean_x.abs().max(1.0) * m {
        return Ok(last);
    }
    let sxy: f64 = lagged.iter().zip(current).map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
    let slope = sxy / sxx;
    Ok(mean_y - slope * mean_x + slope * last)
}

/// Mean absolute error over entries.
pub fn mae(pred: &Mat, actual: &Mat) -> f64 {
    (pred - actual).abs().mean()
}

/// Mean absolute percentage error over entries, with [`MAPE_GUARD`] in the denominator.
pub fn mape(pred: &Mat, actual: &Mat) -> f64 {
    pred.zip_map(actual, |p, y| (p - y).abs() / (y.abs() + MAPE_GUARD)).mean()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMethod {
    /// The switching model with the configured number of regimes.
    Msdmf,
    /// The same model with a single regime.
    MfmVar,
    /// A separate AR(1) for every entry.
    Ar1,
}

impl ForecastMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Msdmf => "msdmf",
            Self::MfmVar => "mfm_var",
            Self::Ar1 => "ar1",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastConfig {
    /// Training length for every origin.
    pub window: usize,
    /// Zero-based indices of the observations to forecast.
    pub origins: Vec<usize>,
    pub methods: Vec<ForecastMethod>,
    /// Dimensions of the switching model; the single-regime method reuses them with `M = 1`.
    pub dims: Dims,
    #[serde(default)]
    pub fit: FitConfig,
}

impl ForecastConfig {
    pub fn check(&self, n: usize) -> Result<()> {
        if self.window < MIN_WINDOW {
            return Err(Error::InvalidInput(format!("window {} is below {MIN_WINDOW}", self.window)));
        }
        if self.methods.is_empty() || self.origins.is_empty() {
            return Err(Error::InvalidInput("need at least one method and one origin".into()));
        }
        for &origin in &self.origins {
            if origin < self.window || origin >= n {
                return Err(Error::InvalidInput(format!(
                    "origin {origin} needs {} prior observations inside a series of length {n}",
                    self.window
                )));
            }
        }
        self.fit.check()?;
        self.dims.check()
    }
}

/// Outcome of one method at one origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRow {
    pub origin: usize,
    pub method: ForecastMethod,
    /// `None` when fitting failed.
    pub prediction: Option<Mat>,
    pub mae: f64,
    pub mape: f64,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForecastReport {
    pub rows: Vec<ForecastRow>,
}

impl ForecastReport {
    /// Average MAE of `method` over origins where it produced a forecast.
    pub fn mean_mae(&self, method: ForecastMethod) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| r.method == method && r.prediction.is_some()).map(|r| r.mae).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Forecast produced by a method from a training window.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub prediction: Mat,
    pub converged: bool,
}

/// Runs `forecaster` on the window before each origin and scores it against the observation at
/// the origin. Origins are processed in parallel; failures are recorded, not propagated.
pub fn rolling_with<F>(series: &MatrixSeries, window: usize, origins: &[usize], forecaster: F) -> Vec<(usize, Result<Forecast>)>
where
    F: Fn(usize, &MatrixSeries) -> Result<Forecast> + Sync,
{
    origins
        .par_iter()
        .map(|&origin| {
            let outcome = series.window(origin - window, origin).and_then(|train| forecaster(origin, &train));
            (origin, outcome)
        })
        .collect()
}

fn forecast_with(method: ForecastMethod, train: &MatrixSeries, config: &ForecastConfig) -> Result<Forecast> {
    match method {
        ForecastMethod::Ar1 => {
            let (p, q) = (train.rows(), train.cols());
            let mut prediction = Mat::zeros(p, q);
            for i in 0..p {
                for j in 0..q {
                    let history: Vec<f64> = train.iter().map(|y| y[(i, j)]).collect();
                    prediction[(i, j)] = ar1_forecast(&history)?;
                }
            }
            Ok(Forecast { prediction, converged: true })
        }
        ForecastMethod::Msdmf | ForecastMethod::MfmVar => {
            let mut dims = config.dims;
            if method == ForecastMethod::MfmVar {
                dims.regimes = 1;
            }
            let res = fit(train, dims, &config.fit)?;
            let filt = filter_pass(&res.theta, train)?;
            Ok(Forecast { prediction: predict_one(&res.theta, &filt).mean, converged: res.converged })
        }
    }
}

/// Rolling one-step evaluation of every configured method.
pub fn rolling_eval(series: &MatrixSeries, config: &ForecastConfig) -> Result<ForecastReport> {
    config.check(series.len())?;
    if series.rows() != config.dims.rows || series.cols() != config.dims.cols {
        return Err(Error::Dimension("series does not match the configured dims".into()));
    }
    let mut rows = Vec::new();
    for &method in &config.methods {
        for (origin, outcome) in rolling_with(series, config.window, &config.origins, |_, train| forecast_with(method, train, config)) {
            let actual = series.get(origin);
            rows.push(match outcome {
                Ok(f) => ForecastRow {
                    origin,
                    method,
                    mae: mae(&f.prediction, actual),
                    mape: mape(&f.prediction, actual),
                    converged: f.converged,
                    prediction: Some(f.prediction),
                    error: None,
                },
                Err(e) => {
                    log::warn!("{} failed at origin {origin}: {e}", method.name());
                    ForecastRow {
                        origin,
                        method,
                        prediction: None,
                        mae: f64::NAN,
                        mape: f64::NAN,
                        converged: false,
                        error: Some(e.to_string()),
                    }
                }
            });
        }
    }
    Ok(ForecastReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::tests::{random_mat, random_params};
    use crate::linalg::{kron, vec};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn dense_kalman_forecast(params: &ModelParams, series: &MatrixSeries) -> Mat {
        let reg = &params.regimes[0];
        let dims = params.dims;
        let r = dims.factor_len();
        let lambda = kron(&reg.col_loading, &reg.row_loading);
        let psi = kron(&reg.col_ar, &reg.row_ar);
        let b = vec(&reg.intercept);
        let mut f = Vector::zeros(r);
        let mut v = Mat::zeros(r, r);
        for y in series.iter() {
            let f_pred = &b + &psi * &f;
            let v_pred = &psi * &v * psi.transpose() + Mat::identity(r, r) * params.state_var;
            let s = &lambda * &v_pred * lambda.transpose() + Mat::identity(dims.obs_len(), dims.obs_len()) * params.obs_var;
            let gain = &v_pred * lambda.transpose() * s.try_inverse().unwrap();
            f = &f_pred + &gain * (vec(y) - &lambda * &f_pred);
            v = &v_pred - &gain * &lambda * &v_pred;
        }
        let y_next = lambda * (&b + &psi * &f);
        Mat::from_column_slice(dims.rows, dims.cols, y_next.as_slice())
    }

    #[test]
    fn single_regime_matches_dense_kalman() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..20 {
            let dims = Dims::new(2 + trial % 3, 2 + trial % 2, 1 + trial % 2, 1 + (trial / 2) % 2, 1);
            let params = random_params(&mut rng, dims);
            let obs: Vec<Mat> = (0..12).map(|_| random_mat(&mut rng, dims.rows, dims.cols, 2.0)).collect();
            let series = MatrixSeries::new(obs).unwrap();
            let filt = filter_pass(&params, &series).unwrap();
            let got = predict_one(&params, &filt).mean;
            let want = dense_kalman_forecast(&params, &series);
            assert!((&got - &want).amax() < 1e-8 * want.amax().max(1.0), "trial {trial}");
        }
    }

    #[test]
    fn static_dynamics_forecast_the_intercept() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = random_params(&mut rng, Dims::new(3, 2, 2, 1, 1));
        params.regimes[0].row_ar = Mat::zeros(2, 2);
        params.regimes[0].col_ar = Mat::zeros(1, 1);
        let series = MatrixSeries::new((0..5).map(|_| random_mat(&mut rng, 3, 2, 1.0)).collect()).unwrap();
        let filt = filter_pass(&params, &series).unwrap();
        let reg = &params.regimes[0];
        let want = &reg.row_loading * &reg.intercept * reg.col_loading.transpose();
        assert!((predict_one(&params, &filt).mean - want).amax() < 1e-12);
    }

    #[test]
    fn identical_regimes_ignore_transition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = random_params(&mut rng, Dims::new(3, 3, 2, 2, 2));
        params.regimes[1] = params.regimes[0].clone();
        let series = MatrixSeries::new((0..8).map(|_| random_mat(&mut rng, 3, 3, 1.0)).collect()).unwrap();
        let base = predict_one(&params, &filter_pass(&params, &series).unwrap()).mean;
        params.transition = Mat::from_row_slice(2, 2, &[0.3, 0.7, 0.6, 0.4]);
        let other = predict_one(&params, &filter_pass(&params, &series).unwrap());
        assert!((other.mean - base).amax() < 1e-10);
        assert!((other.regime_probs.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ar1_examples() {
        assert_eq!(ar1_forecast(&[3.5; 12]).unwrap(), 3.5);
        let mut x = vec![1.0];
        for _ in 0..15 {
            let last = *x.last().unwrap();
            x.push(0.4 + 0.8 * last);
        }
        let next = 0.4 + 0.8 * x.last().unwrap();
        assert!((ar1_forecast(&x).unwrap() - next).abs() < 1e-10);
        assert!(ar1_forecast(&[1.0; 9]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise: Vec<f64> = (0..10_000).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 2.0 + z }).collect();
        assert!((ar1_forecast(&noise).unwrap() - 2.0).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn error_measures(values in proptest::collection::vec(-5.0f64..5.0, 8)) {
            let pred = Mat::from_column_slice(2, 2, &values[..4]);
            let actual = Mat::from_column_slice(2, 2, &values[4..]);
            prop_assert!(mape(&pred, &actual) >= 0.0);
            prop_assert_eq!(mae(&pred, &actual), mae(&-&pred, &-&actual));
        }
    }

    #[test]
    fn perfect_foresight_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let series = MatrixSeries::new((0..60).map(|_| random_mat(&mut rng, 2, 2, 1.0)).collect()).unwrap();
        let out = rolling_with(&series, 30, &[30, 45, 59], |origin, _| {
            Ok(Forecast { prediction: series.get(origin).clone(), converged: true })
        });
        for (origin, f) in out {
            let f = f.unwrap();
            assert_eq!(mae(&f.prediction, series.get(origin)), 0.0);
            assert_eq!(mape(&f.prediction, series.get(origin)), 0.0);
        }
    }

    #[test]
    fn ar1_on_white_noise_has_gaussian_mae() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let obs: Vec<Mat> = (0..400).map(|_| Mat::from_fn(5, 5, |_, _| -> f64 { StandardNormal.sample(&mut rng) })).collect();
        let series = MatrixSeries::new(obs).unwrap();
        let config = ForecastConfig {
            window: 200,
            origins: (200..400).step_by(5).collect(),
            methods: vec![ForecastMethod::Ar1],
            dims: Dims::new(5, 5, 1, 1, 1),
            fit: FitConfig::default(),
        };
        let report = rolling_eval(&series, &config).unwrap();
        let expected = (2.0 / std::f64::consts::PI).sqrt();
        let got = report.mean_mae(ForecastMethod::Ar1).unwrap();
        assert!((got / expected - 1.0).abs() < 0.1, "{got}");
    }

    #[test]
    fn failures_are_recorded_per_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let series = MatrixSeries::new((0..50).map(|_| random_mat(&mut rng, 2, 2, 1.0)).collect()).unwrap();
        let out = rolling_with(&series, 30, &[30, 40], |origin, _| {
            if origin == 30 {
                Err(Error::InvalidInput("boom".into()))
            } else {
                Ok(Forecast { prediction: Mat::zeros(2, 2), converged: true })
            }
        });
        assert!(out[0].1.is_err());
        assert!(out[1].1.is_ok());
    }

    #[test]
    fn config_validation() {
        let mut config = ForecastConfig {
            window: 20,
            origins: vec![40],
            methods: vec![ForecastMethod::Ar1],
            dims: Dims::new(2, 2, 1, 1, 1),
            fit: FitConfig::default(),
        };
        assert!(config.check(50).is_err());
        config.window = 30;
        assert!(config.check(50).is_ok());
        config.origins = vec![29];
        assert!(config.check(50).is_err());
        config.origins = vec![50];
        assert!(config.check(50).is_err());
    }
}
