//! Accuracy measures for a fit against simulated truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assign::min_cost_assignment;
use crate::em::FitResult;
use crate::error::{Error, Result};
use crate::init::space_distance;
use crate::linalg::{frob2, procrustes, vec, Mat};
use crate::model::ModelParams;
use crate::simulate::SimOutput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Row loading-space distance per true regime.
    pub dist_row: Vec<f64>,
    /// Column loading-space distance per true regime.
    pub dist_col: Vec<f64>,
    /// Factor R² per true regime; `None` when the regime has too few observations.
    pub r2_factor: Vec<Option<f64>>,
    /// Unadjusted Rand index between decoded and true regimes.
    pub rand: f64,
    /// Mean squared error per parameter block after alignment.
    pub mse: BTreeMap<String, f64>,
    /// Mean squared error of the common component per entry.
    pub mse_common: f64,
    /// `matching[k]` is the estimated regime paired with true regime `k`.
    pub matching: Vec<usize>,
}

impl EvalReport {
    /// Flat `(name, value)` pairs in a stable order; absent values are NaN.
    pub fn columns(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (k, d) in self.dist_row.iter().enumerate() {
            out.push((format!("dist_R{}", k + 1), *d));
        }
        for (k, d) in self.dist_col.iter().enumerate() {
            out.push((format!("dist_C{}", k + 1), *d));
        }
        for (k, r2) in self.r2_factor.iter().enumerate() {
            out.push((format!("r2_F{}", k + 1), r2.unwrap_or(f64::NAN)));
        }
        out.push(("rand".into(), self.rand));
        for (name, v) in &self.mse {
            out.push((format!("mse_{name}"), *v));
        }
        out.push(("mse_common".into(), self.mse_common));
        out
    }
}

/// Fraction of index pairs on which the two labelings agree about "same group".
pub fn rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("label lengths differ: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidInput("rand index needs at least two labels".into()));
    }
    let mut joint: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut left: BTreeMap<usize, u64> = BTreeMap::new();
    let mut right: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *left.entry(x).or_default() += 1;
        *right.entry(y).or_default() += 1;
    }
    let pairs = |c: u64| c * c.saturating_sub(1) / 2;
    let both: u64 = joint.values().copied().map(pairs).sum();
    let same_a: u64 = left.values().copied().map(pairs).sum();
    let same_b: u64 = right.values().copied().map(pairs).sum();
    let total = pairs(n as u64);
    let agree = total + 2 * both - same_a - same_b;
    Ok(agree as f64 / total as f64)
}

/// Coordinatewise R² of regressing `target` rows on an intercept and `predictor` rows, averaged
/// over coordinates with nonzero variance.
pub fn regression_r2(predictor: &[Vec<f64>], target: &[Vec<f64>]) -> Option<f64> {
    let n = predictor.len();
    let width = predictor.first()?.len() + 1;
    if n <= width || target.len() != n {
        return None;
    }
    let design = Mat::from_fn(n, width, |t, j| if j == 0 { 1.0 } else { predictor[t][j - 1] });
    let response = Mat::from_fn(n, target[0].len(), |t, j| target[t][j]);
    let coef = design.clone().svd(true, true).solve(&response, 1e-12).ok()?;
    let resid = &response - &design * coef;
    let mut scores = Vec::new();
    for j in 0..response.ncols() {
        let col = response.column(j);
        let mean = col.mean();
        let sst: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        if sst > 0.0 {
            scores.push(1.0 - resid.column(j).norm_squared() / sst);
        }
    }
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

fn mean_sq(a: &Mat, b: &Mat) -> f64 {
    frob2(&(a - b)) / (a.len().max(1)) as f64
}

/// Compares a fit with the simulation that generated its data.
pub fn evaluate(fit: &FitResult, truth: &SimOutput) -> Result<EvalReport> {
    evaluate_parts(&fit.theta, &fit.factors, &fit.states, truth)
}

/// [`evaluate`] from the pieces of a fit: parameters, smoothed factors in the parameters'
/// coordinates, and zero-based decoded regimes.
pub fn evaluate_parts(est: &ModelParams, factors: &[Mat], states: &[usize], truth: &SimOutput) -> Result<EvalReport> {
    let tru = &truth.truth;
    if est.dims != tru.dims {
        return Err(Error::Dimension("fit and truth dimensions differ".into()));
    }
    let n = truth.series.len();
    if states.len() != n || factors.len() != n || truth.factors.len() != n {
        return Err(Error::Dimension("fit and truth lengths differ".into()));
    }
    if states.iter().chain(&truth.states).any(|&s| s >= tru.dims.regimes) {
        return Err(Error::InvalidInput("regime label out of range".into()));
    }
    let m = tru.dims.regimes;
    let mut dist = vec![vec![(0.0, 0.0); m]; m];
    let mut cost = Mat::zeros(m, m);
    for k in 0..m {
        for j in 0..m {
            let dr = space_distance(&tru.regimes[k].row_loading, &est.regimes[j].row_loading)?;
            let dc = space_distance(&tru.regimes[k].col_loading, &est.regimes[j].col_loading)?;
            dist[k][j] = (dr, dc);
            cost[(k, j)] = dr + dc;
        }
    }
    let matching = min_cost_assignment(&cost);
    let dist_row = (0..m).map(|k| dist[k][matching[k]].0).collect();
    let dist_col = (0..m).map(|k| dist[k][matching[k]].1).collect();

    let r2_factor = (0..m)
        .map(|k| {
            let times: Vec<usize> = (0..n).filter(|&t| truth.states[t] == k).collect();
            let x: Vec<Vec<f64>> = times.iter().map(|&t| vec(&factors[t]).as_slice().to_vec()).collect();
            let y: Vec<Vec<f64>> = times.iter().map(|&t| vec(&truth.factors[t]).as_slice().to_vec()).collect();
            regression_r2(&x, &y)
        })
        .collect();

    let rand = rand_index(states, &truth.states)?;

    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for k in 0..m {
        let e = &est.regimes[matching[k]];
        let t = &tru.regimes[k];
        let row_rot = procrustes(&e.row_loading, &t.row_loading);
        let col_rot = procrustes(&e.col_loading, &t.col_loading);
        let intercept = row_rot.transpose() * &e.intercept * &col_rot;
        let mut row_ar = row_rot.transpose() * &e.row_ar * &row_rot;
        let mut col_ar = col_rot.transpose() * &e.col_ar * &col_rot;
        // Only the Kronecker product of the two autoregressions is identified; carry the scale
        // and sign of the true row autoregression over to the estimate.
        let (est_norm, true_norm) = (row_ar.norm(), t.row_ar.norm());
        if est_norm > 0.0 && true_norm > 0.0 {
            let scale = true_norm / est_norm * if row_ar.dot(&t.row_ar) < 0.0 { -1.0 } else { 1.0 };
            row_ar *= scale;
            col_ar /= scale;
        }
        let blocks = [
            ("R", mean_sq(&(&e.row_loading * &row_rot), &t.row_loading)),
            ("C", mean_sq(&(&e.col_loading * &col_rot), &t.col_loading)),
            ("B", mean_sq(&intercept, &t.intercept)),
            ("Phi", mean_sq(&row_ar, &t.row_ar)),
            ("Gamma", mean_sq(&col_ar, &t.col_ar)),
        ];
        for (name, v) in blocks {
            *sums.entry(name.into()).or_default() += v / m as f64;
        }
    }
    let transition = Mat::from_fn(m, m, |i, j| est.transition[(matching[i], matching[j])]);
    sums.insert("P".into(), mean_sq(&transition, &tru.transition));
    sums.insert("sigma2".into(), (est.obs_var - tru.obs_var).powi(2));
    sums.insert("sigma_eps2".into(), (est.state_var - tru.state_var).powi(2));

    let mut common = 0.0;
    for t in 0..n {
        let fitted = est.regimes[states[t]].common(&factors[t]);
        let actual = tru.regimes[truth.states[t]].common(&truth.factors[t]);
        common += frob2(&(fitted - actual));
    }
    let mse_common = common / (n * tru.dims.obs_len()) as f64;

    Ok(EvalReport { dist_row, dist_col, r2_factor, rand, mse: sums, mse_common, matching })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::StopReason;
    use crate::simulate::{simulate, SimConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_rand(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let mut agree = 0;
        let mut total = 0;
        for i in 0..n {
            for j in i + 1..n {
                total += 1;
                if (a[i] == a[j]) == (b[i] == b[j]) {
                    agree += 1;
                }
            }
        }
        agree as f64 / total as f64
    }

    fn oracle_fit(sim: &SimOutput, theta: ModelParams) -> FitResult {
        let n = sim.series.len();
        let m = theta.dims.regimes;
        FitResult {
            theta_raw: theta.clone(),
            theta,
            factors: sim.factors.clone(),
            states: sim.states.clone(),
            weights: Mat::from_fn(n, m, |t, k| if sim.states[t] == k { 1.0 } else { 0.0 }),
            loglik_trace: vec![0.0],
            distance_trace: vec![0.0],
            loglik: 0.0,
            iterations: 1,
            converged: true,
            stop: StopReason::Converged,
        }
    }

    #[test]
    fn rand_examples() {
        assert_eq!(rand_index(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert!((rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(rand_index(&[0], &[0]).is_err());
        assert!(rand_index(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn rand_of_independent_balanced_labels_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<usize> = (0..20_000).map(|_| rng.random_range(0..2)).collect();
        let b: Vec<usize> = (0..20_000).map(|_| rng.random_range(0..2)).collect();
        assert!((rand_index(&a, &b).unwrap() - 0.5).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn rand_matches_pair_enumeration(
            a in proptest::collection::vec(0usize..4, 2..40),
            shift in 0usize..4,
        ) {
            let b: Vec<usize> = a.iter().enumerate().map(|(i, &x)| (x * 7 + i % 3 + shift) % 4).collect();
            prop_assert!((rand_index(&a, &b).unwrap() - naive_rand(&a, &b)).abs() < 1e-15);
            // Renaming labels on either side changes nothing.
            let renamed: Vec<usize> = a.iter().map(|&x| (x + shift) % 4 + 10).collect();
            prop_assert_eq!(rand_index(&renamed, &b).unwrap(), rand_index(&a, &b).unwrap());
        }
    }

    #[test]
    fn r2_matches_squared_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + rng.random_range(-0.5..0.5)).collect();
        let (mx, my) = (x.iter().sum::<f64>() / 50.0, y.iter().sum::<f64>() / 50.0);
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        let want = sxy * sxy / (sxx * syy);
        let got = regression_r2(&x.iter().map(|&v| vec![v]).collect::<Vec<_>>(), &y.iter().map(|&v| vec![v]).collect::<Vec<_>>());
        assert!((got.unwrap() - want).abs() < 1e-12);
        assert_eq!(regression_r2(&[vec![1.0], vec![2.0]], &[vec![1.0], vec![2.0]]), None);
    }

    #[test]
    fn oracle_fit_is_perfect() {
        let sim = simulate(&SimConfig::reference(150, 2)).unwrap();
        let rep = evaluate(&oracle_fit(&sim, sim.truth.clone()), &sim).unwrap();
        assert!(rep.dist_row.iter().chain(&rep.dist_col).all(|&d| d < 1e-7));
        assert!(rep.r2_factor.iter().all(|r| (r.unwrap() - 1.0).abs() < 1e-12));
        assert_eq!(rep.rand, 1.0);
        assert!(rep.mse.values().all(|&v| v < 1e-20), "{:?}", rep.mse);
        assert_eq!(rep.mse_common, 0.0);
    }

    #[test]
    fn invariant_to_rotation_and_relabeling() {
        let sim = simulate(&SimConfig::reference(150, 4)).unwrap();
        let mut theta = sim.truth.clone();
        let angle = 0.7f64;
        let rot = Mat::from_row_slice(2, 2, &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()]);
        let mut fit = oracle_fit(&sim, theta.clone());
        for reg in &mut theta.regimes {
            reg.row_loading = &reg.row_loading * &rot;
            reg.intercept = rot.transpose() * &reg.intercept;
            reg.row_ar = rot.transpose() * &reg.row_ar * &rot;
        }
        fit.factors = sim.factors.iter().map(|f| rot.transpose() * f).collect();
        fit.theta = theta.permute_regimes(&[1, 0]);
        fit.states = sim.states.iter().map(|&s| 1 - s).collect();
        let rep = evaluate(&fit, &sim).unwrap();
        assert_eq!(rep.matching, vec![1, 0]);
        assert!(rep.dist_row.iter().all(|&d| d < 1e-7));
        assert_eq!(rep.rand, 1.0);
        assert!(rep.mse.values().all(|&v| v < 1e-20), "{:?}", rep.mse);
        assert!(rep.mse_common < 1e-25);
        assert!(rep.r2_factor.iter().all(|r| (r.unwrap() - 1.0).abs() < 1e-12));
    }
}
