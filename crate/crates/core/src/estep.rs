//! Posterior moments of the factors and the Kronecker contractions that feed the M-step.
//!
//! A factor vector `f = vec(F)` with `F` of shape `k1 × k2` has entry `(a, c)` at
//! position `a + c·k1`. A second-moment matrix `p = E[f gᵀ]` is therefore a 4-axis
//! tensor `p[(a,c),(b,d)] = E[F(a,c) G(b,d)]`, and every contraction below sums two
//! of those axes against a small weight matrix.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{FilterOutput, WEIGHT_FLOOR};
use crate::linalg::{symmetrize, unvec, Mat, Vector};
use crate::model::{Dims, ModelParams};
use crate::smoother::SmoothOutput;

const MASS_TOL: f64 = 1e-6;

/// Posterior moments for one time point and one regime `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeMoments {
    /// `w_{t|n}^{(k)}`.
    pub w: f64,
    /// `w_{t-1,t|n}^{(i,k)}` over previous regimes `i`.
    pub w_pair: Vector,
    /// `E[f_t | S_t = k]`.
    pub f: Vector,
    /// `E[f_t f_tᵀ | S_t = k]`.
    pub p2: Mat,
    /// `E[f_{t-1} | S_t = k]`.
    pub f_star: Vector,
    /// `E[f_{t-1} f_{t-1}ᵀ | S_t = k]`.
    pub p_star: Mat,
    /// `E[f_t f_{t-1}ᵀ | S_t = k]`.
    pub p_cross: Mat,
}

impl RegimeMoments {
    fn empty(r: usize, w: f64, w_pair: Vector) -> Self {
        Self {
            w,
            w_pair,
            f: Vector::zeros(r),
            p2: Mat::zeros(r, r),
            f_star: Vector::zeros(r),
            p_star: Mat::zeros(r, r),
            p_cross: Mat::zeros(r, r),
        }
    }

    /// Whether the regime carries enough posterior mass to enter M-step sums.
    pub fn is_active(&self) -> bool {
        self.w >= WEIGHT_FLOOR
    }
}

/// Smoothed moments for `t = 1..=n`, indexed `steps[t - 1][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMoments {
    pub dims: Dims,
    pub steps: Vec<Vec<RegimeMoments>>,
}

impl PosteriorMoments {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Moments at time `t` (one-based) for regime `k`.
    pub fn at(&self, t: usize, k: usize) -> &RegimeMoments {
        &self.steps[t - 1][k]
    }

    /// `Σ_t w_{t|n}^{(k)}`.
    pub fn regime_mass(&self, k: usize) -> f64 {
        self.steps.iter().map(|s| s[k].w).sum()
    }

    /// `E[F_t | S_t = k]` as a `k1 × k2` matrix.
    pub fn factor(&self, t: usize, k: usize) -> Mat {
        self.reshape(&self.at(t, k).f)
    }

    /// `E[F_{t-1} | S_t = k]` as a `k1 × k2` matrix.
    pub fn factor_prev(&self, t: usize, k: usize) -> Mat {
        self.reshape(&self.at(t, k).f_star)
    }

    fn reshape(&self, v: &Vector) -> Mat {
        unvec(v.as_slice(), self.dims.row_factors, self.dims.col_factors).expect("moment length matches dims")
    }
}

/// Assembles all posterior moments from a filter pass and the matching smoother pass.
pub fn compute_moments(params: &ModelParams, filt: &FilterOutput, smooth: &SmoothOutput) -> Result<PosteriorMoments> {
    let m = params.dims.regimes;
    let r = params.dims.factor_len();
    let n = filt.steps.len();
    if smooth.steps.len() != n {
        return Err(Error::Dimension(format!(
            "filter has {n} steps but smoother has {}",
            smooth.steps.len()
        )));
    }
    let steps = (1..=n)
        .into_par_iter()
        .map(|t| moments_at(m, r, smooth, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorMoments { dims: params.dims, steps })
}

fn moments_at(m: usize, r: usize, smooth: &SmoothOutput, t: usize) -> Result<Vec<RegimeMoments>> {
    let prev = smooth.at(t - 1);
    let cur = smooth.at(t);
    let pair = prev
        .w_pair_next
        .as_ref()
        .ok_or_else(|| Error::Smoother { t: t - 1, reason: "missing pair weights".into() })?;
    let total: f64 = cur.w_n.sum();
    if !((total - 1.0).abs() <= MASS_TOL) {
        return Err(Error::Smoother { t, reason: format!("smoothed weights sum to {total}") });
    }
    let prev_p2: Vec<Mat> = (0..m).map(|i| &prev.v_n[i] + &prev.f_n[i] * prev.f_n[i].transpose()).collect();
    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        let w = cur.w_n[k];
        let w_pair = pair.column(k).into_owned();
        if !((w_pair.sum() - w).abs() <= MASS_TOL) {
            return Err(Error::Smoother {
                t,
                reason: format!("pair weights into regime {k} sum to {} but w = {w}", w_pair.sum()),
            });
        }
        if w < WEIGHT_FLOOR {
            out.push(RegimeMoments::empty(r, w, w_pair));
            continue;
        }
        let f = cur.f_n[k].clone();
        let mut p2 = &cur.v_n[k] + &f * f.transpose();
        symmetrize(&mut p2);
        let mut f_star = Vector::zeros(r);
        let mut p_star = Mat::zeros(r, r);
        let mut gain = Mat::zeros(r, r);
        for i in 0..m {
            let omega = w_pair[i] / w;
            if omega <= 0.0 {
                continue;
            }
            f_star += &prev.f_n[i] * omega;
            p_star += &prev_p2[i] * omega;
            gain += &prev.gains[i * m + k] * omega;
        }
        symmetrize(&mut p_star);
        // Cov(f_t, f_{t-1} | S_t = k) = V_{t|n} Gᵀ with G the mixed smoother gain.
        let p_cross = &cur.v_n[k] * gain.transpose() + &f * f_star.transpose();
        out.push(RegimeMoments { w, w_pair, f, p2, f_star, p_star, p_cross });
    }
    Ok(out)
}

/// `out[a][b] = Σ_{c,d} p[(a,c),(b,d)] · weight[c][d]`, a `k1 × k1` result.
pub fn contract_left(p: &Mat, weight: &Mat) -> Mat {
    let k2 = weight.nrows();
    let k1 = p.nrows() / k2;
    let mut out = Mat::zeros(k1, k1);
    for d in 0..k2 {
        for c in 0..k2 {
            let wcd = weight[(c, d)];
            if wcd == 0.0 {
                continue;
            }
            for b in 0..k1 {
                for a in 0..k1 {
                    out[(a, b)] += p[(a + c * k1, b + d * k1)] * wcd;
                }
            }
        }
    }
    out
}

/// `out[c][d] = Σ_{a,b} p[(a,c),(b,d)] · weight[a][b]`, a `k2 × k2` result.
pub fn contract_right(p: &Mat, weight: &Mat) -> Mat {
    let k1 = weight.nrows();
    let k2 = p.nrows() / k1;
    let mut out = Mat::zeros(k2, k2);
    for d in 0..k2 {
        for c in 0..k2 {
            let mut s = 0.0;
            for b in 0..k1 {
                for a in 0..k1 {
                    s += p[(a + c * k1, b + d * k1)] * weight[(a, b)];
                }
            }
            out[(c, d)] = s;
        }
    }
    out
}

/// `E[F Cᵀ C Fᵀ]` from the second moment of `vec(F)`.
pub fn contract_c(p2: &Mat, col_loading: &Mat) -> Mat {
    let mut out = contract_left(p2, &(col_loading.transpose() * col_loading));
    symmetrize(&mut out);
    out
}

/// `E[Fᵀ Rᵀ R F]` from the second moment of `vec(F)`.
pub fn contract_r(p2: &Mat, row_loading: &Mat) -> Mat {
    let mut out = contract_right(p2, &(row_loading.transpose() * row_loading));
    symmetrize(&mut out);
    out
}

/// State-equation contractions for one time point and regime.
#[derive(Debug, Clone, PartialEq)]
pub struct StateContractions {
    /// `E[F_t F_tᵀ]`, `k1 × k1`.
    pub pk: Mat,
    /// `E[F_t Γ F_{t-1}ᵀ]`, `k1 × k1`.
    pub p2k: Mat,
    /// `E[F_{t-1} Γᵀ Γ F_{t-1}ᵀ]`, `k1 × k1`.
    pub pstar2k: Mat,
    /// `E[F_{t-1}ᵀ Φᵀ F_t]`, `k2 × k2`.
    pub p1k: Mat,
    /// `E[F_{t-1}ᵀ Φᵀ Φ F_{t-1}]`, `k2 × k2`.
    pub pstar1k: Mat,
}

/// The state-equation contractions built from `row_ar` (Φ) and `col_ar` (Γ).
pub fn contract_moments(mom: &RegimeMoments, row_ar: &Mat, col_ar: &Mat) -> StateContractions {
    let k2 = col_ar.nrows();
    let mut pk = contract_left(&mom.p2, &Mat::identity(k2, k2));
    symmetrize(&mut pk);
    let mut pstar2k = contract_left(&mom.p_star, &(col_ar.transpose() * col_ar));
    symmetrize(&mut pstar2k);
    let mut pstar1k = contract_right(&mom.p_star, &(row_ar.transpose() * row_ar));
    symmetrize(&mut pstar1k);
    StateContractions {
        pk,
        p2k: contract_left(&mom.p_cross, col_ar),
        pstar2k,
        p1k: contract_right(&mom.p_cross.transpose(), &row_ar.transpose()),
        pstar1k,
    }
}

/// [`contract_moments`] at time `t` (one-based) for regime `k` under `params`.
pub fn contract_state(pm: &PosteriorMoments, params: &ModelParams, t: usize, k: usize) -> StateContractions {
    let reg = &params.regimes[k];
    contract_moments(pm.at(t, k), &reg.row_ar, &reg.col_ar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::filter_pass;
    use crate::filter::tests::{random_mat, random_params, random_spd};
    use crate::linalg::{kron, logsumexp, vec};
    use crate::model::{MatrixSeries, RegimeParams};
    use crate::smoother::smooth_pass;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(n: usize, i: usize) -> Mat {
        let mut e = Mat::zeros(n, 1);
        e[(i, 0)] = 1.0;
        e
    }

    // Literal selector-sum definitions, built from explicit unit vectors and Kronecker products.

    fn selector_c(p2: &Mat, c: &Mat, k1: usize) -> Mat {
        let id = Mat::identity(k1, k1);
        (0..c.nrows()).fold(Mat::zeros(k1, k1), |acc, j| {
            let e = unit(c.nrows(), j);
            acc + kron(&(e.transpose() * c), &id) * p2 * kron(&(c.transpose() * &e), &id)
        })
    }

    fn selector_r(p2: &Mat, r: &Mat, k2: usize) -> Mat {
        let id = Mat::identity(k2, k2);
        (0..r.nrows()).fold(Mat::zeros(k2, k2), |acc, i| {
            let e = unit(r.nrows(), i);
            acc + kron(&id, &(e.transpose() * r)) * p2 * kron(&id, &(r.transpose() * &e))
        })
    }

    fn selector_k(p2: &Mat, k1: usize, k2: usize) -> Mat {
        let id = Mat::identity(k1, k1);
        (0..k2).fold(Mat::zeros(k1, k1), |acc, d| {
            let e = unit(k2, d);
            acc + kron(&e.transpose(), &id) * p2 * kron(&e, &id)
        })
    }

    fn selector_2k(p_cross: &Mat, gamma: &Mat, k1: usize) -> Mat {
        let k2 = gamma.nrows();
        let id = Mat::identity(k1, k1);
        (0..k2).fold(Mat::zeros(k1, k1), |acc, d| {
            let e = unit(k2, d);
            acc + kron(&e.transpose(), &id) * p_cross * kron(&(gamma.transpose() * &e), &id)
        })
    }

    fn selector_star2k(p_star: &Mat, gamma: &Mat, k1: usize) -> Mat {
        let k2 = gamma.nrows();
        let id = Mat::identity(k1, k1);
        (0..k2).fold(Mat::zeros(k1, k1), |acc, d| {
            let e = unit(k2, d);
            acc + kron(&(e.transpose() * gamma), &id) * p_star * kron(&(gamma.transpose() * &e), &id)
        })
    }

    fn selector_1k(p_cross: &Mat, phi: &Mat, k2: usize) -> Mat {
        let k1 = phi.nrows();
        let id = Mat::identity(k2, k2);
        (0..k1).fold(Mat::zeros(k2, k2), |acc, d| {
            let e = unit(k1, d);
            acc + kron(&id, &(e.transpose() * phi)) * p_cross.transpose() * kron(&id, &e)
        })
    }

    fn selector_star1k(p_star: &Mat, phi: &Mat, k2: usize) -> Mat {
        let k1 = phi.nrows();
        let id = Mat::identity(k2, k2);
        (0..k1).fold(Mat::zeros(k2, k2), |acc, d| {
            let e = unit(k1, d);
            acc + kron(&id, &(e.transpose() * phi)) * p_star.transpose() * kron(&id, &(phi.transpose() * &e))
        })
    }

    #[test]
    fn deterministic_factor_closed_forms() {
        let f = dmatrix![1.0, -2.0, 0.5; 0.3, 0.7, -1.1];
        let g = dmatrix![0.2, 0.4, -0.6; 1.5, -0.3, 0.8];
        let c = dmatrix![1.0, 0.0, 2.0; 0.5, -1.0, 0.0; 0.0, 0.3, 1.0; 2.0, 1.0, 1.0];
        let r = dmatrix![1.0, 2.0; -0.5, 0.5; 0.0, 1.0];
        let phi = dmatrix![0.5, 0.1; -0.2, 0.3];
        let gamma = dmatrix![0.4, 0.0, 0.1; 0.2, -0.3, 0.0; 0.1, 0.1, 0.6];
        let vf = vec(&f);
        let vg = vec(&g);
        let p2 = &vf * vf.transpose();
        assert!((contract_c(&p2, &c) - &f * c.transpose() * &c * f.transpose()).amax() < 1e-12);
        assert!((contract_r(&p2, &r) - f.transpose() * r.transpose() * &r * &f).amax() < 1e-12);
        let mom = RegimeMoments {
            w: 1.0,
            w_pair: Vector::from_element(1, 1.0),
            f: vf.clone(),
            p2: p2.clone(),
            f_star: vg.clone(),
            p_star: &vg * vg.transpose(),
            p_cross: &vf * vg.transpose(),
        };
        let sc = contract_moments(&mom, &phi, &gamma);
        assert!((sc.pk - &f * f.transpose()).amax() < 1e-12);
        assert!((sc.p2k - &f * &gamma * g.transpose()).amax() < 1e-12);
        assert!((sc.pstar2k - &g * gamma.transpose() * &gamma * g.transpose()).amax() < 1e-12);
        assert!((sc.p1k - g.transpose() * phi.transpose() * &f).amax() < 1e-12);
        assert!((sc.pstar1k - g.transpose() * phi.transpose() * &phi * &g).amax() < 1e-12);
    }

    #[test]
    fn degenerate_factor_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p2 = random_spd(&mut rng, 3);
        let c = random_mat(&mut rng, 4, 1, 1.0);
        let ctc = (c.transpose() * &c)[(0, 0)];
        assert!((contract_c(&p2, &c) - &p2 * ctc).amax() < 1e-12);
        let r = random_mat(&mut rng, 5, 1, 1.0);
        let rtr = (r.transpose() * &r)[(0, 0)];
        assert!((contract_r(&p2, &r) - &p2 * rtr).amax() < 1e-12);
    }

    #[test]
    fn identity_gamma_reduces_p2k() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p_cross = random_mat(&mut rng, 6, 6, 1.0);
        let mom = RegimeMoments {
            w: 1.0,
            w_pair: Vector::from_element(1, 1.0),
            f: Vector::zeros(6),
            p2: random_spd(&mut rng, 6),
            f_star: Vector::zeros(6),
            p_star: random_spd(&mut rng, 6),
            p_cross: p_cross.clone(),
        };
        let sc = contract_moments(&mom, &random_mat(&mut rng, 2, 2, 1.0), &Mat::identity(3, 3));
        assert!((sc.p2k - selector_k(&p_cross, 2, 3)).amax() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn contractions_match_selector_sums(
            seed in 0u64..10_000, k1 in 1usize..5, k2 in 1usize..5, p in 1usize..9, q in 1usize..9,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = k1 * k2;
            let p2 = random_spd(&mut rng, r);
            let p_star = random_spd(&mut rng, r);
            let p_cross = random_mat(&mut rng, r, r, 1.0);
            let row = random_mat(&mut rng, p, k1, 1.0);
            let col = random_mat(&mut rng, q, k2, 1.0);
            let phi = random_mat(&mut rng, k1, k1, 1.0);
            let gamma = random_mat(&mut rng, k2, k2, 1.0);
            let pc = contract_c(&p2, &col);
            proptest::prop_assert!((&pc - selector_c(&p2, &col, k1)).amax() <= 1e-12);
            proptest::prop_assert!((contract_r(&p2, &row) - selector_r(&p2, &row, k2)).amax() <= 1e-12);
            let mom = RegimeMoments {
                w: 1.0,
                w_pair: Vector::from_element(1, 1.0),
                f: Vector::zeros(r),
                p2: p2.clone(),
                f_star: Vector::zeros(r),
                p_star: p_star.clone(),
                p_cross: p_cross.clone(),
            };
            let sc = contract_moments(&mom, &phi, &gamma);
            proptest::prop_assert!((sc.pk - selector_k(&p2, k1, k2)).amax() <= 1e-12);
            proptest::prop_assert!((sc.p2k - selector_2k(&p_cross, &gamma, k1)).amax() <= 1e-12);
            proptest::prop_assert!((sc.pstar2k - selector_star2k(&p_star, &gamma, k1)).amax() <= 1e-12);
            proptest::prop_assert!((sc.p1k - selector_1k(&p_cross, &phi, k2)).amax() <= 1e-12);
            proptest::prop_assert!((sc.pstar1k - selector_star1k(&p_star, &phi, k2)).amax() <= 1e-12);
            // Congruence sums keep positive semidefiniteness.
            let min_eig = crate::linalg::min_eigenvalue(&pc);
            proptest::prop_assert!(min_eig >= -1e-10 * pc.trace().abs().max(1.0));
        }
    }

    fn fitted(params: &ModelParams, series: &MatrixSeries) -> (FilterOutput, SmoothOutput, PosteriorMoments) {
        let filt = filter_pass(params, series).unwrap();
        let sm = smooth_pass(params, &filt).unwrap();
        let pm = compute_moments(params, &filt, &sm).unwrap();
        (filt, sm, pm)
    }

    #[test]
    fn single_regime_star_is_previous_smoothed_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = random_params(&mut rng, Dims::new(3, 3, 2, 1, 1));
        let obs: Vec<Mat> = (0..8).map(|_| random_mat(&mut rng, 3, 3, 2.0)).collect();
        let (_, sm, pm) = fitted(&params, &MatrixSeries::new(obs).unwrap());
        for t in 1..=8 {
            assert_eq!(pm.at(t, 0).f_star, sm.at(t - 1).f_n[0]);
            assert_eq!(pm.at(t, 0).w, 1.0);
        }
    }

    #[test]
    fn single_regime_cross_moment_matches_dense_smoother() {
        // Lag-one smoothed covariance for a linear Gaussian model: V_{t|n} G_{t-1}ᵀ.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = random_params(&mut rng, Dims::new(3, 2, 1, 2, 1));
        let obs: Vec<Mat> = (0..6).map(|_| random_mat(&mut rng, 3, 2, 2.0)).collect();
        let series = MatrixSeries::new(obs).unwrap();
        let (filt, _, pm) = fitted(&params, &series);
        let psi = params.regimes[0].transition_kron();
        for t in 2..=6 {
            let (_, _, vf) = filt.collapsed(t - 1);
            let v_pred = &psi * &vf[0] * psi.transpose() + Mat::identity(2, 2) * params.state_var;
            let gain = &vf[0] * psi.transpose() * v_pred.try_inverse().unwrap();
            let m = pm.at(t, 0);
            let v_n = &m.p2 - &m.f * m.f.transpose();
            let want = &v_n * gain.transpose() + &m.f * m.f_star.transpose();
            assert!((&m.p_cross - want).amax() < 1e-10);
        }
    }

    #[test]
    fn zero_dynamics_cross_moment_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = random_params(&mut rng, Dims::new(3, 3, 2, 2, 2));
        for reg in &mut params.regimes {
            reg.row_ar = Mat::zeros(2, 2);
        }
        let obs: Vec<Mat> = (0..5).map(|_| random_mat(&mut rng, 3, 3, 2.0)).collect();
        let (_, _, pm) = fitted(&params, &MatrixSeries::new(obs).unwrap());
        for t in 1..=5 {
            for k in 0..2 {
                let m = pm.at(t, k);
                assert!((&m.p_cross - &m.f * m.f_star.transpose()).amax() < 1e-14);
            }
        }
    }

    #[test]
    fn static_factors_match_exhaustive_path_posterior() {
        // With Φ = 0 the factors are independent over time given the regimes, so the model is a
        // hidden Markov chain with Gaussian emissions and the collapsed recursions are exact.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (p, q) = (3, 2);
        let regimes: Vec<RegimeParams> = (0..2)
            .map(|k| RegimeParams {
                row_loading: random_mat(&mut rng, p, 1, 1.0),
                col_loading: random_mat(&mut rng, q, 1, 1.0),
                intercept: dmatrix![if k == 0 { 1.5 } else { -1.0 }],
                row_ar: dmatrix![0.0],
                col_ar: dmatrix![rng.random_range(-0.9..0.9)],
            })
            .collect();
        let params = ModelParams {
            dims: Dims::new(p, q, 1, 1, 2),
            regimes,
            obs_var: 0.4,
            state_var: 0.3,
            transition: dmatrix![0.8, 0.2; 0.35, 0.65],
        };
        let n = 6;
        let obs: Vec<Mat> = (0..n).map(|_| random_mat(&mut rng, p, q, 2.0)).collect();
        let series = MatrixSeries::new(obs.clone()).unwrap();
        let (_, sm, pm) = fitted(&params, &series);

        let emission = |k: usize, y: &Mat| -> f64 {
            let reg = &params.regimes[k];
            let lambda = kron(&reg.col_loading, &reg.row_loading);
            let mean = &lambda * reg.intercept_vec();
            let cov = &lambda * lambda.transpose() * params.state_var + Mat::identity(p * q, p * q) * params.obs_var;
            let resid = vec(y) - mean;
            let chol = cov.clone().cholesky().unwrap();
            let quad = resid.dot(&chol.solve(&resid));
            -0.5 * (quad + cov.determinant().ln() + (p * q) as f64 * (2.0 * std::f64::consts::PI).ln())
        };
        let pi = crate::model::stationary_dist(&params.transition).unwrap().probs;
        // Enumerate all (s_0, ..., s_n) paths.
        let paths = 1usize << (n + 1);
        let mut log_w = Vec::with_capacity(paths);
        for code in 0..paths {
            let s: Vec<usize> = (0..=n).map(|t| (code >> t) & 1).collect();
            let mut lw = pi[s[0]].ln();
            for t in 1..=n {
                lw += params.transition[(s[t - 1], s[t])].ln() + emission(s[t], &obs[t - 1]);
            }
            log_w.push(lw);
        }
        let norm = logsumexp(&log_w);
        for t in 1..=n {
            let mut pair = Mat::zeros(2, 2);
            for (code, lw) in log_w.iter().enumerate() {
                pair[((code >> (t - 1)) & 1, (code >> t) & 1)] += (lw - norm).exp();
            }
            for k in 0..2 {
                assert!((pm.at(t, k).w - pair.column(k).sum()).abs() <= 1e-10);
                for i in 0..2 {
                    assert!((pm.at(t, k).w_pair[i] - pair[(i, k)]).abs() <= 1e-10);
                }
            }
            assert!((sm.at(t).w_n.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inconsistent_smoother_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = random_params(&mut rng, Dims::new(2, 2, 1, 1, 2));
        let obs: Vec<Mat> = (0..3).map(|_| random_mat(&mut rng, 2, 2, 1.0)).collect();
        let filt = filter_pass(&params, &MatrixSeries::new(obs).unwrap()).unwrap();
        let mut sm = smooth_pass(&params, &filt).unwrap();
        sm.steps[1].w_n[0] += 0.1;
        assert!(compute_moments(&params, &filt, &sm).is_err());
    }

    proptest::proptest! {
        #[test]
        fn moments_are_consistent(seed in 0u64..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = random_params(&mut rng, Dims::new(3, 2, 2, 1, 2));
            let obs: Vec<Mat> = (0..6).map(|_| random_mat(&mut rng, 3, 2, 2.0)).collect();
            let (_, _, pm) = fitted(&params, &MatrixSeries::new(obs).unwrap());
            for t in 1..=6 {
                let total: f64 = (0..2).map(|k| pm.at(t, k).w).sum();
                proptest::prop_assert!((total - 1.0).abs() <= 1e-10);
                for k in 0..2 {
                    let m = pm.at(t, k);
                    proptest::prop_assert!((0.0..=1.0 + 1e-12).contains(&m.w));
                    let cov = &m.p2 - &m.f * m.f.transpose();
                    proptest::prop_assert!(crate::linalg::min_eigenvalue(&cov) >= -1e-8 * cov.trace().abs().max(1e-12));
                    let cov_star = &m.p_star - &m.f_star * m.f_star.transpose();
                    proptest::prop_assert!(crate::linalg::min_eigenvalue(&cov_star) >= -1e-8 * cov_star.trace().abs().max(1e-12));
                }
            }
        }
    }
}
