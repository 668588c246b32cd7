//! Parameter containers, validation, identification and the stationarity check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{complex_eigenvalues, inv_sqrt_spd, kron, sym_eigen_desc, vec, Mat, Vector};

/// Problem dimensions. The series length is not part of the parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "p")]
    pub rows: usize,
    #[serde(rename = "q")]
    pub cols: usize,
    #[serde(rename = "k1")]
    pub row_factors: usize,
    #[serde(rename = "k2")]
    pub col_factors: usize,
    #[serde(rename = "M")]
    pub regimes: usize,
}

impl Dims {
    pub fn new(rows: usize, cols: usize, row_factors: usize, col_factors: usize, regimes: usize) -> Self {
        Self { rows, cols, row_factors, col_factors, regimes }
    }

    /// Length of the vectorized factor, `k1·k2`.
    pub fn factor_len(&self) -> usize {
        self.row_factors * self.col_factors
    }

    /// Length of the vectorized observation, `p·q`.
    pub fn obs_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.row_factors < 1 || self.row_factors > self.rows {
            out.push(format!("k1={} must lie in [1, p={}]", self.row_factors, self.rows));
        }
        if self.col_factors < 1 || self.col_factors > self.cols {
            out.push(format!("k2={} must lie in [1, q={}]", self.col_factors, self.cols));
        }
        if self.regimes < 1 {
            out.push("M must be at least 1".into());
        }
        out
    }

    pub fn check(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(v.join("; ")))
        }
    }
}

/// Ordered sequence of `p × q` observation matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSeries {
    obs: Vec<Mat>,
}

impl MatrixSeries {
    pub fn new(obs: Vec<Mat>) -> Result<Self> {
        let Some(first) = obs.first() else {
            return Err(Error::InvalidInput("empty matrix series".into()));
        };
        let (p, q) = first.shape();
        if p == 0 || q == 0 {
            return Err(Error::InvalidInput("observation matrices must be non-empty".into()));
        }
        for (t, y) in obs.iter().enumerate() {
            if y.shape() != (p, q) {
                return Err(Error::Dimension(format!(
                    "observation {} is {}x{}, expected {p}x{q}",
                    t + 1,
                    y.nrows(),
                    y.ncols()
                )));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("observation {} has a non-finite entry", t + 1)));
            }
        }
        Ok(Self { obs })
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.obs[0].nrows()
    }

    pub fn cols(&self) -> usize {
        self.obs[0].ncols()
    }

    pub fn get(&self, t: usize) -> &Mat {
        &self.obs[t]
    }

    pub fn as_slice(&self) -> &[Mat] {
        &self.obs
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Mat> {
        self.obs.iter()
    }

    /// Contiguous sub-series `[start, end)`.
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidInput(format!("window [{start}, {end}) outside series of length {}", self.len())));
        }
        Ok(Self { obs: self.obs[start..end].to_vec() })
    }

    pub fn into_inner(self) -> Vec<Mat> {
        self.obs
    }
}

/// One regime's parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeParams {
    /// Row loading `R` (p × k1).
    #[serde(rename = "R", with = "crate::serde_mat")]
    pub row_loading: Mat,
    /// Column loading `C` (q × k2).
    #[serde(rename = "C", with = "crate::serde_mat")]
    pub col_loading: Mat,
    /// Factor intercept `B` (k1 × k2).
    #[serde(rename = "B", with = "crate::serde_mat")]
    pub intercept: Mat,
    /// Row autoregression `Φ` (k1 × k1).
    #[serde(rename = "Phi", with = "crate::serde_mat")]
    pub row_ar: Mat,
    /// Column autoregression `Γ` (k2 × k2).
    #[serde(rename = "Gamma", with = "crate::serde_mat")]
    pub col_ar: Mat,
}

impl RegimeParams {
    /// Vectorized transition `Γ ⊗ Φ` (r × r).
    pub fn transition_kron(&self) -> Mat {
        kron(&self.col_ar, &self.row_ar)
    }

    /// Vectorized intercept `vec(B)`.
    pub fn intercept_vec(&self) -> Vector {
        vec(&self.intercept)
    }

    /// Common component `R F Cᵀ`.
    pub fn common(&self, factor: &Mat) -> Mat {
        &self.row_loading * factor * self.col_loading.transpose()
    }
}

/// Full parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: Dims,
    pub regimes: Vec<RegimeParams>,
    /// Observation noise variance.
    #[serde(rename = "sigma2")]
    pub obs_var: f64,
    /// Factor innovation variance.
    #[serde(rename = "sigma_eps2")]
    pub state_var: f64,
    /// Row-stochastic regime transition matrix.
    #[serde(rename = "P", with = "crate::serde_mat")]
    pub transition: Mat,
}

/// Invariant law of the regime chain.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDist {
    pub probs: Vector,
}

/// Tolerance on transition row sums.
pub const ROW_SUM_TOL: f64 = 1e-12;

impl ModelParams {
    /// Human-readable descriptions of every broken invariant; empty when valid.
    pub fn validate(&self) -> Vec<String> {
        let d = &self.dims;
        let mut out = d.violations();
        if self.regimes.len() != d.regimes {
            out.push(format!("{} regime blocks supplied for M={}", self.regimes.len(), d.regimes));
        }
        for (k, reg) in self.regimes.iter().enumerate() {
            let shapes = [
                ("R", &reg.row_loading, (d.rows, d.row_factors)),
                ("C", &reg.col_loading, (d.cols, d.col_factors)),
                ("B", &reg.intercept, (d.row_factors, d.col_factors)),
                ("Phi", &reg.row_ar, (d.row_factors, d.row_factors)),
                ("Gamma", &reg.col_ar, (d.col_factors, d.col_factors)),
            ];
            for (name, m, want) in shapes {
                if m.shape() != want {
                    out.push(format!(
                        "regime {k}: {name} is {}x{}, expected {}x{}",
                        m.nrows(),
                        m.ncols(),
                        want.0,
                        want.1
                    ));
                }
                if m.iter().any(|v| !v.is_finite()) {
                    out.push(format!("regime {k}: {name} has a non-finite entry"));
                }
            }
        }
        if !(self.obs_var > 0.0 && self.obs_var.is_finite()) {
            out.push(format!("sigma2 must be positive and finite, got {}", self.obs_var));
        }
        if !(self.state_var > 0.0 && self.state_var.is_finite()) {
            out.push(format!("sigma_eps2 must be positive and finite, got {}", self.state_var));
        }
        let p = &self.transition;
        if p.shape() != (d.regimes, d.regimes) {
            out.push(format!("P is {}x{}, expected {m}x{m}", p.nrows(), p.ncols(), m = d.regimes));
        } else {
            for i in 0..p.nrows() {
                let row = p.row(i);
                if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    out.push(format!("P row {i} has an entry outside [0,1]"));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > ROW_SUM_TOL {
                    out.push(format!("P row {i} sums to {s}, not 1"));
                }
            }
        }
        out
    }

    pub fn check(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(v.join("; ")))
        }
    }

    /// Copy with regimes reordered so that new regime `i` is old regime `order[i]`.
    pub fn permute_regimes(&self, order: &[usize]) -> ModelParams {
        let m = order.len();
        ModelParams {
            dims: self.dims,
            regimes: order.iter().map(|&i| self.regimes[i].clone()).collect(),
            obs_var: self.obs_var,
            state_var: self.state_var,
            transition: Mat::from_fn(m, m, |i, j| self.transition[(order[i], order[j])]),
        }
    }
}

/// Stationary distribution of an irreducible, aperiodic transition matrix.
pub fn stationary_dist(transition: &Mat) -> Result<StationaryDist> {
    let m = transition.nrows();
    if m == 0 || transition.ncols() != m {
        return Err(Error::Dimension(format!(
            "transition matrix must be square and non-empty, got {}x{}",
            transition.nrows(),
            transition.ncols()
        )));
    }
    if m == 1 {
        return Ok(StationaryDist { probs: Vector::from_element(1, 1.0) });
    }
    let eig = complex_eigenvalues(&transition.transpose()).ok_or(Error::NoConvergence { iterations: 0, last: f64::NAN })?;
    let unit = eig.iter().filter(|z| (z.norm() - 1.0).abs() < 1e-9).count();
    if unit != 1 {
        return Err(Error::ReducibleChain { unit_modulus: unit });
    }
    let mut a = transition.transpose() - Mat::identity(m, m);
    for j in 0..m {
        a[(m - 1, j)] = 1.0;
    }
    let mut rhs = Vector::zeros(m);
    rhs[m - 1] = 1.0;
    let sol = a.lu().solve(&rhs).ok_or(Error::ReducibleChain { unit_modulus: unit })?;
    let clipped = sol.map(|v| v.max(0.0));
    let total = clipped.sum();
    Ok(StationaryDist { probs: clipped / total })
}

/// Largest dense size of the switching companion operator before power iteration is used.
pub const DENSE_SPECTRAL_LIMIT: usize = 4096;
const POWER_MAX_STEPS: usize = 10_000;
const POWER_TOL: f64 = 1e-8;

/// Dense switching companion matrix `diag(Ψ_k ⊗ Ψ_k)(Pᵀ ⊗ I)`, with `Ψ_k = Γ_k ⊗ Φ_k`.
pub fn switching_companion(params: &ModelParams) -> Mat {
    let m = params.dims.regimes;
    let r = params.dims.factor_len();
    let r2 = r * r;
    let mut blocks = Mat::zeros(m * r2, m * r2);
    for (k, reg) in params.regimes.iter().enumerate() {
        let psi = reg.transition_kron();
        let psi2 = kron(&psi, &psi);
        for j in 0..m {
            let w = params.transition[(j, k)];
            if w != 0.0 {
                blocks.view_mut((k * r2, j * r2), (r2, r2)).copy_from(&(&psi2 * w));
            }
        }
    }
    blocks
}

/// Spectral radius of the switching companion operator; below one means the factor
/// process has a unique stationary, ergodic solution.
pub fn spectral_radius_switching(params: &ModelParams) -> Result<f64> {
    let m = params.dims.regimes;
    let r = params.dims.factor_len();
    if m * r * r <= DENSE_SPECTRAL_LIMIT {
        let q = switching_companion(params);
        if let Some(eig) = complex_eigenvalues(&q) {
            return Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max));
        }
        log::debug!("dense Schur iteration stalled; falling back to power iteration");
    }
    spectral_radius_power(params)
}

/// Power iteration on `Y_k ↦ Ψ_k (Σ_j p_jk Y_j) Ψ_kᵀ`.
///
/// The operator maps tuples of PSD matrices to PSD matrices, so its spectral radius is an
/// eigenvalue with a PSD eigenvector. Other eigenvalues can share that modulus (complex
/// pairs of `Ψ` do this), so the iteration runs on the operator shifted by `αI`, which
/// leaves the Perron eigenvalue strictly dominant.
pub(crate) fn spectral_radius_power(params: &ModelParams) -> Result<f64> {
    let m = params.dims.regimes;
    let r = params.dims.factor_len();
    let psis: Vec<Mat> = params.regimes.iter().map(RegimeParams::transition_kron).collect();
    let apply = |x: &[Mat]| -> Vec<Mat> {
        (0..m)
            .map(|k| {
                let mut mix = Mat::zeros(r, r);
                for (j, xj) in x.iter().enumerate() {
                    mix += xj * params.transition[(j, k)];
                }
                &psis[k] * mix * psis[k].transpose()
            })
            .collect()
    };
    let norm = |x: &[Mat]| x.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt();

    // Crude growth estimate for the shift.
    let mut x: Vec<Mat> = vec![Mat::identity(r, r); m];
    let mut log_growth = 0.0;
    const WARMUP: usize = 32;
    for _ in 0..WARMUP {
        let n0 = norm(&x);
        let next = apply(&x);
        let n1 = norm(&next);
        if n1 == 0.0 {
            return Ok(0.0);
        }
        log_growth += (n1 / n0).ln();
        x = next.into_iter().map(|b| b / n1).collect();
    }
    let shift = (log_growth / WARMUP as f64).exp();

    let mut last = f64::NAN;
    let mut last_step = f64::NAN;
    for _ in 0..POWER_MAX_STEPS {
        let image = apply(&x);
        // With every block positive definite, λ_min and λ_max of X_k^{-1/2} Q(X)_k X_k^{-1/2}
        // over all blocks bracket the spectral radius.
        if let Some((lo, hi)) = cone_bounds(&x, &image) {
            if hi - lo <= POWER_TOL * hi {
                return Ok(0.5 * (lo + hi));
            }
        }
        let n0 = norm(&x);
        let next: Vec<Mat> = image.into_iter().zip(&x).map(|(a, b)| a + b * shift).collect();
        let n1 = norm(&next);
        let rate = n1 / n0;
        let step = (rate - last).abs();
        // Fallback for reducible chains, where the bracket need not close: geometric convergence
        // with contraction c leaves an error of about step·c/(1−c).
        let contraction = (step / last_step).min(0.999_999);
        let err = if contraction.is_finite() { step * contraction / (1.0 - contraction) } else { f64::INFINITY };
        if step == 0.0 || err <= 1e-4 * POWER_TOL * rate {
            return Ok((rate - shift).max(0.0));
        }
        last = rate;
        last_step = step;
        x = next.into_iter().map(|b| b / n1).collect();
    }
    Err(Error::NoConvergence { iterations: POWER_MAX_STEPS, last: last - shift })
}

fn cone_bounds(x: &[Mat], image: &[Mat]) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0_f64;
    for (xk, yk) in x.iter().zip(image) {
        let w = inv_sqrt_spd(xk).ok()?;
        let (vals, _) = sym_eigen_desc(&(&w * yk * &w));
        hi = hi.max(vals[0]);
        lo = lo.min(vals[vals.len() - 1]);
    }
    Some((lo.max(0.0), hi))
}

/// Orthogonal rotations and regime order applied by [`normalize_identification`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub params: ModelParams,
    /// `H_r`: every `R_k` became `R_k H_r`.
    pub row_rotation: Mat,
    /// `H_c`: every `C_k` became `C_k H_c`.
    pub col_rotation: Mat,
    /// Output regime `i` is input regime `order[i]`.
    pub order: Vec<usize>,
    /// Output position of the regime whose loadings define the rotations.
    pub anchor: usize,
}

impl Normalized {
    /// Maps a factor of input regime coordinates into the normalized ones: `H_rᵀ F H_c`.
    pub fn rotate_factor(&self, factor: &Mat) -> Mat {
        self.row_rotation.transpose() * factor * &self.col_rotation
    }
}

const RANK_TOL: f64 = 1e-12;
const TIE_TOL: f64 = 1e-12;

fn sign_flips(loading: &Mat) -> Vector {
    let scale = loading.amax().max(f64::MIN_POSITIVE);
    Vector::from_iterator(
        loading.ncols(),
        loading.column_iter().map(|col| {
            let first = col[0];
            let pivot = if first.abs() > RANK_TOL * scale {
                first
            } else {
                col.iter().copied().find(|v| v.abs() > RANK_TOL * scale).unwrap_or(1.0)
            };
            if pivot < 0.0 {
                -1.0
            } else {
                1.0
            }
        }),
    )
}

fn eigen_rotation(loading: &Mat, scale: f64, side: &str) -> Result<Mat> {
    let gram = loading.transpose() * loading / scale;
    let (vals, vecs) = sym_eigen_desc(&gram);
    let top = vals[0];
    if !(top > 0.0) || vals.iter().any(|&v| v <= RANK_TOL * top) {
        return Err(Error::Identification(format!("anchor {side} loading is rank deficient")));
    }
    let rotated = loading * &vecs;
    let signs = sign_flips(&rotated);
    Ok(vecs * Mat::from_diagonal(&signs))
}

fn rotate_all(params: &ModelParams, hr: &Mat, hc: &Mat) -> ModelParams {
    let regimes = params
        .regimes
        .iter()
        .map(|reg| RegimeParams {
            row_loading: &reg.row_loading * hr,
            col_loading: &reg.col_loading * hc,
            intercept: hr.transpose() * &reg.intercept * hc,
            row_ar: hr.transpose() * &reg.row_ar * hr,
            col_ar: hc.transpose() * &reg.col_ar * hc,
        })
        .collect();
    ModelParams { regimes, ..params.clone() }
}

fn descending_order(params: &ModelParams) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..params.regimes.len()).collect();
    let key = |i: usize| params.regimes[i].intercept[(0, 0)];
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)));
    for w in order.windows(2) {
        if (key(w[0]) - key(w[1])).abs() <= TIE_TOL {
            return Err(Error::Identification(format!(
                "regimes {} and {} have tied B(1,1) = {}",
                w[0],
                w[1],
                key(w[0])
            )));
        }
    }
    Ok(order)
}

/// Brings parameters into the identified representative of their rotation class.
///
/// Rotations diagonalize one regime's `RᵀR/p` and `CᵀC/q` in descending order with
/// non-negative first rows, the same rotations are applied to every regime, and regimes
/// are sorted by descending `B(1,1)`. `anchor` is the preferred output position of the
/// rotation-source regime. Since the order depends on the rotation, every input regime is
/// tried as the source; the one landing closest to `anchor` wins, ties going to the larger
/// rotated `B(1,1)`. The rule never looks at input labels, so relabeled inputs give
/// identical outputs.
pub fn normalize_identification(params: &ModelParams, anchor: usize) -> Result<Normalized> {
    params.check()?;
    let m = params.dims.regimes;
    if anchor >= m {
        return Err(Error::InvalidInput(format!("anchor regime {anchor} out of range for M={m}")));
    }
    let p = params.dims.rows as f64;
    let q = params.dims.cols as f64;
    let mut best: Option<((usize, f64), Normalized)> = None;
    let mut last_err = None;
    for source in 0..m {
        let reg = &params.regimes[source];
        let hr = match eigen_rotation(&reg.row_loading, p, "row") {
            Ok(h) => h,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let hc = match eigen_rotation(&reg.col_loading, q, "column") {
            Ok(h) => h,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let rotated = rotate_all(params, &hr, &hc);
        let order = match descending_order(&rotated) {
            Ok(o) => o,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let position = order.iter().position(|&i| i == source).expect("order is a permutation");
        let key = (position.abs_diff(anchor), rotated.regimes[source].intercept[(0, 0)]);
        let better = match &best {
            None => true,
            Some((k, _)) => key.0 < k.0 || (key.0 == k.0 && key.1 > k.1),
        };
        if better {
            let out = Normalized {
                params: rotated.permute_regimes(&order),
                row_rotation: hr,
                col_rotation: hc,
                order,
                anchor: position,
            };
            best = Some((key, out));
        }
    }
    best.map(|(_, n)| n)
        .ok_or_else(|| last_err.unwrap_or_else(|| Error::Identification("no admissible rotation source".into())))
}
