//! Automatic starting values: segment the series, fit a static matrix factor model per
//! segment, cluster the segments into regimes, then fit loadings and VAR(1) dynamics per cluster.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assign::min_cost_assignment;
use crate::error::{Error, Result};
use crate::linalg::{procrustes, projection, solve_spd, sym_eigen_desc, unvec, vec, Mat, Vector};
use crate::model::{Dims, MatrixSeries, ModelParams, RegimeParams};
use crate::mstep::VARIANCE_FLOOR;

/// Preferred minimum segment length.
pub const MIN_SEGMENT_LEN: usize = 30;
/// Hard floor on segment length when the series is too short for [`MIN_SEGMENT_LEN`].
pub const MIN_SHORT_SEGMENT_LEN: usize = 10;
const DEFAULT_SEGMENTS: usize = 10;
const EIGEN_GAP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Target number of segments; defaults to `min(10, n / 30)`.
    #[serde(default)]
    pub segments: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_restarts")]
    pub kmeans_restarts: usize,
}

fn default_restarts() -> usize {
    10
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { segments: None, seed: 0, kmeans_restarts: default_restarts() }
    }
}

/// Static matrix factor fit on one block of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFit {
    pub interval: Range<usize>,
    /// Scaled so that `RᵀR = p·I`.
    pub row_loading: Mat,
    /// Scaled so that `CᵀC = q·I`.
    pub col_loading: Mat,
    pub factors: Vec<Mat>,
    /// Sample mean of `vec(F)`.
    pub mean: Vector,
    /// Sample covariance of `vec(F)`.
    pub cov: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitResult {
    pub params: ModelParams,
    /// Provisional zero-based regime label for each time point.
    pub labels: Vec<usize>,
    pub segments: Vec<Range<usize>>,
    pub segment_labels: Vec<usize>,
}

/// Splits `0..n` into contiguous segments whose lengths differ by at most one.
///
/// The count is `clamp(target, 2M, n / len)` where `len` is 30, or `n / 2M` for series
/// shorter than `60M` (but never below 10).
pub fn segment_series(n: usize, regimes: usize, target: usize) -> Result<Vec<Range<usize>>> {
    let lower = 2 * regimes.max(1);
    let min_len = if n >= MIN_SEGMENT_LEN * lower { MIN_SEGMENT_LEN } else { n / lower };
    if min_len < MIN_SHORT_SEGMENT_LEN {
        return Err(Error::Init(format!(
            "series of length {n} is too short to segment for {regimes} regimes (need at least {})",
            MIN_SHORT_SEGMENT_LEN * lower
        )));
    }
    let count = target.clamp(lower, (n / min_len).max(lower));
    let base = n / count;
    let extra = n % count;
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for i in 0..count {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    Ok(out)
}

/// Top `k` eigenvectors of a symmetric matrix, scaled by `√dim`, with the largest entry of
/// each column made positive.
fn scaled_top_eigenvectors(s: &Mat, k: usize, what: &str) -> Mat {
    let (vals, vecs) = sym_eigen_desc(s);
    let dim = s.nrows();
    if k < dim && (vals[k - 1] - vals[k]).abs() <= EIGEN_GAP_TOL * vals[0].abs().max(1.0) {
        log::warn!("{what} eigenvalues {k} and {} are tied; factor order is unstable", k + 1);
    }
    let mut out = vecs.columns(0, k).into_owned() * (dim as f64).sqrt();
    for mut col in out.column_iter_mut() {
        let pivot = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    out
}

fn moments(factors: &[Mat]) -> (Vector, Mat) {
    let r = factors[0].len();
    let n = factors.len() as f64;
    let mean = factors.iter().fold(Vector::zeros(r), |acc, f| acc + vec(f)) / n;
    let cov = factors.iter().fold(Mat::zeros(r, r), |acc, f| {
        let d = vec(f) - &mean;
        acc + &d * d.transpose()
    }) / n;
    (mean, cov)
}

/// Spectral estimate of a static matrix factor model on `obs`.
pub fn fit_segment(obs: &[Mat], interval: Range<usize>, row_factors: usize, col_factors: usize) -> Result<SegmentFit> {
    let need = row_factors.max(col_factors) + 2;
    if obs.len() < need {
        return Err(Error::Init(format!("segment of length {} is shorter than {need}", obs.len())));
    }
    let (p, q) = (obs[0].nrows(), obs[0].ncols());
    let row_gram = obs.iter().fold(Mat::zeros(p, p), |acc, y| acc + y * y.transpose());
    let col_gram = obs.iter().fold(Mat::zeros(q, q), |acc, y| acc + y.transpose() * y);
    let row_loading = scaled_top_eigenvectors(&row_gram, row_factors, "row");
    let col_loading = scaled_top_eigenvectors(&col_gram, col_factors, "column");
    let scale = 1.0 / (p * q) as f64;
    let factors: Vec<Mat> = obs.iter().map(|y| row_loading.transpose() * y * &col_loading * scale).collect();
    let (mean, cov) = moments(&factors);
    Ok(SegmentFit { interval, row_loading, col_loading, factors, mean, cov })
}

/// Projection-trace distance between column spaces, in `[0, 1]`.
pub fn space_distance(a: &Mat, b: &Mat) -> Result<f64> {
    let pa = projection(a).map_err(|_| Error::InvalidInput("first argument is rank deficient".into()))?;
    let pb = projection(b).map_err(|_| Error::InvalidInput("second argument is rank deficient".into()))?;
    let rank = a.ncols().max(b.ncols()) as f64;
    // Elementwise inner product equals tr(Pa Pb) and is exactly symmetric in its arguments.
    let overlap = pa.dot(&pb) / rank;
    Ok((1.0 - overlap).clamp(0.0, 1.0).sqrt())
}

/// Average-linkage hierarchical clustering cut at `k` clusters.
fn average_linkage(dist: &Mat, k: usize) -> Vec<usize> {
    let n = dist.nrows();
    let mut condensed = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            condensed.push(dist[(i, j)]);
        }
    }
    let dendrogram = kodama::linkage(&mut condensed, n, kodama::Method::Average);
    // Union-find over the first n − k merges.
    let mut parent: Vec<usize> = (0..2 * n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (i, step) in dendrogram.steps().iter().take(n - k).enumerate() {
        let node = n + i;
        let a = find(&mut parent, step.cluster1);
        let b = find(&mut parent, step.cluster2);
        parent[a] = node;
        parent[b] = node;
    }
    canonical_labels(&(0..n).map(|i| find(&mut parent, i)).collect::<Vec<_>>())
}

/// Relabels so clusters are numbered by first appearance.
fn canonical_labels(raw: &[usize]) -> Vec<usize> {
    let mut seen: Vec<usize> = Vec::new();
    raw.iter()
        .map(|x| match seen.iter().position(|s| s == x) {
            Some(i) => i,
            None => {
                seen.push(*x);
                seen.len() - 1
            }
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; the best of `restarts` runs by inertia.
fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    let dim = points[0].len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centers = vec![points[rng.random_range(0..n)].clone()];
        while centers.len() < k {
            let d2: Vec<f64> = points
                .iter()
                .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d2.iter().sum();
            let next = if total > 0.0 {
                let mut u = rng.random_range(0.0..total);
                d2.iter().position(|&d| {
                    u -= d;
                    u < 0.0
                })
                .unwrap_or(n - 1)
            } else {
                rng.random_range(0..n)
            };
            centers.push(points[next].clone());
        }
        let mut labels = vec![usize::MAX; n];
        for _ in 0..100 {
            let new: Vec<usize> = points
                .iter()
                .map(|p| {
                    (0..k).min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b]))).expect("k > 0")
                })
                .collect();
            if new == labels {
                break;
            }
            labels = new;
            let old = centers.clone();
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    // Re-seed an empty cluster at the point farthest from its own center.
                    let far = (0..n)
                        .max_by(|&i, &j| sq_dist(&points[i], &old[labels[i]]).total_cmp(&sq_dist(&points[j], &old[labels[j]])))
                        .expect("n > 0");
                    *center = points[far].clone();
                    continue;
                }
                *center = (0..dim).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
            }
        }
        let inertia: f64 = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.expect("at least one restart").1
}

/// Relabels `labels` to agree as much as possible with `reference`.
fn align_labels(labels: &[usize], reference: &[usize], k: usize) -> Vec<usize> {
    let mut cost = Mat::zeros(k, k);
    for (&a, &b) in labels.iter().zip(reference) {
        cost[(a, b)] -= 1.0;
    }
    let map = min_cost_assignment(&cost);
    labels.iter().map(|&a| map[a]).collect()
}

fn standardized_features(fits: &[SegmentFit]) -> Vec<Vec<f64>> {
    let raw: Vec<Vec<f64>> = fits
        .iter()
        .map(|f| {
            let r = f.mean.len();
            let mut v: Vec<f64> = f.mean.iter().copied().collect();
            for j in 0..r {
                for i in j..r {
                    v.push(f.cov[(i, j)]);
                }
            }
            v
        })
        .collect();
    let dim = raw[0].len();
    let n = raw.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| raw.iter().map(|v| v[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..dim)
        .map(|j| {
            let var = raw.iter().map(|v| (v[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    raw.iter().map(|v| (0..dim).map(|j| (v[j] - mean[j]) / sd[j]).collect()).collect()
}

/// Clusters segments into `regimes` groups by a 2-of-3 vote over row-space clustering,
/// column-space clustering and k-means on factor moments.
pub fn cluster_segments(fits: &[SegmentFit], regimes: usize, config: &InitConfig) -> Result<Vec<usize>> {
    let a = fits.len();
    if regimes == 1 {
        return Ok(vec![0; a]);
    }
    if a < 2 * regimes {
        return Err(Error::Init(format!("{a} segments cannot be clustered into {regimes} regimes")));
    }
    let mut dist_r = Mat::zeros(a, a);
    let mut dist_c = Mat::zeros(a, a);
    for i in 0..a {
        for j in (i + 1)..a {
            dist_r[(i, j)] = space_distance(&fits[i].row_loading, &fits[j].row_loading)?;
            dist_r[(j, i)] = dist_r[(i, j)];
            dist_c[(i, j)] = space_distance(&fits[i].col_loading, &fits[j].col_loading)?;
            dist_c[(j, i)] = dist_c[(i, j)];
        }
    }
    let by_row = average_linkage(&dist_r, regimes);
    let by_col = align_labels(&average_linkage(&dist_c, regimes), &by_row, regimes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let by_moments = align_labels(
        &kmeans(&standardized_features(fits), regimes, config.kmeans_restarts, &mut rng),
        &by_row,
        regimes,
    );
    let voted: Vec<usize> = (0..a)
        .map(|i| if by_col[i] == by_moments[i] { by_col[i] } else { by_row[i] })
        .collect();
    if (0..regimes).all(|k| voted.contains(&k)) {
        Ok(voted)
    } else {
        log::debug!("majority vote left a regime empty; using the row-space clustering");
        Ok(by_row)
    }
}

/// Nearest Kronecker product `Γ ⊗ Φ` to `psi` in Frobenius norm, with `‖Φ‖_F = ‖Γ‖_F` and
/// `Φ(1,1) ≥ 0`.
pub fn kron_approx(psi: &Mat, row_factors: usize, col_factors: usize) -> (Mat, Mat) {
    let (k1, k2) = (row_factors, col_factors);
    // Rearrangement: row (c,d) of Γ, column (a,b) of Φ.
    let rearranged = Mat::from_fn(k2 * k2, k1 * k1, |cd, ab| {
        let (c, d) = (cd % k2, cd / k2);
        let (a, b) = (ab % k1, ab / k1);
        psi[(a + c * k1, b + d * k1)]
    });
    let svd = rearranged.svd(true, true);
    let top = (0..svd.singular_values.len())
        .max_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]))
        .expect("non-empty");
    let s = svd.singular_values[top].sqrt();
    let u = svd.u.expect("requested U").column(top) * s;
    let v = svd.v_t.expect("requested Vᵀ").row(top).transpose() * s;
    let mut phi = Mat::from_column_slice(k1, k1, v.as_slice());
    let mut gamma = Mat::from_column_slice(k2, k2, u.as_slice());
    if phi[(0, 0)] < 0.0 {
        phi.neg_mut();
        gamma.neg_mut();
    }
    (phi, gamma)
}

/// Least-squares VAR(1) `vec(F_t) = β + Ψ vec(F_{t−1})` over the given times (`t ≥ 1`).
fn fit_var(factors: &[Mat], times: &[usize]) -> Result<(Vector, Mat, f64)> {
    let r = factors[0].len();
    let mut gram = Mat::zeros(r + 1, r + 1);
    let mut cross = Mat::zeros(r + 1, r);
    for &t in times {
        let mut x = Vector::zeros(r + 1);
        x[0] = 1.0;
        x.rows_mut(1, r).copy_from(&vec(&factors[t - 1]));
        gram += &x * x.transpose();
        cross += &x * vec(&factors[t]).transpose();
    }
    let coef = solve_spd(&gram, &cross)?;
    let beta = coef.row(0).transpose();
    let psi = coef.rows(1, r).transpose();
    let mut rss = 0.0;
    for &t in times {
        let resid = vec(&factors[t]) - &beta - &psi * vec(&factors[t - 1]);
        rss += resid.norm_squared();
    }
    Ok((beta, psi, rss))
}

/// Builds starting parameters from the data alone.
pub fn build_init(series: &MatrixSeries, dims: Dims, config: &InitConfig) -> Result<InitResult> {
    dims.check()?;
    let n = series.len();
    let m = dims.regimes;
    let (k1, k2) = (dims.row_factors, dims.col_factors);
    if series.rows() != dims.rows || series.cols() != dims.cols {
        return Err(Error::Dimension(format!(
            "series is {}x{} but dims say {}x{}",
            series.rows(),
            series.cols(),
            dims.rows,
            dims.cols
        )));
    }
    let obs = series.as_slice();
    let target = config.segments.unwrap_or_else(|| DEFAULT_SEGMENTS.min(n / MIN_SEGMENT_LEN));
    let segments = segment_series(n, m, target)?;
    let fits = segments
        .par_iter()
        .map(|iv| fit_segment(&obs[iv.clone()], iv.clone(), k1, k2))
        .collect::<Result<Vec<_>>>()?;
    let segment_labels = cluster_segments(&fits, m, config)?;
    let mut labels = vec![0; n];
    for (iv, &l) in segments.iter().zip(&segment_labels) {
        labels[iv.clone()].fill(l);
    }

    // Pooled loadings per cluster, rotated towards the first cluster's gauge.
    let mut loadings: Vec<(Mat, Mat)> = Vec::with_capacity(m);
    for k in 0..m {
        let pooled: Vec<Mat> = (0..n).filter(|&t| labels[t] == k).map(|t| obs[t].clone()).collect();
        let fit = fit_segment(&pooled, 0..pooled.len(), k1, k2)?;
        let (mut row, mut col) = (fit.row_loading, fit.col_loading);
        if let Some((row0, col0)) = loadings.first() {
            row = &row * procrustes(&row, row0);
            col = &col * procrustes(&col, col0);
        }
        loadings.push((row, col));
    }
    let scale = 1.0 / dims.obs_len() as f64;
    let factors: Vec<Mat> = (0..n)
        .map(|t| {
            let (row, col) = &loadings[labels[t]];
            row.transpose() * &obs[t] * col * scale
        })
        .collect();
    let obs_var = (0..n)
        .map(|t| {
            let (row, col) = &loadings[labels[t]];
            (&obs[t] - row * &factors[t] * col.transpose()).norm_squared()
        })
        .sum::<f64>()
        * scale
        / n as f64;

    let r = dims.factor_len();
    let mut regimes = Vec::with_capacity(m);
    let (mut rss_total, mut count_total) = (0.0, 0usize);
    for (k, (row, col)) in loadings.into_iter().enumerate() {
        let mut times: Vec<usize> = (1..n).filter(|&t| labels[t] == k).collect();
        if times.len() < r + 2 {
            log::debug!("regime {k} has {} transitions; fitting its VAR on the whole series", times.len());
            times = (1..n).collect();
        }
        let (beta, psi, rss) = fit_var(&factors, &times).map_err(|e| Error::Init(format!("VAR fit for regime {k}: {e}")))?;
        rss_total += rss;
        count_total += times.len();
        let (row_ar, col_ar) = kron_approx(&psi, k1, k2);
        regimes.push(RegimeParams {
            row_loading: row,
            col_loading: col,
            intercept: unvec(beta.as_slice(), k1, k2)?,
            row_ar,
            col_ar,
        });
    }
    let state_var = (rss_total / (count_total * r) as f64).max(VARIANCE_FLOOR);

    let mut transition = Mat::from_element(m, m, 1.0);
    for t in 1..n {
        transition[(labels[t - 1], labels[t])] += 1.0;
    }
    for i in 0..m {
        let s = transition.row(i).sum();
        transition.row_mut(i).scale_mut(1.0 / s);
    }
    let params = ModelParams { dims, regimes, obs_var: obs_var.max(VARIANCE_FLOOR), state_var, transition };
    params.check().map_err(|e| Error::Init(format!("initial parameters are invalid: {e}")))?;
    Ok(InitResult { params, labels, segments, segment_labels })
}
