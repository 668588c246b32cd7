//! Backward pass: smoothed regime probabilities and collapsed smoothed factor moments.

use crate::error::{Error, Result};
use crate::filter::{FilterOutput, RegimeCache, WEIGHT_FLOOR};
use crate::linalg::{logsumexp, right_solve_spd, symmetrize, Mat, Vector};
use crate::model::ModelParams;

const MASS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothStep {
    /// `w_{t|n}^{(j)}`.
    pub w_n: Vector,
    /// `w_{t,t+1|n}^{(j,k)}`; absent at the last time point.
    pub w_pair_next: Option<Mat>,
    pub f_n: Vec<Vector>,
    pub v_n: Vec<Mat>,
    /// Smoother gains `G_t^{(j,k)}` indexed `[j * M + k]`; empty at the last time point.
    pub gains: Vec<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothOutput {
    /// Time zero.
    pub initial: SmoothStep,
    /// Times `1..=n`.
    pub steps: Vec<SmoothStep>,
}

impl SmoothOutput {
    /// Smoothed step at time `t`, with `t = 0` the initial state.
    pub fn at(&self, t: usize) -> &SmoothStep {
        if t == 0 {
            &self.initial
        } else {
            &self.steps[t - 1]
        }
    }
}

/// Regime smoothing for one step. `w_next_n` is `w_{t+1|n}`, `w_filt` is `w_{t|t}`.
pub fn smooth_regimes_step(w_next_n: &Vector, w_filt: &Vector, transition: &Mat) -> std::result::Result<(Mat, Vector), String> {
    let m = w_filt.len();
    let mut log_pair = Mat::from_element(m, m, f64::NEG_INFINITY);
    for k in 0..m {
        if w_next_n[k] <= 0.0 {
            continue;
        }
        let terms: Vec<f64> = (0..m).map(|j| w_filt[j].ln() + transition[(j, k)].ln()).collect();
        let log_pred = logsumexp(&terms);
        if log_pred == f64::NEG_INFINITY {
            return Err(format!("regime {k} has smoothed mass {} but zero predicted mass", w_next_n[k]));
        }
        for j in 0..m {
            log_pair[(j, k)] = w_next_n[k].ln() + terms[j] - log_pred;
        }
    }
    let mut pair = log_pair.map(f64::exp);
    let total = pair.sum();
    if !((total - 1.0).abs() <= MASS_TOL) {
        return Err(format!("smoothed pair weights sum to {total}"));
    }
    pair /= total;
    let w_n = Vector::from_iterator(m, (0..m).map(|j| pair.row(j).sum()));
    Ok((pair, w_n))
}

/// Runs the backward recursion from the filter's terminal state down to time zero.
pub fn smooth_pass(params: &ModelParams, filt: &FilterOutput) -> Result<SmoothOutput> {
    let m = params.dims.regimes;
    let n = filt.steps.len();
    let caches = RegimeCache::all(params);
    let last = filt.steps.last().ok_or_else(|| Error::InvalidInput("empty filter output".into()))?;
    let mut rev: Vec<SmoothStep> = Vec::with_capacity(n + 1);
    rev.push(SmoothStep {
        w_n: last.w_marg.clone(),
        w_pair_next: None,
        f_n: last.f_coll.clone(),
        v_n: last.v_coll.clone(),
        gains: Vec::new(),
    });
    for t in (0..n).rev() {
        let next = rev.last().expect("seeded with terminal step");
        let (w_filt, f_filt, v_filt) = filt.collapsed(t);
        let pairs = &filt.steps[t].pair;
        let (w_pair, w_n) = smooth_regimes_step(&next.w_n, w_filt, &params.transition)
            .map_err(|reason| Error::Smoother { t, reason })?;
        let mut gains = Vec::with_capacity(m * m);
        for j in 0..m {
            for (k, cache) in caches.iter().enumerate() {
                let pp = &pairs[j * m + k];
                let g = right_solve_spd(&(&v_filt[j] * cache.psi.transpose()), &pp.v_pred).map_err(|e| Error::Smoother {
                    t,
                    reason: format!("gain for pair ({j},{k}): {e}"),
                })?;
                gains.push(g);
            }
        }
        let mut f_n = Vec::with_capacity(m);
        let mut v_n = Vec::with_capacity(m);
        for j in 0..m {
            if w_n[j] < WEIGHT_FLOOR {
                f_n.push(f_filt[j].clone());
                v_n.push(v_filt[j].clone());
                continue;
            }
            let mut parts = Vec::with_capacity(m);
            for k in 0..m {
                let omega = w_pair[(j, k)] / w_n[j];
                if omega <= 0.0 {
                    continue;
                }
                let pp = &pairs[j * m + k];
                let g = &gains[j * m + k];
                let f_jk = &f_filt[j] + g * (&next.f_n[k] - &pp.f_pred);
                let v_jk = &v_filt[j] + g * (&next.v_n[k] - &pp.v_pred) * g.transpose();
                parts.push((omega, f_jk, v_jk));
            }
            let r = f_filt[j].len();
            let mut f = Vector::zeros(r);
            for (w, fj, _) in &parts {
                f += fj * *w;
            }
            let mut v = Mat::zeros(r, r);
            for (w, fj, vj) in &parts {
                let d = &f - fj;
                v += (vj + &d * d.transpose()) * *w;
            }
            symmetrize(&mut v);
            f_n.push(f);
            v_n.push(v);
        }
        rev.push(SmoothStep { w_n, w_pair_next: Some(w_pair), f_n, v_n, gains });
    }
    rev.reverse();
    let mut iter = rev.into_iter();
    let initial = iter.next().expect("at least the initial step");
    Ok(SmoothOutput { initial, steps: iter.collect() })
}
