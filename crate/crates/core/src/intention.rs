//! Motion intention: a two-state (REST/MOTION) hidden Markov model with scalar
//! Gaussian emissions over the velocity-magnitude observable.
//!
//! Training is Baum-Welch on scaled forward-backward recursions; inference is a
//! per-sample forward filter in the log domain.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Intention {
    Rest,
    Motion,
}

impl Intention {
    pub fn index(self) -> usize {
        match self {
            Intention::Rest => 0,
            Intention::Motion => 1,
        }
    }
}

/// State 0 is REST, state 1 is MOTION; REST has the smaller emission mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub initial: [f64; 2],
    /// `transition[j][i]` = p(state i at t | state j at t-1).
    pub transition: [[f64; 2]; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
}

impl HmmModel {
    pub fn validate(&self) -> Result<()> {
        let simplex = |p: &[f64; 2]| p.iter().all(|&v| v >= 0.0) && (p[0] + p[1] - 1.0).abs() < 1e-9;
        if !simplex(&self.initial) {
            return Err(Error::InvalidModel("initial distribution off the simplex".into()));
        }
        if !self.transition.iter().all(simplex) {
            return Err(Error::InvalidModel("transition rows must sum to 1".into()));
        }
        if !self.variances.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidModel("emission variances must be positive".into()));
        }
        if !self.means.iter().all(|m| m.is_finite()) {
            return Err(Error::InvalidModel("emission means must be finite".into()));
        }
        if self.means[0] > self.means[1] {
            return Err(Error::InvalidModel("REST mean must not exceed MOTION mean".into()));
        }
        Ok(())
    }

    /// Emission log-density of `x` under state `i`.
    pub fn log_emission(&self, i: usize, x: f64) -> f64 {
        let v = self.variances[i];
        let d = x - self.means[i];
        -0.5 * (LN_2PI + v.ln() + d * d / v)
    }

    /// Starting model: 1-D 2-means on the pooled observable for the emission
    /// means, sticky transitions, and a REST start.
    pub fn initialize(sequences: &[Vec<f64>]) -> Result<HmmModel> {
        let xs: Vec<f64> = sequences.iter().flatten().copied().collect();
        if xs.is_empty() {
            return Err(Error::InsufficientData("no observations".into()));
        }
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut c = [lo, hi];
        let mut assign = vec![0usize; xs.len()];
        for _ in 0..100 {
            for (a, &x) in assign.iter_mut().zip(&xs) {
                *a = usize::from((x - c[1]).abs() < (x - c[0]).abs());
            }
            let mut next = c;
            for (k, slot) in next.iter_mut().enumerate() {
                let (s, n) = xs
                    .iter()
                    .zip(&assign)
                    .filter(|(_, &a)| a == k)
                    .fold((0.0, 0usize), |(s, n), (&x, _)| (s + x, n + 1));
                if n > 0 {
                    *slot = s / n as f64;
                }
            }
            if next == c {
                break;
            }
            c = next;
        }
        let mut variances = [0.0; 2];
        for (k, v) in variances.iter_mut().enumerate() {
            let members: Vec<f64> = xs
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == k)
                .map(|(&x, _)| x)
                .collect();
            *v = if members.is_empty() {
                VARIANCE_FLOOR
            } else {
                let m = c[k];
                (members.iter().map(|x| (x - m).powi(2)).sum::<f64>() / members.len() as f64)
                    .max(VARIANCE_FLOOR)
            };
        }
        Ok(HmmModel {
            initial: [1.0, 0.0],
            transition: [[0.95, 0.05], [0.05, 0.95]],
            means: c,
            variances,
        })
    }

    fn swapped(&self) -> HmmModel {
        let t = &self.transition;
        HmmModel {
            initial: [self.initial[1], self.initial[0]],
            transition: [[t[1][1], t[1][0]], [t[0][1], t[0][0]]],
            means: [self.means[1], self.means[0]],
            variances: [self.variances[1], self.variances[0]],
        }
    }

    /// Applies the mean-ordering convention (REST mean below MOTION mean).
    pub fn canonical(self) -> HmmModel {
        if self.means[0] > self.means[1] {
            self.swapped()
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentionBelief {
    pub p: [f64; 2],
    pub last_x: f64,
    pub index: u64,
}

impl IntentionBelief {
    pub fn from_model(model: &HmmModel) -> Self {
        IntentionBelief {
            p: model.initial,
            last_x: 0.0,
            index: 0,
        }
    }

    pub fn rest() -> Self {
        IntentionBelief {
            p: [1.0, 0.0],
            last_x: 0.0,
            index: 0,
        }
    }
}

/// One step of the recursive posterior: emission times predicted prior,
/// normalised. Runs in the log domain so extreme observables cannot produce NaN.
pub fn forward_step(model: &HmmModel, belief: &IntentionBelief, x: f64) -> IntentionBelief {
    let a = &model.transition;
    let mut log_u = [0.0; 2];
    for (i, lu) in log_u.iter_mut().enumerate() {
        let prior = a[0][i] * belief.p[0] + a[1][i] * belief.p[1];
        *lu = if prior > 0.0 {
            model.log_emission(i, x) + prior.ln()
        } else {
            f64::NEG_INFINITY
        };
    }
    let m = log_u[0].max(log_u[1]);
    let p = if m.is_finite() {
        let u0 = (log_u[0] - m).exp();
        let u1 = (log_u[1] - m).exp();
        [u0 / (u0 + u1), u1 / (u0 + u1)]
    } else {
        // Observable non-finite: keep the predicted prior.
        let p0 = a[0][0] * belief.p[0] + a[1][0] * belief.p[1];
        [p0, 1.0 - p0]
    };
    IntentionBelief {
        p,
        last_x: x,
        index: belief.index + 1,
    }
}

/// Filtered posteriors for a whole series, starting from the model's initial
/// distribution as the belief before the first sample.
pub fn forward_filter(model: &HmmModel, xs: &[f64]) -> Vec<[f64; 2]> {
    let mut b = IntentionBelief::from_model(model);
    xs.iter()
        .map(|&x| {
            b = forward_step(model, &b, x);
            b.p
        })
        .collect()
}

/// Argmax of the posterior; ties go to REST.
pub fn predict_intention(belief: &IntentionBelief) -> Intention {
    if belief.p[1] > belief.p[0] {
        Intention::Motion
    } else {
        Intention::Rest
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaumWelchFit {
    pub model: HmmModel,
    /// Total log-likelihood of the data under the model at the start of each
    /// iteration, plus the final model.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

struct SequenceStats {
    ll: f64,
    gamma0: [f64; 2],
    gamma_sum: [f64; 2],
    gamma_head_sum: [f64; 2],
    xi_sum: [[f64; 2]; 2],
    x_sum: [f64; 2],
    x2_sum: [f64; 2],
}

fn expectation(model: &HmmModel, xs: &[f64]) -> SequenceStats {
    let n = xs.len();
    let a = &model.transition;
    // Per-time emission values shifted by their max log value.
    let mut emis = vec![[0.0; 2]; n];
    let mut shift = vec![0.0; n];
    for (t, &x) in xs.iter().enumerate() {
        let l = [model.log_emission(0, x), model.log_emission(1, x)];
        let m = l[0].max(l[1]);
        shift[t] = m;
        emis[t] = [(l[0] - m).exp(), (l[1] - m).exp()];
    }

    let mut alpha = vec![[0.0; 2]; n];
    let mut scale = vec![0.0; n];
    let mut ll = 0.0;
    for t in 0..n {
        let pred = if t == 0 {
            model.initial
        } else {
            let p = alpha[t - 1];
            [
                a[0][0] * p[0] + a[1][0] * p[1],
                a[0][1] * p[0] + a[1][1] * p[1],
            ]
        };
        let u = [pred[0] * emis[t][0], pred[1] * emis[t][1]];
        let c = (u[0] + u[1]).max(f64::MIN_POSITIVE);
        scale[t] = c;
        alpha[t] = [u[0] / c, u[1] / c];
        ll += c.ln() + shift[t];
    }

    let mut beta = vec![[1.0; 2]; n];
    for t in (0..n.saturating_sub(1)).rev() {
        let e = emis[t + 1];
        let b = beta[t + 1];
        let c = scale[t + 1];
        for i in 0..2 {
            beta[t][i] = (a[i][0] * e[0] * b[0] + a[i][1] * e[1] * b[1]) / c;
        }
    }

    let mut stats = SequenceStats {
        ll,
        gamma0: [0.0; 2],
        gamma_sum: [0.0; 2],
        gamma_head_sum: [0.0; 2],
        xi_sum: [[0.0; 2]; 2],
        x_sum: [0.0; 2],
        x2_sum: [0.0; 2],
    };
    for t in 0..n {
        let g = [alpha[t][0] * beta[t][0], alpha[t][1] * beta[t][1]];
        let s = g[0] + g[1];
        let g = [g[0] / s, g[1] / s];
        if t == 0 {
            stats.gamma0 = g;
        }
        for i in 0..2 {
            stats.gamma_sum[i] += g[i];
            stats.x_sum[i] += g[i] * xs[t];
            stats.x2_sum[i] += g[i] * xs[t] * xs[t];
            if t + 1 < n {
                stats.gamma_head_sum[i] += g[i];
            }
        }
        if t + 1 < n {
            let e = emis[t + 1];
            let b = beta[t + 1];
            let c = scale[t + 1];
            for i in 0..2 {
                for j in 0..2 {
                    stats.xi_sum[i][j] += alpha[t][i] * a[i][j] * e[j] * b[j] / c;
                }
            }
        }
    }
    stats
}

/// Total log-likelihood of the sequences under `model`.
pub fn log_likelihood(model: &HmmModel, sequences: &[Vec<f64>]) -> f64 {
    sequences.iter().map(|xs| expectation(model, xs).ll).sum()
}

pub fn baum_welch(
    sequences: &[Vec<f64>],
    init: &HmmModel,
    tol: f64,
    max_iter: usize,
) -> Result<BaumWelchFit> {
    if sequences.is_empty() {
        return Err(Error::InsufficientData("baum_welch needs at least one sequence".into()));
    }
    if let Some(s) = sequences.iter().find(|s| s.len() < 10) {
        return Err(Error::InsufficientData(format!(
            "sequence of length {} shorter than 10",
            s.len()
        )));
    }
    init.validate().or_else(|e| {
        // A mis-ordered init is fine; it is relabelled at the end.
        if init.means[0] > init.means[1] {
            init.swapped().validate()
        } else {
            Err(e)
        }
    })?;

    let mut warnings = Vec::new();
    let total: usize = sequences.iter().map(Vec::len).sum();
    let mean = sequences.iter().flatten().sum::<f64>() / total as f64;
    let var = sequences.iter().flatten().map(|x| (x - mean).powi(2)).sum::<f64>() / total as f64;
    if var < VARIANCE_FLOOR {
        let msg = format!("observable nearly constant (variance {var:.3e}); variance floor applies");
        warn!("{msg}");
        warnings.push(msg);
    }

    let mut model = init.clone();
    let mut lls = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iter {
        let stats: Vec<SequenceStats> = sequences.iter().map(|xs| expectation(&model, xs)).collect();
        let ll: f64 = stats.iter().map(|s| s.ll).sum();
        if let Some(&prev) = lls.last() {
            let prev: f64 = prev;
            if (ll - prev).abs() < tol {
                lls.push(ll);
                converged = true;
                break;
            }
        }
        lls.push(ll);
        iterations += 1;

        let mut gamma0 = [0.0; 2];
        let mut gsum = [0.0; 2];
        let mut ghead = [0.0; 2];
        let mut xi = [[0.0; 2]; 2];
        let mut xsum = [0.0; 2];
        let mut x2sum = [0.0; 2];
        for s in &stats {
            for i in 0..2 {
                gamma0[i] += s.gamma0[i];
                gsum[i] += s.gamma_sum[i];
                ghead[i] += s.gamma_head_sum[i];
                xsum[i] += s.x_sum[i];
                x2sum[i] += s.x2_sum[i];
                for j in 0..2 {
                    xi[i][j] += s.xi_sum[i][j];
                }
            }
        }
        let k = sequences.len() as f64;
        let mut next = model.clone();
        next.initial = [gamma0[0] / k, gamma0[1] / k];
        let norm = next.initial[0] + next.initial[1];
        next.initial = [next.initial[0] / norm, next.initial[1] / norm];
        for i in 0..2 {
            if ghead[i] > 1e-300 {
                let row = [xi[i][0] / ghead[i], xi[i][1] / ghead[i]];
                let s = row[0] + row[1];
                next.transition[i] = [row[0] / s, row[1] / s];
            }
            if gsum[i] > 1e-300 {
                let m = xsum[i] / gsum[i];
                next.means[i] = m;
                next.variances[i] = (x2sum[i] / gsum[i] - m * m).max(VARIANCE_FLOOR);
            } else {
                next.variances[i] = next.variances[i].max(VARIANCE_FLOOR);
            }
        }
        model = next;
    }
    if !converged {
        lls.push(log_likelihood(&model, sequences));
    }
    Ok(BaumWelchFit {
        model: model.canonical(),
        log_likelihoods: lls,
        iterations,
        converged,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn symmetric() -> HmmModel {
        HmmModel {
            initial: [0.5, 0.5],
            transition: [[0.9, 0.1], [0.1, 0.9]],
            means: [0.0, 0.0],
            variances: [1.0, 1.0],
        }
    }

    fn sticky() -> HmmModel {
        HmmModel {
            initial: [1.0, 0.0],
            transition: [[0.99, 0.01], [0.05, 0.95]],
            means: [0.0, 1.0],
            variances: [0.01, 0.04],
        }
    }

    #[test]
    fn consistent_evidence_keeps_rest() {
        let b = forward_step(&sticky(), &IntentionBelief::rest(), 0.0);
        assert!(b.p[0] >= 0.9);
        assert_eq!(b.index, 1);
    }

    #[test]
    fn symmetric_fixed_point() {
        let mut b = IntentionBelief::rest();
        b.p = [0.5, 0.5];
        let out = forward_step(&symmetric(), &b, 0.37);
        assert!((out.p[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn extreme_observables_stay_on_simplex() {
        let m = sticky();
        let mut b = IntentionBelief::rest();
        for &x in &[1e6, -1e6, 0.0, 1e300, -1e300, f64::NAN, 3.0] {
            b = forward_step(&m, &b, x);
            assert!(b.p.iter().all(|v| v.is_finite() && *v >= 0.0), "{x}: {:?}", b.p);
            assert!((b.p[0] + b.p[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tie_breaks_to_rest() {
        let mut b = IntentionBelief::rest();
        b.p = [0.8, 0.2];
        assert_eq!(predict_intention(&b), Intention::Rest);
        b.p = [0.2, 0.8];
        assert_eq!(predict_intention(&b), Intention::Motion);
        b.p = [0.5, 0.5];
        assert_eq!(predict_intention(&b), Intention::Rest);
    }

    #[test]
    fn rejects_invalid_models() {
        let mut m = sticky();
        m.transition[0] = [0.5, 0.6];
        assert!(m.validate().is_err());
        let mut m = sticky();
        m.variances[1] = 0.0;
        assert!(m.validate().is_err());
        assert!(sticky().validate().is_ok());
    }

    #[test]
    fn canonical_relabels() {
        let m = sticky().swapped();
        assert!(m.means[0] > m.means[1]);
        assert_eq!(m.canonical(), sticky());
    }

    #[test]
    fn constant_data_does_not_crash() {
        let seqs = vec![vec![0.25; 500]];
        let init = HmmModel::initialize(&seqs).unwrap();
        let fit = baum_welch(&seqs, &init, 1e-8, 50).unwrap();
        assert!(!fit.warnings.is_empty());
        assert!(fit.model.variances.iter().all(|&v| v >= VARIANCE_FLOOR));
        fit.model.validate().unwrap();
    }

    #[test]
    fn short_sequences_rejected() {
        assert!(baum_welch(&[vec![0.0; 5]], &sticky(), 1e-6, 10).is_err());
        assert!(baum_welch(&[], &sticky(), 1e-6, 10).is_err());
    }
}
