//! Class-conditional Gaussian mixtures over the reduced features.
//!
//! Each direction class gets its own full-covariance mixture, seeded by
//! k-means++ and refined with EM; the component count is chosen per class by
//! BIC. Densities stay in the log domain until they are normalised over classes.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accumulate::StoppingConfig;
use crate::error::{Error, Result};
use crate::linalg;

pub const COVARIANCE_RIDGE: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub prior: f64,
    #[serde(with = "linalg::flat")]
    pub mean: DVector<f64>,
    #[serde(with = "linalg::nested")]
    pub covariance: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub components: Vec<GaussianComponent>,
}

/// Precomputed Cholesky factors for fast log-density evaluation.
#[derive(Debug, Clone)]
struct PreparedComponent {
    log_weight: f64,
    mean: Vec<f64>,
    /// Lower Cholesky factor, row-major `C x C`.
    chol: Vec<f64>,
}

impl PreparedComponent {
    fn new(c: &GaussianComponent) -> Result<Self> {
        let dim = c.mean.len();
        let chol = c
            .covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
        let l = chol.l();
        let log_det: f64 = 2.0 * (0..dim).map(|i| l[(i, i)].ln()).sum::<f64>();
        let mut flat = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                flat[i * dim + j] = l[(i, j)];
            }
        }
        Ok(PreparedComponent {
            log_weight: c.prior.ln() - 0.5 * (dim as f64 * LN_2PI + log_det),
            mean: c.mean.iter().copied().collect(),
            chol: flat,
        })
    }

    /// `ln(prior) + ln N(x; mean, cov)`.
    fn log_weighted_density(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let dim = self.mean.len();
        let mut maha = 0.0;
        for i in 0..dim {
            let mut s = x[i] - self.mean[i];
            let row = &self.chol[i * dim..i * dim + i];
            for (j, l) in row.iter().enumerate() {
                s -= l * scratch[j];
            }
            let z = s / self.chol[i * dim + i];
            scratch[i] = z;
            maha += z * z;
        }
        self.log_weight - 0.5 * maha
    }
}

/// A mixture ready for repeated evaluation.
#[derive(Debug, Clone)]
pub struct PreparedMixture {
    components: Vec<PreparedComponent>,
    dim: usize,
}

impl PreparedMixture {
    pub fn new(m: &Mixture) -> Result<Self> {
        let dim = m.dim();
        let components = m
            .components
            .iter()
            .map(PreparedComponent::new)
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedMixture { components, dim })
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let mut scratch = vec![0.0; self.dim];
        let mut terms = Vec::with_capacity(self.components.len());
        for c in &self.components {
            terms.push(c.log_weighted_density(x, &mut scratch));
        }
        log_sum_exp(&terms)
    }
}

impl Mixture {
    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        Ok(PreparedMixture::new(self)?.log_pdf(x))
    }

    /// Free parameters: priors, means and symmetric covariances.
    pub fn parameter_count(k: usize, dim: usize) -> usize {
        (k - 1) + k * dim + k * dim * (dim + 1) / 2
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<DVector<f64>>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after every assignment step.
    pub sse: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows_of(points: &DMatrix<f64>) -> Vec<Vec<f64>> {
    points.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::InsufficientData(format!("k-means with K={k} on {n} points")));
    }
    let rows = rows_of(points);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Vec<f64>> = vec![rows[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a centroid; take the first unused row.
            (0..n)
                .find(|&i| !centroids.iter().any(|c| c == &rows[i]))
                .unwrap_or(centroids.len())
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        centroids.push(rows[next].clone());
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, centroids.last().unwrap()));
        }
    }

    let dim = points.ncols();
    let mut assignments = vec![0usize; n];
    let mut sse_hist = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut sse = 0.0;
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(c, cen)| (c, sq_dist(r, cen)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            if assignments[i] != best {
                changed = true;
            }
            assignments[i] = best;
            sse += d;
        }
        sse_hist.push(sse);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (r, &a) in rows.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(r) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Empty cluster: reseed at the point farthest from its centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&rows[a], &centroids[assignments[a]])
                            .total_cmp(&sq_dist(&rows[b], &centroids[assignments[b]]))
                    })
                    .unwrap();
                centroids[c] = rows[far].clone();
                assignments[far] = c;
                changed = true;
            }
        }
        if !changed && sse_hist.len() > 1 {
            break;
        }
    }
    Ok(KMeans {
        centroids: centroids.into_iter().map(DVector::from_vec).collect(),
        assignments,
        sse: sse_hist,
    })
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub mixture: Mixture,
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

fn covariance_of(rows: &[&Vec<f64>], mean: &[f64]) -> DMatrix<f64> {
    let dim = mean.len();
    let mut cov = DMatrix::zeros(dim, dim);
    for r in rows {
        for i in 0..dim {
            let di = r[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (r[j] - mean[j]);
            }
        }
    }
    let n = rows.len().max(1) as f64;
    for i in 0..dim {
        for j in 0..=i {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
        cov[(i, i)] += COVARIANCE_RIDGE;
    }
    cov
}

/// Log-likelihood and responsibilities (row-major `N x K`).
fn e_step(rows: &[Vec<f64>], mix: &Mixture) -> Result<(f64, Vec<f64>)> {
    let prepared = PreparedMixture::new(mix)?;
    let k = prepared.components.len();
    let dim = prepared.dim;
    let mut resp = vec![0.0; rows.len() * k];
    let ll: f64 = rows
        .par_iter()
        .zip(resp.par_chunks_mut(k))
        .map(|(r, out)| {
            let mut scratch = vec![0.0; dim];
            for (c, o) in prepared.components.iter().zip(out.iter_mut()) {
                *o = c.log_weighted_density(r, &mut scratch);
            }
            let lse = log_sum_exp(out);
            for o in out.iter_mut() {
                *o = (*o - lse).exp();
            }
            lse
        })
        .sum();
    Ok((ll, resp))
}

/// EM for a full-covariance mixture seeded by k-means.
pub fn em_fit(points: &DMatrix<f64>, k: usize, seed: u64, tol: f64, max_iter: usize) -> Result<EmFit> {
    let (n, dim) = points.shape();
    if k == 0 || n < 5 * k {
        return Err(Error::InsufficientData(format!(
            "EM with K={k} needs at least {} points, got {n}",
            5 * k
        )));
    }
    if !points.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let rows = rows_of(points);
    let km = kmeans(points, k, seed, 100)?;
    let mut warnings = Vec::new();
    let mut components = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<&Vec<f64>> = rows
            .iter()
            .zip(&km.assignments)
            .filter(|(_, &a)| a == c)
            .map(|(r, _)| r)
            .collect();
        let mean: Vec<f64> = km.centroids[c].iter().copied().collect();
        let cov = if members.len() >= 2 {
            covariance_of(&members, &mean)
        } else {
            let all: Vec<&Vec<f64>> = rows.iter().collect();
            covariance_of(&all, &mean)
        };
        components.push(GaussianComponent {
            prior: members.len().max(1) as f64 / n as f64,
            mean: DVector::from_vec(mean),
            covariance: cov,
        });
    }
    let total: f64 = components.iter().map(|c| c.prior).sum();
    for c in &mut components {
        c.prior /= total;
    }
    let mut mix = Mixture { components };

    let mut lls: Vec<f64> = Vec::new();
    let mut iterations = 0;
    loop {
        let (ll, resp) = e_step(&rows, &mix)?;
        let done = lls
            .last()
            .is_some_and(|&prev: &f64| ((ll - prev) / ll.abs().max(1e-300)).abs() < tol);
        lls.push(ll);
        if done || iterations >= max_iter {
            break;
        }
        iterations += 1;

        let kc = mix.components.len();
        let mut next = Vec::with_capacity(kc);
        for c in 0..kc {
            let nk: f64 = (0..n).map(|i| resp[i * kc + c]).sum();
            if nk < 1e-8 * n as f64 {
                let msg = format!("EM component {c} collapsed (weight {nk:.3e}); removed");
                warn!("{msg}");
                warnings.push(msg);
                continue;
            }
            let mut mean = vec![0.0; dim];
            for (i, r) in rows.iter().enumerate() {
                let w = resp[i * kc + c];
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += w * v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut cov = DMatrix::zeros(dim, dim);
            for (i, r) in rows.iter().enumerate() {
                let w = resp[i * kc + c];
                for a in 0..dim {
                    let da = w * (r[a] - mean[a]);
                    for b in 0..=a {
                        cov[(a, b)] += da * (r[b] - mean[b]);
                    }
                }
            }
            for a in 0..dim {
                for b in 0..=a {
                    let v = cov[(a, b)] / nk;
                    cov[(a, b)] = v;
                    cov[(b, a)] = v;
                }
                cov[(a, a)] += COVARIANCE_RIDGE;
            }
            if cov.clone().cholesky().is_none() {
                let msg = format!("EM component {c} singular despite ridge; removed");
                warn!("{msg}");
                warnings.push(msg);
                continue;
            }
            next.push(GaussianComponent {
                prior: nk / n as f64,
                mean: DVector::from_vec(mean),
                covariance: cov,
            });
        }
        if next.is_empty() {
            return Err(Error::Numerical("all mixture components collapsed".into()));
        }
        let total: f64 = next.iter().map(|c| c.prior).sum();
        for c in &mut next {
            c.prior /= total;
        }
        mix = Mixture { components: next };
    }
    Ok(EmFit {
        mixture: mix,
        log_likelihoods: lls,
        iterations,
        warnings,
    })
}

/// BIC of a fitted mixture: `-2 ll + p ln N`.
pub fn bic(ll: f64, k: usize, dim: usize, n: usize) -> f64 {
    -2.0 * ll + Mixture::parameter_count(k, dim) as f64 * (n as f64).ln()
}

#[derive(Debug, Clone)]
pub struct KSelection {
    pub k: usize,
    /// `(K, BIC)` for every candidate that fitted.
    pub bic: Vec<(usize, f64)>,
    pub fit: EmFit,
}

/// Fits every candidate K and keeps the lowest BIC; ties go to the smaller K.
pub fn select_k(
    points: &DMatrix<f64>,
    candidates: &[usize],
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<KSelection> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no K candidates".into()));
    }
    let (n, dim) = points.shape();
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let fits: Vec<(usize, Result<EmFit>)> = sorted
        .par_iter()
        .map(|&k| (k, em_fit(points, k, seed.wrapping_add(k as u64), tol, max_iter)))
        .collect();
    let mut table = Vec::new();
    let mut best: Option<(usize, f64, EmFit)> = None;
    for (k, fit) in fits {
        let Ok(fit) = fit else { continue };
        let kk = fit.mixture.components.len();
        let score = bic(*fit.log_likelihoods.last().unwrap(), kk, dim, n);
        table.push((k, score));
        if best.as_ref().is_none_or(|(_, b, _)| score < *b) {
            best = Some((k, score, fit));
        }
    }
    let (k, _, fit) = best.ok_or_else(|| Error::Numerical("every mixture fit failed".into()))?;
    Ok(KSelection { k, bic: table, fit })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            k_min: 1,
            k_max: 5,
            tol: 1e-6,
            max_iter: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFitInfo {
    pub class: u8,
    pub k: usize,
    pub em_iterations: usize,
    pub bic: Vec<(usize, f64)>,
    pub samples: usize,
}

/// Per-class mixtures for directions `1..=L` plus tuned stopping thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionModel {
    pub n_classes: usize,
    pub dim: usize,
    pub mixtures: Vec<Mixture>,
    pub stopping: Option<StoppingConfig>,
    pub seed: u64,
    pub fit_info: Vec<ClassFitInfo>,
}

impl DirectionModel {
    pub fn validate(&self) -> Result<()> {
        if self.mixtures.len() != self.n_classes || self.n_classes < 2 {
            return Err(Error::InvalidModel(format!(
                "{} mixtures for {} classes",
                self.mixtures.len(),
                self.n_classes
            )));
        }
        for m in &self.mixtures {
            if m.components.is_empty() {
                return Err(Error::InvalidModel("class with no components".into()));
            }
            if m.dim() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: m.dim(),
                });
            }
            let s: f64 = m.components.iter().map(|c| c.prior).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidModel("mixture priors do not sum to 1".into()));
            }
        }
        Ok(())
    }

    pub fn scorer(&self) -> Result<ClassScorer> {
        Ok(ClassScorer {
            classes: self
                .mixtures
                .iter()
                .map(PreparedMixture::new)
                .collect::<Result<Vec<_>>>()?,
            dim: self.dim,
        })
    }
}

/// Fits one mixture per class on `features` (`N x C`) with labels in `1..=L`.
pub fn fit_direction_model(
    features: &DMatrix<f64>,
    labels: &[u8],
    n_classes: usize,
    cfg: &MixtureConfig,
) -> Result<DirectionModel> {
    if labels.len() != features.nrows() {
        return Err(Error::DimensionMismatch {
            expected: features.nrows(),
            got: labels.len(),
        });
    }
    let candidates: Vec<usize> = (cfg.k_min..=cfg.k_max).collect();
    let results: Vec<Result<(Mixture, ClassFitInfo)>> = (1..=n_classes as u8)
        .into_par_iter()
        .map(|class| {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            let pts = features.select_rows(&rows);
            let feasible: Vec<usize> = candidates.iter().copied().filter(|&k| rows.len() >= 5 * k).collect();
            let sel = select_k(&pts, &feasible, cfg.seed.wrapping_mul(31).wrapping_add(class as u64), cfg.tol, cfg.max_iter)?;
            Ok((
                sel.fit.mixture,
                ClassFitInfo {
                    class,
                    k: sel.k,
                    em_iterations: sel.fit.iterations,
                    bic: sel.bic,
                    samples: rows.len(),
                },
            ))
        })
        .collect();
    let mut mixtures = Vec::with_capacity(n_classes);
    let mut fit_info = Vec::with_capacity(n_classes);
    for r in results {
        let (m, info) = r?;
        mixtures.push(m);
        fit_info.push(info);
    }
    let model = DirectionModel {
        n_classes,
        dim: features.ncols(),
        mixtures,
        stopping: None,
        seed: cfg.seed,
        fit_info,
    };
    model.validate()?;
    Ok(model)
}

/// Prepared per-class densities for the streaming path.
#[derive(Debug, Clone)]
pub struct ClassScorer {
    classes: Vec<PreparedMixture>,
    dim: usize,
}

impl ClassScorer {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(self.classes.iter().map(|m| m.log_pdf(x)).collect())
    }
}

/// `log ρ_l = log PDF(x | class l)` for every class.
pub fn class_log_pdf(model: &DirectionModel, x: &[f64]) -> Result<Vec<f64>> {
    model.scorer()?.log_pdf(x)
}

/// Softmax over classes with max subtraction; sums to 1.
pub fn normalize_over_classes(log_rho: &[f64]) -> Vec<f64> {
    let m = log_rho.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        let l = log_rho.len() as f64;
        return vec![1.0 / l; log_rho.len()];
    }
    let e: Vec<f64> = log_rho.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
