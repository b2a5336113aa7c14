//! Dimensionality reduction from the 28 raw channels to the classifier features.
//!
//! Four variants share one fit/transform interface:
//! - `Pca`: principal components of all channels, enough to explain the
//!   variance target.
//! - `PcaNmf`: PCA of the 12 inertial channels concatenated with NMF synergy
//!   activations of the 16 EMG envelopes.
//! - `Fda`: Fisher discriminant projection of all channels to `L - 1` dims.
//! - `FdaImu`: the same on the inertial channels only.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{ChannelSelector, N_CHANNELS, N_EMG};
use crate::linalg::{self, centered, column_means, fix_row_signs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Pca,
    PcaNmf,
    Fda,
    FdaImu,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Pca, Variant::PcaNmf, Variant::Fda, Variant::FdaImu];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pca => "pca",
            Variant::PcaNmf => "pcanmf",
            Variant::Fda => "fda",
            Variant::FdaImu => "fda-imu",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "pca" => Ok(Variant::Pca),
            "pcanmf" | "pca-nmf" => Ok(Variant::PcaNmf),
            "fda" => Ok(Variant::Fda),
            "fda-imu" | "fdaimu" => Ok(Variant::FdaImu),
            other => Err(Error::InvalidConfig(format!("unknown reducer variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One stage of a reducer: a slice of the input channels and its map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub selector: ChannelSelector,
    pub kind: BlockKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BlockKind {
    /// `y = W (x - offset)`, `W` is `C x M`.
    Linear {
        #[serde(with = "linalg::nested")]
        weights: DMatrix<f64>,
        #[serde(with = "linalg::flat")]
        offset: DVector<f64>,
        /// Eigenvalues of the kept components, descending.
        eigenvalues: Vec<f64>,
    },
    /// Non-negative activations against the synergy matrix `H` (`C x M`).
    Nmf {
        #[serde(with = "linalg::nested")]
        synergies: DMatrix<f64>,
        vaf: f64,
    },
}

impl Block {
    pub fn output_dim(&self) -> usize {
        match &self.kind {
            BlockKind::Linear { weights, .. } => weights.nrows(),
            BlockKind::Nmf { synergies, .. } => synergies.nrows(),
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        let x = self.selector.select(x);
        match &self.kind {
            BlockKind::Linear { weights, offset, .. } => {
                for row in weights.row_iter() {
                    out.push(
                        row.iter()
                            .zip(x.iter().zip(offset.iter()))
                            .map(|(w, (v, m))| w * (v - m))
                            .sum(),
                    );
                }
            }
            BlockKind::Nmf { synergies, .. } => {
                out.extend(nnls_activations(synergies, x).iter());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducerMap {
    pub variant: Variant,
    pub seed: u64,
    pub blocks: Vec<Block>,
}

impl ReducerMap {
    /// Embedding dimension (sum over blocks).
    pub fn output_dim(&self) -> usize {
        self.blocks.iter().map(Block::output_dim).sum()
    }

    /// Channel range the map reads from a 28-channel frame.
    pub fn input_selector(&self) -> ChannelSelector {
        match self.variant {
            Variant::FdaImu => ChannelSelector::ImuOnly,
            _ => ChannelSelector::All,
        }
    }

    /// Projects a full 28-channel feature vector.
    pub fn transform(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != N_CHANNELS {
            return Err(Error::DimensionMismatch {
                expected: N_CHANNELS,
                got: features.len(),
            });
        }
        let mut out = Vec::with_capacity(self.output_dim());
        for b in &self.blocks {
            b.apply(features, &mut out);
        }
        Ok(out)
    }

    pub fn transform_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let c = self.output_dim();
        let mut out = DMatrix::zeros(x.nrows(), c);
        for (i, row) in x.row_iter().enumerate() {
            let v: Vec<f64> = row.iter().copied().collect();
            let y = self.transform(&v)?;
            for (j, val) in y.into_iter().enumerate() {
                out[(i, j)] = val;
            }
        }
        Ok(out)
    }

    /// Inverse of a single-block linear map with orthonormal rows (PCA).
    pub fn reconstruct(&self, y: &[f64]) -> Option<Vec<f64>> {
        match self.blocks.as_slice() {
            [Block {
                kind: BlockKind::Linear { weights, offset, .. },
                ..
            }] if self.variant == Variant::Pca => {
                let y = DVector::from_column_slice(y);
                Some((weights.transpose() * y + offset).iter().copied().collect())
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReduceConfig {
    pub variance_target: f64,
    pub vaf_target: f64,
    pub nmf_max_iter: usize,
    pub nmf_tol: f64,
    pub fda_ridge: f64,
    pub seed: u64,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        ReduceConfig {
            variance_target: 0.90,
            vaf_target: 0.90,
            nmf_max_iter: 500,
            nmf_tol: 1e-7,
            fda_ridge: 1e-6,
            seed: 0,
        }
    }
}

/// Principal components result.
#[derive(Debug, Clone)]
pub struct PcaFit {
    pub weights: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub eigenvalues: Vec<f64>,
    /// Explained-variance fraction of every positive-eigenvalue component.
    pub explained: Vec<f64>,
}

pub fn pca(x: &DMatrix<f64>, variance_target: f64) -> Result<PcaFit> {
    let (n, m) = x.shape();
    if n < 2 {
        return Err(Error::InsufficientData(format!("PCA needs at least 2 rows, got {n}")));
    }
    let mean = column_means(x);
    let xc = centered(x, &mean);
    let cov = (xc.transpose() * &xc) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let positive: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] > top * 1e-12 && eig.eigenvalues[i] > 0.0)
        .collect();
    let total: f64 = eig.eigenvalues.iter().filter(|&&v| v > 0.0).sum();
    if positive.is_empty() || total <= 0.0 {
        return Err(Error::InsufficientData("PCA input has zero variance".into()));
    }
    let explained: Vec<f64> = positive.iter().map(|&i| eig.eigenvalues[i] / total).collect();
    let mut cum = 0.0;
    let mut keep = positive.len();
    for (k, e) in explained.iter().enumerate() {
        cum += e;
        if cum >= variance_target - 1e-12 {
            keep = k + 1;
            break;
        }
    }
    let mut weights = DMatrix::zeros(keep, m);
    for (r, &i) in positive.iter().take(keep).enumerate() {
        weights.set_row(r, &eig.eigenvectors.column(i).transpose());
    }
    fix_row_signs(&mut weights);
    Ok(PcaFit {
        weights,
        mean,
        eigenvalues: positive.iter().take(keep).map(|&i| eig.eigenvalues[i]).collect(),
        explained,
    })
}

pub fn fit_pca(x: &DMatrix<f64>, variance_target: f64) -> Result<ReducerMap> {
    if x.ncols() != N_CHANNELS {
        return Err(Error::DimensionMismatch {
            expected: N_CHANNELS,
            got: x.ncols(),
        });
    }
    let fit = pca(x, variance_target)?;
    Ok(ReducerMap {
        variant: Variant::Pca,
        seed: 0,
        blocks: vec![linear_block(ChannelSelector::All, fit)],
    })
}

fn linear_block(selector: ChannelSelector, fit: PcaFit) -> Block {
    Block {
        selector,
        kind: BlockKind::Linear {
            weights: fit.weights,
            offset: fit.mean,
            eigenvalues: fit.eigenvalues,
        },
    }
}

/// One NMF factorisation `X ≈ W H` at a fixed rank.
#[derive(Debug, Clone)]
pub struct NmfFactors {
    /// `N x C` activations.
    pub w: DMatrix<f64>,
    /// `C x M` synergies.
    pub h: DMatrix<f64>,
    /// Squared Frobenius residual after initialisation and after every update.
    pub objective: Vec<f64>,
}

fn check_nonnegative(x: &DMatrix<f64>) -> Result<()> {
    for (col, c) in x.column_iter().enumerate() {
        if let Some(row) = c.iter().position(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::NegativeEntry { row, col });
        }
    }
    Ok(())
}

/// Lee-Seung multiplicative updates for the Frobenius objective.
pub fn nmf_factorize(
    x: &DMatrix<f64>,
    rank: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<NmfFactors> {
    check_nonnegative(x)?;
    let (n, m) = x.shape();
    if rank == 0 {
        return Err(Error::InvalidConfig("NMF rank must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (x.mean().max(1e-12) / rank as f64).sqrt();
    let mut w = DMatrix::from_fn(n, rank, |_, _| scale * rng.random_range(0.1..1.0));
    let mut h = DMatrix::from_fn(rank, m, |_, _| scale * rng.random_range(0.1..1.0));
    const EPS: f64 = 1e-12;
    let residual = |w: &DMatrix<f64>, h: &DMatrix<f64>| (x - w * h).norm_squared();
    let mut objective = vec![residual(&w, &h)];
    for _ in 0..max_iter {
        let wt = w.transpose();
        let num = &wt * x;
        let den = &wt * &w * &h;
        h.zip_zip_apply(&num, &den, |hv, a, b| *hv *= a / (b + EPS));
        let ht = h.transpose();
        let num = x * &ht;
        let den = &w * (&h * &ht);
        w.zip_zip_apply(&num, &den, |wv, a, b| *wv *= a / (b + EPS));
        let obj = residual(&w, &h);
        let prev = *objective.last().unwrap();
        objective.push(obj);
        if prev - obj <= tol * prev.max(EPS) {
            break;
        }
    }
    Ok(NmfFactors { w, h, objective })
}

/// Variance accounted for: `1 - |X - WH|^2 / |X - mean|^2`.
pub fn vaf(x: &DMatrix<f64>, f: &NmfFactors) -> f64 {
    let mean = column_means(x);
    let total = centered(x, &mean).norm_squared();
    let resid = (x - &f.w * &f.h).norm_squared();
    if total <= 0.0 {
        if resid <= 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - resid / total
    }
}

#[derive(Debug, Clone)]
pub struct NmfFit {
    pub factors: NmfFactors,
    pub rank: usize,
    /// VAF for every rank tried, starting at 1.
    pub vaf_by_rank: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Smallest rank whose factorisation reaches `vaf_target`.
pub fn fit_nmf(
    x: &DMatrix<f64>,
    vaf_target: f64,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<NmfFit> {
    check_nonnegative(x)?;
    let (n, m) = x.shape();
    if x.iter().all(|&v| v == 0.0) {
        let msg = "all-zero EMG matrix; using a single empty synergy".to_string();
        warn!("{msg}");
        return Ok(NmfFit {
            factors: NmfFactors {
                w: DMatrix::zeros(n, 1),
                h: DMatrix::zeros(1, m),
                objective: vec![0.0],
            },
            rank: 1,
            vaf_by_rank: vec![1.0],
            warnings: vec![msg],
        });
    }
    let mut vafs = Vec::new();
    let mut best = None;
    for rank in 1..=m.min(n) {
        let f = nmf_factorize(x, rank, seed.wrapping_add(rank as u64), max_iter, tol)?;
        let v = vaf(x, &f);
        vafs.push(v);
        let reached = v >= vaf_target;
        best = Some(f);
        if reached {
            break;
        }
    }
    let factors = best.expect("at least one rank tried");
    let rank = factors.h.nrows();
    Ok(NmfFit {
        factors,
        rank,
        vaf_by_rank: vafs,
        warnings: Vec::new(),
    })
}

/// Non-negative least squares `min |x - H^T w|`, `w >= 0` (Lawson-Hanson active set).
pub fn nnls_activations(h: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let c = h.nrows();
    let xv = DVector::from_column_slice(x);
    let gram = h * h.transpose();
    let hx = h * &xv;
    let tol = 1e-12 * (1.0 + hx.amax());
    let mut w = DVector::zeros(c);
    let mut passive = vec![false; c];

    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..c).filter(|&i| passive[i]).collect();
        let k = idx.len();
        let g = DMatrix::from_fn(k, k, |a, b| gram[(idx[a], idx[b])]);
        let r = DVector::from_fn(k, |a, _| hx[idx[a]]);
        let sol = g
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&r))
            .or_else(|| g.clone().lu().solve(&r))
            .unwrap_or_else(|| {
                g.pseudo_inverse(1e-12).map(|p| p * &r).unwrap_or_else(|_| DVector::zeros(k))
            });
        let mut full = DVector::zeros(c);
        for (a, &i) in idx.iter().enumerate() {
            full[i] = sol[a];
        }
        full
    };

    for _ in 0..(3 * c + 10) {
        let grad = &hx - &gram * &w;
        let candidate = (0..c)
            .filter(|&i| !passive[i])
            .max_by(|&a, &b| grad[a].total_cmp(&grad[b]));
        match candidate {
            Some(t) if grad[t] > tol => passive[t] = true,
            _ => break,
        }
        for _ in 0..(3 * c + 10) {
            let s = solve_passive(&passive);
            if (0..c).filter(|&i| passive[i]).all(|i| s[i] > 0.0) {
                w = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for i in (0..c).filter(|&i| passive[i] && s[i] <= 0.0) {
                let denom = w[i] - s[i];
                if denom > 0.0 {
                    alpha = alpha.min(w[i] / denom);
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            w += (s - &w) * alpha;
            for i in 0..c {
                if passive[i] && w[i] <= tol {
                    passive[i] = false;
                    w[i] = 0.0;
                }
            }
        }
    }
    w.iter().map(|v| v.max(0.0)).collect()
}

/// Fisher discriminant result.
#[derive(Debug, Clone)]
pub struct FdaFit {
    pub weights: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub eigenvalues: Vec<f64>,
    pub within: DMatrix<f64>,
    pub between: DMatrix<f64>,
}

/// Solves `S_W^{-1} (S_W + S_B) v = λ v` via the Cholesky-whitened symmetric
/// problem and keeps the `L - 1` leading directions.
pub fn fda(x: &DMatrix<f64>, labels: &[u8], ridge: f64) -> Result<FdaFit> {
    let (n, m) = x.shape();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InsufficientData("FDA needs at least two classes".into()));
    }
    let mean = column_means(x);
    let mut within = DMatrix::zeros(m, m);
    let mut between = DMatrix::zeros(m, m);
    for &c in &classes {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if rows.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} samples, FDA needs at least 2",
                rows.len()
            )));
        }
        let xc = x.select_rows(&rows);
        let mc = column_means(&xc);
        let d = centered(&xc, &mc);
        within += d.transpose() * d;
        let diff = &mc - &mean;
        between += (&diff * diff.transpose()) * rows.len() as f64;
    }
    let reg = ridge * within.trace() / m as f64;
    let mut sw = within.clone();
    for i in 0..m {
        sw[(i, i)] += reg;
    }
    let chol = sw
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("within-class scatter singular after regularisation".into()))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("within-class scatter factor not invertible".into()))?;
    let total = &sw + &between;
    let sym = &l_inv * total * l_inv.transpose();
    let sym = (&sym + sym.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let keep = classes.len() - 1;
    let mut weights = DMatrix::zeros(keep, m);
    for (r, &i) in order.iter().take(keep).enumerate() {
        let u = eig.eigenvectors.column(i).into_owned();
        let v = l_inv.transpose() * u;
        let v = &v / v.norm();
        weights.set_row(r, &v.transpose());
    }
    fix_row_signs(&mut weights);
    Ok(FdaFit {
        weights,
        mean,
        eigenvalues: order.iter().take(keep).map(|&i| eig.eigenvalues[i]).collect(),
        within: sw,
        between,
    })
}

pub fn fit_fda(x: &DMatrix<f64>, labels: &[u8], ridge: f64) -> Result<ReducerMap> {
    if x.ncols() != N_CHANNELS {
        return Err(Error::DimensionMismatch {
            expected: N_CHANNELS,
            got: x.ncols(),
        });
    }
    Ok(ReducerMap {
        variant: Variant::Fda,
        seed: 0,
        blocks: vec![fda_block(ChannelSelector::All, fda(x, labels, ridge)?)],
    })
}

fn fda_block(selector: ChannelSelector, fit: FdaFit) -> Block {
    Block {
        selector,
        kind: BlockKind::Linear {
            weights: fit.weights,
            offset: fit.mean,
            eigenvalues: fit.eigenvalues,
        },
    }
}

fn select_columns(x: &DMatrix<f64>, sel: ChannelSelector) -> DMatrix<f64> {
    let cols: Vec<usize> = sel.range().collect();
    x.select_columns(&cols)
}

/// Fits the requested variant on an `N x 28` dataset with per-row class labels.
pub fn fit_variant(
    variant: Variant,
    x: &DMatrix<f64>,
    labels: &[u8],
    cfg: &ReduceConfig,
) -> Result<ReducerMap> {
    if x.ncols() != N_CHANNELS {
        return Err(Error::DimensionMismatch {
            expected: N_CHANNELS,
            got: x.ncols(),
        });
    }
    let blocks = match variant {
        Variant::Pca => vec![linear_block(ChannelSelector::All, pca(x, cfg.variance_target)?)],
        Variant::PcaNmf => {
            let imu = select_columns(x, ChannelSelector::ImuOnly);
            let emg = select_columns(x, ChannelSelector::EmgOnly);
            debug_assert_eq!(emg.ncols(), N_EMG);
            let nmf = fit_nmf(&emg, cfg.vaf_target, cfg.nmf_max_iter, cfg.nmf_tol, cfg.seed)?;
            let vaf = nmf.vaf_by_rank.last().copied().unwrap_or(0.0);
            vec![
                linear_block(ChannelSelector::ImuOnly, pca(&imu, cfg.variance_target)?),
                Block {
                    selector: ChannelSelector::EmgOnly,
                    kind: BlockKind::Nmf {
                        synergies: nmf.factors.h,
                        vaf,
                    },
                },
            ]
        }
        Variant::Fda => vec![fda_block(ChannelSelector::All, fda(x, labels, cfg.fda_ridge)?)],
        Variant::FdaImu => {
            let imu = select_columns(x, ChannelSelector::ImuOnly);
            vec![fda_block(ChannelSelector::ImuOnly, fda(&imu, labels, cfg.fda_ridge)?)]
        }
    };
    Ok(ReducerMap {
        variant,
        seed: cfg.seed,
        blocks,
    })
}
