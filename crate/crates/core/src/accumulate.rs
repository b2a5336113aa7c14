//! Evidence accumulation from movement onset, the ratio and sum stopping
//! criteria, and threshold tuning by cross-validated grid search.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the sum criterion adds up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SumMode {
    /// Class-normalised probabilities; `C_s(t) = t`.
    #[default]
    Normalized,
    /// Raw (unnormalised) class densities.
    RawDensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingConfig {
    pub th_r: f64,
    pub th_s: f64,
    /// Samples after onset at which accumulation gives up.
    pub timeout: usize,
    pub target_accuracy: f64,
    #[serde(default)]
    pub sum_mode: SumMode,
}

impl StoppingConfig {
    pub fn new(th_r: f64, th_s: f64, timeout: usize) -> Self {
        StoppingConfig {
            th_r,
            th_s,
            timeout,
            target_accuracy: 0.95,
            sum_mode: SumMode::Normalized,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.th_r) {
            return Err(Error::InvalidConfig(format!("th_r = {} outside [0, 1)", self.th_r)));
        }
        if !(self.th_s > 0.0) {
            return Err(Error::InvalidConfig(format!("th_s = {} must be positive", self.th_s)));
        }
        if self.timeout == 0 {
            return Err(Error::InvalidConfig("timeout must be at least one sample".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulatorState {
    pub t: usize,
    pub alpha: Vec<f64>,
    pub alpha_norm: Vec<f64>,
    /// Running sum of raw class densities, for [`SumMode::RawDensity`].
    pub raw_mass: f64,
    pub onset: f64,
}

impl AccumulatorState {
    pub fn new(n_classes: usize, onset: f64) -> Self {
        AccumulatorState {
            t: 0,
            alpha: vec![0.0; n_classes],
            alpha_norm: vec![1.0 / n_classes as f64; n_classes],
            raw_mass: 0.0,
            onset,
        }
    }

    /// Adds one normalised class-probability vector.
    pub fn step(&mut self, rho: &[f64]) {
        debug_assert_eq!(rho.len(), self.alpha.len());
        for (a, r) in self.alpha.iter_mut().zip(rho) {
            *a += r;
        }
        let total: f64 = self.alpha.iter().sum();
        for (n, a) in self.alpha_norm.iter_mut().zip(&self.alpha) {
            *n = a / total;
        }
        self.t += 1;
    }

    /// Like [`step`](Self::step) but also records the raw density mass `Σ_l ρ_l`.
    pub fn step_with_density(&mut self, rho: &[f64], density_mass: f64) {
        self.raw_mass += density_mass;
        self.step(rho);
    }

    /// Most probable class, 1-based; ties go to the lowest index.
    pub fn current_prediction(&self) -> Result<u8> {
        if self.t == 0 {
            return Err(Error::InvalidConfig("prediction requested before any evidence".into()));
        }
        let mut best = 0;
        for (i, v) in self.alpha_norm.iter().enumerate() {
            if *v > self.alpha_norm[best] {
                best = i;
            }
        }
        Ok(best as u8 + 1)
    }

    /// `C_r = 1 - k2 / k1` over the two largest normalised sums.
    pub fn ratio_criterion(&self) -> f64 {
        let (mut k1, mut k2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &v in &self.alpha_norm {
            if v > k1 {
                k2 = k1;
                k1 = v;
            } else if v > k2 {
                k2 = v;
            }
        }
        if k1 <= 0.0 || self.t == 0 {
            return 0.0;
        }
        (1.0 - k2 / k1).clamp(0.0, 1.0)
    }

    pub fn sum_criterion(&self, mode: SumMode) -> f64 {
        match mode {
            SumMode::Normalized => self.alpha.iter().sum(),
            SumMode::RawDensity => self.raw_mass,
        }
    }

    pub fn should_stop(&self, cfg: &StoppingConfig) -> StopDecision {
        if self.t == 0 {
            return StopDecision::Continue;
        }
        if self.ratio_criterion() > cfg.th_r || self.sum_criterion(cfg.sum_mode) > cfg.th_s {
            // t >= 1 so a prediction always exists.
            return StopDecision::Stop(self.current_prediction().unwrap_or(1));
        }
        if self.t > cfg.timeout {
            return StopDecision::Abort;
        }
        StopDecision::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "direction")]
pub enum StopDecision {
    Continue,
    Stop(u8),
    Abort,
}

/// Fold index (0-based) for every item, stratified by `labels`.
///
/// Each class is shuffled and dealt round-robin; the dealing position carries
/// over between classes so fold sizes stay balanced overall.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0usize; labels.len()];
    let mut next = 0usize;
    for c in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < k {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} trials, fewer than {k} folds",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for i in idx {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(folds)
}

/// Held-out evidence for one reach: per-sample normalised class probabilities
/// starting at the onset sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEvidence {
    pub label: u8,
    pub fold: usize,
    /// Forward-motion length in samples.
    pub trajectory_len: usize,
    /// How many samples the evidence starts ahead of the segmented onset
    /// (negative when it starts later). Percent of trajectory is measured
    /// from the segmented onset.
    #[serde(default)]
    pub lead: i64,
    pub rho: Vec<Vec<f64>>,
    /// `Σ_l ρ_l` per sample, for the raw-density sum mode.
    #[serde(default)]
    pub density_mass: Vec<f64>,
}

/// Per-sample criterion values of an accumulated trial.
#[derive(Debug, Clone)]
struct Trace {
    label: u8,
    fold: usize,
    trajectory_len: usize,
    lead: i64,
    ratio: Vec<f64>,
    sum: Vec<f64>,
    prediction: Vec<u8>,
}

fn trace(ev: &TrialEvidence, n_classes: usize, mode: SumMode) -> Trace {
    let mut acc = AccumulatorState::new(n_classes, 0.0);
    let mut ratio = Vec::with_capacity(ev.rho.len());
    let mut sum = Vec::with_capacity(ev.rho.len());
    let mut prediction = Vec::with_capacity(ev.rho.len());
    for (i, r) in ev.rho.iter().enumerate() {
        acc.step_with_density(r, ev.density_mass.get(i).copied().unwrap_or(0.0));
        ratio.push(acc.ratio_criterion());
        sum.push(acc.sum_criterion(mode));
        prediction.push(acc.current_prediction().unwrap_or(1));
    }
    Trace {
        label: ev.label,
        fold: ev.fold,
        trajectory_len: ev.trajectory_len,
        lead: ev.lead,
        ratio,
        sum,
        prediction,
    }
}

/// Outcome of replaying one trial under fixed thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayOutcome {
    /// Samples accumulated when the decision was made (timeout + 1 on abort).
    pub stop_t: usize,
    pub prediction: Option<u8>,
}

fn replay_trace(tr: &Trace, th_r: f64, th_s: f64, timeout: usize) -> ReplayOutcome {
    for t in 0..tr.ratio.len() {
        if tr.ratio[t] > th_r || tr.sum[t] > th_s {
            return ReplayOutcome {
                stop_t: t + 1,
                prediction: Some(tr.prediction[t]),
            };
        }
        if t + 1 > timeout {
            break;
        }
    }
    ReplayOutcome {
        stop_t: timeout + 1,
        prediction: None,
    }
}

/// Replays one trial through `should_stop` semantics.
pub fn replay_trial(ev: &TrialEvidence, n_classes: usize, cfg: &StoppingConfig) -> ReplayOutcome {
    replay_trace(&trace(ev, n_classes, cfg.sum_mode), cfg.th_r, cfg.th_s, cfg.timeout)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub th_r: Vec<f64>,
    pub th_s: Vec<f64>,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        let mut th_r: Vec<f64> = (0..10).map(|i| 0.50 + 0.05 * i as f64).collect();
        th_r.push(0.99);
        let th_s = (1..=30).map(|i| 5.0 * i as f64).collect();
        ThresholdGrid { th_r, th_s }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub th_r: f64,
    pub th_s: f64,
    pub mean_acc: f64,
    /// Standard deviation of the per-fold accuracies.
    pub std_acc: f64,
    pub mean_time_s: f64,
    pub mean_pct_trajectory: f64,
    pub abort_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub selected: StoppingConfig,
    pub selected_row: FrontierRow,
    pub target_met: bool,
    pub frontier: Vec<FrontierRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn evaluate_cell(traces: &[Trace], n_folds: usize, th_r: f64, th_s: f64, timeout: usize, fs: f64) -> FrontierRow {
    let mut fold_hits = vec![(0usize, 0usize); n_folds];
    let mut time = 0.0;
    let mut pct = 0.0;
    let mut aborts = 0usize;
    for tr in traces {
        let out = replay_trace(tr, th_r, th_s, timeout);
        let f = &mut fold_hits[tr.fold.min(n_folds - 1)];
        f.1 += 1;
        if out.prediction == Some(tr.label) {
            f.0 += 1;
        }
        if out.prediction.is_none() {
            aborts += 1;
        }
        time += out.stop_t as f64 / fs;
        pct += 100.0 * (out.stop_t as i64 - tr.lead).max(0) as f64 / tr.trajectory_len.max(1) as f64;
    }
    let accs: Vec<f64> = fold_hits
        .iter()
        .filter(|f| f.1 > 0)
        .map(|f| f.0 as f64 / f.1 as f64)
        .collect();
    let (_, std_acc) = mean_std(&accs);
    let total_hits: usize = fold_hits.iter().map(|f| f.0).sum();
    let n = traces.len().max(1) as f64;
    FrontierRow {
        th_r,
        th_s,
        mean_acc: total_hits as f64 / n,
        std_acc,
        mean_time_s: time / n,
        mean_pct_trajectory: pct / n,
        abort_rate: aborts as f64 / n,
    }
}

/// Evaluates every threshold cell on held-out evidence and picks the fastest
/// cell whose accuracy reaches `target`.
///
/// Ties on time go to the larger `th_r`, then the smaller `th_s`. When no cell
/// reaches the target the most accurate cell is returned with
/// `target_met = false`.
pub fn grid_search(
    trials: &[TrialEvidence],
    n_classes: usize,
    grid: &ThresholdGrid,
    target: f64,
    timeout: usize,
    fs: f64,
    sum_mode: SumMode,
) -> Result<TuneResult> {
    if trials.is_empty() {
        return Err(Error::InsufficientData("grid search without trials".into()));
    }
    if grid.th_r.is_empty() || grid.th_s.is_empty() {
        return Err(Error::InvalidConfig("empty threshold grid".into()));
    }
    let traces: Vec<Trace> = trials.par_iter().map(|t| trace(t, n_classes, sum_mode)).collect();
    let n_folds = trials.iter().map(|t| t.fold).max().unwrap_or(0) + 1;
    let cells: Vec<(f64, f64)> = grid
        .th_r
        .iter()
        .flat_map(|&r| grid.th_s.iter().map(move |&s| (r, s)))
        .collect();
    let frontier: Vec<FrontierRow> = cells
        .par_iter()
        .map(|&(r, s)| evaluate_cell(&traces, n_folds, r, s, timeout, fs))
        .collect();

    const EPS: f64 = 1e-12;
    let better_time = |a: &FrontierRow, b: &FrontierRow| {
        if (a.mean_time_s - b.mean_time_s).abs() > EPS {
            return a.mean_time_s < b.mean_time_s;
        }
        if (a.th_r - b.th_r).abs() > EPS {
            return a.th_r > b.th_r;
        }
        a.th_s < b.th_s
    };
    let mut best: Option<&FrontierRow> = None;
    for row in frontier.iter().filter(|r| r.mean_acc >= target - EPS) {
        if best.is_none_or(|b| better_time(row, b)) {
            best = Some(row);
        }
    }
    let target_met = best.is_some();
    if best.is_none() {
        for row in &frontier {
            let replace = match best {
                None => true,
                Some(b) if (row.mean_acc - b.mean_acc).abs() > EPS => row.mean_acc > b.mean_acc,
                Some(b) => better_time(row, b),
            };
            if replace {
                best = Some(row);
            }
        }
    }
    let row = best.cloned().expect("non-empty frontier");
    let selected = StoppingConfig {
        th_r: row.th_r,
        th_s: row.th_s,
        timeout,
        target_accuracy: target,
        sum_mode,
    };
    Ok(TuneResult {
        selected,
        selected_row: row,
        target_met,
        frontier,
    })
}

/// Writes the frontier as CSV with a header row.
pub fn write_frontier<W: std::io::Write>(rows: &[FrontierRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "th_r",
        "th_s",
        "mean_acc",
        "std_acc",
        "mean_time_s",
        "mean_pct_trajectory",
        "abort_rate",
    ])
    .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    for r in rows {
        w.write_record([
            format!("{:.2}", r.th_r),
            format!("{}", r.th_s),
            format!("{:.6}", r.mean_acc),
            format!("{:.6}", r.std_acc),
            format!("{:.6}", r.mean_time_s),
            format!("{:.3}", r.mean_pct_trajectory),
            format!("{:.6}", r.abort_rate),
        ])
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_norm(alpha_norm: Vec<f64>) -> AccumulatorState {
        AccumulatorState {
            t: 1,
            alpha: alpha_norm.clone(),
            alpha_norm,
            raw_mass: 0.0,
            onset: 0.0,
        }
    }

    #[test]
    fn first_step() {
        let mut a = AccumulatorState::new(4, 0.0);
        a.step(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(a.alpha_norm, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(a.t, 1);
        a.step(&[0.25; 4]);
        assert_eq!(a.sum_criterion(SumMode::Normalized), 2.0);
    }

    #[test]
    fn prediction_and_ratio() {
        assert_eq!(with_norm(vec![0.1, 0.6, 0.2, 0.1]).current_prediction().unwrap(), 2);
        assert_eq!(with_norm(vec![0.25; 4]).current_prediction().unwrap(), 1);
        assert!(AccumulatorState::new(4, 0.0).current_prediction().is_err());
        assert_eq!(with_norm(vec![0.25; 4]).ratio_criterion(), 0.0);
        assert_eq!(with_norm(vec![1.0, 0.0, 0.0, 0.0]).ratio_criterion(), 1.0);
        assert!((with_norm(vec![0.5, 0.25, 0.15, 0.10]).ratio_criterion() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn stop_rules() {
        let cfg = StoppingConfig::new(0.95, 95.0, 200);
        let a = with_norm(vec![0.98, 0.01, 0.005, 0.005]);
        assert_eq!(a.should_stop(&cfg), StopDecision::Stop(1));

        let mut u = AccumulatorState::new(4, 0.0);
        for _ in 0..95 {
            u.step(&[0.25; 4]);
        }
        assert_eq!(u.should_stop(&cfg), StopDecision::Continue);
        u.step(&[0.25; 4]);
        assert_eq!(u.should_stop(&cfg), StopDecision::Stop(1));

        let short = StoppingConfig::new(0.95, 1000.0, 10);
        let mut v = AccumulatorState::new(4, 0.0);
        for _ in 0..10 {
            v.step(&[0.25; 4]);
        }
        assert_eq!(v.should_stop(&short), StopDecision::Continue);
        v.step(&[0.25; 4]);
        assert_eq!(v.should_stop(&short), StopDecision::Abort);
    }

    #[test]
    fn kfold_balanced() {
        let labels: Vec<u8> = (0..80).map(|i| (i % 4) as u8 + 1).collect();
        let folds = stratified_kfold(&labels, 5, 3).unwrap();
        for f in 0..5 {
            for c in 1..=4u8 {
                let n = (0..80).filter(|&i| folds[i] == f && labels[i] == c).count();
                assert_eq!(n, 4);
            }
        }
        assert_eq!(folds, stratified_kfold(&labels, 5, 3).unwrap());
        assert!(stratified_kfold(&labels, 1, 0).unwrap().iter().all(|&f| f == 0));
        assert!(stratified_kfold(&[1, 1, 2], 2, 0).is_err());
    }

    #[test]
    fn single_cell_grid() {
        let ev = TrialEvidence {
            label: 2,
            fold: 0,
            trajectory_len: 100,
            lead: 0,
            rho: vec![vec![0.1, 0.7, 0.1, 0.1]; 50],
            density_mass: vec![],
        };
        let grid = ThresholdGrid {
            th_r: vec![0.5],
            th_s: vec![20.0],
        };
        let res = grid_search(&[ev], 4, &grid, 0.95, 100, 100.0, SumMode::Normalized).unwrap();
        assert!(res.target_met);
        assert_eq!(res.selected.th_r, 0.5);
        // C_r after one step is 1 - 0.1/0.7 > 0.5.
        assert!((res.selected_row.mean_time_s - 0.01).abs() < 1e-12);
    }

    #[test]
    fn default_grid_spans_table_values() {
        let g = ThresholdGrid::default();
        assert_eq!(g.th_r.len(), 11);
        assert!(g.th_r.iter().any(|v| (v - 0.95).abs() < 1e-9));
        for s in [25.0, 35.0, 45.0, 95.0] {
            assert!(g.th_s.contains(&s));
        }
    }
}
