//! Offline training and evaluation: segmentation, HMM fitting, per-fold
//! direction models, accuracy-versus-trajectory curves and threshold tuning.

use std::collections::BTreeSet;

use log::info;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accumulate::{grid_search, stratified_kfold, AccumulatorState, SumMode, ThresholdGrid, TrialEvidence, TuneResult};
use crate::dsp::{mean_gyro_norms, primed_observable, segment_session, velocity_bandpass, MotionRole, SegmentInterval, SegmentState, SegmentationParams};
use crate::error::{Error, Result};
use crate::frame::{SampleFrame, N_CHANNELS};
use crate::fsm::{derive_config, FsmConfig};
use crate::intention::{baum_welch, forward_filter, BaumWelchFit, HmmModel};
use crate::mixture::{fit_direction_model, normalize_over_classes, ClassScorer, DirectionModel, MixtureConfig};
use crate::reduce::{fit_variant, ReduceConfig, ReducerMap, Variant};
use crate::store::{ModelBundle, Provenance, BUNDLE_FORMAT_VERSION};

/// Forward reach located by segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reach {
    pub trial_id: u32,
    pub label: u8,
    pub start: usize,
    pub end: usize,
}

impl Reach {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Forward motions with a known direction, in session order.
pub fn forward_reaches(frames: &[SampleFrame], segments: &[SegmentInterval]) -> Vec<Reach> {
    segments
        .iter()
        .filter(|s| s.state == SegmentState::Motion && s.motion_role == MotionRole::Forward)
        .filter_map(|s| {
            Some(Reach {
                trial_id: frames[(s.start + s.end) / 2].trial_id,
                label: s.direction?,
                start: s.start,
                end: s.end,
            })
        })
        .collect()
}

/// Where held-out evidence starts when thresholds are tuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneOnset {
    /// The offline segmentation onset, as in the accuracy curves.
    Segmented,
    /// The causal HMM onset the live engine will see.
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub n_classes: usize,
    pub folds: usize,
    pub seed: u64,
    pub target_accuracy: f64,
    pub grid: ThresholdGrid,
    pub fraction_x: f64,
    pub fraction_y: f64,
    pub sum_mode: SumMode,
    pub reduce: ReduceConfig,
    pub mixture: MixtureConfig,
    pub segmentation: SegmentationParams,
    pub hmm_tol: f64,
    pub hmm_max_iter: usize,
    pub sample_rate: f64,
    pub tune_onset: TuneOnset,
}

impl TrainConfig {
    pub fn new(variant: Variant, n_classes: usize) -> Self {
        TrainConfig {
            variant,
            n_classes,
            folds: 5,
            seed: 0,
            target_accuracy: 0.95,
            grid: ThresholdGrid::default(),
            fraction_x: 0.25,
            fraction_y: 2.0,
            sum_mode: SumMode::Normalized,
            reduce: ReduceConfig::default(),
            mixture: MixtureConfig::default(),
            segmentation: SegmentationParams::default(),
            hmm_tol: 1e-6,
            hmm_max_iter: 200,
            sample_rate: 100.0,
            tune_onset: TuneOnset::Live,
        }
    }
}

/// Reducer input rows and labels for the given reaches.
pub fn reach_matrix(frames: &[SampleFrame], reaches: &[Reach]) -> (DMatrix<f64>, Vec<u8>) {
    let n: usize = reaches.iter().map(Reach::len).sum();
    let mut x = DMatrix::zeros(n, N_CHANNELS);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for r in reaches {
        for f in &frames[r.start..r.end] {
            for (j, v) in f.features().iter().enumerate() {
                x[(row, j)] = *v;
            }
            labels.push(r.label);
            row += 1;
        }
    }
    (x, labels)
}

/// Fits the reducer and the per-class mixtures on `reaches`.
pub fn fit_direction(
    frames: &[SampleFrame],
    reaches: &[Reach],
    cfg: &TrainConfig,
) -> Result<(ReducerMap, DirectionModel)> {
    let (x, labels) = reach_matrix(frames, reaches);
    let reduce_cfg = ReduceConfig {
        seed: cfg.seed,
        ..cfg.reduce
    };
    let reducer = fit_variant(cfg.variant, &x, &labels, &reduce_cfg)?;
    let z = reducer.transform_rows(&x)?;
    let mix_cfg = MixtureConfig {
        seed: cfg.seed,
        ..cfg.mixture
    };
    let model = fit_direction_model(&z, &labels, cfg.n_classes, &mix_cfg)?;
    Ok((reducer, model))
}

/// Normalised class probabilities (and raw density mass) for `horizon`
/// samples starting at the reach onset.
pub fn reach_evidence(
    frames: &[SampleFrame],
    reach: &Reach,
    reducer: &ReducerMap,
    scorer: &ClassScorer,
    horizon: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let end = (reach.start + horizon.max(reach.len())).min(frames.len());
    let mut rho = Vec::with_capacity(end - reach.start);
    let mut mass = Vec::with_capacity(end - reach.start);
    for f in &frames[reach.start..end] {
        let z = reducer.transform(&f.features())?;
        let lp = scorer.log_pdf(&z)?;
        mass.push(lp.iter().map(|v| v.exp()).sum());
        rho.push(normalize_over_classes(&lp));
    }
    Ok((rho, mass))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldInfo {
    pub fold: usize,
    pub train_trials: Vec<u32>,
    pub test_trials: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub percent: u32,
    pub mean_acc: f64,
    /// Spread of the per-fold accuracies.
    pub std_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub variant: Variant,
    pub n_classes: usize,
    pub evidence: Vec<TrialEvidence>,
    pub folds: Vec<FoldInfo>,
    pub curve: Vec<CurvePoint>,
    pub feature_dim: usize,
}

pub const CURVE_PERCENTS: [u32; 10] = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100];

/// Class predicted after accumulating the first `percent` of the reach.
pub fn prediction_at(ev: &TrialEvidence, n_classes: usize, percent: u32) -> u8 {
    let n = ((percent as f64 / 100.0) * ev.trajectory_len as f64).round() as i64 + ev.lead;
    let n = n.max(1) as usize;
    let mut acc = AccumulatorState::new(n_classes, 0.0);
    for r in ev.rho.iter().take(n) {
        acc.step(r);
    }
    acc.current_prediction().unwrap_or(1)
}

pub fn accuracy_curve(evidence: &[TrialEvidence], n_classes: usize, percents: &[u32]) -> Vec<CurvePoint> {
    let n_folds = evidence.iter().map(|e| e.fold).max().map_or(1, |m| m + 1);
    percents
        .iter()
        .map(|&p| {
            let mut per_fold = vec![(0usize, 0usize); n_folds];
            for e in evidence {
                let hit = prediction_at(e, n_classes, p) == e.label;
                per_fold[e.fold].0 += usize::from(hit);
                per_fold[e.fold].1 += 1;
            }
            let accs: Vec<f64> = per_fold
                .iter()
                .filter(|f| f.1 > 0)
                .map(|f| f.0 as f64 / f.1 as f64)
                .collect();
            let hits: usize = per_fold.iter().map(|f| f.0).sum();
            let mean_acc = hits as f64 / evidence.len().max(1) as f64;
            let m = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
            let var = accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / accs.len().max(1) as f64;
            CurvePoint {
                percent: p,
                mean_acc,
                std_acc: var.sqrt(),
            }
        })
        .collect()
}

/// Stratified k-fold evaluation: every reach is scored by a model fitted
/// without it.
pub fn cross_validate(
    frames: &[SampleFrame],
    reaches: &[Reach],
    cfg: &TrainConfig,
    horizon: usize,
    onsets: Option<&[usize]>,
) -> Result<CvResult> {
    if let Some(o) = onsets {
        if o.len() != reaches.len() {
            return Err(Error::InvalidConfig("one onset per reach is required".into()));
        }
    }
    let labels: Vec<u8> = reaches.iter().map(|r| r.label).collect();
    let fold_of = stratified_kfold(&labels, cfg.folds, cfg.seed)?;
    let per_fold: Vec<Result<(FoldInfo, Vec<TrialEvidence>, usize)>> = (0..cfg.folds)
        .into_par_iter()
        .map(|fold| {
            let train: Vec<Reach> = reaches
                .iter()
                .zip(&fold_of)
                .filter(|(_, &f)| f != fold || cfg.folds == 1)
                .map(|(r, _)| *r)
                .collect();
            // (segmented reach, reach starting where evidence starts)
            let test: Vec<(Reach, Reach)> = reaches
                .iter()
                .enumerate()
                .zip(&fold_of)
                .filter(|(_, &f)| f == fold)
                .map(|((k, r), _)| {
                    let shifted = Reach {
                        start: onsets.map_or(r.start, |o| o[k]),
                        ..*r
                    };
                    (*r, shifted)
                })
                .collect();
            let (reducer, model) = fit_direction(frames, &train, cfg)?;
            let scorer = model.scorer()?;
            let mut evidence = Vec::with_capacity(test.len());
            for (r, from) in &test {
                let (rho, density_mass) = reach_evidence(frames, from, &reducer, &scorer, horizon)?;
                evidence.push(TrialEvidence {
                    label: r.label,
                    fold,
                    trajectory_len: r.len(),
                    lead: r.start as i64 - from.start as i64,
                    rho,
                    density_mass,
                });
            }
            let info = FoldInfo {
                fold,
                train_trials: train.iter().map(|r| r.trial_id).collect(),
                test_trials: test.iter().map(|(r, _)| r.trial_id).collect(),
            };
            Ok((info, evidence, reducer.output_dim()))
        })
        .collect();
    let mut folds = Vec::with_capacity(cfg.folds);
    let mut evidence = Vec::with_capacity(reaches.len());
    let mut feature_dim = 0;
    for r in per_fold {
        let (info, ev, dim) = r?;
        folds.push(info);
        evidence.extend(ev);
        feature_dim = feature_dim.max(dim);
    }
    let curve = accuracy_curve(&evidence, cfg.n_classes, &CURVE_PERCENTS);
    Ok(CvResult {
        variant: cfg.variant,
        n_classes: cfg.n_classes,
        evidence,
        folds,
        curve,
        feature_dim,
    })
}

/// Fits the intention HMM on the causally filtered velocity observable, the
/// same signal the live engine sees.
pub fn train_hmm(frames: &[SampleFrame], cfg: &TrainConfig) -> Result<BaumWelchFit> {
    if frames.is_empty() {
        return Err(Error::InsufficientData("no frames to train the intention model".into()));
    }
    let xs = primed_observable(frames, &velocity_bandpass(cfg.sample_rate), mean_gyro_norms(frames));
    let seqs = vec![xs];
    let init = HmmModel::initialize(&seqs)?;
    baum_welch(&seqs, &init, cfg.hmm_tol, cfg.hmm_max_iter)
}

/// Where the live engine would start accumulating for each reach: the causal
/// HMM's REST to MOTION edge nearest the segmented onset, searched from
/// `before` samples ahead of it up to the reach end. Reaches without such an
/// edge keep the segmented onset.
pub fn live_onsets(
    frames: &[SampleFrame],
    hmm: &HmmModel,
    level: [f64; 2],
    reaches: &[Reach],
    before: usize,
    fs: f64,
) -> Result<Vec<usize>> {
    let xs = primed_observable(frames, &velocity_bandpass(fs), level);
    let motion: Vec<bool> = forward_filter(hmm, &xs).iter().map(|p| p[1] > p[0]).collect();
    Ok(reaches
        .iter()
        .map(|r| {
            (r.start.saturating_sub(before).max(1)..r.end)
                .filter(|&i| motion[i] && !motion[i - 1])
                .min_by_key(|&i| i.abs_diff(r.start))
                .unwrap_or(r.start)
        })
        .collect())
}

/// Segments, reaches and FSM configuration derived from a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prepared {
    pub segments: Vec<SegmentInterval>,
    pub reaches: Vec<Reach>,
    pub fsm: FsmConfig,
}

pub fn prepare(frames: &[SampleFrame], cfg: &TrainConfig) -> Result<Prepared> {
    let segments = segment_session(frames, cfg.sample_rate, &cfg.segmentation)?;
    let reaches = forward_reaches(frames, &segments);
    let classes: BTreeSet<u8> = reaches.iter().map(|r| r.label).collect();
    if classes.len() != cfg.n_classes || classes.iter().any(|&c| c == 0 || c as usize > cfg.n_classes) {
        return Err(Error::InsufficientData(format!(
            "segmentation found reaches for classes {classes:?}, expected 1..={}",
            cfg.n_classes
        )));
    }
    let lens = |state: SegmentState| -> Vec<usize> {
        segments.iter().filter(|s| s.state == state).map(SegmentInterval::len).collect()
    };
    let fsm = derive_config(&lens(SegmentState::Rest), &lens(SegmentState::Motion), cfg.fraction_x, cfg.fraction_y)?;
    Ok(Prepared { segments, reaches, fsm })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub bundle: ModelBundle,
    pub prepared: Prepared,
    pub hmm_fit: BaumWelchFit,
    pub cv: CvResult,
    pub tune: TuneResult,
}

/// Full training: HMM, reducer + mixtures on every reach, thresholds tuned on
/// cross-validated held-out evidence.
pub fn train_bundle(frames: &[SampleFrame], dataset_sha256: &str, cfg: &TrainConfig) -> Result<TrainOutput> {
    let prepared = prepare(frames, cfg)?;
    info!(
        "segmented {} reaches; FSM X = {}, Y = {}",
        prepared.reaches.len(),
        prepared.fsm.x,
        prepared.fsm.y
    );
    let hmm_fit = train_hmm(frames, cfg)?;
    let velocity_level = mean_gyro_norms(frames);
    let onsets = match cfg.tune_onset {
        TuneOnset::Live => Some(live_onsets(
            frames,
            &hmm_fit.model,
            velocity_level,
            &prepared.reaches,
            prepared.fsm.x,
            cfg.sample_rate,
        )?),
        TuneOnset::Segmented => None,
    };
    let cv = cross_validate(frames, &prepared.reaches, cfg, prepared.fsm.y, onsets.as_deref())?;
    let tune = grid_search(
        &cv.evidence,
        cfg.n_classes,
        &cfg.grid,
        cfg.target_accuracy,
        prepared.fsm.y,
        cfg.sample_rate,
        cfg.sum_mode,
    )?;
    let (reducer, mut direction) = fit_direction(frames, &prepared.reaches, cfg)?;
    direction.stopping = Some(tune.selected);
    let mut notes: Vec<String> = hmm_fit.warnings.clone();
    if !tune.target_met {
        notes.push(format!(
            "no threshold cell reached accuracy {:.2}; kept the most accurate cell",
            cfg.target_accuracy
        ));
    }
    let bundle = ModelBundle {
        format_version: BUNDLE_FORMAT_VERSION,
        hmm: hmm_fit.model.clone(),
        velocity_level,
        reducer,
        direction,
        fsm: prepared.fsm,
        provenance: Provenance {
            dataset_sha256: dataset_sha256.to_string(),
            variant: cfg.variant.name().to_string(),
            seed: cfg.seed,
            created_unix: 0,
            frontier_file: None,
            cv_accuracy: Some(tune.selected_row.mean_acc),
            notes,
        },
    };
    bundle.validate()?;
    Ok(TrainOutput {
        bundle,
        prepared,
        hmm_fit,
        cv,
        tune,
    })
}

/// Cross-validated accuracy curves for several variants on one session.
pub fn evaluate_variants(frames: &[SampleFrame], variants: &[Variant], cfg: &TrainConfig) -> Result<Vec<CvResult>> {
    let prepared = prepare(frames, cfg)?;
    variants
        .iter()
        .map(|&v| {
            let c = TrainConfig {
                variant: v,
                ..cfg.clone()
            };
            cross_validate(frames, &prepared.reaches, &c, prepared.fsm.y, None)
        })
        .collect()
}

/// Mean accuracy over the curve points whose percent lies in `lo..=hi`.
pub fn mean_accuracy_between(curve: &[CurvePoint], lo: u32, hi: u32) -> f64 {
    let pts: Vec<f64> = curve
        .iter()
        .filter(|p| p.percent >= lo && p.percent <= hi)
        .map(|p| p.mean_acc)
        .collect();
    pts.iter().sum::<f64>() / pts.len().max(1) as f64
}

pub fn accuracy_at(curve: &[CurvePoint], percent: u32) -> Option<f64> {
    curve.iter().find(|p| p.percent == percent).map(|p| p.mean_acc)
}
