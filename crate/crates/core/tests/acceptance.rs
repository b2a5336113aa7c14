//! Acceptance run: one PASS/FAIL line per primary criterion, plus INFO lines
//! for secondary targets that are reported but not enforced.
//!
//! Runs as a plain binary (`harness = false`) so the lines reach stdout in
//! order. Exits non-zero when any primary criterion fails.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use reach_core::accumulate::*;
use reach_core::dsp::*;
use reach_core::engine::*;
use reach_core::fsm::*;
use reach_core::intention::*;
use reach_core::mixture::*;
use reach_core::pipeline::*;
use reach_core::reduce::Variant;
use reach_core::store::*;
use reach_core::synth::*;

// Pinned tolerances.
const ACC_AT_30: f64 = 0.90;
const ACC_AT_80: f64 = 0.95;
const EVAL_BUDGET_S: f64 = 300.0;
const FDA_MARGIN: f64 = 0.10;
const CHANCE_SLACK: f64 = 0.05;
const TUNE_TARGET: f64 = 0.95;
const TUNE_MAX_PCT: f64 = 40.0;
const FRONTIER_NOISE: f64 = 0.05;
const ACC8_AT_50: f64 = 0.80;
const P99_MS: f64 = 10.0;
const MEAN_MS: f64 = 3.0;
const MAX_ERR_RATE: f64 = 0.02;
const MIN_PRECISION: f64 = 0.98;

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, ok: bool, detail: String) {
        println!("{} [{id}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(id);
        }
    }
}

fn info(name: &str, ok: bool, detail: String) {
    println!("INFO {name} ({}): {detail}", if ok { "met" } else { "not met" });
}

fn cpu_model() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown CPU".into())
}

fn cfg(variant: Variant, l: usize) -> TrainConfig {
    TrainConfig::new(variant, l)
}

/// Thresholds are swept along each grid axis; stop time must never fall and
/// accuracy may only fall by sampling noise among rows that stop in time.
fn frontier_monotone(rows: &[FrontierRow]) -> (bool, String) {
    let mut time_breaks = 0;
    let mut acc_breaks = 0;
    let mut pairs = 0;
    let clean = |r: &FrontierRow| r.abort_rate == 0.0 && r.mean_pct_trajectory <= 100.0;
    let mut check = |a: &FrontierRow, b: &FrontierRow| {
        pairs += 1;
        if b.mean_time_s < a.mean_time_s - 1e-12 {
            time_breaks += 1;
        }
        if clean(a) && clean(b) && b.mean_acc < a.mean_acc - FRONTIER_NOISE {
            acc_breaks += 1;
        }
    };
    let mut th_r: Vec<f64> = rows.iter().map(|r| r.th_r).collect();
    let mut th_s: Vec<f64> = rows.iter().map(|r| r.th_s).collect();
    th_r.sort_by(f64::total_cmp);
    th_r.dedup();
    th_s.sort_by(f64::total_cmp);
    th_s.dedup();
    let at = |r: f64, s: f64| rows.iter().find(|x| x.th_r == r && x.th_s == s).unwrap();
    for &r in &th_r {
        for w in th_s.windows(2) {
            check(at(r, w[0]), at(r, w[1]));
        }
    }
    for &s in &th_s {
        for w in th_r.windows(2) {
            check(at(w[0], s), at(w[1], s));
        }
    }
    (
        time_breaks == 0 && acc_breaks == 0,
        format!("{pairs} neighbour pairs, {time_breaks} stop-time inversions, {acc_breaks} accuracy drops > {FRONTIER_NOISE}"),
    )
}

fn property_checks() -> Vec<(&'static str, bool)> {
    let mut out = Vec::new();

    // EM monotone over 100 seeds.
    let em = (0..100u64).all(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = nalgebra::DMatrix::from_fn(150, 2, |i, j| {
            let c = [[0.0, 0.0], [3.0, 1.0], [-1.0, 4.0]][i % 3][j];
            {
            let z: f64 = StandardNormal.sample(&mut rng);
            c + 0.8 * z
        }
        });
        let fit = em_fit(&x, 3, seed, 0.0, 40).unwrap();
        fit.log_likelihoods.windows(2).all(|w| w[1] >= w[0] - 1e-6 * w[0].abs())
    });
    out.push(("EM log-likelihood monotone (100 seeds)", em));

    // Baum-Welch monotone over 100 seeds.
    let bw = (0..100u64).all(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = 0usize;
        let xs: Vec<f64> = (0..300)
            .map(|_| {
                let stay = if s == 0 { 0.95 } else { 0.9 };
                if rng.random::<f64>() > stay {
                    s = 1 - s;
                }
                Normal::new(s as f64, 0.3).unwrap().sample(&mut rng)
            })
            .collect();
        let init = HmmModel::initialize(std::slice::from_ref(&xs)).unwrap();
        let fit = baum_welch(&[xs], &init, 0.0, 30).unwrap();
        fit.log_likelihoods.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs())
    });
    out.push(("Baum-Welch log-likelihood monotone (100 seeds)", bw));

    // filtfilt: zero lag at 1 Hz and reversal symmetry in the interior.
    let spec = velocity_bandpass(100.0);
    let sine: Vec<f64> = (0..3000).map(|i| (2.0 * std::f64::consts::PI * i as f64 / 100.0).sin()).collect();
    let y = filtfilt(&spec, &sine).unwrap();
    let lag = (-10i64..=10)
        .max_by(|&a, &b| {
            let c = |l: i64| (1000..2000).map(|i| sine[i] * y[(i as i64 + l) as usize]).sum::<f64>();
            c(a).total_cmp(&c(b))
        })
        .unwrap();
    let lp = design_lowpass(5.0, 4, 100.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise: Vec<f64> = (0..600).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fwd = filtfilt(&lp, &noise).unwrap();
    let mut rev_in = noise.clone();
    rev_in.reverse();
    let mut rev = filtfilt(&lp, &rev_in).unwrap();
    rev.reverse();
    let sym = (150..450).all(|i| (fwd[i] - rev[i]).abs() < 1e-6);
    out.push(("filtfilt zero phase and reversal symmetry", lag == 0 && sym));

    // Accumulator identity and stopping monotonicity.
    let simplex = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..4).map(|_| rng.random_range(0.001..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let mut acc = AccumulatorState::new(4, 0.0);
    let ident = (1..=200).all(|t| {
        acc.step(&simplex(&mut rng));
        (acc.sum_criterion(SumMode::Normalized) - t as f64).abs() < 1e-9
    });
    out.push(("accumulator C_s(t) = t", ident));
    let mono = (0..500).all(|_| {
        let rho: Vec<Vec<f64>> = (0..60).map(|_| simplex(&mut rng)).collect();
        let ev = TrialEvidence { label: 1, fold: 0, trajectory_len: 60, lead: 0, rho, density_mass: Vec::new() };
        let (r1, r2) = (rng.random_range(0.0..0.99f64), rng.random_range(0.0..0.99f64));
        let (s1, s2) = (rng.random_range(1.0..80.0f64), rng.random_range(1.0..80.0f64));
        let a = replay_trial(&ev, 4, &StoppingConfig::new(r1.min(r2), s1.min(s2), 100));
        let b = replay_trial(&ev, 4, &StoppingConfig::new(r1.max(r2), s1.max(s2), 100));
        a.stop_t <= b.stop_t
    });
    out.push(("stopping rule monotone in thresholds", mono));

    // FSM legality over random input streams.
    let legal = |f: FsmState, t: FsmState| {
        use FsmState::*;
        matches!(
            (f, t),
            (Home, EvidenceAccumulation)
                | (EvidenceAccumulation, SendCommand | Home | OnTarget)
                | (SendCommand, OnTarget)
                | (OnTarget, BackMovement)
                | (BackMovement, Home)
        )
    };
    let fsm_ok = (0..2000).all(|_| {
        let cfg = FsmConfig { x: rng.random_range(1..8), y: rng.random_range(1..30) };
        let mut cs = ControllerState::default();
        (0..300).all(|i| {
            let m = if rng.random_bool(0.5) { Intention::Motion } else { Intention::Rest };
            let s = if rng.random_bool(0.05) { StopSignal::Stop(rng.random_range(1..=4)) } else { StopSignal::Pending };
            let out = cs.step(i as f64, m, s, &cfg);
            out.transition.is_none_or(|t| legal(t.from, t.to))
        })
    });
    out.push(("FSM transition legality", fsm_ok));

    // Simplex preservation under extreme inputs.
    let model = HmmModel {
        initial: [0.5, 0.5],
        transition: [[0.99, 0.01], [0.02, 0.98]],
        means: [0.0, 1.0],
        variances: [1e-4, 1e-4],
    };
    let mut belief = IntentionBelief::from_model(&model);
    let hmm_simplex = [1e6, -1e6, 0.5, 1e300, -1e300, 0.0].iter().all(|&x| {
        belief = forward_step(&model, &belief, x);
        belief.p.iter().all(|p| p.is_finite() && *p >= 0.0) && (belief.p[0] + belief.p[1] - 1.0).abs() < 1e-12
    });
    let class_simplex = [vec![-1e308, 0.0], vec![1e6, -1e6, 3.0], vec![f64::NEG_INFINITY; 3]].iter().all(|v| {
        let p = normalize_over_classes(v);
        (p.iter().sum::<f64>() - 1.0).abs() < 1e-12 && p.iter().all(|x| *x >= 0.0)
    });
    out.push(("simplex preservation under extreme inputs", hmm_simplex && class_simplex));
    out
}

fn main() {
    let mut rep = Report { failed: Vec::new() };
    println!("acceptance on {} ({} threads)", cpu_model(), rayon::current_num_threads());

    // Reference dataset, four directions.
    let (frames4, truth4) = gen_session(&SynthConfig::reference(4)).unwrap();
    let base = cfg(Variant::Fda, 4);
    let t0 = Instant::now();
    let fda = &evaluate_variants(&frames4, &[Variant::Fda], &base).unwrap()[0];
    let fda_s = t0.elapsed().as_secs_f64();
    let others = evaluate_variants(&frames4, &[Variant::FdaImu, Variant::Pca, Variant::PcaNmf], &base).unwrap();

    // 1. Early accuracy.
    let a30 = accuracy_at(&fda.curve, 30).unwrap();
    let a80 = accuracy_at(&fda.curve, 80).unwrap();
    rep.line(
        1,
        "early accuracy (FDA, L=4)",
        a30 >= ACC_AT_30 && a80 >= ACC_AT_80 && fda_s < EVAL_BUDGET_S,
        format!("acc@30% = {a30:.3} (>= {ACC_AT_30}), acc@80% = {a80:.3} (>= {ACC_AT_80}), 5-fold run {fda_s:.1} s (< {EVAL_BUDGET_S} s)"),
    );

    // 2. Variant ordering.
    let band = |c: &[CurvePoint]| mean_accuracy_between(c, 10, 50);
    let fda_band = band(&fda.curve);
    let imu_band = band(&others[0].curve);
    let chance = 1.0 / 4.0;
    let inside = |c: &CvResult| {
        let b = band(&c.curve);
        b >= chance - CHANCE_SLACK && b <= fda_band + 1e-12
    };
    rep.line(
        2,
        "variant ordering (10-50% mean)",
        fda_band >= imu_band + FDA_MARGIN && inside(&others[1]) && inside(&others[2]),
        format!(
            "FDA {fda_band:.3} vs FDA-IMU {imu_band:.3} (margin >= {FDA_MARGIN}); PCA {:.3}, PCANMF {:.3} within [{chance:.2}, FDA]",
            band(&others[1].curve),
            band(&others[2].curve)
        ),
    );

    // 3. Dynamic stopping on segmented onsets.
    let y = prepare(&frames4, &base).unwrap().fsm.y;
    let tune = grid_search(&fda.evidence, 4, &base.grid, TUNE_TARGET, y, 100.0, SumMode::Normalized).unwrap();
    let (mono, mono_detail) = frontier_monotone(&tune.frontier);
    let row = &tune.selected_row;
    rep.line(
        3,
        "dynamic stopping (grid search)",
        tune.target_met && row.mean_acc >= TUNE_TARGET && row.mean_pct_trajectory <= TUNE_MAX_PCT && mono,
        format!(
            "th_r = {}, th_s = {}: held-out acc {:.3} +- {:.3}, stop {:.3} s = {:.1}% (<= {TUNE_MAX_PCT}%); frontier: {mono_detail}",
            row.th_r, row.th_s, row.mean_acc, row.std_acc, row.mean_time_s, row.mean_pct_trajectory
        ),
    );

    // 4. Eight directions.
    let (frames8, _) = gen_session(&SynthConfig::reference(8)).unwrap();
    let t8 = Instant::now();
    let fda8 = &evaluate_variants(&frames8, &[Variant::Fda], &cfg(Variant::Fda, 8)).unwrap()[0];
    let a50 = accuracy_at(&fda8.curve, 50).unwrap();
    rep.line(
        4,
        "8-class robustness (FDA, L=8)",
        a50 >= ACC8_AT_50,
        format!("acc@50% = {a50:.3} (>= {ACC8_AT_50}), run {:.1} s", t8.elapsed().as_secs_f64()),
    );

    // Live bundle for the replay criteria.
    let tb = Instant::now();
    let trained = train_bundle(&frames4, "reference-42", &base).unwrap();
    let bundle = trained.bundle;
    let train_s = tb.elapsed().as_secs_f64();
    let stop = bundle.direction.stopping.unwrap();
    let report = replay(&bundle, &frames4, Some(&truth4), &ReplayOptions::default()).unwrap();
    let m = report.metrics.clone().unwrap();

    // 5. Latency.
    let lat = report.latency;
    rep.line(
        5,
        "per-frame latency",
        lat.p99_ms <= P99_MS && lat.mean_ms <= MEAN_MS,
        format!(
            "{} frames: mean {:.4} ms (<= {MEAN_MS}), p50 {:.4} ms, p99 {:.4} ms (<= {P99_MS}), max {:.3} ms on {}",
            lat.frames,
            lat.mean_ms,
            lat.p50_ms,
            lat.p99_ms,
            lat.max_ms,
            cpu_model()
        ),
    );

    // 6. Controller trace.
    let (blip_frames, blip_truth) = gen_session(&SynthConfig {
        blips: Some(BlipConfig::default()),
        ..SynthConfig::reference(4)
    })
    .unwrap();
    let blip = replay(&bundle, &blip_frames, Some(&blip_truth), &ReplayOptions::default())
        .unwrap()
        .metrics
        .unwrap();
    rep.line(
        6,
        "controller trace (full replay)",
        m.erroneous_rate <= MAX_ERR_RATE && m.command_precision >= MIN_PRECISION && blip.filtered_blips >= 1,
        format!(
            "erroneous {}/{} = {:.2}% (<= {:.0}%), precision {}/{} = {:.3} (>= {MIN_PRECISION}); blip session: {} of {} blips filtered, {} erroneous",
            m.erroneous_transitions,
            m.expected_transitions,
            100.0 * m.erroneous_rate,
            100.0 * MAX_ERR_RATE,
            m.commands_correct,
            m.commands_issued,
            m.command_precision,
            blip.filtered_blips,
            blip_truth.blips.len(),
            blip.erroneous_transitions
        ),
    );

    // 7. Property identities, re-checked inline; the full suites live in the
    // other test targets of this crate.
    let mut props = property_checks();
    let dir = tempfile::tempdir().unwrap();
    let sp = dir.path().join("s.csv");
    save_session(&sp, &frames4, Some(&truth4)).unwrap();
    let ds = load_dataset(&sp).unwrap();
    let sp2 = dir.path().join("s2.csv");
    save_session(&sp2, &ds.frames, ds.truth.as_ref()).unwrap();
    let bp = dir.path().join("b.json");
    save_bundle(&bundle, &bp).unwrap();
    let loaded = load_bundle(&bp).unwrap();
    let bp2 = dir.path().join("b2.json");
    save_bundle(&loaded, &bp2).unwrap();
    let same = |a: &Path, b: &Path| std::fs::read(a).unwrap() == std::fs::read(b).unwrap();
    props.push((
        "persistence round trips",
        ds.frames == frames4 && loaded == bundle && same(&sp, &sp2) && same(&truth_path(&sp), &truth_path(&sp2)) && same(&bp, &bp2),
    ));
    let mut engine = SessionEngine::new(bundle.clone()).unwrap();
    let live: Vec<EngineEvent> = frames4.iter().flat_map(|f| engine.ingest(f)).collect();
    let offline = replay(&bundle, &frames4, None, &ReplayOptions { reset_on_error: false, ..Default::default() }).unwrap();
    props.push(("live vs replay event equality", live == offline.events));
    let bad: Vec<&str> = props.iter().filter(|p| !p.1).map(|p| p.0).collect();
    rep.line(
        7,
        "property suites",
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} identities hold; full suites in *_oracles.rs, *_props.rs, store_roundtrip.rs, engine_replay.rs", props.len())
        } else {
            format!("failing: {}", bad.join("; "))
        },
    );

    // Secondary targets, reported only.
    info(
        "live replay accuracy >= 0.90 with stop <= 40%",
        m.direction_accuracy >= 0.90 && m.mean_stop_pct_trajectory <= 40.0,
        format!(
            "accuracy {:.3}, stop {:.3} s = {:.1}% of trajectory; bundle thresholds th_r = {}, th_s = {} tuned on live onsets, training {train_s:.1} s",
            m.direction_accuracy, m.mean_stop_s, m.mean_stop_pct_trajectory, stop.th_r, stop.th_s
        ),
    );
    let (nf, nt) = gen_session(&SynthConfig::noiseless(4)).unwrap();
    let nb = train_bundle(&nf, "noiseless", &base).unwrap().bundle;
    let nm = replay(&nb, &nf, Some(&nt), &ReplayOptions::default()).unwrap().metrics.unwrap();
    info(
        "noise-free replay: 100% accuracy, no erroneous transitions",
        nm.direction_accuracy == 1.0 && nm.erroneous_transitions == 0,
        format!(
            "accuracy {:.3}, {} erroneous, stop {:.3} s",
            nm.direction_accuracy, nm.erroneous_transitions, nm.mean_stop_s
        ),
    );
    let segs = segment_session(&frames4, 100.0, &SegmentationParams::default()).unwrap();
    let motions: Vec<_> = segs.iter().filter(|s| s.state == SegmentState::Motion).collect();
    let lags: Vec<i64> = truth4
        .trials
        .iter()
        .zip(motions.chunks(2))
        .flat_map(|(t, p)| [p[0].start as i64 - t.forward_start as i64, p[1].start as i64 - t.backward_start as i64])
        .collect();
    let max_lag = lags.iter().map(|l| l.abs()).max().unwrap_or(0);
    info(
        "segmentation onset error < 100 ms",
        motions.len() == 2 * truth4.trials.len() && max_lag < 10,
        format!(
            "{} motions for {} trials, onset lag mean {:.1} samples, max {max_lag} samples",
            motions.len(),
            truth4.trials.len(),
            lags.iter().sum::<i64>() as f64 / lags.len().max(1) as f64
        ),
    );
    println!(
        "NOTE human-subject live accuracy for comparison is 94.3%; this replay: direction accuracy {:.3}, HMM frame accuracy {:.3}",
        m.direction_accuracy, m.hmm_accuracy
    );

    if rep.failed.is_empty() {
        println!("acceptance: all 7 primary criteria pass");
    } else {
        println!("acceptance: FAILED criteria {:?}", rep.failed);
        std::process::exit(1);
    }
}
