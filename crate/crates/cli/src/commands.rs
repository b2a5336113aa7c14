use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;

use reach_core::accumulate::{grid_search, write_frontier, FrontierRow, StoppingConfig};
use reach_core::dsp::{mean_gyro_norms, segment_session, MotionRole, SegmentState};
use reach_core::engine::{replay as replay_session, transition_log, ReplayOptions, SessionEngine};
use reach_core::frame::SampleFrame;
use reach_core::pipeline::{
    accuracy_at, cross_validate, evaluate_variants, live_onsets, mean_accuracy_between, prepare, train_bundle,
    train_hmm, CvResult, TrainConfig, TuneOnset,
};
use reach_core::reduce::Variant;
use reach_core::store::{self, load_bundle, load_dataset, save_bundle, save_json, save_session, write_atomic, Dataset};
use reach_core::synth::{gen_session, BlipConfig, GroundTruth, SynthConfig, REFERENCE_NOISE};
use reach_server::ServerConfig;

use crate::args::*;
use crate::paths::{self, record_run, UsageError};

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading session {}", path.display()))
}

/// Class count from the truth sidecar when there is one, otherwise from the
/// largest direction label in the frames.
fn n_classes_of(ds: &Dataset) -> Result<usize> {
    if let Some(t) = &ds.truth {
        return Ok(t.n_directions);
    }
    let max = ds
        .frames
        .iter()
        .filter_map(|f| f.label.and_then(|l| l.direction()))
        .max()
        .ok_or_else(|| UsageError("session carries no direction labels and has no truth sidecar".into()))?;
    Ok(max as usize)
}

fn train_config(m: &ModelArgs, n_classes: usize) -> Result<TrainConfig> {
    if !(0.0..=1.0).contains(&m.target_acc) {
        return Err(UsageError(format!("--target-acc must lie in [0, 1], got {}", m.target_acc)).into());
    }
    if m.folds < 2 {
        return Err(UsageError("--folds must be at least 2".into()).into());
    }
    Ok(TrainConfig {
        folds: m.folds,
        seed: m.seed,
        target_accuracy: m.target_acc,
        tune_onset: m.tune_onset.into(),
        ..TrainConfig::new(m.variant, n_classes)
    })
}

fn frontier_bytes(rows: &[FrontierRow]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_frontier(rows, &mut buf)?;
    Ok(buf)
}

fn describe_row(r: &FrontierRow) -> String {
    format!(
        "th_r {:.2}, th_s {:.0}: accuracy {:.3} ± {:.3}, {:.3} s, {:.1}% of the reach, {:.1}% aborted",
        r.th_r,
        r.th_s,
        r.mean_acc,
        r.std_acc,
        r.mean_time_s,
        r.mean_pct_trajectory,
        100.0 * r.abort_rate
    )
}

pub fn synth(a: SynthArgs) -> Result<()> {
    paths::output(&a.out, &[])?;
    let mut cfg = SynthConfig {
        reps: a.reps,
        seed: a.seed,
        noise: REFERENCE_NOISE.scaled(if a.noiseless { 0.0 } else { a.noise_scale }),
        ..SynthConfig::reference(a.directions)
    };
    if let Some(every) = a.blips {
        cfg.blips = Some(BlipConfig {
            every,
            peak_rad_s: a.blip_peak,
            ..BlipConfig::default()
        });
    }
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let (frames, truth) = gen_session(&cfg)?;
    save_session(&a.out, &frames, Some(&truth))?;
    let sha = store::file_sha256(&a.out)?;
    record_run(&a.out, "synth", &a, Some(&sha))?;
    println!(
        "wrote {} frames ({:.1} s), {} trials, {} blips to {}",
        frames.len(),
        frames.len() as f64 / cfg.sample_rate,
        truth.trials.len(),
        truth.blips.len(),
        a.out.display()
    );
    println!("truth: {}", store::truth_path(&a.out).display());
    println!("sha256: {sha}");
    Ok(())
}

pub fn segment(a: SegmentArgs) -> Result<()> {
    paths::input(&a.session)?;
    paths::output(&a.out, &[&a.session])?;
    let ds = load(&a.session)?;
    let params = reach_core::dsp::SegmentationParams::default();
    let segs = segment_session(&ds.frames, reach_core::frame::DEFAULT_RATE_HZ, &params)?;
    let mut csv = String::from("start,end,state,motion_role,direction\n");
    for s in &segs {
        let state = match s.state {
            SegmentState::Rest => "rest",
            SegmentState::Motion => "motion",
        };
        let role = match s.motion_role {
            MotionRole::Forward => "forward",
            MotionRole::Backward => "backward",
            MotionRole::None => "none",
        };
        let dir = s.direction.map(|d| d.to_string()).unwrap_or_default();
        writeln!(csv, "{},{},{state},{role},{dir}", s.start, s.end)?;
    }
    write_atomic(&a.out, csv.as_bytes())?;
    record_run(&a.out, "segment", &a, Some(&ds.sha256))?;
    let forward = segs.iter().filter(|s| s.motion_role == MotionRole::Forward).count();
    let backward = segs.iter().filter(|s| s.motion_role == MotionRole::Backward).count();
    println!(
        "{} intervals: {forward} forward, {backward} backward reaches -> {}",
        segs.len(),
        a.out.display()
    );
    if let Some(t) = &ds.truth {
        print_onset_lag(&segs, t);
    }
    Ok(())
}

fn print_onset_lag(segs: &[reach_core::dsp::SegmentInterval], truth: &GroundTruth) {
    let lags: Vec<i64> = segs
        .iter()
        .filter(|s| s.motion_role == MotionRole::Forward)
        .filter_map(|s| {
            truth
                .trials
                .iter()
                .filter(|tr| s.start < tr.forward_end && tr.forward_start < s.end)
                .map(|tr| s.start as i64 - tr.forward_start as i64)
                .next()
        })
        .collect();
    if lags.is_empty() {
        return;
    }
    let mean = lags.iter().sum::<i64>() as f64 / lags.len() as f64;
    let max = lags.iter().map(|l| l.abs()).max().unwrap_or(0);
    println!("onset lag vs truth: mean {mean:.1} samples, max |lag| {max} samples");
}

pub fn train(a: TrainArgs) -> Result<()> {
    paths::input(&a.model.session)?;
    paths::outputs(&[Some(&a.out), a.frontier.as_ref()], &[&a.model.session])?;
    let ds = load(&a.model.session)?;
    let cfg = train_config(&a.model, n_classes_of(&ds)?)?;
    let t0 = Instant::now();
    let mut out = train_bundle(&ds.frames, &ds.sha256, &cfg)?;
    let prov = &mut out.bundle.provenance;
    prov.created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    if let Some(f) = &a.frontier {
        prov.frontier_file = Some(f.display().to_string());
        write_atomic(f, &frontier_bytes(&out.tune.frontier)?)?;
    }
    save_bundle(&out.bundle, &a.out)?;
    record_run(&a.out, "train", &a, Some(&ds.sha256))?;

    let b = &out.bundle;
    println!("trained {} on {} reaches in {:.1} s", cfg.variant, out.prepared.reaches.len(), t0.elapsed().as_secs_f64());
    println!(
        "classes {}, feature dim {}, mixture components {:?}",
        b.n_classes(),
        b.direction.dim,
        b.direction.mixtures.iter().map(|m| m.components.len()).collect::<Vec<_>>()
    );
    println!("FSM X = {} samples, Y = {} samples", b.fsm.x, b.fsm.y);
    for p in [30, 50, 80] {
        if let Some(acc) = accuracy_at(&out.cv.curve, p) {
            println!("cv accuracy at {p}%: {acc:.3}");
        }
    }
    println!("thresholds: {}", describe_row(&out.tune.selected_row));
    if !out.tune.target_met {
        println!("warning: no cell reached {:.2}; kept the most accurate one", cfg.target_accuracy);
    }
    println!("bundle: {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TuneReport<'a> {
    stopping: &'a StoppingConfig,
    selected: &'a FrontierRow,
    target_met: bool,
    tune_onset: TuneOnset,
    cv_curve: &'a [reach_core::pipeline::CurvePoint],
}

pub fn tune(a: TuneArgs) -> Result<()> {
    paths::input(&a.model.session)?;
    paths::outputs(&[Some(&a.out), Some(&a.frontier)], &[&a.model.session])?;
    if a.out == a.frontier {
        return Err(UsageError("--out and --frontier must differ".into()).into());
    }
    let ds = load(&a.model.session)?;
    let cfg = train_config(&a.model, n_classes_of(&ds)?)?;
    let prepared = prepare(&ds.frames, &cfg)?;
    let onsets = match cfg.tune_onset {
        TuneOnset::Live => {
            let hmm = train_hmm(&ds.frames, &cfg)?;
            Some(live_onsets(
                &ds.frames,
                &hmm.model,
                mean_gyro_norms(&ds.frames),
                &prepared.reaches,
                prepared.fsm.x,
                cfg.sample_rate,
            )?)
        }
        TuneOnset::Segmented => None,
    };
    let cv = cross_validate(&ds.frames, &prepared.reaches, &cfg, prepared.fsm.y, onsets.as_deref())?;
    let tune = grid_search(
        &cv.evidence,
        cfg.n_classes,
        &cfg.grid,
        cfg.target_accuracy,
        prepared.fsm.y,
        cfg.sample_rate,
        cfg.sum_mode,
    )?;
    write_atomic(&a.frontier, &frontier_bytes(&tune.frontier)?)?;
    save_json(
        &TuneReport {
            stopping: &tune.selected,
            selected: &tune.selected_row,
            target_met: tune.target_met,
            tune_onset: cfg.tune_onset,
            cv_curve: &cv.curve,
        },
        &a.out,
    )?;
    record_run(&a.out, "tune", &a, Some(&ds.sha256))?;
    println!("{} cells evaluated on {} held-out reaches", tune.frontier.len(), cv.evidence.len());
    println!("selected: {}", describe_row(&tune.selected_row));
    println!(
        "target {:.2} {}",
        cfg.target_accuracy,
        if tune.target_met { "met" } else { "not met; kept the most accurate cell" }
    );
    Ok(())
}

#[derive(Serialize)]
struct VariantSummary {
    variant: Variant,
    acc_at_30: f64,
    acc_at_50: f64,
    acc_at_80: f64,
    mean_10_50: f64,
    feature_dim: usize,
    seconds: f64,
}

#[derive(Serialize)]
struct SessionSummary {
    session: String,
    n_classes: usize,
    reaches: usize,
    variants: Vec<VariantSummary>,
    /// Fastest stopping cell meeting the target on FDA evidence, if FDA ran.
    stopping: Option<FrontierRow>,
    stopping_target_met: Option<bool>,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    for s in &a.session {
        paths::input(s)?;
    }
    let inputs: Vec<&Path> = a.session.iter().map(PathBuf::as_path).collect();
    paths::outputs(&[Some(&a.out), a.summary.as_ref()], &inputs)?;
    let variants: Vec<Variant> = if a.variants.is_empty() { Variant::ALL.to_vec() } else { a.variants.clone() };

    let mut sessions: Vec<(String, Vec<SampleFrame>, usize)> = Vec::new();
    if a.session.is_empty() {
        for l in [4, 8] {
            let (frames, _) = gen_session(&SynthConfig::reference(l))?;
            sessions.push((format!("reference-L{l}"), frames, l));
        }
    } else {
        for p in &a.session {
            let ds = load(p)?;
            let l = n_classes_of(&ds)?;
            sessions.push((p.display().to_string(), ds.frames, l));
        }
    }

    let mut table = String::from("session,n_classes,variant,percent,mean_acc,std_acc\n");
    let mut summaries = Vec::new();
    for (name, frames, l) in &sessions {
        let base = TrainConfig {
            folds: a.folds,
            seed: a.seed,
            target_accuracy: a.target_acc,
            ..TrainConfig::new(Variant::Fda, *l)
        };
        let reaches = prepare(frames, &base)?.reaches.len();
        let mut vs = Vec::new();
        let mut fda: Option<CvResult> = None;
        for &v in &variants {
            let t0 = Instant::now();
            let cv = evaluate_variants(frames, &[v], &base)?.pop().expect("one result per variant");
            let secs = t0.elapsed().as_secs_f64();
            for p in &cv.curve {
                writeln!(table, "{name},{l},{v},{},{:.6},{:.6}", p.percent, p.mean_acc, p.std_acc)?;
            }
            let at = |p| accuracy_at(&cv.curve, p).unwrap_or(f64::NAN);
            vs.push(VariantSummary {
                variant: v,
                acc_at_30: at(30),
                acc_at_50: at(50),
                acc_at_80: at(80),
                mean_10_50: mean_accuracy_between(&cv.curve, 10, 50),
                feature_dim: cv.feature_dim,
                seconds: secs,
            });
            info!("{name} {v}: {secs:.1} s");
            if v == Variant::Fda {
                fda = Some(cv);
            }
        }
        let tuned = match &fda {
            Some(cv) => {
                let p = prepare(frames, &base)?;
                Some(grid_search(
                    &cv.evidence,
                    *l,
                    &base.grid,
                    a.target_acc,
                    p.fsm.y,
                    base.sample_rate,
                    base.sum_mode,
                )?)
            }
            None => None,
        };
        summaries.push(SessionSummary {
            session: name.clone(),
            n_classes: *l,
            reaches,
            variants: vs,
            stopping: tuned.as_ref().map(|t| t.selected_row.clone()),
            stopping_target_met: tuned.as_ref().map(|t| t.target_met),
        });
    }
    write_atomic(&a.out, table.as_bytes())?;
    record_run(&a.out, "eval", &a, None)?;
    if let Some(s) = &a.summary {
        save_json(&summaries, s)?;
    }

    for s in &summaries {
        println!("{} ({} classes, {} reaches)", s.session, s.n_classes, s.reaches);
        println!("  {:<8} {:>7} {:>7} {:>7} {:>9} {:>6} {:>8}", "variant", "acc@30", "acc@50", "acc@80", "mean10-50", "dim", "time_s");
        for v in &s.variants {
            println!(
                "  {:<8} {:>7.3} {:>7.3} {:>7.3} {:>9.3} {:>6} {:>8.1}",
                v.variant.name(),
                v.acc_at_30,
                v.acc_at_50,
                v.acc_at_80,
                v.mean_10_50,
                v.feature_dim,
                v.seconds
            );
        }
        if let (Some(r), Some(met)) = (&s.stopping, s.stopping_target_met) {
            println!("  stopping (fda, target {:.2}{}): {}", a.target_acc, if met { "" } else { ", not met" }, describe_row(r));
        }
    }
    println!("table: {}", a.out.display());
    Ok(())
}

pub fn replay(a: ReplayArgs) -> Result<()> {
    paths::input(&a.bundle)?;
    paths::input(&a.session)?;
    if !(a.speed >= 0.0 && a.speed.is_finite()) {
        return Err(UsageError(format!("--speed must be a finite non-negative number, got {}", a.speed)).into());
    }
    paths::outputs(&[a.events.as_ref(), a.log.as_ref(), a.metrics.as_ref()], &[&a.bundle, &a.session])?;
    let bundle = load_bundle(&a.bundle).with_context(|| format!("loading bundle {}", a.bundle.display()))?;
    let ds = load(&a.session)?;
    if ds.frames.is_empty() {
        bail!("session {} has no frames", a.session.display());
    }

    if a.speed > 0.0 {
        paced(&bundle, &ds.frames, a.speed)?;
    }
    let opts = ReplayOptions {
        reset_on_error: !a.no_reset,
        ..ReplayOptions::default()
    };
    let report = replay_session(&bundle, &ds.frames, ds.truth.as_ref(), &opts)?;

    if let Some(p) = &a.events {
        let mut s = String::new();
        for e in &report.events {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        write_atomic(p, s.as_bytes())?;
        record_run(p, "replay", &a, Some(&ds.sha256))?;
    }
    let lines = transition_log(&report.events);
    if let Some(p) = &a.log {
        let mut s = lines.join("\n");
        s.push('\n');
        write_atomic(p, s.as_bytes())?;
    }
    if let Some(p) = &a.metrics {
        save_json(&serde_json::json!({ "latency": report.latency, "metrics": report.metrics }), p)?;
    }

    println!("{} frames, {} transitions", ds.frames.len(), lines.len());
    let lat = &report.latency;
    println!("latency per frame: mean {:.4} ms, p50 {:.4} ms, p99 {:.4} ms, max {:.4} ms", lat.mean_ms, lat.p50_ms, lat.p99_ms, lat.max_ms);
    match &report.metrics {
        Some(m) => {
            println!(
                "commands: {}/{} correct over {} trials (accuracy {:.3}, precision {:.3})",
                m.commands_correct, m.commands_issued, m.trials, m.direction_accuracy, m.command_precision
            );
            println!("mean stop: {:.3} s, {:.1}% of the reach", m.mean_stop_s, m.mean_stop_pct_trajectory);
            println!("intention accuracy: {:.3}", m.hmm_accuracy);
            println!(
                "erroneous transitions: {}/{} ({:.2}%), blips filtered {}, timeouts {}, resets {}",
                m.erroneous_transitions,
                m.expected_transitions,
                100.0 * m.erroneous_rate,
                m.filtered_blips,
                m.timeouts,
                m.resets
            );
        }
        None => println!("no truth sidecar; transitions are not judged"),
    }
    Ok(())
}

/// Streams frames at `speed` times real time and prints transitions as they
/// happen.
fn paced(bundle: &store::ModelBundle, frames: &[SampleFrame], speed: f64) -> Result<()> {
    let mut engine = SessionEngine::new(bundle.clone())?;
    let t0 = frames[0].t;
    let start = Instant::now();
    for f in frames {
        let due = Duration::from_secs_f64(((f.t - t0) / speed).max(0.0));
        if let Some(wait) = due.checked_sub(start.elapsed()) {
            std::thread::sleep(wait);
        }
        let events = engine.try_ingest(f)?;
        for line in transition_log(&events) {
            println!("{line}");
        }
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let mut bundles = BTreeMap::new();
    let mut first = None;
    for spec in &a.bundles {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .ok_or_else(|| UsageError(format!("cannot name bundle '{spec}'")))?;
                (stem, p)
            }
        };
        paths::input(&path)?;
        let b = load_bundle(&path).with_context(|| format!("loading bundle {}", path.display()))?;
        first.get_or_insert_with(|| name.clone());
        if bundles.insert(name.clone(), b).is_some() {
            return Err(UsageError(format!("bundle name '{name}' given twice")).into());
        }
    }
    let default = a.default.clone().or(first);
    if let Some(d) = &default {
        if !bundles.contains_key(d) {
            return Err(UsageError(format!("--default '{d}' names no loaded bundle")).into());
        }
    }
    let config = ServerConfig {
        bundles,
        default_bundle: default,
        heartbeat: Duration::from_millis(a.heartbeat_ms.max(1)),
        broadcast_capacity: 4096,
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(reach_server::bind_and_serve(a.addr, config, |addr| {
        println!("listening on ws://{addr}/ws");
    }))?;
    Ok(())
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    if let Some(o) = &a.out {
        paths::output(o, &[])?;
    }
    if a.scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(UsageError("noise scales must be finite and non-negative".into()).into());
    }
    let mut rows = Vec::new();
    println!("{:>7} {:>7} {:>7}", "scale", "acc@30", "acc@80");
    for &k in &a.scales {
        let cfg = SynthConfig {
            reps: a.reps,
            seed: a.seed,
            noise: REFERENCE_NOISE.scaled(k),
            ..SynthConfig::reference(a.directions)
        };
        cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        let (frames, _) = gen_session(&cfg)?;
        let base = TrainConfig::new(Variant::Fda, a.directions);
        let cv = evaluate_variants(&frames, &[Variant::Fda], &base)?.pop().expect("one result");
        let acc30 = accuracy_at(&cv.curve, 30).unwrap_or(f64::NAN);
        let acc80 = accuracy_at(&cv.curve, 80).unwrap_or(f64::NAN);
        println!("{k:>7.3} {acc30:>7.3} {acc80:>7.3}");
        rows.push((k, acc30, acc80));
    }
    let best = rows
        .iter()
        .min_by(|x, y| (x.1 - a.target_acc30).abs().total_cmp(&(y.1 - a.target_acc30).abs()))
        .context("no scales given")?;
    println!("closest to acc@30 = {:.2}: scale {:.3} ({:.3})", a.target_acc30, best.0, best.1);
    if let Some(o) = &a.out {
        let mut s = String::from("scale,acc30,acc80\n");
        for (k, a30, a80) in &rows {
            writeln!(s, "{k},{a30:.6},{a80:.6}")?;
        }
        write_atomic(o, s.as_bytes())?;
        record_run(o, "calibrate", &a, None)?;
    }
    Ok(())
}
