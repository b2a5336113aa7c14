//! The live session engine and offline replay.
//!
//! Each frame passes through the causal velocity filter and one HMM forward
//! step. While the controller accumulates evidence the frame is also reduced,
//! scored and accumulated, and the stopping rule is checked. Events carry
//! frame timestamps only, so replaying the same frames reproduces the same log.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accumulate::{AccumulatorState, StopDecision, StoppingConfig};
use crate::dsp::{velocity_bandpass, VelocityObservable};
use crate::error::{Error, Result};
use crate::frame::SampleFrame;
use crate::fsm::{CommandKind, ControllerState, FsmState, StopSignal, Trigger};
use crate::intention::{forward_step, predict_intention, Intention, IntentionBelief};
use crate::mixture::{normalize_over_classes, ClassScorer};
use crate::store::ModelBundle;
use crate::synth::GroundTruth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    State {
        state: FsmState,
        intention: Intention,
    },
    Intention {
        intention: Intention,
        p_motion: f64,
    },
    Probability {
        alpha: Vec<f64>,
        c_r: f64,
        c_s: f64,
        samples: usize,
    },
    Transition {
        from: FsmState,
        to: FsmState,
        trigger: Trigger,
    },
    Command {
        command: CommandKind,
    },
    Abort {
        reason: String,
    },
    Reset,
    Error {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineEvent {
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Events produced by one frame plus the time it took to process it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestBatch {
    pub events: Vec<EngineEvent>,
    pub latency_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: Option<f64>,
    pub state: FsmState,
    pub intention: Intention,
    pub p_motion: f64,
    pub accumulated: usize,
}

pub struct SessionEngine {
    bundle: ModelBundle,
    scorer: ClassScorer,
    stopping: StoppingConfig,
    velocity: VelocityObservable,
    belief: IntentionBelief,
    intention: Intention,
    accumulator: Option<AccumulatorState>,
    /// Stop decision reached on the onset frame, consumed by the next FSM step.
    carry: Option<u8>,
    controller: ControllerState,
    last_t: Option<f64>,
}

impl SessionEngine {
    pub fn new(bundle: ModelBundle) -> Result<Self> {
        bundle.validate()?;
        let scorer = bundle.direction.scorer()?;
        let stopping = bundle
            .direction
            .stopping
            .ok_or_else(|| Error::InvalidModel("bundle has no stopping thresholds".into()))?;
        let belief = IntentionBelief::from_model(&bundle.hmm);
        Ok(SessionEngine {
            scorer,
            stopping,
            velocity: VelocityObservable::with_level(velocity_bandpass(crate::frame::DEFAULT_RATE_HZ), bundle.velocity_level),
            belief,
            intention: Intention::Rest,
            accumulator: None,
            carry: None,
            controller: ControllerState::default(),
            last_t: None,
            bundle,
        })
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            t: self.last_t,
            state: self.controller.state,
            intention: self.intention,
            p_motion: self.belief.p[1],
            accumulated: self.accumulator.as_ref().map_or(0, |a| a.t),
        }
    }

    /// The state broadcast sent to newly attached observers.
    pub fn state_event(&self) -> EngineEvent {
        EngineEvent {
            t: self.last_t.unwrap_or(0.0),
            kind: EventKind::State {
                state: self.controller.state,
                intention: self.intention,
            },
        }
    }

    /// Back to HOME with the accumulator cleared. Filter and HMM state are
    /// kept because the sensors keep streaming.
    pub fn reset(&mut self) -> Vec<EngineEvent> {
        let t = self.last_t.unwrap_or(0.0);
        let mut events = vec![EngineEvent { t, kind: EventKind::Reset }];
        if self.controller.state != FsmState::Home {
            events.push(EngineEvent {
                t,
                kind: EventKind::Transition {
                    from: self.controller.state,
                    to: FsmState::Home,
                    trigger: Trigger::Reset,
                },
            });
        }
        self.controller.reset();
        self.accumulator = None;
        self.carry = None;
        events
    }

    fn accumulate(&mut self, frame: &SampleFrame, events: &mut Vec<EngineEvent>) -> Result<StopDecision> {
        let z = self.bundle.reducer.transform(&frame.features())?;
        let lp = self.scorer.log_pdf(&z)?;
        let rho = normalize_over_classes(&lp);
        let acc = self
            .accumulator
            .get_or_insert_with(|| AccumulatorState::new(self.scorer.n_classes(), frame.t));
        acc.step_with_density(&rho, lp.iter().map(|v| v.exp()).sum());
        events.push(EngineEvent {
            t: frame.t,
            kind: EventKind::Probability {
                alpha: acc.alpha_norm.clone(),
                c_r: acc.ratio_criterion(),
                c_s: acc.sum_criterion(self.stopping.sum_mode),
                samples: acc.t,
            },
        });
        Ok(acc.should_stop(&self.stopping))
    }

    /// Processes one frame. Out-of-order frames are rejected with an error event.
    pub fn ingest(&mut self, frame: &SampleFrame) -> Vec<EngineEvent> {
        match self.try_ingest(frame) {
            Ok(events) => events,
            Err(e) => vec![EngineEvent {
                t: frame.t,
                kind: EventKind::Error { message: e.to_string() },
            }],
        }
    }

    pub fn ingest_timed(&mut self, frame: &SampleFrame) -> IngestBatch {
        let start = Instant::now();
        let events = self.ingest(frame);
        IngestBatch {
            events,
            latency_ns: start.elapsed().as_nanos() as u64,
        }
    }

    pub fn try_ingest(&mut self, frame: &SampleFrame) -> Result<Vec<EngineEvent>> {
        if let Some(last) = self.last_t {
            if !(frame.t > last) {
                return Err(Error::OutOfOrder { t: frame.t, last });
            }
        }
        if !frame.features().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        self.last_t = Some(frame.t);
        let t = frame.t;
        let mut events = Vec::new();

        let x = self.velocity.step(frame);
        self.belief = forward_step(&self.bundle.hmm, &self.belief, x);
        let intention = predict_intention(&self.belief);
        if intention != self.intention {
            self.intention = intention;
            events.push(EngineEvent {
                t,
                kind: EventKind::Intention {
                    intention,
                    p_motion: self.belief.p[1],
                },
            });
        }

        let stop = match self.controller.state {
            // Evidence only accumulates while MOTION holds, so a short blip
            // cannot reach the sum threshold before the REST debounce.
            FsmState::EvidenceAccumulation => match self.carry.take() {
                Some(d) => StopSignal::Stop(d),
                None if intention == Intention::Motion => match self.accumulate(frame, &mut events)? {
                    StopDecision::Stop(d) => StopSignal::Stop(d),
                    _ => StopSignal::Pending,
                },
                None => StopSignal::Pending,
            },
            FsmState::Home if intention == Intention::Motion => {
                // The onset frame is the first accumulated sample.
                self.accumulator = Some(AccumulatorState::new(self.scorer.n_classes(), t));
                if let StopDecision::Stop(d) = self.accumulate(frame, &mut events)? {
                    self.carry = Some(d);
                }
                StopSignal::Pending
            }
            _ => StopSignal::Pending,
        };

        let out = self.controller.step(t, intention, stop, &self.bundle.fsm);
        if let Some(tr) = out.transition {
            events.push(EngineEvent {
                t,
                kind: EventKind::Transition {
                    from: tr.from,
                    to: tr.to,
                    trigger: tr.trigger,
                },
            });
            if tr.from == FsmState::EvidenceAccumulation {
                self.accumulator = None;
                self.carry = None;
                let reason = match tr.trigger {
                    Trigger::Timeout => Some("accumulation timed out without a confident direction"),
                    Trigger::RestDebounce => Some("motion ended before a direction was chosen"),
                    _ => None,
                };
                if let Some(r) = reason {
                    events.push(EngineEvent {
                        t,
                        kind: EventKind::Abort { reason: r.into() },
                    });
                }
            }
        }
        if let Some(cmd) = out.command {
            events.push(EngineEvent {
                t,
                kind: EventKind::Command { command: cmd.kind },
            });
        }
        Ok(events)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyStats {
    pub frames: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_ns(samples: &[u64]) -> Self {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        let mut v: Vec<u64> = samples.to_vec();
        v.sort_unstable();
        let q = |p: f64| v[((p * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)] as f64 / 1e6;
        LatencyStats {
            frames: v.len(),
            mean_ms: v.iter().sum::<u64>() as f64 / v.len() as f64 / 1e6,
            p50_ms: q(0.5),
            p99_ms: q(0.99),
            max_ms: *v.last().unwrap() as f64 / 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReplayMetrics {
    pub trials: usize,
    pub commands_issued: usize,
    pub commands_correct: usize,
    /// Correct commands over all trials.
    pub direction_accuracy: f64,
    /// Correct commands over issued commands.
    pub command_precision: f64,
    pub mean_stop_s: f64,
    pub mean_stop_pct_trajectory: f64,
    pub hmm_accuracy: f64,
    pub expected_transitions: usize,
    pub erroneous_transitions: usize,
    pub erroneous_rate: f64,
    /// EA entries at home that returned to HOME without a command.
    pub filtered_blips: usize,
    pub timeouts: usize,
    pub resets: usize,
    /// One line per erroneous transition: sample, transition, truth phase.
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub events: Vec<EngineEvent>,
    pub latency: LatencyStats,
    pub metrics: Option<ReplayMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayOptions {
    /// Reset the controller before the next trial after an erroneous transition.
    pub reset_on_error: bool,
    /// Slack around truth boundaries when judging transitions, seconds.
    pub tolerance_s: f64,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions {
            reset_on_error: true,
            tolerance_s: 0.3,
        }
    }
}

/// Where a reach's accumulation started.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Entry {
    Reach(usize),
    Blip,
}

struct Judge<'a> {
    truth: &'a GroundTruth,
    fs: f64,
    tol: usize,
    trial: usize,
    entry: Option<(Entry, usize)>,
    spoiled: bool,
    m: ReplayMetrics,
    stop_samples: Vec<f64>,
    stop_pct: Vec<f64>,
}

impl Judge<'_> {
    /// Trial whose forward window (with slack) holds sample `i`.
    fn reach_at(&self, i: usize) -> Option<usize> {
        self.truth
            .trials
            .iter()
            .position(|tr| i + self.tol >= tr.forward_start && i < tr.forward_end)
    }

    fn error(&mut self, i: usize, what: &str) {
        if !self.spoiled {
            self.m.erroneous_transitions += 1;
            self.m.errors.push(format!("{i} {what} during {:?}", self.truth.phase_at(i)));
            self.spoiled = true;
        }
    }

    fn observe(&mut self, i: usize, from: FsmState, to: FsmState, trigger: Trigger, command: Option<CommandKind>) {
        let trials = &self.truth.trials;
        let cur = &trials[self.trial.min(trials.len() - 1)];
        match (from, to) {
            (FsmState::Home, FsmState::EvidenceAccumulation) => {
                let entry = match self.reach_at(i) {
                    Some(k) => Entry::Reach(k),
                    None => {
                        if !matches!(self.truth.phase_at(i), crate::synth::Phase::HomeRest) {
                            self.error(i, "H->EA");
                        }
                        Entry::Blip
                    }
                };
                self.entry = Some((entry, i));
            }
            (FsmState::EvidenceAccumulation, FsmState::SendCommand) => {
                match self.entry {
                    Some((Entry::Reach(k), start)) if i < trials[k].backward_start => {
                        let tr = &trials[k];
                        self.stop_samples.push((i + 1 - start) as f64);
                        self.stop_pct.push(
                            100.0 * (i + 1).saturating_sub(tr.forward_start) as f64
                                / (tr.forward_end - tr.forward_start) as f64,
                        );
                    }
                    _ => self.error(i, "EA->SC"),
                }
            }
            (FsmState::SendCommand, FsmState::OnTarget) => {
                if let Some(CommandKind::GoToTarget(d)) = command {
                    self.m.commands_issued += 1;
                    if let Some((Entry::Reach(k), _)) = self.entry {
                        if trials[k].label == d {
                            self.m.commands_correct += 1;
                        }
                    }
                }
            }
            (FsmState::EvidenceAccumulation, FsmState::OnTarget) => {
                self.m.timeouts += 1;
                if !matches!(self.entry, Some((Entry::Reach(_), _))) {
                    self.error(i, "EA->OT");
                }
            }
            (FsmState::EvidenceAccumulation, FsmState::Home) if trigger == Trigger::RestDebounce => {
                match self.entry {
                    Some((Entry::Blip, _)) => self.m.filtered_blips += 1,
                    _ => self.error(i, "EA->H"),
                }
            }
            (FsmState::OnTarget, FsmState::BackMovement) => {
                if !(i >= cur.backward_start && i < cur.backward_end + self.tol) {
                    self.error(i, "OT->BM");
                }
            }
            (FsmState::BackMovement, FsmState::Home) => {
                let next_start = trials.get(self.trial + 1).map_or(usize::MAX, |t| t.forward_start);
                if !(i >= cur.backward_start && i + self.tol < next_start) {
                    self.error(i, "BM->H");
                }
            }
            _ => {}
        }
    }
}

/// Replays `frames` through a fresh engine. With ground truth, every
/// transition is judged and, per `opts`, the controller is reset three
/// quarters into the home rest after a trial that went wrong.
pub fn replay(bundle: &ModelBundle, frames: &[SampleFrame], truth: Option<&GroundTruth>, opts: &ReplayOptions) -> Result<ReplayReport> {
    let mut engine = SessionEngine::new(bundle.clone())?;
    let fs = crate::frame::DEFAULT_RATE_HZ;
    let mut events = Vec::with_capacity(frames.len() / 4);
    let mut latencies = Vec::with_capacity(frames.len());
    let mut judge = truth.filter(|t| !t.trials.is_empty()).map(|t| Judge {
        truth: t,
        fs,
        tol: (opts.tolerance_s * fs).round() as usize,
        trial: 0,
        entry: None,
        spoiled: false,
        m: ReplayMetrics {
            trials: t.trials.len(),
            expected_transitions: 4 * t.trials.len(),
            ..ReplayMetrics::default()
        },
        stop_samples: Vec::new(),
        stop_pct: Vec::new(),
    });
    let checkpoints: Vec<usize> = truth.map_or(Vec::new(), |t| {
        t.trials
            .windows(2)
            .map(|w| w[0].backward_end + 3 * (w[1].forward_start - w[0].backward_end) / 4)
            .collect()
    });
    let mut hmm_hits = 0usize;

    for (i, frame) in frames.iter().enumerate() {
        if let Some(j) = judge.as_mut() {
            if j.trial < checkpoints.len() && i == checkpoints[j.trial] {
                if engine.controller.state != FsmState::Home {
                    j.error(i, &format!("still {}", engine.controller.state));
                }
                if j.spoiled && opts.reset_on_error {
                    events.extend(engine.reset());
                    j.m.resets += 1;
                }
                j.trial += 1;
                j.spoiled = false;
                j.entry = None;
            }
        }
        let batch = engine.ingest_timed(frame);
        latencies.push(batch.latency_ns);
        if let Some(j) = judge.as_mut() {
            let truth_motion = j.truth.is_motion(i);
            hmm_hits += usize::from((engine.intention == Intention::Motion) == truth_motion);
            let command = batch.events.iter().find_map(|e| match e.kind {
                EventKind::Command { command } => Some(command),
                _ => None,
            });
            for e in &batch.events {
                if let EventKind::Transition { from, to, trigger } = e.kind {
                    j.observe(i, from, to, trigger, command);
                }
            }
        }
        events.extend(batch.events);
    }

    let metrics = judge.map(|mut j| {
        if engine.controller.state != FsmState::Home {
            j.error(frames.len().saturating_sub(1), &format!("ended in {}", engine.controller.state));
        }
        let m = &mut j.m;
        m.direction_accuracy = m.commands_correct as f64 / m.trials.max(1) as f64;
        m.command_precision = if m.commands_issued == 0 {
            0.0
        } else {
            m.commands_correct as f64 / m.commands_issued as f64
        };
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        m.mean_stop_s = mean(&j.stop_samples) / j.fs;
        m.mean_stop_pct_trajectory = mean(&j.stop_pct);
        m.hmm_accuracy = hmm_hits as f64 / frames.len().max(1) as f64;
        m.erroneous_rate = m.erroneous_transitions as f64 / m.expected_transitions.max(1) as f64;
        j.m
    });
    Ok(ReplayReport {
        events,
        latency: LatencyStats::from_ns(&latencies),
        metrics,
    })
}

/// Text log with one line per FSM transition.
pub fn transition_log(events: &[EngineEvent]) -> Vec<String> {
    let mut lines = Vec::new();
    for (k, e) in events.iter().enumerate() {
        if let EventKind::Transition { from, to, trigger } = e.kind {
            let command = events[k + 1..]
                .iter()
                .take_while(|n| n.t == e.t && !matches!(n.kind, EventKind::Transition { .. }))
                .find_map(|n| match n.kind {
                    EventKind::Command { command } => Some(command),
                    _ => None,
                });
            let tr = crate::fsm::Transition { t: e.t, from, to, trigger };
            let cmd = command.map(|kind| crate::fsm::RobotCommand { kind, t: e.t });
            lines.push(tr.log_line(cmd.as_ref()));
        }
    }
    lines
}
