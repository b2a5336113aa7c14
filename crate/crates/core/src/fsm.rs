//! The five-state controller that turns intention and direction decisions
//! into robot commands.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::intention::Intention;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FsmState {
    Home,
    EvidenceAccumulation,
    SendCommand,
    OnTarget,
    BackMovement,
}

impl FsmState {
    pub const ALL: [FsmState; 5] = [
        FsmState::Home,
        FsmState::EvidenceAccumulation,
        FsmState::SendCommand,
        FsmState::OnTarget,
        FsmState::BackMovement,
    ];

    pub fn short(self) -> &'static str {
        match self {
            FsmState::Home => "H",
            FsmState::EvidenceAccumulation => "EA",
            FsmState::SendCommand => "SC",
            FsmState::OnTarget => "OT",
            FsmState::BackMovement => "BM",
        }
    }
}

impl fmt::Display for FsmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// Why a transition fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    MotionDetected,
    StopCriteria,
    /// `a(0)`: X consecutive REST samples.
    RestDebounce,
    /// `b(1)`: accumulation ran past Y samples.
    Timeout,
    CommandSent,
    /// `a(1)`: X consecutive MOTION samples.
    MotionDebounce,
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "direction")]
pub enum CommandKind {
    GoToTarget(u8),
    GoHome,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotCommand {
    pub kind: CommandKind,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub t: f64,
    pub from: FsmState,
    pub to: FsmState,
    pub trigger: Trigger,
}

impl Transition {
    /// One log line: `t, from, trigger, to, command`.
    pub fn log_line(&self, command: Option<&RobotCommand>) -> String {
        let cmd = match command.map(|c| c.kind) {
            Some(CommandKind::GoToTarget(d)) => format!("GO_TO_TARGET({d})"),
            Some(CommandKind::GoHome) => "GO_HOME".to_string(),
            None => "-".to_string(),
        };
        format!("{:.2},{},{:?},{},{}", self.t, self.from, self.trigger, self.to, cmd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsmConfig {
    /// Debounce length in samples.
    pub x: usize,
    /// Accumulation timeout in samples.
    pub y: usize,
}

impl FsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.x == 0 || self.y == 0 {
            return Err(Error::InvalidConfig("FSM X and Y must be at least 1".into()));
        }
        Ok(())
    }
}

/// `X = round(fx * mean rest length)`, `Y = round(fy * mean motion length)`, both at least 1.
pub fn derive_config(rest_lengths: &[usize], motion_lengths: &[usize], fx: f64, fy: f64) -> Result<FsmConfig> {
    if rest_lengths.is_empty() || motion_lengths.is_empty() {
        return Err(Error::InsufficientData("FSM config needs rest and motion segments".into()));
    }
    let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len() as f64;
    let x = (fx * mean(rest_lengths)).round().max(1.0) as usize;
    let y = (fy * mean(motion_lengths)).round().max(1.0) as usize;
    Ok(FsmConfig { x, y })
}

/// Direction-thread input for one FSM step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopSignal {
    Pending,
    Stop(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerState {
    pub state: FsmState,
    pub rest_count: usize,
    pub motion_count: usize,
    /// Samples since entering evidence accumulation, the entry sample included.
    pub accum_count: usize,
    pub pending: Option<u8>,
    /// Set in ON_TARGET once the hand has rested for X samples.
    pub arrived: bool,
}

impl Default for ControllerState {
    fn default() -> Self {
        ControllerState {
            state: FsmState::Home,
            rest_count: 0,
            motion_count: 0,
            accum_count: 0,
            pending: None,
            arrived: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepOutput {
    pub transition: Option<Transition>,
    pub command: Option<RobotCommand>,
}

impl ControllerState {
    pub fn reset(&mut self) {
        *self = ControllerState::default();
    }

    fn go(&mut self, t: f64, to: FsmState, trigger: Trigger) -> Transition {
        let from = self.state;
        let pending = if to == FsmState::SendCommand { self.pending } else { None };
        *self = ControllerState {
            state: to,
            pending,
            // Entering accumulation consumes the onset sample.
            accum_count: usize::from(to == FsmState::EvidenceAccumulation),
            ..ControllerState::default()
        };
        Transition { t, from, to, trigger }
    }

    fn count(&mut self, intention: Intention) {
        match intention {
            Intention::Rest => {
                self.rest_count += 1;
                self.motion_count = 0;
            }
            Intention::Motion => {
                self.motion_count += 1;
                self.rest_count = 0;
            }
        }
    }

    /// Advances the controller by one sample.
    ///
    /// In accumulation the priority is stop criteria, then the REST debounce,
    /// then the timeout. `stop` is ignored outside accumulation.
    pub fn step(&mut self, t: f64, intention: Intention, stop: StopSignal, cfg: &FsmConfig) -> StepOutput {
        let mut out = StepOutput::default();
        match self.state {
            FsmState::Home => {
                if intention == Intention::Motion {
                    out.transition = Some(self.go(t, FsmState::EvidenceAccumulation, Trigger::MotionDetected));
                }
            }
            FsmState::EvidenceAccumulation => {
                self.count(intention);
                self.accum_count += 1;
                if let StopSignal::Stop(d) = stop {
                    self.pending = Some(d);
                    out.transition = Some(self.go(t, FsmState::SendCommand, Trigger::StopCriteria));
                } else if self.rest_count >= cfg.x {
                    out.transition = Some(self.go(t, FsmState::Home, Trigger::RestDebounce));
                } else if self.accum_count > cfg.y {
                    out.transition = Some(self.go(t, FsmState::OnTarget, Trigger::Timeout));
                }
            }
            FsmState::SendCommand => {
                let d = self.pending.expect("SEND_COMMAND always carries a direction");
                out.command = Some(RobotCommand {
                    kind: CommandKind::GoToTarget(d),
                    t,
                });
                out.transition = Some(self.go(t, FsmState::OnTarget, Trigger::CommandSent));
            }
            FsmState::OnTarget => {
                self.count(intention);
                if !self.arrived {
                    if self.rest_count >= cfg.x {
                        self.arrived = true;
                    }
                } else if self.motion_count >= cfg.x {
                    out.command = Some(RobotCommand {
                        kind: CommandKind::GoHome,
                        t,
                    });
                    out.transition = Some(self.go(t, FsmState::BackMovement, Trigger::MotionDebounce));
                }
            }
            FsmState::BackMovement => {
                self.count(intention);
                if self.rest_count >= cfg.x {
                    out.transition = Some(self.go(t, FsmState::Home, Trigger::RestDebounce));
                }
            }
        }
        out
    }
}
