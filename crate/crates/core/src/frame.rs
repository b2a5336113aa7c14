//! Sensor frame layout shared by the generator, the session files and the live engine.
//!
//! A frame carries the two inertial units (arm, forearm) and the 16 muscle-activity
//! envelopes of the two bands. The flat feature vector always uses the order
//! `gyro_arm, gyro_forearm, accel_arm, accel_forearm, emg[0..16]`, so the inertial
//! block is `0..12` and the EMG block is `12..28`.

use serde::{Deserialize, Serialize};

pub const N_EMG: usize = 16;
pub const N_IMU: usize = 12;
pub const N_CHANNELS: usize = N_IMU + N_EMG;
pub const DEFAULT_RATE_HZ: f64 = 100.0;

/// Ground-truth annotation of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Rest,
    /// Reach direction, 1-based class index.
    Direction(u8),
}

impl Label {
    pub fn direction(self) -> Option<u8> {
        match self {
            Label::Rest => None,
            Label::Direction(d) => Some(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFrame {
    pub t: f64,
    pub gyro_arm: [f64; 3],
    pub gyro_forearm: [f64; 3],
    pub accel_arm: [f64; 3],
    pub accel_forearm: [f64; 3],
    pub emg: [f64; N_EMG],
    #[serde(default)]
    pub label: Option<Label>,
    #[serde(default)]
    pub trial_id: u32,
}

impl SampleFrame {
    pub fn at_rest(t: f64) -> Self {
        SampleFrame {
            t,
            gyro_arm: [0.0; 3],
            gyro_forearm: [0.0; 3],
            accel_arm: [0.0; 3],
            accel_forearm: [0.0; 3],
            emg: [0.0; N_EMG],
            label: None,
            trial_id: 0,
        }
    }

    /// The full 28-channel feature vector.
    pub fn features(&self) -> [f64; N_CHANNELS] {
        let mut out = [0.0; N_CHANNELS];
        out[0..3].copy_from_slice(&self.gyro_arm);
        out[3..6].copy_from_slice(&self.gyro_forearm);
        out[6..9].copy_from_slice(&self.accel_arm);
        out[9..12].copy_from_slice(&self.accel_forearm);
        out[12..].copy_from_slice(&self.emg);
        out
    }

    pub fn gyro_norms(&self) -> (f64, f64) {
        (norm3(&self.gyro_arm), norm3(&self.gyro_forearm))
    }
}

pub(crate) fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Subset of the 28 channels a reducer consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelSelector {
    All,
    ImuOnly,
    EmgOnly,
}

impl ChannelSelector {
    pub fn range(self) -> std::ops::Range<usize> {
        match self {
            ChannelSelector::All => 0..N_CHANNELS,
            ChannelSelector::ImuOnly => 0..N_IMU,
            ChannelSelector::EmgOnly => N_IMU..N_CHANNELS,
        }
    }

    pub fn width(self) -> usize {
        self.range().len()
    }

    pub fn select<'a>(self, features: &'a [f64]) -> &'a [f64] {
        &features[self.range()]
    }
}
