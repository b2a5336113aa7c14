//! Digital filtering, the velocity-magnitude observable, EMG envelopes and offline
//! REST/MOTION segmentation.
//!
//! Filters are Butterworth designs realised as cascaded second-order sections in
//! transposed direct form II. Batch paths run them forward-backward for zero phase;
//! streaming paths run the identical coefficients once, causally.

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Label, SampleFrame};

type C64 = Complex<f64>;

/// One normalised biquad: `a[0]` is always 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        let den: f64 = self.a.iter().sum();
        let num: f64 = self.b.iter().sum();
        if num == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    fn response(&self, z_inv: C64) -> C64 {
        let z2 = z_inv * z_inv;
        let num = C64::new(self.b[0], 0.0) + z_inv * self.b[1] + z2 * self.b[2];
        let den = C64::new(self.a[0], 0.0) + z_inv * self.a[1] + z2 * self.a[2];
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterKind {
    BandPass,
    LowPass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Total filter order (number of poles).
    pub order: usize,
    pub cutoffs: Vec<f64>,
    pub sample_rate: f64,
    pub sections: Vec<Biquad>,
}

/// Butterworth band-pass of total order `order` (must be even).
pub fn design_bandpass(low: f64, high: f64, order: usize, fs: f64) -> Result<FilterSpec> {
    if !(low > 0.0 && low < high && high < fs / 2.0) {
        return Err(Error::InvalidCutoff(format!(
            "need 0 < low < high < fs/2, got low={low} high={high} fs={fs}"
        )));
    }
    if order == 0 || order % 2 != 0 {
        return Err(Error::InvalidCutoff(format!(
            "band-pass order must be even and positive, got {order}"
        )));
    }
    let n = order / 2;
    let fs2 = 2.0 * fs;
    let wl = prewarp(low, fs);
    let wh = prewarp(high, fs);
    let bw = wh - wl;
    let w0_sq = wl * wh;

    let mut analog_poles = Vec::with_capacity(order);
    for p in butter_prototype(n) {
        let half = p * (bw / 2.0);
        let disc = (half * half - C64::new(w0_sq, 0.0)).sqrt();
        analog_poles.push(half + disc);
        analog_poles.push(half - disc);
    }
    // n zeros at s = 0 map to z = 1, the remaining n at infinity map to z = -1.
    let mut gain = C64::new(bw.powi(n as i32), 0.0) * fs2.powi(n as i32);
    for &p in &analog_poles {
        gain /= C64::new(fs2, 0.0) - p;
    }
    let poles: Vec<C64> = analog_poles.iter().map(|&s| bilinear(s, fs2)).collect();
    let sections = pair_sections(&poles, [1.0, 0.0, -1.0], gain.re)?;
    Ok(FilterSpec {
        kind: FilterKind::BandPass,
        order,
        cutoffs: vec![low, high],
        sample_rate: fs,
        sections,
    })
}

/// Butterworth low-pass of order `order`.
pub fn design_lowpass(cutoff: f64, order: usize, fs: f64) -> Result<FilterSpec> {
    if !(cutoff > 0.0 && cutoff < fs / 2.0) {
        return Err(Error::InvalidCutoff(format!(
            "need 0 < cutoff < fs/2, got cutoff={cutoff} fs={fs}"
        )));
    }
    if order == 0 {
        return Err(Error::InvalidCutoff("order must be positive".into()));
    }
    let fs2 = 2.0 * fs;
    let wc = prewarp(cutoff, fs);
    let analog_poles: Vec<C64> = butter_prototype(order).into_iter().map(|p| p * wc).collect();
    let mut gain = C64::new(wc.powi(order as i32), 0.0);
    for &p in &analog_poles {
        gain /= C64::new(fs2, 0.0) - p;
    }
    let poles: Vec<C64> = analog_poles.iter().map(|&s| bilinear(s, fs2)).collect();
    let sections = pair_sections(&poles, [1.0, 2.0, 1.0], gain.re)?;
    Ok(FilterSpec {
        kind: FilterKind::LowPass,
        order,
        cutoffs: vec![cutoff],
        sample_rate: fs,
        sections,
    })
}

fn prewarp(f: f64, fs: f64) -> f64 {
    2.0 * fs * (std::f64::consts::PI * f / fs).tan()
}

fn bilinear(s: C64, fs2: f64) -> C64 {
    (C64::new(fs2, 0.0) + s) / (C64::new(fs2, 0.0) - s)
}

fn butter_prototype(n: usize) -> Vec<C64> {
    (0..n)
        .map(|k| {
            let theta = std::f64::consts::PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
            C64::new(theta.cos(), theta.sin())
        })
        .collect()
}

/// Groups conjugate pole pairs into biquads sharing the zero pattern `pair_zeros`
/// (`[1,0,-1]` for zeros at ±1, `[1,2,1]` for a double zero at -1).
fn pair_sections(poles: &[C64], pair_zeros: [f64; 3], gain: f64) -> Result<Vec<Biquad>> {
    for p in poles {
        if p.norm() >= 1.0 {
            return Err(Error::UnstableFilter(p.norm()));
        }
    }
    let mut upper: Vec<C64> = poles.iter().copied().filter(|p| p.im > 1e-12).collect();
    let mut real: Vec<f64> = poles
        .iter()
        .filter(|p| p.im.abs() <= 1e-12)
        .map(|p| p.re)
        .collect();
    upper.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    real.sort_by(f64::total_cmp);

    let mut sections: Vec<Biquad> = upper
        .iter()
        .map(|p| Biquad {
            b: pair_zeros,
            a: [1.0, -2.0 * p.re, p.norm_sqr()],
        })
        .collect();
    let mut reals = real.chunks(2);
    for chunk in reals.by_ref() {
        match *chunk {
            [r1, r2] => sections.push(Biquad {
                b: pair_zeros,
                a: [1.0, -(r1 + r2), r1 * r2],
            }),
            [r] => {
                // Single real pole: first-order section with the matching single zero.
                let zero = if pair_zeros == [1.0, 2.0, 1.0] { 1.0 } else { -1.0 };
                sections.push(Biquad {
                    b: [1.0, zero, 0.0],
                    a: [1.0, -r, 0.0],
                })
            }
            _ => unreachable!(),
        }
    }
    if let Some(first) = sections.first_mut() {
        for c in first.b.iter_mut() {
            *c *= gain;
        }
    }
    for s in &sections {
        if s.b.iter().chain(s.a.iter()).any(|c| !c.is_finite()) {
            return Err(Error::Numerical("non-finite filter coefficient".into()));
        }
    }
    Ok(sections)
}

impl FilterSpec {
    /// Complex frequency response at `freq` Hz.
    pub fn frequency_response(&self, freq: f64) -> C64 {
        let w = 2.0 * std::f64::consts::PI * freq / self.sample_rate;
        let z_inv = C64::new(w.cos(), -w.sin());
        self.sections
            .iter()
            .fold(C64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    pub fn magnitude_db(&self, freq: f64) -> f64 {
        20.0 * self.frequency_response(freq).norm().log10()
    }

    pub fn new_state(&self) -> FilterState {
        FilterState {
            z: vec![[0.0; 2]; self.sections.len()],
        }
    }

    /// State equal to the steady-state response to a constant input `x0`.
    pub fn steady_state(&self, x0: f64) -> FilterState {
        let mut scale = x0;
        let z = self
            .sections
            .iter()
            .map(|s| {
                let g = s.dc_gain();
                let z2 = (s.b[2] - s.a[2] * g) * scale;
                let z1 = (s.b[1] - s.a[1] * g) * scale + z2;
                scale *= g;
                [z1, z2]
            })
            .collect();
        FilterState { z }
    }

    fn padlen(&self) -> usize {
        3 * (self.order + 1)
    }
}

/// Per-section delay lines.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    z: Vec<[f64; 2]>,
}

/// One sample through the cascade, updating `state` in place.
pub fn causal_filter_step(spec: &FilterSpec, state: &mut FilterState, x: f64) -> f64 {
    let mut v = x;
    for (s, z) in spec.sections.iter().zip(state.z.iter_mut()) {
        let y = s.b[0] * v + z[0];
        z[0] = s.b[1] * v - s.a[1] * y + z[1];
        z[1] = s.b[2] * v - s.a[2] * y;
        v = y;
    }
    v
}

/// Forward pass over a whole series starting from `state`.
pub fn lfilter(spec: &FilterSpec, state: &mut FilterState, x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| causal_filter_step(spec, state, v)).collect()
}

/// Zero-phase forward-backward filtering with odd reflection padding.
pub fn filtfilt(spec: &FilterSpec, x: &[f64]) -> Result<Vec<f64>> {
    let pad = spec.padlen();
    let n = x.len();
    if n <= pad {
        return Err(Error::SeriesTooShort { len: n, pad });
    }
    let mut ext = Vec::with_capacity(n + 2 * pad);
    let (first, last) = (x[0], x[n - 1]);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

    let mut state = spec.steady_state(ext[0]);
    let mut y = lfilter(spec, &mut state, &ext);
    y.reverse();
    let mut state = spec.steady_state(y[0]);
    let mut y = lfilter(spec, &mut state, &y);
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

/// A filter with its own state, fed one sample at a time.
#[derive(Debug, Clone)]
pub struct StreamingFilter {
    spec: FilterSpec,
    state: FilterState,
}

impl StreamingFilter {
    pub fn new(spec: FilterSpec) -> Self {
        let state = spec.new_state();
        StreamingFilter { spec, state }
    }

    /// Sets the delay lines as if `x0` had been applied forever.
    pub fn prime(&mut self, x0: f64) {
        self.state = self.spec.steady_state(x0);
    }

    pub fn step(&mut self, x: f64) -> f64 {
        causal_filter_step(&self.spec, &mut self.state, x)
    }

    pub fn reset(&mut self) {
        self.state = self.spec.new_state();
    }
}

/// Trailing or centred boxcar average. Near the edges the mean is over the
/// available samples only.
pub fn moving_average(x: &[f64], window: usize, centered: bool) -> Vec<f64> {
    let n = x.len();
    if window <= 1 || n == 0 {
        return x.to_vec();
    }
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i];
    }
    (0..n)
        .map(|i| {
            let (lo, hi) = if centered {
                let back = window / 2;
                (i.saturating_sub(back), (i + window - back).min(n))
            } else {
                ((i + 1).saturating_sub(window), i + 1)
            };
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// The 0.01–3 Hz fourth-order band-pass used for the velocity observable.
pub fn velocity_bandpass(fs: f64) -> FilterSpec {
    design_bandpass(0.01, 3.0, 4, fs).expect("fixed velocity band is valid for fs > 6 Hz")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterMode {
    ZeroPhase,
    Causal,
}

/// Samples of first-frame pre-roll after priming with a fixed level.
const PRE_ROLL: usize = 50;

/// Streaming velocity-magnitude observable: band-passed norm of each gyro, summed.
#[derive(Debug, Clone)]
pub struct VelocityObservable {
    arm: StreamingFilter,
    forearm: StreamingFilter,
    primed: bool,
    level: Option<[f64; 2]>,
}

impl VelocityObservable {
    pub fn new(spec: FilterSpec) -> Self {
        VelocityObservable {
            arm: StreamingFilter::new(spec.clone()),
            forearm: StreamingFilter::new(spec),
            primed: false,
            level: None,
        }
    }

    /// Primes with a fixed input level per sensor instead of the first frame.
    ///
    /// The 0.01 Hz high-pass takes about a minute to settle on a session's
    /// average speed. Priming with the average of a comparable session makes
    /// the rest baseline right from the first frame.
    pub fn with_level(spec: FilterSpec, level: [f64; 2]) -> Self {
        VelocityObservable {
            level: Some(level),
            ..VelocityObservable::new(spec)
        }
    }

    /// Without a fixed level, filters are primed with the first frame's norms
    /// so a stream starting at rest does not ring through the high-pass.
    pub fn step(&mut self, frame: &SampleFrame) -> f64 {
        let (a, f) = frame.gyro_norms();
        if !self.primed {
            self.primed = true;
            match self.level {
                None => {
                    self.arm.prime(a);
                    self.forearm.prime(f);
                }
                Some([la, lf]) => {
                    // The high-pass starts at the session level; a short
                    // pre-roll of the first frame then settles the 3 Hz
                    // low-pass, which would otherwise ring from that level
                    // down to the current one.
                    self.arm.prime(la);
                    self.forearm.prime(lf);
                    for _ in 0..PRE_ROLL {
                        self.arm.step(a);
                        self.forearm.step(f);
                    }
                }
            }
        }
        self.arm.step(a) + self.forearm.step(f)
    }

    pub fn reset(&mut self) {
        self.arm.reset();
        self.forearm.reset();
        self.primed = false;
    }
}

/// Mean arm and forearm gyro norms of a session, the priming level for
/// [`VelocityObservable::with_level`].
pub fn mean_gyro_norms(frames: &[SampleFrame]) -> [f64; 2] {
    let n = frames.len().max(1) as f64;
    let (a, f) = frames
        .iter()
        .map(|fr| fr.gyro_norms())
        .fold((0.0, 0.0), |(sa, sf), (a, f)| (sa + a, sf + f));
    [a / n, f / n]
}

/// Causal observable over a session with fixed priming, exactly what a
/// live engine built with the same level computes.
pub fn primed_observable(frames: &[SampleFrame], spec: &FilterSpec, level: [f64; 2]) -> Vec<f64> {
    let mut obs = VelocityObservable::with_level(spec.clone(), level);
    frames.iter().map(|f| obs.step(f)).collect()
}

/// Observable over a whole session, zero-phase (offline) or causal (matching
/// [`VelocityObservable`] exactly).
pub fn velocity_observable(
    frames: &[SampleFrame],
    spec: &FilterSpec,
    mode: FilterMode,
) -> Result<Vec<f64>> {
    match mode {
        FilterMode::Causal => {
            let mut obs = VelocityObservable::new(spec.clone());
            Ok(frames.iter().map(|f| obs.step(f)).collect())
        }
        FilterMode::ZeroPhase => {
            let (arm, fore): (Vec<f64>, Vec<f64>) = frames.iter().map(|f| f.gyro_norms()).unzip();
            let a = filtfilt(spec, &arm)?;
            let b = filtfilt(spec, &fore)?;
            Ok(a.iter().zip(&b).map(|(x, y)| x + y).collect())
        }
    }
}

/// Full-wave rectification followed by a second-order 2 Hz low-pass.
pub fn emg_envelope(raw: &[f64], fs: f64) -> Vec<f64> {
    let spec = design_lowpass(2.0, 2, fs).expect("2 Hz low-pass valid for fs > 4 Hz");
    let mut state = spec.new_state();
    raw.iter()
        .map(|&x| causal_filter_step(&spec, &mut state, x.abs()).max(0.0))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentState {
    Rest,
    Motion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotionRole {
    Forward,
    Backward,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInterval {
    pub start: usize,
    pub end: usize,
    pub state: SegmentState,
    pub motion_role: MotionRole,
    pub direction: Option<u8>,
}

impl SegmentInterval {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationParams {
    /// Length of the rest windows at each end of the session used for the
    /// stage-1 threshold.
    pub rest_window_s: f64,
    pub k_sigma: f64,
    pub smooth_window_s: f64,
    pub smooth_threshold: f64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        SegmentationParams {
            rest_window_s: 1.0,
            k_sigma: 6.0,
            smooth_window_s: 1.0,
            smooth_threshold: 0.1,
        }
    }
}

/// Two-stage offline REST/MOTION segmentation of a session.
///
/// Stage 1 thresholds the zero-phase band-passed summed gyro magnitude at
/// mean + k·std of the bookend rest windows. Stage 2 takes a centred moving
/// average of the binary stage-1 trace and keeps regions at or above the fixed
/// threshold; each kept region becomes one MOTION interval spanning its first to
/// last stage-1 active sample.
pub fn segment_session(
    frames: &[SampleFrame],
    fs: f64,
    params: &SegmentationParams,
) -> Result<Vec<SegmentInterval>> {
    let n = frames.len();
    let w = (params.rest_window_s * fs).round() as usize;
    if w == 0 || n < 2 * w + 1 {
        return Err(Error::Segmentation(format!(
            "session of {n} samples lacks two {:.2} s rest bookends",
            params.rest_window_s
        )));
    }
    let spec = velocity_bandpass(fs);
    let filtered = velocity_observable(frames, &spec, FilterMode::ZeroPhase)?;

    let rest: Vec<f64> = filtered[..w].iter().chain(&filtered[n - w..]).copied().collect();
    let mean = rest.iter().sum::<f64>() / rest.len() as f64;
    let var = rest.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rest.len() as f64;
    let threshold = mean + params.k_sigma * var.sqrt();

    let active: Vec<bool> = filtered.iter().map(|&v| v > threshold).collect();
    let binary: Vec<f64> = active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
    let smooth_w = ((params.smooth_window_s * fs).round() as usize).max(1);
    let smoothed = moving_average(&binary, smooth_w, true);
    let gate: Vec<bool> = smoothed
        .iter()
        .map(|&v| v >= params.smooth_threshold - 1e-12)
        .collect();

    if gate[0] || gate[n - 1] {
        return Err(Error::Segmentation(
            "session does not begin and end at rest".into(),
        ));
    }

    let mut motions: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < n {
        if !gate[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && gate[i] {
            i += 1;
        }
        let first = (start..i).find(|&k| active[k]);
        let last = (start..i).rev().find(|&k| active[k]);
        if let (Some(a), Some(b)) = (first, last) {
            motions.push((a, b + 1));
        }
    }

    let mut out = Vec::with_capacity(2 * motions.len() + 1);
    let mut cursor = 0;
    for (k, &(s, e)) in motions.iter().enumerate() {
        if s > cursor {
            out.push(SegmentInterval {
                start: cursor,
                end: s,
                state: SegmentState::Rest,
                motion_role: MotionRole::None,
                direction: None,
            });
        }
        let role = if k % 2 == 0 {
            MotionRole::Forward
        } else {
            MotionRole::Backward
        };
        out.push(SegmentInterval {
            start: s,
            end: e,
            state: SegmentState::Motion,
            motion_role: role,
            direction: trial_direction(frames, (s + e) / 2),
        });
        cursor = e;
    }
    out.push(SegmentInterval {
        start: cursor,
        end: n,
        state: SegmentState::Rest,
        motion_role: MotionRole::None,
        direction: None,
    });
    Ok(out)
}

/// Majority direction label among frames sharing the trial id of frame `at`.
fn trial_direction(frames: &[SampleFrame], at: usize) -> Option<u8> {
    let trial = frames[at].trial_id;
    let mut counts = std::collections::BTreeMap::new();
    let lo = (0..=at).rev().take_while(|&k| frames[k].trial_id == trial).last()?;
    for f in frames[lo..].iter().take_while(|f| f.trial_id == trial) {
        if let Some(Label::Direction(d)) = f.label {
            *counts.entry(d).or_insert(0usize) += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(d, _)| d)
}
