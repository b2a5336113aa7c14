//! On-disk formats: session files, ground-truth sidecars and model bundles.
//!
//! A session file is CSV preceded by one `# reach-session v1` line; the
//! columns are `t`, the twelve IMU axes, the sixteen EMG envelopes, `label`
//! (`rest`, a direction index, or empty) and `trial_id`. The ground truth
//! lives next to it in `<session>.truth.csv`. Bundles are pretty-printed JSON.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frame::{Label, SampleFrame, N_EMG};
use crate::fsm::FsmConfig;
use crate::intention::HmmModel;
use crate::mixture::DirectionModel;
use crate::reduce::ReducerMap;
use crate::synth::{GroundTruth, TrialTruth};

pub const SESSION_MAGIC: &str = "# reach-session v1";
pub const TRUTH_MAGIC: &str = "# reach-truth v1";
pub const BUNDLE_FORMAT_VERSION: u32 = 1;

pub fn session_header() -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for sensor in ["gyro_arm", "gyro_forearm", "accel_arm", "accel_forearm"] {
        for axis in ["x", "y", "z"] {
            h.push(format!("{sensor}_{axis}"));
        }
    }
    for m in 0..N_EMG {
        h.push(format!("emg_{m:02}"));
    }
    h.push("label".into());
    h.push("trial_id".into());
    h
}

/// Path of the ground-truth sidecar belonging to `session`.
pub fn truth_path(session: &Path) -> PathBuf {
    let mut s = session.as_os_str().to_owned();
    s.push(".truth.csv");
    PathBuf::from(s)
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn label_text(l: Option<Label>) -> String {
    match l {
        None => String::new(),
        Some(Label::Rest) => "rest".into(),
        Some(Label::Direction(d)) => d.to_string(),
    }
}

pub fn session_to_string(frames: &[SampleFrame]) -> String {
    let mut out = String::with_capacity(frames.len() * 260);
    out.push_str(SESSION_MAGIC);
    out.push('\n');
    out.push_str(&session_header().join(","));
    out.push('\n');
    for f in frames {
        use std::fmt::Write as _;
        let _ = write!(out, "{}", f.t);
        for v in f.features() {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{},{}", label_text(f.label), f.trial_id);
    }
    out
}

pub fn truth_to_string(truth: &GroundTruth) -> String {
    let mut out = format!("{TRUTH_MAGIC} directions={}\n", truth.n_directions);
    out.push_str("trial_id,label,forward_start,forward_end,backward_start,backward_end\n");
    for t in &truth.trials {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            t.trial_id, t.label, t.forward_start, t.forward_end, t.backward_start, t.backward_end
        ));
    }
    out
}

/// Saves a session and, if given, its truth sidecar.
pub fn save_session(path: &Path, frames: &[SampleFrame], truth: Option<&GroundTruth>) -> Result<()> {
    write_atomic(path, session_to_string(frames).as_bytes())?;
    if let Some(t) = truth {
        write_atomic(&truth_path(path), truth_to_string(t).as_bytes())?;
    }
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses session text; `path` is only used in error messages.
pub fn parse_session(path: &Path, text: &str) -> Result<Vec<SampleFrame>> {
    let mut lines = text.split_inclusive('\n');
    let magic = lines.next().unwrap_or("").trim_end();
    if magic != SESSION_MAGIC {
        return Err(parse_err(path, 1, format!("expected '{SESSION_MAGIC}' header")));
    }
    let header = lines.next().unwrap_or("").trim_end();
    let expected = session_header().join(",");
    if header != expected {
        return Err(parse_err(path, 2, "column header does not match the session layout"));
    }
    let ncols = session_header().len();
    let mut frames = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    for (k, raw) in lines.enumerate() {
        let line_no = k + 3;
        if !raw.ends_with('\n') {
            return Err(parse_err(path, line_no, "truncated final line"));
        }
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ncols {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {ncols} fields, found {}", fields.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = fields[i]
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("bad number '{}' in column {}", fields[i], i + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(path, line_no, format!("non-finite value in column {}", i + 1)));
            }
            Ok(v)
        };
        let t = num(0)?;
        if t <= last_t {
            return Err(parse_err(path, line_no, format!("timestamp {t} not after {last_t}")));
        }
        last_t = t;
        let mut vals = [0.0; 28];
        for (j, v) in vals.iter_mut().enumerate() {
            *v = num(j + 1)?;
        }
        let label = match fields[29] {
            "" => None,
            "rest" => Some(Label::Rest),
            s => Some(Label::Direction(
                s.parse()
                    .map_err(|_| parse_err(path, line_no, format!("bad label '{s}'")))?,
            )),
        };
        let trial_id = fields[30]
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad trial id '{}'", fields[30])))?;
        let mut f = SampleFrame {
            t,
            label,
            trial_id,
            ..SampleFrame::at_rest(t)
        };
        f.gyro_arm.copy_from_slice(&vals[0..3]);
        f.gyro_forearm.copy_from_slice(&vals[3..6]);
        f.accel_arm.copy_from_slice(&vals[6..9]);
        f.accel_forearm.copy_from_slice(&vals[9..12]);
        f.emg.copy_from_slice(&vals[12..28]);
        if let Some(m) = f.emg.iter().position(|&e| e < 0.0) {
            return Err(parse_err(path, line_no, format!("negative EMG envelope in channel {m}")));
        }
        frames.push(f);
    }
    Ok(frames)
}

pub fn parse_truth(path: &Path, text: &str) -> Result<GroundTruth> {
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or("");
    let n_directions = magic
        .strip_prefix(TRUTH_MAGIC)
        .and_then(|rest| rest.trim().strip_prefix("directions="))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| parse_err(path, 1, format!("expected '{TRUTH_MAGIC} directions=<L>'")))?;
    lines.next();
    let mut trials = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<usize> = line
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(path, k + 3, e.to_string()))?;
        if v.len() != 6 {
            return Err(parse_err(path, k + 3, "expected 6 fields"));
        }
        trials.push(TrialTruth {
            trial_id: v[0] as u32,
            label: v[1] as u8,
            forward_start: v[2],
            forward_end: v[3],
            backward_start: v[4],
            backward_end: v[5],
        });
    }
    Ok(GroundTruth {
        n_directions,
        trials,
        blips: Vec::new(),
    })
}

fn read_text(path: &Path) -> Result<String> {
    let mut s = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::io(path, e))?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<SampleFrame>,
    pub truth: Option<GroundTruth>,
    /// SHA-256 of the session file bytes.
    pub sha256: String,
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = read_text(path)?;
    let sha256 = hex::encode(Sha256::digest(text.as_bytes()));
    let frames = parse_session(path, &text)?;
    let tp = truth_path(path);
    let truth = if tp.exists() {
        Some(parse_truth(&tp, &read_text(&tp)?)?)
    } else {
        None
    };
    Ok(Dataset { frames, truth, sha256 })
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut h = Sha256::new();
    loop {
        let buf = r.fill_buf().map_err(|e| Error::io(path, e))?;
        if buf.is_empty() {
            break;
        }
        h.update(buf);
        let n = buf.len();
        r.consume(n);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_sha256: String,
    pub variant: String,
    pub seed: u64,
    /// Seconds since the Unix epoch when training finished.
    pub created_unix: u64,
    pub frontier_file: Option<String>,
    pub cv_accuracy: Option<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: u32,
    pub hmm: HmmModel,
    /// Arm and forearm gyro norm levels that prime the velocity filters.
    pub velocity_level: [f64; 2],
    pub reducer: ReducerMap,
    pub direction: DirectionModel,
    pub fsm: FsmConfig,
    pub provenance: Provenance,
}

impl ModelBundle {
    /// Checks that the parts fit together.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: self.format_version,
                supported: BUNDLE_FORMAT_VERSION,
            });
        }
        self.hmm.validate()?;
        if !self.velocity_level.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::InvalidModel("velocity level must be finite and non-negative".into()));
        }
        self.direction.validate()?;
        self.fsm.validate()?;
        if self.reducer.output_dim() != self.direction.dim {
            return Err(Error::DimensionMismatch {
                expected: self.reducer.output_dim(),
                got: self.direction.dim,
            });
        }
        let stopping = self
            .direction
            .stopping
            .ok_or_else(|| Error::InvalidModel("bundle has no stopping thresholds".into()))?;
        stopping.validate()?;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.direction.n_classes
    }
}

pub fn bundle_to_string(bundle: &ModelBundle) -> Result<String> {
    bundle.validate()?;
    let mut s = serde_json::to_string_pretty(bundle)?;
    s.push('\n');
    Ok(s)
}

pub fn bundle_from_str(text: &str) -> Result<ModelBundle> {
    #[derive(Deserialize)]
    struct Probe {
        format_version: u32,
    }
    let probe: Probe = serde_json::from_str(text)?;
    if probe.format_version != BUNDLE_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: probe.format_version,
            supported: BUNDLE_FORMAT_VERSION,
        });
    }
    let bundle: ModelBundle = serde_json::from_str(text)?;
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let s = bundle_to_string(bundle)?;
    write_atomic(path, s.as_bytes())
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    bundle_from_str(&read_text(path)?)
}

/// Serialises any JSON-able report atomically.
pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}
