//! Up-front checks on file arguments, so a long run never dies at the end
//! because an output directory is missing.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;

/// A bad argument detected before any work started (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: String) -> anyhow::Error {
    UsageError(msg).into()
}

pub fn input(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("input file {} does not exist", path.display())));
    }
    Ok(())
}

/// Output parent must exist and the output must not clobber any input.
pub fn output(path: &Path, inputs: &[&Path]) -> Result<()> {
    if path.is_dir() {
        return Err(usage(format!("output {} is a directory", path.display())));
    }
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(usage(format!(
            "output directory {} does not exist",
            parent.display()
        )));
    }
    let canon = |p: &Path| std::fs::canonicalize(p).ok();
    if let Some(out) = canon(path) {
        if inputs.iter().any(|i| canon(i).as_ref() == Some(&out)) {
            return Err(usage(format!("output {} would overwrite an input", path.display())));
        }
    }
    Ok(())
}

pub fn outputs(paths: &[Option<&PathBuf>], inputs: &[&Path]) -> Result<()> {
    for p in paths.iter().flatten() {
        output(p, inputs)?;
    }
    Ok(())
}

pub fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    args: &'a T,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset_sha256: Option<&'a str>,
}

/// Writes `<out>.run.json` with the arguments that produced `out`.
pub fn record_run<T: Serialize>(out: &Path, command: &str, args: &T, dataset_sha256: Option<&str>) -> Result<()> {
    let rec = RunRecord {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        args,
        dataset_sha256,
    };
    reach_core::store::save_json(&rec, &sidecar(out))?;
    Ok(())
}
