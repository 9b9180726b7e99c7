//! File formats: per-sample CSV (N rows × M feature columns with a header),
//! dataset manifest JSON, and directory-level loading that accepts either a
//! dataset directory, a sampling output directory, or a bare directory of
//! CSV files.

use crate::error::CliError;
use freqdiff_core::TimeSeriesSample;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub m: usize,
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub generator: Option<String>,
    #[serde(default)]
    pub policy: Option<String>,
    #[serde(default)]
    pub steps: Option<usize>,
    pub files: Vec<String>,
}

/// Refuse to write into a non-empty directory unless forced; create it if
/// missing.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty (pass --force to write anyway)",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Write one sample as CSV: header `f0,…,f{M−1}`, then N rows.
pub fn write_sample_csv(path: &Path, s: &TimeSeriesSample) -> Result<(), CliError> {
    let mut out = String::new();
    for f in 0..s.m {
        if f > 0 {
            out.push(',');
        }
        out.push_str(&format!("f{f}"));
    }
    out.push('\n');
    for t in 0..s.n {
        for f in 0..s.m {
            if f > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", s.at(t, f)));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write chart coordinates as CSV with the same N×M shape (feature columns).
pub fn write_chart_csv(path: &Path, v: &freqdiff_core::PhiVector) -> Result<(), CliError> {
    let mut out = String::new();
    for f in 0..v.m {
        if f > 0 {
            out.push(',');
        }
        out.push_str(&format!("f{f}"));
    }
    out.push('\n');
    for c in 0..v.n {
        for f in 0..v.m {
            if f > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", v.feature(f)[c]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read one sample CSV. A header row is detected by failing to parse as
/// numbers and skipped.
pub fn read_sample_csv(path: &Path) -> Result<TimeSeriesSample, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        match parsed {
            Ok(vals) => rows.push(vals),
            Err(e) => {
                if lineno == 0 {
                    continue; // header
                }
                return Err(CliError::Io(format!(
                    "{} line {}: {e}",
                    path.display(),
                    lineno + 1
                )));
            }
        }
    }
    let n = rows.len();
    let m = rows.first().map(|r| r.len()).unwrap_or(0);
    if n < 2 || m == 0 {
        return Err(CliError::Io(format!(
            "{}: need at least 2 rows and 1 column, got {n}×{m}",
            path.display()
        )));
    }
    let mut values = Vec::with_capacity(n * m);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != m {
            return Err(CliError::Io(format!(
                "{} row {}: expected {m} columns, got {}",
                path.display(),
                i + 1,
                r.len()
            )));
        }
        values.extend_from_slice(r);
    }
    TimeSeriesSample::new(values, n, m).map_err(|e| CliError::Io(e.to_string()))
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), CliError> {
    let mut file = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut file, manifest)
        .map_err(|e| CliError::Io(e.to_string()))?;
    file.write_all(b"\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn csv_files_in(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

/// Load all samples under `dir`: a manifest-backed dataset, a sampling
/// output (its `time/` subdirectory), or a plain directory of CSVs. Sample
/// CSVs named `trace.csv` are never data.
pub fn load_samples(dir: &Path) -> Result<Vec<TimeSeriesSample>, CliError> {
    if !dir.exists() {
        return Err(CliError::Io(format!("{} does not exist", dir.display())));
    }
    let manifest = dir.join("manifest.json");
    let paths: Vec<PathBuf> = if manifest.exists() {
        let man = read_manifest(dir)?;
        let base = if dir.join("time").is_dir() { dir.join("time") } else { dir.to_path_buf() };
        man.files.iter().map(|f| base.join(f)).collect()
    } else if dir.join("time").is_dir() {
        csv_files_in(&dir.join("time"))?
    } else {
        csv_files_in(dir)?
            .into_iter()
            .filter(|p| p.file_name().is_some_and(|f| f != "trace.csv" && f != "history.csv"))
            .collect()
    };
    if paths.is_empty() {
        return Err(CliError::Io(format!("no sample CSVs found under {}", dir.display())));
    }
    let samples: Result<Vec<_>, _> = paths.iter().map(|p| read_sample_csv(p)).collect();
    let samples = samples?;
    let (n, m) = (samples[0].n, samples[0].m);
    for s in &samples {
        if s.n != n || s.m != m {
            return Err(CliError::Io(format!(
                "samples under {} disagree in shape ({n}×{m} vs {}×{})",
                dir.display(),
                s.n,
                s.m
            )));
        }
    }
    Ok(samples)
}

pub fn sample_file_name(index: usize) -> String {
    format!("sample_{index:06}.csv")
}
