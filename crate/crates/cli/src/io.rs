use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use autobid_core::Error;
use serde::Serialize;

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad input: exit 2.
    Validation(String),
    /// Anything that failed after inputs were accepted: exit 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidParameter { .. } | Error::Domain { .. } => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn invalid(e: impl fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

/// Output directory that refuses to clobber files unless forced.
pub struct OutDir {
    root: PathBuf,
    force: bool,
}

impl OutDir {
    /// Creates the directory and checks that none of `files` exist yet.
    pub fn prepare(root: &Path, force: bool, files: &[&str]) -> CliResult<Self> {
        if !force {
            let existing: Vec<_> = files.iter().filter(|f| root.join(f).exists()).collect();
            if !existing.is_empty() {
                return Err(invalid(format!(
                    "{} already contains {}; pass --force to overwrite",
                    root.display(),
                    existing.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(", ")
                )));
            }
        }
        fs::create_dir_all(root).map_err(|e| runtime(format!("creating {}: {e}", root.display())))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            force,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn subdir(&self, name: &str, files: &[&str]) -> CliResult<OutDir> {
        OutDir::prepare(&self.root.join(name), self.force, files)
    }

    pub fn write_rows<T: Serialize>(&self, name: &str, rows: &[T]) -> CliResult<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        for r in rows {
            w.serialize(r).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| runtime(format!("{}: {e}", path.display())))
    }

    /// Two-column `key,value` file.
    pub fn write_pairs(&self, name: &str, pairs: &[(String, String)]) -> CliResult<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        w.write_record(["key", "value"]).map_err(runtime)?;
        for (k, v) in pairs {
            w.write_record([k, v]).map_err(runtime)?;
        }
        w.flush().map_err(|e| runtime(format!("{}: {e}", path.display())))
    }

    pub fn write_text(&self, name: &str, text: &str) -> CliResult<()> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
    }
}

/// Flat key/value list with full-precision numbers.
#[derive(Default)]
pub struct Pairs(pub Vec<(String, String)>);

impl Pairs {
    pub fn num(&mut self, key: impl Into<String>, value: f64) -> &mut Self {
        self.0.push((key.into(), value.to_string()));
        self
    }

    pub fn text(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.0.push((key.into(), value.to_string()));
        self
    }
}

/// Six significant digits for summary lines.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return x.to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    if (-4..6).contains(&magnitude) {
        let decimals = (5 - magnitude).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}

pub fn read_to_string(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Numbers from a file, one per line or comma separated.
pub fn read_numbers(path: &Path) -> CliResult<Vec<f64>> {
    let text = read_to_string(path)?;
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| invalid(format!("{}: '{t}': {e}", path.display())))
        })
        .collect()
}
