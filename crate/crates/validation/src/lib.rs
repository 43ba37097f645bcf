//! Shared plumbing for the acceptance checks: locating the bundled datasets
//! and printing one verdict line per criterion.

use std::path::{Path, PathBuf};
use std::time::Instant;

use fttn::{Dataset, Result};

/// Root of the bundled IDX fixtures.
pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// Loads `<dir>/{train,t10k}-{images-idx3,labels-idx1}-ubyte.gz`, keeping at
/// most `max_train` / `max_test` samples from the front of each split.
pub fn load_split(dir: &Path, max_train: usize, max_test: usize) -> Result<(Dataset, Dataset)> {
    let load = |split: &str| {
        Dataset::from_idx(
            dir.join(format!("{split}-images-idx3-ubyte.gz")),
            dir.join(format!("{split}-labels-idx1-ubyte.gz")),
            10,
        )
    };
    Ok((load("train")?.take(max_train), load("t10k")?.take(max_test)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {:<28} {} ({:.1} s) {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.seconds,
            self.detail
        )
    }
}

/// Runs one check, turning errors and panics into a failing verdict.
pub fn run_check<F>(id: usize, name: &'static str, check: F) -> Verdict
where
    F: FnOnce() -> std::result::Result<(bool, String), String> + std::panic::UnwindSafe,
{
    let start = Instant::now();
    let (passed, detail) = match std::panic::catch_unwind(check) {
        Ok(Ok(outcome)) => outcome,
        Ok(Err(message)) => (false, format!("error: {message}")),
        Err(panic) => {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (false, format!("panicked: {message}"))
        }
    };
    Verdict {
        id,
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
