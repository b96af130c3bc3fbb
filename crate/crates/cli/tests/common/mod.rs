use std::path::{Path, PathBuf};

use permcca_cli::io::write_matrix_csv;
use permcca_core::Mat;

/// Deterministic pseudo-random matrix (no RNG crate needed in tests).
pub fn matrix(rows: usize, cols: usize, salt: u64) -> Mat {
    let mut state = salt.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Mat::from_fn(rows, cols, |_, _| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    })
}

pub fn write(dir: &Path, name: &str, m: &Mat) -> PathBuf {
    let p = dir.join(name);
    write_matrix_csv(&p, m).unwrap();
    p
}

pub fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["permcca"];
    full.extend_from_slice(args);
    let code = permcca_cli::main_with(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}
