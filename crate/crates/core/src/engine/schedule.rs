//! Cosine-annealed learning rate.

use std::f64::consts::PI;

use crate::error::{QuanError, Result};

/// `min_lr + ½(base_lr − min_lr)(1 + cos(π·t/total))` for `0 ≤ t ≤ total`.
pub fn cosine_lr(t: usize, total: usize, base_lr: f64, min_lr: f64) -> Result<f64> {
    if t > total {
        return Err(QuanError::Range(format!("step {t} outside schedule of {total} steps")));
    }
    if total == 0 {
        return Ok(base_lr);
    }
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (PI * t as f64 / total as f64).cos()))
}
