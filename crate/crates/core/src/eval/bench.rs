use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub reps: usize,
    pub median: f64,
    pub mean: f64,
    pub p95: f64,
}

impl LatencyStats {
    /// Summary of wall-clock seconds per repetition.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Precondition("no timing samples".into()));
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        let p95 = s[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Ok(LatencyStats {
            reps: n,
            median,
            mean: s.iter().sum::<f64>() / n as f64,
            p95,
        })
    }
}

/// Calls `f(i)` for `warm` untimed then `reps` timed iterations.
pub fn bench<T>(warm: usize, reps: usize, mut f: impl FnMut(usize) -> Result<T>) -> Result<LatencyStats> {
    for i in 0..warm {
        std::hint::black_box(f(i)?);
    }
    let mut samples = Vec::with_capacity(reps);
    for i in 0..reps {
        let start = Instant::now();
        std::hint::black_box(f(warm + i)?);
        samples.push(start.elapsed().as_secs_f64());
    }
    LatencyStats::from_samples(&samples)
}

/// Bytes of a FATN file holding an array with `dims`.
pub fn fatn_bytes(dims: &[usize]) -> u64 {
    (4 + 4 + 1 + 4 + 8 * dims.len()) as u64 + 8 * dims.iter().map(|&d| d as u64).product::<u64>()
}
