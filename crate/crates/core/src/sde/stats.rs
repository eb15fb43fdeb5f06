use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl MeanEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
                n,
            };
        }
        let mut s = CompensatedSum::default();
        samples.iter().for_each(|&x| s.add(x));
        let mean = s.value() / n as f64;
        let stderr = if n > 1 {
            let mut v = CompensatedSum::default();
            samples.iter().for_each(|&x| v.add((x - mean) * (x - mean)));
            (v.value() / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr, n }
    }

    pub fn exact(value: f64) -> Self {
        Self {
            mean: value,
            stderr: 0.0,
            n: 1,
        }
    }
}

const CHUNK: usize = 512;

/// Evaluates `work(i)` for `i in 0..n` in parallel and feeds the results to
/// `fold` strictly in index order, so aggregates do not depend on scheduling.
pub(crate) fn ordered_paths<T, W, F>(n: usize, work: W, mut fold: F) -> Result<()>
where
    T: Send,
    W: Fn(usize) -> Result<T> + Sync,
    F: FnMut(usize, T) -> Result<()>,
{
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let chunk: Vec<Result<T>> = (start..end).into_par_iter().map(&work).collect();
        for (offset, item) in chunk.into_iter().enumerate() {
            fold(start + offset, item?)?;
        }
        start = end;
    }
    Ok(())
}

/// Collects `work(i)` for every path in index order.
pub(crate) fn collect_paths<T, W>(n: usize, work: W) -> Result<Vec<T>>
where
    T: Send,
    W: Fn(usize) -> Result<T> + Sync,
{
    let mut out = Vec::with_capacity(n);
    ordered_paths(n, work, |_, v| {
        out.push(v);
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = CompensatedSum::default();
        s.add(1e16);
        for _ in 0..1000 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 1000.0);
    }

    #[test]
    fn mean_and_stderr_of_known_sample() {
        let m = MeanEstimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.stderr - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ordered_folding_is_sequential() {
        let v = collect_paths(2000, |i| Ok(i * 2)).unwrap();
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }
}
