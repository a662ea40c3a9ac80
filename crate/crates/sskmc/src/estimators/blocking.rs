//! Blocking analysis for correlated Monte Carlo series: recursive pairwise
//! averaging until the error estimate of the mean stops growing.

use crate::error::{Error, Result};

/// One level of the blocking ladder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockingLevel {
    pub block_size: usize,
    pub n_blocks: usize,
    /// Error estimate of the series mean at this level.
    pub error: f64,
    /// One-sigma uncertainty of that estimate.
    pub error_of_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockingResult {
    pub mean: f64,
    /// Reported standard error: the plateau value, or the ladder maximum
    /// when no plateau was found.
    pub error: f64,
    pub plateau_found: bool,
    pub ladder: Vec<BlockingLevel>,
}

/// Standard error of the mean of a correlated series.
///
/// Levels halve the series by pairwise averaging; the naive error estimate
/// grows until blocks exceed the correlation time and then plateaus.
/// Requires at least 64 points.
pub fn blocking_error(series: &[f64]) -> Result<BlockingResult> {
    if series.len() < 64 {
        return Err(Error::Domain(format!(
            "blocking analysis needs a series of >= 64 points, got {}",
            series.len()
        )));
    }
    let mean = series.iter().sum::<f64>() / series.len() as f64;

    let mut data = series.to_vec();
    let mut ladder = Vec::new();
    let mut block_size = 1usize;
    while data.len() >= 8 {
        let n = data.len() as f64;
        let m = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        let error = (var / n).sqrt();
        let error_of_error = error / (2.0 * (n - 1.0)).sqrt();
        ladder.push(BlockingLevel {
            block_size,
            n_blocks: data.len(),
            error,
            error_of_error,
        });
        data = data
            .chunks_exact(2)
            .map(|pair| 0.5 * (pair[0] + pair[1]))
            .collect();
        block_size *= 2;
    }

    if ladder.iter().all(|l| l.error == 0.0) {
        // constant series
        return Ok(BlockingResult { mean, error: 0.0, plateau_found: true, ladder });
    }

    // plateau: first level whose successor no longer grows beyond its own
    // statistical uncertainty
    let mut plateau: Option<usize> = None;
    for k in 0..ladder.len().saturating_sub(1) {
        if ladder[k + 1].error <= ladder[k].error + ladder[k + 1].error_of_error {
            plateau = Some(k);
            break;
        }
    }
    match plateau {
        Some(k) => {
            // average the plateau neighborhood to damp level noise
            let hi = (k + 2).min(ladder.len());
            let error = ladder[k..hi].iter().map(|l| l.error).sum::<f64>() / (hi - k) as f64;
            Ok(BlockingResult { mean, error, plateau_found: true, ladder })
        }
        None => {
            let error = ladder.iter().map(|l| l.error).fold(0.0, f64::max);
            Ok(BlockingResult { mean, error, plateau_found: false, ladder })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn rejects_short_series() {
        assert!(blocking_error(&vec![1.0; 63]).is_err());
        assert!(blocking_error(&vec![1.0; 64]).is_ok());
    }

    #[test]
    fn constant_series_has_zero_error() {
        let r = blocking_error(&vec![2.5; 1024]).unwrap();
        assert_eq!(r.error, 0.0);
        assert!(r.plateau_found);
        assert_eq!(r.mean, 2.5);
    }

    #[test]
    fn iid_gaussian_error_recovered_within_10_percent() {
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        let n = 16384;
        let sigma = 0.7;
        let series: Vec<f64> = (0..n)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let expect = sigma / (n as f64).sqrt();
        let r = blocking_error(&series).unwrap();
        assert!(
            (r.error / expect - 1.0).abs() < 0.10,
            "blocking {} vs exact {}",
            r.error,
            expect
        );
        assert!(r.plateau_found);
    }

    #[test]
    fn ar1_series_matches_effective_sample_correction() {
        // x_t = phi x_{t-1} + eps; error of the mean is
        // sqrt(var(x)/n * (1+phi)/(1-phi)) for large n
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let phi: f64 = 0.8;
        let n = 65536;
        let mut x = 0.0;
        let mut series = Vec::with_capacity(n);
        for _ in 0..n {
            let eps: f64 = rng.sample(StandardNormal);
            x = phi * x + eps;
            series.push(x);
        }
        let var = 1.0 / (1.0 - phi * phi);
        let expect = (var / n as f64 * (1.0 + phi) / (1.0 - phi)).sqrt();
        let r = blocking_error(&series).unwrap();
        assert!(
            (r.error / expect - 1.0).abs() < 0.15,
            "blocking {} vs analytic {}",
            r.error,
            expect
        );
    }
}
