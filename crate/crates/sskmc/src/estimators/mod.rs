//! Measurement machinery: energy accumulation, radial histograms for the
//! pair distributions, the one-body density matrix by the direct and the
//! off-diagonal routes, and the condensate fraction.

pub mod blocking;
pub mod offdiag;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{SimBox, Vec3};
use crate::sampler::{RngStream, ShadowSet, Walker};
use crate::wavefunction::KernelState;

pub use blocking::{blocking_error, BlockingResult};

/// Scalar time series with exact associative merging. Blocking analysis
/// runs on the stored series at the end of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScalarAccumulator {
    series: Vec<f64>,
}

impl ScalarAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.series.push(x);
    }

    pub fn count(&self) -> usize {
        self.series.len()
    }

    pub fn mean(&self) -> f64 {
        if self.series.is_empty() {
            f64::NAN
        } else {
            self.series.iter().sum::<f64>() / self.series.len() as f64
        }
    }

    pub fn series(&self) -> &[f64] {
        &self.series
    }

    /// Appends another walker's series; sums and counts merge exactly.
    pub fn merge(&mut self, other: &ScalarAccumulator) {
        self.series.extend_from_slice(&other.series);
    }

    pub fn blocking(&self) -> Result<BlockingResult> {
        blocking_error(&self.series)
    }
}

/// How a radial histogram turns accumulated entries into a curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// Pair counts against the ideal-gas shell weight (g(r), g(s)).
    PairCount,
    /// Mean of recorded ratios per bin (direct one-body density matrix).
    RatioMean,
    /// Sum of guiding weights per bin, later scaled by a global
    /// normalization constant (off-diagonal one-body density matrix).
    OffDiagWeighted,
}

/// Binned radial estimator on [0, r_max) with fixed bin width.
///
/// Entries beyond `r_max` are silently dropped: the minimum-image metric
/// is only radially meaningful up to half the smallest box edge.
/// `end_sample` closes one configuration; sealed blocks of `block_len`
/// samples provide error bars for ratio and off-diagonal curves.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    mode: NormMode,
    dr: f64,
    r_max: f64,
    n_bins: usize,
    sum: Vec<f64>,
    count: Vec<u64>,
    n_samples: u64,
    block_len: u64,
    cur_in_block: u64,
    block_sums: Vec<Vec<f64>>,
    block_counts: Vec<Vec<u64>>,
    open_sum: Vec<f64>,
    open_count: Vec<u64>,
}

impl Histogram {
    /// `block_len` = 0 disables block bookkeeping.
    pub fn new(mode: NormMode, dr: f64, r_max: f64, block_len: u64) -> Result<Self> {
        if dr <= 0.0 || r_max <= dr {
            return Err(Error::Config(format!(
                "histogram needs 0 < dr < r_max (got dr={dr}, r_max={r_max})"
            )));
        }
        let n_bins = (r_max / dr).floor() as usize;
        Ok(Histogram {
            mode,
            dr,
            r_max: n_bins as f64 * dr,
            n_bins,
            sum: vec![0.0; n_bins],
            count: vec![0; n_bins],
            n_samples: 0,
            block_len,
            cur_in_block: 0,
            block_sums: Vec::new(),
            block_counts: Vec::new(),
            open_sum: vec![0.0; n_bins],
            open_count: vec![0; n_bins],
        })
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn dr(&self) -> f64 {
        self.dr
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_samples(&self) -> u64 {
        self.n_samples
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dr
    }

    pub fn counts(&self) -> &[u64] {
        &self.count
    }

    pub fn sums(&self) -> &[f64] {
        &self.sum
    }

    fn bin_of(&self, r: f64) -> Option<usize> {
        if r < 0.0 || r >= self.r_max {
            return None;
        }
        Some(((r / self.dr) as usize).min(self.n_bins - 1))
    }

    /// Counts one pair at separation `r` (PairCount mode).
    pub fn record_pair(&mut self, r: f64) {
        if let Some(b) = self.bin_of(r) {
            self.count[b] += 1;
            self.sum[b] += 1.0;
            self.open_count[b] += 1;
            self.open_sum[b] += 1.0;
        }
    }

    /// Records a ratio observation at separation `r` (RatioMean mode).
    pub fn record_ratio(&mut self, r: f64, value: f64) {
        if let Some(b) = self.bin_of(r) {
            self.count[b] += 1;
            self.sum[b] += value;
            self.open_count[b] += 1;
            self.open_sum[b] += value;
        }
    }

    /// Records a guiding-weighted visit at separation `r`
    /// (OffDiagWeighted mode).
    pub fn record_weighted(&mut self, r: f64, weight: f64) {
        self.record_ratio(r, weight);
    }

    /// Closes one configuration/sample and seals a block when due.
    pub fn end_sample(&mut self) {
        self.n_samples += 1;
        if self.block_len == 0 {
            return;
        }
        self.cur_in_block += 1;
        if self.cur_in_block >= self.block_len {
            self.seal_block();
        }
    }

    fn seal_block(&mut self) {
        if self.cur_in_block == 0 {
            return;
        }
        self.block_sums.push(std::mem::replace(&mut self.open_sum, vec![0.0; self.n_bins]));
        self.block_counts.push(std::mem::replace(&mut self.open_count, vec![0; self.n_bins]));
        self.cur_in_block = 0;
    }

    pub fn n_sealed_blocks(&self) -> usize {
        self.block_sums.len()
    }

    /// Merges another walker's histogram (same geometry required); sums and
    /// counts add exactly, blocks concatenate.
    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if self.mode != other.mode || self.n_bins != other.n_bins || self.dr != other.dr {
            return Err(Error::Config("cannot merge histograms with different geometry".into()));
        }
        for i in 0..self.n_bins {
            self.sum[i] += other.sum[i];
            self.count[i] += other.count[i];
        }
        self.n_samples += other.n_samples;
        self.block_sums.extend(other.block_sums.iter().cloned());
        self.block_counts.extend(other.block_counts.iter().cloned());
        Ok(())
    }

    /// Normalized pair distribution: counts divided by
    /// `N rho (4/3) pi [(r+dr)^3 - r^3] n_samples / 2`, so that an
    /// uncorrelated system gives g -> 1. `rho` in A^-3.
    pub fn pair_distribution(&self, n_particles: usize, rho_inv_a3: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.n_bins);
        for i in 0..self.n_bins {
            let r_lo = i as f64 * self.dr;
            let r_hi = r_lo + self.dr;
            let shell = 4.0 / 3.0 * std::f64::consts::PI * (r_hi.powi(3) - r_lo.powi(3));
            let weight =
                n_particles as f64 * rho_inv_a3 * shell * self.n_samples as f64 / 2.0;
            out.push((self.bin_center(i), self.sum[i] / weight));
        }
        out
    }

    /// Per-bin means of recorded ratios; empty bins give NaN.
    pub fn ratio_curve(&self) -> Vec<(f64, f64)> {
        (0..self.n_bins)
            .map(|i| {
                let v = if self.count[i] == 0 {
                    f64::NAN
                } else {
                    self.sum[i] / self.count[i] as f64
                };
                (self.bin_center(i), v)
            })
            .collect()
    }

    /// Raw off-diagonal curve (per-bin weight sums) scaled by `norm`.
    pub fn offdiag_curve(&self, norm: f64) -> Vec<(f64, f64)> {
        (0..self.n_bins)
            .map(|i| (self.bin_center(i), self.sum[i] * norm))
            .collect()
    }

    /// Normalization constant that anchors the mean of the first
    /// `norm_bins` raw off-diagonal values to `anchor` (the direct
    /// estimator's small-r level, exactly 1 in the r -> 0 limit).
    pub fn offdiag_normalization(&self, norm_bins: usize, anchor: f64) -> Result<f64> {
        let k = norm_bins.min(self.n_bins);
        let m = self.sum[..k].iter().sum::<f64>() / k as f64;
        if !(m > 0.0) {
            return Err(Error::Domain(
                "off-diagonal histogram has no weight in the normalization bins".into(),
            ));
        }
        Ok(anchor / m)
    }

    /// Per-sealed-block plateau-window averages, for error bars. Ratio
    /// blocks average bin means; off-diagonal blocks scale to the full-run
    /// normalization.
    pub fn window_block_values(&self, window: (f64, f64), offdiag_norm: Option<f64>) -> Vec<f64> {
        let nb = self.block_sums.len();
        let mut out = Vec::with_capacity(nb);
        for b in 0..nb {
            let mut acc = 0.0;
            let mut bins = 0usize;
            for i in 0..self.n_bins {
                let r = self.bin_center(i);
                if r < window.0 || r > window.1 {
                    continue;
                }
                match offdiag_norm {
                    Some(norm) => {
                        acc += self.block_sums[b][i] * norm * nb as f64;
                        bins += 1;
                    }
                    None => {
                        if self.block_counts[b][i] > 0 {
                            acc += self.block_sums[b][i] / self.block_counts[b][i] as f64;
                            bins += 1;
                        }
                    }
                }
            }
            if bins > 0 {
                out.push(acc / bins as f64);
            }
        }
        out
    }
}

/// Plateau average of a rho1 curve over a window, with a slope test: the
/// plateau is accepted when the fitted slope is smaller than twice its
/// standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CondensateResult {
    pub n0: f64,
    pub error: f64,
    pub plateau_ok: bool,
    pub slope: f64,
    pub slope_err: f64,
    pub window: (f64, f64),
    pub bins_used: usize,
}

/// Plateau average over `window` of a (r, value) curve; NaN bins are
/// skipped. The returned error is 0; callers with block data fill it in.
pub fn condensate_fraction(curve: &[(f64, f64)], window: (f64, f64)) -> Result<CondensateResult> {
    let pts: Vec<(f64, f64)> = curve
        .iter()
        .filter(|(r, v)| *r >= window.0 && *r <= window.1 && v.is_finite())
        .cloned()
        .collect();
    if pts.len() < 3 {
        return Err(Error::Domain(format!(
            "plateau window [{}, {}] covers {} usable bins (need >= 3)",
            window.0,
            window.1,
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mean_r = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_v = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx = pts.iter().map(|p| (p.0 - mean_r).powi(2)).sum::<f64>();
    let sxy = pts.iter().map(|p| (p.0 - mean_r) * (p.1 - mean_v)).sum::<f64>();
    let slope = sxy / sxx;
    let ss_res = pts
        .iter()
        .map(|p| {
            let fit = mean_v + slope * (p.0 - mean_r);
            (p.1 - fit).powi(2)
        })
        .sum::<f64>();
    let slope_err = if pts.len() > 2 {
        (ss_res / (n - 2.0) / sxx).sqrt()
    } else {
        f64::INFINITY
    };
    // the epsilon keeps an exactly flat curve (slope = err = 0) passing
    let flat_tol = 2.0 * slope_err + 1e-12 * (1.0 + mean_v.abs());
    Ok(CondensateResult {
        n0: mean_v,
        error: 0.0,
        plateau_ok: slope.abs() < flat_tol,
        slope,
        slope_err,
        window,
        bins_used: pts.len(),
    })
}

/// Condensate fraction from a direct-estimator histogram, with the error
/// from the spread of per-block window averages.
pub fn condensate_direct(hist: &Histogram, window: (f64, f64)) -> Result<CondensateResult> {
    let mut result = condensate_fraction(&hist.ratio_curve(), window)?;
    result.error = block_sem(&hist.window_block_values(window, None));
    Ok(result)
}

/// Standard error of the mean over (nearly independent) block values.
pub(crate) fn block_sem(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::NAN;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Energy accumulators: the variance-reduced average over both shadow sets,
/// each single-set series, and the kinetic/potential split. All values are
/// per particle.
#[derive(Debug, Clone, Default)]
pub struct EnergyAccumulators {
    pub avg: ScalarAccumulator,
    pub s_only: ScalarAccumulator,
    pub sp_only: ScalarAccumulator,
    pub kinetic: ScalarAccumulator,
    pub potential: ScalarAccumulator,
}

impl EnergyAccumulators {
    pub fn merge(&mut self, other: &EnergyAccumulators) {
        self.avg.merge(&other.avg);
        self.s_only.merge(&other.s_only);
        self.sp_only.merge(&other.sp_only);
        self.kinetic.merge(&other.kinetic);
        self.potential.merge(&other.potential);
    }
}

/// Records (E_L(R,S) + E_L(R,S')) / 2N and the auxiliary series.
pub fn measure_energy(walker: &Walker, acc: &mut EnergyAccumulators) {
    let n = walker.n() as f64;
    let es = walker.local_energy(ShadowSet::S);
    let esp = walker.local_energy(ShadowSet::Sp);
    acc.avg.push(0.5 * (es.total + esp.total) / n);
    acc.s_only.push(es.total / n);
    acc.sp_only.push(esp.total / n);
    acc.kinetic.push(0.5 * (es.kinetic + esp.kinetic) / n);
    acc.potential.push(0.5 * (es.potential + esp.potential) / n);
}

/// Bins every minimum-image pair distance of one particle set. Call once
/// per configuration; closes the histogram sample itself.
pub fn measure_gofr(positions: &[Vec3], bx: &SimBox, hist: &mut Histogram) {
    for i in 0..positions.len() {
        for j in (i + 1)..positions.len() {
            hist.record_pair(bx.min_image_dist(positions[i], positions[j]));
        }
    }
    hist.end_sample();
}

/// Direct one-body density-matrix estimator: displaces one random atom to
/// a uniform point and bins the amplitude ratio
/// `psi_a(R') Theta(R',S) / psi_a(R) Theta(R,S)`, averaged over the two
/// shadow sets. The bin mean estimates rho1(r) normalized to 1 at r -> 0.
pub fn measure_rho1_direct(walker: &Walker, hist: &mut Histogram, rng: &mut RngStream) {
    let (r, s, sp) = walker.positions();
    let bx = walker.bx();
    let params = walker.params();
    let n = r.len();
    let i = rng.index(n);
    let r_new = rng.uniform_in_box(bx);
    let dist = bx.min_image_dist(r[i], r_new);

    // Jastrow ratio over the pairs touching atom i, same cutoff convention
    // as the full evaluation
    let rc = bx.half_min_edge();
    let b5 = params.b_a.powi(5);
    let mut d_log_a = 0.0;
    for j in 0..n {
        if j == i {
            continue;
        }
        let d_old = bx.min_image_dist(r[i], r[j]);
        let d_new = bx.min_image_dist(r_new, r[j]);
        if d_old < rc && d_old > 0.0 {
            d_log_a += 0.5 * b5 / d_old.powi(5);
        }
        if d_new < rc {
            if d_new == 0.0 {
                d_log_a = f64::NEG_INFINITY;
                break;
            }
            d_log_a -= 0.5 * b5 / d_new.powi(5);
        }
    }

    let parts = walker.log_psi_parts();
    let mut displaced = r.to_vec();
    displaced[i] = r_new;
    let th_s = KernelState::build(&displaced, s, params.c, bx).log_theta();
    let th_sp = KernelState::build(&displaced, sp, params.c, bx).log_theta();
    let ratio_s = (d_log_a + th_s - parts.log_theta_s).exp();
    let ratio_sp = (d_log_a + th_sp - parts.log_theta_sp).exp();
    hist.record_ratio(dist, 0.5 * (ratio_s + ratio_sp));
    hist.end_sample();
}

/// Guiding function for the off-diagonal sampling:
/// `n_a(r) = a exp(-r^2 / 2 w^2) + c`, positive everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidingFunction {
    pub a: f64,
    pub w: f64,
    pub c: f64,
}

impl GuidingFunction {
    pub fn new(a: f64, w: f64, c: f64) -> Result<Self> {
        if a < 0.0 || w <= 0.0 || c <= 0.0 {
            return Err(Error::Config(format!(
                "guiding function needs a >= 0, w > 0, c > 0 (got a={a}, w={w}, c={c})"
            )));
        }
        Ok(GuidingFunction { a, w, c })
    }

    #[inline]
    pub fn value(&self, r: f64) -> f64 {
        self.a * (-r * r / (2.0 * self.w * self.w)).exp() + self.c
    }

    /// d/dr log n_a(r).
    #[inline]
    pub fn dlog_dr(&self, r: f64) -> f64 {
        let g = self.a * (-r * r / (2.0 * self.w * self.w)).exp();
        -(r / (self.w * self.w)) * g / (g + self.c)
    }

    /// Gaussian-plus-constant fit to a measured rho1 curve: plateau level
    /// from the outer third, amplitude from the first bin, width from a
    /// log-linear fit of the decaying part.
    pub fn fit_from_curve(curve: &[(f64, f64)]) -> Result<Self> {
        let pts: Vec<(f64, f64)> = curve.iter().filter(|(_, v)| v.is_finite()).cloned().collect();
        if pts.len() < 6 {
            return Err(Error::Fit("guiding fit needs at least 6 usable bins".into()));
        }
        let tail_start = pts.len() * 2 / 3;
        let c = (pts[tail_start..].iter().map(|p| p.1).sum::<f64>()
            / (pts.len() - tail_start) as f64)
            .max(1e-4);
        let a = (pts[0].1 - c).max(1e-3);
        // ln(y - c) = ln a - r^2 / 2w^2 over the cleanly decaying bins
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        let mut m = 0.0;
        for (r, v) in &pts {
            let y = v - c;
            if y > 0.2 * a {
                let x = r * r;
                let ly = y.ln();
                sx += x;
                sy += ly;
                sxx += x * x;
                sxy += x * ly;
                m += 1.0;
            }
        }
        let denom = m * sxx - sx * sx;
        let w = if m >= 3.0 && denom.abs() > 1e-12 {
            let slope = (m * sxy - sx * sy) / denom;
            if slope < -1e-9 {
                (-0.5 / slope).sqrt()
            } else {
                pts.last().unwrap().0 / 4.0
            }
        } else {
            pts.last().unwrap().0 / 4.0
        };
        GuidingFunction::new(a, w, c)
    }
}
