//! Spectral rate estimation and error metrics.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum FFT length after zero-padding.
pub const MIN_FFT_LEN: usize = 2048;
pub const MIN_SPECTRUM_LEN: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum SigError {
    #[error("detrend window must be odd and >= 3, got {0}")]
    BadWindow(usize),
    #[error("signal needs at least {MIN_SPECTRUM_LEN} samples, got {0}")]
    TooShort(usize),
    #[error("sampling rate must be positive, got {0}")]
    BadRate(f64),
    #[error("invalid band [{low}, {high}] Hz")]
    BadBand { low: f64, high: f64 },
    #[error("no spectral bin inside [{low}, {high}] Hz")]
    EmptyBand { low: f64, high: f64 },
    #[error("length mismatch: {0} predictions vs {1} ground-truth values")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("ground truth contains zero at index {0}")]
    ZeroTruth(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralBand {
    low_hz: f64,
    high_hz: f64,
}

impl SpectralBand {
    pub fn new(low_hz: f64, high_hz: f64) -> Result<Self, SigError> {
        if !(low_hz > 0.0 && low_hz < high_hz && high_hz.is_finite()) {
            return Err(SigError::BadBand {
                low: low_hz,
                high: high_hz,
            });
        }
        Ok(Self { low_hz, high_hz })
    }

    /// 36 to 198 BPM.
    pub const fn heart() -> Self {
        Self {
            low_hz: 0.6,
            high_hz: 3.3,
        }
    }

    /// 6 to 30 breaths/min.
    pub const fn respiration() -> Self {
        Self {
            low_hz: 0.1,
            high_hz: 0.5,
        }
    }

    pub fn low_hz(&self) -> f64 {
        self.low_hz
    }

    pub fn high_hz(&self) -> f64 {
        self.high_hz
    }
}

/// Subtracts a centered moving average; near the edges the window shrinks symmetrically.
pub fn detrend(x: &[f64], window: usize) -> Result<Vec<f64>, SigError> {
    if window < 3 || window % 2 == 0 {
        return Err(SigError::BadWindow(window));
    }
    let half = window / 2;
    let n = x.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for v in x {
        prefix.push(prefix.last().unwrap() + v);
    }
    Ok((0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            let (lo, hi) = (i - h, i + h + 1);
            x[i] - (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect())
}

pub fn fft_len(n: usize) -> usize {
    n.next_power_of_two().max(MIN_FFT_LEN)
}

/// Hann-windowed periodogram zero-padded to `fft_len(n)`; bins from 0 to fs/2.
pub fn power_spectrum(x: &[f64], fs_hz: f64) -> Result<Vec<(f64, f64)>, SigError> {
    if !(fs_hz > 0.0) || !fs_hz.is_finite() {
        return Err(SigError::BadRate(fs_hz));
    }
    if x.len() < MIN_SPECTRUM_LEN {
        return Err(SigError::TooShort(x.len()));
    }
    let n = x.len();
    let nfft = fft_len(n);
    let hann = |i: usize| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| Complex::new(v * hann(i), 0.0))
        .collect();
    buf.resize(nfft, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    let w2: f64 = (0..n).map(|i| hann(i).powi(2)).sum();
    let scale = 1.0 / (fs_hz * w2);
    Ok((0..=nfft / 2)
        .map(|k| (k as f64 * fs_hz / nfft as f64, buf[k].norm_sqr() * scale))
        .collect())
}

/// 60 x the frequency of maximum power inside `band` (mean removed first).
/// Ties go to the lower frequency.
pub fn dominant_rate_bpm(x: &[f64], fs_hz: f64, band: SpectralBand) -> Result<f64, SigError> {
    let mean = x.iter().sum::<f64>() / x.len().max(1) as f64;
    let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let spec = power_spectrum(&centered, fs_hz)?;
    let mut best: Option<(f64, f64)> = None;
    for &(f, p) in spec.iter().filter(|(f, _)| *f >= band.low_hz && *f <= band.high_hz) {
        if best.map_or(true, |(_, bp)| p > bp) {
            best = Some((f, p));
        }
    }
    best.map(|(f, _)| 60.0 * f).ok_or(SigError::EmptyBand {
        low: band.low_hz,
        high: band.high_hz,
    })
}

fn check_pair(pred: &[f64], gt: &[f64]) -> Result<(), SigError> {
    if pred.len() != gt.len() {
        return Err(SigError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(SigError::Empty);
    }
    Ok(())
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64, SigError> {
    check_pair(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean absolute percentage error, in percent.
pub fn mape(pred: &[f64], gt: &[f64]) -> Result<f64, SigError> {
    check_pair(pred, gt)?;
    if let Some(i) = gt.iter().position(|&g| g == 0.0) {
        return Err(SigError::ZeroTruth(i));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - g).abs() / g.abs())
        .sum::<f64>()
        / pred.len() as f64
        * 100.0)
}
