//! Multi-rate stream alignment onto the video clock, and windowing.
//!
//! The RGB frame clock is the master grid. IR frames are paired by nearest
//! timestamp and the three reference traces are linearly resampled onto it.

use thiserror::Error;

use crate::dataio::{Tensor, TimeSeries};

/// Maximum |rgb_ts - ir_ts| for two frames to count as a pair.
pub const PAIR_TOLERANCE_MS: i64 = 25;
/// Fraction of unmatched frame pairs above which alignment fails.
pub const MAX_DROP_FRACTION: f64 = 0.10;
pub const DEFAULT_WINDOW_LEN: usize = 150;
pub const LABEL_VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TimelineError {
    #[error("cannot resample an empty series")]
    EmptySource,
    #[error("streams do not overlap in time")]
    EmptyOverlap,
    #[error("{dropped} of {total} frame pairs exceed the ±{PAIR_TOLERANCE_MS} ms pairing tolerance")]
    TooManyDrops { dropped: usize, total: usize },
    #[error("{0}")]
    Shape(String),
    #[error("{name} clock is not strictly increasing")]
    ClockOrder { name: &'static str },
    #[error("SpO2 value {0} outside [0, 100]")]
    Spo2Range(f64),
    #[error("window length {window_len} exceeds session length {len}")]
    WindowTooLong { window_len: usize, len: usize },
    #[error("invalid windowing parameters: {0}")]
    BadWindowing(String),
}

/// Raw, unaligned streams of one recording.
#[derive(Debug, Clone)]
pub struct Recording {
    /// `[T_rgb, H, W, 3]`
    pub rgb: Tensor,
    /// `[T_ir, H, W, 1]`
    pub ir: Tensor,
    pub rgb_clock_ms: Vec<i64>,
    pub ir_clock_ms: Vec<i64>,
    pub ppg: TimeSeries,
    pub rr: TimeSeries,
    pub spo2: TimeSeries,
}

impl Recording {
    pub fn align(&self) -> Result<AlignedSession, TimelineError> {
        align_session(
            &self.rgb,
            &self.ir,
            &self.rgb_clock_ms,
            &self.ir_clock_ms,
            &self.ppg,
            &self.rr,
            &self.spo2,
        )
    }
}

/// Every stream on the RGB frame clock.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSession {
    pub frame_clock_ms: Vec<i64>,
    /// `[T, H, W, 3]`
    pub rgb: Tensor,
    /// `[T, H, W, 1]`
    pub ir: Tensor,
    pub bvp: Vec<f64>,
    pub rr: Vec<f64>,
    /// Percent, in `[0, 100]`.
    pub spo2: Vec<f64>,
}

impl AlignedSession {
    pub fn len(&self) -> usize {
        self.frame_clock_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_clock_ms.is_empty()
    }

    /// Mean frame rate over the session; 30 Hz for single-frame sessions.
    pub fn frame_rate_hz(&self) -> f64 {
        let n = self.frame_clock_ms.len();
        if n < 2 {
            return 30.0;
        }
        (n - 1) as f64 * 1000.0 / (self.frame_clock_ms[n - 1] - self.frame_clock_ms[0]) as f64
    }

    pub fn frame_hw(&self) -> (usize, usize) {
        (self.rgb.dims()[1], self.rgb.dims()[2])
    }
}

/// One training/inference clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// `[L, H, W, 3]`
    pub rgb: Tensor,
    /// `[L, H, W, 1]`
    pub ir: Tensor,
    /// Standardized to zero mean, unit variance.
    pub bvp: Vec<f64>,
    /// Standardized to zero mean, unit variance.
    pub rr: Vec<f64>,
    pub spo2_mean: f64,
    /// Frame clock of the first frame of the window.
    pub start_ms: i64,
    /// Frame rate of the session the window was cut from.
    pub fs_hz: f64,
    /// Tag of the session the window was cut from; metrics aggregate per tag.
    pub session: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WindowBatch {
    pub windows: Vec<Window>,
    pub window_len: usize,
}

impl WindowBatch {
    pub fn new(window_len: usize) -> Self {
        Self {
            windows: Vec::new(),
            window_len,
        }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Appends all windows of `other`; window lengths must agree.
    pub fn extend(&mut self, other: WindowBatch) -> Result<(), TimelineError> {
        if !other.is_empty() && !self.is_empty() && other.window_len != self.window_len {
            return Err(TimelineError::BadWindowing(format!(
                "cannot merge window lengths {} and {}",
                self.window_len, other.window_len
            )));
        }
        if self.is_empty() {
            self.window_len = other.window_len;
        }
        self.windows.extend(other.windows);
        Ok(())
    }
}

/// Linear interpolation of `s` at each target time, holding the end values outside the span.
pub fn resample_linear(s: &TimeSeries, target_clock_ms: &[i64]) -> Result<Vec<f64>, TimelineError> {
    resample_raw(s.timestamps_ms(), s.values(), target_clock_ms)
}

pub(crate) fn resample_raw(
    ts: &[i64],
    vs: &[f64],
    target_clock_ms: &[i64],
) -> Result<Vec<f64>, TimelineError> {
    if ts.is_empty() {
        return Err(TimelineError::EmptySource);
    }
    let last = ts.len() - 1;
    let mut j = 0usize;
    let mut out = Vec::with_capacity(target_clock_ms.len());
    for &t in target_clock_ms {
        if t <= ts[0] {
            out.push(vs[0]);
            continue;
        }
        if t >= ts[last] {
            out.push(vs[last]);
            continue;
        }
        // targets are increasing, so the bracket only moves forward
        if ts[j] > t {
            j = 0;
        }
        while ts[j + 1] < t {
            j += 1;
        }
        let (t0, t1) = (ts[j], ts[j + 1]);
        let frac = (t - t0) as f64 / (t1 - t0) as f64;
        out.push(vs[j] + frac * (vs[j + 1] - vs[j]));
    }
    Ok(out)
}

fn strictly_increasing(c: &[i64]) -> bool {
    c.windows(2).all(|w| w[1] > w[0])
}

fn frame_stride(t: &Tensor) -> usize {
    t.dims()[1..].iter().product()
}

/// Puts all streams on the RGB frame clock restricted to the common overlap.
pub fn align_session(
    frames_rgb: &Tensor,
    frames_ir: &Tensor,
    rgb_clock_ms: &[i64],
    ir_clock_ms: &[i64],
    ppg: &TimeSeries,
    rr: &TimeSeries,
    spo2: &TimeSeries,
) -> Result<AlignedSession, TimelineError> {
    let (rd, id) = (frames_rgb.dims(), frames_ir.dims());
    if rd.len() != 4 || rd[3] != 3 {
        return Err(TimelineError::Shape(format!("RGB frames must be [T,H,W,3], got {rd:?}")));
    }
    if id.len() != 4 || id[3] != 1 {
        return Err(TimelineError::Shape(format!("IR frames must be [T,H,W,1], got {id:?}")));
    }
    if rd[1..3] != id[1..3] {
        return Err(TimelineError::Shape(format!(
            "RGB and IR spatial sizes differ: {:?} vs {:?}",
            &rd[1..3],
            &id[1..3]
        )));
    }
    if rd[0] != rgb_clock_ms.len() || id[0] != ir_clock_ms.len() {
        return Err(TimelineError::Shape(format!(
            "clock lengths ({}, {}) do not match frame counts ({}, {})",
            rgb_clock_ms.len(),
            ir_clock_ms.len(),
            rd[0],
            id[0]
        )));
    }
    if !strictly_increasing(rgb_clock_ms) {
        return Err(TimelineError::ClockOrder { name: "RGB" });
    }
    if !strictly_increasing(ir_clock_ms) {
        return Err(TimelineError::ClockOrder { name: "IR" });
    }
    if let Some(&v) = spo2.values().iter().find(|v| !(0.0..=100.0).contains(*v)) {
        return Err(TimelineError::Spo2Range(v));
    }

    let start = [
        rgb_clock_ms[0],
        ir_clock_ms[0],
        ppg.first_ms(),
        rr.first_ms(),
        spo2.first_ms(),
    ]
    .into_iter()
    .max()
    .expect("nonempty");
    let end = [
        rgb_clock_ms[rgb_clock_ms.len() - 1],
        ir_clock_ms[ir_clock_ms.len() - 1],
        ppg.last_ms(),
        rr.last_ms(),
        spo2.last_ms(),
    ]
    .into_iter()
    .min()
    .expect("nonempty");
    if start > end {
        return Err(TimelineError::EmptyOverlap);
    }

    let candidates: Vec<usize> = (0..rgb_clock_ms.len())
        .filter(|&i| (start..=end).contains(&rgb_clock_ms[i]))
        .collect();
    if candidates.is_empty() {
        return Err(TimelineError::EmptyOverlap);
    }

    let mut pairs = Vec::with_capacity(candidates.len());
    let mut j = 0usize;
    for &i in &candidates {
        let t = rgb_clock_ms[i];
        while j + 1 < ir_clock_ms.len()
            && (ir_clock_ms[j + 1] - t).abs() <= (ir_clock_ms[j] - t).abs()
        {
            j += 1;
        }
        if (ir_clock_ms[j] - t).abs() <= PAIR_TOLERANCE_MS {
            pairs.push((i, j));
        }
    }
    let dropped = candidates.len() - pairs.len();
    if dropped as f64 > MAX_DROP_FRACTION * candidates.len() as f64 || pairs.is_empty() {
        return Err(TimelineError::TooManyDrops {
            dropped,
            total: candidates.len(),
        });
    }

    let (h, w) = (rd[1], rd[2]);
    let (rs, is) = (frame_stride(frames_rgb), frame_stride(frames_ir));
    let mut rgb = Vec::with_capacity(pairs.len() * rs);
    let mut ir = Vec::with_capacity(pairs.len() * is);
    let mut clock = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        rgb.extend_from_slice(&frames_rgb.data()[i * rs..(i + 1) * rs]);
        ir.extend_from_slice(&frames_ir.data()[j * is..(j + 1) * is]);
        clock.push(rgb_clock_ms[i]);
    }
    let t = clock.len();
    Ok(AlignedSession {
        bvp: resample_linear(ppg, &clock)?,
        rr: resample_linear(rr, &clock)?,
        spo2: resample_linear(spo2, &clock)?,
        rgb: Tensor::from_parts(vec![t, h, w, 3], rgb),
        ir: Tensor::from_parts(vec![t, h, w, 1], ir),
        frame_clock_ms: clock,
    })
}

/// Zero-mean, unit-variance copy of `x` (population variance, floored).
pub fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.max(LABEL_VARIANCE_FLOOR).sqrt();
    x.iter().map(|v| (v - mean) / sd).collect()
}

pub fn window_count(len: usize, window_len: usize, stride: usize) -> usize {
    if window_len == 0 || stride == 0 || window_len > len {
        0
    } else {
        (len - window_len) / stride + 1
    }
}

/// Cuts `floor((T - L)/stride) + 1` windows tagged with `session`.
pub fn make_windows(
    a: &AlignedSession,
    window_len: usize,
    stride: usize,
    session: &str,
) -> Result<WindowBatch, TimelineError> {
    if window_len == 0 || stride == 0 {
        return Err(TimelineError::BadWindowing(format!(
            "window_len={window_len}, stride={stride}; both must be positive"
        )));
    }
    let len = a.len();
    if window_len > len {
        return Err(TimelineError::WindowTooLong { window_len, len });
    }
    let (h, w) = a.frame_hw();
    let (rs, is) = (frame_stride(&a.rgb), frame_stride(&a.ir));
    let fs_hz = a.frame_rate_hz();
    let windows = (0..window_count(len, window_len, stride))
        .map(|k| {
            let s = k * stride;
            let e = s + window_len;
            let spo2 = &a.spo2[s..e];
            Window {
                rgb: Tensor::from_parts(vec![window_len, h, w, 3], a.rgb.data()[s * rs..e * rs].to_vec()),
                ir: Tensor::from_parts(vec![window_len, h, w, 1], a.ir.data()[s * is..e * is].to_vec()),
                bvp: standardize(&a.bvp[s..e]),
                rr: standardize(&a.rr[s..e]),
                spo2_mean: spo2.iter().sum::<f64>() / window_len as f64,
                start_ms: a.frame_clock_ms[s],
                fs_hz,
                session: session.to_string(),
            }
        })
        .collect();
    Ok(WindowBatch { windows, window_len })
}
