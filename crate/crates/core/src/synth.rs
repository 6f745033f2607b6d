//! Synthetic skin-patch recordings with known pulse, respiration and SpO2.
//!
//! Each pixel of channel `c` is rendered as
//!
//! ```text
//! skin_c * texture(p) * illum(t) * (1 + a_c * bvp(t) + resp_amp * resp(t)) + noise
//! ```
//!
//! with `a_green = pulse_amp`, `a_ir = 0.6 * pulse_amp` and
//! `a_red = ratio(SpO2) * a_ir`, where `ratio` maps 100 % to 0.5 and 80 % to 1.0.
//! Illumination drift multiplies the RGB render only. Occlusions paint a dark
//! rectangle covering at least 40 % of the frame over runs of consecutive frames.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{DataError, Tensor, TimeSeries};
use crate::dataset::{self, day_dir_name, DatasetError, Scenario, SessionMeta};
use crate::timeline::{AlignedSession, Recording, TimelineError};

pub const VIDEO_FPS: f64 = 30.0;
pub const PPG_RATE_HZ: f64 = 20.0;
pub const RR_RATE_HZ: f64 = 50.0;
pub const SPO2_RATE_HZ: f64 = 1.0;
pub const MIN_DURATION_S: f64 = 5.0;
pub const SPEC_FILE: &str = "synth_spec.json";

const IR_PULSE_SCALE: f64 = 0.6;
const BLUE_PULSE_SCALE: f64 = 0.5;
const MIN_OCCLUDED_AREA: f64 = 0.4;
const OCCLUDER_LEVEL: f64 = 0.08;
const TEXTURE_SD: f64 = 0.05;
const IR_JITTER_MS: i64 = 3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub hr_bpm: f64,
    pub rr_bpm: f64,
    pub spo2_pct: f64,
    /// Relative pulsatile amplitude in green.
    pub pulse_amp: f64,
    /// Relative respiratory intensity modulation, common to all channels.
    pub resp_amp: f64,
    pub occlusion_frac_rgb: f64,
    pub occlusion_frac_ir: f64,
    pub illum_drift_amp: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub frame_hw: [usize; 2],
    pub skin_rgb: [f64; 3],
    pub skin_ir: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            hr_bpm: 72.0,
            rr_bpm: 15.0,
            spo2_pct: 97.0,
            pulse_amp: 0.02,
            resp_amp: 0.01,
            occlusion_frac_rgb: 0.0,
            occlusion_frac_ir: 0.0,
            illum_drift_amp: 0.0,
            noise_sigma: 0.01,
            seed: 0,
            frame_hw: [36, 36],
            skin_rgb: [0.62, 0.45, 0.36],
            skin_ir: 0.55,
        }
    }
}

fn in_range(name: &str, v: f64, lo: f64, hi: f64) -> Result<(), SynthError> {
    if (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(SynthError::Spec(format!("{name}={v} outside [{lo}, {hi}]")))
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        in_range("hr_bpm", self.hr_bpm, 40.0, 180.0)?;
        in_range("rr_bpm", self.rr_bpm, 8.0, 30.0)?;
        in_range("spo2_pct", self.spo2_pct, 80.0, 100.0)?;
        in_range("occlusion_frac_rgb", self.occlusion_frac_rgb, 0.0, 1.0)?;
        in_range("occlusion_frac_ir", self.occlusion_frac_ir, 0.0, 1.0)?;
        in_range("pulse_amp", self.pulse_amp, 0.0, 0.5)?;
        in_range("resp_amp", self.resp_amp, 0.0, 0.5)?;
        in_range("illum_drift_amp", self.illum_drift_amp, 0.0, 0.5)?;
        in_range("noise_sigma", self.noise_sigma, 0.0, 1.0)?;
        for (i, s) in self.skin_rgb.iter().chain([&self.skin_ir]).enumerate() {
            in_range(&format!("skin[{i}]"), *s, 0.05, 1.0)?;
        }
        if self.frame_hw.contains(&0) {
            return Err(SynthError::Spec("frame_hw must be positive".into()));
        }
        Ok(())
    }

    /// Red/IR pulsatile amplitude ratio for this SpO2 (100 % -> 0.5, 80 % -> 1.0).
    pub fn red_ir_ratio(&self) -> f64 {
        red_ir_ratio(self.spo2_pct)
    }
}

pub fn red_ir_ratio(spo2_pct: f64) -> f64 {
    0.5 + 0.025 * (100.0 - spo2_pct)
}

/// A generated recording, its alignment onto the frame clock, and the spec that made it.
#[derive(Debug, Clone)]
pub struct SynthSession {
    pub spec: SynthSpec,
    pub recording: Recording,
    pub aligned: AlignedSession,
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
}

/// Per-frame occluder, as runs of 15-45 frames placed at random gaps.
fn occlusion_plan(frames: usize, frac: f64, hw: [usize; 2], rng: &mut ChaCha8Rng) -> Vec<Option<Rect>> {
    let mut plan = vec![None; frames];
    let target = (frac * frames as f64).round() as usize;
    if target == 0 {
        return plan;
    }
    let mut runs = Vec::new();
    let mut covered = 0;
    while covered < target {
        let len = rng.gen_range(15..=45).min(target - covered);
        runs.push(len);
        covered += len;
    }
    let free = frames - target;
    let mut cuts: Vec<usize> = (0..runs.len()).map(|_| rng.gen_range(0..=free)).collect();
    cuts.sort_unstable();
    let [h, w] = hw;
    let area = h * w;
    let mut at = 0usize;
    let mut prev_cut = 0usize;
    for (len, cut) in runs.into_iter().zip(cuts) {
        at += cut - prev_cut;
        prev_cut = cut;
        let rw = rng.gen_range(((MIN_OCCLUDED_AREA * w as f64).ceil() as usize).max(1)..=w);
        let min_h = ((MIN_OCCLUDED_AREA * area as f64) / rw as f64).ceil() as usize;
        let rh = rng.gen_range(min_h.clamp(1, h)..=h);
        let rect = Rect {
            y0: rng.gen_range(0..=h - rh),
            x0: rng.gen_range(0..=w - rw),
            h: rh,
            w: rw,
        };
        for slot in &mut plan[at..at + len] {
            *slot = Some(rect);
        }
        at += len;
    }
    plan
}

fn texture(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, TEXTURE_SD).expect("valid sd");
    (0..n).map(|_| (1.0 + normal.sample(rng)).clamp(0.8, 1.2)).collect()
}

/// Renders a recording at the native stream rates and aligns it.
pub fn generate(spec: &SynthSpec, duration_s: f64) -> Result<SynthSession, SynthError> {
    spec.validate()?;
    if !(duration_s >= MIN_DURATION_S) || !duration_s.is_finite() {
        return Err(SynthError::Spec(format!(
            "duration {duration_s} s shorter than {MIN_DURATION_S} s"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [h, w] = spec.frame_hw;
    let plane = h * w;
    let frames = (duration_s * VIDEO_FPS).floor() as usize;

    let hr_hz = spec.hr_bpm / 60.0;
    let rr_hz = spec.rr_bpm / 60.0;
    let pulse_phase = rng.gen_range(0.0..2.0 * PI);
    let resp_phase = rng.gen_range(0.0..2.0 * PI);
    let bvp = move |t: f64| (2.0 * PI * hr_hz * t + pulse_phase).sin();
    let resp = move |t: f64| (2.0 * PI * rr_hz * t + resp_phase).sin();

    let drift_f = [rng.gen_range(0.05..0.15), rng.gen_range(0.15..0.4)];
    let drift_ph = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
    let illum = |t: f64| {
        1.0 + spec.illum_drift_amp
            * (0.6 * (2.0 * PI * drift_f[0] * t + drift_ph[0]).sin()
                + 0.4 * (2.0 * PI * drift_f[1] * t + drift_ph[1]).sin())
    };

    let tex_rgb = texture(plane, &mut rng);
    let tex_ir = texture(plane, &mut rng);
    let occ_rgb = occlusion_plan(frames, spec.occlusion_frac_rgb, spec.frame_hw, &mut rng);
    let occ_ir = occlusion_plan(frames, spec.occlusion_frac_ir, spec.frame_hw, &mut rng);

    let rgb_clock: Vec<i64> = (0..frames)
        .map(|i| (i as f64 * 1000.0 / VIDEO_FPS).round() as i64)
        .collect();
    let ir_clock: Vec<i64> = rgb_clock
        .iter()
        .map(|&t| t + rng.gen_range(-IR_JITTER_MS..=IR_JITTER_MS))
        .collect();

    let amp_g = spec.pulse_amp;
    let amp_ir = IR_PULSE_SCALE * spec.pulse_amp;
    let amp = [spec.red_ir_ratio() * amp_ir, amp_g, BLUE_PULSE_SCALE * amp_g];
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let draw = |rng: &mut ChaCha8Rng| if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
    let inside = |r: &Option<Rect>, p: usize| {
        r.map_or(false, |r| {
            let (y, x) = (p / w, p % w);
            y >= r.y0 && y < r.y0 + r.h && x >= r.x0 && x < r.x0 + r.w
        })
    };

    let mut rgb = Vec::with_capacity(frames * plane * 3);
    for (i, &t_ms) in rgb_clock.iter().enumerate() {
        let t = t_ms as f64 / 1000.0;
        let (b, r, li) = (bvp(t), resp(t), illum(t));
        for p in 0..plane {
            let occluded = inside(&occ_rgb[i], p);
            for c in 0..3 {
                let v = if occluded {
                    OCCLUDER_LEVEL
                } else {
                    spec.skin_rgb[c] * tex_rgb[p] * li * (1.0 + amp[c] * b + spec.resp_amp * r)
                };
                rgb.push(v + draw(&mut rng));
            }
        }
    }
    let mut ir = Vec::with_capacity(frames * plane);
    for (i, &t_ms) in ir_clock.iter().enumerate() {
        let t = t_ms as f64 / 1000.0;
        let (b, r) = (bvp(t), resp(t));
        for p in 0..plane {
            let v = if inside(&occ_ir[i], p) {
                OCCLUDER_LEVEL
            } else {
                spec.skin_ir * tex_ir[p] * (1.0 + amp_ir * b + spec.resp_amp * r)
            };
            ir.push(v + draw(&mut rng));
        }
    }

    let span_ms = (duration_s * 1000.0).round() as i64;
    let label = |rate: f64, f: &dyn Fn(f64) -> f64| -> Result<TimeSeries, DataError> {
        let n = (span_ms as f64 * rate / 1000.0).floor() as usize + 1;
        let ts: Vec<i64> = (0..n).map(|k| (k as f64 * 1000.0 / rate).round() as i64).collect();
        let vs = ts.iter().map(|&t| f(t as f64 / 1000.0)).collect();
        TimeSeries::new(ts, vs)
    };
    let recording = Recording {
        rgb: Tensor::new(vec![frames, h, w, 3], rgb)?,
        ir: Tensor::new(vec![frames, h, w, 1], ir)?,
        rgb_clock_ms: rgb_clock,
        ir_clock_ms: ir_clock,
        ppg: label(PPG_RATE_HZ, &bvp)?,
        rr: label(RR_RATE_HZ, &resp)?,
        spo2: label(SPO2_RATE_HZ, &|_| spec.spo2_pct)?,
    };
    let aligned = recording.align()?;
    Ok(SynthSession {
        spec: spec.clone(),
        recording,
        aligned,
    })
}

/// Ranges and fixed settings for a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub hr_bpm: [f64; 2],
    pub rr_bpm: [f64; 2],
    pub spo2_pct: [f64; 2],
    pub pulse_amp: f64,
    pub resp_amp: f64,
    pub noise_sigma: f64,
    pub illum_drift_amp: f64,
    /// RGB occlusion fraction applied to every session.
    pub occlusion_frac_rgb: f64,
    /// Extra occlusion in both modalities during personal-care scenarios.
    pub care_occlusion_frac: f64,
    pub duration_s: f64,
    pub frame_hw: [usize; 2],
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            hr_bpm: [50.0, 120.0],
            rr_bpm: [10.0, 24.0],
            spo2_pct: [88.0, 100.0],
            pulse_amp: 0.02,
            resp_amp: 0.01,
            noise_sigma: 0.003,
            illum_drift_amp: 0.0,
            occlusion_frac_rgb: 0.0,
            care_occlusion_frac: 0.15,
            duration_s: 10.0,
            frame_hw: [36, 36],
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, r, lo, hi) in [
            ("hr_bpm", self.hr_bpm, 40.0, 180.0),
            ("rr_bpm", self.rr_bpm, 8.0, 30.0),
            ("spo2_pct", self.spo2_pct, 80.0, 100.0),
        ] {
            if !(r[0] < r[1]) {
                return Err(SynthError::Spec(format!("{name} range {r:?} is empty")));
            }
            in_range(name, r[0], lo, hi)?;
            in_range(name, r[1], lo, hi)?;
        }
        in_range("care_occlusion_frac", self.care_occlusion_frac, 0.0, 1.0)?;
        if self.duration_s < MIN_DURATION_S {
            return Err(SynthError::Spec(format!("duration_s {} < {MIN_DURATION_S}", self.duration_s)));
        }
        Ok(())
    }
}

fn lower_half(r: [f64; 2]) -> [f64; 2] {
    [r[0], 0.5 * (r[0] + r[1])]
}

fn upper_half(r: [f64; 2]) -> [f64; 2] {
    [0.5 * (r[0] + r[1]), r[1]]
}

fn draw_in(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    rng.gen_range(r[0]..=r[1])
}

/// One session of a planned cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedSession {
    pub meta: SessionMeta,
    pub spec: SynthSpec,
}

pub fn subject_id(i: usize) -> String {
    format!("S{:02}", i + 1)
}

/// Draws per-subject traits (skin tone, resting HR/RR) and per-session vital signs.
/// Resting states use the lower half of the HR range and upper half of SpO2;
/// post-exercise uses the upper half of HR and the lower half of SpO2.
pub fn plan_cohort(
    cohort: &CohortSpec,
    n_subjects: usize,
    n_days: usize,
    seed: u64,
    root: &Path,
) -> Result<Vec<PlannedSession>, SynthError> {
    cohort.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hr_lo = lower_half(cohort.hr_bpm);
    let rr_lo = lower_half(cohort.rr_bpm);
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(n_subjects * n_days * Scenario::ALL.len());
    for s in 0..n_subjects {
        let subject = subject_id(s);
        let tone = rng.gen_range(0.75..1.15);
        let skin_rgb = [0.62 * tone, 0.45 * tone, 0.36 * tone];
        let skin_ir = rng.gen_range(0.45..0.65);
        let rest_hr = draw_in(&mut rng, [hr_lo[0], hr_lo[1] - 8.0]);
        let rest_rr = draw_in(&mut rng, rr_lo);
        for d in 1..=n_days as u32 {
            let day_shift = 2.0 * jitter.sample(&mut rng);
            for sc in Scenario::ALL {
                let stand = matches!(sc, Scenario::StandRest | Scenario::StandCare);
                let (hr, rr, spo2) = if sc == Scenario::PostExercise {
                    (
                        draw_in(&mut rng, upper_half(cohort.hr_bpm)),
                        draw_in(&mut rng, upper_half(cohort.rr_bpm)),
                        draw_in(&mut rng, lower_half(cohort.spo2_pct)),
                    )
                } else {
                    let hr = rest_hr + day_shift + if stand { 5.0 } else { 0.0 } + jitter.sample(&mut rng);
                    let rr = rest_rr + 0.5 * jitter.sample(&mut rng);
                    (
                        hr.clamp(hr_lo[0], hr_lo[1]),
                        rr.clamp(rr_lo[0], rr_lo[1]),
                        draw_in(&mut rng, upper_half(cohort.spo2_pct)),
                    )
                };
                let care = if sc.is_care() { cohort.care_occlusion_frac } else { 0.0 };
                let spec = SynthSpec {
                    hr_bpm: hr,
                    rr_bpm: rr,
                    spo2_pct: spo2,
                    pulse_amp: cohort.pulse_amp,
                    resp_amp: cohort.resp_amp,
                    occlusion_frac_rgb: (cohort.occlusion_frac_rgb + care).min(1.0),
                    occlusion_frac_ir: care,
                    illum_drift_amp: cohort.illum_drift_amp,
                    noise_sigma: cohort.noise_sigma,
                    seed: rng.gen(),
                    frame_hw: cohort.frame_hw,
                    skin_rgb,
                    skin_ir,
                };
                let path = root.join(&subject).join(day_dir_name(d)).join(sc.dir_name());
                out.push(PlannedSession {
                    meta: SessionMeta {
                        subject_id: subject.clone(),
                        day_index: d,
                        scenario: sc,
                        path,
                    },
                    spec,
                });
            }
        }
    }
    Ok(out)
}

/// Writes one synthetic session directory, including its spec as JSON.
pub fn write_session(dir: &Path, session: &SynthSession) -> Result<(), SynthError> {
    dataset::write_recording(dir, &session.recording)?;
    let json = serde_json::to_string_pretty(&session.spec).expect("spec serializes") + "\n";
    let path = dir.join(SPEC_FILE);
    fs::write(&path, json).map_err(|source| SynthError::Io { path, source })
}

/// Emits a LADH-lite tree of `n_subjects x n_days x 5` sessions under `out`.
pub fn batch_dataset(
    cohort: &CohortSpec,
    n_subjects: usize,
    n_days: usize,
    seed: u64,
    out: &Path,
) -> Result<usize, SynthError> {
    let plan = plan_cohort(cohort, n_subjects, n_days, seed, out)?;
    fs::create_dir_all(out).map_err(|source| SynthError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    plan.par_iter().try_for_each(|p| {
        let session = generate(&p.spec, cohort.duration_s)?;
        write_session(&p.meta.path, &session)
    })?;
    Ok(plan.len())
}
