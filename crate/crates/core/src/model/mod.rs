//! Dual-modality spatiotemporal encoder with gated fusion and three task heads.
//!
//! Both modalities run through one shared stack of
//! `conv3d -> ReLU -> 2x2 avg-pool` blocks followed by spatial global-average
//! pooling, giving an `[F, L]` feature map per modality. A per-channel gate
//! computed from the time-averaged features of both modalities mixes them:
//!
//! ```text
//! c     = [mean_t f_rgb ; mean_t f_ir]          (2F)
//! g     = sigmoid(k (W2 relu(W1 c + b1) + b2))  (F)
//! fused = g * f_rgb + (1 - g) * f_ir            (F x L)
//! ```
//!
//! The BVP and RR heads are per-frame linear projections of `fused`; the SpO2
//! head is `100 * sigmoid(s w . mean_t fused + b)`. The gains `k` and `s` are
//! fixed by the config.

mod net;
pub mod ops;

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{self, DataError, Tensor};

pub use net::{
    backward, conv3d_forward, encode, forward, fuse, prepare_input, Activations, ForwardPass,
    ModelInput, Prediction, Upstream,
};

pub const RGB_CHANNELS: usize = 3;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("forward pass did not retain activations")]
    MissingActivations,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

/// Which inputs feed the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Ir,
    Both,
}

impl Modality {
    pub fn label(self) -> &'static str {
        match self {
            Modality::Rgb => "RGB",
            Modality::Ir => "IR",
            Modality::Both => "Both",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Rgb => "rgb",
            Modality::Ir => "ir",
            Modality::Both => "both",
        })
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "ir" => Ok(Modality::Ir),
            "both" => Ok(Modality::Both),
            _ => Err(format!("unknown modality `{s}` (expected rgb, ir or both)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Spatial input size `[H, W]`.
    pub in_hw: [usize; 2],
    pub window_len: usize,
    pub enc_channels: Vec<usize>,
    pub gate_hidden: usize,
    /// Conv kernel `[kt, kh, kw]`; `kt` must be odd.
    pub kernel: [usize; 3],
    /// Scale applied to the per-pixel relative intensity change `x / median_t(x) - 1`.
    pub input_gain: f64,
    /// Scaled samples beyond this magnitude are zeroed as artifacts; `0` keeps everything.
    pub outlier_threshold: f64,
    /// Fixed multiplier on the SpO2 head's weight term.
    pub spo2_gain: f64,
    /// Fixed multiplier on the gate's pre-sigmoid activation.
    pub gate_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_hw: [36, 36],
            window_len: crate::timeline::DEFAULT_WINDOW_LEN,
            enc_channels: vec![8, 16],
            gate_hidden: 8,
            kernel: [3, 2, 2],
            input_gain: 50.0,
            outlier_threshold: 5.0,
            spo2_gain: 16.0,
            gate_gain: 4.0,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            in_hw: [8, 8],
            window_len: 16,
            enc_channels: vec![2],
            gate_hidden: 3,
            ..Self::default()
        }
    }

    pub fn features(&self) -> usize {
        *self.enc_channels.last().expect("validated config")
    }

    /// Spatial size entering each block, plus the size after the last block.
    pub fn block_sizes(&self) -> Result<Vec<[usize; 2]>, ModelError> {
        let [_, kh, kw] = self.kernel;
        let mut hw = self.in_hw;
        let mut sizes = vec![hw];
        for (b, _) in self.enc_channels.iter().enumerate() {
            if hw[0] < kh || hw[1] < kw {
                return Err(ModelError::Config(format!(
                    "spatial size {hw:?} exhausted before block {b} (kernel {kh}x{kw})"
                )));
            }
            hw = [(hw[0] - kh + 1) / 2, (hw[1] - kw + 1) / 2];
            if hw[0] == 0 || hw[1] == 0 {
                return Err(ModelError::Config(format!(
                    "spatial size exhausted by pooling after block {b}"
                )));
            }
            sizes.push(hw);
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.enc_channels.is_empty() || self.enc_channels.contains(&0) {
            return bad("enc_channels must be nonempty and positive".into());
        }
        if self.window_len == 0 {
            return bad("window_len must be positive".into());
        }
        if self.gate_hidden == 0 {
            return bad("gate_hidden must be positive".into());
        }
        let [kt, kh, kw] = self.kernel;
        if kt % 2 == 0 || kh == 0 || kw == 0 {
            return bad(format!("kernel {:?}: kt must be odd, kh and kw positive", self.kernel));
        }
        if kt > self.window_len {
            return bad(format!("temporal kernel {kt} longer than window {}", self.window_len));
        }
        if !(self.input_gain > 0.0 && self.input_gain.is_finite()) || !(self.outlier_threshold >= 0.0) {
            return bad("input_gain must be positive and outlier_threshold nonnegative".into());
        }
        if !(self.spo2_gain > 0.0 && self.spo2_gain.is_finite()) {
            return bad("spo2_gain must be positive".into());
        }
        if !(self.gate_gain > 0.0 && self.gate_gain.is_finite()) {
            return bad("gate_gain must be positive".into());
        }
        self.block_sizes().map(|_| ())
    }

    pub fn param_count(&self) -> usize {
        ParamLayout::new(self).total
    }
}

/// Offsets of every parameter tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub conv_kernel: Vec<Range<usize>>,
    pub conv_bias: Vec<Range<usize>>,
    pub gate_w1: Range<usize>,
    pub gate_b1: Range<usize>,
    pub gate_w2: Range<usize>,
    pub gate_b2: Range<usize>,
    pub bvp_w: Range<usize>,
    pub bvp_b: Range<usize>,
    pub rr_w: Range<usize>,
    pub rr_b: Range<usize>,
    pub spo2_w: Range<usize>,
    pub spo2_b: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let [kt, kh, kw] = cfg.kernel;
        let mut conv_kernel = Vec::new();
        let mut conv_bias = Vec::new();
        let mut c_in = RGB_CHANNELS;
        for &c_out in &cfg.enc_channels {
            conv_kernel.push(take(c_out * c_in * kt * kh * kw));
            conv_bias.push(take(c_out));
            c_in = c_out;
        }
        let f = c_in;
        let hg = cfg.gate_hidden;
        let gate_w1 = take(hg * 2 * f);
        let gate_b1 = take(hg);
        let gate_w2 = take(f * hg);
        let gate_b2 = take(f);
        let bvp_w = take(f);
        let bvp_b = take(1);
        let rr_w = take(f);
        let rr_b = take(1);
        let spo2_w = take(f);
        let spo2_b = take(1);
        Self {
            conv_kernel,
            conv_bias,
            gate_w1,
            gate_b1,
            gate_w2,
            gate_b2,
            bvp_w,
            bvp_b,
            rr_w,
            rr_b,
            spo2_w,
            spo2_b,
            total: at,
        }
    }
}

/// Every learnable weight, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: ParamLayout,
    values: Vec<f64>,
}

/// SpO2 head bias at init: the logit of 96 %.
pub const SPO2_PRIOR: f64 = 0.96;

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        Ok(Self {
            values: vec![0.0; layout.total],
            layout,
            config: config.clone(),
        })
    }

    /// He-uniform conv and gate weights, zero biases, SpO2 bias at the prior.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [kt, kh, kw] = config.kernel;
        let mut c_in = RGB_CHANNELS;
        let layout = p.layout.clone();
        for (b, &c_out) in config.enc_channels.iter().enumerate() {
            let fan_in = (c_in * kt * kh * kw) as f64;
            let a = (6.0 / fan_in).sqrt();
            for v in &mut p.values[layout.conv_kernel[b].clone()] {
                *v = rng.gen_range(-a..a);
            }
            c_in = c_out;
        }
        let f = config.features() as f64;
        let hg = config.gate_hidden as f64;
        let uniform = |rng: &mut ChaCha8Rng, vals: &mut [f64], a: f64| {
            for v in vals {
                *v = rng.gen_range(-a..a);
            }
        };
        uniform(&mut rng, &mut p.values[layout.gate_w1.clone()], (6.0 / (2.0 * f)).sqrt());
        uniform(&mut rng, &mut p.values[layout.gate_w2.clone()], (3.0 / hg).sqrt() / config.gate_gain);
        uniform(&mut rng, &mut p.values[layout.bvp_w.clone()], (3.0 / f).sqrt());
        uniform(&mut rng, &mut p.values[layout.rr_w.clone()], (3.0 / f).sqrt());
        uniform(&mut rng, &mut p.values[layout.spo2_w.clone()], 0.1 * (3.0 / f).sqrt() / config.spo2_gain);
        p.values[layout.spo2_b.start] = (SPO2_PRIOR / (1.0 - SPO2_PRIOR)).ln();
        Ok(p)
    }

    pub fn from_flat(config: &ModelConfig, values: Vec<f64>) -> Result<Self, ModelError> {
        let mut p = Self::zeros(config)?;
        if values.len() != p.values.len() {
            return Err(ModelError::Shape(format!(
                "config needs {} parameters, got {}",
                p.values.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("parameters"));
        }
        p.values = values;
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn set(&mut self, i: usize, v: f64) {
        self.values[i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub(crate) fn slice(&self, r: &Range<usize>) -> &[f64] {
        &self.values[r.clone()]
    }

    pub fn save(&self, dir: impl AsRef<Path>, modality: Modality) -> Result<(), ModelError> {
        let dir = dir.as_ref();
        let ck_err = |msg: String| ModelError::Checkpoint {
            path: dir.display().to_string(),
            msg,
        };
        fs::create_dir_all(dir).map_err(|e| ck_err(e.to_string()))?;
        let t = Tensor::new(vec![self.values.len()], self.values.clone())?;
        dataio::write_tensor(dir.join(PARAMS_FILE), &t)?;
        let side = Sidecar {
            format_version: CHECKPOINT_FORMAT_VERSION,
            modality,
            param_count: self.values.len(),
            config: self.config.clone(),
        };
        let json = serde_json::to_string_pretty(&side).map_err(|e| ck_err(e.to_string()))?;
        fs::write(dir.join(SIDECAR_FILE), json + "\n").map_err(|e| ck_err(e.to_string()))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, Modality), ModelError> {
        let dir = dir.as_ref();
        let side_path = dir.join(SIDECAR_FILE);
        let ck_err = |msg: String| ModelError::Checkpoint {
            path: side_path.display().to_string(),
            msg,
        };
        let text = fs::read_to_string(&side_path).map_err(|e| ck_err(e.to_string()))?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| ck_err(e.to_string()))?;
        if side.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ck_err(format!("unsupported format_version {}", side.format_version)));
        }
        let t = dataio::read_tensor(dir.join(PARAMS_FILE))?;
        if t.dims() != [side.param_count] {
            return Err(ck_err(format!(
                "params tensor has dims {:?}, sidecar says {}",
                t.dims(),
                side.param_count
            )));
        }
        Ok((Self::from_flat(&side.config, t.into_data())?, side.modality))
    }
}

pub const PARAMS_FILE: &str = "params.tnsr";
pub const SIDECAR_FILE: &str = "model.json";

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    modality: Modality,
    param_count: usize,
    config: ModelConfig,
}
