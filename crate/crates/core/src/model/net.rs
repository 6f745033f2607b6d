use crate::dataio::Tensor;
use crate::timeline::Window;

use super::ops::{self, ConvShape};
use super::{Modality, ModelConfig, ModelError, ModelParams, RGB_CHANNELS};

/// Channel-first, normalized network input for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `[3, L, H, W]`
    pub rgb: Tensor,
    /// `[1, L, H, W]`, treated as replicated over the three input channels.
    pub ir: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub bvp: Vec<f64>,
    pub rr: Vec<f64>,
    /// Percent, in `(0, 100)`.
    pub spo2: f64,
    /// Per-channel RGB weight; all ones for RGB-only and all zeros for IR-only runs.
    pub gate: Vec<f64>,
}

/// Derivatives of a scalar loss with respect to each prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Upstream {
    pub bvp: Vec<f64>,
    pub rr: Vec<f64>,
    pub spo2: f64,
}

#[derive(Debug, Clone)]
struct EncoderTrace {
    /// Input of each block; block 0 holds the network input.
    block_inputs: Vec<Vec<f64>>,
    /// Conv outputs before ReLU.
    pre_act: Vec<Vec<f64>>,
    first_channels: usize,
}

#[derive(Debug, Clone)]
struct FusionTrace {
    context: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
}

/// Intermediate values retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct Activations {
    modality: Modality,
    rgb: Option<(EncoderTrace, Vec<f64>)>,
    ir: Option<(EncoderTrace, Vec<f64>)>,
    fusion: Option<FusionTrace>,
    fused: Vec<f64>,
    pooled: Vec<f64>,
    spo2_sig: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub prediction: Prediction,
    activations: Option<Activations>,
}

impl ForwardPass {
    pub fn has_activations(&self) -> bool {
        self.activations.is_some()
    }
}

fn check_frames(t: &Tensor, channels: usize, cfg: &ModelConfig, what: &str) -> Result<(), ModelError> {
    let want = [cfg.window_len, cfg.in_hw[0], cfg.in_hw[1], channels];
    if t.dims() != want {
        return Err(ModelError::Shape(format!(
            "{what} frames have dims {:?}, config expects {want:?}",
            t.dims()
        )));
    }
    Ok(())
}

/// `[L, H, W, C]` frames to channel-first relative intensity change, scaled and clipped.
fn normalize_frames(t: &Tensor, cfg: &ModelConfig) -> Tensor {
    let d = t.dims();
    let (l, h, w, c) = (d[0], d[1], d[2], d[3]);
    let plane = h * w;
    let src = t.data();
    let mut out = vec![0.0; c * l * plane];
    let mut trace = vec![0.0; l];
    for ch in 0..c {
        for p in 0..plane {
            for (ti, v) in trace.iter_mut().enumerate() {
                *v = src[(ti * plane + p) * c + ch];
            }
            let base = median(&trace);
            if base.abs() < 1e-6 {
                continue;
            }
            for (ti, &x) in trace.iter().enumerate() {
                let v = cfg.input_gain * (x / base - 1.0);
                if cfg.outlier_threshold == 0.0 || v.abs() <= cfg.outlier_threshold {
                    out[(ch * l + ti) * plane + p] = v;
                }
            }
        }
    }
    Tensor::from_parts(vec![c, l, h, w], out)
}

fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    let mid = v.len() / 2;
    let (lo, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if x.len() % 2 == 1 {
        *m
    } else {
        let below = lo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + *m)
    }
}

/// Converts a window into normalized channel-first inputs.
pub fn prepare_input(window: &Window, cfg: &ModelConfig) -> Result<ModelInput, ModelError> {
    check_frames(&window.rgb, RGB_CHANNELS, cfg, "RGB")?;
    check_frames(&window.ir, 1, cfg, "IR")?;
    Ok(ModelInput {
        rgb: normalize_frames(&window.rgb, cfg),
        ir: normalize_frames(&window.ir, cfg),
    })
}

/// Single 3D convolution: temporal same-padding, spatial valid-padding.
pub fn conv3d_forward(x: &Tensor, k: &Tensor, b: &[f64]) -> Result<Tensor, ModelError> {
    let (xd, kd) = (x.dims(), k.dims());
    if xd.len() != 4 || kd.len() != 5 {
        return Err(ModelError::Shape(format!(
            "expected input [C,L,H,W] and kernel [Co,Ci,kt,kh,kw], got {xd:?} and {kd:?}"
        )));
    }
    let s = ConvShape {
        c_in: xd[0],
        len: xd[1],
        h: xd[2],
        w: xd[3],
        c_out: kd[0],
        kt: kd[2],
        kh: kd[3],
        kw: kd[4],
    };
    if kd[1] != s.c_in || b.len() != s.c_out {
        return Err(ModelError::Shape(format!(
            "kernel {kd:?} and {} biases do not fit input {xd:?}",
            b.len()
        )));
    }
    if s.kt % 2 == 0 || s.kt > s.len || s.kh > s.h || s.kw > s.w {
        return Err(ModelError::Shape(format!("kernel {kd:?} larger than padded input {xd:?}")));
    }
    let mut out = vec![0.0; s.out_len()];
    ops::conv3d(&s, x.data(), k.data(), b, &mut out);
    Tensor::new(vec![s.c_out, s.len, s.out_h(), s.out_w()], out).map_err(ModelError::from)
}

fn block_shape(cfg: &ModelConfig, b: usize, c_in: usize, hw: [usize; 2]) -> ConvShape {
    let [kt, kh, kw] = cfg.kernel;
    ConvShape {
        c_in,
        c_out: cfg.enc_channels[b],
        len: cfg.window_len,
        h: hw[0],
        w: hw[1],
        kt,
        kh,
        kw,
    }
}

/// Sums the first-block kernel over input channels, the exact equivalent of
/// convolving a channel-replicated input.
fn collapse_kernel(k: &[f64], c_out: usize, c_in: usize, taps: usize) -> Vec<f64> {
    let mut out = vec![0.0; c_out * taps];
    for co in 0..c_out {
        for ci in 0..c_in {
            let src = &k[(co * c_in + ci) * taps..][..taps];
            for (o, v) in out[co * taps..(co + 1) * taps].iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    out
}

fn encode_raw(
    x: &[f64],
    channels: usize,
    params: &ModelParams,
    retain: bool,
) -> (Vec<f64>, Option<EncoderTrace>) {
    let cfg = params.config();
    let lay = params.layout();
    let sizes = cfg.block_sizes().expect("validated config");
    let mut input = x.to_vec();
    let mut trace = EncoderTrace {
        block_inputs: Vec::new(),
        pre_act: Vec::new(),
        first_channels: channels,
    };
    let mut c_in = channels;
    for b in 0..cfg.enc_channels.len() {
        let s = block_shape(cfg, b, c_in, sizes[b]);
        let k_full = params.slice(&lay.conv_kernel[b]);
        let kernel = if b == 0 && channels == 1 {
            collapse_kernel(k_full, s.c_out, RGB_CHANNELS, s.kt * s.kh * s.kw)
        } else {
            k_full.to_vec()
        };
        let mut z = vec![0.0; s.out_len()];
        ops::conv3d(&s, &input, &kernel, params.slice(&lay.conv_bias[b]), &mut z);
        let mut a = z.clone();
        ops::relu_inplace(&mut a);
        let pooled = ops::avgpool2(&a, s.c_out * s.len, s.out_h(), s.out_w());
        if retain {
            trace.block_inputs.push(std::mem::take(&mut input));
            trace.pre_act.push(z);
        }
        input = pooled;
        c_in = s.c_out;
    }
    let [h, w] = sizes[sizes.len() - 1];
    let features = ops::global_avg(&input, h * w);
    (features, retain.then_some(trace))
}

fn encode_backward(trace: &EncoderTrace, dfeat: &[f64], params: &ModelParams, grad: &mut [f64]) {
    let cfg = params.config();
    let lay = params.layout();
    let sizes = cfg.block_sizes().expect("validated config");
    let nb = cfg.enc_channels.len();
    let [hl, wl] = sizes[nb];
    let mut dp = ops::global_avg_backward(dfeat, hl * wl);
    for b in (0..nb).rev() {
        let c_in = if b == 0 { trace.first_channels } else { cfg.enc_channels[b - 1] };
        let s = block_shape(cfg, b, c_in, sizes[b]);
        let mut dz = ops::avgpool2_backward(&dp, s.c_out * s.len, s.out_h(), s.out_w());
        for (g, z) in dz.iter_mut().zip(&trace.pre_act[b]) {
            if *z <= 0.0 {
                *g = 0.0;
            }
        }
        let x = &trace.block_inputs[b];
        let k_full = params.slice(&lay.conv_kernel[b]);
        let taps = s.kt * s.kh * s.kw;
        let (kr, br) = (lay.conv_kernel[b].clone(), lay.conv_bias[b].clone());
        let mut gx = (b > 0).then(|| vec![0.0; s.in_len()]);
        if b == 0 && trace.first_channels == 1 {
            let kc = collapse_kernel(k_full, s.c_out, RGB_CHANNELS, taps);
            let mut gk = vec![0.0; s.c_out * taps];
            ops::conv3d_backward(&s, x, &kc, &dz, &mut gk, &mut grad[br], None);
            let gfull = &mut grad[kr];
            for co in 0..s.c_out {
                for ci in 0..RGB_CHANNELS {
                    for (g, v) in gfull[(co * RGB_CHANNELS + ci) * taps..][..taps]
                        .iter_mut()
                        .zip(&gk[co * taps..(co + 1) * taps])
                    {
                        *g += v;
                    }
                }
            }
        } else {
            let mut gk = vec![0.0; kr.len()];
            let mut gb = vec![0.0; br.len()];
            ops::conv3d_backward(&s, x, k_full, &dz, &mut gk, &mut gb, gx.as_deref_mut());
            for (g, v) in grad[kr].iter_mut().zip(gk) {
                *g += v;
            }
            for (g, v) in grad[br].iter_mut().zip(gb) {
                *g += v;
            }
        }
        if let Some(gx) = gx {
            dp = gx;
        }
    }
}

/// Shared encoder on one modality: `[C, L, H, W]` with `C` = 3, or 1 for a
/// channel-replicated input, to features `[F, L]`.
pub fn encode(x: &Tensor, params: &ModelParams) -> Result<Tensor, ModelError> {
    let cfg = params.config();
    let d = x.dims();
    if d.len() != 4
        || !(d[0] == RGB_CHANNELS || d[0] == 1)
        || d[1] != cfg.window_len
        || d[2..] != cfg.in_hw
    {
        return Err(ModelError::Shape(format!(
            "encoder input {d:?} does not match [3|1, {}, {}, {}]",
            cfg.window_len, cfg.in_hw[0], cfg.in_hw[1]
        )));
    }
    let (f, _) = encode_raw(x.data(), d[0], params, false);
    Ok(Tensor::from_parts(vec![cfg.features(), cfg.window_len], f))
}

fn time_mean(x: &[f64], len: usize) -> Vec<f64> {
    x.chunks_exact(len).map(|r| r.iter().sum::<f64>() / len as f64).collect()
}

fn fuse_raw(f_rgb: &[f64], f_ir: &[f64], params: &ModelParams) -> (Vec<f64>, Vec<f64>, FusionTrace) {
    let cfg = params.config();
    let lay = params.layout();
    let (f, l, hg) = (cfg.features(), cfg.window_len, cfg.gate_hidden);
    let mut context = time_mean(f_rgb, l);
    context.extend(time_mean(f_ir, l));
    let (w1, b1) = (params.slice(&lay.gate_w1), params.slice(&lay.gate_b1));
    let (w2, b2) = (params.slice(&lay.gate_w2), params.slice(&lay.gate_b2));
    let hidden_pre: Vec<f64> = (0..hg)
        .map(|j| b1[j] + w1[j * 2 * f..(j + 1) * 2 * f].iter().zip(&context).map(|(a, c)| a * c).sum::<f64>())
        .collect();
    let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
    let gate: Vec<f64> = (0..f)
        .map(|i| {
            let u = b2[i] + w2[i * hg..(i + 1) * hg].iter().zip(&hidden).map(|(a, h)| a * h).sum::<f64>();
            ops::sigmoid(cfg.gate_gain * u)
        })
        .collect();
    let fused = (0..f * l)
        .map(|idx| {
            let g = gate[idx / l];
            g * f_rgb[idx] + (1.0 - g) * f_ir[idx]
        })
        .collect();
    (
        fused,
        gate,
        FusionTrace {
            context,
            hidden_pre,
            hidden,
        },
    )
}

/// Gated convex combination of two `[F, L]` feature maps.
pub fn fuse(f_rgb: &Tensor, f_ir: &Tensor, params: &ModelParams) -> Result<(Tensor, Vec<f64>), ModelError> {
    let cfg = params.config();
    let want = [cfg.features(), cfg.window_len];
    if f_rgb.dims() != want || f_ir.dims() != want {
        return Err(ModelError::Shape(format!(
            "fusion inputs {:?} and {:?}, expected {want:?}",
            f_rgb.dims(),
            f_ir.dims()
        )));
    }
    let (fused, gate, _) = fuse_raw(f_rgb.data(), f_ir.data(), params);
    Ok((Tensor::from_parts(want.to_vec(), fused), gate))
}

fn project(fused: &[f64], w: &[f64], b: f64, l: usize) -> Vec<f64> {
    let mut out = vec![b; l];
    for (row, wf) in fused.chunks_exact(l).zip(w) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += wf * v;
        }
    }
    out
}

/// Full forward pass. With `retain`, keeps what [`backward`] needs.
pub fn forward(
    input: &ModelInput,
    params: &ModelParams,
    modality: Modality,
    retain: bool,
) -> Result<ForwardPass, ModelError> {
    let cfg = params.config();
    let lay = params.layout();
    let (f, l) = (cfg.features(), cfg.window_len);
    let want = |c: usize| vec![c, l, cfg.in_hw[0], cfg.in_hw[1]];
    if input.rgb.dims() != want(RGB_CHANNELS) || input.ir.dims() != want(1) {
        return Err(ModelError::Shape(format!(
            "model input dims {:?} / {:?} do not match config",
            input.rgb.dims(),
            input.ir.dims()
        )));
    }
    let rgb = matches!(modality, Modality::Rgb | Modality::Both)
        .then(|| encode_raw(input.rgb.data(), RGB_CHANNELS, params, retain));
    let ir = matches!(modality, Modality::Ir | Modality::Both)
        .then(|| encode_raw(input.ir.data(), 1, params, retain));

    let (fused, gate, fusion) = match (&rgb, &ir) {
        (Some((fr, _)), Some((fi, _))) => {
            let (fused, gate, tr) = fuse_raw(fr, fi, params);
            (fused, gate, Some(tr))
        }
        (Some((fr, _)), None) => (fr.clone(), vec![1.0; f], None),
        (None, Some((fi, _))) => (fi.clone(), vec![0.0; f], None),
        (None, None) => unreachable!("modality selects at least one branch"),
    };

    let bvp = project(&fused, params.slice(&lay.bvp_w), params.slice(&lay.bvp_b)[0], l);
    let rr = project(&fused, params.slice(&lay.rr_w), params.slice(&lay.rr_b)[0], l);
    let pooled = time_mean(&fused, l);
    let logit = params.slice(&lay.spo2_b)[0]
        + cfg.spo2_gain * params.slice(&lay.spo2_w).iter().zip(&pooled).map(|(w, p)| w * p).sum::<f64>();
    let spo2_sig = ops::sigmoid(logit);
    let spo2 = 100.0 * spo2_sig;
    if !spo2.is_finite() || bvp.iter().chain(&rr).any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("forward outputs"));
    }
    let activations = retain.then(|| Activations {
        modality,
        rgb: rgb.map(|(fr, tr)| (tr.expect("retained"), fr)),
        ir: ir.map(|(fi, tr)| (tr.expect("retained"), fi)),
        fusion,
        fused,
        pooled,
        spo2_sig,
    });
    Ok(ForwardPass {
        prediction: Prediction { bvp, rr, spo2, gate },
        activations,
    })
}

/// Exact gradient of the loss whose prediction derivatives are `up`, with
/// respect to every parameter (flat layout).
pub fn backward(pass: &ForwardPass, params: &ModelParams, up: &Upstream) -> Result<Vec<f64>, ModelError> {
    let act = pass.activations.as_ref().ok_or(ModelError::MissingActivations)?;
    let cfg = params.config();
    let lay = params.layout();
    let (f, l, hg) = (cfg.features(), cfg.window_len, cfg.gate_hidden);
    if up.bvp.len() != l || up.rr.len() != l {
        return Err(ModelError::Shape(format!(
            "upstream gradients have lengths {} / {}, expected {l}",
            up.bvp.len(),
            up.rr.len()
        )));
    }
    let mut grad = vec![0.0; params.len()];
    let mut dfused = vec![0.0; f * l];

    // heads
    let dlogit = up.spo2 * 100.0 * act.spo2_sig * (1.0 - act.spo2_sig);
    grad[lay.spo2_b.start] = dlogit;
    let spo2_w = params.slice(&lay.spo2_w);
    let gain = params.config().spo2_gain;
    for fi in 0..f {
        grad[lay.spo2_w.start + fi] = dlogit * gain * act.pooled[fi];
        let spread = dlogit * gain * spo2_w[fi] / l as f64;
        for d in &mut dfused[fi * l..(fi + 1) * l] {
            *d += spread;
        }
    }
    for (upv, wr, br) in [(&up.bvp, &lay.bvp_w, &lay.bvp_b), (&up.rr, &lay.rr_w, &lay.rr_b)] {
        grad[br.start] = upv.iter().sum();
        let w = params.slice(wr);
        for fi in 0..f {
            let row = &act.fused[fi * l..(fi + 1) * l];
            grad[wr.start + fi] = row.iter().zip(upv.iter()).map(|(a, b)| a * b).sum();
            for (d, u) in dfused[fi * l..(fi + 1) * l].iter_mut().zip(upv.iter()) {
                *d += w[fi] * u;
            }
        }
    }

    let (dfr, dfi) = match act.modality {
        Modality::Rgb => (Some(dfused), None),
        Modality::Ir => (None, Some(dfused)),
        Modality::Both => {
            let tr = act.fusion.as_ref().expect("fusion trace");
            let fr = &act.rgb.as_ref().expect("rgb features").1;
            let fi_ = &act.ir.as_ref().expect("ir features").1;
            let gate = &pass.prediction.gate;
            let mut dfr = vec![0.0; f * l];
            let mut dfi = vec![0.0; f * l];
            let mut dlogit2 = vec![0.0; f];
            for c in 0..f {
                let g = gate[c];
                let mut dg = 0.0;
                for t in 0..l {
                    let i = c * l + t;
                    dfr[i] = g * dfused[i];
                    dfi[i] = (1.0 - g) * dfused[i];
                    dg += dfused[i] * (fr[i] - fi_[i]);
                }
                dlogit2[c] = dg * g * (1.0 - g) * cfg.gate_gain;
            }
            let w2 = params.slice(&lay.gate_w2);
            let mut dh = vec![0.0; hg];
            for c in 0..f {
                grad[lay.gate_b2.start + c] = dlogit2[c];
                for j in 0..hg {
                    grad[lay.gate_w2.start + c * hg + j] = dlogit2[c] * tr.hidden[j];
                    dh[j] += w2[c * hg + j] * dlogit2[c];
                }
            }
            let w1 = params.slice(&lay.gate_w1);
            let mut dctx = vec![0.0; 2 * f];
            for j in 0..hg {
                let dpre = if tr.hidden_pre[j] > 0.0 { dh[j] } else { 0.0 };
                grad[lay.gate_b1.start + j] = dpre;
                for k in 0..2 * f {
                    grad[lay.gate_w1.start + j * 2 * f + k] = dpre * tr.context[k];
                    dctx[k] += w1[j * 2 * f + k] * dpre;
                }
            }
            for c in 0..f {
                let (ar, ai) = (dctx[c] / l as f64, dctx[f + c] / l as f64);
                for t in 0..l {
                    dfr[c * l + t] += ar;
                    dfi[c * l + t] += ai;
                }
            }
            (Some(dfr), Some(dfi))
        }
    };

    if let (Some(d), Some((tr, _))) = (dfr, act.rgb.as_ref()) {
        encode_backward(tr, &d, params, &mut grad);
    }
    if let (Some(d), Some((tr, _))) = (dfi, act.ir.as_ref()) {
        encode_backward(tr, &d, params, &mut grad);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(ModelError::NonFinite("gradient"));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use proptest::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: Vec<usize>, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn rand_input(cfg: &ModelConfig, seed: u64) -> ModelInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h, w] = cfg.in_hw;
        ModelInput {
            rgb: rand_tensor(vec![3, cfg.window_len, h, w], &mut rng, -1.0, 1.0),
            ir: rand_tensor(vec![1, cfg.window_len, h, w], &mut rng, -1.0, 1.0),
        }
    }

    #[test]
    fn delta_kernel_is_identity_on_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(vec![1, 5, 4, 4], &mut rng, -1.0, 1.0);
        let mut k = vec![0.0; 27];
        k[13] = 1.0;
        let k = Tensor::new(vec![1, 1, 3, 3, 3], k).unwrap();
        let y = conv3d_forward(&x, &k, &[0.0]).unwrap();
        assert_eq!(y.dims(), &[1, 5, 2, 2]);
        for t in 0..5 {
            for yy in 0..2 {
                for xx in 0..2 {
                    assert_eq!(y.data()[(t * 2 + yy) * 2 + xx], x.data()[(t * 4 + yy + 1) * 4 + xx + 1]);
                }
            }
        }
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(vec![2, 4, 3, 3], &mut rng, -1.0, 1.0);
        let k = Tensor::zeros(vec![1, 2, 3, 2, 2]);
        let y = conv3d_forward(&x, &k, &[1.5]).unwrap();
        assert!(y.data().iter().all(|v| *v == 1.5));
    }

    #[test]
    fn one_by_one() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1, 1], vec![2.0]).unwrap();
        assert_eq!(conv3d_forward(&x, &k, &[3.0]).unwrap().data(), &[13.0]);
    }

    #[test]
    fn oversized_kernel_rejected() {
        let x = Tensor::zeros(vec![1, 2, 3, 3]);
        let k = Tensor::zeros(vec![1, 1, 3, 2, 2]);
        assert!(conv3d_forward(&x, &k, &[0.0]).is_err());
        let k = Tensor::zeros(vec![1, 1, 1, 4, 2]);
        assert!(conv3d_forward(&x, &k, &[0.0]).is_err());
    }

    #[test]
    fn zero_input_zero_features() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::init(&cfg, 1).unwrap();
        let f = encode(&Tensor::zeros(vec![3, 16, 8, 8]), &p).unwrap();
        assert_eq!(f.dims(), &[2, 16]);
        assert!(f.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encoder_is_positively_homogeneous() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::init(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(vec![3, 16, 8, 8], &mut rng, 0.0, 1.0);
        let x2 = Tensor::new(x.dims().to_vec(), x.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let (a, b) = (encode(&x, &p).unwrap(), encode(&x2, &p).unwrap());
        assert!(a.data().iter().any(|v| *v > 0.0));
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((2.0 * u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn replicated_ir_matches_explicit_replication() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::init(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ir = rand_tensor(vec![1, 16, 8, 8], &mut rng, -1.0, 1.0);
        let rep: Vec<f64> = (0..3).flat_map(|_| ir.data().iter().copied()).collect();
        let rep = Tensor::new(vec![3, 16, 8, 8], rep).unwrap();
        for (a, b) in encode(&ir, &p).unwrap().data().iter().zip(encode(&rep, &p).unwrap().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_features_fuse_to_themselves() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::init(&cfg, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = rand_tensor(vec![2, 16], &mut rng, 0.0, 3.0);
        let (fused, gate) = fuse(&f, &f, &p).unwrap();
        assert_eq!(fused, f);
        assert!(gate.iter().all(|g| *g > 0.0 && *g < 1.0));
    }

    #[test]
    fn saturated_gate_selects_rgb() {
        let cfg = ModelConfig::tiny();
        let mut p = ModelParams::zeros(&cfg).unwrap();
        let lay = p.layout().clone();
        for i in lay.gate_b2.clone() {
            p.set(i, 8.0 / cfg.gate_gain);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let fr = rand_tensor(vec![2, 16], &mut rng, 0.0, 1.0);
        let fi = rand_tensor(vec![2, 16], &mut rng, 0.0, 1.0);
        let (fused, _) = fuse(&fr, &fi, &p).unwrap();
        let gap = fused.data().iter().zip(fr.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-3, "{gap}");
        assert!(fuse(&fr, &Tensor::zeros(vec![2, 15]), &p).is_err());
    }

    #[test]
    fn zero_weights_give_neutral_outputs() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::zeros(&cfg).unwrap();
        for m in [Modality::Rgb, Modality::Ir, Modality::Both] {
            let out = forward(&rand_input(&cfg, 11), &p, m, false).unwrap().prediction;
            assert_eq!(out.bvp, vec![0.0; 16]);
            assert_eq!(out.rr, vec![0.0; 16]);
            assert_eq!(out.spo2, 50.0);
        }
    }

    #[test]
    fn backward_needs_activations() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::init(&cfg, 12).unwrap();
        let pass = forward(&rand_input(&cfg, 13), &p, Modality::Both, false).unwrap();
        let up = Upstream {
            bvp: vec![0.0; 16],
            rr: vec![0.0; 16],
            spo2: 0.0,
        };
        assert!(matches!(backward(&pass, &p, &up), Err(ModelError::MissingActivations)));
    }

    #[test]
    fn spo2_only_loss_leaves_bvp_head_untouched() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::init(&cfg, 14).unwrap();
        let pass = forward(&rand_input(&cfg, 15), &p, Modality::Both, true).unwrap();
        let up = Upstream {
            bvp: vec![0.0; 16],
            rr: vec![0.0; 16],
            spo2: 0.7,
        };
        let g = backward(&pass, &p, &up).unwrap();
        assert!(g[p.layout().bvp_w.clone()].iter().all(|v| *v == 0.0));
        assert_eq!(g[p.layout().bvp_b.start], 0.0);
        assert!(g[p.layout().spo2_b.start] != 0.0);
    }

    #[test]
    fn gradient_is_linear_in_upstream() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::init(&cfg, 16).unwrap();
        let pass = forward(&rand_input(&cfg, 17), &p, Modality::Both, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let up = Upstream {
            bvp: (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            rr: (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            spo2: 0.3,
        };
        let up2 = Upstream {
            bvp: up.bvp.iter().map(|v| 2.0 * v).collect(),
            rr: up.rr.iter().map(|v| 2.0 * v).collect(),
            spo2: 0.6,
        };
        let (g1, g2) = (backward(&pass, &p, &up).unwrap(), backward(&pass, &p, &up2).unwrap());
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    fn shift_frames(x: &Tensor, s: usize) -> Tensor {
        let d = x.dims().to_vec();
        let frame = d[2] * d[3];
        let mut out = vec![0.0; x.numel()];
        for c in 0..d[0] {
            for t in s..d[1] {
                let dst = (c * d[1] + t) * frame;
                let src = (c * d[1] + t - s) * frame;
                out[dst..dst + frame].copy_from_slice(&x.data()[src..src + frame]);
            }
        }
        Tensor::new(d, out).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn encoder_commutes_with_time_shift(seed in 0u64..1000, s in 1usize..5) {
            let cfg = ModelConfig::tiny();
            let p = ModelParams::init(&cfg, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x = rand_tensor(vec![3, 16, 8, 8], &mut rng, -1.0, 1.0);
            let (a, b) = (encode(&x, &p).unwrap(), encode(&shift_frames(&x, s), &p).unwrap());
            let reach = cfg.enc_channels.len() * (cfg.kernel[0] / 2);
            for c in 0..cfg.features() {
                for t in s + reach..16 - reach {
                    let (u, v) = (a.data()[c * 16 + t - s], b.data()[c * 16 + t]);
                    prop_assert!((u - v).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn outputs_stay_in_range(seed in 0u64..1000, scale in 0.1f64..20.0) {
            let cfg = ModelConfig::tiny();
            let mut p = ModelParams::init(&cfg, seed).unwrap();
            for v in p.as_mut_slice() {
                *v *= scale;
            }
            for m in [Modality::Rgb, Modality::Ir, Modality::Both] {
                let out = forward(&rand_input(&cfg, seed + 2), &p, m, false).unwrap().prediction;
                prop_assert_eq!(out.bvp.len(), 16);
                prop_assert_eq!(out.rr.len(), 16);
                prop_assert!(out.spo2 >= 0.0 && out.spo2 <= 100.0);
                prop_assert_eq!(out.gate.len(), 2);
                prop_assert!(out.gate.iter().all(|g| (0.0..=1.0).contains(g)));
            }
        }
    }
}
