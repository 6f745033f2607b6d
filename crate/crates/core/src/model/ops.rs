//! Raw slice kernels for the encoder: 3D convolution, 2x2 average pooling and
//! spatial global-average pooling, with their backward passes.
//!
//! Layouts are row-major `[C, L, H, W]` for activations and
//! `[C_out, C_in, kt, kh, kw]` for kernels. Temporal axis uses same-padding
//! (zeros, `kt / 2` each side), spatial axes use valid padding.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub h: usize,
    pub w: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        self.h - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.w - self.kw + 1
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.len * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.len * self.out_h() * self.out_w()
    }

    pub fn kernel_len(&self) -> usize {
        self.c_out * self.c_in * self.kt * self.kh * self.kw
    }

    fn pad(&self) -> usize {
        self.kt / 2
    }
}

const LANES: usize = 8;

/// `out[i] += sum over taps of w * src[off + i]`, blocked so each output lane
/// is loaded and stored once.
fn gather_taps(out: &mut [f64], src: &[f64], taps: &[(usize, f64)]) {
    let mut chunks = out.chunks_exact_mut(LANES);
    let mut i0 = 0;
    for chunk in &mut chunks {
        let mut acc = [0.0; LANES];
        for &(off, w) in taps {
            let s: &[f64; LANES] = src[off + i0..off + i0 + LANES].try_into().unwrap();
            for j in 0..LANES {
                acc[j] += w * s[j];
            }
        }
        for j in 0..LANES {
            chunk[j] += acc[j];
        }
        i0 += LANES;
    }
    for (j, o) in chunks.into_remainder().iter_mut().enumerate() {
        let mut acc = 0.0;
        for &(off, w) in taps {
            acc += w * src[off + i0 + j];
        }
        *o += acc;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

impl ConvShape {
    /// Input frame feeding output frame `t` through temporal tap `dt`.
    fn source_frame(&self, t: usize, dt: usize) -> Option<usize> {
        (t + dt).checked_sub(self.pad()).filter(|&ti| ti < self.len)
    }

    /// Outputs are accumulated on an `ho x w` grid so every tap is a plain
    /// offset; columns `>= wo` are scratch. This many leading positions cover
    /// every valid output.
    fn span(&self) -> usize {
        self.out_h() * self.w - (self.kw - 1)
    }

    fn kernel_index(&self, co: usize, ci: usize, dt: usize) -> usize {
        (((co * self.c_in + ci) * self.kt) + dt) * self.kh * self.kw
    }
}

pub fn conv3d(s: &ConvShape, x: &[f64], k: &[f64], b: &[f64], out: &mut [f64]) {
    let (ho, wo) = (s.out_h(), s.out_w());
    let plane_in = s.h * s.w;
    let plane_out = ho * wo;
    debug_assert_eq!(x.len(), s.in_len());
    debug_assert_eq!(k.len(), s.kernel_len());
    debug_assert_eq!(out.len(), s.out_len());
    let mut full = vec![0.0; ho * s.w];
    let mut taps = Vec::with_capacity(s.c_in * s.kt * s.kh * s.kw);
    for co in 0..s.c_out {
        for t in 0..s.len {
            taps.clear();
            for ci in 0..s.c_in {
                for dt in 0..s.kt {
                    let Some(ti) = s.source_frame(t, dt) else { continue };
                    let kbase = s.kernel_index(co, ci, dt);
                    let xoff = (ci * s.len + ti) * plane_in;
                    for dy in 0..s.kh {
                        for dx in 0..s.kw {
                            taps.push((xoff + dy * s.w + dx, k[kbase + dy * s.kw + dx]));
                        }
                    }
                }
            }
            full.fill(b[co]);
            gather_taps(&mut full[..s.span()], x, &taps);
            let o = &mut out[(co * s.len + t) * plane_out..][..plane_out];
            for y in 0..ho {
                o[y * wo..(y + 1) * wo].copy_from_slice(&full[y * s.w..y * s.w + wo]);
            }
        }
    }
}

/// Accumulates kernel and bias gradients into `gk`, `gb`; if `gx` is given,
/// accumulates the input gradient as well.
pub fn conv3d_backward(
    s: &ConvShape,
    x: &[f64],
    k: &[f64],
    gout: &[f64],
    gk: &mut [f64],
    gb: &mut [f64],
    gx: Option<&mut [f64]>,
) {
    let (ho, wo) = (s.out_h(), s.out_w());
    let plane_in = s.h * s.w;
    let plane_out = ho * wo;
    // each output-gradient plane on the full-width grid, with `margin` zeros on both sides
    let margin = (s.kh - 1) * s.w + (s.kw - 1);
    let stride = ho * s.w + 2 * margin;
    let mut gpad = vec![0.0; s.c_out * s.len * stride];
    for (plane, dst) in gout.chunks_exact(plane_out).zip(gpad.chunks_exact_mut(stride)) {
        for y in 0..ho {
            dst[margin + y * s.w..][..wo].copy_from_slice(&plane[y * wo..(y + 1) * wo]);
        }
    }

    let n = s.span();
    for co in 0..s.c_out {
        gb[co] += gout[co * s.len * plane_out..(co + 1) * s.len * plane_out].iter().sum::<f64>();
        for t in 0..s.len {
            let g = &gpad[(co * s.len + t) * stride + margin..][..n];
            for ci in 0..s.c_in {
                for dt in 0..s.kt {
                    let Some(ti) = s.source_frame(t, dt) else { continue };
                    let kbase = s.kernel_index(co, ci, dt);
                    let xoff = (ci * s.len + ti) * plane_in;
                    for dy in 0..s.kh {
                        for dx in 0..s.kw {
                            gk[kbase + dy * s.kw + dx] += dot(g, &x[xoff + dy * s.w + dx..][..n]);
                        }
                    }
                }
            }
        }
    }

    let Some(gx) = gx else { return };
    let mut taps = Vec::with_capacity(s.c_out * s.kt * s.kh * s.kw);
    for ci in 0..s.c_in {
        for ti in 0..s.len {
            taps.clear();
            for co in 0..s.c_out {
                for dt in 0..s.kt {
                    // output frame t reads input frame ti through tap dt
                    let Some(t) = (ti + s.pad()).checked_sub(dt).filter(|&t| t < s.len) else {
                        continue;
                    };
                    let kbase = s.kernel_index(co, ci, dt);
                    let goff = (co * s.len + t) * stride + margin;
                    for dy in 0..s.kh {
                        for dx in 0..s.kw {
                            taps.push((goff - dy * s.w - dx, k[kbase + dy * s.kw + dx]));
                        }
                    }
                }
            }
            gather_taps(&mut gx[(ci * s.len + ti) * plane_in..][..plane_in], &gpad, &taps);
        }
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// 2x2 mean pooling over the last two axes of `[planes, h, w]`; odd edges are dropped.
pub fn avgpool2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            let r0 = &src[2 * y * w..(2 * y + 1) * w];
            let r1 = &src[(2 * y + 1) * w..(2 * y + 2) * w];
            for xx in 0..wo {
                out.push(0.25 * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]));
            }
        }
    }
    out
}

pub fn avgpool2_backward(g: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        let src = &g[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let v = 0.25 * src[y * wo + xx];
                dst[2 * y * w + 2 * xx] = v;
                dst[2 * y * w + 2 * xx + 1] = v;
                dst[(2 * y + 1) * w + 2 * xx] = v;
                dst[(2 * y + 1) * w + 2 * xx + 1] = v;
            }
        }
    }
    out
}

/// Mean over each `plane`-sized chunk.
pub fn global_avg(x: &[f64], plane: usize) -> Vec<f64> {
    x.chunks_exact(plane)
        .map(|c| c.iter().sum::<f64>() / plane as f64)
        .collect()
}

pub fn global_avg_backward(g: &[f64], plane: usize) -> Vec<f64> {
    let inv = 1.0 / plane as f64;
    g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, plane)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct sum over every output index and kernel tap.
    fn naive(s: &ConvShape, x: &[f64], k: &[f64], b: &[f64]) -> Vec<f64> {
        let (ho, wo) = (s.out_h(), s.out_w());
        let pad = s.kt as isize / 2;
        let mut out = vec![0.0; s.out_len()];
        for co in 0..s.c_out {
            for t in 0..s.len {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..s.c_in {
                            for dt in 0..s.kt {
                                let ti = t as isize + dt as isize - pad;
                                if ti < 0 || ti >= s.len as isize {
                                    continue;
                                }
                                for dy in 0..s.kh {
                                    for dx in 0..s.kw {
                                        let kv = k[(((co * s.c_in + ci) * s.kt + dt) * s.kh + dy) * s.kw + dx];
                                        let xv = x[((ci * s.len + ti as usize) * s.h + y + dy) * s.w + xx + dx];
                                        acc += kv * xv;
                                    }
                                }
                            }
                        }
                        out[((co * s.len + t) * ho + y) * wo + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_oracle() {
        let s = ConvShape { c_in: 1, c_out: 1, len: 4, h: 3, w: 3, kt: 3, kh: 2, kw: 2 };
        let x = random(s.in_len(), 1);
        let k = random(s.kernel_len(), 2);
        let mut out = vec![0.0; s.out_len()];
        conv3d(&s, &x, &k, &[0.25], &mut out);
        for (a, b) in out.iter().zip(naive(&s, &x, &k, &[0.25])) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_multichannel() {
        let s = ConvShape { c_in: 3, c_out: 2, len: 5, h: 6, w: 5, kt: 3, kh: 3, kw: 2 };
        let x = random(s.in_len(), 3);
        let k = random(s.kernel_len(), 4);
        let b = [0.1, -0.2];
        let mut out = vec![0.0; s.out_len()];
        conv3d(&s, &x, &k, &b, &mut out);
        for (a, b) in out.iter().zip(naive(&s, &x, &k, &b)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let s = ConvShape { c_in: 2, c_out: 2, len: 4, h: 4, w: 3, kt: 3, kh: 2, kw: 2 };
        let x = random(s.in_len(), 5);
        let k = random(s.kernel_len(), 6);
        let b = random(2, 7);
        let gout = random(s.out_len(), 8);
        let loss = |x: &[f64], k: &[f64], b: &[f64]| {
            let mut o = vec![0.0; s.out_len()];
            conv3d(&s, x, k, b, &mut o);
            o.iter().zip(&gout).map(|(a, g)| a * g).sum::<f64>()
        };
        let (mut gk, mut gb, mut gx) = (vec![0.0; k.len()], vec![0.0; 2], vec![0.0; x.len()]);
        conv3d_backward(&s, &x, &k, &gout, &mut gk, &mut gb, Some(&mut gx));
        let eps = 1e-6;
        let fd = |f: &dyn Fn(f64) -> f64| (f(eps) - f(-eps)) / (2.0 * eps);
        for i in 0..k.len() {
            let n = fd(&|e| {
                let mut k2 = k.clone();
                k2[i] += e;
                loss(&x, &k2, &b)
            });
            assert!((n - gk[i]).abs() < 1e-7);
        }
        for i in 0..x.len() {
            let n = fd(&|e| {
                let mut x2 = x.clone();
                x2[i] += e;
                loss(&x2, &k, &b)
            });
            assert!((n - gx[i]).abs() < 1e-7);
        }
        for i in 0..2 {
            let n = fd(&|e| {
                let mut b2 = b.clone();
                b2[i] += e;
                loss(&x, &k, &b2)
            });
            assert!((n - gb[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn pooling_round_trip_shapes() {
        let x: Vec<f64> = (0..2 * 5 * 4).map(|v| v as f64).collect();
        let p = avgpool2(&x, 2, 5, 4);
        assert_eq!(p.len(), 2 * 2 * 2);
        assert_eq!(p[0], 0.25 * (0.0 + 1.0 + 4.0 + 5.0));
        let g = avgpool2_backward(&[1.0; 8], 2, 5, 4);
        assert_eq!(g.iter().sum::<f64>(), 8.0);
        // dropped last row receives no gradient
        assert!(g[16..20].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
