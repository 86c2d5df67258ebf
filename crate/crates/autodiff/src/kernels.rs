//! Numeric kernels shared by the forward ops and their backward rules.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Strided read-only view used to feed `dgemm`.
#[derive(Clone, Copy)]
pub struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        View { data, offset: 0, rs: cols, cs: 1 }
    }

    pub fn transposed(self) -> Self {
        View { rs: self.cs, cs: self.rs, ..self }
    }

    fn check(&self, m: usize, n: usize) {
        if m > 0 && n > 0 {
            let last = self.offset + (m - 1) * self.rs + (n - 1) * self.cs;
            assert!(last < self.data.len(), "strided view out of bounds");
        }
    }
}

/// `c = alpha * a(m×k) · b(k×n) + beta * c`, with `c` row-major and `ldc` its row stride.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for v in &mut c[c_offset + i * ldc..c_offset + i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!(c_offset + (m - 1) * ldc + n <= c.len(), "gemm output out of bounds");
    // SAFETY: all three views were bounds-checked above for the requested extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            ldc as isize,
            1,
        );
    }
}

/// Row-major `a(m×k) · b(k×n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, View::rows(a, k), View::rows(b, n), 0.0, &mut c, 0, n);
    c
}

pub fn conv_padding(kernel: usize, dilation: usize) -> usize {
    dilation * (kernel - 1) / 2
}

fn pad_cols(x: &[f64], rows: usize, cols: usize, pad: usize) -> Vec<f64> {
    let wide = cols + 2 * pad;
    let mut out = vec![0.0; rows * wide];
    for r in 0..rows {
        out[r * wide + pad..r * wide + pad + cols].copy_from_slice(&x[r * cols..(r + 1) * cols]);
    }
    out
}

/// "Same"-length dilated convolution. `x` is `[c_in × t]`, `w` is `[c_out × c_in × k]` (k odd).
pub fn conv1d_forward(x: &[f64], w: &[f64], c_in: usize, c_out: usize, k: usize, t: usize, dilation: usize) -> Vec<f64> {
    let pad = conv_padding(k, dilation);
    let xp = pad_cols(x, c_in, t, pad);
    let wide = t + 2 * pad;
    let mut out = vec![0.0; c_out * t];
    for tap in 0..k {
        let wa = View { data: w, offset: tap, rs: c_in * k, cs: k };
        let xb = View { data: &xp, offset: tap * dilation, rs: wide, cs: 1 };
        gemm(c_out, c_in, t, 1.0, wa, xb, 1.0, &mut out, 0, t);
    }
    out
}

/// Returns `(grad_x, grad_w)` for [`conv1d_forward`].
pub fn conv1d_backward(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    c_in: usize,
    c_out: usize,
    k: usize,
    t: usize,
    dilation: usize,
) -> (Vec<f64>, Vec<f64>) {
    let pad = conv_padding(k, dilation);
    let wide = t + 2 * pad;
    let xp = pad_cols(x, c_in, t, pad);
    let mut gxp = vec![0.0; c_in * wide];
    let mut gw = vec![0.0; c_out * c_in * k];
    let gv = View::rows(g, t);
    for tap in 0..k {
        let wa = View { data: w, offset: tap, rs: c_in * k, cs: k };
        // gxp[:, tap*d .. tap*d + t] += W_tapᵀ · g
        gemm(c_in, c_out, t, 1.0, wa.transposed(), gv, 1.0, &mut gxp, tap * dilation, wide);
        // gw[:, :, tap] += g · xp[:, tap*d ..]ᵀ
        let xb = View { data: &xp, offset: tap * dilation, rs: wide, cs: 1 };
        let mut tmp = vec![0.0; c_out * c_in];
        gemm(c_out, t, c_in, 1.0, gv, xb.transposed(), 0.0, &mut tmp, 0, c_in);
        for o in 0..c_out {
            for i in 0..c_in {
                gw[(o * c_in + i) * k + tap] += tmp[o * c_in + i];
            }
        }
    }
    let mut gx = vec![0.0; c_in * t];
    for r in 0..c_in {
        gx[r * t..(r + 1) * t].copy_from_slice(&gxp[r * wide + pad..r * wide + pad + t]);
    }
    (gx, gw)
}

/// Left crop applied after a transposed convolution so the output is exactly `stride × len`.
pub fn transposed_crop(kernel: usize, stride: usize) -> usize {
    (kernel - stride) / 2
}

/// Transposed convolution. `x` is `[c_in × l]`, `w` is `[c_in × c_out × k]`; output `[c_out × stride·l]`.
pub fn tconv1d_forward(x: &[f64], w: &[f64], c_in: usize, c_out: usize, k: usize, l: usize, stride: usize) -> Vec<f64> {
    let crop = transposed_crop(k, stride);
    let t_out = stride * l;
    let mut out = vec![0.0; c_out * t_out];
    let mut tmp = vec![0.0; c_out * l];
    let xv = View::rows(x, l);
    for tap in 0..k {
        // tmp[co, t] = Σ_ci w[ci, co, tap] x[ci, t]
        let wa = View { data: w, offset: tap, rs: k, cs: c_out * k };
        gemm(c_out, c_in, l, 1.0, wa, xv, 0.0, &mut tmp, 0, l);
        for t in 0..l {
            let pos = (t * stride + tap) as isize - crop as isize;
            if pos < 0 || pos as usize >= t_out {
                continue;
            }
            let pos = pos as usize;
            for co in 0..c_out {
                out[co * t_out + pos] += tmp[co * l + t];
            }
        }
    }
    out
}

pub fn tconv1d_backward(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    c_in: usize,
    c_out: usize,
    k: usize,
    l: usize,
    stride: usize,
) -> (Vec<f64>, Vec<f64>) {
    let crop = transposed_crop(k, stride);
    let t_out = stride * l;
    let mut gx = vec![0.0; c_in * l];
    let mut gw = vec![0.0; c_in * c_out * k];
    let mut gsel = vec![0.0; c_out * l];
    let mut tmp = vec![0.0; c_in * c_out];
    let xv = View::rows(x, l);
    for tap in 0..k {
        gsel.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..l {
            let pos = (t * stride + tap) as isize - crop as isize;
            if pos < 0 || pos as usize >= t_out {
                continue;
            }
            for co in 0..c_out {
                gsel[co * l + t] = g[co * t_out + pos as usize];
            }
        }
        let gv = View::rows(&gsel, l);
        let wa = View { data: w, offset: tap, rs: c_out * k, cs: k }; // [c_in × c_out]
        gemm(c_in, c_out, l, 1.0, wa, gv, 1.0, &mut gx, 0, l);
        gemm(c_in, l, c_out, 1.0, xv, gv.transposed(), 0.0, &mut tmp, 0, c_out);
        for ci in 0..c_in {
            for co in 0..c_out {
                gw[(ci * c_out + co) * k + tap] += tmp[ci * c_out + co];
            }
        }
    }
    (gx, gw)
}

/// Causal FIR filtering with zero initial state; output has the input's length.
pub fn fir_forward(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (t, out) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, h) in taps.iter().enumerate().take(t + 1) {
            acc += h * x[t - k];
        }
        *out = acc;
    }
    y
}

pub fn fir_backward(g: &[f64], taps: &[f64]) -> Vec<f64> {
    let n = g.len();
    let mut gx = vec![0.0; n];
    for (t, out) in gx.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, h) in taps.iter().enumerate() {
            if t + k < n {
                acc += h * g[t + k];
            }
        }
        *out = acc;
    }
    gx
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()).collect()
}

/// Framing parameters of a short-time power spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameSpec {
    pub fft_bins: usize,
    pub frame_length: usize,
    pub stride: usize,
}

impl FrameSpec {
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.frame_length {
            0
        } else {
            (len - self.frame_length) / self.stride + 1
        }
    }

    pub fn n_freqs(&self) -> usize {
        self.fft_bins / 2 + 1
    }
}

/// Hann-windowed, zero-padded DFT power per frame, row-major `[frames × freqs]`.
pub fn stft_power(x: &[f64], spec: FrameSpec) -> Vec<f64> {
    let n = spec.fft_bins;
    let frames = spec.n_frames(x.len());
    let m = spec.n_freqs();
    let window = hann_window(spec.frame_length);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut out = vec![0.0; frames * m];
    for l in 0..frames {
        let start = l * spec.stride;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < spec.frame_length {
                Complex::new(x[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for k in 0..m {
            out[l * m + k] = buf[k].norm_sqr();
        }
    }
    out
}

/// Adjoint of [`stft_power`]: gradient w.r.t. the signal given the gradient w.r.t. each power bin.
pub fn stft_power_backward(g: &[f64], x: &[f64], spec: FrameSpec) -> Vec<f64> {
    let n = spec.fft_bins;
    let frames = spec.n_frames(x.len());
    let m = spec.n_freqs();
    let window = hann_window(spec.frame_length);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut gx = vec![0.0; x.len()];
    for l in 0..frames {
        let start = l * spec.stride;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < spec.frame_length {
                Complex::new(x[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fwd.process(&mut buf);
        // dP_k/dx_n = 2 w_n Re(conj(X_k) e^{-2πikn/N}); summing over the half spectrum
        // is an unnormalised inverse DFT of Z_k = g_k X_k.
        for (k, b) in buf.iter_mut().enumerate() {
            *b = if k < m { *b * g[l * m + k] } else { Complex::new(0.0, 0.0) };
        }
        inv.process(&mut buf);
        for i in 0..spec.frame_length {
            gx[start + i] += 2.0 * window[i] * buf[i].re;
        }
    }
    gx
}
