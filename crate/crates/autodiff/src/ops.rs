use std::rc::Rc;

use crate::error::{AdError, Result};
use crate::kernels::{self, FrameSpec};
use crate::special;
use crate::tape::{Op, Var};
use crate::tensor::Tensor;

fn shape_err<T>(op: &'static str, msg: String) -> Result<T> {
    Err(AdError::Shape { op, msg })
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn dims2(op: &'static str, a: &Tensor) -> Result<(usize, usize)> {
    match a.dims2() {
        Some(d) => Ok(d),
        None => shape_err(op, format!("expected a matrix, got {:?}", a.shape())),
    }
}

fn same_tape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if !std::ptr::eq(a.tape, b.tape) {
        return Err(AdError::Usage(format!("{op}: operands live on different tapes")));
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let v = self.value().map(f);
        self.tape.push(name, v, op, &[self.id])
    }

    fn binary(&self, name: &'static str, other: Var<'t>, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        same_tape(name, self, &other)?;
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let v = Tensor::new(a.shape(), data)?;
        self.tape.push(name, v, op, &[self.id, other.id])
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape("matmul", self, &other)?;
        let (a, b) = (self.value(), other.value());
        let (m, k) = dims2("matmul", &a)?;
        let (k2, n) = dims2("matmul", &b)?;
        if k != k2 {
            return shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
        }
        let v = Tensor::new(&[m, n], kernels::matmul(a.data(), b.data(), m, k, n))?;
        self.tape.push("matmul", v, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        dims2("transpose", &a)?;
        self.tape.push("transpose", a.transpose2(), Op::Transpose(self.id), &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshaped(shape)?;
        self.tape.push("reshape", v, Op::Reshape(self.id), &[self.id])
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("add", other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("sub", other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("mul", other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("div", other, |a, b| a / b, Op::Div(self.id, other.id))
    }

    /// `scale * x + shift`
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Var<'t>> {
        self.unary("affine", |x| scale * x + shift, Op::Affine(self.id, scale))
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        self.affine(s, 0.0)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.affine(-1.0, 0.0)
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        same_tape("add_row", self, &row)?;
        let (a, r) = (self.value(), row.value());
        let (m, n) = dims2("add_row", &a)?;
        if r.len() != n || r.rank() != 1 {
            return shape_err("add_row", format!("{:?} + row {:?}", a.shape(), r.shape()));
        }
        let mut data = a.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r.data()[j];
            }
        }
        self.tape.push("add_row", Tensor::new(&[m, n], data)?, Op::AddRow(self.id, row.id), &[self.id, row.id])
    }

    /// Adds a length-`m` vector to every column of an `m × n` matrix.
    pub fn add_col(&self, col: Var<'t>) -> Result<Var<'t>> {
        same_tape("add_col", self, &col)?;
        let (a, c) = (self.value(), col.value());
        let (m, n) = dims2("add_col", &a)?;
        if c.len() != m || c.rank() != 1 {
            return shape_err("add_col", format!("{:?} + col {:?}", a.shape(), c.shape()));
        }
        let mut data = a.data().to_vec();
        for i in 0..m {
            let ci = c.data()[i];
            for v in &mut data[i * n..(i + 1) * n] {
                *v += ci;
            }
        }
        self.tape.push("add_col", Tensor::new(&[m, n], data)?, Op::AddCol(self.id, col.id), &[self.id, col.id])
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid(self.id))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary("log", f64::ln, Op::Log(self.id))
    }

    pub fn sin(&self) -> Result<Var<'t>> {
        self.unary("sin", f64::sin, Op::Sin(self.id))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary("square", |x| x * x, Op::Square(self.id))
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary("clamp", |x| x.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    pub fn ln_gamma(&self) -> Result<Var<'t>> {
        self.unary("ln_gamma", special::ln_gamma, Op::LnGamma(self.id))
    }

    pub fn digamma(&self) -> Result<Var<'t>> {
        self.unary("digamma", special::digamma, Op::Digamma(self.id))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = dims2("softmax", &a)?;
        let mut data = a.data().to_vec();
        for i in 0..m {
            softmax_in_place(&mut data[i * n..(i + 1) * n]);
        }
        self.tape.push("softmax", Tensor::new(&[m, n], data)?, Op::SoftmaxRows(self.id), &[self.id])
    }

    pub fn log_softmax_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = dims2("log_softmax", &a)?;
        let mut data = a.data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.tape.push("log_softmax", Tensor::new(&[m, n], data)?, Op::LogSoftmaxRows(self.id), &[self.id])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.tape.push("sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value().len();
        if n == 0 {
            return shape_err("mean", "empty tensor".into());
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Per-row sums of an `m × n` matrix, as a length-`m` vector.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = dims2("sum_rows", &a)?;
        let data = (0..m).map(|i| a.data()[i * n..(i + 1) * n].iter().sum()).collect();
        self.tape.push("sum_rows", Tensor::vector(data), Op::SumRows(self.id), &[self.id])
    }

    /// Running sum over the flattened data.
    pub fn cumsum(&self) -> Result<Var<'t>> {
        let a = self.value();
        let mut acc = 0.0;
        let data = a
            .data()
            .iter()
            .map(|v| {
                acc += v;
                acc
            })
            .collect();
        self.tape.push("cumsum", Tensor::new(a.shape(), data)?, Op::Cumsum(self.id), &[self.id])
    }

    /// Selects rows (the leading axis) by index; indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() == 0 {
            return shape_err("gather_rows", "scalar input".into());
        }
        let rows = a.shape()[0];
        let n = if rows == 0 { 0 } else { a.len() / rows };
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= rows {
                return shape_err("gather_rows", format!("row {i} out of {rows}"));
            }
            data.extend_from_slice(&a.data()[i * n..(i + 1) * n]);
        }
        let mut shape = a.shape().to_vec();
        shape[0] = idx.len();
        self.tape.push("gather_rows", Tensor::new(&shape, data)?, Op::GatherRows(self.id, idx.to_vec()), &[self.id])
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() == 0 || start > end || end > a.shape()[0] {
            return shape_err("slice_rows", format!("{start}..{end} of {:?}", a.shape()));
        }
        let n = a.len() / a.shape()[0].max(1);
        let mut shape = a.shape().to_vec();
        shape[0] = end - start;
        let v = Tensor::new(&shape, a.data()[start * n..end * n].to_vec())?;
        self.tape.push("slice_rows", v, Op::SliceRows(self.id, start), &[self.id])
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&self, i: usize) -> Result<Var<'t>> {
        let n = dims2("row", &self.value())?.1;
        self.slice_rows(i, i + 1)?.reshape(&[n])
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = dims2("slice_cols", &a)?;
        if start > end || end > n {
            return shape_err("slice_cols", format!("{start}..{end} of {:?}", a.shape()));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&a.data()[i * n + start..i * n + end]);
        }
        self.tape.push("slice_cols", Tensor::new(&[m, w], data)?, Op::SliceCols(self.id, start), &[self.id])
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return shape_err("concat_cols", "no inputs".into());
        };
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let m = dims2("concat_cols", &vals[0])?.0;
        let mut widths = Vec::new();
        for (p, v) in parts.iter().zip(&vals) {
            same_tape("concat_cols", first, p)?;
            let (r, c) = dims2("concat_cols", v)?;
            if r != m {
                return shape_err("concat_cols", format!("row counts {m} vs {r}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (v, &w) in vals.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
        }
        let ids: Vec<_> = parts.iter().map(|p| p.id).collect();
        first.tape.push("concat_cols", Tensor::new(&[m, total], data)?, Op::ConcatCols(ids.clone()), &ids)
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return shape_err("stack_rows", "no inputs".into());
        };
        let n = first.value().len();
        let mut data = Vec::with_capacity(parts.len() * n);
        for p in parts {
            same_tape("stack_rows", first, p)?;
            let v = p.value();
            if v.len() != n {
                return shape_err("stack_rows", format!("row lengths {n} vs {}", v.len()));
            }
            data.extend_from_slice(v.data());
        }
        let ids: Vec<_> = parts.iter().map(|p| p.id).collect();
        first.tape.push("stack_rows", Tensor::new(&[parts.len(), n], data)?, Op::StackRows(ids.clone()), &ids)
    }

    /// "Same"-length dilated 1-D convolution: `self` is `[c_in × t]`, `w` is `[c_out × c_in × k]` with odd `k`.
    pub fn conv1d(&self, w: Var<'t>, dilation: usize) -> Result<Var<'t>> {
        same_tape("conv1d", self, &w)?;
        let (x, wv) = (self.value(), w.value());
        let (c_in, tl) = dims2("conv1d", &x)?;
        let ws = wv.shape();
        if ws.len() != 3 || ws[1] != c_in || ws[2] % 2 == 0 || dilation == 0 {
            return shape_err("conv1d", format!("input {:?}, weight {:?}, dilation {dilation}", x.shape(), ws));
        }
        let (c_out, k) = (ws[0], ws[2]);
        let data = kernels::conv1d_forward(x.data(), wv.data(), c_in, c_out, k, tl, dilation);
        let op = Op::Conv1d { x: self.id, w: w.id, dilation };
        self.tape.push("conv1d", Tensor::new(&[c_out, tl], data)?, op, &[self.id, w.id])
    }

    /// Transposed 1-D convolution cropped to exactly `stride × len`: `self` is `[c_in × len]`,
    /// `w` is `[c_in × c_out × k]` with `k ≥ stride`.
    pub fn transposed_conv1d(&self, w: Var<'t>, stride: usize) -> Result<Var<'t>> {
        same_tape("transposed_conv1d", self, &w)?;
        let (x, wv) = (self.value(), w.value());
        let (c_in, l) = dims2("transposed_conv1d", &x)?;
        let ws = wv.shape();
        if ws.len() != 3 || ws[0] != c_in || stride == 0 || ws[2] < stride {
            return shape_err("transposed_conv1d", format!("input {:?}, weight {:?}, stride {stride}", x.shape(), ws));
        }
        let (c_out, k) = (ws[1], ws[2]);
        let data = kernels::tconv1d_forward(x.data(), wv.data(), c_in, c_out, k, l, stride);
        let op = Op::TConv1d { x: self.id, w: w.id, stride };
        self.tape.push("transposed_conv1d", Tensor::new(&[c_out, stride * l], data)?, op, &[self.id, w.id])
    }

    /// One LSTM step (gate order i, f, g, o). Returns `[h', c']` concatenated (length `2H`).
    pub fn lstm_cell(x: Var<'t>, h: Var<'t>, c: Var<'t>, w_ih: Var<'t>, w_hh: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        for v in [&h, &c, &w_ih, &w_hh, &b] {
            same_tape("lstm_cell", &x, v)?;
        }
        let (xv, hv, cv, wi, wh, bv) = (x.value(), h.value(), c.value(), w_ih.value(), w_hh.value(), b.value());
        let (n_in, hsz) = (xv.len(), hv.len());
        if cv.len() != hsz
            || wi.shape() != [4 * hsz, n_in]
            || wh.shape() != [4 * hsz, hsz]
            || bv.shape() != [4 * hsz]
        {
            return shape_err(
                "lstm_cell",
                format!("x {:?} h {:?} c {:?} w_ih {:?} w_hh {:?} b {:?}", xv.shape(), hv.shape(), cv.shape(), wi.shape(), wh.shape(), bv.shape()),
            );
        }
        let mut pre = bv.data().to_vec();
        for (r, p) in pre.iter_mut().enumerate() {
            let wi_r = &wi.data()[r * n_in..(r + 1) * n_in];
            let wh_r = &wh.data()[r * hsz..(r + 1) * hsz];
            *p += wi_r.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f64>();
            *p += wh_r.iter().zip(hv.data()).map(|(a, b)| a * b).sum::<f64>();
        }
        let mut gates = pre;
        for (r, gv) in gates.iter_mut().enumerate() {
            *gv = if (2 * hsz..3 * hsz).contains(&r) { gv.tanh() } else { sigmoid(*gv) };
        }
        let mut out = vec![0.0; 2 * hsz];
        for j in 0..hsz {
            let c_new = gates[hsz + j] * cv.data()[j] + gates[j] * gates[2 * hsz + j];
            out[hsz + j] = c_new;
            out[j] = gates[3 * hsz + j] * c_new.tanh();
        }
        let op = Op::LstmCell { x: x.id, h: h.id, c: c.id, w_ih: w_ih.id, w_hh: w_hh.id, b: b.id, gates };
        x.tape.push("lstm_cell", Tensor::vector(out), op, &[x.id, h.id, c.id, w_ih.id, w_hh.id, b.id])
    }

    /// Causal FIR filter with fixed taps over the flattened data.
    pub fn fir(&self, taps: &[f64]) -> Result<Var<'t>> {
        let a = self.value();
        let data = kernels::fir_forward(a.data(), taps);
        let op = Op::Fir(self.id, Rc::new(taps.to_vec()));
        self.tape.push("fir", Tensor::new(a.shape(), data)?, op, &[self.id])
    }

    /// Hann-windowed DFT power frames `[frames × (fft_bins/2 + 1)]` of a 1-D signal.
    pub fn rfft_power(&self, spec: FrameSpec) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 1 {
            return shape_err("rfft_power", format!("expected a 1-D signal, got {:?}", a.shape()));
        }
        if spec.frame_length > spec.fft_bins || spec.stride == 0 || a.len() < spec.frame_length {
            return shape_err("rfft_power", format!("{spec:?} on signal of length {}", a.len()));
        }
        let data = kernels::stft_power(a.data(), spec);
        let shape = [spec.n_frames(a.len()), spec.n_freqs()];
        self.tape.push("rfft_power", Tensor::new(&shape, data)?, Op::RfftPower(self.id, spec), &[self.id])
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
