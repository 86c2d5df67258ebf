//! Parks–McClellan (Remez exchange) design of linear-phase type-I FIR filters.

use std::f64::consts::PI;

use crate::dsp::SAMPLE_RATE;
use crate::{Error, Result};

pub const VOCODER_ORDER: usize = 10;
const MAX_ITERATIONS: usize = 250;
const TOLERANCE: f64 = 1e-6;
const GRID_DENSITY: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub f_lo: f64,
    pub f_hi: f64,
    pub desired: f64,
    pub weight: f64,
}

/// Bands in Hz at 16 kHz; gaps between bands are "don't care" transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct BandSpec {
    pub bands: Vec<Band>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FIRFilter {
    pub taps: Vec<f64>,
    pub order: usize,
    /// Converged weighted ripple |δ|.
    pub ripple: f64,
    /// Final extremal frequencies in Hz.
    pub extremal_hz: Vec<f64>,
    pub iterations: usize,
}

impl BandSpec {
    pub fn new(bands: Vec<Band>) -> Result<Self> {
        let spec = BandSpec { bands };
        spec.validate()?;
        Ok(spec)
    }

    fn nyquist() -> f64 {
        SAMPLE_RATE as f64 / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands.is_empty() {
            return Err(Error::Param("band specification has no bands".into()));
        }
        let mut prev = f64::NEG_INFINITY;
        for b in &self.bands {
            if !(b.f_lo >= 0.0 && b.f_hi <= Self::nyquist() && b.f_lo < b.f_hi) {
                return Err(Error::Param(format!("band [{}, {}] Hz outside [0, {}]", b.f_lo, b.f_hi, Self::nyquist())));
            }
            if b.f_lo <= prev {
                return Err(Error::Param("bands must be disjoint and ascending".into()));
            }
            if !(b.weight > 0.0 && b.weight.is_finite() && b.desired.is_finite()) {
                return Err(Error::Param("band weights must be positive and gains finite".into()));
            }
            prev = b.f_hi;
        }
        Ok(())
    }

    fn two_band(pass_low: bool, edge_lo: f64, edge_hi: f64) -> Self {
        let (d_lo, d_hi) = if pass_low { (1.0, 0.0) } else { (0.0, 1.0) };
        BandSpec {
            bands: vec![
                Band { f_lo: 0.0, f_hi: edge_lo, desired: d_lo, weight: 1.0 },
                Band { f_lo: edge_hi, f_hi: Self::nyquist(), desired: d_hi, weight: 1.0 },
            ],
        }
    }

    pub fn lowpass(pass_edge: f64, stop_edge: f64) -> Self {
        Self::two_band(true, pass_edge, stop_edge)
    }

    pub fn highpass(stop_edge: f64, pass_edge: f64) -> Self {
        Self::two_band(false, stop_edge, pass_edge)
    }
}

/// The four vocoder filters: pass/stop edges 5/7 kHz for voiced, 1/3 kHz for voiceless sounds.
#[derive(Clone, Debug, PartialEq)]
pub struct VoicingFilters {
    pub voiced_lp: FIRFilter,
    pub voiced_hp: FIRFilter,
    pub unvoiced_lp: FIRFilter,
    pub unvoiced_hp: FIRFilter,
}

impl VoicingFilters {
    pub fn design() -> Result<Self> {
        Ok(VoicingFilters {
            voiced_lp: remez_design(&BandSpec::lowpass(5000.0, 7000.0), VOCODER_ORDER)?,
            voiced_hp: remez_design(&BandSpec::highpass(5000.0, 7000.0), VOCODER_ORDER)?,
            unvoiced_lp: remez_design(&BandSpec::lowpass(1000.0, 3000.0), VOCODER_ORDER)?,
            unvoiced_hp: remez_design(&BandSpec::highpass(1000.0, 3000.0), VOCODER_ORDER)?,
        })
    }

    pub fn all(&self) -> [(&'static str, &FIRFilter); 4] {
        [
            ("voiced_lowpass", &self.voiced_lp),
            ("voiced_highpass", &self.voiced_hp),
            ("voiceless_lowpass", &self.unvoiced_lp),
            ("voiceless_highpass", &self.unvoiced_hp),
        ]
    }
}

struct GridPoint {
    omega: f64,
    desired: f64,
    weight: f64,
}

fn dense_grid(spec: &BandSpec, r: usize) -> Vec<GridPoint> {
    let fs = SAMPLE_RATE as f64;
    let step = 0.5 / (GRID_DENSITY * r) as f64;
    let mut grid = Vec::new();
    for b in &spec.bands {
        let (lo, hi) = (b.f_lo / fs, b.f_hi / fs);
        let n = (((hi - lo) / step).ceil() as usize).max(r.min(4)) + 1;
        for i in 0..n {
            let f = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            grid.push(GridPoint { omega: 2.0 * PI * f, desired: b.desired, weight: b.weight });
        }
    }
    grid
}

fn barycentric_weights(x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let p: f64 = (0..x.len()).filter(|&j| j != i).map(|j| x[i] - x[j]).product();
            1.0 / p
        })
        .collect()
}

/// Lagrange interpolation of `(x, c)` at `xv` in barycentric form.
fn interpolate(x: &[f64], c: &[f64], w: &[f64], xv: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..x.len() {
        let d = xv - x[i];
        if d == 0.0 {
            return c[i];
        }
        let t = w[i] / d;
        num += t * c[i];
        den += t;
    }
    num / den
}

struct Interpolant {
    x: Vec<f64>,
    c: Vec<f64>,
    w: Vec<f64>,
    delta: f64,
}

fn solve(grid: &[GridPoint], ext: &[usize]) -> Interpolant {
    let x: Vec<f64> = ext.iter().map(|&i| grid[i].omega.cos()).collect();
    let b = barycentric_weights(&x);
    let (mut num, mut den) = (0.0, 0.0);
    for (k, &i) in ext.iter().enumerate() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        num += b[k] * grid[i].desired;
        den += sign * b[k] / grid[i].weight;
    }
    let delta = num / den;
    let n = ext.len() - 1;
    let c: Vec<f64> = (0..n)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            grid[ext[k]].desired - sign * delta / grid[ext[k]].weight
        })
        .collect();
    let xs = x[..n].to_vec();
    let w = barycentric_weights(&xs);
    Interpolant { x: xs, c, w, delta }
}

/// Local extrema of the error (band edges included), reduced to an alternating set of `want` points.
fn exchange(err: &[f64], grid: &[GridPoint], spec: &BandSpec, want: usize) -> Vec<usize> {
    let mut band_of = Vec::with_capacity(grid.len());
    let mut idx = 0;
    for (bi, b) in spec.bands.iter().enumerate() {
        let fs = SAMPLE_RATE as f64;
        while idx < grid.len() && grid[idx].omega <= 2.0 * PI * b.f_hi / fs + 1e-12 {
            band_of.push(bi);
            idx += 1;
        }
    }
    let mut cand = Vec::new();
    for i in 0..grid.len() {
        let left = i > 0 && band_of[i - 1] == band_of[i];
        let right = i + 1 < grid.len() && band_of[i + 1] == band_of[i];
        let e = err[i];
        let ge_left = !left || (e >= 0.0 && e >= err[i - 1]) || (e <= 0.0 && e <= err[i - 1]);
        let ge_right = !right || (e >= 0.0 && e > err[i + 1]) || (e <= 0.0 && e < err[i + 1]);
        if e != 0.0 && ge_left && ge_right {
            cand.push(i);
        }
    }
    let mut alt: Vec<usize> = Vec::new();
    for i in cand {
        match alt.last() {
            Some(&j) if err[j].signum() == err[i].signum() => {
                if err[i].abs() > err[j].abs() {
                    *alt.last_mut().unwrap() = i;
                }
            }
            _ => alt.push(i),
        }
    }
    while alt.len() > want {
        if err[alt[0]].abs() < err[*alt.last().unwrap()].abs() {
            alt.remove(0);
        } else {
            alt.pop();
        }
    }
    alt
}

pub fn remez_design(spec: &BandSpec, order: usize) -> Result<FIRFilter> {
    spec.validate()?;
    if order == 0 || order % 2 != 0 {
        return Err(Error::Param(format!("type-I design needs an even positive order, got {order}")));
    }
    let m = order / 2;
    let r = m + 1;
    let grid = dense_grid(spec, r);
    if grid.len() < r + 1 {
        return Err(Error::Param("frequency grid too small for the requested order".into()));
    }
    let mut ext: Vec<usize> = (0..=r).map(|k| k * (grid.len() - 1) / r).collect();
    let mut iterations = 0;
    let interp = loop {
        iterations += 1;
        let it = solve(&grid, &ext);
        let err: Vec<f64> = grid
            .iter()
            .map(|g| g.weight * (g.desired - interpolate(&it.x, &it.c, &it.w, g.omega.cos())))
            .collect();
        let max_err = err.iter().fold(0.0f64, |a, e| a.max(e.abs()));
        if max_err < 1e-12 {
            break it;
        }
        let next = exchange(&err, &grid, spec, r + 1);
        let min_ext = ext.iter().map(|&i| err[i].abs()).fold(f64::INFINITY, f64::min);
        let spread = (max_err - min_ext) / max_err;
        if spread < TOLERANCE && next.len() == r + 1 {
            break it;
        }
        if iterations >= MAX_ITERATIONS || next.len() < r + 1 {
            return Err(Error::Convergence { iterations, spread });
        }
        ext = next;
    };
    let a: Vec<f64> = (0..=m)
        .map(|k| {
            let s: f64 = (0..=m)
                .map(|j| {
                    let x = (PI * j as f64 / m as f64).cos();
                    let half = if j == 0 || j == m { 0.5 } else { 1.0 };
                    half * interpolate(&interp.x, &interp.c, &interp.w, x) * (PI * (j * k) as f64 / m as f64).cos()
                })
                .sum();
            let scale = if k == 0 || k == m { 1.0 } else { 2.0 };
            scale * s / m as f64
        })
        .collect();
    let mut taps = vec![0.0; order + 1];
    taps[m] = a[0];
    for k in 1..=m {
        taps[m - k] = a[k] / 2.0;
        taps[m + k] = a[k] / 2.0;
    }
    let fs = SAMPLE_RATE as f64;
    Ok(FIRFilter {
        taps,
        order,
        ripple: interp.delta.abs(),
        extremal_hz: ext.iter().map(|&i| grid[i].omega * fs / (2.0 * PI)).collect(),
        iterations,
    })
}

impl FIRFilter {
    /// Complex response at `f_hz`.
    pub fn response_at(&self, f_hz: f64) -> (f64, f64) {
        let w = 2.0 * PI * f_hz / SAMPLE_RATE as f64;
        self.taps.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, &h)| (re + h * (w * n as f64).cos(), im - h * (w * n as f64).sin()))
    }

    /// Zero-phase amplitude `A(f)` (real, may be negative).
    pub fn amplitude_at(&self, f_hz: f64) -> f64 {
        let m = self.order / 2;
        let w = 2.0 * PI * f_hz / SAMPLE_RATE as f64;
        self.taps[m] + (1..=m).map(|k| 2.0 * self.taps[m + k] * (w * k as f64).cos()).sum::<f64>()
    }
}

/// Magnitudes on `n_points` evenly spaced frequencies from 0 to 8 kHz inclusive.
pub fn freq_response(f: &FIRFilter, n_points: usize) -> Result<Vec<f64>> {
    if n_points < f.taps.len() || n_points < 2 {
        return Err(Error::Param(format!("need at least {} response points", f.taps.len().max(2))));
    }
    let nyq = SAMPLE_RATE as f64 / 2.0;
    Ok((0..n_points)
        .map(|i| {
            let (re, im) = f.response_at(nyq * i as f64 / (n_points - 1) as f64);
            re.hypot(im)
        })
        .collect())
}

/// Same-length causal filtering from a zero initial state.
pub fn apply_fir(f: &FIRFilter, x: &[f64]) -> Vec<f64> {
    autodiff::kernels::fir_forward(x, &f.taps)
}
