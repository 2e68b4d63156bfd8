//! Band-pass filtering, min-max normalization, and the Morlet scalogram.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{Segment, SAMPLE_RATE};
use crate::{invalid, CoreError, Result};

pub const LOW_HZ: f64 = 0.5;
pub const HIGH_HZ: f64 = 100.0;
pub const N_SCALES: usize = 96;
pub const MORLET_W0: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    /// a0 is normalized to 1; these are a1, a2.
    pub a: [f64; 2],
}

impl Biquad {
    pub fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + self.b[1] * z_inv + self.b[2] * z2) / (1.0 + self.a[0] * z_inv + self.a[1] * z2)
    }

    /// Pole moduli from the characteristic polynomial z^2 + a1 z + a2.
    pub fn pole_radius(&self) -> f64 {
        let [a1, a2] = self.a;
        let disc = a1 * a1 - 4.0 * a2;
        if disc >= 0.0 {
            let s = disc.sqrt();
            ((-a1 + s) / 2.0).abs().max(((-a1 - s) / 2.0).abs())
        } else {
            a2.sqrt()
        }
    }

    /// Direct-form II transposed state for a unit step at steady state.
    fn step_state(&self) -> [f64; 2] {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let y = (b0 + b1 + b2) / (1.0 + a1 + a2);
        let z2 = b2 - a2 * y;
        [b1 - a1 * y + z2, z2]
    }

    fn dc_gain(&self) -> f64 {
        (self.b.iter().sum::<f64>()) / (1.0 + self.a[0] + self.a[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
    pub low_hz: f64,
    pub high_hz: f64,
    pub fs: f64,
    pub order: usize,
}

/// Butterworth band-pass of the given prototype order as second-order
/// sections. Each analog band-pass pole pair becomes one section
/// `BW·s / (s² − 2σs + |p|²)`, mapped through the bilinear transform with
/// both cutoffs prewarped.
pub fn design_bandpass(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Result<BiquadCascade> {
    if order == 0 || order % 2 != 0 {
        return invalid(format!("band-pass prototype order must be even and positive, got {order}"));
    }
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
        return invalid(format!(
            "cutoffs must satisfy 0 < low < high < fs/2, got {low_hz} / {high_hz} at {fs} Hz"
        ));
    }
    let k = 2.0 * fs;
    let w_lo = k * (PI * low_hz / fs).tan();
    let w_hi = k * (PI * high_hz / fs).tan();
    let bw = w_hi - w_lo;
    let w0_sq = w_lo * w_hi;

    let mut sections = Vec::with_capacity(order);
    // Upper-half-plane prototype poles; their conjugates supply the
    // conjugate band-pass poles.
    for i in 0..order / 2 {
        let theta = PI * (2 * i + 1 + order) as f64 / (2 * order) as f64;
        let q = Complex64::from_polar(1.0, theta);
        let disc = (q * q * bw * bw - 4.0 * w0_sq).sqrt();
        for p in [(q * bw + disc) / 2.0, (q * bw - disc) / 2.0] {
            let sigma = p.re;
            let r2 = p.norm_sqr();
            let a0 = k * k - 2.0 * sigma * k + r2;
            let a1 = (-2.0 * k * k + 2.0 * r2) / a0;
            let a2 = (k * k + 2.0 * sigma * k + r2) / a0;
            let g = bw * k / a0;
            sections.push(Biquad {
                b: [g, 0.0, -g],
                a: [a1, a2],
            });
        }
    }
    Ok(BiquadCascade {
        sections,
        low_hz,
        high_hz,
        fs,
        order,
    })
}

impl BiquadCascade {
    pub fn standard() -> Self {
        design_bandpass(2, LOW_HZ, HIGH_HZ, SAMPLE_RATE as f64).expect("fixed design is valid")
    }

    pub fn response(&self, hz: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * hz / self.fs);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    pub fn gain(&self, hz: f64) -> f64 {
        self.response(hz).norm()
    }

    pub fn gain_db(&self, hz: f64) -> f64 {
        20.0 * self.gain(hz).log10()
    }

    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(|s| s.pole_radius() < 1.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One causal pass, starting from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            run_section(s, &mut y, [0.0, 0.0]);
        }
        y
    }

    /// Runs the cascade with each section's state set to its steady-state
    /// response to a constant input equal to `x[0]`.
    fn filter_from_steady_state(&self, x: &mut [f64]) {
        let mut level = x[0];
        for s in &self.sections {
            let zi = s.step_state();
            run_section(s, x, [zi[0] * level, zi[1] * level]);
            level *= s.dc_gain();
        }
    }
}

fn run_section(s: &Biquad, x: &mut [f64], mut z: [f64; 2]) {
    let [b0, b1, b2] = s.b;
    let [a1, a2] = s.a;
    for v in x.iter_mut() {
        let input = *v;
        let y = b0 * input + z[0];
        z[0] = b1 * input - a1 * y + z[1];
        z[1] = b2 * input - a2 * y;
        *v = y;
    }
}

fn check_finite(x: &[f64], what: &str) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => invalid(format!("{what}: non-finite value at index {i}")),
        None => Ok(()),
    }
}

/// Edge padding used by the forward-backward filter: one period of the low
/// cutoff, capped by the signal length.
pub fn pad_len(filt: &BiquadCascade, n: usize) -> usize {
    ((filt.fs / filt.low_hz).round() as usize).min(n.saturating_sub(1))
}

/// Forward-backward filtering with odd-reflection padding and steady-state
/// initial conditions, so the result has zero phase and small edge transients.
pub fn filter_zero_phase(x: &[f64], filt: &BiquadCascade) -> Result<Vec<f64>> {
    check_finite(x, "filter input")?;
    let min_len = 3 * filt.order;
    if x.len() < min_len {
        return invalid(format!("filter needs at least {min_len} samples, got {}", x.len()));
    }
    let n = x.len();
    let pad = pad_len(filt, n);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    filt.filter_from_steady_state(&mut ext);
    ext.reverse();
    filt.filter_from_steady_state(&mut ext);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    #[default]
    ZeroPhase,
    SinglePass,
}

pub fn apply_filter(x: &[f64], filt: &BiquadCascade, mode: FilterMode) -> Result<Vec<f64>> {
    match mode {
        FilterMode::ZeroPhase => filter_zero_phase(x, filt),
        FilterMode::SinglePass => {
            check_finite(x, "filter input")?;
            Ok(filt.filter(x))
        }
    }
}

/// `(x - min) / (max - min)`; a constant input maps to all zeros.
pub fn min_max_normalize(x: &[f64]) -> Result<Vec<f64>> {
    check_finite(x, "normalize input")?;
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if !(hi > lo) {
        return Ok(vec![0.0; x.len()]);
    }
    let span = hi - lo;
    Ok(x.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect())
}

pub fn normalize_segment(seg: &Segment) -> Result<Segment> {
    Ok(Segment {
        samples: min_max_normalize(&seg.samples)?,
        ..seg.clone()
    })
}

/// Time-frequency magnitude map, stored row-major as `[time][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scalogram {
    pub time: usize,
    pub bins: usize,
    pub values: Vec<f64>,
    /// Center frequency of each bin, ascending.
    pub freqs: Vec<f64>,
    /// Cone-of-influence half-width in samples for each bin.
    pub coi: Vec<usize>,
}

impl Scalogram {
    pub fn shape(&self) -> (usize, usize) {
        (self.time, self.bins)
    }

    pub fn at(&self, t: usize, bin: usize) -> f64 {
        self.values[t * self.bins + bin]
    }

    /// True where the wavelet at `bin` centered on `t` reaches past either
    /// end of the segment by more than its e-folding time.
    pub fn is_edge(&self, t: usize, bin: usize) -> bool {
        let c = self.coi[bin];
        t < c || t + c >= self.time
    }

    /// Bin of maximum magnitude at time `t`.
    pub fn ridge(&self, t: usize) -> usize {
        let row = &self.values[t * self.bins..(t + 1) * self.bins];
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if *v > bv { (i, *v) } else { (bi, bv) })
            .0
    }
}

/// Log-spaced center frequencies from `lo` to `hi` inclusive.
pub fn cwt_frequencies(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let step = (hi / lo).ln() / (n - 1) as f64;
    (0..n).map(|i| lo * (step * i as f64).exp()).collect()
}

/// Wavelet scale (seconds) whose spectral peak sits at `hz`.
pub fn scale_for(hz: f64) -> f64 {
    MORLET_W0 / (2.0 * PI * hz)
}

/// Plans and buffers reused across many segments of one length.
pub struct CwtPlan {
    n: usize,
    nfft: usize,
    freqs: Vec<f64>,
    coi: Vec<usize>,
    /// Per-bin wavelet spectrum over the positive FFT bins.
    kernels: Vec<Vec<f64>>,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl CwtPlan {
    pub fn new(n: usize, n_scales: usize) -> Result<Self> {
        if n < 2 || n_scales == 0 {
            return invalid(format!("cwt needs n >= 2 and at least one scale, got {n} / {n_scales}"));
        }
        let fs = SAMPLE_RATE as f64;
        let freqs = cwt_frequencies(n_scales, LOW_HZ, HIGH_HZ);
        let longest = scale_for(freqs[0]) * fs;
        // Room for the slowest wavelet's tails on both sides before they wrap.
        let nfft = (n + (6.0 * longest).ceil() as usize).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(nfft);
        let inv = planner.plan_fft_inverse(nfft);
        let kernels = freqs
            .iter()
            .map(|f| {
                let s = scale_for(*f);
                (0..=nfft / 2)
                    .map(|k| {
                        let w = 2.0 * PI * k as f64 * fs / nfft as f64;
                        if k == 0 {
                            0.0
                        } else {
                            let d = s * w - MORLET_W0;
                            2.0 * (-0.5 * d * d).exp()
                        }
                    })
                    .collect()
            })
            .collect();
        let coi = freqs
            .iter()
            .map(|f| (std::f64::consts::SQRT_2 * scale_for(*f) * fs).ceil() as usize)
            .collect();
        Ok(Self {
            n,
            nfft,
            freqs,
            coi,
            kernels,
            fwd,
            inv,
        })
    }

    pub fn fft_len(&self) -> usize {
        self.nfft
    }

    /// Magnitude of the analytic Morlet transform.
    pub fn transform(&self, x: &[f64]) -> Result<Scalogram> {
        check_finite(x, "cwt input")?;
        if x.len() != self.n {
            return invalid(format!("cwt plan is for {} samples, got {}", self.n, x.len()));
        }
        let bins = self.freqs.len();
        let mut spec: Vec<Complex64> = x.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        spec.resize(self.nfft, Complex64::new(0.0, 0.0));
        self.fwd.process(&mut spec);

        let mut values = vec![0.0; self.n * bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.nfft];
        let norm = 1.0 / self.nfft as f64;
        for (b, kernel) in self.kernels.iter().enumerate() {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (k, w) in kernel.iter().enumerate() {
                buf[k] = spec[k] * *w;
            }
            self.inv.process(&mut buf);
            for t in 0..self.n {
                values[t * bins + b] = buf[t].norm() * norm;
            }
        }
        Ok(Scalogram {
            time: self.n,
            bins,
            values,
            freqs: self.freqs.clone(),
            coi: self.coi.clone(),
        })
    }
}

pub fn cwt(x: &[f64], n_scales: usize) -> Result<Scalogram> {
    CwtPlan::new(x.len(), n_scales)?.transform(x)
}

/// Block-averages a row-major `[rows][cols]` matrix down to
/// `[new_rows][new_cols]`. Each output cell averages the input cells whose
/// index range `[i*rows/new_rows, (i+1)*rows/new_rows)` it covers.
pub fn box_resample(values: &[f64], rows: usize, cols: usize, new_rows: usize, new_cols: usize) -> Result<Vec<f64>> {
    if values.len() != rows * cols || new_rows == 0 || new_cols == 0 || new_rows > rows || new_cols > cols {
        return invalid(format!("cannot resample {rows}x{cols} to {new_rows}x{new_cols}"));
    }
    if new_rows == rows && new_cols == cols {
        return Ok(values.to_vec());
    }
    let edges = |n: usize, m: usize| -> Vec<usize> { (0..=m).map(|i| i * n / m).collect() };
    let re = edges(rows, new_rows);
    let ce = edges(cols, new_cols);
    let mut out = Vec::with_capacity(new_rows * new_cols);
    for i in 0..new_rows {
        for j in 0..new_cols {
            let mut acc = 0.0;
            for r in re[i]..re[i + 1] {
                for c in ce[j]..ce[j + 1] {
                    acc += values[r * cols + c];
                }
            }
            out.push(acc / ((re[i + 1] - re[i]) * (ce[j + 1] - ce[j])) as f64);
        }
    }
    Ok(out)
}

const SCALOGRAM_MAGIC: &[u8; 4] = b"TLSG";

/// Layout: magic, u32 version, u32 time, u32 bins, `bins` f64 Hz values,
/// then `time*bins` f32 magnitudes row-major. All little-endian.
pub fn save_scalogram(path: &Path, s: &Scalogram) -> Result<()> {
    let mut out = Vec::with_capacity(16 + 8 * s.bins + 4 * s.values.len());
    out.extend_from_slice(SCALOGRAM_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(s.time as u32).to_le_bytes());
    out.extend_from_slice(&(s.bins as u32).to_le_bytes());
    for f in &s.freqs {
        out.extend_from_slice(&f.to_le_bytes());
    }
    for v in &s.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    crate::write_atomic(path, &out)
}

pub fn load_scalogram(path: &Path) -> Result<Scalogram> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| CoreError::Parse {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    if bytes.len() < 16 || &bytes[..4] != SCALOGRAM_MAGIC {
        return Err(bad("not a scalogram file"));
    }
    let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    if u(4) != 1 {
        return Err(bad("unsupported scalogram version"));
    }
    let (time, bins) = (u(8), u(12));
    let expect = 16 + 8 * bins + 4 * time * bins;
    if bytes.len() != expect {
        return Err(bad("truncated scalogram"));
    }
    let freqs: Vec<f64> = bytes[16..16 + 8 * bins]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = bytes[16 + 8 * bins..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let fs = SAMPLE_RATE as f64;
    let coi = freqs
        .iter()
        .map(|f| (std::f64::consts::SQRT_2 * scale_for(*f) * fs).ceil() as usize)
        .collect();
    Ok(Scalogram {
        time,
        bins,
        values,
        freqs,
        coi,
    })
}
