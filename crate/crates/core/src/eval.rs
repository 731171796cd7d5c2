//! Waveform and respiratory-rate metrics, the band-pass baseline, and
//! test-set evaluation.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{self, DiffusionError, Denoiser, RespacedSchedule};
use crate::signal::{minmax_normalize, PairedSegment};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero-norm input")]
    ZeroNorm,
    #[error("empty input")]
    Empty,
    #[error("no respiratory component")]
    NoRespiratoryComponent,
    #[error("invalid band [{low_hz}, {high_hz}] Hz at fs {fs_hz} Hz")]
    InvalidBand { low_hz: f64, high_hz: f64, fs_hz: f64 },
    #[error("segment {0} has no ground truth")]
    MissingTruth(usize),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::ZeroNorm);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Respiratory band searched by [`estimate_rate`], in Hz.
pub const RATE_BAND_HZ: (f64, f64) = (0.1, 0.7);

/// Dominant respiratory rate in breaths per minute.
///
/// The zero-meaned waveform is Hann-tapered and zero-padded to at least
/// 8192 points; the periodogram peak inside [`RATE_BAND_HZ`] is refined by
/// fitting a parabola through it and its two neighbours.
pub fn estimate_rate(waveform: &[f64], fs_hz: f64) -> Result<f64> {
    if waveform.len() < 2 {
        return Err(EvalError::Empty);
    }
    let n = waveform.len();
    let nfft = (16 * n).next_power_of_two().max(8192);
    let mean = waveform.iter().sum::<f64>() / n as f64;
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    for (i, (b, &v)) in buf.iter_mut().zip(waveform).enumerate() {
        let hann = 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos();
        b.re = (v - mean) * hann;
    }
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    let power: Vec<f64> = buf[..nfft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
    let df = fs_hz / nfft as f64;
    let lo = (RATE_BAND_HZ.0 / df).ceil() as usize;
    let hi = ((RATE_BAND_HZ.1 / df).floor() as usize).min(power.len() - 2);
    if lo > hi {
        return Err(EvalError::NoRespiratoryComponent);
    }
    let k = (lo..=hi).max_by(|&a, &b| power[a].total_cmp(&power[b])).unwrap();
    let total: f64 = power.iter().sum();
    if !(power[k] > 0.0) || !(power[k] > 1e-12 * total) {
        return Err(EvalError::NoRespiratoryComponent);
    }
    let (a, b, c) = (power[k - 1], power[k], power[k + 1]);
    let denom = a - 2.0 * b + c;
    let delta = if denom < 0.0 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
    Ok((k as f64 + delta) * df * 60.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Population standard deviation of the signed errors.
    pub sd: f64,
}

pub fn rate_metrics(pred: &[f64], truth: &[f64]) -> Result<RateMetrics> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = pred.len() as f64;
    let e: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    let mean = e.iter().sum::<f64>() / n;
    Ok(RateMetrics {
        mae: e.iter().map(|v| v.abs()).sum::<f64>() / n,
        rmse: (e.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
        sd: (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt(),
    })
}

/// Normalized direct-form II transposed biquad.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    /// Second-order Butterworth section from the bilinear transform with
    /// frequency prewarping.
    fn butterworth(cutoff_hz: f64, fs_hz: f64, highpass: bool) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / fs_hz;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        let a0 = 1.0 + alpha;
        let b = if highpass {
            [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0]
        } else {
            [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0]
        };
        Self {
            b: b.map(|v| v / a0),
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / (1.0 + self.a[0] + self.a[1])
    }

    /// State that holds a unit step at its steady-state output.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z2 = self.b[2] - self.a[1] * g;
        [self.b[1] - self.a[0] * g + z2, z2]
    }

    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        for v in x.iter_mut() {
            let input = *v;
            let y = self.b[0] * input + z[0];
            z[0] = self.b[1] * input - self.a[0] * y + z[1];
            z[1] = self.b[2] * input - self.a[1] * y;
            *v = y;
        }
    }
}

fn sos_filter(sections: &[Biquad], x: &mut [f64]) {
    let x0 = x[0];
    let mut scale = 1.0;
    for s in sections {
        let zi = s.step_state().map(|z| z * scale * x0);
        s.run(x, zi);
        scale *= s.dc_gain();
    }
}

/// Zero-phase band-pass: a second-order Butterworth high-pass at `low_hz`
/// cascaded with a second-order Butterworth low-pass at `high_hz`, run
/// forward and backward over an odd extension of the input.
pub fn bandpass_filtfilt(y: &[f64], fs_hz: f64, low_hz: f64, high_hz: f64) -> Result<Vec<f64>> {
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < fs_hz / 2.0) {
        return Err(EvalError::InvalidBand { low_hz, high_hz, fs_hz });
    }
    if y.len() < 2 {
        return Err(EvalError::Empty);
    }
    let sections = [
        Biquad::butterworth(low_hz, fs_hz, true),
        Biquad::butterworth(high_hz, fs_hz, false),
    ];
    let n = y.len();
    // one period of the low cutoff, capped by the signal length
    let pad = ((fs_hz / low_hz).ceil() as usize).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * y[0] - y[i]));
    ext.extend_from_slice(y);
    ext.extend((1..=pad).map(|i| 2.0 * y[n - 1] - y[n - 1 - i]));
    sos_filter(&sections, &mut ext);
    ext.reverse();
    sos_filter(&sections, &mut ext);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

/// Band-pass baseline: [`bandpass_filtfilt`] followed by min-max
/// renormalization.
pub fn bpf_baseline(y: &[f64], fs_hz: f64, low_hz: f64, high_hz: f64) -> Result<Vec<f64>> {
    Ok(minmax_normalize(&bandpass_filtfilt(y, fs_hz, low_hz, high_hz)?))
}

/// Test-set metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cs: f64,
    pub mse: f64,
    pub mae_bpm: f64,
    pub rmse_bpm: f64,
    pub sd_bpm: f64,
    pub segments: usize,
    /// Segments whose reconstruction had no in-band spectral peak; they
    /// enter the rate statistics with a rate of 0 bpm.
    pub rate_failures: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "cs,mse,mae_bpm,rmse_bpm,sd_bpm,segments,rate_failures";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.cs, self.mse, self.mae_bpm, self.rmse_bpm, self.sd_bpm, self.segments, self.rate_failures
        )
    }
}

/// Scores reconstructions against the ground truth of `segments`.
pub fn score(reconstructions: &[Vec<f64>], segments: &[PairedSegment], fs_hz: f64) -> Result<MetricsReport> {
    if reconstructions.len() != segments.len() {
        return Err(EvalError::LengthMismatch(reconstructions.len(), segments.len()));
    }
    if segments.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = segments.len() as f64;
    let (mut cs, mut err) = (0.0, 0.0);
    let mut pred_rates = Vec::with_capacity(segments.len());
    let mut true_rates = Vec::with_capacity(segments.len());
    let mut rate_failures = 0;
    for (i, (xhat, seg)) in reconstructions.iter().zip(segments).enumerate() {
        let x = seg.x.as_ref().ok_or(EvalError::MissingTruth(i))?;
        cs += cosine_similarity(xhat, x)?;
        err += mse(xhat, x)?;
        true_rates.push(estimate_rate(x, fs_hz)?);
        pred_rates.push(match estimate_rate(xhat, fs_hz) {
            Ok(r) => r,
            Err(EvalError::NoRespiratoryComponent) => {
                rate_failures += 1;
                0.0
            }
            Err(e) => return Err(e),
        });
    }
    let rates = rate_metrics(&pred_rates, &true_rates)?;
    Ok(MetricsReport {
        cs: cs / n,
        mse: err / n,
        mae_bpm: rates.mae,
        rmse_bpm: rates.rmse,
        sd_bpm: rates.sd,
        segments: segments.len(),
        rate_failures,
    })
}

/// Reconstructs every test segment with 20-step (or `respaced`) sampling
/// and scores the result. Segment `i` draws its sampling noise from stream
/// `i` of `seed`, so results do not depend on batching.
pub fn evaluate<D: Denoiser + ?Sized>(
    denoiser: &D,
    segments: &[PairedSegment],
    respaced: &RespacedSchedule,
    fs_hz: f64,
    seed: u64,
    batch: usize,
) -> Result<(MetricsReport, Vec<Vec<f64>>)> {
    let recon = reconstruct(denoiser, segments, respaced, seed, batch)?;
    Ok((score(&recon, segments, fs_hz)?, recon))
}

pub fn reconstruct<D: Denoiser + ?Sized>(
    denoiser: &D,
    segments: &[PairedSegment],
    respaced: &RespacedSchedule,
    seed: u64,
    batch: usize,
) -> Result<Vec<Vec<f64>>> {
    let batch = batch.max(1);
    let parts = segments
        .par_chunks(batch)
        .enumerate()
        .map(|(c, chunk)| {
            let ys: Vec<&[f64]> = chunk.iter().map(|s| s.y.as_slice()).collect();
            diffusion::sample_batch(&ys, denoiser, respaced, seed, (c * batch) as u64)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Runs the band-pass baseline over the test segments and scores it with
/// the same metric code as the diffusion model.
pub fn evaluate_bpf(segments: &[PairedSegment], fs_hz: f64, band_hz: (f64, f64)) -> Result<(MetricsReport, Vec<Vec<f64>>)> {
    let recon = segments
        .iter()
        .map(|s| bpf_baseline(&s.y, fs_hz, band_hz.0, band_hz.1))
        .collect::<Result<Vec<_>>>()?;
    Ok((score(&recon, segments, fs_hz)?, recon))
}

/// Scores the observations themselves as reconstructions.
pub fn evaluate_passthrough(segments: &[PairedSegment], fs_hz: f64) -> Result<MetricsReport> {
    let recon: Vec<Vec<f64>> = segments.iter().map(|s| s.y.clone()).collect();
    score(&recon, segments, fs_hz)
}
