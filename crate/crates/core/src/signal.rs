//! Radar front end: range FFT, clutter removal, CA-CFAR chest-bin
//! selection, phase extraction, unwrapping, segmentation and min-max
//! normalization.
//!
//! The chain turns a [`RadarCube`] of dechirped I/Q samples into normalized
//! observation segments `y` of length `l`:
//!
//! ```text
//! frames -> range_fft -> mti_filter -> cfar_detect -> select_chest_bin
//!        -> extract_phase -> segment -> unwrap_phase -> minmax_normalize
//! ```

use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::{Complex32, Complex64};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("empty input")]
    EmptyInput,
    #[error("insufficient frames: need at least 2, got {0}")]
    InsufficientFrames(usize),
    #[error("window exceeds profile: guard {guard} + train {train} on each side of {len} bins")]
    WindowExceedsProfile { guard: usize, train: usize, len: usize },
    #[error("invalid CFAR scale {0}")]
    InvalidScale(f64),
    #[error("no target detected")]
    NoTargetDetected,
    #[error("sequence too short: {len} samples for a {window}-sample window")]
    SequenceTooShort { len: usize, window: usize },
    #[error("invalid segmentation: {0}")]
    InvalidSegmentation(String),
    #[error("invalid radar cube: {0}")]
    InvalidCube(String),
}

pub type Result<T> = std::result::Result<T, SignalError>;

/// Acquisition metadata. Serialized as the JSON sidecar of a cube file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadarMeta {
    pub frames: usize,
    pub adc_samples: usize,
    pub sample_rate_hz: f64,
    pub frame_period_s: f64,
    pub bandwidth_hz: f64,
    pub carrier_hz: f64,
}

impl RadarMeta {
    pub fn slow_time_rate_hz(&self) -> f64 {
        1.0 / self.frame_period_s
    }

    pub fn bin_resolution_m(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.bandwidth_hz)
    }

    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// Largest range covered by the one-sided profile.
    pub fn max_range_m(&self) -> f64 {
        (self.adc_samples / 2) as f64 * self.bin_resolution_m()
    }
}

/// Complex fast-time samples, frame-major, one chirp per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarCube {
    pub meta: RadarMeta,
    pub samples: Vec<Complex32>,
}

impl RadarCube {
    pub fn new(meta: RadarMeta, samples: Vec<Complex32>) -> Result<Self> {
        if meta.adc_samples == 0 {
            return Err(SignalError::InvalidCube("adc_samples must be positive".into()));
        }
        if !(meta.frame_period_s > 0.0) {
            return Err(SignalError::InvalidCube("frame_period_s must be positive".into()));
        }
        if samples.len() != meta.frames * meta.adc_samples {
            return Err(SignalError::InvalidCube(format!(
                "expected {} samples ({} frames x {}), got {}",
                meta.frames * meta.adc_samples,
                meta.frames,
                meta.adc_samples,
                samples.len()
            )));
        }
        Ok(Self { meta, samples })
    }

    pub fn frame(&self, k: usize) -> &[Complex32] {
        let n = self.meta.adc_samples;
        &self.samples[k * n..(k + 1) * n]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[Complex32]> {
        self.samples.chunks_exact(self.meta.adc_samples)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeProfile {
    pub bins: Vec<Complex64>,
    pub bin_resolution_m: f64,
}

impl RangeProfile {
    pub fn power(&self) -> Vec<f64> {
        self.bins.iter().map(|b| b.norm_sqr()).collect()
    }
}

/// Reusable forward FFT plan for frames of one length.
pub struct RangeFft {
    fft: Arc<dyn Fft<f64>>,
    len: usize,
}

impl RangeFft {
    pub fn new(len: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(len);
        Self { fft, len }
    }

    /// Unnormalized two-sided DFT.
    pub fn full(&self, frame: &[Complex64]) -> Result<Vec<Complex64>> {
        if frame.is_empty() {
            return Err(SignalError::EmptyInput);
        }
        assert_eq!(frame.len(), self.len, "frame length does not match plan");
        let mut buf = frame.to_vec();
        self.fft.process(&mut buf);
        Ok(buf)
    }

    /// One-sided range profile: the first `len / 2` bins of the DFT.
    pub fn profile(&self, frame: &[Complex64], bandwidth_hz: f64) -> Result<RangeProfile> {
        let mut bins = self.full(frame)?;
        bins.truncate((self.len / 2).max(1));
        Ok(RangeProfile {
            bins,
            bin_resolution_m: SPEED_OF_LIGHT / (2.0 * bandwidth_hz),
        })
    }
}

/// Range FFT of a single frame, truncated to the first `adc_samples / 2`
/// bins.
pub fn range_fft(frame: &[Complex64], bandwidth_hz: f64) -> Result<RangeProfile> {
    if frame.is_empty() {
        return Err(SignalError::EmptyInput);
    }
    RangeFft::new(frame.len()).profile(frame, bandwidth_hz)
}

/// Static clutter removal: subtracts the slow-time mean of every range bin.
pub fn mti_filter(profiles: &[RangeProfile]) -> Result<Vec<RangeProfile>> {
    if profiles.len() < 2 {
        return Err(SignalError::InsufficientFrames(profiles.len()));
    }
    let nbins = profiles[0].bins.len();
    let mut mean = vec![Complex64::new(0.0, 0.0); nbins];
    for p in profiles {
        for (m, b) in mean.iter_mut().zip(&p.bins) {
            *m += b;
        }
    }
    let inv = 1.0 / profiles.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(profiles
        .iter()
        .map(|p| RangeProfile {
            bins: p.bins.iter().zip(&mean).map(|(b, m)| b - m).collect(),
            bin_resolution_m: p.bin_resolution_m,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfarParams {
    pub guard: usize,
    pub train: usize,
    pub scale: f64,
}

impl Default for CfarParams {
    fn default() -> Self {
        Self { guard: 2, train: 8, scale: 5.0 }
    }
}

/// Cell-averaging CFAR over a 1-D power profile.
///
/// Bin `i` is detected when `power[i] > scale * mean(training cells)`. The
/// training cells are the `train` cells beyond the `guard` cells on each
/// side; near the edges only the cells inside the profile are averaged.
pub fn cfar_detect(power: &[f64], guard: usize, train: usize, scale: f64) -> Result<Vec<usize>> {
    let n = power.len();
    if train == 0 || 2 * (guard + train) >= n {
        return Err(SignalError::WindowExceedsProfile { guard, train, len: n });
    }
    if !(scale > 0.0) {
        return Err(SignalError::InvalidScale(scale));
    }
    // prefix[i] = sum of power[..i]
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for &p in power {
        acc += p;
        prefix.push(acc);
    }
    let sum = |lo: usize, hi: usize| prefix[hi] - prefix[lo];

    let mut hits = Vec::new();
    for i in 0..n {
        let mut total = 0.0;
        let mut count = 0usize;
        if i > guard {
            let hi = i - guard;
            let lo = hi.saturating_sub(train);
            total += sum(lo, hi);
            count += hi - lo;
        }
        let lo = i + guard + 1;
        if lo < n {
            let hi = (lo + train).min(n);
            total += sum(lo, hi);
            count += hi - lo;
        }
        if count > 0 && power[i] > scale * total / count as f64 {
            hits.push(i);
        }
    }
    Ok(hits)
}

/// Picks the range bin detected in the most frames; ties go to the higher
/// mean power, then to the lower index.
pub fn select_chest_bin(detections: &[Vec<usize>], powers: &[Vec<f64>]) -> Result<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for set in detections {
        for &bin in set {
            *counts.entry(bin).or_default() += 1;
        }
    }
    let mean_power = |bin: usize| -> f64 {
        let vals: Vec<f64> = powers.iter().filter_map(|p| p.get(bin).copied()).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    counts
        .into_iter()
        .map(|(bin, count)| (bin, count, mean_power(bin)))
        .max_by(|a, b| {
            a.1.cmp(&b.1)
                .then(a.2.total_cmp(&b.2))
                .then(b.0.cmp(&a.0))
        })
        .map(|(bin, _, _)| bin)
        .ok_or(SignalError::NoTargetDetected)
}

/// Wrapped phase of a slow-time series, plus the number of zero-magnitude
/// samples that were assigned phase 0.
#[derive(Debug, Clone, PartialEq)]
pub struct WrappedPhase {
    pub values: Vec<f64>,
    pub zero_magnitude: usize,
}

/// Four-quadrant arctangent per sample, in `(-pi, pi]`.
pub fn extract_phase(slow_time: &[Complex64]) -> Result<WrappedPhase> {
    if slow_time.is_empty() {
        return Err(SignalError::EmptyInput);
    }
    let mut zero_magnitude = 0;
    let values = slow_time
        .iter()
        .map(|s| {
            if s.re == 0.0 && s.im == 0.0 {
                zero_magnitude += 1;
                0.0
            } else {
                let a = s.im.atan2(s.re);
                // atan2(-0.0, -1.0) = -pi; the range is half-open at -pi.
                if a <= -std::f64::consts::PI {
                    std::f64::consts::PI
                } else {
                    a
                }
            }
        })
        .collect();
    Ok(WrappedPhase { values, zero_magnitude })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSequence {
    pub samples: Vec<f64>,
    pub fs_hz: f64,
}

/// 1-D phase unwrapping. The first sample is kept; every successive jump
/// larger than `pi` is folded back by the multiple of `2 pi` that brings it
/// into `[-pi, pi]`, and the correction carries to all later samples.
pub fn unwrap_phase(wrapped: &[f64], fs_hz: f64) -> PhaseSequence {
    use std::f64::consts::{PI, TAU};

    let mut samples = Vec::with_capacity(wrapped.len());
    let mut offset = 0.0;
    for (k, &w) in wrapped.iter().enumerate() {
        if k > 0 {
            let d = w - wrapped[k - 1];
            if d.abs() > PI {
                let mut folded = (d + PI).rem_euclid(TAU) - PI;
                if folded == -PI && d > 0.0 {
                    folded = PI;
                }
                offset += folded - d;
            }
        }
        samples.push(w + offset);
    }
    PhaseSequence { samples, fs_hz }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationConfig {
    pub window_s: f64,
    pub hop_s: f64,
    pub segment_len: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self { window_s: 20.0, hop_s: 1.0, segment_len: 400 }
    }
}

impl SegmentationConfig {
    /// Checks the window/length/hop relations at sampling rate `fs_hz` and
    /// returns the hop in samples.
    pub fn hop_samples(&self, fs_hz: f64) -> Result<usize> {
        let expected = (self.window_s * fs_hz).round() as usize;
        if self.segment_len == 0 || expected != self.segment_len {
            return Err(SignalError::InvalidSegmentation(format!(
                "segment_len {} != round(window_s * fs) = {}",
                self.segment_len, expected
            )));
        }
        if !(self.hop_s > 0.0) || self.hop_s > self.window_s {
            return Err(SignalError::InvalidSegmentation(format!(
                "hop_s {} must be in (0, window_s]",
                self.hop_s
            )));
        }
        let hop = (self.hop_s * fs_hz).round() as usize;
        if hop == 0 {
            return Err(SignalError::InvalidSegmentation("hop rounds to zero samples".into()));
        }
        Ok(hop)
    }

    pub fn segment_count(&self, len: usize, fs_hz: f64) -> Result<usize> {
        let hop = self.hop_samples(fs_hz)?;
        if len < self.segment_len {
            return Err(SignalError::SequenceTooShort { len, window: self.segment_len });
        }
        Ok((len - self.segment_len) / hop + 1)
    }
}

/// Sliding-window segmentation; a trailing partial window is dropped.
pub fn segment(seq: &[f64], cfg: &SegmentationConfig, fs_hz: f64) -> Result<Vec<Vec<f64>>> {
    let count = cfg.segment_count(seq.len(), fs_hz)?;
    let hop = cfg.hop_samples(fs_hz)?;
    Ok((0..count)
        .map(|i| seq[i * hop..i * hop + cfg.segment_len].to_vec())
        .collect())
}

/// Maps a segment onto `[0, 1]`. Constant segments map to 0.5.
pub fn minmax_normalize(segment: &[f64]) -> Vec<f64> {
    let (lo, hi) = segment
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.5; segment.len()];
    }
    segment
        .iter()
        .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect()
}

/// Index-aligned observation `y`, ground truth `x` and residual
/// `z = y - x`, all of length `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSegment {
    pub y: Vec<f64>,
    pub x: Option<Vec<f64>>,
    pub z: Option<Vec<f64>>,
    /// Scene the segment was cut from.
    pub scene: usize,
    /// Start offset within the scene, in samples.
    pub offset: usize,
}

impl PairedSegment {
    /// # Panics
    /// If `x` is present and its length differs from `y`.
    pub fn new(y: Vec<f64>, x: Option<Vec<f64>>) -> Self {
        let z = x.as_ref().map(|x| {
            assert_eq!(x.len(), y.len(), "observation and truth lengths differ");
            y.iter().zip(x).map(|(a, b)| a - b).collect()
        });
        Self { y, x, z, scene: 0, offset: 0 }
    }

    pub fn with_origin(mut self, scene: usize, offset: usize) -> Self {
        self.scene = scene;
        self.offset = offset;
        self
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtiMode {
    #[default]
    MeanSubtract,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub cfar: CfarParams,
    pub mti: MtiMode,
}

/// Result of running the front end on a whole cube.
#[derive(Debug, Clone)]
pub struct ChestPhase {
    pub chest_bin: usize,
    /// CFAR detections per frame, on the clutter-filtered profiles.
    pub detections: Vec<Vec<usize>>,
    /// Strongest detection per frame, if any.
    pub per_frame_peak: Vec<Option<usize>>,
    pub wrapped: WrappedPhase,
    pub fs_hz: f64,
    pub bin_resolution_m: f64,
}

/// Range FFT, MTI and CFAR on every frame, chest-bin selection, and
/// wrapped-phase extraction at the chest bin.
///
/// The phase is read from the range profiles before clutter removal; the
/// clutter-filtered profiles drive detection only.
pub fn chest_phase(cube: &RadarCube, cfg: &PipelineConfig) -> Result<ChestPhase> {
    let meta = &cube.meta;
    if meta.frames < 2 {
        return Err(SignalError::InsufficientFrames(meta.frames));
    }
    let fft = RangeFft::new(meta.adc_samples);
    let mut buf = vec![Complex64::new(0.0, 0.0); meta.adc_samples];
    let profiles = cube
        .frames()
        .map(|frame| {
            for (b, s) in buf.iter_mut().zip(frame) {
                *b = Complex64::new(f64::from(s.re), f64::from(s.im));
            }
            fft.profile(&buf, meta.bandwidth_hz)
        })
        .collect::<Result<Vec<_>>>()?;
    let filtered = match cfg.mti {
        MtiMode::MeanSubtract => mti_filter(&profiles)?,
    };
    let powers: Vec<Vec<f64>> = filtered.iter().map(RangeProfile::power).collect();
    let detections = powers
        .iter()
        .map(|p| cfar_detect(p, cfg.cfar.guard, cfg.cfar.train, cfg.cfar.scale))
        .collect::<Result<Vec<_>>>()?;
    let per_frame_peak = detections
        .iter()
        .zip(&powers)
        .map(|(d, p)| d.iter().copied().max_by(|&a, &b| p[a].total_cmp(&p[b])))
        .collect();
    let chest_bin = select_chest_bin(&detections, &powers)?;
    let slow_time: Vec<Complex64> = profiles.iter().map(|p| p.bins[chest_bin]).collect();
    let wrapped = extract_phase(&slow_time)?;
    Ok(ChestPhase {
        chest_bin,
        detections,
        per_frame_peak,
        wrapped,
        fs_hz: meta.slow_time_rate_hz(),
        bin_resolution_m: meta.bin_resolution_m(),
    })
}

/// Segments a wrapped phase series, then unwraps and normalizes each
/// segment independently.
pub fn observation_segments(
    wrapped: &[f64],
    fs_hz: f64,
    seg: &SegmentationConfig,
) -> Result<Vec<Vec<f64>>> {
    Ok(segment(wrapped, seg, fs_hz)?
        .into_iter()
        .map(|s| minmax_normalize(&unwrap_phase(&s, fs_hz).samples))
        .collect())
}

/// Segments and normalizes a ground-truth series.
pub fn reference_segments(
    truth: &[f64],
    fs_hz: f64,
    seg: &SegmentationConfig,
) -> Result<Vec<Vec<f64>>> {
    Ok(segment(truth, seg, fs_hz)?
        .iter()
        .map(|s| minmax_normalize(s))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn tone(n: usize, k0: f64) -> Vec<Complex64> {
        (0..n)
            .map(|i| Complex64::from_polar(1.0, 2.0 * PI * k0 * i as f64 / n as f64))
            .collect()
    }

    #[test]
    fn range_fft_tone_peaks_at_its_bin() {
        let p = range_fft(&tone(64, 5.0), 2e9).unwrap();
        assert_eq!(p.bins.len(), 32);
        let pw = p.power();
        let best = (0..pw.len()).max_by(|&a, &b| pw[a].total_cmp(&pw[b])).unwrap();
        assert_eq!(best, 5);
        assert!(pw.iter().enumerate().all(|(i, &v)| i == 5 || v < pw[5]));
        assert_abs_diff_eq!(p.bin_resolution_m, SPEED_OF_LIGHT / 4e9, epsilon = 1e-15);
    }

    #[test]
    fn range_fft_zero_and_impulse() {
        let zeros = vec![Complex64::new(0.0, 0.0); 16];
        assert!(range_fft(&zeros, 1e9).unwrap().bins.iter().all(|b| b.norm() == 0.0));
        let mut imp = zeros.clone();
        imp[0] = Complex64::new(1.0, 0.0);
        for b in range_fft(&imp, 1e9).unwrap().bins {
            assert_abs_diff_eq!(b.norm(), 1.0, epsilon = 1e-12);
        }
        assert_eq!(range_fft(&[], 1e9), Err(SignalError::EmptyInput));
    }

    #[test]
    fn range_fft_linear_and_parseval() {
        let f = tone(32, 3.0);
        let g: Vec<Complex64> = (0..32).map(|i| Complex64::new((i as f64).sin(), 0.3 * i as f64)).collect();
        let (a, b) = (Complex64::new(0.7, -1.2), Complex64::new(2.5, 0.1));
        let mix: Vec<Complex64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        let fft = RangeFft::new(32);
        let (ff, fg, fm) = (fft.full(&f).unwrap(), fft.full(&g).unwrap(), fft.full(&mix).unwrap());
        let scale = fm.iter().map(|c| c.norm()).fold(0.0, f64::max);
        for i in 0..32 {
            assert!((fm[i] - (a * ff[i] + b * fg[i])).norm() <= 1e-9 * scale);
        }
        let time: f64 = g.iter().map(|c| c.norm_sqr()).sum();
        let freq: f64 = fg.iter().map(|c| c.norm_sqr()).sum::<f64>() / 32.0;
        assert!((time - freq).abs() <= 1e-6 * time);
    }

    fn profiles(values: &[Vec<Complex64>]) -> Vec<RangeProfile> {
        values
            .iter()
            .map(|b| RangeProfile { bins: b.clone(), bin_resolution_m: 0.1 })
            .collect()
    }

    #[test]
    fn mti_removes_static_clutter() {
        let c = Complex64::new(3.0, -2.0);
        let out = mti_filter(&profiles(&vec![vec![c; 4]; 10])).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().flat_map(|p| &p.bins).all(|b| b.norm() < 1e-12));

        let p = vec![Complex64::new(1.0, 1.0), Complex64::new(-4.0, 0.5)];
        let out = mti_filter(&profiles(&[p.clone(), p])).unwrap();
        assert!(out.iter().flat_map(|p| &p.bins).all(|b| b.norm() == 0.0));

        assert_eq!(
            mti_filter(&profiles(&[vec![c]])),
            Err(SignalError::InsufficientFrames(1))
        );
    }

    #[test]
    fn mti_keeps_sinusoid_minus_its_record_mean() {
        let (fs, f, amp, n) = (20.0, 0.3, 0.8, 77);
        let s: Vec<f64> = (0..n).map(|k| amp * (2.0 * PI * f * k as f64 / fs).sin()).collect();
        let mean = s.iter().sum::<f64>() / n as f64;
        let c = Complex64::new(5.0, 1.0);
        let input: Vec<Vec<Complex64>> = s.iter().map(|&v| vec![c + v]).collect();
        let out = mti_filter(&profiles(&input)).unwrap();
        for (o, &v) in out.iter().zip(&s) {
            assert_abs_diff_eq!(o.bins[0].re, v - mean, epsilon = 1e-12);
            assert_abs_diff_eq!(o.bins[0].im, 0.0, epsilon = 1e-12);
        }
    }

    /// Direct evaluation of the CA-CFAR rule, cell by cell.
    fn cfar_brute(power: &[f64], guard: usize, train: usize, scale: f64) -> Vec<usize> {
        let n = power.len() as isize;
        (0..power.len())
            .filter(|&i| {
                let i = i as isize;
                let cells: Vec<f64> = (-(guard as isize + train as isize)..=(guard + train) as isize)
                    .filter(|o| o.unsigned_abs() > guard)
                    .map(|o| i + o)
                    .filter(|&j| j >= 0 && j < n)
                    .map(|j| power[j as usize])
                    .collect();
                power[i as usize] > scale * cells.iter().sum::<f64>() / cells.len() as f64
            })
            .collect()
    }

    #[test]
    fn cfar_examples() {
        assert!(cfar_detect(&[1.0; 32], 2, 8, 2.0).unwrap().is_empty());
        let mut p = vec![1.0; 20];
        p[7] = 100.0;
        assert_eq!(cfar_brute(&p, 1, 4, 3.0), vec![7]);
        assert_eq!(cfar_detect(&p, 1, 4, 3.0).unwrap(), vec![7]);
        assert!(cfar_detect(&[0.0; 32], 2, 8, 5.0).unwrap().is_empty());
        assert!(matches!(
            cfar_detect(&[1.0; 20], 2, 8, 5.0),
            Err(SignalError::WindowExceedsProfile { .. })
        ));
        assert!(matches!(cfar_detect(&[1.0; 40], 2, 8, 0.0), Err(SignalError::InvalidScale(_))));
    }

    proptest! {
        #[test]
        fn cfar_matches_brute_force(
            power in prop::collection::vec(0.0f64..10.0, 25..60),
            guard in 0usize..3,
            train in 1usize..6,
            scale in 0.5f64..4.0,
        ) {
            prop_assert_eq!(cfar_detect(&power, guard, train, scale).unwrap(), cfar_brute(&power, guard, train, scale));
        }
    }

    #[test]
    fn chest_bin_selection() {
        let flat = vec![vec![1.0; 8]; 3];
        assert_eq!(select_chest_bin(&[vec![3], vec![3], vec![5]], &flat).unwrap(), 3);
        let mut pw = vec![vec![1.0; 8]; 2];
        pw[0][5] = 9.0;
        pw[1][5] = 9.0;
        assert_eq!(select_chest_bin(&[vec![3], vec![5]], &pw).unwrap(), 5);
        assert_eq!(select_chest_bin(&[vec![3], vec![5]], &flat).unwrap(), 3);
        assert_eq!(select_chest_bin(&[vec![]], &flat), Err(SignalError::NoTargetDetected));
    }

    #[test]
    fn phase_extraction() {
        let w = extract_phase(&[
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 1.0),
            Complex64::new(-1.0, 0.0),
            Complex64::new(-1.0, -0.0),
            Complex64::new(0.0, 0.0),
        ])
        .unwrap();
        assert_eq!(w.values, vec![0.0, PI / 2.0, PI, PI, 0.0]);
        assert_eq!(w.zero_magnitude, 1);
        assert_eq!(extract_phase(&[]), Err(SignalError::EmptyInput));
    }

    #[test]
    fn unwrap_examples() {
        let u = unwrap_phase(&[3.0, -3.0], 20.0).samples;
        assert_abs_diff_eq!(u[1], -3.0 + 2.0 * PI, epsilon = 1e-12);
        assert_abs_diff_eq!(u[1], 3.2832, epsilon = 1e-4);
        let ramp: Vec<f64> = (0..30).map(|k| -1.5 + 0.1 * k as f64).collect();
        assert_eq!(unwrap_phase(&ramp, 1.0).samples, ramp);
        let u = unwrap_phase(&[0.0, PI, -PI + 0.1], 1.0).samples;
        assert_eq!(u[..2], [0.0, PI]);
        assert_abs_diff_eq!(u[2], PI + 0.1, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn unwrap_bounds_successive_differences(
            wrapped in prop::collection::vec(-PI..=PI, 2..200)
        ) {
            let u = unwrap_phase(&wrapped, 1.0).samples;
            prop_assert_eq!(u[0], wrapped[0]);
            for w in u.windows(2) {
                prop_assert!((w[1] - w[0]).abs() <= PI + 1e-12);
            }
            for (a, b) in u.iter().zip(&wrapped) {
                let k = (a - b) / (2.0 * PI);
                prop_assert!((k - k.round()).abs() < 1e-9);
            }
        }

        #[test]
        fn unwrap_recovers_smooth_phase(
            start in -3.0f64..3.0,
            steps in prop::collection::vec(-3.0f64..3.0, 1..200),
        ) {
            let mut truth = vec![start];
            for s in &steps {
                truth.push(truth.last().unwrap() + s);
            }
            let wrapped: Vec<f64> = truth
                .iter()
                .map(|t| { let w = (t + PI).rem_euclid(2.0 * PI) - PI; if w <= -PI { PI } else { w } })
                .collect();
            let u = unwrap_phase(&wrapped, 1.0).samples;
            let offset = truth[0] - u[0];
            for (a, b) in u.iter().zip(&truth) {
                prop_assert!((a + offset - b).abs() < 1e-9);
            }
        }
    }

    fn seg_cfg(window: usize, hop: usize) -> SegmentationConfig {
        SegmentationConfig { window_s: window as f64, hop_s: hop as f64, segment_len: window }
    }

    #[test]
    fn segmentation_examples() {
        let v: Vec<f64> = (0..8).map(f64::from).collect();
        let s = segment(&v, &seg_cfg(4, 2), 1.0).unwrap();
        assert_eq!(s, vec![vec![0.0, 1.0, 2.0, 3.0], vec![2.0, 3.0, 4.0, 5.0], vec![4.0, 5.0, 6.0, 7.0]]);
        assert_eq!(segment(&v[..4], &seg_cfg(4, 1), 1.0).unwrap().len(), 1);
        assert!(matches!(
            segment(&v[..3], &seg_cfg(4, 1), 1.0),
            Err(SignalError::SequenceTooShort { len: 3, window: 4 })
        ));
        let bad = SegmentationConfig { window_s: 20.0, hop_s: 1.0, segment_len: 399 };
        assert!(matches!(bad.hop_samples(20.0), Err(SignalError::InvalidSegmentation(_))));
        let defaults = SegmentationConfig::default();
        assert_eq!(defaults.segment_count(1200, 20.0).unwrap(), 41);
    }

    proptest! {
        #[test]
        fn segment_count_formula(len in 4usize..300, window in 1usize..40, hop in 1usize..40) {
            prop_assume!(hop <= window && len >= window);
            let v = vec![0.0; len];
            let s = segment(&v, &seg_cfg(window, hop), 1.0).unwrap();
            prop_assert_eq!(s.len(), (len - window) / hop + 1);
            prop_assert!(s.iter().all(|x| x.len() == window));
        }

        #[test]
        fn normalize_range_and_idempotence(v in prop::collection::vec(-1e3f64..1e3, 1..100)) {
            let n = minmax_normalize(&v);
            prop_assert!(n.iter().all(|x| (0.0..=1.0).contains(x)));
            let constant = v.iter().all(|x| *x == v[0]);
            if !constant {
                prop_assert!(n.iter().any(|&x| x == 0.0));
                prop_assert!(n.iter().any(|&x| x == 1.0));
            }
            let nn = minmax_normalize(&n);
            for (a, b) in n.iter().zip(&nn) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[5.0, 5.0, 5.0]), vec![0.5, 0.5, 0.5]);
    }
}
