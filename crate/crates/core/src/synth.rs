//! Synthetic FMCW scenes: a breathing chest at a fixed range, optional body
//! micromotion added to the chest displacement, and thermal noise.
//!
//! Each scene owns its random streams (`params`, `breath`, `micromotion`,
//! `noise`) derived from the scene seed, so scenes can be rendered in any
//! order or in parallel with identical output.

use std::f64::consts::{PI, TAU};

use num_complex::{Complex32, Complex64};
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};
use crate::signal::{self, PairedSegment, PipelineConfig, RadarCube, RadarMeta, SegmentationConfig, SignalError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("target at {range_m:.3} m is outside the unambiguous range {max_m:.3} m")]
    RangeOutOfBounds { range_m: f64, max_m: f64 },
    #[error("scene {scene}: {source}")]
    Pipeline {
        scene: usize,
        #[source]
        source: SignalError,
    },
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BreathModel {
    pub rate_bpm: f64,
    /// Chest displacement amplitude in meters.
    pub amp_m: f64,
    /// Second-harmonic amplitude relative to the fundamental.
    pub harmonic2: f64,
    /// Random-walk step deviation of the rate, in bpm per sqrt(second).
    pub rate_drift: f64,
    pub phase0: f64,
}

impl BreathModel {
    pub fn validate(&self) -> Result<()> {
        if !(4.0..=40.0).contains(&self.rate_bpm) {
            return Err(SynthError::InvalidScene(format!("rate_bpm {} outside [4, 40]", self.rate_bpm)));
        }
        if !(self.amp_m > 0.0 && self.amp_m <= 0.01) {
            return Err(SynthError::InvalidScene(format!("amp_m {} outside (0, 0.01]", self.amp_m)));
        }
        if !(0.0..1.0).contains(&self.harmonic2) {
            return Err(SynthError::InvalidScene(format!("harmonic2 {} outside [0, 1)", self.harmonic2)));
        }
        if !(self.rate_drift >= 0.0) {
            return Err(SynthError::InvalidScene("rate_drift must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MicromotionKind {
    Burst,
    Drift,
    Tremor,
    Step,
}

impl MicromotionKind {
    pub const ALL: [MicromotionKind; 4] = [Self::Burst, Self::Drift, Self::Tremor, Self::Step];

    fn name(self) -> &'static str {
        match self {
            Self::Burst => "burst",
            Self::Drift => "drift",
            Self::Tremor => "tremor",
            Self::Step => "step",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicromotionEvent {
    pub kind: MicromotionKind,
    pub start_s: f64,
    pub duration_s: f64,
    pub amp_m: f64,
    /// Oscillation frequency; used by tremor events only.
    #[serde(default)]
    pub freq_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadarParams {
    pub adc_samples: usize,
    pub sample_rate_hz: f64,
    pub frame_period_s: f64,
    pub bandwidth_hz: f64,
    pub carrier_hz: f64,
}

impl Default for RadarParams {
    fn default() -> Self {
        Self {
            adc_samples: 512,
            sample_rate_hz: 10e6,
            frame_period_s: 0.05,
            bandwidth_hz: 2e9,
            carrier_hz: 60e9,
        }
    }
}

impl RadarParams {
    pub fn meta(&self, frames: usize) -> RadarMeta {
        RadarMeta {
            frames,
            adc_samples: self.adc_samples,
            sample_rate_hz: self.sample_rate_hz,
            frame_period_s: self.frame_period_s,
            bandwidth_hz: self.bandwidth_hz,
            carrier_hz: self.carrier_hz,
        }
    }

    pub fn frame_rate_hz(&self) -> f64 {
        1.0 / self.frame_period_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub breath: BreathModel,
    #[serde(default)]
    pub events: Vec<MicromotionEvent>,
    pub range_m: f64,
    pub snr_db: f64,
    pub duration_s: f64,
    #[serde(default)]
    pub radar: RadarParams,
    pub seed: u64,
}

impl SceneConfig {
    pub fn frames(&self) -> usize {
        (self.duration_s * self.radar.frame_rate_hz()).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.breath.validate()?;
        if !(self.duration_s > 0.0) {
            return Err(SynthError::InvalidScene("duration_s must be positive".into()));
        }
        let meta = self.radar.meta(self.frames());
        if !(self.range_m > 0.0 && self.range_m < meta.max_range_m()) {
            return Err(SynthError::RangeOutOfBounds { range_m: self.range_m, max_m: meta.max_range_m() });
        }
        for e in &self.events {
            if !(e.duration_s > 0.0) || e.start_s < 0.0 || e.start_s + e.duration_s > self.duration_s + 1e-9 {
                return Err(SynthError::InvalidScene(format!(
                    "event {:?} outside [0, {}] s",
                    e.kind, self.duration_s
                )));
            }
        }
        Ok(())
    }
}

/// Chest displacement of a breathing subject, in meters.
///
/// The instantaneous rate follows a bounded random walk around
/// `rate_bpm / 60`; the phase is its running integral.
pub fn gen_respiration(breath: &BreathModel, fs_hz: f64, duration_s: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let f0 = breath.rate_bpm / 60.0;
    if !(fs_hz > 2.0 * f0) {
        return Err(SynthError::InvalidScene(format!(
            "sampling rate {fs_hz} Hz does not resolve {} bpm",
            breath.rate_bpm
        )));
    }
    let n = (duration_s * fs_hz).round() as usize;
    let dt = 1.0 / fs_hz;
    let (f_lo, f_hi) = ((0.8 * f0).max(4.0 / 60.0), (1.2 * f0).min(40.0 / 60.0));
    let step_sd = breath.rate_drift / 60.0 * dt.sqrt();
    let mut f = f0;
    let mut theta = 0.0;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(breath.amp_m * ((theta + breath.phase0).sin() + breath.harmonic2 * (2.0 * theta).sin()));
        let w: f64 = StandardNormal.sample(rng);
        f = (f + step_sd * w).clamp(f_lo, f_hi);
        theta += TAU * f * dt;
    }
    Ok(out)
}

/// Raised-cosine edge taper over `ramp` seconds at both ends of a window of
/// length `dur`, evaluated at local time `tau`.
fn taper(tau: f64, dur: f64, ramp: f64) -> f64 {
    if tau < 0.0 || tau > dur {
        return 0.0;
    }
    let edge = tau.min(dur - tau);
    if ramp <= 0.0 || edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (PI * edge / ramp).cos()
    }
}

fn catmull_rom(p: &[f64], u: f64) -> f64 {
    let last = p.len() - 1;
    let i = (u.floor() as usize).min(last.saturating_sub(1));
    let s = u - i as f64;
    let get = |k: isize| p[k.clamp(0, last as isize) as usize];
    let i = i as isize;
    let (p0, p1, p2, p3) = (get(i - 1), get(i), get(i + 1), get(i + 2));
    0.5 * (2.0 * p1
        + (-p0 + p2) * s
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * s * s
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * s * s * s)
}

fn scale_to_peak(v: &mut [f64], amp: f64) {
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        let g = amp / peak;
        v.iter_mut().for_each(|x| *x *= g);
    }
}

fn event_seed(base: u64, e: &MicromotionEvent) -> u64 {
    let key = e.start_s.to_bits() ^ e.duration_s.to_bits().rotate_left(21) ^ e.amp_m.to_bits().rotate_left(42);
    rng::derive_indexed_seed(base, e.kind.name(), key)
}

/// Renders one event over `n` samples; zero outside the event window.
fn render_event(e: &MicromotionEvent, fs_hz: f64, n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let k0 = (e.start_s * fs_hz).ceil() as usize;
    let k1 = (((e.start_s + e.duration_s) * fs_hz).floor() as usize).min(n.saturating_sub(1));
    if k0 > k1 || k0 >= n {
        return out;
    }
    let local = |k: usize| k as f64 / fs_hz - e.start_s;
    match e.kind {
        MicromotionKind::Burst => {
            let spacing = 0.25;
            let knots: Vec<f64> = (0..=(e.duration_s / spacing).ceil() as usize + 1)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            let (mid, sigma) = (e.duration_s / 2.0, e.duration_s / 5.0);
            let floor = (-0.5 * (mid / sigma).powi(2)).exp();
            let mut v: Vec<f64> = (k0..=k1)
                .map(|k| {
                    let tau = local(k);
                    let w = ((-0.5 * ((tau - mid) / sigma).powi(2)).exp() - floor).max(0.0);
                    w * catmull_rom(&knots, tau / spacing)
                })
                .collect();
            scale_to_peak(&mut v, e.amp_m.abs());
            out[k0..=k1].copy_from_slice(&v);
        }
        MicromotionKind::Drift => {
            // one-pole low-pass at 0.3 Hz, then integrated
            let a = (-TAU * 0.3 / fs_hz).exp();
            let (mut lp, mut acc) = (0.0, 0.0);
            let mut v: Vec<f64> = (k0..=k1)
                .map(|_| {
                    let w: f64 = StandardNormal.sample(rng);
                    lp = a * lp + (1.0 - a) * w;
                    acc += lp;
                    acc
                })
                .collect();
            scale_to_peak(&mut v, e.amp_m.abs());
            let ramp = (0.2 * e.duration_s).min(0.5);
            for (i, x) in v.iter_mut().enumerate() {
                *x *= taper(local(k0 + i), e.duration_s, ramp);
            }
            out[k0..=k1].copy_from_slice(&v);
        }
        MicromotionKind::Tremor => {
            let ramp = (0.1f64).min(e.duration_s / 4.0);
            for k in k0..=k1 {
                let tau = local(k);
                out[k] = e.amp_m * (TAU * e.freq_hz * tau).sin() * taper(tau, e.duration_s, ramp);
            }
        }
        MicromotionKind::Step => {
            let ramp = (0.5f64).min(e.duration_s / 4.0);
            for k in k0..=k1 {
                out[k] = e.amp_m * taper(local(k), e.duration_s, ramp);
            }
        }
    }
    out
}

/// Sum of the event waveforms, in meters.
///
/// One base seed is drawn from `rng`; each event's randomness is keyed by
/// that seed and the event itself, so rendering a subset of the events
/// reproduces their contribution exactly.
pub fn gen_micromotion(events: &[MicromotionEvent], fs_hz: f64, duration_s: f64, rng: &mut Rng) -> Vec<f64> {
    let n = (duration_s * fs_hz).round() as usize;
    let base: u64 = rng.random();
    let mut total = vec![0.0; n];
    for e in events {
        let mut erng = Rng::seed_from_u64(event_seed(base, e));
        for (t, v) in total.iter_mut().zip(render_event(e, fs_hz, n, &mut erng)) {
            *t += v;
        }
    }
    total
}

/// Dechirped FMCW echo of a point target at `range_m + d[k]` for each frame
/// `k`, with complex white noise at `snr_db` per ADC sample.
pub fn synth_iq(displacement: &[f64], scene: &SceneConfig, rng: &mut Rng) -> Result<RadarCube> {
    let radar = &scene.radar;
    let meta = radar.meta(displacement.len());
    let max_d = displacement.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if !(scene.range_m - max_d > 0.0 && scene.range_m + max_d < meta.max_range_m()) {
        return Err(SynthError::RangeOutOfBounds { range_m: scene.range_m + max_d, max_m: meta.max_range_m() });
    }
    let n = radar.adc_samples;
    let res = meta.bin_resolution_m();
    let lambda = meta.wavelength_m();
    let noise_sd = (10f64.powf(-scene.snr_db / 10.0) / 2.0).sqrt();
    let mut samples = Vec::with_capacity(displacement.len() * n);
    for &d in displacement {
        let r = scene.range_m + d;
        let cycles = r / res;
        let phi = 2.0 * TAU * r / lambda;
        for i in 0..n {
            let s = Complex64::from_polar(1.0, TAU * cycles * i as f64 / n as f64 + phi);
            let wr: f64 = StandardNormal.sample(rng);
            let wi: f64 = StandardNormal.sample(rng);
            samples.push(Complex32::new((s.re + noise_sd * wr) as f32, (s.im + noise_sd * wi) as f32));
        }
    }
    RadarCube::new(meta, samples).map_err(|source| SynthError::Pipeline { scene: 0, source })
}

/// Everything rendered for one scene.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub cube: RadarCube,
    pub breath: Vec<f64>,
    pub micromotion: Vec<f64>,
}

pub fn render_scene(scene: &SceneConfig) -> Result<RenderedScene> {
    scene.validate()?;
    let fs = scene.radar.frame_rate_hz();
    let breath = gen_respiration(&scene.breath, fs, scene.duration_s, &mut rng::stream(scene.seed, "breath"))?;
    let micromotion = gen_micromotion(&scene.events, fs, scene.duration_s, &mut rng::stream(scene.seed, "micromotion"));
    let total: Vec<f64> = breath.iter().zip(&micromotion).map(|(a, b)| a + b).collect();
    let cube = synth_iq(&total, scene, &mut rng::stream(scene.seed, "noise"))?;
    Ok(RenderedScene { cube, breath, micromotion })
}

/// Renders one scene and pairs its observation segments with the segmented
/// ground truth.
pub fn scene_pairs(
    scene_index: usize,
    scene: &SceneConfig,
    seg: &SegmentationConfig,
    pipeline: &PipelineConfig,
) -> Result<Vec<PairedSegment>> {
    pairs_from_rendered(scene_index, &render_scene(scene)?, seg, pipeline)
}

/// [`scene_pairs`] for an already rendered scene.
pub fn pairs_from_rendered(
    scene_index: usize,
    rendered: &RenderedScene,
    seg: &SegmentationConfig,
    pipeline: &PipelineConfig,
) -> Result<Vec<PairedSegment>> {
    let wrap = |source| SynthError::Pipeline { scene: scene_index, source };
    let fs = rendered.cube.meta.slow_time_rate_hz();
    let phase = signal::chest_phase(&rendered.cube, pipeline).map_err(wrap)?;
    let ys = signal::observation_segments(&phase.wrapped.values, fs, seg).map_err(wrap)?;
    let xs = signal::reference_segments(&rendered.breath, fs, seg).map_err(wrap)?;
    let hop = seg.hop_samples(fs).map_err(wrap)?;
    Ok(ys
        .into_iter()
        .zip(xs)
        .enumerate()
        .map(|(i, (y, x))| PairedSegment::new(y, Some(x)).with_origin(scene_index, i * hop))
        .collect())
}

/// Paired segments for every scene, in scene order.
pub fn make_paired_dataset(
    scenes: &[SceneConfig],
    seg: &SegmentationConfig,
    pipeline: &PipelineConfig,
) -> Result<Vec<PairedSegment>> {
    let per_scene = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| scene_pairs(i, s, seg, pipeline))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Parameters of the randomly drawn default corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub duration_s: f64,
    pub max_events: usize,
    /// Multiplier on every event amplitude.
    pub event_scale: f64,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_scenes: 200,
            test_scenes: 40,
            duration_s: 60.0,
            max_events: 4,
            event_scale: 1.0,
            snr_db_min: 5.0,
            snr_db_max: 25.0,
        }
    }
}

/// Seed of scene `index` in `split`. Train and test seeds never collide.
pub fn scene_seed(master_seed: u64, split: Split, index: usize) -> u64 {
    rng::derive_indexed_seed(master_seed, &format!("scene/{}", split.name()), index as u64)
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws a random event of `kind` that fits inside `duration_s`.
pub fn random_event(kind: MicromotionKind, duration_s: f64, scale: f64, rng: &mut Rng) -> MicromotionEvent {
    let (dur, amp, freq) = match kind {
        MicromotionKind::Burst => (uniform(rng, 1.0, 4.0), uniform(rng, 2e-3, 8e-3), 0.0),
        MicromotionKind::Drift => (uniform(rng, 3.0, 10.0), uniform(rng, 2e-3, 8e-3), 0.0),
        MicromotionKind::Tremor => (uniform(rng, 2.0, 8.0), uniform(rng, 0.1e-3, 0.4e-3), uniform(rng, 2.0, 6.0)),
        MicromotionKind::Step => {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            (uniform(rng, 3.0, 12.0), sign * uniform(rng, 3e-3, 10e-3), 0.0)
        }
    };
    let dur = dur.min(duration_s);
    MicromotionEvent {
        kind,
        start_s: uniform(rng, 0.0, duration_s - dur),
        duration_s: dur,
        amp_m: amp * scale,
        freq_hz: freq,
    }
}

/// Draws scene `index` of the default corpus.
pub fn corpus_scene(master_seed: u64, split: Split, index: usize, cfg: &CorpusConfig, radar: &RadarParams) -> SceneConfig {
    let seed = scene_seed(master_seed, split, index);
    let mut r = rng::stream(seed, "params");
    let breath = BreathModel {
        rate_bpm: uniform(&mut r, 8.0, 28.0),
        amp_m: uniform(&mut r, 1.5e-3, 5e-3),
        harmonic2: uniform(&mut r, 0.0, 0.3),
        rate_drift: uniform(&mut r, 0.0, 0.1),
        phase0: uniform(&mut r, 0.0, TAU),
    };
    let n_events = r.random_range(0..=cfg.max_events);
    let events = (0..n_events)
        .map(|_| {
            let kind = MicromotionKind::ALL[r.random_range(0..4)];
            random_event(kind, cfg.duration_s, cfg.event_scale, &mut r)
        })
        .collect();
    SceneConfig {
        breath,
        events,
        range_m: uniform(&mut r, 0.8, 2.5),
        snr_db: uniform(&mut r, cfg.snr_db_min, cfg.snr_db_max),
        duration_s: cfg.duration_s,
        radar: *radar,
        seed,
    }
}

pub fn corpus_scenes(master_seed: u64, split: Split, cfg: &CorpusConfig, radar: &RadarParams) -> Vec<SceneConfig> {
    let count = match split {
        Split::Train => cfg.train_scenes,
        Split::Test => cfg.test_scenes,
    };
    (0..count).map(|i| corpus_scene(master_seed, split, i, cfg, radar)).collect()
}
