//! Continuous-wave perception: nonreciprocal interference traces, null
//! frequency extraction and position inversion.
//!
//! A dynamic disturbance at distance `x` from the splitter reaches the two
//! counter-propagating beams at times that differ by `n (L - 2x) / c`, so the
//! interference term sees `d(t) - d(t - lag)`. Its transfer function has
//! zeros at `f = k / lag`, which is what localizes the event.

use crate::derive_seed;
use crate::disturbance::{DisturbanceEvent, DisturbanceKind, PztParams};
use crate::optics::{LoopChannel, SPEED_OF_LIGHT};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Frequency resolution used for the localization resolution figure.
pub const DEFAULT_RESOLUTION_HZ: f64 = 500.0;
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 200e3;
/// Relative source power fluctuation.
pub const DEFAULT_NOISE_SIGMA_REL: f64 = 0.0019;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerceptionError {
    #[error("reciprocal disturbance: a quasi-static event has no nonreciprocal phase")]
    ReciprocalDisturbance,
    #[error("aliasing: sample rate {sample_rate_hz} Hz is not above twice the {highest_frequency_hz} Hz content")]
    Aliasing {
        sample_rate_hz: f64,
        highest_frequency_hz: f64,
    },
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("out of loop: null at {f_null_hz} Hz is below the k-th loop minimum {min_hz} Hz")]
    OutOfLoop { f_null_hz: f64, min_hz: f64 },
    #[error(
        "undefined resolution: null at {f_null_hz} Hz does not exceed delta_f {delta_f_hz} Hz"
    )]
    UndefinedResolution { f_null_hz: f64, delta_f_hz: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("harmonic ambiguity: null at {f_null_hz} Hz sits at {ratio} times the first null")]
    HarmonicAmbiguity { f_null_hz: f64, ratio: f64 },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> PerceptionError {
    PerceptionError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// Arrival-time difference of the two directions at position `x` (s).
pub fn propagation_lag(position_m: f64, channel: &LoopChannel) -> f64 {
    channel.refractive_index * (channel.length_m - 2.0 * position_m) / SPEED_OF_LIGHT
}

fn nonreciprocal_phase(t: f64, event: &DisturbanceEvent, channel: &LoopChannel) -> f64 {
    if !event.is_dynamic() {
        return 0.0;
    }
    let lag = propagation_lag(event.position_m, channel);
    event.phase_at(t) - event.phase_at(t - lag)
}

/// Effective global phase difference `d(t) - d(t - lag) + bias`.
pub fn effective_gpd(
    t: f64,
    event: &DisturbanceEvent,
    channel: &LoopChannel,
) -> Result<f64, PerceptionError> {
    if !event.is_dynamic() {
        return Err(PerceptionError::ReciprocalDisturbance);
    }
    Ok(nonreciprocal_phase(t, event, channel) + channel.bias_gpd_rad)
}

/// Sum of the nonreciprocal phases of several events plus the bias.
pub fn combined_gpd(t: f64, events: &[DisturbanceEvent], channel: &LoopChannel) -> f64 {
    channel.bias_gpd_rad
        + events
            .iter()
            .map(|e| nonreciprocal_phase(t, e, channel))
            .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSettings {
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub noise_sigma_rel: f64,
    pub i0_w: f64,
    pub start_time_s: f64,
    pub seed: u64,
}

impl Default for TraceSettings {
    fn default() -> Self {
        Self {
            duration_s: 0.05,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            noise_sigma_rel: DEFAULT_NOISE_SIGMA_REL,
            i0_w: 1e-3,
            start_time_s: 0.0,
            seed: 0,
        }
    }
}

impl TraceSettings {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(invalid("duration_s", "must be positive"));
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(invalid("sample_rate_hz", "must be positive"));
        }
        if !(self.noise_sigma_rel >= 0.0 && self.noise_sigma_rel.is_finite()) {
            return Err(invalid("noise_sigma_rel", "must be non-negative"));
        }
        if !(self.i0_w > 0.0 && self.i0_w.is_finite()) {
            return Err(invalid("i0_w", "must be positive"));
        }
        if !self.start_time_s.is_finite() {
            return Err(invalid("start_time_s", "must be finite"));
        }
        Ok(())
    }
}

/// Uniformly sampled reflected-port intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceTrace {
    pub sample_rate_hz: f64,
    pub start_time_s: f64,
    pub i0_w: f64,
    pub noise_sigma_rel: f64,
    pub samples: Vec<f64>,
}

impl InterferenceTrace {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(invalid("sample_rate_hz", "must be positive"));
        }
        if self.samples.is_empty() {
            return Err(invalid("samples", "trace is empty"));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(invalid("samples", format!("sample {i} is not finite")));
        }
        Ok(())
    }

    pub fn time_at(&self, i: usize) -> f64 {
        self.start_time_s + i as f64 / self.sample_rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }
}

/// Synthesize `I0 (1 + cos gpd(t)) (1 + noise)` for the given events.
/// Quasi-static events are accepted and contribute nothing.
pub fn synthesize_trace(
    events: &[DisturbanceEvent],
    channel: &LoopChannel,
    settings: &TraceSettings,
) -> Result<InterferenceTrace, PerceptionError> {
    settings.validate()?;
    channel
        .validate()
        .map_err(|e| invalid("channel", e.to_string()))?;
    let f_max = events
        .iter()
        .map(DisturbanceEvent::highest_frequency_hz)
        .fold(0.0, f64::max);
    if f_max > 0.0 && settings.sample_rate_hz <= 2.0 * f_max {
        return Err(PerceptionError::Aliasing {
            sample_rate_hz: settings.sample_rate_hz,
            highest_frequency_hz: f_max,
        });
    }
    let n = ((settings.duration_s * settings.sample_rate_hz).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = settings.start_time_s + i as f64 / settings.sample_rate_hz;
        let clean = settings.i0_w * (1.0 + combined_gpd(t, events, channel).cos());
        let noise = if settings.noise_sigma_rel > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            settings.noise_sigma_rel * z
        } else {
            0.0
        };
        samples.push(clean * (1.0 + noise));
    }
    Ok(InterferenceTrace {
        sample_rate_hz: settings.sample_rate_hz,
        start_time_s: settings.start_time_s,
        i0_w: settings.i0_w,
        noise_sigma_rel: settings.noise_sigma_rel,
        samples,
    })
}

/// Small-signal AC amplitude `|I0 delta_d sin(omega_s n dx / 2c)|` at
/// quadrature bias. For a trace with intensity prefactor `I`, the linearized
/// AC term has `I0 = 2 I`.
pub fn ac_amplitude_theory(
    omega_s: f64,
    position_m: f64,
    channel: &LoopChannel,
    delta_d: f64,
    i0: f64,
) -> f64 {
    let dx = channel.length_m - 2.0 * position_m;
    (i0 * delta_d * (omega_s * channel.refractive_index * dx / (2.0 * SPEED_OF_LIGHT)).sin()).abs()
}

/// `k c / (n |L - 2x|)`; `None` at the midpoint.
pub fn theoretical_null_frequency(k: u32, position_m: f64, channel: &LoopChannel) -> Option<f64> {
    let lag = propagation_lag(position_m, channel).abs();
    (lag > 0.0).then(|| k as f64 / lag)
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / (n - 1) as f64).cos()))
        .collect()
}

/// Amplitude of the tone at `frequency_hz`, by Hann-weighted demodulation
/// after removing the weighted mean.
pub fn tone_amplitude(samples: &[f64], sample_rate_hz: f64, frequency_hz: f64) -> f64 {
    let w = hann(samples.len());
    let wsum: f64 = w.iter().sum();
    let mean = samples.iter().zip(&w).map(|(s, w)| s * w).sum::<f64>() / wsum;
    let step = 2.0 * PI * frequency_hz / sample_rate_hz;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, (s, w)) in samples.iter().zip(&w).enumerate() {
        let (sin, cos) = (step * i as f64).sin_cos();
        let v = (s - mean) * w;
        re += v * cos;
        im -= v * sin;
    }
    2.0 * (re * re + im * im).sqrt() / wsum
}

/// One-sided Welch power spectral density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub resolution_hz: f64,
    pub segments: usize,
    /// Bin `i` is centred on `i * resolution_hz`.
    pub psd: Vec<f64>,
}

impl Spectrum {
    pub fn frequency(&self, i: usize) -> f64 {
        i as f64 * self.resolution_hz
    }
}

/// Largest power-of-two segment giving at least eight half-overlapping segments.
pub fn default_segment_len(n: usize) -> usize {
    let mut len = 16usize;
    while (n.saturating_sub(len * 2)) / len + 1 >= 8 {
        len *= 2;
    }
    len
}

/// Welch PSD with a Hann window and 50% overlap, mean removed per segment.
pub fn welch(
    trace: &InterferenceTrace,
    segment_len: Option<usize>,
) -> Result<Spectrum, PerceptionError> {
    trace.validate()?;
    let n = trace.samples.len();
    let len = segment_len.unwrap_or_else(|| default_segment_len(n));
    if len < 4 || len > n {
        return Err(invalid(
            "segment_len",
            format!("{len} does not fit a trace of {n} samples"),
        ));
    }
    let hop = len / 2;
    let segments = (n - len) / hop + 1;
    if segments < 8 {
        return Err(PerceptionError::InsufficientData(format!(
            "{segments} segments of {len} samples; at least 8 are needed"
        )));
    }
    let w = hann(len);
    let wpow: f64 = w.iter().map(|x| x * x).sum();
    let fft = FftPlanner::new().plan_fft_forward(len);
    let bins = len / 2 + 1;
    let mut psd = vec![0.0; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for s in 0..segments {
        let seg = &trace.samples[s * hop..s * hop + len];
        let mean = seg.iter().sum::<f64>() / len as f64;
        for (b, (x, w)) in buf.iter_mut().zip(seg.iter().zip(&w)) {
            *b = Complex::new((x - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (p, b) in psd.iter_mut().zip(&buf) {
            *p += b.norm_sqr();
        }
    }
    let scale = 1.0 / (segments as f64 * trace.sample_rate_hz * wpow);
    for (i, p) in psd.iter_mut().enumerate() {
        *p *= scale;
        if i != 0 && !(len % 2 == 0 && i == bins - 1) {
            *p *= 2.0;
        }
    }
    Ok(Spectrum {
        resolution_hz: trace.sample_rate_hz / len as f64,
        segments,
        psd,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Robust white-noise level of a sequence: `1.4826 MAD / sqrt(6)` of its
/// second differences, which cancels smooth trends.
pub fn noise_floor_from_second_differences(values: &[f64]) -> f64 {
    if values.len() < 3 {
        return 0.0;
    }
    let mut d2: Vec<f64> = values
        .windows(3)
        .map(|w| w[0] - 2.0 * w[1] + w[2])
        .collect();
    let m = median(&mut d2.clone());
    for d in d2.iter_mut() {
        *d = (*d - m).abs();
    }
    1.4826 * median(&mut d2) / 6f64.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullFrequency {
    pub f_null_hz: f64,
    pub harmonic_k: u32,
    /// Depth below the neighbouring response (dB).
    pub depth_db: f64,
    /// One-sigma interpolation uncertainty of `f_null_hz`.
    pub uncertainty_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSearch {
    pub nulls: Vec<NullFrequency>,
    pub noise_floor: f64,
    /// Why the list is empty or shorter than expected, if it is.
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub frequency_hz: f64,
    pub amplitude_w: f64,
}

/// Response amplitude versus drive frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencySweep {
    pub points: Vec<SweepPoint>,
}

impl FrequencySweep {
    pub fn step_hz(&self) -> Option<f64> {
        (self.points.len() >= 2).then(|| self.points[1].frequency_hz - self.points[0].frequency_hz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub start_hz: f64,
    pub stop_hz: f64,
    pub step_hz: f64,
    /// Trace length captured per frequency point.
    pub dwell_s: f64,
    pub sample_rate_hz: f64,
    pub noise_sigma_rel: f64,
    pub i0_w: f64,
    pub seed: u64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            start_hz: 1_000.0,
            stop_hz: 90_000.0,
            step_hz: 100.0,
            dwell_s: 0.01,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            noise_sigma_rel: DEFAULT_NOISE_SIGMA_REL,
            i0_w: 1e-3,
            seed: 0,
        }
    }
}

impl SweepSettings {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        if !(self.start_hz > 0.0 && self.stop_hz > self.start_hz) {
            return Err(invalid("stop_hz", "sweep needs 0 < start_hz < stop_hz"));
        }
        if !(self.step_hz > 0.0) {
            return Err(invalid("step_hz", "must be positive"));
        }
        if !(self.dwell_s > 0.0) {
            return Err(invalid("dwell_s", "must be positive"));
        }
        Ok(())
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let n = ((self.stop_hz - self.start_hz) / self.step_hz + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|j| self.start_hz + j as f64 * self.step_hz)
            .collect()
    }
}

/// Drive a PZT at `position_m` through the sweep and record the response
/// amplitude at each frequency. Points run in parallel, each on its own
/// seed stream, and come back in frequency order.
pub fn frequency_sweep(
    position_m: f64,
    drive: &PztParams,
    channel: &LoopChannel,
    settings: &SweepSettings,
) -> Result<FrequencySweep, PerceptionError> {
    settings.validate()?;
    // Let both directions see the drive before recording.
    let settle = 2.0 * channel.refractive_index * channel.length_m / SPEED_OF_LIGHT;
    let points = settings
        .frequencies()
        .into_par_iter()
        .enumerate()
        .map(|(j, f)| {
            let event = DisturbanceEvent::new(
                position_m,
                0.0,
                DisturbanceKind::PztSinusoid(drive.with_frequency_hz(f)),
            );
            let trace = synthesize_trace(
                &[event],
                channel,
                &TraceSettings {
                    duration_s: settings.dwell_s,
                    sample_rate_hz: settings.sample_rate_hz,
                    noise_sigma_rel: settings.noise_sigma_rel,
                    i0_w: settings.i0_w,
                    start_time_s: settle,
                    seed: derive_seed(settings.seed, j as u64),
                },
            )?;
            Ok(SweepPoint {
                frequency_hz: f,
                amplitude_w: tone_amplitude(&trace.samples, trace.sample_rate_hz, f),
            })
        })
        .collect::<Result<Vec<_>, PerceptionError>>()?;
    Ok(FrequencySweep { points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullSettings {
    /// Minimum notch depth (dB).
    pub depth_threshold_db: f64,
    /// The response around a notch must exceed this multiple of the noise floor.
    pub significance_factor: f64,
    /// Broadband mode: half-width of the local-median window (Hz).
    pub median_window_hz: f64,
    /// Broadband mode: notches below this frequency are ignored.
    pub min_frequency_hz: f64,
    /// Broadband mode: Welch segment length, default per [`default_segment_len`].
    pub segment_len: Option<usize>,
}

impl Default for NullSettings {
    fn default() -> Self {
        Self {
            depth_threshold_db: 10.0,
            significance_factor: 10.0,
            median_window_hz: 2_000.0,
            min_frequency_hz: 1_000.0,
            segment_len: None,
        }
    }
}

/// What to search for nulls in.
#[derive(Debug, Clone, Copy)]
pub enum NullInput<'a> {
    Trace(&'a InterferenceTrace),
    Sweep(&'a FrequencySweep),
}

pub fn find_null_frequencies(
    input: NullInput<'_>,
    max_k: u32,
    settings: &NullSettings,
) -> Result<NullSearch, PerceptionError> {
    match input {
        NullInput::Trace(t) => find_nulls_broadband(t, max_k, settings),
        NullInput::Sweep(s) => find_nulls_in_sweep(s, max_k, settings),
    }
}

struct RawNull {
    f: f64,
    depth_db: f64,
    sigma_f: f64,
}

/// Vertex offset of a parabola through `(-1, y0), (0, y1), (1, y2)` and its
/// one-sigma uncertainty given per-point sigmas.
fn parabolic_vertex(y: [f64; 3], sigma: [f64; 3]) -> (f64, f64) {
    let d = y[0] - 2.0 * y[1] + y[2];
    let n = y[0] - y[2];
    if !(d > 0.0) {
        return (0.0, 0.5);
    }
    let p = (0.5 * n / d).clamp(-0.5, 0.5);
    let grad = [
        0.5 * (d - n) / (d * d),
        n / (d * d),
        0.5 * (-d - n) / (d * d),
    ];
    let var: f64 = grad.iter().zip(&sigma).map(|(g, s)| (g * s).powi(2)).sum();
    (p, var.sqrt())
}

fn assign_harmonics(
    mut raw: Vec<RawNull>,
    max_k: u32,
) -> Result<Vec<NullFrequency>, PerceptionError> {
    raw.sort_by(|a, b| a.f.total_cmp(&b.f));
    let Some(first) = raw.first().map(|r| r.f) else {
        return Ok(Vec::new());
    };
    let mut out: Vec<NullFrequency> = Vec::new();
    for r in raw {
        let ratio = r.f / first;
        let k = ratio.round();
        let prev = out.last().map_or(0, |n| n.harmonic_k);
        if (ratio - k).abs() > 0.25 || k as u32 <= prev {
            return Err(PerceptionError::HarmonicAmbiguity {
                f_null_hz: r.f,
                ratio,
            });
        }
        if k as u32 > max_k {
            break;
        }
        out.push(NullFrequency {
            f_null_hz: r.f,
            harmonic_k: k as u32,
            depth_db: r.depth_db,
            uncertainty_hz: r.sigma_f,
        });
    }
    Ok(out)
}

fn empty_reason(nulls: &[NullFrequency], rejected: usize, floor: f64) -> Option<String> {
    nulls.is_empty().then(|| {
        format!("no significant null: {rejected} candidate minima rejected against noise floor {floor:.3e}")
    })
}

/// Swept-sine mode: local minima of the amplitude scored by prominence and
/// refined by a parabola on power through the three lowest points.
pub fn find_nulls_in_sweep(
    sweep: &FrequencySweep,
    max_k: u32,
    settings: &NullSettings,
) -> Result<NullSearch, PerceptionError> {
    let a: Vec<f64> = sweep.points.iter().map(|p| p.amplitude_w).collect();
    if a.len() < 5 {
        return Err(PerceptionError::InsufficientData(format!(
            "sweep has {} points; at least 5 are needed",
            a.len()
        )));
    }
    let step = sweep.step_hz().unwrap_or(0.0);
    if !(step > 0.0)
        || sweep
            .points
            .windows(2)
            .any(|w| w[1].frequency_hz <= w[0].frequency_hz)
    {
        return Err(invalid("sweep", "frequencies must be strictly ascending"));
    }
    let floor = noise_floor_from_second_differences(&a);
    let mut raw = Vec::new();
    let mut rejected = 0;
    for i in 1..a.len() - 1 {
        if !(a[i] < a[i - 1] && a[i] <= a[i + 1]) {
            continue;
        }
        let bound = |range: &mut dyn Iterator<Item = usize>| {
            let mut peak = a[i];
            for j in range {
                if a[j] < a[i] {
                    break;
                }
                peak = peak.max(a[j]);
            }
            peak
        };
        let lobe = bound(&mut (0..i).rev()).min(bound(&mut (i + 1..a.len())));
        let depth_db = 20.0 * (lobe / a[i].max(f64::MIN_POSITIVE)).log10();
        if lobe < settings.significance_factor * floor || depth_db < settings.depth_threshold_db {
            rejected += 1;
            continue;
        }
        let power = [a[i - 1].powi(2), a[i].powi(2), a[i + 1].powi(2)];
        let sigma = [
            2.0 * a[i - 1] * floor,
            2.0 * a[i] * floor,
            2.0 * a[i + 1] * floor,
        ];
        let (p, sp) = parabolic_vertex(power, sigma);
        raw.push(RawNull {
            f: sweep.points[i].frequency_hz + p * step,
            depth_db,
            sigma_f: sp * step,
        });
    }
    let nulls = assign_harmonics(raw, max_k)?;
    Ok(NullSearch {
        diagnostic: empty_reason(&nulls, rejected, floor),
        nulls,
        noise_floor: floor,
    })
}

/// Noise level of a spectrum, taken as the median PSD over the top fifth of
/// the band where impact content has died away.
pub fn spectral_noise_floor(spectrum: &Spectrum) -> f64 {
    let n = spectrum.psd.len();
    let mut tail = spectrum.psd[(n * 4 / 5).min(n - 1)..].to_vec();
    median(&mut tail)
}

/// Broadband mode: notches in the Welch spectrum at least
/// `depth_threshold_db` below the local median, refined on log magnitude.
pub fn find_nulls_broadband(
    trace: &InterferenceTrace,
    max_k: u32,
    settings: &NullSettings,
) -> Result<NullSearch, PerceptionError> {
    let spec = welch(trace, settings.segment_len)?;
    let psd = &spec.psd;
    let floor = spectral_noise_floor(&spec);
    let half = (settings.median_window_hz / spec.resolution_hz)
        .round()
        .max(2.0) as usize;
    let sigma_ln = 1.0 / (spec.segments as f64).sqrt();
    let mut raw: Vec<RawNull> = Vec::new();
    let mut rejected = 0;
    for i in 1..psd.len() - 1 {
        if spec.frequency(i) < settings.min_frequency_hz
            || !(psd[i] < psd[i - 1] && psd[i] <= psd[i + 1])
        {
            continue;
        }
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(psd.len());
        let local = median(&mut psd[lo..hi].to_vec());
        let depth_db = 10.0 * (local / psd[i].max(f64::MIN_POSITIVE)).log10();
        if local < settings.significance_factor * floor || depth_db < settings.depth_threshold_db {
            rejected += 1;
            continue;
        }
        let ln = [psd[i - 1].ln(), psd[i].ln(), psd[i + 1].ln()];
        let (p, sp) = parabolic_vertex(ln, [sigma_ln; 3]);
        let cand = RawNull {
            f: (i as f64 + p) * spec.resolution_hz,
            depth_db,
            sigma_f: sp * spec.resolution_hz,
        };
        match raw.last_mut() {
            Some(prev) if cand.f - prev.f < settings.median_window_hz / 2.0 => {
                if cand.depth_db > prev.depth_db {
                    *prev = cand;
                }
            }
            _ => raw.push(cand),
        }
    }
    let nulls = assign_harmonics(raw, max_k)?;
    Ok(NullSearch {
        diagnostic: empty_reason(&nulls, rejected, floor),
        nulls,
        noise_floor: floor,
    })
}

/// `x = (L - k c / (n f)) / 2`, the branch on the near side of the midpoint.
pub fn localize(null: &NullFrequency, channel: &LoopChannel) -> Result<f64, PerceptionError> {
    let k = null.harmonic_k as f64;
    let min_hz = k * SPEED_OF_LIGHT / (channel.refractive_index * channel.length_m);
    if !(null.f_null_hz >= min_hz) {
        return Err(PerceptionError::OutOfLoop {
            f_null_hz: null.f_null_hz,
            min_hz,
        });
    }
    Ok(0.5 * (channel.length_m - k * SPEED_OF_LIGHT / (channel.refractive_index * null.f_null_hz)))
}

/// `R_s = (k c / n) |delta_f / (f^2 - delta_f^2)|`.
pub fn resolution(
    null: &NullFrequency,
    channel: &LoopChannel,
    delta_f_hz: f64,
) -> Result<f64, PerceptionError> {
    let f = null.f_null_hz;
    if !(f > delta_f_hz) {
        return Err(PerceptionError::UndefinedResolution {
            f_null_hz: f,
            delta_f_hz,
        });
    }
    let k = null.harmonic_k as f64;
    Ok(k * SPEED_OF_LIGHT / channel.refractive_index
        * (delta_f_hz / (f * f - delta_f_hz * delta_f_hz)).abs())
}

/// `|dx/df|` at `f` for harmonic `k`.
pub fn position_sensitivity(f_hz: f64, k: u32, channel: &LoopChannel) -> f64 {
    k as f64 * SPEED_OF_LIGHT / (2.0 * channel.refractive_index * f_hz * f_hz)
}

/// Position uncertainty from repeated null-frequency measurements:
/// sample standard deviation times `|dx/df|` at the sample mean.
pub fn localization_error(
    f_samples: &[f64],
    k: u32,
    channel: &LoopChannel,
) -> Result<f64, PerceptionError> {
    if f_samples.len() < 2 {
        return Err(PerceptionError::InsufficientData(format!(
            "{} frequency samples; at least 2 are needed",
            f_samples.len()
        )));
    }
    let n = f_samples.len() as f64;
    let mean = f_samples.iter().sum::<f64>() / n;
    let var = f_samples.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(position_sensitivity(mean, k, channel) * var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub nulls: Vec<NullFrequency>,
    pub position_x_m: f64,
    /// The equally consistent far-side position `L - x`.
    pub mirror_position_m: f64,
    pub mirror_ambiguous: bool,
    pub resolution_rs_m: f64,
    pub sigma_x_m: f64,
    pub path_difference_dx_m: f64,
    pub per_null_positions_m: Vec<f64>,
}

/// Combine per-harmonic positions by inverse-variance weighting. The
/// resolution figure is that of the lowest null.
pub fn build_report(
    nulls: &[NullFrequency],
    channel: &LoopChannel,
    delta_f_hz: f64,
) -> Result<LocalizationReport, PerceptionError> {
    let first = nulls.first().ok_or_else(|| {
        PerceptionError::InsufficientData("no null frequencies to localize".into())
    })?;
    let positions = nulls
        .iter()
        .map(|n| localize(n, channel))
        .collect::<Result<Vec<_>, _>>()?;
    let sigmas: Vec<f64> = nulls
        .iter()
        .map(|n| {
            (position_sensitivity(n.f_null_hz, n.harmonic_k, channel) * n.uncertainty_hz).max(1e-9)
        })
        .collect();
    let wsum: f64 = sigmas.iter().map(|s| s.powi(-2)).sum();
    let x = positions
        .iter()
        .zip(&sigmas)
        .map(|(x, s)| x / (s * s))
        .sum::<f64>()
        / wsum;
    Ok(LocalizationReport {
        nulls: nulls.to_vec(),
        position_x_m: x,
        mirror_position_m: channel.length_m - x,
        mirror_ambiguous: (channel.length_m - 2.0 * x).abs() > 0.0,
        resolution_rs_m: resolution(first, channel, delta_f_hz)?,
        sigma_x_m: wsum.powf(-0.5),
        path_difference_dx_m: channel.length_m - 2.0 * x,
        per_null_positions_m: positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disturbance::{ImpactParams, PressureParams};
    use approx::assert_relative_eq;

    fn channel() -> LoopChannel {
        LoopChannel::default()
    }

    fn pzt(x: f64, amp: f64, f: f64) -> DisturbanceEvent {
        DisturbanceEvent::new(
            x,
            0.0,
            DisturbanceKind::PztSinusoid(
                PztParams {
                    drive_amplitude_v: amp,
                    angular_frequency_rad_per_s: 0.0,
                    phase_gain_rad_per_v: 1.0,
                }
                .with_frequency_hz(f),
            ),
        )
    }

    fn null(f: f64, k: u32) -> NullFrequency {
        NullFrequency {
            f_null_hz: f,
            harmonic_k: k,
            depth_db: 30.0,
            uncertainty_hz: 10.0,
        }
    }

    #[test]
    fn lag_for_five_km() {
        assert_relative_eq!(
            propagation_lag(5_000.0, &channel()),
            97.934_418_35e-6,
            max_relative = 1e-9
        );
    }

    #[test]
    fn midpoint_cancels() {
        let ch = channel().with_bias(0.7);
        let e = pzt(15_000.0, 0.3, 4_000.0);
        for i in 0..50 {
            let t = 1e-3 + i as f64 * 7.3e-6;
            assert_eq!(effective_gpd(t, &e, &ch).unwrap(), 0.7);
        }
    }

    #[test]
    fn slow_waveform_is_reciprocal() {
        let ch = channel().with_bias(0.2);
        let e = DisturbanceEvent::new(
            3_000.0,
            10.0,
            DisturbanceKind::TransientImpact(ImpactParams {
                mass_kg: 0.1,
                drop_height_m: 0.5,
                effective_width_s: 1e4,
                impact_gain_rad_per_kg_m_per_s: 1.0,
            }),
        );
        assert!((effective_gpd(10.0, &e, &ch).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn pressure_is_rejected() {
        let e = DisturbanceEvent::new(
            1.0,
            0.0,
            DisturbanceKind::QuasiStaticPressure(PressureParams::default()),
        );
        assert_eq!(
            effective_gpd(0.0, &e, &channel()),
            Err(PerceptionError::ReciprocalDisturbance)
        );
    }

    #[test]
    fn dark_and_bright_ports() {
        let s = TraceSettings {
            duration_s: 1e-3,
            noise_sigma_rel: 0.0,
            ..TraceSettings::default()
        };
        let dark = synthesize_trace(&[], &channel().with_bias(PI), &s).unwrap();
        assert!(dark.samples.iter().all(|&v| v.abs() < 1e-18));
        let bright = synthesize_trace(&[], &channel(), &s).unwrap();
        assert!(bright.samples.iter().all(|&v| v == 2.0 * s.i0_w));
    }

    #[test]
    fn undersampling_is_rejected() {
        let s = TraceSettings {
            sample_rate_hz: 20e3,
            ..TraceSettings::default()
        };
        let err = synthesize_trace(&[pzt(5e3, 0.1, 10e3)], &channel(), &s).unwrap_err();
        assert!(matches!(err, PerceptionError::Aliasing { .. }));
    }

    #[test]
    fn trace_is_deterministic() {
        let s = TraceSettings {
            seed: 4,
            ..TraceSettings::default()
        };
        let ch = channel().with_bias(PI / 2.0);
        let a = synthesize_trace(&[pzt(5e3, 0.1, 3e3)], &ch, &s).unwrap();
        let b = synthesize_trace(&[pzt(5e3, 0.1, 3e3)], &ch, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ac_amplitude_matches_small_signal_theory() {
        let ch = channel().with_bias(PI / 2.0);
        let s = TraceSettings {
            noise_sigma_rel: 0.0,
            start_time_s: 1e-3,
            duration_s: 0.02,
            ..TraceSettings::default()
        };
        for &(amp, f) in &[(0.1, 3_000.0), (0.05, 7_300.0), (0.02, 14_000.0)] {
            let tr = synthesize_trace(&[pzt(5e3, amp, f)], &ch, &s).unwrap();
            let measured = tone_amplitude(&tr.samples, tr.sample_rate_hz, f);
            let theory = ac_amplitude_theory(2.0 * PI * f, 5e3, &ch, amp, 2.0 * s.i0_w);
            assert_relative_eq!(measured, theory, max_relative = 0.01);
        }
    }

    #[test]
    fn null_frequency_points() {
        let ch = channel();
        let f1 = theoretical_null_frequency(1, 5_000.0, &ch).unwrap();
        assert_relative_eq!(f1, 10_210.914_782_016_349, max_relative = 1e-12);
        assert!(ac_amplitude_theory(2.0 * PI * f1, 5_000.0, &ch, 0.1, 1.0) < 1e-12);
        assert_relative_eq!(
            theoretical_null_frequency(1, 0.0, &ch).unwrap(),
            6_807.276_521_344_233,
            max_relative = 1e-12
        );
        assert_eq!(theoretical_null_frequency(1, 15_000.0, &ch), None);
    }

    #[test]
    fn localize_examples() {
        let ch = channel();
        assert_relative_eq!(
            localize(&null(10_210.0, 1), &ch).unwrap(),
            4_999.104_033_284_673,
            max_relative = 1e-12
        );
        let far = localize(&null(1e12, 1), &ch).unwrap();
        assert!((far - 15_000.0).abs() < 1e-3);
        let x1 = localize(&null(10_210.0, 1), &ch).unwrap();
        let x2 = localize(&null(20_420.0, 2), &ch).unwrap();
        assert_relative_eq!(x1, x2, max_relative = 1e-12);
        assert!(matches!(
            localize(&null(5_000.0, 1), &ch),
            Err(PerceptionError::OutOfLoop { .. })
        ));
    }

    #[test]
    fn resolution_examples() {
        let ch = channel();
        assert_relative_eq!(
            resolution(&null(10_210.0, 1), &ch, 500.0).unwrap(),
            981.874_431_531_822_4,
            max_relative = 1e-12
        );
        let rs: Vec<f64> = [1e3, 5e3, 1e4, 5e4, 1e6]
            .iter()
            .map(|&f| resolution(&null(f, 1), &ch, 500.0).unwrap())
            .collect();
        assert!(rs.windows(2).all(|w| w[1] < w[0]));
        assert!(resolution(&null(1e9, 1), &ch, 500.0).unwrap() < 1e-6);
        assert!(matches!(
            resolution(&null(500.0, 1), &ch, 500.0),
            Err(PerceptionError::UndefinedResolution { .. })
        ));
    }

    #[test]
    fn localization_error_examples() {
        let ch = channel();
        assert_eq!(localization_error(&[10_210.0; 4], 1, &ch).unwrap(), 0.0);
        let s = localization_error(
            &[
                10_210.0 - 500.0 / 2f64.sqrt(),
                10_210.0 + 500.0 / 2f64.sqrt(),
            ],
            1,
            &ch,
        )
        .unwrap();
        assert_relative_eq!(s, 489.759_841_660_887_7, max_relative = 1e-9);
        assert!(matches!(
            localization_error(&[1.0], 1, &ch),
            Err(PerceptionError::InsufficientData(_))
        ));
    }

    #[test]
    fn harmonics_are_checked() {
        let raw = |fs: &[f64]| {
            fs.iter()
                .map(|&f| RawNull {
                    f,
                    depth_db: 20.0,
                    sigma_f: 1.0,
                })
                .collect::<Vec<_>>()
        };
        let ok = assign_harmonics(raw(&[30_000.0, 10_000.0, 20_100.0]), 5).unwrap();
        assert_eq!(
            ok.iter().map(|n| n.harmonic_k).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        assert_eq!(
            assign_harmonics(raw(&[10_000.0, 20_000.0, 30_000.0]), 2)
                .unwrap()
                .len(),
            2
        );
        assert!(matches!(
            assign_harmonics(raw(&[10_000.0, 15_000.0]), 5),
            Err(PerceptionError::HarmonicAmbiguity { .. })
        ));
    }

    #[test]
    fn welch_of_white_noise_is_flat() {
        let tr = synthesize_trace(
            &[],
            &channel().with_bias(PI / 2.0),
            &TraceSettings {
                seed: 3,
                ..TraceSettings::default()
            },
        )
        .unwrap();
        let spec = welch(&tr, None).unwrap();
        assert!(spec.segments >= 8);
        // Two-sided variance (sigma I0)^2 spread over fs/2.
        let expected = 2.0 * (DEFAULT_NOISE_SIGMA_REL * 1e-3).powi(2) / DEFAULT_SAMPLE_RATE_HZ;
        let mut mid = spec.psd[10..spec.psd.len() - 1].to_vec();
        let m = median(&mut mid) / (1.0 - 1.0 / (9.0 * spec.segments as f64)).powi(3);
        assert_relative_eq!(m, expected, max_relative = 0.1);
    }

    #[test]
    fn noise_floor_ignores_smooth_trend() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..4000)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (i as f64 * 1e-3).sin() * 5.0 + 0.01 * z
            })
            .collect();
        assert_relative_eq!(
            noise_floor_from_second_differences(&v),
            0.01,
            max_relative = 0.1
        );
    }

    #[test]
    fn parabola_recovers_vertex() {
        // y = (u - 0.3)^2 sampled at -1, 0, 1.
        let y = [1.69, 0.09, 0.49];
        let (p, _) = parabolic_vertex(y, [0.0; 3]);
        assert_relative_eq!(p, 0.3, max_relative = 1e-12);
    }
}
