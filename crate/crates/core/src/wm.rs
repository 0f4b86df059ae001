//! Weak-measurement sensing of quasi-static birefringence changes.
//!
//! The analyzer is first set to the post-selection null, then offset by a
//! small angle `delta_epsilon`. A delay change `delta_tau` moves the
//! relative phase by `omega0 * delta_tau` and the contrast between the
//! offset and disturbed intensities reads it back out.

use crate::disturbance::PressureParams;
use crate::disturbance::{pressure_delay, STANDARD_GRAVITY};
use crate::optics::{
    post_selection_probabilities, LoopChannel, PostSelection, SpectralPacket, SPEED_OF_LIGHT,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WmError {
    #[error("no signal: the reflected port is dark at delta_delta = {0}")]
    NoSignal(f64),
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("zero working point: offset intensity {i1} does not exceed the minimum {i_min}")]
    ZeroWorkingPoint { i1: f64, i_min: f64 },
    #[error("ICR {icr} is outside the attainable branch [{min}, 1]")]
    OutOfBranch { icr: f64, min: f64 },
    #[error("calibration did not converge: {0}")]
    NotConverged(String),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> WmError {
    WmError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// Something whose output intensity can be read at an analyzer angle.
pub trait IntensityProbe {
    fn intensity(&self, epsilon: f64) -> f64;

    /// `dI/d epsilon`, if known in closed form.
    fn slope(&self, _epsilon: f64) -> Option<f64> {
        None
    }
}

/// The reflected-port intensity of the loop seen through the analyzer.
pub struct AnalyzerProbe {
    pub channel: LoopChannel,
    pub packet: SpectralPacket,
    pub i_in: f64,
}

impl IntensityProbe for AnalyzerProbe {
    fn intensity(&self, epsilon: f64) -> f64 {
        self.i_in
            * post_selection_probabilities(&self.channel, &self.packet, &PostSelection::at(epsilon))
                .p_reflected
    }

    fn slope(&self, epsilon: f64) -> Option<f64> {
        let tau = self.channel.total_delay();
        let phi = self.packet.omega0 * tau;
        let pref = 0.25 * self.i_in * (1.0 + self.channel.bias_gpd_rad.cos());
        Some(-2.0 * pref * self.packet.coherence(tau) * (2.0 * (phi - epsilon)).sin())
    }
}

/// Locate the intensity minimum over one analyzer period `[0, pi)`: coarse
/// grid, then bisection on the slope until `|dI/d eps| < tol`.
pub fn minimize_probe(probe: &dyn IntensityProbe, tol: f64) -> Result<f64, WmError> {
    const GRID: usize = 64;
    let h = PI / GRID as f64;
    let slope = |e: f64| {
        probe.slope(e).unwrap_or_else(|| {
            let d = 1e-7;
            (probe.intensity(e + d) - probe.intensity(e - d)) / (2.0 * d)
        })
    };
    let best = (0..GRID)
        .map(|i| i as f64 * h)
        .min_by(|a, b| probe.intensity(*a).total_cmp(&probe.intensity(*b)))
        .unwrap_or(0.0);
    let (mut lo, mut hi) = (best - h, best + h);
    if !(slope(lo) <= 0.0 && slope(hi) >= 0.0) {
        return Err(WmError::NotConverged(format!(
            "no slope sign change around {best}"
        )));
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let s = slope(mid);
        if s.abs() < tol {
            return Ok(mid.rem_euclid(PI));
        }
        if s < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * mid.abs().max(1.0) {
            break;
        }
    }
    let s = slope(mid);
    if s.abs() < tol {
        Ok(mid.rem_euclid(PI))
    } else {
        Err(WmError::NotConverged(format!(
            "slope {s:e} above tolerance {tol:e}"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmCalibration {
    pub epsilon0: f64,
    pub i_min: f64,
    pub i_in: f64,
    pub delta_bias: f64,
    /// `omega0 tau0 - epsilon0`, reduced to `(-pi/2, pi/2]`; zero up to
    /// minimizer tolerance.
    pub residual_rad: f64,
}

fn reduce_half_period(x: f64) -> f64 {
    let r = x.rem_euclid(PI);
    if r > FRAC_PI_2 {
        r - PI
    } else {
        r
    }
}

/// Null the analyzer on an undisturbed channel.
pub fn calibrate(
    channel: &LoopChannel,
    packet: &SpectralPacket,
    delta_bias: f64,
    i_in: f64,
) -> Result<WmCalibration, WmError> {
    if channel.delta_tau_s != 0.0 {
        return Err(invalid(
            "delta_tau_s",
            "calibration needs an undisturbed channel",
        ));
    }
    if !(i_in > 0.0 && i_in.is_finite()) {
        return Err(invalid("i_in", "must be positive"));
    }
    if 1.0 + delta_bias.cos() < 1e-12 {
        return Err(WmError::NoSignal(delta_bias));
    }
    let probe = AnalyzerProbe {
        channel: channel.with_bias(delta_bias),
        packet: *packet,
        i_in,
    };
    let epsilon0 = minimize_probe(&probe, 1e-12 * i_in)?;
    Ok(WmCalibration {
        epsilon0,
        i_min: probe.intensity(epsilon0),
        i_in,
        delta_bias,
        residual_rad: reduce_half_period(packet.omega0 * channel.tau0_s - epsilon0),
    })
}

/// `I = i_in/4 (1 + cos dd) [1 - e^{-s^2 t^2} cos(2 (omega0 delta_tau - delta_epsilon))]`,
/// with the phase difference carried relative to the calibrated null.
pub fn wm_intensity(
    cal: &WmCalibration,
    delta_epsilon: f64,
    delta_tau: f64,
    packet: &SpectralPacket,
    channel: &LoopChannel,
) -> f64 {
    let pref = 0.25 * cal.i_in * (1.0 + cal.delta_bias.cos());
    let c = packet.coherence(channel.tau0_s + delta_tau);
    let arg = cal.residual_rad + packet.omega0 * delta_tau - delta_epsilon;
    pref * (1.0 - c * (2.0 * arg).cos())
}

/// Offset intensity `I_1` at the working point, undisturbed.
pub fn offset_intensity(
    cal: &WmCalibration,
    delta_epsilon: f64,
    packet: &SpectralPacket,
    channel: &LoopChannel,
) -> f64 {
    wm_intensity(cal, delta_epsilon, 0.0, packet, channel)
}

/// Intensity `I_d` after a delay change `delta_tau`.
pub fn disturbed_intensity(
    cal: &WmCalibration,
    delta_epsilon: f64,
    delta_tau: f64,
    packet: &SpectralPacket,
    channel: &LoopChannel,
) -> f64 {
    wm_intensity(cal, delta_epsilon, delta_tau, packet, channel)
}

/// Intensity contrast ratio `(I_1 - I_d) / (I_1 - I_min)`.
pub fn icr(i1: f64, i_d: f64, i_min: f64) -> Result<f64, WmError> {
    if !(i1 - i_min > 0.0) {
        return Err(WmError::ZeroWorkingPoint { i1, i_min });
    }
    Ok((i1 - i_d) / (i1 - i_min))
}

/// Exact ICR as a function of `u = omega0 delta_tau`:
/// `sin(2 de - u) sin(u) / sin^2(de)`.
pub fn icr_of_phase(u: f64, delta_epsilon: f64) -> f64 {
    (2.0 * delta_epsilon - u).sin() * u.sin() / delta_epsilon.sin().powi(2)
}

/// Small-angle form `ICR = 2 omega0 delta_tau / delta_epsilon` (bright bias).
pub fn icr_small_angle(delta_tau: f64, delta_epsilon: f64, packet: &SpectralPacket) -> f64 {
    2.0 * packet.omega0 * delta_tau / delta_epsilon
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayEstimate {
    pub delta_tau_s: f64,
    /// `ICR * delta_epsilon / (2 omega0)`.
    pub small_angle_delta_tau_s: f64,
}

/// Which side of the peak at `omega0 delta_tau = delta_epsilon` to invert on.
/// The ICR is symmetric about that peak, so it cannot tell the two apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IcrBranch {
    /// `|omega0 delta_tau| <= |delta_epsilon|`, the side containing zero delay.
    Near,
    /// Past the peak, up to a quarter period beyond it.
    Far,
}

/// Invert the exact ICR on the branch that contains `delta_tau = 0`.
pub fn infer_delay(
    icr_value: f64,
    delta_epsilon: f64,
    packet: &SpectralPacket,
) -> Result<DelayEstimate, WmError> {
    infer_delay_on_branch(icr_value, delta_epsilon, packet, IcrBranch::Near)
}

pub fn infer_delay_on_branch(
    icr_value: f64,
    delta_epsilon: f64,
    packet: &SpectralPacket,
    branch: IcrBranch,
) -> Result<DelayEstimate, WmError> {
    if !(delta_epsilon != 0.0 && delta_epsilon.abs() < FRAC_PI_2) {
        return Err(invalid(
            "delta_epsilon",
            "must satisfy 0 < |delta_epsilon| < pi/2",
        ));
    }
    let min = -1.0 / delta_epsilon.tan().powi(2);
    if !(icr_value.is_finite() && icr_value >= min && icr_value <= 1.0) {
        return Err(WmError::OutOfBranch {
            icr: icr_value,
            min,
        });
    }
    // g runs from `min` at the trough to 1 at `delta_epsilon`.
    let quarter = FRAC_PI_2.copysign(delta_epsilon);
    let (mut trough, mut peak) = match branch {
        IcrBranch::Near => (delta_epsilon - quarter, delta_epsilon),
        IcrBranch::Far => (delta_epsilon + quarter, delta_epsilon),
    };
    for _ in 0..200 {
        let mid = 0.5 * (trough + peak);
        if mid == trough || mid == peak {
            break;
        }
        if icr_of_phase(mid, delta_epsilon) < icr_value {
            trough = mid;
        } else {
            peak = mid;
        }
    }
    let u = 0.5 * (trough + peak);
    Ok(DelayEstimate {
        delta_tau_s: u / packet.omega0,
        small_angle_delta_tau_s: icr_value * delta_epsilon / (2.0 * packet.omega0),
    })
}

/// `m = delta_tau S c / (C g l)`, the inverse of the pressure delay model.
pub fn mass_from_delay(delta_tau: f64, p: &PressureParams) -> f64 {
    delta_tau * p.contact_area_m2 * SPEED_OF_LIGHT
        / (p.stress_optic_per_pa * STANDARD_GRAVITY * p.pressed_length_m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmReading {
    pub applied_mass_kg: f64,
    pub applied_delta_tau_s: f64,
    pub i1: f64,
    pub i_d: f64,
    pub icr: f64,
    pub inferred_delta_tau: f64,
    pub small_angle_delta_tau: f64,
    pub inferred_mass: f64,
}

/// Relative intensity noise on photodetector readings. Each reading
/// averages `samples_per_reading` independent samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReadoutNoise {
    pub sigma_rel: f64,
    pub samples_per_reading: u32,
}

impl Default for ReadoutNoise {
    fn default() -> Self {
        Self {
            sigma_rel: 0.0019,
            samples_per_reading: 256,
        }
    }
}

fn read<R: Rng>(value: f64, noise: Option<&ReadoutNoise>, rng: &mut R) -> f64 {
    match noise {
        None => value,
        Some(n) => {
            let count = n.samples_per_reading.max(1);
            let sum: f64 = (0..count)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    value * (1.0 + n.sigma_rel * z)
                })
                .sum();
            sum / count as f64
        }
    }
}

/// Slow birefringence drift between the reference and disturbed readings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tau0Drift {
    /// Standard deviation of the `tau0` step taken during each reading (s).
    pub sigma_per_reading_s: f64,
}

/// Experiment-level settings for a pressure staircase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmSetup {
    pub channel: LoopChannel,
    pub packet: SpectralPacket,
    pub delta_bias: f64,
    pub i_in: f64,
    pub delta_epsilon: f64,
    /// Geometry and material of the pressed section; its mass is ignored.
    pub pressure: PressureParams,
    pub noise: Option<ReadoutNoise>,
    pub drift: Option<Tau0Drift>,
}

impl Default for WmSetup {
    fn default() -> Self {
        Self {
            channel: LoopChannel::default(),
            packet: SpectralPacket::default(),
            delta_bias: 0.0,
            i_in: 1e-3,
            delta_epsilon: 30f64.to_radians(),
            pressure: PressureParams::default(),
            noise: None,
            drift: None,
        }
    }
}

/// One reading of a load of `mass_kg` on the pressed section.
pub fn measure_mass<R: Rng>(
    setup: &WmSetup,
    mass_kg: f64,
    rng: &mut R,
) -> Result<(WmReading, f64), WmError> {
    let applied = pressure_delay(&PressureParams {
        mass_kg,
        ..setup.pressure
    });
    measure_delay(setup, applied, mass_kg, rng)
}

/// One reading: calibrate, take `I_1` at the offset, apply the delay, take
/// `I_d`, and invert. With drift enabled, `tau0` wanders by one step between
/// the two readings; the step taken is returned alongside the reading.
pub fn measure_delay<R: Rng>(
    setup: &WmSetup,
    applied_delta_tau: f64,
    applied_mass_kg: f64,
    rng: &mut R,
) -> Result<(WmReading, f64), WmError> {
    let channel = setup.channel.with_delta_tau(0.0);
    let cal = calibrate(&channel, &setup.packet, setup.delta_bias, setup.i_in)?;
    let drift = match setup.drift {
        Some(d) if d.sigma_per_reading_s > 0.0 => {
            let z: f64 = StandardNormal.sample(rng);
            d.sigma_per_reading_s * z
        }
        _ => 0.0,
    };
    let i1 = read(
        offset_intensity(&cal, setup.delta_epsilon, &setup.packet, &channel),
        setup.noise.as_ref(),
        rng,
    );
    let i_d = read(
        disturbed_intensity(
            &cal,
            setup.delta_epsilon,
            applied_delta_tau + drift,
            &setup.packet,
            &channel,
        ),
        setup.noise.as_ref(),
        rng,
    );
    let ratio = icr(i1, i_d, cal.i_min)?;
    let est = infer_delay(ratio, setup.delta_epsilon, &setup.packet)?;
    Ok((
        WmReading {
            applied_mass_kg,
            applied_delta_tau_s: applied_delta_tau,
            i1,
            i_d,
            icr: ratio,
            inferred_delta_tau: est.delta_tau_s,
            small_angle_delta_tau: est.small_angle_delta_tau_s,
            inferred_mass: mass_from_delay(est.delta_tau_s, &setup.pressure),
        },
        drift,
    ))
}

/// Readings for each mass in turn. Drift accumulates into `tau0` across
/// steps; each step re-nulls the analyzer first.
pub fn staircase<R: Rng>(
    setup: &WmSetup,
    masses_kg: &[f64],
    rng: &mut R,
) -> Result<Vec<WmReading>, WmError> {
    let mut current = *setup;
    let mut out = Vec::with_capacity(masses_kg.len());
    for &m in masses_kg {
        if !(m >= 0.0 && m.is_finite()) {
            return Err(invalid("mass_kg", format!("must be non-negative, got {m}")));
        }
        let (reading, drift) = measure_mass(&current, m, rng)?;
        current.channel.tau0_s = (current.channel.tau0_s + drift).max(0.0);
        out.push(reading);
    }
    Ok(out)
}
