//! Disturbance waveforms injected into the loop.
//!
//! Dynamic disturbances (a PZT sinusoid or a transient mass impact) act on
//! the global phase of whichever direction crosses the disturbed segment.
//! A quasi-static pressure instead shifts the birefringence delay, which both
//! directions see identically.

use crate::optics::SPEED_OF_LIGHT;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Standard gravity (m/s^2).
pub const STANDARD_GRAVITY: f64 = 9.806_65;

/// Support of the smoothed impact profile, in units of its width.
const IMPACT_SUPPORT_WIDTHS: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PztParams {
    pub drive_amplitude_v: f64,
    pub angular_frequency_rad_per_s: f64,
    /// Lumped voltage-to-phase transfer (rad/V).
    pub phase_gain_rad_per_v: f64,
}

impl PztParams {
    /// Peak phase excursion (rad).
    pub fn amplitude(&self) -> f64 {
        self.phase_gain_rad_per_v * self.drive_amplitude_v
    }

    pub fn frequency_hz(&self) -> f64 {
        self.angular_frequency_rad_per_s / (2.0 * PI)
    }

    pub fn with_frequency_hz(mut self, f: f64) -> Self {
        self.angular_frequency_rad_per_s = 2.0 * PI * f;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpactParams {
    pub mass_kg: f64,
    pub drop_height_m: f64,
    /// Standard deviation of the smoothed delta profile (s).
    pub effective_width_s: f64,
    /// Lumped momentum-to-phase transfer (rad per kg m/s).
    pub impact_gain_rad_per_kg_m_per_s: f64,
}

impl ImpactParams {
    /// Peak phase `gain * m * sqrt(2 g h)`.
    pub fn amplitude(&self) -> f64 {
        self.impact_gain_rad_per_kg_m_per_s
            * self.mass_kg
            * (2.0 * STANDARD_GRAVITY * self.drop_height_m).sqrt()
    }

    /// Frequency at which the impact spectrum has dropped 40 dB in power.
    pub fn bandwidth_hz(&self) -> f64 {
        (2.0 * 100f64.ln()).sqrt() / (2.0 * PI * self.effective_width_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PressureParams {
    pub mass_kg: f64,
    pub pressed_length_m: f64,
    pub contact_area_m2: f64,
    /// Stress-optic coefficient, index change per unit stress (1/Pa).
    pub stress_optic_per_pa: f64,
}

impl Default for PressureParams {
    fn default() -> Self {
        Self {
            mass_kg: 0.1,
            pressed_length_m: 0.1,
            contact_area_m2: 1e-4,
            stress_optic_per_pa: 3e-12,
        }
    }
}

/// Kind-specific disturbance parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceKind {
    PztSinusoid(PztParams),
    TransientImpact(ImpactParams),
    QuasiStaticPressure(PressureParams),
}

/// A single disturbance applied at `position_m` along the loop, measured
/// from the beam splitter in the clockwise direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceEvent {
    pub position_m: f64,
    pub start_time_s: f64,
    #[serde(flatten)]
    pub kind: DisturbanceKind,
}

impl DisturbanceEvent {
    pub fn new(position_m: f64, start_time_s: f64, kind: DisturbanceKind) -> Self {
        Self {
            position_m,
            start_time_s,
            kind,
        }
    }

    pub fn is_dynamic(&self) -> bool {
        !matches!(self.kind, DisturbanceKind::QuasiStaticPressure(_))
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            DisturbanceKind::PztSinusoid(_) => "pzt_sinusoid",
            DisturbanceKind::TransientImpact(_) => "transient_impact",
            DisturbanceKind::QuasiStaticPressure(_) => "quasi_static_pressure",
        }
    }

    /// Phase imparted on a beam crossing the disturbed segment at time `t`.
    /// Zero for quasi-static events, which carry no global phase.
    pub fn phase_at(&self, t: f64) -> f64 {
        match &self.kind {
            DisturbanceKind::PztSinusoid(p) => {
                if t < self.start_time_s {
                    0.0
                } else {
                    pzt_phase(t - self.start_time_s, p)
                }
            }
            DisturbanceKind::TransientImpact(p) => impact_phase(t, self.start_time_s, p),
            DisturbanceKind::QuasiStaticPressure(_) => 0.0,
        }
    }

    /// Birefringence delay added at time `t`; nonzero only for pressure events.
    pub fn delay_at(&self, t: f64) -> f64 {
        match &self.kind {
            DisturbanceKind::QuasiStaticPressure(p) if t >= self.start_time_s => pressure_delay(p),
            _ => 0.0,
        }
    }

    /// Highest frequency the waveform carries appreciable power at (Hz).
    pub fn highest_frequency_hz(&self) -> f64 {
        match &self.kind {
            DisturbanceKind::PztSinusoid(p) => p.frequency_hz(),
            DisturbanceKind::TransientImpact(p) => p.bandwidth_hz(),
            DisturbanceKind::QuasiStaticPressure(_) => 0.0,
        }
    }
}

/// PZT phase `gain * V0 * sin(omega_s t)`.
pub fn pzt_phase(t: f64, p: &PztParams) -> f64 {
    p.amplitude() * (p.angular_frequency_rad_per_s * t).sin()
}

/// Impact phase: a unit-peak Gaussian of width `w` centred on `t0`, scaled by
/// the impact amplitude and truncated to zero beyond six widths.
pub fn impact_phase(t: f64, t0: f64, p: &ImpactParams) -> f64 {
    let s = (t - t0) / p.effective_width_s;
    if s.abs() > IMPACT_SUPPORT_WIDTHS {
        return 0.0;
    }
    p.amplitude() * (-0.5 * s * s).exp()
}

/// Birefringence delay from a mass resting on a fiber section: index change
/// `C * m g / S` accumulated over the pressed length, divided by `c`.
pub fn pressure_delay(p: &PressureParams) -> f64 {
    let stress = p.mass_kg * STANDARD_GRAVITY / p.contact_area_m2;
    p.stress_optic_per_pa * stress * p.pressed_length_m / SPEED_OF_LIGHT
}
