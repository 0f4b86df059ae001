//! Closed-form polarization and path algebra of the Sagnac loop.
//!
//! A pulse prepared in `(|H> + |V>)/sqrt(2)` is split into clockwise and
//! counterclockwise paths, picks up the global phase difference (GPD)
//! `delta_delta` between the two directions and the birefringent
//! relative phase `omega0 * (tau0 + delta_tau)` between its polarization
//! components, and is post-selected at one of the two beam-splitter ports.
//!
//! Everything here is a pure function of immutable inputs.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Speed of light in vacuum (m/s), exact.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Vacuum wavelength of the shared laser source (m).
pub const DEFAULT_WAVELENGTH_M: f64 = 1550e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OpticsError {
    #[error("no signal: both output ports carry zero probability")]
    NoSignal,
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

/// Gaussian probe spectrum centred at `omega0` with standard deviation `sigma`.
///
/// `sigma == 0` is the monochromatic limit and is handled exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralPacket {
    pub omega0: f64,
    pub sigma: f64,
}

impl SpectralPacket {
    pub fn new(omega0: f64, sigma: f64) -> Result<Self, OpticsError> {
        if !(omega0.is_finite() && omega0 > 0.0) {
            return Err(OpticsError::Invalid {
                field: "omega0",
                reason: format!("must be positive, got {omega0}"),
            });
        }
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(OpticsError::Invalid {
                field: "sigma",
                reason: format!("must be non-negative, got {sigma}"),
            });
        }
        Ok(Self { omega0, sigma })
    }

    /// Packet for a vacuum wavelength `lambda` (m).
    pub fn from_wavelength(lambda: f64, sigma: f64) -> Result<Self, OpticsError> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(OpticsError::Invalid {
                field: "wavelength",
                reason: format!("must be positive, got {lambda}"),
            });
        }
        Self::new(2.0 * PI * SPEED_OF_LIGHT / lambda, sigma)
    }

    /// Spectral amplitude `f(omega)`, normalized so that `|f|^2` integrates to one.
    pub fn amplitude(&self, omega: f64) -> f64 {
        let d = omega - self.omega0;
        // |f|^2 has variance sigma^2 / 2, which makes its cos(2 d tau) moment
        // the coherence factor below.
        (PI * self.sigma * self.sigma).powf(-0.25)
            * (-d * d / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// Coherence factor `exp(-sigma^2 tau^2)`; exactly one when `sigma == 0`.
    pub fn coherence(&self, tau: f64) -> f64 {
        if self.sigma == 0.0 {
            1.0
        } else {
            let st = self.sigma * tau;
            (-st * st).exp()
        }
    }
}

impl Default for SpectralPacket {
    fn default() -> Self {
        Self {
            omega0: 2.0 * PI * SPEED_OF_LIGHT / DEFAULT_WAVELENGTH_M,
            sigma: 0.0,
        }
    }
}

/// Fiber loop state as seen by one round trip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopChannel {
    /// Total loop length (m).
    pub length_m: f64,
    pub refractive_index: f64,
    /// Intrinsic birefringence delay between H and V (s).
    pub tau0_s: f64,
    /// Disturbance-induced change of the birefringence delay (s).
    pub delta_tau_s: f64,
    /// Global phase difference between the two directions (rad).
    pub bias_gpd_rad: f64,
    /// Total one-pass loss (dB).
    pub loss_db: f64,
}

impl LoopChannel {
    pub fn validate(&self) -> Result<(), OpticsError> {
        let bad = |field, reason: String| Err(OpticsError::Invalid { field, reason });
        if !(self.length_m.is_finite() && self.length_m > 0.0) {
            return bad(
                "length_m",
                format!("must be positive, got {}", self.length_m),
            );
        }
        if !(self.refractive_index.is_finite() && self.refractive_index >= 1.0) {
            return bad(
                "refractive_index",
                format!("must be at least 1, got {}", self.refractive_index),
            );
        }
        if !(self.tau0_s.is_finite() && self.tau0_s >= 0.0) {
            return bad(
                "tau0_s",
                format!("must be non-negative, got {}", self.tau0_s),
            );
        }
        if !self.delta_tau_s.is_finite() {
            return bad("delta_tau_s", "must be finite".into());
        }
        if !self.bias_gpd_rad.is_finite() {
            return bad("bias_gpd_rad", "must be finite".into());
        }
        if !(self.loss_db.is_finite() && self.loss_db >= 0.0) {
            return bad(
                "loss_db",
                format!("must be non-negative, got {}", self.loss_db),
            );
        }
        Ok(())
    }

    /// `tau0 + delta_tau`.
    pub fn total_delay(&self) -> f64 {
        self.tau0_s + self.delta_tau_s
    }

    /// Linear one-pass transmittance.
    pub fn transmittance(&self) -> f64 {
        10f64.powf(-self.loss_db / 10.0)
    }

    pub fn with_delta_tau(mut self, delta_tau_s: f64) -> Self {
        self.delta_tau_s = delta_tau_s;
        self
    }

    pub fn with_bias(mut self, bias_gpd_rad: f64) -> Self {
        self.bias_gpd_rad = bias_gpd_rad;
        self
    }
}

impl Default for LoopChannel {
    fn default() -> Self {
        Self {
            length_m: 30_000.0,
            refractive_index: 1.468,
            tau0_s: 0.0,
            delta_tau_s: 0.0,
            bias_gpd_rad: 0.0,
            loss_db: 16.5,
        }
    }
}

/// Polarization analyzer setting `epsilon = epsilon0 + delta_epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostSelection {
    pub epsilon0: f64,
    pub delta_epsilon: f64,
}

impl PostSelection {
    pub fn new(epsilon0: f64, delta_epsilon: f64) -> Self {
        Self {
            epsilon0,
            delta_epsilon,
        }
    }

    pub fn at(epsilon: f64) -> Self {
        Self::new(epsilon, 0.0)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon0 + self.delta_epsilon
    }

    /// The analyzer setting that passes every photon in the monochromatic
    /// limit, i.e. the bright extremum of the post-selected intensity.
    pub fn bright(channel: &LoopChannel, packet: &SpectralPacket) -> Self {
        Self::at(relative_phase(channel, packet) - PI / 2.0)
    }
}

/// Post-selection success probability at each beam-splitter port.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortProbabilities {
    pub p_reflected: f64,
    pub p_transmitted: f64,
}

impl PortProbabilities {
    pub fn total(&self) -> f64 {
        self.p_reflected + self.p_transmitted
    }

    pub fn swapped(&self) -> Self {
        Self {
            p_reflected: self.p_transmitted,
            p_transmitted: self.p_reflected,
        }
    }
}

/// Interference visibility and the bit error rate it implies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Visibility {
    pub eta: f64,
    pub qber: f64,
}

/// Birefringent relative phase `omega0 * (tau0 + delta_tau)`.
pub fn relative_phase(channel: &LoopChannel, packet: &SpectralPacket) -> f64 {
    packet.omega0 * channel.total_delay()
}

/// Common factor `1 - exp(-sigma^2 tau^2) cos[2 (phi - epsilon)]` shared by both ports.
fn polarization_factor(channel: &LoopChannel, packet: &SpectralPacket, ps: &PostSelection) -> f64 {
    let phi = relative_phase(channel, packet);
    let coherence = packet.coherence(channel.total_delay());
    1.0 - coherence * (2.0 * (phi - ps.epsilon())).cos()
}

/// Port probabilities after path and polarization post-selection.
pub fn post_selection_probabilities(
    channel: &LoopChannel,
    packet: &SpectralPacket,
    ps: &PostSelection,
) -> PortProbabilities {
    let pol = polarization_factor(channel, packet, ps);
    let c = channel.bias_gpd_rad.cos();
    PortProbabilities {
        p_reflected: 0.25 * (1.0 + c) * pol,
        p_transmitted: 0.25 * (1.0 - c) * pol,
    }
}

/// Port probabilities with a transparent polarization analyzer.
///
/// This is the bright-analyzer limit of [`post_selection_probabilities`] for a
/// monochromatic packet and is what the key-distribution rounds see.
pub fn interference_probabilities(delta_delta: f64) -> PortProbabilities {
    let c = delta_delta.cos();
    PortProbabilities {
        p_reflected: 0.5 * (1.0 + c),
        p_transmitted: 0.5 * (1.0 - c),
    }
}

/// Visibility `(P_R - P_T)/(P_R + P_T)` and `QBER = (1 - eta)/2`.
pub fn visibility_and_qber(p: &PortProbabilities) -> Result<Visibility, OpticsError> {
    let total = p.total();
    if !(total > 0.0) {
        return Err(OpticsError::NoSignal);
    }
    let eta = (p.p_reflected - p.p_transmitted) / total;
    Ok(Visibility {
        eta,
        qber: (1.0 - eta) / 2.0,
    })
}

/// Reduce a phase onto `[0, period)`. Only used at comparison boundaries.
pub fn wrap_phase(phase: f64, period: f64) -> f64 {
    let r = phase.rem_euclid(period);
    if r >= period {
        0.0
    } else {
        r
    }
}

/// Distance between two phases on a circle of the given period.
pub fn phase_distance(a: f64, b: f64, period: f64) -> f64 {
    let d = wrap_phase(a - b, period);
    d.min(period - d)
}
