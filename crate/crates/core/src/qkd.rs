//! Phase-encoded, time-division BB84 over the simulated loop.
//!
//! Alice modulates one direction and Bob the other; the key bit is carried
//! by the global phase difference they jointly set and read out by which
//! beam-splitter port clicks. Key rounds see the polarization analyzer as
//! transparent, so only the interference term of the port probabilities
//! matters here.

use crate::optics::{interference_probabilities, phase_distance, LoopChannel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Default abort threshold on the windowed QBER.
pub const DEFAULT_QBER_THRESHOLD: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QkdError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("insufficient data: window has no sifted bits")]
    InsufficientData,
    #[error("calibration failed: {0}")]
    Calibration(String),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> QkdError {
    QkdError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasisBit {
    pub basis: Basis,
    pub bit: bool,
}

impl BasisBit {
    pub const ALL: [BasisBit; 4] = [
        BasisBit::new(Basis::Z, false),
        BasisBit::new(Basis::Z, true),
        BasisBit::new(Basis::X, false),
        BasisBit::new(Basis::X, true),
    ];

    pub const fn new(basis: Basis, bit: bool) -> Self {
        Self { basis, bit }
    }
}

/// Modulator phase for a basis/bit choice: Z carries `{0, pi}`, X carries `{pi/2, 3pi/2}`.
pub fn encode(choice: BasisBit) -> f64 {
    let base = match choice.basis {
        Basis::Z => 0.0,
        Basis::X => PI / 2.0,
    };
    if choice.bit {
        base + PI
    } else {
        base
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub efficiency: f64,
    pub dark_count_prob_per_gate: f64,
    pub gate_width_s: f64,
    pub repetition_rate_hz: f64,
}

impl DetectorModel {
    pub fn validate(&self) -> Result<(), QkdError> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(invalid(
                "efficiency",
                format!("must lie in [0, 1], got {}", self.efficiency),
            ));
        }
        if !(self.dark_count_prob_per_gate >= 0.0 && self.dark_count_prob_per_gate <= 1.0) {
            return Err(invalid(
                "dark_count_prob_per_gate",
                format!("must lie in [0, 1], got {}", self.dark_count_prob_per_gate),
            ));
        }
        if !(self.repetition_rate_hz > 0.0) {
            return Err(invalid("repetition_rate_hz", "must be positive"));
        }
        Ok(())
    }
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            efficiency: 0.2,
            dark_count_prob_per_gate: 0.0,
            gate_width_s: 2e-9,
            repetition_rate_hz: 100e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceModel {
    pub mean_photon_number: f64,
    pub pulse_rate_hz: f64,
    pub pulse_width_s: f64,
}

impl SourceModel {
    pub fn validate(&self) -> Result<(), QkdError> {
        if !(self.mean_photon_number > 0.0 && self.mean_photon_number.is_finite()) {
            return Err(invalid("mean_photon_number", "must be positive"));
        }
        if !(self.pulse_rate_hz > 0.0 && self.pulse_rate_hz.is_finite()) {
            return Err(invalid("pulse_rate_hz", "must be positive"));
        }
        Ok(())
    }
}

impl Default for SourceModel {
    fn default() -> Self {
        Self {
            mean_photon_number: 0.1,
            pulse_rate_hz: 100e6,
            pulse_width_s: 2e-9,
        }
    }
}

/// Per-gate click probability at each port.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickProbabilities {
    pub reflected: f64,
    pub transmitted: f64,
}

fn click_probabilities_at(
    delta_delta: f64,
    source: &SourceModel,
    channel: &LoopChannel,
    detector: &DetectorModel,
) -> ClickProbabilities {
    let ports = interference_probabilities(delta_delta);
    let flux = source.mean_photon_number * channel.transmittance() * detector.efficiency;
    let dark = detector.dark_count_prob_per_gate;
    let click = |p: f64| (-(-flux * p).exp_m1() + dark).min(1.0);
    ClickProbabilities {
        reflected: click(ports.p_reflected),
        transmitted: click(ports.p_transmitted),
    }
}

/// Click probability per gate for a Poissonian source through the loop:
/// `1 - exp(-mu T eta P_port) + p_dark` at `delta_delta = alice - bob`.
pub fn click_probabilities(
    alice_phase: f64,
    bob_phase: f64,
    source: &SourceModel,
    channel: &LoopChannel,
    detector: &DetectorModel,
) -> ClickProbabilities {
    click_probabilities_at(alice_phase - bob_phase, source, channel, detector)
}

/// How modulator phases are chosen round by round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "plan", rename_all = "snake_case")]
pub enum PhasePlan {
    /// Uniformly random basis and bit for Alice, random basis for Bob.
    Bb84,
    /// Every round uses the same global phase difference (diagnostic).
    FixedGpd { delta_delta_rad: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub window_s: f64,
    /// Pulses actually simulated per window; rates are scaled up to the
    /// source repetition rate.
    pub pulses_per_window: u64,
    /// Standard deviation of the Gaussian error on the applied GPD (rad).
    pub phase_jitter_rad: f64,
    pub plan: PhasePlan,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            window_s: 1.0,
            pulses_per_window: 1_000_000,
            phase_jitter_rad: 0.0,
            plan: PhasePlan::Bb84,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), QkdError> {
        if !(self.window_s > 0.0 && self.window_s.is_finite()) {
            return Err(invalid("window_s", "must be positive"));
        }
        if self.pulses_per_window == 0 {
            return Err(invalid("pulses_per_window", "must be at least 1"));
        }
        if !(self.phase_jitter_rad >= 0.0 && self.phase_jitter_rad.is_finite()) {
            return Err(invalid("phase_jitter_rad", "must be non-negative"));
        }
        Ok(())
    }
}

/// Everything a key session needs besides its seed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QkdSetup {
    pub source: SourceModel,
    pub detector: DetectorModel,
    pub channel: LoopChannel,
    pub session: SessionConfig,
}

impl QkdSetup {
    pub fn validate(&self) -> Result<(), QkdError> {
        self.source.validate()?;
        self.detector.validate()?;
        self.session.validate()?;
        self.channel
            .validate()
            .map_err(|e| invalid("channel", e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiftedKeyRecord {
    pub window_start_s: f64,
    pub pulses_sent: u64,
    /// Single-click rounds at each port, over all rounds.
    pub clicks_reflected: u64,
    pub clicks_transmitted: u64,
    pub double_clicks: u64,
    pub sifted_bits: u64,
    pub errors: u64,
    /// `errors / sifted_bits`, absent when nothing was sifted.
    pub qber_estimate: Option<f64>,
    /// Sifted bits per second at the source repetition rate.
    pub raw_rate_bps: f64,
}

impl SiftedKeyRecord {
    /// Port-resolved error rate `T / (R + T)` over all single clicks.
    pub fn port_qber(&self) -> Option<f64> {
        let total = self.clicks_reflected + self.clicks_transmitted;
        (total > 0).then(|| self.clicks_transmitted as f64 / total as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Detection {
    None,
    Reflected,
    Transmitted,
    Double,
}

/// One simulated round, for audit replays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub time_s: f64,
    pub alice: BasisBit,
    pub bob_basis: Basis,
    pub bases_match: bool,
    pub detection: Detection,
    pub sifted: bool,
    pub bob_bit: Option<bool>,
}

/// Outcome of a QBER threshold check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BreachCheck {
    Nominal,
    Breach,
    InsufficientData,
}

/// Strict comparison `qber > threshold`; a tie is not a breach.
pub fn qber_threshold_check(record: &SiftedKeyRecord, threshold: f64) -> BreachCheck {
    match record.qber_estimate {
        None => BreachCheck::InsufficientData,
        Some(q) if q > threshold => BreachCheck::Breach,
        Some(_) => BreachCheck::Nominal,
    }
}

/// A running key session. Windows are simulated back to back from a single
/// per-session RNG stream, so the record sequence depends only on the seed.
pub struct QkdSession {
    setup: QkdSetup,
    rng: ChaCha8Rng,
    next_window_start: f64,
}

impl QkdSession {
    pub fn new(setup: QkdSetup, seed: u64) -> Result<Self, QkdError> {
        setup.validate()?;
        Ok(Self {
            setup,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_window_start: 0.0,
        })
    }

    pub fn setup(&self) -> &QkdSetup {
        &self.setup
    }

    pub fn next_window_start(&self) -> f64 {
        self.next_window_start
    }

    /// Skip ahead in simulated time without generating pulses.
    pub fn seek(&mut self, t: f64) {
        self.next_window_start = t;
    }

    /// Simulate the next window with no disturbance.
    pub fn next_window(&mut self) -> SiftedKeyRecord {
        self.next_window_with(&|_| 0.0, None)
    }

    /// Simulate the next window; `extra_gpd(t)` is added to the modulator
    /// phase difference of a round at time `t`, and every round is passed
    /// to `observe` when given.
    pub fn next_window_with(
        &mut self,
        extra_gpd: &dyn Fn(f64) -> f64,
        mut observe: Option<&mut dyn FnMut(&Round)>,
    ) -> SiftedKeyRecord {
        let QkdSetup {
            source,
            detector,
            channel,
            session,
        } = self.setup;
        let start = self.next_window_start;
        let n = session.pulses_per_window;
        let dt = session.window_s / n as f64;
        let click_bound = source.mean_photon_number * channel.transmittance() * detector.efficiency
            + 2.0 * detector.dark_count_prob_per_gate;
        let mut rec = SiftedKeyRecord {
            window_start_s: start,
            pulses_sent: n,
            clicks_reflected: 0,
            clicks_transmitted: 0,
            double_clicks: 0,
            sifted_bits: 0,
            errors: 0,
            qber_estimate: None,
            raw_rate_bps: 0.0,
        };

        // Three choice bits per round, 21 rounds per draw.
        let mut choice_bits: u64 = 0;
        let mut bits_left = 0;
        for j in 0..n {
            let t = start + j as f64 * dt;
            let (alice, bob_basis, alice_phase, bob_phase, bases_match) = match session.plan {
                PhasePlan::Bb84 => {
                    if bits_left == 0 {
                        choice_bits = self.rng.random();
                        bits_left = 21;
                    }
                    let draw = choice_bits as u8;
                    choice_bits >>= 3;
                    bits_left -= 1;
                    let alice = BasisBit::new(
                        if draw & 1 == 0 { Basis::Z } else { Basis::X },
                        draw & 2 != 0,
                    );
                    let bob_basis = if draw & 4 == 0 { Basis::Z } else { Basis::X };
                    let bob_phase = encode(BasisBit::new(bob_basis, false));
                    (
                        alice,
                        bob_basis,
                        encode(alice),
                        bob_phase,
                        alice.basis == bob_basis,
                    )
                }
                PhasePlan::FixedGpd { delta_delta_rad } => {
                    let bit = phase_distance(delta_delta_rad, PI, 2.0 * PI) < 1e-9;
                    let matched = phase_distance(delta_delta_rad, 0.0, PI) < 1e-9;
                    (
                        BasisBit::new(Basis::Z, bit),
                        Basis::Z,
                        delta_delta_rad,
                        0.0,
                        matched,
                    )
                }
            };

            // P(any click) <= mu T eta + 2 p_dark at every phase, so most
            // rounds are settled by one uniform before the phase is evaluated.
            let u: f64 = self.rng.random();
            let detection = if u >= click_bound {
                Detection::None
            } else {
                let mut gpd = alice_phase - bob_phase + extra_gpd(t);
                if session.phase_jitter_rad > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    gpd += session.phase_jitter_rad * z;
                }
                let probs = click_probabilities_at(gpd, &source, &channel, &detector);
                let (pr, pt) = (probs.reflected, probs.transmitted);
                let r_only = pr * (1.0 - pt);
                let t_only = pt * (1.0 - pr);
                if u < r_only {
                    Detection::Reflected
                } else if u < r_only + t_only {
                    Detection::Transmitted
                } else if u < r_only + t_only + pr * pt {
                    Detection::Double
                } else {
                    Detection::None
                }
            };
            let bob_bit = match detection {
                Detection::Reflected => {
                    rec.clicks_reflected += 1;
                    Some(false)
                }
                Detection::Transmitted => {
                    rec.clicks_transmitted += 1;
                    Some(true)
                }
                Detection::Double => {
                    rec.double_clicks += 1;
                    None
                }
                Detection::None => None,
            };
            let sifted = bases_match && bob_bit.is_some();
            if sifted {
                rec.sifted_bits += 1;
                if bob_bit != Some(alice.bit) {
                    rec.errors += 1;
                }
            }
            if let Some(observe) = observe.as_mut() {
                observe(&Round {
                    time_s: t,
                    alice,
                    bob_basis,
                    bases_match,
                    detection,
                    sifted,
                    bob_bit,
                });
            }
        }

        if rec.sifted_bits > 0 {
            rec.qber_estimate = Some(rec.errors as f64 / rec.sifted_bits as f64);
        }
        rec.raw_rate_bps = rec.sifted_bits as f64 / n as f64 * source.pulse_rate_hz;
        self.next_window_start = start + session.window_s;
        rec
    }
}

/// Run an undisturbed session of `duration_s`, one record per window.
pub fn run_session(
    duration_s: f64,
    seed: u64,
    setup: &QkdSetup,
) -> Result<Vec<SiftedKeyRecord>, QkdError> {
    run_session_with(duration_s, seed, setup, &|_| 0.0)
}

/// As [`run_session`], with a time-dependent GPD disturbance.
pub fn run_session_with(
    duration_s: f64,
    seed: u64,
    setup: &QkdSetup,
    extra_gpd: &dyn Fn(f64) -> f64,
) -> Result<Vec<SiftedKeyRecord>, QkdError> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(invalid("duration_s", "must be positive"));
    }
    let mut session = QkdSession::new(*setup, seed)?;
    let windows = (duration_s / setup.session.window_s).ceil() as usize;
    Ok((0..windows)
        .map(|_| session.next_window_with(extra_gpd, None))
        .collect())
}

/// Aggregate of a record sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub windows: usize,
    pub pulses_sent: u64,
    pub sifted_bits: u64,
    pub errors: u64,
    pub mean_raw_rate_bps: f64,
    /// Pooled `errors / sifted_bits`.
    pub pooled_qber: Option<f64>,
    /// Mean of the per-window estimates that exist.
    pub mean_window_qber: Option<f64>,
}

pub fn summarize(records: &[SiftedKeyRecord]) -> SessionSummary {
    let sifted: u64 = records.iter().map(|r| r.sifted_bits).sum();
    let errors: u64 = records.iter().map(|r| r.errors).sum();
    let qbers: Vec<f64> = records.iter().filter_map(|r| r.qber_estimate).collect();
    SessionSummary {
        windows: records.len(),
        pulses_sent: records.iter().map(|r| r.pulses_sent).sum(),
        sifted_bits: sifted,
        errors,
        mean_raw_rate_bps: if records.is_empty() {
            0.0
        } else {
            records.iter().map(|r| r.raw_rate_bps).sum::<f64>() / records.len() as f64
        },
        pooled_qber: (sifted > 0).then(|| errors as f64 / sifted as f64),
        mean_window_qber: (!qbers.is_empty())
            .then(|| qbers.iter().sum::<f64>() / qbers.len() as f64),
    }
}

/// Expected raw key rate and QBER for the BB84 plan, averaging the click
/// model over the Gaussian phase jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub raw_rate_bps: f64,
    pub qber: f64,
}

pub fn expected_operating_point(
    source: &SourceModel,
    channel: &LoopChannel,
    detector: &DetectorModel,
    phase_jitter_rad: f64,
) -> OperatingPoint {
    // Matched-basis round carrying bit 0; bit 1 is the mirror image.
    let single = |phi: f64| {
        let p = click_probabilities_at(phi, source, channel, detector);
        (
            p.reflected * (1.0 - p.transmitted),
            p.transmitted * (1.0 - p.reflected),
        )
    };
    let (good, bad) = if phase_jitter_rad == 0.0 {
        single(0.0)
    } else {
        // Simpson over +-8 sigma.
        let n = 800;
        let h = 16.0 * phase_jitter_rad / n as f64;
        let norm = 1.0 / (phase_jitter_rad * (2.0 * PI).sqrt());
        let (mut g, mut b) = (0.0, 0.0);
        for i in 0..=n {
            let phi = -8.0 * phase_jitter_rad + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let pdf = norm * (-0.5 * (phi / phase_jitter_rad).powi(2)).exp();
            let (sg, sb) = single(phi);
            g += w * pdf * sg;
            b += w * pdf * sb;
        }
        (g * h / 3.0, b * h / 3.0)
    };
    OperatingPoint {
        raw_rate_bps: 0.5 * (good + bad) * source.pulse_rate_hz,
        qber: bad / (good + bad),
    }
}

/// Detector dark-count probability and modulator phase jitter that together
/// put the expected operating point on the requested rate and QBER.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalibration {
    pub dark_count_prob_per_gate: f64,
    pub phase_jitter_rad: f64,
    pub expected: OperatingPoint,
}

pub fn calibrate_operating_point(
    target_rate_bps: f64,
    target_qber: f64,
    source: &SourceModel,
    channel: &LoopChannel,
    detector: &DetectorModel,
) -> Result<NoiseCalibration, QkdError> {
    if !(target_qber > 0.0 && target_qber < 0.5) {
        return Err(QkdError::Calibration(format!(
            "target QBER {target_qber} outside (0, 0.5)"
        )));
    }
    let with_dark = |d: f64| DetectorModel {
        dark_count_prob_per_gate: d,
        ..*detector
    };
    let rate_at =
        |d: f64, j: f64| expected_operating_point(source, channel, &with_dark(d), j).raw_rate_bps;
    let floor = rate_at(0.0, 0.0);
    if floor > target_rate_bps {
        return Err(QkdError::Calibration(format!(
            "dark-free rate {floor:.1} bps already exceeds the {target_rate_bps} bps target"
        )));
    }
    let bisect = |mut lo: f64, mut hi: f64, f: &dyn Fn(f64) -> f64| {
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    // Clicks are insensitive to jitter to first order, QBER rises with both.
    let dark_for = |j: f64| bisect(0.0, 0.05, &|d| rate_at(d, j) - target_rate_bps);
    let qber_at = |j: f64| {
        let d = dark_for(j);
        expected_operating_point(source, channel, &with_dark(d), j).qber
    };
    if qber_at(0.0) > target_qber {
        return Err(QkdError::Calibration(
            "dark counts alone already exceed the target QBER".into(),
        ));
    }
    let jitter = bisect(0.0, 1.5, &|j| qber_at(j) - target_qber);
    let dark = dark_for(jitter);
    Ok(NoiseCalibration {
        dark_count_prob_per_gate: dark,
        phase_jitter_rad: jitter,
        expected: expected_operating_point(source, channel, &with_dark(dark), jitter),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ideal() -> QkdSetup {
        QkdSetup {
            channel: LoopChannel {
                loss_db: 0.0,
                ..LoopChannel::default()
            },
            detector: DetectorModel {
                efficiency: 1.0,
                ..DetectorModel::default()
            },
            session: SessionConfig {
                pulses_per_window: 20_000,
                ..SessionConfig::default()
            },
            ..QkdSetup::default()
        }
    }

    #[test]
    fn encoding_table() {
        assert_eq!(encode(BasisBit::new(Basis::Z, false)), 0.0);
        assert_eq!(encode(BasisBit::new(Basis::Z, true)), PI);
        assert_eq!(encode(BasisBit::new(Basis::X, false)), PI / 2.0);
        assert_eq!(encode(BasisBit::new(Basis::X, true)), 3.0 * PI / 2.0);
        let mut phases: Vec<f64> = BasisBit::ALL.iter().map(|&c| encode(c)).collect();
        phases.dedup();
        assert_eq!(phases.len(), 4);
    }

    #[test]
    fn click_examples() {
        let setup = ideal();
        let p = click_probabilities(0.0, 0.0, &setup.source, &setup.channel, &setup.detector);
        assert_eq!(p.transmitted, 0.0);

        let ch = LoopChannel::default();
        let p = click_probabilities(
            0.0,
            0.0,
            &SourceModel::default(),
            &ch,
            &DetectorModel::default(),
        );
        // 1 - exp(-0.1 * 10^-1.65 * 0.2)
        assert_relative_eq!(p.reflected, 4.476_440_052_255_14e-4, max_relative = 1e-12);
        assert_eq!(p.transmitted, 0.0);

        let vacuum = SourceModel {
            mean_photon_number: 1e-300,
            ..SourceModel::default()
        };
        let det = DetectorModel {
            dark_count_prob_per_gate: 3e-6,
            ..DetectorModel::default()
        };
        let p = click_probabilities(0.3, 1.2, &vacuum, &ch, &det);
        assert_relative_eq!(p.reflected, 3e-6, max_relative = 1e-12);
        assert_relative_eq!(p.transmitted, 3e-6, max_relative = 1e-12);
    }

    #[test]
    fn threshold_rule_is_strict() {
        let mut rec = SiftedKeyRecord {
            window_start_s: 0.0,
            pulses_sent: 1,
            clicks_reflected: 0,
            clicks_transmitted: 0,
            double_clicks: 0,
            sifted_bits: 1,
            errors: 0,
            qber_estimate: Some(0.047),
            raw_rate_bps: 0.0,
        };
        assert_eq!(qber_threshold_check(&rec, 0.08), BreachCheck::Nominal);
        rec.qber_estimate = Some(0.30);
        assert_eq!(qber_threshold_check(&rec, 0.08), BreachCheck::Breach);
        rec.qber_estimate = Some(0.08);
        assert_eq!(qber_threshold_check(&rec, 0.08), BreachCheck::Nominal);
        rec.qber_estimate = None;
        assert_eq!(
            qber_threshold_check(&rec, 0.08),
            BreachCheck::InsufficientData
        );
    }

    #[test]
    fn noise_free_channel_has_zero_qber() {
        let records = run_session(3.0, 1, &ideal()).unwrap();
        assert_eq!(records.len(), 3);
        for r in &records {
            assert_eq!(r.errors, 0);
            assert_eq!(r.qber_estimate, Some(0.0));
            assert!(r.sifted_bits > 0);
        }
    }

    #[test]
    fn orthogonal_gpd_sifts_nothing() {
        let mut setup = ideal();
        setup.session.plan = PhasePlan::FixedGpd {
            delta_delta_rad: PI / 2.0,
        };
        let records = run_session(2.0, 9, &setup).unwrap();
        for r in &records {
            assert_eq!(r.sifted_bits, 0);
            assert_eq!(r.qber_estimate, None);
            assert!(r.clicks_reflected > 0 && r.clicks_transmitted > 0);
        }
    }

    #[test]
    fn sessions_are_deterministic() {
        let mut setup = QkdSetup::default();
        setup.session.pulses_per_window = 50_000;
        setup.session.phase_jitter_rad = 0.3;
        setup.detector.dark_count_prob_per_gate = 1e-4;
        let a = run_session(4.0, 77, &setup).unwrap();
        let b = run_session(4.0, 77, &setup).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = run_session(4.0, 78, &setup).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sifted_bits_come_from_matched_rounds() {
        let mut setup = QkdSetup::default();
        setup.channel.loss_db = 3.0;
        setup.detector.dark_count_prob_per_gate = 2e-3;
        setup.session.pulses_per_window = 100_000;
        let mut session = QkdSession::new(setup, 5).unwrap();
        let mut log = Vec::new();
        let rec = session.next_window_with(&|_| 0.0, Some(&mut |r: &Round| log.push(*r)));
        assert_eq!(log.len() as u64, rec.pulses_sent);
        let mut sifted = 0;
        let mut errors = 0;
        for round in &log {
            assert_eq!(round.bases_match, round.alice.basis == round.bob_basis);
            if round.sifted {
                assert!(round.bases_match);
                assert!(matches!(
                    round.detection,
                    Detection::Reflected | Detection::Transmitted
                ));
                sifted += 1;
                if round.bob_bit != Some(round.alice.bit) {
                    errors += 1;
                }
            }
        }
        assert_eq!(sifted, rec.sifted_bits);
        assert_eq!(errors, rec.errors);
        assert!(rec.double_clicks > 0);
    }

    #[test]
    fn rate_is_monotone_in_loss_and_mu() {
        let mut setup = QkdSetup::default();
        setup.session.pulses_per_window = 1_000_000;
        setup.detector.efficiency = 1.0;
        let rate = |loss: f64, mu: f64| {
            let mut s = setup;
            s.channel.loss_db = loss;
            s.source.mean_photon_number = mu;
            summarize(&run_session(2.0, 3, &s).unwrap()).mean_raw_rate_bps
        };
        let by_loss: Vec<f64> = [0.0, 3.0, 6.0, 10.0]
            .iter()
            .map(|&l| rate(l, 0.1))
            .collect();
        assert!(by_loss.windows(2).all(|w| w[0] >= w[1]), "{by_loss:?}");
        let by_mu: Vec<f64> = [0.02, 0.05, 0.1, 0.3]
            .iter()
            .map(|&m| rate(3.0, m))
            .collect();
        assert!(by_mu.windows(2).all(|w| w[0] <= w[1]), "{by_mu:?}");
    }

    #[test]
    fn dark_counts_dominate_at_huge_loss() {
        let mut setup = QkdSetup::default();
        setup.channel.loss_db = 300.0;
        setup.detector.dark_count_prob_per_gate = 1e-3;
        setup.session.pulses_per_window = 1_000_000;
        let s = summarize(&run_session(1.0, 11, &setup).unwrap());
        let q = s.pooled_qber.unwrap();
        let sigma = (0.25 / s.sifted_bits as f64).sqrt();
        assert!(
            (q - 0.5).abs() < 4.0 * sigma,
            "qber {q} sifted {}",
            s.sifted_bits
        );
    }

    #[test]
    fn expected_point_matches_closed_form_without_jitter() {
        let det = DetectorModel {
            dark_count_prob_per_gate: 1e-5,
            ..DetectorModel::default()
        };
        let op =
            expected_operating_point(&SourceModel::default(), &LoopChannel::default(), &det, 0.0);
        let s = 4.476_440_052_255_14e-4 + 1e-5;
        let good = s * (1.0 - 1e-5);
        let bad = 1e-5 * (1.0 - s);
        assert_relative_eq!(
            op.raw_rate_bps,
            0.5 * (good + bad) * 100e6,
            max_relative = 1e-10
        );
        assert_relative_eq!(op.qber, bad / (good + bad), max_relative = 1e-10);
    }

    #[test]
    fn calibration_hits_targets() {
        let cal = calibrate_operating_point(
            22_400.0,
            0.0476,
            &SourceModel::default(),
            &LoopChannel::default(),
            &DetectorModel::default(),
        )
        .unwrap();
        assert_relative_eq!(cal.expected.raw_rate_bps, 22_400.0, max_relative = 1e-6);
        assert_relative_eq!(cal.expected.qber, 0.0476, max_relative = 1e-6);
        assert!(cal.dark_count_prob_per_gate > 0.0 && cal.dark_count_prob_per_gate < 1e-6);
        assert!(cal.phase_jitter_rad > 0.3 && cal.phase_jitter_rad < 0.6);
    }
}
