//! Scenario configuration in TOML.
//!
//! Every physical quantity carries its unit in the key name and is used as
//! given. Parsing collects every problem in the file before failing, so a
//! broken config is reported in one pass.
//!
//! ```toml
//! seed = 7
//! duration_s = 40.0
//!
//! [channel]
//! length_m = 30000.0
//!
//! [[disturbance]]
//! kind = "pzt_sinusoid"
//! position_m = 5000.0
//! start_time_s = 3.0
//! frequency_hz = 5000.0
//! ```

use crate::controller::{PerceptionSetup, ScenarioScript, WmPollSetup};
use crate::disturbance::{
    DisturbanceEvent, DisturbanceKind, ImpactParams, PressureParams, PztParams,
};
use crate::optics::{LoopChannel, SpectralPacket, SPEED_OF_LIGHT};
use crate::perception::{NullSettings, SweepSettings, TraceSettings};
use crate::qkd::{
    calibrate_operating_point, DetectorModel, NoiseCalibration, PhasePlan, QkdSetup, SessionConfig,
    SourceModel, DEFAULT_QBER_THRESHOLD,
};
use crate::wm::{ReadoutNoise, Tau0Drift, WmSetup};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationKind {
    UnknownKey,
    MissingKey,
    UnitViolation,
    InvariantViolation,
}

impl fmt::Display for ValidationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValidationKind::UnknownKey => "unknown key",
            ValidationKind::MissingKey => "missing key",
            ValidationKind::UnitViolation => "unit violation",
            ValidationKind::InvariantViolation => "invariant violation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationError {
    pub key: String,
    pub kind: ValidationKind,
    pub message: String,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.key, self.message, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("{} validation error(s): {}", .0.len(), join(.0))]
    Invalid(Vec<ValidationError>),
    #[error("calibration failed: {0}")]
    Calibration(String),
}

fn join(errors: &[ValidationError]) -> String {
    errors
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_s: f64,
    pub qber_threshold: f64,
    pub significance_threshold: f64,
    pub dead_time_s: f64,
    /// Whether a reset is issued automatically after a report.
    pub auto_reset: bool,
    pub reset_delay_s: f64,
    pub output: OutputSection,
    pub channel: ChannelSection,
    pub source: SourceSection,
    pub detector: DetectorSection,
    pub packet: PacketSection,
    pub session: SessionSection,
    pub calibration: CalibrationSection,
    pub perception: PerceptionSection,
    pub wm: WmSection,
    #[serde(rename = "disturbance", skip_serializing_if = "Vec::is_empty")]
    pub disturbances: Vec<DisturbanceSection>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_s: 60.0,
            qber_threshold: DEFAULT_QBER_THRESHOLD,
            significance_threshold: 10.0,
            dead_time_s: 1.0,
            auto_reset: true,
            reset_delay_s: 5.0,
            output: OutputSection::default(),
            channel: ChannelSection::default(),
            source: SourceSection::default(),
            detector: DetectorSection::default(),
            packet: PacketSection::default(),
            session: SessionSection::default(),
            calibration: CalibrationSection::default(),
            perception: PerceptionSection::default(),
            wm: WmSection::default(),
            disturbances: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelSection {
    pub length_m: f64,
    pub refractive_index: f64,
    pub tau0_s: f64,
    pub loss_db: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        let c = LoopChannel::default();
        Self {
            length_m: c.length_m,
            refractive_index: c.refractive_index,
            tau0_s: c.tau0_s,
            loss_db: c.loss_db,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceSection {
    pub mean_photon_number: f64,
    pub pulse_rate_hz: f64,
    pub pulse_width_s: f64,
}

impl Default for SourceSection {
    fn default() -> Self {
        let s = SourceModel::default();
        Self {
            mean_photon_number: s.mean_photon_number,
            pulse_rate_hz: s.pulse_rate_hz,
            pulse_width_s: s.pulse_width_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorSection {
    pub efficiency: f64,
    /// Left out when the calibration supplies it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dark_count_prob_per_gate: Option<f64>,
    pub gate_width_s: f64,
    pub repetition_rate_hz: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorModel::default();
        Self {
            efficiency: d.efficiency,
            dark_count_prob_per_gate: None,
            gate_width_s: d.gate_width_s,
            repetition_rate_hz: d.repetition_rate_hz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PacketSection {
    pub wavelength_m: f64,
    pub bandwidth_rad_per_s: f64,
}

impl Default for PacketSection {
    fn default() -> Self {
        Self {
            wavelength_m: 1550e-9,
            bandwidth_rad_per_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionSection {
    pub window_s: f64,
    pub pulses_per_window: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase_jitter_rad: Option<f64>,
    /// `bb84` or `fixed_gpd`.
    pub plan: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_delta_delta_rad: Option<f64>,
}

impl Default for SessionSection {
    fn default() -> Self {
        Self {
            window_s: 1.0,
            pulses_per_window: 10_000_000,
            phase_jitter_rad: None,
            plan: "bb84".into(),
            fixed_delta_delta_rad: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSection {
    /// Solve dark counts and phase jitter for the target operating point.
    pub enabled: bool,
    pub target_rate_bps: f64,
    pub target_qber: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            enabled: true,
            target_rate_bps: 22_400.0,
            target_qber: 0.0476,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionSection {
    pub bias_gpd_rad: f64,
    pub max_k: u32,
    pub delta_f_hz: f64,
    pub trace: TraceSection,
    pub sweep: SweepSection,
    pub nulls: NullSection,
}

impl Default for PerceptionSection {
    fn default() -> Self {
        Self {
            bias_gpd_rad: FRAC_PI_2,
            max_k: 4,
            delta_f_hz: PerceptionSetup::default().delta_f_hz,
            trace: TraceSection::default(),
            sweep: SweepSection::default(),
            nulls: NullSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceSection {
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub noise_sigma_rel: f64,
    pub i0_w: f64,
}

impl Default for TraceSection {
    fn default() -> Self {
        let t = TraceSettings::default();
        Self {
            duration_s: t.duration_s,
            sample_rate_hz: t.sample_rate_hz,
            noise_sigma_rel: t.noise_sigma_rel,
            i0_w: t.i0_w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub start_hz: f64,
    pub stop_hz: f64,
    pub step_hz: f64,
    pub dwell_s: f64,
    pub sample_rate_hz: f64,
    pub noise_sigma_rel: f64,
    pub i0_w: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        let s = SweepSettings::default();
        Self {
            start_hz: s.start_hz,
            stop_hz: s.stop_hz,
            step_hz: s.step_hz,
            dwell_s: s.dwell_s,
            sample_rate_hz: s.sample_rate_hz,
            noise_sigma_rel: s.noise_sigma_rel,
            i0_w: s.i0_w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NullSection {
    pub depth_threshold_db: f64,
    pub significance_factor: f64,
    pub median_window_hz: f64,
    pub min_frequency_hz: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment_len: Option<usize>,
}

impl Default for NullSection {
    fn default() -> Self {
        let n = NullSettings::default();
        Self {
            depth_threshold_db: n.depth_threshold_db,
            significance_factor: n.significance_factor,
            median_window_hz: n.median_window_hz,
            min_frequency_hz: n.min_frequency_hz,
            segment_len: n.segment_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WmSection {
    /// Period of the weak-measurement polls during key distribution; 0 disables them.
    pub poll_interval_s: f64,
    pub delta_epsilon_rad: f64,
    pub delta_bias_rad: f64,
    pub i_in_w: f64,
    /// Relative intensity noise per sample; 0 gives noiseless readings.
    pub noise_sigma_rel: f64,
    pub samples_per_reading: u32,
    pub pressed_length_m: f64,
    pub contact_area_m2: f64,
    pub stress_optic_per_pa: f64,
    /// Per-reading tau0 drift; 0 disables it.
    pub drift_sigma_s: f64,
    pub masses_kg: Vec<f64>,
}

impl Default for WmSection {
    fn default() -> Self {
        let p = PressureParams::default();
        let poll = WmPollSetup::default();
        Self {
            poll_interval_s: poll.interval_s,
            delta_epsilon_rad: poll.delta_epsilon_rad,
            delta_bias_rad: 0.0,
            i_in_w: poll.i_in_w,
            noise_sigma_rel: 0.0,
            samples_per_reading: ReadoutNoise::default().samples_per_reading,
            pressed_length_m: p.pressed_length_m,
            contact_area_m2: p.contact_area_m2,
            stress_optic_per_pa: p.stress_optic_per_pa,
            drift_sigma_s: 0.0,
            masses_kg: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

/// One `[[disturbance]]` table. Keys that do not belong to `kind` are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DisturbanceSection {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position_m: Option<f64>,
    pub start_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drive_amplitude_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequency_hz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase_gain_rad_per_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mass_kg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drop_height_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effective_width_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub impact_gain_rad_per_kg_m_per_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pressed_length_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contact_area_m2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stress_optic_per_pa: Option<f64>,
}

const PZT_KEYS: &[&str] = &["drive_amplitude_v", "frequency_hz", "phase_gain_rad_per_v"];
const IMPACT_KEYS: &[&str] = &[
    "mass_kg",
    "drop_height_m",
    "effective_width_s",
    "impact_gain_rad_per_kg_m_per_s",
];
const PRESSURE_KEYS: &[&str] = &[
    "mass_kg",
    "pressed_length_m",
    "contact_area_m2",
    "stress_optic_per_pa",
];

impl DisturbanceSection {
    fn present_keys(&self) -> Vec<&'static str> {
        let fields = [
            ("drive_amplitude_v", self.drive_amplitude_v),
            ("frequency_hz", self.frequency_hz),
            ("phase_gain_rad_per_v", self.phase_gain_rad_per_v),
            ("mass_kg", self.mass_kg),
            ("drop_height_m", self.drop_height_m),
            ("effective_width_s", self.effective_width_s),
            (
                "impact_gain_rad_per_kg_m_per_s",
                self.impact_gain_rad_per_kg_m_per_s,
            ),
            ("pressed_length_m", self.pressed_length_m),
            ("contact_area_m2", self.contact_area_m2),
            ("stress_optic_per_pa", self.stress_optic_per_pa),
        ];
        fields
            .iter()
            .filter(|(_, v)| v.is_some())
            .map(|(k, _)| *k)
            .collect()
    }

    /// The event this table describes, with per-kind defaults filled in.
    pub fn to_event(&self) -> Option<DisturbanceEvent> {
        let kind = match self.kind.as_str() {
            "pzt_sinusoid" => DisturbanceKind::PztSinusoid(PztParams {
                drive_amplitude_v: self.drive_amplitude_v.unwrap_or(1.0),
                angular_frequency_rad_per_s: 2.0 * PI * self.frequency_hz.unwrap_or(5_000.0),
                phase_gain_rad_per_v: self.phase_gain_rad_per_v.unwrap_or(1.0),
            }),
            "transient_impact" => DisturbanceKind::TransientImpact(ImpactParams {
                mass_kg: self.mass_kg.unwrap_or(0.2),
                drop_height_m: self.drop_height_m.unwrap_or(0.5),
                effective_width_s: self.effective_width_s.unwrap_or(10e-6),
                impact_gain_rad_per_kg_m_per_s: self.impact_gain_rad_per_kg_m_per_s.unwrap_or(1.0),
            }),
            "quasi_static_pressure" => {
                let d = PressureParams::default();
                DisturbanceKind::QuasiStaticPressure(PressureParams {
                    mass_kg: self.mass_kg.unwrap_or(d.mass_kg),
                    pressed_length_m: self.pressed_length_m.unwrap_or(d.pressed_length_m),
                    contact_area_m2: self.contact_area_m2.unwrap_or(d.contact_area_m2),
                    stress_optic_per_pa: self.stress_optic_per_pa.unwrap_or(d.stress_optic_per_pa),
                })
            }
            _ => return None,
        };
        Some(DisturbanceEvent::new(
            self.position_m?,
            self.start_time_s,
            kind,
        ))
    }
}

struct Checker {
    errors: Vec<ValidationError>,
}

impl Checker {
    fn push(&mut self, key: impl Into<String>, kind: ValidationKind, message: impl Into<String>) {
        self.errors.push(ValidationError {
            key: key.into(),
            kind,
            message: message.into(),
        });
    }

    fn positive(&mut self, key: impl Into<String>, v: f64) {
        if !(v.is_finite() && v > 0.0) {
            self.push(
                key,
                ValidationKind::UnitViolation,
                format!("must be positive, got {v}"),
            );
        }
    }

    fn non_negative(&mut self, key: impl Into<String>, v: f64) {
        if !(v.is_finite() && v >= 0.0) {
            self.push(
                key,
                ValidationKind::UnitViolation,
                format!("must be non-negative, got {v}"),
            );
        }
    }

    fn finite(&mut self, key: impl Into<String>, v: f64) {
        if !v.is_finite() {
            self.push(
                key,
                ValidationKind::UnitViolation,
                format!("must be finite, got {v}"),
            );
        }
    }

    fn invariant(&mut self, ok: bool, key: impl Into<String>, message: impl Into<String>) {
        if !ok {
            self.push(key, ValidationKind::InvariantViolation, message);
        }
    }
}

impl ScenarioConfig {
    /// All validation problems, in key order.
    pub fn validate(&self) -> Vec<ValidationError> {
        let mut c = Checker { errors: Vec::new() };
        c.invariant(
            self.seed <= i64::MAX as u64,
            "seed",
            "must fit in a signed 64-bit integer",
        );
        c.positive("duration_s", self.duration_s);
        c.invariant(
            self.qber_threshold > 0.0 && self.qber_threshold < 0.5,
            "qber_threshold",
            format!("must lie in (0, 0.5), got {}", self.qber_threshold),
        );
        c.positive("significance_threshold", self.significance_threshold);
        c.non_negative("dead_time_s", self.dead_time_s);
        c.non_negative("reset_delay_s", self.reset_delay_s);

        let ch = &self.channel;
        c.positive("channel.length_m", ch.length_m);
        c.invariant(
            ch.refractive_index.is_finite() && ch.refractive_index >= 1.0,
            "channel.refractive_index",
            format!("must be at least 1, got {}", ch.refractive_index),
        );
        c.non_negative("channel.tau0_s", ch.tau0_s);
        c.non_negative("channel.loss_db", ch.loss_db);

        let s = &self.source;
        c.positive("source.mean_photon_number", s.mean_photon_number);
        c.positive("source.pulse_rate_hz", s.pulse_rate_hz);
        c.positive("source.pulse_width_s", s.pulse_width_s);

        let d = &self.detector;
        c.invariant(
            d.efficiency > 0.0 && d.efficiency <= 1.0,
            "detector.efficiency",
            format!("must lie in (0, 1], got {}", d.efficiency),
        );
        if let Some(p) = d.dark_count_prob_per_gate {
            c.invariant(
                (0.0..1.0).contains(&p),
                "detector.dark_count_prob_per_gate",
                format!("must lie in [0, 1), got {p}"),
            );
        }
        c.positive("detector.gate_width_s", d.gate_width_s);
        c.positive("detector.repetition_rate_hz", d.repetition_rate_hz);

        c.positive("packet.wavelength_m", self.packet.wavelength_m);
        c.non_negative(
            "packet.bandwidth_rad_per_s",
            self.packet.bandwidth_rad_per_s,
        );

        let ses = &self.session;
        c.positive("session.window_s", ses.window_s);
        c.invariant(
            ses.pulses_per_window > 0,
            "session.pulses_per_window",
            "must be positive",
        );
        if let Some(j) = ses.phase_jitter_rad {
            c.non_negative("session.phase_jitter_rad", j);
        }
        match ses.plan.as_str() {
            "bb84" => c.invariant(
                ses.fixed_delta_delta_rad.is_none(),
                "session.fixed_delta_delta_rad",
                "only meaningful with plan = \"fixed_gpd\"",
            ),
            "fixed_gpd" => match ses.fixed_delta_delta_rad {
                Some(v) => c.finite("session.fixed_delta_delta_rad", v),
                None => c.push(
                    "session.fixed_delta_delta_rad",
                    ValidationKind::MissingKey,
                    "required with plan = \"fixed_gpd\"",
                ),
            },
            other => c.push(
                "session.plan",
                ValidationKind::InvariantViolation,
                format!("expected \"bb84\" or \"fixed_gpd\", got {other:?}"),
            ),
        }

        let cal = &self.calibration;
        if cal.enabled {
            c.positive("calibration.target_rate_bps", cal.target_rate_bps);
            c.invariant(
                cal.target_qber > 0.0 && cal.target_qber < 0.5,
                "calibration.target_qber",
                format!("must lie in (0, 0.5), got {}", cal.target_qber),
            );
            c.invariant(
                d.dark_count_prob_per_gate.is_none(),
                "detector.dark_count_prob_per_gate",
                "set by the calibration; disable [calibration] to give it explicitly",
            );
            c.invariant(
                ses.phase_jitter_rad.is_none(),
                "session.phase_jitter_rad",
                "set by the calibration; disable [calibration] to give it explicitly",
            );
        }

        let p = &self.perception;
        c.finite("perception.bias_gpd_rad", p.bias_gpd_rad);
        c.invariant(p.max_k >= 1, "perception.max_k", "must be at least 1");
        c.positive("perception.delta_f_hz", p.delta_f_hz);
        c.positive("perception.trace.duration_s", p.trace.duration_s);
        c.positive("perception.trace.sample_rate_hz", p.trace.sample_rate_hz);
        c.non_negative("perception.trace.noise_sigma_rel", p.trace.noise_sigma_rel);
        c.positive("perception.trace.i0_w", p.trace.i0_w);
        c.positive("perception.sweep.start_hz", p.sweep.start_hz);
        c.positive("perception.sweep.stop_hz", p.sweep.stop_hz);
        c.invariant(
            p.sweep.stop_hz > p.sweep.start_hz,
            "perception.sweep.stop_hz",
            "must exceed perception.sweep.start_hz",
        );
        c.positive("perception.sweep.step_hz", p.sweep.step_hz);
        c.positive("perception.sweep.dwell_s", p.sweep.dwell_s);
        c.positive("perception.sweep.sample_rate_hz", p.sweep.sample_rate_hz);
        c.invariant(
            p.sweep.stop_hz < p.sweep.sample_rate_hz / 2.0,
            "perception.sweep.stop_hz",
            "must stay below the Nyquist frequency of perception.sweep.sample_rate_hz",
        );
        c.non_negative("perception.sweep.noise_sigma_rel", p.sweep.noise_sigma_rel);
        c.positive("perception.sweep.i0_w", p.sweep.i0_w);
        c.positive(
            "perception.nulls.depth_threshold_db",
            p.nulls.depth_threshold_db,
        );
        c.positive(
            "perception.nulls.significance_factor",
            p.nulls.significance_factor,
        );
        c.positive(
            "perception.nulls.median_window_hz",
            p.nulls.median_window_hz,
        );
        c.non_negative(
            "perception.nulls.min_frequency_hz",
            p.nulls.min_frequency_hz,
        );
        if let Some(n) = p.nulls.segment_len {
            c.invariant(
                n.is_power_of_two() && n >= 16,
                "perception.nulls.segment_len",
                "must be a power of two >= 16",
            );
        }

        let w = &self.wm;
        c.non_negative("wm.poll_interval_s", w.poll_interval_s);
        c.invariant(
            w.delta_epsilon_rad.is_finite() && w.delta_epsilon_rad != 0.0,
            "wm.delta_epsilon_rad",
            "must be finite and nonzero",
        );
        c.finite("wm.delta_bias_rad", w.delta_bias_rad);
        c.positive("wm.i_in_w", w.i_in_w);
        c.non_negative("wm.noise_sigma_rel", w.noise_sigma_rel);
        c.invariant(
            w.samples_per_reading > 0,
            "wm.samples_per_reading",
            "must be positive",
        );
        c.positive("wm.pressed_length_m", w.pressed_length_m);
        c.positive("wm.contact_area_m2", w.contact_area_m2);
        c.positive("wm.stress_optic_per_pa", w.stress_optic_per_pa);
        c.non_negative("wm.drift_sigma_s", w.drift_sigma_s);
        for (i, m) in w.masses_kg.iter().enumerate() {
            c.non_negative(format!("wm.masses_kg[{i}]"), *m);
        }

        for (i, dist) in self.disturbances.iter().enumerate() {
            let key = |k: &str| format!("disturbance[{i}].{k}");
            let allowed = match dist.kind.as_str() {
                "pzt_sinusoid" => Some(PZT_KEYS),
                "transient_impact" => Some(IMPACT_KEYS),
                "quasi_static_pressure" => Some(PRESSURE_KEYS),
                "" => {
                    c.push(
                        key("kind"),
                        ValidationKind::MissingKey,
                        "every disturbance needs a kind",
                    );
                    None
                }
                other => {
                    c.push(
                        key("kind"),
                        ValidationKind::InvariantViolation,
                        format!(
                            "expected \"pzt_sinusoid\", \"transient_impact\" or \"quasi_static_pressure\", got {other:?}"
                        ),
                    );
                    None
                }
            };
            if let Some(allowed) = allowed {
                for k in dist.present_keys() {
                    if !allowed.contains(&k) {
                        c.push(
                            key(k),
                            ValidationKind::UnknownKey,
                            format!("not a {} parameter", dist.kind),
                        );
                    }
                }
            }
            match dist.position_m {
                None => c.push(
                    key("position_m"),
                    ValidationKind::MissingKey,
                    "every disturbance needs a position",
                ),
                Some(x) => {
                    c.non_negative(key("position_m"), x);
                    c.invariant(
                        x <= ch.length_m,
                        key("position_m"),
                        format!("{x} m lies outside the {} m loop", ch.length_m),
                    );
                }
            }
            c.non_negative(key("start_time_s"), dist.start_time_s);
            c.invariant(
                dist.start_time_s <= self.duration_s,
                key("start_time_s"),
                format!("starts after the scenario ends at {} s", self.duration_s),
            );
            let checks = [
                ("drive_amplitude_v", dist.drive_amplitude_v, false),
                ("frequency_hz", dist.frequency_hz, true),
                ("phase_gain_rad_per_v", dist.phase_gain_rad_per_v, false),
                ("mass_kg", dist.mass_kg, false),
                ("drop_height_m", dist.drop_height_m, false),
                ("effective_width_s", dist.effective_width_s, true),
                (
                    "impact_gain_rad_per_kg_m_per_s",
                    dist.impact_gain_rad_per_kg_m_per_s,
                    false,
                ),
                ("pressed_length_m", dist.pressed_length_m, true),
                ("contact_area_m2", dist.contact_area_m2, true),
                ("stress_optic_per_pa", dist.stress_optic_per_pa, true),
            ];
            for (k, v, strict) in checks {
                match (v, strict) {
                    (Some(v), true) => c.positive(key(k), v),
                    (Some(v), false) => c.non_negative(key(k), v),
                    (None, _) => {}
                }
            }
        }
        c.errors
    }

    pub fn channel(&self) -> LoopChannel {
        LoopChannel {
            length_m: self.channel.length_m,
            refractive_index: self.channel.refractive_index,
            tau0_s: self.channel.tau0_s,
            delta_tau_s: 0.0,
            bias_gpd_rad: 0.0,
            loss_db: self.channel.loss_db,
        }
    }

    pub fn packet(&self) -> SpectralPacket {
        SpectralPacket {
            omega0: 2.0 * PI * SPEED_OF_LIGHT / self.packet.wavelength_m,
            sigma: self.packet.bandwidth_rad_per_s,
        }
    }

    pub fn events(&self) -> Vec<DisturbanceEvent> {
        self.disturbances
            .iter()
            .filter_map(DisturbanceSection::to_event)
            .collect()
    }

    /// Echo as TOML. Parsing the echo gives back an identical config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config sections serialize to TOML")
    }

    pub fn null_settings(&self) -> NullSettings {
        let n = &self.perception.nulls;
        NullSettings {
            depth_threshold_db: n.depth_threshold_db,
            significance_factor: n.significance_factor,
            median_window_hz: n.median_window_hz,
            min_frequency_hz: n.min_frequency_hz,
            segment_len: n.segment_len,
        }
    }

    /// Resolve the config into the library types, running the operating-point
    /// calibration when enabled.
    pub fn build(&self) -> Result<Scenario, ConfigError> {
        self.resolve(true)
    }

    /// As [`build`](Self::build) but skips the calibration, leaving dark
    /// counts and jitter at their explicit values or zero. For runs that do
    /// not distribute keys.
    pub fn build_uncalibrated(&self) -> Result<Scenario, ConfigError> {
        self.resolve(false)
    }

    fn resolve(&self, calibrate: bool) -> Result<Scenario, ConfigError> {
        let errors = self.validate();
        if !errors.is_empty() {
            return Err(ConfigError::Invalid(errors));
        }
        let channel = self.channel();
        let packet = self.packet();
        let source = SourceModel {
            mean_photon_number: self.source.mean_photon_number,
            pulse_rate_hz: self.source.pulse_rate_hz,
            pulse_width_s: self.source.pulse_width_s,
        };
        let mut detector = DetectorModel {
            efficiency: self.detector.efficiency,
            dark_count_prob_per_gate: self.detector.dark_count_prob_per_gate.unwrap_or(0.0),
            gate_width_s: self.detector.gate_width_s,
            repetition_rate_hz: self.detector.repetition_rate_hz,
        };
        let mut jitter = self.session.phase_jitter_rad.unwrap_or(0.0);
        let calibration = if calibrate && self.calibration.enabled {
            let cal = calibrate_operating_point(
                self.calibration.target_rate_bps,
                self.calibration.target_qber,
                &source,
                &channel,
                &detector,
            )
            .map_err(|e| ConfigError::Calibration(e.to_string()))?;
            detector.dark_count_prob_per_gate = cal.dark_count_prob_per_gate;
            jitter = cal.phase_jitter_rad;
            Some(cal)
        } else {
            None
        };
        let plan = match self.session.fixed_delta_delta_rad {
            Some(delta_delta_rad) if self.session.plan == "fixed_gpd" => {
                PhasePlan::FixedGpd { delta_delta_rad }
            }
            _ => PhasePlan::Bb84,
        };
        let qkd = QkdSetup {
            source,
            detector,
            channel,
            session: SessionConfig {
                window_s: self.session.window_s,
                pulses_per_window: self.session.pulses_per_window,
                phase_jitter_rad: jitter,
                plan,
            },
        };
        let w = &self.wm;
        let noise = (w.noise_sigma_rel > 0.0).then_some(ReadoutNoise {
            sigma_rel: w.noise_sigma_rel,
            samples_per_reading: w.samples_per_reading,
        });
        let p = &self.perception;
        let script = ScenarioScript {
            qkd,
            packet,
            events: self.events(),
            qber_threshold: self.qber_threshold,
            significance_threshold: self.significance_threshold,
            duration_s: self.duration_s,
            seed: self.seed,
            dead_time_s: self.dead_time_s,
            reset_delay_s: self.auto_reset.then_some(self.reset_delay_s),
            perception: PerceptionSetup {
                bias_gpd_rad: p.bias_gpd_rad,
                trace: TraceSettings {
                    duration_s: p.trace.duration_s,
                    sample_rate_hz: p.trace.sample_rate_hz,
                    noise_sigma_rel: p.trace.noise_sigma_rel,
                    i0_w: p.trace.i0_w,
                    start_time_s: 0.0,
                    seed: 0,
                },
                sweep: SweepSettings {
                    start_hz: p.sweep.start_hz,
                    stop_hz: p.sweep.stop_hz,
                    step_hz: p.sweep.step_hz,
                    dwell_s: p.sweep.dwell_s,
                    sample_rate_hz: p.sweep.sample_rate_hz,
                    noise_sigma_rel: p.sweep.noise_sigma_rel,
                    i0_w: p.sweep.i0_w,
                    seed: 0,
                },
                nulls: self.null_settings(),
                max_k: p.max_k,
                delta_f_hz: p.delta_f_hz,
            },
            wm: WmPollSetup {
                interval_s: w.poll_interval_s,
                delta_epsilon_rad: w.delta_epsilon_rad,
                i_in_w: w.i_in_w,
                noise,
            },
        };
        script.validate().map_err(|e| {
            ConfigError::Invalid(vec![ValidationError {
                key: "scenario".into(),
                kind: ValidationKind::InvariantViolation,
                message: e.to_string(),
            }])
        })?;
        let wm = WmSetup {
            channel,
            packet,
            delta_bias: w.delta_bias_rad,
            i_in: w.i_in_w,
            delta_epsilon: w.delta_epsilon_rad,
            pressure: PressureParams {
                mass_kg: 0.0,
                pressed_length_m: w.pressed_length_m,
                contact_area_m2: w.contact_area_m2,
                stress_optic_per_pa: w.stress_optic_per_pa,
            },
            noise,
            drift: (w.drift_sigma_s > 0.0).then_some(Tau0Drift {
                sigma_per_reading_s: w.drift_sigma_s,
            }),
        };
        Ok(Scenario {
            script,
            wm,
            masses_kg: w.masses_kg.clone(),
            calibration,
        })
    }
}

/// A config resolved into ready-to-run library types.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub script: ScenarioScript,
    pub wm: WmSetup,
    pub masses_kg: Vec<f64>,
    pub calibration: Option<NoiseCalibration>,
}

/// Parse and validate config text.
pub fn parse_config_str(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let mut unknown = Vec::new();
    let config: ScenarioConfig = serde_ignored::deserialize(de, |path| unknown.push(key_of(&path)))
        .map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let mut errors: Vec<ValidationError> = unknown
        .into_iter()
        .map(|key| ValidationError {
            key,
            kind: ValidationKind::UnknownKey,
            message: "not a recognized key".into(),
        })
        .collect();
    errors.extend(config.validate());
    if errors.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError::Invalid(errors))
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ScenarioConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config_str(&text)
}

fn key_of(path: &serde_ignored::Path) -> String {
    use serde_ignored::Path as P;
    match path {
        P::Root => String::new(),
        P::Seq { parent, index } => format!("{}[{index}]", key_of(parent)),
        P::Map { parent, key } => {
            let p = key_of(parent);
            if p.is_empty() {
                key.clone()
            } else {
                format!("{p}.{key}")
            }
        }
        P::Some { parent } | P::NewtypeStruct { parent } | P::NewtypeVariant { parent } => {
            key_of(parent)
        }
    }
}

/// Set the dotted `key` (array elements as `disturbance.0.position_m`) in
/// config text to the TOML literal `value`, returning the new text. A value
/// that is not a TOML literal is taken as a string.
pub fn with_override(text: &str, key: &str, value: &str) -> Result<String, ConfigError> {
    let doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    let value = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.into()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut root = toml::Value::Table(doc);
    set_path(&mut root, &parts, value).map_err(|message| {
        ConfigError::Invalid(vec![ValidationError {
            key: key.into(),
            kind: ValidationKind::UnknownKey,
            message,
        }])
    })?;
    match root {
        toml::Value::Table(t) => Ok(t.to_string()),
        _ => unreachable!("root stays a table"),
    }
}

fn set_path(node: &mut toml::Value, parts: &[&str], value: toml::Value) -> Result<(), String> {
    let (part, rest) = parts.split_first().ok_or("empty key")?;
    match node {
        toml::Value::Table(t) if rest.is_empty() => {
            t.insert(part.to_string(), value);
            Ok(())
        }
        toml::Value::Table(t) => {
            let child = t
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            set_path(child, rest, value)
        }
        toml::Value::Array(a) => {
            let i: usize = part
                .parse()
                .map_err(|_| format!("{part:?} is not an array index"))?;
            let len = a.len();
            let child = a
                .get_mut(i)
                .ok_or(format!("index {i} out of range for {len} element(s)"))?;
            if rest.is_empty() {
                *child = value;
                Ok(())
            } else {
                set_path(child, rest, value)
            }
        }
        _ => Err(format!(
            "cannot descend into {part:?}: parent is not a table or array"
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn errors_of(text: &str) -> Vec<ValidationError> {
        match parse_config_str(text) {
            Err(ConfigError::Invalid(e)) => e,
            other => panic!("expected validation errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_takes_the_system_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
        let ch = cfg.channel();
        assert_eq!(ch.length_m, 30_000.0);
        assert_eq!(ch.refractive_index, 1.468);
        assert_eq!(cfg.packet.wavelength_m, 1550e-9);
        assert_eq!(cfg.source.mean_photon_number, 0.1);
        assert_eq!(cfg.detector.efficiency, 0.2);
        assert_eq!(cfg.source.pulse_rate_hz, 100e6);
        assert_eq!(cfg.detector.repetition_rate_hz, 100e6);
    }

    #[test]
    fn negative_length_is_a_unit_violation() {
        let errs = errors_of("[channel]\nlength_m = -5.0\n");
        assert!(errs
            .iter()
            .any(|e| e.key == "channel.length_m" && e.kind == ValidationKind::UnitViolation));
    }

    #[test]
    fn late_disturbance_is_rejected() {
        let errs = errors_of(
            "duration_s = 10.0\n[[disturbance]]\nkind = \"pzt_sinusoid\"\nposition_m = 5000.0\nstart_time_s = 20.0\n",
        );
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].key, "disturbance[0].start_time_s");
        assert_eq!(errs[0].kind, ValidationKind::InvariantViolation);
    }

    #[test]
    fn all_errors_are_collected() {
        let errs = errors_of(
            "colour = 1\nduration_s = -1.0\n[channel]\nlenght_m = 3.0\nloss_db = -2.0\n\
             [[disturbance]]\nkind = \"pzt_sinusoid\"\nposition_m = 5000.0\ndrop_height_m = 1.0\n",
        );
        let keys: Vec<(&str, ValidationKind)> =
            errs.iter().map(|e| (e.key.as_str(), e.kind)).collect();
        assert!(
            keys.contains(&("colour", ValidationKind::UnknownKey)),
            "{keys:?}"
        );
        assert!(keys.contains(&("channel.lenght_m", ValidationKind::UnknownKey)));
        assert!(keys.contains(&("duration_s", ValidationKind::UnitViolation)));
        assert!(keys.contains(&("channel.loss_db", ValidationKind::UnitViolation)));
        assert!(keys.contains(&("disturbance[0].drop_height_m", ValidationKind::UnknownKey)));
    }

    #[test]
    fn calibration_conflicts_with_explicit_noise() {
        let errs = errors_of("[detector]\ndark_count_prob_per_gate = 1e-6\n");
        assert_eq!(errs[0].key, "detector.dark_count_prob_per_gate");
        let cfg = parse_config_str(
            "[calibration]\nenabled = false\n[detector]\ndark_count_prob_per_gate = 1e-6\n",
        )
        .unwrap();
        assert_eq!(
            cfg.build()
                .unwrap()
                .script
                .qkd
                .detector
                .dark_count_prob_per_gate,
            1e-6
        );
    }

    #[test]
    fn syntax_and_io_errors() {
        assert!(matches!(
            parse_config_str("seed = = 1"),
            Err(ConfigError::Syntax(_))
        ));
        assert!(matches!(
            parse_config_str("seed = \"x\""),
            Err(ConfigError::Syntax(_))
        ));
        assert!(matches!(
            parse_config("/nonexistent/cfg.toml"),
            Err(ConfigError::Io { .. })
        ));
    }

    #[test]
    fn echo_round_trips() {
        let text = r#"
            seed = 11
            duration_s = 42.5
            auto_reset = false
            [channel]
            length_m = 25000.0
            tau0_s = 1.25e-12
            [detector]
            efficiency = 0.15
            [session]
            pulses_per_window = 123456
            plan = "fixed_gpd"
            fixed_delta_delta_rad = 0.7853981633974483
            [perception.nulls]
            segment_len = 2048
            [wm]
            masses_kg = [0.05, 0.15]
            noise_sigma_rel = 0.0019
            [[disturbance]]
            kind = "transient_impact"
            position_m = 4321.0
            start_time_s = 1.5
            effective_width_s = 8e-6
            [[disturbance]]
            kind = "quasi_static_pressure"
            position_m = 12000.0
            mass_kg = 0.3
        "#;
        let cfg = parse_config_str(text).unwrap();
        let echo = cfg.to_toml();
        let again = parse_config_str(&echo).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(echo, again.to_toml());
        assert_eq!(
            parse_config_str(&ScenarioConfig::default().to_toml()).unwrap(),
            ScenarioConfig::default()
        );
    }

    #[test]
    fn disturbance_tables_map_to_events() {
        let cfg = parse_config_str(
            "[[disturbance]]\nkind = \"pzt_sinusoid\"\nposition_m = 5000.0\nstart_time_s = 3.0\nfrequency_hz = 2000.0\n",
        )
        .unwrap();
        let ev = cfg.events()[0];
        assert_eq!(ev.position_m, 5000.0);
        match ev.kind {
            DisturbanceKind::PztSinusoid(p) => {
                assert_eq!(p.angular_frequency_rad_per_s, 2.0 * PI * 2000.0)
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn overrides_edit_nested_and_array_keys() {
        let base = "[[disturbance]]\nkind = \"pzt_sinusoid\"\nposition_m = 5000.0\n";
        let t = with_override(base, "channel.length_m", "20000").unwrap();
        assert_eq!(parse_config_str(&t).unwrap().channel.length_m, 20_000.0);
        let t = with_override(base, "disturbance.0.position_m", "7000.0").unwrap();
        assert_eq!(
            parse_config_str(&t).unwrap().disturbances[0].position_m,
            Some(7000.0)
        );
        let t = with_override(base, "session.plan", "bb84").unwrap();
        assert_eq!(parse_config_str(&t).unwrap().session.plan, "bb84");
        assert!(with_override(base, "disturbance.3.position_m", "1.0").is_err());
    }

    #[test]
    fn build_calibrates_by_default() {
        let s = ScenarioConfig::default().build().unwrap();
        let cal = s.calibration.unwrap();
        assert_eq!(
            s.script.qkd.detector.dark_count_prob_per_gate,
            cal.dark_count_prob_per_gate
        );
        assert!((cal.expected.raw_rate_bps - 22_400.0).abs() < 1.0);
        assert!((cal.expected.qber - 0.0476).abs() < 1e-6);
        assert_eq!(s.masses_kg.len(), 5);
    }
}
