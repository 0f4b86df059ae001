//! The operating workflow as a finite state machine, plus a scenario harness
//! that drives the key, perception and weak-measurement modules through a
//! simulated timeline.
//!
//! Key distribution runs until a QBER window breaches the threshold. The
//! system then switches to continuous-wave perception, decides whether the
//! disturbance is significant, localizes it, reports, and waits for a reset.

use crate::derive_seed;
use crate::disturbance::{DisturbanceEvent, DisturbanceKind, PressureParams};
use crate::optics::SpectralPacket;
use crate::perception::{
    build_report, combined_gpd, find_null_frequencies, frequency_sweep, synthesize_trace, welch,
    LocalizationReport, NullInput, NullSettings, SweepSettings, TraceSettings,
    DEFAULT_RESOLUTION_HZ,
};
use crate::qkd::{
    qber_threshold_check, BreachCheck, QkdSession, QkdSetup, SiftedKeyRecord,
    DEFAULT_QBER_THRESHOLD,
};
use crate::wm::{measure_delay, ReadoutNoise, WmReading, WmSetup};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SystemMode {
    KeyDistribution,
    PerceptionSensing,
    Localizing,
    Reporting,
    AwaitReset,
}

impl SystemMode {
    pub const ALL: [SystemMode; 5] = [
        SystemMode::KeyDistribution,
        SystemMode::PerceptionSensing,
        SystemMode::Localizing,
        SystemMode::Reporting,
        SystemMode::AwaitReset,
    ];
}

impl fmt::Display for SystemMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    QberWindow,
    BreachDetected,
    DisturbanceSignificant,
    DisturbanceMinor,
    LocalizationDone,
    ReportDelivered,
    ResetIssued,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::QberWindow,
        EventKind::BreachDetected,
        EventKind::DisturbanceSignificant,
        EventKind::DisturbanceMinor,
        EventKind::LocalizationDone,
        EventKind::ReportDelivered,
        EventKind::ResetIssued,
    ];
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Result of the perception significance test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceTest {
    pub peak_frequency_hz: f64,
    pub peak_psd: f64,
    pub noise_floor_psd: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventPayload {
    QberWindow {
        record: SiftedKeyRecord,
    },
    BreachDetected {
        qber: f64,
        threshold: f64,
    },
    DisturbanceSignificant {
        test: SignificanceTest,
    },
    DisturbanceMinor {
        test: SignificanceTest,
    },
    LocalizationDone {
        method: String,
        report: LocalizationReport,
    },
    ReportDelivered {
        report_index: usize,
    },
    ResetIssued,
}

impl EventPayload {
    pub fn kind(&self) -> EventKind {
        match self {
            EventPayload::QberWindow { .. } => EventKind::QberWindow,
            EventPayload::BreachDetected { .. } => EventKind::BreachDetected,
            EventPayload::DisturbanceSignificant { .. } => EventKind::DisturbanceSignificant,
            EventPayload::DisturbanceMinor { .. } => EventKind::DisturbanceMinor,
            EventPayload::LocalizationDone { .. } => EventKind::LocalizationDone,
            EventPayload::ReportDelivered { .. } => EventKind::ReportDelivered,
            EventPayload::ResetIssued => EventKind::ResetIssued,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerEvent {
    pub time_s: f64,
    pub payload: EventPayload,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("protocol violation: {event} is not legal in {mode}")]
    ProtocolViolation { mode: SystemMode, event: EventKind },
    #[error("invalid scenario {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

/// Transition table. `QberWindow` is accepted everywhere and never changes
/// the mode; anything not listed is a protocol violation.
pub fn step_kind(mode: SystemMode, event: EventKind) -> Result<SystemMode, ControllerError> {
    use EventKind as E;
    use SystemMode as M;
    match (mode, event) {
        (m, E::QberWindow) => Ok(m),
        (M::KeyDistribution, E::BreachDetected) => Ok(M::PerceptionSensing),
        (M::PerceptionSensing, E::DisturbanceSignificant) => Ok(M::Localizing),
        (M::PerceptionSensing, E::DisturbanceMinor) => Ok(M::KeyDistribution),
        (M::Localizing, E::LocalizationDone) => Ok(M::Reporting),
        (M::Reporting, _) => Ok(M::AwaitReset),
        (M::AwaitReset, E::ResetIssued) => Ok(M::KeyDistribution),
        (mode, event) => Err(ControllerError::ProtocolViolation { mode, event }),
    }
}

pub fn step(mode: SystemMode, event: &ControllerEvent) -> Result<SystemMode, ControllerError> {
    step_kind(mode, event.payload.kind())
}

/// How the perception phase captures and analyzes data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptionSetup {
    /// Working bias of the loop in continuous-wave mode.
    pub bias_gpd_rad: f64,
    pub trace: TraceSettings,
    pub sweep: SweepSettings,
    pub nulls: NullSettings,
    pub max_k: u32,
    pub delta_f_hz: f64,
}

impl Default for PerceptionSetup {
    fn default() -> Self {
        Self {
            bias_gpd_rad: FRAC_PI_2,
            trace: TraceSettings::default(),
            sweep: SweepSettings::default(),
            nulls: NullSettings::default(),
            max_k: 4,
            delta_f_hz: DEFAULT_RESOLUTION_HZ,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmPollSetup {
    pub interval_s: f64,
    pub delta_epsilon_rad: f64,
    pub i_in_w: f64,
    pub noise: Option<ReadoutNoise>,
}

impl Default for WmPollSetup {
    fn default() -> Self {
        Self {
            interval_s: 60.0,
            delta_epsilon_rad: 30f64.to_radians(),
            i_in_w: 1e-3,
            noise: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub qkd: QkdSetup,
    pub packet: SpectralPacket,
    pub events: Vec<DisturbanceEvent>,
    pub qber_threshold: f64,
    /// Peak-to-floor power ratio above which a disturbance is significant.
    pub significance_threshold: f64,
    pub duration_s: f64,
    pub seed: u64,
    /// Laser and detector switch-over time on every mode change.
    pub dead_time_s: f64,
    /// Time spent in AwaitReset before a reset is issued; `None` waits forever.
    pub reset_delay_s: Option<f64>,
    pub perception: PerceptionSetup,
    pub wm: WmPollSetup,
}

impl Default for ScenarioScript {
    fn default() -> Self {
        Self {
            qkd: QkdSetup::default(),
            packet: SpectralPacket::default(),
            events: Vec::new(),
            qber_threshold: DEFAULT_QBER_THRESHOLD,
            significance_threshold: 10.0,
            duration_s: 60.0,
            seed: 0,
            dead_time_s: 1.0,
            reset_delay_s: Some(5.0),
            perception: PerceptionSetup::default(),
            wm: WmPollSetup::default(),
        }
    }
}

impl ScenarioScript {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |field, reason: String| Err(ControllerError::Invalid { field, reason });
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad("duration_s", "must be positive".into());
        }
        if !(self.qber_threshold > 0.0 && self.qber_threshold < 1.0) {
            return bad(
                "qber_threshold",
                format!("must lie in (0, 1), got {}", self.qber_threshold),
            );
        }
        if !(self.significance_threshold > 0.0) {
            return bad("significance_threshold", "must be positive".into());
        }
        if !(self.dead_time_s >= 0.0) {
            return bad("dead_time_s", "must be non-negative".into());
        }
        if let Some(i) = self
            .events
            .iter()
            .position(|e| !(e.start_time_s >= 0.0 && e.start_time_s <= self.duration_s))
        {
            return bad(
                "events",
                format!("event {i} starts outside [0, duration_s]"),
            );
        }
        if let Some(i) = self
            .events
            .iter()
            .position(|e| !(e.position_m >= 0.0 && e.position_m <= self.qkd.channel.length_m))
        {
            return bad("events", format!("event {i} lies outside the loop"));
        }
        self.qkd.validate().map_err(|e| ControllerError::Invalid {
            field: "qkd",
            reason: e.to_string(),
        })
    }
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub time_s: f64,
    pub mode: SystemMode,
    pub next_mode: SystemMode,
    pub event: EventPayload,
}

/// A scheduled weak-measurement poll taken during key distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmPoll {
    pub time_s: f64,
    pub reading: WmReading,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub log: Vec<LogEntry>,
    pub reports: Vec<LocalizationReport>,
    pub wm_polls: Vec<WmPoll>,
    /// Analysis problems that stopped the run early.
    pub diagnostics: Vec<String>,
    pub final_mode: SystemMode,
    pub end_time_s: f64,
}

impl ScenarioOutcome {
    pub fn key_records(&self) -> impl Iterator<Item = &SiftedKeyRecord> {
        self.log.iter().filter_map(|e| match &e.event {
            EventPayload::QberWindow { record } => Some(record),
            _ => None,
        })
    }

    pub fn modes_visited(&self) -> Vec<SystemMode> {
        let mut out = vec![SystemMode::KeyDistribution];
        for e in &self.log {
            if out.last() != Some(&e.next_mode) {
                out.push(e.next_mode);
            }
        }
        out
    }
}

struct Timeline {
    events: Vec<DisturbanceEvent>,
    cleared: Vec<bool>,
}

impl Timeline {
    fn active(&self, t: f64) -> Vec<DisturbanceEvent> {
        self.events
            .iter()
            .zip(&self.cleared)
            // Impacts are shaped in time by their own waveform.
            .filter(|(e, c)| {
                !**c && (e.start_time_s <= t + 1e-12
                    || matches!(e.kind, DisturbanceKind::TransientImpact(_)))
            })
            .map(|(e, _)| *e)
            .collect()
    }

    fn active_dynamic(&self, t: f64) -> Vec<DisturbanceEvent> {
        self.active(t)
            .into_iter()
            .filter(|e| e.is_dynamic())
            .collect()
    }

    /// Remove the dynamic event closest to the reported position.
    fn clear_nearest(&mut self, t: f64, x: f64) {
        let candidate = self
            .events
            .iter()
            .enumerate()
            .filter(|(i, e)| !self.cleared[*i] && e.is_dynamic() && e.start_time_s <= t)
            .min_by(|(_, a), (_, b)| {
                (a.position_m - x)
                    .abs()
                    .total_cmp(&(b.position_m - x).abs())
            })
            .map(|(i, _)| i);
        if let Some(i) = candidate {
            self.cleared[i] = true;
        }
    }
}

/// Peak power in the spectrum above `min_frequency_hz` against its median.
pub fn significance_test(
    spectrum: &crate::perception::Spectrum,
    min_frequency_hz: f64,
) -> SignificanceTest {
    let first =
        ((min_frequency_hz / spectrum.resolution_hz).ceil() as usize).min(spectrum.psd.len() - 1);
    let band = &spectrum.psd[first..];
    let (peak_i, peak) =
        band.iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, p)| if p > acc.1 { (i, p) } else { acc },
            );
    let mut sorted = band.to_vec();
    sorted.sort_by(f64::total_cmp);
    let floor = sorted[sorted.len() / 2];
    SignificanceTest {
        peak_frequency_hz: spectrum.frequency(first + peak_i),
        peak_psd: peak,
        noise_floor_psd: floor,
        ratio: peak / floor,
    }
}

struct Runner {
    t: f64,
    mode: SystemMode,
    out: ScenarioOutcome,
}

impl Runner {
    fn emit(&mut self, payload: EventPayload) -> Result<(), ControllerError> {
        let next = step_kind(self.mode, payload.kind())?;
        self.out.log.push(LogEntry {
            time_s: self.t,
            mode: self.mode,
            next_mode: next,
            event: payload,
        });
        self.mode = next;
        Ok(())
    }

    fn fail(&mut self, msg: String) {
        self.out
            .diagnostics
            .push(format!("t = {:.6} s in {}: {msg}", self.t, self.mode));
    }
}

/// Run the scenario to completion. The log is fully determined by the script
/// and its seed.
pub fn run_scenario(script: &ScenarioScript) -> Result<ScenarioOutcome, ControllerError> {
    script.validate()?;
    let channel = script.qkd.channel;
    let mut timeline = Timeline {
        events: script.events.clone(),
        cleared: vec![false; script.events.len()],
    };
    let mut session = QkdSession::new(script.qkd, derive_seed(script.seed, 0)).map_err(|e| {
        ControllerError::Invalid {
            field: "qkd",
            reason: e.to_string(),
        }
    })?;
    let mut wm_rng = ChaCha8Rng::seed_from_u64(derive_seed(script.seed, 1));
    let mut captures = 0u64;
    let mut next_poll = script.wm.interval_s;
    let window = script.qkd.session.window_s;
    let key_channel = channel.with_bias(0.0);
    let cw_channel = channel.with_bias(script.perception.bias_gpd_rad);

    let mut r = Runner {
        t: 0.0,
        mode: SystemMode::KeyDistribution,
        out: ScenarioOutcome {
            log: Vec::new(),
            reports: Vec::new(),
            wm_polls: Vec::new(),
            diagnostics: Vec::new(),
            final_mode: SystemMode::KeyDistribution,
            end_time_s: 0.0,
        },
    };

    while r.t < script.duration_s - 1e-12 && r.out.diagnostics.is_empty() {
        match r.mode {
            SystemMode::KeyDistribution => {
                if script.wm.interval_s > 0.0 && r.t + 1e-12 >= next_poll {
                    next_poll += script.wm.interval_s;
                    let active = timeline.active(r.t);
                    let pressed: Vec<&PressureParams> = active
                        .iter()
                        .filter_map(|e| match &e.kind {
                            DisturbanceKind::QuasiStaticPressure(p) => Some(p),
                            _ => None,
                        })
                        .collect();
                    let delay: f64 = active.iter().map(|e| e.delay_at(r.t)).sum();
                    let setup = WmSetup {
                        channel,
                        packet: script.packet,
                        delta_bias: 0.0,
                        i_in: script.wm.i_in_w,
                        delta_epsilon: script.wm.delta_epsilon_rad,
                        pressure: pressed.first().map_or(PressureParams::default(), |p| **p),
                        noise: script.wm.noise,
                        drift: None,
                    };
                    let applied_mass: f64 = pressed.iter().map(|p| p.mass_kg).sum();
                    match measure_delay(&setup, delay, applied_mass, &mut wm_rng) {
                        Ok((reading, _)) => r.out.wm_polls.push(WmPoll {
                            time_s: r.t,
                            reading,
                        }),
                        Err(e) => r.fail(format!("WM poll failed: {e}")),
                    }
                }
                let active = timeline.active_dynamic(r.t);
                session.seek(r.t);
                let gpd = move |t: f64| combined_gpd(t, &active, &key_channel);
                let record = session.next_window_with(&gpd, None);
                r.t += window;
                let check = qber_threshold_check(&record, script.qber_threshold);
                r.emit(EventPayload::QberWindow { record })?;
                if check == BreachCheck::Breach {
                    r.emit(EventPayload::BreachDetected {
                        qber: record.qber_estimate.unwrap_or(f64::NAN),
                        threshold: script.qber_threshold,
                    })?;
                    r.t += script.dead_time_s;
                }
            }
            SystemMode::PerceptionSensing => {
                let settings = TraceSettings {
                    start_time_s: r.t,
                    seed: derive_seed(script.seed, 100 + captures),
                    ..script.perception.trace
                };
                captures += 1;
                if r.t + settings.duration_s > script.duration_s {
                    r.fail("perception mode entered but the scenario ended before a trace was captured".into());
                    break;
                }
                let spectrum = synthesize_trace(&timeline.active(r.t), &cw_channel, &settings)
                    .and_then(|trace| welch(&trace, script.perception.nulls.segment_len));
                let spectrum = match spectrum {
                    Ok(s) => s,
                    Err(e) => {
                        r.fail(format!("perception capture failed: {e}"));
                        break;
                    }
                };
                r.t += settings.duration_s;
                let test = significance_test(&spectrum, script.perception.nulls.min_frequency_hz);
                if test.ratio > script.significance_threshold {
                    r.emit(EventPayload::DisturbanceSignificant { test })?;
                } else {
                    r.emit(EventPayload::DisturbanceMinor { test })?;
                    r.t += script.dead_time_s;
                }
            }
            SystemMode::Localizing => {
                let dynamic = timeline.active_dynamic(r.t);
                let pzt = dynamic.iter().find_map(|e| match &e.kind {
                    DisturbanceKind::PztSinusoid(p) => Some((e.position_m, *p)),
                    _ => None,
                });
                let p = &script.perception;
                let analysis = if let Some((x, drive)) = pzt {
                    // The drive is swept while the response is recorded.
                    let sweep = SweepSettings {
                        seed: derive_seed(script.seed, 100 + captures),
                        ..p.sweep
                    };
                    captures += 1;
                    let n = sweep.frequencies().len() as f64;
                    r.t += n * sweep.dwell_s;
                    frequency_sweep(x, &drive, &cw_channel, &sweep)
                        .and_then(|s| {
                            find_null_frequencies(NullInput::Sweep(&s), p.max_k, &p.nulls)
                        })
                        .map(|found| ("swept_sine", found))
                } else {
                    let settings = TraceSettings {
                        start_time_s: r.t,
                        seed: derive_seed(script.seed, 100 + captures),
                        ..p.trace
                    };
                    captures += 1;
                    r.t += settings.duration_s;
                    synthesize_trace(&dynamic, &cw_channel, &settings)
                        .and_then(|trace| {
                            find_null_frequencies(NullInput::Trace(&trace), p.max_k, &p.nulls)
                        })
                        .map(|found| ("broadband", found))
                };
                match analysis {
                    Ok((method, found)) if !found.nulls.is_empty() => {
                        match build_report(&found.nulls, &channel, p.delta_f_hz) {
                            Ok(report) => {
                                r.out.reports.push(report.clone());
                                r.emit(EventPayload::LocalizationDone {
                                    method: method.into(),
                                    report,
                                })?;
                            }
                            Err(e) => r.fail(format!("localization failed: {e}")),
                        }
                    }
                    Ok((method, found)) => r.fail(format!(
                        "{method} analysis found no nulls: {}",
                        found.diagnostic.unwrap_or_default()
                    )),
                    Err(e) => r.fail(format!("localization failed: {e}")),
                }
            }
            SystemMode::Reporting => {
                let report_index = r.out.reports.len() - 1;
                r.emit(EventPayload::ReportDelivered { report_index })?;
            }
            SystemMode::AwaitReset => match script.reset_delay_s {
                Some(delay) if r.t + delay < script.duration_s => {
                    r.t += delay;
                    let x = r.out.reports.last().map_or(0.0, |rep| rep.position_x_m);
                    timeline.clear_nearest(r.t, x);
                    r.emit(EventPayload::ResetIssued)?;
                    r.t += script.dead_time_s;
                }
                _ => break,
            },
        }
    }
    if r.out.diagnostics.is_empty()
        && matches!(
            r.mode,
            SystemMode::PerceptionSensing | SystemMode::Localizing
        )
    {
        r.fail(
            "perception mode entered but the scenario ended before perception data was analyzed"
                .into(),
        );
    }
    r.out.final_mode = r.mode;
    r.out.end_time_s = r.t;
    Ok(r.out)
}
