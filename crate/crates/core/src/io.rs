//! File formats: interference traces, plot-ready CSV tables and the JSON run
//! report.
//!
//! Every float leaves this module with 17 significant digits, which is enough
//! for any `f64` to come back bit for bit.

use crate::config::ScenarioConfig;
use crate::controller::{LogEntry, SignificanceTest, SystemMode, WmPoll};
use crate::perception::{
    FrequencySweep, InterferenceTrace, LocalizationReport, NullFrequency, Spectrum, SweepPoint,
};
use crate::qkd::{NoiseCalibration, SessionSummary, SiftedKeyRecord};
use crate::wm::WmReading;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

fn format_err(line: usize, message: impl Into<String>) -> IoError {
    IoError::Format {
        line,
        message: message.into(),
    }
}

/// Full-precision float text.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_trace<W: Write>(trace: &InterferenceTrace, w: W) -> Result<(), IoError> {
    let mut w = BufWriter::new(w);
    writeln!(
        w,
        "# sample_rate_hz={} i0_w={} noise_sigma_rel={} start_time_s={}",
        fmt_f64(trace.sample_rate_hz),
        fmt_f64(trace.i0_w),
        fmt_f64(trace.noise_sigma_rel),
        fmt_f64(trace.start_time_s)
    )?;
    for (i, s) in trace.samples.iter().enumerate() {
        writeln!(w, "{},{}", fmt_f64(trace.time_at(i)), fmt_f64(*s))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a two-column `time_s,intensity` trace. The header must carry
/// `sample_rate_hz` and `i0_w`; the time column is checked against it.
pub fn read_trace<R: Read>(r: R) -> Result<InterferenceTrace, IoError> {
    let mut lines = BufReader::new(r).lines();
    let header = lines
        .next()
        .ok_or_else(|| format_err(1, "empty trace file"))??;
    let body = header
        .strip_prefix('#')
        .ok_or_else(|| format_err(1, "first line must be a '#' header"))?;
    let (mut fs, mut i0, mut noise, mut start) = (None, None, 0.0, 0.0);
    for field in body.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| format_err(1, format!("malformed header field {field:?}")))?;
        let v: f64 = v
            .parse()
            .map_err(|_| format_err(1, format!("header value for {k} is not a number")))?;
        match k {
            "sample_rate_hz" => fs = Some(v),
            "i0_w" => i0 = Some(v),
            "noise_sigma_rel" => noise = v,
            "start_time_s" => start = v,
            _ => return Err(format_err(1, format!("unknown header field {k:?}"))),
        }
    }
    let sample_rate_hz = fs.ok_or_else(|| format_err(1, "header lacks sample_rate_hz"))?;
    let i0_w = i0.ok_or_else(|| format_err(1, "header lacks i0_w"))?;
    let mut samples = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let lineno = n + 2;
        if line.trim().is_empty() {
            continue;
        }
        let (t, v) = line
            .split_once(',')
            .ok_or_else(|| format_err(lineno, "expected two comma-separated columns"))?;
        let t: f64 = t
            .trim()
            .parse()
            .map_err(|_| format_err(lineno, "bad time value"))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| format_err(lineno, "bad intensity value"))?;
        let expected = start + samples.len() as f64 / sample_rate_hz;
        if (t - expected).abs() > 0.5 / sample_rate_hz {
            return Err(format_err(
                lineno,
                format!("time {t} breaks the uniform grid (expected {expected})"),
            ));
        }
        samples.push(v);
    }
    Ok(InterferenceTrace {
        sample_rate_hz,
        start_time_s: start,
        i0_w,
        noise_sigma_rel: noise,
        samples,
    })
}

pub fn save_trace(trace: &InterferenceTrace, path: impl AsRef<Path>) -> Result<(), IoError> {
    write_trace(trace, File::create(path)?)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<InterferenceTrace, IoError> {
    read_trace(File::open(path)?)
}

fn table<W: Write>(
    w: W,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    for row in rows {
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// QBER and raw key rate per window.
pub fn write_qber_vs_time<W: Write>(records: &[SiftedKeyRecord], w: W) -> Result<(), IoError> {
    table(
        w,
        &[
            "window_start_s",
            "qber",
            "raw_rate_bps",
            "sifted_bits",
            "errors",
            "pulses_sent",
        ],
        records.iter().map(|r| {
            vec![
                fmt_f64(r.window_start_s),
                opt(r.qber_estimate),
                fmt_f64(r.raw_rate_bps),
                r.sifted_bits.to_string(),
                r.errors.to_string(),
                r.pulses_sent.to_string(),
            ]
        }),
    )
}

pub fn write_icr_vs_mass<W: Write>(readings: &[WmReading], w: W) -> Result<(), IoError> {
    table(
        w,
        &[
            "applied_mass_kg",
            "applied_delta_tau_s",
            "icr",
            "inferred_delta_tau_s",
            "small_angle_delta_tau_s",
            "inferred_mass_kg",
            "i1_w",
            "i_d_w",
        ],
        readings.iter().map(|r| {
            vec![
                fmt_f64(r.applied_mass_kg),
                fmt_f64(r.applied_delta_tau_s),
                fmt_f64(r.icr),
                fmt_f64(r.inferred_delta_tau),
                fmt_f64(r.small_angle_delta_tau),
                fmt_f64(r.inferred_mass),
                fmt_f64(r.i1),
                fmt_f64(r.i_d),
            ]
        }),
    )
}

pub fn write_amplitude_vs_frequency<W: Write>(sweep: &FrequencySweep, w: W) -> Result<(), IoError> {
    table(
        w,
        &["frequency_hz", "amplitude_w"],
        sweep
            .points
            .iter()
            .map(|p| vec![fmt_f64(p.frequency_hz), fmt_f64(p.amplitude_w)]),
    )
}

pub fn read_amplitude_vs_frequency<R: Read>(r: R) -> Result<FrequencySweep, IoError> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["frequency_hz", "amplitude_w"] {
        return Err(format_err(1, "expected header frequency_hz,amplitude_w"));
    }
    let mut points = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, IoError> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| format_err(n + 2, "expected two numeric columns"))
        };
        points.push(SweepPoint {
            frequency_hz: num(0)?,
            amplitude_w: num(1)?,
        });
    }
    Ok(FrequencySweep { points })
}

pub fn write_spectrum<W: Write>(spectrum: &Spectrum, w: W) -> Result<(), IoError> {
    table(
        w,
        &["frequency_hz", "psd_w2_per_hz"],
        spectrum
            .psd
            .iter()
            .enumerate()
            .map(|(i, p)| vec![fmt_f64(spectrum.frequency(i)), fmt_f64(*p)]),
    )
}

pub fn write_nulls<W: Write>(nulls: &[NullFrequency], w: W) -> Result<(), IoError> {
    table(
        w,
        &["harmonic_k", "f_null_hz", "depth_db", "uncertainty_hz"],
        nulls.iter().map(|n| {
            vec![
                n.harmonic_k.to_string(),
                fmt_f64(n.f_null_hz),
                fmt_f64(n.depth_db),
                fmt_f64(n.uncertainty_hz),
            ]
        }),
    )
}

/// JSON formatter that writes every float with 17 significant digits and
/// otherwise behaves like the wrapped formatter.
pub struct FullPrecision<F>(pub F);

impl<F: Formatter> Formatter for FullPrecision<F> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{value:.8e}")
    }

    fn begin_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_array(writer)
    }

    fn end_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + Write>(
        &mut self,
        writer: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.0.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_object(writer)
    }

    fn end_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + Write>(
        &mut self,
        writer: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.0.begin_object_key(writer, first)
    }

    fn end_object_key<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object_key(writer)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object_value(writer)
    }
}

/// Indented JSON with full-precision floats.
pub fn to_json_pretty<T: Serialize + ?Sized>(value: &T) -> Result<String, IoError> {
    let mut buf = Vec::new();
    let mut ser =
        serde_json::Serializer::with_formatter(&mut buf, FullPrecision(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// Single-line JSON with full-precision floats.
pub fn to_json_line<T: Serialize + ?Sized>(value: &T) -> Result<String, IoError> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(
        &mut buf,
        FullPrecision(serde_json::ser::CompactFormatter),
    );
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], w: W) -> Result<(), IoError> {
    let mut w = BufWriter::new(w);
    for item in items {
        writeln!(w, "{}", to_json_line(item)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything a run produced, with the config that reproduces it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: ScenarioConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<NoiseCalibration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<SessionSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub key_records: Vec<SiftedKeyRecord>,
    /// Localization method used outside a scenario: `swept_sine` or `broadband`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub significance: Option<SignificanceTest>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub localization_reports: Vec<LocalizationReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub wm_readings: Vec<WmReading>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub wm_polls: Vec<WmPoll>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub event_log: Vec<LogEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_mode: Option<SystemMode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str, config: &ScenarioConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: config.seed,
            config: config.clone(),
            calibration: None,
            summary: None,
            key_records: Vec::new(),
            method: None,
            significance: None,
            localization_reports: Vec::new(),
            wm_readings: Vec::new(),
            wm_polls: Vec::new(),
            event_log: Vec::new(),
            final_mode: None,
            diagnostics: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String, IoError> {
        to_json_pretty(self)
    }

    pub fn from_json(text: &str) -> Result<Self, IoError> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::LoopChannel;
    use crate::perception::{synthesize_trace, TraceSettings};

    #[test]
    fn trace_round_trip_is_bit_identical() {
        let trace = synthesize_trace(
            &[],
            &LoopChannel::default().with_bias(1.0),
            &TraceSettings {
                duration_s: 0.002,
                start_time_s: 0.123,
                seed: 9,
                ..Default::default()
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# sample_rate_hz=2.0000000000000000e5 i0_w="));
        assert_eq!(text.lines().count(), trace.samples.len() + 1);
        let back = read_trace(&buf[..]).unwrap();
        assert_eq!(back.samples.len(), trace.samples.len());
        for (a, b) in back.samples.iter().zip(&trace.samples) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back, trace);
    }

    #[test]
    fn malformed_traces_are_rejected() {
        assert!(read_trace(&b""[..]).is_err());
        assert!(read_trace(&b"0,1\n"[..]).is_err());
        assert!(read_trace(&b"# i0_w=1\n0,1\n"[..]).is_err());
        assert!(read_trace(&b"# sample_rate_hz=10 i0_w=1\n0,1\n0.5,1\n"[..]).is_err());
        let ok = read_trace(&b"# sample_rate_hz=10 i0_w=1\n0,1\n0.1,2\n"[..]).unwrap();
        assert_eq!(ok.samples, vec![1.0, 2.0]);
    }

    #[test]
    fn json_keeps_seventeen_digits() {
        let attoseconds = 9.813_4e-18_f64;
        let line = to_json_line(&[attoseconds, 0.1]).unwrap();
        assert_eq!(line, "[9.8134000000000005e-18,1.0000000000000001e-1]");
        let back: Vec<f64> = serde_json::from_str(&line).unwrap();
        assert_eq!(back[0].to_bits(), attoseconds.to_bits());
        let pretty = to_json_pretty(&serde_json::json!({"a": 1, "b": [2.5]})).unwrap();
        assert_eq!(
            pretty,
            "{\n  \"a\": 1,\n  \"b\": [\n    2.5000000000000000e0\n  ]\n}\n"
        );
    }

    #[test]
    fn sweep_csv_round_trip() {
        let sweep = FrequencySweep {
            points: vec![
                SweepPoint {
                    frequency_hz: 1000.0,
                    amplitude_w: 1.234_567_890_123_456_7e-5,
                },
                SweepPoint {
                    frequency_hz: 1100.0,
                    amplitude_w: 3e-9,
                },
            ],
        };
        let mut buf = Vec::new();
        write_amplitude_vs_frequency(&sweep, &mut buf).unwrap();
        assert_eq!(read_amplitude_vs_frequency(&buf[..]).unwrap(), sweep);
        assert!(read_amplitude_vs_frequency(&b"f,a\n1,2\n"[..]).is_err());
    }

    #[test]
    fn report_round_trips_through_json() {
        let mut report = RunReport::new("qkd", &ScenarioConfig::default());
        report.key_records.push(SiftedKeyRecord {
            window_start_s: 0.0,
            pulses_sent: 10,
            clicks_reflected: 1,
            clicks_transmitted: 2,
            double_clicks: 0,
            sifted_bits: 2,
            errors: 1,
            qber_estimate: Some(0.5),
            raw_rate_bps: 2.2e4,
        });
        let text = report.to_json().unwrap();
        assert_eq!(RunReport::from_json(&text).unwrap(), report);
    }
}
