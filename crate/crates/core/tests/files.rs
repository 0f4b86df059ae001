use sagnac_core::config::parse_config;
use sagnac_core::disturbance::{DisturbanceEvent, DisturbanceKind, ImpactParams};
use sagnac_core::io::{load_trace, save_trace, RunReport};
use sagnac_core::optics::LoopChannel;
use sagnac_core::perception::{synthesize_trace, TraceSettings};
use std::fs;

#[test]
fn trace_file_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ch = LoopChannel::default().with_bias(std::f64::consts::FRAC_PI_2);
    let ev = DisturbanceEvent::new(
        5_000.0,
        0.0,
        DisturbanceKind::TransientImpact(ImpactParams {
            mass_kg: 0.2,
            drop_height_m: 0.5,
            effective_width_s: 10e-6,
            impact_gain_rad_per_kg_m_per_s: 1.0,
        }),
    );
    let settings = TraceSettings {
        duration_s: 2e-3,
        seed: 9,
        ..Default::default()
    };
    let trace = synthesize_trace(&[ev], &ch, &settings).unwrap();
    let path = dir.path().join("trace.csv");
    save_trace(&trace, &path).unwrap();
    let back = load_trace(&path).unwrap();
    assert_eq!(back.sample_rate_hz, trace.sample_rate_hz);
    assert_eq!(back.samples, trace.samples);
}

#[test]
fn config_file_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.toml");
    fs::write(&path, "seed = 11\n[channel]\nlength_m = 25000.0\n").unwrap();
    let cfg = parse_config(&path).unwrap();
    assert_eq!(cfg.channel.length_m, 25_000.0);
    let report = RunReport::new("qkd", &cfg);
    let back = RunReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(back.config, cfg);
    assert!(parse_config(dir.path().join("absent.toml")).is_err());
}
