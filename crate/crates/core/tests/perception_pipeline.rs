use sagnac_core::disturbance::{
    DisturbanceEvent, DisturbanceKind, ImpactParams, PressureParams, PztParams,
};
use sagnac_core::optics::LoopChannel;
use sagnac_core::perception::*;
use std::f64::consts::PI;

fn quadrature() -> LoopChannel {
    LoopChannel::default().with_bias(PI / 2.0)
}

fn drive(amp: f64) -> PztParams {
    PztParams {
        drive_amplitude_v: amp,
        angular_frequency_rad_per_s: 0.0,
        phase_gain_rad_per_v: 1.0,
    }
}

#[test]
fn sweep_finds_first_null_at_five_km() {
    let ch = quadrature();
    let sweep = frequency_sweep(
        5_000.0,
        &drive(0.05),
        &ch,
        &SweepSettings {
            seed: 1,
            ..Default::default()
        },
    )
    .unwrap();
    let found =
        find_null_frequencies(NullInput::Sweep(&sweep), 4, &NullSettings::default()).unwrap();
    eprintln!("{:?}", found);
    let f1 = theoretical_null_frequency(1, 5_000.0, &ch).unwrap();
    assert_eq!(found.nulls[0].harmonic_k, 1);
    assert!((found.nulls[0].f_null_hz - f1).abs() < 200.0);
    assert_eq!(found.nulls[1].harmonic_k, 2);
    assert!((found.nulls[1].f_null_hz - 2.0 * f1).abs() < 200.0);
    let report = build_report(&found.nulls, &ch, DEFAULT_RESOLUTION_HZ).unwrap();
    eprintln!("{:?}", report);
    assert!((report.position_x_m - 5_000.0).abs() < report.resolution_rs_m);
}

#[test]
fn midpoint_sweep_has_no_nulls() {
    let ch = quadrature();
    let sweep = frequency_sweep(
        15_000.0,
        &drive(0.05),
        &ch,
        &SweepSettings {
            seed: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let found =
        find_null_frequencies(NullInput::Sweep(&sweep), 4, &NullSettings::default()).unwrap();
    assert!(found.nulls.is_empty(), "{:?}", found.nulls);
    assert!(found.diagnostic.is_some());
}

#[test]
fn broadband_impact_localizes() {
    let ch = quadrature();
    let event = DisturbanceEvent::new(
        5_000.0,
        0.025,
        DisturbanceKind::TransientImpact(ImpactParams {
            mass_kg: 0.2,
            drop_height_m: 0.5,
            effective_width_s: 10e-6,
            impact_gain_rad_per_kg_m_per_s: 1.0,
        }),
    );
    let trace = synthesize_trace(
        &[event],
        &ch,
        &TraceSettings {
            seed: 5,
            ..Default::default()
        },
    )
    .unwrap();
    let found =
        find_null_frequencies(NullInput::Trace(&trace), 4, &NullSettings::default()).unwrap();
    eprintln!("{:?}", found);
    let report = build_report(&found.nulls, &ch, DEFAULT_RESOLUTION_HZ).unwrap();
    eprintln!("{:?}", report);
    assert!((report.position_x_m - 5_000.0).abs() < report.resolution_rs_m);
}

#[test]
fn pressure_trace_is_noise() {
    let ch = quadrature();
    let event = DisturbanceEvent::new(
        5_000.0,
        0.0,
        DisturbanceKind::QuasiStaticPressure(PressureParams::default()),
    );
    let s = TraceSettings {
        seed: 8,
        ..Default::default()
    };
    let with = welch(&synthesize_trace(&[event], &ch, &s).unwrap(), None).unwrap();
    let without = welch(&synthesize_trace(&[], &ch, &s).unwrap(), None).unwrap();
    assert_eq!(with, without);
}
