use crate::{Common, Failure, OUT_DIR_ENV};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sagnac_core::config::{parse_config_str, with_override, ConfigError, Scenario, ScenarioConfig};
use sagnac_core::controller::{run_scenario, significance_test, ScenarioOutcome};
use sagnac_core::derive_seed;
use sagnac_core::disturbance::DisturbanceKind;
use sagnac_core::io::{
    fmt_f64, load_trace, read_amplitude_vs_frequency, write_amplitude_vs_frequency,
    write_icr_vs_mass, write_jsonl, write_nulls, write_qber_vs_time, write_spectrum, write_trace,
    IoError, RunReport,
};
use sagnac_core::perception::{
    build_report, combined_gpd, find_null_frequencies, frequency_sweep, synthesize_trace, welch,
    NullInput, NullSearch, SweepSettings, TraceSettings,
};
use sagnac_core::qkd::{qber_threshold_check, run_session_with, summarize, BreachCheck};
use sagnac_core::wm::staircase;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

struct Ctx {
    /// Effective config: file contents with the seed override applied.
    config: ScenarioConfig,
    text: String,
    out_dir: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn load(common: &Common) -> Result<Self, Failure> {
        let text = match &common.config {
            Some(path) => fs::read_to_string(path).map_err(|e| {
                Failure::Config(ConfigError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })
            })?,
            None => String::new(),
        };
        let mut config = parse_config_str(&text)?;
        let out_dir = common
            .out_dir
            .clone()
            .or_else(|| config.output.dir.as_ref().map(PathBuf::from))
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("sagnac-out"));
        apply_seed(&mut config, common.seed)?;
        Ok(Self {
            config,
            text,
            out_dir,
            quiet: common.quiet,
        })
    }

    fn progress(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    fn build(&self) -> Result<Scenario, Failure> {
        if self.config.calibration.enabled {
            self.progress("calibrating the key-distribution operating point");
        }
        Ok(self.config.build()?)
    }

    fn report(&self, command: &str) -> RunReport {
        RunReport::new(command, &echo(&self.config))
    }

    fn write(
        &self,
        name: &str,
        f: impl FnOnce(File) -> Result<(), IoError>,
    ) -> Result<(), Failure> {
        write_in(&self.out_dir, name, f)
    }

    fn finish(&self, report: &RunReport) -> Result<(), Failure> {
        self.write("config_echo.toml", |mut f| {
            f.write_all(report.config.to_toml().as_bytes())?;
            Ok(())
        })?;
        self.write("report.json", |mut f| {
            f.write_all(report.to_json()?.as_bytes())?;
            Ok(())
        })
    }
}

fn apply_seed(config: &mut ScenarioConfig, seed: Option<u64>) -> Result<(), Failure> {
    if let Some(seed) = seed {
        config.seed = seed;
        let errors = config.validate();
        if !errors.is_empty() {
            return Err(ConfigError::Invalid(errors).into());
        }
    }
    Ok(())
}

/// The config as echoed into reports: output location is not part of the run.
fn echo(config: &ScenarioConfig) -> ScenarioConfig {
    let mut c = config.clone();
    c.output.dir = None;
    c
}

fn write_in(
    dir: &Path,
    name: &str,
    f: impl FnOnce(File) -> Result<(), IoError>,
) -> Result<(), Failure> {
    let fail = |e: String| Failure::Analysis(format!("writing {}: {e}", dir.join(name).display()));
    fs::create_dir_all(dir).map_err(|e| fail(e.to_string()))?;
    let file = File::create(dir.join(name)).map_err(|e| fail(e.to_string()))?;
    f(file).map_err(|e| fail(e.to_string()))
}

pub fn qkd(common: &Common) -> Result<(), Failure> {
    let ctx = Ctx::load(common)?;
    let scenario = ctx.build()?;
    let script = &scenario.script;
    let dynamic: Vec<_> = script
        .events
        .iter()
        .copied()
        .filter(|e| e.is_dynamic())
        .collect();
    let channel = script.qkd.channel;
    ctx.progress(&format!(
        "running {} s of key distribution at {} pulses per window",
        script.duration_s, script.qkd.session.pulses_per_window
    ));
    let gpd = |t: f64| combined_gpd(t, &dynamic, &channel);
    let records = run_session_with(
        script.duration_s,
        derive_seed(script.seed, 0),
        &script.qkd,
        &gpd,
    )
    .map_err(|e| Failure::Analysis(e.to_string()))?;
    let summary = summarize(&records);
    let breaches = records
        .iter()
        .filter(|r| qber_threshold_check(r, script.qber_threshold) == BreachCheck::Breach)
        .count();
    ctx.write("qber_vs_time.csv", |f| write_qber_vs_time(&records, f))?;
    let mut report = ctx.report("qkd");
    report.calibration = scenario.calibration;
    report.summary = Some(summary);
    report.key_records = records;
    ctx.finish(&report)?;
    println!(
        "windows {}  sifted bits {}  pooled QBER {}  mean raw rate {:.1} bps  windows above threshold {}",
        summary.windows,
        summary.sifted_bits,
        summary.pooled_qber.map_or("n/a".into(), |q| format!("{q:.5}")),
        summary.mean_raw_rate_bps,
        breaches
    );
    Ok(())
}

fn require_nulls(
    ctx: &Ctx,
    mut report: RunReport,
    found: &NullSearch,
    method: &str,
) -> Result<RunReport, Failure> {
    report.method = Some(method.into());
    if found.nulls.is_empty() {
        let msg = format!(
            "{method} analysis found no nulls: {}",
            found.diagnostic.clone().unwrap_or_default()
        );
        report.diagnostics.push(msg.clone());
        ctx.finish(&report)?;
        return Err(Failure::Analysis(msg));
    }
    ctx.write("nulls.csv", |f| write_nulls(&found.nulls, f))?;
    let loc = build_report(
        &found.nulls,
        &ctx.config.channel(),
        ctx.config.perception.delta_f_hz,
    )
    .map_err(|e| Failure::Analysis(e.to_string()))?;
    println!(
        "{method}: {} null(s), first at {:.2} Hz; x = {:.1} m (mirror {:.1} m), R_s = {:.1} m, sigma_x = {:.1} m",
        loc.nulls.len(),
        loc.nulls[0].f_null_hz,
        loc.position_x_m,
        loc.mirror_position_m,
        loc.resolution_rs_m,
        loc.sigma_x_m
    );
    report.localization_reports.push(loc);
    Ok(report)
}

pub fn perceive(common: &Common) -> Result<(), Failure> {
    let ctx = Ctx::load(common)?;
    let scenario = ctx.config.build_uncalibrated()?;
    let script = &scenario.script;
    let p = &script.perception;
    let cw = script.qkd.channel.with_bias(p.bias_gpd_rad);
    let seed = derive_seed(script.seed, 100);
    let pzt = script.events.iter().find_map(|e| match e.kind {
        DisturbanceKind::PztSinusoid(d) => Some((e.position_m, d)),
        _ => None,
    });
    let mut report = ctx.report("perceive");
    let report = if let Some((x, drive)) = pzt {
        let settings = SweepSettings { seed, ..p.sweep };
        ctx.progress(&format!(
            "sweeping the drive over {} frequencies",
            settings.frequencies().len()
        ));
        let sweep = frequency_sweep(x, &drive, &cw, &settings)
            .map_err(|e| Failure::Analysis(e.to_string()))?;
        ctx.write("amplitude_vs_frequency.csv", |f| {
            write_amplitude_vs_frequency(&sweep, f)
        })?;
        let found = find_null_frequencies(NullInput::Sweep(&sweep), p.max_k, &p.nulls)
            .map_err(|e| Failure::Analysis(e.to_string()))?;
        require_nulls(&ctx, report, &found, "swept_sine")?
    } else {
        let dynamic: Vec<_> = script
            .events
            .iter()
            .copied()
            .filter(|e| e.is_dynamic())
            .collect();
        // Centre the capture on the earliest dynamic event.
        let start = dynamic
            .iter()
            .map(|e| e.start_time_s)
            .reduce(f64::min)
            .map_or(0.0, |t0| (t0 - 0.5 * p.trace.duration_s).max(0.0));
        let settings = TraceSettings {
            start_time_s: start,
            seed,
            ..p.trace
        };
        ctx.progress("synthesizing the interference trace");
        let trace = synthesize_trace(&script.events, &cw, &settings)
            .map_err(|e| Failure::Analysis(e.to_string()))?;
        ctx.write("trace.csv", |f| write_trace(&trace, f))?;
        let spectrum =
            welch(&trace, p.nulls.segment_len).map_err(|e| Failure::Analysis(e.to_string()))?;
        ctx.write("spectrum.csv", |f| write_spectrum(&spectrum, f))?;
        let test = significance_test(&spectrum, p.nulls.min_frequency_hz);
        println!(
            "peak {:.1} Hz, peak/median PSD ratio {:.3e} ({})",
            test.peak_frequency_hz,
            test.ratio,
            if test.ratio > script.significance_threshold {
                "significant"
            } else {
                "minor"
            }
        );
        report.significance = Some(test);
        let found = find_null_frequencies(NullInput::Trace(&trace), p.max_k, &p.nulls)
            .map_err(|e| Failure::Analysis(e.to_string()))?;
        require_nulls(&ctx, report, &found, "broadband")?
    };
    ctx.finish(&report)
}

pub fn localize(
    common: &Common,
    trace: Option<&Path>,
    sweep: Option<&Path>,
) -> Result<(), Failure> {
    let ctx = Ctx::load(common)?;
    let p = &ctx.config.perception;
    let null_settings = ctx.config.null_settings();
    let bad_input = |path: &Path, e: IoError| Failure::Input {
        key: path.display().to_string(),
        message: e.to_string(),
    };
    let (found, method) = match (trace, sweep) {
        (Some(path), _) => {
            let trace = load_trace(path).map_err(|e| bad_input(path, e))?;
            let found = find_null_frequencies(NullInput::Trace(&trace), p.max_k, &null_settings)
                .map_err(|e| Failure::Analysis(e.to_string()))?;
            (found, "broadband")
        }
        (None, Some(path)) => {
            let file = File::open(path).map_err(|e| bad_input(path, e.into()))?;
            let sweep = read_amplitude_vs_frequency(file).map_err(|e| bad_input(path, e))?;
            let found = find_null_frequencies(NullInput::Sweep(&sweep), p.max_k, &null_settings)
                .map_err(|e| Failure::Analysis(e.to_string()))?;
            (found, "swept_sine")
        }
        (None, None) => unreachable!("clap requires one input"),
    };
    let report = require_nulls(&ctx, ctx.report("localize"), &found, method)?;
    ctx.finish(&report)
}

pub fn wm(common: &Common, masses: Option<&[f64]>) -> Result<(), Failure> {
    let ctx = Ctx::load(common)?;
    let scenario = ctx.config.build_uncalibrated()?;
    let masses = masses.unwrap_or(&scenario.masses_kg);
    if let Some(m) = masses.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
        return Err(Failure::Input {
            key: "--masses".into(),
            message: format!("masses must be non-negative, got {m}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scenario.script.seed, 1));
    let readings =
        staircase(&scenario.wm, masses, &mut rng).map_err(|e| Failure::Analysis(e.to_string()))?;
    ctx.write("icr_vs_mass.csv", |f| write_icr_vs_mass(&readings, f))?;
    for r in &readings {
        println!(
            "mass {:.4} kg  applied dtau {:.4e} s  ICR {:.6e}  inferred dtau {:.4e} s  inferred mass {:.4} kg",
            r.applied_mass_kg, r.applied_delta_tau_s, r.icr, r.inferred_delta_tau, r.inferred_mass
        );
    }
    let mut report = ctx.report("wm");
    report.wm_readings = readings;
    ctx.finish(&report)
}

fn outcome_report(mut report: RunReport, scenario: &Scenario, out: &ScenarioOutcome) -> RunReport {
    report.calibration = scenario.calibration;
    report.key_records = out.key_records().copied().collect();
    report.summary = Some(summarize(&report.key_records));
    report.localization_reports = out.reports.clone();
    report.wm_polls = out.wm_polls.clone();
    report.event_log = out.log.clone();
    report.final_mode = Some(out.final_mode);
    report.diagnostics = out.diagnostics.clone();
    report
}

pub fn integrated(common: &Common) -> Result<(), Failure> {
    let ctx = Ctx::load(common)?;
    let scenario = ctx.build()?;
    ctx.progress(&format!(
        "running the integrated scenario over {} s",
        scenario.script.duration_s
    ));
    let out = run_scenario(&scenario.script).map_err(|e| Failure::Analysis(e.to_string()))?;
    let report = outcome_report(ctx.report("integrated"), &scenario, &out);
    ctx.write("events.jsonl", |f| write_jsonl(&out.log, f))?;
    ctx.write("qber_vs_time.csv", |f| {
        write_qber_vs_time(&report.key_records, f)
    })?;
    if !out.wm_polls.is_empty() {
        let readings: Vec<_> = out.wm_polls.iter().map(|p| p.reading).collect();
        ctx.write("icr_vs_mass.csv", |f| write_icr_vs_mass(&readings, f))?;
    }
    ctx.finish(&report)?;
    let modes: Vec<String> = out.modes_visited().iter().map(|m| m.to_string()).collect();
    println!("modes: {}", modes.join(" -> "));
    for r in &out.reports {
        println!(
            "report: x = {:.1} m, R_s = {:.1} m",
            r.position_x_m, r.resolution_rs_m
        );
    }
    println!(
        "final mode {} at t = {:.3} s",
        out.final_mode, out.end_time_s
    );
    if out.diagnostics.is_empty() {
        Ok(())
    } else {
        Err(Failure::Analysis(out.diagnostics.join("; ")))
    }
}

pub fn sweep(common: &Common, key: &str, values: &[String]) -> Result<(), Failure> {
    let ctx = Ctx::load(common)?;
    let configs = values
        .iter()
        .map(|v| {
            let text = with_override(&ctx.text, key, v)?;
            let mut config = parse_config_str(&text)?;
            config.seed = ctx.config.seed;
            Ok(config)
        })
        .collect::<Result<Vec<_>, ConfigError>>()?;
    ctx.progress(&format!("running {} scenarios over {key}", configs.len()));
    let runs: Vec<Result<(Scenario, ScenarioOutcome), String>> = configs
        .par_iter()
        .map(|c| {
            let scenario = c.build().map_err(|e| e.to_string())?;
            let out = run_scenario(&scenario.script).map_err(|e| e.to_string())?;
            Ok((scenario, out))
        })
        .collect();
    let mut summary = String::from(
        "index,value,final_mode,reports,position_x_m,pooled_qber,mean_raw_rate_bps,diagnostics\n",
    );
    let mut failures = Vec::new();
    for (i, ((value, config), run)) in values.iter().zip(&configs).zip(&runs).enumerate() {
        let dir = ctx.out_dir.join(format!("run_{i:03}"));
        let value_cell = format!("\"{}\"", value.replace('"', "\"\""));
        match run {
            Ok((scenario, out)) => {
                let report =
                    outcome_report(RunReport::new("integrated", &echo(config)), scenario, out);
                write_in(&dir, "report.json", |mut f| {
                    f.write_all(report.to_json()?.as_bytes())?;
                    Ok(())
                })?;
                let s = report.summary.expect("set by outcome_report");
                summary.push_str(&format!(
                    "{i},{value_cell},{},{},{},{},{},{}\n",
                    out.final_mode,
                    out.reports.len(),
                    out.reports
                        .first()
                        .map_or(String::new(), |r| fmt_f64(r.position_x_m)),
                    s.pooled_qber.map_or(String::new(), fmt_f64),
                    fmt_f64(s.mean_raw_rate_bps),
                    out.diagnostics.len()
                ));
                if !out.diagnostics.is_empty() {
                    failures.push(format!("{key} = {value}: {}", out.diagnostics.join("; ")));
                }
            }
            Err(e) => {
                summary.push_str(&format!("{i},{value_cell},,,,,,1\n"));
                failures.push(format!("{key} = {value}: {e}"));
            }
        }
    }
    ctx.write("sweep_summary.csv", |mut f| {
        f.write_all(summary.as_bytes())?;
        Ok(())
    })?;
    print!("{summary}");
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Analysis(failures.join("; ")))
    }
}
