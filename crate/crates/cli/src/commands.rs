use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use weldloop_core::analysis::{self, gain_sweep, locus_csv, SettlingSpec, VerifyOptions};
use weldloop_core::config::KeyValues;
use weldloop_core::control::{ControllerConfig, SwitchedController, CLOSED_LOOP_START_CURRENT};
use weldloop_core::identification::{
    fit, phase_timing, relabel, residual_csv, FitOptions, FitReport, InitialCurrent, Known, SegmentConfig, Theta,
};
use weldloop_core::metrics::{compare_reports, compute_metrics, target_slopes, Comparison, MetricsReport};
use weldloop_core::model::{ea_transfer, sc_transfer, PlantSpec};
use weldloop_core::simulator::{run_closed_loop, run_open_loop, SimConfig};
use weldloop_core::waveform::{Phase, Waveform};
use weldloop_core::Error;

use crate::manifest::{self, Manifest, RunRecord};
use crate::{
    at_path, Category, CliError, CliResult, FitPhase, IdentifyArgs, InitCurrent, MetricsArgs, Mode, PhaseArg,
    ReplayArgs, SegmentationArgs, SimulateArgs, VerifyArgs,
};

fn load_plant(path: Option<&Path>) -> CliResult<PlantSpec> {
    match path {
        Some(p) => at_path(p, read_text(p).and_then(|t| PlantSpec::parse(&t))),
        None => Ok(PlantSpec::table1()),
    }
}

fn load_gains(path: &Path) -> CliResult<ControllerConfig> {
    at_path(path, read_text(path).and_then(|t| ControllerConfig::parse(&t)))
}

fn read_text(path: &Path) -> weldloop_core::Result<String> {
    Ok(fs::read_to_string(path)?)
}

fn load_waveform(path: &Path) -> CliResult<Waveform> {
    let read = || -> weldloop_core::Result<Waveform> {
        let w = Waveform::read_csv(BufReader::new(fs::File::open(path)?))?;
        w.validate()?;
        Ok(w)
    };
    at_path(path, read())
}

/// Writes files into an output directory and remembers their names for
/// the manifest.
struct OutDir {
    dir: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(Error::from)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        fs::write(self.dir.join(name), contents).map_err(Error::from)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn finish(self, record: &RunRecord) -> CliResult<()> {
        manifest::write(&self.dir, record, &self.written)?;
        Ok(())
    }
}

fn resegment(path: &Path, w: Waveform, a: &SegmentationArgs) -> CliResult<Waveform> {
    if !a.resegment {
        return Ok(w);
    }
    let config = SegmentConfig {
        voltage_threshold: a.v_threshold,
        slope_threshold: a.slope_threshold,
        gradient_window: a.gradient_window,
        ..SegmentConfig::default()
    };
    at_path(path, relabel(&w, &config))
}

fn phase_of(p: PhaseArg) -> Phase {
    match p {
        PhaseArg::Sc => Phase::ShortCircuit,
        PhaseArg::Ea => Phase::ElectricArc,
    }
}

pub fn simulate(a: &SimulateArgs, argv: Vec<String>) -> CliResult<()> {
    let plant = load_plant(a.params.as_deref())?;
    let gains = match (a.mode, &a.gains) {
        (Mode::Closed, Some(g)) => Some(load_gains(g)?),
        (Mode::Closed, None) => {
            return Err(CliError::new(Category::Validation, "closed mode requires --gains"));
        }
        (Mode::Open, _) => None,
    };
    let initial_phase = phase_of(a.initial_phase);
    let config = SimConfig {
        dt: a.dt,
        duration: a.duration,
        noise_std_current: a.noise_current,
        noise_std_voltage: a.noise_voltage,
        jitter: a.jitter,
        seed: a.seed,
        initial_current: a.i0.unwrap_or(match a.mode {
            Mode::Open => 0.0,
            Mode::Closed => CLOSED_LOOP_START_CURRENT,
        }),
        initial_phase,
    };
    config.validate()?;
    if !a.ew.is_finite() {
        return Err(CliError::new(Category::Validation, "--ew must be finite"));
    }

    let mut events = None;
    let w = match &gains {
        None => run_open_loop(&plant.circuit, &config, |_| a.ew)?,
        Some(cfg) => {
            let mut ctl = SwitchedController::new(&plant.circuit, &plant.actuator, cfg, initial_phase)?;
            let w = run_closed_loop(&plant.circuit, &plant.actuator, &config, cfg.period, &mut ctl)?;
            events = Some(ctl.events().to_vec());
            w
        }
    };

    let mut out = OutDir::create(&a.out)?;
    out.write("waveform.csv", w.to_csv_string())?;
    let mut summary = KeyValues::new();
    summary.set("mode", format!("{:?}", a.mode).to_lowercase());
    summary.set("samples", w.len());
    summary.set_f64("dt", a.dt);
    summary.set_f64("duration", w.duration());
    summary.set("seed", a.seed);
    summary.set_f64("initial_current", config.initial_current);
    if let Some(ev) = &events {
        let mut csv = String::from("t_s,phase\n");
        for e in ev {
            let _ = writeln!(csv, "{},{}", weldloop_core::config::format_f64(e.t), e.phase.label());
        }
        out.write("events.csv", csv)?;
        summary.set("switch_events", ev.len());
    }
    let mut text = summary.to_text();
    match compute_metrics(&w) {
        Ok(m) => {
            text.push('\n');
            text.push_str(&m.to_text());
        }
        Err(e) => {
            let _ = writeln!(text, "\nmetrics unavailable: {e}");
        }
    }
    out.write("summary.txt", text)?;
    let inputs = a.params.iter().chain(a.gains.iter().filter(|_| a.mode == Mode::Closed)).cloned().collect();
    out.finish(&RunRecord {
        command: "simulate".into(),
        argv,
        seed: Some(a.seed),
        inputs,
    })
}

fn initial_theta(phase: Phase, plant: &PlantSpec, init: Option<&KeyValues>) -> CliResult<Theta> {
    let mut theta = Theta::from_params(phase, &plant.circuit);
    if let Some(kv) = init {
        theta = match theta {
            Theta::Sc(mut t) => {
                t.bridge_resistance = kv.f64_or("R_1", t.bridge_resistance)?;
                t.shunt_resistance = kv.f64_or("R_2", t.shunt_resistance)?;
                t.capacitance = kv.f64_or("C", t.capacitance)?;
                Theta::Sc(t)
            }
            Theta::Ea(mut t) => {
                t.arc_branch_resistance = kv.f64_or("R_sum", t.arc_branch_resistance)?;
                t.arc_voltage = kv.f64_or("E_ac", t.arc_voltage)?;
                Theta::Ea(t)
            }
        };
    }
    theta.validate()?;
    Ok(theta)
}

pub fn identify(a: &IdentifyArgs, argv: Vec<String>) -> CliResult<()> {
    let plant = load_plant(a.params.as_deref())?;
    let init = match &a.init {
        Some(p) => Some(at_path(p, read_text(p).and_then(|t| KeyValues::parse(&t)))?),
        None => None,
    };
    let mut w = load_waveform(&a.waveform)?;
    w = resegment(&a.waveform, w, &a.segmentation)?;
    let known = Known::from_params(&plant.circuit);
    let options = FitOptions {
        max_iterations: a.max_iterations,
        initial_current: match a.init_current {
            InitCurrent::Fitted => InitialCurrent::Fitted,
            InitCurrent::First => InitialCurrent::FirstSample,
        },
        ..FitOptions::default()
    };
    let phases: Vec<Phase> = match a.phase {
        FitPhase::Sc => vec![Phase::ShortCircuit],
        FitPhase::Ea => vec![Phase::ElectricArc],
        FitPhase::Both => vec![Phase::ShortCircuit, Phase::ElectricArc],
    };
    let starts = phases
        .iter()
        .map(|&p| initial_theta(p, &plant, init.as_ref()))
        .collect::<CliResult<Vec<_>>>()?;
    let reports: Vec<FitReport> = at_path(
        &a.waveform,
        starts
            .par_iter()
            .map(|theta0| fit(&w, theta0.phase(), theta0, &known, &options))
            .collect(),
    )?;

    let mut out = OutDir::create(&a.out)?;
    for r in &reports {
        let tag = r.theta.phase().label().to_lowercase();
        out.write(&format!("fit_{tag}.txt"), r.to_text())?;
        out.write(&format!("residuals_{tag}.csv"), residual_csv(&w, &r.theta, &known, &options)?)?;
    }
    if a.phase == FitPhase::Both {
        let mut identified = plant.clone();
        for r in &reports {
            r.theta.apply_to(&mut identified.circuit);
        }
        let (t_cc, t_ae) = phase_timing(&w)?;
        identified.circuit.short_circuit_time = t_cc;
        identified.circuit.arc_time = t_ae;
        out.write("identified.params", identified.to_text())?;
    }
    let inputs = std::iter::once(a.waveform.clone())
        .chain(a.params.iter().cloned())
        .chain(a.init.iter().cloned())
        .collect();
    out.finish(&RunRecord {
        command: "identify".into(),
        argv,
        seed: None,
        inputs,
    })?;
    let stalled: Vec<String> = reports
        .iter()
        .filter(|r| !r.converged)
        .map(|r| format!("{} fit stopped after {} iterations", r.theta.phase().label(), r.iterations))
        .collect();
    if !stalled.is_empty() {
        return Err(CliError::new(Category::Convergence, stalled.join("; ")));
    }
    Ok(())
}

pub fn verify_tuning(a: &VerifyArgs, argv: Vec<String>) -> CliResult<()> {
    let plant = load_plant(a.params.as_deref())?;
    let mut config = load_gains(&a.gains)?;
    if !(a.kp_scale.is_finite() && a.kp_scale > 0.0) {
        return Err(CliError::new(Category::Validation, "--kp-scale must be > 0"));
    }
    config.sc = config.sc.with_proportional(config.sc.proportional * a.kp_scale);
    config.ea = config.ea.with_proportional(config.ea.proportional * a.kp_scale);
    let options = VerifyOptions {
        spec: SettlingSpec {
            band: a.band,
            sc_tolerance: a.sc_tolerance,
            ..SettlingSpec::default()
        },
        ramp_error_limit: a.ramp_error_limit,
        ..VerifyOptions::default()
    };
    let report = analysis::verify_tuning(&plant.circuit, &plant.actuator, &config, &options)?;
    let mut loci = Vec::new();
    if a.sweep > 0 {
        for (tag, system, gains) in [
            ("sc", sc_transfer(&plant.circuit)?, config.sc),
            ("ea", ea_transfer(&plant.circuit)?, config.ea),
        ] {
            let kp = gains.proportional;
            let points = gain_sweep(&system, &gains, kp * a.sweep_min, kp * a.sweep_max, a.sweep)?;
            loci.push((format!("locus_{tag}.csv"), locus_csv(&points)));
        }
    }
    match &a.out {
        None => print!("{}", report.to_text()),
        Some(dir) => {
            let mut out = OutDir::create(dir)?;
            out.write("tuning.txt", report.to_text())?;
            out.write("tuning.csv", report.to_csv())?;
            for (name, csv) in &loci {
                out.write(name, csv)?;
            }
            let inputs = a.params.iter().cloned().chain(std::iter::once(a.gains.clone())).collect();
            out.finish(&RunRecord {
                command: "verify-tuning".into(),
                argv,
                seed: None,
                inputs,
            })?;
        }
    }
    Ok(())
}

fn comparison_csv(rows: &[(String, Comparison)]) -> String {
    let mut s = String::from("file,field,a,b,abs_delta,rel_delta,slope_ok\n");
    for (name, c) in rows {
        for line in c.to_csv().lines().skip(1) {
            let _ = writeln!(s, "{name},{line}");
        }
    }
    s
}

fn comparison_text(title: &str, rows: &[(String, Comparison)]) -> String {
    let mut s = String::new();
    for (name, c) in rows {
        let _ = writeln!(s, "== {name} vs {title}");
        s.push_str(&c.to_text());
        let _ = writeln!(s, "slopes: {}\n", if c.slopes_ok() { "PASS" } else { "FAIL" });
    }
    s
}

pub fn metrics(a: &MetricsArgs, argv: Vec<String>) -> CliResult<()> {
    let results: Vec<CliResult<MetricsReport>> = a
        .files
        .par_iter()
        .map(|path| {
            let w = resegment(path, load_waveform(path)?, &a.segmentation)?;
            at_path(path, compute_metrics(&w))
        })
        .collect();

    let names: Vec<String> = a.files.iter().map(|p| p.display().to_string()).collect();
    let mut text = String::new();
    let mut csv = format!("file,{}\n", MetricsReport::csv_header());
    let mut first_error = None;
    for (name, r) in names.iter().zip(&results) {
        let _ = writeln!(text, "== {name}");
        match r {
            Ok(m) => {
                text.push_str(&m.to_text());
                let _ = writeln!(csv, "{name},{}", m.csv_row());
            }
            Err(e) => {
                let _ = writeln!(text, "error[{}]: {}", e.category.tag(), e.message);
                if first_error.is_none() {
                    first_error = Some(CliError::new(e.category, e.message.clone()));
                }
            }
        }
        text.push('\n');
    }

    let ok: Vec<(&String, &MetricsReport)> = names
        .iter()
        .zip(&results)
        .filter_map(|(n, r)| r.as_ref().ok().map(|m| (n, m)))
        .collect();
    let mut pairwise = Vec::new();
    if let Ok(base) = &results[0] {
        for (name, m) in ok.iter().skip(1) {
            pairwise.push(((*name).clone(), compare_reports(m, base)));
        }
    }
    let mut against_target = Vec::new();
    if a.target {
        let target = target_slopes(a.alpha_sc, a.alpha_ea);
        for (name, m) in &ok {
            let mut c = compare_reports(m, &target);
            c.rows.retain(|r| r.slope_ok.is_some());
            against_target.push(((*name).clone(), c));
        }
    }

    let comparison = if a.files.len() >= 2 {
        comparison_text(&names[0], &pairwise)
    } else {
        String::new()
    };
    let target = comparison_text("target", &against_target);
    match &a.out {
        None => {
            print!("{text}{comparison}{target}");
        }
        Some(dir) => {
            let mut out = OutDir::create(dir)?;
            out.write("metrics.txt", &text)?;
            out.write("metrics.csv", &csv)?;
            if a.files.len() >= 2 {
                out.write("comparison.txt", &comparison)?;
                out.write("comparison.csv", comparison_csv(&pairwise))?;
            }
            if a.target {
                out.write("target.txt", &target)?;
                out.write("target.csv", comparison_csv(&against_target))?;
            }
            out.finish(&RunRecord {
                command: "metrics".into(),
                argv,
                seed: None,
                inputs: a.files.clone(),
            })?;
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn replay(a: &ReplayArgs) -> CliResult<()> {
    let mpath = std::path::absolute(&a.manifest).map_err(Error::from)?;
    let out = std::path::absolute(&a.out).map_err(Error::from)?;
    let m = at_path(&mpath, Manifest::read(&mpath))?;
    if m.argv.first().map(String::as_str) == Some("replay") {
        return Err(CliError::new(Category::Validation, "a replay manifest cannot be replayed"));
    }
    let argv = at_path(&mpath, m.argv_with_out(&out))?;
    std::env::set_current_dir(&m.cwd).map_err(Error::from)?;
    for (path, want) in &m.inputs {
        let got = at_path(path, manifest::sha256_file(path))?;
        if &got != want {
            return Err(CliError::new(
                Category::Validation,
                format!("input {} changed since the recorded run", path.display()),
            ));
        }
    }
    crate::run(argv)?;
    let mut differing = Vec::new();
    for (name, want) in &m.outputs {
        if &at_path(&out.join(name), manifest::sha256_file(&out.join(name)))? != want {
            differing.push(name.as_str());
        }
    }
    if !differing.is_empty() {
        return Err(CliError::new(
            Category::Validation,
            format!("replayed outputs differ: {}", differing.join(", ")),
        ));
    }
    println!("replay: {} outputs identical", m.outputs.len());
    Ok(())
}
