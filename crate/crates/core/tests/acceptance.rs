//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::process::ExitCode;
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use weldloop_core::analysis::{discrete_controller_polys, verify_tuning, SettlingSpec, VerifyOptions};
use weldloop_core::control::{ControllerConfig, SwitchedController, CLOSED_LOOP_START_CURRENT};
use weldloop_core::identification::{fit, FitOptions, Known, Theta, ThetaEa, ThetaSc};
use weldloop_core::metrics::{compute_metrics, rms, MetricsReport};
use weldloop_core::model::{ea_transfer, sc_transfer, ActuatorMap, CircuitParams};
use weldloop_core::simulator::{run_closed_loop, run_open_loop, SimConfig};
use weldloop_core::waveform::{Phase, Waveform};

const E_W: f64 = 21.1;

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    rel(value, target) <= tol
}

fn closed_loop(config: &ControllerConfig, sim: &SimConfig) -> (Waveform, SwitchedController) {
    let p = CircuitParams::table1();
    let a = ActuatorMap::default();
    let mut ctl = SwitchedController::new(&p, &a, config, sim.initial_phase).expect("controller");
    let w = run_closed_loop(&p, &a, sim, config.period, &mut ctl).expect("closed-loop run");
    (w, ctl)
}

fn slopes(m: &MetricsReport) -> String {
    format!("SC {:.2} A/ms, EA -{:.2} A/ms", m.didt_s, m.didt_d)
}

fn slope_tracking() -> Outcome {
    let start = Instant::now();
    let cfg = ControllerConfig::table2();
    let sim = SimConfig {
        duration: 0.1,
        initial_current: CLOSED_LOOP_START_CURRENT,
        ..SimConfig::default()
    };
    let (w, _) = closed_loop(&cfg, &sim);
    let m = match compute_metrics(&w) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("metrics: {e}")),
    };
    let elapsed = start.elapsed().as_secs_f64();
    let pass = within(m.didt_s, 60.0, 0.05) && within(m.didt_d, 20.0, 0.05) && elapsed < 5.0;
    outcome(pass, format!("{} over {} cycles in {elapsed:.3} s", slopes(&m), m.cycle_count))
}

fn open_loop_contrast() -> Outcome {
    let sim = SimConfig {
        duration: 0.1,
        ..SimConfig::default()
    };
    let w = run_open_loop(&CircuitParams::table1(), &sim, |_| E_W).expect("open-loop run");
    let m = match compute_metrics(&w) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("metrics: {e}")),
    };
    let (ds, dd) = (rel(m.didt_s, 60.0), rel(m.didt_d, 20.0));
    outcome(
        ds > 0.2 && dd > 0.2,
        format!("{} (off by {:.0}% / {:.0}%)", slopes(&m), ds * 100.0, dd * 100.0),
    )
}

fn settling_specs() -> Outcome {
    let p = CircuitParams::table1();
    let a = ActuatorMap::default();
    let run = |cfg: ControllerConfig, band: f64| {
        let options = VerifyOptions {
            spec: SettlingSpec {
                band,
                ..SettlingSpec::default()
            },
            ..VerifyOptions::default()
        };
        verify_tuning(&p, &a, &cfg, &options)
    };
    let fmt = |t: &Result<f64, String>| match t {
        Ok(t) => format!("{:.1} us", t * 1e6),
        Err(e) => e.clone(),
    };
    match (run(ControllerConfig::table2(), 0.05), run(ControllerConfig::table3(), 0.10)) {
        (Ok(t2), Ok(t3)) => {
            let ea_ok = matches!(t2.ea.settling, Ok(t) if t <= 500e-6);
            let sc_ok = matches!(t2.sc.settling, Ok(t) if t <= 1.5 * 125e-6);
            let pass = t2.all_pass() && ea_ok && sc_ok && t3.all_pass();
            outcome(
                pass,
                format!(
                    "Table 2 @5%: SC {}, EA {}, late |e| {:.1}/{:.1} A; Table 3 @10%: {}",
                    fmt(&t2.sc.settling),
                    fmt(&t2.ea.settling),
                    t2.sc.late_error,
                    t2.ea.late_error,
                    if t3.all_pass() { "all requirements pass" } else { "requirements fail" }
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("verify_tuning: {e}")),
    }
}

fn scaled(truth: &Theta, factor: f64) -> Theta {
    match truth {
        Theta::Sc(t) => Theta::Sc(ThetaSc {
            bridge_resistance: t.bridge_resistance * factor,
            shunt_resistance: t.shunt_resistance * factor,
            capacitance: t.capacitance * factor,
        }),
        Theta::Ea(t) => Theta::Ea(ThetaEa {
            arc_branch_resistance: t.arc_branch_resistance * factor,
            arc_voltage: t.arc_voltage * factor,
        }),
    }
}

/// Relative error of the estimate, or `None` if the fit failed.
fn recover(w: &Waveform, phase: Phase) -> Option<f64> {
    let p = CircuitParams::table1();
    let truth = Theta::from_params(phase, &p);
    let r = fit(w, phase, &scaled(&truth, 1.3), &Known::from_params(&p), &FitOptions::default()).ok()?;
    Some(r.theta.max_relative_error(&truth))
}

fn identification_round_trip() -> Outcome {
    let start = Instant::now();
    let p = CircuitParams::table1();
    let phases = [Phase::ShortCircuit, Phase::ElectricArc];

    let clean = run_open_loop(&p, &SimConfig { duration: 0.05, ..SimConfig::default() }, |_| E_W).expect("run");
    let clean_err: Vec<f64> = phases
        .par_iter()
        .map(|&ph| recover(&clean, ph).unwrap_or(f64::INFINITY))
        .collect();

    // 50 nominal cycles of 12 ms
    let noisy: Vec<[f64; 2]> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let sim = SimConfig {
                duration: 0.6,
                noise_std_current: 5.0,
                seed,
                ..SimConfig::default()
            };
            let w = run_open_loop(&p, &sim, |_| E_W).expect("run");
            phases.map(|ph| recover(&w, ph).unwrap_or(f64::INFINITY))
        })
        .collect();
    let hits = |k: usize| noisy.iter().filter(|e| e[k] <= 0.05).count();
    let worst = |k: usize| noisy.iter().map(|e| e[k]).fold(0.0, f64::max);
    let elapsed = start.elapsed().as_secs_f64();

    let pass = clean_err.iter().all(|&e| e <= 1e-3) && hits(0) >= 18 && hits(1) >= 18 && elapsed < 60.0;
    outcome(
        pass,
        format!(
            "noise-free error SC {:.1e}, EA {:.1e}; 5 A noise within 5%: SC {}/20 (worst relative error {:.1e}), EA {}/20 (worst {:.1e}); {elapsed:.1} s",
            clean_err[0],
            clean_err[1],
            hits(0),
            worst(0),
            hits(1),
            worst(1)
        ),
    )
}

fn analytic_anchors() -> Outcome {
    let p = CircuitParams::table1();
    let sc = sc_transfer(&p).expect("sc plant");
    let ea = ea_transfer(&p).expect("ea plant");
    let gain = sc.dc_gain().expect("dc gain");
    let gain_formula = 1.0 / (p.source_resistance + p.bridge_resistance + p.shunt_resistance);
    let pole = ea.eigenvalues()[0].re;
    let pole_formula = -(p.source_resistance + p.arc_branch_resistance()) / p.inductance;
    let i_ss = ea.dc_gain().expect("dc gain") * (E_W - p.arc_voltage);
    // 27.78 is quoted to two decimals; the model value must round to it
    let pass = rel(gain, gain_formula) <= 1e-6
        && (gain * 100.0).round() == 2778.0
        && rel(pole, pole_formula) <= 1e-9
        && rel(pole, -577.8) <= 1e-4
        && rel(i_ss, 97.1) <= 1e-3;
    outcome(
        pass,
        format!("SC DC gain {gain:.6} A/V, EA pole {pole:.6} 1/s, EA steady state {i_ss:.4} A"),
    )
}

fn property_checks() -> Outcome {
    let p = CircuitParams::table1();
    let mut failures = Vec::new();

    // inductor current continuity at every switch
    let sim = SimConfig {
        duration: 0.2,
        jitter: 0.2,
        seed: 3,
        initial_current: 100.0,
        ..SimConfig::default()
    };
    let w = run_open_loop(&p, &sim, |_| E_W).expect("run");
    let r_max = p.source_resistance + p.bridge_resistance.max(p.arc_branch_resistance()) + p.shunt_resistance;
    let i_max = w.current.iter().cloned().fold(0.0, f64::max);
    let max_step = (E_W + p.arc_voltage + r_max * i_max) / p.inductance * sim.dt;
    let switches: Vec<usize> = (1..w.len()).filter(|&k| w.phase[k] != w.phase[k - 1]).collect();
    let worst_jump = switches
        .iter()
        .map(|&k| (w.current[k] - w.current[k - 1]).abs())
        .fold(0.0, f64::max);
    if switches.is_empty() || worst_jump > max_step {
        failures.push(format!("continuity: jump {worst_jump:.3} A > {max_step:.3} A"));
    }

    // dt halving
    let source = |t: f64| E_W + 5.0 * (2.0 * std::f64::consts::PI * 200.0 * t).sin();
    let coarse = run_open_loop(&p, &SimConfig { dt: 2e-6, duration: 0.05, ..SimConfig::default() }, source).expect("run");
    let fine = run_open_loop(&p, &SimConfig { dt: 1e-6, duration: 0.05, ..SimConfig::default() }, source).expect("run");
    let diff: Vec<f64> = coarse
        .current
        .iter()
        .enumerate()
        .map(|(k, c)| c - fine.current[2 * k + 1])
        .collect();
    let halving = rms(&diff) / rms(&coarse.current);
    if halving >= 1e-3 {
        failures.push(format!("dt halving: {halving:.2e}"));
    }

    // sampled PID against the continuous law, 10 Hz to 1 kHz
    let mut pid_worst: f64 = 0.0;
    for cfg in [ControllerConfig::table2(), ControllerConfig::table3()] {
        for g in [cfg.sc, cfg.ea] {
            let (num, den) = discrete_controller_polys(&g, cfg.period);
            for k in 0..=40 {
                let w = 2.0 * std::f64::consts::PI * 10f64.powf(1.0 + k as f64 / 20.0);
                let s = Complex64::new(0.0, w);
                let c = g.kp() + g.ki() / s + g.kd() * s / (1.0 + g.filter_time * s);
                let z = Complex64::from_polar(1.0, w * cfg.period);
                let d = num.eval_complex(z) / den.eval_complex(z);
                pid_worst = pid_worst.max(rel(d.norm(), c.norm()));
            }
        }
    }
    if pid_worst >= 0.02 {
        failures.push(format!("PID response: {:.2}%", pid_worst * 100.0));
    }

    // metrics on exact ramps
    let mut ramp = Waveform::with_capacity(36_000);
    let mut i = 300.0;
    for k in 0..36_000usize {
        let (phase, rate) = if k % 12_000 < 2_500 {
            (Phase::ShortCircuit, 60e3)
        } else {
            (Phase::ElectricArc, -20e3 * 2.5 / 9.5)
        };
        ramp.push(k as f64 * 1e-6, i, 20.0, E_W, phase);
        i += rate * 1e-6;
    }
    let rms_ok = rel(rms(&[3.0, 4.0]), (12.5f64).sqrt()) <= 1e-9;
    match compute_metrics(&ramp) {
        Ok(m) if rms_ok && rel(m.didt_s, 60.0) <= 1e-9 && rel(m.didt_d, 20.0 * 2.5 / 9.5) <= 1e-9 => {}
        Ok(m) => failures.push(format!("metrics oracle: {}", slopes(&m))),
        Err(e) => failures.push(format!("metrics oracle: {e}")),
    }

    // determinism
    let noisy = SimConfig {
        duration: 0.05,
        noise_std_current: 2.0,
        noise_std_voltage: 0.5,
        jitter: 0.1,
        seed: 11,
        initial_current: CLOSED_LOOP_START_CURRENT,
        ..SimConfig::default()
    };
    let (a, _) = closed_loop(&ControllerConfig::table2(), &noisy);
    let (b, _) = closed_loop(&ControllerConfig::table2(), &noisy);
    if a.to_csv_string() != b.to_csv_string() {
        failures.push("determinism: reruns differ".into());
    }

    let pass = failures.is_empty();
    let detail = if pass {
        format!(
            "continuity over {} switches, dt halving {halving:.1e}, PID worst {:.2}%, metrics oracles, determinism",
            switches.len(),
            pid_worst * 100.0
        )
    } else {
        failures.join("; ")
    };
    outcome(pass, detail)
}

fn detector_correctness() -> Outcome {
    let mut cfg = ControllerConfig::table2();
    // balanced ramps keep the current cycling over the whole second
    cfg.reference.ea_rate = -cfg.reference.sc_rate * 2.5 / 9.5;
    let sim = SimConfig {
        duration: 1.0,
        jitter: 0.1,
        noise_std_current: 0.2,
        noise_std_voltage: 0.1,
        seed: 7,
        initial_current: 300.0,
        ..SimConfig::default()
    };
    let (w, ctl) = closed_loop(&cfg, &sim);
    let limit = 3.0 * cfg.period + 1e-9;
    let truth: Vec<(f64, Phase)> = (1..w.len())
        .filter(|&k| w.phase[k] != w.phase[k - 1])
        .map(|k| (w.t[k], w.phase[k]))
        .collect();
    let events = ctl.events();
    let caught = truth
        .iter()
        .filter(|(t, ph)| events.iter().any(|e| e.phase == *ph && e.t >= t - 1e-9 && e.t - t <= limit))
        .count();
    let spurious = events
        .iter()
        .filter(|e| !truth.iter().any(|(t, ph)| e.phase == *ph && e.t >= t - 1e-9 && e.t - t <= limit))
        .count();
    let fraction = caught as f64 / truth.len().max(1) as f64;
    outcome(
        !truth.is_empty() && fraction >= 0.99,
        format!(
            "{caught}/{} switches detected within 3 periods ({:.1}%), {spurious} spurious events",
            truth.len(),
            fraction * 100.0
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 7] = [
        ("slope tracking", slope_tracking),
        ("open-loop contrast", open_loop_contrast),
        ("settling specs", settling_specs),
        ("identification round-trip", identification_round_trip),
        ("analytic anchors", analytic_anchors),
        ("property checks", property_checks),
        ("detector correctness", detector_correctness),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("{} criterion {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, n + 1, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
