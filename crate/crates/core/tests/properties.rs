use num_complex::Complex64;
use proptest::prelude::*;
use weldloop_core::analysis::{
    closed_loop_poles, controller_polys, discrete_controller_polys, gain_sweep, settling_time, ErrorTrace,
};
use weldloop_core::control::{pid_step, ControllerConfig, DetectorConfig, PhaseDetector, PidGains, PidState};
use weldloop_core::identification::{fit, FitOptions, Known, Theta, ThetaEa};
use weldloop_core::metrics::{compute_metrics, rms};
use weldloop_core::model::{ea_transfer, sc_transfer, ActuatorMap, CircuitParams};
use weldloop_core::simulator::{run_open_loop, SimConfig};
use weldloop_core::waveform::{Phase, Waveform};

/// Table 1 with every identified value scaled independently.
fn params() -> impl Strategy<Value = CircuitParams> {
    prop::array::uniform8(0.5f64..2.0).prop_map(|f| {
        let mut p = CircuitParams::table1();
        p.inductance *= f[0];
        p.source_resistance *= f[1];
        p.capacitance *= f[2];
        p.bridge_resistance *= f[3];
        p.shunt_resistance *= f[4];
        p.arc_resistance *= f[5];
        p.reignition_resistance *= f[6];
        p.arc_voltage *= f[7];
        p
    })
}

fn sim(duration: f64, seed: u64) -> SimConfig {
    SimConfig {
        duration,
        seed,
        ..SimConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn passive_circuits_are_stable(p in params()) {
        for sys in [sc_transfer(&p).unwrap(), ea_transfer(&p).unwrap()] {
            prop_assert!(sys.is_stable(), "{:?}", sys.eigenvalues());
        }
    }

    #[test]
    fn dc_gains_follow_series_resistance(p in params()) {
        let sc = sc_transfer(&p).unwrap().dc_gain().unwrap();
        let want = 1.0 / (p.source_resistance + p.bridge_resistance + p.shunt_resistance);
        prop_assert!(((sc - want) / want).abs() < 1e-9);
        let ea = ea_transfer(&p).unwrap().dc_gain().unwrap();
        let want = 1.0 / (p.source_resistance + p.arc_branch_resistance());
        prop_assert!(((ea - want) / want).abs() < 1e-9);
    }

    #[test]
    fn sc_response_matches_branch_impedance(p in params(), lw in -1.0f64..5.0) {
        let w = 10f64.powf(lw);
        let s = Complex64::new(0.0, w);
        let z = s * p.inductance + p.source_resistance + p.bridge_resistance
            + p.shunt_resistance / (1.0 + s * p.shunt_resistance * p.capacitance);
        let want = 1.0 / z;
        let got = sc_transfer(&p).unwrap().frequency_response(w);
        prop_assert!((got - want).norm() <= 1e-9 * want.norm());
    }

    #[test]
    fn duty_round_trip(v in 0.0f64..100.0) {
        let a = ActuatorMap::default();
        let (d, _) = a.volts_to_duty(v);
        prop_assert!((a.duty_to_volts(d) - v).abs() <= 1e-12 * v.max(1.0));
    }

    #[test]
    fn current_stays_bounded_and_nonnegative(p in params(), e in 0.0f64..100.0, i0 in 0.0f64..500.0) {
        let cfg = SimConfig { initial_current: i0, ..sim(0.03, 0) };
        let w = run_open_loop(&p, &cfg, |_| e).unwrap();
        let r_min = p.source_resistance + p.bridge_resistance.min(p.arc_branch_resistance());
        // no phase can drive more than E / R_min, and the inductor only
        // relaxes from its initial value
        let bound = i0.max(e / r_min) * 1.01 + 1e-9;
        for &i in &w.current {
            prop_assert!(i.is_finite() && i >= 0.0 && i <= bound, "{i} > {bound}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn inductor_current_is_continuous_across_switches(p in params(), e in 5.0f64..60.0, seed in 0u64..100) {
        let cfg = SimConfig { jitter: 0.2, initial_current: 100.0, ..sim(0.05, seed) };
        let w = run_open_loop(&p, &cfg, |_| e).unwrap();
        // one step can move the current by at most |dI/dt|max * dt
        let i_max = w.current.iter().cloned().fold(0.0, f64::max);
        let r_max = p.source_resistance + p.bridge_resistance.max(p.arc_branch_resistance()) + p.shunt_resistance;
        let slope = (e + p.arc_voltage + r_max * i_max) / p.inductance;
        let mut switches = 0;
        for k in 1..w.len() {
            if w.phase[k] != w.phase[k - 1] {
                switches += 1;
                let jump = (w.current[k] - w.current[k - 1]).abs();
                prop_assert!(jump <= slope * cfg.dt * 1.001, "jump {jump} at {}", w.t[k]);
            }
        }
        prop_assert!(switches >= 4);
    }

    #[test]
    fn halving_the_step_changes_little(p in params(), amp in 0.0f64..10.0, freq in 50.0f64..500.0) {
        let source = |t: f64| 25.0 + amp * (2.0 * std::f64::consts::PI * freq * t).sin();
        let coarse = run_open_loop(&p, &SimConfig { dt: 2e-6, ..sim(0.03, 0) }, source).unwrap();
        let fine = run_open_loop(&p, &SimConfig { dt: 1e-6, ..sim(0.03, 0) }, source).unwrap();
        let diff: Vec<f64> = coarse.current.iter().enumerate().map(|(k, c)| c - fine.current[2 * k + 1]).collect();
        let scale = rms(&coarse.current);
        prop_assert!(rms(&diff) < 1e-3 * scale, "{} vs {scale}", rms(&diff));
    }

    #[test]
    fn runs_are_deterministic(seed in any::<u64>(), jitter in 0.0f64..0.3, noise in 0.0f64..5.0) {
        let cfg = SimConfig { jitter, noise_std_current: noise, noise_std_voltage: noise / 5.0, ..sim(0.03, seed) };
        let a = run_open_loop(&CircuitParams::table1(), &cfg, |_| 21.1).unwrap();
        let b = run_open_loop(&CircuitParams::table1(), &cfg, |_| 21.1).unwrap();
        prop_assert_eq!(a.to_csv_string(), b.to_csv_string());
    }

    #[test]
    fn metrics_ignore_time_translation(offset in -1.0f64..1.0, seed in 0u64..50) {
        let cfg = SimConfig { jitter: 0.1, noise_std_current: 1.0, ..sim(0.06, seed) };
        let w = run_open_loop(&CircuitParams::table1(), &cfg, |_| 21.1).unwrap();
        let a = compute_metrics(&w).unwrap();
        let b = compute_metrics(&w.time_shifted(offset)).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn sampled_pid_matches_continuous_below_1_khz(
        kp in 0.5f64..10.0,
        ti in 0.5e-3f64..50e-3,
        td in 0.4e-3f64..5e-3,
        lf in 0.0f64..3.0,
    ) {
        let g = PidGains::standard(kp, ti, td).unwrap();
        let w = 2.0 * std::f64::consts::PI * 10f64.powf(lf);
        let s = Complex64::new(0.0, w);
        let c = g.kp() + g.ki() / s + g.kd() * s / (1.0 + g.filter_time * s);
        let (num, den) = discrete_controller_polys(&g, 10e-6);
        let z = Complex64::from_polar(1.0, w * 10e-6);
        let d = num.eval_complex(z) / den.eval_complex(z);
        prop_assert!(((d.norm() - c.norm()) / c.norm()).abs() < 0.02);
    }

    #[test]
    fn integrator_never_leaves_the_actuator_range(errors in prop::collection::vec(-500.0f64..500.0, 1..400)) {
        let g = ControllerConfig::table2().sc;
        let a = ActuatorMap::default();
        let (lo, hi) = a.voltage_range();
        let mut st = PidState::bumpless(30.0, 0.0);
        for e in errors {
            let out = pid_step(&mut st, &g, e, 10e-6, &a);
            prop_assert!(st.integral >= lo && st.integral <= hi);
            prop_assert!(out.duty >= a.duty_min && out.duty <= a.duty_max);
        }
    }

    #[test]
    fn detector_never_switches_twice_in_a_row(
        samples in prop::collection::vec((0.0f64..400.0, 0.0f64..30.0), 10..600),
    ) {
        let cfg = DetectorConfig::default();
        let mut d = PhaseDetector::new(cfg, 10e-6, Phase::ElectricArc).unwrap();
        let mut last: Option<usize> = None;
        for (k, (i, u)) in samples.into_iter().enumerate() {
            if d.update(i, u).switched {
                if let Some(prev) = last {
                    prop_assert!(k - prev > cfg.min_dwell, "switches at {prev} and {k}");
                }
                last = Some(k);
            }
        }
    }

    #[test]
    fn settling_time_is_monotone_in_the_band(
        errors in prop::collection::vec(-50.0f64..50.0, 2..300),
        b1 in 0.01f64..0.5,
        b2 in 0.01f64..0.5,
    ) {
        let t: Vec<f64> = (0..errors.len()).map(|k| k as f64 * 1e-6).collect();
        let trace = ErrorTrace { t, error: errors };
        let (narrow, wide) = if b1 < b2 { (b1, b2) } else { (b2, b1) };
        let rate = 60e3;
        let horizon = 2.5e-3;
        let n = settling_time(&trace, narrow, rate, horizon).unwrap_or(f64::INFINITY);
        let w = settling_time(&trace, wide, rate, horizon).unwrap_or(f64::INFINITY);
        prop_assert!(w <= n);
    }

    #[test]
    fn rms_of_a_constant_is_exact(c in -1e3f64..1e3, n in 1usize..2000) {
        prop_assert!((rms(&vec![c; n]) - c.abs()).abs() <= 1e-12 * c.abs().max(1.0));
    }

    #[test]
    fn exact_ramps_give_exact_slopes(a_sc in 10e3f64..100e3, a_ea in -50e3f64..-5e3) {
        // two full cycles of piecewise-linear current
        let dt = 1e-6;
        let mut w = Waveform::with_capacity(30_000);
        let mut i = 300.0;
        let mut k = 0usize;
        for _ in 0..3 {
            for (phase, n, rate) in [(Phase::ShortCircuit, 2500, a_sc), (Phase::ElectricArc, 9500, a_ea)] {
                for _ in 0..n {
                    w.push(k as f64 * dt, i, 20.0, 21.1, phase);
                    i += rate * dt;
                    k += 1;
                }
            }
        }
        let m = compute_metrics(&w).unwrap();
        prop_assert!((m.didt_s - a_sc / 1e3).abs() <= 1e-9 * a_sc / 1e3);
        prop_assert!((m.didt_d - a_ea.abs() / 1e3).abs() <= 1e-9 * a_ea.abs() / 1e3);
        let max = w.current.iter().cloned().fold(f64::MIN, f64::max);
        let mean = w.current.iter().sum::<f64>() / w.len() as f64;
        prop_assert!(m.i_peak_avg <= max && m.i_peak_avg >= mean);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn fits_never_increase_the_cost(f_r in 0.5f64..2.0, f_e in 0.5f64..2.0, seed in 0u64..20) {
        let p = CircuitParams::table1();
        let cfg = SimConfig { noise_std_current: 2.0, ..sim(0.05, seed) };
        let w = run_open_loop(&p, &cfg, |_| 21.1).unwrap();
        let theta0 = Theta::Ea(ThetaEa {
            arc_branch_resistance: p.arc_branch_resistance() * f_r,
            arc_voltage: p.arc_voltage * f_e,
        });
        let r = fit(&w, Phase::ElectricArc, &theta0, &Known::from_params(&p), &FitOptions::default()).unwrap();
        prop_assert!(r.cost <= r.initial_cost);
        prop_assert!(r.cost < 1.2 * 4.0, "{}", r.cost);
    }

    #[test]
    fn fits_ignore_time_translation(offset in 0.0f64..10.0) {
        let p = CircuitParams::table1();
        let w = run_open_loop(&p, &sim(0.04, 0), |_| 21.1).unwrap();
        let theta0 = Theta::Ea(ThetaEa { arc_branch_resistance: 0.12, arc_voltage: 13.0 });
        let known = Known::from_params(&p);
        let a = fit(&w, Phase::ElectricArc, &theta0, &known, &FitOptions::default()).unwrap();
        let b = fit(&w.time_shifted(offset), Phase::ElectricArc, &theta0, &known, &FitOptions::default()).unwrap();
        prop_assert!(a.theta.max_relative_error(&b.theta) < 1e-9);
    }

    #[test]
    fn locus_branches_move_as_the_root_sensitivity_predicts(lk in -0.5f64..1.0, ea in any::<bool>()) {
        // chi(s) = A(s) + K B(s), so ds/dK = -B(s) / chi'(s)
        let p = CircuitParams::table1();
        let (sys, g) = if ea {
            (ea_transfer(&p).unwrap(), ControllerConfig::table2().ea)
        } else {
            (sc_transfer(&p).unwrap(), ControllerConfig::table2().sc)
        };
        let k0 = g.proportional * 10f64.powf(lk);
        let dk = k0 * 1e-7;
        let pts = gain_sweep(&sys, &g, k0, k0 + dk, 2).unwrap();
        let (gn, _) = sys.transfer_function();
        let (cn, _) = controller_polys(&g.with_proportional(1.0));
        let b = gn.mul(&cn);
        let chi = closed_loop_poles(&sys, &g.with_proportional(k0)).unwrap().characteristic;
        let dchi = chi.derivative();
        for (s0, s1) in pts[0].poles.poles.iter().zip(&pts[1].poles.poles) {
            let predicted = -b.eval_complex(*s0) / dchi.eval_complex(*s0) * dk;
            let moved = s1 - s0;
            prop_assert!(
                (moved - predicted).norm() <= 1e-3 * predicted.norm() + 1e-9 * s0.norm(),
                "{s0}: moved {moved}, predicted {predicted}"
            );
        }
    }
}
