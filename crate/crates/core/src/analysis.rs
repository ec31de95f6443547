//! Tuning verification: closed-loop poles, gain sweeps and simulated
//! settling of the ramp-tracking loop in each phase.

use std::fmt::Write as _;

use nalgebra::RowDVector;
use num_complex::Complex64;

use crate::config::format_f64;
use crate::control::{pid_step, ControllerConfig, PidGains, PidState, ReferenceSpec};
use crate::error::{Error, Result};
use crate::model::{ea_transfer, sc_transfer, ActuatorMap, CircuitParams, LinearSystem};
use crate::poly::{sort_roots, Poly};
use crate::waveform::Phase;

/// Root condition numbers above this make the pole table suspect.
pub const CONDITION_WARNING: f64 = 1e8;

/// `C(s) = K_p + k_i/s + k_d s/(T_f s + 1)` as numerator and denominator.
pub fn controller_polys(gains: &PidGains) -> (Poly, Poly) {
    let (kp, ki, kd, tf) = (gains.kp(), gains.ki(), gains.kd(), gains.filter_time);
    // over the common denominator s (T_f s + 1)
    let num = Poly::new(vec![ki, kp + ki * tf, kp * tf + kd]);
    let den = Poly::new(vec![0.0, 1.0, tf]);
    (num, den)
}

/// The trapezoidal PID of [`pid_step`] as a pulse transfer function in `z`.
pub fn discrete_controller_polys(gains: &PidGains, period: f64) -> (Poly, Poly) {
    let h = period;
    let tf = gains.filter_time;
    let a = (2.0 * tf - h) / (2.0 * tf + h);
    let b = 2.0 * gains.kd() / (2.0 * tf + h);
    let ki = gains.ki() * h / 2.0;
    let zm1 = Poly::new(vec![-1.0, 1.0]);
    let zp1 = Poly::new(vec![1.0, 1.0]);
    let zma = Poly::new(vec![-a, 1.0]);
    let num = zm1
        .mul(&zma)
        .scale(gains.kp())
        .add(&zp1.mul(&zma).scale(ki))
        .add(&zm1.mul(&zm1).scale(b));
    (num, zm1.mul(&zma))
}

/// Roots of a characteristic polynomial with their diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct PoleSet {
    pub characteristic: Poly,
    pub poles: Vec<Complex64>,
    /// Largest root condition number.
    pub condition: f64,
    /// Largest `|p(root)| / sum |a_k| |root|^k`.
    pub residual: f64,
}

impl PoleSet {
    fn from_poly(characteristic: Poly) -> Self {
        let mut poles = characteristic.roots();
        sort_roots(&mut poles);
        let condition = poles
            .iter()
            .map(|&r| characteristic.root_condition(r))
            .fold(0.0, f64::max);
        let residual = poles
            .iter()
            .map(|&r| {
                let scale = characteristic.abs_scale(r);
                if scale > 0.0 {
                    characteristic.eval_complex(r).norm() / scale
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max);
        Self {
            characteristic,
            poles,
            condition,
            residual,
        }
    }

    pub fn ill_conditioned(&self) -> bool {
        !(self.condition <= CONDITION_WARNING)
    }

    /// Largest real part (continuous time).
    pub fn spectral_abscissa(&self) -> f64 {
        self.poles.iter().map(|p| p.re).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest modulus (discrete time).
    pub fn spectral_radius(&self) -> f64 {
        self.poles.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }
}

/// Continuous closed-loop poles: roots of `D_g D_c + N_g N_c`.
pub fn closed_loop_poles(plant: &LinearSystem, gains: &PidGains) -> Result<PoleSet> {
    gains.validate()?;
    let (ng, dg) = plant.transfer_function();
    let (nc, dc) = controller_polys(gains);
    let p = dg.mul(&dc).add(&ng.mul(&nc));
    if p.leading() == 0.0 || !p.coeffs().iter().all(|c| c.is_finite()) {
        return Err(Error::Degenerate("closed-loop characteristic polynomial".into()));
    }
    Ok(PoleSet::from_poly(p))
}

/// Closed-loop poles of the sampled loop: zero-order-hold plant at the
/// controller period with the trapezoidal PID. Stable iff all `|z| < 1`.
pub fn discrete_closed_loop_poles(plant: &LinearSystem, gains: &PidGains, period: f64) -> Result<PoleSet> {
    gains.validate()?;
    let d = plant.discretize(period)?;
    let (ng, dg) = d.transfer_function(&plant.c, plant.d);
    let (nc, dc) = discrete_controller_polys(gains, period);
    let p = dg.mul(&dc).add(&ng.mul(&nc));
    if p.leading() == 0.0 || !p.coeffs().iter().all(|c| c.is_finite()) {
        return Err(Error::Degenerate("sampled characteristic polynomial".into()));
    }
    Ok(PoleSet::from_poly(p))
}

/// One point of a root locus.
#[derive(Clone, Debug, PartialEq)]
pub struct LocusPoint {
    pub proportional: f64,
    pub poles: PoleSet,
}

/// Closed-loop poles as `K_p` runs log-uniformly over `[kp_min, kp_max]`
/// with `T_i`, `T_d`, `T_f` fixed. Poles are reordered so index `j`
/// follows one branch across the sweep.
pub fn gain_sweep(
    plant: &LinearSystem,
    template: &PidGains,
    kp_min: f64,
    kp_max: f64,
    n_points: usize,
) -> Result<Vec<LocusPoint>> {
    if n_points < 1 {
        return Err(Error::invalid("n_points", "must be >= 1"));
    }
    if !(kp_min > 0.0 && kp_max >= kp_min && kp_max.is_finite()) {
        return Err(Error::invalid(
            "K_p range",
            format!("need 0 < min <= max, got [{kp_min}, {kp_max}]"),
        ));
    }
    let mut out: Vec<LocusPoint> = Vec::with_capacity(n_points);
    for k in 0..n_points {
        let kp = if n_points == 1 {
            kp_min
        } else {
            kp_min * (kp_max / kp_min).powf(k as f64 / (n_points - 1) as f64)
        };
        let mut poles = closed_loop_poles(plant, &template.with_proportional(kp))?;
        if let Some(prev) = out.last() {
            poles.poles = match_branches(&prev.poles.poles, &poles.poles);
        }
        out.push(LocusPoint {
            proportional: kp,
            poles,
        });
    }
    Ok(out)
}

/// Permutation of `next` closest to `prev` (sum of distances); exhaustive
/// for small sets, greedy beyond.
fn match_branches(prev: &[Complex64], next: &[Complex64]) -> Vec<Complex64> {
    let n = next.len();
    if n != prev.len() {
        return next.to_vec();
    }
    if n <= 6 {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut best = idx.clone();
        let mut best_cost = f64::INFINITY;
        permute(&mut idx, 0, &mut |perm| {
            let cost: f64 = perm.iter().enumerate().map(|(i, &j)| (prev[i] - next[j]).norm()).sum();
            if cost < best_cost {
                best_cost = cost;
                best = perm.to_vec();
            }
        });
        return best.iter().map(|&j| next[j]).collect();
    }
    let mut used = vec![false; n];
    prev.iter()
        .map(|p| {
            let j = (0..n)
                .filter(|&j| !used[j])
                .min_by(|&a, &b| (next[a] - p).norm().total_cmp(&(next[b] - p).norm()))
                .expect("equal lengths");
            used[j] = true;
            next[j]
        })
        .collect()
}

fn permute(idx: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == idx.len() {
        visit(idx);
        return;
    }
    for i in k..idx.len() {
        idx.swap(k, i);
        permute(idx, k + 1, visit);
        idx.swap(k, i);
    }
}

/// Long-format locus table: `K_p,branch,re,im`.
pub fn locus_csv(points: &[LocusPoint]) -> String {
    let mut s = String::from("K_p,branch,re,im\n");
    for p in points {
        for (j, z) in p.poles.poles.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                format_f64(p.proportional),
                j,
                format_f64(z.re),
                format_f64(z.im)
            );
        }
    }
    s
}

/// Settling requirements per phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SettlingSpec {
    /// Error band as a fraction of the reference span over the phase.
    pub band: f64,
    pub target_sc: f64,
    pub target_ea: f64,
    /// Allowed overrun of the short-circuit target.
    pub sc_tolerance: f64,
}

impl Default for SettlingSpec {
    fn default() -> Self {
        Self {
            band: 0.05,
            target_sc: 125e-6,
            target_ea: 500e-6,
            sc_tolerance: 1.5,
        }
    }
}

impl SettlingSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.band > 0.0 && self.band < 1.0) {
            return Err(Error::invalid("band", format!("must be in (0, 1), got {}", self.band)));
        }
        if !(self.target_sc > 0.0 && self.target_ea > 0.0 && self.sc_tolerance >= 1.0) {
            return Err(Error::invalid("settling targets", "must be > 0, tolerance >= 1"));
        }
        Ok(())
    }
}

/// Smallest band accepted by [`measure_settling`] (A).
pub const MIN_BAND: f64 = 5.0;

/// Single-phase ramp-tracking experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct SettlingRun {
    /// Reference slope (A/s).
    pub rate: f64,
    /// Phase length; also the settling horizon (s).
    pub duration: f64,
    /// Current at the phase onset (A); the reference starts here.
    pub initial_current: f64,
    /// Source voltage held by the controller at the onset (V).
    pub initial_voltage: f64,
    pub period: f64,
    /// Plant steps per controller period.
    pub substeps: usize,
}

/// Sampled tracking error of one [`SettlingRun`].
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorTrace {
    pub t: Vec<f64>,
    pub error: Vec<f64>,
}

/// Closed loop of one phase plant with the trapezoidal PID, starting from
/// the given current, a discharged capacitor and a bumpless controller
/// holding `initial_voltage`.
pub fn simulate_tracking(
    plant: &LinearSystem,
    gains: &PidGains,
    actuator: &ActuatorMap,
    run: &SettlingRun,
) -> Result<ErrorTrace> {
    if run.substeps == 0 || !(run.period > 0.0 && run.duration > 0.0) {
        return Err(Error::invalid("settling run", "period, duration and substeps must be > 0"));
    }
    let dt = run.period / run.substeps as f64;
    let d = plant.discretize(dt)?;
    let n = plant.order();
    let mut x = nalgebra::DVector::<f64>::zeros(n);
    x[0] = run.initial_current;
    let output = |x: &nalgebra::DVector<f64>, c: &RowDVector<f64>| (c * x)[0];

    let steps = (run.duration / dt).round() as usize;
    let mut pid = PidState::bumpless(run.initial_voltage, 0.0);
    let mut u = run.initial_voltage;
    let mut trace = ErrorTrace {
        t: Vec::with_capacity(steps + 1),
        error: Vec::with_capacity(steps + 1),
    };
    for k in 0..=steps {
        let t = k as f64 * dt;
        let y = output(&x, &plant.c);
        let e = run.initial_current + run.rate * t - y;
        trace.t.push(t);
        trace.error.push(e);
        if k == steps {
            break;
        }
        if k % run.substeps == 0 {
            u = pid_step(&mut pid, gains, e, run.period, actuator).voltage;
        }
        x = &d.phi * &x + &d.gamma * (u + plant.input_offset);
        if x[0] < 0.0 {
            x[0] = 0.0;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { t });
        }
    }
    Ok(trace)
}

/// Time after which `|error|` stays within the band. The band is
/// `band * |rate| * duration`, at least [`MIN_BAND`].
pub fn settling_time(trace: &ErrorTrace, band: f64, rate: f64, duration: f64) -> Result<f64> {
    let width = (band * rate.abs() * duration).max(MIN_BAND);
    match trace.error.iter().rposition(|e| e.abs() > width) {
        None => Ok(0.0),
        Some(k) if k + 1 < trace.t.len() => Ok(trace.t[k + 1]),
        Some(_) => Err(Error::NeverSettles {
            band: width,
            horizon: duration,
        }),
    }
}

pub fn measure_settling(
    plant: &LinearSystem,
    gains: &PidGains,
    actuator: &ActuatorMap,
    run: &SettlingRun,
    band: f64,
) -> Result<f64> {
    if !(band > 0.0 && band < 1.0) {
        return Err(Error::invalid("band", format!("must be in (0, 1), got {band}")));
    }
    let trace = simulate_tracking(plant, gains, actuator, run)?;
    settling_time(&trace, band, run.rate, run.duration)
}

/// Classical inductor-sizing estimate `dI/dt ≈ V0 / L` (A/s).
pub fn open_loop_slope_estimate(v0: f64, inductance: f64) -> Result<f64> {
    if !(inductance > 0.0) {
        return Err(Error::invalid("L", format!("must be > 0, got {inductance}")));
    }
    Ok(v0 / inductance)
}

/// Inductance giving `slope` (A/s) at `v0` under the same estimate (H).
pub fn inductance_for_slope(v0: f64, slope: f64) -> Result<f64> {
    if slope == 0.0 {
        return Err(Error::invalid("slope", "must be non-zero"));
    }
    Ok(v0 / slope)
}

/// Source voltage that keeps the nominal phase model on a ramp of `rate`
/// through `current`, ignoring the capacitor.
pub fn ramp_voltage(params: &CircuitParams, phase: Phase, current: f64, rate: f64) -> f64 {
    let r = match phase {
        Phase::ShortCircuit => params.source_resistance + params.bridge_resistance,
        Phase::ElectricArc => params.source_resistance + params.arc_branch_resistance(),
    };
    let e0 = match phase {
        Phase::ShortCircuit => 0.0,
        Phase::ElectricArc => params.arc_voltage,
    };
    e0 + r * current + params.inductance * rate
}

/// Operating points for [`verify_tuning`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub spec: SettlingSpec,
    /// Current at short-circuit onset (A).
    pub sc_onset_current: f64,
    /// Current at arc onset (A).
    pub ea_onset_current: f64,
    /// Bound on the steady ramp error (A).
    pub ramp_error_limit: f64,
    pub substeps: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            spec: SettlingSpec::default(),
            sc_onset_current: 100.0,
            ea_onset_current: 250.0,
            ramp_error_limit: 30.0,
            substeps: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseTuning {
    pub phase: Phase,
    pub continuous: PoleSet,
    pub sampled: PoleSet,
    /// Asymptotic ramp error `alpha / (k_i G(0))` of the continuous loop (A).
    pub ramp_error: f64,
    /// Largest `|e|` over the whole phase (A).
    pub peak_error: f64,
    /// Largest `|e|` over the last 70 % of the phase (A).
    pub late_error: f64,
    pub settling: std::result::Result<f64, String>,
    /// Settling limit applied, tolerance included (s).
    pub limit: f64,
}

impl PhaseTuning {
    pub fn stable(&self) -> bool {
        self.continuous.spectral_abscissa() < 0.0 && self.sampled.spectral_radius() < 1.0
    }

    pub fn settles(&self) -> bool {
        matches!(self.settling, Ok(t) if t <= self.limit)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuningReport {
    pub band: f64,
    pub sc: PhaseTuning,
    pub ea: PhaseTuning,
    pub ramp_error_limit: f64,
}

/// One pass/fail line.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecRow {
    pub id: u8,
    pub description: String,
    pub value: String,
    pub pass: bool,
}

impl TuningReport {
    pub fn rows(&self) -> Vec<SpecRow> {
        let finite = |p: &PhaseTuning| p.stable() && p.late_error <= self.ramp_error_limit;
        let settle = |p: &PhaseTuning| match &p.settling {
            Ok(t) => format!(
                "{:.1} us (limit {:.1} us, peak error {:.2} A)",
                t * 1e6,
                p.limit * 1e6,
                p.peak_error
            ),
            Err(e) => e.clone(),
        };
        vec![
            SpecRow {
                id: 3,
                description: "finite steady-state error for ramp inputs".into(),
                value: format!(
                    "late-phase |e| SC {:.2} A, EA {:.2} A (limit {:.1} A); asymptotic SC {:.2} A, EA {:.2} A",
                    self.sc.late_error,
                    self.ea.late_error,
                    self.ramp_error_limit,
                    self.sc.ramp_error,
                    self.ea.ramp_error
                ),
                pass: finite(&self.sc) && finite(&self.ea),
            },
            SpecRow {
                id: 4,
                description: "short-circuit settling time".into(),
                value: settle(&self.sc),
                pass: self.sc.stable() && self.sc.settles(),
            },
            SpecRow {
                id: 5,
                description: "electric-arc settling time".into(),
                value: settle(&self.ea),
                pass: self.ea.stable() && self.ea.settles(),
            },
        ]
    }

    pub fn all_pass(&self) -> bool {
        self.rows().iter().all(|r| r.pass)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "settling band: {:.0}% of the reference span", self.band * 100.0);
        for r in self.rows() {
            let _ = writeln!(
                s,
                "requirement #{} {:<42} {:<4} {}",
                r.id,
                r.description,
                if r.pass { "PASS" } else { "FAIL" },
                r.value
            );
        }
        for p in [&self.sc, &self.ea] {
            let _ = writeln!(s, "\n{} closed-loop poles (continuous, 1/s):", p.phase);
            for z in &p.continuous.poles {
                let _ = writeln!(s, "  {:>14.4} {:+14.4}j{}", z.re, z.im, rhp(z.re >= 0.0));
            }
            let _ = writeln!(s, "{} closed-loop poles (sampled, z):", p.phase);
            for z in &p.sampled.poles {
                let _ = writeln!(
                    s,
                    "  {:>14.8} {:+14.8}j  |z| = {:.8}{}",
                    z.re,
                    z.im,
                    z.norm(),
                    rhp(z.norm() >= 1.0)
                );
            }
            if p.continuous.ill_conditioned() || p.sampled.ill_conditioned() {
                let _ = writeln!(s, "  warning: root condition number above {CONDITION_WARNING:e}");
            }
        }
        let _ = writeln!(
            s,
            "\nshort-circuit limit includes a {:.1}x tolerance on the nominal target: \
             the settling criterion and the plant model are approximate",
            self.sc.limit / 125e-6
        );
        s
    }

    /// One `requirement` row per check, then the pole tables.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,phase,id,re,im,value,pass\n");
        for r in self.rows() {
            let _ = writeln!(s, "requirement,,{},,,\"{}\",{}", r.id, r.value, r.pass);
        }
        for p in [&self.sc, &self.ea] {
            for (kind, set) in [("pole_s", &p.continuous), ("pole_z", &p.sampled)] {
                for z in &set.poles {
                    let _ = writeln!(
                        s,
                        "{kind},{},,{},{},,",
                        p.phase,
                        format_f64(z.re),
                        format_f64(z.im)
                    );
                }
            }
        }
        s
    }
}

fn rhp(flag: bool) -> &'static str {
    if flag {
        "  UNSTABLE"
    } else {
        ""
    }
}

fn phase_tuning(
    params: &CircuitParams,
    actuator: &ActuatorMap,
    config: &ControllerConfig,
    phase: Phase,
    options: &VerifyOptions,
) -> Result<PhaseTuning> {
    let plant = match phase {
        Phase::ShortCircuit => sc_transfer(params)?,
        Phase::ElectricArc => ea_transfer(params)?,
    };
    let gains = config.gains(phase);
    let continuous = closed_loop_poles(&plant, gains)?;
    let sampled = discrete_closed_loop_poles(&plant, gains, config.period)?;
    let reference: &ReferenceSpec = &config.reference;
    let rate = reference.rate(phase);
    let ramp_error = rate / (gains.ki() * plant.dc_gain()?);

    let (onset, duration, limit) = match phase {
        Phase::ShortCircuit => (
            options.sc_onset_current,
            params.short_circuit_time,
            options.spec.target_sc * options.spec.sc_tolerance,
        ),
        Phase::ElectricArc => (options.ea_onset_current, params.arc_time, options.spec.target_ea),
    };
    // the controller arrives holding the ramp voltage of the previous phase
    let other = phase.other();
    let (lo, hi) = actuator.voltage_range();
    let initial_voltage = ramp_voltage(params, other, onset, reference.rate(other)).clamp(lo, hi);
    let run = SettlingRun {
        rate,
        duration,
        initial_current: onset,
        initial_voltage,
        period: config.period,
        substeps: options.substeps,
    };
    let trace = simulate_tracking(&plant, gains, actuator, &run)?;
    let settling = settling_time(&trace, options.spec.band, rate, duration).map_err(|e| e.to_string());
    let peak_error = trace.error.iter().fold(0.0, |m: f64, e| m.max(e.abs()));
    let late_start = (0.3 * trace.error.len() as f64) as usize;
    let late_error = trace.error[late_start..].iter().fold(0.0, |m: f64, e| m.max(e.abs()));
    Ok(PhaseTuning {
        phase,
        continuous,
        sampled,
        ramp_error,
        peak_error,
        late_error,
        settling,
        limit,
    })
}

/// Check the three closed-loop requirements on the ramp-tracking loops:
/// finite ramp error (stable loops with a bounded late-phase error),
/// short-circuit settling and arc settling. Each phase starts at its onset
/// current with the controller still holding the previous phase's ramp
/// voltage.
pub fn verify_tuning(
    params: &CircuitParams,
    actuator: &ActuatorMap,
    config: &ControllerConfig,
    options: &VerifyOptions,
) -> Result<TuningReport> {
    options.spec.validate()?;
    config.validate()?;
    Ok(TuningReport {
        band: options.spec.band,
        sc: phase_tuning(params, actuator, config, Phase::ShortCircuit, options)?,
        ea: phase_tuning(params, actuator, config, Phase::ElectricArc, options)?,
        ramp_error_limit: options.ramp_error_limit,
    })
}
