//! Prediction-error identification of the phase parameters.
//!
//! The predictor is a plain simulation of the phase model driven by the
//! recorded source voltage, restarted at every segment with a discharged
//! capacitor. The starting current is either the first measured sample or,
//! by default, its least-squares value. Parameters are fitted in log space (keeps them positive) by a
//! damped Gauss-Newton (Levenberg-Marquardt) iteration with a central
//! difference Jacobian.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::config::{format_f64, KeyValues};
use crate::error::{Error, Result};
use crate::model::{CircuitParams, LinearSystem};
use crate::waveform::{segments_from_labels, Phase, Segment, Waveform};

/// Short-circuit parameters fitted from data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaSc {
    pub bridge_resistance: f64,
    pub shunt_resistance: f64,
    pub capacitance: f64,
}

/// Electric-arc parameters fitted from data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaEa {
    /// `R_rea + R_reg` (Ω); only the sum is identifiable.
    pub arc_branch_resistance: f64,
    pub arc_voltage: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Theta {
    Sc(ThetaSc),
    Ea(ThetaEa),
}

impl ThetaSc {
    pub fn from_params(p: &CircuitParams) -> Self {
        Self {
            bridge_resistance: p.bridge_resistance,
            shunt_resistance: p.shunt_resistance,
            capacitance: p.capacitance,
        }
    }
}

impl ThetaEa {
    pub fn from_params(p: &CircuitParams) -> Self {
        Self {
            arc_branch_resistance: p.arc_branch_resistance(),
            arc_voltage: p.arc_voltage,
        }
    }
}

impl Theta {
    pub fn from_params(phase: Phase, p: &CircuitParams) -> Self {
        match phase {
            Phase::ShortCircuit => Theta::Sc(ThetaSc::from_params(p)),
            Phase::ElectricArc => Theta::Ea(ThetaEa::from_params(p)),
        }
    }

    pub fn phase(&self) -> Phase {
        match self {
            Theta::Sc(_) => Phase::ShortCircuit,
            Theta::Ea(_) => Phase::ElectricArc,
        }
    }

    /// Parameter keys, in the order of [`Theta::values`].
    pub fn names(&self) -> &'static [&'static str] {
        match self {
            Theta::Sc(_) => &["R_1", "R_2", "C"],
            Theta::Ea(_) => &["R_sum", "E_ac"],
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            Theta::Sc(t) => vec![t.bridge_resistance, t.shunt_resistance, t.capacitance],
            Theta::Ea(t) => vec![t.arc_branch_resistance, t.arc_voltage],
        }
    }

    fn with_values(&self, v: &[f64]) -> Self {
        match self {
            Theta::Sc(_) => Theta::Sc(ThetaSc {
                bridge_resistance: v[0],
                shunt_resistance: v[1],
                capacitance: v[2],
            }),
            Theta::Ea(_) => Theta::Ea(ThetaEa {
                arc_branch_resistance: v[0],
                arc_voltage: v[1],
            }),
        }
    }

    /// All entries strictly positive and finite. `E_ac = 0` is physically
    /// allowed but cannot be represented in log space, so it is rejected as
    /// a starting point.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.names().iter().zip(self.values()) {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(*name, format!("must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Largest relative deviation from `truth`.
    pub fn max_relative_error(&self, truth: &Theta) -> f64 {
        self.values()
            .iter()
            .zip(truth.values())
            .map(|(a, b)| ((a - b) / b).abs())
            .fold(0.0, f64::max)
    }

    /// Write the fitted values into a parameter set. The arc branch sum is
    /// split in the proportions already present in `params`.
    pub fn apply_to(&self, params: &mut CircuitParams) {
        match self {
            Theta::Sc(t) => {
                params.bridge_resistance = t.bridge_resistance;
                params.shunt_resistance = t.shunt_resistance;
                params.capacitance = t.capacitance;
            }
            Theta::Ea(t) => {
                let old = params.arc_branch_resistance();
                let share = if old > 0.0 { params.arc_resistance / old } else { 0.5 };
                params.arc_resistance = share * t.arc_branch_resistance;
                params.reignition_resistance = (1.0 - share) * t.arc_branch_resistance;
                params.arc_voltage = t.arc_voltage;
            }
        }
    }
}

/// Parameters assumed known a priori.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Known {
    pub inductance: f64,
    pub source_resistance: f64,
}

impl Known {
    pub fn from_params(p: &CircuitParams) -> Self {
        Self {
            inductance: p.inductance,
            source_resistance: p.source_resistance,
        }
    }
}

fn phase_system(theta: &Theta, known: &Known) -> Result<LinearSystem> {
    let l = known.inductance;
    if !(l > 0.0 && l.is_finite() && known.source_resistance > 0.0) {
        return Err(Error::invalid("L/R_L", "known parameters must be > 0"));
    }
    match theta {
        Theta::Sc(t) => {
            let c = t.capacitance;
            let r2 = t.shunt_resistance;
            let series = known.source_resistance + t.bridge_resistance;
            LinearSystem::new(
                DMatrix::from_row_slice(2, 2, &[-series / l, -1.0 / l, 1.0 / c, -1.0 / (r2 * c)]),
                DVector::from_vec(vec![1.0 / l, 0.0]),
                nalgebra::RowDVector::from_vec(vec![1.0, 0.0]),
                0.0,
                0.0,
            )
        }
        Theta::Ea(t) => LinearSystem::new(
            DMatrix::from_element(1, 1, -(known.source_resistance + t.arc_branch_resistance) / l),
            DVector::from_element(1, 1.0 / l),
            nalgebra::RowDVector::from_element(1, 1.0),
            0.0,
            -t.arc_voltage,
        ),
    }
}

/// Discretized predictor for one parameter vector.
struct Predictor {
    phi: DMatrix<f64>,
    gamma: DVector<f64>,
    offset: f64,
}

impl Predictor {
    fn new(theta: &Theta, known: &Known, dt: f64) -> Result<Self> {
        let sys = phase_system(theta, known)?;
        let d = sys.discretize(dt)?;
        Ok(Self {
            phi: d.phi,
            gamma: d.gamma,
            offset: sys.input_offset,
        })
    }

    fn run(&self, source_voltage: &[f64], initial_current: f64, out: &mut Vec<f64>) {
        self.simulate(source_voltage.len(), |k| source_voltage[k] + self.offset, initial_current, true, out);
    }

    /// `input(k)` is the effective input (offset included) during step `k`.
    fn simulate(&self, n: usize, input: impl Fn(usize) -> f64, initial_current: f64, clamp: bool, out: &mut Vec<f64>) {
        out.clear();
        let order = self.phi.nrows();
        let mut x = [initial_current, 0.0];
        for k in 0..n {
            out.push(x[0]);
            let u = input(k);
            let mut next = [0.0; 2];
            for i in 0..order {
                let mut v = self.gamma[i] * u;
                for j in 0..order {
                    v += self.phi[(i, j)] * x[j];
                }
                next[i] = v;
            }
            if clamp && next[0] < 0.0 {
                next[0] = 0.0;
            }
            x = next;
        }
    }

    /// Prediction over one segment with the initial current chosen per
    /// `mode`; samples before `skip` do not enter the least-squares choice.
    fn segment(&self, source_voltage: &[f64], measured: &[f64], skip: usize, mode: InitialCurrent, out: &mut Vec<f64>) {
        let i0 = match mode {
            InitialCurrent::FirstSample => measured[0],
            InitialCurrent::Fitted => {
                // the unclamped response is affine in the initial current
                let n = source_voltage.len();
                let mut forced = Vec::with_capacity(n);
                let mut free = Vec::with_capacity(n);
                self.simulate(n, |k| source_voltage[k] + self.offset, 0.0, false, &mut forced);
                self.simulate(n, |_| 0.0, 1.0, false, &mut free);
                let (mut num, mut den) = (0.0, 0.0);
                for k in skip..n {
                    num += free[k] * (measured[k] - forced[k]);
                    den += free[k] * free[k];
                }
                if den > 0.0 {
                    (num / den).max(0.0)
                } else {
                    measured[0]
                }
            }
        };
        self.run(source_voltage, i0, out);
    }
}

/// Simulated current over one segment: `source_voltage[k]` is held during
/// step `k`, the state starts from `initial_current` (capacitor discharged)
/// and the returned sample `k` is the current at the start of step `k`.
pub fn predict(
    theta: &Theta,
    known: &Known,
    source_voltage: &[f64],
    initial_current: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(source_voltage.len());
    if source_voltage.is_empty() {
        return Ok(out);
    }
    Predictor::new(theta, known, dt)?.run(source_voltage, initial_current, &mut out);
    Ok(out)
}

/// Offline phase segmentation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentConfig {
    pub voltage_threshold: f64,
    /// Gradient (A/s) above which a short circuit may start.
    pub slope_threshold: f64,
    /// Span of the regression window used as the smoothed gradient (s).
    pub gradient_window: f64,
    /// Runs shorter than this are merged into the preceding phase (s).
    pub min_duration: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            voltage_threshold: 14.4,
            slope_threshold: 5e3,
            gradient_window: 50e-6,
            min_duration: 0.3e-3,
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("voltage_threshold", self.voltage_threshold),
            ("gradient_window", self.gradient_window),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be > 0, got {v}")));
            }
        }
        if !(self.slope_threshold.is_finite() && self.slope_threshold >= 0.0) {
            return Err(Error::invalid("slope_threshold", "must be >= 0"));
        }
        if !(self.min_duration.is_finite() && self.min_duration >= 0.0) {
            return Err(Error::invalid("min_duration", "must be >= 0"));
        }
        Ok(())
    }
}

/// Prefix sums for least-squares slopes of `y` against sample index.
struct SlopeSums {
    s_y: Vec<f64>,
    s_ky: Vec<f64>,
}

impl SlopeSums {
    fn new(y: &[f64]) -> Self {
        let mut s_y = vec![0.0; y.len() + 1];
        let mut s_ky = vec![0.0; y.len() + 1];
        for (k, v) in y.iter().enumerate() {
            s_y[k + 1] = s_y[k] + v;
            s_ky[k + 1] = s_ky[k] + k as f64 * v;
        }
        Self { s_y, s_ky }
    }

    /// Slope per sample over `a..b`; zero for fewer than two samples.
    fn slope(&self, a: usize, b: usize) -> f64 {
        let m = (b - a) as f64;
        if m < 2.0 {
            return 0.0;
        }
        let sum_k = (a + b - 1) as f64 * m / 2.0;
        let f = |j: f64| (j - 1.0) * j * (2.0 * j - 1.0) / 6.0;
        let sum_kk = f(b as f64) - f(a as f64);
        let sy = self.s_y[b] - self.s_y[a];
        let sky = self.s_ky[b] - self.s_ky[a];
        (sky - sum_k * sy / m) / (sum_kk - sum_k * sum_k / m)
    }
}

/// Phase labels recomputed from current and arc voltage alone, with the
/// same rules as the online detector. Offline the gradient can look ahead
/// of a candidate short-circuit onset and behind a candidate exit.
pub fn detect_labels(w: &Waveform, config: &SegmentConfig) -> Result<Vec<Phase>> {
    config.validate()?;
    if w.is_empty() {
        return Err(Error::Shape("empty waveform".into()));
    }
    w.validate()?;
    let dt = w.dt();
    let span = ((config.gradient_window / dt).round() as usize).max(2);
    let sums = SlopeSums::new(&w.current);
    let n = w.len();
    // entry looks ahead, exit looks back: neither window straddles the switch
    // that is being tested for
    let ahead = |k: usize| sums.slope(k, (k + span).min(n)) / dt;
    let behind = |k: usize| sums.slope(k + 1 - span, k + 1) / dt;

    let mut phase = if w.arc_voltage[0] < config.voltage_threshold {
        Phase::ShortCircuit
    } else {
        Phase::ElectricArc
    };
    let mut labels = Vec::with_capacity(w.len());
    // the exit slope only sees samples of the current run, so it is not
    // consulted until a full window has passed since entry
    let mut entered = 0;
    for k in 0..w.len() {
        let u = w.arc_voltage[k];
        let next = match phase {
            Phase::ElectricArc if u < config.voltage_threshold && ahead(k) > config.slope_threshold => {
                Phase::ShortCircuit
            }
            Phase::ShortCircuit
                if u > config.voltage_threshold || (k + 1 >= entered + span && behind(k) < 0.0) =>
            {
                Phase::ElectricArc
            }
            p => p,
        };
        if next != phase {
            entered = k;
        }
        phase = next;
        labels.push(phase);
    }

    // absorb short blips into their neighbours, shortest first, so a real
    // phase broken up by noise is reassembled before it is judged; the
    // leading run is left for `segment` to drop
    let min_len = (config.min_duration / dt).round() as usize;
    let mut runs: Vec<(Phase, usize)> = segments_from_labels(&labels)
        .iter()
        .map(|s| (s.phase, s.len()))
        .collect();
    while let Some(i) = (1..runs.len())
        .filter(|&i| runs[i].1 < min_len)
        .min_by_key(|&i| runs[i].1)
    {
        // runs alternate, so the blip joins the run before it and the one after
        let mut len = runs[i - 1].1 + runs[i].1;
        if i + 1 < runs.len() {
            len += runs[i + 1].1;
            runs.remove(i + 1);
        }
        runs[i - 1].1 = len;
        runs.remove(i);
    }
    let mut k = 0;
    for (phase, len) in runs {
        labels[k..k + len].fill(phase);
        k += len;
    }
    Ok(labels)
}

/// Segments found by [`detect_labels`]; a leading run shorter than the
/// minimum duration is dropped.
pub fn segment(w: &Waveform, config: &SegmentConfig) -> Result<Vec<Segment>> {
    let labels = detect_labels(w, config)?;
    let min_len = (config.min_duration / w.dt()).round() as usize;
    let segs: Vec<Segment> = segments_from_labels(&labels)
        .into_iter()
        .filter(|s| s.len() >= min_len)
        .collect();
    if segs.is_empty() {
        return Err(Error::NoSegments { phase: "SC/EA".into() });
    }
    Ok(segs)
}

/// Copy of `w` with labels replaced by [`detect_labels`].
pub fn relabel(w: &Waveform, config: &SegmentConfig) -> Result<Waveform> {
    let labels = detect_labels(w, config)?;
    let mut out = w.clone();
    out.phase = labels;
    Ok(out)
}

/// Mean complete-segment durations `(t_cc, t_ae)` from the record labels.
pub fn phase_timing(w: &Waveform) -> Result<(f64, f64)> {
    let dt = w.dt();
    let mean = |phase: Phase| -> Result<f64> {
        let lens: Vec<f64> = w
            .label_segments()
            .iter()
            .filter(|s| s.phase == phase && !s.truncated)
            .map(|s| s.len() as f64 * dt)
            .collect();
        if lens.is_empty() {
            return Err(Error::NoSegments {
                phase: phase.label().into(),
            });
        }
        Ok(lens.iter().sum::<f64>() / lens.len() as f64)
    };
    Ok((mean(Phase::ShortCircuit)?, mean(Phase::ElectricArc)?))
}

/// Optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub relative_tolerance: f64,
    /// Stop when the log-space gradient norm of the cost falls below this.
    pub gradient_tolerance: f64,
    /// Fraction of each segment's leading samples left out of the cost.
    pub skip_fraction: f64,
    /// Log-space step of the central-difference Jacobian.
    pub jacobian_step: f64,
    pub initial_current: InitialCurrent,
}

/// How each segment's predictor is started.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitialCurrent {
    /// The first measured sample of the segment.
    FirstSample,
    /// The least-squares value for the current parameters, eliminated in
    /// closed form (variable projection). Removes the bias a noisy first
    /// sample leaves in slowly decaying phases.
    #[default]
    Fitted,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            relative_tolerance: 1e-10,
            gradient_tolerance: 1e-8,
            skip_fraction: 0.05,
            jacobian_step: 1e-6,
            initial_current: InitialCurrent::Fitted,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub theta: Theta,
    pub initial_cost: f64,
    /// Mean squared prediction error at the estimate (A²).
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub segments_used: usize,
    pub samples_used: usize,
}

impl FitReport {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("phase", self.theta.phase().label());
        for (name, v) in self.theta.names().iter().zip(self.theta.values()) {
            kv.set_f64(name, v);
        }
        kv.set_f64("J_N", self.cost);
        kv.set_f64("J_N_initial", self.initial_cost);
        kv.set("iterations", self.iterations);
        kv.set("converged", self.converged);
        kv.set("segments_used", self.segments_used);
        kv.set("samples_used", self.samples_used);
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }
}

struct Problem<'a> {
    w: &'a Waveform,
    segments: Vec<Segment>,
    skips: Vec<usize>,
    known: Known,
    template: Theta,
    dt: f64,
    samples: usize,
    mode: InitialCurrent,
}

impl<'a> Problem<'a> {
    fn new(w: &'a Waveform, phase: Phase, theta0: &Theta, known: &Known, options: &FitOptions) -> Result<Self> {
        let segments: Vec<Segment> = w
            .label_segments()
            .into_iter()
            .filter(|s| s.phase == phase && !s.truncated && s.len() >= 2)
            .collect();
        if segments.is_empty() {
            return Err(Error::NoSegments {
                phase: phase.label().into(),
            });
        }
        let skips: Vec<usize> = segments
            .iter()
            .map(|s| (options.skip_fraction * s.len() as f64).floor() as usize)
            .collect();
        let samples = segments.iter().zip(&skips).map(|(s, k)| s.len() - k).sum();
        Ok(Self {
            w,
            segments,
            skips,
            known: *known,
            template: *theta0,
            dt: w.dt(),
            samples,
            mode: options.initial_current,
        })
    }

    fn theta(&self, log_theta: &[f64]) -> Theta {
        let v: Vec<f64> = log_theta.iter().map(|p| p.exp()).collect();
        self.template.with_values(&v)
    }

    /// Residuals `I_pred - I_meas` over all used samples, segment by segment.
    fn residuals(&self, log_theta: &[f64]) -> Result<DVector<f64>> {
        let predictor = Predictor::new(&self.theta(log_theta), &self.known, self.dt)?;
        let parts: Vec<Vec<f64>> = self
            .segments
            .par_iter()
            .zip(&self.skips)
            .map(|(s, &skip)| {
                let mut pred = Vec::with_capacity(s.len());
                let r = s.range();
                predictor.segment(
                    &self.w.source_voltage[r.clone()],
                    &self.w.current[r.clone()],
                    skip,
                    self.mode,
                    &mut pred,
                );
                pred[skip..]
                    .iter()
                    .zip(&self.w.current[r][skip..])
                    .map(|(p, m)| p - m)
                    .collect()
            })
            .collect();
        let flat: Vec<f64> = parts.into_iter().flatten().collect();
        if flat.iter().any(|r| !r.is_finite()) {
            return Err(Error::Diverged { t: 0.0 });
        }
        Ok(DVector::from_vec(flat))
    }

    fn cost(&self, r: &DVector<f64>) -> f64 {
        r.norm_squared() / self.samples as f64
    }

    fn jacobian(&self, p: &[f64], h: f64) -> Result<DMatrix<f64>> {
        let cols: Vec<DVector<f64>> = (0..p.len())
            .into_par_iter()
            .map(|j| {
                let mut plus = p.to_vec();
                let mut minus = p.to_vec();
                plus[j] += h;
                minus[j] -= h;
                Ok((self.residuals(&plus)? - self.residuals(&minus)?) / (2.0 * h))
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_columns(&cols))
    }
}

/// Minimize the mean squared prediction error over every complete segment
/// of `phase` in the record labels. Only a hit on the iteration cap leaves
/// `converged` false.
pub fn fit(w: &Waveform, phase: Phase, theta0: &Theta, known: &Known, options: &FitOptions) -> Result<FitReport> {
    if theta0.phase() != phase {
        return Err(Error::invalid("theta0", format!("initial guess is not for phase {phase}")));
    }
    theta0.validate()?;
    w.validate()?;
    let problem = Problem::new(w, phase, theta0, known, options)?;

    let mut p: Vec<f64> = theta0.values().iter().map(|v| v.ln()).collect();
    let mut r = problem.residuals(&p)?;
    let mut cost = problem.cost(&r);
    let initial_cost = cost;
    let floor = 1e-28 * w.current.iter().map(|i| i * i).sum::<f64>() / w.len() as f64;
    let n = p.len();
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < options.max_iterations {
        if cost <= floor {
            converged = true;
            break;
        }
        let jac = problem.jacobian(&p, options.jacobian_step)?;
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        let grad_norm = 2.0 * jtr.norm() / problem.samples as f64;
        if grad_norm < options.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;

        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = jtj.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-300);
            }
            let step = match damped.clone().cholesky() {
                Some(ch) => ch.solve(&(-&jtr)),
                None => match damped.svd(true, true).solve(&(-&jtr), 1e-15) {
                    Ok(s) => s,
                    Err(_) => break,
                },
            };
            // at most a factor e^2 per parameter and step
            let largest = step.amax();
            let step = if largest > 2.0 { step * (2.0 / largest) } else { step };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            match problem.residuals(&trial) {
                Ok(rt) if problem.cost(&rt) < cost => {
                    let new_cost = problem.cost(&rt);
                    let decrease = (cost - new_cost) / cost;
                    p = trial;
                    r = rt;
                    cost = new_cost;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if decrease < options.relative_tolerance {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= 4.0,
            }
        }
        if !accepted {
            // no descent possible at working precision: a numerical minimum
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    Ok(FitReport {
        theta: problem.theta(&p),
        initial_cost,
        cost,
        iterations,
        converged,
        segments_used: problem.segments.len(),
        samples_used: problem.samples,
    })
}

/// One row per sample of every complete segment of the fitted phase:
/// `t_s,I_meas,I_pred,residual`.
pub fn residual_csv(w: &Waveform, theta: &Theta, known: &Known, options: &FitOptions) -> Result<String> {
    let predictor = Predictor::new(theta, known, w.dt())?;
    let mut out = String::from("t_s,I_meas,I_pred,residual\n");
    let mut pred = Vec::new();
    for s in w
        .label_segments()
        .iter()
        .filter(|s| s.phase == theta.phase() && !s.truncated && s.len() >= 2)
    {
        let skip = (options.skip_fraction * s.len() as f64).floor() as usize;
        predictor.segment(
            &w.source_voltage[s.range()],
            &w.current[s.range()],
            skip,
            options.initial_current,
            &mut pred,
        );
        for (k, p) in s.range().zip(&pred) {
            let m = w.current[k];
            out.push_str(&format!(
                "{},{},{},{}\n",
                format_f64(w.t[k]),
                format_f64(m),
                format_f64(*p),
                format_f64(m - p)
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{run_open_loop, SimConfig};

    fn record(duration: f64) -> Waveform {
        let cfg = SimConfig {
            duration,
            ..SimConfig::default()
        };
        run_open_loop(&CircuitParams::table1(), &cfg, |_| 21.1).unwrap()
    }

    #[test]
    fn window_slope_of_ramp_is_exact() {
        let y: Vec<f64> = (0..40).map(|k| 3.0 + 0.5 * k as f64).collect();
        let sums = SlopeSums::new(&y);
        for (a, b) in [(0, 40), (3, 5), (10, 31)] {
            assert!((sums.slope(a, b) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn ea_prediction_is_first_order() {
        let p = CircuitParams::table1();
        let theta = Theta::from_params(Phase::ElectricArc, &p);
        let dt = 1e-6;
        let pred = predict(&theta, &Known::from_params(&p), &vec![21.1; 5000], 0.0, dt).unwrap();
        let i_inf = (21.1 - 11.0) / 0.104;
        let tau = 180e-6 / 0.104;
        for k in [0, 100, 1731, 4999] {
            let t = k as f64 * dt;
            let oracle = i_inf * (1.0 - (-t / tau).exp());
            assert!((pred[k] - oracle).abs() < 1e-9 * i_inf, "k={k}");
        }
        assert!(predict(&theta, &Known::from_params(&p), &[], 5.0, dt).unwrap().is_empty());
    }

    #[test]
    fn prediction_reproduces_simulator() {
        let p = CircuitParams::table1();
        let w = record(0.03);
        let known = Known::from_params(&p);
        for s in w.label_segments().iter().filter(|s| !s.truncated) {
            let theta = Theta::from_params(s.phase, &p);
            let pred = predict(&theta, &known, &w.source_voltage[s.range()], w.current[s.start], w.dt()).unwrap();
            for (a, b) in pred.iter().zip(&w.current[s.range()]) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn segmentation_matches_ground_truth() {
        let w = record(0.1);
        let segs = segment(&w, &SegmentConfig::default()).unwrap();
        let truth = w.label_segments();
        assert_eq!(segs.len(), truth.len());
        for (a, b) in segs.iter().zip(&truth) {
            assert_eq!(a.phase, b.phase);
            assert!(a.start.abs_diff(b.start) <= 3 && a.end.abs_diff(b.end) <= 3, "{a:?} vs {b:?}");
        }
        let full_sc = segs
            .iter()
            .filter(|s| s.phase == Phase::ShortCircuit && !s.truncated)
            .count();
        assert_eq!(full_sc, 8);
    }

    #[test]
    fn high_voltage_decay_is_one_arc_segment() {
        let mut w = Waveform::with_capacity(2000);
        for k in 0..2000 {
            let t = k as f64 * 1e-6;
            w.push(t, 300.0 - 2e4 * t, 30.0, 0.0, Phase::ShortCircuit);
        }
        let segs = segment(&w, &SegmentConfig::default()).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].phase, Phase::ElectricArc);
    }

    #[test]
    fn fit_at_optimum_does_not_move() {
        let p = CircuitParams::table1();
        let w = record(0.03);
        let theta = Theta::from_params(Phase::ElectricArc, &p);
        let rep = fit(&w, Phase::ElectricArc, &theta, &Known::from_params(&p), &FitOptions::default()).unwrap();
        assert!(rep.cost < 1e-12);
        assert!(rep.iterations <= 1);
        assert!(rep.converged);
    }

    #[test]
    fn fit_rejects_bad_start_and_missing_phase() {
        let p = CircuitParams::table1();
        let w = record(0.03);
        let known = Known::from_params(&p);
        let bad = Theta::Ea(ThetaEa {
            arc_branch_resistance: -1.0,
            arc_voltage: 11.0,
        });
        assert!(fit(&w, Phase::ElectricArc, &bad, &known, &FitOptions::default()).is_err());

        let mut only_ea = w.clone();
        only_ea.phase.iter_mut().for_each(|l| *l = Phase::ElectricArc);
        let theta = Theta::from_params(Phase::ShortCircuit, &p);
        assert!(matches!(
            fit(&only_ea, Phase::ShortCircuit, &theta, &known, &FitOptions::default()),
            Err(Error::NoSegments { .. })
        ));
    }

    #[test]
    fn apply_keeps_arc_split() {
        let mut p = CircuitParams::table1();
        Theta::Ea(ThetaEa {
            arc_branch_resistance: 0.176,
            arc_voltage: 12.0,
        })
        .apply_to(&mut p);
        assert!((p.arc_resistance - 0.086).abs() < 1e-12);
        assert!((p.reignition_resistance - 0.090).abs() < 1e-12);
        assert_eq!(p.arc_voltage, 12.0);
    }
}
