//! Fixed-step simulation of the switched plant.
//!
//! Each subcircuit is discretized exactly (matrix exponential) for a
//! piecewise-constant source voltage, so the step size only sets the time
//! resolution of switching and control, not the accuracy of the dynamics.
//! The joint current cannot reverse through the output rectifier and is
//! clamped at 0 A.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{ea_transfer, sc_transfer, ActuatorMap, CircuitParams, LinearSystem};
pub use crate::waveform::{Phase, Waveform};

#[derive(Clone, Debug, PartialEq)]
pub struct PlantState {
    x: [f64; 2],
    phase: Phase,
    phase_clock: f64,
}

impl PlantState {
    /// Phase onset with the given inductor current and a discharged capacitor.
    pub fn new(phase: Phase, inductor_current: f64) -> Self {
        Self {
            x: [inductor_current, 0.0],
            phase,
            phase_clock: 0.0,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Time since the last switch (s).
    pub fn phase_clock(&self) -> f64 {
        self.phase_clock
    }

    pub fn inductor_current(&self) -> f64 {
        self.x[0]
    }

    /// Capacitor voltage; only meaningful in the short-circuit phase.
    pub fn capacitor_voltage(&self) -> Option<f64> {
        (self.phase == Phase::ShortCircuit).then_some(self.x[1])
    }

    pub fn state_vector(&self) -> &[f64] {
        match self.phase {
            Phase::ShortCircuit => &self.x[..2],
            Phase::ElectricArc => &self.x[..1],
        }
    }

    /// Enter `new_phase`: inductor current carried over, capacitor discharged,
    /// phase clock reset.
    pub fn switch_phase(&self, new_phase: Phase) -> PlantState {
        debug_assert_ne!(new_phase, self.phase, "switch to the active phase");
        PlantState::new(new_phase, self.x[0])
    }
}

/// Joint current and arc voltage at the start of a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantSample {
    pub current: f64,
    pub arc_voltage: f64,
}

#[derive(Clone, Debug)]
struct Subsystem {
    sys: LinearSystem,
    phi: [[f64; 2]; 2],
    gamma: [f64; 2],
}

impl Subsystem {
    fn new(sys: LinearSystem, dt: f64) -> Result<Self> {
        let d = sys.discretize(dt)?;
        let n = sys.order();
        let mut phi = [[0.0; 2]; 2];
        let mut gamma = [0.0; 2];
        for i in 0..n {
            gamma[i] = d.gamma[i];
            for j in 0..n {
                phi[i][j] = d.phi[(i, j)];
            }
        }
        Ok(Self { sys, phi, gamma })
    }

    fn current_derivative(&self, x: &[f64; 2], u: f64) -> f64 {
        let n = self.sys.order();
        let mut d = self.sys.b[0] * (u + self.sys.input_offset);
        for j in 0..n {
            d += self.sys.a[(0, j)] * x[j];
        }
        d
    }

    fn advance(&self, x: &[f64; 2], u: f64) -> [f64; 2] {
        let u = u + self.sys.input_offset;
        let n = self.sys.order();
        let mut out = [0.0; 2];
        for i in 0..n {
            let mut v = self.gamma[i] * u;
            for j in 0..n {
                v += self.phi[i][j] * x[j];
            }
            out[i] = v;
        }
        out
    }
}

/// Both subcircuits discretized at a common step.
#[derive(Clone, Debug)]
pub struct SwitchedPlant {
    params: CircuitParams,
    dt: f64,
    sc: Subsystem,
    ea: Subsystem,
}

impl SwitchedPlant {
    pub fn new(params: &CircuitParams, dt: f64) -> Result<Self> {
        Ok(Self {
            params: params.clone(),
            dt,
            sc: Subsystem::new(sc_transfer(params)?, dt)?,
            ea: Subsystem::new(ea_transfer(params)?, dt)?,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn params(&self) -> &CircuitParams {
        &self.params
    }

    pub fn system(&self, phase: Phase) -> &LinearSystem {
        &self.sub(phase).sys
    }

    fn sub(&self, phase: Phase) -> &Subsystem {
        match phase {
            Phase::ShortCircuit => &self.sc,
            Phase::ElectricArc => &self.ea,
        }
    }

    /// Current and reconstructed arc voltage `U = E_W - R_L I - L dI/dt`
    /// with the derivative taken at the present state.
    pub fn observe(&self, state: &PlantState, source_voltage: f64) -> PlantSample {
        let sub = self.sub(state.phase);
        let current = state.x[0];
        let mut didt = sub.current_derivative(&state.x, source_voltage);
        if current <= 0.0 && didt < 0.0 {
            didt = 0.0;
        }
        PlantSample {
            current,
            arc_voltage: source_voltage
                - self.params.source_resistance * current
                - self.params.inductance * didt,
        }
    }

    /// Advance one step with `source_voltage` held; returns the sample at the
    /// start of the step.
    pub fn step(&self, state: &mut PlantState, source_voltage: f64) -> Result<PlantSample> {
        let sample = self.observe(state, source_voltage);
        let mut next = self.sub(state.phase).advance(&state.x, source_voltage);
        if next[0] < 0.0 {
            next[0] = 0.0;
        }
        if !(next[0].is_finite() && next[1].is_finite()) {
            return Err(Error::Diverged {
                t: state.phase_clock,
            });
        }
        state.x = next;
        state.phase_clock += self.dt;
        Ok(sample)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    /// Integration step (s).
    pub dt: f64,
    /// Record length (s).
    pub duration: f64,
    /// Std of the current measurement noise (A).
    pub noise_std_current: f64,
    /// Std of the arc-voltage measurement noise (V).
    pub noise_std_voltage: f64,
    /// Relative std of the phase durations.
    pub jitter: f64,
    pub seed: u64,
    /// Inductor current at t = 0 (A).
    pub initial_current: f64,
    pub initial_phase: Phase,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-6,
            duration: 0.1,
            noise_std_current: 0.0,
            noise_std_voltage: 0.0,
            jitter: 0.0,
            seed: 0,
            initial_current: 0.0,
            initial_phase: Phase::ShortCircuit,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::invalid("dt", format!("must be > 0, got {}", self.dt)));
        }
        if !(self.duration.is_finite() && self.duration >= self.dt) {
            return Err(Error::invalid(
                "duration",
                format!("must be >= dt ({}), got {}", self.dt, self.duration),
            ));
        }
        for (name, v) in [
            ("noise_std_current", self.noise_std_current),
            ("noise_std_voltage", self.noise_std_voltage),
            ("jitter", self.jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, format!("must be >= 0, got {v}")));
            }
        }
        if !(self.initial_current.is_finite() && self.initial_current >= 0.0) {
            return Err(Error::invalid(
                "initial_current",
                format!("must be >= 0, got {}", self.initial_current),
            ));
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

/// Draws phase lengths in whole steps.
///
/// Each length is `nominal * (1 + jitter * z)` with `z` standard normal
/// truncated to `|z| <= 3`, floored at 10 % of nominal.
struct PhaseSchedule {
    rng: ChaCha8Rng,
    jitter: f64,
    dt: f64,
    sc: f64,
    ea: f64,
}

impl PhaseSchedule {
    fn new(params: &CircuitParams, config: &SimConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0);
        Self {
            rng,
            jitter: config.jitter,
            dt: config.dt,
            sc: params.short_circuit_time,
            ea: params.arc_time,
        }
    }

    fn draw_steps(&mut self, phase: Phase) -> usize {
        let nominal = match phase {
            Phase::ShortCircuit => self.sc,
            Phase::ElectricArc => self.ea,
        };
        let factor = if self.jitter > 0.0 {
            let z = loop {
                let z: f64 = self.rng.sample(StandardNormal);
                if z.abs() <= 3.0 {
                    break z;
                }
            };
            (1.0 + self.jitter * z).max(0.1)
        } else {
            1.0
        };
        ((nominal * factor / self.dt).round() as usize).max(1)
    }
}

struct MeasurementNoise {
    rng: ChaCha8Rng,
    std_current: f64,
    std_voltage: f64,
}

impl MeasurementNoise {
    fn new(config: &SimConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Self {
            rng,
            std_current: config.noise_std_current,
            std_voltage: config.noise_std_voltage,
        }
    }

    fn draw(&mut self) -> (f64, f64) {
        let zi: f64 = self.rng.sample(StandardNormal);
        let zv: f64 = self.rng.sample(StandardNormal);
        (zi * self.std_current, zv * self.std_voltage)
    }
}

/// What a controller sees at a sample instant: noisy current and the arc
/// voltage under the previously applied source voltage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub current: f64,
    pub arc_voltage: f64,
}

fn simulate<F>(params: &CircuitParams, config: &SimConfig, mut source: F) -> Result<Waveform>
where
    F: FnMut(usize, f64, Measurement) -> f64,
{
    config.validate()?;
    let plant = SwitchedPlant::new(params, config.dt)?;
    let mut schedule = PhaseSchedule::new(params, config);
    let mut noise = MeasurementNoise::new(config);

    let n = config.sample_count();
    let mut w = Waveform::with_capacity(n);
    let mut state = PlantState::new(config.initial_phase, config.initial_current);
    let mut remaining = schedule.draw_steps(state.phase);
    let mut applied = 0.0;

    for k in 0..n {
        let t = k as f64 * config.dt;
        if remaining == 0 {
            let before = state.inductor_current();
            state = state.switch_phase(state.phase.other());
            debug_assert_eq!(before, state.inductor_current());
            remaining = schedule.draw_steps(state.phase);
        }
        let (ni, nv) = noise.draw();
        let pre = plant.observe(&state, applied);
        let e_w = source(
            k,
            t,
            Measurement {
                current: pre.current + ni,
                arc_voltage: pre.arc_voltage + nv,
            },
        );
        let phase = state.phase;
        let sample = plant
            .step(&mut state, e_w)
            .map_err(|_| Error::Diverged { t })?;
        w.push(t, sample.current + ni, sample.arc_voltage + nv, e_w, phase);
        applied = e_w;
        remaining -= 1;
    }
    Ok(w)
}

/// Alternate SC (`t_cc`) and EA (`t_ae`) phases under the source-voltage
/// profile `source_voltage(t)`.
pub fn run_open_loop<F>(params: &CircuitParams, config: &SimConfig, mut source_voltage: F) -> Result<Waveform>
where
    F: FnMut(f64) -> f64,
{
    simulate(params, config, |_, t, _| source_voltage(t))
}

/// Anything that turns measurements into a duty-cycle command.
pub trait DutyController {
    /// Called once per control period with the measured current (A), arc
    /// voltage (V) and time (s); returns the duty cycle to hold until the
    /// next call.
    fn update(&mut self, current: f64, arc_voltage: f64, t: f64) -> f64;
}

impl<F> DutyController for F
where
    F: FnMut(f64, f64, f64) -> f64,
{
    fn update(&mut self, current: f64, arc_voltage: f64, t: f64) -> f64 {
        self(current, arc_voltage, t)
    }
}

/// Closed-loop run: the plant keeps its own phase timing, the controller is
/// sampled every `control_period` and its duty passes through the actuator
/// limits.
pub fn run_closed_loop<C>(
    params: &CircuitParams,
    actuator: &ActuatorMap,
    config: &SimConfig,
    control_period: f64,
    controller: &mut C,
) -> Result<Waveform>
where
    C: DutyController + ?Sized,
{
    actuator.validate()?;
    config.validate()?;
    let ratio = control_period / config.dt;
    let every = ratio.round() as usize;
    if every == 0 || (ratio - every as f64).abs() > 1e-6 * ratio {
        return Err(Error::invalid(
            "control_period",
            format!(
                "must be a whole multiple of dt = {}, got {control_period}",
                config.dt
            ),
        ));
    }
    let mut held = actuator.duty_to_volts(actuator.duty_min);
    simulate(params, config, |k, t, meas| {
        if k % every == 0 {
            let duty = controller.update(meas.current, meas.arc_voltage, t);
            held = actuator.duty_to_volts(actuator.clamp_duty(duty).0);
        }
        held
    })
}
