//! Switched PID current controller.
//!
//! Per phase the controller tracks the ramp `I_o + alpha * t`, where `I_o` is
//! the current measured when the phase change was detected. The PID acts on a
//! source-voltage command,
//!
//! `E_W(s) = [k_p + k_i / s + k_d s / (1 + T_f s)] E(s)`,
//!
//! discretized with the trapezoidal rule, and the command is mapped to a duty
//! cycle through the [`ActuatorMap`].

use std::collections::VecDeque;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{ActuatorMap, CircuitParams, Saturation};
use crate::simulator::DutyController;
use crate::waveform::Phase;

/// Derivative filter constant used when a gains file gives none: `T_f = T_d / 5`.
pub const DEFAULT_FILTER_RATIO: f64 = 5.0;

/// Suggested inductor current at the start of a closed-loop run (A).
///
/// Each nominal cycle climbs `alpha_sc * t_cc` = 150 A and falls
/// `|alpha_ea| * t_ae` = 190 A, so the cycle-start current drops about 40 A
/// per cycle. Starting here keeps a 100 ms record above zero current, where
/// the diode would otherwise stall the ramps.
pub const CLOSED_LOOP_START_CURRENT: f64 = 400.0;

/// Standard-form PID settings (gains in V/A, times in s).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PidGains {
    pub proportional: f64,
    /// `T_i`; `f64::INFINITY` disables the integrator.
    pub integral_time: f64,
    pub derivative_time: f64,
    pub filter_time: f64,
}

impl PidGains {
    pub fn new(proportional: f64, integral_time: f64, derivative_time: f64, filter_time: f64) -> Result<Self> {
        let g = Self {
            proportional,
            integral_time,
            derivative_time,
            filter_time,
        };
        g.validate()?;
        Ok(g)
    }

    /// Gains with the default derivative filter.
    pub fn standard(proportional: f64, integral_time: f64, derivative_time: f64) -> Result<Self> {
        Self::new(
            proportional,
            integral_time,
            derivative_time,
            default_filter_time(derivative_time),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.proportional.is_finite() && self.proportional > 0.0) {
            return Err(Error::invalid("K_p", format!("must be > 0, got {}", self.proportional)));
        }
        if !(self.integral_time > 0.0) {
            return Err(Error::invalid("T_i", format!("must be > 0, got {}", self.integral_time)));
        }
        if !(self.derivative_time.is_finite() && self.derivative_time >= 0.0) {
            return Err(Error::invalid("T_d", format!("must be >= 0, got {}", self.derivative_time)));
        }
        if !(self.filter_time.is_finite() && self.filter_time > 0.0) {
            return Err(Error::invalid("T_f", format!("must be > 0, got {}", self.filter_time)));
        }
        Ok(())
    }

    pub fn kp(&self) -> f64 {
        self.proportional
    }

    pub fn ki(&self) -> f64 {
        self.proportional / self.integral_time
    }

    pub fn kd(&self) -> f64 {
        self.proportional * self.derivative_time
    }

    /// Same time constants, proportional gain replaced.
    pub fn with_proportional(&self, proportional: f64) -> Self {
        Self {
            proportional,
            ..*self
        }
    }
}

fn default_filter_time(derivative_time: f64) -> f64 {
    if derivative_time > 0.0 {
        derivative_time / DEFAULT_FILTER_RATIO
    } else {
        1e-6
    }
}

/// Desired current slopes per phase (A/s).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceSpec {
    pub sc_rate: f64,
    pub ea_rate: f64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self {
            sc_rate: 60e3,
            ea_rate: -20e3,
        }
    }
}

impl ReferenceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sc_rate >= 0.0 && self.ea_rate <= 0.0 && self.sc_rate.is_finite() && self.ea_rate.is_finite()) {
            return Err(Error::invalid(
                "alpha",
                format!(
                    "need alpha_sc >= 0 >= alpha_ea, got {} / {}",
                    self.sc_rate, self.ea_rate
                ),
            ));
        }
        Ok(())
    }

    pub fn rate(&self, phase: Phase) -> f64 {
        match phase {
            Phase::ShortCircuit => self.sc_rate,
            Phase::ElectricArc => self.ea_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorConfig {
    /// Arc voltage below which a rising current means short circuit (V).
    pub voltage_threshold: f64,
    /// Minimum smoothed gradient that counts as rising (A/s).
    pub slope_threshold: f64,
    /// Span of the smoothed gradient (s).
    pub gradient_window: f64,
    /// Controller periods after a switch during which no new switch is accepted.
    pub min_dwell: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            voltage_threshold: 14.4,
            slope_threshold: 5e3,
            gradient_window: 50e-6,
            min_dwell: 3,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self, period: f64) -> Result<()> {
        if !(self.voltage_threshold > 0.0) {
            return Err(Error::invalid("v_threshold", "must be > 0"));
        }
        if !(self.slope_threshold >= 0.0) {
            return Err(Error::invalid("slope_threshold", "must be >= 0"));
        }
        if !(self.gradient_window >= 2.0 * period * (1.0 - 1e-9)) {
            return Err(Error::invalid(
                "gradient_window",
                format!("must span at least 2 controller periods ({})", 2.0 * period),
            ));
        }
        if self.min_dwell < 3 {
            return Err(Error::invalid("min_dwell", "must be >= 3"));
        }
        Ok(())
    }
}

/// Everything the switched controller needs, as loaded from a `.gains` file.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerConfig {
    pub sc: PidGains,
    pub ea: PidGains,
    pub reference: ReferenceSpec,
    pub detector: DetectorConfig,
    /// Controller sample period (s).
    pub period: f64,
}

impl ControllerConfig {
    pub fn from_gains(sc: PidGains, ea: PidGains) -> Self {
        Self {
            sc,
            ea,
            reference: ReferenceSpec::default(),
            detector: DetectorConfig::default(),
            period: 10e-6,
        }
    }

    /// Root-locus design for the 5 % settling criterion.
    pub fn table2() -> Self {
        Self::from_gains(
            PidGains::standard(4.25, 6.296e-3, 1.176e-3).expect("valid"),
            PidGains::standard(1.55, 1.107e-3, 1.613e-3).expect("valid"),
        )
    }

    /// Retune for the 10 % settling criterion.
    pub fn table3() -> Self {
        Self::from_gains(
            PidGains::standard(2.75, 39.286e-3, 454.55e-6).expect("valid"),
            PidGains::standard(3.25, 13e-3, 769.23e-6).expect("valid"),
        )
    }

    pub fn gains(&self, phase: Phase) -> &PidGains {
        match phase {
            Phase::ShortCircuit => &self.sc,
            Phase::ElectricArc => &self.ea,
        }
    }

    pub fn gains_mut(&mut self, phase: Phase) -> &mut PidGains {
        match phase {
            Phase::ShortCircuit => &mut self.sc,
            Phase::ElectricArc => &mut self.ea,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sc.validate()?;
        self.ea.validate()?;
        self.reference.validate()?;
        if !(self.period.is_finite() && self.period > 0.0) {
            return Err(Error::invalid("control_period", "must be > 0"));
        }
        self.detector.validate(self.period)
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let gains = |prefix: &str| -> Result<PidGains> {
            let kp = kv.f64(&format!("{prefix}.K_p"))?;
            let ti = kv.f64(&format!("{prefix}.T_i"))?;
            let td = kv.f64(&format!("{prefix}.T_d"))?;
            let tf = kv.f64_or(&format!("{prefix}.T_f"), default_filter_time(td))?;
            PidGains::new(kp, ti, td, tf)
        };
        let d = DetectorConfig::default();
        let r = ReferenceSpec::default();
        let min_dwell = kv.f64_or("min_dwell", d.min_dwell as f64)?;
        if !(min_dwell >= 0.0 && min_dwell.fract() == 0.0) {
            return Err(Error::invalid("min_dwell", "must be a whole number of periods"));
        }
        let cfg = Self {
            sc: gains("sc")?,
            ea: gains("ea")?,
            reference: ReferenceSpec {
                sc_rate: kv.f64_or("alpha_sc", r.sc_rate)?,
                ea_rate: kv.f64_or("alpha_ea", r.ea_rate)?,
            },
            detector: DetectorConfig {
                voltage_threshold: kv.f64_or("v_threshold", d.voltage_threshold)?,
                slope_threshold: kv.f64_or("slope_threshold", d.slope_threshold)?,
                gradient_window: kv.f64_or("gradient_window", d.gradient_window)?,
                min_dwell: min_dwell as usize,
            },
            period: kv.f64_or("control_period", 10e-6)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        for (prefix, g) in [("sc", &self.sc), ("ea", &self.ea)] {
            kv.set_f64(&format!("{prefix}.K_p"), g.proportional);
            kv.set_f64(&format!("{prefix}.T_i"), g.integral_time);
            kv.set_f64(&format!("{prefix}.T_d"), g.derivative_time);
            kv.set_f64(&format!("{prefix}.T_f"), g.filter_time);
        }
        kv.set_f64("alpha_sc", self.reference.sc_rate);
        kv.set_f64("alpha_ea", self.reference.ea_rate);
        kv.set_f64("v_threshold", self.detector.voltage_threshold);
        kv.set_f64("slope_threshold", self.detector.slope_threshold);
        kv.set_f64("gradient_window", self.detector.gradient_window);
        kv.set("min_dwell", self.detector.min_dwell);
        kv.set_f64("control_period", self.period);
        kv
    }
}

/// Integrator and derivative-filter memory of one PID.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PidState {
    pub integral: f64,
    pub derivative: f64,
    pub prev_error: f64,
}

impl PidState {
    /// State whose next output equals `voltage` for an unchanged `error`
    /// with no proportional contribution, i.e. the integrator holds the whole
    /// command and the derivative filter is empty.
    pub fn bumpless(voltage: f64, error: f64) -> Self {
        Self {
            integral: voltage,
            derivative: 0.0,
            prev_error: error,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PidOutput {
    /// Source voltage actually requested after saturation (V).
    pub voltage: f64,
    pub duty: f64,
    pub saturation: Saturation,
}

/// One controller period.
///
/// Conditional anti-windup: the integrator is frozen when the unsaturated
/// command is beyond an actuator limit and the error pushes further that way;
/// it is also kept inside the reachable voltage range.
pub fn pid_step(state: &mut PidState, gains: &PidGains, error: f64, dt: f64, actuator: &ActuatorMap) -> PidOutput {
    let (v_min, v_max) = actuator.voltage_range();
    let proportional = gains.kp() * error;

    let candidate = state.integral + gains.ki() * dt * 0.5 * (error + state.prev_error);
    let tf = gains.filter_time;
    let pole = (2.0 * tf - dt) / (2.0 * tf + dt);
    let derivative = pole * state.derivative + 2.0 * gains.kd() / (2.0 * tf + dt) * (error - state.prev_error);

    let unsaturated = proportional + candidate + derivative;
    let winding_up = (unsaturated > v_max && error > 0.0) || (unsaturated < v_min && error < 0.0);
    let integral = if winding_up {
        state.integral
    } else {
        candidate.clamp(v_min, v_max)
    };

    let (duty, saturation) = actuator.volts_to_duty(proportional + integral + derivative);
    *state = PidState {
        integral,
        derivative,
        prev_error: error,
    };
    PidOutput {
        voltage: actuator.duty_to_volts(duty),
        duty,
        saturation,
    }
}

/// Result of feeding one sample to the [`PhaseDetector`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub phase: Phase,
    pub switched: bool,
    /// Smoothed current gradient (A/s), once enough history exists.
    pub gradient: Option<f64>,
}

/// Online metal-transfer phase detector.
///
/// Short circuit starts when the smoothed current gradient exceeds the slope
/// threshold while the arc voltage is below the voltage threshold. It ends
/// when the gradient turns negative or when the arc voltage climbs back above
/// the threshold (re-ignition). The voltage condition matters in closed loop:
/// a fast short-circuit PID can cancel the current drop at re-ignition before
/// the smoothed gradient changes sign.
#[derive(Clone, Debug)]
pub struct PhaseDetector {
    config: DetectorConfig,
    period: f64,
    lag: usize,
    history: VecDeque<f64>,
    phase: Phase,
    since_switch: usize,
}

impl PhaseDetector {
    pub fn new(config: DetectorConfig, period: f64, initial_phase: Phase) -> Result<Self> {
        config.validate(period)?;
        let lag = ((config.gradient_window / period).round() as usize).max(2);
        Ok(Self {
            config,
            period,
            lag,
            history: VecDeque::with_capacity(lag + 1),
            phase: initial_phase,
            since_switch: config.min_dwell,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn update(&mut self, current: f64, arc_voltage: f64) -> Detection {
        if self.history.len() == self.lag + 1 {
            self.history.pop_front();
        }
        self.history.push_back(current);
        self.since_switch = self.since_switch.saturating_add(1);

        let gradient = (self.history.len() == self.lag + 1).then(|| {
            (self.history[self.lag] - self.history[0]) / (self.lag as f64 * self.period)
        });
        let mut switched = false;
        if let Some(g) = gradient {
            if self.since_switch > self.config.min_dwell {
                let next = match self.phase {
                    Phase::ElectricArc
                        if g > self.config.slope_threshold
                            && arc_voltage < self.config.voltage_threshold =>
                    {
                        Some(Phase::ShortCircuit)
                    }
                    Phase::ShortCircuit
                        if g < 0.0 || arc_voltage > self.config.voltage_threshold =>
                    {
                        Some(Phase::ElectricArc)
                    }
                    _ => None,
                };
                if let Some(p) = next {
                    self.phase = p;
                    self.since_switch = 0;
                    switched = true;
                }
            }
        }
        Detection {
            phase: self.phase,
            switched,
            gradient,
        }
    }
}

/// Mutable part of the switched controller.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControllerState {
    pub pid: PidState,
    pub phase: Phase,
    /// Current at the last detected switch (A).
    pub initial_current: f64,
    pub time_in_phase: f64,
}

/// `I_o + alpha * t` for the detected phase.
pub fn reference(state: &ControllerState, spec: &ReferenceSpec, time_in_phase: f64) -> f64 {
    state.initial_current + spec.rate(state.phase) * time_in_phase
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwitchEvent {
    pub t: f64,
    pub phase: Phase,
}

/// Detector, reference generator and per-phase PID composed into one
/// [`DutyController`].
#[derive(Clone, Debug)]
pub struct SwitchedController {
    config: ControllerConfig,
    actuator: ActuatorMap,
    params: CircuitParams,
    detector: PhaseDetector,
    state: Option<ControllerState>,
    last_voltage: f64,
    events: Vec<SwitchEvent>,
}

impl SwitchedController {
    pub fn new(
        params: &CircuitParams,
        actuator: &ActuatorMap,
        config: &ControllerConfig,
        initial_phase: Phase,
    ) -> Result<Self> {
        config.validate()?;
        actuator.validate()?;
        params.validate()?;
        Ok(Self {
            detector: PhaseDetector::new(config.detector, config.period, initial_phase)?,
            config: config.clone(),
            actuator: actuator.clone(),
            params: params.clone(),
            state: None,
            last_voltage: 0.0,
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn state(&self) -> Option<&ControllerState> {
        self.state.as_ref()
    }

    /// Detected phase changes so far.
    pub fn events(&self) -> &[SwitchEvent] {
        &self.events
    }

    /// Source voltage that keeps the nominal model on the reference ramp at
    /// `current`; used only to preload the integrator on the first sample.
    fn feedforward(&self, phase: Phase, current: f64) -> f64 {
        let p = &self.params;
        let rate = self.config.reference.rate(phase);
        let v = match phase {
            Phase::ShortCircuit => (p.source_resistance + p.bridge_resistance) * current,
            Phase::ElectricArc => {
                p.arc_voltage + (p.source_resistance + p.arc_branch_resistance()) * current
            }
        } + p.inductance * rate;
        let (lo, hi) = self.actuator.voltage_range();
        v.clamp(lo, hi)
    }

    pub fn step(&mut self, current: f64, arc_voltage: f64, t: f64) -> PidOutput {
        if self.state.is_none() {
            let phase = self.detector.phase();
            let v = self.feedforward(phase, current);
            self.last_voltage = v;
            self.state = Some(ControllerState {
                pid: PidState::bumpless(v, 0.0),
                phase,
                initial_current: current,
                time_in_phase: 0.0,
            });
        }
        let detection = self.detector.update(current, arc_voltage);
        let state = self.state.as_mut().expect("initialized above");
        if detection.switched {
            state.phase = detection.phase;
            state.initial_current = current;
            state.time_in_phase = 0.0;
            state.pid = PidState::bumpless(self.last_voltage, 0.0);
            self.events.push(SwitchEvent {
                t,
                phase: detection.phase,
            });
        }
        let target = reference(state, &self.config.reference, state.time_in_phase);
        let gains = *self.config.gains(state.phase);
        let out = pid_step(
            &mut state.pid,
            &gains,
            target - current,
            self.config.period,
            &self.actuator,
        );
        state.time_in_phase += self.config.period;
        self.last_voltage = out.voltage;
        out
    }
}

impl DutyController for SwitchedController {
    fn update(&mut self, current: f64, arc_voltage: f64, t: f64) -> f64 {
        self.step(current, arc_voltage, t).duty
    }
}

/// Controller ready to hand to [`crate::simulator::run_closed_loop`],
/// starting in the short-circuit phase like the simulator.
pub fn controller_callback(
    params: &CircuitParams,
    actuator: &ActuatorMap,
    config: &ControllerConfig,
) -> Result<SwitchedController> {
    SwitchedController::new(params, actuator, config, Phase::ShortCircuit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_reference() {
        let spec = ReferenceSpec::default();
        let mut st = ControllerState {
            pid: PidState::bumpless(0.0, 0.0),
            phase: Phase::ShortCircuit,
            initial_current: 150.0,
            time_in_phase: 0.0,
        };
        assert!((reference(&st, &spec, 1e-3) - 210.0).abs() < 1e-9);
        assert_eq!(reference(&st, &spec, 0.0), 150.0);
        st.phase = Phase::ElectricArc;
        st.initial_current = 280.0;
        assert!((reference(&st, &spec, 2e-3) - 240.0).abs() < 1e-9);
    }

    #[test]
    fn gain_conversion_identities() {
        for cfg in [ControllerConfig::table2(), ControllerConfig::table3()] {
            for g in [cfg.sc, cfg.ea] {
                assert!((g.ki() * g.integral_time - g.kp()).abs() <= 1e-12 * g.kp());
                assert_eq!(g.kd(), g.kp() * g.derivative_time);
            }
        }
        let sc = ControllerConfig::table2().sc;
        assert!((sc.kd() - 5.0e-3).abs() < 1e-5);
    }

    #[test]
    fn proportional_only() {
        let gains = PidGains::new(2.0, f64::INFINITY, 0.0, 1e-6).unwrap();
        let act = ActuatorMap::default();
        let mut st = PidState::bumpless(0.0, 3.0);
        for _ in 0..10 {
            let out = pid_step(&mut st, &gains, 3.0, 10e-6, &act);
            assert_eq!(out.voltage, 6.0);
            assert_eq!(out.duty, 6.0 / 200.0);
        }
    }

    #[test]
    fn anti_windup_freezes_integrator() {
        let gains = ControllerConfig::table2().sc;
        let act = ActuatorMap::default();
        let mut st = PidState::bumpless(90.0, 1e3);
        let before = st.integral;
        let out = pid_step(&mut st, &gains, 1e3, 10e-6, &act);
        assert_eq!(out.duty, act.duty_max);
        assert_eq!(out.saturation, Saturation::High);
        assert_eq!(st.integral, before);

        let mut st = PidState::bumpless(5.0, -1e3);
        let out = pid_step(&mut st, &gains, -1e3, 10e-6, &act);
        assert_eq!(out.duty, act.duty_min);
        assert_eq!(st.integral, 5.0);
    }

    #[test]
    fn detector_rules() {
        let period = 10e-6;
        let mut det = PhaseDetector::new(DetectorConfig::default(), period, Phase::ElectricArc).unwrap();
        // arc voltage drops while current rises at 50 A/ms
        let mut switched_at = None;
        for k in 0..20 {
            let i = 100.0 + 50e3 * period * k as f64;
            let u = if k < 8 { 19.0 } else { 10.0 };
            let d = det.update(i, u);
            if d.switched {
                switched_at = Some(k);
                assert_eq!(d.phase, Phase::ShortCircuit);
            }
        }
        assert_eq!(switched_at, Some(8));

        // gradient turns negative during short circuit
        let mut det = PhaseDetector::new(DetectorConfig::default(), period, Phase::ShortCircuit).unwrap();
        let mut i = 200.0;
        let mut got = None;
        for k in 0..30 {
            i += if k < 10 { 0.6 } else { -1.0 };
            if det.update(i, 2.0).switched {
                got = Some(k);
            }
        }
        assert_eq!(det.phase(), Phase::ElectricArc);
        assert!(got.unwrap() > 10 && got.unwrap() <= 13);

        // low voltage but flat current: no switch
        let mut det = PhaseDetector::new(DetectorConfig::default(), period, Phase::ElectricArc).unwrap();
        for _ in 0..50 {
            assert!(!det.update(120.0, 10.0).switched);
        }
    }

    #[test]
    fn detector_rejects_short_window() {
        let cfg = DetectorConfig {
            gradient_window: 10e-6,
            ..DetectorConfig::default()
        };
        assert!(PhaseDetector::new(cfg, 10e-6, Phase::ShortCircuit).is_err());
    }

    #[test]
    fn gains_file_round_trip() {
        let cfg = ControllerConfig::table3();
        let back = ControllerConfig::parse(&cfg.to_kv().to_text()).unwrap();
        assert_eq!(cfg, back);
        let t2 = ControllerConfig::parse(include_str!("../fixtures/table2.gains")).unwrap();
        assert_eq!(t2, ControllerConfig::table2());
        let t3 = ControllerConfig::parse(include_str!("../fixtures/table3.gains")).unwrap();
        assert_eq!(t3, ControllerConfig::table3());
    }
}
