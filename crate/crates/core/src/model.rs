//! Equivalent-circuit model of the welding joint.
//!
//! Two linear subcircuits share the source branch (inductance `L` in series
//! with the source resistance `R_L`):
//!
//! * short circuit: `R_1` in series with `R_2 || C`, giving
//!   `I(s)/E(s) = (s C R_2 + 1) / (s^2 C L R_2 + s (L + C R_L R_2 + C R_1 R_2) + R_1 + R_2 + R_L)`
//! * electric arc: `R_rea + R_reg` in series with a constant arc voltage
//!   `E_ac`, giving `I(s) / (E(s) - E_ac) = 1 / (s L + R_L + R_rea + R_reg)`.
//!
//! In both realizations state 0 is the inductor current, which is also the
//! joint current `I_W`.

use nalgebra::{DMatrix, DVector, RowDVector};
use num_complex::Complex64;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::poly::Poly;

/// Electrical constants of the switched circuit, SI units.
#[derive(Clone, Debug, PartialEq)]
pub struct CircuitParams {
    /// Source inductance `L` (H).
    pub inductance: f64,
    /// Source resistance `R_L` (Ω).
    pub source_resistance: f64,
    /// Short-circuit capacitance `C` (F).
    pub capacitance: f64,
    /// Capacitor series resistance `R_c` (Ω). Carried for completeness; the
    /// transfer functions do not use it.
    pub capacitor_resistance: f64,
    /// Short-circuit series resistance `R_1` (Ω).
    pub bridge_resistance: f64,
    /// Short-circuit shunt resistance `R_2` (Ω), in parallel with `C`.
    pub shunt_resistance: f64,
    /// Arc resistance `R_rea` (Ω).
    pub arc_resistance: f64,
    /// Re-ignition resistance `R_reg` (Ω).
    pub reignition_resistance: f64,
    /// Constant arc voltage `E_ac` (V).
    pub arc_voltage: f64,
    /// Nominal short-circuit duration `t_cc` (s).
    pub short_circuit_time: f64,
    /// Nominal arc duration `t_ae` (s).
    pub arc_time: f64,
}

impl CircuitParams {
    /// Values identified for the reference welding source.
    pub fn table1() -> Self {
        Self {
            inductance: 180e-6,
            source_resistance: 0.016,
            capacitance: 2.0,
            capacitor_resistance: 0.020,
            bridge_resistance: 0.010,
            shunt_resistance: 0.010,
            arc_resistance: 0.043,
            reignition_resistance: 0.045,
            arc_voltage: 11.0,
            short_circuit_time: 2.5e-3,
            arc_time: 9.5e-3,
        }
    }

    /// `R_rea + R_reg`.
    pub fn arc_branch_resistance(&self) -> f64 {
        self.arc_resistance + self.reignition_resistance
    }

    pub fn cycle_period(&self) -> f64 {
        self.short_circuit_time + self.arc_time
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("L", self.inductance),
            ("R_L", self.source_resistance),
            ("C", self.capacitance),
            ("R_c", self.capacitor_resistance),
            ("R_1", self.bridge_resistance),
            ("R_2", self.shunt_resistance),
            ("R_rea", self.arc_resistance),
            ("R_reg", self.reignition_resistance),
            ("t_cc", self.short_circuit_time),
            ("t_ae", self.arc_time),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be finite and > 0, got {v}")));
            }
        }
        if !(self.arc_voltage.is_finite() && self.arc_voltage >= 0.0) {
            return Err(Error::invalid(
                "E_ac",
                format!("must be finite and >= 0, got {}", self.arc_voltage),
            ));
        }
        Ok(())
    }

    pub(crate) fn write_kv(&self, kv: &mut KeyValues) {
        kv.set_f64("L", self.inductance);
        kv.set_f64("R_L", self.source_resistance);
        kv.set_f64("C", self.capacitance);
        kv.set_f64("R_c", self.capacitor_resistance);
        kv.set_f64("R_1", self.bridge_resistance);
        kv.set_f64("R_2", self.shunt_resistance);
        kv.set_f64("R_rea", self.arc_resistance);
        kv.set_f64("R_reg", self.reignition_resistance);
        kv.set_f64("E_ac", self.arc_voltage);
        kv.set_f64("t_cc", self.short_circuit_time);
        kv.set_f64("t_ae", self.arc_time);
    }

    pub(crate) fn read_kv(kv: &KeyValues) -> Result<Self> {
        let p = Self {
            inductance: kv.f64("L")?,
            source_resistance: kv.f64("R_L")?,
            capacitance: kv.f64("C")?,
            capacitor_resistance: kv.f64("R_c")?,
            bridge_resistance: kv.f64("R_1")?,
            shunt_resistance: kv.f64("R_2")?,
            arc_resistance: kv.f64("R_rea")?,
            reignition_resistance: kv.f64("R_reg")?,
            arc_voltage: kv.f64("E_ac")?,
            short_circuit_time: kv.f64("t_cc")?,
            arc_time: kv.f64("t_ae")?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Continuous-time single-input single-output state-space system
/// `dx/dt = A x + B (u + u0)`, `y = c x + d (u + u0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: RowDVector<f64>,
    pub d: f64,
    /// Additive input offset `u0` (V).
    pub input_offset: f64,
}

/// Zero-order-hold discretization of a [`LinearSystem`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSystem {
    pub phi: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub dt: f64,
}

impl LinearSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DVector<f64>,
        c: RowDVector<f64>,
        d: f64,
        input_offset: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n || b.len() != n || c.len() != n {
            return Err(Error::Shape(format!(
                "A is {}x{}, B has {}, c has {}",
                a.nrows(),
                a.ncols(),
                b.len(),
                c.len()
            )));
        }
        Ok(Self {
            a,
            b,
            c,
            d,
            input_offset,
        })
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn eigenvalues(&self) -> Vec<Complex64> {
        let mut ev: Vec<Complex64> = self
            .a
            .complex_eigenvalues()
            .iter()
            .map(|z| Complex64::new(z.re, z.im))
            .collect();
        crate::poly::sort_roots(&mut ev);
        ev
    }

    pub fn is_stable(&self) -> bool {
        self.eigenvalues().iter().all(|z| z.re < 0.0)
    }

    /// Static gain from `u + u0` to `y`.
    pub fn dc_gain(&self) -> Result<f64> {
        let lu = self.a.clone().lu();
        let x = lu
            .solve(&self.b)
            .ok_or_else(|| Error::Degenerate("state matrix is singular".into()))?;
        Ok(self.d - (&self.c * x)[0])
    }

    /// `c (jω I - A)^{-1} B + d`.
    pub fn frequency_response(&self, omega: f64) -> Complex64 {
        let n = self.order();
        let jw = Complex64::new(0.0, omega);
        let m = DMatrix::<Complex64>::from_fn(n, n, |i, j| {
            let diag = if i == j { jw } else { Complex64::new(0.0, 0.0) };
            diag - Complex64::new(self.a[(i, j)], 0.0)
        });
        let b = DVector::<Complex64>::from_fn(n, |i, _| Complex64::new(self.b[i], 0.0));
        match m.lu().solve(&b) {
            Some(x) => {
                let mut y = Complex64::new(self.d, 0.0);
                for i in 0..n {
                    y += self.c[i] * x[i];
                }
                y
            }
            None => Complex64::new(f64::INFINITY, 0.0),
        }
    }

    /// Numerator and denominator polynomials of the transfer function in `s`,
    /// via the Faddeev-LeVerrier recursion.
    pub fn transfer_function(&self) -> (Poly, Poly) {
        transfer_polys(&self.a, &self.b, &self.c, self.d)
    }

    /// Exact discretization for a piecewise-constant input of period `dt`.
    pub fn discretize(&self, dt: f64) -> Result<DiscreteSystem> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("dt", format!("must be > 0, got {dt}")));
        }
        if self.a.iter().chain(self.b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite system matrices".into()));
        }
        let n = self.order();
        let mut aug = DMatrix::<f64>::zeros(n + 1, n + 1);
        aug.view_mut((0, 0), (n, n)).copy_from(&(&self.a * dt));
        aug.view_mut((0, n), (n, 1)).copy_from(&(&self.b * dt));
        let e = aug.exp();
        let phi = e.view((0, 0), (n, n)).into_owned();
        let gamma = e.view((0, n), (n, 1)).column(0).into_owned();
        if phi.iter().chain(gamma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("matrix exponential overflowed".into()));
        }
        Ok(DiscreteSystem { phi, gamma, dt })
    }
}

impl DiscreteSystem {
    /// Pulse transfer function in `z` of the discretized plant.
    pub fn transfer_function(&self, c: &RowDVector<f64>, d: f64) -> (Poly, Poly) {
        transfer_polys(&self.phi, &self.gamma, c, d)
    }
}

fn transfer_polys(a: &DMatrix<f64>, b: &DVector<f64>, c: &RowDVector<f64>, d: f64) -> (Poly, Poly) {
    // (sI - A)^{-1} = sum_k s^{n-1-k} M_k / det(sI - A)
    let n = a.nrows();
    let mut den = vec![0.0; n + 1];
    den[n] = 1.0;
    let mut num = vec![0.0; n + 1];
    let ident = DMatrix::<f64>::identity(n, n);
    let mut m = ident.clone();
    for k in 1..=n {
        // M_{k-1} contributes to s^{n-k} in the numerator
        num[n - k] += (c * &m * b)[0];
        let am = a * &m;
        let ck = -am.trace() / k as f64;
        den[n - k] = ck;
        m = am + &ident * ck;
    }
    let den = Poly::new(den);
    let num = Poly::new(num).add(&den.scale(d));
    (num, den)
}

/// Short-circuit subcircuit, state `[i_L, v_C]`, output `I_W`.
pub fn sc_transfer(params: &CircuitParams) -> Result<LinearSystem> {
    params.validate()?;
    let l = params.inductance;
    let c = params.capacitance;
    let r2 = params.shunt_resistance;
    let leading = c * l * r2;
    if !(leading > 0.0 && leading.is_finite()) {
        return Err(Error::Degenerate(format!(
            "short-circuit denominator leading coefficient C*L*R_2 = {leading}"
        )));
    }
    let series = params.source_resistance + params.bridge_resistance;
    let a = DMatrix::from_row_slice(2, 2, &[-series / l, -1.0 / l, 1.0 / c, -1.0 / (r2 * c)]);
    LinearSystem::new(
        a,
        DVector::from_vec(vec![1.0 / l, 0.0]),
        RowDVector::from_vec(vec![1.0, 0.0]),
        0.0,
        0.0,
    )
}

/// Electric-arc subcircuit, state `[i_L]`, input offset `-E_ac`.
pub fn ea_transfer(params: &CircuitParams) -> Result<LinearSystem> {
    params.validate()?;
    let l = params.inductance;
    if !(l > 0.0) {
        return Err(Error::Degenerate(format!("inductance L = {l}")));
    }
    let r = params.source_resistance + params.arc_branch_resistance();
    LinearSystem::new(
        DMatrix::from_element(1, 1, -r / l),
        DVector::from_element(1, 1.0 / l),
        RowDVector::from_element(1, 1.0),
        0.0,
        -params.arc_voltage,
    )
}

/// Which side of the actuator range a command ended up on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Saturation {
    None,
    Low,
    High,
}

/// Linear duty-cycle to source-voltage map of the converter.
#[derive(Clone, Debug, PartialEq)]
pub struct ActuatorMap {
    pub volts_per_unit_duty: f64,
    pub duty_min: f64,
    pub duty_max: f64,
}

impl Default for ActuatorMap {
    /// 200 V per unit duty (21.1 V at 10.55 %), duty limited to 50 %.
    fn default() -> Self {
        Self {
            volts_per_unit_duty: 200.0,
            duty_min: 0.0,
            duty_max: 0.5,
        }
    }
}

impl ActuatorMap {
    pub fn validate(&self) -> Result<()> {
        if !(self.volts_per_unit_duty.is_finite() && self.volts_per_unit_duty > 0.0) {
            return Err(Error::invalid(
                "duty_volts_gain",
                format!("must be > 0, got {}", self.volts_per_unit_duty),
            ));
        }
        if !(0.0 <= self.duty_min && self.duty_min < self.duty_max && self.duty_max <= 0.5) {
            return Err(Error::invalid(
                "duty_max",
                format!(
                    "need 0 <= duty_min < duty_max <= 0.5, got [{}, {}]",
                    self.duty_min, self.duty_max
                ),
            ));
        }
        Ok(())
    }

    pub fn duty_to_volts(&self, duty: f64) -> f64 {
        self.volts_per_unit_duty * duty
    }

    /// Inverse map, clamped to the duty range.
    pub fn volts_to_duty(&self, volts: f64) -> (f64, Saturation) {
        self.clamp_duty(volts / self.volts_per_unit_duty)
    }

    pub fn clamp_duty(&self, duty: f64) -> (f64, Saturation) {
        if duty > self.duty_max {
            (self.duty_max, Saturation::High)
        } else if duty < self.duty_min || duty.is_nan() {
            (self.duty_min, Saturation::Low)
        } else {
            (duty, Saturation::None)
        }
    }

    /// Source voltage range reachable through the duty limits.
    pub fn voltage_range(&self) -> (f64, f64) {
        (
            self.duty_to_volts(self.duty_min),
            self.duty_to_volts(self.duty_max),
        )
    }
}

/// Contents of a `.params` file: the circuit plus the actuator calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantSpec {
    pub circuit: CircuitParams,
    pub actuator: ActuatorMap,
}

impl PlantSpec {
    pub fn table1() -> Self {
        Self {
            circuit: CircuitParams::table1(),
            actuator: ActuatorMap::default(),
        }
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let circuit = CircuitParams::read_kv(kv)?;
        let actuator = ActuatorMap {
            volts_per_unit_duty: kv.f64("duty_volts_gain")?,
            duty_min: kv.f64_or("duty_min", 0.0)?,
            duty_max: kv.f64("duty_max")?,
        };
        actuator.validate()?;
        Ok(Self { circuit, actuator })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        self.circuit.write_kv(&mut kv);
        kv.set_f64("duty_volts_gain", self.actuator.volts_per_unit_duty);
        kv.set_f64("duty_max", self.actuator.duty_max);
        if self.actuator.duty_min != 0.0 {
            kv.set_f64("duty_min", self.actuator.duty_min);
        }
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }
}
