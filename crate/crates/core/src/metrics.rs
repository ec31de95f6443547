//! Welding performance measures computed from a labelled record.
//!
//! Only complete phases count: a segment touching either end of the record
//! is dropped, and a cycle is a complete short circuit followed by a
//! complete arc phase.

use std::fmt::Write as _;

use crate::config::format_f64;
use crate::error::{Error, Result};
use crate::waveform::{Phase, Segment, Waveform};

/// Fraction of each segment, counted from its end, used for slope fits.
pub const SLOPE_FRACTION: f64 = 0.7;

/// Relative slope deviation accepted by [`compare_reports`].
pub const SLOPE_TOLERANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    /// Mean short-circuit current slope (A/ms).
    pub didt_s: f64,
    /// Magnitude of the mean arc-phase current slope (A/ms).
    pub didt_d: f64,
    /// RMS current (A).
    pub i_eff: f64,
    /// RMS arc voltage (V).
    pub v_eff: f64,
    /// Mean per-cycle peak current (A).
    pub i_peak_avg: f64,
    /// Mean per-cycle peak arc voltage (V).
    pub v_peak_avg: f64,
    /// Arc-phase duration, mean and sample std (ms).
    pub dt_ae_avg: f64,
    pub dt_ae_std: f64,
    /// Short-circuit duration, mean and sample std (ms).
    pub dt_cc_avg: f64,
    pub dt_cc_std: f64,
    pub cycle_count: usize,
}

pub const FIELDS: [&str; 11] = [
    "didt_s",
    "didt_d",
    "i_eff",
    "v_eff",
    "i_peak_avg",
    "v_peak_avg",
    "dt_ae_avg",
    "dt_ae_std",
    "dt_cc_avg",
    "dt_cc_std",
    "cycle_count",
];

const UNITS: [&str; 11] = ["A/ms", "A/ms", "A", "V", "A", "V", "ms", "ms", "ms", "ms", ""];

/// Least-squares slope of `y` against `t`.
pub fn regression_slope(t: &[f64], y: &[f64]) -> Option<f64> {
    let n = t.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let tm = t.iter().sum::<f64>() / n as f64;
    let ym = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (ti, yi) in t.iter().zip(y) {
        sxy += (ti - tm) * (yi - ym);
        sxx += (ti - tm) * (ti - tm);
    }
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = if x.len() > 1 {
        (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Slope (A/s) over the last [`SLOPE_FRACTION`] of a segment.
pub fn segment_slope(w: &Waveform, s: &Segment) -> Option<f64> {
    let skip = ((1.0 - SLOPE_FRACTION) * s.len() as f64).floor() as usize;
    let r = (s.start + skip)..s.end;
    regression_slope(&w.t[r.clone()], &w.current[r])
}

pub fn compute_metrics(w: &Waveform) -> Result<MetricsReport> {
    w.validate()?;
    let segs: Vec<Segment> = w.label_segments().into_iter().filter(|s| !s.truncated).collect();
    let cycles: Vec<(Segment, Segment)> = segs
        .windows(2)
        .filter(|p| p[0].phase == Phase::ShortCircuit && p[1].phase == Phase::ElectricArc && p[0].end == p[1].start)
        .map(|p| (p[0], p[1]))
        .collect();
    if cycles.is_empty() {
        return Err(Error::InsufficientCycles { needed: 1, found: 0 });
    }

    let dt = w.dt();
    let phase_stats = |phase: Phase| -> Result<(f64, f64, f64)> {
        let chosen: Vec<&Segment> = segs.iter().filter(|s| s.phase == phase).collect();
        let slopes: Vec<f64> = chosen.iter().filter_map(|s| segment_slope(w, s)).collect();
        if slopes.is_empty() {
            return Err(Error::InsufficientCycles { needed: 1, found: 0 });
        }
        let lengths: Vec<f64> = chosen.iter().map(|s| s.len() as f64 * dt * 1e3).collect();
        let (len_mean, len_std) = mean_std(&lengths);
        Ok((mean_std(&slopes).0 / 1e3, len_mean, len_std))
    };
    let (slope_sc, cc_avg, cc_std) = phase_stats(Phase::ShortCircuit)?;
    let (slope_ea, ae_avg, ae_std) = phase_stats(Phase::ElectricArc)?;

    let peak = |x: &[f64]| -> f64 {
        let peaks: Vec<f64> = cycles
            .iter()
            .map(|(sc, ea)| x[sc.start..ea.end].iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        peaks.iter().sum::<f64>() / peaks.len() as f64
    };

    Ok(MetricsReport {
        didt_s: slope_sc,
        didt_d: slope_ea.abs(),
        i_eff: rms(&w.current),
        v_eff: rms(&w.arc_voltage),
        i_peak_avg: peak(&w.current),
        v_peak_avg: peak(&w.arc_voltage),
        dt_ae_avg: ae_avg,
        dt_ae_std: ae_std,
        dt_cc_avg: cc_avg,
        dt_cc_std: cc_std,
        cycle_count: cycles.len(),
    })
}

impl MetricsReport {
    /// Values in [`FIELDS`] order.
    pub fn values(&self) -> [f64; 11] {
        [
            self.didt_s,
            self.didt_d,
            self.i_eff,
            self.v_eff,
            self.i_peak_avg,
            self.v_peak_avg,
            self.dt_ae_avg,
            self.dt_ae_std,
            self.dt_cc_avg,
            self.dt_cc_std,
            self.cycle_count as f64,
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for ((name, unit), v) in FIELDS.iter().zip(UNITS).zip(self.values()) {
            if *name == "cycle_count" {
                let _ = writeln!(s, "{name:<12} {:>12}", self.cycle_count);
            } else {
                let _ = writeln!(s, "{name:<12} {v:>12.4} {unit}");
            }
        }
        s
    }

    pub fn csv_header() -> String {
        FIELDS.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cells: Vec<String> = self.values()[..10].iter().map(|v| format_f64(*v)).collect();
        cells.push(self.cycle_count.to_string());
        cells.join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(), self.csv_row())
    }
}

/// One field of a [`Comparison`].
#[derive(Clone, Debug, PartialEq)]
pub struct Delta {
    pub field: &'static str,
    pub a: f64,
    pub b: f64,
    /// `a - b`.
    pub absolute: f64,
    /// `(a - b) / |b|`; infinite when `b == 0` and `a != 0`.
    pub relative: f64,
    /// Slope fields only: within [`SLOPE_TOLERANCE`] of `b`.
    pub slope_ok: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<Delta>,
}

/// Field-by-field differences of `a` against the reference `b`.
pub fn compare_reports(a: &MetricsReport, b: &MetricsReport) -> Comparison {
    let rows = FIELDS
        .iter()
        .zip(a.values())
        .zip(b.values())
        .map(|((&field, x), y)| {
            let absolute = x - y;
            let relative = if absolute == 0.0 { 0.0 } else { absolute / y.abs() };
            let slope_ok = matches!(field, "didt_s" | "didt_d").then(|| relative.abs() <= SLOPE_TOLERANCE);
            Delta {
                field,
                a: x,
                b: y,
                absolute,
                relative,
                slope_ok,
            }
        })
        .collect();
    Comparison { rows }
}

/// Report holding only the target slopes, for comparisons against the
/// reference ramp rates (A/s).
pub fn target_slopes(sc_rate: f64, ea_rate: f64) -> MetricsReport {
    MetricsReport {
        didt_s: sc_rate / 1e3,
        didt_d: ea_rate.abs() / 1e3,
        i_eff: 0.0,
        v_eff: 0.0,
        i_peak_avg: 0.0,
        v_peak_avg: 0.0,
        dt_ae_avg: 0.0,
        dt_ae_std: 0.0,
        dt_cc_avg: 0.0,
        dt_cc_std: 0.0,
        cycle_count: 0,
    }
}

impl Comparison {
    pub fn slopes_ok(&self) -> bool {
        self.rows.iter().all(|r| r.slope_ok != Some(false))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<12} {:>12} {:>12} {:>12} {:>10}  {}\n",
            "field", "a", "b", "a-b", "rel", "slope"
        );
        for r in &self.rows {
            let flag = match r.slope_ok {
                Some(true) => "ok",
                Some(false) => "OFF",
                None => "",
            };
            let _ = writeln!(
                s,
                "{:<12} {:>12.4} {:>12.4} {:>12.4} {:>9.2}%  {}",
                r.field,
                r.a,
                r.b,
                r.absolute,
                r.relative * 100.0,
                flag
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("field,a,b,abs_delta,rel_delta,slope_ok\n");
        for r in &self.rows {
            let flag = r.slope_ok.map(|b| b.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.field,
                format_f64(r.a),
                format_f64(r.b),
                format_f64(r.absolute),
                format_f64(r.relative),
                flag
            );
        }
        s
    }
}
