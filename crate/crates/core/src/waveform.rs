//! Uniformly sampled welding records and their CSV form.
//!
//! CSV header: `t_s,I_W_A,U_arc_V,E_W_V,phase` with `phase` in `{SC, EA}`.
//! Files using `;` as the field separator may write numbers with a decimal
//! comma.

use std::fmt;
use std::io::{BufRead, Write};

use crate::config::parse_number;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "t_s,I_W_A,U_arc_V,E_W_V,phase";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    ShortCircuit,
    ElectricArc,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::ShortCircuit => "SC",
            Phase::ElectricArc => "EA",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SC" => Some(Phase::ShortCircuit),
            "EA" => Some(Phase::ElectricArc),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Phase::ShortCircuit => Phase::ElectricArc,
            Phase::ElectricArc => Phase::ShortCircuit,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A contiguous run of samples `start..end` in one phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub phase: Phase,
    pub start: usize,
    pub end: usize,
    /// The run touches the first or last sample of the record, so its true
    /// extent is unknown.
    pub truncated: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub t: Vec<f64>,
    pub current: Vec<f64>,
    pub arc_voltage: Vec<f64>,
    pub source_voltage: Vec<f64>,
    pub phase: Vec<Phase>,
}

impl Waveform {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            t: Vec::with_capacity(n),
            current: Vec::with_capacity(n),
            arc_voltage: Vec::with_capacity(n),
            source_voltage: Vec::with_capacity(n),
            phase: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, t: f64, current: f64, arc_voltage: f64, source_voltage: f64, phase: Phase) {
        self.t.push(t);
        self.current.push(current);
        self.arc_voltage.push(arc_voltage);
        self.source_voltage.push(source_voltage);
        self.phase.push(phase);
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Sample period estimated from the end points.
    pub fn dt(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return f64::NAN;
        }
        (self.t[n - 1] - self.t[0]) / (n - 1) as f64
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 * self.dt()
    }

    /// Equal column lengths and a constant, strictly positive time step.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.current.len() != n
            || self.arc_voltage.len() != n
            || self.source_voltage.len() != n
            || self.phase.len() != n
        {
            return Err(Error::Shape("waveform columns differ in length".into()));
        }
        if n < 2 {
            return Err(Error::Shape(format!("need at least 2 samples, got {n}")));
        }
        let dt = self.dt();
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Shape("time is not strictly increasing".into()));
        }
        let tol = 1e-6 * dt + 1e-9 * self.t[n - 1].abs().max(self.t[0].abs());
        for k in 1..n {
            if ((self.t[k] - self.t[k - 1]) - dt).abs() > tol {
                return Err(Error::Shape(format!(
                    "non-uniform sampling at row {}: step {} vs {}",
                    k + 1,
                    self.t[k] - self.t[k - 1],
                    dt
                )));
            }
        }
        let all = self
            .current
            .iter()
            .chain(&self.arc_voltage)
            .chain(&self.source_voltage);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite sample".into()));
        }
        Ok(())
    }

    /// Runs of equal phase labels, in order.
    pub fn label_segments(&self) -> Vec<Segment> {
        segments_from_labels(&self.phase)
    }

    /// Shifted copy with `t[k] + offset`.
    pub fn time_shifted(&self, offset: f64) -> Self {
        let mut w = self.clone();
        for t in &mut w.t {
            *t += offset;
        }
        w
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for k in 0..self.len() {
            writeln!(
                out,
                "{:?},{:?},{:?},{:?},{}",
                self.t[k],
                self.current[k],
                self.arc_voltage[k],
                self.source_voltage[k],
                self.phase[k]
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is ascii")
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let (delim, cols) = loop {
            let Some((idx, line)) = lines.next() else {
                return Err(Error::Shape("empty waveform file".into()));
            };
            let line = line?;
            let trimmed = line.trim().trim_start_matches('\u{feff}');
            if trimmed.is_empty() {
                continue;
            }
            let delim = if trimmed.contains(';') { ';' } else { ',' };
            let cols: Vec<String> = trimmed.split(delim).map(|c| c.trim().to_string()).collect();
            let want: Vec<&str> = CSV_HEADER.split(',').collect();
            if cols != want {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("expected header `{CSV_HEADER}`, got `{trimmed}`"),
                });
            }
            break (delim, cols.len());
        };

        let mut w = Waveform::with_capacity(1024);
        for (idx, line) in lines {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let fields: Vec<&str> = trimmed.split(delim).collect();
            if fields.len() != cols {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("expected {cols} fields, got {}", fields.len()),
                });
            }
            let num = |i: usize| {
                parse_number(fields[i]).ok_or_else(|| Error::Parse {
                    line: idx + 1,
                    message: format!("not a number: `{}`", fields[i]),
                })
            };
            let phase = Phase::from_label(fields[4]).ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: format!("unknown phase `{}`", fields[4]),
            })?;
            w.push(num(0)?, num(1)?, num(2)?, num(3)?, phase);
        }
        w.validate()?;
        Ok(w)
    }
}

pub fn segments_from_labels(labels: &[Phase]) -> Vec<Segment> {
    let mut out = Vec::new();
    let n = labels.len();
    let mut start = 0;
    for k in 1..=n {
        if k == n || labels[k] != labels[start] {
            out.push(Segment {
                phase: labels[start],
                start,
                end: k,
                truncated: start == 0 || k == n,
            });
            start = k;
        }
    }
    out
}
