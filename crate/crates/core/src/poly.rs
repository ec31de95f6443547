//! Real polynomials with coefficients stored lowest degree first.

use nalgebra::DMatrix;
use num_complex::Complex64;

#[derive(Clone, Debug, PartialEq)]
pub struct Poly {
    coeffs: Vec<f64>,
}

impl Poly {
    /// `coeffs[k]` multiplies `s^k`. Trailing zeros are trimmed.
    pub fn new(coeffs: Vec<f64>) -> Self {
        let mut p = Self { coeffs };
        p.trim();
        p
    }

    /// Coefficients listed from the highest power down.
    pub fn from_descending(coeffs: &[f64]) -> Self {
        Self::new(coeffs.iter().rev().copied().collect())
    }

    pub fn constant(c: f64) -> Self {
        Self::new(vec![c])
    }

    pub fn zero() -> Self {
        Self { coeffs: vec![] }
    }

    fn trim(&mut self) {
        while matches!(self.coeffs.last(), Some(c) if *c == 0.0) {
            self.coeffs.pop();
        }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Degree; the zero polynomial reports 0.
    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn leading(&self) -> f64 {
        self.coeffs.last().copied().unwrap_or(0.0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn eval_complex(&self, z: Complex64) -> Complex64 {
        self.coeffs
            .iter()
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c)
    }

    pub fn derivative(&self) -> Poly {
        Poly::new(
            self.coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, &c)| c * k as f64)
                .collect(),
        )
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let n = self.coeffs.len().max(other.coeffs.len());
        Poly::new(
            (0..n)
                .map(|k| {
                    self.coeffs.get(k).copied().unwrap_or(0.0)
                        + other.coeffs.get(k).copied().unwrap_or(0.0)
                })
                .collect(),
        )
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        if self.is_zero() || other.is_zero() {
            return Poly::zero();
        }
        let mut out = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in other.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Poly::new(out)
    }

    pub fn scale(&self, k: f64) -> Poly {
        Poly::new(self.coeffs.iter().map(|c| c * k).collect())
    }

    /// `sum |a_k| |z|^k`, the magnitude scale against which residuals at `z` are judged.
    pub fn abs_scale(&self, z: Complex64) -> f64 {
        let r = z.norm();
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * r + c.abs())
    }

    /// Relative condition number of a simple root.
    pub fn root_condition(&self, root: Complex64) -> f64 {
        let dp = self.derivative().eval_complex(root).norm();
        let denom = dp * root.norm().max(f64::MIN_POSITIVE);
        if denom == 0.0 {
            f64::INFINITY
        } else {
            self.abs_scale(root) / denom
        }
    }

    /// All complex roots, from the eigenvalues of the companion matrix.
    ///
    /// The variable is rescaled so the monic coefficients are O(1) before the
    /// eigenvalue solve; each root then gets a few Newton polishing steps on
    /// the original polynomial.
    pub fn roots(&self) -> Vec<Complex64> {
        let n = self.degree();
        if n == 0 || self.is_zero() {
            return Vec::new();
        }
        // Roots at the origin are peeled off exactly.
        let zeros_at_origin = self.coeffs.iter().take_while(|c| **c == 0.0).count();
        let reduced: Vec<f64> = self.coeffs[zeros_at_origin..].to_vec();
        let m = reduced.len() - 1;
        let mut roots = vec![Complex64::new(0.0, 0.0); zeros_at_origin];
        if m == 0 {
            return roots;
        }

        let lead = reduced[m];
        let scale = (reduced[0] / lead).abs().powf(1.0 / m as f64);
        let scale = if scale.is_finite() && scale > 0.0 { scale } else { 1.0 };
        // monic in t = s / scale: t^m + sum c_k t^k with c_k = a_k / (lead * scale^(m-k))
        let mut companion = DMatrix::<f64>::zeros(m, m);
        for k in 0..m {
            let c = reduced[k] / (lead * scale.powi((m - k) as i32));
            companion[(0, m - 1 - k)] = -c;
        }
        for i in 1..m {
            companion[(i, i - 1)] = 1.0;
        }
        let eig = companion.complex_eigenvalues();
        let reduced_poly = Poly::new(reduced);
        let deriv = reduced_poly.derivative();
        for t in eig.iter() {
            let mut z = Complex64::new(t.re, t.im) * scale;
            for _ in 0..3 {
                let f = reduced_poly.eval_complex(z);
                let df = deriv.eval_complex(z);
                if df.norm() == 0.0 {
                    break;
                }
                let next = z - f / df;
                if !(next.re.is_finite() && next.im.is_finite()) {
                    break;
                }
                if reduced_poly.eval_complex(next).norm() <= f.norm() {
                    z = next;
                } else {
                    break;
                }
            }
            roots.push(z);
        }
        sort_roots(&mut roots);
        roots
    }
}

/// Order by real part, then imaginary part; keeps reports stable.
pub fn sort_roots(roots: &mut [Complex64]) {
    roots.sort_by(|a, b| {
        a.re.partial_cmp(&b.re)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.im.partial_cmp(&b.im).unwrap_or(std::cmp::Ordering::Equal))
    });
}
