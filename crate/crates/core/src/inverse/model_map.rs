//! Pointwise maps from model parameters to PDE coefficients.

/// Elementwise map `m ↦ coefficient` with an analytic derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelMap {
    Identity,
    /// `σ = exp(m)`.
    Exp,
    /// Velocity to conductivity:
    /// `σ(m) = (2 − m/c) · ((b − a)/2 · (tanh(10 (c − m)) + 1) + a)`.
    VelToCond { a: f64, b: f64, c: f64 },
    /// Velocity to squared slowness `1 / m²`.
    SlownessSquared,
}

impl ModelMap {
    /// Coefficients and their derivatives with respect to `m`.
    pub fn apply(&self, m: &[f64]) -> (Vec<f64>, Vec<f64>) {
        m.iter().map(|&x| self.apply_scalar(x)).unzip()
    }

    pub fn apply_scalar(&self, x: f64) -> (f64, f64) {
        match *self {
            Self::Identity => (x, 1.0),
            Self::Exp => {
                let e = x.exp();
                (e, e)
            }
            Self::VelToCond { a, b, c } => {
                let t = (10.0 * (c - x)).tanh();
                let g = 0.5 * (b - a) * (t + 1.0) + a;
                let dg = -5.0 * (b - a) * (1.0 - t * t);
                let s = 2.0 - x / c;
                (s * g, -g / c + s * dg)
            }
            Self::SlownessSquared => (1.0 / (x * x), -2.0 / (x * x * x)),
        }
    }
}

/// Free-function form of [`ModelMap::apply`].
pub fn model_map_apply(kind: ModelMap, m: &[f64]) -> (Vec<f64>, Vec<f64>) {
    kind.apply(m)
}
