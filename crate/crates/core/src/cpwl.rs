//! Continuous piecewise-linear scalar activations and their translated-ReLU
//! decomposition.
//!
//! A [`CpwlSpec`] of `m` pieces is stored as `m - 1` strictly increasing
//! breakpoints, one slope per piece and an anchor `(x0, f(x0))` that fixes the
//! additive constant. [`decompose`] rewrites it as
//!
//! ```text
//! f(x) = c + Σ r_i·ReLU(x - a_i) + Σ l_i·ReLU(t_i - x)
//! ```
//!
//! using slope jumps at the breakpoints for the right terms and a single left
//! term for the leftmost piece.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CpwlError {
    #[error("breakpoints must be strictly increasing (index {0})")]
    NonIncreasingBreakpoints(usize),
    #[error("expected {expected} slopes for {breakpoints} breakpoints, got {got}")]
    SlopeCount { breakpoints: usize, expected: usize, got: usize },
    #[error("non-finite value in CPWL description")]
    NonFinite,
    #[error("unknown CPWL preset `{0}`")]
    UnknownPreset(String),
}

/// Pointwise CPWL function `ℝ → ℝ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CpwlSpec {
    breakpoints: Vec<f64>,
    slopes: Vec<f64>,
    anchor: (f64, f64),
    #[serde(skip)]
    knots: Vec<f64>,
}

impl CpwlSpec {
    pub fn new(breakpoints: Vec<f64>, slopes: Vec<f64>, anchor: (f64, f64)) -> Result<Self, CpwlError> {
        if slopes.len() != breakpoints.len() + 1 {
            return Err(CpwlError::SlopeCount {
                breakpoints: breakpoints.len(),
                expected: breakpoints.len() + 1,
                got: slopes.len(),
            });
        }
        let finite = breakpoints.iter().chain(&slopes).all(|v| v.is_finite())
            && anchor.0.is_finite()
            && anchor.1.is_finite();
        if !finite {
            return Err(CpwlError::NonFinite);
        }
        if let Some(i) = breakpoints.windows(2).position(|w| w[0] >= w[1]) {
            return Err(CpwlError::NonIncreasingBreakpoints(i + 1));
        }
        let mut spec = Self { breakpoints, slopes, anchor, knots: Vec::new() };
        let offset = anchor.1 - spec.primitive(anchor.0);
        spec.knots = spec.breakpoints.iter().map(|&b| spec.primitive(b) + offset).collect();
        Ok(spec)
    }

    pub fn relu() -> Self {
        Self::new(vec![0.0], vec![0.0, 1.0], (0.0, 0.0)).expect("valid preset")
    }

    pub fn abs() -> Self {
        Self::new(vec![0.0], vec![-1.0, 1.0], (0.0, 0.0)).expect("valid preset")
    }

    pub fn leaky_relu(alpha: f64) -> Self {
        Self::new(vec![0.0], vec![alpha, 1.0], (0.0, 0.0)).expect("valid preset")
    }

    pub fn hard_tanh() -> Self {
        Self::new(vec![-1.0, 1.0], vec![0.0, 1.0, 0.0], (0.0, 0.0)).expect("valid preset")
    }

    /// Parses `relu`, `abs`, `hardtanh` or `leaky:<alpha>`.
    pub fn preset(name: &str) -> Result<Self, CpwlError> {
        match name {
            "relu" => Ok(Self::relu()),
            "abs" => Ok(Self::abs()),
            "hardtanh" => Ok(Self::hard_tanh()),
            _ => {
                let alpha = name
                    .strip_prefix("leaky:")
                    .and_then(|a| a.parse::<f64>().ok())
                    .filter(|a| a.is_finite())
                    .ok_or_else(|| CpwlError::UnknownPreset(name.to_string()))?;
                Ok(Self::leaky_relu(alpha))
            }
        }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn anchor(&self) -> (f64, f64) {
        self.anchor
    }

    pub fn pieces(&self) -> usize {
        self.slopes.len()
    }

    /// Index of the piece containing `x`; a breakpoint belongs to the piece on its right.
    fn piece(&self, x: f64) -> usize {
        self.breakpoints.partition_point(|&b| b <= x)
    }

    // ∫ slope from the first breakpoint (or 0 when there is none) up to x.
    fn primitive(&self, x: f64) -> f64 {
        let Some(&b0) = self.breakpoints.first() else {
            return self.slopes[0] * x;
        };
        if x <= b0 {
            return self.slopes[0] * (x - b0);
        }
        let mut acc = 0.0;
        for (k, w) in self.breakpoints.windows(2).enumerate() {
            if x <= w[1] {
                return acc + self.slopes[k + 1] * (x - w[0]);
            }
            acc += self.slopes[k + 1] * (w[1] - w[0]);
        }
        let last = *self.breakpoints.last().unwrap();
        acc + self.slopes[self.breakpoints.len()] * (x - last)
    }

    pub fn eval(&self, x: f64) -> f64 {
        if self.breakpoints.is_empty() {
            return self.anchor.1 + self.slopes[0] * (x - self.anchor.0);
        }
        let k = self.piece(x);
        if k == 0 {
            self.knots[0] + self.slopes[0] * (x - self.breakpoints[0])
        } else {
            self.knots[k - 1] + self.slopes[k] * (x - self.breakpoints[k - 1])
        }
    }

    /// Right derivative.
    pub fn derivative(&self, x: f64) -> f64 {
        self.slopes[self.piece(x)]
    }

    pub fn is_kink(&self, x: f64, radius: f64) -> bool {
        self.breakpoints.iter().any(|b| (x - b).abs() < radius)
    }
}

impl<'de> Deserialize<'de> for CpwlSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Preset(String),
            Explicit { breakpoints: Vec<f64>, slopes: Vec<f64>, anchor: (f64, f64) },
        }
        let spec = match Repr::deserialize(d)? {
            Repr::Preset(name) => CpwlSpec::preset(&name),
            Repr::Explicit { breakpoints, slopes, anchor } => CpwlSpec::new(breakpoints, slopes, anchor),
        };
        spec.map_err(serde::de::Error::custom)
    }
}

/// `c + Σ r·ReLU(x - a) + Σ l·ReLU(t - x)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluSum {
    /// `(r_i, a_i)` pairs.
    pub right_terms: Vec<(f64, f64)>,
    /// `(l_i, t_i)` pairs.
    pub left_terms: Vec<(f64, f64)>,
    pub constant: f64,
}

impl ReluSum {
    pub fn term_count(&self) -> usize {
        self.right_terms.len() + self.left_terms.len()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let right: f64 = self.right_terms.iter().map(|&(r, a)| r * (x - a).max(0.0)).sum();
        let left: f64 = self.left_terms.iter().map(|&(l, t)| l * (t - x).max(0.0)).sum();
        self.constant + right + left
    }
}

pub fn eval_cpwl(spec: &CpwlSpec, x: f64) -> f64 {
    spec.eval(x)
}

pub fn eval_relusum(rs: &ReluSum, x: f64) -> f64 {
    rs.eval(x)
}

/// Canonical translated-ReLU form of `spec`.
///
/// With breakpoints `b_1 < … < b_{m-1}` and slopes `s_0 … s_{m-1}`:
/// `f = f(b_1) - s_0·ReLU(b_1 - x) + s_1·ReLU(x - b_1) + Σ_{i≥2} (s_i - s_{i-1})·ReLU(x - b_i)`.
/// Zero coefficients are dropped. A purely affine spec (no breakpoints) needs
/// the split `x = ReLU(x) - ReLU(-x)` and so uses two terms.
pub fn decompose(spec: &CpwlSpec) -> ReluSum {
    let s = spec.slopes();
    let b = spec.breakpoints();
    if b.is_empty() {
        let mut rs = ReluSum { right_terms: vec![], left_terms: vec![], constant: spec.eval(0.0) };
        if s[0] != 0.0 {
            rs.right_terms.push((s[0], 0.0));
            rs.left_terms.push((-s[0], 0.0));
        }
        return rs;
    }
    let mut right_terms = Vec::with_capacity(b.len());
    if s[1] != 0.0 {
        right_terms.push((s[1], b[0]));
    }
    for i in 1..b.len() {
        let jump = s[i + 1] - s[i];
        if jump != 0.0 {
            right_terms.push((jump, b[i]));
        }
    }
    let left_terms = if s[0] != 0.0 { vec![(-s[0], b[0])] } else { vec![] };
    ReluSum { right_terms, left_terms, constant: spec.knots[0] }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abs_decomposes_symmetrically() {
        let rs = decompose(&CpwlSpec::abs());
        assert_eq!(rs.right_terms, vec![(1.0, 0.0)]);
        assert_eq!(rs.left_terms, vec![(1.0, 0.0)]);
        assert_eq!(rs.constant, 0.0);
    }

    #[test]
    fn relu_is_single_right_term() {
        let rs = decompose(&CpwlSpec::relu());
        assert_eq!(rs.right_terms, vec![(1.0, 0.0)]);
        assert!(rs.left_terms.is_empty());
        assert_eq!(rs.constant, 0.0);
    }

    #[test]
    fn hard_tanh_form() {
        let rs = decompose(&CpwlSpec::hard_tanh());
        assert_eq!(rs.right_terms, vec![(1.0, -1.0), (-1.0, 1.0)]);
        assert!(rs.left_terms.is_empty());
        assert_eq!(rs.constant, -1.0);
    }

    #[test]
    fn point_values() {
        assert!((CpwlSpec::leaky_relu(0.1).eval(-2.0) + 0.2).abs() < 1e-15);
        assert_eq!(CpwlSpec::abs().eval(0.0), 0.0);
        assert_eq!(CpwlSpec::hard_tanh().eval(3.0), 1.0);
        assert_eq!(CpwlSpec::hard_tanh().eval(-3.0), -1.0);
    }

    #[test]
    fn anchor_off_breakpoint() {
        // f(x) = 2x + 1 for x < 1, 3 - (x - 1) after
        let spec = CpwlSpec::new(vec![1.0], vec![2.0, -1.0], (-1.0, -1.0)).unwrap();
        assert!((spec.eval(1.0) - 3.0).abs() < 1e-15);
        assert!((spec.eval(4.0) - 0.0).abs() < 1e-15);
        let rs = decompose(&spec);
        for x in [-3.0, 0.0, 1.0, 2.5, 7.0] {
            assert!((rs.eval(x) - spec.eval(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_spec_uses_split() {
        let spec = CpwlSpec::new(vec![], vec![-0.5], (2.0, 1.0)).unwrap();
        let rs = decompose(&spec);
        assert_eq!(rs.term_count(), 2);
        for x in [-4.0, 0.0, 3.0] {
            assert!((rs.eval(x) - spec.eval(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_breakpoints() {
        assert_eq!(
            CpwlSpec::new(vec![0.0, 0.0], vec![1.0, 2.0, 3.0], (0.0, 0.0)),
            Err(CpwlError::NonIncreasingBreakpoints(1))
        );
        assert!(matches!(
            CpwlSpec::new(vec![0.0], vec![1.0], (0.0, 0.0)),
            Err(CpwlError::SlopeCount { .. })
        ));
    }

    #[test]
    fn presets_parse() {
        assert_eq!(CpwlSpec::preset("leaky:0.01").unwrap(), CpwlSpec::leaky_relu(0.01));
        assert!(CpwlSpec::preset("swish").is_err());
        let json: CpwlSpec = serde_json::from_str("\"hardtanh\"").unwrap();
        assert_eq!(json, CpwlSpec::hard_tanh());
        let json: CpwlSpec =
            serde_json::from_str(r#"{"breakpoints":[0],"slopes":[-1,1],"anchor":[0,0]}"#).unwrap();
        assert_eq!(json, CpwlSpec::abs());
    }
}
