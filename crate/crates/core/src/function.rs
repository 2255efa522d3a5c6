//! Base-set functions attached to graph arcs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpwl::CpwlSpec;
use crate::linalg::{add_assign, Matrix};
use crate::transform;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FunctionError {
    #[error("bias length {bias} does not match matrix rows {rows}")]
    BiasLength { rows: usize, bias: usize },
    #[error("non-finite parameter")]
    NonFinite,
    #[error("block [{offset}, {offset}+{width}) exceeds dimension {dim}")]
    BlockOutOfRange { offset: usize, width: usize, dim: usize },
    #[error("max-pool window {window} does not divide dimension {dim}")]
    BadWindow { window: usize, dim: usize },
    #[error("unknown transform `{0}`")]
    UnknownTransform(String),
    #[error("transform `{0}` has no registered derivative")]
    NonDifferentiable(String),
    #[error("zero-sized dimension")]
    EmptyDim,
}

/// Activation applied after an (optional) affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Activation {
    /// Non-overlapping max over consecutive windows.
    MaxPool { maxpool: usize },
    /// Pointwise CPWL function.
    Cpwl(CpwlSpec),
}

impl Activation {
    pub fn relu() -> Self {
        Activation::Cpwl(CpwlSpec::relu())
    }

    fn out_dim(&self, dim: usize) -> usize {
        match self {
            Activation::Cpwl(_) => dim,
            Activation::MaxPool { maxpool } => dim / maxpool,
        }
    }

    fn check(&self, dim: usize) -> Result<(), FunctionError> {
        match *self {
            Activation::MaxPool { maxpool } if maxpool == 0 || dim % maxpool != 0 => {
                Err(FunctionError::BadWindow { window: maxpool, dim })
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Activation::Cpwl(spec) => z.iter().map(|&v| spec.eval(v)).collect(),
            Activation::MaxPool { maxpool } => z
                .chunks(*maxpool)
                .map(|w| w.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect(),
        }
    }

    fn vjp(&self, z: &[f64], g: &[f64]) -> Vec<f64> {
        match self {
            Activation::Cpwl(spec) => z.iter().zip(g).map(|(&v, g)| g * spec.derivative(v)).collect(),
            Activation::MaxPool { maxpool } => {
                let mut out = vec![0.0; z.len()];
                for (k, (w, g)) in z.chunks(*maxpool).zip(g).enumerate() {
                    let arg = w
                        .iter()
                        .enumerate()
                        .fold(0, |best, (i, v)| if *v > w[best] { i } else { best });
                    out[k * maxpool + arg] = *g;
                }
                out
            }
        }
    }

    /// Distance from `z` to the nearest non-differentiable point.
    pub fn kink_distance(&self, z: &[f64]) -> f64 {
        match self {
            Activation::Cpwl(spec) => z
                .iter()
                .flat_map(|&v| spec.breakpoints().iter().map(move |b| (v - b).abs()))
                .fold(f64::INFINITY, f64::min),
            Activation::MaxPool { maxpool } => z
                .chunks(*maxpool)
                .map(|w| {
                    let mut s: Vec<f64> = w.to_vec();
                    s.sort_by(|a, b| b.total_cmp(a));
                    if s.len() < 2 { f64::INFINITY } else { s[0] - s[1] }
                })
                .fold(f64::INFINITY, f64::min),
        }
    }
}

/// One element of the base set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ArcFunction {
    Identity { dim: usize },
    Linear { matrix: Matrix },
    Affine { matrix: Matrix, bias: Vec<f64> },
    Activation { activation: Activation, dim: usize },
    ActAffine { activation: Activation, matrix: Matrix, bias: Vec<f64> },
    /// A registered non-linear transformation on its own.
    Sigma { kind: String, dim: usize },
    /// A registered non-linear transformation after an affine map.
    SigmaAffine { kind: String, matrix: Matrix, bias: Vec<f64> },
    /// Embeds `ℝ^width` as the block `[offset, offset+width)` of `ℝ^dim`.
    RestrictedIdentity { offset: usize, width: usize, dim: usize },
    Zero { in_dim: usize, out_dim: usize },
}

/// Intermediate values kept by [`ArcFunction::forward_cached`].
#[derive(Debug, Clone, Default)]
pub struct ArcCache {
    /// Pre-activation `Mx + b` for compound functions.
    pub pre: Vec<f64>,
    pub out: Vec<f64>,
}

impl ArcFunction {
    pub fn linear(matrix: Matrix) -> Self {
        ArcFunction::Linear { matrix }
    }

    pub fn affine(matrix: Matrix, bias: Vec<f64>) -> Self {
        ArcFunction::Affine { matrix, bias }
    }

    pub fn relu_affine(matrix: Matrix, bias: Vec<f64>) -> Self {
        ArcFunction::ActAffine { activation: Activation::relu(), matrix, bias }
    }

    pub fn sigmoid_affine(matrix: Matrix, bias: Vec<f64>) -> Self {
        ArcFunction::SigmaAffine { kind: "sigmoid".into(), matrix, bias }
    }

    /// `c·I_dim`, used for explicit left/right scalar multiplication and negation.
    pub fn scale(dim: usize, c: f64) -> Self {
        ArcFunction::Linear { matrix: Matrix::scaled_identity(dim, c) }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            ArcFunction::Identity { dim } | ArcFunction::Activation { dim, .. } | ArcFunction::Sigma { dim, .. } => *dim,
            ArcFunction::Linear { matrix }
            | ArcFunction::Affine { matrix, .. }
            | ArcFunction::ActAffine { matrix, .. }
            | ArcFunction::SigmaAffine { matrix, .. } => matrix.cols(),
            ArcFunction::RestrictedIdentity { width, .. } => *width,
            ArcFunction::Zero { in_dim, .. } => *in_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            ArcFunction::Identity { dim } | ArcFunction::Sigma { dim, .. } => *dim,
            ArcFunction::Activation { activation, dim } => activation.out_dim(*dim),
            ArcFunction::Linear { matrix } | ArcFunction::Affine { matrix, .. } | ArcFunction::SigmaAffine { matrix, .. } => {
                matrix.rows()
            }
            ArcFunction::ActAffine { activation, matrix, .. } => activation.out_dim(matrix.rows()),
            ArcFunction::RestrictedIdentity { dim, .. } => *dim,
            ArcFunction::Zero { out_dim, .. } => *out_dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ArcFunction::Identity { .. } => "identity",
            ArcFunction::Linear { .. } => "linear",
            ArcFunction::Affine { .. } => "affine",
            ArcFunction::Activation { .. } => "activation",
            ArcFunction::ActAffine { .. } => "act_affine",
            ArcFunction::Sigma { .. } => "sigma",
            ArcFunction::SigmaAffine { .. } => "sigma_affine",
            ArcFunction::RestrictedIdentity { .. } => "restricted_identity",
            ArcFunction::Zero { .. } => "zero",
        }
    }

    /// Internal consistency of the payload.
    pub fn validate(&self) -> Result<(), FunctionError> {
        if self.in_dim() == 0 || self.out_dim() == 0 {
            return Err(FunctionError::EmptyDim);
        }
        match self {
            ArcFunction::Linear { matrix } if !matrix.is_finite() => Err(FunctionError::NonFinite),
            ArcFunction::Affine { matrix, bias }
            | ArcFunction::ActAffine { matrix, bias, .. }
            | ArcFunction::SigmaAffine { matrix, bias, .. } => {
                if bias.len() != matrix.rows() {
                    return Err(FunctionError::BiasLength { rows: matrix.rows(), bias: bias.len() });
                }
                if !matrix.is_finite() || bias.iter().any(|b| !b.is_finite()) {
                    return Err(FunctionError::NonFinite);
                }
                match self {
                    ArcFunction::ActAffine { activation, .. } => activation.check(matrix.rows()),
                    ArcFunction::SigmaAffine { kind, .. } => check_kind(kind),
                    _ => Ok(()),
                }
            }
            ArcFunction::Activation { activation, dim } => activation.check(*dim),
            ArcFunction::Sigma { kind, .. } => check_kind(kind),
            ArcFunction::RestrictedIdentity { offset, width, dim } if offset + width > *dim => {
                Err(FunctionError::BlockOutOfRange { offset: *offset, width: *width, dim: *dim })
            }
            _ => Ok(()),
        }
    }

    /// Whether `f(0) = 0` holds structurally.
    pub fn maps_zero_to_zero(&self) -> bool {
        let zero = vec![0.0; self.in_dim()];
        self.apply(&zero).iter().all(|v| *v == 0.0)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).out
    }

    pub fn forward_cached(&self, x: &[f64]) -> ArcCache {
        debug_assert_eq!(x.len(), self.in_dim(), "{} input dim", self.name());
        let (pre, out) = match self {
            ArcFunction::Identity { .. } => (vec![], x.to_vec()),
            ArcFunction::Linear { matrix } => (vec![], matrix.mul_vec(x)),
            ArcFunction::Affine { matrix, bias } => (vec![], affine(matrix, bias, x)),
            ArcFunction::Activation { activation, .. } => (vec![], activation.apply(x)),
            ArcFunction::ActAffine { activation, matrix, bias } => {
                let z = affine(matrix, bias, x);
                let y = activation.apply(&z);
                (z, y)
            }
            ArcFunction::Sigma { kind, .. } => (vec![], transform_of(kind).apply(x)),
            ArcFunction::SigmaAffine { kind, matrix, bias } => {
                let z = affine(matrix, bias, x);
                let y = transform_of(kind).apply(&z);
                (z, y)
            }
            ArcFunction::RestrictedIdentity { offset, dim, .. } => {
                let mut y = vec![0.0; *dim];
                y[*offset..offset + x.len()].copy_from_slice(x);
                (vec![], y)
            }
            ArcFunction::Zero { out_dim, .. } => (vec![], vec![0.0; *out_dim]),
        };
        ArcCache { pre, out }
    }

    /// Back-propagates `gy` through the function evaluated at `x`.
    ///
    /// Returns the input gradient and, for trainable arcs, the gradient with
    /// respect to [`ArcFunction::params`] (same layout).
    pub fn vjp(&self, x: &[f64], cache: &ArcCache, gy: &[f64]) -> Result<(Vec<f64>, Vec<f64>), FunctionError> {
        let lin_back = |matrix: &Matrix, gz: &[f64], with_bias: bool| {
            let gx = matrix.tr_mul_vec(gz);
            let mut gp = Vec::with_capacity(matrix.rows() * matrix.cols() + gz.len());
            for g in gz {
                gp.extend(x.iter().map(|xv| g * xv));
            }
            if with_bias {
                gp.extend_from_slice(gz);
            }
            (gx, gp)
        };
        Ok(match self {
            ArcFunction::Identity { .. } => (gy.to_vec(), vec![]),
            ArcFunction::Linear { matrix } => lin_back(matrix, gy, false),
            ArcFunction::Affine { matrix, .. } => lin_back(matrix, gy, true),
            ArcFunction::Activation { activation, .. } => (activation.vjp(x, gy), vec![]),
            ArcFunction::ActAffine { activation, matrix, .. } => {
                let gz = activation.vjp(&cache.pre, gy);
                lin_back(matrix, &gz, true)
            }
            ArcFunction::Sigma { kind, .. } => {
                let gx = transform_of(kind)
                    .vjp(x, &cache.out, gy)
                    .ok_or_else(|| FunctionError::NonDifferentiable(kind.clone()))?;
                (gx, vec![])
            }
            ArcFunction::SigmaAffine { kind, matrix, .. } => {
                let gz = transform_of(kind)
                    .vjp(&cache.pre, &cache.out, gy)
                    .ok_or_else(|| FunctionError::NonDifferentiable(kind.clone()))?;
                let (gx, _) = lin_back(matrix, &gz, true);
                (gx, vec![])
            }
            ArcFunction::RestrictedIdentity { offset, width, .. } => (gy[*offset..offset + width].to_vec(), vec![]),
            ArcFunction::Zero { in_dim, .. } => (vec![0.0; *in_dim], vec![]),
        })
    }

    /// Arcs whose parameters are trained: `Linear`, `Affine` and `ActAffine`.
    pub fn is_trainable(&self) -> bool {
        matches!(self, ArcFunction::Linear { .. } | ArcFunction::Affine { .. } | ArcFunction::ActAffine { .. })
    }

    /// Trainable parameters, matrix row-major followed by bias.
    pub fn params(&self) -> Vec<f64> {
        match self {
            ArcFunction::Linear { matrix } => matrix.as_slice().to_vec(),
            ArcFunction::Affine { matrix, bias } | ArcFunction::ActAffine { matrix, bias, .. } => {
                let mut p = matrix.as_slice().to_vec();
                p.extend_from_slice(bias);
                p
            }
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ArcFunction::Linear { matrix } => matrix.rows() * matrix.cols(),
            ArcFunction::Affine { matrix, .. } | ArcFunction::ActAffine { matrix, .. } => {
                matrix.rows() * matrix.cols() + matrix.rows()
            }
            _ => 0,
        }
    }

    /// Overwrites the trainable parameters; `p.len()` must equal [`Self::param_count`].
    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count(), "parameter length");
        match self {
            ArcFunction::Linear { matrix } => matrix.as_mut_slice().copy_from_slice(p),
            ArcFunction::Affine { matrix, bias } | ArcFunction::ActAffine { matrix, bias, .. } => {
                let n = matrix.rows() * matrix.cols();
                matrix.as_mut_slice().copy_from_slice(&p[..n]);
                bias.copy_from_slice(&p[n..]);
            }
            _ => {}
        }
    }

    /// Activation and pre-activation when the function is `act ∘ affine`.
    pub fn activation(&self) -> Option<&Activation> {
        match self {
            ArcFunction::Activation { activation, .. } | ArcFunction::ActAffine { activation, .. } => Some(activation),
            _ => None,
        }
    }
}

fn affine(matrix: &Matrix, bias: &[f64], x: &[f64]) -> Vec<f64> {
    let mut z = matrix.mul_vec(x);
    add_assign(&mut z, bias);
    z
}

fn check_kind(kind: &str) -> Result<(), FunctionError> {
    transform::lookup(kind).map(|_| ()).ok_or_else(|| FunctionError::UnknownTransform(kind.to_string()))
}

fn transform_of(kind: &str) -> std::sync::Arc<dyn transform::Transform> {
    // validate() rejects unknown kinds before any evaluation
    transform::lookup(kind).unwrap_or_else(|| panic!("unregistered transform `{kind}`"))
}
