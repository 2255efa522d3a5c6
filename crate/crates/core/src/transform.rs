//! Non-linear, non-CPWL transformations (the `σ` family) and their registry.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock, RwLock};

/// A dimension-preserving non-linear map `ℝ^d → ℝ^d`.
pub trait Transform: Send + Sync {
    fn apply(&self, x: &[f64]) -> Vec<f64>;

    /// Vector-Jacobian product at `x` (with `y = apply(x)`), or `None` if the
    /// transform has no registered derivative.
    fn vjp(&self, _x: &[f64], _y: &[f64], _upstream: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

pub struct Sigmoid;

impl Transform for Sigmoid {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
    }

    fn vjp(&self, _x: &[f64], y: &[f64], g: &[f64]) -> Option<Vec<f64>> {
        Some(y.iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect())
    }
}

pub struct Softmax;

impl Transform for Softmax {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    fn vjp(&self, _x: &[f64], y: &[f64], g: &[f64]) -> Option<Vec<f64>> {
        let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
        Some(y.iter().zip(g).map(|(y, g)| y * (g - dot)).collect())
    }
}

type Table = BTreeMap<String, Arc<dyn Transform>>;

fn table() -> &'static RwLock<Table> {
    static TABLE: OnceLock<RwLock<Table>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t: Table = BTreeMap::new();
        t.insert("sigmoid".into(), Arc::new(Sigmoid));
        t.insert("softmax".into(), Arc::new(Softmax));
        RwLock::new(t)
    })
}

/// Registers (or replaces) a named transform usable in `sigma` arcs.
pub fn register(name: &str, transform: Arc<dyn Transform>) {
    table().write().expect("transform table poisoned").insert(name.to_string(), transform);
}

pub fn lookup(name: &str) -> Option<Arc<dyn Transform>> {
    table().read().expect("transform table poisoned").get(name).cloned()
}

pub fn registered() -> Vec<String> {
    table().read().expect("transform table poisoned").keys().cloned().collect()
}
