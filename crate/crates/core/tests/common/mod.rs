//! Reference implementations used as test oracles. Each one is written
//! directly from the definitions and shares no code paths with the library
//! beyond the data types.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use dagdnn::function::Activation;
use dagdnn::{ArcFunction, Graph, Matrix, NodeId, NodeKind};
use nalgebra::{DMatrix, DVector};

fn affine(m: &Matrix, b: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| {
            let mut s = b.map_or(0.0, |b| b[r]);
            for c in 0..m.cols() {
                s += m.get(r, c) * x[c];
            }
            s
        })
        .collect()
}

/// Arc function evaluated from the definitions of the common kinds.
pub fn apply_fn(f: &ArcFunction, x: &[f64]) -> Vec<f64> {
    match f {
        ArcFunction::Identity { .. } => x.to_vec(),
        ArcFunction::Linear { matrix } => affine(matrix, None, x),
        ArcFunction::Affine { matrix, bias } => affine(matrix, Some(bias), x),
        ArcFunction::ActAffine { activation: Activation::Cpwl(spec), matrix, bias }
            if spec == &dagdnn::cpwl::CpwlSpec::relu() =>
        {
            affine(matrix, Some(bias), x).into_iter().map(|z| z.max(0.0)).collect()
        }
        ArcFunction::SigmaAffine { kind, matrix, bias } if kind == "sigmoid" => {
            affine(matrix, Some(bias), x).into_iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect()
        }
        ArcFunction::RestrictedIdentity { offset, dim, .. } => {
            let mut y = vec![0.0; *dim];
            y[*offset..offset + x.len()].copy_from_slice(x);
            y
        }
        other => other.apply(x),
    }
}

/// Kahn-order interpreter: addition nodes sum, concatenating nodes stack
/// their inputs in arc-list order, every other node takes its single input.
pub fn interpret(g: &Graph, x: &[f64]) -> Vec<f64> {
    let ids: Vec<NodeId> = g.nodes().iter().map(|n| n.id).collect();
    let mut indeg: BTreeMap<NodeId, usize> = ids.iter().map(|&i| (i, 0)).collect();
    for e in g.edges() {
        *indeg.get_mut(&e.dst).unwrap() += 1;
    }
    let mut ready: Vec<NodeId> = ids.iter().copied().filter(|i| indeg[i] == 0).collect();
    let mut val: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    while let Some(v) = ready.pop() {
        let ins: Vec<_> = g.edges().iter().filter(|e| e.dst == v).collect();
        let value = if ins.is_empty() {
            x.to_vec()
        } else {
            let outs: Vec<Vec<f64>> = ins.iter().map(|e| apply_fn(&e.func, &val[&e.src])).collect();
            let concat = matches!(g.kind(v), NodeKind::Concat) || (g.kind(v) == NodeKind::Output && ins.len() > 1);
            if concat {
                outs.concat()
            } else {
                let mut acc = vec![0.0; outs[0].len()];
                for o in &outs {
                    for (a, b) in acc.iter_mut().zip(o) {
                        *a += b;
                    }
                }
                acc
            }
        };
        val.insert(v, value);
        for e in g.edges().iter().filter(|e| e.src == v) {
            let d = indeg.get_mut(&e.dst).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(e.dst);
            }
        }
    }
    val.remove(&g.output()).unwrap()
}

/// Reflexive transitive closure by depth-first search: `(i, j)` when `j` reaches `i`.
pub fn dfs_closure(g: &Graph) -> BTreeSet<(NodeId, NodeId)> {
    let mut out = BTreeSet::new();
    for n in g.nodes() {
        let mut stack = vec![n.id];
        let mut seen = BTreeSet::new();
        while let Some(v) = stack.pop() {
            if seen.insert(v) {
                out.insert((v, n.id));
                stack.extend(g.edges().iter().filter(|e| e.src == v).map(|e| e.dst));
            }
        }
    }
    out
}

/// Number of directed paths with exactly `k` arcs from `j` to `i`, counted
/// by explicit enumeration (parallel arcs give distinct paths).
pub fn count_paths(g: &Graph, j: NodeId, i: NodeId, k: usize) -> u64 {
    if k == 0 {
        return u64::from(i == j);
    }
    g.edges().iter().filter(|e| e.src == j).map(|e| count_paths(g, e.dst, i, k - 1)).sum()
}

fn levels(g: &Graph) -> BTreeMap<NodeId, usize> {
    let mut lv: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut changed = true;
    for n in g.nodes() {
        lv.insert(n.id, 0);
    }
    while changed {
        changed = false;
        for e in g.edges() {
            if lv[&e.dst] < lv[&e.src] + 1 {
                lv.insert(e.dst, lv[&e.src] + 1);
                changed = true;
            }
        }
    }
    lv
}

/// Searches for a level-respecting bijection that preserves kinds, dims and
/// arcs together with their functions.
pub fn isomorphic(a: &Graph, b: &Graph) -> bool {
    if a.len() != b.len() || a.edges().len() != b.edges().len() {
        return false;
    }
    let (la, lb) = (levels(a), levels(b));
    let arcs = |g: &Graph| -> BTreeMap<(NodeId, NodeId), Vec<String>> {
        let mut m: BTreeMap<_, Vec<String>> = BTreeMap::new();
        for e in g.edges() {
            m.entry((e.src, e.dst)).or_default().push(serde_json::to_string(&e.func).unwrap());
        }
        m.values_mut().for_each(|v| v.sort());
        m
    };
    let (aa, ab) = (arcs(a), arcs(b));
    let sig = |g: &Graph, l: &BTreeMap<NodeId, usize>, id: NodeId| {
        (l[&id], g.kind(id), g.dim(id), g.in_degree(id), g.children(id).len())
    };
    let order: Vec<NodeId> = {
        let mut v: Vec<NodeId> = a.nodes().iter().map(|n| n.id).collect();
        v.sort_by_key(|id| la[id]);
        v
    };
    fn search(
        k: usize,
        order: &[NodeId],
        map: &mut BTreeMap<NodeId, NodeId>,
        used: &mut BTreeSet<NodeId>,
        cand: &dyn Fn(NodeId) -> Vec<NodeId>,
        ok: &dyn Fn(&BTreeMap<NodeId, NodeId>, NodeId) -> bool,
    ) -> bool {
        if k == order.len() {
            return true;
        }
        let v = order[k];
        for w in cand(v) {
            if used.contains(&w) {
                continue;
            }
            map.insert(v, w);
            used.insert(w);
            if ok(map, v) && search(k + 1, order, map, used, cand, ok) {
                return true;
            }
            map.remove(&v);
            used.remove(&w);
        }
        false
    }
    let cand = |v: NodeId| -> Vec<NodeId> {
        let s = sig(a, &la, v);
        b.nodes().iter().map(|n| n.id).filter(|&w| sig(b, &lb, w) == s).collect()
    };
    // Every arc into `v` from an already mapped source must exist in `b`.
    let ok = |map: &BTreeMap<NodeId, NodeId>, v: NodeId| -> bool {
        a.edges().iter().filter(|e| e.dst == v).all(|e| match map.get(&e.src) {
            Some(&ws) => ab.get(&(ws, map[&v])) == aa.get(&(e.src, v)),
            None => true,
        })
    };
    let mut map = BTreeMap::new();
    search(0, &order, &mut map, &mut BTreeSet::new(), &cand, &ok)
}

/// Piecewise-linear evaluation straight from breakpoints, slopes and anchor.
pub fn cpwl_direct(bps: &[f64], slopes: &[f64], anchor: (f64, f64), x: f64) -> f64 {
    // integrate the slope from the anchor to x
    let (x0, y0) = anchor;
    let slope_at = |t: f64| slopes[bps.iter().filter(|&&b| b <= t).count()];
    let mut pts: Vec<f64> = vec![x0, x];
    pts.extend(bps.iter().copied().filter(|&b| (b > x0.min(x)) && (b < x0.max(x))));
    pts.sort_by(f64::total_cmp);
    let mut acc = 0.0;
    for w in pts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        acc += slope_at(mid) * (w[1] - w[0]);
    }
    if x >= x0 {
        y0 + acc
    } else {
        y0 - acc
    }
}

/// Least-squares `[w; b]` for `y ≈ X w + b` from the normal equations.
pub fn least_squares(xs: &[Vec<f64>], ys: &[f64]) -> (Vec<f64>, f64) {
    let n = xs.len();
    let d = xs[0].len();
    let a = DMatrix::from_fn(n, d + 1, |r, c| if c < d { xs[r][c] } else { 1.0 });
    let y = DVector::from_column_slice(ys);
    let ata = a.transpose() * &a;
    let aty = a.transpose() * y;
    let sol = ata.cholesky().expect("full rank").solve(&aty);
    (sol.iter().take(d).copied().collect(), sol[d])
}

/// Mean squared error of `y ≈ X w + b`.
pub fn mse(xs: &[Vec<f64>], ys: &[f64], w: &[f64], b: f64) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| {
            let p: f64 = x.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
            (p - y) * (p - y)
        })
        .sum::<f64>()
        / xs.len() as f64
}

pub fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
