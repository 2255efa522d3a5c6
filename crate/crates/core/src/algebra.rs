//! Expressions closed under composition and addition, and matrices over them.
//!
//! `Zero` is the absent function: composing with it on either side gives
//! `Zero`, and it contributes nothing to a sum. A top-level `Zero` evaluates
//! to the zero vector. Products are never reassociated.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::function::ArcFunction;
use crate::graph::NodeId;
use crate::linalg::{add_assign, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgebraError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("empty sum")]
    EmptySum,
}

#[derive(Debug)]
pub enum ExprNode {
    Zero,
    Identity,
    Base(ArcFunction),
    Compose(ArcExpr, ArcExpr),
    Sum(Vec<ArcExpr>),
}

/// Shared, immutable expression with known input and output dimensions.
#[derive(Clone)]
pub struct ArcExpr {
    node: Arc<ExprNode>,
    in_dim: usize,
    out_dim: usize,
}

impl fmt::Debug for ArcExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.node {
            ExprNode::Zero => write!(f, "0"),
            ExprNode::Identity => write!(f, "I"),
            ExprNode::Base(func) => write!(f, "{}", func.name()),
            ExprNode::Compose(o, i) => write!(f, "({o:?}∘{i:?})"),
            ExprNode::Sum(ts) => {
                write!(f, "(")?;
                for (k, t) in ts.iter().enumerate() {
                    if k > 0 {
                        write!(f, " + ")?;
                    }
                    write!(f, "{t:?}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl PartialEq for ArcExpr {
    fn eq(&self, other: &Self) -> bool {
        if Arc::ptr_eq(&self.node, &other.node) {
            return true;
        }
        if self.in_dim != other.in_dim || self.out_dim != other.out_dim {
            return false;
        }
        match (&*self.node, &*other.node) {
            (ExprNode::Zero, ExprNode::Zero) | (ExprNode::Identity, ExprNode::Identity) => true,
            (ExprNode::Base(a), ExprNode::Base(b)) => a == b,
            (ExprNode::Compose(a, b), ExprNode::Compose(c, d)) => a == c && b == d,
            (ExprNode::Sum(a), ExprNode::Sum(b)) => a == b,
            _ => false,
        }
    }
}

impl ArcExpr {
    fn make(node: ExprNode, in_dim: usize, out_dim: usize) -> Self {
        Self { node: Arc::new(node), in_dim, out_dim }
    }

    pub fn zero(in_dim: usize, out_dim: usize) -> Self {
        Self::make(ExprNode::Zero, in_dim, out_dim)
    }

    pub fn identity(dim: usize) -> Self {
        Self::make(ExprNode::Identity, dim, dim)
    }

    pub fn base(f: ArcFunction) -> Self {
        let (i, o) = (f.in_dim(), f.out_dim());
        Self::make(ExprNode::Base(f), i, o)
    }

    /// `outer ∘ inner`.
    pub fn compose(outer: &ArcExpr, inner: &ArcExpr) -> Result<Self, AlgebraError> {
        if inner.out_dim != outer.in_dim {
            return Err(AlgebraError::DimMismatch { expected: outer.in_dim, found: inner.out_dim });
        }
        Ok(Self::make(ExprNode::Compose(outer.clone(), inner.clone()), inner.in_dim, outer.out_dim))
    }

    pub fn sum(terms: Vec<ArcExpr>) -> Result<Self, AlgebraError> {
        let first = terms.first().ok_or(AlgebraError::EmptySum)?;
        let (i, o) = (first.in_dim, first.out_dim);
        for t in &terms {
            if t.in_dim != i {
                return Err(AlgebraError::DimMismatch { expected: i, found: t.in_dim });
            }
            if t.out_dim != o {
                return Err(AlgebraError::DimMismatch { expected: o, found: t.out_dim });
            }
        }
        Ok(Self::make(ExprNode::Sum(terms), i, o))
    }

    pub fn node(&self) -> &ExprNode {
        &self.node
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn is_zero(&self) -> bool {
        matches!(*self.node, ExprNode::Zero)
    }

    pub fn is_identity(&self) -> bool {
        matches!(*self.node, ExprNode::Identity)
    }

    pub fn as_base(&self) -> Option<&ArcFunction> {
        match &*self.node {
            ExprNode::Base(f) => Some(f),
            _ => None,
        }
    }

    pub fn ptr_eq(&self, other: &ArcExpr) -> bool {
        Arc::ptr_eq(&self.node, &other.node)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.node) as usize
    }

    /// Number of terms when read as a top-level sum.
    pub fn term_count(&self) -> usize {
        match &*self.node {
            ExprNode::Zero => 0,
            ExprNode::Sum(ts) => ts.len(),
            _ => 1,
        }
    }

    /// Number of base functions along the composition chain (sums count as one factor).
    pub fn compose_depth(&self) -> usize {
        match &*self.node {
            ExprNode::Compose(o, i) => o.compose_depth() + i.compose_depth(),
            ExprNode::Zero | ExprNode::Identity => 0,
            _ => 1,
        }
    }

    /// Number of distinct expression nodes (shared subtrees counted once).
    pub fn size(&self) -> usize {
        fn walk(e: &ArcExpr, seen: &mut BTreeSet<usize>) {
            if !seen.insert(e.key()) {
                return;
            }
            match &*e.node {
                ExprNode::Compose(o, i) => {
                    walk(o, seen);
                    walk(i, seen);
                }
                ExprNode::Sum(ts) => ts.iter().for_each(|t| walk(t, seen)),
                _ => {}
            }
        }
        let mut seen = BTreeSet::new();
        walk(self, &mut seen);
        seen.len()
    }
}

/// `outer ∘ inner` with Zero absorbed and Identity elided.
pub fn compose_simple(outer: &ArcExpr, inner: &ArcExpr) -> Result<ArcExpr, AlgebraError> {
    if inner.out_dim != outer.in_dim {
        return Err(AlgebraError::DimMismatch { expected: outer.in_dim, found: inner.out_dim });
    }
    if outer.is_zero() || inner.is_zero() {
        return Ok(ArcExpr::zero(inner.in_dim, outer.out_dim));
    }
    if inner.is_identity() {
        return Ok(outer.clone());
    }
    if outer.is_identity() {
        return Ok(inner.clone());
    }
    ArcExpr::compose(outer, inner)
}

/// Sum with Zero terms dropped; an empty sum is `Zero(in_dim, out_dim)`.
pub fn sum_simple(in_dim: usize, out_dim: usize, terms: Vec<ArcExpr>) -> Result<ArcExpr, AlgebraError> {
    let mut flat = Vec::with_capacity(terms.len());
    for t in terms {
        if t.in_dim != in_dim || t.out_dim != out_dim {
            return Err(AlgebraError::DimMismatch { expected: out_dim, found: t.out_dim });
        }
        match &*t.node {
            ExprNode::Zero => {}
            ExprNode::Sum(ts) => flat.extend(ts.iter().cloned()),
            _ => flat.push(t),
        }
    }
    match flat.len() {
        0 => Ok(ArcExpr::zero(in_dim, out_dim)),
        1 => Ok(flat.pop().unwrap()),
        _ => ArcExpr::sum(flat),
    }
}

/// `(c·I) ∘ e`.
pub fn scale_left(c: f64, e: &ArcExpr) -> ArcExpr {
    ArcExpr::compose(&ArcExpr::base(ArcFunction::scale(e.out_dim, c)), e).expect("dims agree")
}

/// `e ∘ (c·I)`.
pub fn scale_right(e: &ArcExpr, c: f64) -> ArcExpr {
    ArcExpr::compose(e, &ArcExpr::base(ArcFunction::scale(e.in_dim, c))).expect("dims agree")
}

/// Evaluation-equivalent form with Zero absorbed, Identity elided and nested
/// sums flattened. Shared subtrees stay shared.
pub fn simplify(e: &ArcExpr) -> ArcExpr {
    fn go(e: &ArcExpr, memo: &mut HashMap<usize, ArcExpr>) -> ArcExpr {
        if let Some(s) = memo.get(&e.key()) {
            return s.clone();
        }
        let s = match &*e.node {
            ExprNode::Zero | ExprNode::Identity => e.clone(),
            ExprNode::Base(ArcFunction::Identity { dim }) => ArcExpr::identity(*dim),
            ExprNode::Base(_) => e.clone(),
            ExprNode::Compose(o, i) => {
                let (so, si) = (go(o, memo), go(i, memo));
                if so.ptr_eq(o) && si.ptr_eq(i) && !so.is_zero() && !si.is_zero() && !so.is_identity() && !si.is_identity() {
                    e.clone()
                } else {
                    compose_simple(&so, &si).expect("dims preserved")
                }
            }
            ExprNode::Sum(ts) => {
                let terms: Vec<ArcExpr> = ts.iter().map(|t| go(t, memo)).collect();
                sum_simple(e.in_dim, e.out_dim, terms).expect("dims preserved")
            }
        };
        memo.insert(e.key(), s.clone());
        s
    }
    go(e, &mut HashMap::new())
}

/// Evaluates expressions at one fixed input, reusing results of shared
/// subexpressions that are applied to that input.
pub struct Evaluator<'a> {
    x: &'a [f64],
    memo: HashMap<usize, (ArcExpr, Option<Vec<f64>>)>,
}

impl<'a> Evaluator<'a> {
    pub fn new(x: &'a [f64]) -> Self {
        Self { x, memo: HashMap::new() }
    }

    /// `None` when the expression is absent (Zero) on every path.
    pub fn eval_opt(&mut self, e: &ArcExpr) -> Result<Option<Vec<f64>>, AlgebraError> {
        if e.in_dim != self.x.len() {
            return Err(AlgebraError::DimMismatch { expected: e.in_dim, found: self.x.len() });
        }
        Ok(self.at_root(e))
    }

    pub fn eval(&mut self, e: &ArcExpr) -> Result<Vec<f64>, AlgebraError> {
        Ok(self.eval_opt(e)?.unwrap_or_else(|| vec![0.0; e.out_dim]))
    }

    fn at_root(&mut self, e: &ArcExpr) -> Option<Vec<f64>> {
        if let Some((_, v)) = self.memo.get(&e.key()) {
            return v.clone();
        }
        let v = match &*e.node {
            ExprNode::Compose(o, i) => self.at_root(i).and_then(|v| eval_plain(o, &v)),
            ExprNode::Sum(ts) => {
                let mut acc: Option<Vec<f64>> = None;
                for t in ts {
                    if let Some(v) = self.at_root(t) {
                        match &mut acc {
                            Some(a) => add_assign(a, &v),
                            None => acc = Some(v),
                        }
                    }
                }
                acc
            }
            _ => eval_plain(e, self.x),
        };
        self.memo.insert(e.key(), (e.clone(), v.clone()));
        v
    }
}

fn eval_plain(e: &ArcExpr, x: &[f64]) -> Option<Vec<f64>> {
    match &*e.node {
        ExprNode::Zero => None,
        ExprNode::Identity => Some(x.to_vec()),
        ExprNode::Base(f) => Some(f.apply(x)),
        ExprNode::Compose(o, i) => eval_plain(i, x).and_then(|v| eval_plain(o, &v)),
        ExprNode::Sum(ts) => {
            let mut acc: Option<Vec<f64>> = None;
            for t in ts {
                if let Some(v) = eval_plain(t, x) {
                    match &mut acc {
                        Some(a) => add_assign(a, &v),
                        None => acc = Some(v),
                    }
                }
            }
            acc
        }
    }
}

/// Evaluates `e` at `x`; an absent result is the zero vector.
pub fn eval_expr(e: &ArcExpr, x: &[f64]) -> Result<Vec<f64>, AlgebraError> {
    Evaluator::new(x).eval(e)
}

/// Folds maximal affine subexpressions (Identity, Linear, Affine and their
/// sums and compositions) into single `Affine` bases.
pub fn fold_affine(e: &ArcExpr) -> ArcExpr {
    fn affine_of(e: &ArcExpr) -> Option<(Matrix, Vec<f64>)> {
        match &*e.node {
            ExprNode::Identity => Some((Matrix::identity(e.in_dim), vec![0.0; e.in_dim])),
            ExprNode::Base(ArcFunction::Identity { dim }) => Some((Matrix::identity(*dim), vec![0.0; *dim])),
            ExprNode::Base(ArcFunction::Linear { matrix }) => Some((matrix.clone(), vec![0.0; matrix.rows()])),
            ExprNode::Base(ArcFunction::Affine { matrix, bias }) => Some((matrix.clone(), bias.clone())),
            ExprNode::Compose(o, i) => {
                let (mo, bo) = affine_of(o)?;
                let (mi, bi) = affine_of(i)?;
                let mut b = mo.mul_vec(&bi);
                add_assign(&mut b, &bo);
                Some((mo.matmul(&mi), b))
            }
            ExprNode::Sum(ts) => {
                let mut m = Matrix::zeros(e.out_dim, e.in_dim);
                let mut b = vec![0.0; e.out_dim];
                for t in ts {
                    let (mt, bt) = affine_of(t)?;
                    add_assign(m.as_mut_slice(), mt.as_slice());
                    add_assign(&mut b, &bt);
                }
                Some((m, b))
            }
            _ => None,
        }
    }
    if let Some((m, b)) = affine_of(e) {
        return ArcExpr::base(ArcFunction::affine(m, b));
    }
    match &*e.node {
        ExprNode::Compose(o, i) => ArcExpr::compose(&fold_affine(o), &fold_affine(i)).expect("dims preserved"),
        ExprNode::Sum(ts) => ArcExpr::sum(ts.iter().map(fold_affine).collect()).expect("dims preserved"),
        _ => e.clone(),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum ExprDoc {
    Zero { in_dim: usize, out_dim: usize },
    Id { dim: usize },
    Base {
        #[serde(rename = "fn")]
        func: ArcFunction,
    },
    Compose { outer: Box<ExprDoc>, inner: Box<ExprDoc> },
    Sum { terms: Vec<ExprDoc> },
}

impl ExprDoc {
    fn from_expr(e: &ArcExpr) -> Self {
        match &*e.node {
            ExprNode::Zero => ExprDoc::Zero { in_dim: e.in_dim, out_dim: e.out_dim },
            ExprNode::Identity => ExprDoc::Id { dim: e.in_dim },
            ExprNode::Base(f) => ExprDoc::Base { func: f.clone() },
            ExprNode::Compose(o, i) => {
                ExprDoc::Compose { outer: Box::new(Self::from_expr(o)), inner: Box::new(Self::from_expr(i)) }
            }
            ExprNode::Sum(ts) => ExprDoc::Sum { terms: ts.iter().map(Self::from_expr).collect() },
        }
    }

    fn into_expr(self) -> Result<ArcExpr, AlgebraError> {
        Ok(match self {
            ExprDoc::Zero { in_dim, out_dim } => ArcExpr::zero(in_dim, out_dim),
            ExprDoc::Id { dim } => ArcExpr::identity(dim),
            ExprDoc::Base { func } => ArcExpr::base(func),
            ExprDoc::Compose { outer, inner } => ArcExpr::compose(&outer.into_expr()?, &inner.into_expr()?)?,
            ExprDoc::Sum { terms } => ArcExpr::sum(terms.into_iter().map(ExprDoc::into_expr).collect::<Result<_, _>>()?)?,
        })
    }
}

impl Serialize for ArcExpr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ExprDoc::from_expr(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ArcExpr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        ExprDoc::deserialize(d)?.into_expr().map_err(serde::de::Error::custom)
    }
}

/// Block vector indexed like the columns of a [`FuncMatrix`]; `None` marks an
/// absent block.
pub type BlockVec = Vec<Option<Vec<f64>>>;

/// Sparse matrix over [`ArcExpr`] with rows and columns labelled by node ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FuncMatrix {
    rows: Vec<(NodeId, usize)>,
    cols: Vec<(NodeId, usize)>,
    row_pos: BTreeMap<NodeId, usize>,
    col_pos: BTreeMap<NodeId, usize>,
    cells: BTreeMap<(usize, usize), ArcExpr>,
    masked: BTreeSet<(usize, usize)>,
}

impl FuncMatrix {
    /// All-Zero matrix; `rows`/`cols` are `(node id, dim)` pairs.
    pub fn zeros(rows: Vec<(NodeId, usize)>, cols: Vec<(NodeId, usize)>) -> Self {
        let row_pos = rows.iter().enumerate().map(|(k, r)| (r.0, k)).collect();
        let col_pos = cols.iter().enumerate().map(|(k, c)| (c.0, k)).collect();
        Self { rows, cols, row_pos, col_pos, cells: BTreeMap::new(), masked: BTreeSet::new() }
    }

    pub fn identity(labels: Vec<(NodeId, usize)>) -> Self {
        let mut m = Self::zeros(labels.clone(), labels);
        for k in 0..m.rows.len() {
            m.cells.insert((k, k), ArcExpr::identity(m.rows[k].1));
        }
        m
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn row_labels(&self) -> &[(NodeId, usize)] {
        &self.rows
    }

    pub fn col_labels(&self) -> &[(NodeId, usize)] {
        &self.cols
    }

    pub fn row_index(&self, id: NodeId) -> Option<usize> {
        self.row_pos.get(&id).copied()
    }

    pub fn col_index(&self, id: NodeId) -> Option<usize> {
        self.col_pos.get(&id).copied()
    }

    /// Entry `(i, j)` by node id; Zero when absent or unknown.
    pub fn get(&self, i: NodeId, j: NodeId) -> ArcExpr {
        match (self.row_pos.get(&i), self.col_pos.get(&j)) {
            (Some(&r), Some(&c)) => self.at(r, c),
            _ => ArcExpr::zero(0, 0),
        }
    }

    /// Entry by position.
    pub fn at(&self, r: usize, c: usize) -> ArcExpr {
        self.cells.get(&(r, c)).cloned().unwrap_or_else(|| ArcExpr::zero(self.cols[c].1, self.rows[r].1))
    }

    pub fn set(&mut self, i: NodeId, j: NodeId, e: ArcExpr) -> Result<(), AlgebraError> {
        let (r, c) = match (self.row_pos.get(&i), self.col_pos.get(&j)) {
            (Some(&r), Some(&c)) => (r, c),
            _ => return Err(AlgebraError::ShapeMismatch(format!("no cell ({i}, {j})"))),
        };
        if e.in_dim != self.cols[c].1 {
            return Err(AlgebraError::DimMismatch { expected: self.cols[c].1, found: e.in_dim });
        }
        if e.out_dim != self.rows[r].1 {
            return Err(AlgebraError::DimMismatch { expected: self.rows[r].1, found: e.out_dim });
        }
        if e.is_zero() {
            self.cells.remove(&(r, c));
        } else {
            self.cells.insert((r, c), e);
        }
        Ok(())
    }

    /// Replaces the entry with Zero and flags it as masked.
    pub fn mask(&mut self, i: NodeId, j: NodeId) {
        if let (Some(&r), Some(&c)) = (self.row_pos.get(&i), self.col_pos.get(&j)) {
            self.cells.remove(&(r, c));
            self.masked.insert((r, c));
        }
    }

    pub fn is_masked(&self, i: NodeId, j: NodeId) -> bool {
        match (self.row_pos.get(&i), self.col_pos.get(&j)) {
            (Some(&r), Some(&c)) => self.masked.contains(&(r, c)),
            _ => false,
        }
    }

    /// Non-Zero cells as `(row id, col id, expr)` in row-major order.
    pub fn nonzeros(&self) -> impl Iterator<Item = (NodeId, NodeId, &ArcExpr)> + '_ {
        self.cells.iter().map(|(&(r, c), e)| (self.rows[r].0, self.cols[c].0, e))
    }

    pub fn nnz(&self) -> usize {
        self.cells.len()
    }

    /// Set of non-Zero positions by node id.
    pub fn pattern(&self) -> BTreeSet<(NodeId, NodeId)> {
        self.nonzeros().map(|(i, j, _)| (i, j)).collect()
    }

    /// Every cell above the diagonal is Zero.
    pub fn is_lower_triangular(&self) -> bool {
        self.cells.keys().all(|&(r, c)| c <= r)
    }

    /// Cellwise sum.
    pub fn mat_add(&self, other: &FuncMatrix) -> Result<FuncMatrix, AlgebraError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(AlgebraError::ShapeMismatch("addition operands differ in labels".into()));
        }
        let mut out = Self::zeros(self.rows.clone(), self.cols.clone());
        let keys: BTreeSet<(usize, usize)> = self.cells.keys().chain(other.cells.keys()).copied().collect();
        for (r, c) in keys {
            let terms = [self.cells.get(&(r, c)), other.cells.get(&(r, c))].into_iter().flatten().cloned().collect();
            let e = sum_simple(self.cols[c].1, self.rows[r].1, terms)?;
            if !e.is_zero() {
                out.cells.insert((r, c), e);
            }
        }
        Ok(out)
    }

    /// Product `self · other`: entry `(i, j) = Σ_l self[i,l] ∘ other[l,j]`.
    pub fn mat_mul(&self, other: &FuncMatrix) -> Result<FuncMatrix, AlgebraError> {
        if self.cols != other.rows {
            return Err(AlgebraError::ShapeMismatch("inner labels differ".into()));
        }
        let mut terms: BTreeMap<(usize, usize), Vec<ArcExpr>> = BTreeMap::new();
        for (&(i, l), a) in &self.cells {
            for (&(_, j), c) in other.cells.range((l, 0)..(l + 1, 0)) {
                terms.entry((i, j)).or_default().push(compose_simple(a, c)?);
            }
        }
        let mut out = Self::zeros(self.rows.clone(), other.cols.clone());
        for ((i, j), ts) in terms {
            let e = sum_simple(other.cols[j].1, self.rows[i].1, ts)?;
            if !e.is_zero() {
                out.cells.insert((i, j), e);
            }
        }
        Ok(out)
    }

    /// Cellwise [`simplify`].
    pub fn simplified(&self) -> FuncMatrix {
        let mut out = self.clone();
        out.cells = self
            .cells
            .iter()
            .map(|(&k, e)| (k, simplify(e)))
            .filter(|(_, e)| !e.is_zero())
            .collect();
        out
    }

    /// `y_i = Σ_j M[i,j](x_j)` over present blocks; rows without any
    /// contribution are absent.
    pub fn eval(&self, x: &BlockVec) -> Result<BlockVec, AlgebraError> {
        if x.len() != self.cols.len() {
            return Err(AlgebraError::ShapeMismatch(format!("{} blocks for {} columns", x.len(), self.cols.len())));
        }
        for (k, b) in x.iter().enumerate() {
            if let Some(v) = b {
                if v.len() != self.cols[k].1 {
                    return Err(AlgebraError::DimMismatch { expected: self.cols[k].1, found: v.len() });
                }
            }
        }
        let mut y: BlockVec = vec![None; self.rows.len()];
        let mut evals: Vec<Option<Evaluator>> = x.iter().map(|b| b.as_deref().map(Evaluator::new)).collect();
        for (&(r, c), e) in &self.cells {
            let Some(ev) = evals[c].as_mut() else { continue };
            if let Some(v) = ev.at_root(e) {
                match &mut y[r] {
                    Some(acc) => add_assign(acc, &v),
                    slot => *slot = Some(v),
                }
            }
        }
        Ok(y)
    }

    /// [`FuncMatrix::eval`] on a fully present block vector, absent rows as zeros.
    pub fn eval_dense(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, AlgebraError> {
        let y = self.eval(&x.iter().cloned().map(Some).collect())?;
        Ok(y.into_iter().zip(&self.rows).map(|(b, r)| b.unwrap_or_else(|| vec![0.0; r.1])).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct Label {
    id: NodeId,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct CellDoc {
    row: NodeId,
    col: NodeId,
    expr: ArcExpr,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    masked: bool,
}

#[derive(Serialize, Deserialize)]
struct MatrixDoc {
    shape: (usize, usize),
    rows: Vec<Label>,
    cols: Vec<Label>,
    cells: Vec<CellDoc>,
}

impl Serialize for FuncMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let label = |v: &[(NodeId, usize)]| v.iter().map(|&(id, dim)| Label { id, dim }).collect();
        let mut cells: Vec<((usize, usize), CellDoc)> = self
            .cells
            .iter()
            .map(|(&k, e)| (k, CellDoc { row: self.rows[k.0].0, col: self.cols[k.1].0, expr: e.clone(), masked: false }))
            .collect();
        for &k in &self.masked {
            let expr = ArcExpr::zero(self.cols[k.1].1, self.rows[k.0].1);
            cells.push((k, CellDoc { row: self.rows[k.0].0, col: self.cols[k.1].0, expr, masked: true }));
        }
        cells.sort_by_key(|c| c.0);
        MatrixDoc {
            shape: self.shape(),
            rows: label(&self.rows),
            cols: label(&self.cols),
            cells: cells.into_iter().map(|c| c.1).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FuncMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = MatrixDoc::deserialize(d)?;
        let unlabel = |v: Vec<Label>| v.into_iter().map(|l| (l.id, l.dim)).collect::<Vec<_>>();
        let mut m = FuncMatrix::zeros(unlabel(doc.rows), unlabel(doc.cols));
        if m.shape() != doc.shape {
            return Err(serde::de::Error::custom("shape does not match labels"));
        }
        for c in doc.cells {
            if c.masked {
                m.mask(c.row, c.col);
            } else {
                m.set(c.row, c.col, c.expr).map_err(serde::de::Error::custom)?;
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::function::Activation;

    fn relu(d: usize) -> ArcExpr {
        ArcExpr::base(ArcFunction::Activation { activation: Activation::relu(), dim: d })
    }

    fn neg(d: usize) -> ArcExpr {
        ArcExpr::base(ArcFunction::scale(d, -1.0))
    }

    fn one(e: ArcExpr) -> FuncMatrix {
        let mut m = FuncMatrix::zeros(vec![(NodeId(0), 1)], vec![(NodeId(0), 1)]);
        m.set(NodeId(0), NodeId(0), e).unwrap();
        m
    }

    #[test]
    fn relu_after_negation() {
        let f = ArcExpr::base(ArcFunction::affine(Matrix::scaled_identity(2, -1.0), vec![0.0, 0.0]));
        let e = ArcExpr::compose(&relu(2), &f).unwrap();
        assert_eq!(eval_expr(&e, &[1.0, -2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn non_commutative() {
        let (a, b) = (one(relu(1)), one(neg(1)));
        let ab = a.mat_mul(&b).unwrap().eval_dense(&[vec![1.0]]).unwrap();
        let ba = b.mat_mul(&a).unwrap().eval_dense(&[vec![1.0]]).unwrap();
        assert_eq!(ab, vec![vec![0.0]]);
        assert_eq!(ba, vec![vec![-1.0]]);
    }

    #[test]
    fn simplify_rules() {
        let f = relu(2);
        assert_eq!(simplify(&ArcExpr::compose(&f, &ArcExpr::identity(2)).unwrap()), f);
        assert_eq!(simplify(&ArcExpr::sum(vec![f.clone(), ArcExpr::zero(2, 2)]).unwrap()), f);
        assert!(simplify(&ArcExpr::compose(&ArcExpr::zero(2, 2), &f).unwrap()).is_zero());
    }

    #[test]
    fn zero_is_absent_in_composition() {
        let shift = ArcExpr::base(ArcFunction::affine(Matrix::identity(1), vec![3.0]));
        let e = ArcExpr::compose(&shift, &ArcExpr::zero(1, 1)).unwrap();
        assert_eq!(eval_expr(&e, &[5.0]).unwrap(), vec![0.0]);
        assert_eq!(eval_expr(&simplify(&e), &[5.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn identity_products() {
        let labels = vec![(NodeId(0), 2), (NodeId(1), 1)];
        let mut a = FuncMatrix::zeros(labels.clone(), labels.clone());
        a.set(NodeId(1), NodeId(0), ArcExpr::base(ArcFunction::linear(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap())))
            .unwrap();
        let i = FuncMatrix::identity(labels);
        assert_eq!(i.mat_mul(&a).unwrap(), a);
        assert_eq!(a.mat_mul(&i).unwrap(), a);
        assert_eq!(a.mat_add(&FuncMatrix::zeros(a.row_labels().to_vec(), a.col_labels().to_vec())).unwrap(), a);
    }

    #[test]
    fn shape_checks() {
        let a = FuncMatrix::zeros(vec![(NodeId(0), 1)], vec![(NodeId(1), 1)]);
        assert!(matches!(a.mat_mul(&a), Err(AlgebraError::ShapeMismatch(_))));
        assert!(ArcExpr::compose(&relu(2), &relu(3)).is_err());
    }

    #[test]
    fn fold_keeps_value() {
        let a = ArcExpr::base(ArcFunction::affine(Matrix::from_rows(&[vec![2.0]]).unwrap(), vec![1.0]));
        let e = ArcExpr::sum(vec![ArcExpr::compose(&a, &a).unwrap(), ArcExpr::compose(&relu(1), &a).unwrap()]).unwrap();
        let x = [-0.7];
        assert_eq!(eval_expr(&fold_affine(&e), &x).unwrap(), eval_expr(&e, &x).unwrap());
    }

    #[test]
    fn json_round_trip() {
        let e = ArcExpr::sum(vec![ArcExpr::compose(&relu(1), &neg(1)).unwrap(), ArcExpr::identity(1)]).unwrap();
        let s = serde_json::to_string(&e).unwrap();
        assert!(s.contains("\"op\":\"sum\""));
        let back: ArcExpr = serde_json::from_str(&s).unwrap();
        assert_eq!(back, e);
        let mut m = one(e);
        m.mask(NodeId(0), NodeId(0));
        let s = serde_json::to_string(&m).unwrap();
        let back: FuncMatrix = serde_json::from_str(&s).unwrap();
        assert!(back.is_masked(NodeId(0), NodeId(0)));
    }
}
