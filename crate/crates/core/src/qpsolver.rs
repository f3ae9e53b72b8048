//! Active-set least-squares QP solver with a reusable decomposition.
//!
//! Problems have the form
//!
//! ```text
//! minimize ½‖C y − d‖²   subject to   E y = e,  G y ≤ h
//! ```
//!
//! where the weighted task rows are already folded into `C` and `d`.
//! For a working set of constraints `Ā y = b̄` the solution is obtained with
//! the nullspace method: a Householder factorization of `Āᵀ` yields a
//! particular solution and a nullspace basis `Z`, and a QR factorization of
//! `C Z` solves the task level inside that nullspace. The factors form a
//! [`Decomposition`], a linear map from the stacked right-hand side
//! `b̲ = [b̄; d]` to the optimizer that can be cached and reapplied to a new
//! `b̲` in O(n²) without repeating the active-set search.
//!
//! The active-set search itself is a dual method: starting from the
//! equality-constrained optimum, the most violated inequality is activated
//! and the multiplier path towards it decides which active inequality, if
//! any, has to be released first.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("active-set search did not converge within {0} iterations")]
    NonConvergence(usize),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("task level is rank deficient in the constraint nullspace")]
    RankDeficientTasks,
    #[error("warm start references unknown constraint {0:?}")]
    InvalidWarmStart(ConstraintId),
    #[error("non-finite problem data")]
    NonFinite,
    #[error("malformed decomposition payload: {0}")]
    Decode(String),
}

pub type Result<T> = std::result::Result<T, QpError>;

/// Stable identifier of a constraint row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConstraintId(pub u32);

/// Equality rows plus the inequality rows that hold with equality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSet {
    pub rows: Vec<ConstraintId>,
    pub contact_mode_id: u32,
}

impl ActiveSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn contains(&self, id: ConstraintId) -> bool {
        self.rows.contains(&id)
    }
}

/// Cardinality of the symmetric difference of two active sets.
pub fn active_set_discrepancy(a: &ActiveSet, b: &ActiveSet) -> usize {
    let sa: BTreeSet<_> = a.rows.iter().collect();
    let sb: BTreeSet<_> = b.rows.iter().collect();
    sa.symmetric_difference(&sb).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresQp {
    pub task_matrix: DMatrix<f64>,
    pub task_target: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub eq_ids: Vec<ConstraintId>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub ineq_ids: Vec<ConstraintId>,
    pub mode_id: u32,
}

impl LeastSquaresQp {
    /// Unconstrained problem; add rows with the `with_*` builders.
    pub fn new(task_matrix: DMatrix<f64>, task_target: DVector<f64>) -> Self {
        let n = task_matrix.ncols();
        Self {
            task_matrix,
            task_target,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            eq_ids: Vec::new(),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
            ineq_ids: Vec::new(),
            mode_id: 0,
        }
    }

    /// Sets the equality rows; ids are assigned `0..m_e` unless replaced.
    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.eq_ids = (0..a.nrows() as u32).map(ConstraintId).collect();
        self.eq_matrix = a;
        self.eq_rhs = b;
        let me = self.eq_ids.len() as u32;
        self.ineq_ids = (me..me + self.ineq_ids.len() as u32).map(ConstraintId).collect();
        self
    }

    /// Sets the inequality rows; ids continue after the equalities.
    pub fn with_inequalities(mut self, g: DMatrix<f64>, h: DVector<f64>) -> Self {
        let me = self.eq_ids.len() as u32;
        self.ineq_ids = (me..me + g.nrows() as u32).map(ConstraintId).collect();
        self.ineq_matrix = g;
        self.ineq_rhs = h;
        self
    }

    pub fn n(&self) -> usize {
        self.task_matrix.ncols()
    }

    pub fn n_eq(&self) -> usize {
        self.eq_matrix.nrows()
    }

    pub fn n_ineq(&self) -> usize {
        self.ineq_matrix.nrows()
    }

    pub fn n_rows(&self) -> usize {
        self.n_eq() + self.n_ineq()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let dims = [
            ("task target", self.task_matrix.nrows(), self.task_target.len()),
            ("equality matrix", n, self.eq_matrix.ncols()),
            ("equality rhs", self.eq_matrix.nrows(), self.eq_rhs.len()),
            ("equality ids", self.eq_matrix.nrows(), self.eq_ids.len()),
            ("inequality matrix", n, self.ineq_matrix.ncols()),
            ("inequality rhs", self.ineq_matrix.nrows(), self.ineq_rhs.len()),
            ("inequality ids", self.ineq_matrix.nrows(), self.ineq_ids.len()),
        ];
        for (what, expected, got) in dims {
            if expected != got {
                return Err(QpError::Dimension { what, expected, got });
            }
        }
        let finite = self
            .task_matrix
            .iter()
            .chain(self.task_target.iter())
            .chain(self.eq_matrix.iter())
            .chain(self.eq_rhs.iter())
            .chain(self.ineq_matrix.iter())
            .chain(self.ineq_rhs.iter())
            .all(|x| x.is_finite());
        if !finite {
            return Err(QpError::NonFinite);
        }
        Ok(())
    }

    /// Row `k` of the combined `[E; G]` matrix.
    pub fn row_vec(&self, k: usize) -> DVector<f64> {
        if k < self.n_eq() {
            self.eq_matrix.row(k).transpose()
        } else {
            self.ineq_matrix.row(k - self.n_eq()).transpose()
        }
    }

    pub fn rhs(&self, k: usize) -> f64 {
        if k < self.n_eq() {
            self.eq_rhs[k]
        } else {
            self.ineq_rhs[k - self.n_eq()]
        }
    }

    pub fn id(&self, k: usize) -> ConstraintId {
        if k < self.n_eq() {
            self.eq_ids[k]
        } else {
            self.ineq_ids[k - self.n_eq()]
        }
    }

    fn index_of(&self, id: ConstraintId) -> Option<usize> {
        self.eq_ids
            .iter()
            .chain(self.ineq_ids.iter())
            .position(|x| *x == id)
    }

    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        0.5 * (&self.task_matrix * y - &self.task_target).norm_squared()
    }

    /// Stacked right-hand side `b̲ = [b̄; d]` for the given active set.
    pub fn stacked_rhs(&self, active: &ActiveSet) -> Result<DVector<f64>> {
        let m = active.len();
        let p = self.task_target.len();
        let mut b = DVector::zeros(m + p);
        for (i, id) in active.rows.iter().enumerate() {
            let k = self.index_of(*id).ok_or(QpError::InvalidWarmStart(*id))?;
            b[i] = self.rhs(k);
        }
        b.rows_mut(m, p).copy_from(&self.task_target);
        Ok(b)
    }

    fn scale(&self) -> f64 {
        let a2 = self.eq_matrix.norm_squared() + self.ineq_matrix.norm_squared();
        (a2 + self.task_matrix.norm_squared()).sqrt().max(1.0)
    }
}

/// Relative tolerance for detecting dependent working-set rows.
pub const RANK_TOL: f64 = 1e-10;

/// Cached factorization of the stacked system for one active set.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    active_set: ActiveSet,
    /// Which working-set rows were kept by the factorization.
    independent: Vec<bool>,
    n: usize,
    /// Orthonormal basis of the row space of the kept rows (n × r).
    range: DMatrix<f64>,
    /// Triangular factor with `Āᵀ_kept = range · tri` (r × r, upper).
    tri: DMatrix<f64>,
    /// Orthonormal nullspace basis of `Ā` (n × k).
    null: DMatrix<f64>,
    /// Task matrix `C` (p × n).
    task: DMatrix<f64>,
    /// Thin QR of `C Z`: orthonormal factor (p × k) and triangle (k × k).
    proj_q: DMatrix<f64>,
    proj_r: DMatrix<f64>,
    /// Explicit `A̲‡` (n × rhs_len), formed once the active set is final so
    /// that applying it is a single matrix-vector product.
    operator: Option<DMatrix<f64>>,
    pub timestamp: f64,
}

impl Decomposition {
    pub fn active_set(&self) -> &ActiveSet {
        &self.active_set
    }

    pub fn contact_mode_id(&self) -> u32 {
        self.active_set.contact_mode_id
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Length of the stacked right-hand side this decomposition consumes.
    pub fn rhs_len(&self) -> usize {
        self.active_set.len() + self.task.nrows()
    }

    pub fn rank(&self) -> usize {
        self.range.ncols()
    }

    /// Working-set rows dropped as linearly dependent ("implied active").
    pub fn implied_rows(&self) -> Vec<ConstraintId> {
        self.active_set
            .rows
            .iter()
            .zip(&self.independent)
            .filter(|(_, keep)| !**keep)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn is_materialized(&self) -> bool {
        self.operator.is_some()
    }

    /// Forms the explicit operator by running the recursion on the identity.
    pub fn materialize(&mut self) {
        if self.operator.is_some() {
            return;
        }
        let (m, p, r) = (self.active_set.len(), self.task.nrows(), self.rank());
        let len = m + p;
        let mut kept = DMatrix::zeros(r, len);
        for (row, (i, _)) in self.independent.iter().enumerate().filter(|(_, keep)| **keep).enumerate() {
            kept[(row, i)] = 1.0;
        }
        let w = self.tri.tr_solve_upper_triangular(&kept).expect("nonzero pivots by construction");
        let mut op = &self.range * w;
        if self.null.ncols() > 0 {
            let mut resid = -(&self.task * &op);
            for j in 0..p {
                resid[(j, m + j)] += 1.0;
            }
            let g = self.proj_q.tr_mul(&resid);
            let z = self.proj_r.solve_upper_triangular(&g).expect("full-rank projected tasks");
            op += &self.null * z;
        }
        self.operator = Some(op);
    }

    /// `y = A̲‡ b̲`.
    pub fn apply(&self, stacked: &DVector<f64>) -> Result<DVector<f64>> {
        if stacked.len() != self.rhs_len() {
            return Err(QpError::Dimension {
                what: "stacked rhs",
                expected: self.rhs_len(),
                got: stacked.len(),
            });
        }
        Ok(match &self.operator {
            Some(op) => op * stacked,
            None => self.apply_factored(stacked),
        })
    }

    /// Forward recursion on the factors.
    fn apply_factored(&self, stacked: &DVector<f64>) -> DVector<f64> {
        let m = self.active_set.len();
        let kept: Vec<f64> = (0..m)
            .filter(|&i| self.independent[i])
            .map(|i| stacked[i])
            .collect();
        let w = forward_substitute_transposed(&self.tri, &kept);
        let mut y = &self.range * DVector::from_vec(w);
        if self.null.ncols() > 0 {
            let p = self.task.nrows();
            let resid = stacked.rows(m, p) - &self.task * &y;
            let g = self.proj_q.tr_mul(&resid);
            let z = back_substitute(&self.proj_r, g.as_slice());
            y += &self.null * DVector::from_vec(z);
        }
        y
    }

    /// Multipliers of the working-set rows for a stationary point `y` of
    /// `½‖C y − d‖² + linᵀ y`. Dependent rows get zero.
    fn multipliers(&self, y: &DVector<f64>, target: &DVector<f64>, lin: Option<&DVector<f64>>) -> Vec<f64> {
        let mut grad = self.task.tr_mul(&(&self.task * y - target));
        if let Some(l) = lin {
            grad += l;
        }
        let proj = self.range.tr_mul(&grad);
        let lam = back_substitute(&self.tri, proj.as_slice());
        let mut out = vec![0.0; self.active_set.len()];
        let mut it = lam.into_iter();
        for (i, keep) in self.independent.iter().enumerate() {
            if *keep {
                out[i] = -it.next().unwrap_or(0.0);
            }
        }
        out
    }

    /// Primal step `−P a` and multiplier rates for adding a unit of dual
    /// weight on a constraint with normal `a`.
    fn dual_direction(&self, a: &DVector<f64>) -> (DVector<f64>, Vec<f64>) {
        let k = self.null.ncols();
        let y = if k > 0 {
            let za = self.null.tr_mul(a);
            let u = forward_substitute_transposed(&self.proj_r, za.as_slice());
            let z = back_substitute(&self.proj_r, &u);
            -(&self.null * DVector::from_vec(z))
        } else {
            DVector::zeros(self.n)
        };
        let zero = DVector::zeros(self.task.nrows());
        let lam = self.multipliers(&y, &zero, Some(a));
        (y, lam)
    }

    const MAGIC: &'static [u8; 8] = b"decomp/2";

    /// Versioned little-endian binary encoding.
    pub fn encode(&self) -> Vec<u8> {
        let (n, m, r, p, k) = (
            self.n,
            self.active_set.len(),
            self.rank(),
            self.task.nrows(),
            self.null.ncols(),
        );
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(Self::MAGIC);
        for v in [n, m, r, p, k] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.active_set.contact_mode_id.to_le_bytes());
        out.extend_from_slice(&self.timestamp.to_le_bytes());
        for id in &self.active_set.rows {
            out.extend_from_slice(&id.0.to_le_bytes());
        }
        out.extend(self.independent.iter().map(|b| *b as u8));
        for mat in [&self.range, &self.tri, &self.null, &self.task, &self.proj_q, &self.proj_r] {
            for x in mat.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.push(self.operator.is_some() as u8);
        for x in self.operator.iter().flat_map(|m| m.iter()) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn encoded_len(&self) -> usize {
        let (n, m, r, p, k) = (
            self.n,
            self.active_set.len(),
            self.rank(),
            self.task.nrows(),
            self.null.ncols(),
        );
        let op = if self.operator.is_some() { n * (m + p) } else { 0 };
        8 + 6 * 4 + 8 + 5 * m + 8 * (n * r + r * r + n * k + p * n + p * k + k * k) + 1 + 8 * op
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        if cur.take(8)? != Self::MAGIC {
            return Err(QpError::Decode("bad schema tag".into()));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = cur.u32()? as usize;
        }
        let [n, m, r, p, k] = dims;
        if r + k != n {
            return Err(QpError::Decode(format!("rank {r} + nullity {k} != n {n}")));
        }
        let mode = cur.u32()?;
        let timestamp = cur.f64()?;
        let rows = (0..m).map(|_| cur.u32().map(ConstraintId)).collect::<Result<Vec<_>>>()?;
        let independent = cur.take(m)?.iter().map(|b| *b != 0).collect::<Vec<_>>();
        if independent.iter().filter(|b| **b).count() != r {
            return Err(QpError::Decode("independent row count disagrees with rank".into()));
        }
        let mat = |cur: &mut Cursor, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            let data = (0..rows * cols).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            Ok(DMatrix::from_vec(rows, cols, data))
        };
        let range = mat(&mut cur, n, r)?;
        let tri = mat(&mut cur, r, r)?;
        let null = mat(&mut cur, n, k)?;
        let task = mat(&mut cur, p, n)?;
        let proj_q = mat(&mut cur, p, k)?;
        let proj_r = mat(&mut cur, k, k)?;
        let operator = match cur.take(1)?[0] {
            0 => None,
            1 => Some(mat(&mut cur, n, m + p)?),
            other => return Err(QpError::Decode(format!("bad operator flag {other}"))),
        };
        if cur.pos != bytes.len() {
            return Err(QpError::Decode("trailing bytes".into()));
        }
        Ok(Self {
            active_set: ActiveSet {
                rows,
                contact_mode_id: mode,
            },
            independent,
            n,
            range,
            tri,
            null,
            task,
            proj_q,
            proj_r,
            operator,
            timestamp,
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos + len;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| QpError::Decode("truncated payload".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Solves `Rᵀ x = b` for upper-triangular `R`.
fn forward_substitute_transposed(r: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= r[(j, i)] * x[j];
        }
        x[i] = s / r[(i, i)];
    }
    x
}

/// Solves `R x = b` for upper-triangular `R`.
fn back_substitute(r: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in i + 1..n {
            s -= r[(i, j)] * x[j];
        }
        x[i] = s / r[(i, i)];
    }
    x
}

/// Householder factorization of the working-set rows. Rows whose remaining
/// norm falls below the tolerance are marked dependent and skipped.
fn factorize(qp: &LeastSquaresQp, rows: &[usize], mode: u32) -> Result<Decomposition> {
    let n = qp.n();
    let tol = RANK_TOL * qp.scale();
    let mut reflectors: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut tri_cols: Vec<Vec<f64>> = Vec::new();
    let mut independent = Vec::with_capacity(rows.len());
    for &k in rows {
        let mut x = qp.row_vec(k);
        for (i, (v, beta)) in reflectors.iter().enumerate() {
            let mut tail = x.rows_mut(i, n - i);
            let s = beta * v.dot(&tail);
            tail.axpy(-s, v, 1.0);
        }
        let r = reflectors.len();
        let tail = x.rows(r, n - r).into_owned();
        let norm = tail.norm();
        if norm <= tol || r == n {
            independent.push(false);
            continue;
        }
        let alpha = if tail[0] >= 0.0 { -norm } else { norm };
        let mut v = tail;
        v[0] -= alpha;
        let beta = 2.0 / v.norm_squared();
        let mut col: Vec<f64> = x.rows(0, r).iter().copied().collect();
        col.push(alpha);
        tri_cols.push(col);
        reflectors.push((v, beta));
        independent.push(true);
    }
    let r = reflectors.len();
    let mut q = DMatrix::<f64>::identity(n, n);
    for (i, (v, beta)) in reflectors.iter().enumerate().rev() {
        let mut block = q.rows_mut(i, n - i);
        let w = block.tr_mul(v) * *beta;
        block.ger(-1.0, v, &w, 1.0);
    }
    let mut tri = DMatrix::zeros(r, r);
    for (c, col) in tri_cols.iter().enumerate() {
        for (i, x) in col.iter().enumerate() {
            tri[(i, c)] = *x;
        }
    }
    let range = q.columns(0, r).into_owned();
    let null = q.columns(r, n - r).into_owned();
    let task = qp.task_matrix.clone();
    let k = n - r;
    let (proj_q, proj_r) = if k > 0 {
        let cz = &task * &null;
        if cz.nrows() < k {
            return Err(QpError::RankDeficientTasks);
        }
        let qr = cz.qr();
        let (qm, rm) = qr.unpack();
        let ctol = RANK_TOL * task.norm().max(1.0);
        if (0..k).any(|i| rm[(i, i)].abs() <= ctol) {
            return Err(QpError::RankDeficientTasks);
        }
        (qm, rm)
    } else {
        (DMatrix::zeros(task.nrows(), 0), DMatrix::zeros(0, 0))
    };
    Ok(Decomposition {
        active_set: ActiveSet {
            rows: rows.iter().map(|&k| qp.id(k)).collect(),
            contact_mode_id: mode,
        },
        independent,
        n,
        range,
        tri,
        null,
        task,
        proj_q,
        proj_r,
        operator: None,
        timestamp: 0.0,
    })
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub y: DVector<f64>,
    pub active_set: ActiveSet,
    /// Multipliers aligned with `active_set.rows`.
    pub multipliers: Vec<f64>,
    pub decomposition: Decomposition,
    pub iterations: usize,
    pub objective: f64,
}

/// KKT residuals of a solution against its problem.
#[derive(Debug, Clone, Copy)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
}

pub fn kkt_report(qp: &LeastSquaresQp, sol: &Solution) -> KktReport {
    let mut grad = qp.task_matrix.tr_mul(&(&qp.task_matrix * &sol.y - &qp.task_target));
    let mut dual: f64 = 0.0;
    for (id, lam) in sol.active_set.rows.iter().zip(&sol.multipliers) {
        let k = qp.index_of(*id).expect("active row belongs to problem");
        grad.axpy(*lam, &qp.row_vec(k), 1.0);
        if k >= qp.n_eq() {
            dual = dual.max(-lam);
        }
    }
    let mut primal: f64 = 0.0;
    for k in 0..qp.n_rows() {
        let r = qp.row_vec(k).dot(&sol.y) - qp.rhs(k);
        primal = primal.max(if k < qp.n_eq() { r.abs() } else { r });
    }
    KktReport {
        stationarity: grad.amax(),
        primal,
        dual,
    }
}

/// Nullspace solution of the problem restricted to `Ā y = b̄` for the rows
/// of `active`. Returns the optimizer, the row multipliers and the factors.
pub fn solve_equality(qp: &LeastSquaresQp, active: &ActiveSet) -> Result<(DVector<f64>, Vec<f64>, Decomposition)> {
    qp.validate()?;
    let rows = active
        .rows
        .iter()
        .map(|id| qp.index_of(*id).ok_or(QpError::InvalidWarmStart(*id)))
        .collect::<Result<Vec<_>>>()?;
    let mut dec = factorize(qp, &rows, active.contact_mode_id)?;
    dec.materialize();
    let b = qp.stacked_rhs(dec.active_set())?;
    let y = dec.apply(&b)?;
    check_implied(qp, &rows, &dec, &y)?;
    let lam = dec.multipliers(&y, &qp.task_target, None);
    Ok((y, lam, dec))
}

fn check_implied(qp: &LeastSquaresQp, rows: &[usize], dec: &Decomposition, y: &DVector<f64>) -> Result<()> {
    let tol = 1e-8 * qp.scale();
    for (&k, keep) in rows.iter().zip(&dec.independent) {
        if !keep && (qp.row_vec(k).dot(y) - qp.rhs(k)).abs() > tol * (1.0 + y.amax()) {
            return Err(QpError::Infeasible);
        }
    }
    Ok(())
}

/// Working set: equality rows first, then active inequalities in index order.
fn working_rows(qp: &LeastSquaresQp, active_ineq: &BTreeSet<usize>) -> Vec<usize> {
    (0..qp.n_eq()).chain(active_ineq.iter().copied()).collect()
}

const VIOLATION_TOL: f64 = 1e-9;
const MULTIPLIER_TOL: f64 = 1e-10;

/// Solves the QP. A warm start (typically the previous cycle's optimal active
/// set) seeds the working set; rows of another contact mode are ignored.
pub fn solve(qp: &LeastSquaresQp, warm_start: Option<&ActiveSet>) -> Result<Solution> {
    qp.validate()?;
    let me = qp.n_eq();
    let cap = (10 * qp.n_rows()).max(10);
    let mode = qp.mode_id;
    let mut active: BTreeSet<usize> = BTreeSet::new();
    if let Some(ws) = warm_start.filter(|w| w.contact_mode_id == mode) {
        for id in &ws.rows {
            let k = qp.index_of(*id).ok_or(QpError::InvalidWarmStart(*id))?;
            if k >= me {
                active.insert(k);
            }
        }
    }

    let mut iterations = 0;
    // Equality-constrained optimum of the current working set with all
    // inequality multipliers non-negative.
    let (mut y, mut lam, mut dec) = loop {
        iterations += 1;
        if iterations > cap {
            return Err(QpError::NonConvergence(cap));
        }
        let rows = working_rows(qp, &active);
        let dec = factorize(qp, &rows, mode)?;
        let b = qp.stacked_rhs(dec.active_set())?;
        let y = dec.apply(&b)?;
        check_implied(qp, &rows[..me], &dec, &y)?;
        let lam = dec.multipliers(&y, &qp.task_target, None);
        // Dependent inequality rows are implied by the others; release them.
        let dependent: Vec<usize> = rows
            .iter()
            .zip(&dec.independent)
            .filter(|(k, keep)| **k >= me && !**keep)
            .map(|(k, _)| *k)
            .collect();
        let most_negative = rows
            .iter()
            .zip(&lam)
            .filter(|(k, l)| **k >= me && **l < -MULTIPLIER_TOL)
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(a.0.cmp(b.0)))
            .map(|(k, _)| *k);
        if !dependent.is_empty() {
            for k in dependent {
                active.remove(&k);
            }
        } else if let Some(k) = most_negative {
            active.remove(&k);
        } else {
            break (y, lam, dec);
        }
    };

    loop {
        // Most violated inactive inequality, ties to the lowest index.
        let mut pick: Option<(usize, f64)> = None;
        for k in me..qp.n_rows() {
            if active.contains(&k) {
                continue;
            }
            let viol = qp.row_vec(k).dot(&y) - qp.rhs(k);
            let tol = VIOLATION_TOL * (1.0 + qp.rhs(k).abs());
            if viol > tol && pick.map_or(true, |(_, v)| viol > v) {
                pick = Some((k, viol));
            }
        }
        let Some((p, _)) = pick else { break };
        let normal = qp.row_vec(p);
        let mut added_weight = 0.0;
        loop {
            iterations += 1;
            if iterations > cap {
                return Err(QpError::NonConvergence(cap));
            }
            let rows = working_rows(qp, &active);
            let (dir, dlam) = dec.dual_direction(&normal);
            let viol = normal.dot(&y) - qp.rhs(p);
            let curvature = -normal.dot(&dir);
            let full = if curvature > 1e-14 * normal.norm_squared().max(1e-300) {
                (viol / curvature).max(0.0)
            } else {
                f64::INFINITY
            };
            let mut partial = f64::INFINITY;
            let mut blocking = None;
            for (i, &k) in rows.iter().enumerate() {
                if k < me || dlam[i] >= -MULTIPLIER_TOL {
                    continue;
                }
                let t = (-lam[i] / dlam[i]).max(0.0);
                if t < partial {
                    partial = t;
                    blocking = Some(k);
                }
            }
            if full.is_infinite() && blocking.is_none() {
                return Err(QpError::Infeasible);
            }
            let step = full.min(partial);
            y.axpy(step, &dir, 1.0);
            for (l, d) in lam.iter_mut().zip(&dlam) {
                *l += step * d;
            }
            added_weight += step;
            if full <= partial {
                active.insert(p);
                break;
            }
            let k = blocking.expect("partial step has a blocking row");
            let pos = rows.iter().position(|r| *r == k).unwrap();
            lam.remove(pos);
            active.remove(&k);
            dec = factorize(qp, &working_rows(qp, &active), mode)?;
        }
        let _ = added_weight;
        // Re-solve the new working set exactly; tiny negative multipliers
        // from round-off are released the same way as during warm start.
        loop {
            iterations += 1;
            if iterations > cap {
                return Err(QpError::NonConvergence(cap));
            }
            let rows = working_rows(qp, &active);
            dec = factorize(qp, &rows, mode)?;
            let b = qp.stacked_rhs(dec.active_set())?;
            y = dec.apply(&b)?;
            check_implied(qp, &rows, &dec, &y)?;
            lam = dec.multipliers(&y, &qp.task_target, None);
            let dependent: Vec<usize> = rows
                .iter()
                .zip(&dec.independent)
                .filter(|(k, keep)| **k >= me && !**keep)
                .map(|(k, _)| *k)
                .collect();
            let most_negative = rows
                .iter()
                .zip(&lam)
                .filter(|(k, l)| **k >= me && **l < -MULTIPLIER_TOL)
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(a.0.cmp(b.0)))
                .map(|(k, _)| *k);
            if !dependent.is_empty() {
                for k in dependent {
                    active.remove(&k);
                }
            } else if let Some(k) = most_negative {
                active.remove(&k);
            } else {
                break;
            }
        }
    }

    let objective = qp.objective(&y);
    dec.materialize();
    let sol = Solution {
        active_set: dec.active_set().clone(),
        multipliers: lam,
        y,
        decomposition: dec,
        iterations,
        objective,
    };
    #[cfg(debug_assertions)]
    {
        let kkt = kkt_report(qp, &sol);
        let scale = qp.scale() * (1.0 + sol.y.amax() + sol.multipliers.iter().fold(0.0f64, |a, l| a.max(l.abs())));
        debug_assert!(kkt.stationarity <= 1e-6 * scale, "stationarity {kkt:?}");
        debug_assert!(kkt.primal <= 1e-8 * scale, "primal feasibility {kkt:?}");
        debug_assert!(kkt.dual <= 1e-8 * scale, "dual feasibility {kkt:?}");
    }
    Ok(sol)
}
