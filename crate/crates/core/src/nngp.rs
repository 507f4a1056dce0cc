//! Nearest-neighbor factorization of a Gaussian process and the collapsed
//! (nugget-augmented) likelihood built on it.
//!
//! With ordered locations `s_1..s_n` and conditioning sets `N(i)`, the
//! approximate covariance `C̃` satisfies `C̃⁻¹ = (I − A)ᵀ D⁻¹ (I − A)` where row
//! `i` of `A` holds `a_i = C_{N(i)}⁻¹ C_{N(i),i}` and `D = diag(d_i)`.
//! Adding a nugget gives `Λ̃ = C̃ + τ²I`, which is handled through the sparse
//! matrix `P = C̃⁻¹ + τ⁻²I`:
//!
//! ```text
//! Λ̃⁻¹ = τ⁻²I − τ⁻⁴P⁻¹ = τ⁻² P⁻¹ C̃⁻¹
//! log det Λ̃ = n log τ² + log det C̃ + log det P
//! ```

use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack, StackReq};
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, CholeskySymbolicParams, LltRef, SymbolicCholesky,
    SymbolicCholeskyRaw, SymmetricOrdering,
};
use faer::sparse::linalg::SupernodalThreshold;
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Par, Side};
use rayon::prelude::*;

use crate::covariance::{CovarianceParams, Kernel, JITTER};
use crate::error::{Error, Result};
use crate::geometry::{LocationOrder, LocationSet, NeighborIndex, NeighborSearcher};
use crate::linalg;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Coefficient rows and conditional variances of the neighbor factorization.
#[derive(Debug, Clone)]
pub struct NngpFactors {
    nbr: Arc<NeighborIndex>,
    coeffs: Vec<f64>,
    condvar: Vec<f64>,
}

/// Factors for locations already stored in their ordered sequence.
pub fn compute_factors_ordered(
    ordered: &LocationSet,
    nbr: &Arc<NeighborIndex>,
    p: &CovarianceParams,
) -> Result<NngpFactors> {
    let n = ordered.len();
    if nbr.len() != n {
        return Err(Error::Shape(format!("neighbor index has {} rows for {n} points", nbr.len())));
    }
    p.validate()?;
    p.check_dim(ordered.dim())?;
    let mut coeffs = vec![0.0; nbr.total()];
    let mut condvar = vec![0.0; n];
    let mut rows: Vec<&mut [f64]> = Vec::with_capacity(n);
    let mut rest = coeffs.as_mut_slice();
    for i in 0..n {
        let (head, tail) = rest.split_at_mut(nbr.neighbors(i).len());
        rows.push(head);
        rest = tail;
    }
    let jitter = JITTER * p.sigma2;
    rows.into_par_iter()
        .zip(condvar.par_iter_mut())
        .enumerate()
        .with_min_len(256)
        .try_for_each_init(Vec::new, |gram, (i, (a, d))| {
            let set = nbr.neighbors(i);
            let k = set.len();
            let si = ordered.point(i);
            for (slot, &j) in a.iter_mut().zip(set) {
                *slot = p.cov(ordered.point(j), si);
            }
            if k == 0 {
                *d = p.sigma2;
                return Ok(());
            }
            gram.clear();
            gram.resize(k * k, 0.0);
            for r in 0..k {
                let pr = ordered.point(set[r]);
                gram[r * k + r] = p.sigma2 + jitter;
                for c in 0..r {
                    gram[r * k + c] = p.cov(pr, ordered.point(set[c]));
                }
            }
            linalg::cholesky_in_place(gram, k).map_err(|_| Error::SingularNeighborBlock { index: i })?;
            let c: Vec<f64> = a.to_vec();
            linalg::cholesky_solve(gram, k, a);
            let v = p.sigma2 - linalg::dot(&c, a);
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::SingularNeighborBlock { index: i });
            }
            *d = v;
            Ok(())
        })?;
    Ok(NngpFactors { nbr: Arc::clone(nbr), coeffs, condvar })
}

/// Factors for `locs` under `ord`; `nbr` must have been built from the same pair.
pub fn compute_factors(
    locs: &LocationSet,
    ord: &LocationOrder,
    nbr: &Arc<NeighborIndex>,
    p: &CovarianceParams,
) -> Result<NngpFactors> {
    compute_factors_ordered(&locs.permuted(ord), nbr, p)
}

impl NngpFactors {
    pub fn len(&self) -> usize {
        self.condvar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.condvar.is_empty()
    }

    pub fn neighbor_index(&self) -> &Arc<NeighborIndex> {
        &self.nbr
    }

    pub fn coefficients(&self, i: usize) -> &[f64] {
        let lo = self.nbr.offset(i);
        &self.coeffs[lo..lo + self.nbr.neighbors(i).len()]
    }

    pub fn condvar(&self) -> &[f64] {
        &self.condvar
    }

    /// `log det C̃ = Σ log d_i`.
    pub fn log_det(&self) -> f64 {
        self.condvar.iter().map(|d| d.ln()).sum()
    }

    /// `(I − A) v`.
    pub fn whiten(&self, v: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let s: f64 = self.coefficients(i).iter().zip(self.nbr.neighbors(i)).map(|(a, &j)| a * v[j]).sum();
                v[i] - s
            })
            .collect()
    }

    /// `C̃⁻¹ v`.
    pub fn precision_apply(&self, v: &[f64]) -> Vec<f64> {
        let r = self.whiten(v);
        let mut out = vec![0.0; self.len()];
        for i in 0..self.len() {
            let s = r[i] / self.condvar[i];
            out[i] += s;
            for (a, &j) in self.coefficients(i).iter().zip(self.nbr.neighbors(i)) {
                out[j] -= a * s;
            }
        }
        out
    }
}

/// `vᵀ C̃⁻¹ v = Σ (v_i − a_iᵀ v_{N(i)})² / d_i`.
pub fn sparse_quadform(f: &NngpFactors, v: &[f64]) -> f64 {
    f.whiten(v).iter().zip(&f.condvar).map(|(r, d)| r * r / d).sum()
}

/// Sparsity pattern of `C̃⁻¹ + τ⁻²I` with its symbolic Cholesky, reusable for
/// any factors sharing the neighbor index.
#[derive(Debug)]
pub struct PrecisionPattern {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    /// For row `i`, `(k+1)(k+2)/2` value slots of the clique `{i} ∪ N(i)`.
    slots: Vec<usize>,
    slot_offsets: Vec<usize>,
    diag: Vec<usize>,
    symbolic: SymbolicCholesky<usize>,
    factor_req: StackReq,
    solve_req: StackReq,
}

fn clique(nbr: &NeighborIndex, i: usize) -> impl Iterator<Item = usize> + '_ {
    std::iter::once(i).chain(nbr.neighbors(i).iter().copied())
}

impl PrecisionPattern {
    pub fn new(nbr: &NeighborIndex) -> Result<Self> {
        Self::build(nbr, SupernodalThreshold::AUTO)
    }

    pub(crate) fn build(nbr: &NeighborIndex, threshold: SupernodalThreshold) -> Result<Self> {
        let n = nbr.len();
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            let members: Vec<usize> = clique(nbr, i).collect();
            for (p, &u) in members.iter().enumerate() {
                for &v in &members[p..] {
                    cols[u.max(v)].push(u.min(v));
                }
            }
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for c in cols.iter_mut() {
            c.sort_unstable();
            c.dedup();
            row_idx.extend_from_slice(c);
            col_ptr.push(row_idx.len());
        }
        let find = |r: usize, c: usize| -> usize {
            let lo = col_ptr[c];
            lo + row_idx[lo..col_ptr[c + 1]].binary_search(&r).expect("entry in pattern")
        };
        let mut slots = Vec::new();
        let mut slot_offsets = Vec::with_capacity(n + 1);
        slot_offsets.push(0);
        for i in 0..n {
            let members: Vec<usize> = clique(nbr, i).collect();
            for (p, &u) in members.iter().enumerate() {
                for &v in &members[p..] {
                    slots.push(find(u.min(v), u.max(v)));
                }
            }
            slot_offsets.push(slots.len());
        }
        let diag = (0..n).map(|j| find(j, j)).collect();
        let sym = SymbolicSparseColMatRef::new_checked(n, n, &col_ptr, None, &row_idx);
        let symbolic = factorize_symbolic_cholesky(
            sym,
            Side::Upper,
            SymmetricOrdering::Amd,
            CholeskySymbolicParams { supernodal_flop_ratio_threshold: threshold, ..Default::default() },
        )
        .map_err(|e| Error::NotPositiveDefinite(format!("symbolic factorization failed: {e:?}")))?;
        let factor_req = symbolic.factorize_numeric_llt_scratch::<f64>(Par::Seq, Default::default());
        let solve_req = symbolic.solve_in_place_scratch::<f64>(1, Par::Seq);
        Ok(Self { n, col_ptr, row_idx, slots, slot_offsets, diag, symbolic, factor_req, solve_req })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Stored entries of the Cholesky factor.
    pub fn fill(&self) -> usize {
        self.symbolic.len_val()
    }

    /// Upper-triangle values of `C̃⁻¹ + shift·I`.
    fn assemble(&self, f: &NngpFactors, shift: f64) -> Vec<f64> {
        let mut vals = vec![0.0; self.row_idx.len()];
        let mut u = Vec::new();
        for i in 0..self.n {
            u.clear();
            u.push(1.0);
            u.extend(f.coefficients(i).iter().map(|a| -a));
            let inv_d = 1.0 / f.condvar[i];
            let mut s = self.slot_offsets[i];
            for p in 0..u.len() {
                for q in p..u.len() {
                    vals[self.slots[s]] += u[p] * u[q] * inv_d;
                    s += 1;
                }
            }
        }
        for &d in &self.diag {
            vals[d] += shift;
        }
        vals
    }
}

/// Factorization of `Λ̃ = C̃ + τ²I` supporting solves and the log-determinant.
#[derive(Debug, Clone)]
pub struct CollapsedFactor {
    factors: NngpFactors,
    pattern: Option<Arc<PrecisionPattern>>,
    tau2: f64,
    l_values: Vec<f64>,
    log_det: f64,
}

impl CollapsedFactor {
    /// Factors `C̃⁻¹ + τ⁻²I`. With `tau2 = 0` no sparse factorization happens
    /// and solves go through `C̃⁻¹` directly.
    pub fn new(factors: NngpFactors, pattern: &Arc<PrecisionPattern>, tau2: f64) -> Result<Self> {
        if !(tau2 >= 0.0 && tau2.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau2 must be non-negative, got {tau2}")));
        }
        if pattern.len() != factors.len() {
            return Err(Error::Shape(format!(
                "precision pattern of size {} for {} factors",
                pattern.len(),
                factors.len()
            )));
        }
        let n = factors.len();
        if tau2 == 0.0 {
            let log_det = factors.log_det();
            return Ok(Self { factors, pattern: None, tau2, l_values: Vec::new(), log_det });
        }
        let vals = pattern.assemble(&factors, 1.0 / tau2);
        let sym = SymbolicSparseColMatRef::new_checked(n, n, &pattern.col_ptr, None, &pattern.row_idx);
        let a = SparseColMatRef::new(sym, &vals);
        let mut l_values = vec![0.0f64; pattern.symbolic.len_val()];
        let mut buf = MemBuffer::new(pattern.factor_req);
        pattern
            .symbolic
            .factorize_numeric_llt(
                &mut l_values,
                a,
                Side::Upper,
                Default::default(),
                Par::Seq,
                MemStack::new(&mut buf),
                Default::default(),
            )
            .map_err(|e| Error::NotPositiveDefinite(format!("precision plus nugget: {e:?}")))?;
        let logdet_p = match pattern.symbolic.raw() {
            SymbolicCholeskyRaw::Simplicial(s) => {
                let cp = s.col_ptr();
                (0..n).map(|j| 2.0 * l_values[cp[j]].ln()).sum::<f64>()
            }
            SymbolicCholeskyRaw::Supernodal(s) => {
                // each supernode is a dense column-major block, diagonal block on top
                let (begin, end) = (s.supernode_begin(), s.supernode_end());
                let (rows, vals) = (s.col_ptr_for_row_idx(), s.col_ptr_for_val());
                (0..s.n_supernodes())
                    .map(|k| {
                        let ncols = end[k] - begin[k];
                        let nrows = ncols + rows[k + 1] - rows[k];
                        (0..ncols).map(|j| 2.0 * l_values[vals[k] + j * nrows + j].ln()).sum::<f64>()
                    })
                    .sum::<f64>()
            }
        };
        let log_det = n as f64 * tau2.ln() + factors.log_det() + logdet_p;
        Ok(Self { factors, pattern: Some(Arc::clone(pattern)), tau2, l_values, log_det })
    }

    pub fn factors(&self) -> &NngpFactors {
        &self.factors
    }

    pub fn into_factors(self) -> NngpFactors {
        self.factors
    }

    pub fn tau2(&self) -> f64 {
        self.tau2
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Solves `P x = b` in place for each column of the column-major `b`.
    fn solve_p(&self, b: &mut [f64], ncols: usize) {
        let pattern = self.pattern.as_ref().expect("nugget path");
        let n = self.len();
        let llt = LltRef::new(&pattern.symbolic, &self.l_values);
        let req = pattern.symbolic.solve_in_place_scratch::<f64>(ncols, Par::Seq).or(pattern.solve_req);
        let mut buf = MemBuffer::new(req);
        llt.solve_in_place_with_conj(
            Conj::No,
            MatMut::from_column_major_slice_mut(b, n, ncols),
            Par::Seq,
            MemStack::new(&mut buf),
        );
    }

    /// `Λ̃⁻¹ v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.factors.precision_apply(v);
        if self.tau2 > 0.0 {
            self.solve_p(&mut out, 1);
            let s = 1.0 / self.tau2;
            out.iter_mut().for_each(|x| *x *= s);
        }
        out
    }

    /// `Λ̃⁻¹ B` for a column-major `n × k` block.
    pub fn solve_columns(&self, b: &[f64], k: usize) -> Vec<f64> {
        let n = self.len();
        let mut out = Vec::with_capacity(n * k);
        for c in 0..k {
            out.extend(self.factors.precision_apply(&b[c * n..(c + 1) * n]));
        }
        if self.tau2 > 0.0 && k > 0 {
            self.solve_p(&mut out, k);
            let s = 1.0 / self.tau2;
            out.iter_mut().for_each(|x| *x *= s);
        }
        out
    }

    /// `vᵀ Λ̃⁻¹ v`.
    pub fn quadform(&self, v: &[f64]) -> f64 {
        if self.tau2 == 0.0 {
            return sparse_quadform(&self.factors, v);
        }
        linalg::dot(v, &self.solve(v))
    }

    /// Log density of `resid` under `N(0, Λ̃)`.
    pub fn loglik(&self, resid: &[f64]) -> f64 {
        -0.5 * (self.len() as f64 * LN_2PI + self.log_det + self.quadform(resid))
    }

    /// Dense `τ⁻²I − τ⁻⁴P⁻¹`, column-major. Only for small checks.
    pub fn dense_inverse(&self) -> Vec<f64> {
        let n = self.len();
        if self.tau2 == 0.0 {
            let mut out = Vec::with_capacity(n * n);
            let mut e = vec![0.0; n];
            for j in 0..n {
                e[j] = 1.0;
                out.extend(self.factors.precision_apply(&e));
                e[j] = 0.0;
            }
            return out;
        }
        let mut pinv = vec![0.0; n * n];
        for j in 0..n {
            pinv[j * n + j] = 1.0;
        }
        self.solve_p(&mut pinv, n);
        let t1 = 1.0 / self.tau2;
        let t2 = t1 * t1;
        let mut out: Vec<f64> = pinv.iter().map(|x| -t2 * x).collect();
        for j in 0..n {
            out[j * n + j] += t1;
        }
        out
    }
}

/// Applies `Λ⁻¹` to a column-major block of `k` columns.
pub trait CovarianceSolve {
    fn dim(&self) -> usize;
    fn solve_columns(&self, b: &[f64], k: usize) -> Vec<f64>;
}

impl CovarianceSolve for CollapsedFactor {
    fn dim(&self) -> usize {
        self.len()
    }

    fn solve_columns(&self, b: &[f64], k: usize) -> Vec<f64> {
        CollapsedFactor::solve_columns(self, b, k)
    }
}

/// Log density of `resid` under `N(0, C̃ + τ²I)`.
pub fn marginal_loglik(f: &NngpFactors, resid: &[f64], tau2: f64) -> Result<f64> {
    if resid.len() != f.len() {
        return Err(Error::DimensionMismatch { expected: f.len(), found: resid.len() });
    }
    if tau2 == 0.0 {
        let n = f.len() as f64;
        return Ok(-0.5 * (n * LN_2PI + f.log_det() + sparse_quadform(f, resid)));
    }
    let pattern = Arc::new(PrecisionPattern::new(f.neighbor_index())?);
    Ok(CollapsedFactor::new(f.clone(), &pattern, tau2)?.loglik(resid))
}

/// Whether the neighbor Gram matrix carries the nugget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningMode {
    /// Neighbors are noisy observations: Gram `C + τ²I`.
    #[default]
    Observed,
    /// Neighbors are latent values: Gram `C`.
    Latent,
}

/// Kriging weights, variance and mean at one target.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    /// Storage indices of the conditioning set in the reference data.
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
    pub var: f64,
    pub mean: f64,
}

/// Conditional of the latent value at `target` given the reference residuals
/// at `nbrs`.
pub fn conditional_from_neighbors(
    target: &[f64],
    locs: &LocationSet,
    nbrs: &[usize],
    resid: &[f64],
    p: &CovarianceParams,
    tau2: f64,
    mode: ConditioningMode,
) -> Result<Conditional> {
    let k = nbrs.len();
    let mut c: Vec<f64> = nbrs.iter().map(|&j| p.cov(locs.point(j), target)).collect();
    if k == 0 {
        return Ok(Conditional { neighbors: Vec::new(), weights: Vec::new(), var: p.sigma2, mean: 0.0 });
    }
    let nug = match mode {
        ConditioningMode::Observed => tau2,
        ConditioningMode::Latent => 0.0,
    };
    let mut gram = vec![0.0; k * k];
    for r in 0..k {
        let pr = locs.point(nbrs[r]);
        gram[r * k + r] = p.sigma2 + nug + JITTER * p.sigma2;
        for s in 0..r {
            gram[r * k + s] = p.cov(pr, locs.point(nbrs[s]));
        }
    }
    linalg::cholesky_in_place(&mut gram, k).map_err(|_| Error::SingularNeighborBlock { index: nbrs[0] })?;
    let cross = c.clone();
    linalg::cholesky_solve(&gram, k, &mut c);
    let var = (p.sigma2 - linalg::dot(&cross, &c)).max(0.0);
    let mean = c.iter().zip(nbrs).map(|(w, &j)| w * resid[j]).sum();
    Ok(Conditional { neighbors: nbrs.to_vec(), weights: c, var, mean })
}

/// Conditional at `target` using its `m` nearest reference points.
pub fn conditional_at(
    target: &[f64],
    searcher: &NeighborSearcher,
    locs: &LocationSet,
    resid: &[f64],
    p: &CovarianceParams,
    tau2: f64,
    m: usize,
    mode: ConditioningMode,
) -> Result<Conditional> {
    if resid.len() != locs.len() {
        return Err(Error::DimensionMismatch { expected: locs.len(), found: resid.len() });
    }
    p.check_dim(target.len())?;
    if locs.is_empty() {
        return Ok(Conditional { neighbors: Vec::new(), weights: Vec::new(), var: p.sigma2, mean: 0.0 });
    }
    let nbrs: Vec<usize> = searcher.query(target, m, false)?.into_iter().map(|n| n.index).collect();
    conditional_from_neighbors(target, locs, &nbrs, resid, p, tau2, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::cov_block;
    use crate::geometry::{build_neighbor_index, order_locations, OrderingStrategy};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, m: usize, seed: u64, kappa: f64) -> (LocationSet, Arc<NeighborIndex>, CovarianceParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = (0..2 * n).map(|_| rng.random::<f64>()).collect();
        let locs = LocationSet::new(2, coords).unwrap();
        let ord = order_locations(&locs, OrderingStrategy::CoordSort).unwrap();
        let ordered = locs.permuted(&ord);
        let nbr = Arc::new(build_neighbor_index(&ordered, &LocationOrder::identity(n), m));
        (ordered, nbr, CovarianceParams::isotropic(1.3, kappa).unwrap())
    }

    fn dense_loglik(c: &DMatrix<f64>, r: &[f64]) -> f64 {
        let n = r.len();
        let chol = c.clone().cholesky().unwrap();
        let v = DVector::from_column_slice(r);
        let x = chol.solve(&v);
        let ld: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        -0.5 * (n as f64 * LN_2PI + ld + v.dot(&x))
    }

    /// `C̃ = (I − A)⁻¹ D (I − A)⁻ᵀ`.
    fn implied_covariance(f: &NngpFactors) -> DMatrix<f64> {
        let n = f.len();
        let mut ia = DMatrix::<f64>::identity(n, n);
        for i in 0..n {
            for (a, &j) in f.coefficients(i).iter().zip(f.neighbor_index().neighbors(i)) {
                ia[(i, j)] = -a;
            }
        }
        let ia_inv = ia.try_inverse().unwrap();
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(f.condvar()));
        &ia_inv * d * ia_inv.transpose()
    }

    #[test]
    fn single_point_factors() {
        let (locs, nbr, p) = setup(1, 3, 0, 2.0);
        let f = compute_factors_ordered(&locs, &nbr, &p).unwrap();
        assert_eq!(f.condvar(), &[1.3]);
        assert!(f.coefficients(0).is_empty());
        assert!((sparse_quadform(&f, &[2.0]) - 4.0 / 1.3).abs() < 1e-14);
    }

    #[test]
    fn zero_budget_is_independence() {
        let (locs, nbr, p) = setup(10, 0, 1, 2.0);
        let f = compute_factors_ordered(&locs, &nbr, &p).unwrap();
        assert!(f.condvar().iter().all(|&d| d == 1.3));
    }

    #[test]
    fn collinear_schur_complement() {
        let locs = LocationSet::from_points(&[[0.0, 0.0], [0.5, 0.0], [1.2, 0.0]]).unwrap();
        let nbr = Arc::new(build_neighbor_index(&locs, &LocationOrder::identity(3), 2));
        let p = CovarianceParams::isotropic(1.0, 1.5).unwrap();
        let f = compute_factors_ordered(&locs, &nbr, &p).unwrap();
        let c = cov_block(&locs, &locs, &p).unwrap();
        let l = c.cholesky().unwrap().l();
        assert!((f.condvar()[2] - l[(2, 2)].powi(2)).abs() < 1e-9);
    }

    #[test]
    fn full_history_quadform_matches_dense() {
        let (locs, nbr, p) = setup(20, 19, 2, 3.0);
        let f = compute_factors_ordered(&locs, &nbr, &p).unwrap();
        let c = cov_block(&locs, &locs, &p).unwrap();
        let v: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
        let dv = DVector::from_column_slice(&v);
        let dense = dv.dot(&c.clone().cholesky().unwrap().solve(&dv));
        let sparse = sparse_quadform(&f, &v);
        assert!(((sparse - dense) / dense).abs() < 1e-8);
        let dense_ld: f64 = c.cholesky().unwrap().l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        assert!((f.log_det() - dense_ld).abs() < 1e-8 * dense_ld.abs().max(1.0));
        assert_eq!(sparse_quadform(&f, &[0.0; 20]), 0.0);
    }

    #[test]
    fn single_point_marginal() {
        let (locs, nbr, p) = setup(1, 1, 3, 1.0);
        let f = compute_factors_ordered(&locs, &nbr, &p).unwrap();
        let ll = marginal_loglik(&f, &[0.0], 0.2).unwrap();
        assert!((ll + 0.5 * (2.0 * std::f64::consts::PI * 1.5).ln()).abs() < 1e-12);
    }

    #[test]
    fn full_history_marginal_matches_dense() {
        let (locs, nbr, p) = setup(50, 49, 4, 4.0);
        let f = compute_factors_ordered(&locs, &nbr, &p).unwrap();
        let tau2 = 0.15;
        let mut c = cov_block(&locs, &locs, &p).unwrap();
        for i in 0..50 {
            c[(i, i)] += tau2;
        }
        let r: Vec<f64> = (0..50).map(|i| (i as f64 * 1.3).cos()).collect();
        let dense = dense_loglik(&c, &r);
        let sparse = marginal_loglik(&f, &r, tau2).unwrap();
        assert!(((sparse - dense) / dense).abs() < 1e-8, "{sparse} vs {dense}");
        let no_nugget = marginal_loglik(&f, &r, 0.0).unwrap();
        let c0 = cov_block(&locs, &locs, &p).unwrap();
        assert!(((no_nugget - dense_loglik(&c0, &r)) / no_nugget).abs() < 1e-8);
    }

    #[test]
    fn woodbury_inverse_entrywise() {
        let (locs, nbr, p) = setup(20, 19, 5, 5.0);
        let f = compute_factors_ordered(&locs, &nbr, &p).unwrap();
        let pattern = Arc::new(PrecisionPattern::new(&nbr).unwrap());
        let tau2 = 0.3;
        let mut c = implied_covariance(&f);
        let cf = CollapsedFactor::new(f, &pattern, tau2).unwrap();
        let w = DMatrix::from_column_slice(20, 20, &cf.dense_inverse());
        for i in 0..20 {
            c[(i, i)] += tau2;
        }
        let inv = c.try_inverse().unwrap();
        let err = (w - inv).abs().max();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn both_factor_layouts_agree_with_dense() {
        let (locs, nbr, p) = setup(300, 12, 8, 3.0);
        let f = compute_factors_ordered(&locs, &nbr, &p).unwrap();
        let tau2 = 0.07;
        let mut c = implied_covariance(&f);
        for i in 0..300 {
            c[(i, i)] += tau2;
        }
        let chol = c.cholesky().unwrap();
        let dense_ld: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let r: Vec<f64> = (0..300).map(|i| (i as f64 * 0.37).sin()).collect();
        let dense_x = chol.solve(&DVector::from_column_slice(&r));
        for threshold in [SupernodalThreshold::FORCE_SIMPLICIAL, SupernodalThreshold::FORCE_SUPERNODAL] {
            let pattern = Arc::new(PrecisionPattern::build(&nbr, threshold).unwrap());
            let cf = CollapsedFactor::new(f.clone(), &pattern, tau2).unwrap();
            assert!((cf.log_det() - dense_ld).abs() < 1e-9 * dense_ld.abs(), "{} vs {dense_ld}", cf.log_det());
            let x = cf.solve(&r);
            for i in 0..300 {
                assert!((x[i] - dense_x[i]).abs() < 1e-8 * dense_x.amax());
            }
        }
    }

    #[test]
    fn solve_columns_matches_single_solves() {
        let (locs, nbr, p) = setup(40, 5, 6, 6.0);
        let f = compute_factors_ordered(&locs, &nbr, &p).unwrap();
        let pattern = Arc::new(PrecisionPattern::new(&nbr).unwrap());
        let cf = CollapsedFactor::new(f, &pattern, 0.05).unwrap();
        let b: Vec<f64> = (0..80).map(|i| (i as f64).sqrt()).collect();
        let both = cf.solve_columns(&b, 2);
        let a0 = cf.solve(&b[..40]);
        let a1 = cf.solve(&b[40..]);
        for i in 0..40 {
            assert!((both[i] - a0[i]).abs() < 1e-12);
            assert!((both[40 + i] - a1[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_prior_and_interpolation() {
        let (locs, _, p) = setup(30, 0, 7, 3.0);
        let resid: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let searcher = NeighborSearcher::new(&locs);
        let c = conditional_at(&[0.5, 0.5], &searcher, &locs, &resid, &p, 0.1, 0, ConditioningMode::Observed).unwrap();
        assert_eq!((c.mean, c.var), (0.0, p.sigma2));
        let t = locs.point(11).to_vec();
        let c = conditional_at(&t, &searcher, &locs, &resid, &p, 0.0, 5, ConditioningMode::Observed).unwrap();
        assert!((c.mean - resid[11]).abs() < 1e-6);
        assert!(c.var <= 1e-8 * p.sigma2);
    }

    #[test]
    fn conditional_matches_dense_kriging() {
        let (locs, _, p) = setup(30, 0, 8, 2.5);
        let resid: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let tau2 = 0.2;
        let target = [0.37, 0.61];
        let searcher = NeighborSearcher::new(&locs);
        let c = conditional_at(&target, &searcher, &locs, &resid, &p, tau2, 30, ConditioningMode::Observed).unwrap();
        let mut g = cov_block(&locs, &locs, &p).unwrap();
        for i in 0..30 {
            g[(i, i)] += tau2;
        }
        let k = DVector::from_fn(30, |i, _| p.cov(locs.point(i), &target));
        let w = g.cholesky().unwrap().solve(&k);
        let mean = w.dot(&DVector::from_column_slice(&resid));
        let var = p.sigma2 - w.dot(&k);
        assert!((c.mean - mean).abs() < 1e-8 * mean.abs().max(1.0), "{} {}", c.mean, mean);
        assert!((c.var - var).abs() < 1e-8 * var.max(1e-3));
    }

    #[test]
    fn variance_non_increasing_in_budget() {
        let (locs, _, p) = setup(60, 0, 9, 4.0);
        let resid = vec![0.0; 60];
        let searcher = NeighborSearcher::new(&locs);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let t = [rng.random::<f64>(), rng.random::<f64>()];
            let mut prev = f64::INFINITY;
            for m in [1, 2, 4, 8] {
                let v = conditional_at(&t, &searcher, &locs, &resid, &p, 0.05, m, ConditioningMode::Observed)
                    .unwrap()
                    .var;
                assert!(v <= prev + 1e-12);
                prev = v;
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn condvar_positive_and_bounded(seed in 0u64..1000, n in 1usize..60, m in 0usize..12, kappa in 0.5f64..30.0) {
                let (locs, nbr, p) = setup(n, m, seed, kappa);
                let f = compute_factors_ordered(&locs, &nbr, &p).unwrap();
                prop_assert!(f.condvar().iter().all(|&d| d > 0.0 && d <= p.sigma2 * (1.0 + 1e-12)));
                prop_assert_eq!(f.condvar()[0], p.sigma2);
            }

            #[test]
            fn woodbury_identity(seed in 0u64..1000, n in 2usize..50, m in 1usize..10, tau2 in 0.01f64..1.0) {
                let (locs, nbr, p) = setup(n, m, seed, 5.0);
                let f = compute_factors_ordered(&locs, &nbr, &p).unwrap();
                let mut lam = implied_covariance(&f);
                for i in 0..n {
                    lam[(i, i)] += tau2;
                }
                let pattern = Arc::new(PrecisionPattern::new(&nbr).unwrap());
                let cf = CollapsedFactor::new(f, &pattern, tau2).unwrap();
                let w = DMatrix::from_column_slice(n, n, &cf.dense_inverse());
                let prod = &lam * w;
                prop_assert!((prod - DMatrix::<f64>::identity(n, n)).abs().max() < 1e-8);
                let ld: f64 = lam.cholesky().unwrap().l().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
                prop_assert!((cf.log_det() - ld).abs() < 1e-8 * ld.abs().max(1.0));
            }
        }
    }
}
