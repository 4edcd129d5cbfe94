//! Dirichlet operator -L_w on a finite site set and its principal eigenpair.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::environment::{Cube, Environment, Site};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest matrix the dense oracle accepts.
pub const DENSE_LIMIT: usize = 4096;

#[derive(Clone, Debug)]
enum SiteIndex {
    Box(Cube),
    List {
        sites: Vec<Site>,
        lookup: HashMap<Site, usize>,
    },
}

/// Sparse symmetric matrix of -L_w with zero exterior condition.
///
/// Each row stores up to 2d neighbors; absent neighbors point to the row
/// itself with weight zero.
#[derive(Clone, Debug)]
pub struct DirichletOperator<T> {
    d: usize,
    n: usize,
    index: SiteIndex,
    diag: Vec<T>,
    nbr: Vec<u32>,
    wts: Vec<T>,
}

/// Principal eigenpair with solver diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenPair<T> {
    pub lambda1: T,
    pub psi1: Vec<T>,
    pub residual: T,
    /// Round-off level of the residual, 16 eps || |A| |psi| ||.
    pub residual_floor: T,
    pub iterations: usize,
    pub inner_iterations: usize,
}

impl<T: Scalar> EigenPair<T> {
    pub fn to_f64(&self) -> EigenPair<f64> {
        EigenPair {
            lambda1: self.lambda1.to_f64_lossy(),
            psi1: self.psi1.iter().map(|v| v.to_f64_lossy()).collect(),
            residual: self.residual.to_f64_lossy(),
            residual_floor: self.residual_floor.to_f64_lossy(),
            iterations: self.iterations,
            inner_iterations: self.inner_iterations,
        }
    }
}

/// Builds -L_w on B_n.
pub fn assemble_dirichlet_operator<T: Scalar>(
    env: &Environment,
    n: usize,
) -> Result<DirichletOperator<T>> {
    if n + 1 > env.radius() {
        return Err(Error::Domain(format!(
            "box radius {n} needs edges up to radius {}, environment has {}",
            n + 1,
            env.radius()
        )));
    }
    let d = env.dim();
    let cube = Cube::new(d, n as i64);
    let ecube = env.cube();
    let len = cube.len();
    let mut diag = vec![T::zero(); len];
    let mut nbr = vec![0u32; len * 2 * d];
    let mut wts = vec![T::zero(); len * 2 * d];
    let mut x = vec![0i64; d];
    for i in 0..len {
        cube.coords_into(i, &mut x);
        let ei = ecube.index(&x).unwrap();
        let mut pi = 0.0;
        for a in 0..d {
            let lower = env.weight_at(ei - ecube.stride(a), a).unwrap();
            let upper = env.weight_at(ei, a).unwrap();
            pi += lower;
            pi += upper;
            let k = i * 2 * d + 2 * a;
            nbr[k] = i as u32;
            nbr[k + 1] = i as u32;
            if x[a] > -(n as i64) {
                nbr[k] = (i - cube.stride(a)) as u32;
                wts[k] = T::from_f64_lossy(lower);
            }
            if x[a] < n as i64 {
                nbr[k + 1] = (i + cube.stride(a)) as u32;
                wts[k + 1] = T::from_f64_lossy(upper);
            }
        }
        diag[i] = T::from_f64_lossy(pi);
    }
    Ok(DirichletOperator {
        d,
        n,
        index: SiteIndex::Box(cube),
        diag,
        nbr,
        wts,
    })
}

/// Dirichlet operator on an arbitrary site list, counting only edges whose
/// weight passes `keep`. Kept edges leaving the list contribute to the
/// diagonal (zero exterior condition).
pub fn subgraph_operator<T: Scalar, K: Fn(f64) -> bool>(
    env: &Environment,
    sites: &[Site],
    keep: K,
) -> Result<DirichletOperator<T>> {
    let d = env.dim();
    let lookup: HashMap<Site, usize> = sites.iter().cloned().zip(0..).collect();
    if lookup.len() != sites.len() {
        return Err(Error::Domain("site list has duplicates".into()));
    }
    let len = sites.len();
    let mut diag = vec![T::zero(); len];
    let mut nbr = vec![0u32; len * 2 * d];
    let mut wts = vec![T::zero(); len * 2 * d];
    for (i, x) in sites.iter().enumerate() {
        let mut pi = 0.0;
        for a in 0..d {
            for (s, step) in [(0usize, -1i64), (1, 1)] {
                let mut y = x.clone();
                y[a] += step;
                let w = env.weight_between(x, &y).ok_or_else(|| {
                    Error::Domain(format!("edge {x:?}-{y:?} is not materialized"))
                })?;
                let k = i * 2 * d + 2 * a + s;
                nbr[k] = i as u32;
                if keep(w) {
                    pi += w;
                    if let Some(&j) = lookup.get(&y) {
                        nbr[k] = j as u32;
                        wts[k] = T::from_f64_lossy(w);
                    }
                }
            }
        }
        diag[i] = T::from_f64_lossy(pi);
    }
    Ok(DirichletOperator {
        d,
        n: 0,
        index: SiteIndex::List {
            sites: sites.to_vec(),
            lookup,
        },
        diag,
        nbr,
        wts,
    })
}

impl<T: Scalar> DirichletOperator<T> {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Box radius (0 for operators on site lists).
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lattice_dim(&self) -> usize {
        self.d
    }

    pub fn diag(&self) -> &[T] {
        &self.diag
    }

    pub fn site(&self, i: usize) -> Site {
        match &self.index {
            SiteIndex::Box(c) => c.coords(i),
            SiteIndex::List { sites, .. } => sites[i].clone(),
        }
    }

    pub fn site_index(&self, x: &[i64]) -> Option<usize> {
        match &self.index {
            SiteIndex::Box(c) => c.index(x),
            SiteIndex::List { lookup, .. } => lookup.get(x).copied(),
        }
    }

    /// Largest |i - j| over nonzero off-diagonal entries.
    pub fn bandwidth(&self) -> usize {
        let k = 2 * self.d;
        let mut b = 0;
        for i in 0..self.dim() {
            for s in 0..k {
                b = b.max((self.nbr[i * k + s] as usize).abs_diff(i));
            }
        }
        b
    }

    /// Off-diagonal entries (i, j, -w) with i < j.
    pub fn offdiag(&self) -> Vec<(usize, usize, T)> {
        let k = 2 * self.d;
        let mut out = Vec::new();
        for i in 0..self.dim() {
            for s in 0..k {
                let j = self.nbr[i * k + s] as usize;
                if j > i {
                    out.push((i, j, -self.wts[i * k + s]));
                }
            }
        }
        out
    }

    /// Row sums: total kept weight from each site to the exterior.
    pub fn row_sums(&self) -> Vec<T> {
        let k = 2 * self.d;
        (0..self.dim())
            .map(|i| {
                let mut s = self.diag[i];
                for t in 0..k {
                    s -= self.wts[i * k + t];
                }
                s
            })
            .collect()
    }

    /// y = A x.
    pub fn apply(&self, x: &[T], y: &mut [T]) {
        let k = 2 * self.d;
        for i in 0..self.dim() {
            let mut s = self.diag[i] * x[i];
            let row = i * k;
            for t in 0..k {
                s -= self.wts[row + t] * x[self.nbr[row + t] as usize];
            }
            y[i] = s;
        }
    }

    /// y = |A| |x|, used for round-off estimates.
    pub fn apply_abs(&self, x: &[T], y: &mut [T]) {
        let k = 2 * self.d;
        for i in 0..self.dim() {
            let mut s = self.diag[i].abs() * x[i].abs();
            let row = i * k;
            for t in 0..k {
                s += self.wts[row + t].abs() * x[self.nbr[row + t] as usize].abs();
            }
            y[i] = s;
        }
    }

    /// <f, A f>.
    pub fn quadratic_form(&self, f: &[T]) -> T {
        let mut y = vec![T::zero(); self.dim()];
        self.apply(f, &mut y);
        dot(f, &y)
    }

    /// Dense copy of the matrix, in f64.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.dim();
        let mut a = DMatrix::zeros(m, m);
        for i in 0..m {
            a[(i, i)] = self.diag[i].to_f64_lossy();
        }
        for (i, j, v) in self.offdiag() {
            a[(i, j)] = v.to_f64_lossy();
            a[(j, i)] = v.to_f64_lossy();
        }
        a
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Dirichlet energy 1/2 sum_x sum_{y~x} w_xy (f(x) - f(y))^2 with f = 0 off B_n.
///
/// `f` is indexed either by B_n or by the whole materialized box; in the
/// latter case it must vanish outside B_n.
pub fn dirichlet_energy(env: &Environment, f: &[f64], n: usize) -> Result<f64> {
    let d = env.dim();
    if n + 1 > env.radius() {
        return Err(Error::Domain(format!("radius {n} exceeds the environment")));
    }
    let cube = Cube::new(d, n as i64);
    let ecube = env.cube();
    let boxed: Vec<f64>;
    let f = if f.len() == cube.len() {
        f
    } else if f.len() == ecube.len() {
        for (i, v) in f.iter().enumerate() {
            if *v != 0.0 && !cube.contains(&ecube.coords(i)) {
                return Err(Error::Domain(format!(
                    "f is nonzero at {:?}, outside B_{n}",
                    ecube.coords(i)
                )));
            }
        }
        boxed = cube.sites().map(|x| f[ecube.index(&x).unwrap()]).collect();
        &boxed
    } else {
        return Err(Error::Domain(format!("f has length {}", f.len())));
    };
    let mut e = 0.0;
    let mut x = vec![0i64; d];
    for i in 0..cube.len() {
        cube.coords_into(i, &mut x);
        let ei = ecube.index(&x).unwrap();
        for a in 0..d {
            let w = env.weight_at(ei, a).unwrap();
            let fy = if x[a] < n as i64 {
                f[i + cube.stride(a)]
            } else {
                0.0
            };
            e += w * (f[i] - fy).powi(2);
            if x[a] == -(n as i64) {
                let w = env.weight_at(ei - ecube.stride(a), a).unwrap();
                e += w * f[i] * f[i];
            }
        }
    }
    Ok(e)
}

/// Rayleigh quotient <f, A f> / <f, f>.
pub fn rayleigh_quotient<T: Scalar>(op: &DirichletOperator<T>, f: &[T]) -> T {
    op.quadratic_form(f) / dot(f, f)
}

/// Options for [`principal_eigenpair`].
#[derive(Clone, Copy, Debug)]
pub struct SolverOptions<T> {
    pub tol: T,
    pub max_iter: usize,
    /// Inner CG budget; `None` means 10 * dim.
    pub max_inner: Option<usize>,
    pub inner: InnerSolver,
}

/// Linear solver used inside the inverse iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InnerSolver {
    /// Banded Cholesky when the factor is cheap, CG otherwise.
    #[default]
    Auto,
    /// Jacobi-preconditioned conjugate gradient.
    Cg,
    /// Banded Cholesky factorization, computed once.
    Cholesky,
}

/// Refactorizations allowed for shift updates.
const MAX_SHIFTS: usize = 30;

/// Work budget (band^2 * dim) under which `Auto` factorizes.
const CHOLESKY_BUDGET: f64 = 2e9;

impl<T: Scalar> Default for SolverOptions<T> {
    fn default() -> Self {
        SolverOptions {
            tol: T::default_tol(),
            max_iter: 10_000,
            max_inner: None,
            inner: InnerSolver::Auto,
        }
    }
}

/// Jacobi-preconditioned CG for A x = b starting from `x`; stops when
/// ||b - A x|| <= atol. Returns the iteration count.
fn pcg<T: Scalar>(
    op: &DirichletOperator<T>,
    b: &[T],
    x: &mut [T],
    atol: T,
    max_iter: usize,
) -> Result<usize> {
    let m = op.dim();
    let mut r = vec![T::zero(); m];
    op.apply(x, &mut r);
    for i in 0..m {
        r[i] = b[i] - r[i];
    }
    if norm(&r) <= atol {
        return Ok(0);
    }
    let mut z: Vec<T> = r.iter().zip(&op.diag).map(|(ri, di)| *ri / *di).collect();
    let mut p = z.clone();
    let mut ap = vec![T::zero(); m];
    let mut rz = dot(&r, &z);
    for it in 1..=max_iter {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > T::zero()) || !pap.is_finite() {
            return Err(Error::Numerical(format!(
                "CG breakdown at iteration {it}: p'Ap = {pap}"
            )));
        }
        let alpha = rz / pap;
        for i in 0..m {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm(&r) <= atol {
            return Ok(it);
        }
        for i in 0..m {
            z[i] = r[i] / op.diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..m {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok(max_iter)
}

/// Principal eigenpair by inverse power iteration with inner Jacobi-PCG.
pub fn principal_eigenpair<T: Scalar>(
    op: &DirichletOperator<T>,
    tol: T,
    max_iter: usize,
) -> Result<EigenPair<T>> {
    principal_eigenpair_with(
        op,
        SolverOptions {
            tol,
            max_iter,
            max_inner: None,
            inner: InnerSolver::Auto,
        },
    )
}

pub fn principal_eigenpair_with<T: Scalar>(
    op: &DirichletOperator<T>,
    opts: SolverOptions<T>,
) -> Result<EigenPair<T>> {
    let m = op.dim();
    if m == 0 {
        return Err(Error::Domain("empty operator".into()));
    }
    if op.diag.iter().any(|v| !(*v > T::zero())) {
        return Err(Error::Numerical(
            "operator has a nonpositive diagonal entry".into(),
        ));
    }
    let tol = opts.tol;
    let max_inner = opts.max_inner.unwrap_or(10 * m);
    let c = |x: f64| T::from_f64_lossy(x);

    let mut start = 0;
    for i in 1..m {
        if op.diag[i] < op.diag[start] {
            start = i;
        }
    }
    let bump = c(1e-3) / T::from_usize(m).unwrap().sqrt();
    let mut v = vec![bump; m];
    v[start] += T::one();
    let nv = norm(&v);
    scale(&mut v, T::one() / nv);

    let mut av = vec![T::zero(); m];
    op.apply(&v, &mut av);
    let mut theta = dot(&v, &av);
    let mut res = residual_norm(&av, &v, theta);
    let mut res_prev = res;
    let mut work = vec![T::zero(); m];
    let use_chol = match opts.inner {
        InnerSolver::Cg => false,
        InnerSolver::Cholesky => true,
        InnerSolver::Auto => {
            let b = op.bandwidth() as f64;
            b * b * m as f64 <= CHOLESKY_BUDGET
        }
    };
    let mut chol = if use_chol {
        Some(BandCholesky::factor(op, T::zero())?)
    } else {
        None
    };
    let mut sigma = T::zero();
    let mut shifts = 0;
    let mut u = vec![T::zero(); m];
    let mut inner_total = 0;
    let mut iterations = 0;
    let mut converged = res <= tol * theta;
    if m == 1 {
        converged = true;
    }
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        if let Some(ch) = &chol {
            u.copy_from_slice(&v);
            ch.solve_in_place(&mut u);
            inner_total += 1;
        } else {
            // warm start at v / theta; the solve then only corrects the residual
            for i in 0..m {
                u[i] = v[i] / theta;
            }
            let eta = (c(0.1) * res / theta).min(c(1e-2)).max(tol * c(0.05));
            inner_total += pcg(op, &v, &mut u, eta, max_inner)?;
        }
        let nu = norm(&u);
        if !nu.is_finite() || nu == T::zero() {
            return Err(Error::Numerical("inverse iterate is not finite".into()));
        }
        for i in 0..m {
            v[i] = u[i] / nu;
        }
        op.apply(&v, &mut av);
        let theta_new = dot(&v, &av);
        res = residual_norm(&av, &v, theta_new);
        let change = (theta_new - theta).abs();
        let slow = res > c(0.3) * res_prev;
        res_prev = res;
        theta = theta_new;
        let target = (tol * theta).max(residual_floor(op, &v, &mut work));
        converged = change <= tol * theta && res <= target;
        // Near-degenerate low modes: move the shift up towards lambda_1. A
        // successful factorization certifies sigma < lambda_1.
        if !converged && slow && chol.is_some() && iterations >= 3 && shifts < MAX_SHIFTS {
            for widen in [2.0, 20.0, 200.0] {
                let cand = theta - c(widen) * res;
                if cand <= sigma {
                    break;
                }
                if let Ok(f) = BandCholesky::factor(op, cand) {
                    chol = Some(f);
                    sigma = cand;
                    shifts += 1;
                    break;
                }
            }
        }
    }

    let pair = finish(op, v, iterations, inner_total)?;
    if !converged {
        return Err(Error::Convergence {
            iterations,
            residual: pair.residual.to_f64_lossy(),
            best: Box::new(pair.to_f64()),
        });
    }
    Ok(pair)
}

/// Lower Cholesky factor stored by rows within a fixed bandwidth.
struct BandCholesky<T> {
    m: usize,
    b: usize,
    /// Row i holds columns i-b ..= i at offsets 0 ..= b.
    l: Vec<T>,
}

impl<T: Scalar> BandCholesky<T> {
    /// Factors A - sigma I; fails exactly when that matrix is not positive
    /// definite (up to round-off), i.e. when sigma >= lambda_1.
    fn factor(op: &DirichletOperator<T>, sigma: T) -> Result<Self> {
        let m = op.dim();
        let b = op.bandwidth();
        let w = b + 1;
        let mut l = vec![T::zero(); m * w];
        for i in 0..m {
            l[i * w + b] = op.diag[i] - sigma;
        }
        for (i, j, v) in op.offdiag() {
            // i < j: entry (j, i) of the lower triangle
            l[j * w + b - (j - i)] = v;
        }
        for i in 0..m {
            let lo = i.saturating_sub(b);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(b));
                let ri = &l[i * w + b - (i - klo)..i * w + b - (i - j)];
                let rj = &l[j * w + b - (j - klo)..j * w + b];
                let mut s = l[i * w + b - (i - j)];
                for (x, y) in ri.iter().zip(rj) {
                    s -= *x * *y;
                }
                if i == j {
                    if !(s > T::zero()) {
                        return Err(Error::Numerical(format!(
                            "Cholesky pivot {s} at row {i} is not positive"
                        )));
                    }
                    l[i * w + b] = s.sqrt();
                } else {
                    l[i * w + b - (i - j)] = s / l[j * w + b];
                }
            }
        }
        Ok(BandCholesky { m, b, l })
    }

    fn solve_in_place(&self, x: &mut [T]) {
        let (m, b, w) = (self.m, self.b, self.b + 1);
        for i in 0..m {
            let lo = i.saturating_sub(b);
            let mut s = x[i];
            let row = &self.l[i * w + b - (i - lo)..i * w + b];
            for (lv, xv) in row.iter().zip(&x[lo..i]) {
                s -= *lv * *xv;
            }
            x[i] = s / self.l[i * w + b];
        }
        for i in (0..m).rev() {
            let xi = x[i] / self.l[i * w + b];
            x[i] = xi;
            let lo = i.saturating_sub(b);
            let row = &self.l[i * w + b - (i - lo)..i * w + b];
            for (lv, xv) in row.iter().zip(&mut x[lo..i]) {
                *xv -= *lv * xi;
            }
        }
    }
}

fn residual_floor<T: Scalar>(op: &DirichletOperator<T>, v: &[T], work: &mut [T]) -> T {
    op.apply_abs(v, work);
    T::from_f64_lossy(16.0) * T::epsilon() * norm(work)
}

fn scale<T: Scalar>(v: &mut [T], s: T) {
    for x in v {
        *x *= s;
    }
}

fn residual_norm<T: Scalar>(av: &[T], v: &[T], theta: T) -> T {
    let mut s = T::zero();
    for (a, b) in av.iter().zip(v) {
        let r = *a - theta * *b;
        s += r * r;
    }
    s.sqrt()
}

/// Sign normalization, nonnegativity check and final Rayleigh quotient.
fn finish<T: Scalar>(
    op: &DirichletOperator<T>,
    mut v: Vec<T>,
    iterations: usize,
    inner_iterations: usize,
) -> Result<EigenPair<T>> {
    let mut big = 0;
    for i in 0..v.len() {
        if v[i].abs() > v[big].abs() {
            big = i;
        }
    }
    if v[big] < T::zero() {
        scale(&mut v, -T::one());
    }
    let floor = T::from_f64_lossy(1e-10).max(T::epsilon() * T::from_f64_lossy(1e3));
    if let Some(bad) = v.iter().position(|x| *x < -floor) {
        return Err(Error::Numerical(format!(
            "eigenvector has negative entry {} at index {bad}",
            v[bad]
        )));
    }
    for x in v.iter_mut() {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
    let nv = norm(&v);
    scale(&mut v, T::one() / nv);
    let mut av = vec![T::zero(); v.len()];
    op.apply(&v, &mut av);
    let lambda1 = dot(&v, &av);
    let residual = residual_norm(&av, &v, lambda1);
    let floor = residual_floor(op, &v, &mut av);
    Ok(EigenPair {
        lambda1,
        psi1: v,
        residual,
        residual_floor: floor,
        iterations,
        inner_iterations,
    })
}

/// Full spectrum from a direct symmetric eigensolver.
#[derive(Clone, Debug)]
pub struct DenseSpectrum {
    /// Ascending eigenvalues.
    pub values: Vec<f64>,
    /// Column j is the eigenvector of `values[j]`.
    pub vectors: DMatrix<f64>,
}

/// Dense verification oracle, always computed in f64.
pub fn dense_oracle<T: Scalar>(op: &DirichletOperator<T>) -> Result<DenseSpectrum> {
    let m = op.dim();
    if m > DENSE_LIMIT {
        return Err(Error::Domain(format!(
            "dense oracle refuses dimension {m} (limit {DENSE_LIMIT})"
        )));
    }
    let eig = SymmetricEigen::new(op.to_dense());
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m, m, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(DenseSpectrum { values, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{sample_environment, BoxSpec, ConductanceLaw};

    fn env(n: usize, law: ConductanceLaw, seed: u64) -> Environment {
        sample_environment(BoxSpec::new(2, n, 2), law, seed).unwrap()
    }

    fn homogeneous(n: usize) -> f64 {
        4.0 * (1.0 - (std::f64::consts::PI / (2.0 * n as f64 + 2.0)).cos())
    }

    #[test]
    fn homogeneous_matrix_structure() {
        let e = env(1, ConductanceLaw::constant(1.0), 0);
        let op = assemble_dirichlet_operator::<f64>(&e, 1).unwrap();
        assert_eq!(op.dim(), 9);
        assert!(op.diag().iter().all(|&v| v == 4.0));
        let off = op.offdiag();
        assert_eq!(off.len(), 12);
        for (i, j, v) in off {
            assert_eq!(v, -1.0);
            let (x, y) = (op.site(i), op.site(j));
            assert_eq!((x[0] - y[0]).abs() + (x[1] - y[1]).abs(), 1);
        }
        // corner rows leak 2, edge rows 1, center 0
        let rs = op.row_sums();
        assert_eq!(rs[0], 2.0);
        assert_eq!(rs[1], 1.0);
        assert_eq!(rs[4], 0.0);
    }

    #[test]
    fn delta_form_is_pi() {
        let e = env(3, ConductanceLaw::polynomial(0.4), 3);
        let op = assemble_dirichlet_operator::<f64>(&e, 3).unwrap();
        let pi = crate::environment::pi_field(&e).unwrap();
        for i in 0..op.dim() {
            let mut f = vec![0.0; op.dim()];
            f[i] = 1.0;
            assert_eq!(op.quadratic_form(&f), pi.get(&op.site(i)).unwrap());
            let en = dirichlet_energy(&e, &f, 3).unwrap();
            assert!((en - pi.get(&op.site(i)).unwrap()).abs() <= 1e-14 * en);
        }
    }

    #[test]
    fn radius_too_large() {
        let e = env(3, ConductanceLaw::constant(1.0), 0);
        assert!(matches!(
            assemble_dirichlet_operator::<f64>(&e, 5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn constant_energy_counts_boundary_edges() {
        let e = env(2, ConductanceLaw::constant(1.0), 0);
        let f = vec![1.0; 25];
        assert_eq!(dirichlet_energy(&e, &f, 2).unwrap(), 20.0);
    }

    #[test]
    fn energy_rejects_support_violation() {
        let e = env(2, ConductanceLaw::constant(1.0), 0);
        let mut f = vec![0.0; e.cube().len()];
        f[0] = 1.0;
        assert!(matches!(dirichlet_energy(&e, &f, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn homogeneous_eigenvalues() {
        for n in 1..=6 {
            let e = env(n, ConductanceLaw::constant(1.0), 0);
            let op = assemble_dirichlet_operator::<f64>(&e, n).unwrap();
            let p = principal_eigenpair(&op, 1e-10, 10_000).unwrap();
            assert!(
                ((p.lambda1 - homogeneous(n)) / homogeneous(n)).abs() < 1e-8,
                "n={n}"
            );
            assert!((norm(&p.psi1) - 1.0).abs() < 1e-12);
            assert!(p.psi1.iter().all(|&v| v >= 0.0));
            assert!(p.residual <= 1e-10 * p.lambda1);
        }
    }

    #[test]
    fn f32_solver_runs() {
        let e = env(3, ConductanceLaw::constant(1.0), 0);
        let op = assemble_dirichlet_operator::<f32>(&e, 3).unwrap();
        let p = principal_eigenpair(&op, f32::default_tol(), 10_000).unwrap();
        assert!(((p.lambda1 as f64 - homogeneous(3)) / homogeneous(3)).abs() < 1e-4);
    }

    #[test]
    fn dense_spectrum_tensor_product() {
        let e = env(1, ConductanceLaw::constant(1.0), 0);
        let op = assemble_dirichlet_operator::<f64>(&e, 1).unwrap();
        let s = dense_oracle(&op).unwrap();
        let mut want = Vec::new();
        for i in 1..=3 {
            for j in 1..=3 {
                let q = std::f64::consts::PI / 4.0;
                want.push(4.0 - 2.0 * (i as f64 * q).cos() - 2.0 * (j as f64 * q).cos());
            }
        }
        want.sort_by(f64::total_cmp);
        for (a, b) in s.values.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_single_site_and_trace() {
        let e =
            sample_environment(BoxSpec::new(2, 1, 1), ConductanceLaw::polynomial(0.3), 4).unwrap();
        let op = assemble_dirichlet_operator::<f64>(&e, 0).unwrap();
        let s = dense_oracle(&op).unwrap();
        assert_eq!(s.values, vec![op.diag()[0]]);
        let e = env(3, ConductanceLaw::polynomial(0.3), 4);
        let op = assemble_dirichlet_operator::<f64>(&e, 3).unwrap();
        let s = dense_oracle(&op).unwrap();
        let tr: f64 = op.diag().iter().sum();
        assert!((s.values.iter().sum::<f64>() - tr).abs() < 1e-10 * tr);
    }

    #[test]
    fn dense_refuses_large() {
        let e =
            sample_environment(BoxSpec::new(2, 33, 1), ConductanceLaw::constant(1.0), 0).unwrap();
        let op = assemble_dirichlet_operator::<f64>(&e, 33).unwrap();
        assert!(matches!(dense_oracle(&op), Err(Error::Domain(_))));
    }

    #[test]
    fn exhausted_budget_carries_best_iterate() {
        let e = env(6, ConductanceLaw::polynomial(0.8), 2);
        let op = assemble_dirichlet_operator::<f64>(&e, 6).unwrap();
        match principal_eigenpair(&op, 1e-14, 1) {
            Err(Error::Convergence {
                best, iterations, ..
            }) => {
                assert_eq!(iterations, 1);
                assert_eq!(best.psi1.len(), op.dim());
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn subgraph_operator_of_full_box_matches() {
        let e = env(3, ConductanceLaw::polynomial(0.4), 9);
        let op = assemble_dirichlet_operator::<f64>(&e, 3).unwrap();
        let sites: Vec<Site> = (0..op.dim()).map(|i| op.site(i)).collect();
        let sub = subgraph_operator::<f64, _>(&e, &sites, |_| true).unwrap();
        assert_eq!(sub.diag(), op.diag());
        assert_eq!(sub.offdiag(), op.offdiag());
    }
}
