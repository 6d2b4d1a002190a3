//! Dense complex linear algebra on the composite space
//! (four internal levels) ⊗ (truncated Fock space).
//!
//! Composite basis index is `level.index() * fock_dim + n`, i.e. the internal
//! factor is the left (slow) factor of every Kronecker product.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray as nd;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INTERNAL_DIM: usize = 4;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Internal (electronic) levels, in basis order.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    S,
    SPrime,
    D,
    DPrime,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::S, Level::SPrime, Level::D, Level::DPrime];

    pub fn index(self) -> usize {
        match self {
            Level::S => 0,
            Level::SPrime => 1,
            Level::D => 2,
            Level::DPrime => 3,
        }
    }

    /// Levels that fluoresce under detection light.
    pub fn is_bright(self) -> bool {
        matches!(self, Level::S | Level::SPrime)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Level::S => "S",
            Level::SPrime => "S'",
            Level::D => "D",
            Level::DPrime => "D'",
        };
        f.write_str(s)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HilbertSpec {
    fock_dim: usize,
}

impl HilbertSpec {
    pub fn new(fock_dim: usize) -> Result<Self> {
        if fock_dim < 2 {
            return Err(Error::InvalidArgument(format!("Fock truncation must be at least 2, got {fock_dim}")));
        }
        Ok(Self { fock_dim })
    }

    pub fn internal_dim(&self) -> usize {
        INTERNAL_DIM
    }

    pub fn fock_dim(&self) -> usize {
        self.fock_dim
    }

    pub fn dim(&self) -> usize {
        INTERNAL_DIM * self.fock_dim
    }

    pub fn index(&self, level: Level, n: usize) -> usize {
        debug_assert!(n < self.fock_dim);
        level.index() * self.fock_dim + n
    }

    /// Basis vector |level, n⟩.
    pub fn ket(&self, level: Level, n: usize) -> nd::Array1<C64> {
        let mut v = nd::Array1::zeros(self.dim());
        v[self.index(level, n)] = ONE;
        v
    }

    /// Lift an internal 4×4 operator to the composite space.
    pub fn lift_internal(&self, op: &Operator) -> Result<Operator> {
        check_dim(op, INTERNAL_DIM)?;
        Ok(tensor(op, &Operator::identity(self.fock_dim)))
    }

    /// Lift a motional operator to the composite space.
    pub fn lift_motional(&self, op: &Operator) -> Result<Operator> {
        check_dim(op, self.fock_dim)?;
        Ok(tensor(&Operator::identity(INTERNAL_DIM), op))
    }

    /// Projector onto the fluorescing manifold span{S, S'} ⊗ I.
    pub fn bright_projector(&self) -> Operator {
        let mut p = nd::Array2::zeros((INTERNAL_DIM, INTERNAL_DIM));
        p[[Level::S.index(), Level::S.index()]] = ONE;
        p[[Level::SPrime.index(), Level::SPrime.index()]] = ONE;
        tensor(&Operator(p), &Operator::identity(self.fock_dim))
    }
}

/// Square complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Operator(nd::Array2<C64>);

impl Operator {
    pub fn new(matrix: nd::Array2<C64>) -> Result<Self> {
        let (r, c) = matrix.dim();
        if r != c {
            return Err(Error::DimensionMismatch { expected: r, got: c });
        }
        Ok(Self(matrix))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(nd::Array2::zeros((dim, dim)))
    }

    pub fn identity(dim: usize) -> Self {
        Self(nd::Array2::eye(dim))
    }

    pub fn from_diag(diag: &[C64]) -> Self {
        Self(nd::Array2::from_diag(&nd::Array1::from(diag.to_vec())))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &nd::Array2<C64> {
        &self.0
    }

    pub fn matrix_mut(&mut self) -> &mut nd::Array2<C64> {
        &mut self.0
    }

    pub fn into_inner(self) -> nd::Array2<C64> {
        self.0
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        self.0[[row, col]]
    }

    pub fn dagger(&self) -> Self {
        Self(self.0.t().mapv(|z| z.conj()))
    }

    pub fn dot(&self, other: &Operator) -> Self {
        Self(self.0.dot(&other.0))
    }

    pub fn apply(&self, v: &nd::Array1<C64>) -> nd::Array1<C64> {
        self.0.dot(v)
    }

    pub fn scale(&self, factor: C64) -> Self {
        Self(&self.0 * factor)
    }

    pub fn commutator(&self, other: &Operator) -> Self {
        Self(self.0.dot(&other.0) - other.0.dot(&self.0))
    }

    pub fn trace(&self) -> C64 {
        self.0.diag().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest entry of |A − A†|.
    pub fn hermitian_deviation(&self) -> f64 {
        hermitian_deviation(&self.0)
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermitian_deviation() <= tol
    }

    /// Number of singular values above `tol`, via the Hermitian eigenvalues of A†A.
    pub fn rank(&self, tol: f64) -> usize {
        let gram = self.dagger().dot(self);
        match eig_hermitian(&gram) {
            Ok(e) => e.values.iter().filter(|&&v| v > tol * tol).count(),
            Err(_) => 0,
        }
    }
}

impl std::ops::Add for &Operator {
    type Output = Operator;
    fn add(self, rhs: &Operator) -> Operator {
        Operator(&self.0 + &rhs.0)
    }
}

impl std::ops::Sub for &Operator {
    type Output = Operator;
    fn sub(self, rhs: &Operator) -> Operator {
        Operator(&self.0 - &rhs.0)
    }
}

impl std::ops::Mul for &Operator {
    type Output = Operator;
    fn mul(self, rhs: &Operator) -> Operator {
        self.dot(rhs)
    }
}

pub(crate) fn hermitian_deviation(m: &nd::Array2<C64>) -> f64 {
    let n = m.nrows();
    let mut dev = 0.0_f64;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((m[[i, j]] - m[[j, i]].conj()).norm());
        }
    }
    dev
}

fn check_dim(op: &Operator, dim: usize) -> Result<()> {
    if op.dim() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: op.dim() });
    }
    Ok(())
}

/// Truncated annihilation operator: `a[n-1, n] = √n`.
pub fn annihilation(fock_dim: usize) -> Result<Operator> {
    if fock_dim < 2 {
        return Err(Error::InvalidArgument(format!("annihilation operator needs fock_dim >= 2, got {fock_dim}")));
    }
    let mut a = nd::Array2::zeros((fock_dim, fock_dim));
    for n in 1..fock_dim {
        a[[n - 1, n]] = C64::new((n as f64).sqrt(), 0.0);
    }
    Ok(Operator(a))
}

pub fn creation(fock_dim: usize) -> Result<Operator> {
    Ok(annihilation(fock_dim)?.dagger())
}

pub fn number(fock_dim: usize) -> Result<Operator> {
    let diag: Vec<C64> = (0..fock_dim).map(|n| C64::new(n as f64, 0.0)).collect();
    if fock_dim < 2 {
        return Err(Error::InvalidArgument(format!("number operator needs fock_dim >= 2, got {fock_dim}")));
    }
    Ok(Operator::from_diag(&diag))
}

/// Internal 4×4 operator |to⟩⟨from|.
pub fn atomic_transition(from: Level, to: Level) -> Result<Operator> {
    if from == to {
        return Err(Error::InvalidArgument(format!(
            "transition {from} -> {to} is a population operator; use `projector`"
        )));
    }
    Ok(outer(to, from))
}

/// Internal projector |level⟩⟨level|.
pub fn projector(level: Level) -> Operator {
    outer(level, level)
}

/// σ_{mn} = |m⟩⟨n| in the supplement-style notation (row level first).
pub fn sigma(row: Level, col: Level) -> Operator {
    outer(row, col)
}

fn outer(row: Level, col: Level) -> Operator {
    let mut m = nd::Array2::zeros((INTERNAL_DIM, INTERNAL_DIM));
    m[[row.index(), col.index()]] = ONE;
    Operator(m)
}

/// Kronecker product A ⊗ B.
pub fn tensor(a: &Operator, b: &Operator) -> Operator {
    Operator(nd::linalg::kron(&a.0, &b.0))
}

/// Eigendecomposition of a Hermitian operator, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    /// Eigenvectors as columns, in the order of `values`.
    pub vectors: nd::Array2<C64>,
}

impl HermitianEigen {
    pub fn vector(&self, k: usize) -> nd::Array1<C64> {
        self.vectors.column(k).to_owned()
    }

    /// V f(Λ) V†.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> C64) -> nd::Array2<C64> {
        let scaled = {
            let mut vs = self.vectors.clone();
            for (k, mut col) in vs.columns_mut().into_iter().enumerate() {
                let fk = f(self.values[k]);
                col.mapv_inplace(|z| z * fk);
            }
            vs
        };
        let vh = self.vectors.t().mapv(|z| z.conj());
        scaled.dot(&vh)
    }
}

pub fn eig_hermitian(op: &Operator) -> Result<HermitianEigen> {
    let n = op.dim();
    let scale = op.0.iter().fold(0.0_f64, |m, z| m.max(z.norm())).max(f64::MIN_POSITIVE);
    let dev = op.hermitian_deviation();
    if dev > 1e-10 * scale.max(1.0) {
        return Err(Error::NotHermitian { deviation: dev });
    }
    // Solve on the exactly-Hermitian part.
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (op.0[[i, j]] + op.0[[j, i]].conj()));
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, 0)
        .ok_or_else(|| Error::Eigen("Hermitian QR iteration did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = nd::Array2::from_shape_fn((n, n), |(i, k)| eig.eigenvectors[(i, order[k])]);
    Ok(HermitianEigen { values, vectors })
}

/// exp(factor · A) for Hermitian A, through its eigendecomposition.
pub fn expm_hermitian(op: &Operator, factor: C64) -> Result<Operator> {
    let eig = eig_hermitian(op)?;
    Ok(Operator(eig.reconstruct_with(|l| (factor * l).exp())))
}

/// Positive semidefinite, unit-trace Hermitian matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix(nd::Array2<C64>);

pub const HERMITIAN_TOL: f64 = 1e-12;
pub const TRACE_TOL: f64 = 1e-8;
pub const EIGEN_FLOOR: f64 = -1e-9;

impl DensityMatrix {
    /// Validating constructor.
    pub fn new(matrix: nd::Array2<C64>) -> Result<Self> {
        let rho = Self::from_matrix_unchecked(matrix);
        rho.validate()?;
        Ok(rho)
    }

    pub(crate) fn from_matrix_unchecked(matrix: nd::Array2<C64>) -> Self {
        Self(matrix)
    }

    /// |ψ⟩⟨ψ| for a normalized copy of `psi`.
    pub fn from_pure(psi: &nd::Array1<C64>) -> Result<Self> {
        let norm = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidState("zero state vector".into()));
        }
        let psi = psi / C64::new(norm, 0.0);
        let n = psi.len();
        let m = nd::Array2::from_shape_fn((n, n), |(i, j)| psi[i] * psi[j].conj());
        Ok(Self(m))
    }

    pub fn basis(space: &HilbertSpec, level: Level, n: usize) -> Self {
        let d = space.dim();
        let mut m = nd::Array2::zeros((d, d));
        let i = space.index(level, n);
        m[[i, i]] = ONE;
        Self(m)
    }

    /// ρ_internal ⊗ ρ_motion.
    pub fn product(internal: &nd::Array2<C64>, motion: &DensityMatrix) -> Result<Self> {
        if internal.dim() != (INTERNAL_DIM, INTERNAL_DIM) {
            return Err(Error::DimensionMismatch { expected: INTERNAL_DIM, got: internal.nrows() });
        }
        Ok(Self(nd::linalg::kron(internal, &motion.0)))
    }

    /// |level⟩⟨level| ⊗ ρ_motion.
    pub fn with_level(level: Level, motion: &DensityMatrix) -> Result<Self> {
        Self::product(projector(level).matrix(), motion)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &nd::Array2<C64> {
        &self.0
    }

    pub fn into_inner(self) -> nd::Array2<C64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.diag().sum().re
    }

    pub fn purity(&self) -> f64 {
        // tr(ρ²) = Σ |ρ_ij|² for Hermitian ρ
        self.0.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        let eig = eig_hermitian(&Operator(self.0.clone()))?;
        Ok(eig.values.first().copied().unwrap_or(0.0))
    }

    pub fn populations(&self) -> Vec<f64> {
        self.0.diag().iter().map(|z| z.re).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (r, c) = self.0.dim();
        if r != c {
            return Err(Error::InvalidState(format!("non-square {r}x{c} matrix")));
        }
        let dev = hermitian_deviation(&self.0);
        if dev > HERMITIAN_TOL {
            return Err(Error::InvalidState(format!("Hermiticity deviation {dev:e}")));
        }
        let tr = self.trace();
        if (tr - 1.0).abs() > TRACE_TOL {
            return Err(Error::InvalidState(format!("trace {tr}")));
        }
        let min = self.min_eigenvalue()?;
        if min < EIGEN_FLOOR {
            return Err(Error::InvalidState(format!("negative eigenvalue {min:e}")));
        }
        Ok(())
    }

    /// Replace by (ρ + ρ†)/2, scaled to unit trace.
    pub(crate) fn hermitize_normalized(mut self) -> Self {
        let n = self.dim();
        for i in 0..n {
            for j in i..n {
                let avg = 0.5 * (self.0[[i, j]] + self.0[[j, i]].conj());
                self.0[[i, j]] = avg;
                self.0[[j, i]] = avg.conj();
            }
        }
        let tr = self.trace();
        if tr > 0.0 {
            self.0.mapv_inplace(|z| z / tr);
        }
        self
    }

    /// Motional reduced state (trace over the internal factor).
    pub fn motional_reduced(&self, space: &HilbertSpec) -> Result<nd::Array2<C64>> {
        self.check_space(space)?;
        let nf = space.fock_dim();
        let mut out = nd::Array2::zeros((nf, nf));
        for l in 0..INTERNAL_DIM {
            let block = self.0.slice(nd::s![l * nf..(l + 1) * nf, l * nf..(l + 1) * nf]);
            out += &block;
        }
        Ok(out)
    }

    /// Internal reduced state (trace over the motional factor).
    pub fn internal_reduced(&self, space: &HilbertSpec) -> Result<nd::Array2<C64>> {
        self.check_space(space)?;
        let nf = space.fock_dim();
        Ok(nd::Array2::from_shape_fn((INTERNAL_DIM, INTERNAL_DIM), |(i, j)| {
            (0..nf).map(|n| self.0[[i * nf + n, j * nf + n]]).sum()
        }))
    }

    /// Phonon-number distribution of the motional reduced state.
    pub fn fock_populations(&self, space: &HilbertSpec) -> Result<Vec<f64>> {
        self.check_space(space)?;
        let nf = space.fock_dim();
        Ok((0..nf)
            .map(|n| Level::ALL.iter().map(|&l| self.0[[space.index(l, n), space.index(l, n)]].re).sum())
            .collect())
    }

    pub fn level_population(&self, space: &HilbertSpec, level: Level) -> Result<f64> {
        self.check_space(space)?;
        Ok((0..space.fock_dim()).map(|n| self.0[[space.index(level, n), space.index(level, n)]].re).sum())
    }

    /// Population of the S manifold (S and S'), i.e. the fluorescence probability.
    pub fn bright_population(&self, space: &HilbertSpec) -> Result<f64> {
        Ok(self.level_population(space, Level::S)? + self.level_population(space, Level::SPrime)?)
    }

    fn check_space(&self, space: &HilbertSpec) -> Result<()> {
        if self.dim() != space.dim() {
            return Err(Error::DimensionMismatch { expected: space.dim(), got: self.dim() });
        }
        Ok(())
    }
}

/// tr(ρ O).
pub fn expectation(rho: &DensityMatrix, op: &Operator) -> Result<C64> {
    if rho.dim() != op.dim() {
        return Err(Error::DimensionMismatch { expected: rho.dim(), got: op.dim() });
    }
    let n = rho.dim();
    let mut acc = ZERO;
    for i in 0..n {
        for k in 0..n {
            acc += rho.0[[i, k]] * op.0[[k, i]];
        }
    }
    Ok(acc)
}

/// Population in the top two Fock levels, the truncation-leak indicator.
pub fn top_fock_population(rho: &DensityMatrix, space: &HilbertSpec) -> Result<f64> {
    let pops = rho.fock_populations(space)?;
    Ok(pops.iter().rev().take(2).sum())
}

pub const TRUNCATION_LEAK_LIMIT: f64 = 1e-6;

pub fn check_truncation(rho: &DensityMatrix, space: &HilbertSpec) -> Result<()> {
    let population = top_fock_population(rho, space)?;
    if population >= TRUNCATION_LEAK_LIMIT {
        return Err(Error::TruncationLeak { population, fock_dim: space.fock_dim() });
    }
    Ok(())
}
