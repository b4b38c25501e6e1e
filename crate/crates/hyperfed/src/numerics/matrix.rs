//! Dense row-major f64 matrices with deterministic summation order.
//!
//! All reductions run in a fixed loop order with no reassociation, so the
//! same inputs produce bit-identical outputs across runs. Performance is
//! secondary; problems in this simulator are small.

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                detail: format!("{} entries for {}x{}", data.len(), rows, cols),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape {
                    op: "from_rows",
                    detail: "ragged rows".into(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape {
                op: "add_assign",
                detail: format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

/// Standard matrix product with a fixed i-k-j loop order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                orow[j] += aik * brow[j];
            }
        }
    }
    Ok(out)
}

/// In-place rank-one update: acc += u v^T.
pub fn outer_accumulate(acc: &mut Matrix, u: &[f64], v: &[f64]) -> Result<()> {
    if acc.rows != u.len() || acc.cols != v.len() {
        return Err(Error::Shape {
            op: "outer_accumulate",
            detail: format!(
                "acc {}x{} vs u[{}] v[{}]",
                acc.rows,
                acc.cols,
                u.len(),
                v.len()
            ),
        });
    }
    for (i, &ui) in u.iter().enumerate() {
        if ui == 0.0 {
            continue;
        }
        let row = acc.row_mut(i);
        for (j, &vj) in v.iter().enumerate() {
            row[j] += ui * vj;
        }
    }
    Ok(())
}

/// Orthonormal rows via Gram-Schmidt over a Gaussian matrix, with one
/// re-orthogonalization pass.
pub fn orthonormal_rows(c: usize, l: usize, rng: &mut Rng) -> Result<Matrix> {
    if c > l {
        return Err(Error::Capacity(format!(
            "cannot orthonormalize {c} rows in dimension {l}"
        )));
    }
    let mut w = Matrix::gaussian(c, l, rng);
    for i in 0..c {
        // Two projection passes per row keep off-diagonals near machine eps.
        for _pass in 0..2 {
            for j in 0..i {
                let dot: f64 = (0..l).map(|t| w.get(i, t) * w.get(j, t)).sum();
                for t in 0..l {
                    let v = w.get(i, t) - dot * w.get(j, t);
                    w.set(i, t, v);
                }
            }
        }
        let norm: f64 = w.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::NonFinite("orthonormal_rows: degenerate draw"));
        }
        for t in 0..l {
            let v = w.get(i, t) / norm;
            w.set(i, t, v);
        }
    }
    Ok(w)
}

#[derive(Clone, Debug)]
pub struct SpdSolution {
    pub x: Matrix,
    /// True when the Cholesky factorization needed the diagonal jitter
    /// fallback to succeed.
    pub regularized: bool,
}

fn cholesky(a: &Matrix) -> std::result::Result<Matrix, usize> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(i);
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows;
    let m = b.cols;
    let mut x = b.clone();
    // Forward substitution: L y = b.
    for col in 0..m {
        for i in 0..n {
            let mut sum = x.get(i, col);
            for k in 0..i {
                sum -= l.get(i, k) * x.get(k, col);
            }
            x.set(i, col, sum / l.get(i, i));
        }
    }
    // Back substitution: L^T x = y.
    for col in 0..m {
        for i in (0..n).rev() {
            let mut sum = x.get(i, col);
            for k in i + 1..n {
                sum -= l.get(k, i) * x.get(k, col);
            }
            x.set(i, col, sum / l.get(i, i));
        }
    }
    x
}

/// Solve a X = b for symmetric positive-definite a via Cholesky. On a
/// failed factorization, retries once with diagonal jitter
/// 1e-8 * tr(a)/n and marks the solution as regularized.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<SpdSolution> {
    if a.rows != a.cols {
        return Err(Error::Shape {
            op: "solve_spd",
            detail: format!("a is {}x{}", a.rows, a.cols),
        });
    }
    if b.rows != a.rows {
        return Err(Error::Shape {
            op: "solve_spd",
            detail: format!("a is {}x{} but b has {} rows", a.rows, a.cols, b.rows),
        });
    }
    let scale = a.max_abs().max(1.0);
    for i in 0..a.rows {
        for j in 0..i {
            if (a.get(i, j) - a.get(j, i)).abs() > 1e-9 * scale {
                return Err(Error::Shape {
                    op: "solve_spd",
                    detail: format!("asymmetry at ({i},{j})"),
                });
            }
        }
    }
    match cholesky(a) {
        Ok(l) => Ok(SpdSolution {
            x: cholesky_solve(&l, b),
            regularized: false,
        }),
        Err(_) => {
            let n = a.rows;
            let trace: f64 = (0..n).map(|i| a.get(i, i)).sum();
            let jitter = 1e-8 * trace / n as f64;
            let mut aj = a.clone();
            for i in 0..n {
                let v = aj.get(i, i) + jitter;
                aj.set(i, i, v);
            }
            match cholesky(&aj) {
                Ok(l) => Ok(SpdSolution {
                    x: cholesky_solve(&l, b),
                    regularized: true,
                }),
                Err(pivot) => Err(Error::Singular {
                    pivot,
                    advise_ridge: false,
                }),
            }
        }
    }
}

/// Sample proportions from a symmetric Dirichlet(alpha) in k dimensions
/// by normalizing independent Gamma(alpha, 1) draws.
pub fn dirichlet(alpha: f64, k: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::Parameter(format!(
            "dirichlet concentration must be positive, got {alpha}"
        )));
    }
    if k == 0 {
        return Err(Error::Parameter("dirichlet needs k >= 1".into()));
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::Parameter(format!("gamma({alpha}, 1): {e}")))?;
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let mut total: f64 = draws.iter().sum();
    if total <= 0.0 {
        // Extremely small alpha can underflow every draw; fall back to a
        // point mass on a uniformly chosen coordinate.
        use rand::Rng as _;
        let idx = rng.gen_range(0..k);
        draws = vec![0.0; k];
        draws[idx] = 1.0;
        total = 1.0;
    }
    for d in &mut draws {
        *d /= total;
    }
    Ok(draws)
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}
