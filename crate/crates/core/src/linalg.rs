//! Small dense linear-algebra helpers: symmetric eigendecomposition for the
//! low-dimensional hyperparameter exploration, a dense Cholesky for the tiny
//! constraint systems, and a natural cubic spline interpolant.

use crate::error::{Error, Result};

/// Dense symmetric matrix stored row-major, used only at small dimensions
/// (hyperparameter Hessians, constraint Gram matrices, block structures).
#[derive(Debug, Clone)]
pub struct DenseSym {
    pub n: usize,
    pub data: Vec<f64>, // row-major n*n
}

impl DenseSym {
    pub fn zeros(n: usize) -> Self {
        DenseSym { n, data: vec![0.0; n * n] }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// columns (`vectors[j]` is the eigenvector for `values[j]`). Adequate for the
/// dimensions this crate needs (hyperparameter space and test-sized graphs).
pub fn jacobi_eigen(m: &DenseSym) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = m.n;
    let mut a = m.data.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let idx = |i: usize, j: usize| i * n + j;

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[idx(i, j)] * a[idx(i, j)];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&a)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[idx(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[idx(p, p)];
                let aqq = a[idx(q, q)];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // rotate rows/cols p and q
                for k in 0..n {
                    let akp = a[idx(k, p)];
                    let akq = a[idx(k, q)];
                    a[idx(k, p)] = c * akp - s * akq;
                    a[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[idx(p, k)];
                    let aqk = a[idx(q, k)];
                    a[idx(p, k)] = c * apk - s * aqk;
                    a[idx(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[idx(k, p)];
                    let vkq = v[idx(k, q)];
                    v[idx(k, p)] = c * vkp - s * vkq;
                    v[idx(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut pairs: Vec<(f64, usize)> = (0..n).map(|j| (a[idx(j, j)], j)).collect();
    pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let vectors: Vec<Vec<f64>> = pairs
        .iter()
        .map(|&(_, j)| (0..n).map(|i| v[idx(i, j)]).collect())
        .collect();
    (values, vectors)
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dense Cholesky factor of a small SPD matrix, row-major lower triangle.
#[derive(Debug, Clone)]
pub struct DenseChol {
    n: usize,
    l: Vec<f64>, // row-major n*n, lower triangle populated
    log_det: f64,
}

impl DenseChol {
    pub fn new(m: &DenseSym) -> Result<Self> {
        let n = m.n;
        let mut l = vec![0.0; n * n];
        let mut log_det = 0.0;
        for i in 0..n {
            for j in 0..=i {
                let mut s = m.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite { pivot: i });
                    }
                    l[i * n + i] = s.sqrt();
                    log_det += s.ln();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(DenseChol { n, l, log_det })
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[i * n + k] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        x
    }
}

/// Cubic spline through strictly increasing knots with not-a-knot end
/// conditions, so quadratic and cubic data are reproduced exactly. Points
/// outside the knot range evaluate the boundary segment's cubic.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    second: Vec<f64>,
}

impl CubicSpline {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
        }
        if x.len() < 2 {
            return Err(Error::Domain("spline needs at least 2 knots".into()));
        }
        for w in x.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Domain("spline knots must be strictly increasing".into()));
            }
        }
        let n = x.len();
        let mut second = vec![0.0; n];
        if n == 3 {
            // the unique parabola through three points
            let h0 = x[1] - x[0];
            let h1 = x[2] - x[1];
            let d0 = (y[1] - y[0]) / h0;
            let d1 = (y[2] - y[1]) / h1;
            let m = 2.0 * (d1 - d0) / (h0 + h1);
            second = vec![m; 3];
        } else if n > 3 {
            // dense solve of the not-a-knot system; knot counts here are small
            let mut a = vec![0.0; n * n];
            let mut rhs = vec![0.0; n];
            let h = |i: usize| x[i + 1] - x[i];
            let d = |i: usize| (y[i + 1] - y[i]) / h(i);
            // third-derivative continuity at the second and second-to-last knots
            a[0] = h(1);
            a[1] = -(h(0) + h(1));
            a[2] = h(0);
            let r = n - 1;
            a[r * n + r - 2] = h(r - 1);
            a[r * n + r - 1] = -(h(r - 2) + h(r - 1));
            a[r * n + r] = h(r - 2);
            for i in 1..n - 1 {
                a[i * n + i - 1] = h(i - 1);
                a[i * n + i] = 2.0 * (h(i - 1) + h(i));
                a[i * n + i + 1] = h(i);
                rhs[i] = 6.0 * (d(i) - d(i - 1));
            }
            second = solve_dense(n, &mut a, &mut rhs)?;
        }
        Ok(CubicSpline { x: x.to_vec(), y: y.to_vec(), second })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        // clamp to the boundary segment; its cubic extends beyond the range
        let mut lo = 0;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.x[mid] > t {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let h = self.x[hi] - self.x[lo];
        let a = (self.x[hi] - t) / h;
        let b = (t - self.x[lo]) / h;
        a * self.y[lo]
            + b * self.y[hi]
            + ((a.powi(3) - a) * self.second[lo] + (b.powi(3) - b) * self.second[hi]) * h * h / 6.0
    }
}

fn solve_dense(n: usize, a: &mut [f64], rhs: &mut [f64]) -> Result<Vec<f64>> {
    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if a[piv * n + col].abs() < 1e-300 {
            return Err(Error::Domain("singular spline system".into()));
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            rhs.swap(col, piv);
        }
        let dv = a[col * n + col];
        for r in (col + 1)..n {
            let f = a[r * n + col] / dv;
            if f != 0.0 {
                for c in col..n {
                    a[r * n + c] -= f * a[col * n + c];
                }
                rhs[r] -= f * rhs[col];
            }
        }
    }
    let mut out = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = rhs[r];
        for c in (r + 1)..n {
            s -= a[r * n + c] * out[c];
        }
        out[r] = s / a[r * n + r];
    }
    Ok(out)
}

/// log(sum(exp(v))) evaluated stably.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
