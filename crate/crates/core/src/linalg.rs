//! Dense symmetric eigensolvers and small matrix helpers.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Scalar>(row: ArrayView1<'_, S>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn frobenius_sq<S: Scalar>(m: ArrayView2<'_, S>) -> S {
    m.iter().map(|&v| v * v).sum()
}

/// Top eigenvalue of a symmetric positive semidefinite operator given as a
/// matrix-vector product, by power iteration on the Rayleigh quotient.
#[derive(Clone, Copy, Debug)]
pub struct PowerIteration {
    pub rel_tol: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        PowerIteration {
            rel_tol: 1e-6,
            max_iters: 10_000,
            seed: 0,
        }
    }
}

impl PowerIteration {
    pub fn run<S, F>(&self, dim: usize, apply: F) -> S
    where
        S: Scalar,
        F: Fn(&Array1<S>) -> Array1<S>,
    {
        if dim == 0 {
            return S::zero();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut v: Array1<S> = (0..dim)
            .map(|_| S::of(StandardNormal.sample(&mut rng)))
            .collect();
        let norm = v.dot(&v).sqrt();
        v /= norm;
        let tol = S::of(self.rel_tol);
        let mut lambda = S::zero();
        for _ in 0..self.max_iters {
            let w = apply(&v);
            let next = v.dot(&w);
            let wn = w.dot(&w).sqrt();
            if wn == S::zero() {
                return S::zero();
            }
            v = w / wn;
            if (next - lambda).abs() <= tol * next.abs() {
                return next;
            }
            lambda = next;
        }
        log::warn!("power iteration hit {} iterations without converging", self.max_iters);
        lambda
    }
}

/// Largest eigenvalue of `XᵀX` (equivalently of `XXᵀ`), iterating in the
/// smaller of the two dimensions.
pub fn top_gram_eigenvalue<S: Scalar>(x: ArrayView2<'_, S>, power: &PowerIteration) -> S {
    let (n, m) = x.dim();
    if n <= m {
        power.run(n, |v| x.dot(&x.t().dot(v)))
    } else {
        power.run(m, |v| x.t().dot(&x.dot(v)))
    }
}

/// Eigendecomposition of a real symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymmetricEigen<S> {
    /// Descending.
    pub eigenvalues: Array1<S>,
    /// Column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: Array2<S>,
}

impl<S: Scalar> SymmetricEigen<S> {
    /// Householder tridiagonalisation followed by implicit QL iterations.
    pub fn new(a: ArrayView2<'_, S>) -> Result<Self> {
        let (n, n2) = a.dim();
        if n != n2 {
            return Err(Error::mismatch("symmetric eigensolver", "square matrix", format!("{n}x{n2}")));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("matrix has non-finite entries"));
        }
        if n == 0 {
            return Ok(SymmetricEigen {
                eigenvalues: Array1::zeros(0),
                eigenvectors: Array2::zeros((0, 0)),
            });
        }
        let mut v = a.to_owned();
        let mut d = vec![S::zero(); n];
        let mut e = vec![S::zero(); n];
        tridiagonalize(&mut v, &mut d, &mut e);
        ql_implicit(&mut v, &mut d, &mut e)?;

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).expect("finite eigenvalues"));
        let eigenvalues = order.iter().map(|&i| d[i]).collect();
        let mut eigenvectors = Array2::zeros((n, n));
        for (col, &i) in order.iter().enumerate() {
            eigenvectors.column_mut(col).assign(&v.column(i));
        }
        Ok(SymmetricEigen {
            eigenvalues,
            eigenvectors,
        })
    }
}

// Householder reduction to tridiagonal form (after the EISPACK tred2 routine).
// On return `v` holds the accumulated orthogonal transform, `d` the diagonal
// and `e[1..]` the sub-diagonal.
fn tridiagonalize<S: Scalar>(v: &mut Array2<S>, d: &mut [S], e: &mut [S]) {
    let n = d.len();
    let zero = S::zero();
    for j in 0..n {
        d[j] = v[[n - 1, j]];
    }
    for i in (1..n).rev() {
        let mut scale = zero;
        let mut h = zero;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == zero {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[[i - 1, j]];
                v[[i, j]] = zero;
                v[[j, i]] = zero;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > zero {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = zero;
            }
            for j in 0..i {
                f = d[j];
                v[[j, i]] = f;
                g = e[j] + v[[j, j]] * f;
                for k in j + 1..i {
                    g += v[[k, j]] * d[k];
                    e[k] += v[[k, j]] * f;
                }
                e[j] = g;
            }
            f = zero;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    let upd = f * e[k] + g * d[k];
                    v[[k, j]] -= upd;
                }
                d[j] = v[[i - 1, j]];
                v[[i, j]] = zero;
            }
        }
        d[i] = h;
    }

    for i in 0..n - 1 {
        v[[n - 1, i]] = v[[i, i]];
        v[[i, i]] = S::one();
        let h = d[i + 1];
        if h != zero {
            for k in 0..=i {
                d[k] = v[[k, i + 1]] / h;
            }
            for j in 0..=i {
                let mut g = zero;
                for k in 0..=i {
                    g += v[[k, i + 1]] * v[[k, j]];
                }
                for k in 0..=i {
                    let upd = g * d[k];
                    v[[k, j]] -= upd;
                }
            }
        }
        for k in 0..=i {
            v[[k, i + 1]] = zero;
        }
    }
    for j in 0..n {
        d[j] = v[[n - 1, j]];
        v[[n - 1, j]] = zero;
    }
    v[[n - 1, n - 1]] = S::one();
    e[0] = zero;
}

// Implicit QL iterations on the symmetric tridiagonal matrix (after tql2).
fn ql_implicit<S: Scalar>(v: &mut Array2<S>, d: &mut [S], e: &mut [S]) -> Result<()> {
    let n = d.len();
    let zero = S::zero();
    let one = S::one();
    let two = S::of(2.0);
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = zero;

    let mut f = zero;
    let mut tst1 = zero;
    let eps = S::epsilon();
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut sweeps = 0;
            loop {
                sweeps += 1;
                if sweeps > 60 {
                    return Err(Error::invalid("QL iteration failed to converge"));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (two * e[l]);
                let mut r = p.hypot(one);
                if p < zero {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = one;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = zero;
                let mut s2 = zero;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        let vk1 = v[[k, i + 1]];
                        let vk = v[[k, i]];
                        v[[k, i + 1]] = s * vk + c * vk1;
                        v[[k, i]] = c * vk - s * vk1;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = zero;
    }
    Ok(())
}
