//! Dense least-squares solvers behind the stage regressions.
//!
//! The exact (unregularized) path uses Householder QR with column pivoting,
//! stopped at the numerical rank, followed by a complete orthogonal
//! decomposition so rank-deficient systems get the minimum-norm minimizer.
//! Early stopping matters: stage features routinely span a subspace far
//! smaller than their ambient dimension, and a full factorization would do
//! orders of magnitude more work.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Ridge policy for a regression solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    /// No regularization; rank-deficient systems get the min-norm solution
    /// where allowed and an error where the closed form demands invertibility.
    Exact,
    /// Absolute Tikhonov weight added to the Gram diagonal.
    Lambda(f64),
    /// Weight scaled by the Gram: `factor * trace(G) / dim(G)`.
    TraceScaled(f64),
}

impl Ridge {
    /// Model files store one scalar: 0 means exact, anything else is the
    /// trace-scaled factor.
    pub fn from_model_scalar(v: f64) -> Ridge {
        if v == 0.0 {
            Ridge::Exact
        } else {
            Ridge::TraceScaled(v)
        }
    }

    pub fn model_scalar(&self) -> f64 {
        match self {
            Ridge::Exact => 0.0,
            Ridge::Lambda(v) | Ridge::TraceScaled(v) => *v,
        }
    }
}

/* ---------------------------------------------------------------- */

/// Minimum-norm solution of `argmin_X ||A X - B||_F` for `A` of size `N x d`.
///
/// Returns the `d x rhs` solution and the detected numerical rank. `rel_tol`
/// bounds accepted pivot column norms relative to the largest initial column
/// norm.
pub fn lstsq_min_norm(a: &DMatrix<f64>, b: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    let n = a.nrows();
    let d = a.ncols();
    let rhs = b.ncols();
    debug_assert_eq!(b.nrows(), n);

    let mut work = a.clone();
    let mut c = b.clone();
    let mut perm: Vec<usize> = (0..d).collect();

    // Squared column norms, downdated after every reflector. A stale value
    // close to cancellation is recomputed from scratch.
    let mut norms2: Vec<f64> = (0..d).map(|j| work.column(j).norm_squared()).collect();
    let mut norms2_ref = norms2.clone();
    let max0 = norms2.iter().cloned().fold(0.0f64, f64::max);
    let tol2 = max0 * rel_tol * rel_tol;

    let kmax = n.min(d);
    let mut rank = 0;
    for k in 0..kmax {
        // Pivot: column with the largest remaining norm.
        let (mut jbest, mut best) = (k, -1.0f64);
        for (j, &n2) in norms2.iter().enumerate().skip(k) {
            if n2 > best {
                best = n2;
                jbest = j;
            }
        }
        if best <= tol2 || best <= 0.0 {
            break;
        }
        if jbest != k {
            work.swap_columns(k, jbest);
            perm.swap(k, jbest);
            norms2.swap(k, jbest);
            norms2_ref.swap(k, jbest);
        }

        // Householder vector for work[k.., k].
        let tail = n - k;
        let mut v = Vec::with_capacity(tail);
        for i in k..n {
            v.push(work[(i, k)]);
        }
        let xnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if xnorm <= 0.0 {
            break;
        }
        let alpha = if v[0] >= 0.0 { -xnorm } else { xnorm };
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 <= 0.0 {
            break;
        }
        let beta = 2.0 / vnorm2;

        work[(k, k)] = alpha;
        for i in k + 1..n {
            work[(i, k)] = 0.0;
        }
        // Reflect the trailing columns and the right-hand side.
        for j in k + 1..d {
            let mut dot = 0.0;
            for i in 0..tail {
                dot += v[i] * work[(k + i, j)];
            }
            let s = beta * dot;
            for i in 0..tail {
                work[(k + i, j)] -= s * v[i];
            }
        }
        for j in 0..rhs {
            let mut dot = 0.0;
            for i in 0..tail {
                dot += v[i] * c[(k + i, j)];
            }
            let s = beta * dot;
            for i in 0..tail {
                c[(k + i, j)] -= s * v[i];
            }
        }
        // Downdate the remaining squared norms.
        for j in k + 1..d {
            let t = work[(k, j)];
            norms2[j] -= t * t;
            if norms2[j] < 1e-12 * norms2_ref[j] || norms2[j] < 0.0 {
                let mut fresh = 0.0;
                for i in k + 1..n {
                    fresh += work[(i, j)] * work[(i, j)];
                }
                norms2[j] = fresh;
                norms2_ref[j] = fresh;
            }
        }
        rank += 1;
    }

    if rank == 0 {
        return (DMatrix::zeros(d, rhs), 0);
    }

    // Complete orthogonal decomposition for the min-norm solution:
    // [R11 R12] = L * Q2 via a QR of the transpose.
    let rtop = work.view((0, 0), (rank, d)).transpose(); // d x rank
    let qr = rtop.qr();
    let qthin = qr.q(); // d x rank, orthonormal columns
    let rtri = qr.r(); // rank x rank upper triangular; L = rtri^T

    // y = L^{-1} c1, forward substitution on rtri^T.
    let mut y = DMatrix::zeros(rank, rhs);
    for j in 0..rhs {
        for i in 0..rank {
            let mut acc = c[(i, j)];
            for t in 0..i {
                acc -= rtri[(t, i)] * y[(t, j)];
            }
            y[(i, j)] = acc / rtri[(i, i)];
        }
    }
    let z = &qthin * &y; // d x rhs, in pivoted order

    let mut x = DMatrix::zeros(d, rhs);
    for (pos, &orig) in perm.iter().enumerate() {
        for j in 0..rhs {
            x[(orig, j)] = z[(pos, j)];
        }
    }
    (x, rank)
}

/// Ridge solve of `argmin_X ||A X - B||_F^2 + lambda ||X||_F^2` through the
/// normal equations, `lambda > 0`.
pub fn ridge_normal_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let d = a.ncols();
    let mut gram = a.transpose() * a;
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let atb = a.transpose() * b;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::SingularGram("ridge normal equations not positive definite".into()))?;
    Ok(chol.solve(&atb))
}

/// Resolves a ridge policy against a Gram matrix trace.
pub(crate) fn resolve_lambda(ridge: Ridge, gram_trace: f64, dim: usize) -> f64 {
    match ridge {
        Ridge::Exact => 0.0,
        Ridge::Lambda(v) => v,
        Ridge::TraceScaled(f) => f * gram_trace / dim.max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn full_rank_matches_svd_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 40, 12);
            let b = random_matrix(&mut rng, 40, 3);
            let (x, rank) = lstsq_min_norm(&a, &b, 1e-12);
            assert_eq!(rank, 12);
            let oracle = a.clone().svd(true, true).solve(&b, 1e-13).unwrap();
            assert!((x - oracle).amax() < 1e-9);
        }
    }

    #[test]
    fn rank_deficient_matches_pseudo_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            // a has rank 5 by construction.
            let left = random_matrix(&mut rng, 30, 5);
            let right = random_matrix(&mut rng, 5, 20);
            let a = &left * &right;
            let b = random_matrix(&mut rng, 30, 2);
            let (x, rank) = lstsq_min_norm(&a, &b, 1e-10);
            assert_eq!(rank, 5);
            let pinv = a.clone().svd(true, true).pseudo_inverse(1e-10).unwrap();
            let oracle = pinv * &b;
            assert!((&x - &oracle).amax() < 1e-8, "min-norm mismatch");
            // Residual optimality: no better fit exists in the row space.
            let r_min = (&a * &oracle - &b).norm();
            let r_got = (&a * &x - &b).norm();
            assert!((r_got - r_min).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_matrix_gives_zero_solution() {
        let a = DMatrix::zeros(10, 4);
        let b = DMatrix::from_element(10, 2, 3.0);
        let (x, rank) = lstsq_min_norm(&a, &b, 1e-12);
        assert_eq!(rank, 0);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ridge_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let a = random_matrix(&mut rng, 25, 8);
        let b = random_matrix(&mut rng, 25, 2);
        let lambda = 0.37;
        let x = ridge_normal_solve(&a, &b, lambda).unwrap();
        // Oracle: explicit inverse.
        let mut gram = a.transpose() * &a;
        for i in 0..8 {
            gram[(i, i)] += lambda;
        }
        let oracle = gram.try_inverse().unwrap() * a.transpose() * &b;
        assert!((x - oracle).amax() < 1e-10);
    }

    #[test]
    fn interpolates_consistent_underdetermined_systems() {
        // Fewer samples than unknowns, consistent data: residual must vanish.
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let a = random_matrix(&mut rng, 6, 50);
        let truth = random_matrix(&mut rng, 50, 1);
        let b = &a * &truth;
        let (x, rank) = lstsq_min_norm(&a, &b, 1e-12);
        assert_eq!(rank, 6);
        assert!((&a * &x - &b).amax() < 1e-10);
    }
}
