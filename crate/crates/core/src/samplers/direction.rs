//! The regularized Stein direction
//! `φ(x) = (1/n) Σ_j [k(x_j, x) s(x_j, σ) + β ∇_{x_j} k(x_j, x)]`.

use std::cell::RefCell;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};

use crate::distributions::ParticleSet;
use crate::error::{check_dim, Error, Result};
use crate::kernels::{ConditionedKernel, KernelSpace};

use super::ScoreSource;

/// Direction at particle `at`, evaluated pair by pair.
pub fn stein_direction(
    particles: &ParticleSet,
    k: &ConditionedKernel,
    s: &ScoreSource,
    sigma: f64,
    beta: f64,
    at: usize,
) -> Result<Vec<f64>> {
    if at >= particles.len() {
        return Err(Error::InvalidParameter(format!(
            "particle index {at} out of range for {} particles",
            particles.len()
        )));
    }
    let scores = s.scores(particles, sigma)?;
    let x = particles.row(at);
    let mut phi = vec![0.0; particles.dim()];
    for (xj, sj) in particles.rows().zip(scores.rows()) {
        let kv = k.eval(xj, x)?;
        let g = k.grad_x(xj, x)?;
        for ((p, s), g) in phi.iter_mut().zip(sj.iter()).zip(&g) {
            *p += kv * s + beta * g;
        }
    }
    let n = particles.len() as f64;
    phi.iter_mut().for_each(|p| *p /= n);
    Ok(phi)
}

thread_local! {
    // Two n x n buffers reused across steps; reallocating them every step costs more than the kernel math at small d.
    static SCRATCH: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

/// Fills `kmat` with `f(r²)` and `gmat` with `2 f'(r²)` for all pairs, from the upper triangle so both are exactly symmetric.
fn radial_matrices(k: &ConditionedKernel, u: &Array2<f64>, kmat: &mut ArrayViewMut2<'_, f64>, gmat: &mut ArrayViewMut2<'_, f64>) {
    let n = u.nrows();
    let sq: Vec<f64> = u.rows().into_iter().map(|r| r.dot(&r)).collect();
    general_mat_mul(1.0, u, &u.t(), 0.0, kmat);
    let (f0, d0) = k.radial_value_d1(0.0);
    let ks = kmat.as_slice_mut().expect("standard layout");
    let gs = gmat.as_slice_mut().expect("standard layout");
    for i in 0..n {
        for j in i + 1..n {
            let r2 = (sq[i] + sq[j] - 2.0 * ks[i * n + j]).max(0.0);
            let (f, d1) = k.radial_value_d1(r2);
            ks[i * n + j] = f;
            gs[i * n + j] = 2.0 * d1;
        }
        ks[i * n + i] = f0;
        gs[i * n + i] = 2.0 * d0;
    }
    for i in 0..n {
        for j in 0..i {
            ks[i * n + j] = ks[j * n + i];
            gs[i * n + j] = gs[j * n + i];
        }
    }
}

/// Directions for every particle at once, given precomputed scores (`n x d`).
pub fn stein_directions(
    particles: &ParticleSet,
    k: &ConditionedKernel,
    scores: &Array2<f64>,
    beta: f64,
) -> Result<Array2<f64>> {
    let x = particles.as_array();
    check_dim(particles.len(), scores.nrows())?;
    check_dim(particles.dim(), scores.ncols())?;
    let n = particles.len();
    let u = k.embed_batch(x);
    SCRATCH.with(|scratch| {
        let (kbuf, gbuf) = &mut *scratch.borrow_mut();
        kbuf.resize(n * n, 0.0);
        gbuf.resize(n * n, 0.0);
        let mut kmat = ArrayViewMut2::from_shape((n, n), &mut kbuf[..]).expect("n x n");
        let mut gmat = ArrayViewMut2::from_shape((n, n), &mut gbuf[..]).expect("n x n");
        radial_matrices(k, &u, &mut kmat, &mut gmat);
        directions_from(particles, k, &u, kmat.view(), gmat.view(), scores, beta)
    })
}

fn directions_from(
    particles: &ParticleSet,
    k: &ConditionedKernel,
    u: &Array2<f64>,
    kmat: ArrayView2<'_, f64>,
    gmat: ArrayView2<'_, f64>,
    scores: &Array2<f64>,
    beta: f64,
) -> Result<Array2<f64>> {
    let x = particles.as_array();
    let n = particles.len();
    let mut phi = kmat.dot(scores);
    if beta != 0.0 {
        let rowsum = gmat.sum_axis(Axis(1));
        let repulsion = match k.space() {
            KernelSpace::Data => {
                let mut r = gmat.dot(&x);
                for (mut row, (xi, &g)) in r.rows_mut().into_iter().zip(x.rows().into_iter().zip(&rowsum)) {
                    row.scaled_add(-g, &xi);
                }
                r
            }
            KernelSpace::Code => {
                let enc = k.encoder().expect("code-space kernel carries an encoder");
                let d = particles.dim();
                let h = u.ncols();
                let jac = enc.input_jacobians(x, k.sigma());
                // W_j = J_jᵀ u_j
                let mut w = Array2::zeros((n, d));
                for j in 0..n {
                    let jj = jac.row(j).into_shape_with_order((h, d)).expect("h x d");
                    w.row_mut(j).assign(&jj.t().dot(&u.row(j)));
                }
                let mut r = gmat.dot(&w);
                let m = gmat.dot(&jac);
                for i in 0..n {
                    let mi = m.row(i).into_shape_with_order((h, d)).expect("h x d");
                    r.row_mut(i).scaled_add(-1.0, &mi.t().dot(&u.row(i)));
                }
                r
            }
        };
        phi.scaled_add(beta, &repulsion);
    }
    phi /= n as f64;
    Ok(phi)
}
