#![allow(dead_code)]

use nalgebra::DMatrix;
use r2dn_core::{ExplicitLti, LmiKind, Matrix};

pub fn na(m: &Matrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

pub fn sym_eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (f64::INFINITY, f64::NEG_INFINITY);
    }
    let s = (m + m.transpose()) * 0.5;
    let ev = s.symmetric_eigenvalues();
    (ev.min(), ev.max())
}

/// Largest eigenvalue of the one-step dissipation form
/// `[A B]ᵀ W [A B] − diag(W, 0) − supply` with `W = Eᵀ 𝒫⁻¹ E`.
///
/// Nonpositive means every increment pair satisfies
/// `V(Δx⁺) − V(Δx) ≤ supply(Δw, Δu, Δv, Δy)`.
pub fn dissipation_form_max_eig(lti: &ExplicitLti<f64>, kind: LmiKind) -> f64 {
    let a = na(&lti.a);
    let n = a.nrows();
    let e = na(&lti.e);
    let p = na(&lti.p);
    let w = e.transpose() * p.clone().lu().solve(&e).expect("P invertible");
    let (b, c, d, qbar, rbar) = match kind {
        LmiKind::Contraction => {
            let q = lti.c1.rows();
            let l = lti.b1.cols();
            (
                na(&lti.b1),
                na(&lti.c1),
                DMatrix::zeros(q, l),
                -DMatrix::identity(q, q),
                DMatrix::identity(l, l),
            )
        }
        LmiKind::Lipschitz { gamma } => {
            let (q, l, m, pp) = (lti.c1.rows(), lti.b1.cols(), lti.b2.cols(), lti.c2.rows());
            let mut b = DMatrix::zeros(n, l + m);
            b.view_mut((0, 0), (n, l)).copy_from(&na(&lti.b1));
            b.view_mut((0, l), (n, m)).copy_from(&na(&lti.b2));
            let mut c = DMatrix::zeros(q + pp, n);
            c.view_mut((0, 0), (q, n)).copy_from(&na(&lti.c1));
            c.view_mut((q, 0), (pp, n)).copy_from(&na(&lti.c2));
            let mut d = DMatrix::zeros(q + pp, l + m);
            d.view_mut((0, l), (q, m)).copy_from(&na(&lti.d12));
            d.view_mut((q, 0), (pp, l)).copy_from(&na(&lti.d21));
            d.view_mut((q, l), (pp, m)).copy_from(&na(&lti.d22));
            let mut qb = DMatrix::zeros(q + pp, q + pp);
            let mut rb = DMatrix::zeros(l + m, l + m);
            for i in 0..q {
                qb[(i, i)] = -1.0;
            }
            for i in q..q + pp {
                qb[(i, i)] = -1.0 / gamma;
            }
            for i in 0..l {
                rb[(i, i)] = 1.0;
            }
            for i in l..l + m {
                rb[(i, i)] = gamma;
            }
            (b, c, d, qb, rb)
        }
    };
    let k = b.ncols();
    let mut ab = DMatrix::zeros(n, n + k);
    ab.view_mut((0, 0), (n, n)).copy_from(&a);
    ab.view_mut((0, n), (n, k)).copy_from(&b);
    let mut stor = DMatrix::zeros(n + k, n + k);
    stor.view_mut((0, 0), (n, n)).copy_from(&w);
    let mut cd = DMatrix::zeros(c.nrows(), n + k);
    cd.view_mut((0, 0), (c.nrows(), n)).copy_from(&c);
    cd.view_mut((0, n), (d.nrows(), k)).copy_from(&d);
    let mut sel = DMatrix::<f64>::zeros(k, n + k);
    sel.view_mut((0, n), (k, k)).copy_from(&DMatrix::identity(k, k));
    let supply = cd.transpose() * qbar * &cd + sel.transpose() * rbar * &sel;
    let phi = ab.transpose() * w * ab - stor - supply;
    sym_eig_extremes(&phi).1
}

/// `max |MᵀM − I|` or `max |MMᵀ − I|`, whichever Gram matrix is square of the smaller side.
pub fn orthogonality_error(m: &Matrix<f64>) -> f64 {
    let a = na(m);
    let g = if a.nrows() >= a.ncols() {
        a.transpose() * &a
    } else {
        &a * a.transpose()
    };
    let k = g.nrows();
    (g - DMatrix::identity(k, k)).abs().max()
}

/// Central finite-difference check of `grad` against `f`, relative to `max(1, |grad|)`.
pub fn max_fd_error(theta: &[f64], grad: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut th = theta.to_vec();
    for i in 0..theta.len() {
        th[i] = theta[i] + h;
        let fp = f(&th);
        th[i] = theta[i] - h;
        let fm = f(&th);
        th[i] = theta[i];
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(1.0));
    }
    worst
}

fn tanh_phi(depth: usize, width: usize) -> r2dn_core::PhiConfig {
    r2dn_core::PhiConfig {
        depth,
        width,
        activation: r2dn_core::Activation::Tanh,
    }
}

/// Five smooth models with at most 200 parameters, one per construction path.
pub fn small_models() -> Vec<r2dn_core::ModelConfig> {
    use r2dn_core::{Activation, R2dnConfig, RenConfig};
    let mut ren = RenConfig::new(2, 1, 1, 4);
    ren.activation = Activation::Tanh;
    let mut low = R2dnConfig::new(3, 1, 1, 2, 2, LmiKind::Contraction);
    low.phi = tanh_phi(1, 3);
    low.low_rank = Some(2);
    let mut c = R2dnConfig::new(2, 1, 1, 3, 2, LmiKind::Contraction);
    c.phi = tanh_phi(2, 3);
    let mut l1 = R2dnConfig::new(2, 2, 1, 2, 2, LmiKind::Lipschitz { gamma: 2.0 });
    l1.phi = tanh_phi(1, 4);
    let mut l2 = R2dnConfig::new(1, 1, 2, 2, 3, LmiKind::Lipschitz { gamma: 0.5 });
    l2.phi = tanh_phi(1, 3);
    vec![c.into(), l1.into(), l2.into(), low.into(), ren.into()]
}
