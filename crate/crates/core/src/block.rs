//! Two-phase interaction block.
//!
//! The children carry strains `e1 = e + f2 B(N) a` and `e2 = e - f1 B(N) a`,
//! where `B(N) a` is the engineering-Voigt form of `sym(a (x) N)`. Traction
//! continuity `B^T (C1 e1 - C2 e2) = 0` fixes the jump vector `a`; condensing it
//! gives
//!
//! ```text
//! C = f1 C1 + f2 C2 - f1 f2 dC B K^-1 B^T dC,   K = B^T (f2 C1 + f1 C2) B,   dC = C1 - C2
//! ```

use crate::error::{Error, Result};
use crate::rotlab::{equilibrium_direction, equilibrium_direction_partials, Mat3, Mat6, Mat63, Stiffness, Vec3};

/// Reciprocal condition number below which the interface system counts as singular.
const MIN_RCOND: f64 = 1e-13;

#[derive(Clone, Copy, Debug)]
pub struct BlockInput {
    pub c1: Stiffness,
    pub c2: Stiffness,
    pub w1: f64,
    pub w2: f64,
    pub theta: f64,
    pub phi: f64,
}

/// Gradients of `<G, C_bar>` for an upstream cotangent `G`.
#[derive(Clone, Copy, Debug)]
pub struct BlockAdjoint {
    pub d_c1: Mat6,
    pub d_c2: Mat6,
    pub d_w1: f64,
    pub d_w2: f64,
    pub d_theta: f64,
    pub d_phi: f64,
}

/// Voigt strain of `sym(a (x) n)` as a linear map of `a`.
pub fn jump_operator(n: &Vec3) -> Mat63 {
    let mut b = Mat63::zeros();
    b[(0, 0)] = n.x;
    b[(1, 1)] = n.y;
    b[(2, 2)] = n.z;
    b[(3, 1)] = n.z;
    b[(3, 2)] = n.y;
    b[(4, 0)] = n.z;
    b[(4, 2)] = n.x;
    b[(5, 0)] = n.y;
    b[(5, 1)] = n.x;
    b
}

/// `d B / d n_m` for `m = 0, 1, 2`.
fn jump_operator_basis() -> [Mat63; 3] {
    [
        jump_operator(&Vec3::x()),
        jump_operator(&Vec3::y()),
        jump_operator(&Vec3::z()),
    ]
}

fn fractions(w1: f64, w2: f64) -> Result<(f64, f64)> {
    let total = w1 + w2;
    if !(w1 >= 0.0 && w2 >= 0.0 && total > 0.0 && total.is_finite()) {
        return Err(Error::Invalid(format!("block weights ({w1}, {w2}) must be nonnegative with positive sum")));
    }
    let f1 = w1 / total;
    Ok((f1, 1.0 - f1))
}

fn invert_interface(k: &Mat3, n: &Vec3) -> Result<Mat3> {
    let sv = k.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(smin > MIN_RCOND * smax) || !cond.is_finite() {
        return Err(Error::SingularInterface {
            normal: [n.x, n.y, n.z],
            cond,
        });
    }
    k.try_inverse().ok_or(Error::SingularInterface {
        normal: [n.x, n.y, n.z],
        cond,
    })
}

struct Condensed {
    f1: f64,
    f2: f64,
    n: Vec3,
    b: Mat63,
    dc: Mat6,
    s: Mat6,
    kinv: Mat3,
    p: Mat6,
    c_bar: Mat6,
}

fn condense(input: &BlockInput) -> Result<Condensed> {
    let (f1, f2) = fractions(input.w1, input.w2)?;
    let n = equilibrium_direction(input.theta, input.phi).0;
    let b = jump_operator(&n);
    let (c1, c2) = (input.c1.0, input.c2.0);
    let dc = c1 - c2;
    let s = f2 * c1 + f1 * c2;
    let k: Mat3 = b.transpose() * s * b;
    let kinv = invert_interface(&k, &n)?;
    let p = b * kinv * b.transpose();
    let c_bar = f1 * c1 + f2 * c2 - (f1 * f2) * (dc * p * dc);
    Ok(Condensed {
        f1,
        f2,
        n,
        b,
        dc,
        s,
        kinv,
        p,
        c_bar,
    })
}

pub fn homogenize_block(input: &BlockInput) -> Result<Stiffness> {
    condense(input).map(|c| Stiffness(c.c_bar))
}

/// Jump vector `a` for a given macroscopic Voigt strain (engineering shears).
pub fn interface_jump(input: &BlockInput, strain: &nalgebra::Vector6<f64>) -> Result<Vec3> {
    let c = condense(input)?;
    Ok(-(c.kinv * (c.b.transpose() * (c.dc * strain))))
}

/// Normal used by the block, for callers that assemble their own systems.
pub fn block_normal(input: &BlockInput) -> Vec3 {
    equilibrium_direction(input.theta, input.phi).0
}

/// Forward pass plus reverse-mode pullback of `upstream`.
pub fn block_forward_adjoint(input: &BlockInput, upstream: &Mat6) -> Result<(Stiffness, BlockAdjoint)> {
    let c = condense(input)?;
    let g = upstream;
    let cc = c.f1 * c.f2;

    // C_bar = Cv - cc * T,   T = dC P dC
    let t = c.dc * c.p * c.dc;
    let g_cv = *g;
    let g_cc = -g.dot(&t);
    let g_t = -cc * g;
    let g_dc_t = g_t * c.dc.transpose() * c.p.transpose() + c.p.transpose() * c.dc.transpose() * g_t;
    let g_p = c.dc.transpose() * g_t * c.dc.transpose();

    // P = B M B^T with M = K^-1
    let m = c.kinv;
    let mut g_b: Mat63 = g_p * c.b * m.transpose() + g_p.transpose() * c.b * m;
    let g_m: Mat3 = c.b.transpose() * g_p * c.b;
    let g_k: Mat3 = -(m.transpose() * g_m * m.transpose());

    // K = B^T S B
    g_b += c.s * c.b * g_k.transpose() + c.s.transpose() * c.b * g_k;
    let g_s: Mat6 = c.b * g_k * c.b.transpose();

    let d_c1 = c.f1 * g_cv + c.f2 * g_s + g_dc_t;
    let d_c2 = c.f2 * g_cv + c.f1 * g_s - g_dc_t;
    let c1c2 = input.c1.0 - input.c2.0;
    let d_f1 = g_cv.dot(&c1c2) - g_s.dot(&c1c2) + g_cc * (c.f2 - c.f1);

    let total = input.w1 + input.w2;
    let d_w1 = d_f1 * input.w2 / (total * total);
    let d_w2 = -d_f1 * input.w1 / (total * total);

    let basis = jump_operator_basis();
    let d_n = Vec3::new(g_b.dot(&basis[0]), g_b.dot(&basis[1]), g_b.dot(&basis[2]));
    let (dn_dt, dn_dp) = equilibrium_direction_partials(input.theta, input.phi);
    debug_assert!((c.n.norm() - 1.0).abs() < 1e-12);

    Ok((
        Stiffness(c.c_bar),
        BlockAdjoint {
            d_c1,
            d_c2,
            d_w1,
            d_w2,
            d_theta: d_n.dot(&dn_dt),
            d_phi: d_n.dot(&dn_dp),
        },
    ))
}

pub fn block_adjoint(input: &BlockInput, upstream: &Mat6) -> Result<BlockAdjoint> {
    block_forward_adjoint(input, upstream).map(|(_, adj)| adj)
}

/// Weighted arithmetic mean of two stiffnesses.
pub fn voigt_mixture(c1: &Mat6, c2: &Mat6, f1: f64) -> Mat6 {
    f1 * c1 + (1.0 - f1) * c2
}

/// Weighted harmonic mean of two stiffnesses.
pub fn reuss_mixture(c1: &Mat6, c2: &Mat6, f1: f64) -> Option<Mat6> {
    let s = f1 * c1.try_inverse()? + (1.0 - f1) * c2.try_inverse()?;
    s.try_inverse()
}
