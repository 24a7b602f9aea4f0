//! Closed-form reference values used to check the numerical homogenizers.

use crate::rotlab::{Mat3, Mat6};

/// Exact stiffness of a two-phase laminate with interface normal `e3`.
///
/// Works on the normal/in-plane partition of each stiffness: normal components
/// `(33, 23, 13)` are continuous in stress, in-plane ones `(11, 22, 12)` in
/// strain. Valid for arbitrary anisotropy.
pub fn laminate_normal_z(c1: &Mat6, c2: &Mat6, f1: f64) -> Mat6 {
    const NRM: [usize; 3] = [2, 3, 4];
    const INP: [usize; 3] = [0, 1, 5];
    let split = |c: &Mat6| {
        let mut ann = Mat3::zeros();
        let mut ani = Mat3::zeros();
        let mut aii = Mat3::zeros();
        for a in 0..3 {
            for b in 0..3 {
                ann[(a, b)] = c[(NRM[a], NRM[b])];
                ani[(a, b)] = c[(NRM[a], INP[b])];
                aii[(a, b)] = c[(INP[a], INP[b])];
            }
        }
        (ann, ani, aii)
    };
    let f2 = 1.0 - f1;
    let (n1, m1, i1) = split(c1);
    let (n2, m2, i2) = split(c2);
    let n1i = n1.try_inverse().expect("normal block of phase 1 is singular");
    let n2i = n2.try_inverse().expect("normal block of phase 2 is singular");
    let nn = (f1 * n1i + f2 * n2i).try_inverse().expect("averaged normal compliance is singular");
    let coupling = f1 * n1i * m1 + f2 * n2i * m2;
    let cni = nn * coupling;
    let cii = f1 * (i1 - m1.transpose() * n1i * m1)
        + f2 * (i2 - m2.transpose() * n2i * m2)
        + coupling.transpose() * nn * coupling;
    let mut out = Mat6::zeros();
    for a in 0..3 {
        for b in 0..3 {
            out[(NRM[a], NRM[b])] = nn[(a, b)];
            out[(NRM[a], INP[b])] = cni[(a, b)];
            out[(INP[b], NRM[a])] = cni[(a, b)];
            out[(INP[a], INP[b])] = cii[(a, b)];
        }
    }
    out
}

/// Volume-weighted arithmetic mean (uniform strain bound).
pub fn voigt_bound<'a>(parts: impl IntoIterator<Item = (&'a Mat6, f64)>) -> Mat6 {
    let mut sum = Mat6::zeros();
    let mut w = 0.0;
    for (c, f) in parts {
        sum += f * c;
        w += f;
    }
    sum / w
}

/// Volume-weighted harmonic mean (uniform stress bound).
pub fn reuss_bound<'a>(parts: impl IntoIterator<Item = (&'a Mat6, f64)>) -> Mat6 {
    let mut sum = Mat6::zeros();
    let mut w = 0.0;
    for (c, f) in parts {
        sum += f * c.try_inverse().expect("phase stiffness must be invertible");
        w += f;
    }
    (sum / w).try_inverse().expect("averaged compliance must be invertible")
}

/// True when `lower <= c <= upper` in the Loewner order, up to `tol * |upper|`.
pub fn within_bounds(c: &Mat6, lower: &Mat6, upper: &Mat6, tol: f64) -> bool {
    let scale = upper.norm();
    let sym = |m: Mat6| 0.5 * (m + m.transpose());
    sym(upper - c).symmetric_eigenvalues().min() >= -tol * scale
        && sym(c - lower).symmetric_eigenvalues().min() >= -tol * scale
}
