//! Orientation and stiffness algebra.
//!
//! Conventions used throughout the crate:
//!
//! * A [`Quat`] maps crystal-frame vectors into the sample frame. Crystal
//!   symmetry acts from the right, `q * s`.
//! * [`TaitBryan`] angles are extrinsic X-Y-Z (roll about the sample x axis,
//!   then pitch about y, then yaw about z), i.e. `R = Rz(gamma) Ry(beta) Rx(alpha)`.
//! * Voigt order is `(11, 22, 33, 23, 13, 12)` with engineering shear strains,
//!   so stiffness entries coincide with tensor components `C_ijkl`.

use nalgebra::{Matrix3, Matrix6, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Mat6 = Matrix6<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat63 = SMatrix<f64, 6, 3>;

/// Tensor index pairs of the six Voigt slots.
pub const VOIGT: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)];

/// Voigt slot of the symmetric index pair `(i, j)`.
pub fn voigt_index(i: usize, j: usize) -> usize {
    match (i.min(j), i.max(j)) {
        (0, 0) => 0,
        (1, 1) => 1,
        (2, 2) => 2,
        (1, 2) => 3,
        (0, 2) => 4,
        (0, 1) => 5,
        _ => unreachable!("tensor index out of range"),
    }
}

/// Unit quaternion `(w, x, y, z)`, canonicalized to `w >= 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and canonicalizes the sign. Panics on a zero quaternion.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        assert!(n > 0.0 && n.is_finite(), "quaternion must be nonzero and finite");
        Quat {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
        .canonical()
    }

    pub fn try_from_array(c: [f64; 4]) -> Result<Self> {
        let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Invalid(format!("quaternion {c:?} is not normalizable")));
        }
        Ok(Quat::new(c[0], c[1], c[2], c[3]))
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, s * a.x, s * a.y, s * a.z)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Sign convention: `w >= 0`; for `w == 0` the first nonzero of `(x, y, z)` is positive.
    pub fn canonical(self) -> Self {
        let lead = [self.w, self.x, self.y, self.z]
            .into_iter()
            .find(|v| *v != 0.0)
            .unwrap_or(1.0);
        if lead < 0.0 {
            self.negated()
        } else {
            self
        }
    }

    /// The other member of the double cover. Not canonicalized.
    pub fn negated(self) -> Self {
        Quat {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn conj(self) -> Self {
        Quat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn dot(&self, o: &Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Hamilton product; `R(a * b) = R(a) R(b)`.
    pub fn mul(&self, o: &Quat) -> Quat {
        let (a, b) = (self, o);
        Quat::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn to_matrix(&self) -> Mat3 {
        let Quat { w, x, y, z } = *self;
        Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Shepperd's method; `r` must be a proper rotation.
    pub fn from_matrix(r: &Mat3) -> Quat {
        let tr = r.trace();
        let (w, x, y, z);
        if tr > r[(0, 0)] && tr > r[(1, 1)] && tr > r[(2, 2)] {
            let s = (1.0 + tr).sqrt() * 2.0;
            w = 0.25 * s;
            x = (r[(2, 1)] - r[(1, 2)]) / s;
            y = (r[(0, 2)] - r[(2, 0)]) / s;
            z = (r[(1, 0)] - r[(0, 1)]) / s;
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(2, 1)] - r[(1, 2)]) / s;
            x = 0.25 * s;
            y = (r[(0, 1)] + r[(1, 0)]) / s;
            z = (r[(0, 2)] + r[(2, 0)]) / s;
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(0, 2)] - r[(2, 0)]) / s;
            x = (r[(0, 1)] + r[(1, 0)]) / s;
            y = 0.25 * s;
            z = (r[(1, 2)] + r[(2, 1)]) / s;
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            w = (r[(1, 0)] - r[(0, 1)]) / s;
            x = (r[(0, 2)] + r[(2, 0)]) / s;
            y = (r[(1, 2)] + r[(2, 1)]) / s;
            z = 0.25 * s;
        }
        Quat::new(w, x, y, z)
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.w.abs().clamp(-1.0, 1.0).acos()
    }
}

/// Extrinsic X-Y-Z rotation angles in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaitBryan {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn drot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

impl TaitBryan {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        TaitBryan { alpha, beta, gamma }
    }

    pub fn to_matrix(&self) -> Mat3 {
        rot_z(self.gamma) * rot_y(self.beta) * rot_x(self.alpha)
    }

    /// Partial derivatives of the rotation matrix w.r.t. `(alpha, beta, gamma)`.
    pub fn matrix_partials(&self) -> [Mat3; 3] {
        let (rx, ry, rz) = (rot_x(self.alpha), rot_y(self.beta), rot_z(self.gamma));
        [
            rz * ry * drot_x(self.alpha),
            rz * drot_y(self.beta) * rx,
            drot_z(self.gamma) * ry * rx,
        ]
    }

    pub fn to_quat(&self) -> Quat {
        Quat::from_matrix(&self.to_matrix())
    }

    /// Inverse of [`to_matrix`](Self::to_matrix). At gimbal lock `alpha` is set to zero.
    pub fn from_matrix(r: &Mat3) -> Self {
        let sb = (-r[(2, 0)]).clamp(-1.0, 1.0);
        let beta = sb.asin();
        if (1.0 - sb.abs()) < 1e-12 {
            TaitBryan {
                alpha: 0.0,
                beta,
                gamma: (-r[(0, 1)]).atan2(r[(1, 1)]),
            }
        } else {
            TaitBryan {
                alpha: r[(2, 1)].atan2(r[(2, 2)]),
                beta,
                gamma: r[(1, 0)].atan2(r[(0, 0)]),
            }
        }
    }

    pub fn from_quat(q: &Quat) -> Self {
        Self::from_matrix(&q.to_matrix())
    }
}

/// 6x6 stiffness in Voigt notation (GPa unless stated otherwise).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stiffness(pub Mat6);

impl Stiffness {
    pub fn matrix(&self) -> &Mat6 {
        &self.0
    }

    /// Isotropic stiffness from Lame constants.
    pub fn isotropic(lambda: f64, mu: f64) -> Self {
        let mut c = Mat6::zeros();
        for i in 0..3 {
            for j in 0..3 {
                c[(i, j)] = lambda;
            }
            c[(i, i)] += 2.0 * mu;
            c[(i + 3, i + 3)] = mu;
        }
        Stiffness(c)
    }

    /// Isotropic stiffness from Young's modulus and Poisson's ratio.
    pub fn isotropic_engineering(young: f64, poisson: f64) -> Self {
        let lambda = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson));
        let mu = young / (2.0 * (1.0 + poisson));
        Self::isotropic(lambda, mu)
    }

    pub fn frobenius(&self) -> f64 {
        self.0.norm()
    }

    pub fn asymmetry(&self) -> f64 {
        (self.0 - self.0.transpose()).norm()
    }

    pub fn rotated(&self, q: &Quat) -> Stiffness {
        rotate_stiffness(self, q)
    }

    /// The 21 upper-triangle entries, row-major.
    pub fn upper_triangle(&self) -> [f64; 21] {
        let mut out = [0.0; 21];
        let mut k = 0;
        for i in 0..6 {
            for j in i..6 {
                out[k] = self.0[(i, j)];
                k += 1;
            }
        }
        out
    }

    pub fn from_upper_triangle(v: &[f64; 21]) -> Stiffness {
        let mut c = Mat6::zeros();
        let mut k = 0;
        for i in 0..6 {
            for j in i..6 {
                c[(i, j)] = v[k];
                c[(j, i)] = v[k];
                k += 1;
            }
        }
        Stiffness(c)
    }

    /// Smallest eigenvalue of the symmetric part.
    pub fn min_eigenvalue(&self) -> f64 {
        let sym = 0.5 * (self.0 + self.0.transpose());
        sym.symmetric_eigenvalues().min()
    }
}

/// Cubic single-crystal stiffness.
pub fn cubic_stiffness(c11: f64, c12: f64, c44: f64) -> Result<Stiffness> {
    let mut violations = Vec::new();
    if !(c11.is_finite() && c12.is_finite() && c44.is_finite()) {
        violations.push("constants must be finite".to_string());
    }
    if c11 <= c12.abs() {
        violations.push(format!("C11 > |C12| fails ({c11} <= {})", c12.abs()));
    }
    if c44 <= 0.0 {
        violations.push(format!("C44 > 0 fails ({c44})"));
    }
    if c11 + 2.0 * c12 <= 0.0 {
        violations.push(format!("C11 + 2 C12 > 0 fails ({})", c11 + 2.0 * c12));
    }
    if !violations.is_empty() {
        return Err(Error::Inadmissible(violations.join("; ")));
    }
    let mut c = Mat6::zeros();
    for i in 0..3 {
        for j in 0..3 {
            c[(i, j)] = if i == j { c11 } else { c12 };
        }
        c[(i + 3, i + 3)] = c44;
    }
    Ok(Stiffness(c))
}

/// Stress-equilibrium direction of a tree node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitDir(pub Vec3);

pub fn equilibrium_direction(theta: f64, phi: f64) -> UnitDir {
    let (st, ct) = (PI * theta).sin_cos();
    let (sp, cp) = (2.0 * PI * phi).sin_cos();
    UnitDir(Vec3::new(cp * st, sp * st, ct))
}

/// `(dN/dtheta, dN/dphi)`.
pub fn equilibrium_direction_partials(theta: f64, phi: f64) -> (Vec3, Vec3) {
    let (st, ct) = (PI * theta).sin_cos();
    let (sp, cp) = (2.0 * PI * phi).sin_cos();
    (
        PI * Vec3::new(cp * ct, sp * ct, -st),
        2.0 * PI * Vec3::new(-sp * st, cp * st, 0.0),
    )
}

/// Stress transformation in Voigt form: `sigma' = M sigma` for `sigma' = R sigma R^T`.
pub fn bond_matrix(r: &Mat3) -> Mat6 {
    let mut m = Mat6::zeros();
    for (a, &(i, j)) in VOIGT.iter().enumerate() {
        for (b, &(k, l)) in VOIGT.iter().enumerate() {
            m[(a, b)] = if k == l {
                r[(i, k)] * r[(j, k)]
            } else {
                r[(i, k)] * r[(j, l)] + r[(i, l)] * r[(j, k)]
            };
        }
    }
    m
}

/// Pulls a cotangent on the Bond matrix back to the rotation matrix entries.
pub fn bond_matrix_pullback(r: &Mat3, g: &Mat6) -> Mat3 {
    let mut gr = Mat3::zeros();
    for (a, &(i, j)) in VOIGT.iter().enumerate() {
        for (b, &(k, l)) in VOIGT.iter().enumerate() {
            let gm = g[(a, b)];
            if gm == 0.0 {
                continue;
            }
            gr[(i, k)] += gm * r[(j, l)];
            gr[(j, l)] += gm * r[(i, k)];
            if k != l {
                gr[(i, l)] += gm * r[(j, k)];
                gr[(j, k)] += gm * r[(i, l)];
            }
        }
    }
    gr
}

/// `C'_ijkl = R_ip R_jq R_kr R_ls C_pqrs`, evaluated through the Bond matrix.
pub fn rotate_stiffness(c: &Stiffness, q: &Quat) -> Stiffness {
    rotate_stiffness_matrix(c, &q.to_matrix())
}

pub fn rotate_stiffness_matrix(c: &Stiffness, r: &Mat3) -> Stiffness {
    let m = bond_matrix(r);
    Stiffness(m * c.0 * m.transpose())
}

/// Quaternion geodesic distance `2 acos |<a, b>|` in `[0, pi]`.
pub fn geodesic_distance(a: &Quat, b: &Quat) -> f64 {
    2.0 * a.dot(b).abs().clamp(-1.0, 1.0).acos()
}

/// The 24 proper rotations of the cube.
pub fn cubic_symmetry_ops() -> &'static [Quat; 24] {
    static OPS: OnceLock<[Quat; 24]> = OnceLock::new();
    OPS.get_or_init(|| {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let mut raw: Vec<[f64; 4]> = Vec::with_capacity(48);
        for i in 0..4 {
            let mut c = [0.0; 4];
            c[i] = 1.0;
            raw.push(c);
        }
        for i in 0..4 {
            for j in (i + 1)..4 {
                for s in [1.0, -1.0] {
                    let mut c = [0.0; 4];
                    c[i] = h;
                    c[j] = s * h;
                    raw.push(c);
                }
            }
        }
        for signs in 0..8u32 {
            let s = |b: u32| if signs & (1 << b) != 0 { -0.5 } else { 0.5 };
            raw.push([0.5, s(0), s(1), s(2)]);
        }
        let ops: Vec<Quat> = raw
            .into_iter()
            .map(|c| Quat {
                w: c[0],
                x: c[1],
                y: c[2],
                z: c[3],
            })
            .map(Quat::canonical)
            .collect();
        ops.try_into().expect("cubic group has 24 elements")
    })
}

const FZ_TIE: f64 = 1e-12;

fn fz_prefers(a: &Quat, b: &Quat) -> bool {
    for (x, y) in a.to_array().into_iter().zip(b.to_array()) {
        if x > y + FZ_TIE {
            return true;
        }
        if x < y - FZ_TIE {
            return false;
        }
    }
    false
}

/// Symmetry-equivalent representative with maximal scalar part.
///
/// Ties on `w` are broken lexicographically on `(x, y, z)`.
pub fn to_fcc_fundamental_zone(q: &Quat) -> Quat {
    let q = q.canonical();
    let mut best = q;
    let mut first = true;
    for s in cubic_symmetry_ops() {
        let cand = q.mul(s);
        if first || fz_prefers(&cand, &best) {
            best = cand;
            first = false;
        }
    }
    best
}

/// Smallest geodesic distance over all cubic-symmetry equivalents of `b`.
pub fn cubic_misorientation(a: &Quat, b: &Quat) -> f64 {
    cubic_symmetry_ops()
        .iter()
        .map(|s| geodesic_distance(a, &b.mul(s)))
        .fold(f64::INFINITY, f64::min)
}

/// Rodrigues vector `(x, y, z) / w`.
pub fn rodrigues(q: &Quat) -> Vec3 {
    Vec3::new(q.x, q.y, q.z) / q.w
}

/// Full 3x3x3x3 tensor of a Voigt stiffness, flattened as `[[i*3+j][k*3+l]]` (9x9).
pub fn voigt_to_full9(c: &Mat6) -> nalgebra::SMatrix<f64, 9, 9> {
    let mut t = nalgebra::SMatrix::<f64, 9, 9>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                for l in 0..3 {
                    t[(i * 3 + j, k * 3 + l)] = c[(voigt_index(i, j), voigt_index(k, l))];
                }
            }
        }
    }
    t
}

/// Engineering-shear Voigt vector of a symmetric strain tensor.
pub fn strain_to_voigt(e: &Mat3) -> nalgebra::Vector6<f64> {
    nalgebra::Vector6::new(
        e[(0, 0)],
        e[(1, 1)],
        e[(2, 2)],
        e[(1, 2)] + e[(2, 1)],
        e[(0, 2)] + e[(2, 0)],
        e[(0, 1)] + e[(1, 0)],
    )
}

pub fn stress_from_voigt(s: &nalgebra::Vector6<f64>) -> Mat3 {
    Mat3::new(s[0], s[5], s[4], s[5], s[1], s[3], s[4], s[3], s[2])
}
