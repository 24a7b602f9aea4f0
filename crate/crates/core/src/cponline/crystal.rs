//! Rate-dependent crystal plasticity at a single material point.
//!
//! Finite strain with `F = Fe Fp`, a Saint Venant-Kirchhoff law `S = C : E`
//! on the elastic Green strain, power-law slip on the twelve FCC
//! `<110>{111}` systems and phenomenological hardening. Stresses are in MPa.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotlab::{cubic_stiffness, rotate_stiffness, stress_from_voigt, strain_to_voigt, Mat3, Mat6, Quat, Vec3};

pub const SLIP_SYSTEMS: usize = 12;

pub type Mat9 = SMatrix<f64, 9, 9>;
type Vec24 = SVector<f64, 24>;
type Mat24 = SMatrix<f64, 24, 24>;

/// Local Newton tolerance on the scaled residual (slip in strain units,
/// hardening in units of the initial resistance).
pub const LOCAL_TOL: f64 = 1e-12;
const LOCAL_MAX_ITER: usize = 60;
pub const MAX_SUBSTEP_LEVELS: usize = 10;

/// `(direction, plane normal)` in crystal axes.
pub const FCC_SLIP: [([i32; 3], [i32; 3]); SLIP_SYSTEMS] = [
    ([0, 1, -1], [1, 1, 1]),
    ([-1, 0, 1], [1, 1, 1]),
    ([1, -1, 0], [1, 1, 1]),
    ([0, -1, -1], [-1, -1, 1]),
    ([1, 0, 1], [-1, -1, 1]),
    ([-1, 1, 0], [-1, -1, 1]),
    ([0, -1, 1], [1, -1, -1]),
    ([-1, 0, -1], [1, -1, -1]),
    ([1, 1, 0], [1, -1, -1]),
    ([0, 1, 1], [-1, 1, -1]),
    ([1, 0, -1], [-1, 1, -1]),
    ([-1, -1, 0], [-1, 1, -1]),
];

/// Latent-hardening class of a pair of slip systems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InteractionClass {
    SelfHardening,
    Coplanar,
    Collinear,
    Hirth,
    Glissile,
    Lomer,
}

impl InteractionClass {
    /// Slot in the seven-entry coefficient list. The list follows the
    /// seven-type fcc order with glissile junctions split in two; both
    /// glissile entries carry the same value, so slot 5 is not read.
    pub fn slot(self) -> usize {
        match self {
            InteractionClass::Lomer => 6,
            c => c as usize,
        }
    }

    pub fn letter(self) -> char {
        ['S', 'P', 'C', 'H', 'G', 'L'][self as usize]
    }
}

fn dot(a: &[i32; 3], b: &[i32; 3]) -> i32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn parallel(a: &[i32; 3], b: &[i32; 3]) -> bool {
    dot(a, b).pow(2) == dot(a, a) * dot(b, b)
}

pub fn interaction_class(alpha: usize, beta: usize) -> InteractionClass {
    let (da, na) = &FCC_SLIP[alpha];
    let (db, nb) = &FCC_SLIP[beta];
    if alpha == beta {
        return InteractionClass::SelfHardening;
    }
    if parallel(na, nb) {
        return InteractionClass::Coplanar;
    }
    if parallel(da, db) {
        return InteractionClass::Collinear;
    }
    let c = dot(da, db);
    if c == 0 {
        return InteractionClass::Hirth;
    }
    // Junction Burgers vector is the third <110> of the triangle.
    let s = -c.signum();
    let b = [da[0] + s * db[0], da[1] + s * db[1], da[2] + s * db[2]];
    if dot(&b, na) == 0 || dot(&b, nb) == 0 {
        InteractionClass::Glissile
    } else {
        InteractionClass::Lomer
    }
}

pub fn interaction_classes() -> [[InteractionClass; SLIP_SYSTEMS]; SLIP_SYSTEMS] {
    std::array::from_fn(|a| std::array::from_fn(|b| interaction_class(a, b)))
}

/// Hardening interaction matrix from the seven class coefficients.
pub fn interaction_matrix(coefficients: &[f64; 7]) -> SMatrix<f64, SLIP_SYSTEMS, SLIP_SYSTEMS> {
    SMatrix::from_fn(|a, b| coefficients[interaction_class(a, b).slot()])
}

/// Constitutive constants; defaults describe an AA6022-T4 aluminium alloy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpParams {
    pub c11: f64,
    pub c12: f64,
    pub c44: f64,
    /// Reference slip rate, 1/s.
    pub gamma_dot0: f64,
    /// Rate sensitivity exponent.
    pub n: f64,
    pub a: f64,
    pub h0: f64,
    pub xi0: f64,
    pub xi_inf: f64,
    pub h_int: f64,
    /// Self, coplanar, collinear, Hirth, glissile, glissile (alternate), Lomer.
    pub interaction: [f64; 7],
    /// `false` turns the model into pure finite-strain elasticity.
    pub plastic: bool,
}

impl Default for CpParams {
    fn default() -> Self {
        CpParams {
            c11: 107.3e3,
            c12: 60.8e3,
            c44: 28.3e3,
            gamma_dot0: 1e-3,
            n: 20.0,
            a: 3.7,
            h0: 1.02e3,
            xi0: 76.0,
            xi_inf: 266.0,
            h_int: 0.0,
            interaction: [1.0, 1.0, 5.123, 0.574, 1.123, 1.123, 1.0],
            plastic: true,
        }
    }
}

impl CpParams {
    pub fn elastic(mut self) -> Self {
        self.plastic = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.gamma_dot0, self.n, self.a, self.xi0, self.xi_inf];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Invalid("slip and hardening constants must be positive".into()));
        }
        if !(self.h0.is_finite() && self.h0 >= 0.0 && self.h_int.is_finite() && self.h_int > -1.0) {
            return Err(Error::Invalid("bad hardening modulus".into()));
        }
        if self.xi_inf <= self.xi0 {
            return Err(Error::Invalid("saturation resistance must exceed the initial one".into()));
        }
        if self.interaction.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite interaction coefficient".into()));
        }
        cubic_stiffness(self.c11, self.c12, self.c44)?;
        Ok(())
    }
}

/// `gamma_dot0 |tau/xi|^n sgn(tau)`.
pub fn slip_rate(tau: f64, xi: f64, p: &CpParams) -> f64 {
    p.gamma_dot0 * ratio_pow(tau.abs() / xi, p.n) * tau.signum()
}

fn ratio_pow(r: f64, n: f64) -> f64 {
    if n.fract() == 0.0 && n.abs() < 1e6 {
        r.powi(n as i32)
    } else {
        r.powf(n)
    }
}

/// `|1 - xi/xi_inf|^a sgn(1 - xi/xi_inf)` and its derivative in `xi`.
fn saturation(xi: f64, p: &CpParams) -> (f64, f64) {
    let u = 1.0 - xi / p.xi_inf;
    let g = u.abs().powf(p.a) * u.signum();
    let dg = -p.a * u.abs().powf(p.a - 1.0) / p.xi_inf;
    (g, dg)
}

/// History variables of one material point.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialState {
    pub fp: Mat3,
    pub xi: [f64; SLIP_SYSTEMS],
    /// Accumulated slip per system.
    pub gamma: [f64; SLIP_SYSTEMS],
    /// Slip rates of the last converged step, used as the next initial guess.
    pub rate: [f64; SLIP_SYSTEMS],
    /// Deformation gradient of the last converged step.
    pub f: Mat3,
}

impl MaterialState {
    pub fn initial(p: &CpParams) -> Self {
        MaterialState {
            fp: Mat3::identity(),
            xi: [p.xi0; SLIP_SYSTEMS],
            gamma: [0.0; SLIP_SYSTEMS],
            rate: [0.0; SLIP_SYSTEMS],
            f: Mat3::identity(),
        }
    }

    /// `det Fp = 1` within 1e-6 and `xi` inside `[xi0, xi_inf]`.
    pub fn validate(&self, p: &CpParams) -> Result<()> {
        let det = self.fp.determinant();
        if !((det - 1.0).abs() <= 1e-6) {
            return Err(Error::Invalid(format!("det Fp = {det} drifted from 1")));
        }
        for (k, &x) in self.xi.iter().enumerate() {
            if !(x >= p.xi0 * (1.0 - 1e-12) && x <= p.xi_inf * (1.0 + 1e-9)) {
                return Err(Error::Invalid(format!("slip resistance {x} of system {k} out of range")));
            }
        }
        Ok(())
    }
}

/// Orientation-specific constants of one crystal.
#[derive(Clone, Debug)]
pub struct CrystalModel {
    pub params: CpParams,
    pub orientation: Quat,
    /// Elastic stiffness in sample axes.
    pub stiffness: Mat6,
    /// Schmid tensors `s (x) n` in sample axes.
    pub schmid: [Mat3; SLIP_SYSTEMS],
    pub hardening: SMatrix<f64, SLIP_SYSTEMS, SLIP_SYSTEMS>,
}

impl CrystalModel {
    pub fn new(params: &CpParams, orientation: Quat) -> Result<Self> {
        params.validate()?;
        let c = cubic_stiffness(params.c11, params.c12, params.c44)?;
        let r = orientation.to_matrix();
        let schmid = std::array::from_fn(|k| {
            let (d, n) = FCC_SLIP[k];
            let d = r * Vec3::new(d[0] as f64, d[1] as f64, d[2] as f64).normalize();
            let n = r * Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64).normalize();
            d * n.transpose()
        });
        Ok(CrystalModel {
            params: params.clone(),
            orientation,
            stiffness: rotate_stiffness(&c, &orientation).0,
            schmid,
            hardening: interaction_matrix(&params.interaction),
        })
    }

    fn stress(&self, e: &Mat3) -> Mat3 {
        stress_from_voigt(&(self.stiffness * strain_to_voigt(e)))
    }

    fn slip_tensor(&self, dg: &[f64]) -> Mat3 {
        dg.iter().zip(&self.schmid).fold(Mat3::zeros(), |acc, (g, s)| acc + s * *g)
    }

    fn kinematics(&self, fp_n: &Mat3, dg: &[f64], f: &Mat3) -> Option<Kin> {
        let a = self.slip_tensor(dg);
        let fp = a.exp() * fp_n;
        let fp_inv = fp.try_inverse()?;
        let fe = f * fp_inv;
        let ce = fe.transpose() * fe;
        let s = self.stress(&((ce - Mat3::identity()) * 0.5));
        let m = ce * s;
        let tau = std::array::from_fn(|k| m.component_mul(&self.schmid[k]).sum());
        let p = fe * s * fp_inv.transpose();
        Some(Kin {
            a,
            f: *f,
            fp,
            fp_inv,
            fe,
            ce,
            s,
            tau,
            p,
        })
    }

    /// Directional derivatives of `(tau, P)` along `(d dgamma, dF)`.
    fn kinematics_dir(&self, fp_n: &Mat3, k: &Kin, ddg: &[f64], df: &Mat3) -> ([f64; SLIP_SYSTEMS], Mat3) {
        let dfp_inv = if ddg.iter().any(|v| *v != 0.0) {
            let dfp = dexp(&k.a, &self.slip_tensor(ddg)) * fp_n;
            -k.fp_inv * dfp * k.fp_inv
        } else {
            Mat3::zeros()
        };
        let dfe = df * k.fp_inv + k.f * dfp_inv;
        let dce = dfe.transpose() * k.fe + k.fe.transpose() * dfe;
        let ds = self.stress(&(dce * 0.5));
        let dm = dce * k.s + k.ce * ds;
        let dtau = std::array::from_fn(|a| dm.component_mul(&self.schmid[a]).sum());
        let dp = (dfe * k.s + k.fe * ds) * k.fp_inv.transpose() + k.fe * k.s * dfp_inv.transpose();
        (dtau, dp)
    }

    fn residual(&self, st: &MaterialState, x: &Vec24, k: &Kin, dt: f64) -> Vec24 {
        let p = &self.params;
        let hh = p.h0 * (1.0 + p.h_int);
        let mut r = Vec24::zeros();
        let g: Vec<f64> = (0..SLIP_SYSTEMS).map(|b| saturation(x[12 + b], p).0).collect();
        for a in 0..SLIP_SYSTEMS {
            r[a] = x[a] - dt * slip_rate(k.tau[a], x[12 + a], p);
            let mut h = 0.0;
            for b in 0..SLIP_SYSTEMS {
                h += self.hardening[(a, b)] * x[b].abs() * g[b];
            }
            r[12 + a] = (x[12 + a] - st.xi[a] - hh * h) / p.xi0;
        }
        r
    }

    /// `(J, dr1/dtau)` at a point where `k` is the matching kinematics.
    fn jacobian(&self, st: &MaterialState, x: &Vec24, k: &Kin, dt: f64) -> (Mat24, [f64; SLIP_SYSTEMS]) {
        let p = &self.params;
        let hh = p.h0 * (1.0 + p.h_int);
        let mut j = Mat24::zeros();
        let mut drate_dtau = [0.0; SLIP_SYSTEMS];
        for a in 0..SLIP_SYSTEMS {
            let (tau, xi) = (k.tau[a], x[12 + a]);
            let r = tau.abs() / xi;
            drate_dtau[a] = p.gamma_dot0 * p.n * ratio_pow(r, p.n - 1.0) / xi;
            let drate_dxi = -p.gamma_dot0 * p.n * ratio_pow(r, p.n) * tau.signum() / xi;
            j[(a, 12 + a)] = -dt * drate_dxi;
        }
        let mut e = [0.0; SLIP_SYSTEMS];
        for b in 0..SLIP_SYSTEMS {
            e[b] = 1.0;
            let (dtau, _) = self.kinematics_dir(&st.fp, k, &e, &Mat3::zeros());
            e[b] = 0.0;
            for a in 0..SLIP_SYSTEMS {
                j[(a, b)] = -dt * drate_dtau[a] * dtau[a];
            }
            j[(b, b)] += 1.0;
        }
        for b in 0..SLIP_SYSTEMS {
            let (g, dg) = saturation(x[12 + b], p);
            let gb = x[b];
            for a in 0..SLIP_SYSTEMS {
                let h = self.hardening[(a, b)];
                j[(12 + a, b)] = -hh * h * gb.signum() * g / p.xi0;
                j[(12 + a, 12 + b)] = -hh * h * gb.abs() * dg / p.xi0;
            }
            j[(12 + b, 12 + b)] += 1.0 / p.xi0;
        }
        (j, drate_dtau)
    }

    fn solve_local(&self, st: &MaterialState, f: &Mat3, dt: f64, guess: &[f64; SLIP_SYSTEMS]) -> Option<(Vec24, Kin, usize)> {
        let mut x = Vec24::zeros();
        for a in 0..SLIP_SYSTEMS {
            x[a] = guess[a];
            x[12 + a] = st.xi[a];
        }
        let mut k = self.kinematics(&st.fp, &x.as_slice()[..12], f)?;
        let mut r = self.residual(st, &x, &k, dt);
        for it in 0..LOCAL_MAX_ITER {
            if !r.iter().all(|v| v.is_finite()) {
                return None;
            }
            if r.amax() < LOCAL_TOL {
                return Some((x, k, it));
            }
            let (j, _) = self.jacobian(st, &x, &k, dt);
            let dx = j.lu().solve(&-r)?;
            let merit = r.norm();
            let mut lambda = 1.0;
            loop {
                let mut xt = x + dx * lambda;
                for a in 0..SLIP_SYSTEMS {
                    xt[12 + a] = xt[12 + a].max(0.5 * st.xi[a]);
                }
                if let Some(kt) = self.kinematics(&st.fp, &xt.as_slice()[..12], f) {
                    let rt = self.residual(st, &xt, &kt, dt);
                    if rt.iter().all(|v| v.is_finite()) && (rt.norm() < (1.0 - 1e-4 * lambda) * merit || lambda < 1e-3) {
                        x = xt;
                        k = kt;
                        r = rt;
                        break;
                    }
                }
                lambda *= 0.5;
                if lambda < 1e-8 {
                    return None;
                }
            }
        }
        None
    }

    fn tangent(&self, st: &MaterialState, x: &Vec24, k: &Kin, dt: f64) -> Option<Mat9> {
        let mut t = Mat9::zeros();
        let zero = [0.0; SLIP_SYSTEMS];
        let lu = if self.params.plastic {
            let (j, drate_dtau) = self.jacobian(st, x, k, dt);
            Some((j.lu(), drate_dtau))
        } else {
            None
        };
        for col in 0..9 {
            let mut df = Mat3::zeros();
            df[(col / 3, col % 3)] = 1.0;
            let (dtau, dp_f) = self.kinematics_dir(&st.fp, k, &zero, &df);
            let dp = match &lu {
                None => dp_f,
                Some((lu, drate_dtau)) => {
                    let mut rhs = Vec24::zeros();
                    for a in 0..SLIP_SYSTEMS {
                        rhs[a] = dt * drate_dtau[a] * dtau[a];
                    }
                    let dx = lu.solve(&rhs)?;
                    let (_, dp_x) = self.kinematics_dir(&st.fp, k, &dx.as_slice()[..12], &Mat3::zeros());
                    dp_f + dp_x
                }
            };
            for row in 0..9 {
                t[(row, col)] = dp[(row / 3, row % 3)];
            }
        }
        Some(t)
    }

    /// One step without substepping. `None` when the local Newton fails.
    fn step(&self, st: &MaterialState, f: &Mat3, dt: f64) -> Option<(MaterialState, Mat3, Mat9, usize)> {
        let zero = [0.0; SLIP_SYSTEMS];
        let (x, k, iterations) = if self.params.plastic {
            let guess: [f64; SLIP_SYSTEMS] = std::array::from_fn(|a| st.rate[a] * dt);
            self.solve_local(st, f, dt, &guess)
                .or_else(|| self.solve_local(st, f, dt, &zero))?
        } else {
            let mut x = Vec24::zeros();
            for a in 0..SLIP_SYSTEMS {
                x[12 + a] = st.xi[a];
            }
            (x, self.kinematics(&st.fp, &zero, f)?, 0)
        };
        let tangent = self.tangent(st, &x, &k, dt)?;
        let mut next = st.clone();
        next.fp = k.fp;
        next.f = *f;
        for a in 0..SLIP_SYSTEMS {
            next.xi[a] = x[12 + a].min(self.params.xi_inf * (1.0 + 1e-9)).max(st.xi[a].min(x[12 + a]));
            next.gamma[a] += x[a];
            next.rate[a] = x[a] / dt;
        }
        Some((next, k.p, tangent, iterations))
    }

    /// Current lattice orientation `quat(Re) q0` with `Fe = Re Ue`.
    pub fn lattice_orientation(&self, st: &MaterialState) -> Quat {
        let fe = st.f * st.fp.try_inverse().unwrap_or_else(Mat3::identity);
        let re = polar_rotation(&fe);
        Quat::from_matrix(&re).mul(&self.orientation).canonical()
    }
}

struct Kin {
    a: Mat3,
    f: Mat3,
    fp: Mat3,
    fp_inv: Mat3,
    fe: Mat3,
    ce: Mat3,
    s: Mat3,
    tau: [f64; SLIP_SYSTEMS],
    p: Mat3,
}

/// Frechet derivative of the matrix exponential at `a` along `e`.
fn dexp(a: &Mat3, e: &Mat3) -> Mat3 {
    let mut b = SMatrix::<f64, 6, 6>::zeros();
    b.fixed_view_mut::<3, 3>(0, 0).copy_from(a);
    b.fixed_view_mut::<3, 3>(3, 3).copy_from(a);
    b.fixed_view_mut::<3, 3>(0, 3).copy_from(e);
    b.exp().fixed_view::<3, 3>(0, 3).into_owned()
}

/// Rotation factor of the polar decomposition.
pub fn polar_rotation(f: &Mat3) -> Mat3 {
    let svd = f.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut d = Mat3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * vt;
    }
    r
}

/// Result of [`cp_stress_update`].
#[derive(Clone, Debug)]
pub struct CpUpdate {
    /// First Piola-Kirchhoff stress.
    pub p: Mat3,
    /// `dP_ij / dF_kl` at row `3i+j`, column `3k+l`.
    pub tangent: Mat9,
    pub state: MaterialState,
    /// Number of substeps used (1 when the full step converged).
    pub substeps: usize,
    pub iterations: usize,
}

/// Advances `state` to deformation `f` over `dt`, halving the increment up to
/// ten times when the local Newton fails. With substepping the tangent is
/// that of the final substep.
pub fn cp_stress_update(model: &CrystalModel, state: &MaterialState, f: &Mat3, dt: f64) -> Result<CpUpdate> {
    if !(dt > 0.0 && dt.is_finite()) || !f.iter().all(|v| v.is_finite()) {
        return Err(Error::Invalid("step needs finite F and positive dt".into()));
    }
    for level in 0..=MAX_SUBSTEP_LEVELS {
        let n = 1usize << level;
        let mut st = state.clone();
        let mut out = None;
        let mut iterations = 0;
        for j in 1..=n {
            let fj = state.f + (f - state.f) * (j as f64 / n as f64);
            match model.step(&st, &fj, dt / n as f64) {
                Some((next, p, t, it)) => {
                    st = next;
                    iterations += it;
                    out = Some((p, t));
                }
                None => {
                    out = None;
                    break;
                }
            }
        }
        if let Some((p, tangent)) = out {
            return Ok(CpUpdate {
                p,
                tangent,
                state: st,
                substeps: n,
                iterations,
            });
        }
    }
    Err(Error::NotConverged {
        what: "crystal plasticity update",
        iterations: MAX_SUBSTEP_LEVELS,
        last: f64::NAN,
        history: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotlab::TaitBryan;

    fn model(q: Quat) -> CrystalModel {
        CrystalModel::new(&CpParams::default(), q).unwrap()
    }

    fn uniaxial(e: f64) -> Mat3 {
        Mat3::new(1.0 + e, 0.0, 0.0, 0.0, 1.0 - 0.3 * e, 0.0, 0.0, 0.0, 1.0 - 0.3 * e)
    }

    #[test]
    fn class_counts_per_system() {
        let classes = interaction_classes();
        for row in classes.iter() {
            let count = |c| row.iter().filter(|x| **x == c).count();
            assert_eq!(count(InteractionClass::SelfHardening), 1);
            assert_eq!(count(InteractionClass::Coplanar), 2);
            assert_eq!(count(InteractionClass::Collinear), 1);
            assert_eq!(count(InteractionClass::Hirth), 2);
            assert_eq!(count(InteractionClass::Glissile), 4);
            assert_eq!(count(InteractionClass::Lomer), 2);
        }
        for (a, row) in classes.iter().enumerate() {
            for (b, c) in row.iter().enumerate() {
                assert_eq!(*c, classes[b][a]);
            }
        }
    }

    #[test]
    fn default_coefficients_follow_kubin_ratios() {
        // Kubin et al. strengths divided by the self value 0.122.
        let kubin = |c| match c {
            InteractionClass::SelfHardening | InteractionClass::Coplanar | InteractionClass::Lomer => 0.122,
            InteractionClass::Collinear => 0.625,
            InteractionClass::Hirth => 0.07,
            InteractionClass::Glissile => 0.137,
        } / 0.122;
        let h = interaction_matrix(&CpParams::default().interaction);
        let classes = interaction_classes();
        for a in 0..SLIP_SYSTEMS {
            for b in 0..SLIP_SYSTEMS {
                assert!((h[(a, b)] - kubin(classes[a][b])).abs() < 1e-3, "{a} {b}");
            }
        }
    }

    #[test]
    fn class_matrix_matches_fixture() {
        let text = include_str!("../../tests/fixtures/fcc_interaction_classes.txt");
        let rows: Vec<String> = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .map(|l| l.split_whitespace().collect())
            .collect();
        let computed: Vec<String> = interaction_classes()
            .iter()
            .map(|r| r.iter().map(|c| c.letter()).collect())
            .collect();
        assert_eq!(rows, computed);
    }

    #[test]
    fn slip_systems_are_orthogonal() {
        for (d, n) in FCC_SLIP {
            assert_eq!(dot(&d, &n), 0);
        }
        let m = model(TaitBryan::new(0.3, -0.2, 1.1).to_quat());
        for s in &m.schmid {
            assert!(s.trace().abs() < 1e-15);
            assert!((s.norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn slip_rate_probe() {
        let p = CpParams::default();
        assert_eq!(slip_rate(p.xi0, p.xi0, &p), p.gamma_dot0);
        let r = slip_rate(2.0 * p.xi0, p.xi0, &p);
        assert!((r - p.gamma_dot0 * 1048576.0).abs() <= 1e-15 * r);
        assert_eq!(slip_rate(-p.xi0, p.xi0, &p), -p.gamma_dot0);
    }

    #[test]
    fn dexp_matches_finite_difference() {
        let a = Mat3::new(0.01, 0.02, -0.03, 0.0, -0.02, 0.01, 0.015, 0.0, 0.01);
        let e = Mat3::new(0.3, -0.1, 0.2, 0.5, 0.1, 0.0, -0.4, 0.2, -0.4);
        let h = 1e-6;
        let fd = ((a + e * h).exp() - (a - e * h).exp()) / (2.0 * h);
        assert!((dexp(&a, &e) - fd).norm() < 1e-9);
    }

    #[test]
    fn small_strain_response_is_elastic() {
        let m = model(Quat::IDENTITY);
        let st = MaterialState::initial(&m.params);
        let f = uniaxial(1e-5);
        let up = cp_stress_update(&m, &st, &f, 1e-5).unwrap();
        let e = (f.transpose() * f - Mat3::identity()) * 0.5;
        let s = m.stress(&e);
        assert!((up.p - f * s).norm() < 1e-9 * s.norm());
    }

    #[test]
    fn rotated_crystal_is_objective() {
        let q = TaitBryan::new(0.4, 0.9, -0.6).to_quat();
        let r = q.to_matrix();
        let (m0, m1) = (model(Quat::IDENTITY), model(q));
        let f0 = uniaxial(0.01) + Mat3::new(0.0, 0.003, 0.0, 0.001, 0.0, 0.0, 0.0, 0.0, 0.0);
        let f1 = r * f0 * r.transpose();
        let s0 = MaterialState::initial(&m0.params);
        let u0 = cp_stress_update(&m0, &s0, &f0, 0.01).unwrap();
        let u1 = cp_stress_update(&m1, &s0, &f1, 0.01).unwrap();
        let mapped = r * u0.p * r.transpose();
        assert!((u1.p - mapped).norm() < 1e-8 * mapped.norm(), "{} vs {}", u1.p, mapped);
    }

    fn loaded_state(m: &CrystalModel, steps: usize) -> MaterialState {
        let mut st = MaterialState::initial(&m.params);
        for k in 1..=steps {
            let f = uniaxial(1e-3 * k as f64);
            st = cp_stress_update(m, &st, &f, 1e-3).unwrap().state;
        }
        st
    }

    #[test]
    fn tangent_matches_finite_difference() {
        let m = model(TaitBryan::new(0.2, 0.5, 0.9).to_quat());
        let st = loaded_state(&m, 8);
        let f = uniaxial(9e-3) + Mat3::new(0.0, 4e-4, 0.0, 0.0, 0.0, -2e-4, 1e-4, 0.0, 0.0);
        let dt = 1e-3;
        let up = cp_stress_update(&m, &st, &f, dt).unwrap();
        assert_eq!(up.substeps, 1);
        assert!(up.state.rate.iter().any(|r| r.abs() > 1e-2), "step should be plastic");
        let h = 1e-7;
        let mut fd = Mat9::zeros();
        for col in 0..9 {
            let mut df = Mat3::zeros();
            df[(col / 3, col % 3)] = h;
            let pp = cp_stress_update(&m, &st, &(f + df), dt).unwrap().p;
            let pm = cp_stress_update(&m, &st, &(f - df), dt).unwrap().p;
            let d = (pp - pm) / (2.0 * h);
            for row in 0..9 {
                fd[(row, col)] = d[(row / 3, row % 3)];
            }
        }
        let rel = (up.tangent - fd).norm() / fd.norm();
        assert!(rel < 1e-5, "tangent mismatch {rel:.3e}");
    }

    #[test]
    fn plastic_det_and_resistance_stay_admissible() {
        let m = model(TaitBryan::new(0.1, 0.2, 0.3).to_quat());
        let mut st = MaterialState::initial(&m.params);
        for k in 1..=1000 {
            let e = 0.05 * (k as f64 * std::f64::consts::PI / 500.0).sin();
            st = cp_stress_update(&m, &st, &uniaxial(e), 1e-3).unwrap().state;
            st.validate(&m.params).unwrap();
        }
        assert!((st.fp.determinant() - 1.0).abs() < 1e-6);
        assert!(st.gamma.iter().any(|g| g.abs() > 1e-3));
    }

    #[test]
    fn yield_stress_is_near_taylor_estimate() {
        // Eight equally stressed systems with Schmid factor 1/sqrt(6) in a <100> crystal.
        let m = model(Quat::IDENTITY);
        let st = loaded_state(&m, 20);
        let p = m.lattice_orientation(&st);
        assert!(p.w > 0.99);
        let up = cp_stress_update(&m, &st, &uniaxial(0.021), 1e-3).unwrap();
        let sigma = up.p[(0, 0)] - up.p[(1, 1)];
        assert!(sigma > 6f64.sqrt() * 76.0 && sigma < 1.5 * 6f64.sqrt() * 266.0, "{sigma}");
    }

    #[test]
    fn elastic_mode_never_slips() {
        let params = CpParams::default().elastic();
        let m = CrystalModel::new(&params, TaitBryan::new(0.3, 0.1, 0.2).to_quat()).unwrap();
        let st = MaterialState::initial(&params);
        let up = cp_stress_update(&m, &st, &uniaxial(0.05), 1e-3).unwrap();
        assert_eq!(up.state.fp, Mat3::identity());
        assert!(up.state.gamma.iter().all(|g| *g == 0.0));
    }
}
