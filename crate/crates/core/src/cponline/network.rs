//! Mixed-control time stepping of crystal ensembles.
//!
//! Three couplings share one Newton driver: the laminate tree of a trained
//! network (traction continuity across every node interface), Taylor (all
//! leaves see the macroscopic deformation) and Sachs (all leaves carry the
//! macroscopic stress). Each coupling is affine in its unknowns `y`:
//! `F_i = G_i y + c_i` and `r = sum_i H_i vec(P_i) + A y + b`.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::crystal::{cp_stress_update, CpParams, CpUpdate, CrystalModel, Mat9, MaterialState};
use crate::error::{Error, Result};
use crate::odmn::{node_count, node_index, OdmnParams};
use crate::rotlab::{equilibrium_direction, voigt_index, Mat3, Mat6, Quat, Vec3, VOIGT};

/// Relative tolerance of the global Newton.
pub const GLOBAL_TOL: f64 = 1e-10;
const GLOBAL_MAX_ITER: usize = 25;
pub const MAX_STEP_HALVINGS: usize = 10;

type Vec9 = SVector<f64, 9>;

fn vec9(m: &Mat3) -> Vec9 {
    Vec9::from_fn(|k, _| m[(k / 3, k % 3)])
}

fn mat3(v: &[f64]) -> Mat3 {
    Mat3::from_fn(|i, j| v[3 * i + j])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    Laminate,
    Taylor,
    Sachs,
}

/// Leaves, their volume fractions and (for a laminate) the tree geometry.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub coupling: Coupling,
    pub depth: usize,
    pub leaves: Vec<CrystalModel>,
    pub fractions: Vec<f64>,
    pub normals: Vec<Vec3>,
    /// Unnormalized subtree weight of every tree node.
    node_weight: Vec<f64>,
    leaf_weight: Vec<f64>,
}

impl Ensemble {
    /// Laminate tree of a trained network. Node weights stay fixed online.
    pub fn network(params: &OdmnParams, cp: &CpParams) -> Result<Self> {
        params.validate()?;
        let leaves = params
            .leaf_quats()
            .iter()
            .map(|q| CrystalModel::new(cp, *q))
            .collect::<Result<Vec<_>>>()?;
        let depth = params.depth;
        let leaf_weight = params.weights();
        let mut node_weight = vec![0.0; node_count(depth)];
        for level in (0..depth).rev() {
            for pos in 0..(1 << level) {
                let child = |c: usize| {
                    if level + 1 == depth {
                        leaf_weight[c]
                    } else {
                        node_weight[node_index(level + 1, c)]
                    }
                };
                node_weight[node_index(level, pos)] = child(2 * pos) + child(2 * pos + 1);
            }
        }
        let normals = params
            .theta
            .iter()
            .zip(&params.phi)
            .map(|(t, p)| equilibrium_direction(*t, *p).0)
            .collect();
        Ok(Ensemble {
            coupling: Coupling::Laminate,
            depth,
            fractions: params.volume_fractions(),
            leaves,
            normals,
            node_weight,
            leaf_weight,
        })
    }

    fn flat(coupling: Coupling, quats: &[Quat], fractions: &[f64], cp: &CpParams) -> Result<Self> {
        if quats.is_empty() || quats.len() != fractions.len() {
            return Err(Error::Invalid("need one positive fraction per orientation".into()));
        }
        if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::Invalid("fractions must be positive".into()));
        }
        let total: f64 = fractions.iter().sum();
        Ok(Ensemble {
            coupling,
            depth: 0,
            leaves: quats.iter().map(|q| CrystalModel::new(cp, *q)).collect::<Result<_>>()?,
            fractions: fractions.iter().map(|f| f / total).collect(),
            normals: Vec::new(),
            node_weight: Vec::new(),
            leaf_weight: fractions.to_vec(),
        })
    }

    /// Iso-deformation aggregate.
    pub fn taylor(quats: &[Quat], fractions: &[f64], cp: &CpParams) -> Result<Self> {
        Self::flat(Coupling::Taylor, quats, fractions, cp)
    }

    /// Iso-stress aggregate: every leaf carries the same symmetric part of
    /// `P` and the same spin, and the leaf average meets the controls.
    pub fn sachs(quats: &[Quat], fractions: &[f64], cp: &CpParams) -> Result<Self> {
        Self::flat(Coupling::Sachs, quats, fractions, cp)
    }

    pub fn single_crystal(q: Quat, cp: &CpParams) -> Result<Self> {
        Self::flat(Coupling::Taylor, &[q], &[1.0], cp)
    }

    pub fn initial_state(&self) -> EnsembleState {
        let l = self.leaves.len();
        EnsembleState {
            t: 0.0,
            f: Mat3::identity(),
            p: Mat3::zeros(),
            f_rate: Mat3::zeros(),
            p_rate: Mat3::zeros(),
            leaves: self.leaves.iter().map(|m| MaterialState::initial(&m.params)).collect(),
            leaf_p: vec![Mat3::zeros(); l],
            leaf_f_rate: vec![Mat3::zeros(); l],
            jumps: vec![Vec3::zeros(); self.normals.len()],
            jump_rate: vec![Vec3::zeros(); self.normals.len()],
        }
    }

    /// `(f1, f2)` of node `m`'s children and the side of `leaf` (0 or 1).
    fn split(&self, level: usize, leaf: usize) -> (usize, f64, f64, usize, f64) {
        let d = self.depth;
        let pos = leaf >> (d - level);
        let m = node_index(level, pos);
        let side = (leaf >> (d - level - 1)) & 1;
        let child = |c: usize| {
            if level + 1 == d {
                self.leaf_weight[c]
            } else {
                self.node_weight[node_index(level + 1, c)]
            }
        };
        let (w1, w2) = (child(2 * pos), child(2 * pos + 1));
        let wc = if side == 0 { w1 } else { w2 };
        (m, w1 / (w1 + w2), w2 / (w1 + w2), side, self.leaf_weight[leaf] / wc)
    }

    fn affine(&self, control: &Control) -> Affine {
        let l = self.leaves.len();
        let free: Vec<usize> = (0..9).filter(|&q| !control.f_mask[q / 3][q % 3]).collect();
        let fixed_f = Mat3::from_fn(|i, j| if control.f_mask[i][j] { control.f_target[(i, j)] } else { 0.0 });
        match self.coupling {
            Coupling::Laminate | Coupling::Taylor => {
                let nj = 3 * self.normals.len();
                let k = nj + free.len();
                let mut aff = Affine::new(l, k);
                for i in 0..l {
                    aff.c[i] = vec9(&fixed_f);
                    for (col, &q) in free.iter().enumerate() {
                        aff.g[i][(q, nj + col)] = 1.0;
                        aff.h[i][(nj + col, q)] = self.fractions[i];
                    }
                    for level in 0..self.depth {
                        let (m, f1, f2, side, share) = self.split(level, i);
                        let (s, sign) = if side == 0 { (f2, 1.0) } else { (-f1, -1.0) };
                        let n = self.normals[m];
                        for r in 0..3 {
                            for c in 0..3 {
                                aff.g[i][(3 * r + c, 3 * m + r)] = s * n[c];
                                aff.h[i][(3 * m + r, 3 * r + c)] = sign * share * n[c];
                            }
                        }
                    }
                }
                for (col, &q) in free.iter().enumerate() {
                    aff.b[nj + col] = -control.p_target[(q / 3, q % 3)];
                }
                aff
            }
            Coupling::Sachs => {
                // y = [F_1 .. F_L, sym(P) in Voigt order, common spin].
                let k = 9 * l + 9;
                let (ps, om) = (9 * l, 9 * l + 6);
                let mut aff = Affine::new(l, k);
                for i in 0..l {
                    for q in 0..9 {
                        aff.g[i][(q, 9 * i + q)] = 1.0;
                    }
                    for (v, &(a, b)) in VOIGT.iter().enumerate() {
                        aff.h[i][(9 * i + v, 3 * a + b)] += 0.5;
                        aff.h[i][(9 * i + v, 3 * b + a)] += 0.5;
                        aff.a[(9 * i + v, ps + v)] = -1.0;
                    }
                    for (w, &(a, b)) in SKEW.iter().enumerate() {
                        let row = 9 * i + 6 + w;
                        aff.a[(row, 9 * i + 3 * a + b)] = 0.5;
                        aff.a[(row, 9 * i + 3 * b + a)] = -0.5;
                        aff.a[(row, om + w)] = -1.0;
                        aff.strain_row[row] = true;
                    }
                }
                for q in 0..9 {
                    let row = 9 * l + q;
                    let (a, b) = (q / 3, q % 3);
                    if control.f_mask[a][b] {
                        for i in 0..l {
                            aff.a[(row, 9 * i + q)] = self.fractions[i];
                        }
                        aff.b[row] = -control.f_target[(a, b)];
                        aff.strain_row[row] = true;
                    } else {
                        aff.a[(row, ps + voigt_index(a, b))] = 1.0;
                        aff.b[row] = -control.p_target[(a, b)];
                    }
                }
                aff
            }
        }
    }

    /// Unknowns extrapolated from the committed state over `dt`.
    fn guess(&self, st: &EnsembleState, control: &Control, dt: f64) -> DVector<f64> {
        let free: Vec<usize> = (0..9).filter(|&q| !control.f_mask[q / 3][q % 3]).collect();
        match self.coupling {
            Coupling::Laminate | Coupling::Taylor => {
                let nj = 3 * self.normals.len();
                let mut y = DVector::zeros(nj + free.len());
                for (m, (a, ar)) in st.jumps.iter().zip(&st.jump_rate).enumerate() {
                    for r in 0..3 {
                        y[3 * m + r] = a[r] + ar[r] * dt;
                    }
                }
                for (col, &q) in free.iter().enumerate() {
                    let (i, j) = (q / 3, q % 3);
                    y[nj + col] = st.f[(i, j)] + st.f_rate[(i, j)] * dt;
                }
                y
            }
            Coupling::Sachs => {
                let l = self.leaves.len();
                let mut y = DVector::zeros(9 * l + 9);
                for i in 0..l {
                    let f = st.leaves[i].f + st.leaf_f_rate[i] * dt;
                    y.rows_mut(9 * i, 9).copy_from(&vec9(&f));
                }
                let p = st.p + st.p_rate * dt;
                let f = st.f + st.f_rate * dt;
                for (v, &(a, b)) in VOIGT.iter().enumerate() {
                    y[9 * l + v] = 0.5 * (p[(a, b)] + p[(b, a)]);
                }
                for (w, &(a, b)) in SKEW.iter().enumerate() {
                    y[9 * l + 6 + w] = 0.5 * (f[(a, b)] - f[(b, a)]);
                }
                y
            }
        }
    }

    fn evaluate(&self, st: &EnsembleState, aff: &Affine, y: &DVector<f64>, dt: f64) -> Result<Vec<CpUpdate>> {
        (0..self.leaves.len())
            .into_par_iter()
            .map(|i| {
                let f = &aff.g[i] * y + aff.c[i];
                cp_stress_update(&self.leaves[i], &st.leaves[i], &mat3(f.as_slice()), dt)
            })
            .collect()
    }

    fn residual(&self, aff: &Affine, y: &DVector<f64>, ups: &[CpUpdate]) -> DVector<f64> {
        let mut r = &aff.a * y + &aff.b;
        for (i, up) in ups.iter().enumerate() {
            r += &aff.h[i] * vec9(&up.p);
        }
        r
    }

    fn jacobian(&self, aff: &Affine, ups: &[CpUpdate]) -> DMatrix<f64> {
        let mut j = aff.a.clone();
        for (i, up) in ups.iter().enumerate() {
            let tg = dmat9(&up.tangent) * &aff.g[i];
            j += &aff.h[i] * tg;
        }
        j
    }

    /// Newton solve of one increment; the error carries the per-node residuals.
    fn solve(&self, st: &EnsembleState, control: &Control, dt: f64) -> std::result::Result<Solved, Vec<f64>> {
        let aff = self.affine(control);
        let mut y = self.guess(st, control, dt);
        let mut last = Vec::new();
        for _ in 0..GLOBAL_MAX_ITER {
            let ups = match self.evaluate(st, &aff, &y, dt) {
                Ok(u) => u,
                Err(_) => return Err(last),
            };
            let r = self.residual(&aff, &y, &ups);
            let pscale = ups
                .iter()
                .map(|u| u.p.norm())
                .fold(self.leaves[0].params.xi0, f64::max);
            last = self.node_residuals(&r, pscale);
            let converged = r.iter().zip(&aff.strain_row).all(|(v, strain)| {
                let scale = if *strain { 1.0 } else { pscale };
                v.abs() <= GLOBAL_TOL * scale
            });
            if !r.iter().all(|v| v.is_finite()) {
                return Err(last);
            }
            if converged {
                return Ok(Solved { aff, y, ups });
            }
            let dy = match self.jacobian(&aff, &ups).lu().solve(&-r) {
                Some(d) => d,
                None => return Err(last),
            };
            y += dy;
        }
        Err(last)
    }

    /// Relative traction mismatch per tree node (per leaf for Sachs).
    fn node_residuals(&self, r: &DVector<f64>, pscale: f64) -> Vec<f64> {
        let n = match self.coupling {
            Coupling::Laminate => self.normals.len(),
            Coupling::Taylor => 0,
            Coupling::Sachs => self.leaves.len(),
        };
        let w = if self.coupling == Coupling::Sachs { 9 } else { 3 };
        (0..n).map(|m| r.rows(w * m, w).norm() / pscale).collect()
    }

    fn commit(&self, st: &EnsembleState, s: Solved, dt: f64) -> EnsembleState {
        let Solved { aff, y, ups } = s;
        let l = self.leaves.len();
        let leaf_f: Vec<Mat3> = (0..l).map(|i| mat3((&aff.g[i] * &y + aff.c[i]).as_slice())).collect();
        let p = ups.iter().zip(&self.fractions).fold(Mat3::zeros(), |acc, (u, f)| acc + u.p * *f);
        let f = match self.coupling {
            Coupling::Sachs => leaf_f.iter().zip(&self.fractions).fold(Mat3::zeros(), |acc, (x, f)| acc + x * *f),
            _ => {
                let nj = 3 * self.normals.len();
                let mut m = mat3(aff.c[0].as_slice());
                for col in nj..y.len() {
                    let q = (0..9).find(|&q| aff.g[0][(q, col)] != 0.0).expect("free component column");
                    m[(q / 3, q % 3)] = y[col];
                }
                m
            }
        };
        let jumps: Vec<Vec3> = (0..self.normals.len())
            .map(|m| Vec3::new(y[3 * m], y[3 * m + 1], y[3 * m + 2]))
            .collect();
        EnsembleState {
            t: st.t + dt,
            f_rate: (f - st.f) / dt,
            p_rate: (p - st.p) / dt,
            f,
            p,
            leaf_f_rate: leaf_f.iter().zip(&st.leaves).map(|(x, s)| (x - s.f) / dt).collect(),
            jump_rate: jumps.iter().zip(&st.jumps).map(|(a, b)| (a - b) / dt).collect(),
            jumps,
            leaf_p: ups.iter().map(|u| u.p).collect(),
            leaves: ups.into_iter().map(|u| u.state).collect(),
        }
    }

    /// One increment to `control` over `dt`, halving on failure.
    pub fn step(&self, st: &EnsembleState, control: &Control, dt: f64) -> Result<StepReport> {
        self.step_level(st, control, dt, 0)
    }

    fn step_level(&self, st: &EnsembleState, control: &Control, dt: f64, level: usize) -> Result<StepReport> {
        match self.solve(st, control, dt) {
            Ok(s) => {
                let next = self.commit(st, s, dt);
                let hill_mandel = hill_mandel_residual(st, &next, &self.fractions);
                Ok(StepReport {
                    state: next,
                    hill_mandel,
                    halvings: level,
                })
            }
            Err(residuals) => {
                if level >= MAX_STEP_HALVINGS {
                    return Err(Error::StepFailed {
                        time: st.t + dt,
                        halvings: level,
                        node_residuals: residuals,
                    });
                }
                let mid = Control {
                    f_mask: control.f_mask,
                    f_target: (st.f + control.f_target) * 0.5,
                    p_target: (st.p + control.p_target) * 0.5,
                };
                let first = self.step_level(st, &mid, 0.5 * dt, level + 1)?;
                let second = self.step_level(&first.state, control, 0.5 * dt, level + 1)?;
                Ok(StepReport {
                    hill_mandel: first.hill_mandel.max(second.hill_mandel),
                    halvings: first.halvings.max(second.halvings),
                    state: second.state,
                })
            }
        }
    }

    /// Consistent macroscopic tangent `dP/dF` (row `3i+j`, column `3k+l`)
    /// at the committed state, with interface jumps condensed out.
    pub fn macro_tangent(&self, st: &EnsembleState, dt: f64) -> Result<Mat9> {
        let ups = self
            .leaves
            .par_iter()
            .zip(&st.leaves)
            .map(|(m, s)| cp_stress_update(m, s, &s.f, dt))
            .collect::<Result<Vec<_>>>()?;
        if self.coupling == Coupling::Sachs {
            return Err(Error::Invalid("macroscopic tangent is only defined for deformation-driven couplings".into()));
        }
        let control = Control {
            f_mask: [[false; 3]; 3],
            f_target: Mat3::zeros(),
            p_target: Mat3::zeros(),
        };
        let aff = self.affine(&control);
        let j = self.jacobian(&aff, &ups);
        let nj = 3 * self.normals.len();
        let jpf = j.view((nj, nj), (9, 9)).into_owned();
        let t = if nj == 0 {
            jpf
        } else {
            let jaa = j.view((0, 0), (nj, nj)).into_owned();
            let jaf = j.view((0, nj), (nj, 9)).into_owned();
            let jpa = j.view((nj, 0), (9, nj)).into_owned();
            let x = jaa
                .lu()
                .solve(&jaf)
                .ok_or_else(|| Error::Invalid("singular interface system".into()))?;
            jpf - jpa * x
        };
        Ok(Mat9::from_fn(|r, c| t[(r, c)]))
    }

    /// Current lattice orientation of every leaf.
    pub fn orientations(&self, st: &EnsembleState) -> Vec<Quat> {
        self.leaves
            .iter()
            .zip(&st.leaves)
            .map(|(m, s)| m.lattice_orientation(s))
            .collect()
    }
}

/// Index pairs of the three independent skew components.
const SKEW: [(usize, usize); 3] = [(1, 2), (0, 2), (0, 1)];

fn dmat9(t: &Mat9) -> DMatrix<f64> {
    DMatrix::from_fn(9, 9, |r, c| t[(r, c)])
}

struct Affine {
    g: Vec<DMatrix<f64>>,
    c: Vec<Vec9>,
    h: Vec<DMatrix<f64>>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    strain_row: Vec<bool>,
}

impl Affine {
    fn new(leaves: usize, k: usize) -> Self {
        Affine {
            g: vec![DMatrix::zeros(9, k); leaves],
            c: vec![Vec9::zeros(); leaves],
            h: vec![DMatrix::zeros(k, 9); leaves],
            a: DMatrix::zeros(k, k),
            b: DVector::zeros(k),
            strain_row: vec![false; k],
        }
    }
}

struct Solved {
    aff: Affine,
    y: DVector<f64>,
    ups: Vec<CpUpdate>,
}

/// Committed state of an ensemble.
#[derive(Clone, Debug)]
pub struct EnsembleState {
    pub t: f64,
    /// Macroscopic deformation gradient and first Piola-Kirchhoff stress.
    pub f: Mat3,
    pub p: Mat3,
    pub f_rate: Mat3,
    pub p_rate: Mat3,
    pub leaves: Vec<MaterialState>,
    pub leaf_p: Vec<Mat3>,
    pub leaf_f_rate: Vec<Mat3>,
    /// Interface jump vector per tree node.
    pub jumps: Vec<Vec3>,
    pub jump_rate: Vec<Vec3>,
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub state: EnsembleState,
    pub hill_mandel: f64,
    pub halvings: usize,
}

/// `|sum f_i P_i : dF_i - P : dF| / sum f_i |P_i : dF_i|` over one increment.
pub fn hill_mandel_residual(prev: &EnsembleState, next: &EnsembleState, fractions: &[f64]) -> f64 {
    let mut micro = 0.0;
    let mut scale = 0.0;
    for ((s0, s1), (p, f)) in prev.leaves.iter().zip(&next.leaves).zip(next.leaf_p.iter().zip(fractions)) {
        let w = p.dot(&(s1.f - s0.f)) * f;
        micro += w;
        scale += w.abs();
    }
    let macro_work = next.p.dot(&(next.f - prev.f));
    if scale == 0.0 {
        return 0.0;
    }
    (micro - macro_work).abs() / scale
}

/// Targets of one increment: `F_ij` where `f_mask` is set, `P_ij` elsewhere.
#[derive(Clone, Debug)]
pub struct Control {
    pub f_mask: [[bool; 3]; 3],
    pub f_target: Mat3,
    pub p_target: Mat3,
}

/// End condition of a load segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Until {
    Steps { count: usize },
    /// Controlled `F_ij` reaches `value`; the last increment is shortened.
    FReaches { i: usize, j: usize, value: f64 },
    /// `P_ij` crosses `value`.
    PCrosses { i: usize, j: usize, value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSegment {
    /// `true` where the deformation gradient rate is prescribed.
    pub f_mask: [[bool; 3]; 3],
    pub f_rate: [[f64; 3]; 3],
    /// Stress held on the complementary components.
    pub p_target: [[f64; 3]; 3],
    pub until: Until,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadProgram {
    pub dt: f64,
    pub segments: Vec<LoadSegment>,
    /// Texture snapshot interval in steps; 0 records only the end points.
    #[serde(default)]
    pub snapshot_every: usize,
}

const STEP_CAP: usize = 1_000_000;

impl LoadProgram {
    fn uniaxial_segment(rate: f64, until: Until) -> LoadSegment {
        let mut f_mask = [[true; 3]; 3];
        f_mask[1][1] = false;
        f_mask[2][2] = false;
        let mut f_rate = [[0.0; 3]; 3];
        f_rate[0][0] = rate;
        LoadSegment {
            f_mask,
            f_rate,
            p_target: [[0.0; 3]; 3],
            until,
        }
    }

    /// Load along x to `F11 = peak`, unload to zero axial stress, reload to `peak`.
    pub fn uniaxial_cyclic(peak: f64, dt: f64) -> Self {
        let to_peak = Until::FReaches {
            i: 0,
            j: 0,
            value: peak,
        };
        LoadProgram {
            dt,
            segments: vec![
                Self::uniaxial_segment(1.0, to_peak.clone()),
                Self::uniaxial_segment(
                    -1.0,
                    Until::PCrosses {
                        i: 0,
                        j: 0,
                        value: 0.0,
                    },
                ),
                Self::uniaxial_segment(1.0, to_peak),
            ],
            snapshot_every: 0,
        }
    }

    /// Monotonic uniaxial extension to `F11 = peak`.
    pub fn uniaxial(peak: f64, dt: f64) -> Self {
        let mut p = Self::uniaxial_cyclic(peak, dt);
        p.segments.truncate(1);
        p
    }

    /// Fully prescribed simple shear `F21` at unit rate up to `amount`.
    pub fn simple_shear(amount: f64, dt: f64) -> Self {
        let mut f_rate = [[0.0; 3]; 3];
        f_rate[1][0] = 1.0;
        LoadProgram {
            dt,
            segments: vec![LoadSegment {
                f_mask: [[true; 3]; 3],
                f_rate,
                p_target: [[0.0; 3]; 3],
                until: Until::FReaches {
                    i: 1,
                    j: 0,
                    value: amount,
                },
            }],
            snapshot_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Invalid("time step must be positive".into()));
        }
        if self.segments.is_empty() {
            return Err(Error::Invalid("load program has no segments".into()));
        }
        for (k, s) in self.segments.iter().enumerate() {
            let bad = |m: String| Err(Error::Invalid(format!("segment {k}: {m}")));
            if s.f_rate.iter().flatten().chain(s.p_target.iter().flatten()).any(|v| !v.is_finite()) {
                return bad("non-finite rate or target".into());
            }
            match s.until {
                Until::Steps { count } if count == 0 || count > STEP_CAP => return bad("step count out of range".into()),
                Until::FReaches { i, j, .. } | Until::PCrosses { i, j, .. } if i > 2 || j > 2 => {
                    return bad("component index out of range".into())
                }
                Until::FReaches { i, j, value } => {
                    if !s.f_mask[i][j] || s.f_rate[i][j] == 0.0 {
                        return bad("end component must be driven at a nonzero rate".into());
                    }
                    if !value.is_finite() {
                        return bad("non-finite end value".into());
                    }
                }
                Until::PCrosses { i, j, value } if !s.f_mask[i][j] || !value.is_finite() => {
                    return bad("crossing component must be deformation controlled".into());
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub t: f64,
    pub f: Mat3,
    pub p: Mat3,
    pub hill_mandel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextureSnapshot {
    pub t: f64,
    pub fractions: Vec<f64>,
    pub orientations: Vec<Quat>,
}

#[derive(Clone, Debug)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    pub snapshots: Vec<TextureSnapshot>,
    pub max_hill_mandel: f64,
    pub max_halvings: usize,
    pub final_state: EnsembleState,
}

impl History {
    /// `t`, nine `F` components and nine `P` components per row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for name in ["F", "P"] {
            for i in 1..=3 {
                for j in 1..=3 {
                    s.push_str(&format!(",{name}{i}{j}"));
                }
            }
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:e}", r.t));
            for m in [&r.f, &r.p] {
                for i in 0..3 {
                    for j in 0..3 {
                        s.push_str(&format!(",{:e}", m[(i, j)]));
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    /// One line per leaf and snapshot: `t,leaf,fraction,w,x,y,z`.
    pub fn snapshots_csv(&self) -> String {
        let mut s = String::from("t,leaf,fraction,w,x,y,z\n");
        for snap in &self.snapshots {
            for (k, (q, f)) in snap.orientations.iter().zip(&snap.fractions).enumerate() {
                s.push_str(&format!(
                    "{:e},{k},{:e},{:e},{:e},{:e},{:e}\n",
                    snap.t, f, q.w, q.x, q.y, q.z
                ));
            }
        }
        s
    }

    pub fn peak_stress(&self, i: usize, j: usize) -> f64 {
        self.rows.iter().map(|r| r.p[(i, j)].abs()).fold(0.0, f64::max)
    }
}

fn snapshot(ens: &Ensemble, st: &EnsembleState) -> TextureSnapshot {
    TextureSnapshot {
        t: st.t,
        fractions: ens.fractions.clone(),
        orientations: ens.orientations(st),
    }
}

/// Drives `ens` through `program` from the undeformed state.
pub fn run_program(ens: &Ensemble, program: &LoadProgram) -> Result<History> {
    program.validate()?;
    let mut st = ens.initial_state();
    let mut rows = vec![HistoryRow {
        t: 0.0,
        f: st.f,
        p: st.p,
        hill_mandel: 0.0,
    }];
    let mut snapshots = vec![snapshot(ens, &st)];
    let (mut max_hm, mut max_halvings, mut steps) = (0.0f64, 0usize, 0usize);
    for seg in &program.segments {
        let rate = Mat3::from_fn(|i, j| seg.f_rate[i][j]);
        let p_target = Mat3::from_fn(|i, j| seg.p_target[i][j]);
        let start_sign = match seg.until {
            Until::PCrosses { i, j, value } => (st.p[(i, j)] - value).signum(),
            _ => 0.0,
        };
        let mut k = 0;
        loop {
            let mut dt = program.dt;
            let mut last = false;
            if let Until::FReaches { i, j, value } = seg.until {
                let remaining = (value - st.f[(i, j)]) / rate[(i, j)];
                // Accumulated roundoff must not leave a sliver step behind.
                if remaining <= 1e-9 * program.dt {
                    break;
                }
                if remaining <= program.dt * (1.0 + 1e-9) {
                    dt = remaining;
                    last = true;
                }
            }
            let mut f_target = st.f + rate * dt;
            if let Until::FReaches { i, j, value } = seg.until {
                if last {
                    f_target[(i, j)] = value;
                }
            }
            let control = Control {
                f_mask: seg.f_mask,
                f_target,
                p_target,
            };
            let rep = ens.step(&st, &control, dt)?;
            st = rep.state;
            max_hm = max_hm.max(rep.hill_mandel);
            max_halvings = max_halvings.max(rep.halvings);
            rows.push(HistoryRow {
                t: st.t,
                f: st.f,
                p: st.p,
                hill_mandel: rep.hill_mandel,
            });
            k += 1;
            steps += 1;
            if program.snapshot_every > 0 && steps % program.snapshot_every == 0 {
                snapshots.push(snapshot(ens, &st));
            }
            let done = match seg.until {
                Until::Steps { count } => k >= count,
                Until::PCrosses { i, j, value } => (st.p[(i, j)] - value).signum() != start_sign,
                Until::FReaches { .. } => last,
            };
            if done {
                break;
            }
            if k >= STEP_CAP {
                return Err(Error::Invalid("load segment never reached its end condition".into()));
            }
        }
    }
    if snapshots.last().map(|s| s.t) != Some(st.t) {
        snapshots.push(snapshot(ens, &st));
    }
    Ok(History {
        rows,
        snapshots,
        max_hill_mandel: max_hm,
        max_halvings,
        final_state: st,
    })
}

/// Voigt stiffness (engineering shear) of a small-strain tangent at `F = I`.
pub fn tangent_to_voigt(t: &Mat9) -> Mat6 {
    let mut c = Mat6::zeros();
    for (b, &(k, l)) in VOIGT.iter().enumerate() {
        let mut df = SMatrix::<f64, 9, 1>::zeros();
        if k == l {
            df[3 * k + l] = 1.0;
        } else {
            df[3 * k + l] = 0.5;
            df[3 * l + k] = 0.5;
        }
        let dp = t * df;
        for i in 0..3 {
            for j in i..3 {
                c[(voigt_index(i, j), b)] = 0.5 * (dp[3 * i + j] + dp[3 * j + i]);
            }
        }
    }
    c
}
