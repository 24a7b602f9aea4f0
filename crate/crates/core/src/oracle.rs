//! Linear-elastic FFT homogenization on periodic voxel grids.
//!
//! Basic fixed-point scheme in strain form: `eps_hat <- eps_hat - Gamma0 : sigma_hat`
//! at every nonzero frequency, `eps_hat(0) = E`. The isotropic reference
//! medium sits at the midpoint of the Mandel eigenvalue range of all phases,
//! `3 K0 = 2 mu0 = (e_min + e_max) / 2`, which makes the iteration a
//! contraction with rate `(e_max - e_min) / (e_max + e_min)`.
//!
//! Convergence uses `sqrt(mean_xi |xi . sigma_hat|^2) / |sigma_hat(0)|`.

use std::sync::Arc;

use nalgebra::{SymmetricEigen, Vector6};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rotlab::{cubic_stiffness, rotate_stiffness, Mat6, Stiffness};
use crate::rvegen::{CubicTriple, VoxelRve};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 2000;
const LABEL_MAGIC: &[u8; 4] = b"TXLB";
pub const LABEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FftConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FftConfig {
    fn default() -> Self {
        FftConfig {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

const MANDEL: [f64; 6] = [1.0, 1.0, 1.0, std::f64::consts::SQRT_2, std::f64::consts::SQRT_2, std::f64::consts::SQRT_2];

fn mandel_eigenvalues(c: &Mat6) -> Vector6<f64> {
    let m = Mat6::from_fn(|i, j| c[(i, j)] * MANDEL[i] * MANDEL[j]);
    SymmetricEigen::new(0.5 * (m + m.transpose())).eigenvalues
}

struct Fft3 {
    dims: [usize; 3],
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
}

impl Fft3 {
    fn new(dims: [usize; 3]) -> Self {
        let mut planner = FftPlanner::new();
        Fft3 {
            dims,
            forward: dims.map(|n| planner.plan_fft_forward(n)),
            inverse: dims.map(|n| planner.plan_fft_inverse(n)),
        }
    }

    /// Unnormalized transform in place; the inverse is not scaled.
    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let [nx, ny, nz] = self.dims;
        let plans = if inverse { &self.inverse } else { &self.forward };
        let mut scratch = vec![Complex64::default(); plans.iter().map(|p| p.get_inplace_scratch_len()).max().unwrap()];
        for line in data.chunks_exact_mut(nz) {
            plans[2].process_with_scratch(line, &mut scratch);
        }
        let mut buf = vec![Complex64::default(); nx.max(ny)];
        for i in 0..nx {
            for k in 0..nz {
                let b = &mut buf[..ny];
                for j in 0..ny {
                    b[j] = data[(i * ny + j) * nz + k];
                }
                plans[1].process_with_scratch(b, &mut scratch);
                for j in 0..ny {
                    data[(i * ny + j) * nz + k] = b[j];
                }
            }
        }
        for j in 0..ny {
            for k in 0..nz {
                let b = &mut buf[..nx];
                for i in 0..nx {
                    b[i] = data[(i * ny + j) * nz + k];
                }
                plans[0].process_with_scratch(b, &mut scratch);
                for i in 0..nx {
                    data[(i * ny + j) * nz + k] = b[i];
                }
            }
        }
    }
}

/// Angular frequency per voxel. The Nyquist component of an even axis is
/// zeroed: its conjugate partner is itself, so any nonzero value there would
/// break the Hermitian symmetry of mixed-frequency updates.
fn frequency(k: usize, n: usize) -> f64 {
    if n.is_multiple_of(2) && k == n / 2 {
        return 0.0;
    }
    let f = if k < n / 2 + 1 { k as f64 } else { k as f64 - n as f64 };
    2.0 * std::f64::consts::PI * f / n as f64
}

#[derive(Clone, Debug)]
pub struct FftProblem {
    pub dims: [usize; 3],
    pub phase: Vec<u32>,
    pub stiffness: Vec<Stiffness>,
    pub lambda0: f64,
    pub mu0: f64,
    pub config: FftConfig,
}

impl FftProblem {
    /// Per-voxel phase map plus one stiffness per phase.
    pub fn new(dims: [usize; 3], phase: Vec<u32>, stiffness: Vec<Stiffness>, config: FftConfig) -> Result<Self> {
        if dims.contains(&0) || phase.len() != dims.iter().product::<usize>() {
            return Err(Error::Invalid("phase map does not match grid dims".into()));
        }
        if phase.iter().any(|p| *p as usize >= stiffness.len()) {
            return Err(Error::Invalid("phase id without a stiffness".into()));
        }
        if !(config.tol > 0.0) || config.max_iter == 0 {
            return Err(Error::Invalid("tolerance and iteration cap must be positive".into()));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &stiffness {
            if c.asymmetry() > 1e-10 * c.frobenius() {
                return Err(Error::Inadmissible("phase stiffness is not symmetric".into()));
            }
            let e = mandel_eigenvalues(&c.0);
            if !(e.min() > 0.0) {
                return Err(Error::Inadmissible(format!("phase stiffness not positive definite (min eigenvalue {})", e.min())));
            }
            lo = lo.min(e.min());
            hi = hi.max(e.max());
        }
        let c0 = 0.5 * (lo + hi);
        Ok(FftProblem {
            dims,
            phase,
            stiffness,
            lambda0: 0.0,
            mu0: 0.5 * c0,
            config,
        })
    }

    /// Grain stiffness `C` rotated by each grain orientation.
    pub fn from_rve(rve: &VoxelRve, crystal: &Stiffness, config: FftConfig) -> Result<Self> {
        rve.validate()?;
        let stiffness = rve.orientations.iter().map(|q| rotate_stiffness(crystal, q)).collect();
        FftProblem::new(rve.dims, rve.grain_ids.clone(), stiffness, config)
    }

    fn voxels(&self) -> usize {
        self.phase.len()
    }
}

#[derive(Clone, Debug)]
pub struct LoadCaseResult {
    /// Volume-average stress, Voigt order.
    pub stress: Vector6<f64>,
    pub iterations: usize,
    pub residuals: Vec<f64>,
}

fn tensor_from_voigt_stress(s: &[Complex64; 6]) -> [[Complex64; 3]; 3] {
    [[s[0], s[5], s[4]], [s[5], s[1], s[3]], [s[4], s[3], s[2]]]
}

/// Average stress under macro strain `strain` (engineering shear).
pub fn solve_load_case(p: &FftProblem, strain: &Vector6<f64>) -> Result<LoadCaseResult> {
    let fft = Fft3::new(p.dims);
    let n = p.voxels();
    let [nx, ny, nz] = p.dims;
    let nf = n as f64;
    let mut eps: Vec<[f64; 6]> = vec![std::array::from_fn(|a| strain[a]); n];
    let mut eps_hat: Vec<Vec<Complex64>> = (0..6)
        .map(|a| {
            let mut v = vec![Complex64::default(); n];
            v[0] = Complex64::new(strain[a] * nf, 0.0);
            v
        })
        .collect();
    let mut sig_hat: Vec<Vec<Complex64>> = vec![vec![Complex64::default(); n]; 6];
    let xi: Vec<[f64; 3]> = (0..n)
        .map(|idx| {
            let (i, j, k) = (idx / (ny * nz), (idx / nz) % ny, idx % nz);
            [frequency(i, nx), frequency(j, ny), frequency(k, nz)]
        })
        .collect();
    let (l0, m0) = (p.lambda0, p.mu0);
    let coef = (l0 + m0) / (m0 * (l0 + 2.0 * m0));
    let mut residuals = Vec::new();
    for it in 0..p.config.max_iter {
        for (idx, e) in eps.iter().enumerate() {
            let c = &p.stiffness[p.phase[idx] as usize].0;
            for a in 0..6 {
                let mut s = 0.0;
                for b in 0..6 {
                    s += c[(a, b)] * e[b];
                }
                sig_hat[a][idx] = Complex64::new(s, 0.0);
            }
        }
        sig_hat.par_iter_mut().for_each(|comp| fft.run(comp, false));

        let mut div2 = 0.0;
        for idx in 1..n {
            let s = tensor_from_voigt_stress(&std::array::from_fn(|a| sig_hat[a][idx]));
            for row in &s {
                let d = row[0] * xi[idx][0] + row[1] * xi[idx][1] + row[2] * xi[idx][2];
                div2 += d.norm_sqr();
            }
        }
        let s0 = tensor_from_voigt_stress(&std::array::from_fn(|a| sig_hat[a][0]));
        let norm0 = s0.iter().flatten().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        let err = if norm0 > 0.0 { (div2 / nf).sqrt() / norm0 } else { 0.0 };
        residuals.push(err);
        if !err.is_finite() {
            return Err(Error::NotConverged {
                what: "fft load case",
                iterations: it,
                last: err,
                history: residuals,
            });
        }
        if err < p.config.tol {
            let stress = Vector6::from_fn(|a, _| sig_hat[a][0].re / nf);
            return Ok(LoadCaseResult {
                stress,
                iterations: it,
                residuals,
            });
        }

        for idx in 1..n {
            let x = xi[idx];
            let len = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            if len == 0.0 {
                continue;
            }
            let nv = [x[0] / len, x[1] / len, x[2] / len];
            let tau = tensor_from_voigt_stress(&std::array::from_fn(|a| sig_hat[a][idx]));
            let t: [Complex64; 3] = std::array::from_fn(|i| tau[i][0] * nv[0] + tau[i][1] * nv[1] + tau[i][2] * nv[2]);
            let ntn = t[0] * nv[0] + t[1] * nv[1] + t[2] * nv[2];
            let g = |h: usize, k: usize| (t[k] * nv[h] + t[h] * nv[k]) / (2.0 * m0) - ntn * (coef * nv[h] * nv[k]);
            let d = [g(0, 0), g(1, 1), g(2, 2), 2.0 * g(1, 2), 2.0 * g(0, 2), 2.0 * g(0, 1)];
            for a in 0..6 {
                eps_hat[a][idx] -= d[a];
            }
        }
        let mut fields = eps_hat.clone();
        fields.par_iter_mut().for_each(|comp| fft.run(comp, true));
        for (idx, e) in eps.iter_mut().enumerate() {
            for a in 0..6 {
                e[a] = fields[a][idx].re / nf;
            }
        }
    }
    Err(Error::NotConverged {
        what: "fft load case",
        iterations: p.config.max_iter,
        last: *residuals.last().unwrap_or(&f64::NAN),
        history: residuals,
    })
}

#[derive(Clone, Debug)]
pub struct Homogenized {
    pub stiffness: Stiffness,
    /// Relative asymmetry of the raw column assembly, before symmetrizing.
    pub asymmetry: f64,
    pub iterations: [usize; 6],
}

/// Six unit-strain load cases, assembled column-wise and symmetrized.
pub fn homogenized_stiffness(p: &FftProblem) -> Result<Homogenized> {
    let cases: Vec<LoadCaseResult> = (0..6)
        .into_par_iter()
        .map(|j| {
            let mut e = Vector6::zeros();
            e[j] = 1.0;
            solve_load_case(p, &e)
        })
        .collect::<Result<_>>()?;
    let raw = Mat6::from_fn(|i, j| cases[j].stress[i]);
    let sym = 0.5 * (raw + raw.transpose());
    let asymmetry = (raw - raw.transpose()).norm() / raw.norm();
    Ok(Homogenized {
        stiffness: Stiffness(sym),
        asymmetry,
        iterations: std::array::from_fn(|j| cases[j].iterations),
    })
}

/// One FFT label: crystal constants and the homogenized stiffness of the RVE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub triple: CubicTriple,
    pub homogenized: [f64; 21],
}

impl Label {
    pub fn crystal(&self) -> Result<Stiffness> {
        cubic_stiffness(self.triple.c11, self.triple.c12, self.triple.c44)
    }

    pub fn target(&self) -> Stiffness {
        Stiffness::from_upper_triangle(&self.homogenized)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub rve_seed: u64,
    pub labels: Vec<Label>,
}

/// FFT labels for every triple; parallel over triples, order preserved.
pub fn label_rve(rve: &VoxelRve, triples: &[CubicTriple], config: FftConfig) -> Result<LabelSet> {
    let labels = triples
        .par_iter()
        .map(|t| {
            let c = cubic_stiffness(t.c11, t.c12, t.c44)?;
            let h = homogenized_stiffness(&FftProblem::from_rve(rve, &c, config)?)?;
            Ok(Label {
                triple: *t,
                homogenized: h.stiffness.upper_triangle(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(LabelSet {
        rve_seed: rve.seed,
        labels,
    })
}

/// Binary layout (little-endian): magic `TXLB`, u32 version, u64 RVE seed,
/// u64 label count, then per label 3 + 21 f64.
pub fn encode_labels(set: &LabelSet) -> Vec<u8> {
    let mut w = Writer::new(LABEL_MAGIC, LABEL_VERSION);
    w.u64(set.rve_seed);
    w.u64(set.labels.len() as u64);
    for l in &set.labels {
        [l.triple.c11, l.triple.c12, l.triple.c44].into_iter().chain(l.homogenized).for_each(|v| w.f64(v));
    }
    w.buf
}

pub fn decode_labels(data: &[u8]) -> Result<LabelSet> {
    let mut r = Reader::open("labels", data, LABEL_MAGIC, LABEL_VERSION)?;
    let rve_seed = r.u64()?;
    let n = r.count(24 * 8)?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let triple = CubicTriple {
            c11: r.f64()?,
            c12: r.f64()?,
            c44: r.f64()?,
        };
        let mut homogenized = [0.0; 21];
        for v in &mut homogenized {
            *v = r.f64()?;
        }
        if [triple.c11, triple.c12, triple.c44].iter().chain(&homogenized).any(|v| !v.is_finite()) {
            return Err(Error::format("labels", "non-finite value"));
        }
        labels.push(Label { triple, homogenized });
    }
    r.finish()?;
    Ok(LabelSet { rve_seed, labels })
}

pub fn labels_to_csv(set: &LabelSet) -> String {
    let mut s = String::from("c11,c12,c44");
    for i in 0..6 {
        for j in i..6 {
            s.push_str(&format!(",cbar{}{}", i + 1, j + 1));
        }
    }
    s.push('\n');
    for l in &set.labels {
        let row: Vec<String> = [l.triple.c11, l.triple.c12, l.triple.c44]
            .iter()
            .chain(&l.homogenized)
            .map(|v| format!("{v:?}"))
            .collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{laminate_normal_z, reuss_bound, voigt_bound};
    use crate::rotlab::Quat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: &Mat6, b: &Mat6) -> f64 {
        (a - b).norm() / b.norm()
    }

    fn bilayer_phase(dims: [usize; 3], f1: f64) -> Vec<u32> {
        let cut = (f1 * dims[2] as f64).round() as usize;
        (0..dims.iter().product::<usize>()).map(|v| if v % dims[2] < cut { 0 } else { 1 }).collect()
    }

    #[test]
    fn fft3_round_trip_and_dc() {
        let dims = [4, 6, 5];
        let fft = Fft3::new(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let orig: Vec<Complex64> = (0..120).map(|_| Complex64::new(rng.random(), 0.0)).collect();
        let mut d = orig.clone();
        fft.run(&mut d, false);
        assert!((d[0].re - orig.iter().map(|c| c.re).sum::<f64>()).abs() < 1e-12);
        fft.run(&mut d, true);
        for (a, b) in d.iter().zip(&orig) {
            assert!((a / 120.0 - b).norm() < 1e-14);
        }
    }

    #[test]
    fn homogeneous_medium_is_exact() {
        let c = cubic_stiffness(170.0, 124.0, 75.0).unwrap();
        let p = FftProblem::new([4, 4, 4], vec![0; 64], vec![c], FftConfig::default()).unwrap();
        let e = Vector6::new(0.01, -0.002, 0.003, 0.004, 0.0, -0.001);
        let r = solve_load_case(&p, &e).unwrap();
        assert!(r.iterations <= 1);
        assert!((r.stress - c.0 * e).norm() < 1e-12 * (c.0 * e).norm());
        let h = homogenized_stiffness(&p).unwrap();
        assert!(rel(&h.stiffness.0, &c.0) < 1e-12);
    }

    #[test]
    fn bilayer_matches_laminate() {
        let dims = [4, 4, 16];
        let c1 = Stiffness::isotropic_engineering(200.0, 0.3);
        let c2 = rotate_stiffness(&cubic_stiffness(170.0, 124.0, 75.0).unwrap(), &Quat::new(0.9, 0.2, -0.3, 0.1));
        let p = FftProblem::new(dims, bilayer_phase(dims, 0.25), vec![c1, c2], FftConfig::default()).unwrap();
        let h = homogenized_stiffness(&p).unwrap();
        let oracle = laminate_normal_z(&c1.0, &c2.0, 0.25);
        assert!(rel(&h.stiffness.0, &oracle) < 1e-6, "{}", rel(&h.stiffness.0, &oracle));
        assert!(h.asymmetry < 1e-6);
    }

    #[test]
    fn checkerboard_within_bounds_and_spd() {
        let dims = [8, 8, 8];
        let phase: Vec<u32> = (0..512).map(|v| (((v / 64) + (v / 8) % 8 + v % 8) % 2) as u32).collect();
        let c1 = Stiffness::isotropic_engineering(100.0, 0.25);
        let c2 = Stiffness::isotropic_engineering(600.0, 0.35);
        let p = FftProblem::new(dims, phase, vec![c1, c2], FftConfig::default()).unwrap();
        let h = homogenized_stiffness(&p).unwrap();
        let v = voigt_bound([(&c1.0, 0.5), (&c2.0, 0.5)]);
        let r = reuss_bound([(&c1.0, 0.5), (&c2.0, 0.5)]);
        let x = nalgebra::Vector6::new(0.3, -0.2, 0.5, 0.1, 0.7, -0.4);
        let q = |m: &Mat6| (x.transpose() * m * x)[0];
        assert!(q(&r) <= q(&h.stiffness.0) && q(&h.stiffness.0) <= q(&v));
        assert!(h.stiffness.min_eigenvalue() > 0.0);
    }

    #[test]
    fn translation_invariance() {
        let dims = [8, 8, 8];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phase: Vec<u32> = (0..512).map(|_| rng.random_range(0..3)).collect();
        let cs: Vec<Stiffness> = (0..3)
            .map(|i| rotate_stiffness(&cubic_stiffness(170.0, 124.0, 75.0).unwrap(), &Quat::new(1.0, 0.3 * i as f64, 0.1, -0.2 * i as f64)))
            .collect();
        let shifted: Vec<u32> = (0..512)
            .map(|v| {
                let (i, j, k) = (v / 64, (v / 8) % 8, v % 8);
                phase[((i + 3) % 8) * 64 + ((j + 5) % 8) * 8 + (k + 1) % 8]
            })
            .collect();
        let a = homogenized_stiffness(&FftProblem::new(dims, phase, cs.clone(), FftConfig::default()).unwrap()).unwrap();
        let b = homogenized_stiffness(&FftProblem::new(dims, shifted, cs, FftConfig::default()).unwrap()).unwrap();
        assert!(rel(&a.stiffness.0, &b.stiffness.0) < 1e-5);
    }

    #[test]
    fn residual_decreases_monotonically() {
        let dims = [8, 8, 8];
        let phase: Vec<u32> = (0..512).map(|v| ((v * 7919) % 5 == 0) as u32).collect();
        let c1 = Stiffness::isotropic_engineering(60.0, 0.3);
        let c2 = Stiffness::isotropic_engineering(600.0, 0.3);
        let p = FftProblem::new(dims, phase, vec![c1, c2], FftConfig::default()).unwrap();
        let r = solve_load_case(&p, &Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.5)).unwrap();
        assert!(r.residuals.windows(2).all(|w| w[1] <= w[0]), "{:?}", r.residuals);
    }

    #[test]
    fn non_convergence_reports_history() {
        let dims = [4, 4, 8];
        let c1 = Stiffness::isotropic_engineering(10.0, 0.3);
        let c2 = Stiffness::isotropic_engineering(1000.0, 0.3);
        let cfg = FftConfig { tol: 1e-14, max_iter: 3 };
        let p = FftProblem::new(dims, bilayer_phase(dims, 0.5), vec![c1, c2], cfg).unwrap();
        match solve_load_case(&p, &Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)) {
            Err(Error::NotConverged { history, .. }) => assert_eq!(history.len(), 3),
            other => panic!("{other:?}"),
        }
        let bad = Stiffness(Mat6::identity() * -1.0);
        assert!(FftProblem::new(dims, vec![0; 128], vec![bad], FftConfig::default()).is_err());
    }

    #[test]
    fn labels_round_trip() {
        let set = LabelSet {
            rve_seed: 7,
            labels: vec![Label {
                triple: CubicTriple { c11: 170.0, c12: 124.0, c44: 75.0 },
                homogenized: std::array::from_fn(|i| i as f64 * 0.1 + 1.0 / 3.0),
            }],
        };
        let b = encode_labels(&set);
        assert_eq!(decode_labels(&b).unwrap(), set);
        assert!(decode_labels(&b[..b.len() - 8]).is_err());
        assert_eq!(labels_to_csv(&set).lines().count(), 2);
    }
}
