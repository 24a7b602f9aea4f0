//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Oracles here are written independently
//! of the library code they check.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use texnet::block::{homogenize_block, BlockInput};
use texnet::cponline::{
    cp_stress_update, export_analogous_unit_cell, run_program, slip_rate, tangent_to_voigt, CpParams, CrystalModel,
    Ensemble, LoadProgram, MaterialState, Mat9,
};
use texnet::dataset::{ablate_depths, build_dataset, generate_rves, Dataset, DatasetConfig};
use texnet::gnn::{pipeline_loss, train_end_to_end, GnnModel, GnnSample, GnnTrainConfig};
use texnet::metrics::{relative_errors, texture_index};
use texnet::odmn::{batch_loss, forward_homogenize, train_standalone, OdmnParams, StandaloneConfig, StiffnessPair};
use texnet::oracle::{homogenized_stiffness, FftConfig, FftProblem};
use texnet::rotlab::{
    cubic_stiffness, equilibrium_direction, to_fcc_fundamental_zone, Mat3, Mat6, Quat, Stiffness, TaitBryan, VOIGT,
};
use texnet::rvegen::{sample_orientation, TextureClass};
use texnet::tacs::{build_histogram, tacs_run, OdfHistogram, TacsConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- oracles

type T4 = [[[[f64; 3]; 3]; 3]; 3];

fn tensor4(c: &Mat6) -> T4 {
    let v = |i: usize, j: usize| VOIGT.iter().position(|&(a, b)| (a, b) == (i.min(j), i.max(j))).unwrap();
    let mut t = [[[[0.0; 3]; 3]; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                for l in 0..3 {
                    t[i][j][k][l] = c[(v(i, j), v(k, l))];
                }
            }
        }
    }
    t
}

/// Two-phase laminate with normal `n`:
/// `<C> - f1 f2 dC : [n (x) (f2 K1 + f1 K2)^-1 (x) n] : dC`, `K_i = n.C_i.n`.
fn laminate_oracle(c1: &Mat6, c2: &Mat6, f1: f64, n: [f64; 3]) -> Mat6 {
    let f2 = 1.0 - f1;
    let (t1, t2) = (tensor4(c1), tensor4(c2));
    let mut k = nalgebra::Matrix3::<f64>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            for p in 0..3 {
                for q in 0..3 {
                    k[(i, j)] += n[p] * (f2 * t1[p][i][j][q] + f1 * t2[p][i][j][q]) * n[q];
                }
            }
        }
    }
    let kinv = k.try_inverse().unwrap();
    let mut out = Mat6::zeros();
    for (a, &(i, j)) in VOIGT.iter().enumerate() {
        for (b, &(kk, ll)) in VOIGT.iter().enumerate() {
            let mut corr = 0.0;
            for p in 0..3 {
                for q in 0..3 {
                    for r in 0..3 {
                        for s in 0..3 {
                            let d1 = t1[i][j][p][q] - t2[i][j][p][q];
                            let d2 = t1[r][s][kk][ll] - t2[r][s][kk][ll];
                            corr += d1 * n[q] * kinv[(p, r)] * n[s] * d2;
                        }
                    }
                }
            }
            out[(a, b)] = f1 * t1[i][j][kk][ll] + f2 * t2[i][j][kk][ll] - f1 * f2 * corr;
        }
    }
    out
}

fn rel(a: &Mat6, b: &Mat6) -> f64 {
    (a - b).norm() / b.norm()
}

fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
    TaitBryan::new(rng.random_range(-3.1..3.1), rng.random_range(-1.5..1.5), rng.random_range(-3.1..3.1)).to_quat()
}

fn random_params(depth: usize, rng: &mut ChaCha8Rng) -> OdmnParams {
    let quats: Vec<Quat> = (0..1 << depth).map(|_| random_quat(rng)).collect();
    let mut p = OdmnParams::with_orientations(depth, &quats, rng.random()).unwrap();
    p.z.iter_mut().for_each(|z| *z = rng.random_range(-1.0..2.0));
    p
}

/// Fourth-order central difference with a relative noise floor.
fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&k| {
            let at = |d: f64| {
                let mut y = x.to_vec();
                y[k] += d;
                f(&y)
            };
            (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
        })
        .collect()
}

fn max_rel(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic.iter().zip(fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

// ---------------------------------------------------------------- criteria

fn laminate_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let iso = |rng: &mut ChaCha8Rng| {
            Stiffness::isotropic_engineering(rng.random_range(1.0..300.0), rng.random_range(-0.5..0.45))
        };
        let (c1, c2) = (iso(&mut rng), iso(&mut rng));
        let input = BlockInput {
            c1,
            c2,
            w1: rng.random_range(0.05..3.0),
            w2: rng.random_range(0.05..3.0),
            theta: rng.random_range(0.0..1.0),
            phi: rng.random_range(0.0..1.0),
        };
        let got = homogenize_block(&input).unwrap().0;
        let n = equilibrium_direction(input.theta, input.phi).0;
        let want = laminate_oracle(&c1.0, &c2.0, input.w1 / (input.w1 + input.w2), [n.x, n.y, n.z]);
        worst = worst.max(rel(&got, &want));
    }
    outcome(worst < 1e-10, format!("max relative Frobenius error {worst:.2e} (< 1e-10)"))
}

fn fft_vs_laminate() -> Outcome {
    let dims = [16, 16, 16];
    let phase: Vec<u32> = (0..4096).map(|idx| u32::from(idx % 16 >= 8)).collect();
    let c1 = cubic_stiffness(170.0, 120.0, 75.0).unwrap();
    let c2 = Stiffness::isotropic_engineering(70.0, 0.33);
    let cfg = FftConfig { tol: 1e-10, max_iter: 2000 };
    let h = homogenized_stiffness(&FftProblem::new(dims, phase, vec![c1, c2], cfg).unwrap()).unwrap();
    let want = laminate_oracle(&c1.0, &c2.0, 0.5, [0.0, 0.0, 1.0]);
    let e = rel(&h.stiffness.0, &want);
    outcome(e < 1e-4, format!("bilayer 16^3 relative error {e:.2e} (< 1e-4)"))
}

fn odmn_gradients() -> Outcome {
    let mut worst = 0.0f64;
    for depth in [2, 3, 4] {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let params = random_params(depth, &mut rng);
            let teacher = random_params(depth, &mut rng);
            let pairs: Vec<StiffnessPair> = (0..3)
                .map(|_| {
                    let c11 = rng.random_range(80.0..300.0);
                    let crystal = cubic_stiffness(c11, c11 * rng.random_range(0.2..0.8), c11 * rng.random_range(0.1..0.6)).unwrap();
                    StiffnessPair {
                        crystal,
                        target: forward_homogenize(&teacher, &crystal).unwrap(),
                    }
                })
                .collect();
            let x = params.to_flat();
            let g = batch_loss(&params, &pairs, true).unwrap().1.unwrap();
            let f = |y: &[f64]| {
                let mut p = params.clone();
                p.set_flat(y);
                batch_loss(&p, &pairs, false).unwrap().0
            };
            let coords: Vec<usize> = (0..x.len()).collect();
            let fd = fd_grad(&f, &x, &coords, 1e-4);
            worst = worst.max(max_rel(&g, &fd));
        }
    }
    outcome(worst < 1e-5, format!("max relative gradient error {worst:.2e} over N in {{2,3,4}} x 3 seeds (< 1e-5)"))
}

fn standalone_fit() -> Outcome {
    let cfg = DatasetConfig {
        seed: 41,
        classes: vec![TextureClass::WeakTwo],
        rves_per_class: 1,
        triples_per_rve: 200,
        depths: vec![5],
        fft: FftConfig { tol: 1e-6, max_iter: 2000 },
        ..Default::default()
    };
    let ds = build_dataset(&cfg, &generate_rves(&cfg).unwrap()).unwrap();
    let e = &ds.entries[0];
    let pairs = e.pairs().unwrap();
    let p0 = OdmnParams::with_orientations(5, &e.depth(5).unwrap().orientations, 5).unwrap();
    let sc = StandaloneConfig {
        epochs: 200,
        ..Default::default()
    };
    let out = train_standalone(&pairs, &p0, &sc).unwrap();
    let last = out.history.last().unwrap();
    let pass = last.train < 0.03 && out.best_val < 0.03;
    outcome(
        pass,
        format!(
            "N=5, 200 pairs: final train loss {:.4e}, best val {:.4e} (< 0.03)",
            last.train, out.best_val
        ),
    )
}

fn desk_dataset() -> Dataset {
    let cfg = DatasetConfig {
        seed: 2024,
        rves_per_class: 2,
        triples_per_rve: 50,
        depths: vec![3, 4, 5],
        fft: FftConfig { tol: 1e-6, max_iter: 2000 },
        ..Default::default()
    };
    build_dataset(&cfg, &generate_rves(&cfg).unwrap()).unwrap()
}

fn end_to_end(ds: &Dataset) -> Outcome {
    let train = ds.samples(4, None).unwrap();
    let model0 = GnnModel::new(4, 3).unwrap();
    let cfg = GnnTrainConfig {
        epochs: 100,
        patience: 0,
        seed: 3,
        ..Default::default()
    };
    let out = train_end_to_end(&model0, &train, &[], &cfg).unwrap();
    let loss = pipeline_loss(&out.model, &train, false).unwrap().0;

    // Gradient check on a small slice of the data and a random weight subset.
    let small: Vec<GnnSample> = train
        .iter()
        .take(2)
        .map(|s| GnnSample {
            pairs: s.pairs[..4].to_vec(),
            ..s.clone()
        })
        .collect();
    let model = &out.model;
    let x = model.to_flat();
    let g = pipeline_loss(model, &small, true).unwrap().1.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let coords: Vec<usize> = (0..300).map(|_| rng.random_range(0..x.len())).collect();
    let f = |y: &[f64]| {
        let mut m = model.clone();
        m.set_flat(y);
        pipeline_loss(&m, &small, false).unwrap().0
    };
    // Much smaller step than for the smooth network loss: ReLU kinks sit
    // within 1e-5 of some trained weights, and roundoff stays near 1e-8 of
    // the gradient scale at this step.
    let fd = fd_grad(&f, &x, &coords, 1e-6);
    let picked: Vec<f64> = coords.iter().map(|&k| g[k]).collect();
    let ge = max_rel(&picked, &fd);
    outcome(
        loss < 0.05 && ge < 1e-4,
        format!(
            "8 RVEs, N=4: training loss {loss:.4e} after {} epochs (< 0.05); gradient error {ge:.2e} on 300 weights (< 1e-4)",
            out.history.len() - 1
        ),
    )
}

fn ablation(ds: &Dataset) -> Outcome {
    let cfg = GnnTrainConfig {
        epochs: 100,
        seed: 11,
        ..Default::default()
    };
    let rows = ablate_depths(ds, &[3, 4, 5], &cfg).unwrap();
    let vals: Vec<f64> = rows.iter().map(|r| r.best_val).collect();
    let pass = vals.windows(2).all(|w| w[1] <= w[0]);
    outcome(pass, format!("best validation loss N=3,4,5: {:.4e}, {:.4e}, {:.4e} (non-increasing)", vals[0], vals[1], vals[2]))
}

fn tacs_texture_index(class: TextureClass, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = class.spec();
    let qs: Vec<Quat> = (0..4000).map(|_| to_fcc_fundamental_zone(&sample_orientation(&spec, &mut rng))).collect();
    let w = vec![1.0; qs.len()];
    let res = tacs_run(&qs, &w, 7, &TacsConfig::default()).unwrap();
    let reference = build_histogram(&qs, &w, 512).unwrap();
    let sample = build_histogram(&res.sample, &vec![1.0; res.sample.len()], 512).unwrap();
    texture_index(&sample, &reference).unwrap()
}

fn tacs_fidelity() -> Outcome {
    let strong = tacs_texture_index(TextureClass::StrongOne, 7);
    let weak = tacs_texture_index(TextureClass::WeakOne, 7);
    outcome(
        strong < weak && strong < 1e-2,
        format!("N=7: T^d strong {strong:.3e}, weak {weak:.3e} (strong < weak, strong < 1e-2)"),
    )
}

fn cp_unit() -> Outcome {
    let p = CpParams::default();
    let r1 = slip_rate(p.xi0, p.xi0, &p);
    let r2 = slip_rate(2.0 * p.xi0, p.xi0, &p);
    let want2 = 0.001 * 2f64.powi(20);
    let probe = (r1 - 0.001).abs() <= f64::EPSILON * 0.001 && (r2 - want2).abs() <= 2.0 * f64::EPSILON * want2;

    let m = CrystalModel::new(&p, TaitBryan::new(0.2, 0.5, 0.9).to_quat()).unwrap();
    let uni = |e: f64| Mat3::new(1.0 + e, 0.0, 0.0, 0.0, 1.0 - 0.4 * e, 0.0, 0.0, 0.0, 1.0 - 0.4 * e);
    let mut st = MaterialState::initial(&p);
    for k in 1..=8 {
        st = cp_stress_update(&m, &st, &uni(1e-3 * k as f64), 1e-3).unwrap().state;
    }
    let f = uni(9e-3) + Mat3::new(0.0, 5e-4, 0.0, 0.0, 0.0, -2e-4, 1e-4, 0.0, 0.0);
    let up = cp_stress_update(&m, &st, &f, 1e-3).unwrap();
    let h = 1e-7;
    let mut fd = Mat9::zeros();
    for col in 0..9 {
        let mut df = Mat3::zeros();
        df[(col / 3, col % 3)] = h;
        let d = (cp_stress_update(&m, &st, &(f + df), 1e-3).unwrap().p - cp_stress_update(&m, &st, &(f - df), 1e-3).unwrap().p) / (2.0 * h);
        for row in 0..9 {
            fd[(row, col)] = d[(row / 3, row % 3)];
        }
    }
    let tangent_err = (up.tangent - fd).norm() / fd.norm();

    let mut st = MaterialState::initial(&p);
    let mut drift = 0.0f64;
    for k in 1..=1000 {
        let e = 0.08 * (k as f64 * std::f64::consts::PI / 250.0).sin();
        let shear = Mat3::new(0.0, 0.3 * e, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        st = cp_stress_update(&m, &st, &(uni(e) + shear), 1e-3).unwrap().state;
        drift = drift.max((st.fp.determinant() - 1.0).abs());
    }
    outcome(
        probe && tangent_err < 1e-5 && drift < 1e-6,
        format!(
            "slip rate {r1:e} / {r2:e} (exact: {probe}); tangent vs FD {tangent_err:.2e} (< 1e-5); det Fp drift {drift:.2e} over 1000 steps (< 1e-6)"
        ),
    )
}

fn online_consistency() -> Outcome {
    let cp = CpParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let q = random_quat(&mut rng);
    let program = LoadProgram::uniaxial_cyclic(1.3, 1e-3);

    let mut homogeneous = random_params(3, &mut rng);
    homogeneous.orientations = vec![TaitBryan::from_quat(&q); 8];
    let net = run_program(&Ensemble::network(&homogeneous, &cp).unwrap(), &program).unwrap();
    let one = run_program(&Ensemble::single_crystal(q, &cp).unwrap(), &program).unwrap();
    let peak = one.peak_stress(0, 0);
    let mismatch = if net.rows.len() == one.rows.len() {
        net.rows.iter().zip(&one.rows).map(|(a, b)| (a.p - b.p).norm() / peak).fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };

    let textured = random_params(3, &mut rng);
    let hist = run_program(&Ensemble::network(&textured, &cp).unwrap(), &program).unwrap();
    let hm = hist.max_hill_mandel.max(net.max_hill_mandel);

    let elastic = CpParams::default().elastic();
    let ens = Ensemble::network(&textured, &elastic).unwrap();
    let c = tangent_to_voigt(&ens.macro_tangent(&ens.initial_state(), 1e-3).unwrap());
    let crystal = cubic_stiffness(elastic.c11, elastic.c12, elastic.c44).unwrap();
    let tangent_err = rel(&c, &forward_homogenize(&textured, &crystal).unwrap().0);
    outcome(
        mismatch < 1e-8 && hm < 1e-8 && tangent_err < 1e-8,
        format!(
            "homogeneous network vs single crystal {mismatch:.2e} over {} steps (< 1e-8); max Hill-Mandel {hm:.2e} (< 1e-8); elastic tangent {tangent_err:.2e} (< 1e-8)",
            one.rows.len() - 1
        ),
    )
}

fn unit_cell(ds: &Dataset) -> Outcome {
    let e = ds.entries.iter().find(|e| e.class == TextureClass::WeakTwo).unwrap();
    let pairs = e.pairs().unwrap();
    let p0 = OdmnParams::with_orientations(4, &e.depth(4).unwrap().orientations, 1).unwrap();
    let sc = StandaloneConfig {
        epochs: 150,
        ..Default::default()
    };
    let trained = train_standalone(&pairs, &p0, &sc).unwrap().params;
    let dims = [16, 16, 16];
    let cell = export_analogous_unit_cell(&trained, dims).unwrap();
    let frac = trained.volume_fractions();
    let got = cell.rve.grain_fractions();
    let mut frac_err = 0.0f64;
    for (l, f) in frac.iter().enumerate() {
        let g = cell.leaf_of_grain.iter().position(|x| *x == l).map_or(0.0, |k| got[k]);
        frac_err = frac_err.max((g - f).abs());
    }
    let mut gap = 0.0f64;
    for label in e.labels.iter().take(3) {
        let crystal = label.crystal().unwrap();
        let fft = homogenized_stiffness(&FftProblem::from_rve(&cell.rve, &crystal, FftConfig { tol: 1e-6, max_iter: 2000 }).unwrap()).unwrap();
        let net = forward_homogenize(&trained, &crystal).unwrap();
        gap = gap.max(rel(&fft.stiffness.0, &net.0));
    }
    outcome(
        gap < 0.1 && frac_err <= 2.0 / 16.0,
        format!("FFT vs network stiffness gap {gap:.3e} (< 0.1); max volume-fraction error {frac_err:.2e} (<= 2/16)"),
    )
}

fn metrics_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let mut scaling_exact = true;
    for _ in 0..20 {
        let qs: Vec<Quat> = (0..300).map(|_| to_fcc_fundamental_zone(&random_quat(&mut rng))).collect();
        let w: Vec<f64> = (0..300).map(|_| rng.random_range(0.1..1.0)).collect();
        let reference = build_histogram(&qs, &w, 512).unwrap();
        let mut pred: OdfHistogram = reference.clone();
        pred.density.iter_mut().for_each(|d| *d *= rng.random_range(0.0..2.0));
        let got = texture_index(&pred, &reference).unwrap();
        // Independent recomputation: normalize first, then sum in reverse.
        let nr: f64 = reference.density.iter().rev().map(|r| r * r).sum::<f64>().sqrt();
        let want: f64 = pred
            .density
            .iter()
            .zip(&reference.density)
            .rev()
            .map(|(p, r)| ((p - r) / nr).powi(2))
            .sum();
        worst = worst.max((got - want).abs() / want.max(1e-300));
        let mut double = reference.clone();
        double.density.iter_mut().for_each(|d| *d *= 2.0);
        scaling_exact &= texture_index(&double, &reference).unwrap() == 1.0;

        let dns: Vec<f64> = (0..100).map(|_| rng.random_range(-300.0..300.0)).collect();
        let odmn: Vec<f64> = dns.iter().map(|v| v + rng.random_range(-20.0..20.0)).collect();
        let (mean, max) = relative_errors(&dns, &odmn).unwrap();
        let denom = dns.iter().map(|v| v.abs()).fold(f64::MIN, f64::max);
        let diffs: Vec<f64> = dns.iter().zip(&odmn).map(|(a, b)| (a - b).abs()).collect();
        let mean_ref = diffs.iter().rev().sum::<f64>() / 100.0 / denom;
        let max_ref = diffs.iter().cloned().fold(f64::MIN, f64::max) / denom;
        worst = worst.max((mean - mean_ref).abs() / mean_ref).max((max - max_ref).abs() / max_ref);
    }
    outcome(
        worst < 1e-12 && scaling_exact,
        format!("max relative discrepancy {worst:.2e} (< 1e-12); doubled prediction gives exactly 1: {scaling_exact}"),
    )
}

fn main() {
    // `cargo test` passes harness flags; a filter argument skips the suite.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let mut failed = 0;
    let mut report = |id: usize, name: &str, limit: f64, run: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = run();
        let secs = t.elapsed().as_secs_f64();
        let pass = o.pass && secs < limit;
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] {id:>2}. {name}: {} ({secs:.1} s, limit {limit:.0} s)",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
    };
    report(1, "laminate exactness", 1.0, &mut laminate_exactness);
    report(2, "FFT oracle vs laminate", 10.0, &mut fft_vs_laminate);
    report(3, "network gradient integrity", 30.0, &mut odmn_gradients);
    report(4, "standalone network fit", 600.0, &mut standalone_fit);
    let t = Instant::now();
    let ds = desk_dataset();
    let build = t.elapsed().as_secs_f64();
    println!("       desk dataset: {} RVEs built in {build:.1} s", ds.entries.len());
    report(5, "end-to-end overfit", 1800.0 - build, &mut || end_to_end(&ds));
    report(6, "depth ablation trend", 2700.0, &mut || ablation(&ds));
    report(7, "TACS fidelity ordering", 60.0, &mut tacs_fidelity);
    report(8, "crystal plasticity unit behavior", 60.0, &mut cp_unit);
    report(9, "online consistency", 300.0, &mut online_consistency);
    report(10, "analogous unit cell", 300.0, &mut || unit_cell(&ds));
    report(11, "metrics exactness", 1.0, &mut metrics_exactness);
    println!("acceptance: {} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
