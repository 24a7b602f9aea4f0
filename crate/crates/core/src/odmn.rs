//! Binary-tree material network.
//!
//! Tree node `(l, p)` sits at flat index `2^l - 1 + p`; its children are
//! `(l + 1, 2p)` and `(l + 1, 2p + 1)`, or leaves `2p` and `2p + 1` on the
//! last level. Subtree weights are sums of leaf weights and every block
//! renormalizes its two child weights locally.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::{block_forward_adjoint, homogenize_block, BlockInput};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::rotlab::{bond_matrix, bond_matrix_pullback, Mat6, Quat, Stiffness, TaitBryan};

/// Numerically stable `ln(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp().ln_1p()
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], the logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Nonnegative weight of a material node.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct NodeWeight(pub f64);

pub fn softplus_weight(z: f64) -> NodeWeight {
    NodeWeight(softplus(z))
}

pub fn node_count(depth: usize) -> usize {
    (1 << depth) - 1
}

pub fn leaf_count(depth: usize) -> usize {
    1 << depth
}

/// Flat index of tree node `(level, position)`.
pub fn node_index(level: usize, position: usize) -> usize {
    (1 << level) - 1 + position
}

/// The trainable set of a depth-`N` network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdmnParams {
    pub depth: usize,
    /// Pre-softplus leaf weights.
    pub z: Vec<f64>,
    pub orientations: Vec<TaitBryan>,
    /// Per tree node, level-major.
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl OdmnParams {
    pub fn zeros(depth: usize) -> Self {
        let (n, m) = (leaf_count(depth), node_count(depth));
        OdmnParams {
            depth,
            z: vec![0.0; n],
            orientations: vec![TaitBryan::default(); n],
            theta: vec![0.0; m],
            phi: vec![0.0; m],
        }
    }

    /// Random normals, unit `z`, given leaf orientations.
    pub fn with_orientations(depth: usize, quats: &[Quat], seed: u64) -> Result<Self> {
        if quats.len() != leaf_count(depth) {
            return Err(Error::Invalid(format!(
                "depth {depth} needs {} orientations, got {}",
                leaf_count(depth),
                quats.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = node_count(depth);
        Ok(OdmnParams {
            depth,
            z: vec![1.0; quats.len()],
            orientations: quats.iter().map(TaitBryan::from_quat).collect(),
            theta: (0..m).map(|_| rng.random_range(0.0..1.0)).collect(),
            phi: (0..m).map(|_| rng.random_range(0.0..1.0)).collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 16 {
            return Err(Error::Invalid(format!("depth {} outside 1..=16", self.depth)));
        }
        let (n, m) = (leaf_count(self.depth), node_count(self.depth));
        if self.z.len() != n || self.orientations.len() != n || self.theta.len() != m || self.phi.len() != m {
            return Err(Error::Invalid(format!(
                "parameter counts ({}, {}, {}, {}) do not match depth {}",
                self.z.len(),
                self.orientations.len(),
                self.theta.len(),
                self.phi.len(),
                self.depth
            )));
        }
        let finite = self.z.iter().chain(&self.theta).chain(&self.phi).all(|v| v.is_finite())
            && self
                .orientations
                .iter()
                .all(|o| o.alpha.is_finite() && o.beta.is_finite() && o.gamma.is_finite());
        if !finite {
            return Err(Error::Invalid("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.z.iter().map(|&z| softplus(z)).collect()
    }

    /// `W_i / sum W`.
    pub fn volume_fractions(&self) -> Vec<f64> {
        let w = self.weights();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    pub fn leaf_quats(&self) -> Vec<Quat> {
        self.orientations.iter().map(TaitBryan::to_quat).collect()
    }

    /// Scalar count `4 * 2^N + 2 (2^N - 1)`.
    pub fn len(&self) -> usize {
        4 * self.z.len() + 2 * self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Flat layout: `z`, then `(alpha, beta, gamma)` per leaf, then `(theta, phi)` per tree node.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.z);
        for o in &self.orientations {
            v.extend([o.alpha, o.beta, o.gamma]);
        }
        for (t, p) in self.theta.iter().zip(&self.phi) {
            v.extend([*t, *p]);
        }
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.len());
        let n = self.z.len();
        self.z.copy_from_slice(&v[..n]);
        for (i, o) in self.orientations.iter_mut().enumerate() {
            let b = n + 3 * i;
            *o = TaitBryan::new(v[b], v[b + 1], v[b + 2]);
        }
        self.set_normal_angles(&v[4 * n..]);
    }

    /// Interleaved `(theta, phi)` per tree node, level-major.
    pub fn normal_angles(&self) -> Vec<f64> {
        self.theta.iter().zip(&self.phi).flat_map(|(t, p)| [*t, *p]).collect()
    }

    pub fn set_normal_angles(&mut self, v: &[f64]) {
        assert_eq!(v.len(), 2 * self.theta.len());
        for (k, pair) in v.chunks_exact(2).enumerate() {
            self.theta[k] = pair[0];
            self.phi[k] = pair[1];
        }
    }
}

/// Intermediate values kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct Tape {
    pub crystal: Stiffness,
    pub leaf_c: Vec<Mat6>,
    pub leaf_w: Vec<f64>,
    pub node_c: Vec<Mat6>,
    pub node_w: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> Stiffness {
        Stiffness(self.node_c[0])
    }
}

fn child(tape_leaf: (&[Mat6], &[f64]), tape_node: (&[Mat6], &[f64]), depth: usize, level: usize, pos: usize) -> (Mat6, f64) {
    if level + 1 == depth {
        (tape_leaf.0[pos], tape_leaf.1[pos])
    } else {
        let k = node_index(level + 1, pos);
        (tape_node.0[k], tape_node.1[k])
    }
}

fn block_input(params: &OdmnParams, tape: &Tape, level: usize, pos: usize) -> BlockInput {
    let d = params.depth;
    let leaf = (tape.leaf_c.as_slice(), tape.leaf_w.as_slice());
    let node = (tape.node_c.as_slice(), tape.node_w.as_slice());
    let (c1, w1) = child(leaf, node, d, level, 2 * pos);
    let (c2, w2) = child(leaf, node, d, level, 2 * pos + 1);
    let k = node_index(level, pos);
    BlockInput {
        c1: Stiffness(c1),
        c2: Stiffness(c2),
        w1,
        w2,
        theta: params.theta[k],
        phi: params.phi[k],
    }
}

pub fn forward_with_tape(params: &OdmnParams, crystal: &Stiffness) -> Result<Tape> {
    params.validate()?;
    let d = params.depth;
    let leaf_c: Vec<Mat6> = params
        .orientations
        .iter()
        .map(|o| {
            let m = bond_matrix(&o.to_matrix());
            m * crystal.0 * m.transpose()
        })
        .collect();
    let mut tape = Tape {
        crystal: *crystal,
        leaf_c,
        leaf_w: params.weights(),
        node_c: vec![Mat6::zeros(); node_count(d)],
        node_w: vec![0.0; node_count(d)],
    };
    for level in (0..d).rev() {
        for pos in 0..(1 << level) {
            let input = block_input(params, &tape, level, pos);
            let c = homogenize_block(&input).map_err(|e| e.at_node(level, pos))?;
            let k = node_index(level, pos);
            tape.node_c[k] = c.0;
            tape.node_w[k] = input.w1 + input.w2;
        }
    }
    Ok(tape)
}

pub fn forward_homogenize(params: &OdmnParams, crystal: &Stiffness) -> Result<Stiffness> {
    forward_with_tape(params, crystal).map(|t| t.output())
}

/// Exact gradients of `<cotangent, C_bar>` w.r.t. every trainable parameter.
pub fn backward(params: &OdmnParams, tape: &Tape, cotangent: &Mat6) -> Result<OdmnParams> {
    let d = params.depth;
    let mut grad = OdmnParams::zeros(d);
    let mut g_node = vec![Mat6::zeros(); node_count(d)];
    let mut g_node_w = vec![0.0; node_count(d)];
    let mut g_leaf = vec![Mat6::zeros(); leaf_count(d)];
    let mut g_leaf_w = vec![0.0; leaf_count(d)];
    g_node[0] = *cotangent;
    for level in 0..d {
        for pos in 0..(1 << level) {
            let k = node_index(level, pos);
            let input = block_input(params, tape, level, pos);
            let (_, adj) = block_forward_adjoint(&input, &g_node[k]).map_err(|e| e.at_node(level, pos))?;
            grad.theta[k] = adj.d_theta;
            grad.phi[k] = adj.d_phi;
            // subtree weight is the sum of the children's weights
            let gw = g_node_w[k];
            let sides = [(2 * pos, adj.d_c1, adj.d_w1 + gw), (2 * pos + 1, adj.d_c2, adj.d_w2 + gw)];
            for (c, gc, gwc) in sides {
                if level + 1 == d {
                    g_leaf[c] += gc;
                    g_leaf_w[c] += gwc;
                } else {
                    let kc = node_index(level + 1, c);
                    g_node[kc] += gc;
                    g_node_w[kc] += gwc;
                }
            }
        }
    }
    let crystal = tape.crystal.0;
    for i in 0..leaf_count(d) {
        grad.z[i] = g_leaf_w[i] * sigmoid(params.z[i]);
        let o = params.orientations[i];
        let r = o.to_matrix();
        let m = bond_matrix(&r);
        let g = g_leaf[i];
        // C_leaf = M C M^T
        let g_m = g * m * crystal.transpose() + g.transpose() * m * crystal;
        let g_r = bond_matrix_pullback(&r, &g_m);
        let parts = o.matrix_partials();
        grad.orientations[i] = TaitBryan::new(g_r.dot(&parts[0]), g_r.dot(&parts[1]), g_r.dot(&parts[2]));
    }
    Ok(grad)
}

/// Relative squared Frobenius error `|C_ref - C|^2 / |C_ref|^2`.
pub fn relative_loss(prediction: &Mat6, reference: &Mat6) -> f64 {
    (reference - prediction).norm_squared() / reference.norm_squared()
}

/// Gradient of [`relative_loss`] w.r.t. the prediction.
pub fn relative_loss_grad(prediction: &Mat6, reference: &Mat6) -> Mat6 {
    (prediction - reference) * (2.0 / reference.norm_squared())
}

/// One labeled stiffness pair.
#[derive(Clone, Copy, Debug)]
pub struct StiffnessPair {
    pub crystal: Stiffness,
    pub target: Stiffness,
}

/// Mean relative loss over `pairs` and, optionally, its gradient w.r.t. all of F.
pub fn batch_loss(params: &OdmnParams, pairs: &[StiffnessPair], with_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    if pairs.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let per: Vec<Result<(f64, Option<Vec<f64>>)>> = pairs
        .par_iter()
        .map(|pair| {
            let tape = forward_with_tape(params, &pair.crystal)?;
            let pred = tape.output().0;
            let loss = relative_loss(&pred, &pair.target.0);
            let grad = if with_grad {
                let g = relative_loss_grad(&pred, &pair.target.0);
                Some(backward(params, &tape, &g)?.to_flat())
            } else {
                None
            };
            Ok((loss, grad))
        })
        .collect();
    let scale = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    let mut grad = with_grad.then(|| vec![0.0; params.len()]);
    // ordered reduction keeps results independent of thread scheduling
    for item in per {
        let (l, g) = item?;
        loss += l * scale;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b * scale;
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StandaloneConfig {
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of pairs held out for validation (at least one pair stays in training).
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for StandaloneConfig {
    fn default() -> Self {
        StandaloneConfig {
            optimizer: AdamWConfig::default(),
            epochs: 100,
            batch_size: 32,
            val_fraction: 0.1,
            patience: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: OdmnParams,
    pub best_val: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Splits `0..n` into (train, validation) index sets, shuffled by `seed`.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, seed);
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

pub(crate) fn shuffle<T>(v: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Fits every parameter of F to labeled pairs with AdamW; returns the
/// best-validation snapshot.
pub fn train_standalone(pairs: &[StiffnessPair], params0: &OdmnParams, cfg: &StandaloneConfig) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::Invalid("standalone training needs at least one pair".into()));
    }
    params0.validate()?;
    let (train_idx, val_idx) = split_indices(pairs.len(), cfg.val_fraction, cfg.seed);
    let train: Vec<StiffnessPair> = train_idx.iter().map(|&i| pairs[i]).collect();
    let val: Vec<StiffnessPair> = if val_idx.is_empty() {
        train.clone()
    } else {
        val_idx.iter().map(|&i| pairs[i]).collect()
    };

    let mut params = params0.clone();
    let mut flat = params.to_flat();
    let mut opt = AdamW::new(cfg.optimizer, flat.len());
    let initial = batch_loss(&params, &train, false)?.0;
    let initial_val = batch_loss(&params, &val, false)?.0;
    let mut best = (initial_val, 0usize, params.clone());
    let mut history = vec![EpochRecord {
        epoch: 0,
        train: initial,
        val: initial_val,
    }];
    let batch = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, cfg.seed.wrapping_add(epoch as u64));
        for (b, chunk) in order.chunks(batch).enumerate() {
            let mb: Vec<StiffnessPair> = chunk.iter().map(|&i| train[i]).collect();
            let (_, grad) = batch_loss(&params, &mb, true)?;
            let grad = grad.expect("gradient requested");
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient { epoch, batch: b });
            }
            opt.step(&mut flat, &grad);
            params.set_flat(&flat);
        }
        let train_loss = batch_loss(&params, &train, false)?.0;
        let val_loss = batch_loss(&params, &val, false)?.0;
        if !train_loss.is_finite() || train_loss > 10.0 * initial {
            return Err(Error::Diverged {
                epoch,
                loss: train_loss,
                initial,
            });
        }
        history.push(EpochRecord {
            epoch,
            train: train_loss,
            val: val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.2,
        best_val: best.0,
        best_epoch: best.1,
        history,
    })
}
