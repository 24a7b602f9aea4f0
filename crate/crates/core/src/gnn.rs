//! Graph encoder that predicts ODMN interface normals from a grain graph.
//!
//! Two single-head GATv2 layers (shared transform, no bias), mean pooling,
//! a 64 to 32 projection, and a softplus regression head emitting
//! `(theta, phi)` per tree node, level-major. Gradients are hand-written for
//! exactly these operations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mgraph::{MicrostructureGraph, FEATURES};
use crate::odmn::{batch_loss, node_count, shuffle, OdmnParams, StiffnessPair};
use crate::optim::{AdamW, AdamWConfig};
use crate::rotlab::{Quat, TaitBryan};

pub const HIDDEN: usize = 64;
pub const POOLED: usize = 32;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const SOFTPLUS_BETA: f64 = 1.0;
pub const SOFTPLUS_THRESHOLD: f64 = 20.0;
pub const CHECKPOINT_VERSION: u32 = 1;

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Softplus with `beta`, linear once `beta * x` exceeds the threshold.
pub fn softplus_beta(x: f64, beta: f64, threshold: f64) -> f64 {
    let bx = beta * x;
    if bx > threshold {
        x
    } else {
        crate::odmn::softplus(bx) / beta
    }
}

fn softplus_beta_grad(x: f64, beta: f64, threshold: f64) -> f64 {
    if beta * x > threshold {
        1.0
    } else {
        crate::odmn::sigmoid(beta * x)
    }
}

/// `y = W x` for row-major `W` of shape `out x in`.
fn matvec(w: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let n = x.len();
    (0..out).map(|o| w[o * n..(o + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatLayer {
    pub input: usize,
    pub output: usize,
    /// Row-major `output x input`.
    pub theta: Vec<f64>,
    pub attention: Vec<f64>,
    pub slope: f64,
}

#[derive(Clone, Debug)]
pub struct GatTape {
    x: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    /// Attention weights aligned with the neighborhood lists.
    pub alpha: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct GatGrad {
    pub theta: Vec<f64>,
    pub attention: Vec<f64>,
}

impl GatLayer {
    pub fn glorot(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        GatLayer {
            input,
            output,
            theta: glorot(rng, input, output, input * output),
            attention: glorot(rng, output, 1, output),
            slope: LEAKY_SLOPE,
        }
    }

    /// `x'_i = sum_j alpha_ij Theta x_j` over `j` in the closed neighborhood.
    pub fn forward(&self, x: &[Vec<f64>], neighborhoods: &[Vec<usize>]) -> Result<(Vec<Vec<f64>>, GatTape)> {
        if let Some(row) = x.iter().find(|r| r.len() != self.input) {
            return Err(Error::Invalid(format!("feature width {} does not match layer input {}", row.len(), self.input)));
        }
        let h: Vec<Vec<f64>> = x.iter().map(|xi| matvec(&self.theta, xi, self.output)).collect();
        let mut alpha = Vec::with_capacity(x.len());
        let mut y = Vec::with_capacity(x.len());
        for (i, nb) in neighborhoods.iter().enumerate() {
            let scores: Vec<f64> = nb
                .iter()
                .map(|&j| (0..self.output).map(|o| self.attention[o] * leaky(h[i][o] + h[j][o], self.slope)).sum())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let total: f64 = e.iter().sum();
            let a: Vec<f64> = e.iter().map(|v| v / total).collect();
            let mut yi = vec![0.0; self.output];
            for (&j, aj) in nb.iter().zip(&a) {
                for o in 0..self.output {
                    yi[o] += aj * h[j][o];
                }
            }
            alpha.push(a);
            y.push(yi);
        }
        Ok((
            y,
            GatTape {
                x: x.to_vec(),
                h,
                alpha,
            },
        ))
    }

    /// Returns the input cotangent and accumulates parameter gradients.
    #[allow(clippy::needless_range_loop)]
    pub fn backward(&self, tape: &GatTape, neighborhoods: &[Vec<usize>], dy: &[Vec<f64>], grad: &mut GatGrad) -> Vec<Vec<f64>> {
        let (n, out) = (tape.h.len(), self.output);
        grad.theta.resize(self.theta.len(), 0.0);
        grad.attention.resize(out, 0.0);
        let mut dh = vec![vec![0.0; out]; n];
        for (i, nb) in neighborhoods.iter().enumerate() {
            let a = &tape.alpha[i];
            let da: Vec<f64> = nb.iter().map(|&j| (0..out).map(|o| dy[i][o] * tape.h[j][o]).sum()).collect();
            let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
            for (k, &j) in nb.iter().enumerate() {
                for o in 0..out {
                    dh[j][o] += a[k] * dy[i][o];
                }
                let ds = a[k] * (da[k] - mean);
                for o in 0..out {
                    let u = tape.h[i][o] + tape.h[j][o];
                    grad.attention[o] += ds * leaky(u, self.slope);
                    let du = ds * self.attention[o] * leaky_grad(u, self.slope);
                    dh[i][o] += du;
                    dh[j][o] += du;
                }
            }
        }
        let mut dx = vec![vec![0.0; self.input]; n];
        for v in 0..n {
            for o in 0..out {
                let g = dh[v][o];
                if g == 0.0 {
                    continue;
                }
                let row = &self.theta[o * self.input..(o + 1) * self.input];
                let grow = &mut grad.theta[o * self.input..(o + 1) * self.input];
                for i in 0..self.input {
                    grow[i] += g * tape.x[v][i];
                    dx[v][i] += g * row[i];
                }
            }
        }
        dx
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn glorot(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            input,
            output,
            weight: glorot(rng, input, output, input * output),
            bias: vec![0.0; output],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        matvec(&self.weight, x, self.output).into_iter().zip(&self.bias).map(|(a, b)| a + b).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnModel {
    pub depth: usize,
    pub layer1: GatLayer,
    pub layer2: GatLayer,
    pub projection: Dense,
    pub head: Dense,
    pub softplus_beta: f64,
    pub softplus_threshold: f64,
}

/// Intermediate values for one graph.
#[derive(Clone, Debug)]
pub struct GnnTape {
    neighborhoods: Vec<Vec<usize>>,
    gat1: GatTape,
    y1: Vec<Vec<f64>>,
    gat2: GatTape,
    y2: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    o: Vec<f64>,
}

impl GnnTape {
    pub fn attention(&self) -> [&[Vec<f64>]; 2] {
        [&self.gat1.alpha, &self.gat2.alpha]
    }
}

fn relu(v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|r| r.iter().map(|x| x.max(0.0)).collect()).collect()
}

impl GnnModel {
    pub fn new(depth: usize, seed: u64) -> Result<Self> {
        if !(1..=16).contains(&depth) {
            return Err(Error::Invalid(format!("depth {depth} outside 1..=16")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(GnnModel {
            depth,
            layer1: GatLayer::glorot(FEATURES, HIDDEN, &mut rng),
            layer2: GatLayer::glorot(HIDDEN, HIDDEN, &mut rng),
            projection: Dense::glorot(HIDDEN, POOLED, &mut rng),
            head: Dense::glorot(POOLED, 2 * node_count(depth), &mut rng),
            softplus_beta: SOFTPLUS_BETA,
            softplus_threshold: SOFTPLUS_THRESHOLD,
        })
    }

    pub fn output_len(&self) -> usize {
        self.head.output
    }

    pub fn validate(&self) -> Result<()> {
        let shapes_ok = self.layer1.input == FEATURES
            && self.layer1.theta.len() == self.layer1.input * self.layer1.output
            && self.layer1.attention.len() == self.layer1.output
            && self.layer2.input == self.layer1.output
            && self.layer2.theta.len() == self.layer2.input * self.layer2.output
            && self.layer2.attention.len() == self.layer2.output
            && self.projection.input == self.layer2.output
            && self.projection.weight.len() == self.projection.input * self.projection.output
            && self.projection.bias.len() == self.projection.output
            && self.head.input == self.projection.output
            && self.head.weight.len() == self.head.input * self.head.output
            && self.head.bias.len() == self.head.output
            && (1..=16).contains(&self.depth)
            && self.head.output == 2 * node_count(self.depth);
        if !shapes_ok {
            return Err(Error::Invalid("inconsistent model shapes".into()));
        }
        if !(self.softplus_beta > 0.0) || !self.softplus_threshold.is_finite() {
            return Err(Error::Invalid("bad softplus settings".into()));
        }
        if self.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite model weight".into()));
        }
        Ok(())
    }

    /// Flat order: layer1 (theta, attention), layer2 (theta, attention),
    /// projection (weight, bias), head (weight, bias).
    pub fn to_flat(&self) -> Vec<f64> {
        [
            &self.layer1.theta,
            &self.layer1.attention,
            &self.layer2.theta,
            &self.layer2.attention,
            &self.projection.weight,
            &self.projection.bias,
            &self.head.weight,
            &self.head.bias,
        ]
        .into_iter()
        .flatten()
        .copied()
        .collect()
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.len());
        let mut at = 0;
        for slot in [
            &mut self.layer1.theta,
            &mut self.layer1.attention,
            &mut self.layer2.theta,
            &mut self.layer2.attention,
            &mut self.projection.weight,
            &mut self.projection.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ] {
            let n = slot.len();
            slot.copy_from_slice(&v[at..at + n]);
            at += n;
        }
    }

    pub fn len(&self) -> usize {
        self.layer1.theta.len()
            + self.layer1.attention.len()
            + self.layer2.theta.len()
            + self.layer2.attention.len()
            + self.projection.weight.len()
            + self.projection.bias.len()
            + self.head.weight.len()
            + self.head.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward_with_tape(&self, graph: &MicrostructureGraph) -> Result<(Vec<f64>, GnnTape)> {
        if graph.features.is_empty() {
            return Err(Error::Invalid("empty graph".into()));
        }
        let neighborhoods = graph.neighborhoods();
        let x: Vec<Vec<f64>> = graph.features.iter().map(|f| f.to_vec()).collect();
        let (y1, gat1) = self.layer1.forward(&x, &neighborhoods)?;
        let (y2, gat2) = self.layer2.forward(&relu(&y1), &neighborhoods)?;
        let r2 = relu(&y2);
        let n = r2.len() as f64;
        let pooled: Vec<f64> = (0..self.layer2.output).map(|o| r2.iter().map(|r| r[o]).sum::<f64>() / n).collect();
        let z = self.projection.forward(&pooled);
        let r: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        let o = self.head.forward(&r);
        let out = o.iter().map(|v| softplus_beta(*v, self.softplus_beta, self.softplus_threshold)).collect();
        Ok((
            out,
            GnnTape {
                neighborhoods,
                gat1,
                y1,
                gat2,
                y2,
                pooled,
                z,
                r,
                o,
            },
        ))
    }

    /// Angle parameters, level-major, `theta` before `phi` per tree node.
    pub fn forward(&self, graph: &MicrostructureGraph) -> Result<Vec<f64>> {
        Ok(self.forward_with_tape(graph)?.0)
    }

    /// Flat weight gradient for an output cotangent.
    pub fn backward(&self, tape: &GnnTape, d_out: &[f64]) -> Vec<f64> {
        let d_o: Vec<f64> = d_out
            .iter()
            .zip(&tape.o)
            .map(|(g, o)| g * softplus_beta_grad(*o, self.softplus_beta, self.softplus_threshold))
            .collect();
        let (hi, ho) = (self.head.input, self.head.output);
        let mut g_head_w = vec![0.0; hi * ho];
        let mut d_r = vec![0.0; hi];
        for o in 0..ho {
            for i in 0..hi {
                g_head_w[o * hi + i] = d_o[o] * tape.r[i];
                d_r[i] += d_o[o] * self.head.weight[o * hi + i];
            }
        }
        let d_z: Vec<f64> = d_r.iter().zip(&tape.z).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect();
        let (pi, po) = (self.projection.input, self.projection.output);
        let mut g_proj_w = vec![0.0; pi * po];
        let mut d_pool = vec![0.0; pi];
        for o in 0..po {
            for i in 0..pi {
                g_proj_w[o * pi + i] = d_z[o] * tape.pooled[i];
                d_pool[i] += d_z[o] * self.projection.weight[o * pi + i];
            }
        }
        let n = tape.y2.len() as f64;
        let d_y2: Vec<Vec<f64>> = tape
            .y2
            .iter()
            .map(|row| row.iter().zip(&d_pool).map(|(y, g)| if *y > 0.0 { g / n } else { 0.0 }).collect())
            .collect();
        let mut g2 = GatGrad::default();
        let d_r1 = self.layer2.backward(&tape.gat2, &tape.neighborhoods, &d_y2, &mut g2);
        let d_y1: Vec<Vec<f64>> = d_r1
            .iter()
            .zip(&tape.y1)
            .map(|(d, y)| d.iter().zip(y).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect())
            .collect();
        let mut g1 = GatGrad::default();
        self.layer1.backward(&tape.gat1, &tape.neighborhoods, &d_y1, &mut g1);
        [g1.theta, g1.attention, g2.theta, g2.attention, g_proj_w, d_z, g_head_w, d_o]
            .into_iter()
            .flatten()
            .collect()
    }
}

/// One training item: a graph, its TACS orientations, and its stiffness pairs.
#[derive(Clone, Debug)]
pub struct GnnSample {
    pub graph: MicrostructureGraph,
    pub orientations: Vec<Quat>,
    pub pairs: Vec<StiffnessPair>,
}

/// Leaf orientations from TACS, `z = 1`, normals from the model output.
pub fn odmn_from_output(depth: usize, orientations: &[Quat], angles: &[f64]) -> Result<OdmnParams> {
    let mut p = OdmnParams::zeros(depth);
    if orientations.len() != p.z.len() {
        return Err(Error::Invalid(format!("depth {depth} needs {} orientations, got {}", p.z.len(), orientations.len())));
    }
    p.z.iter_mut().for_each(|z| *z = 1.0);
    p.orientations = orientations.iter().map(TaitBryan::from_quat).collect();
    p.set_normal_angles(angles);
    Ok(p)
}

pub fn infer_params(model: &GnnModel, sample_graph: &MicrostructureGraph, orientations: &[Quat]) -> Result<OdmnParams> {
    odmn_from_output(model.depth, orientations, &model.forward(sample_graph)?)
}

/// Mean relative loss over every pair of every sample, with optional weight gradient.
pub fn pipeline_loss(model: &GnnModel, samples: &[GnnSample], with_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let total: usize = samples.iter().map(|s| s.pairs.len()).sum();
    if total == 0 {
        return Err(Error::Invalid("no stiffness pairs".into()));
    }
    let per: Vec<Result<(f64, Option<Vec<f64>>)>> = samples
        .par_iter()
        .map(|s| {
            let (angles, tape) = model.forward_with_tape(&s.graph)?;
            let params = odmn_from_output(model.depth, &s.orientations, &angles)?;
            let (loss, grad) = batch_loss(&params, &s.pairs, with_grad)?;
            let share = s.pairs.len() as f64 / total as f64;
            let g = grad.map(|g| {
                let d_angles: Vec<f64> = g[4 * params.z.len()..].iter().map(|v| v * share).collect();
                model.backward(&tape, &d_angles)
            });
            Ok((loss * share, g))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = with_grad.then(|| vec![0.0; model.len()]);
    for item in per {
        let (l, g) = item?;
        loss += l;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnnTrainConfig {
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    /// Graphs per optimizer step.
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl Default for GnnTrainConfig {
    fn default() -> Self {
        GnnTrainConfig {
            optimizer: AdamWConfig::default(),
            epochs: 100,
            batch_size: 1,
            patience: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnEpoch {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
}

#[derive(Clone, Debug)]
pub struct GnnTrainOutcome {
    pub model: GnnModel,
    pub best_val: f64,
    pub best_epoch: usize,
    pub history: Vec<GnnEpoch>,
}

/// AdamW on the pipeline loss; returns the model with the lowest validation loss.
pub fn train_end_to_end(model0: &GnnModel, train: &[GnnSample], val: &[GnnSample], cfg: &GnnTrainConfig) -> Result<GnnTrainOutcome> {
    model0.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    let val = if val.is_empty() { train } else { val };
    let mut model = model0.clone();
    let mut flat = model.to_flat();
    let mut opt = AdamW::new(cfg.optimizer, flat.len());
    let initial = pipeline_loss(&model, train, false)?.0;
    let initial_val = pipeline_loss(&model, val, false)?.0;
    let mut history = vec![GnnEpoch {
        epoch: 0,
        train: initial,
        val: initial_val,
    }];
    let mut best = (initial_val, 0, model.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, cfg.seed.wrapping_add(epoch as u64));
        for (b, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let batch: Vec<GnnSample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let grad = pipeline_loss(&model, &batch, true)?.1.expect("gradient requested");
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient { epoch, batch: b });
            }
            opt.step(&mut flat, &grad);
            model.set_flat(&flat);
        }
        let train_loss = pipeline_loss(&model, train, false)?.0;
        let val_loss = pipeline_loss(&model, val, false)?.0;
        if !train_loss.is_finite() || train_loss > 10.0 * initial {
            return Err(Error::Diverged {
                epoch,
                loss: train_loss,
                initial,
            });
        }
        history.push(GnnEpoch {
            epoch,
            train: train_loss,
            val: val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, model.clone());
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(GnnTrainOutcome {
        model: best.2,
        best_val: best.0,
        best_epoch: best.1,
        history,
    })
}

/// Versioned checkpoint: weights, architecture and training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub model: GnnModel,
    pub best_epoch: usize,
    pub best_val: f64,
    pub history: Vec<GnnEpoch>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let version = v.get("version").and_then(|x| x.as_u64()).ok_or_else(|| Error::format("checkpoint", "missing version"))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::Version {
                what: "checkpoint",
                found: version.min(u32::MAX as u64) as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let c: Checkpoint = serde_json::from_value(v).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        c.model.validate().map_err(|e| Error::format("checkpoint", e.to_string()))?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mgraph::build_graph;
    use crate::oracle::{label_rve, FftConfig};
    use crate::rotlab::cubic_stiffness;
    use crate::rvegen::{assign_texture, generate_rve, sample_elastic_triples, ElasticRanges, TextureClass};

    fn random_graph(n: usize, seed: u64) -> MicrostructureGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let mut edges = Vec::new();
        for i in 0..n as u32 {
            for j in i + 1..n as u32 {
                if rng.random_bool(0.4) {
                    edges.push((i, j));
                }
            }
        }
        MicrostructureGraph { depth: 3, features, edges }
    }

    #[test]
    fn isolated_node_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = GatLayer::glorot(3, 4, &mut rng);
        let x = vec![vec![0.5, -1.0, 2.0]];
        let (y, tape) = layer.forward(&x, &[vec![0]]).unwrap();
        assert_eq!(tape.alpha[0], vec![1.0]);
        assert_eq!(y[0], matvec(&layer.theta, &x[0], 4));
        assert!(layer.forward(&[vec![1.0]], &[vec![0]]).is_err());
    }

    #[test]
    fn identical_neighbors_share_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = GatLayer::glorot(3, 5, &mut rng);
        let x = vec![vec![1.0, 0.0, -1.0], vec![0.3, 0.2, 0.1], vec![0.3, 0.2, 0.1]];
        let (_, tape) = layer.forward(&x, &[vec![0, 1, 2], vec![1, 0], vec![2, 0]]).unwrap();
        assert!((tape.alpha[0][1] - tape.alpha[0][2]).abs() < 1e-15);
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let g = random_graph(5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = GatLayer::glorot(FEATURES, 6, &mut rng);
        let x: Vec<Vec<f64>> = g.features.iter().map(|f| f.to_vec()).collect();
        let nb = g.neighborhoods();
        let (y, tape) = layer.forward(&x, &nb).unwrap();
        // dense adjacency with self-loops and a masked full softmax
        let mut adj = [[false; 5]; 5];
        for (i, row) in adj.iter_mut().enumerate() {
            row[i] = true;
        }
        for &(i, j) in &g.edges {
            adj[i as usize][j as usize] = true;
            adj[j as usize][i as usize] = true;
        }
        let h: Vec<Vec<f64>> = x
            .iter()
            .map(|xi| (0..6).map(|o| (0..FEATURES).map(|k| layer.theta[o * FEATURES + k] * xi[k]).sum()).collect())
            .collect();
        for i in 0..5 {
            let e: Vec<f64> = (0..5)
                .map(|j| {
                    if !adj[i][j] {
                        return 0.0;
                    }
                    let s: f64 = (0..6)
                        .map(|o| {
                            let u = h[i][o] + h[j][o];
                            layer.attention[o] * if u > 0.0 { u } else { 0.2 * u }
                        })
                        .sum();
                    s.exp()
                })
                .collect();
            let total: f64 = e.iter().sum();
            for o in 0..6 {
                let dense: f64 = (0..5).map(|j| e[j] / total * h[j][o]).sum();
                assert!((dense - y[i][o]).abs() < 1e-12);
            }
            assert!((tape.alpha[i].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn zero_model(depth: usize) -> GnnModel {
        let mut m = GnnModel::new(depth, 0).unwrap();
        let n = m.len();
        m.set_flat(&vec![0.0; n]);
        m
    }

    #[test]
    fn zero_weights_give_ln2() {
        let m = zero_model(3);
        let out = m.forward(&random_graph(6, 4)).unwrap();
        assert_eq!(out.len(), 14);
        assert!(out.iter().all(|v| (v - std::f64::consts::LN_2).abs() < 1e-15));
    }

    #[test]
    fn permutation_and_duplication_invariance() {
        let m = GnnModel::new(3, 5).unwrap();
        let g = random_graph(7, 6);
        let base = m.forward(&g).unwrap();
        let perm = [3usize, 0, 6, 2, 5, 1, 4];
        let inv: Vec<usize> = (0..7).map(|i| perm.iter().position(|p| *p == i).unwrap()).collect();
        let mut edges: Vec<(u32, u32)> = g
            .edges
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (inv[i as usize] as u32, inv[j as usize] as u32);
                (a.min(b), a.max(b))
            })
            .collect();
        edges.sort_unstable();
        let pg = MicrostructureGraph {
            depth: 3,
            features: perm.iter().map(|&p| g.features[p]).collect(),
            edges,
        };
        for (a, b) in base.iter().zip(m.forward(&pg).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut features = g.features.clone();
        features.extend(g.features.iter().copied());
        let mut edges = g.edges.clone();
        edges.extend(g.edges.iter().map(|&(i, j)| (i + 7, j + 7)));
        let doubled = MicrostructureGraph { depth: 3, features, edges };
        for (a, b) in base.iter().zip(m.forward(&doubled).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(m.forward(&MicrostructureGraph { depth: 3, features: vec![], edges: vec![] }).is_err());
    }

    #[test]
    fn model_gradient_matches_finite_differences() {
        let m = GnnModel::new(2, 7).unwrap();
        let g = random_graph(6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Vec<f64> = (0..m.output_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |m: &GnnModel| m.forward(&g).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let (_, tape) = m.forward_with_tape(&g).unwrap();
        let grad = m.backward(&tape, &w);
        let flat = m.to_flat();
        for _ in 0..40 {
            let k = rng.random_range(0..flat.len());
            let h = 1e-6;
            let mut mp = m.clone();
            let mut v = flat.clone();
            v[k] += h;
            mp.set_flat(&v);
            let fp = f(&mp);
            v[k] -= 2.0 * h;
            mp.set_flat(&v);
            let fm = f(&mp);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-6 * fd.abs().max(grad[k].abs()).max(1e-3), "{k}: {fd} vs {}", grad[k]);
        }
    }

    fn tiny_dataset(n_rve: usize, depth: usize, pairs: usize) -> Vec<GnnSample> {
        let triples = sample_elastic_triples(pairs, &ElasticRanges::default(), 1).unwrap();
        (0..n_rve)
            .map(|r| {
                let rve = generate_rve(10, [6, 6, 6], r as u64).unwrap();
                let rve = assign_texture(&rve, &TextureClass::WeakTwo.spec(), r as u64).unwrap();
                let sample: Vec<Quat> = (0..1 << depth).map(|i| rve.orientations[i % 10]).collect();
                let graph = build_graph(&rve, &sample).unwrap();
                let labels = label_rve(&rve, &triples, FftConfig { tol: 1e-6, ..Default::default() }).unwrap();
                let pairs = labels
                    .labels
                    .iter()
                    .map(|l| StiffnessPair {
                        crystal: cubic_stiffness(l.triple.c11, l.triple.c12, l.triple.c44).unwrap(),
                        target: l.target(),
                    })
                    .collect();
                GnnSample {
                    graph,
                    orientations: sample,
                    pairs,
                }
            })
            .collect()
    }

    #[test]
    fn pipeline_gradient_matches_finite_differences() {
        let data = tiny_dataset(2, 3, 3);
        let m = GnnModel::new(3, 11).unwrap();
        let (base, grad) = pipeline_loss(&m, &data, true).unwrap();
        let grad = grad.unwrap();
        let flat = m.to_flat();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut worst: f64 = 0.0;
        let loss_at = |k: usize, d: f64| {
            let mut mp = m.clone();
            let mut v = flat.clone();
            v[k] += d;
            mp.set_flat(&v);
            pipeline_loss(&mp, &data, false).unwrap().0
        };
        for _ in 0..20 {
            let k = rng.random_range(0..flat.len());
            // fourth-order stencil keeps roundoff far below the tolerance
            let h = 1e-4;
            let fd = (-loss_at(k, 2.0 * h) + 8.0 * loss_at(k, h) - 8.0 * loss_at(k, -h) + loss_at(k, -2.0 * h)) / (12.0 * h);
            // both at the stencil's roundoff level means an exactly-zero gradient (dead ReLU)
            let noise = 64.0 * f64::EPSILON * base / h;
            let scale = fd.abs().max(grad[k].abs());
            if scale > noise {
                worst = worst.max((fd - grad[k]).abs() / scale);
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn trainer_bookkeeping_and_checkpoint() {
        let data = tiny_dataset(2, 2, 4);
        let m = GnnModel::new(2, 13).unwrap();
        let cfg = GnnTrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let out = train_end_to_end(&m, &data[..1], &data[1..], &cfg).unwrap();
        assert_eq!(out.history[0].val, pipeline_loss(&m, &data[1..], false).unwrap().0);
        let best = out.history.iter().map(|e| e.val).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val, best);
        assert_eq!(pipeline_loss(&out.model, &data[1..], false).unwrap().0, best);

        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            seed: 13,
            model: out.model.clone(),
            best_epoch: out.best_epoch,
            best_val: out.best_val,
            history: out.history.clone(),
        };
        let s = ck.to_json().unwrap();
        assert_eq!(Checkpoint::from_json(&s).unwrap(), ck);
        assert!(matches!(Checkpoint::from_json(&s.replacen("\"version\": 1", "\"version\": 9", 1)), Err(Error::Version { .. })));
        assert!(Checkpoint::from_json("{").is_err());
    }
}
