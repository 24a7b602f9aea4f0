//! Texture-adaptive clustering and sampling.
//!
//! Reduces a weighted orientation set to exactly `2^N` representatives:
//! k-means in quaternion space with the elbow-selected cluster count, quota
//! allocation proportional to cluster mass, stratified sampling inside each
//! cluster, and reseeded retries until the reconstructed histogram is close
//! enough to the source one.
//!
//! Histograms live on a uniform grid over the Rodrigues bounding box of the
//! cubic fundamental zone, `|r_i| <= sqrt(2) - 1`. Bins outside the zone
//! simply stay empty.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotlab::{geodesic_distance, rodrigues, to_fcc_fundamental_zone, Quat};

/// Half-width of the Rodrigues box enclosing the cubic fundamental zone.
pub const FZ_RODRIGUES_BOUND: f64 = std::f64::consts::SQRT_2 - 1.0;

pub const DEFAULT_BINS: usize = 512;
pub const DEFAULT_RHO: f64 = 0.10;
pub const DEFAULT_TOL: f64 = 0.05;
pub const DEFAULT_MAX_ITER: usize = 50;
const KMEANS_MAX_ITER: usize = 100;
const KMEANS_RESTARTS: usize = 3;

/// Normalized density over the fixed partition; `sum(density) * bin_volume() == 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdfHistogram {
    pub per_axis: usize,
    pub density: Vec<f64>,
}

impl OdfHistogram {
    pub fn bins(&self) -> usize {
        self.density.len()
    }

    /// Measure of one bin; the box has unit measure.
    pub fn bin_volume(&self) -> f64 {
        1.0 / self.density.len() as f64
    }

    pub fn same_partition(&self, other: &OdfHistogram) -> bool {
        self.per_axis == other.per_axis && self.density.len() == other.density.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,density\n");
        for (i, d) in self.density.iter().enumerate() {
            s.push_str(&format!("{i},{d:e}\n"));
        }
        s
    }
}

fn per_axis_for(bins: usize) -> Result<usize> {
    let n = (bins as f64).cbrt().round() as usize;
    if n == 0 || n * n * n != bins {
        return Err(Error::Invalid(format!("bin count {bins} is not a perfect cube")));
    }
    Ok(n)
}

/// Bin of an orientation after fundamental-zone reduction.
pub fn bin_index(q: &Quat, per_axis: usize) -> usize {
    let r = rodrigues(&to_fcc_fundamental_zone(q));
    let mut idx = 0;
    for c in [r.x, r.y, r.z] {
        let t = (c + FZ_RODRIGUES_BOUND) / (2.0 * FZ_RODRIGUES_BOUND);
        let b = ((t * per_axis as f64).floor() as i64).clamp(0, per_axis as i64 - 1) as usize;
        idx = idx * per_axis + b;
    }
    idx
}

pub fn build_histogram(orientations: &[Quat], weights: &[f64], bins: usize) -> Result<OdfHistogram> {
    if orientations.is_empty() {
        return Err(Error::Invalid("histogram of an empty orientation set".into()));
    }
    if weights.len() != orientations.len() {
        return Err(Error::Invalid("weights and orientations differ in length".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Invalid("weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Invalid("all weights are zero".into()));
    }
    let per_axis = per_axis_for(bins)?;
    let mut density = vec![0.0; bins];
    for (q, w) in orientations.iter().zip(weights) {
        density[bin_index(q, per_axis)] += w;
    }
    let scale = bins as f64 / total;
    density.iter_mut().for_each(|d| *d *= scale);
    Ok(OdfHistogram { per_axis, density })
}

/// Relative L2 deviation `|f - g| / |g|`.
pub fn histogram_deviation(f: &OdfHistogram, reference: &OdfHistogram) -> f64 {
    let num: f64 = f.density.iter().zip(&reference.density).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = reference.density.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

#[derive(Clone, Debug)]
pub struct Clustering {
    pub centroids: Vec<Quat>,
    pub assignment: Vec<usize>,
    pub wcss: f64,
    pub iterations: usize,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Total weight per cluster.
    pub fn masses(&self, weights: &[f64]) -> Vec<f64> {
        let mut m = vec![0.0; self.k()];
        for (c, w) in self.assignment.iter().zip(weights) {
            m[*c] += w;
        }
        m
    }
}

fn nearest(q: &Quat, centroids: &[Quat]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = geodesic_distance(q, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign(qs: &[Quat], weights: &[f64], centroids: &[Quat]) -> (Vec<usize>, f64) {
    let mut wcss = 0.0;
    let assignment = qs
        .iter()
        .zip(weights)
        .map(|(q, w)| {
            let (i, d) = nearest(q, centroids);
            wcss += w * d * d;
            i
        })
        .collect();
    (assignment, wcss)
}

/// Weighted mean of sign-aligned quaternions, normalized.
fn aligned_mean(members: impl Iterator<Item = (Quat, f64)>, anchor: &Quat) -> Option<Quat> {
    let mut acc = [0.0; 4];
    for (q, w) in members {
        let s = if q.dot(anchor) < 0.0 { -w } else { w };
        for (a, c) in acc.iter_mut().zip(q.to_array()) {
            *a += s * c;
        }
    }
    let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    (n > 1e-300).then(|| Quat::new(acc[0], acc[1], acc[2], acc[3]))
}

fn distinct_count(qs: &[Quat]) -> usize {
    let mut seen: Vec<Quat> = Vec::new();
    for q in qs {
        if !seen.iter().any(|s| s.dot(q).abs() > 1.0 - 1e-15) {
            seen.push(*q);
        }
    }
    seen.len()
}

fn farthest(qs: &[Quat], weights: &[f64], centroids: &[Quat]) -> Quat {
    let mut best = (0, -1.0);
    for (i, (q, w)) in qs.iter().zip(weights).enumerate() {
        let d = nearest(q, centroids).1;
        if w * d * d > best.1 {
            best = (i, w * d * d);
        }
    }
    qs[best.0]
}

fn plus_plus_init(qs: &[Quat], weights: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<Quat> {
    let pick = |scores: &[f64], rng: &mut ChaCha8Rng| -> usize {
        let total: f64 = scores.iter().sum();
        if total <= 0.0 {
            return rng.random_range(0..scores.len());
        }
        let mut u = rng.random_range(0.0..total);
        for (i, s) in scores.iter().enumerate() {
            if u < *s {
                return i;
            }
            u -= s;
        }
        scores.iter().rposition(|s| *s > 0.0).unwrap_or(0)
    };
    let mut centroids = vec![qs[pick(weights, rng)]];
    while centroids.len() < k {
        let scores: Vec<f64> = qs
            .iter()
            .zip(weights)
            .map(|(q, w)| {
                let d = nearest(q, &centroids).1;
                w * d * d
            })
            .collect();
        centroids.push(qs[pick(&scores, rng)]);
    }
    centroids
}

/// Lloyd iterations from given centroids; returns the best state visited.
fn lloyd(qs: &[Quat], weights: &[f64], mut centroids: Vec<Quat>) -> Clustering {
    let (mut assignment, mut wcss) = assign(qs, weights, &centroids);
    let mut best = Clustering {
        centroids: centroids.clone(),
        assignment: assignment.clone(),
        wcss,
        iterations: 0,
    };
    for it in 1..=KMEANS_MAX_ITER {
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members = qs
                .iter()
                .zip(weights)
                .zip(&assignment)
                .filter(|(_, a)| **a == c)
                .map(|((q, w), _)| (*q, *w));
            if let Some(m) = aligned_mean(members, centroid) {
                *centroid = m;
            }
        }
        // empty clusters move to the worst-served point
        for c in 0..centroids.len() {
            if !assignment.contains(&c) {
                let others: Vec<Quat> = centroids.iter().enumerate().filter(|(i, _)| *i != c).map(|(_, q)| *q).collect();
                centroids[c] = farthest(qs, weights, &others);
            }
        }
        let (next, next_wcss) = assign(qs, weights, &centroids);
        let stable = next == assignment;
        assignment = next;
        wcss = next_wcss;
        if wcss < best.wcss {
            best = Clustering {
                centroids: centroids.clone(),
                assignment: assignment.clone(),
                wcss,
                iterations: it,
            };
        }
        if stable {
            break;
        }
    }
    best
}

fn check_inputs(qs: &[Quat], weights: &[f64]) -> Result<()> {
    if qs.is_empty() {
        return Err(Error::Invalid("no orientations".into()));
    }
    if qs.len() != weights.len() {
        return Err(Error::Invalid("weights and orientations differ in length".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Invalid("weights must be nonnegative, finite and not all zero".into()));
    }
    Ok(())
}

/// Weighted k-means under the geodesic distance, k-means++ seeded.
pub fn kmeans_orientations(qs: &[Quat], weights: &[f64], k: usize, seed: u64) -> Result<Clustering> {
    check_inputs(qs, weights)?;
    let distinct = distinct_count(qs);
    if k == 0 || k > distinct {
        return Err(Error::Invalid(format!("k = {k} must lie in 1..={distinct} (distinct orientations)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = plus_plus_init(qs, weights, k, &mut rng);
    Ok(lloyd(qs, weights, init))
}

#[derive(Clone, Debug)]
pub struct ElbowSelection {
    pub k: usize,
    /// `wcss[i]` is the WCSS for `k_min + i` clusters.
    pub wcss: Vec<f64>,
    pub clustering: Clustering,
}

/// Smallest `k` whose next-step WCSS reduction, relative to the WCSS at
/// `k_min`, falls below `rho`.
pub fn select_k_wcss(qs: &[Quat], weights: &[f64], k_min: usize, k_max: usize, rho: f64, seed: u64) -> Result<ElbowSelection> {
    check_inputs(qs, weights)?;
    if k_min == 0 || k_min > k_max {
        return Err(Error::Invalid(format!("empty k range {k_min}..={k_max}")));
    }
    let k_max = k_max.min(distinct_count(qs));
    let k_min = k_min.min(k_max);
    let best_of = |k: usize, warm: Option<&Clustering>| -> Clustering {
        let mut best: Option<Clustering> = warm.map(|prev| {
            let mut c = prev.centroids.clone();
            c.push(farthest(qs, weights, &c));
            lloyd(qs, weights, c)
        });
        for r in 0..KMEANS_RESTARTS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add((k * 97 + r) as u64));
            let cand = lloyd(qs, weights, plus_plus_init(qs, weights, k, &mut rng));
            if best.as_ref().is_none_or(|b| cand.wcss < b.wcss) {
                best = Some(cand);
            }
        }
        best.expect("at least one restart")
    };
    let mut current = best_of(k_min, None);
    let mut wcss = vec![current.wcss];
    let base = current.wcss;
    let mut k = k_min;
    while k < k_max && current.wcss > 0.0 {
        let next = best_of(k + 1, Some(&current));
        let gain = (current.wcss - next.wcss) / base;
        wcss.push(next.wcss);
        if gain < rho {
            break;
        }
        current = next;
        k += 1;
    }
    Ok(ElbowSelection {
        k,
        wcss,
        clustering: current,
    })
}

/// Largest-remainder quotas proportional to `masses`, at least one per cluster.
pub fn cluster_quotas(masses: &[f64], total: usize) -> Result<Vec<usize>> {
    let k = masses.len();
    if total < k {
        return Err(Error::Invalid(format!("cannot place {k} clusters into {total} samples")));
    }
    let sum: f64 = masses.iter().sum();
    let ideal: Vec<f64> = masses.iter().map(|m| m / sum * total as f64).collect();
    let mut quota: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (ideal[a] - ideal[a].floor(), ideal[b] - ideal[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let assigned: usize = quota.iter().sum();
    for &i in order.iter().take(total - assigned) {
        quota[i] += 1;
    }
    for i in 0..k {
        if quota[i] == 0 {
            let donor = (0..k).max_by(|&a, &b| quota[a].cmp(&quota[b]).then(b.cmp(&a))).unwrap();
            quota[donor] -= 1;
            quota[i] = 1;
        }
    }
    Ok(quota)
}

/// Exactly `total` orientations, stratified over each cluster's cumulative weight.
pub fn density_aware_sample(qs: &[Quat], weights: &[f64], clusters: &Clustering, total: usize, bins: usize, seed: u64) -> Result<Vec<Quat>> {
    check_inputs(qs, weights)?;
    let per_axis = per_axis_for(bins)?;
    let masses = clusters.masses(weights);
    let quotas = cluster_quotas(&masses, total)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(total);
    for (c, &quota) in quotas.iter().enumerate() {
        let mut members: Vec<(usize, usize)> = clusters
            .assignment
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == c)
            .map(|(i, _)| (bin_index(&qs[i], per_axis), i))
            .collect();
        members.sort_unstable();
        let mass: f64 = members.iter().map(|(_, i)| weights[*i]).sum();
        if members.is_empty() || mass <= 0.0 {
            // massless cluster: fall back to its centroid
            out.extend(std::iter::repeat_n(to_fcc_fundamental_zone(&clusters.centroids[c]), quota));
            continue;
        }
        let step = mass / quota as f64;
        let mut pos = rng.random_range(0.0..1.0) * step;
        let mut cum = 0.0;
        let mut it = members.iter().peekable();
        let mut taken = 0;
        while taken < quota {
            let &(_, i) = *it.peek().expect("cumulative weight covers all positions");
            if pos < cum + weights[i] || it.len() == 1 {
                out.push(to_fcc_fundamental_zone(&qs[i]));
                taken += 1;
                pos += step;
            } else {
                cum += weights[i];
                it.next();
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TacsConfig {
    pub bins: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub seed: u64,
}

impl Default for TacsConfig {
    fn default() -> Self {
        TacsConfig {
            bins: DEFAULT_BINS,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            rho: DEFAULT_RHO,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TacsResult {
    pub sample: Vec<Quat>,
    /// Relative L2 histogram deviation of `sample` against the source.
    pub deviation: f64,
    pub iterations: usize,
    pub k: usize,
    /// Best deviation after each iteration (non-increasing).
    pub trace: Vec<f64>,
}

/// Reduces a weighted texture to exactly `2^depth` orientations.
pub fn tacs_run(qs: &[Quat], weights: &[f64], depth: usize, cfg: &TacsConfig) -> Result<TacsResult> {
    check_inputs(qs, weights)?;
    let total = 1usize << depth;
    let fz: Vec<Quat> = qs.iter().map(to_fcc_fundamental_zone).collect();
    let reference = build_histogram(&fz, weights, cfg.bins)?;
    let elbow = select_k_wcss(&fz, weights, 1, total, cfg.rho, cfg.seed)?;
    let unit = vec![1.0; total];
    let mut best: Option<(Vec<Quat>, f64)> = None;
    let mut trace = Vec::new();
    let mut iterations = 0;
    for it in 0..cfg.max_iter.max(1) {
        iterations = it + 1;
        let sample = density_aware_sample(&fz, weights, &elbow.clustering, total, cfg.bins, cfg.seed.wrapping_add(it as u64))?;
        let dev = histogram_deviation(&build_histogram(&sample, &unit, cfg.bins)?, &reference);
        if best.as_ref().is_none_or(|b| dev < b.1) {
            best = Some((sample, dev));
        }
        let current = best.as_ref().unwrap().1;
        trace.push(current);
        if current <= cfg.tol {
            break;
        }
    }
    let (sample, deviation) = best.expect("at least one iteration");
    Ok(TacsResult {
        sample,
        deviation,
        iterations,
        k: elbow.k,
        trace,
    })
}
