//! Grain-level graphs: 16 node features per grain and face-adjacency edges.
//!
//! Feature order: `q0 q1 q2 q3 vol P xc yc zc Ixx Iyy Izz Ixy Iyz Izx idx`.
//! Lengths are in cell units (each axis scaled to `[0, 1)`). Moments are
//! coordinate second moments `sum(x'_i x'_j) / V` about the centroid, with a
//! single voxel contributing zero. `idx` is the nearest TACS sample index
//! divided by `2^N - 1`.

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rotlab::{geodesic_distance, Quat};
use crate::rvegen::VoxelRve;

pub const FEATURES: usize = 16;
const GRAPH_MAGIC: &[u8; 4] = b"TXGR";
pub const GRAPH_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicrostructureGraph {
    pub depth: usize,
    pub features: Vec<[f64; FEATURES]>,
    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(u32, u32)>,
}

impl MicrostructureGraph {
    pub fn node_count(&self) -> usize {
        self.features.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Invalid("graph has no nodes".into()));
        }
        if !(1..=16).contains(&self.depth) {
            return Err(Error::Invalid(format!("depth {} out of range", self.depth)));
        }
        if self.features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite node feature".into()));
        }
        let n = self.node_count() as u32;
        for w in self.edges.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Invalid("edges must be sorted and unique".into()));
            }
        }
        if let Some(e) = self.edges.iter().find(|(i, j)| i >= j || *j >= n) {
            return Err(Error::Invalid(format!("bad edge {e:?}")));
        }
        Ok(())
    }

    /// Neighbor lists for message passing, each including the node itself.
    pub fn neighborhoods(&self) -> Vec<Vec<usize>> {
        let mut nb: Vec<Vec<usize>> = (0..self.node_count()).map(|i| vec![i]).collect();
        for &(i, j) in &self.edges {
            nb[i as usize].push(j as usize);
            nb[j as usize].push(i as usize);
        }
        nb
    }
}

/// Face adjacency under periodic wrap; symmetric, deduplicated, no self-loops.
pub fn build_adjacency(rve: &VoxelRve) -> Vec<(u32, u32)> {
    let [nx, ny, nz] = rve.dims;
    let mut edges = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let a = rve.grain_ids[rve.index(i, j, k)];
                for (ii, jj, kk) in [((i + 1) % nx, j, k), (i, (j + 1) % ny, k), (i, j, (k + 1) % nz)] {
                    let b = rve.grain_ids[rve.index(ii, jj, kk)];
                    if a != b {
                        edges.push((a.min(b), a.max(b)));
                    }
                }
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrainMoments {
    pub volume: usize,
    /// Cell units, wrapped into `[0, 1)`.
    pub centroid: [f64; 3],
    /// `[xx, yy, zz, xy, yz, zx]`.
    pub second: [f64; 6],
}

/// Voxel lists per grain in flat-index order.
pub fn grain_voxels(rve: &VoxelRve) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); rve.grain_count()];
    for (idx, g) in rve.grain_ids.iter().enumerate() {
        out[*g as usize].push(idx);
    }
    out
}

fn moments_of(rve: &VoxelRve, voxels: &[usize]) -> GrainMoments {
    let dims = rve.dims.map(|d| d as f64);
    let reference = rve.coords(voxels[0]).map(|c| c as f64);
    let unwrapped: Vec<[f64; 3]> = voxels
        .iter()
        .map(|v| {
            let c = rve.coords(*v);
            std::array::from_fn(|a| {
                let d = c[a] as f64 - reference[a];
                (reference[a] + d - dims[a] * (d / dims[a]).round()) / dims[a]
            })
        })
        .collect();
    let n = voxels.len() as f64;
    let mean: [f64; 3] = std::array::from_fn(|a| unwrapped.iter().map(|p| p[a]).sum::<f64>() / n);
    let mut second = [0.0; 6];
    for p in &unwrapped {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        let prods = [d[0] * d[0], d[1] * d[1], d[2] * d[2], d[0] * d[1], d[1] * d[2], d[2] * d[0]];
        second.iter_mut().zip(prods).for_each(|(s, v)| *s += v);
    }
    second.iter_mut().for_each(|s| *s /= n);
    // voxel centers sit at +0.5 of a cell
    let centroid = std::array::from_fn(|a| (mean[a] + 0.5 / dims[a]).rem_euclid(1.0));
    GrainMoments {
        volume: voxels.len(),
        centroid,
        second,
    }
}

pub fn grain_moments(rve: &VoxelRve, grain: usize) -> Result<GrainMoments> {
    let voxels: Vec<usize> = (0..rve.voxel_count()).filter(|v| rve.grain_ids[*v] as usize == grain).collect();
    if voxels.is_empty() {
        return Err(Error::Invalid(format!("grain {grain} is empty")));
    }
    Ok(moments_of(rve, &voxels))
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut a: usize) -> usize {
        while self.0[a] != a {
            self.0[a] = self.0[self.0[a]];
            a = self.0[a];
        }
        a
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn component_count(rve: &VoxelRve, voxels: &[usize], wrap: bool) -> usize {
    let [nx, ny, nz] = rve.dims;
    let local: std::collections::HashMap<usize, usize> = voxels.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let mut uf = UnionFind((0..voxels.len()).collect());
    for (li, v) in voxels.iter().enumerate() {
        let [i, j, k] = rve.coords(*v);
        let steps = [(i + 1, j, k, i + 1 == nx), (i, j + 1, k, j + 1 == ny), (i, j, k + 1, k + 1 == nz)];
        for (ii, jj, kk, crosses) in steps {
            if crosses && !wrap {
                continue;
            }
            let n = rve.index(ii % nx, jj % ny, kk % nz);
            if let Some(&ln) = local.get(&n) {
                uf.union(li, ln);
            }
        }
    }
    (0..voxels.len()).filter(|i| uf.find(*i) == *i).count()
}

/// 1 when the grain touches opposite cell faces, or is connected only through
/// the periodic wrap.
pub fn periodicity_flag(rve: &VoxelRve, voxels: &[usize]) -> bool {
    let touches = (0..3).any(|a| {
        let n = rve.dims[a];
        let low = voxels.iter().any(|v| rve.coords(*v)[a] == 0);
        let high = voxels.iter().any(|v| rve.coords(*v)[a] == n - 1);
        low && high
    });
    touches || (component_count(rve, voxels, false) > 1 && component_count(rve, voxels, true) == 1)
}

/// Nearest sample under the geodesic distance; ties go to the lowest index.
pub fn orientation_index(q: &Quat, sample: &[Quat]) -> Result<usize> {
    if sample.is_empty() {
        return Err(Error::Invalid("empty orientation sample".into()));
    }
    let mut best = (0, f64::INFINITY);
    for (i, s) in sample.iter().enumerate() {
        let d = geodesic_distance(q, s);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

pub fn build_graph(rve: &VoxelRve, sample: &[Quat]) -> Result<MicrostructureGraph> {
    rve.validate()?;
    let n = sample.len();
    if n < 2 || !n.is_power_of_two() {
        return Err(Error::Invalid(format!("sample size {n} is not 2^N with N >= 1")));
    }
    let depth = n.trailing_zeros() as usize;
    let total = rve.voxel_count() as f64;
    let mut features = Vec::with_capacity(rve.grain_count());
    for (g, voxels) in grain_voxels(rve).iter().enumerate() {
        let q = rve.orientations[g];
        let m = moments_of(rve, voxels);
        let idx = orientation_index(&q, sample)? as f64 / (n - 1) as f64;
        let p = if periodicity_flag(rve, voxels) { 1.0 } else { 0.0 };
        let s = m.second;
        features.push([
            q.w, q.x, q.y, q.z,
            m.volume as f64 / total, p,
            m.centroid[0], m.centroid[1], m.centroid[2],
            s[0], s[1], s[2], s[3], s[4], s[5],
            idx,
        ]);
    }
    Ok(MicrostructureGraph {
        depth,
        features,
        edges: build_adjacency(rve),
    })
}

/// Binary layout (little-endian): magic `TXGR`, u32 version, u32 depth,
/// u64 node count followed by 16 f64 per node, u64 edge count followed by
/// `(u32, u32)` pairs.
pub fn encode_graph(g: &MicrostructureGraph) -> Result<Vec<u8>> {
    g.validate()?;
    let mut w = Writer::new(GRAPH_MAGIC, GRAPH_VERSION);
    w.u32(g.depth as u32);
    w.u64(g.node_count() as u64);
    g.features.iter().flatten().for_each(|v| w.f64(*v));
    w.u64(g.edges.len() as u64);
    for (i, j) in &g.edges {
        w.u32(*i);
        w.u32(*j);
    }
    Ok(w.buf)
}

pub fn decode_graph(data: &[u8]) -> Result<MicrostructureGraph> {
    let mut r = Reader::open("graph", data, GRAPH_MAGIC, GRAPH_VERSION)?;
    let depth = r.u32()? as usize;
    let n = r.count(8 * FEATURES)?;
    let mut features = Vec::with_capacity(n);
    for _ in 0..n {
        let mut f = [0.0; FEATURES];
        for v in &mut f {
            *v = r.f64()?;
        }
        features.push(f);
    }
    let e = r.count(8)?;
    let mut edges = Vec::with_capacity(e);
    for _ in 0..e {
        edges.push((r.u32()?, r.u32()?));
    }
    r.finish()?;
    let g = MicrostructureGraph { depth, features, edges };
    g.validate().map_err(|e| Error::format("graph", e.to_string()))?;
    Ok(g)
}
