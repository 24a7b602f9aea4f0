//! Voxel unit cell with the same laminate hierarchy as a trained network.

use crate::error::{Error, Result};
use crate::odmn::{leaf_count, node_index, OdmnParams};
use crate::rotlab::{equilibrium_direction, Quat};
use crate::rvegen::VoxelRve;

#[derive(Clone, Debug)]
pub struct AnalogousCell {
    pub rve: VoxelRve,
    /// Network leaf behind each grain; leaves too light to receive a voxel are dropped.
    pub leaf_of_grain: Vec<usize>,
}

/// Recursively splits the unit cube by each node's plane, giving the first
/// child the voxels with the lowest projection onto the normal in proportion
/// to its subtree weight.
pub fn export_analogous_unit_cell(params: &OdmnParams, dims: [usize; 3]) -> Result<AnalogousCell> {
    params.validate()?;
    if dims.contains(&0) || dims.iter().product::<usize>() > 1 << 28 {
        return Err(Error::Invalid(format!("grid dims {dims:?} out of range")));
    }
    let depth = params.depth;
    let w = params.weights();
    // Subtree weight of (level, pos), computed from leaf weights.
    let subtree = |level: usize, pos: usize| -> f64 {
        let span = 1 << (depth - level);
        w[pos * span..(pos + 1) * span].iter().sum()
    };
    let n = dims.iter().product::<usize>();
    let centers: Vec<[f64; 3]> = (0..n)
        .map(|idx| {
            let k = idx % dims[2];
            let j = (idx / dims[2]) % dims[1];
            let i = idx / (dims[1] * dims[2]);
            [
                (i as f64 + 0.5) / dims[0] as f64,
                (j as f64 + 0.5) / dims[1] as f64,
                (k as f64 + 0.5) / dims[2] as f64,
            ]
        })
        .collect();
    let mut leaf = vec![0usize; n];
    let mut stack = vec![(0usize, 0usize, (0..n).collect::<Vec<_>>())];
    while let Some((level, pos, mut cell)) = stack.pop() {
        if level == depth {
            for v in cell {
                leaf[v] = pos;
            }
            continue;
        }
        let k = node_index(level, pos);
        let normal = equilibrium_direction(params.theta[k], params.phi[k]).0;
        let proj = |v: usize| normal.x * centers[v][0] + normal.y * centers[v][1] + normal.z * centers[v][2];
        cell.sort_by(|a, b| proj(*a).total_cmp(&proj(*b)).then(a.cmp(b)));
        let (w1, w2) = (subtree(level + 1, 2 * pos), subtree(level + 1, 2 * pos + 1));
        let cut = ((w1 / (w1 + w2)) * cell.len() as f64).round() as usize;
        let second = cell.split_off(cut.min(cell.len()));
        stack.push((level + 1, 2 * pos, cell));
        stack.push((level + 1, 2 * pos + 1, second));
    }
    let quats = params.leaf_quats();
    let mut grain_of_leaf = vec![u32::MAX; leaf_count(depth)];
    let mut leaf_of_grain = Vec::new();
    let mut orientations: Vec<Quat> = Vec::new();
    for l in 0..leaf_count(depth) {
        if leaf.contains(&l) {
            grain_of_leaf[l] = leaf_of_grain.len() as u32;
            leaf_of_grain.push(l);
            orientations.push(quats[l]);
        }
    }
    let rve = VoxelRve {
        dims,
        grain_ids: leaf.iter().map(|l| grain_of_leaf[*l]).collect(),
        orientations,
        seed: 0,
        texture: None,
    };
    rve.validate()?;
    Ok(AnalogousCell { rve, leaf_of_grain })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotlab::TaitBryan;

    #[test]
    fn fractions_follow_weights() {
        let quats: Vec<Quat> = (0..16).map(|k| TaitBryan::new(0.1 * k as f64, 0.2, -0.3).to_quat()).collect();
        let mut p = OdmnParams::with_orientations(4, &quats, 3).unwrap();
        for (k, z) in p.z.iter_mut().enumerate() {
            *z = (k as f64 * 0.37).sin() * 2.0;
        }
        let dims = [20, 20, 20];
        let cell = export_analogous_unit_cell(&p, dims).unwrap();
        let frac = p.volume_fractions();
        let got = cell.rve.grain_fractions();
        assert_eq!(cell.leaf_of_grain.len(), 16);
        for (g, &l) in cell.leaf_of_grain.iter().enumerate() {
            assert!((got[g] - frac[l]).abs() <= 2.0 / 20.0, "leaf {l}: {} vs {}", got[g], frac[l]);
        }
    }

    #[test]
    fn vertical_normal_stacks_layers() {
        let mut p = OdmnParams::with_orientations(1, &[Quat::IDENTITY, Quat::IDENTITY], 0).unwrap();
        p.theta[0] = 0.0;
        let cell = export_analogous_unit_cell(&p, [4, 4, 8]).unwrap();
        for idx in 0..cell.rve.voxel_count() {
            let k = cell.rve.coords(idx)[2];
            assert_eq!(cell.rve.grain_ids[idx], u32::from(k >= 4));
        }
    }

    #[test]
    fn negligible_leaf_is_dropped() {
        let mut p = OdmnParams::with_orientations(1, &[Quat::IDENTITY, Quat::IDENTITY], 0).unwrap();
        p.z = vec![5.0, -40.0];
        let cell = export_analogous_unit_cell(&p, [4, 4, 4]).unwrap();
        assert_eq!(cell.leaf_of_grain, vec![0]);
    }
}
