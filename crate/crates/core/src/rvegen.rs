//! Synthetic periodic polycrystals on a voxel grid.
//!
//! Geometry is a periodic Voronoi tessellation (minimum-image distances in
//! voxel units). Orientations come from a texture mixture: a component is
//! picked with probability proportional to its weight, with a uniform
//! background worth [`BACKGROUND_ORIENTATIONS`] orientations of the
//! background weight; the pick is then perturbed by a random rotation whose
//! angle is half-normal with scale `spread * SPREAD_DEGREES` degrees.
//!
//! Voxel `(i, j, k)` lives at flat index `(i * ny + j) * nz + k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rotlab::{cubic_stiffness, to_fcc_fundamental_zone, Quat, Vec3};

pub const BACKGROUND_ORIENTATIONS: f64 = 1000.0;
/// Degrees of angular scale per unit of `spread`.
pub const SPREAD_DEGREES: f64 = 1.0;
const MAX_RESEEDS: usize = 10;

const RVE_MAGIC: &[u8; 4] = b"TXRV";
pub const RVE_VERSION: u32 = 1;
const RVE_TEXT_HEADER: &str = "texnet-rve";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureComponent {
    pub orientation: Quat,
    /// Intensity in multiples of a random distribution.
    pub weight: f64,
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub components: Vec<TextureComponent>,
    pub background: f64,
}

impl TextureSpec {
    pub fn uniform() -> Self {
        TextureSpec {
            components: Vec::new(),
            background: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.components {
            if !(c.weight >= 1.0) || !c.weight.is_finite() {
                return Err(Error::Invalid(format!("component weight {} must be >= 1", c.weight)));
            }
            if !(c.spread >= 0.0) || !c.spread.is_finite() {
                return Err(Error::Invalid(format!("component spread {} must be >= 0", c.spread)));
            }
        }
        if !(self.background >= 1.0) || !self.background.is_finite() {
            return Err(Error::Invalid(format!("background weight {} must be >= 1", self.background)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TextureClass {
    StrongOne,
    StrongTwo,
    WeakOne,
    WeakTwo,
}

/// Goss orientation, {110}<001>.
pub fn goss() -> Quat {
    Quat::from_axis_angle(&Vec3::x(), std::f64::consts::FRAC_PI_4)
}

/// Brass orientation, {110}<112>, from Bunge angles (35.26, 45, 0) degrees.
pub fn brass() -> Quat {
    let (p1, p) = (35.26f64.to_radians(), 45f64.to_radians());
    let rz = Quat::from_axis_angle(&Vec3::z(), p1);
    let rx = Quat::from_axis_angle(&Vec3::x(), p);
    rz.mul(&rx)
}

impl TextureClass {
    pub const ALL: [TextureClass; 4] = [Self::StrongOne, Self::StrongTwo, Self::WeakOne, Self::WeakTwo];

    pub fn short_name(self) -> &'static str {
        match self {
            Self::StrongOne => "S1",
            Self::StrongTwo => "S2",
            Self::WeakOne => "W1",
            Self::WeakTwo => "W2",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.short_name().eq_ignore_ascii_case(s))
    }

    pub fn spec(self) -> TextureSpec {
        let comp = |orientation, spread| TextureComponent {
            orientation,
            weight: 5e5,
            spread,
        };
        let components = match self {
            Self::StrongOne => vec![comp(goss(), 1.0)],
            Self::StrongTwo => vec![comp(goss(), 8.0)],
            Self::WeakOne => vec![],
            Self::WeakTwo => vec![comp(goss(), 10.0), comp(brass(), 10.0)],
        };
        TextureSpec {
            components,
            background: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelRve {
    pub dims: [usize; 3],
    pub grain_ids: Vec<u32>,
    pub orientations: Vec<Quat>,
    pub seed: u64,
    pub texture: Option<TextureSpec>,
}

impl VoxelRve {
    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn grain_count(&self) -> usize {
        self.orientations.len()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        [idx / (self.dims[1] * self.dims[2]), j, k]
    }

    pub fn grain_volumes(&self) -> Vec<usize> {
        let mut v = vec![0; self.grain_count()];
        for g in &self.grain_ids {
            v[*g as usize] += 1;
        }
        v
    }

    /// Volume fractions, summing to one.
    pub fn grain_fractions(&self) -> Vec<f64> {
        let n = self.voxel_count() as f64;
        self.grain_volumes().into_iter().map(|v| v as f64 / n).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Invalid(format!("grid dims {:?} must be positive", self.dims)));
        }
        let n = self.dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
        if n != Some(self.grain_ids.len()) {
            return Err(Error::Invalid("voxel map size does not match dims".into()));
        }
        if self.orientations.is_empty() {
            return Err(Error::Invalid("no grains".into()));
        }
        if let Some(g) = self.grain_ids.iter().find(|g| **g as usize >= self.grain_count()) {
            return Err(Error::Invalid(format!("grain id {g} out of range")));
        }
        if let Some(g) = self.grain_volumes().iter().position(|v| *v == 0) {
            return Err(Error::Invalid(format!("grain {g} has no voxels")));
        }
        for q in &self.orientations {
            let n = q.dot(q);
            if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!("grain orientation {q:?} is not a unit quaternion")));
            }
        }
        if let Some(t) = &self.texture {
            t.validate()?;
        }
        Ok(())
    }
}

fn min_image(d: f64, len: f64) -> f64 {
    d - len * (d / len).round()
}

/// Nearest-seed label for every voxel center under periodic wrap.
/// Seeds are in voxel units, within `[0, dims)`.
pub fn tessellate(seeds: &[[f64; 3]], dims: [usize; 3]) -> Vec<u32> {
    let len = dims.map(|d| d as f64);
    let mut ids = Vec::with_capacity(dims.iter().product());
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let p = [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5];
                let mut best = (0u32, f64::INFINITY);
                for (g, s) in seeds.iter().enumerate() {
                    let d2: f64 = (0..3).map(|a| min_image(p[a] - s[a], len[a]).powi(2)).sum();
                    if d2 < best.1 {
                        best = (g as u32, d2);
                    }
                }
                ids.push(best.0);
            }
        }
    }
    ids
}

/// Periodic Voronoi geometry with `grains` nonempty grains; orientations are identity.
pub fn generate_rve(grains: usize, dims: [usize; 3], seed: u64) -> Result<VoxelRve> {
    if grains == 0 {
        return Err(Error::Invalid("grain count must be at least 1".into()));
    }
    if dims.iter().any(|d| *d < 4) {
        return Err(Error::Invalid(format!("grid dims {dims:?} must be at least 4 per axis")));
    }
    let voxels: usize = dims.iter().product();
    if grains > voxels {
        return Err(Error::Invalid(format!("{grains} grains do not fit in {voxels} voxels")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| dims.map(|d| rng.random_range(0.0..d as f64));
    let mut seeds: Vec<[f64; 3]> = (0..grains).map(|_| draw(&mut rng)).collect();
    for _ in 0..=MAX_RESEEDS {
        let ids = tessellate(&seeds, dims);
        let mut volume = vec![0usize; grains];
        ids.iter().for_each(|g| volume[*g as usize] += 1);
        let empty: Vec<usize> = (0..grains).filter(|g| volume[*g] == 0).collect();
        if empty.is_empty() {
            return Ok(VoxelRve {
                dims,
                grain_ids: ids,
                orientations: vec![Quat::IDENTITY; grains],
                seed,
                texture: None,
            });
        }
        for g in empty {
            seeds[g] = draw(&mut rng);
        }
    }
    Err(Error::Invalid(format!(
        "tessellation still has empty grains after {MAX_RESEEDS} reseeds"
    )))
}

/// Uniformly distributed rotation.
pub fn random_rotation<R: Rng>(rng: &mut R) -> Quat {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
            return Quat::new(v[0], v[1], v[2], v[3]);
        }
    }
}

fn random_axis<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
        if v.norm() > 1e-9 {
            return v.normalize();
        }
    }
}

/// One orientation from the texture mixture, reduced to the fundamental zone.
pub fn sample_orientation<R: Rng>(spec: &TextureSpec, rng: &mut R) -> Quat {
    let background = spec.background * BACKGROUND_ORIENTATIONS;
    let total = background + spec.components.iter().map(|c| c.weight).sum::<f64>();
    let mut u = rng.random_range(0.0..total);
    for c in &spec.components {
        if u < c.weight {
            let scale = (c.spread * SPREAD_DEGREES).to_radians();
            let n: f64 = StandardNormal.sample(rng);
            let angle = n.abs() * scale;
            let perturb = Quat::from_axis_angle(&random_axis(rng), angle);
            return to_fcc_fundamental_zone(&perturb.mul(&c.orientation));
        }
        u -= c.weight;
    }
    to_fcc_fundamental_zone(&random_rotation(rng))
}

/// Draws one orientation per grain from `spec`.
pub fn assign_texture(rve: &VoxelRve, spec: &TextureSpec, seed: u64) -> Result<VoxelRve> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let orientations = (0..rve.grain_count()).map(|_| sample_orientation(spec, &mut rng)).collect();
    Ok(VoxelRve {
        orientations,
        texture: Some(spec.clone()),
        ..rve.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElasticRanges {
    pub c11: (f64, f64),
    /// As a fraction of C11.
    pub c12_ratio: (f64, f64),
    /// Zener ratio `2 C44 / (C11 - C12)`, drawn log-uniformly.
    pub anisotropy: (f64, f64),
}

impl Default for ElasticRanges {
    fn default() -> Self {
        ElasticRanges {
            c11: (80.0, 300.0),
            c12_ratio: (0.2, 0.8),
            anisotropy: (0.5, 4.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubicTriple {
    pub c11: f64,
    pub c12: f64,
    pub c44: f64,
}

impl CubicTriple {
    pub fn zener(&self) -> f64 {
        2.0 * self.c44 / (self.c11 - self.c12)
    }
}

pub fn sample_elastic_triples(n: usize, ranges: &ElasticRanges, seed: u64) -> Result<Vec<CubicTriple>> {
    if n == 0 {
        return Err(Error::Invalid("need at least one elastic triple".into()));
    }
    let r = ranges;
    let ok = r.c11.0 > 0.0
        && r.c11.0 <= r.c11.1
        && r.c12_ratio.0 > -0.5
        && r.c12_ratio.0 <= r.c12_ratio.1
        && r.c12_ratio.1 < 1.0
        && r.anisotropy.0 > 0.0
        && r.anisotropy.0 <= r.anisotropy.1;
    if !ok {
        return Err(Error::Invalid(format!("inadmissible elastic ranges {ranges:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uni = |lo: f64, hi: f64| if lo == hi { lo } else { rng.random_range(lo..hi) };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let c11 = uni(r.c11.0, r.c11.1);
        let c12 = uni(r.c12_ratio.0, r.c12_ratio.1) * c11;
        let a = uni(r.anisotropy.0.ln(), r.anisotropy.1.ln()).exp();
        let t = CubicTriple {
            c11,
            c12,
            c44: a * (c11 - c12) / 2.0,
        };
        cubic_stiffness(t.c11, t.c12, t.c44)?;
        out.push(t);
    }
    Ok(out)
}

fn texture_json(t: &Option<TextureSpec>) -> Result<Vec<u8>> {
    Ok(match t {
        Some(t) => serde_json::to_vec(t)?,
        None => Vec::new(),
    })
}

fn parse_texture(bytes: &[u8]) -> Result<Option<TextureSpec>> {
    if bytes.is_empty() {
        return Ok(None);
    }
    serde_json::from_slice(bytes)
        .map(Some)
        .map_err(|e| Error::format("rve", format!("texture record: {e}")))
}

fn checked_quat(c: [f64; 4]) -> Result<Quat> {
    let n: f64 = c.iter().map(|v| v * v).sum();
    if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
        return Err(Error::format("rve", format!("orientation {c:?} is not a unit quaternion")));
    }
    Ok(Quat {
        w: c[0],
        x: c[1],
        y: c[2],
        z: c[3],
    })
}

fn finish_decoded(rve: VoxelRve) -> Result<VoxelRve> {
    rve.validate().map_err(|e| Error::format("rve", e.to_string()))?;
    Ok(rve)
}

/// Binary layout (little-endian): magic `TXRV`, u32 version, u32 nx ny nz,
/// u64 seed, u64-prefixed texture JSON (empty when absent), u64 grain
/// count followed by `(w, x, y, z)` f64 quaternions, u64 voxel count
/// followed by u32 grain IDs.
pub fn encode_rve(rve: &VoxelRve) -> Result<Vec<u8>> {
    rve.validate()?;
    let mut w = Writer::new(RVE_MAGIC, RVE_VERSION);
    for d in rve.dims {
        w.u32(u32::try_from(d).map_err(|_| Error::Invalid("grid dimension exceeds u32".into()))?);
    }
    w.u64(rve.seed);
    w.bytes(&texture_json(&rve.texture)?);
    w.u64(rve.grain_count() as u64);
    for q in &rve.orientations {
        q.to_array().into_iter().for_each(|c| w.f64(c));
    }
    w.u64(rve.voxel_count() as u64);
    rve.grain_ids.iter().for_each(|g| w.u32(*g));
    Ok(w.buf)
}

pub fn decode_rve(data: &[u8]) -> Result<VoxelRve> {
    let mut r = Reader::open("rve", data, RVE_MAGIC, RVE_VERSION)?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let seed = r.u64()?;
    let texture = parse_texture(r.bytes()?)?;
    let g = r.count(32)?;
    let mut orientations = Vec::with_capacity(g);
    for _ in 0..g {
        orientations.push(checked_quat([r.f64()?, r.f64()?, r.f64()?, r.f64()?])?);
    }
    let v = r.count(4)?;
    let mut grain_ids = Vec::with_capacity(v);
    for _ in 0..v {
        grain_ids.push(r.u32()?);
    }
    r.finish()?;
    finish_decoded(VoxelRve {
        dims,
        grain_ids,
        orientations,
        seed,
        texture,
    })
}

/// Plain-text variant, intended for small grids. Floats use shortest
/// round-trip formatting so the text form is lossless too.
pub fn rve_to_text(rve: &VoxelRve) -> Result<String> {
    rve.validate()?;
    let mut s = format!("{RVE_TEXT_HEADER} {RVE_VERSION}\n");
    s.push_str(&format!("dims {} {} {}\n", rve.dims[0], rve.dims[1], rve.dims[2]));
    s.push_str(&format!("seed {}\n", rve.seed));
    match &rve.texture {
        Some(t) => s.push_str(&format!("texture {}\n", serde_json::to_string(t)?)),
        None => s.push_str("texture none\n"),
    }
    s.push_str(&format!("grains {}\n", rve.grain_count()));
    for q in &rve.orientations {
        s.push_str(&format!("{:?} {:?} {:?} {:?}\n", q.w, q.x, q.y, q.z));
    }
    s.push_str("voxels\n");
    for row in rve.grain_ids.chunks(rve.dims[2]) {
        let line: Vec<String> = row.iter().map(|g| g.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    Ok(s)
}

pub fn rve_from_text(text: &str) -> Result<VoxelRve> {
    let bad = |d: &str| Error::format("rve text", d.to_string());
    let mut lines = text.lines();
    let mut next = |expect: &str| -> Result<&str> {
        let line = lines.next().ok_or_else(|| bad(&format!("missing {expect} line")))?;
        line.strip_prefix(expect)
            .map(str::trim)
            .ok_or_else(|| bad(&format!("expected {expect:?}, found {line:?}")))
    };
    let version: u32 = next(RVE_TEXT_HEADER)?.parse().map_err(|_| bad("bad version"))?;
    if version != RVE_VERSION {
        return Err(Error::Version {
            what: "rve text",
            found: version,
            expected: RVE_VERSION,
        });
    }
    let nums = |s: &str| -> Result<Vec<usize>> { s.split_whitespace().map(|t| t.parse().map_err(|_| bad(&format!("bad integer {t:?}")))).collect() };
    let dims: [usize; 3] = nums(next("dims")?)?.try_into().map_err(|_| bad("dims needs three values"))?;
    let seed: u64 = next("seed")?.parse().map_err(|_| bad("bad seed"))?;
    let texture = match next("texture")? {
        "none" => None,
        json => parse_texture(json.as_bytes())?,
    };
    let g: usize = next("grains")?.parse().map_err(|_| bad("bad grain count"))?;
    let mut orientations = Vec::new();
    for _ in 0..g {
        let line = next("")?;
        let c: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(&format!("bad float {t:?}"))))
            .collect::<Result<_>>()?;
        let c: [f64; 4] = c.try_into().map_err(|_| bad("quaternion needs four values"))?;
        orientations.push(checked_quat(c)?);
    }
    next("voxels")?;
    let mut grain_ids = Vec::new();
    for line in lines {
        for t in line.split_whitespace() {
            grain_ids.push(t.parse::<u32>().map_err(|_| bad(&format!("bad grain id {t:?}")))?);
        }
    }
    finish_decoded(VoxelRve {
        dims,
        grain_ids,
        orientations,
        seed,
        texture,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotlab::cubic_misorientation;
    use crate::tacs::build_histogram;

    #[test]
    fn single_grain_fills_grid() {
        let r = generate_rve(1, [5, 4, 6], 0).unwrap();
        assert!(r.grain_ids.iter().all(|g| *g == 0));
        assert_eq!(r.grain_volumes(), vec![120]);
    }

    #[test]
    fn opposite_corner_seeds_split_evenly() {
        let dims = [8, 8, 8];
        let seeds = [[0.0, 0.0, 0.0], [4.0, 4.0, 4.0]];
        let ids = tessellate(&seeds, dims);
        // brute-force oracle with explicit periodic images
        let mut count = [0usize; 2];
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..8 {
                    let p = [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5];
                    let mut best = (0, f64::INFINITY);
                    for (g, s) in seeds.iter().enumerate() {
                        for sx in -1..=1 {
                            for sy in -1..=1 {
                                for sz in -1..=1 {
                                    let q = [s[0] + 8.0 * sx as f64, s[1] + 8.0 * sy as f64, s[2] + 8.0 * sz as f64];
                                    let d: f64 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum();
                                    if d < best.1 {
                                        best = (g, d);
                                    }
                                }
                            }
                        }
                    }
                    assert_eq!(ids[(i * 8 + j) * 8 + k] as usize, best.0);
                    count[best.0] += 1;
                }
            }
        }
        let (a, b) = (count[0] as f64, count[1] as f64);
        assert!((a - b).abs() / (a + b) < 0.1);
    }

    #[test]
    fn lattice_translation_invariance() {
        let dims = [6, 7, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seeds: Vec<[f64; 3]> = (0..9).map(|_| dims.map(|d| rng.random_range(0.0..d as f64))).collect();
        let shifted: Vec<[f64; 3]> = seeds.iter().map(|s| [s[0] + 6.0, s[1] - 14.0, s[2] + 5.0]).collect();
        assert_eq!(tessellate(&seeds, dims), tessellate(&shifted, dims));
    }

    #[test]
    fn every_grain_nonempty_and_volume_conserved() {
        for seed in 0..5 {
            let r = generate_rve(60, [12, 12, 12], seed).unwrap();
            r.validate().unwrap();
            assert_eq!(r.grain_volumes().iter().sum::<usize>(), 12 * 12 * 12);
        }
        assert!(generate_rve(0, [8, 8, 8], 0).is_err());
        assert!(generate_rve(2, [3, 8, 8], 0).is_err());
    }

    #[test]
    fn zero_spread_gives_one_orientation() {
        let r = generate_rve(20, [8, 8, 8], 1).unwrap();
        let spec = TextureSpec {
            components: vec![TextureComponent {
                orientation: goss(),
                weight: 1e12,
                spread: 0.0,
            }],
            background: 1.0,
        };
        let t = assign_texture(&r, &spec, 5).unwrap();
        let first = t.orientations[0];
        assert!(t.orientations.iter().all(|q| cubic_misorientation(q, &first) < 1e-9));
        assert!(cubic_misorientation(&first, &goss()) < 1e-9);
    }

    #[test]
    fn background_is_uniform() {
        // chi-square against an independent uniform draw on the same bins
        let spec = TextureSpec::uniform();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 40_000;
        let a: Vec<Quat> = (0..n).map(|_| sample_orientation(&spec, &mut rng)).collect();
        let mut rng2 = ChaCha8Rng::seed_from_u64(12);
        let b: Vec<Quat> = (0..n).map(|_| random_rotation(&mut rng2)).collect();
        let w = vec![1.0; n];
        let ha = build_histogram(&a, &w, 64).unwrap();
        let hb = build_histogram(&b, &w, 64).unwrap();
        let mut chi2 = 0.0;
        let mut dof = 0;
        for (x, y) in ha.density.iter().zip(&hb.density) {
            let (x, y) = (x * n as f64 / 64.0, y * n as f64 / 64.0);
            if x + y > 0.0 {
                chi2 += (x - y).powi(2) / (x + y);
                dof += 1;
            }
        }
        // generous bound: mean dof, sd sqrt(2 dof)
        assert!(chi2 < dof as f64 + 5.0 * (2.0 * dof as f64).sqrt(), "chi2 {chi2} dof {dof}");
    }

    #[test]
    fn strong_class_concentrates() {
        let spec = TextureClass::StrongOne.spec();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 2000;
        let scale = (spec.components[0].spread * SPREAD_DEGREES).to_radians();
        let inside = (0..n)
            .map(|_| sample_orientation(&spec, &mut rng))
            .filter(|q| cubic_misorientation(q, &goss()) <= 3.0 * scale)
            .count();
        assert!(inside as f64 >= 0.99 * n as f64, "{inside}");
    }

    #[test]
    fn elastic_triples_admissible_and_span_anisotropy() {
        let t = sample_elastic_triples(500, &ElasticRanges::default(), 4).unwrap();
        assert_eq!(t, sample_elastic_triples(500, &ElasticRanges::default(), 4).unwrap());
        assert!(t.iter().all(|t| cubic_stiffness(t.c11, t.c12, t.c44).is_ok()));
        assert!(t.iter().any(|t| t.zener() < 1.0));
        assert!(t.iter().any(|t| t.zener() > 1.0));
        assert!(t.iter().all(|t| (80.0..=300.0).contains(&t.c11)));
        assert!(sample_elastic_triples(0, &ElasticRanges::default(), 0).is_err());
    }

    #[test]
    fn binary_and_text_round_trip() {
        let r = generate_rve(7, [5, 6, 4], 9).unwrap();
        let r = assign_texture(&r, &TextureClass::WeakTwo.spec(), 1).unwrap();
        let bin = encode_rve(&r).unwrap();
        assert_eq!(decode_rve(&bin).unwrap(), r);
        let txt = rve_to_text(&r).unwrap();
        assert_eq!(rve_from_text(&txt).unwrap(), r);
        let bare = VoxelRve { texture: None, ..r };
        assert_eq!(decode_rve(&encode_rve(&bare).unwrap()).unwrap(), bare);
        assert_eq!(rve_from_text(&rve_to_text(&bare).unwrap()).unwrap(), bare);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let r = generate_rve(3, [4, 4, 4], 0).unwrap();
        let bin = encode_rve(&r).unwrap();
        assert!(matches!(decode_rve(&bin[..bin.len() - 1]), Err(Error::Format { .. })));
        let mut v2 = bin.clone();
        v2[4] = 2;
        assert!(matches!(decode_rve(&v2), Err(Error::Version { .. })));
        let mut bad_id = bin.clone();
        let n = bad_id.len();
        bad_id[n - 4..].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(decode_rve(&bad_id), Err(Error::Format { .. })));
        assert!(rve_from_text("texnet-rve 1\ndims 4 4\n").is_err());
    }
}
