//! Dataset assembly: textured RVEs, FFT labels, TACS samples and graphs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{train_end_to_end, GnnModel, GnnSample, GnnTrainConfig};
use crate::mgraph::{build_graph, MicrostructureGraph};
use crate::odmn::{split_indices, OdmnParams, StiffnessPair};
use crate::oracle::{label_rve, FftConfig, Label};
use crate::rotlab::Quat;
use crate::rvegen::{assign_texture, generate_rve, sample_elastic_triples, ElasticRanges, TextureClass, VoxelRve};
use crate::tacs::{tacs_run, TacsConfig};

pub const DATASET_VERSION: u32 = 1;
pub const PARAMS_VERSION: u32 = 1;

/// Coordinate second moments `sum x_i x_j / V` about the centroid.
pub const SECOND_MOMENT_CONVENTION: &str = "coordinate second moments sum(x_i x_j)/V about the grain centroid";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub dims: [usize; 3],
    pub grains: usize,
    pub classes: Vec<TextureClass>,
    pub rves_per_class: usize,
    pub triples_per_rve: usize,
    pub depths: Vec<usize>,
    pub elastic: ElasticRanges,
    pub fft: FftConfig,
    pub tacs: TacsConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            dims: [16, 16, 16],
            grains: 40,
            classes: TextureClass::ALL.to_vec(),
            rves_per_class: 2,
            triples_per_rve: 50,
            depths: vec![4],
            elastic: ElasticRanges::default(),
            fft: FftConfig::default(),
            tacs: TacsConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.rves_per_class == 0 || self.triples_per_rve == 0 {
            return Err(Error::Invalid("dataset needs classes, RVEs and triples".into()));
        }
        if self.depths.is_empty() || self.depths.iter().any(|d| !(1..=12).contains(d)) {
            return Err(Error::Invalid("depths must lie in 1..=12".into()));
        }
        if self.dims.iter().any(|d| *d < 4) || self.grains < 2 {
            return Err(Error::Invalid("RVE needs dims >= 4 and at least two grains".into()));
        }
        Ok(())
    }
}

/// Independent stream seed derived from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// TACS sample and graph at one network depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthData {
    pub depth: usize,
    pub orientations: Vec<Quat>,
    pub deviation: f64,
    pub graph: MicrostructureGraph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub class: TextureClass,
    pub rve_seed: u64,
    pub split: Split,
    pub labels: Vec<Label>,
    pub per_depth: Vec<DepthData>,
}

impl DatasetEntry {
    pub fn depth(&self, depth: usize) -> Option<&DepthData> {
        self.per_depth.iter().find(|d| d.depth == depth)
    }

    pub fn pairs(&self) -> Result<Vec<StiffnessPair>> {
        self.labels
            .iter()
            .map(|l| {
                Ok(StiffnessPair {
                    crystal: l.crystal()?,
                    target: l.target(),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub version: u32,
    pub config: DatasetConfig,
    pub second_moments: String,
    pub entries: Vec<DatasetEntry>,
}

/// Per class: shuffle by seed, then 80 % train, 10 % val, rest test.
/// Classes with at least three members keep one validation and one test item.
pub fn class_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    crate::odmn::shuffle(&mut order, seed);
    let mut n_val = ((n as f64) * 0.1).round() as usize;
    let mut n_test = ((n as f64) * 0.1).round() as usize;
    if n >= 3 {
        n_val = n_val.max(1);
        n_test = n_test.max(1);
    }
    let n_train = n - n_val - n_test;
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

/// Generates one textured RVE per `(class, k)`; parallel across RVEs.
pub fn generate_rves(cfg: &DatasetConfig) -> Result<Vec<(TextureClass, VoxelRve)>> {
    cfg.validate()?;
    let jobs: Vec<(usize, TextureClass, usize)> = cfg
        .classes
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| (0..cfg.rves_per_class).map(move |k| (ci, *c, k)))
        .collect();
    jobs.par_iter()
        .map(|&(ci, class, k)| {
            let s = derive_seed(cfg.seed, (ci * 100_000 + k) as u64);
            let rve = generate_rve(cfg.grains, cfg.dims, s)?;
            Ok((class, assign_texture(&rve, &class.spec(), derive_seed(s, 1))?))
        })
        .collect()
}

/// Grain orientations weighted by voxel volume, TACS-sampled to `2^depth`.
pub fn depth_data(rve: &VoxelRve, depth: usize, tacs: &TacsConfig) -> Result<DepthData> {
    let w = rve.grain_fractions();
    let res = tacs_run(&rve.orientations, &w, depth, tacs)?;
    let graph = build_graph(rve, &res.sample)?;
    Ok(DepthData {
        depth,
        orientations: res.sample,
        deviation: res.deviation,
        graph,
    })
}

/// Labels, samples and graphs for every RVE.
pub fn build_dataset(cfg: &DatasetConfig, rves: &[(TextureClass, VoxelRve)]) -> Result<Dataset> {
    cfg.validate()?;
    let mut entries = Vec::with_capacity(rves.len());
    for (k, (class, rve)) in rves.iter().enumerate() {
        let triples = sample_elastic_triples(cfg.triples_per_rve, &cfg.elastic, derive_seed(rve.seed, 2))?;
        let labels = label_rve(rve, &triples, cfg.fft)?.labels;
        let per_depth = cfg
            .depths
            .iter()
            .map(|&d| depth_data(rve, d, &cfg.tacs))
            .collect::<Result<Vec<_>>>()?;
        entries.push(DatasetEntry {
            name: format!("{}-{k:03}", class.short_name()),
            class: *class,
            rve_seed: rve.seed,
            split: Split::Train,
            labels,
            per_depth,
        });
    }
    for (ci, class) in cfg.classes.iter().enumerate() {
        let idx: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].class == *class).collect();
        let splits = class_splits(idx.len(), derive_seed(cfg.seed, 1_000_000 + ci as u64));
        for (i, s) in idx.into_iter().zip(splits) {
            entries[i].split = s;
        }
    }
    Ok(Dataset {
        version: DATASET_VERSION,
        config: cfg.clone(),
        second_moments: SECOND_MOMENT_CONVENTION.into(),
        entries,
    })
}

impl Dataset {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        check_version(text, "dataset", DATASET_VERSION)?;
        let d: Dataset = serde_json::from_str(text).map_err(|e| Error::format("dataset", e.to_string()))?;
        d.config.validate()?;
        for e in &d.entries {
            for dd in &e.per_depth {
                dd.graph.validate()?;
                if dd.orientations.len() != 1 << dd.depth {
                    return Err(Error::format("dataset", format!("{}: sample size does not match depth", e.name)));
                }
            }
        }
        Ok(d)
    }

    /// GNN samples of one split at one depth; `None` takes every split.
    pub fn samples(&self, depth: usize, split: Option<Split>) -> Result<Vec<GnnSample>> {
        self.entries
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .map(|e| {
                let d = e
                    .depth(depth)
                    .ok_or_else(|| Error::Invalid(format!("{} has no data for depth {depth}", e.name)))?;
                Ok(GnnSample {
                    graph: d.graph.clone(),
                    orientations: d.orientations.clone(),
                    pairs: e.pairs()?,
                })
            })
            .collect()
    }
}

/// Training and validation samples at `depth`. Uses the validation split
/// when the dataset has one; otherwise holds out a fifth of every RVE's pairs.
pub fn train_val_samples(ds: &Dataset, depth: usize, seed: u64) -> Result<(Vec<GnnSample>, Vec<GnnSample>)> {
    let val = ds.samples(depth, Some(Split::Val))?;
    if !val.is_empty() {
        return Ok((ds.samples(depth, Some(Split::Train))?, val));
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (k, s) in ds.samples(depth, Some(Split::Train))?.into_iter().enumerate() {
        let (ti, vi) = split_indices(s.pairs.len(), 0.2, derive_seed(seed, k as u64));
        let pick = |idx: &[usize]| GnnSample {
            graph: s.graph.clone(),
            orientations: s.orientations.clone(),
            pairs: idx.iter().map(|&i| s.pairs[i]).collect(),
        };
        if !vi.is_empty() {
            held.push(pick(&vi));
        }
        train.push(pick(&ti));
    }
    Ok((train, held))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub depth: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub final_train: f64,
    pub epochs: usize,
}

/// Trains one model per depth on the same dataset and reports validation losses.
pub fn ablate_depths(ds: &Dataset, depths: &[usize], cfg: &GnnTrainConfig) -> Result<Vec<AblationRow>> {
    depths
        .iter()
        .map(|&depth| {
            let (train, val) = train_val_samples(ds, depth, cfg.seed)?;
            let model = GnnModel::new(depth, cfg.seed)?;
            let out = train_end_to_end(&model, &train, &val, cfg)?;
            Ok(AblationRow {
                depth,
                best_val: out.best_val,
                best_epoch: out.best_epoch,
                final_train: out.history.last().map_or(f64::NAN, |h| h.train),
                epochs: out.history.len() - 1,
            })
        })
        .collect()
}

/// `depth,best_val,best_epoch,final_train,epochs` rows.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("depth,best_val,best_epoch,final_train,epochs\n");
    for r in rows {
        s.push_str(&format!("{},{:.8e},{},{:.8e},{}\n", r.depth, r.best_val, r.best_epoch, r.final_train, r.epochs));
    }
    s
}

fn check_version(text: &str, what: &'static str, expected: u32) -> Result<()> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::format(what, e.to_string()))?;
    let found = v
        .get("version")
        .and_then(|x| x.as_u64())
        .ok_or_else(|| Error::format(what, "missing version"))?;
    if found != expected as u64 {
        return Err(Error::Version {
            what,
            found: found.min(u32::MAX as u64) as u32,
            expected,
        });
    }
    Ok(())
}

/// Versioned container for standalone network parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub version: u32,
    pub seed: u64,
    pub params: OdmnParams,
}

impl ParamsFile {
    pub fn new(seed: u64, params: OdmnParams) -> Self {
        ParamsFile {
            version: PARAMS_VERSION,
            seed,
            params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        check_version(text, "params", PARAMS_VERSION)?;
        let p: ParamsFile = serde_json::from_str(text).map_err(|e| Error::format("params", e.to_string()))?;
        p.params.validate().map_err(|e| Error::format("params", e.to_string()))?;
        Ok(p)
    }
}
