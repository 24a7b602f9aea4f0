//! Run-description file: one TOML document holding every knob of the workflow.

use serde::{Deserialize, Serialize};
use texnet::cponline::{CpParams, LoadProgram};
use texnet::dataset::DatasetConfig;
use texnet::gnn::GnnTrainConfig;
use texnet::Error;

pub const RUN_CONFIG_VERSION: u32 = 1;
pub const PROGRAM_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Every random stream in a run derives from this.
    pub seed: u64,
    /// Network depth used by `train gnn`, `infer` and friends.
    pub depth: usize,
    pub dataset: DatasetConfig,
    pub train: GnnTrainConfig,
    pub cp: CpParams,
    pub program: ProgramSpec,
    /// Bins of the fundamental-zone histogram used for texture metrics.
    pub texture_bins: usize,
    /// Cells per side of the emitted pole figures.
    pub pole_grid: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: RUN_CONFIG_VERSION,
            seed: 0,
            depth: 4,
            dataset: DatasetConfig::default(),
            train: GnnTrainConfig::default(),
            cp: CpParams::default(),
            program: ProgramSpec::default(),
            texture_bins: texnet::tacs::DEFAULT_BINS,
            pole_grid: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProgramSpec {
    UniaxialCyclic {
        peak: f64,
        dt: f64,
        #[serde(default)]
        snapshot_every: usize,
    },
    Uniaxial {
        peak: f64,
        dt: f64,
        #[serde(default)]
        snapshot_every: usize,
    },
    SimpleShear {
        amount: f64,
        dt: f64,
        #[serde(default)]
        snapshot_every: usize,
    },
    Custom(LoadProgram),
}

impl Default for ProgramSpec {
    fn default() -> Self {
        ProgramSpec::UniaxialCyclic {
            peak: 1.3,
            dt: 1e-3,
            snapshot_every: 50,
        }
    }
}

impl ProgramSpec {
    pub fn build(&self) -> texnet::Result<LoadProgram> {
        let (mut p, every) = match *self {
            ProgramSpec::UniaxialCyclic { peak, dt, snapshot_every } => (LoadProgram::uniaxial_cyclic(peak, dt), snapshot_every),
            ProgramSpec::Uniaxial { peak, dt, snapshot_every } => (LoadProgram::uniaxial(peak, dt), snapshot_every),
            ProgramSpec::SimpleShear { amount, dt, snapshot_every } => (LoadProgram::simple_shear(amount, dt), snapshot_every),
            ProgramSpec::Custom(ref p) => (p.clone(), p.snapshot_every),
        };
        p.snapshot_every = every;
        p.validate()?;
        Ok(p)
    }
}

/// Versioned JSON wrapper for a standalone load program.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramFile {
    pub version: u32,
    pub program: LoadProgram,
}

impl ProgramFile {
    pub fn from_json(text: &str) -> texnet::Result<LoadProgram> {
        let f: ProgramFile = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "load program",
            detail: e.to_string(),
        })?;
        if f.version != PROGRAM_VERSION {
            return Err(Error::Version {
                what: "load program",
                found: f.version,
                expected: PROGRAM_VERSION,
            });
        }
        f.program.validate()?;
        Ok(f.program)
    }

    pub fn to_json(program: &LoadProgram) -> texnet::Result<String> {
        let f = ProgramFile {
            version: PROGRAM_VERSION,
            program: program.clone(),
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> texnet::Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Format {
            what: "run config",
            detail: e.to_string(),
        })?;
        if c.version != RUN_CONFIG_VERSION {
            return Err(Error::Version {
                what: "run config",
                found: c.version,
                expected: RUN_CONFIG_VERSION,
            });
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> texnet::Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn validate(&self) -> texnet::Result<()> {
        if !(1..=12).contains(&self.depth) {
            return Err(Error::Invalid(format!("depth {} must lie in 1..=12", self.depth)));
        }
        let per_axis = (self.texture_bins as f64).cbrt().round() as usize;
        if per_axis == 0 || per_axis.pow(3) != self.texture_bins {
            return Err(Error::Invalid(format!("texture_bins {} is not a perfect cube", self.texture_bins)));
        }
        if self.pole_grid == 0 || self.pole_grid > 4096 {
            return Err(Error::Invalid(format!("pole_grid {} out of range", self.pole_grid)));
        }
        self.dataset.validate()?;
        self.cp.validate()?;
        self.program.build()?;
        Ok(())
    }

    /// The run seed wins over seeds nested in sub-configs.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.seed = seed;
        self.train.seed = seed;
        self
    }
}
