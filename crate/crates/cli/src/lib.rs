//! Command-line workflow: RVE generation, dataset assembly, GNN training,
//! inference, online prediction and metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod files;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use texnet::cponline::{export_analogous_unit_cell, run_program, CpParams, Ensemble, History};
use texnet::dataset::{
    ablate_depths, ablation_csv, build_dataset, derive_seed, depth_data, generate_rves, train_val_samples, Dataset, ParamsFile,
};
use texnet::gnn::{infer_params, train_end_to_end, Checkpoint, GnnModel, CHECKPOINT_VERSION};
use texnet::metrics::{pole_figure, pole_figure_csv, relative_errors, texture_index, MetricsReport, PoleFamily};
use texnet::rvegen::{assign_texture, generate_rve, TextureClass};
use texnet::tacs::build_histogram;

use config::{ProgramFile, RunConfig};
use files::{read_rve, read_text, read_texture, with_header, write, write_rve, RveFormat, Table};

#[derive(Debug, Parser)]
#[command(name = "texnet", version, about = "Texture-adaptive deep material network workflow")]
pub struct Cli {
    /// Run-description TOML file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Representative volume elements.
    Rve {
        #[command(subcommand)]
        action: RveCommand,
    },
    /// Training data.
    Dataset {
        #[command(subcommand)]
        action: DatasetCommand,
    },
    /// Offline training.
    Train {
        #[command(subcommand)]
        action: TrainCommand,
    },
    /// Depth studies.
    Ablate {
        #[command(subcommand)]
        action: AblateCommand,
    },
    /// Network parameters for an RVE from a trained checkpoint.
    Infer(InferArgs),
    /// Online crystal-plasticity prediction with a parameterized network.
    Predict(PredictArgs),
    /// Voxel cells mirroring a network.
    Unitcell {
        #[command(subcommand)]
        action: UnitcellCommand,
    },
    /// Compare predictions with reference results.
    Metrics(MetricsArgs),
    /// Print the effective run configuration as TOML.
    Config,
}

#[derive(Debug, Subcommand)]
pub enum RveCommand {
    /// Generate a textured Voronoi RVE.
    Gen(RveGenArgs),
}

#[derive(Debug, Args)]
pub struct RveGenArgs {
    /// Texture class: S1, S2, W1 or W2.
    #[arg(long, value_parser = parse_class)]
    pub class: TextureClass,
    /// Grid size as `nx,ny,nz`.
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<[usize; 3]>,
    #[arg(long)]
    pub grains: Option<usize>,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = RveFormat::Binary)]
    pub format: RveFormat,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Generate RVEs, FFT labels, TACS samples and graphs.
    Build(DatasetBuildArgs),
}

#[derive(Debug, Args)]
pub struct DatasetBuildArgs {
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub rves_per_class: Option<usize>,
    #[arg(long)]
    pub triples: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub depths: Option<Vec<usize>>,
    /// Grid size as `nx,ny,nz`.
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<[usize; 3]>,
    #[arg(long)]
    pub grains: Option<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_class)]
    pub classes: Option<Vec<TextureClass>>,
    /// Also write every generated RVE into this directory.
    #[arg(long)]
    pub rve_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    /// End-to-end GNN training through the network.
    Gnn(TrainGnnArgs),
}

#[derive(Debug, Args)]
pub struct TrainGnnArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Checkpoint JSON.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Loss-curve CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AblateCommand {
    /// Validation loss against network depth.
    N(AblateArgs),
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub depths: Vec<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Table CSV; printed to stdout when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub rve: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CouplingArg {
    Network,
    Taylor,
    Sachs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub params: PathBuf,
    /// Versioned load-program JSON; the config's program is used otherwise.
    #[arg(long)]
    pub program: Option<PathBuf>,
    /// TOML or JSON file with crystal-plasticity constants.
    #[arg(long)]
    pub cp: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = CouplingArg::Network)]
    pub coupling: CouplingArg,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Reference stress history for error metrics.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Reference texture (RVE or snapshot CSV) for the texture index.
    #[arg(long)]
    pub texture_reference: Option<PathBuf>,
    #[arg(long, default_value = "P11")]
    pub component: String,
}

#[derive(Debug, Subcommand)]
pub enum UnitcellCommand {
    /// Voxelize a network into an RVE with the same laminate hierarchy.
    Export(UnitcellArgs),
}

#[derive(Debug, Args)]
pub struct UnitcellArgs {
    #[arg(long)]
    pub params: PathBuf,
    /// Grid size as `nx,ny,nz`.
    #[arg(long, value_parser = parse_dims, default_value = "16,16,16")]
    pub dims: [usize; 3],
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = RveFormat::Binary)]
    pub format: RveFormat,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Reference stress history CSV.
    #[arg(long, requires = "prediction")]
    pub reference: Option<PathBuf>,
    #[arg(long, requires = "reference")]
    pub prediction: Option<PathBuf>,
    #[arg(long, default_value = "P11")]
    pub component: String,
    /// Reference texture: RVE file or snapshot CSV.
    #[arg(long, requires = "texture_prediction")]
    pub texture_reference: Option<PathBuf>,
    #[arg(long, requires = "texture_reference")]
    pub texture_prediction: Option<PathBuf>,
    /// Report JSON; printed to stdout when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

fn parse_class(s: &str) -> Result<TextureClass, String> {
    TextureClass::from_short_name(s).ok_or_else(|| format!("unknown texture class {s:?} (expected S1, S2, W1 or W2)"))
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| format!("bad grid size {t:?}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("grid needs three sizes, got {s:?}"))
}

/// Config file (if any) with the seed override applied.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::from_toml(&read_text(p)?).with_context(|| format!("in {}", p.display()))?,
        None => RunConfig::default(),
    };
    let seed = seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Rve {
            action: RveCommand::Gen(a),
        } => rve_gen(&cfg, a),
        Command::Dataset {
            action: DatasetCommand::Build(a),
        } => dataset_build(cfg, a),
        Command::Train {
            action: TrainCommand::Gnn(a),
        } => train_gnn(cfg, a),
        Command::Ablate {
            action: AblateCommand::N(a),
        } => ablate(cfg, a),
        Command::Infer(a) => infer(&cfg, a),
        Command::Predict(a) => predict(&cfg, a),
        Command::Unitcell {
            action: UnitcellCommand::Export(a),
        } => unitcell(a),
        Command::Metrics(a) => metrics(&cfg, a),
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn rve_gen(cfg: &RunConfig, a: RveGenArgs) -> Result<()> {
    let dims = a.dims.unwrap_or(cfg.dataset.dims);
    let grains = a.grains.unwrap_or(cfg.dataset.grains);
    let rve = generate_rve(grains, dims, cfg.seed)?;
    let rve = assign_texture(&rve, &a.class.spec(), derive_seed(cfg.seed, 1))?;
    write_rve(&a.out, &rve, a.format)?;
    println!(
        "seed {}: {} RVE, {} grains on {:?} -> {}",
        cfg.seed,
        a.class.short_name(),
        rve.grain_count(),
        dims,
        a.out.display()
    );
    Ok(())
}

fn dataset_build(mut cfg: RunConfig, a: DatasetBuildArgs) -> Result<()> {
    let d = &mut cfg.dataset;
    if let Some(v) = a.rves_per_class {
        d.rves_per_class = v;
    }
    if let Some(v) = a.triples {
        d.triples_per_rve = v;
    }
    if let Some(v) = a.depths {
        d.depths = v;
    }
    if let Some(v) = a.dims {
        d.dims = v;
    }
    if let Some(v) = a.grains {
        d.grains = v;
    }
    if let Some(v) = a.classes {
        d.classes = v;
    }
    d.validate()?;
    let t = Instant::now();
    let rves = generate_rves(d)?;
    let ds = build_dataset(d, &rves)?;
    write(&a.out, ds.to_json()?)?;
    if let Some(dir) = &a.rve_dir {
        for (entry, (_, rve)) in ds.entries.iter().zip(&rves) {
            write_rve(&dir.join(format!("{}.rve", entry.name)), rve, RveFormat::Binary)?;
        }
    }
    println!(
        "seed {}: {} RVEs x {} labels, depths {:?}, built in {:.1} s -> {}",
        cfg.seed,
        ds.entries.len(),
        d.triples_per_rve,
        d.depths,
        t.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_json(&read_text(path)?).with_context(|| format!("in {}", path.display()))
}

fn train_gnn(mut cfg: RunConfig, a: TrainGnnArgs) -> Result<()> {
    let depth = a.depth.unwrap_or(cfg.depth);
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.optimizer.lr = v;
    }
    if let Some(v) = a.patience {
        cfg.train.patience = v;
    }
    let ds = load_dataset(&a.dataset)?;
    let (train, val) = train_val_samples(&ds, depth, cfg.seed)?;
    let t = Instant::now();
    let model0 = GnnModel::new(depth, derive_seed(cfg.seed, 7))?;
    let out = train_end_to_end(&model0, &train, &val, &cfg.train)?;
    let secs = t.elapsed().as_secs_f64();
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        seed: cfg.seed,
        model: out.model,
        best_epoch: out.best_epoch,
        best_val: out.best_val,
        history: out.history,
    };
    write(&a.out, ckpt.to_json()?)?;
    if let Some(path) = &a.curve {
        let mut body = String::from("epoch,train,val\n");
        for e in &ckpt.history {
            body.push_str(&format!("{},{:e},{:e}\n", e.epoch, e.train, e.val));
        }
        write(path, with_header(cfg.seed, &body))?;
    }
    let last = ckpt.history.last().expect("history holds the initial epoch");
    if let Some(path) = &a.metrics {
        let mut report = MetricsReport::new(cfg.seed);
        report.losses = vec![
            ("final_train".into(), last.train),
            ("final_val".into(), last.val),
            ("best_val".into(), ckpt.best_val),
        ];
        report.runtimes.push(("train".into(), secs));
        write(path, report.to_json()?)?;
    }
    println!(
        "seed {}: N={depth}, {} train / {} val graphs, {} epochs in {secs:.1} s; final train {:.4e}, best val {:.4e} at epoch {} -> {}",
        cfg.seed,
        train.len(),
        val.len(),
        last.epoch,
        last.train,
        ckpt.best_val,
        ckpt.best_epoch,
        a.out.display()
    );
    Ok(())
}

fn ablate(mut cfg: RunConfig, a: AblateArgs) -> Result<()> {
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    let ds = load_dataset(&a.dataset)?;
    let rows = ablate_depths(&ds, &a.depths, &cfg.train)?;
    let table = with_header(cfg.seed, &ablation_csv(&rows));
    match &a.out {
        Some(p) => {
            write(p, &table)?;
            for r in &rows {
                println!("N={}: best val {:.4e} at epoch {}", r.depth, r.best_val, r.best_epoch);
            }
        }
        None => print!("{table}"),
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&read_text(path)?).with_context(|| format!("in {}", path.display()))
}

fn load_params(path: &Path) -> Result<ParamsFile> {
    ParamsFile::from_json(&read_text(path)?).with_context(|| format!("in {}", path.display()))
}

fn infer(cfg: &RunConfig, a: InferArgs) -> Result<()> {
    let rve = read_rve(&a.rve)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let depth = ckpt.model.depth;
    let data = depth_data(&rve, depth, &cfg.dataset.tacs)?;
    let params = infer_params(&ckpt.model, &data.graph, &data.orientations)?;
    write(&a.out, ParamsFile::new(cfg.seed, params).to_json()?)?;
    println!(
        "seed {}: N={depth} parameters for {} grains (sampling deviation {:.3e}) -> {}",
        cfg.seed,
        rve.grain_count(),
        data.deviation,
        a.out.display()
    );
    Ok(())
}

fn load_cp(path: &Path) -> Result<CpParams> {
    let text = read_text(path)?;
    let cp: CpParams = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("in {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("in {}", path.display()))?
    };
    cp.validate()?;
    Ok(cp)
}

fn texture_metric(cfg: &RunConfig, reference: (Vec<texnet::rotlab::Quat>, Vec<f64>), prediction: (Vec<texnet::rotlab::Quat>, Vec<f64>)) -> Result<f64> {
    let r = build_histogram(&reference.0, &reference.1, cfg.texture_bins)?;
    let p = build_histogram(&prediction.0, &prediction.1, cfg.texture_bins)?;
    Ok(texture_index(&p, &r)?)
}

fn history_column(h: &History, name: &str) -> Result<Vec<f64>> {
    Ok(Table::parse(&h.to_csv(), "history")?.column(name)?)
}

fn predict(cfg: &RunConfig, a: PredictArgs) -> Result<()> {
    let pf = load_params(&a.params)?;
    let program = match &a.program {
        Some(p) => ProgramFile::from_json(&read_text(p)?).with_context(|| format!("in {}", p.display()))?,
        None => cfg.program.build()?,
    };
    let cp = match &a.cp {
        Some(p) => load_cp(p)?,
        None => cfg.cp.clone(),
    };
    let params = &pf.params;
    let ens = match a.coupling {
        CouplingArg::Network => Ensemble::network(params, &cp)?,
        CouplingArg::Taylor => Ensemble::taylor(&params.leaf_quats(), &params.volume_fractions(), &cp)?,
        CouplingArg::Sachs => Ensemble::sachs(&params.leaf_quats(), &params.volume_fractions(), &cp)?,
    };
    let t = Instant::now();
    let history = run_program(&ens, &program)?;
    let secs = t.elapsed().as_secs_f64();

    let dir = &a.out_dir;
    write(&dir.join("history.csv"), with_header(cfg.seed, &history.to_csv()))?;
    write(&dir.join("snapshots.csv"), with_header(cfg.seed, &history.snapshots_csv()))?;
    let last = history.snapshots.last().expect("final snapshot is always recorded");
    for (family, name) in [(PoleFamily::Cube, "pole_100.csv"), (PoleFamily::Octahedral, "pole_111.csv")] {
        let pf = pole_figure(&last.orientations, &last.fractions, family, cfg.pole_grid)?;
        write(&dir.join(name), with_header(cfg.seed, &pole_figure_csv(&pf, cfg.pole_grid)))?;
    }

    let mut report = MetricsReport::new(cfg.seed);
    report.runtimes.push(("predict".into(), secs));
    if let Some(path) = &a.reference {
        let reference = Table::parse(&read_text(path)?, "history")?.column(&a.component)?;
        let (mean, max) = relative_errors(&reference, &history_column(&history, &a.component)?)?;
        report.mean_relative_error = Some(mean);
        report.max_relative_error = Some(max);
    }
    if let Some(path) = &a.texture_reference {
        let predicted = (last.orientations.clone(), last.fractions.clone());
        report.texture_index = Some(texture_metric(cfg, read_texture(path)?, predicted)?);
    }
    report.validate()?;
    write(&dir.join("metrics.json"), report.to_json()?)?;
    println!(
        "seed {}: {} steps in {secs:.2} s, peak |P11| {:.2} MPa, max Hill-Mandel residual {:.2e}, max halvings {} -> {}",
        cfg.seed,
        history.rows.len() - 1,
        history.peak_stress(0, 0),
        history.max_hill_mandel,
        history.max_halvings,
        dir.display()
    );
    Ok(())
}

fn unitcell(a: UnitcellArgs) -> Result<()> {
    let pf = load_params(&a.params)?;
    let mut cell = export_analogous_unit_cell(&pf.params, a.dims)?;
    cell.rve.seed = pf.seed;
    write_rve(&a.out, &cell.rve, a.format)?;
    let fractions = pf.params.volume_fractions();
    let got = cell.rve.grain_fractions();
    let worst = cell
        .leaf_of_grain
        .iter()
        .enumerate()
        .map(|(g, &l)| (got[g] - fractions[l]).abs())
        .fold(0.0, f64::max);
    println!(
        "seed {}: {} of {} leaves voxelized on {:?}, max volume-fraction error {worst:.3e} -> {}",
        pf.seed,
        cell.leaf_of_grain.len(),
        fractions.len(),
        cell.rve.dims,
        a.out.display()
    );
    Ok(())
}

fn metrics(cfg: &RunConfig, a: MetricsArgs) -> Result<()> {
    if a.reference.is_none() && a.texture_reference.is_none() {
        bail!(texnet::Error::Invalid("give --reference/--prediction, --texture-reference/--texture-prediction, or both".into()));
    }
    let mut report = MetricsReport::new(cfg.seed);
    if let (Some(r), Some(p)) = (&a.reference, &a.prediction) {
        let reference = Table::parse(&read_text(r)?, "history")?.column(&a.component)?;
        let prediction = Table::parse(&read_text(p)?, "history")?.column(&a.component)?;
        let (mean, max) = relative_errors(&reference, &prediction)?;
        report.mean_relative_error = Some(mean);
        report.max_relative_error = Some(max);
    }
    if let (Some(r), Some(p)) = (&a.texture_reference, &a.texture_prediction) {
        report.texture_index = Some(texture_metric(cfg, read_texture(r)?, read_texture(p)?)?);
    }
    report.validate()?;
    let json = report.to_json()?;
    match &a.out {
        Some(p) => write(p, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

/// 0 on success, 3 for numerical failures, 2 for invalid input or files,
/// 1 for I/O and anything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<texnet::Error>() {
            return match e {
                e if e.is_numerical() => 3,
                texnet::Error::Io(_) => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() || cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
    }
    1
}
