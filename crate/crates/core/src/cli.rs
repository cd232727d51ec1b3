//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::geometry::Molecule;
use crate::io::checkpoint::{load_autoencoder, save_autoencoder, DiffusionCheckpoint};
use crate::io::config::RunConfig;
use crate::io::dataset::{export_xyz, generate_toy_dataset, load_dataset, save_dataset};
use crate::metrics::{aggregate, diversity, js_divergence_bond_lengths, score, HistogramSpec};
use crate::predictor::Predictor;
use crate::rng::Noise;
use crate::sampling::{PosteriorVariance, Sampler};
use crate::schedule::{Schedule, ScheduleConfig};
use crate::shape_autoencoder::fit_autoencoder;
use crate::training::{prepare_samples, DiffusionTrainer, Weighting};
use crate::verify;

#[derive(Debug, Parser)]
#[command(name = "shapediff", version, about = "Shape-conditioned 3D molecule diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic molecule dataset (one JSON object per line).
    ToyData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the shape autoencoder.
    PretrainShape {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the diffusion model on frozen shape embeddings.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        shape_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_weighting)]
        weighting: Option<Weighting>,
        /// Continue from a diffusion checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write the training log as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate molecules shaped like each condition molecule.
    Sample {
        #[arg(long)]
        condition: PathBuf,
        #[arg(long)]
        shape_ckpt: PathBuf,
        #[arg(long)]
        diff_ckpt: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        guidance: GuidanceArgs,
        /// Fixed atom count instead of drawing from the training distribution.
        #[arg(long)]
        atoms: Option<usize>,
        #[arg(long, value_parser = parse_variance)]
        variance: Option<PosteriorVariance>,
    },
    /// Score generated molecules against their conditions.
    Eval {
        #[arg(long)]
        condition: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reference set for the bond-length divergence (defaults to the conditions).
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Write the noise schedules as CSV.
    DumpSchedule {
        #[arg(long = "T", default_value_t = 1000)]
        t: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the oracle suite; exits 1 if any check fails.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the configured number of optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GuidanceArgs {
    /// Enable shape guidance.
    #[arg(long)]
    pub guide: bool,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub stop_step: Option<usize>,
    #[arg(long)]
    pub sigma_min: Option<f64>,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    #[arg(long)]
    pub neighbors: Option<usize>,
}

fn parse_weighting(s: &str) -> Result<Weighting, String> {
    match s {
        "snr" => Ok(Weighting::Snr),
        "uniform" => Ok(Weighting::Uniform),
        _ => Err("expected snr or uniform".into()),
    }
}

fn parse_variance(s: &str) -> Result<PosteriorVariance, String> {
    match s {
        "as_printed" => Ok(PosteriorVariance::AsPrinted),
        "beta_tilde" => Ok(PosteriorVariance::BetaTilde),
        _ => Err("expected as_printed or beta_tilde".into()),
    }
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or missing input (exit 2).
    Usage(String),
    /// A check or computation failed (exit 1).
    Failed(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Failed(e)
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Failed(e.into())
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} does not exist", path.display())))
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    if let Some(p) = path {
        require(p)?;
    }
    let cfg = RunConfig::load_or_default(path).map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_molecules(path: &Path) -> Result<Vec<Molecule>, CliError> {
    require(path)?;
    let mols = load_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    if mols.is_empty() {
        return Err(CliError::Usage(format!("{} contains no molecules", path.display())));
    }
    Ok(mols)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::ToyData { n, seed, out } => {
            let mols = generate_toy_dataset(n, seed)?;
            save_dataset(&out, &mols)?;
            eprintln!("wrote {} molecules to {}", mols.len(), out.display());
        }
        Command::PretrainShape { data, out, common } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = common.steps {
                cfg.shape.steps = s;
            }
            let mols = load_molecules(&data)?;
            let (ae, _) = fit_autoencoder(&mols, &cfg.shape, common.seed, |step, train, val, _| {
                eprintln!("step {step:>6}  train {train:>12.5}  val {val:>12.5}");
            })?;
            save_autoencoder(&out, &ae, common.seed)?;
        }
        Command::Train {
            data,
            shape_ckpt,
            out,
            common,
            weighting,
            resume,
            log,
        } => train(
            &data,
            &shape_ckpt,
            &out,
            &common,
            weighting,
            resume.as_deref(),
            log.as_deref(),
        )?,
        Command::Sample {
            condition,
            shape_ckpt,
            diff_ckpt,
            n,
            out,
            seed,
            config,
            guidance,
            atoms,
            variance,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mut g = cfg.guidance.clone();
            let guide = guidance.guide;
            g.gamma = guidance.gamma.unwrap_or(g.gamma);
            g.stop_step = guidance.stop_step.unwrap_or(g.stop_step);
            g.sigma_min = guidance.sigma_min.unwrap_or(g.sigma_min);
            g.sigma_max = guidance.sigma_max.unwrap_or(g.sigma_max);
            g.neighbors = guidance.neighbors.unwrap_or(g.neighbors);
            let conds = load_molecules(&condition)?;
            require(&shape_ckpt)?;
            require(&diff_ckpt)?;
            let ae = load_autoencoder(&shape_ckpt)?;
            let ck = DiffusionCheckpoint::load(&diff_ckpt)?;
            let schedule = Schedule::new(&ck.schedule)?;
            let sampler = Sampler {
                autoencoder: &ae,
                predictor: &ck.predictor,
                schedule: &schedule,
                atom_counts: &ck.atom_counts,
                variance: variance.unwrap_or(cfg.sampling.variance),
            };
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (c, cond) in conds.iter().enumerate() {
                for i in 0..n {
                    let noise = Noise::derived(seed, &[c as u64, i as u64]);
                    let gen = sampler.generate(cond, guide.then_some(&g), atoms, &noise)?;
                    let stem = out.join(format!("cond{c:03}_{i:04}"));
                    save_dataset(&stem.with_extension("jsonl"), std::slice::from_ref(&gen.molecule))?;
                    export_xyz(
                        &gen.molecule,
                        &stem.with_extension("xyz"),
                        &format!("condition {c} sample {i}"),
                    )?;
                }
                eprintln!("condition {c}: wrote {n} molecules");
            }
        }
        Command::Eval {
            condition,
            generated,
            out,
            reference,
        } => evaluate(&condition, &generated, &out, reference.as_deref())?,
        Command::DumpSchedule { t, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let schedule = Schedule::new(&ScheduleConfig {
                steps: t,
                ..cfg.schedule
            })?;
            let mut w = csv::Writer::from_path(&out).with_context(|| format!("writing {}", out.display()))?;
            w.write_record(["t", "beta_x", "beta_v", "alpha_bar_x", "alpha_bar_v"])
                .context("writing schedule")?;
            for (t, bx, bv, abx, abv) in schedule.rows() {
                w.serialize((t, bx, bv, abx, abv)).context("writing schedule")?;
            }
            w.flush().context("writing schedule")?;
        }
        Command::Verify { seed } => {
            let checks = verify::run_all(seed);
            let mut failed = 0;
            for c in &checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!("{tag} {} ({:.1}s): {}", c.name, c.seconds, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(CliError::Failed(anyhow::anyhow!("{failed} oracle check(s) failed")));
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainLogRow {
    step: usize,
    train_loss: f64,
    val_loss: f64,
    lr: f64,
}

fn train(
    data: &Path,
    shape_ckpt: &Path,
    out: &Path,
    common: &Common,
    weighting: Option<Weighting>,
    resume: Option<&Path>,
    log: Option<&Path>,
) -> Result<(), CliError> {
    let mut cfg = load_config(common.config.as_deref())?;
    let mols = load_molecules(data)?;
    require(shape_ckpt)?;
    let ae = load_autoencoder(shape_ckpt)?;
    let resumed = match resume {
        Some(p) => {
            require(p)?;
            Some(DiffusionCheckpoint::load(p)?)
        }
        None => None,
    };
    let (predictor, seed, state) = match resumed {
        Some(ck) => {
            cfg.train = ck.train;
            cfg.schedule = ck.schedule;
            (ck.predictor, ck.seed, Some(ck.state))
        }
        None => {
            cfg.predictor.shape_dim = ae.config.latent;
            (Predictor::new(cfg.predictor.clone(), common.seed)?, common.seed, None)
        }
    };
    if let Some(s) = common.steps {
        cfg.train.steps = s;
    }
    if let Some(w) = weighting {
        cfg.train.weighting = w;
    }
    if predictor.config.shape_dim != ae.config.latent {
        return Err(CliError::Usage(format!(
            "diffusion model expects {} shape rows but the autoencoder produces {}",
            predictor.config.shape_dim, ae.config.latent
        )));
    }
    let schedule = Schedule::new(&cfg.schedule)?;
    let samples = prepare_samples(&mols, &ae, seed)?;
    let mut trainer = DiffusionTrainer::new(predictor, &samples, &schedule, cfg.train.clone(), seed)?;
    if let Some(state) = state {
        trainer.state = state;
    }
    let mut writer = match log {
        Some(p) => Some(csv::Writer::from_path(p).with_context(|| format!("writing {}", p.display()))?),
        None => None,
    };
    let rows = trainer.run(|r| {
        eprintln!(
            "step {:>6}  train {:>12.5}  val {:>12.5}  lr {:.2e}",
            r.step, r.train_loss, r.val_loss, r.lr
        );
    })?;
    if let Some(w) = writer.as_mut() {
        for r in rows {
            w.serialize(TrainLogRow {
                step: r.step,
                train_loss: r.train_loss,
                val_loss: r.val_loss,
                lr: r.lr,
            })
            .context("writing training log")?;
        }
        w.flush().context("writing training log")?;
    }
    DiffusionCheckpoint {
        atom_counts: trainer.train_atom_counts(),
        predictor: trainer.predictor,
        schedule: cfg.schedule,
        train: cfg.train,
        seed,
        state: trainer.state,
    }
    .save(out)?;
    Ok(())
}

/// Condition index encoded in a sample file name (`cond012_0003.jsonl`).
fn condition_index(path: &Path) -> usize {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("cond"))
        .and_then(|s| s.split('_').next())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

#[derive(Serialize)]
struct MoleculeRow {
    file: String,
    condition: usize,
    atoms: usize,
    connected: bool,
    shape_similarity: f64,
    graph_similarity: f64,
}

#[derive(Serialize)]
struct SummaryRow {
    scope: String,
    molecules: usize,
    connected_fraction: f64,
    shape_avg: f64,
    shape_max: f64,
    shape_std: f64,
    graph_avg: f64,
    graph_max: f64,
    graph_std: f64,
    diversity: f64,
    js_bond_length: f64,
}

fn summarize(
    scope: String,
    rows: &[&MoleculeRow],
    mols: &[&Molecule],
    reference: &[Molecule],
) -> anyhow::Result<SummaryRow> {
    let shape: Vec<f64> = rows.iter().map(|r| r.shape_similarity).collect();
    let graph: Vec<f64> = rows.iter().map(|r| r.graph_similarity).collect();
    let s = aggregate(&shape)?;
    let g = aggregate(&graph)?;
    let owned: Vec<Molecule> = mols.iter().map(|m| (*m).clone()).collect();
    Ok(SummaryRow {
        scope,
        molecules: rows.len(),
        connected_fraction: rows.iter().filter(|r| r.connected).count() as f64 / rows.len() as f64,
        shape_avg: s.mean,
        shape_max: s.max,
        shape_std: s.std,
        graph_avg: g.mean,
        graph_max: g.max,
        graph_std: g.std,
        diversity: diversity(&owned).unwrap_or(f64::NAN),
        js_bond_length: js_divergence_bond_lengths(reference, &owned, HistogramSpec::default()).unwrap_or(f64::NAN),
    })
}

fn evaluate(condition: &Path, generated: &Path, out: &Path, reference: Option<&Path>) -> Result<(), CliError> {
    let conds = load_molecules(condition)?;
    let reference = match reference {
        Some(p) => load_molecules(p)?,
        None => conds.clone(),
    };
    require(generated)?;
    let mut files: Vec<PathBuf> = fs::read_dir(generated)
        .with_context(|| format!("listing {}", generated.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no .jsonl files in {}", generated.display())));
    }
    let mut rows = Vec::new();
    let mut mols = Vec::new();
    for f in &files {
        let c = condition_index(f);
        let cond = conds
            .get(c)
            .ok_or_else(|| anyhow::anyhow!("{} refers to condition {c}, which does not exist", f.display()))?;
        for m in load_dataset(f).with_context(|| format!("reading {}", f.display()))? {
            let sc = score(cond, &m);
            rows.push(MoleculeRow {
                file: f.file_name().unwrap().to_string_lossy().into_owned(),
                condition: c,
                atoms: m.len(),
                connected: sc.connected,
                shape_similarity: sc.shape_similarity,
                graph_similarity: sc.graph_similarity,
            });
            mols.push(m);
        }
    }
    let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    for r in &rows {
        w.serialize(r).context("writing evaluation")?;
    }
    w.flush().context("writing evaluation")?;

    let summary_path = out.with_file_name(format!(
        "{}_summary.csv",
        out.file_stem().and_then(|s| s.to_str()).unwrap_or("eval")
    ));
    let mut sw =
        csv::Writer::from_path(&summary_path).with_context(|| format!("writing {}", summary_path.display()))?;
    let mut by_cond: Vec<usize> = rows.iter().map(|r| r.condition).collect();
    by_cond.dedup();
    for c in by_cond {
        let (r, m): (Vec<&MoleculeRow>, Vec<&Molecule>) =
            rows.iter().zip(&mols).filter(|(r, _)| r.condition == c).unzip();
        sw.serialize(summarize(format!("condition {c}"), &r, &m, &reference)?)
            .context("writing summary")?;
    }
    let all: Vec<&MoleculeRow> = rows.iter().collect();
    let all_m: Vec<&Molecule> = mols.iter().collect();
    sw.serialize(summarize("all".into(), &all, &all_m, &reference)?)
        .context("writing summary")?;
    sw.flush().context("writing summary")?;
    Ok(())
}
