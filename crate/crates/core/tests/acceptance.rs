//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use shapediff::geometry::Molecule;
use shapediff::io::checkpoint::{save_autoencoder, DiffusionCheckpoint};
use shapediff::io::dataset::{generate_toy_dataset, save_dataset};
use shapediff::metrics::{connectivity, js_divergence_bond_lengths, shape_similarity, HistogramSpec};
use shapediff::predictor::{Predictor, PredictorConfig};
use shapediff::rng::Noise;
use shapediff::sampling::{Generated, GuidanceConfig, PosteriorVariance, Sampler};
use shapediff::schedule::{Schedule, ScheduleConfig};
use shapediff::shape_autoencoder::{fit_autoencoder, Autoencoder, AutoencoderConfig};
use shapediff::training::{
    prepare_samples, AtomCountHistogram, DiffusionTrainer, TrainConfig, TrainingSample, Weighting,
};
use shapediff::verify;

const ORACLE_SEED: u64 = 0;
const TOY_MOLECULES: usize = 500;
const TOY_SEED: u64 = 2024;
const TRAIN_STEPS: usize = 2000;
const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ABLATION_GENERATIONS: usize = 50;
const GUIDANCE_CONDITIONS: usize = 5;
const GUIDANCE_GENERATIONS: usize = 20;
const GAMMAS: [f64; 3] = [0.2, 0.4, 0.6];
const STOP_STEPS: [usize; 3] = [50, 100, 300];
/// Sampling variance for the trained-model experiments; the printed
/// `1 - abar_t` variance leaves toy-scale samples too noisy to form bonds.
const VARIANCE: PosteriorVariance = PosteriorVariance::BetaTilde;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn autoencoder_config() -> AutoencoderConfig {
    AutoencoderConfig {
        hidden: 32,
        latent: 8,
        k: 10,
        n_points: 64,
        n_queries: 128,
        steps: 200,
        ..Default::default()
    }
}

fn predictor_config() -> PredictorConfig {
    PredictorConfig {
        hidden: 32,
        layers: 4,
        heads: 4,
        shape_dim: 8,
        vn_hidden: 8,
        ..Default::default()
    }
}

struct Trained {
    predictor: Predictor,
    counts: AtomCountHistogram,
    train: TrainConfig,
    state: shapediff::training::TrainerState,
}

fn train(samples: &[TrainingSample], schedule: &Schedule, weighting: Weighting, seed: u64) -> Trained {
    let cfg = TrainConfig {
        steps: TRAIN_STEPS,
        weighting,
        ..Default::default()
    };
    let pred = Predictor::new(predictor_config(), seed).expect("predictor");
    let mut trainer = DiffusionTrainer::new(pred, samples, schedule, cfg.clone(), seed).expect("trainer");
    trainer.run(|_| {}).expect("training");
    Trained {
        counts: trainer.train_atom_counts(),
        state: trainer.state.clone(),
        predictor: trainer.predictor,
        train: cfg,
    }
}

fn sampler<'a>(ae: &'a Autoencoder, model: &'a Trained, schedule: &'a Schedule) -> Sampler<'a> {
    Sampler {
        autoencoder: ae,
        predictor: &model.predictor,
        schedule,
        atom_counts: &model.counts,
        variance: VARIANCE,
    }
}

fn oracle_outcomes() -> Vec<Outcome> {
    // (name, runtime limit in seconds)
    let meta: [(&str, Option<f64>); 6] = [
        ("categorical posterior oracle", Some(1.0)),
        ("gaussian posterior oracle", Some(30.0)),
        ("forward marginal consistency", None),
        ("equivariance suite", Some(60.0)),
        ("gradient contract", Some(300.0)),
        ("schedule checks", None),
    ];
    verify::run_all(ORACLE_SEED)
        .into_iter()
        .zip(meta)
        .enumerate()
        .map(|(i, (check, (name, limit)))| {
            let in_time = limit.is_none_or(|l| check.seconds < l);
            let limit_text = limit.map_or(String::new(), |l| format!(", limit {l:.0} s"));
            Outcome {
                id: i + 1,
                name,
                passed: check.passed && in_time,
                detail: format!("{} ({:.1} s{limit_text})", check.detail, check.seconds),
            }
        })
        .collect()
}

struct AblationRow {
    seed: u64,
    js_snr: f64,
    js_uniform: f64,
    conn_snr: f64,
    conn_uniform: f64,
}

fn ablation_metrics(
    ae: &Autoencoder,
    model: &Trained,
    schedule: &Schedule,
    reference: &[Molecule],
    conditions: &[Molecule],
    seed: u64,
) -> (f64, f64) {
    let s = sampler(ae, model, schedule);
    let generated: Vec<Molecule> = conditions
        .iter()
        .enumerate()
        .map(|(i, c)| {
            s.generate(c, None, None, &Noise::derived(seed, &[i as u64]))
                .expect("generation")
                .molecule
        })
        .collect();
    let js = js_divergence_bond_lengths(reference, &generated, HistogramSpec::default()).expect("histogram");
    let conn = generated.iter().filter(|m| connectivity(m)).count() as f64 / generated.len() as f64;
    (js, conn)
}

/// Guidance-gate tallies over every guided generation.
#[derive(Default)]
struct GateStats {
    runs: usize,
    early: usize,
    near_moved: usize,
    adjustments: usize,
}

impl GateStats {
    fn record(&mut self, cfg: &GuidanceConfig, gen: &Generated) {
        self.runs += 1;
        for step in &gen.trace {
            if step.t < cfg.stop_step {
                self.early += usize::from(!step.adjusted.is_empty() || !step.shifts.is_empty());
                continue;
            }
            self.adjustments += step.adjusted.len();
            for (i, (&d, &shift)) in step.distances.iter().zip(&step.shifts).enumerate() {
                if d <= cfg.gamma && (step.adjusted.contains(&i) || shift != 0.0) {
                    self.near_moved += 1;
                }
            }
        }
    }
}

fn guided_similarity(
    s: &Sampler,
    condition: &Molecule,
    c: usize,
    guidance: &GuidanceConfig,
    gate: &mut GateStats,
) -> f64 {
    let mut total = 0.0;
    for i in 0..GUIDANCE_GENERATIONS {
        let gen = s
            .generate(
                condition,
                Some(guidance),
                None,
                &Noise::derived(77, &[c as u64, i as u64]),
            )
            .expect("generation");
        total += shape_similarity(condition, &gen.molecule);
        gate.record(guidance, &gen);
    }
    total / GUIDANCE_GENERATIONS as f64
}

fn nonincreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .expect("output directory")
        .map(|e| {
            let e = e.expect("entry");
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).expect("file"),
            )
        })
        .collect();
    files.sort();
    files
}

fn cli_determinism(ae: &Autoencoder, model: &Trained, condition: &Molecule) -> (bool, String) {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    save_autoencoder(&root.join("ae.ckpt"), ae, 0).expect("save autoencoder");
    DiffusionCheckpoint {
        predictor: model.predictor.clone(),
        schedule: ScheduleConfig::default(),
        train: model.train.clone(),
        seed: 0,
        state: model.state.clone(),
        atom_counts: model.counts.clone(),
    }
    .save(&root.join("diff.ckpt"))
    .expect("save diffusion");
    save_dataset(&root.join("cond.jsonl"), std::slice::from_ref(condition)).expect("save condition");
    let run = |out: &str, seed: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_shapediff"))
            .current_dir(root)
            .args([
                "sample",
                "--condition",
                "cond.jsonl",
                "--shape-ckpt",
                "ae.ckpt",
                "--diff-ckpt",
                "diff.ckpt",
            ])
            .args(["--n", "3", "--seed", seed, "--guide", "--out", out])
            .output()
            .expect("binary runs");
        status.status.success()
    };
    if !(run("a", "5") && run("b", "5") && run("c", "6")) {
        return (false, "sample command failed".into());
    }
    let a = dir_bytes(&root.join("a"));
    let same = a == dir_bytes(&root.join("b"));
    let differs = a != dir_bytes(&root.join("c"));
    (
        same && differs && a.len() == 6,
        format!(
            "{} files; same seed identical: {same}; other seed differs: {differs}",
            a.len()
        ),
    )
}

fn run() -> Vec<Outcome> {
    let mut out = oracle_outcomes();
    for o in &out {
        report(o);
    }

    let start = Instant::now();
    let mols = generate_toy_dataset(TOY_MOLECULES, TOY_SEED).expect("toy data");
    let (ae, _) = fit_autoencoder(&mols, &autoencoder_config(), 0, |_, _, _, _| {}).expect("autoencoder");
    let samples = prepare_samples(&mols, &ae, 0).expect("samples");
    let schedule = Schedule::with_steps(1000).expect("schedule");
    let held_out = generate_toy_dataset(ABLATION_GENERATIONS, TOY_SEED + 1).expect("conditions");

    let mut rows = Vec::new();
    let mut reference_model = None;
    for &seed in &ABLATION_SEEDS {
        let snr = train(&samples, &schedule, Weighting::Snr, seed);
        let uniform = train(&samples, &schedule, Weighting::Uniform, seed);
        let (js_snr, conn_snr) = ablation_metrics(&ae, &snr, &schedule, &mols, &held_out, seed);
        let (js_uniform, conn_uniform) = ablation_metrics(&ae, &uniform, &schedule, &mols, &held_out, seed);
        println!(
            "  seed {seed}: bond-length JS snr {js_snr:.4} / uniform {js_uniform:.4}; connectivity snr {conn_snr:.2} / uniform {conn_uniform:.2}"
        );
        rows.push(AblationRow {
            seed,
            js_snr,
            js_uniform,
            conn_snr,
            conn_uniform,
        });
        if reference_model.is_none() {
            reference_model = Some(snr);
        }
    }
    let js_wins = rows.iter().filter(|r| r.js_snr <= r.js_uniform).count();
    let conn_wins = rows.iter().filter(|r| r.conn_snr >= r.conn_uniform).count();
    let seconds = start.elapsed().as_secs_f64();
    let seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    let o = Outcome {
        id: 7,
        name: "SNR-weight ablation",
        passed: js_wins >= 4 && conn_wins >= 4 && seconds < 7200.0,
        detail: format!(
            "seeds {seeds:?}: JS(snr) <= JS(uniform) on {js_wins}/5, connectivity(snr) >= uniform on {conn_wins}/5 ({seconds:.0} s, limit 7200 s)"
        ),
    };
    report(&o);
    out.push(o);

    let model = reference_model.expect("at least one seed");
    let start = Instant::now();
    let conditions = generate_toy_dataset(GUIDANCE_CONDITIONS, TOY_SEED + 2).expect("conditions");
    let s = sampler(&ae, &model, &schedule);
    let mut gate = GateStats::default();
    let mut gamma_ok = 0;
    let mut stop_ok = 0;
    for (c, cond) in conditions.iter().enumerate() {
        let mut at = |gamma: f64, stop_step: usize| {
            let g = GuidanceConfig {
                gamma,
                stop_step,
                ..Default::default()
            };
            guided_similarity(&s, cond, c, &g, &mut gate)
        };
        let by_gamma: Vec<f64> = GAMMAS.iter().map(|&g| at(g, 300)).collect();
        let mut by_stop: Vec<f64> = STOP_STEPS[..2].iter().map(|&st| at(0.2, st)).collect();
        by_stop.push(by_gamma[0]);
        println!("  condition {c}: similarity by gamma {by_gamma:.4?}, by stop step {by_stop:.4?}");
        gamma_ok += usize::from(nonincreasing(&by_gamma));
        stop_ok += usize::from(nonincreasing(&by_stop));
    }
    let seconds = start.elapsed().as_secs_f64();
    let o = Outcome {
        id: 8,
        name: "shape-guidance trend",
        passed: gamma_ok >= 4 && stop_ok >= 4 && seconds < 1800.0,
        detail: format!(
            "nonincreasing in gamma {GAMMAS:?} on {gamma_ok}/5, in stop step {STOP_STEPS:?} on {stop_ok}/5 ({seconds:.0} s, limit 1800 s)"
        ),
    };
    report(&o);
    out.push(o);

    let o = Outcome {
        id: 9,
        name: "guidance gate",
        passed: gate.early == 0 && gate.near_moved == 0 && gate.adjustments > 0,
        detail: format!(
            "{} guided runs: {} steps below the stop step with adjustments, {} atoms within gamma moved, {} adjustments beyond gamma",
            gate.runs, gate.early, gate.near_moved, gate.adjustments
        ),
    };
    report(&o);
    out.push(o);

    let (passed, detail) = cli_determinism(&ae, &model, &conditions[0]);
    let o = Outcome {
        id: 10,
        name: "end-to-end determinism",
        passed,
        detail,
    };
    report(&o);
    out.push(o);
    out
}

fn report(o: &Outcome) {
    let tag = if o.passed { "PASS" } else { "FAIL" };
    println!("criterion {:>2} {tag} {}: {}", o.id, o.name, o.detail);
}

fn main() -> ExitCode {
    // Skip when the test run is filtered to other targets.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }
    let outcomes = run();
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
