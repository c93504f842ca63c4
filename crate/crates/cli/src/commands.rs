use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dalip_core::bdc::bdc_forward;
use dalip_core::mbdc::{mbdc_forward, MbdcParams};
use dalip_core::mixlaw::{fit, read_observations, solve_optimal_ratio, Law, OptimalRatio};
use dalip_core::numcore::{finite_diff_check, read_blob, write_blob, GradCheckOptions, Tensor};
use dalip_core::rng::SeededRng;
use dalip_core::synthdata::{generate, Dataset};
use dalip_core::twintower::{batch_loss, evaluate, train, TowerParams};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{report, CliError, Command};

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    data_seed: u64,
    config: &'a RunConfig,
    outputs: Vec<String>,
    wall_clock_secs: f64,
}

/// Files written by one subcommand, relative to the output directory.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.path(name);
        write_json(&path, value)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text + "\n").map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub(crate) fn dispatch(command: &Command, cfg: &RunConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let mut out = Outputs::new(&cfg.output.dir)?;
    let result = match command {
        Command::GenData => gen_data(cfg, &mut out),
        Command::Train { data } => train_cmd(cfg, data.as_deref(), &mut out),
        Command::Eval { checkpoint, data } => eval_cmd(cfg, checkpoint, data.as_deref(), &mut out),
        Command::Gradcheck { tokens, pairs, step, tol } => gradcheck(cfg, *tokens, *pairs, *step, *tol, &mut out),
        Command::Bdc { input, eps } => bdc(input, *eps, &mut out),
        Command::Mbdc { input, checkpoint } => mbdc(cfg, input, checkpoint.as_deref(), &mut out),
        Command::FitMixlaw { input } => fit_mixlaw(cfg, input, &mut out),
        Command::SolveMix { fit1, fit2 } => solve_mix(cfg, fit1, fit2, &mut out),
        Command::Report { inputs } => report_cmd(cfg, inputs, &mut out),
    };
    // The manifest is written even when the command fails part way.
    let manifest = RunManifest {
        command: command.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.train.seed,
        data_seed: cfg.data.seed,
        config: cfg,
        outputs: out.written.clone(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&out.dir.join("run.json"), &manifest)?;
    result
}

fn dataset(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset, CliError> {
    let ds = match dir {
        Some(d) => Dataset::load(d)?,
        None => generate(&cfg.data)?,
    };
    if ds.spec.raw_dim != cfg.model.raw_dim {
        return Err(CliError::Config(format!(
            "model.raw_dim: {} does not match the dataset's raw_dim {}",
            cfg.model.raw_dim, ds.spec.raw_dim
        )));
    }
    Ok(ds)
}

fn gen_data(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let ds = generate(&cfg.data)?;
    let c = &ds.calibration;
    eprintln!(
        "generated {} train / {} test pairs; chance {:.3}, mean classifier {:.3}, qda {:.3}",
        ds.train.len(),
        ds.test.len(),
        c.chance,
        c.mean_classifier_accuracy,
        c.qda_accuracy
    );
    let dir = out.path("data");
    ds.save(&dir)?;
    Ok(())
}

fn train_cmd(cfg: &RunConfig, data: Option<&Path>, out: &mut Outputs) -> Result<(), CliError> {
    let ds = dataset(cfg, data)?;
    let tc = cfg.train();
    let init = TowerParams::init(&cfg.model, tc.objective.log_tau, tc.seed)?;
    let (params, log) = train(&ds.train, Some(&ds.test), init, &tc)?;
    if let (Some(first), Some(last)) = (log.epochs.first(), log.epochs.last()) {
        eprintln!("mean loss: epoch 1 {:.4}, epoch {} {:.4}", first.mean_loss, last.epoch, last.mean_loss);
    }
    params.save(&out.path("checkpoint"))?;
    log.write(&out.dir)?;
    out.written.push("metrics_steps.csv".into());
    out.written.push("metrics_epochs.csv".into());
    let metrics = evaluate(&params, &ds.test, &tc.objective, tc.matching)?;
    eprintln!(
        "held-out top-1: combined {:.4}, first-order {:.4}, second-order {:.4}",
        metrics.top1, metrics.top1_first, metrics.top1_second
    );
    out.json("eval.json", &metrics)
}

fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>, out: &mut Outputs) -> Result<(), CliError> {
    let params = TowerParams::load(checkpoint)?;
    let cfg = RunConfig {
        model: params.config.clone(),
        ..cfg.clone()
    };
    let ds = dataset(&cfg, data)?;
    let objective = cfg.objective();
    let metrics = evaluate(&params, &ds.test, &objective, cfg.train.matching)?;
    // Train-split accuracy is informational only; it may fall below test.
    if !ds.train.is_empty() {
        let on_train = evaluate(&params, &ds.train, &objective, cfg.train.matching)?;
        eprintln!("train top-1 {:.4}, test top-1 {:.4}", on_train.top1, metrics.top1);
    }
    out.json("eval.json", &metrics)
}

fn gradcheck(cfg: &RunConfig, tokens: usize, pairs: usize, step: f64, tol: f64, out: &mut Outputs) -> Result<(), CliError> {
    if tokens == 0 || pairs < 2 {
        return Err(CliError::Config(format!("need tokens >= 1 and pairs >= 2, got {tokens} and {pairs}")));
    }
    let objective = cfg.objective();
    let params = TowerParams::init(&cfg.model, objective.log_tau, cfg.train.seed)?;
    let mut rng = SeededRng::stream(cfg.train.seed, 30);
    let raw = cfg.model.raw_dim;
    let image: Vec<Tensor> = (0..pairs).map(|_| rng.normal_tensor(tokens, raw, 1.0)).collect();
    let text: Vec<Tensor> = (0..pairs).map(|_| rng.normal_tensor(tokens, raw, 1.0)).collect();
    let img: Vec<&Tensor> = image.iter().collect();
    let txt: Vec<&Tensor> = text.iter().collect();
    let kind = cfg.train.kind;
    let report = finite_diff_check(
        |tape, ids| batch_loss(tape, &params, ids, &img, &txt, &objective, kind).map(|(root, _, _)| root),
        &params.named_tensors(),
        GradCheckOptions { step, tol },
    )?;
    for p in &report.params {
        eprintln!("{:<20} entries {:>5}  max rel error {:.3e}", p.name, p.entries, p.max_rel_error);
    }
    eprintln!("max relative error {:.3e} (tolerance {tol:e})", report.max_rel_error);
    out.json("gradcheck.json", &report)?;
    if !report.passed {
        return Err(CliError::GradCheck(format!(
            "max relative error {:e} exceeds {tol:e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

fn bdc(input: &Path, eps: f64, out: &mut Outputs) -> Result<(), CliError> {
    let x = read_blob(input)?;
    let m = bdc_forward(&x, eps)?;
    write_blob(&out.path("bdc.blob"), &m.values)?;
    Ok(())
}

fn mbdc(cfg: &RunConfig, input: &Path, checkpoint: Option<&Path>, out: &mut Outputs) -> Result<(), CliError> {
    let x = read_blob(input)?;
    let params = match checkpoint {
        Some(dir) => MbdcParams::load(dir)?,
        None => MbdcParams::init(cfg.model.heads, x.cols(), cfg.model.d_tilde, cfg.model.hidden, cfg.train.seed)?,
    };
    let z = mbdc_forward(&x, &params)?;
    write_blob(&out.path("mbdc.blob"), &z)?;
    Ok(())
}

#[derive(Serialize)]
struct MixlawReport {
    domains: Vec<dalip_core::mixlaw::DomainFit>,
    weights: [f64; 2],
    #[serde(flatten)]
    optimum: OptimalRatio,
}

fn fit_mixlaw(cfg: &RunConfig, input: &Path, out: &mut Outputs) -> Result<(), CliError> {
    let obs = read_observations(input)?;
    let fitted = fit(&obs, &cfg.fit_options(), cfg.mixlaw.primary.as_deref())?;
    let [w1, w2] = cfg.mixlaw.weights;
    let optimum = solve_optimal_ratio(&fitted.domains[0].law(), &fitted.domains[1].law(), (w1, w2))?;
    for d in &fitted.domains {
        eprintln!(
            "{}: alpha {:.4} beta {:.4} gamma {:.4} rss {:.3e}",
            d.domain, d.alpha, d.beta, d.gamma, d.rss
        );
    }
    eprintln!("r_star {:.6} (boundary: {})", optimum.r_star, optimum.boundary_flag);
    out.json(
        "mixlaw.json",
        &MixlawReport {
            domains: fitted.domains,
            weights: cfg.mixlaw.weights,
            optimum,
        },
    )
}

fn parse_law(flag: &str, raw: &str) -> Result<Law, CliError> {
    let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
    let bad = || CliError::Config(format!("--{flag}: expected \"alpha,beta,gamma\", got {raw:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut v = [0.0; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p.parse::<f64>().map_err(|_| bad())?;
        if !slot.is_finite() {
            return Err(bad());
        }
    }
    Ok(Law::new(v[0], v[1], v[2]))
}

#[derive(Serialize)]
struct SolveReport {
    law1: Law,
    law2: Law,
    weights: [f64; 2],
    #[serde(flatten)]
    optimum: OptimalRatio,
}

fn solve_mix(cfg: &RunConfig, fit1: &str, fit2: &str, out: &mut Outputs) -> Result<(), CliError> {
    let law1 = parse_law("fit1", fit1)?;
    let law2 = parse_law("fit2", fit2)?;
    let [w1, w2] = cfg.mixlaw.weights;
    let optimum = solve_optimal_ratio(&law1, &law2, (w1, w2))?;
    println!("r_star = {}", optimum.r_star);
    eprintln!(
        "objective {:.6} at r_star; boundary: {}",
        optimum.objective_at_r_star, optimum.boundary_flag
    );
    out.json(
        "solve.json",
        &SolveReport {
            law1,
            law2,
            weights: cfg.mixlaw.weights,
            optimum,
        },
    )
}

fn report_cmd(cfg: &RunConfig, inputs: &[PathBuf], out: &mut Outputs) -> Result<(), CliError> {
    let runs = inputs
        .iter()
        .map(|p| report::read_run(p))
        .collect::<Result<Vec<_>, _>>()?;
    let built = report::build(&runs, &cfg.fit_options(), cfg.mixlaw.primary.as_deref());
    for (name, svg) in &built.charts {
        let path = out.path(name);
        fs::write(&path, svg).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    }
    for warning in &built.warnings {
        eprintln!("warning: {warning}");
    }
    out.json("summary.json", &built.summary)
}
