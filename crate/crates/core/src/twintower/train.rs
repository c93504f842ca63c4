//! Training loop, held-out evaluation and the λ sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::model::{embed, TowerParams};
use super::optim::{Adam, AdamConfig, LrSchedule};
use crate::error::{Error, Result};
use crate::numcore::{NodeId, Tape, Tensor};
use crate::objective::{dalip_loss_node, infonce_node, retrieval_topk, DalipObjectiveConfig, RetrievalConfig};
use crate::rng::SeededRng;
use crate::synthdata::Split;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    #[default]
    Dalip,
    /// First-order InfoNCE only; the second-order branch is not built.
    Infonce,
}

/// What counts as a correct retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Matching {
    /// Any text of the query's class.
    #[default]
    Class,
    /// Only the paired text.
    Instance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub objective: DalipObjectiveConfig,
    pub kind: ObjectiveKind,
    pub learn_tau: bool,
    /// Lower clamp on the learned temperature.
    pub min_tau: f64,
    pub matching: Matching,
    /// Evaluate on the test split after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            base_lr: 3e-3,
            min_lr: 3e-5,
            warmup_steps: 50,
            adam: AdamConfig::default(),
            seed: 0,
            objective: DalipObjectiveConfig::default(),
            kind: ObjectiveKind::Dalip,
            learn_tau: true,
            min_tau: 0.01,
            matching: Matching::Class,
            eval_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2 so every pair has a negative, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.min_tau > 0.0) {
            return Err(Error::Config("min_tau must be > 0".into()));
        }
        self.objective.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_first: f64,
    pub loss_second: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub metrics: Option<EvalMetrics>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub const STEP_HEADER: &str = "step,epoch,lr,loss_total,loss_first,loss_second,tau";
pub const EPOCH_HEADER: &str = "epoch,mean_loss,top1,top5,top1_first,top1_second";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsLog {
    pub fn steps_csv(&self) -> String {
        let mut out = format!("{STEP_HEADER}\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.step, s.epoch, s.lr, s.loss_total, s.loss_first, s.loss_second, s.tau
            );
        }
        out
    }

    /// Per-epoch rows; wall-clock time is deliberately left out.
    pub fn epochs_csv(&self) -> String {
        let mut out = format!("{EPOCH_HEADER}\n");
        for e in &self.epochs {
            let m = e.metrics.as_ref();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch,
                e.mean_loss,
                opt(m.map(|m| m.top1)),
                opt(m.map(|m| m.top5)),
                opt(m.map(|m| m.top1_first)),
                opt(m.map(|m| m.top1_second)),
            );
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [("metrics_steps.csv", self.steps_csv()), ("metrics_epochs.csv", self.epochs_csv())] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n: usize,
    pub top1: f64,
    pub top5: f64,
    pub top1_first: f64,
    pub top5_first: f64,
    pub top1_second: f64,
    pub top5_second: f64,
}

/// Retrieval accuracy on `split` with combined, first-only and second-only
/// similarities. Combined uses the objective's λ weights.
pub fn evaluate(params: &TowerParams, split: &Split, objective: &DalipObjectiveConfig, matching: Matching) -> Result<EvalMetrics> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let batch = embed(params, &split.image, &split.text, 64)?;
    let n = split.len();
    let labels = match matching {
        Matching::Class => Some(split.labels.as_slice()),
        Matching::Instance => None,
    };
    let top = |cfg: RetrievalConfig| retrieval_topk(&batch, &cfg, labels);
    let k5 = n.min(5);
    let combined = |k| RetrievalConfig::combined(k, objective);
    let second = |k| RetrievalConfig::second_only(k, objective.normalize_second_order);
    Ok(EvalMetrics {
        n,
        top1: top(combined(1))?,
        top5: top(combined(k5))?,
        top1_first: top(RetrievalConfig::first_only(1))?,
        top5_first: top(RetrievalConfig::first_only(k5))?,
        top1_second: top(second(1))?,
        top5_second: top(second(k5))?,
    })
}

/// Loss parts of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub first: f64,
    pub second: f64,
}

/// Build the loss for one batch on `tape`; returns the root and its parts.
pub fn batch_loss(
    tape: &mut Tape,
    params: &TowerParams,
    ids: &[NodeId],
    image: &[&Tensor],
    text: &[&Tensor],
    objective: &DalipObjectiveConfig,
    kind: ObjectiveKind,
) -> Result<(NodeId, Option<NodeId>, Option<NodeId>)> {
    let vars = params.vars_from(ids);
    match kind {
        ObjectiveKind::Dalip => {
            let b = vars.forward(tape, image, text)?;
            let nodes = dalip_loss_node(
                tape,
                (b.image_first, b.text_first),
                (b.image_second, b.text_second),
                vars.log_tau,
                objective,
            )?;
            Ok((nodes.total, Some(nodes.first), Some(nodes.second)))
        }
        ObjectiveKind::Infonce => {
            let b = vars.forward_first(tape, image, text)?;
            let tau = tape.exp(vars.log_tau)?;
            let loss = infonce_node(tape, b.0, b.1, tau, objective.reduction)?;
            Ok((loss, None, None))
        }
    }
}

/// Training state that survives across steps.
pub struct Trainer {
    pub params: TowerParams,
    adam: Adam,
    cfg: TrainConfig,
    last_grad_norms: Vec<(String, f64)>,
}

impl Trainer {
    pub fn new(params: TowerParams, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let shapes: Vec<(usize, usize)> = params.named_tensors().iter().map(|(_, t)| t.shape()).collect();
        Ok(Self {
            adam: Adam::new(cfg.adam, &shapes),
            params,
            cfg: cfg.clone(),
            last_grad_norms: Vec::new(),
        })
    }

    fn diagnostics(&self) -> String {
        let norms: Vec<String> = self.last_grad_norms.iter().map(|(n, v)| format!("{n}={v:.3e}")).collect();
        format!("last grad norms [{}]", norms.join(", "))
    }

    /// One optimizer step on a batch; `step` and `lr` only label errors.
    pub fn step(&mut self, image: &[&Tensor], text: &[&Tensor], step: usize, lr: f64) -> Result<StepLosses> {
        let named = self.params.named_tensors();
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = named.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let diverged = |this: &Self, what: String| Error::Divergence {
            step,
            lr,
            detail: format!("{what}; {}", this.diagnostics()),
        };
        let built = batch_loss(&mut tape, &self.params, &ids, image, text, &self.cfg.objective, self.cfg.kind);
        let (root, first, second) = match built {
            Ok(r) => r,
            Err(e) if e.is_numeric() => return Err(diverged(self, e.to_string())),
            Err(e) => return Err(e),
        };
        let total = tape.value(root).item()?;
        if !total.is_finite() {
            return Err(diverged(self, format!("loss {total}")));
        }
        let grads = match tape.backward(root) {
            Ok(g) => g,
            Err(e) => return Err(diverged(self, e.to_string())),
        };
        let mut grad_list: Vec<Tensor> = ids
            .iter()
            .zip(&named)
            .map(|(&id, (_, t))| grads.get_or_zeros(id, t.shape()))
            .collect();
        if !self.cfg.learn_tau {
            *grad_list.last_mut().expect("log_tau") = Tensor::zeros(1, 1);
        }
        self.last_grad_norms = named
            .iter()
            .zip(&grad_list)
            .map(|((n, _), g)| (n.clone(), g.frobenius_norm()))
            .collect();
        let mut values: Vec<Tensor> = named.into_iter().map(|(_, t)| t).collect();
        self.adam.step(&mut values, &grad_list, lr).map_err(|e| diverged(self, e.to_string()))?;
        let log_tau = values.last_mut().expect("log_tau");
        let floor = self.cfg.min_tau.ln();
        if log_tau.get(0, 0) < floor {
            *log_tau = Tensor::filled(1, 1, floor);
        }
        self.params.set_tensors(&values)?;
        let part = |n: Option<NodeId>| n.map(|id| tape.value(id).item()).transpose();
        Ok(StepLosses {
            total,
            first: part(first)?.unwrap_or(total),
            second: part(second)?.unwrap_or(0.0),
        })
    }
}

/// Indices of each batch of one epoch, shuffled; a trailing singleton
/// batch is folded into the previous one.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().map(Vec::len) == Some(1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Train on `train_split`, evaluating on `eval` after each epoch when asked.
pub fn train(train_split: &Split, eval: Option<&Split>, init: TowerParams, cfg: &TrainConfig) -> Result<(TowerParams, MetricsLog)> {
    cfg.validate()?;
    if train_split.len() < 2 {
        return Err(Error::EmptySplit);
    }
    let batches_per_epoch = epoch_batches(train_split.len(), cfg.batch_size, &mut SeededRng::new(0)).len();
    let schedule = LrSchedule {
        base_lr: cfg.base_lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_steps,
        total_steps: batches_per_epoch * cfg.epochs,
    };
    schedule.validate()?;
    let mut trainer = Trainer::new(init, cfg)?;
    let mut rng = SeededRng::stream(cfg.seed, 20);
    let mut log = MetricsLog::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let batches = epoch_batches(train_split.len(), cfg.batch_size, &mut rng);
        for idx in &batches {
            let image: Vec<&Tensor> = idx.iter().map(|&i| &train_split.image[i]).collect();
            let text: Vec<&Tensor> = idx.iter().map(|&i| &train_split.text[i]).collect();
            let lr = schedule.at(step);
            let losses = trainer.step(&image, &text, step, lr)?;
            loss_sum += losses.total;
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss_total: losses.total,
                loss_first: losses.first,
                loss_second: losses.second,
                tau: trainer.params.log_tau.exp(),
            });
            step += 1;
        }
        let metrics = match (cfg.eval_each_epoch, eval) {
            (true, Some(split)) if !split.is_empty() => {
                Some(evaluate(&trainer.params, split, &cfg.objective, cfg.matching)?)
            }
            _ => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / batches.len() as f64,
            metrics,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        });
    }
    Ok((trainer.params, log))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub metrics: EvalMetrics,
}

pub const SWEEP_LAMBDAS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Train one model per `λ1` (with `λ2 = 1 - λ1`) from the same initial
/// weights and evaluate each with its own training weights.
pub fn lambda_sweep(train_split: &Split, test: &Split, init: &TowerParams, cfg: &TrainConfig, lambdas: &[f64]) -> Result<Vec<SweepRow>> {
    lambdas
        .iter()
        .map(|&l1| {
            let mut c = cfg.clone();
            c.objective.lambda1 = l1;
            c.objective.lambda2 = 1.0 - l1;
            c.eval_each_epoch = false;
            let (params, _) = train(train_split, None, init.clone(), &c)?;
            Ok(SweepRow {
                lambda1: l1,
                lambda2: 1.0 - l1,
                metrics: evaluate(&params, test, &c.objective, c.matching)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counterparts::PoolingHeadKind;
    use crate::synthdata::{generate, Coding, Dataset, SyntheticDatasetSpec};
    use crate::twintower::TowerConfig;

    fn tiny_data(seed: u64) -> Dataset {
        generate(&SyntheticDatasetSpec {
            num_classes: 4,
            samples_per_class: 20,
            tokens_per_sample: 6,
            latent_dim: 3,
            raw_dim: 5,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_tower() -> TowerConfig {
        TowerConfig {
            raw_dim: 5,
            d_mid: 6,
            d: 8,
            heads: 2,
            d_tilde: 8,
            hidden: 6,
            pooling: PoolingHeadKind::Mbdc,
            shared_head: true,
        }
    }

    fn tiny_train(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs,
            warmup_steps: 3,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn first_order_only_dalip_matches_infonce_step_for_step() {
        let ds = tiny_data(1);
        let objective = DalipObjectiveConfig {
            lambda1: 1.0,
            lambda2: 0.0,
            ..Default::default()
        };
        let init = TowerParams::init(&tiny_tower(), objective.log_tau, 2).unwrap();
        let dalip = TrainConfig { objective: objective.clone(), ..tiny_train(3) };
        let infonce = TrainConfig { kind: ObjectiveKind::Infonce, ..dalip.clone() };
        let (pa, la) = train(&ds.train, None, init.clone(), &dalip).unwrap();
        let (pb, lb) = train(&ds.train, None, init, &infonce).unwrap();
        assert_eq!(la.steps.len(), lb.steps.len());
        for (a, b) in la.steps.iter().zip(&lb.steps) {
            assert_eq!(a.loss_total.to_bits(), b.loss_total.to_bits(), "step {}", a.step);
            assert_eq!(a.tau.to_bits(), b.tau.to_bits(), "step {}", a.step);
        }
        assert_eq!(pa, pb);
    }

    #[test]
    fn zero_weights_give_lowest_index_ties() {
        let ds = tiny_data(2);
        let mut params = TowerParams::init(&tiny_tower(), 0.0, 0).unwrap();
        let zeros: Vec<Tensor> = params
            .named_tensors()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        params.set_tensors(&zeros).unwrap();
        let m = evaluate(&params, &ds.test, &DalipObjectiveConfig::default(), Matching::Instance).unwrap();
        let n = ds.test.len() as f64;
        assert_eq!(m.top1, 1.0 / n);
        assert_eq!(m.top1_first, 1.0 / n);
        assert_eq!(m.top1_second, 1.0 / n);
        assert_eq!(m.top5, 5.0 / n);
    }

    #[test]
    fn one_step_moves_every_group() {
        let ds = tiny_data(3);
        let init = TowerParams::init(&tiny_tower(), DalipObjectiveConfig::default().log_tau, 1).unwrap();
        let mut trainer = Trainer::new(init.clone(), &tiny_train(1)).unwrap();
        let image: Vec<&Tensor> = ds.train.image[..8].iter().collect();
        let text: Vec<&Tensor> = ds.train.text[..8].iter().collect();
        trainer.step(&image, &text, 0, 1e-3).unwrap();
        for ((name, before), (_, after)) in init.named_tensors().iter().zip(trainer.params.named_tensors()) {
            assert_ne!(before, &after, "{name} did not move");
        }
    }

    #[test]
    fn frozen_tau_stays_put_and_learned_tau_is_clamped() {
        let ds = tiny_data(3);
        let image: Vec<&Tensor> = ds.train.image[..8].iter().collect();
        let text: Vec<&Tensor> = ds.train.text[..8].iter().collect();
        let init = TowerParams::init(&tiny_tower(), 0.02f64.ln(), 1).unwrap();
        let mut frozen = Trainer::new(init.clone(), &TrainConfig { learn_tau: false, ..tiny_train(1) }).unwrap();
        frozen.step(&image, &text, 0, 0.5).unwrap();
        assert_eq!(frozen.params.log_tau, init.log_tau);

        let mut learned = Trainer::new(init, &TrainConfig { min_tau: 0.019, ..tiny_train(1) }).unwrap();
        for step in 0..20 {
            learned.step(&image, &text, step, 0.5).unwrap();
            assert!(learned.params.log_tau >= 0.019f64.ln());
        }
    }

    #[test]
    fn loss_falls_and_log_is_well_formed() {
        let ds = tiny_data(5);
        let init = TowerParams::init(&tiny_tower(), DalipObjectiveConfig::default().log_tau, 5).unwrap();
        let (_, log) = train(&ds.train, Some(&ds.test), init, &tiny_train(12)).unwrap();
        assert!(log.epochs.last().unwrap().mean_loss < log.epochs[0].mean_loss);
        assert!(log.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
        assert!(log.epochs.iter().all(|e| e.metrics.is_some()));
        let csv = log.steps_csv();
        assert_eq!(csv.lines().next(), Some(STEP_HEADER));
        assert_eq!(csv.lines().count(), log.steps.len() + 1);
        assert_eq!(log.epochs_csv().lines().count(), 13);
    }

    #[test]
    fn training_is_reproducible() {
        let ds = tiny_data(6);
        let init = TowerParams::init(&tiny_tower(), 0.0, 6).unwrap();
        let cfg = TrainConfig { eval_each_epoch: false, ..tiny_train(2) };
        let (pa, la) = train(&ds.train, None, init.clone(), &cfg).unwrap();
        let (pb, lb) = train(&ds.train, None, init, &cfg).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(la.steps_csv(), lb.steps_csv());
    }

    #[test]
    fn batch_size_needs_a_negative() {
        let init = TowerParams::init(&tiny_tower(), 0.0, 0).unwrap();
        let cfg = TrainConfig { batch_size: 1, ..tiny_train(1) };
        assert!(matches!(Trainer::new(init.clone(), &cfg), Err(Error::Config(_))));
        let ds = tiny_data(0);
        assert!(matches!(train(&ds.train, None, init, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = SeededRng::new(8);
        for (n, b) in [(10, 3), (9, 4), (7, 7), (5, 2)] {
            let batches = epoch_batches(n, b, &mut rng);
            assert!(batches.iter().all(|x| x.len() >= 2), "{n} {b}: {batches:?}");
            let mut all: Vec<usize> = batches.concat();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn empty_split_is_rejected() {
        let init = TowerParams::init(&tiny_tower(), 0.0, 0).unwrap();
        let empty = Split::empty();
        let obj = DalipObjectiveConfig::default();
        assert!(matches!(evaluate(&init, &empty, &obj, Matching::Class), Err(Error::EmptySplit)));
    }

    #[test]
    fn sweep_rows_follow_the_lambdas() {
        let ds = generate(&SyntheticDatasetSpec { coding: Coding::Mixed, ..tiny_data(0).spec }).unwrap();
        let init = TowerParams::init(&tiny_tower(), 0.0, 0).unwrap();
        let rows = lambda_sweep(&ds.train, &ds.test, &init, &tiny_train(1), &[0.0, 0.5, 1.0]).unwrap();
        let got: Vec<(f64, f64)> = rows.iter().map(|r| (r.lambda1, r.lambda2)).collect();
        assert_eq!(got, vec![(0.0, 1.0), (0.5, 0.5), (1.0, 0.0)]);
    }
}
