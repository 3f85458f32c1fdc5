//! Server-side orchestration: budgets, sampling, sub-model slicing, weighted
//! aggregation of overlapping parameters, evaluation and the round loop.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{GlobalModel, ParamGroup, SubModel};
use crate::numerics::{Graph, Scalar, Tensor};
use crate::ree::{forward_with_exits, ExitSchedule, ForwardFlags};
use crate::training::{cosine_lr, eta_schedule, local_train, RunningEstimate, TrainConfig, TrainMode};

pub const THREADS_ENV: &str = "REEFL_THREADS";
const EVAL_BATCH: usize = 64;

/// Clients are split into one group per exit, group `e` getting budget
/// `exit_blocks[e]`. Remainder clients go to the deepest groups; shallower
/// groups take the lower client ids.
pub fn assign_budgets(num_clients: usize, schedule: &ExitSchedule) -> Result<Vec<usize>> {
    let e = schedule.num_exits();
    if num_clients < e {
        return Err(Error::Config(format!(
            "{num_clients} clients cannot cover {e} budget groups"
        )));
    }
    let (base, rem) = (num_clients / e, num_clients % e);
    let mut budgets = Vec::with_capacity(num_clients);
    for (g, &b) in schedule.exit_blocks().iter().enumerate() {
        let size = base + usize::from(g >= e - rem);
        budgets.extend(std::iter::repeat_n(b, size));
    }
    Ok(budgets)
}

/// Uniform sample without replacement of `max(1, round(fraction·|pool|))`
/// ids, returned sorted.
pub fn sample_clients(pool: &[usize], fraction: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::Config("client pool is empty".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("sample fraction {fraction} outside (0, 1]")));
    }
    let m = ((fraction * pool.len() as f64).round() as usize).clamp(1, pool.len());
    let mut ids: Vec<usize> = rand::seq::index::sample(rng, pool.len(), m)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

pub fn slice_submodel<F: Scalar>(global: &GlobalModel<F>, budget: usize) -> Result<SubModel<F>> {
    global.slice(budget)
}

/// Whether `group` leaves the client in `mode`.
pub fn transferred(group: ParamGroup, mode: TrainMode) -> bool {
    mode.trains(group)
}

#[derive(Clone, Debug)]
pub struct ClientUpdate<F> {
    pub model: SubModel<F>,
    /// Aggregation weight.
    pub samples: usize,
}

/// Per-group sample-weighted mean over the clients that trained the group.
/// Accumulates in `f64` as `θ_1 + Σ_i w_i (θ_i − θ_1)` so identical inputs
/// reproduce exactly. Groups nobody trained keep their global value.
pub fn aggregate<F: Scalar>(
    global: &GlobalModel<F>,
    updates: &[ClientUpdate<F>],
    mode: TrainMode,
) -> Result<GlobalModel<F>> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no client updates".into()));
    }
    let tables: Vec<HashMap<String, &Tensor<F>>> = updates
        .iter()
        .map(|u| u.model.named_tensors().into_iter().map(|(_, n, t)| (n, t)).collect())
        .collect();
    let mut out = global.clone();
    let mut failure = None;
    out.visit_mut(&mut |group, name, tensor| {
        if failure.is_some() || !transferred(group, mode) {
            return;
        }
        let mut contrib: Vec<(&Tensor<F>, f64)> = Vec::new();
        for (u, table) in updates.iter().zip(&tables) {
            if let Some(t) = table.get(&name) {
                if t.shape() != tensor.shape() {
                    failure = Some(Error::Aggregation(format!(
                        "{name}: client shape {:?} vs global {:?}",
                        t.shape(),
                        tensor.shape()
                    )));
                    return;
                }
                contrib.push((t, u.samples as f64));
            }
        }
        let total: f64 = contrib.iter().map(|(_, n)| n).sum();
        if contrib.is_empty() || total <= 0.0 {
            return;
        }
        let base = contrib[0].0.data();
        for (k, slot) in tensor.data_mut().iter_mut().enumerate() {
            let b = base[k].to_f64_lossless();
            let delta: f64 = contrib
                .iter()
                .map(|(t, n)| n / total * (t.data()[k].to_f64_lossless() - b))
                .sum();
            *slot = F::lit(b + delta);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Bytes for one direction of one client's exchange: 4 per transferred
/// parameter.
pub fn comm_cost<F: Scalar>(global: &GlobalModel<F>, budget: usize, mode: TrainMode) -> Result<u64> {
    let sub = global.slice(budget)?;
    Ok(4 * sub.param_count(|g| transferred(g, mode)) as u64)
}

/// Top-1 accuracy of every exit over `test`, full-depth forward.
pub fn evaluate<F: Scalar>(global: &GlobalModel<F>, test: &[Example<F>], flags: ForwardFlags) -> Result<Vec<f64>> {
    if test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let exits = global.config.schedule.num_exits();
    let counts = test
        .par_chunks(EVAL_BATCH)
        .map(|chunk| correct_counts(global, chunk, flags))
        .collect::<Result<Vec<_>>>()?;
    let mut total = vec![0usize; exits];
    for c in counts {
        for (t, v) in total.iter_mut().zip(c) {
            *t += v;
        }
    }
    Ok(total.into_iter().map(|c| c as f64 / test.len() as f64).collect())
}

fn correct_counts<F: Scalar>(global: &GlobalModel<F>, batch: &[Example<F>], flags: ForwardFlags) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let bound = global.bind(&mut g, false)?;
    let images: Vec<&Tensor<F>> = batch.iter().map(|e| &e.image).collect();
    let trace = forward_with_exits(&mut g, &bound, &global.config, &images, flags)?;
    Ok(trace
        .exit_logits
        .iter()
        .map(|&v| {
            let logits = g.value(v);
            batch
                .iter()
                .enumerate()
                .filter(|(j, ex)| argmax(logits.row(*j)) == ex.label)
                .count()
        })
        .collect())
}

fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for the RNG stream of `(round, stream)`; independent of scheduling.
pub fn stream_seed(seed: u64, round: usize, stream: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ round as u64) ^ stream)
}

const SAMPLING_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub budget: usize,
    pub train: Vec<Example>,
    pub estimate: RunningEstimate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub sample_fraction: f64,
    pub total_rounds: usize,
    pub eval_interval: usize,
    /// Sample only clients that can hold the full model.
    pub exclude_underbudget: bool,
    pub seed: u64,
    /// Worker threads for client training; `None` reads `REEFL_THREADS`.
    pub threads: Option<usize>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            sample_fraction: 0.1,
            total_rounds: 1000,
            eval_interval: 10,
            exclude_underbudget: false,
            seed: 0,
            threads: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub sampled: Vec<usize>,
    /// Per-exit test accuracy, present on evaluated rounds.
    pub accuracies: Option<Vec<f64>>,
    pub client_losses: Vec<f64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub eta: f64,
    pub lr: f64,
}

impl RoundReport {
    pub fn mean_accuracy(&self) -> Option<f64> {
        self.accuracies.as_ref().map(|a| a.iter().sum::<f64>() / a.len() as f64)
    }

    pub fn train_loss_mean(&self) -> f64 {
        self.client_losses.iter().sum::<f64>() / self.client_losses.len().max(1) as f64
    }
}

pub fn metrics_header(exits: usize) -> String {
    let mut cols = vec!["round".to_string()];
    cols.extend((1..=exits).map(|e| format!("exit_{e}_acc")));
    cols.extend(["mean_acc", "train_loss_mean", "bytes_up", "bytes_down", "eta", "lr"].map(String::from));
    cols.join(",")
}

/// CSV row for an evaluated round, `None` otherwise.
pub fn metrics_row(r: &RoundReport) -> Option<String> {
    let acc = r.accuracies.as_ref()?;
    let mut cols = vec![r.round.to_string()];
    cols.extend(acc.iter().map(|a| format!("{a:.6}")));
    cols.push(format!("{:.6}", r.mean_accuracy()?));
    cols.push(format!("{:.6}", r.train_loss_mean()));
    cols.push(r.bytes_up.to_string());
    cols.push(r.bytes_down.to_string());
    cols.push(format!("{:.6}", r.eta));
    cols.push(format!("{:.8}", r.lr));
    Some(cols.join(","))
}

fn thread_count(requested: Option<usize>) -> Result<usize> {
    if let Some(n) = requested {
        return Ok(n.max(1));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(|n| n.max(1))
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v} is not a thread count"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub struct Simulator {
    pub global: GlobalModel<f32>,
    pub clients: Vec<ClientState>,
    pub test: Vec<Example>,
    pub train: TrainConfig,
    pub fed: FederationConfig,
    pool: rayon::ThreadPool,
}

impl Simulator {
    pub fn new(
        global: GlobalModel<f32>,
        clients: Vec<ClientState>,
        test: Vec<Example>,
        train: TrainConfig,
        fed: FederationConfig,
    ) -> Result<Self> {
        train.validate()?;
        if fed.eval_interval == 0 || fed.total_rounds == 0 {
            return Err(Error::Config("eval_interval and total_rounds must be positive".into()));
        }
        if train.total_rounds != fed.total_rounds {
            return Err(Error::Config(format!(
                "train schedule spans {} rounds, federation runs {}",
                train.total_rounds, fed.total_rounds
            )));
        }
        for (i, c) in clients.iter().enumerate() {
            if c.id != i {
                return Err(Error::Config(format!("client at position {i} has id {}", c.id)));
            }
            if c.train.is_empty() {
                return Err(Error::Config(format!("client {i} has no training data")));
            }
            global.slice(c.budget)?;
            if global.config.schedule.exits_within(c.budget) == 0 {
                return Err(Error::Budget(format!("client {i} budget {} reaches no exit", c.budget)));
            }
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count(fed.threads)?)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            global,
            clients,
            test,
            train,
            fed,
            pool,
        })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    fn eligible(&self) -> Vec<usize> {
        let depth = self.global.config.backbone.depth;
        self.clients
            .iter()
            .filter(|c| !self.fed.exclude_underbudget || c.budget == depth)
            .map(|c| c.id)
            .collect()
    }

    /// Sample, slice, train in parallel, aggregate, and evaluate on the
    /// configured cadence.
    pub fn run_round(&mut self, round: usize) -> Result<RoundReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.fed.seed, round, SAMPLING_STREAM));
        let sampled = sample_clients(&self.eligible(), self.fed.sample_fraction, &mut rng)?;
        let (global, clients, cfg, seed) = (&self.global, &self.clients, &self.train, self.fed.seed);
        let results: Vec<Result<(ClientUpdate<f32>, RunningEstimate, f64)>> = self.pool.install(|| {
            sampled
                .par_iter()
                .map(|&id| {
                    let client = &clients[id];
                    let sub = global.slice(client.budget)?;
                    let mut est = client.estimate.clone();
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, round, id as u64));
                    let out = local_train(sub, &client.train, &mut est, cfg, round, &mut rng)?;
                    Ok((
                        ClientUpdate {
                            model: out.model,
                            samples: out.samples,
                        },
                        est,
                        out.mean_loss,
                    ))
                })
                .collect()
        });
        let mut updates = Vec::with_capacity(sampled.len());
        let mut losses = Vec::with_capacity(sampled.len());
        let mut bytes = 0u64;
        for (&id, res) in sampled.iter().zip(results) {
            let (update, est, loss) = res.map_err(|e| Error::Client {
                round,
                client: id,
                source: Box::new(e),
            })?;
            self.clients[id].estimate = est;
            bytes += comm_cost(&self.global, self.clients[id].budget, self.train.mode)?;
            updates.push(update);
            losses.push(loss);
        }
        self.global = aggregate(&self.global, &updates, self.train.mode)?;
        let evaluate_now = round.is_multiple_of(self.fed.eval_interval) || round == self.fed.total_rounds;
        let accuracies = if evaluate_now {
            let (global, test, flags) = (&self.global, &self.test, self.train.flags());
            Some(self.pool.install(|| evaluate(global, test, flags))?)
        } else {
            None
        };
        Ok(RoundReport {
            round,
            sampled,
            accuracies,
            client_losses: losses,
            bytes_up: bytes,
            bytes_down: bytes,
            eta: eta_schedule(round, &self.train),
            lr: cosine_lr(round, &self.train)?,
        })
    }

    /// Runs every round, handing each report to `sink` as it completes.
    pub fn run(&mut self, mut sink: impl FnMut(&RoundReport) -> Result<()>) -> Result<Vec<RoundReport>> {
        let mut reports = Vec::with_capacity(self.fed.total_rounds);
        for round in 1..=self.fed.total_rounds {
            let report = self.run_round(round)?;
            sink(&report)?;
            reports.push(report);
        }
        Ok(reports)
    }
}
