use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{generate_task, partition_dirichlet, Partition, TaskData};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Evaluation, RoundMetrics};
use crate::lora::{loss_and_backward, pretrain_backbone, AdapterSet, Backbone, LossKind, LoraModel};
use crate::protocol::{aggregate, client_round, sample_clients, Broadcast, ClientUpdate, Quantization, ServerState};
use crate::quantizer::format::dense_len;
use crate::rng::RandomSource;

/// Everything fixed before the first round.
#[derive(Debug, Clone)]
pub struct Setup {
    pub data: TaskData,
    /// Pretrained on the source split, then frozen.
    pub backbone: Arc<Backbone>,
    pub partition: Partition,
    pub adapters: AdapterSet,
}

fn root(seed: u64) -> RandomSource {
    RandomSource::new(seed, "fedlpp")
}

/// Draws the task, pretrains the backbone, splits the training set across
/// clients and initialises the adapters, all from `seed`.
pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Setup> {
    config.validate()?;
    let root = root(seed);
    let data = generate_task(&config.task, &root.derive("data"))?;
    let initial = Backbone::random(
        &config.widths(),
        config.model.activation,
        &mut root.derive("backbone"),
    )?;
    let backbone = pretrain_backbone(
        &initial,
        data.source.features(),
        data.source.targets(),
        config.task.loss_kind(),
        config.model.pretrain,
        &root.derive("pretrain"),
    )?;
    let partition = partition_dirichlet(
        &data.train,
        config.scenario.clients,
        config.task.alpha,
        &root.derive("partition"),
    )?;
    let adapters = AdapterSet::init(
        &backbone,
        &config.adapted_layers(),
        config.model.rank,
        &mut root.derive("adapters"),
    )?;
    Ok(Setup {
        data,
        backbone: Arc::new(backbone),
        partition,
        adapters,
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for client rounds; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Keep every round's encoded broadcast.
    pub record_payloads: bool,
}

/// Something that went wrong without stopping the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundEvent {
    pub round: usize,
    pub client: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct RoundReport {
    pub metrics: RoundMetrics,
    /// Aggregation weights in ascending client order; empty for a void round.
    pub weights: Vec<f64>,
    /// Mean cosine between client gradients at the proxy and at the global
    /// adapters, on rounds configured for it.
    pub alignment: Option<f64>,
}

/// A federation mid-run. Each call to [`Federation::step`] is one
/// communication round.
pub struct Federation {
    config: ExperimentConfig,
    root: RandomSource,
    setup: Setup,
    server: ServerState,
    pending: Broadcast,
    pool: Option<rayon::ThreadPool>,
    events: Vec<RoundEvent>,
    record_payloads: bool,
    payloads: Vec<Vec<Vec<u8>>>,
}

impl Federation {
    pub fn new(config: &ExperimentConfig, seed: u64, options: RunOptions) -> Result<Self> {
        let setup = prepare(config, seed)?;
        Self::from_setup(config, seed, setup, options)
    }

    /// Starts from an explicit setup, e.g. with non-default adapters.
    pub fn from_setup(
        config: &ExperimentConfig,
        seed: u64,
        setup: Setup,
        options: RunOptions,
    ) -> Result<Self> {
        config.validate()?;
        if setup.partition.len() != config.scenario.clients {
            return Err(Error::Config(format!(
                "partition has {} shards for {} clients",
                setup.partition.len(),
                config.scenario.clients
            )));
        }
        let quantization = Quantization::new(config.quantizer.bits, config.quantizer.block_size)?;
        let server = ServerState::new(setup.adapters.clone(), quantization)?;
        let pending = server.broadcast()?;
        let pool = options
            .threads
            .map(|n| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))
            })
            .transpose()?;
        Ok(Self {
            config: config.clone(),
            root: root(seed),
            setup,
            server,
            pending,
            pool,
            events: Vec::new(),
            record_payloads: options.record_payloads,
            payloads: Vec::new(),
        })
    }

    pub fn setup(&self) -> &Setup {
        &self.setup
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    /// What the clients will receive next round.
    pub fn next_broadcast(&self) -> &Broadcast {
        &self.pending
    }

    pub fn events(&self) -> &[RoundEvent] {
        &self.events
    }

    fn kind(&self) -> LossKind {
        self.config.task.loss_kind()
    }

    fn train_clients(&self, ids: &[usize], proxies: &AdapterSet, round: usize) -> Vec<(usize, Result<ClientUpdate>)> {
        let schedule = self.config.round.schedule();
        let work = || {
            ids.par_iter()
                .map(|&i| {
                    let rng = self.root.derive(format!("client-{i}/round-{round}"));
                    let update = client_round(
                        i,
                        &self.setup.partition.shards()[i],
                        proxies,
                        &self.setup.backbone,
                        self.kind(),
                        schedule,
                        &rng,
                    );
                    (i, update)
                })
                .collect()
        };
        match &self.pool {
            Some(pool) => pool.install(work),
            None => work(),
        }
    }

    fn alignment(&self, ids: &[usize], proxies: &AdapterSet) -> Result<f64> {
        let global = LoraModel::new(Arc::clone(&self.setup.backbone), self.server.adapters().clone())?;
        let proxy = global.with_adapters(proxies.clone())?;
        let mut total = 0.0;
        for &i in ids {
            let shard = &self.setup.partition.shards()[i];
            let g = loss_and_backward(&global, shard.features(), shard.targets(), self.kind())?;
            let p = loss_and_backward(&proxy, shard.features(), shard.targets(), self.kind())?;
            total += cosine(&g.grads.flatten(), &p.grads.flatten());
        }
        Ok(total / ids.len() as f64)
    }

    fn evaluate_pair(&mut self, adapters: &AdapterSet, round: usize, what: &str) -> (Evaluation, Evaluation) {
        let kind = self.kind();
        let model = LoraModel::new(Arc::clone(&self.setup.backbone), adapters.clone());
        let mut run = |ds| {
            model
                .as_ref()
                .map_err(Clone::clone)
                .and_then(|m| evaluate(m, ds, kind))
                .unwrap_or_else(|e| {
                    self.events.push(RoundEvent {
                        round,
                        client: None,
                        message: format!("{what} evaluation failed: {e}"),
                    });
                    Evaluation {
                        loss: f64::NAN,
                        accuracy: None,
                    }
                })
        };
        let val = run(&self.setup.data.validation);
        let test = run(&self.setup.data.test);
        (val, test)
    }

    /// Broadcast, sample, train, aggregate, evaluate.
    ///
    /// The recorded metrics describe the server state after aggregation:
    /// the global adapters and the proxy that state would broadcast. The
    /// byte counts are those of the round that just ran.
    pub fn step(&mut self) -> Result<RoundReport> {
        let round = self.server.round();
        let broadcast = self.pending.clone();
        let proxies = broadcast.proxies();
        let sampling = self.root.derive("sampling");
        let ids = sample_clients(
            self.config.scenario.clients,
            self.config.scenario.participants(),
            round,
            &sampling,
        )?;

        let mut updates = Vec::with_capacity(ids.len());
        for (i, result) in self.train_clients(&ids, &proxies, round) {
            match result {
                Ok(u) if u.deltas.is_finite() => updates.push(u),
                Ok(_) => self.events.push(RoundEvent {
                    round,
                    client: Some(i),
                    message: "non-finite update dropped".into(),
                }),
                Err(e) => self.events.push(RoundEvent {
                    round,
                    client: Some(i),
                    message: format!("client round failed: {e}"),
                }),
            }
        }

        let alignment = if self.config.round.alignment_rounds.contains(&round) {
            match self.alignment(&ids, &proxies) {
                Ok(c) => Some(c),
                Err(e) => {
                    self.events.push(RoundEvent {
                        round,
                        client: None,
                        message: format!("alignment failed: {e}"),
                    });
                    None
                }
            }
        } else {
            None
        };

        let upload_bytes = updates
            .iter()
            .flat_map(|u| u.deltas.matrices())
            .map(|m| dense_len(m.rows(), m.cols()) as u64)
            .sum();
        let participants = updates.iter().map(|u| u.client_id).collect();
        let population = self.setup.partition.total();
        let weights = match aggregate(&mut self.server, &updates, self.config.round.weighting, population) {
            Ok(w) => w,
            Err(e) => {
                self.events.push(RoundEvent {
                    round,
                    client: None,
                    message: format!("aggregation failed, round void: {e}"),
                });
                aggregate(&mut self.server, &[], self.config.round.weighting, population)?
            }
        };
        if weights.is_empty() && updates.is_empty() {
            self.events.push(RoundEvent {
                round,
                client: None,
                message: "no updates, round void".into(),
            });
        }

        let next = self.server.broadcast()?;
        let global = self.server.adapters().clone();
        let (global_val, global_test) = self.evaluate_pair(&global, round, "global");
        let (proxy_val, proxy_test) = self.evaluate_pair(&next.proxies(), round, "proxy");
        let metrics = RoundMetrics {
            round,
            global_val_loss: global_val.loss,
            proxy_val_loss: proxy_val.loss,
            global_test_loss: global_test.loss,
            proxy_test_loss: proxy_test.loss,
            global_test_acc: global_test.accuracy,
            proxy_test_acc: proxy_test.accuracy,
            broadcast_bytes: broadcast.byte_len() as u64,
            upload_bytes,
            participants,
        };
        self.server.record(metrics.clone());
        if self.record_payloads {
            self.payloads.push(broadcast.encode());
        }
        self.pending = next;
        Ok(RoundReport {
            metrics,
            weights,
            alignment,
        })
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// A finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub history: Vec<RoundMetrics>,
    pub backbone: Arc<Backbone>,
    pub best_global_round: usize,
    pub best_global: AdapterSet,
    pub best_proxy_round: usize,
    pub best_proxy: Broadcast,
    pub final_adapters: AdapterSet,
    /// `(round, mean cosine)` for each configured alignment round.
    pub alignment: Vec<(usize, f64)>,
    pub events: Vec<RoundEvent>,
    /// Encoded broadcast of every round, if requested.
    pub payloads: Vec<Vec<Vec<u8>>>,
}

fn improves(candidate: f64, best: Option<f64>) -> bool {
    !candidate.is_nan() && best.is_none_or(|b| b.is_nan() || candidate < b)
}

/// Runs every configured round for one seed.
pub fn run_training(config: &ExperimentConfig, seed: u64, options: RunOptions) -> Result<RunOutcome> {
    let mut fed = Federation::new(config, seed, options)?;
    let mut alignment = Vec::new();
    let mut best_global = (0, None, fed.server().adapters().clone());
    let mut best_proxy = (0, None, fed.next_broadcast().clone());
    for _ in 0..config.round.rounds {
        let report = fed.step()?;
        let m = &report.metrics;
        if improves(m.global_val_loss, best_global.1) {
            best_global = (m.round, Some(m.global_val_loss), fed.server().adapters().clone());
        }
        if improves(m.proxy_val_loss, best_proxy.1) {
            best_proxy = (m.round, Some(m.proxy_val_loss), fed.next_broadcast().clone());
        }
        if let Some(c) = report.alignment {
            alignment.push((m.round, c));
        }
    }
    Ok(RunOutcome {
        seed,
        history: fed.server.history().to_vec(),
        backbone: Arc::clone(&fed.setup.backbone),
        best_global_round: best_global.0,
        best_global: best_global.2,
        best_proxy_round: best_proxy.0,
        best_proxy: best_proxy.2,
        final_adapters: fed.server.adapters().clone(),
        alignment,
        events: fed.events,
        payloads: fed.payloads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScenarioMode;
    use crate::protocol::BitWidth;

    fn small(bits: BitWidth) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.task.train = 200;
        c.task.validation = 50;
        c.task.test = 50;
        c.task.source = 200;
        c.model.hidden = vec![8];
        c.model.rank = 2;
        c.model.pretrain.epochs = 2;
        c.scenario.clients = 4;
        c.round.rounds = 3;
        c.round.lr = 0.05;
        c.quantizer.bits = bits;
        c
    }

    #[test]
    fn same_seed_same_history() {
        let c = small(BitWidth::Bits(2));
        let a = run_training(&c, 7, RunOptions::default()).unwrap();
        let b = run_training(&c, 7, RunOptions { threads: Some(1), ..Default::default() }).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.final_adapters, b.final_adapters);
        assert_ne!(run_training(&c, 8, RunOptions::default()).unwrap().history, a.history);
    }

    #[test]
    fn disabled_quantization_has_no_gap() {
        let out = run_training(&small(BitWidth::Off), 1, RunOptions::default()).unwrap();
        for m in &out.history {
            assert_eq!(m.global_val_loss, m.proxy_val_loss);
            assert_eq!(m.global_test_loss, m.proxy_test_loss);
        }
        assert_eq!(out.best_global_round, out.best_proxy_round);
    }

    #[test]
    fn broadcast_bytes_match_payloads() {
        let out = run_training(
            &small(BitWidth::Bits(1)),
            3,
            RunOptions { threads: None, record_payloads: true },
        )
        .unwrap();
        for (m, p) in out.history.iter().zip(&out.payloads) {
            assert_eq!(m.broadcast_bytes, p.iter().map(|b| b.len() as u64).sum::<u64>());
            assert!(p.iter().all(|b| b.starts_with(b"FLPQ")));
        }
    }

    #[test]
    fn cross_device_samples_participants() {
        let mut c = small(BitWidth::Bits(2));
        c.scenario.mode = ScenarioMode::CrossDevice;
        c.scenario.participants = Some(2);
        let out = run_training(&c, 1, RunOptions::default()).unwrap();
        assert!(out.history.iter().all(|m| m.participants.len() == 2));
        assert!(out.events.is_empty());
    }

    #[test]
    fn weights_sum_to_one() {
        let mut fed = Federation::new(&small(BitWidth::Bits(3)), 2, RunOptions::default()).unwrap();
        for t in 0..3 {
            let r = fed.step().unwrap();
            assert_eq!(r.metrics.round, t);
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-7);
        }
        assert_eq!(fed.server().round(), 3);
    }
}
