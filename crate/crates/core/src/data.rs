//! Synthetic supervised tasks and their split across clients.
//!
//! Two task families stand in for real corpora:
//!
//! * `regression-teacher`: inputs come from a Gaussian mixture and targets
//!   from a fixed random two-layer `tanh` teacher plus label noise.
//! * `cluster-classification`: one Gaussian cluster per class.
//!
//! Each task also has a *source* variant, drawn from a perturbed teacher (or
//! shifted class means). The backbone is pretrained on the source task and
//! the adapters then close the gap to the target task.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{LossKind, Targets};
use crate::rng::RandomSource;
use crate::tensor::{product, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Validation,
    Test,
    Source,
}

/// Samples are columns of `features`. `groups` records the mixture component
/// (or class) each sample came from, which drives non-IID partitioning.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    targets: Targets,
    groups: Vec<usize>,
    split: Split,
}

impl Dataset {
    pub fn new(features: Matrix, targets: Targets, groups: Vec<usize>, split: Split) -> Result<Self> {
        if targets.len() != features.cols() || groups.len() != features.cols() {
            return Err(Error::InvalidArgument(format!(
                "{} samples but {} targets and {} group labels",
                features.cols(),
                targets.len(),
                groups.len()
            )));
        }
        Ok(Self {
            features,
            targets,
            groups,
            split,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.features.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_columns(indices),
            targets: self.targets.select(indices),
            groups: indices.iter().map(|&i| self.groups[i]).collect(),
            split: self.split,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    RegressionTeacher,
    ClusterClassification,
}

fn default_clusters() -> usize {
    8
}
fn default_spread() -> f32 {
    0.5
}
fn default_separation() -> f32 {
    3.0
}
fn default_teacher_hidden() -> usize {
    32
}
fn default_source_shift() -> f32 {
    0.6
}
fn default_source_rank() -> usize {
    2
}

/// Shape and difficulty of a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Samples in the source task used to pretrain the backbone.
    pub source: usize,
    /// Label noise for regression.
    pub noise_stddev: f32,
    /// Dirichlet concentration for splitting across clients.
    pub alpha: f64,
    /// Mixture components of the regression input distribution.
    pub clusters: usize,
    /// Standard deviation of samples around their cluster mean.
    pub cluster_spread: f32,
    /// Standard deviation of cluster means.
    pub separation: f32,
    pub teacher_hidden: usize,
    /// Size of the low-rank change separating source and target teachers.
    pub source_shift: f32,
    pub source_rank: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::RegressionTeacher,
            input_dim: 16,
            output_dim: 4,
            train: 4000,
            validation: 400,
            test: 400,
            source: 4000,
            noise_stddev: 0.05,
            alpha: 0.5,
            clusters: default_clusters(),
            cluster_spread: default_spread(),
            separation: default_separation(),
            teacher_hidden: default_teacher_hidden(),
            source_shift: default_source_shift(),
            source_rank: default_source_rank(),
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
            ("train", self.train),
            ("validation", self.validation),
            ("test", self.test),
            ("source", self.source),
            ("clusters", self.clusters),
            ("teacher_hidden", self.teacher_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("task.{name} must be positive")));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("task.alpha must be positive, got {}", self.alpha)));
        }
        for (name, v) in [
            ("noise_stddev", self.noise_stddev),
            ("cluster_spread", self.cluster_spread),
            ("separation", self.separation),
            ("source_shift", self.source_shift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("task.{name} must be non-negative")));
            }
        }
        if self.kind == TaskKind::ClusterClassification && self.output_dim < 2 {
            return Err(Error::Config("classification needs at least two classes".into()));
        }
        Ok(())
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.kind {
            TaskKind::RegressionTeacher => LossKind::Mse,
            TaskKind::ClusterClassification => LossKind::SoftmaxCrossEntropy,
        }
    }
}

/// Everything drawn for one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub source: Dataset,
}

/// A random map from inputs to outputs: either a teacher network or a table
/// of class means.
enum Generator {
    Teacher {
        centers: Matrix,
        w1: Matrix,
        b1: Matrix,
        w2: Matrix,
    },
    Clusters {
        means: Matrix,
    },
}

fn low_rank(rows: usize, cols: usize, rank: usize, scale: f32, rng: &mut RandomSource) -> Result<Matrix> {
    let rank = rank.max(1).min(rows.min(cols));
    let u = Matrix::gaussian_fill(rows, rank, 0.0, 1.0, rng)?;
    let v = Matrix::gaussian_fill(rank, cols, 0.0, scale / ((rank * cols) as f32).sqrt(), rng)?;
    u.matmul(&v)
}

impl Generator {
    fn target(spec: &TaskSpec, rng: &RandomSource) -> Result<Self> {
        let mut rng = rng.derive("generator");
        Ok(match spec.kind {
            TaskKind::RegressionTeacher => {
                let h = spec.teacher_hidden;
                Generator::Teacher {
                    centers: Matrix::gaussian_fill(spec.input_dim, spec.clusters, 0.0, 1.0, &mut rng)?,
                    w1: Matrix::gaussian_fill(h, spec.input_dim, 0.0, (1.0 / spec.input_dim as f32).sqrt(), &mut rng)?,
                    b1: Matrix::gaussian_fill(h, 1, 0.0, 0.1, &mut rng)?,
                    w2: Matrix::gaussian_fill(spec.output_dim, h, 0.0, (1.0 / h as f32).sqrt(), &mut rng)?,
                }
            }
            TaskKind::ClusterClassification => Generator::Clusters {
                means: Matrix::gaussian_fill(spec.input_dim, spec.output_dim, 0.0, spec.separation, &mut rng)?,
            },
        })
    }

    /// The related source task: low-rank perturbation of the teacher weights,
    /// or shifted class means.
    fn source(&self, spec: &TaskSpec, rng: &RandomSource) -> Result<Self> {
        let mut rng = rng.derive("source-shift");
        let s = spec.source_shift;
        Ok(match self {
            Generator::Teacher { centers, w1, b1, w2 } => {
                let d1 = low_rank(w1.rows(), w1.cols(), spec.source_rank, s, &mut rng)?;
                let d2 = low_rank(w2.rows(), w2.cols(), spec.source_rank, s, &mut rng)?;
                Generator::Teacher {
                    centers: centers.clone(),
                    w1: w1.add_scaled(&d1, 1.0)?,
                    b1: b1.clone(),
                    w2: w2.add_scaled(&d2, 1.0)?,
                }
            }
            Generator::Clusters { means } => {
                let shift = Matrix::gaussian_fill(means.rows(), means.cols(), 0.0, s * spec.separation, &mut rng)?;
                Generator::Clusters {
                    means: means.add_scaled(&shift, 1.0)?,
                }
            }
        })
    }

    fn sample(&self, spec: &TaskSpec, count: usize, split: Split, rng: &mut RandomSource) -> Result<Dataset> {
        let (centers, groups_total) = match self {
            Generator::Teacher { centers, .. } => (centers, spec.clusters),
            Generator::Clusters { means } => (means, spec.output_dim),
        };
        let groups: Vec<usize> = (0..count).map(|_| rng.random_range(0..groups_total)).collect();
        let noise = Matrix::gaussian_fill(spec.input_dim, count, 0.0, spec.cluster_spread, rng)?;
        let mut x = centers.select_columns(&groups);
        x.axpy(1.0, &noise);
        let targets = match self {
            Generator::Teacher { w1, b1, w2, .. } => {
                let mut h = product(w1, false, &x, false);
                for (r, row) in h.as_mut_slice().chunks_mut(count).enumerate() {
                    let b = b1.get(r, 0);
                    row.iter_mut().for_each(|v| *v = (*v + b).tanh());
                }
                let mut y = product(w2, false, &h, false);
                let label_noise = Matrix::gaussian_fill(spec.output_dim, count, 0.0, spec.noise_stddev, rng)?;
                y.axpy(1.0, &label_noise);
                Targets::Values(y)
            }
            Generator::Clusters { .. } => Targets::Classes(groups.clone()),
        };
        Dataset::new(x, targets, groups, split)
    }
}

/// Draws train, validation, test and source sets. Deterministic in `rng`.
pub fn generate_task(spec: &TaskSpec, rng: &RandomSource) -> Result<TaskData> {
    spec.validate()?;
    let target = Generator::target(spec, rng)?;
    let source = target.source(spec, rng)?;
    let draw = |g: &Generator, count, split, label: &str| {
        g.sample(spec, count, split, &mut rng.derive(label))
    };
    Ok(TaskData {
        train: draw(&target, spec.train, Split::Train, "train")?,
        validation: draw(&target, spec.validation, Split::Validation, "validation")?,
        test: draw(&target, spec.test, Split::Test, "test")?,
        source: draw(&source, spec.source, Split::Source, "source")?,
    })
}

/// Disjoint client shards covering a dataset.
#[derive(Debug, Clone)]
pub struct Partition {
    shards: Vec<Dataset>,
    indices: Vec<Vec<usize>>,
}

impl Partition {
    pub fn shards(&self) -> &[Dataset] {
        &self.shards
    }

    /// Source-dataset indices of each shard, ascending.
    pub fn indices(&self) -> &[Vec<usize>] {
        &self.indices
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Dataset::len).collect()
    }

    pub fn total(&self) -> usize {
        self.sizes().iter().sum()
    }

    pub fn len(&self) -> usize {
        self.shards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }
}

const MAX_PARTITION_ATTEMPTS: usize = 100;

/// Splits `ds` over `clients` shards. Within every group the client
/// proportions follow `Dirichlet(alpha, …, alpha)`; small `alpha` gives
/// skewed shards, large `alpha` near-equal ones. Draws are repeated until
/// every client holds at least one sample.
pub fn partition_dirichlet(ds: &Dataset, clients: usize, alpha: f64, rng: &RandomSource) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if ds.len() < clients {
        return Err(Error::Infeasible(format!(
            "{} samples cannot cover {clients} clients",
            ds.len()
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if clients == 1 {
        let all: Vec<usize> = (0..ds.len()).collect();
        return Ok(Partition {
            shards: vec![ds.subset(&all)],
            indices: vec![all],
        });
    }
    let group_count = ds.groups().iter().max().map_or(0, |g| g + 1);
    let mut by_group = vec![Vec::new(); group_count];
    for (i, &g) in ds.groups().iter().enumerate() {
        by_group[g].push(i);
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("dirichlet: {e}")))?;
    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut rng = rng.derive(format!("attempt-{attempt}"));
        let mut indices = vec![Vec::new(); clients];
        for members in &by_group {
            if members.is_empty() {
                continue;
            }
            let mut members = members.clone();
            members.shuffle(&mut rng);
            // Normalised independent Gamma(alpha, 1) draws are Dirichlet(alpha).
            let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
            let sum: f64 = draws.iter().sum();
            let p: Vec<f64> = if sum > 0.0 {
                draws.iter().map(|d| d / sum).collect()
            } else {
                vec![1.0 / clients as f64; clients]
            };
            let n = members.len();
            let mut cum = 0.0;
            let mut start = 0;
            for (client, share) in p.iter().enumerate() {
                cum += share;
                let end = if client + 1 == clients {
                    n
                } else {
                    ((cum * n as f64).floor() as usize).clamp(start, n)
                };
                indices[client].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if indices.iter().all(|s| !s.is_empty()) {
            for s in &mut indices {
                s.sort_unstable();
            }
            let shards = indices.iter().map(|idx| ds.subset(idx)).collect();
            return Ok(Partition { shards, indices });
        }
    }
    Err(Error::Infeasible(format!(
        "no draw gave all {clients} clients a sample after {MAX_PARTITION_ATTEMPTS} attempts"
    )))
}
