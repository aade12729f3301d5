//! Per-layer latent selection variables: posterior logits, Gumbel-Softmax
//! sampling, priors and KL terms, aggregated posteriors, utilization,
//! effective depth, and threshold pruning.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicBool, Ordering};

use crate::tensor::Tensor;

/// Soft gates stay in the open unit interval; hard gates are exactly 0 or 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    Soft,
    Hard,
}

/// Gumbel-Softmax sampling configuration. Identical seeds give identical
/// noise sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub seed: u64,
    pub mode: GateMode,
}

impl GumbelConfig {
    pub fn soft(temperature: f64, seed: u64) -> Self {
        assert!(temperature > 0.0, "gumbel: temperature must be positive");
        GumbelConfig {
            temperature,
            seed,
            mode: GateMode::Soft,
        }
    }
}

/// Prior over gate variables for the KL term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PriorSpec {
    /// Beta(1,1): prior selection probability 1/2.
    Uniform,
    /// Beta(a,b), reduced to a fixed Bernoulli prior with p = a/(a+b).
    Beta { a: f64, b: f64 },
    /// The task-averaged posterior, treated as a constant each outer step.
    AggregatedPosterior,
}

impl PriorSpec {
    pub fn beta(a: f64, b: f64) -> Self {
        assert!(a > 0.0 && b > 0.0, "prior: Beta parameters must be positive");
        PriorSpec::Beta { a, b }
    }

    /// The Bernoulli selection probability this prior induces. Aggregated
    /// priors need the detached aggregate supplied by the caller.
    pub fn prob(&self, aggregate: Option<f64>) -> f64 {
        match self {
            PriorSpec::Uniform => 0.5,
            PriorSpec::Beta { a, b } => a / (a + b),
            PriorSpec::AggregatedPosterior => {
                aggregate.expect("prior: aggregated posterior requires the aggregate probability")
            }
        }
    }
}

/// Variational parameters: one logit pair per (task, layer). Single-task use
/// is `num_tasks == 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTable {
    num_tasks: usize,
    num_layers: usize,
    /// One (L,2) tensor per task; column 0 is "skip", column 1 is "select".
    logits: Vec<Tensor>,
}

impl PosteriorTable {
    /// All-zero logits: every selection probability starts at 1/2.
    pub fn new(num_tasks: usize, num_layers: usize) -> Self {
        assert!(num_tasks > 0 && num_layers > 0, "posterior: empty table");
        PosteriorTable {
            num_tasks,
            num_layers,
            logits: (0..num_tasks).map(|_| Tensor::zeros(vec![num_layers, 2])).collect(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn logits(&self, task: usize) -> &Tensor {
        &self.logits[task]
    }

    pub fn logits_mut(&mut self, task: usize) -> &mut Tensor {
        &mut self.logits[task]
    }

    pub fn pair(&self, task: usize, layer: usize) -> (f64, f64) {
        let d = self.logits[task].data();
        (d[layer * 2], d[layer * 2 + 1])
    }

    pub fn set_pair(&mut self, task: usize, layer: usize, pair: (f64, f64)) {
        let d = self.logits[task].data_mut();
        d[layer * 2] = pair.0;
        d[layer * 2 + 1] = pair.1;
    }

    pub fn selection_probability(&self, task: usize, layer: usize) -> f64 {
        selection_probability(self.pair(task, layer))
    }

    /// Selection probabilities of every layer for one task.
    pub fn pi_vector(&self, task: usize) -> Vec<f64> {
        (0..self.num_layers)
            .map(|l| self.selection_probability(task, l))
            .collect()
    }

    /// Expected number of selected layers for one task.
    pub fn effective_depth(&self, task: usize) -> f64 {
        self.pi_vector(task).iter().sum()
    }

    /// Task-averaged selection probability of one layer (Eq. of the
    /// aggregated posterior); constant with respect to gradients.
    pub fn aggregate_posterior(&self, layer: usize) -> f64 {
        (0..self.num_tasks)
            .map(|n| self.selection_probability(n, layer))
            .sum::<f64>()
            / self.num_tasks as f64
    }

    pub fn aggregate_vector(&self) -> Vec<f64> {
        (0..self.num_layers).map(|l| self.aggregate_posterior(l)).collect()
    }

    /// Keep mask: layer kept iff its selection probability meets the
    /// threshold. Threshold 0.5 reproduces `sample_hard`.
    pub fn prune(&self, task: usize, keep_threshold: f64) -> Vec<bool> {
        assert!(
            (0.0..=1.0).contains(&keep_threshold),
            "prune: threshold {} outside [0,1]",
            keep_threshold
        );
        self.pi_vector(task)
            .iter()
            .map(|pi| *pi >= keep_threshold)
            .collect()
    }

    /// Deterministic hard gates for one task (argmax of each logit pair).
    pub fn hard_gates(&self, task: usize) -> Vec<f64> {
        (0..self.num_layers)
            .map(|l| sample_hard(self.pair(task, l)))
            .collect()
    }
}

/// Per-layer gate values drawn for one task and mini-batch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateSample {
    pub values: Vec<f64>,
    pub task: usize,
    pub draw: u64,
    pub mode: GateMode,
}

/// Per-layer utilization and expected depth at one training step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UtilizationRecord {
    pub step: u64,
    pub utilization: Vec<f64>,
    pub effective_depth: f64,
}

/// Deterministic class-1 probability of a logit pair:
/// exp(a1) / (exp(a0) + exp(a1)).
pub fn selection_probability(pair: (f64, f64)) -> f64 {
    sigmoid(pair.1 - pair.0)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary Gumbel-Softmax sample with explicit noise, Eq. form
/// z = exp((a1+e1)/tau) / (exp((a0+e0)/tau) + exp((a1+e1)/tau)).
/// Clamped into the open interval so soft gates never reach 0 or 1 exactly.
pub fn sample_soft(pair: (f64, f64), noise: (f64, f64), temperature: f64) -> f64 {
    assert!(temperature > 0.0, "sample_soft: temperature must be positive");
    let z = sigmoid(((pair.1 + noise.1) - (pair.0 + noise.0)) / temperature);
    z.clamp(1e-12, 1.0 - 1e-12)
}

/// Soft sample drawing fresh Gumbel(0,1) noise from `rng`.
pub fn sample_soft_rng<R: Rng>(pair: (f64, f64), temperature: f64, rng: &mut R) -> f64 {
    let (e0, e1) = gumbel_noise_pair(rng);
    sample_soft(pair, (e0, e1), temperature)
}

/// Deterministic hard gate: 1 iff a1 > a0, with ties resolved to select.
pub fn sample_hard(pair: (f64, f64)) -> f64 {
    if pair.1 >= pair.0 {
        1.0
    } else {
        0.0
    }
}

pub fn gumbel_noise_pair<R: Rng>(rng: &mut R) -> (f64, f64) {
    let g = Gumbel::new(0.0, 1.0).expect("gumbel(0,1)");
    (g.sample(rng), g.sample(rng))
}

/// A flat vector of `n` Gumbel(0,1) draws.
pub fn gumbel_noise_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let g = Gumbel::new(0.0, 1.0).expect("gumbel(0,1)");
    (0..n).map(|_| g.sample(rng)).collect()
}

/// Stateless stream derivation: a generator keyed by the base seed plus any
/// number of tags (task id, stack id, step counters). Every (seed, tags)
/// combination yields an independent, reproducible stream, so task order
/// never perturbs another task's draws and resumed runs replay exactly.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        state = splitmix64(state ^ t);
    }
    ChaCha8Rng::seed_from_u64(splitmix64(state))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

static KL_CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

/// Analytic Bernoulli-Bernoulli KL of posterior probability `pi` against the
/// prior's induced Bernoulli probability. Probabilities at exactly 0 or 1
/// are clamped to [1e-6, 1-1e-6] (warned once).
pub fn kl_to_prior(pi: f64, prior: PriorSpec, aggregate: Option<f64>) -> f64 {
    let p = prior.prob(aggregate);
    if !(pi > 0.0 && pi < 1.0 && p > 0.0 && p < 1.0)
        && !KL_CLAMP_WARNED.swap(true, Ordering::Relaxed)
    {
        eprintln!("latent-depth: clamping degenerate probability in KL term (warned once)");
    }
    let q = pi.clamp(1e-6, 1.0 - 1e-6);
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln()
}

/// Mean of the current step's gate values for one layer across tasks:
/// u_l = sum_n z_l^(n) / N.
pub fn utilization(samples: &[GateSample], layer: usize) -> f64 {
    assert!(!samples.is_empty(), "utilization: no samples");
    samples.iter().map(|s| s.values[layer]).sum::<f64>() / samples.len() as f64
}

/// Per-layer utilization across all layers.
pub fn utilization_vector(samples: &[GateSample]) -> Vec<f64> {
    let layers = samples[0].values.len();
    (0..layers).map(|l| utilization(samples, l)).collect()
}
