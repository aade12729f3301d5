//! Two-level first-order training: model weights updated every inner
//! iteration, posterior logits updated once per outer step from the last
//! inner iteration's gradient (the multi-step loss special case with weight
//! 1 on the final step).
//!
//! Multi-task runs are round-robin in fixed config order; each inner
//! iteration consumes one batch per task and applies a single accumulated
//! weight update. All noise and shuffling comes from counter-keyed streams,
//! so identical configurations replay bitwise and checkpoints resume
//! exactly.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::diagnostics::UtilizationRow;
use crate::gate::{
    derive_rng, gumbel_noise_vec, utilization_vector, GateMode, GateSample, GumbelConfig,
    PosteriorTable, PriorSpec, UtilizationRecord,
};
use crate::loss::{kl_anneal, total_loss, LossBreakdown, LossConfig};
use crate::model::{
    forward_seq2seq, register_params, sequence_nll, GatingMode, ModelParameters, StackConfig,
    StackGates, StackId,
};
use crate::tape::{NodeId, Op, Tape};
use crate::tasks::{BatchStream, Corpus, Split, StreamState};
use crate::tensor::Tensor;

const TAG_GUMBEL: u64 = 0x6;
const TAG_DROP: u64 = 0xD;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Outer steps T.
    pub outer_steps: u64,
    /// Inner-loop frequency I.
    pub inner_loop: u64,
    /// Peak learning rate for the inverse-square-root schedule, shared by
    /// the weight and posterior updates.
    pub lr: f64,
    pub warmup_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Sequences per task per batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Global-norm gradient clip; applied to weight and posterior gradients
    /// separately.
    pub clip_norm: f64,
    /// Multiplier on the shared learning rate for posterior-logit updates.
    /// 1.0 follows the single-eta schedule; desk-scale runs with few hundred
    /// updates raise it so gate posteriors can traverse their logit range
    /// within the horizon.
    pub alpha_lr_scale: f64,
    /// Validation cadence in outer steps; 0 disables periodic validation.
    pub validate_every: u64,
    /// Checkpoint cadence in outer steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Utilization snapshot cadence in outer steps.
    pub snapshot_every: u64,
    pub max_consecutive_skips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            outer_steps: 100,
            inner_loop: 1,
            lr: 3e-3,
            warmup_steps: 400,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            batch_size: 8,
            seed: 1,
            clip_norm: 1.0,
            alpha_lr_scale: 1.0,
            validate_every: 200,
            checkpoint_every: 0,
            snapshot_every: 10,
            max_consecutive_skips: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) {
        assert!(self.outer_steps >= 1, "train: outer_steps must be at least 1");
        assert!(self.inner_loop >= 1, "train: inner_loop must be at least 1");
        assert!(self.lr >= 0.0, "train: learning rate must be nonnegative");
        assert!(self.warmup_steps >= 1, "train: warmup_steps must be at least 1");
        assert!(self.batch_size >= 1, "train: batch_size must be at least 1");
        assert!(self.clip_norm > 0.0, "train: clip_norm must be positive");
        assert!(self.alpha_lr_scale > 0.0, "train: alpha_lr_scale must be positive");
    }
}

/// Inverse-square-root decay with linear warmup; `update` is 1-based.
pub fn lr_at(cfg: &TrainConfig, update: u64) -> f64 {
    let u = update.max(1) as f64;
    let w = cfg.warmup_steps as f64;
    cfg.lr * (u / w).min((w / u).sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    fn like(t: &Tensor) -> Self {
        AdamState {
            m: vec![0.0; t.numel()],
            v: vec![0.0; t.numel()],
            t: 0,
        }
    }

    fn update(&mut self, cfg: &TrainConfig, lr: f64, param: &mut Tensor, grad: &[f64]) {
        assert!(
            self.m.len() == param.numel() && grad.len() == param.numel(),
            "adam: state/gradient shapes do not match the parameter ({} / {} / {})",
            self.m.len(),
            grad.len(),
            param.numel()
        );
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let data = param.data_mut();
        for i in 0..data.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            data[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

/// One metrics-log row: loss decomposition for one task at one weight
/// update.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub task: usize,
    pub nll: f64,
    pub kl: f64,
    pub depth_loss: f64,
    pub beta_effective: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ValidationRow {
    pub step: u64,
    pub task: usize,
    pub nll: f64,
    pub accuracy: f64,
    pub effective_depth_enc: f64,
    pub effective_depth_dec: f64,
}

#[derive(Debug)]
pub enum TrainError {
    /// More than the allowed number of consecutive skipped steps.
    Diverged { outer_step: u64, last_finite_total: Option<f64> },
    Io(std::io::Error),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Diverged {
                outer_step,
                last_finite_total,
            } => write!(
                f,
                "training diverged at outer step {} (last finite total: {})",
                outer_step,
                last_finite_total.map_or("none".into(), |v| v.to_string())
            ),
            TrainError::Io(e) => write!(f, "i/o error during training: {}", e),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e)
    }
}

/// Everything needed to restart a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model_cfg: StackConfig,
    pub train_cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    pub gumbel_cfg: GumbelConfig,
    pub params: ModelParameters,
    pub enc_posterior: Option<PosteriorTable>,
    pub dec_posterior: Option<PosteriorTable>,
    pub adam_theta: BTreeMap<String, AdamState>,
    pub adam_alpha: BTreeMap<String, AdamState>,
    pub outer_step: u64,
    pub inner_updates: u64,
    pub stream_states: Vec<StreamState>,
    pub agg_enc: Option<Vec<f64>>,
    pub agg_dec: Option<Vec<f64>>,
    pub consecutive_skips: usize,
    pub total_skips: u64,
    pub clip_events: u64,
    pub corpus_seed: u64,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec(self).expect("checkpoint serializes"))
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("invalid checkpoint {}: {}", path.display(), e),
            )
        })
    }
}

pub struct Trainer {
    pub model_cfg: StackConfig,
    pub train_cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    pub gumbel_cfg: GumbelConfig,
    pub corpus: Corpus,
    pub params: ModelParameters,
    pub enc_posterior: Option<PosteriorTable>,
    pub dec_posterior: Option<PosteriorTable>,
    adam_theta: BTreeMap<String, AdamState>,
    adam_alpha: BTreeMap<String, AdamState>,
    pub outer_step: u64,
    pub inner_updates: u64,
    stream_states: Vec<StreamState>,
    agg_enc: Option<Vec<f64>>,
    agg_dec: Option<Vec<f64>>,
    pending_alpha_grads: Option<Vec<(StackId, usize, Vec<f64>)>>,
    consecutive_skips: usize,
    pub total_skips: u64,
    pub clip_events: u64,
    last_samples: Vec<Option<GateSample>>,
    pub metrics: Vec<MetricsRow>,
    pub validations: Vec<ValidationRow>,
    pub history: Vec<UtilizationRow>,
    pub utilization_records: Vec<UtilizationRecord>,
    pub incidents: Vec<String>,
}

impl Trainer {
    pub fn new(
        model_cfg: StackConfig,
        train_cfg: TrainConfig,
        mut loss_cfg: LossConfig,
        gumbel_cfg: GumbelConfig,
        corpus: Corpus,
    ) -> Self {
        model_cfg.validate();
        train_cfg.validate();
        loss_cfg.validate();
        let n = corpus.num_tasks();
        assert!(n >= 1, "trainer: corpus has no tasks");
        let enc_posterior = match model_cfg.encoder_gating {
            GatingMode::Latent => Some(PosteriorTable::new(n, model_cfg.encoder_layers)),
            _ => None,
        };
        let dec_posterior = match model_cfg.decoder_gating {
            GatingMode::Latent => Some(PosteriorTable::new(n, model_cfg.decoder_layers)),
            _ => None,
        };
        if enc_posterior.is_none() && dec_posterior.is_none() {
            // No latent stack: there is no utilization to regularize.
            loss_cfg.lambda = 0.0;
            loss_cfg.target_depth = 0.0;
        }
        let params = ModelParameters::init(&model_cfg, train_cfg.seed);
        let adam_theta = params
            .iter()
            .map(|(name, t)| (name.clone(), AdamState::like(t)))
            .collect();
        let mut adam_alpha = BTreeMap::new();
        for (stack, table) in [
            (StackId::Encoder, &enc_posterior),
            (StackId::Decoder, &dec_posterior),
        ] {
            if let Some(table) = table {
                for task in 0..n {
                    adam_alpha.insert(
                        alpha_key(stack, task),
                        AdamState::like(table.logits(task)),
                    );
                }
            }
        }
        let agg_enc = enc_posterior.as_ref().map(|t| t.aggregate_vector());
        let agg_dec = dec_posterior.as_ref().map(|t| t.aggregate_vector());
        Trainer {
            model_cfg,
            train_cfg,
            loss_cfg,
            gumbel_cfg,
            corpus,
            params,
            enc_posterior,
            dec_posterior,
            adam_theta,
            adam_alpha,
            outer_step: 0,
            inner_updates: 0,
            stream_states: vec![StreamState { epoch: 0, cursor: 0 }; n],
            agg_enc,
            agg_dec,
            pending_alpha_grads: None,
            consecutive_skips: 0,
            total_skips: 0,
            clip_events: 0,
            last_samples: vec![None; n],
            metrics: Vec::new(),
            validations: Vec::new(),
            history: Vec::new(),
            utilization_records: Vec::new(),
            incidents: Vec::new(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.corpus.num_tasks()
    }

    /// The stack whose utilization the depth loss targets: the latent
    /// decoder when present, otherwise the latent encoder.
    pub fn depth_stack(&self) -> Option<StackId> {
        if self.dec_posterior.is_some() {
            Some(StackId::Decoder)
        } else if self.enc_posterior.is_some() {
            Some(StackId::Encoder)
        } else {
            None
        }
    }

    fn posterior(&self, stack: StackId) -> Option<&PosteriorTable> {
        match stack {
            StackId::Encoder => self.enc_posterior.as_ref(),
            StackId::Decoder => self.dec_posterior.as_ref(),
        }
    }

    fn aggregate(&self, stack: StackId) -> Option<&Vec<f64>> {
        match stack {
            StackId::Encoder => self.agg_enc.as_ref(),
            StackId::Decoder => self.agg_dec.as_ref(),
        }
    }

    fn prior_vec(&self, stack: StackId, layers: usize) -> Vec<f64> {
        match self.loss_cfg.prior {
            PriorSpec::Uniform => vec![0.5; layers],
            PriorSpec::Beta { a, b } => vec![a / (a + b); layers],
            PriorSpec::AggregatedPosterior => self
                .aggregate(stack)
                .expect("aggregated prior requires a latent stack")
                .clone(),
        }
    }

    fn next_batch(&mut self, task: usize) -> crate::model::PaddedBatch {
        let mut stream = BatchStream::new(
            &self.corpus,
            task,
            self.train_cfg.batch_size,
            self.train_cfg.seed,
        );
        stream.restore(self.stream_states[task]);
        let batch = stream.next_batch();
        self.stream_states[task] = stream.state();
        batch
    }

    /// Gate values for evaluation: selection probabilities (soft) or argmax
    /// (hard) for latent stacks, all-ones otherwise (layerdrop included).
    pub fn eval_gates(&self, task: usize, mode: GateMode) -> (Vec<f64>, Vec<f64>) {
        let make = |table: Option<&PosteriorTable>, layers: usize| match table {
            Some(t) => match mode {
                GateMode::Soft => t.pi_vector(task),
                GateMode::Hard => t.hard_gates(task),
            },
            None => vec![1.0; layers],
        };
        (
            make(self.enc_posterior.as_ref(), self.model_cfg.encoder_layers),
            make(self.dec_posterior.as_ref(), self.model_cfg.decoder_layers),
        )
    }

    /// One inner iteration: a pass over all tasks, one accumulated weight
    /// update. Returns the per-task loss decompositions, or None when the
    /// step was skipped because a component went non-finite.
    pub fn inner_step(&mut self, inner_index: u64) -> Result<Option<Vec<LossBreakdown>>, TrainError> {
        let n = self.num_tasks();
        let t = self.outer_step + 1;
        let update_index = self.inner_updates + 1;
        let is_last_inner = inner_index == self.train_cfg.inner_loop;
        let beta_eff = kl_anneal(update_index, &self.loss_cfg);

        let mut tape = Tape::new();
        let nodes = register_params(&mut tape, &self.params);

        // Per latent stack: one alpha leaf and one relaxed gate vector per
        // task, sampled all at once for this mini-batch.
        let mut alpha_nodes: BTreeMap<(u64, usize), NodeId> = BTreeMap::new();
        let mut z_nodes: BTreeMap<(u64, usize), NodeId> = BTreeMap::new();
        for stack in [StackId::Encoder, StackId::Decoder] {
            if let Some(table) = self.posterior(stack) {
                let layers = table.num_layers();
                for task in 0..n {
                    let alpha = tape.param(table.logits(task).clone());
                    let mut rng = derive_rng(
                        self.gumbel_cfg.seed,
                        &[TAG_GUMBEL, stack.tag(), task as u64, t, inner_index],
                    );
                    let noise = gumbel_noise_vec(&mut rng, 2 * layers);
                    let z = tape.apply(
                        Op::GumbelGate {
                            noise: std::sync::Arc::new(noise),
                            tau: self.gumbel_cfg.temperature,
                        },
                        &[alpha],
                    );
                    alpha_nodes.insert((stack.tag(), task), alpha);
                    z_nodes.insert((stack.tag(), task), z);
                }
            }
        }

        let mut nll_nodes = Vec::with_capacity(n);
        let mut kl_nodes: Vec<Option<NodeId>> = Vec::with_capacity(n);
        for task in 0..n {
            let batch = self.next_batch(task);
            let gates_for = |stack: StackId, mode: &GatingMode| -> StackGatesOwned {
                match mode {
                    GatingMode::Static => StackGatesOwned::Static,
                    GatingMode::LayerDrop { p_drop } => {
                        let layers = match stack {
                            StackId::Encoder => self.model_cfg.encoder_layers,
                            StackId::Decoder => self.model_cfg.decoder_layers,
                        };
                        let mut rng = derive_rng(
                            self.train_cfg.seed,
                            &[TAG_DROP, stack.tag(), task as u64, t, inner_index],
                        );
                        use rand::Rng;
                        StackGatesOwned::Fixed(
                            (0..layers)
                                .map(|_| if rng.gen::<f64>() < *p_drop { 0.0 } else { 1.0 })
                                .collect(),
                        )
                    }
                    GatingMode::Latent => {
                        StackGatesOwned::Node(z_nodes[&(stack.tag(), task)])
                    }
                }
            };
            let enc_gates = gates_for(StackId::Encoder, &self.model_cfg.encoder_gating.clone());
            let dec_gates = gates_for(StackId::Decoder, &self.model_cfg.decoder_gating.clone());
            let trace = forward_seq2seq(
                &mut tape,
                &nodes,
                &self.model_cfg,
                &batch,
                enc_gates.borrow(),
                dec_gates.borrow(),
            );
            let nll = sequence_nll(&mut tape, trace.logits, &batch);
            nll_nodes.push(nll);

            // Analytic KL against the prior, summed over layers and latent
            // stacks; the aggregated prior enters as a detached constant.
            let mut kl: Option<NodeId> = None;
            for stack in [StackId::Encoder, StackId::Decoder] {
                if self.posterior(stack).is_some() {
                    let layers = self.posterior(stack).unwrap().num_layers();
                    let alpha = alpha_nodes[&(stack.tag(), task)];
                    let pi = tape.apply(Op::PairSigmoid, &[alpha]);
                    let prior = self.prior_vec(stack, layers);
                    let term = tape.apply(
                        Op::BernoulliKlSum {
                            prior: std::sync::Arc::new(prior),
                        },
                        &[pi],
                    );
                    kl = Some(match kl {
                        Some(acc) => tape.apply(Op::Add, &[acc, term]),
                        None => term,
                    });
                }
            }
            kl_nodes.push(kl);
        }

        // Task-mean data terms.
        let mean_over = |tape: &mut Tape, nodes: &[NodeId]| -> NodeId {
            let mut acc = nodes[0];
            for &other in &nodes[1..] {
                acc = tape.apply(Op::Add, &[acc, other]);
            }
            tape.apply(Op::Scale(1.0 / nodes.len() as f64), &[acc])
        };
        let nll_mean = mean_over(&mut tape, &nll_nodes);
        let kl_mean = if kl_nodes[0].is_some() {
            let kls: Vec<NodeId> = kl_nodes.iter().map(|k| k.unwrap()).collect();
            Some(mean_over(&mut tape, &kls))
        } else {
            None
        };

        // Utilization over the depth-target stack and the depth penalty.
        let depth_stack = self.depth_stack();
        let (depth_node, u_node) = match depth_stack {
            Some(stack) => {
                let zs: Vec<NodeId> = (0..n).map(|task| z_nodes[&(stack.tag(), task)]).collect();
                let u = mean_over(&mut tape, &zs);
                let total = tape.apply(Op::SumAll, &[u]);
                let depth = tape.apply(
                    Op::AbsDiff {
                        target: self.loss_cfg.target_depth,
                    },
                    &[total],
                );
                (Some(depth), Some(u))
            }
            None => (None, None),
        };

        // total = mean nll + beta_eff * mean kl + lambda * depth
        let mut objective = nll_mean;
        if let Some(kl) = kl_mean {
            let scaled = tape.apply(Op::Scale(beta_eff), &[kl]);
            objective = tape.apply(Op::Add, &[objective, scaled]);
        }
        if let Some(depth) = depth_node {
            let scaled = tape.apply(Op::Scale(self.loss_cfg.lambda), &[depth]);
            objective = tape.apply(Op::Add, &[objective, scaled]);
        }

        // Per-task decompositions; a non-finite component skips the step.
        let u_values: Vec<f64> = u_node
            .map(|u| tape.value(u).data().to_vec())
            .unwrap_or_default();
        let mut breakdowns = Vec::with_capacity(n);
        let mut failure: Option<String> = None;
        for task in 0..n {
            let nll_v = tape.value(nll_nodes[task]).item();
            let kl_v = kl_nodes[task].map_or(0.0, |k| tape.value(k).item());
            match total_loss(nll_v, kl_v, &u_values, &self.loss_cfg, update_index) {
                Ok(b) => breakdowns.push(b),
                Err(e) => {
                    failure = Some(format!("task {}: {}", task, e));
                    break;
                }
            }
        }
        if failure.is_none() && !tape.value(objective).item().is_finite() {
            failure = Some("objective: non-finite combined loss".into());
        }

        if let Some(reason) = failure {
            self.consecutive_skips += 1;
            self.total_skips += 1;
            let incident = format!(
                "step skipped at outer {} inner {}: {} (consecutive: {})",
                t, inner_index, reason, self.consecutive_skips
            );
            eprintln!("latent-depth: {}", incident);
            self.incidents.push(incident);
            if self.consecutive_skips > self.train_cfg.max_consecutive_skips {
                let last = self.metrics.last().map(|m| m.total);
                return Err(TrainError::Diverged {
                    outer_step: t,
                    last_finite_total: last,
                });
            }
            if is_last_inner {
                self.pending_alpha_grads = None;
            }
            return Ok(None);
        }
        self.consecutive_skips = 0;

        let grads = tape.backward(objective);

        // Clipped accumulated update for the standard parameters.
        let lr = lr_at(&self.train_cfg, update_index);
        let mut theta_grads: Vec<(String, Vec<f64>)> = Vec::new();
        for (name, node) in nodes.iter() {
            let g = grads
                .get(*node)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; self.params.get(name).numel()]);
            theta_grads.push((name.clone(), g));
        }
        let scale = self.clip_scale(theta_grads.iter().map(|(_, g)| g.as_slice()));
        for (name, mut g) in theta_grads {
            if scale < 1.0 {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            let state = self.adam_theta.get_mut(&name).expect("adam state exists");
            state.update(&self.train_cfg, lr, self.params.get_mut(&name), &g);
        }
        self.inner_updates += 1;

        // Retain the posterior gradient only on the last inner iteration.
        if is_last_inner && !alpha_nodes.is_empty() {
            let mut pending = Vec::new();
            for stack in [StackId::Encoder, StackId::Decoder] {
                if self.posterior(stack).is_some() {
                    for task in 0..n {
                        let node = alpha_nodes[&(stack.tag(), task)];
                        let g = grads
                            .get(node)
                            .map(|g| g.to_vec())
                            .unwrap_or_else(|| {
                                vec![0.0; self.posterior(stack).unwrap().logits(task).numel()]
                            });
                        pending.push((stack, task, g));
                    }
                }
            }
            self.pending_alpha_grads = Some(pending);
        }

        // Record the drawn gates for utilization snapshots.
        if let Some(stack) = depth_stack {
            for task in 0..n {
                let z = tape.value(z_nodes[&(stack.tag(), task)]).data().to_vec();
                self.last_samples[task] = Some(GateSample {
                    values: z,
                    task,
                    draw: self.inner_updates,
                    mode: GateMode::Soft,
                });
            }
        }

        for (task, b) in breakdowns.iter().enumerate() {
            self.metrics.push(MetricsRow {
                step: self.inner_updates,
                task,
                nll: b.nll,
                kl: b.kl,
                depth_loss: b.depth_loss,
                beta_effective: b.beta_effective,
                total: b.total,
            });
        }
        Ok(Some(breakdowns))
    }

    fn clip_scale<'a>(&mut self, grads: impl Iterator<Item = &'a [f64]>) -> f64 {
        let mut sq = 0.0;
        for g in grads {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
        let norm = sq.sqrt();
        if norm > self.train_cfg.clip_norm {
            self.clip_events += 1;
            self.train_cfg.clip_norm / norm
        } else {
            1.0
        }
    }

    /// One outer step: I inner iterations, then a single posterior update
    /// from the last inner iteration's gradient, then the aggregated
    /// posterior snapshot refresh.
    pub fn outer_step(&mut self) -> Result<(), TrainError> {
        self.pending_alpha_grads = None;
        for i in 1..=self.train_cfg.inner_loop {
            self.inner_step(i)?;
        }
        if let Some(pending) = self.pending_alpha_grads.take() {
            let lr = lr_at(&self.train_cfg, self.inner_updates.max(1)) * self.train_cfg.alpha_lr_scale;
            let scale = self.clip_scale(pending.iter().map(|(_, _, g)| g.as_slice()));
            for (stack, task, mut g) in pending {
                if scale < 1.0 {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
                let key = alpha_key(stack, task);
                let state = self.adam_alpha.get_mut(&key).expect("alpha adam state");
                let table = match stack {
                    StackId::Encoder => self.enc_posterior.as_mut().unwrap(),
                    StackId::Decoder => self.dec_posterior.as_mut().unwrap(),
                };
                state.update(&self.train_cfg, lr, table.logits_mut(task), &g);
            }
        }
        self.agg_enc = self.enc_posterior.as_ref().map(|t| t.aggregate_vector());
        self.agg_dec = self.dec_posterior.as_ref().map(|t| t.aggregate_vector());
        self.outer_step += 1;
        Ok(())
    }

    /// Append one utilization snapshot per (task, layer) of the depth-target
    /// stack, using the latest drawn gates.
    pub fn snapshot_utilization(&mut self) {
        let Some(stack) = self.depth_stack() else { return };
        let n = self.num_tasks();
        if self.last_samples.iter().any(|s| s.is_none()) {
            return;
        }
        let table = self.posterior(stack).unwrap();
        let layers = table.num_layers();
        let mut rows = Vec::with_capacity(layers * n);
        for layer in 0..layers {
            let u: f64 = (0..n)
                .map(|task| self.last_samples[task].as_ref().unwrap().values[layer])
                .sum::<f64>()
                / n as f64;
            for task in 0..n {
                rows.push(UtilizationRow {
                    step: self.outer_step,
                    task,
                    layer,
                    pi: table.selection_probability(task, layer),
                    z: self.last_samples[task].as_ref().unwrap().values[layer],
                    u,
                });
            }
        }
        let samples: Vec<GateSample> = (0..n)
            .map(|task| self.last_samples[task].clone().unwrap())
            .collect();
        let utilization = utilization_vector(&samples);
        let effective_depth = (0..n)
            .map(|task| table.effective_depth(task))
            .sum::<f64>()
            / n as f64;
        self.history.extend(rows);
        self.utilization_records.push(UtilizationRecord {
            step: self.outer_step,
            utilization,
            effective_depth,
        });
    }

    /// Teacher-forced NLL, greedy-decode accuracy, and effective depth per
    /// task on the validation split, with soft (probability) gates.
    pub fn validate_now(&mut self, with_accuracy: bool) -> Vec<ValidationRow> {
        let mut rows = Vec::new();
        for task in 0..self.num_tasks() {
            let (enc, dec) = self.eval_gates(task, GateMode::Soft);
            let nll = crate::tasks::eval_nll(
                &self.params,
                &self.model_cfg,
                &self.corpus,
                task,
                Split::Valid,
                &enc,
                &dec,
            );
            let accuracy = if with_accuracy {
                crate::tasks::token_accuracy(
                    &self.params,
                    &self.model_cfg,
                    &self.corpus,
                    task,
                    Split::Valid,
                    &enc,
                    &dec,
                )
            } else {
                f64::NAN
            };
            let row = ValidationRow {
                step: self.outer_step,
                task,
                nll,
                accuracy,
                effective_depth_enc: self
                    .enc_posterior
                    .as_ref()
                    .map_or(self.model_cfg.encoder_layers as f64, |t| t.effective_depth(task)),
                effective_depth_dec: self
                    .dec_posterior
                    .as_ref()
                    .map_or(self.model_cfg.decoder_layers as f64, |t| t.effective_depth(task)),
            };
            rows.push(row);
            self.validations.push(row);
        }
        rows
    }

    /// Run the full loop: T outer steps with utilization snapshots,
    /// periodic validation, and checkpoints under `run_dir` when given.
    pub fn train(&mut self, run_dir: Option<&Path>) -> Result<(), TrainError> {
        while self.outer_step < self.train_cfg.outer_steps {
            self.outer_step()?;
            let t = self.outer_step;
            if self.train_cfg.snapshot_every > 0
                && (t % self.train_cfg.snapshot_every == 0 || t == self.train_cfg.outer_steps)
            {
                self.snapshot_utilization();
            }
            if self.train_cfg.validate_every > 0 && t % self.train_cfg.validate_every == 0 {
                self.validate_now(true);
            }
            if let Some(dir) = run_dir {
                if self.train_cfg.checkpoint_every > 0 && t % self.train_cfg.checkpoint_every == 0
                {
                    self.checkpoint()
                        .save(&dir.join("checkpoints").join(format!("step{:06}.json", t)))?;
                }
            }
        }
        if let Some(dir) = run_dir {
            self.checkpoint().save(&dir.join("checkpoints").join("final.json"))?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model_cfg: self.model_cfg.clone(),
            train_cfg: self.train_cfg.clone(),
            loss_cfg: self.loss_cfg.clone(),
            gumbel_cfg: self.gumbel_cfg.clone(),
            params: self.params.clone(),
            enc_posterior: self.enc_posterior.clone(),
            dec_posterior: self.dec_posterior.clone(),
            adam_theta: self.adam_theta.clone(),
            adam_alpha: self.adam_alpha.clone(),
            outer_step: self.outer_step,
            inner_updates: self.inner_updates,
            stream_states: self.stream_states.clone(),
            agg_enc: self.agg_enc.clone(),
            agg_dec: self.agg_dec.clone(),
            consecutive_skips: self.consecutive_skips,
            total_skips: self.total_skips,
            clip_events: self.clip_events,
            corpus_seed: self.corpus.seed,
        }
    }

    /// Rebuild a trainer from a checkpoint and the corpus it was trained on.
    /// Continuing reproduces the uninterrupted run bitwise.
    pub fn from_checkpoint(ckpt: Checkpoint, corpus: Corpus) -> Self {
        assert_eq!(
            ckpt.version, CHECKPOINT_VERSION,
            "checkpoint: version {} not supported",
            ckpt.version
        );
        assert_eq!(
            ckpt.corpus_seed, corpus.seed,
            "checkpoint: corpus seed mismatch"
        );
        assert_eq!(
            ckpt.stream_states.len(),
            corpus.num_tasks(),
            "checkpoint: task count mismatch"
        );
        let n = corpus.num_tasks();
        Trainer {
            model_cfg: ckpt.model_cfg,
            train_cfg: ckpt.train_cfg,
            loss_cfg: ckpt.loss_cfg,
            gumbel_cfg: ckpt.gumbel_cfg,
            corpus,
            params: ckpt.params,
            enc_posterior: ckpt.enc_posterior,
            dec_posterior: ckpt.dec_posterior,
            adam_theta: ckpt.adam_theta,
            adam_alpha: ckpt.adam_alpha,
            outer_step: ckpt.outer_step,
            inner_updates: ckpt.inner_updates,
            stream_states: ckpt.stream_states,
            agg_enc: ckpt.agg_enc,
            agg_dec: ckpt.agg_dec,
            pending_alpha_grads: None,
            consecutive_skips: ckpt.consecutive_skips,
            total_skips: ckpt.total_skips,
            clip_events: ckpt.clip_events,
            last_samples: vec![None; n],
            metrics: Vec::new(),
            validations: Vec::new(),
            history: Vec::new(),
            utilization_records: Vec::new(),
            incidents: Vec::new(),
        }
    }
}

fn alpha_key(stack: StackId, task: usize) -> String {
    format!("alpha.{}.task{}", stack.prefix(), task)
}

/// Owned variant of [`StackGates`] so gate vectors can be built per task
/// before borrowing into the forward pass.
enum StackGatesOwned {
    Static,
    Fixed(Vec<f64>),
    Node(NodeId),
}

impl StackGatesOwned {
    fn borrow(&self) -> StackGates<'_> {
        match self {
            StackGatesOwned::Static => StackGates::Static,
            StackGatesOwned::Fixed(v) => StackGates::Fixed(v),
            StackGatesOwned::Node(n) => StackGates::Node(*n),
        }
    }
}

/// Format metrics rows as the canonical CSV.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,task,nll,kl,depth_loss,beta_effective,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.task, r.nll, r.kl, r.depth_loss, r.beta_effective, r.total
        ));
    }
    out
}

pub fn validations_to_csv(rows: &[ValidationRow]) -> String {
    let mut out = String::from("step,task,nll,accuracy,effective_depth_enc,effective_depth_dec\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.task, r.nll, r.accuracy, r.effective_depth_enc, r.effective_depth_dec
        ));
    }
    out
}
