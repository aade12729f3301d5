//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `cargo test --test acceptance -- --nocapture` to see them).
//!
//! Training runs are cached and shared across criteria within the process,
//! keyed by their full configuration.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use latent_depth::diagnostics::{discreteness_score, gradient_scaling_probe, GateAssignment};
use latent_depth::gate::{GateMode, GumbelConfig, PriorSpec};
use latent_depth::loss::{AnnealSchedule, LossConfig};
use latent_depth::model::{
    forward_seq2seq, register_params, sequence_nll, GatingMode, ModelParameters, NormMode,
    StackConfig, StackGates, StackId,
};
use latent_depth::tape::Tape;
use latent_depth::tasks::{
    self, generate_corpus, pad_batch, preset_specs, Example, Split, Vocab,
};
use latent_depth::trainer::{TrainConfig, TrainError, Trainer};

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

fn report(criterion: &str, pass: bool, detail: &str) {
    println!("[{}] {}: {}", if pass { "PASS" } else { "FAIL" }, criterion, detail);
    assert!(pass, "{} failed: {}", criterion, detail);
}

#[derive(Clone, Debug)]
struct RunSpec {
    preset: &'static str,
    norm: NormMode,
    enc_layers: usize,
    dec_layers: usize,
    dim: usize,
    ffn: usize,
    heads: usize,
    dec_gating: GatingMode,
    beta: f64,
    lambda: f64,
    target_depth: f64,
    prior: PriorSpec,
    anneal_warmup: u64,
    outer_steps: u64,
    inner_loop: u64,
    seed: u64,
    lr: f64,
    warmup: u64,
    batch: usize,
    temperature: f64,
    init_scale: f64,
    alpha_lr_scale: f64,
}

impl RunSpec {
    fn key(&self) -> String {
        format!("{:?}", self)
    }

    fn build(&self) -> Trainer {
        let vocab = Vocab::new(32, 4);
        let specs = preset_specs(self.preset, &vocab, self.seed).expect("preset");
        let corpus = generate_corpus(&specs, &vocab, self.seed);
        let model = StackConfig {
            encoder_layers: self.enc_layers,
            decoder_layers: self.dec_layers,
            model_dim: self.dim,
            ffn_dim: self.ffn,
            heads: self.heads,
            vocab: vocab.size,
            norm_mode: self.norm,
            encoder_gating: GatingMode::Static,
            decoder_gating: self.dec_gating,
            branch_init_scale: self.init_scale,
        };
        let train = TrainConfig {
            outer_steps: self.outer_steps,
            inner_loop: self.inner_loop,
            lr: self.lr,
            warmup_steps: self.warmup,
            batch_size: self.batch,
            seed: self.seed,
            validate_every: 0,
            checkpoint_every: 0,
            snapshot_every: 20,
            alpha_lr_scale: self.alpha_lr_scale,
            ..TrainConfig::default()
        };
        let loss = LossConfig {
            beta: self.beta,
            lambda: self.lambda,
            target_depth: self.target_depth,
            prior: self.prior,
            anneal: if self.anneal_warmup == 0 {
                AnnealSchedule::None
            } else {
                AnnealSchedule::Linear { warmup_steps: self.anneal_warmup }
            },
        };
        let gumbel = GumbelConfig::soft(self.temperature, self.seed);
        Trainer::new(model, train, loss, gumbel, corpus)
    }
}

struct RunOutcome {
    trainer: Trainer,
    diverged: bool,
    /// Per-task held-out (valid) NLL with soft gates.
    valid_nll: Vec<f64>,
    /// Per-task held-out greedy-decode token accuracy with soft gates.
    valid_acc: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn run_cached(spec: &RunSpec) -> Arc<RunOutcome> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<RunOutcome>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().unwrap().get(&spec.key()) {
        return Arc::clone(hit);
    }
    // Train outside the lock so independent runs proceed in parallel.
    let mut trainer = spec.build();
    let diverged = match trainer.train(None) {
        Ok(()) => false,
        Err(TrainError::Diverged { .. }) => true,
        Err(e) => panic!("unexpected training error: {}", e),
    };
    let (valid_nll, valid_acc) = if diverged {
        (vec![f64::INFINITY; trainer.num_tasks()], vec![0.0; trainer.num_tasks()])
    } else {
        let rows = trainer.validate_now(true);
        (
            rows.iter().map(|r| r.nll).collect(),
            rows.iter().map(|r| r.accuracy).collect(),
        )
    };
    let outcome = Arc::new(RunOutcome {
        trainer,
        diverged,
        valid_nll,
        valid_acc,
    });
    cache
        .lock()
        .unwrap()
        .entry(spec.key())
        .or_insert_with(|| Arc::clone(&outcome));
    outcome
}

// Desk-scale benchmark settings shared by the training-based criteria.
mod tuning {
    /// M2O trend benchmark (criteria 5, 6, 7, 9, 11): 24 latent decoder
    /// layers on a narrow model.
    pub const M2O_DIM: usize = 32;
    pub const M2O_FFN: usize = 64;
    pub const M2O_HEADS: usize = 2;
    pub const M2O_STEPS: u64 = 400;
    pub const M2O_LR: f64 = 0.005;
    pub const M2O_WARMUP: u64 = 200;
    pub const M2O_BATCH: usize = 16;

    /// Deep no-norm trainability benchmark (criterion 4). The sub-layer
    /// output projections start at a reduced scale so the gated stack is in
    /// a healthy activation regime at z ~ 1/2; the static stack at the same
    /// initialization still sits in its exploding regime (4x the branch
    /// power).
    pub const C4_INIT_SCALE: f64 = 0.4;
    pub const C4_STEPS: u64 = 2500;
    pub const C4_LR: f64 = 0.005;
    pub const C4_WARMUP: u64 = 200;
    pub const C4_BETA: f64 = 1.0;
    pub const C4_LAMBDA: f64 = 0.0;

    /// Ablation benchmark (criterion 8).
    pub const C8_STEPS: u64 = 600;

    /// Posterior-logit learning-rate multiplier for benchmark runs: the
    /// desk-scale horizon is a few hundred updates, so gate logits need a
    /// faster schedule than the weights to traverse their range.
    pub const ALPHA_LR_SCALE: f64 = 10.0;

    pub const SEEDS: [u64; 3] = [1, 2, 3];
}

fn m2o_spec(seed: u64) -> RunSpec {
    RunSpec {
        preset: "m2o-diverse4",
        norm: NormMode::PreNorm,
        enc_layers: 2,
        dec_layers: 24,
        dim: tuning::M2O_DIM,
        ffn: tuning::M2O_FFN,
        heads: tuning::M2O_HEADS,
        dec_gating: GatingMode::Latent,
        beta: 1.0,
        lambda: 0.0,
        target_depth: 0.0,
        prior: PriorSpec::Uniform,
        anneal_warmup: 0,
        outer_steps: tuning::M2O_STEPS,
        inner_loop: 1,
        seed,
        lr: tuning::M2O_LR,
        warmup: tuning::M2O_WARMUP,
        batch: tuning::M2O_BATCH,
        temperature: 1.0,
        init_scale: 1.0,
        alpha_lr_scale: tuning::ALPHA_LR_SCALE,
    }
}

fn c4_spec(seed: u64, gating: GatingMode) -> RunSpec {
    RunSpec {
        preset: "o2m-diverse4",
        norm: NormMode::NoNorm,
        enc_layers: 6,
        dec_layers: 24,
        dim: 32,
        ffn: 64,
        heads: 2,
        dec_gating: gating,
        beta: tuning::C4_BETA,
        lambda: tuning::C4_LAMBDA,
        target_depth: 0.0,
        prior: PriorSpec::Uniform,
        anneal_warmup: 0,
        outer_steps: tuning::C4_STEPS,
        inner_loop: 1,
        seed,
        lr: tuning::C4_LR,
        warmup: tuning::C4_WARMUP,
        batch: 16,
        temperature: 1.0,
        init_scale: tuning::C4_INIT_SCALE,
        alpha_lr_scale: 1.0,
    }
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

/// Criterion 1: the gradient audit passes for every parameter group and all
/// gate scalars on a 4/4-layer d=64 toy model with soft gates and frozen
/// noise, relative tolerance 1e-4, in under 2 minutes.
#[test]
fn criterion_01_gradient_audit() {
    let start = Instant::now();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_latent-depth"))
        .args(["gradcheck", "--layers", "4", "--precision", "64", "--samples", "48"])
        .output()
        .expect("spawn gradcheck");
    let elapsed = start.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let pass = out.status.success() && stdout.contains("overall: PASS") && elapsed.as_secs() < 120;
    report(
        "criterion 1 (gradient audit)",
        pass,
        &format!("exit {:?}, {:.1}s", out.status.code(), elapsed.as_secs_f64()),
    );
}

/// Criterion 2: with all gates 0, the loss gradient at every layer input
/// equals the gradient at the stack output to 1e-12 (infinity norm) on a
/// 12-layer stack, in under 1 minute.
#[test]
fn criterion_02_gradient_identity_under_zero_gates() {
    let start = Instant::now();
    let vocab = Vocab::new(32, 4);
    let specs = preset_specs("m2o-related4", &vocab, 3).unwrap();
    let corpus = generate_corpus(&specs, &vocab, 3);
    let cfg = StackConfig {
        encoder_layers: 2,
        decoder_layers: 12,
        model_dim: 64,
        ffn_dim: 128,
        heads: 4,
        vocab: vocab.size,
        norm_mode: NormMode::PreNorm,
        encoder_gating: GatingMode::Static,
        decoder_gating: GatingMode::Latent,
        branch_init_scale: 1.0,
    };
    let params = ModelParameters::init(&cfg, 11);
    let refs: Vec<&Example> = corpus.split(0, Split::Train).iter().take(4).collect();
    let batch = pad_batch(&refs);
    let mut tape = Tape::new();
    let nodes = register_params(&mut tape, &params);
    let zeros = vec![0.0; 12];
    let trace = forward_seq2seq(
        &mut tape,
        &nodes,
        &cfg,
        &batch,
        StackGates::Fixed(&[1.0, 1.0]),
        StackGates::Fixed(&zeros),
    );
    let loss = sequence_nll(&mut tape, trace.logits, &batch);
    let grads = tape.backward(loss);
    let g_last = grads.get(*trace.dec_states.last().unwrap()).unwrap();
    let mut worst: f64 = 0.0;
    for &state in &trace.dec_states {
        let g = grads.get(state).unwrap();
        let diff = g
            .iter()
            .zip(g_last.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(diff);
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-12 && elapsed.as_secs() < 60;
    report(
        "criterion 2 (identity-path gradient equality)",
        pass,
        &format!("max inf-norm deviation {:.2e}, {:.1}s", worst, elapsed.as_secs_f64()),
    );

    // The probe's all-zeros row realizes the same identity.
    let probe = gradient_scaling_probe(&params, &cfg, &batch, &[GateAssignment::AllZeros], 7);
    let norms = &probe.rows[0].activation_norms;
    let spread = norms
        .iter()
        .fold(0.0f64, |m, v| m.max((v - norms.last().unwrap()).abs()));
    assert!(spread <= 1e-12, "probe all-zeros spread {}", spread);
}

/// Criterion 3: a zero gate makes the layer an exact identity (bitwise
/// equality with the layer physically removed); all-ones latent equals
/// static bitwise.
#[test]
fn criterion_03_identity_path_semantics() {
    let vocab = Vocab::new(32, 4);
    let specs = preset_specs("o2m-related4", &vocab, 5).unwrap();
    let corpus = generate_corpus(&specs, &vocab, 5);
    let cfg = StackConfig {
        encoder_layers: 2,
        decoder_layers: 3,
        model_dim: 64,
        ffn_dim: 128,
        heads: 4,
        vocab: vocab.size,
        norm_mode: NormMode::PreNorm,
        encoder_gating: GatingMode::Latent,
        decoder_gating: GatingMode::Latent,
        branch_init_scale: 1.0,
    };
    let params = ModelParameters::init(&cfg, 13);
    let refs: Vec<&Example> = corpus.split(1, Split::Train).iter().take(4).collect();
    let batch = pad_batch(&refs);

    let logits_for = |cfg: &StackConfig, params: &ModelParameters, enc: &[f64], dec: &[f64]| {
        let mut tape = Tape::new();
        let nodes = register_params(&mut tape, params);
        let trace = forward_seq2seq(
            &mut tape,
            &nodes,
            cfg,
            &batch,
            StackGates::Fixed(enc),
            StackGates::Fixed(dec),
        );
        tape.value(trace.logits).clone()
    };

    // Gate 0 on decoder layer 1 == that layer removed, bitwise.
    let gated = logits_for(&cfg, &params, &[1.0, 1.0], &[1.0, 0.0, 1.0]);
    let (pruned, pruned_cfg) = latent_depth::model::prune_parameters(
        &params,
        &cfg,
        &[true, true],
        &[true, false, true],
    );
    let removed = logits_for(&pruned_cfg, &pruned, &[1.0, 1.0], &[1.0, 1.0]);
    let identity_ok = gated == removed;

    // All-ones latent == static, bitwise.
    let ones = logits_for(&cfg, &params, &[1.0, 1.0], &[1.0, 1.0, 1.0]);
    let mut static_cfg = cfg.clone();
    static_cfg.encoder_gating = GatingMode::Static;
    static_cfg.decoder_gating = GatingMode::Static;
    let mut tape = Tape::new();
    let nodes = register_params(&mut tape, &params);
    let trace = forward_seq2seq(
        &mut tape,
        &nodes,
        &static_cfg,
        &batch,
        StackGates::Static,
        StackGates::Static,
    );
    let static_logits = tape.value(trace.logits).clone();
    let ones_ok = ones == static_logits;

    report(
        "criterion 3 (identity-path semantics)",
        identity_ok && ones_ok,
        &format!("zero-gate bitwise: {}, all-ones bitwise: {}", identity_ok, ones_ok),
    );
}

/// Criterion 4: the no-norm 6/24 latent model reaches >= 0.99 held-out token
/// accuracy (task average, mean over 3 seeds) while the static no-norm model
/// at identical hyperparameters diverges or stays below 0.99 on at least 2
/// of 3 seeds.
#[test]
fn criterion_04_trainability_at_depth_without_norm() {
    let mut latent_accs = Vec::new();
    for &seed in &tuning::SEEDS {
        let run = run_cached(&c4_spec(seed, GatingMode::Latent));
        assert!(!run.diverged, "latent run diverged at seed {}", seed);
        latent_accs.push(mean(&run.valid_acc));
    }
    let latent_mean = mean(&latent_accs);

    let mut static_failures = 0;
    let mut static_detail = Vec::new();
    for &seed in &tuning::SEEDS {
        let run = run_cached(&c4_spec(seed, GatingMode::Static));
        let acc = if run.diverged { 0.0 } else { mean(&run.valid_acc) };
        if run.diverged || acc < 0.99 {
            static_failures += 1;
        }
        static_detail.push(format!(
            "seed {}: {}",
            seed,
            if run.diverged { "diverged".into() } else { format!("acc {:.4}", acc) }
        ));
    }

    let pass = latent_mean >= 0.99 && static_failures >= 2;
    report(
        "criterion 4 (trainability at depth without norm)",
        pass,
        &format!(
            "latent mean acc {:.4} (per-seed {:?}); static: {} [{}]",
            latent_mean,
            latent_accs.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>(),
            static_failures,
            static_detail.join("; ")
        ),
    );
}

/// Criterion 5: mean final effective depth is nondecreasing in the KL
/// coefficient over beta in {0, 1, 10} with a uniform prior (3 seeds).
#[test]
fn criterion_05_beta_effective_depth_trend() {
    let mut means = Vec::new();
    for beta in [0.0, 1.0, 10.0] {
        let mut depths = Vec::new();
        for &seed in &tuning::SEEDS {
            let mut spec = m2o_spec(seed);
            spec.beta = beta;
            let run = run_cached(&spec);
            assert!(!run.diverged);
            let table = run.trainer.dec_posterior.as_ref().unwrap();
            let el = mean(&(0..run.trainer.num_tasks())
                .map(|n| table.effective_depth(n))
                .collect::<Vec<_>>());
            depths.push(el);
        }
        means.push(mean(&depths));
    }
    let pass = means[0] <= means[1] + 1e-9 && means[1] <= means[2] + 1e-9;
    report(
        "criterion 5 (beta vs effective depth)",
        pass,
        &format!("mean E_L at beta {{0,1,10}}: {:.3}, {:.3}, {:.3}", means[0], means[1], means[2]),
    );
}

/// Criterion 6: with lambda = 0.1 and K = 12 on 24 latent decoder layers,
/// the final expected depth lands within K +- 0.15 K on every seed.
#[test]
fn criterion_06_target_depth_control() {
    let mut details = Vec::new();
    let mut pass = true;
    for &seed in &tuning::SEEDS {
        let run = run_cached(&c6_spec(seed));
        assert!(!run.diverged);
        let table = run.trainer.dec_posterior.as_ref().unwrap();
        for task in 0..run.trainer.num_tasks() {
            let sum_pi = table.effective_depth(task);
            if (sum_pi - 12.0).abs() > 0.15 * 12.0 {
                pass = false;
            }
        }
        let avg = mean(
            &(0..run.trainer.num_tasks())
                .map(|n| table.effective_depth(n))
                .collect::<Vec<_>>(),
        );
        details.push(format!("seed {}: mean sum(pi) {:.2}", seed, avg));
    }
    report(
        "criterion 6 (target-depth control)",
        pass,
        &format!("target 12 +- 1.8; {}", details.join("; ")),
    );
}

fn c6_spec(seed: u64) -> RunSpec {
    let mut spec = m2o_spec(seed);
    spec.beta = 1.0;
    spec.lambda = 0.1;
    spec.target_depth = 12.0;
    spec
}

/// Criterion 7: the aggregated-posterior prior ends strictly more discrete
/// than the uniform prior (matched seeds), and KL annealing delays
/// saturation: at the last snapshot at or before the anneal warmup, the
/// annealed run keeps at least 25% of layers mid-band while the unannealed
/// run keeps fewer.
#[test]
fn criterion_07_prior_discreteness_and_annealing() {
    let agg_spec = |seed: u64, warmup: u64| {
        let mut spec = m2o_spec(seed);
        spec.beta = 10.0;
        spec.prior = PriorSpec::AggregatedPosterior;
        spec.anneal_warmup = warmup;
        spec
    };
    let uniform_spec = |seed: u64| {
        let mut spec = m2o_spec(seed);
        spec.beta = 10.0;
        spec
    };

    let mut discreteness_ok = 0;
    let mut details = Vec::new();
    for &seed in &tuning::SEEDS {
        let agg = run_cached(&agg_spec(seed, 0));
        let uni = run_cached(&uniform_spec(seed));
        let d_agg = discreteness_score(agg.trainer.dec_posterior.as_ref().unwrap());
        let d_uni = discreteness_score(uni.trainer.dec_posterior.as_ref().unwrap());
        if d_agg < d_uni {
            discreteness_ok += 1;
        }
        details.push(format!("seed {}: agg {:.3} vs uniform {:.3}", seed, d_agg, d_uni));
    }

    // Annealing part, single matched seed set: mid-band fraction at the last
    // snapshot at or before the warmup boundary.
    let anneal_warmup = tuning::M2O_STEPS / 2;
    let mut anneal_ok = 0;
    let mut anneal_details = Vec::new();
    for &seed in &tuning::SEEDS {
        let annealed = run_cached(&agg_spec(seed, anneal_warmup));
        let plain = run_cached(&agg_spec(seed, 0));
        let frac = |run: &RunOutcome| -> f64 {
            let cutoff = anneal_warmup;
            let step = run
                .trainer
                .history
                .iter()
                .map(|r| r.step)
                .filter(|s| *s <= cutoff)
                .max()
                .unwrap_or(0);
            let rows: Vec<_> = run
                .trainer
                .history
                .iter()
                .filter(|r| r.step == step)
                .collect();
            let mid = rows.iter().filter(|r| r.pi > 0.1 && r.pi < 0.9).count();
            mid as f64 / rows.len() as f64
        };
        let f_annealed = frac(&annealed);
        let f_plain = frac(&plain);
        if f_annealed >= 0.25 && f_plain < f_annealed {
            anneal_ok += 1;
        }
        anneal_details.push(format!(
            "seed {}: annealed mid-band {:.2} vs unannealed {:.2}",
            seed, f_annealed, f_plain
        ));
    }

    let pass = discreteness_ok == 3 && anneal_ok == 3;
    report(
        "criterion 7 (prior discreteness and annealing)",
        pass,
        &format!(
            "discreteness {}/3 [{}]; annealing {}/3 [{}]",
            discreteness_ok,
            details.join("; "),
            anneal_ok,
            anneal_details.join("; ")
        ),
    );
}

/// Criterion 8: ablation ordering of mean held-out NLL over 3 seeds:
/// full <= (-L_K) <= (-KL) within 2% relative slack, and full < (-both)
/// strictly.
#[test]
fn criterion_08_loss_term_ablation() {
    let arm = |beta: f64, lambda: f64, seed: u64| -> RunSpec {
        let mut spec = RunSpec {
            preset: "o2m-diverse4",
            ..m2o_spec(seed)
        };
        spec.outer_steps = tuning::C8_STEPS;
        spec.beta = beta;
        spec.lambda = lambda;
        spec.target_depth = if lambda > 0.0 { 12.0 } else { 0.0 };
        spec
    };
    let mean_nll = |beta: f64, lambda: f64| -> f64 {
        let mut all = Vec::new();
        for &seed in &tuning::SEEDS {
            let run = run_cached(&arm(beta, lambda, seed));
            assert!(!run.diverged);
            all.push(mean(&run.valid_nll));
        }
        mean(&all)
    };
    let full = mean_nll(1.0, 0.1);
    let no_lk = mean_nll(1.0, 0.0);
    let no_kl = mean_nll(0.0, 0.1);
    let no_both = mean_nll(0.0, 0.0);

    let slack = 1.02;
    let chain = full <= no_lk * slack && no_lk <= no_kl * slack;
    let strict = full < no_both;
    report(
        "criterion 8 (loss-term ablation ordering)",
        chain && strict,
        &format!(
            "full {:.4} | -L_K {:.4} | -KL {:.4} | -both {:.4} (chain with 2% slack: {}, full < -both: {})",
            full, no_lk, no_kl, no_both, chain, strict
        ),
    );
}

/// Criterion 9: a 24-latent-layer model regularized to E_L ~ 12 beats (or
/// ties) a 12-layer static model on held-out NLL in at least 2 of 3 seeds.
#[test]
fn criterion_09_latent_vs_static_at_matched_depth() {
    let static_spec = |seed: u64| -> RunSpec {
        let mut spec = m2o_spec(seed);
        spec.dec_layers = 12;
        spec.dec_gating = GatingMode::Static;
        spec.beta = 0.0;
        spec.lambda = 0.0;
        spec
    };
    let mut wins = 0;
    let mut details = Vec::new();
    for &seed in &tuning::SEEDS {
        let latent = run_cached(&c6_spec(seed));
        let st = run_cached(&static_spec(seed));
        let l = mean(&latent.valid_nll);
        let s = mean(&st.valid_nll);
        if l <= s {
            wins += 1;
        }
        details.push(format!("seed {}: latent {:.4} vs static {:.4}", seed, l, s));
    }
    report(
        "criterion 9 (latent-24 at E_L~12 vs static-12)",
        wins >= 2,
        &format!("{}/3 seeds [{}]", wins, details.join("; ")),
    );
}

/// Criterion 10: once the posterior is saturated (every pi outside
/// (0.05, 0.95)), hard-gated evaluation NLL stays within 5% relative of the
/// soft-gated evaluation for every task.
#[test]
fn criterion_10_pruning_fidelity() {
    let run = run_cached(&c10_spec(1));
    assert!(!run.diverged);
    let trainer = &run.trainer;
    let table = trainer.dec_posterior.as_ref().unwrap();
    let mut saturated = true;
    for task in 0..trainer.num_tasks() {
        for pi in table.pi_vector(task) {
            if pi > 0.05 && pi < 0.95 {
                saturated = false;
            }
        }
    }
    let mut max_rel: f64 = 0.0;
    let mut details = Vec::new();
    for task in 0..trainer.num_tasks() {
        let (enc_s, dec_s) = trainer.eval_gates(task, GateMode::Soft);
        let (enc_h, dec_h) = trainer.eval_gates(task, GateMode::Hard);
        let soft = tasks::eval_nll(
            &trainer.params,
            &trainer.model_cfg,
            &trainer.corpus,
            task,
            Split::Valid,
            &enc_s,
            &dec_s,
        );
        let hard = tasks::eval_nll(
            &trainer.params,
            &trainer.model_cfg,
            &trainer.corpus,
            task,
            Split::Valid,
            &enc_h,
            &dec_h,
        );
        let rel = (hard - soft).abs() / soft.max(1e-9);
        max_rel = max_rel.max(rel);
        details.push(format!("task {}: soft {:.4} hard {:.4}", task, soft, hard));
    }
    let pass = saturated && max_rel <= 0.05;
    report(
        "criterion 10 (pruning fidelity)",
        pass,
        &format!(
            "saturated: {}, max relative NLL gap {:.3} [{}]",
            saturated,
            max_rel,
            details.join("; ")
        ),
    );
}

fn c10_spec(seed: u64) -> RunSpec {
    let mut spec = m2o_spec(seed);
    spec.beta = 10.0;
    spec.prior = PriorSpec::AggregatedPosterior;
    spec.lambda = 0.1;
    spec.target_depth = 12.0;
    spec.outer_steps = tuning::M2O_STEPS + 200;
    spec
}

/// Criterion 11: with the total number of weight updates held fixed, final
/// validation NLL varies by less than 5% relative across inner-loop
/// frequencies I in {1, 2, 5, 10} (single seed).
#[test]
fn criterion_11_inner_loop_robustness() {
    let total_updates = 240u64;
    let mut nlls = Vec::new();
    for inner in [1u64, 2, 5, 10] {
        let mut spec = m2o_spec(7);
        spec.inner_loop = inner;
        spec.outer_steps = total_updates / inner;
        let run = run_cached(&spec);
        assert!(!run.diverged);
        nlls.push(mean(&run.valid_nll));
    }
    let lo = nlls.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = nlls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let spread = (hi - lo) / lo;
    report(
        "criterion 11 (inner-loop robustness)",
        spread < 0.05,
        &format!(
            "NLL at I={{1,2,5,10}}: {:?}, relative spread {:.3}",
            nlls.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            spread
        ),
    );
}

/// Criterion 12: identical configurations replay identically (metrics equal
/// byte for byte) and checkpoint resume reproduces the uninterrupted run.
#[test]
fn criterion_12_determinism_and_resume() {
    let mut spec = m2o_spec(5);
    spec.outer_steps = 6;
    spec.dec_layers = 4;
    spec.dim = 16;
    spec.ffn = 32;
    spec.heads = 2;

    let mut a = spec.build();
    let mut b = spec.build();
    a.train(None).unwrap();
    b.train(None).unwrap();
    let metrics_equal = latent_depth::trainer::metrics_to_csv(&a.metrics)
        == latent_depth::trainer::metrics_to_csv(&b.metrics);

    let mut half = spec.build();
    for _ in 0..3 {
        half.outer_step().unwrap();
    }
    let ckpt = half.checkpoint();
    let json = serde_json::to_vec(&ckpt).unwrap();
    let restored: latent_depth::trainer::Checkpoint = serde_json::from_slice(&json).unwrap();
    let mut resumed = Trainer::from_checkpoint(restored, half.corpus.clone());
    while resumed.outer_step < 6 {
        resumed.outer_step().unwrap();
    }
    let resume_equal =
        resumed.params == a.params && resumed.dec_posterior == a.dec_posterior;

    report(
        "criterion 12 (determinism and resume)",
        metrics_equal && resume_equal,
        &format!("metrics byte-equal: {}, resume bitwise: {}", metrics_equal, resume_equal),
    );
}

/// Bonus check tied to criterion 2's probe: a duplicate probe run with the
/// same seed produces an identical table.
#[test]
fn probe_determinism() {
    let vocab = Vocab::new(32, 4);
    let specs = preset_specs("m2o-related4", &vocab, 3).unwrap();
    let corpus = generate_corpus(&specs, &vocab, 3);
    let cfg = StackConfig {
        encoder_layers: 2,
        decoder_layers: 6,
        model_dim: 32,
        ffn_dim: 64,
        heads: 2,
        vocab: vocab.size,
        norm_mode: NormMode::NoNorm,
        encoder_gating: GatingMode::Static,
        decoder_gating: GatingMode::Latent,
        branch_init_scale: 1.0,
    };
    let params = ModelParameters::init(&cfg, 3);
    let refs: Vec<&Example> = corpus.split(0, Split::Train).iter().take(4).collect();
    let batch = pad_batch(&refs);
    let all = [
        GateAssignment::AllOnes,
        GateAssignment::AllZeros,
        GateAssignment::SampledSoft,
    ];
    let a = gradient_scaling_probe(&params, &cfg, &batch, &all, 9);
    let b = gradient_scaling_probe(&params, &cfg, &batch, &all, 9);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    let _ = StackId::Decoder;
}
