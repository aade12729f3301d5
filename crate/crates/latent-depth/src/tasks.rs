//! Synthetic multi-task sequence transduction standing in for multilingual
//! translation: N deterministic "languages" defined by invertible token
//! ciphers over a shared vocabulary, in many-to-one (M2O) and one-to-many
//! (O2M) configurations.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::gate::derive_rng;
use crate::model::{
    decode, encode, forward_seq2seq, register_params, sequence_nll, ModelParameters, PaddedBatch,
    StackConfig, StackGates,
};
use crate::tape::Tape;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First task-tag token id; content tokens start after the tags.
pub const FIRST_TAG: usize = 3;

const SHUFFLE_TAG: u64 = 0x5u64;
const CORPUS_TAG: u64 = 0xC0u64;

/// Shared token space: pad/bos/eos, per-task tags, then content tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub num_tags: usize,
}

impl Vocab {
    pub fn new(size: usize, num_tags: usize) -> Self {
        assert!(size >= 16, "vocab: size {} below minimum 16", size);
        assert!(
            FIRST_TAG + num_tags + 2 <= size,
            "vocab: size {} too small for {} task tags",
            size,
            num_tags
        );
        Vocab { size, num_tags }
    }

    pub fn tag(&self, task: usize) -> usize {
        assert!(task < self.num_tags, "vocab: no tag for task {}", task);
        FIRST_TAG + task
    }

    pub fn content_start(&self) -> usize {
        FIRST_TAG + self.num_tags
    }

    pub fn content_tokens(&self) -> usize {
        self.size - self.content_start()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Source is ciphered, target is canonical (many-to-one).
    ToCanonical,
    /// Source is tag + canonical, target is ciphered (one-to-many).
    FromCanonical,
}

/// A bijection on content tokens plus an optional positional reversal.
/// Special tokens are fixed points.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cipher {
    /// Full-vocabulary permutation; identity on non-content ids.
    perm: Vec<usize>,
    pub reverse: bool,
}

impl Cipher {
    pub fn identity(vocab: &Vocab) -> Self {
        Cipher {
            perm: (0..vocab.size).collect(),
            reverse: false,
        }
    }

    /// Rotate content tokens by `shift` positions.
    pub fn rotation(vocab: &Vocab, shift: usize, reverse: bool) -> Self {
        let mut perm: Vec<usize> = (0..vocab.size).collect();
        let start = vocab.content_start();
        let n = vocab.content_tokens();
        for i in 0..n {
            perm[start + i] = start + (i + shift) % n;
        }
        Cipher { perm, reverse }
    }

    /// A seeded random permutation of the content tokens.
    pub fn random(vocab: &Vocab, seed: u64, tag: u64, reverse: bool) -> Self {
        let mut perm: Vec<usize> = (0..vocab.size).collect();
        let start = vocab.content_start();
        let n = vocab.content_tokens();
        let mut rng = derive_rng(seed, &[CORPUS_TAG, tag]);
        // Fisher-Yates over the content range.
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(start + i, start + j);
        }
        Cipher { perm, reverse }
    }

    pub fn validate(&self, vocab: &Vocab) {
        assert_eq!(self.perm.len(), vocab.size, "cipher: permutation length");
        let mut seen = vec![false; vocab.size];
        for (i, &p) in self.perm.iter().enumerate() {
            assert!(p < vocab.size && !seen[p], "cipher: not a bijection at {}", i);
            seen[p] = true;
            if i < vocab.content_start() {
                assert_eq!(p, i, "cipher: special token {} must be a fixed point", i);
            }
        }
    }

    /// Apply the token permutation, then the optional reversal.
    pub fn apply(&self, seq: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = seq.iter().map(|&t| self.perm[t]).collect();
        if self.reverse {
            out.reverse();
        }
        out
    }

    /// Inverse transduction: undo the reversal, then the permutation.
    pub fn invert(&self, seq: &[usize]) -> Vec<usize> {
        let mut inv = vec![0usize; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        let mut s: Vec<usize> = seq.to_vec();
        if self.reverse {
            s.reverse();
        }
        s.iter().map(|&t| inv[t]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub direction: Direction,
    pub cipher: Cipher,
    /// Training examples per epoch; emulates data-volume imbalance.
    pub volume: usize,
    pub len_range: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab: Vocab,
    pub specs: Vec<TaskSpec>,
    pub data: Vec<TaskData>,
    pub seed: u64,
}

impl Corpus {
    pub fn num_tasks(&self) -> usize {
        self.specs.len()
    }

    pub fn split(&self, task: usize, split: Split) -> &[Example] {
        let d = &self.data[task];
        match split {
            Split::Train => &d.train,
            Split::Valid => &d.valid,
            Split::Test => &d.test,
        }
    }
}

pub const VALID_EXAMPLES: usize = 24;
pub const TEST_EXAMPLES: usize = 24;

/// Deterministic corpus generation. Valid/test canonical sequences are
/// disjoint from train by construction (global dedup on the canonical
/// sequence, which the bijective ciphers carry to source identity).
pub fn generate_corpus(specs: &[TaskSpec], vocab: &Vocab, seed: u64) -> Corpus {
    let mut ids = BTreeSet::new();
    for s in specs {
        assert!(
            ids.insert(s.id),
            "corpus: duplicate task id {} in specs",
            s.id
        );
        assert!(s.len_range.0 >= 2, "corpus: sequence lengths must be at least 2");
        assert!(s.len_range.0 <= s.len_range.1, "corpus: empty length range");
        assert!(s.volume > 0, "corpus: task {} has zero volume", s.id);
        s.cipher.validate(vocab);
    }

    let mut data = Vec::with_capacity(specs.len());
    for spec in specs {
        let total = spec.volume + VALID_EXAMPLES + TEST_EXAMPLES;
        let mut rng = derive_rng(seed, &[CORPUS_TAG, spec.id as u64, 1]);
        let mut seen = BTreeSet::new();
        let mut canonicals = Vec::with_capacity(total);
        while canonicals.len() < total {
            let len = rng.gen_range(spec.len_range.0..=spec.len_range.1);
            let start = vocab.content_start();
            let seq: Vec<usize> = (0..len)
                .map(|_| start + rng.gen_range(0..vocab.content_tokens()))
                .collect();
            if seen.insert(seq.clone()) {
                canonicals.push(seq);
            }
        }
        let make = |canonical: &Vec<usize>| -> Example {
            match spec.direction {
                Direction::ToCanonical => Example {
                    src: spec.cipher.apply(canonical),
                    tgt: canonical.clone(),
                },
                Direction::FromCanonical => {
                    let mut src = Vec::with_capacity(canonical.len() + 1);
                    src.push(vocab.tag(spec.id));
                    src.extend_from_slice(canonical);
                    Example {
                        src,
                        tgt: spec.cipher.apply(canonical),
                    }
                }
            }
        };
        let examples: Vec<Example> = canonicals.iter().map(make).collect();
        let (train, rest) = examples.split_at(spec.volume);
        let (valid, test) = rest.split_at(VALID_EXAMPLES);
        data.push(TaskData {
            train: train.to_vec(),
            valid: valid.to_vec(),
            test: test.to_vec(),
        });
    }
    Corpus {
        vocab: vocab.clone(),
        specs: specs.to_vec(),
        data,
        seed,
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Benchmark presets mirroring the related/diverse and low/high-resource
/// axes: four tasks, two low-resource and two high-resource (8x volume).
/// Diverse tasks use random permutations, the high-resource pair with
/// positional reversal; related tasks are nearby rotations.
pub fn preset_specs(name: &str, vocab: &Vocab, seed: u64) -> Option<Vec<TaskSpec>> {
    let (m2o, related) = match name {
        "m2o-diverse4" => (true, false),
        "o2m-diverse4" => (false, false),
        "m2o-related4" => (true, true),
        "o2m-related4" => (false, true),
        _ => return None,
    };
    let direction = if m2o {
        Direction::ToCanonical
    } else {
        Direction::FromCanonical
    };
    let low = 256;
    let high = 8 * low;
    let len_range = (3, 6);
    let ciphers: Vec<Cipher> = if related {
        [1usize, 2, 3, 5]
            .iter()
            .map(|&s| Cipher::rotation(vocab, s, false))
            .collect()
    } else {
        (0..4)
            .map(|i| Cipher::random(vocab, seed, i as u64, i >= 2))
            .collect()
    };
    Some(
        ciphers
            .into_iter()
            .enumerate()
            .map(|(i, cipher)| TaskSpec {
                id: i,
                direction,
                cipher,
                volume: if i < 2 { low } else { high },
                len_range,
            })
            .collect(),
    )
}

pub const PRESET_NAMES: [&str; 4] = ["m2o-diverse4", "o2m-diverse4", "m2o-related4", "o2m-related4"];

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Pad a slice of examples into model-ready id arrays.
pub fn pad_batch(examples: &[&Example]) -> PaddedBatch {
    assert!(!examples.is_empty(), "batch: empty example list");
    let batch = examples.len();
    let src_len = examples.iter().map(|e| e.src.len()).max().unwrap();
    let tgt_len = examples.iter().map(|e| e.tgt.len()).max().unwrap() + 1; // bos/eos shift
    let mut src = vec![PAD; batch * src_len];
    let mut tgt_in = vec![PAD; batch * tgt_len];
    let mut tgt_out = vec![PAD; batch * tgt_len];
    for (b, e) in examples.iter().enumerate() {
        src[b * src_len..b * src_len + e.src.len()].copy_from_slice(&e.src);
        tgt_in[b * tgt_len] = BOS;
        tgt_in[b * tgt_len + 1..b * tgt_len + 1 + e.tgt.len()].copy_from_slice(&e.tgt);
        tgt_out[b * tgt_len..b * tgt_len + e.tgt.len()].copy_from_slice(&e.tgt);
        tgt_out[b * tgt_len + e.tgt.len()] = EOS;
    }
    PaddedBatch {
        batch,
        src_len,
        tgt_len,
        src,
        tgt_in,
        tgt_out,
        pad: PAD,
    }
}

/// Resumable per-task batch iterator: shuffled each epoch from a stream
/// keyed by (seed, task, epoch), padded, deterministic.
pub struct BatchStream<'a> {
    corpus: &'a Corpus,
    task: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub epoch: u64,
    pub cursor: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(corpus: &'a Corpus, task: usize, batch_size: usize, seed: u64) -> Self {
        assert!(task < corpus.num_tasks(), "stream: task {} does not exist", task);
        assert!(batch_size > 0, "stream: batch size must be positive");
        let mut s = BatchStream {
            corpus,
            task,
            batch_size,
            seed,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        };
        s.order = s.epoch_order(0);
        s
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let n = self.corpus.split(self.task, Split::Train).len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = derive_rng(self.seed, &[SHUFFLE_TAG, self.task as u64, epoch]);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            epoch: self.epoch,
            cursor: self.cursor,
        }
    }

    pub fn restore(&mut self, state: StreamState) {
        self.epoch = state.epoch;
        self.cursor = state.cursor;
        self.order = self.epoch_order(state.epoch);
    }

    /// True when the next batch starts a new epoch.
    pub fn at_epoch_boundary(&self) -> bool {
        self.cursor == 0
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> PaddedBatch {
        let train = self.corpus.split(self.task, Split::Train);
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let examples: Vec<&Example> = self.order[self.cursor..end].iter().map(|&i| &train[i]).collect();
        self.cursor = end;
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.order = self.epoch_order(self.epoch);
        }
        pad_batch(&examples)
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

const EVAL_CHUNK: usize = 32;

/// Teacher-forced mean NLL per non-pad target token over a split.
pub fn eval_nll(
    params: &ModelParameters,
    cfg: &StackConfig,
    corpus: &Corpus,
    task: usize,
    split: Split,
    enc_gates: &[f64],
    dec_gates: &[f64],
) -> f64 {
    let examples = corpus.split(task, split);
    assert!(!examples.is_empty(), "eval: empty split");
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = pad_batch(&refs);
        let mut tape = Tape::new();
        let nodes = register_params(&mut tape, params);
        let trace = forward_seq2seq(
            &mut tape,
            &nodes,
            cfg,
            &batch,
            StackGates::Fixed(enc_gates),
            StackGates::Fixed(dec_gates),
        );
        let nll = sequence_nll(&mut tape, trace.logits, &batch);
        let n = batch.target_tokens();
        total += tape.value(nll).item() * n as f64;
        tokens += n;
    }
    total / tokens as f64
}

/// Exact-token match rate between predictions and targets over non-pad
/// positions. The core of `token_accuracy`, exposed for direct testing.
pub fn match_rate(predictions: &[usize], targets: &[usize], pad: usize) -> f64 {
    assert_eq!(predictions.len(), targets.len(), "match_rate: length mismatch");
    let mut hits = 0usize;
    let mut total = 0usize;
    for (&p, &t) in predictions.iter().zip(targets.iter()) {
        if t == pad {
            continue;
        }
        total += 1;
        if p == t {
            hits += 1;
        }
    }
    assert!(total > 0, "match_rate: no non-pad targets");
    hits as f64 / total as f64
}

/// Greedy autoregressive decode of every example in a split, returning the
/// exact-token match rate over non-pad target positions.
pub fn token_accuracy(
    params: &ModelParameters,
    cfg: &StackConfig,
    corpus: &Corpus,
    task: usize,
    split: Split,
    enc_gates: &[f64],
    dec_gates: &[f64],
) -> f64 {
    let examples = corpus.split(task, split);
    assert!(!examples.is_empty(), "accuracy: empty split");
    let mut predictions = Vec::new();
    let mut targets = Vec::new();
    for chunk in examples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = pad_batch(&refs);
        let preds = greedy_decode(params, cfg, &batch, enc_gates, dec_gates);
        predictions.extend(preds);
        targets.extend(batch.tgt_out.iter().copied());
    }
    match_rate(&predictions, &targets, PAD)
}

/// Greedy decode for exactly `tgt_len` steps, feeding back argmax tokens.
/// Returns batch*tgt_len predicted ids aligned with `tgt_out`.
pub fn greedy_decode(
    params: &ModelParameters,
    cfg: &StackConfig,
    batch: &PaddedBatch,
    enc_gates: &[f64],
    dec_gates: &[f64],
) -> Vec<usize> {
    let src_pad = batch.src_pad_flags();
    // Encode once; reuse the encoder output as a constant for each step.
    let enc_value = {
        let mut tape = Tape::new();
        let nodes = register_params(&mut tape, params);
        let (enc_out, _) = encode(
            &mut tape,
            &nodes,
            cfg,
            &batch.src,
            batch.batch,
            batch.src_len,
            &src_pad,
            StackGates::Fixed(enc_gates),
        );
        tape.value(enc_out).clone()
    };

    let steps = batch.tgt_len;
    let mut prefix: Vec<Vec<usize>> = (0..batch.batch).map(|_| vec![BOS]).collect();
    let mut out = vec![PAD; batch.batch * steps];
    for step in 0..steps {
        let cur_len = step + 1;
        let mut tgt_in = Vec::with_capacity(batch.batch * cur_len);
        for p in &prefix {
            tgt_in.extend_from_slice(p);
        }
        let tgt_pad = vec![false; batch.batch * cur_len];
        let mut tape = Tape::new();
        let nodes = register_params(&mut tape, params);
        let enc_node = tape.constant(enc_value.clone());
        let (logits, _) = decode(
            &mut tape,
            &nodes,
            cfg,
            &tgt_in,
            batch.batch,
            cur_len,
            &tgt_pad,
            enc_node,
            batch.src_len,
            &src_pad,
            StackGates::Fixed(dec_gates),
        );
        let lv = tape.value(logits);
        for b in 0..batch.batch {
            let row = (b * cur_len + cur_len - 1) * cfg.vocab;
            let slice = &lv.data()[row..row + cfg.vocab];
            let mut best = 0usize;
            for (i, v) in slice.iter().enumerate() {
                if *v > slice[best] {
                    best = i;
                }
            }
            out[b * steps + step] = best;
            prefix[b].push(best);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Import / export
// ---------------------------------------------------------------------------

fn seq_to_line(src: &[usize], tgt: &[usize]) -> String {
    let fmt = |s: &[usize]| {
        s.iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    format!("{}\t{}\n", fmt(src), fmt(tgt))
}

fn line_to_example(line: &str) -> Result<Example, String> {
    let mut halves = line.trim_end().split('\t');
    let parse = |s: &str| -> Result<Vec<usize>, String> {
        s.split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| format!("bad token id {t}: {e}")))
            .collect()
    };
    let src = parse(halves.next().ok_or("missing source field")?)?;
    let tgt = parse(halves.next().ok_or("missing target field")?)?;
    if halves.next().is_some() {
        return Err("more than two tab-separated fields".into());
    }
    Ok(Example { src, tgt })
}

/// Write a corpus as line-oriented text: one file per task and split with
/// space-separated token ids and tab-separated source/target, plus a
/// metadata file.
pub fn export_corpus(corpus: &Corpus, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (n, data) in corpus.data.iter().enumerate() {
        for (split, examples) in [
            ("train", &data.train),
            ("valid", &data.valid),
            ("test", &data.test),
        ] {
            let mut f = std::fs::File::create(dir.join(format!("task{n}.{split}.tsv")))?;
            for e in examples {
                f.write_all(seq_to_line(&e.src, &e.tgt).as_bytes())?;
            }
        }
    }
    let meta = toml::to_string_pretty(&CorpusMeta {
        vocab: corpus.vocab.clone(),
        specs: corpus.specs.clone(),
        seed: corpus.seed,
    })
    .expect("corpus metadata serializes");
    std::fs::write(dir.join("corpus.toml"), meta)
}

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    vocab: Vocab,
    specs: Vec<TaskSpec>,
    seed: u64,
}

pub fn import_corpus(dir: &Path) -> Result<Corpus, String> {
    let meta: CorpusMeta = toml::from_str(
        &std::fs::read_to_string(dir.join("corpus.toml"))
            .map_err(|e| format!("reading corpus.toml: {e}"))?,
    )
    .map_err(|e| format!("parsing corpus.toml: {e}"))?;
    let mut data = Vec::new();
    for n in 0..meta.specs.len() {
        let mut task = TaskData::default();
        for (split, slot) in [
            ("train", &mut task.train),
            ("valid", &mut task.valid),
            ("test", &mut task.test),
        ] {
            let path = dir.join(format!("task{n}.{split}.tsv"));
            let text =
                std::fs::read_to_string(&path).map_err(|e| format!("reading {path:?}: {e}"))?;
            for line in text.lines() {
                slot.push(line_to_example(line).map_err(|e| format!("{path:?}: {e}"))?);
            }
        }
        data.push(task);
    }
    Ok(Corpus {
        vocab: meta.vocab,
        specs: meta.specs,
        data,
        seed: meta.seed,
    })
}
