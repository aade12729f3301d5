//! Verification and analysis instruments: finite-difference gradient
//! audits, activation-gradient scaling probes, utilization history exports,
//! and posterior discreteness scoring.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gate::{derive_rng, PosteriorTable};
use crate::model::{
    forward_seq2seq, layer_gradient_norms, register_params, sequence_nll, ModelParameters,
    PaddedBatch, StackConfig, StackGates, StackId,
};
use crate::tape::{gradient_mismatch, Tape};
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;
pub const MAX_COORDS_PER_GROUP: usize = 256;

/// Audit result for one parameter group (or gate vector).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub max_rel: f64,
    pub max_abs: f64,
    pub worst_coord: usize,
    pub coords_checked: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub abs_floor: f64,
    pub groups: Vec<GroupReport>,
    pub pass: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradient audit: tolerance {:.1e} (abs floor {:.1e})",
            self.tolerance, self.abs_floor
        )?;
        for g in &self.groups {
            writeln!(
                f,
                "  [{}] {:<24} max_rel {:.3e} max_abs {:.3e} worst@{} ({} coords)",
                if g.pass { "ok" } else { "FAIL" },
                g.name,
                g.max_rel,
                g.max_abs,
                g.worst_coord,
                g.coords_checked
            )?;
        }
        writeln!(f, "overall: {}", if self.pass { "PASS" } else { "FAIL" })
    }
}

impl GradCheckReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,max_rel,max_abs,worst_coord,coords_checked,pass\n");
        for g in &self.groups {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                g.name, g.max_rel, g.max_abs, g.worst_coord, g.coords_checked, g.pass
            ));
        }
        out
    }
}

/// Compare reverse-mode gradients of the micro-batch NLL against central
/// finite differences, for every parameter tensor and for each stack's gate
/// vector treated as free scalars. Coordinates are subsampled per group
/// (fixed sampling seed) above `max_coords`.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    params: &ModelParameters,
    cfg: &StackConfig,
    batch: &PaddedBatch,
    enc_gates: &[f64],
    dec_gates: &[f64],
    tolerance: f64,
    max_coords: usize,
    seed: u64,
) -> GradCheckReport {
    let mut tape = Tape::new();
    let nodes = register_params(&mut tape, params);
    let enc_node = tape.input(Tensor::vector(enc_gates.to_vec()));
    let dec_node = tape.input(Tensor::vector(dec_gates.to_vec()));
    let trace = forward_seq2seq(
        &mut tape,
        &nodes,
        cfg,
        batch,
        StackGates::Node(enc_node),
        StackGates::Node(dec_node),
    );
    let loss = sequence_nll(&mut tape, trace.logits, batch);
    let grads = tape.backward(loss);

    let mut targets: Vec<(String, crate::tape::NodeId)> = nodes
        .iter()
        .map(|(name, id)| (name.clone(), *id))
        .collect();
    targets.push(("gates.enc".into(), enc_node));
    targets.push(("gates.dec".into(), dec_node));

    let mut groups = Vec::with_capacity(targets.len());
    for (gi, (name, node)) in targets.iter().enumerate() {
        let analytic = grads.leaf_grad(&tape, *node);
        let n = analytic.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut rng = derive_rng(seed, &[0xAD17, gi as u64]);
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < max_coords {
                picked.insert(rng.gen_range(0..n));
            }
            picked.into_iter().collect()
        };
        let mut report = GroupReport {
            name: name.clone(),
            max_rel: 0.0,
            max_abs: 0.0,
            worst_coord: 0,
            coords_checked: coords.len(),
            pass: true,
        };
        for &c in &coords {
            let plus = tape.replay_perturbed(*node, c, FD_EPS, loss);
            let minus = tape.replay_perturbed(*node, c, -FD_EPS, loss);
            if !plus.is_finite() || !minus.is_finite() {
                report.pass = false;
                report.max_rel = f64::INFINITY;
                report.worst_coord = c;
                break;
            }
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            let a = analytic.data()[c];
            let abs = (a - numeric).abs();
            let rel = gradient_mismatch(a, numeric, ABS_FLOOR);
            if rel > report.max_rel || (rel == report.max_rel && abs > report.max_abs) {
                report.max_rel = rel;
                report.worst_coord = c;
            }
            report.max_abs = report.max_abs.max(abs);
            // A coordinate passes at relative tolerance with an absolute
            // floor for near-zero differences; tolerance 0 demands exact
            // agreement, which central differences only achieve when the
            // parameter is genuinely unused (both sides identically zero).
            let ok = if tolerance > 0.0 {
                abs <= ABS_FLOOR || rel <= tolerance
            } else {
                a == numeric
            };
            if !ok {
                report.pass = false;
            }
        }
        groups.push(report);
    }
    let pass = groups.iter().all(|g| g.pass);
    GradCheckReport {
        tolerance,
        abs_floor: ABS_FLOOR,
        groups,
        pass,
    }
}

/// Named gate assignments for the scaling probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateAssignment {
    AllOnes,
    AllZeros,
    SampledSoft,
}

impl GateAssignment {
    pub fn label(&self) -> &'static str {
        match self {
            GateAssignment::AllOnes => "ones",
            GateAssignment::AllZeros => "zeros",
            GateAssignment::SampledSoft => "soft",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeRow {
    pub assignment: String,
    /// ||dL/dx_l|| for l = 0..L (layer inputs plus the stack output).
    pub activation_norms: Vec<f64>,
    pub param_norms: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeTable {
    pub stack: String,
    pub rows: Vec<ProbeRow>,
}

impl ProbeTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("assignment,layer,activation_grad_norm,param_grad_norm\n");
        for row in &self.rows {
            for (l, a) in row.activation_norms.iter().enumerate() {
                let p = row.param_norms.get(l).copied();
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    row.assignment,
                    l,
                    a,
                    p.map_or(String::new(), |v| v.to_string())
                ));
            }
        }
        out
    }
}

/// Per-layer activation-gradient norms of the decoder stack under the given
/// gate assignments, on a fixed batch. The all-zeros row realizes the
/// identity-path limit where every layer sees the stack-output gradient.
pub fn gradient_scaling_probe(
    params: &ModelParameters,
    cfg: &StackConfig,
    batch: &PaddedBatch,
    assignments: &[GateAssignment],
    seed: u64,
) -> ProbeTable {
    let mut rows = Vec::with_capacity(assignments.len());
    for a in assignments {
        let dec: Vec<f64> = match a {
            GateAssignment::AllOnes => vec![1.0; cfg.decoder_layers],
            GateAssignment::AllZeros => vec![0.0; cfg.decoder_layers],
            GateAssignment::SampledSoft => {
                let mut rng = derive_rng(seed, &[0x50FF]);
                (0..cfg.decoder_layers)
                    .map(|_| crate::gate::sample_soft_rng((0.0, 0.0), 1.0, &mut rng))
                    .collect()
            }
        };
        let enc = vec![1.0; cfg.encoder_layers];
        let mut tape = Tape::new();
        let nodes = register_params(&mut tape, params);
        let trace = forward_seq2seq(
            &mut tape,
            &nodes,
            cfg,
            batch,
            StackGates::Fixed(&enc),
            StackGates::Fixed(&dec),
        );
        let loss = sequence_nll(&mut tape, trace.logits, batch);
        let grads = tape.backward(loss);
        let norms = layer_gradient_norms(
            &grads,
            &nodes,
            cfg,
            StackId::Decoder,
            &trace.dec_states,
        );
        rows.push(ProbeRow {
            assignment: a.label().into(),
            activation_norms: norms.activation_norms,
            param_norms: norms.param_norms,
        });
    }
    ProbeTable {
        stack: "dec".into(),
        rows,
    }
}

// ---------------------------------------------------------------------------
// Utilization history
// ---------------------------------------------------------------------------

/// One (step, task, layer) record of posterior probability, drawn gate, and
/// cross-task utilization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationRow {
    pub step: u64,
    pub task: usize,
    pub layer: usize,
    pub pi: f64,
    pub z: f64,
    pub u: f64,
}

/// Decimal with 9 significant digits; parsing the printed value and
/// re-printing reproduces the same text.
fn sig9(v: f64) -> String {
    format!("{:.8e}", v)
}

/// Write the history as CSV (`step,task,layer,pi,z,u`), UTF-8 with LF line
/// endings, values at 9 significant digits.
pub fn export_history(history: &[UtilizationRow], path: &Path) -> std::io::Result<()> {
    if history.is_empty() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "export_history: empty history",
        ));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, history_to_csv(history)).map_err(|e| {
        std::io::Error::new(e.kind(), format!("writing {}: {}", path.display(), e))
    })
}

pub fn history_to_csv(history: &[UtilizationRow]) -> String {
    let mut out = String::from("step,task,layer,pi,z,u\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            r.task,
            r.layer,
            sig9(r.pi),
            sig9(r.z),
            sig9(r.u)
        ));
    }
    out
}

pub fn parse_history_csv(text: &str) -> Result<Vec<UtilizationRow>, String> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "step,task,layer,pi,z,u" {
                return Err(format!("unexpected header: {line}"));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(format!("line {}: expected 6 fields", i + 1));
        }
        let parse_u = |s: &str| s.parse::<u64>().map_err(|e| format!("line {}: {e}", i + 1));
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| format!("line {}: {e}", i + 1));
        rows.push(UtilizationRow {
            step: parse_u(fields[0])?,
            task: parse_u(fields[1])? as usize,
            layer: parse_u(fields[2])? as usize,
            pi: parse_f(fields[3])?,
            z: parse_f(fields[4])?,
            u: parse_f(fields[5])?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Discreteness
// ---------------------------------------------------------------------------

fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
}

/// Mean binary entropy of the selection probabilities over tasks and layers;
/// lower means more discrete layer selection.
pub fn discreteness_score(table: &PosteriorTable) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for task in 0..table.num_tasks() {
        for layer in 0..table.num_layers() {
            total += binary_entropy(table.selection_probability(task, layer));
            count += 1;
        }
    }
    total / count as f64
}
