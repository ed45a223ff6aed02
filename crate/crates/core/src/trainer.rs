//! Composite objective, optimizer, metrics and the experiment drivers built
//! on top of them.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Bandwidth, RunConfig};
use crate::data::{apply_temporal_shuffle, permutation, DatasetSplit, Sample, LABEL_MAX, LABEL_MIN};
use crate::error::{Error, Result};
use crate::fcca::decorr_loss;
use crate::model::{derangement, Calibration, Forward, Model, Task, NUM_CLASSES};
use crate::params::{Bound, ParamStore};
use crate::recouple::orth_loss;
use crate::tensor::{Tape, Tensor, TensorError, Var};

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_c: f64,
    pub lambda_h: f64,
    pub delta_cal: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub lambda_prior: f64,
    pub bandwidth: Bandwidth,
}

impl Default for LossWeights {
    fn default() -> Self {
        crate::config::LossConfig::default().weights()
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda_c", self.lambda_c),
            ("lambda_h", self.lambda_h),
            ("delta_cal", self.delta_cal),
            ("kappa1", self.kappa1),
            ("kappa2", self.kappa2),
            ("lambda_prior", self.lambda_prior),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("loss weight {name} must be a finite nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Itemized objective for one batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub task: f64,
    pub pur: f64,
    pub decorr: f64,
    pub orth: f64,
    pub cal: f64,
    pub total: f64,
    pub flags: Vec<String>,
}

impl LossReport {
    /// `task + α·pur + β·decorr + γ·orth + δ·cal`
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        self.task + w.alpha * self.pur + w.beta * self.decorr + w.gamma * self.orth + w.delta_cal * self.cal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub mae: f64,
    pub acc7: f64,
    pub acc2_negpos: f64,
    pub acc2_neg_nonneg: f64,
    pub macro_f1: f64,
}

/// Seven-way class of a score: clamp to the label range, round half away
/// from zero.
pub fn class7(v: f64) -> i32 {
    v.clamp(LABEL_MIN, LABEL_MAX).round() as i32
}

pub fn metrics(preds: &[f64], labels: &[f64]) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::config("cannot evaluate an empty split"));
    }
    if preds.len() != labels.len() {
        return Err(Error::config(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let n = preds.len() as f64;
    let mae = preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
    let acc7 = preds.iter().zip(labels).filter(|(p, y)| class7(**p) == class7(**y)).count() as f64 / n;
    let acc2_neg_nonneg =
        preds.iter().zip(labels).filter(|(p, y)| (**p >= 0.0) == (**y >= 0.0)).count() as f64 / n;

    let pairs: Vec<(bool, bool)> = preds
        .iter()
        .zip(labels)
        .filter(|(_, y)| **y != 0.0)
        .map(|(p, y)| (*p > 0.0, *y > 0.0))
        .collect();
    let (acc2_negpos, macro_f1) = if pairs.is_empty() {
        (1.0, 1.0)
    } else {
        let correct = pairs.iter().filter(|(p, y)| p == y).count();
        (correct as f64 / pairs.len() as f64, binary_macro_f1(&pairs))
    };
    Ok(MetricReport {
        mae,
        acc7,
        acc2_negpos,
        acc2_neg_nonneg,
        macro_f1,
    })
}

/// Mean F1 over the classes that occur in either truth or prediction.
fn binary_macro_f1(pairs: &[(bool, bool)]) -> f64 {
    let mut total = 0.0;
    let mut classes = 0;
    for class in [false, true] {
        let tp = pairs.iter().filter(|&&(p, y)| p == class && y == class).count() as f64;
        let fp = pairs.iter().filter(|&&(p, y)| p == class && y != class).count() as f64;
        let fn_ = pairs.iter().filter(|&&(p, y)| p != class && y == class).count() as f64;
        if tp + fp + fn_ == 0.0 {
            continue;
        }
        classes += 1;
        total += 2.0 * tp / (2.0 * tp + fp + fn_);
    }
    total / classes as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub task: f64,
    pub pur: f64,
    pub decorr: f64,
    pub orth: f64,
    pub cal: f64,
    pub total: f64,
    pub val_mae: f64,
    pub val_acc7: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,task,pur,decorr,orth,cal,total,val_mae,val_acc7";

    pub fn push(&mut self, row: EpochRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(Error::config(format!(
                    "epoch {} does not follow epoch {}",
                    row.epoch, last.epoch
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch, r.task, r.pur, r.decorr, r.orth, r.cal, r.total, r.val_mae, r.val_acc7
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == Self::HEADER => {}
            Some((_, h)) => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header {:?}, found {h:?}", Self::HEADER),
                })
            }
            None => return Err(Error::Parse { line: 1, msg: "empty log".into() }),
        }
        let mut log = TrainLog::default();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 9 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected 9 fields, found {}", fields.len()),
                });
            }
            let epoch = fields[0].trim().parse::<usize>().map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("bad epoch {:?}: {e}", fields[0]),
            })?;
            let mut v = [0.0; 8];
            for (k, f) in fields[1..].iter().enumerate() {
                v[k] = f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("bad number {f:?}: {e}"),
                })?;
            }
            let row = EpochRow {
                epoch,
                task: v[0],
                pur: v[1],
                decorr: v[2],
                orth: v[3],
                cal: v[4],
                total: v[5],
                val_mae: v[6],
                val_acc7: v[7],
            };
            log.push(row).map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
        }
        Ok(log)
    }
}

/// Objective on one batch, still attached to its tape.
pub struct Objective<'t> {
    pub loss: Var<'t>,
    pub report: LossReport,
    pub forward: Forward<'t>,
    pub calibration: Option<Calibration<'t>>,
}

fn task_loss<'t>(model: &Model, forward: &Forward<'t>, samples: &[&Sample]) -> Result<Var<'t>> {
    let tape = forward.output.tape();
    let targets = Model::targets_for(forward, samples);
    match model.task() {
        Task::Regression => Ok(forward.output.sub(tape.constant(targets))?.square().mean()),
        Task::Classification => {
            let n = samples.len();
            let mut onehot = Tensor::zeros(&[n, NUM_CLASSES]);
            for (r, &y) in targets.data().iter().enumerate() {
                let k = (class7(y) + 3) as usize;
                onehot.data_mut()[r * NUM_CLASSES + k] = 1.0;
            }
            let logp = forward.output.log_softmax_rows()?;
            Ok(logp.mul(tape.constant(onehot))?.sum().scale(-1.0 / n as f64))
        }
    }
}

/// Builds `L_task + α·L_pur + β·L_decorr + γ·L_orth + δ·L_cal` for one batch.
/// Weights are taken as given; ablation switches are applied by the caller.
/// Terms with zero weight are still reported but do not enter the graph,
/// except the calibration pass which is skipped entirely.
pub fn total_loss<'t>(
    model: &Model,
    bound: &Bound<'t>,
    samples: &[&Sample],
    weights: &LossWeights,
    seed: u64,
) -> Result<Objective<'t>> {
    weights.validate()?;
    let tape = bound.vars()[0].tape();
    let forward = model.forward(bound, samples)?;
    let mut flags = Vec::new();

    let task = task_loss(model, &forward, samples)?;
    let pur = forward.summaries.purity;
    let (decorr, hsic_used) = decorr_loss(
        forward.summaries.z_t,
        forward.summaries.z_s,
        weights.lambda_c,
        weights.lambda_h,
        weights.bandwidth,
    )?;
    if !hsic_used {
        flags.push("hsic term skipped: batch has fewer than 2 samples".to_string());
    }
    let orth = orth_loss(bound[model.recouple.u_t], bound[model.recouple.u_s])?;
    let calibration = if weights.delta_cal > 0.0 {
        model.calibration_loss(tape, &forward, samples, seed, weights)?
    } else {
        None
    };
    if let Some(c) = &calibration {
        if c.swap_term.is_none() {
            flags.push("static-swap calibration skipped: batch has fewer than 2 samples".to_string());
        }
    }

    let mut loss = task;
    for (w, term) in [(weights.alpha, pur), (weights.beta, decorr), (weights.gamma, orth)] {
        if w != 0.0 {
            loss = loss.add(term.scale(w))?;
        }
    }
    if let Some(c) = &calibration {
        loss = loss.add(c.loss.scale(weights.delta_cal))?;
    }
    let report = LossReport {
        task: task.item()?,
        pur: pur.item()?,
        decorr: decorr.item()?,
        orth: orth.item()?,
        cal: calibration.as_ref().map_or(Ok(0.0), |c| c.loss.item())?,
        total: loss.item()?,
        flags,
    };
    Ok(Objective {
        loss,
        report,
        forward,
        calibration,
    })
}

/// Gradients of the objective for every stored parameter, with the gate
/// gradients from the calibration binding folded in.
pub fn gradients(model: &Model, bound: &Bound<'_>, objective: &Objective<'_>) -> Result<Vec<Tensor>> {
    let grads = objective.loss.tape().backward(objective.loss)?;
    let mut out: Vec<Tensor> = model.store.ids().map(|id| grads.get_or_zeros(bound[id])).collect();
    if let Some(c) = &objective.calibration {
        for id in model.recouple.gate_ids() {
            if let Some(extra) = grads.get(c.gate_bound[id]) {
                let g = &mut out[id.index()];
                for (a, b) in g.data_mut().iter_mut().zip(extra.data()) {
                    *a += b;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Adam with decoupled weight decay: `p ← p − lr·wd·p`, then the
/// bias-corrected adaptive step.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::config(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let p = params.get_mut(id);
        if p.shape() != grads[k].shape() {
            return Err(crate::tensor::TensorError::DimensionMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: grads[k].shape().to_vec(),
            }
            .into());
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, (w, &g)) in p.data_mut().iter_mut().zip(grads[k].data()).enumerate() {
            *w -= cfg.lr * cfg.weight_decay * *w;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Predictions and gate values for a list of samples, evaluated in chunks.
pub fn predict(model: &Model, samples: &[&Sample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut gates = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let tape = Tape::new();
        let bound = model.store.bind_with(&tape, |_| false);
        let fwd = model.forward(&bound, chunk)?;
        preds.extend(model.predictions(&fwd, chunk.len()));
        gates.extend(model.gates(&fwd, chunk.len()));
    }
    Ok((preds, gates))
}

/// Fused summaries `Ẑ`, one row per sample in input order.
pub fn embed(model: &Model, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    let mut rows = vec![Vec::new(); samples.len()];
    for (c, chunk) in samples.chunks(EVAL_BATCH).enumerate() {
        let tape = Tape::new();
        let bound = model.store.bind_with(&tape, |_| false);
        let fwd = model.forward(&bound, chunk)?;
        let z = fwd.z_hat.value();
        for (r, &i) in fwd.summaries.order.iter().enumerate() {
            rows[c * EVAL_BATCH + i] = z.row(r).to_vec();
        }
    }
    Ok(rows)
}

pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<MetricReport> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let (preds, _) = predict(model, &refs)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    metrics(&preds, &labels)
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation MAE.
    pub model: Model,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

/// Mini-batch training with early stopping on validation MAE. `on_epoch`
/// sees each log row as it is produced.
pub fn train(cfg: &RunConfig, data: &DatasetSplit, mut on_epoch: impl FnMut(&EpochRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::config("training needs nonempty train and val splits"));
    }
    let widths = data.train[0].sequences.each_ref().map(|s| s.width());
    let mut model = Model::new(cfg, widths)?;
    let weights = model.ablation.effective_weights(&cfg.loss.weights());
    weights.validate()?;
    let adam = AdamConfig {
        lr: cfg.train.lr,
        weight_decay: cfg.train.weight_decay,
        ..AdamConfig::default()
    };
    let mut state = AdamState::default();
    let mut log = TrainLog::default();
    let mut best = (f64::INFINITY, 0usize, model.store.clone());
    let mut stale = 0;

    for epoch in 1..=cfg.train.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(epoch as u64);
        let order = permutation(data.train.len(), &mut rng);
        let mut sums = [0.0; 6];
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.train.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data.train[i]).collect();
            let tape = Tape::new();
            let bound = model.store.bind(&tape);
            let seed = cfg.train.seed ^ ((epoch as u64) << 32) ^ b as u64;
            let ids = || batch.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(",");
            let obj = match total_loss(&model, &bound, &batch, &weights, seed) {
                Err(Error::Tensor(e @ TensorError::Domain { .. })) => {
                    return Err(Error::Numerical(format!("{e} at epoch {epoch} batch {b}; samples {}", ids())));
                }
                other => other?,
            };
            let r = &obj.report;
            if !r.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch} batch {b} (task {}, pur {}, decorr {}, orth {}, cal {}); samples {}",
                    r.task,
                    r.pur,
                    r.decorr,
                    r.orth,
                    r.cal,
                    ids()
                )));
            }
            for (s, v) in sums.iter_mut().zip([r.task, r.pur, r.decorr, r.orth, r.cal, r.total]) {
                *s += v;
            }
            batches += 1;
            let grads = gradients(&model, &bound, &obj)?;
            drop(obj);
            adam_step(&mut model.store, &grads, &mut state, &adam)?;
        }
        let val = evaluate(&model, &data.val)?;
        let n = batches as f64;
        let row = EpochRow {
            epoch,
            task: sums[0] / n,
            pur: sums[1] / n,
            decorr: sums[2] / n,
            orth: sums[3] / n,
            cal: sums[4] / n,
            total: sums[5] / n,
            val_mae: val.mae,
            val_acc7: val.acc7,
        };
        on_epoch(&row);
        log.push(row)?;
        if val.mae < best.0 {
            best = (val.mae, epoch, model.store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.train.patience {
                break;
            }
        }
    }
    model.store = best.2;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: best.1,
        best_val_mae: best.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterventionRow {
    pub condition: String,
    pub mae: f64,
    /// `None` for ungated fusion.
    pub mean_gate: Option<f64>,
}

/// MAE and mean gate under the clean input, a per-sample temporal shuffle,
/// and a static swap of spatial summaries across samples.
pub fn intervene(model: &Model, samples: &[Sample], seed: u64) -> Result<Vec<InterventionRow>> {
    if samples.is_empty() {
        return Err(Error::config("cannot evaluate an empty split"));
    }
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let gated = model.ablation.is_gated();
    let row = |condition: &str, preds: &[f64], gates: &[f64]| -> Result<InterventionRow> {
        Ok(InterventionRow {
            condition: condition.to_string(),
            mae: metrics(preds, &labels)?.mae,
            mean_gate: gated.then(|| gates.iter().sum::<f64>() / gates.len() as f64),
        })
    };

    let refs: Vec<&Sample> = samples.iter().collect();
    let (p, g) = predict(model, &refs)?;
    let clean = row("clean", &p, &g)?;

    let shuffled: Vec<Sample> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| apply_temporal_shuffle(s, seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
        .collect();
    let shuffled_refs: Vec<&Sample> = shuffled.iter().collect();
    let (p, g) = predict(model, &shuffled_refs)?;
    let shuffle = row("temporal_shuffle", &p, &g)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut preds = Vec::with_capacity(samples.len());
    let mut gates = Vec::with_capacity(samples.len());
    for chunk in refs.chunks(EVAL_BATCH) {
        let tape = Tape::new();
        let bound = model.store.bind_with(&tape, |_| false);
        let fwd = if chunk.len() >= 2 {
            let perm = derangement(chunk.len(), &mut rng);
            model.forward_static_swap(&bound, chunk, &perm)?
        } else {
            model.forward(&bound, chunk)?
        };
        preds.extend(model.predictions(&fwd, chunk.len()));
        gates.extend(model.gates(&fwd, chunk.len()));
    }
    let swap = row("static_swap", &preds, &gates)?;
    Ok(vec![clean, shuffle, swap])
}

pub fn interventions_csv(rows: &[InterventionRow]) -> String {
    let mut out = String::from("condition,mae,mean_gate\n");
    for r in rows {
        let gate = r.mean_gate.map_or_else(|| "NA".to_string(), |g| g.to_string());
        writeln!(out, "{},{},{}", r.condition, r.mae, gate).expect("writing to a String");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub val_mae: f64,
    pub val_acc7: f64,
    pub test_mae: f64,
    pub test_acc7: f64,
}

/// Trains the full model and one variant per switch set, all from the same
/// seed, and reports validation and test metrics of the best checkpoints.
pub fn ablate(cfg: &RunConfig, data: &DatasetSplit, variants: &[Vec<String>]) -> Result<Vec<AblationRow>> {
    for v in variants {
        crate::model::Ablation::from_switches(v)?;
    }
    let mut rows = Vec::with_capacity(variants.len() + 1);
    let full = std::iter::once(vec![]).chain(variants.iter().cloned());
    for switches in full {
        let mut c = cfg.clone();
        c.model.switches = cfg.model.switches.iter().cloned().chain(switches.iter().cloned()).collect();
        let out = train(&c, data, |_| {})?;
        let val = evaluate(&out.model, &data.val)?;
        let (test_mae, test_acc7) = if data.test.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let t = evaluate(&out.model, &data.test)?;
            (t.mae, t.acc7)
        };
        rows.push(AblationRow {
            variant: if switches.is_empty() { "full".to_string() } else { switches.join("+") },
            val_mae: val.mae,
            val_acc7: val.acc7,
            test_mae,
            test_acc7,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,val_mae,val_acc7,test_mae,test_acc7\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.variant, r.val_mae, r.val_acc7, r.test_mae, r.test_acc7)
            .expect("writing to a String");
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Beta,
    Gamma,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "beta" => Ok(SweepParam::Beta),
            "gamma" => Ok(SweepParam::Gamma),
            other => Err(Error::config(format!("cannot sweep {other:?}; expected alpha, beta or gamma"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
            SweepParam::Gamma => "gamma",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub mae: f64,
    pub acc7: f64,
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub warnings: Vec<String>,
}

/// One training run per value of the chosen loss weight; duplicates are
/// dropped with a warning. Metrics are on the validation split.
pub fn sensitivity_sweep(cfg: &RunConfig, data: &DatasetSplit, param: SweepParam, values: &[f64]) -> Result<SweepOutcome> {
    let mut unique: Vec<f64> = Vec::new();
    let mut warnings = Vec::new();
    for &v in values {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::config(format!("sweep values must be positive, got {v}")));
        }
        if unique.contains(&v) {
            warnings.push(format!("duplicate sweep value {v} ignored"));
        } else {
            unique.push(v);
        }
    }
    let mut rows = Vec::with_capacity(unique.len());
    for v in unique {
        let mut c = cfg.clone();
        match param {
            SweepParam::Alpha => c.loss.alpha = v,
            SweepParam::Beta => c.loss.beta = v,
            SweepParam::Gamma => c.loss.gamma = v,
        }
        let out = train(&c, data, |_| {})?;
        let m = evaluate(&out.model, &data.val)?;
        rows.push(SweepRow {
            value: v,
            mae: m.mae,
            acc7: m.acc7,
        });
    }
    Ok(SweepOutcome { rows, warnings })
}

pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut out = format!("{},mae,acc7\n", param.name());
    for r in rows {
        writeln!(out, "{},{},{}", r.value, r.mae, r.acc7).expect("writing to a String");
    }
    out
}

/// K-fold cross-validation over the pooled train and validation samples.
/// Each fold trains on the rest and early-stops on the held-out fold.
pub fn cross_validate(cfg: &RunConfig, data: &DatasetSplit, folds: usize) -> Result<Vec<MetricReport>> {
    let pool: Vec<Sample> = data.train.iter().chain(&data.val).cloned().collect();
    if folds < 2 || folds > pool.len() {
        return Err(Error::config(format!("need 2 <= folds <= {}, got {folds}", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let order = permutation(pool.len(), &mut rng);
    let mut reports = Vec::with_capacity(folds);
    for k in 0..folds {
        let (mut train_part, mut held) = (Vec::new(), Vec::new());
        for (pos, &i) in order.iter().enumerate() {
            if pos % folds == k {
                held.push(pool[i].clone());
            } else {
                train_part.push(pool[i].clone());
            }
        }
        let split = DatasetSplit {
            train: train_part,
            val: held,
            test: Vec::new(),
            seed: data.seed,
        };
        let out = train(cfg, &split, |_| {})?;
        reports.push(evaluate(&out.model, &split.val)?);
    }
    Ok(reports)
}
