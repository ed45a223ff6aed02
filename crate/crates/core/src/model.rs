//! The full network and its ablation variants.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, RunConfig};
use crate::data::{apply_temporal_shuffle, Modality, Sample};
use crate::encoders::{
    encode_spatial_batch, encode_temporal_batch, init_weight, sample_major, slots_from_pooled, time_major, token_mean,
    EncoderParams, FactorBundle,
};
use crate::error::{Error, Result};
use crate::fcca::{build_mask, fcca_attend, purity_loss, AlignedSummaries, FccaParams};
use crate::params::{write_json, Bound, NamedArray, ParamId, ParamStore};
use crate::recouple::{bce, gate, prior_target, recouple, GateFeatures, RecoupleParams};
use crate::tensor::{Tape, Tensor, Var};
use crate::trainer::LossWeights;

pub const NUM_CLASSES: usize = 7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fusion {
    #[default]
    Gr,
    Sum,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification,
}

/// Architectural and objective switches mirroring the ablation table.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub drop_modality: [bool; 3],
    pub no_temporal: bool,
    pub no_spatial: bool,
    pub no_st_disen: bool,
    pub no_fcca: bool,
    pub fusion: Fusion,
    pub no_pur: bool,
    pub no_decorr: bool,
    pub no_orth: bool,
    pub ce_loss: bool,
}

impl Ablation {
    pub const SWITCHES: [&'static str; 15] = [
        "drop_modality_L",
        "drop_modality_V",
        "drop_modality_A",
        "no_temporal",
        "no_spatial",
        "no_st_disen",
        "no_fcca",
        "fusion_sum",
        "fusion_concat",
        "fusion_gr",
        "no_pur",
        "no_decorr",
        "no_orth",
        "ce_loss",
        "full",
    ];

    pub fn from_switches<S: AsRef<str>>(switches: &[S]) -> Result<Self> {
        let mut a = Ablation::default();
        for s in switches {
            a.apply(s.as_ref())?;
        }
        if a.no_temporal && a.no_spatial {
            return Err(Error::config("no_temporal and no_spatial cannot be combined"));
        }
        Ok(a)
    }

    fn apply(&mut self, switch: &str) -> Result<()> {
        if let Some(m) = switch.strip_prefix("drop_modality_").and_then(Modality::parse) {
            self.drop_modality[m.index()] = true;
            return Ok(());
        }
        match switch {
            "no_temporal" => self.no_temporal = true,
            "no_spatial" => self.no_spatial = true,
            "no_st_disen" => self.no_st_disen = true,
            "no_fcca" => self.no_fcca = true,
            "fusion_sum" => self.fusion = Fusion::Sum,
            "fusion_concat" => self.fusion = Fusion::Concat,
            "fusion_gr" => self.fusion = Fusion::Gr,
            "no_pur" => self.no_pur = true,
            "no_decorr" => self.no_decorr = true,
            "no_orth" => self.no_orth = true,
            "ce_loss" => self.ce_loss = true,
            "full" => {}
            other => {
                return Err(Error::config(format!(
                    "unknown switch {other:?}; valid switches: {}",
                    Self::SWITCHES.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn task(&self) -> Task {
        if self.ce_loss {
            Task::Classification
        } else {
            Task::Regression
        }
    }

    pub fn is_gated(&self) -> bool {
        self.fusion == Fusion::Gr
    }

    /// Loss weights with switched-off terms zeroed. Cross-entropy-only
    /// training drops every auxiliary term.
    pub fn effective_weights(&self, w: &LossWeights) -> LossWeights {
        let mut w = w.clone();
        if self.no_pur || self.ce_loss {
            w.alpha = 0.0;
        }
        if self.no_decorr || self.ce_loss {
            w.beta = 0.0;
        }
        if self.no_orth || self.ce_loss {
            w.gamma = 0.0;
        }
        if self.ce_loss || !self.is_gated() {
            w.delta_cal = 0.0;
        }
        w
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Gr => "gr",
            Fusion::Sum => "sum",
            Fusion::Concat => "concat",
        })
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub widths: [usize; 3],
    pub store: ParamStore,
    pub encoders: EncoderParams,
    pub fcca: FccaParams,
    pub recouple: RecoupleParams,
    pub head: HeadParams,
}

/// Per-row summaries of a batch; row `r` belongs to `samples[order[r]]`.
pub struct Summaries<'t> {
    pub order: Vec<usize>,
    pub z_t: Var<'t>,
    pub z_s: Var<'t>,
    pub c_t: Var<'t>,
    pub c_s: Var<'t>,
    /// Batch-mean purity loss.
    pub purity: Var<'t>,
    /// One entry per group of equal-length samples.
    pub aligned: Vec<AlignedSummaries<'t>>,
}

pub struct Forward<'t> {
    pub summaries: Summaries<'t>,
    pub features: GateFeatures<'t>,
    /// `[B × 1]` for gated fusion.
    pub gate: Option<Var<'t>>,
    pub z_hat: Var<'t>,
    /// `[B × 1]` regression output or `[B × 7]` class logits.
    pub output: Var<'t>,
}

pub struct Calibration<'t> {
    pub loss: Var<'t>,
    pub shuffle_term: f64,
    pub swap_term: Option<f64>,
    pub prior_term: f64,
    /// Second binding where only the gate parameters are trainable.
    pub gate_bound: Bound<'t>,
}

/// Uniform random cyclic permutation (Sattolo); no element maps to itself.
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

fn mix_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl Model {
    pub fn new(cfg: &RunConfig, widths: [usize; 3]) -> Result<Self> {
        cfg.validate()?;
        let mcfg = cfg.model.clone();
        let ablation = mcfg.ablation()?;
        let d = mcfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let mut store = ParamStore::new();
        let encoders = EncoderParams::new(&mut store, widths, mcfg.slots(), d, &mut rng);
        let fcca = FccaParams::new(&mut store, d, mcfg.factor_specific_qkv, &mut rng);
        let recouple = RecoupleParams::new(&mut store, d, &mut rng);
        let head_in = if ablation.fusion == Fusion::Concat { 2 * d } else { d };
        let out = match ablation.task() {
            Task::Regression => 1,
            Task::Classification => NUM_CLASSES,
        };
        let head = HeadParams {
            w1: store.add("head.w1", init_weight(head_in, d, &mut rng)),
            b1: store.add("head.b1", Tensor::zeros(&[1, d])),
            w2: store.add("head.w2", init_weight(d, out, &mut rng)),
            b2: store.add("head.b2", Tensor::zeros(&[1, out])),
        };
        Ok(Self {
            config: mcfg,
            ablation,
            widths,
            store,
            encoders,
            fcca,
            recouple,
            head,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn task(&self) -> Task {
        self.ablation.task()
    }

    fn check_inputs(&self, samples: &[&Sample]) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::config("empty batch"));
        }
        for s in samples {
            for m in Modality::ALL {
                if s.sequence(m).width() != self.widths[m.index()] {
                    return Err(Error::config(format!(
                        "sample {} modality {m} has width {}, model expects {}",
                        s.id,
                        s.sequence(m).width(),
                        self.widths[m.index()]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Temporal and spatial factors for a group of equal-length samples.
    pub fn encode<'t>(&self, bound: &Bound<'t>, group: &[&Sample]) -> Result<FactorBundle<'t>> {
        let tape = bound.vars()[0].tape();
        let b = group.len();
        let d = self.d_model();
        let a = &self.ablation;
        let lengths = group[0].signature();
        let slots = self.config.slots();
        let mut temporal = Vec::with_capacity(3);
        let mut spatial = Vec::with_capacity(3);
        for m in Modality::ALL {
            let i = m.index();
            let drop = a.drop_modality[i];
            let needs_gru = !a.no_temporal || a.no_st_disen;
            let gru = if needs_gru {
                let x = tape.constant(time_major(group, m, drop));
                Some(encode_temporal_batch(bound, &self.encoders.temporal[i], x, b)?)
            } else {
                None
            };
            let t = match (a.no_temporal, gru) {
                (false, Some(h)) => h,
                _ => tape.constant(Tensor::zeros(&[b * lengths[i], d])),
            };
            let s = if a.no_spatial {
                tape.constant(Tensor::zeros(&[b * slots[i], d]))
            } else if a.no_st_disen {
                let h = gru.expect("mixed head runs the recurrent encoder");
                let pooled = token_mean(h, b, lengths[i], d)?;
                slots_from_pooled(bound, &self.encoders.spatial[i], d, pooled, b)?
            } else {
                let x = tape.constant(sample_major(group, m, drop));
                encode_spatial_batch(bound, &self.encoders.spatial[i], d, x, b)?
            };
            temporal.push(t);
            spatial.push(s);
        }
        Ok(FactorBundle {
            batch: b,
            lengths,
            slots,
            temporal: temporal.try_into().expect("three modalities"),
            spatial: spatial.try_into().expect("three modalities"),
        })
    }

    /// Encoders and alignment for a whole batch. Samples are grouped by
    /// sequence-length signature; groups keep first-appearance order.
    pub fn summarize<'t>(&self, bound: &Bound<'t>, samples: &[&Sample]) -> Result<Summaries<'t>> {
        self.check_inputs(samples)?;
        let mut groups: Vec<([usize; 3], Vec<usize>)> = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let sig = s.signature();
            match groups.iter_mut().find(|(g, _)| *g == sig) {
                Some((_, members)) => members.push(i),
                None => groups.push((sig, vec![i])),
            }
        }
        let total = samples.len() as f64;
        let mut order = Vec::with_capacity(samples.len());
        let mut parts: Vec<[Var<'t>; 4]> = Vec::new();
        let mut purity: Option<Var<'t>> = None;
        let mut aligned = Vec::new();
        for (sig, members) in &groups {
            let group: Vec<&Sample> = members.iter().map(|&i| samples[i]).collect();
            let bundle = self.encode(bound, &group)?;
            let mut mask = build_mask(sig, &self.config.slots());
            if self.ablation.no_fcca {
                mask = mask.unmasked();
            }
            let al = fcca_attend(bound, &self.fcca, &bundle, &mask)?;
            let share = purity_loss(al.disc_t, al.disc_s)?.scale(members.len() as f64 / total);
            purity = Some(match purity {
                Some(p) => p.add(share)?,
                None => share,
            });
            let f = GateFeatures::new(al.z_t, al.z_s, al.disc_t, al.disc_s)?;
            parts.push([al.z_t, al.z_s, f.c_t, f.c_s]);
            order.extend(members);
            aligned.push(al);
        }
        let cat = |k: usize| -> Result<Var<'t>> {
            if parts.len() == 1 {
                Ok(parts[0][k])
            } else {
                Ok(Var::concat_rows(&parts.iter().map(|p| p[k]).collect::<Vec<_>>())?)
            }
        };
        Ok(Summaries {
            z_t: cat(0)?,
            z_s: cat(1)?,
            c_t: cat(2)?,
            c_s: cat(3)?,
            purity: purity.expect("non-empty batch"),
            order,
            aligned,
        })
    }

    /// Gate, recoupling and prediction head on top of per-row summaries.
    pub fn fuse<'t>(&self, bound: &Bound<'t>, features: GateFeatures<'t>) -> Result<(Option<Var<'t>>, Var<'t>, Var<'t>)> {
        let (u_t, u_s) = (bound[self.recouple.u_t], bound[self.recouple.u_s]);
        let (g, z_hat) = match self.ablation.fusion {
            Fusion::Gr => {
                let g = gate(bound, &self.recouple, &features)?;
                (Some(g), recouple(features.z_t, features.z_s, g, u_t, u_s)?)
            }
            Fusion::Sum => (None, features.z_t.matmul_nt(u_t)?.add(features.z_s.matmul_nt(u_s)?)?),
            Fusion::Concat => (
                None,
                Var::concat_cols(&[features.z_t.matmul_nt(u_t)?, features.z_s.matmul_nt(u_s)?])?,
            ),
        };
        let output = z_hat
            .matmul(bound[self.head.w1])?
            .add(bound[self.head.b1])?
            .tanh()
            .matmul(bound[self.head.w2])?
            .add(bound[self.head.b2])?;
        Ok((g, z_hat, output))
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, samples: &[&Sample]) -> Result<Forward<'t>> {
        let summaries = self.summarize(bound, samples)?;
        let features = GateFeatures::new_from_parts(&summaries)?;
        let (gate, z_hat, output) = self.fuse(bound, features)?;
        Ok(Forward {
            summaries,
            features,
            gate,
            z_hat,
            output,
        })
    }

    /// Forward pass where every row's spatial summary is replaced by row
    /// `perm[r]`'s; the disagreement feature is recomputed.
    pub fn forward_static_swap<'t>(&self, bound: &Bound<'t>, samples: &[&Sample], perm: &[usize]) -> Result<Forward<'t>> {
        let summaries = self.summarize(bound, samples)?;
        let clean = GateFeatures::new_from_parts(&summaries)?;
        let features = clean.with_spatial(summaries.z_s.gather_rows(perm)?)?;
        let (gate, z_hat, output) = self.fuse(bound, features)?;
        Ok(Forward {
            summaries,
            features,
            gate,
            z_hat,
            output,
        })
    }

    /// Gate calibration from two interventions and a soft prior. Returns
    /// `None` for ungated fusion. The corrupted passes only train the gate.
    pub fn calibration_loss<'t>(
        &self,
        tape: &'t Tape,
        clean: &Forward<'t>,
        samples: &[&Sample],
        seed: u64,
        weights: &LossWeights,
    ) -> Result<Option<Calibration<'t>>> {
        let Some(g_clean) = clean.gate else { return Ok(None) };
        let gate_ids = self.recouple.gate_ids();
        let gate_bound = self.store.bind_with(tape, |id| gate_ids.contains(&id));

        let shuffled: Vec<Sample> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| apply_temporal_shuffle(s, mix_seed(seed, i)))
            .collect();
        let refs: Vec<&Sample> = shuffled.iter().collect();
        let shuf = self.summarize(&gate_bound, &refs)?;
        let shuf_features = GateFeatures::new_from_parts(&shuf)?;
        let g_shuf = gate(&gate_bound, &self.recouple, &shuf_features)?;
        let shuffle = bce(g_shuf, 0.0)?;
        let mut loss = shuffle;

        let n = samples.len();
        let mut swap_term = None;
        if n >= 2 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, n));
            let perm = derangement(n, &mut rng);
            let f = &clean.features;
            let detached = GateFeatures {
                z_t: f.z_t.detach(),
                z_s: f.z_s.detach(),
                disagreement: f.disagreement.detach(),
                c_t: f.c_t.detach(),
                c_s: f.c_s.detach(),
            };
            let swapped = detached.with_spatial(detached.z_s.gather_rows(&perm)?)?;
            let g_swap = gate(&gate_bound, &self.recouple, &swapped)?;
            let swap = bce(g_swap, 1.0)?;
            swap_term = Some(swap.item()?);
            loss = loss.add(swap)?;
        }

        let target = prior_target(&clean.features, weights.kappa1, weights.kappa2)?;
        let prior = g_clean.sub(target)?.square().mean();
        loss = loss.add(prior.scale(weights.lambda_prior))?;
        Ok(Some(Calibration {
            loss,
            shuffle_term: shuffle.item()?,
            swap_term,
            prior_term: prior.item()?,
            gate_bound,
        }))
    }

    /// Point predictions in batch order (regression output, or the class
    /// value `argmax - 3` in classification mode).
    pub fn predictions(&self, forward: &Forward<'_>, n: usize) -> Vec<f64> {
        let out = forward.output.value();
        let mut preds = vec![0.0; n];
        for (r, &i) in forward.summaries.order.iter().enumerate() {
            preds[i] = match self.task() {
                Task::Regression => out.at(r, 0),
                Task::Classification => {
                    let row = out.row(r);
                    let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                    best as f64 - 3.0
                }
            };
        }
        preds
    }

    /// Gate values in batch order (0.5 placeholder for ungated fusion).
    pub fn gates(&self, forward: &Forward<'_>, n: usize) -> Vec<f64> {
        let mut out = vec![0.5; n];
        if let Some(g) = forward.gate {
            let g = g.value();
            for (r, &i) in forward.summaries.order.iter().enumerate() {
                out[i] = g.data()[r];
            }
        }
        out
    }

    /// Targets rearranged into the forward's row order, `[B × 1]`.
    pub fn targets_for(forward: &Forward<'_>, samples: &[&Sample]) -> Tensor {
        let data = forward.summaries.order.iter().map(|&i| samples[i].label).collect();
        Tensor::new(&[samples.len(), 1], data).expect("target shape")
    }
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    config: RunConfig,
    widths: [usize; 3],
    params: Vec<NamedArray>,
}

impl Model {
    /// Writes the run config, input widths and every named parameter as JSON.
    pub fn save(&self, path: &Path, config: &RunConfig) -> Result<()> {
        let ckpt = Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: config.clone(),
            widths: self.widths,
            params: self.store.to_named(),
        };
        write_json(path, &ckpt)
    }

    pub fn load(path: &Path) -> Result<(Self, RunConfig)> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint schema version {} (expected {CHECKPOINT_SCHEMA_VERSION})",
                ckpt.schema_version
            )));
        }
        let mut model = Model::new(&ckpt.config, ckpt.widths)?;
        model.store.load_named(ckpt.params)?;
        Ok((model, ckpt.config))
    }
}

impl<'t> GateFeatures<'t> {
    pub fn new_from_parts(s: &Summaries<'t>) -> Result<Self> {
        Ok(Self {
            z_t: s.z_t,
            z_s: s.z_s,
            disagreement: crate::fcca::row_cosine(s.z_t, s.z_s)?.one_minus(),
            c_t: s.c_t,
            c_s: s.c_s,
        })
    }
}
