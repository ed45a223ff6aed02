//! Per-modality factor encoders.
//!
//! The temporal head is a single-layer gated recurrent unit, so its output at
//! step `t` depends only on tokens `0..=t`. The spatial head is a deep set:
//! a tokenwise MLP, a mean over tokens, then `S_m` slot projections, so its
//! output does not depend on token order at all.
//!
//! Batched entry points take a constant holding `B` samples of equal length
//! and return sample-major matrices (row `b·T + t`).

use rand::Rng;

use crate::data::{Modality, ModalitySequence, Sample};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Uniform(-1/√fan_in, 1/√fan_in) weights.
pub(crate) fn init_weight<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct TemporalHead {
    pub input_width: usize,
    /// `[d_in × 3d]`, columns ordered update | reset | candidate.
    pub w_x: ParamId,
    /// `[1 × 3d]`
    pub bias: ParamId,
    /// `[d × 2d]`, update | reset.
    pub u_zr: ParamId,
    /// `[d × d]`
    pub u_h: ParamId,
}

#[derive(Clone, Debug)]
pub struct SpatialHead {
    pub input_width: usize,
    pub slots: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// Slot heads `P_1..P_S` side by side, `[d × S·d]`.
    pub slot_proj: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub d_model: usize,
    pub temporal: [TemporalHead; 3],
    pub spatial: [SpatialHead; 3],
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, widths: [usize; 3], slots: [usize; 3], d: usize, rng: &mut R) -> Self {
        let temporal = Modality::ALL.map(|m| {
            let w = widths[m.index()];
            TemporalHead {
                input_width: w,
                w_x: store.add(format!("enc.{m}.t.w_x"), init_weight(w, 3 * d, rng)),
                bias: store.add(format!("enc.{m}.t.bias"), Tensor::zeros(&[1, 3 * d])),
                u_zr: store.add(format!("enc.{m}.t.u_zr"), init_weight(d, 2 * d, rng)),
                u_h: store.add(format!("enc.{m}.t.u_h"), init_weight(d, d, rng)),
            }
        });
        let spatial = Modality::ALL.map(|m| {
            let w = widths[m.index()];
            SpatialHead {
                input_width: w,
                slots: slots[m.index()],
                w1: store.add(format!("enc.{m}.s.w1"), init_weight(w, d, rng)),
                b1: store.add(format!("enc.{m}.s.b1"), Tensor::zeros(&[1, d])),
                w2: store.add(format!("enc.{m}.s.w2"), init_weight(d, d, rng)),
                b2: store.add(format!("enc.{m}.s.b2"), Tensor::zeros(&[1, d])),
                slot_proj: store.add(format!("enc.{m}.s.slots"), init_weight(d, slots[m.index()] * d, rng)),
            }
        });
        Self {
            d_model: d,
            temporal,
            spatial,
        }
    }
}

/// Encoder outputs for a batch, per modality in L, V, A order:
/// temporal `[B·T_m × d]` and spatial `[B·S_m × d]`, both sample-major.
#[derive(Clone, Debug)]
pub struct FactorBundle<'t> {
    pub batch: usize,
    pub lengths: [usize; 3],
    pub slots: [usize; 3],
    pub temporal: [Var<'t>; 3],
    pub spatial: [Var<'t>; 3],
}

fn check_width(head_width: usize, seq_width: usize) -> Result<()> {
    if head_width != seq_width {
        return Err(TensorError::DimensionMismatch {
            op: "encoder input width",
            lhs: vec![head_width],
            rhs: vec![seq_width],
        }
        .into());
    }
    Ok(())
}

/// Tokens of one modality for `samples` (all of length `T`) laid out
/// time-major, row `t·B + b`.
pub(crate) fn time_major(samples: &[&Sample], m: Modality, zero: bool) -> Tensor {
    let t = samples[0].sequence(m).len();
    let w = samples[0].sequence(m).width();
    let mut data = Vec::with_capacity(t * samples.len() * w);
    for step in 0..t {
        for s in samples {
            data.extend_from_slice(s.sequence(m).tokens.row(step));
        }
    }
    if zero {
        data.iter_mut().for_each(|x| *x = 0.0);
    }
    Tensor::new(&[t * samples.len(), w], data).expect("time-major shape")
}

/// Tokens laid out sample-major, row `b·T + t`.
pub(crate) fn sample_major(samples: &[&Sample], m: Modality, zero: bool) -> Tensor {
    let t = samples[0].sequence(m).len();
    let w = samples[0].sequence(m).width();
    let mut data = Vec::with_capacity(t * samples.len() * w);
    for s in samples {
        data.extend_from_slice(s.sequence(m).tokens.data());
    }
    if zero {
        data.iter_mut().for_each(|x| *x = 0.0);
    }
    Tensor::new(&[t * samples.len(), w], data).expect("sample-major shape")
}

/// Row permutation taking time-major order to sample-major order.
fn time_to_sample_major(batch: usize, steps: usize) -> Vec<usize> {
    (0..batch)
        .flat_map(|b| (0..steps).map(move |t| t * batch + b))
        .collect()
}

/// Gated recurrent pass over a time-major input `[T·B × d_in]`; returns the
/// hidden states sample-major `[B·T × d]`.
pub fn encode_temporal_batch<'t>(bound: &Bound<'t>, head: &TemporalHead, x: Var<'t>, batch: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    check_width(head.input_width, shape[1])?;
    let steps = shape[0] / batch;
    let proj = x.matmul(bound[head.w_x])?.add(bound[head.bias])?;
    let states = proj.gru(bound[head.u_zr], bound[head.u_h], batch)?;
    Ok(states.gather_rows(&time_to_sample_major(batch, steps))?)
}

/// Deep-set head over a sample-major input `[B·T × d_in]`; returns
/// `[B·S × d]`, slot `i` of sample `b` at row `b·S + i`.
pub fn encode_spatial_batch<'t>(bound: &Bound<'t>, head: &SpatialHead, d: usize, x: Var<'t>, batch: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    check_width(head.input_width, shape[1])?;
    let steps = shape[0] / batch;
    let u = x
        .matmul(bound[head.w1])?
        .add(bound[head.b1])?
        .tanh()
        .matmul(bound[head.w2])?
        .add(bound[head.b2])?;
    let pooled = token_mean(u, batch, steps, d)?;
    slots_from_pooled(bound, head, d, pooled, batch)
}

/// Mean over the `steps` rows of each sample in a sample-major matrix.
pub(crate) fn token_mean<'t>(x: Var<'t>, batch: usize, steps: usize, d: usize) -> Result<Var<'t>> {
    Ok(x.reshape(&[batch, steps, d])?
        .sum_axis(1)?
        .reshape(&[batch, d])?
        .scale(1.0 / steps as f64))
}

pub(crate) fn slots_from_pooled<'t>(bound: &Bound<'t>, head: &SpatialHead, d: usize, pooled: Var<'t>, batch: usize) -> Result<Var<'t>> {
    Ok(pooled
        .matmul(bound[head.slot_proj])?
        .reshape(&[batch * head.slots, d])?)
}

/// Temporal factor of one sequence, `[T_m × d]`.
pub fn encode_temporal(params: &EncoderParams, store: &ParamStore, x: &ModalitySequence) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = store.bind_with(&tape, |_| false);
    let input = tape.constant(x.tokens.clone());
    let head = &params.temporal[x.modality.index()];
    Ok(encode_temporal_batch(&bound, head, input, 1)?.value())
}

/// Spatial factor of one sequence, `[S_m × d]`.
pub fn encode_spatial(params: &EncoderParams, store: &ParamStore, x: &ModalitySequence) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = store.bind_with(&tape, |_| false);
    let input = tape.constant(x.tokens.clone());
    let head = &params.spatial[x.modality.index()];
    Ok(encode_spatial_batch(&bound, head, params.d_model, input, 1)?.value())
}
