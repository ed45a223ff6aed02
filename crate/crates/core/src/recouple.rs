//! Gated recoupling of the aligned temporal and spatial summaries.
//!
//! The gate sees `φ = [Z_t; Z_s; d; c_t; c_s]` where `d = 1 - cos(Z_t, Z_s)`
//! is the factor disagreement and `c_t`, `c_s` are the discriminator's mean
//! confidence on each stream. The fused summary is
//! `Ẑ = g·U_t Z_t + (1 - g)·U_s Z_s`.

use rand::Rng;

use crate::encoders::init_weight;
use crate::error::Result;
use crate::fcca::row_cosine;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// Probabilities are clamped to `[ε, 1 - ε]` inside cross-entropy.
const BCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct RecoupleParams {
    pub d_model: usize,
    /// `[2d + 3 × 1]`
    pub w: ParamId,
    /// `[1 × 1]`
    pub b: ParamId,
    /// `[d × d_t]`
    pub u_t: ParamId,
    /// `[d × d_s]`
    pub u_s: ParamId,
}

impl RecoupleParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        Self {
            d_model: d,
            w: store.add("gate.w", init_weight(2 * d + 3, 1, rng)),
            b: store.add("gate.b", Tensor::zeros(&[1, 1])),
            u_t: store.add("recouple.u_t", init_weight(d, d, rng)),
            u_s: store.add("recouple.u_s", init_weight(d, d, rng)),
        }
    }

    pub fn gate_ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Per-sample gate inputs; every field has `B` rows.
#[derive(Clone, Copy, Debug)]
pub struct GateFeatures<'t> {
    pub z_t: Var<'t>,
    pub z_s: Var<'t>,
    /// `1 - cos(Z_t, Z_s)`, in `[0, 2]`.
    pub disagreement: Var<'t>,
    /// `mean(D)` over temporal tokens.
    pub c_t: Var<'t>,
    /// `mean(1 - D)` over spatial tokens.
    pub c_s: Var<'t>,
}

impl<'t> GateFeatures<'t> {
    /// `disc_t` is `[B·N_t × 1]` and `disc_s` is `[B·N_s × 1]`, sample-major.
    pub fn new(z_t: Var<'t>, z_s: Var<'t>, disc_t: Var<'t>, disc_s: Var<'t>) -> Result<Self> {
        let b = z_t.shape()[0];
        let n_t = disc_t.shape()[0] / b;
        let n_s = disc_s.shape()[0] / b;
        Ok(Self {
            z_t,
            z_s,
            disagreement: row_cosine(z_t, z_s)?.one_minus(),
            c_t: disc_t.reshape(&[b, n_t])?.mean_axis(1)?,
            c_s: disc_s.one_minus().reshape(&[b, n_s])?.mean_axis(1)?,
        })
    }

    /// Same features with the spatial summary replaced; disagreement is
    /// recomputed, confidences are kept.
    pub fn with_spatial(&self, z_s: Var<'t>) -> Result<Self> {
        Ok(Self {
            z_s,
            disagreement: row_cosine(self.z_t, z_s)?.one_minus(),
            ..*self
        })
    }

    pub fn phi(&self) -> Result<Var<'t>> {
        Ok(Var::concat_cols(&[self.z_t, self.z_s, self.disagreement, self.c_t, self.c_s])?)
    }
}

/// `g = sigmoid(φ·w + b)`, `[B × 1]`.
pub fn gate<'t>(bound: &Bound<'t>, params: &RecoupleParams, features: &GateFeatures<'t>) -> Result<Var<'t>> {
    Ok(features.phi()?.matmul(bound[params.w])?.add(bound[params.b])?.sigmoid())
}

/// `Ẑ = g·U_t Z_t + (1 - g)·U_s Z_s` for row-vector summaries.
pub fn recouple<'t>(z_t: Var<'t>, z_s: Var<'t>, g: Var<'t>, u_t: Var<'t>, u_s: Var<'t>) -> Result<Var<'t>> {
    let temporal = z_t.matmul_nt(u_t)?;
    let spatial = z_s.matmul_nt(u_s)?;
    Ok(temporal.mul(g)?.add(spatial.mul(g.one_minus())?)?)
}

/// `‖U_tᵀ U_s‖_F²`
pub fn orth_loss<'t>(u_t: Var<'t>, u_s: Var<'t>) -> Result<Var<'t>> {
    Ok(u_t.matmul_tn(u_s)?.frobenius_norm_sq())
}

/// Mean binary cross-entropy of probabilities `p` against a constant target.
pub fn bce<'t>(p: Var<'t>, target: f64) -> Result<Var<'t>> {
    let p = p.clamp(BCE_FLOOR, 1.0 - BCE_FLOOR);
    let pos = p.log()?.scale(-target);
    let neg = p.one_minus().log()?.scale(-(1.0 - target));
    Ok(pos.add(neg)?.mean())
}

/// Soft prior target `sigmoid(κ1·(c_t - c_s) + κ2·d)`, detached.
pub fn prior_target<'t>(features: &GateFeatures<'t>, kappa1: f64, kappa2: f64) -> Result<Var<'t>> {
    let logit = features
        .c_t
        .sub(features.c_s)?
        .scale(kappa1)
        .add(features.disagreement.scale(kappa2))?;
    Ok(logit.sigmoid().detach())
}
