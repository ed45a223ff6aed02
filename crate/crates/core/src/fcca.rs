//! Factor-consistent cross-modal alignment.
//!
//! All temporal tokens of all modalities and all spatial tokens are stacked
//! into one sequence and attended jointly, but an additive block-diagonal mask
//! restricts every token to keys of its own factor. Within a factor, tokens
//! attend across and within modalities.

use rand::Rng;

use crate::config::Bandwidth;
use crate::encoders::{init_weight, token_mean, FactorBundle};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError, Var, MASK_SENTINEL};

pub const DISC_HIDDEN: usize = 16;

/// Keeps `log` away from zero when a discriminator output saturates.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Factor {
    Temporal,
    Spatial,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorMask {
    /// Binary `[N × N]` with `N = N_t + N_s`.
    pub mask: Tensor,
    pub factor_index: Vec<Factor>,
}

impl FactorMask {
    pub fn n_temporal(&self) -> usize {
        self.factor_index.iter().filter(|f| **f == Factor::Temporal).count()
    }

    pub fn n_spatial(&self) -> usize {
        self.factor_index.len() - self.n_temporal()
    }

    pub fn size(&self) -> usize {
        self.factor_index.len()
    }

    /// `0` where attention is allowed, the mask sentinel elsewhere.
    pub fn additive(&self) -> Tensor {
        let data = self
            .mask
            .data()
            .iter()
            .map(|&m| if m == 1.0 { 0.0 } else { MASK_SENTINEL })
            .collect();
        Tensor::new(self.mask.shape(), data).expect("mask shape")
    }

    /// Every token may attend to every other token (the unaligned ablation).
    pub fn unmasked(&self) -> Self {
        let n = self.size();
        Self {
            mask: Tensor::full(&[n, n], 1.0),
            factor_index: self.factor_index.clone(),
        }
    }
}

/// Block-diagonal factor mask for temporal counts `T_m` and spatial counts
/// `S_m`; rows are ordered all temporal tokens first, then all spatial.
pub fn build_mask(temporal: &[usize], spatial: &[usize]) -> FactorMask {
    let n_t: usize = temporal.iter().sum();
    let n_s: usize = spatial.iter().sum();
    let factor_index: Vec<Factor> = std::iter::repeat_n(Factor::Temporal, n_t)
        .chain(std::iter::repeat_n(Factor::Spatial, n_s))
        .collect();
    let n = n_t + n_s;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if factor_index[i] == factor_index[j] {
                data[i * n + j] = 1.0;
            }
        }
    }
    FactorMask {
        mask: Tensor::new(&[n, n], data).expect("mask shape"),
        factor_index,
    }
}

#[derive(Clone, Debug)]
pub struct FccaParams {
    pub d_model: usize,
    /// Joint Q|K|V projection `[d × 3d]`, applied to temporal tokens (and to
    /// spatial tokens unless `qkv_spatial` is set).
    pub qkv: ParamId,
    pub qkv_spatial: Option<ParamId>,
    pub disc_w1: ParamId,
    pub disc_b1: ParamId,
    pub disc_w2: ParamId,
    pub disc_b2: ParamId,
}

impl FccaParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, factor_specific: bool, rng: &mut R) -> Self {
        let qkv = store.add("fcca.qkv", init_weight(d, 3 * d, rng));
        let qkv_spatial = factor_specific.then(|| store.add("fcca.qkv_spatial", init_weight(d, 3 * d, rng)));
        Self {
            d_model: d,
            qkv,
            qkv_spatial,
            disc_w1: store.add("fcca.disc.w1", init_weight(d, DISC_HIDDEN, rng)),
            disc_b1: store.add("fcca.disc.b1", Tensor::zeros(&[1, DISC_HIDDEN])),
            disc_w2: store.add("fcca.disc.w2", init_weight(DISC_HIDDEN, 1, rng)),
            disc_b2: store.add("fcca.disc.b2", Tensor::zeros(&[1, 1])),
        }
    }

    /// Discriminator `D`: probability that each row is a temporal token.
    pub fn discriminate<'t>(&self, bound: &Bound<'t>, rows: Var<'t>) -> Result<Var<'t>> {
        Ok(rows
            .matmul(bound[self.disc_w1])?
            .add(bound[self.disc_b1])?
            .tanh()
            .matmul(bound[self.disc_w2])?
            .add(bound[self.disc_b2])?
            .sigmoid())
    }
}

/// FCCA outputs for a batch of `B` samples sharing one mask.
#[derive(Clone, Debug)]
pub struct AlignedSummaries<'t> {
    pub batch: usize,
    /// `[B·N_t × d]`, sample-major.
    pub h_t: Var<'t>,
    /// `[B·N_s × d]`, sample-major.
    pub h_s: Var<'t>,
    /// `[B × d]`
    pub z_t: Var<'t>,
    pub z_s: Var<'t>,
    /// `[B·N_t × 1]`
    pub disc_t: Var<'t>,
    /// `[B·N_s × 1]`
    pub disc_s: Var<'t>,
    /// Post-softmax attention weights `[B × N × N]`.
    pub attention: Var<'t>,
}

/// Stacks the bundle into per-sample sequences `[L_t, V_t, A_t, L_s, V_s, A_s]`
/// and returns the row order into `concat(temporal..., spatial...)`.
fn joint_order(bundle: &FactorBundle<'_>) -> Vec<usize> {
    let b = bundle.batch;
    let counts: Vec<usize> = bundle.lengths.iter().chain(&bundle.slots).copied().collect();
    let mut offsets = Vec::with_capacity(6);
    let mut acc = 0;
    for &c in &counts {
        offsets.push(acc);
        acc += b * c;
    }
    let mut order = Vec::with_capacity(acc);
    for sample in 0..b {
        for (&off, &c) in offsets.iter().zip(&counts) {
            order.extend((0..c).map(|i| off + sample * c + i));
        }
    }
    order
}

/// Masked single-head attention over per-sample sequences `[B·N × d]`
/// already projected to `[B·N × 3d]` (Q|K|V).
pub fn masked_attention<'t>(qkv: Var<'t>, additive_mask: &Tensor, batch: usize, d: usize) -> Result<(Var<'t>, Var<'t>)> {
    let n = additive_mask.rows();
    let split = |lo: usize| -> Result<Var<'t>> { Ok(qkv.slice_cols(lo, lo + d)?.reshape(&[batch, n, d])?) };
    let (q, k, v) = (split(0)?, split(d)?, split(2 * d)?);
    let mask = qkv.tape().constant(additive_mask.clone());
    let attn = q
        .matmul_nt(k)?
        .scale(1.0 / (d as f64).sqrt())
        .add(mask)?
        .softmax_rows()?;
    let out = attn.matmul(v)?.reshape(&[batch * n, d])?;
    Ok((out, attn))
}

/// Block-diagonal masked attention, mean pooling and the purity
/// discriminator over a batch bundle.
pub fn fcca_attend<'t>(bound: &Bound<'t>, params: &FccaParams, bundle: &FactorBundle<'t>, mask: &FactorMask) -> Result<AlignedSummaries<'t>> {
    let d = params.d_model;
    let b = bundle.batch;
    let n_t: usize = bundle.lengths.iter().sum();
    let n_s: usize = bundle.slots.iter().sum();
    if mask.size() != n_t + n_s || mask.n_temporal() != n_t {
        return Err(TensorError::DimensionMismatch {
            op: "fcca mask",
            lhs: mask.mask.shape().to_vec(),
            rhs: vec![n_t + n_s, n_t + n_s],
        }
        .into());
    }
    let temporal = Var::concat_rows(&bundle.temporal)?;
    let spatial = Var::concat_rows(&bundle.spatial)?;
    let qkv_t = temporal.matmul(bound[params.qkv])?;
    let qkv_s = spatial.matmul(bound[params.qkv_spatial.unwrap_or(params.qkv)])?;
    // `joint_order` indexes concat(L_t, V_t, A_t, L_s, V_s, A_s).
    let qkv = Var::concat_rows(&[qkv_t, qkv_s])?.gather_rows(&joint_order(bundle))?;
    let (aligned, attention) = masked_attention(qkv, &mask.additive(), b, d)?;

    let n = n_t + n_s;
    let t_rows: Vec<usize> = (0..b).flat_map(|s| (0..n_t).map(move |i| s * n + i)).collect();
    let s_rows: Vec<usize> = (0..b).flat_map(|s| (n_t..n).map(move |i| s * n + i)).collect();
    let h_t = aligned.gather_rows(&t_rows)?;
    let h_s = aligned.gather_rows(&s_rows)?;
    let disc = params.discriminate(bound, aligned)?;
    Ok(AlignedSummaries {
        batch: b,
        z_t: token_mean(h_t, b, n_t, d)?,
        z_s: token_mean(h_s, b, n_s, d)?,
        disc_t: disc.gather_rows(&t_rows)?,
        disc_s: disc.gather_rows(&s_rows)?,
        h_t,
        h_s,
        attention,
    })
}

/// Mean of `-log D` over temporal tokens plus mean of `-log(1 - D)` over
/// spatial tokens. Minimized by both `D` and the upstream encoders.
pub fn purity_loss<'t>(disc_t: Var<'t>, disc_s: Var<'t>) -> Result<Var<'t>> {
    let temporal = disc_t.clamp(PROB_FLOOR, 1.0).log()?.mean().neg();
    let spatial = disc_s.one_minus().clamp(PROB_FLOOR, 1.0).log()?.mean().neg();
    Ok(temporal.add(spatial)?)
}

/// Row-wise cosine similarity of two `[n × d]` matrices, `[n × 1]`.
pub fn row_cosine<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let dot = a.mul(b)?.sum_axis(1)?;
    let na = a.square().sum_axis(1)?.add_scalar(1e-12).sqrt()?;
    let nb = b.square().sum_axis(1)?.add_scalar(1e-12).sqrt()?;
    Ok(dot.div(na.mul(nb)?)?)
}

/// Pairwise squared Euclidean distances between rows, `[n × n]`.
pub fn pairwise_sq_dist<'t>(z: Var<'t>) -> Result<Var<'t>> {
    let norms = z.square().sum_axis(1)?;
    let gram = z.matmul_nt(z)?;
    Ok(norms.add(norms.transpose()?)?.sub(gram.scale(2.0))?)
}

/// Median pairwise distance over `i < j`, differentiable through the selected
/// entries; `None` when it is zero.
fn median_distance<'t>(sq: Var<'t>) -> Result<Option<Var<'t>>> {
    let n = sq.shape()[0];
    let value = sq.value();
    let mut pairs: Vec<(f64, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| (value.at(i, j).max(0.0), i * n + j))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let m = pairs.len();
    let picks: Vec<usize> = if m % 2 == 1 {
        vec![pairs[m / 2].1]
    } else {
        vec![pairs[m / 2 - 1].1, pairs[m / 2].1]
    };
    if picks.iter().any(|&k| value.data()[k] <= 1e-24) {
        return Ok(None);
    }
    let flat = sq.reshape(&[n * n, 1])?;
    let chosen = flat.gather_rows(&picks)?.sqrt()?;
    Ok(Some(chosen.mean()))
}

/// Gaussian kernel matrix `exp(-‖x_i - x_j‖² / (2σ²))`.
pub fn gaussian_kernel<'t>(z: Var<'t>, bandwidth: Bandwidth) -> Result<Var<'t>> {
    let sq = pairwise_sq_dist(z)?;
    let tape = z.tape();
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) => tape.scalar(s),
        Bandwidth::Median => median_distance(sq)?.unwrap_or_else(|| tape.scalar(1.0)),
    };
    let denom = sigma.square().scale(2.0);
    Ok(sq.div(denom)?.neg().exp())
}

/// Biased empirical HSIC, `trace(K H L H) / (n - 1)²`, over paired rows.
pub fn hsic<'t>(x: Var<'t>, y: Var<'t>, bandwidth: Bandwidth) -> Result<Var<'t>> {
    let n = x.shape()[0];
    if n < 2 || y.shape()[0] != n {
        return Err(TensorError::Invalid(format!("hsic needs n >= 2 paired rows, got {n}")).into());
    }
    let mut centering = Tensor::eye(n);
    centering.data_mut().iter_mut().for_each(|v| *v -= 1.0 / n as f64);
    let h = x.tape().constant(centering);
    let k = gaussian_kernel(x, bandwidth)?.matmul(h)?;
    let l = gaussian_kernel(y, bandwidth)?.matmul(h)?;
    Ok(k.matmul(l)?.trace()?.scale(1.0 / ((n - 1) * (n - 1)) as f64))
}

/// Decorrelation loss for a batch of summaries `[n × d]`:
/// `λ_c · mean cos²(Z_t, Z_s) + λ_h · HSIC(Z_t, Z_s)`. The HSIC term is
/// skipped (second value `false`) when `n < 2`.
pub fn decorr_loss<'t>(z_t: Var<'t>, z_s: Var<'t>, lambda_c: f64, lambda_h: f64, bandwidth: Bandwidth) -> Result<(Var<'t>, bool)> {
    let cos_term = row_cosine(z_t, z_s)?.square().mean().scale(lambda_c);
    if z_t.shape()[0] < 2 {
        return Ok((cos_term, false));
    }
    let h = hsic(z_t, z_s, bandwidth)?.scale(lambda_h);
    Ok((cos_term.add(h)?, true))
}
