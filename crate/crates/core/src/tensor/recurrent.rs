//! Fused gated recurrent unit over a time-major batch.
//!
//! Per step, with `h` the previous state (zeros at the first step):
//! `[z r] = σ(xp_zr + h·U_zr)`, `n = tanh(xp_n + (r ⊙ h)·U_n)`,
//! `h' = h + z ⊙ (n − h)`.

use super::gemm::{gemm, View};

/// Gate activations kept for the reverse pass, each `[T·B × d]`.
#[derive(Clone, Debug)]
pub(crate) struct GruCache {
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
}

pub(crate) struct GruDims {
    pub steps: usize,
    pub batch: usize,
    pub d: usize,
}

/// Returns the hidden states `[T·B × d]` and the cache.
pub(crate) fn forward(xp: &[f64], u_zr: &[f64], u_n: &[f64], dims: &GruDims) -> (Vec<f64>, GruCache) {
    let GruDims { steps, batch: b, d } = *dims;
    let len = steps * b * d;
    let mut h_all = vec![0.0; len];
    let mut cache = GruCache {
        z: vec![0.0; len],
        r: vec![0.0; len],
        n: vec![0.0; len],
        rh: vec![0.0; len],
    };
    let zeros = vec![0.0; b * d];
    let mut a_zr = vec![0.0; b * 2 * d];
    let mut a_n = vec![0.0; b * d];
    for t in 0..steps {
        let base = t * b * d;
        let prev: Vec<f64> = if t == 0 { zeros.clone() } else { h_all[base - b * d..base].to_vec() };
        gemm(&prev, View::dense(0, b, d), u_zr, View::dense(0, d, 2 * d), &mut a_zr, View::dense(0, b, 2 * d), false);
        for i in 0..b {
            let row = &xp[(t * b + i) * 3 * d..(t * b + i + 1) * 3 * d];
            for j in 0..d {
                let k = base + i * d + j;
                cache.z[k] = sigmoid(row[j] + a_zr[i * 2 * d + j]);
                cache.r[k] = sigmoid(row[d + j] + a_zr[i * 2 * d + d + j]);
                cache.rh[k] = cache.r[k] * prev[i * d + j];
            }
        }
        gemm(&cache.rh, View::dense(base, b, d), u_n, View::dense(0, d, d), &mut a_n, View::dense(0, b, d), false);
        for i in 0..b {
            let row = &xp[(t * b + i) * 3 * d..(t * b + i + 1) * 3 * d];
            for j in 0..d {
                let k = base + i * d + j;
                let n = (row[2 * d + j] + a_n[i * d + j]).tanh();
                cache.n[k] = n;
                let hp = prev[i * d + j];
                h_all[k] = hp + cache.z[k] * (n - hp);
            }
        }
    }
    (h_all, cache)
}

pub(crate) struct GruGrads {
    pub xp: Vec<f64>,
    pub u_zr: Vec<f64>,
    pub u_n: Vec<f64>,
}

/// Reverse pass given the gradient of every hidden state.
pub(crate) fn backward(
    h_all: &[f64],
    cache: &GruCache,
    u_zr: &[f64],
    u_n: &[f64],
    g: &[f64],
    dims: &GruDims,
) -> GruGrads {
    let GruDims { steps, batch: b, d } = *dims;
    let mut out = GruGrads {
        xp: vec![0.0; steps * b * 3 * d],
        u_zr: vec![0.0; d * 2 * d],
        u_n: vec![0.0; d * d],
    };
    let zeros = vec![0.0; b * d];
    let mut carry = vec![0.0; b * d];
    let mut da_zr = vec![0.0; b * 2 * d];
    let mut da_n = vec![0.0; b * d];
    let mut drh = vec![0.0; b * d];
    for t in (0..steps).rev() {
        let base = t * b * d;
        let prev: &[f64] = if t == 0 { &zeros } else { &h_all[base - b * d..base] };
        let mut dprev = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..d {
                let k = base + i * d + j;
                let q = i * d + j;
                let dh = g[k] + carry[q];
                let (z, n, hp) = (cache.z[k], cache.n[k], prev[q]);
                let dz = dh * (n - hp);
                let dn = dh * z;
                dprev[q] = dh * (1.0 - z);
                da_n[q] = dn * (1.0 - n * n);
                da_zr[i * 2 * d + j] = dz * z * (1.0 - z);
                out.xp[(t * b + i) * 3 * d + 2 * d + j] = da_n[q];
            }
        }
        // Candidate path: a_n = xp_n + rh·U_n.
        gemm(&cache.rh, View::dense(base, b, d).t(), &da_n, View::dense(0, b, d), &mut out.u_n, View::dense(0, d, d), true);
        gemm(&da_n, View::dense(0, b, d), u_n, View::dense(0, d, d).t(), &mut drh, View::dense(0, b, d), false);
        for i in 0..b {
            for j in 0..d {
                let k = base + i * d + j;
                let q = i * d + j;
                let r = cache.r[k];
                dprev[q] += drh[q] * r;
                let dr = drh[q] * prev[q];
                da_zr[i * 2 * d + d + j] = dr * r * (1.0 - r);
            }
        }
        for i in 0..b {
            let dst = (t * b + i) * 3 * d;
            out.xp[dst..dst + 2 * d].copy_from_slice(&da_zr[i * 2 * d..(i + 1) * 2 * d]);
        }
        // Gate path: a_zr = xp_zr + h·U_zr.
        gemm(prev, View::dense(0, b, d).t(), &da_zr, View::dense(0, b, 2 * d), &mut out.u_zr, View::dense(0, d, 2 * d), true);
        gemm(&da_zr, View::dense(0, b, 2 * d), u_zr, View::dense(0, d, 2 * d).t(), &mut dprev, View::dense(0, b, d), true);
        carry = dprev;
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
