use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsda_core::config::Bandwidth;
use tsda_core::encoders::{encode_spatial, encode_temporal, EncoderParams};
use tsda_core::fcca::{build_mask, decorr_loss, hsic, masked_attention, purity_loss, FccaParams};
use tsda_core::{Modality, ModalitySequence, ParamStore, Tape, Tensor};

const D: usize = 6;
const SLOTS: usize = 3;

fn encoders(seed: u64) -> (ParamStore, EncoderParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = EncoderParams::new(&mut store, [4, 4, 4], [SLOTS; 3], D, &mut rng);
    (store, params)
}

fn sequence(tokens: Tensor) -> ModalitySequence {
    ModalitySequence {
        modality: Modality::V,
        tokens,
    }
}

fn tokens(t: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, t * w).prop_map(move |d| Tensor::new(&[t, w], d).unwrap())
}

fn rows(n: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, n * w).prop_map(move |d| Tensor::new(&[n, w], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spatial_factor_ignores_token_order(
        (x, perm) in (2usize..12).prop_flat_map(|t| (tokens(t, 4), Just((0..t).collect::<Vec<_>>()).prop_shuffle())),
        seed in 0u64..50,
    ) {
        let (store, p) = encoders(seed);
        let a = encode_spatial(&p, &store, &sequence(x.clone())).unwrap();
        let b = encode_spatial(&p, &store, &sequence(x.select_rows(&perm))).unwrap();
        prop_assert_eq!(a.shape(), &[SLOTS, D]);
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn temporal_factor_is_causal(x in tokens(8, 4), y in tokens(8, 4), cut in 1usize..8, seed in 0u64..50) {
        let (store, p) = encoders(seed);
        let mut mixed = x.clone();
        for r in cut..8 {
            let src = y.row(r).to_vec();
            mixed.data_mut()[r * 4..(r + 1) * 4].copy_from_slice(&src);
        }
        let a = encode_temporal(&p, &store, &sequence(x)).unwrap();
        let b = encode_temporal(&p, &store, &sequence(mixed)).unwrap();
        for r in 0..cut {
            prop_assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn hsic_is_symmetric_and_shift_invariant(x in rows(6, 3), y in rows(6, 2), c in -10.0f64..10.0) {
        let tape = Tape::new();
        let (vx, vy) = (tape.constant(x), tape.constant(y));
        for bw in [Bandwidth::Median, Bandwidth::Fixed(1.3)] {
            let xy = hsic(vx, vy, bw).unwrap().item().unwrap();
            let yx = hsic(vy, vx, bw).unwrap().item().unwrap();
            let shifted = hsic(vx.add_scalar(c), vy, bw).unwrap().item().unwrap();
            prop_assert!((xy - yx).abs() <= 1e-10);
            prop_assert!((xy - shifted).abs() <= 1e-10);
            prop_assert!(xy >= -1e-12);
        }
    }
}

#[test]
fn spatial_factor_matches_a_direct_loop() {
    let (store, p) = encoders(4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::uniform(&[5, 4], 1.0, &mut rng);
    let got = encode_spatial(&p, &store, &sequence(x.clone())).unwrap();

    let h = &p.spatial[Modality::V.index()];
    let (w1, b1, w2, b2, proj) = (
        store.get(h.w1),
        store.get(h.b1),
        store.get(h.w2),
        store.get(h.b2),
        store.get(h.slot_proj),
    );
    let mut pooled = vec![0.0; D];
    for t in 0..5 {
        let hidden: Vec<f64> = (0..D)
            .map(|j| ((0..4).map(|k| x.at(t, k) * w1.at(k, j)).sum::<f64>() + b1.at(0, j)).tanh())
            .collect();
        for j in 0..D {
            pooled[j] += ((0..D).map(|k| hidden[k] * w2.at(k, j)).sum::<f64>() + b2.at(0, j)) / 5.0;
        }
    }
    for s in 0..SLOTS {
        for j in 0..D {
            let expect: f64 = (0..D).map(|k| pooled[k] * proj.at(k, s * D + j)).sum();
            assert!((got.at(s, j) - expect).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_queries_and_keys_give_uniform_block_attention() {
    let (n_t, n_s, d) = (3, 2, 4);
    let n = n_t + n_s;
    let mask = build_mask(&[1, 2], &[2]);
    let mut qkv = Tensor::zeros(&[n, 3 * d]);
    for i in 0..n {
        for j in 0..d {
            qkv.data_mut()[i * 3 * d + 2 * d + j] = (i * d + j) as f64;
        }
    }
    let tape = Tape::new();
    let (out, attn) = masked_attention(tape.constant(qkv.clone()), &mask.additive(), 1, d).unwrap();
    let (out, attn) = (out.value(), attn.value().reshaped(&[n, n]).unwrap());
    for i in 0..n {
        let block: Vec<usize> = if i < n_t { (0..n_t).collect() } else { (n_t..n).collect() };
        for j in 0..n {
            let expect = if block.contains(&j) { 1.0 / block.len() as f64 } else { 0.0 };
            assert!((attn.at(i, j) - expect).abs() <= 1e-15);
        }
        for c in 0..d {
            let mean = block.iter().map(|&r| qkv.at(r, 2 * d + c)).sum::<f64>() / block.len() as f64;
            assert!((out.at(i, c) - mean).abs() <= 1e-12);
        }
    }
}

#[test]
fn single_token_blocks_return_their_values() {
    let d = 3;
    let mask = build_mask(&[1], &[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let qkv = Tensor::uniform(&[2, 3 * d], 2.0, &mut rng);
    let tape = Tape::new();
    let (out, _) = masked_attention(tape.constant(qkv.clone()), &mask.additive(), 1, d).unwrap();
    let out = out.value();
    for i in 0..2 {
        assert_eq!(out.row(i), &qkv.row(i)[2 * d..]);
    }
}

#[test]
fn hsic_matches_the_kernel_formula() {
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::uniform(&[n, 3], 1.0, &mut rng);
    let y = Tensor::uniform(&[n, 2], 1.0, &mut rng);
    let sigma = 0.8;
    let kernel = |m: &Tensor| -> Vec<f64> {
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let sq: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                k[i * n + j] = (-sq / (2.0 * sigma * sigma)).exp();
            }
        }
        k
    };
    let center = |k: &[f64]| -> Vec<f64> {
        let row: Vec<f64> = (0..n).map(|i| (0..n).map(|j| k[i * n + j]).sum::<f64>() / n as f64).collect();
        let col: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k[i * n + j]).sum::<f64>() / n as f64).collect();
        let all = row.iter().sum::<f64>() / n as f64;
        (0..n * n).map(|ij| k[ij] - row[ij / n] - col[ij % n] + all).collect()
    };
    let (kc, lc) = (center(&kernel(&x)), center(&kernel(&y)));
    let expect = kc.iter().zip(&lc).map(|(a, b)| a * b).sum::<f64>() / ((n - 1) * (n - 1)) as f64;

    let tape = Tape::new();
    let got = hsic(tape.constant(x), tape.constant(y), Bandwidth::Fixed(sigma)).unwrap().item().unwrap();
    assert!((got - expect).abs() <= 1e-10, "{got} vs {expect}");
}

#[test]
fn identical_and_orthogonal_summaries_bound_the_cosine_term() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap());
    let w = tape.constant(Tensor::new(&[2, 2], vec![0.0, 3.0, -1.0, 0.0]).unwrap());
    let (same, used) = decorr_loss(z, z, 1.0, 0.0, Bandwidth::Median).unwrap();
    assert!(used);
    assert!((same.item().unwrap() - 1.0).abs() <= 1e-10);
    let (orth, _) = decorr_loss(z, w, 1.0, 0.0, Bandwidth::Median).unwrap();
    assert!(orth.item().unwrap().abs() <= 1e-12);
    let (single, used) = decorr_loss(z.slice_rows(0, 1).unwrap(), w.slice_rows(0, 1).unwrap(), 1.0, 1.0, Bandwidth::Median).unwrap();
    assert!(!used);
    assert!(single.item().unwrap().abs() <= 1e-12);
}

#[test]
fn a_discriminator_step_lowers_purity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let p = FccaParams::new(&mut store, D, false, &mut rng);
    let h_t = Tensor::uniform(&[10, D], 1.0, &mut rng);
    let h_s = Tensor::uniform(&[6, D], 1.0, &mut rng);
    let loss_at = |store: &ParamStore| {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let dt = p.discriminate(&bound, tape.constant(h_t.clone())).unwrap();
        let ds = p.discriminate(&bound, tape.constant(h_s.clone())).unwrap();
        let loss = purity_loss(dt, ds).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g: Vec<Tensor> = store.ids().map(|id| grads.get_or_zeros(bound[id])).collect();
        (loss.item().unwrap(), g)
    };
    let (before, grads) = loss_at(&store);
    let ids: Vec<_> = store.ids().collect();
    for (id, g) in ids.into_iter().zip(&grads) {
        let t = store.get_mut(id);
        for (v, dv) in t.data_mut().iter_mut().zip(g.data()) {
            *v -= 0.05 * dv;
        }
    }
    let (after, _) = loss_at(&store);
    assert!(after < before, "{after} >= {before}");
}
