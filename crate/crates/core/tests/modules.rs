mod common;

use common::*;
use mian::behavior::{self, IbimParams, NormPlacement, TransformerParams};
use mian::global::{self, GlobalParams, Slot};
use mian::interaction::{self, LocalAttentionParams};
use mian::numerics::{ParamKind, ParamStore};
use mian::{Matrix, MianError};
use proptest::prelude::*;

const D: usize = 8;
const HEADS: usize = 2;
const EPS: f64 = 1e-6;

fn transformer_store(seed: u64) -> (ParamStore<f64>, TransformerParams, IbimParams) {
    let mut store = ParamStore::new();
    let ini = init(seed, 0.4);
    let tp = TransformerParams::register("t", D, HEADS, 16, EPS, &mut store, &ini).unwrap();
    let ip = IbimParams::register("s", D, &mut store, &ini);
    perturb_biases_and_gains(&mut store, &mut rng(seed + 1000));
    (store, tp, ip)
}

fn ln_oracle(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (0..x.len()).map(|i| g[i] * (x[i] - mean) / (var + EPS).sqrt() + b[i]).collect()
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn mhsa_oracle(x: &[Vec<f64>], mask: &[bool], p: &TransformerParams, s: &ParamStore<f64>) -> Vec<Vec<f64>> {
    let dh = D / HEADS;
    let (wq, wk, wv, wo) = (s.value(p.wq), s.value(p.wk), s.value(p.wv), s.value(p.wo));
    let q: Vec<Vec<f64>> = x.iter().map(|r| vecmat(r, wq)).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|r| vecmat(r, wk)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| vecmat(r, wv)).collect();
    let valid: Vec<usize> = (0..x.len()).filter(|&t| mask[t]).collect();
    x.iter()
        .enumerate()
        .map(|(t, _)| {
            let mut cat = vec![0.0; D];
            for h in 0..HEADS {
                let cols = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = valid
                    .iter()
                    .map(|&u| dot(&q[t][cols.clone()], &k[u][cols.clone()]) / (dh as f64).sqrt())
                    .collect();
                let a = softmax(&scores);
                for (w, &u) in a.iter().zip(&valid) {
                    for c in cols.clone() {
                        cat[c] += w * v[u][c];
                    }
                }
            }
            vecmat(&cat, wo)
        })
        .collect()
}

fn ffn_oracle(x: &[f64], p: &TransformerParams, s: &ParamStore<f64>) -> Vec<f64> {
    let h: Vec<f64> = vecmat(x, s.value(p.w1))
        .iter()
        .zip(s.value(p.b1).data())
        .map(|(a, b)| (a + b).max(0.0))
        .collect();
    vecmat(&h, s.value(p.w2)).iter().zip(s.value(p.b2).data()).map(|(a, b)| a + b).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn block_oracle(x: &[Vec<f64>], mask: &[bool], p: &TransformerParams, s: &ParamStore<f64>, pre: bool) -> Vec<Vec<f64>> {
    let ln = |rows: &[Vec<f64>], g, b| -> Vec<Vec<f64>> {
        let (g, b): (&Matrix, &Matrix) = (s.value(g), s.value(b));
        rows.iter().map(|r| ln_oracle(r, g.data(), b.data())).collect()
    };
    if pre {
        let m = mhsa_oracle(&ln(x, p.ln1_gain, p.ln1_shift), mask, p, s);
        let x1: Vec<Vec<f64>> = x.iter().zip(&m).map(|(a, b)| add(a, b)).collect();
        let l2 = ln(&x1, p.ln2_gain, p.ln2_shift);
        x1.iter().zip(&l2).map(|(a, l)| add(a, &ffn_oracle(l, p, s))).collect()
    } else {
        let m = mhsa_oracle(x, mask, p, s);
        let r1: Vec<Vec<f64>> = x.iter().zip(&m).map(|(a, b)| add(a, b)).collect();
        let x1 = ln(&r1, p.ln1_gain, p.ln1_shift);
        let r2: Vec<Vec<f64>> = x1.iter().map(|a| add(a, &ffn_oracle(a, p, s))).collect();
        ln(&r2, p.ln2_gain, p.ln2_shift)
    }
}

fn mask_of(valid: usize, total: usize) -> Vec<bool> {
    (0..total).map(|t| t < valid).collect()
}

#[test]
fn attention_matches_explicit_per_head_computation() {
    for seed in 0..5 {
        let (store, tp, _) = transformer_store(seed);
        let mut r = rng(seed);
        let x = random_matrix(&mut r, 6, D, 1.0);
        let mask = mask_of(4, 6);
        let got = behavior::multi_head_self_attention(&x, &mask, &tp, &store).unwrap();
        let want = mhsa_oracle(&rows_of(&x), &mask, &tp, &store);
        for t in 0..4 {
            assert!(max_abs_diff(got.row(t), &want[t]) < 1e-12);
        }
    }
}

#[test]
fn both_block_placements_match_explicit_computation() {
    for seed in 0..5 {
        let (store, tp, _) = transformer_store(seed);
        let x = random_matrix(&mut rng(seed), 5, D, 1.0);
        let mask = mask_of(5, 5);
        for (placement, pre) in [(NormPlacement::Pre, true), (NormPlacement::Post, false)] {
            let got = behavior::transformer(&x, &mask, &tp, &store, placement).unwrap();
            let want = block_oracle(&rows_of(&x), &mask, &tp, &store, pre);
            for t in 0..5 {
                assert!(max_abs_diff(got.row(t), &want[t]) < 1e-12, "{placement:?}");
            }
        }
    }
}

#[test]
fn pre_and_post_placements_differ() {
    let (store, tp, _) = transformer_store(3);
    let x = random_matrix(&mut rng(3), 5, D, 1.0);
    let mask = mask_of(5, 5);
    let pre = behavior::transformer(&x, &mask, &tp, &store, NormPlacement::Pre).unwrap();
    let post = behavior::transformer(&x, &mask, &tp, &store, NormPlacement::Post).unwrap();
    assert!(pre.max_abs_diff(&post) > 1e-3);
}

#[test]
fn zero_weight_block_is_the_identity() {
    let (mut store, tp, ip) = transformer_store(4);
    for id in [tp.wq, tp.wk, tp.wv, tp.wo, tp.w1, tp.b1, tp.w2, tp.b2] {
        store.value_mut(id).fill(0.0);
    }
    let mut r = rng(4);
    let e_b = random_matrix(&mut r, 5, D, 1.0);
    let mask = mask_of(3, 5);
    let h_b = behavior::pre_ln_transformer(&e_b, &mask, &tp, &store).unwrap();
    assert_eq!(h_b, e_b);
    let e_i = random_vec(&mut r, D, 1.0);
    let direct = behavior::ibim_attention(&e_i, &e_b, &mask, &ip, &store).unwrap();
    let encoded = behavior::ibim_attention(&e_i, &h_b, &mask, &ip, &store).unwrap();
    assert_eq!(direct, encoded);
}

#[test]
fn all_masked_attention_is_an_error() {
    let (store, tp, ip) = transformer_store(5);
    let x = random_matrix(&mut rng(5), 3, D, 1.0);
    let none = [false; 3];
    assert!(matches!(
        behavior::multi_head_self_attention(&x, &none, &tp, &store),
        Err(MianError::AllMasked)
    ));
    assert!(behavior::ibim_attention(&[0.0; D], &x, &none, &ip, &store).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_rows_never_reach_valid_outputs(seed in 0u64..1000, valid in 1usize..6, extra in 1usize..5) {
        let (store, tp, ip) = transformer_store(seed % 7);
        let mut r = rng(seed);
        let short = random_matrix(&mut r, valid, D, 1.0);
        let e_i = random_vec(&mut r, D, 1.0);
        let garbage = random_matrix(&mut r, extra, D, 5.0);
        let mut long_rows = rows_of(&short);
        long_rows.extend(rows_of(&garbage));
        let long = Matrix::from_rows(&long_rows).unwrap();
        for placement in [NormPlacement::Pre, NormPlacement::Post] {
            let a = behavior::transformer(&short, &mask_of(valid, valid), &tp, &store, placement).unwrap();
            let b = behavior::transformer(&long, &mask_of(valid, valid + extra), &tp, &store, placement).unwrap();
            for t in 0..valid {
                prop_assert!(max_abs_diff(a.row(t), b.row(t)) < 1e-12);
            }
            let (ra, aa) = behavior::ibim_attention(&e_i, &a, &mask_of(valid, valid), &ip, &store).unwrap();
            let (rb, ab) = behavior::ibim_attention(&e_i, &b, &mask_of(valid, valid + extra), &ip, &store).unwrap();
            prop_assert!(max_abs_diff(&ra, &rb) < 1e-12);
            prop_assert!(max_abs_diff(&aa, &ab[..valid]) < 1e-12);
            prop_assert!(ab[valid..].iter().all(|&w| w == 0.0));
        }
    }
}

/// `alpha = softmax(tanh(V w + b))` over the valid rows and `R = sum alpha V`.
fn pool_oracle(e_i: &[f64], rows: &[Vec<f64>], w: &[Vec<f64>], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let vs: Vec<Vec<f64>> = rows.iter().map(|r| [e_i, r.as_slice()].concat()).collect();
    let scores: Vec<f64> = vs.iter().zip(w).zip(b).map(|((v, w), b)| (dot(v, w) + b).tanh()).collect();
    let alpha = softmax(&scores);
    let mut r = vec![0.0; 2 * D];
    for (a, v) in alpha.iter().zip(&vs) {
        for (ri, vi) in r.iter_mut().zip(v) {
            *ri += a * vi;
        }
    }
    (r, alpha)
}

#[test]
fn ibim_matches_explicit_pooling() {
    for seed in 0..10 {
        let (store, _, ip) = transformer_store(seed);
        let mut r = rng(seed);
        let h_b = random_matrix(&mut r, 6, D, 1.0);
        let e_i = random_vec(&mut r, D, 1.0);
        let (got_r, got_a) = behavior::ibim_attention(&e_i, &h_b, &mask_of(4, 6), &ip, &store).unwrap();
        let w = store.value(ip.w).data().to_vec();
        let b = store.value(ip.b).data()[0];
        let rows = rows_of(&h_b)[..4].to_vec();
        let (want_r, want_a) = pool_oracle(&e_i, &rows, &vec![w; 4], &[b; 4]);
        assert!(max_abs_diff(&got_r, &want_r) < 1e-12);
        assert!(max_abs_diff(&got_a[..4], &want_a) < 1e-12);
        assert_eq!(&got_a[4..], &[0.0, 0.0]);
    }
}

#[test]
fn ibim_single_and_identical_elements() {
    let (store, _, ip) = transformer_store(2);
    let mut r = rng(2);
    let e_i = random_vec(&mut r, D, 1.0);
    let h = random_matrix(&mut r, 3, D, 1.0);
    let (rep, a) = behavior::ibim_attention(&e_i, &h, &mask_of(1, 3), &ip, &store).unwrap();
    assert_eq!(a, vec![1.0, 0.0, 0.0]);
    assert_eq!(rep, [e_i.as_slice(), h.row(0)].concat());

    let row = random_vec(&mut r, D, 1.0);
    let same = Matrix::from_rows(&[row.clone(), row.clone(), row.clone(), row.clone()]).unwrap();
    let (rep, a) = behavior::ibim_attention(&e_i, &same, &mask_of(4, 4), &ip, &store).unwrap();
    assert!(a.iter().all(|&w| (w - 0.25).abs() < 1e-15));
    assert!(max_abs_diff(&rep, &[e_i.as_slice(), &row].concat()) < 1e-15);
}

fn local_store(seed: u64, fields: usize) -> (ParamStore<f64>, LocalAttentionParams) {
    let mut store = ParamStore::new();
    let p = LocalAttentionParams::register("l", fields, D, &mut store, &init(seed, 0.5)).unwrap();
    perturb_biases_and_gains(&mut store, &mut rng(seed + 77));
    (store, p)
}

#[test]
fn local_attention_matches_explicit_pooling() {
    for seed in 0..10 {
        let (store, p) = local_store(seed, 5);
        let mut r = rng(seed);
        let e_i = random_vec(&mut r, D, 1.0);
        let e_u = random_matrix(&mut r, 5, D, 1.0);
        let w = rows_of(store.value(p.w));
        let b = store.value(p.b).data().to_vec();
        let (want_r, want_a) = pool_oracle(&e_i, &rows_of(&e_u), &w, &b);
        for (got_r, got_a) in [
            interaction::iuim(&e_i, &e_u, &p, &store).unwrap(),
            interaction::icim(&e_i, &e_u, &p, &store).unwrap(),
        ] {
            assert!(max_abs_diff(&got_r, &want_r) < 1e-12);
            assert!(max_abs_diff(&got_a, &want_a) < 1e-12);
            assert_eq!(&got_r[..D], e_i.as_slice());
        }
    }
}

#[test]
fn local_attention_limits() {
    let (store, p) = local_store(1, 1);
    let mut r = rng(1);
    let e_i = random_vec(&mut r, D, 1.0);
    let e_u = random_matrix(&mut r, 1, D, 1.0);
    let (rep, a) = interaction::iuim(&e_i, &e_u, &p, &store).unwrap();
    assert_eq!(a, vec![1.0]);
    assert_eq!(rep, [e_i.as_slice(), e_u.row(0)].concat());

    let (mut store, p) = local_store(2, 4);
    let w0 = store.value(p.w).row(0).to_vec();
    for j in 0..4 {
        store.value_mut(p.w).row_mut(j).copy_from_slice(&w0);
        store.value_mut(p.b).data_mut()[j] = 0.1;
    }
    let row = random_vec(&mut r, D, 1.0);
    let same = Matrix::from_rows(&vec![row; 4]).unwrap();
    let (_, a) = interaction::icim(&e_i, &same, &p, &store).unwrap();
    assert!(a.iter().all(|&w| (w - 0.25).abs() < 1e-15));

    assert!(matches!(
        LocalAttentionParams::register("l", 0, D, &mut ParamStore::<f64>::new(), &init(0, 0.1)),
        Err(MianError::Schema(_))
    ));
    assert!(interaction::iuim(&e_i, &Matrix::zeros(0, D), &p, &store).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn local_attention_is_jointly_permutation_symmetric(seed in 0u64..1000, shift in 1usize..5) {
        let k = 5;
        let (store, p) = local_store(seed, k);
        let mut r = rng(seed);
        let e_i = random_vec(&mut r, D, 1.0);
        let e_c = random_matrix(&mut r, k, D, 1.0);
        let perm: Vec<usize> = (0..k).map(|j| (j * 2 + shift) % k).collect();
        let mut permuted = store.clone();
        let (w, b) = (store.value(p.w).clone(), store.value(p.b).clone());
        for (dst, &src) in perm.iter().enumerate() {
            permuted.value_mut(p.w).row_mut(dst).copy_from_slice(w.row(src));
            permuted.value_mut(p.b).data_mut()[dst] = b.data()[src];
        }
        let e_c_perm = Matrix::from_rows(&perm.iter().map(|&s| e_c.row(s).to_vec()).collect::<Vec<_>>()).unwrap();
        let (r0, a0) = interaction::icim(&e_i, &e_c, &p, &store).unwrap();
        let (r1, a1) = interaction::icim(&e_i, &e_c_perm, &p, &permuted).unwrap();
        prop_assert!(max_abs_diff(&r0, &r1) < 1e-12);
        for (dst, &src) in perm.iter().enumerate() {
            prop_assert!((a1[dst] - a0[src]).abs() < 1e-15);
        }
    }
}

fn global_store(seed: u64) -> (ParamStore<f64>, GlobalParams) {
    let mut store = ParamStore::new();
    let p = GlobalParams::register("g", D, &mut store, &init(seed, 0.5));
    perturb_biases_and_gains(&mut store, &mut rng(seed + 5));
    (store, p)
}

#[test]
fn gim_matches_explicit_weighting_and_bound() {
    for seed in 0..20 {
        let (store, p) = global_store(seed);
        let mut r = rng(seed);
        let slots: Vec<Vec<f64>> = (0..7).map(|_| random_vec(&mut r, D, 3.0)).collect();
        let (r_g, alpha) = global::gim(&slots, &p, &store).unwrap();
        let w = store.value(p.w);
        let b = store.value(p.b).data();
        let scores: Vec<f64> = (0..7).map(|l| (dot(&slots[l], w.row(l)) + b[l]).tanh()).collect();
        assert!(max_abs_diff(&alpha, &softmax(&scores)) < 1e-15);
        let recon: Vec<f64> = (0..D).map(|c| (0..7).map(|l| alpha[l] * slots[l][c]).sum()).collect();
        assert!(max_abs_diff(&r_g, &recon) < 1e-12);
        let (mx, mn) = alpha.iter().fold((0.0f64, 1.0f64), |(a, b), &w| (a.max(w), b.min(w)));
        assert!(mx / mn <= 2f64.exp());
    }
}

#[test]
fn gim_uniform_limit_and_slot_count() {
    let (mut store, p) = global_store(1);
    let w0 = store.value(p.w).row(0).to_vec();
    for l in 0..7 {
        store.value_mut(p.w).row_mut(l).copy_from_slice(&w0);
        store.value_mut(p.b).data_mut()[l] = -0.2;
    }
    let slot = random_vec(&mut rng(1), D, 1.0);
    let (r_g, alpha) = global::gim(&vec![slot.clone(); 7], &p, &store).unwrap();
    assert!(alpha.iter().all(|&a| (a - 1.0 / 7.0).abs() < 1e-15));
    assert!(max_abs_diff(&r_g, &slot) < 1e-15);
    assert!(global::gim(&vec![slot; 6], &p, &store).is_err());
    let labels: Vec<&str> = Slot::ALL.iter().map(|s| s.label()).collect();
    assert_eq!(labels, ["e_i", "e_b", "e_u", "e_c", "R_ibim", "R_iuim", "R_icim"]);
}

#[test]
fn slots_pool_groups_and_project_interactions() {
    let (store, p) = global_store(3);
    let mut r = rng(3);
    let e_i = random_vec(&mut r, D, 1.0);
    let e_b = random_matrix(&mut r, 4, D, 1.0);
    let e_u = random_matrix(&mut r, 1, D, 1.0);
    let e_c = random_matrix(&mut r, 3, D, 1.0);
    let reps: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut r, 2 * D, 1.0)).collect();
    let slots = global::assemble_slots(&e_i, &e_b, &[true, true, false, false], &e_u, &e_c, &reps[0], &reps[1], &reps[2], &p, &store)
        .unwrap();
    assert_eq!(slots.len(), 7);
    assert!(slots.iter().all(|s| s.len() == D));
    assert_eq!(slots[0], e_i);
    let mean_b: Vec<f64> = (0..D).map(|c| (e_b.get(0, c) + e_b.get(1, c)) / 2.0).collect();
    assert!(max_abs_diff(&slots[1], &mean_b) < 1e-15);
    assert_eq!(slots[2], e_u.row(0));
    let mean_c: Vec<f64> = (0..D).map(|c| (0..3).map(|t| e_c.get(t, c)).sum::<f64>() / 3.0).collect();
    assert!(max_abs_diff(&slots[3], &mean_c) < 1e-15);
    for k in 0..3 {
        assert!(max_abs_diff(&slots[4 + k], &vecmat(&reps[k], store.value(p.p_r))) < 1e-12);
    }
    let empty = global::assemble_slots(&e_i, &e_b, &[false; 4], &e_u, &e_c, &reps[0], &reps[1], &reps[2], &p, &store).unwrap();
    assert!(empty[1].iter().all(|&v| v == 0.0));
}

#[test]
fn registered_shapes_and_kinds() {
    let (store, tp, ip) = transformer_store(0);
    assert_eq!(store.value(tp.wq).shape(), (D, D));
    assert_eq!(store.value(tp.w1).shape(), (D, 16));
    assert_eq!(store.value(ip.w).shape(), (2 * D, 1));
    assert_eq!(store.get(tp.ln1_gain).kind, ParamKind::Gain);
    let bad = TransformerParams::register("t", 6, 4, 8, EPS, &mut ParamStore::<f64>::new(), &init(0, 0.1));
    assert!(matches!(bad, Err(MianError::Config(_))));
}
