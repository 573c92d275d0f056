use super::*;
use crate::tensor::{central_diff_grad, max_rel_error, Tape};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

/// Values on a dyadic lattice so that `a + (b - a) == b` holds bit-exactly.
fn dyadic(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (1u64 << 20) as f64;
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-(1 << 20)..(1 << 20)) as f64 / scale)
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

#[test]
fn reconstruction_identity_is_bit_exact_on_dyadic_values() {
    let i1v = dyadic(&[1, 4, 8], 1);
    let i2v = dyadic(&[1, 4, 8], 2);
    let tape: Tape<f64> = Tape::new();
    let i1 = tape.input(i1v.clone());
    let i2 = tape.input(i2v.clone());
    let d2 = tape.input(&i2v - &i1v);
    let d1 = tape.input(&i1v - &i2v);
    let (hat1, hat2) = reconstruct(i1, i2, Some(d1), Some(d2), Directionality::TwoWay).unwrap();
    assert_eq!(hat2.unwrap().value(), i2v);
    assert_eq!(hat1.unwrap().value(), i1v);
}

#[test]
fn directionality_selects_outputs() {
    let tape: Tape<f64> = Tape::new();
    let i1 = tape.input(randn(&[2, 3], 3));
    let i2 = tape.input(randn(&[2, 3], 4));
    let d1 = tape.input(randn(&[2, 3], 5));
    let d2 = tape.input(randn(&[2, 3], 6));
    let (h1, h2) = reconstruct(i1, i2, Some(d1), Some(d2), Directionality::OneWayEq1).unwrap();
    assert!(h1.is_none());
    assert!(h2.is_some());
    let (h1, h2) = reconstruct(i1, i2, Some(d1), None, Directionality::OneWayEq2).unwrap();
    assert!(h1.is_some());
    assert!(h2.is_none());
    // missing transition feature for the requested direction
    assert!(reconstruct(i1, i2, None, None, Directionality::TwoWay).is_err());
}

#[test]
fn zero_transition_returns_opposite_phase() {
    let i1v = randn(&[1, 4, 4], 7);
    let i2v = randn(&[1, 4, 4], 8);
    let tape: Tape<f64> = Tape::new();
    let i1 = tape.input(i1v.clone());
    let i2 = tape.input(i2v.clone());
    let zero = tape.input(ArrayD::zeros(IxDyn(&[1, 4, 4])));
    let (h1, h2) = reconstruct(i1, i2, Some(zero), Some(zero), Directionality::TwoWay).unwrap();
    assert_eq!(h2.unwrap().value(), i1v);
    assert_eq!(h1.unwrap().value(), i2v);
}

#[test]
fn reconstruct_rejects_shape_mismatch() {
    let tape: Tape<f64> = Tape::new();
    let i1 = tape.input(randn(&[2, 3], 9));
    let i2 = tape.input(randn(&[3, 3], 10));
    assert!(matches!(
        reconstruct(i1, i2, None, None, Directionality::OneWayEq1),
        Err(Error::Shape { .. })
    ));
}

// ---------------------------------------------------------------------------
// token labels
// ---------------------------------------------------------------------------

#[test]
fn token_labels_trivial_masks() {
    let zeros = Array2::<u8>::zeros((16, 16));
    let l = token_labels_from_mask(&zeros, (4, 4)).unwrap();
    assert!(l.y.iter().all(|&v| v == 1));
    assert_eq!(l.change_fraction, 0.0);

    let ones = Array2::<u8>::ones((16, 16));
    let l = token_labels_from_mask(&ones, (4, 4)).unwrap();
    assert!(l.y.iter().all(|&v| v == -1));
    assert_eq!(l.change_fraction, 1.0);
}

/// Brute-force patch-counting oracle for the quadrant case.
#[test]
fn token_labels_quadrant_case_matches_oracle() {
    let mut mask = Array2::<u8>::zeros((16, 16));
    mask.slice_mut(ndarray::s![0..8, 0..8]).fill(1);

    // oracle: enumerate each 8x8 patch of the 2x2 grid directly
    let mut oracle = Vec::new();
    for ty in 0..2 {
        for tx in 0..2 {
            let mut n = 0;
            for dy in 0..8 {
                for dx in 0..8 {
                    n += mask[[ty * 8 + dy, tx * 8 + dx]] as usize;
                }
            }
            oracle.push(if n as f64 / 64.0 > 0.5 { -1i8 } else { 1 });
        }
    }
    assert_eq!(oracle, vec![-1, 1, 1, 1]);

    let l = token_labels_from_mask(&mask, (2, 2)).unwrap();
    assert_eq!(l.y, oracle);
    assert_eq!(l.change_fraction, 0.25);
}

#[test]
fn token_labels_half_fraction_is_unchanged() {
    // exactly half the patch changed: not strictly > 0.5, stays +1
    let mut mask = Array2::<u8>::zeros((2, 2));
    mask[[0, 0]] = 1;
    mask[[0, 1]] = 1;
    let l = token_labels_from_mask(&mask, (1, 1)).unwrap();
    assert_eq!(l.y, vec![1]);
}

#[test]
fn token_labels_rejects_nondivisible_grid() {
    let mask = Array2::<u8>::zeros((10, 10));
    assert!(token_labels_from_mask(&mask, (3, 2)).is_err());
}

// ---------------------------------------------------------------------------
// loss_change / loss_sem
// ---------------------------------------------------------------------------

fn logits_for(labels: &Array3<u8>, k: usize, magnitude: f64) -> ArrayD<f64> {
    let (b, h, w) = labels.dim();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, k, h, w]));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                out[[bi, labels[[bi, y, x]] as usize, y, x]] = magnitude;
            }
        }
    }
    out
}

#[test]
fn saturated_change_logits_drive_loss_to_zero() {
    let mut gt = Array3::<u8>::zeros((1, 4, 4));
    gt[[0, 1, 2]] = 1;
    gt[[0, 3, 3]] = 1;
    let tape: Tape<f64> = Tape::new();
    let logits = tape.input(logits_for(&gt, 2, 100.0));
    let loss = loss_change(logits, &gt).unwrap();
    assert!(loss.scalar() < 1e-12);
}

#[test]
fn uniform_change_logits_give_ln2() {
    let mut gt = Array3::<u8>::zeros((1, 2, 2));
    gt[[0, 0, 0]] = 1;
    gt[[0, 1, 1]] = 1; // balanced
    let tape: Tape<f64> = Tape::new();
    let logits = tape.input(ArrayD::zeros(IxDyn(&[1, 2, 2, 2])));
    let loss = loss_change(logits, &gt).unwrap();
    assert!((loss.scalar() - 2f64.ln()).abs() < 1e-6);
}

/// Scalar-arithmetic oracle on a single pixel.
#[test]
fn single_pixel_cross_entropy_matches_softmax_formula() {
    let (a, b) = (0.7, -1.3);
    let mut gt = Array3::<u8>::zeros((1, 1, 1));
    gt[[0, 0, 0]] = 1;
    let tape: Tape<f64> = Tape::new();
    let logits = tape.input(ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![a, b]).unwrap());
    let loss = loss_change(logits, &gt).unwrap().scalar();
    let expect = (a.exp() + b.exp()).ln() - b;
    assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
}

#[test]
fn change_rejects_out_of_range_label() {
    let mut gt = Array3::<u8>::zeros((1, 1, 1));
    gt[[0, 0, 0]] = 2;
    let tape: Tape<f64> = Tape::new();
    let logits = tape.input(ArrayD::zeros(IxDyn(&[1, 2, 1, 1])));
    assert!(matches!(
        loss_change(logits, &gt),
        Err(Error::LabelOutOfRange { label: 2, num_classes: 2 })
    ));
}

#[test]
fn sem_loss_perfect_zero_and_uniform_ln_k() {
    let k = 6;
    let mut gt = Array3::<u8>::zeros((1, 3, 3));
    for (i, v) in gt.iter_mut().enumerate() {
        *v = (i % k) as u8;
    }
    let tape: Tape<f64> = Tape::new();
    let perfect = tape.input(logits_for(&gt, k, 200.0));
    let loss = loss_sem(perfect, perfect, &gt, &gt, 255).unwrap();
    assert!(loss.scalar() < 1e-12);

    let uniform = tape.input(ArrayD::zeros(IxDyn(&[1, k, 3, 3])));
    let loss = loss_sem(uniform, uniform, &gt, &gt, 255).unwrap();
    assert!((loss.scalar() - 2.0 * (k as f64).ln()).abs() < 1e-9);
}

#[test]
fn sem_loss_all_ignore_is_zero_with_zero_gradient() {
    let gt = Array3::<u8>::from_elem((1, 2, 2), 255);
    let tape: Tape<f64> = Tape::new();
    let l1 = tape.input(randn(&[1, 4, 2, 2], 20));
    let l2 = tape.input(randn(&[1, 4, 2, 2], 21));
    let loss = loss_sem(l1, l2, &gt, &gt, 255).unwrap();
    assert_eq!(loss.scalar(), 0.0);
    let grads = tape.backward(loss);
    assert!(grads.for_var(l1).is_none());
}

// ---------------------------------------------------------------------------
// loss_sa
// ---------------------------------------------------------------------------

#[test]
fn sa_zero_when_features_equal_or_all_changed() {
    let f = randn(&[1, 3, 2, 2], 30);
    let tape: Tape<f64> = Tape::new();
    let f1 = tape.input(f.clone());
    let f2 = tape.input(f);
    let masks = vec![Array2::<u8>::zeros((8, 8))];
    let loss = loss_sa(f1, f2, &masks).unwrap();
    assert!(loss.scalar().abs() < 1e-12);

    let g1 = tape.input(randn(&[1, 3, 2, 2], 31));
    let g2 = tape.input(randn(&[1, 3, 2, 2], 32));
    let all_changed = vec![Array2::<u8>::ones((8, 8))];
    let loss = loss_sa(g1, g2, &all_changed).unwrap();
    assert_eq!(loss.scalar(), 0.0);
}

#[test]
fn sa_orthogonal_unchanged_gives_one() {
    // channel-orthogonal features at every location
    let mut a = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 2, 2]));
    let mut b = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 2, 2]));
    for y in 0..2 {
        for x in 0..2 {
            a[[0, 0, y, x]] = 1.0;
            b[[0, 1, y, x]] = 1.0;
        }
    }
    let tape: Tape<f64> = Tape::new();
    let loss = loss_sa(tape.input(a), tape.input(b), &[Array2::<u8>::zeros((4, 4))]).unwrap();
    assert_eq!(loss.scalar(), 1.0);
}

// ---------------------------------------------------------------------------
// loss_recon
// ---------------------------------------------------------------------------

#[test]
fn recon_single_candidate_is_exactly_zero() {
    let tape: Tape<f64> = Tape::new();
    let i = tape.input(randn(&[1, 1, 5], 40));
    let r = tape.input(randn(&[1, 1, 5], 41));
    let loss = loss_recon(i, r, 0.07).unwrap();
    assert_eq!(loss.scalar(), 0.0);
}

/// Scalar-arithmetic oracle: direct evaluation of the 2-token softmax.
#[test]
fn recon_orthogonal_two_token_case() {
    let tau = 0.07;
    let rows = ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let tape: Tape<f64> = Tape::new();
    let i = tape.input(rows.clone());
    let r = tape.input(rows);
    let loss = loss_recon(i, r, tau).unwrap().scalar();

    // oracle: anchors and candidates are e1, e2; similarities are the
    // 2x2 identity over tau. Enumerate the softmax directly.
    let s = [[1.0 / tau, 0.0], [0.0, 1.0 / tau]];
    let mut oracle = 0.0;
    for (anchor, row) in s.iter().enumerate() {
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        oracle -= (row[anchor].exp() / denom).ln();
    }
    oracle /= 2.0;
    let closed_form = (1.0 + (-1.0 / tau).exp()).ln();
    assert!((oracle - closed_form).abs() < 1e-15);
    assert!((loss - closed_form).abs() < 1e-9, "{loss} vs {closed_form}");
}

#[test]
fn recon_invariant_under_joint_batch_permutation() {
    let i0 = randn(&[3, 2, 4], 42);
    let r0 = randn(&[3, 2, 4], 43);
    let perm = [2usize, 0, 1];
    let mut ip = i0.clone();
    let mut rp = r0.clone();
    for (to, &from) in perm.iter().enumerate() {
        ip.index_axis_mut(ndarray::Axis(0), to)
            .assign(&i0.index_axis(ndarray::Axis(0), from));
        rp.index_axis_mut(ndarray::Axis(0), to)
            .assign(&r0.index_axis(ndarray::Axis(0), from));
    }
    let tape: Tape<f64> = Tape::new();
    let a = loss_recon(tape.input(i0), tape.input(r0), 0.07).unwrap().scalar();
    let b = loss_recon(tape.input(ip), tape.input(rp), 0.07).unwrap().scalar();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn recon_rejects_bad_temperature() {
    let tape: Tape<f64> = Tape::new();
    let i = tape.input(randn(&[1, 2, 3], 44));
    assert!(loss_recon(i, i, 0.0).is_err());
    assert!(loss_recon(i, i, -1.0).is_err());
}

#[test]
fn recon_corruption_increases_loss_in_expectation() {
    let mut deltas = Vec::new();
    for seed in 0..40u64 {
        let i0 = randn(&[2, 3, 4], 100 + seed);
        let r0 = i0.clone(); // aligned positives
        let tape: Tape<f64> = Tape::new();
        let base = loss_recon(tape.input(i0.clone()), tape.input(r0.clone()), 0.07)
            .unwrap()
            .scalar();
        let mut corrupted = r0;
        let noise = randn(&[4], 200 + seed);
        for (j, v) in corrupted.index_axis_mut(ndarray::Axis(0), 0).index_axis_mut(ndarray::Axis(0), 0).iter_mut().enumerate() {
            *v = noise[[j]];
        }
        let after = loss_recon(tape.input(i0), tape.input(corrupted), 0.07).unwrap().scalar();
        deltas.push(after - base);
    }
    let mean: f64 = deltas.iter().sum::<f64>() / deltas.len() as f64;
    assert!(mean > 0.0, "corruption should increase loss on average, mean delta = {mean}");
}

#[test]
fn true_difference_transition_beats_random_transition() {
    for seed in 0..20u64 {
        let i1 = randn(&[2, 4, 6], 300 + seed);
        let i2 = randn(&[2, 4, 6], 400 + seed);
        let tape: Tape<f64> = Tape::new();
        let target = tape.input(i2.clone());
        let perfect = tape.input(&i1 + &(&i2 - &i1));
        let random = tape.input(&i1 + &randn(&[2, 4, 6], 500 + seed));
        let l_perfect = loss_recon(target, perfect, 0.07).unwrap().scalar();
        let l_random = loss_recon(target, random, 0.07).unwrap().scalar();
        assert!(
            l_perfect < l_random,
            "seed {seed}: perfect {l_perfect} !< random {l_random}"
        );
    }
}

// ---------------------------------------------------------------------------
// loss_trans
// ---------------------------------------------------------------------------

fn labels_of(y: &[i8]) -> TokenLabels {
    let changed = y.iter().filter(|&&v| v == -1).count();
    TokenLabels {
        y: y.to_vec(),
        change_fraction: changed as f64 / y.len() as f64,
    }
}

#[test]
fn trans_equal_tokens() {
    let d = randn(&[4, 3], 50);
    let tape: Tape<f64> = Tape::new();
    let d1 = tape.input(d.clone());
    let d2 = tape.input(d);
    // all unchanged: cos = 1 -> 0
    let loss = loss_trans(d1, d2, &labels_of(&[1, 1, 1, 1])).unwrap();
    assert!(loss.scalar().abs() < 1e-12);
    // all changed: max(0, 1) -> 1
    let loss = loss_trans(d1, d2, &labels_of(&[-1, -1, -1, -1])).unwrap();
    assert!((loss.scalar() - 1.0).abs() < 1e-12);
}

#[test]
fn trans_orthogonal_changed_is_zero() {
    let mut a = ArrayD::<f64>::zeros(IxDyn(&[2, 2]));
    let mut b = ArrayD::<f64>::zeros(IxDyn(&[2, 2]));
    a[[0, 0]] = 1.0;
    b[[0, 1]] = 1.0;
    a[[1, 0]] = 2.0;
    b[[1, 1]] = -3.0;
    let tape: Tape<f64> = Tape::new();
    let loss = loss_trans(tape.input(a), tape.input(b), &labels_of(&[-1, -1])).unwrap();
    assert_eq!(loss.scalar(), 0.0);
}

#[test]
fn trans_zero_norm_token_uses_cos_zero_convention() {
    let mut a = ArrayD::<f64>::zeros(IxDyn(&[2, 3]));
    let b = randn(&[2, 3], 51);
    a[[1, 0]] = 1.0;
    let tape: Tape<f64> = Tape::new();
    // token 0 has zero-norm d1: cos := 0 so unchanged contributes 1 - 0 = 1
    let loss = loss_trans(tape.input(a), tape.input(b.clone()), &labels_of(&[1, -1])).unwrap();
    let cos1 = {
        let d1 = [1.0, 0.0, 0.0];
        let d2 = [b[[1, 0]], b[[1, 1]], b[[1, 2]]];
        let dot: f64 = d1.iter().zip(&d2).map(|(x, y)| x * y).sum();
        let n2: f64 = d2.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / n2
    };
    let expect = (1.0 + cos1.max(0.0)) / 2.0;
    assert!((loss.scalar() - expect).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trans_total_in_range(seed in 0u64..1000) {
        let d1 = randn(&[6, 4], seed);
        let d2 = randn(&[6, 4], seed + 5000);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 9000);
        let y: Vec<i8> = (0..6).map(|_| if rng.gen_bool(0.5) { 1 } else { -1 }).collect();
        let tape: Tape<f64> = Tape::new();
        let loss = loss_trans(tape.input(d1), tape.input(d2), &labels_of(&y)).unwrap().scalar();
        prop_assert!((0.0..=2.0).contains(&loss));
    }

    #[test]
    fn trans_invariant_to_positive_per_token_rescale(seed in 0u64..1000) {
        let d1 = randn(&[5, 3], seed);
        let d2 = randn(&[5, 3], seed + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let y: Vec<i8> = (0..5).map(|_| if rng.gen_bool(0.5) { 1 } else { -1 }).collect();
        let mut d1s = d1.clone();
        let mut d2s = d2.clone();
        for r in 0..5 {
            let a: f64 = rng.gen_range(0.1..10.0);
            let b: f64 = rng.gen_range(0.1..10.0);
            d1s.index_axis_mut(ndarray::Axis(0), r).mapv_inplace(|v| v * a);
            d2s.index_axis_mut(ndarray::Axis(0), r).mapv_inplace(|v| v * b);
        }
        let tape: Tape<f64> = Tape::new();
        let base = loss_trans(tape.input(d1), tape.input(d2), &labels_of(&y)).unwrap().scalar();
        let scaled = loss_trans(tape.input(d1s), tape.input(d2s), &labels_of(&y)).unwrap().scalar();
        prop_assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn recon_is_nonnegative(seed in 0u64..1000) {
        let i = randn(&[2, 2, 3], seed);
        let r = randn(&[2, 2, 3], seed + 7777);
        let tape: Tape<f64> = Tape::new();
        let loss = loss_recon(tape.input(i), tape.input(r), 0.07).unwrap().scalar();
        prop_assert!(loss >= 0.0);
    }
}

// ---------------------------------------------------------------------------
// loss_total
// ---------------------------------------------------------------------------

#[test]
fn total_with_zero_lambdas_equals_cd_exactly() {
    let tape: Tape<f64> = Tape::new();
    let change = tape.input(ArrayD::from_elem(IxDyn(&[]), 0.731));
    let recon = tape.input(ArrayD::from_elem(IxDyn(&[]), 2.5));
    let trans = tape.input(ArrayD::from_elem(IxDyn(&[]), 1.25));
    let weights = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        tau: 0.07,
    };
    let (total, report) = loss_total(
        LossParts {
            change,
            sem: None,
            sa: None,
            recon: Some(recon),
            trans: Some(trans),
        },
        &weights,
        Task::Bcd,
    );
    assert_eq!(total.scalar(), 0.731);
    assert_eq!(report.total, report.l_change);
    assert!(!report.active_terms.contains(&LossTerm::Recon));
    assert!(!report.active_terms.contains(&LossTerm::Trans));
}

#[test]
fn bcd_mode_ignores_semantic_terms() {
    let tape: Tape<f64> = Tape::new();
    let c = tape.input(ArrayD::from_elem(IxDyn(&[]), 1.0));
    let sem = tape.input(ArrayD::from_elem(IxDyn(&[]), 9.0));
    let (total, report) = loss_total(
        LossParts {
            change: c,
            sem: Some(sem),
            sa: Some(sem),
            recon: None,
            trans: None,
        },
        &LossWeights::default(),
        Task::Bcd,
    );
    assert_eq!(total.scalar(), 1.0);
    assert_eq!(report.l_sem, 0.0);
    assert_eq!(report.l_sa, 0.0);
    assert!(!report.active_terms.contains(&LossTerm::Sem));
    assert!(!report.active_terms.contains(&LossTerm::Sa));
}

#[test]
fn total_weighted_sum_arithmetic() {
    let tape: Tape<f64> = Tape::new();
    let v = |x: f64| tape.input(ArrayD::from_elem(IxDyn(&[]), x));
    let weights = LossWeights {
        lambda1: 0.1,
        lambda2: 1.0,
        tau: 0.07,
    };
    let (total, report) = loss_total(
        LossParts {
            change: v(1.0),
            sem: Some(v(2.0)),
            sa: Some(v(3.0)),
            recon: Some(v(4.0)),
            trans: Some(v(5.0)),
        },
        &weights,
        Task::Scd,
    );
    assert!((total.scalar() - 11.4).abs() < 1e-9);
    assert_eq!(report.active_terms.len(), 5);
    assert_eq!(report.l_recon, 4.0);
}

#[test]
fn report_flags_non_finite_terms() {
    let report = LossReport {
        l_change: 1.0,
        l_sem: f64::NAN,
        l_sa: 0.0,
        l_recon: 0.0,
        l_trans: 0.0,
        total: f64::NAN,
        active_terms: BTreeSet::new(),
    };
    assert_eq!(report.first_non_finite(), Some("l_sem"));
}

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

#[test]
fn loss_gradients_match_finite_differences() {
    // loss_recon wrt both inputs
    let i0 = randn(&[1, 4, 3], 60);
    let r0 = randn(&[1, 4, 3], 61);
    let tape: Tape<f64> = Tape::new();
    let i = tape.input(i0.clone());
    let r = tape.input(r0.clone());
    let loss = loss_recon(i, r, 0.07).unwrap();
    let grads = tape.backward(loss);
    let gi = central_diff_grad(&i0, 1e-5, |p| {
        let t: Tape<f64> = Tape::new();
        loss_recon(t.input(p.clone()), t.input(r0.clone()), 0.07).unwrap().scalar()
    });
    let gr = central_diff_grad(&r0, 1e-5, |p| {
        let t: Tape<f64> = Tape::new();
        loss_recon(t.input(i0.clone()), t.input(p.clone()), 0.07).unwrap().scalar()
    });
    assert!(max_rel_error(grads.for_var(i).unwrap(), &gi) < 1e-3);
    assert!(max_rel_error(grads.for_var(r).unwrap(), &gr) < 1e-3);

    // loss_trans
    let d10 = randn(&[4, 3], 62);
    let d20 = randn(&[4, 3], 63);
    let labels = labels_of(&[1, -1, 1, -1]);
    let tape: Tape<f64> = Tape::new();
    let d1 = tape.input(d10.clone());
    let d2 = tape.input(d20.clone());
    let loss = loss_trans(d1, d2, &labels).unwrap();
    let grads = tape.backward(loss);
    let g1 = central_diff_grad(&d10, 1e-5, |p| {
        let t: Tape<f64> = Tape::new();
        loss_trans(t.input(p.clone()), t.input(d20.clone()), &labels).unwrap().scalar()
    });
    assert!(max_rel_error(grads.for_var(d1).unwrap(), &g1) < 1e-3);

    // loss_sa
    let f10 = randn(&[1, 3, 2, 2], 64);
    let f20 = randn(&[1, 3, 2, 2], 65);
    let mut mask = Array2::<u8>::zeros((4, 4));
    mask.slice_mut(ndarray::s![0..2, 0..2]).fill(1);
    let masks = vec![mask];
    let tape: Tape<f64> = Tape::new();
    let f1 = tape.input(f10.clone());
    let f2 = tape.input(f20.clone());
    let loss = loss_sa(f1, f2, &masks).unwrap();
    let grads = tape.backward(loss);
    let g1 = central_diff_grad(&f10, 1e-5, |p| {
        let t: Tape<f64> = Tape::new();
        loss_sa(t.input(p.clone()), t.input(f20.clone()), &masks).unwrap().scalar()
    });
    assert!(max_rel_error(grads.for_var(f1).unwrap(), &g1) < 1e-3);

    // loss_change on a 2x2 image
    let mut gt = Array3::<u8>::zeros((1, 2, 2));
    gt[[0, 0, 1]] = 1;
    let l0 = randn(&[1, 2, 2, 2], 66);
    let tape: Tape<f64> = Tape::new();
    let l = tape.input(l0.clone());
    let loss = loss_change(l, &gt).unwrap();
    let grads = tape.backward(loss);
    let gl = central_diff_grad(&l0, 1e-5, |p| {
        let t: Tape<f64> = Tape::new();
        loss_change(t.input(p.clone()), &gt).unwrap().scalar()
    });
    assert!(max_rel_error(grads.for_var(l).unwrap(), &gl) < 1e-3);
}
