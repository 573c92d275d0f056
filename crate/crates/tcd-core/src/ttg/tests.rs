use super::*;
use crate::tensor::{central_diff_grad, max_rel_error, CountScope, Tape};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}

fn small_cfg(asi: bool) -> TtgConfig {
    TtgConfig {
        num_experts: 3,
        fusion_dim: 8,
        decoder_layers: 2,
        attention_heads: 2,
        asi_enabled: asi,
        text_dim: 6,
    }
}

// ---------------------------------------------------------------------------
// text provider
// ---------------------------------------------------------------------------

#[test]
fn synthetic_embeddings_are_deterministic_unit_rows() {
    let n = names(6);
    let a = text_provider_load(None, &n, 42, 512).unwrap();
    let b = text_provider_load(None, &n, 42, 512).unwrap();
    assert_eq!(a.embeddings, b.embeddings);
    assert_eq!(a.embeddings.dim(), (6, 512));
    for row in a.embeddings.rows() {
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
    // a different seed changes the vectors
    let c = text_provider_load(None, &n, 43, 512).unwrap();
    assert_ne!(a.embeddings, c.embeddings);
}

#[test]
fn embedding_file_roundtrip_and_mismatch_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.txt");
    let n = names(3);
    let set = text_provider_load(None, &n, 7, 16).unwrap();
    write_embedding_file(&path, &set).unwrap();

    let loaded = text_provider_load(Some(&path), &n, 0, 16).unwrap();
    assert_eq!(loaded.source, EmbeddingSource::FileImport);
    for (a, b) in loaded.embeddings.iter().zip(set.embeddings.iter()) {
        assert!((a - b).abs() < 1e-15);
    }

    // wrong row count: error names both counts
    let err = text_provider_load(Some(&path), &names(4), 0, 16).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains('4') && msg.contains('3'), "{msg}");

    // missing file
    assert!(matches!(
        text_provider_load(Some(&dir.path().join("nope.txt")), &n, 0, 16),
        Err(crate::error::Error::MissingFile(_))
    ));
}

// ---------------------------------------------------------------------------
// adaptive semantic integration
// ---------------------------------------------------------------------------

#[test]
fn single_expert_gate_is_exactly_one_and_bitwise_transparent() {
    let mut store = crate::tensor::ParamStore::<f64>::new();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let asi = AdaptiveSemanticIntegration::new(&mut store, &mut rng, "asi", 6, 8, 1);
    let t0 = randn(&[4, 6], 2);
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let t = tape.constant(t0);
    let gate = asi.gate(&cx, t).value();
    assert!(gate.iter().all(|&v| v == 1.0));

    let z = asi.forward(&cx, t).value();
    let e1 = asi.expert_outputs_for_test(&cx, t).remove(0);
    assert_eq!(z, e1);
}

#[test]
fn identical_experts_make_gate_irrelevant() {
    let mut store = crate::tensor::ParamStore::<f64>::new();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let asi = AdaptiveSemanticIntegration::new(&mut store, &mut rng, "asi", 5, 7, 4);
    // copy expert 0's weights into all experts
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let name = store.name(id).to_string();
        if let Some(rest) = name.strip_prefix("asi.expert") {
            let (_, suffix) = rest.split_once('.').unwrap();
            let src_name = format!("asi.expert0.{suffix}");
            let src_id = ids.iter().find(|&&i| store.name(i) == src_name).copied().unwrap();
            let src = store.value(src_id).clone();
            store.value_mut(id).assign(&src);
        }
    }
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let t = tape.constant(randn(&[3, 5], 4));
    let z = asi.forward(&cx, t).value();
    let e0 = asi.expert_outputs_for_test(&cx, t).remove(0);
    for (a, b) in z.iter().zip(e0.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gate_rows_sum_to_one(seed in 0u64..10_000) {
        let mut store = crate::tensor::ParamStore::<f64>::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let k = rng.gen_range(1..7usize);
        let m = rng.gen_range(1..7usize);
        let asi = AdaptiveSemanticIntegration::new(&mut store, &mut rng, "asi", 6, 8, m);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let t = tape.constant(randn(&[k, 6], seed + 1).mapv(|v| v * 10.0));
        let gate = asi.gate(&cx, t).value();
        for row in gate.axis_iter(Axis(0)) {
            let total: f64 = row.sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn aggregation_is_pointwise_convex(seed in 0u64..10_000) {
        let mut store = crate::tensor::ParamStore::<f64>::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let m = rng.gen_range(2..5usize);
        let asi = AdaptiveSemanticIntegration::new(&mut store, &mut rng, "asi", 4, 6, m);
        let t0 = randn(&[3, 4], seed + 2);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let t = tape.constant(t0);
        let z = asi.forward(&cx, t).value();
        let experts = asi.expert_outputs_for_test(&cx, t);
        for r in 0..3 {
            for c in 0..6 {
                let vals: Vec<f64> = experts.iter().map(|e| e[[r, c]]).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(z[[r, c]] >= lo - 1e-9 && z[[r, c]] <= hi + 1e-9);
            }
        }
    }
}

#[test]
fn bypass_identity_initialisation_passes_through() {
    let mut store = crate::tensor::ParamStore::<f64>::new();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let bypass = BypassProjection::new(&mut store, &mut rng, "b", 4, 4);
    let mut eye = ArrayD::<f64>::zeros(IxDyn(&[4, 4]));
    for i in 0..4 {
        eye[[i, i]] = 1.0;
    }
    store.value_mut(bypass.weight()).assign(&eye);
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let t0 = randn(&[3, 4], 6);
    let z = bypass.forward(&cx, tape.constant(t0.clone()));
    assert_eq!(z.value(), t0);
}

#[test]
fn asi_toggle_changes_param_count_but_not_shapes() {
    let mut on_store = crate::tensor::ParamStore::<f64>::new();
    let mut off_store = crate::tensor::ParamStore::<f64>::new();
    let mut rng1 = ChaCha20Rng::seed_from_u64(7);
    let mut rng2 = ChaCha20Rng::seed_from_u64(7);
    let on = TransitionGenerator::new(&mut on_store, &mut rng1, small_cfg(true), 10).unwrap();
    let off = TransitionGenerator::new(&mut off_store, &mut rng2, small_cfg(false), 10).unwrap();
    assert!(
        on_store.param_count(CountScope::Ttg) > off_store.param_count(CountScope::Ttg),
        "expert mixture must add parameters"
    );

    let t0 = randn(&[3, 6], 8);
    let tokens = randn(&[2, 4, 10], 9);
    let run = |ttg: &TransitionGenerator, store: &crate::tensor::ParamStore<f64>| {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store);
        let z = ttg.project_classes(&cx, tape.constant(t0.clone()));
        ttg.generate(&cx, tape.input(tokens.clone()), (2, 2), z).unwrap().shape()
    };
    assert_eq!(run(&on, &on_store), run(&off, &off_store));
}

// ---------------------------------------------------------------------------
// cross-modal fusion
// ---------------------------------------------------------------------------

#[test]
fn transition_feature_matches_token_shape() {
    for (n, grid) in [(4usize, (2usize, 2usize)), (16, (4, 4)), (64, (8, 8))] {
        let mut store = crate::tensor::ParamStore::<f64>::new();
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let ttg = TransitionGenerator::new(&mut store, &mut rng, small_cfg(true), 12).unwrap();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let z = ttg.project_classes(&cx, tape.constant(randn(&[3, 6], 11)));
        let tokens = tape.input(randn(&[2, n, 12], 12));
        let delta = ttg.generate(&cx, tokens, grid, z).unwrap();
        assert_eq!(delta.shape(), vec![2, n, 12]);
    }
}

#[test]
fn cross_attention_invariant_to_class_permutation() {
    let mut store = crate::tensor::ParamStore::<f64>::new();
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let ttg = TransitionGenerator::new(&mut store, &mut rng, small_cfg(true), 10).unwrap();
    let t0 = randn(&[5, 6], 14);
    let tokens = randn(&[1, 4, 10], 15);

    let run = |perm: &[usize]| {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let mut permuted = Array2::<f64>::zeros((5, 6));
        for (to, &from) in perm.iter().enumerate() {
            for c in 0..6 {
                permuted[[to, c]] = t0[[from, c]];
            }
        }
        let z = ttg.project_classes(&cx, tape.constant(permuted.into_dyn()));
        ttg.generate(&cx, tape.input(tokens.clone()), (2, 2), z).unwrap().value()
    };
    let base = run(&[0, 1, 2, 3, 4]);
    let shuffled = run(&[3, 0, 4, 2, 1]);
    for (a, b) in base.iter().zip(shuffled.iter()) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn zero_layers_is_projection_of_projection() {
    let mut cfg = small_cfg(true);
    cfg.decoder_layers = 0;
    let mut store = crate::tensor::ParamStore::<f64>::new();
    let mut rng = ChaCha20Rng::seed_from_u64(16);
    let ttg = TransitionGenerator::new(&mut store, &mut rng, cfg, 10).unwrap();
    let tokens = randn(&[1, 4, 10], 17);
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let z = ttg.project_classes(&cx, tape.constant(randn(&[3, 6], 18)));
    let delta = ttg.generate(&cx, tape.input(tokens.clone()), (2, 2), z).unwrap().value();

    // oracle: out_proj(in_proj(tokens) + pos), no attention involved
    let pin = store.value(param_named(&store, "ttg.fusion.project_in.weight"));
    let pin_b = store.value(param_named(&store, "ttg.fusion.project_in.bias"));
    let pout = store.value(param_named(&store, "ttg.fusion.project_out.weight"));
    let pout_b = store.value(param_named(&store, "ttg.fusion.project_out.bias"));
    let pos = store.value(param_named(&store, "ttg.fusion.pos"));

    let tape2: Tape<f64> = Tape::new();
    let v = tape2
        .input(tokens)
        .reshape(&[4, 10])
        .matmul(tape2.constant(pin.clone()))
        .add(tape2.constant(pin_b.clone()));
    let pos_i = tape2
        .constant(pos.clone())
        .reshape(&[1, 8, POS_GRID, POS_GRID])
        .upsample_bilinear(2, 2)
        .reshape(&[8, 4])
        .permute(&[1, 0]);
    let expect = (v + pos_i)
        .matmul(tape2.constant(pout.clone()))
        .add(tape2.constant(pout_b.clone()))
        .value();
    for (a, b) in delta.iter().zip(expect.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn param_named<T: crate::tensor::Scalar>(
    store: &crate::tensor::ParamStore<T>,
    name: &str,
) -> crate::tensor::ParamId {
    store
        .iter()
        .find(|(_, e)| e.name == name)
        .map(|(id, _)| id)
        .unwrap_or_else(|| panic!("no param {name}"))
}

#[test]
fn rejects_zero_experts_and_bad_dims() {
    let mut cfg = small_cfg(true);
    cfg.num_experts = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = small_cfg(true);
    cfg.fusion_dim = 9; // not divisible by 2 heads
    assert!(cfg.validate().is_err());
}

// ---------------------------------------------------------------------------
// gradient flow
// ---------------------------------------------------------------------------

#[test]
fn transition_gradients_match_finite_differences() {
    let mut store = crate::tensor::ParamStore::<f64>::new();
    let mut rng = ChaCha20Rng::seed_from_u64(20);
    let mut cfg = small_cfg(true);
    cfg.decoder_layers = 1;
    let ttg = TransitionGenerator::new(&mut store, &mut rng, cfg, 6).unwrap();
    let t_class = randn(&[2, 6], 21);
    let tokens0 = randn(&[1, 4, 6], 22);
    let probe = randn(&[1, 4, 6], 23);

    // scalar projection sum(delta * probe) exercises the whole Jacobian
    let eval = |tok: &ArrayD<f64>, store: &crate::tensor::ParamStore<f64>| {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store);
        let z = ttg.project_classes(&cx, tape.constant(t_class.clone()));
        let delta = ttg.generate(&cx, tape.input(tok.clone()), (2, 2), z).unwrap();
        (delta * tape.constant(probe.clone())).sum_all().scalar()
    };

    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let z = ttg.project_classes(&cx, tape.constant(t_class.clone()));
    let tokens = tape.input(tokens0.clone());
    let delta = ttg.generate(&cx, tokens, (2, 2), z).unwrap();
    let loss = (delta * tape.constant(probe.clone())).sum_all();
    let grads = tape.backward(loss);

    // d/d(visual tokens)
    let numeric = central_diff_grad(&tokens0, 1e-5, |p| eval(p, &store));
    let analytic = grads.for_var(tokens).unwrap();
    assert!(max_rel_error(analytic, &numeric) < 1e-3);

    // d/d(expert weights): perturb one expert fc1 weight matrix
    let expert_w = param_named(&store, "ttg.asi.expert0.fc1.weight");
    let analytic_w = grads.for_param(expert_w).unwrap().clone();
    let w0 = store.value(expert_w).clone();
    let mut probe_store = store.clone();
    let numeric_w = central_diff_grad(&w0, 1e-5, |p| {
        probe_store.value_mut(expert_w).assign(p);
        eval(&tokens0, &probe_store)
    });
    assert!(max_rel_error(&analytic_w, &numeric_w) < 1e-3);
}
