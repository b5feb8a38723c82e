use super::*;
use crate::tensor::{grad_check_filtered, Graph, Real, Tensor, Var};

fn toy_config() -> ModelConfig {
    ModelConfig {
        n_symbols: 6,
        n_classes: 4,
        image_size: 16,
        enc_channels: [2, 3, 4],
        proto_dim: 4,
        count_kernel: 2,
        emb_dim: 4,
        state_dim: 4,
        att_dim: 4,
        coverage_channels: 2,
        coverage_kernel: 3,
        glimpse_dim: 4,
        key_dim: 3,
        char_dim: 4,
        max_len: 8,
        ..ModelConfig::default()
    }
}

fn toy_image(seed: u64) -> Vec<f32> {
    (0..256).map(|i| (((i as u64 * 37 + seed * 11) % 17) as f32) / 16.0).collect()
}

fn vals<T: Real>(g: &Graph<'_, T>, v: Var) -> Vec<f64> {
    g.value(v).iter().map(|&x| Real::to_f64(x)).collect()
}

#[test]
fn default_encoder_gives_64_positions_of_128_channels() {
    let cfg = ModelConfig { n_symbols: 3, n_classes: 2, ..ModelConfig::default() };
    let m = CdfModel::<f32>::new(cfg).unwrap();
    let mut g = Graph::new(&m.store);
    let img = vec![0.5f32; 64 * 64];
    let (f, chw) = m.encode(&mut g, &img).unwrap();
    assert_eq!(g.shape(f), &[64, 128]);
    assert_eq!(g.shape(chw), &[128, 8, 8]);
}

#[test]
fn encoder_is_deterministic_and_finite() {
    let m = CdfModel::<f32>::new(toy_config()).unwrap();
    let mut g = Graph::new(&m.store);
    let (a, _) = m.encode(&mut g, &toy_image(1)).unwrap();
    let (b, _) = m.encode(&mut g, &toy_image(1)).unwrap();
    let (z, _) = m.encode(&mut g, &vec![0.0; 256]).unwrap();
    assert_eq!(g.value(a), g.value(b));
    assert!(g.value(z).iter().all(|v| v.is_finite()));
    assert!(matches!(m.encode(&mut g, &[0.0; 10]), Err(ModelError::ImageSize { .. })));
}

#[test]
fn config_validation_rejects_bad_dimensions() {
    assert!(CdfModel::<f32>::new(ModelConfig { image_size: 20, ..toy_config() }).is_err());
    assert!(CdfModel::<f32>::new(ModelConfig { glimpse_dim: 5, ..toy_config() }).is_err());
    assert!(CdfModel::<f32>::new(ModelConfig { n_symbols: 0, ..toy_config() }).is_err());
}

#[test]
fn existence_is_a_probability() {
    let m = CdfModel::<f32>::new(toy_config()).unwrap();
    let mut g = Graph::new(&m.store);
    let (f, _) = m.encode(&mut g, &toy_image(2)).unwrap();
    let out = m.count(&mut g, f);
    assert_eq!(g.shape(out.energy), &[4, 6]);
    assert!(vals(&g, out.existence).iter().all(|&p| p > 0.0 && p < 1.0));
    assert_eq!(vals(&g, out.counts).len(), 6);
}

#[test]
fn uniform_filter_counts_a_constant_map_exactly() {
    let m = CdfModel::<f64>::new(toy_config()).unwrap();
    let mut g = Graph::new(&m.store);
    let maps = g.constant(&[6, 4, 4], (0..96).map(|i| 0.25 + (i / 16) as f64 * 0.1).collect());
    let q = g.constant(&[6, 1, 2, 2], vec![0.25; 24]);
    let (exist, counts) = m.count_from_maps(&mut g, maps, q);
    for (n, (&c, &p)) in vals(&g, counts).iter().zip(&vals(&g, exist)).enumerate() {
        let expected = 0.25 + n as f64 * 0.1;
        assert!((c - expected).abs() < 1e-12, "class {n}: {c}");
        assert!((p - expected).abs() < 1e-12);
    }
}

#[test]
fn each_count_depends_only_on_its_own_map() {
    let m = CdfModel::<f64>::new(toy_config()).unwrap();
    let base: Vec<f64> = (0..96).map(|i| ((i * 7) % 11) as f64 / 11.0).collect();
    let mut bumped = base.clone();
    for v in &mut bumped[32..48] {
        *v += 0.3;
    }
    let q: Vec<f64> = (0..24).map(|i| 0.1 + i as f64 * 0.01).collect();
    let run = |data: Vec<f64>| {
        let mut g = Graph::new(&m.store);
        let maps = g.constant(&[6, 4, 4], data);
        let q = g.constant(&[6, 1, 2, 2], q.clone());
        let (e, c) = m.count_from_maps(&mut g, maps, q);
        (vals(&g, e), vals(&g, c))
    };
    let (e0, c0) = run(base);
    let (e1, c1) = run(bumped);
    for n in 0..6 {
        if n == 2 {
            assert!(c1[n] > c0[n]);
            assert!(e1[n] > e0[n]);
        } else {
            assert_eq!(c0[n], c1[n]);
            assert_eq!(e0[n], e1[n]);
        }
    }
}

fn fixed_count_output(g: &mut Graph<'_, f64>, existence: &[f64], counts: &[f64]) -> CountOutput {
    let n = counts.len();
    let existence = g.constant(&[n], existence.to_vec());
    let counts = g.constant(&[n], counts.to_vec());
    let energy = g.constant(&[1, n], vec![0.5; n]);
    CountOutput { energy, existence, counts }
}

#[test]
fn counter_loss_is_zero_when_perfect() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let target = [2.0, 0.0, 1.0];
    let out = fixed_count_output(&mut g, &[1.0 - 1e-13, 1e-13, 1.0 - 1e-13], &target);
    let l = counter_loss(&mut g, &out, &target, true);
    assert!(g.scalar(l).abs() < 1e-9);
    let l1 = counter_loss(&mut g, &out, &target, false);
    assert_eq!(g.scalar(l1), 0.0);
}

#[test]
fn counter_loss_matches_hand_computation() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    // Existence [0.8, 0.3, 0.6], counts [1.5, 0.2, 3.0], targets [2, 0, 1].
    let out = fixed_count_output(&mut g, &[0.8, 0.3, 0.6], &[1.5, 0.2, 3.0]);
    let target = [2.0, 0.0, 1.0];
    let bce = -(0.8f64.ln() + 0.7f64.ln() + 0.6f64.ln()) / 3.0;
    // Present by 𝓟 > 0.5: classes 0 and 2. smooth-L1(0.5) = 0.125, smooth-L1(2) = 1.5.
    let reg = (0.125 + 1.5) / 2.0;
    let two = counter_loss(&mut g, &out, &target, true);
    assert!((g.scalar(two) - (bce + reg)).abs() < 1e-9);
    // One-step: mean over all three, smooth-L1(0.2) = 0.02.
    let one = counter_loss(&mut g, &out, &target, false);
    assert!((g.scalar(one) - (0.125 + 0.02 + 1.5) / 3.0).abs() < 1e-12);
}

#[test]
fn counter_loss_drops_regression_when_nothing_is_present() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let out = fixed_count_output(&mut g, &[0.2, 0.4], &[5.0, 9.0]);
    let l = counter_loss(&mut g, &out, &[1.0, 0.0], true);
    let bce = -(0.2f64.ln() + 0.6f64.ln()) / 2.0;
    assert!((g.scalar(l) - bce).abs() < 1e-9);
}

#[test]
fn update_counts_decrements_and_pins_end() {
    let mut c = vec![2.0, 1.0, 0.0, 10.0];
    update_counts(&mut c, 0, 3, 10.0);
    assert_eq!(c, [1.0, 1.0, 0.0, 10.0]);
    update_counts(&mut c, 2, 3, 10.0);
    assert_eq!(c, [1.0, 1.0, 0.0, 10.0]);
    update_counts(&mut c, 3, 3, 10.0);
    assert_eq!(c, [1.0, 1.0, 0.0, 10.0]);
}

#[test]
fn reweight_and_argmax() {
    let p = [0.5, 0.4, 0.1];
    let r = reweight(&p, &[0.0, 2.0, 10.0], REWEIGHT_DELTA);
    assert!((r[0] - 0.5 * 0.7f64.tanh()).abs() < 1e-15);
    assert_eq!(argmax(&p), 0);
    assert_eq!(argmax(&r), 1);
    assert_eq!(argmax(&[1.0, 1.0]), 0);
}

fn decode_toy(m: &CdfModel<f64>, g: &mut Graph<'_, f64>, mode: DecodeMode<'_>) -> (DecodeTrace, CountOutput, Var) {
    let (f, chw) = m.encode(g, &toy_image(3)).unwrap();
    let out = m.count(g, f);
    let c0 = vals(g, out.counts);
    (m.decode(g, f, chw, &c0, mode), out, chw)
}

#[test]
fn teacher_forced_trace_follows_targets() {
    let m = CdfModel::<f64>::new(toy_config()).unwrap();
    let mut g = Graph::new(&m.store);
    let targets = [1, 4, 1, 6];
    let (trace, _, _) = decode_toy(&m, &mut g, DecodeMode::TeacherForced(&targets));
    assert_eq!(trace.len(), 4);
    assert_eq!(trace.symbols(6), vec![1, 4, 1]);
    assert_eq!(trace.initial_counts.len(), 7);
    assert_eq!(trace.initial_counts[6], 10.0);
    let mut prev = trace.initial_counts.clone();
    for s in &trace.steps {
        let alpha = vals(&g, s.alpha);
        assert_eq!(alpha.len(), 4);
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p = vals(&g, s.p);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.counts.iter().zip(&prev).all(|(a, b)| a <= b));
        assert_eq!(s.counts[6], 10.0);
        prev = s.counts.clone();
    }
}

#[test]
fn teacher_forcing_exhausts_counts() {
    let m = CdfModel::<f64>::new(toy_config()).unwrap();
    let mut g = Graph::new(&m.store);
    let (f, chw) = m.encode(&mut g, &toy_image(4)).unwrap();
    let targets = [0, 2, 2, 6];
    let trace = m.decode(&mut g, f, chw, &[1.0, 0.0, 2.0, 0.0, 0.0, 0.0], DecodeMode::TeacherForced(&targets));
    let last = &trace.steps.last().unwrap().counts;
    assert!(last[..6].iter().all(|&c| c == 0.0));
}

#[test]
fn greedy_decode_is_deterministic_and_bounded() {
    let m = CdfModel::<f64>::new(toy_config()).unwrap();
    let mut g = Graph::new(&m.store);
    for rw in [false, true] {
        let (a, _, _) = decode_toy(&m, &mut g, DecodeMode::Greedy { reweight: rw });
        let (b, _, _) = decode_toy(&m, &mut g, DecodeMode::Greedy { reweight: rw });
        assert_eq!(a.symbols(6), b.symbols(6));
        assert!(a.len() <= 8);
        assert_eq!(a.overflow, a.steps.last().unwrap().y != 6);
    }
}

#[test]
fn count_vector_switch_changes_only_the_output_path() {
    let with = CdfModel::<f64>::new(toy_config()).unwrap();
    let without = CdfModel::<f64>::from_store(ModelConfig { use_count_vector: false, ..toy_config() }, with.store.clone()).unwrap();
    let targets = [0, 6];
    let mut g = Graph::new(&with.store);
    let (f, chw) = with.encode(&mut g, &toy_image(5)).unwrap();
    let a = with.decode(&mut g, f, chw, &[3.0; 6], DecodeMode::TeacherForced(&targets));
    let b = without.decode(&mut g, f, chw, &[3.0; 6], DecodeMode::TeacherForced(&targets));
    assert_eq!(g.value(a.steps[0].alpha), g.value(b.steps[0].alpha));
    assert_ne!(g.value(a.steps[0].p), g.value(b.steps[0].p));
}

#[test]
fn decoder_loss_of_uniform_output_is_log_k() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let mk = |g: &mut Graph<'_, f64>, p: Vec<f64>, y| {
        let n = p.len();
        let alpha = g.constant(&[1], vec![1.0]);
        let gl = g.constant(&[1, 1], vec![0.0]);
        StepRecord { y, p: g.constant(&[n], p), alpha, g: gl, counts: vec![] }
    };
    let steps = vec![mk(&mut g, vec![0.25; 4], 0), mk(&mut g, vec![0.25; 4], 3)];
    let trace = DecodeTrace { initial_counts: vec![], steps, overflow: false };
    let l = decoder_loss(&mut g, &trace, &[0, 3]).unwrap();
    assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);

    let steps = vec![mk(&mut g, vec![0.5, 0.2, 0.2, 0.1], 0), mk(&mut g, vec![0.1, 0.1, 0.2, 0.6], 3)];
    let trace = DecodeTrace { initial_counts: vec![], steps, overflow: false };
    let l = decoder_loss(&mut g, &trace, &[1, 3]).unwrap();
    assert!((g.scalar(l) - -(0.2f64.ln() + 0.6f64.ln()) / 2.0).abs() < 1e-12);
    assert!(decoder_loss(&mut g, &trace, &[1]).is_err());
}

#[test]
fn fetcher_is_a_distribution_and_masking_everything_is_uniform() {
    let m = CdfModel::<f64>::new(toy_config()).unwrap();
    let mut g = Graph::new(&m.store);
    let targets = [1, 2, 6];
    let (trace, _, chw) = decode_toy(&m, &mut g, DecodeMode::TeacherForced(&targets));
    let feats: Vec<Var> = trace.steps.iter().map(|s| s.g).collect();
    let p = m.fetch(&mut g, chw, &feats, None).unwrap();
    let pv = vals(&g, p);
    assert_eq!(pv.len(), 4);
    assert!((pv.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let dropped = m.fetch(&mut g, chw, &feats, Some(&[false; 3])).unwrap();
    assert!(vals(&g, dropped).iter().all(|&v| (v - 0.25).abs() < 1e-12));
    let loss = fetcher_loss(&mut g, dropped, 2);
    assert!((g.scalar(loss) - 4f64.ln()).abs() < 1e-12);
    assert!(matches!(m.fetch(&mut g, chw, &[], None), Err(ModelError::InvalidTrace)));
}

#[test]
fn fetcher_gradient_stays_in_the_fetcher() {
    let m = CdfModel::<f64>::new(toy_config()).unwrap();
    let mut g = Graph::new(&m.store);
    let targets = [3, 0, 6];
    let (trace, _, chw) = decode_toy(&m, &mut g, DecodeMode::TeacherForced(&targets));
    let feats: Vec<Var> = trace.steps.iter().map(|s| s.g).collect();
    let p = m.fetch(&mut g, chw, &feats, Some(&[true, false, true])).unwrap();
    let loss = fetcher_loss(&mut g, p, 1);
    let grads = g.backward(loss);
    for (id, param) in m.store.iter() {
        if param.name.starts_with(FETCHER_PREFIX) {
            assert!(!grads.is_zero(id), "{} got no gradient", param.name);
        } else {
            assert!(grads.is_zero(id), "{} leaked gradient", param.name);
        }
    }
}

#[test]
fn counter_loss_gradients_match_finite_differences() {
    let cfg = ModelConfig { image_size: 8, ..toy_config() };
    let mut m = CdfModel::<f64>::new(cfg).unwrap();
    let img: Vec<f32> = (0..64).map(|i| ((i * 5) % 9) as f32 / 8.0).collect();
    let model = m.clone();
    let target = [1.0, 0.0, 2.0, 0.0, 1.0, 0.0];
    let report = grad_check_filtered(
        &mut m.store,
        |g| {
            let (f, _) = model.encode(g, &img).unwrap();
            let out = model.count(g, f);
            counter_loss(g, &out, &target, true)
        },
        1e-6,
        |name| name.starts_with(COUNTER_PREFIX) || name.starts_with("enc.b2"),
    );
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn checkpoint_round_trip() {
    let m = CdfModel::<f32>::new(toy_config()).unwrap();
    let symbols: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
    let mut buf = Vec::new();
    m.save(&mut buf, &symbols, serde_json::json!({"epoch": 3})).unwrap();
    let (back, meta) = CdfModel::<f32>::load(&buf[..]).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(meta.symbols, symbols);
    assert_eq!(meta.run["epoch"], 3);
    for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.data(), b.value.data());
    }
}

#[test]
fn mismatched_store_is_rejected() {
    let m = CdfModel::<f32>::new(toy_config()).unwrap();
    let err = CdfModel::<f32>::from_store(ModelConfig { proto_dim: 5, ..toy_config() }, m.store.clone());
    assert!(matches!(err, Err(ModelError::Mismatch(_))));
    let mut truncated = ParamStore::<f32>::new();
    truncated.add("enc.b0.c0.w", Tensor::new(&[1], vec![0.0]).unwrap()).unwrap();
    assert!(CdfModel::<f32>::from_store(toy_config(), truncated).is_err());
    let symbols = vec!["a".to_string()];
    let mut buf = Vec::new();
    m.save(&mut buf, &symbols, serde_json::Value::Null).unwrap();
    assert!(CdfModel::<f32>::load(&buf[..]).is_err());
}
