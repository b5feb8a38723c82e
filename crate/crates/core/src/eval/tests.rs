use super::*;
use crate::model::{reweight, ModelConfig, REWEIGHT_DELTA};

fn outcome(misspelled: bool, predicted: bool, decomposed: bool, rank: Option<usize>, abs: f64, sq: f64) -> SampleOutcome {
    SampleOutcome {
        misspelled,
        predicted_misspelled: predicted,
        decomposed,
        ideal_rank: rank,
        abs_count_error: abs,
        sq_count_error: sq,
        count_entries: 4,
    }
}

/// Ten samples: four right, six misspelled.
fn fixture() -> Vec<SampleOutcome> {
    vec![
        outcome(false, false, true, Some(0), 0.0, 0.0),
        outcome(false, false, true, Some(0), 1.0, 1.0),
        outcome(false, true, false, None, 2.0, 4.0),
        outcome(false, false, true, Some(0), 0.0, 0.0),
        outcome(true, true, true, Some(0), 0.5, 0.25),
        outcome(true, true, false, Some(2), 1.0, 1.0),
        outcome(true, false, false, Some(4), 0.0, 0.0),
        outcome(true, true, true, None, 1.5, 2.25),
        outcome(true, true, true, Some(1), 0.0, 0.0),
        outcome(true, false, false, None, 3.0, 9.0),
    ]
}

#[test]
fn metric_fixture_matches_hand_computation() {
    let m = MetricSet::from_outcomes(&fixture(), 5);
    assert_eq!(m.samples, 10);
    // TP = 4 of 5 flagged, 6 positives.
    assert_eq!(m.precision, Some(0.8));
    assert_eq!(m.recall, Some(4.0 / 6.0));
    assert!((m.f1.unwrap() - 8.0 / 11.0).abs() < 1e-15);
    assert_eq!(m.dacc, 0.6);
    let iacc = m.iacc.unwrap();
    assert_eq!(iacc, vec![1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0, 3.0 / 6.0, 4.0 / 6.0]);
    assert_eq!(m.cr, Some(2.0 / 6.0));
    assert_eq!(m.mae, 100.0 * (9.0 / 40.0));
    assert_eq!(m.mse, 100.0 * (17.5 / 40.0));
}

#[test]
fn confusion_set_f1() {
    // TP, FP, FN, TN.
    let set = [
        outcome(true, true, true, None, 0.0, 0.0),
        outcome(false, true, true, None, 0.0, 0.0),
        outcome(true, false, true, None, 0.0, 0.0),
        outcome(false, false, true, None, 0.0, 0.0),
    ];
    let m = MetricSet::from_outcomes(&set, 5);
    assert_eq!((m.precision, m.recall, m.f1), (Some(0.5), Some(0.5), Some(0.5)));
}

#[test]
fn oracle_and_degenerate_predictors() {
    let oracle: Vec<SampleOutcome> =
        (0..6).map(|i| outcome(i % 2 == 0, i % 2 == 0, true, Some(0), 0.0, 0.0)).collect();
    let m = MetricSet::from_outcomes(&oracle, 5);
    assert_eq!((m.precision, m.recall, m.f1, m.dacc, m.cr), (Some(1.0), Some(1.0), Some(1.0), 1.0, Some(1.0)));
    assert_eq!((m.mae, m.mse), (0.0, 0.0));
    assert!(m.iacc.unwrap().iter().all(|&v| v == 1.0));

    // Always answers a right character.
    let never: Vec<SampleOutcome> = (0..6).map(|i| outcome(i % 2 == 0, false, false, None, 1.0, 1.0)).collect();
    let m = MetricSet::from_outcomes(&never, 5);
    assert_eq!(m.recall, Some(0.0));
    assert_eq!(m.precision, None);
    assert_eq!(m.f1, None);

    let right_only = [outcome(false, false, true, None, 0.0, 0.0)];
    let m = MetricSet::from_outcomes(&right_only, 5);
    assert_eq!((m.iacc, m.cr, m.recall), (None, None, None));
}

#[test]
fn cr_never_exceeds_dacc_or_iacc() {
    let f = fixture();
    let mis: Vec<SampleOutcome> = f.into_iter().filter(|o| o.misspelled).collect();
    let m = MetricSet::from_outcomes(&mis, 5);
    let cr = m.cr.unwrap();
    assert!(cr <= m.dacc && cr <= *m.iacc.unwrap().last().unwrap());
}

#[test]
fn reweight_flip_example() {
    let r = reweight(&[0.6, 0.4], &[0.0, 1.0], REWEIGHT_DELTA);
    assert!((r[0] - 0.362_620_666_3).abs() < 1e-9);
    assert!((r[1] - 0.374_163_628_2).abs() < 1e-9);
    assert_eq!(crate::model::argmax(&r), 1);
}

#[test]
fn top_k_orders_and_breaks_ties() {
    let t = top_k(&[0.1, 0.4, 0.1, 0.4], 3);
    assert_eq!(t.iter().map(|(c, _)| c.0).collect::<Vec<_>>(), vec![1, 3, 0]);
    assert_eq!(top_k(&[0.5, 0.5], 9).len(), 2);
}

fn tiny_dict() -> (SymbolVocabulary, IdsDictionary) {
    let v = SymbolVocabulary::with_radicals(["a", "b", "c"]).unwrap();
    let mut d = IdsDictionary::new();
    d.insert(v.encode("lr a b").unwrap()).unwrap();
    d.insert(v.encode("ab a c").unwrap()).unwrap();
    d.insert(v.encode("c").unwrap()).unwrap();
    (v, d)
}

#[test]
fn verdicts_from_analyses() {
    let (v, d) = tiny_dict();
    let opts = EvalOptions { topk: 2, ..EvalOptions::default() };
    let mk = |s: &str| Analysis { symbols: v.encode(s).unwrap(), counts: vec![], overflow: false, fetch: vec![0.2, 0.5, 0.3] };
    assert_eq!(verdict_of(&mk("ab a c"), &v, &d, &opts), Verdict::Right { class: CharClass(1) });
    match verdict_of(&mk("lr a c"), &v, &d, &opts) {
        Verdict::Misspelled { unparseable, candidates, .. } => {
            assert!(!unparseable);
            assert_eq!(candidates, vec![(CharClass(1), 0.5), (CharClass(2), 0.3)]);
        }
        r => panic!("{r:?}"),
    }
    assert!(matches!(verdict_of(&mk("lr a"), &v, &d, &opts), Verdict::Misspelled { unparseable: true, .. }));
    let edit = EvalOptions { corrector: Corrector::Edit, topk: 3, ..opts };
    match verdict_of(&mk("lr a c"), &v, &d, &edit) {
        Verdict::Misspelled { candidates, .. } => {
            assert_eq!(candidates.iter().map(|c| c.0 .0).collect::<Vec<_>>(), vec![0, 1, 2]);
            assert_eq!(candidates[0].1, 1.0);
        }
        r => panic!("{r:?}"),
    }
}

fn toy_model() -> CdfModel<f32> {
    CdfModel::new(ModelConfig {
        n_symbols: 13,
        n_classes: 3,
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
        max_len: 6,
        ..ModelConfig::default()
    })
    .unwrap()
}

#[test]
fn assess_is_deterministic() {
    let (v, d) = tiny_dict();
    let m = toy_model();
    let img: Vec<f32> = (0..256).map(|i| (i % 7) as f32 / 6.0).collect();
    let a = assess(&m, &img, &v, &d, &EvalOptions::default()).unwrap();
    let b = assess(&m, &img, &v, &d, &EvalOptions::default()).unwrap();
    assert_eq!(a, b);
    if let Verdict::Misspelled { candidates, .. } = &a {
        assert!(candidates.len() <= 5);
        assert!(candidates.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}

#[test]
fn attention_export_files() {
    let (v, _) = tiny_dict();
    let m = toy_model();
    let img: Vec<f32> = (0..256).map(|i| (i % 5) as f32 / 4.0).collect();
    let dir = tempfile::tempdir().unwrap();
    let paths = export_attention(&m, &img, &v, true, dir.path()).unwrap();
    let a = analyze(&m, &img, true).unwrap();
    let steps = paths.iter().filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("step_")).count();
    assert_eq!(steps, a.symbols.len() + usize::from(!a.overflow));
    let index = std::fs::read_to_string(dir.path().join("index.txt")).unwrap();
    assert_eq!(index.lines().count(), paths.len());
    let first = std::fs::read(&paths[0]).unwrap();
    let img0 = GlyphImage::read_pgm(&first[..]).unwrap();
    assert_eq!(img0.size, 16);
    assert!(img0.pixels.contains(&0) && img0.pixels.contains(&255));
    let again = tempfile::tempdir().unwrap();
    let paths2 = export_attention(&m, &img, &v, true, again.path()).unwrap();
    for (p, q) in paths.iter().zip(&paths2) {
        assert_eq!(std::fs::read(p).unwrap(), std::fs::read(q).unwrap());
    }
}

#[test]
fn gray_scaling_and_upsampling() {
    assert_eq!(to_gray(&[1.0, 2.0, 3.0]), vec![0, 128, 255]);
    assert_eq!(to_gray(&[0.5, 0.5]), vec![0, 0]);
    assert_eq!(upsample(&[1.0, 2.0, 3.0, 4.0], 2, 4)[..8], [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
}

#[test]
fn corrector_names_parse() {
    assert_eq!("prob_embed".parse::<Corrector>().unwrap(), Corrector::ProbEmbed);
    assert!("nope".parse::<Corrector>().is_err());
}
