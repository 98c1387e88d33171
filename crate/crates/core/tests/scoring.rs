use glcon_core::data::{Image, LabelVector, ReportRecord, ABSENT, MISSING, PRESENT, UNCERTAIN};
use glcon_core::evaluation::{auroc, evaluate, evaluate_predictions, LabelTable};
use glcon_core::inference::{dual_query_score, fused_score, EmbeddedPromptSet, FusionMode, PredictionMatrix, Taus};
use glcon_core::numeric::cosine;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn prompt_set(rng: &mut impl Rng, d: usize) -> EmbeddedPromptSet {
    EmbeddedPromptSet {
        local_pos: vector(rng, d),
        local_neg: vector(rng, d),
        global_pos: vector(rng, d),
        global_neg: vector(rng, d),
    }
}

#[test]
fn dual_query_worked_values() {
    let img = [1.0, 0.0];
    let q = [0.3, 0.7];
    assert_eq!(dual_query_score(&img, &q, &q, 0.05).unwrap(), 0.5);
    let pos = [0.8, 0.6];
    let neg = [0.2, (1.0f64 - 0.04).sqrt()];
    let s = dual_query_score(&img, &pos, &neg, 1.0).unwrap();
    assert!((s - 1.0 / (1.0 + (-0.6f64).exp())).abs() < 1e-15);
    assert!((s - 0.645656).abs() < 1e-6);
    let hot = dual_query_score(&img, &pos, &neg, 1e12).unwrap();
    assert!((hot - 0.5).abs() < 1e-12);
    assert!(dual_query_score(&img, &pos, &neg, 0.0).is_err());
}

#[test]
fn swapping_queries_complements_the_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let (img, p, n) = (vector(&mut rng, 8), vector(&mut rng, 8), vector(&mut rng, 8));
        let tau = rng.random_range(0.01..2.0);
        let s = dual_query_score(&img, &p, &n, tau).unwrap();
        let t = dual_query_score(&img, &n, &p, tau).unwrap();
        assert!((s - (1.0 - t)).abs() < 1e-12);
    }
}

#[test]
fn fusion_modes_are_bounded_and_mean_is_the_hand_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let set = prompt_set(&mut rng, 6);
        let (l, g) = (vector(&mut rng, 6), vector(&mut rng, 6));
        let taus = Taus {
            local: rng.random_range(0.01..1.0),
            global: rng.random_range(0.01..1.0),
        };
        let score = |m| fused_score(&l, &g, &set, taus, m).unwrap();
        for m in FusionMode::ALL {
            assert!((0.0..=1.0).contains(&score(m)), "{m:?}");
        }
        let hand = (score(FusionMode::Local) + score(FusionMode::Global)) / 2.0;
        assert!((score(FusionMode::Mean) - hand).abs() < 1e-12);
        assert_eq!(score(FusionMode::Max), score(FusionMode::Local).max(score(FusionMode::Global)));
    }
}

#[test]
fn equal_head_probabilities_survive_max_and_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = vector(&mut rng, 5);
    let (p, n) = (vector(&mut rng, 5), vector(&mut rng, 5));
    let set = EmbeddedPromptSet {
        local_pos: p.clone(),
        local_neg: n.clone(),
        global_pos: p,
        global_neg: n,
    };
    let taus = Taus { local: 0.3, global: 0.3 };
    let local = fused_score(&v, &v, &set, taus, FusionMode::Local).unwrap();
    for m in [FusionMode::Max, FusionMode::Mean] {
        assert_eq!(fused_score(&v, &v, &set, taus, m).unwrap(), local);
    }
}

#[test]
fn concatenation_with_zeroed_global_matches_scalar_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut differs = 0;
    for _ in 0..100 {
        let mut set = prompt_set(&mut rng, 4);
        let l = vector(&mut rng, 4);
        let g = vec![0.0; 4];
        set.global_pos = vector(&mut rng, 4);
        let taus = Taus { local: 0.2, global: 0.5 };
        let cat = fused_score(&l, &g, &set, taus, FusionMode::Cat).unwrap();
        let join = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().chain(b).copied().collect() };
        let x = join(&l, &g);
        let sp = cosine(&x, &join(&set.local_pos, &set.global_pos)).unwrap();
        let sn = cosine(&x, &join(&set.local_neg, &set.global_neg)).unwrap();
        let want = (sp / taus.global).exp() / ((sp / taus.global).exp() + (sn / taus.global).exp());
        assert!((cat - want).abs() < 1e-10);
        let local = fused_score(&l, &g, &set, taus, FusionMode::Local).unwrap();
        if (cat - local).abs() > 1e-6 {
            differs += 1;
        }
    }
    assert!(differs > 90, "{differs}");
}

fn pair_count(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                pairs += 1.0;
                wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

#[test]
fn auroc_worked_values() {
    assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.2], &[true, false, true, false]).unwrap(), Some(0.75));
    assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.2], &[true, true, false, false]).unwrap(), Some(1.0));
    assert_eq!(auroc(&[0.4; 6], &[true, false, true, false, false, true]).unwrap(), Some(0.5));
    assert_eq!(auroc(&[0.1, 0.2], &[true, true]).unwrap(), None);
}

fn random_problem(rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<LabelVector>) {
    // coarse scores so ties occur
    let scores = (0..50)
        .map(|_| (0..5).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect())
        .collect();
    let labels = (0..50)
        .map(|_| {
            let v = (0..5)
                .map(|_| {
                    if rng.random::<f64>() < 0.2 {
                        [UNCERTAIN, MISSING][rng.random_range(0..2)]
                    } else if rng.random::<bool>() {
                        PRESENT
                    } else {
                        ABSENT
                    }
                })
                .collect();
            LabelVector::new(v).unwrap()
        })
        .collect();
    (scores, labels)
}

#[test]
fn evaluation_matches_pair_counting_on_random_problems() {
    let classes: Vec<String> = (0..5).map(|c| format!("c{c}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let (scores, labels) = random_problem(&mut rng);
        let report = evaluate(&scores, &labels, &classes).unwrap();
        let mut defined = Vec::new();
        for c in 0..5 {
            let (mut s, mut y) = (Vec::new(), Vec::new());
            for (row, lab) in scores.iter().zip(&labels) {
                match lab.values()[c] {
                    PRESENT => y.push(true),
                    ABSENT => y.push(false),
                    _ => continue,
                }
                s.push(row[c]);
            }
            let want = pair_count(&s, &y);
            match (report.classes[c].auroc, want) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
            defined.extend(want);
        }
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        assert!((report.mean_auroc - mean).abs() < 1e-12);
    }
}

#[test]
fn masked_entries_are_never_read() {
    let classes: Vec<String> = (0..5).map(|c| format!("c{c}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (scores, labels) = random_problem(&mut rng);
        let clean = evaluate(&scores, &labels, &classes).unwrap();
        let mut poisoned = scores.clone();
        for (row, lab) in poisoned.iter_mut().zip(&labels) {
            for (s, &v) in row.iter_mut().zip(lab.values()) {
                if v < 0 {
                    *s = f64::NAN;
                }
            }
        }
        assert_eq!(evaluate(&poisoned, &labels, &classes).unwrap(), clean);
    }
}

#[test]
fn masking_equals_prefiltering() {
    let classes = vec!["a".to_string()];
    let scores = [0.9, 0.1, 0.8, 0.4, 0.3, 0.7].map(|s| vec![s]).to_vec();
    let raw = [PRESENT, ABSENT, MISSING, PRESENT, UNCERTAIN, ABSENT];
    let labels: Vec<LabelVector> = raw.iter().map(|&v| LabelVector::new(vec![v]).unwrap()).collect();
    let masked = evaluate(&scores, &labels, &classes).unwrap();
    let keep: Vec<usize> = (0..6).filter(|&i| raw[i] >= 0).collect();
    let filtered = evaluate(
        &keep.iter().map(|&i| scores[i].clone()).collect::<Vec<_>>(),
        &keep.iter().map(|&i| labels[i].clone()).collect::<Vec<_>>(),
        &classes,
    )
    .unwrap();
    assert_eq!(masked, filtered);
}

#[test]
fn fully_masked_class_is_left_out_of_the_mean() {
    let classes = vec!["a".to_string(), "b".to_string()];
    let scores = vec![vec![0.9, 0.2], vec![0.1, 0.3]];
    let labels = vec![
        LabelVector::new(vec![PRESENT, MISSING]).unwrap(),
        LabelVector::new(vec![ABSENT, MISSING]).unwrap(),
    ];
    let r = evaluate(&scores, &labels, &classes).unwrap();
    assert_eq!(r.classes[1].auroc, None);
    assert_eq!(r.mean_auroc, 1.0);
}

#[test]
fn prediction_and_label_files_align_by_id() {
    let classes = vec!["a".to_string(), "b".to_string()];
    let img = Image::filled(2, 2, 1, 0.5).unwrap();
    let recs: Vec<ReportRecord> = [("x", [1, 0]), ("y", [0, 1]), ("z", [1, -1])]
        .iter()
        .map(|(id, l)| {
            ReportRecord::new(*id, img.clone(), vec!["Fine.".into()], Some(LabelVector::new(l.to_vec()).unwrap())).unwrap()
        })
        .collect();
    let table = LabelTable::from_records(&recs, &classes).unwrap();
    let preds = PredictionMatrix::new(
        vec!["z".into(), "x".into(), "y".into()],
        classes.clone(),
        vec![vec![0.7, 0.5], vec![0.8, 0.1], vec![0.2, 0.9]],
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    preds.write_csv(&path).unwrap();
    let reread = PredictionMatrix::read_csv(&path).unwrap();
    assert_eq!(reread, preds);
    let r = evaluate_predictions(&reread, &table).unwrap();
    assert_eq!(r.auroc_of("a"), Some(1.0));
    assert_eq!(r.auroc_of("b"), Some(1.0));

    let missing = PredictionMatrix::new(vec!["x".into()], classes, vec![vec![0.5, 0.5]]).unwrap();
    assert!(evaluate_predictions(&missing, &table).is_err());
}

proptest! {
    #[test]
    fn auroc_stays_in_unit_interval(scores in prop::collection::vec(0.0f64..1.0, 2..40), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<bool> = scores.iter().map(|_| rng.random()).collect();
        if let Some(a) = auroc(&scores, &y).unwrap() {
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a - pair_count(&scores, &y).unwrap()).abs() < 1e-12);
        }
    }
}
