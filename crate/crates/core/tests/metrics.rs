use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s5_core::metrics::{argmax_map, miou, ConfusionMatrix};
use s5_core::model::{ModelConfig, SegNet};
use s5_core::synth::{self, CorpusConfig};
use s5_core::train;

const IGNORE: u16 = 255;

/// IoU by counting sets of pixel indices directly.
fn oracle(preds: &[Vec<u16>], truths: &[Vec<u16>], k: usize) -> Vec<Option<f64>> {
    (0..k as u16)
        .map(|c| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (p, t) in preds.iter().zip(truths) {
                for (&a, &b) in p.iter().zip(t) {
                    if b == IGNORE {
                        continue;
                    }
                    let (in_p, in_t) = (a == c, b == c);
                    inter += (in_p && in_t) as usize;
                    union += (in_p || in_t) as usize;
                }
            }
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect()
}

#[test]
fn miou_matches_set_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let k = rng.random_range(2..7);
        let n = rng.random_range(1..5);
        let len = rng.random_range(1..30);
        let mut draw = |ignore: bool| -> Vec<Vec<u16>> {
            (0..n)
                .map(|_| {
                    (0..len)
                        .map(|_| if ignore && rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..k as u16) })
                        .collect()
                })
                .collect()
        };
        let preds = draw(false);
        let truths = draw(true);
        let (per, mean) = miou(&preds, &truths, k, IGNORE);
        let want = oracle(&preds, &truths, k);
        for (a, b) in per.iter().zip(&want) {
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (None, None) => {}
                other => panic!("presence mismatch {other:?}"),
            }
        }
        let present: Vec<f64> = want.into_iter().flatten().collect();
        let want_mean = present.iter().sum::<f64>() / present.len().max(1) as f64;
        assert!((mean - want_mean).abs() < 1e-12);
    }
}

#[test]
fn two_by_two_hand_case() {
    let (per, mean) = miou(&[vec![0, 1, 1, 1]], &[vec![0, 0, 1, 1]], 2, IGNORE);
    assert_eq!(per, vec![Some(0.5), Some(2.0 / 3.0)]);
    assert!((mean - 7.0 / 12.0).abs() < 1e-15);
}

#[test]
fn merged_matrices_equal_one_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let maps: Vec<(Vec<u16>, Vec<u16>)> = (0..6)
        .map(|_| ((0..20).map(|_| rng.random_range(0..3)).collect(), (0..20).map(|_| rng.random_range(0..3)).collect()))
        .collect();
    let mut whole = ConfusionMatrix::new(3);
    let mut merged = ConfusionMatrix::new(3);
    for (p, t) in &maps {
        whole.add(p, t, IGNORE);
        let mut part = ConfusionMatrix::new(3);
        part.add(p, t, IGNORE);
        merged.merge(&part);
    }
    assert_eq!(whole, merged);
    assert_eq!(whole.total(), 120);
}

#[test]
fn argmax_ties_go_to_lowest_class() {
    assert_eq!(argmax_map(&[0.25; 8], 4), vec![0, 0]);
    assert_eq!(argmax_map(&[0.1, 0.7, 0.7, 0.3, 0.2, 0.5], 3), vec![1, 2]);
}

#[test]
fn untrained_model_is_near_chance() {
    let cc = CorpusConfig {
        labeled: 0,
        val: 40,
        unlabeled_clean: 0,
        ..CorpusConfig::default()
    };
    let mut scores: Vec<f64> = (1..=3)
        .map(|seed| {
            let corpus = synth::gen_corpus(&cc, seed).unwrap();
            let net = SegNet::init(&ModelConfig::default(), seed).unwrap();
            train::confusion(&net, &corpus.labeled, 0).unwrap().miou()
        })
        .collect();
    scores.sort_by(f64::total_cmp);
    assert!(scores[1] < 0.35, "{scores:?}");
}
