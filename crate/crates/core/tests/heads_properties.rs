use geomattn::heads::{batch_hard_triplet, smoothed_cross_entropy, smoothed_targets, CosineClassifier};
use geomattn::Tensor;
use proptest::prelude::*;

/// Triplet loss from every (anchor, positive, negative) triple.
fn exhaustive_triplet(emb: &Tensor, labels: &[usize], margin: f64) -> Option<f64> {
    let n = labels.len();
    let d = emb.shape()[1];
    let dist = |a: usize, b: usize| {
        (0..d)
            .map(|k| (emb.data()[a * d + k] - emb.data()[b * d + k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut losses = Vec::new();
    for a in 0..n {
        let mut worst: Option<f64> = None;
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                let v = margin + dist(a, p) - dist(a, q);
                worst = Some(worst.map_or(v, |w: f64| w.max(v)));
            }
        }
        if let Some(w) = worst {
            losses.push(w.max(0.0));
        }
    }
    (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
}

fn batch() -> impl Strategy<Value = (Tensor, Vec<usize>)> {
    (2usize..5, 2usize..4, 1usize..5).prop_flat_map(|(ids, per, d)| {
        let n = ids * per;
        prop::collection::vec(-2.0..2.0f64, n * d)
            .prop_map(move |v| (Tensor::new([n, d], v).unwrap(), (0..n).map(|i| i % ids).collect()))
    })
}

proptest! {
    #[test]
    fn batch_hard_equals_worst_triple((emb, labels) in batch(), margin in 0.0..1.5f64) {
        let (loss, stats) = batch_hard_triplet(&emb, &labels, margin).unwrap();
        let oracle = exhaustive_triplet(&emb, &labels, margin).unwrap();
        prop_assert!((loss - oracle).abs() < 1e-12);
        prop_assert_eq!(stats.valid_anchors, labels.len());
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn smoothed_targets_are_distributions(classes in 2usize..10, eps in 0.0..0.99f64, y in 0usize..10) {
        let y = y % classes;
        let t = smoothed_targets(&[y], classes, eps).unwrap();
        prop_assert!((t.sum() - 1.0).abs() < 1e-12);
        prop_assert!(t.data()[y] >= t.data()[(y + 1) % classes]);
    }

    #[test]
    fn smoothed_ce_matches_direct_formula(logits in prop::collection::vec(-5.0..5.0f64, 2..8), eps in 0.0..0.5f64, y in 0usize..8) {
        let b = logits.len();
        let y = y % b;
        let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
        let direct: f64 = (0..b)
            .map(|j| {
                let q = if j == y { 1.0 - eps + eps / b as f64 } else { eps / b as f64 };
                -q * (logits[j] - lse)
            })
            .sum();
        let got = smoothed_cross_entropy(&Tensor::new([b], logits).unwrap(), y, eps).unwrap();
        prop_assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn cosine_probs_ignore_feature_norm(f in prop::collection::vec(-1.0..1.0f64, 3), s in 0.1..10.0f64) {
        prop_assume!(f.iter().map(|x| x * x).sum::<f64>() > 1e-4);
        let w = Tensor::new([4, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let cc = CosineClassifier::new(w, 10.0).unwrap();
        let a = cc.probs(&Tensor::new([3], f.clone()).unwrap()).unwrap();
        let b = cc.probs(&Tensor::new([3], f.iter().map(|x| x * s).collect()).unwrap()).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        prop_assert!((a.sum() - 1.0).abs() < 1e-12);
    }
}
