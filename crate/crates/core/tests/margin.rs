use difrec::encoder::{margin_loss, MarginConfig};
use difrec::{seeding, Array};
use rand::Rng;

/// Mean softmax cross-entropy over `s · cos(f_i, w_j)`, computed directly.
fn softmax_oracle(f: &Array, w: &Array, labels: &[usize], s: f64) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let fi = f.row(i);
        let fnorm = fi.iter().map(|v| v * v).sum::<f64>().sqrt();
        let logits: Vec<f64> = (0..w.rows())
            .map(|j| {
                let wj = w.row(j);
                let wnorm = wj.iter().map(|v| v * v).sum::<f64>().sqrt();
                s * fi.iter().zip(wj).map(|(a, b)| a * b).sum::<f64>() / (fnorm * wnorm)
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[y];
    }
    total / labels.len() as f64
}

#[test]
fn zero_margin_is_softmax_cross_entropy() {
    for seed in 0..50 {
        let mut rng = seeding::rng(seed);
        let (b, c, d) = (rng.gen_range(1..16), rng.gen_range(2..10), rng.gen_range(2..12));
        let f = Array::randn(&[b, d], rng.gen_range(0.1..5.0), &mut rng);
        let w = Array::randn(&[c, d], 1.0, &mut rng);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let s = rng.gen_range(1.0..64.0);
        let out = margin_loss(&f, &labels, &MarginConfig { scale: s, margin: 0.0 }, &w).unwrap();
        let oracle = softmax_oracle(&f, &w, &labels, s);
        assert!((out.loss - oracle).abs() < 1e-10, "seed {}: {} vs {}", seed, out.loss, oracle);
    }
}

#[test]
fn three_class_hand_case() {
    let f = Array::from_vec(vec![1, 2], vec![2.0, 0.0]).unwrap();
    let w = Array::from_vec(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
    let (s, m) = (16.0f64, 0.3f64);
    let out = margin_loss(&f, &[0], &MarginConfig { scale: s, margin: m }, &w).unwrap();
    let target = s * m.cos();
    let expected = -(target - (target.exp() + 1.0 + (-s).exp()).ln());
    assert!((out.loss - expected).abs() < 1e-12, "{} vs {}", out.loss, expected);

    // feature at 60° from its class: true logit uses cos(60° + m)
    let f = Array::from_vec(vec![1, 2], vec![0.5, 3f64.sqrt() / 2.0]).unwrap();
    let out = margin_loss(&f, &[0], &MarginConfig { scale: s, margin: m }, &w).unwrap();
    let theta = std::f64::consts::FRAC_PI_3;
    let logits = [s * (theta + m).cos(), s * (3f64.sqrt() / 2.0), -s * 0.5];
    let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
    assert!((out.loss - (lse - logits[0])).abs() < 1e-10);
}

#[test]
fn margin_raises_the_loss() {
    let mut rng = seeding::rng(9);
    let f = Array::randn(&[8, 5], 1.0, &mut rng);
    let w = Array::randn(&[4, 5], 1.0, &mut rng);
    let labels = [0, 1, 2, 3, 0, 1, 2, 3];
    let l0 = margin_loss(&f, &labels, &MarginConfig { scale: 16.0, margin: 0.0 }, &w).unwrap().loss;
    let l1 = margin_loss(&f, &labels, &MarginConfig { scale: 16.0, margin: 0.3 }, &w).unwrap().loss;
    assert!(l1 > l0);
}

#[test]
fn rejects_bad_inputs() {
    let w = Array::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let f = Array::from_vec(vec![1, 2], vec![1.0, 1.0]).unwrap();
    assert!(margin_loss(&f, &[2], &MarginConfig::default(), &w).is_err());
    let zero = Array::zeros(&[1, 2]);
    assert!(margin_loss(&zero, &[0], &MarginConfig::default(), &w).is_err());
    assert!(MarginConfig { scale: 0.0, margin: 0.3 }.validate().is_err());
    assert!(MarginConfig { scale: 16.0, margin: 2.0 }.validate().is_err());
}
