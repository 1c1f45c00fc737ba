//! Brute-force references shared by unit and acceptance tests.

use num_bigint::BigInt;
use num_rational::BigRational;
use ovad::evidential::EvidenceOutput;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rat(n: u64, d: u64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Random instance: integer score keys (small ranges force ties) with both
/// labels present.
pub fn auc_instance(rng: &mut ChaCha8Rng) -> (Vec<i64>, Vec<u8>) {
    let n = rng.random_range(2..=200);
    let range = rng.random_range(1..=3 * n as i64);
    loop {
        let keys: Vec<i64> = (0..n).map(|_| rng.random_range(0..range)).collect();
        let p = rng.random_range(0.05..0.95);
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(p))).collect();
        if labels.contains(&0) && labels.contains(&1) {
            return (keys, labels);
        }
    }
}

/// Pairwise count over every (positive, negative) pair.
pub fn roc_oracle(keys: &[i64], labels: &[u8]) -> BigRational {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1;
            twice += match keys[i].cmp(&keys[j]) {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    rat(twice, 2 * pairs)
}

/// Precision at each distinct threshold times the recall gained there,
/// with every count recomputed from scratch.
pub fn pr_oracle(keys: &[i64], labels: &[u8]) -> BigRational {
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let mut thresholds: Vec<i64> = keys.to_vec();
    thresholds.sort_unstable_by(|a, b| b.cmp(a));
    thresholds.dedup();
    let mut area = rat(0, 1);
    let mut prev_tp = 0u64;
    for t in thresholds {
        let above: Vec<usize> = (0..keys.len()).filter(|&i| keys[i] >= t).collect();
        let tp = above.iter().filter(|&&i| labels[i] == 1).count() as u64;
        if tp > prev_tp {
            area += rat(tp - prev_tp, pos) * rat(tp, above.len() as u64);
        }
        prev_tp = tp;
    }
    area
}

pub fn random_bag(rng: &mut ChaCha8Rng) -> Vec<EvidenceOutput<f64>> {
    let n = rng.random_range(1..=40);
    // Small integer evidence makes ties common.
    let coarse = rng.random_bool(0.3);
    (0..n)
        .map(|_| {
            if coarse {
                EvidenceOutput::from_alpha(rng.random_range(1..5) as f64, rng.random_range(1..5) as f64)
            } else {
                EvidenceOutput::from_alpha(1.0 + rng.random_range(0.0..20.0), 1.0 + rng.random_range(0.0..20.0))
            }
        })
        .collect()
}

/// Direct reading of the rule: rank of `i` under key `k` counts instances
/// that beat it, with lower indices winning ties.
pub fn rank_oracle(bag: &[EvidenceOutput<f64>], tau_p: usize, tau_u: usize) -> Vec<usize> {
    let rank = |i: usize, key: &dyn Fn(&EvidenceOutput<f64>) -> f64| {
        (0..bag.len())
            .filter(|&j| key(&bag[j]) > key(&bag[i]) || (key(&bag[j]) == key(&bag[i]) && j < i))
            .count()
    };
    (0..bag.len())
        .filter(|&i| rank(i, &|e| e.p_pos) < tau_p && rank(i, &|e| e.alpha_pos) < tau_u)
        .collect()
}

/// p₊ = (.9, .8, .7, .6, .5, .4) with α₊ = (10, 2, 9, 8, 1, 7); ranks 4 and 4
/// keep {0, 2, 3}.
pub fn six_instance_bag() -> Vec<EvidenceOutput<f64>> {
    let p = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
    let a = [10.0, 2.0, 9.0, 8.0, 1.0, 7.0];
    // Recover α₋ from p₊ = α₊/(α₊+α₋).
    p.iter().zip(a).map(|(&p, a): (&f64, f64)| EvidenceOutput::from_alpha(a, a * (1.0 - p) / p)).collect()
}
