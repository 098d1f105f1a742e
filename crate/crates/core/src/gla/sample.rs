use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use super::config::Sampling;

/// Index of the largest logit, lowest index on ties.
fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

fn draw<R: Rng + ?Sized>(logits: &[f64], keep: &[usize], tau: f64, rng: &mut R) -> usize {
    let max = keep.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = keep.iter().map(|&i| ((logits[i] - max) / tau).exp()).collect();
    // the max entry has weight 1, so the distribution is never empty
    let dist = WeightedIndex::new(&weights).expect("at least one positive weight");
    keep[dist.sample(rng)]
}

pub fn sample_from_logits<R: Rng + ?Sized>(logits: &[f64], sampling: &Sampling, rng: &mut R) -> usize {
    match *sampling {
        Sampling::Greedy => argmax(logits),
        Sampling::Temperature { tau } => {
            let all: Vec<usize> = (0..logits.len()).collect();
            draw(logits, &all, tau, rng)
        }
        Sampling::TopK { k, tau } => {
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            order.truncate(k.max(1));
            draw(logits, &order, tau, rng)
        }
    }
}
