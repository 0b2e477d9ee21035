//! Brute-force references for the metrics, written without sorting helpers.

use faircda_core::metrics::{auc_roc, average_precision, delta_dp, delta_eo, EvalSlice};

pub fn dp(p: &[f64], a: &[f64]) -> Option<f64> {
    let mut s = [0.0; 2];
    let mut c = [0.0; 2];
    for i in 0..p.len() {
        let g = if a[i] == 1.0 { 1 } else { 0 };
        s[g] += p[i];
        c[g] += 1.0;
    }
    if c[0] == 0.0 || c[1] == 0.0 {
        return None;
    }
    Some((s[0] / c[0] - s[1] / c[1]).abs())
}

pub fn eo(p: &[f64], y: &[f64], a: &[f64]) -> Option<f64> {
    let mut total = 0.0;
    for label in [0.0, 1.0] {
        let idx: Vec<usize> = (0..p.len()).filter(|&i| y[i] == label).collect();
        let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let aa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
        total += dp(&pp, &aa)?;
    }
    Some(total)
}

/// Repeatedly takes the largest remaining prediction, earliest index first.
fn rank(p: &[f64]) -> Vec<usize> {
    let mut used = vec![false; p.len()];
    let mut order = vec![];
    for _ in 0..p.len() {
        let mut best: Option<usize> = None;
        for i in 0..p.len() {
            if !used[i] && best.is_none_or(|b| p[i] > p[b]) {
                best = Some(i);
            }
        }
        used[best.unwrap()] = true;
        order.push(best.unwrap());
    }
    order
}

pub fn ap(p: &[f64], y: &[f64]) -> Option<f64> {
    let total_pos = y.iter().filter(|&&v| v == 1.0).count() as f64;
    if total_pos == 0.0 {
        return None;
    }
    let order = rank(p);
    let (mut prev_recall, mut sum) = (0.0, 0.0);
    for k in 1..=p.len() {
        let tp = order[..k].iter().filter(|&&i| y[i] == 1.0).count() as f64;
        let precision = tp / k as f64;
        let recall = tp / total_pos;
        sum += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(sum)
}

pub fn auc(p: &[f64], y: &[f64]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..p.len() {
        for j in 0..p.len() {
            if y[i] == 1.0 && y[j] == 0.0 {
                pairs += 1.0;
                if p[i] > p[j] {
                    num += 1.0;
                } else if p[i] == p[j] {
                    num += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| num / pairs)
}

/// Compares every metric against its reference on one instance; returns the worst disagreement,
/// or `f64::INFINITY` when one side is defined and the other is not.
pub fn disagreement(p: &[f64], y: &[f64], a: &[f64]) -> f64 {
    let s = EvalSlice::new(p, y, a).unwrap();
    let cmp = |got: Option<f64>, want: Option<f64>| match (got, want) {
        (Some(g), Some(w)) => (g - w).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    [
        cmp(delta_dp(&s).ok(), dp(p, a)),
        cmp(delta_eo(&s).ok(), eo(p, y, a)),
        cmp(average_precision(&s).ok(), ap(p, y)),
        cmp(auc_roc(&s).ok(), auc(p, y)),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn bits(mask: u32, n: usize) -> Vec<f64> {
    (0..n).map(|i| ((mask >> i) & 1) as f64).collect()
}

/// Every instance of length 1..=8 over the small grid: all label and attribute
/// vectors, combined with every prediction vector over {0.1, 0.5, 0.9} up to
/// length 4 and a fixed family of tie-heavy and distinct prediction vectors beyond.
pub fn exhaustive_worst() -> (f64, usize) {
    let grid = [0.1, 0.5, 0.9];
    let (mut worst, mut count) = (0.0f64, 0usize);
    for n in 1..=8usize {
        let preds: Vec<Vec<f64>> = if n <= 4 {
            (0..3usize.pow(n as u32))
                .map(|mut c| {
                    (0..n)
                        .map(|_| {
                            let v = grid[c % 3];
                            c /= 3;
                            v
                        })
                        .collect()
                })
                .collect()
        } else {
            vec![
                (0..n).map(|i| i as f64 / n as f64).collect(),
                (0..n).map(|i| 1.0 - i as f64 / n as f64).collect(),
                vec![0.5; n],
                (0..n).map(|i| grid[i % 3]).collect(),
                (0..n).map(|i| grid[(i * 7 + 1) % 3]).collect(),
                (0..n).map(|i| ((i * 5 + 3) % n) as f64 / n as f64).collect(),
            ]
        };
        for ym in 0..(1u32 << n) {
            let y = bits(ym, n);
            for am in 0..(1u32 << n) {
                let a = bits(am, n);
                for p in &preds {
                    worst = worst.max(disagreement(p, &y, &a));
                    count += 1;
                }
            }
        }
    }
    (worst, count)
}

/// 1,000 seeded instances with lengths 1..=200 and predictions on a coarse grid (frequent ties).
pub fn random_worst(seed: u64) -> f64 {
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = 1 + (next() % 200) as usize;
        let p: Vec<f64> = (0..n).map(|_| (next() % 21) as f64 / 20.0).collect();
        let y: Vec<f64> = (0..n).map(|_| (next() % 2) as f64).collect();
        let a: Vec<f64> = (0..n).map(|_| (next() % 2) as f64).collect();
        worst = worst.max(disagreement(&p, &y, &a));
    }
    worst
}
