//! Brute-force checkers written from the rule statements alone.

/// Violations of the per-group perturbation rules for one input/output pair.
/// `groups` are the group sizes in order.
pub fn label_rule_violations(groups: &[usize], input: &[u8], output: &[u8]) -> Vec<String> {
    let mut out = Vec::new();
    if input.len() != output.len() || input.len() != groups.iter().sum::<usize>() {
        out.push(format!("length mismatch: {} in, {} out", input.len(), output.len()));
        return out;
    }
    let mut start = 0;
    for (gi, &size) in groups.iter().enumerate() {
        let x = &input[start..start + size];
        let y = &output[start..start + size];
        start += size;
        let ones = |v: &[u8]| v.iter().filter(|&&b| b == 1).count();
        let (p, z) = (ones(x), size - ones(x));
        let mut fail = |why: &str| out.push(format!("group {gi} {x:?} -> {y:?}: {why}"));
        if y.iter().any(|&b| b > 1) {
            fail("non-binary output");
            continue;
        }
        if size == 1 {
            if y[0] == x[0] {
                fail("singleton not negated");
            }
        } else if p == 0 || z == 0 {
            if y != x {
                fail("group without a valid shift changed");
            }
        } else if p <= z {
            if (0..size).any(|k| x[k] == 1 && y[k] == 1) {
                fail("an original positive stayed");
            }
            if ones(y) != p {
                fail("positive count changed");
            }
        } else {
            if (0..size).any(|k| x[k] == 0 && y[k] == 0) {
                fail("a former zero was not filled");
            }
            let moved = (0..size).filter(|&k| x[k] == 1 && y[k] == 0).count();
            if moved != z {
                fail("wrong number of positives moved");
            }
            if ones(y) != p {
                fail("positive count changed");
            }
        }
    }
    out
}

/// Every binary vector of length `n`, lowest index as the least significant bit.
pub fn all_label_vectors(n: usize) -> impl Iterator<Item = Vec<u8>> {
    (0u64..1 << n).map(move |m| (0..n).map(|k| ((m >> k) & 1) as u8).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BruteMetrics {
    pub m_a: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Row-major `m×n` scores and targets; strict threshold, micro-aggregated
/// counts, AP over ranks with ties broken by sample index, mA over
/// attributes having a positive (0 when none does).
pub fn brute_metrics(scores: &[f32], targets: &[f32], m: usize, n: usize, threshold: f32) -> BruteMetrics {
    let (mut tp, mut tn, mut fp, mut fneg) = (0u32, 0u32, 0u32, 0u32);
    for (s, t) in scores.iter().zip(targets) {
        match (*s > threshold, *t == 1.0) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
        }
    }
    let mut aps = Vec::new();
    for j in 0..n {
        let s = |i: usize| scores[i * n + j];
        let positive = |i: usize| targets[i * n + j] == 1.0;
        let rank = |i: usize| 1 + (0..m).filter(|&k| s(k) > s(i) || (s(k) == s(i) && k < i)).count();
        let pos: Vec<usize> = (0..m).filter(|&i| positive(i)).collect();
        if pos.is_empty() {
            continue;
        }
        let total: f64 = pos
            .iter()
            .map(|&i| {
                let r = rank(i);
                let hits = pos.iter().filter(|&&k| rank(k) <= r).count();
                hits as f64 / r as f64
            })
            .sum();
        aps.push(total / pos.len() as f64);
    }
    let m_a = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    let (tp, tn, fp, fneg) = (tp as f64, tn as f64, fp as f64, fneg as f64);
    let precision = safe_div(tp, tp + fp);
    let recall = safe_div(tp, tp + fneg);
    BruteMetrics {
        m_a,
        accuracy: (tp + tn) / (tp + tn + fp + fneg),
        precision,
        recall,
        f1: safe_div(2.0 * precision * recall, precision + recall),
    }
}
