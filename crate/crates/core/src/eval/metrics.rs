use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Average precision of `pred` with the first `l` ids of `truth` as positives.
///
/// Both orders must be permutations of the same ids.
pub fn map_at_l(pred: &[usize], truth: &[usize], l: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Precondition(format!(
            "prediction ranks {} ids, truth ranks {}",
            pred.len(),
            truth.len()
        )));
    }
    if l == 0 || l > truth.len() {
        return Err(Error::Precondition(format!(
            "L must be in 1..={}, got {l}",
            truth.len()
        )));
    }
    let pred_set: HashSet<usize> = pred.iter().copied().collect();
    if pred_set.len() != pred.len() || truth.iter().any(|id| !pred_set.contains(id)) {
        return Err(Error::Precondition(
            "prediction and truth rank different id sets".into(),
        ));
    }
    let positives: HashSet<usize> = truth[..l].iter().copied().collect();
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, id) in pred.iter().enumerate() {
        if positives.contains(id) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
            if hits == l {
                break;
            }
        }
    }
    Ok(sum / l as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEvalReport {
    pub l: usize,
    pub per_query: Vec<f64>,
    pub mean: f64,
    pub std_err: f64,
}

impl RankEvalReport {
    pub fn from_values(l: usize, per_query: Vec<f64>) -> Self {
        let (mean, std_err) = mean_and_se(&per_query);
        RankEvalReport {
            l,
            per_query,
            mean,
            std_err,
        }
    }

    pub fn queries(&self) -> usize {
        self.per_query.len()
    }
}

/// Mean and standard error of the mean (zero for fewer than two values).
pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// mAP(L) for each `L` over paired `(predicted, truth)` orders.
pub fn eval_orders(pairs: &[(Vec<usize>, Vec<usize>)], ls: &[usize]) -> Result<Vec<RankEvalReport>> {
    if pairs.is_empty() {
        return Err(Error::Precondition("no queries to evaluate".into()));
    }
    ls.iter()
        .map(|&l| {
            let per = pairs
                .iter()
                .map(|(p, t)| map_at_l(p, t, l))
                .collect::<Result<Vec<f64>>>()?;
            Ok(RankEvalReport::from_values(l, per))
        })
        .collect()
}

fn ranks_of(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // ties share the average rank
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Precondition(
            "spearman needs two equal-length series of length ≥ 2".into(),
        ));
    }
    Ok(pearson(&ranks_of(a), &ranks_of(b)))
}

/// Spearman correlation between two orderings of the same ids.
pub fn order_spearman(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let pos: HashMap<usize, usize> = truth.iter().enumerate().map(|(r, &id)| (id, r)).collect();
    if pred.len() != truth.len() || pos.len() != truth.len() {
        return Err(Error::Precondition("orders rank different id sets".into()));
    }
    let mut a = Vec::with_capacity(pred.len());
    let mut b = Vec::with_capacity(pred.len());
    for (r, id) in pred.iter().enumerate() {
        let t = pos
            .get(id)
            .ok_or_else(|| Error::Precondition("orders rank different id sets".into()))?;
        a.push(r as f64);
        b.push(*t as f64);
    }
    spearman(&a, &b)
}

/// One-sided sign test: `P(X ≥ wins)` for `X ~ Binomial(n, 1/2)`, ties dropped.
pub fn sign_test(diffs: &[f64]) -> (usize, usize, f64) {
    let wins = diffs.iter().filter(|d| **d > 0.0).count();
    let n = diffs.iter().filter(|d| **d != 0.0).count();
    let mut p = 0.0;
    // ln C(n, k) accumulated to stay finite for large n
    for k in wins..=n {
        let ln_c: f64 = (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum();
        p += (ln_c - n as f64 * std::f64::consts::LN_2).exp();
    }
    (wins, n, p.min(1.0))
}
