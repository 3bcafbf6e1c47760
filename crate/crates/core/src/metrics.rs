//! Regression and ranking metrics: MSE, concordance index, r_m², AUPR.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::record::Record;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPair {
    pub y: f64,
    pub y_hat: f64,
}

impl EvalPair {
    pub fn new(y: f64, y_hat: f64) -> Self {
        EvalPair { y, y_hat }
    }
}

fn check_finite(pairs: &[EvalPair]) -> Result<()> {
    match pairs.iter().position(|p| !p.y.is_finite() || !p.y_hat.is_finite()) {
        Some(i) => Err(Error::invalid(format!("pair {i} is not finite"))),
        None => Ok(()),
    }
}

pub fn mse(pairs: &[EvalPair]) -> Result<f64> {
    check_finite(pairs)?;
    if pairs.is_empty() {
        return Err(Error::invalid("mse of zero pairs"));
    }
    let total: f64 = pairs.iter().map(|p| (p.y_hat - p.y) * (p.y_hat - p.y)).sum();
    Ok(total / pairs.len() as f64)
}

/// O(n²) reference: `(1/N) Σ_{yᵢ>yⱼ} h(ŷᵢ − ŷⱼ)`.
pub fn concordance_index_brute(pairs: &[EvalPair]) -> Result<f64> {
    check_finite(pairs)?;
    let (mut sum, mut n) = (0.0, 0u64);
    for a in pairs {
        for b in pairs {
            if a.y > b.y {
                n += 1;
                sum += match a.y_hat.partial_cmp(&b.y_hat) {
                    Some(Ordering::Greater) => 1.0,
                    Some(Ordering::Equal) => 0.5,
                    _ => 0.0,
                };
            }
        }
    }
    if n == 0 {
        return Err(Error::Undefined("CI undefined"));
    }
    Ok(sum / n as f64)
}

/// Fenwick tree of counts over compressed prediction ranks.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> u64 {
        let (mut i, mut total) = (rank, 0);
        while i > 0 {
            total += self.0[i];
            i -= i & i.wrapping_neg();
        }
        total
    }
}

/// O(n log n) concordance index, bit-identical to
/// [`concordance_index_brute`].
pub fn concordance_index(pairs: &[EvalPair]) -> Result<f64> {
    check_finite(pairs)?;
    let mut preds: Vec<f64> = pairs.iter().map(|p| p.y_hat).collect();
    preds.sort_by(f64::total_cmp);
    preds.dedup();
    let rank = |v: f64| preds.partition_point(|&p| p < v);

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].y.total_cmp(&pairs[b].y));
    let mut tree = Fenwick(vec![0; preds.len() + 1]);
    let (mut inserted, mut n, mut twice_sum) = (0u64, 0u64, 0u64);
    let mut start = 0;
    while start < order.len() {
        let y = pairs[order[start]].y;
        let end = start + order[start..].iter().take_while(|&&i| pairs[i].y == y).count();
        for &i in &order[start..end] {
            let r = rank(pairs[i].y_hat);
            let less = tree.below(r);
            let equal = tree.below(r + 1) - less;
            twice_sum += 2 * less + equal;
            n += inserted;
        }
        for &i in &order[start..end] {
            tree.add(rank(pairs[i].y_hat));
        }
        inserted += (end - start) as u64;
        start = end;
    }
    if n == 0 {
        return Err(Error::Undefined("CI undefined"));
    }
    Ok((twice_sum as f64 / 2.0) / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rm2 {
    pub rm2: f64,
    pub r2: f64,
    pub r0_squared: f64,
    /// `r² − r₀²` was negative and clamped to zero.
    pub clamped: bool,
}

/// `r² · (1 − √(r² − r₀²))` with `r₀²` from the through-origin fit of `y` on `ŷ`.
pub fn rm2_index(pairs: &[EvalPair]) -> Result<Rm2> {
    check_finite(pairs)?;
    if pairs.len() < 2 {
        return Err(Error::invalid("rm2 needs at least two pairs"));
    }
    let n = pairs.len() as f64;
    let mean_y = pairs.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_p = pairs.iter().map(|p| p.y_hat).sum::<f64>() / n;
    let (mut syy, mut spp, mut syp, mut sp2, mut sy_p) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in pairs {
        let (dy, dp) = (p.y - mean_y, p.y_hat - mean_p);
        syy += dy * dy;
        spp += dp * dp;
        syp += dy * dp;
        sp2 += p.y_hat * p.y_hat;
        sy_p += p.y * p.y_hat;
    }
    if syy == 0.0 || spp == 0.0 {
        return Err(Error::Undefined("rm2 undefined for zero variance"));
    }
    let r2 = syp * syp / (syy * spp);
    let k = sy_p / sp2;
    let residual: f64 = pairs.iter().map(|p| (p.y - k * p.y_hat) * (p.y - k * p.y_hat)).sum();
    let r0_squared = 1.0 - residual / syy;
    let radicand = r2 - r0_squared;
    let clamped = radicand < 0.0;
    let rm2 = r2 * (1.0 - libm::sqrt(radicand.max(0.0)));
    Ok(Rm2 {
        rm2,
        r2,
        r0_squared,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetMode {
    Davis,
    Kiba,
}

impl DatasetMode {
    /// Affinity at or above which a pair counts as binding.
    pub fn threshold(self) -> f64 {
        match self {
            DatasetMode::Davis => 7.0,
            DatasetMode::Kiba => 12.1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetMode::Davis => "davis",
            DatasetMode::Kiba => "kiba",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "davis" => Ok(DatasetMode::Davis),
            "kiba" => Ok(DatasetMode::Kiba),
            other => Err(Error::Format(format!("unknown dataset mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledScore {
    pub label: bool,
    pub score: f64,
}

/// Label 1 iff `y ≥ threshold`; the prediction is kept as the score.
pub fn binarize(pairs: &[EvalPair], threshold: f64) -> Vec<LabeledScore> {
    pairs
        .iter()
        .map(|p| LabeledScore {
            label: p.y >= threshold,
            score: p.y_hat,
        })
        .collect()
}

/// Average precision: `Σ (Rᵢ − Rᵢ₋₁) · Pᵢ` over descending distinct scores,
/// tied scores forming one point.
pub fn aupr(scores: &[LabeledScore]) -> Result<f64> {
    if scores.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let positives = scores.iter().filter(|s| s.label).count();
    if positives == 0 || positives == scores.len() {
        return Err(Error::Undefined("AUPR undefined for single-class labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].score.total_cmp(&scores[a].score));
    let (mut tp, mut seen, mut recall_prev, mut area) = (0usize, 0usize, 0.0, 0.0);
    let mut start = 0;
    while start < order.len() {
        let s = scores[order[start]].score;
        let end = start + order[start..].iter().take_while(|&&i| scores[i].score == s).count();
        tp += order[start..end].iter().filter(|&&i| scores[i].label).count();
        seen += end - start;
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / seen as f64;
        area += (recall - recall_prev) * precision;
        recall_prev = recall;
        start = end;
    }
    Ok(area)
}

/// All four metrics for one prediction set; each field fails independently.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    pub threshold: f64,
    pub mse: Result<f64>,
    pub ci: Result<f64>,
    pub rm2: Result<Rm2>,
    pub aupr: Result<f64>,
}

pub fn evaluate(pairs: &[EvalPair], mode: DatasetMode) -> MetricsReport {
    let threshold = mode.threshold();
    MetricsReport {
        n: pairs.len(),
        threshold,
        mse: mse(pairs),
        ci: concordance_index(pairs),
        rm2: rm2_index(pairs),
        aupr: check_finite(pairs).and_then(|_| aupr(&binarize(pairs, threshold))),
    }
}

fn put(rec: &mut Record, key: &str, value: &Result<f64>) {
    match value {
        Ok(v) => rec.set(key, v),
        Err(e) => rec.set(format!("{key}_error"), e),
    }
}

impl MetricsReport {
    /// Flat record; a failed metric appears as `<name>_error`.
    pub fn to_record(&self) -> Record {
        let mut rec = Record::new();
        rec.set("n", self.n);
        rec.set("threshold", self.threshold);
        put(&mut rec, "mse", &self.mse);
        put(&mut rec, "ci", &self.ci);
        match &self.rm2 {
            Ok(r) => {
                rec.set("rm2", r.rm2);
                rec.set("r2", r.r2);
                rec.set("r0_squared", r.r0_squared);
                rec.set("rm2_clamped", r.clamped);
            }
            Err(e) => rec.set("rm2_error", e),
        }
        put(&mut rec, "aupr", &self.aupr);
        rec
    }

    /// Successful metric values by name.
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        for (name, v) in [("mse", &self.mse), ("ci", &self.ci), ("aupr", &self.aupr)] {
            if let Ok(v) = v {
                out.push((name, *v));
            }
        }
        if let Ok(r) = &self.rm2 {
            out.push(("rm2", r.rm2));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single value.
    pub std: f64,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::invalid("summary of zero values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
    };
    Ok(Summary {
        mean,
        std,
        count: values.len(),
    })
}

/// `<metric>.mean`, `<metric>.std` and `<metric>.count` over the reports in
/// which the metric succeeded.
pub fn aggregate(reports: &[MetricsReport]) -> Record {
    let mut rec = Record::new();
    rec.set("folds", reports.len());
    for name in ["mse", "ci", "rm2", "aupr"] {
        let values: Vec<f64> = reports
            .iter()
            .flat_map(|r| r.values())
            .filter(|(n, _)| *n == name)
            .map(|(_, v)| v)
            .collect();
        if let Ok(s) = summarize(&values) {
            rec.set(format!("{name}.mean"), s.mean);
            rec.set(format!("{name}.std"), s.std);
            rec.set(format!("{name}.count"), s.count);
        }
    }
    rec
}

/// `mean (std)` for display.
pub fn format_summary(s: &Summary) -> String {
    format!("{:.3} ({:.3})", s.mean, s.std)
}
