//! Expression-level and token-level recognition metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::vocab::TokenId;
use crate::error::{Error, Result};

/// Token-level Levenshtein distance with unit costs.
pub fn edit_distance(pred: &[TokenId], reference: &[TokenId]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, &p) in pred.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(p != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

fn check_pairs(preds: &[Vec<TokenId>], refs: &[Vec<TokenId>]) -> Result<()> {
    if preds.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} references",
            preds.len(),
            refs.len()
        )));
    }
    Ok(())
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Percentage of predictions within `k` token edits of their reference.
/// `k = 0` is the expression recognition rate.
pub fn exprate_at_k(preds: &[Vec<TokenId>], refs: &[Vec<TokenId>], k: usize) -> Result<f64> {
    check_pairs(preds, refs)?;
    let hits = preds.iter().zip(refs).filter(|(p, r)| edit_distance(p, r) <= k).count();
    Ok(percent(hits, refs.len()))
}

/// Corpus-level word error rate: total edits over total reference length.
pub fn wer(preds: &[Vec<TokenId>], refs: &[Vec<TokenId>]) -> Result<f64> {
    check_pairs(preds, refs)?;
    let length: usize = refs.iter().map(Vec::len).sum();
    if refs.is_empty() || length == 0 {
        return Err(Error::Input("word error rate of an empty corpus".into()));
    }
    let edits: usize = preds.iter().zip(refs).map(|(p, r)| edit_distance(p, r)).sum();
    Ok(100.0 * edits as f64 / length as f64)
}

/// Mean of per-sample error rates, the alternative to [`wer`].
pub fn wer_per_sample(preds: &[Vec<TokenId>], refs: &[Vec<TokenId>]) -> Result<f64> {
    check_pairs(preds, refs)?;
    if refs.is_empty() || refs.iter().any(Vec::is_empty) {
        return Err(Error::Input("per-sample error rate needs nonempty references".into()));
    }
    let total: f64 = preds
        .iter()
        .zip(refs)
        .map(|(p, r)| edit_distance(p, r) as f64 / r.len() as f64)
        .sum();
    Ok(100.0 * total / refs.len() as f64)
}

/// Share of samples whose first (and last) `min(n, |ref|)` tokens match.
pub fn prefix_suffix_accuracy(preds: &[Vec<TokenId>], refs: &[Vec<TokenId>], n: usize) -> Result<(f64, f64)> {
    check_pairs(preds, refs)?;
    if n == 0 {
        return Err(Error::Config("prefix length must be at least 1".into()));
    }
    let (mut pre, mut suf) = (0, 0);
    for (p, r) in preds.iter().zip(refs) {
        let m = n.min(r.len());
        if p.len() >= m && p[..m] == r[..m] {
            pre += 1;
        }
        if p.len() >= m && p[p.len() - m..] == r[r.len() - m..] {
            suf += 1;
        }
    }
    Ok((percent(pre, refs.len()), percent(suf, refs.len())))
}

/// Inclusive reference-length range; `hi = None` is unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Bucket {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl Bucket {
    pub fn contains(&self, len: usize) -> bool {
        len >= self.lo && self.hi.is_none_or(|h| len <= h)
    }

    fn overlaps(&self, other: &Bucket) -> bool {
        let a_hi = self.hi.unwrap_or(usize::MAX);
        let b_hi = other.hi.unwrap_or(usize::MAX);
        self.lo <= b_hi && other.lo <= a_hi
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(h) => format!("[{},{}]", self.lo, h),
            None => format!("[{},inf]", self.lo),
        }
    }
}

/// `[1,10] [11,20] [21,30] [31,40] [41,∞)`
pub fn default_buckets() -> Vec<Bucket> {
    let mut b: Vec<Bucket> = (0..4)
        .map(|i| Bucket {
            lo: 10 * i + 1,
            hi: Some(10 * i + 10),
        })
        .collect();
    b.push(Bucket { lo: 41, hi: None });
    b
}

/// Expression recognition rate per reference-length bucket. Buckets holding
/// no sample are absent from the result.
pub fn accuracy_by_length(
    preds: &[Vec<TokenId>],
    refs: &[Vec<TokenId>],
    buckets: &[Bucket],
) -> Result<BTreeMap<Bucket, f64>> {
    check_pairs(preds, refs)?;
    if buckets.is_empty() {
        return Err(Error::Config("no length buckets given".into()));
    }
    for (i, a) in buckets.iter().enumerate() {
        if a.hi.is_some_and(|h| h < a.lo) {
            return Err(Error::Config(format!("bucket {} is empty", a.label())));
        }
        for b in &buckets[i + 1..] {
            if a.overlaps(b) {
                return Err(Error::Config(format!("buckets {} and {} overlap", a.label(), b.label())));
            }
        }
    }
    let mut out = BTreeMap::new();
    for bucket in buckets {
        let (mut hits, mut total) = (0, 0);
        for (p, r) in preds.iter().zip(refs) {
            if bucket.contains(r.len()) {
                total += 1;
                hits += usize::from(p == r);
            }
        }
        if total > 0 {
            out.insert(*bucket, percent(hits, total));
        }
    }
    Ok(out)
}

/// Every metric for one evaluation run. Rates are percentages.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub exprate: f64,
    pub le1: f64,
    pub le2: f64,
    pub wer: f64,
    /// `(n, prefix %, suffix %)`
    pub prefix_suffix: Vec<(usize, f64, f64)>,
    pub by_length: BTreeMap<Bucket, f64>,
}

impl EvalReport {
    /// Full report with prefix/suffix lengths 2 and 5 and default buckets.
    pub fn compute(preds: &[Vec<TokenId>], refs: &[Vec<TokenId>]) -> Result<Self> {
        let mut prefix_suffix = Vec::new();
        for n in [2, 5] {
            let (p, s) = prefix_suffix_accuracy(preds, refs, n)?;
            prefix_suffix.push((n, p, s));
        }
        Ok(EvalReport {
            samples: refs.len(),
            exprate: exprate_at_k(preds, refs, 0)?,
            le1: exprate_at_k(preds, refs, 1)?,
            le2: exprate_at_k(preds, refs, 2)?,
            wer: wer(preds, refs)?,
            prefix_suffix,
            by_length: accuracy_by_length(preds, refs, &default_buckets())?,
        })
    }

    fn rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![
            ("samples".to_string(), self.samples.to_string()),
            ("exprate".to_string(), format!("{:.2}", self.exprate)),
            ("le1".to_string(), format!("{:.2}", self.le1)),
            ("le2".to_string(), format!("{:.2}", self.le2)),
            ("wer".to_string(), format!("{:.2}", self.wer)),
        ];
        for &(n, p, s) in &self.prefix_suffix {
            rows.push((format!("prefix{n}"), format!("{p:.2}")));
            rows.push((format!("suffix{n}"), format!("{s:.2}")));
        }
        for (b, acc) in &self.by_length {
            rows.push((format!("len{}", b.label()), format!("{acc:.2}")));
        }
        rows
    }

    /// Aligned two-column plain-text table.
    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v:>8}");
        }
        out
    }

    /// `metric,value` CSV with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.rows() {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }
}
