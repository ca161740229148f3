use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::EOS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BleuOptions {
    pub max_n: usize,
    /// Add one to matches and totals of every order above one.
    pub smooth: bool,
}

impl Default for BleuOptions {
    fn default() -> Self {
        BleuOptions { max_n: 4, smooth: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// In `[0, 100]`.
    pub score: f64,
    /// Clipped matches per order, `matches[n - 1]`.
    pub matches: Vec<usize>,
    /// Hypothesis n-grams per order.
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<W: Eq + Hash>(tokens: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU: clipped n-gram precisions pooled over the corpus, combined
/// by geometric mean and multiplied by the brevity penalty.
///
/// Orders for which the hypotheses contain no n-gram at all (every
/// hypothesis shorter than `n`) are left out of the mean. Without smoothing
/// a zero precision at any remaining order gives a score of 0.
pub fn bleu<W: Eq + Hash>(hyps: &[Vec<W>], refs: &[Vec<W>], opts: &BleuOptions) -> Result<BleuScore> {
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::contract("BLEU of an empty corpus"));
    }
    if opts.max_n == 0 {
        return Err(Error::contract("max_n must be positive"));
    }
    let mut matches = vec![0usize; opts.max_n];
    let mut totals = vec![0usize; opts.max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=opts.max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    let mut zero = hyp_len == 0;
    for n in 1..=opts.max_n {
        if totals[n - 1] == 0 {
            continue;
        }
        let (m, t) = if opts.smooth && n > 1 {
            (matches[n - 1] + 1, totals[n - 1] + 1)
        } else {
            (matches[n - 1], totals[n - 1])
        };
        if m == 0 {
            zero = true;
            break;
        }
        log_sum += (m as f64 / t as f64).ln();
        orders += 1;
    }
    let score = if zero || orders == 0 {
        0.0
    } else {
        100.0 * brevity_penalty * (log_sum / orders as f64).exp()
    };
    Ok(BleuScore {
        score,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Tokens before the first `EOS`.
pub fn strip_eos(tokens: &[usize]) -> &[usize] {
    let end = tokens.iter().position(|&t| t == EOS).unwrap_or(tokens.len());
    &tokens[..end]
}

/// Fraction of hypotheses exactly equal to their reference.
pub fn sequence_accuracy<W: PartialEq>(hyps: &[Vec<W>], refs: &[Vec<W>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::contract("accuracy of an empty corpus"));
    }
    let hits = hyps.iter().zip(refs).filter(|(h, r)| h == r).count();
    Ok(hits as f64 / hyps.len() as f64)
}

/// Half-open source-length intervals `[b_k, b_{k+1})`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBuckets {
    pub boundaries: Vec<usize>,
}

impl LengthBuckets {
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(Error::contract("length buckets need at least two boundaries"));
        }
        if boundaries[0] != 1 {
            return Err(Error::contract("the first bucket must start at length 1"));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract(format!(
                "bucket boundaries {boundaries:?} are not strictly ascending"
            )));
        }
        Ok(LengthBuckets { boundaries })
    }

    /// Equal-width buckets covering `[1, max_len]`.
    pub fn uniform(max_len: usize, width: usize) -> Result<Self> {
        let width = width.max(1);
        let mut b: Vec<usize> = (0..).map(|k| 1 + k * width).take_while(|&x| x <= max_len).collect();
        b.push(max_len + 1);
        b.dedup();
        Self::new(b)
    }

    /// A single bucket `[1, max_len]`.
    pub fn single(max_len: usize) -> Self {
        LengthBuckets {
            boundaries: vec![1, max_len + 1],
        }
    }

    pub fn len(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(lo, hi)` of bucket `k`, with `hi` exclusive.
    pub fn bounds(&self, k: usize) -> (usize, usize) {
        (self.boundaries[k], self.boundaries[k + 1])
    }

    pub fn bucket_of(&self, len: usize) -> Option<usize> {
        (0..self.len()).find(|&k| {
            let (lo, hi) = self.bounds(k);
            (lo..hi).contains(&len)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    SequenceAccuracy,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Bleu => "bleu",
            Metric::SequenceAccuracy => "sequence_accuracy",
        }
    }

    pub fn compute(self, hyps: &[Vec<usize>], refs: &[Vec<usize>], bleu_opts: &BleuOptions) -> Result<f64> {
        match self {
            Metric::Bleu => Ok(bleu(hyps, refs, bleu_opts)?.score),
            Metric::SequenceAccuracy => sequence_accuracy(hyps, refs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub lo: usize,
    /// Exclusive.
    pub hi: usize,
    pub count: usize,
    /// `None` for an empty bucket.
    pub value: Option<f64>,
}

/// Score each length bucket separately, by source length.
pub fn bucket_scores(
    src_lens: &[usize],
    hyps: &[Vec<usize>],
    refs: &[Vec<usize>],
    buckets: &LengthBuckets,
    metric: Metric,
    bleu_opts: &BleuOptions,
) -> Result<Vec<BucketRow>> {
    if src_lens.len() != hyps.len() || hyps.len() != refs.len() {
        return Err(Error::contract("sources, hypotheses and references differ in count"));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); buckets.len()];
    for (i, &l) in src_lens.iter().enumerate() {
        let k = buckets.bucket_of(l).ok_or_else(|| {
            Error::contract(format!(
                "source length {l} is outside the buckets {:?}",
                buckets.boundaries
            ))
        })?;
        members[k].push(i);
    }
    members
        .iter()
        .enumerate()
        .map(|(k, idx)| {
            let (lo, hi) = buckets.bounds(k);
            let value = if idx.is_empty() {
                None
            } else {
                let h: Vec<Vec<usize>> = idx.iter().map(|&i| hyps[i].clone()).collect();
                let r: Vec<Vec<usize>> = idx.iter().map(|&i| refs[i].clone()).collect();
                Some(metric.compute(&h, &r, bleu_opts)?)
            };
            Ok(BucketRow {
                lo,
                hi,
                count: idx.len(),
                value,
            })
        })
        .collect()
}

/// `bucket_lo,bucket_hi,count,metric_value`, with `bucket_hi` inclusive and
/// an empty value for empty buckets.
pub fn write_bucket_csv(rows: &[BucketRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "bucket_lo,bucket_hi,count,metric_value")?;
    for r in rows {
        let v = r.value.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.lo, r.hi - 1, r.count, v)?;
    }
    Ok(())
}
