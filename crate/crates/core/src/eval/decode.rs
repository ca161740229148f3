use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{DecodeHooks, Dropout, Memory, Seq2Seq};
use crate::par;
use crate::scalar::Scalar;
use crate::tasks::{with_eos, TokenMatrix};
use crate::tokens::{BOS, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Exponent `alpha` of the length penalty `((5 + len) / 6)^alpha`.
    pub length_penalty: f64,
    /// Most content tokens a hypothesis may hold before `EOS` is forced.
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 5,
            length_penalty: 0.6,
            max_len: 64,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::contract("beam_size must be at least 1"));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
        if !(self.length_penalty >= 0.0) {
            return Err(Error::contract("length_penalty must be non-negative"));
        }
        Ok(())
    }
}

/// A finished output sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Content tokens, without `BOS` and `EOS`.
    pub tokens: Vec<usize>,
    /// Log-probability of `tokens` followed by `EOS`.
    pub log_prob: f64,
    /// `log_prob / lp(len)`.
    pub score: f64,
}

/// `((5 + len) / 6)^alpha`, where `len` counts the closing `EOS`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        1.0
    } else {
        ((5.0 + len as f64) / 6.0).powf(alpha)
    }
}

/// Log-softmax over the vocabulary with `PAD` and `BOS` excluded, and with
/// everything but `EOS` excluded when `only_eos` is set.
fn step_log_probs<T: Scalar>(logits: &[T], only_eos: bool) -> Vec<f64> {
    let allowed = |v: usize| if only_eos { v == EOS } else { v != PAD && v != BOS };
    let max = logits
        .iter()
        .enumerate()
        .filter(|(v, _)| allowed(*v))
        .map(|(_, x)| x.to_f64_lossy())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .enumerate()
            .filter(|(v, _)| allowed(*v))
            .map(|(_, x)| (x.to_f64_lossy() - max).exp())
            .sum::<f64>()
            .ln();
    logits
        .iter()
        .enumerate()
        .map(|(v, x)| if allowed(v) { x.to_f64_lossy() - lse } else { f64::NEG_INFINITY })
        .collect()
}

/// Higher score first, then the lexicographically smaller sequence.
fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_tokens.cmp(b_tokens))
}

struct Encoded<T: Scalar> {
    graph: Graph<T>,
    memory: Memory,
    mark: usize,
}

fn encode_batch<T: Scalar>(model: &Seq2Seq<T>, srcs: &[&[usize]]) -> Result<Encoded<T>> {
    let rows: Vec<Vec<usize>> = srcs.iter().map(|s| with_eos(s)).collect();
    let src = TokenMatrix::from_rows(&rows);
    let mut graph = Graph::new();
    let p = model.bind(&mut graph, false);
    let mut drop = Dropout::off();
    let views = model.encode(&mut graph, &p, &src, &mut drop)?;
    let memory = model.prepare_memory(&mut graph, &p, &views, &DecodeHooks::default())?;
    let mark = graph.len();
    Ok(Encoded { graph, memory, mark })
}

/// Last-position logits `[rows, V]` for the given decoder inputs.
fn next_logits<T: Scalar>(
    model: &Seq2Seq<T>,
    enc: &mut Encoded<T>,
    prefixes: &[Vec<usize>],
    memory_rows: Option<&[usize]>,
) -> Result<Vec<Vec<T>>> {
    let g = &mut enc.graph;
    let result = (|| {
        let selected;
        let mem = match memory_rows {
            Some(rows) => {
                selected = enc.memory.select_rows(g, rows)?;
                &selected
            }
            None => &enc.memory,
        };
        let p = model.bind(g, false);
        let tgt = TokenMatrix::from_rows(prefixes);
        let mut drop = Dropout::off();
        let out = model.decode_with_memory(g, &p, &tgt, mem, &mut drop)?;
        let logits = g.value(out.logits);
        let v = model.config().tgt_vocab;
        let lt = tgt.cols;
        Ok((0..tgt.rows)
            .map(|r| logits.data()[(r * lt + lt - 1) * v..(r * lt + lt) * v].to_vec())
            .collect())
    })();
    g.truncate(enc.mark);
    result
}

fn check_src<T: Scalar>(model: &Seq2Seq<T>, src: &[usize]) -> Result<()> {
    if src.is_empty() {
        return Err(Error::contract("cannot decode an empty source"));
    }
    if src.len() + 1 > model.config().max_len {
        return Err(Error::contract(format!(
            "source of {} tokens plus eos exceeds max_len {}",
            src.len(),
            model.config().max_len
        )));
    }
    let vocab = model.config().src_vocab;
    if let Some(&t) = src.iter().find(|&&t| t >= vocab) {
        return Err(Error::contract(format!("source token {t} outside vocabulary of {vocab}")));
    }
    Ok(())
}

fn output_cap<T: Scalar>(model: &Seq2Seq<T>, cfg_max: usize) -> usize {
    // BOS plus the content tokens must fit the position table
    cfg_max.min(model.config().max_len - 1)
}

/// Beam search for one source sequence (content tokens, no `EOS`).
///
/// Candidates are ranked by cumulative log-probability. A candidate ending
/// in `EOS` that ranks within the top `beam_size` is finished; the best
/// non-`EOS` candidates continue. Search stops once `beam_size` hypotheses
/// have finished, when no live hypothesis remains, or at `max_len`, where
/// `EOS` is forced. Equal scores are broken toward the lexicographically
/// smaller token sequence.
pub fn beam_search<T: Scalar>(model: &Seq2Seq<T>, src: &[usize], cfg: &BeamConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    check_src(model, src)?;
    let k = cfg.beam_size;
    let cap = output_cap(model, cfg.max_len);
    let mut enc = encode_batch(model, &[src])?;

    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for t in 0..=cap {
        let prefixes: Vec<Vec<usize>> = live
            .iter()
            .map(|(toks, _)| std::iter::once(BOS).chain(toks.iter().copied()).collect())
            .collect();
        let rows = vec![0; live.len()];
        let logits = next_logits(model, &mut enc, &prefixes, Some(&rows))?;

        let mut cands: Vec<(Vec<usize>, f64)> = Vec::new();
        for ((toks, lp), row) in live.iter().zip(&logits) {
            for (v, x) in step_log_probs(row, t == cap).into_iter().enumerate() {
                if x.is_finite() {
                    let mut next = toks.clone();
                    next.push(v);
                    cands.push((next, lp + x));
                }
            }
        }
        cands.sort_by(|a, b| rank(a.1, &a.0, b.1, &b.0));

        let mut next_live = Vec::with_capacity(k);
        for (r, (mut toks, lp)) in cands.into_iter().enumerate() {
            if toks.last() == Some(&EOS) {
                if r < k {
                    toks.pop();
                    let score = lp / length_penalty(toks.len() + 1, cfg.length_penalty);
                    finished.push(Hypothesis {
                        tokens: toks,
                        log_prob: lp,
                        score,
                    });
                }
            } else if next_live.len() < k {
                next_live.push((toks, lp));
            }
            if r + 1 >= k && next_live.len() == k {
                break;
            }
        }
        live = next_live;
        if finished.len() >= k || live.is_empty() {
            break;
        }
    }
    finished
        .into_iter()
        .min_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens))
        .ok_or_else(|| Error::Consistency("beam search finished without a hypothesis".into()))
}

/// Beam search over many sources, in parallel across sentences.
pub fn beam_search_many<T: Scalar>(
    model: &Seq2Seq<T>,
    srcs: &[Vec<usize>],
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    par::map_jobs(srcs, |s| beam_search(model, s, cfg))
        .into_iter()
        .collect()
}

/// Greedy decoding of many sources.
///
/// Sources of equal length are decoded together as one unpadded batch, so
/// every row sees exactly the arithmetic of a single-sentence run and the
/// output equals [`beam_search`] with `beam_size = 1`.
pub fn greedy_decode<T: Scalar>(model: &Seq2Seq<T>, srcs: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
    for s in srcs {
        check_src(model, s)?;
    }
    let cap = output_cap(model, max_len);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in srcs.iter().enumerate() {
        groups.entry(s.len()).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let decoded = par::map_jobs(&groups, |idx| -> Result<Vec<Vec<usize>>> {
        let batch: Vec<&[usize]> = idx.iter().map(|&i| srcs[i].as_slice()).collect();
        let mut enc = encode_batch(model, &batch)?;
        let n = batch.len();
        let mut toks = vec![Vec::new(); n];
        let mut lp = vec![0.0f64; n];
        let mut done = vec![false; n];
        for t in 0..=cap {
            let prefixes: Vec<Vec<usize>> = toks
                .iter()
                .map(|tk: &Vec<usize>| std::iter::once(BOS).chain(tk.iter().copied()).collect())
                .collect();
            let logits = next_logits(model, &mut enc, &prefixes, None)?;
            for r in 0..n {
                if done[r] {
                    // keep the row aligned with a filler token; it is dropped later
                    toks[r].push(PAD);
                    continue;
                }
                let mut best: Option<(usize, f64)> = None;
                for (v, x) in step_log_probs(&logits[r], t == cap).into_iter().enumerate() {
                    let s = lp[r] + x;
                    if s.is_finite() && best.is_none_or(|(_, b)| s > b) {
                        best = Some((v, s));
                    }
                }
                let (v, s) = best.ok_or_else(|| Error::NonFinite("decoder log-probabilities".into()))?;
                lp[r] = s;
                toks[r].push(v);
                done[r] = v == EOS;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(toks
            .into_iter()
            .map(|tk| tk.into_iter().take_while(|&v| v != EOS).collect())
            .collect())
    });
    let mut out = vec![Vec::new(); srcs.len()];
    for (idx, res) in groups.iter().zip(decoded) {
        for (&i, hyp) in idx.iter().zip(res?) {
            out[i] = hyp;
        }
    }
    Ok(out)
}
