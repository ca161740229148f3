use rand::seq::SliceRandom;

use super::Pair;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tokens::{BOS, EOS, PAD};

/// Row-major `[rows, cols]` matrix of token ids, right-padded with `PAD`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMatrix {
    pub ids: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
}

impl TokenMatrix {
    pub fn new(ids: Vec<usize>, rows: usize, cols: usize) -> Result<Self> {
        if ids.len() != rows * cols {
            return Err(Error::Shape {
                op: "TokenMatrix::new",
                lhs: vec![rows, cols],
                rhs: vec![ids.len()],
            });
        }
        Ok(TokenMatrix { ids, rows, cols })
    }

    /// Stack rows of possibly different length, padding to the longest.
    pub fn from_rows<R: AsRef<[usize]>>(rows: &[R]) -> Self {
        let cols = rows.iter().map(|r| r.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(PAD, cols - r.len()));
        }
        TokenMatrix {
            ids,
            rows: rows.len(),
            cols,
        }
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    /// Non-pad mask, `[rows, cols]`.
    pub fn valid(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t != PAD).collect()
    }

    pub fn non_pad(&self) -> usize {
        self.ids.iter().filter(|&&t| t != PAD).count()
    }
}

/// Model-ready batch.
///
/// `src` rows are the source followed by `EOS`; `tgt_in` is `BOS` followed
/// by the target and `tgt_out` is the target followed by `EOS`, so
/// `tgt_in[t + 1] == tgt_out[t]` wherever both are non-pad.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src: TokenMatrix,
    pub tgt_in: TokenMatrix,
    pub tgt_out: TokenMatrix,
}

impl Batch {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a Pair>) -> Self {
        let mut src = Vec::new();
        let mut tgt_in = Vec::new();
        let mut tgt_out = Vec::new();
        for p in pairs {
            src.push(with_eos(&p.src));
            let mut ti = Vec::with_capacity(p.tgt.len() + 1);
            ti.push(BOS);
            ti.extend_from_slice(&p.tgt);
            tgt_in.push(ti);
            tgt_out.push(with_eos(&p.tgt));
        }
        Batch {
            src: TokenMatrix::from_rows(&src),
            tgt_in: TokenMatrix::from_rows(&tgt_in),
            tgt_out: TokenMatrix::from_rows(&tgt_out),
        }
    }

    pub fn len(&self) -> usize {
        self.src.rows
    }

    pub fn is_empty(&self) -> bool {
        self.src.rows == 0
    }

    /// Tokens the loss is computed over.
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.non_pad()
    }
}

/// Source row as fed to the encoder.
pub fn with_eos(tokens: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(tokens.len() + 1);
    v.extend_from_slice(tokens);
    v.push(EOS);
    v
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchOptions {
    pub batch_size: usize,
    /// Cap on `rows * padded length` of source plus target, if set.
    pub max_tokens: Option<usize>,
    /// Longest sequence (including its `EOS`/`BOS`) the model accepts.
    pub max_len: usize,
    pub seed: u64,
}

/// Split `pairs` into length-bucketed batches covering every pair once.
///
/// Pairs are shuffled, stably sorted by length so that similar lengths
/// share a batch, cut into batches, and the batch order is shuffled again.
pub fn batchify(pairs: &[Pair], opts: &BatchOptions) -> Result<Vec<Batch>> {
    if pairs.is_empty() {
        return Err(Error::contract("cannot batch an empty dataset"));
    }
    if opts.batch_size == 0 {
        return Err(Error::contract("batch_size must be positive"));
    }
    for (i, p) in pairs.iter().enumerate() {
        let longest = p.src.len().max(p.tgt.len()) + 1;
        if longest > opts.max_len {
            return Err(Error::contract(format!(
                "pair {i} needs length {longest}, above max_len {}",
                opts.max_len
            )));
        }
        if p.src.is_empty() {
            return Err(Error::contract(format!("pair {i} has an empty source")));
        }
    }
    let mut rng = rng::seeded(opts.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (pairs[i].src.len(), pairs[i].tgt.len()));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let (mut ws, mut wt) = (0, 0);
    for i in order {
        let (s, t) = (pairs[i].src.len() + 1, pairs[i].tgt.len() + 1);
        let width = ws.max(s) + wt.max(t);
        let fits_tokens = opts.max_tokens.is_none_or(|m| (current.len() + 1) * width <= m);
        if !current.is_empty() && (current.len() == opts.batch_size || !fits_tokens) {
            groups.push(std::mem::take(&mut current));
            (ws, wt) = (0, 0);
        }
        ws = ws.max(s);
        wt = wt.max(t);
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut rng);
    Ok(groups
        .iter()
        .map(|g| Batch::from_pairs(g.iter().map(|&i| &pairs[i])))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate, TaskKind, TaskSpec};

    fn data() -> Vec<Pair> {
        generate(&TaskSpec {
            kind: TaskKind::Sort,
            vocab_size: 12,
            min_len: 1,
            max_len: 9,
            seed: 11,
            samples: 137,
        })
        .unwrap()
    }

    fn opts(batch_size: usize) -> BatchOptions {
        BatchOptions {
            batch_size,
            max_tokens: None,
            max_len: 10,
            seed: 2,
        }
    }

    #[test]
    fn shift_invariant_and_conservation() {
        let pairs = data();
        let batches = batchify(&pairs, &opts(16)).unwrap();
        let rows: usize = batches.iter().map(Batch::len).sum();
        assert_eq!(rows, pairs.len());
        let tokens: usize = batches.iter().map(Batch::target_tokens).sum();
        let expected: usize = pairs.iter().map(|p| p.tgt.len() + 1).sum();
        assert_eq!(tokens, expected);
        for b in &batches {
            for r in 0..b.len() {
                let (ti, to) = (b.tgt_in.row(r), b.tgt_out.row(r));
                assert_eq!(ti[0], BOS);
                for t in 0..to.len() - 1 {
                    if ti[t + 1] != PAD && to[t] != PAD {
                        assert_eq!(ti[t + 1], to[t]);
                    }
                }
            }
        }
    }

    #[test]
    fn every_pair_once() {
        let pairs = data();
        let batches = batchify(&pairs, &opts(7)).unwrap();
        let mut seen: Vec<Vec<usize>> = batches
            .iter()
            .flat_map(|b| (0..b.len()).map(|r| b.src.row(r).iter().copied().filter(|&t| t != PAD).collect::<Vec<_>>()))
            .collect();
        let mut want: Vec<Vec<usize>> = pairs.iter().map(|p| with_eos(&p.src)).collect();
        seen.sort();
        want.sort();
        assert_eq!(seen, want);
    }

    #[test]
    fn single_row_batches_have_no_padding() {
        let pairs = data();
        for b in batchify(&pairs, &opts(1)).unwrap() {
            assert_eq!(b.src.non_pad(), b.src.cols);
            assert_eq!(b.tgt_out.non_pad(), b.tgt_out.cols);
        }
    }

    #[test]
    fn token_budget_and_overlength() {
        let pairs = data();
        let o = BatchOptions {
            max_tokens: Some(60),
            ..opts(64)
        };
        for b in batchify(&pairs, &o).unwrap() {
            assert!(b.len() == 1 || b.len() * (b.src.cols + b.tgt_in.cols) <= 60);
        }
        let o = BatchOptions { max_len: 5, ..opts(4) };
        assert!(batchify(&pairs, &o).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let pairs = data();
        assert_eq!(batchify(&pairs, &opts(8)).unwrap(), batchify(&pairs, &opts(8)).unwrap());
    }
}
