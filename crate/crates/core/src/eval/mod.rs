//! Decoding and metrics.
//!
//! Beam search with a length penalty, batched greedy decoding, corpus BLEU,
//! exact-match accuracy and evaluation split by source length.

mod decode;
mod metrics;


use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Seq2Seq;
use crate::scalar::Scalar;
use crate::tasks::Pair;

pub use decode::{beam_search, beam_search_many, greedy_decode, length_penalty, BeamConfig, Hypothesis};
pub use metrics::{
    bleu, bucket_scores, sequence_accuracy, strip_eos, write_bucket_csv, BleuOptions, BleuScore, BucketRow,
    LengthBuckets, Metric,
};

/// Decode every source; a beam of one takes the batched greedy path.
pub fn translate<T: Scalar>(model: &Seq2Seq<T>, srcs: &[Vec<usize>], cfg: &BeamConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    if cfg.beam_size == 1 {
        greedy_decode(model, srcs, cfg.max_len)
    } else {
        Ok(beam_search_many(model, srcs, cfg)?
            .into_iter()
            .map(|h| h.tokens)
            .collect())
    }
}

/// Corpus-level results of decoding a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub count: usize,
    pub bleu: f64,
    pub sequence_accuracy: f64,
    pub hypotheses: Vec<Vec<usize>>,
}

pub fn evaluate_corpus<T: Scalar>(
    model: &Seq2Seq<T>,
    pairs: &[Pair],
    cfg: &BeamConfig,
    bleu_opts: &BleuOptions,
) -> Result<CorpusReport> {
    let srcs: Vec<Vec<usize>> = pairs.iter().map(|p| p.src.clone()).collect();
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.tgt.clone()).collect();
    let hyps = translate(model, &srcs, cfg)?;
    Ok(CorpusReport {
        count: pairs.len(),
        bleu: bleu(&hyps, &refs, bleu_opts)?.score,
        sequence_accuracy: sequence_accuracy(&hyps, &refs)?,
        hypotheses: hyps,
    })
}

/// Decode `pairs` and score each source-length bucket on its own.
pub fn length_bucketed_eval<T: Scalar>(
    model: &Seq2Seq<T>,
    pairs: &[Pair],
    buckets: &LengthBuckets,
    metric: Metric,
    cfg: &BeamConfig,
    bleu_opts: &BleuOptions,
) -> Result<Vec<BucketRow>> {
    let srcs: Vec<Vec<usize>> = pairs.iter().map(|p| p.src.clone()).collect();
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.tgt.clone()).collect();
    let hyps = translate(model, &srcs, cfg)?;
    let lens: Vec<usize> = srcs.iter().map(Vec::len).collect();
    bucket_scores(&lens, &hyps, &refs, buckets, metric, bleu_opts)
}
