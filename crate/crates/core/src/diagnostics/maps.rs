use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{DecodeHooks, Dropout, Seq2Seq};
use crate::tasks::{with_eos, Pair, TokenMatrix};
use crate::tensor::Tensor;
use crate::tokens::{BOS, PAD};

use super::probe::encoder_view_values;

/// Pairwise cosine similarity between the source positions of one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineMap {
    /// 1-based encoder layer.
    pub layer: usize,
    pub tokens: Vec<usize>,
    pub matrix: Vec<Vec<f64>>,
    /// Mean off-diagonal similarity; `None` for a single position.
    pub diffusion: Option<f64>,
}

/// Cosine similarity of every pair of rows. A pair involving an all-zero
/// row scores 0, except on the diagonal, which is always 1.
pub fn cosine_matrix(rows: &[&[f64]]) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    (0..rows.len())
        .map(|a| {
            (0..rows.len())
                .map(|b| {
                    if a == b {
                        1.0
                    } else if norms[a] == 0.0 || norms[b] == 0.0 {
                        0.0
                    } else {
                        let dot: f64 = rows[a].iter().zip(rows[b]).map(|(x, y)| x * y).sum();
                        dot / (norms[a] * norms[b])
                    }
                })
                .collect()
        })
        .collect()
}

pub fn diffusion(matrix: &[Vec<f64>]) -> Option<f64> {
    let l = matrix.len();
    if l < 2 {
        return None;
    }
    let off: f64 = (0..l).flat_map(|a| (0..l).filter(move |&b| b != a).map(move |b| (a, b))).map(|(a, b)| matrix[a][b]).sum();
    Some(off / (l * (l - 1)) as f64)
}

/// Cosine map of view `S_layer` (values `[B, L, d]`, one per encoder layer)
/// at batch row `row`, over the non-pad positions of `src`.
pub fn cosine_map(views: &[Tensor<f64>], src: &TokenMatrix, layer: usize, row: usize) -> Result<CosineMap> {
    if layer == 0 || layer > views.len() {
        return Err(Error::Index {
            op: "cosine map layer",
            index: layer,
            bound: views.len() + 1,
        });
    }
    if row >= src.rows {
        return Err(Error::Index {
            op: "cosine map row",
            index: row,
            bound: src.rows,
        });
    }
    let view = &views[layer - 1];
    if view.rank() != 3 || view.shape()[0] != src.rows || view.shape()[1] != src.cols {
        return Err(Error::shape("cosine map", view.shape(), &[src.rows, src.cols]));
    }
    let d = view.shape()[2];
    let positions: Vec<usize> = (0..src.cols).filter(|&c| src.row(row)[c] != PAD).collect();
    let rows: Vec<&[f64]> = positions
        .iter()
        .map(|&c| &view.data()[(row * src.cols + c) * d..(row * src.cols + c + 1) * d])
        .collect();
    let matrix = cosine_matrix(&rows);
    if matrix.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("cosine map of layer {layer}")));
    }
    Ok(CosineMap {
        layer,
        tokens: positions.iter().map(|&c| src.row(row)[c]).collect(),
        diffusion: diffusion(&matrix),
        matrix,
    })
}

/// Cosine maps of every encoder view for one source sentence (content
/// tokens; `EOS` is appended here).
pub fn cosine_maps(model: &Seq2Seq<f64>, src: &[usize]) -> Result<Vec<CosineMap>> {
    let src = TokenMatrix::from_rows(&[with_eos(src)]);
    let views = encoder_view_values(model, &src)?;
    (1..=views.len()).map(|j| cosine_map(&views, &src, j, 0)).collect()
}

/// Cross-attention weights of one decoder layer under teacher forcing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    /// 1-based decoder layer.
    pub layer: usize,
    /// Decoder input tokens, one per query row (`BOS` first).
    pub query_tokens: Vec<usize>,
    /// Source tokens including `EOS`, one per key column.
    pub key_tokens: Vec<usize>,
    /// `heads[h][t][s]`.
    pub heads: Vec<Vec<Vec<f64>>>,
    pub mean: Vec<Vec<f64>>,
}

pub fn attention_maps(model: &Seq2Seq<f64>, pair: &Pair) -> Result<Vec<AttentionMap>> {
    let src = with_eos(&pair.src);
    let tgt_in: Vec<usize> = std::iter::once(BOS).chain(pair.tgt.iter().copied()).collect();
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let mut drop = Dropout::off();
    let enc = model.encode(&mut g, &p, &TokenMatrix::from_rows(std::slice::from_ref(&src)), &mut drop)?;
    let (_, out) = model.decode(
        &mut g,
        &p,
        &TokenMatrix::from_rows(std::slice::from_ref(&tgt_in)),
        &enc,
        &mut drop,
        &DecodeHooks::default(),
    )?;
    let (lt, ls) = (tgt_in.len(), src.len());
    out.cross_attn
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let w = g.value(v).data();
            let heads: Vec<Vec<Vec<f64>>> = w
                .chunks(lt * ls)
                .map(|h| h.chunks(ls).map(<[f64]>::to_vec).collect())
                .collect();
            let nh = heads.len() as f64;
            let mean = (0..lt)
                .map(|t| (0..ls).map(|s| heads.iter().map(|h| h[t][s]).sum::<f64>() / nh).collect())
                .collect();
            Ok(AttentionMap {
                layer: i + 1,
                query_tokens: tgt_in.clone(),
                key_tokens: src.clone(),
                heads,
                mean,
            })
        })
        .collect()
}

/// A labelled matrix as CSV. The header row holds the column labels after a
/// leading `row` cell; each line starts with its row label. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn matrix_csv(row_labels: &[usize], col_labels: &[usize], m: &[Vec<f64>]) -> String {
    let mut out = String::from("row");
    for c in col_labels {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for (r, row) in row_labels.iter().zip(m) {
        let _ = write!(out, "{r}");
        for x in row {
            let _ = write!(out, ",{x:?}");
        }
        out.push('\n');
    }
    out
}

/// Row labels, column labels and values of a matrix CSV.
pub type LabeledMatrix = (Vec<usize>, Vec<usize>, Vec<Vec<f64>>);

/// Inverse of [`matrix_csv`]: `(row labels, column labels, values)`.
pub fn parse_matrix_csv(text: &str) -> Result<LabeledMatrix> {
    let bad = |line: usize, msg: &str| Error::Parse(format!("matrix csv line {line}: {msg}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    let mut head = header.split(',');
    if head.next() != Some("row") {
        return Err(bad(1, "expected a `row` header cell"));
    }
    let cols = head
        .map(|c| c.parse().map_err(|_| bad(1, "bad column label")))
        .collect::<Result<Vec<usize>>>()?;
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for (n, line) in lines.enumerate() {
        let mut cells = line.split(',');
        let label = cells.next().and_then(|c| c.parse().ok()).ok_or_else(|| bad(n + 2, "bad row label"))?;
        let vals = cells
            .map(|c| c.parse::<f64>().map_err(|_| bad(n + 2, "bad value")))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != cols.len() {
            return Err(bad(n + 2, "wrong number of cells"));
        }
        rows.push(label);
        values.push(vals);
    }
    Ok((rows, cols, values))
}
