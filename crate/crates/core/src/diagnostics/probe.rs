use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{names, DecodeHooks, Dropout, Integration, ModelConfig, Seq2Seq, Strategy};
use crate::rng::{self, Stream};
use crate::tasks::{Batch, TokenMatrix};
use crate::tensor::Tensor;
use crate::tokens::{EOS, FIRST_CONTENT};

/// Relative sizes of the perturbation, in units of the view's RMS.
pub const PROBE_SCALES: [f64; 2] = [1e-2, 1e-5];

/// Gradient norms at or below this are treated as structurally zero.
pub const ZERO_GRAD: f64 = 1e-12;

/// `cells[i - 1][j - 1]` is true when decoder layer `i`'s cross-attention
/// input depends on encoder view `S_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumptionMatrix {
    pub strategy: Strategy,
    pub integration: Integration,
    pub cells: Vec<Vec<bool>>,
    /// Largest change of the integrated view per unit perturbation, at the
    /// larger probe scale. Zero exactly where the cell is false.
    pub sensitivity: Vec<Vec<f64>>,
}

impl ConsumptionMatrix {
    pub fn num_layers(&self) -> usize {
        self.cells.len()
    }

    /// Decoder layers consuming the global view `S_N`.
    pub fn global_view_consumers(&self) -> usize {
        self.cells.iter().filter(|row| *row.last().unwrap_or(&false)).count()
    }
}

/// Which views each decoder layer should depend on, worked out from the
/// routing formulas and the raw parameter values.
pub fn analytic_consumption(model: &Seq2Seq<f64>) -> Result<Vec<Vec<bool>>> {
    let cfg = model.config();
    let (n, d) = (cfg.num_layers, cfg.d_model);
    let p = model.params();
    let mut out = vec![vec![false; n]; n];
    for (i, row) in (1..=n).zip(out.iter_mut()) {
        match cfg.strategy {
            Strategy::Conventional => row[n - 1] = true,
            Strategy::Gca => row[n - i] = true,
            Strategy::Gpa => row[i - 1] = true,
            Strategy::Fga => row[0] = true,
            Strategy::Fma => {
                for j in 1..=n {
                    row[j - 1] = p.get(&names::fma_weight(i, j))?.data().iter().any(|&w| w != 0.0);
                }
            }
            Strategy::Ama => {
                let q = p.get(&names::ama_query(i))?.data();
                let scores: Vec<f64> = (1..=n)
                    .map(|j| {
                        let k = p.get(&names::ama_key(j))?.data();
                        Ok(q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                    })
                    .collect::<Result<_>>()?;
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for (c, s) in row.iter_mut().zip(&scores) {
                    *c = (s - m).exp() > 0.0;
                }
            }
        }
        if cfg.integration == Integration::Soft {
            row[n - 1] = true;
        }
    }
    Ok(out)
}

/// A random source batch drawn from the probe stream.
pub fn probe_source(config: &ModelConfig, rows: usize, len: usize, seed: u64) -> Result<TokenMatrix> {
    if config.src_vocab <= FIRST_CONTENT {
        return Err(Error::contract("source vocabulary has no content tokens"));
    }
    let len = len.min(config.max_len.saturating_sub(1)).max(1);
    let mut rng = rng::seeded(seed, Stream::Probe);
    let data: Vec<Vec<usize>> = (0..rows)
        .map(|_| {
            let mut r: Vec<usize> = (0..len).map(|_| rng.random_range(FIRST_CONTENT..config.src_vocab)).collect();
            r.push(EOS);
            r
        })
        .collect();
    Ok(TokenMatrix::from_rows(&data))
}

/// Values of `S_1..S_N` for a source batch, each `[B, L, d]`.
pub fn encoder_view_values(model: &Seq2Seq<f64>, src: &TokenMatrix) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let views = model.encode(&mut g, &p, src, &mut Dropout::off())?;
    Ok(views.views.iter().map(|&v| g.value(v).clone()).collect())
}

/// Integrated cross-attention input of every decoder layer for given views.
fn integrated(model: &Seq2Seq<f64>, views: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let vars: Vec<_> = views.iter().map(|t| g.constant(t.clone())).collect();
    let last = *vars.last().ok_or_else(|| Error::contract("no encoder views"))?;
    (1..=model.config().num_layers)
        .map(|i| {
            let routed = model.route_view(&mut g, &p, i, &vars)?;
            let v = model.integrate_view(&mut g, &p, i, routed, last)?;
            Ok(g.value(v).clone())
        })
        .collect()
}

/// Measure which encoder views reach each decoder layer by perturbing
/// every `S_j` in turn at each of [`PROBE_SCALES`].
pub fn measure_consumption(model: &Seq2Seq<f64>, src: &TokenMatrix, seed: u64) -> Result<ConsumptionMatrix> {
    let n = model.config().num_layers;
    let views = encoder_view_values(model, src)?;
    let base = integrated(model, &views)?;
    let mut rng = rng::seeded(seed, Stream::Probe);
    let mut cells = vec![vec![false; n]; n];
    let mut sensitivity = vec![vec![0.0; n]; n];
    for j in 0..n {
        let rms = (views[j].data().iter().map(|x| x * x).sum::<f64>() / views[j].len() as f64).sqrt();
        let rms = if rms > 0.0 { rms } else { 1.0 };
        let dir = Tensor::<f64>::normal(views[j].shape(), 1.0, &mut rng);
        for (k, scale) in PROBE_SCALES.iter().enumerate() {
            let eps = scale * rms;
            let mut perturbed = views.clone();
            for (x, dx) in perturbed[j].data_mut().iter_mut().zip(dir.data()) {
                *x += eps * dx;
            }
            let out = integrated(model, &perturbed)?;
            for i in 0..n {
                let change = base[i]
                    .data()
                    .iter()
                    .zip(out[i].data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if base[i].data().iter().zip(out[i].data()).any(|(a, b)| a != b) {
                    cells[i][j] = true;
                }
                if k == 0 {
                    sensitivity[i][j] = change / eps;
                }
            }
        }
    }
    Ok(ConsumptionMatrix {
        strategy: model.config().strategy,
        integration: model.config().integration,
        cells,
        sensitivity,
    })
}

/// [`measure_consumption`], failing with a consistency error unless the
/// measurement equals [`analytic_consumption`] exactly.
pub fn consumption_probe_model(model: &Seq2Seq<f64>, src: &TokenMatrix, seed: u64) -> Result<ConsumptionMatrix> {
    let measured = measure_consumption(model, src, seed)?;
    let analytic = analytic_consumption(model)?;
    if analytic != measured.cells {
        return Err(Error::Consistency(format!(
            "consumption pattern of {}/{} differs from the routing formula: measured {:?}, expected {analytic:?}",
            model.config().strategy,
            model.config().integration,
            measured.cells
        )));
    }
    Ok(measured)
}

/// [`consumption_probe_model`] on a fresh model with randomly drawn
/// routing parameters and a random probe batch.
pub fn consumption_probe(config: &ModelConfig, seed: u64) -> Result<ConsumptionMatrix> {
    let config = ModelConfig {
        precision: crate::Precision::F64,
        dropout: 0.0,
        ..config.clone()
    };
    let model = Seq2Seq::<f64>::init(config.clone(), seed)?;
    let src = probe_source(&config, 2, 5, seed)?;
    consumption_probe_model(&model, &src, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradPaths {
    /// Norm of the loss gradient reaching `S_N` through decoder layer `i`
    /// (index `i - 1`).
    pub norms: Vec<f64>,
    pub sum: f64,
    /// Entries above [`ZERO_GRAD`].
    pub nonzero: usize,
    /// `|sum_i g_i - g| / |g|`, with `g` the gradient with respect to `S_N`
    /// in a pass without aliasing.
    pub alias_sum_rel_err: f64,
}

fn s_n_gradient(
    model: &Seq2Seq<f64>,
    batch: &Batch,
    alias: bool,
) -> Result<(Vec<Tensor<f64>>, Tensor<f64>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let hooks = DecodeHooks {
        alias_global_view: alias,
        route_override: None,
    };
    let fp = model.loss(&mut g, &p, batch, &mut Dropout::off(), &hooks, 0.0)?;
    g.backward(fp.loss)?;
    let per_layer = fp.memory.global_aliases.iter().map(|&v| g.grad_or_zeros(v)).collect();
    let whole = g.grad_or_zeros(fp.views.last());
    Ok((per_layer, whole))
}

/// Split the gradient reaching `S_N` by the decoder layer it flows through.
pub fn grad_path_norms(model: &Seq2Seq<f64>, batch: &Batch) -> Result<GradPaths> {
    let (per_layer, _) = s_n_gradient(model, batch, true)?;
    let (_, whole) = s_n_gradient(model, batch, false)?;
    let norm = |t: &[f64]| t.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norms: Vec<f64> = per_layer.iter().map(|t| norm(t.data())).collect();
    if norms.iter().any(|x| !x.is_finite()) || !whole.all_finite() {
        return Err(Error::NonFinite("gradient with respect to the global view".into()));
    }
    let mut summed = vec![0.0; whole.len()];
    for t in &per_layer {
        for (a, x) in summed.iter_mut().zip(t.data()) {
            *a += x;
        }
    }
    let diff: Vec<f64> = summed.iter().zip(whole.data()).map(|(a, b)| a - b).collect();
    let whole_norm = norm(whole.data());
    let alias_sum_rel_err = if whole_norm > 0.0 {
        norm(&diff) / whole_norm
    } else {
        norm(&diff)
    };
    Ok(GradPaths {
        sum: norms.iter().sum(),
        nonzero: norms.iter().filter(|&&x| x > ZERO_GRAD).count(),
        norms,
        alias_sum_rel_err,
    })
}
