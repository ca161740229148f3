use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::{Integration, ModelConfig, Strategy};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Parameters of the conventional encoder-decoder.
    Baseline,
    /// Per-decoder-layer normalization of soft integration.
    IntegrationNorm,
    /// FMA pair weights `W_ij` and biases `b_ij`.
    FullMatching,
    /// AMA queries `q_i` and keys `v_j`.
    AdaptiveMatching,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Baseline => "baseline",
            ParamGroup::IntegrationNorm => "integration_norm",
            ParamGroup::FullMatching => "full_matching",
            ParamGroup::AdaptiveMatching => "adaptive_matching",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Distribution a parameter is drawn from at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Uniform(f64),
    Normal(f64),
    Zeros,
    Ones,
}

/// How parameters added by a multi-view strategy start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultiViewInit {
    /// FMA and AMA parameters drawn at random (training from scratch,
    /// gradient checks, probes).
    Random,
    /// FMA `W = 0, b = 0`, AMA `q = 0, v = 0`: the warm-start state of
    /// continued learning.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub mod names {
    //! Parameter naming scheme. Layer indices are 1-based.

    pub fn view_ln_gain(i: usize) -> String {
        format!("mv.ln.{i}.gain")
    }

    pub fn view_ln_bias(i: usize) -> String {
        format!("mv.ln.{i}.bias")
    }

    pub fn fma_weight(i: usize, j: usize) -> String {
        format!("mv.fma.{i}.{j}.w")
    }

    pub fn fma_bias(i: usize, j: usize) -> String {
        format!("mv.fma.{i}.{j}.b")
    }

    pub fn ama_query(i: usize) -> String {
        format!("mv.ama.query.{i}")
    }

    pub fn ama_key(j: usize) -> String {
        format!("mv.ama.key.{j}")
    }
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, w: &str, b: Option<&str>, d_in: usize, d_out: usize) {
    let bound = 1.0 / (d_in as f64).sqrt();
    out.push(ParamSpec {
        name: format!("{prefix}.{w}"),
        shape: vec![d_in, d_out],
        group: ParamGroup::Baseline,
        init: Init::Uniform(bound),
    });
    if let Some(b) = b {
        out.push(ParamSpec {
            name: format!("{prefix}.{b}"),
            shape: vec![d_out],
            group: ParamGroup::Baseline,
            init: Init::Uniform(bound),
        });
    }
}

fn norm(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, group: ParamGroup) {
    out.push(ParamSpec {
        name: format!("{prefix}.gain"),
        shape: vec![d],
        group,
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![d],
        group,
        init: Init::Zeros,
    });
}

fn attention(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    // The key projection has no bias: it would shift every score of a
    // softmax row equally and so never receive a gradient.
    linear(out, prefix, "wq", Some("bq"), d, d);
    linear(out, prefix, "wk", None, d, d);
    linear(out, prefix, "wv", Some("bv"), d, d);
    linear(out, prefix, "wo", Some("bo"), d, d);
}

fn ffn(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, d_ff: usize) {
    linear(out, prefix, "w1", Some("b1"), d, d_ff);
    linear(out, prefix, "w2", Some("b2"), d_ff, d);
}

/// Every parameter the configured model owns, in a fixed order.
pub fn layout(config: &ModelConfig, mv_init: MultiViewInit) -> Vec<ParamSpec> {
    let d = config.d_model;
    let n = config.num_layers;
    let emb_std = (d as f64).powf(-0.5);
    let mut out = vec![
        ParamSpec {
            name: "src_embed".into(),
            shape: vec![config.src_vocab, d],
            group: ParamGroup::Baseline,
            init: Init::Normal(emb_std),
        },
        ParamSpec {
            name: "tgt_embed".into(),
            shape: vec![config.tgt_vocab, d],
            group: ParamGroup::Baseline,
            init: Init::Normal(emb_std),
        },
    ];
    for l in 1..=n {
        let p = format!("enc.{l}");
        attention(&mut out, &format!("{p}.self_attn"), d);
        norm(&mut out, &format!("{p}.ln1"), d, ParamGroup::Baseline);
        ffn(&mut out, &format!("{p}.ffn"), d, config.d_ff);
        norm(&mut out, &format!("{p}.ln2"), d, ParamGroup::Baseline);
    }
    for l in 1..=n {
        let p = format!("dec.{l}");
        attention(&mut out, &format!("{p}.self_attn"), d);
        norm(&mut out, &format!("{p}.ln1"), d, ParamGroup::Baseline);
        attention(&mut out, &format!("{p}.cross_attn"), d);
        norm(&mut out, &format!("{p}.ln2"), d, ParamGroup::Baseline);
        ffn(&mut out, &format!("{p}.ffn"), d, config.d_ff);
        norm(&mut out, &format!("{p}.ln3"), d, ParamGroup::Baseline);
    }
    linear(&mut out, "out", "w", Some("b"), d, config.tgt_vocab);

    let config = config.clone().normalized();
    if config.integration == Integration::Soft {
        for i in 1..=n {
            norm(&mut out, &format!("mv.ln.{i}"), d, ParamGroup::IntegrationNorm);
        }
    }
    let random = mv_init == MultiViewInit::Random;
    match config.strategy {
        Strategy::Fma => {
            let bound = 1.0 / (d as f64).sqrt();
            let init = if random { Init::Uniform(bound) } else { Init::Zeros };
            for i in 1..=n {
                for j in 1..=n {
                    out.push(ParamSpec {
                        name: names::fma_weight(i, j),
                        shape: vec![d, d],
                        group: ParamGroup::FullMatching,
                        init,
                    });
                    out.push(ParamSpec {
                        name: names::fma_bias(i, j),
                        shape: vec![d],
                        group: ParamGroup::FullMatching,
                        init,
                    });
                }
            }
        }
        Strategy::Ama => {
            let init = if random { Init::Normal(1.0) } else { Init::Zeros };
            for i in 1..=n {
                out.push(ParamSpec {
                    name: names::ama_query(i),
                    shape: vec![d],
                    group: ParamGroup::AdaptiveMatching,
                    init,
                });
            }
            for j in 1..=n {
                out.push(ParamSpec {
                    name: names::ama_key(j),
                    shape: vec![d],
                    group: ParamGroup::AdaptiveMatching,
                    init,
                });
            }
        }
        _ => {}
    }
    out
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<T: Scalar> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params {
            tensors: BTreeMap::new(),
        }
    }

    /// Draw every parameter of `layout` from the `Init` stream of `seed`.
    ///
    /// Baseline tensors come first in the layout, so a given seed yields
    /// the same baseline values whatever strategy is configured.
    pub fn initialize(layout: &[ParamSpec], seed: u64) -> Self {
        let mut base_rng = rng::seeded(seed, Stream::Init);
        let mut mv_rng = rng::seeded(seed, Stream::MultiViewInit);
        let mut tensors = BTreeMap::new();
        for spec in layout {
            let rng = if spec.group == ParamGroup::Baseline {
                &mut base_rng
            } else {
                &mut mv_rng
            };
            tensors.insert(spec.name.clone(), init_tensor(spec, rng));
        }
        Params { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), value)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Check names and shapes against a layout, in both directions.
    pub fn check_layout(&self, layout: &[ParamSpec]) -> Result<()> {
        for spec in layout {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Shape {
                    op: "parameter layout",
                    lhs: t.shape().to_vec(),
                    rhs: spec.shape.clone(),
                });
            }
        }
        if self.len() != layout.len() {
            let extra = self
                .names()
                .find(|n| !layout.iter().any(|s| s.name == *n))
                .unwrap_or_default()
                .to_string();
            return Err(Error::contract(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

fn init_tensor<T: Scalar>(spec: &ParamSpec, rng: &mut rng::Rng) -> Tensor<T> {
    match spec.init {
        Init::Uniform(b) => Tensor::uniform(&spec.shape, b, rng),
        Init::Normal(s) => Tensor::normal(&spec.shape, s, rng),
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::ones(&spec.shape),
    }
}

/// Exact scalar parameter counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub by_group: BTreeMap<ParamGroup, usize>,
}

impl ParamCount {
    pub fn baseline(&self) -> usize {
        self.by_group.get(&ParamGroup::Baseline).copied().unwrap_or(0)
    }

    /// Parameters added on top of the conventional model.
    pub fn added(&self) -> usize {
        self.total - self.baseline()
    }

    pub fn added_fraction(&self) -> f64 {
        self.added() as f64 / self.total as f64
    }
}

/// Count from the configuration alone, without allocating tensors.
pub fn count_layout(config: &ModelConfig) -> ParamCount {
    let mut by_group = BTreeMap::new();
    let mut total = 0;
    for spec in layout(config, MultiViewInit::Zero) {
        *by_group.entry(spec.group).or_insert(0) += spec.numel();
        total += spec.numel();
    }
    by_group.entry(ParamGroup::Baseline).or_insert(0);
    ParamCount { total, by_group }
}

/// Count the parameters actually held, after checking they match `config`.
pub fn count_parameters<T: Scalar>(config: &ModelConfig, params: &Params<T>) -> Result<ParamCount> {
    let layout = layout(config, MultiViewInit::Zero);
    params.check_layout(&layout)?;
    let mut by_group = BTreeMap::new();
    by_group.insert(ParamGroup::Baseline, 0);
    for spec in &layout {
        *by_group.entry(spec.group).or_insert(0) += params.get(&spec.name)?.len();
    }
    Ok(ParamCount {
        total: params.numel(),
        by_group,
    })
}

pub fn group_of(config: &ModelConfig, name: &str) -> Option<ParamGroup> {
    layout(config, MultiViewInit::Zero)
        .into_iter()
        .find(|s| s.name == name)
        .map(|s| s.group)
}
