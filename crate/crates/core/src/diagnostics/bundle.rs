use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::Seq2Seq;
use crate::scalar::Scalar;
use crate::tasks::{with_eos, Batch, Pair, TokenMatrix};

use super::maps::{attention_maps, cosine_map, matrix_csv};
use super::probe::{analytic_consumption, encoder_view_values, grad_path_norms, measure_consumption, probe_source};
use super::svg::render_heatmap;
use super::to_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    Consumption,
    GradPaths,
    Cosine,
    Attention,
}

impl Probe {
    pub const ALL: [Probe; 4] = [Probe::Consumption, Probe::GradPaths, Probe::Cosine, Probe::Attention];

    pub fn name(self) -> &'static str {
        match self {
            Probe::Consumption => "consumption",
            Probe::GradPaths => "grad_paths",
            Probe::Cosine => "cosine",
            Probe::Attention => "attention",
        }
    }
}

impl FromStr for Probe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Probe::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown probe `{s}` (expected one of consumption, grad_paths, cosine, attention)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleOptions {
    pub probes: Vec<Probe>,
    /// Index of the example used for cosine and attention maps.
    pub example: usize,
    /// Examples used for the consumption and gradient-path probes.
    pub probe_batch: usize,
    pub seed: u64,
}

impl Default for BundleOptions {
    fn default() -> Self {
        BundleOptions {
            probes: Probe::ALL.to_vec(),
            example: 0,
            probe_batch: 8,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiffusion {
    pub layer: usize,
    pub diffusion: Option<f64>,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSummary {
    pub provenance: serde_json::Value,
    pub probes: Vec<Probe>,
    pub files: Vec<String>,
    pub diffusion: Vec<LayerDiffusion>,
    pub consistent: bool,
    pub failures: Vec<String>,
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Writer<'_> {
    fn put(&mut self, name: String, contents: &str) -> Result<()> {
        fs::write(self.dir.join(&name), contents)?;
        self.files.push(name);
        Ok(())
    }

    fn json(&mut self, name: &str, value: &serde_json::Value) -> Result<()> {
        self.put(name.to_string(), &(serde_json::to_string_pretty(value)? + "\n"))
    }
}

fn labels(ids: &[usize]) -> Vec<String> {
    ids.iter().map(usize::to_string).collect()
}

/// Run the selected probes on `model` and write the bundle into `dir`.
///
/// Every file is written before consistency is judged. When the measured
/// consumption pattern differs from the analytic one, or the number of
/// nonzero gradient paths differs from the number of layers consuming
/// `S_N`, the summary records the failure and a consistency error is
/// returned.
pub fn write_bundle<T: Scalar>(
    dir: impl AsRef<Path>,
    model: &Seq2Seq<T>,
    pairs: &[Pair],
    opts: &BundleOptions,
    provenance: serde_json::Value,
) -> Result<BundleSummary> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let model = to_f64(model)?;
    let cfg = model.config().clone();
    let needs_example = opts.probes.iter().any(|p| matches!(p, Probe::Cosine | Probe::Attention | Probe::GradPaths));
    if needs_example && pairs.is_empty() {
        return Err(Error::contract("diagnostics need at least one example"));
    }
    if needs_example && opts.example >= pairs.len() {
        return Err(Error::contract(format!(
            "example {} out of range for {} pairs",
            opts.example,
            pairs.len()
        )));
    }
    let probe_pairs = &pairs[..pairs.len().min(opts.probe_batch.max(1))];

    let mut w = Writer { dir, files: Vec::new() };
    let mut failures = Vec::new();
    let mut diffusion = Vec::new();
    let mut global_consumers = None;
    let mut nonzero_paths = None;

    for &probe in &opts.probes {
        match probe {
            Probe::Consumption => {
                let src = if probe_pairs.is_empty() {
                    probe_source(&cfg, 2, 5, opts.seed)?
                } else {
                    let rows: Vec<Vec<usize>> = probe_pairs.iter().map(|p| with_eos(&p.src)).collect();
                    TokenMatrix::from_rows(&rows)
                };
                let measured = measure_consumption(&model, &src, opts.seed)?;
                let analytic = analytic_consumption(&model)?;
                let agree = analytic == measured.cells;
                if !agree {
                    failures.push(format!(
                        "consumption: measured {:?} but the routing formula gives {analytic:?}",
                        measured.cells
                    ));
                }
                global_consumers = Some(measured.global_view_consumers());
                w.json(
                    "consumption.json",
                    &json!({
                        "provenance": provenance,
                        "strategy": cfg.strategy,
                        "integration": cfg.integration,
                        "num_layers": cfg.num_layers,
                        "cells": measured.cells,
                        "analytic": analytic,
                        "sensitivity": measured.sensitivity,
                        "agree": agree,
                    }),
                )?;
                let grid: Vec<Vec<f64>> = measured
                    .cells
                    .iter()
                    .map(|r| r.iter().map(|&c| f64::from(u8::from(c))).collect())
                    .collect();
                let idx: Vec<usize> = (1..=cfg.num_layers).collect();
                w.put(
                    "consumption.svg".into(),
                    &render_heatmap("consumption (decoder layer x encoder view)", &labels(&idx), &labels(&idx), &grid)?,
                )?;
            }
            Probe::GradPaths => {
                let gp = grad_path_norms(&model, &Batch::from_pairs(probe_pairs))?;
                nonzero_paths = Some(gp.nonzero);
                if gp.alias_sum_rel_err > 1e-6 {
                    failures.push(format!(
                        "grad_paths: per-layer gradients sum to the whole only within {:e}",
                        gp.alias_sum_rel_err
                    ));
                }
                w.json(
                    "grad_paths.json",
                    &json!({
                        "provenance": provenance,
                        "examples": probe_pairs.len(),
                        "norms": gp.norms,
                        "sum": gp.sum,
                        "nonzero": gp.nonzero,
                        "alias_sum_rel_err": gp.alias_sum_rel_err,
                    }),
                )?;
            }
            Probe::Cosine => {
                let src = TokenMatrix::from_rows(&[with_eos(&pairs[opts.example].src)]);
                let views = encoder_view_values(&model, &src)?;
                for j in 1..=views.len() {
                    let c = cosine_map(&views, &src, j, 0)?;
                    w.put(format!("cosine_layer{j}.csv"), &matrix_csv(&c.tokens, &c.tokens, &c.matrix))?;
                    let title = format!("cosine similarity, encoder layer {j}");
                    w.put(
                        format!("cosine_layer{j}.svg"),
                        &render_heatmap(&title, &labels(&c.tokens), &labels(&c.tokens), &c.matrix)?,
                    )?;
                    diffusion.push(LayerDiffusion {
                        layer: j,
                        diffusion: c.diffusion,
                    });
                }
            }
            Probe::Attention => {
                for map in attention_maps(&model, &pairs[opts.example])? {
                    let i = map.layer;
                    let (q, k) = (labels(&map.query_tokens), labels(&map.key_tokens));
                    let heads = map.heads.iter().enumerate().map(|(h, m)| (format!("head{}", h + 1), m));
                    for (tag, m) in heads.chain(std::iter::once(("mean".to_string(), &map.mean))) {
                        w.put(
                            format!("attn_layer{i}_{tag}.csv"),
                            &matrix_csv(&map.query_tokens, &map.key_tokens, m),
                        )?;
                        let title = format!("cross-attention, decoder layer {i}, {tag}");
                        w.put(format!("attn_layer{i}_{tag}.svg"), &render_heatmap(&title, &q, &k, m)?)?;
                    }
                }
            }
        }
    }

    if let (Some(c), Some(g)) = (global_consumers, nonzero_paths) {
        if c != g {
            failures.push(format!(
                "grad_paths: {g} nonzero gradient paths into the global view but {c} consuming layers"
            ));
        }
    }

    let mut files = w.files.clone();
    files.push("summary.json".into());
    let summary = BundleSummary {
        provenance,
        probes: opts.probes.clone(),
        files,
        diffusion,
        consistent: failures.is_empty(),
        failures,
    };
    w.json("summary.json", &serde_json::to_value(&summary)?)?;
    if !summary.consistent {
        return Err(Error::Consistency(summary.failures.join("; ")));
    }
    Ok(summary)
}
