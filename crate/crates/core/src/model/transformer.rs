use std::collections::BTreeMap;

use super::config::{Integration, ModelConfig, Strategy};
use super::params::{layout, names, MultiViewInit, Params};
use crate::autodiff::{AttnMask, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tasks::{Batch, TokenMatrix};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Dropout switch threaded through a forward pass.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut Rng>,
}

impl Dropout<'static> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }
}

impl<'a> Dropout<'a> {
    pub fn new(rate: f64, rng: &'a mut Rng) -> Self {
        Dropout {
            rate,
            rng: Some(rng),
        }
    }

    fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => x,
        }
    }
}

/// Parameters of a model placed into one graph, by name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradient of every bound parameter (zeros where none flowed).
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), g.grad_or_zeros(*v)))
            .collect()
    }
}

/// Outputs `S_1..S_N` of every encoder layer for one batch.
#[derive(Debug, Clone)]
pub struct EncoderViews {
    /// `views[j - 1]` is `S_j`, shaped `[B, L_src, d]`.
    pub views: Vec<Var>,
    /// `[B, L_src]`, true at non-pad source positions.
    pub src_valid: Vec<bool>,
    pub batch: usize,
    pub src_len: usize,
}

impl EncoderViews {
    /// The global view `S_N`.
    pub fn last(&self) -> Var {
        *self.views.last().expect("an encoder has at least one layer")
    }

    /// `S_j` for 1-based `j`.
    pub fn get(&self, j: usize) -> Result<Var> {
        if j == 0 || j > self.views.len() {
            return Err(Error::Index {
                op: "encoder view",
                index: j,
                bound: self.views.len(),
            });
        }
        Ok(self.views[j - 1])
    }
}

/// Replacement of the routed view, used by equivalence tests and probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteOverride {
    /// Route `S_N` to every layer.
    GlobalView,
    /// Route an all-zero tensor.
    Zero,
}

#[derive(Debug, Clone, Default)]
pub struct DecodeHooks {
    /// Give every decoder layer its own alias of `S_N` so the gradient
    /// reaching `S_N` through each layer can be read separately.
    pub alias_global_view: bool,
    pub route_override: Option<RouteOverride>,
}

/// Cross-attention inputs of every decoder layer, computed once per source
/// batch and reused across incremental decoding steps.
#[derive(Debug, Clone)]
pub struct Memory {
    /// Integrated view fed to layer `i` (index `i - 1`), `[B, L_src, d]`.
    pub contexts: Vec<Var>,
    /// Aliases of `S_N` per layer when requested through [`DecodeHooks`].
    pub global_aliases: Vec<Var>,
    keys: Vec<Var>,
    values: Vec<Var>,
    pub src_valid: Vec<bool>,
    pub batch: usize,
    pub src_len: usize,
}

impl Memory {
    /// Inference-only copy holding the listed batch rows (repeats allowed).
    pub fn select_rows<T: Scalar>(&self, g: &mut Graph<T>, rows: &[usize]) -> Result<Memory> {
        let pick = |g: &mut Graph<T>, v: Var| -> Result<Var> {
            let t = g.value(v);
            let shape = t.shape().to_vec();
            let row = t.len() / shape[0];
            let mut data = Vec::with_capacity(row * rows.len());
            for &r in rows {
                if r >= shape[0] {
                    return Err(Error::Index {
                        op: "select_rows",
                        index: r,
                        bound: shape[0],
                    });
                }
                data.extend_from_slice(&t.data()[r * row..(r + 1) * row]);
            }
            let mut out_shape = shape;
            out_shape[0] = rows.len();
            Ok(g.constant(Tensor::new(&out_shape, data)?))
        };
        let mut out = Memory {
            contexts: Vec::new(),
            global_aliases: Vec::new(),
            keys: Vec::new(),
            values: Vec::new(),
            src_valid: Vec::with_capacity(rows.len() * self.src_len),
            batch: rows.len(),
            src_len: self.src_len,
        };
        for i in 0..self.keys.len() {
            out.contexts.push(pick(g, self.contexts[i])?);
            out.keys.push(pick(g, self.keys[i])?);
            out.values.push(pick(g, self.values[i])?);
        }
        for &r in rows {
            out.src_valid
                .extend_from_slice(&self.src_valid[r * self.src_len..(r + 1) * self.src_len]);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `[B, L_tgt, V]`.
    pub logits: Var,
    /// Cross-attention weights of layer `i` (index `i - 1`) before dropout,
    /// `[B, H, L_tgt, L_src]`.
    pub cross_attn: Vec<Var>,
}

/// Sinusoidal position table `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for k in 0..d {
            let freq = 10000f64.powf(-((k - k % 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            out[pos * d + k] = if k % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Encoder-decoder Transformer with layer-wise multi-view cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq<T: Scalar> {
    config: ModelConfig,
    params: Params<T>,
}

impl<T: Scalar> Seq2Seq<T> {
    /// Wrap existing parameters, checking them against the configuration.
    pub fn new(config: ModelConfig, params: Params<T>) -> Result<Self> {
        let config = config.normalized();
        config.validate()?;
        if config.precision != T::PRECISION {
            return Err(Error::contract(format!(
                "config precision {} does not match element type {}",
                config.precision.dtype_name(),
                T::PRECISION.dtype_name()
            )));
        }
        params.check_layout(&layout(&config, MultiViewInit::Zero))?;
        Ok(Seq2Seq { config, params })
    }

    /// Fresh model with randomly drawn multi-view parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with(config, seed, MultiViewInit::Random)
    }

    pub fn init_with(config: ModelConfig, seed: u64, mv: MultiViewInit) -> Result<Self> {
        let config = config.normalized();
        config.validate()?;
        let params = Params::initialize(&layout(&config, mv), seed);
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, Params<T>) {
        (self.config, self.params)
    }

    /// Place every parameter into `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.to_string(), g.leaf(t.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::contract(format!(
                "sequence length {len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if len == 0 {
            return Err(Error::contract("empty token matrix"));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph<T>, table: Var, tokens: &TokenMatrix) -> Result<Var> {
        let (b, l, d) = (tokens.rows, tokens.cols, self.config.d_model);
        self.check_len(l)?;
        let e = g.embedding(table, &tokens.ids, &[b, l])?;
        let e = g.scale(e, T::from_f64_lossy((d as f64).sqrt()));
        let pe = positional_encoding(l, d);
        let mut data = Vec::with_capacity(b * l * d);
        for _ in 0..b {
            data.extend(pe.iter().map(|&v| T::from_f64_lossy(v)));
        }
        let pe = g.constant(Tensor::new(&[b, l, d], data)?);
        g.add(e, pe)
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = g.matmul(x, w)?;
        match b {
            Some(b) => g.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// `[B, L, d] -> [B, H, L, d/H]`.
    fn split_heads(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (h, dk) = (self.config.num_heads, self.config.head_dim());
        let r = g.reshape(x, &[s[0], s[1], h, dk])?;
        g.swap_axes(r, 1, 2)
    }

    fn project_heads(&self, g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var, w: &str, b: Option<&str>) -> Result<Var> {
        let wv = p.var(&format!("{prefix}.{w}"))?;
        let bv = b.map(|b| p.var(&format!("{prefix}.{b}"))).transpose()?;
        let y = self.linear(g, x, wv, bv)?;
        self.split_heads(g, y)
    }

    /// Scaled dot-product attention over split heads followed by the output
    /// projection. Returns the output and the pre-dropout weights.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        prefix: &str,
        q: Var,
        k: Var,
        v: Var,
        mask: &AttnMask,
        drop: &mut Dropout,
    ) -> Result<(Var, Var)> {
        let dk = self.config.head_dim();
        let scores = g.matmul_t(q, k, false, true)?;
        let scores = g.scale(scores, T::from_f64_lossy(1.0 / (dk as f64).sqrt()));
        let weights = g.masked_softmax(scores, mask)?;
        let dropped = drop.apply(g, weights);
        let ctx = g.matmul(dropped, v)?;
        let ctx = g.swap_axes(ctx, 1, 2)?;
        let s = g.shape(ctx).to_vec();
        let ctx = g.reshape(ctx, &[s[0], s[1], self.config.d_model])?;
        let out = self.linear(
            g,
            ctx,
            p.var(&format!("{prefix}.wo"))?,
            Some(p.var(&format!("{prefix}.bo"))?),
        )?;
        Ok((out, weights))
    }

    /// Multi-head attention of queries `xq` over keys/values `xkv`.
    #[allow(clippy::too_many_arguments)]
    pub fn multi_head_attention(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        prefix: &str,
        xq: Var,
        xkv: Var,
        mask: &AttnMask,
        drop: &mut Dropout,
    ) -> Result<(Var, Var)> {
        let q = self.project_heads(g, p, prefix, xq, "wq", Some("bq"))?;
        let k = self.project_heads(g, p, prefix, xkv, "wk", None)?;
        let v = self.project_heads(g, p, prefix, xkv, "wv", Some("bv"))?;
        self.attend(g, p, prefix, q, k, v, mask, drop)
    }

    fn add_norm(&self, g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var, y: Var) -> Result<Var> {
        let s = g.add(x, y)?;
        let gain = p.var(&format!("{prefix}.gain"))?;
        let bias = p.var(&format!("{prefix}.bias"))?;
        g.layer_norm(s, gain, bias, LN_EPS)
    }

    fn ffn(&self, g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var, drop: &mut Dropout) -> Result<Var> {
        let h = self.linear(
            g,
            x,
            p.var(&format!("{prefix}.w1"))?,
            Some(p.var(&format!("{prefix}.b1"))?),
        )?;
        let h = g.relu(h);
        let h = drop.apply(g, h);
        self.linear(
            g,
            h,
            p.var(&format!("{prefix}.w2"))?,
            Some(p.var(&format!("{prefix}.b2"))?),
        )
    }

    /// Run the encoder and keep every layer's output.
    pub fn encode(&self, g: &mut Graph<T>, p: &Bound, src: &TokenMatrix, drop: &mut Dropout) -> Result<EncoderViews> {
        let (b, l) = (src.rows, src.cols);
        let valid = src.valid();
        if (0..b).any(|r| !valid[r * l..(r + 1) * l].contains(&true)) {
            return Err(Error::contract("source row without a non-pad token"));
        }
        let mut x = self.embed(g, p.var("src_embed")?, src)?;
        let mask = AttnMask::key_padding(&valid, b, l, l);
        let mut views = Vec::with_capacity(self.config.num_layers);
        for layer in 1..=self.config.num_layers {
            let pre = format!("enc.{layer}");
            let (a, _) = self.multi_head_attention(g, p, &format!("{pre}.self_attn"), x, x, &mask, drop)?;
            x = self.add_norm(g, p, &format!("{pre}.ln1"), x, a)?;
            let f = self.ffn(g, p, &format!("{pre}.ffn"), x, drop)?;
            x = self.add_norm(g, p, &format!("{pre}.ln2"), x, f)?;
            views.push(x);
        }
        Ok(EncoderViews {
            views,
            src_valid: valid,
            batch: b,
            src_len: l,
        })
    }

    /// The view `g_i(S)` routed to decoder layer `i` (1-based).
    pub fn route_view(&self, g: &mut Graph<T>, p: &Bound, i: usize, views: &[Var]) -> Result<Var> {
        let n = self.config.num_layers;
        if i == 0 || i > n {
            return Err(Error::Index {
                op: "route_view",
                index: i,
                bound: n,
            });
        }
        if views.len() != n {
            return Err(Error::contract(format!("expected {n} encoder views, got {}", views.len())));
        }
        let shape = g.shape(views[0]).to_vec();
        if views.iter().any(|v| g.shape(*v) != shape.as_slice()) {
            return Err(Error::contract("encoder views differ in shape"));
        }
        if let Some(j) = self.config.strategy.selected_layer(i, n) {
            return Ok(views[j - 1]);
        }
        match self.config.strategy {
            Strategy::Fma => {
                let mut acc: Option<Var> = None;
                for (j, &s) in views.iter().enumerate() {
                    let w = p.var(&names::fma_weight(i, j + 1))?;
                    let b = p.var(&names::fma_bias(i, j + 1))?;
                    let t = self.linear(g, s, w, Some(b))?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, t)?,
                        None => t,
                    });
                }
                Ok(acc.expect("at least one encoder view"))
            }
            Strategy::Ama => {
                let alpha = self.ama_alpha(g, p, i)?;
                let numel: usize = shape.iter().product();
                let flat = views
                    .iter()
                    .map(|&s| g.reshape(s, &[1, numel]))
                    .collect::<Result<Vec<_>>>()?;
                let stacked = g.concat(&flat, 0)?;
                let mixed = g.matmul(alpha, stacked)?;
                g.reshape(mixed, &shape)
            }
            _ => unreachable!("selection strategies return above"),
        }
    }

    /// AMA mixing weights of decoder layer `i` as a `[1, N]` graph node.
    pub fn ama_alpha(&self, g: &mut Graph<T>, p: &Bound, i: usize) -> Result<Var> {
        let (n, d) = (self.config.num_layers, self.config.d_model);
        let q = p.var(&names::ama_query(i))?;
        let q = g.reshape(q, &[1, d])?;
        let keys = (1..=n)
            .map(|j| {
                let k = p.var(&names::ama_key(j))?;
                g.reshape(k, &[1, d])
            })
            .collect::<Result<Vec<_>>>()?;
        let keys = g.concat(&keys, 0)?;
        let scores = g.matmul_t(q, keys, false, true)?;
        let scores = g.scale(scores, T::from_f64_lossy(1.0 / (d as f64).sqrt()));
        g.softmax(scores, 1)
    }

    /// Combine the routed view with `S_N` according to the integration mode.
    pub fn integrate_view(&self, g: &mut Graph<T>, p: &Bound, i: usize, routed: Var, s_last: Var) -> Result<Var> {
        if g.shape(routed) != g.shape(s_last) {
            return Err(Error::Shape {
                op: "integrate_view",
                lhs: g.shape(routed).to_vec(),
                rhs: g.shape(s_last).to_vec(),
            });
        }
        match self.config.integration {
            Integration::Direct => Ok(routed),
            Integration::Soft => {
                let s = g.add(routed, s_last)?;
                let gain = p.var(&names::view_ln_gain(i))?;
                let bias = p.var(&names::view_ln_bias(i))?;
                g.layer_norm(s, gain, bias, LN_EPS)
            }
        }
    }

    /// Route, integrate and project the cross-attention keys and values of
    /// every decoder layer.
    pub fn prepare_memory(&self, g: &mut Graph<T>, p: &Bound, enc: &EncoderViews, hooks: &DecodeHooks) -> Result<Memory> {
        let n = self.config.num_layers;
        if enc.views.len() != n {
            return Err(Error::contract(format!("expected {n} encoder views, got {}", enc.views.len())));
        }
        let mut mem = Memory {
            contexts: Vec::with_capacity(n),
            global_aliases: Vec::new(),
            keys: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            src_valid: enc.src_valid.clone(),
            batch: enc.batch,
            src_len: enc.src_len,
        };
        for i in 1..=n {
            let mut views = enc.views.clone();
            let mut last = enc.last();
            if hooks.alias_global_view {
                last = g.alias(last);
                views[n - 1] = last;
                mem.global_aliases.push(last);
            }
            let routed = match hooks.route_override {
                None => self.route_view(g, p, i, &views)?,
                Some(RouteOverride::GlobalView) => last,
                Some(RouteOverride::Zero) => g.constant(Tensor::zeros(g.shape(last))),
            };
            let ctx = self.integrate_view(g, p, i, routed, last)?;
            let prefix = format!("dec.{i}.cross_attn");
            mem.keys.push(self.project_heads(g, p, &prefix, ctx, "wk", None)?);
            mem.values.push(self.project_heads(g, p, &prefix, ctx, "wv", Some("bv"))?);
            mem.contexts.push(ctx);
        }
        Ok(mem)
    }

    /// Teacher-forced decoder over a prepared memory.
    pub fn decode_with_memory(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tgt_in: &TokenMatrix,
        mem: &Memory,
        drop: &mut Dropout,
    ) -> Result<DecoderOutput> {
        let (b, lt) = (tgt_in.rows, tgt_in.cols);
        if b != mem.batch {
            return Err(Error::contract(format!(
                "target batch {b} does not match source batch {}",
                mem.batch
            )));
        }
        let mut x = self.embed(g, p.var("tgt_embed")?, tgt_in)?;
        let self_mask = AttnMask::build(b, lt, lt, |_, q, k| k <= q);
        let cross_mask = AttnMask::key_padding(&mem.src_valid, b, lt, mem.src_len);
        let mut cross_attn = Vec::with_capacity(self.config.num_layers);
        for i in 1..=self.config.num_layers {
            let pre = format!("dec.{i}");
            let (a, _) = self.multi_head_attention(g, p, &format!("{pre}.self_attn"), x, x, &self_mask, drop)?;
            x = self.add_norm(g, p, &format!("{pre}.ln1"), x, a)?;
            let cross = format!("{pre}.cross_attn");
            let q = self.project_heads(g, p, &cross, x, "wq", Some("bq"))?;
            let (c, w) = self.attend(g, p, &cross, q, mem.keys[i - 1], mem.values[i - 1], &cross_mask, drop)?;
            cross_attn.push(w);
            x = self.add_norm(g, p, &format!("{pre}.ln2"), x, c)?;
            let f = self.ffn(g, p, &format!("{pre}.ffn"), x, drop)?;
            x = self.add_norm(g, p, &format!("{pre}.ln3"), x, f)?;
        }
        let logits = self.linear(g, x, p.var("out.w")?, Some(p.var("out.b")?))?;
        Ok(DecoderOutput { logits, cross_attn })
    }

    pub fn decode(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tgt_in: &TokenMatrix,
        enc: &EncoderViews,
        drop: &mut Dropout,
        hooks: &DecodeHooks,
    ) -> Result<(Memory, DecoderOutput)> {
        let mem = self.prepare_memory(g, p, enc, hooks)?;
        let out = self.decode_with_memory(g, p, tgt_in, &mem, drop)?;
        Ok((mem, out))
    }

    /// Full forward pass and mean cross-entropy over non-pad targets.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: &Batch,
        drop: &mut Dropout,
        hooks: &DecodeHooks,
        smoothing: f64,
    ) -> Result<ForwardPass> {
        let views = self.encode(g, p, &batch.src, drop)?;
        let (memory, out) = self.decode(g, p, &batch.tgt_in, &views, drop, hooks)?;
        let loss = g.cross_entropy(out.logits, &batch.tgt_out.ids, crate::tokens::PAD, smoothing)?;
        Ok(ForwardPass {
            views,
            memory,
            output: out,
            loss,
        })
    }

    /// Logits `[B, L_tgt, V]` in evaluation mode.
    pub fn logits(&self, src: &TokenMatrix, tgt_in: &TokenMatrix, hooks: &DecodeHooks) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let mut drop = Dropout::off();
        let enc = self.encode(&mut g, &p, src, &mut drop)?;
        let (_, out) = self.decode(&mut g, &p, tgt_in, &enc, &mut drop, hooks)?;
        Ok(g.value(out.logits).clone())
    }
}

/// Graph handles produced by [`Seq2Seq::loss`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub views: EncoderViews,
    pub memory: Memory,
    pub output: DecoderOutput,
    pub loss: Var,
}
