use std::sync::Arc;

use rand::Rng as _;

use super::graph::{op_strides, swap_axes_data, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Attention visibility pattern for scores shaped `[B, H, Lq, Lk]`.
///
/// `allowed[(b * lq + q) * lk + k]` says whether query `q` of row `b` may
/// attend to key `k`; the pattern is shared by all heads.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub allowed: Arc<[bool]>,
}

impl AttnMask {
    /// Keys at padded positions are hidden; `key_valid` is `[B, Lk]`.
    pub fn key_padding(key_valid: &[bool], batch: usize, lq: usize, lk: usize) -> Self {
        Self::build(batch, lq, lk, |b, _, k| key_valid[b * lk + k])
    }

    /// Causal pattern combined with key padding.
    pub fn causal(key_valid: &[bool], batch: usize, len: usize) -> Self {
        Self::build(batch, len, len, |b, q, k| k <= q && key_valid[b * len + k])
    }

    pub fn build(batch: usize, lq: usize, lk: usize, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(batch * lq * lk);
        for b in 0..batch {
            for q in 0..lq {
                for k in 0..lk {
                    allowed.push(f(b, q, k));
                }
            }
        }
        AttnMask {
            batch,
            lq,
            lk,
            allowed: allowed.into(),
        }
    }

    pub fn is_allowed(&self, b: usize, q: usize, k: usize) -> bool {
        self.allowed[(b * self.lq + q) * self.lk + k]
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(op, a, b))
    }
}

impl<T: Scalar> Graph<T> {
    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad(*v))
    }

    /// Identity node; gives a consumer its own gradient slot.
    pub fn alias(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        let rg = self.rg(&[x]);
        self.push(value, Op::Alias(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); av.len()];
        par::fill_indexed(&mut out, |i| av[i] + bv[i]);
        let value = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `x[..., d] + bias[d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.shape(bias);
        if d.len() != 1 || self.shape(x).last() != Some(&d[0]) {
            return Err(Error::shape("add_bias", self.shape(x), d));
        }
        let d = d[0];
        let (xv, bv) = (self.value(x).data(), self.value(bias).data());
        let mut out = vec![T::zero(); xv.len()];
        par::fill_indexed(&mut out, |i| xv[i] + bv[i % d]);
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); av.len()];
        par::fill_indexed(&mut out, |i| av[i] * bv[i]);
        let value = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = match self.gates.as_mut() {
            None => self.value(x).map(|v| if v > T::zero() { v } else { T::zero() }),
            Some(gates) => {
                let xv = &self.nodes[x.0].value;
                let mut out = xv.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    let on = match gates.pattern.get(gates.cursor + i) {
                        Some(&on) => on,
                        None => {
                            gates.mismatch = true;
                            *v > T::zero()
                        }
                    };
                    if !on {
                        *v = T::zero();
                    }
                }
                gates.cursor += xv.len();
                out
            }
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Inverted dropout with drop probability `p`; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x).data();
        let out = xv.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(self.shape(x), out).expect("dropout keeps the input shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Dropout { x, mask }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes the last two axes.
    ///
    /// `a` is `[..., m, k]`; `b` is either `[k, n]` (shared by every leading
    /// index of `a`) or has the same leading dimensions as `a`.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(Error::shape("matmul", &ashape, &bshape));
        }
        let ra = ashape.len();
        let rb = bshape.len();
        let (m, k) = if ta {
            (ashape[ra - 1], ashape[ra - 2])
        } else {
            (ashape[ra - 2], ashape[ra - 1])
        };
        let (kb, n) = if tb {
            (bshape[rb - 1], bshape[rb - 2])
        } else {
            (bshape[rb - 2], bshape[rb - 1])
        };
        let lead = &ashape[..ra - 2];
        let shared_b = rb == 2;
        if k != kb || (!shared_b && &bshape[..rb - 2] != lead) {
            return Err(Error::shape("matmul", &ashape, &bshape));
        }
        let batch: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);

        let av = self.value(a).data();
        let bv = self.value(b).data();
        let sa = op_strides(ta, m, k);
        let sb = op_strides(tb, k, n);
        let mut out = vec![T::zero(); batch * m * n];
        if shared_b && !ta {
            T::gemm(batch * m, k, n, T::one(), av, sa, bv, sb, T::zero(), &mut out, (n, 1));
        } else {
            let b_stride = if shared_b { 0 } else { k * n };
            par::for_each_chunk_mut(&mut out, m * n, |bi, c| {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &av[bi * m * k..(bi + 1) * m * k],
                    sa,
                    &bv[bi * b_stride..bi * b_stride + k * n],
                    sb,
                    T::zero(),
                    c,
                    (n, 1),
                );
            });
        }
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                op: "softmax",
                index: axis,
                bound: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = xv.to_vec();
        if inner == 1 {
            par::for_each_chunk_mut(&mut out, len, |_, row| softmax_row(row, None));
        } else {
            for o in 0..outer {
                for p in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + p;
                    let mut row: Vec<T> = (0..len).map(|j| xv[idx(j)]).collect();
                    softmax_row(&mut row, None);
                    for (j, v) in row.into_iter().enumerate() {
                        out[idx(j)] = v;
                    }
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Softmax over the key axis of `[B, H, Lq, Lk]` scores; hidden keys get
    /// exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, mask: &AttnMask) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || shape[0] != mask.batch || shape[2] != mask.lq || shape[3] != mask.lk {
            return Err(Error::shape(
                "masked_softmax",
                &shape,
                &[mask.batch, 1, mask.lq, mask.lk],
            ));
        }
        let (heads, lq, lk) = (shape[1], shape[2], shape[3]);
        for b in 0..mask.batch {
            for q in 0..lq {
                if !(0..lk).any(|k| mask.is_allowed(b, q, k)) {
                    return Err(Error::contract(format!(
                        "attention row (batch {b}, query {q}) has no visible key"
                    )));
                }
            }
        }
        let mut out = self.value(x).data().to_vec();
        let allowed: &[bool] = &mask.allowed;
        par::for_each_chunk_mut(&mut out, lk, |r, row| {
            let b = r / (heads * lq);
            let q = r % lq;
            let m = &allowed[(b * lq + q) * lk..(b * lq + q + 1) * lk];
            softmax_row(row, Some(m));
        });
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaskedSoftmax { x }, rg))
    }

    /// Normalize the last axis to zero mean and unit variance, then apply
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let eps = T::from_f64_lossy(eps);
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.len() / d.max(1);
        let mut xhat = xv.to_vec();
        let mut rstd = vec![T::zero(); rows];
        par::for_each_chunk_pair_mut(&mut xhat, d, &mut rstd, 1, |_, row, rs| {
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                * inv_d;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rs[0] = r;
        });
        let mut out = vec![T::zero(); xv.len()];
        par::fill_indexed(&mut out, |i| xhat[i] * gv[i % d] + bv[i % d]);
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean token-level negative log-likelihood over non-pad positions, with
    /// optional label smoothing (`smoothing` mass spread uniformly over the
    /// vocabulary).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad_id: usize,
        smoothing: f64,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().ok_or_else(|| Error::shape("cross_entropy", &shape, &[]))?;
        let rows = self.value(logits).len() / v.max(1);
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        for &t in targets {
            if t != pad_id && t >= v {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let eps_s = T::from_f64_lossy(smoothing);
        let uniform = eps_s / T::from_usize(v).unwrap();
        let hit = T::one() - eps_s;
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let sum = row.iter().fold(T::zero(), |s, &x| s + (x - max).exp());
            let lse = max + sum.ln();
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            if t == pad_id {
                continue;
            }
            count += 1;
            let mut nll = hit * (lse - row[t]);
            if smoothing > 0.0 {
                let s = row.iter().fold(T::zero(), |s, &x| s + (lse - x));
                nll = nll + uniform * s;
            }
            total = total + nll;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).unwrap()
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.into(),
                pad_id,
                smoothing: eps_s,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Rows of `table` (`[V, d]`) selected by `ids`; output is `ids_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", &tshape, ids_shape));
        }
        let (vocab, d) = (tshape[0], tshape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index {
                op: "embedding",
                index: bad,
                bound: vocab,
            });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.into(),
            },
            rg,
        ))
    }

    /// Exchange two axes (materialized copy).
    pub fn swap_axes(&mut self, x: Var, a1: usize, a2: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if a1 >= shape.len() || a2 >= shape.len() {
            return Err(Error::Index {
                op: "swap_axes",
                index: a1.max(a2),
                bound: shape.len(),
            });
        }
        let data = swap_axes_data(self.value(x).data(), &shape, a1, a2);
        let mut out_shape = shape;
        out_shape.swap(a1, a2);
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SwapAxes { x, a1, a2 }, rg))
    }

    /// Transpose of the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        self.swap_axes(x, r - 2, r - 1)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Index {
                op: "concat",
                index: axis,
                bound: base.len(),
            });
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &sz) in xs.iter().zip(&sizes) {
                let v = self.value(x).data();
                out.extend_from_slice(&v[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                inner,
                sizes,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().fold(T::zero(), |a, &b| a + b) / T::from_usize(v.len().max(1)).unwrap();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }
}

/// In-place stable softmax of one row; `allowed` hides entries (weight 0).
fn softmax_row<T: Scalar>(row: &mut [T], allowed: Option<&[bool]>) {
    let vis = |j: usize| allowed.is_none_or(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if vis(j) && v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if vis(j) {
            *v = (*v - max).exp();
            sum = sum + *v;
        } else {
            *v = T::zero();
        }
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}
