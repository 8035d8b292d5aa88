use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::kernels::{gelu, gemm_acc, gemm_nt_acc, gemm_tn_acc, split_at_axis, swap_axes_index};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Feed-forward nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Relu,
    #[default]
    Gelu,
}

/// Output of a training-mode batch norm: the normalized node plus the
/// per-feature batch statistics (biased variance) used to produce it.
pub struct BatchNormOut {
    pub out: Var,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        a: Var,
    },
    SwapAxes {
        a: Var,
        map: Vec<usize>,
    },
    BroadcastLeading {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Activation {
        a: Var,
        deriv: Vec<f64>,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNormTrain {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Pick {
        a: Var,
        indices: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Linear record of executed operations. Node order is execution order, so
/// reverse iteration is a valid topological order for backpropagation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; gradient participation follows `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Records a named trainable leaf once per tape; later calls with the
    /// same name return the cached handle.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let mut copy = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        copy.set_requires_grad(true);
        let v = self.leaf(copy);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    /// Named parameters recorded so far, in first-use order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.param_index.get(name).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        let requires = parents.iter().any(|&p| self.requires(p));
        let value = Tensor::from_parts(shape, data).with_requires_grad(requires);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    // ---- forward ops ----------------------------------------------------

    /// Batched matrix product `[.., m, k] · [.., k, n]`. Leading batch
    /// dimensions must match, or one side must be a plain matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", &sa, &sb);
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        if k != k2 {
            return shape_err("matmul", &sa, &sb);
        }
        let (lead, a_batched, b_batched) = if ba == bb {
            (ba.to_vec(), !ba.is_empty(), !bb.is_empty())
        } else if bb.is_empty() {
            (ba.to_vec(), true, false)
        } else if ba.is_empty() {
            (bb.to_vec(), false, true)
        } else {
            return shape_err("matmul", &sa, &sb);
        };
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for t in 0..batch {
                let ao = if a_batched { t * m * k } else { 0 };
                let bo = if b_batched { t * k * n } else { 0 };
                gemm_acc(
                    &ad[ao..ao + m * k],
                    &bd[bo..bo + k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = lead;
        shape.extend([m, n]);
        let op = Op::MatMul {
            a,
            b,
            batch,
            a_batched,
            b_batched,
            m,
            k,
            n,
        };
        Ok(self.push(shape, out, op, &[a, b]))
    }

    /// `b` must equal `a`'s shape or a suffix of it (broadcast over leading dims).
    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err(op, sa, sb);
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add", a, b)?;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let out: Vec<f64> = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % bd.len()])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul", a, b)?;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let out: Vec<f64> = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i % bd.len()])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale { a, c }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} for rank {}",
                s0.len()
            )));
        }
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != s0.len() || sp.iter().enumerate().any(|(d, &e)| d != axis && e != s0[d])
            {
                return shape_err("concat", &s0, sp);
            }
            total += sp[axis];
        }
        let (outer, _, inner) = split_at_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        Ok(self.push(shape, out, op, parts))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(Error::Contract(format!(
                "slice {start}..{} on axis {axis} of {sa:?}",
                start + len
            )));
        }
        let (outer, ext, inner) = split_at_axis(&sa, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Slice { a, axis, start }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return shape_err("reshape", self.shape(a), shape);
        }
        let out = self.value(a).data().to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, &[a]))
    }

    /// Swaps two axes (the general transpose).
    pub fn swap_axes(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if i >= sa.len() || j >= sa.len() {
            return Err(Error::Contract(format!("swap_axes({i},{j}) on {sa:?}")));
        }
        let (shape, map) = swap_axes_index(&sa, i, j);
        let d = self.value(a).data();
        let out = map.iter().map(|&s| d[s]).collect();
        Ok(self.push(shape, out, Op::SwapAxes { a, map }, &[a]))
    }

    /// Transpose of the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Contract("transpose needs rank >= 2".into()));
        }
        self.swap_axes(a, r - 2, r - 1)
    }

    /// Repeats `a` over new leading dimensions `lead`.
    pub fn broadcast_leading(&mut self, a: Var, lead: &[usize]) -> Var {
        let reps: usize = lead.iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(reps * d.len());
        for _ in 0..reps {
            out.extend_from_slice(d);
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(self.shape(a));
        self.push(shape, out, Op::BroadcastLeading { a }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(vec![1], vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![1], vec![s], Op::Mean { a }, &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Nonlinearity) -> Var {
        let d = self.value(a).data();
        let (out, deriv): (Vec<f64>, Vec<f64>) = match kind {
            Nonlinearity::Relu => d
                .iter()
                .map(|&x| if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) })
                .unzip(),
            Nonlinearity::Gelu => d.iter().map(|&x| gelu(x)).unzip(),
        };
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Activation { a, deriv }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Nonlinearity::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.activation(a, Nonlinearity::Gelu)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} for rank {}",
                sa.len()
            )));
        }
        let (outer, ext, inner) = split_at_axis(&sa, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| o * ext * inner + e * inner + i;
                let mx = (0..ext).map(|e| d[at(e)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for e in 0..ext {
                    let v = (d[at(e)] - mx).exp();
                    out[at(e)] = v;
                    z += v;
                }
                for e in 0..ext {
                    out[at(e)] /= z;
                }
            }
        }
        Ok(self.push(sa, out, Op::Softmax { a, axis }, &[a]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let f = *sx.last().unwrap();
        if self.shape(gain) != [f] || self.shape(bias) != [f] {
            return shape_err("layer_norm", &sx, self.shape(gain));
        }
        let rows = self.value(x).numel() / f;
        let d = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; d.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * f..(r + 1) * f];
            let mu = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / f as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..f {
                let mut h = (row[c] - mu) * rs;
                // zero-variance row with eps = 0: 0 * inf collapses to the bias
                if !h.is_finite() {
                    h = 0.0;
                }
                xhat[r * f + c] = h;
                out[r * f + c] = h * g[c] + b[c];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.push(sx, out, op, &[x, gain, bias]))
    }

    fn check_bn(&self, x: Var, gain: Var, bias: Var) -> Result<(usize, usize)> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::Contract(format!(
                "batch_norm expects [n, f], got {sx:?}"
            )));
        }
        let f = sx[1];
        if self.shape(gain) != [f] || self.shape(bias) != [f] {
            return shape_err("batch_norm", sx, self.shape(gain));
        }
        Ok((sx[0], f))
    }

    /// Batch norm over the first axis using the batch's own statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<BatchNormOut> {
        let (n, f) = self.check_bn(x, gain, bias)?;
        let d = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for r in 0..n {
            for c in 0..f {
                mean[c] += d[r * f + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for r in 0..n {
            for c in 0..f {
                let z = d[r * f + c] - mean[c];
                var[c] += z * z;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * f];
        let mut out = vec![0.0; n * f];
        for r in 0..n {
            for c in 0..f {
                let h = (d[r * f + c] - mean[c]) * rstd[c];
                xhat[r * f + c] = h;
                out[r * f + c] = h * g[c] + b[c];
            }
        }
        let op = Op::BatchNormTrain {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        let out = self.push(vec![n, f], out, op, &[x, gain, bias]);
        Ok(BatchNormOut { out, mean, var })
    }

    /// Batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, f) = self.check_bn(x, gain, bias)?;
        if running_mean.len() != f || running_var.len() != f {
            return shape_err("batch_norm", &[n, f], &[running_mean.len()]);
        }
        let d = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * f];
        let mut out = vec![0.0; n * f];
        for r in 0..n {
            for c in 0..f {
                let h = (d[r * f + c] - running_mean[c]) * rstd[c];
                xhat[r * f + c] = h;
                out[r * f + c] = h * g[c] + b[c];
            }
        }
        let op = Op::BatchNormEval {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.push(vec![n, f], out, op, &[x, gain, bias]))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return shape_err("cross_entropy", &sl, &[labels.len()]);
        }
        let (n, c) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let d = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &d[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for k in 0..c {
                probs[r * c + k] = (row[k] - mx).exp() / z;
            }
            loss += z.ln() + mx - row[labels[r]];
        }
        loss /= n as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(vec![1], vec![loss], op, &[logits]))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return shape_err("mse", self.shape(pred), target.shape());
        }
        let d = self.value(pred).data();
        let t = target.data();
        let loss = d.iter().zip(t).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / d.len() as f64;
        let op = Op::Mse {
            pred,
            target: t.to_vec(),
        };
        Ok(self.push(vec![1], vec![loss], op, &[pred]))
    }

    /// Rows of `table` ([vocab, dim]) at `indices`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::Contract(format!(
                "embedding table must be 2-D, got {st:?}"
            )));
        }
        if indices.is_empty() {
            return Err(Error::Contract("empty embedding lookup".into()));
        }
        let (v, dim) = (st[0], st[1]);
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= v {
                return Err(Error::Contract(format!("embedding index {i} >= {v}")));
            }
            out.extend_from_slice(&d[i * dim..(i + 1) * dim]);
        }
        let op = Op::Embedding {
            table,
            indices: indices.to_vec(),
        };
        Ok(self.push(vec![indices.len(), dim], out, op, &[table]))
    }

    /// `out[r] = a[r, indices[r]]` for a 2-D `a`.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] != indices.len() {
            return shape_err("pick", &sa, &[indices.len()]);
        }
        let c = sa[1];
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(Error::Contract(format!("pick index {bad} >= {c}")));
        }
        let d = self.value(a).data();
        let out = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| d[r * c + i])
            .collect();
        let op = Op::Pick {
            a,
            indices: indices.to_vec(),
        };
        Ok(self.push(vec![sa[0]], out, op, &[a]))
    }

    // ---- backward -------------------------------------------------------

    /// Backpropagates from the scalar `loss`, adding into the gradient buffer
    /// of every node that requires grad. Calling twice without
    /// [`Tape::zero_grads`] doubles the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].value.requires_grad();
        let val = |v: Var| nodes[v.0].value.data();
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            } => {
                if needs(a) {
                    let bd = val(b);
                    let ga = acc(grads, a, nodes[a.0].value.numel());
                    for t in 0..batch {
                        let ao = if a_batched { t * m * k } else { 0 };
                        let bo = if b_batched { t * k * n } else { 0 };
                        gemm_nt_acc(
                            &g[t * m * n..(t + 1) * m * n],
                            &bd[bo..bo + k * n],
                            &mut ga[ao..ao + m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if needs(b) {
                    let ad = val(a);
                    let gb = acc(grads, b, nodes[b.0].value.numel());
                    for t in 0..batch {
                        let ao = if a_batched { t * m * k } else { 0 };
                        let bo = if b_batched { t * k * n } else { 0 };
                        gemm_tn_acc(
                            &ad[ao..ao + m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            &Op::Add { a, b } => {
                if needs(a) {
                    let ga = acc(grads, a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if needs(b) {
                    let nb = nodes[b.0].value.numel();
                    let gb = acc(grads, b, nb);
                    for (j, &y) in g.iter().enumerate() {
                        gb[j % nb] += y;
                    }
                }
            }
            &Op::Mul { a, b } => {
                let ad = val(a);
                let bd = val(b);
                let nb = bd.len();
                if needs(a) {
                    let ga = acc(grads, a, g.len());
                    for (j, &y) in g.iter().enumerate() {
                        ga[j] += y * bd[j % nb];
                    }
                }
                if needs(b) {
                    let gb = acc(grads, b, nb);
                    for (j, &y) in g.iter().enumerate() {
                        gb[j % nb] += y * ad[j];
                    }
                }
            }
            &Op::Scale { a, c } => {
                if needs(a) {
                    let ga = acc(grads, a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = nodes[i].value.shape();
                let (outer, total, inner) = split_at_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = nodes[p.0].value.shape()[*axis];
                    if needs(p) {
                        let gp = acc(grads, p, nodes[p.0].value.numel());
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * ext * inner;
                            for q in 0..ext * inner {
                                gp[dst + q] += g[src + q];
                            }
                        }
                    }
                    offset += ext;
                }
            }
            &Op::Slice { a, axis, start } => {
                if needs(a) {
                    let sa = nodes[a.0].value.shape();
                    let (outer, ext, inner) = split_at_axis(sa, axis);
                    let len = nodes[i].value.shape()[axis];
                    let ga = acc(grads, a, nodes[a.0].value.numel());
                    for o in 0..outer {
                        let base = o * ext * inner + start * inner;
                        for q in 0..len * inner {
                            ga[base + q] += g[o * len * inner + q];
                        }
                    }
                }
            }
            &Op::Reshape { a } => {
                if needs(a) {
                    let ga = acc(grads, a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::SwapAxes { a, map } => {
                if needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (j, &s) in map.iter().enumerate() {
                        ga[s] += g[j];
                    }
                }
            }
            &Op::BroadcastLeading { a } => {
                if needs(a) {
                    let na = nodes[a.0].value.numel();
                    let ga = acc(grads, a, na);
                    for (j, &y) in g.iter().enumerate() {
                        ga[j % na] += y;
                    }
                }
            }
            &Op::Sum { a } => {
                if needs(a) {
                    let na = nodes[a.0].value.numel();
                    let ga = acc(grads, a, na);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Mean { a } => {
                if needs(a) {
                    let na = nodes[a.0].value.numel();
                    let ga = acc(grads, a, na);
                    let s = g[0] / na as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Activation { a, deriv } => {
                if needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * deriv[j];
                    }
                }
            }
            &Op::Softmax { a, axis } => {
                if needs(a) {
                    let y = nodes[i].value.data();
                    let (outer, ext, inner) = split_at_axis(nodes[i].value.shape(), axis);
                    let ga = acc(grads, a, g.len());
                    for o in 0..outer {
                        for q in 0..inner {
                            let at = |e: usize| o * ext * inner + e * inner + q;
                            let dot: f64 = (0..ext).map(|e| g[at(e)] * y[at(e)]).sum();
                            for e in 0..ext {
                                ga[at(e)] += y[at(e)] * (g[at(e)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let f = nodes[gain.0].value.numel();
                let rows = xhat.len() / f;
                let gd = val(*gain);
                if needs(*gain) {
                    let gg = acc(grads, *gain, f);
                    for r in 0..rows {
                        for c in 0..f {
                            gg[c] += g[r * f + c] * xhat[r * f + c];
                        }
                    }
                }
                if needs(*bias) {
                    let gb = acc(grads, *bias, f);
                    for r in 0..rows {
                        for c in 0..f {
                            gb[c] += g[r * f + c];
                        }
                    }
                }
                if needs(*x) {
                    let gx = acc(grads, *x, rows * f);
                    let nf = f as f64;
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..f {
                            let gh = g[r * f + c] * gd[c];
                            s1 += gh;
                            s2 += gh * xhat[r * f + c];
                        }
                        for c in 0..f {
                            let gh = g[r * f + c] * gd[c];
                            gx[r * f + c] += rstd[r] / nf * (nf * gh - s1 - xhat[r * f + c] * s2);
                        }
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let f = nodes[gain.0].value.numel();
                let n = xhat.len() / f;
                let gd = val(*gain);
                bn_affine_grads(grads, nodes, *gain, *bias, g, xhat, n, f);
                if needs(*x) {
                    let gx = acc(grads, *x, n * f);
                    let nn = n as f64;
                    for c in 0..f {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for r in 0..n {
                            let gh = g[r * f + c] * gd[c];
                            s1 += gh;
                            s2 += gh * xhat[r * f + c];
                        }
                        for r in 0..n {
                            let gh = g[r * f + c] * gd[c];
                            gx[r * f + c] += rstd[c] / nn * (nn * gh - s1 - xhat[r * f + c] * s2);
                        }
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let f = nodes[gain.0].value.numel();
                let n = xhat.len() / f;
                let gd = val(*gain);
                bn_affine_grads(grads, nodes, *gain, *bias, g, xhat, n, f);
                if needs(*x) {
                    let gx = acc(grads, *x, n * f);
                    for r in 0..n {
                        for c in 0..f {
                            gx[r * f + c] += g[r * f + c] * gd[c] * rstd[c];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if needs(*logits) {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let gl = acc(grads, *logits, n * c);
                    let s = g[0] / n as f64;
                    for r in 0..n {
                        for k in 0..c {
                            let onehot = if k == labels[r] { 1.0 } else { 0.0 };
                            gl[r * c + k] += s * (probs[r * c + k] - onehot);
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                if needs(*pred) {
                    let p = val(*pred);
                    let s = 2.0 * g[0] / p.len() as f64;
                    let gp = acc(grads, *pred, p.len());
                    for j in 0..p.len() {
                        gp[j] += s * (p[j] - target[j]);
                    }
                }
            }
            Op::Embedding { table, indices } => {
                if needs(*table) {
                    let dim = nodes[table.0].value.shape()[1];
                    let gt = acc(grads, *table, nodes[table.0].value.numel());
                    for (r, &ix) in indices.iter().enumerate() {
                        for c in 0..dim {
                            gt[ix * dim + c] += g[r * dim + c];
                        }
                    }
                }
            }
            Op::Pick { a, indices } => {
                if needs(*a) {
                    let c = nodes[a.0].value.shape()[1];
                    let ga = acc(grads, *a, nodes[a.0].value.numel());
                    for (r, &ix) in indices.iter().enumerate() {
                        ga[r * c + ix] += g[r];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn bn_affine_grads(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    gain: Var,
    bias: Var,
    g: &[f64],
    xhat: &[f64],
    n: usize,
    f: usize,
) {
    if nodes[gain.0].value.requires_grad() {
        let gg = grads[gain.0].get_or_insert_with(|| vec![0.0; f]);
        for r in 0..n {
            for c in 0..f {
                gg[c] += g[r * f + c] * xhat[r * f + c];
            }
        }
    }
    if nodes[bias.0].value.requires_grad() {
        let gb = grads[bias.0].get_or_insert_with(|| vec![0.0; f]);
        for r in 0..n {
            for c in 0..f {
                gb[c] += g[r * f + c];
            }
        }
    }
}
