//! A minimal reverse-mode tape over the fused operations a post-norm
//! Transformer needs.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological sort; `backward` walks it in reverse.

use rand::Rng;

use crate::tensor::{
    attention_fwd, gemm, layer_norm_fwd, linear_fwd, AttnShape, ParamId, ParamStore, Real, View,
    ViewMut,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Embed { table: Var, ids: Vec<u32>, scale: T },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, xhat: Vec<T>, rstd: Vec<T>, bias: Var },
    Dropout { x: Var, mask: Vec<T> },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<T> },
    SmoothedCe { logits: Var, targets: Vec<u32>, eps: T, pad: u32, probs: Vec<T> },
}

struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Vec<T>, rows: usize, cols: usize, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value, rows, cols, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        match self.nodes[v.0].op {
            Op::Param(id) => &self.params.get(id).data,
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn input(&mut self, value: Vec<T>, rows: usize, cols: usize) -> Var {
        self.push(value, rows, cols, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.params.get(id);
        let (rows, cols) = (t.rows, t.cols);
        self.nodes.push(Node {
            value: Vec::new(),
            rows,
            cols,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Row `r` is `table[ids[r]] * scale + pos[positions[r]]`, where `pos`
    /// is a constant row-major table with the same width as `table`.
    pub fn embed(&mut self, table: Var, ids: &[u32], positions: &[usize], pos: &[T], scale: T) -> Var {
        let (vocab, d) = self.shape(table);
        let tv = self.value(table);
        let mut out = vec![T::zero(); ids.len() * d];
        for (r, (&id, &p)) in ids.iter().zip(positions).enumerate() {
            assert!((id as usize) < vocab, "token id {id} >= {vocab}");
            let src = &tv[id as usize * d..(id as usize + 1) * d];
            let pe = &pos[p * d..(p + 1) * d];
            for c in 0..d {
                out[r * d + c] = src[c] * scale + pe[c];
            }
        }
        self.push(
            out,
            ids.len(),
            d,
            Op::Embed {
                table,
                ids: ids.to_vec(),
                scale,
            },
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (rows, inp) = self.shape(x);
        let (w_in, out) = self.shape(w);
        assert_eq!(inp, w_in, "linear input width");
        let y = linear_fwd(self.value(x), rows, inp, self.value(w), out, b.map(|b| self.value(b)));
        self.push(y, rows, out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let (rows, cols) = self.shape(a);
        let y = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.push(y, rows, cols, Op::Add(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let y = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        self.push(y, rows, cols, Op::Relu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let (y, xhat, rstd) = layer_norm_fwd(self.value(x), cols, self.value(gain), self.value(bias));
        self.push(y, rows, cols, Op::LayerNorm { x, gain, xhat, rstd, bias })
    }

    /// Inverted dropout; a no-op when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let (rows, cols) = self.shape(x);
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let y = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.push(y, rows, cols, Op::Dropout { x, mask })
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Var {
        assert_eq!(shape.k_stride, shape.lk, "graph attention needs dense keys");
        let (out, probs) = attention_fwd(self.value(q), self.value(k), self.value(v), &shape);
        let rows = shape.batch * shape.lq;
        let cols = shape.d_model;
        self.push(out, rows, cols, Op::Attention { q, k, v, shape, probs })
    }

    /// Summed label-smoothed cross-entropy over rows whose target is not `pad`.
    pub fn smoothed_ce(&mut self, logits: Var, targets: &[u32], eps: f64, pad: u32) -> Var {
        let (rows, vocab) = self.shape(logits);
        assert_eq!(rows, targets.len(), "one target per logit row");
        let z = self.value(logits);
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = 0.0f64;
        let uniform = eps / vocab as f64;
        for r in 0..rows {
            if targets[r] == pad {
                continue;
            }
            let row = &z[r * vocab..(r + 1) * vocab];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, x| a.max(x.as_f64()));
            let sum: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
            let lse = max + sum.ln();
            let mut sum_logp = 0.0;
            for (c, x) in row.iter().enumerate() {
                let lp = x.as_f64() - lse;
                sum_logp += lp;
                probs[r * vocab + c] = T::of(lp.exp());
            }
            let target_lp = row[targets[r] as usize].as_f64() - lse;
            total -= (1.0 - eps) * target_lp + uniform * sum_logp;
        }
        self.push(
            vec![T::of(total)],
            1,
            1,
            Op::SmoothedCe {
                logits,
                targets: targets.to_vec(),
                eps: T::of(eps),
                pad,
                probs,
            },
        )
    }

    /// Reverse pass from the scalar `root`, seeded with `seed`. Returns one
    /// gradient buffer per parameter (zeros for parameters not on the tape).
    pub fn backward(&self, root: Var, seed: T) -> Vec<Vec<T>> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![seed; self.nodes[root.0].rows * self.nodes[root.0].cols]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                Op::Embed { table, ids, scale } => {
                    let d = node.cols;
                    let gt = self.grad_buf(&mut grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        for c in 0..d {
                            dst[c] = dst[c] + g[r * d + c] * *scale;
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let (rows, out) = (node.rows, node.cols);
                    let inp = self.nodes[x.0].cols;
                    {
                        let wv = self.value(*w);
                        let gx = self.grad_buf(&mut grads, *x);
                        gemm(rows, out, inp, T::one(), View::rows(&g, 0, out), View::trans(wv, 0, out), T::one(), gx, ViewMut::rows(0, inp));
                    }
                    {
                        let xv = self.value(*x);
                        let gw = self.grad_buf(&mut grads, *w);
                        gemm(inp, rows, out, T::one(), View::trans(xv, 0, inp), View::rows(&g, 0, out), T::one(), gw, ViewMut::rows(0, out));
                    }
                    if let Some(b) = b {
                        let gb = self.grad_buf(&mut grads, *b);
                        for r in 0..rows {
                            for c in 0..out {
                                gb[c] = gb[c] + g[r * out + c];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        let gv = self.grad_buf(&mut grads, *v);
                        for (x, y) in gv.iter_mut().zip(&g) {
                            *x = *x + *y;
                        }
                    }
                }
                Op::Relu(x) => {
                    let y = &node.value;
                    let gx = self.grad_buf(&mut grads, *x);
                    for i in 0..g.len() {
                        if y[i] > T::zero() {
                            gx[i] = gx[i] + g[i];
                        }
                    }
                }
                Op::LayerNorm { x, gain, xhat, rstd, bias } => {
                    let cols = node.cols;
                    let rows = node.rows;
                    let gv = self.value(*gain).to_vec();
                    {
                        let gg = self.grad_buf(&mut grads, *gain);
                        for r in 0..rows {
                            for c in 0..cols {
                                gg[c] = gg[c] + g[r * cols + c] * xhat[r * cols + c];
                            }
                        }
                    }
                    {
                        let gb = self.grad_buf(&mut grads, *bias);
                        for r in 0..rows {
                            for c in 0..cols {
                                gb[c] = gb[c] + g[r * cols + c];
                            }
                        }
                    }
                    let n = T::of(cols as f64);
                    let gx = self.grad_buf(&mut grads, *x);
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..cols {
                            let dh = g[r * cols + c] * gv[c];
                            dxhat[c] = dh;
                            mean_d = mean_d + dh;
                            mean_dx = mean_dx + dh * xhat[r * cols + c];
                        }
                        mean_d = mean_d / n;
                        mean_dx = mean_dx / n;
                        for c in 0..cols {
                            let v = rstd[r] * (dxhat[c] - mean_d - xhat[r * cols + c] * mean_dx);
                            gx[r * cols + c] = gx[r * cols + c] + v;
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = self.grad_buf(&mut grads, *x);
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * mask[i];
                    }
                }
                Op::Attention { q, k, v, shape, probs } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, shape, probs);
                }
                Op::SmoothedCe { logits, targets, eps, pad, probs } => {
                    let (rows, vocab) = self.shape(*logits);
                    let uniform = *eps / T::of(vocab as f64);
                    let s = g[0];
                    let gl = self.grad_buf(&mut grads, *logits);
                    for r in 0..rows {
                        if targets[r] == *pad {
                            continue;
                        }
                        for c in 0..vocab {
                            let mut q = uniform;
                            if c == targets[r] as usize {
                                q = q + T::one() - *eps;
                            }
                            gl[r * vocab + c] = gl[r * vocab + c] + s * (probs[r * vocab + c] - q);
                        }
                    }
                }
            }
        }

        let mut out = self.params.zeros_like();
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(var) = var {
                if let Some(g) = grads[var.0].take() {
                    out[pid] = g;
                }
            }
        }
        out
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let n = &self.nodes[v.0];
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n.rows * n.cols])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, grads: &mut [Option<Vec<T>>], g: &[T], q: Var, k: Var, v: Var, s: &AttnShape, probs: &[T]) {
        let d = s.d_model;
        let dh = s.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![T::zero(); qv.len()];
        let mut gk = vec![T::zero(); kv.len()];
        let mut gvv = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); s.lq * s.lk];
        for b in 0..s.batch {
            let nk = s.key_len[b].min(s.lk);
            if nk == 0 {
                continue;
            }
            for h in 0..s.heads {
                let pb = s.prob_block(b, h);
                let qoff = b * s.lq * d + h * dh;
                let koff = b * s.k_stride * d + h * dh;
                // dP = dO * V^T
                gemm(s.lq, dh, nk, T::one(), View::rows(g, qoff, d), View::trans(vv, koff, d), T::zero(), &mut dp, ViewMut::rows(0, s.lk));
                // dV += P^T * dO
                gemm(nk, s.lq, dh, T::one(), View::trans(probs, pb, s.lk), View::rows(g, qoff, d), T::one(), &mut gvv, ViewMut::rows(koff, d));
                // dS = P * (dP - rowdot(dP, P)) * scale
                for i in 0..s.lq {
                    let prow = &probs[pb + i * s.lk..pb + i * s.lk + nk];
                    let drow = &mut dp[i * s.lk..i * s.lk + nk];
                    let dot = prow.iter().zip(drow.iter()).fold(T::zero(), |a, (&p, &x)| a + p * x);
                    for j in 0..nk {
                        drow[j] = prow[j] * (drow[j] - dot) * scale;
                    }
                }
                // dQ = dS * K ; dK += dS^T * Q
                gemm(s.lq, nk, dh, T::one(), View::rows(&dp, 0, s.lk), View::rows(kv, koff, d), T::one(), &mut gq, ViewMut::rows(qoff, d));
                gemm(nk, s.lq, dh, T::one(), View::trans(&dp, 0, s.lk), View::rows(qv, qoff, d), T::one(), &mut gk, ViewMut::rows(koff, d));
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gvv)] {
            let dst = self.grad_buf(grads, var);
            for (x, y) in dst.iter_mut().zip(buf) {
                *x = *x + y;
            }
        }
    }
}
