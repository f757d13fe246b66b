use std::sync::Arc;

use super::kernels::gemm;
use super::{Adjacency, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Relu {
        x: Var,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    EdgeGather {
        x: Var,
        sources: Arc<[usize]>,
        weights: Arc<[f32]>,
    },
    SegmentSum {
        x: Var,
        targets: Arc<[usize]>,
    },
    NeighborSum {
        x: Var,
        adj: Arc<Adjacency>,
    },
    GraphConv {
        h: Var,
        adj: Arc<Adjacency>,
        b_self: Var,
        w_neighbor: Var,
        bias: Var,
        aggregated: Vec<f32>,
        relu: bool,
    },
    SegmentMean {
        x: Var,
        ids: Arc<[usize]>,
        counts: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Record of executed operations, replayed in reverse by [`Tape::backward`].
///
/// Inputs always precede their outputs, so the node index order is the
/// execution order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    pool: BufferPool,
}

/// Buffers of cleared nodes, kept for reuse. A tape reused across training
/// steps then stops paying for fresh multi-megabyte allocations (and their
/// page faults) on every op.
#[derive(Debug, Default)]
struct BufferPool {
    free: Vec<Vec<f32>>,
}

impl BufferPool {
    const MIN_POOLED: usize = 4096;

    /// Empty buffer with room for `len` values; best fit from the pool.
    fn take(&mut self, len: usize) -> Vec<f32> {
        let best = self
            .free
            .iter()
            .enumerate()
            .filter(|(_, v)| v.capacity() >= len)
            .min_by_key(|(_, v)| v.capacity())
            .map(|(i, _)| i);
        match best {
            Some(i) => {
                let mut v = self.free.swap_remove(i);
                v.clear();
                v
            }
            None => Vec::with_capacity(len),
        }
    }

    fn zeroed(&mut self, len: usize) -> Vec<f32> {
        let mut v = self.take(len);
        v.resize(len, 0.0);
        v
    }

    fn give(&mut self, v: Vec<f32>) {
        if v.capacity() >= Self::MIN_POOLED {
            self.free.push(v);
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.dims().to_vec(),
        right: b.dims().to_vec(),
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    if t.ndim() != 2 {
        return Err(TensorError::Shape {
            op,
            left: t.dims().to_vec(),
            right: vec![],
        });
    }
    Ok((t.dims()[0], t.dims()[1]))
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

    /// Forgets every recorded node. Their buffers are kept for reuse by
    /// later ops on this tape.
    pub fn clear(&mut self) {
        for node in self.nodes.drain(..) {
            if let Op::GraphConv { aggregated, .. } = node.op {
                self.pool.give(aggregated);
            }
            self.pool.give(node.value.data);
            if let Some(g) = node.grad {
                self.pool.give(g);
            }
        }
    }

    /// Zeroes every gradient buffer without forgetting the recorded ops.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = check_matrix("matmul", ta)?;
        let (k2, n) = check_matrix("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = self.pool.zeroed(m * n);
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul { a, b }))
    }

    /// Elementwise sum. `b` may also be a bias row (`[d]` or `[1, d]`) that is
    /// broadcast over every row of a 2-D `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let broadcast = if ta.dims() == tb.dims() {
            false
        } else {
            let bias_row = match tb.dims() {
                [d] => Some(*d),
                [1, d] => Some(*d),
                _ => None,
            };
            match (ta.dims(), bias_row) {
                ([_, cols], Some(d)) if *cols == d => true,
                _ => return Err(shape_err("add", ta, tb)),
            }
        };
        let dims = ta.dims().to_vec();
        let mut out = self.pool.take(ta.numel());
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        out.extend_from_slice(ta.data());
        if broadcast {
            let bias = tb.data();
            for row in out.chunks_exact_mut(bias.len().max(1)) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        } else {
            out.iter_mut().zip(tb.data()).for_each(|(o, b)| *o += b);
        }
        let value = Tensor::new(dims, out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b, broadcast }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.pool.take(self.nodes[x.0].value.numel());
        let tx = &self.nodes[x.0].value;
        out.extend(tx.data().iter().map(|&v| v.max(0.0)));
        let value = Tensor {
            dims: tx.dims().to_vec(),
            data: out,
        };
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Relu { x })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ca) = check_matrix("concat_cols", ta)?;
        let (rb, cb) = check_matrix("concat_cols", tb)?;
        if ra != rb {
            return Err(shape_err("concat_cols", ta, tb));
        }
        let mut out = self.pool.take(ra * (ca + cb));
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        for i in 0..ra {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let value = Tensor::new(vec![ra, ca + cb], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::ConcatCols { a, b }))
    }

    /// One message row per edge: `out[e] = weights[e] * x[sources[e]]`.
    pub fn edge_gather(
        &mut self,
        x: Var,
        sources: &Arc<[usize]>,
        weights: &Arc<[f32]>,
    ) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (n, d) = check_matrix("edge_gather", tx)?;
        if sources.len() != weights.len() {
            return Err(TensorError::Shape {
                op: "edge_gather",
                left: vec![sources.len()],
                right: vec![weights.len()],
            });
        }
        let mut out = self.pool.take(sources.len() * d);
        let tx = &self.nodes[x.0].value;
        for (&s, &w) in sources.iter().zip(weights.iter()) {
            if s >= n {
                return Err(TensorError::Index {
                    op: "edge_gather",
                    index: s,
                    bound: n,
                });
            }
            out.extend(tx.row(s).iter().map(|v| w * v));
        }
        let value = Tensor::new(vec![sources.len(), d], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::EdgeGather {
                x,
                sources: Arc::clone(sources),
                weights: Arc::clone(weights),
            },
        ))
    }

    /// Row `v` of the result is the sum of the message rows targeting `v`.
    pub fn segment_sum(
        &mut self,
        messages: Var,
        targets: &Arc<[usize]>,
        num_nodes: usize,
    ) -> Result<Var, TensorError> {
        let tm = self.value(messages);
        let (e, d) = check_matrix("segment_sum", tm)?;
        if targets.len() != e {
            return Err(TensorError::Shape {
                op: "segment_sum",
                left: tm.dims().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut out = self.pool.zeroed(num_nodes * d);
        let tm = &self.nodes[messages.0].value;
        for (row, &t) in targets.iter().enumerate() {
            if t >= num_nodes {
                return Err(TensorError::Index {
                    op: "segment_sum",
                    index: t,
                    bound: num_nodes,
                });
            }
            out[t * d..(t + 1) * d]
                .iter_mut()
                .zip(tm.row(row))
                .for_each(|(o, m)| *o += m);
        }
        let value = Tensor::new(vec![num_nodes, d], out)?;
        let rg = self.any_grad(&[messages]);
        Ok(self.push(
            value,
            rg,
            Op::SegmentSum {
                x: messages,
                targets: Arc::clone(targets),
            },
        ))
    }

    /// Per-graph mean of node rows.
    pub fn segment_mean(
        &mut self,
        x: Var,
        graph_ids: &Arc<[usize]>,
        num_graphs: usize,
    ) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (n, d) = check_matrix("segment_mean", tx)?;
        if graph_ids.len() != n {
            return Err(TensorError::Shape {
                op: "segment_mean",
                left: tx.dims().to_vec(),
                right: vec![graph_ids.len()],
            });
        }
        let mut counts = vec![0usize; num_graphs];
        for &g in graph_ids.iter() {
            if g >= num_graphs {
                return Err(TensorError::Index {
                    op: "segment_mean",
                    index: g,
                    bound: num_graphs,
                });
            }
            counts[g] += 1;
        }
        if let Some(graph) = counts.iter().position(|&c| c == 0) {
            return Err(TensorError::EmptySegment { graph });
        }
        let mut sums = vec![0.0f64; num_graphs * d];
        for (i, &g) in graph_ids.iter().enumerate() {
            sums[g * d..(g + 1) * d]
                .iter_mut()
                .zip(tx.row(i))
                .for_each(|(s, v)| *s += f64::from(*v));
        }
        let out = sums
            .chunks_exact(d.max(1))
            .zip(&counts)
            .flat_map(|(row, &c)| row.iter().map(move |s| (s / c as f64) as f32))
            .collect();
        let value = Tensor::new(vec![num_graphs, d], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::SegmentMean {
                x,
                ids: Arc::clone(graph_ids),
                counts,
            },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, as a `[1]` tensor.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        let (g, c) = check_matrix("softmax_cross_entropy", tl)?;
        if labels.len() != g || g == 0 {
            return Err(TensorError::Shape {
                op: "softmax_cross_entropy",
                left: tl.dims().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut probs = Vec::with_capacity(g * c);
        let mut total = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(TensorError::Index {
                    op: "softmax_cross_entropy",
                    index: label,
                    bound: c,
                });
            }
            let row: Vec<f64> = tl.row(i).iter().map(|&v| f64::from(v)).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp() as f32));
        }
        let value = Tensor::scalar((total / g as f64) as f32);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `segment_sum(edge_gather(x))` in one pass, without materializing the
    /// per-message rows.
    pub fn neighbor_sum(&mut self, x: Var, adj: &Arc<Adjacency>) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (n, d) = check_matrix("neighbor_sum", tx)?;
        if n != adj.num_nodes() {
            return Err(TensorError::Shape {
                op: "neighbor_sum",
                left: tx.dims().to_vec(),
                right: vec![adj.num_nodes()],
            });
        }
        let mut out = self.pool.zeroed(n * d);
        adj.gather_sum(self.nodes[x.0].value.data(), d, &mut out);
        let value = Tensor::new(vec![n, d], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::NeighborSum {
                x,
                adj: Arc::clone(adj),
            },
        ))
    }

    /// `h·b_self + neighbor_sum(h)·w_neighbor + bias`, optionally followed by
    /// ReLU, as one node. Same values as composing the separate ops, without
    /// the intermediate copies.
    pub fn graph_conv(
        &mut self,
        h: Var,
        adj: &Arc<Adjacency>,
        b_self: Var,
        w_neighbor: Var,
        bias: Var,
        relu: bool,
    ) -> Result<Var, TensorError> {
        let (th, tb, tw, tbias) = (self.value(h), self.value(b_self), self.value(w_neighbor), self.value(bias));
        let (n, d_in) = check_matrix("graph_conv", th)?;
        let (bi, d_out) = check_matrix("graph_conv", tb)?;
        if n != adj.num_nodes() {
            return Err(TensorError::Shape {
                op: "graph_conv",
                left: th.dims().to_vec(),
                right: vec![adj.num_nodes()],
            });
        }
        if bi != d_in || tw.dims() != tb.dims() {
            return Err(shape_err("graph_conv", tb, tw));
        }
        if tbias.numel() != d_out || !matches!(tbias.dims(), [_] | [1, _]) {
            return Err(shape_err("graph_conv", tb, tbias));
        }
        let mut aggregated = self.pool.zeroed(n * d_in);
        let mut out = self.pool.zeroed(n * d_out);
        {
            let value = |v: Var| self.nodes[v.0].value.data();
            adj.gather_sum(value(h), d_in, &mut aggregated);
            gemm(n, d_in, d_out, value(h), false, value(b_self), false, &mut out, 0.0);
            gemm(n, d_in, d_out, &aggregated, false, value(w_neighbor), false, &mut out, 1.0);
            let b = value(bias);
            for row in out.chunks_exact_mut(d_out.max(1)) {
                row.iter_mut().zip(b).for_each(|(o, b)| *o += b);
            }
        }
        if relu {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let value = Tensor::new(vec![n, d_out], out)?;
        let rg = self.any_grad(&[h, b_self, w_neighbor, bias]);
        Ok(self.push(
            value,
            rg,
            Op::GraphConv {
                h,
                adj: Arc::clone(adj),
                b_self,
                w_neighbor,
                bias,
                aggregated,
                relu,
            },
        ))
    }

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let root = &mut self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.dims().to_vec()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        match root.grad.as_mut() {
            Some(g) => g[0] += 1.0,
            None => root.grad = Some(vec![1.0]),
        }

        for i in (0..=loss.0).rev() {
            let pool = &mut self.pool;
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (before[a.0].value.dims()[0], before[a.0].value.dims()[1]);
                    let n = before[b.0].value.dims()[1];
                    accumulate(before, pool, *a, |nodes, da| {
                        gemm(m, n, k, g, false, nodes[b.0].value.data(), true, da, 1.0);
                    });
                    accumulate(before, pool, *b, |nodes, db| {
                        gemm(k, m, n, nodes[a.0].value.data(), true, g, false, db, 1.0);
                    });
                }
                Op::Add { a, b, broadcast } => {
                    accumulate(before, pool, *a, |_, da| add_into(da, g));
                    if *broadcast {
                        accumulate(before, pool, *b, |_, db| {
                            for row in g.chunks_exact(db.len().max(1)) {
                                add_into(db, row);
                            }
                        });
                    } else {
                        accumulate(before, pool, *b, |_, db| add_into(db, g));
                    }
                }
                Op::Relu { x } => {
                    accumulate(before, pool, *x, |nodes, dx| {
                        let xs = nodes[x.0].value.data();
                        for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xs) {
                            if xv > 0.0 {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::ConcatCols { a, b } => {
                    let ca = before[a.0].value.cols();
                    let cb = before[b.0].value.cols();
                    accumulate(before, pool, *a, |_, da| {
                        for (drow, grow) in da.chunks_exact_mut(ca).zip(g.chunks_exact(ca + cb)) {
                            add_into(drow, &grow[..ca]);
                        }
                    });
                    accumulate(before, pool, *b, |_, db| {
                        for (drow, grow) in db.chunks_exact_mut(cb).zip(g.chunks_exact(ca + cb)) {
                            add_into(drow, &grow[ca..]);
                        }
                    });
                }
                Op::EdgeGather {
                    x,
                    sources,
                    weights,
                } => {
                    let d = before[x.0].value.cols();
                    accumulate(before, pool, *x, |_, dx| {
                        for (e, (&s, &w)) in sources.iter().zip(weights.iter()).enumerate() {
                            dx[s * d..(s + 1) * d]
                                .iter_mut()
                                .zip(&g[e * d..(e + 1) * d])
                                .for_each(|(o, gv)| *o += w * gv);
                        }
                    });
                }
                Op::SegmentSum { x, targets } => {
                    let d = before[x.0].value.cols();
                    accumulate(before, pool, *x, |_, dx| {
                        for (e, &t) in targets.iter().enumerate() {
                            add_into(&mut dx[e * d..(e + 1) * d], &g[t * d..(t + 1) * d]);
                        }
                    });
                }
                Op::NeighborSum { x, adj } => {
                    let d = before[x.0].value.cols();
                    accumulate(before, pool, *x, |_, dx| adj.scatter_back(g, d, dx));
                }
                Op::GraphConv {
                    h,
                    adj,
                    b_self,
                    w_neighbor,
                    bias,
                    aggregated,
                    relu,
                } => {
                    let (n, d_in) = (before[h.0].value.rows(), before[h.0].value.cols());
                    let d_out = node.value.cols();
                    let masked = relu.then(|| {
                        let mut m = pool.take(g.len());
                        m.extend(g.iter().zip(node.value.data()).map(|(&gv, &y)| if y > 0.0 { gv } else { 0.0 }));
                        m
                    });
                    let g = masked.as_deref().unwrap_or(g);
                    accumulate(before, pool, *bias, |_, db| {
                        for row in g.chunks_exact(d_out.max(1)) {
                            add_into(db, row);
                        }
                    });
                    accumulate(before, pool, *w_neighbor, |_, dw| {
                        gemm(d_in, n, d_out, aggregated, true, g, false, dw, 1.0);
                    });
                    if before[h.0].requires_grad {
                        let mut through = pool.zeroed(n * d_in);
                        let w = before[w_neighbor.0].value.data();
                        gemm(n, d_out, d_in, g, false, w, true, &mut through, 1.0);
                        accumulate(before, pool, *h, |nodes, dh| {
                            adj.scatter_back(&through, d_in, dh);
                            gemm(n, d_out, d_in, g, false, nodes[b_self.0].value.data(), true, dh, 1.0);
                        });
                        pool.give(through);
                    }
                    accumulate(before, pool, *b_self, |nodes, db| {
                        gemm(d_in, n, d_out, nodes[h.0].value.data(), true, g, false, db, 1.0);
                    });
                    if let Some(m) = masked {
                        pool.give(m);
                    }
                }
                Op::SegmentMean { x, ids, counts } => {
                    let d = before[x.0].value.cols();
                    accumulate(before, pool, *x, |_, dx| {
                        for (n, &gid) in ids.iter().enumerate() {
                            let scale = 1.0 / counts[gid] as f32;
                            dx[n * d..(n + 1) * d]
                                .iter_mut()
                                .zip(&g[gid * d..(gid + 1) * d])
                                .for_each(|(o, gv)| *o += gv * scale);
                        }
                    });
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let rows = labels.len();
                    let c = probs.len() / rows;
                    let scale = g[0] / rows as f32;
                    accumulate(before, pool, *logits, |_, dl| {
                        for (i, &label) in labels.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == label { 1.0 } else { 0.0 };
                                dl[i * c + j] += (probs[i * c + j] - onehot) * scale;
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Runs `f` on the gradient buffer of `target` (allocated on first use),
/// skipping targets that do not require a gradient. The buffer is moved out
/// while `f` runs so `f` may still read any node's forward value.
fn accumulate(
    nodes: &mut [Node],
    pool: &mut BufferPool,
    target: Var,
    f: impl FnOnce(&[Node], &mut [f32]),
) {
    let node = &mut nodes[target.0];
    if !node.requires_grad {
        return;
    }
    let mut buf = node
        .grad
        .take()
        .unwrap_or_else(|| pool.zeroed(node.value.numel()));
    f(nodes, &mut buf);
    nodes[target.0].grad = Some(buf);
}
