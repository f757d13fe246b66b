//! f64 reference classifier, written without the crate's tape or kernels:
//! each message is transformed on its own and then summed, and graphs are
//! never batched. Finite differences run against this reference.
#![allow(dead_code)]

use debugcn_core::graph::{build_conv_2d, build_conv_flat, build_fc_bipartite, FeatureConfigName, LayerGraph};
use debugcn_core::model::{GcnModel, GraphConvLayer, Modality, ModelConfig};
use debugcn_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).iter().map(|&v| f64::from(v)).collect()).collect()
}

pub struct RefGraph {
    pub features: Mat,
    /// Directed messages `(from, to, weight)`, both directions of every edge.
    pub messages: Vec<(usize, usize, f64)>,
}

impl RefGraph {
    pub fn new(g: &LayerGraph) -> Self {
        let mut messages = Vec::new();
        for (&(u, v), &w) in g.edges.iter().zip(&g.edge_weights) {
            messages.push((u, v, f64::from(w)));
            messages.push((v, u, f64::from(w)));
        }
        Self {
            features: to_mat(&g.node_features),
            messages,
        }
    }

    fn len(&self) -> usize {
        self.features.len()
    }

    /// `Σ_{u→v} w · x[u]` for a single column.
    fn aggregate(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for &(u, v, w) in &self.messages {
            out[v] += w * x[u];
        }
        out
    }
}

pub struct RefLayer {
    w: Mat,
    b: Mat,
    bias: Vec<f64>,
}

impl RefLayer {
    fn new(l: &GraphConvLayer) -> Self {
        Self {
            w: to_mat(&l.w_neighbor),
            b: to_mat(&l.b_self),
            bias: l.bias.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    fn width(&self) -> usize {
        self.bias.len()
    }

    fn pre_activation(&self, g: &RefGraph, h: &Mat) -> Mat {
        let d_out = self.width();
        let times = |x: &[f64], m: &Mat| -> Vec<f64> {
            let mut out = vec![0.0; d_out];
            for (xv, row) in x.iter().zip(m) {
                for (o, r) in out.iter_mut().zip(row) {
                    *o += xv * r;
                }
            }
            out
        };
        let mut out: Mat = h
            .iter()
            .map(|x| {
                let mut y = times(x, &self.b);
                y.iter_mut().zip(&self.bias).for_each(|(y, b)| *y += b);
                y
            })
            .collect();
        for &(u, v, w) in &g.messages {
            let msg = times(&h[u], &self.w);
            out[v].iter_mut().zip(msg).for_each(|(o, m)| *o += w * m);
        }
        out
    }
}

fn relu(m: &Mat) -> Mat {
    m.iter().map(|r| r.iter().map(|&v| v.max(0.0)).collect()).collect()
}

fn mean_rows(m: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; m[0].len()];
    for r in m {
        out.iter_mut().zip(r).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= m.len() as f64);
    out
}

fn flips(before: f64, after: f64) -> bool {
    (before > 0.0) != (after > 0.0)
}

/// Step multipliers tried in turn when a perturbation crosses a ReLU kink.
pub const KINK_RETRY_STEPS: [f64; 3] = [1.0, 1e-2, 1e-4];

pub struct RefModel {
    pub fc: Vec<RefLayer>,
    pub conv: Option<Vec<RefLayer>>,
    pub head_w: Mat,
    pub head_bias: Vec<f64>,
}

/// Cached activations of one branch on one graph.
struct BranchState {
    /// Layer inputs `H_{l-1}` and their aggregates `S·H_{l-1}`, column major.
    inputs: Vec<Mat>,
    aggregated: Vec<Mat>,
    pre: Vec<Mat>,
    post: Vec<Mat>,
    pooled: Vec<f64>,
}

fn columns(m: &Mat) -> Mat {
    (0..m[0].len()).map(|c| m.iter().map(|r| r[c]).collect()).collect()
}

impl BranchState {
    fn new(layers: &[RefLayer], g: &RefGraph) -> Self {
        let mut h = g.features.clone();
        let mut s = Self {
            inputs: vec![],
            aggregated: vec![],
            pre: vec![],
            post: vec![],
            pooled: vec![],
        };
        for layer in layers {
            let cols = columns(&h);
            s.aggregated.push(cols.iter().map(|c| g.aggregate(c)).collect());
            s.inputs.push(cols);
            let p = layer.pre_activation(g, &h);
            h = relu(&p);
            s.pre.push(p);
            s.post.push(h.clone());
        }
        s.pooled = mean_rows(&h);
        s
    }

    /// Pooled output after adding `delta` to column `j` of layer `l`'s
    /// pre-activation, and whether any ReLU input changed sign on the way.
    fn perturbed(&self, layers: &[RefLayer], g: &RefGraph, l: usize, j: usize, delta: &[f64]) -> (Vec<f64>, bool) {
        let n = g.len();
        let mut kink = false;
        let col: Vec<f64> = (0..n)
            .map(|v| {
                let p = self.pre[l][v][j] + delta[v];
                kink |= flips(self.pre[l][v][j], p);
                p.max(0.0)
            })
            .collect();
        if l + 1 == layers.len() {
            let mut pooled = self.pooled.clone();
            pooled[j] = col.iter().sum::<f64>() / n as f64;
            return (pooled, kink);
        }
        // the next layer sees a change in one input column only
        let d: Vec<f64> = (0..n).map(|v| col[v] - self.post[l][v][j]).collect();
        let sd = g.aggregate(&d);
        let next = &layers[l + 1];
        let mut h = self.post[l + 1].clone();
        for v in 0..n {
            for c in 0..next.width() {
                let p = self.pre[l + 1][v][c] + d[v] * next.b[j][c] + sd[v] * next.w[j][c];
                kink |= flips(self.pre[l + 1][v][c], p);
                h[v][c] = p.max(0.0);
            }
        }
        for m in l + 2..layers.len() {
            let p = layers[m].pre_activation(g, &h);
            for (pr, br) in p.iter().zip(&self.pre[m]) {
                kink |= pr.iter().zip(br).any(|(&a, &b)| flips(b, a));
            }
            h = relu(&p);
        }
        (mean_rows(&h), kink)
    }
}

pub fn cross_entropy(logits: [f64; 2], label: usize) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[label]
}

impl RefModel {
    pub fn new(model: &GcnModel) -> Self {
        Self {
            fc: model.fc_branch.iter().map(RefLayer::new).collect(),
            conv: model
                .conv_branch
                .as_ref()
                .map(|ls| ls.iter().map(RefLayer::new).collect()),
            head_w: to_mat(&model.head_w),
            head_bias: model.head_bias.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    fn branch(layers: &[RefLayer], g: &RefGraph) -> Vec<f64> {
        let mut h = g.features.clone();
        for layer in layers {
            h = relu(&layer.pre_activation(g, &h));
        }
        mean_rows(&h)
    }

    fn head(&self, pooled: &[f64]) -> [f64; 2] {
        let mut out = [self.head_bias[0], self.head_bias[1]];
        for (p, row) in pooled.iter().zip(&self.head_w) {
            out[0] += p * row[0];
            out[1] += p * row[1];
        }
        out
    }

    pub fn logits(&self, fc: &RefGraph, conv: Option<&RefGraph>) -> [f64; 2] {
        let mut pooled = Self::branch(&self.fc, fc);
        if let (Some(layers), Some(g)) = (&self.conv, conv) {
            pooled.extend(Self::branch(layers, g));
        }
        self.head(&pooled)
    }

    /// Central differences of the single-sample loss for every parameter,
    /// in `GcnModel::parameters` order. When `±h` moves some ReLU input
    /// across zero the step is shrunk; `None` marks entries where every step
    /// in `KINK_RETRY_STEPS` still does.
    pub fn finite_differences(&self, fc: &RefGraph, conv: Option<&RefGraph>, label: usize, h: f64) -> Vec<Vec<Option<f64>>> {
        let fc_state = BranchState::new(&self.fc, fc);
        let conv_state = self.conv.as_ref().zip(conv).map(|(ls, g)| BranchState::new(ls, g));
        let base_fc = fc_state.pooled.clone();
        let base_conv = conv_state.as_ref().map(|s| s.pooled.clone()).unwrap_or_default();
        let loss_of = |pooled: &[f64]| cross_entropy(self.head(pooled), label);
        let joined = |fc: &[f64], conv: &[f64]| [fc, conv].concat();

        let mut out = Vec::new();
        let branches = [(Some(&self.fc), Some(&fc_state), Some(fc), true), (self.conv.as_ref(), conv_state.as_ref(), conv, false)];
        for (layers, state, g, is_fc) in branches {
            let (Some(layers), Some(state), Some(g)) = (layers, state, g) else {
                continue;
            };
            for (l, layer) in layers.iter().enumerate() {
                let d_in = layer.w.len();
                let d_out = layer.width();
                let n = g.len();
                let central = |j: usize, dir: &dyn Fn(usize) -> f64| {
                    KINK_RETRY_STEPS.iter().find_map(|&shrink| {
                        let step = h * shrink;
                        let mut loss = [0.0; 2];
                        let mut kink = false;
                        for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                            let delta: Vec<f64> = (0..n).map(|v| sign * step * dir(v)).collect();
                            let (pooled, k) = state.perturbed(layers, g, l, j, &delta);
                            kink |= k;
                            loss[s] = if is_fc { loss_of(&joined(&pooled, &base_conv)) } else { loss_of(&joined(&base_fc, &pooled)) };
                        }
                        (!kink).then(|| (loss[0] - loss[1]) / (2.0 * step))
                    })
                };
                let mut w = Vec::with_capacity(d_in * d_out);
                let mut b = Vec::with_capacity(d_in * d_out);
                for k in 0..d_in {
                    for j in 0..d_out {
                        w.push(central(j, &|v| state.aggregated[l][k][v]));
                        b.push(central(j, &|v| state.inputs[l][k][v]));
                    }
                }
                let bias = (0..d_out).map(|j| central(j, &|_| 1.0)).collect();
                out.extend([w, b, bias]);
            }
        }

        let pooled = joined(&base_fc, &base_conv);
        let logits = self.head(&pooled);
        let perturbed = |change: &dyn Fn(&mut [f64; 2], f64)| {
            let mut up = logits;
            let mut down = logits;
            change(&mut up, h);
            change(&mut down, -h);
            Some((cross_entropy(up, label) - cross_entropy(down, label)) / (2.0 * h))
        };
        let mut head_w = Vec::new();
        for p in &pooled {
            for c in 0..2 {
                head_w.push(perturbed(&|l, s| l[c] += s * p));
            }
        }
        let head_bias = (0..2).map(|c| perturbed(&|l, s| l[c] += s)).collect();
        out.extend([head_w, head_bias]);
        out
    }
}

/// Relative error with a floor on the denominator, so entries that are zero
/// up to float32 rounding do not dominate.
pub fn relative_error(analytic: f64, reference: f64, floor: f64) -> f64 {
    (analytic - reference).abs() / analytic.abs().max(reference.abs()).max(floor)
}

/// Entries smaller than this fraction of the largest gradient are compared
/// against it instead of themselves: float32 accumulation leaves about
/// 1e-7 of the gradient scale as absolute noise.
pub const FLOOR_FRACTION: f64 = 1e-3;

/// Worst relative error, and the number of entries where finite
/// differences could not avoid a kink.
pub fn compare_gradients(grads: &[Vec<f32>], fd: &[Vec<Option<f64>>]) -> (f64, usize) {
    let scale = fd.iter().flatten().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for (a, r) in grads.iter().zip(fd) {
        assert_eq!(a.len(), r.len());
        for (&a, r) in a.iter().zip(r) {
            match r {
                Some(r) => worst = worst.max(relative_error(f64::from(a), *r, FLOOR_FRACTION * scale)),
                None => skipped += 1,
            }
        }
    }
    (worst, skipped)
}

/// A 6-node fc graph (2×4 weights) and, for conv modalities, an 8-node conv
/// graph, with a seeded model whose biases are non-zero.
pub fn small_fixture(seed: u64, modality: Modality) -> (GcnModel, LayerGraph, Option<LayerGraph>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |n: usize, scale: f32| -> Vec<f32> { (0..n).map(|_| rng.random_range(-scale..scale)).collect() };
    let fc = Tensor::new(vec![2, 4], uniform(8, 1.0)).unwrap();
    let fc = build_fc_bipartite(&fc, &FeatureConfigName::Gcn16b.into()).unwrap();
    let conv = match modality {
        Modality::FcOnly => None,
        Modality::FcPlusFlat => Some(build_conv_flat(&Tensor::new(vec![8, 1, 2, 2], uniform(32, 1.0)).unwrap()).unwrap()),
        Modality::FcPlus2d => Some(build_conv_2d(&Tensor::new(vec![1, 2, 2, 2], uniform(8, 1.0)).unwrap()).unwrap()),
    };
    let config = ModelConfig {
        fc_input: fc.feature_dim(),
        conv_input: conv.as_ref().map(LayerGraph::feature_dim),
        feature_config: FeatureConfigName::Gcn16b,
        modality,
    };
    let mut model = GcnModel::new(config, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37)).unwrap();
    let layers = model.fc_branch.iter_mut().chain(model.conv_branch.iter_mut().flatten());
    for layer in layers {
        let n = layer.bias.numel();
        layer.bias.data_mut().copy_from_slice(&uniform(n, 0.1));
    }
    let n = model.head_bias.numel();
    model.head_bias.data_mut().copy_from_slice(&uniform(n, 0.1));
    (model, fc, conv)
}

/// Feature groups per configuration, transcribed from the configuration
/// table rather than derived from `FeatureConfig`.
fn layout(name: FeatureConfigName) -> &'static [&'static str] {
    match name {
        FeatureConfigName::Gcn5 => &["1", "side", "mean", "min", "max"],
        FeatureConfigName::Gcn7 => &["1", "side", "mean", "min", "max", "sum", "degree"],
        FeatureConfigName::Gcn16a => &["1", "side", "mean", "min", "max", "counts", "bounds"],
        FeatureConfigName::Gcn16b => &["1", "mean", "min", "max", "sum", "counts", "bounds"],
        FeatureConfigName::Gcn18 => &["1", "side", "mean", "min", "max", "sum", "counts", "bounds", "degree"],
    }
}

pub enum Expect {
    Exact(f64),
    Close(f64),
}

/// Brute-force features of `node`: incident weights are found by scanning
/// the whole edge list.
pub fn feature_oracle(g: &LayerGraph, node: usize, name: FeatureConfigName) -> Vec<Expect> {
    let w: Vec<f64> = g
        .edges
        .iter()
        .zip(&g.edge_weights)
        .filter(|(&(u, v), _)| u == node || v == node)
        .map(|(_, &w)| f64::from(w))
        .collect();
    let min = w.iter().copied().fold(f64::INFINITY, f64::min);
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = w.iter().sum();
    let bounds: Vec<f64> = (0..=5).map(|i| min + i as f64 * (max - min) / 5.0).collect();
    let mut counts = [0usize; 5];
    for &x in &w {
        let bin = if x == max {
            if min == max { 0 } else { 4 }
        } else {
            (0..5).find(|&i| bounds[i] <= x && x < bounds[i + 1]).unwrap()
        };
        counts[bin] += 1;
    }
    let side = if node < g.num_left.unwrap() { 0.0 } else { 1.0 };
    let mut out = Vec::new();
    for group in layout(name) {
        match *group {
            "1" => out.push(Expect::Exact(1.0)),
            "side" => out.push(Expect::Exact(side)),
            "mean" => out.push(Expect::Close(sum / w.len() as f64)),
            "min" => out.push(Expect::Exact(min)),
            "max" => out.push(Expect::Exact(max)),
            "sum" => out.push(Expect::Close(sum)),
            "counts" => out.extend(counts.iter().map(|&c| Expect::Exact(c as f64))),
            "bounds" => out.extend(bounds.iter().map(|&b| Expect::Close(b))),
            "degree" => out.push(Expect::Exact(w.len() as f64)),
            _ => unreachable!(),
        }
    }
    out
}
