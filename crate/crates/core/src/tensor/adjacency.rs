use super::TensorError;

/// Compressed rows: entries of row `r` are `index/weight[offsets[r]..offsets[r + 1]]`.
#[derive(Debug, Clone, PartialEq)]
struct Csr {
    offsets: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<f32>,
}

impl Csr {
    /// Block-diagonal union: part `k`'s indices are shifted by the row
    /// count of the parts before it.
    fn concat<'a>(parts: impl Iterator<Item = (&'a Csr, usize)>) -> Self {
        let mut out = Csr {
            offsets: vec![0],
            index: Vec::new(),
            weight: Vec::new(),
        };
        let mut shift = 0;
        for (part, rows) in parts {
            let base = out.index.len();
            out.offsets.extend(part.offsets[1..].iter().map(|&o| o + base));
            out.index.extend(part.index.iter().map(|&i| i + shift));
            out.weight.extend_from_slice(&part.weight);
            shift += rows;
        }
        out
    }

    /// Groups `(key, value, weight)` triples by key, keeping input order
    /// within a group.
    fn group(num_rows: usize, keys: &[usize], values: &[usize], weights: &[f32]) -> Self {
        let mut offsets = vec![0usize; num_rows + 1];
        for &k in keys {
            offsets[k + 1] += 1;
        }
        for r in 0..num_rows {
            offsets[r + 1] += offsets[r];
        }
        let mut fill = offsets.clone();
        let mut index = vec![0; keys.len()];
        let mut weight = vec![0.0; keys.len()];
        for ((&k, &v), &w) in keys.iter().zip(values).zip(weights) {
            index[fill[k]] = v;
            weight[fill[k]] = w;
            fill[k] += 1;
        }
        Self {
            offsets,
            index,
            weight,
        }
    }

    /// `out[r] += Σ weight · x[index]` for every row, rows of width `d`.
    fn apply(&self, x: &[f32], d: usize, out: &mut [f32]) {
        assert_eq!(out.len(), (self.offsets.len() - 1) * d);
        assert!(self.index.iter().all(|&i| (i + 1) * d <= x.len()));
        #[cfg(target_arch = "x86_64")]
        if is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 is present; indices were checked above.
            unsafe { self.apply_avx2(x, d, out) };
            return;
        }
        // SAFETY: indices were checked above.
        unsafe { self.apply_strips(x, d, out) };
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn apply_avx2(&self, x: &[f32], d: usize, out: &mut [f32]) {
        self.apply_strips(x, d, out);
    }

    #[inline(always)]
    unsafe fn apply_strips(&self, x: &[f32], d: usize, out: &mut [f32]) {
        match d {
            _ if d % 64 == 0 => self.apply_strip::<64>(x, d, out),
            _ if d % 32 == 0 => self.apply_strip::<32>(x, d, out),
            _ => self.apply_strip::<16>(x, d, out),
        }
    }

    /// Columns are processed in fixed-width strips so each strip's partial
    /// sum stays in registers across the row's entries. Plain multiply-add
    /// (no fusion) keeps results identical to gathering then summing.
    #[inline(always)]
    unsafe fn apply_strip<const STRIP: usize>(&self, x: &[f32], d: usize, out: &mut [f32]) {
        let xp = x.as_ptr();
        for (r, row) in out.chunks_exact_mut(d).enumerate() {
            let span = self.offsets[r]..self.offsets[r + 1];
            let index = &self.index[span.clone()];
            let weight = &self.weight[span];
            let mut c0 = 0;
            while c0 + STRIP <= d {
                let mut acc = [0.0f32; STRIP];
                for (&i, &w) in index.iter().zip(weight) {
                    let src = (xp.wrapping_add(i.wrapping_mul(d).wrapping_add(c0)) as *const [f32; STRIP])
                        .read_unaligned();
                    for (a, v) in acc.iter_mut().zip(src) {
                        *a += w * v;
                    }
                }
                for (o, a) in row[c0..c0 + STRIP].iter_mut().zip(acc) {
                    *o += a;
                }
                c0 += STRIP;
            }
            for c in c0..d {
                let mut acc = 0.0f32;
                for (&i, &w) in index.iter().zip(weight) {
                    acc += w * x[i * d + c];
                }
                row[c] += acc;
            }
        }
    }
}

/// Weighted directed messages `sources[e] → targets[e]` over `num_nodes`
/// nodes, stored for both the forward sum and its transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    num_nodes: usize,
    num_messages: usize,
    by_target: Csr,
    by_source: Csr,
}

impl Adjacency {
    pub fn new(
        num_nodes: usize,
        sources: &[usize],
        targets: &[usize],
        weights: &[f32],
    ) -> Result<Self, TensorError> {
        if sources.len() != targets.len() || sources.len() != weights.len() {
            return Err(TensorError::Shape {
                op: "adjacency",
                left: vec![sources.len(), targets.len()],
                right: vec![weights.len()],
            });
        }
        if let Some(&bad) = sources.iter().chain(targets).find(|&&v| v >= num_nodes) {
            return Err(TensorError::Index {
                op: "adjacency",
                index: bad,
                bound: num_nodes,
            });
        }
        Ok(Self {
            num_nodes,
            num_messages: sources.len(),
            by_target: Csr::group(num_nodes, targets, sources, weights),
            by_source: Csr::group(num_nodes, sources, targets, weights),
        })
    }

    /// Disjoint union; node `v` of part `k` becomes node `v + Σ_{j<k} n_j`.
    /// Equal to building from the concatenated, offset message lists.
    pub fn concat(parts: &[&Adjacency]) -> Self {
        Self {
            num_nodes: parts.iter().map(|p| p.num_nodes).sum(),
            num_messages: parts.iter().map(|p| p.num_messages).sum(),
            by_target: Csr::concat(parts.iter().map(|p| (&p.by_target, p.num_nodes))),
            by_source: Csr::concat(parts.iter().map(|p| (&p.by_source, p.num_nodes))),
        }
    }

    /// `(source, target, weight)` triples grouped by target.
    pub fn messages(&self) -> Vec<(usize, usize, f32)> {
        let csr = &self.by_target;
        (0..self.num_nodes)
            .flat_map(|t| {
                (csr.offsets[t]..csr.offsets[t + 1]).map(move |e| (csr.index[e], t, csr.weight[e]))
            })
            .collect()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_messages(&self) -> usize {
        self.num_messages
    }

    /// `out[t] += Σ_{e: s→t} w_e · x[s]`
    pub(crate) fn gather_sum(&self, x: &[f32], d: usize, out: &mut [f32]) {
        self.by_target.apply(x, d, out);
    }

    /// `dx[s] += Σ_{e: s→t} w_e · g[t]`
    pub(crate) fn scatter_back(&self, g: &[f32], d: usize, dx: &mut [f32]) {
        self.by_source.apply(g, d, dx);
    }
}
