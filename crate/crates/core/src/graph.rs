//! Syntactic graphs: head arrays, symmetric adjacency, normalisation and
//! head recovery from predicted scores.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Head of one token; `None` marks the root.
pub type Head = Option<usize>;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntacticGraph {
    pub n: usize,
    pub adjacency: Tensor,
    pub heads: Vec<Head>,
}

impl SyntacticGraph {
    /// Binary symmetric graph of the undirected arc set, zero diagonal.
    pub fn from_heads(heads: &[Head]) -> Result<Self> {
        validate_heads(heads, false)?;
        Ok(Self {
            n: heads.len(),
            adjacency: arc_matrix(heads),
            heads: heads.to_vec(),
        })
    }

    /// Gold graph: additionally requires exactly one root and no cycles.
    pub fn gold(heads: &[Head]) -> Result<Self> {
        validate_heads(heads, true)?;
        Self::from_heads(heads)
    }
}

fn arc_matrix(heads: &[Head]) -> Tensor {
    let n = heads.len();
    let mut a = Tensor::zeros(n, n);
    for (i, h) in heads.iter().enumerate() {
        if let Some(j) = *h {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
    }
    a
}

/// Range and self-loop checks; `gold` also demands a single root and a tree.
pub fn validate_heads(heads: &[Head], gold: bool) -> Result<()> {
    let n = heads.len();
    for (i, h) in heads.iter().enumerate() {
        if let Some(j) = *h {
            if j >= n {
                return Err(Error::OutOfRange {
                    what: "head index",
                    index: j,
                    limit: n,
                });
            }
            if j == i {
                return Err(Error::Invalid(format!("token {i} is its own head")));
            }
        }
    }
    if gold {
        let roots = heads.iter().filter(|h| h.is_none()).count();
        if roots != 1 {
            return Err(Error::Invalid(format!("expected one root, found {roots}")));
        }
        for start in 0..n {
            let mut cur = start;
            let mut hops = 0;
            while let Some(h) = heads[cur] {
                cur = h;
                hops += 1;
                if hops > n {
                    return Err(Error::Invalid(format!("head cycle through token {start}")));
                }
            }
        }
    }
    Ok(())
}

/// Source adjacency `A^e` from a head array.
pub fn build_source_graph(heads: &[Head]) -> Result<Tensor> {
    Ok(SyntacticGraph::from_heads(heads)?.adjacency)
}

/// `D̂^{-1/2} (A + I) D̂^{-1/2}`.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims("normalize_adjacency")?;
    if r != c {
        return Err(Error::ShapeMismatch {
            op: "normalize_adjacency",
            left: vec![r, c],
            right: vec![c, r],
        });
    }
    let mut hat = a.clone();
    for i in 0..r {
        hat.set(i, i, hat.get(i, i) + 1.0);
    }
    let deg: Vec<f64> = (0..r).map(|i| hat.row_slice(i).iter().sum::<f64>()).collect();
    let mut out = hat;
    for i in 0..r {
        for j in 0..r {
            let v = out.get(i, j) / libm::sqrt(deg[i] * deg[j]);
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Differentiable normalisation. With `causal`, entries above the diagonal
/// are dropped before degrees are taken, so row `i` only sees `j ≤ i`.
pub fn normalize_on_tape(tape: &mut Tape, a: Var, causal: bool) -> Result<Var> {
    let (r, c) = tape.value(a).dims("normalize_adjacency")?;
    if r != c {
        return Err(Error::ShapeMismatch {
            op: "normalize_adjacency",
            left: vec![r, c],
            right: vec![c, r],
        });
    }
    let hat = tape.offset(a, &Tensor::eye(r))?;
    let hat = if causal {
        let mut mask = Tensor::zeros(r, r);
        for i in 0..r {
            for j in 0..=i {
                mask.set(i, j, 1.0);
            }
        }
        let m = tape.constant(mask);
        tape.mul(hat, m)?
    } else {
        hat
    };
    let ones = tape.constant(Tensor::ones(r, 1));
    let deg = tape.matmul(hat, ones)?;
    let deg_t = tape.transpose(deg)?;
    let outer = tape.matmul(deg, deg_t)?;
    let scale = tape.powf(outer, -0.5);
    tape.mul(hat, scale)
}

/// Gold adjacency over the first `t` tokens, with unit diagonal.
pub fn gold_prefix_adjacency(gold: &SyntacticGraph, t: usize) -> Result<Tensor> {
    if t == 0 || t > gold.n {
        return Err(Error::OutOfRange {
            what: "gold prefix step",
            index: t,
            limit: gold.n,
        });
    }
    let mut a = Tensor::eye(t);
    for (i, h) in gold.heads.iter().enumerate().take(t) {
        if let Some(j) = *h {
            if j < t {
                a.set(i, j, 1.0);
                a.set(j, i, 1.0);
            }
        }
    }
    Ok(a)
}

/// Discretises a `t × t` score matrix into heads.
///
/// With `masked_causal`, token `i` takes the highest-scoring predecessor
/// (ties to the smaller index) and token 0 is the root. Otherwise a maximum
/// spanning tree over the symmetrised scores is rooted at its centre.
pub fn extract_heads(score: &Tensor, masked_causal: bool) -> Vec<Head> {
    let t = score.rows();
    if t == 0 {
        return Vec::new();
    }
    if masked_causal {
        let mut heads = vec![None; t];
        for (i, h) in heads.iter_mut().enumerate().skip(1) {
            let mut best: Option<(usize, f64)> = None;
            for j in 0..i {
                let s = score.get(i, j);
                if !s.is_finite() {
                    continue;
                }
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((j, s));
                }
            }
            *h = best.map(|(j, _)| j);
        }
        return heads;
    }
    spanning_tree_heads(score)
}

fn spanning_tree_heads(score: &Tensor) -> Vec<Head> {
    let t = score.rows();
    let w = |i: usize, j: usize| {
        let s = 0.5 * (score.get(i, j) + score.get(j, i));
        if s.is_finite() {
            s
        } else {
            f64::NEG_INFINITY
        }
    };
    // Prim's algorithm from node 0.
    let mut in_tree = vec![false; t];
    let mut best = vec![f64::NEG_INFINITY; t];
    let mut link = vec![0usize; t];
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); t];
    in_tree[0] = true;
    for j in 1..t {
        best[j] = w(0, j);
    }
    for _ in 1..t {
        let mut pick: Option<usize> = None;
        for j in 0..t {
            if in_tree[j] {
                continue;
            }
            if pick.is_none_or(|p| best[j] > best[p]) {
                pick = Some(j);
            }
        }
        let j = pick.expect("remaining node");
        in_tree[j] = true;
        adj[j].push(link[j]);
        adj[link[j]].push(j);
        for k in 0..t {
            if !in_tree[k] {
                let s = w(j, k);
                if s > best[k] {
                    best[k] = s;
                    link[k] = j;
                }
            }
        }
    }
    let bfs = |root: usize| {
        let mut dist = vec![usize::MAX; t];
        let mut parent: Vec<Head> = vec![None; t];
        let mut q = VecDeque::new();
        dist[root] = 0;
        q.push_back(root);
        while let Some(u) = q.pop_front() {
            let mut nb = adj[u].clone();
            nb.sort_unstable();
            for v in nb {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    parent[v] = Some(u);
                    q.push_back(v);
                }
            }
        }
        (dist, parent)
    };
    let mut centre = 0;
    let mut ecc = usize::MAX;
    for r in 0..t {
        let e = bfs(r).0.into_iter().max().unwrap_or(0);
        if e < ecc {
            ecc = e;
            centre = r;
        }
    }
    bfs(centre).1
}

/// One parallel training example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusExample {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub src_heads: Vec<Head>,
    pub tgt_heads: Vec<Head>,
}

impl CorpusExample {
    pub fn validate(&self) -> Result<()> {
        if self.src.is_empty() || self.tgt.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        if self.src.len() != self.src_heads.len() || self.tgt.len() != self.tgt_heads.len() {
            return Err(Error::Invalid("head array length differs from tokens".into()));
        }
        validate_heads(&self.src_heads, true)?;
        validate_heads(&self.tgt_heads, true)
    }
}
