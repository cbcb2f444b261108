//! P-step random-walk kernels between a live graph and trainable hidden
//! graphs, with a dense Kronecker reference and a walk-enumeration oracle.
//!
//! For a graph `(A, Y)` and hidden graph `(A^h, K^h)` the kernel is
//! `κ^(p) = sᵀ (A ⊗ A^h)^p s` with `s = vec_r(Y K^hᵀ)`, the row-major flatten
//! (index `i·m + a`). The fast path never forms the Kronecker product: it uses
//! `(A ⊗ B) vec_r(S) = vec_r(A S Bᵀ)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Builder, Init, ParamId};
use crate::tensor::{kron, matmul, Tensor};

/// Parameter handles of one hidden graph.
#[derive(Clone, Copy, Debug)]
pub struct HiddenGraph {
    pub nodes: usize,
    pub adj: ParamId,
    pub emb: ParamId,
}

/// The two groups of hidden graphs plus the step set.
#[derive(Clone, Debug)]
pub struct HiddenGraphBank {
    pub global: Vec<HiddenGraph>,
    pub local: Vec<HiddenGraph>,
    pub steps: Vec<u32>,
}

impl HiddenGraphBank {
    /// Registers `rw.global.{k}/adj`, `rw.global.{k}/emb` and the local
    /// counterparts.
    pub fn build(
        b: &mut Builder<'_>,
        global: (usize, usize),
        local: (usize, usize),
        d: usize,
        steps: &[u32],
    ) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Invalid("random-walk step set is empty".into()));
        }
        let mut group = |name: &str, (count, nodes): (usize, usize)| -> Result<Vec<HiddenGraph>> {
            (0..count)
                .map(|k| {
                    let adj = b.init.uniform(nodes, nodes, 1.0);
                    let adj = b.tensor(&format!("{name}.{k}/adj"), adj)?;
                    let emb = b.xavier(&format!("{name}.{k}/emb"), nodes, d)?;
                    Ok(HiddenGraph { nodes, adj, emb })
                })
                .collect()
        };
        let global = group("global", global)?;
        let local = group("local", local)?;
        Ok(Self {
            global,
            local,
            steps: steps.to_vec(),
        })
    }

    pub fn graphs(&self) -> impl Iterator<Item = &HiddenGraph> {
        self.global.iter().chain(&self.local)
    }

    pub fn width(&self) -> usize {
        (self.global.len() + self.local.len()) * self.steps.len()
    }
}

/// `sigmoid((F + Fᵀ)/2)` with the diagonal zeroed.
pub fn hidden_adjacency(tape: &mut Tape, free: Var) -> Result<Var> {
    let m = tape.value(free).rows();
    let ft = tape.transpose(free)?;
    let sum = tape.add(free, ft)?;
    let half = tape.scale(sum, 0.5);
    let sig = tape.sigmoid(half);
    let mut off = Tensor::ones(m, m);
    for i in 0..m {
        off.set(i, i, 0.0);
    }
    let off = tape.constant(off);
    tape.mul(sig, off)
}

/// `κ^(p)` for every `p` in `steps`, as `1 × 1` tape values.
pub fn walk_kernel_on_tape(
    tape: &mut Tape,
    a: Var,
    y: Var,
    ah: Var,
    kh: Var,
    steps: &[u32],
) -> Result<Vec<Var>> {
    let (_, dy) = tape.value(y).dims("walk_kernel")?;
    let (_, dk) = tape.value(kh).dims("walk_kernel")?;
    if dy != dk {
        return Err(Error::ShapeMismatch {
            op: "walk_kernel feature width",
            left: tape.value(y).shape().to_vec(),
            right: tape.value(kh).shape().to_vec(),
        });
    }
    let kt = tape.transpose(kh)?;
    let s0 = tape.matmul(y, kt)?;
    let aht = tape.transpose(ah)?;
    let pmax = steps.iter().copied().max().unwrap_or(0);
    let mut powers = vec![s0];
    for _ in 0..pmax {
        let prev = *powers.last().expect("non-empty");
        let left = tape.matmul(a, prev)?;
        powers.push(tape.matmul(left, aht)?);
    }
    steps
        .iter()
        .map(|&p| {
            let prod = tape.mul(s0, powers[p as usize])?;
            Ok(tape.sum(prod))
        })
        .collect()
}

/// Plain-value kernel evaluation on the fast path.
pub fn walk_kernel(a: &Tensor, y: &Tensor, ah: &Tensor, kh: &Tensor, p: u32) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = [a, y, ah, kh].map(|t| tape.constant(t.clone()));
    let k = walk_kernel_on_tape(&mut tape, vars[0], vars[1], vars[2], vars[3], &[p])?;
    Ok(tape.value(k[0]).item())
}

/// Reference evaluation that materialises `A ⊗ A^h` and its `p`-th power.
pub fn walk_kernel_dense(a: &Tensor, y: &Tensor, ah: &Tensor, kh: &Tensor, p: u32) -> Result<f64> {
    let s = matmul(y, &kh.transpose())?;
    let n = s.numel();
    let ax = kron(a, ah)?;
    let mut pw = Tensor::eye(n);
    for _ in 0..p {
        pw = matmul(&pw, &ax)?;
    }
    let col = s.reshape(vec![n, 1])?;
    let v = matmul(&pw, &col)?;
    Ok(col.data().iter().zip(v.data()).map(|(x, y)| x * y).sum())
}

/// Literal enumeration of walk pairs: sums `s(start) · s(end)` over every
/// pair of length-`p` walks, one in each binary graph.
pub fn brute_force_walk_count(
    a: &Tensor,
    y: &Tensor,
    ah: &Tensor,
    kh: &Tensor,
    p: u32,
) -> Result<f64> {
    let n = a.rows();
    let m = ah.rows();
    if n > 6 || m > 6 || p > 4 {
        return Err(Error::Invalid(format!(
            "enumeration bounds exceeded: {n} and {m} nodes, p = {p}"
        )));
    }
    for g in [a, ah] {
        if g.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid("enumeration needs binary adjacency".into()));
        }
    }
    let s = matmul(y, &kh.transpose())?;
    let walks = |g: &Tensor, size: usize| {
        let mut out: Vec<(usize, usize)> = Vec::new();
        let mut stack: Vec<(usize, usize, u32)> = (0..size).map(|v| (v, v, 0)).collect();
        while let Some((start, cur, len)) = stack.pop() {
            if len == p {
                out.push((start, cur));
                continue;
            }
            for next in 0..size {
                if g.get(cur, next) == 1.0 {
                    stack.push((start, next, len + 1));
                }
            }
        }
        out
    };
    let wg = walks(a, n);
    let wh = walks(ah, m);
    let mut total = 0.0;
    for &(i0, ip) in &wg {
        for &(a0, ap) in &wh {
            total += s.get(i0, a0) * s.get(ip, ap);
        }
    }
    Ok(total)
}

/// Walk representation of `(a, y)` against every hidden graph in the bank:
/// a `1 × width` row ordered by group, graph, then step.
pub fn graph_representation(
    tape: &mut Tape,
    a: Var,
    y: Var,
    bank: &HiddenGraphBank,
    bound: &Bound,
) -> Result<Var> {
    if bank.steps.is_empty() {
        return Err(Error::Invalid("random-walk step set is empty".into()));
    }
    let mut entries = Vec::with_capacity(bank.width());
    for g in bank.graphs() {
        let ah = hidden_adjacency(tape, bound.var(g.adj))?;
        let ks = walk_kernel_on_tape(tape, a, y, ah, bound.var(g.emb), &bank.steps)?;
        entries.extend(ks);
    }
    tape.concat_cols(&entries)
}

/// Outcome of [`oracle_suite`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleReport {
    /// Binary-graph cases compared against walk enumeration.
    pub exhaustive_cases: usize,
    pub exhaustive_mismatches: usize,
    /// Random real-valued cases compared against the dense reference.
    pub random_cases: usize,
    pub random_mismatches: usize,
    /// Largest absolute difference seen on the binary grid.
    pub max_exhaustive_diff: f64,
    /// Largest `|fast - dense| / max(1, |dense|)` on the random cases.
    pub max_random_diff: f64,
}

impl OracleReport {
    pub fn mismatches(&self) -> usize {
        self.exhaustive_mismatches + self.random_mismatches
    }
}

/// Every loop-free undirected graph on `n` nodes.
pub fn binary_graphs(n: usize) -> Vec<Tensor> {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    (0u32..1 << pairs.len())
        .map(|mask| {
            let mut a = Tensor::zeros(n, n);
            for (b, &(i, j)) in pairs.iter().enumerate() {
                if mask >> b & 1 == 1 {
                    a.set(i, j, 1.0);
                    a.set(j, i, 1.0);
                }
            }
            a
        })
        .collect()
}

/// Fast kernel against walk enumeration over all binary graphs up to
/// `max_live` nodes × hidden graphs up to `max_hidden` nodes × steps
/// `0..=max_p` with unit features (tolerance 1e-9), then `random` real-valued
/// cases against the dense Kronecker reference (tolerance 1e-10).
pub fn oracle_suite(max_live: usize, max_hidden: usize, max_p: u32, random: usize, seed: u64) -> Result<OracleReport> {
    let mut r = OracleReport::default();
    let hidden: Vec<Tensor> = (1..=max_hidden).flat_map(binary_graphs).collect();
    for n in 1..=max_live {
        let y = Tensor::ones(n, 1);
        for a in binary_graphs(n) {
            for ah in &hidden {
                let kh = Tensor::ones(ah.rows(), 1);
                for p in 0..=max_p {
                    let fast = walk_kernel(&a, &y, ah, &kh, p)?;
                    let brute = brute_force_walk_count(&a, &y, ah, &kh, p)?;
                    let d = libm::fabs(fast - brute);
                    r.exhaustive_cases += 1;
                    r.max_exhaustive_diff = f64::max(r.max_exhaustive_diff, d);
                    if !(d <= 1e-9) {
                        r.exhaustive_mismatches += 1;
                    }
                }
            }
        }
    }
    let mut init = Init::new(seed);
    for case in 0..random {
        let rng = init.rng();
        let n = rand::Rng::random_range(&mut *rng, 1..=5usize);
        let m = rand::Rng::random_range(&mut *rng, 1..=4usize);
        let d = rand::Rng::random_range(&mut *rng, 1..=3usize);
        let a = init.uniform(n, n, 1.0);
        let y = init.uniform(n, d, 1.0);
        let ah = init.uniform(m, m, 1.0);
        let kh = init.uniform(m, d, 1.0);
        let p = (case % 4) as u32;
        let fast = walk_kernel(&a, &y, &ah, &kh, p)?;
        let dense = walk_kernel_dense(&a, &y, &ah, &kh, p)?;
        let diff = libm::fabs(fast - dense) / f64::max(1.0, libm::fabs(dense));
        r.random_cases += 1;
        r.max_random_diff = f64::max(r.max_random_diff, diff);
        if !(diff <= 1e-10) {
            r.random_mismatches += 1;
        }
    }
    Ok(r)
}
