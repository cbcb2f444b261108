//! One dynamic spatial convolution layer: GCN with time-varying adjacency and
//! weights, the column-wise GRU weight update, causal graph attention, the
//! neighbour-refined adjacency and the layer-dependent output MLP.
//!
//! Node 0 is the encoder node; target nodes are `1..`.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::normalize_on_tape;
use crate::params::{Bound, Builder, ParamId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub pz: ParamId,
    pub qz: ParamId,
    pub bz: ParamId,
    pub pr: ParamId,
    pub qr: ParamId,
    pub br: ParamId,
    pub pw: ParamId,
    pub qw: ParamId,
    pub bw: ParamId,
    /// Summarisation row mapping the pooled input to `d_out` columns.
    pub m: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub w: ParamId,
    /// `2d × 1`; the first half scores the target row, the second the neighbour.
    pub psi: ParamId,
}

/// Initial `(weight, bias)` of the refine map. A steep start lets attention
/// mass move entries across 0.5 from the first epochs.
pub const REFINE_INIT: (f64, f64) = (10.0, -3.0);

#[derive(Clone, Copy, Debug)]
pub struct Refine {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialLayer {
    pub gru: GruCell,
    pub w0: ParamId,
    pub att: Attention,
    pub refine: Refine,
    pub mlp: Mlp,
}

impl GruCell {
    pub fn build(b: &mut Builder<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            pz: b.xavier("pz", d_in, d_in)?,
            qz: b.xavier("qz", d_in, d_in)?,
            bz: b.zeros("bz", d_in, 1)?,
            pr: b.xavier("pr", d_in, d_in)?,
            qr: b.xavier("qr", d_in, d_in)?,
            br: b.zeros("br", d_in, 1)?,
            pw: b.xavier("pw", d_in, d_in)?,
            qw: b.xavier("qw", d_in, d_in)?,
            bw: b.zeros("bw", d_in, 1)?,
            m: b.xavier("m", 1, d_out)?,
        })
    }
}

impl Mlp {
    pub fn build(b: &mut Builder<'_>, d_in: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w1: b.xavier("w1", d_in, d_hidden)?,
            b1: b.zeros("b1", 1, d_hidden)?,
            w2: b.xavier("w2", d_hidden, d_out)?,
            b2: b.zeros("b2", 1, d_out)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.affine(x, p.var(self.w1), p.var(self.b1))?;
        let h = tape.relu(h);
        tape.affine(h, p.var(self.w2), p.var(self.b2))
    }
}

impl SpatialLayer {
    pub fn build(b: &mut Builder<'_>, d: usize, mlp_in: usize) -> Result<Self> {
        let gru = GruCell::build(&mut b.sub("gru"), d, d)?;
        let w0 = b.xavier("w0", d, d)?;
        let att = {
            let mut ab = b.sub("att");
            Attention {
                w: ab.xavier("w", d, d)?,
                psi: ab.xavier("psi", 2 * d, 1)?,
            }
        };
        let refine = {
            let mut rb = b.sub("refine");
            Refine {
                w: rb.filled("w", 1, 1, REFINE_INIT.0)?,
                b: rb.filled("b", 1, 1, REFINE_INIT.1)?,
            }
        };
        let mlp = Mlp::build(&mut b.sub("mlp"), mlp_in, d, d)?;
        Ok(Self {
            gru,
            w0,
            att,
            refine,
            mlp,
        })
    }
}

/// `ReLU(D̂^{-1/2}(A+I)D̂^{-1/2} · Y · W)`.
pub fn dynamic_gcn_forward(tape: &mut Tape, y: Var, a: Var, w: Var) -> Result<Var> {
    let n = normalize_on_tape(tape, a, false)?;
    let yw = tape.matmul(y, w)?;
    let h = tape.matmul(n, yw)?;
    Ok(tape.relu(h))
}

/// Column-wise GRU over the weight matrix. The input is the column mean of
/// `y` summarised to `d_out` columns through the learned row `m`.
pub fn gru_weight_update(tape: &mut Tape, p: &Bound, cell: &GruCell, y: Var, w_prev: Var) -> Result<Var> {
    let (d_in, d_out) = tape.value(w_prev).dims("gru_weight_update")?;
    let (_, yc) = tape.value(y).dims("gru_weight_update")?;
    if yc != d_in {
        return Err(Error::ShapeMismatch {
            op: "gru_weight_update",
            left: tape.value(y).shape().to_vec(),
            right: tape.value(w_prev).shape().to_vec(),
        });
    }
    let pooled = tape.mean(y, Axis::Rows)?;
    let s = tape.transpose(pooled)?;
    let ones = tape.constant(Tensor::ones(1, d_out));
    let expand = tape.concat_rows(&[p.var(cell.m), ones])?;
    // (P s) m + B 1ᵀ as one product: [P s, B] · [m; 1ᵀ].
    let input_term = |tape: &mut Tape, pm: ParamId, bm: ParamId| -> Result<Var> {
        let ps = tape.matmul(p.var(pm), s)?;
        let cat = tape.concat_cols(&[ps, p.var(bm)])?;
        tape.matmul(cat, expand)
    };
    let xz = input_term(tape, cell.pz, cell.bz)?;
    let xr = input_term(tape, cell.pr, cell.br)?;
    let xw = input_term(tape, cell.pw, cell.bw)?;
    let hz = tape.matmul(p.var(cell.qz), w_prev)?;
    let z = tape.add(xz, hz)?;
    let z = tape.sigmoid(z);
    let hr = tape.matmul(p.var(cell.qr), w_prev)?;
    let r = tape.add(xr, hr)?;
    let r = tape.sigmoid(r);
    let rw = tape.mul(r, w_prev)?;
    let hw = tape.matmul(p.var(cell.qw), rw)?;
    let cand = tape.add(xw, hw)?;
    let cand = tape.tanh(cand);
    let diff = tape.sub(cand, w_prev)?;
    let step = tape.mul(z, diff)?;
    tape.add(w_prev, step)
}

/// Mask with `true` at `(i, j)` for `j ≤ i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    m
}

/// Row `i` is the softmax over `j ≤ i` of `LeakyReLU(ψᵀ[W y_i ∥ W y_j])`.
pub fn attention_adjacency(tape: &mut Tape, p: &Bound, att: &Attention, y: Var, slope: f64) -> Result<Var> {
    let (n, _) = tape.value(y).dims("attention_adjacency")?;
    if n == 0 {
        return Err(Error::Invalid("attention over zero nodes".into()));
    }
    let d = tape.value(p.var(att.w)).cols();
    let h = tape.matmul(y, p.var(att.w))?;
    let psi1 = tape.slice_rows(p.var(att.psi), 0, d)?;
    let psi2 = tape.slice_rows(p.var(att.psi), d, 2 * d)?;
    let a = tape.matmul(h, psi1)?;
    let b = tape.matmul(h, psi2)?;
    let bt = tape.transpose(b)?;
    let ones_col = tape.constant(Tensor::ones(n, 1));
    let ones_row = tape.constant(Tensor::ones(1, n));
    let left = tape.concat_cols(&[a, ones_col])?;
    let right = tape.concat_rows(&[ones_row, bt])?;
    let scores = tape.matmul(left, right)?;
    let scores = tape.leaky_relu(scores, slope);
    tape.masked_softmax(scores, &causal_mask(n))
}

/// Constant part of every adjacency: unit diagonal and encoder links.
pub fn pinned(n: usize) -> Tensor {
    let mut a = Tensor::eye(n);
    for i in 0..n {
        a.set(0, i, 1.0);
        a.set(i, 0, 1.0);
    }
    a
}

/// Initial adjacency over `n_max` candidates plus the encoder node.
pub fn initial_adjacency(n_max: usize) -> Tensor {
    pinned(n_max + 1)
}

/// Extends an adjacency by one node that carries only its pinned entries.
pub fn pad_adjacency(tape: &mut Tape, a: Var) -> Result<Var> {
    let (n, _) = tape.value(a).dims("pad_adjacency")?;
    let zc = tape.constant(Tensor::zeros(n, 1));
    let wide = tape.concat_cols(&[a, zc])?;
    let zr = tape.constant(Tensor::zeros(1, n + 1));
    let tall = tape.concat_rows(&[wide, zr])?;
    let mut pin = Tensor::zeros(n + 1, n + 1);
    pin.set(n, n, 1.0);
    pin.set(0, n, 1.0);
    pin.set(n, 0, 1.0);
    tape.offset(tall, &pin)
}

/// `σ(w·(A + Ã) + b)` on free entries `i > j ≥ 1`, mirrored to the upper
/// triangle; diagonal and encoder links are pinned to 1.
pub fn refine_adjacency(tape: &mut Tape, p: &Bound, refine: &Refine, a_prev: Var, att: Var) -> Result<Var> {
    let (n, _) = tape.value(a_prev).dims("refine_adjacency")?;
    let sum = tape.add(a_prev, att)?;
    let lin = tape.scalar_affine(sum, p.var(refine.w), p.var(refine.b))?;
    let sig = tape.sigmoid(lin);
    let mut free = Tensor::zeros(n, n);
    for i in 2..n {
        for j in 1..i {
            free.set(i, j, 1.0);
        }
    }
    let free = tape.constant(free);
    let lower = tape.mul(sig, free)?;
    let upper = tape.transpose(lower)?;
    let both = tape.add(lower, upper)?;
    tape.offset(both, &pinned(n))
}

/// Observed adjacency embedded in the `(n_max+1)²` candidate view.
pub fn padded_view(a: &Tensor, n_max: usize) -> Tensor {
    let mut out = initial_adjacency(n_max);
    let n = a.rows();
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, a.get(i, j));
        }
    }
    out
}

/// Side inputs for the layer-dependent update.
#[derive(Clone, Copy, Debug, Default)]
pub struct SideInputs {
    pub emb: Option<Var>,
    pub re: Option<Var>,
    pub rt: Option<Var>,
}

/// Which walk representations the last layer consumes.
#[derive(Clone, Copy, Debug)]
pub struct WalkUse {
    pub source: bool,
    pub target: bool,
}

/// Input width of layer `l`'s MLP (1-based).
pub fn mlp_input_width(l: usize, big_l: usize, d: usize, d_emb: usize, rw: usize, walk: WalkUse) -> usize {
    let mut w = d;
    if l == 1 {
        w += d_emb;
    }
    if l == big_l {
        w += rw * (walk.source as usize + walk.target as usize);
    }
    w
}

fn repeat_rows(tape: &mut Tape, row: Var, n: usize) -> Result<Var> {
    let ones = tape.constant(Tensor::ones(n, 1));
    tape.matmul(ones, row)
}

/// `MLP(Y ∥ emb)` for the first layer, `MLP(Y ∥ R^e ∥ R^t)` for the last,
/// `MLP(Y)` in between; a single layer takes every side input.
pub fn layer_output_update(
    tape: &mut Tape,
    p: &Bound,
    mlp: &Mlp,
    y: Var,
    l: usize,
    big_l: usize,
    side: &SideInputs,
    walk: WalkUse,
) -> Result<Var> {
    if l == 0 || l > big_l {
        return Err(Error::OutOfRange {
            what: "layer index",
            index: l,
            limit: big_l,
        });
    }
    let n = tape.value(y).rows();
    let mut parts = vec![y];
    if l == 1 {
        parts.push(side.emb.ok_or_else(|| Error::Invalid("first layer needs token embeddings".into()))?);
    }
    if l == big_l {
        if walk.source {
            let re = side.re.ok_or_else(|| Error::Invalid("last layer needs R^e".into()))?;
            parts.push(repeat_rows(tape, re, n)?);
        }
        if walk.target {
            let rt = side.rt.ok_or_else(|| Error::Invalid("last layer needs R^t".into()))?;
            parts.push(repeat_rows(tape, rt, n)?);
        }
    }
    let x = if parts.len() == 1 { y } else { tape.concat_cols(&parts)? };
    mlp.forward(tape, p, x)
}
