//! Temporal convolution block: kernel-size-1 channel mixing, two stacked
//! dilated causal convolutions with a residual path, then a causal GCN.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::normalize_on_tape;
use crate::params::{Bound, Builder, ParamId};
use crate::tensor::Tensor;

pub const KERNEL: usize = 2;
pub const DILATIONS: [usize; 2] = [1, 2];

#[derive(Clone, Copy, Debug)]
pub struct TemporalLayer {
    pub pre: ParamId,
    pub f1: ParamId,
    pub f2: ParamId,
    pub gcn: ParamId,
}

impl TemporalLayer {
    pub fn build(b: &mut Builder<'_>, d: usize) -> Result<Self> {
        Ok(Self {
            pre: b.xavier("pre", d, d)?,
            f1: b.xavier("f1", KERNEL, d)?,
            f2: b.xavier("f2", KERNEL, d)?,
            gcn: b.xavier("gcn", d, d)?,
        })
    }
}

/// `T × T` matrix moving row `t − k` to row `t`, zero-filled at the start.
fn shift(t: usize, k: usize) -> Tensor {
    let mut s = Tensor::zeros(t, t);
    for i in k..t {
        s.set(i, i - k, 1.0);
    }
    s
}

/// `H(t) = Σ_i f(i) ∘ Y(t − d·i)` per channel, left zero-padded.
pub fn dilated_causal_conv(tape: &mut Tape, y: Var, f: Var, d: usize) -> Result<Var> {
    if d == 0 {
        return Err(Error::Invalid("dilation must be positive".into()));
    }
    let (t, c) = tape.value(y).dims("dilated_causal_conv")?;
    let (h, fc) = tape.value(f).dims("dilated_causal_conv")?;
    if fc != c {
        return Err(Error::ShapeMismatch {
            op: "dilated_causal_conv",
            left: tape.value(y).shape().to_vec(),
            right: tape.value(f).shape().to_vec(),
        });
    }
    let ones = tape.constant(Tensor::ones(t, 1));
    let mut terms = Vec::with_capacity(h);
    for i in 0..h {
        let fi = tape.slice_rows(f, i, i + 1)?;
        let taps = tape.matmul(ones, fi)?;
        let src = if i == 0 {
            y
        } else {
            let s = tape.constant(shift(t, d * i));
            tape.matmul(s, y)?
        };
        terms.push(tape.mul(src, taps)?);
    }
    let mut acc = terms[0];
    for &term in &terms[1..] {
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// Runs the block over the target sequence `y` (`T × d`). `a` is the
/// `(T+1)²` adjacency including the encoder node, whose features are `sog`.
/// Returns the `T × d` target rows.
pub fn temporal_block(
    tape: &mut Tape,
    p: &Bound,
    layer: &TemporalLayer,
    y: Var,
    sog: Var,
    a: Var,
) -> Result<Var> {
    let (t, _) = tape.value(y).dims("temporal_block")?;
    let (an, _) = tape.value(a).dims("temporal_block")?;
    if an != t + 1 {
        return Err(Error::ShapeMismatch {
            op: "temporal_block adjacency",
            left: tape.value(a).shape().to_vec(),
            right: tape.value(y).shape().to_vec(),
        });
    }
    let x = tape.matmul(y, p.var(layer.pre))?;
    let c = dilated_causal_conv(tape, x, p.var(layer.f1), DILATIONS[0])?;
    let c = dilated_causal_conv(tape, c, p.var(layer.f2), DILATIONS[1])?;
    let z = tape.add(x, c)?;
    let z = tape.relu(z);
    let full = tape.concat_rows(&[sog, z])?;
    let n = normalize_on_tape(tape, a, true)?;
    let fw = tape.matmul(full, p.var(layer.gcn))?;
    let g = tape.matmul(n, fw)?;
    let g = tape.relu(g);
    tape.slice_rows(g, 1, t + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(y: &[f64], f: &[f64], d: usize) -> Vec<f64> {
        let mut t = Tape::new();
        let yv = t.constant(Tensor::column(y));
        let fv = t.constant(Tensor::column(f));
        let h = dilated_causal_conv(&mut t, yv, fv, d).unwrap();
        t.value(h).data().to_vec()
    }

    #[test]
    fn conv_examples() {
        assert_eq!(conv(&[1.0, 2.0, 3.0], &[1.0, 0.0], 1), vec![1.0, 2.0, 3.0]);
        assert_eq!(conv(&[1.0, 2.0, 3.0], &[1.0, 1.0], 1), vec![1.0, 3.0, 5.0]);
        assert_eq!(conv(&[1.0, 2.0, 3.0], &[1.0, 1.0], 2), vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn zero_dilation_rejected() {
        let mut t = Tape::new();
        let y = t.constant(Tensor::column(&[1.0]));
        let f = t.constant(Tensor::column(&[1.0, 1.0]));
        assert!(dilated_causal_conv(&mut t, y, f, 0).is_err());
    }
}
