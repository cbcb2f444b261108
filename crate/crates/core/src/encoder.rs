//! Transformer encoder, source graph assembly, `<sog>` pooling and source
//! walk representations.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Axis, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{build_source_graph, Head};
use crate::params::{Bound, Builder, ParamId};
use crate::rw_kernel::{graph_representation, HiddenGraphBank};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct Layer {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    emb: ParamId,
    layers: Vec<Layer>,
    pub rw_proj: ParamId,
    d: usize,
    heads: usize,
    vocab: usize,
    max_len: usize,
    eps: f64,
}

/// Tape handles produced by one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub xe: Var,
    pub sog: Var,
    pub ae: Tensor,
    pub re: Option<Var>,
}

/// Sinusoidal position table, `len × d`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / libm::pow(10000.0, 2.0 * k / d as f64);
            t.set(pos, i, if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) });
        }
    }
    t
}

/// Mean over the token axis.
pub fn sog_pool(tape: &mut Tape, xe: Var) -> Result<Var> {
    tape.mean(xe, Axis::Rows)
}

impl Encoder {
    pub fn build(b: &mut Builder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let emb = b.xavier("emb", cfg.vocab_size, d)?;
        let mut layers = Vec::with_capacity(cfg.enc_layers);
        for l in 0..cfg.enc_layers {
            let mut lb = b.sub(&format!("layer{l}"));
            layers.push(Layer {
                wq: lb.xavier("wq", d, d)?,
                bq: lb.zeros("bq", 1, d)?,
                wk: lb.xavier("wk", d, d)?,
                bk: lb.zeros("bk", 1, d)?,
                wv: lb.xavier("wv", d, d)?,
                bv: lb.zeros("bv", 1, d)?,
                wo: lb.xavier("wo", d, d)?,
                bo: lb.zeros("bo", 1, d)?,
                ln1_g: lb.filled("ln1.g", 1, d, 1.0)?,
                ln1_b: lb.zeros("ln1.b", 1, d)?,
                ff1_w: lb.xavier("ff1.w", d, cfg.d_ff)?,
                ff1_b: lb.zeros("ff1.b", 1, cfg.d_ff)?,
                ff2_w: lb.xavier("ff2.w", cfg.d_ff, d)?,
                ff2_b: lb.zeros("ff2.b", 1, d)?,
                ln2_g: lb.filled("ln2.g", 1, d, 1.0)?,
                ln2_b: lb.zeros("ln2.b", 1, d)?,
            });
        }
        let rw_proj = b.xavier("rw_proj", d, cfg.d_rw)?;
        Ok(Self {
            emb,
            layers,
            rw_proj,
            d,
            heads: cfg.enc_heads,
            vocab: cfg.vocab_size,
            max_len: cfg.max_src_len,
            eps: cfg.ln_eps,
        })
    }

    /// `U × d_model` token representations.
    pub fn transformer_encode(&self, tape: &mut Tape, p: &Bound, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty source sentence".into()));
        }
        if tokens.len() > self.max_len {
            return Err(Error::OutOfRange {
                what: "source length",
                index: tokens.len(),
                limit: self.max_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::UnknownToken(bad));
        }
        let u = tokens.len();
        let e = tape.embedding(p.var(self.emb), tokens)?;
        let e = tape.scale(e, libm::sqrt(self.d as f64));
        let mut x = tape.offset(e, &positional_encoding(u, self.d))?;
        let dh = self.d / self.heads;
        let inv = 1.0 / libm::sqrt(dh as f64);
        for l in &self.layers {
            let q = tape.affine(x, p.var(l.wq), p.var(l.bq))?;
            let k = tape.affine(x, p.var(l.wk), p.var(l.bk))?;
            let v = tape.affine(x, p.var(l.wv), p.var(l.bv))?;
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let (s, e) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(q, s, e)?;
                let kh = tape.slice_cols(k, s, e)?;
                let vh = tape.slice_cols(v, s, e)?;
                let kt = tape.transpose(kh)?;
                let sc = tape.matmul(qh, kt)?;
                let sc = tape.scale(sc, inv);
                let att = tape.softmax(sc)?;
                heads.push(tape.matmul(att, vh)?);
            }
            let cat = tape.concat_cols(&heads)?;
            let a = tape.affine(cat, p.var(l.wo), p.var(l.bo))?;
            let r = tape.add(x, a)?;
            x = tape.layer_norm(r, p.var(l.ln1_g), p.var(l.ln1_b), self.eps)?;
            let f = tape.affine(x, p.var(l.ff1_w), p.var(l.ff1_b))?;
            let f = tape.relu(f);
            let f = tape.affine(f, p.var(l.ff2_w), p.var(l.ff2_b))?;
            let r = tape.add(x, f)?;
            x = tape.layer_norm(r, p.var(l.ln2_g), p.var(l.ln2_b), self.eps)?;
        }
        Ok(x)
    }

    /// Full encoder pass: representations, `<sog>`, `A^e` and (when a bank is
    /// given) the source walk representation.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        tokens: &[usize],
        heads: &[Head],
        bank: Option<&HiddenGraphBank>,
    ) -> Result<EncoderOutput> {
        if heads.len() != tokens.len() {
            return Err(Error::Invalid(format!(
                "{} source heads for {} tokens",
                heads.len(),
                tokens.len()
            )));
        }
        let ae = build_source_graph(heads)?;
        let xe = self.transformer_encode(tape, p, tokens)?;
        let sog = sog_pool(tape, xe)?;
        let re = match bank {
            Some(bank) => Some(self.source_rw_reps(tape, p, xe, &ae, bank)?),
            None => None,
        };
        Ok(EncoderOutput { xe, sog, ae, re })
    }

    pub fn source_rw_reps(
        &self,
        tape: &mut Tape,
        p: &Bound,
        xe: Var,
        ae: &Tensor,
        bank: &HiddenGraphBank,
    ) -> Result<Var> {
        let proj = tape.matmul(xe, p.var(self.rw_proj))?;
        let a = tape.constant(ae.clone());
        graph_representation(tape, a, proj, bank, p)
    }
}
