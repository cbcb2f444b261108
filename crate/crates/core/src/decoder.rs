//! The spatial-temporal graph decoder: per-step node insertion, stacked
//! blocks, token logits, and greedy/beam decoding.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::config::{Ablations, ModelConfig};
use crate::encoder::positional_encoding;
use crate::error::{Error, Result};
use crate::graph::{extract_heads, Head, SyntacticGraph};
use crate::params::{Bound, Builder, ParamId, ParamStore};
use crate::rw_kernel::{graph_representation, HiddenGraphBank};
use crate::spatial::{
    attention_adjacency, dynamic_gcn_forward, gru_weight_update, layer_output_update,
    mlp_input_width, pad_adjacency, pinned, refine_adjacency, SideInputs, SpatialLayer, WalkUse,
};
use crate::temporal::{temporal_block, TemporalLayer};
use crate::tensor::Tensor;

pub const BOS: usize = 1;
pub const EOS: usize = 2;

#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub spatial: SpatialLayer,
    pub temporal: TemporalLayer,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub emb: ParamId,
    pub blocks: Vec<Block>,
    pub rw_proj: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    d: usize,
    vocab: usize,
    n_max: usize,
    slope: f64,
    walk: WalkUse,
    ablations: Ablations,
}

/// Source-side inputs of one decode, on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SourceVars {
    pub sog: Var,
    pub re: Option<Var>,
}

/// Per-block recurrent state on a tape: weights and observed adjacency
/// (encoder node plus the target nodes seen so far).
#[derive(Clone, Debug)]
pub struct StateVars {
    pub w: Vec<Var>,
    pub a: Vec<Var>,
}

/// Result of one step on a tape.
#[derive(Clone, Debug)]
pub struct StepVars {
    pub logits: Var,
    /// Last-block adjacency over the encoder node and nodes `1..=t`.
    pub adjacency: Var,
    /// Attention matrices per block (for inspection).
    pub attention: Vec<Option<Var>>,
    pub state: StateVars,
}

/// Divides each kernel entry by `(n·m)^(p+1)` so that values stay O(1)
/// regardless of graph size.
pub fn scale_walk_row(tape: &mut Tape, r: Var, n: usize, bank: &HiddenGraphBank) -> Result<Var> {
    let mut scale = Vec::with_capacity(bank.width());
    for g in bank.graphs() {
        let nm = (n * g.nodes) as f64;
        for &p in &bank.steps {
            scale.push(1.0 / libm::pow(nm, p as f64 + 1.0));
        }
    }
    let s = tape.constant(Tensor::row(&scale));
    tape.mul(r, s)
}

impl Decoder {
    pub fn build(b: &mut Builder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let walk = WalkUse {
            source: cfg.uses_source_walk(),
            target: cfg.uses_target_walk(),
        };
        let emb = b.xavier("emb", cfg.vocab_size, d)?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let mut bb = b.sub(&format!("block{i}"));
            let width = mlp_input_width(i + 1, cfg.blocks, d, d, cfg.rw_width(), walk);
            let spatial = SpatialLayer::build(&mut bb.sub("spatial"), d, width)?;
            let temporal = TemporalLayer::build(&mut bb.sub("temporal"), d)?;
            blocks.push(Block { spatial, temporal });
        }
        let rw_proj = b.xavier("rw_proj", d, cfg.d_rw)?;
        let mut ob = b.sub("out");
        let out_w = ob.xavier("w", d, cfg.vocab_size)?;
        let out_b = ob.zeros("b", 1, cfg.vocab_size)?;
        Ok(Self {
            emb,
            blocks,
            rw_proj,
            out_w,
            out_b,
            d,
            vocab: cfg.vocab_size,
            n_max: cfg.n_max,
            slope: cfg.leaky_slope,
            walk,
            ablations: cfg.ablations,
        })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn walk(&self) -> WalkUse {
        self.walk
    }

    /// State before the first step: initial weights and the lone encoder node.
    pub fn initial_state_vars(&self, tape: &mut Tape, p: &Bound) -> StateVars {
        let w = self.blocks.iter().map(|b| p.var(b.spatial.w0)).collect();
        let a = self
            .blocks
            .iter()
            .map(|_| tape.constant(Tensor::eye(1)))
            .collect();
        StateVars { w, a }
    }

    /// Step `t = inputs.len()`: inserts target node `t`, runs every block and
    /// produces logits for the token at that node. `inputs[i]` is the token
    /// consumed by node `i + 1` (BOS first).
    pub fn step_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        src: &SourceVars,
        bank: &HiddenGraphBank,
        inputs: &[usize],
        prev: &StateVars,
    ) -> Result<StepVars> {
        let t = inputs.len();
        if t == 0 {
            return Err(Error::Invalid("a step needs at least the BOS input".into()));
        }
        if t > self.n_max {
            return Err(Error::CapacityExceeded(self.n_max));
        }
        if let Some(&bad) = inputs.iter().find(|&&x| x >= self.vocab) {
            return Err(Error::UnknownToken(bad));
        }
        let big_l = self.blocks.len();
        let zeros = tape.constant(Tensor::zeros(t, self.d));
        let mut y = tape.concat_rows(&[src.sog, zeros])?;
        // Target embeddings carry the same sinusoidal positions as the encoder.
        let emb = tape.embedding(p.var(self.emb), inputs)?;
        let emb = tape.offset(emb, &positional_encoding(t, self.d))?;
        let mut ws = Vec::with_capacity(big_l);
        let mut as_ = Vec::with_capacity(big_l);
        let mut atts = Vec::with_capacity(big_l);
        let mut last_target = None;
        for (bi, block) in self.blocks.iter().enumerate() {
            let sp = &block.spatial;
            let w = if self.ablations.static_weights {
                p.var(sp.w0)
            } else {
                gru_weight_update(tape, p, &sp.gru, y, prev.w[bi])?
            };
            let (a, att) = if self.ablations.static_adjacency {
                (tape.constant(pinned(t + 1)), None)
            } else {
                let a_pad = pad_adjacency(tape, prev.a[bi])?;
                // Attention reads the features entering the block; the first
                // block sees the input embeddings.
                let seen = if bi == 0 {
                    tape.concat_rows(&[src.sog, emb])?
                } else {
                    y
                };
                let att = attention_adjacency(tape, p, &sp.att, seen, self.slope)?;
                (refine_adjacency(tape, p, &sp.refine, a_pad, att)?, Some(att))
            };
            let g = dynamic_gcn_forward(tape, y, a, w)?;
            let g_tgt = tape.slice_rows(g, 1, t + 1)?;
            let l = bi + 1;
            let mut side = SideInputs::default();
            if l == 1 {
                side.emb = Some(emb);
            }
            if l == big_l {
                if self.walk.source {
                    side.re = Some(src.re.ok_or_else(|| {
                        Error::Invalid("source walk representation missing".into())
                    })?);
                }
                if self.walk.target {
                    let rows = tape.slice_rows(a, 1, t + 1)?;
                    let a_tgt = tape.slice_cols(rows, 1, t + 1)?;
                    let proj = tape.matmul(g_tgt, p.var(self.rw_proj))?;
                    let r = graph_representation(tape, a_tgt, proj, bank, p)?;
                    side.rt = Some(scale_walk_row(tape, r, t, bank)?);
                }
            }
            let mut u = layer_output_update(tape, p, &sp.mlp, g_tgt, l, big_l, &side, self.walk)?;
            if !self.ablations.no_temporal {
                u = temporal_block(tape, p, &block.temporal, u, src.sog, a)?;
            }
            y = tape.concat_rows(&[src.sog, u])?;
            last_target = Some(u);
            ws.push(w);
            as_.push(a);
            atts.push(att);
        }
        let u = last_target.expect("at least one block");
        let row = tape.slice_rows(u, t - 1, t)?;
        let logits = tape.affine(row, p.var(self.out_w), p.var(self.out_b))?;
        Ok(StepVars {
            logits,
            adjacency: *as_.last().expect("at least one block"),
            attention: atts,
            state: StateVars { w: ws, a: as_ },
        })
    }
}

/// Encoder products needed by decoding, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSource {
    pub sog: Tensor,
    pub re: Option<Tensor>,
}

/// The autoregressive carry for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub t: usize,
    pub w: Vec<Tensor>,
    pub a: Vec<Tensor>,
    /// Tokens consumed so far, BOS first.
    pub inputs: Vec<usize>,
    /// Emitted adjacency rows, one per consumed target token: row `i` links
    /// token `i` to tokens `0..=i`. A token's row is read at the step that
    /// consumes it, so the step emitting the end token closes the graph.
    pub rows: Vec<Vec<f64>>,
    pub enc: Arc<EncodedSource>,
    pub n_max: usize,
}

impl DecoderState {
    /// Observed last-block adjacency in the `(n_max+1)²` candidate view.
    pub fn padded_adjacency(&self) -> Tensor {
        crate::spatial::padded_view(self.a.last().expect("at least one block"), self.n_max)
    }

    /// Symmetric target graph over the first `n` tokens; tokens whose row
    /// was never emitted keep only their self-loop.
    pub fn graph(&self, n: usize) -> Tensor {
        let mut a = Tensor::eye(n);
        for i in 0..n.min(self.rows.len()) {
            for j in 0..=i {
                a.set(i, j, self.rows[i][j]);
                a.set(j, i, self.rows[i][j]);
            }
        }
        a
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub row: Vec<f64>,
    pub state: DecoderState,
}

/// Log-softmax of a logit row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| libm::exp(v - mx)).sum();
    let lz = libm::log(z) + mx;
    logits.iter().map(|v| v - lz).collect()
}

/// Index of the largest entry; ties go to the smaller index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct DecodeHypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
    pub state: DecoderState,
}

impl DecodeHypothesis {
    /// Mean per-token log-probability (the end token counts when present).
    pub fn score(&self) -> f64 {
        let n = self.tokens.len() + self.finished as usize;
        if n == 0 {
            0.0
        } else {
            self.logprob / n as f64
        }
    }

    pub fn graph(&self) -> SyntacticGraph {
        let adjacency = self.state.graph(self.tokens.len());
        let heads = extract_heads(&adjacency, false);
        SyntacticGraph {
            n: self.tokens.len(),
            adjacency,
            heads,
        }
    }
}

/// Parameters and structure needed to run decoding steps from values.
pub struct DecodeContext<'a> {
    pub store: &'a ParamStore,
    pub decoder: &'a Decoder,
    pub bank: &'a HiddenGraphBank,
}

impl DecodeContext<'_> {
    pub fn init_state(&self, enc: Arc<EncodedSource>, n_max: usize) -> Result<DecoderState> {
        if n_max == 0 {
            return Err(Error::Invalid("n_max must be at least 1".into()));
        }
        let w = self
            .decoder
            .blocks
            .iter()
            .map(|b| self.store.get(b.spatial.w0).clone())
            .collect();
        Ok(DecoderState {
            t: 0,
            w,
            a: vec![Tensor::eye(1); self.decoder.blocks.len()],
            inputs: Vec::new(),
            rows: Vec::new(),
            enc,
            n_max: n_max.min(self.decoder.n_max),
        })
    }

    /// Inserts the next node, consuming `prev_token`.
    pub fn step(&self, state: &DecoderState, prev_token: usize) -> Result<StepOutput> {
        if state.t >= state.n_max {
            return Err(Error::CapacityExceeded(state.n_max));
        }
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let sog = tape.constant(state.enc.sog.clone());
        let re = state.enc.re.as_ref().map(|r| tape.constant(r.clone()));
        let prev = StateVars {
            w: state.w.iter().map(|w| tape.constant(w.clone())).collect(),
            a: state.a.iter().map(|a| tape.constant(a.clone())).collect(),
        };
        let mut inputs = state.inputs.clone();
        inputs.push(prev_token);
        let out = self
            .decoder
            .step_on_tape(&mut tape, &p, &SourceVars { sog, re }, self.bank, &inputs, &prev)?;
        let t = inputs.len();
        let adj = tape.value(out.adjacency);
        // Node 1 holds the start token; node `k + 1` is target token `k`.
        let row: Vec<f64> = (2..=t).map(|j| adj.get(t, j)).collect();
        let mut rows = state.rows.clone();
        if t >= 2 {
            rows.push(row.clone());
        }
        let next = DecoderState {
            t,
            w: out.state.w.iter().map(|&v| tape.value(v).clone()).collect(),
            a: out.state.a.iter().map(|&v| tape.value(v).clone()).collect(),
            inputs,
            rows,
            enc: state.enc.clone(),
            n_max: state.n_max,
        };
        Ok(StepOutput {
            logits: tape.value(out.logits).data().to_vec(),
            row,
            state: next,
        })
    }

    /// Greedy decoding until the end token or `max_len` tokens.
    pub fn greedy(&self, enc: Arc<EncodedSource>, max_len: usize) -> Result<DecodeHypothesis> {
        let mut state = self.init_state(enc, max_len + 1)?;
        let mut tokens = Vec::new();
        let mut logprob = 0.0;
        let mut prev = BOS;
        let mut finished = false;
        while tokens.len() < max_len {
            let out = self.step(&state, prev)?;
            let lp = log_softmax(&out.logits);
            let tok = argmax(&lp);
            logprob += lp[tok];
            state = out.state;
            if tok == EOS {
                finished = true;
                break;
            }
            tokens.push(tok);
            prev = tok;
        }
        Ok(DecodeHypothesis {
            tokens,
            logprob,
            finished,
            state,
        })
    }

    /// Beam search over tokens, ranked by mean log-probability; each
    /// hypothesis carries its own graph state.
    pub fn beam(&self, enc: Arc<EncodedSource>, beam: usize, max_len: usize) -> Result<DecodeHypothesis> {
        if beam == 0 {
            return Err(Error::Invalid("beam size must be at least 1".into()));
        }
        let root = DecodeHypothesis {
            tokens: Vec::new(),
            logprob: 0.0,
            finished: false,
            state: self.init_state(enc, max_len + 1)?,
        };
        let mut alive = vec![root];
        let mut done: Vec<DecodeHypothesis> = Vec::new();
        loop {
            let (full, open): (Vec<_>, Vec<_>) =
                alive.into_iter().partition(|h| h.tokens.len() >= max_len);
            done.extend(full);
            alive = open;
            if alive.is_empty() || done.len() >= beam {
                break;
            }
            let mut cands: Vec<(f64, usize, usize, f64)> = Vec::new();
            let mut outs = Vec::with_capacity(alive.len());
            for (hi, h) in alive.iter().enumerate() {
                let prev = h.tokens.last().copied().unwrap_or(BOS);
                let out = self.step(&h.state, prev)?;
                let lp = log_softmax(&out.logits);
                for (tok, &l) in lp.iter().enumerate() {
                    let score = (h.logprob + l) / (h.tokens.len() + 1) as f64;
                    cands.push((score, hi, tok, l));
                }
                outs.push(out.state);
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(core::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let mut next = Vec::new();
            for &(_, hi, tok, l) in cands.iter().take(beam - done.len()) {
                let h = &alive[hi];
                let mut tokens = h.tokens.clone();
                let finished = tok == EOS;
                if !finished {
                    tokens.push(tok);
                }
                let hyp = DecodeHypothesis {
                    tokens,
                    logprob: h.logprob + l,
                    finished,
                    state: outs[hi].clone(),
                };
                if finished {
                    done.push(hyp);
                } else {
                    next.push(hyp);
                }
            }
            alive = next;
        }
        done.extend(alive);
        let mut best: Option<DecodeHypothesis> = None;
        for h in done {
            if best.as_ref().is_none_or(|b| h.score() > b.score()) {
                best = Some(h);
            }
        }
        best.ok_or_else(|| Error::Invalid("beam search produced no hypothesis".into()))
    }
}

/// Heads of a decoded graph under the spanning-tree rule.
pub fn graph_heads(adjacency: &Tensor) -> Vec<Head> {
    extract_heads(adjacency, false)
}
