//! The assembled translation model: encoder, hidden-graph bank and decoder
//! over one parameter store.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::decoder::{
    scale_walk_row, DecodeContext, DecodeHypothesis, Decoder, EncodedSource, SourceVars, StateVars,
    BOS, EOS,
};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::{gold_prefix_adjacency, Head, SyntacticGraph};
use crate::params::{Bound, Builder, Init, ParamStore};
use crate::rw_kernel::HiddenGraphBank;
use crate::spatial::pinned;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub bank: HiddenGraphBank,
    pub decoder: Decoder,
}

/// Teacher-forced pass over one sentence, on a tape.
#[derive(Clone, Debug)]
pub struct SentenceVars {
    /// One `1 × V` row per step; the last predicts the end token.
    pub logits: Vec<Var>,
    /// Last-block adjacency over target tokens `1..=k` for `k = 1..=n`, read
    /// at step `k + 1` where token `k` is an input.
    pub adjacency: Vec<Var>,
    pub source: SourceVars,
}

/// How the previous adjacency enters each step during a teacher-forced pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GraphFeed<'a> {
    /// The model's own previous adjacency (free generation).
    Free,
    /// The gold prefix adjacency replaces the previous adjacency.
    Gold(&'a SyntacticGraph),
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let encoder = Encoder::build(&mut Builder::new(&mut store, &mut init, "enc."), &cfg)?;
        let bank = HiddenGraphBank::build(
            &mut Builder::new(&mut store, &mut init, "rw."),
            (cfg.global_graphs, cfg.global_nodes),
            (cfg.local_graphs, cfg.local_nodes),
            cfg.d_rw,
            &cfg.rw_steps,
        )?;
        let decoder = Decoder::build(&mut Builder::new(&mut store, &mut init, "dec."), &cfg)?;
        Ok(Self {
            cfg,
            store,
            encoder,
            bank,
            decoder,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn encode_on_tape(&self, tape: &mut Tape, p: &Bound, src: &[usize], heads: &[Head]) -> Result<SourceVars> {
        let bank = self.cfg.uses_source_walk().then_some(&self.bank);
        let out = self.encoder.encode(tape, p, src, heads, bank)?;
        let re = match out.re {
            Some(r) => Some(scale_walk_row(tape, r, src.len(), &self.bank)?),
            None => None,
        };
        Ok(SourceVars { sog: out.sog, re })
    }

    /// Encoder products as values, for stepwise decoding.
    pub fn encode(&self, src: &[usize], heads: &[Head]) -> Result<Arc<EncodedSource>> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let s = self.encode_on_tape(&mut tape, &p, src, heads)?;
        Ok(Arc::new(EncodedSource {
            sog: tape.value(s.sog).clone(),
            re: s.re.map(|r| tape.value(r).clone()),
        }))
    }

    pub fn context(&self) -> DecodeContext<'_> {
        DecodeContext {
            store: &self.store,
            decoder: &self.decoder,
            bank: &self.bank,
        }
    }

    pub fn greedy(&self, src: &[usize], heads: &[Head], max_len: usize) -> Result<DecodeHypothesis> {
        let enc = self.encode(src, heads)?;
        self.context().greedy(enc, max_len)
    }

    pub fn beam(&self, src: &[usize], heads: &[Head], beam: usize, max_len: usize) -> Result<DecodeHypothesis> {
        let enc = self.encode(src, heads)?;
        self.context().beam(enc, beam, max_len)
    }

    /// Runs steps `1..=tgt.len()+1` with gold tokens as inputs (shifted by one).
    pub fn forward_sentence(
        &self,
        tape: &mut Tape,
        p: &Bound,
        src: &[usize],
        src_heads: &[Head],
        tgt: &[usize],
        feed: GraphFeed<'_>,
    ) -> Result<SentenceVars> {
        let steps = tgt.len() + 1;
        if steps > self.cfg.n_max {
            return Err(Error::CapacityExceeded(self.cfg.n_max));
        }
        let source = self.encode_on_tape(tape, p, src, src_heads)?;
        let mut inputs = Vec::with_capacity(steps);
        inputs.push(BOS);
        inputs.extend_from_slice(&tgt[..steps - 1]);
        let mut state = self.decoder.initial_state_vars(tape, p);
        let mut logits = Vec::with_capacity(steps);
        let mut adjacency = Vec::with_capacity(steps - 1);
        for t in 1..=steps {
            if let GraphFeed::Gold(g) = feed {
                if t > 1 {
                    let gold = forced_adjacency(g, t - 2)?;
                    let forced = tape.constant(gold);
                    state = StateVars {
                        a: state.a.iter().map(|_| forced).collect(),
                        ..state
                    };
                }
            }
            let out = self
                .decoder
                .step_on_tape(tape, p, &source, &self.bank, &inputs[..t], &state)?;
            if t > 1 {
                let rows = tape.slice_rows(out.adjacency, 2, t + 1)?;
                adjacency.push(tape.slice_cols(rows, 2, t + 1)?);
            }
            logits.push(out.logits);
            state = out.state;
        }
        Ok(SentenceVars {
            logits,
            adjacency,
            source,
        })
    }

    /// Forced-reference decoding: gold tokens are fed and the graph the model
    /// emits along the way is collected.
    pub fn forced_graph(&self, src: &[usize], src_heads: &[Head], tgt: &[usize]) -> Result<Tensor> {
        let ctx = self.context();
        let enc = self.encode(src, src_heads)?;
        let mut state = ctx.init_state(enc, tgt.len() + 1)?;
        let mut prev = BOS;
        for &tok in tgt {
            state = ctx.step(&state, prev)?.state;
            prev = tok;
        }
        state = ctx.step(&state, prev)?.state;
        Ok(state.graph(tgt.len()))
    }
}

/// Gold prefix over `t` target tokens with the encoder and start nodes
/// prepended.
fn forced_adjacency(g: &SyntacticGraph, t: usize) -> Result<Tensor> {
    let mut a = pinned(t + 2);
    if t == 0 {
        return Ok(a);
    }
    let inner = gold_prefix_adjacency(g, t)?;
    for i in 0..t {
        for j in 0..t {
            a.set(i + 2, j + 2, inner.get(i, j));
        }
    }
    Ok(a)
}

/// Target ids for the cross-entropy term: the sentence then the end token.
pub fn shifted_targets(tgt: &[usize]) -> Vec<usize> {
    let mut v = tgt.to_vec();
    v.push(EOS);
    v
}
