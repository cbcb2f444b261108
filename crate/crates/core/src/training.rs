//! Joint token/graph objective, Adam with global-norm clipping, and the
//! epoch loop.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{smooth_l1_derivative, smooth_l1_value, Tape, Var};
use crate::config::TrainConfig;
use crate::corpus::EncodedExample;
use crate::error::{Error, Result};
use crate::graph::{gold_prefix_adjacency, SyntacticGraph};
use crate::model::{shifted_targets, GraphFeed, Model};
use crate::gradcheck::{check_gradients, FdOptions, FdReport};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Smooth-L1 value and derivative.
pub fn smooth_l1(x: f64) -> (f64, f64) {
    (smooth_l1_value(x), smooth_l1_derivative(x))
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub graph: Var,
}

/// Mean token cross-entropy plus smooth-L1 between the predicted and gold
/// prefix adjacency, summed over entries and over steps `1..=n`.
pub fn joint_loss(
    tape: &mut Tape,
    logits: &[Var],
    targets: &[usize],
    adjacency: &[Var],
    gold: &SyntacticGraph,
) -> Result<LossVars> {
    if logits.len() != targets.len() {
        return Err(Error::Invalid(format!(
            "{} logit rows for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if adjacency.len() < gold.n {
        return Err(Error::Invalid(format!(
            "{} adjacency steps for a {}-token gold graph",
            adjacency.len(),
            gold.n
        )));
    }
    let rows = tape.concat_rows(logits)?;
    let ce = tape.cross_entropy(rows, targets)?;
    let mut terms = Vec::with_capacity(gold.n);
    for t in 1..=gold.n {
        let pred = adjacency[t - 1];
        let want = gold_prefix_adjacency(gold, t)?;
        if tape.value(pred).shape() != want.shape() {
            return Err(Error::ShapeMismatch {
                op: "graph loss",
                left: tape.value(pred).shape().to_vec(),
                right: want.shape().to_vec(),
            });
        }
        let diff = tape.offset(pred, &want.map(|v| -v))?;
        let s = tape.smooth_l1(diff);
        terms.push(tape.sum(s));
    }
    let graph = if terms.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let cat = tape.concat_cols(&terms)?;
        tape.sum(cat)
    };
    let total = tape.add(ce, graph)?;
    Ok(LossVars { total, ce, graph })
}

/// Loss of one example built on `tape` with every parameter bound.
pub fn example_loss(
    model: &Model,
    tape: &mut Tape,
    p: &Bound,
    ex: &EncodedExample,
    feed: GraphFeed<'_>,
) -> Result<LossVars> {
    let fwd = model.forward_sentence(tape, p, &ex.src, &ex.src_heads, &ex.tgt, feed)?;
    joint_loss(tape, &fwd.logits, &shifted_targets(&ex.tgt), &fwd.adjacency, &ex.gold)
}

#[derive(Clone, Debug)]
pub struct ExampleGrad {
    pub ce: f64,
    pub graph: f64,
    pub grads: Vec<Tensor>,
}

pub fn example_gradients(model: &Model, ex: &EncodedExample) -> Result<ExampleGrad> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let loss = example_loss(model, &mut tape, &p, ex, GraphFeed::Free)?;
    let (ce, graph) = (tape.value(loss.ce).item(), tape.value(loss.graph).item());
    if !ce.is_finite() || !graph.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss is not finite (token {ce}, graph {graph})"
        )));
    }
    let g = tape.backward(loss.total)?;
    Ok(ExampleGrad {
        ce,
        graph,
        grads: p.gradients(&tape, &g),
    })
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum();
    let norm = libm::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            m: store.tensors().iter().map(Tensor::zeros_like).collect(),
            v: store.tensors().iter().map(Tensor::zeros_like).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], cfg: &TrainConfig) {
        self.step += 1;
        let b1t = 1.0 - libm::pow(cfg.beta1, self.step as f64);
        let b2t = 1.0 - libm::pow(cfg.beta2, self.step as f64);
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mh = m[j] / b1t;
                let vh = v[j] / b2t;
                *x -= cfg.lr * mh / (libm::sqrt(vh) + cfg.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean token cross-entropy per example.
    pub ce: f64,
    /// Mean graph loss per example.
    pub graph: f64,
}

impl EpochStats {
    pub fn loss(&self) -> f64 {
        self.ce + self.graph
    }
}

/// Mini-batch trainer holding optimiser state across epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub adam: Adam,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: &Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            adam: Adam::new(&model.store),
            cfg,
            epoch: 0,
        })
    }

    /// Visiting order for an epoch, fixed by the seed.
    pub fn order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch as u64));
        idx.shuffle(&mut rng);
        idx
    }

    /// One pass over `data`; losses are averaged over each batch before the
    /// update.
    pub fn train_epoch(&mut self, model: &mut Model, data: &[EncodedExample]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::Invalid("training corpus is empty".into()));
        }
        self.epoch += 1;
        let order = self.order(data.len(), self.epoch);
        let (mut ce_sum, mut graph_sum) = (0.0, 0.0);
        for batch in order.chunks(self.cfg.batch_size) {
            let mut acc: Vec<Tensor> = model.store.tensors().iter().map(Tensor::zeros_like).collect();
            for &i in batch {
                let eg = example_gradients(model, &data[i]).map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("example {i}, epoch {}: {m}", self.epoch)),
                    other => other,
                })?;
                ce_sum += eg.ce;
                graph_sum += eg.graph;
                for (a, g) in acc.iter_mut().zip(&eg.grads) {
                    a.add_assign(g);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for a in acc.iter_mut() {
                for v in a.data_mut() {
                    *v *= inv;
                }
            }
            clip_global_norm(&mut acc, self.cfg.clip_norm);
            self.adam.update(&mut model.store, &acc, &self.cfg);
        }
        let n = data.len() as f64;
        Ok(EpochStats {
            epoch: self.epoch,
            ce: ce_sum / n,
            graph: graph_sum / n,
        })
    }
}

/// Mean loss over `data` without updating anything.
pub fn mean_loss(model: &Model, data: &[EncodedExample]) -> Result<EpochStats> {
    let (mut ce, mut graph) = (0.0, 0.0);
    for ex in data {
        let mut tape = Tape::new();
        let p = model.store.bind_frozen(&mut tape);
        let l = example_loss(model, &mut tape, &p, ex, GraphFeed::Free)?;
        ce += tape.value(l.ce).item();
        graph += tape.value(l.graph).item();
    }
    let n = data.len().max(1) as f64;
    Ok(EpochStats {
        epoch: 0,
        ce: ce / n,
        graph: graph / n,
    })
}

/// Central finite differences against reverse mode for the full joint loss
/// of one example, over every scalar parameter.
pub fn joint_loss_gradcheck(model: &Model, ex: &EncodedExample, opts: FdOptions) -> Result<FdReport> {
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let p = Bound::from_vars(vars.to_vec());
        Ok(example_loss(model, tape, &p, ex, GraphFeed::Free)?.total)
    };
    check_gradients(f, model.store.tensors(), opts)
}
