use graphdec_core::autodiff::{Tape, Var};
use graphdec_core::gradcheck::{check_gradients, FdOptions};
use graphdec_core::params::{Bound, Builder, Init, ParamStore};
use graphdec_core::spatial::{
    attention_adjacency, gru_weight_update, pad_adjacency, pinned, refine_adjacency, SpatialLayer,
};
use graphdec_core::temporal::{dilated_causal_conv, temporal_block, TemporalLayer};
use graphdec_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Symmetric adjacency over `n` nodes with the encoder and diagonal pinned.
fn adjacency(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut a = pinned(n);
    for i in 2..n {
        for j in 1..i {
            let v = rng.random_range(0.0..1.0);
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    a
}

fn temporal_setup(d: usize) -> (ParamStore, TemporalLayer) {
    let mut store = ParamStore::new();
    let mut init = Init::new(4);
    let layer = TemporalLayer::build(&mut Builder::new(&mut store, &mut init, "t."), d).unwrap();
    (store, layer)
}

fn run_block(store: &ParamStore, layer: &TemporalLayer, y: &Tensor, sog: &Tensor, a: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let (y, sog, a) = (t.constant(y.clone()), t.constant(sog.clone()), t.constant(a.clone()));
    let out = temporal_block(&mut t, &p, layer, y, sog, a).unwrap();
    t.value(out).clone()
}

#[test]
fn temporal_prefix_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 5;
    let (store, layer) = temporal_setup(d);
    let y = random(&mut rng, 6, d);
    let sog = random(&mut rng, 1, d);
    let a = adjacency(&mut rng, 7);
    let full = run_block(&store, &layer, &y, &sog, &a);
    for t in 1..=6 {
        let yt = Tensor::from_rows(&(0..t).map(|i| y.row_slice(i).to_vec()).collect::<Vec<_>>());
        let at = Tensor::from_rows(&(0..=t).map(|i| a.row_slice(i)[..=t].to_vec()).collect::<Vec<_>>());
        let part = run_block(&store, &layer, &yt, &sog, &at);
        for i in 0..t {
            assert_eq!(part.row_slice(i), full.row_slice(i), "prefix {t}, row {i}");
        }
    }
}

#[test]
fn causal_unit_receptive_field() {
    // Kernel 2 with dilations 1 then 2 reaches back three steps.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (f1, f2) = (random(&mut rng, 2, 1), random(&mut rng, 2, 1));
    let conv = |y: &Tensor| {
        let mut t = Tape::new();
        let (yv, a, b) = (t.constant(y.clone()), t.constant(f1.clone()), t.constant(f2.clone()));
        let h = dilated_causal_conv(&mut t, yv, a, 1).unwrap();
        let h = dilated_causal_conv(&mut t, h, b, 2).unwrap();
        t.value(h).clone()
    };
    let y = random(&mut rng, 10, 1);
    let base = conv(&y);
    for k in 0..10 {
        let mut poked = y.clone();
        poked.set(k, 0, y.get(k, 0) + 1.0);
        let out = conv(&poked);
        for t in 0..10 {
            let changed = out.get(t, 0) != base.get(t, 0);
            assert_eq!(changed, t >= k && t - k <= 3, "input {k}, output {t}");
        }
    }
}

#[test]
fn zero_sequence_stays_zero() {
    let (store, layer) = temporal_setup(4);
    let out = run_block(&store, &layer, &Tensor::zeros(3, 4), &Tensor::zeros(1, 4), &pinned(4));
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn temporal_block_gradients() {
    let d = 3;
    let (store, layer) = temporal_setup(d);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = random(&mut rng, 4, d);
    let sog = random(&mut rng, 1, d);
    let a = adjacency(&mut rng, 5);
    let mut params = store.tensors().to_vec();
    params.push(y);
    let n = store.len();
    let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let p = Bound::from_vars(v[..n].to_vec());
        let s = t.constant(sog.clone());
        let av = t.constant(a.clone());
        let out = temporal_block(t, &p, &layer, v[n], s, av)?;
        let sq = t.mul(out, out)?;
        Ok(t.sum(sq))
    };
    let r = check_gradients(f, &params, FdOptions::default()).unwrap();
    assert!(r.max_rel_error < 1e-5, "{:.3e}", r.max_rel_error);
}

fn spatial_setup(d: usize) -> (ParamStore, SpatialLayer) {
    let mut store = ParamStore::new();
    let mut init = Init::new(8);
    let layer = SpatialLayer::build(&mut Builder::new(&mut store, &mut init, "s."), d, d).unwrap();
    (store, layer)
}

#[test]
fn gru_weight_update_through_three_steps() {
    let d = 3;
    let (store, layer) = spatial_setup(d);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ys: Vec<Tensor> = (0..3).map(|k| random(&mut rng, k + 2, d)).collect();
    let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let p = Bound::from_vars(v.to_vec());
        let mut w = p.var(layer.w0);
        for y in &ys {
            let yv = t.constant(y.clone());
            w = gru_weight_update(t, &p, &layer.gru, yv, w)?;
        }
        let sq = t.mul(w, w)?;
        Ok(t.sum(sq))
    };
    let r = check_gradients(f, store.tensors(), FdOptions::default()).unwrap();
    assert!(r.max_rel_error < 1e-5, "{:.3e}", r.max_rel_error);
    let gru_ids = [
        layer.gru.pz, layer.gru.qz, layer.gru.bz, layer.gru.pr, layer.gru.qr, layer.gru.br, layer.gru.pw,
        layer.gru.qw, layer.gru.bw,
    ];
    for id in gru_ids {
        assert!(r.checked.iter().any(|c| c.param == id.0), "{} unchecked", store.name(id));
    }
}

#[test]
fn attention_ordering_matches_scalar_recomputation() {
    let d = 4;
    let (store, layer) = spatial_setup(d);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let y = random(&mut rng, 4, d);
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let yv = t.constant(y.clone());
    let att = attention_adjacency(&mut t, &p, &layer.att, yv, 0.2).unwrap();
    let att = t.value(att).clone();
    let (w, psi) = (store.get(layer.att.w), store.get(layer.att.psi));
    let wy: Vec<Vec<f64>> = (0..4)
        .map(|i| (0..d).map(|c| (0..d).map(|k| y.get(i, k) * w.get(k, c)).sum()).collect())
        .collect();
    let score = |i: usize, j: usize| {
        let s: f64 = (0..d).map(|c| psi.get(c, 0) * wy[i][c] + psi.get(d + c, 0) * wy[j][c]).sum();
        if s > 0.0 { s } else { 0.2 * s }
    };
    for i in 0..4 {
        let z: f64 = (0..=i).map(|j| score(i, j).exp()).sum();
        let row: f64 = (0..4).map(|j| att.get(i, j)).sum();
        assert!((row - 1.0).abs() <= 1e-12);
        for j in 0..4 {
            let want = if j <= i { score(i, j).exp() / z } else { 0.0 };
            assert!((att.get(i, j) - want).abs() <= 1e-12, "({i}, {j})");
            if j > i {
                assert_eq!(att.get(i, j), 0.0);
            }
        }
    }
}

#[test]
fn refined_adjacency_invariants() {
    let (store, layer) = spatial_setup(3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in 1..6 {
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let prev = t.constant(adjacency(&mut rng, n));
        let padded = pad_adjacency(&mut t, prev).unwrap();
        let y = t.constant(random(&mut rng, n + 1, 3));
        let att = attention_adjacency(&mut t, &p, &layer.att, y, 0.2).unwrap();
        let a = refine_adjacency(&mut t, &p, &layer.refine, padded, att).unwrap();
        let a = t.value(a);
        assert_eq!(a.max_abs_diff(&a.transpose()), 0.0);
        for i in 0..=n {
            assert_eq!(a.get(i, i), 1.0);
            assert_eq!(a.get(0, i), 1.0);
            for j in 1..i {
                assert!(a.get(i, j) > 0.0 && a.get(i, j) < 1.0);
            }
        }
    }
}
