use graphdec_core::autodiff::{Tape, Var};
use graphdec_core::gradcheck::{check_gradients, FdOptions};
use graphdec_core::graph::{extract_heads, gold_prefix_adjacency, normalize_adjacency, Head, SyntacticGraph};
use graphdec_core::params::{Builder, Init, ParamStore};
use graphdec_core::rw_kernel::{
    binary_graphs, brute_force_walk_count, graph_representation, hidden_adjacency, walk_kernel, walk_kernel_dense,
    walk_kernel_on_tape, HiddenGraphBank,
};
use graphdec_core::{Result, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn symmetric(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = rng.random_range(0.0..1.0);
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    a
}

fn permute(a: &Tensor, y: &Tensor, perm: &[usize]) -> (Tensor, Tensor) {
    let n = perm.len();
    let mut pa = Tensor::zeros(n, n);
    let mut py = Tensor::zeros(n, y.cols());
    for i in 0..n {
        for j in 0..n {
            pa.set(i, j, a.get(perm[i], perm[j]));
        }
        for c in 0..y.cols() {
            py.set(i, c, y.get(perm[i], c));
        }
    }
    (pa, py)
}

#[test]
fn path_pairs_and_edge_free_graphs() {
    let one = Tensor::ones(1, 1);
    let lone = Tensor::zeros(1, 1);
    assert_eq!(walk_kernel(&lone, &one, &lone, &one, 0).unwrap(), 1.0);
    assert_eq!(walk_kernel(&lone, &one, &lone, &one, 1).unwrap(), 0.0);
    let path2 = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
    let path3 = Tensor::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
    let (u2, u3) = (Tensor::ones(2, 1), Tensor::ones(3, 1));
    assert_eq!(brute_force_walk_count(&path2, &u2, &path3, &u3, 1).unwrap(), 8.0);
    assert_eq!(walk_kernel(&path2, &u2, &path3, &u3, 1).unwrap(), 8.0);
}

#[test]
fn exhaustive_small_grid_is_exact() {
    for n in 1..=3 {
        for g in binary_graphs(n) {
            for m in 1..=2 {
                for h in binary_graphs(m) {
                    for p in 0..=3 {
                        let (y, k) = (Tensor::ones(n, 1), Tensor::ones(m, 1));
                        let want = brute_force_walk_count(&g, &y, &h, &k, p).unwrap();
                        let got = walk_kernel(&g, &y, &h, &k, p).unwrap();
                        assert!((want - got).abs() <= 1e-9, "n={n} m={m} p={p}: {want} vs {got}");
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fast_path_matches_dense_kronecker(seed in any::<u64>(), n in 1usize..6, m in 1usize..5, d in 1usize..4, p in 0u32..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, ah) = (symmetric(&mut rng, n), symmetric(&mut rng, m));
        let (y, kh) = (random(&mut rng, n, d), random(&mut rng, m, d));
        let fast = walk_kernel(&a, &y, &ah, &kh, p).unwrap();
        let dense = walk_kernel_dense(&a, &y, &ah, &kh, p).unwrap();
        prop_assert!((fast - dense).abs() <= 1e-10 * dense.abs().max(1.0));
    }

    #[test]
    fn relabelling_nodes_preserves_the_kernel(seed in any::<u64>(), n in 2usize..6, p in 0u32..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, ah) = (symmetric(&mut rng, n), symmetric(&mut rng, 3));
        let (y, kh) = (random(&mut rng, n, 2), random(&mut rng, 3, 2));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let (pa, py) = permute(&a, &y, &perm);
        let k0 = walk_kernel(&a, &y, &ah, &kh, p).unwrap();
        let k1 = walk_kernel(&pa, &py, &ah, &kh, p).unwrap();
        prop_assert!((k0 - k1).abs() <= 1e-10 * k0.abs().max(1.0));
    }

    #[test]
    fn normalised_adjacency_stays_symmetric(seed in any::<u64>(), n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = symmetric(&mut rng, n);
        let norm = normalize_adjacency(&a).unwrap();
        prop_assert!(norm.max_abs_diff(&norm.transpose()) <= 1e-12);
    }
}

#[test]
fn kernel_gradients_for_all_four_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = vec![symmetric(&mut rng, 4), random(&mut rng, 4, 3), random(&mut rng, 3, 3), random(&mut rng, 3, 3)];
    let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let ah = hidden_adjacency(t, v[2])?;
        let ks = walk_kernel_on_tape(t, v[0], v[1], ah, v[3], &[0, 1, 2])?;
        let all = t.concat_cols(&ks)?;
        Ok(t.sum(all))
    };
    let r = check_gradients(f, &params, FdOptions::default()).unwrap();
    assert!(r.max_rel_error < 1e-6, "{:.3e}", r.max_rel_error);
}

#[test]
fn representation_entries_are_individual_kernels() {
    let mut store = ParamStore::new();
    let mut init = Init::new(9);
    let bank = HiddenGraphBank::build(&mut Builder::new(&mut store, &mut init, "rw."), (2, 4), (2, 3), 3, &[0, 1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (a, y) = (symmetric(&mut rng, 4), random(&mut rng, 4, 3));
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let (av, yv) = (t.constant(a.clone()), t.constant(y.clone()));
    let r = graph_representation(&mut t, av, yv, &bank, &p).unwrap();
    let row = t.value(r).clone();
    assert_eq!(row.shape(), &[1, bank.width()]);
    let mut col = 0;
    for g in bank.graphs() {
        let ah = hidden_adjacency(&mut t, p.var(g.adj)).unwrap();
        let ah = t.value(ah).clone();
        for &step in &bank.steps {
            let want = walk_kernel(&a, &y, &ah, store.get(g.emb), step).unwrap();
            assert_eq!(row.data()[col], want);
            col += 1;
        }
    }
}

#[test]
fn hidden_adjacency_is_open_unit_interval_with_zero_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut t = Tape::new();
    let free = t.constant(random(&mut rng, 5, 5).map(|v| 4.0 * v));
    let ah = hidden_adjacency(&mut t, free).unwrap();
    let ah = t.value(ah);
    for i in 0..5 {
        for j in 0..5 {
            let v = ah.get(i, j);
            if i == j {
                assert_eq!(v, 0.0);
            } else {
                assert!(v > 0.0 && v < 1.0);
                assert_eq!(v, ah.get(j, i));
            }
        }
    }
}

fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> Vec<Head> {
    // Random recursive tree: each node after the first attaches to an
    // earlier one, then labels are shuffled.
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut heads = vec![None; n];
    for k in 1..n {
        let parent = rng.random_range(0..k);
        heads[perm[k]] = Some(perm[parent]);
    }
    heads
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gold_prefixes_are_symmetric_restrictions(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = SyntacticGraph::gold(&random_tree(&mut rng, n)).unwrap();
        for t in 1..=n {
            let a = gold_prefix_adjacency(&g, t).unwrap();
            prop_assert_eq!(a.max_abs_diff(&a.transpose()), 0.0);
            for i in 0..t {
                prop_assert_eq!(a.get(i, i), 1.0);
                for j in 0..t {
                    if i != j {
                        prop_assert_eq!(a.get(i, j), g.adjacency.get(i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn spanning_tree_heads_recover_the_arc_set(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = SyntacticGraph::gold(&random_tree(&mut rng, n)).unwrap();
        let heads = extract_heads(&g.adjacency, false);
        let back = SyntacticGraph::from_heads(&heads).unwrap();
        prop_assert_eq!(back.adjacency, g.adjacency);
        prop_assert_eq!(heads.iter().filter(|h| h.is_none()).count(), 1);
    }
}
