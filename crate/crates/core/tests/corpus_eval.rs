use graphdec_core::config::ModelConfig;
use graphdec_core::corpus::{encode_all, split_held_out, verb_final_alignment, ToyGrammar, MAX_SENTENCE};
use graphdec_core::graph::Head;
use graphdec_core::metrics::{evaluate, uas, EvalOptions};
use graphdec_core::Model;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

fn arcs(heads: &[Head]) -> BTreeSet<(usize, usize)> {
    heads.iter().enumerate().filter_map(|(i, h)| h.map(|h| (i, h))).collect()
}

#[test]
fn arcs_are_isomorphic_under_the_alignment() {
    let corpus = ToyGrammar::new(1).generate(2000, 10).unwrap();
    let dict = ToyGrammar::dictionary();
    for ex in &corpus {
        ex.validate().unwrap();
        assert!(ex.src.len() <= MAX_SENTENCE);
        let align = verb_final_alignment(&ex.src_heads).unwrap();
        let mapped: BTreeSet<_> = arcs(&ex.src_heads).into_iter().map(|(d, h)| (align[d], align[h])).collect();
        assert_eq!(mapped, arcs(&ex.tgt_heads));
        for (i, w) in ex.src.iter().enumerate() {
            assert_eq!(dict[w.as_str()], ex.tgt[align[i]]);
        }
        let roots = |h: &[Head]| h.iter().filter(|x| x.is_none()).count();
        assert_eq!((roots(&ex.src_heads), roots(&ex.tgt_heads)), (1, 1));
        assert_eq!(ex.tgt_heads.last(), Some(&None));
        assert_eq!(uas(&ex.tgt_heads, &ex.tgt_heads).unwrap(), 1.0);
    }
}

#[test]
fn generation_is_seed_stable() {
    let g = ToyGrammar::new(42);
    assert_eq!(g.generate(300, 10).unwrap(), g.generate(300, 10).unwrap());
    assert_ne!(g.generate(300, 10).unwrap(), ToyGrammar::new(43).generate(300, 10).unwrap());
    assert!(g.generate(5, MAX_SENTENCE - 1).is_err());
    assert!(g.generate(0, 10).is_err());
    assert!(ToyGrammar::vocab().len() <= 40);
}

#[test]
fn held_out_is_the_trailing_tenth() {
    let corpus = ToyGrammar::new(2).generate(2200, 10).unwrap();
    let (train, held) = split_held_out(&corpus, 200);
    assert_eq!((train.len(), held.len()), (2000, 200));
    assert_eq!(&held[..], &corpus[2000..]);
}

#[test]
fn shuffled_heads_never_exceed_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for ex in ToyGrammar::new(3).generate(200, 10).unwrap() {
        let gold = &ex.tgt_heads;
        let mut pred = gold.clone();
        pred.shuffle(&mut rng);
        let u = uas(&pred, gold).unwrap();
        assert!((0.0..=1.0).contains(&u));
        assert_eq!(uas(gold, gold).unwrap(), 1.0);
    }
}

#[test]
fn forced_evaluation_is_exact_and_bounded() {
    let vocab = ToyGrammar::vocab();
    let model = Model::new(ModelConfig::tiny(vocab.len()), 4).unwrap();
    let data = encode_all(&ToyGrammar::new(4).generate(20, 10).unwrap(), &vocab).unwrap();
    let forced = evaluate(&model, &data, EvalOptions { beam: 2, max_len: 10, forced: true, smooth_bleu: false }).unwrap();
    assert_eq!(forced.exact_match, 1.0);
    assert_eq!(forced.bleu4, 1.0);
    assert!((0.0..=1.0).contains(&forced.uas));
    assert_eq!(forced.sentences.len(), 20);
    let free = evaluate(&model, &data, EvalOptions { beam: 2, max_len: 10, forced: false, smooth_bleu: true }).unwrap();
    for r in [&free.exact_match, &free.bleu4, &free.uas] {
        assert!((0.0..=1.0).contains(r));
    }
    assert!(evaluate(&model, &data[..0], EvalOptions { beam: 2, max_len: 10, forced: true, smooth_bleu: false }).is_err());
}
