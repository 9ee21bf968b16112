mod common;

use common::{concat_cols, mlp, rng, uniform};
use flowmamba_core::fio::{order_and_restore, score_points, FioScorer, OrderingScores, Permutation, SCORE_MARGIN};
use flowmamba_core::nn::ParamStore;
use flowmamba_core::{Error, Tape, Tensor};
use proptest::prelude::*;

fn scorer(c: usize, c2: usize, seed: u64) -> (ParamStore, FioScorer) {
    let mut store = ParamStore::new();
    let s = FioScorer::new(&mut store, "fio", c, c2, c, &mut rng(seed));
    (store, s)
}

fn scores_of(store: &ParamStore, s: &FioScorer, cf: &Tensor, mf: &Tensor, h: &Tensor) -> OrderingScores {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let (a, b, c) = (
        tape.constant(cf.clone()),
        tape.constant(mf.clone()),
        tape.constant(h.clone()),
    );
    score_points(&mut tape, &p, s, a, b, c).unwrap()
}

#[test]
fn zero_weights_give_zero_scores() {
    let (mut store, s) = scorer(4, 3, 1);
    for t in store.tensors_mut() {
        *t = Tensor::zeros(t.shape());
    }
    let mut r = rng(2);
    let sc = scores_of(
        &store,
        &s,
        &uniform(&[9, 4], &mut r),
        &uniform(&[9, 3], &mut r),
        &uniform(&[9, 4], &mut r),
    );
    assert_eq!(sc.0, vec![0.0; 9]);
}

#[test]
fn scores_match_mlp_oracle() {
    let (store, s) = scorer(4, 3, 3);
    let mut r = rng(4);
    let (cf, mf, h) = (
        uniform(&[11, 4], &mut r),
        uniform(&[11, 3], &mut r),
        uniform(&[11, 4], &mut r),
    );
    let sc = scores_of(&store, &s, &cf, &mf, &h);
    let expect = mlp(&store, &s.mlp, &concat_cols(&[&cf, &mf, &h]));
    for (a, b) in sc.0.iter().zip(expect.data()) {
        assert!((a - b.tanh()).abs() < 1e-14);
    }
}

#[test]
fn saturated_scores_stay_inside_unit_interval() {
    let (mut store, s) = scorer(4, 3, 5);
    for t in store.tensors_mut() {
        *t = t.map(|v| v * 1e4);
    }
    let mut r = rng(6);
    let sc = scores_of(
        &store,
        &s,
        &uniform(&[20, 4], &mut r),
        &uniform(&[20, 3], &mut r),
        &uniform(&[20, 4], &mut r),
    );
    assert!(sc.0.iter().all(|v| v.abs() <= 1.0 - SCORE_MARGIN));
}

#[test]
fn projection_scorer_sorts_by_channel() {
    let (c, c2) = (3, 2);
    let (mut store, s) = scorer(c, c2, 7);
    let (l0, l1) = (&s.mlp.layers[0], &s.mlp.layers[1]);
    // hidden unit 0 copies input channel 1 of mf; output reads hidden 0.
    let mut w0 = Tensor::zeros(&[2 * c + c2, c]);
    w0.row_mut(c + 1)[0] = 1.0;
    *store.get_mut(l0.weight) = w0;
    *store.get_mut(l0.bias.unwrap()) = Tensor::zeros(&[c]);
    let mut w1 = Tensor::zeros(&[c, 1]);
    w1.row_mut(0)[0] = 1.0;
    *store.get_mut(l1.weight) = w1;
    *store.get_mut(l1.bias.unwrap()) = Tensor::zeros(&[1]);

    let mut r = rng(8);
    // SiLU is monotone on positive inputs.
    let mf = Tensor::uniform(&[15, c2], 0.0, 2.0, &mut r);
    let sc = scores_of(&store, &s, &uniform(&[15, c], &mut r), &mf, &uniform(&[15, c], &mut r));
    let mut by_channel: Vec<usize> = (0..15).collect();
    by_channel.sort_by(|&a, &b| mf.at(a, 1).total_cmp(&mf.at(b, 1)));
    assert_eq!(Permutation::from_scores(&sc).forward(), by_channel.as_slice());
}

#[test]
fn score_points_rejects_row_mismatch() {
    let (store, s) = scorer(2, 2, 9);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let a = tape.constant(Tensor::zeros(&[4, 2]));
    let b = tape.constant(Tensor::zeros(&[5, 2]));
    assert!(matches!(
        score_points(&mut tape, &p, &s, a, b, a),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn ascending_scores_give_identity() {
    let p = Permutation::from_scores(&OrderingScores(vec![-0.5, -0.1, 0.0, 0.3, 0.9]));
    assert!(p.is_identity());
}

#[test]
fn descending_scores_give_reversal() {
    let p = Permutation::from_scores(&OrderingScores(vec![0.9, 0.3, 0.0, -0.1, -0.5]));
    assert_eq!(p.forward(), &[4, 3, 2, 1, 0]);
}

#[test]
fn ties_keep_input_order() {
    let p = Permutation::from_scores(&OrderingScores(vec![0.2, -0.3, 0.2, -0.3, 0.2]));
    assert_eq!(p.forward(), &[1, 3, 0, 2, 4]);
}

#[test]
fn from_forward_rejects_non_bijection() {
    assert!(matches!(
        Permutation::from_forward(vec![0, 0, 1]),
        Err(Error::Contract(_))
    ));
    assert!(matches!(Permutation::from_forward(vec![0, 3]), Err(Error::Contract(_))));
}

#[test]
fn order_and_restore_on_tape() {
    let mut r = rng(10);
    let x = uniform(&[7, 3], &mut r);
    let scores = OrderingScores((0..7).map(|i| ((i * 5) % 7) as f64 / 10.0).collect());
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (ordered, perm) = order_and_restore(&mut tape, xv, &scores).unwrap();
    for pos in 0..7 {
        assert_eq!(tape.value(ordered).row(pos), x.row(perm.forward()[pos]));
    }
    for w in perm.forward().windows(2) {
        assert!(scores.0[w[0]] <= scores.0[w[1]]);
    }
    let back = perm.restore(&mut tape, ordered).unwrap();
    assert_eq!(tape.value(back), &x);

    let short = OrderingScores(vec![0.0; 3]);
    assert!(matches!(
        order_and_restore(&mut tape, xv, &short),
        Err(Error::Dimension { .. })
    ));
}

proptest! {
    #[test]
    fn apply_then_restore_is_identity(scores in prop::collection::vec(-1.0f64..1.0, 1..60), seed in any::<u64>()) {
        let n = scores.len();
        let perm = Permutation::from_scores(&OrderingScores(scores.clone()));
        let payload = uniform(&[n, 2], &mut rng(seed));
        let sorted = perm.apply_tensor(&payload);
        prop_assert_eq!(perm.restore_tensor(&sorted), payload.clone());
        for i in 0..n {
            prop_assert_eq!(perm.inverse()[perm.forward()[i]], i);
        }
        // Rows are only moved, never altered.
        let mut a: Vec<Vec<u64>> = (0..n).map(|i| payload.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        let mut b: Vec<Vec<u64>> = (0..n).map(|i| sorted.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn sorting_ignores_input_order(scores in prop::collection::hash_set(-1000i32..1000, 1..40), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let scores: Vec<f64> = scores.into_iter().map(|v| v as f64 / 1000.0).collect();
        let n = scores.len();
        let mut shuffle: Vec<usize> = (0..n).collect();
        shuffle.shuffle(&mut rng(seed));
        let shuffled: Vec<f64> = shuffle.iter().map(|&i| scores[i]).collect();
        let a = Permutation::from_scores(&OrderingScores(scores.clone()));
        let b = Permutation::from_scores(&OrderingScores(shuffled));
        let sa: Vec<f64> = a.forward().iter().map(|&i| scores[i]).collect();
        let sb: Vec<f64> = b.forward().iter().map(|&i| scores[shuffle[i]]).collect();
        prop_assert_eq!(sa, sb);
    }
}
