use atcl::adversarial::{build_adversarial_batch, fgm_perturb, select_candidates, AdversarialPlan, FgmSign};
use atcl::autodiff::{grad_check_many, Graph, Tensor, Var};
use atcl::contrastive::{contrastive_loss, contrastive_loss_values, cosine_similarity, sample_negatives, NegativeSet};
use atcl::text::{TokenMatrix, Vocabulary};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #[test]
    fn fgm_step_has_length_epsilon_and_signed_direction(
        e in prop::collection::vec(-3.0f64..3.0, 1..16),
        seed in any::<u64>(),
        eps in 1e-3f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = e.iter().map(|_| rng.gen_range(-2.0..2.0)).collect();
        prop_assume!(norm(&g) > 1e-6);
        for sign in [FgmSign::PaperMinus, FgmSign::ClassicPlus] {
            let p = fgm_perturb(&e, &g, eps, sign).unwrap();
            let diff: Vec<f64> = p.values.iter().zip(&e).map(|(a, b)| a - b).collect();
            prop_assert!(rel(norm(&diff), eps) < 1e-9);
            prop_assert!(rel(dot(&g, &diff), sign.factor() * eps * norm(&g)) < 1e-9);
        }
    }

    #[test]
    fn candidates_always_satisfy_the_mask(
        words in prop::collection::vec("[a-z0-9!@#.]{1,4}", 1..30),
        lens in prop::collection::vec(1usize..8, 1..6),
        seed in any::<u64>(),
    ) {
        let vocab = Vocabulary::build(&[words.join(" ")], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<usize>> = lens.iter().map(|&l| (0..l).map(|_| rng.gen_range(0..vocab.len())).collect()).collect();
        let tokens = TokenMatrix::from_rows(&rows).unwrap();
        let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let plan = select_candidates(&tokens, vocab.restricted_mask(), &mut pick);
        let mut again = ChaCha8Rng::seed_from_u64(seed ^ 1);
        prop_assert_eq!(&plan, &select_candidates(&tokens, vocab.restricted_mask(), &mut again));
        for (r, c) in plan.iter().enumerate() {
            let any_eligible = (0..rows[r].len()).any(|c| vocab.is_restricted(rows[r][c]));
            match c {
                Some(c) => {
                    prop_assert!(!tokens.is_pad(r, *c));
                    prop_assert!(vocab.is_restricted(tokens.row(r)[*c]));
                }
                None => prop_assert!(!any_eligible),
            }
        }
    }

    #[test]
    fn contrastive_loss_is_scale_and_order_invariant(seed in any::<u64>(), k in 1usize..6, scale in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (a, p) = (v(), v());
        let negs: Vec<Vec<f64>> = (0..k).map(|_| v()).collect();
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        for include in [false, true] {
            let base = contrastive_loss_values(&a, &p, &refs, 0.07, include).unwrap();
            let sa: Vec<f64> = a.iter().map(|x| x * scale).collect();
            let sp: Vec<f64> = p.iter().map(|x| x * scale).collect();
            let sn: Vec<f64> = negs[0].iter().map(|x| x * scale).collect();
            let mut scaled = refs.clone();
            scaled[0] = &sn;
            prop_assert!((contrastive_loss_values(&sa, &sp, &scaled, 0.07, include).unwrap() - base).abs() < 1e-9);
            let mut rev = refs.clone();
            rev.reverse();
            prop_assert!((contrastive_loss_values(&a, &p, &rev, 0.07, include).unwrap() - base).abs() < 1e-9);
        }
    }
}

#[test]
fn single_candidate_moves_exactly_one_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e = Tensor::matrix(6, 4, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let g = Tensor::matrix(6, 4, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let plan = AdversarialPlan::new(vec![None, Some(2)], 0.03, FgmSign::PaperMinus).unwrap();
    let adv = build_adversarial_batch(&e, &plan, &g).unwrap();
    let changed: Vec<usize> = (0..6).filter(|&r| adv.perturbed.row(r) != e.row(r)).collect();
    assert_eq!(changed, vec![5]);
    let diff: Vec<f64> = adv.perturbed.row(5).iter().zip(e.row(5)).map(|(a, b)| a - b).collect();
    assert!(rel(norm(&diff), 0.03) < 1e-9);
    assert!(dot(g.row(5), &diff) <= 0.0);
    assert_eq!(adv.active, vec![None, Some(2)]);
}

#[test]
fn misaligned_gradient_is_an_internal_error() {
    let e = Tensor::matrix(4, 2, vec![0.0; 8]).unwrap();
    let g = Tensor::matrix(2, 4, vec![0.0; 8]).unwrap();
    let plan = AdversarialPlan::new(vec![Some(0)], 0.1, FgmSign::PaperMinus).unwrap();
    assert!(matches!(build_adversarial_batch(&e, &plan, &g), Err(atcl::Error::Internal(_))));
}

#[test]
fn friend_sentence_picks_deterministically() {
    let vocab = Vocabulary::build(&["the friend arrived !"], 1).unwrap();
    let tokens = TokenMatrix::from_rows(&[vocab.encode_line("the friend arrived !")]).unwrap();
    let picks: Vec<Option<usize>> = (0..50)
        .map(|s| select_candidates(&tokens, vocab.restricted_mask(), &mut ChaCha8Rng::seed_from_u64(s))[0])
        .collect();
    assert!(picks.iter().all(|p| matches!(p, Some(0..=2))));
    for c in 0..3 {
        assert!(picks.contains(&Some(c)), "column {c} never chosen");
    }
}

#[test]
fn cosine_identities() {
    assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    assert!((cosine_similarity(&[1.0, -2.0], &[-1.0, 2.0]) + 1.0).abs() < 1e-15);
    assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
}

#[test]
fn closed_forms() {
    let a = [1.0, 0.0];
    let p = [0.6, 0.8];
    let loss = contrastive_loss_values(&a, &p, &[&[0.6, -0.8]], 0.07, false).unwrap();
    assert!(loss.abs() < 1e-9);
    let loss = contrastive_loss_values(&a, &p, &[&[0.6, -0.8], &[3.0, 4.0]], 0.07, false).unwrap();
    assert!((loss - 2f64.ln()).abs() < 1e-9);
    let loss = contrastive_loss_values(&a, &[2.0, 0.0], &[&[0.0, 1.0]], 0.07, false).unwrap();
    assert!((loss + 1.0 / 0.07).abs() < 1e-9);
    let bounded = contrastive_loss_values(&a, &[2.0, 0.0], &[&[0.0, 1.0]], 0.07, true).unwrap();
    assert!(bounded > 0.0);
}

#[test]
fn loss_falls_as_the_positive_aligns() {
    let a = [1.0, 0.0, 0.0];
    let negs: [&[f64]; 2] = [&[0.0, 1.0, 0.0], &[0.2, 0.3, 0.9]];
    let mut prev = f64::INFINITY;
    for step in 0..20 {
        let t = step as f64 / 19.0 * std::f64::consts::PI;
        let p = [t.cos(), t.sin(), 0.0];
        let loss = contrastive_loss_values(&a, &p, &negs, 0.07, false).unwrap();
        if step > 0 {
            // Angle grows, so similarity falls and the loss must rise.
            assert!(loss > prev - 1e-12 || step == 0);
        }
        prev = loss;
    }
    let close = contrastive_loss_values(&a, &[1.0, 0.1, 0.0], &negs, 0.07, false).unwrap();
    let far = contrastive_loss_values(&a, &[1.0, 0.5, 0.0], &negs, 0.07, false).unwrap();
    assert!(close < far);
}

#[test]
fn two_by_three_batch_exhausts_to_the_other_five() {
    let pad = vec![false; 6];
    let sets = sample_negatives(&pad, &[1], 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut got = sets[0].negatives.clone();
    got.sort();
    assert_eq!(got, vec![0, 2, 3, 4, 5]);
}

#[test]
fn anchor_never_samples_itself() {
    let mut pad = vec![false; 24];
    pad[7] = true;
    pad[23] = true;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for draw in 0..1000 {
        let anchor = [0, 5, 12, 22][draw % 4];
        for n in [5, 10, 20] {
            let sets = sample_negatives(&pad, &[anchor], n, &mut rng).unwrap();
            let negs = &sets[0].negatives;
            assert!(!negs.contains(&anchor));
            assert!(negs.iter().all(|&i| !pad[i]));
            let mut uniq = negs.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), negs.len());
            assert_eq!(negs.len(), n.min(21));
        }
    }
}

fn graph_inputs(seed: u64) -> (Tensor, Tensor, Vec<NegativeSet>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = Tensor::matrix(6, 4, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let hp = Tensor::matrix(6, 4, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let sets = sample_negatives(&[false; 6], &[1, 4], 3, &mut rng).unwrap();
    (h, hp, sets)
}

#[test]
fn graph_loss_matches_vector_form() {
    for include in [false, true] {
        let (h, hp, sets) = graph_inputs(5);
        let mut g = Graph::new();
        let (a, b) = (g.leaf(h.clone()), g.leaf(hp.clone()));
        let loss = contrastive_loss(&mut g, a, b, &sets, 0.07, include).unwrap();
        let expected: f64 = sets
            .iter()
            .map(|s| {
                let negs: Vec<&[f64]> = s.negatives.iter().map(|&n| h.row(n)).collect();
                contrastive_loss_values(h.row(s.anchor), hp.row(s.anchor), &negs, 0.07, include).unwrap()
            })
            .sum();
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
    }
}

#[test]
fn graph_loss_gradients_match_finite_differences() {
    for seed in 0..10 {
        for include in [false, true] {
            let (h, hp, sets) = graph_inputs(seed);
            let report = grad_check_many(
                |g: &mut Graph, v: &[Var]| contrastive_loss(g, v[0], v[1], &sets, 0.07, include),
                &[h, hp],
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "seed {seed}: {:?}", report);
        }
    }
}
