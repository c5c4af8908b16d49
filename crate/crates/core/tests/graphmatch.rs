use partalign::align::graphmatch::{
    best_permutation, correlation, reorder_parts, similarity, CorrMatrix, CorrelationBank, MatchMode, Permutation,
};
use partalign::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_parts(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, d], |_| rng.gen_range(-1.0..1.0))
}

fn random_perm(rng: &mut ChaCha8Rng, n: usize) -> Permutation {
    let mut m: Vec<usize> = (0..n).collect();
    m.shuffle(rng);
    Permutation::new(m).unwrap()
}

/// Every permutation of `0..n`, by recursive insertion.
fn all_perms(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_perms(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn score(c_in: &CorrMatrix, c_ref: &CorrMatrix, p: &Permutation) -> f64 {
    similarity(&c_in.conjugate(p).unwrap(), c_ref).unwrap()
}

#[test]
fn exact_matches_naive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 2..=6 {
        let perms: Vec<Permutation> = all_perms(n).into_iter().map(|m| Permutation::new(m).unwrap()).collect();
        for _ in 0..100 {
            let c_in = correlation(&random_parts(&mut rng, n, 5)).unwrap();
            let c_ref = correlation(&random_parts(&mut rng, n, 5)).unwrap();
            let oracle = perms.iter().map(|p| score(&c_in, &c_ref, p)).fold(f64::NEG_INFINITY, f64::max);
            let found = best_permutation(&c_in, &c_ref, MatchMode::Exact).unwrap();
            let got = score(&c_in, &c_ref, &found);
            assert!((got - oracle).abs() <= 1e-12, "n {n}: {got} vs {oracle}");
        }
    }
}

#[test]
fn planted_permutation_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // two parts give a swap-invariant matrix, so recovery needs three or more
    for trial in 0..100 {
        let n = 3 + trial % 4;
        let parts = random_parts(&mut rng, n, 16);
        let pi = random_perm(&mut rng, n);
        let shuffled = reorder_parts(&parts, &pi).unwrap();
        let c_ref = correlation(&parts).unwrap();
        let c_in = correlation(&shuffled).unwrap();
        let found = best_permutation(&c_in, &c_ref, MatchMode::Exact).unwrap();
        assert_eq!(found, pi.inverse(), "trial {trial}");
        let restored = reorder_parts(&shuffled, &found).unwrap();
        for (a, b) in restored.data().iter().zip(parts.data()) {
            assert_eq!(a, b);
        }
        assert!(score(&c_in, &c_ref, &found).abs() < 1e-12);
    }
}

#[test]
fn two_parts_match_either_way() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let parts = random_parts(&mut rng, 2, 8);
    let swap = Permutation::new(vec![1, 0]).unwrap();
    let c_ref = correlation(&parts).unwrap();
    let c_in = correlation(&reorder_parts(&parts, &swap).unwrap()).unwrap();
    let found = best_permutation(&c_in, &c_ref, MatchMode::Exact).unwrap();
    assert!(found.is_identity());
    assert_eq!(score(&c_in, &c_ref, &found), 0.0);
}

#[test]
fn greedy_never_beats_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let n = rng.gen_range(2..=6);
        let c_in = correlation(&random_parts(&mut rng, n, 4)).unwrap();
        let c_ref = correlation(&random_parts(&mut rng, n, 4)).unwrap();
        let exact = best_permutation(&c_in, &c_ref, MatchMode::Exact).unwrap();
        let greedy = best_permutation(&c_in, &c_ref, MatchMode::Greedy).unwrap();
        assert!(score(&c_in, &c_ref, &greedy) <= score(&c_in, &c_ref, &exact) + 1e-12);
    }
}

#[test]
fn correlation_is_symmetric_with_unit_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let n = rng.gen_range(1..=8);
        let c = correlation(&random_parts(&mut rng, n, 6)).unwrap();
        assert!(c.is_symmetric(0.0));
        for i in 0..n {
            assert_eq!(c.get(i, i), 1.0);
            for j in 0..n {
                assert!(c.get(i, j).abs() <= 1.0);
            }
        }
    }
}

#[test]
fn conjugation_follows_reordering() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let parts = random_parts(&mut rng, 5, 7);
    let pi = random_perm(&mut rng, 5);
    let via_rows = correlation(&reorder_parts(&parts, &pi).unwrap()).unwrap();
    let via_conj = correlation(&parts).unwrap().conjugate(&pi).unwrap();
    for (a, b) in via_rows.data().iter().zip(via_conj.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn bank_aligns_to_its_first_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let parts = random_parts(&mut rng, 4, 16);
    let mut bank = CorrelationBank::new(4, 0.1).unwrap();
    bank.update(&correlation(&parts).unwrap()).unwrap();
    for _ in 0..20 {
        let pi = random_perm(&mut rng, 4);
        let c_in = correlation(&reorder_parts(&parts, &pi).unwrap()).unwrap();
        assert_eq!(bank.align(&c_in, MatchMode::Exact).unwrap(), pi.inverse());
    }
}
