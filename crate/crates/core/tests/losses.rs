use partalign::losses::{
    cross_entropy, cross_entropy_rows, kl_div, reg_loss, sum_scalars, total_loss, KlDirection, LossWeights,
};
use partalign::tensor::{GradCheck, Graph, Tensor, Var};
use partalign::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn leaf(g: &mut Graph<f64>, v: &[f64]) -> Var {
    g.input(Tensor::from_f64(&[v.len()], v).unwrap())
}

fn rows(g: &mut Graph<f64>, r: usize, c: usize, rng: &mut ChaCha8Rng, spread: f64) -> Var {
    g.input(Tensor::from_fn(&[r, c], |_| rng.gen_range(-spread..spread)))
}

#[test]
fn kl_of_a_distribution_with_itself_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let mut g = Graph::new();
        let p = rows(&mut g, 3, 7, &mut rng, 20.0);
        let kl = kl_div(&mut g, p, p, rng.gen_range(0.2..5.0)).unwrap();
        assert!(g.value(kl).item().abs() <= 1e-9);
    }
}

#[test]
fn kl_is_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let mut g = Graph::new();
        let c = rng.gen_range(2..10);
        let p = rows(&mut g, 1, c, &mut rng, 10.0);
        let q = rows(&mut g, 1, c, &mut rng, 10.0);
        let kl = kl_div(&mut g, p, q, rng.gen_range(0.2..5.0)).unwrap();
        assert!(g.value(kl).item() >= -1e-12);
    }
}

#[test]
fn kl_two_bin_closed_form() {
    let mut g = Graph::new();
    let p = leaf(&mut g, &[0.5f64.ln(), 0.5f64.ln()]);
    let q = leaf(&mut g, &[0.25f64.ln(), 0.75f64.ln()]);
    let kl = kl_div(&mut g, p, q, 1.0).unwrap();
    let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    assert!((g.value(kl).item() - expected).abs() < 1e-12);
    assert!((g.value(kl).item() - 0.1438).abs() < 1e-4);
}

#[test]
fn kl_temperature_softens_logits() {
    let mut g = Graph::new();
    let p = leaf(&mut g, &[2.0 * 0.5f64.ln(), 2.0 * 0.5f64.ln()]);
    let q = leaf(&mut g, &[2.0 * 0.25f64.ln(), 2.0 * 0.75f64.ln()]);
    let kl = kl_div(&mut g, p, q, 2.0).unwrap();
    let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    assert!((g.value(kl).item() - expected).abs() < 1e-12);
}

#[test]
fn kl_rejects_bad_inputs() {
    let mut g = Graph::new();
    let p = leaf(&mut g, &[0.0, 1.0]);
    let q = leaf(&mut g, &[0.0, 1.0, 2.0]);
    assert!(kl_div(&mut g, p, p, 0.0).is_err());
    assert!(kl_div(&mut g, p, p, -1.0).is_err());
    assert!(matches!(kl_div(&mut g, p, q, 1.0), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn kl_direction_swaps_arguments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let gl = rows(&mut g, 2, 5, &mut rng, 3.0);
    let lo = rows(&mut g, 2, 5, &mut rng, 3.0);
    let fwd = reg_loss(&mut g, &[gl], &[lo], 1.5, KlDirection::LocalToGlobal).unwrap();
    let rev = reg_loss(&mut g, &[gl], &[lo], 1.5, KlDirection::GlobalToLocal).unwrap();
    let kl_lg = kl_div(&mut g, lo, gl, 1.5).unwrap();
    let kl_gl = kl_div(&mut g, gl, lo, 1.5).unwrap();
    assert_eq!(g.value(fwd).item(), g.value(kl_lg).item());
    assert_eq!(g.value(rev).item(), g.value(kl_gl).item());
    assert_ne!(g.value(fwd).item(), g.value(rev).item());
}

#[test]
fn reg_loss_adds_over_stages() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let mut g = Graph::new();
        let stages = rng.gen_range(1..5);
        let gl: Vec<Var> = (0..stages).map(|_| rows(&mut g, 2, 6, &mut rng, 4.0)).collect();
        let lo: Vec<Var> = (0..stages).map(|_| rows(&mut g, 2, 6, &mut rng, 4.0)).collect();
        let whole = reg_loss(&mut g, &gl, &lo, 1.0, KlDirection::default()).unwrap();
        let mut parts = 0.0;
        for s in 0..stages {
            let one = reg_loss(&mut g, &gl[s..=s], &lo[s..=s], 1.0, KlDirection::default()).unwrap();
            parts += g.value(one).item();
        }
        assert!((g.value(whole).item() - parts).abs() <= 1e-12 * (1.0 + parts.abs()));
    }
}

#[test]
fn reg_loss_checks_stage_count() {
    let mut g = Graph::new();
    let a = leaf(&mut g, &[0.0, 1.0]);
    assert!(matches!(
        reg_loss(&mut g, &[a, a], &[a], 1.0, KlDirection::default()),
        Err(Error::StageCount { .. })
    ));
    assert!(reg_loss(&mut g, &[], &[], 1.0, KlDirection::default()).is_err());
    let r = reg_loss(&mut g, &[a, a], &[a, a], 1.0, KlDirection::default()).unwrap();
    assert_eq!(g.value(r).item(), 0.0);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let uniform = leaf(&mut g, &[0.3; 4]);
    let ce = cross_entropy(&mut g, uniform, &[2]).unwrap();
    assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-12);

    let peaked = leaf(&mut g, &[0.0, 60.0, 0.0]);
    let ce = cross_entropy(&mut g, peaked, &[1]).unwrap();
    assert!(g.value(ce).item() < 1e-20);

    let two = leaf(&mut g, &[2.0, 0.0]);
    let ce = cross_entropy(&mut g, two, &[1]).unwrap();
    let expected = (1.0 + 2f64.exp()).ln();
    assert!((g.value(ce).item() - expected).abs() < 1e-12);
    assert!((expected - 2.1269).abs() < 1e-4);

    assert!(matches!(
        cross_entropy(&mut g, two, &[2]),
        Err(Error::LabelOutOfRange { label: 2, classes: 2 })
    ));
    assert!(matches!(cross_entropy(&mut g, two, &[0, 1]), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn cross_entropy_rows_sum_to_the_batch_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let logits = rows(&mut g, 5, 8, &mut rng, 6.0);
    let labels = [0, 7, 3, 3, 1];
    let per_row = cross_entropy_rows(&mut g, logits, &labels).unwrap();
    let total = cross_entropy(&mut g, logits, &labels).unwrap();
    assert_eq!(g.shape(per_row), &[5]);
    let sum: f64 = g.value(per_row).data().iter().sum();
    assert!((sum - g.value(total).item()).abs() < 1e-12);
}

#[test]
fn zero_weights_leave_pure_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::new();
    let s1 = rows(&mut g, 3, 4, &mut rng, 5.0);
    let s2 = rows(&mut g, 3, 4, &mut rng, 5.0);
    let part = rows(&mut g, 3, 4, &mut rng, 5.0);
    let reg = leaf(&mut g, &[123.0]);
    let labels = [1, 0, 3];
    let l = total_loss(&mut g, &[s1, s2], &[part], reg, &labels, &labels, LossWeights { reg: 0.0, part: 0.0 }).unwrap();
    let c1 = cross_entropy(&mut g, s1, &labels).unwrap();
    let c2 = cross_entropy(&mut g, s2, &labels).unwrap();
    let expected = g.value(c1).item() + g.value(c2).item();
    assert!((g.value(l).item() - expected).abs() < 1e-12);
}

#[test]
fn weights_scale_their_terms() {
    let mut g = Graph::new();
    let zero_ce = leaf(&mut g, &[0.0, 800.0]);
    let reg = leaf(&mut g, &[0.7]);
    let l = total_loss(&mut g, &[zero_ce], &[zero_ce], reg, &[1], &[1], LossWeights { reg: 2.0, part: 1.0 }).unwrap();
    assert!((g.value(l).item() - 1.4).abs() < 1e-12);

    let uniform = leaf(&mut g, &[0.0, 0.0]);
    let l = total_loss(&mut g, &[uniform], &[uniform], reg, &[0], &[0], LossWeights { reg: 0.0, part: 3.0 }).unwrap();
    assert!((g.value(l).item() - 4.0 * 2f64.ln()).abs() < 1e-12);
    assert!(total_loss(&mut g, &[uniform], &[], reg, &[0], &[], LossWeights { reg: -1.0, part: 0.0 }).is_err());
}

#[test]
fn sum_of_no_terms_is_zero() {
    let mut g = Graph::<f64>::new();
    let z = sum_scalars(&mut g, &[]).unwrap();
    assert_eq!(g.value(z).item(), 0.0);
}

#[test]
fn losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::from_fn(&[3, 5], |_| rng.gen_range(-2.0..2.0));
    let b = Tensor::from_fn(&[3, 5], |_| rng.gen_range(-2.0..2.0));
    let kl = GradCheck::default()
        .run(|g, v| kl_div(g, v[0], v[1], 1.7), &[a.clone(), b])
        .unwrap();
    assert!(kl.pass, "{kl:?}");
    let ce = GradCheck::default()
        .run(|g, v| cross_entropy(g, v[0], &[4, 0, 2]), &[a])
        .unwrap();
    assert!(ce.pass, "{ce:?}");
}

#[test]
fn direction_names_round_trip() {
    for d in [KlDirection::LocalToGlobal, KlDirection::GlobalToLocal] {
        assert_eq!(d.to_string().parse::<KlDirection>().unwrap(), d);
    }
    assert!("sideways".parse::<KlDirection>().is_err());
}
