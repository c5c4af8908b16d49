use partalign::align::{AttnConfig, CrossAttnAligner, SelfAttnAligner};
use partalign::nn::{Ctx, ParamStore};
use partalign::tensor::{GradCheck, Graph, Scalar, Tensor, Var};
use partalign::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 8;
const HEADS: usize = 2;

fn config(layers: usize) -> AttnConfig {
    AttnConfig {
        heads: HEADS,
        ..AttnConfig::new(layers, D)
    }
}

/// Every parameter redrawn, so zero-initialized projections take part.
fn randomize<T: Scalar>(store: &mut ParamStore<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = T::of(rng.gen_range(-0.6..0.6));
        }
    }
}

fn tokens<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize) -> Tensor<T> {
    Tensor::from_fn(&[rows, D], |_| T::of(rng.gen_range(-2.0..2.0)))
}

/// Rows of each group of `n` shuffled independently.
fn shuffle_groups<T: Scalar>(x: &Tensor<T>, n: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let groups = x.shape()[0] / n;
    let mut data = Vec::with_capacity(x.len());
    for g in 0..groups {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for r in order {
            let row = g * n + r;
            data.extend_from_slice(&x.data()[row * D..(row + 1) * D]);
        }
    }
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

fn self_attn<T: Scalar>(layers: usize, seed: u64) -> (SelfAttnAligner, ParamStore<T>) {
    let mut store = ParamStore::new();
    let a = SelfAttnAligner::new(&mut store, "a", config(layers), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    randomize(&mut store, seed + 100);
    (a, store)
}

fn cross_attn<T: Scalar>(seed: u64) -> (CrossAttnAligner, ParamStore<T>) {
    let mut store = ParamStore::new();
    let a = CrossAttnAligner::new(&mut store, "c", D, config(1), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    randomize(&mut store, seed + 100);
    (a, store)
}

fn run_self<T: Scalar>(a: &SelfAttnAligner, store: &ParamStore<T>, x: &Tensor<T>, n: usize) -> Tensor<T> {
    let mut cx = Ctx::new(store, false);
    let v = cx.g.input(x.clone());
    let out = a.forward(&mut cx, v, n).unwrap();
    cx.g.value(out).clone()
}

fn run_cross<T: Scalar>(a: &CrossAttnAligner, store: &ParamStore<T>, gl: &Tensor<T>, x: &Tensor<T>, n: usize) -> Tensor<T> {
    let mut cx = Ctx::new(store, false);
    let g = cx.g.input(gl.clone());
    let v = cx.g.input(x.clone());
    let out = a.forward(&mut cx, g, v, n).unwrap();
    cx.g.value(out).clone()
}

fn assert_close<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, rel: f64) {
    assert_eq!(a.shape(), b.shape());
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        assert!((x - y).abs() <= rel * (1.0 + x.abs()), "{x} vs {y}");
    }
}

#[test]
fn self_attention_is_order_invariant_in_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..200u64 {
        let layers = if trial % 2 == 0 { 1 } else { 3 };
        let (a, store) = self_attn::<f32>(layers, trial);
        let n = rng.gen_range(2..=6);
        let x = tokens::<f32>(&mut rng, 2 * n);
        let y = shuffle_groups(&x, n, &mut rng);
        assert_close(&run_self(&a, &store, &x, n), &run_self(&a, &store, &y, n), 1e-5);
    }
}

#[test]
fn cross_attention_is_order_invariant_in_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..200u64 {
        let (a, store) = cross_attn::<f32>(trial);
        let n = rng.gen_range(2..=6);
        let gl = tokens::<f32>(&mut rng, 2);
        let x = tokens::<f32>(&mut rng, 2 * n);
        let y = shuffle_groups(&x, n, &mut rng);
        assert_close(&run_cross(&a, &store, &gl, &x, n), &run_cross(&a, &store, &gl, &y, n), 1e-5);
    }
}

#[test]
fn order_invariance_is_tight_in_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..50u64 {
        let n = 4;
        let (a, store) = self_attn::<f64>(3, trial);
        let x = tokens::<f64>(&mut rng, 3 * n);
        let y = shuffle_groups(&x, n, &mut rng);
        assert_close(&run_self(&a, &store, &x, n), &run_self(&a, &store, &y, n), 1e-10);
        let (c, cs) = cross_attn::<f64>(trial);
        let gl = tokens::<f64>(&mut rng, 3);
        assert_close(&run_cross(&c, &cs, &gl, &x, n), &run_cross(&c, &cs, &gl, &y, n), 1e-10);
    }
}

#[test]
fn aligner_output_depends_on_token_content() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, store) = self_attn::<f64>(1, 7);
    let x = tokens::<f64>(&mut rng, 4);
    let y = tokens::<f64>(&mut rng, 4);
    let (ox, oy) = (run_self(&a, &store, &x, 4), run_self(&a, &store, &y, 4));
    assert!(ox.data().iter().zip(oy.data()).any(|(p, q)| (p - q).abs() > 1e-6));
}

#[test]
fn shapes_and_errors() {
    let (a, store) = self_attn::<f64>(1, 0);
    let mut cx = Ctx::new(&store, false);
    let x = cx.g.input(Tensor::zeros(&[6, D]));
    let out = a.forward(&mut cx, x, 3).unwrap();
    assert_eq!(cx.g.shape(out), &[2, D]);
    assert!(matches!(a.forward(&mut cx, x, 4), Err(Error::EmptyParts)));
    assert!(matches!(a.forward(&mut cx, x, 0), Err(Error::EmptyParts)));

    let mut store = ParamStore::<f64>::new();
    let bad = AttnConfig {
        heads: 3,
        ..AttnConfig::new(1, D)
    };
    assert!(matches!(
        SelfAttnAligner::new(&mut store, "b", bad, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(Error::HeadsMismatch { .. })
    ));
}

/// Tokens are the checked input; parameters stay fixed.
fn check_tokens<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], forward: F) -> f64
where
    F: Fn(&mut Ctx<f64>, &[Var]) -> partalign::Result<Var>,
{
    let mut probe_rng = ChaCha8Rng::seed_from_u64(99);
    let probe = Tensor::from_fn(&[2, D], |_| probe_rng.gen_range(-1.0..1.0));
    let r = GradCheck::default()
        .run(
            |g, v| {
                let graph = std::mem::replace(g, Graph::new());
                let mut cx = Ctx::with_graph(graph, store, false);
                let out = forward(&mut cx, v);
                *g = cx.g;
                let out = out?;
                let w = g.input(probe.clone());
                g.mul(out, w)
            },
            inputs,
        )
        .unwrap();
    r.max_rel_err
}

#[test]
fn token_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..5 {
        let n = 3;
        let x = tokens::<f64>(&mut rng, 2 * n);
        for layers in [1, 3] {
            let (a, store) = self_attn::<f64>(layers, seed);
            let err = check_tokens(&store, std::slice::from_ref(&x), |cx, v| a.forward(cx, v[0], n));
            assert!(err <= 1e-4, "self {layers} seed {seed}: {err}");
        }
        let (c, store) = cross_attn::<f64>(seed);
        let gl = tokens::<f64>(&mut rng, 2);
        let err = check_tokens(&store, &[gl, x], |cx, v| c.forward(cx, v[0], v[1], n));
        assert!(err <= 1e-4, "cross seed {seed}: {err}");
    }
}
