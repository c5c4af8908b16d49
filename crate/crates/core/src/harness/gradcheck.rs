//! Finite-difference audit of every differentiable component at f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::align::{
    AlignmentVariant, AttnConfig, CorrelationBank, CrossAttnAligner, MatchMode, Mhsa,
    SelfAttnAligner, TransformerBlock,
};
use crate::error::Result;
use crate::geom::PartBox;
use crate::losses::{self, KlDirection, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::nn::{Ctx, Mlp, ParamStore};
use crate::tensor::{GradCheck, GradCheckReport, Graph, OpKind, Tensor, Var};

pub const DEFAULT_SEEDS: u64 = 10;
pub const TOLERANCE: f64 = 1e-4;
/// Backward rules are scaled by this factor under fault injection.
pub const TAMPER_FACTOR: f64 = 1.5;

/// Coordinates checked per input tensor for the larger composites.
const MAX_COORDS: usize = 24;

/// Minimum distance from any relu or max branch switch at a model-level
/// evaluation point, and how many random points to try to find one.
const KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: u64 = 1000;
/// Layer-norm rows flatter than this are too sharply curved for the step.
const MIN_LN_STD: f64 = 0.05;
/// A GELU unit whose inputs all lie below this is dead, with gradients under
/// roundoff.
const MIN_GELU_INPUT: f64 = -5.0;

#[derive(Clone, Debug, Serialize)]
pub struct ComponentReport {
    pub name: String,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seeds: u64,
    pub tamper: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seeds: DEFAULT_SEEDS,
            tamper: None,
        }
    }
}

type CheckFn = fn(u64, &GradCheck) -> Result<GradCheckReport>;

/// Every registered component, in report order.
pub fn registry() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("add", prim_add),
        ("sub", prim_sub),
        ("mul", prim_mul),
        ("add_row_bias", prim_add_row_bias),
        ("scale", prim_scale),
        ("relu", prim_relu),
        ("gelu", prim_gelu),
        ("exp", prim_exp),
        ("log", prim_log),
        ("matmul", prim_matmul),
        ("transpose", prim_transpose),
        ("reshape", prim_reshape),
        ("concat", prim_concat),
        ("sum", prim_sum),
        ("mean_over_axis", prim_mean),
        ("max_over_axis", prim_max),
        ("softmax", prim_softmax),
        ("log_softmax", prim_log_softmax),
        ("layer_norm", prim_layer_norm),
        ("gather", prim_gather),
        ("conv2d", prim_conv2d),
        ("max_pool2d", prim_max_pool2d),
        ("mhsa", comp_mhsa),
        ("transformer_block", comp_block),
        ("self_attn_aligner_1", comp_self_attn_1),
        ("self_attn_aligner_3", comp_self_attn_3),
        ("cross_attn_aligner", comp_cross_attn),
        ("phi", comp_phi),
        ("kl_div", comp_kl),
        ("reg_loss", comp_reg),
        ("cross_entropy", comp_ce),
        ("total_loss", comp_total),
        ("model_none", model_none),
        ("model_graphmatch", model_graphmatch),
        ("model_attn3", model_attn3),
        ("model_crossattn", model_crossattn),
    ]
}

pub fn run(opts: &GradcheckOptions) -> Result<Vec<ComponentReport>> {
    let check = GradCheck {
        tol: TOLERANCE,
        tamper: opts.tamper.map(|k| (k, TAMPER_FACTOR)),
        ..GradCheck::default()
    };
    registry()
        .into_iter()
        .map(|(name, f)| {
            let mut report = ComponentReport {
                name: name.to_string(),
                seeds: opts.seeds,
                max_rel_err: 0.0,
                coords_checked: 0,
                pass: true,
            };
            for seed in 0..opts.seeds {
                let r = f(seed, &check)?;
                report.max_rel_err = report.max_rel_err.max(r.max_rel_err);
                report.coords_checked += r.coords_checked;
            }
            report.pass = report.max_rel_err <= TOLERANCE;
            Ok(report)
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x5eed)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Entries at least 0.1 away from zero, so relu kinks stay out of reach.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct entries spaced at least 0.05 apart, so maxima never tie.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ranks.swap(i, rng.gen_range(0..=i));
    }
    let mut t = Tensor::from_fn(shape, |i| ranks[i] as f64 * 0.1 - n as f64 * 0.05);
    for v in t.data_mut() {
        *v += rng.gen_range(-0.02..0.02);
    }
    t
}

/// `sum(v * w)` for a fixed random `w`, so every output coordinate matters.
fn scalarize(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = normal(&mut rng(seed ^ 0xabcdef), &shape);
    let w = g.input(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn unary(seed: u64, check: &GradCheck, x: Tensor<f64>, f: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<GradCheckReport> {
    check.run(
        |g, v| {
            let y = f(g, v[0])?;
            scalarize(g, y, seed)
        },
        &[x],
    )
}

fn binary(
    seed: u64,
    check: &GradCheck,
    a: Tensor<f64>,
    b: Tensor<f64>,
    f: fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    check.run(
        |g, v| {
            let y = f(g, v[0], v[1])?;
            scalarize(g, y, seed)
        },
        &[a, b],
    )
}

fn prim_add(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    binary(seed, c, normal(&mut r, &[3, 4]), normal(&mut r, &[3, 4]), |g, a, b| g.add(a, b))
}

fn prim_sub(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    binary(seed, c, normal(&mut r, &[3, 4]), normal(&mut r, &[3, 4]), |g, a, b| g.sub(a, b))
}

fn prim_mul(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    binary(seed, c, normal(&mut r, &[3, 4]), normal(&mut r, &[3, 4]), |g, a, b| g.mul(a, b))
}

fn prim_add_row_bias(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    binary(seed, c, normal(&mut r, &[2, 3, 4]), normal(&mut r, &[4]), |g, a, b| g.add_row_bias(a, b))
}

fn prim_scale(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    unary(seed, c, normal(&mut rng(seed), &[5]), |g, x| Ok(g.scale(x, -2.5)))
}

fn prim_relu(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    unary(seed, c, off_zero(&mut rng(seed), &[4, 5]), |g, x| Ok(g.relu(x)))
}

fn prim_gelu(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    unary(seed, c, normal(&mut rng(seed), &[4, 5]), |g, x| Ok(g.gelu(x)))
}

fn prim_exp(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    unary(seed, c, normal(&mut rng(seed), &[6]), |g, x| Ok(g.exp(x)))
}

fn prim_log(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = Tensor::from_fn(&[6], |_| r.gen_range(0.3..3.0));
    unary(seed, c, x, |g, x| Ok(g.log(x)))
}

fn prim_matmul(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    binary(seed, c, normal(&mut r, &[3, 4]), normal(&mut r, &[4, 2]), |g, a, b| g.matmul(a, b))
}

fn prim_transpose(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    unary(seed, c, normal(&mut rng(seed), &[3, 5]), |g, x| g.transpose(x))
}

fn prim_reshape(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    unary(seed, c, normal(&mut rng(seed), &[2, 6]), |g, x| g.reshape(x, &[3, 4]))
}

fn prim_concat(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    binary(seed, c, normal(&mut r, &[2, 3]), normal(&mut r, &[2, 2]), |g, a, b| g.concat(&[a, b], 1))
}

fn prim_sum(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let x = normal(&mut rng(seed), &[3, 3]);
    c.run(
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        },
        &[x],
    )
}

fn prim_mean(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    unary(seed, c, normal(&mut rng(seed), &[2, 3, 4]), |g, x| g.mean_over_axis(x, 1))
}

fn prim_max(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    unary(seed, c, spread(&mut rng(seed), &[2, 5, 3]), |g, x| g.max_over_axis(x, 1))
}

fn prim_softmax(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    unary(seed, c, normal(&mut rng(seed), &[3, 5]), |g, x| g.softmax(x, 1))
}

fn prim_log_softmax(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    unary(seed, c, normal(&mut rng(seed), &[3, 5]), |g, x| g.log_softmax(x, 1))
}

fn prim_layer_norm(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let inputs = [normal(&mut r, &[3, 6]), normal(&mut r, &[6]), normal(&mut r, &[6])];
    c.run(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            scalarize(g, y, seed)
        },
        &inputs,
    )
}

fn prim_gather(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    unary(seed, c, normal(&mut rng(seed), &[6]), |g, x| g.gather(x, vec![4, 0, 4, 2, 5], &[5]))
}

fn prim_conv2d(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let inputs = [
        normal(&mut r, &[2, 2, 5, 4]),
        normal(&mut r, &[3, 2, 3, 3]),
        normal(&mut r, &[3]),
    ];
    c.run(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            scalarize(g, y, seed)
        },
        &inputs,
    )
}

fn prim_max_pool2d(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    unary(seed, c, spread(&mut rng(seed), &[2, 2, 4, 4]), |g, x| g.max_pool2d(x, 2))
}

/// Redraws every parameter at its layer's natural scale so that
/// zero-initialized projections and unit layer-norm gains do not hide their
/// gradients: weights get N(0, 1/fan_in), vectors N(0, 0.1^2), and
/// layer-norm gains 1 + N(0, 0.1^2).
fn randomized(store: &ParamStore<f64>, seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed ^ 0x77);
    let mut out = store.clone();
    for (name, t) in out.iter_mut() {
        let shape = t.shape().to_vec();
        let (offset, std) = match shape.len() {
            1 if name.ends_with(".gamma") => (1.0, 0.1),
            1 => (0.0, 0.1),
            2 => (0.0, 1.0 / (shape[0] as f64).sqrt()),
            _ => (0.0, 1.0 / (shape[1..].iter().product::<usize>() as f64).sqrt()),
        };
        for v in t.data_mut() {
            *v = offset + std * r.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

/// Checks `f(cx, data vars)` with respect to the data tensors and every
/// parameter of `store`.
fn with_params<F>(check: &GradCheck, store: &ParamStore<f64>, data: Vec<Tensor<f64>>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<f64>, &[Var]) -> Result<Var>,
{
    let n_data = data.len();
    let mut inputs = data;
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let check = GradCheck {
        max_coords: Some(MAX_COORDS),
        ..check.clone()
    };
    check.run(
        |g, vars| {
            let graph = std::mem::replace(g, Graph::new());
            let mut cx = Ctx::with_graph(graph, store, true);
            for (id, &v) in store.ids().zip(&vars[n_data..]) {
                cx.bind(id, v);
            }
            let out = f(&mut cx, &vars[..n_data]);
            *g = cx.g;
            out
        },
        &inputs,
    )
}

const D: usize = 8;
const HEADS: usize = 2;
const PARTS: usize = 3;

fn attn_config(layers: usize) -> AttnConfig {
    AttnConfig {
        num_layers: layers,
        heads: HEADS,
        d_model: D,
        expansion: 4,
        d_out: D,
    }
}

fn comp_mhsa(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let m = Mhsa::new(&mut store, "mhsa", D, HEADS, &mut r)?;
    let store = randomized(&store, seed);
    with_params(c, &store, vec![normal(&mut r, &[2 * PARTS, D])], |cx, v| {
        let y = m.forward(cx, v[0], v[0], PARTS, PARTS)?;
        scalarize(&mut cx.g, y, seed)
    })
}

fn comp_block(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let b = TransformerBlock::new(&mut store, "block", &attn_config(1), &mut r)?;
    let store = randomized(&store, seed);
    with_params(c, &store, vec![normal(&mut r, &[2 * PARTS, D])], |cx, v| {
        let y = b.forward(cx, v[0], PARTS)?;
        scalarize(&mut cx.g, y, seed)
    })
}

fn self_attn(seed: u64, c: &GradCheck, layers: usize) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let a = SelfAttnAligner::new(&mut store, "attn", attn_config(layers), &mut r)?;
    let store = randomized(&store, seed);
    with_params(c, &store, vec![normal(&mut r, &[2 * PARTS, D])], |cx, v| {
        let y = a.forward(cx, v[0], PARTS)?;
        scalarize(&mut cx.g, y, seed)
    })
}

fn comp_self_attn_1(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    self_attn(seed, c, 1)
}

fn comp_self_attn_3(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    self_attn(seed, c, 3)
}

fn comp_cross_attn(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let a = CrossAttnAligner::new(&mut store, "cross", 6, attn_config(1), &mut r)?;
    let store = randomized(&store, seed);
    let data = vec![normal(&mut r, &[2, 6]), normal(&mut r, &[2 * PARTS, D])];
    with_params(c, &store, data, |cx, v| {
        let y = a.forward(cx, v[0], v[1], PARTS)?;
        scalarize(&mut cx.g, y, seed)
    })
}

fn comp_phi(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let phi = Mlp::new(&mut store, "phi", PARTS * D, 4 * D, D, &mut r);
    let store = randomized(&store, seed);
    with_params(c, &store, vec![normal(&mut r, &[2, PARTS * D])], |cx, v| {
        let y = phi.forward(cx, v[0])?;
        scalarize(&mut cx.g, y, seed)
    })
}

fn comp_kl(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    c.run(
        |g, v| losses::kl_div(g, v[0], v[1], 0.7),
        &[normal(&mut r, &[3, 5]), normal(&mut r, &[3, 5])],
    )
}

fn comp_reg(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let inputs: Vec<Tensor<f64>> = (0..6).map(|_| normal(&mut r, &[2, 4])).collect();
    let direction = if seed % 2 == 0 {
        KlDirection::LocalToGlobal
    } else {
        KlDirection::GlobalToLocal
    };
    c.run(|g, v| losses::reg_loss(g, &v[..3], &v[3..], 1.0, direction), &inputs)
}

fn comp_ce(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let x = normal(&mut rng(seed), &[4, 5]);
    c.run(|g, v| losses::cross_entropy(g, v[0], &[0, 4, 2, 2]), &[x])
}

fn comp_total(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut inputs: Vec<Tensor<f64>> = (0..3).map(|_| normal(&mut r, &[2, 4])).collect();
    inputs.push(normal(&mut r, &[2 * PARTS, 4]));
    inputs.push(normal(&mut r, &[2, 4]));
    inputs.push(normal(&mut r, &[2, 4]));
    c.run(
        |g, v| {
            let reg = losses::kl_div(g, v[4], v[5], 1.0)?;
            losses::total_loss(
                g,
                &v[..3],
                &v[3..4],
                reg,
                &[1, 3],
                &[1, 1, 1, 3, 3, 3],
                LossWeights { reg: 0.8, part: 0.6 },
            )
        },
        &inputs,
    )
}

/// One-channel 16x16 miniature of the full pipeline.
fn mini_config(alignment: AlignmentVariant) -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        image_size: 16,
        widths: [2, 3, 4],
        d_repr: 4,
        num_classes: 3,
        num_parts: 3,
        window: 1,
        nms_iou: 0.25,
        alignment,
        heads: 2,
        expansion: 4,
        tau: 1.0,
        kl_direction: KlDirection::LocalToGlobal,
        lambda_reg: 1.0,
        lambda_part: 1.0,
        match_mode: MatchMode::Exact,
    }
}

fn mini_model(seed: u64, alignment: AlignmentVariant, c: &GradCheck) -> Result<GradCheckReport> {
    let model = Model::<f64>::new(mini_config(alignment), seed)?;
    let boxes = vec![
        vec![part_box(0, 0, 8), part_box(5, 6, 10), part_box(10, 1, 6)],
        vec![part_box(8, 8, 8), part_box(2, 0, 12), part_box(0, 10, 4)],
    ];
    let mut bank = CorrelationBank::new(3, 0.1)?;
    if alignment.uses_bank() {
        let c_ref = vec![1.0, 0.6, -0.2, 0.6, 1.0, 0.1, -0.2, 0.1, 1.0];
        bank.update(&crate::align::CorrMatrix::new(3, c_ref)?)?;
    }
    let loss = |cx: &mut Ctx<f64>, images: &Tensor<f64>| -> Result<Var> {
        let mut b = bank.clone();
        let out = model.forward_train_with_boxes(
            cx,
            images,
            &[0, 2],
            boxes.clone(),
            alignment.uses_bank().then_some(&mut b),
        )?;
        // the entries of the loss terms sum to the total loss
        let flat = out
            .loss_terms
            .iter()
            .map(|&t| {
                let n = cx.g.value(t).len();
                cx.g.reshape(t, &[n])
            })
            .collect::<Result<Vec<_>>>()?;
        cx.g.concat(&flat, 0)
    };

    // relu and max are not differentiable everywhere, near-constant
    // layer-norm rows are sharply curved and deep-tail GELU units are dead; redraw until the evaluation point
    // sits well inside one smooth, moderately curved piece
    for attempt in 0..MAX_DRAWS {
        let draw = seed * MAX_DRAWS + attempt;
        let store = randomized(&model.params, draw);
        let images = mini_images(draw);
        let mut cx = Ctx::new(&store, false);
        loss(&mut cx, &images)?;
        if cx.g.kink_margin() < KINK_MARGIN
            || cx.g.min_layer_norm_std() < MIN_LN_STD
            || cx.g.min_gelu_unit_peak() < MIN_GELU_INPUT
        {
            continue;
        }
        return with_params(c, &store, vec![], |cx, _| loss(cx, &images));
    }
    Err(crate::error::Error::Config(format!(
        "no well-conditioned evaluation point in {MAX_DRAWS} draws"
    )))
}

/// Random images whose quadrants differ in contrast by up to 9x, so the
/// part crops, and hence the part tokens, differ from each other.
fn mini_images(draw: u64) -> Tensor<f64> {
    let mut t = normal(&mut rng(draw), &[2, 1, 16, 16]);
    let gains = [0.3, 1.0, 2.7, 0.6];
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let (y, x) = ((i / 16) % 16, i % 16);
        *v *= gains[(y / 8) * 2 + x / 8];
    }
    t
}

fn part_box(row: usize, col: usize, side: usize) -> PartBox {
    PartBox {
        row,
        col,
        side,
        score: 0.0,
    }
}

fn model_none(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    mini_model(seed, AlignmentVariant::None, c)
}

fn model_graphmatch(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    mini_model(seed, AlignmentVariant::GraphMatch, c)
}

fn model_attn3(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    mini_model(seed, AlignmentVariant::SelfAttn { layers: 3 }, c)
}

fn model_crossattn(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    mini_model(seed, AlignmentVariant::CrossAttn, c)
}
