//! Two-stream part-based classifier at toy scale.
//!
//! One backbone parameter set serves both the global stream (whole image)
//! and the part stream (proposed crops). Each of the three stages feeds a
//! head that emits a representation and class logits. During training the
//! part representations are turned into a unified local representation by
//! the configured aligner and tied to the global representation through the
//! KL regularizer. At test time only the global stream runs.

pub mod proposer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{
    correlation, AlignmentVariant, AttnConfig, CorrMatrix, CorrelationBank, CrossAttnAligner,
    MatchMode, Permutation, SelfAttnAligner,
};
use crate::error::{Error, Result};
use crate::geom::PartBox;
use crate::losses::{self, KlDirection, LossWeights};
use crate::nn::{Conv, Ctx, Linear, Mlp, ParamStore};
use crate::tensor::{Scalar, Tensor, Var};

pub use proposer::{propose_parts, ProposerConfig};

pub const NUM_STAGES: usize = 3;

/// Prefix of every parameter that only the training-time alignment path reads.
pub const ALIGN_PREFIX: &str = "align.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub widths: [usize; NUM_STAGES],
    pub d_repr: usize,
    pub num_classes: usize,
    pub num_parts: usize,
    pub window: usize,
    pub nms_iou: f64,
    pub alignment: AlignmentVariant,
    pub heads: usize,
    pub expansion: usize,
    pub tau: f64,
    pub kl_direction: KlDirection,
    pub lambda_reg: f64,
    pub lambda_part: f64,
    pub match_mode: MatchMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            image_size: 64,
            widths: [16, 32, 64],
            d_repr: 32,
            num_classes: 8,
            num_parts: 4,
            window: 2,
            nms_iou: 0.25,
            alignment: AlignmentVariant::SelfAttn { layers: 3 },
            heads: 4,
            expansion: 4,
            tau: 1.0,
            kl_direction: KlDirection::LocalToGlobal,
            lambda_reg: 1.0,
            lambda_part: 1.0,
            match_mode: MatchMode::Exact,
        }
    }
}

impl ModelConfig {
    /// Side of the F1/F2/F3 maps.
    pub fn stage_sizes(&self) -> [usize; NUM_STAGES] {
        let s = self.image_size;
        [s / 4, s / 8, s / 16]
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 16",
                self.image_size
            )));
        }
        if self.num_parts == 0 || self.num_classes < 2 || self.d_repr == 0 {
            return Err(Error::Config("parts, classes and widths must be positive".into()));
        }
        if self.window == 0 || self.window > self.image_size / 16 {
            return Err(Error::Config(format!(
                "window of {} cells does not fit the {}x{} stage-3 map",
                self.window,
                self.image_size / 16,
                self.image_size / 16
            )));
        }
        if !(self.tau > 0.0) || self.lambda_reg < 0.0 || self.lambda_part < 0.0 {
            return Err(Error::Config("tau must be positive and loss weights non-negative".into()));
        }
        Ok(())
    }

    fn proposer(&self) -> ProposerConfig {
        ProposerConfig {
            num_parts: self.num_parts,
            window: self.window,
            nms_iou: self.nms_iou,
        }
    }

    fn attn(&self, layers: usize) -> AttnConfig {
        AttnConfig {
            num_layers: layers,
            heads: self.heads,
            d_model: self.d_repr,
            expansion: self.expansion,
            d_out: self.d_repr,
        }
    }
}

#[derive(Clone, Debug)]
struct StageHead {
    conv: Conv,
    repr: Linear,
    classifier: Linear,
}

/// Maps part tokens to the unified local representation.
#[derive(Clone, Debug)]
pub enum Unifier {
    /// Two-layer MLP over the concatenated parts.
    Phi(Mlp),
    SelfAttn(SelfAttnAligner),
    CrossAttn(CrossAttnAligner),
}

/// Per-stage representations and logits of one stream.
#[derive(Clone, Debug)]
pub struct StreamOutput {
    /// `[B, d_repr]` per stage.
    pub reprs: Vec<Var>,
    /// `[B, C]` per stage.
    pub logits: Vec<Var>,
    /// Last backbone feature map, `[B, c3, h3, w3]`.
    pub f3: Var,
}

/// Per-sample averages of the loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_stage_ce: Vec<f64>,
    pub part_ce: f64,
    pub reg: f64,
}

impl LossBreakdown {
    pub fn ce(&self) -> f64 {
        self.per_stage_ce.iter().sum()
    }
}

pub struct TrainOutput<T> {
    /// Mean loss over the batch.
    pub loss: Var,
    /// Weighted elementwise loss terms (per-row cross-entropies, per-entry
    /// KL terms) whose entries sum to `loss`.
    pub loss_terms: Vec<Var>,
    pub breakdown: LossBreakdown,
    /// Summed stage logits of the global stream, `[B, C]`.
    pub global_logits: Tensor<T>,
    pub boxes: Vec<Vec<PartBox>>,
    /// Graph-matching permutation per sample (empty for other variants).
    pub permutations: Vec<Permutation>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    stem_convs: Vec<Conv>,
    heads: Vec<StageHead>,
    unifier: Unifier,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut stem_convs = Vec::with_capacity(NUM_STAGES);
        let mut c_in = config.in_channels;
        for (s, &c) in config.widths.iter().enumerate() {
            stem_convs.push(Conv::new(&mut params, &format!("backbone.stage{}", s + 1), c_in, c, &mut rng));
            c_in = c;
        }
        let heads = config
            .widths
            .iter()
            .enumerate()
            .map(|(s, &c)| {
                let name = format!("head{}", s + 1);
                StageHead {
                    conv: Conv::new(&mut params, &format!("{name}.conv"), c, c, &mut rng),
                    repr: Linear::new(&mut params, &format!("{name}.repr"), c, config.d_repr, &mut rng),
                    classifier: Linear::new(
                        &mut params,
                        &format!("{name}.classifier"),
                        config.d_repr,
                        config.num_classes,
                        &mut rng,
                    ),
                }
            })
            .collect();
        let d = config.d_repr;
        let unifier = match config.alignment {
            AlignmentVariant::None | AlignmentVariant::GraphMatch => Unifier::Phi(Mlp::new(
                &mut params,
                "align.phi",
                config.num_parts * d,
                config.expansion * d,
                d,
                &mut rng,
            )),
            AlignmentVariant::SelfAttn { layers } => Unifier::SelfAttn(SelfAttnAligner::new(
                &mut params,
                "align.attn",
                config.attn(layers),
                &mut rng,
            )?),
            AlignmentVariant::CrossAttn => Unifier::CrossAttn(CrossAttnAligner::new(
                &mut params,
                "align.cross",
                d,
                config.attn(1),
                &mut rng,
            )?),
        };
        Ok(Model {
            config,
            params,
            stem_convs,
            heads,
            unifier,
        })
    }

    /// Rebuilds the model structure for `config` and adopts `params`, which
    /// must match it name for name and shape for shape.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((want, w), (got, g)) in model.params.iter().zip(params.iter()) {
            if want != got || w.shape() != g.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {want} {:?}, found {got} {:?}",
                    w.shape(),
                    g.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn unifier(&self) -> &Unifier {
        &self.unifier
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            stem_convs: self.stem_convs.clone(),
            heads: self.heads.clone(),
            unifier: self.unifier.clone(),
        }
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let s = images.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: s.to_vec(),
                rhs: vec![0, c.in_channels, c.image_size, c.image_size],
            });
        }
        Ok(())
    }

    /// `images: [B, C_in, H, W]` to the three stage maps at strides 4, 8, 16.
    pub fn backbone_forward(&self, cx: &mut Ctx<T>, images: Var) -> Result<[Var; NUM_STAGES]> {
        let mut x = cx.g.max_pool2d(images, 2)?;
        let mut maps = Vec::with_capacity(NUM_STAGES);
        for conv in &self.stem_convs {
            let y = conv.forward(cx, x)?;
            let y = cx.g.relu(y);
            x = cx.g.max_pool2d(y, 2)?;
            maps.push(x);
        }
        Ok([maps[0], maps[1], maps[2]])
    }

    /// Backbone plus every stage head.
    pub fn stream_forward(&self, cx: &mut Ctx<T>, images: Var) -> Result<StreamOutput> {
        let maps = self.backbone_forward(cx, images)?;
        let mut reprs = Vec::with_capacity(NUM_STAGES);
        let mut logits = Vec::with_capacity(NUM_STAGES);
        for (head, &f) in self.heads.iter().zip(&maps) {
            let s = cx.g.shape(f).to_vec();
            let y = head.conv.forward(cx, f)?;
            let y = cx.g.relu(y);
            let y = cx.g.reshape(y, &[s[0], s[1], s[2] * s[3]])?;
            let pooled = cx.g.max_over_axis(y, 2)?;
            let r = head.repr.forward(cx, pooled)?;
            logits.push(head.classifier.forward(cx, r)?);
            reprs.push(r);
        }
        Ok(StreamOutput {
            reprs,
            logits,
            f3: maps[2],
        })
    }

    /// Part boxes for every image from the stage-3 map values.
    pub fn propose(&self, f3: &Tensor<T>) -> Result<Vec<Vec<PartBox>>> {
        let s = f3.shape();
        let per = s[1] * s[2] * s[3];
        let stride = self.config.image_size / s[3];
        f3.data()
            .chunks(per)
            .map(|chunk| {
                let map = Tensor::new(s[1..].to_vec(), chunk.to_vec())?;
                propose_parts(&map, stride, &self.config.proposer())
            })
            .collect()
    }

    /// Nearest-neighbour crops resized to the input size, `[B * N, C, H, W]`,
    /// sample-major.
    pub fn crops(&self, images: &Tensor<T>, boxes: &[Vec<PartBox>]) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let (c, size) = (self.config.in_channels, self.config.image_size);
        let plane = size * size;
        let total: usize = boxes.iter().map(Vec::len).sum();
        let mut data = Vec::with_capacity(total * c * plane);
        for (b, sample_boxes) in boxes.iter().enumerate() {
            let img = &images.data()[b * c * plane..(b + 1) * c * plane];
            for bx in sample_boxes {
                if !bx.fits(size, size) {
                    return Err(Error::Proposal(format!("degenerate box {bx:?}")));
                }
                for ch in 0..c {
                    for y in 0..size {
                        let sy = bx.row + y * bx.side / size;
                        for x in 0..size {
                            let sx = bx.col + x * bx.side / size;
                            data.push(img[ch * plane + sy * size + sx]);
                        }
                    }
                }
            }
        }
        Tensor::new(vec![total, c, size, size], data)
    }

    /// Part stream: crops through the shared backbone and heads. Stage `s`
    /// tokens are rows `b * N .. (b + 1) * N` of `reprs[s]`.
    pub fn encode_parts(
        &self,
        cx: &mut Ctx<T>,
        images: &Tensor<T>,
        boxes: &[Vec<PartBox>],
    ) -> Result<StreamOutput> {
        let n = self.config.num_parts;
        if let Some(bad) = boxes.iter().find(|b| b.len() != n) {
            return Err(Error::Proposal(format!("expected {n} boxes per image, got {}", bad.len())));
        }
        let crops = self.crops(images, boxes)?;
        let input = cx.g.input(crops);
        self.stream_forward(cx, input)
    }

    /// Unified local representation per stage, `[B, d_repr]`.
    fn unify(&self, cx: &mut Ctx<T>, global: &[Var], parts: &[Var], batch: usize) -> Result<Vec<Var>> {
        let n = self.config.num_parts;
        let d = self.config.d_repr;
        global
            .iter()
            .zip(parts)
            .map(|(&gl, &p)| match &self.unifier {
                Unifier::Phi(phi) => {
                    let flat = cx.g.reshape(p, &[batch, n * d])?;
                    phi.forward(cx, flat)
                }
                Unifier::SelfAttn(a) => a.forward(cx, p, n),
                Unifier::CrossAttn(a) => a.forward(cx, gl, p, n),
            })
            .collect()
    }

    /// Training forward pass with parts proposed from the global stream.
    pub fn forward_train(
        &self,
        cx: &mut Ctx<T>,
        images: &Tensor<T>,
        labels: &[usize],
        bank: Option<&mut CorrelationBank>,
    ) -> Result<TrainOutput<T>> {
        self.check_images(images)?;
        let input = cx.g.input(images.clone());
        let global = self.stream_forward(cx, input)?;
        let boxes = self.propose(cx.g.value(global.f3))?;
        self.finish_train(cx, images, labels, global, boxes, bank)
    }

    /// Training forward pass with caller-supplied part boxes.
    pub fn forward_train_with_boxes(
        &self,
        cx: &mut Ctx<T>,
        images: &Tensor<T>,
        labels: &[usize],
        boxes: Vec<Vec<PartBox>>,
        bank: Option<&mut CorrelationBank>,
    ) -> Result<TrainOutput<T>> {
        self.check_images(images)?;
        let input = cx.g.input(images.clone());
        let global = self.stream_forward(cx, input)?;
        self.finish_train(cx, images, labels, global, boxes, bank)
    }

    fn finish_train(
        &self,
        cx: &mut Ctx<T>,
        images: &Tensor<T>,
        labels: &[usize],
        global: StreamOutput,
        boxes: Vec<Vec<PartBox>>,
        bank: Option<&mut CorrelationBank>,
    ) -> Result<TrainOutput<T>> {
        let batch = images.shape()[0];
        let n = self.config.num_parts;
        if labels.len() != batch || boxes.len() != batch {
            return Err(Error::ShapeMismatch {
                op: "forward_train",
                lhs: vec![batch],
                rhs: vec![labels.len(), boxes.len()],
            });
        }
        let uses_bank = self.config.alignment.uses_bank();
        if uses_bank != bank.is_some() {
            return Err(Error::Config(format!(
                "alignment {} {} a correlation bank",
                self.config.alignment,
                if uses_bank { "requires" } else { "does not take" }
            )));
        }

        let parts = self.encode_parts(cx, images, &boxes)?;
        let mut part_reprs = parts.reprs.clone();
        let mut permutations = Vec::new();
        if let Some(bank) = bank {
            permutations = self.graph_match(cx.g.value(parts.reprs[NUM_STAGES - 1]), bank)?;
            let order: Vec<usize> = permutations
                .iter()
                .enumerate()
                .flat_map(|(b, p)| p.mapping().iter().map(move |&m| b * n + m))
                .collect();
            for r in part_reprs.iter_mut() {
                *r = cx.g.permute_rows(*r, &order)?;
            }
        }
        let unified = self.unify(cx, &global.reprs, &part_reprs, batch)?;

        let g = &mut cx.g;
        let reg_terms = losses::reg_terms(g, &global.reprs, &unified, self.config.tau, self.config.kl_direction)?;
        let reg_sums: Vec<Var> = reg_terms.iter().map(|&t| g.sum(t)).collect();
        let reg = losses::sum_scalars(g, &reg_sums)?;
        let stage_rows = global
            .logits
            .iter()
            .map(|&l| losses::cross_entropy_rows(g, l, labels))
            .collect::<Result<Vec<_>>>()?;
        let stage_ce: Vec<Var> = stage_rows.iter().map(|&r| g.sum(r)).collect();
        let part_logits = losses::sum_vars(g, &parts.logits)?;
        let part_labels: Vec<usize> = labels.iter().flat_map(|&l| std::iter::repeat(l).take(n)).collect();
        let part_rows = losses::cross_entropy_rows(g, part_logits, &part_labels)?;
        let part_ce = g.sum(part_rows);
        let weights = LossWeights {
            reg: self.config.lambda_reg,
            part: self.config.lambda_part,
        };
        let summed = losses::combine(g, &stage_ce, part_ce, reg, weights)?;
        let loss = g.scale(summed, 1.0 / batch as f64);
        let inv = 1.0 / batch as f64;
        let mut loss_terms: Vec<Var> = stage_rows.iter().map(|&r| g.scale(r, inv)).collect();
        if weights.part > 0.0 {
            loss_terms.push(g.scale(part_rows, weights.part * inv));
        }
        if weights.reg > 0.0 {
            loss_terms.extend(reg_terms.iter().map(|&t| g.scale(t, weights.reg * inv)));
        }

        let per_sample = |v: Var| g.value(v).item().as_f64() / batch as f64;
        let breakdown = LossBreakdown {
            total: g.value(loss).item().as_f64(),
            per_stage_ce: stage_ce.iter().map(|&v| per_sample(v)).collect(),
            part_ce: per_sample(part_ce),
            reg: per_sample(reg),
        };
        let logits_sum = losses::sum_vars(g, &global.logits)?;
        Ok(TrainOutput {
            loss,
            loss_terms,
            breakdown,
            global_logits: g.value(logits_sum).clone(),
            boxes,
            permutations,
        })
    }

    /// Aligns every sample's stage-3 part tokens against the bank, then
    /// updates the bank with the batch mean of the aligned correlations.
    /// Samples with a zero-norm token keep their proposal order and are
    /// left out of the update.
    fn graph_match(&self, tokens: &Tensor<T>, bank: &mut CorrelationBank) -> Result<Vec<Permutation>> {
        let n = self.config.num_parts;
        let d = self.config.d_repr;
        let mut perms = Vec::new();
        let mut aligned: Vec<CorrMatrix> = Vec::new();
        for chunk in tokens.data().chunks(n * d) {
            let sample = Tensor::new(vec![n, d], chunk.to_vec())?;
            match correlation(&sample) {
                Ok(c) => {
                    let p = bank.align(&c, self.config.match_mode)?;
                    aligned.push(c.conjugate(&p)?);
                    perms.push(p);
                }
                Err(Error::ZeroNormRow(_)) => perms.push(Permutation::identity(n)),
                Err(e) => return Err(e),
            }
        }
        if !aligned.is_empty() {
            bank.update_batch(&aligned)?;
        }
        Ok(perms)
    }

    /// Test-time per-stage logits of the global stream, each `[B, C]`.
    /// Reads no proposer, part-stream, aligner or unifier state.
    pub fn forward_test_stages(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_images(images)?;
        let mut cx = Ctx::new(&self.params, false);
        let input = cx.g.input(images.clone());
        let out = self.stream_forward(&mut cx, input)?;
        Ok(out.logits.iter().map(|&l| cx.g.value(l).clone()).collect())
    }

    /// Test-time logits: sum of the stage logits of the global stream, `[B, C]`.
    pub fn forward_test(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let stages = self.forward_test_stages(images)?;
        let mut sum = stages[0].clone();
        for s in &stages[1..] {
            for (a, &b) in sum.data_mut().iter_mut().zip(s.data()) {
                *a += b;
            }
        }
        Ok(sum)
    }

    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward_test(images)?))
    }
}

pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Stacks `[C, H, W]` images into `[B, C, H, W]`.
pub fn stack_images<T: Scalar>(images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or(Error::EmptyParts)?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "stack_images",
                lhs: first.shape().to_vec(),
                rhs: img.shape().to_vec(),
            });
        }
        data.extend(img.data().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(shape, data)
}
