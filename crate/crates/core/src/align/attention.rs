//! Attention-based part aligners.
//!
//! Part tokens carry no positional encoding, so every block is
//! permutation-equivariant over the token axis; global average pooling then
//! makes the self-attention aligner invariant to the order in which parts
//! arrive. Neither aligner keeps state between calls.
//!
//! All forward functions operate on a batch laid out as `G` groups of `N`
//! consecutive rows (`[G * N, d]`); attention only mixes rows within a group.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear, Mlp, ParamStore};
use crate::tensor::{Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnConfig {
    pub num_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Hidden width multiplier of the block MLPs and the pooling MLP.
    pub expansion: usize,
    pub d_out: usize,
}

impl AttnConfig {
    pub fn new(num_layers: usize, d_model: usize) -> Self {
        AttnConfig {
            num_layers,
            heads: 4,
            d_model,
            expansion: 4,
            d_out: d_model,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::HeadsMismatch {
                d_model: self.d_model,
                heads: self.heads,
            });
        }
        if self.expansion < 2 {
            return Err(Error::Config(
                "pooling MLP must be an inverted bottleneck (expansion >= 2)".into(),
            ));
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention with Q/K/V and output projections.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Mhsa {
    /// Output projection starts at zero.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::HeadsMismatch { d_model: d, heads });
        }
        Ok(Mhsa {
            wq: Linear::new(store, &format!("{name}.q"), d, d, rng),
            // a key bias shifts every score of a query equally, which the
            // softmax ignores
            wk: Linear::without_bias(store, &format!("{name}.k"), d, d, rng),
            wv: Linear::new(store, &format!("{name}.v"), d, d, rng),
            wo: Linear::zeroed(store, &format!("{name}.o"), d, d),
            heads,
        })
    }

    /// Queries from `q_in: [G * nq, d]`, keys and values from
    /// `kv_in: [G * nk, d]`; group `g` of queries attends to group `g` of keys.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        q_in: Var,
        kv_in: Var,
        nq: usize,
        nk: usize,
    ) -> Result<Var> {
        let d = self.wq.d_in;
        let (sq, sk) = (cx.g.shape(q_in).to_vec(), cx.g.shape(kv_in).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sq[1] != d || sk[1] != d {
            return Err(Error::ShapeMismatch {
                op: "mhsa",
                lhs: sq,
                rhs: sk,
            });
        }
        if nq == 0 || nk == 0 || sq[0] % nq != 0 || sk[0] % nk != 0 || sq[0] / nq != sk[0] / nk {
            return Err(Error::ShapeMismatch {
                op: "mhsa groups",
                lhs: vec![sq[0], nq],
                rhs: vec![sk[0], nk],
            });
        }
        let groups = sq[0] / nq;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = self.wq.forward(cx, q_in)?;
        let k = self.wk.forward(cx, kv_in)?;
        let v = self.wv.forward(cx, kv_in)?;

        let mut group_out = Vec::with_capacity(groups);
        for gi in 0..groups {
            let (qg, kg, vg) = if groups == 1 {
                (q, k, v)
            } else {
                (
                    cx.g.rows(q, gi * nq, nq)?,
                    cx.g.rows(k, gi * nk, nk)?,
                    cx.g.rows(v, gi * nk, nk)?,
                )
            };
            let mut head_out = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let (qh, kh, vh) = if self.heads == 1 {
                    (qg, kg, vg)
                } else {
                    (
                        cx.g.columns(qg, h * dh, dh)?,
                        cx.g.columns(kg, h * dh, dh)?,
                        cx.g.columns(vg, h * dh, dh)?,
                    )
                };
                let kt = cx.g.transpose(kh)?;
                let scores = cx.g.matmul(qh, kt)?;
                let scores = cx.g.scale(scores, scale);
                let attn = cx.g.softmax(scores, 1)?;
                head_out.push(cx.g.matmul(attn, vh)?);
            }
            group_out.push(if head_out.len() == 1 {
                head_out[0]
            } else {
                cx.g.concat(&head_out, 1)?
            });
        }
        let merged = if group_out.len() == 1 {
            group_out[0]
        } else {
            cx.g.concat(&group_out, 0)?
        };
        self.wo.forward(cx, merged)
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `+ mlp(ln2(.))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Mhsa,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &AttnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: Mhsa::new(store, &format!("{name}.attn"), d, cfg.heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::residual(store, &format!("{name}.mlp"), d, cfg.expansion * d, rng),
        })
    }

    /// Self-attention over groups of `n` rows.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var, n: usize) -> Result<Var> {
        let h = self.ln1.forward(cx, x)?;
        let a = self.attn.forward(cx, h, h, n, n)?;
        let x = cx.g.add(x, a)?;
        self.mlp_residual(cx, x)
    }

    fn mlp_residual<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.ln2.forward(cx, x)?;
        let m = self.mlp.forward(cx, h)?;
        cx.g.add(x, m)
    }
}

/// Stack of transformer blocks, global average pooling over the part axis,
/// then an inverted-bottleneck MLP.
#[derive(Clone, Debug)]
pub struct SelfAttnAligner {
    pub config: AttnConfig,
    pub blocks: Vec<TransformerBlock>,
    pub pool_mlp: Mlp,
}

impl SelfAttnAligner {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        config: AttnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.num_layers)
            .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), &config, rng))
            .collect::<Result<_>>()?;
        let pool_mlp = Mlp::new(
            store,
            &format!("{name}.pool_mlp"),
            config.d_model,
            config.expansion * config.d_model,
            config.d_out,
            rng,
        );
        Ok(SelfAttnAligner {
            config,
            blocks,
            pool_mlp,
        })
    }

    /// Token stack before pooling, `[G * n, d]`.
    pub fn encode<T: Scalar>(&self, cx: &mut Ctx<T>, tokens: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::EmptyParts);
        }
        let mut x = tokens;
        for block in &self.blocks {
            x = block.forward(cx, x, n)?;
        }
        Ok(x)
    }

    /// `tokens: [G * n, d]` to one unified representation per group, `[G, d_out]`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, tokens: Var, n: usize) -> Result<Var> {
        let rows = *cx.g.shape(tokens).first().unwrap_or(&0);
        if n == 0 || rows == 0 || rows % n != 0 {
            return Err(Error::EmptyParts);
        }
        let x = self.encode(cx, tokens, n)?;
        let d = self.config.d_model;
        let grouped = cx.g.reshape(x, &[rows / n, n, d])?;
        let pooled = cx.g.mean_over_axis(grouped, 1)?;
        let pooled = cx.g.reshape(pooled, &[rows / n, d])?;
        self.pool_mlp.forward(cx, pooled)
    }
}

/// One cross-attention block whose single query row is the (projected)
/// global representation and whose keys/values are the part tokens.
#[derive(Clone, Debug)]
pub struct CrossAttnAligner {
    pub config: AttnConfig,
    pub query_proj: Linear,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: Mhsa,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub pool_mlp: Mlp,
}

impl CrossAttnAligner {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_global: usize,
        config: AttnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(CrossAttnAligner {
            config,
            query_proj: Linear::new(store, &format!("{name}.query_proj"), d_global, d, rng),
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), d),
            attn: Mhsa::new(store, &format!("{name}.attn"), d, config.heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::residual(store, &format!("{name}.mlp"), d, config.expansion * d, rng),
            pool_mlp: Mlp::new(
                store,
                &format!("{name}.pool_mlp"),
                d,
                config.expansion * d,
                config.d_out,
                rng,
            ),
        })
    }

    /// `global: [G, d_global]`, `parts: [G * n, d]` to `[G, d_out]`.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        global: Var,
        parts: Var,
        n: usize,
    ) -> Result<Var> {
        let (sg, sp) = (cx.g.shape(global).to_vec(), cx.g.shape(parts).to_vec());
        if n == 0 || sp.first().copied().unwrap_or(0) == 0 {
            return Err(Error::EmptyParts);
        }
        if sg.len() != 2 || sp.len() != 2 || sg[0] * n != sp[0] || sg[1] != self.query_proj.d_in {
            return Err(Error::ShapeMismatch {
                op: "cross_attn",
                lhs: sg,
                rhs: sp,
            });
        }
        let q = self.query_proj.forward(cx, global)?;
        let qn = self.ln_q.forward(cx, q)?;
        let kv = self.ln_kv.forward(cx, parts)?;
        let a = self.attn.forward(cx, qn, kv, 1, n)?;
        let x = cx.g.add(q, a)?;
        let h = self.ln2.forward(cx, x)?;
        let m = self.mlp.forward(cx, h)?;
        // global average pooling over a single query row is the identity
        let x = cx.g.add(x, m)?;
        self.pool_mlp.forward(cx, x)
    }
}
