//! Named parameter storage and the small layers shared by the aligners and
//! the backbone.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors. Insertion order is the
/// serialization order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Total number of scalars in parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// A graph plus lazily bound parameters. A parameter only enters the graph
/// the first time a layer asks for it, so a forward pass that never touches
/// a layer never reads its weights.
pub struct Ctx<'a, T: Scalar> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    /// Continues an existing graph, e.g. one owned by the gradient checker.
    pub fn with_graph(g: Graph<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        Ctx {
            g,
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    /// Makes `var` stand in for parameter `id`.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameters that were read by the forward pass.
    pub fn touched(&self) -> Vec<ParamId> {
        (0..self.bound.len())
            .filter(|&i| self.bound[i].is_some())
            .map(ParamId)
            .collect()
    }

    /// Per-parameter gradients after `g.backward`; `None` for parameters the
    /// forward pass never read.
    pub fn param_grads(&self) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.g.grad(v).cloned()))
            .collect()
    }
}

pub fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..=bound)))
}

/// Fully connected layer, `x[B, in] -> [B, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Uniform fan-in initialization, bias zero.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / d_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, &[d_in, d_out], bound));
        let b = Some(store.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Linear { w, b, d_in, d_out }
    }

    /// Uniform fan-in initialization, no bias term.
    pub fn without_bias<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / d_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, &[d_in, d_out], bound));
        Linear {
            w,
            b: None,
            d_in,
            d_out,
        }
    }

    /// All-zero weights and bias.
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[d_in, d_out]));
        let b = Some(store.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let y = cx.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = cx.p(b);
                cx.g.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }
}

/// Two-layer perceptron with a GELU between the layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    /// Second layer zero-initialized, for residual branches.
    pub fn residual<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, rng),
            fc2: Linear::zeroed(store, &format!("{name}.fc2"), hidden, d),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.g.gelu(h);
        self.fc2.forward(cx, h)
    }

    pub fn hidden(&self) -> usize {
        self.fc1.d_out
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (gm, bt) = (cx.p(self.gamma), cx.p(self.beta));
        cx.g.layer_norm(x, gm, bt, LN_EPS)
    }
}

/// 3x3 same-padding convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    /// He-uniform weights, zero bias.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        Conv {
            w: store.add(format!("{name}.w"), uniform(rng, &[c_out, c_in, 3, 3], bound)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.w), cx.p(self.b));
        cx.g.conv2d(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lazy_binding_only_reads_used_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let a = Linear::new(&mut store, "a", 2, 3, &mut rng);
        let _unused = Linear::new(&mut store, "b", 2, 3, &mut rng);
        let mut cx = Ctx::new(&store, true);
        let x = cx.g.input(Tensor::full(&[1, 2], 1.0));
        let y = a.forward(&mut cx, x).unwrap();
        let loss = cx.g.sum(y);
        cx.g.backward(loss).unwrap();
        let grads = cx.param_grads();
        assert!(grads[0].is_some() && grads[1].is_some());
        assert!(grads[2].is_none() && grads[3].is_none());
        assert_eq!(grads[1].as_ref().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn store_lookup_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        Mlp::new(&mut store, "align.phi", 8, 16, 4, &mut rng);
        Linear::new(&mut store, "head", 4, 2, &mut rng);
        assert_eq!(store.count_with_prefix("align."), 8 * 16 + 16 + 16 * 4 + 4);
        assert!(store.find("head.w").is_some());
        assert!(store.find("nope").is_none());
    }
}
