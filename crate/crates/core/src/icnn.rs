//! Input-convex ReLU network with passthrough connections.
//!
//! ```text
//! x⁽ˡ⁾ = relu(A⁽ˡ⁾ x⁽ˡ⁻¹⁾ + b⁽ˡ⁾ + C⁽ˡ⁾ z)    l = 1 … L−1
//! g(z) = A⁽ᴸ⁾ x⁽ᴸ⁻¹⁾ + b⁽ᴸ⁾ + C⁽ᴸ⁾ z
//! ```
//!
//! with `x⁽⁰⁾ = z`. The layer-1 passthrough would duplicate `A⁽¹⁾`, so it is
//! never materialised. `g` is convex in `z` whenever `A⁽ˡ⁾ ≥ 0` for `l ≥ 2`.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::Graph;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Upper end of the uniform init for nonnegative weights.
pub const CONSTRAINED_INIT_MAX: f32 = 0.003;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcnnSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Include the `C⁽ˡ⁾ z` terms for `l ≥ 2`.
    pub passthrough: bool,
    pub seed: u64,
}

impl IcnnSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, passthrough: bool, seed: u64) -> Result<Self> {
        let spec = IcnnSpec {
            input_dim,
            hidden_dims,
            passthrough,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("ICNN input dimension must be ≥ 1".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("ICNN needs at least one hidden layer (L ≥ 2)".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("every hidden dimension must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Number of affine layers `L`.
    pub fn depth(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// Output width of each layer, ending with the scalar logit.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = self.hidden_dims.clone();
        w.push(1);
        w
    }

    fn has_passthrough(&self, layer: usize) -> bool {
        self.passthrough && layer > 0
    }

    /// Shapes of all parameter tensors in storage order (`A, b[, C]` per layer).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_dim;
        for (l, &w) in self.widths().iter().enumerate() {
            shapes.push(vec![w, fan_in]);
            shapes.push(vec![w]);
            if self.has_passthrough(l) {
                shapes.push(vec![w, self.input_dim]);
            }
            fan_in = w;
        }
        shapes
    }

    /// Names of all parameter tensors in storage order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.depth() {
            names.push(format!("A{}", l + 1));
            names.push(format!("b{}", l + 1));
            if self.has_passthrough(l) {
                names.push(format!("C{}", l + 1));
            }
        }
        names
    }

    /// Whether each parameter tensor must stay elementwise nonnegative.
    pub fn constraint_mask(&self) -> Vec<bool> {
        let mut mask = Vec::new();
        for l in 0..self.depth() {
            mask.push(l > 0);
            mask.push(false);
            if self.has_passthrough(l) {
                mask.push(false);
            }
        }
        mask
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub a: Tensor,
    pub b: Tensor,
    pub c: Option<Tensor>,
}

/// Node ids of one layer's parameters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerIds {
    pub a: NodeId,
    pub b: NodeId,
    pub c: Option<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcnnParams {
    spec: IcnnSpec,
    layers: Vec<Layer>,
}

impl IcnnParams {
    /// Assembles parameters from tensors in storage order, checking shapes.
    pub fn from_tensors(spec: IcnnSpec, tensors: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Shape {
                context: "ICNN parameter count",
                expected: vec![shapes.len()],
                actual: vec![tensors.len()],
            });
        }
        for (expected, t) in shapes.iter().zip(&tensors) {
            if expected.as_slice() != t.shape() {
                return Err(Error::Shape {
                    context: "ICNN parameter",
                    expected: expected.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        let mut it = tensors.into_iter();
        let layers = (0..spec.depth())
            .map(|l| Layer {
                a: it.next().unwrap(),
                b: it.next().unwrap(),
                c: if spec.has_passthrough(l) { it.next() } else { None },
            })
            .collect();
        Ok(IcnnParams { spec, layers })
    }

    /// Random initialisation: constrained matrices uniform on `[0, 0.003]`,
    /// unconstrained matrices uniform on `±1/√fan_in`, biases zero.
    pub fn init(spec: &IcnnSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let constrained = Uniform::new_inclusive(0.0f32, CONSTRAINED_INIT_MAX).unwrap();
        let tensors = spec
            .param_shapes()
            .into_iter()
            .zip(spec.constraint_mask())
            .map(|(shape, nonneg)| {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = if shape.len() == 1 {
                    vec![0.0; n]
                } else if nonneg {
                    (0..n).map(|_| constrained.sample(&mut rng)).collect()
                } else {
                    let bound = 1.0 / (shape[1] as f32).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).unwrap();
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                };
                Tensor::from_parts(shape, data)
            })
            .collect();
        IcnnParams::from_tensors(spec.clone(), tensors)
    }

    pub fn spec(&self) -> &IcnnSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(&layer.a);
            out.push(&layer.b);
            if let Some(c) = &layer.c {
                out.push(c);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.a);
            out.push(&mut layer.b);
            if let Some(c) = &mut layer.c {
                out.push(c);
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Clamps every constrained matrix at zero. Idempotent.
    pub fn project_nonnegative(&mut self) {
        for layer in self.layers.iter_mut().skip(1) {
            for v in layer.a.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }

    pub fn projected(mut self) -> Self {
        self.project_nonnegative();
        self
    }

    /// Smallest entry among constrained matrices.
    pub fn min_constrained(&self) -> f32 {
        self.layers
            .iter()
            .skip(1)
            .flat_map(|l| l.a.data().iter().copied())
            .fold(f32::INFINITY, f32::min)
    }

    pub fn is_projected(&self) -> bool {
        self.min_constrained() >= 0.0
    }

    /// Multiplies the output layer (`A⁽ᴸ⁾`, `b⁽ᴸ⁾`, `C⁽ᴸ⁾`) by `factor`.
    pub fn scale_output(&mut self, factor: f32) {
        let last = self.layers.last_mut().expect("L ≥ 2");
        for t in [Some(&mut last.a), Some(&mut last.b), last.c.as_mut()]
            .into_iter()
            .flatten()
        {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Adds `shift` to the output bias `b⁽ᴸ⁾`.
    pub fn shift_output(&mut self, shift: f32) {
        let last = self.layers.last_mut().expect("L ≥ 2");
        last.b.data_mut()[0] += shift;
    }

    /// Puts all parameters on `tape`, borrowing them.
    pub fn add_to_tape<'a>(&'a self, tape: &mut Tape<'a, f32>, trainable: bool) -> Vec<LayerIds> {
        let mut put = |t: &'a Tensor| {
            if trainable {
                tape.leaf_ref(t)
            } else {
                tape.constant_ref(t)
            }
        };
        self.layers
            .iter()
            .map(|l| LayerIds {
                a: put(&l.a),
                b: put(&l.b),
                c: l.c.as_ref().map(&mut put),
            })
            .collect()
    }

    /// Logit `g(z)`.
    pub fn forward(&self, z: &Tensor) -> Result<f32> {
        z.expect_vector(self.spec.input_dim, "ICNN input")?;
        let mut tape = Tape::new();
        let ids = self.add_to_tape(&mut tape, false);
        let zid = tape.constant_ref(z);
        let out = record(&mut tape, zid, &ids)?;
        tape.value(out).item()
    }

    /// Logit together with its reverse-mode gradient with respect to `z`.
    pub fn input_gradient(&self, z: &Tensor) -> Result<(f32, Tensor)> {
        z.expect_vector(self.spec.input_dim, "ICNN input")?;
        let mut tape = Tape::new();
        let ids = self.add_to_tape(&mut tape, false);
        let zid = tape.leaf_ref(z);
        let out = record(&mut tape, zid, &ids)?;
        let logit = tape.value(out).item()?;
        let grads = tape.gradient(out, 1.0)?;
        Ok((logit, grads.wrt_or_zeros(zid, z.shape())))
    }
}

/// Records `g(z)` on a tape given the parameter nodes of each layer.
pub fn record<T: Scalar>(tape: &mut Tape<'_, T>, z: NodeId, layers: &[LayerIds]) -> Result<NodeId> {
    let last = layers.len() - 1;
    let mut x = z;
    for (l, ids) in layers.iter().enumerate() {
        let mut pre = tape.affine(ids.a, x, Some(ids.b))?;
        if let Some(c) = ids.c {
            let pass = tape.affine(c, z, None)?;
            pre = tape.add(pre, pass)?;
        }
        x = if l == last { pre } else { tape.relu(pre) };
    }
    Ok(x)
}

/// The ICNN as a [`Graph`] over inputs `[z, A1, b1, A2, b2, C2, …]`.
pub struct IcnnGraph {
    spec: IcnnSpec,
}

impl IcnnGraph {
    pub fn new(spec: IcnnSpec) -> Self {
        IcnnGraph { spec }
    }

    /// `[z, params…]` in the order the graph expects.
    pub fn inputs(params: &IcnnParams, z: &Tensor) -> Vec<Tensor> {
        std::iter::once(z.clone())
            .chain(params.tensors().into_iter().cloned())
            .collect()
    }
}

impl Graph for IcnnGraph {
    fn signature(&self) -> Vec<Vec<usize>> {
        std::iter::once(vec![self.spec.input_dim])
            .chain(self.spec.param_shapes())
            .collect()
    }

    fn build<T: Scalar>(&self, tape: &mut Tape<'_, T>, inputs: &[NodeId]) -> Result<Vec<NodeId>> {
        let z = inputs[0];
        let mut it = inputs[1..].iter().copied();
        let layers: Vec<LayerIds> = (0..self.spec.depth())
            .map(|l| LayerIds {
                a: it.next().unwrap(),
                b: it.next().unwrap(),
                c: if self.spec.has_passthrough(l) { it.next() } else { None },
            })
            .collect();
        Ok(vec![record(tape, z, &layers)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(q: usize, hidden: &[usize], passthrough: bool) -> IcnnSpec {
        IcnnSpec::new(q, hidden.to_vec(), passthrough, 7).unwrap()
    }

    #[test]
    fn init_shapes_for_mnist_architecture() {
        let p = IcnnParams::init(&spec(784, &[200, 50], true)).unwrap();
        let shapes: Vec<_> = p.tensors().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![200, 784],
                vec![200],
                vec![50, 200],
                vec![50],
                vec![50, 784],
                vec![1, 50],
                vec![1],
                vec![1, 784],
            ]
        );
        assert_eq!(p.spec().param_names(), ["A1", "b1", "A2", "b2", "C2", "A3", "b3", "C3"]);
    }

    #[test]
    fn constrained_init_range() {
        let p = IcnnParams::init(&spec(30, &[64, 32], true)).unwrap();
        for (t, nonneg) in p.tensors().iter().zip(p.spec().constraint_mask()) {
            if nonneg {
                assert!(t.data().iter().all(|&v| (0.0..=CONSTRAINED_INIT_MAX).contains(&v)));
            }
        }
        assert!(p.is_projected());
    }

    #[test]
    fn init_is_deterministic() {
        let s = spec(10, &[8, 4], true);
        assert_eq!(IcnnParams::init(&s).unwrap(), IcnnParams::init(&s).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(IcnnSpec::new(0, vec![3], true, 0).is_err());
        assert!(IcnnSpec::new(2, vec![], true, 0).is_err());
        assert!(IcnnSpec::new(2, vec![3, 0], true, 0).is_err());
    }

    #[test]
    fn identity_first_layer_sums_nonnegative_input() {
        // L = 2, A¹ = I, A² = 1ᵀ, no passthrough: g(z) = Σ relu(z)
        let s = spec(3, &[3], false);
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let p = IcnnParams::from_tensors(
            s,
            vec![
                eye,
                Tensor::zeros(&[3]),
                Tensor::matrix(1, 3, vec![1.0; 3]).unwrap(),
                Tensor::zeros(&[1]),
            ],
        )
        .unwrap();
        let z = Tensor::vector(vec![0.5, 2.0, 1.25]).unwrap();
        assert_eq!(p.forward(&z).unwrap(), 3.75);
    }

    #[test]
    fn constant_network() {
        let s = spec(4, &[5, 3], true);
        let mut p = IcnnParams::init(&s).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        p.shift_output(1.5);
        let z = Tensor::vector(vec![0.3, -9.0, 2.0, 1.0]).unwrap();
        assert_eq!(p.forward(&z).unwrap(), 1.5);
        let (_, g) = p.input_gradient(&z).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_network_gradient_is_weight() {
        // Hidden layer muted; the passthrough C² carries w·z + b.
        let s = spec(3, &[2], true);
        let p = IcnnParams::from_tensors(
            s,
            vec![
                Tensor::zeros(&[2, 3]),
                Tensor::zeros(&[2]),
                Tensor::zeros(&[1, 2]),
                Tensor::vector(vec![0.5]).unwrap(),
                Tensor::matrix(1, 3, vec![1.0, -2.0, 3.0]).unwrap(),
            ],
        )
        .unwrap();
        let z = Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap();
        let (logit, g) = p.input_gradient(&z).unwrap();
        assert_eq!(logit, 2.5);
        assert_eq!(g.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = IcnnParams::init(&spec(4, &[3], true)).unwrap();
        let z = Tensor::vector(vec![1.0; 5]).unwrap();
        assert!(matches!(p.forward(&z), Err(Error::Shape { .. })));
        assert!(matches!(p.input_gradient(&z), Err(Error::Shape { .. })));
    }

    #[test]
    fn projection_clamps_only_constrained() {
        let s = spec(2, &[1], true);
        let mut p = IcnnParams::from_tensors(
            s,
            vec![
                Tensor::matrix(1, 2, vec![-1.0, 2.0]).unwrap(),
                Tensor::vector(vec![-3.0]).unwrap(),
                Tensor::matrix(1, 1, vec![-0.5]).unwrap(),
                Tensor::vector(vec![-1.0]).unwrap(),
                Tensor::matrix(1, 2, vec![-4.0, 1.0]).unwrap(),
            ],
        )
        .unwrap();
        p.project_nonnegative();
        assert_eq!(p.layers()[0].a.data(), &[-1.0, 2.0]);
        assert_eq!(p.layers()[1].a.data(), &[0.0]);
        assert_eq!(p.layers()[1].c.as_ref().unwrap().data(), &[-4.0, 1.0]);
    }

    #[test]
    fn projection_example_row() {
        let s = spec(1, &[2], false);
        let mut p = IcnnParams::from_tensors(
            s,
            vec![
                Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(),
                Tensor::zeros(&[2]),
                Tensor::matrix(1, 2, vec![-1.0, 2.0]).unwrap(),
                Tensor::zeros(&[1]),
            ],
        )
        .unwrap();
        p.project_nonnegative();
        assert_eq!(p.layers()[1].a.data(), &[0.0, 2.0]);
        let before = p.clone();
        p.project_nonnegative();
        assert_eq!(p, before);
    }
}
