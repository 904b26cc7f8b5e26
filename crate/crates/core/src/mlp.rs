//! Dense multilayer perceptrons over token matrices, with manual
//! backpropagation and an Adam optimizer.
//!
//! Tokens are rows. A linear layer stores its weight as an `in x out` matrix so
//! that `y = x W + 1 b^T`; flattened in column-major order this is the usual
//! `out x in` row-major layout.

use nalgebra::{DMatrix, DVector, RealField};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Floating-point element type usable in an [`Mlp`].
pub trait Real: RealField + Copy {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// `op(a) op(b)` where `op` optionally transposes.
    fn product(a: &DMatrix<Self>, ta: bool, b: &DMatrix<Self>, tb: bool) -> DMatrix<Self>;
    /// Elementwise `exp` in place.
    fn exp_in_place(xs: &mut [Self]);
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn of_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn product(a: &DMatrix<Self>, ta: bool, b: &DMatrix<Self>, tb: bool) -> DMatrix<Self> {
                // column-major storage: a transposed operand is the same buffer with swapped strides
                let view = |x: &DMatrix<Self>, t: bool| {
                    let ld = x.nrows() as isize;
                    if t {
                        (x.ncols(), x.nrows(), ld, 1)
                    } else {
                        (x.nrows(), x.ncols(), 1, ld)
                    }
                };
                let (m, k, rsa, csa) = view(a, ta);
                let (k2, n, rsb, csb) = view(b, tb);
                assert_eq!(k, k2, "matrix product inner dimension");
                let mut out = DMatrix::<$t>::zeros(m, n);
                if m > 0 && n > 0 && k > 0 {
                    // SAFETY: strides describe the live buffers of `a`, `b` and `out`
                    // with the dimensions checked above.
                    unsafe {
                        $gemm(
                            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0,
                            out.as_mut_ptr(), 1, m as isize,
                        );
                    }
                }
                out
            }
            fn exp_in_place(xs: &mut [Self]) {
                for x in xs {
                    *x = x.exp();
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Hidden-layer nonlinearity. The output layer is always the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x * sigmoid(x)`.
    #[default]
    Silu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
        }
    }

    fn apply_in_place<T: Real>(self, h: &mut [T]) {
        match self {
            Activation::Silu => {
                let mut e: Vec<T> = h.iter().map(|&x| -x).collect();
                T::exp_in_place(&mut e);
                for (x, e) in h.iter_mut().zip(&e) {
                    *x *= T::one() / (T::one() + *e);
                }
            }
        }
    }

    /// Writes activations to `out` and replaces `pre` by the derivative.
    fn apply_with_derivative_in_place<T: Real>(self, pre: &mut [T], out: &mut [T]) {
        match self {
            Activation::Silu => {
                for (o, &x) in out.iter_mut().zip(pre.iter()) {
                    *o = -x;
                }
                T::exp_in_place(out);
                for (x, o) in pre.iter_mut().zip(out.iter_mut()) {
                    let s = T::one() / (T::one() + *o);
                    *o = *x * s;
                    *x = s * (T::one() + *x * (T::one() - s));
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Real> {
    /// `in x out`.
    pub weight: DMatrix<T>,
    pub bias: DVector<T>,
}

impl<T: Real> Linear<T> {
    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Real> {
    layers: Vec<Linear<T>>,
    activation: Activation,
}

/// Intermediate values kept by [`Mlp::forward_cached`] for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Real> {
    inputs: Vec<DMatrix<T>>,
    /// Activation derivatives at each hidden layer's pre-activation.
    derivatives: Vec<DMatrix<T>>,
}

fn check_sizes(sizes: &[usize]) {
    assert!(sizes.len() >= 2, "an MLP needs at least an input and an output size");
    assert!(sizes.iter().all(|&s| s > 0), "layer sizes must be positive");
}

impl<T: Real> Mlp<T> {
    /// Layer sizes `[in, hidden..., out]` with `n_layers` linear maps.
    pub fn sizes(input: usize, hidden: usize, output: usize, n_layers: usize) -> Vec<usize> {
        assert!(n_layers >= 1);
        let mut s = vec![input];
        s.extend(std::iter::repeat_n(hidden, n_layers - 1));
        s.push(output);
        s
    }

    /// Weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new_uniform<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        check_sizes(sizes);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut draw = || T::of_f64(rng.random_range(-bound..bound));
                // drawn in flattened order
                let mut weight = DMatrix::zeros(w[0], w[1]);
                for o in 0..w[1] {
                    for i in 0..w[0] {
                        weight[(i, o)] = draw();
                    }
                }
                let bias = DVector::from_fn(w[1], |_, _| draw());
                Linear { weight, bias }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        check_sizes(sizes);
        let layers = sizes
            .windows(2)
            .map(|w| Linear {
                weight: DMatrix::zeros(w[0], w[1]),
                bias: DVector::zeros(w[1]),
            })
            .collect();
        Self { layers, activation }
    }

    /// Rebuilds a network from [`Mlp::flatten`] output.
    pub fn from_flat(sizes: &[usize], activation: Activation, values: &[T]) -> Option<Self> {
        let mut mlp = Self::zeros(sizes, activation);
        if values.len() != mlp.param_count() {
            return None;
        }
        let mut offset = 0;
        for t in mlp.tensors_mut() {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        }
        Some(mlp)
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].in_dim()];
        s.extend(self.layers.iter().map(|l| l.out_dim()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter tensors in storage order: weight then bias, layer by layer.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.map(|v| U::of_f64(v.as_f64())),
                    bias: l.bias.map(|v| U::of_f64(v.as_f64())),
                })
                .collect(),
            activation: self.activation,
        }
    }

    fn affine(layer: &Linear<T>, x: &DMatrix<T>) -> DMatrix<T> {
        let mut a = T::product(x, false, &layer.weight, false);
        let rows = a.nrows().max(1);
        for (col, &b) in a.as_mut_slice().chunks_exact_mut(rows).zip(layer.bias.iter()) {
            for v in col {
                *v += b;
            }
        }
        a
    }

    pub fn forward(&self, x: &DMatrix<T>) -> DMatrix<T> {
        assert_eq!(x.ncols(), self.input_dim(), "MLP input width");
        let last = self.layers.len() - 1;
        let mut h = Self::affine(&self.layers[0], x);
        for l in 1..=last {
            self.activation.apply_in_place(h.as_mut_slice());
            h = Self::affine(&self.layers[l], &h);
        }
        h
    }

    pub fn forward_cached(&self, x: &DMatrix<T>) -> (DMatrix<T>, ForwardCache<T>) {
        assert_eq!(x.ncols(), self.input_dim(), "MLP input width");
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut derivatives = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let a = Self::affine(layer, &h);
            inputs.push(h);
            if l + 1 == self.layers.len() {
                return (
                    a,
                    ForwardCache {
                        inputs,
                        derivatives,
                    },
                );
            }
            let mut deriv = a;
            h = DMatrix::zeros(deriv.nrows(), deriv.ncols());
            self.activation
                .apply_with_derivative_in_place(deriv.as_mut_slice(), h.as_mut_slice());
            derivatives.push(deriv);
        }
        unreachable!("an MLP has at least one layer")
    }

    /// Gradients of a loss with respect to every parameter, given
    /// `d_out = dLoss/dOutput`; also returns `dLoss/dInput` when requested.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_out: &DMatrix<T>,
        want_input_grad: bool,
    ) -> (Mlp<T>, Option<DMatrix<T>>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = d_out.clone();
        let mut d_input = None;
        for l in (0..self.layers.len()).rev() {
            let input = &cache.inputs[l];
            let dw = T::product(input, true, &g, false);
            let rows = g.nrows().max(1);
            let db = DVector::from_iterator(
                g.ncols(),
                g.as_slice().chunks_exact(rows).map(|c| c.iter().fold(T::zero(), |a, &v| a + v)),
            );
            grads.push(Linear { weight: dw, bias: db });
            if l > 0 || want_input_grad {
                let mut dh = T::product(&g, false, &self.layers[l].weight, true);
                if l > 0 {
                    dh.component_mul_assign(&cache.derivatives[l - 1]);
                    g = dh;
                } else {
                    d_input = Some(dh);
                }
            }
        }
        grads.reverse();
        (
            Mlp {
                layers: grads,
                activation: self.activation,
            },
            d_input,
        )
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one network.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    config: AdamConfig,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(model: &Mlp<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = model.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut Mlp<T>, grads: &Mlp<T>) {
        self.step += 1;
        let c = self.config;
        let b1 = T::of_f64(c.beta1);
        let b2 = T::of_f64(c.beta2);
        let one_b1 = T::of_f64(1.0 - c.beta1);
        let one_b2 = T::of_f64(1.0 - c.beta2);
        let lr_hat = T::of_f64(c.learning_rate / (1.0 - c.beta1.powi(self.step)));
        let v_corr = T::of_f64(1.0 / (1.0 - c.beta2.powi(self.step)));
        let eps = T::of_f64(c.eps);
        let g_tensors = grads.tensors();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(g_tensors)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= lr_hat * *m / ((*v * v_corr).sqrt() + eps);
            }
        }
    }
}
