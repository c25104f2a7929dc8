//! Small feed-forward networks with hand-written reverse passes.
//!
//! Parameters live in one flat `f64` slice so that optimizers and checkpoints
//! can treat every model the same way. A [`Tape`] records what the reverse pass
//! needs and is consumed by it.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Softplus,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Softplus => {
                if v > 30.0 {
                    v
                } else {
                    v.exp().ln_1p()
                }
            }
        }
    }

    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - post * post,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => 1.0 / (1.0 + (-pre).exp()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense { outputs: usize, activation: Activation },
    /// Stride-1, zero ("same") padded convolution on a square image. The
    /// kernel size must be odd.
    Conv2d { channels: usize, kernel: usize, activation: Activation },
}

/// Architecture descriptor. Inputs to a network whose first layer is a
/// convolution are read as `input_channels` square images stored channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    #[serde(default = "one")]
    pub input_channels: usize,
    pub layers: Vec<Layer>,
}

fn one() -> usize {
    1
}

impl Architecture {
    /// Fully connected network: `hidden` widths with `activation`, then a
    /// linear output layer.
    pub fn mlp(input_dim: usize, hidden: &[usize], output_dim: usize, activation: Activation) -> Self {
        let mut layers: Vec<Layer> = hidden.iter().map(|&w| Layer::Dense { outputs: w, activation }).collect();
        layers.push(Layer::Dense { outputs: output_dim, activation: Activation::Identity });
        Self { input_dim, input_channels: 1, layers }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Flat(usize),
    Image { channels: usize, side: usize },
}

impl Shape {
    fn len(self) -> usize {
        match self {
            Shape::Flat(n) => n,
            Shape::Image { channels, side } => channels * side * side,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerPlan {
    layer: Layer,
    input: Shape,
    output: Shape,
    offset: usize,
    weights: usize,
    biases: usize,
}

/// A network architecture together with its parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Approximator {
    arch: Architecture,
    plan: Vec<LayerPlan>,
    num_params: usize,
    pub params: Vec<f64>,
}

/// Primal values from one forward pass.
#[derive(Debug)]
pub struct Tape {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.post.last().map_or(&self.input, |v| v)
    }
}

impl Approximator {
    /// Builds the layout with all parameters zero.
    pub fn new(arch: Architecture) -> Result<Self> {
        if arch.input_dim == 0 {
            return Err(Error::InvalidParameter("network input dimension must be positive".into()));
        }
        let mut shape = if matches!(arch.layers.first(), Some(Layer::Conv2d { .. })) {
            let c = arch.input_channels.max(1);
            let side = ((arch.input_dim / c) as f64).sqrt().round() as usize;
            if c * side * side != arch.input_dim {
                return Err(Error::InvalidParameter(format!(
                    "input of length {} is not {} square image(s)",
                    arch.input_dim, c
                )));
            }
            Shape::Image { channels: c, side }
        } else {
            Shape::Flat(arch.input_dim)
        };
        let mut plan = Vec::with_capacity(arch.layers.len());
        let mut offset = 0;
        for &layer in &arch.layers {
            let (output, weights, biases) = match layer {
                Layer::Dense { outputs, .. } => {
                    if outputs == 0 {
                        return Err(Error::InvalidParameter("dense layer with zero outputs".into()));
                    }
                    (Shape::Flat(outputs), outputs * shape.len(), outputs)
                }
                Layer::Conv2d { channels, kernel, .. } => {
                    let Shape::Image { channels: cin, side } = shape else {
                        return Err(Error::InvalidParameter("convolution must follow an image".into()));
                    };
                    if kernel % 2 == 0 || channels == 0 {
                        return Err(Error::InvalidParameter(format!(
                            "convolution needs odd kernel and positive channels, got {kernel}, {channels}"
                        )));
                    }
                    (Shape::Image { channels, side }, channels * cin * kernel * kernel, channels)
                }
            };
            plan.push(LayerPlan { layer, input: shape, output, offset, weights, biases });
            offset += weights + biases;
            shape = output;
        }
        Ok(Self { arch, plan, num_params: offset, params: vec![0.0; offset] })
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut a = Self::new(arch)?;
        for p in &a.plan {
            let (fan_in, fan_out) = match (p.layer, p.input) {
                (Layer::Dense { outputs, .. }, s) => (s.len(), outputs),
                (Layer::Conv2d { channels, kernel, .. }, Shape::Image { channels: cin, .. }) => {
                    (cin * kernel * kernel, channels * kernel * kernel)
                }
                _ => unreachable!("validated in new"),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let u = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for w in &mut a.params[p.offset..p.offset + p.weights] {
                *w = u.sample(rng);
            }
        }
        Ok(a)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.plan.last().map_or(self.arch.input_dim, |p| p.output.len())
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.forward_with(&self.params, input)
    }

    pub fn backward(&self, tape: Tape, cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.backward_with(&self.params, tape, cotangent)
    }

    /// Output only, nothing recorded.
    pub fn eval_with(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        self.check(params, input)?;
        let mut cur = input.to_vec();
        for p in &self.plan {
            let (mut next, act) = self.layer_forward(p, params, &cur);
            for v in &mut next {
                *v = act.apply(*v);
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Forward pass using an external parameter slice laid out like `self.params`.
    pub fn forward_with(&self, params: &[f64], input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check(params, input)?;
        let mut pre = Vec::with_capacity(self.plan.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.plan.len());
        for p in &self.plan {
            let x = post.last().map_or(input, |v| v.as_slice());
            let (z, act) = self.layer_forward(p, params, x);
            let a: Vec<f64> = z.iter().map(|v| act.apply(*v)).collect();
            pre.push(z);
            post.push(a);
        }
        let out = post.last().cloned().unwrap_or_else(|| input.to_vec());
        Ok((out, Tape { input: input.to_vec(), pre, post }))
    }

    /// Reverse pass returning `(parameter gradient, input gradient)`.
    pub fn backward_with(&self, params: &[f64], tape: Tape, cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grad = vec![0.0; self.num_params];
        let gin = self.backward_into(params, tape, cotangent, &mut grad)?;
        Ok((grad, gin))
    }

    /// Reverse pass adding the parameter gradient into `grad`; returns the input gradient.
    pub fn backward_into(&self, params: &[f64], tape: Tape, cotangent: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        if cotangent.len() != self.output_dim() {
            return Err(Error::DimensionMismatch { expected: self.output_dim(), got: cotangent.len() });
        }
        if grad.len() != self.num_params {
            return Err(Error::DimensionMismatch { expected: self.num_params, got: grad.len() });
        }
        let Tape { input, pre, post } = tape;
        let mut g = cotangent.to_vec();
        for (l, p) in self.plan.iter().enumerate().rev() {
            let act = match p.layer {
                Layer::Dense { activation, .. } | Layer::Conv2d { activation, .. } => activation,
            };
            for ((gi, z), a) in g.iter_mut().zip(&pre[l]).zip(&post[l]) {
                *gi *= act.derivative(*z, *a);
            }
            let x = if l == 0 { &input } else { &post[l - 1] };
            g = self.layer_backward(p, params, x, &g, grad);
        }
        Ok(g)
    }

    fn check(&self, params: &[f64], input: &[f64]) -> Result<()> {
        if params.len() != self.num_params {
            return Err(Error::DimensionMismatch { expected: self.num_params, got: params.len() });
        }
        if input.len() != self.arch.input_dim {
            return Err(Error::DimensionMismatch { expected: self.arch.input_dim, got: input.len() });
        }
        Ok(())
    }

    fn layer_forward(&self, p: &LayerPlan, params: &[f64], x: &[f64]) -> (Vec<f64>, Activation) {
        let w = &params[p.offset..p.offset + p.weights];
        let b = &params[p.offset + p.weights..p.offset + p.weights + p.biases];
        match (p.layer, p.input) {
            (Layer::Dense { outputs, activation }, input) => {
                let n = input.len();
                let z = (0..outputs)
                    .map(|o| b[o] + w[o * n..(o + 1) * n].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
                    .collect();
                (z, activation)
            }
            (Layer::Conv2d { channels, kernel, activation }, Shape::Image { channels: cin, side }) => {
                let mut z = vec![0.0; channels * side * side];
                let r = (kernel / 2) as isize;
                let s = side as isize;
                for co in 0..channels {
                    let out = &mut z[co * side * side..(co + 1) * side * side];
                    out.fill(b[co]);
                    for ci in 0..cin {
                        let img = &x[ci * side * side..(ci + 1) * side * side];
                        let ker = &w[(co * cin + ci) * kernel * kernel..][..kernel * kernel];
                        for ky in 0..kernel as isize {
                            for kx in 0..kernel as isize {
                                let wk = ker[(ky * kernel as isize + kx) as usize];
                                let (dy, dx) = (ky - r, kx - r);
                                for row in 0.max(-dy)..s.min(s - dy) {
                                    for col in 0.max(-dx)..s.min(s - dx) {
                                        out[(row * s + col) as usize] += wk * img[((row + dy) * s + col + dx) as usize];
                                    }
                                }
                            }
                        }
                    }
                }
                (z, activation)
            }
            _ => unreachable!("validated in new"),
        }
    }

    fn layer_backward(&self, p: &LayerPlan, params: &[f64], x: &[f64], g: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let w = &params[p.offset..p.offset + p.weights];
        let (gw, gb) = grad[p.offset..p.offset + p.weights + p.biases].split_at_mut(p.weights);
        match (p.layer, p.input) {
            (Layer::Dense { outputs, .. }, input) => {
                let n = input.len();
                let mut gx = vec![0.0; n];
                for o in 0..outputs {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    gb[o] += go;
                    let row = &w[o * n..(o + 1) * n];
                    let grow = &mut gw[o * n..(o + 1) * n];
                    for i in 0..n {
                        grow[i] += go * x[i];
                        gx[i] += go * row[i];
                    }
                }
                gx
            }
            (Layer::Conv2d { channels, kernel, .. }, Shape::Image { channels: cin, side }) => {
                let mut gx = vec![0.0; cin * side * side];
                let r = (kernel / 2) as isize;
                let s = side as isize;
                for co in 0..channels {
                    let gout = &g[co * side * side..(co + 1) * side * side];
                    gb[co] += gout.iter().sum::<f64>();
                    for ci in 0..cin {
                        let img = &x[ci * side * side..(ci + 1) * side * side];
                        let base = (co * cin + ci) * kernel * kernel;
                        for ky in 0..kernel as isize {
                            for kx in 0..kernel as isize {
                                let k = (ky * kernel as isize + kx) as usize;
                                let wk = w[base + k];
                                let (dy, dx) = (ky - r, kx - r);
                                let mut acc = 0.0;
                                for row in 0.max(-dy)..s.min(s - dy) {
                                    for col in 0.max(-dx)..s.min(s - dx) {
                                        let o = (row * s + col) as usize;
                                        let i = ((row + dy) * s + col + dx) as usize;
                                        acc += gout[o] * img[i];
                                        gx[ci * side * side + i] += gout[o] * wk;
                                    }
                                }
                                gw[base + k] += acc;
                            }
                        }
                    }
                }
                gx
            }
            _ => unreachable!("validated in new"),
        }
    }
}

/// Elementwise `exp`.
pub fn positivity_transform(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|v| v.exp()).collect()
}

/// Elementwise `log`, rejecting non-positive entries.
pub fn positivity_inverse(positive: &[f64]) -> Result<Vec<f64>> {
    positive
        .iter()
        .map(|&v| if v > 0.0 { Ok(v.ln()) } else { Err(Error::NonPositiveInput(v)) })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn dense(outputs: usize, activation: Activation) -> Layer {
        Layer::Dense { outputs, activation }
    }

    #[test]
    fn identity_affine_layer() {
        let arch = Architecture { input_dim: 3, input_channels: 1, layers: vec![dense(3, Activation::Identity)] };
        let mut a = Approximator::new(arch).unwrap();
        for i in 0..3 {
            a.params[i * 3 + i] = 1.0;
        }
        let (y, _) = a.forward(&[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(y, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn tanh_at_zero_is_zero() {
        let mut r = rng::stream(1, 0);
        let a = Approximator::init(
            Architecture { input_dim: 4, input_channels: 1, layers: vec![dense(5, Activation::Tanh)] },
            &mut r,
        )
        .unwrap();
        let (y, _) = a.forward(&[0.0; 4]).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn affine_weight_gradient_is_outer_product() {
        let mut r = rng::stream(2, 0);
        let arch = Architecture { input_dim: 3, input_channels: 1, layers: vec![dense(2, Activation::Identity)] };
        let a = Approximator::init(arch, &mut r).unwrap();
        let x = [0.3, -0.7, 1.1];
        let c = [2.0, -0.5];
        let (_, tape) = a.forward(&x).unwrap();
        let (g, _) = a.backward(tape, &c).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((g[i * 3 + j] - c[i] * x[j]).abs() < 1e-15);
            }
            assert_eq!(g[6 + i], c[i]);
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut r = rng::stream(3, 0);
        let a = Approximator::init(Architecture::mlp(4, &[6, 5], 3, Activation::Tanh), &mut r).unwrap();
        let (_, tape) = a.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let (g, gx) = a.backward(tape, &[0.0; 3]).unwrap();
        assert!(g.iter().chain(&gx).all(|v| *v == 0.0));
    }

    #[test]
    fn dimension_checks() {
        let a = Approximator::new(Architecture::mlp(4, &[3], 2, Activation::Tanh)).unwrap();
        assert!(matches!(a.forward(&[0.0; 3]), Err(Error::DimensionMismatch { expected: 4, got: 3 })));
        assert_eq!(a.num_params(), 4 * 3 + 3 + 3 * 2 + 2);
    }

    #[test]
    fn conv_same_padding_preserves_size() {
        let arch = Architecture {
            input_dim: 16,
            input_channels: 1,
            layers: vec![
                Layer::Conv2d { channels: 2, kernel: 3, activation: Activation::Tanh },
                dense(3, Activation::Identity),
            ],
        };
        let mut r = rng::stream(4, 0);
        let a = Approximator::init(arch, &mut r).unwrap();
        assert_eq!(a.num_params(), 2 * 9 + 2 + 32 * 3 + 3);
        let (y, _) = a.forward(&[1.0; 16]).unwrap();
        assert_eq!(y.len(), 3);
    }

    #[test]
    fn positivity_round_trip() {
        assert_eq!(positivity_transform(&[0.0]), vec![1.0]);
        let v = positivity_transform(&[0.64f64.ln()]);
        assert!((v[0] - 0.64).abs() < 1e-15);
        assert!(matches!(positivity_inverse(&[1.0, -0.1]), Err(Error::NonPositiveInput(_))));
    }
}
