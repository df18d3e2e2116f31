//! Feed-forward networks on top of the tape.
//!
//! Parameter flattening order is fixed and shared by every consumer
//! (optimizers, vjps, checkpoints): layers in order, and within a layer the
//! weight matrix row-major followed by the bias. Weights are stored
//! `in_dim × out_dim`, so a batch `X (n×in)` maps to `act(X·W + b)`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Activation, Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par::{self, Exec};

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::dim("layer weight must be a matrix"));
        }
        if bias.len() != weight.cols() {
            return Err(Error::dim(format!(
                "bias length {} does not match {} outputs",
                bias.len(),
                weight.cols()
            )));
        }
        let bias = bias.reshaped(vec![weight.cols()])?;
        Ok(Self { weight, bias, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Layer sizes and activations of an MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default = "default_hidden_activation")]
    pub hidden_activation: Activation,
    #[serde(default = "default_output_activation")]
    pub output_activation: Activation,
}

fn default_hidden_activation() -> Activation {
    Activation::Tanh
}

fn default_output_activation() -> Activation {
    Activation::Identity
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Identity,
        }
    }

    pub fn with_activations(mut self, hidden: Activation, output: Activation) -> Self {
        self.hidden_activation = hidden;
        self.output_activation = output;
        self
    }

    fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    params: Vec<(Var, Var, Activation)>,
}

impl BoundMlp {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for &(w, b, act) in &self.params {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = tape.activation(z, act);
        }
        Ok(h)
    }

    /// Parameter gradients in the documented flattening order.
    pub fn flat_grads(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for &(w, b, _) in &self.params {
            out.extend_from_slice(grads.wrt(w).data());
            out.extend_from_slice(grads.wrt(b).data());
        }
        out
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("an MLP needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        let dims = spec.dims();
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| Layer {
                weight: Tensor::zeros(&[dims[k], dims[k + 1]]),
                bias: Tensor::zeros(&[dims[k + 1]]),
                activation: if k + 1 == n {
                    spec.output_activation
                } else {
                    spec.hidden_activation
                },
            })
            .collect();
        Self { layers }
    }

    /// Weights i.i.d. `N(0, stddev²)`, biases zero.
    pub fn init_gaussian<R: rand::Rng + ?Sized>(spec: &MlpSpec, stddev: f64, rng: &mut R) -> Result<Self> {
        if !(stddev > 0.0 && stddev.is_finite()) {
            return Err(Error::contract(format!("init stddev must be positive, got {stddev}")));
        }
        let normal = Normal::new(0.0, stddev).map_err(|e| Error::contract(e.to_string()))?;
        let mut net = Self::zeros(spec);
        for layer in &mut net.layers {
            for w in layer.weight.data_mut() {
                *w = normal.sample(rng);
            }
        }
        Ok(net)
    }

    /// Glorot-style uniform init, for tiny networks where a small Gaussian
    /// init starts too close to a constant map.
    pub fn init_uniform_scaled<R: rand::Rng + ?Sized>(spec: &MlpSpec, gain: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(spec);
        for layer in &mut net.layers {
            let limit = gain * (6.0 / (layer.in_dim() + layer.out_dim()) as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = rng.random_range(-limit..=limit);
            }
        }
        net
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.data_mut().copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.cols() != self.in_dim() {
            return Err(Error::dim(format!(
                "network expects {} input columns, got {}",
                self.in_dim(),
                input.cols()
            )));
        }
        if !input.is_finite() {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    /// Plain forward pass without recording a tape.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut h = input.as_matrix();
        for l in &self.layers {
            let mut z = super::tensor::matmul(&h, &l.weight);
            let c = z.cols();
            for (i, v) in z.data_mut().iter_mut().enumerate() {
                *v = l.activation.apply(*v + l.bias.data()[i % c]);
            }
            h = z;
        }
        Ok(h)
    }

    /// Places the parameters on `tape`; `trainable` decides whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        self.bind_with(tape, true)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundMlp {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let params = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = if trainable {
                    (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                };
                (w, b, l.activation)
            })
            .collect();
        BoundMlp { params }
    }
}

/// Gradient of the summed scalar head with respect to the input.
///
/// The network must have a single output column; each row's gradient is
/// then independent of the others, so a whole batch is handled in one pass.
pub fn grad_wrt_input(net: &Mlp, input: &Tensor) -> Result<Tensor> {
    if net.out_dim() != 1 {
        return Err(Error::contract(format!(
            "grad_wrt_input needs a scalar head, network has {} outputs",
            net.out_dim()
        )));
    }
    net.check_input(input)?;
    let mut tape = Tape::new();
    let bound = net.bind_frozen(&mut tape);
    let x = tape.leaf(input.clone());
    let y = bound.apply(&mut tape, x)?;
    let s = tape.sum(y);
    let g = tape.backward(s)?.wrt(x);
    g.reshaped(input.shape().to_vec())
}

/// Loss value and flat parameter gradient of `head(net(input))`.
///
/// `head` reduces the network output to a scalar; anything else is a
/// contract error.
pub fn grad_wrt_params<F>(net: &Mlp, input: &Tensor, head: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    net.check_input(input)?;
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let x = tape.constant(input.clone());
    let y = bound.apply(&mut tape, x)?;
    let loss = head(&mut tape, y)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), bound.flat_grads(&grads)))
}

/// `Jᵀ·cotangent` where `J = ∂ net(input) / ∂ params`.
pub fn vjp_params(net: &Mlp, input: &Tensor, cotangent: &Tensor) -> Result<Vec<f64>> {
    net.check_input(input)?;
    check_cotangent(net, input, cotangent)?;
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let x = tape.constant(input.clone());
    let y = bound.apply(&mut tape, x)?;
    let grads = tape.backward_with(y, cotangent)?;
    Ok(bound.flat_grads(&grads))
}

/// `Jᵀ·cotangent` where `J = ∂ net(input) / ∂ input`, row by row.
pub fn vjp_input(net: &Mlp, input: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
    net.check_input(input)?;
    check_cotangent(net, input, cotangent)?;
    let mut tape = Tape::new();
    let bound = net.bind_frozen(&mut tape);
    let x = tape.leaf(input.clone());
    let y = bound.apply(&mut tape, x)?;
    Ok(tape.backward_with(y, cotangent)?.wrt(x))
}

fn check_cotangent(net: &Mlp, input: &Tensor, cotangent: &Tensor) -> Result<()> {
    if cotangent.rows() != input.rows() || cotangent.cols() != net.out_dim() {
        return Err(Error::dim(format!(
            "cotangent is {}x{}, output is {}x{}",
            cotangent.rows(),
            cotangent.cols(),
            input.rows(),
            net.out_dim()
        )));
    }
    Ok(())
}

/// Per-row input Jacobians `∂ net(x_i) / ∂ x_i`, each `out_dim × in_dim`.
///
/// Uses one backward pass per output column over the whole batch.
pub fn input_jacobians(net: &Mlp, input: &Tensor) -> Result<Vec<Tensor>> {
    net.check_input(input)?;
    let mut tape = Tape::new();
    let bound = net.bind_frozen(&mut tape);
    let x = tape.leaf(input.clone());
    let y = bound.apply(&mut tape, x)?;
    let (n, d, c) = (input.rows(), net.in_dim(), net.out_dim());
    let mut jac = vec![vec![0.0; c * d]; n];
    for k in 0..c {
        let mut seed = Tensor::zeros(&[n, c]);
        for i in 0..n {
            seed.data_mut()[i * c + k] = 1.0;
        }
        let gx = tape.backward_with(y, &seed)?.wrt(x);
        for (i, j) in jac.iter_mut().enumerate() {
            j[k * d..(k + 1) * d].copy_from_slice(gx.row(i));
        }
    }
    Ok(jac.into_iter().map(|j| Tensor::raw_matrix(c, d, j)).collect())
}

/// Per-row parameter Jacobians `∂ net(x_i) / ∂ params`, each `out_dim × P`.
pub fn param_jacobians(net: &Mlp, input: &Tensor) -> Result<Vec<Tensor>> {
    net.check_input(input)?;
    let (c, p) = (net.out_dim(), net.num_params());
    par::try_map_range(Exec::default(), input.rows(), |i| {
        let row = Tensor::raw_matrix(1, input.cols(), input.row(i).to_vec());
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let x = tape.constant(row);
        let y = bound.apply(&mut tape, x)?;
        let mut data = Vec::with_capacity(c * p);
        for k in 0..c {
            let mut seed = Tensor::zeros(&[1, c]);
            seed.data_mut()[k] = 1.0;
            let grads = tape.backward_with(y, &seed)?;
            data.extend(bound.flat_grads(&grads));
        }
        Ok(Tensor::raw_matrix(c, p, data))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn single(w: f64, b: f64, act: Activation) -> Mlp {
        Mlp::new(vec![Layer::new(
            Tensor::matrix(1, 1, vec![w]).unwrap(),
            Tensor::vector(vec![b]).unwrap(),
            act,
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = Mlp::new(vec![Layer::new(
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::vector(vec![0.0, 0.0]).unwrap(),
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let out = net.forward(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn tanh_single_layer() {
        let net = single(2.0, 1.0, Activation::Tanh);
        let out = net.forward(&Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
        assert!((out.item() - 0.761_594_155_955_764_9).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_broadcast_bias() {
        let spec = MlpSpec::new(3, &[], 2);
        let mut net = Mlp::zeros(&spec);
        net.layers_mut()[0].bias = Tensor::vector(vec![0.5, -1.5]).unwrap();
        let out = net
            .forward(&Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        assert_eq!(out.data(), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let net = Mlp::zeros(&MlpSpec::new(3, &[4], 1));
        let r = net.forward(&Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(matches!(r, Err(Error::Dimension(_))));
        let bad = Mlp::new(vec![
            Layer::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[3]), Activation::Tanh).unwrap(),
            Layer::new(Tensor::zeros(&[4, 1]), Tensor::zeros(&[1]), Activation::Identity).unwrap(),
        ]);
        assert!(matches!(bad, Err(Error::Dimension(_))));
    }

    #[test]
    fn input_gradient_of_tanh_affine() {
        let net = single(2.0, 1.0, Activation::Tanh);
        let g = grad_wrt_input(&net, &Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
        let t1 = 1.0f64.tanh();
        assert!((g.item() - 2.0 * (1.0 - t1 * t1)).abs() < 1e-15);
        assert!((g.item() - 0.839_948_683_228_052_4).abs() < 1e-12);
    }

    #[test]
    fn input_gradient_of_square_head() {
        // x² via a custom head on an identity net.
        let net = single(1.0, 0.0, Activation::Identity);
        let mut tape = Tape::new();
        let bound = net.bind_frozen(&mut tape);
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = bound.apply(&mut tape, x).unwrap();
        let sq = tape.square(y);
        let s = tape.sum(sq);
        assert_eq!(tape.backward(s).unwrap().wrt(x).item(), 6.0);
    }

    #[test]
    fn constant_net_has_zero_input_gradient() {
        let mut net = Mlp::zeros(&MlpSpec::new(3, &[5], 1));
        net.layers_mut()[1].bias = Tensor::vector(vec![4.0]).unwrap();
        let g = grad_wrt_input(&net, &Tensor::matrix(2, 3, vec![1.0; 6]).unwrap()).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_head_is_contract_error() {
        let net = Mlp::zeros(&MlpSpec::new(2, &[], 2));
        let r = grad_wrt_input(&net, &Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(matches!(r, Err(Error::Contract(_))));
        let r = grad_wrt_params(&net, &Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), |_, y| Ok(y));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn one_parameter_linear_param_gradient() {
        let net = Mlp::new(vec![Layer::new(
            Tensor::matrix(1, 1, vec![0.7]).unwrap(),
            Tensor::vector(vec![0.0]).unwrap(),
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let (_, g) =
            grad_wrt_params(&net, &Tensor::matrix(1, 1, vec![5.0]).unwrap(), |t, y| Ok(t.sum(y))).unwrap();
        assert_eq!(g, vec![5.0, 1.0]);
    }

    #[test]
    fn zero_input_sum_loss_gives_unit_bias_grads() {
        let spec = MlpSpec::new(3, &[], 2);
        let net = Mlp::init_gaussian(&spec, 0.5, &mut seeded(3)).unwrap();
        let (_, g) =
            grad_wrt_params(&net, &Tensor::zeros(&[1, 3]), |t, y| Ok(t.sum(y))).unwrap();
        assert_eq!(&g[..6], &[0.0; 6]);
        assert_eq!(&g[6..], &[1.0, 1.0]);
    }

    #[test]
    fn linear_vjp_is_outer_product() {
        let net = Mlp::new(vec![Layer::new(
            Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
            Tensor::zeros(&[3]),
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let x = Tensor::matrix(1, 2, vec![2.0, -1.0]).unwrap();
        let v = Tensor::matrix(1, 3, vec![1.0, 0.5, -2.0]).unwrap();
        let g = vjp_params(&net, &x, &v).unwrap();
        let expected_w: Vec<f64> = [2.0, -1.0]
            .iter()
            .flat_map(|xi| [1.0, 0.5, -2.0].map(|vj| xi * vj))
            .collect();
        assert_eq!(&g[..6], expected_w.as_slice());
        assert_eq!(&g[6..], &[1.0, 0.5, -2.0]);

        let z = vjp_params(&net, &x, &Tensor::zeros(&[1, 3])).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(matches!(
            vjp_params(&net, &x, &Tensor::zeros(&[1, 2])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn init_is_reproducible_and_scaled() {
        let spec = MlpSpec::new(100, &[500], 200);
        let a = Mlp::init_gaussian(&spec, 0.02, &mut seeded(11)).unwrap();
        let b = Mlp::init_gaussian(&spec, 0.02, &mut seeded(11)).unwrap();
        let (pa, pb) = (a.params_flat(), b.params_flat());
        assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));

        let w: Vec<f64> = a.layers().iter().flat_map(|l| l.weight.data().to_vec()).collect();
        assert!(w.len() >= 100_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64).sqrt();
        assert!((sd - 0.02).abs() / 0.02 < 0.02, "sample sd {sd}");
        assert!(a.layers().iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));

        let tiny = Mlp::init_gaussian(&spec, 1e-300, &mut seeded(1)).unwrap();
        assert!(tiny.params_flat().iter().all(|v| v.abs() < 1e-290));
        assert!(Mlp::init_gaussian(&spec, 0.0, &mut seeded(1)).is_err());
    }
}
