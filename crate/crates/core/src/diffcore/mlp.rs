//! Dense feed-forward networks on the graph.
//!
//! [`MlpNet`] is plain data (weights, biases, activation tags and optional
//! fixed input/output affine maps). Binding a net to a [`Graph`] turns its
//! parameters into leaves; [`mlp_forward`] and [`mlp_input_gradient`] then
//! build ordinary primitive nodes, so both the output and its input gradient
//! can be differentiated with respect to the weights by a single reverse pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::DiffError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Tanh,
    Relu,
    /// `100 * tanh(a)`.
    TanhScaled100,
}

impl Activation {
    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::TanhScaled100 => "tanh_scaled_100",
        }
    }
}

/// One dense layer `act(W h + b)` with `W` stored `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Fixed, non-trainable map `(v - center) * scale` (input side) or
/// `v * scale + center` (output side).
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub center: Tensor,
    pub scale: Tensor,
}

impl AffineMap {
    pub fn new(center: &[f64], scale: &[f64]) -> Result<Self, DiffError> {
        if center.len() != scale.len() {
            return Err(DiffError::Shape("affine map center and scale differ in length".into()));
        }
        Ok(Self { center: Tensor::row_vector(center), scale: Tensor::row_vector(scale) })
    }

    /// Maps the box `[lo, hi]` onto `[-1, 1]` per axis (degenerate axes are left unscaled).
    pub fn normalizing(lo: &[f64], hi: &[f64]) -> Result<Self, DiffError> {
        let center: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let scale: Vec<f64> = lo
            .iter()
            .zip(hi)
            .map(|(l, h)| if h > l { 2.0 / (h - l) } else { 1.0 })
            .collect();
        Self::new(&center, &scale)
    }

    pub fn dim(&self) -> usize {
        self.scale.cols()
    }
}

/// Dense feed-forward network description.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpNet {
    pub layers: Vec<Layer>,
    pub input_map: Option<AffineMap>,
    pub output_map: Option<AffineMap>,
}

impl MlpNet {
    /// Builds a net from consecutive layer widths, `dims[0]` being the input.
    ///
    /// Weights and biases are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn random<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        if dims.len() < 2 {
            return Err(DiffError::Shape("an MLP needs at least an input and an output width".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (k, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = if fan_in > 0 { 1.0 / (fan_in as f64).sqrt() } else { 1.0 };
            let weight: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
            let bias: Vec<f64> = (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
            let activation = if k + 2 == dims.len() { output } else { hidden };
            layers.push(Layer {
                weight: Tensor::new(fan_out, fan_in, weight)?,
                bias: Tensor::row_vector(&bias),
                activation,
            });
        }
        Ok(Self { layers, input_map: None, output_map: None })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, DiffError> {
        let net = Self { layers, input_map: None, output_map: None };
        net.validate()?;
        Ok(net)
    }

    pub fn with_input_map(mut self, map: AffineMap) -> Result<Self, DiffError> {
        if map.dim() != self.input_dim() {
            return Err(DiffError::Shape(format!(
                "input map of width {} on a net with input width {}",
                map.dim(),
                self.input_dim()
            )));
        }
        self.input_map = Some(map);
        Ok(self)
    }

    pub fn with_output_map(mut self, map: AffineMap) -> Result<Self, DiffError> {
        if map.dim() != self.output_dim() {
            return Err(DiffError::Shape(format!(
                "output map of width {} on a net with output width {}",
                map.dim(),
                self.output_dim()
            )));
        }
        self.output_map = Some(map);
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_dim)
    }

    /// Layer widths `[in, h1, ..., out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Layer::output_dim));
        d
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Checks that consecutive layer widths chain.
    pub fn validate(&self) -> Result<(), DiffError> {
        if self.layers.is_empty() {
            return Err(DiffError::Shape("network without layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.bias.shape() != (1, l.output_dim()) {
                return Err(DiffError::Shape(format!("layer {k}: bias does not match weight rows")));
            }
            if k > 0 && self.layers[k - 1].output_dim() != l.input_dim() {
                return Err(DiffError::Shape(format!("layer {k}: input width does not chain")));
            }
        }
        if let Some(m) = &self.input_map {
            if m.dim() != self.input_dim() {
                return Err(DiffError::Shape("input map width mismatch".into()));
            }
        }
        if let Some(m) = &self.output_map {
            if m.dim() != self.output_dim() {
                return Err(DiffError::Shape("output map width mismatch".into()));
            }
        }
        Ok(())
    }

    /// Parameter tensors in a fixed order: `W_0, b_0, W_1, b_1, ...`.
    pub fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Places the net on `graph`. With `trainable` the weights become
    /// gradient-receiving leaves, otherwise constants.
    pub fn bind<'a>(&'a self, graph: &mut Graph<'a>, trainable: bool) -> BoundMlp {
        let leaf = |g: &mut Graph<'a>, t: &'a Tensor| if trainable { g.variable_ref(t) } else { g.constant_ref(t) };
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer { weight: leaf(graph, &l.weight), bias: leaf(graph, &l.bias), activation: l.activation })
            .collect();
        let input_map = self
            .input_map
            .as_ref()
            .map(|m| (graph.constant_ref(&m.center), graph.constant_ref(&m.scale)));
        let output_map = self
            .output_map
            .as_ref()
            .map(|m| (graph.constant_ref(&m.center), graph.constant_ref(&m.scale)));
        BoundMlp {
            layers,
            input_map,
            output_map,
            input_dim: self.input_dim(),
            output_dim: self.output_dim(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
    pub activation: Activation,
}

/// An [`MlpNet`] whose parameters live on a graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<BoundLayer>,
    input_map: Option<(Var, Var)>,
    output_map: Option<(Var, Var)>,
    input_dim: usize,
    output_dim: usize,
}

impl BoundMlp {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Parameter leaves in [`MlpNet::parameters`] order.
    pub fn parameter_vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// Intermediate values of a forward pass, kept for the input gradient.
struct ForwardTrace {
    output: Var,
    /// Pre- and post-activation of the last layer.
    last_pre: Var,
    last_post: Var,
    /// Post-activation of every hidden layer.
    hidden: Vec<Var>,
}

fn apply_activation(g: &mut Graph<'_>, a: Var, act: Activation) -> Result<Var, DiffError> {
    match act {
        Activation::Linear => Ok(a),
        Activation::Tanh => g.tanh(a),
        Activation::Relu => g.relu(a),
        Activation::TanhScaled100 => {
            let t = g.tanh(a)?;
            g.scale(t, 100.0)
        }
    }
}

fn trace(g: &mut Graph<'_>, net: &BoundMlp, x: Var) -> Result<ForwardTrace, DiffError> {
    let (_, cols) = g.shape(x);
    if cols != net.input_dim {
        return Err(DiffError::Shape(format!("network expects input width {}, got {cols}", net.input_dim)));
    }
    let mut h = x;
    if let Some((center, scale)) = net.input_map {
        let neg = g.neg(center)?;
        let shifted = g.add_row(h, neg)?;
        h = g.mul_row(shifted, scale)?;
    }
    let mut hidden = Vec::with_capacity(net.layers.len().saturating_sub(1));
    let mut last_pre = h;
    let mut last_post = h;
    for (k, layer) in net.layers.iter().enumerate() {
        let lin = g.matmul_t(h, layer.weight)?;
        let pre = g.add_row(lin, layer.bias)?;
        h = apply_activation(g, pre, layer.activation)?;
        if k + 1 == net.layers.len() {
            last_pre = pre;
            last_post = h;
        } else {
            hidden.push(h);
        }
    }
    if let Some((center, scale)) = net.output_map {
        let scaled = g.mul_row(h, scale)?;
        h = g.add_row(scaled, center)?;
    }
    Ok(ForwardTrace { output: h, last_pre, last_post, hidden })
}

/// Batched forward pass: `x` is `m x in`, the result `m x out`.
pub fn mlp_forward(g: &mut Graph<'_>, net: &BoundMlp, x: Var) -> Result<Var, DiffError> {
    Ok(trace(g, net, x)?.output)
}

/// Derivative of an activation evaluated from its pre- and post-activation.
fn activation_derivative(g: &mut Graph<'_>, act: Activation, post: Var, pre: Var) -> Result<Option<Var>, DiffError> {
    match act {
        Activation::Linear => Ok(None),
        Activation::Tanh => {
            let sq = g.square(post)?;
            Ok(Some(g.affine(sq, -1.0, 1.0)?))
        }
        Activation::TanhScaled100 => {
            // post = 100 tanh(pre): derivative 100 (1 - tanh^2)
            let t = g.tanh(pre)?;
            let sq = g.square(t)?;
            Ok(Some(g.affine(sq, -100.0, 100.0)?))
        }
        Activation::Relu => Err(DiffError::Activation("relu is not continuously differentiable".into())),
    }
}

/// Value and input gradient of a scalar-output net, sharing one forward pass.
///
/// The gradient is `W_0^T D_1 W_1^T D_2 ...` assembled from primitives, so
/// it is itself differentiable with respect to the parameters.
pub fn mlp_value_and_input_gradient(g: &mut Graph<'_>, net: &BoundMlp, x: Var) -> Result<(Var, Var), DiffError> {
    if net.output_dim != 1 {
        return Err(DiffError::Shape(format!("input gradient needs a scalar-output net, got width {}", net.output_dim)));
    }
    if let Some(l) = net.layers.iter().find(|l| !l.activation.is_smooth()) {
        return Err(DiffError::Activation(format!("{} activation in a differentiated net", l.activation.tag())));
    }
    let tr = trace(g, net, x)?;
    let n_layers = net.layers.len();

    let last = &net.layers[n_layers - 1];
    // delta holds d(out)/d(pre-activation) of the current layer, one row per sample
    let mut delta = match activation_derivative(g, last.activation, tr.last_post, tr.last_pre)? {
        Some(d) => d,
        None => {
            let m = g.shape(x).0;
            g.constant(Tensor::filled(m, 1, 1.0))
        }
    };
    if let Some((_, scale)) = net.output_map {
        delta = g.mul_row(delta, scale)?;
    }
    for k in (0..n_layers).rev() {
        let layer = &net.layers[k];
        // d/d(h_k) = delta_k W_k
        let dh = g.matmul(delta, layer.weight)?;
        if k == 0 {
            delta = dh;
            break;
        }
        let prev = &net.layers[k - 1];
        let post = tr.hidden[k - 1];
        delta = match activation_derivative(g, prev.activation, post, post)? {
            Some(d) => g.mul(dh, d)?,
            None => dh,
        };
    }
    if let Some((_, scale)) = net.input_map {
        delta = g.mul_row(delta, scale)?;
    }
    Ok((tr.output, delta))
}

/// Input gradient `d(net)/dx` of a scalar-output net, `m x in`.
pub fn mlp_input_gradient(g: &mut Graph<'_>, net: &BoundMlp, x: Var) -> Result<Var, DiffError> {
    Ok(mlp_value_and_input_gradient(g, net, x)?.1)
}
