//! Parametrisation of the learned dynamics `f*`, the consistent output
//! injection `L*`, the δISS Lyapunov function `V` and the embedded injection
//! pair, plus the pairwise projection that enforces the decrease inequality.
//!
//! Everything here is expressed on a [`Graph`] with one sample per row, so
//! the same code serves training (parameters as variables) and evaluation
//! (parameters as constants).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{mlp_forward, mlp_value_and_input_gradient, Activation, AffineMap, BoundMlp, Graph, MlpNet, Tensor, Var};
use crate::error::{Error, Result};
use crate::system::{BoxDomain, Dims, OutputMap};

pub use crate::diffcore::{smooth_relu, smooth_relu_grad};

/// Scalar settings of the certificate, the losses and the optimiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Decrease rate α.
    pub alpha: f64,
    /// Weight ε_V of the quadratic lower bound in `V`.
    pub eps_v: f64,
    pub rho_u: f64,
    pub rho_y: f64,
    /// Gain on the neighbour signal of a local observer.
    pub rho_z: f64,
    /// Clamp of the projection denominator.
    pub eps_proj: f64,
    /// Threshold `d` of the smoothed ReLU.
    pub sigma_d: f64,
    pub lambda_f: f64,
    pub lambda_lstar: f64,
    pub lambda_gradv: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            eps_v: 0.2,
            rho_u: 0.0,
            rho_y: 0.0,
            rho_z: 0.0,
            eps_proj: 1e-4,
            sigma_d: 1e-3,
            lambda_f: 1.0,
            lambda_lstar: 10.0,
            lambda_gradv: 100.0,
            lr: 1e-3,
            batch: 1000,
            epochs: 1000,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [("alpha", self.alpha), ("eps_v", self.eps_v), ("eps_proj", self.eps_proj), ("sigma_d", self.sigma_d), ("lr", self.lr)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("rho_u", self.rho_u),
            ("rho_y", self.rho_y),
            ("rho_z", self.rho_z),
            ("lambda_f", self.lambda_f),
            ("lambda_lstar", self.lambda_lstar),
            ("lambda_gradv", self.lambda_gradv),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Hidden widths and activation shared by the five networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { hidden: vec![128, 256, 128], activation: Activation::Tanh }
    }
}

/// Fixed input normalisation and output scaling applied around the nets.
///
/// Inputs are mapped from their domain boxes onto `[-1, 1]`; the outputs of
/// `f*`, `g_L` and the embedded pair are multiplied by `xdot_scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelScaling {
    pub x: BoxDomain,
    pub u: BoxDomain,
    pub y: BoxDomain,
    pub w: BoxDomain,
    pub xdot_scale: Vec<f64>,
}

/// The five networks of one observer together with its settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ObserverModel {
    pub dims: Dims,
    pub output: OutputMap,
    /// `f*(x, u, w) -> ẋ`.
    pub f_star: MlpNet,
    /// `g_L(x, u, w, y) -> ℝ^{n_x}`.
    pub g_l: MlpNet,
    /// `g_V(x1, x2) -> ℝ`.
    pub g_v: MlpNet,
    /// `L̂_1, L̂_2(χ1, χ2) -> ℝ^{n_x}` with χ = (z, u, y, w).
    pub l_hat_1: MlpNet,
    pub l_hat_2: MlpNet,
    pub hyper: Hyperparams,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = Vec::with_capacity(hidden.len() + 2);
    d.push(input);
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

impl ObserverModel {
    /// Randomly initialised model; all nets are drawn from one stream seeded by `seed`.
    pub fn random(
        dims: Dims,
        output: OutputMap,
        arch: &Architecture,
        hyper: Hyperparams,
        scaling: Option<&ModelScaling>,
        seed: u64,
    ) -> Result<Self> {
        output.validate(dims.nx)?;
        if output.output_dim() != dims.ny {
            return Err(Error::Dimension(format!("output map has {} channels, dims say {}", output.output_dim(), dims.ny)));
        }
        if !arch.activation.is_smooth() {
            return Err(Error::Config("hidden activation must be continuously differentiable".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = &arch.hidden;
        let act = arch.activation;
        let chi = dims.chi();
        let mut f_star = MlpNet::random(&widths(dims.nx + dims.nu + dims.nw, h, dims.nx), act, Activation::Linear, &mut rng)?;
        let mut g_l = MlpNet::random(&widths(dims.nx + dims.nu + dims.nw + dims.ny, h, dims.nx), act, Activation::Linear, &mut rng)?;
        let mut g_v = MlpNet::random(&widths(2 * dims.nx, h, 1), act, Activation::TanhScaled100, &mut rng)?;
        let mut l_hat_1 = MlpNet::random(&widths(2 * chi, h, dims.nx), act, Activation::Linear, &mut rng)?;
        let mut l_hat_2 = MlpNet::random(&widths(2 * chi, h, dims.nx), act, Activation::Linear, &mut rng)?;

        if let Some(s) = scaling {
            let check = |b: &BoxDomain, n: usize, what: &str| {
                if b.dim() != n {
                    Err(Error::Dimension(format!("{what} box has {} axes, expected {n}", b.dim())))
                } else {
                    Ok(())
                }
            };
            check(&s.x, dims.nx, "state")?;
            check(&s.u, dims.nu, "input")?;
            check(&s.y, dims.ny, "output")?;
            check(&s.w, dims.nw, "neighbour")?;
            if s.xdot_scale.len() != dims.nx {
                return Err(Error::Dimension("xdot scale length differs from n_x".into()));
            }
            let norm = |parts: &[&BoxDomain]| {
                let b = BoxDomain::product(parts);
                AffineMap::normalizing(&b.lo, &b.hi)
            };
            let out = AffineMap::new(&vec![0.0; dims.nx], &s.xdot_scale)?;
            f_star = f_star.with_input_map(norm(&[&s.x, &s.u, &s.w])?)?.with_output_map(out.clone())?;
            g_l = g_l.with_input_map(norm(&[&s.x, &s.u, &s.w, &s.y])?)?.with_output_map(out.clone())?;
            g_v = g_v.with_input_map(norm(&[&s.x, &s.x])?)?;
            let chi_box = [&s.x, &s.u, &s.y, &s.w, &s.x, &s.u, &s.y, &s.w];
            l_hat_1 = l_hat_1.with_input_map(norm(&chi_box)?)?.with_output_map(out.clone())?;
            l_hat_2 = l_hat_2.with_input_map(norm(&chi_box)?)?.with_output_map(out)?;
        }

        let model = Self { dims, output, f_star, g_l, g_v, l_hat_1, l_hat_2, hyper };
        model.validate()?;
        Ok(model)
    }

    /// Checks that every net is consistent with `dims` and the settings are valid.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        self.hyper.validate()?;
        self.output.validate(d.nx)?;
        if self.output.output_dim() != d.ny {
            return Err(Error::Dimension("output map width differs from n_y".into()));
        }
        let expect = |net: &MlpNet, name: &str, input: usize, output: usize| -> Result<()> {
            net.validate()?;
            if net.input_dim() != input || net.output_dim() != output {
                return Err(Error::Dimension(format!(
                    "{name} maps {} -> {}, expected {input} -> {output}",
                    net.input_dim(),
                    net.output_dim()
                )));
            }
            Ok(())
        };
        expect(&self.f_star, "f_star", d.nx + d.nu + d.nw, d.nx)?;
        expect(&self.g_l, "g_l", d.nx + d.nu + d.nw + d.ny, d.nx)?;
        expect(&self.g_v, "g_v", 2 * d.nx, 1)?;
        expect(&self.l_hat_1, "l_hat_1", 2 * d.chi(), d.nx)?;
        expect(&self.l_hat_2, "l_hat_2", 2 * d.chi(), d.nx)?;
        if let Some(l) = self.g_v.layers.iter().find(|l| !l.activation.is_smooth()) {
            return Err(Error::Config(format!("g_v uses the non-smooth activation {}", l.activation.tag())));
        }
        Ok(())
    }

    pub fn nets(&self) -> [(&'static str, &MlpNet); 5] {
        [
            ("f_star", &self.f_star),
            ("g_l", &self.g_l),
            ("g_v", &self.g_v),
            ("l_hat_1", &self.l_hat_1),
            ("l_hat_2", &self.l_hat_2),
        ]
    }

    pub fn nets_mut(&mut self) -> [&mut MlpNet; 5] {
        [&mut self.f_star, &mut self.g_l, &mut self.g_v, &mut self.l_hat_1, &mut self.l_hat_2]
    }

    /// All trainable tensors in a fixed order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.nets().into_iter().flat_map(|(_, n)| n.parameters()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.nets_mut().into_iter().flat_map(|n| n.parameters_mut()).collect()
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> BoundModel<'a> {
        BoundModel {
            model: self,
            f_star: self.f_star.bind(g, trainable),
            g_l: self.g_l.bind(g, trainable),
            g_v: self.g_v.bind(g, trainable),
            l_hat_1: self.l_hat_1.bind(g, trainable),
            l_hat_2: self.l_hat_2.bind(g, trainable),
        }
    }
}

/// χ = (z, u, y, w) for a batch, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct ChiVars {
    pub z: Var,
    pub u: Var,
    pub y: Var,
    pub w: Var,
}

/// χ = (z, u, y, w) for a batch of samples, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct ChiBatch {
    pub z: Tensor,
    pub u: Tensor,
    pub y: Tensor,
    pub w: Tensor,
}

impl ChiBatch {
    pub fn single(z: &[f64], u: &[f64], y: &[f64], w: &[f64]) -> Self {
        Self { z: Tensor::row_vector(z), u: Tensor::row_vector(u), y: Tensor::row_vector(y), w: Tensor::row_vector(w) }
    }

    pub fn rows(&self) -> usize {
        self.z.rows()
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> ChiVars {
        ChiVars { z: g.constant_ref(&self.z), u: g.constant_ref(&self.u), y: g.constant_ref(&self.y), w: g.constant_ref(&self.w) }
    }
}

/// `V`, its argument to σ, and both gradient blocks for a batch of pairs.
#[derive(Clone, Copy, Debug)]
pub struct LyapunovTerms {
    pub value: Var,
    /// `g_V(z1, z2) - g_V(z1, z1)`.
    pub gap: Var,
    pub d1: Var,
    pub d2: Var,
}

/// Output of [`BoundModel::embedded_pair`].
#[derive(Clone, Copy, Debug)]
pub struct EmbeddedPair {
    pub l1: Var,
    pub l2: Var,
    /// Raw `[L̂_1; L̂_2]` before projection.
    pub raw: Var,
    /// Projected `[L_1*; L_2*]`.
    pub projected: Var,
    /// `[∂_1 V, ∂_2 V]`.
    pub grad: Var,
    pub grad_norm_sq: Var,
    pub lambda: Var,
    pub lyapunov: LyapunovTerms,
    pub f1: Var,
    pub f2: Var,
}

/// An [`ObserverModel`] whose networks are placed on a graph.
pub struct BoundModel<'a> {
    pub model: &'a ObserverModel,
    pub f_star: BoundMlp,
    pub g_l: BoundMlp,
    pub g_v: BoundMlp,
    pub l_hat_1: BoundMlp,
    pub l_hat_2: BoundMlp,
}

impl BoundModel<'_> {
    fn hyper(&self) -> &Hyperparams {
        &self.model.hyper
    }

    /// Parameter leaves in [`ObserverModel::parameters`] order.
    pub fn parameter_vars(&self) -> Vec<Var> {
        [&self.f_star, &self.g_l, &self.g_v, &self.l_hat_1, &self.l_hat_2]
            .into_iter()
            .flat_map(BoundMlp::parameter_vars)
            .collect()
    }

    /// `f*(x, u, w)`.
    pub fn dynamics(&self, g: &mut Graph<'_>, x: Var, u: Var, w: Var) -> Result<Var> {
        let inp = g.concat(&[x, u, w])?;
        Ok(mlp_forward(g, &self.f_star, inp)?)
    }

    /// `h(x)` as a graph node.
    pub fn measure(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        Ok(g.select(x, self.model.output.indices())?)
    }

    /// `L*(x, u, w, y) = g_L(x, u, w, y) - g_L(x, u, w, h(x))`.
    pub fn output_injection(&self, g: &mut Graph<'_>, x: Var, u: Var, w: Var, y: Var) -> Result<Var> {
        let hx = self.measure(g, x)?;
        let a_in = g.concat(&[x, u, w, y])?;
        let b_in = g.concat(&[x, u, w, hx])?;
        let a = mlp_forward(g, &self.g_l, a_in)?;
        let b = mlp_forward(g, &self.g_l, b_in)?;
        Ok(g.sub(a, b)?)
    }

    /// `V(z1, z2) = σ(g_V(z1, z2) - g_V(z1, z1)) + ε_V |z1 - z2|^2`, forward only.
    pub fn lyapunov_value(&self, g: &mut Graph<'_>, z1: Var, z2: Var) -> Result<Var> {
        let in12 = g.concat(&[z1, z2])?;
        let in11 = g.concat(&[z1, z1])?;
        let o12 = mlp_forward(g, &self.g_v, in12)?;
        let o11 = mlp_forward(g, &self.g_v, in11)?;
        let gap = g.sub(o12, o11)?;
        self.assemble_value(g, gap, z1, z2)
    }

    fn assemble_value(&self, g: &mut Graph<'_>, gap: Var, z1: Var, z2: Var) -> Result<Var> {
        let sig = g.smooth_relu(gap, self.hyper().sigma_d)?;
        let diff = g.sub(z1, z2)?;
        let q = g.row_norm_sq(diff)?;
        let q = g.scale(q, self.hyper().eps_v)?;
        Ok(g.add(sig, q)?)
    }

    /// `V` together with `∂_1 V` and `∂_2 V`, all differentiable in the parameters.
    ///
    /// `∂_1 V` includes the total derivative of `g_V(z1, z1)` through both slots.
    pub fn lyapunov(&self, g: &mut Graph<'_>, z1: Var, z2: Var) -> Result<LyapunovTerms> {
        let nx = self.model.dims.nx;
        let eps = self.hyper().eps_v;
        let in12 = g.concat(&[z1, z2])?;
        let in11 = g.concat(&[z1, z1])?;
        let (o12, d12) = mlp_value_and_input_gradient(g, &self.g_v, in12)?;
        let (o11, d11) = mlp_value_and_input_gradient(g, &self.g_v, in11)?;
        let gap = g.sub(o12, o11)?;
        let value = self.assemble_value(g, gap, z1, z2)?;

        let slope = g.smooth_relu_grad(gap, self.hyper().sigma_d)?;
        let a12 = g.slice(d12, 0, nx)?;
        let b12 = g.slice(d12, nx, 2 * nx)?;
        let a11 = g.slice(d11, 0, nx)?;
        let b11 = g.slice(d11, nx, 2 * nx)?;
        let total11 = g.add(a11, b11)?;
        let diff = g.sub(z1, z2)?;
        let quad = g.scale(diff, 2.0 * eps)?;

        let inner1 = g.sub(a12, total11)?;
        let s1 = g.mul_col(inner1, slope)?;
        let d1 = g.add(s1, quad)?;
        let s2 = g.mul_col(b12, slope)?;
        let d2 = g.sub(s2, quad)?;
        Ok(LyapunovTerms { value, gap, d1, d2 })
    }

    /// Right-hand side Λ of the embedded decrease inequality `∇V L̃ ≤ Λ`.
    pub fn lambda_rhs(&self, g: &mut Graph<'_>, c1: &ChiVars, c2: &ChiVars, lyap: &LyapunovTerms, f1: Var, f2: Var) -> Result<Var> {
        let h = self.hyper().clone();
        let av = g.scale(lyap.value, -h.alpha)?;
        let p1 = g.row_dot(lyap.d1, f1)?;
        let p2 = g.row_dot(lyap.d2, f2)?;
        let drift = g.add(p1, p2)?;
        let mut lam = g.sub(av, drift)?;
        for (a, b, rho) in [(c1.u, c2.u, h.rho_u), (c1.y, c2.y, h.rho_y), (c1.w, c2.w, h.rho_z)] {
            if g.shape(a).1 == 0 {
                continue;
            }
            let d = g.sub(a, b)?;
            let n = g.row_norm_sq(d)?;
            let t = g.scale(n, rho)?;
            lam = g.add(lam, t)?;
        }
        Ok(lam)
    }

    /// Projects `[L̂_1; L̂_2](χ1, χ2)` onto `∇V L̃ ≤ Λ` and splits the result.
    pub fn embedded_pair(&self, g: &mut Graph<'_>, c1: &ChiVars, c2: &ChiVars) -> Result<EmbeddedPair> {
        let nx = self.model.dims.nx;
        let f1 = self.dynamics(g, c1.z, c1.u, c1.w)?;
        let f2 = self.dynamics(g, c2.z, c2.u, c2.w)?;
        let lyapunov = self.lyapunov(g, c1.z, c2.z)?;
        let lambda = self.lambda_rhs(g, c1, c2, &lyapunov, f1, f2)?;
        let inp = g.concat(&[c1.z, c1.u, c1.y, c1.w, c2.z, c2.u, c2.y, c2.w])?;
        let r1 = mlp_forward(g, &self.l_hat_1, inp)?;
        let r2 = mlp_forward(g, &self.l_hat_2, inp)?;
        let raw = g.concat(&[r1, r2])?;
        let grad = g.concat(&[lyapunov.d1, lyapunov.d2])?;
        let grad_norm_sq = g.row_norm_sq(grad)?;
        let projected = project_embedded(g, grad, raw, lambda, self.hyper().eps_proj)?;
        let l1 = g.slice(projected, 0, nx)?;
        let l2 = g.slice(projected, nx, 2 * nx)?;
        Ok(EmbeddedPair { l1, l2, raw, projected, grad, grad_norm_sq, lambda, lyapunov, f1, f2 })
    }
}

/// `L̃* = L̃ - ∇Vᵀ ReLU(∇V L̃ - Λ) / max(ε_proj, ‖∇V‖²)`, row by row.
///
/// `grad` and `raw` are `m x 2n_x`, `lambda` is `m x 1`.
pub fn project_embedded(g: &mut Graph<'_>, grad: Var, raw: Var, lambda: Var, eps_proj: f64) -> Result<Var> {
    if !(eps_proj > 0.0) {
        return Err(Error::Config(format!("eps_proj must be positive, got {eps_proj}")));
    }
    let lhs = g.row_dot(grad, raw)?;
    let excess = g.sub(lhs, lambda)?;
    let violation = g.relu(excess)?;
    let nsq = g.row_norm_sq(grad)?;
    let denom = g.max_const(nsq, eps_proj)?;
    let coef = g.div(violation, denom)?;
    let step = g.mul_col(grad, coef)?;
    Ok(g.sub(raw, step)?)
}

/// Single-sample evaluation of the embedded pair and its ingredients.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedEval {
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    pub raw: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub value: f64,
    pub lambda: f64,
    pub grad_norm_sq: f64,
}

/// Plain-vector conveniences, each running on a throw-away graph.
impl ObserverModel {
    pub fn eval_dynamics(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let (xt, ut, wt) = (Tensor::row_vector(x), Tensor::row_vector(u), Tensor::row_vector(w));
        let mut g = Graph::new();
        let bm = self.bind(&mut g, false);
        let (xv, uv, wv) = (g.constant_ref(&xt), g.constant_ref(&ut), g.constant_ref(&wt));
        let f = bm.dynamics(&mut g, xv, uv, wv)?;
        Ok(g.value(f).data().to_vec())
    }

    pub fn eval_injection(&self, x: &[f64], u: &[f64], w: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let (xt, ut, wt, yt) = (Tensor::row_vector(x), Tensor::row_vector(u), Tensor::row_vector(w), Tensor::row_vector(y));
        let mut g = Graph::new();
        let bm = self.bind(&mut g, false);
        let (xv, uv, wv, yv) = (g.constant_ref(&xt), g.constant_ref(&ut), g.constant_ref(&wt), g.constant_ref(&yt));
        let l = bm.output_injection(&mut g, xv, uv, wv, yv)?;
        Ok(g.value(l).data().to_vec())
    }

    pub fn eval_lyapunov(&self, z1: &[f64], z2: &[f64]) -> Result<f64> {
        let (a, b) = (Tensor::row_vector(z1), Tensor::row_vector(z2));
        let mut g = Graph::new();
        let bm = self.bind(&mut g, false);
        let (av, bv) = (g.constant_ref(&a), g.constant_ref(&b));
        let v = bm.lyapunov_value(&mut g, av, bv)?;
        Ok(g.value(v).data()[0])
    }

    /// `(∂_1 V, ∂_2 V)` at one pair.
    pub fn eval_lyapunov_gradient(&self, z1: &[f64], z2: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (a, b) = (Tensor::row_vector(z1), Tensor::row_vector(z2));
        let mut g = Graph::new();
        let bm = self.bind(&mut g, false);
        let (av, bv) = (g.constant_ref(&a), g.constant_ref(&b));
        let t = bm.lyapunov(&mut g, av, bv)?;
        Ok((g.value(t.d1).data().to_vec(), g.value(t.d2).data().to_vec()))
    }

    pub fn eval_embedded_pair(&self, c1: &ChiBatch, c2: &ChiBatch) -> Result<EmbeddedEval> {
        let mut g = Graph::new();
        let bm = self.bind(&mut g, false);
        let v1 = c1.bind(&mut g);
        let v2 = c2.bind(&mut g);
        let e = bm.embedded_pair(&mut g, &v1, &v2)?;
        let row = |v: Var| g.value(v).row(0).to_vec();
        Ok(EmbeddedEval {
            l1: row(e.l1),
            l2: row(e.l2),
            raw: row(e.raw),
            d1: row(e.lyapunov.d1),
            d2: row(e.lyapunov.d2),
            f1: row(e.f1),
            f2: row(e.f2),
            value: g.value(e.lyapunov.value).get(0, 0),
            lambda: g.value(e.lambda).get(0, 0),
            grad_norm_sq: g.value(e.grad_norm_sq).get(0, 0),
        })
    }
}

/// A (local) observer `ż = F(z, u, w, y)` with a Lyapunov function on
/// (true state, estimate) pairs. [`ObserverModel`] is the learned instance;
/// analytic implementations serve as references.
pub trait Observer {
    fn dims(&self) -> Dims;

    /// Observer vector field at estimate `z` given input, neighbour signal and measurement.
    fn rhs(&self, z: &[f64], u: &[f64], w: &[f64], y: &[f64]) -> Result<Vec<f64>>;

    /// `V(x, z)`, recorded along simulations.
    fn lyapunov(&self, x: &[f64], z: &[f64]) -> Result<f64>;
}

impl Observer for ObserverModel {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn rhs(&self, z: &[f64], u: &[f64], w: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let (zt, ut, wt, yt) = (Tensor::row_vector(z), Tensor::row_vector(u), Tensor::row_vector(w), Tensor::row_vector(y));
        let mut g = Graph::new();
        let bm = self.bind(&mut g, false);
        let (zv, uv, wv, yv) = (g.constant_ref(&zt), g.constant_ref(&ut), g.constant_ref(&wt), g.constant_ref(&yt));
        let f = bm.dynamics(&mut g, zv, uv, wv)?;
        let l = bm.output_injection(&mut g, zv, uv, wv, yv)?;
        let s = g.add(f, l)?;
        Ok(g.value(s).data().to_vec())
    }

    fn lyapunov(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        self.eval_lyapunov(x, z)
    }
}
