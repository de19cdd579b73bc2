//! Benchmark plants, fixed-step integration and plant/observer co-simulation.

mod sim;

pub(crate) use sim::check_inside as sim_check_inside;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::{BoxDomain, Dims, OutputMap};

pub use sim::{
    rk4_step, rmse, rmse_block, sample_viable_initial_state, simulate_observer, NoiseSpec, NoiseStream, SimSettings,
    TrajectoryRecord, DEFAULT_STEP,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 }
    }
}

/// Constant-speed bicycle on a constant-curvature path, with the open-loop
/// steering `u(t) = atan(q_bar + eps sin(omega t))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BicycleParams {
    pub kappa: f64,
    pub speed: f64,
    pub wheelbase: f64,
    pub q_bar: f64,
    pub eps: f64,
    pub omega: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self { kappa: 1.0, speed: 6.0, wheelbase: 1.0, q_bar: 1.0, eps: 0.2, omega: 0.5 }
    }
}

/// Two FitzHugh–Nagumo neurons with sigmoidal synaptic coupling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FhnParams {
    pub a: f64,
    pub b: f64,
    pub tau: f64,
    pub r_a: f64,
    pub r_b: f64,
    pub i_a: f64,
    pub i_b: f64,
    pub kappa_a: f64,
    pub kappa_b: f64,
    pub c: f64,
    pub v_s: f64,
    pub k: f64,
    pub theta_s: f64,
}

impl Default for FhnParams {
    fn default() -> Self {
        Self {
            a: 0.7,
            b: 0.8,
            tau: 12.5,
            r_a: 1.0,
            r_b: 1.0,
            i_a: 0.8,
            i_b: 1.6,
            kappa_a: 0.1,
            kappa_b: 0.2,
            c: 1.0,
            v_s: 1.5,
            k: 6.0,
            theta_s: -0.25,
        }
    }
}

impl FhnParams {
    /// Synaptic coupling `F(x_i, x_j)`.
    pub fn coupling(&self, xi: f64, xj: f64) -> f64 {
        -(xi - self.v_s) / (1.0 + (-self.k * (xj - self.theta_s)).exp()) - self.v_s / (1.0 + (self.k * self.theta_s).exp())
    }

    fn side_constants(&self, side: Side) -> (f64, f64, f64) {
        match side {
            Side::A => (self.kappa_a, self.r_a, self.i_a),
            Side::B => (self.kappa_b, self.r_b, self.i_b),
        }
    }

    /// Field of one neuron given its own state, input and the neighbour's membrane potential.
    pub fn local_rhs(&self, side: Side, x: &[f64], u: f64, neighbour_v: f64) -> [f64; 2] {
        let (kappa, r, i) = self.side_constants(side);
        let v = x[0];
        [
            v - v * v * v / 3.0 - x[1] + kappa * u + r * i + self.c * self.coupling(v, neighbour_v),
            (v + self.a - self.b * x[1]) / self.tau,
        ]
    }

    /// Both neuron fields.
    pub fn rhs(&self, xa: &[f64], xb: &[f64], ua: f64, ub: f64) -> ([f64; 2], [f64; 2]) {
        (self.local_rhs(Side::A, xa, ua, xb[0]), self.local_rhs(Side::B, xb, ub, xa[0]))
    }

    fn validate(&self) -> Result<()> {
        let all = [self.a, self.b, self.tau, self.r_a, self.r_b, self.i_a, self.i_b, self.kappa_a, self.kappa_b, self.c, self.v_s, self.k, self.theta_s];
        if all.iter().any(|v| !v.is_finite()) || self.tau <= 0.0 {
            return Err(Error::Config("FitzHugh-Nagumo parameters must be finite with tau > 0".into()));
        }
        Ok(())
    }
}

pub fn lorenz_rhs(p: &LorenzParams, x: &[f64]) -> [f64; 3] {
    [p.sigma * (x[1] - x[0]), p.rho * x[0] - x[1] - x[0] * x[2], -p.beta * x[2] + x[0] * x[1]]
}

/// Path-following error dynamics in `(d_e, theta_e)`.
pub fn bicycle_rhs(p: &BicycleParams, x: &[f64], u: f64) -> Result<[f64; 2]> {
    let denom = 1.0 - p.kappa * x[0];
    if denom.abs() < 1e-6 {
        return Err(Error::Domain(format!("curvature singularity at d_e = {}", x[0])));
    }
    if u.abs() >= PI / 2.0 - 1e-6 {
        return Err(Error::Domain(format!("steering angle {u} reaches the tan singularity")));
    }
    let (s, c) = x[1].sin_cos();
    Ok([p.speed * s, p.speed / p.wheelbase * u.tan() - p.speed * p.kappa * c / denom])
}

pub fn nominal_steering(p: &BicycleParams, t: f64) -> f64 {
    (p.q_bar + p.eps * (p.omega * t).sin()).atan()
}

/// Subsystem label in the interconnected pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Side::A => "a",
            Side::B => "b",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantModel {
    Lorenz(LorenzParams),
    Bicycle(BicycleParams),
    FhnPair(FhnParams),
}

/// Domain boxes of state, input, output and neighbour signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub x: BoxDomain,
    pub u: BoxDomain,
    pub y: BoxDomain,
    #[serde(default = "BoxDomain::empty")]
    pub w: BoxDomain,
}

impl Domain {
    fn validate(&self, dims: Dims) -> Result<()> {
        for (b, n, what) in [(&self.x, dims.nx, "state"), (&self.u, dims.nu, "input"), (&self.y, dims.ny, "output"), (&self.w, dims.nw, "neighbour")] {
            b.validate()?;
            if b.dim() != n {
                return Err(Error::Dimension(format!("{what} box has {} axes, expected {n}", b.dim())));
            }
        }
        Ok(())
    }
}

/// A system whose observer is learned: dimensions, analytic field, output map and domains.
///
/// `w` is the neighbour signal of a local subsystem and is empty otherwise.
pub trait Dynamics: Send + Sync {
    fn name(&self) -> String;
    fn dims(&self) -> Dims;
    fn output_map(&self) -> OutputMap;
    fn domain(&self) -> &Domain;
    fn field(&self, x: &[f64], u: &[f64], w: &[f64], out: &mut [f64]) -> Result<()>;
    /// Nominal (noise-free) input at time `t`.
    fn nominal_input(&self, t: f64) -> Vec<f64>;
}

/// A benchmark plant with its domains.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantSpec {
    pub model: PlantModel,
    pub domain: Domain,
}

impl PlantSpec {
    /// Lorenz attractor measured through `x_1`.
    pub fn lorenz() -> Self {
        Self {
            model: PlantModel::Lorenz(LorenzParams::default()),
            domain: Domain {
                x: BoxDomain { lo: vec![-25.0, -25.0, 0.0], hi: vec![25.0, 25.0, 50.0] },
                u: BoxDomain::empty(),
                y: BoxDomain::symmetric(1, 25.0),
                w: BoxDomain::empty(),
            },
        }
    }

    /// Bicycle path following measured through `d_e`.
    pub fn bicycle() -> Self {
        Self {
            model: PlantModel::Bicycle(BicycleParams::default()),
            domain: Domain {
                x: BoxDomain::symmetric(2, 0.8),
                u: BoxDomain::symmetric(1, 0.4 * PI),
                y: BoxDomain::symmetric(1, 0.8),
                w: BoxDomain::empty(),
            },
        }
    }

    /// The coupled neuron pair as one system, state `[x_a; x_b]`, broadcast input, outputs `(x_a1, x_b1)`.
    pub fn fhn_pair() -> Self {
        Self {
            model: PlantModel::FhnPair(FhnParams::default()),
            domain: Domain {
                x: BoxDomain::symmetric(4, 2.5),
                u: BoxDomain::symmetric(1, 2.5),
                y: BoxDomain::symmetric(2, 2.5),
                w: BoxDomain::empty(),
            },
        }
    }

    pub fn default_for(kind: &str) -> Result<Self> {
        match kind {
            "lorenz" => Ok(Self::lorenz()),
            "bicycle" => Ok(Self::bicycle()),
            "fhn_pair" => Ok(Self::fhn_pair()),
            other => Err(Error::Config(format!("unknown plant kind {other:?}"))),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.model {
            PlantModel::Lorenz(_) => "lorenz",
            PlantModel::Bicycle(_) => "bicycle",
            PlantModel::FhnPair(_) => "fhn_pair",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.model {
            PlantModel::Lorenz(p) => {
                if ![p.sigma, p.rho, p.beta].iter().all(|v| v.is_finite()) {
                    return Err(Error::Config("Lorenz parameters must be finite".into()));
                }
            }
            PlantModel::Bicycle(p) => {
                if !(p.speed.is_finite() && p.kappa.is_finite() && p.wheelbase > 0.0 && p.omega.is_finite()) {
                    return Err(Error::Config("bicycle needs finite speed and curvature and a positive wheelbase".into()));
                }
                if self.domain.u.lo.iter().chain(&self.domain.u.hi).any(|u| u.abs() >= PI / 2.0) {
                    return Err(Error::Config("steering box must stay inside (-pi/2, pi/2)".into()));
                }
                if self.domain.x.lo[0] * p.kappa >= 1.0 || self.domain.x.hi[0] * p.kappa >= 1.0 {
                    return Err(Error::Config("state box reaches the curvature singularity".into()));
                }
            }
            PlantModel::FhnPair(p) => p.validate()?,
        }
        self.domain.validate(self.dims())
    }

    /// The local subsystem `side` of an interconnected pair.
    pub fn local(&self, side: Side) -> Result<FhnSide> {
        let PlantModel::FhnPair(p) = &self.model else {
            return Err(Error::Config(format!("{} is not an interconnected plant", self.kind())));
        };
        let (own, other) = match side {
            Side::A => (0..2, 2),
            Side::B => (2..4, 0),
        };
        let x = &self.domain.x;
        let own_box = BoxDomain { lo: x.lo[own.clone()].to_vec(), hi: x.hi[own].to_vec() };
        let w_box = BoxDomain { lo: vec![x.lo[other]], hi: vec![x.hi[other]] };
        let y_idx = match side {
            Side::A => 0,
            Side::B => 1,
        };
        let y_box = BoxDomain { lo: vec![self.domain.y.lo[y_idx]], hi: vec![self.domain.y.hi[y_idx]] };
        Ok(FhnSide {
            params: p.clone(),
            side,
            domain: Domain { x: own_box, u: self.domain.u.clone(), y: y_box, w: w_box },
        })
    }
}

impl Dynamics for PlantSpec {
    fn name(&self) -> String {
        self.kind().to_string()
    }

    fn dims(&self) -> Dims {
        match self.model {
            PlantModel::Lorenz(_) => Dims::new(3, 0, 1, 0),
            PlantModel::Bicycle(_) => Dims::new(2, 1, 1, 0),
            PlantModel::FhnPair(_) => Dims::new(4, 1, 2, 0),
        }
    }

    fn output_map(&self) -> OutputMap {
        match self.model {
            PlantModel::Lorenz(_) | PlantModel::Bicycle(_) => OutputMap::Select(vec![0]),
            PlantModel::FhnPair(_) => OutputMap::Select(vec![0, 2]),
        }
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn field(&self, x: &[f64], u: &[f64], _w: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.model {
            PlantModel::Lorenz(p) => out.copy_from_slice(&lorenz_rhs(p, x)),
            PlantModel::Bicycle(p) => out.copy_from_slice(&bicycle_rhs(p, x, u[0])?),
            PlantModel::FhnPair(p) => {
                let (fa, fb) = p.rhs(&x[0..2], &x[2..4], u[0], u[0]);
                out[..2].copy_from_slice(&fa);
                out[2..].copy_from_slice(&fb);
            }
        }
        Ok(())
    }

    fn nominal_input(&self, t: f64) -> Vec<f64> {
        match &self.model {
            PlantModel::Lorenz(_) => vec![],
            PlantModel::Bicycle(p) => vec![nominal_steering(p, t)],
            PlantModel::FhnPair(_) => vec![t.cos()],
        }
    }
}

/// One neuron of the pair seen as a local system whose neighbour signal is
/// the other neuron's membrane potential.
#[derive(Clone, Debug, PartialEq)]
pub struct FhnSide {
    pub params: FhnParams,
    pub side: Side,
    pub domain: Domain,
}

impl Dynamics for FhnSide {
    fn name(&self) -> String {
        format!("fhn_{}", self.side.tag())
    }

    fn dims(&self) -> Dims {
        Dims::new(2, 1, 1, 1)
    }

    fn output_map(&self) -> OutputMap {
        OutputMap::Select(vec![0])
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn field(&self, x: &[f64], u: &[f64], w: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.params.local_rhs(self.side, x, u[0], w[0]));
        Ok(())
    }

    fn nominal_input(&self, t: f64) -> Vec<f64> {
        vec![t.cos()]
    }
}
