//! Sampling estimates of the certificate constants, the closed-form error
//! bounds, the decrease audit and the integrated (Grönwall) check.
//!
//! Every sup/max here is an empirical estimate over sampled points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::nets::{ChiBatch, Hyperparams, ObserverModel};
use crate::plants::{rk4_step, Domain, Dynamics, TrajectoryRecord};
use crate::system::{norm, sq_dist};

/// Pairs evaluated per graph; also the unit of the per-chunk random streams.
pub const CHUNK: usize = 2048;

/// Absolute slack of the decrease audit.
pub const AUDIT_SLACK: f64 = 1e-9;

/// Split of audited pairs into the guaranteed region (`‖∇V‖² ≥ ε_proj`)
/// and the clamped region, with the worst excess `∇V·L̃* - Λ` in each.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationCensus {
    pub guaranteed: usize,
    pub clamped: usize,
    pub guaranteed_violations: usize,
    pub max_guaranteed_excess: f64,
    pub max_clamped_excess: f64,
    pub slack: f64,
}

impl ViolationCensus {
    fn merge(mut self, o: &ViolationCensus) -> Self {
        self.guaranteed += o.guaranteed;
        self.clamped += o.clamped;
        self.guaranteed_violations += o.guaranteed_violations;
        self.max_guaranteed_excess = self.max_guaranteed_excess.max(o.max_guaranteed_excess);
        self.max_clamped_excess = self.max_clamped_excess.max(o.max_clamped_excess);
        self
    }

    pub fn total(&self) -> usize {
        self.guaranteed + self.clamped
    }

    pub fn passes(&self) -> bool {
        self.guaranteed_violations == 0
    }
}

/// Empirical certificate constants of a trained observer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub kind: String,
    pub delta_l1: f64,
    pub delta_l2: f64,
    pub delta_l: f64,
    pub delta_f: Option<f64>,
    pub m1: f64,
    pub m2: f64,
    pub delta: f64,
    pub r_hat: f64,
    pub gain_u: f64,
    pub gain_y: f64,
    pub gain_z: f64,
    pub residual: f64,
    pub alpha: f64,
    pub eps_v: f64,
    pub samples: usize,
    pub vertex_pairs: usize,
    pub seed: u64,
    pub census: ViolationCensus,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Sups {
    delta_l1: f64,
    delta_l2: f64,
    delta_f: f64,
    m1: f64,
    m2: f64,
    r_hat: f64,
    census: ViolationCensus,
}

impl Sups {
    fn merge(self, o: &Sups) -> Sups {
        Sups {
            delta_l1: self.delta_l1.max(o.delta_l1),
            delta_l2: self.delta_l2.max(o.delta_l2),
            delta_f: self.delta_f.max(o.delta_f),
            m1: self.m1.max(o.m1),
            m2: self.m2.max(o.m2),
            r_hat: self.r_hat.max(o.r_hat),
            census: self.census.merge(&o.census),
        }
    }
}

fn rows(t: &Tensor) -> impl Iterator<Item = &[f64]> {
    (0..t.rows()).map(move |i| t.row(i))
}

/// Evaluates the embedded pair on explicit χ-pairs and accumulates every statistic.
fn evaluate_pairs(model: &ObserverModel, c1: &ChiBatch, c2: &ChiBatch, plant: Option<&dyn Dynamics>) -> Result<Sups> {
    let nx = model.dims.nx;
    let eps = model.hyper.eps_proj;
    let mut g = Graph::new();
    let bm = model.bind(&mut g, false);
    let v1 = c1.bind(&mut g);
    let v2 = c2.bind(&mut g);
    let e = bm.embedded_pair(&mut g, &v1, &v2)?;
    let l1 = bm.output_injection(&mut g, v1.z, v1.u, v1.w, v1.y)?;
    let l2 = bm.output_injection(&mut g, v2.z, v2.u, v2.w, v2.y)?;
    let lhs = g.row_dot(e.grad, e.projected)?;

    let mut s = Sups { census: ViolationCensus { slack: AUDIT_SLACK, ..Default::default() }, ..Default::default() };
    let (d1, d2) = (g.value(e.lyapunov.d1), g.value(e.lyapunov.d2));
    let (p1, p2) = (g.value(e.l1), g.value(e.l2));
    let (t1, t2) = (g.value(l1), g.value(l2));
    let (nsq, lam, lhs) = (g.value(e.grad_norm_sq), g.value(e.lambda), g.value(lhs));
    let f1 = g.value(e.f1);
    for i in 0..c1.rows() {
        s.m1 = s.m1.max(norm(d1.row(i)));
        s.m2 = s.m2.max(norm(d2.row(i)));
        s.delta_l1 = s.delta_l1.max(sq_dist(p1.row(i), t1.row(i)).sqrt());
        s.delta_l2 = s.delta_l2.max(sq_dist(p2.row(i), t2.row(i)).sqrt());
        let excess = lhs.get(i, 0) - lam.get(i, 0);
        if nsq.get(i, 0) >= eps {
            s.census.guaranteed += 1;
            s.census.max_guaranteed_excess = s.census.max_guaranteed_excess.max(excess);
            if excess > AUDIT_SLACK {
                s.census.guaranteed_violations += 1;
            }
        } else {
            s.census.clamped += 1;
            s.census.max_clamped_excess = s.census.max_clamped_excess.max(excess);
            s.r_hat = s.r_hat.max(sq_dist(c1.z.row(i), c2.z.row(i)).sqrt());
        }
    }
    if let Some(p) = plant {
        let mut f = vec![0.0; nx];
        for (i, ((x, u), w)) in rows(&c1.z).zip(rows(&c1.u)).zip(rows(&c1.w)).enumerate() {
            p.field(x, u, w, &mut f)?;
            s.delta_f = s.delta_f.max(sq_dist(f1.row(i), &f).sqrt());
        }
    }
    Ok(s)
}

fn draw_pairs(domain: &Domain, n: usize, rng: &mut ChaCha8Rng) -> (ChiBatch, ChiBatch) {
    let mut a: [Vec<f64>; 4] = Default::default();
    let mut b: [Vec<f64>; 4] = Default::default();
    let boxes = [&domain.x, &domain.u, &domain.y, &domain.w];
    for _ in 0..n {
        for (k, bx) in boxes.iter().enumerate() {
            bx.sample_into(rng, &mut a[k]);
        }
        for (k, bx) in boxes.iter().enumerate() {
            bx.sample_into(rng, &mut b[k]);
        }
    }
    let make = |v: [Vec<f64>; 4]| {
        let [z, u, y, w] = v;
        ChiBatch {
            z: Tensor::new(n, boxes[0].dim(), z).unwrap(),
            u: Tensor::new(n, boxes[1].dim(), u).unwrap(),
            y: Tensor::new(n, boxes[2].dim(), y).unwrap(),
            w: Tensor::new(n, boxes[3].dim(), w).unwrap(),
        }
    };
    (make(a), make(b))
}

fn chunk_rng(seed: u64, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    rng
}

/// Pairs of state-box vertices with uniformly drawn remaining signals.
fn vertex_pairs(domain: &Domain, seed: u64) -> (ChiBatch, ChiBatch) {
    let nv = domain.x.num_vertices().min(64);
    let n = nv * nv;
    let mut rng = chunk_rng(seed, u64::MAX);
    let (mut c1, mut c2) = draw_pairs(domain, n, &mut rng);
    let nx = domain.x.dim();
    for i in 0..nv {
        for j in 0..nv {
            let r = i * nv + j;
            c1.z.data_mut()[r * nx..(r + 1) * nx].copy_from_slice(&domain.x.vertex(i));
            c2.z.data_mut()[r * nx..(r + 1) * nx].copy_from_slice(&domain.x.vertex(j));
        }
    }
    (c1, c2)
}

fn check_domain(model: &ObserverModel, domain: &Domain) -> Result<()> {
    let d = model.dims;
    let got = (domain.x.dim(), domain.u.dim(), domain.y.dim(), domain.w.dim());
    if got != (d.nx, d.nu, d.ny, d.nw) {
        return Err(Error::Dimension(format!("domain widths {got:?} do not match model dims {d:?}")));
    }
    Ok(())
}

fn sampled_sups(model: &ObserverModel, domain: &Domain, plant: Option<&dyn Dynamics>, n: usize, seed: u64) -> Result<Sups> {
    let chunks = n.div_ceil(CHUNK);
    let parts: Vec<Result<Sups>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let m = CHUNK.min(n - c * CHUNK);
            let mut rng = chunk_rng(seed, c as u64);
            let (c1, c2) = draw_pairs(domain, m, &mut rng);
            evaluate_pairs(model, &c1, &c2, plant)
        })
        .collect();
    let init = Sups { census: ViolationCensus { slack: AUDIT_SLACK, ..Default::default() }, ..Default::default() };
    parts.into_iter().try_fold(init, |acc, p| Ok(acc.merge(&p?)))
}

/// Monte-Carlo estimates of Δ_L1, Δ_L2, Δ_f, M_1, M_2 and r̂ over `n_samples`
/// uniformly drawn χ-pairs plus all pairs of state-box vertices.
///
/// Sample `k` always comes from the same chunk stream, so a larger `n_samples`
/// only adds points and no estimate can decrease.
pub fn estimate_constants(model: &ObserverModel, domain: &Domain, plant: Option<&dyn Dynamics>, n_samples: usize, seed: u64) -> Result<CertificateReport> {
    if n_samples == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    check_domain(model, domain)?;
    if let Some(p) = plant {
        if p.dims() != model.dims {
            return Err(Error::Dimension("plant and model dims differ".into()));
        }
    }
    let (v1, v2) = vertex_pairs(domain, seed);
    let s = sampled_sups(model, domain, plant, n_samples, seed)?.merge(&evaluate_pairs(model, &v1, &v2, plant)?);
    let h = &model.hyper;
    let delta_f = plant.map(|_| s.delta_f);
    let delta = s.m1 * (delta_f.unwrap_or(0.0) + s.delta_l1) + s.m2 * s.delta_l2;
    let gain = |rho: f64| (rho / (h.alpha * h.eps_v)).sqrt();
    Ok(CertificateReport {
        kind: "empirical".into(),
        delta_l1: s.delta_l1,
        delta_l2: s.delta_l2,
        delta_l: s.delta_l1.max(s.delta_l2),
        delta_f,
        m1: s.m1,
        m2: s.m2,
        delta,
        r_hat: s.r_hat,
        gain_u: gain(h.rho_u),
        gain_y: gain(h.rho_y),
        gain_z: gain(h.rho_z),
        residual: gain(delta),
        alpha: h.alpha,
        eps_v: h.eps_v,
        samples: n_samples,
        vertex_pairs: v1.rows(),
        seed,
        census: s.census,
    })
}

/// Audits `∇V·L̃* ≤ Λ` on `n_pairs` sampled pairs.
pub fn audit_decrease(model: &ObserverModel, domain: &Domain, n_pairs: usize, seed: u64) -> Result<ViolationCensus> {
    if n_pairs == 0 {
        return Err(Error::Config("need at least one pair".into()));
    }
    check_domain(model, domain)?;
    Ok(sampled_sups(model, domain, None, n_pairs, seed)?.census)
}

/// Audits explicitly given pairs.
pub fn audit_pairs(model: &ObserverModel, c1: &ChiBatch, c2: &ChiBatch) -> Result<ViolationCensus> {
    Ok(evaluate_pairs(model, c1, c2, None)?.census)
}

fn check_rates(eps: f64, alpha: f64) -> Result<()> {
    if !(eps > 0.0 && alpha > 0.0) {
        return Err(Error::Config(format!("bounds need positive eps and alpha, got {eps} and {alpha}")));
    }
    Ok(())
}

/// Disturbance sizes entering the error bounds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub rho_u: f64,
    pub rho_y: f64,
    pub du_inf: f64,
    pub dy_inf: f64,
}

/// `√(V0/ε) e^{-αt/2} + √(ρ_u/(εα)) Δu + √(ρ_y/(εα)) Δy`.
pub fn prop1_bound(v0: f64, eps: f64, alpha: f64, d: &Disturbance, t: f64) -> Result<f64> {
    check_rates(eps, alpha)?;
    Ok((v0 / eps).sqrt() * (-alpha * t / 2.0).exp() + (d.rho_u / (eps * alpha)).sqrt() * d.du_inf + (d.rho_y / (eps * alpha)).sqrt() * d.dy_inf)
}

/// Learned-model bound: [`prop1_bound`] plus `√(Δ/(αε))`, floored at `r̂`.
pub fn thm4_bound(report: &CertificateReport, v0: f64, d: &Disturbance, t: f64) -> Result<f64> {
    let base = prop1_bound(v0, report.eps_v, report.alpha, d, t)?;
    Ok(report.r_hat.max(base + (report.delta / (report.alpha * report.eps_v)).sqrt()))
}

/// `V(0) e^{-αt} + (ρ_u/α) Δu² + (ρ_y/α) Δy²`.
pub fn gronwall_bound(v0: f64, alpha: f64, d: &Disturbance, t: f64) -> f64 {
    v0 * (-alpha * t).exp() + d.rho_u / alpha * d.du_inf * d.du_inf + d.rho_y / alpha * d.dy_inf * d.dy_inf
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GronwallStatus {
    Pass,
    Fail { index: usize },
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GronwallReport {
    pub status: GronwallStatus,
    /// `bound(t_k) - V(t_k)` at every grid point.
    pub margins: Vec<f64>,
}

/// Pointwise check of the integrated decrease bound on a `V` series.
///
/// `in_region` says whether the pairs stayed where the projection guarantee holds.
pub fn gronwall_check(t: &[f64], v: &[f64], alpha: f64, d: &Disturbance, in_region: bool, tol: f64) -> Result<GronwallReport> {
    if t.len() != v.len() || t.is_empty() {
        return Err(Error::Dimension("time and V series must be nonempty and of equal length".into()));
    }
    check_rates(1.0, alpha)?;
    let t0 = t[0];
    let margins: Vec<f64> = t.iter().zip(v).map(|(ti, vi)| gronwall_bound(v[0], alpha, d, ti - t0) - vi).collect();
    let status = if !in_region {
        GronwallStatus::Inconclusive
    } else {
        match margins.iter().position(|m| *m < -tol) {
            Some(index) => GronwallStatus::Fail { index },
            None => GronwallStatus::Pass,
        }
    };
    Ok(GronwallReport { status, margins })
}

/// [`gronwall_check`] on the first `V` column of a recorded trajectory.
pub fn gronwall_check_record(rec: &TrajectoryRecord, hyper: &Hyperparams, du_inf: f64, dy_inf: f64, in_region: bool, tol: f64) -> Result<GronwallReport> {
    let v: Vec<f64> = rec.v.iter().map(|r| r.first().copied().unwrap_or(f64::NAN)).collect();
    let d = Disturbance { rho_u: hyper.rho_u, rho_y: hyper.rho_y, du_inf, dy_inf };
    gronwall_check(&rec.t, &v, hyper.alpha, &d, in_region, tol)
}

/// Run of the coupled embedded system
/// `ż_i = f*(z_i, u_i, w_i) + L_i*(χ1, χ2)` under constant signals.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedRun {
    pub t: Vec<f64>,
    pub z1: Vec<Vec<f64>>,
    pub z2: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    /// Smallest `‖∇V‖²` seen at any RK4 stage.
    pub min_grad_norm_sq: f64,
    pub in_region: bool,
}

/// Integrates the embedded pair from `(z1, z2)` with constant `(u_i, y_i, w_i)`.
pub fn simulate_embedded(model: &ObserverModel, c1: &ChiBatch, c2: &ChiBatch, t_final: f64, h: f64) -> Result<EmbeddedRun> {
    let nx = model.dims.nx;
    if c1.rows() != 1 || c2.rows() != 1 {
        return Err(Error::Dimension("embedded simulation takes single χ records".into()));
    }
    let steps = (t_final / h).round() as usize;
    let mut s: Vec<f64> = c1.z.data().iter().chain(c2.z.data()).copied().collect();
    let mut min_nsq = f64::INFINITY;
    let mut run = EmbeddedRun { t: vec![], z1: vec![], z2: vec![], v: vec![], min_grad_norm_sq: 0.0, in_region: true };
    for k in 0..=steps {
        let (z1, z2) = s.split_at(nx);
        run.t.push(k as f64 * h);
        run.z1.push(z1.to_vec());
        run.z2.push(z2.to_vec());
        run.v.push(model.eval_lyapunov(z1, z2)?);
        if k == steps {
            break;
        }
        let mut field = |_t: f64, st: &[f64], out: &mut [f64]| -> Result<()> {
            let a = ChiBatch { z: Tensor::row_vector(&st[..nx]), ..c1.clone() };
            let b = ChiBatch { z: Tensor::row_vector(&st[nx..]), ..c2.clone() };
            let e = model.eval_embedded_pair(&a, &b)?;
            min_nsq = min_nsq.min(e.grad_norm_sq);
            for i in 0..nx {
                out[i] = e.f1[i] + e.l1[i];
                out[nx + i] = e.f2[i] + e.l2[i];
            }
            Ok(())
        };
        s = rk4_step(&mut field, k as f64 * h, &s, h)?;
    }
    run.min_grad_norm_sq = min_nsq;
    run.in_region = min_nsq >= model.hyper.eps_proj;
    Ok(run)
}
