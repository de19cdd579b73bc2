//! Two local observers wired through their estimated neighbour signals,
//! the small-gain admission test and the coupled simulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Observer, ObserverModel};
use crate::plants::{rk4_step, Dynamics, NoiseSpec, PlantModel, PlantSpec, Side, SimSettings, TrajectoryRecord};
use crate::training::{train, ChiDataset, DynDataset, TrainOptions, TrainReport};

/// Interconnection gains and the strict small-gain test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallGainReport {
    pub gain_a: f64,
    pub gain_b: f64,
    pub product_root: f64,
    pub pass: bool,
    pub margin: f64,
}

/// `√((ρ_zb/(ε_a α_a)) (ρ_za/(ε_b α_b))) < 1`.
///
/// `rho_zb` weighs the neighbour signal in side a's decrease condition and
/// `rho_za` the one in side b's.
pub fn small_gain_check(rho_zb: f64, eps_a: f64, alpha_a: f64, rho_za: f64, eps_b: f64, alpha_b: f64) -> Result<SmallGainReport> {
    for (name, v) in [("eps_a", eps_a), ("alpha_a", alpha_a), ("eps_b", eps_b), ("alpha_b", alpha_b)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
    }
    for (name, v) in [("rho_za", rho_za), ("rho_zb", rho_zb)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
        }
    }
    let gain_a = (rho_zb / (eps_a * alpha_a)).sqrt();
    let gain_b = (rho_za / (eps_b * alpha_b)).sqrt();
    let product_root = ((rho_zb * rho_za) / ((eps_a * alpha_a) * (eps_b * alpha_b))).sqrt();
    Ok(SmallGainReport { gain_a, gain_b, product_root, pass: product_root < 1.0, margin: 1.0 - product_root })
}

/// A trained local observer for one side of the pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalObserverSpec {
    pub side: Side,
    pub model: ObserverModel,
}

impl LocalObserverSpec {
    pub fn rho_z(&self) -> f64 {
        self.model.hyper.rho_z
    }
}

/// Small-gain test for two local observers.
pub fn small_gain_for(a: &ObserverModel, b: &ObserverModel) -> Result<SmallGainReport> {
    small_gain_check(a.hyper.rho_z, a.hyper.eps_v, a.hyper.alpha, b.hyper.rho_z, b.hyper.eps_v, b.hyper.alpha)
}

/// Trains one side from its own data only; the neighbour enters solely
/// through the recorded `w` samples and the box they were drawn from.
pub fn train_local(side: Side, local: &dyn Dynamics, data: &DynDataset, chi: &ChiDataset, opts: &TrainOptions) -> Result<(LocalObserverSpec, TrainReport)> {
    let (model, report) = train(local, data, chi, opts)?;
    Ok((LocalObserverSpec { side, model }, report))
}

/// Coupled run of the neuron pair and both local observers.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributedRun {
    pub record: TrajectoryRecord,
    pub small_gain: Option<SmallGainReport>,
}

impl DistributedRun {
    /// Per-subsystem RMSE over `[t0, t1]`.
    pub fn rmse(&self, t0: f64, t1: f64) -> Result<(f64, f64)> {
        Ok((crate::plants::rmse_block(&self.record, t0, t1, 0..2)?, crate::plants::rmse_block(&self.record, t0, t1, 2..4)?))
    }
}

/// Integrates the pair together with both local observers, feeding each
/// observer the neighbour's estimated membrane potential, the shared noisy
/// broadcast input and its own noisy measurement.
///
/// A failed small-gain report does not stop the run; it is carried along
/// and flagged in the record's provenance.
#[allow(clippy::too_many_arguments)]
pub fn simulate_distributed<A: Observer + ?Sized, B: Observer + ?Sized>(
    plant: &PlantSpec,
    obs_a: &A,
    obs_b: &B,
    noise: &NoiseSpec,
    x0: &[f64],
    z0: &[f64],
    sim: &SimSettings,
    small_gain: Option<SmallGainReport>,
) -> Result<DistributedRun> {
    if !matches!(plant.model, PlantModel::FhnPair(_)) {
        return Err(Error::Config("distributed simulation needs an interconnected plant".into()));
    }
    let la = plant.local(Side::A)?;
    let lb = plant.local(Side::B)?;
    let (da, db) = (obs_a.dims(), obs_b.dims());
    for (d, name) in [(da, "a"), (db, "b")] {
        if d.nx != 2 || d.nu != 1 || d.ny != 1 || d.nw > 1 {
            return Err(Error::Dimension(format!("observer {name} has dims {d:?}, expected a two-state local observer")));
        }
    }
    if x0.len() != 4 || z0.len() != 4 {
        return Err(Error::Dimension("pair simulation needs 4-dimensional x0 and z0".into()));
    }
    crate::plants::sim_check_inside(x0, &plant.domain.x, "initial state", 0.0)?;
    crate::plants::sim_check_inside(&z0[..2], &la.domain.x, "initial estimate a", 0.0)?;
    crate::plants::sim_check_inside(&z0[2..], &lb.domain.x, "initial estimate b", 0.0)?;

    let steps = sim.steps()?;
    let h = sim.step;
    let hmap = plant.output_map();
    let mut stream = noise.stream(1, 2)?;
    let x_limit = plant.domain.x.inflated(sim.abort_inflation);
    let names = ["za1", "za2", "zb1", "zb2"].map(String::from).to_vec();
    let mut rec = TrajectoryRecord::with_names(names, vec!["V_a".into(), "V_b".into()], steps + 1);
    if let Some(sg) = &small_gain {
        rec.meta.push(("small_gain".into(), if sg.pass { "pass".into() } else { "fail".into() }));
        rec.meta.push(("small_gain_product_root".into(), format!("{:.16e}", sg.product_root)));
    }

    let mut s: Vec<f64> = x0.iter().chain(z0).copied().collect();
    for k in 0..=steps {
        let t = k as f64 * h;
        let (du, dy) = stream.draw();
        let (x, z) = s.split_at(4);
        let u = plant.nominal_input(t);
        let y = hmap.apply(x);
        rec.t.push(t);
        rec.x.push(x.to_vec());
        rec.z.push(z.to_vec());
        rec.u_noisy.push(vec![u[0] + du[0]]);
        rec.y_noisy.push(vec![y[0] + dy[0], y[1] + dy[1]]);
        rec.u.push(u);
        rec.y.push(y);
        rec.v.push(vec![obs_a.lyapunov(&x[..2], &z[..2])?, obs_b.lyapunov(&x[2..], &z[2..])?]);
        if k == steps {
            break;
        }
        let mut field = |tt: f64, st: &[f64], out: &mut [f64]| -> Result<()> {
            let (x, z) = st.split_at(4);
            let u = plant.nominal_input(tt);
            plant.field(x, &u, &[], &mut out[..4])?;
            let un = [u[0] + du[0]];
            let y = hmap.apply(x);
            let (za, zb) = z.split_at(2);
            out[4..6].copy_from_slice(&obs_a.rhs(za, &un, &zb[..da.nw], &[y[0] + dy[0]])?);
            out[6..8].copy_from_slice(&obs_b.rhs(zb, &un, &za[..db.nw], &[y[1] + dy[1]])?);
            Ok(())
        };
        s = rk4_step(&mut field, t, &s, h)?;
        let tn = (k + 1) as f64 * h;
        crate::plants::sim_check_inside(&s[..4], &x_limit, "plant state", tn)?;
        crate::plants::sim_check_inside(&s[4..6], &la.domain.x.inflated(sim.abort_inflation), "estimate a", tn)?;
        crate::plants::sim_check_inside(&s[6..], &lb.domain.x.inflated(sim.abort_inflation), "estimate b", tn)?;
    }
    Ok(DistributedRun { record: rec, small_gain })
}
