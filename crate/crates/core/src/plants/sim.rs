use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dynamics;
use crate::error::{Error, Result};
use crate::nets::Observer;
use crate::system::sq_dist;

pub const DEFAULT_STEP: f64 = 0.005;

/// One classical Runge–Kutta step of `ẋ = field(t, x)`.
///
/// Time-dependent inputs are seen at `t`, `t + h/2` and `t + h`.
pub fn rk4_step<F>(field: &mut F, t: f64, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {h}")));
    }
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    field(t, x, &mut k1)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    field(t + 0.5 * h, &tmp, &mut k2)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    field(t + 0.5 * h, &tmp, &mut k3)?;
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    field(t + h, &tmp, &mut k4)?;
    let next: Vec<f64> = (0..n).map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("integrator state at t = {}", t + h)));
    }
    Ok(next)
}

/// Standard deviations of the additive measurement and input noise.
///
/// An empty list means no noise on that signal; a single entry applies to
/// every channel.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub std_y: Vec<f64>,
    pub std_u: Vec<f64>,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(std_y: Vec<f64>, std_u: Vec<f64>, seed: u64) -> Self {
        Self { std_y, std_u, seed }
    }

    fn expand(v: &[f64], n: usize, what: &str) -> Result<Vec<f64>> {
        if v.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("{what} noise std must be finite and nonnegative")));
        }
        match v.len() {
            0 => Ok(vec![0.0; n]),
            1 => Ok(vec![v[0]; n]),
            m if m == n => Ok(v.to_vec()),
            m => Err(Error::Dimension(format!("{m} {what} noise stds for {n} channels"))),
        }
    }

    pub fn stream(&self, nu: usize, ny: usize) -> Result<NoiseStream> {
        Ok(NoiseStream {
            std_u: Self::expand(&self.std_u, nu, "input")?,
            std_y: Self::expand(&self.std_y, ny, "output")?,
            rng: ChaCha8Rng::seed_from_u64(self.seed),
        })
    }
}

/// Zero-order-hold noise source: one draw per integration step.
///
/// Every channel consumes a normal variate on each draw, zero std or not,
/// so streams stay aligned across noise levels.
pub struct NoiseStream {
    std_u: Vec<f64>,
    std_y: Vec<f64>,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    /// `(d_u, d_y)` for the next step.
    pub fn draw(&mut self) -> (Vec<f64>, Vec<f64>) {
        let rng = &mut self.rng;
        let du = self.std_u.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
        let dy = self.std_y.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
        (du, dy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub t_final: f64,
    pub step: f64,
    /// Abort once a state leaves the state box inflated by this factor.
    pub abort_inflation: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self { t_final: 1.0, step: DEFAULT_STEP, abort_inflation: 2.0 }
    }
}

impl SimSettings {
    pub fn new(t_final: f64) -> Self {
        Self { t_final, ..Self::default() }
    }

    pub fn steps(&self) -> Result<usize> {
        if !(self.step > 0.0 && self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::Config(format!("invalid horizon {} with step {}", self.t_final, self.step)));
        }
        Ok((self.t_final / self.step).round() as usize)
    }
}

/// Sampled plant/observer run on a uniform grid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryRecord {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub u_noisy: Vec<Vec<f64>>,
    pub y_noisy: Vec<Vec<f64>>,
    /// One Lyapunov value per observer at every grid point.
    pub v: Vec<Vec<f64>>,
    /// Column names of the `z` block.
    pub z_names: Vec<String>,
    /// Column names of the `v` block.
    pub v_names: Vec<String>,
    /// `key=value` provenance lines written as CSV comments.
    pub meta: Vec<(String, String)>,
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

impl TrajectoryRecord {
    pub(crate) fn with_names(z_names: Vec<String>, v_names: Vec<String>, capacity: usize) -> Self {
        Self {
            t: Vec::with_capacity(capacity),
            x: Vec::with_capacity(capacity),
            z: Vec::with_capacity(capacity),
            u: Vec::with_capacity(capacity),
            y: Vec::with_capacity(capacity),
            u_noisy: Vec::with_capacity(capacity),
            y_noisy: Vec::with_capacity(capacity),
            v: Vec::with_capacity(capacity),
            z_names,
            v_names,
            meta: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn width(rows: &[Vec<f64>]) -> usize {
        rows.first().map_or(0, Vec::len)
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend(numbered("x", Self::width(&self.x)));
        h.extend(self.z_names.iter().cloned());
        h.extend(numbered("u", Self::width(&self.u)));
        h.extend(numbered("y", Self::width(&self.y)));
        h.extend(numbered("u_noisy", Self::width(&self.u_noisy)));
        h.extend(numbered("y_noisy", Self::width(&self.y_noisy)));
        h.extend(self.v_names.iter().cloned());
        h
    }

    /// CSV with 17 significant digits per float; provenance goes in leading `#` lines.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for (k, v) in &self.meta {
            writeln!(w, "# {k}={v}")?;
        }
        writeln!(w, "{}", self.header().join(","))?;
        let mut line = String::new();
        for i in 0..self.len() {
            line.clear();
            write!(line, "{:.16e}", self.t[i]).unwrap();
            for block in [&self.x, &self.z, &self.u, &self.y, &self.u_noisy, &self.y_noisy, &self.v] {
                for v in &block[i] {
                    write!(line, ",{v:.16e}").unwrap();
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Parses what [`TrajectoryRecord::write_csv`] produces.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        #[derive(Clone, Copy, PartialEq)]
        enum Col {
            T,
            X,
            Z,
            U,
            Y,
            UNoisy,
            YNoisy,
            V,
        }
        let mut rec = TrajectoryRecord::default();
        let mut cols: Option<Vec<Col>> = None;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                if let Some((k, v)) = c.trim().split_once('=') {
                    rec.meta.push((k.to_string(), v.to_string()));
                }
                continue;
            }
            let Some(kinds) = &cols else {
                let mut kinds = Vec::new();
                for name in line.split(',') {
                    let kind = if name == "t" {
                        Col::T
                    } else if name.starts_with("u_noisy") {
                        Col::UNoisy
                    } else if name.starts_with("y_noisy") {
                        Col::YNoisy
                    } else if name.starts_with('x') {
                        Col::X
                    } else if name.starts_with('z') {
                        rec.z_names.push(name.to_string());
                        Col::Z
                    } else if name.starts_with('u') {
                        Col::U
                    } else if name.starts_with('y') {
                        Col::Y
                    } else if name.starts_with('V') {
                        rec.v_names.push(name.to_string());
                        Col::V
                    } else {
                        return Err(Error::Format(format!("unknown trajectory column {name:?}")));
                    };
                    kinds.push(kind);
                }
                if kinds.first() != Some(&Col::T) {
                    return Err(Error::Format("trajectory header must start with t".into()));
                }
                cols = Some(kinds);
                continue;
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != kinds.len() {
                return Err(Error::Format(format!("line {}: {} fields, header has {}", lineno + 1, fields.len(), kinds.len())));
            }
            let mut row: [Vec<f64>; 7] = Default::default();
            for (f, kind) in fields.iter().zip(kinds) {
                let v: f64 = f.trim().parse().map_err(|_| Error::Format(format!("line {}: bad number {f:?}", lineno + 1)))?;
                match kind {
                    Col::T => rec.t.push(v),
                    Col::X => row[0].push(v),
                    Col::Z => row[1].push(v),
                    Col::U => row[2].push(v),
                    Col::Y => row[3].push(v),
                    Col::UNoisy => row[4].push(v),
                    Col::YNoisy => row[5].push(v),
                    Col::V => row[6].push(v),
                }
            }
            let [x, z, u, y, un, yn, v] = row;
            rec.x.push(x);
            rec.z.push(z);
            rec.u.push(u);
            rec.y.push(y);
            rec.u_noisy.push(un);
            rec.y_noisy.push(yn);
            rec.v.push(v);
        }
        if cols.is_none() {
            return Err(Error::Format("trajectory file has no header".into()));
        }
        Ok(rec)
    }
}

fn window(traj: &TrajectoryRecord, t0: f64, t1: f64) -> Result<Vec<usize>> {
    if !(t0 < t1) {
        return Err(Error::Config(format!("empty RMSE window [{t0}, {t1}]")));
    }
    let tol = 1e-9 * (1.0 + t1.abs());
    let idx: Vec<usize> = (0..traj.len()).filter(|&i| traj.t[i] >= t0 - tol && traj.t[i] <= t1 + tol).collect();
    if idx.is_empty() {
        return Err(Error::Config(format!("no grid points in [{t0}, {t1}]")));
    }
    Ok(idx)
}

/// Root-mean-square of `|x(t) - z(t)|` over the grid points in `[t0, t1]`.
pub fn rmse(traj: &TrajectoryRecord, t0: f64, t1: f64) -> Result<f64> {
    let n = traj.x.first().map_or(0, Vec::len);
    rmse_block(traj, t0, t1, 0..n)
}

/// [`rmse`] restricted to the state components in `block`.
pub fn rmse_block(traj: &TrajectoryRecord, t0: f64, t1: f64, block: std::ops::Range<usize>) -> Result<f64> {
    let idx = window(traj, t0, t1)?;
    let mut acc = 0.0;
    for &i in &idx {
        let (x, z) = (&traj.x[i], &traj.z[i]);
        if block.end > x.len() || block.end > z.len() {
            return Err(Error::Dimension(format!("component block {block:?} exceeds the record width")));
        }
        acc += sq_dist(&x[block.clone()], &z[block.clone()]);
    }
    Ok((acc / idx.len() as f64).sqrt())
}

pub(crate) fn check_inside(x: &[f64], bx: &crate::system::BoxDomain, what: &str, t: f64) -> Result<()> {
    if !bx.contains(x) {
        return Err(Error::Domain(format!("{what} left the admissible box at t = {t}: {x:?}")));
    }
    Ok(())
}

/// Co-integrates the plant and the observer `ż = F(z, u + d_u, y + d_y)`
/// with RK4 and zero-order-hold noise, recording `V(x, z)` on the grid.
pub fn simulate_observer<O: Observer + ?Sized>(
    plant: &dyn Dynamics,
    observer: &O,
    noise: &NoiseSpec,
    x0: &[f64],
    z0: &[f64],
    sim: &SimSettings,
) -> Result<TrajectoryRecord> {
    let dims = plant.dims();
    let od = observer.dims();
    if dims.nw != 0 || od.nw != 0 {
        return Err(Error::Dimension("stand-alone simulation needs systems without a neighbour signal".into()));
    }
    if (od.nx, od.nu, od.ny) != (dims.nx, dims.nu, dims.ny) {
        return Err(Error::Dimension(format!("observer dims {od:?} do not match plant dims {dims:?}")));
    }
    let domain = plant.domain();
    check_inside(x0, &domain.x, "initial state", 0.0)?;
    check_inside(z0, &domain.x, "initial estimate", 0.0)?;
    let steps = sim.steps()?;
    let h = sim.step;
    let nx = dims.nx;
    let hmap = plant.output_map();
    let limit = domain.x.inflated(sim.abort_inflation);
    let mut stream = noise.stream(dims.nu, dims.ny)?;

    let mut rec = TrajectoryRecord::with_names(numbered("z", nx), vec!["V".into()], steps + 1);
    let mut s: Vec<f64> = x0.iter().chain(z0).copied().collect();
    for k in 0..=steps {
        let t = k as f64 * h;
        let (du, dy) = stream.draw();
        let x = &s[..nx];
        let z = &s[nx..];
        let u = plant.nominal_input(t);
        let y = hmap.apply(x);
        rec.t.push(t);
        rec.x.push(x.to_vec());
        rec.z.push(z.to_vec());
        rec.u_noisy.push(u.iter().zip(&du).map(|(a, b)| a + b).collect());
        rec.y_noisy.push(y.iter().zip(&dy).map(|(a, b)| a + b).collect());
        rec.u.push(u);
        rec.y.push(y);
        rec.v.push(vec![observer.lyapunov(x, z)?]);
        if k == steps {
            break;
        }
        let mut field = |tt: f64, st: &[f64], out: &mut [f64]| -> Result<()> {
            let (x, z) = st.split_at(nx);
            let u = plant.nominal_input(tt);
            plant.field(x, &u, &[], &mut out[..nx])?;
            let un: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a + b).collect();
            let yn: Vec<f64> = hmap.apply(x).iter().zip(&dy).map(|(a, b)| a + b).collect();
            out[nx..].copy_from_slice(&observer.rhs(z, &un, &[], &yn)?);
            Ok(())
        };
        s = rk4_step(&mut field, t, &s, h)?;
        let tn = (k + 1) as f64 * h;
        check_inside(&s[..nx], &limit, "plant state", tn)?;
        check_inside(&s[nx..], &limit, "estimate", tn)?;
    }
    Ok(rec)
}

/// Draws initial states from the state box until the noise-free plant stays
/// inside the box over `sim.t_final`.
pub fn sample_viable_initial_state<R: Rng + ?Sized>(plant: &dyn Dynamics, sim: &SimSettings, rng: &mut R, max_tries: usize) -> Result<Vec<f64>> {
    let domain = plant.domain();
    let steps = sim.steps()?;
    'draw: for _ in 0..max_tries {
        let x0 = domain.x.sample(rng);
        let mut x = x0.clone();
        for k in 0..steps {
            let mut field = |tt: f64, st: &[f64], out: &mut [f64]| plant.field(st, &plant.nominal_input(tt), &[], out);
            match rk4_step(&mut field, k as f64 * sim.step, &x, sim.step) {
                Ok(next) if domain.x.contains(&next) => x = next,
                _ => continue 'draw,
            }
        }
        return Ok(x0);
    }
    Err(Error::Domain(format!("no initial state in {max_tries} draws keeps {} inside its box", plant.name())))
}
