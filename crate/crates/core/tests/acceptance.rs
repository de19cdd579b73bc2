//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. `DISSOBS_ACCEPTANCE=1,4,6` runs a subset.

use std::io::Write;
use std::time::Instant;

use dissobs::archive;
use dissobs::certify::{audit_decrease, gronwall_check, prop1_bound, simulate_embedded, Disturbance, AUDIT_SLACK};
use dissobs::config::RunConfig;
use dissobs::diffcore::{mlp_forward, mlp_input_gradient, Activation, Graph, MlpNet, Tensor};
use dissobs::distributed::{small_gain_check, small_gain_for};
use dissobs::nets::{Architecture, ChiBatch, Hyperparams, ObserverModel};
use dissobs::pipeline;
use dissobs::plants::{rk4_step, rmse, rmse_block, Dynamics, PlantSpec, Side};
use dissobs::training::{gen_datasets, init_model, TrainOptions, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C1_MODELS: usize = 10;
const C1_PAIRS: usize = 100_000;
const C2_SAMPLES: usize = 10_000;
const C2_TOL: f64 = 1e-15;
const C3_LOSS_TOL: f64 = 1e-4;
const C3_INPUT_TOL: f64 = 1e-5;
const C4_STEP_TOL: f64 = 1e-12;
const C4_MIN_ORDER: f64 = 3.9;
const C5_RUNS: usize = 20;
const C5_TOL: f64 = 1e-6;
const C6_TOL: f64 = 1e-15;
const C7_NOISE_FREE_MAX: f64 = 2.5;
const C7_NOISY_FACTOR: f64 = 1.5;
const C7_NOISY_OFFSET: f64 = 1.5;
const C8_NOISE_FREE_MAX: f64 = 0.06;
const C8_NOISY_MAX: f64 = 0.15;
const C9_NOISE_FREE_MAX: f64 = 0.5;
const C9_NOISY_MAX: f64 = 0.6;
const SEEDS: [u64; 3] = [1, 2, 3];

/// Widths used for the reproduction runs; see the README for the rationale.
const REPRO_HIDDEN: &str = "[64, 64]";

type Criterion = (u32, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn untrained(sys: &dyn Dynamics, hyper: Hyperparams, seed: u64, normalize: bool) -> ObserverModel {
    let opts = TrainOptions { arch: Architecture::default(), hyper: Hyperparams { seed, ..hyper }, normalize };
    let (data, _) = gen_datasets(sys, 256, 1, seed).unwrap();
    init_model(sys, &data, &opts).unwrap()
}

fn benchmarks() -> Vec<(String, Box<dyn Dynamics>, Hyperparams)> {
    let pair = PlantSpec::fhn_pair();
    let fhn = Hyperparams { rho_u: 2.0, rho_y: 2.0, rho_z: 0.15, ..Hyperparams::default() };
    let side = |s| -> Box<dyn Dynamics> { Box::new(pair.local(s).unwrap()) as Box<dyn Dynamics> };
    vec![
        ("lorenz".into(), Box::new(PlantSpec::lorenz()), Hyperparams { rho_y: 2.0, ..Hyperparams::default() }),
        ("bicycle".into(), Box::new(PlantSpec::bicycle()), Hyperparams { rho_u: 5.0, rho_y: 5.0, ..Hyperparams::default() }),
        ("fhn_a".into(), side(Side::A), fhn.clone()),
        ("fhn_b".into(), side(Side::B), fhn),
    ]
}

fn c1_construction_guarantee() -> Outcome {
    let systems = benchmarks();
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    let mut guaranteed = 0;
    for k in 0..C1_MODELS {
        let (_, sys, hyper) = &systems[k % systems.len()];
        let m = untrained(sys.as_ref(), hyper.clone(), 100 + k as u64, k % 2 == 0);
        let c = audit_decrease(&m, sys.domain(), C1_PAIRS, k as u64).unwrap();
        violations += c.guaranteed_violations;
        guaranteed += c.guaranteed;
        worst = worst.max(c.max_guaranteed_excess);
    }
    outcome(
        violations == 0,
        format!("{C1_MODELS} models x {C1_PAIRS} pairs, {guaranteed} in the guaranteed region, {violations} violations, worst excess {worst:.3e} (slack {AUDIT_SLACK:e})"),
    )
}

fn c2_exact_identities() -> Outcome {
    let mut worst: f64 = 0.0;
    for (k, (_, sys, hyper)) in benchmarks().into_iter().enumerate() {
        let m = untrained(sys.as_ref(), hyper, 200 + k as u64, true);
        let d = sys.domain();
        let h = sys.output_map();
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        for _ in 0..C2_SAMPLES {
            let z = d.x.sample(&mut rng);
            let u = d.u.sample(&mut rng);
            let w = d.w.sample(&mut rng);
            worst = worst.max(m.eval_lyapunov(&z, &z).unwrap().abs());
            let (d1, d2) = m.eval_lyapunov_gradient(&z, &z).unwrap();
            worst = d1.iter().chain(&d2).fold(worst, |a, v| a.max(v.abs()));
            let l = m.eval_injection(&z, &u, &w, &h.apply(&z)).unwrap();
            worst = l.iter().fold(worst, |a, v| a.max(v.abs()));
        }
    }
    outcome(worst <= C2_TOL, format!("4 benchmarks x {C2_SAMPLES} samples, max |identity residual| {worst:.3e}"))
}

/// `|a - b| / max(|a|, |b|, 1e-3)`.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn c3_differentiation() -> Outcome {
    let pair = PlantSpec::fhn_pair();
    let sys = pair.local(Side::A).unwrap();
    let hyper = Hyperparams { rho_u: 2.0, rho_y: 2.0, rho_z: 0.15, alpha: 3.0, eps_proj: 1e-2, batch: 4, ..Hyperparams::default() };
    let opts = TrainOptions { arch: Architecture { hidden: vec![5, 4], activation: Activation::Tanh }, hyper, normalize: true };
    let (data, chi) = gen_datasets(&sys, 4, 8, 9).unwrap();
    let model = init_model(&sys, &data, &opts).unwrap();
    let trainer = Trainer::new(&sys, model).unwrap();
    let dynb = data.batch(&[0, 1, 2, 3]);
    let (c1, c2) = (chi.batch(&[0, 1, 2, 3]), chi.batch(&[4, 5, 6, 7]));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z1 = Tensor::new(4, 2, (0..8).map(|_| rng.gen_range(-2.5..2.5)).collect()).unwrap();
    let z2 = Tensor::new(4, 2, (0..8).map(|_| rng.gen_range(-2.5..2.5)).collect()).unwrap();
    let clamped = {
        let mut n = 0;
        for r in 0..4 {
            let one = |b: &ChiBatch| ChiBatch::single(b.z.row(r), b.u.row(r), b.y.row(r), b.w.row(r));
            let e = trainer.model.eval_embedded_pair(&one(&c1), &one(&c2)).unwrap();
            let lhs: f64 = e.d1.iter().zip(&e.raw[..2]).chain(e.d2.iter().zip(&e.raw[2..])).map(|(a, b)| a * b).sum();
            n += usize::from(lhs > e.lambda);
        }
        n
    };
    let (_, grads) = trainer.loss_and_gradients(&dynb, &c1, &c2, &z1, &z2).unwrap();
    let total = |m: &ObserverModel| {
        let t = Trainer::new(&sys, m.clone()).unwrap();
        t.loss_and_gradients(&dynb, &c1, &c2, &z1, &z2).unwrap().0.total
    };
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    let n_params = trainer.model.parameters().len();
    for (k, grad) in grads.iter().enumerate().take(n_params) {
        let len = trainer.model.parameters()[k].len();
        for i in 0..len {
            let mut plus = trainer.model.clone();
            plus.parameters_mut()[k].data_mut()[i] += step;
            let mut minus = trainer.model.clone();
            minus.parameters_mut()[k].data_mut()[i] -= step;
            let fd = (total(&plus) - total(&minus)) / (2.0 * step);
            worst = worst.max(rel_err(grad.data()[i], fd));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = MlpNet::random(&[3, 16, 1], Activation::Tanh, Activation::TanhScaled100, &mut rng).unwrap();
    let value = |x: &[f64]| {
        let mut g = Graph::new();
        let b = net.bind(&mut g, false);
        let xv = g.constant(Tensor::row_vector(x));
        let y = mlp_forward(&mut g, &b, xv).unwrap();
        g.value(y).item().unwrap()
    };
    let mut worst_in: f64 = 0.0;
    for _ in 0..50 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let b = net.bind(&mut g, false);
        let xv = g.constant(Tensor::row_vector(&x));
        let d = mlp_input_gradient(&mut g, &b, xv).unwrap();
        for i in 0..3 {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += 1e-5;
            m[i] -= 1e-5;
            let fd = (value(&p) - value(&m)) / 2e-5;
            worst_in = worst_in.max(rel_err(g.value(d).data()[i], fd));
        }
    }
    outcome(
        worst <= C3_LOSS_TOL && worst_in <= C3_INPUT_TOL && clamped > 0,
        format!("total-loss gradient rel err {worst:.2e} ({clamped}/4 pairs projected), input gradient rel err {worst_in:.2e}"),
    )
}

fn c4_integrator() -> Outcome {
    let h = 0.005;
    let mut decay = |_t: f64, x: &[f64], out: &mut [f64]| {
        out[0] = -x[0];
        Ok(())
    };
    let mut x = vec![1.0];
    let mut worst_step: f64 = 0.0;
    for k in 0..200 {
        let next = rk4_step(&mut decay, k as f64 * h, &x, h).unwrap();
        worst_step = worst_step.max((next[0] - x[0] * (-h).exp()).abs());
        x = next;
    }
    let exact = |t: f64| t.sin().exp();
    let global = |h: f64| {
        let mut f = |t: f64, x: &[f64], out: &mut [f64]| {
            out[0] = t.cos() * x[0];
            Ok(())
        };
        let n = (2.0 / h).round() as usize;
        let mut x = vec![1.0];
        for k in 0..n {
            x = rk4_step(&mut f, k as f64 * h, &x, h).unwrap();
        }
        (x[0] - exact(2.0)).abs()
    };
    let errs: Vec<f64> = [0.1, 0.05, 0.025, 0.0125, 0.00625].iter().map(|&h| global(h)).collect();
    let order = errs.windows(2).map(|w| (w[0] / w[1]).log2()).fold(f64::INFINITY, f64::min);
    outcome(worst_step <= C4_STEP_TOL && order >= C4_MIN_ORDER, format!("worst per-step error {worst_step:.2e}, observed order {order:.3}"))
}

fn c5_gronwall() -> Outcome {
    let plant = PlantSpec::bicycle();
    let hyper = Hyperparams { rho_u: 5.0, rho_y: 5.0, ..Hyperparams::default() };
    let m = untrained(&plant, hyper.clone(), 500, true);
    let d = plant.domain();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut accepted, mut tried, mut failures) = (0, 0, 0);
    let mut worst_v: f64 = f64::NEG_INFINITY;
    let mut worst_e: f64 = f64::NEG_INFINITY;
    while accepted < C5_RUNS && tried < 20 * C5_RUNS {
        tried += 1;
        let c1 = ChiBatch::single(&d.x.sample(&mut rng), &d.u.sample(&mut rng), &d.y.sample(&mut rng), &[]);
        let c2 = ChiBatch::single(&d.x.sample(&mut rng), &d.u.sample(&mut rng), &d.y.sample(&mut rng), &[]);
        let run = simulate_embedded(&m, &c1, &c2, 2.0, 0.005).unwrap();
        if !run.in_region {
            continue;
        }
        accepted += 1;
        let dist = Disturbance {
            rho_u: hyper.rho_u,
            rho_y: hyper.rho_y,
            du_inf: (c1.u.data()[0] - c2.u.data()[0]).abs(),
            dy_inf: (c1.y.data()[0] - c2.y.data()[0]).abs(),
        };
        let rep = gronwall_check(&run.t, &run.v, hyper.alpha, &dist, true, C5_TOL).unwrap();
        worst_v = rep.margins.iter().fold(worst_v, |a, &m| a.max(-m));
        let mut ok = matches!(rep.status, dissobs::certify::GronwallStatus::Pass);
        for (k, &t) in run.t.iter().enumerate() {
            let e: f64 = run.z1[k].iter().zip(&run.z2[k]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let bound = prop1_bound(run.v[0], hyper.eps_v, hyper.alpha, &dist, t).unwrap();
            worst_e = worst_e.max(e - bound);
            ok &= e <= bound + C5_TOL;
        }
        failures += usize::from(!ok);
    }
    outcome(
        accepted == C5_RUNS && failures == 0,
        format!("{accepted}/{C5_RUNS} runs in the guaranteed region ({tried} drawn), {failures} failures, max V - bound {worst_v:.2e}, max |e| - bound {worst_e:.2e}"),
    )
}

fn c6_small_gain() -> Outcome {
    let ok = small_gain_check(0.15, 0.2, 1.0, 0.15, 0.2, 1.0).unwrap();
    let edge = small_gain_check(0.2, 0.2, 1.0, 0.2, 0.2, 1.0).unwrap();
    outcome(
        (ok.product_root - 0.75).abs() <= C6_TOL && ok.pass && !edge.pass,
        format!("product root {} (pass {}), boundary {} (pass {})", ok.product_root, ok.pass, edge.product_root, edge.pass),
    )
}

fn config(text: &str, seed: u64) -> RunConfig {
    let mut c = RunConfig::from_toml(text).unwrap();
    c.override_seed(seed);
    c
}

fn train_models(cfg: &RunConfig) -> dissobs::Result<Vec<ObserverModel>> {
    let sets = pipeline::generate_data(cfg)?;
    Ok(pipeline::train_all(cfg, &sets, |_, _, _| {})?.into_iter().map(|u| u.model).collect())
}

fn noise_free(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.sim.noise_std_u.clear();
    c.sim.noise_std_y.clear();
    c
}

fn lorenz_config() -> String {
    format!(
        r#"
[plant]
kind = "lorenz"
[model]
hidden = {REPRO_HIDDEN}
[hyper]
rho_y = 2.0
epochs = 300
[data]
n = 20000
n_chi = 100000
[sim]
t_final = 5.0
noise_std_y = [1.0]
x0 = [10.0, 20.0, 10.0]
z0 = [0.0, 0.0, 0.0]
"#
    )
}

fn bicycle_config() -> String {
    format!(
        r#"
[plant]
kind = "bicycle"
[model]
hidden = {REPRO_HIDDEN}
[hyper]
rho_u = 5.0
rho_y = 5.0
epochs = 300
[data]
n = 20000
n_chi = 100000
[sim]
t_final = 8.0
noise_std_y = [0.05]
noise_std_u = [0.05]
z0 = [0.8, 0.8]
"#
    )
}

fn fhn_config() -> String {
    format!(
        r#"
[plant]
kind = "fhn_pair"
[model]
hidden = {REPRO_HIDDEN}
[hyper]
rho_u = 2.0
rho_y = 2.0
rho_z = 0.15
epochs = 200
[data]
n = 20000
n_chi = 100000
[sim]
t_final = 100.0
noise_std_y = [0.1]
noise_std_u = [0.5]
z0 = [0.0, 0.0, 0.0, 0.0]
"#
    )
}

/// Per-seed `(noise-free, noisy)` RMSE over `[t0, T]`; a diverged run counts as infinite error.
fn single_runs(text: &str, t0: f64) -> Vec<(f64, f64)> {
    SEEDS
        .iter()
        .map(|&seed| {
            let cfg = config(text, seed);
            let Ok(models) = train_models(&cfg) else { return (f64::INFINITY, f64::INFINITY) };
            let score = |c: &RunConfig| pipeline::simulate(c, &models).and_then(|o| rmse(&o.record, t0, c.sim.t_final)).unwrap_or(f64::INFINITY);
            let r = (score(&noise_free(&cfg)), score(&cfg));
            progress(&format!("  seed {seed}: noise-free {:.4}, noisy {:.4}", r.0, r.1));
            r
        })
        .collect()
}

fn c7_lorenz() -> Outcome {
    let runs = single_runs(&lorenz_config(), 1.0);
    let clean = median(runs.iter().map(|r| r.0).collect());
    let noisy = median(runs.iter().map(|r| r.1).collect());
    let limit = C7_NOISY_FACTOR * clean + C7_NOISY_OFFSET;
    outcome(
        clean <= C7_NOISE_FREE_MAX && noisy <= limit,
        format!("median RMSE[1,5] noise-free {clean:.4} (<= {C7_NOISE_FREE_MAX}), noisy {noisy:.4} (<= {limit:.4})"),
    )
}

fn c8_bicycle() -> Outcome {
    let runs = single_runs(&bicycle_config(), 1.0);
    let clean = median(runs.iter().map(|r| r.0).collect());
    let noisy = median(runs.iter().map(|r| r.1).collect());
    outcome(
        clean <= C8_NOISE_FREE_MAX && noisy <= C8_NOISY_MAX,
        format!("median RMSE[1,8] noise-free {clean:.4} (<= {C8_NOISE_FREE_MAX}), noisy {noisy:.4} (<= {C8_NOISY_MAX})"),
    )
}

fn c9_fhn() -> Outcome {
    let text = fhn_config();
    let mut clean = (vec![], vec![]);
    let mut noisy = (vec![], vec![]);
    let mut gate = true;
    for &seed in &SEEDS {
        let cfg = config(&text, seed);
        let score = |c: &RunConfig, models: &[ObserverModel]| {
            pipeline::simulate(c, models)
                .and_then(|o| Ok((rmse_block(&o.record, 0.0, c.sim.t_final, 0..2)?, rmse_block(&o.record, 0.0, c.sim.t_final, 2..4)?)))
                .unwrap_or((f64::INFINITY, f64::INFINITY))
        };
        let (c, n) = match train_models(&cfg) {
            Ok(models) => {
                gate &= small_gain_for(&models[0], &models[1]).map(|r| r.pass).unwrap_or(false);
                (score(&noise_free(&cfg), &models), score(&cfg, &models))
            }
            Err(_) => ((f64::INFINITY, f64::INFINITY), (f64::INFINITY, f64::INFINITY)),
        };
        progress(&format!("  seed {seed}: noise-free a {:.4} b {:.4}, noisy a {:.4} b {:.4}", c.0, c.1, n.0, n.1));
        clean.0.push(c.0);
        clean.1.push(c.1);
        noisy.0.push(n.0);
        noisy.1.push(n.1);
    }
    let (ca, cb) = (median(clean.0), median(clean.1));
    let (na, nb) = (median(noisy.0), median(noisy.1));
    outcome(
        gate && ca.max(cb) <= C9_NOISE_FREE_MAX && na.max(nb) <= C9_NOISY_MAX,
        format!("small gain {}, median RMSE[0,100] noise-free a {ca:.4} b {cb:.4} (<= {C9_NOISE_FREE_MAX}), noisy a {na:.4} b {nb:.4} (<= {C9_NOISY_MAX})", if gate { "pass" } else { "FAIL" }),
    )
}

fn c10_determinism() -> Outcome {
    let text = r#"
[plant]
kind = "bicycle"
[model]
hidden = [12, 12]
[hyper]
rho_u = 5.0
rho_y = 5.0
epochs = 5
batch = 200
[data]
n = 1000
n_chi = 2000
seed = 4
[sim]
t_final = 2.0
noise_std_y = [0.05]
noise_std_u = [0.05]
z0 = [0.8, 0.8]
"#;
    let chain = || -> dissobs::Result<(Vec<u8>, Vec<u8>)> {
        let cfg = RunConfig::from_toml(text)?;
        let dir = tempfile::tempdir()?;
        let sets = pipeline::generate_data(&cfg)?;
        pipeline::write_data(dir.path(), &sets)?;
        let sets = pipeline::read_data(&cfg, dir.path())?;
        let units = pipeline::train_all(&cfg, &sets, |_, _, _| {})?;
        pipeline::save_units(&cfg, &dir.path().join("model"), &units)?;
        let models: Vec<_> = pipeline::load_units(&cfg, &dir.path().join("model"))?.into_iter().map(|(_, m)| m).collect();
        let rec = pipeline::simulate(&cfg, &models)?.record;
        let mut csv = Vec::new();
        rec.write_csv(&mut csv)?;
        Ok((std::fs::read(dir.path().join("model").join(archive::MODEL_FILE))?, csv))
    };
    match (chain(), chain()) {
        (Ok(a), Ok(b)) => outcome(
            a == b,
            format!("archive {} bytes, trajectory {} bytes, identical: {}", a.0.len(), a.1.len(), a == b),
        ),
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("chain failed: {e}")),
    }
}

fn progress(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("DISSOBS_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let criteria: [Criterion; 10] = [
        (1, "construction guarantee", c1_construction_guarantee),
        (2, "exact identities", c2_exact_identities),
        (3, "differentiation fidelity", c3_differentiation),
        (4, "integrator", c4_integrator),
        (5, "Gronwall and error bound consistency", c5_gronwall),
        (6, "small gain", c6_small_gain),
        (7, "Lorenz desk-scale reproduction", c7_lorenz),
        (8, "bicycle reproduction", c8_bicycle),
        (9, "FitzHugh-Nagumo distributed observer", c9_fhn),
        (10, "determinism and persistence", c10_determinism),
    ];
    let mut failed = vec![];
    for (id, name, run) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        progress(&format!("criterion {id:>2} {verdict}: {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64()));
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        progress(&format!("failed criteria: {failed:?}"));
        std::process::exit(1);
    }
}
