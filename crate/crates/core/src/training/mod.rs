//! Datasets, the three training losses, Adam and the joint training loop.

mod dataset;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{Architecture, BoundModel, ChiBatch, Hyperparams, ModelScaling, ObserverModel};
use crate::plants::Dynamics;
use crate::system::BoxDomain;

pub use dataset::{gen_datasets, ChiDataset, DynDataset, Provenance};

/// Batch of labelled records `(x, u, w, ẋ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynBatch {
    pub x: Tensor,
    pub u: Tensor,
    pub w: Tensor,
    pub xdot: Tensor,
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(idx.len(), c, data).expect("gathered rows keep the width")
}

impl DynDataset {
    pub fn batch(&self, idx: &[usize]) -> DynBatch {
        DynBatch { x: gather(&self.x, idx), u: gather(&self.u, idx), w: gather(&self.w, idx), xdot: gather(&self.xdot, idx) }
    }
}

impl ChiDataset {
    pub fn batch(&self, idx: &[usize]) -> ChiBatch {
        ChiBatch { z: gather(&self.x, idx), u: gather(&self.u, idx), y: gather(&self.y, idx), w: gather(&self.w, idx) }
    }
}

/// `mean |f*(x, u, w) - ẋ|²`.
pub fn dynamics_loss<'a>(g: &mut Graph<'a>, m: &BoundModel<'_>, batch: &'a DynBatch) -> Result<Var> {
    if batch.x.rows() == 0 {
        return Err(Error::Config("empty dynamics batch".into()));
    }
    let x = g.constant_ref(&batch.x);
    let u = g.constant_ref(&batch.u);
    let w = g.constant_ref(&batch.w);
    let target = g.constant_ref(&batch.xdot);
    let f = m.dynamics(g, x, u, w)?;
    let r = g.sub(f, target)?;
    let n = g.row_norm_sq(r)?;
    Ok(g.mean(n)?)
}

/// Mean over pairs of `|L̃*(χ1, χ2) - [L*(χ1); L*(χ2)]|²`.
pub fn consistency_loss<'a>(g: &mut Graph<'a>, m: &BoundModel<'_>, c1: &'a ChiBatch, c2: &'a ChiBatch) -> Result<Var> {
    if c1.rows() == 0 || c1.rows() != c2.rows() {
        return Err(Error::Config("χ-pair batches must be nonempty and of equal size".into()));
    }
    let v1 = c1.bind(g);
    let v2 = c2.bind(g);
    let pair = m.embedded_pair(g, &v1, &v2)?;
    let l1 = m.output_injection(g, v1.z, v1.u, v1.w, v1.y)?;
    let l2 = m.output_injection(g, v2.z, v2.u, v2.w, v2.y)?;
    let target = g.concat(&[l1, l2])?;
    let r = g.sub(pair.projected, target)?;
    let n = g.row_norm_sq(r)?;
    Ok(g.mean(n)?)
}

/// `mean ReLU(ε_proj - ‖∇V(z1, z2)‖²)` over state pairs.
pub fn gradv_penalty<'a>(g: &mut Graph<'a>, m: &BoundModel<'_>, z1: &'a Tensor, z2: &'a Tensor) -> Result<Var> {
    if z1.rows() == 0 || z1.shape() != z2.shape() {
        return Err(Error::Config("state-pair batches must be nonempty and of equal shape".into()));
    }
    let a = g.constant_ref(z1);
    let b = g.constant_ref(z2);
    let t = m.lyapunov(g, a, b)?;
    let grad = g.concat(&[t.d1, t.d2])?;
    let n = g.row_norm_sq(grad)?;
    let short = g.affine(n, -1.0, m.model.hyper.eps_proj)?;
    let r = g.relu(short)?;
    Ok(g.mean(r)?)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Dimension("parameter list changed between Adam steps".into()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub dynamics: f64,
    pub consistency: f64,
    pub gradv: f64,
    pub total: f64,
}

/// Per-epoch batch-averaged losses plus a checksum of the final parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub plant: String,
    pub seed: u64,
    pub n: usize,
    pub n_chi: usize,
    pub epochs: Vec<LossComponents>,
    pub wall_seconds: f64,
    pub checksum: String,
}

/// SHA-256 over the little-endian bytes of every parameter, in parameter order.
pub fn parameter_checksum(model: &ObserverModel) -> String {
    let mut h = Sha256::new();
    for p in model.parameters() {
        for v in p.data() {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

/// Architecture, settings and whether to wrap the nets in domain normalisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub arch: Architecture,
    pub hyper: Hyperparams,
    pub normalize: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { arch: Architecture::default(), hyper: Hyperparams::default(), normalize: true }
    }
}

/// Domain normalisation for `plant` with outputs scaled by the spread of `ẋ`.
pub fn model_scaling(plant: &dyn Dynamics, data: &DynDataset) -> ModelScaling {
    let d = plant.domain();
    let xdot_scale = data.xdot_std().into_iter().map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
    ModelScaling { x: d.x.clone(), u: d.u.clone(), y: d.y.clone(), w: d.w.clone(), xdot_scale }
}

/// A fresh model for `plant`, initialised from `opts.hyper.seed`.
pub fn init_model(plant: &dyn Dynamics, data: &DynDataset, opts: &TrainOptions) -> Result<ObserverModel> {
    let scaling = opts.normalize.then(|| model_scaling(plant, data));
    ObserverModel::random(plant.dims(), plant.output_map(), &opts.arch, opts.hyper.clone(), scaling.as_ref(), opts.hyper.seed)
}

fn sample_box_batch<R: Rng>(b: &BoxDomain, n: usize, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(n * b.dim());
    for _ in 0..n {
        b.sample_into(rng, &mut data);
    }
    Tensor::new(n, b.dim(), data).expect("box draw has the box width")
}

/// Evaluates the three losses on one mini-batch and, if `apply` is set,
/// takes an Adam step on all five networks jointly.
pub struct Trainer<'p> {
    pub model: ObserverModel,
    pub adam: Adam,
    plant: &'p dyn Dynamics,
}

impl<'p> Trainer<'p> {
    pub fn new(plant: &'p dyn Dynamics, model: ObserverModel) -> Result<Self> {
        model.validate()?;
        if model.dims != plant.dims() {
            return Err(Error::Dimension(format!("model dims {:?} for plant dims {:?}", model.dims, plant.dims())));
        }
        let adam = Adam::new(model.hyper.lr);
        Ok(Self { model, adam, plant })
    }

    /// Total loss and its parameter gradients on given batches.
    pub fn loss_and_gradients(&self, dynb: &DynBatch, c1: &ChiBatch, c2: &ChiBatch, z1: &Tensor, z2: &Tensor) -> Result<(LossComponents, Vec<Tensor>)> {
        let h = &self.model.hyper;
        let mut g = Graph::new();
        let bm = self.model.bind(&mut g, true);
        let lf = dynamics_loss(&mut g, &bm, dynb)?;
        let ll = consistency_loss(&mut g, &bm, c1, c2)?;
        let lv = gradv_penalty(&mut g, &bm, z1, z2)?;
        let a = g.scale(lf, h.lambda_f)?;
        let b = g.scale(ll, h.lambda_lstar)?;
        let c = g.scale(lv, h.lambda_gradv)?;
        let ab = g.add(a, b)?;
        let total = g.add(ab, c)?;
        let comps = LossComponents {
            dynamics: g.value(lf).item()?,
            consistency: g.value(ll).item()?,
            gradv: g.value(lv).item()?,
            total: g.value(total).item()?,
        };
        let grads = g.backward(total)?;
        let params = bm.parameter_vars();
        Ok((comps, params.iter().map(|&p| grads.wrt(p)).collect()))
    }

    pub fn step(&mut self, dynb: &DynBatch, c1: &ChiBatch, c2: &ChiBatch, z1: &Tensor, z2: &Tensor) -> Result<LossComponents> {
        let (comps, grads) = self.loss_and_gradients(dynb, c1, c2, z1, z2)?;
        self.adam.step(self.model.parameters_mut(), &grads)?;
        Ok(comps)
    }

    /// Runs `hyper.epochs` epochs. Each dynamics batch is paired with one
    /// batch of random χ-pairs and one batch of fresh state pairs.
    pub fn run(&mut self, data: &DynDataset, chi: &ChiDataset, mut on_epoch: impl FnMut(usize, &LossComponents)) -> Result<TrainReport> {
        let dims = self.model.dims;
        if data.dims != dims || chi.dims != dims {
            return Err(Error::Dimension("dataset dims differ from the model".into()));
        }
        if data.is_empty() || chi.is_empty() {
            return Err(Error::Config("training needs nonempty datasets".into()));
        }
        let h = self.model.hyper.clone();
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(h.seed);
        rng.set_stream(2);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut epochs = Vec::with_capacity(h.epochs);
        let x_box = self.plant.domain().x.clone();
        for epoch in 0..h.epochs {
            order.shuffle(&mut rng);
            let mut acc = LossComponents::default();
            let mut batches = 0usize;
            for (bi, idx) in order.chunks(h.batch).enumerate() {
                let dynb = data.batch(idx);
                let m = idx.len();
                let i1: Vec<usize> = (0..m).map(|_| rng.gen_range(0..chi.len())).collect();
                let i2: Vec<usize> = (0..m).map(|_| rng.gen_range(0..chi.len())).collect();
                let (c1, c2) = (chi.batch(&i1), chi.batch(&i2));
                let z1 = sample_box_batch(&x_box, m, &mut rng);
                let z2 = sample_box_batch(&x_box, m, &mut rng);
                let comps = self.step(&dynb, &c1, &c2, &z1, &z2).map_err(|e| match e {
                    Error::Diff(d) => Error::NonFinite(format!("epoch {epoch}, batch {bi}: {d}")),
                    other => other,
                })?;
                if !comps.total.is_finite() {
                    return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {bi}")));
                }
                acc.dynamics += comps.dynamics;
                acc.consistency += comps.consistency;
                acc.gradv += comps.gradv;
                acc.total += comps.total;
                batches += 1;
            }
            let k = batches as f64;
            let mean = LossComponents { dynamics: acc.dynamics / k, consistency: acc.consistency / k, gradv: acc.gradv / k, total: acc.total / k };
            on_epoch(epoch, &mean);
            epochs.push(mean);
        }
        Ok(TrainReport {
            plant: self.plant.name(),
            seed: h.seed,
            n: data.len(),
            n_chi: chi.len(),
            epochs,
            wall_seconds: started.elapsed().as_secs_f64(),
            checksum: parameter_checksum(&self.model),
        })
    }
}

/// Initialises and trains a model on the given datasets.
pub fn train(plant: &dyn Dynamics, data: &DynDataset, chi: &ChiDataset, opts: &TrainOptions) -> Result<(ObserverModel, TrainReport)> {
    train_with(plant, data, chi, opts, |_, _| {})
}

pub fn train_with(
    plant: &dyn Dynamics,
    data: &DynDataset,
    chi: &ChiDataset,
    opts: &TrainOptions,
    on_epoch: impl FnMut(usize, &LossComponents),
) -> Result<(ObserverModel, TrainReport)> {
    opts.hyper.validate()?;
    let model = init_model(plant, data, opts)?;
    let mut trainer = Trainer::new(plant, model)?;
    let report = trainer.run(data, chi, on_epoch)?;
    Ok((trainer.model, report))
}
