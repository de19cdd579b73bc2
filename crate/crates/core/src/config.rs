//! TOML run configuration shared by the command-line tool and the
//! end-to-end tests.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Activation;
use crate::error::{Error, Result};
use crate::nets::{Architecture, Hyperparams, ObserverModel};
use crate::plants::{sample_viable_initial_state, Domain, Dynamics, NoiseSpec, PlantModel, PlantSpec, Side, SimSettings};
use crate::training::TrainOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub kind: String,
    /// Overrides of the benchmark parameters; omitted keys keep their defaults.
    #[serde(default)]
    pub params: toml::Table,
    /// Replaces the default domain boxes when present.
    #[serde(default)]
    pub domain: Option<Domain>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub normalize: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = Architecture::default();
        Self { hidden: a.hidden, activation: a.activation, normalize: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    pub n_chi: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { n: 20_000, n_chi: 100_000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub t_final: f64,
    pub step: f64,
    pub abort_inflation: f64,
    pub noise_std_y: Vec<f64>,
    pub noise_std_u: Vec<f64>,
    /// True initial state; drawn from the state box when absent.
    pub x0: Option<Vec<f64>>,
    /// Observer initial state; the origin when absent.
    pub z0: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        let s = SimSettings::default();
        Self {
            t_final: 5.0,
            step: s.step,
            abort_inflation: s.abort_inflation,
            noise_std_y: vec![],
            noise_std_u: vec![],
            x0: None,
            z0: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out_dir: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub plant: PlantSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub hyper: Hyperparams,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces every seed in the configuration.
    pub fn override_seed(&mut self, seed: u64) {
        self.hyper.seed = seed;
        self.data.seed = seed;
        self.sim.seed = seed;
    }

    /// SHA-256 of the canonical JSON form, so formatting and comments do not matter.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }

    pub fn plant_spec(&self) -> Result<PlantSpec> {
        let base = PlantSpec::default_for(&self.plant.kind)?;
        let model = if self.plant.params.is_empty() {
            base.model
        } else {
            let mut t = self.plant.params.clone();
            t.insert("kind".into(), toml::Value::String(self.plant.kind.clone()));
            PlantModel::deserialize(toml::Value::Table(t)).map_err(|e| Error::Config(format!("plant.params: {e}")))?
        };
        let spec = PlantSpec { model, domain: self.plant.domain.clone().unwrap_or(base.domain) };
        spec.validate()?;
        Ok(spec)
    }

    pub fn is_distributed(&self) -> bool {
        self.plant.kind == "fhn_pair"
    }

    pub fn architecture(&self) -> Architecture {
        Architecture { hidden: self.model.hidden.clone(), activation: self.model.activation }
    }

    /// Training options; the second local observer of a pair gets the next seed.
    pub fn train_options(&self, side: Option<Side>) -> TrainOptions {
        let mut hyper = self.hyper.clone();
        if side == Some(Side::B) {
            hyper.seed = hyper.seed.wrapping_add(1);
        }
        TrainOptions { arch: self.architecture(), hyper, normalize: self.model.normalize }
    }

    /// Dataset seed, offset for the second local observer of a pair.
    pub fn data_seed(&self, side: Option<Side>) -> u64 {
        match side {
            Some(Side::B) => self.data.seed.wrapping_add(1),
            _ => self.data.seed,
        }
    }

    pub fn sim_settings(&self) -> SimSettings {
        SimSettings { t_final: self.sim.t_final, step: self.sim.step, abort_inflation: self.sim.abort_inflation }
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec::new(self.sim.noise_std_y.clone(), self.sim.noise_std_u.clone(), self.sim.seed)
    }

    /// `(x0, z0)` for a run: the configured ones, or a viable random start and the origin.
    pub fn initial_states(&self, plant: &dyn Dynamics) -> Result<(Vec<f64>, Vec<f64>)> {
        let nx = plant.dims().nx;
        let x0 = match &self.sim.x0 {
            Some(x) => x.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.sim.seed);
                rng.set_stream(3);
                sample_viable_initial_state(plant, &self.sim_settings(), &mut rng, 1000)?
            }
        };
        let z0 = self.sim.z0.clone().unwrap_or_else(|| vec![0.0; nx]);
        Ok((x0, z0))
    }

    /// Structural checks, including dimension consistency against the plant.
    pub fn validate(&self) -> Result<()> {
        let plant = self.plant_spec()?;
        self.hyper.validate()?;
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("model.hidden widths must be positive".into()));
        }
        if self.data.n == 0 || self.data.n_chi == 0 {
            return Err(Error::Config("data.n and data.n_chi must be positive".into()));
        }
        self.sim_settings().steps()?;
        if !(self.sim.abort_inflation >= 1.0) {
            return Err(Error::Config("sim.abort_inflation must be at least 1".into()));
        }
        let nx = plant.dims().nx;
        for (v, name) in [(&self.sim.x0, "sim.x0"), (&self.sim.z0, "sim.z0")] {
            if let Some(v) = v {
                if v.len() != nx {
                    return Err(Error::Dimension(format!("{name} has {} entries, the plant has {nx} states", v.len())));
                }
            }
        }
        let d = plant.dims();
        let (nu, ny) = if self.is_distributed() { (1, 1) } else { (d.nu, d.ny) };
        let noise = self.noise();
        noise.stream(nu, ny)?;
        if self.is_distributed() {
            noise.stream(1, 2)?;
        }
        Ok(())
    }

    /// Checks that a loaded model fits the configured plant (or side of it).
    pub fn check_model(&self, model: &ObserverModel, side: Option<Side>) -> Result<()> {
        let plant = self.plant_spec()?;
        let (dims, output) = match side {
            Some(s) => {
                let l = plant.local(s)?;
                (l.dims(), l.output_map())
            }
            None => (plant.dims(), plant.output_map()),
        };
        if model.dims != dims || model.output != output {
            return Err(Error::Dimension(format!(
                "model has dims {:?} and output {:?}, the {} plant needs {:?} and {:?}",
                model.dims, model.output, plant.kind(), dims, output
            )));
        }
        Ok(())
    }
}
