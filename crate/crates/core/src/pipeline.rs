//! Config-driven orchestration: data generation, training and simulation
//! for a single plant or for the two local observers of a pair.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::archive;
use crate::config::RunConfig;
use crate::distributed::{simulate_distributed, small_gain_for, SmallGainReport};
use crate::error::{Error, Result};
use crate::nets::ObserverModel;
use crate::plants::{simulate_observer, Dynamics, PlantSpec, Side, TrajectoryRecord};
use crate::training::{gen_datasets, train_with, ChiDataset, DynDataset, LossComponents, TrainReport};

pub const DYN_FILE: &str = "dyn.bin";
pub const CHI_FILE: &str = "chi.bin";
pub const REPORT_FILE: &str = "train_report.json";

/// The observer units of a configuration: one for a plain plant, `a` and `b` for a pair.
pub fn sides(cfg: &RunConfig) -> Vec<Option<Side>> {
    if cfg.is_distributed() {
        vec![Some(Side::A), Some(Side::B)]
    } else {
        vec![None]
    }
}

/// Sub-directory of a data or model directory holding one unit.
pub fn side_dir(root: &Path, side: Option<Side>) -> std::path::PathBuf {
    match side {
        Some(s) => root.join(s.tag()),
        None => root.to_path_buf(),
    }
}

fn with_system<T>(plant: &PlantSpec, side: Option<Side>, f: impl FnOnce(&dyn Dynamics) -> Result<T>) -> Result<T> {
    match side {
        Some(s) => f(&plant.local(s)?),
        None => f(plant),
    }
}

pub struct SideData {
    pub side: Option<Side>,
    pub data: DynDataset,
    pub chi: ChiDataset,
}

pub fn generate_data(cfg: &RunConfig) -> Result<Vec<SideData>> {
    let plant = cfg.plant_spec()?;
    sides(cfg)
        .into_iter()
        .map(|side| {
            let (data, chi) = with_system(&plant, side, |sys| gen_datasets(sys, cfg.data.n, cfg.data.n_chi, cfg.data_seed(side)))?;
            Ok(SideData { side, data, chi })
        })
        .collect()
}

pub fn write_data(dir: &Path, sets: &[SideData]) -> Result<()> {
    for s in sets {
        let d = side_dir(dir, s.side);
        std::fs::create_dir_all(&d)?;
        s.data.write(BufWriter::new(File::create(d.join(DYN_FILE))?))?;
        s.chi.write(BufWriter::new(File::create(d.join(CHI_FILE))?))?;
    }
    Ok(())
}

pub fn read_data(cfg: &RunConfig, dir: &Path) -> Result<Vec<SideData>> {
    let plant = cfg.plant_spec()?;
    sides(cfg)
        .into_iter()
        .map(|side| {
            let d = side_dir(dir, side);
            let data = DynDataset::read(BufReader::new(File::open(d.join(DYN_FILE))?))?;
            let chi = ChiDataset::read(BufReader::new(File::open(d.join(CHI_FILE))?))?;
            let dims = with_system(&plant, side, |sys| Ok(sys.dims()))?;
            if data.dims != dims || chi.dims != dims {
                return Err(Error::Dimension(format!("datasets in {} have dims {:?}, the plant needs {dims:?}", d.display(), data.dims)));
            }
            Ok(SideData { side, data, chi })
        })
        .collect()
}

pub struct TrainedUnit {
    pub side: Option<Side>,
    pub model: ObserverModel,
    pub report: TrainReport,
}

/// Trains every unit; `on_epoch` sees the unit, the epoch index and its mean losses.
pub fn train_all(cfg: &RunConfig, sets: &[SideData], mut on_epoch: impl FnMut(Option<Side>, usize, &LossComponents)) -> Result<Vec<TrainedUnit>> {
    let plant = cfg.plant_spec()?;
    sets.iter()
        .map(|s| {
            let opts = cfg.train_options(s.side);
            let (model, report) = with_system(&plant, s.side, |sys| train_with(sys, &s.data, &s.chi, &opts, |e, l| on_epoch(s.side, e, l)))?;
            Ok(TrainedUnit { side: s.side, model, report })
        })
        .collect()
}

/// Provenance lines written into every artifact.
pub fn provenance(cfg: &RunConfig) -> Vec<(String, String)> {
    vec![
        ("plant".into(), cfg.plant.kind.clone()),
        ("config_hash".into(), cfg.hash()),
        ("seed".into(), cfg.hyper.seed.to_string()),
        ("version".into(), env!("CARGO_PKG_VERSION").into()),
    ]
}

pub fn save_units(cfg: &RunConfig, dir: &Path, units: &[TrainedUnit]) -> Result<()> {
    let meta = provenance(cfg);
    for u in units {
        let d = side_dir(dir, u.side);
        archive::save_model(&d, &u.model, &meta)?;
        let prov: serde_json::Map<String, serde_json::Value> = meta.iter().map(|(k, v)| (k.clone(), v.clone().into())).collect();
        let mut json = serde_json::to_string_pretty(&serde_json::json!({ "provenance": prov, "report": &u.report }))?;
        json.push('\n');
        std::fs::write(d.join(REPORT_FILE), json)?;
    }
    Ok(())
}

/// Loads the model(s) for `cfg` from `dir`, checking them against the plant.
pub fn load_units(cfg: &RunConfig, dir: &Path) -> Result<Vec<(Option<Side>, ObserverModel)>> {
    sides(cfg)
        .into_iter()
        .map(|side| {
            let (model, _) = archive::load_model(&side_dir(dir, side))?;
            cfg.check_model(&model, side)?;
            Ok((side, model))
        })
        .collect()
}

pub struct SimOutcome {
    pub record: TrajectoryRecord,
    pub small_gain: Option<SmallGainReport>,
}

/// Runs the configured simulation with one model, or with the pair of local models.
pub fn simulate(cfg: &RunConfig, models: &[ObserverModel]) -> Result<SimOutcome> {
    let plant = cfg.plant_spec()?;
    let (x0, z0) = cfg.initial_states(&plant)?;
    let sim = cfg.sim_settings();
    let noise = cfg.noise();
    let mut out = match models {
        [m] if !cfg.is_distributed() => {
            cfg.check_model(m, None)?;
            SimOutcome { record: simulate_observer(&plant, m, &noise, &x0, &z0, &sim)?, small_gain: None }
        }
        [a, b] if cfg.is_distributed() => {
            cfg.check_model(a, Some(Side::A))?;
            cfg.check_model(b, Some(Side::B))?;
            let sg = small_gain_for(a, b)?;
            let run = simulate_distributed(&plant, a, b, &noise, &x0, &z0, &sim, Some(sg.clone()))?;
            SimOutcome { record: run.record, small_gain: Some(sg) }
        }
        _ => {
            return Err(Error::Config(format!("{} model(s) given for a {} run", models.len(), cfg.plant.kind)));
        }
    };
    let mut meta = provenance(cfg);
    meta[2].1 = cfg.sim.seed.to_string();
    meta.push(("x0".into(), format!("{x0:?}")));
    meta.append(&mut out.record.meta);
    out.record.meta = meta;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CFG: &str = r#"
[plant]
kind = "fhn_pair"
[model]
hidden = [6]
[hyper]
rho_u = 2.0
rho_y = 2.0
rho_z = 0.15
epochs = 1
batch = 50
[data]
n = 100
n_chi = 200
[sim]
t_final = 0.5
"#;

    #[test]
    fn pair_round_trip_through_directories() {
        let cfg = RunConfig::from_toml(CFG).unwrap();
        let sets = generate_data(&cfg).unwrap();
        assert_eq!(sets.len(), 2);
        assert_ne!(sets[0].data.x, sets[1].data.x);
        let dir = tempfile::tempdir().unwrap();
        write_data(&dir.path().join("data"), &sets).unwrap();
        let back = read_data(&cfg, &dir.path().join("data")).unwrap();
        assert_eq!(back[1].chi.y, sets[1].chi.y);
        let units = train_all(&cfg, &back, |_, _, _| {}).unwrap();
        save_units(&cfg, &dir.path().join("model"), &units).unwrap();
        let loaded = load_units(&cfg, &dir.path().join("model")).unwrap();
        assert_eq!(loaded[0].1, units[0].model);
        let models: Vec<_> = loaded.into_iter().map(|(_, m)| m).collect();
        let out = simulate(&cfg, &models).unwrap();
        assert!(out.small_gain.unwrap().pass);
        assert_eq!(out.record.z_names.len(), 4);
        assert!(simulate(&cfg, &models[..1]).is_err());
    }
}
