use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;

use super::model::{ModelConfig, SedModel};
use super::params::ParamStore;
use crate::dsp::NormStats;
use crate::error::{Error, Result};
use crate::io::Archive;

pub const FORMAT: &str = "scmt-checkpoint";
pub const VERSION: u32 = 1;

/// Student and teacher weights, input statistics and run metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub student: SedModel<f32>,
    pub teacher: SedModel<f32>,
    pub norm: NormStats,
    pub step: u64,
    /// Free-form run facts (strategy, stage, seed, ...).
    pub info: BTreeMap<String, String>,
}

fn put_store(a: &mut Archive, prefix: &str, store: &ParamStore<f32>) {
    for (_, name, v) in store.iter() {
        a.insert(format!("{prefix}/{name}"), v.clone());
    }
    for (name, v) in store.buffers() {
        a.insert(format!("{prefix}.buf/{name}"), v.clone());
    }
}

/// Copies archived arrays into a template store, failing on the first
/// parameter whose name or shape does not line up.
fn take_store(a: &Archive, prefix: &str, template: &ParamStore<f32>) -> Result<ParamStore<f32>> {
    let mut store = template.clone();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let key = format!("{prefix}/{name}");
        let v = a
            .arrays
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing from checkpoint")))?;
        if v.shape() != store.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?} in checkpoint, model expects {:?}",
                v.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = v.clone();
    }
    let names: Vec<String> = template.buffers().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let key = format!("{prefix}.buf/{name}");
        let v = a
            .arrays
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("buffer {name} missing from checkpoint")))?;
        let slot = store.buffer_mut(&name).expect("template buffer");
        if v.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!("buffer {name} shape mismatch")));
        }
        *slot = v.clone();
    }
    let expected = template.len() + template.buffers().count();
    let found = a
        .arrays
        .keys()
        .filter(|k| k.starts_with(&format!("{prefix}/")) || k.starts_with(&format!("{prefix}.buf/")))
        .count();
    if found != expected {
        let extra = a
            .arrays
            .keys()
            .filter_map(|k| k.strip_prefix(&format!("{prefix}/")))
            .find(|n| template.id(n).is_none())
            .unwrap_or("?");
        return Err(Error::Checkpoint(format!(
            "checkpoint holds parameter {extra} unknown to the model"
        )));
    }
    Ok(store)
}

impl Checkpoint {
    pub fn new(student: SedModel<f32>, teacher: SedModel<f32>, norm: NormStats, step: u64) -> Self {
        Self {
            student,
            teacher,
            norm,
            step,
            info: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.student.config()
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.meta("format", FORMAT);
        a.meta("version", VERSION.to_string());
        a.meta(
            "model_config",
            serde_json::to_string(self.config()).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        a.meta("step", self.step.to_string());
        for (k, v) in &self.info {
            a.meta(&format!("info.{k}"), v.clone());
        }
        put_store(&mut a, "student", &self.student.store);
        put_store(&mut a, "teacher", &self.teacher.store);
        a.insert("norm/mean", Array1::from(self.norm.mean.clone()).into_dyn());
        a.insert("norm/std", Array1::from(self.norm.std.clone()).into_dyn());
        Ok(a)
    }

    /// Restores a checkpoint, building the model from its stored config.
    pub fn from_archive(a: &Archive) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(a.get_meta("model_config")?)
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        Self::from_archive_with(a, &cfg)
    }

    /// Restores a checkpoint into the given architecture, naming the first
    /// parameter that does not fit.
    pub fn from_archive_with(a: &Archive, config: &ModelConfig) -> Result<Self> {
        if a.get_meta("format")? != FORMAT {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version: u32 = a
            .get_meta("version")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad version".into()))?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let step = a
            .get_meta("step")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad step counter".into()))?;
        let template = SedModel::<f32>::new(config.clone(), 0)?;
        let student = SedModel::from_store(config.clone(), take_store(a, "student", &template.store)?)?;
        let teacher = SedModel::from_store(config.clone(), take_store(a, "teacher", &template.store)?)?;
        let vec = |k: &str| -> Result<Vec<f32>> {
            Ok(a
                .arrays
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("{k} missing")))?
                .iter()
                .copied()
                .collect())
        };
        let norm = NormStats {
            mean: vec("norm/mean")?,
            std: vec("norm/std")?,
        };
        let info = a
            .metadata
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("info.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Self {
            student,
            teacher,
            norm,
            step,
            info,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    pub fn load_with(path: &Path, config: &ModelConfig) -> Result<Self> {
        Self::from_archive_with(&Archive::load(path)?, config)
    }
}
