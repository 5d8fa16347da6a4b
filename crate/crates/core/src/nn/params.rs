use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use crate::autograd::{ParamId, Real, Tensor};
use crate::error::{Error, Result};

/// Which part of the network a parameter belongs to.
///
/// The partition follows the prefix of the parameter name: `f.` for the
/// feature extractor, `y.` for the label predictor and `d.` for the domain
/// discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Feature,
    Label,
    Domain,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        match name.split('.').next()? {
            "f" => Some(ParamGroup::Feature),
            "y" => Some(ParamGroup::Label),
            "d" => Some(ParamGroup::Domain),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Feature => "theta_f",
            ParamGroup::Label => "theta_y",
            ParamGroup::Domain => "theta_d",
        }
    }
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    group: ParamGroup,
    value: Tensor<T>,
}

/// Named trainable parameters plus non-trainable buffers.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Entry<T>>,
    index: BTreeMap<String, ParamId>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; the name prefix decides its group.
    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let group = ParamGroup::of(name)
            .unwrap_or_else(|| panic!("parameter {name} lacks a group prefix"));
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.params.push(Entry {
            name: name.to_string(),
            group,
            value,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffers.get_mut(name)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|e| e.value.len()).sum()
    }

    /// Converts every array to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |t: &Tensor<T>| t.mapv(|v| U::cst(v.as_f64()));
        ParamStore {
            params: self
                .params
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    group: e.group,
                    value: conv(&e.value),
                })
                .collect(),
            index: self.index.clone(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), conv(v))).collect(),
        }
    }

    /// Checks that `other` has the same names and shapes, reporting the first
    /// difference.
    pub fn check_compatible(&self, other: &ParamStore<T>) -> Result<()> {
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::invalid(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        if self.params.len() != other.params.len() {
            return Err(Error::invalid(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        Ok(())
    }

    /// First parameter or buffer holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.params
            .iter()
            .map(|e| (&e.name, &e.value))
            .chain(self.buffers.iter())
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n.clone())
    }
}

/// Exponential moving average of parameters and buffers:
/// `teacher ← alpha·teacher + (1 − alpha)·student`.
pub fn ema_update<T: Real>(
    student: &ParamStore<T>,
    teacher: &mut ParamStore<T>,
    alpha: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("ema alpha {alpha} outside [0, 1]")));
    }
    student.check_compatible(teacher)?;
    if student.buffers.len() != teacher.buffers.len() {
        return Err(Error::invalid("buffer count mismatch".to_string()));
    }
    let a = T::cst(alpha);
    let b = T::cst(1.0 - alpha);
    let blend = |t: &mut ArrayD<T>, s: &ArrayD<T>| {
        Zip::from(t).and(s).for_each(|t, &s| *t = a * *t + b * s);
    };
    for (t, s) in teacher.params.iter_mut().zip(&student.params) {
        blend(&mut t.value, &s.value);
    }
    for (name, s) in &student.buffers {
        let t = teacher
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("teacher lacks buffer {name}")))?;
        if t.shape() != s.shape() {
            return Err(Error::invalid(format!("buffer {name} shape mismatch")));
        }
        blend(t, s);
    }
    Ok(())
}
