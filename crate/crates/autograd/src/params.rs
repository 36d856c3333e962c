use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Role of a learnable tensor; decides whether weight regularization sees it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    /// Log-variance scalars of the uncertainty-weighted objective.
    Uncertainty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Named learnable tensors plus non-learnable buffers (batchnorm running
/// statistics). Iteration is always in name order, which also fixes the
/// on-disk layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Tensor>,
}

/// One entry of the flattened layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// `None` for buffers.
    pub kind: Option<ParamKind>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) {
        self.params.insert(name.into(), Param { kind, value });
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Parameters in name order, then buffers in name order.
    pub fn layout(&self) -> Vec<LayoutEntry> {
        let params = self.params.iter().map(|(n, p)| LayoutEntry {
            name: n.clone(),
            shape: p.value.shape().to_vec(),
            kind: Some(p.kind),
        });
        let buffers = self.buffers.iter().map(|(n, t)| LayoutEntry {
            name: n.clone(),
            shape: t.shape().to_vec(),
            kind: None,
        });
        params.chain(buffers).collect()
    }

    /// Every value in [`layout`](Self::layout) order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.params.values() {
            out.extend_from_slice(p.value.data());
        }
        for t in self.buffers.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn from_flat(layout: &[LayoutEntry], flat: &[f64]) -> Result<Self> {
        let mut store = Self::new();
        let mut off = 0;
        for e in layout {
            let n: usize = e.shape.iter().product();
            if off + n > flat.len() {
                return Err(shape_err("params", "flat buffer shorter than layout"));
            }
            let t = Tensor::new(e.shape.clone(), flat[off..off + n].to_vec())?;
            off += n;
            match e.kind {
                Some(kind) => store.insert(e.name.clone(), kind, t),
                None => store.insert_buffer(e.name.clone(), t),
            }
        }
        if off != flat.len() {
            return Err(shape_err("params", "flat buffer longer than layout"));
        }
        Ok(store)
    }
}

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;
