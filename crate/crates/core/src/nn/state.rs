use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::Module;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named parameters and buffers of a model, keyed by dotted path.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateDict {
    pub tensors: BTreeMap<String, TensorData>,
}

impl StateDict {
    pub fn from_layer(layer: &dyn Module) -> Self {
        let mut tensors = BTreeMap::new();
        layer.visit_state("", &mut |name, t| {
            tensors.insert(
                name.to_string(),
                TensorData {
                    shape: t.shape().to_vec(),
                    data: t.iter().copied().collect(),
                },
            );
        });
        Self { tensors }
    }

    /// Loads every tensor into `layer`; names and shapes must match exactly.
    pub fn load_into(&self, layer: &mut dyn Module) -> Result<()> {
        let mut seen = 0usize;
        let mut err: Option<Error> = None;
        layer.visit_state_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(name) {
                None => err = Some(Error::Serde(format!("state dict is missing tensor `{name}`"))),
                Some(td) if td.shape != t.shape() => {
                    err = Some(Error::shape(format!("{name}{:?}", t.shape()), format!("{:?}", td.shape)))
                }
                Some(td) => {
                    *t = ArrayD::from_shape_vec(IxDyn(&td.shape), td.data.clone()).expect("shape checked");
                    seen += 1;
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != self.tensors.len() {
            return Err(Error::Serde(format!(
                "state dict has {} tensors but the model consumed {seen}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    /// Copies matching tensors into `layer`, skipping names that are absent or
    /// differently shaped. Returns how many tensors were loaded.
    pub fn load_matching(&self, layer: &mut dyn Module) -> usize {
        let mut loaded = 0;
        layer.visit_state_mut("", &mut |name, t| {
            if let Some(td) = self.tensors.get(name) {
                if td.shape == t.shape() {
                    *t = ArrayD::from_shape_vec(IxDyn(&td.shape), td.data.clone()).expect("shape checked");
                    loaded += 1;
                }
            }
        });
        loaded
    }
}
