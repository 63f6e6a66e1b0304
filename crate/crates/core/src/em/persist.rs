//! Versioned JSON form of a fitted mixture.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{EmError, MixtureModel};
use crate::ppca::PpcaComponent;
use crate::scalar::Real;

pub const MODEL_FORMAT: &str = "flowmatch-mppca";
pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ComponentDocument {
    weight: f64,
    mean: Vec<f64>,
    /// Row-major d×q.
    loadings: Vec<Vec<f64>>,
    noise: f64,
}

/// On-disk model. `provenance` carries whatever the caller wants recorded
/// alongside (resolved configuration, seeds, fit report).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub schema_version: u32,
    pub columns: Vec<String>,
    pub latent_dim: usize,
    components: Vec<ComponentDocument>,
    pub loglik_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl ModelDocument {
    pub fn from_model<T: Real>(model: &MixtureModel<T>, provenance: Option<serde_json::Value>) -> Self {
        let components = model
            .components
            .iter()
            .map(|c| ComponentDocument {
                weight: c.weight.as_f64(),
                mean: c.mean.iter().map(|v| v.as_f64()).collect(),
                loadings: c.loadings.row_iter().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect(),
                noise: c.noise.as_f64(),
            })
            .collect();
        Self {
            format: MODEL_FORMAT.to_owned(),
            schema_version: MODEL_SCHEMA_VERSION,
            columns: model.columns.clone(),
            latent_dim: model.latent_dim,
            components,
            loglik_trace: model.trace.clone(),
            provenance,
        }
    }

    pub fn to_model<T: Real>(&self) -> Result<MixtureModel<T>, EmError> {
        self.check_schema()?;
        let d = self.columns.len();
        let q = self.latent_dim;
        let mut components = Vec::with_capacity(self.components.len());
        for (k, c) in self.components.iter().enumerate() {
            if c.mean.len() != d || c.loadings.len() != d || c.loadings.iter().any(|r| r.len() != q) {
                return Err(EmError::Document(format!("component {k} does not match d = {d}, q = {q}")));
            }
            let loadings = DMatrix::from_fn(d, q, |i, l| T::lit(c.loadings[i][l]));
            let mean = DVector::from_iterator(d, c.mean.iter().map(|&v| T::lit(v)));
            components.push(PpcaComponent::new(T::lit(c.weight), mean, loadings, T::lit(c.noise))?);
        }
        let mut model = MixtureModel::new(components, self.columns.clone())?;
        model.trace = self.loglik_trace.clone();
        Ok(model)
    }

    fn check_schema(&self) -> Result<(), EmError> {
        if self.format != MODEL_FORMAT || self.schema_version != MODEL_SCHEMA_VERSION {
            return Err(EmError::Schema {
                found: format!("{} v{}", self.format, self.schema_version),
                expected: format!("{MODEL_FORMAT} v{MODEL_SCHEMA_VERSION}"),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EmError> {
        let doc: Self = serde_json::from_str(text).map_err(|e| EmError::Document(e.to_string()))?;
        doc.check_schema()?;
        Ok(doc)
    }

    pub fn save(&self, path: &Path) -> Result<(), EmError> {
        fs::write(path, self.to_json()).map_err(|e| EmError::Document(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, EmError> {
        let text = fs::read_to_string(path).map_err(|e| EmError::Document(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MixtureModel<f64> {
        let c = |w: f64, m: f64| {
            PpcaComponent::new(w, DVector::from_element(3, m), DMatrix::from_row_slice(3, 1, &[1.0, 0.5, -0.25]), 0.3).unwrap()
        };
        let mut m = MixtureModel::new(vec![c(0.4, -1.0), c(0.6, 2.5)], vec!["a".into(), "b".into(), "c".into()]).unwrap();
        m.trace = vec![-10.0, -9.5];
        m
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = model();
        let doc = ModelDocument::from_model(&m, Some(serde_json::json!({"seed": 7})));
        let back = ModelDocument::from_json(&doc.to_json()).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.to_model::<f64>().unwrap(), m);
    }

    #[test]
    fn rejects_other_schema_versions() {
        let mut doc = ModelDocument::from_model(&model(), None);
        doc.schema_version = 2;
        let err = ModelDocument::from_json(&doc.to_json()).unwrap_err();
        assert!(matches!(err, EmError::Schema { .. }), "{err}");
    }

    #[test]
    fn rejects_ragged_loadings() {
        let mut doc = ModelDocument::from_model(&model(), None);
        doc.components[1].loadings[2].push(0.0);
        assert!(matches!(doc.to_model::<f64>(), Err(EmError::Document(_))));
    }
}
