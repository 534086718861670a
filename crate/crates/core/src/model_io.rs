//! Loading and saving any model by its schema tag.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dmkdc::DmkdcModel;
use crate::dmkde::DmkdeModel;
use crate::error::{Error, Result};
use crate::qmc::QmcModel;
use crate::qmr::{QmrModel, QmrPrediction};
use crate::{dmkdc, dmkde, qmc, qmr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dmkde,
    Dmkdc,
    Qmc,
    Qmr,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dmkde => "dmkde",
            ModelKind::Dmkdc => "dmkdc",
            ModelKind::Qmc => "qmc",
            ModelKind::Qmr => "qmr",
        }
    }

    pub fn schema(self) -> &'static str {
        match self {
            ModelKind::Dmkde => dmkde::SCHEMA,
            ModelKind::Dmkdc => dmkdc::SCHEMA,
            ModelKind::Qmc => qmc::SCHEMA,
            ModelKind::Qmr => qmr::SCHEMA,
        }
    }

    /// Whether fitting needs a label column.
    pub fn supervised(self) -> bool {
        self != ModelKind::Dmkde
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dmkde" => Ok(ModelKind::Dmkde),
            "dmkdc" => Ok(ModelKind::Dmkdc),
            "qmc" => Ok(ModelKind::Qmc),
            "qmr" => Ok(ModelKind::Qmr),
            other => Err(Error::invalid(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Dmkde(DmkdeModel),
    Dmkdc(DmkdcModel),
    Qmc(QmcModel),
    Qmr(QmrModel),
}

/// Per-row output of [`AnyModel::predict`].
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Density(Array1<f64>),
    Classes { labels: Vec<usize>, probabilities: Array2<f64> },
    Regression(Vec<QmrPrediction>),
}

#[derive(Deserialize)]
struct SchemaTag {
    schema: String,
}

impl AnyModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Dmkde(_) => ModelKind::Dmkde,
            AnyModel::Dmkdc(_) => ModelKind::Dmkdc,
            AnyModel::Qmc(_) => ModelKind::Qmc,
            AnyModel::Qmr(_) => ModelKind::Qmr,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        match self {
            AnyModel::Dmkde(m) => m.to_json(),
            AnyModel::Dmkdc(m) => m.to_json(),
            AnyModel::Qmc(m) => m.to_json(),
            AnyModel::Qmr(m) => m.to_json(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let tag: SchemaTag = serde_json::from_str(s)?;
        match tag.schema.as_str() {
            dmkde::SCHEMA => Ok(AnyModel::Dmkde(DmkdeModel::from_json(s)?)),
            dmkdc::SCHEMA => Ok(AnyModel::Dmkdc(DmkdcModel::from_json(s)?)),
            qmc::SCHEMA => Ok(AnyModel::Qmc(QmcModel::from_json(s)?)),
            qmr::SCHEMA => Ok(AnyModel::Qmr(QmrModel::from_json(s)?)),
            other => Err(Error::Data(format!("unknown model schema {other:?}"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Input dimension expected by the model.
    pub fn dim_in(&self) -> usize {
        match self {
            AnyModel::Dmkde(m) => m.dim_in(),
            AnyModel::Dmkdc(m) => m.rff().dim_in(),
            AnyModel::Qmc(m) => m.input_map().dim_in(),
            AnyModel::Qmr(m) => m.base().input_map().dim_in(),
        }
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Predictions> {
        Ok(match self {
            AnyModel::Dmkde(m) => Predictions::Density(m.density_batch(x)?),
            AnyModel::Dmkdc(m) => {
                let probabilities = m.posterior_batch(x)?;
                let labels = probabilities.rows().into_iter().map(dmkdc::argmax).collect();
                Predictions::Classes { labels, probabilities }
            }
            AnyModel::Qmc(m) => {
                let probabilities = m.predict_batch(x)?;
                let labels = probabilities.rows().into_iter().map(dmkdc::argmax).collect();
                Predictions::Classes { labels, probabilities }
            }
            AnyModel::Qmr(m) => Predictions::Regression(m.predict_batch(x)?),
        })
    }
}
