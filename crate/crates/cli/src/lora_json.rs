//! LoRA factors as JSON. Values are written in shortest round-trip form, so
//! a save/load cycle is exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use shira_core::{DenseMatrix, LoraAdapter, ShiraError};

#[derive(Serialize, Deserialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LoraJson {
    target: String,
    rank: usize,
    alpha: f64,
    scaling_rule: String,
    a: MatrixJson,
    b: MatrixJson,
}

#[derive(Serialize, Deserialize)]
struct LoraFile {
    adapters: Vec<LoraJson>,
}

fn bad(message: impl Into<String>) -> ShiraError {
    ShiraError::Format {
        field: "lora",
        message: message.into(),
    }
}

impl From<&DenseMatrix> for MatrixJson {
    fn from(m: &DenseMatrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice().to_vec(),
        }
    }
}

pub fn save(adapters: &[LoraAdapter], path: &Path) -> Result<(), ShiraError> {
    let file = LoraFile {
        adapters: adapters
            .iter()
            .map(|a| LoraJson {
                target: a.target.clone(),
                rank: a.rank(),
                alpha: a.alpha,
                scaling_rule: a.scaling_rule.to_string(),
                a: (&a.a).into(),
                b: (&a.b).into(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| bad(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| ShiraError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Vec<LoraAdapter>, ShiraError> {
    let text = std::fs::read_to_string(path).map_err(|source| ShiraError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: LoraFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    file.adapters
        .into_iter()
        .map(|j| {
            let a = DenseMatrix::from_vec(j.a.rows, j.a.cols, j.a.data)?;
            let b = DenseMatrix::from_vec(j.b.rows, j.b.cols, j.b.data)?;
            let adapter = LoraAdapter::new(j.target, a, b, j.alpha, j.scaling_rule.parse()?)?;
            if adapter.rank() != j.rank {
                return Err(bad(format!("declared rank {} but factors have rank {}", j.rank, adapter.rank())));
            }
            Ok(adapter)
        })
        .collect()
}
