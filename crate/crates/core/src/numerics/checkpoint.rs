//! Self-describing parameter checkpoints: a configuration header plus one
//! record per parameter with name, shape and row-major 64-bit values. JSON
//! keeps the container readable and round-trips every f64 exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

use super::params::ParamSet;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Container<C> {
    config: C,
    params: Vec<ParamRecord>,
}

pub fn save_checkpoint<C: Serialize>(
    path: &Path,
    config: &C,
    params: &ParamSet,
) -> Result<()> {
    let container = Container {
        config,
        params: params
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                shape: p.shape.clone(),
                values: p.values.clone(),
            })
            .collect(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(BufWriter::new(file), &container)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint<C: DeserializeOwned>(path: &Path) -> Result<(C, Vec<ParamRecord>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let container: Container<C> = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok((container.config, container.params))
}
