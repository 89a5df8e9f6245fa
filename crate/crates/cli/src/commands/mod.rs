pub mod bench;
pub mod gradcheck;
pub mod segment;
pub mod train;

use std::path::Path as FsPath;

use nsvt_core::heads::ClassEmbeddingSet;
use nsvt_core::heads::zero_shot::DEFAULT_TOP_K;
use nsvt_core::io::{load_weights, read_ppm_divisible, read_weights};
use nsvt_core::model::Model;
use nsvt_core::numerics::{ParamStore, Tensor};

use crate::config::RunConfig;
use crate::error::CliResult;

/// Image sides must be multiples of the total backbone stride.
pub const IMAGE_MULTIPLE: usize = 32;

pub struct Loaded {
    pub model: Model,
    pub store: ParamStore,
}

/// `fs::read` with the path in the error message.
pub fn read_file(path: &FsPath) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

pub fn read_text(path: &FsPath) -> CliResult<String> {
    String::from_utf8(read_file(path)?).map_err(|_| nsvt_core::Error::Format { offset: 0, msg: format!("{} is not UTF-8", path.display()) }.into())
}

/// Seeded initialization, then the weights file if one is configured.
pub fn build_model(cfg: &RunConfig) -> CliResult<Loaded> {
    let mcfg = cfg.model_config()?;
    let mut store = ParamStore::new(cfg.seed);
    let model = Model::new(&mut store, &mcfg)?;
    if let Some(p) = &cfg.weights {
        let file = read_weights(&read_file(p)?)?;
        load_weights(&mut store, &file)?;
    }
    Ok(Loaded { model, store })
}

/// `[h, w, 3]` in `[0, 1]`.
pub fn load_image(path: &FsPath) -> CliResult<(Tensor<f64>, usize, usize)> {
    let img = read_ppm_divisible(&read_file(path)?, IMAGE_MULTIPLE)?;
    Ok((img.to_tensor(), img.h, img.w))
}

pub fn load_embeddings(cfg: &RunConfig) -> CliResult<Option<ClassEmbeddingSet>> {
    match &cfg.embeddings {
        None => Ok(None),
        Some(p) => Ok(Some(ClassEmbeddingSet::from_json(&read_text(p)?, true, DEFAULT_TOP_K)?)),
    }
}

pub fn init_config(cfg: &RunConfig) -> String {
    cfg.to_json()
}
