use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use stochsyn_core::data::locate_mnist;
use stochsyn_core::BinarizedDataset;

use crate::error::CliResult;

/// Where a command gets its binarized dataset from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSource {
    pub data_dir: PathBuf,
    pub cache_dir: PathBuf,
    /// Seed of the train/validation split.
    pub split_seed: u64,
}

pub struct Loaded {
    pub data: BinarizedDataset,
    /// Files the dataset was read from.
    pub inputs: Vec<PathBuf>,
    pub cache_hit: bool,
}

impl DataSource {
    pub fn cache_path(&self) -> PathBuf {
        self.cache_dir.join(format!("binarized-s{}.bin", self.split_seed))
    }

    /// Loads the cached dataset, rebuilding it from the IDX files when the
    /// cache is missing, stale or `force` is set.
    pub fn load(&self, force: bool) -> CliResult<Loaded> {
        let cache = self.cache_path();
        if !force && cache.is_file() {
            match BinarizedDataset::load_cache(&cache) {
                Ok(data) if data.seed() == self.split_seed => {
                    log::debug!("dataset cache hit: {}", cache.display());
                    return Ok(Loaded {
                        data,
                        inputs: vec![cache],
                        cache_hit: true,
                    });
                }
                Ok(_) => log::warn!("{} was built with another split seed", cache.display()),
                Err(e) => log::warn!("ignoring unreadable dataset cache: {e}"),
            }
        }
        let inputs = locate_mnist(&self.data_dir).map_err(stochsyn_core::Error::from)?;
        let data = BinarizedDataset::load_mnist(&self.data_dir, self.split_seed)?;
        match std::fs::create_dir_all(&self.cache_dir)
            .map_err(|e| e.to_string())
            .and_then(|_| data.save_cache(&cache).map_err(|e| e.to_string()))
        {
            Ok(()) => log::info!("wrote dataset cache {}", cache.display()),
            Err(e) => log::warn!("could not write dataset cache: {e}"),
        }
        Ok(Loaded {
            data,
            inputs,
            cache_hit: false,
        })
    }
}
