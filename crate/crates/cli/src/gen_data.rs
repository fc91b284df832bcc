use std::path::{Path, PathBuf};

use exms_core::datagen::{sample_counting_dataset, write_dataset, CountingConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct GenSummary {
    pub records: usize,
    pub dataset: PathBuf,
}

/// Samples a balanced counting dataset and writes it under `out_dir`.
pub fn cmd_gen_data(cfg: &CountingConfig, out_dir: &Path) -> Result<GenSummary, CliError> {
    let records = sample_counting_dataset(cfg)?;
    let dataset = write_dataset(out_dir, &records)?;
    Ok(GenSummary { records: records.len(), dataset })
}
