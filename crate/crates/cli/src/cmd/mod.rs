pub mod corpus;
pub mod eval;
pub mod index;
pub mod pipeline;
pub mod train;

use std::path::Path;

use anyhow::{bail, Result};
use ethoclip::corpus::{read_manifest, ManifestRecord, Split};

use crate::SplitArg;

pub(crate) fn load_records(path: &Path, split: SplitArg) -> Result<Vec<ManifestRecord>> {
    let records: Vec<ManifestRecord> = read_manifest(path)?
        .into_iter()
        .filter(|r| match split {
            SplitArg::Train => r.split == Split::Train,
            SplitArg::Test => r.split == Split::Test,
            SplitArg::All => true,
        })
        .collect();
    if records.is_empty() {
        bail!("{} has no {split:?} records", path.display());
    }
    Ok(records)
}
