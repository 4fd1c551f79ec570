use std::fs;
use std::path::{Path, PathBuf};

use mafnet::data::{generate_phantom, save_case, PhantomConfig};

use crate::error::{CliError, Result};

/// Refuses to write into a directory that already has entries.
pub fn ensure_empty_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(CliError::io(format!("reading {}", dir.display())))?;
        if entries.next().is_some() {
            return Err(CliError::ExistsNonEmpty(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))
}

/// Writes `cases` phantom cases in the BraTS layout; case `i` uses seed
/// `seed + i`.
pub fn cmd_phantom(out: &Path, cases: usize, seed: u64, dims: [usize; 3]) -> Result<Vec<PathBuf>> {
    if cases == 0 {
        return Err(CliError::Usage("--cases must be at least 1".into()));
    }
    ensure_empty_dir(out)?;
    let cfg = PhantomConfig::new(dims);
    (0..cases as u64)
        .map(|i| {
            let case = generate_phantom(seed + i, &cfg)?;
            Ok(save_case(&case, out)?)
        })
        .collect()
}
