mod eval;
mod gen_data;
mod rate;
mod train;

use std::fs;
use std::path::Path;

use anyhow::{bail, Result};

pub use eval::eval;
pub use gen_data::gen_data;
pub use rate::rate;
pub use train::train;

/// Refuses a non-empty directory unless `overwrite`, in which case it is
/// cleared.
fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !overwrite {
            bail!("{} is not empty (pass --overwrite to replace it)", dir.display());
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn report_verification(what: &Path, problems: &[String]) -> Result<()> {
    if problems.is_empty() {
        println!("verified {}", what.display());
        return Ok(());
    }
    for p in problems {
        eprintln!("  {p}");
    }
    bail!(
        "{} failed verification ({} problems)",
        what.display(),
        problems.len()
    )
}
