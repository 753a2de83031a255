//! Writes the synthetic fixture used by the CLI tests:
//! `src.vec`, `tgt.vec`, the true map `q_true.txt` and the gold `dict.txt`.
//!
//! ```text
//! cargo run --example make_fixture -- crates/core/tests/fixtures
//! ```

use std::path::PathBuf;

use bialign::synthetic::{generate, SyntheticConfig};
use bialign::OrthogonalMap;

fn main() -> bialign::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    std::fs::create_dir_all(&dir).map_err(|e| bialign::Error::Invalid(format!("{}: {e}", dir.display())))?;
    let pair = generate(&SyntheticConfig {
        n: 400,
        d: 16,
        clusters: 12,
        noise: 0.01,
        seed: 11,
        ..Default::default()
    })?;
    pair.x.write_vec(dir.join("src.vec"))?;
    pair.y.write_vec(dir.join("tgt.vec"))?;
    OrthogonalMap::new(pair.rotation.clone())?.save(dir.join("q_true.txt"))?;
    pair.dictionary().save(dir.join("dict.txt"))?;
    Ok(())
}
