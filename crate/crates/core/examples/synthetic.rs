//! Writes the synthetic cue-word corpus as dataset TSV.
//!
//!     cargo run --release -p bmgf-core --example synthetic -- data/synthetic.tsv [seed]

use std::path::PathBuf;

fn main() -> bmgf::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(args.next().unwrap_or_else(|| "synthetic.tsv".into()));
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| bmgf::BmgfError::Io { path: dir.into(), source: e })?;
    }
    let ds = bmgf::synthetic::standard(seed);
    ds.save(&path)?;
    println!("wrote {} ({})", path.display(), ds.describe_counts());
    Ok(())
}
