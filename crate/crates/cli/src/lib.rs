//! Command-line front end: dataset generation, training, evaluation and
//! ablation sweeps.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod render;

/// Caps rayon's global pool at `STROKENET_THREADS` when it is set.
pub fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("STROKENET_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow::anyhow!("STROKENET_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}
