//! A miniature noise ablation: train once, then evaluate held-out splits
//! generated at three question-noise levels.

use uqrank::train::report::ablation_summary;
use uqrank::train::{ablate, AblationMode, TrainConfig};
use uqrank::Result;

fn main() -> Result<()> {
    let mut cfg = TrainConfig::default();
    for (k, v) in [
        ("epochs", "4"),
        ("lr", "0.002"),
        ("train_dialogs", "40"),
        ("val_dialogs", "20"),
        ("t_mc", "5"),
        ("k_latent", "10"),
        ("t_lrt", "5"),
        ("diversity_dialogs", "5"),
    ] {
        cfg.set(k, v)?;
    }
    let table = ablate(&cfg, AblationMode::Noise, &[1, 2])?;
    print!("{}", ablation_summary(&table));
    Ok(())
}
