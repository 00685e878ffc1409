//! Train a small model on the synthetic task, write the run artifacts and
//! render the loss curves to SVG.

use uqrank::train::plot::plot_dir;
use uqrank::train::report::{summary_text, write_experiment};
use uqrank::train::{run_experiment, TrainConfig};
use uqrank::Result;

fn main() -> Result<()> {
    let mut cfg = TrainConfig::default();
    for (k, v) in [
        ("epochs", "8"),
        ("lr", "0.002"),
        ("train_dialogs", "60"),
        ("val_dialogs", "20"),
        ("t_mc", "5"),
        ("k_latent", "10"),
        ("t_lrt", "5"),
        ("diversity_dialogs", "10"),
    ] {
        cfg.set(k, v)?;
    }
    let result = run_experiment(&cfg)?;
    for e in &result.epochs {
        println!(
            "epoch {:>2}: total {:.4}  ce {:.4}  kl {:.4}  variance {:.3e}",
            e.epoch, e.total, e.ce, e.kl, e.variance
        );
    }
    let out = std::env::temp_dir().join("uqrank-train-example");
    write_experiment(&out, &result)?;
    for f in plot_dir(&out)? {
        println!("wrote {}", f.display());
    }
    print!("{}", summary_text(&result));
    Ok(())
}
