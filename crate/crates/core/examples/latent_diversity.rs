//! Sample Gaussian answer latents, score their pairwise diversity, and
//! measure the spread of the sample matrix by its singular values.

use uqrank::decoder::{diversity_loss, kl_loss, project_latent, sample_latents, LatentHead};
use uqrank::metrics::{singular_values, svd_diversity};
use uqrank::tensor::{ParamStore, Tape};
use uqrank::{Result, RngStream};

fn main() -> Result<()> {
    let mut rng = RngStream::new(3);
    let mut store = ParamStore::new();
    let head = LatentHead::new(&mut store, "lat", 12, 6, &mut rng);
    let ctx = rng.normal_tensor(&[1, 12]);

    for k in [2, 10, 50] {
        let mut t = Tape::new(&store, RngStream::new(k as u64), true);
        let f = t.constant(ctx.clone());
        let g = project_latent(&mut t, &head, f)?;
        let kl = kl_loss(&mut t, &g)?;
        let s = sample_latents(&mut t, &g, k)?;
        let div = diversity_loss(&mut t, s.z, Some(s.center))?;
        let z = t.value(s.z).clone();
        let sv = singular_values(&z)?;
        println!(
            "k = {k:>2}: KL {:.4}  diversity loss {:+.4} (floor {:+.4})  sigma_o {:.3}  top singular value {:.3}",
            t.scalar(kl),
            t.scalar(div),
            -1.0 / (k as f64 - 1.0),
            svd_diversity(&z)?,
            sv[0]
        );
    }
    Ok(())
}
