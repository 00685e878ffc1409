//! Rewrite a spatial attention map with the reversed gradient of the
//! aleatoric loss, and check the update algebra on the returned state.

use uqrank::fusion::{attend_fuse, Attention};
use uqrank::tensor::{ParamStore, Tape};
use uqrank::uncertainty::{
    aleatoric_total, ce_loss, classifier_heads, gce_loss, lrt_distort, mean_entropy, ruam_update,
    udl_loss, ve_loss, AleatoricTerms, ClassifierHeads, RuamConfig,
};
use uqrank::{Result, RngStream};

fn main() -> Result<()> {
    let (c, d, cells) = (6, 4, 9);
    let mut rng = RngStream::new(8);
    let mut store = ParamStore::new();
    let att = Attention::new(&mut store, "att", c, d, 5, &mut rng);
    let heads = ClassifierHeads::new(&mut store, "cls", c, 8, 3, 0.0, &mut rng);
    let (grid0, q0, h0, cands0) = (
        rng.normal_tensor(&[c, 3, 3]),
        rng.normal_tensor(&[1, d]),
        rng.normal_tensor(&[1, d]),
        rng.normal_tensor(&[5, 3]),
    );

    let mut t = Tape::new(&store, RngStream::new(1), false);
    // the region grid must be differentiable for the rewrite to see a gradient
    let (grid, q, h, cands) = (
        t.param(grid0),
        t.constant(q0),
        t.constant(h0),
        t.constant(cands0),
    );
    let fused = attend_fuse(&mut t, &att, grid, q, h)?;
    let pair = classifier_heads(&mut t, &heads, fused.f, cands)?;
    let distorted = lrt_distort(&mut t, &pair, 10)?;
    let ce = ce_loss(&mut t, pair.logits, 2)?;
    let gce = gce_loss(&mut t, distorted, 2)?;
    let ent = mean_entropy(&mut t, distorted)?;
    let ve = ve_loss(&mut t, pair.variance, ent)?;
    let udl = udl_loss(&mut t, ce, gce, false)?;
    let lu = aleatoric_total(&mut t, gce, ve, udl, AleatoricTerms::ALL)?;

    let (_, s) = ruam_update(&mut t, &fused, lu, &RuamConfig::default())?;
    let show = |name: &str, x: &uqrank::Tensor| {
        println!(
            "{name:>12}: {}",
            x.data()
                .iter()
                .map(|v| format!("{v:+.4}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
    };
    show("alpha", &s.alpha);
    show("grad map", &s.grad_map);
    show("alpha''", &s.alpha_dprime);
    show("alpha_new", &s.alpha_new);
    let worst = (0..cells)
        .map(|i| {
            (s.alpha_new.data()[i]
                - (s.alpha.data()[i] + s.alpha_dprime.data()[i] * s.alpha.data()[i]))
                .abs()
        })
        .fold(0.0, f64::max);
    println!("max |alpha_new - (alpha + alpha'' * alpha)| = {worst:e}");
    Ok(())
}
