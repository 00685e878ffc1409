//! The distorted-logit loss family on one prediction: plain and Gaussian
//! cross-entropy, the variance equaliser and the agreement penalty.

use uqrank::tensor::{ParamStore, Tape};
use uqrank::uncertainty::{
    aleatoric_total, ce_loss, gce_loss, lrt_distort, mean_entropy, udl_loss, ve_loss,
    AleatoricTerms, LogitVariancePair,
};
use uqrank::{Result, RngStream, Tensor};

fn main() -> Result<()> {
    let store = ParamStore::new();
    let logits = vec![2.0, 0.5, -1.0, 0.0];
    for sigma2 in [0.0, 0.5, 2.0] {
        let mut t = Tape::new(&store, RngStream::new(4), true);
        let pair = LogitVariancePair {
            logits: t.constant(Tensor::vector(logits.clone())),
            variance: t.constant(Tensor::vector(vec![sigma2; logits.len()])),
        };
        let distorted = lrt_distort(&mut t, &pair, 500)?;
        let ce = ce_loss(&mut t, pair.logits, 0)?;
        let gce = gce_loss(&mut t, distorted, 0)?;
        let h = mean_entropy(&mut t, distorted)?;
        let ve = ve_loss(&mut t, pair.variance, h)?;
        let udl = udl_loss(&mut t, ce, gce, false)?;
        let lu = aleatoric_total(&mut t, gce, ve, udl, AleatoricTerms::ALL)?;
        println!(
            "sigma2 = {sigma2:.1}: CE {:.4}  GCE {:.4}  entropy {:.4}  VE {:.4}  UDL {:.4}  L_u {:.4}",
            t.scalar(ce),
            t.scalar(gce),
            t.scalar(h),
            t.scalar(ve),
            t.scalar(udl),
            t.scalar(lu)
        );
    }
    Ok(())
}
