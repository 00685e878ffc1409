//! Monte-Carlo dropout: sample a small classifier under dropout and split
//! its predictive uncertainty into entropy, aleatoric and epistemic parts.

use uqrank::bayes::{dense_forward, predictive_posterior, McDraw, McModel};
use uqrank::tensor::nn::glorot;
use uqrank::tensor::{ParamId, ParamStore, Tape};
use uqrank::uncertainty::predictive_uncertainty;
use uqrank::{Result, RngStream, Tensor};

struct Probe {
    store: ParamStore,
    w: ParamId,
    b: ParamId,
    p: f64,
}

impl McModel for Probe {
    type Input = Tensor;

    fn draw(&self, input: &Tensor, rng: RngStream) -> Result<McDraw> {
        let mut t = Tape::new(&self.store, rng, true);
        let x = t.constant(input.clone());
        let (w, b) = (t.p(self.w), t.p(self.b));
        let logits = dense_forward(&mut t, x, w, b, self.p)?;
        let probs = t.softmax(logits, 1)?;
        let probs = t.value(probs).data().to_vec();
        Ok(McDraw {
            variances: vec![0.05; probs.len()],
            probs,
        })
    }
}

fn main() -> Result<()> {
    let mut rng = RngStream::new(5);
    let input = rng.normal_tensor(&[1, 8]);
    for p in [0.0, 0.2, 0.5] {
        let mut store = ParamStore::new();
        let w = store.add("w", glorot(&mut rng.substream(1), &[8, 4], 8, 4));
        let b = store.add("b", Tensor::zeros(&[4]));
        let probe = Probe { store, w, b, p };
        let set = predictive_posterior(&probe, &input, 200, &RngStream::new(9))?;
        let r = predictive_uncertainty(&set)?;
        println!(
            "p = {p:.1}: mean probs {:?}  entropy {:.4}  epistemic {:.2e}  sigma2_p {:.4}",
            set.mean_probs()
                .iter()
                .map(|v| format!("{v:.3}"))
                .collect::<Vec<_>>(),
            r.entropy,
            r.epistemic_var,
            r.sigma_sq_p
        );
    }
    Ok(())
}
