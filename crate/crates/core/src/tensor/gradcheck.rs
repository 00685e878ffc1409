use super::params::{ParamStore, Tape};
use super::{Graph, RngStream, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const STEP: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok(g.scalar(out))
}

/// Largest relative disagreement between reverse-mode gradients and central
/// differences over every entry of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.tensor(&g, *v);
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + STEP;
            let fp = eval(&f, &probe)?;
            probe[i].data_mut()[j] = x0 - STEP;
            let fm = eval(&f, &probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Same check over every parameter of a store. `f` is evaluated on a fresh
/// tape seeded with `seed` each time, so stochastic layers draw identical
/// masks across perturbations.
pub fn check_param_gradients<F>(store: &ParamStore, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let run = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s, RngStream::new(seed), true);
        let out = f(&mut tape)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Usage(
                "gradient check needs a scalar function".into(),
            ));
        }
        Ok(tape.scalar(out))
    };

    let analytic = {
        let mut tape = Tape::new(store, RngStream::new(seed), true);
        let out = f(&mut tape)?;
        tape.param_grads(out)?
    };

    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for id in store.ids() {
        let a = analytic.get(id);
        for j in 0..store.get(id).numel() {
            let x0 = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = x0 + STEP;
            let fp = run(&probe)?;
            probe.get_mut(id).data_mut()[j] = x0 - STEP;
            let fm = run(&probe)?;
            probe.get_mut(id).data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * STEP);
            let av = a.map_or(0.0, |g| g[j]);
            worst = worst.max(rel_err(av, numeric));
        }
    }
    Ok(worst)
}
