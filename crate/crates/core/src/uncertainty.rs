//! Heteroscedastic classifier heads, the distorted-logit loss family,
//! predictive-uncertainty bookkeeping and the uncertainty-driven attention
//! rewrite.

use crate::bayes::{dropout, McSampleSet};
use crate::error::{Error, Result};
use crate::fusion::{pool_cells, Fused};
use crate::tensor::nn::{glorot, Linear};
use crate::tensor::{ParamId, ParamStore, RngStream, Tape, Tensor, Var};

/// Shared two-layer trunk followed by a logit head and a variance head.
/// Both heads score candidates by a dot product with their embeddings.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierHeads {
    pub fc1: Linear,
    pub fc2: Linear,
    pub w_y: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub p: f64,
    pub input: usize,
    pub embed: usize,
}

/// Initial variance bias; `softplus(-4) ≈ 0.018` keeps the first updates
/// from being dominated by variance penalties.
pub const VARIANCE_BIAS_INIT: f64 = -4.0;

impl ClassifierHeads {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        embed: usize,
        p: f64,
        rng: &mut RngStream,
    ) -> Self {
        ClassifierHeads {
            fc1: Linear::new(store, &format!("{name}.fc1"), input, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, hidden, rng),
            w_y: store.add(
                format!("{name}.w_y"),
                glorot(rng, &[hidden, embed], hidden, embed),
            ),
            w_v: store.add(
                format!("{name}.w_v"),
                glorot(rng, &[hidden, embed], hidden, embed).map(|v| 0.1 * v),
            ),
            b_v: store.add(
                format!("{name}.b_v"),
                Tensor::vector(vec![VARIANCE_BIAS_INIT]),
            ),
            p,
            input,
            embed,
        }
    }
}

/// Candidate logits `[M]` and their predicted variance `[M]`.
#[derive(Debug, Clone, Copy)]
pub struct LogitVariancePair {
    pub logits: Var,
    pub variance: Var,
}

/// `f: [1, input]`, `cands: [M, embed]`.
pub fn classifier_heads(
    t: &mut Tape,
    heads: &ClassifierHeads,
    f: Var,
    cands: Var,
) -> Result<LogitVariancePair> {
    if t.shape(f) != [1, heads.input] {
        return Err(Error::shape(format!(
            "classifier expects [1, {}], got {:?}",
            heads.input,
            t.shape(f)
        )));
    }
    let cs = t.shape(cands).to_vec();
    if cs.len() != 2 || cs[1] != heads.embed {
        return Err(Error::shape(format!(
            "candidate embeddings must be [M, {}], got {cs:?}",
            heads.embed
        )));
    }
    let m = cs[0];
    let mut h = f;
    for fc in [heads.fc1, heads.fc2] {
        let z = fc.forward(t, h)?;
        let z = t.relu(z);
        h = dropout(t, z, heads.p)?.0;
    }
    let ct = t.transpose(cands)?;
    let wy = t.p(heads.w_y);
    let qy = t.matmul(h, wy)?;
    let logits = t.matmul(qy, ct)?;
    let logits = t.reshape(logits, &[m])?;
    let wv = t.p(heads.w_v);
    let qv = t.matmul(h, wv)?;
    let raw = t.matmul(qv, ct)?;
    let raw = t.reshape(raw, &[m])?;
    let bv = t.p(heads.b_v);
    let raw = t.add(raw, bv)?;
    Ok(LogitVariancePair {
        logits,
        variance: t.softplus(raw),
    })
}

/// `T` corrupted copies `ŷ_t = y + ε_t ⊙ sqrt(σ²)` as `[T, M]`, with
/// `ε` drawn from the tape's stream.
pub fn lrt_distort(t: &mut Tape, pair: &LogitVariancePair, samples: usize) -> Result<Var> {
    if samples == 0 {
        return Err(Error::Usage("logit distortion needs T >= 1".into()));
    }
    let m = t.value(pair.logits).numel();
    let eps = t.rng.normal_tensor(&[samples, m]);
    distort_with(t, pair, &eps)
}

/// [`lrt_distort`] with caller-supplied noise `eps: [T, M]`.
pub fn distort_with(t: &mut Tape, pair: &LogitVariancePair, eps: &Tensor) -> Result<Var> {
    let m = t.value(pair.logits).numel();
    if eps.rank() != 2 || eps.shape()[1] != m {
        return Err(Error::shape(format!(
            "noise must be [T, {m}], got {:?}",
            eps.shape()
        )));
    }
    let sd = if t.value(pair.variance).data().iter().all(|&v| v == 0.0) {
        // sqrt has no derivative at 0; a zero spread contributes nothing
        t.constant(Tensor::zeros(&[m]))
    } else {
        t.sqrt(pair.variance)?
    };
    let e = t.constant(eps.clone());
    let noise = t.broadcast(
        crate::tensor::Binary::Mul,
        e,
        sd,
        crate::tensor::Along::Rows,
    )?;
    t.broadcast(
        crate::tensor::Binary::Add,
        noise,
        pair.logits,
        crate::tensor::Along::Rows,
    )
}

fn check_class(t: &Tape, logits: Var, class: usize) -> Result<usize> {
    let m = *t.shape(logits).last().unwrap_or(&0);
    if class >= m {
        return Err(Error::Usage(format!(
            "class {class} out of range for {m} candidates"
        )));
    }
    Ok(m)
}

/// `−log softmax(y)[class]`.
pub fn ce_loss(t: &mut Tape, logits: Var, class: usize) -> Result<Var> {
    check_class(t, logits, class)?;
    let lp = t.log_softmax(logits, 0)?;
    let picked = t.gather(lp, &[class])?;
    let s = t.sum(picked);
    Ok(t.neg(s))
}

/// `−log( (1/T) Σ_t softmax(ŷ_t)[class] )` over `distorted: [T, M]`.
pub fn gce_loss(t: &mut Tape, distorted: Var, class: usize) -> Result<Var> {
    let m = check_class(t, distorted, class)?;
    let samples = t.shape(distorted)[0];
    let lp = t.log_softmax(distorted, 1)?;
    let idx: Vec<usize> = (0..samples).map(|s| s * m + class).collect();
    let picked = t.gather(lp, &idx)?;
    let lse = t.logsumexp(picked, 0)?;
    let avg = t.sub(lse, (samples as f64).ln())?;
    Ok(t.neg(avg))
}

/// Mean Shannon entropy of the rows of `softmax(distorted)`.
pub fn mean_entropy(t: &mut Tape, distorted: Var) -> Result<Var> {
    let p = t.softmax(distorted, 1)?;
    let lp = t.log_softmax(distorted, 1)?;
    let plp = t.mul(p, lp)?;
    let rows = t.shape(distorted)[0] as f64;
    let s = t.sum(plp);
    Ok(t.scale(s, -1.0 / rows))
}

/// `Σ_d relu(exp(σ²_d + H) − e)`.
pub fn ve_loss(t: &mut Tape, variance: Var, entropy: Var) -> Result<Var> {
    let w = t.add(variance, entropy)?;
    let ex = t.exp(w);
    let over = t.sub(ex, std::f64::consts::E)?;
    let r = t.relu(over);
    Ok(t.sum(r))
}

/// `exp((L_y − L_gce)²)`, or `exp(L_y − L_gce)²` when `literal`.
pub fn udl_loss(t: &mut Tape, l_y: Var, l_gce: Var, literal: bool) -> Result<Var> {
    let d = t.sub(l_y, l_gce)?;
    if literal {
        let d2 = t.scale(d, 2.0);
        Ok(t.exp(d2))
    } else {
        let sq = t.square(d);
        Ok(t.exp(sq))
    }
}

/// Which aleatoric terms enter `L_u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AleatoricTerms {
    pub gce: bool,
    pub ve: bool,
    pub udl: bool,
}

impl AleatoricTerms {
    pub const ALL: AleatoricTerms = AleatoricTerms {
        gce: true,
        ve: true,
        udl: true,
    };

    pub fn any(&self) -> bool {
        self.gce || self.ve || self.udl
    }
}

/// Sum of the enabled terms; a constant zero when none is enabled.
pub fn aleatoric_total(
    t: &mut Tape,
    gce: Var,
    ve: Var,
    udl: Var,
    terms: AleatoricTerms,
) -> Result<Var> {
    let parts: Vec<Var> = [(terms.gce, gce), (terms.ve, ve), (terms.udl, udl)]
        .into_iter()
        .filter_map(|(on, v)| on.then_some(v))
        .collect();
    let mut acc = match parts.first() {
        Some(&v) => v,
        None => return Ok(t.constant(Tensor::scalar(0.0))),
    };
    for &v in &parts[1..] {
        acc = t.add(acc, v)?;
    }
    Ok(acc)
}

/// Shannon entropy in nats; `0 · ln 0 = 0`.
pub fn predictive_entropy(probs: &[f64]) -> Result<f64> {
    if probs.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::Domain("probabilities must be non-negative".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!("probabilities sum to {total}")));
    }
    Ok(-probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyReport {
    /// mean per-sample entropy
    pub entropy: f64,
    /// mean predicted variance over samples and classes
    pub aleatoric_mean: f64,
    /// class-averaged variance of the probabilities across samples
    pub epistemic_var: f64,
    pub sigma_sq_p: f64,
}

pub fn predictive_uncertainty(samples: &McSampleSet) -> Result<UncertaintyReport> {
    if samples.is_empty() {
        return Err(Error::Usage("predictive uncertainty needs T >= 1".into()));
    }
    let n = samples.len() as f64;
    let m = samples.num_classes();
    let mut entropy = 0.0;
    for p in &samples.probs {
        entropy += predictive_entropy(p)? / n;
    }
    let aleatoric_mean = samples
        .variances
        .iter()
        .map(|v| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        })
        .sum::<f64>()
        / n;
    let mean = samples.mean_probs();
    let epistemic_var = if m == 0 {
        0.0
    } else {
        (0..m)
            .map(|c| {
                samples
                    .probs
                    .iter()
                    .map(|p| (p[c] - mean[c]).powi(2))
                    .sum::<f64>()
                    / n
            })
            .sum::<f64>()
            / m as f64
    };
    Ok(UncertaintyReport {
        entropy,
        aleatoric_mean,
        epistemic_var,
        sigma_sq_p: entropy + aleatoric_mean,
    })
}

/// Scales and switches of the attention rewrite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuamConfig {
    pub lambda: f64,
    pub gamma_neg: f64,
    pub renormalize: bool,
}

impl Default for RuamConfig {
    fn default() -> Self {
        RuamConfig {
            lambda: 1.0,
            gamma_neg: -2.0,
            renormalize: false,
        }
    }
}

/// Every intermediate of one rewrite; maps are `[u, v]`, features `[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RuamState {
    pub alpha: Tensor,
    pub grad_map: Tensor,
    pub alpha_prime: Tensor,
    pub alpha_dprime: Tensor,
    pub alpha_new: Tensor,
    pub f_prime: Tensor,
    pub f_dprime: Tensor,
    pub lambda: f64,
    pub gamma_neg: f64,
}

/// Reversed uncertainty gradient `−λ ∂L_u/∂grid`, averaged over channels.
/// Returns a `[u·v]` map; zero when `L_u` does not depend on the grid.
pub fn uncertainty_gradient_map(t: &Tape, fused: &Fused, l_u: Var, lambda: f64) -> Result<Tensor> {
    if lambda <= 0.0 {
        return Err(Error::Usage(format!(
            "reversal scale must be positive, got {lambda}"
        )));
    }
    let cells = fused.u * fused.v;
    let grads = t.backward_to(l_u, fused.grid)?;
    let mut map = vec![0.0; cells];
    if let Some(g) = grads.get(fused.grid) {
        let c = g.len() / cells;
        for (i, m) in map.iter_mut().enumerate() {
            *m = -lambda * (0..c).map(|ch| g[ch * cells + i]).sum::<f64>() / c as f64;
        }
    }
    Tensor::new(vec![cells], map)
}

/// Applies the rewrite for a given reversed-gradient map. The map is a
/// constant on the tape; gradients flow through `α` and the grid.
pub fn ruam_apply(
    t: &mut Tape,
    fused: &Fused,
    grad_map: &Tensor,
    cfg: &RuamConfig,
) -> Result<(Var, RuamState)> {
    if cfg.lambda <= 0.0 {
        return Err(Error::Usage(format!(
            "reversal scale must be positive, got {}",
            cfg.lambda
        )));
    }
    let cells = fused.u * fused.v;
    if grad_map.numel() != cells {
        return Err(Error::shape(format!(
            "gradient map has {} cells, grid has {cells}",
            grad_map.numel()
        )));
    }
    let g = t.constant(grad_map.clone().reshape(&[cells])?);
    let a1 = t.mul(g, fused.alpha)?;
    let pos = t.relu(a1);
    let na = t.neg(a1);
    let neg = t.relu(na);
    let neg = t.scale(neg, cfg.gamma_neg);
    let a2 = t.add(pos, neg)?;
    let boost = t.mul(a2, fused.alpha)?;
    let mut a_new = t.add(fused.alpha, boost)?;
    if cfg.renormalize {
        let s = t.sum(a_new);
        if t.scalar(s) > 0.0 {
            a_new = t.div(a_new, s)?;
        }
    }
    let f1 = pool_cells(t, fused.grid, a_new)?;
    let f2 = t.add(fused.f, f1)?;
    let uv = [fused.u, fused.v];
    let c = t.value(fused.f).numel();
    let state = RuamState {
        alpha: t.value(fused.alpha).clone().reshape(&uv)?,
        grad_map: grad_map.clone().reshape(&uv)?,
        alpha_prime: t.value(a1).clone().reshape(&uv)?,
        alpha_dprime: t.value(a2).clone().reshape(&uv)?,
        alpha_new: t.value(a_new).clone().reshape(&uv)?,
        f_prime: t.value(f1).clone().reshape(&[c])?,
        f_dprime: t.value(f2).clone().reshape(&[c])?,
        lambda: cfg.lambda,
        gamma_neg: cfg.gamma_neg,
    };
    Ok((f2, state))
}

/// Full rewrite: reversed gradient of `l_u` wrt the grid, then
/// [`ruam_apply`]. Returns the residual feature `f''` as `[1, c]`.
pub fn ruam_update(
    t: &mut Tape,
    fused: &Fused,
    l_u: Var,
    cfg: &RuamConfig,
) -> Result<(Var, RuamState)> {
    let map = uncertainty_gradient_map(t, fused, l_u, cfg.lambda)?;
    ruam_apply(t, fused, &map, cfg)
}

/// Writes an attention map as `u v` followed by one row per line.
pub fn write_attention_grid(map: &Tensor, w: &mut impl std::io::Write) -> std::io::Result<()> {
    let (u, v) = match map.shape() {
        [u, v] => (*u, *v),
        s => (1, s.iter().product()),
    };
    writeln!(w, "{u} {v}")?;
    for row in map.data().chunks(v.max(1)) {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
        writeln!(w, "{}", cells.join(" "))?;
    }
    Ok(())
}
