//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use uqrank::bayes::{predictive_posterior, DropoutSchedule, McDraw, McModel};
use uqrank::data::{build_vocab, encode_dialogs, gen_synthetic, DialogRecord, Limits};
use uqrank::fusion::{attend_fuse, pool_cells, Attention, Fused};
use uqrank::metrics::{ndcg, retrieval_metrics, singular_values, svd_diversity, RankedList};
use uqrank::tensor::nn::lstm_cell;
use uqrank::tensor::{check_gradients, check_param_gradients, Graph, ParamStore, Tape, Var, STEP};
use uqrank::train::model::PassMode;
use uqrank::train::{Model, TrainConfig};
use uqrank::uncertainty::{
    ce_loss, gce_loss, lrt_distort, ruam_apply, ruam_update, LogitVariancePair, RuamConfig,
};
use uqrank::{Result, RngStream, Tensor};

/// One named gradient check and the tolerance it must meet.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub err: f64,
    pub tol: f64,
}

impl Check {
    pub fn ok(&self) -> bool {
        self.err.is_finite() && self.err < self.tol
    }
}

/// Dot product of `out` with a fixed random tensor, so every output entry
/// reaches the scalar with a distinct weight.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = RngStream::new(seed).normal_tensor(&shape);
    let w = g.constant(w);
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

fn normal(seed: u64, shape: &[usize]) -> Tensor {
    RngStream::new(seed).normal_tensor(shape)
}

fn positive(seed: u64, shape: &[usize]) -> Tensor {
    normal(seed, shape).map(|x| 0.5 + x.abs())
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let m = normal(1, &[3, 4]);
    let v4 = normal(2, &[4]);
    let v3 = normal(3, &[3]);
    vec![
        ("exp", |g, v| Ok(g.exp(v[0])), vec![m.clone()]),
        ("log", |g, v| g.log(v[0]), vec![positive(4, &[3, 4])]),
        ("tanh", |g, v| Ok(g.tanh(v[0])), vec![m.clone()]),
        ("relu", |g, v| Ok(g.relu(v[0])), vec![m.clone()]),
        ("neg", |g, v| Ok(g.neg(v[0])), vec![m.clone()]),
        ("sigmoid", |g, v| Ok(g.sigmoid(v[0])), vec![m.clone()]),
        ("softplus", |g, v| Ok(g.softplus(v[0])), vec![m.clone()]),
        ("sqrt", |g, v| g.sqrt(v[0]), vec![positive(5, &[3, 4])]),
        ("square", |g, v| Ok(g.square(v[0])), vec![m.clone()]),
        (
            "clamp_min",
            |g, v| Ok(g.clamp_min(v[0], 0.1)),
            vec![m.clone()],
        ),
        ("scale", |g, v| Ok(g.scale(v[0], -2.5)), vec![m.clone()]),
        (
            "add",
            |g, v| g.add(v[0], v[1]),
            vec![m.clone(), normal(6, &[3, 4])],
        ),
        (
            "sub",
            |g, v| g.sub(v[0], v[1]),
            vec![m.clone(), normal(7, &[3, 4])],
        ),
        (
            "mul",
            |g, v| g.mul(v[0], v[1]),
            vec![m.clone(), normal(8, &[3, 4])],
        ),
        (
            "div",
            |g, v| g.div(v[0], v[1]),
            vec![m.clone(), positive(9, &[3, 4])],
        ),
        (
            "mul_scalar_var",
            |g, v| g.mul(v[0], v[1]),
            vec![m.clone(), Tensor::vector(vec![1.7])],
        ),
        ("div_scalar", |g, v| g.div(v[0], 3.0), vec![m.clone()]),
        (
            "scalar_minus",
            |g, v| g.binary_scalar(uqrank::tensor::Binary::Sub, v[0], 2.0, true),
            vec![m.clone()],
        ),
        (
            "matmul",
            |g, v| g.matmul(v[0], v[1]),
            vec![m.clone(), normal(10, &[4, 2])],
        ),
        ("transpose", |g, v| g.transpose(v[0]), vec![m.clone()]),
        (
            "broadcast_add_rows",
            |g, v| {
                g.broadcast(
                    uqrank::tensor::Binary::Add,
                    v[0],
                    v[1],
                    uqrank::tensor::Along::Rows,
                )
            },
            vec![m.clone(), v4.clone()],
        ),
        (
            "broadcast_mul_cols",
            |g, v| {
                g.broadcast(
                    uqrank::tensor::Binary::Mul,
                    v[0],
                    v[1],
                    uqrank::tensor::Along::Cols,
                )
            },
            vec![m.clone(), v3.clone()],
        ),
        ("sum_all", |g, v| Ok(g.sum(v[0])), vec![m.clone()]),
        ("mean_all", |g, v| Ok(g.mean(v[0])), vec![m.clone()]),
        (
            "sum_axis",
            |g, v| g.reduce(uqrank::tensor::Reduction::Sum, v[0], Some(1)),
            vec![m.clone()],
        ),
        (
            "mean_axis",
            |g, v| g.reduce(uqrank::tensor::Reduction::Mean, v[0], Some(0)),
            vec![m.clone()],
        ),
        ("softmax", |g, v| g.softmax(v[0], 1), vec![m.clone()]),
        (
            "log_softmax",
            |g, v| g.log_softmax(v[0], 0),
            vec![m.clone()],
        ),
        ("logsumexp", |g, v| g.logsumexp(v[0], 1), vec![m.clone()]),
        ("reshape", |g, v| g.reshape(v[0], &[2, 6]), vec![m.clone()]),
        (
            "concat",
            |g, v| g.concat(&[v[0], v[1]], 1),
            vec![m.clone(), normal(11, &[3, 2])],
        ),
        ("slice", |g, v| g.slice(v[0], 1, 1, 2), vec![m.clone()]),
        (
            "gather",
            |g, v| g.gather(v[0], &[0, 5, 5, 11]),
            vec![m.clone()],
        ),
        (
            "embedding",
            |g, v| g.embedding(v[0], &[2, 0, 2]),
            vec![m.clone()],
        ),
        (
            "conv2d",
            |g, v| g.conv2d(v[0], v[1], 1, 1),
            vec![normal(12, &[2, 5, 5]), normal(13, &[3, 2, 3, 3])],
        ),
        (
            "conv2d_strided",
            |g, v| g.conv2d(v[0], v[1], 2, 0),
            vec![normal(14, &[2, 5, 5]), normal(15, &[2, 2, 3, 3])],
        ),
        (
            "max_pool2d",
            |g, v| g.max_pool2d(v[0], 2),
            vec![normal(16, &[2, 4, 4])],
        ),
        (
            "avg_pool2d",
            |g, v| g.avg_pool2d(v[0], 2),
            vec![normal(17, &[2, 4, 4])],
        ),
        (
            "lstm_cell",
            |g, v| {
                let (h, c) = lstm_cell(g, v[0], v[1], v[2], v[3], v[4])?;
                let hc = g.concat(&[h, c], 1)?;
                Ok(hc)
            },
            vec![
                normal(18, &[2, 3]),
                normal(19, &[2, 2]),
                normal(20, &[2, 2]),
                normal(21, &[5, 8]),
                normal(22, &[8]),
            ],
        ),
    ]
}

/// Gradient reversal is the identity going forward, so its backward pass is
/// compared against `-lambda` times the central difference.
fn grad_reverse_check() -> Result<f64> {
    const LAMBDA: f64 = 0.7;
    let x0 = normal(23, &[3, 4]);
    let f = |g: &mut Graph, x: Var| -> Result<Var> {
        let y = g.grad_reverse(x, LAMBDA)?;
        project(g, y, 24)
    };
    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let out = f(&mut g, x)?;
    let analytic = g.backward(out)?.tensor(&g, x);
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.param(t);
        let out = f(&mut g, x)?;
        Ok(g.scalar(out))
    };
    let mut worst = 0.0f64;
    for j in 0..x0.numel() {
        let mut hi = x0.clone();
        hi.data_mut()[j] += STEP;
        let mut lo = x0.clone();
        lo.data_mut()[j] -= STEP;
        let numeric = -LAMBDA * (eval(hi)? - eval(lo)?) / (2.0 * STEP);
        let a = analytic.data()[j];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
    }
    Ok(worst)
}

/// Finite-difference checks for every differentiable tensor op.
pub fn op_checks() -> Result<Vec<Check>> {
    let reversed = Check {
        name: "grad_reverse",
        err: grad_reverse_check()?,
        tol: 1e-4,
    };
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, f, inputs))| {
            let err = check_gradients(
                |g, v| {
                    let out = f(g, v)?;
                    project(g, out, 100 + i as u64)
                },
                &inputs,
            )?;
            Ok(Check {
                name,
                err,
                tol: 1e-4,
            })
        })
        .chain(std::iter::once(Ok(reversed)))
        .collect()
}

/// A model small enough that finite differences over all of its weights
/// take a few seconds.
pub fn micro_cfg() -> TrainConfig {
    TrainConfig {
        train_dialogs: 2,
        val_dialogs: 1,
        rounds: 2,
        candidates: 4,
        channels: vec![2, 2, 2],
        embed_dim: 3,
        text_dim: 3,
        att_hidden: 3,
        cls_hidden: 4,
        z_dim: 3,
        k_latent: 4,
        t_lrt: 3,
        min_count: 1,
        ..Default::default()
    }
}

pub fn micro_model(cfg: &TrainConfig) -> (Model, Vec<DialogRecord>) {
    let raw = gen_synthetic(&cfg.train_spec()).expect("synthetic data");
    let vocab = build_vocab(&raw, cfg.min_count);
    let recs = encode_dialogs(&raw, &vocab, Limits::default());
    (Model::new(cfg.clone(), vocab), recs)
}

/// Gradient check of the summed training cost of one dialog over every
/// model weight. The attention rewrite map is computed from a gradient and
/// enters the tape as a constant, so finite differences would see a
/// dependence the tape deliberately cuts; the rewrite is off here and its
/// differentiable path is checked separately with a fixed map. The entropy
/// inside the variance equalizer is likewise left attached.
pub fn total_cost_check() -> Result<f64> {
    let mut cfg = micro_cfg();
    cfg.ruam_enabled = false;
    cfg.ve_entropy_grad = true;
    let (model, recs) = micro_model(&cfg);
    let rec = &recs[0];
    let noise = RngStream::new(31);
    check_param_gradients(&model.store, 17, |t: &mut Tape| {
        let pass = model.forward_dialog(t, rec, PassMode::Train, &noise)?;
        Ok(pass.cost.expect("training pass has a cost"))
    })
}

/// Gradient checks of the composite blocks plus the whole training cost.
pub fn composite_checks() -> Result<Vec<Check>> {
    let mut rng = RngStream::new(41);
    let mut s = ParamStore::new();
    let att = Attention::new(&mut s, "att", 3, 2, 4, &mut rng);
    let grid = s.add("grid", rng.normal_tensor(&[3, 2, 2]));
    let q0 = rng.normal_tensor(&[1, 2]);
    let h0 = rng.normal_tensor(&[1, 2]);
    let fusion = check_param_gradients(&s, 0, |t| {
        let g = t.p(grid);
        let q = t.constant(q0.clone());
        let h = t.constant(h0.clone());
        let out = attend_fuse(t, &att, g, q, h)?;
        let gf = project(t, out.f, 7)?;
        let ga = project(t, out.alpha, 9)?;
        t.add(gf, ga)
    })?;

    let map = Tensor::vector(vec![0.8, -0.3, 0.2, -1.1]);
    let ruam = check_param_gradients(&s, 0, |t| {
        let g = t.p(grid);
        let q = t.constant(q0.clone());
        let h = t.constant(h0.clone());
        let fz = attend_fuse(t, &att, g, q, h)?;
        let (f2, _) = ruam_apply(t, &fz, &map, &RuamConfig::default())?;
        project(t, f2, 8)
    })?;

    let mut s2 = ParamStore::new();
    let y = s2.add("logits", rng.normal_tensor(&[5]));
    let raw = s2.add("raw_var", rng.normal_tensor(&[5]));
    let lrt = check_param_gradients(&s2, 3, |t| {
        let logits = t.p(y);
        let r = t.p(raw);
        let variance = t.softplus(r);
        let d = lrt_distort(t, &LogitVariancePair { logits, variance }, 8)?;
        gce_loss(t, d, 2)
    })?;

    Ok(vec![
        Check {
            name: "attention fusion",
            err: fusion,
            tol: 1e-4,
        },
        Check {
            name: "LRT + GCE",
            err: lrt,
            tol: 1e-4,
        },
        Check {
            name: "attention rewrite path",
            err: ruam,
            tol: 1e-4,
        },
        Check {
            name: "total cost (micro model)",
            err: total_cost_check()?,
            tol: 1e-3,
        },
    ])
}

// ---- oracles ----------------------------------------------------------

/// Random candidate list with occasional tied scores and graded relevance
/// that always includes at least one relevant candidate.
pub fn random_list(rng: &mut RngStream) -> RankedList {
    let n = 2 + rng.below(30);
    let scores: Vec<f64> = (0..n)
        .map(|_| {
            if rng.uniform() < 0.2 {
                1.0
            } else {
                (rng.normal() * 4.0).round() / 2.0
            }
        })
        .collect();
    let gt = rng.below(n);
    let mut rel: Vec<f64> = (0..n)
        .map(|_| {
            if rng.uniform() < 0.5 {
                0.0
            } else {
                rng.below(5) as f64 / 4.0
            }
        })
        .collect();
    rel[gt] = 1.0;
    RankedList::new(scores, gt).with_relevance(rel)
}

/// Candidate order by repeated selection of the best remaining score, the
/// lower index winning ties.
pub fn oracle_order(scores: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            if scores[left[k]] > scores[left[best]] {
                best = k;
            }
        }
        out.push(left.remove(best));
    }
    out
}

pub fn oracle_rank(list: &RankedList) -> usize {
    oracle_order(&list.scores)
        .iter()
        .position(|&i| i == list.gt_index)
        .unwrap()
        + 1
}

pub fn oracle_ndcg(list: &RankedList) -> f64 {
    let rel = list.relevance.as_ref().unwrap();
    let mut got = 0.0;
    for (pos, &i) in oracle_order(&list.scores).iter().enumerate() {
        got += rel[i] / ((pos + 2) as f64).log2();
    }
    let mut ideal = rel.clone();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut best = 0.0;
    for (pos, r) in ideal.iter().enumerate() {
        best += r / ((pos + 2) as f64).log2();
    }
    got / best
}

/// Number of disagreements between the library metrics and the oracle over
/// `count` random lists, checked list by list and in aggregate.
pub fn metrics_mismatches(count: usize, seed: u64) -> Result<usize> {
    let mut rng = RngStream::new(seed);
    let lists: Vec<RankedList> = (0..count).map(|_| random_list(&mut rng)).collect();
    let ks = [1, 5, 10];
    let mut bad = 0;
    for l in &lists {
        let m = retrieval_metrics(std::slice::from_ref(l), &ks)?;
        let r = oracle_rank(l);
        bad += usize::from(m.mean_rank != r as f64);
        bad += usize::from(m.mrr != 1.0 / r as f64);
        for &k in &ks {
            bad += usize::from(m.recall_at(k) != Some(if r <= k { 1.0 } else { 0.0 }));
        }
        bad += usize::from(ndcg(l)? != oracle_ndcg(l));
    }
    let m = retrieval_metrics(&lists, &ks)?;
    let ranks: Vec<usize> = lists.iter().map(oracle_rank).collect();
    let n = ranks.len() as f64;
    bad += usize::from(m.mean_rank != ranks.iter().sum::<usize>() as f64 / n);
    bad += usize::from(m.mrr != ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n);
    for &k in &ks {
        let want = ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        bad += usize::from(m.recall_at(k) != Some(want));
    }
    Ok(bad)
}

/// Singular values as square roots of the eigenvalues of `AᵀA` or `AAᵀ`,
/// whichever is smaller, in descending order.
pub fn eigen_singular_values(a: &Tensor) -> Vec<f64> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mat = nalgebra::DMatrix::from_row_slice(m, n, a.data());
    let gram = if m >= n {
        mat.transpose() * &mat
    } else {
        &mat * mat.transpose()
    };
    let mut s: Vec<f64> = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|&e| e.max(0.0).sqrt())
        .collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

/// Largest absolute gap between the library and the eigenvalue oracle over
/// `count` random matrices, per singular value and for their sum.
pub fn svd_oracle_gap(count: usize, seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let (m, n) = (1 + rng.below(12), 1 + rng.below(12));
        let a = rng.normal_tensor(&[m, n]);
        let got = singular_values(&a)?;
        let want = eigen_singular_values(&a);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
        let total: f64 = want.iter().sum();
        worst = worst.max((svd_diversity(&a)? - total).abs());
    }
    Ok(worst)
}

/// Largest `|GCE − CE|` over `count` random logit vectors with zero
/// predicted variance.
pub fn gce_ce_gap(count: usize, seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let store = ParamStore::new();
    let mut worst = 0.0f64;
    for _ in 0..count {
        let m = 2 + rng.below(40);
        let scale = 0.1 + 10.0 * rng.uniform();
        let y = rng.normal_tensor(&[m]).map(|x| x * scale);
        let class = rng.below(m);
        let samples = 1 + rng.below(20);
        let mut t = Tape::new(&store, rng.substream(m as u64), false);
        let logits = t.constant(y);
        let variance = t.constant(Tensor::zeros(&[m]));
        let d = lrt_distort(&mut t, &LogitVariancePair { logits, variance }, samples)?;
        let gce = gce_loss(&mut t, d, class)?;
        let ce = ce_loss(&mut t, logits, class)?;
        worst = worst.max((t.scalar(gce) - t.scalar(ce)).abs());
    }
    Ok(worst)
}

/// Random attention state: grid `[c, u·v]`, softmax weights and the pooled
/// feature, built on `t`.
pub fn random_fused(t: &mut Tape, rng: &mut RngStream) -> Result<Fused> {
    let (c, u, v) = (1 + rng.below(6), 1 + rng.below(5), 1 + rng.below(5));
    let grid = t.constant(rng.normal_tensor(&[c, u * v]));
    let scores = t.constant(rng.normal_tensor(&[u * v]).map(|x| 2.0 * x));
    let alpha = t.softmax(scores, 0)?;
    let f = pool_cells(t, grid, alpha)?;
    Ok(Fused {
        f,
        alpha,
        grid,
        u,
        v,
    })
}

/// Count of states violating the rewrite identities, bit for bit, over
/// `count` random states, plus zero-map and zero-gradient states.
pub fn ruam_violations(count: usize, seed: u64) -> Result<usize> {
    let store = ParamStore::new();
    let mut rng = RngStream::new(seed);
    let mut bad = 0;
    for i in 0..count {
        let mut t = Tape::new(&store, RngStream::new(0), false);
        let fz = random_fused(&mut t, &mut rng)?;
        let cells = fz.u * fz.v;
        let cfg = RuamConfig {
            lambda: 0.1 + rng.uniform() * 3.0,
            gamma_neg: -4.0 * rng.uniform(),
            renormalize: false,
        };
        let map = if i % 10 == 0 {
            Tensor::zeros(&[cells])
        } else {
            rng.normal_tensor(&[cells])
        };
        let (_, s) = ruam_apply(&mut t, &fz, &map, &cfg)?;
        let a = s.alpha.data();
        for j in 0..cells {
            let g = map.data()[j];
            let a1 = g * a[j];
            let a2 = a1.max(0.0) + (-a1).max(0.0) * cfg.gamma_neg;
            bad += usize::from(s.alpha_prime.data()[j] != a1);
            bad += usize::from(s.alpha_dprime.data()[j] != a2);
            bad += usize::from(s.alpha_new.data()[j] != a[j] + s.alpha_dprime.data()[j] * a[j]);
            if g == 0.0 {
                bad += usize::from(s.alpha_new.data()[j] != a[j]);
            }
        }
        for (k, &f) in t.value(fz.f).data().iter().enumerate() {
            bad += usize::from(s.f_dprime.data()[k] != f + s.f_prime.data()[k]);
        }

        // a loss that ignores the grid gives a zero reversed gradient
        let l_u = t.constant(Tensor::scalar(rng.normal()));
        let (_, z) = ruam_update(&mut t, &fz, l_u, &cfg)?;
        bad += usize::from(z.grad_map.data().iter().any(|&g| g != 0.0));
        bad += usize::from(z.alpha_new != z.alpha);
    }
    Ok(bad)
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// The full model as an MC sampler: every draw is one evaluation pass under
/// the tape's dropout, its outputs the per-round softmax and variance
/// vectors laid end to end.
pub struct DialogSampler<'a> {
    pub model: &'a Model,
    pub noise: RngStream,
}

impl DialogSampler<'_> {
    fn pass(&self, rec: &DialogRecord, rng: RngStream, stochastic: bool) -> Result<McDraw> {
        let mut t = Tape::new(&self.model.store, rng, stochastic);
        let pass = self.model.forward_dialog(
            &mut t,
            rec,
            PassMode::Eval { latent: false },
            &self.noise,
        )?;
        let mut draw = McDraw {
            probs: Vec::new(),
            variances: Vec::new(),
        };
        for r in &pass.rounds {
            draw.probs.extend(softmax(&r.logits));
            draw.variances.extend(&r.variance);
        }
        Ok(draw)
    }

    pub fn deterministic(&self, rec: &DialogRecord) -> Result<McDraw> {
        self.pass(rec, RngStream::new(0), false)
    }
}

impl McModel for DialogSampler<'_> {
    type Input = DialogRecord;
    fn draw(&self, rec: &DialogRecord, rng: RngStream) -> Result<McDraw> {
        self.pass(rec, rng, true)
    }
}

/// Largest gap between the MC mean of `T` dropout-free draws and the
/// deterministic pass, over the given sample counts.
pub fn degenerate_dropout_gap(counts: &[usize]) -> Result<f64> {
    let mut cfg = micro_cfg();
    cfg.dropout = DropoutSchedule::none();
    let (model, recs) = micro_model(&cfg);
    let sampler = DialogSampler {
        model: &model,
        noise: RngStream::new(5),
    };
    let mut worst = 0.0f64;
    for rec in &recs {
        let det = sampler.deterministic(rec)?;
        for &t in counts {
            let set = predictive_posterior(&sampler, rec, t, &RngStream::new(9))?;
            for (a, b) in set.mean_probs().iter().zip(&det.probs) {
                worst = worst.max((a - b).abs());
            }
            for v in &set.variances {
                for (a, b) in v.iter().zip(&det.variances) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Ok(worst)
}
