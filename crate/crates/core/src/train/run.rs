//! Data preparation, the optimisation loop and held-out evaluation.

use std::path::Path;
use std::time::Instant;

use crate::bayes::McSampleSet;
use crate::data::vocab::START;
use crate::data::{
    build_vocab, encode_dialogs, gen_synthetic, load_images, load_visdial_json, save_images,
    save_visdial_json, DialogRecord, Limits, RawDialog, Vocab,
};
use crate::decoder::{generate, sample_latents, score_candidates};
use crate::error::{Error, Result};
use crate::metrics::{ndcg, retrieval_metrics, svd_diversity, RankedList};
use crate::tensor::nn::lstm_cell;
use crate::tensor::{RngStream, Tape, Tensor};
use crate::uncertainty::{predictive_uncertainty, RuamState, UncertaintyReport};

use super::adam::Adam;
use super::config::{DiversitySource, TrainConfig};
use super::model::{check_finite, Model, PassMode};

const SUBSET_KEY: u64 = 0x5355;
const TRAIN_KEY: u64 = 0x5452;
const EVAL_KEY: u64 = 0x4556;
const DIVERSITY_KEY: u64 = 0x4456;
const DROPOUT_KEY: u64 = 1;
const NOISE_KEY: u64 = 2;

/// Tokenised train and validation splits with the training vocabulary.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub vocab: Vocab,
    pub train: Vec<DialogRecord>,
    pub val: Vec<DialogRecord>,
}

/// Reads `<dir>/<split>.json` and, when present, the `<split>.img` sidecar.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<RawDialog>> {
    let mut raw = load_visdial_json(&dir.join(format!("{split}.json")))?;
    let img = dir.join(format!("{split}.img"));
    if img.exists() {
        let images = load_images(&img)?;
        if images.len() != raw.len() {
            return Err(Error::Schema {
                field: "images".into(),
            });
        }
        for (d, i) in raw.iter_mut().zip(images) {
            d.image = Some(i);
        }
    }
    Ok(raw)
}

/// Writes `<dir>/<split>.json` and the `<split>.img` sidecar read back by
/// [`load_split`].
pub fn write_split(dir: &Path, split: &str, dialogs: &[RawDialog]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_visdial_json(dialogs, &dir.join(format!("{split}.json")))?;
    save_images(dialogs, &dir.join(format!("{split}.img")))
}

/// Builds the vocabulary on `train` and tokenises both splits.
pub fn tokenise(train: &[RawDialog], val: &[RawDialog], min_count: usize) -> Datasets {
    let vocab = build_vocab(train, min_count);
    Datasets {
        train: encode_dialogs(train, &vocab, Limits::default()),
        val: encode_dialogs(val, &vocab, Limits::default()),
        vocab,
    }
}

/// Loads `data_dir` if configured, otherwise generates the synthetic splits.
pub fn prepare_data(cfg: &TrainConfig) -> Result<Datasets> {
    let (train, val) = match &cfg.data_dir {
        Some(dir) => (load_split(dir, "train")?, load_split(dir, "val")?),
        None => (
            gen_synthetic(&cfg.train_spec())?,
            gen_synthetic(&cfg.val_spec())?,
        ),
    };
    Ok(tokenise(&train, &val, cfg.min_count))
}

/// Epoch means of every logged quantity, averaged over rounds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochStats {
    pub epoch: usize,
    pub ce: f64,
    pub gce: f64,
    pub ve: f64,
    pub udl: f64,
    pub kl: f64,
    pub div: f64,
    pub tok: f64,
    pub aleatoric: f64,
    pub total: f64,
    /// mean predicted variance of the final logits
    pub variance: f64,
}

impl EpochStats {
    pub const COMPONENTS: [&'static str; 10] = [
        "ce",
        "gce",
        "ve",
        "udl",
        "kl",
        "div",
        "tok",
        "aleatoric",
        "total",
        "variance",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.ce,
            self.gce,
            self.ve,
            self.udl,
            self.kl,
            self.div,
            self.tok,
            self.aleatoric,
            self.total,
            self.variance,
        ]
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        Self::COMPONENTS
            .iter()
            .position(|c| *c == name)
            .map(|i| self.values()[i])
    }

    pub(crate) fn set_values(&mut self, v: [f64; 10]) {
        [
            self.ce,
            self.gce,
            self.ve,
            self.udl,
            self.kl,
            self.div,
            self.tok,
            self.aleatoric,
            self.total,
            self.variance,
        ] = v;
    }
}

/// Dialog indices used for training: a seeded subset of `data_fraction`.
pub fn training_subset(cfg: &TrainConfig, n: usize) -> Vec<usize> {
    let keep = ((cfg.data_fraction * n as f64).ceil() as usize).clamp(1, n.max(1));
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(cfg.seed)
        .substream(SUBSET_KEY)
        .shuffle(&mut order);
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// Trains `model` in place on `train` and returns one entry per epoch.
pub fn train_model(model: &mut Model, train: &[DialogRecord]) -> Result<Vec<EpochStats>> {
    if train.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let cfg = model.cfg.clone();
    let subset = training_subset(&cfg, train.len());
    let bs = cfg.batch_size;
    let per_epoch = if cfg.fixed_step_budget {
        train.len()
    } else {
        subset.len()
    }
    .div_ceil(bs);
    let mut adam = Adam::new(&model.store, cfg.lr);
    let base = RngStream::new(cfg.seed).substream(TRAIN_KEY);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let stream = base.substream(epoch as u64);
        let mut order = subset.clone();
        stream.substream(u64::MAX).shuffle(&mut order);
        let mut sums = [0.0; 10];
        let mut count = 0usize;
        for step in 0..per_epoch {
            let mut rounds = 0usize;
            for j in 0..bs {
                let pos = step * bs + j;
                let rec = &train[order[pos % order.len()]];
                let s = stream.substream(pos as u64);
                let grads = {
                    let mut t = Tape::new(&model.store, s.substream(DROPOUT_KEY), true);
                    let pass = model.forward_dialog(
                        &mut t,
                        rec,
                        PassMode::Train,
                        &s.substream(NOISE_KEY),
                    )?;
                    for r in &pass.rounds {
                        check_finite(r)?;
                        let v = r.variance.iter().sum::<f64>() / r.variance.len() as f64;
                        let row = [
                            r.ce,
                            r.gce,
                            r.ve,
                            r.udl,
                            r.kl,
                            r.div,
                            r.tok,
                            r.aleatoric,
                            r.cost,
                            v,
                        ];
                        sums.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    count += pass.rounds.len();
                    rounds += pass.rounds.len();
                    match pass.cost {
                        Some(c) => t.param_grads(c)?,
                        None => continue,
                    }
                };
                model.store.accumulate(&grads)?;
            }
            if rounds > 0 {
                adam.step(&mut model.store, 1.0 / rounds as f64, cfg.grad_clip);
            }
        }
        let mut st = EpochStats {
            epoch,
            ..Default::default()
        };
        st.set_values(sums.map(|s| s / count.max(1) as f64));
        history.push(st);
    }
    Ok(history)
}

/// One `metrics.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mrr: f64,
    pub mean_rank: f64,
    pub ndcg: f64,
    pub sigma_o: f64,
}

impl MetricsRow {
    pub fn from_lists(run_id: &str, lists: &[RankedList], sigma_o: f64) -> Result<Self> {
        let m = retrieval_metrics(lists, &[1, 5, 10])?;
        let mut nd = 0.0;
        for l in lists {
            nd += ndcg(l)? / lists.len() as f64;
        }
        Ok(MetricsRow {
            run_id: run_id.to_string(),
            r1: m.recall_at(1).unwrap_or(0.0),
            r5: m.recall_at(5).unwrap_or(0.0),
            r10: m.recall_at(10).unwrap_or(0.0),
            mrr: m.mrr,
            mean_rank: m.mean_rank,
            ndcg: nd,
            sigma_o,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyRow {
    pub dialog_id: u64,
    pub round: usize,
    pub report: UncertaintyReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub dialog_id: u64,
    pub round: usize,
    pub state: RuamState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedAnswer {
    pub dialog_id: u64,
    pub round: usize,
    pub tokens: Vec<usize>,
    pub text: String,
}

/// Held-out evaluation of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// ranking by the MC-averaged classifier probabilities
    pub metrics: MetricsRow,
    /// ranking by decoder log-likelihood from the latent mean
    pub decoder_metrics: MetricsRow,
    pub uncertainty: Vec<UncertaintyRow>,
    pub attention: Vec<AttentionRecord>,
    pub generated: Vec<GeneratedAnswer>,
}

impl EvalResult {
    pub fn mean_report(&self) -> UncertaintyReport {
        let n = self.uncertainty.len().max(1) as f64;
        let mut acc = UncertaintyReport {
            entropy: 0.0,
            aleatoric_mean: 0.0,
            epistemic_var: 0.0,
            sigma_sq_p: 0.0,
        };
        for u in &self.uncertainty {
            acc.entropy += u.report.entropy / n;
            acc.aleatoric_mean += u.report.aleatoric_mean / n;
            acc.epistemic_var += u.report.epistemic_var / n;
            acc.sigma_sq_p += u.report.sigma_sq_p / n;
        }
        acc
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// σ_o of `samples` latent draws around the last-round latent of `rec`.
fn dialog_diversity(model: &Model, rec: &DialogRecord, samples: usize) -> Result<f64> {
    let base = RngStream::new(model.cfg.seed)
        .substream(DIVERSITY_KEY)
        .substream(rec.dialog_id);
    let mut t = Tape::new(&model.store, base.substream(DROPOUT_KEY), false);
    let pass = model.forward_dialog(
        &mut t,
        rec,
        PassMode::Eval { latent: true },
        &base.substream(NOISE_KEY),
    )?;
    let Some(g) = pass.rounds.last().and_then(|r| r.latent) else {
        return Ok(0.0);
    };
    t.rng = base.substream(3);
    let z = sample_latents(&mut t, &g, samples)?.z;
    let mat = match model.cfg.diversity_source {
        DiversitySource::Latent => t.value(z).clone(),
        DiversitySource::DecoderHidden => {
            let dec = &model.parts.dec;
            let x = model.parts.emb.lookup(&mut t, &vec![START; samples])?;
            let c = t.constant(Tensor::zeros(&[samples, dec.lstm.hidden]));
            let (w, b) = (t.p(dec.lstm.w), t.p(dec.lstm.b));
            let (h, _) = lstm_cell(&mut t, x, z, c, w, b)?;
            t.value(h).clone()
        }
    };
    svd_diversity(&mat)
}

/// Mean σ_o over the first `diversity_dialogs` records.
pub fn sigma_o(model: &Model, records: &[DialogRecord]) -> Result<f64> {
    let n = model.cfg.diversity_dialogs.min(records.len());
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for rec in &records[..n] {
        total += dialog_diversity(model, rec, model.cfg.diversity_samples)?;
    }
    Ok(total / n as f64)
}

/// MC-dropout evaluation of `model` on `records`.
pub fn evaluate(model: &Model, records: &[DialogRecord], run_id: &str) -> Result<EvalResult> {
    if records.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let cfg = &model.cfg;
    let base = RngStream::new(cfg.seed).substream(EVAL_KEY);
    let mut lists = Vec::new();
    let mut dec_lists = Vec::new();
    let mut uncertainty = Vec::new();
    let mut attention = Vec::new();
    let mut generated = Vec::new();
    for (di, rec) in records.iter().enumerate() {
        let stream = base.substream(rec.dialog_id);
        // shared by every draw so that only dropout varies across samples
        let noise = stream.substream(NOISE_KEY);
        let n_rounds = rec.rounds.len();
        let mut sets: Vec<McSampleSet> = vec![
            McSampleSet {
                probs: Vec::new(),
                variances: Vec::new()
            };
            n_rounds
        ];
        for i in 0..cfg.t_mc {
            let mut t = Tape::new(&model.store, stream.substream(i as u64), true);
            let pass =
                model.forward_dialog(&mut t, rec, PassMode::Eval { latent: false }, &noise)?;
            for (set, r) in sets.iter_mut().zip(&pass.rounds) {
                set.probs.push(softmax(&r.logits));
                set.variances.push(r.variance.clone());
            }
        }
        for (r, (set, round)) in sets.iter().zip(&rec.rounds).enumerate() {
            uncertainty.push(UncertaintyRow {
                dialog_id: rec.dialog_id,
                round: r,
                report: predictive_uncertainty(set)?,
            });
            lists.push(
                RankedList::new(set.mean_probs(), round.gt_index)
                    .with_relevance(round.relevance.clone()),
            );
        }

        let mut t = Tape::new(&model.store, stream.substream(u64::MAX), false);
        let pass = model.forward_dialog(&mut t, rec, PassMode::Eval { latent: true }, &noise)?;
        for (r, (out, round)) in pass.rounds.iter().zip(&rec.rounds).enumerate() {
            let g = out.latent.expect("latent requested");
            let scores = score_candidates(
                &mut t,
                &model.parts.dec,
                &model.parts.emb,
                g.mu,
                &round.candidates,
            )?;
            dec_lists.push(
                RankedList::new(t.value(scores).data().to_vec(), round.gt_index)
                    .with_relevance(round.relevance.clone()),
            );
            let tokens = generate(&mut t, &model.parts.dec, &model.parts.emb, g.mu)?;
            generated.push(GeneratedAnswer {
                dialog_id: rec.dialog_id,
                round: r,
                text: model.vocab.decode(&tokens),
                tokens,
            });
            if di < cfg.attention_maps {
                if let Some(state) = &out.ruam {
                    attention.push(AttentionRecord {
                        dialog_id: rec.dialog_id,
                        round: r,
                        state: state.clone(),
                    });
                }
            }
        }
    }
    let so = sigma_o(model, records)?;
    Ok(EvalResult {
        metrics: MetricsRow::from_lists(run_id, &lists, so)?,
        decoder_metrics: MetricsRow::from_lists(&format!("{run_id}-decoder"), &dec_lists, so)?,
        uncertainty,
        attention,
        generated,
    })
}

/// Everything one `train` invocation produces.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub model: Model,
    pub epochs: Vec<EpochStats>,
    pub eval: EvalResult,
    pub wall_clock_secs: f64,
}

/// Identifier written in the metrics table; derived from the seed only so
/// that repeated runs produce identical files.
pub fn run_id(cfg: &TrainConfig) -> String {
    format!("seed{}", cfg.seed)
}

/// Trains on `data.train` and evaluates on `data.val`.
pub fn run_on(cfg: &TrainConfig, data: &Datasets) -> Result<ExperimentResult> {
    let start = Instant::now();
    let mut model = Model::new(cfg.clone(), data.vocab.clone());
    let epochs = train_model(&mut model, &data.train)?;
    let eval = evaluate(&model, &data.val, &run_id(cfg))?;
    Ok(ExperimentResult {
        model,
        epochs,
        eval,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

pub fn run_experiment(cfg: &TrainConfig) -> Result<ExperimentResult> {
    let data = prepare_data(cfg)?;
    run_on(cfg, &data)
}
