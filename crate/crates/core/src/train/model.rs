//! The complete ranking network and its per-dialog forward pass.

use std::path::Path;

use crate::bayes::ConvStack;
use crate::data::{DialogRecord, Vocab};
use crate::decoder::{
    diversity_loss, kl_loss, project_latent, sample_latents, token_ce_loss, AnswerDecoder,
    LatentGaussian, LatentHead,
};
use crate::error::{Error, Result};
use crate::fusion::{
    attend_fuse, encode_image, encode_text, update_history, Attention, Embedding, HistoryUpdate,
    TextEncoder,
};
use crate::tensor::{ParamStore, RngStream, Tape, Var};
use crate::uncertainty::{
    aleatoric_total, ce_loss, classifier_heads, gce_loss, lrt_distort, mean_entropy, ruam_update,
    udl_loss, ve_loss, LogitVariancePair, RuamState,
};

use super::config::{LossTerm, TrainConfig};

pub const IMAGE_CHANNELS: usize = 3;

const INIT_KEY: u64 = 0x1417;
const LRT_KEY: u64 = 0x4c52;
const LATENT_KEY: u64 = 0x4c41;

/// Every trainable block of the network.
#[derive(Debug, Clone)]
pub struct Parts {
    pub emb: Embedding,
    pub cnn: ConvStack,
    pub q_enc: TextEncoder,
    pub h_enc: TextEncoder,
    pub hist: HistoryUpdate,
    pub att: Attention,
    pub latent: LatentHead,
    pub heads: crate::uncertainty::ClassifierHeads,
    pub dec: AnswerDecoder,
}

impl Parts {
    fn build(cfg: &TrainConfig, vocab: usize, store: &mut ParamStore, rng: &mut RngStream) -> Self {
        let d = &cfg.dropout;
        let emb = Embedding::new(store, "emb", vocab, cfg.embed_dim, rng);
        let cnn = ConvStack::new(store, "cnn", IMAGE_CHANNELS, &cfg.channels, d, rng);
        let q_enc = TextEncoder::new(store, "q_enc", &emb, cfg.text_dim, d, rng);
        let h_enc = TextEncoder::new(store, "h_enc", &emb, cfg.text_dim, d, rng);
        let hist = HistoryUpdate::new(store, "hist", cfg.text_dim, rng);
        let c = cnn.out_channels();
        let ctx = c + 2 * cfg.text_dim;
        let att = Attention::new(store, "att", c, cfg.text_dim, cfg.att_hidden, rng);
        let latent = LatentHead::new(store, "latent", ctx, cfg.z_dim, rng);
        let heads = crate::uncertainty::ClassifierHeads::new(
            store,
            "heads",
            ctx,
            cfg.cls_hidden,
            cfg.embed_dim,
            d.fc,
            rng,
        );
        let dec = AnswerDecoder::new(store, "dec", &emb, cfg.z_dim, rng);
        Parts {
            emb,
            cnn,
            q_enc,
            h_enc,
            hist,
            att,
            latent,
            heads,
            dec,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: TrainConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub parts: Parts,
}

/// What a pass computes besides the final logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassMode {
    /// Every loss component, attention targets from the ground truth.
    Train,
    /// Logits only; the rewrite targets the predicted class. With
    /// `latent`, each round also projects the answer latent.
    Eval { latent: bool },
}

/// Per-round results of a pass. Loss fields are zero outside training.
#[derive(Debug, Clone)]
pub struct RoundOut {
    pub logits: Vec<f64>,
    pub variance: Vec<f64>,
    pub ce: f64,
    pub gce: f64,
    pub ve: f64,
    pub udl: f64,
    pub kl: f64,
    pub div: f64,
    pub tok: f64,
    pub aleatoric: f64,
    pub cost: f64,
    pub ruam: Option<RuamState>,
    pub latent: Option<LatentGaussian>,
}

#[derive(Debug, Clone)]
pub struct DialogPass {
    pub rounds: Vec<RoundOut>,
    /// Sum of the per-round costs (training passes only).
    pub cost: Option<Var>,
}

struct LossSet {
    ce: Var,
    gce: Var,
    ve: Var,
    udl: Var,
    total: Var,
}

/// Runs `f` with `rng` temporarily installed as the tape's stream, so that
/// extra draws do not shift the dropout masks.
fn with_rng<R>(t: &mut Tape, rng: RngStream, f: impl FnOnce(&mut Tape) -> R) -> R {
    let saved = std::mem::replace(&mut t.rng, rng);
    let out = f(t);
    t.rng = saved;
    out
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |b, (i, &v)| if v > b.1 { (i, v) } else { b },
        )
        .0
}

impl Model {
    /// Fresh weights drawn from the configured seed.
    pub fn new(cfg: TrainConfig, vocab: Vocab) -> Self {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(cfg.seed).substream(INIT_KEY);
        let parts = Parts::build(&cfg, vocab.len(), &mut store, &mut rng);
        Model {
            cfg,
            vocab,
            store,
            parts,
        }
    }

    /// Writes `config.txt`, `vocab.txt` and `params.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = dir.join("config.txt");
        std::fs::write(&cfg, self.cfg.to_text()).map_err(|e| Error::io(&cfg, e))?;
        let voc = dir.join("vocab.txt");
        std::fs::write(&voc, self.vocab.to_text()).map_err(|e| Error::io(&voc, e))?;
        self.store.save(&dir.join("params.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = TrainConfig::load(&dir.join("config.txt"))?;
        let vp = dir.join("vocab.txt");
        let text = std::fs::read_to_string(&vp).map_err(|e| Error::io(&vp, e))?;
        let vocab = Vocab::from_text(&text).ok_or_else(|| Error::Parse {
            path: vp.clone(),
            msg: "reserved tokens missing".into(),
        })?;
        let mut model = Model::new(cfg, vocab);
        let pp = dir.join("params.txt");
        let saved = ParamStore::load(&pp)?;
        if saved.len() != model.store.len() {
            return Err(Error::Parse {
                path: pp,
                msg: format!("{} tensors, model has {}", saved.len(), model.store.len()),
            });
        }
        for id in saved.ids() {
            let name = saved.name(id).to_string();
            let target = model.store.find(&name).ok_or_else(|| Error::Parse {
                path: pp.clone(),
                msg: format!("unknown parameter {name}"),
            })?;
            let value = saved.get(id);
            if value.shape() != model.store.get(target).shape() {
                return Err(Error::Parse {
                    path: pp.clone(),
                    msg: format!("shape mismatch for {name}"),
                });
            }
            *model.store.get_mut(target) = value.clone();
        }
        Ok(model)
    }

    fn losses(
        &self,
        t: &mut Tape,
        pair: &LogitVariancePair,
        class: usize,
        rng: RngStream,
    ) -> Result<LossSet> {
        let cfg = &self.cfg;
        let distorted = with_rng(t, rng, |t| lrt_distort(t, pair, cfg.t_lrt))?;
        let ce = ce_loss(t, pair.logits, class)?;
        let gce = gce_loss(t, distorted, class)?;
        let mut h = mean_entropy(t, distorted)?;
        if !cfg.ve_entropy_grad {
            let v = t.value(h).clone();
            h = t.constant(v);
        }
        let ve = ve_loss(t, pair.variance, h)?;
        let udl = udl_loss(t, ce, gce, cfg.udl_literal)?;
        let total = aleatoric_total(t, gce, ve, udl, cfg.losses.aleatoric())?;
        Ok(LossSet {
            ce,
            gce,
            ve,
            udl,
            total,
        })
    }

    /// One pass over every round of `rec`. Dropout follows `t.stochastic`
    /// and draws from `t.rng`; distortion and latent noise use substreams
    /// of `noise`.
    pub fn forward_dialog(
        &self,
        t: &mut Tape,
        rec: &DialogRecord,
        mode: PassMode,
        noise: &RngStream,
    ) -> Result<DialogPass> {
        let p = &self.parts;
        let cfg = &self.cfg;
        let image = rec
            .image
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("dialog {} has no image tensor", rec.dialog_id)))?;
        let grid = encode_image(t, &p.cnn, image)?;
        let mut h = encode_text(t, &p.emb, &p.h_enc, &rec.caption)?;
        let train = mode == PassMode::Train;
        let mut rounds = Vec::with_capacity(rec.rounds.len());
        let mut cost: Option<Var> = None;
        for (r, round) in rec.rounds.iter().enumerate() {
            let key = r as u64;
            let q = encode_text(t, &p.emb, &p.q_enc, &round.question)?;
            let fused = attend_fuse(t, &p.att, grid, q, h)?;
            let ctx0 = t.concat(&[fused.f, q, h], 1)?;
            let cands = p.emb.bag_of_words(t, &round.candidates)?;
            let pre = classifier_heads(t, &p.heads, ctx0, cands)?;

            let (pair, ctx, ruam) = if cfg.ruam_enabled {
                let target = if train {
                    round.gt_index
                } else {
                    argmax(t.value(pre.logits).data())
                };
                let l_u = self
                    .losses(t, &pre, target, noise.substream(LRT_KEY).substream(2 * key))?
                    .total;
                let (f2, state) = ruam_update(t, &fused, l_u, &cfg.ruam())?;
                let ctx2 = t.concat(&[f2, q, h], 1)?;
                let pair = classifier_heads(t, &p.heads, ctx2, cands)?;
                (pair, ctx2, Some(state))
            } else {
                (pre, ctx0, None)
            };
            let latent_ctx = if cfg.ruam_feeds_latent { ctx } else { ctx0 };

            let mut out = RoundOut {
                logits: t.value(pair.logits).data().to_vec(),
                variance: t.value(pair.variance).data().to_vec(),
                ce: 0.0,
                gce: 0.0,
                ve: 0.0,
                udl: 0.0,
                kl: 0.0,
                div: 0.0,
                tok: 0.0,
                aleatoric: 0.0,
                cost: 0.0,
                ruam,
                latent: None,
            };

            if train {
                let ls = self.losses(
                    t,
                    &pair,
                    round.gt_index,
                    noise.substream(LRT_KEY).substream(2 * key + 1),
                )?;
                let g = project_latent(t, &p.latent, latent_ctx)?;
                let kl = kl_loss(t, &g)?;
                let samples = with_rng(t, noise.substream(LATENT_KEY).substream(key), |t| {
                    sample_latents(t, &g, cfg.k_latent)
                })?;
                let div = if cfg.losses.has(LossTerm::Div) {
                    Some(diversity_loss(t, samples.z, Some(samples.center))?)
                } else {
                    None
                };
                let z0 = t.slice(samples.z, 0, 0, 1)?;
                let tok = token_ce_loss(t, &p.dec, &p.emb, z0, &round.answer)?;

                let mut terms: Vec<Var> = Vec::new();
                let flags = &cfg.losses;
                if flags.has(LossTerm::Ce) {
                    terms.push(ls.ce);
                }
                if flags.has(LossTerm::Tok) {
                    terms.push(tok);
                }
                if flags.has(LossTerm::Kl) {
                    terms.push(kl);
                }
                if let Some(d) = div {
                    terms.push(d);
                }
                if flags.aleatoric().any() && cfg.eta != 0.0 {
                    terms.push(t.scale(ls.total, cfg.eta));
                }
                let mut c = terms
                    .first()
                    .copied()
                    .ok_or_else(|| Error::Config("no loss term enabled".into()))?;
                for &v in &terms[1..] {
                    c = t.add(c, v)?;
                }
                let sc = |t: &Tape, v: Var| t.scalar(v);
                out.ce = sc(t, ls.ce);
                out.gce = sc(t, ls.gce);
                out.ve = sc(t, ls.ve);
                out.udl = sc(t, ls.udl);
                out.kl = sc(t, kl);
                out.div = div.map_or(0.0, |d| sc(t, d));
                out.tok = sc(t, tok);
                out.aleatoric = sc(t, ls.total);
                out.cost = sc(t, c);
                out.latent = Some(g);
                cost = Some(match cost {
                    Some(acc) => t.add(acc, c)?,
                    None => c,
                });
            } else if mode == (PassMode::Eval { latent: true }) {
                out.latent = Some(project_latent(t, &p.latent, latent_ctx)?);
            }
            rounds.push(out);

            let a = encode_text(t, &p.emb, &p.h_enc, &round.answer)?;
            h = update_history(t, &p.hist, h, q, a)?;
        }
        Ok(DialogPass { rounds, cost })
    }
}

/// Checks that every logged component is finite, naming the first that is not.
pub fn check_finite(r: &RoundOut) -> Result<()> {
    let named = [
        ("ce", r.ce),
        ("gce", r.gce),
        ("ve", r.ve),
        ("udl", r.udl),
        ("kl", r.kl),
        ("div", r.div),
        ("tok", r.tok),
        ("total", r.cost),
    ];
    match named.iter().find(|(_, v)| !v.is_finite()) {
        Some((n, _)) => Err(Error::NonFinite(n.to_string())),
        None => Ok(()),
    }
}
