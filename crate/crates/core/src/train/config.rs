//! Flat `key = value` configuration files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bayes::{DropoutSchedule, Placement, Pooling};
use crate::data::SyntheticTaskSpec;
use crate::error::{Error, Result};
use crate::uncertainty::{AleatoricTerms, RuamConfig};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "UQRANK_SEED";

/// Loss components that can be switched on and off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossTerm {
    Ce,
    Gce,
    Ve,
    Udl,
    Kl,
    Div,
    /// teacher-forced token cross-entropy of the answer decoder
    Tok,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::Ce,
        LossTerm::Gce,
        LossTerm::Ve,
        LossTerm::Udl,
        LossTerm::Kl,
        LossTerm::Div,
        LossTerm::Tok,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Ce => "ce",
            LossTerm::Gce => "gce",
            LossTerm::Ve => "ve",
            LossTerm::Udl => "udl",
            LossTerm::Kl => "kl",
            LossTerm::Div => "div",
            LossTerm::Tok => "tok",
        }
    }
}

impl FromStr for LossTerm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LossTerm::ALL
            .into_iter()
            .find(|t| t.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown loss term {s:?}")))
    }
}

/// The enabled subset of [`LossTerm`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossFlags(BTreeSet<LossTerm>);

impl LossFlags {
    pub fn all() -> Self {
        LossFlags(LossTerm::ALL.into_iter().collect())
    }

    pub fn of(terms: &[LossTerm]) -> Self {
        LossFlags(terms.iter().copied().collect())
    }

    pub fn has(&self, t: LossTerm) -> bool {
        self.0.contains(&t)
    }

    pub fn set(&mut self, t: LossTerm, on: bool) {
        if on {
            self.0.insert(t);
        } else {
            self.0.remove(&t);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn aleatoric(&self) -> AleatoricTerms {
        AleatoricTerms {
            gce: self.has(LossTerm::Gce),
            ve: self.has(LossTerm::Ve),
            udl: self.has(LossTerm::Udl),
        }
    }
}

impl std::fmt::Display for LossFlags {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|t| t.name()).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for LossFlags {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut set = BTreeSet::new();
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            set.insert(part.parse()?);
        }
        Ok(LossFlags(set))
    }
}

/// Which vectors are stacked for the singular-value diversity score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiversitySource {
    Latent,
    DecoderHidden,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub eta: f64,
    pub losses: LossFlags,
    pub udl_literal: bool,
    /// let the variance-equalizer term differentiate through the entropy
    pub ve_entropy_grad: bool,
    pub grad_clip: f64,

    pub dropout: DropoutSchedule,
    pub t_mc: usize,
    pub t_lrt: usize,
    pub k_latent: usize,

    pub ruam_enabled: bool,
    pub lambda_ruam: f64,
    pub gamma_neg: f64,
    pub ruam_renormalize: bool,
    pub ruam_feeds_latent: bool,

    pub data_fraction: f64,
    pub fixed_step_budget: bool,
    pub noise_gamma: f64,
    pub data_dir: Option<PathBuf>,
    pub train_dialogs: usize,
    pub val_dialogs: usize,
    pub rounds: usize,
    pub candidates: usize,
    pub paraphrase_relevance: f64,
    pub min_count: usize,

    pub embed_dim: usize,
    pub text_dim: usize,
    pub channels: Vec<usize>,
    pub att_hidden: usize,
    pub cls_hidden: usize,
    pub z_dim: usize,

    pub diversity_dialogs: usize,
    pub diversity_samples: usize,
    pub diversity_source: DiversitySource,
    pub attention_maps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            epochs: 30,
            lr: 4e-4,
            batch_size: 8,
            eta: 1.0,
            losses: LossFlags::all(),
            udl_literal: false,
            ve_entropy_grad: false,
            grad_clip: 5.0,
            dropout: DropoutSchedule::default(),
            t_mc: 25,
            t_lrt: 10,
            k_latent: 100,
            ruam_enabled: true,
            lambda_ruam: 1.0,
            gamma_neg: -2.0,
            ruam_renormalize: false,
            ruam_feeds_latent: true,
            data_fraction: 1.0,
            fixed_step_budget: true,
            noise_gamma: 1.0,
            data_dir: None,
            train_dialogs: 500,
            val_dialogs: 100,
            rounds: 5,
            candidates: 20,
            paraphrase_relevance: 0.5,
            min_count: 5,
            embed_dim: 16,
            text_dim: 16,
            channels: vec![8, 16, 16],
            att_hidden: 16,
            cls_hidden: 32,
            z_dim: 16,
            diversity_dialogs: 100,
            diversity_samples: 20,
            diversity_source: DiversitySource::Latent,
            attention_maps: 4,
        }
    }
}

/// `(line number, key, value)` triples of a flat config text. `#` starts
/// a comment; blank lines are ignored.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            msg: format!("line {}: expected `key = value`", i + 1),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn val<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| val(key, x.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn placement_name(p: Placement) -> &'static str {
    match p {
        Placement::BeforeLayer => "before-layer",
        Placement::AfterMaxPool => "after-max-pool",
    }
}

fn parse_placement(v: &str) -> Result<Placement> {
    match v {
        "before-layer" => Ok(Placement::BeforeLayer),
        "after-max-pool" => Ok(Placement::AfterMaxPool),
        _ => Err(Error::Config(format!("unknown dropout placement {v:?}"))),
    }
}

fn parse_pooling(v: &str) -> Result<Pooling> {
    match v {
        "max" => Ok(Pooling::Max),
        "avg" => Ok(Pooling::Avg),
        _ => Err(Error::Config(format!("unknown pooling {v:?}"))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = val(key, v)?,
            "epochs" => self.epochs = val(key, v)?,
            "lr" => self.lr = val(key, v)?,
            "batch_size" => self.batch_size = val(key, v)?,
            "eta" => self.eta = val(key, v)?,
            "losses" => self.losses = v.parse()?,
            "udl_literal" => self.udl_literal = val(key, v)?,
            "ve_entropy_grad" => self.ve_entropy_grad = val(key, v)?,
            "grad_clip" => self.grad_clip = val(key, v)?,
            "dropout_conv" => self.dropout.conv = list(key, v)?,
            "dropout_fc" => self.dropout.fc = val(key, v)?,
            "dropout_lstm_input" => self.dropout.lstm_input = val(key, v)?,
            "dropout_lstm_hidden" => self.dropout.lstm_hidden = val(key, v)?,
            "dropout_lstm_output" => self.dropout.lstm_output = val(key, v)?,
            "dropout_placement" => self.dropout.placement = parse_placement(v)?,
            "pooling" => self.dropout.pooling = parse_pooling(v)?,
            "t_mc" => self.t_mc = val(key, v)?,
            "t_lrt" => self.t_lrt = val(key, v)?,
            "k_latent" => self.k_latent = val(key, v)?,
            "ruam_enabled" => self.ruam_enabled = val(key, v)?,
            "lambda_ruam" => self.lambda_ruam = val(key, v)?,
            "gamma_neg" => self.gamma_neg = val(key, v)?,
            "ruam_renormalize" => self.ruam_renormalize = val(key, v)?,
            "ruam_feeds_latent" => self.ruam_feeds_latent = val(key, v)?,
            "data_fraction" => self.data_fraction = val(key, v)?,
            "fixed_step_budget" => self.fixed_step_budget = val(key, v)?,
            "noise_gamma" => self.noise_gamma = val(key, v)?,
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train_dialogs" => self.train_dialogs = val(key, v)?,
            "val_dialogs" => self.val_dialogs = val(key, v)?,
            "rounds" => self.rounds = val(key, v)?,
            "candidates" => self.candidates = val(key, v)?,
            "paraphrase_relevance" => self.paraphrase_relevance = val(key, v)?,
            "min_count" => self.min_count = val(key, v)?,
            "embed_dim" => self.embed_dim = val(key, v)?,
            "text_dim" => self.text_dim = val(key, v)?,
            "channels" => self.channels = list(key, v)?,
            "att_hidden" => self.att_hidden = val(key, v)?,
            "cls_hidden" => self.cls_hidden = val(key, v)?,
            "z_dim" => self.z_dim = val(key, v)?,
            "diversity_dialogs" => self.diversity_dialogs = val(key, v)?,
            "diversity_samples" => self.diversity_samples = val(key, v)?,
            "diversity_source" => {
                self.diversity_source = match v {
                    "latent" => DiversitySource::Latent,
                    "decoder-hidden" => DiversitySource::DecoderHidden,
                    _ => return Err(Error::Config(format!("unknown diversity source {v:?}"))),
                }
            }
            "attention_maps" => self.attention_maps = val(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a config text on top of the defaults.
    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (line, k, v) in parse_pairs(text, path)? {
            cfg.set(&k, &v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}:{line}: {m}", path.display())),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    /// Applies [`SEED_ENV`] if it is set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an integer")))?;
        }
        Ok(self)
    }

    /// Every field as `key = value`, readable by [`TrainConfig::from_text`].
    pub fn to_text(&self) -> String {
        let d = &self.dropout;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lr", self.lr.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("eta", self.eta.to_string());
        kv("losses", self.losses.to_string());
        kv("udl_literal", self.udl_literal.to_string());
        kv("ve_entropy_grad", self.ve_entropy_grad.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("dropout_conv", join(&d.conv));
        kv("dropout_fc", d.fc.to_string());
        kv("dropout_lstm_input", d.lstm_input.to_string());
        kv("dropout_lstm_hidden", d.lstm_hidden.to_string());
        kv("dropout_lstm_output", d.lstm_output.to_string());
        kv("dropout_placement", placement_name(d.placement).to_string());
        kv(
            "pooling",
            match d.pooling {
                Pooling::Max => "max",
                Pooling::Avg => "avg",
            }
            .to_string(),
        );
        kv("t_mc", self.t_mc.to_string());
        kv("t_lrt", self.t_lrt.to_string());
        kv("k_latent", self.k_latent.to_string());
        kv("ruam_enabled", self.ruam_enabled.to_string());
        kv("lambda_ruam", self.lambda_ruam.to_string());
        kv("gamma_neg", self.gamma_neg.to_string());
        kv("ruam_renormalize", self.ruam_renormalize.to_string());
        kv("ruam_feeds_latent", self.ruam_feeds_latent.to_string());
        kv("data_fraction", self.data_fraction.to_string());
        kv("fixed_step_budget", self.fixed_step_budget.to_string());
        kv("noise_gamma", self.noise_gamma.to_string());
        kv(
            "data_dir",
            self.data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("train_dialogs", self.train_dialogs.to_string());
        kv("val_dialogs", self.val_dialogs.to_string());
        kv("rounds", self.rounds.to_string());
        kv("candidates", self.candidates.to_string());
        kv(
            "paraphrase_relevance",
            self.paraphrase_relevance.to_string(),
        );
        kv("min_count", self.min_count.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("text_dim", self.text_dim.to_string());
        kv("channels", join(&self.channels));
        kv("att_hidden", self.att_hidden.to_string());
        kv("cls_hidden", self.cls_hidden.to_string());
        kv("z_dim", self.z_dim.to_string());
        kv("diversity_dialogs", self.diversity_dialogs.to_string());
        kv("diversity_samples", self.diversity_samples.to_string());
        kv(
            "diversity_source",
            match self.diversity_source {
                DiversitySource::Latent => "latent",
                DiversitySource::DecoderHidden => "decoder-hidden",
            }
            .to_string(),
        );
        kv("attention_maps", self.attention_maps.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.eta >= 0.0) {
            return bad(format!("eta must be non-negative, got {}", self.eta));
        }
        if self.losses.is_empty() {
            return bad("at least one loss term must be enabled".into());
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad(format!(
                "data_fraction must be in (0, 1], got {}",
                self.data_fraction
            ));
        }
        if self.batch_size == 0 || self.t_mc == 0 || self.t_lrt == 0 {
            return bad("batch_size, t_mc and t_lrt must be positive".into());
        }
        if self.losses.has(LossTerm::Div) && self.k_latent < 2 {
            return bad("the diversity loss needs k_latent >= 2".into());
        }
        if self.k_latent == 0 || self.diversity_samples == 0 {
            return bad("k_latent and diversity_samples must be positive".into());
        }
        if self.lambda_ruam <= 0.0 {
            return bad(format!(
                "lambda_ruam must be positive, got {}",
                self.lambda_ruam
            ));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be a non-empty list of positive sizes".into());
        }
        if [
            self.embed_dim,
            self.text_dim,
            self.att_hidden,
            self.cls_hidden,
            self.z_dim,
        ]
        .contains(&0)
        {
            return bad("layer sizes must be positive".into());
        }
        if self.grad_clip < 0.0 {
            return bad("grad_clip must be non-negative".into());
        }
        self.dropout.validate()
    }

    pub fn ruam(&self) -> RuamConfig {
        RuamConfig {
            lambda: self.lambda_ruam,
            gamma_neg: self.gamma_neg,
            renormalize: self.ruam_renormalize,
        }
    }

    /// Synthetic spec for the training split.
    pub fn train_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            seed: self.seed,
            num_dialogs: self.train_dialogs,
            rounds_per_dialog: self.rounds,
            num_candidates: self.candidates,
            noise_gamma: self.noise_gamma,
            paraphrase_relevance: self.paraphrase_relevance,
            ..Default::default()
        }
    }

    /// Synthetic spec for the held-out split: same seed, disjoint ids.
    pub fn val_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            num_dialogs: self.val_dialogs,
            id_offset: self.train_dialogs as u64,
            ..self.train_spec()
        }
    }
}

/// Reads a synthetic-task spec file (`gen --spec`).
pub fn load_task_spec(path: &Path) -> Result<(SyntheticTaskSpec, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    task_spec_from_text(&text, path)
}

/// Parses a task spec; also returns `val_dialogs` (default 100).
pub fn task_spec_from_text(text: &str, path: &Path) -> Result<(SyntheticTaskSpec, usize)> {
    let mut spec = SyntheticTaskSpec::default();
    let mut val_dialogs = 100;
    for (line, k, v) in parse_pairs(text, path)? {
        let key = k.as_str();
        let r = (|| -> Result<()> {
            match key {
                "seed" => spec.seed = val(key, &v)?,
                "num_dialogs" | "train_dialogs" => spec.num_dialogs = val(key, &v)?,
                "val_dialogs" => val_dialogs = val(key, &v)?,
                "rounds" | "rounds_per_dialog" => spec.rounds_per_dialog = val(key, &v)?,
                "num_candidates" | "candidates" => spec.num_candidates = val(key, &v)?,
                "grid" => spec.grid = val(key, &v)?,
                "image_size" => spec.image_size = val(key, &v)?,
                "min_shapes" => spec.min_shapes = val(key, &v)?,
                "max_shapes" => spec.max_shapes = val(key, &v)?,
                "noise_gamma" => spec.noise_gamma = val(key, &v)?,
                "paraphrase_relevance" => spec.paraphrase_relevance = val(key, &v)?,
                "id_offset" => spec.id_offset = val(key, &v)?,
                _ => return Err(Error::Config(format!("unknown spec key {key:?}"))),
            }
            Ok(())
        })();
        r.map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}:{line}: {m}", path.display())),
            other => other,
        })?;
    }
    spec.validate()?;
    Ok((spec, val_dialogs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("test.cfg")
    }

    #[test]
    fn text_roundtrip() {
        let mut c = TrainConfig::default();
        c.lr = 1.25e-3;
        c.losses = LossFlags::of(&[LossTerm::Ce, LossTerm::Div]);
        c.channels = vec![4, 8];
        c.dropout.placement = Placement::BeforeLayer;
        c.data_dir = Some(PathBuf::from("some/dir"));
        c.diversity_source = DiversitySource::DecoderHidden;
        let back = TrainConfig::from_text(&c.to_text(), p()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_field_is_addressable() {
        let text = TrainConfig::default().to_text();
        let keys: Vec<String> = parse_pairs(&text, p())
            .unwrap()
            .into_iter()
            .map(|(_, k, _)| k)
            .collect();
        assert_eq!(keys.len(), 44);
        let mut c = TrainConfig::default();
        for k in &keys {
            let v = text
                .lines()
                .find_map(|l| l.strip_prefix(&format!("{k} = ")))
                .unwrap();
            c.set(k, v).unwrap();
        }
        assert_eq!(c, TrainConfig::default());
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(
            TrainConfig::from_text("colour = red", p()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::from_text("lr = 0", p()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::from_text("losses = ", p()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::from_text("eta = -1", p()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::from_text("just words", p()),
            Err(Error::Parse { .. })
        ));
        let c = TrainConfig::from_text("# note\n\nepochs = 3  # short\nlosses = ce+gce\n", p())
            .unwrap();
        assert_eq!(c.epochs, 3);
        assert!(c.losses.has(LossTerm::Gce) && !c.losses.has(LossTerm::Kl));
    }

    #[test]
    fn task_spec_keys() {
        let (s, v) = task_spec_from_text(
            "seed = 3\nnum_dialogs = 10\nval_dialogs = 4\nnoise_gamma = 0.8",
            p(),
        )
        .unwrap();
        assert_eq!((s.seed, s.num_dialogs, v, s.noise_gamma), (3, 10, 4, 0.8));
        assert!(task_spec_from_text("bogus = 1", p()).is_err());
    }

    #[test]
    fn splits_are_disjoint() {
        let c = TrainConfig::default();
        assert_eq!(c.val_spec().id_offset, 500);
        assert_eq!(c.val_spec().seed, c.train_spec().seed);
    }
}
