//! Controlled sweeps over loss terms, input noise, training-set size,
//! dropout placement and the uncertainty weight.

use std::fmt;
use std::str::FromStr;

use crate::bayes::{DropoutSchedule, Placement, Pooling};
use crate::data::{encode_dialogs, gen_synthetic, Limits};
use crate::error::{Error, Result};

use super::config::{LossFlags, LossTerm, TrainConfig};
use super::model::Model;
use super::run::{evaluate, prepare_data, run_id, run_on, train_model, EvalResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    Losses,
    Noise,
    DataFraction,
    DropoutPlacement,
    Eta,
}

impl AblationMode {
    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Losses => "losses",
            AblationMode::Noise => "noise",
            AblationMode::DataFraction => "data-fraction",
            AblationMode::DropoutPlacement => "dropout-placement",
            AblationMode::Eta => "eta",
        }
    }
}

impl FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            AblationMode::Losses,
            AblationMode::Noise,
            AblationMode::DataFraction,
            AblationMode::DropoutPlacement,
            AblationMode::Eta,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Usage(format!("unknown ablation mode {s:?}")))
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub mode: AblationMode,
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    fn new(mode: AblationMode, columns: &[&str]) -> Self {
        AblationTable {
            mode,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Distinct labels in first-seen order.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.label) {
                out.push(r.label.clone());
            }
        }
        out
    }

    /// Values of `column` for every seed of `label`.
    pub fn values(&self, label: &str, column: &str) -> Vec<f64> {
        let Some(c) = self.columns.iter().position(|x| x == column) else {
            return Vec::new();
        };
        self.rows
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.values[c])
            .collect()
    }

    pub fn mean(&self, label: &str, column: &str) -> f64 {
        let v = self.values(label, column);
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn median(&self, label: &str, column: &str) -> f64 {
        let mut v = self.values(label, column);
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn ranking_values(e: &EvalResult) -> Vec<f64> {
    let m = &e.metrics;
    vec![m.r1, m.r5, m.r10, m.mrr, m.mean_rank]
}

fn uncertainty_values(e: &EvalResult) -> Vec<f64> {
    let al: Vec<f64> = e
        .uncertainty
        .iter()
        .map(|u| u.report.aleatoric_mean)
        .collect();
    let ep: Vec<f64> = e
        .uncertainty
        .iter()
        .map(|u| u.report.epistemic_var)
        .collect();
    let (am, asd) = mean_std(&al);
    let (em, esd) = mean_std(&ep);
    vec![am, asd, em, esd]
}

/// Loss-variant rows; the latent and decoder terms of `base` are kept.
pub fn loss_variants(base: &LossFlags) -> Vec<(&'static str, LossFlags)> {
    use LossTerm::*;
    let extra: Vec<LossTerm> = [Kl, Div, Tok]
        .into_iter()
        .filter(|t| base.has(*t))
        .collect();
    let with = |terms: &[LossTerm]| {
        let mut all = terms.to_vec();
        all.extend(&extra);
        LossFlags::of(&all)
    };
    vec![
        ("CE", with(&[Ce])),
        ("VE", with(&[Ve])),
        ("GCE", with(&[Gce])),
        ("CE+VE", with(&[Ce, Ve])),
        ("VE+GCE", with(&[Ve, Gce])),
        ("CE+GCE", with(&[Ce, Gce])),
        ("ACE", with(&[Ce, Gce, Ve, Udl])),
    ]
}

/// Conv-dropout variants: no conv dropout, then both placements under
/// both pooling kinds.
pub fn placement_variants(base: &DropoutSchedule) -> Vec<(&'static str, DropoutSchedule)> {
    let v = |placement, pooling| DropoutSchedule {
        placement,
        pooling,
        ..base.clone()
    };
    vec![
        (
            "none",
            DropoutSchedule {
                conv: vec![0.0],
                ..base.clone()
            },
        ),
        ("before-layer/max", v(Placement::BeforeLayer, Pooling::Max)),
        ("after-pool/max", v(Placement::AfterMaxPool, Pooling::Max)),
        ("before-layer/avg", v(Placement::BeforeLayer, Pooling::Avg)),
        ("after-pool/avg", v(Placement::AfterMaxPool, Pooling::Avg)),
    ]
}

pub const NOISE_LEVELS: [f64; 3] = [0.8, 1.0, 1.2];
pub const DATA_FRACTIONS: [f64; 3] = [0.5, 0.75, 1.0];
pub const ETA_GRID: [f64; 3] = [0.1, 1.0, 10.0];

/// Runs `mode` once per seed. Row order is variant-major, then seed.
pub fn ablate(cfg: &TrainConfig, mode: AblationMode, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one seed".into()));
    }
    const RANKING: [&str; 5] = ["R1", "R5", "R10", "MRR", "Mean"];
    const UNCERTAINTY: [&str; 4] = [
        "aleatoric_mean",
        "aleatoric_std",
        "epistemic_mean",
        "epistemic_std",
    ];
    let seeded: Vec<TrainConfig> = seeds
        .iter()
        .map(|&s| TrainConfig {
            seed: s,
            ..cfg.clone()
        })
        .collect();
    let mut rows: Vec<Vec<AblationRow>> = Vec::new();
    let table = match mode {
        AblationMode::Losses | AblationMode::DropoutPlacement | AblationMode::Eta => {
            let mut cols: Vec<&str> = RANKING.to_vec();
            if mode != AblationMode::Losses {
                cols.extend(UNCERTAINTY);
            }
            let mut table = AblationTable::new(mode, &cols);
            for c in &seeded {
                let data = prepare_data(c)?;
                let variants: Vec<(String, TrainConfig)> = match mode {
                    AblationMode::Losses => loss_variants(&c.losses)
                        .into_iter()
                        .map(|(l, f)| {
                            (
                                l.to_string(),
                                TrainConfig {
                                    losses: f,
                                    ..c.clone()
                                },
                            )
                        })
                        .collect(),
                    AblationMode::DropoutPlacement => placement_variants(&c.dropout)
                        .into_iter()
                        .map(|(l, d)| {
                            (
                                l.to_string(),
                                TrainConfig {
                                    dropout: d,
                                    ..c.clone()
                                },
                            )
                        })
                        .collect(),
                    _ => ETA_GRID
                        .iter()
                        .map(|&e| {
                            (
                                format!("eta={e}"),
                                TrainConfig {
                                    eta: e,
                                    ..c.clone()
                                },
                            )
                        })
                        .collect(),
                };
                let mut per_seed = Vec::new();
                for (label, vc) in variants {
                    let r = run_on(&vc, &data)?;
                    let mut values = ranking_values(&r.eval);
                    if mode != AblationMode::Losses {
                        values.extend(uncertainty_values(&r.eval));
                    }
                    per_seed.push(AblationRow {
                        label,
                        seed: c.seed,
                        values,
                    });
                }
                rows.push(per_seed);
            }
            table.rows = interleave(rows);
            table
        }
        AblationMode::Noise => {
            let mut table = AblationTable::new(mode, &UNCERTAINTY);
            for c in &seeded {
                let base = TrainConfig {
                    noise_gamma: 1.0,
                    ..c.clone()
                };
                let data = prepare_data(&base)?;
                let mut model = Model::new(base.clone(), data.vocab.clone());
                train_model(&mut model, &data.train)?;
                let mut per_seed = Vec::new();
                for g in NOISE_LEVELS {
                    let spec = TrainConfig {
                        noise_gamma: g,
                        ..base.clone()
                    }
                    .val_spec();
                    let val =
                        encode_dialogs(&gen_synthetic(&spec)?, &data.vocab, Limits::default());
                    let e = evaluate(&model, &val, &run_id(&base))?;
                    per_seed.push(AblationRow {
                        label: format!("gamma={g}"),
                        seed: c.seed,
                        values: uncertainty_values(&e),
                    });
                }
                rows.push(per_seed);
            }
            table.rows = interleave(rows);
            table
        }
        AblationMode::DataFraction => {
            let mut cols: Vec<&str> = UNCERTAINTY.to_vec();
            cols.push("R1");
            let mut table = AblationTable::new(mode, &cols);
            for c in &seeded {
                let data = prepare_data(c)?;
                let mut per_seed = Vec::new();
                for f in DATA_FRACTIONS {
                    let r = run_on(
                        &TrainConfig {
                            data_fraction: f,
                            ..c.clone()
                        },
                        &data,
                    )?;
                    let mut values = uncertainty_values(&r.eval);
                    values.push(r.eval.metrics.r1);
                    per_seed.push(AblationRow {
                        label: format!("{}%", (f * 100.0).round()),
                        seed: c.seed,
                        values,
                    });
                }
                rows.push(per_seed);
            }
            table.rows = interleave(rows);
            table
        }
    };
    Ok(table)
}

/// Seed-major blocks to variant-major order.
fn interleave(blocks: Vec<Vec<AblationRow>>) -> Vec<AblationRow> {
    let n = blocks.first().map_or(0, Vec::len);
    let mut out = Vec::new();
    for i in 0..n {
        for b in &blocks {
            out.push(b[i].clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_loss_variants_keep_latent_terms() {
        let v = loss_variants(&LossFlags::all());
        assert_eq!(v.len(), 7);
        assert_eq!(
            v.iter().map(|x| x.0).collect::<Vec<_>>(),
            ["CE", "VE", "GCE", "CE+VE", "VE+GCE", "CE+GCE", "ACE"]
        );
        for (_, f) in &v {
            assert!(f.has(LossTerm::Kl) && f.has(LossTerm::Div) && f.has(LossTerm::Tok));
        }
        assert!(!v[0].1.has(LossTerm::Gce) && v[6].1.has(LossTerm::Udl));
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in [
            "losses",
            "noise",
            "data-fraction",
            "dropout-placement",
            "eta",
        ] {
            assert_eq!(m.parse::<AblationMode>().unwrap().name(), m);
        }
        assert!("bogus".parse::<AblationMode>().is_err());
    }

    #[test]
    fn table_statistics() {
        let mut t = AblationTable::new(AblationMode::Losses, &["R1"]);
        for (s, v) in [(1, 0.3), (2, 0.1), (3, 0.2)] {
            t.rows.push(AblationRow {
                label: "CE".into(),
                seed: s,
                values: vec![v],
            });
        }
        assert_eq!(t.median("CE", "R1"), 0.2);
        assert!((t.mean("CE", "R1") - 0.2).abs() < 1e-12);
        assert_eq!(t.labels(), ["CE"]);
        assert!(t.values("CE", "R5").is_empty());
    }
}
