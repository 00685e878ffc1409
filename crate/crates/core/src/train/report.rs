//! File artifacts for training runs and ablation tables.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! CSV reloads to bit-identical numbers.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::uncertainty::{write_attention_grid, UncertaintyReport};

use super::ablate::AblationTable;
use super::run::{EpochStats, ExperimentResult, GeneratedAnswer, MetricsRow, UncertaintyRow};

pub const METRICS_FILE: &str = "metrics.csv";
pub const UNCERTAINTY_FILE: &str = "uncertainty.csv";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const GENERATED_FILE: &str = "generated.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ATTENTION_DIR: &str = "attention";
pub const MODEL_DIR: &str = "model";

pub const METRICS_HEADER: [&str; 8] = [
    "run_id",
    "R1",
    "R5",
    "R10",
    "MRR",
    "mean_rank",
    "NDCG",
    "sigma_o",
];
pub const UNCERTAINTY_HEADER: [&str; 6] = [
    "dialog_id",
    "round",
    "entropy",
    "aleatoric",
    "epistemic",
    "sigma2_p",
];
pub const LOSS_CURVE_HEADER: [&str; 3] = ["epoch", "component", "value"];

/// One `(epoch, component, value)` row of the loss-curve table.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub component: String,
    pub value: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            msg: format!("{other:?}"),
        },
    }
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn write_rows<const N: usize>(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = [String; N]>,
) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let got = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            msg: format!("unexpected header {:?}", got.iter().collect::<Vec<_>>()),
        });
    }
    r.records()
        .map(|x| x.map_err(|e| csv_err(path, e)))
        .collect()
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            msg: format!("bad field {i} in row {:?}", rec.iter().collect::<Vec<_>>()),
        })
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_rows(
        path,
        &METRICS_HEADER,
        rows.iter().map(|m| {
            [
                m.run_id.clone(),
                m.r1.to_string(),
                m.r5.to_string(),
                m.r10.to_string(),
                m.mrr.to_string(),
                m.mean_rank.to_string(),
                m.ndcg.to_string(),
                m.sigma_o.to_string(),
            ]
        }),
    )
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    read_rows(path, &METRICS_HEADER)?
        .iter()
        .map(|r| {
            Ok(MetricsRow {
                run_id: field(path, r, 0)?,
                r1: field(path, r, 1)?,
                r5: field(path, r, 2)?,
                r10: field(path, r, 3)?,
                mrr: field(path, r, 4)?,
                mean_rank: field(path, r, 5)?,
                ndcg: field(path, r, 6)?,
                sigma_o: field(path, r, 7)?,
            })
        })
        .collect()
}

pub fn write_uncertainty(path: &Path, rows: &[UncertaintyRow]) -> Result<()> {
    write_rows(
        path,
        &UNCERTAINTY_HEADER,
        rows.iter().map(|u| {
            let r = &u.report;
            [
                u.dialog_id.to_string(),
                u.round.to_string(),
                r.entropy.to_string(),
                r.aleatoric_mean.to_string(),
                r.epistemic_var.to_string(),
                r.sigma_sq_p.to_string(),
            ]
        }),
    )
}

pub fn read_uncertainty(path: &Path) -> Result<Vec<UncertaintyRow>> {
    read_rows(path, &UNCERTAINTY_HEADER)?
        .iter()
        .map(|r| {
            Ok(UncertaintyRow {
                dialog_id: field(path, r, 0)?,
                round: field(path, r, 1)?,
                report: UncertaintyReport {
                    entropy: field(path, r, 2)?,
                    aleatoric_mean: field(path, r, 3)?,
                    epistemic_var: field(path, r, 4)?,
                    sigma_sq_p: field(path, r, 5)?,
                },
            })
        })
        .collect()
}

/// One row per epoch per component, epochs numbered from 1.
pub fn loss_curve(epochs: &[EpochStats]) -> Vec<CurvePoint> {
    epochs
        .iter()
        .flat_map(|e| {
            EpochStats::COMPONENTS
                .iter()
                .zip(e.values())
                .map(|(c, v)| CurvePoint {
                    epoch: e.epoch,
                    component: c.to_string(),
                    value: v,
                })
        })
        .collect()
}

pub fn write_loss_curve(path: &Path, epochs: &[EpochStats]) -> Result<()> {
    write_rows(
        path,
        &LOSS_CURVE_HEADER,
        loss_curve(epochs)
            .into_iter()
            .map(|p| [p.epoch.to_string(), p.component, p.value.to_string()]),
    )
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    read_rows(path, &LOSS_CURVE_HEADER)?
        .iter()
        .map(|r| {
            Ok(CurvePoint {
                epoch: field(path, r, 0)?,
                component: field(path, r, 1)?,
                value: field(path, r, 2)?,
            })
        })
        .collect()
}

pub fn write_generated(path: &Path, rows: &[GeneratedAnswer]) -> Result<()> {
    write_rows(
        path,
        &["dialog_id", "round", "answer"],
        rows.iter()
            .map(|g| [g.dialog_id.to_string(), g.round.to_string(), g.text.clone()]),
    )
}

/// `label, seed, <columns...>`.
pub fn write_ablation(path: &Path, table: &AblationTable) -> Result<()> {
    let mut header = vec!["label".to_string(), "seed".to_string()];
    header.extend(table.columns.iter().cloned());
    let mut w = writer(path)?;
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in &table.rows {
        let mut rec = vec![r.label.clone(), r.seed.to_string()];
        rec.extend(r.values.iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rows of an ablation CSV as `(label, seed, values)`, plus the value columns.
pub fn read_ablation(path: &Path) -> Result<(Vec<String>, Vec<(String, u64, Vec<f64>)>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 2 || header[0] != "label" || header[1] != "seed" {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            msg: "ablation header must start with label,seed".into(),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let values = (2..header.len())
            .map(|i| field(path, &rec, i))
            .collect::<Result<Vec<f64>>>()?;
        rows.push((field(path, &rec, 0)?, field(path, &rec, 1)?, values));
    }
    Ok((header[2..].to_vec(), rows))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Plain-text run summary. Wall-clock time is the only non-reproducible line.
pub fn summary_text(result: &ExperimentResult) -> String {
    let mut s = String::new();
    let cfg = &result.model.cfg;
    let _ = writeln!(s, "seed: {}", cfg.seed);
    let _ = writeln!(s, "epochs: {}", result.epochs.len());
    let _ = writeln!(s, "losses: {}", cfg.losses);
    if let (Some(first), Some(last)) = (result.epochs.first(), result.epochs.last()) {
        let _ = writeln!(s, "total cost: {:.6} -> {:.6}", first.total, last.total);
        let _ = writeln!(
            s,
            "mean predicted variance: {:.6e} -> {:.6e}",
            first.variance, last.variance
        );
    }
    for m in [&result.eval.metrics, &result.eval.decoder_metrics] {
        let _ = writeln!(
            s,
            "{}: R@1 {:.4}  R@5 {:.4}  R@10 {:.4}  MRR {:.4}  mean rank {:.3}  NDCG {:.4}  sigma_o {:.4}",
            m.run_id, m.r1, m.r5, m.r10, m.mrr, m.mean_rank, m.ndcg, m.sigma_o
        );
    }
    let u = result.eval.mean_report();
    let _ = writeln!(
        s,
        "uncertainty: entropy {:.6}  aleatoric {:.6e}  epistemic {:.6e}  sigma2_p {:.6}",
        u.entropy, u.aleatoric_mean, u.epistemic_var, u.sigma_sq_p
    );
    let _ = writeln!(s, "wall clock: {:.2} s", result.wall_clock_secs);
    s
}

/// Writes every artifact of a training run into `dir`, including the model.
pub fn write_experiment(dir: &Path, result: &ExperimentResult) -> Result<()> {
    create_dir(dir)?;
    let e = &result.eval;
    write_metrics(
        &dir.join(METRICS_FILE),
        &[e.metrics.clone(), e.decoder_metrics.clone()],
    )?;
    write_uncertainty(&dir.join(UNCERTAINTY_FILE), &e.uncertainty)?;
    write_loss_curve(&dir.join(LOSS_CURVE_FILE), &result.epochs)?;
    write_generated(&dir.join(GENERATED_FILE), &e.generated)?;
    let att = dir.join(ATTENTION_DIR);
    create_dir(&att)?;
    for a in &e.attention {
        for (tag, map) in [("alpha", &a.state.alpha), ("alpha_new", &a.state.alpha_new)] {
            let path = att.join(format!("dialog{}_round{}_{tag}.txt", a.dialog_id, a.round));
            let mut buf = Vec::new();
            write_attention_grid(map, &mut buf).map_err(|err| Error::io(&path, err))?;
            fs::File::create(&path)
                .and_then(|mut f| f.write_all(&buf))
                .map_err(|err| Error::io(&path, err))?;
        }
    }
    write_text(&dir.join(SUMMARY_FILE), &summary_text(result))?;
    result.model.save(&dir.join(MODEL_DIR))
}

/// Writes `ablation.csv` and a per-label mean table to `summary.txt`.
pub fn write_ablation_report(dir: &Path, table: &AblationTable) -> Result<()> {
    create_dir(dir)?;
    write_ablation(&dir.join(ABLATION_FILE), table)?;
    write_text(&dir.join(SUMMARY_FILE), &ablation_summary(table))
}

pub fn ablation_summary(table: &AblationTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "ablation: {}", table.mode);
    let _ = writeln!(s, "{:<18} {}", "label (mean)", table.columns.join("  "));
    for l in table.labels() {
        let vals: Vec<String> = table
            .columns
            .iter()
            .map(|c| format!("{:.6}", table.mean(&l, c)))
            .collect();
        let _ = writeln!(s, "{l:<18} {}", vals.join("  "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::ablate::{AblationMode, AblationRow};

    fn metrics(id: &str) -> MetricsRow {
        MetricsRow {
            run_id: id.into(),
            r1: 0.1 + 0.2,
            r5: 1.0 / 3.0,
            r10: 1.0,
            mrr: std::f64::consts::PI / 7.0,
            mean_rank: 2.5e-300,
            ndcg: 0.123456789012345678,
            sigma_o: 62.5,
        }
    }

    #[test]
    fn metrics_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![metrics("seed1"), metrics("seed1-decoder")];
        write_metrics(&p, &rows).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), rows);
    }

    #[test]
    fn empty_inputs_give_header_only_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        let u = dir.path().join("u.csv");
        let l = dir.path().join("l.csv");
        write_metrics(&m, &[]).unwrap();
        write_uncertainty(&u, &[]).unwrap();
        write_loss_curve(&l, &[]).unwrap();
        assert_eq!(
            fs::read_to_string(&m).unwrap(),
            "run_id,R1,R5,R10,MRR,mean_rank,NDCG,sigma_o\n"
        );
        assert_eq!(
            fs::read_to_string(&u).unwrap(),
            "dialog_id,round,entropy,aleatoric,epistemic,sigma2_p\n"
        );
        assert_eq!(fs::read_to_string(&l).unwrap(), "epoch,component,value\n");
        assert!(read_metrics(&m).unwrap().is_empty());
        let t = AblationTable {
            mode: AblationMode::Losses,
            columns: vec!["R1".into()],
            rows: vec![],
        };
        let a = dir.path().join("a.csv");
        write_ablation(&a, &t).unwrap();
        assert_eq!(fs::read_to_string(&a).unwrap(), "label,seed,R1\n");
    }

    #[test]
    fn loss_curve_has_one_row_per_epoch_and_component() {
        let mut epochs = Vec::new();
        for e in 1..=3 {
            let mut s = EpochStats {
                epoch: e,
                ..Default::default()
            };
            s.set_values(std::array::from_fn(|i| (e * 10 + i) as f64 / 3.0));
            epochs.push(s);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        write_loss_curve(&p, &epochs).unwrap();
        let back = read_loss_curve(&p).unwrap();
        assert_eq!(back.len(), 3 * EpochStats::COMPONENTS.len());
        assert_eq!(back, loss_curve(&epochs));
    }

    #[test]
    fn uncertainty_and_ablation_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![UncertaintyRow {
            dialog_id: 42,
            round: 3,
            report: UncertaintyReport {
                entropy: 1.0 / 7.0,
                aleatoric_mean: 3e-7,
                epistemic_var: 0.1 + 0.7,
                sigma_sq_p: 2.0f64.sqrt(),
            },
        }];
        let p = dir.path().join("u.csv");
        write_uncertainty(&p, &rows).unwrap();
        assert_eq!(read_uncertainty(&p).unwrap(), rows);

        let t = AblationTable {
            mode: AblationMode::Noise,
            columns: vec!["a".into(), "b".into()],
            rows: vec![AblationRow {
                label: "gamma=0.8".into(),
                seed: 2,
                values: vec![1.0 / 3.0, -0.0],
            }],
        };
        let a = dir.path().join("a.csv");
        write_ablation(&a, &t).unwrap();
        let (cols, back) = read_ablation(&a).unwrap();
        assert_eq!(cols, t.columns);
        assert_eq!(
            back,
            vec![("gamma=0.8".to_string(), 2, vec![1.0 / 3.0, -0.0])]
        );
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_metrics(&p), Err(Error::Parse { .. })));
    }
}
