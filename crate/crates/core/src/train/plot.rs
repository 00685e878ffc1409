//! SVG line charts rendered from the report CSVs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::report::{
    read_ablation, read_loss_curve, read_uncertainty, ABLATION_FILE, LOSS_CURVE_FILE,
    UNCERTAINTY_FILE,
};

const PANEL_W: f64 = 260.0;
const PANEL_H: f64 = 170.0;
const MARGIN: f64 = 36.0;
const COLUMNS: usize = 3;

/// One small chart: a title and a single series of `(x, y)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub points: Vec<(f64, f64)>,
    /// optional tick labels for the x positions `0, 1, ...`
    pub x_labels: Vec<String>,
}

fn bounds(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = v.clone().fold(f64::INFINITY, f64::min);
    let hi = v.fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-300 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// A grid of panels as a standalone SVG document.
pub fn render_panels(title: &str, panels: &[Panel]) -> String {
    let rows = panels.len().div_ceil(COLUMNS).max(1);
    let cols = panels.len().clamp(1, COLUMNS);
    let width = cols as f64 * (PANEL_W + MARGIN) + MARGIN;
    let height = rows as f64 * (PANEL_H + 2.0 * MARGIN) + MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="20" font-size="14">{}</text>"#,
        escape(title)
    );
    for (i, p) in panels.iter().enumerate() {
        let ox = MARGIN + (i % COLUMNS) as f64 * (PANEL_W + MARGIN);
        let oy = MARGIN + (i / COLUMNS) as f64 * (PANEL_H + 2.0 * MARGIN) + 10.0;
        let (x0, x1) = bounds(p.points.iter().map(|q| q.0));
        let (y0, y1) = bounds(p.points.iter().map(|q| q.1));
        let sx = |x: f64| ox + (x - x0) / (x1 - x0) * PANEL_W;
        let sy = |y: f64| oy + PANEL_H - (y - y0) / (y1 - y0) * PANEL_H;
        let _ = writeln!(
            s,
            r##"<rect x="{ox}" y="{oy}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#999"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{ox}" y="{}">{}</text>"#,
            oy - 4.0,
            escape(&p.title)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{y1:.3e}</text>"#,
            ox - 2.0,
            oy + 8.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{y0:.3e}</text>"#,
            ox - 2.0,
            oy + PANEL_H
        );
        if p.x_labels.is_empty() {
            let _ = writeln!(
                s,
                r#"<text x="{ox}" y="{}">{x0}</text>"#,
                oy + PANEL_H + 12.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{x1}</text>"#,
                ox + PANEL_W,
                oy + PANEL_H + 12.0
            );
        } else {
            for (k, l) in p.x_labels.iter().enumerate() {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                    sx(k as f64),
                    oy + PANEL_H + 12.0,
                    escape(l)
                );
            }
        }
        let pts: Vec<String> = p
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{}"/>"##,
            pts.join(" ")
        );
        for &(x, y) in &p.points {
            let _ = writeln!(
                s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="2" fill="#1f77b4"/>"##,
                sx(x),
                sy(y)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn loss_panels(path: &Path) -> Result<Vec<Panel>> {
    let points = read_loss_curve(path)?;
    let mut panels: Vec<Panel> = Vec::new();
    for p in points {
        let i = match panels.iter().position(|x| x.title == p.component) {
            Some(i) => i,
            None => {
                panels.push(Panel {
                    title: p.component.clone(),
                    points: Vec::new(),
                    x_labels: Vec::new(),
                });
                panels.len() - 1
            }
        };
        panels[i].points.push((p.epoch as f64, p.value));
    }
    Ok(panels)
}

fn uncertainty_panels(path: &Path) -> Result<Vec<Panel>> {
    let rows = read_uncertainty(path)?;
    let rounds = rows.iter().map(|r| r.round + 1).max().unwrap_or(0);
    let mut sums = vec![[0.0; 4]; rounds];
    let mut counts = vec![0usize; rounds];
    for r in &rows {
        let u = &r.report;
        for (acc, v) in sums[r.round].iter_mut().zip([
            u.entropy,
            u.aleatoric_mean,
            u.epistemic_var,
            u.sigma_sq_p,
        ]) {
            *acc += v;
        }
        counts[r.round] += 1;
    }
    Ok(["entropy", "aleatoric", "epistemic", "sigma2_p"]
        .iter()
        .enumerate()
        .map(|(k, name)| Panel {
            title: format!("{name} by round"),
            points: (0..rounds)
                .filter(|&r| counts[r] > 0)
                .map(|r| (r as f64, sums[r][k] / counts[r] as f64))
                .collect(),
            x_labels: Vec::new(),
        })
        .collect())
}

fn ablation_panels(path: &Path) -> Result<Vec<Panel>> {
    let (columns, rows) = read_ablation(path)?;
    let mut labels: Vec<String> = Vec::new();
    for (l, _, _) in &rows {
        if !labels.contains(l) {
            labels.push(l.clone());
        }
    }
    Ok(columns
        .iter()
        .enumerate()
        .map(|(c, name)| Panel {
            title: format!("{name} (seed mean)"),
            points: labels
                .iter()
                .enumerate()
                .map(|(k, l)| {
                    let v: Vec<f64> = rows.iter().filter(|r| &r.0 == l).map(|r| r.2[c]).collect();
                    (k as f64, v.iter().sum::<f64>() / v.len().max(1) as f64)
                })
                .collect(),
            x_labels: labels.clone(),
        })
        .collect())
}

/// Renders every known CSV found in `dir` to an SVG next to it and returns
/// the files written.
pub fn plot_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    type Builder = fn(&Path) -> Result<Vec<Panel>>;
    let jobs: [(&str, &str, &str, Builder); 3] = [
        (
            LOSS_CURVE_FILE,
            "loss_curve.svg",
            "Loss components per epoch",
            loss_panels,
        ),
        (
            UNCERTAINTY_FILE,
            "uncertainty.svg",
            "Held-out uncertainty per round",
            uncertainty_panels,
        ),
        (ABLATION_FILE, "ablation.svg", "Ablation", ablation_panels),
    ];
    let mut written = Vec::new();
    for (csv, svg, title, build) in jobs {
        let src = dir.join(csv);
        if !src.exists() {
            continue;
        }
        let out = dir.join(svg);
        std::fs::write(&out, render_panels(title, &build(&src)?))
            .map_err(|e| Error::io(&out, e))?;
        written.push(out);
    }
    if written.is_empty() {
        return Err(Error::Usage(format!(
            "{} has none of {LOSS_CURVE_FILE}, {UNCERTAINTY_FILE}, {ABLATION_FILE}",
            dir.display()
        )));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::run::EpochStats;

    #[test]
    fn renders_one_polyline_per_panel() {
        let panels = vec![
            Panel {
                title: "a<b".into(),
                points: vec![(1.0, 2.0), (2.0, 1.0)],
                x_labels: vec![],
            },
            Panel {
                title: "flat".into(),
                points: vec![(0.0, 3.0), (1.0, 3.0)],
                x_labels: vec!["x".into(), "y".into()],
            },
        ];
        let svg = render_panels("t", &panels);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a&lt;b") && !svg.contains("NaN"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn plots_loss_curve_from_dir() {
        let dir = tempfile::tempdir().unwrap();
        assert!(plot_dir(dir.path()).is_err());
        let epochs: Vec<EpochStats> = (1..=4)
            .map(|e| EpochStats {
                epoch: e,
                total: 10.0 / e as f64,
                ..Default::default()
            })
            .collect();
        crate::train::report::write_loss_curve(&dir.path().join(LOSS_CURVE_FILE), &epochs).unwrap();
        let out = plot_dir(dir.path()).unwrap();
        assert_eq!(out, vec![dir.path().join("loss_curve.svg")]);
        let svg = std::fs::read_to_string(&out[0]).unwrap();
        assert_eq!(
            svg.matches("<polyline").count(),
            EpochStats::COMPONENTS.len()
        );
    }
}
