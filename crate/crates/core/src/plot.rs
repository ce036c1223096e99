//! Self-contained SVG line charts of loss and accuracy curves.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::persist::{HistoryRow, MetricsRow};

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Loss,
    Accuracy,
}

/// One series per `(phase, split)` in first-appearance order. Rows without
/// the requested metric are skipped.
pub fn history_series(rows: &[HistoryRow], metric: Metric) -> Vec<Series> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut by_key: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let y = match metric {
            Metric::Loss => Some(r.loss),
            Metric::Accuracy => r.acc,
        };
        let Some(y) = y else { continue };
        let key = (r.phase.clone(), r.split.clone());
        if !by_key.contains_key(&key) {
            order.push(key.clone());
        }
        by_key.entry(key).or_default().push((r.epoch as f64, y));
    }
    order
        .into_iter()
        .map(|k| Series {
            label: format!("{} / {}", k.0, k.1),
            points: by_key.remove(&k).unwrap_or_default(),
        })
        .collect()
}

/// Training loss and test accuracies of a training log.
pub fn metrics_series(rows: &[MetricsRow], metric: Metric) -> Vec<Series> {
    let pts = |f: &dyn Fn(&MetricsRow) -> Option<f64>| -> Vec<(f64, f64)> {
        rows.iter().filter_map(|r| f(r).map(|y| (r.epoch as f64, y))).collect()
    };
    let mut out = match metric {
        Metric::Loss => vec![Series {
            label: "train loss".into(),
            points: pts(&|r| Some(r.train_loss)),
        }],
        Metric::Accuracy => vec![
            Series {
                label: "test top-1".into(),
                points: pts(&|r| Some(r.test_top1)),
            },
            Series {
                label: "test top-5".into(),
                points: pts(&|r| r.test_top5),
            },
        ],
    };
    out.retain(|s| !s.points.is_empty());
    out
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Round tick step of roughly `span / 5`.
fn tick_step(span: f64) -> f64 {
    let raw = (span / 5.0).max(1e-12);
    let mag = 10f64.powf(raw.log10().floor());
    let m = raw / mag;
    let nice = if m < 1.5 {
        1.0
    } else if m < 3.5 {
        2.0
    } else if m < 7.5 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    format!("{v:.decimals$}")
}

/// A line chart with axes, ticks, and a legend; one `<polyline>` per series.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::Input("nothing to plot".into()));
    }
    if all.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Input("cannot plot non-finite values".into()));
    }
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 200.0, 40.0, 55.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| all.iter().map(sel).fold(init, f);
    let (mut x0, mut x1) = (fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0));
    let (mut y0, mut y1) = (fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1));
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5 * y0.abs().max(1.0);
        y1 += 0.5 * y1.abs().max(1.0);
    }
    let pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let xs = tick_step(x1 - x0);
    let mut t = (x0 / xs).ceil() * xs;
    while t <= x1 + 1e-9 {
        let x = sx(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.1}" y1="{b:.1}" x2="{x:.1}" y2="{b2:.1}" stroke="black"/><text x="{x:.1}" y="{ty:.1}" text-anchor="middle">{}</text>"##,
            fmt_tick(t, xs),
            b = top + ph,
            b2 = top + ph + 5.0,
            ty = top + ph + 18.0
        );
        t += xs;
    }
    let ys = tick_step(y1 - y0);
    let mut t = (y0 / ys).ceil() * ys;
    while t <= y1 + 1e-12 {
        let y = sy(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{l2:.1}" y1="{y:.1}" x2="{left}" y2="{y:.1}" stroke="black"/><line x1="{left}" y1="{y:.1}" x2="{r:.1}" y2="{y:.1}" stroke="#dddddd"/><text x="{tx:.1}" y="{ty:.1}" text-anchor="end">{}</text>"##,
            fmt_tick(t, ys),
            l2 = left - 5.0,
            r = left + pw,
            tx = left - 8.0,
            ty = y + 4.0
        );
        t += ys;
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{cy}" text-anchor="middle" transform="rotate(-90 18 {cy})">{}</text>"#,
        escape(y_label),
        cy = top + ph / 2.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 10.0 + 20.0 * i as f64;
        let lx = left + pw + 15.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            lx + 22.0,
            lx + 28.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(phase: &str, epoch: u64, split: &str, loss: f64, acc: Option<f64>) -> HistoryRow {
        HistoryRow {
            phase: phase.into(),
            epoch,
            split: split.into(),
            loss,
            acc,
        }
    }

    #[test]
    fn one_polyline_per_series() {
        let rows = vec![row("finetune", 1, "train", 1.0, Some(0.4)), row("finetune", 1, "val", 1.1, Some(0.3))];
        let svg = render_svg("t", "epoch", "loss", &history_series(&rows, Metric::Loss)).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn accuracy_skips_rows_without_it() {
        let rows = vec![
            row("car_search", 1, "train", 0.8, None),
            row("car_search", 2, "train", 0.7, None),
            row("finetune", 1, "train", 1.0, Some(0.5)),
        ];
        assert_eq!(history_series(&rows, Metric::Loss).len(), 2);
        let acc = history_series(&rows, Metric::Accuracy);
        assert_eq!(acc.len(), 1);
        assert_eq!(acc[0].label, "finetune / train");
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(render_svg("t", "x", "y", &[]).is_err());
    }

    #[test]
    fn labels_are_escaped() {
        let s = Series {
            label: "a<b".into(),
            points: vec![(0.0, 1.0), (1.0, 2.0)],
        };
        assert!(render_svg("t", "x", "y", &[s]).unwrap().contains("a&lt;b"));
    }
}
