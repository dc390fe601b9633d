//! Minimal SVG line plots for quick inspection of curves.

use std::fmt::Write;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub color: &'static str,
    pub dashed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 240.0;
const MARGIN: f64 = 40.0;

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Panels stacked vertically, each with its own axes.
pub fn panels(panels: &[Panel]) -> String {
    let total = HEIGHT * panels.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{total}" font-family="sans-serif" font-size="11">"#
    );
    for (i, p) in panels.iter().enumerate() {
        let top = HEIGHT * i as f64;
        let (x0, x1) = range(p.series.iter().flat_map(|s| s.x.iter().copied()));
        let (y0, y1) = range(p.series.iter().flat_map(|s| s.y.iter().copied()));
        let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
        let py = |y: f64| top + HEIGHT - MARGIN + (y0 - y) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
        let _ = writeln!(s, r#"<text x="{MARGIN}" y="{:.1}">{}</text>"#, top + 16.0, escape(&p.title));
        let _ = writeln!(
            s,
            r##"<rect x="{MARGIN}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#999"/>"##,
            top + MARGIN,
            WIDTH - 2.0 * MARGIN,
            HEIGHT - 2.0 * MARGIN
        );
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN}" y="{:.1}">{x0:.3}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{x1:.3}</text>"#,
            top + HEIGHT - MARGIN + 14.0,
            WIDTH - MARGIN,
            top + HEIGHT - MARGIN + 14.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y1:.3}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{y0:.3}</text>"#,
            MARGIN - 4.0,
            top + MARGIN + 4.0,
            MARGIN - 4.0,
            top + HEIGHT - MARGIN
        );
        for (j, series) in p.series.iter().enumerate() {
            let points: Vec<String> = series
                .x
                .iter()
                .zip(&series.y)
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let dash = if series.dashed { r#" stroke-dasharray="4 3""# } else { "" };
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{}"{dash} points="{}"/>"#,
                series.color,
                points.join(" ")
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" fill="{}" text-anchor="end">{}</text>"#,
                WIDTH - MARGIN - 4.0,
                top + MARGIN + 14.0 * (j + 1) as f64,
                series.color,
                escape(&series.label)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Mean, mean ± 2 SD and an optional truth for one function.
pub fn band_panel(title: &str, x: &[f64], mean: &[f64], sd: &[f64], truth: Option<&[f64]>) -> Panel {
    let shifted = |sign: f64| mean.iter().zip(sd).map(|(m, s)| m + sign * 2.0 * s).collect::<Vec<f64>>();
    let mut series = vec![
        Series {
            label: "mean".into(),
            x: x.to_vec(),
            y: mean.to_vec(),
            color: "black",
            dashed: false,
        },
        Series {
            label: "±2 sd".into(),
            x: x.to_vec(),
            y: shifted(1.0),
            color: "gray",
            dashed: true,
        },
        Series {
            label: String::new(),
            x: x.to_vec(),
            y: shifted(-1.0),
            color: "gray",
            dashed: true,
        },
    ];
    if let Some(t) = truth {
        series.push(Series {
            label: "truth".into(),
            x: x.to_vec(),
            y: t.to_vec(),
            color: "red",
            dashed: false,
        });
    }
    Panel {
        title: title.to_string(),
        series,
    }
}
