use std::fmt::Write;

use dualvla::harness::MetricsRecord;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 40.0;

type Series = (&'static str, fn(&MetricsRecord) -> f64, &'static str);

const SERIES: [Series; 4] = [
    ("total", |r| r.total, "#1f77b4"),
    ("fm_post", |r| r.fm_post, "#d62728"),
    ("fm_prior", |r| r.fm_prior, "#2ca02c"),
    ("llr", |r| r.llr, "#9467bd"),
];

/// Loss curves as a 2×2 grid of line charts, one per loss term.
pub fn render(records: &[MetricsRecord], config_hash: &str) -> String {
    let (w, h) = (2.0 * PANEL_W, 2.0 * PANEL_H + 20.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, "<!-- config {config_hash} -->");
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="8" y="14">{} records, config {}</text>"#,
        records.len(),
        &config_hash[..12.min(config_hash.len())]
    );
    for (i, (name, get, color)) in SERIES.iter().enumerate() {
        let x0 = (i % 2) as f64 * PANEL_W;
        let y0 = 20.0 + (i / 2) as f64 * PANEL_H;
        panel(&mut s, records, name, *get, color, x0, y0);
    }
    s.push_str("</svg>\n");
    s
}

fn panel(s: &mut String, records: &[MetricsRecord], name: &str, get: fn(&MetricsRecord) -> f64, color: &str, x0: f64, y0: f64) {
    let (pw, ph) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
    let (left, top) = (x0 + MARGIN, y0 + MARGIN);
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>"##
    );
    let _ = writeln!(s, r#"<text x="{left}" y="{}">{name}</text>"#, top - 6.0);
    let pts: Vec<(f64, f64)> = records
        .iter()
        .map(|r| (r.step as f64, get(r)))
        .filter(|(_, y)| y.is_finite())
        .collect();
    if pts.is_empty() {
        return;
    }
    let (xmin, xmax) = bounds(pts.iter().map(|p| p.0));
    let (ymin, ymax) = bounds(pts.iter().map(|p| p.1));
    let sx = |x: f64| left + (x - xmin) / (xmax - xmin) * pw;
    let sy = |y: f64| top + ph - (y - ymin) / (ymax - ymin) * ph;
    let line: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
        line.join(" ")
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{ymax:.4}</text>"#, left - 3.0, top + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{ymin:.4}</text>"#, left - 3.0, top + ph);
    let _ = writeln!(s, r#"<text x="{left}" y="{}">{xmin}</text>"#, top + ph + 14.0);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">step {xmax}</text>"#,
        left + pw,
        top + ph + 14.0
    );
}

/// Min and max, widened so a flat series still has a nonzero range.
fn bounds(it: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}
