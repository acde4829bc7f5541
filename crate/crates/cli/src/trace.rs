//! Routing trace export: one row per window, coloured by the expert set the
//! router picked for the token that feeds the forecast head.

use std::collections::BTreeMap;
use std::fmt::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// Series index of the first forecast target.
    pub step: usize,
    pub actual: f64,
    /// One-step-ahead forecast, natural units.
    pub forecast: f64,
    /// Selected experts, best first.
    pub experts: Vec<usize>,
    /// Renormalised weights of `experts`, same order.
    pub weights: Vec<f64>,
}

impl TraceRow {
    /// Order-free key of the expert set.
    pub fn set_key(&self) -> String {
        let mut e = self.experts.clone();
        e.sort_unstable();
        e.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("+")
    }
}

pub fn to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,actual,forecast,expert_ids,weights\n");
    for r in rows {
        let ids: Vec<String> = r.experts.iter().map(|e| e.to_string()).collect();
        let ws: Vec<String> = r.weights.iter().map(|w| format!("{w:.6}")).collect();
        writeln!(out, "{},{},{},{},{}", r.step, r.actual, r.forecast, ids.join(";"), ws.join(";")).unwrap();
    }
    out
}

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
    "#17becf", "#393b79", "#637939",
];

/// Stable colour for the n-th distinct set; falls back to a golden-angle hue
/// walk once the palette runs out.
fn color(n: usize) -> String {
    if n < PALETTE.len() {
        return PALETTE[n].to_string();
    }
    let h = (n as f64 * 137.508) % 360.0;
    let (s, l) = (0.65, 0.45);
    let c = (1.0 - (2.0 * l - 1.0f64).abs()) * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    let to = |v: f64| ((v + m) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", to(r), to(g), to(b))
}

/// Colour per expert set, in order of first appearance.
pub fn set_colors(rows: &[TraceRow]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for r in rows {
        let n = out.len();
        out.entry(r.set_key()).or_insert_with(|| color(n));
    }
    out
}

pub fn to_svg(rows: &[TraceRow], title: &str) -> String {
    let (w, h, pad) = (960.0, 360.0, 40.0);
    let colors = set_colors(rows);
    let (lo, hi) = rows
        .iter()
        .flat_map(|r| [r.actual, r.forecast])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = rows.len().max(2) as f64 - 1.0;
    let px = |i: usize| pad + (w - 2.0 * pad - 160.0) * i as f64 / n;
    let py = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / span;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{pad}" y="20" font-family="sans-serif" font-size="13">{}</text>"#, escape(title)).unwrap();
    let actual: Vec<String> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{:.2},{:.2}", px(i), py(r.actual)))
        .collect();
    writeln!(
        s,
        r##"<polyline class="actual" fill="none" stroke="#999999" stroke-width="1" points="{}"/>"##,
        actual.join(" ")
    )
    .unwrap();
    for pair in rows.windows(2).enumerate() {
        let (i, p) = pair;
        writeln!(
            s,
            r#"<line class="forecast" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="1.5"/>"#,
            px(i),
            py(p[0].forecast),
            px(i + 1),
            py(p[1].forecast),
            colors[&p[0].set_key()]
        )
        .unwrap();
    }
    for (i, r) in rows.iter().enumerate() {
        let key = r.set_key();
        writeln!(
            s,
            r#"<circle class="pt" data-step="{}" data-set="{key}" cx="{:.2}" cy="{:.2}" r="2" fill="{}"/>"#,
            r.step,
            px(i),
            py(r.forecast),
            colors[&key]
        )
        .unwrap();
    }
    let lx = w - pad - 140.0;
    for (j, (key, c)) in colors.iter().enumerate() {
        let y = pad + 16.0 * j as f64;
        writeln!(s, r#"<rect class="legend" x="{lx}" y="{y}" width="10" height="10" fill="{c}"/>"#).unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">experts {key}</text>"#,
            lx + 14.0,
            y + 9.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    fn row(step: usize, experts: Vec<usize>) -> TraceRow {
        TraceRow {
            step,
            actual: step as f64,
            forecast: step as f64 + 0.5,
            weights: vec![1.0 / experts.len() as f64; experts.len()],
            experts,
        }
    }

    #[test]
    fn set_key_ignores_order() {
        assert_eq!(row(0, vec![3, 1]).set_key(), row(0, vec![1, 3]).set_key());
    }

    #[test]
    fn svg_colors_match_sets() {
        let rows: Vec<_> = (0..30).map(|i| row(i, vec![i % 4, 4 + i % 3])).collect();
        let svg = to_svg(&rows, "t");
        let fills: BTreeSet<&str> = svg
            .lines()
            .filter(|l| l.starts_with("<circle"))
            .map(|l| l.split("fill=\"").nth(1).unwrap().split('"').next().unwrap())
            .collect();
        let sets: BTreeSet<String> = rows.iter().map(TraceRow::set_key).collect();
        assert_eq!(fills.len(), sets.len());
        assert_eq!(sets.len(), 12);
    }

    #[test]
    fn colors_stay_distinct_past_palette() {
        let all: BTreeSet<String> = (0..40).map(color).collect();
        assert_eq!(all.len(), 40);
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let csv = to_csv(&[row(5, vec![2]), row(6, vec![0])]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "5,5,5.5,2,1.000000");
    }
}
