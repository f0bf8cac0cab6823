//! Minimal SVG writers: scatter, beeswarm and bar charts.

use std::fmt::Write as _;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn header(w: f64, h: f64, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    s
}

/// Points coloured by integer label, with a legend.
pub fn scatter(points: &[(f64, f64)], labels: &[usize], title: &str, x_label: &str, y_label: &str) -> String {
    let (w, h, m) = (640.0, 520.0, 50.0);
    let (x0, x1) = range(points.iter().map(|p| p.0));
    let (y0, y1) = range(points.iter().map(|p| p.1));
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m - 80.0);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = header(w, h, title);
    let _ = writeln!(
        s,
        r##"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
        w - 2.0 * m - 80.0,
        h - 2.0 * m
    );
    for (p, &l) in points.iter().zip(labels) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
            sx(p.0),
            sy(p.1),
            color(l)
        );
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    for c in 0..k {
        let y = m + 10.0 + 16.0 * c as f64;
        let _ = writeln!(
            s,
            r#"<circle cx="{}" cy="{y}" r="4" fill="{}"/><text x="{}" y="{}">cluster {c}</text>"#,
            w - m - 60.0,
            color(c),
            w - m - 50.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (w - 80.0) / 2.0,
        h - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    s.push_str("</svg>\n");
    s
}

fn value_color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let (r0, g0, b0) = (0x1f as f64, 0x77 as f64, 0xb4 as f64);
    let (r1, g1, b1) = (0xd6 as f64, 0x27 as f64, 0x28 as f64);
    format!(
        "#{:02x}{:02x}{:02x}",
        (r0 + t * (r1 - r0)).round() as u8,
        (g0 + t * (g1 - g0)).round() as u8,
        (b0 + t * (b1 - b0)).round() as u8
    )
}

/// One row per feature: points at their SHAP value, stacked vertically within
/// pixel bins, coloured from low (blue) to high (red) feature value.
pub fn beeswarm(rows: &[(String, Vec<(f64, f64)>)], title: &str) -> String {
    let row_h = 28.0;
    let (w, left, right, top) = (760.0, 190.0, 40.0, 40.0);
    let h = top + row_h * rows.len() as f64 + 50.0;
    let (x0, x1) = range(rows.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.1)));
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let mut s = header(w, h, title);
    let zero = sx(0.0);
    if (left..=w - right).contains(&zero) {
        let _ = writeln!(
            s,
            r##"<line x1="{zero:.2}" y1="{top}" x2="{zero:.2}" y2="{}" stroke="#999"/>"##,
            h - 50.0
        );
    }
    for (r, (name, pts)) in rows.iter().enumerate() {
        let cy = top + row_h * (r as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            left - 8.0,
            cy + 4.0,
            escape(name)
        );
        let (v0, v1) = range(pts.iter().map(|p| p.0));
        let mut bins: std::collections::HashMap<i64, usize> = Default::default();
        for &(v, phi) in pts {
            let x = sx(phi);
            let count = bins.entry((x / 2.0).floor() as i64).or_insert(0);
            let step = (*count as f64 / 2.0).ceil() * if *count % 2 == 0 { 1.0 } else { -1.0 };
            *count += 1;
            let y = cy + (step * 1.2).clamp(-row_h / 2.0 + 2.0, row_h / 2.0 - 2.0);
            let _ = writeln!(
                s,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.6" fill="{}"/>"#,
                value_color((v - v0) / (v1 - v0))
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">SHAP value (log-odds)</text>"#,
        (left + w - right) / 2.0,
        h - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="{}">{x0:.3}</text><text x="{}" y="{}" text-anchor="end">{x1:.3}</text>"#,
        h - 35.0,
        w - right,
        h - 35.0
    );
    s.push_str("</svg>\n");
    s
}

/// Vertical bars with per-bar colour index and labels.
pub fn bars(labels: &[String], values: &[f64], groups: &[usize], title: &str, y_label: &str) -> String {
    let (w, h, m) = (40.0 + 24.0 * labels.len().max(10) as f64, 380.0, 50.0);
    let (_, y1) = range(values.iter().copied().chain(std::iter::once(0.0)));
    let bw = (w - 2.0 * m) / labels.len().max(1) as f64;
    let sy = |y: f64| h - m - y / y1 * (h - 2.0 * m);
    let mut s = header(w, h, title);
    for (i, ((label, &v), &g)) in labels.iter().zip(values).zip(groups).enumerate() {
        let x = m + bw * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            x + 2.0,
            sy(v.max(0.0)),
            bw - 4.0,
            (h - m - sy(v.max(0.0))).max(0.0),
            color(g)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" font-size="9" text-anchor="end" transform="rotate(-60 {:.2} {})">{}</text>"#,
            x + bw / 2.0,
            h - m + 12.0,
            x + bw / 2.0,
            h - m + 12.0,
            escape(label)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_formed_and_escaped() {
        let s = scatter(&[(0.0, 0.0), (1.0, 2.0)], &[0, 1], "a<b", "x", "y");
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b"));
        assert_eq!(s.matches("<circle").count(), 2 + 2);
        let b = beeswarm(&[("f".into(), vec![(0.0, -1.0), (1.0, 1.0), (0.5, 1.0)])], "t");
        assert_eq!(b.matches("<circle").count(), 3);
        let c = bars(&["p1".into(), "p2".into()], &[0.2, 0.8], &[0, 1], "t", "p");
        assert_eq!(c.matches("<rect").count(), 3);
    }

    #[test]
    fn degenerate_ranges_are_finite() {
        let s = scatter(&[(1.0, 1.0), (1.0, 1.0)], &[0, 0], "t", "x", "y");
        assert!(!s.contains("NaN") && !s.contains("inf"));
    }
}
