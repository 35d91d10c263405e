//! Validation accuracy per iteration as a standalone SVG line chart.

use std::fmt::Write;

use defectlab_core::active_learning::HistoryRow;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

pub fn history_svg(history: &[HistoryRow], title: &str) -> String {
    let max_x = history.iter().map(|r| r.iteration).max().unwrap_or(1).max(1) as f64;
    let x = |i: usize| PAD + (i as f64 / max_x) * (W - 2.0 * PAD);
    let y = |acc: f64| H - PAD - acc.clamp(0.0, 1.0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{PAD}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="#ddd"/><text x="{2}" y="{3:.1}" text-anchor="end">{v:.1}</text>"##,
            y(v),
            W - PAD,
            PAD - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{0}" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">query</text><text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">validation accuracy</text>"#,
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0
    );
    if !history.is_empty() {
        let points: Vec<String> = history
            .iter()
            .map(|r| format!("{:.1},{:.1}", x(r.iteration), y(r.val_accuracy)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##,
            points.join(" ")
        );
        for r in history {
            let _ = writeln!(
                s,
                r##"<circle cx="{:.1}" cy="{:.1}" r="3" fill="#1f77b4"><title>query {}: {:.4} ({} labeled)</title></circle>"##,
                x(r.iteration),
                y(r.val_accuracy),
                r.iteration,
                r.val_accuracy,
                r.labeled_count
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(accs: &[f64]) -> Vec<HistoryRow> {
        accs.iter()
            .enumerate()
            .map(|(i, &a)| HistoryRow {
                iteration: i + 1,
                val_accuracy: a,
                labeled_count: 10 * (i + 1),
                timestamp: Default::default(),
            })
            .collect()
    }

    #[test]
    fn one_marker_per_row_and_points_stay_in_the_plot_area() {
        let svg = history_svg(&rows(&[0.5, 0.9, 1.0]), "a <b>");
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("a &lt;b&gt;"));
        let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        for p in pts.split(' ') {
            let (_, yv) = p.split_once(',').unwrap();
            let yv: f64 = yv.parse().unwrap();
            assert!((PAD..=H - PAD).contains(&yv));
        }
    }

    #[test]
    fn empty_history_renders_axes_only() {
        let svg = history_svg(&[], "t");
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(!svg.contains("<polyline"));
    }
}
