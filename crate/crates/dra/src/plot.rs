//! Score-distribution histograms as standalone SVG.

use std::fmt::Write;

use dra_core::eval::ScoredExample;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 240.0;
const MARGIN: f64 = 32.0;

/// Overlaid histograms of normal (blue) and anomaly (red) composite scores.
pub fn score_histogram_svg(scored: &[ScoredExample], bins: usize, title: &str) -> String {
    let bins = bins.max(1);
    let (lo, hi) = scored
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.score), hi.max(s.score)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut counts = [vec![0usize; bins], vec![0usize; bins]];
    for s in scored {
        let b = (((s.score - lo) / span) * bins as f64).floor() as usize;
        counts[usize::from(s.label == 1)][b.min(bins - 1)] += 1;
    }
    let peak = counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let bar_w = (WIDTH - 2.0 * MARGIN) / bins as f64;
    let plot_h = HEIGHT - 2.0 * MARGIN;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="20" font-family="sans-serif" font-size="12">{}</text>"#,
        escape(title)
    );
    for (series, colour) in [(0, "#3366cc"), (1, "#dc3912")] {
        for (i, &c) in counts[series].iter().enumerate() {
            if c == 0 {
                continue;
            }
            let h = plot_h * c as f64 / peak;
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{colour}" fill-opacity="0.5"/>"#,
                MARGIN + i as f64 * bar_w,
                HEIGHT - MARGIN - h,
                bar_w,
                h
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/>"#,
        y = HEIGHT - MARGIN,
        x2 = WIDTH - MARGIN
    );
    for (x, v) in [(MARGIN, lo), (WIDTH - MARGIN, if hi > lo { hi } else { lo + 1.0 })] {
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{v:.3}</text>"#,
            HEIGHT - MARGIN + 14.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(score: f64, label: u8) -> ScoredExample {
        ScoredExample {
            id: String::new(),
            label,
            class: None,
            score,
            per_scale: Vec::new(),
        }
    }

    #[test]
    fn one_bar_per_occupied_bin() {
        let svg = score_histogram_svg(&[ex(0.0, 0), ex(0.1, 0), ex(1.0, 1)], 4, "a<b");
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("a&lt;b"));
        assert_eq!(svg.matches("fill-opacity").count(), 2);
    }

    #[test]
    fn constant_scores_do_not_divide_by_zero() {
        let svg = score_histogram_svg(&[ex(2.0, 0), ex(2.0, 1)], 10, "");
        assert!(!svg.contains("NaN"));
    }
}
