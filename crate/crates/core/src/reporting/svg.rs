//! Minimal inline SVG line charts.

use std::fmt::Write;

use super::html_escape;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 240.0;
const MARGIN: f64 = 48.0;

pub(crate) struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: Vec<(f64, f64)>,
    /// Draw as a step function (value held until the next point).
    pub step: bool,
}

pub(crate) fn line_chart(title: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let mut out = String::new();
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" role="img"><title>{}</title>"#,
        html_escape(title)
    );
    let _ = write!(
        out,
        r##"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#fff"/><line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}" stroke="#333"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}" stroke="#333"/>"##,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN / 2.0,
    );
    if !x0.is_finite() {
        out.push_str(r#"<text x="320" y="120" text-anchor="middle">no data</text></svg>"#);
        return out;
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= 0.0 {
        y1 = 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 1.5 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - y / y1 * (HEIGHT - 2.0 * MARGIN);
    let _ = write!(
        out,
        r#"<text x="4" y="{:.1}" font-size="10">{:.1}</text><text x="4" y="{:.1}" font-size="10">0</text><text x="{MARGIN}" y="{:.1}" font-size="10">{}</text><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">+{:.0} s</text>"#,
        sy(y1) + 4.0,
        y1,
        sy(0.0),
        MARGIN - 8.0,
        html_escape(y_label),
        WIDTH - MARGIN / 2.0,
        HEIGHT - MARGIN + 16.0,
        x1 - x0
    );
    for (k, s) in series.iter().enumerate() {
        let mut path = String::new();
        let mut last_y = None;
        for &(x, y) in &s.points {
            if s.step {
                if let Some(ly) = last_y {
                    let _ = write!(path, "{:.2},{:.2} ", sx(x), sy(ly));
                }
            }
            let _ = write!(path, "{:.2},{:.2} ", sx(x), sy(y));
            last_y = Some(y);
        }
        if s.step {
            if let Some(ly) = last_y {
                let _ = write!(path, "{:.2},{:.2}", sx(x1), sy(ly));
            }
        }
        let _ = write!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/><text x="{:.1}" y="{:.1}" font-size="10" fill="{}">{}</text>"#,
            s.color,
            path.trim_end(),
            WIDTH - 180.0,
            MARGIN - 20.0 + 12.0 * k as f64,
            s.color,
            html_escape(s.label)
        );
    }
    out.push_str("</svg>");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_chart_says_so() {
        let svg = line_chart("t", "W", &[]);
        assert!(svg.contains("no data"));
        assert!(svg.ends_with("</svg>"));
    }

    #[test]
    fn deterministic_and_escaped() {
        let s = || Series {
            label: "a<b",
            color: "#000",
            points: vec![(0.0, 1.0), (1.0, 2.0)],
            step: true,
        };
        let a = line_chart("x", "W", &[s()]);
        assert_eq!(a, line_chart("x", "W", &[s()]));
        assert!(a.contains("a&lt;b"));
    }
}
