//! Minimal static SVG plots.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 160.0, 40.0, 50.0);
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let (l, r, _, _) = MARGIN;
        l + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - l - r)
    }

    fn py(&self, y: f64) -> f64 {
        let (_, _, t, b) = MARGIN;
        let y = y.clamp(self.y.0, self.y.1);
        HEIGHT - b - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - t - b)
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(out: &mut String, title: &str, x_label: &str, y_label: &str, frame: &Frame) {
    let (l, r, t, b) = MARGIN;
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        l + (WIDTH - l - r) / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        WIDTH - l - r,
        HEIGHT - t - b
    );
    for k in 0..=4 {
        let fx = frame.x.0 + (frame.x.1 - frame.x.0) * k as f64 / 4.0;
        let fy = frame.y.0 + (frame.y.1 - frame.y.0) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            frame.px(fx),
            HEIGHT - b + 16.0,
            tick(fx)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            l - 6.0,
            frame.py(fy) + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        l + (WIDTH - l - r) / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        t + (HEIGHT - t - b) / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn legend(out: &mut String, labels: &[&str]) {
    let x = WIDTH - MARGIN.1 + 12.0;
    for (k, label) in labels.iter().enumerate() {
        let y = MARGIN.2 + 14.0 + 18.0 * k as f64;
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#,
            x + 20.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}">{}</text>"#,
            x + 26.0,
            y + 4.0,
            escape(label)
        );
    }
}

/// Line plot with one polyline per series. Values below `y_floor` are drawn on the bottom edge.
pub fn line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
    y_floor: Option<f64>,
) -> String {
    let pts = || {
        series
            .iter()
            .flat_map(|(_, p)| p.iter())
            .filter(|p| p.0.is_finite() && p.1.is_finite())
    };
    let x = padded(
        pts().map(|p| p.0).fold(f64::INFINITY, f64::min),
        pts().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let mut y_lo = pts().map(|p| p.1).fold(f64::INFINITY, f64::min);
    if let Some(f) = y_floor {
        y_lo = y_lo.max(f);
    }
    let y = padded(y_lo, pts().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max));
    let frame = Frame { x, y };
    let mut out = String::new();
    open(&mut out, title, x_label, y_label, &frame);
    for (k, (_, points)) in series.iter().enumerate() {
        let coords: Vec<String> = points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(a, b)| format!("{:.2},{:.2}", frame.px(a), frame.py(b)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[k % PALETTE.len()],
            coords.join(" ")
        );
    }
    let labels: Vec<&str> = series.iter().map(|(l, _)| l.as_str()).collect();
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    out
}

/// Scatter plot of standardized points with a reference circle of `radius`.
pub fn scatter_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    groups: &[(String, Vec<(f64, f64)>)],
    radius: f64,
) -> String {
    let extent = groups
        .iter()
        .flat_map(|(_, p)| p.iter())
        .flat_map(|p| [p.0.abs(), p.1.abs()])
        .filter(|v| v.is_finite())
        .fold(radius, f64::max)
        * 1.05;
    let frame = Frame {
        x: (-extent, extent),
        y: (-extent, extent),
    };
    let mut out = String::new();
    open(&mut out, title, x_label, y_label, &frame);
    for (k, (_, points)) in groups.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for &(a, b) in points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="{color}" fill-opacity="0.4"/>"#,
                frame.px(a),
                frame.py(b)
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<ellipse cx="{:.2}" cy="{:.2}" rx="{:.2}" ry="{:.2}" fill="none" stroke="black" stroke-width="1.5"/>"#,
        frame.px(0.0),
        frame.py(0.0),
        frame.px(radius) - frame.px(0.0),
        frame.py(0.0) - frame.py(radius)
    );
    let labels: Vec<&str> = groups.iter().map(|(l, _)| l.as_str()).collect();
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_series() {
        let series: Vec<(String, Vec<(f64, f64)>)> = (0..4)
            .map(|k| (format!("s{k}"), vec![(0.0, k as f64), (1.0, 2.0 * k as f64)]))
            .collect();
        let svg = line_plot("t", "x", "y", &series, None);
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn labels_are_escaped() {
        let svg = scatter_plot("a<b", "x", "y", &[("p&q".into(), vec![(0.5, -0.5)])], 2.0);
        assert!(svg.contains("a&lt;b") && svg.contains("p&amp;q"));
        assert_eq!(svg.matches("<ellipse").count(), 1);
    }
}
