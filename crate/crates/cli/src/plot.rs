//! SVG scatter of per-image fingerprints with one mean marker per dataset.

use std::fmt::Write as _;

pub struct Series {
    pub name: String,
    /// First two latent coordinates of each image.
    pub points: Vec<[f64; 2]>,
    pub mean: [f64; 2],
}

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939",
];

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 520.0;
const LEFT: f64 = 60.0;
const TOP: f64 = 40.0;
const PLOT_W: f64 = 460.0;
const PLOT_H: f64 = 440.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(series: &[Series]) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in series.iter().flat_map(|s| s.points.iter().chain(std::iter::once(&s.mean))) {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    for d in 0..2 {
        if !lo[d].is_finite() || !hi[d].is_finite() {
            (lo[d], hi[d]) = (-1.0, 1.0);
        } else if hi[d] - lo[d] < 1e-9 {
            lo[d] -= 1.0;
            hi[d] += 1.0;
        }
        let pad = (hi[d] - lo[d]) * 0.05;
        lo[d] -= pad;
        hi[d] += pad;
    }
    (lo, hi)
}

pub fn latent_svg(series: &[Series], title: &str) -> String {
    let (lo, hi) = bounds(series);
    let x = |v: f64| LEFT + (v - lo[0]) / (hi[0] - lo[0]) * PLOT_W;
    let y = |v: f64| TOP + PLOT_H - (v - lo[1]) / (hi[1] - lo[1]) * PLOT_H;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, LEFT + PLOT_W / 2.0, escape(title));
    let _ = writeln!(s, r#"<rect class="frame" x="{LEFT}" y="{TOP}" width="{PLOT_W}" height="{PLOT_H}" fill="none" stroke="black"/>"#);
    let bottom = TOP + PLOT_H;
    let _ = writeln!(s, r#"<text x="{LEFT}" y="{}" text-anchor="start">{:.3}</text>"#, bottom + 16.0, lo[0]);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, LEFT + PLOT_W, bottom + 16.0, hi[0]);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">z1</text>"#, LEFT + PLOT_W / 2.0, bottom + 30.0);
    let _ = writeln!(s, r#"<text x="{}" y="{bottom}" text-anchor="end">{:.3}</text>"#, LEFT - 4.0, lo[1]);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, LEFT - 4.0, TOP + 10.0, hi[1]);
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">z2</text>"#, TOP + PLOT_H / 2.0, TOP + PLOT_H / 2.0);

    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let name = escape(&ser.name);
        let _ = writeln!(s, r#"<g class="points" data-dataset="{name}" fill="{color}" fill-opacity="0.45">"#);
        for p in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2"/>"#, x(p[0]), y(p[1]));
        }
        let _ = writeln!(s, "</g>");
    }
    // Means go on top of every point cloud.
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let (cx, cy) = (x(ser.mean[0]), y(ser.mean[1]));
        let _ = writeln!(
            s,
            r#"<path class="mean-marker" data-dataset="{}" d="M{:.2} {:.2}l6 6l6 -6l-6 -6z" fill="{color}" stroke="black" stroke-width="1.5"/>"#,
            escape(&ser.name),
            cx - 6.0,
            cy
        );
    }
    let lx = LEFT + PLOT_W + 24.0;
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let ly = TOP + 10.0 + i as f64 * 20.0;
        let name = escape(&ser.name);
        let _ = writeln!(
            s,
            r#"<g class="legend-entry" data-dataset="{name}"><rect x="{lx}" y="{:.1}" width="12" height="12" fill="{color}"/><text x="{}" y="{:.1}">{name} (n={})</text></g>"#,
            ly - 10.0,
            lx + 18.0,
            ly,
            ser.points.len()
        );
    }
    s.push_str("</svg>\n");
    s
}
