//! Hand-rolled SVG renderer for accuracy-privacy curves: one polyline per
//! (variant, split) group of a `curve.csv`, privacy on x, accuracy on y.

use crate::error::{Error, Result};
use crate::privacy::{read_curve_csv, CurvePoint};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 55.0;
const PALETTE: [&str; 8] = [
    "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Reads `curve_csv` and writes an SVG plot to `out`.
pub fn plot_curves(curve_csv: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<()> {
    let points = read_curve_csv(&curve_csv)?;
    if points.is_empty() {
        return Err(Error::EmptyInput("curve data"));
    }
    let svg = render_svg(&points);
    let out = out.as_ref();
    std::fs::write(out, svg).map_err(|e| Error::io(format!("write {}", out.display()), e))
}

fn render_svg(points: &[CurvePoint]) -> String {
    let mut groups: BTreeMap<(String, usize), Vec<&CurvePoint>> = BTreeMap::new();
    for p in points {
        groups
            .entry((p.variant.name().to_string(), p.split))
            .or_default()
            .push(p);
    }

    let x_max = points
        .iter()
        .map(|p| p.privacy_total)
        .fold(0.0f64, f64::max)
        .max(1e-6)
        * 1.05;
    let y_min = points
        .iter()
        .map(|p| p.ct1_accuracy)
        .fold(1.0f64, f64::min)
        .min(0.999)
        * 0.98;
    let y_max = 1.0;

    let to_x = |v: f64| MARGIN_L + v / x_max * (WIDTH - MARGIN_L - MARGIN_R);
    let to_y = |v: f64| HEIGHT - MARGIN_B - (v - y_min) / (y_max - y_min) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);

    // Axes with 5 ticks each.
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN_L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{}" stroke="black"/>"#,
        HEIGHT - MARGIN_B
    );
    for i in 0..=5 {
        let fx = x_max * i as f64 / 5.0;
        let px = to_x(fx);
        let _ = writeln!(
            svg,
            r#"<line x1="{px:.2}" y1="{}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" font-size="12" text-anchor="middle">{fx:.3}</text>"#,
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 5.0,
            HEIGHT - MARGIN_B + 20.0
        );
        let fy = y_min + (y_max - y_min) * i as f64 / 5.0;
        let py = to_y(fy);
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{py:.2}" x2="{MARGIN_L}" y2="{py:.2}" stroke="black"/><text x="{}" y="{:.2}" font-size="12" text-anchor="end">{fy:.3}</text>"#,
            MARGIN_L - 5.0,
            MARGIN_L - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="14" text-anchor="middle">privacy (likelihood rank / T)</text>"#,
        MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" font-size="14" text-anchor="middle" transform="rotate(-90 16 {:.2})">CT1 accuracy</text>"#,
        MARGIN_T + (HEIGHT - MARGIN_T - MARGIN_B) / 2.0,
        MARGIN_T + (HEIGHT - MARGIN_T - MARGIN_B) / 2.0
    );

    // One polyline per group, sorted by privacy for a readable trace.
    for (gi, ((variant, split), mut pts)) in groups.into_iter().enumerate() {
        pts.sort_by(|a, b| {
            a.privacy_total
                .partial_cmp(&b.privacy_total)
                .expect("finite privacy")
        });
        let color = PALETTE[gi % PALETTE.len()];
        let mut path = String::new();
        for p in &pts {
            let _ = write!(path, "{:.2},{:.2} ", to_x(p.privacy_total), to_y(p.ct1_accuracy));
        }
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.trim_end()
        );
        for p in &pts {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                to_x(p.privacy_total),
                to_y(p.ct1_accuracy)
            );
        }
        let ly = MARGIN_T + 16.0 * gi as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly:.2}" x2="{}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{}" y="{:.2}" font-size="12">{variant} (split {split})</text>"#,
            WIDTH - 240.0,
            WIDTH - 215.0,
            WIDTH - 210.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
