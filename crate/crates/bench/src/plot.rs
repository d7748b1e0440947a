//! Log-log SVG plots of averaged diagnostic series with slope guides.

use std::fmt::Write as _;

use crate::config::Diagnostic;
use crate::experiment::Series;

const W: f64 = 640.0;
const H: f64 = 440.0;
const PAD: f64 = 60.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Axes {
    fn px(&self, lx: f64) -> f64 {
        PAD + (lx - self.x0) / (self.x1 - self.x0).max(1e-12) * (W - 2.0 * PAD)
    }

    fn py(&self, ly: f64) -> f64 {
        H - PAD - (ly - self.y0) / (self.y1 - self.y0).max(1e-12) * (H - 2.0 * PAD)
    }
}

/// Plots every positive fittable column; each gets a dashed guide of slope
/// −1 and −1/2 anchored at its first point.
pub fn svg(series: &Series, title: &str) -> String {
    let cols: Vec<(Diagnostic, Vec<(f64, f64)>)> = [Diagnostic::Fgap, Diagnostic::Kkt, Diagnostic::MeGrad, Diagnostic::Dist2]
        .into_iter()
        .filter_map(|d| {
            let v = series.column(d)?;
            let pts: Vec<(f64, f64)> = series
                .k
                .iter()
                .zip(v)
                .filter(|(_, &y)| y > 0.0 && y.is_finite())
                .map(|(&k, &y)| ((k as f64).log10(), y.log10()))
                .collect();
            (!pts.is_empty()).then_some((d, pts))
        })
        .collect();

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title)).unwrap();
    if cols.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let all = cols.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let ax = Axes {
        x0: x0.floor(),
        x1: x1.ceil().max(x0.floor() + 1.0),
        y0: y0.floor(),
        y1: y1.ceil().max(y0.floor() + 1.0),
    };
    writeln!(
        out,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    )
    .unwrap();
    for e in ax.x0 as i32..=ax.x1 as i32 {
        let x = ax.px(e as f64);
        writeln!(out, r##"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{PAD}" stroke="#dddddd"/>"##, H - PAD).unwrap();
        writeln!(out, r#"<text x="{x:.1}" y="{}" text-anchor="middle">1e{e}</text>"#, H - PAD + 18.0).unwrap();
    }
    for e in ax.y0 as i32..=ax.y1 as i32 {
        let y = ax.py(e as f64);
        writeln!(out, r##"<line x1="{PAD}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#dddddd"/>"##, W - PAD).unwrap();
        writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">1e{e}</text>"#, PAD - 6.0, y + 4.0).unwrap();
    }
    writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">k</text>"#, W / 2.0, H - 16.0).unwrap();

    for (i, (d, pts)) in cols.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", ax.px(x), ax.py(y))).collect();
        writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" ")).unwrap();
        let (gx, gy) = pts[0];
        for slope in [-1.0, -0.5] {
            let ex = ax.x1;
            let ey = (gy + slope * (ex - gx)).max(ax.y0);
            let ex = gx + (ey - gy) / slope;
            writeln!(
                out,
                r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-dasharray="4 4" stroke-opacity="0.5"/>"#,
                ax.px(gx),
                ax.py(gy),
                ax.px(ex),
                ax.py(ey)
            )
            .unwrap();
        }
        writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD - 90.0,
            PAD + 18.0 * (i as f64 + 1.0),
            d.column()
        )
        .unwrap();
    }
    writeln!(
        out,
        r##"<text x="{PAD}" y="{}" fill="#666666">dashed: slopes −1 and −1/2</text>"##,
        H - 2.0
    )
    .unwrap();
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
