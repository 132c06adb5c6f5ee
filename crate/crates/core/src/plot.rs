//! Minimal self-contained SVG line charts and heatmaps.
//!
//! Axes are never auto-scaled from the plotted data unless the caller asks
//! for it: every chart takes explicit `x_range`/`y_range`.

use std::fmt::Write as _;

const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

const MARGIN_LEFT: f64 = 56.0;
const MARGIN_RIGHT: f64 = 16.0;
const MARGIN_TOP: f64 = 32.0;
const MARGIN_BOTTOM: f64 = 44.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
            dashed: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub series: Vec<Series>,
    /// Draw a marker at every point.
    pub markers: bool,
}

impl LineChart {
    pub fn new(
        title: &str,
        x_label: &str,
        y_label: &str,
        x_range: (f64, f64),
        y_range: (f64, f64),
    ) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            x_range,
            y_range,
            series: Vec::new(),
            markers: false,
        }
    }

    pub fn with_series(mut self, s: Series) -> Self {
        self.series.push(s);
        self
    }

    fn render_into(&self, out: &mut String, x0: f64, y0: f64, width: f64, height: f64) {
        let pw = width - MARGIN_LEFT - MARGIN_RIGHT;
        let ph = height - MARGIN_TOP - MARGIN_BOTTOM;
        let (xl, xh) = widen(self.x_range);
        let (yl, yh) = widen(self.y_range);
        let sx = |x: f64| x0 + MARGIN_LEFT + (x.clamp(xl, xh) - xl) / (xh - xl) * pw;
        let sy = |y: f64| y0 + MARGIN_TOP + ph - (y.clamp(yl, yh) - yl) / (yh - yl) * ph;

        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{}</text>"#,
            x0 + MARGIN_LEFT + pw / 2.0,
            y0 + 20.0,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r##"<rect x="{:.1}" y="{:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#333"/>"##,
            x0 + MARGIN_LEFT,
            y0 + MARGIN_TOP
        );
        for i in 0..=5 {
            let t = i as f64 / 5.0;
            let (xv, yv) = (xl + t * (xh - xl), yl + t * (yh - yl));
            let _ = writeln!(
                out,
                r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/><text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"##,
                y0 + MARGIN_TOP,
                y0 + MARGIN_TOP + ph,
                y0 + MARGIN_TOP + ph + 14.0,
                tick(xv),
                x = sx(xv)
            );
            let _ = writeln!(
                out,
                r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"##,
                x0 + MARGIN_LEFT,
                x0 + MARGIN_LEFT + pw,
                x0 + MARGIN_LEFT - 4.0,
                sy(yv) + 3.0,
                tick(yv),
                y = sy(yv)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#,
            x0 + MARGIN_LEFT + pw / 2.0,
            y0 + height - 8.0,
            escape(&self.x_label)
        );
        let (lx, ly) = (x0 + 14.0, y0 + MARGIN_TOP + ph / 2.0);
        let _ = writeln!(
            out,
            r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 {lx:.1} {ly:.1})">{}</text>"#,
            escape(&self.y_label)
        );

        for (i, s) in self.series.iter().enumerate() {
            let colour = PALETTE[i % PALETTE.len()];
            let path: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let dash = if s.dashed {
                r#" stroke-dasharray="5,4""#
            } else {
                ""
            };
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{colour}" stroke-width="1.8"{dash} points="{}"/>"#,
                path.join(" ")
            );
            if self.markers {
                for &(x, y) in &s.points {
                    let _ = writeln!(
                        out,
                        r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{colour}"/>"#,
                        sx(x),
                        sy(y)
                    );
                }
            }
            let (kx, ky) = (
                x0 + MARGIN_LEFT + 8.0,
                y0 + MARGIN_TOP + 14.0 + 14.0 * i as f64,
            );
            let _ = writeln!(
                out,
                r#"<line x1="{kx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{colour}" stroke-width="2"{dash}/><text x="{:.1}" y="{ky:.1}" font-size="10">{}</text>"#,
                ky - 3.0,
                kx + 16.0,
                ky - 3.0,
                kx + 20.0,
                escape(&s.name)
            );
        }
    }

    pub fn to_svg(&self, width: f64, height: f64) -> String {
        let mut body = String::new();
        self.render_into(&mut body, 0.0, 0.0, width, height);
        document(width, height, &body)
    }
}

/// Charts laid out left to right in one document.
pub fn side_by_side(charts: &[&LineChart], panel_width: f64, height: f64) -> String {
    let mut body = String::new();
    for (i, c) in charts.iter().enumerate() {
        c.render_into(&mut body, i as f64 * panel_width, 0.0, panel_width, height);
    }
    document(panel_width * charts.len() as f64, height, &body)
}

/// Grid of cells shaded from white (0) to dark blue (`max`), each annotated
/// with its value.
pub fn heatmap(
    title: &str,
    row_label: &str,
    col_label: &str,
    labels: &[String],
    values: &[Vec<f64>],
) -> String {
    let n = labels.len();
    let cell = 48.0;
    let (left, top) = (110.0, 60.0);
    let width = left + cell * n as f64 + 20.0;
    let height = top + cell * n as f64 + 60.0;
    let max = values.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    let mut body = String::new();
    let _ = writeln!(
        body,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for (i, row) in values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = if max > 0.0 { v / max } else { 0.0 };
            let shade = |full: f64| (255.0 - t * (255.0 - full)).round() as u8;
            let (x, y) = (left + j as f64 * cell, top + i as f64 * cell);
            let text = if t > 0.55 { "#fff" } else { "#000" };
            let _ = writeln!(
                body,
                r##"<rect x="{x:.1}" y="{y:.1}" width="{cell}" height="{cell}" fill="rgb({},{},{})" stroke="#999"/><text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11" fill="{text}">{}</text>"##,
                shade(8.0),
                shade(48.0),
                shade(107.0),
                x + cell / 2.0,
                y + cell / 2.0 + 4.0,
                tick(v)
            );
        }
    }
    for (i, name) in labels.iter().enumerate() {
        let _ = writeln!(
            body,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#,
            left - 6.0,
            top + i as f64 * cell + cell / 2.0 + 3.0,
            escape(name)
        );
        let _ = writeln!(
            body,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#,
            left + i as f64 * cell + cell / 2.0,
            top + n as f64 * cell + 14.0,
            escape(name)
        );
    }
    let _ = writeln!(
        body,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#,
        left + cell * n as f64 / 2.0,
        height - 12.0,
        escape(col_label)
    );
    let _ = writeln!(
        body,
        r#"<text x="14" y="{:.1}" font-size="12" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#,
        top + cell * n as f64 / 2.0,
        top + cell * n as f64 / 2.0,
        escape(row_label)
    );
    document(width, height, &body)
}

fn document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n{body}</svg>\n"
    )
}

fn widen((lo, hi): (f64, f64)) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

fn tick(v: f64) -> String {
    if v == v.round() && v.abs() < 1e6 {
        format!("{v:.0}")
    } else if v.abs() >= 0.01 {
        format!("{v:.2}")
    } else {
        format!("{v:.1e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
