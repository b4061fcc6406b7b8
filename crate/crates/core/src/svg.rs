//! Minimal SVG emission for the report plots. Floats are formatted to six
//! significant digits so identical inputs produce byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

/// Six-significant-digit float formatting with trailing zeros trimmed.
pub fn fmt_f(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return "0".to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    let factor = 10f64.powi(5 - exp);
    let rounded = (v * factor).round() / factor;
    format!("{rounded}")
}

pub struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Svg {
            body: String::new(),
            width,
            height,
        }
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}"/>"#,
            fmt_f(x),
            fmt_f(y),
            fmt_f(w),
            fmt_f(h),
            fill
        );
    }

    pub fn circle(&mut self, cx: f64, cy: f64, r: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{}" cy="{}" r="{}" fill="{}"/>"#,
            fmt_f(cx),
            fmt_f(cy),
            fmt_f(r),
            fill
        );
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{}" stroke-width="{}"/>"#,
            fmt_f(x1),
            fmt_f(y1),
            fmt_f(x2),
            fmt_f(y2),
            stroke,
            fmt_f(width)
        );
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], stroke: &str, width: f64) {
        let pts: Vec<String> = points
            .iter()
            .map(|(x, y)| format!("{},{}", fmt_f(*x), fmt_f(*y)))
            .collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="{}"/>"#,
            pts.join(" "),
            stroke,
            fmt_f(width)
        );
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, content: &str) {
        let escaped = content
            .replace('&', "&amp;")
            .replace('<', "&lt;")
            .replace('>', "&gt;");
        let _ = writeln!(
            self.body,
            r#"<text x="{}" y="{}" font-size="{}" font-family="monospace">{}</text>"#,
            fmt_f(x),
            fmt_f(y),
            fmt_f(size),
            escaped
        );
    }

    pub fn to_string(&self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n{}</svg>\n",
            fmt_f(self.width),
            fmt_f(self.height),
            fmt_f(self.width),
            fmt_f(self.height),
            self.body
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

/// Color for a primitive/cluster index; cycles after 8.
pub fn palette(i: usize) -> &'static str {
    const COLORS: [&str; 8] = [
        "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c",
    ];
    COLORS[i % COLORS.len()]
}

/// Grayscale-to-heat color for a value in [0, 1].
pub fn heat(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * v.sqrt()) as u8;
    let g = (255.0 * v * v) as u8;
    let b = (90.0 * (1.0 - v)) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_is_stable() {
        assert_eq!(fmt_f(0.0), "0");
        assert_eq!(fmt_f(1.0), "1");
        assert_eq!(fmt_f(0.5), "0.5");
        assert_eq!(fmt_f(123.456789), "123.457");
        assert_eq!(fmt_f(-0.000123456), "-0.000123456");
        assert_eq!(fmt_f(1234567.0), "1234570");
        assert_eq!(fmt_f(123.4567891), "123.457");
    }

    #[test]
    fn document_structure() {
        let mut s = Svg::new(100.0, 50.0);
        s.rect(0.0, 0.0, 10.0, 10.0, "#ff0000");
        s.text(5.0, 5.0, 10.0, "a<b&c");
        let doc = s.to_string();
        assert!(doc.starts_with("<?xml"));
        assert!(doc.ends_with("</svg>\n"));
        assert!(doc.contains("a&lt;b&amp;c"));
        assert!(doc.contains(r#"viewBox="0 0 100 50""#));
    }
}
