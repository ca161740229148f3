use std::fmt::Write as _;

use crate::error::{Error, Result};

const CELL: usize = 18;
const MARGIN_LEFT: usize = 48;
const MARGIN_TOP: usize = 56;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// White at the minimum, dark blue at the maximum.
fn color(t: f64) -> (u8, u8, u8) {
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    (lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0))
}

/// Render a matrix as a standalone SVG heatmap with one `<rect class="cell">`
/// per entry, axis labels, and the value range written under the title.
/// The output depends only on the arguments.
pub fn render_heatmap(title: &str, row_labels: &[String], col_labels: &[String], m: &[Vec<f64>]) -> Result<String> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::contract(format!("heatmap `{title}` has no cells")));
    }
    if m.iter().any(|r| r.len() != cols) || row_labels.len() != rows || col_labels.len() != cols {
        return Err(Error::contract(format!("heatmap `{title}` has ragged rows or mislabelled axes")));
    }
    if m.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("heatmap `{title}`")));
    }
    let lo = m.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;

    let width = MARGIN_LEFT + cols * CELL + 8;
    let height = MARGIN_TOP + rows * CELL + 8;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="monospace" font-size="9">"#
    );
    let _ = writeln!(s, r#"<text x="4" y="12" font-size="11">{}</text>"#, escape(title));
    let _ = writeln!(s, r#"<text class="range" x="4" y="26">min={lo:?} max={hi:?}</text>"#);
    for (c, label) in col_labels.iter().enumerate() {
        let x = MARGIN_LEFT + c * CELL + CELL / 2;
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, MARGIN_TOP - 4, escape(label));
    }
    for (r, (label, row)) in row_labels.iter().zip(m).enumerate() {
        let y = MARGIN_TOP + r * CELL;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 4,
            y + CELL / 2 + 3,
            escape(label)
        );
        for (c, &v) in row.iter().enumerate() {
            let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
            let (cr, cg, cb) = color(t);
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({cr},{cg},{cb})"><title>{r},{c}: {v:?}</title></rect>"#,
                MARGIN_LEFT + c * CELL
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| i.to_string()).collect()
    }

    #[test]
    fn one_rect_per_cell_and_deterministic() {
        let m = vec![vec![0.0, 0.5, 1.0], vec![-1.0, 2.0, 0.25]];
        let a = render_heatmap("t<1>", &labels(2), &labels(3), &m).unwrap();
        assert_eq!(a.matches(r#"<rect class="cell""#).count(), 6);
        assert!(a.contains("min=-1.0 max=2.0"));
        assert!(a.contains("t&lt;1&gt;"));
        assert_eq!(a, render_heatmap("t<1>", &labels(2), &labels(3), &m).unwrap());
    }

    #[test]
    fn rejects_empty_ragged_and_non_finite() {
        assert!(render_heatmap("e", &[], &[], &[]).is_err());
        assert!(render_heatmap("r", &labels(2), &labels(2), &[vec![1.0, 2.0], vec![1.0]]).is_err());
        assert!(render_heatmap("n", &labels(1), &labels(1), &[vec![f64::NAN]]).is_err());
        let flat = render_heatmap("c", &labels(1), &labels(2), &[vec![3.0, 3.0]]).unwrap();
        assert_eq!(flat.matches("rgb(255,255,255)").count(), 2);
        let one = render_heatmap("1", &labels(1), &labels(1), &[vec![0.5]]).unwrap();
        assert_eq!(one.matches(r#"<rect class="cell""#).count(), 1);
        assert!(one.contains("min=0.5 max=0.5"));
    }
}
