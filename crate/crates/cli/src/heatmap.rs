//! SVG rendering of per-goal prediction heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, CliResult};

const HEADER: [&str; 5] = ["true_gx", "true_gy", "pred_gx", "pred_gy", "proportion"];
const CELL: f64 = 14.0;
const GAP: f64 = 10.0;

/// Proportions keyed by (true goal, predicted cell).
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTable {
    pub width: usize,
    pub height: usize,
    pub cells: BTreeMap<((usize, usize), (usize, usize)), f64>,
}

fn malformed(line: u64, why: impl std::fmt::Display) -> CliError {
    CliError::Other(format!("malformed heatmap CSV at line {line}: {why}"))
}

pub fn parse_heatmap_csv(text: &str) -> CliResult<HeatmapTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| malformed(1, e))?.clone();
    if header.iter().map(str::trim).ne(HEADER) {
        return Err(malformed(1, format!("expected header `{}`", HEADER.join(","))));
    }
    let mut cells = BTreeMap::new();
    let (mut width, mut height) = (0, 0);
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            malformed(line, e)
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let int = |i: usize| -> CliResult<usize> {
            record[i]
                .trim()
                .parse()
                .map_err(|_| malformed(line, format!("`{}` is not a cell coordinate", &record[i])))
        };
        let (tx, ty, px, py) = (int(0)?, int(1)?, int(2)?, int(3)?);
        let p: f64 = record[4]
            .trim()
            .parse()
            .map_err(|_| malformed(line, format!("`{}` is not a number", &record[4])))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(malformed(line, format!("proportion {p} outside [0, 1]")));
        }
        if cells.insert(((tx, ty), (px, py)), p).is_some() {
            return Err(malformed(line, "duplicate row"));
        }
        width = width.max(tx + 1).max(px + 1);
        height = height.max(ty + 1).max(py + 1);
    }
    if cells.is_empty() {
        return Err(malformed(1, "no data rows"));
    }
    Ok(HeatmapTable { width, height, cells })
}

/// A `width x height` arrangement of heatmaps, one per true goal, laid out
/// with y growing upward. Brightness is the proportion, the true goal cell is
/// outlined in red.
pub fn render_svg(table: &HeatmapTable) -> String {
    let (w, h) = (table.width, table.height);
    let panel_w = CELL * w as f64;
    let panel_h = CELL * h as f64;
    let total_w = GAP + (panel_w + GAP) * w as f64;
    let total_h = GAP + (panel_h + GAP) * h as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{total_h}" viewBox="0 0 {total_w} {total_h}">"#
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let goals: std::collections::BTreeSet<(usize, usize)> = table.cells.keys().map(|(t, _)| *t).collect();
    for &(tx, ty) in &goals {
        let ox = GAP + (panel_w + GAP) * tx as f64;
        let oy = GAP + (panel_h + GAP) * (h - 1 - ty) as f64;
        let _ = writeln!(out, r#"<g id="goal-{tx}-{ty}">"#);
        for px in 0..w {
            for py in 0..h {
                let p = table.cells.get(&((tx, ty), (px, py))).copied().unwrap_or(0.0);
                let v = (p * 255.0).round() as u8;
                let x = ox + CELL * px as f64;
                let y = oy + CELL * (h - 1 - py) as f64;
                let _ = writeln!(
                    out,
                    r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#{v:02x}{v:02x}{v:02x}" data-proportion="{p}"/>"##
                );
            }
        }
        let x = ox + CELL * tx as f64;
        let y = oy + CELL * (h - 1 - ty) as f64;
        let _ = writeln!(
            out,
            r##"<rect class="true-goal" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="none" stroke="#ff0000" stroke-width="2"/>"##
        );
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

/// Parses `input` and writes the SVG to `output`; nothing is written when the
/// CSV is rejected.
pub fn render_heatmaps(input: &Path, output: &Path) -> CliResult<()> {
    let text = std::fs::read_to_string(input).map_err(|_| CliError::Missing(input.to_path_buf()))?;
    let table = parse_heatmap_csv(&text)?;
    std::fs::write(output, render_svg(&table))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perfect(w: usize, h: usize) -> String {
        let mut s = HEADER.join(",") + "\n";
        for tx in 0..w {
            for ty in 0..h {
                for px in 0..w {
                    for py in 0..h {
                        let p = if (tx, ty) == (px, py) { 1 } else { 0 };
                        s += &format!("{tx},{ty},{px},{py},{p}\n");
                    }
                }
            }
        }
        s
    }

    #[test]
    fn perfect_decoder_has_one_white_cell_per_panel_under_the_outline() {
        let table = parse_heatmap_csv(&perfect(5, 5)).unwrap();
        let svg = render_svg(&table);
        assert_eq!(svg.matches("fill=\"#ffffff\" data-proportion").count(), 25);
        assert_eq!(svg.matches("class=\"true-goal\"").count(), 25);
        for panel in svg.split("<g id=").skip(1) {
            let white = panel.lines().find(|l| l.contains("#ffffff\" data")).unwrap();
            let outline = panel.lines().find(|l| l.contains("true-goal")).unwrap();
            let xy = |l: &str| {
                let attr = |name: &str| l.split(&format!(" {name}=\"")).nth(1).unwrap().split('"').next().unwrap().to_string();
                (attr("x"), attr("y"))
            };
            assert_eq!(xy(white), xy(outline));
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = format!("{}\n0,0,0,0,1\n0,0,1,x,0\n", HEADER.join(","));
        let err = parse_heatmap_csv(&bad).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let err = parse_heatmap_csv("a,b\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        let err = parse_heatmap_csv(&format!("{}\n0,0,0,0\n", HEADER.join(","))).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn empty_csv_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("h.csv");
        let output = dir.path().join("h.svg");
        std::fs::write(&input, "").unwrap();
        assert!(render_heatmaps(&input, &output).is_err());
        std::fs::write(&input, HEADER.join(",") + "\n").unwrap();
        assert!(render_heatmaps(&input, &output).is_err());
        assert!(!output.exists());
    }
}
