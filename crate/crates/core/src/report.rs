//! CSV tables and self-contained SVG charts. Output bytes depend only on the
//! inputs: floats in CSVs use the shortest round-trip form, SVG coordinates
//! are printed with fixed precision.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{BoundaryGrid, RobustGrid};

/// Class colors; the first two follow the usual brown/green two-moon palette.
const PALETTE: [&str; 10] =
    ["#8c510a", "#1b7837", "#2166ac", "#b2182b", "#762a83", "#e08214", "#4d4d4d", "#35978f", "#c51b7d", "#7fbc41"];

fn class_color(c: usize) -> &'static str {
    PALETTE[c % PALETTE.len()]
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn flush<W: std::io::Write>(w: &mut csv::Writer<W>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// `model_tag,attack,epsilon,accuracy`, one row per (grid, ε).
pub fn write_robust_grids(path: &Path, grids: &[RobustGrid]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model_tag", "attack", "epsilon", "accuracy"])?;
    for g in grids {
        for (e, a) in g.epsilons.iter().zip(&g.accuracies) {
            w.write_record([g.model_tag.clone(), g.attack.name().to_string(), e.to_string(), a.to_string()])?;
        }
    }
    flush(&mut w, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderboardRow {
    pub model_tag: String,
    pub accuracies: Vec<f64>,
    pub rg_score: f64,
}

/// Robust grids sharing one ε grid, ranked by R&G score.
#[derive(Debug, Clone, PartialEq)]
pub struct Leaderboard {
    pub epsilons: Vec<f64>,
    pub rows: Vec<LeaderboardRow>,
}

impl Leaderboard {
    /// Rows sorted by R&G score descending; equal scores keep input order.
    pub fn from_grids(grids: &[RobustGrid]) -> Result<Self> {
        let first = grids.first().ok_or_else(|| Error::InvalidArgument("leaderboard needs at least one grid".into()))?;
        for g in grids {
            if g.epsilons != first.epsilons {
                return Err(Error::InvalidArgument(format!(
                    "grid for {} uses epsilons {:?}, expected {:?}",
                    g.model_tag, g.epsilons, first.epsilons
                )));
            }
        }
        let mut rows: Vec<LeaderboardRow> = grids
            .iter()
            .map(|g| LeaderboardRow { model_tag: g.model_tag.clone(), accuracies: g.accuracies.clone(), rg_score: g.rg_score() })
            .collect();
        rows.sort_by(|a, b| b.rg_score.total_cmp(&a.rg_score));
        Ok(Leaderboard { epsilons: first.epsilons.clone(), rows })
    }

    pub fn row(&self, tag: &str) -> Option<&LeaderboardRow> {
        self.rows.iter().find(|r| r.model_tag == tag)
    }

    /// `model_tag,acc@<ε>...,rg_score`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["model_tag".to_string()];
        header.extend(self.epsilons.iter().map(|e| format!("acc@{e}")));
        header.push("rg_score".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.model_tag.clone()];
            rec.extend(r.accuracies.iter().map(f64::to_string));
            rec.push(r.rg_score.to_string());
            w.write_record(&rec)?;
        }
        flush(&mut w, path)
    }

    /// Fixed-width table for terminals.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.model_tag.len()).max().unwrap_or(0).max(10);
        let mut o = format!("{:<width$}", "model");
        for e in &self.epsilons {
            let _ = write!(o, " {:>8}", format!("eps={e}"));
        }
        let _ = writeln!(o, " {:>9}", "R&G");
        for r in &self.rows {
            let _ = write!(o, "{:<width$}", r.model_tag);
            for a in &r.accuracies {
                let _ = write!(o, " {a:>8.2}");
            }
            let _ = writeln!(o, " {:>9.2}", r.rg_score);
        }
        o
    }
}

fn svg_open(o: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        o,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(o, r#"<rect width="{w:.0}" height="{h:.0}" fill="white"/>"#);
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Horizontal bar per model, longest first.
pub fn rg_histogram_svg(board: &Leaderboard) -> String {
    let bar_h = 18.0;
    let (left, right, top) = (170.0, 70.0, 30.0);
    let plot_w = 420.0;
    let h = top + bar_h * board.rows.len() as f64 + 30.0;
    let max = board.rows.iter().map(|r| r.rg_score).fold(0.0, f64::max).max(1e-9);
    let mut o = String::new();
    svg_open(&mut o, left + plot_w + right, h);
    let _ = writeln!(o, r#"<text x="{left:.0}" y="18" font-weight="bold">R&amp;G score</text>"#);
    for (i, r) in board.rows.iter().enumerate() {
        let y = top + bar_h * i as f64;
        let w = plot_w * r.rg_score / max;
        let _ = writeln!(
            o,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + bar_h * 0.7,
            escape(&r.model_tag)
        );
        let _ = writeln!(
            o,
            r##"<rect x="{left:.1}" y="{:.1}" width="{w:.2}" height="{:.1}" fill="#2166ac"/>"##,
            y + 2.0,
            bar_h - 4.0
        );
        let _ = writeln!(o, r#"<text x="{:.1}" y="{:.1}">{:.2}</text>"#, left + w + 4.0, y + bar_h * 0.7, r.rg_score);
    }
    o.push_str("</svg>\n");
    o
}

/// Per-layer mean CM curves, one polyline per labelled series.
pub fn lsa_curves_svg(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let (left, right, top, bottom) = (60.0, 190.0, 34.0, 40.0);
    let (plot_w, plot_h) = (420.0, 260.0);
    let layers = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(1);
    let ymax = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite()).fold(0.0, f64::max);
    let ymax = if ymax > 0.0 { ymax * 1.05 } else { 1.0 };
    let px = |l: usize| left + if layers > 1 { plot_w * l as f64 / (layers - 1) as f64 } else { plot_w / 2.0 };
    let py = |v: f64| top + plot_h * (1.0 - v.min(ymax) / ymax);
    let mut o = String::new();
    svg_open(&mut o, left + plot_w + right, top + plot_h + bottom);
    let _ = writeln!(o, r#"<text x="{left:.0}" y="20" font-weight="bold">{}</text>"#, escape(title));
    let _ = writeln!(
        o,
        r#"<path d="M{left:.1} {top:.1} V{:.1} H{:.1}" fill="none" stroke="black"/>"#,
        top + plot_h,
        left + plot_w
    );
    for t in 0..=4 {
        let v = ymax * t as f64 / 4.0;
        let _ = writeln!(o, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, left - 4.0, py(v) + 4.0);
    }
    for l in 0..layers {
        let _ =
            writeln!(o, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{l}</text>"#, px(l), top + plot_h + 16.0);
    }
    let _ = writeln!(
        o,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">learnable layer</text>"#,
        left + plot_w / 2.0,
        top + plot_h + 34.0
    );
    for (i, (label, values)) in series.iter().enumerate() {
        let color = class_color(i + 2);
        let pts: Vec<String> =
            values.iter().enumerate().map(|(l, &v)| format!("{:.2},{:.2}", px(l), py(v))).collect();
        let _ = writeln!(o, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        for p in &pts {
            let (x, y) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(o, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 14.0 * i as f64;
        let lx = left + plot_w + 14.0;
        let _ = writeln!(
            o,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            lx + 16.0
        );
        let _ = writeln!(o, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 20.0, ly + 4.0, escape(label));
    }
    o.push_str("</svg>\n");
    o
}

/// Decision regions shaded by confidence, adversarial points colored by
/// their true class. The first point's source sample is drawn in yellow and
/// its adversarial twin in red.
pub fn boundary_svg(grid: &BoundaryGrid) -> String {
    let n = grid.resolution;
    let size = 480.0;
    let cell = size / n as f64;
    let b = grid.bbox;
    let classes = grid
        .cells
        .iter()
        .map(|c| c.class)
        .chain(grid.adversarial.iter().map(|p| p.true_class))
        .max()
        .map_or(2, |m| (m + 1).max(2));
    let floor = 1.0 / classes as f64;
    // Confidence quantized to 8 shades so runs of equal cells merge.
    let shade = |p: f64| (((p - floor) / (1.0 - floor)).clamp(0.0, 1.0) * 7.0).round() as usize;
    let sx = |x: f64| (x - b.x0) / (b.x1 - b.x0) * size;
    let sy = |y: f64| size - (y - b.y0) / (b.y1 - b.y0) * size;
    let mut o = String::new();
    svg_open(&mut o, size, size);
    for row in 0..n {
        // Lattice row 0 is the lowest y; SVG rows grow downward.
        let y = size - cell * (row + 1) as f64;
        let cells = &grid.cells[row * n..(row + 1) * n];
        let mut start = 0;
        while start < n {
            let key = (cells[start].class, shade(cells[start].confidence));
            let mut end = start + 1;
            while end < n && (cells[end].class, shade(cells[end].confidence)) == key {
                end += 1;
            }
            let _ = writeln!(
                o,
                r#"<rect x="{:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}" fill-opacity="{:.3}"/>"#,
                cell * start as f64,
                cell * (end - start) as f64 + 0.05,
                cell + 0.05,
                class_color(key.0),
                0.12 + 0.38 * key.1 as f64 / 7.0
            );
            start = end;
        }
    }
    for p in &grid.adversarial {
        let _ = writeln!(
            o,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}"/>"#,
            sx(p.x),
            sy(p.y),
            class_color(p.true_class)
        );
    }
    if let Some(p) = grid.adversarial.first() {
        let _ = writeln!(
            o,
            r##"<circle cx="{:.2}" cy="{:.2}" r="5" fill="#ffd700" stroke="black"/>"##,
            sx(p.source_x),
            sy(p.source_y)
        );
        let _ = writeln!(o, r##"<circle cx="{:.2}" cy="{:.2}" r="5" fill="#e31a1c" stroke="black"/>"##, sx(p.x), sy(p.y));
    }
    o.push_str("</svg>\n");
    o
}

/// Lattice as `x,y,class,confidence` and points as
/// `x,y,true_class,source_x,source_y`.
pub fn write_boundary_csvs(grid: &BoundaryGrid, cells_path: &Path, points_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(cells_path)?;
    w.write_record(["x", "y", "class", "confidence"])?;
    for c in &grid.cells {
        w.write_record([c.x.to_string(), c.y.to_string(), c.class.to_string(), c.confidence.to_string()])?;
    }
    flush(&mut w, cells_path)?;
    let mut w = csv::Writer::from_path(points_path)?;
    w.write_record(["x", "y", "true_class", "source_x", "source_y"])?;
    for p in &grid.adversarial {
        w.write_record([
            p.x.to_string(),
            p.y.to_string(),
            p.true_class.to_string(),
            p.source_x.to_string(),
            p.source_y.to_string(),
        ])?;
    }
    flush(&mut w, points_path)
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    write_text(path, svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{AdvPoint, BoundaryBox, GridCell};
    use crate::perturb::AttackKind;

    fn grid(tag: &str, accs: &[f64]) -> RobustGrid {
        RobustGrid {
            model_tag: tag.into(),
            attack: AttackKind::Fgsm,
            epsilons: (0..accs.len()).map(|i| i as f64 / 10.0).collect(),
            accuracies: accs.to_vec(),
        }
    }

    #[test]
    fn leaderboard_ranks_and_writes_one_row_per_model() {
        let grids = [grid("Normal", &[90.0, 50.0]), grid("AT-FGSM", &[85.0, 70.0]), grid("AT-PGD", &[80.0, 75.0])];
        let board = Leaderboard::from_grids(&grids).unwrap();
        let tags: Vec<&str> = board.rows.iter().map(|r| r.model_tag.as_str()).collect();
        assert_eq!(tags, ["AT-FGSM", "AT-PGD", "Normal"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lb.csv");
        board.write_csv(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "model_tag,acc@0,acc@0.1,rg_score");
        assert_eq!(lines[1], "AT-FGSM,85,70,155");
        assert_eq!(lines.len(), 4);
        assert!(Leaderboard::from_grids(&[grid("a", &[1.0]), grid("b", &[1.0, 2.0])]).is_err());
    }

    #[test]
    fn robust_grid_csv_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        write_robust_grids(&p, &[grid("Normal", &[97.5, 60.25])]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "model_tag,attack,epsilon,accuracy\nNormal,fgsm,0,97.5\nNormal,fgsm,0.1,60.25\n");
    }

    #[test]
    fn svgs_are_deterministic_and_well_formed() {
        let board = Leaderboard::from_grids(&[grid("A<1>", &[90.0, 50.0])]).unwrap();
        let a = rg_histogram_svg(&board);
        assert_eq!(a, rg_histogram_svg(&board));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("A&lt;1&gt;"));
        let curves = lsa_curves_svg("pgd", &[("Normal".into(), vec![0.4, 0.5, 0.3]), ("flat".into(), vec![0.0; 3])]);
        assert_eq!(curves.matches("<polyline").count(), 2);
        let cells = (0..4)
            .map(|i| GridCell { x: (i % 2) as f64, y: (i / 2) as f64, class: i % 2, confidence: 0.9 })
            .collect();
        let g = BoundaryGrid {
            bbox: BoundaryBox { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 },
            resolution: 2,
            cells,
            adversarial: vec![AdvPoint { x: 0.5, y: 0.5, true_class: 1, source_x: 0.4, source_y: 0.6, fooled: false }],
        };
        let s = boundary_svg(&g);
        assert_eq!(s, boundary_svg(&g));
        assert_eq!(s.matches("<rect").count(), 1 + 4);
        assert!(s.contains("#ffd700") && s.contains("#e31a1c"));
    }

    #[test]
    fn boundary_csv_schemas() {
        let g = BoundaryGrid {
            bbox: BoundaryBox { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 },
            resolution: 2,
            cells: vec![GridCell { x: 0.0, y: 0.0, class: 1, confidence: 0.75 }],
            adversarial: vec![AdvPoint { x: 0.5, y: 0.25, true_class: 0, source_x: 0.4, source_y: 0.3, fooled: true }],
        };
        let dir = tempfile::tempdir().unwrap();
        let (c, p) = (dir.path().join("c.csv"), dir.path().join("p.csv"));
        write_boundary_csvs(&g, &c, &p).unwrap();
        assert_eq!(fs::read_to_string(&c).unwrap(), "x,y,class,confidence\n0,0,1,0.75\n");
        assert_eq!(fs::read_to_string(&p).unwrap(), "x,y,true_class,source_x,source_y\n0.5,0.25,0,0.4,0.3\n");
    }
}
