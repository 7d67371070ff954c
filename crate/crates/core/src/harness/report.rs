//! CSV, JSON and SVG writers for experiment outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::synthetic::{Raster, SyntheticData, SyntheticResult, SyntheticRun};
use crate::error::{Error, Result};

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `synthetic.csv`, per-p loss logs, `synthetic.json` and `synthetic.svg`.
pub fn write_synthetic(dir: &Path, runs: &[SyntheticRun]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let results: Vec<SyntheticResult> = runs.iter().map(|r| r.result.clone()).collect();
    write_csv(&dir.join("synthetic.csv"), &results)?;
    write_json(&dir.join("synthetic.json"), &results)?;
    for r in runs {
        write_csv(
            &dir.join(format!("synthetic_log_p{}.csv", r.result.p)),
            &r.log,
        )?;
    }
    let svg = synthetic_svg(runs);
    let path = dir.join("synthetic.svg");
    fs::write(&path, svg).map_err(|e| Error::io(&path, e))
}

const PANEL: f64 = 240.0;
const MARGIN: f64 = 24.0;
const CLASS_COLORS: [&str; 2] = ["#d62728", "#1f77b4"];

/// Grid of panels: training data on top, test data below, one column per p.
/// Dashed lines are pretrained boundaries, solid lines fine-tuned ones.
pub fn synthetic_svg(runs: &[SyntheticRun]) -> String {
    let cols = runs.len().max(1) as f64;
    let width = cols * (PANEL + MARGIN) + MARGIN;
    let height = 2.0 * (PANEL + MARGIN) + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (c, run) in runs.iter().enumerate() {
        let x0 = MARGIN + c as f64 * (PANEL + MARGIN);
        for (row, (data, label)) in [(&run.train, "train"), (&run.test, "test")]
            .into_iter()
            .enumerate()
        {
            let y0 = 2.0 * MARGIN + row as f64 * (PANEL + MARGIN);
            let acc = if row == 0 {
                String::new()
            } else {
                format!(
                    " acc {:.1}% / {:.1}%",
                    100.0 * run.result.pretrain_accuracy,
                    100.0 * run.result.finetune_accuracy
                )
            };
            let _ = writeln!(
                s,
                r#"<text x="{x0}" y="{}">p = {} {label}{acc}</text>"#,
                y0 - 6.0,
                run.result.p
            );
            let _ = writeln!(
                s,
                r##"<rect x="{x0}" y="{y0}" width="{PANEL}" height="{PANEL}" fill="none" stroke="#444"/>"##
            );
            panel(
                &mut s,
                x0,
                y0,
                data,
                &run.pretrain_raster,
                &run.finetune_raster,
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn panel(s: &mut String, x0: f64, y0: f64, data: &SyntheticData, pre: &Raster, fine: &Raster) {
    let extent = pre.extent;
    let to_px = |x: f64, y: f64| {
        (
            x0 + (x + extent) / (2.0 * extent) * PANEL,
            y0 + (extent - y) / (2.0 * extent) * PANEL,
        )
    };
    for (i, &label) in data.labels.iter().enumerate() {
        let (x, y) = (data.x.get2(i, 0), data.x.get2(i, 1));
        if x.abs() > extent || y.abs() > extent {
            continue;
        }
        let (px, py) = to_px(x, y);
        let _ = writeln!(
            s,
            r#"<circle cx="{px:.1}" cy="{py:.1}" r="1.3" fill="{}" fill-opacity="0.6"/>"#,
            CLASS_COLORS[label.min(1)]
        );
    }
    for (raster, dash) in [(pre, r#" stroke-dasharray="5,3""#), (fine, "")] {
        for line in boundary_polylines(raster) {
            let pts: Vec<String> = line
                .iter()
                .map(|&(x, y)| {
                    let (px, py) = to_px(x, y);
                    format!("{px:.1},{py:.1}")
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="black" stroke-width="1.5"{dash}/>"#,
                pts.join(" ")
            );
        }
    }
}

/// Traces class changes along each raster row and links crossings in
/// neighbouring rows into polylines.
pub fn boundary_polylines(raster: &Raster) -> Vec<Vec<(f64, f64)>> {
    let n = raster.size;
    let cell = 2.0 * raster.extent / n as f64;
    let mut done: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut open: Vec<Vec<(f64, f64)>> = Vec::new();
    for j in 0..n {
        let y = -Raster::coord(j, n, raster.extent);
        let crossings: Vec<f64> = (1..n)
            .filter(|&i| raster.classes[j * n + i] != raster.classes[j * n + i - 1])
            .map(|i| {
                0.5 * (Raster::coord(i - 1, n, raster.extent) + Raster::coord(i, n, raster.extent))
            })
            .collect();
        let mut next = Vec::new();
        let mut used = vec![false; crossings.len()];
        for mut line in open.drain(..) {
            let last = line[line.len() - 1].0;
            let near = crossings
                .iter()
                .enumerate()
                .filter(|(k, x)| !used[*k] && (*x - last).abs() <= 3.0 * cell)
                .min_by(|a, b| (a.1 - last).abs().total_cmp(&(b.1 - last).abs()));
            match near {
                Some((k, &x)) => {
                    used[k] = true;
                    line.push((x, y));
                    next.push(line);
                }
                None => done.push(line),
            }
        }
        for (k, &x) in crossings.iter().enumerate() {
            if !used[k] {
                next.push(vec![(x, y)]);
            }
        }
        open = next;
    }
    done.extend(open);
    done.retain(|l| l.len() > 1);
    done
}
