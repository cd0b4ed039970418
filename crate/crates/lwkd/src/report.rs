//! CSV-to-SVG reports over a run directory.
//!
//! | figure          | input                                   | outputs                                   |
//! |-----------------|-----------------------------------------|-------------------------------------------|
//! | `loss`          | `train_log.csv`                         | `loss_curves.svg`                         |
//! | `layer-weights` | `importance.csv`                        | `layer_weights.svg`, `layer_weights.csv`  |
//! | `size-accuracy` | `probe.csv` in the directory or one below | `size_accuracy.svg`                     |
//! | `sweep`         | `sweep.csv`                             | `sweep_table.txt`                         |
//!
//! Output depends only on the input bytes.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;

use crate::error::{Error, Result};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const IMPORTANCE: &str = "importance.csv";
pub const PROBE: &str = "probe.csv";
pub const SWEEP: &str = "sweep.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Figure {
    Loss,
    LayerWeights,
    SizeAccuracy,
    Sweep,
    /// Every figure whose input is present.
    All,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str, path: &Path) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| lwkd_core::Error::Data(format!("{}: no column {name:?}", path.display())).into())
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    lwkd_core::Error::Data(format!("{}: {e}", path.display())).into()
}

fn num(s: &str, path: &Path) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| lwkd_core::Error::Data(format!("{}: {s:?} is not a number", path.display())).into())
}

struct Svg {
    w: f64,
    h: f64,
    body: String,
}

impl Svg {
    fn new(w: f64, h: f64) -> Self {
        Self {
            w,
            h,
            body: String::new(),
        }
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let s = s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}" font-family="sans-serif" font-size="12">{s}</text>"#
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}"/>"#
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r##"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}" stroke="#ffffff"/>"##
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str) {
        let mut p = String::new();
        for (x, y) in pts {
            let _ = write!(p, "{x:.2},{y:.2} ");
        }
        let _ = writeln!(
            self.body,
            r#"<polyline fill="none" stroke="{stroke}" stroke-width="1.5" points="{}"/>"#,
            p.trim_end()
        );
    }

    fn circle(&mut self, x: f64, y: f64, fill: &str) {
        let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{fill}"/>"#);
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>\n{}</svg>\n",
            self.body,
            w = self.w,
            h = self.h
        )
    }
}

/// Plot area with linear axes.
struct Axes {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Axes {
    fn new(xr: (f64, f64), yr: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Self {
            x0: 70.0,
            y0: 40.0,
            w: 560.0,
            h: 320.0,
            xr: pad(xr),
            yr: pad(yr),
        }
    }

    fn px(&self, x: f64) -> f64 {
        self.x0 + (x - self.xr.0) / (self.xr.1 - self.xr.0) * self.w
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 + self.h - (y - self.yr.0) / (self.yr.1 - self.yr.0) * self.h
    }

    fn draw(&self, svg: &mut Svg, title: &str, xlabel: &str, ylabel: &str) {
        let (bx, by) = (self.x0, self.y0 + self.h);
        svg.line(bx, by, bx + self.w, by, "#000000");
        svg.line(bx, self.y0, bx, by, "#000000");
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.xr.0 + f * (self.xr.1 - self.xr.0);
            let yv = self.yr.0 + f * (self.yr.1 - self.yr.0);
            svg.line(self.px(xv), by, self.px(xv), by + 4.0, "#000000");
            svg.text(self.px(xv), by + 18.0, "middle", &tick(xv));
            svg.line(bx - 4.0, self.py(yv), bx, self.py(yv), "#000000");
            svg.text(bx - 8.0, self.py(yv) + 4.0, "end", &tick(yv));
        }
        svg.text(bx + self.w / 2.0, 22.0, "middle", title);
        svg.text(bx + self.w / 2.0, by + 38.0, "middle", xlabel);
        svg.text(14.0, self.y0 - 10.0, "start", ylabel);
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn legend(svg: &mut Svg, x: f64, entries: &[String]) {
    for (i, e) in entries.iter().enumerate() {
        let y = 50.0 + 16.0 * i as f64;
        svg.rect(x, y - 9.0, 10.0, 10.0, PALETTE[i % PALETTE.len()]);
        svg.text(x + 14.0, y, "start", e);
    }
}

pub fn loss_curves(path: &Path) -> Result<String> {
    let t = Table::read(path)?;
    let step = t.col("step", path)?;
    let series: Vec<usize> = t
        .header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("loss_"))
        .map(|(i, _)| i)
        .collect();
    let mut data: Vec<Vec<(f64, f64)>> = vec![Vec::new(); series.len()];
    for row in &t.rows {
        let s = num(&row[step], path)?;
        for (d, &c) in data.iter_mut().zip(&series) {
            d.push((s, num(&row[c], path)?));
        }
    }
    let xr = range(data.iter().flatten().map(|p| p.0));
    let yr = range(data.iter().flatten().map(|p| p.1));
    let ax = Axes::new(xr, (yr.0.min(0.0), yr.1));
    let mut svg = Svg::new(820.0, 400.0);
    ax.draw(&mut svg, "Distillation loss", "update", "loss");
    for (i, d) in data.iter().enumerate() {
        let pts: Vec<(f64, f64)> = d.iter().map(|&(x, y)| (ax.px(x), ax.py(y))).collect();
        svg.polyline(&pts, PALETTE[i % PALETTE.len()]);
    }
    let names: Vec<String> = series.iter().map(|&c| t.header[c].clone()).collect();
    legend(&mut svg, 650.0, &names);
    Ok(svg.finish())
}

/// Returns the heatmap and the pivoted CSV `representation,<task>...`.
pub fn layer_weights(path: &Path) -> Result<(String, String)> {
    let t = Table::read(path)?;
    let (tc, rc, ic) = (t.col("task", path)?, t.col("representation", path)?, t.col("importance", path)?);
    let mut tasks: Vec<String> = Vec::new();
    let mut reps: Vec<String> = Vec::new();
    let mut cells = BTreeMap::new();
    for row in &t.rows {
        if !tasks.contains(&row[tc]) {
            tasks.push(row[tc].clone());
        }
        if !reps.contains(&row[rc]) {
            reps.push(row[rc].clone());
        }
        cells.insert((row[tc].clone(), row[rc].clone()), num(&row[ic], path)?);
    }
    let cell = 56.0;
    let (left, top) = (90.0, 50.0);
    let mut svg = Svg::new(left + cell * reps.len() as f64 + 20.0, top + cell * tasks.len() as f64 + 30.0);
    svg.text(left, 22.0, "start", "Normalized layer importance");
    for (j, r) in reps.iter().enumerate() {
        svg.text(left + cell * (j as f64 + 0.5), top - 8.0, "middle", r);
    }
    let mut csv = String::from("representation");
    for task in &tasks {
        csv.push(',');
        csv.push_str(task);
    }
    csv.push('\n');
    for (i, task) in tasks.iter().enumerate() {
        let y = top + cell * i as f64;
        svg.text(left - 8.0, y + cell / 2.0 + 4.0, "end", task);
        for (j, r) in reps.iter().enumerate() {
            let v = cells.get(&(task.clone(), r.clone())).copied().unwrap_or(0.0);
            // white at 0, dark blue at 1
            let shade = |c: f64| (255.0 - v.clamp(0.0, 1.0) * (255.0 - c)).round() as u8;
            let fill = format!("#{:02x}{:02x}{:02x}", shade(8.0), shade(48.0), shade(107.0));
            svg.rect(left + cell * j as f64, y, cell, cell, &fill);
            svg.text(left + cell * (j as f64 + 0.5), y + cell / 2.0 + 4.0, "middle", &format!("{v:.2}"));
        }
    }
    for r in &reps {
        csv.push_str(r);
        for task in &tasks {
            let v = cells.get(&(task.clone(), r.clone())).copied().unwrap_or(0.0);
            let _ = write!(csv, ",{v:.6}");
        }
        csv.push('\n');
    }
    Ok((svg.finish(), csv))
}

fn probe_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if dir.join(PROBE).is_file() {
        out.push(dir.join(PROBE));
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    out.extend(subdirs.into_iter().map(|d| d.join(PROBE)).filter(|p| p.is_file()));
    Ok(out)
}

/// Accuracy against upstream size, one colour per task, control rows
/// excluded.
pub fn size_accuracy(files: &[PathBuf]) -> Result<String> {
    let mut points: Vec<(String, f64, f64)> = Vec::new();
    for path in files {
        let t = Table::read(path)?;
        let (tc, ac, pc, sc) = (
            t.col("task", path)?,
            t.col("accuracy", path)?,
            t.col("params", path)?,
            t.col("shuffled", path)?,
        );
        for row in &t.rows {
            if row[sc] == "true" {
                continue;
            }
            points.push((row[tc].clone(), num(&row[pc], path)? / 1e6, 100.0 * num(&row[ac], path)?));
        }
    }
    let mut tasks: Vec<String> = points.iter().map(|p| p.0.clone()).collect();
    tasks.sort();
    tasks.dedup();
    let xr = range(points.iter().map(|p| p.1));
    let ax = Axes::new((0.0, xr.1 * 1.1), (0.0, 100.0));
    let mut svg = Svg::new(820.0, 400.0);
    ax.draw(&mut svg, "Probe accuracy vs. upstream size", "parameters (millions)", "accuracy (%)");
    for (task, x, y) in &points {
        let i = tasks.iter().position(|t| t == task).unwrap_or(0);
        svg.circle(ax.px(*x), ax.py(*y), PALETTE[i % PALETTE.len()]);
    }
    legend(&mut svg, 650.0, &tasks);
    Ok(svg.finish())
}

/// One row per predicted-layer set.
pub fn sweep_table(path: &Path) -> Result<String> {
    let t = Table::read(path)?;
    let mut widths: Vec<usize> = t.header.iter().map(String::len).collect();
    for r in &t.rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "  {c:>w$}");
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(&t.header);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in &t.rows {
        out.push_str(&line(r));
    }
    Ok(out)
}

/// Writes the requested figures into `out` and returns the written paths.
pub fn emit_report(input: &Path, fig: Figure, out: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Err(Error::Missing(vec![input.display().to_string()]));
    }
    let want = |f: Figure| fig == f || fig == Figure::All;
    let probes = probe_files(input)?;
    let present = |name: &str| input.join(name).is_file();
    let mut missing = Vec::new();
    if fig != Figure::All {
        let need = match fig {
            Figure::Loss => Some(TRAIN_LOG),
            Figure::LayerWeights => Some(IMPORTANCE),
            Figure::Sweep => Some(SWEEP),
            Figure::SizeAccuracy if probes.is_empty() => Some(PROBE),
            _ => None,
        };
        missing.extend(need.filter(|n| !present(n)).map(|n| input.join(n).display().to_string()));
    } else if !present(TRAIN_LOG) && !present(IMPORTANCE) && !present(SWEEP) && probes.is_empty() {
        missing.extend([TRAIN_LOG, IMPORTANCE, PROBE, SWEEP].map(|n| input.join(n).display().to_string()));
    }
    if !missing.is_empty() {
        return Err(Error::Missing(missing));
    }

    fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut written = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, body).map_err(Error::io(&p))?;
        written.push(p);
        Ok(())
    };
    if want(Figure::Loss) && present(TRAIN_LOG) {
        emit("loss_curves.svg", loss_curves(&input.join(TRAIN_LOG))?)?;
    }
    if want(Figure::LayerWeights) && present(IMPORTANCE) {
        let (svg, csv) = layer_weights(&input.join(IMPORTANCE))?;
        emit("layer_weights.svg", svg)?;
        emit("layer_weights.csv", csv)?;
    }
    if want(Figure::SizeAccuracy) && !probes.is_empty() {
        emit("size_accuracy.svg", size_accuracy(&probes)?)?;
    }
    if want(Figure::Sweep) && present(SWEEP) {
        emit("sweep_table.txt", sweep_table(&input.join(SWEEP))?)?;
    }
    Ok(written)
}
