//! Text, CSV and PNG output for reports and sweep tables. Text and CSV
//! output is byte-deterministic for identical inputs.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{EvalError, EvalReport, SweepTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    TextTable,
    Csv,
    PlotPng,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" | "text_table" | "txt" => Ok(ReportFormat::TextTable),
            "csv" => Ok(ReportFormat::Csv),
            "png" | "plot_png" | "plot" => Ok(ReportFormat::PlotPng),
            _ => Err(format!("unknown report format {s:?} (expected text, csv or png)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Report<'a> {
    Eval(&'a EvalReport),
    Sweep(&'a SweepTable),
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v))
}

pub fn eval_text(r: &EvalReport) -> String {
    let mut s = String::new();
    writeln!(s, "set        {}", r.set_id).unwrap();
    writeln!(s, "method     {}", r.method).unwrap();
    writeln!(s, "queries    {}", r.n_queries).unwrap();
    writeln!(s, "top-1 (%)  {}", pct(r.top1)).unwrap();
    writeln!(s, "top-5 (%)  {}", pct(r.top5)).unwrap();
    writeln!(s, "digest     {}", r.config_digest).unwrap();
    if !r.per_object.is_empty() {
        let w = r.per_object.keys().map(String::len).max().unwrap_or(0).max(6);
        writeln!(s).unwrap();
        writeln!(s, "{:<w$}  {:>7}  {:>5}", "object", "top-1 %", "n").unwrap();
        for (k, acc) in &r.per_object {
            writeln!(s, "{k:<w$}  {:>7.2}  {:>5}", 100.0 * acc, r.per_object_queries[k]).unwrap();
        }
    }
    s
}

pub fn eval_csv(r: &EvalReport) -> String {
    let mut s = String::from("object_id,top1,n\n");
    for (k, acc) in &r.per_object {
        writeln!(s, "{k},{acc:.6},{}", r.per_object_queries[k]).unwrap();
    }
    s
}

pub fn sweep_csv(t: &SweepTable) -> String {
    let mut s = String::from("strategy,n,trial,top1,top5\n");
    for r in &t.rows {
        writeln!(s, "{},{},{},{:.6},{:.6}", r.strategy, r.n, r.trial, r.top1, r.top5).unwrap();
    }
    s
}

pub fn sweep_text(t: &SweepTable) -> String {
    let summary = t.summary();
    let w = summary.iter().map(|s| s.strategy.len()).max().unwrap_or(0).max(8);
    let mut s = String::new();
    writeln!(
        s,
        "{:<w$}  {:>4}  {:>6}  {:>8}  {:>7}  {:>8}  {:>7}",
        "strategy", t.x_label, "trials", "top-1 %", "std", "top-5 %", "std"
    )
    .unwrap();
    for c in summary {
        writeln!(
            s,
            "{:<w$}  {:>4}  {:>6}  {:>8.2}  {:>7.2}  {:>8.2}  {:>7.2}",
            c.strategy,
            c.n,
            c.trials,
            100.0 * c.mean_top1,
            100.0 * c.std_top1,
            100.0 * c.mean_top5,
            100.0 * c.std_top5
        )
        .unwrap();
    }
    s
}

/// Writes `report` to `path` in the requested format.
pub fn emit_report(report: Report<'_>, format: ReportFormat, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    match format {
        ReportFormat::TextTable => {
            let text = match report {
                Report::Eval(r) => eval_text(r),
                Report::Sweep(t) => sweep_text(t),
            };
            std::fs::write(path, text)?;
        }
        ReportFormat::Csv => {
            let text = match report {
                Report::Eval(r) => eval_csv(r),
                Report::Sweep(t) => sweep_csv(t),
            };
            std::fs::write(path, text)?;
        }
        ReportFormat::PlotPng => {
            let img = match report {
                Report::Eval(r) => plot_eval(r),
                Report::Sweep(t) => plot_sweep(t),
            };
            img.save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| EvalError::Io(std::io::Error::other(e)))?;
        }
    }
    Ok(())
}

// --- plotting -------------------------------------------------------------

const W: u32 = 720;
const H: u32 = 440;
const LEFT: i32 = 70;
const RIGHT: i32 = 200;
const TOP: i32 = 30;
const BOTTOM: i32 = 60;
const SCALE: i32 = 2;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

/// 5x7 bitmap glyphs; lowercase letters render as uppercase.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        ',' => [0, 0, 0, 0, 0x0C, 0x04, 0x08],
        ':' => [0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '_' => [0, 0, 0, 0, 0, 0, 0x1F],
        '+' => [0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '=' => [0, 0, 0x1F, 0, 0x1F, 0, 0],
        '/' => [0, 0x01, 0x02, 0x04, 0x08, 0x10, 0],
        _ => [0; 7],
    }
}

struct Canvas(RgbImage);

impl Canvas {
    fn new() -> Self {
        Canvas(RgbImage::from_pixel(W, H, Rgb([255, 255, 255])))
    }

    fn put(&mut self, x: i32, y: i32, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < W && (y as u32) < H {
            self.0.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    fn rect(&mut self, x0: i32, y0: i32, x1: i32, y1: i32, c: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    fn line(&mut self, (mut x0, mut y0): (i32, i32), (x1, y1): (i32, i32), c: [u8; 3], thick: i32) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.rect(x0 - thick / 2, y0 - thick / 2, x0 + (thick - 1) / 2, y0 + (thick - 1) / 2, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn text(&mut self, x: i32, y: i32, s: &str, c: [u8; 3]) {
        for (i, ch) in s.chars().enumerate() {
            let g = glyph(ch);
            let ox = x + i as i32 * 6 * SCALE;
            for (row, bits) in g.iter().enumerate() {
                for col in 0..5 {
                    if bits & (0x10 >> col) != 0 {
                        let px = ox + col * SCALE;
                        let py = y + row as i32 * SCALE;
                        self.rect(px, py, px + SCALE - 1, py + SCALE - 1, c);
                    }
                }
            }
        }
    }

    fn text_width(s: &str) -> i32 {
        s.chars().count() as i32 * 6 * SCALE
    }

    /// Frame with a 0–100 % y axis; returns the y mapping.
    fn axes(&mut self, y_label: &str, x_label: &str) -> impl Fn(f64) -> i32 {
        let (x0, x1, y0, y1) = (LEFT, W as i32 - RIGHT, TOP, H as i32 - BOTTOM);
        let ymap = move |v: f64| y1 - ((v.clamp(0.0, 1.0)) * f64::from(y1 - y0)).round() as i32;
        for k in 0..=4 {
            let v = f64::from(k) / 4.0;
            let y = ymap(v);
            self.line((x0, y), (x1, y), [225, 225, 225], 1);
            let label = format!("{}", k * 25);
            self.text(x0 - 8 - Self::text_width(&label), y - 7, &label, [60, 60, 60]);
        }
        self.line((x0, y0), (x0, y1), [0, 0, 0], 2);
        self.line((x0, y1), (x1, y1), [0, 0, 0], 2);
        self.text(8, 8, y_label, [0, 0, 0]);
        self.text((x0 + x1) / 2 - Self::text_width(x_label) / 2, H as i32 - 22, x_label, [0, 0, 0]);
        ymap
    }
}

fn plot_sweep(t: &SweepTable) -> RgbImage {
    let mut cv = Canvas::new();
    let ymap = cv.axes("TOP-1 %", &t.x_label);
    let summary = t.summary();
    let (x0, x1) = (LEFT + 20, W as i32 - RIGHT - 20);
    let ns: Vec<usize> = {
        let mut v: Vec<usize> = summary.iter().map(|s| s.n).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let (nmin, nmax) = (*ns.first().unwrap_or(&0) as f64, *ns.last().unwrap_or(&1) as f64);
    let xmap = |n: usize| {
        if nmax > nmin {
            x0 + ((n as f64 - nmin) / (nmax - nmin) * f64::from(x1 - x0)).round() as i32
        } else {
            (x0 + x1) / 2
        }
    };
    let yb = H as i32 - BOTTOM;
    for &n in &ns {
        let x = xmap(n);
        cv.line((x, yb), (x, yb + 5), [0, 0, 0], 1);
        let label = n.to_string();
        cv.text(x - Canvas::text_width(&label) / 2, yb + 10, &label, [60, 60, 60]);
    }
    let mut strategies: Vec<&str> = Vec::new();
    for s in &summary {
        if !strategies.contains(&s.strategy.as_str()) {
            strategies.push(&s.strategy);
        }
    }
    for (si, name) in strategies.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<_> = summary.iter().filter(|s| s.strategy == *name).collect();
        for w in pts.windows(2) {
            cv.line((xmap(w[0].n), ymap(w[0].mean_top1)), (xmap(w[1].n), ymap(w[1].mean_top1)), color, 2);
        }
        for p in &pts {
            let (x, y) = (xmap(p.n), ymap(p.mean_top1));
            if p.std_top1 > 0.0 {
                let (lo, hi) = (ymap(p.mean_top1 - p.std_top1), ymap(p.mean_top1 + p.std_top1));
                cv.line((x, lo), (x, hi), color, 1);
                cv.line((x - 4, lo), (x + 4, lo), color, 1);
                cv.line((x - 4, hi), (x + 4, hi), color, 1);
            }
            cv.rect(x - 3, y - 3, x + 3, y + 3, color);
        }
        let ly = TOP + 10 + si as i32 * 22;
        let lx = W as i32 - RIGHT + 15;
        cv.rect(lx, ly, lx + 10, ly + 10, color);
        cv.text(lx + 16, ly - 2, name, [0, 0, 0]);
    }
    cv.0
}

fn plot_eval(r: &EvalReport) -> RgbImage {
    let mut cv = Canvas::new();
    let ymap = cv.axes("TOP-1 %", "OBJECT");
    let n = r.per_object.len().max(1) as i32;
    let (x0, x1) = (LEFT + 4, W as i32 - RIGHT);
    let slot = ((x1 - x0) / n).max(1);
    for (i, acc) in r.per_object.values().enumerate() {
        let x = x0 + i as i32 * slot;
        cv.rect(x + slot / 6, ymap(*acc), x + slot - slot / 6 - 1, ymap(0.0), PALETTE[0]);
    }
    if let Some(t1) = r.top1 {
        let y = ymap(t1);
        cv.line((LEFT, y), (x1, y), PALETTE[1], 2);
        cv.text(x1 + 10, y - 7, &format!("MEAN {:.1}", 100.0 * t1), PALETTE[1]);
    }
    cv.0
}
