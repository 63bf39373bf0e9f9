//! Chart rendering for training runs and ablation tables. Everything is
//! drawn onto a plain RGB raster with a small built-in font, so the
//! output PNGs have no dependency beyond the encoder.

use std::path::Path;

use crate::error::{CodafError, Result};
use crate::harness::ablate::AblationRow;
use crate::harness::metrics::StepRow;

pub const BG: [u8; 3] = [255, 255, 255];
pub const AXIS: [u8; 3] = [60, 60, 60];
pub const GRID: [u8; 3] = [225, 225, 225];
pub const INK: [u8; 3] = [20, 20, 20];
/// Series palette: blue, red, green, purple, orange.
pub const SERIES: [[u8; 3]; 5] =
    [[31, 90, 166], [187, 50, 50], [40, 130, 70], [120, 70, 150], [200, 130, 30]];

/// A fixed-size RGB drawing surface.
pub struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

/// Glyph bitmaps, one byte per row, low five bits used.
const GLYPH_W: usize = 5;

fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x13, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
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
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '%' => [0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '/' => [0x01, 0x02, 0x02, 0x04, 0x08, 0x08, 0x10],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '=' => [0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        _ => [0x00; 7],
    }
}

impl Canvas {
    pub fn new(w: usize, h: usize) -> Self {
        let mut px = vec![0u8; w * h * 3];
        for (i, v) in px.iter_mut().enumerate() {
            *v = BG[i % 3];
        }
        Canvas { w, h, px }
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x < 0 || y < 0 || x as usize >= self.w || y as usize >= self.h {
            return;
        }
        let i = (y as usize * self.w + x as usize) * 3;
        self.px[i..i + 3].copy_from_slice(&c);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.px[i], self.px[i + 1], self.px[i + 2]]
    }

    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        let (mut x, mut y) = (x0, y0);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn fill_rect(&mut self, x: i64, y: i64, w: usize, h: usize, c: [u8; 3]) {
        for yy in 0..h as i64 {
            for xx in 0..w as i64 {
                self.set(x + xx, y + yy, c);
            }
        }
    }

    pub fn rect(&mut self, x: i64, y: i64, w: usize, h: usize, c: [u8; 3]) {
        let (x1, y1) = (x + w as i64 - 1, y + h as i64 - 1);
        self.line(x, y, x1, y, c);
        self.line(x, y1, x1, y1, c);
        self.line(x, y, x, y1, c);
        self.line(x1, y, x1, y1, c);
    }

    /// Draw text with its top-left corner at (x, y).
    pub fn text(&mut self, x: i64, y: i64, s: &str, c: [u8; 3]) {
        let mut cx = x;
        for ch in s.chars() {
            let rows = glyph(ch);
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - rx) & 1 == 1 {
                        self.set(cx + rx as i64, y + ry as i64, c);
                    }
                }
            }
            cx += GLYPH_W as i64 + 1;
        }
    }

    /// Pixel width of a rendered string.
    pub fn text_width(s: &str) -> usize {
        s.chars().count() * (GLYPH_W + 1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CodafError::io(parent, e))?;
        }
        image::save_buffer(
            path,
            &self.px,
            self.w as u32,
            self.h as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| CodafError::data(format!("writing {}: {e}", path.display())))
    }
}

/// Maps data coordinates into a pixel viewport.
struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> i64 {
        let t = (v - self.x_min) / (self.x_max - self.x_min).max(1e-12);
        (self.left + t * self.width).round() as i64
    }

    fn y(&self, v: f64) -> i64 {
        let t = (v - self.y_min) / (self.y_max - self.y_min).max(1e-12);
        (self.top + (1.0 - t) * self.height).round() as i64
    }
}

fn nice_span(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.08;
    (lo - pad, hi + pad)
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a >= 100.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// Draw axes, grid lines and tick labels for the frame.
fn draw_frame(c: &mut Canvas, f: &Frame, title: &str, x_label: &str, y_label: &str) {
    c.text((f.left + f.width / 2.0) as i64 - Canvas::text_width(title) as i64 / 2, 8, title, INK);
    let ticks = 5usize;
    for i in 0..=ticks {
        let ty = f.y_min + (f.y_max - f.y_min) * i as f64 / ticks as f64;
        let py = f.y(ty);
        if i > 0 {
            c.line(f.left as i64, py, (f.left + f.width) as i64, py, GRID);
        }
        let label = fmt_tick(ty);
        c.text(f.left as i64 - Canvas::text_width(&label) as i64 - 4, py - 3, &label, AXIS);
        let tx = f.x_min + (f.x_max - f.x_min) * i as f64 / ticks as f64;
        let px = f.x(tx);
        let label = fmt_tick(tx);
        c.text(px - Canvas::text_width(&label) as i64 / 2, (f.top + f.height) as i64 + 6, &label, AXIS);
    }
    let (l, t, r, b) =
        (f.left as i64, f.top as i64, (f.left + f.width) as i64, (f.top + f.height) as i64);
    c.line(l, b, r, b, AXIS);
    c.line(l, t, l, b, AXIS);
    c.text(
        (f.left + f.width / 2.0) as i64 - Canvas::text_width(x_label) as i64 / 2,
        (f.top + f.height) as i64 + 18,
        x_label,
        AXIS,
    );
    c.text(4, f.top as i64 - 14, y_label, AXIS);
}

fn polyline(c: &mut Canvas, f: &Frame, pts: &[(f64, f64)], color: [u8; 3]) {
    for w in pts.windows(2) {
        c.line(f.x(w[0].0), f.y(w[0].1), f.x(w[1].0), f.y(w[1].1), color);
    }
    for &(x, y) in pts {
        c.fill_rect(f.x(x) - 1, f.y(y) - 1, 3, 3, color);
    }
}

/// Loss curves over training steps: total, detection and alignment.
pub fn plot_loss_curves(steps: &[StepRow], out: &Path) -> Result<()> {
    if steps.is_empty() {
        return Err(CodafError::data("no steps to plot".to_string()));
    }
    let series: [(&str, Box<dyn Fn(&StepRow) -> f64>); 3] = [
        ("TOTAL", Box::new(|s: &StepRow| s.total)),
        ("DETECTION", Box::new(|s: &StepRow| s.det)),
        ("ALIGNMENT", Box::new(|s: &StepRow| s.align_total)),
    ];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, get) in &series {
        for s in steps {
            lo = lo.min(get(s));
            hi = hi.max(get(s));
        }
    }
    let (y_min, y_max) = nice_span(lo, hi);
    let mut canvas = Canvas::new(640, 400);
    let frame = Frame {
        left: 64.0,
        top: 32.0,
        width: 640.0 - 64.0 - 24.0,
        height: 400.0 - 32.0 - 48.0,
        x_min: 0.0,
        x_max: (steps.len() - 1).max(1) as f64,
        y_min,
        y_max,
    };
    draw_frame(&mut canvas, &frame, "TRAINING LOSS", "STEP", "LOSS");
    for (si, (name, get)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> =
            steps.iter().enumerate().map(|(i, s)| (i as f64, get(s))).collect();
        let color = SERIES[si % SERIES.len()];
        polyline(&mut canvas, &frame, &pts, color);
        let lx = frame.left as i64 + 8 + si as i64 * 130;
        let ly = frame.top as i64 + 6;
        canvas.fill_rect(lx, ly + 2, 10, 3, color);
        canvas.text(lx + 14, ly, name, INK);
    }
    canvas.save(out)
}

/// Detection quality against the alignment weight; one point per weight,
/// averaged over seeds.
pub fn plot_ap_vs_lambda(rows: &[AblationRow], out: &Path) -> Result<()> {
    let mut pts: Vec<(f64, f64)> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for r in rows {
        if let Some(rest) = r.variant.strip_prefix("lambda-") {
            if let Ok(w) = rest.parse::<f64>() {
                if !weights.iter().any(|x| (x - w).abs() < 1e-9) {
                    weights.push(w);
                }
            }
        }
    }
    weights.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
    for w in &weights {
        let name = format!("lambda-{w:.2}");
        let aps: Vec<f64> =
            rows.iter().filter(|r| r.variant == name).map(|r| r.ap50).collect();
        if !aps.is_empty() {
            pts.push((*w, aps.iter().sum::<f64>() / aps.len() as f64));
        }
    }
    if pts.is_empty() {
        return Err(CodafError::data("no alignment-weight rows to plot".to_string()));
    }
    let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (y_min, y_max) = nice_span(lo, hi);
    let mut canvas = Canvas::new(560, 380);
    let frame = Frame {
        left: 64.0,
        top: 32.0,
        width: 560.0 - 64.0 - 24.0,
        height: 380.0 - 32.0 - 48.0,
        x_min: 0.0,
        x_max: 1.0,
        y_min,
        y_max,
    };
    draw_frame(&mut canvas, &frame, "AP50 VS ALIGNMENT WEIGHT", "WEIGHT", "AP50");
    polyline(&mut canvas, &frame, &pts, SERIES[0]);
    canvas.save(out)
}

/// Mean AP50 per variant as horizontal-labelled vertical bars.
pub fn plot_ablation_bars(rows: &[AblationRow], out: &Path) -> Result<()> {
    let mut variants: Vec<String> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant) {
            variants.push(r.variant.clone());
        }
    }
    if variants.is_empty() {
        return Err(CodafError::data("no ablation rows to plot".to_string()));
    }
    let means: Vec<f64> = variants
        .iter()
        .map(|v| {
            let aps: Vec<f64> =
                rows.iter().filter(|r| &r.variant == v).map(|r| r.ap50).collect();
            aps.iter().sum::<f64>() / aps.len() as f64
        })
        .collect();
    let hi = means.iter().cloned().fold(0.0f64, f64::max);
    let (y_min, y_max) = (0.0, nice_span(0.0, hi.max(0.05)).1);
    let width = (120 * variants.len() + 100).max(420);
    let mut canvas = Canvas::new(width, 380);
    let frame = Frame {
        left: 64.0,
        top: 32.0,
        width: width as f64 - 64.0 - 24.0,
        height: 380.0 - 32.0 - 68.0,
        x_min: 0.0,
        x_max: variants.len() as f64,
        y_min,
        y_max,
    };
    draw_frame(&mut canvas, &frame, "ABLATION AP50", "", "AP50");
    let slot = frame.width / variants.len() as f64;
    for (i, (v, m)) in variants.iter().zip(&means).enumerate() {
        let color = SERIES[i % SERIES.len()];
        let x0 = frame.left + slot * (i as f64 + 0.25);
        let x1 = frame.left + slot * (i as f64 + 0.75);
        let y0 = frame.y(*m);
        let base = frame.y(0.0);
        canvas.fill_rect(x0 as i64, y0, (x1 - x0) as usize, (base - y0).max(1) as usize, color);
        let label_x = (frame.left + slot * (i as f64 + 0.5)) as i64
            - Canvas::text_width(v) as i64 / 2;
        canvas.text(label_x, base + 18, v, INK);
        let val = format!("{m:.3}");
        let val_x = (frame.left + slot * (i as f64 + 0.5)) as i64
            - Canvas::text_width(&val) as i64 / 2;
        canvas.text(val_x, y0 - 10, &val, INK);
    }
    canvas.save(out)
}
