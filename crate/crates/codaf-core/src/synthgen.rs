//! Synthetic weakly-aligned visible/infrared scene generator.
//!
//! Each sample is a pair of views of the same scene: a colour image in
//! which every object is drawn displaced by a small unknown shift, and an
//! infrared image that carries the ground-truth geometry. Class identity
//! is colour-cued so the visible stream matters, infrared warmth survives
//! night-time contrast loss so that stream matters too, and random warm
//! clutter keeps infrared from being sufficient on its own. Annotations
//! live in the infrared frame.
//!
//! Generation is deterministic: image `i` of seed `s` is drawn from
//! stream `i` of a counter-based generator seeded with `s`, so any subset
//! can be regenerated bit-for-bit in any order.

use std::fs;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::ImageEncoder;
use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CodafError, Result};
use crate::eval::{iou, GtBox};
use crate::model::TargetBox;
use crate::tensor::Scalar;

/// Object classes the generator draws.
pub const CLASS_COUNT: usize = 3;
/// Object side lengths, pixels.
const SIZE_RANGE: (f64, f64) = (10.0, 26.0);
/// Most objects a scene may hold.
const MAX_OBJECTS: usize = 4;
/// Maximum overlap accepted between ground-truth boxes.
const MAX_GT_IOU: f64 = 0.1;
/// Probability of a warm clutter blob with no object under it.
const CLUTTER_PROB: f64 = 0.5;
/// Night-time contrast divisor for the visible image.
const NIGHT_DIM: f64 = 5.0;
/// Pixel noise applied to both modalities.
const NOISE_SIGMA: f64 = 0.02;
/// Subpixel grid used to soften curved edges.
const SUPERSAMPLE: usize = 4;

/// How visible-frame displacements are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Every object gets its own displacement.
    PerObject,
    /// One displacement moves the whole visible frame.
    Global,
}

/// Scene lighting, which only the visible stream feels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Illumination {
    Day,
    Night,
}

/// Everything that determines a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    /// Largest displacement magnitude per axis, pixels.
    pub max_shift: f64,
    pub shift_mode: ShiftMode,
    /// Fraction of scenes rendered at night.
    pub night_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            count: 100,
            image_size: 128,
            max_shift: 5.0,
            shift_mode: ShiftMode::PerObject,
            night_fraction: 0.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(CodafError::config("dataset must hold at least one image".to_string()));
        }
        if self.image_size < 64 || self.image_size % 32 != 0 {
            return Err(CodafError::config(format!(
                "image size {} must be a multiple of 32, at least 64",
                self.image_size
            )));
        }
        if !(self.max_shift >= 0.0 && self.max_shift <= self.image_size as f64 / 8.0) {
            return Err(CodafError::config(format!(
                "shift bound {} outside [0, {}]",
                self.max_shift,
                self.image_size / 8
            )));
        }
        if !(0.0..=1.0).contains(&self.night_fraction) {
            return Err(CodafError::config(format!(
                "night fraction {} outside [0, 1]",
                self.night_fraction
            )));
        }
        Ok(())
    }
}

/// One annotated object, all coordinates in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub class_id: usize,
    /// Ground truth, infrared frame, corner form.
    pub bbox_ir: [f64; 4],
    /// Where the object actually sits in the visible frame.
    pub bbox_rgb: [f64; 4],
    /// Visible-frame displacement applied to this object.
    pub shift: [f64; 2],
    /// Whether the displaced visible box ran into the image border.
    pub clipped: bool,
}

/// One scene's annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: usize,
    pub illumination: Illumination,
    pub objects: Vec<ObjectRecord>,
    /// Warm blob with no object under it, if the scene has one.
    pub clutter: Option<[f64; 4]>,
}

/// Dataset-level metadata written next to the images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GenConfig,
    pub classes: usize,
    /// Digest over every image and the annotation stream, in order.
    pub sha256: String,
}

/// A rendered pair before quantisation.
pub struct RenderedPair {
    /// Visible image, [3, S, S], values in [0, 1].
    pub rgb: Array3<f64>,
    /// Infrared image, [1, S, S], values in [0, 1].
    pub ir: Array3<f64>,
    pub record: ImageRecord,
}

struct SceneObject {
    class_id: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    shift: [f64; 2],
}

impl SceneObject {
    fn bbox_ir(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }
}

/// Day-time body colour per class; classes 0 and 2 share a shape and
/// differ only here.
const CLASS_COLORS: [[f64; 3]; CLASS_COUNT] =
    [[0.85, 0.15, 0.12], [0.10, 0.75, 0.15], [0.10, 0.20, 0.85]];

/// Whether the class is drawn as an ellipse rather than a rectangle.
fn is_ellipse(class_id: usize) -> bool {
    class_id == 1
}

/// Fraction of the pixel at (x, y) covered by the object centred at
/// (cx, cy). Rectangles get exact box coverage, ellipses a subpixel grid.
fn coverage(class_id: usize, cx: f64, cy: f64, w: f64, h: f64, x: usize, y: usize) -> f64 {
    let (px, py) = (x as f64, y as f64);
    if !is_ellipse(class_id) {
        let (x0, x1) = (cx - w / 2.0, cx + w / 2.0);
        let (y0, y1) = (cy - h / 2.0, cy + h / 2.0);
        let ox = (x1.min(px + 1.0) - x0.max(px)).clamp(0.0, 1.0);
        let oy = (y1.min(py + 1.0) - y0.max(py)).clamp(0.0, 1.0);
        ox * oy
    } else {
        let (a, b) = (w / 2.0, h / 2.0);
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let fx = px + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                let fy = py + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                let (dx, dy) = ((fx - cx) / a, (fy - cy) / b);
                if dx * dx + dy * dy <= 1.0 {
                    hits += 1;
                }
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }
}

/// Paint one shape onto a canvas: each covered pixel moves toward the
/// body value by its coverage.
fn composite(
    canvas: &mut Array3<f64>,
    class_id: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    body: &[f64],
) {
    let s = canvas.shape()[2];
    let x_lo = ((cx - w / 2.0).floor().max(0.0)) as usize;
    let y_lo = ((cy - h / 2.0).floor().max(0.0)) as usize;
    let x_hi = ((cx + w / 2.0).ceil() as usize + 1).min(s);
    let y_hi = ((cy + h / 2.0).ceil() as usize + 1).min(s);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let cov = coverage(class_id, cx, cy, w, h, x, y);
            if cov <= 0.0 {
                continue;
            }
            for (c, &v) in body.iter().enumerate() {
                let cur = canvas[[c, y, x]];
                canvas[[c, y, x]] = cur * (1.0 - cov) + v * cov;
            }
        }
    }
}

/// Smooth low-frequency background field in [base - amp, base + amp].
fn background<R: Rng>(rng: &mut R, channels: usize, s: usize, base: f64, amp: f64) -> Array3<f64> {
    let mut canvas = Array3::zeros((channels, s, s));
    for c in 0..channels {
        let fx = rng.random_range(0.5..2.0);
        let fy = rng.random_range(0.5..2.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for y in 0..s {
            for x in 0..s {
                let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / s as f64;
                canvas[[c, y, x]] = base + amp * (arg + phase).sin();
            }
        }
    }
    canvas
}

fn clip_box(b: [f64; 4], s: f64) -> ([f64; 4], bool) {
    let clipped = [
        b[0].clamp(0.0, s),
        b[1].clamp(0.0, s),
        b[2].clamp(0.0, s),
        b[3].clamp(0.0, s),
    ];
    (clipped, clipped != b)
}

/// Draw scene `index` of the dataset `cfg` describes.
pub fn render_pair(cfg: &GenConfig, index: usize) -> RenderedPair {
    let s = cfg.image_size;
    let sf = s as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Stream-per-image keeps any subset regenerable in any order.
    rng.set_stream(index as u64);

    let illumination =
        if rng.random_range(0.0..1.0) < cfg.night_fraction { Illumination::Night } else { Illumination::Day };

    let n_objects = rng.random_range(1..=MAX_OBJECTS);
    let global_shift = [
        rng.random_range(-cfg.max_shift..=cfg.max_shift),
        rng.random_range(-cfg.max_shift..=cfg.max_shift),
    ];
    let mut objects: Vec<SceneObject> = Vec::new();
    for _ in 0..n_objects {
        // Rejection-sample a placement that keeps ground truth clean.
        for _attempt in 0..60 {
            let class_id = rng.random_range(0..CLASS_COUNT);
            let w = rng.random_range(SIZE_RANGE.0..=SIZE_RANGE.1);
            let h = rng.random_range(SIZE_RANGE.0..=SIZE_RANGE.1);
            let margin = 1.0 + cfg.max_shift;
            let cx = rng.random_range(w / 2.0 + margin..sf - w / 2.0 - margin);
            let cy = rng.random_range(h / 2.0 + margin..sf - h / 2.0 - margin);
            let shift = match cfg.shift_mode {
                ShiftMode::Global => global_shift,
                ShiftMode::PerObject => [
                    rng.random_range(-cfg.max_shift..=cfg.max_shift),
                    rng.random_range(-cfg.max_shift..=cfg.max_shift),
                ],
            };
            let cand = SceneObject { class_id, cx, cy, w, h, shift };
            let candidate_box = cand.bbox_ir();
            if objects.iter().all(|o| iou(&o.bbox_ir(), &candidate_box) <= MAX_GT_IOU) {
                objects.push(cand);
                break;
            }
        }
    }

    let clutter = if rng.random_range(0.0..1.0) < CLUTTER_PROB {
        let w = rng.random_range(8.0..20.0);
        let h = rng.random_range(8.0..20.0);
        let cx = rng.random_range(w / 2.0 + 1.0..sf - w / 2.0 - 1.0);
        let cy = rng.random_range(h / 2.0 + 1.0..sf - h / 2.0 - 1.0);
        Some((cx, cy, w, h))
    } else {
        None
    };

    let mut rgb = background(&mut rng, 3, s, 0.40, 0.10);
    let mut ir = background(&mut rng, 1, s, 0.25, 0.08);

    // Clutter warms the infrared view only, beneath the real objects.
    if let Some((cx, cy, w, h)) = clutter {
        composite(&mut ir, 1, cx, cy, w, h, &[0.60]);
    }
    for o in &objects {
        composite(&mut ir, o.class_id, o.cx, o.cy, o.w, o.h, &[0.85]);
        composite(
            &mut rgb,
            o.class_id,
            o.cx + o.shift[0],
            o.cy + o.shift[1],
            o.w,
            o.h,
            &CLASS_COLORS[o.class_id],
        );
    }
    if illumination == Illumination::Night {
        rgb.mapv_inplace(|v| v / NIGHT_DIM);
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    rgb.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
    ir.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));

    let object_records = objects
        .iter()
        .map(|o| {
            let bbox_ir = o.bbox_ir();
            let raw_rgb = [
                bbox_ir[0] + o.shift[0],
                bbox_ir[1] + o.shift[1],
                bbox_ir[2] + o.shift[0],
                bbox_ir[3] + o.shift[1],
            ];
            let (bbox_rgb, clipped) = clip_box(raw_rgb, sf);
            ObjectRecord { class_id: o.class_id, bbox_ir, bbox_rgb, shift: o.shift, clipped }
        })
        .collect();
    let record = ImageRecord {
        id: index,
        illumination,
        objects: object_records,
        clutter: clutter.map(|(cx, cy, w, h)| {
            [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
        }),
    };
    RenderedPair { rgb, ir, record }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(planes: &Array3<f64>) -> Result<Vec<u8>> {
    let (c, h, w) = (planes.shape()[0], planes.shape()[1], planes.shape()[2]);
    let mut raw = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                raw.push(quantize(planes[[ch, y, x]]));
            }
        }
    }
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        other => {
            return Err(CodafError::data(format!("cannot encode a {other}-plane image")))
        }
    };
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(&raw, w as u32, h as u32, color)
        .map_err(|e| CodafError::data(format!("png encoding failed: {e}")))?;
    Ok(buf)
}

fn decode_png(bytes: &[u8], channels: usize) -> Result<Array3<f64>> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| CodafError::data(format!("png decoding failed: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planes = Array3::zeros((channels, h, w));
    match channels {
        1 => {
            let gray = img.to_luma8();
            for y in 0..h {
                for x in 0..w {
                    planes[[0, y, x]] = gray.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0;
                }
            }
        }
        3 => {
            let rgb = img.to_rgb8();
            for y in 0..h {
                for x in 0..w {
                    let p = rgb.get_pixel(x as u32, y as u32).0;
                    for c in 0..3 {
                        planes[[c, y, x]] = p[c] as f64 / 255.0;
                    }
                }
            }
        }
        other => return Err(CodafError::data(format!("cannot decode {other} planes"))),
    }
    Ok(planes)
}

fn rgb_name(id: usize) -> String {
    format!("{id:05}_rgb.png")
}

fn ir_name(id: usize) -> String {
    format!("{id:05}_ir.png")
}

/// Render the whole dataset into `dir` and return its manifest. Layout:
/// `manifest.json`, `annotations.jsonl` and an `images/` directory.
pub fn generate(cfg: &GenConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| CodafError::io(&images, e))?;
    let mut hasher = Sha256::new();
    let mut annotations = Vec::new();
    for i in 0..cfg.count {
        let pair = render_pair(cfg, i);
        let rgb_png = encode_png(&pair.rgb)?;
        let ir_png = encode_png(&pair.ir)?;
        hasher.update(&rgb_png);
        hasher.update(&ir_png);
        let rgb_path = images.join(rgb_name(i));
        fs::write(&rgb_path, &rgb_png).map_err(|e| CodafError::io(&rgb_path, e))?;
        let ir_path = images.join(ir_name(i));
        fs::write(&ir_path, &ir_png).map_err(|e| CodafError::io(&ir_path, e))?;
        let line = serde_json::to_string(&pair.record)
            .map_err(|e| CodafError::data(format!("annotation encoding failed: {e}")))?;
        annotations.extend_from_slice(line.as_bytes());
        annotations.push(b'\n');
    }
    hasher.update(&annotations);
    let ann_path = dir.join("annotations.jsonl");
    fs::write(&ann_path, &annotations).map_err(|e| CodafError::io(&ann_path, e))?;
    let manifest = Manifest {
        config: cfg.clone(),
        classes: CLASS_COUNT,
        sha256: hasher.finalize().iter().map(|b| format!("{b:02x}")).collect(),
    };
    let mani_path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CodafError::data(format!("manifest encoding failed: {e}")))?;
    let mut f = fs::File::create(&mani_path).map_err(|e| CodafError::io(&mani_path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| CodafError::io(&mani_path, e))?;
    f.write_all(b"\n").map_err(|e| CodafError::io(&mani_path, e))?;
    Ok(manifest)
}

/// A generated dataset on disk: manifest plus parsed annotations, images
/// loaded lazily per index.
pub struct Dataset {
    dir: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let mani_path = dir.join("manifest.json");
        let body = fs::read_to_string(&mani_path).map_err(|e| CodafError::io(&mani_path, e))?;
        let manifest: Manifest = serde_json::from_str(&body)
            .map_err(|e| CodafError::data(format!("manifest parse failed: {e}")))?;
        let ann_path = dir.join("annotations.jsonl");
        let file = fs::File::open(&ann_path).map_err(|e| CodafError::io(&ann_path, e))?;
        let mut records = Vec::with_capacity(manifest.config.count);
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| CodafError::io(&ann_path, e))?;
            if line.is_empty() {
                continue;
            }
            let rec: ImageRecord = serde_json::from_str(&line).map_err(|e| {
                CodafError::data(format!("annotation line {} parse failed: {e}", n + 1))
            })?;
            records.push(rec);
        }
        if records.len() != manifest.config.count {
            return Err(CodafError::data(format!(
                "manifest promises {} images, annotations hold {}",
                manifest.config.count,
                records.len()
            )));
        }
        Ok(Dataset { dir: dir.to_path_buf(), manifest, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.manifest.config.image_size
    }

    /// Load one visible/infrared pair as [3, S, S] and [1, S, S] arrays.
    pub fn pair<F: Scalar>(&self, idx: usize) -> Result<(ArrayD<F>, ArrayD<F>)> {
        let rec = self.records.get(idx).ok_or_else(|| {
            CodafError::data(format!("image {idx} outside dataset of {}", self.len()))
        })?;
        let images = self.dir.join("images");
        let rgb_path = images.join(rgb_name(rec.id));
        let rgb_bytes = fs::read(&rgb_path).map_err(|e| CodafError::io(&rgb_path, e))?;
        let ir_path = images.join(ir_name(rec.id));
        let ir_bytes = fs::read(&ir_path).map_err(|e| CodafError::io(&ir_path, e))?;
        let rgb = decode_png(&rgb_bytes, 3)?;
        let ir = decode_png(&ir_bytes, 1)?;
        let convert = |a: Array3<f64>| {
            let shape = a.shape().to_vec();
            ArrayD::from_shape_vec(
                IxDyn(&shape),
                a.into_iter().map(F::from_f64).collect(),
            )
            .expect("decoded plane count matches its length")
        };
        Ok((convert(rgb), convert(ir)))
    }

    /// Training targets for one image, infrared frame.
    pub fn targets(&self, idx: usize) -> Vec<TargetBox> {
        self.records[idx]
            .objects
            .iter()
            .map(|o| TargetBox { class_id: o.class_id, bbox: o.bbox_ir })
            .collect()
    }

    /// Every ground-truth box in the dataset, for evaluation.
    pub fn gt_boxes(&self) -> Vec<GtBox> {
        self.records
            .iter()
            .flat_map(|r| {
                r.objects.iter().map(|o| GtBox {
                    image_id: r.id,
                    class_id: o.class_id,
                    bbox: o.bbox_ir,
                })
            })
            .collect()
    }
}
