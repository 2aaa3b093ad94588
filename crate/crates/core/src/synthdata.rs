//! Deterministic synthetic shape scenes: the desk-scale detection benchmark.
//!
//! Layout on disk: `images/%06d.ppm` (binary P6) and `annotations.json`
//! with one JSON record per line.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::BBox;
use crate::error::{Result, TdmError};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Disc,
    Square,
    Triangle,
    Ring,
    Bar,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Disc,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Ring,
        ShapeClass::Bar,
    ];

    fn aspect_range(self) -> (f64, f64) {
        match self {
            ShapeClass::Bar => (3.0, 5.0),
            _ => (0.8, 1.25),
        }
    }

    /// Whether the unit-box point `(u, v)` in `[-1, 1]^2` is inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeClass::Disc => u * u + v * v <= 1.0,
            ShapeClass::Ring => {
                let r = u * u + v * v;
                r <= 1.0 && r >= 0.36
            }
            ShapeClass::Square | ShapeClass::Bar => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeClass::Triangle => {
                // Apex at the top, base along the bottom edge.
                let f = (v + 1.0) / 2.0;
                (-1.0..=1.0).contains(&v) && u.abs() <= f
            }
        }
    }
}

/// Fractions of objects drawn from the small / medium / large area buckets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBuckets {
    pub small: f64,
    pub medium: f64,
    pub large: f64,
}

fn d_canvas() -> usize {
    128
}
fn d_classes() -> Vec<ShapeClass> {
    ShapeClass::ALL.to_vec()
}
fn d_objects() -> [usize; 2] {
    [2, 6]
}
fn d_buckets() -> SizeBuckets {
    SizeBuckets {
        small: 0.4,
        medium: 0.35,
        large: 0.25,
    }
}
fn d_size_scale() -> f64 {
    0.375
}
fn d_clutter() -> f64 {
    0.08
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default = "d_canvas")]
    pub height: usize,
    #[serde(default = "d_canvas")]
    pub width: usize,
    #[serde(default = "d_classes")]
    pub classes: Vec<ShapeClass>,
    /// Inclusive range of objects per scene.
    #[serde(default = "d_objects")]
    pub objects_per_scene: [usize; 2],
    #[serde(default = "d_buckets")]
    pub size_buckets: SizeBuckets,
    /// Multiplier on the 32^2 / 96^2 area thresholds.
    #[serde(default = "d_size_scale")]
    pub size_scale: f64,
    /// Amplitude of per-pixel background noise, in `[0, 1]` intensity units.
    #[serde(default = "d_clutter")]
    pub clutter: f64,
    #[serde(default)]
    pub occlusion_allowed: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: d_canvas(),
            width: d_canvas(),
            classes: d_classes(),
            objects_per_scene: d_objects(),
            size_buckets: d_buckets(),
            size_scale: d_size_scale(),
            clutter: d_clutter(),
            occlusion_allowed: false,
        }
    }
}

/// Area thresholds `(small_max, medium_max)` for a size scale.
pub fn area_thresholds(size_scale: f64) -> (f64, f64) {
    let s = 32.0 * size_scale;
    let m = 96.0 * size_scale;
    (s * s, m * m)
}

impl SceneSpec {
    pub fn area_thresholds(&self) -> (f64, f64) {
        area_thresholds(self.size_scale)
    }

    /// Box-area sampling range per bucket, kept inside the bucket so the
    /// tight box after rasterisation lands in the same bucket.
    fn bucket_area_range(&self, bucket: usize) -> (f64, f64) {
        let (s, m) = self.area_thresholds();
        match bucket {
            0 => (0.3 * s, 0.72 * s),
            1 => (1.3 * s, 0.8 * m),
            _ => (1.2 * m, 2.2 * m),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TdmError::Config(format!("scene spec: {}", m)));
        if self.classes.is_empty() {
            return bad("no classes".into());
        }
        if self.objects_per_scene[0] > self.objects_per_scene[1] {
            return bad("objects_per_scene range is reversed".into());
        }
        let b = self.size_buckets;
        if [b.small, b.medium, b.large].iter().any(|f| *f < 0.0) || (b.small + b.medium + b.large - 1.0).abs() > 1e-9 {
            return bad("size bucket fractions must be non-negative and sum to 1".into());
        }
        if !(self.size_scale > 0.0) || !(0.0..=1.0).contains(&self.clutter) {
            return bad("size_scale must be positive and clutter in [0, 1]".into());
        }
        // Largest object: the top of the large range at the most elongated aspect.
        let (_, a_max) = self.bucket_area_range(2);
        let max_aspect = self.classes.iter().map(|c| c.aspect_range().1).fold(1.0, f64::max);
        let long_side = (a_max * max_aspect).sqrt() + 2.0;
        if b.large > 0.0 && long_side > self.height.min(self.width) as f64 {
            return bad(format!(
                "objects up to {:.0}px do not fit a {}x{} canvas",
                long_side, self.height, self.width
            ));
        }
        let (_, m_max) = self.bucket_area_range(1);
        if (m_max * max_aspect).sqrt() + 2.0 > self.height.min(self.width) as f64 {
            return bad("medium objects do not fit the canvas".into());
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// 8-bit RGB image, row-major `[H, W, 3]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    /// Network input: `[H, W, 3]` with values in `[-0.5, 0.5]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, 3],
            self.data.iter().map(|&v| v as Real / 255.0 - 0.5).collect(),
        )
        .expect("image buffer matches its shape")
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_ppm(bytes: &[u8], path: &str) -> Result<Image> {
        let err = |m: &str| TdmError::Parse {
            path: path.to_string(),
            line: 1,
            column: 0,
            message: m.to_string(),
        };
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(err("truncated PPM header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| err("non-ASCII PPM header"))?);
        }
        if fields[0] != "P6" {
            return Err(err("not a binary PPM (P6)"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| err("bad PPM header number"));
        let (w, h, maxv) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxv != 255 {
            return Err(err("only 8-bit PPM is supported"));
        }
        i += 1;
        let need = w * h * 3;
        if bytes.len() < i + need {
            return Err(err("truncated PPM pixel data"));
        }
        Ok(Image {
            width: w,
            height: h,
            data: bytes[i..i + need].to_vec(),
        })
    }
}

/// One ground-truth object; mirrors the detection schema minus the score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(flatten)]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
    /// Excluded from evaluation: neither a miss nor a match target.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ignore: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: u64,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<GtBox>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub annotations: Vec<AnnotationRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn bucket_of(rng: &mut ChaCha8Rng, b: &SizeBuckets) -> usize {
    let u: f64 = rng.gen();
    if u < b.small {
        0
    } else if u < b.small + b.medium {
        1
    } else {
        2
    }
}

fn boxes_touch(a: &BBox, b: &BBox) -> bool {
    a.x1 <= b.x2 + 1.0 && b.x1 <= a.x2 + 1.0 && a.y1 <= b.y2 + 1.0 && b.y1 <= a.y2 + 1.0
}

/// Draw one scene. Objects that cannot be placed without overlap (when
/// occlusion is off) after a bounded number of attempts are skipped.
pub fn gen_scene(spec: &SceneSpec, image_id: u64, seed: u64) -> (Image, AnnotationRecord) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let base: f64 = rng.gen_range(0.05..0.35);
    let mut px = vec![0.0f64; h * w * 3];
    let tint: [f64; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
    for (i, v) in px.iter_mut().enumerate() {
        let noise = if spec.clutter > 0.0 {
            rng.gen_range(-spec.clutter..=spec.clutter)
        } else {
            0.0
        };
        *v = base + tint[i % 3] + noise;
    }
    let n = rng.gen_range(spec.objects_per_scene[0]..=spec.objects_per_scene[1]);
    let mut boxes: Vec<GtBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = rng.gen_range(0..spec.classes.len());
        let class = spec.classes[class_id];
        let (alo, ahi) = spec.bucket_area_range(bucket_of(&mut rng, &spec.size_buckets));
        let area = rng.gen_range(alo..ahi);
        let (rlo, rhi) = class.aspect_range();
        let mut aspect = rng.gen_range(rlo..rhi);
        if class == ShapeClass::Bar && rng.gen_bool(0.5) {
            aspect = 1.0 / aspect;
        }
        // aspect = width / height
        let bw = (area * aspect).sqrt();
        let bh = area / bw;
        let color = [rng.gen_range(0.45..1.0), rng.gen_range(0.45..1.0), rng.gen_range(0.45..1.0)];
        let mut placed = None;
        for _ in 0..50 {
            if bw + 1.0 >= w as f64 || bh + 1.0 >= h as f64 {
                break;
            }
            let x0 = rng.gen_range(0.0..(w as f64 - bw));
            let y0 = rng.gen_range(0.0..(h as f64 - bh));
            let cand = BBox::new(x0, y0, x0 + bw, y0 + bh);
            if spec.occlusion_allowed || boxes.iter().all(|b| !boxes_touch(&b.bbox, &cand)) {
                placed = Some(cand);
                break;
            }
        }
        let Some(frame) = placed else { continue };
        let (cx, cy) = ((frame.x1 + frame.x2) / 2.0, (frame.y1 + frame.y2) / 2.0);
        let (ax, ay) = (bw / 2.0, bh / 2.0);
        let (mut xmin, mut ymin, mut xmax, mut ymax) = (usize::MAX, usize::MAX, 0, 0);
        let ys = frame.y1.floor() as usize..(frame.y2.ceil() as usize).min(h);
        for y in ys {
            for x in frame.x1.floor() as usize..(frame.x2.ceil() as usize).min(w) {
                let u = (x as f64 + 0.5 - cx) / ax;
                let v = (y as f64 + 0.5 - cy) / ay;
                if class.contains(u, v) {
                    let o = (y * w + x) * 3;
                    px[o..o + 3].copy_from_slice(&color);
                    xmin = xmin.min(x);
                    ymin = ymin.min(y);
                    xmax = xmax.max(x);
                    ymax = ymax.max(y);
                }
            }
        }
        if xmin == usize::MAX {
            continue;
        }
        boxes.push(GtBox {
            bbox: BBox::new(xmin as f64, ymin as f64, (xmax + 1) as f64, (ymax + 1) as f64),
            class_id,
            ignore: false,
        });
    }
    let data = px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let image = Image {
        width: w,
        height: h,
        data,
    };
    let rec = AnnotationRecord {
        image_id,
        file: image_file_name(image_id),
        width: w,
        height: h,
        boxes,
    };
    (image, rec)
}

pub fn image_file_name(image_id: u64) -> String {
    format!("images/{:06}.ppm", image_id)
}

/// `n` scenes; scene `i` uses seed `seed + i`, so output is independent of
/// the worker count.
pub fn gen_dataset(spec: &SceneSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(TdmError::Invalid("dataset needs at least one image".into()));
    }
    spec.validate()?;
    let scenes: Vec<(Image, AnnotationRecord)> = (0..n)
        .into_par_iter()
        .map(|i| gen_scene(spec, i as u64, seed.wrapping_add(i as u64)))
        .collect();
    let (images, annotations) = scenes.into_iter().unzip();
    Ok(Dataset { images, annotations })
}

pub const ANNOTATIONS_FILE: &str = "annotations.json";

/// Write one JSON value per line.
pub fn write_json_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| TdmError::io(path, e))
}

/// Parse one JSON value per non-empty line; errors name the record and line.
pub fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| TdmError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| TdmError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            column: e.column(),
            message: format!("record {}: {}", out.len(), e),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| TdmError::io(&img_dir, e))?;
    for (img, rec) in ds.images.iter().zip(&ds.annotations) {
        let p = dir.join(&rec.file);
        let mut f = fs::File::create(&p).map_err(|e| TdmError::io(&p, e))?;
        f.write_all(&img.encode_ppm()).map_err(|e| TdmError::io(&p, e))?;
    }
    write_json_lines(&dir.join(ANNOTATIONS_FILE), &ds.annotations)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    read_json_lines(path)
}

/// Read a dataset directory. A directory without an annotation file is an
/// empty dataset.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let ann = dir.join(ANNOTATIONS_FILE);
    if !ann.exists() {
        if !dir.is_dir() {
            return Err(TdmError::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no such directory")));
        }
        return Ok(Dataset::default());
    }
    let annotations = read_annotations(&ann)?;
    let mut images = Vec::with_capacity(annotations.len());
    for rec in &annotations {
        let p = dir.join(&rec.file);
        let bytes = fs::read(&p).map_err(|e| TdmError::io(&p, e))?;
        let img = Image::decode_ppm(&bytes, &p.display().to_string())?;
        if (img.width, img.height) != (rec.width, rec.height) {
            return Err(TdmError::Parse {
                path: p.display().to_string(),
                line: 1,
                column: 0,
                message: format!(
                    "image is {}x{} but its record says {}x{}",
                    img.width, img.height, rec.width, rec.height
                ),
            });
        }
        images.push(img);
    }
    Ok(Dataset { images, annotations })
}

/// Bucket index (0 small, 1 medium, 2 large) of a box area.
pub fn size_bucket(area: f64, thresholds: (f64, f64)) -> usize {
    if area < thresholds.0 {
        0
    } else if area < thresholds.1 {
        1
    } else {
        2
    }
}
