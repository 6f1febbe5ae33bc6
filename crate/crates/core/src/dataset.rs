//! Synthetic shapes dataset: one class-specific shape per image over a
//! cluttered background, with exact tight boxes.
//!
//! On disk a dataset directory holds `train/` and `test/` splits, each with
//! `images/*.ppm`, `annotations.tsv` and `spec.txt`. An annotation line is
//! `relative/path<TAB>label<TAB>x0,y0,x1,y1[;x0,y0,x1,y1...]`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image_io::{self, RawImage};
use crate::kv;
use crate::metrics::BBox;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub image_size: usize,
    /// Shape pixel area as a fraction of the image, drawn uniformly.
    pub area_min: f64,
    pub area_max: f64,
    /// Clutter stroke seeds per pixel.
    pub clutter_density: f64,
    /// Maximum number of low-contrast distractor blobs per image.
    pub distractors: usize,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
    /// Tie the foreground hue to the class instead of drawing it freely.
    pub class_colors: bool,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 8,
            train_images: 2000,
            test_images: 500,
            image_size: 64,
            area_min: 0.05,
            area_max: 0.30,
            clutter_density: 0.01,
            distractors: 3,
            noise: 0.03,
            class_colors: true,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_classes > Shape::ALL.len() {
            return bad(format!(
                "num_classes {} outside 1..={}",
                self.num_classes,
                Shape::ALL.len()
            ));
        }
        if self.train_images == 0 || self.test_images == 0 {
            return bad("image counts must be positive".into());
        }
        if self.image_size < 16 {
            return bad(format!("image_size {} is below 16", self.image_size));
        }
        if !(self.area_min > 0.0 && self.area_min <= self.area_max && self.area_max < 1.0) {
            return bad(format!(
                "area fractions [{}, {}] must satisfy 0 < min <= max < 1",
                self.area_min, self.area_max
            ));
        }
        // the widest shape must fit inside the image at the largest area
        let worst = Shape::ALL
            .iter()
            .map(|s| {
                let (w, h) = s.box_size(self.area_max * (self.image_size * self.image_size) as f64);
                w.max(h)
            })
            .fold(0.0, f64::max);
        if worst > self.image_size as f64 - 2.0 {
            return bad(format!("area_max {} does not fit every shape", self.area_max));
        }
        if !(0.0..1.0).contains(&self.clutter_density) {
            return bad(format!("clutter_density {} outside [0, 1)", self.clutter_density));
        }
        if !(self.noise >= 0.0 && self.noise < 0.5) {
            return bad(format!("noise {} outside [0, 0.5)", self.noise));
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "num_classes" => self.num_classes = kv::value(key, raw)?,
            "train_images" => self.train_images = kv::value(key, raw)?,
            "test_images" => self.test_images = kv::value(key, raw)?,
            "image_size" => self.image_size = kv::value(key, raw)?,
            "area_min" => self.area_min = kv::value(key, raw)?,
            "area_max" => self.area_max = kv::value(key, raw)?,
            "clutter_density" => self.clutter_density = kv::value(key, raw)?,
            "distractors" => self.distractors = kv::value(key, raw)?,
            "noise" => self.noise = kv::value(key, raw)?,
            "class_colors" => self.class_colors = kv::flag(key, raw)?,
            "seed" => self.seed = kv::value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_classes", self.num_classes.to_string()),
            ("train_images", self.train_images.to_string()),
            ("test_images", self.test_images.to_string()),
            ("image_size", self.image_size.to_string()),
            ("area_min", format!("{:?}", self.area_min)),
            ("area_max", format!("{:?}", self.area_max)),
            ("clutter_density", format!("{:?}", self.clutter_density)),
            ("distractors", self.distractors.to_string()),
            ("noise", format!("{:?}", self.noise)),
            ("class_colors", self.class_colors.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Plus,
    Ring,
    Diamond,
    Ellipse,
    Star,
}

const RING_INNER: f64 = 0.55;
const PLUS_ARM: f64 = 1.0 / 3.0;
const STAR_INNER: f64 = 0.45;

fn deg(d: f64) -> f64 {
    d.to_radians()
}

/// Star vertices in unit box coordinates, point up.
fn star_polygon() -> Vec<(f64, f64)> {
    let half_w = deg(18.0).cos();
    let top = -1.0;
    let height = 1.0 + deg(36.0).cos();
    (0..10)
        .map(|k| {
            let r = if k % 2 == 0 { 1.0 } else { STAR_INNER };
            let a = deg(-90.0 + 36.0 * k as f64);
            let (x, y) = (r * a.cos(), r * a.sin());
            ((x + half_w) / (2.0 * half_w), (y - top) / height)
        })
        .collect()
}

fn point_in_polygon(poly: &[(f64, f64)], u: f64, v: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[(i + n - 1) % n];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
    }
    inside
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Disk,
        Shape::Square,
        Shape::Triangle,
        Shape::Plus,
        Shape::Ring,
        Shape::Diamond,
        Shape::Ellipse,
        Shape::Star,
    ];

    pub fn for_class(class: usize) -> Shape {
        Shape::ALL[class % Shape::ALL.len()]
    }

    /// Shape area over bounding-box area, from the continuous geometry.
    pub fn fill_ratio(self) -> f64 {
        use std::f64::consts::PI;
        match self {
            Shape::Disk | Shape::Ellipse => PI / 4.0,
            Shape::Square => 1.0,
            Shape::Triangle | Shape::Diamond => 0.5,
            Shape::Plus => 2.0 * PLUS_ARM - PLUS_ARM * PLUS_ARM,
            Shape::Ring => PI / 4.0 * (1.0 - RING_INNER * RING_INNER),
            Shape::Star => {
                let area = 5.0 * STAR_INNER * deg(36.0).sin();
                area / (2.0 * deg(18.0).cos() * (1.0 + deg(36.0).cos()))
            }
        }
    }

    /// Width over height of the bounding box.
    pub fn aspect(self) -> f64 {
        match self {
            Shape::Ellipse => 2.0,
            Shape::Star => 2.0 * deg(18.0).cos() / (1.0 + deg(36.0).cos()),
            _ => 1.0,
        }
    }

    /// Box `(w, h)` whose shape covers `area` pixels.
    fn box_size(self, area: f64) -> (f64, f64) {
        let box_area = area / self.fill_ratio();
        let h = (box_area / self.aspect()).sqrt();
        (h * self.aspect(), h)
    }

    /// Membership in unit box coordinates `(u, v) ∈ [0,1]²`.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let (x, y) = (u - 0.5, v - 0.5);
        match self {
            Shape::Disk | Shape::Ellipse => x * x + y * y <= 0.25,
            Shape::Square => (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v),
            Shape::Triangle => (0.0..=1.0).contains(&v) && x.abs() <= v / 2.0,
            Shape::Plus => {
                let arm = PLUS_ARM / 2.0;
                x.abs() <= 0.5 && y.abs() <= 0.5 && (x.abs() <= arm || y.abs() <= arm)
            }
            Shape::Ring => {
                let r2 = x * x + y * y;
                (0.25 * RING_INNER * RING_INNER..=0.25).contains(&r2)
            }
            Shape::Diamond => x.abs() + y.abs() <= 0.5,
            Shape::Star => point_in_polygon(&star_polygon(), u, v),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Plus => "plus",
            Shape::Ring => "ring",
            Shape::Diamond => "diamond",
            Shape::Ellipse => "ellipse",
            Shape::Star => "star",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?} (train, test)")),
        }
    }
}

/// One generated image before it is written.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: RawImage,
    pub label: usize,
    pub shape: Shape,
    /// Tight box of the rendered shape pixels.
    pub bbox: BBox,
    /// Box the shape geometry was scaled into.
    pub placement: (f64, f64, f64, f64),
    pub shape_pixels: usize,
}

type Rgb = [f64; 3];

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn dist(a: &Rgb, b: &Rgb) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mix(a: &Rgb, b: &Rgb, t: f64) -> Rgb {
    [0, 1, 2].map(|k| a[k] * (1.0 - t) + b[k] * t)
}

fn random_rgb(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.random(), rng.random(), rng.random()]
}

struct Canvas {
    n: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    fn at(&mut self, x: usize, y: usize) -> &mut Rgb {
        &mut self.px[y * self.n + x]
    }
}

fn background(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> (Canvas, Rgb) {
    let n = spec.image_size;
    let base = hsv(rng.random(), rng.random_range(0.1..0.5), rng.random_range(0.3..0.7));
    let other = hsv(rng.random(), rng.random_range(0.1..0.5), rng.random_range(0.3..0.7));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let freq = rng.random_range(0.15..0.6);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let tex_angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (tx, ty) = (tex_angle.cos(), tex_angle.sin());
    let mut px = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 / n as f64 - 0.5, y as f64 / n as f64 - 0.5);
            let g = (0.5 + fx * dx + fy * dy).clamp(0.0, 1.0) * 0.5;
            let tex = 0.05 * ((x as f64 * tx + y as f64 * ty) * freq + phase).sin();
            let c = mix(&base, &other, g);
            px.push(c.map(|v| v + tex));
        }
    }
    let mut canvas = Canvas { n, px };

    // low-contrast blobs that are not any class shape
    let blobs = rng.random_range(0..=spec.distractors);
    for _ in 0..blobs {
        let cx = rng.random_range(0.0..n as f64);
        let cy = rng.random_range(0.0..n as f64);
        let sx = rng.random_range(2.5..(n as f64 / 8.0).max(3.0));
        let sy = rng.random_range(2.5..(n as f64 / 8.0).max(3.0));
        let color = random_rgb(rng);
        let amp = rng.random_range(0.1..0.2);
        for y in 0..n {
            for x in 0..n {
                let (ex, ey) = ((x as f64 + 0.5 - cx) / sx, (y as f64 + 0.5 - cy) / sy);
                let w = amp * (-0.5 * (ex * ex + ey * ey)).exp();
                if w > 1e-3 {
                    let p = canvas.at(x, y);
                    *p = mix(p, &color, w);
                }
            }
        }
    }

    // short strokes
    let strokes = (0..n * n)
        .filter(|_| rng.random::<f64>() < spec.clutter_density)
        .count();
    for _ in 0..strokes {
        let mut x = rng.random_range(0.0..n as f64);
        let mut y = rng.random_range(0.0..n as f64);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let len = rng.random_range(2..7);
        let color = random_rgb(rng);
        let w = rng.random_range(0.2..0.45);
        for _ in 0..len {
            if x >= 0.0 && y >= 0.0 && (x as usize) < n && (y as usize) < n {
                let p = canvas.at(x as usize, y as usize);
                *p = mix(p, &color, w);
            }
            x += a.cos();
            y += a.sin();
        }
    }
    (canvas, base)
}

fn foreground_color(spec: &DatasetSpec, label: usize, bg: &Rgb, rng: &mut ChaCha8Rng) -> Rgb {
    loop {
        let c = if spec.class_colors {
            let hue = label as f64 / spec.num_classes as f64 + rng.random_range(-0.03..0.03);
            hsv(hue, rng.random_range(0.6..1.0), rng.random_range(0.6..1.0))
        } else {
            random_rgb(rng)
        };
        if dist(&c, bg) >= 0.45 {
            return c;
        }
    }
}

/// Renders image `index` of a split. Pure function of `(spec, split, index)`.
pub fn render(spec: &DatasetSpec, split: Split, index: usize) -> Rendered {
    let mut rng = seed::rng(&[spec.seed, split.tag(), index as u64]);
    let n = spec.image_size;
    let label = index % spec.num_classes;
    let shape = Shape::for_class(label);

    let (mut canvas, bg) = background(spec, &mut rng);

    let frac = rng.random_range(spec.area_min..=spec.area_max);
    let (w, h) = shape.box_size(frac * (n * n) as f64);
    let bx = rng.random_range(0.0..=(n as f64 - w));
    let by = rng.random_range(0.0..=(n as f64 - h));
    let color = foreground_color(spec, label, &bg, &mut rng);

    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let mut count = 0;
    let ys = by.floor() as usize..((by + h).ceil() as usize).min(n);
    for y in ys {
        for x in bx.floor() as usize..((bx + w).ceil() as usize).min(n) {
            let u = (x as f64 + 0.5 - bx) / w;
            let v = (y as f64 + 0.5 - by) / h;
            if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) && shape.contains(u, v) {
                *canvas.at(x, y) = color;
                count += 1;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    assert!(count > 0, "shape rendered no pixels");

    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut pixels = Vec::with_capacity(n * n * 3);
    for p in &canvas.px {
        for c in p {
            let v = if spec.noise > 0.0 { c + noise.sample(&mut rng) } else { *c };
            pixels.push(image_io::quantize(v));
        }
    }
    Rendered {
        image: RawImage {
            width: n,
            height: n,
            channels: 3,
            pixels,
        },
        label,
        shape,
        bbox: BBox { x0, y0, x1, y1 },
        placement: (bx, by, w, h),
        shape_pixels: count,
    }
}

fn annotation_line(rel: &str, label: usize, boxes: &[BBox]) -> String {
    let b: Vec<String> = boxes.iter().map(|b| b.to_string()).collect();
    format!("{rel}\t{label}\t{}\n", b.join(";"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateSummary {
    pub train: usize,
    pub test: usize,
    pub per_class: Vec<usize>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes both splits under `out_dir`. Output bytes depend only on `spec`.
pub fn generate(spec: &DatasetSpec, out_dir: &Path) -> Result<GenerateSummary> {
    use rayon::prelude::*;
    spec.validate()?;
    create_dir(out_dir)?;
    write_text(&out_dir.join("spec.txt"), &kv::render(&spec.to_pairs()))?;
    let mut per_class = vec![0; spec.num_classes];
    for (split, count) in [(Split::Train, spec.train_images), (Split::Test, spec.test_images)] {
        let dir = out_dir.join(split.name());
        create_dir(&dir.join("images"))?;
        let mut pairs = spec.to_pairs();
        pairs.push(("split", split.name().to_string()));
        write_text(&dir.join("spec.txt"), &kv::render(&pairs))?;
        let lines = (0..count)
            .into_par_iter()
            .map(|i| {
                let r = render(spec, split, i);
                let rel = format!("images/{i:05}.ppm");
                image_io::write(&dir.join(&rel), &r.image)?;
                Ok((r.label, annotation_line(&rel, r.label, &[r.bbox])))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut index = String::new();
        for (label, line) in lines {
            if split == Split::Train {
                per_class[label] += 1;
            }
            index.push_str(&line);
        }
        write_text(&dir.join("annotations.tsv"), &index)?;
    }
    Ok(GenerateSummary {
        train: spec.train_images,
        test: spec.test_images,
        per_class,
    })
}

/// One annotation line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    pub rel_path: String,
    pub path: PathBuf,
    pub label: usize,
    pub boxes: Vec<BBox>,
}

/// Parses an annotation index. Paths resolve against the index's directory;
/// boxes are checked against `bounds = (width, height)` when given.
pub fn parse_annotations(
    text: &str,
    path: &Path,
    bounds: Option<(usize, usize)>,
) -> Result<Vec<SampleRef>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [rel, label, boxes] = fields.as_slice() else {
            return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        if rel.is_empty() {
            return Err(err("empty image path".into()));
        }
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| err(format!("bad label {label:?}")))?;
        let boxes = boxes
            .split(';')
            .map(|b| b.parse::<BBox>().map_err(&err))
            .collect::<Result<Vec<_>>>()?;
        if let Some((w, h)) = bounds {
            if let Some(b) = boxes.iter().find(|b| !b.within(w, h)) {
                return Err(err(format!("box {b} outside the {w}×{h} image")));
            }
        }
        out.push(SampleRef {
            rel_path: rel.to_string(),
            path: base.join(rel),
            label,
            boxes,
        });
    }
    Ok(out)
}

pub fn load_annotations(path: &Path, bounds: Option<(usize, usize)>) -> Result<Vec<SampleRef>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path, bounds)
}

/// A loaded image with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RawImage,
    pub label: usize,
    pub gt_boxes: Vec<BBox>,
}

impl Sample {
    pub fn tensor(&self) -> Tensor {
        self.image.to_tensor()
    }
}

/// Reads `spec.txt` of a split or dataset directory.
pub fn read_spec(path: &Path) -> Result<DatasetSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut spec = DatasetSpec::default();
    for (line, k, v) in kv::parse(&text, path)? {
        if k == "split" {
            continue;
        }
        if !spec.apply(&k, &v)? {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("unknown key {k:?}"),
            });
        }
    }
    Ok(spec)
}

/// Opens a split directory (`.../train` or `.../test`), or a dataset root
/// together with a split name.
pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    if root.join("annotations.tsv").exists() {
        root.to_path_buf()
    } else {
        root.join(split.name())
    }
}

/// Loads every image of a split directory, checking sizes, labels and boxes.
pub fn load_split(dir: &Path) -> Result<(DatasetSpec, Vec<Sample>)> {
    use rayon::prelude::*;
    let spec = read_spec(&dir.join("spec.txt"))?;
    let n = spec.image_size;
    let refs = load_annotations(&dir.join("annotations.tsv"), Some((n, n)))?;
    if refs.is_empty() {
        return Err(Error::invalid(format!("{}: no samples", dir.display())));
    }
    if let Some(r) = refs.iter().find(|r| r.label >= spec.num_classes) {
        return Err(Error::invalid(format!(
            "{}: label {} outside {} classes",
            r.rel_path, r.label, spec.num_classes
        )));
    }
    let samples = refs
        .into_par_iter()
        .map(|r| {
            let image = image_io::read(&r.path)?;
            if (image.width, image.height, image.channels) != (n, n, 3) {
                return Err(Error::format(&r.path, format!("expected a {n}×{n} RGB image")));
            }
            Ok(Sample {
                id: r.rel_path,
                image,
                label: r.label,
                gt_boxes: r.boxes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((spec, samples))
}
