//! Synthetic cross-modality shape datasets and the `DMDS` file format.
//!
//! Three renderings of the same eight parametric shapes give controllable
//! domain gaps: `photo` fills the shape over cluttered, noisy backgrounds;
//! `cad` is a clean fill on a uniform background; `sketch` draws only an
//! anti-aliased outline with jittered vertices and a randomly deleted piece
//! of the contour. Generation is a pure function of its arguments: every
//! image draws from its own `SplitMix64` stream derived from `(seed, index)`,
//! and pixel values are quantized to `f32` so files round-trip bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::bytesio::*;
use crate::error::{MagnetError, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const DMDS_MAGIC: &str = "DMDS";
pub const DMDS_VERSION: u32 = 1;

/// Shape class vocabulary; `classes = k` uses the first `k`.
pub const SHAPE_NAMES: [&str; 8] = [
    "circle", "square", "triangle", "cross", "ring", "star", "ell", "tee",
];

/// Rendering modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Photo,
    Cad,
    Sketch,
}

impl Domain {
    pub fn tag(&self) -> &'static str {
        match self {
            Domain::Photo => "photo",
            Domain::Cad => "cad",
            Domain::Sketch => "sketch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "photo" => Ok(Domain::Photo),
            "cad" => Ok(Domain::Cad),
            "sketch" => Ok(Domain::Sketch),
            other => Err(MagnetError::Parameter(format!(
                "unknown domain {other:?} (expected photo, cad or sketch)"
            ))),
        }
    }

    fn salt(&self) -> u64 {
        match self {
            Domain::Photo => 0x70686f74,
            Domain::Cad => 0x636164,
            Domain::Sketch => 0x736b6574,
        }
    }
}

/// An image collection with optional labels and a shared class vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N x C x H x W`, values in `[0, 1]`, exactly representable as `f32`.
    pub images: Tensor,
    pub labels: Option<Vec<u16>>,
    pub class_names: Vec<String>,
    /// Provenance note ("photo", "cad", ...); not persisted in `DMDS`.
    pub domain_tag: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Flat pixels of sample `i`.
    pub fn image(&self, i: usize) -> &[f64] {
        let stride: usize = self.images.shape()[1..].iter().product();
        &self.images.data()[i * stride..(i + 1) * stride]
    }

    pub fn per_class_counts(&self) -> Option<Vec<usize>> {
        let labels = self.labels.as_ref()?;
        let mut counts = vec![0usize; self.num_classes()];
        for &y in labels {
            counts[y as usize] += 1;
        }
        Some(counts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.shape().len() != 4 {
            return Err(MagnetError::Dimension(format!(
                "dataset images must be N x C x H x W, got {:?}",
                self.images.shape()
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(MagnetError::Dimension(format!(
                    "{} labels for {} images",
                    labels.len(),
                    self.len()
                )));
            }
            let c = self.num_classes() as u16;
            if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
                return Err(MagnetError::Parameter(format!(
                    "label {bad} out of range for {c} classes"
                )));
            }
        }
        Ok(())
    }
}

/// A labeled source dataset paired with an unlabeled target dataset.
///
/// Target labels are quarantined at construction: the training-facing
/// [`DomainPair::target`] view carries none, and only the evaluation accessor
/// [`DomainPair::target_eval_labels`] can reach them.
#[derive(Clone, Debug)]
pub struct DomainPair {
    source: Dataset,
    target: Dataset,
    target_labels: Option<Vec<u16>>,
}

impl DomainPair {
    pub fn new(source: Dataset, mut target: Dataset) -> Result<Self> {
        if source.class_names != target.class_names {
            return Err(MagnetError::VocabularyMismatch(format!(
                "source classes {:?} vs target classes {:?}",
                source.class_names, target.class_names
            )));
        }
        if source.labels.is_none() {
            return Err(MagnetError::Contract(
                "source dataset must be labeled".into(),
            ));
        }
        source.validate()?;
        target.validate()?;
        let target_labels = target.labels.take();
        Ok(DomainPair {
            source,
            target,
            target_labels,
        })
    }

    pub fn source(&self) -> &Dataset {
        &self.source
    }

    /// Unlabeled view of the target domain (training path).
    pub fn target(&self) -> &Dataset {
        &self.target
    }

    /// Evaluation-only access to the withheld target labels.
    pub fn target_eval_labels(&self) -> Result<&[u16]> {
        self.target_labels.as_deref().ok_or_else(|| {
            MagnetError::Contract("target dataset carries no evaluation labels".into())
        })
    }
}

// ---- shape geometry ---------------------------------------------------------

type Point = (f64, f64);

/// Closed contours of each shape in local coordinates (nominal radius 1).
fn shape_contours(class: usize) -> Vec<Vec<Point>> {
    fn ngon(n: usize, r: f64) -> Vec<Point> {
        (0..n)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                (r * a.cos(), r * a.sin())
            })
            .collect()
    }
    match class {
        0 => vec![ngon(40, 1.0)],
        1 => vec![vec![(-0.8, -0.8), (0.8, -0.8), (0.8, 0.8), (-0.8, 0.8)]],
        2 => {
            // Equilateral triangle.
            vec![(0..3)
                .map(|i| {
                    let a = std::f64::consts::TAU * (0.25 + i as f64 / 3.0);
                    (a.cos(), a.sin())
                })
                .collect()]
        }
        3 => {
            let w = 0.33;
            vec![vec![
                (w, w),
                (w, 1.0),
                (-w, 1.0),
                (-w, w),
                (-1.0, w),
                (-1.0, -w),
                (-w, -w),
                (-w, -1.0),
                (w, -1.0),
                (w, -w),
                (1.0, -w),
                (1.0, w),
            ]]
        }
        4 => vec![ngon(40, 1.0), ngon(40, 0.55)],
        5 => {
            // Five-point star: alternating outer and inner radii.
            vec![(0..10)
                .map(|i| {
                    let r = if i % 2 == 0 { 1.0 } else { 0.45 };
                    let a = std::f64::consts::TAU * (0.25 + i as f64 / 10.0);
                    (r * a.cos(), r * a.sin())
                })
                .collect()]
        }
        6 => vec![vec![
            (-1.0, -1.0),
            (-0.3, -1.0),
            (-0.3, 0.3),
            (1.0, 0.3),
            (1.0, 1.0),
            (-1.0, 1.0),
        ]],
        7 => vec![vec![
            (-1.0, -1.0),
            (1.0, -1.0),
            (1.0, -0.3),
            (0.35, -0.3),
            (0.35, 1.0),
            (-0.35, 1.0),
            (-0.35, -0.3),
            (-1.0, -0.3),
        ]],
        other => unreachable!("shape class {other} out of catalog"),
    }
}

struct Placement {
    cx: f64,
    cy: f64,
    radius: f64,
    cos: f64,
    sin: f64,
}

impl Placement {
    fn transform(&self, p: Point) -> Point {
        (
            self.cx + self.radius * (self.cos * p.0 - self.sin * p.1),
            self.cy + self.radius * (self.sin * p.0 + self.cos * p.1),
        )
    }
}

fn draw_placement(rng: &mut SplitMix64, size: f64) -> Placement {
    let cx = size / 2.0 + rng.uniform(-size / 8.0, size / 8.0);
    let cy = size / 2.0 + rng.uniform(-size / 8.0, size / 8.0);
    let radius = rng.uniform(0.26, 0.38) * size;
    let theta = rng.uniform(0.0, std::f64::consts::TAU);
    Placement {
        cx,
        cy,
        radius,
        cos: theta.cos(),
        sin: theta.sin(),
    }
}

fn even_odd_inside(contours: &[Vec<Point>], px: f64, py: f64) -> bool {
    let mut inside = false;
    for contour in contours {
        let n = contour.len();
        for i in 0..n {
            let (ax, ay) = contour[i];
            let (bx, by) = contour[(i + 1) % n];
            if (ay > py) != (by > py) {
                let x_cross = ax + (py - ay) * (bx - ax) / (by - ay);
                if px < x_cross {
                    inside = !inside;
                }
            }
        }
    }
    inside
}

fn bbox(contours: &[Vec<Point>], margin: f64, size: usize) -> (usize, usize, usize, usize) {
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in contours {
        for &(x, y) in c {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    let clampi = |v: f64| -> usize { v.max(0.0).min(size as f64 - 1.0) as usize };
    (
        clampi(x0 - margin),
        clampi(y0 - margin),
        clampi(x1 + margin),
        clampi(y1 + margin),
    )
}

/// 3x3 supersampled coverage of the filled shape for every pixel.
fn fill_coverage(contours: &[Vec<Point>], size: usize) -> Vec<f64> {
    let mut cov = vec![0.0; size * size];
    let (x0, y0, x1, y1) = bbox(contours, 1.0, size);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let mut hits = 0u32;
            for sy in 0..3 {
                for sx in 0..3 {
                    let px = x as f64 + (sx as f64 + 0.5) / 3.0;
                    let py = y as f64 + (sy as f64 + 0.5) / 3.0;
                    if even_odd_inside(contours, px, py) {
                        hits += 1;
                    }
                }
            }
            cov[y * size + x] = hits as f64 / 9.0;
        }
    }
    cov
}

type Segment = (Point, Point);

/// Turn closed contours into kept stroke segments after deleting a window of
/// `delete_frac` of the total contour length starting at `start_frac`.
fn contour_segments(contours: &[Vec<Point>], delete_frac: f64, start_frac: f64) -> Vec<Segment> {
    let mut edges: Vec<(Point, Point, f64)> = Vec::new();
    let mut perimeter = 0.0;
    for contour in contours {
        let n = contour.len();
        for i in 0..n {
            let a = contour[i];
            let b = contour[(i + 1) % n];
            let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
            edges.push((a, b, len));
            perimeter += len;
        }
    }
    if perimeter <= 0.0 {
        return Vec::new();
    }
    let win_len = delete_frac * perimeter;
    let win_start = start_frac * perimeter;
    let win_end = win_start + win_len;
    // The window may wrap past the perimeter end.
    let windows: Vec<(f64, f64)> = if win_end <= perimeter {
        vec![(win_start, win_end)]
    } else {
        vec![(win_start, perimeter), (0.0, win_end - perimeter)]
    };

    let mut kept = Vec::new();
    let mut offset = 0.0;
    for (a, b, len) in edges {
        if len == 0.0 {
            continue;
        }
        // Subtract the deletion windows from [offset, offset + len).
        let mut pieces = vec![(offset, offset + len)];
        for &(w0, w1) in &windows {
            let mut next = Vec::new();
            for (s, t) in pieces {
                if t <= w0 || s >= w1 {
                    next.push((s, t));
                } else {
                    if s < w0 {
                        next.push((s, w0));
                    }
                    if t > w1 {
                        next.push((w1, t));
                    }
                }
            }
            pieces = next;
        }
        for (s, t) in pieces {
            if t - s <= 1e-9 {
                continue;
            }
            let f0 = (s - offset) / len;
            let f1 = (t - offset) / len;
            let p0 = (a.0 + (b.0 - a.0) * f0, a.1 + (b.1 - a.1) * f0);
            let p1 = (a.0 + (b.0 - a.0) * f1, a.1 + (b.1 - a.1) * f1);
            kept.push((p0, p1));
        }
        offset += len;
    }
    kept
}

fn dist_to_segment(p: Point, s: &Segment) -> f64 {
    let ((ax, ay), (bx, by)) = *s;
    let (dx, dy) = (bx - ax, by - ay);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq == 0.0 {
        0.0
    } else {
        (((p.0 - ax) * dx + (p.1 - ay) * dy) / len_sq).clamp(0.0, 1.0)
    };
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) as f32) as f64
}

fn render_image(domain: Domain, class: usize, size: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let s = size as f64;
    let placement = draw_placement(rng, s);
    let local = shape_contours(class);

    match domain {
        Domain::Cad => {
            let background = rng.uniform(0.05, 0.30);
            let fill = rng.uniform(0.65, 0.95);
            let world: Vec<Vec<Point>> = local
                .iter()
                .map(|c| c.iter().map(|&p| placement.transform(p)).collect())
                .collect();
            let cov = fill_coverage(&world, size);
            cov.iter()
                .map(|&c| quantize(background + c * (fill - background)))
                .collect()
        }
        Domain::Photo => {
            // Composited like a photograph: cluttered background, textured
            // fill, then a flat exposure profile that compresses the whole
            // frame into a mid-gray band. The compression is the main
            // statistics gap against the full-contrast cad rendering.
            let base = rng.uniform(0.10, 0.40);
            let n_blobs = 3 + rng.below(3) as usize;
            let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
                .map(|_| {
                    (
                        rng.uniform(0.0, s),
                        rng.uniform(0.0, s),
                        rng.uniform(s / 8.0, s / 3.0),
                        rng.uniform(-0.20, 0.20),
                    )
                })
                .collect();
            let fill = rng.uniform(0.60, 0.95);
            let gain = rng.uniform(0.45, 0.60);
            let lift = rng.uniform(0.18, 0.28);
            let world: Vec<Vec<Point>> = local
                .iter()
                .map(|c| c.iter().map(|&p| placement.transform(p)).collect())
                .collect();
            let cov = fill_coverage(&world, size);
            let mut out = vec![0.0; size * size];
            for y in 0..size {
                for x in 0..size {
                    let bg_noise = rng.uniform(-0.05, 0.05);
                    let tex_noise = rng.uniform(-0.12, 0.12);
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut bg = base;
                    for &(bx, by, br, amp) in &blobs {
                        let d2 = (px - bx).powi(2) + (py - by).powi(2);
                        bg += amp * (-d2 / (2.0 * br * br)).exp();
                    }
                    let shape_v = fill + tex_noise;
                    let c = cov[y * size + x];
                    let composed = bg + bg_noise + c * (shape_v - bg - bg_noise);
                    out[y * size + x] = quantize(lift + gain * composed.clamp(0.0, 1.0));
                }
            }
            out
        }
        Domain::Sketch => {
            let background = rng.uniform(0.0, 0.12);
            let stroke = rng.uniform(0.75, 1.0);
            // Jitter every vertex, then transform to world coordinates.
            let jittered: Vec<Vec<Point>> = local
                .iter()
                .map(|c| {
                    c.iter()
                        .map(|&(x, y)| {
                            let jx = rng.uniform(-0.07, 0.07);
                            let jy = rng.uniform(-0.07, 0.07);
                            placement.transform((x + jx, y + jy))
                        })
                        .collect()
                })
                .collect();
            let delete_frac = rng.uniform(0.0, 0.30);
            let start_frac = rng.next_f64();
            let segments = contour_segments(&jittered, delete_frac, start_frac);

            let width = (0.05 * placement.radius).max(0.6);
            let aa = 0.8;
            let mut out = vec![quantize(background); size * size];
            if segments.is_empty() {
                return out;
            }
            let seg_points: Vec<Vec<Point>> = segments.iter().map(|&(a, b)| vec![a, b]).collect();
            let (x0, y0, x1, y1) = bbox(&seg_points, width + aa + 1.0, size);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut d = f64::INFINITY;
                    for seg in &segments {
                        d = d.min(dist_to_segment(p, seg));
                        if d <= width {
                            break;
                        }
                    }
                    let cov = ((width + aa - d) / aa).clamp(0.0, 1.0);
                    out[y * size + x] = quantize(background + cov * (stroke - background));
                }
            }
            out
        }
    }
}

/// Generate a labeled synthetic dataset.
///
/// Labels cycle through the classes (`label_i = i mod classes`), so per-class
/// counts differ by at most one. Each image draws only from its own stream
/// `SplitMix64::stream(seed ^ domain_salt, index)`, making generation
/// order-independent and bit-reproducible.
pub fn generate_shapes(
    domain: Domain,
    classes: usize,
    n: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if !(2..=8).contains(&classes) {
        return Err(MagnetError::Parameter(format!(
            "classes must lie in 2..=8, got {classes}"
        )));
    }
    if ![16usize, 32, 64].contains(&image_size) {
        return Err(MagnetError::Parameter(format!(
            "image_size must be one of 16, 32, 64, got {image_size}"
        )));
    }
    if n < classes {
        return Err(MagnetError::Parameter(format!(
            "n = {n} is fewer than {classes} classes"
        )));
    }
    let mut pixels = Vec::with_capacity(n * image_size * image_size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class as u16);
        let mut rng = SplitMix64::stream(seed ^ domain.salt(), i as u64);
        pixels.extend(render_image(domain, class, image_size, &mut rng));
    }
    Ok(Dataset {
        images: Tensor::from_vec(vec![n, 1, image_size, image_size], pixels)?,
        labels: Some(labels),
        class_names: SHAPE_NAMES[..classes].iter().map(|s| s.to_string()).collect(),
        domain_tag: domain.tag().to_string(),
    })
}

// ---- DMDS file format --------------------------------------------------------

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let shape = ds.images.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(DMDS_MAGIC.as_bytes())?;
    write_u32(&mut out, DMDS_VERSION)?;
    write_u32(&mut out, n as u32)?;
    write_u32(&mut out, c as u32)?;
    write_u32(&mut out, h as u32)?;
    write_u32(&mut out, w as u32)?;
    out.write_all(&[u8::from(ds.labels.is_some())])?;
    write_u16(&mut out, ds.class_names.len() as u16)?;
    for name in &ds.class_names {
        write_u16(&mut out, name.len() as u16)?;
        out.write_all(name.as_bytes())?;
    }
    for &v in ds.images.data() {
        write_f32(&mut out, v as f32)?;
    }
    if let Some(labels) = &ds.labels {
        for &y in labels {
            write_u16(&mut out, y)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let display = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, DMDS_MAGIC, &display)?;
    let version = read_u32(&mut r, "version")?;
    if version != DMDS_VERSION {
        return Err(MagnetError::Version {
            path: display,
            found: version,
            expected: DMDS_VERSION,
        });
    }
    let n = read_u32(&mut r, "n")? as usize;
    let c = read_u32(&mut r, "c")? as usize;
    let h = read_u32(&mut r, "h")? as usize;
    let w = read_u32(&mut r, "w")? as usize;
    let has_labels = read_u8(&mut r, "has_labels")? != 0;
    let num_classes = read_u16(&mut r, "num_classes")? as usize;
    let mut class_names = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        class_names.push(read_string16(&mut r, "class name")?);
    }
    let numel = n * c * h * w;
    let mut pixels = Vec::with_capacity(numel);
    for _ in 0..numel {
        pixels.push(read_f32(&mut r, "pixel data")? as f64);
    }
    let labels = if has_labels {
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            ys.push(read_u16(&mut r, "labels")?);
        }
        Some(ys)
    } else {
        None
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(MagnetError::Truncated(
            "unexpected trailing bytes after dataset records".into(),
        ));
    }
    let ds = Dataset {
        images: Tensor::from_vec(vec![n, c, h, w], pixels)?,
        labels,
        class_names,
        domain_tag: String::new(),
    };
    ds.validate()?;
    Ok(ds)
}

// ---- splits -------------------------------------------------------------------

/// Stratified split: each class contributes `round(fraction * count)` samples
/// to the first part. Deterministic per seed; parts are disjoint, exhaustive,
/// and keep the original sample order within themselves.
pub fn split_dataset(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(MagnetError::Parameter(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| MagnetError::Contract("split_dataset needs a labeled dataset".into()))?;
    let c = ds.num_classes();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in labels.iter().enumerate() {
        per_class[y as usize].push(i);
    }
    let mut first_idx = Vec::new();
    let mut second_idx = Vec::new();
    for (class, indices) in per_class.iter().enumerate() {
        if indices.is_empty() {
            continue;
        }
        if indices.len() < 2 {
            return Err(MagnetError::Contract(format!(
                "split_dataset: class {class} has fewer than 2 samples"
            )));
        }
        let mut shuffled = indices.clone();
        let mut rng = SplitMix64::stream(seed, class as u64);
        rng.shuffle(&mut shuffled);
        let take = (fraction * indices.len() as f64).round() as usize;
        first_idx.extend_from_slice(&shuffled[..take]);
        second_idx.extend_from_slice(&shuffled[take..]);
    }
    if first_idx.is_empty() || second_idx.is_empty() {
        return Err(MagnetError::Contract(format!(
            "split fraction {fraction} leaves an empty part"
        )));
    }
    first_idx.sort_unstable();
    second_idx.sort_unstable();
    Ok((subset(ds, &first_idx), subset(ds, &second_idx)))
}

/// Copy the given samples (by index) into a new dataset.
pub fn subset(ds: &Dataset, indices: &[usize]) -> Dataset {
    let stride: usize = ds.images.shape()[1..].iter().product();
    let mut pixels = Vec::with_capacity(indices.len() * stride);
    for &i in indices {
        pixels.extend_from_slice(ds.image(i));
    }
    let mut shape = ds.images.shape().to_vec();
    shape[0] = indices.len();
    Dataset {
        images: Tensor::from_vec(shape, pixels).expect("consistent shape"),
        labels: ds
            .labels
            .as_ref()
            .map(|ys| indices.iter().map(|&i| ys[i]).collect()),
        class_names: ds.class_names.clone(),
        domain_tag: ds.domain_tag.clone(),
    }
}
