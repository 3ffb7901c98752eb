//! Synthetic detection scenes: anti-aliased circles, squares and upright
//! triangles on a flat background, with controllable mutual occlusion.
//!
//! A scene is a pure function of `(seed, index)`, so splits are just
//! disjoint index ranges of the same stream.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// Magic prefix of raw image files.
pub const IMAGE_MAGIC: &[u8; 4] = b"RDIM";
/// Sub-samples per pixel side used for anti-aliasing and occlusion counts.
pub const SUPERSAMPLE: usize = 4;
/// Human-readable class names; class id `i` is `CLASS_NAMES[i - 1]`.
pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn from_class(class: usize) -> Option<ShapeKind> {
        match class {
            1 => Some(ShapeKind::Circle),
            2 => Some(ShapeKind::Square),
            3 => Some(ShapeKind::Triangle),
            _ => None,
        }
    }
}

/// A filled shape with side (or diameter) `size` whose extent starts at `(x0, y0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeInstance {
    pub kind: ShapeKind,
    pub x0: f32,
    pub y0: f32,
    pub size: f32,
    pub color: [f32; 3],
}

impl ShapeInstance {
    pub fn bbox(&self) -> BBox {
        BBox::from_corners(self.x0, self.y0, self.x0 + self.size, self.y0 + self.size)
    }

    /// Whether the point lies inside the filled shape.
    pub fn contains(&self, px: f32, py: f32) -> bool {
        let (u, v) = ((px - self.x0) / self.size, (py - self.y0) / self.size);
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return false;
        }
        match self.kind {
            ShapeKind::Square => true,
            ShapeKind::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            // apex at the top center, base along the bottom edge
            ShapeKind::Triangle => (u - 0.5).abs() <= 0.5 * v,
        }
    }
}

/// One ground-truth object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    /// Full (unoccluded) extent.
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: usize,
    /// Share of the shape hidden behind later shapes.
    pub occlusion: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image_id: usize,
    /// `1 x 3 x H x W` in `[0, 1]`.
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

impl Scene {
    /// `(box, class)` pairs as consumed by label assignment.
    pub fn ground_truths(&self) -> Vec<(BBox, usize)> {
        self.annotations.iter().map(|a| (a.bbox, a.class)).collect()
    }
}

/// Parameters of one stream of scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    /// Offset of the first scene in the `(seed, index)` stream.
    pub first_index: usize,
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f32,
    pub max_size: f32,
    /// Chance that each object after the first is placed over an earlier one.
    pub occlusion_prob: f32,
    /// Placements hiding more than this share of any object are redrawn.
    pub max_occlusion: f32,
    /// Standard deviation of additive pixel noise.
    pub noise: f32,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            first_index: 0,
            num_images: 200,
            height: 128,
            width: 128,
            num_classes: 3,
            min_objects: 1,
            max_objects: 3,
            min_size: 16.0,
            max_size: 48.0,
            occlusion_prob: 0.3,
            max_occlusion: 0.6,
            noise: 0.02,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("dataset: {m}")));
        if self.num_images == 0 || self.height == 0 || self.width == 0 {
            return fail("image count and extents must be positive");
        }
        if !(1..=CLASS_NAMES.len()).contains(&self.num_classes) {
            return fail("num_classes must be between 1 and 3");
        }
        if self.min_objects == 0 || self.max_objects < self.min_objects {
            return fail("need 1 <= min_objects <= max_objects");
        }
        if !(self.min_size >= 2.0) || self.max_size < self.min_size {
            return fail("need 2 <= min_size <= max_size");
        }
        if self.max_size > self.height.min(self.width) as f32 {
            return fail("max_size exceeds the image");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) || !(0.0..1.0).contains(&self.max_occlusion) {
            return fail("occlusion_prob must be in [0, 1] and max_occlusion in [0, 1)");
        }
        if !(self.noise >= 0.0) {
            return fail("noise must be non-negative");
        }
        Ok(())
    }
}

/// Train/validation/test partitions of one scene stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Shared scene parameters; `num_images` and `first_index` are set per split.
    pub scene: DatasetSpec,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub occluded_test: usize,
    /// Occlusion probability of the occlusion-heavy test split.
    pub occluded_prob: f32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scene: DatasetSpec::default(),
            train: 200,
            val: 20,
            test: 50,
            occluded_test: 50,
            occluded_prob: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    OccludedTest,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 {
            return Err(Error::Config("dataset.train must be positive".into()));
        }
        for split in [Split::Train, Split::Val, Split::Test, Split::OccludedTest] {
            let spec = self.split(split);
            if spec.num_images > 0 {
                spec.validate()?;
            }
        }
        Ok(())
    }

    /// Scene stream of `split`; index ranges never overlap.
    pub fn split(&self, split: Split) -> DatasetSpec {
        let (first, count) = match split {
            Split::Train => (0, self.train),
            Split::Val => (self.train, self.val),
            Split::Test => (self.train + self.val, self.test),
            Split::OccludedTest => (self.train + self.val + self.test, self.occluded_test),
        };
        let mut spec = self.scene.clone();
        spec.first_index = first;
        spec.num_images = count;
        if split == Split::OccludedTest {
            spec.occlusion_prob = self.occluded_prob;
        }
        spec
    }
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn random_color<R: Rng + ?Sized>(rng: &mut R, avoid: &[[f32; 3]], min_dist: f32) -> [f32; 3] {
    let mut best = [0.0; 3];
    let mut best_dist = -1.0f32;
    for _ in 0..64 {
        let c = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let dist = avoid
            .iter()
            .map(|a| (0..3).map(|i| (a[i] - c[i]).abs()).fold(0.0, f32::max))
            .fold(f32::INFINITY, f32::min);
        if dist >= min_dist {
            return c;
        }
        if dist > best_dist {
            best = c;
            best_dist = dist;
        }
    }
    best
}

/// Per-shape `(covered, hidden)` sub-sample counts: `hidden` counts
/// sub-samples of shape `i` that some later shape also covers.
pub fn coverage_counts(shapes: &[ShapeInstance]) -> Vec<(usize, usize)> {
    let step = 1.0 / SUPERSAMPLE as f32;
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (x1, y1, x2, y2) = s.bbox().corners();
            let (mut total, mut hidden) = (0, 0);
            for py in (y1.floor() as i64)..(y2.ceil() as i64) {
                for px in (x1.floor() as i64)..(x2.ceil() as i64) {
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let (u, v) = (
                                px as f32 + (sx as f32 + 0.5) * step,
                                py as f32 + (sy as f32 + 0.5) * step,
                            );
                            if s.contains(u, v) {
                                total += 1;
                                if shapes[i + 1..].iter().any(|o| o.contains(u, v)) {
                                    hidden += 1;
                                }
                            }
                        }
                    }
                }
            }
            (total, hidden)
        })
        .collect()
}

fn occlusion_fractions(shapes: &[ShapeInstance]) -> Vec<f32> {
    coverage_counts(shapes)
        .into_iter()
        .map(|(t, h)| if t == 0 { 0.0 } else { h as f32 / t as f32 })
        .collect()
}

fn disjoint(a: &BBox, b: &BBox, margin: f32) -> bool {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    ax2 + margin <= bx1 || bx2 + margin <= ax1 || ay2 + margin <= by1 || by2 + margin <= ay1
}

/// Lays out the shapes of scene `index` without rendering them.
pub fn layout_scene(spec: &DatasetSpec, index: usize) -> Result<Vec<ShapeInstance>> {
    spec.validate()?;
    if index >= spec.num_images {
        return Err(Error::Config(format!(
            "scene index {index} out of range {}",
            spec.num_images
        )));
    }
    let mut rng = scene_rng(spec.seed, spec.first_index + index);
    layout_with(spec, &mut rng).map(|(shapes, _)| shapes)
}

fn layout_with(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<ShapeInstance>, [f32; 3])> {
    let (w, h) = (spec.width as f32, spec.height as f32);
    let background = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut shapes: Vec<ShapeInstance> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(1..=spec.num_classes);
        let kind = ShapeKind::from_class(class).expect("validated class range");
        let mut avoid = vec![background];
        avoid.extend(shapes.iter().map(|s| s.color));
        let color = random_color(rng, &avoid, 0.35);
        let occlude = !shapes.is_empty() && rng.random::<f32>() < spec.occlusion_prob;
        let mut placed = None;
        for attempt in 0..100 {
            let size = rng.random_range(spec.min_size..=spec.max_size);
            let (x0, y0) = if occlude && attempt < 50 {
                let target = shapes[rng.random_range(0..shapes.len())];
                let reach = 0.5 * (target.size + size);
                let cx = target.x0 + 0.5 * target.size + rng.random_range(-0.8..=0.8) * reach;
                let cy = target.y0 + 0.5 * target.size + rng.random_range(-0.8..=0.8) * reach;
                (
                    (cx - 0.5 * size).clamp(0.0, w - size),
                    (cy - 0.5 * size).clamp(0.0, h - size),
                )
            } else {
                (rng.random_range(0.0..=w - size), rng.random_range(0.0..=h - size))
            };
            let cand = ShapeInstance {
                kind,
                x0,
                y0,
                size,
                color,
            };
            let ok = if occlude && attempt < 50 {
                let mut trial = shapes.clone();
                trial.push(cand);
                let occ = occlusion_fractions(&trial);
                occ.iter().all(|o| *o <= spec.max_occlusion) && occ[..shapes.len()].iter().any(|o| *o > 0.0)
            } else {
                shapes.iter().all(|s| disjoint(&s.bbox(), &cand.bbox(), 2.0))
            };
            if ok {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(s) => shapes.push(s),
            None => break,
        }
    }
    Ok((shapes, background))
}

/// Renders scene `index` of `spec`.
pub fn gen_scene(spec: &DatasetSpec, index: usize) -> Result<Scene> {
    spec.validate()?;
    if index >= spec.num_images {
        return Err(Error::Config(format!(
            "scene index {index} out of range {}",
            spec.num_images
        )));
    }
    let mut rng = scene_rng(spec.seed, spec.first_index + index);
    let (shapes, background) = layout_with(spec, &mut rng)?;
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    let step = 1.0 / SUPERSAMPLE as f32;
    let weight = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for py in 0..h {
        for px in 0..w {
            let mut acc = [0.0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let (u, v) = (
                        px as f32 + (sx as f32 + 0.5) * step,
                        py as f32 + (sy as f32 + 0.5) * step,
                    );
                    let color = shapes
                        .iter()
                        .rev()
                        .find(|s| s.contains(u, v))
                        .map_or(background, |s| s.color);
                    for c in 0..3 {
                        acc[c] += color[c];
                    }
                }
            }
            for c in 0..3 {
                data[c * plane + py * w + px] = acc[c] * weight;
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut data {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let occlusion = occlusion_fractions(&shapes);
    let annotations = shapes
        .iter()
        .zip(occlusion)
        .map(|(s, occlusion)| Annotation {
            bbox: s.bbox(),
            class: match s.kind {
                ShapeKind::Circle => 1,
                ShapeKind::Square => 2,
                ShapeKind::Triangle => 3,
            },
            occlusion,
        })
        .collect();
    Ok(Scene {
        image_id: index,
        image: Tensor::new([1, 3, h, w], data)?,
        annotations,
    })
}

/// All scenes of `spec`, in index order.
pub fn gen_scenes(spec: &DatasetSpec) -> Result<Vec<Scene>> {
    (0..spec.num_images).map(|i| gen_scene(spec, i)).collect()
}

/// Writes `"RDIM"`, the four extents as little-endian `u32`, then the data.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    let mut buf = Vec::with_capacity(20 + 4 * image.numel());
    buf.extend_from_slice(IMAGE_MAGIC);
    for d in s.to_array() {
        let d = u32::try_from(d).map_err(|_| Error::format(path, "extent exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != IMAGE_MAGIC {
        return Err(Error::format(path, "missing RDIM magic"));
    }
    let dims: Vec<usize> = bytes[4..20]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    let numel = dims.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d));
    if numel.map(|n| n.checked_mul(4).map(|b| b + 20)) != Some(Some(bytes.len())) {
        return Err(Error::format(path, "payload length does not match the header"));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Tensor::new([dims[0], dims[1], dims[2], dims[3]], data)
}

/// One line of `annotations.jsonl`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_id: usize,
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default)]
    pub occlusion: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    spec: Option<DatasetSpec>,
    images: Vec<String>,
}

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const MANIFEST_FILE: &str = "dataset.json";

pub fn image_file_name(image_id: usize) -> String {
    format!("{image_id:05}.rdim")
}

/// Writes scenes as `images/*.rdim`, `annotations.jsonl` and a manifest.
pub fn export_scenes(scenes: &[Scene], spec: Option<&DatasetSpec>, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let file = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut out = BufWriter::new(file);
    let mut names = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let name = image_file_name(scene.image_id);
        write_image(&images.join(&name), &scene.image)?;
        names.push(format!("images/{name}"));
        for a in &scene.annotations {
            let rec = AnnotationRecord {
                image_id: scene.image_id,
                class: a.class,
                bbox: a.bbox,
                occlusion: a.occlusion,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io(&ann_path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(&ann_path, e))?;
    let manifest = Manifest {
        format: "rdad-dataset-1".into(),
        spec: spec.cloned(),
        images: names,
    };
    let man_path = dir.join(MANIFEST_FILE);
    fs::write(&man_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&man_path, e))
}

/// Generates every scene of `spec` and writes it to `dir`.
pub fn export_dataset(spec: &DatasetSpec, dir: &Path) -> Result<()> {
    export_scenes(&gen_scenes(spec)?, Some(spec), dir)
}

/// Reads `annotations.jsonl` from a dataset directory (or the file itself).
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file_path: PathBuf = if path.is_dir() {
        path.join(ANNOTATIONS_FILE)
    } else {
        path.to_path_buf()
    };
    let file = fs::File::open(&file_path).map_err(|e| Error::io(&file_path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&file_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(&file_path, format!("line {}: {e}", lineno + 1)))?;
        if !rec.bbox.is_valid() {
            return Err(Error::format(&file_path, format!("line {}: invalid box", lineno + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Loads scenes written by [`export_scenes`], in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let man_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&man_path, e.to_string()))?;
    let records = load_annotations(dir)?;
    let mut scenes = Vec::with_capacity(manifest.images.len());
    for rel in &manifest.images {
        let path = dir.join(rel);
        let stem = Path::new(rel)
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::format(&man_path, format!("bad image name {rel}")))?;
        let annotations = records
            .iter()
            .filter(|r| r.image_id == stem)
            .map(|r| Annotation {
                bbox: r.bbox,
                class: r.class,
                occlusion: r.occlusion,
            })
            .collect();
        scenes.push(Scene {
            image_id: stem,
            image: read_image(&path)?,
            annotations,
        });
    }
    Ok(scenes)
}
