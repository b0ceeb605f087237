//! Synthetic shape scenes and dataset persistence.
//!
//! Scenes are grayscale images of filled disks, squares and triangles with
//! class-specific intensities over a noisy background. Ground-truth boxes are
//! the shapes' tight bounding boxes; with some probability a later shape is
//! deliberately placed over an earlier one, leaving the earlier box unchanged,
//! so the occluder label noise the pooling is meant to absorb is present in
//! the data.
//!
//! On disk a dataset is a directory with an `annotations.json` (images,
//! annotations with `[x, y, width, height]` boxes, categories) and an
//! `images/` subdirectory of binary PGM files.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::GroundTruth;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Point};
use crate::image::GrayImage;
use crate::par;

pub const CLASS_NAMES: [&str; 3] = ["disk", "square", "triangle"];

pub fn class_name(class_id: usize) -> &'static str {
    CLASS_NAMES.get(class_id).copied().unwrap_or("unknown")
}

/// Per-class fill intensities; distinct so the toy descriptor can tell
/// classes apart, with a small per-object jitter.
const CLASS_INTENSITY: [f64; 3] = [0.85, 0.60, 0.40];
const INTENSITY_JITTER: f64 = 0.06;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object size (box side) range as a fraction of the short image side.
    pub min_size_frac: f64,
    pub max_size_frac: f64,
    /// Probability that an object is placed overlapping an earlier one.
    pub occlusion_probability: f64,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_width: 128,
            image_height: 128,
            num_classes: 3,
            min_objects: 1,
            max_objects: 4,
            min_size_frac: 0.1,
            max_size_frac: 0.5,
            occlusion_probability: 0.3,
            noise_amplitude: 0.05,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::InvalidParameter("image size must be positive".into()));
        }
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return Err(Error::InvalidParameter(format!(
                "num_classes must be in 1..={}, got {}",
                CLASS_NAMES.len(),
                self.num_classes
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::InvalidParameter(format!(
                "empty objects-per-image range {}..{}",
                self.min_objects, self.max_objects
            )));
        }
        if !(self.min_size_frac > 0.0 && self.min_size_frac <= self.max_size_frac && self.max_size_frac <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "bad size range {}..{}",
                self.min_size_frac, self.max_size_frac
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion_probability) {
            return Err(Error::InvalidParameter(format!(
                "occlusion probability must be in [0,1], got {}",
                self.occlusion_probability
            )));
        }
        if !(0.0..1.0).contains(&self.noise_amplitude) {
            return Err(Error::InvalidParameter(format!(
                "noise amplitude must be in [0,1), got {}",
                self.noise_amplitude
            )));
        }
        Ok(())
    }
}

enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

struct Shape {
    kind: ShapeKind,
    center: Point,
    /// Half-extent along x and y of the tight box.
    half_w: f64,
    half_h: f64,
    intensity: f64,
}

impl Shape {
    fn bbox(&self) -> BBox {
        BBox::new(
            self.center.x - self.half_w,
            self.center.y - self.half_h,
            self.center.x + self.half_w,
            self.center.y + self.half_h,
        )
    }

    /// Whether the pixel center (x+0.5, y+0.5) is covered.
    fn covers(&self, x: usize, y: usize) -> bool {
        let px = x as f64 + 0.5 - self.center.x;
        let py = y as f64 + 0.5 - self.center.y;
        match self.kind {
            ShapeKind::Disk => {
                let r = self.half_w;
                px * px + py * py <= r * r
            }
            ShapeKind::Square => px.abs() <= self.half_w && py.abs() <= self.half_h,
            ShapeKind::Triangle => {
                // upright isoceles triangle spanning the tight box
                if py.abs() > self.half_h || px.abs() > self.half_w {
                    return false;
                }
                // at height py (top = -half_h), the half-width grows linearly
                let frac = (py + self.half_h) / (2.0 * self.half_h);
                px.abs() <= self.half_w * frac
            }
        }
    }
}

/// Renders one scene: filled shapes over uniform noise, tight ground-truth
/// boxes. Later shapes overwrite earlier pixels.
pub fn generate_scene(rng: &mut ChaCha8Rng, config: &SceneConfig) -> Result<(GrayImage, Vec<GroundTruth>)> {
    config.validate()?;
    let (w, h) = (config.image_width, config.image_height);
    let mut image = GrayImage::new(w, h);
    for p in &mut image.pixels {
        *p = rng.gen_range(0.0..config.noise_amplitude.max(f64::MIN_POSITIVE));
    }

    let count = rng.gen_range(config.min_objects..=config.max_objects);
    let short_side = w.min(h) as f64;
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    let mut gts = Vec::with_capacity(count);

    for instance_id in 0..count {
        let class_id = rng.gen_range(0..config.num_classes);
        let size = rng.gen_range(config.min_size_frac..=config.max_size_frac) * short_side;
        let (half_w, half_h) = match class_id {
            2 => {
                let aspect = rng.gen_range(0.7..1.4);
                (0.5 * size, 0.5 * size * aspect)
            }
            _ => (0.5 * size, 0.5 * size),
        };

        // keep the shape fully inside the image
        let cx_range = (half_w, w as f64 - half_w);
        let cy_range = (half_h, h as f64 - half_h);
        let occlude = instance_id > 0 && rng.gen_bool(config.occlusion_probability);
        let center = if occlude {
            // aim at a previously placed object so it gets partially covered
            let target = &shapes[rng.gen_range(0..shapes.len())];
            let b = target.bbox();
            Point::new(
                rng.gen_range(b.x1..=b.x2).clamp(cx_range.0, cx_range.1),
                rng.gen_range(b.y1..=b.y2).clamp(cy_range.0, cy_range.1),
            )
        } else {
            Point::new(
                rng.gen_range(cx_range.0..=cx_range.1),
                rng.gen_range(cy_range.0..=cy_range.1),
            )
        };

        let intensity = (CLASS_INTENSITY[class_id]
            + rng.gen_range(-INTENSITY_JITTER..=INTENSITY_JITTER))
        .clamp(0.15, 1.0);
        let kind = match class_id {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        };
        let shape = Shape {
            kind,
            center,
            half_w,
            half_h,
            intensity,
        };

        let b = shape.bbox();
        let x_lo = b.x1.floor().max(0.0) as usize;
        let x_hi = (b.x2.ceil() as usize).min(w);
        let y_lo = b.y1.floor().max(0.0) as usize;
        let y_hi = (b.y2.ceil() as usize).min(h);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                if shape.covers(x, y) {
                    image.set(x, y, shape.intensity);
                }
            }
        }

        gts.push(GroundTruth {
            bbox: b,
            class_id,
            instance_id,
        });
        shapes.push(shape);
    }

    Ok((image, gts))
}

/// One dataset entry held in memory.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub id: usize,
    pub image: GrayImage,
    pub gts: Vec<GroundTruth>,
}

/// Generates `count` scenes with per-image derived RNG streams, so generation
/// parallelizes without changing results.
pub fn generate_dataset(config: &SceneConfig, count: usize) -> Result<Vec<SceneSample>> {
    config.validate()?;
    let samples = par::map_indices(count, |id| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(id as u64 + 1);
        let (image, gts) = generate_scene(&mut rng, config).expect("validated config");
        SceneSample { id, image, gts }
    });
    Ok(samples)
}

// --- on-disk schema -------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ImageEntry {
    id: usize,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationEntry {
    id: usize,
    image_id: usize,
    category_id: usize,
    /// [x, y, width, height]
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct CategoryEntry {
    id: usize,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    images: Vec<ImageEntry>,
    annotations: Vec<AnnotationEntry>,
    categories: Vec<CategoryEntry>,
}

fn image_file_name(id: usize) -> String {
    format!("images/img_{id:06}.pgm")
}

/// Writes `annotations.json` plus one PGM per image under `dir`.
pub fn save_dataset(samples: &[SceneSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let num_classes = samples
        .iter()
        .flat_map(|s| s.gts.iter().map(|g| g.class_id + 1))
        .max()
        .unwrap_or(CLASS_NAMES.len());
    let mut file = AnnotationFile {
        images: Vec::with_capacity(samples.len()),
        annotations: Vec::new(),
        categories: (0..num_classes.max(1))
            .map(|id| CategoryEntry {
                id,
                name: class_name(id).to_string(),
            })
            .collect(),
    };
    let mut ann_id = 0;
    for sample in samples {
        let file_name = image_file_name(sample.id);
        sample.image.save_pgm(&dir.join(&file_name))?;
        file.images.push(ImageEntry {
            id: sample.id,
            file_name,
            width: sample.image.width,
            height: sample.image.height,
        });
        for gt in &sample.gts {
            file.annotations.push(AnnotationEntry {
                id: ann_id,
                image_id: sample.id,
                category_id: gt.class_id,
                bbox: [gt.bbox.x1, gt.bbox.y1, gt.bbox.width(), gt.bbox.height()],
            });
            ann_id += 1;
        }
    }
    let json = serde_json::to_vec_pretty(&file)?;
    fs::write(dir.join("annotations.json"), json)?;
    Ok(())
}

/// Loads and validates a dataset directory. Every image referenced by the
/// annotations must exist and every box must be positive and inside its image.
pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let ann_path = dir.join("annotations.json");
    let bytes = fs::read(&ann_path).map_err(|e| {
        Error::Format(format!("cannot read {}: {e}", ann_path.display()))
    })?;
    let file: AnnotationFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("malformed {}: {e}", ann_path.display())))?;

    let mut samples = Vec::with_capacity(file.images.len());
    for entry in &file.images {
        let img_path = dir.join(&entry.file_name);
        if !img_path.is_file() {
            return Err(Error::Format(format!(
                "image id {} refers to missing file {}",
                entry.id,
                img_path.display()
            )));
        }
        let image = GrayImage::load_pgm(&img_path)?;
        if image.width != entry.width || image.height != entry.height {
            return Err(Error::Format(format!(
                "image id {} is {}x{} on disk but annotated as {}x{}",
                entry.id, image.width, image.height, entry.width, entry.height
            )));
        }
        samples.push(SceneSample {
            id: entry.id,
            image,
            gts: Vec::new(),
        });
    }
    samples.sort_by_key(|s| s.id);

    for ann in &file.annotations {
        let sample = samples
            .binary_search_by_key(&ann.image_id, |s| s.id)
            .map_err(|_| {
                Error::Format(format!(
                    "annotation {} refers to unknown image id {}",
                    ann.id, ann.image_id
                ))
            })?;
        let sample = &mut samples[sample];
        let [x, y, w, h] = ann.bbox;
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Format(format!(
                "annotation {} on image {} has non-positive size {w}x{h}",
                ann.id, ann.image_id
            )));
        }
        if x < 0.0 || y < 0.0 || x + w > sample.image.width as f64 + 1e-9 || y + h > sample.image.height as f64 + 1e-9 {
            return Err(Error::Format(format!(
                "annotation {} on image {} exceeds image bounds",
                ann.id, ann.image_id
            )));
        }
        if file.categories.iter().all(|c| c.id != ann.category_id) {
            return Err(Error::Format(format!(
                "annotation {} uses undeclared category {}",
                ann.id, ann.category_id
            )));
        }
        let instance_id = sample.gts.len();
        sample.gts.push(GroundTruth {
            bbox: BBox::from_xywh(x, y, w, h),
            class_id: ann.category_id,
            instance_id,
        });
    }
    Ok(samples)
}
