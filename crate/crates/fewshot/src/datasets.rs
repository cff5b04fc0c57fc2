//! Synthetic glyph corpus, on-disk image loading, class splits, and
//! augmentation.
//!
//! Glyph classes are random polyline templates; samples are jittered
//! renderings of their class template. Everything is deterministic in the
//! seed: per-class template streams and per-sample jitter streams are derived
//! independently, so class k looks the same no matter how many classes exist.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::rng::SeedTree;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("no class subdirectories under {0}")]
    NoClasses(PathBuf),
    #[error("class directory '{0}' contains no images")]
    EmptyClass(String),
    #[error("split ratios {0:?} must be positive and sum to 1")]
    BadRatios(Vec<f64>),
    #[error("split of {n_classes} classes by {ratios:?} leaves an empty part")]
    EmptySplit { n_classes: usize, ratios: Vec<f64> },
    #[error("unsupported channel count {0} (want 1 or 3)")]
    BadChannels(usize),
    #[error("bad manifest line {line}: {details}")]
    BadManifest { line: usize, details: String },
}

/// A labeled image collection; pixel data is CHW f32 in [0,1].
#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Image indices grouped by label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.n_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    /// Stacks the given images into a [B, C, H, W] tensor.
    pub fn batch<F: Scalar>(&self, idxs: &[usize]) -> Tensor<F> {
        let plane = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(idxs.len() * plane);
        for &i in idxs {
            data.extend(self.images[i].iter().map(|&v| F::from_f64(v as f64)));
        }
        Tensor::from_vec(data, &[idxs.len(), self.channels, self.height, self.width])
            .expect("image planes are uniform")
    }

    /// Restriction to the given classes, with labels remapped to 0..n in the
    /// order passed.
    pub fn restrict_classes(&self, classes: &[usize]) -> LabeledImageSet {
        let mut remap = vec![usize::MAX; self.n_classes()];
        for (new, &old) in classes.iter().enumerate() {
            remap[old] = new;
        }
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (img, &l) in self.images.iter().zip(&self.labels) {
            if remap[l] != usize::MAX {
                images.push(img.clone());
                labels.push(remap[l]);
            }
        }
        LabeledImageSet {
            height: self.height,
            width: self.width,
            channels: self.channels,
            images,
            labels,
            class_names: classes
                .iter()
                .map(|&c| self.class_names[c].clone())
                .collect(),
        }
    }
}

/// Parameters of the procedural glyph generator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GlyphSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    /// Per-sample jitter: rotation in radians, translation in pixels, and the
    /// multiplicative scale range.
    pub max_rotation: f64,
    pub max_translation: f64,
    pub scale_range: (f64, f64),
}

impl Default for GlyphSpec {
    fn default() -> Self {
        GlyphSpec {
            n_classes: 80,
            samples_per_class: 20,
            image_size: 28,
            max_rotation: 0.2,
            max_translation: 2.0,
            scale_range: (0.9, 1.1),
        }
    }
}

struct Stroke {
    points: Vec<(f64, f64)>, // unit-square coordinates
}

fn class_template(seed: SeedTree, class: usize) -> Vec<Stroke> {
    let mut rng = seed.derive_indexed("template", class as u64).rng();
    let n_strokes = rng.random_range(2..=5);
    (0..n_strokes)
        .map(|_| {
            let n_pts = rng.random_range(3..=6);
            Stroke {
                points: (0..n_pts)
                    .map(|_| (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)))
                    .collect(),
            }
        })
        .collect()
}

fn dist_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn render_glyph(
    template: &[Stroke],
    size: usize,
    rot: f64,
    tx: f64,
    ty: f64,
    scale: f64,
) -> Vec<f32> {
    let s = size as f64;
    let half = s / 2.0;
    let (sin, cos) = rot.sin_cos();
    // Template points -> pixel space with jitter about the image center.
    let transformed: Vec<Vec<(f64, f64)>> = template
        .iter()
        .map(|stroke| {
            stroke
                .points
                .iter()
                .map(|&(ux, uy)| {
                    let (cx, cy) = ((ux - 0.5) * s * scale, (uy - 0.5) * s * scale);
                    let (rx, ry) = (cx * cos - cy * sin, cx * sin + cy * cos);
                    (rx + half + tx, ry + half + ty)
                })
                .collect()
        })
        .collect();
    let mut img = vec![0.0f32; size * size];
    let radius = 0.9; // stroke half-width in pixels
    for stroke in &transformed {
        for seg in stroke.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let (x0, x1) = (a.0.min(b.0) - 2.0, a.0.max(b.0) + 2.0);
            let (y0, y1) = (a.1.min(b.1) - 2.0, a.1.max(b.1) + 2.0);
            let xs = (x0.floor().max(0.0) as usize)..=(x1.ceil().min(s - 1.0) as usize);
            for y in (y0.floor().max(0.0) as usize)..=(y1.ceil().min(s - 1.0) as usize) {
                for x in xs.clone() {
                    let d = dist_to_segment(x as f64 + 0.5, y as f64 + 0.5, a, b);
                    let v = (radius + 0.6 - d).clamp(0.0, 1.0) as f32;
                    let p = &mut img[y * size + x];
                    if v > *p {
                        *p = v;
                    }
                }
            }
        }
    }
    img
}

/// Deterministic synthetic glyph dataset: `n_classes` polyline templates,
/// each rendered `samples_per_class` times under small jitter.
pub fn generate_glyph_dataset(spec: &GlyphSpec, seed: u64) -> LabeledImageSet {
    let tree = SeedTree::new(seed).derive("glyphs");
    let mut images = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for class in 0..spec.n_classes {
        let template = class_template(tree, class);
        let mut jitter = tree.derive_indexed("jitter", class as u64).rng();
        for _ in 0..spec.samples_per_class {
            let rot = jitter.random_range(-spec.max_rotation..=spec.max_rotation);
            let tx = jitter.random_range(-spec.max_translation..=spec.max_translation);
            let ty = jitter.random_range(-spec.max_translation..=spec.max_translation);
            let scale = jitter.random_range(spec.scale_range.0..=spec.scale_range.1);
            images.push(render_glyph(&template, spec.image_size, rot, tx, ty, scale));
            labels.push(class);
        }
    }
    LabeledImageSet {
        height: spec.image_size,
        width: spec.image_size,
        channels: 1,
        images,
        labels,
        class_names: (0..spec.n_classes).map(|c| format!("glyph_{:03}", c)).collect(),
    }
}

/// Loads `root/<class_name>/<image file>` into a labeled set. Classes are
/// the sorted subdirectory names; files are read in sorted order. Images are
/// converted to `channels` (1 or 3) and bilinearly resized to `size` when
/// their dimensions differ.
pub fn load_image_directory(
    root: &Path,
    size: usize,
    channels: usize,
) -> Result<LabeledImageSet, DataError> {
    if channels != 1 && channels != 3 {
        return Err(DataError::BadChannels(channels));
    }
    let mut class_dirs: Vec<(String, PathBuf)> = fs::read_dir(root)
        .map_err(|e| DataError::Io {
            path: root.to_path_buf(),
            source: e,
        })?
        .filter_map(|entry| {
            let entry = entry.ok()?;
            let path = entry.path();
            path.is_dir()
                .then(|| (entry.file_name().to_string_lossy().into_owned(), path))
        })
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(DataError::NoClasses(root.to_path_buf()));
    }

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (label, (name, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| DataError::Io {
                path: dir.clone(),
                source: e,
            })?
            .filter_map(|entry| {
                let path = entry.ok()?.path();
                path.is_file().then_some(path)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(DataError::EmptyClass(name.clone()));
        }
        for file in files {
            let img = image::open(&file).map_err(|e| DataError::Decode {
                path: file.clone(),
                source: e,
            })?;
            let img = if img.width() as usize != size || img.height() as usize != size {
                img.resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
            } else {
                img
            };
            let mut data = vec![0.0f32; channels * size * size];
            if channels == 1 {
                let g = img.to_luma8();
                for (i, p) in g.pixels().enumerate() {
                    data[i] = p.0[0] as f32 / 255.0;
                }
            } else {
                let rgb = img.to_rgb8();
                let plane = size * size;
                for (i, p) in rgb.pixels().enumerate() {
                    for ch in 0..3 {
                        data[ch * plane + i] = p.0[ch] as f32 / 255.0;
                    }
                }
            }
            images.push(data);
            labels.push(label);
        }
        class_names.push(name.clone());
    }
    Ok(LabeledImageSet {
        height: size,
        width: size,
        channels,
        images,
        labels,
        class_names,
    })
}

/// Writes the set as `dir/<class_name>/<index>.png` (inverse of
/// `load_image_directory` up to 1/255 quantization).
pub fn save_image_directory(set: &LabeledImageSet, dir: &Path) -> Result<(), DataError> {
    let wrap = |path: &Path, e: std::io::Error| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    fs::create_dir_all(dir).map_err(|e| wrap(dir, e))?;
    let mut counters = vec![0usize; set.n_classes()];
    for (img, &label) in set.images.iter().zip(&set.labels) {
        let class_dir = dir.join(&set.class_names[label]);
        fs::create_dir_all(&class_dir).map_err(|e| wrap(&class_dir, e))?;
        let path = class_dir.join(format!("{:05}.png", counters[label]));
        counters[label] += 1;
        let (h, w) = (set.height as u32, set.width as u32);
        let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        if set.channels == 1 {
            let buf: Vec<u8> = img.iter().map(|&v| to_u8(v)).collect();
            image::GrayImage::from_raw(w, h, buf)
                .expect("buffer size")
                .save(&path)
                .map_err(|e| DataError::Decode {
                    path: path.clone(),
                    source: e,
                })?;
        } else {
            let plane = set.height * set.width;
            let mut buf = Vec::with_capacity(plane * 3);
            for i in 0..plane {
                for ch in 0..3 {
                    buf.push(to_u8(img[ch * plane + i]));
                }
            }
            image::RgbImage::from_raw(w, h, buf)
                .expect("buffer size")
                .save(&path)
                .map_err(|e| DataError::Decode {
                    path: path.clone(),
                    source: e,
                })?;
        }
    }
    Ok(())
}

/// Disjoint class partition for meta-learning.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClassSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClassSplit {
    pub fn part(&self, name: &str) -> &[usize] {
        match name {
            "train" => &self.train,
            "val" => &self.val,
            _ => &self.test,
        }
    }
}

/// Shuffles class ids and cuts them train/val/test by the given ratios.
/// Counts are rounded, with the test part absorbing the remainder.
pub fn split_classes(
    n_classes: usize,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<ClassSplit, DataError> {
    let rs = [ratios.0, ratios.1, ratios.2];
    if rs.iter().any(|&r| r <= 0.0) || (rs.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(DataError::BadRatios(rs.to_vec()));
    }
    let mut ids: Vec<usize> = (0..n_classes).collect();
    let mut rng = SeedTree::new(seed).derive("class-split").rng();
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let n_train = (n_classes as f64 * ratios.0).round() as usize;
    let n_val = (n_classes as f64 * ratios.1).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n_classes {
        return Err(DataError::EmptySplit {
            n_classes,
            ratios: rs.to_vec(),
        });
    }
    let train = ids[..n_train].to_vec();
    let val = ids[n_train..n_train + n_val].to_vec();
    let test = ids[n_train + n_val..].to_vec();
    Ok(ClassSplit { train, val, test })
}

/// Tab-separated manifest: one `class_id<TAB>class_name<TAB>part` line per
/// class, readable back with `read_split_manifest`.
pub fn write_split_manifest(set: &LabeledImageSet, split: &ClassSplit) -> String {
    let mut out = String::from("class_id\tclass_name\tpart\n");
    let part_of = |c: usize| {
        if split.train.contains(&c) {
            "train"
        } else if split.val.contains(&c) {
            "val"
        } else {
            "test"
        }
    };
    for c in 0..set.n_classes() {
        out.push_str(&format!("{}\t{}\t{}\n", c, set.class_names[c], part_of(c)));
    }
    out
}

pub fn read_split_manifest(text: &str) -> Result<ClassSplit, DataError> {
    let mut split = ClassSplit {
        train: vec![],
        val: vec![],
        test: vec![],
    };
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.starts_with("class_id") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(DataError::BadManifest {
                line: i + 1,
                details: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let id: usize = fields[0].parse().map_err(|_| DataError::BadManifest {
            line: i + 1,
            details: format!("bad class id '{}'", fields[0]),
        })?;
        match fields[2] {
            "train" => split.train.push(id),
            "val" => split.val.push(id),
            "test" => split.test.push(id),
            other => {
                return Err(DataError::BadManifest {
                    line: i + 1,
                    details: format!("unknown part '{}'", other),
                })
            }
        }
    }
    Ok(split)
}

/// Image-space augmentations. All operate on CHW data in [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    /// Mirror horizontally (deterministic).
    HFlip,
    /// Zero-pad by `pad` on each side, then crop back at a random offset.
    CropPad { pad: usize },
    /// Add a uniform brightness shift in [-delta, delta], clamped to [0,1].
    Brightness { delta: f32 },
}

/// The usual training-time recipe: coin-flip mirror, 2px crop-with-pad,
/// mild brightness jitter.
pub fn standard_augment(
    img: &[f32],
    height: usize,
    width: usize,
    channels: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f32> {
    let mut ops = vec![
        AugmentOp::CropPad { pad: 2 },
        AugmentOp::Brightness { delta: 0.05 },
    ];
    if rng.random_bool(0.5) {
        ops.insert(0, AugmentOp::HFlip);
    }
    augment(img, height, width, channels, &ops, rng)
}

/// Applies `ops` left to right; an empty list is the identity.
pub fn augment(
    img: &[f32],
    height: usize,
    width: usize,
    channels: usize,
    ops: &[AugmentOp],
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f32> {
    let mut data = img.to_vec();
    for op in ops {
        match *op {
            AugmentOp::HFlip => {
                for ch in 0..channels {
                    for y in 0..height {
                        let row = ch * height * width + y * width;
                        data[row..row + width].reverse();
                    }
                }
            }
            AugmentOp::CropPad { pad } => {
                let ox = rng.random_range(0..=2 * pad);
                let oy = rng.random_range(0..=2 * pad);
                let mut out = vec![0.0f32; data.len()];
                for ch in 0..channels {
                    for y in 0..height {
                        for x in 0..width {
                            let sy = y as isize + oy as isize - pad as isize;
                            let sx = x as isize + ox as isize - pad as isize;
                            let v = if sy >= 0
                                && sy < height as isize
                                && sx >= 0
                                && sx < width as isize
                            {
                                data[ch * height * width + sy as usize * width + sx as usize]
                            } else {
                                0.0
                            };
                            out[ch * height * width + y * width + x] = v;
                        }
                    }
                }
                data = out;
            }
            AugmentOp::Brightness { delta } => {
                let shift = rng.random_range(-delta..=delta);
                for v in data.iter_mut() {
                    *v = (*v + shift).clamp(0.0, 1.0);
                }
            }
        }
    }
    data
}
