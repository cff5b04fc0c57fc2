//! Toy multi-object detection: procedural shape scenes with exact ground
//! truth, a small two-scale anchor detector, a four-component matched loss,
//! greedy NMS and F1 matching, and an episodic meta-trainer that adapts the
//! detection heads over a frozen feature extractor.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Conv2d, ConvBlock, Mode, ParamCursor};
use crate::optim::{accumulate, collect, Optimizer};
use crate::rng::SeedTree;
use crate::tensor::{
    bce_with_logits, mse, no_grad, softmax_cross_entropy, Scalar, Tape, Tensor, TensorError,
};

pub const N_ANCHORS: usize = 3;
/// Loss component weights: bbox, objectness, no-object, class.
pub const W_BBOX: f64 = 1.0;
pub const W_OBJ: f64 = 1.0;
pub const W_NOOBJ: f64 = 0.5;
pub const W_CLASS: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite detection loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("bad annotation line {line}: {details}")]
    BadAnnotation { line: usize, details: String },
    #[error("episode needs {need} classes but the pool has {have}")]
    TooFewClasses { need: usize, have: usize },
}

// ---------------------------------------------------------------- scenes

/// Axis-aligned box in normalized image coordinates (center + size).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GtBox {
    fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

/// Intersection-over-union of two boxes (classes ignored).
pub fn iou(a: &GtBox, b: &GtBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One rendered scene: CHW RGB pixels in [0,1] plus exact object boxes.
#[derive(Debug, Clone)]
pub struct SceneImage {
    pub pixels: Vec<f32>,
    pub boxes: Vec<GtBox>,
}

pub const SHAPE_NAMES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLOR_NAMES: [&str; 4] = ["red", "green", "blue", "yellow"];
const COLORS: [[f32; 3]; 4] = [
    [0.95, 0.20, 0.20],
    [0.20, 0.90, 0.25],
    [0.25, 0.35, 0.95],
    [0.92, 0.88, 0.20],
];

/// shape-major class index: class = shape * n_colors + color.
pub fn detection_class_names() -> Vec<String> {
    let mut names = Vec::new();
    for shape in SHAPE_NAMES {
        for color in COLOR_NAMES {
            names.push(format!("{color}_{shape}"));
        }
    }
    names
}

pub fn n_detection_classes() -> usize {
    SHAPE_NAMES.len() * COLOR_NAMES.len()
}

/// Scene generator parameters. Sizes are normalized side lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: f64,
    pub max_side: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
            min_side: 0.20,
            max_side: 0.44,
        }
    }
}

fn inside_shape(shape: usize, dx: f64, dy: f64, half: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= half * half,
        1 => dx.abs() <= half && dy.abs() <= half,
        // Upward triangle: base at the bottom edge, apex at top center.
        _ => {
            let y = (dy + half) / (2.0 * half); // 0 at apex row, 1 at base
            dy.abs() <= half && dx.abs() <= half * y
        }
    }
}

/// Renders one scene whose objects are drawn from `visual_classes` (global
/// shape-color ids, which are also stored in the boxes). Object boxes are
/// exact by construction; overlapping placements are rejected and resampled,
/// so a crowded draw may produce fewer objects than requested.
pub fn render_scene(visual_classes: &[usize], spec: &SceneSpec, rng: &mut ChaCha8Rng) -> SceneImage {
    let s = spec.image_size;
    let mut pixels = vec![0.0f32; 3 * s * s];
    let mut boxes: Vec<GtBox> = Vec::new();
    let want = rng.random_range(spec.min_objects..=spec.max_objects);
    for _ in 0..want {
        let mut placed = None;
        for _try in 0..30 {
            let class = visual_classes[rng.random_range(0..visual_classes.len())];
            let side = rng.random_range(spec.min_side..=spec.max_side);
            let lo = side / 2.0 + 0.01;
            let cand = GtBox {
                class,
                cx: rng.random_range(lo..=1.0 - lo),
                cy: rng.random_range(lo..=1.0 - lo),
                w: side,
                h: side,
            };
            if boxes.iter().all(|b| iou(b, &cand) <= 0.1) {
                placed = Some(cand);
                break;
            }
        }
        let Some(b) = placed else { continue };
        let shape = b.class / COLOR_NAMES.len();
        let color = COLORS[b.class % COLOR_NAMES.len()];
        let gain = rng.random_range(0.8..=1.0) as f32;
        let half = b.w / 2.0;
        let (x0, x1) = ((b.cx - half) * s as f64, (b.cx + half) * s as f64);
        let (y0, y1) = ((b.cy - half) * s as f64, (b.cy + half) * s as f64);
        for y in y0.floor().max(0.0) as usize..(y1.ceil() as usize).min(s) {
            for x in x0.floor().max(0.0) as usize..(x1.ceil() as usize).min(s) {
                let dx = (x as f64 + 0.5) / s as f64 - b.cx;
                let dy = (y as f64 + 0.5) / s as f64 - b.cy;
                if inside_shape(shape, dx, dy, half) {
                    for ch in 0..3 {
                        pixels[(ch * s + y) * s + x] = color[ch] * gain;
                    }
                }
            }
        }
        boxes.push(b);
    }
    // Never emit an empty scene: fall back to one centered object.
    if boxes.is_empty() {
        let class = visual_classes[rng.random_range(0..visual_classes.len())];
        return render_fixed(class, spec);
    }
    SceneImage { pixels, boxes }
}

fn render_fixed(class: usize, spec: &SceneSpec) -> SceneImage {
    let s = spec.image_size;
    let mut pixels = vec![0.0f32; 3 * s * s];
    let b = GtBox {
        class,
        cx: 0.5,
        cy: 0.5,
        w: 0.3,
        h: 0.3,
    };
    let shape = class / COLOR_NAMES.len();
    let color = COLORS[class % COLOR_NAMES.len()];
    for y in 0..s {
        for x in 0..s {
            let dx = (x as f64 + 0.5) / s as f64 - b.cx;
            let dy = (y as f64 + 0.5) / s as f64 - b.cy;
            if inside_shape(shape, dx, dy, b.w / 2.0) {
                for ch in 0..3 {
                    pixels[(ch * s + y) * s + x] = color[ch];
                }
            }
        }
    }
    SceneImage {
        pixels,
        boxes: vec![b],
    }
}

/// A labeled corpus of scenes whose box classes are indices into `classes`
/// (a subset of the global shape-color catalog).
pub fn make_training_scenes(
    classes: &[usize],
    n_images: usize,
    spec: &SceneSpec,
    seed: u64,
) -> Vec<SceneImage> {
    let tree = SeedTree::new(seed).derive("scenes");
    (0..n_images)
        .map(|i| {
            let mut rng = tree.derive_indexed("image", i as u64).rng();
            let mut img = render_scene(classes, spec, &mut rng);
            for b in &mut img.boxes {
                b.class = classes.iter().position(|&c| c == b.class).expect("drawn from list");
            }
            img
        })
        .collect()
}

/// Stacks scenes into a [B, 3, S, S] tensor.
pub fn render_batch<F: Scalar>(images: &[&SceneImage], image_size: usize) -> Tensor<F> {
    let plane = 3 * image_size * image_size;
    let mut data = Vec::with_capacity(images.len() * plane);
    for img in images {
        data.extend(img.pixels.iter().map(|&v| F::from_f64(v as f64)));
    }
    Tensor::from_vec(data, &[images.len(), 3, image_size, image_size]).expect("uniform planes")
}

/// One `class cx cy w h` line per box, normalized coordinates.
pub fn write_annotations(boxes: &[GtBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6}\n",
            b.class, b.cx, b.cy, b.w, b.h
        ));
    }
    out
}

pub fn read_annotations(text: &str) -> Result<Vec<GtBox>, DetectError> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(DetectError::BadAnnotation {
                line: i + 1,
                details: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let class: usize = fields[0].parse().map_err(|_| DetectError::BadAnnotation {
            line: i + 1,
            details: format!("bad class '{}'", fields[0]),
        })?;
        let mut vals = [0.0f64; 4];
        for (v, f) in vals.iter_mut().zip(&fields[1..]) {
            *v = f.parse().map_err(|_| DetectError::BadAnnotation {
                line: i + 1,
                details: format!("bad number '{f}'"),
            })?;
        }
        boxes.push(GtBox {
            class,
            cx: vals[0],
            cy: vals[1],
            w: vals[2],
            h: vals[3],
        });
    }
    Ok(boxes)
}

// ---------------------------------------------------------------- anchors

/// One detection scale: a square output grid plus its anchor sizes
/// (normalized w, h).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadSpec {
    pub grid: usize,
    pub anchors: [(f64, f64); N_ANCHORS],
}

/// IoU of two boxes concentric at the origin; the usual anchor-shape metric.
fn centered_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

/// Deterministic k-means over box sizes with the 1-IoU distance. Centroids
/// are seeded from area quantiles and the result is sorted by area.
pub fn kmeans_anchors(dims: &[(f64, f64)], k: usize, iters: usize) -> Vec<(f64, f64)> {
    assert!(!dims.is_empty() && k >= 1);
    let mut sorted = dims.to_vec();
    sorted.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    let mut centroids: Vec<(f64, f64)> = (0..k)
        .map(|i| sorted[(i * (sorted.len() - 1)) / (k - 1).max(1)])
        .collect();
    for _ in 0..iters {
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); k];
        for &d in dims {
            let best = (0..k)
                .max_by(|&i, &j| centered_iou(d, centroids[i]).total_cmp(&centered_iou(d, centroids[j])))
                .unwrap();
            sums[best].0 += d.0;
            sums[best].1 += d.1;
            sums[best].2 += 1;
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s.2 > 0 {
                *c = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
    }
    centroids.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    centroids
}

/// Two-scale anchor layout for a 64px detector: the three smallest anchors
/// go to the fine (stride-8) grid, the rest to the coarse (stride-16) grid.
pub fn head_specs_from_boxes(dims: &[(f64, f64)], image_size: usize) -> [HeadSpec; 2] {
    let anchors = kmeans_anchors(dims, 2 * N_ANCHORS, 25);
    let fine: [(f64, f64); N_ANCHORS] = anchors[..N_ANCHORS].try_into().unwrap();
    let coarse: [(f64, f64); N_ANCHORS] = anchors[N_ANCHORS..].try_into().unwrap();
    [
        HeadSpec {
            grid: image_size / 8,
            anchors: fine,
        },
        HeadSpec {
            grid: image_size / 16,
            anchors: coarse,
        },
    ]
}

// ---------------------------------------------------------------- targets

/// A positive cell assignment. `row` indexes the (b, y, x, a)-major
/// flattening of a head's output used by `detection_loss`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosTarget {
    pub row: usize,
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTargets {
    pub n_rows: usize,
    pub pos: Vec<PosTarget>,
}

/// Assigns every box of every image to its best-matching anchor (by
/// centered IoU across both heads) at the cell containing the box center.
/// Later boxes that collide with an already-assigned cell/anchor are
/// dropped.
pub fn encode_targets(images: &[&SceneImage], specs: &[HeadSpec; 2]) -> [HeadTargets; 2] {
    let b_count = images.len();
    let mut out = [
        HeadTargets {
            n_rows: b_count * specs[0].grid * specs[0].grid * N_ANCHORS,
            pos: Vec::new(),
        },
        HeadTargets {
            n_rows: b_count * specs[1].grid * specs[1].grid * N_ANCHORS,
            pos: Vec::new(),
        },
    ];
    let mut taken: [HashSet<usize>; 2] = [HashSet::new(), HashSet::new()];
    for (b, img) in images.iter().enumerate() {
        for gt in &img.boxes {
            let (mut best, mut best_iou) = ((0usize, 0usize), -1.0f64);
            for (h, spec) in specs.iter().enumerate() {
                for (a, &anchor) in spec.anchors.iter().enumerate() {
                    let s = centered_iou((gt.w, gt.h), anchor);
                    if s > best_iou {
                        best_iou = s;
                        best = (h, a);
                    }
                }
            }
            let (h, a) = best;
            let g = specs[h].grid;
            let gx = ((gt.cx * g as f64).floor() as usize).min(g - 1);
            let gy = ((gt.cy * g as f64).floor() as usize).min(g - 1);
            let row = ((b * g + gy) * g + gx) * N_ANCHORS + a;
            if !taken[h].insert(row) {
                continue;
            }
            let anchor = specs[h].anchors[a];
            out[h].pos.push(PosTarget {
                row,
                tx: gt.cx * g as f64 - gx as f64,
                ty: gt.cy * g as f64 - gy as f64,
                tw: (gt.w / anchor.0).ln(),
                th: (gt.h / anchor.1).ln(),
                class: gt.class,
            });
        }
    }
    out
}

/// Inverse of target encoding for one cell: offsets and log-scales back to
/// a normalized box.
pub fn decode_cell(
    spec: &HeadSpec,
    gy: usize,
    gx: usize,
    anchor: usize,
    ox: f64,
    oy: f64,
    tw: f64,
    th: f64,
) -> (f64, f64, f64, f64) {
    let g = spec.grid as f64;
    let (aw, ah) = spec.anchors[anchor];
    (
        (gx as f64 + ox) / g,
        (gy as f64 + oy) / g,
        aw * tw.exp(),
        ah * th.exp(),
    )
}

// ---------------------------------------------------------------- model

/// Small two-scale detector: four conv blocks (stride 8 and 16 feature
/// maps), one 1x1 prediction head per scale. Per anchor the head emits
/// [tx, ty, tw, th, obj, class logits...].
pub struct Detector<F: Scalar = f32> {
    pub blocks: Vec<ConvBlock<F>>,
    pub heads: [Conv2d<F>; 2],
    pub specs: [HeadSpec; 2],
    pub n_classes: usize,
}

impl<F: Scalar> Detector<F> {
    pub fn new(n_classes: usize, specs: [HeadSpec; 2], rng: &mut ChaCha8Rng) -> Self {
        let blocks = vec![
            ConvBlock::new(3, 16, true, rng),
            ConvBlock::new(16, 32, true, rng),
            ConvBlock::new(32, 64, true, rng),
            ConvBlock::new(64, 64, true, rng),
        ];
        let out_ch = N_ANCHORS * (5 + n_classes);
        let heads = [
            Conv2d::new(64, out_ch, 1, 1, 0, true, rng),
            Conv2d::new(64, out_ch, 1, 1, 0, true, rng),
        ];
        Detector {
            blocks,
            heads,
            specs,
            n_classes,
        }
    }

    /// Stride-8 and stride-16 feature maps.
    pub fn features(&self, x: &Tensor<F>, mode: Mode) -> Result<(Tensor<F>, Tensor<F>), TensorError> {
        let mut h = x.clone();
        for b in &self.blocks[..3] {
            h = b.forward(&h, mode)?;
        }
        let f16 = self.blocks[3].forward(&h, mode)?;
        Ok((h, f16))
    }

    pub fn head_outputs(
        &self,
        f8: &Tensor<F>,
        f16: &Tensor<F>,
    ) -> Result<(Tensor<F>, Tensor<F>), TensorError> {
        Ok((self.heads[0].forward(f8)?, self.heads[1].forward(f16)?))
    }

    pub fn forward(&self, x: &Tensor<F>, mode: Mode) -> Result<(Tensor<F>, Tensor<F>), TensorError> {
        let (f8, f16) = self.features(x, mode)?;
        self.head_outputs(&f8, &f16)
    }

    pub fn head_params(&self) -> Vec<Tensor<F>> {
        let mut out = Vec::new();
        self.heads[0].collect_params(&mut out);
        self.heads[1].collect_params(&mut out);
        out
    }

    pub fn with_head_params(&self, params: &[Tensor<F>]) -> Detector<F> {
        let mut d = self.shallow_clone();
        let mut cur = ParamCursor::new(params);
        d.heads[0].load_params(&mut cur);
        d.heads[1].load_params(&mut cur);
        assert!(cur.exhausted(), "head parameter count mismatch");
        d
    }

    pub fn all_params(&self) -> Vec<Tensor<F>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            b.collect_params(&mut out);
        }
        self.heads[0].collect_params(&mut out);
        self.heads[1].collect_params(&mut out);
        out
    }

    pub fn with_all_params(&self, params: &[Tensor<F>]) -> Detector<F> {
        let mut d = self.shallow_clone();
        let mut cur = ParamCursor::new(params);
        for b in &mut d.blocks {
            b.load_params(&mut cur);
        }
        d.heads[0].load_params(&mut cur);
        d.heads[1].load_params(&mut cur);
        assert!(cur.exhausted(), "parameter count mismatch");
        d
    }

    /// Same modules, shared running statistics.
    fn shallow_clone(&self) -> Detector<F> {
        Detector {
            blocks: self.blocks.clone(),
            heads: self.heads.clone(),
            specs: self.specs,
            n_classes: self.n_classes,
        }
    }

    pub fn deep_clone(&self) -> Detector<F> {
        Detector {
            blocks: self.blocks.iter().map(|b| b.deep_clone()).collect(),
            heads: self.heads.clone(),
            specs: self.specs,
            n_classes: self.n_classes,
        }
    }

    /// Same frozen extractor, freshly initialized heads sized for
    /// `n_classes` outputs (the episodic way count).
    pub fn with_fresh_heads(&self, n_classes: usize, rng: &mut ChaCha8Rng) -> Detector<F> {
        let out_ch = N_ANCHORS * (5 + n_classes);
        Detector {
            blocks: self.blocks.clone(),
            heads: [
                Conv2d::new(64, out_ch, 1, 1, 0, true, rng),
                Conv2d::new(64, out_ch, 1, 1, 0, true, rng),
            ],
            specs: self.specs,
            n_classes,
        }
    }
}

// ---------------------------------------------------------------- loss

/// The four matched loss components plus their weighted total.
pub struct DetLossParts<F: Scalar> {
    pub bbox: Tensor<F>,
    pub obj: Tensor<F>,
    pub noobj: Tensor<F>,
    pub class: Tensor<F>,
    pub total: Tensor<F>,
}

impl<F: Scalar> DetLossParts<F> {
    /// [bbox, obj, noobj, class, total] as plain numbers.
    pub fn values(&self) -> [f64; 5] {
        [
            self.bbox.item().to_f64(),
            self.obj.item().to_f64(),
            self.noobj.item().to_f64(),
            self.class.item().to_f64(),
            self.total.item().to_f64(),
        ]
    }
}

/// Column slice of a matrix (differentiable).
fn take_cols<F: Scalar>(m: &Tensor<F>, cols: &[usize]) -> Result<Tensor<F>, TensorError> {
    Ok(m.transpose2().select_rows(cols)?.transpose2())
}

/// Head output [B, A*(5+C), G, G] as rows keyed (b, y, x, a) with the
/// per-anchor fields [tx, ty, tw, th, obj, classes...] as columns.
fn head_rows<F: Scalar>(out: &Tensor<F>, n_classes: usize) -> Result<Tensor<F>, TensorError> {
    let s = out.shape();
    let rows = s[0] * s[2] * s[3] * N_ANCHORS;
    out.from_nchw().reshape(&[rows, 5 + n_classes])
}

/// Four-component detection loss over both heads: coordinate MSE (sigmoid
/// offsets against cell offsets, raw log-scales against target log-scales),
/// objectness BCE at positive cells, down-weighted no-object BCE everywhere
/// else, and class cross-entropy at positive cells.
pub fn detection_loss<F: Scalar>(
    outputs: (&Tensor<F>, &Tensor<F>),
    targets: &[HeadTargets; 2],
    n_classes: usize,
) -> Result<DetLossParts<F>, TensorError> {
    let mut pos_parts: Vec<Tensor<F>> = Vec::new();
    let mut neg_parts: Vec<Tensor<F>> = Vec::new();
    let mut xy_t = Vec::new();
    let mut wh_t = Vec::new();
    let mut classes = Vec::new();
    for (out, tgt) in [outputs.0, outputs.1].into_iter().zip(targets) {
        let rows = head_rows(out, n_classes)?;
        let pos_rows: Vec<usize> = tgt.pos.iter().map(|p| p.row).collect();
        let pos_set: HashSet<usize> = pos_rows.iter().copied().collect();
        let neg_rows: Vec<usize> = (0..tgt.n_rows).filter(|r| !pos_set.contains(r)).collect();
        if !pos_rows.is_empty() {
            pos_parts.push(rows.select_rows(&pos_rows)?);
        }
        neg_parts.push(rows.select_rows(&neg_rows)?);
        for p in &tgt.pos {
            xy_t.push(F::from_f64(p.tx));
            xy_t.push(F::from_f64(p.ty));
            wh_t.push(F::from_f64(p.tw));
            wh_t.push(F::from_f64(p.th));
            classes.push(p.class);
        }
    }
    let neg_refs: Vec<&Tensor<F>> = neg_parts.iter().collect();
    let neg = Tensor::concat_rows(&neg_refs)?;
    let neg_obj = take_cols(&neg, &[4])?;
    let noobj = bce_with_logits(&neg_obj, &Tensor::zeros(neg_obj.shape()))?;

    let (bbox, obj, class) = if pos_parts.is_empty() {
        (
            Tensor::scalar(F::ZERO),
            Tensor::scalar(F::ZERO),
            Tensor::scalar(F::ZERO),
        )
    } else {
        let pos_refs: Vec<&Tensor<F>> = pos_parts.iter().collect();
        let pos = Tensor::concat_rows(&pos_refs)?;
        let n_pos = pos.shape()[0];
        let xy = take_cols(&pos, &[0, 1])?.sigmoid();
        let wh = take_cols(&pos, &[2, 3])?;
        let obj_logits = take_cols(&pos, &[4])?;
        let cls = take_cols(&pos, &(5..5 + n_classes).collect::<Vec<_>>())?;
        let xy_target = Tensor::from_vec(xy_t, &[n_pos, 2])?;
        let wh_target = Tensor::from_vec(wh_t, &[n_pos, 2])?;
        let bbox = mse(&xy, &xy_target)?.add(&mse(&wh, &wh_target)?)?.scale(0.5);
        let obj = bce_with_logits(&obj_logits, &Tensor::ones(obj_logits.shape()))?;
        let class = softmax_cross_entropy(&cls, &classes)?;
        (bbox, obj, class)
    };
    let total = bbox
        .scale(W_BBOX)
        .add(&obj.scale(W_OBJ))?
        .add(&noobj.scale(W_NOOBJ))?
        .add(&class.scale(W_CLASS))?;
    Ok(DetLossParts {
        bbox,
        obj,
        noobj,
        class,
        total,
    })
}

// ---------------------------------------------------------------- decode

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub conf: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Detection {
    pub fn as_box(&self) -> GtBox {
        GtBox {
            class: self.class,
            cx: self.cx,
            cy: self.cy,
            w: self.w,
            h: self.h,
        }
    }
}

fn sigmoid_f64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Raw detections for image `b` of a head-output batch: confidence is
/// sigmoid(obj) times the best class probability.
fn decode_head<F: Scalar>(
    out: &Tensor<F>,
    b: usize,
    spec: &HeadSpec,
    n_classes: usize,
    conf_thresh: f64,
) -> Vec<Detection> {
    let s = out.shape();
    let (ch, g) = (s[1], s[2]);
    let data = out.data();
    let at = |c: usize, y: usize, x: usize| data[((b * ch + c) * g + y) * g + x].to_f64();
    let mut dets = Vec::new();
    for a in 0..N_ANCHORS {
        let base = a * (5 + n_classes);
        for y in 0..g {
            for x in 0..g {
                let obj = sigmoid_f64(at(base + 4, y, x));
                let logits: Vec<f64> = (0..n_classes).map(|c| at(base + 5 + c, y, x)).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                let (class, p) = exps
                    .iter()
                    .enumerate()
                    .max_by(|(_, u), (_, v)| u.total_cmp(v))
                    .unwrap();
                let conf = obj * p / z;
                if conf < conf_thresh {
                    continue;
                }
                let (cx, cy, w, h) = decode_cell(
                    spec,
                    y,
                    x,
                    a,
                    sigmoid_f64(at(base, y, x)),
                    sigmoid_f64(at(base + 1, y, x)),
                    at(base + 2, y, x),
                    at(base + 3, y, x),
                );
                dets.push(Detection {
                    class,
                    conf,
                    cx,
                    cy,
                    w,
                    h,
                });
            }
        }
    }
    dets
}

/// Greedy per-class non-maximum suppression. Candidates are ranked by
/// confidence with a lexicographic box tie-break so the result never
/// depends on input order.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.conf
            .total_cmp(&a.conf)
            .then(a.cx.total_cmp(&b.cx))
            .then(a.cy.total_cmp(&b.cy))
            .then(a.w.total_cmp(&b.w))
            .then(a.h.total_cmp(&b.h))
            .then(a.class.cmp(&b.class))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && iou(&k.as_box(), &d.as_box()) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Decode image `b` from both head outputs, threshold at `conf_thresh`,
/// then apply per-class NMS at `iou_thresh`.
pub fn decode_and_nms<F: Scalar>(
    outputs: (&Tensor<F>, &Tensor<F>),
    b: usize,
    specs: &[HeadSpec; 2],
    n_classes: usize,
    conf_thresh: f64,
    iou_thresh: f64,
) -> Vec<Detection> {
    let mut dets = decode_head(outputs.0, b, &specs[0], n_classes, conf_thresh);
    dets.extend(decode_head(outputs.1, b, &specs[1], n_classes, conf_thresh));
    nms(dets, iou_thresh)
}

// ---------------------------------------------------------------- scoring

/// Greedy confidence-ordered matching: a detection is a true positive when
/// its best unmatched ground-truth box of the same class has IoU >=
/// `iou_thresh`. Returns (tp, fp, fn).
pub fn greedy_match(dets: &[Detection], gts: &[GtBox], iou_thresh: f64) -> (usize, usize, usize) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].conf.total_cmp(&dets[i].conf));
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for &i in &order {
        let d = &dets[i];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(gi, g)| !used[*gi] && g.class == d.class)
            .map(|(gi, g)| (gi, iou(&d.as_box(), g)))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((gi, ov)) = best {
            if ov >= iou_thresh {
                used[gi] = true;
                tp += 1;
            }
        }
    }
    (tp, dets.len() - tp, gts.len() - tp)
}

pub fn f1_score(tp: usize, fp: usize, fnm: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fnm) as f64;
    2.0 * p * r / (p + r)
}

/// Micro-averaged F1 of a detector over a scene set.
pub fn detector_f1<F: Scalar>(
    det: &Detector<F>,
    images: &[SceneImage],
    conf_thresh: f64,
    iou_thresh: f64,
) -> Result<f64, TensorError> {
    let _g = no_grad();
    let (mut tp, mut fp, mut fnm) = (0, 0, 0);
    for chunk in images.chunks(16) {
        let refs: Vec<&SceneImage> = chunk.iter().collect();
        let x = render_batch::<F>(&refs, image_side(det));
        let (o8, o16) = det.forward(&x, Mode::Eval)?;
        for (b, img) in chunk.iter().enumerate() {
            let dets = decode_and_nms((&o8, &o16), b, &det.specs, det.n_classes, conf_thresh, iou_thresh);
            let (t, f, n) = greedy_match(&dets, &img.boxes, iou_thresh);
            tp += t;
            fp += f;
            fnm += n;
        }
    }
    Ok(f1_score(tp, fp, fnm))
}

fn image_side<F: Scalar>(det: &Detector<F>) -> usize {
    det.specs[0].grid * 8
}

// ---------------------------------------------------------------- training

/// Conventional supervised detector training; returns per-epoch mean loss
/// components [bbox, obj, noobj, class, total].
pub fn train_detector<F: Scalar>(
    det: Detector<F>,
    images: &[SceneImage],
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<(Detector<F>, Vec<[f64; 5]>), DetectError> {
    let tree = SeedTree::new(seed).derive("det-train");
    let tape = Tape::<F>::new();
    let _scope = tape.scope();
    let mut params = det.all_params();
    let mut opt = Optimizer::adam(&params, lr);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut rng = tree.derive_indexed("order", epoch as u64).rng();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut sums = [0.0f64; 5];
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue; // batch statistics need at least two samples
            }
            let refs: Vec<&SceneImage> = chunk.iter().map(|&i| &images[i]).collect();
            let x = render_batch::<F>(&refs, image_side(&det));
            let targets = encode_targets(&refs, &det.specs);
            let mark = tape.checkpoint();
            let view = det.with_all_params(&params);
            let outputs = view.forward(&x, Mode::Train)?;
            let loss = detection_loss((&outputs.0, &outputs.1), &targets, det.n_classes)?;
            for (s, v) in sums.iter_mut().zip(loss.values()) {
                *s += v;
            }
            batches += 1;
            let grads = loss.total.backward(false)?;
            let g = collect(&params, &grads);
            params = opt.step(&params, &g);
            tape.rewind(mark);
        }
        for s in sums.iter_mut() {
            *s /= batches.max(1) as f64;
        }
        if !sums[4].is_finite() {
            return Err(DetectError::NonFinite { epoch });
        }
        history.push(sums);
    }
    Ok((det.with_all_params(&params).deep_clone(), history))
}

// ---------------------------------------------------------------- episodic

/// A few-shot detection task: per episode class, `k_support` single-class
/// scenes; `q_query` mixed scenes. Box classes are episode-local.
#[derive(Debug, Clone)]
pub struct DetEpisode {
    pub class_map: Vec<usize>,
    pub support: Vec<SceneImage>,
    pub query: Vec<SceneImage>,
}

pub fn sample_detection_episode(
    pool: &[usize],
    n_way: usize,
    k_support: usize,
    q_query: usize,
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
) -> Result<DetEpisode, DetectError> {
    if pool.len() < n_way {
        return Err(DetectError::TooFewClasses {
            need: n_way,
            have: pool.len(),
        });
    }
    let mut ids = pool.to_vec();
    for i in 0..n_way {
        let j = rng.random_range(i..ids.len());
        ids.swap(i, j);
    }
    ids.truncate(n_way);
    let relabel = |img: &mut SceneImage, map: &[usize]| {
        for b in &mut img.boxes {
            b.class = map.iter().position(|&c| c == b.class).expect("episode class");
        }
    };
    let mut support = Vec::with_capacity(n_way * k_support);
    for &class in &ids {
        for _ in 0..k_support {
            let mut img = render_scene(&[class], spec, rng);
            relabel(&mut img, &ids);
            support.push(img);
        }
    }
    let mut query = Vec::with_capacity(q_query);
    for _ in 0..q_query {
        let mut img = render_scene(&ids, spec, rng);
        relabel(&mut img, &ids);
        query.push(img);
    }
    Ok(DetEpisode {
        class_map: ids,
        support,
        query,
    })
}

/// Episodic detection-head adaptation settings. The extractor stays frozen;
/// only the 1x1 head parameters adapt and meta-learn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YoloMamlConfig {
    pub n_way: usize,
    pub k_support: usize,
    pub q_query: usize,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub first_order: bool,
    pub meta_batch: usize,
    pub meta_lr: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub scene: SceneSpec,
}

impl Default for YoloMamlConfig {
    fn default() -> Self {
        YoloMamlConfig {
            n_way: 3,
            k_support: 2,
            q_query: 2,
            inner_lr: 0.01,
            inner_steps: 2,
            first_order: false,
            meta_batch: 2,
            meta_lr: 1e-3,
            epochs: 500,
            episodes_per_epoch: 1,
            scene: SceneSpec::default(),
        }
    }
}

/// One telemetry row: mean query-loss components for the epoch.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TelemetryRow {
    pub epoch: usize,
    pub bbox_mse: f64,
    pub obj_bce: f64,
    pub noobj_bce: f64,
    pub class_ce: f64,
    pub total: f64,
}

pub fn telemetry_csv(rows: &[TelemetryRow]) -> String {
    let mut out = String::from("epoch,bbox_mse,obj_bce,noobj_bce,class_ce,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8}\n",
            r.epoch, r.bbox_mse, r.obj_bce, r.noobj_bce, r.class_ce, r.total
        ));
    }
    out
}

/// Frozen-extractor features for a scene batch (plain data, never tracked).
fn frozen_features<F: Scalar>(
    det: &Detector<F>,
    images: &[SceneImage],
) -> Result<(Tensor<F>, Tensor<F>), TensorError> {
    let _g = no_grad();
    let refs: Vec<&SceneImage> = images.iter().collect();
    let x = render_batch::<F>(&refs, image_side(det));
    det.features(&x, Mode::Eval)
}

/// Inner adaptation of the head parameters on cached support features.
/// Mirrors the classification adapt loop: the tape is never consumed, and
/// first-order mode detaches the update direction instead.
pub fn yolomaml_adapt<F: Scalar>(
    det: &Detector<F>,
    init: &[Tensor<F>],
    feats: (&Tensor<F>, &Tensor<F>),
    targets: &[HeadTargets; 2],
    inner_lr: f64,
    inner_steps: usize,
    track_init: bool,
) -> Result<Vec<Tensor<F>>, TensorError> {
    let mut fast: Vec<Tensor<F>> = init.to_vec();
    for _ in 0..inner_steps {
        let view = det.with_head_params(&fast);
        let outputs = view.head_outputs(feats.0, feats.1)?;
        let loss = detection_loss((&outputs.0, &outputs.1), targets, det.n_classes)?;
        let grads = loss.total.backward(true)?;
        fast = fast
            .iter()
            .map(|p| match grads.wrt(p) {
                Some(g) => {
                    let g = if track_init { g } else { g.detach() };
                    p.sub(&g.scale(inner_lr)).expect("gradient matches shape")
                }
                None => p.clone(),
            })
            .collect();
    }
    Ok(fast)
}

/// Meta-trains detection heads over the frozen extractor of `base`:
/// episodes adapt the heads on support scenes, the query loss updates the
/// head initialization. Aborts on the first non-finite epoch. Returns the
/// meta-trained detector (sized for `cfg.n_way` classes) and per-epoch
/// telemetry.
pub fn yolomaml_train<F: Scalar>(
    base: &Detector<F>,
    pool: &[usize],
    cfg: &YoloMamlConfig,
    seed: u64,
) -> Result<(Detector<F>, Vec<TelemetryRow>), DetectError> {
    let tree = SeedTree::new(seed).derive("yolomaml");
    let mut init_rng = tree.derive("head-init").rng();
    let meta = base.with_fresh_heads(cfg.n_way, &mut init_rng);
    let tape = Tape::<F>::new();
    let _scope = tape.scope();
    let mut params = meta.head_params();
    let mut opt = Optimizer::adam(&params, cfg.meta_lr);
    let mut telemetry = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let epoch_tree = tree.derive_indexed("epoch", epoch as u64);
        let mut sums = [0.0f64; 5];
        let mut counted = 0usize;
        let episodes: Vec<DetEpisode> = (0..cfg.episodes_per_epoch)
            .map(|i| {
                let mut rng = epoch_tree.derive_indexed("episode", i as u64).rng();
                sample_detection_episode(
                    pool,
                    cfg.n_way,
                    cfg.k_support,
                    cfg.q_query,
                    &cfg.scene,
                    &mut rng,
                )
            })
            .collect::<Result<_, _>>()?;
        for batch in episodes.chunks(cfg.meta_batch.max(1)) {
            let mark = tape.checkpoint();
            let mut grad_acc: Vec<Option<Tensor<F>>> = vec![None; params.len()];
            for ep in batch {
                let view = meta.with_head_params(&params);
                let s_feats = frozen_features(&view, &ep.support)?;
                let s_refs: Vec<&SceneImage> = ep.support.iter().collect();
                let s_targets = encode_targets(&s_refs, &view.specs);
                let fast = yolomaml_adapt(
                    &view,
                    &params,
                    (&s_feats.0, &s_feats.1),
                    &s_targets,
                    cfg.inner_lr,
                    cfg.inner_steps,
                    !cfg.first_order,
                )?;
                let q_feats = frozen_features(&view, &ep.query)?;
                let q_refs: Vec<&SceneImage> = ep.query.iter().collect();
                let q_targets = encode_targets(&q_refs, &view.specs);
                let adapted = view.with_head_params(&fast);
                let outputs = adapted.head_outputs(&q_feats.0, &q_feats.1)?;
                let loss = detection_loss((&outputs.0, &outputs.1), &q_targets, cfg.n_way)?;
                for (s, v) in sums.iter_mut().zip(loss.values()) {
                    *s += v;
                }
                counted += 1;
                let grads = loss
                    .total
                    .scale(1.0 / batch.len() as f64)
                    .backward(false)?;
                accumulate(&mut grad_acc, &collect(&params, &grads));
            }
            params = opt.step(&params, &grad_acc);
            tape.rewind(mark);
        }
        for s in sums.iter_mut() {
            *s /= counted.max(1) as f64;
        }
        let row = TelemetryRow {
            epoch,
            bbox_mse: sums[0],
            obj_bce: sums[1],
            noobj_bce: sums[2],
            class_ce: sums[3],
            total: sums[4],
        };
        if !row.total.is_finite() {
            return Err(DetectError::NonFinite { epoch });
        }
        telemetry.push(row);
    }
    Ok((meta.with_head_params(&params).deep_clone(), telemetry))
}

/// Adapts the meta-trained heads on an episode's support scenes and scores
/// micro-F1 on its query scenes.
pub fn yolomaml_episode_f1<F: Scalar>(
    meta: &Detector<F>,
    ep: &DetEpisode,
    inner_lr: f64,
    inner_steps: usize,
    conf_thresh: f64,
    iou_thresh: f64,
) -> Result<f64, DetectError> {
    let tape = Tape::<F>::new();
    let _scope = tape.scope();
    let init = meta.head_params();
    let s_feats = frozen_features(meta, &ep.support)?;
    let s_refs: Vec<&SceneImage> = ep.support.iter().collect();
    let s_targets = encode_targets(&s_refs, &meta.specs);
    let fast = yolomaml_adapt(
        meta,
        &init,
        (&s_feats.0, &s_feats.1),
        &s_targets,
        inner_lr,
        inner_steps,
        false,
    )?;
    let adapted = meta.with_head_params(&fast);
    let q_feats = frozen_features(&adapted, &ep.query)?;
    let outputs = {
        let _g = no_grad();
        adapted.head_outputs(&q_feats.0, &q_feats.1)?
    };
    let (mut tp, mut fp, mut fnm) = (0, 0, 0);
    for (b, img) in ep.query.iter().enumerate() {
        let dets = decode_and_nms(
            (&outputs.0, &outputs.1),
            b,
            &meta.specs,
            meta.n_classes,
            conf_thresh,
            iou_thresh,
        );
        let (t, f, n) = greedy_match(&dets, &img.boxes, iou_thresh);
        tp += t;
        fp += f;
        fnm += n;
    }
    Ok(f1_score(tp, fp, fnm))
}
