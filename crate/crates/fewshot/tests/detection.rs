use fewshot::detection::{
    decode_and_nms, decode_cell, detection_class_names, detector_f1, encode_targets, f1_score,
    greedy_match, iou, kmeans_anchors, make_training_scenes, n_detection_classes, nms,
    read_annotations, render_scene, sample_detection_episode, telemetry_csv, train_detector,
    write_annotations, yolomaml_episode_f1, yolomaml_train, DetectError, Detection, Detector,
    GtBox, HeadSpec, HeadTargets, PosTarget, SceneSpec, TelemetryRow, YoloMamlConfig, N_ANCHORS,
    W_BBOX, W_CLASS, W_NOOBJ, W_OBJ,
};
use fewshot::rng::SeedTree;
use fewshot::tensor::Tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_specs() -> [HeadSpec; 2] {
    [
        HeadSpec {
            grid: 8,
            anchors: [(0.18, 0.18), (0.22, 0.22), (0.26, 0.26)],
        },
        HeadSpec {
            grid: 4,
            anchors: [(0.32, 0.32), (0.38, 0.38), (0.44, 0.44)],
        },
    ]
}

fn rand_box(rng: &mut ChaCha8Rng) -> GtBox {
    let w = rng.random_range(0.1..0.5);
    let h = rng.random_range(0.1..0.5);
    GtBox {
        class: 0,
        cx: rng.random_range(w / 2.0..1.0 - w / 2.0),
        cy: rng.random_range(h / 2.0..1.0 - h / 2.0),
        w,
        h,
    }
}

/// Oracle: IoU by counting pixel centers on a fine grid.
fn raster_iou(a: &GtBox, b: &GtBox, res: usize) -> f64 {
    let inside = |bx: &GtBox, x: f64, y: f64| {
        (x - bx.cx).abs() <= bx.w / 2.0 && (y - bx.cy).abs() <= bx.h / 2.0
    };
    let (mut na, mut nb, mut ni) = (0u64, 0u64, 0u64);
    for yi in 0..res {
        for xi in 0..res {
            let x = (xi as f64 + 0.5) / res as f64;
            let y = (yi as f64 + 0.5) / res as f64;
            let ia = inside(a, x, y);
            let ib = inside(b, x, y);
            na += ia as u64;
            nb += ib as u64;
            ni += (ia && ib) as u64;
        }
    }
    let union = na + nb - ni;
    if union == 0 {
        0.0
    } else {
        ni as f64 / union as f64
    }
}

#[test]
fn iou_matches_pixel_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let a = rand_box(&mut rng);
        let b = rand_box(&mut rng);
        let oracle = raster_iou(&a, &b, 1000);
        assert!(
            (iou(&a, &b) - oracle).abs() <= 0.02,
            "analytic {} vs rasterized {}",
            iou(&a, &b),
            oracle
        );
    }
    let a = GtBox {
        class: 0,
        cx: 0.2,
        cy: 0.2,
        w: 0.1,
        h: 0.1,
    };
    let b = GtBox {
        class: 0,
        cx: 0.8,
        cy: 0.8,
        w: 0.1,
        h: 0.1,
    };
    assert_eq!(iou(&a, &b), 0.0);
    assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
}

#[test]
fn nms_keeps_the_best_of_each_overlapping_group() {
    let d = |class, conf, cx, cy| Detection {
        class,
        conf,
        cx,
        cy,
        w: 0.2,
        h: 0.2,
    };
    let a = d(0, 0.9, 0.30, 0.30);
    let b = d(0, 0.8, 0.31, 0.30); // overlaps a, same class: suppressed
    let c = d(0, 0.7, 0.70, 0.70); // far away: kept
    let e = d(1, 0.5, 0.30, 0.30); // overlaps a but another class: kept
    let kept = nms(vec![b, e, c, a], 0.5);
    assert_eq!(kept, vec![a, c, e]);
}

#[test]
fn nms_satisfies_suppression_postconditions_in_any_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Snapped coordinates and a small confidence alphabet force ties.
    let confs = [0.3, 0.5, 0.7];
    let dets: Vec<Detection> = (0..30)
        .map(|_| Detection {
            class: rng.random_range(0..3),
            conf: confs[rng.random_range(0..confs.len())],
            cx: rng.random_range(1..9) as f64 / 10.0,
            cy: rng.random_range(1..9) as f64 / 10.0,
            w: rng.random_range(1..4) as f64 / 10.0,
            h: rng.random_range(1..4) as f64 / 10.0,
        })
        .collect();
    let thresh = 0.5;
    let kept = nms(dets.clone(), thresh);
    // Kept boxes come from the input and never suppress each other.
    for k in &kept {
        assert!(dets.contains(k));
    }
    for (i, a) in kept.iter().enumerate() {
        for b in &kept[i + 1..] {
            assert!(a.class != b.class || iou(&a.as_box(), &b.as_box()) <= thresh);
        }
    }
    // Every dropped box is suppressed by a kept box that ranks above it.
    let rank = |d: &Detection| (-d.conf, d.cx, d.cy, d.w, d.h);
    for d in &dets {
        if kept.contains(d) {
            continue;
        }
        assert!(
            kept.iter().any(|k| k.class == d.class
                && iou(&k.as_box(), &d.as_box()) > thresh
                && rank(k) < rank(d)),
            "dropped {:?} has no suppressor",
            d
        );
    }
    // Input order is irrelevant.
    for s in 0..5 {
        let mut shuffled = dets.clone();
        let mut srng = ChaCha8Rng::seed_from_u64(s);
        for i in (1..shuffled.len()).rev() {
            let j = srng.random_range(0..=i);
            shuffled.swap(i, j);
        }
        assert_eq!(nms(shuffled, thresh), kept);
    }
}

#[test]
fn f1_of_half_correct_detector_is_two_thirds() {
    let gts = [
        GtBox {
            class: 0,
            cx: 0.3,
            cy: 0.3,
            w: 0.2,
            h: 0.2,
        },
        GtBox {
            class: 1,
            cx: 0.7,
            cy: 0.7,
            w: 0.2,
            h: 0.2,
        },
    ];
    // Finds the first object, misses the second entirely.
    let dets = [Detection {
        class: 0,
        conf: 0.9,
        cx: 0.3,
        cy: 0.3,
        w: 0.2,
        h: 0.2,
    }];
    let (tp, fp, fnm) = greedy_match(&dets, &gts, 0.5);
    assert_eq!((tp, fp, fnm), (1, 0, 1));
    assert!((f1_score(tp, fp, fnm) - 2.0 / 3.0).abs() < 1e-12);

    // Same location, wrong class: both a false positive and a miss.
    let wrong = [Detection {
        class: 1,
        ..dets[0]
    }];
    assert_eq!(greedy_match(&wrong, &gts[..1], 0.5), (0, 1, 1));
    assert_eq!(f1_score(0, 1, 1), 0.0);

    // Two detections on one object: the second one is surplus.
    let twice = [dets[0], Detection { conf: 0.8, ..dets[0] }];
    assert_eq!(greedy_match(&twice, &gts[..1], 0.5), (1, 1, 0));

    // A confident stray never steals the match from an accurate detection.
    let stray = Detection {
        conf: 0.95,
        cx: 0.45,
        ..dets[0]
    };
    assert!(iou(&stray.as_box(), &gts[0]) < 0.5);
    assert_eq!(greedy_match(&[stray, dets[0]], &gts[..1], 0.5), (1, 1, 0));
}

#[test]
fn target_encoding_round_trips_through_decode() {
    let specs = tiny_specs();
    let spec = SceneSpec {
        min_objects: 1,
        max_objects: 1,
        ..SceneSpec::default()
    };
    let tree = SeedTree::new(21).derive("roundtrip");
    let mut total = 0;
    for i in 0..20 {
        let mut rng = tree.derive_indexed("scene", i).rng();
        let img = render_scene(&[i as usize % n_detection_classes()], &spec, &mut rng);
        let targets = encode_targets(&[&img], &specs);
        for (h, tgt) in targets.iter().enumerate() {
            let g = specs[h].grid;
            for p in &tgt.pos {
                let a = p.row % N_ANCHORS;
                let cell = p.row / N_ANCHORS;
                let (gy, gx) = (cell / g, cell % g);
                let (cx, cy, w, hh) = decode_cell(&specs[h], gy, gx, a, p.tx, p.ty, p.tw, p.th);
                let gt = &img.boxes[0];
                assert!((cx - gt.cx).abs() < 1e-5, "cx {} vs {}", cx, gt.cx);
                assert!((cy - gt.cy).abs() < 1e-5);
                assert!((w - gt.w).abs() < 1e-5);
                assert!((hh - gt.h).abs() < 1e-5);
                assert_eq!(p.class, gt.class);
                total += 1;
            }
        }
    }
    assert_eq!(total, 20, "every single-object scene encodes one positive");
}

#[test]
fn encoding_picks_the_best_matching_scale_and_drops_collisions() {
    let specs = tiny_specs();
    let small = GtBox {
        class: 0,
        cx: 0.31,
        cy: 0.42,
        w: 0.2,
        h: 0.2,
    };
    let large = GtBox {
        class: 1,
        cx: 0.7,
        cy: 0.7,
        w: 0.42,
        h: 0.42,
    };
    let img = fewshot::detection::SceneImage {
        pixels: vec![0.0; 3 * 64 * 64],
        boxes: vec![small, large],
    };
    let targets = encode_targets(&[&img], &specs);
    assert_eq!(targets[0].pos.len(), 1, "small box on the fine head");
    assert_eq!(targets[1].pos.len(), 1, "large box on the coarse head");
    assert_eq!(targets[0].pos[0].row % N_ANCHORS, 1, "closest fine anchor");
    assert_eq!(targets[1].pos[0].row % N_ANCHORS, 2, "closest coarse anchor");

    // Same cell, same best anchor: the second box is dropped.
    let twin = GtBox { class: 2, ..small };
    let img2 = fewshot::detection::SceneImage {
        pixels: vec![0.0; 3 * 64 * 64],
        boxes: vec![small, twin],
    };
    let targets2 = encode_targets(&[&img2], &specs);
    assert_eq!(targets2[0].pos.len(), 1);
    assert_eq!(targets2[0].pos[0].class, 0);
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn bce(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln()
}

/// Oracle: recompute every loss component directly from the raw output
/// data, indexing rows and channels by hand.
#[test]
fn detection_loss_matches_scalar_recomputation() {
    let n_classes = 3;
    let ch = N_ANCHORS * (5 + n_classes);
    let (b, g0, g1) = (2usize, 4usize, 2usize);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut fill = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-2.0..2.0)).collect() };
    let o0 = Tensor::<f64>::from_vec(fill(b * ch * g0 * g0), &[b, ch, g0, g0]).unwrap();
    let o1 = Tensor::<f64>::from_vec(fill(b * ch * g1 * g1), &[b, ch, g1, g1]).unwrap();
    let targets = [
        HeadTargets {
            n_rows: b * g0 * g0 * N_ANCHORS,
            pos: vec![
                PosTarget {
                    row: 5,
                    tx: 0.3,
                    ty: 0.8,
                    tw: -0.2,
                    th: 0.4,
                    class: 2,
                },
                PosTarget {
                    row: 17,
                    tx: 0.5,
                    ty: 0.5,
                    tw: 0.0,
                    th: 0.0,
                    class: 0,
                },
                PosTarget {
                    row: 60,
                    tx: 0.9,
                    ty: 0.1,
                    tw: 0.3,
                    th: -0.3,
                    class: 1,
                },
            ],
        },
        HeadTargets {
            n_rows: b * g1 * g1 * N_ANCHORS,
            pos: vec![PosTarget {
                row: 13,
                tx: 0.2,
                ty: 0.6,
                tw: 0.1,
                th: 0.1,
                class: 1,
            }],
        },
    ];
    let parts = fewshot::detection::detection_loss((&o0, &o1), &targets, n_classes).unwrap();
    let got = parts.values();

    // Field f of anchor a in cell (y, x) of image bi, for a given head.
    let field = |out: &Tensor<f64>, g: usize, row: usize, f: usize| {
        let a = row % N_ANCHORS;
        let cell = row / N_ANCHORS;
        let (bi, yx) = (cell / (g * g), cell % (g * g));
        let (y, x) = (yx / g, yx % g);
        let c = a * (5 + n_classes) + f;
        out.data()[((bi * ch + c) * g + y) * g + x]
    };
    let heads: [(&Tensor<f64>, usize); 2] = [(&o0, g0), (&o1, g1)];
    let (mut xy_se, mut wh_se, mut obj_sum, mut cls_sum, mut n_pos) = (0.0, 0.0, 0.0, 0.0, 0);
    let (mut noobj_sum, mut n_neg) = (0.0, 0);
    for ((out, g), tgt) in heads.iter().zip(&targets) {
        let pos_rows: Vec<usize> = tgt.pos.iter().map(|p| p.row).collect();
        for p in &tgt.pos {
            xy_se += (sigmoid(field(out, *g, p.row, 0)) - p.tx).powi(2);
            xy_se += (sigmoid(field(out, *g, p.row, 1)) - p.ty).powi(2);
            wh_se += (field(out, *g, p.row, 2) - p.tw).powi(2);
            wh_se += (field(out, *g, p.row, 3) - p.th).powi(2);
            obj_sum += bce(field(out, *g, p.row, 4), 1.0);
            let logits: Vec<f64> = (0..n_classes).map(|c| field(out, *g, p.row, 5 + c)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            cls_sum += lse - logits[p.class];
            n_pos += 1;
        }
        for row in 0..tgt.n_rows {
            if !pos_rows.contains(&row) {
                noobj_sum += bce(field(out, *g, row, 4), 0.0);
                n_neg += 1;
            }
        }
    }
    let bbox = 0.5 * (xy_se / (2 * n_pos) as f64 + wh_se / (2 * n_pos) as f64);
    let obj = obj_sum / n_pos as f64;
    let noobj = noobj_sum / n_neg as f64;
    let class = cls_sum / n_pos as f64;
    let total = W_BBOX * bbox + W_OBJ * obj + W_NOOBJ * noobj + W_CLASS * class;
    for (name, (g, e)) in ["bbox", "obj", "noobj", "class", "total"]
        .iter()
        .zip(got.iter().zip([bbox, obj, noobj, class, total]))
    {
        assert!((g - e).abs() < 1e-5, "{name}: {g} vs {e}");
    }

    // No positives anywhere: only the weighted no-object term remains.
    let empty = [
        HeadTargets {
            n_rows: targets[0].n_rows,
            pos: vec![],
        },
        HeadTargets {
            n_rows: targets[1].n_rows,
            pos: vec![],
        },
    ];
    let p0 = fewshot::detection::detection_loss((&o0, &o1), &empty, n_classes).unwrap();
    let v = p0.values();
    assert_eq!(v[0], 0.0);
    assert_eq!(v[1], 0.0);
    assert_eq!(v[3], 0.0);
    assert!(v[4].is_finite() && (v[4] - W_NOOBJ * v[2]).abs() < 1e-12);
}

#[test]
fn annotations_round_trip_and_report_bad_lines() {
    let boxes = vec![
        GtBox {
            class: 3,
            cx: 0.25,
            cy: 0.5,
            w: 0.125,
            h: 0.3,
        },
        GtBox {
            class: 0,
            cx: 0.9,
            cy: 0.1,
            w: 0.2,
            h: 0.2,
        },
    ];
    let text = write_annotations(&boxes);
    let back = read_annotations(&text).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in boxes.iter().zip(&back) {
        assert_eq!(a.class, b.class);
        assert!((a.cx - b.cx).abs() < 1e-6 && (a.h - b.h).abs() < 1e-6);
    }
    assert!(read_annotations("").unwrap().is_empty());

    let err = read_annotations("0 0.5 0.5 0.2 0.2\n1 0.5 0.5 0.2\n").unwrap_err();
    match err {
        DetectError::BadAnnotation { line, .. } => assert_eq!(line, 2),
        other => panic!("unexpected error {other:?}"),
    }
    assert!(matches!(
        read_annotations("x 0.5 0.5 0.2 0.2\n"),
        Err(DetectError::BadAnnotation { line: 1, .. })
    ));
}

#[test]
fn scenes_are_deterministic_with_exact_boxes() {
    let spec = SceneSpec {
        min_objects: 1,
        max_objects: 1,
        ..SceneSpec::default()
    };
    let classes: Vec<usize> = (0..n_detection_classes()).collect();
    let tree = SeedTree::new(9).derive("scene-test");
    let mut a = tree.derive("img").rng();
    let mut b = tree.derive("img").rng();
    let img_a = render_scene(&classes, &spec, &mut a);
    let img_b = render_scene(&classes, &spec, &mut b);
    assert_eq!(img_a.pixels, img_b.pixels);
    assert_eq!(img_a.boxes, img_b.boxes);
    let mut c = tree.derive("other").rng();
    assert_ne!(render_scene(&classes, &spec, &mut c).pixels, img_a.pixels);

    let s = spec.image_size;
    for i in 0..20u64 {
        let mut rng = tree.derive_indexed("exact", i).rng();
        let img = render_scene(&classes, &spec, &mut rng);
        let gt = img.boxes[0];
        // Colored pixel centers all lie inside the ground-truth box, and
        // their tight bounding box fills it to within two pixels per side.
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        let mut any = false;
        for y in 0..s {
            for x in 0..s {
                let lit = (0..3).any(|ch| img.pixels[(ch * s + y) * s + x] > 0.0);
                if !lit {
                    continue;
                }
                any = true;
                let (px, py) = ((x as f64 + 0.5) / s as f64, (y as f64 + 0.5) / s as f64);
                assert!((px - gt.cx).abs() <= gt.w / 2.0 + 1e-9);
                assert!((py - gt.cy).abs() <= gt.h / 2.0 + 1e-9);
                x0 = x0.min(px);
                y0 = y0.min(py);
                x1 = x1.max(px);
                y1 = y1.max(py);
            }
        }
        assert!(any, "object never rendered");
        let tol = 2.0 / s as f64;
        assert!(x0 - (gt.cx - gt.w / 2.0) <= tol && (gt.cx + gt.w / 2.0) - x1 <= tol);
        assert!(y0 - (gt.cy - gt.h / 2.0) <= tol && (gt.cy + gt.h / 2.0) - y1 <= tol);
    }
}

#[test]
fn rendered_color_identifies_the_class() {
    let colors = [
        [0.95, 0.20, 0.20],
        [0.20, 0.90, 0.25],
        [0.25, 0.35, 0.95],
        [0.92, 0.88, 0.20],
    ];
    let spec = SceneSpec {
        min_objects: 1,
        max_objects: 1,
        ..SceneSpec::default()
    };
    let tree = SeedTree::new(33).derive("colors");
    let s = spec.image_size;
    for class in 0..n_detection_classes() {
        let mut rng = tree.derive_indexed("class", class as u64).rng();
        let img = render_scene(&[class], &spec, &mut rng);
        // Cosine similarity of a lit pixel against each palette entry.
        let y = ((img.boxes[0].cy * s as f64) as usize).min(s - 1);
        let x = ((img.boxes[0].cx * s as f64) as usize).min(s - 1);
        let px: Vec<f64> = (0..3).map(|ch| img.pixels[(ch * s + y) * s + x] as f64).collect();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let best = colors
            .iter()
            .enumerate()
            .max_by(|(_, u), (_, v)| {
                let cu = px.iter().zip(*u).map(|(a, b)| a * b).sum::<f64>() / norm(*u);
                let cv = px.iter().zip(*v).map(|(a, b)| a * b).sum::<f64>() / norm(*v);
                cu.total_cmp(&cv)
            })
            .unwrap()
            .0;
        assert_eq!(best, class % 4, "class {class} center pixel {px:?}");
        assert!(norm(&px) > 0.1, "center of the object is lit");
    }
    assert_eq!(detection_class_names().len(), 12);
    assert_eq!(detection_class_names()[0], "red_circle");
    assert_eq!(detection_class_names()[7], "yellow_square");
}

#[test]
fn kmeans_recovers_separated_clusters_deterministically() {
    let mut dims = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &c in &[0.1f64, 0.3, 0.5] {
        for _ in 0..40 {
            dims.push((
                c + rng.random_range(-0.01..0.01),
                c + rng.random_range(-0.01..0.01),
            ));
        }
    }
    let anchors = kmeans_anchors(&dims, 3, 25);
    assert_eq!(anchors, kmeans_anchors(&dims, 3, 25));
    for (a, &c) in anchors.iter().zip(&[0.1, 0.3, 0.5]) {
        assert!((a.0 - c).abs() < 0.02 && (a.1 - c).abs() < 0.02, "{anchors:?}");
    }
    let areas: Vec<f64> = anchors.iter().map(|a| a.0 * a.1).collect();
    assert!(areas.windows(2).all(|w| w[0] <= w[1]), "sorted by area");
}

#[test]
fn training_scenes_use_local_labels() {
    let imgs = make_training_scenes(&[3, 7, 10], 12, &SceneSpec::default(), 4);
    assert_eq!(imgs.len(), 12);
    assert!(imgs.iter().all(|im| !im.boxes.is_empty()));
    for im in &imgs {
        for b in &im.boxes {
            assert!(b.class < 3);
        }
    }
    let again = make_training_scenes(&[3, 7, 10], 12, &SceneSpec::default(), 4);
    assert_eq!(imgs[5].pixels, again[5].pixels);
}

#[test]
fn detection_episodes_have_single_class_support_and_local_labels() {
    let pool: Vec<usize> = vec![2, 5, 6, 9, 11];
    let mut rng = SeedTree::new(8).derive("ep").rng();
    let ep = sample_detection_episode(&pool, 3, 2, 4, &SceneSpec::default(), &mut rng).unwrap();
    assert_eq!(ep.class_map.len(), 3);
    assert!(ep.class_map.iter().all(|c| pool.contains(c)));
    assert_eq!(ep.support.len(), 6);
    assert_eq!(ep.query.len(), 4);
    for (i, img) in ep.support.iter().enumerate() {
        let want = i / 2; // k_support scenes per class, in class order
        assert!(img.boxes.iter().all(|b| b.class == want));
    }
    for img in &ep.query {
        assert!(img.boxes.iter().all(|b| b.class < 3));
    }
    assert!(matches!(
        sample_detection_episode(&pool, 6, 1, 1, &SceneSpec::default(), &mut rng),
        Err(DetectError::TooFewClasses { need: 6, have: 5 })
    ));
}

#[test]
fn untrained_detector_decodes_to_finite_boxes() {
    let specs = tiny_specs();
    let mut rng = SeedTree::new(14).derive("weights").rng();
    let det: Detector<f32> = Detector::new(4, specs, &mut rng);
    let imgs = make_training_scenes(&[0, 1, 2, 3], 3, &SceneSpec::default(), 6);
    let refs: Vec<&_> = imgs.iter().collect();
    let x = fewshot::detection::render_batch::<f32>(&refs, 64);
    let (o8, o16) = det.forward(&x, fewshot::nn::Mode::Eval).unwrap();
    assert_eq!(o8.shape(), &[3, N_ANCHORS * 9, 8, 8]);
    assert_eq!(o16.shape(), &[3, N_ANCHORS * 9, 4, 4]);
    for b in 0..3 {
        for d in decode_and_nms((&o8, &o16), b, &specs, 4, 0.0, 0.5) {
            assert!(d.conf.is_finite() && (0.0..=1.0).contains(&d.conf));
            assert!(d.w > 0.0 && d.h > 0.0 && d.cx.is_finite() && d.cy.is_finite());
        }
    }
    let f1 = detector_f1(&det, &imgs, 0.25, 0.5).unwrap();
    assert!((0.0..=1.0).contains(&f1));
}

#[test]
fn detector_training_runs_and_stays_finite() {
    let specs = tiny_specs();
    let mut rng = SeedTree::new(1).derive("weights").rng();
    let det: Detector<f32> = Detector::new(3, specs, &mut rng);
    let before = det.head_params()[0].data().to_vec();
    let imgs = make_training_scenes(&[0, 1, 2], 8, &SceneSpec::default(), 2);
    let (trained, history) = train_detector(det, &imgs, 2, 4, 1e-3, 7).unwrap();
    assert_eq!(history.len(), 2);
    for row in &history {
        assert!(row.iter().all(|v| v.is_finite()));
        let total = W_BBOX * row[0] + W_OBJ * row[1] + W_NOOBJ * row[2] + W_CLASS * row[3];
        assert!((total - row[4]).abs() < 1e-5, "total is the weighted sum");
    }
    assert_ne!(trained.head_params()[0].data().to_vec(), before);
}

#[test]
fn episodic_head_training_is_deterministic_with_finite_telemetry() {
    let specs = tiny_specs();
    let mut rng = SeedTree::new(17).derive("weights").rng();
    let base: Detector<f32> = Detector::new(n_detection_classes(), specs, &mut rng);
    let cfg = YoloMamlConfig {
        n_way: 2,
        k_support: 1,
        q_query: 1,
        inner_steps: 1,
        meta_batch: 1,
        epochs: 2,
        episodes_per_epoch: 1,
        ..YoloMamlConfig::default()
    };
    let pool: Vec<usize> = (0..6).collect();
    let (meta_a, tel_a) = yolomaml_train(&base, &pool, &cfg, 20).unwrap();
    let (meta_b, tel_b) = yolomaml_train(&base, &pool, &cfg, 20).unwrap();
    assert_eq!(tel_a, tel_b);
    assert_eq!(
        meta_a.head_params()[0].data().to_vec(),
        meta_b.head_params()[0].data().to_vec()
    );
    assert_eq!(tel_a.len(), 2);
    assert_eq!(tel_a[0].epoch, 0);
    assert!(tel_a.iter().all(|r| r.total.is_finite()
        && (r.total
            - (W_BBOX * r.bbox_mse
                + W_OBJ * r.obj_bce
                + W_NOOBJ * r.noobj_bce
                + W_CLASS * r.class_ce))
            .abs()
            < 1e-5));

    let mut erng = SeedTree::new(20).derive("eval-ep").rng();
    let ep = sample_detection_episode(&pool, 2, 1, 2, &cfg.scene, &mut erng).unwrap();
    let f1 = yolomaml_episode_f1(&meta_a, &ep, cfg.inner_lr, 1, 0.25, 0.5).unwrap();
    assert!((0.0..=1.0).contains(&f1));
}

#[test]
fn telemetry_csv_has_header_and_one_row_per_epoch() {
    let rows = vec![
        TelemetryRow {
            epoch: 0,
            bbox_mse: 0.5,
            obj_bce: 0.25,
            noobj_bce: 0.125,
            class_ce: 1.0,
            total: 0.5 + 0.25 + 0.5 * 0.125 + 1.0,
        },
        TelemetryRow {
            epoch: 1,
            bbox_mse: 0.4,
            obj_bce: 0.2,
            noobj_bce: 0.1,
            class_ce: 0.9,
            total: 1.55,
        },
    ];
    let csv = telemetry_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "epoch,bbox_mse,obj_bce,noobj_bce,class_ce,total");
    assert!(lines[1].starts_with("0,0.50000000,0.25000000,"));
    assert!(lines[2].starts_with("1,"));
}
