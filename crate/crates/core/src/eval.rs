//! Detection metrics: rotated-box IoU, greedy NMS and AP@40.
//!
//! BEV IoU intersects the two footprints exactly (Sutherland–Hodgman
//! clipping plus the shoelace formula); 3-d IoU multiplies the footprint
//! intersection by the vertical overlap. AP@40 interpolates precision at
//! the 40 recall levels 1/40 … 40/40, taking at each level the maximum
//! precision among operating points whose recall reaches it.

use crate::synthdata::OrientedBox;
use crate::Tensor64;

/// One scored box prediction.
#[derive(Clone, Debug)]
pub struct Detection {
    pub score: f64,
    pub bbox: OrientedBox,
}

/// Plain mean squared error between two equally shaped grids, computed
/// outside any gradient tape (for reporting feature gaps).
pub fn mse_value(a: &Tensor64, b: &Tensor64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "mse_value: shape mismatch");
    let n = a.len().max(1);
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64
}

/// Signed area via the shoelace formula (positive for counter-clockwise).
fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..poly.len() {
        let [x1, y1] = poly[i];
        let [x2, y2] = poly[(i + 1) % poly.len()];
        s += x1 * y2 - x2 * y1;
    }
    s / 2.0
}

/// Clips a polygon by one half-plane (left of the directed edge a→b).
fn clip_edge(poly: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let cur = poly[i];
        let next = poly[(i + 1) % poly.len()];
        let (sc, sn) = (side(cur), side(next));
        if sc >= 0.0 {
            out.push(cur);
        }
        if (sc > 0.0 && sn < 0.0) || (sc < 0.0 && sn > 0.0) {
            let t = sc / (sc - sn);
            out.push([
                cur[0] + t * (next[0] - cur[0]),
                cur[1] + t * (next[1] - cur[1]),
            ]);
        }
    }
    out
}

/// Area of the intersection of two convex counter-clockwise polygons.
fn convex_intersection_area(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> f64 {
    let mut poly = subject.to_vec();
    for i in 0..clip.len() {
        if poly.len() < 3 {
            return 0.0;
        }
        poly = clip_edge(&poly, clip[i], clip[(i + 1) % clip.len()]);
    }
    polygon_area(&poly).abs()
}

/// IoU of two box footprints in the BEV plane.
pub fn iou_bev(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = convex_intersection_area(&a.corners_bev(), &b.corners_bev());
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// 3-d IoU: footprint intersection times vertical overlap, over the union
/// volume.
pub fn iou_3d(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter_bev = convex_intersection_area(&a.corners_bev(), &b.corners_bev());
    let (alo, ahi) = a.z_interval();
    let (blo, bhi) = b.z_interval();
    let dz = (ahi.min(bhi) - alo.max(blo)).max(0.0);
    let inter = inter_bev * dz;
    let union = a.bev_area() * a.h + b.bev_area() * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy score-descending NMS on BEV IoU. Ties in score keep the earlier
/// detection first, so the result is deterministic.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        if kept
            .iter()
            .all(|k| iou_bev(&k.bbox, &dets[i].bbox) <= iou_thresh)
        {
            kept.push(dets[i].clone());
        }
    }
    kept
}

/// Which IoU a matching step uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IouKind {
    Bev,
    ThreeD,
}

fn iou_of(kind: IouKind, a: &OrientedBox, b: &OrientedBox) -> f64 {
    match kind {
        IouKind::Bev => iou_bev(a, b),
        IouKind::ThreeD => iou_3d(a, b),
    }
}

/// AP@40 over a set of scenes. Predictions are pooled and sorted by score
/// (ties by scene then insertion order); each greedily matches the
/// highest-IoU unmatched ground-truth box of its own scene at `thresh` or
/// better. Returns `None` when there are no ground-truth boxes.
pub fn ap_40(
    preds: &[Vec<Detection>],
    gts: &[Vec<OrientedBox>],
    thresh: f64,
    kind: IouKind,
) -> Option<f64> {
    assert_eq!(preds.len(), gts.len(), "scene count mismatch");
    let n_gt: usize = gts.iter().map(|g| g.len()).sum();
    if n_gt == 0 {
        return None;
    }

    let mut flat: Vec<(usize, usize)> = Vec::new();
    for (si, scene_preds) in preds.iter().enumerate() {
        for pi in 0..scene_preds.len() {
            flat.push((si, pi));
        }
    }
    flat.sort_by(|&(si, pi), &(sj, pj)| {
        preds[sj][pj]
            .score
            .total_cmp(&preds[si][pi].score)
            .then(si.cmp(&sj))
            .then(pi.cmp(&pj))
    });

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(flat.len());
    for &(si, pi) in &flat {
        let pred = &preds[si][pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts[si].iter().enumerate() {
            if matched[si][gi] {
                continue;
            }
            let iou = iou_of(kind, &pred.bbox, gt);
            if iou >= thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[si][gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }

    let mut ap = 0.0;
    for level in 1..=40 {
        let r = level as f64 / 40.0;
        let p = recall
            .iter()
            .zip(precision.iter())
            .filter(|(rec, _)| **rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0f64, f64::max);
        ap += p;
    }
    Some(ap / 40.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bx(x: f64, y: f64, w: f64, l: f64, yaw: f64) -> OrientedBox {
        OrientedBox {
            x,
            y,
            z: 0.5,
            w,
            l,
            h: 1.0,
            yaw,
        }
    }

    #[test]
    fn identical_boxes_have_unit_iou() {
        let a = bx(3.0, -1.0, 2.0, 4.0, 0.7);
        assert!((iou_bev(&a, &a) - 1.0).abs() < 1e-12);
        assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn plain_mse_matches_the_tape_op() {
        use crate::{ops, tape::GradTape, tensor::Tensor};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::from_vec(
            &[3, 4],
            (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let b = Tensor::from_vec(
            &[3, 4],
            (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let mut tape = GradTape::new();
        let on_tape = ops::mse(&mut tape, &a, &b).unwrap().item();
        assert!((mse_value(&a, &b) - on_tape).abs() <= 1e-12);
        assert_eq!(mse_value(&a, &a), 0.0);
    }

    #[test]
    fn disjoint_boxes_have_zero_iou() {
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = bx(10.0, 0.0, 1.0, 1.0, 1.2);
        assert_eq!(iou_bev(&a, &b), 0.0);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn unit_squares_rotated_45_degrees() {
        // Intersection is a regular octagon of area 2(√2−1); the IoU
        // simplifies to 1/√2.
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = bx(0.0, 0.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4);
        let expect = 1.0 / 2.0f64.sqrt();
        assert!((iou_bev(&a, &b) - expect).abs() < 1e-12);
    }

    #[test]
    fn vertical_offset_shrinks_3d_iou() {
        // Same unit footprint, unit height, half-overlapping in z:
        // inter = 0.5, union = 1.5.
        let mut a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let mut b = a;
        a.z = 0.5;
        b.z = 1.0;
        assert!((iou_bev(&a, &b) - 1.0).abs() < 1e-12);
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    fn mc_iou_bev(a: &OrientedBox, b: &OrientedBox, n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corners: Vec<[f64; 2]> = a
            .corners_bev()
            .iter()
            .chain(b.corners_bev().iter())
            .copied()
            .collect();
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for [x, y] in corners {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let inside = |b: &OrientedBox, p: [f64; 2]| {
            let (c, s) = (b.yaw.cos(), b.yaw.sin());
            let dx = p[0] - b.x;
            let dy = p[1] - b.y;
            let lx = c * dx + s * dy;
            let ly = -s * dx + c * dy;
            lx.abs() <= b.l / 2.0 && ly.abs() <= b.w / 2.0
        };
        let (mut both, mut either) = (0usize, 0usize);
        for _ in 0..n {
            let p = [rng.gen_range(x0..x1), rng.gen_range(y0..y1)];
            let (ia, ib) = (inside(a, p), inside(b, p));
            if ia && ib {
                both += 1;
            }
            if ia || ib {
                either += 1;
            }
        }
        if either == 0 {
            0.0
        } else {
            both as f64 / either as f64
        }
    }

    #[test]
    fn iou_matches_monte_carlo_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for case in 0..12 {
            let a = bx(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(1.0..3.0),
                rng.gen_range(1.0..4.0),
                rng.gen_range(-3.0..3.0),
            );
            let b = bx(
                a.x + rng.gen_range(-1.5..1.5),
                a.y + rng.gen_range(-1.5..1.5),
                rng.gen_range(1.0..3.0),
                rng.gen_range(1.0..4.0),
                rng.gen_range(-3.0..3.0),
            );
            let exact = iou_bev(&a, &b);
            let mc = mc_iou_bev(&a, &b, 2_000_000, 1000 + case);
            assert!(
                (exact - mc).abs() <= 2e-3,
                "case {case}: exact {exact} vs mc {mc}"
            );
        }
    }

    #[test]
    fn iou_is_symmetric_and_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a = bx(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let b = bx(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(-3.0..3.0),
            );
            assert!((iou_bev(&a, &b) - iou_bev(&b, &a)).abs() <= 1e-12);

            // Apply one rigid transform to both boxes.
            let (dx, dy, rot): (f64, f64, f64) = (
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-3.0..3.0),
            );
            let shift = |v: &OrientedBox| {
                let (c, s) = (rot.cos(), rot.sin());
                OrientedBox {
                    x: c * v.x - s * v.y + dx,
                    y: s * v.x + c * v.y + dy,
                    yaw: v.yaw + rot,
                    ..*v
                }
            };
            let before = iou_bev(&a, &b);
            let after = iou_bev(&shift(&a), &shift(&b));
            assert!((before - after).abs() <= 1e-9, "{before} vs {after}");
        }
    }

    /// Containment: a small box fully inside a big one.
    #[test]
    fn nested_boxes_iou_is_area_ratio() {
        let big = bx(0.0, 0.0, 4.0, 4.0, 0.3);
        let small = bx(0.0, 0.0, 1.0, 1.0, 1.1);
        assert!((iou_bev(&big, &small) - 1.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn nms_matches_brute_force_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for round in 0..20 {
            let dets: Vec<Detection> = (0..15)
                .map(|_| Detection {
                    score: rng.gen_range(0.0..1.0),
                    bbox: bx(
                        rng.gen_range(-4.0..4.0),
                        rng.gen_range(-4.0..4.0),
                        rng.gen_range(0.5..2.5),
                        rng.gen_range(0.5..2.5),
                        rng.gen_range(-3.0..3.0),
                    ),
                })
                .collect();
            let thresh = 0.3;
            let fast = nms(&dets, thresh);

            // Independent reference: precompute the full IoU matrix, then
            // walk score order marking suppressions.
            let n = dets.len();
            let mut iou = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    iou[i][j] = iou_bev(&dets[i].bbox, &dets[j].bbox);
                }
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
            let mut suppressed = vec![false; n];
            let mut keep = Vec::new();
            for &i in &order {
                if suppressed[i] {
                    continue;
                }
                keep.push(i);
                for &j in &order {
                    if j != i && iou[i][j] > thresh {
                        suppressed[j] = true;
                    }
                }
            }
            assert_eq!(fast.len(), keep.len(), "round {round}");
            for (f, &k) in fast.iter().zip(keep.iter()) {
                assert_eq!(f.score, dets[k].score);
            }
        }
    }

    #[test]
    fn ap40_hand_case() {
        // One scene, two ground-truth boxes, three predictions: TP(0.9),
        // FP(0.8), TP(0.7). Precision 1 holds through recall 0.5, then
        // 2/3 up to recall 1: AP = (20·1 + 20·(2/3))/40 = 5/6.
        let gt1 = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        let gt2 = bx(10.0, 0.0, 2.0, 2.0, 0.0);
        let far = bx(20.0, 0.0, 2.0, 2.0, 0.0);
        let preds = vec![vec![
            Detection { score: 0.9, bbox: gt1 },
            Detection { score: 0.8, bbox: far },
            Detection { score: 0.7, bbox: gt2 },
        ]];
        let gts = vec![vec![gt1, gt2]];
        let ap = ap_40(&preds, &gts, 0.5, IouKind::Bev).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "ap {ap}");
    }

    #[test]
    fn ap40_perfect_and_empty_cases() {
        let g = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        let preds = vec![vec![Detection { score: 0.9, bbox: g }]];
        let ap = ap_40(&preds, &[vec![g]], 0.5, IouKind::ThreeD).unwrap();
        assert!((ap - 1.0).abs() < 1e-12);
        // No ground truth: undefined.
        assert!(ap_40(&preds, &[vec![]], 0.5, IouKind::Bev).is_none());
        // No predictions but GT present: zero.
        let ap0 = ap_40(&[vec![]], &[vec![g]], 0.5, IouKind::Bev).unwrap();
        assert_eq!(ap0, 0.0);
    }

    #[test]
    fn ap40_matches_exhaustive_pr_oracle() {
        // Randomised scenes, oracle recomputes the PR curve from scratch
        // with an independent (quadratic) matcher.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for round in 0..10 {
            let n_scenes = 3;
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for _ in 0..n_scenes {
                let n_gt = rng.gen_range(0..4);
                let scene_gts: Vec<OrientedBox> = (0..n_gt)
                    .map(|i| bx(i as f64 * 6.0, 0.0, 2.0, 2.0, 0.0))
                    .collect();
                let n_pred = rng.gen_range(0..6);
                let scene_preds: Vec<Detection> = (0..n_pred)
                    .map(|_| {
                        let hit = rng.gen_bool(0.6) && !scene_gts.is_empty();
                        let bbox = if hit {
                            let g = scene_gts[rng.gen_range(0..scene_gts.len())];
                            bx(
                                g.x + rng.gen_range(-0.3..0.3),
                                g.y + rng.gen_range(-0.3..0.3),
                                2.0,
                                2.0,
                                rng.gen_range(-0.2..0.2),
                            )
                        } else {
                            bx(rng.gen_range(30.0..60.0), 0.0, 2.0, 2.0, 0.0)
                        };
                        Detection {
                            score: rng.gen_range(0.0..1.0),
                            bbox,
                        }
                    })
                    .collect();
                preds.push(scene_preds);
                gts.push(scene_gts);
            }
            let got = ap_40(&preds, &gts, 0.5, IouKind::Bev);
            let want = oracle_ap40(&preds, &gts, 0.5);
            match (got, want) {
                (None, None) => {}
                (Some(g), Some(w)) => {
                    assert!((g - w).abs() < 1e-12, "round {round}: {g} vs {w}")
                }
                other => panic!("round {round}: mismatch {other:?}"),
            }
        }
    }

    /// Independent AP oracle: same matching contract, separate code path
    /// computing precision at each recall level by scanning all prefixes.
    fn oracle_ap40(preds: &[Vec<Detection>], gts: &[Vec<OrientedBox>], thresh: f64) -> Option<f64> {
        let n_gt: usize = gts.iter().map(|g| g.len()).sum();
        if n_gt == 0 {
            return None;
        }
        let mut flat: Vec<(f64, usize, usize)> = Vec::new();
        for (si, sp) in preds.iter().enumerate() {
            for (pi, p) in sp.iter().enumerate() {
                flat.push((p.score, si, pi));
            }
        }
        flat.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tps = Vec::new();
        for &(_, si, pi) in &flat {
            let mut best_gi = None;
            let mut best_iou = thresh;
            for (gi, g) in gts[si].iter().enumerate() {
                if used[si][gi] {
                    continue;
                }
                let v = iou_bev(&preds[si][pi].bbox, g);
                if v > best_iou || (v >= thresh && best_gi.is_none() && v >= best_iou) {
                    best_iou = v;
                    best_gi = Some(gi);
                }
            }
            if let Some(gi) = best_gi {
                used[si][gi] = true;
                tps.push(1usize);
            } else {
                tps.push(0);
            }
        }
        let mut ap = 0.0;
        for level in 1..=40 {
            let r = level as f64 / 40.0;
            let mut best_p = 0.0f64;
            let mut tp = 0usize;
            for (i, &t) in tps.iter().enumerate() {
                tp += t;
                let rec = tp as f64 / n_gt as f64;
                let prec = tp as f64 / (i + 1) as f64;
                if rec >= r - 1e-12 {
                    best_p = best_p.max(prec);
                }
            }
            ap += best_p;
        }
        Some(ap / 40.0)
    }
}
