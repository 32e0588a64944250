use adnet::image::{BBox, Mask};
use adnet::metrics::region_similarity;
use adnet::pruning::{apply_pruning, link_trajectories, small_static, Detection, LINK_IOU, STATIC_IOU};
use adnet::synthdata::{gen_video, pruning_scene};
use proptest::prelude::*;

const W: usize = 24;

fn rect(frame: usize, x0: usize, y0: usize, w: usize, h: usize) -> Detection {
    let m = Mask::from_fn(W, W, |x, y| (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y));
    Detection::from_mask(frame, m, -1).unwrap()
}

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
    let iy = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
    let inter = (ix * iy) as f64;
    inter / ((a.width() * a.height() + b.width() * b.height()) as f64 - inter)
}

fn oracle(dets: &[Detection], iou: f64, support: f64, size: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..dets.len() {
        let mut count = 0;
        for j in 0..dets.len() {
            if box_iou(&dets[i].bbox, &dets[j].bbox) > iou {
                count += 1;
            }
        }
        if count as f64 > support && dets[i].area < size {
            out.push(i);
        }
    }
    out
}

fn detection_set() -> impl Strategy<Value = (usize, Vec<Detection>)> {
    (1usize..6).prop_flat_map(|n| {
        let det = (0..n, 0usize..W - 2, 0usize..W - 2, 1usize..10, 1usize..10).prop_map(|(t, x, y, w, h)| {
            rect(t, x, y, w.min(W - x), h.min(W - y))
        });
        (Just(n), prop::collection::vec(det, 0..14))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn small_static_matches_double_loop((n, dets) in detection_set(), size in 1usize..80) {
        let support = 0.5 * n as f64;
        prop_assert_eq!(small_static(&dets, STATIC_IOU, support, size), oracle(&dets, STATIC_IOU, support, size));
    }

    #[test]
    fn small_static_ignores_input_order((n, dets) in detection_set(), size in 1usize..80, rot in 0usize..14) {
        let support = 0.5 * n as f64;
        let pick = |d: &[Detection]| {
            let mut v: Vec<Detection> = small_static(d, STATIC_IOU, support, size).into_iter().map(|i| d[i].clone()).collect();
            v.sort_by_key(|d| (d.frame, d.bbox.x0, d.bbox.y0, d.bbox.x1, d.bbox.y1));
            v
        };
        let mut rotated = dets.clone();
        if !rotated.is_empty() {
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            rotated.reverse();
        }
        prop_assert_eq!(pick(&dets), pick(&rotated));
    }

    #[test]
    fn pruning_is_idempotent_and_never_adds((n, dets) in detection_set(), seed in any::<u64>()) {
        let masks: Vec<Mask> = (0..n)
            .map(|t| Mask::from_fn(W, W, |x, y| (seed >> ((x * 7 + y * 3 + t) % 64)) & 1 == 1))
            .collect();
        let once = apply_pruning(&masks, &dets).unwrap();
        let twice = apply_pruning(&once, &dets).unwrap();
        prop_assert_eq!(&once, &twice);
        for (a, b) in once.iter().zip(&masks) {
            prop_assert!(a.count() <= b.count());
            prop_assert_eq!(a.and(b).unwrap(), a.clone());
        }
    }
}

#[test]
fn single_frame_support_accepts_any_small_detection() {
    let dets = vec![rect(0, 0, 0, 3, 3), rect(0, 10, 10, 2, 2)];
    assert_eq!(small_static(&dets, STATIC_IOU, 0.5, 100), vec![0, 1]);
}

#[test]
fn static_pair_of_objects() {
    let n = 10;
    let mut dets = Vec::new();
    for t in 0..n {
        dets.push(rect(t, 0, 0, 20, 20));
        dets.push(rect(t, 21, 21, 2, 2));
    }
    let picked = small_static(&dets, STATIC_IOU, 0.5 * n as f64, 100);
    assert_eq!(picked.len(), n);
    assert!(picked.iter().all(|&i| dets[i].area == 4));
}

#[test]
fn interleaved_movers_keep_their_identity() {
    // two 10×10 boxes sliding one pixel per frame in opposite lanes that
    // swap order in the detection list every frame
    let n = 8;
    let mut dets = Vec::new();
    for t in 0..n {
        let a = Mask::from_fn(40, 40, |x, y| (t..t + 10).contains(&x) && y < 10);
        let b = Mask::from_fn(40, 40, |x, y| (12 + t..22 + t).contains(&x) && (2..12).contains(&y));
        let (first, second) = if t % 2 == 0 { (a, b) } else { (b, a) };
        dets.push(Detection::from_mask(t, first, -1).unwrap());
        dets.push(Detection::from_mask(t, second, -1).unwrap());
    }
    let tracks = link_trajectories(&dets, LINK_IOU);
    assert_eq!(tracks.len(), 2);
    for tr in &tracks {
        assert_eq!(tr.len(), n);
        let y0 = tr.detections[0].bbox.y0;
        assert!(tr.detections.iter().all(|d| d.bbox.y0 == y0));
        for w in tr.detections.windows(2) {
            assert_eq!(w[1].frame, w[0].frame + 1);
            assert!(w[0].iou(&w[1]) >= LINK_IOU);
        }
    }
}

#[test]
fn constant_distractor_scene_end_to_end() {
    // dominant object grows from 600 to 900 pixels; the 30 pixel static
    // distractor is absent on the first, smallest, frame
    let n = 10;
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    let side = |t: usize| if t == 0 { 20 } else { 30 };
    for t in 0..n {
        let big = Mask::from_fn(48, 48, |x, y| x < 30 && y < side(t));
        let small = Mask::from_fn(48, 48, |x, y| (40..46).contains(&x) && (40..45).contains(&y));
        dets.push(Detection::from_mask(t, big.clone(), 0).unwrap());
        if t > 0 {
            dets.push(Detection::from_mask(t, small.clone(), 1).unwrap());
            preds.push(big.or(&small).unwrap());
        } else {
            preds.push(big.clone());
        }
        gts.push(big);
    }
    let refined = apply_pruning(&preds, &dets).unwrap();
    assert_eq!(refined, gts);
    let j = |m: &[Mask]| m.iter().zip(&gts).map(|(a, b)| region_similarity(a, b).unwrap()).sum::<f64>();
    assert!(j(&refined) > j(&preds));
}

#[test]
fn pruning_scene_preset_is_cleaned() {
    let v = gen_video("p", &pruning_scene(16), 3).unwrap();
    let preds: Vec<Mask> = (0..v.len())
        .map(|t| {
            v.detections
                .iter()
                .filter(|d| d.frame == t)
                .fold(Mask::empty(64, 64), |m, d| m.or(&d.mask).unwrap())
        })
        .collect();
    let refined = apply_pruning(&preds, &v.detections).unwrap();
    assert_eq!(refined, v.masks);
}
