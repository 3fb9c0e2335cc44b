mod support;

use cspdet_core::boxes::{batched_nms, nms, BBox, BoxCoder};
use cspdet_core::data::rle::{counts_from_string, counts_to_string, decode, encode};
use cspdet_core::data::{Mask, Rle};
use cspdet_core::detector::{dice_coefficient, Detection};
use cspdet_core::kernels::conv::{conv2d_forward, out_extent};
use cspdet_core::kernels::roi_align::roi_align_plan;
use cspdet_core::kernels::ConvGeom;
use cspdet_core::metrics::{average_precision, evaluate, match_detections, GtInstance};
use proptest::prelude::*;
use support::oracles;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..60.0f64, 0.0..60.0f64, 1.0..30.0f64, 1.0..30.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    proptest::collection::vec(any::<bool>(), h * w).prop_map(move |v| Mask::from_fn(h, w, |y, x| v[y * w + x]))
}

fn rect_mask(h: usize, w: usize, r: [usize; 4]) -> Mask {
    let [x1, y1, x2, y2] = r;
    Mask::from_fn(h, w, |y, x| x >= x1 && x < x2 && y >= y1 && y < y2)
}

const SIDE: usize = 16;

fn rect() -> impl Strategy<Value = [usize; 4]> {
    (0..SIDE - 1, 0..SIDE - 1, 1..SIDE, 1..SIDE).prop_map(|(x, y, w, h)| [x, y, (x + w).min(SIDE), (y + h).min(SIDE)])
}

/// Random corpus: per image a few ground-truth rectangles and detections that
/// either jitter a ground truth or land anywhere.
fn corpus() -> impl Strategy<Value = (Vec<Vec<Detection>>, Vec<Vec<GtInstance>>)> {
    let gt = (rect(), 1..4usize);
    let det = (rect(), 1..4usize, 0.0..1.0f64, any::<bool>(), 0..4usize, -2i32..3, -2i32..3);
    let image = (proptest::collection::vec(gt, 0..4), proptest::collection::vec(det, 0..6));
    proptest::collection::vec(image, 1..4).prop_map(|imgs| {
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for (g, d) in imgs {
            let gi: Vec<GtInstance> = g
                .iter()
                .map(|&(r, c)| {
                    let m = rect_mask(SIDE, SIDE, r);
                    GtInstance { bbox: m.bbox().unwrap(), class_id: c, mask: m, iscrowd: false }
                })
                .collect();
            let di: Vec<Detection> = d
                .iter()
                .map(|&(r, c, s, copy, which, dx, dy)| {
                    let (r, c) = match gi.get(which) {
                        Some(t) if copy => {
                            let b = t.bbox;
                            let sh = |v: f64, d: i32| (v as i32 + d).clamp(0, SIDE as i32) as usize;
                            let r = [sh(b.x1, dx), sh(b.y1, dy), sh(b.x2, dx), sh(b.y2, dy)];
                            (r, t.class_id)
                        }
                        _ => (r, c),
                    };
                    let m = rect_mask(SIDE, SIDE, r);
                    let bbox = m.bbox().unwrap_or(BBox::new(0.0, 0.0, 1.0, 1.0));
                    Detection { bbox, class_id: c, score: s, mask: m }
                })
                .collect();
            dets.push(di);
            gts.push(gi);
        }
        (dets, gts)
    })
}

fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn conv_matches_nested_loops(
        n in 1..3usize, cpg in 1..4usize, groups in 1..4usize, opg in 1..4usize,
        h in 3..10usize, w in 3..10usize, k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1..3usize, pad in 0..3usize, seed in any::<u64>(), bias in any::<bool>(),
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let (c_in, c_out) = (cpg * groups, opg * groups);
        let g = ConvGeom::new([n, c_in, h, w], c_out, k, stride, pad, groups).unwrap();
        prop_assert_eq!((g.ho, g.wo), (out_extent(h, k, stride, pad), out_extent(w, k, stride, pad)));
        prop_assert_eq!(g.ho, (h + 2 * pad - k) / stride + 1);

        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let x: Vec<f64> = (0..n * c_in * h * w).map(|_| next()).collect();
        let wt: Vec<f64> = (0..c_out * cpg * k * k).map(|_| next()).collect();
        let b: Vec<f64> = (0..c_out).map(|_| next()).collect();
        let bias = bias.then_some(&b[..]);
        let want = oracles::conv2d(&x, [n, c_in, h, w], &wt, bias, c_out, k, stride, pad, groups);

        let got = conv2d_forward(&x, &wt, bias, &g);
        prop_assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12, "f64 {a} vs {b}");
        }
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let wf: Vec<f32> = wt.iter().map(|&v| v as f32).collect();
        let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let got = conv2d_forward(&xf, &wf, bias.map(|_| &bf[..]), &g);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((*a as f64 - b).abs() <= 1e-5, "f32 {a} vs {b}");
        }
    }

    #[test]
    fn nms_agrees_with_reference(boxes in proptest::collection::vec(bbox(), 0..40), thr in 0.1..0.9f64, seed in any::<u64>()) {
        let scores: Vec<f64> = (0..boxes.len()).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0).collect();
        let keep = nms(&boxes, &scores, thr);
        let mut sorted = keep.clone();
        sorted.sort_unstable();
        prop_assert_eq!(&sorted, &oracles::nms(&boxes, &scores, thr));
        // visit order is descending score
        for p in keep.windows(2) {
            prop_assert!(scores[p[0]] >= scores[p[1]]);
        }
        for (a, &i) in keep.iter().enumerate() {
            for &j in &keep[a + 1..] {
                prop_assert!(boxes[i].iou(&boxes[j]) <= thr);
            }
        }
    }

    #[test]
    fn nms_is_permutation_invariant(boxes in proptest::collection::vec(bbox(), 1..30), thr in 0.1..0.9f64, rot in 0..30usize) {
        let scores: Vec<f64> = (0..boxes.len()).map(|i| (i * 37 % 101) as f64 + i as f64 * 1e-3).collect();
        let n = boxes.len();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + rot) % n).collect();
        prop_assume!({ let mut p = perm.clone(); p.sort_unstable(); p.dedup(); p.len() == n });
        let pb: Vec<BBox> = perm.iter().map(|&i| boxes[i]).collect();
        let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let a: Vec<usize> = nms(&boxes, &scores, thr);
        let b: Vec<usize> = nms(&pb, &ps, thr).into_iter().map(|j| perm[j]).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn batched_nms_is_per_group_nms(boxes in proptest::collection::vec(bbox(), 0..30), groups in proptest::collection::vec(0..3usize, 30), thr in 0.2..0.8f64) {
        let n = boxes.len();
        let scores: Vec<f64> = (0..n).map(|i| (i * 53 % 97) as f64).collect();
        let groups = &groups[..n];
        let mut got = batched_nms(&boxes, &scores, groups, thr);
        for p in got.windows(2) {
            prop_assert!(scores[p[0]] >= scores[p[1]]);
        }
        got.sort_unstable();
        let mut want = Vec::new();
        for k in 0..3 {
            let idx: Vec<usize> = (0..n).filter(|&i| groups[i] == k).collect();
            let b: Vec<BBox> = idx.iter().map(|&i| boxes[i]).collect();
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            want.extend(oracles::nms(&b, &s, thr).into_iter().map(|j| idx[j]));
        }
        want.sort_unstable();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn box_coder_round_trips(r in bbox(), t in bbox(), coder in prop::sample::select(vec![BoxCoder::UNIT, BoxCoder::HEAD])) {
        let back = coder.decode(&r, coder.encode(&r, &t));
        for (a, b) in back.to_array().iter().zip(t.to_array()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rle_round_trips(m in (1..12usize, 1..12usize).prop_flat_map(|(h, w)| mask(h, w))) {
        let r = encode(&m);
        prop_assert_eq!(&r.counts, &oracles::rle_counts(&m));
        prop_assert_eq!(r.counts.iter().map(|&c| c as usize).sum::<usize>(), m.height * m.width);
        prop_assert_eq!(decode(&r).unwrap(), m.clone());
        let s = counts_to_string(&r.counts);
        prop_assert_eq!(counts_from_string(&s).unwrap(), r.counts.clone());
        // a run too many or too few is rejected
        let mut long = r.clone();
        *long.counts.last_mut().unwrap() += 1;
        prop_assert!(decode(&long).is_err());
        let short = Rle { counts: r.counts[..r.counts.len() - 1].to_vec(), ..r };
        if short.counts.iter().sum::<u32>() as usize != m.height * m.width {
            prop_assert!(decode(&short).is_err());
        }
    }

    #[test]
    fn roi_align_matches_direct_sampling(
        c in 1..3usize, h in 2..12usize, w in 2..12usize,
        x1 in -4.0..40.0f64, y1 in -4.0..40.0f64, bw in 0.1..40.0f64, bh in 0.1..40.0f64,
        scale in prop::sample::select(vec![0.25, 0.125, 0.5]), out in 1..8usize, sr in 1..3usize,
    ) {
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 31 % 17) as f64 - 8.0) / 8.0).collect();
        let b = [x1, y1, x1 + bw, y1 + bh];
        let plan = roi_align_plan::<f64>(&[b], scale, (h, w), (out, out), sr);
        let got = plan.forward(&x, c, h * w);
        let want = oracles::roi_align(&x, [c, h, w], b, scale, (out, out), sr);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let got = roi_align_plan::<f32>(&[b], scale, (h, w), (out, out), sr).forward(&xf, c, h * w);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((*a as f64 - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn evaluate_agrees_with_direct_computation((dets, gts) in corpus()) {
        let got = evaluate(&dets, &gts, 3);
        let want = oracles::evaluate_sheet(&dets, &gts, 3);
        prop_assert!(close(got.box_ap, want.box_ap, 1e-12), "box {:?} {:?}", got.box_ap, want.box_ap);
        prop_assert!(close(got.mask_ap, want.mask_ap, 1e-12), "mask {:?} {:?}", got.mask_ap, want.mask_ap);
        prop_assert!(close(got.miou, want.miou, 1e-12), "miou {:?} {:?}", got.miou, want.miou);
    }

    #[test]
    fn ap_ignores_monotone_score_rescaling((dets, gts) in corpus(), a in 0.1..10.0f64, b in -5.0..5.0f64) {
        let base = evaluate(&dets, &gts, 3);
        let moved: Vec<Vec<Detection>> = dets
            .iter()
            .map(|d| d.iter().map(|x| Detection { score: a * x.score + b, ..x.clone() }).collect())
            .collect();
        let r = evaluate(&moved, &gts, 3);
        prop_assert!(close(base.box_ap, r.box_ap, 1e-12));
        prop_assert!(close(base.mask_ap, r.mask_ap, 1e-12));
        prop_assert!(close(base.miou, r.miou, 1e-12));
    }

    #[test]
    fn ap_does_not_rise_with_threshold((dets, gts) in corpus()) {
        let r = evaluate(&dets, &gts, 3);
        for v in [&r.box_ap_per_threshold, &r.mask_ap_per_threshold] {
            for p in v.windows(2) {
                prop_assert!(p[1] <= p[0] + 1e-12, "{v:?}");
            }
            prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn matcher_assigns_each_gt_at_most_once(
        ious in proptest::collection::vec(proptest::collection::vec(0.0..1.0f64, 5), 0..8),
        crowd in proptest::collection::vec(any::<bool>(), 5),
        t in 0.3..0.9f64,
    ) {
        let m = match_detections(&ious, &crowd, t);
        let mut seen = [false; 5];
        for (d, (&tp, g)) in m.tp.iter().zip(&m.matched).enumerate() {
            if tp {
                let g = g.unwrap();
                prop_assert!(!crowd[g] && !seen[g] && ious[d][g] >= t);
                seen[g] = true;
            } else if let Some(g) = g {
                prop_assert!(crowd[*g] && m.ignored[d]);
            }
        }
        // a detection left unmatched had no free non-crowd GT above threshold
        let mut taken = [false; 5];
        for (d, g) in m.matched.iter().enumerate() {
            if m.tp[d] {
                taken[g.unwrap()] = true;
            } else {
                for j in 0..5 {
                    prop_assert!(crowd[j] || taken[j] || ious[d][j] < t);
                }
            }
        }
    }

    #[test]
    fn ap_of_flags_matches_pointwise_definition(flags in proptest::collection::vec(any::<bool>(), 0..30), extra in 0..5usize) {
        let n_gt = flags.iter().filter(|&&f| f).count() + extra;
        prop_assume!(n_gt > 0);
        let got = average_precision(&flags, n_gt).unwrap();
        prop_assert!((got - oracles::ap_direct(&flags, n_gt)).abs() < 1e-12);
    }

    #[test]
    fn dice_identities(p in proptest::collection::vec(0.0..1.0f64, 1..50), seed in any::<u64>()) {
        let g: Vec<f64> = p.iter().enumerate().map(|(i, _)| ((seed >> (i % 64)) & 1) as f64).collect();
        let d = dice_coefficient(&p, &g).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
        prop_assert!((d - dice_coefficient(&g, &p).unwrap()).abs() < 1e-12);
        if g.iter().any(|&v| v > 0.0) {
            prop_assert!((dice_coefficient(&g, &g).unwrap() - 1.0).abs() < 1e-12);
        }
        let inter: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        let denom: f64 = p.iter().sum::<f64>() + g.iter().sum::<f64>();
        if denom > 1.0 {
            prop_assert!((d - 2.0 * inter / denom).abs() < 1e-5, "{d} vs {}", 2.0 * inter / denom);
        }
    }
}

#[test]
fn hand_corpus_scores() {
    let (dets, gts) = oracles::hand_corpus();
    let r = evaluate(&dets, &gts, 1);
    let want = oracles::HAND_EXPECTED;
    assert!((r.box_ap.unwrap() - want.box_ap).abs() < 1e-12, "{:?}", r.box_ap);
    assert!((r.mask_ap.unwrap() - want.mask_ap).abs() < 1e-12, "{:?}", r.mask_ap);
    assert!((r.miou.unwrap() - want.miou).abs() < 1e-12, "{:?}", r.miou);
    let s = oracles::evaluate_sheet(&dets, &gts, 1);
    assert!((s.box_ap.unwrap() - want.box_ap).abs() < 1e-12);
    assert!((s.mask_ap.unwrap() - want.mask_ap).abs() < 1e-12);
}
