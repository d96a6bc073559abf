use image::{Rgb, RgbImage};
use lookmark::grounding::{
    fixation_intensity_field, label_color, render_box_overlay, render_fixation_heatmap,
};
use lookmark::{aggregate_fixation_times, map_fixation, BoundingBox, Fixation, RenderSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::time::Instant;

/// Dwell per box computed the slow way: for every box, collect the
/// fixations whose smallest containing box (ties to lowest index) is that
/// box, then order boxes by their earliest such fixation.
fn oracle(fixations: &[Fixation], boxes: &[BoundingBox]) -> (Vec<(usize, String, f64)>, f64) {
    let owner = |f: &Fixation| -> Option<usize> {
        let containing: Vec<usize> = (0..boxes.len())
            .filter(|&i| {
                let b = &boxes[i];
                f.x >= b.x1 && f.x <= b.x2 && f.y >= b.y1 && f.y <= b.y2
            })
            .collect();
        let min_area = containing
            .iter()
            .map(|&i| boxes[i].area())
            .fold(f64::INFINITY, f64::min);
        containing
            .into_iter()
            .find(|&i| boxes[i].area() == min_area)
    };
    let owners: Vec<Option<usize>> = fixations.iter().map(owner).collect();
    let mut firsts: Vec<(usize, usize)> = (0..boxes.len())
        .filter_map(|i| owners.iter().position(|o| *o == Some(i)).map(|p| (p, i)))
        .collect();
    firsts.sort();
    let entries = firsts
        .into_iter()
        .map(|(_, i)| {
            let total = fixations
                .iter()
                .zip(&owners)
                .filter(|(_, o)| **o == Some(i))
                .map(|(f, _)| f.duration_s)
                .sum();
            (i, boxes[i].label.clone(), total)
        })
        .collect();
    let unmapped = fixations
        .iter()
        .zip(&owners)
        .filter(|(_, o)| o.is_none())
        .map(|(f, _)| f.duration_s)
        .sum();
    (entries, unmapped)
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<BoundingBox>, Vec<Fixation>) {
    let n_boxes = rng.random_range(0..=10);
    let mut boxes: Vec<BoundingBox> = Vec::new();
    for i in 0..n_boxes {
        // Coarse integer grid so shared edges, containments and equal areas are common.
        let b = if i > 0 && rng.random_bool(0.3) {
            let p = boxes[rng.random_range(0..boxes.len())].clone();
            let (w, h) = (p.x2 - p.x1, p.y2 - p.y1);
            let x1 = p.x1 + rng.random_range(0..=(w as i64 / 2)) as f64;
            let y1 = p.y1 + rng.random_range(0..=(h as i64 / 2)) as f64;
            BoundingBox::new(
                x1,
                y1,
                (x1 + w / 2.0).max(x1 + 1.0),
                (y1 + h / 2.0).max(y1 + 1.0),
                format!("b{i}"),
            )
        } else {
            let x1 = rng.random_range(0..40) as f64;
            let y1 = rng.random_range(0..40) as f64;
            let w = rng.random_range(1..30) as f64;
            let h = rng.random_range(1..30) as f64;
            BoundingBox::new(
                x1,
                y1,
                x1 + w,
                y1 + h,
                format!("b{}", rng.random_range(0..4)),
            )
        };
        boxes.push(b);
    }
    let n_fix = rng.random_range(0..=200);
    let fixations = (0..n_fix)
        .map(|j| {
            let (x, y) = if rng.random_bool(0.3) {
                (
                    rng.random_range(0..70) as f64,
                    rng.random_range(0..70) as f64,
                )
            } else {
                (rng.random_range(0.0..70.0), rng.random_range(0.0..70.0))
            };
            Fixation::new(x, y, rng.random_range(0.01..2.0), j)
        })
        .collect();
    (boxes, fixations)
}

#[test]
fn aggregation_matches_oracle_on_random_instances() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9a7e);
    for case in 0..1000 {
        let (boxes, fixations) = random_instance(&mut rng);
        let got = aggregate_fixation_times(&fixations, &boxes);
        let (want, unmapped) = oracle(&fixations, &boxes);
        let got_entries: Vec<(usize, String, f64)> = got
            .entries
            .iter()
            .map(|e| (e.box_index, e.label.clone(), e.total_time_s))
            .collect();
        assert_eq!(got_entries, want, "case {case}");
        assert_eq!(got.unmapped_time_s, unmapped, "case {case}");
        let total: f64 = fixations.iter().map(|f| f.duration_s).sum();
        assert!(
            (got.mapped_time_s() + got.unmapped_time_s - total).abs() < 1e-9,
            "case {case}"
        );
    }
    assert!(
        start.elapsed().as_secs_f64() < 10.0,
        "took {:?}",
        start.elapsed()
    );
}

#[test]
fn overlapping_boxes_resolve_to_smallest() {
    let outer = BoundingBox::new(0.0, 0.0, 100.0, 100.0, "outer");
    let mid = BoundingBox::new(10.0, 10.0, 60.0, 60.0, "mid");
    let inner = BoundingBox::new(20.0, 20.0, 30.0, 30.0, "inner");
    let twin_a = BoundingBox::new(40.0, 40.0, 50.0, 50.0, "twin_a");
    let twin_b = BoundingBox::new(45.0, 45.0, 55.0, 55.0, "twin_b");
    type Case<'a> = (Vec<BoundingBox>, (f64, f64), Option<&'a str>);
    let cases: Vec<Case> = vec![
        (
            vec![outer.clone(), mid.clone(), inner.clone()],
            (25.0, 25.0),
            Some("inner"),
        ),
        (
            vec![inner.clone(), mid.clone(), outer.clone()],
            (25.0, 25.0),
            Some("inner"),
        ),
        (vec![outer.clone(), mid.clone()], (15.0, 15.0), Some("mid")),
        (
            vec![outer.clone(), mid.clone(), inner.clone()],
            (30.0, 30.0),
            Some("inner"),
        ),
        (
            vec![outer.clone(), mid.clone(), inner.clone()],
            (31.0, 31.0),
            Some("mid"),
        ),
        (vec![outer.clone()], (101.0, 50.0), None),
        (
            vec![twin_a.clone(), twin_b.clone()],
            (47.0, 47.0),
            Some("twin_a"),
        ),
        (
            vec![twin_b.clone(), twin_a.clone()],
            (47.0, 47.0),
            Some("twin_b"),
        ),
        (
            vec![outer.clone(), twin_b.clone(), twin_a.clone()],
            (50.0, 50.0),
            Some("twin_b"),
        ),
    ];
    for run in 0..100 {
        for (boxes, (x, y), want) in &cases {
            let got = map_fixation(&Fixation::new(*x, *y, 0.5, 0), boxes)
                .map(|i| boxes[i].label.as_str());
            assert_eq!(got, *want, "run {run} at ({x}, {y})");
        }
    }
}

fn textured(w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        let v = ((x * 5 + y * 11) % 180 + 20) as u8;
        Rgb([v, v, v])
    })
}

fn changed(a: &RgbImage, b: &RgbImage) -> BTreeSet<(u32, u32)> {
    a.enumerate_pixels()
        .filter(|(x, y, p)| b.get_pixel(*x, *y) != *p)
        .map(|(x, y, _)| (x, y))
        .collect()
}

#[test]
fn overlay_changes_exactly_the_stroke_ring() {
    let base = textured(64, 48);
    let spec = RenderSpec {
        box_stroke_px: 2,
        ..Default::default()
    };
    let b = BoundingBox::new(10.4, 8.0, 30.0, 20.6, "");
    let out = render_box_overlay(&base, std::slice::from_ref(&b), &spec);
    let (l, t, r, btm) = (10u32, 8u32, 29u32, 20u32);
    let mut ring = BTreeSet::new();
    for y in t..=btm {
        for x in l..=r {
            if x < l + 2 || x + 2 > r || y < t + 2 || y + 2 > btm {
                ring.insert((x, y));
            }
        }
    }
    assert_eq!(changed(&base, &out), ring);
    let color = label_color("", spec.palette_seed);
    assert!(ring.iter().all(|&(x, y)| *out.get_pixel(x, y) == color));
}

#[test]
fn labelled_overlay_stays_inside_ring_and_tag() {
    let base = textured(96, 96);
    let spec = RenderSpec {
        box_stroke_px: 1,
        label_font_px: 8,
        ..Default::default()
    };
    // Tag fits above the first box; the second is at the top edge so its tag goes inside.
    let boxes = [
        BoundingBox::new(20.0, 40.0, 60.0, 70.0, "Nodule"),
        BoundingBox::new(5.0, 0.0, 35.0, 25.0, "Mass"),
    ];
    let out = render_box_overlay(&base, &boxes, &spec);
    let tag = |left: u32, top: u32, n: u32| {
        let (w, h) = (n * 8 + 2, 10);
        let y = if top >= h { top - h } else { top };
        (left, y, left + w - 1, y + h - 1)
    };
    let allowed = [
        (20, 40, 59, 69, tag(20, 40, 6)),
        (5, 0, 34, 24, tag(5, 0, 4)),
    ];
    for (x, y) in changed(&base, &out) {
        let ok = allowed.iter().any(|&(l, t, r, b, (tl, tt, tr, tb))| {
            let on_ring = (l..=r).contains(&x)
                && (t..=b).contains(&y)
                && (x == l || x == r || y == t || y == b);
            on_ring || ((tl..=tr).contains(&x) && (tt..=tb).contains(&y))
        });
        assert!(ok, "pixel ({x}, {y}) changed outside rings and tags");
    }
    // The inside of the lower box, away from edges and tags, is untouched.
    for y in 45..65 {
        for x in 25..55 {
            assert_eq!(out.get_pixel(x, y), base.get_pixel(x, y));
        }
    }
}

#[test]
fn heatmap_density_scales_with_duration() {
    let spec = RenderSpec {
        heatmap_sigma_px: Some(3.0),
        ..Default::default()
    };
    let fix = [
        Fixation::new(15.0, 20.0, 0.3, 0),
        Fixation::new(65.0, 20.0, 0.9, 1),
    ];
    let field = fixation_intensity_field(80, 40, &fix, &spec);
    let at = |x: usize, y: usize| field[y * 80 + x];
    assert!((at(65, 20) / at(15, 20) - 3.0).abs() < 1e-9);
    assert!((at(65, 20) - 0.9).abs() < 1e-12);

    let base = textured(80, 40);
    let out = render_fixation_heatmap(&base, &fix, &spec);
    assert_eq!(out.dimensions(), base.dimensions());
    assert_ne!(out.get_pixel(65, 20), base.get_pixel(65, 20));
    assert_eq!(render_fixation_heatmap(&base, &fix, &spec), out);
}
