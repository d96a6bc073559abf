use lookmark::promptkit::{fixation_summary_text, PromptTemplate, DEFAULT_TEMPLATE};
use lookmark::{aggregate_fixation_times, BoundingBox, Fixation};
use std::path::Path;

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden/prompt")
        .join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn fixations(points: &[(f64, f64, f64)]) -> Vec<Fixation> {
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, y, t))| Fixation::new(x, y, t, i as u32))
        .collect()
}

fn block(boxes: &[BoundingBox], points: &[(f64, f64, f64)]) -> String {
    fixation_summary_text(&aggregate_fixation_times(&fixations(points), boxes))
}

#[test]
fn overlapping_boxes_in_first_fixation_order() {
    let boxes = [
        BoundingBox::new(10.0, 40.0, 40.0, 80.0, "Pleural effusion"),
        BoundingBox::new(5.0, 35.0, 60.0, 90.0, "Atelectasis"),
    ];
    let text = block(
        &boxes,
        &[
            (50.0, 85.0, 0.41),
            (20.0, 60.0, 0.35),
            (12.0, 38.0, 0.20),
            (90.0, 10.0, 0.3),
        ],
    );
    assert_eq!(text, golden("overlap.txt"));
}

#[test]
fn durations_round_to_two_places_per_box() {
    let boxes = [
        BoundingBox::new(0.0, 0.0, 10.0, 10.0, "Nodule"),
        BoundingBox::new(20.0, 20.0, 40.0, 40.0, "Mass"),
        BoundingBox::new(50.0, 50.0, 55.0, 55.0, "Nodule"),
    ];
    let text = block(
        &boxes,
        &[
            (5.0, 5.0, 0.5),
            (30.0, 30.0, 12.346),
            (10.0, 10.0, 0.499),
            (52.0, 52.0, 0.1),
        ],
    );
    assert_eq!(text, golden("rounding.txt"));
}

#[test]
fn unmapped_time_is_not_rendered() {
    let boxes = [BoundingBox::new(0.0, 0.0, 10.0, 10.0, "Nodule")];
    assert_eq!(
        block(&boxes, &[(50.0, 50.0, 2.0)]),
        golden("unmapped_only.txt")
    );
    assert_eq!(block(&[], &[(1.0, 1.0, 1.0)]), golden("unmapped_only.txt"));
}

#[test]
fn user_turn_with_default_template() {
    let t = PromptTemplate::parse(DEFAULT_TEMPLATE).unwrap();
    let boxes = [BoundingBox::new(30.0, 30.0, 70.0, 70.0, "Cardiomegaly")];
    let text = t.render_user(&block(&boxes, &[(50.0, 50.0, 0.8), (31.0, 31.0, 0.249)]));
    assert_eq!(text, golden("user_turn.txt"));
    assert_eq!(t.render_user(""), "Write the findings of this chest X-ray.");
}
