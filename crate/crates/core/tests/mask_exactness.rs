mod common;

#[test]
fn masked_training_touches_only_selected_entries() {
    let out = common::mask_exactness();
    assert_eq!(
        out.leaked, 0,
        "{} entries outside the mask changed",
        out.leaked
    );
    assert!(out.moved > 0, "masked runs changed nothing");
    assert!(
        out.full_matches_plain,
        "full-strategy training differs from plain training"
    );
}
