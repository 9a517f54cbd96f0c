mod common;

#[test]
fn profile_equals_brute_force_replay_of_persisted_log() {
    let dir = tempfile::tempdir().unwrap();
    let (steps, diff) = common::tracking_replay(dir.path(), 20);
    assert!(steps >= 100, "only {steps} steps logged");
    assert_eq!(diff, 0, "{diff} profile entries differ from the replay");
}
