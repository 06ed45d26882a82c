use semba_bench::{random_cloud, scene_config};

#[test]
fn scene_config_is_valid() {
    scene_config().validate().unwrap();
}

#[test]
fn random_cloud_is_seeded_and_in_the_unit_cube() {
    let a = random_cloud(500, 3);
    assert_eq!(a, random_cloud(500, 3));
    assert_ne!(a, random_cloud(500, 4));
    assert!(a
        .iter()
        .flat_map(|p| p.iter())
        .all(|v| (0.0..1.0).contains(v)));
}
