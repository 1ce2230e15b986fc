mod common;

use common::{CHECKS, INSTANCES};

fn run(name: &str) {
    let (_, check) = CHECKS.iter().find(|(n, _)| *n == name).unwrap();
    for seed in 0..INSTANCES {
        check(seed).unwrap();
    }
}

#[test]
fn fps_matches_oracle() {
    run("fps");
}

#[test]
fn knn_matches_oracle() {
    run("knn");
}

#[test]
fn chamfer_and_partial_matching_match_oracle() {
    run("chamfer+pm");
}

#[test]
fn fscore_matches_oracle() {
    run("fscore");
}

#[test]
fn mmd_matches_oracle() {
    run("mmd");
}
