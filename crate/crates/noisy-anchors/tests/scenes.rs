// SPDX-License-Identifier: Apache-2.0

use std::collections::HashSet;
use std::io::Cursor;

use noisy_anchors::config::ExperimentConfig;
use noisy_anchors::core::anchors;
use noisy_anchors::core::model::Method;
use noisy_anchors::core::synth::generate_split;
use noisy_anchors::core::{AnchorConfig, GenConfig};
use noisy_anchors::formats::{read_scenes, write_scenes};
use noisy_anchors::runner::{run, splits};
use sha2::{Digest, Sha256};

/// SHA-256 of the scene file and of the little-endian feature bytes of 50
/// default scenes from base seed 42. Regenerate only on a deliberate format
/// or generator change.
const GOLDEN_JSONL: &str = "d49de642633ce583450690d05d095ab9f8d33bd6323fb430b7c02b6eea822912";
const GOLDEN_FEATURES: &str = "65e6563e565ddce275419fd085ed64cd298595edb78bdc6eff778ca36d2d29eb";

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[test]
fn fifty_scenes_match_golden_bytes() {
    let set = anchors::generate(&AnchorConfig::default()).unwrap();
    let gen = GenConfig::default();
    let scenes = generate_split(&gen, &set, 42, 50).unwrap();
    let mut jsonl = Vec::new();
    write_scenes(&mut jsonl, &scenes).unwrap();
    let features: Vec<u8> = scenes
        .iter()
        .flat_map(|s| s.features.iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    assert_eq!(digest(&jsonl), GOLDEN_JSONL);
    assert_eq!(digest(&features), GOLDEN_FEATURES);
    assert_eq!(
        read_scenes(Cursor::new(&jsonl), &gen, &set).unwrap(),
        scenes
    );
}

#[test]
fn train_and_eval_splits_share_no_scene() {
    let cfg = ExperimentConfig::default();
    let set = anchors::generate(&cfg.anchors).unwrap();
    let mut cfg = cfg;
    cfg.data.num_train = 100;
    cfg.data.num_eval = 100;
    let serialize = |s: &noisy_anchors::core::Scene| {
        let mut out = Vec::new();
        write_scenes(&mut out, std::slice::from_ref(s)).unwrap();
        out
    };
    let mut seen = HashSet::new();
    for seed in [0, 1] {
        let (train, eval) = splits(&cfg, &set, seed).unwrap();
        for s in train.iter().chain(&eval) {
            assert!(
                seen.insert(serialize(s)),
                "scene with seed {} repeats",
                s.seed()
            );
        }
    }
}

#[test]
fn clean_scenes_are_learnable() {
    let mut cfg = ExperimentConfig::default();
    cfg.seeds = vec![0];
    cfg.method = Method::BASELINE;
    cfg.gen.feature_noise = 0.0;
    cfg.gen.distractor_rate = 0.0;
    let (rec, _) = run(&cfg).unwrap();
    let ap50 = rec.report(0).and_then(|r| r.ap_at(0.5)).unwrap();
    assert!(ap50 >= 0.9, "AP50 {ap50}");
}
