use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ocnet_data::synthetic::{plan, render_sample};
use ocnet_data::{generate_synthetic, load_reid_directory, Error, OcclusionTag, Split, SyntheticConfig};

fn small(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        num_identities: 6,
        images_per_identity: 12,
        queries_per_camera: 1,
        seed,
        ..SyntheticConfig::default()
    }
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_gives_byte_identical_datasets() {
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    generate_synthetic(&small(5), a.path()).unwrap();
    generate_synthetic(&small(5), b.path()).unwrap();
    generate_synthetic(&small(6), c.path()).unwrap();
    let (ta, tb, tc) = (read_tree(a.path()), read_tree(b.path()), read_tree(c.path()));
    assert_eq!(ta.len(), 6 * 12 + 1);
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn zero_occlusion_fraction_tags_everything_none() {
    let dir = tempfile::tempdir().unwrap();
    let config = SyntheticConfig {
        occlusion_fraction: 0.0,
        ..small(1)
    };
    let out = generate_synthetic(&config, dir.path()).unwrap();
    assert!(out.index.samples.iter().all(|s| s.occlusion == OcclusionTag::None));
    assert!(out
        .meta
        .iter()
        .all(|m| m.occluder.is_none() && m.interferer_center.is_none()));
}

#[test]
fn tag_counts_match_configured_proportions() {
    let config = SyntheticConfig {
        num_identities: 20,
        images_per_identity: 40,
        occlusion_fraction: 0.3,
        ..SyntheticConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&config, dir.path()).unwrap();

    // Count straight from the manifest text.
    let text = fs::read_to_string(dir.path().join("index.tsv")).unwrap();
    let mut per_id: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        let slot = match cols[4] {
            "none" => 0,
            "object" => 1,
            "pi" => 2,
            other => panic!("unexpected tag {other}"),
        };
        per_id.entry(cols[1].to_string()).or_default()[slot] += 1;
    }
    assert_eq!(per_id.len(), 20);
    // 40 * 0.3 = 12 occluded per identity, split 6 / 6.
    for (id, counts) in &per_id {
        assert_eq!(*counts, [28, 6, 6], "identity {id}");
    }
    let total: [usize; 3] = per_id
        .values()
        .fold([0; 3], |acc, c| [acc[0] + c[0], acc[1] + c[1], acc[2] + c[2]]);
    assert_eq!(total, [560, 120, 120]);
    let occluded = total[1] + total[2];
    assert!((occluded as f64 / 800.0 - 0.3).abs() <= 0.5 / 40.0);
}

#[test]
fn odd_counts_round_per_identity() {
    let config = SyntheticConfig {
        images_per_identity: 13,
        occlusion_fraction: 0.3,
        object_share: 0.25,
        pedestrian_share: 0.75,
        ..small(2)
    };
    // round(13 * 0.3) = 4 occluded, round(4 * 0.25) = 1 object.
    assert_eq!(config.occlusion_counts(), (1, 3));
    let idx = plan(&config).unwrap();
    for id in 1..=6 {
        let tags: Vec<_> = idx
            .samples
            .iter()
            .filter(|s| s.identity == id)
            .map(|s| s.occlusion)
            .collect();
        assert_eq!(tags.iter().filter(|t| **t == OcclusionTag::Object).count(), 1);
        assert_eq!(tags.iter().filter(|t| **t == OcclusionTag::Pedestrian).count(), 3);
    }
}

#[test]
fn generated_dataset_round_trips_through_the_loader() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate_synthetic(&small(3), dir.path()).unwrap();
    let loaded = load_reid_directory(dir.path()).unwrap();
    assert_eq!(loaded, out.index);
}

#[test]
fn split_invariants_hold() {
    let idx = plan(&SyntheticConfig::default()).unwrap();
    let ids = |s: Split| -> std::collections::BTreeSet<i64> { idx.split(s).map(|r| r.identity).collect() };
    let (train, query, gallery) = (ids(Split::Train), ids(Split::Query), ids(Split::Gallery));
    assert!(train.is_disjoint(&query) && train.is_disjoint(&gallery));
    assert_eq!(query, gallery);
    assert_eq!(train.len(), 10);
}

#[test]
fn pedestrian_interference_keeps_target_nearest_center() {
    let config = SyntheticConfig {
        occlusion_fraction: 1.0,
        object_share: 0.0,
        pedestrian_share: 1.0,
        ..small(11)
    };
    let (cx, cy) = (config.image_width as f64 / 2.0, config.image_height as f64 / 2.0);
    let d = |(x, y): (f64, f64)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
    for s in &plan(&config).unwrap().samples {
        let (_, meta) = render_sample(&config, s).unwrap();
        let other = meta.interferer_center.expect("PI sample has an interferer");
        assert!(d(meta.target_center) < d(other), "{}", s.path);
        assert_ne!(meta.interferer_identity, Some(s.identity));
        // interferers come from the same side of the train/eval partition
        let train_ids = config.num_train_identities() as i64;
        assert_eq!(meta.interferer_identity.unwrap() <= train_ids, s.identity <= train_ids);
    }
}

#[test]
fn object_occluders_stay_inside_the_image() {
    let config = SyntheticConfig {
        occlusion_fraction: 1.0,
        object_share: 1.0,
        pedestrian_share: 0.0,
        ..small(4)
    };
    for s in &plan(&config).unwrap().samples {
        let (img, meta) = render_sample(&config, s).unwrap();
        let r = meta.occluder.unwrap();
        assert!(r.top + r.height <= img.height() as usize && r.left + r.width <= img.width() as usize);
        assert!(r.height > 0 && r.width > 0);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [
        SyntheticConfig {
            num_identities: 0,
            ..small(0)
        },
        SyntheticConfig {
            images_per_identity: 0,
            ..small(0)
        },
        SyntheticConfig {
            occlusion_fraction: 1.5,
            ..small(0)
        },
    ] {
        assert!(matches!(
            generate_synthetic(&bad, dir.path()),
            Err(Error::Validation(_))
        ));
    }
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}
