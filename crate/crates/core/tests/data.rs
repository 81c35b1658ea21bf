use std::fs;

use apn_core::data::{
    generate_synthetic, load_bundle, make_episodes, save_bundle, signature_of, validate_signatures,
    AttributeSchema, ClassInfo, ClassTable, DatasetBundle, InputKind, PartAnnotation, SampleRecord,
    Split, SynthConfig,
};
use apn_core::eval::pcp_from_peaks;
use apn_core::{Error, PixelBox, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        n_classes: 8,
        n_unseen: 2,
        n_val: 1,
        k_attrs: 8,
        l_groups: 4,
        image_size: 32,
        imgs_per_class: 6,
        seed,
        ..SynthConfig::default()
    }
}

fn feature_bundle() -> DatasetBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let schema = AttributeSchema::new(
        (0..4).map(|k| format!("a{k}")).collect(),
        vec![vec![0, 1], vec![2, 3]],
        vec!["head".into(), "tail".into()],
    )
    .unwrap();
    let classes = ClassTable::new(
        (0..3)
            .map(|id| ClassInfo {
                id,
                split: if id == 2 { Split::Unseen } else { Split::Seen },
                attrs: (0..4).map(|_| rng.gen_range(0.0..1.0)).collect(),
            })
            .collect(),
    )
    .unwrap();
    let samples = (0..9)
        .map(|i| SampleRecord {
            image_id: i + 1,
            class_id: i % 3,
            input: Tensor::new(
                vec![2, 2, 5],
                (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap(),
            parts: vec![PartAnnotation {
                part: 0,
                bbox: PixelBox::new(0, 0, 0, 1),
            }],
        })
        .collect();
    DatasetBundle::new(schema, classes, samples, InputKind::Feature).unwrap()
}

fn bit_equal(a: &DatasetBundle, b: &DatasetBundle) -> bool {
    a == b
        && a.samples.iter().zip(&b.samples).all(|(x, y)| {
            x.input
                .data()
                .iter()
                .zip(y.input.data())
                .all(|(p, q)| p.to_bits() == q.to_bits())
        })
        && a.classes
            .classes()
            .iter()
            .zip(b.classes.classes())
            .all(|(x, y)| {
                x.attrs
                    .iter()
                    .zip(&y.attrs)
                    .all(|(p, q)| p.to_bits() == q.to_bits())
            })
}

#[test]
fn image_and_feature_bundles_round_trip_bitwise() {
    let dir = TempDir::new().unwrap();
    for (name, b) in [
        ("img", generate_synthetic(&small(3)).unwrap()),
        ("feat", feature_bundle()),
    ] {
        let path = dir.path().join(name);
        save_bundle(&b, &path).unwrap();
        let back = load_bundle(&path).unwrap();
        assert!(bit_equal(&b, &back), "{name}");
    }
}

#[test]
fn corrupt_magic_is_reported() {
    let dir = TempDir::new().unwrap();
    save_bundle(&generate_synthetic(&small(3)).unwrap(), dir.path()).unwrap();
    let path = dir.path().join("tensors.bin");
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&path, bytes).unwrap();
    let err = load_bundle(dir.path()).unwrap_err();
    assert!(matches!(err, Error::BadMagic { .. }), "{err}");
    assert!(err.to_string().contains("bad magic"));
}

#[test]
fn short_attribute_row_is_a_dimension_mismatch() {
    let dir = TempDir::new().unwrap();
    save_bundle(
        &generate_synthetic(&SynthConfig {
            k_attrs: 12,
            ..small(3)
        })
        .unwrap(),
        dir.path(),
    )
    .unwrap();
    let path = dir.path().join("classes.tsv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let cut = lines[0].rfind('\t').unwrap();
    lines[0].truncate(cut);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let err = load_bundle(dir.path()).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { .. }), "{err}");
}

#[test]
fn smallest_feasible_instance_has_both_one_hot_signatures() {
    let cfg = SynthConfig {
        n_classes: 2,
        n_unseen: 0,
        n_val: 0,
        k_attrs: 2,
        l_groups: 1,
        image_size: 16,
        imgs_per_class: 2,
        ..SynthConfig::default()
    };
    let b = generate_synthetic(&cfg).unwrap();
    let mut sigs: Vec<Vec<f32>> = b
        .classes
        .classes()
        .iter()
        .map(|c| c.attrs.clone())
        .collect();
    sigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    assert_eq!(sigs, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    b.validate().unwrap();
    validate_signatures(&b).unwrap();
}

#[test]
fn default_bundle_signatures_are_valid() {
    let cfg = SynthConfig {
        imgs_per_class: 2,
        ..SynthConfig::default()
    };
    let b = generate_synthetic(&cfg).unwrap();
    validate_signatures(&b).unwrap();
    let sig = |id| signature_of(&b.classes.get(id).unwrap().attrs, &b.schema);
    let seen: Vec<_> = b.classes.ids(Split::Seen).into_iter().map(sig).collect();
    for id in b.classes.ids(Split::Unseen) {
        assert!(!seen.contains(&sig(id)));
    }
    for k in 0..12 {
        assert!(b
            .classes
            .ids(Split::Seen)
            .iter()
            .any(|&id| b.classes.get(id).unwrap().attrs[k] > 0.5));
    }
}

#[test]
fn same_seed_same_bytes() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_bundle(&generate_synthetic(&small(11)).unwrap(), &a).unwrap();
    save_bundle(&generate_synthetic(&small(11)).unwrap(), &b).unwrap();
    for f in [
        "schema.txt",
        "classes.tsv",
        "samples.tsv",
        "parts.tsv",
        "tensors.bin",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn episode_examples() {
    let cfg = SynthConfig {
        n_classes: 6,
        n_unseen: 2,
        n_val: 0,
        k_attrs: 8,
        l_groups: 4,
        image_size: 16,
        imgs_per_class: 3,
        ..SynthConfig::default()
    };
    let b = generate_synthetic(&cfg).unwrap();
    let eps = make_episodes(&b, 2, 1, 1, 10, 1).unwrap();
    let novel = b.classes.ids(Split::Unseen);
    for e in &eps {
        let mut classes = e.classes.clone();
        classes.sort_unstable();
        assert_eq!(classes, novel);
        for (s, q) in e.support.iter().zip(&e.query) {
            assert!(s.iter().all(|i| !q.contains(i)));
        }
    }
    assert_eq!(make_episodes(&b, 2, 1, 1, 10, 1).unwrap(), eps);
    assert!(make_episodes(&b, 5, 1, 1, 10, 1).is_err());
}

#[test]
fn ground_truth_peaks_score_full_pcp() {
    let b = generate_synthetic(&small(5)).unwrap();
    let all: Vec<usize> = (0..b.samples.len()).collect();
    let r = pcp_from_peaks(&b, &all, |i, g| {
        b.samples[i]
            .part(g)
            .map(|p| ((p.bbox.x0 + p.bbox.x1) / 2, (p.bbox.y0 + p.bbox.y1) / 2))
    })
    .unwrap();
    assert_eq!(r.mean, 1.0);
    assert!(r.parts.iter().all(|p| p.correct == p.total && p.total > 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_bundles_validate(seed in any::<u64>(), l in 1usize..=4, variants in 2usize..=3, extra in 0usize..4) {
        let k = l * variants;
        let total = variants.pow(l as u32);
        let n_unseen = 1.min(total.saturating_sub(variants + 1));
        let n = (variants + n_unseen + extra).min(total);
        let cfg = SynthConfig {
            n_classes: n,
            n_unseen,
            n_val: 0,
            k_attrs: k,
            l_groups: l,
            image_size: 32,
            imgs_per_class: 1,
            seed,
            ..SynthConfig::default()
        };
        let b = generate_synthetic(&cfg).unwrap();
        prop_assert!(validate_signatures(&b).is_ok());
        // One in-image box per group.
        for s in &b.samples {
            prop_assert_eq!(s.parts.len(), l);
            for p in &s.parts {
                prop_assert!(p.bbox.x1 < 32 && p.bbox.y1 < 32);
            }
        }
    }
}
