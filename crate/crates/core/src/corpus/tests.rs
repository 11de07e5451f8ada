use std::path::Path;

use super::*;

fn asset(total: usize, fps: f64) -> VideoAsset {
    VideoAsset {
        id: "v1".into(),
        path: "v1.mp4".into(),
        fps,
        duration: total as f64 / fps,
        total_frames: total,
    }
}

#[test]
fn centre_of_stride_sampling() {
    assert_eq!(
        sample_frame_indices(1000, 0.0, 16.0, 10.0, 8).unwrap(),
        vec![10, 30, 50, 70, 90, 110, 130, 150]
    );
    assert_eq!(sample_frame_indices(8, 0.0, 1.0, 8.0, 8).unwrap(), (0..8).collect::<Vec<_>>());
    assert!(matches!(sample_frame_indices(7, 0.0, 1.0, 7.0, 8), Err(Error::Input(_))));
    // offset start, clipped end
    let idx = sample_frame_indices(100, 2.0, 50.0, 10.0, 16).unwrap();
    assert_eq!(idx[0], 20 + 80 / 32);
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
    assert!(*idx.last().unwrap() < 100);
}

#[test]
fn sampling_is_monotone_over_a_sweep() {
    for total in [16usize, 17, 33, 250] {
        for n in [8usize, 16] {
            if total < n {
                continue;
            }
            let idx = sample_frame_indices(total, 0.0, total as f64 / 25.0, 25.0, n).unwrap();
            assert_eq!(idx.len(), n);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            assert!(idx.iter().all(|&i| i < total));
        }
    }
}

#[test]
fn asset_duration_consistency() {
    assert!(asset(100, 25.0).validate().is_ok());
    let mut a = asset(100, 25.0);
    a.duration = 10.0;
    assert!(a.validate().is_err());
}

#[test]
fn clip_spec_rejects_unsupported_lengths() {
    assert!(ClipSpec::resolve(&asset(100, 25.0), 0.0, 4.0, 12).is_err());
    let spec = ClipSpec::resolve(&asset(100, 25.0), 0.0, 4.0, 16).unwrap();
    assert_eq!(spec.frame_indices.len(), 16);
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        frame_height: 8,
        frame_width: 8,
        ..Default::default()
    }
}

#[test]
fn extract_from_memory() {
    let spec = SyntheticSpec {
        archetypes: 2,
        clips_per_archetype: 2,
        test_per_archetype: 1,
        frame_size: 16,
        frames_per_video: 40,
        n_frames: 16,
        ..Default::default()
    };
    let corpus = generate_synthetic(&spec).unwrap();
    let cfg = tiny_config();
    let rec = &corpus.records[0];
    let a = extract_clip(&corpus.source, &rec.clip(), &cfg).unwrap();
    let b = extract_clip(&corpus.source, &rec.clip(), &cfg).unwrap();
    assert_eq!(a.frames(), 16);
    assert_eq!((a.height(), a.width()), (8, 8));
    assert_eq!(a, b);

    let mut bad = rec.clip();
    *bad.frame_indices.last_mut().unwrap() = 40;
    let err = extract_clip(&corpus.source, &bad, &cfg).unwrap_err().to_string();
    assert!(err.contains("40"), "{err}");
}

#[test]
fn png_source_matches_memory_source() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        archetypes: 2,
        clips_per_archetype: 1,
        test_per_archetype: 0,
        frame_size: 16,
        frames_per_video: 8,
        ..Default::default()
    };
    let corpus = write_synthetic(&spec, dir.path()).unwrap();
    let png = PngSequenceSource::new(dir.path().join("frames"));
    let cfg = ModelConfig {
        frame_height: 16,
        frame_width: 16,
        ..Default::default()
    };
    for r in &corpus.records {
        let a = extract_clip(&corpus.source, &r.clip(), &cfg).unwrap();
        let b = extract_clip(&png, &r.clip(), &cfg).unwrap();
        assert_eq!(a, b);
    }
    let on_disk = read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(on_disk, corpus.records);

    std::fs::write(png.frame_path(&corpus.records[0].video_id, 3), b"not a png").unwrap();
    let err = extract_clip(&png, &corpus.records[0].clip(), &cfg).unwrap_err().to_string();
    assert!(err.contains("frame index 3"), "{err}");
}

#[test]
fn synthetic_is_seeded_and_balanced() {
    let spec = SyntheticSpec::default();
    let a = render_manifest(&generate_synthetic(&spec).unwrap().records).unwrap();
    let b = render_manifest(&generate_synthetic(&spec).unwrap().records).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&spec).unwrap();
    let d = generate_synthetic(&spec).unwrap();
    assert_eq!(c.source.frames("syn-hug-000"), d.source.frames("syn-hug-000"));
    let other = generate_synthetic(&SyntheticSpec { seed: 1, ..spec.clone() }).unwrap();
    assert_ne!(c.source.frames("syn-hug-000"), other.source.frames("syn-hug-000"));

    assert_eq!(c.records.len(), 32);
    for arch in &ARCHETYPES[..4] {
        let mine: Vec<_> = c.records.iter().filter(|r| r.behaviors == [arch.behavior]).collect();
        assert_eq!(mine.len(), 8);
        assert!(mine.iter().all(|r| r.text.split_whitespace().any(|w| w == arch.token)));
        assert_eq!(mine.iter().filter(|r| r.split == Split::Test).count(), 2);
    }
    check_split_hygiene(&c.records).unwrap();
}

#[test]
fn synthetic_spec_validation() {
    assert!(SyntheticSpec { archetypes: 1, ..Default::default() }.validate().is_err());
    assert!(SyntheticSpec { templates: vec!["no slot".into()], ..Default::default() }.validate().is_err());
    assert!(SyntheticSpec { frames_per_video: 4, ..Default::default() }.validate().is_err());
}

#[test]
fn archetype_names_are_ethogram_actions() {
    let e = crate::ethogram::Ethogram::capuchin();
    assert!(ARCHETYPES.iter().all(|a| e.contains(a.behavior)));
}

fn record(video: &str, split: Split) -> ManifestRecord {
    let spec = ClipSpec::resolve(&VideoAsset { id: video.into(), ..asset(80, 8.0) }, 0.0, 10.0, 8).unwrap();
    ManifestRecord::new(spec, "two monkeys hug", vec!["Hug".into()], split)
}

#[test]
fn manifest_round_trip_preserves_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let mut a = record("a", Split::Train);
    a.alignment_score = Some(0.41);
    a.extra.insert("source".into(), serde_json::json!({"camera": 3}));
    let b = record("b", Split::Test);
    write_manifest(&[a.clone(), b.clone()], &path).unwrap();
    let back = read_manifest(&path).unwrap();
    assert_eq!(back, vec![a, b]);
    let text = std::fs::read_to_string(&path).unwrap();
    for field in ["video_id", "t_init", "t_end", "n_frames", "frame_indices", "text", "behaviors", "split", "alignment_score", "schema_version"] {
        assert!(text.contains(&format!("\"{field}\"")), "{field}");
    }
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let good = serde_json::to_string(&record("a", Split::Train)).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
    v.as_object_mut().unwrap().remove("text");
    let text = format!("{good}\n{v}\n");
    match parse_manifest(&text, Path::new("m.jsonl")) {
        Err(Error::Manifest { line, message, .. }) => {
            assert_eq!(line, 2);
            assert!(message.contains("text"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
    v["frame_indices"] = serde_json::json!([5, 4, 6, 7, 8, 9, 10, 11]);
    let text = format!("\n{v}\n");
    assert!(matches!(parse_manifest(&text, Path::new("m")), Err(Error::Manifest { line: 2, .. })));
}

#[test]
fn split_overlap_names_the_ids() {
    let recs = vec![
        record("shared", Split::Train),
        record("only-train", Split::Train),
        record("shared", Split::Test),
    ];
    let dir = tempfile::tempdir().unwrap();
    let err = write_manifest(&recs, &dir.path().join("m.jsonl")).unwrap_err().to_string();
    assert!(err.contains("shared") && !err.contains("only-train"), "{err}");
    let text = recs.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect::<String>();
    let err = parse_manifest(&text, Path::new("m")).unwrap_err().to_string();
    assert!(err.contains("shared"), "{err}");
}

#[test]
fn montage_is_a_strip() {
    let clip = ClipTensor::zeros(8, 4, 5, 3);
    let img = montage(&clip);
    assert_eq!((img.width(), img.height()), (40, 4));
}
