use std::collections::HashMap;
use std::sync::Arc;

use ethoclip::corpus::{generate_synthetic, read_manifest, write_manifest, Split, SyntheticCorpus, SyntheticSpec};
use ethoclip::ethogram::Ethogram;
use ethoclip_pipeline::backend::{names_present, BackendError};
use ethoclip_pipeline::fakes::{Failing, HashScorer, ScriptedClassifier, ScriptedTranscriber, TableScorer};
use ethoclip_pipeline::run::filter_pairs;
use ethoclip_pipeline::{
    run_on_transcripts, run_pipeline, BackendSuite, FilterConfig, PipelineConfig, PipelineOutput, RawTranscript,
    Segment, Stage, Status,
};
use proptest::prelude::*;

const SENTENCES: [&str; 10] = [
    "The hug is happening again between monkeys.",
    "Paçoca eats a fruit",
    "We shall try to observe something.",
    "It is raining heavily.",
    "Two monkeys groom each other",
    "está rolando uma interação",
    "The young one chases Bento",
    "We will go after the monkey.",
    "Bento plays with a stick near Paçoca",
    "one rests while the other forages",
];

fn corpus() -> SyntheticCorpus {
    generate_synthetic(&SyntheticSpec {
        archetypes: 2,
        clips_per_archetype: 2,
        test_per_archetype: 1,
        frame_size: 8,
        ..Default::default()
    })
    .unwrap()
}

fn config() -> PipelineConfig {
    PipelineConfig {
        names: vec!["Paçoca".into(), "Bento".into()],
        ..Default::default()
    }
}

fn suite() -> BackendSuite {
    BackendSuite::fakes(ScriptedTranscriber::default(), &Ethogram::capuchin())
}

fn transcript(c: &SyntheticCorpus, video: usize, text: &str, t0: f64, len: f64) -> RawTranscript {
    RawTranscript {
        video_id: c.assets[video % c.assets.len()].id.clone(),
        text: text.into(),
        t_init: t0,
        t_end: t0 + len,
        language: "pt".into(),
    }
}

fn run(c: &SyntheticCorpus, ts: Vec<RawTranscript>, suite: &BackendSuite, cfg: &PipelineConfig) -> PipelineOutput {
    run_on_transcripts(ts, &c.assets, &c.source, suite, &Ethogram::capuchin(), cfg).unwrap()
}

fn arb_transcripts() -> impl Strategy<Value = Vec<(usize, usize, f64, f64)>> {
    // (video, sentence, start, length); some segments are too short or overrun the video.
    prop::collection::vec((0usize..4, 0..SENTENCES.len(), 0.0f64..3.5, 0.3f64..2.5), 0..40)
}

fn build(c: &SyntheticCorpus, spec: &[(usize, usize, f64, f64)]) -> Vec<RawTranscript> {
    spec.iter()
        .map(|&(v, s, t0, len)| transcript(c, v, SENTENCES[s], t0, len))
        .collect()
}

fn check_funnel(out: &PipelineOutput, n: usize) {
    let r = &out.report;
    assert_eq!(r.transcripts, n);
    assert_eq!(r.stages.len(), 5);
    assert_eq!(r.stages[0].entered, n);
    for w in r.stages.windows(2) {
        assert_eq!(w[1].entered, w[0].entered - w[0].dropped);
        assert!(w[1].entered <= w[0].entered);
    }
    let drops: usize = r.stages.iter().map(|s| s.dropped).sum();
    assert_eq!(drops + r.kept, n);
    assert_eq!(r.kept, out.kept().count());
    for st in &r.stages {
        assert_eq!(st.kept, st.entered - st.dropped);
        let counted = out.records.iter().filter(|x| x.status == Status::Dropped(st.stage)).count();
        assert_eq!(st.dropped, counted);
    }
}

fn check_short_circuit(out: &PipelineOutput) {
    for r in &out.records {
        if let Status::Dropped(k) = r.status {
            for s in r.annotated_stages() {
                assert!(s <= k, "dropped at {k} but annotated by {s}: {r:?}");
            }
        }
    }
}

fn check_kept(out: &PipelineOutput, cfg: &PipelineConfig) {
    for r in out.kept() {
        assert_eq!(r.quality, Some(1));
        assert_eq!(r.detectable, Some(1));
        let t = r.translated_text.as_deref().unwrap();
        assert!(!t.is_empty());
        assert!(names_present(t, &cfg.names).is_empty(), "{t}");
        assert!(r.alignment_score.unwrap() >= cfg.filter.threshold);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn funnel_is_monotone_and_short_circuits(spec in arb_transcripts()) {
        let c = corpus();
        let cfg = config();
        let out = run(&c, build(&c, &spec), &suite(), &cfg);
        check_funnel(&out, spec.len());
        check_short_circuit(&out);
        check_kept(&out, &cfg);
    }

    #[test]
    fn rerun_on_kept_output_changes_nothing(spec in arb_transcripts()) {
        let c = corpus();
        let cfg = config();
        let s = suite();
        let first = run(&c, build(&c, &spec), &s, &cfg);
        let again = run(&c, first.kept_transcripts(), &s, &cfg);
        prop_assert_eq!(again.report.kept, first.report.kept);
        for (a, b) in first.kept().zip(&again.records) {
            prop_assert!(b.status.is_kept());
            prop_assert_eq!(&a.quality, &b.quality);
            prop_assert_eq!(&a.behaviors, &b.behaviors);
            prop_assert_eq!(&a.detectable, &b.detectable);
            prop_assert_eq!(&a.translated_text, &b.translated_text);
            prop_assert_eq!(a.alignment_score, b.alignment_score);
        }
    }

    #[test]
    fn kept_sets_nest_across_thresholds(scores in prop::collection::vec(-1.0f64..1.0, 1..60)) {
        let c = corpus();
        let texts: Vec<String> = (0..scores.len()).map(|i| format!("monkeys hug {i}")).collect();
        let table = TableScorer {
            scores: texts.iter().cloned().zip(scores.iter().copied()).collect(),
            default: 0.0,
        };
        let s = BackendSuite { image_text_scorer: Arc::new(table), ..suite() };
        let ts: Vec<RawTranscript> = texts.iter().enumerate().map(|(i, t)| transcript(&c, i, t, 0.0, 2.0)).collect();
        let mut kept_sets = Vec::new();
        for th in [0.2, 0.32, 0.5] {
            let cfg = PipelineConfig { filter: FilterConfig { threshold: th, ..Default::default() }, ..config() };
            let out = run(&c, ts.clone(), &s, &cfg);
            let kept: Vec<bool> = out.records.iter().map(|r| r.status.is_kept()).collect();
            for (k, sc) in kept.iter().zip(&scores) {
                prop_assert_eq!(*k, *sc >= th);
            }
            kept_sets.push(kept);
        }
        for w in kept_sets.windows(2) {
            for (lo, hi) in w[0].iter().zip(&w[1]) {
                prop_assert!(!*hi || *lo, "kept at the higher threshold but not the lower");
            }
        }
        // The same nesting through the standalone filter on one record set.
        let cfg = config();
        let mut recs = run(&c, ts, &s, &cfg).records;
        let mut prev: Option<Vec<bool>> = None;
        for th in [0.5, 0.32, 0.2, -1.0] {
            filter_pairs(&mut recs, &FilterConfig { threshold: th, ..Default::default() }).unwrap();
            let kept: Vec<bool> = recs.iter().map(|r| r.status.is_kept()).collect();
            if let Some(p) = &prev {
                prop_assert!(p.iter().zip(&kept).all(|(a, b)| !*a || *b));
            }
            prev = Some(kept);
        }
        prop_assert!(prev.unwrap().iter().all(|k| *k));
    }

    #[test]
    fn disabling_a_stage_only_removes_its_drops(spec in arb_transcripts(), which in 1usize..5) {
        let c = corpus();
        let stage = Stage::ORDER[which];
        let full_cfg = config();
        let mut cut_cfg = config();
        cut_cfg.disabled.insert(stage);
        let full = run(&c, build(&c, &spec), &suite(), &full_cfg);
        let cut = run(&c, build(&c, &spec), &suite(), &cut_cfg);
        prop_assert_eq!(cut.report.stage(stage).dropped, 0);
        prop_assert!(!cut.report.stage(stage).enabled);
        for (a, b) in full.records.iter().zip(&cut.records) {
            let reached = |r: &ethoclip_pipeline::PipelineRecord, s: Stage| match r.status {
                Status::Kept => true,
                Status::Dropped(k) => s <= k,
            };
            if reached(a, Stage::Quality) && reached(b, Stage::Quality) && stage != Stage::Quality {
                prop_assert_eq!(&a.quality, &b.quality);
            }
            if reached(a, Stage::Behavior) && reached(b, Stage::Behavior) && stage != Stage::Behavior {
                prop_assert_eq!(&a.behaviors, &b.behaviors);
            }
            if reached(a, Stage::Translate) && reached(b, Stage::Translate) && stage != Stage::Translate {
                prop_assert_eq!(&a.translated_text, &b.translated_text);
            }
            if stage == Stage::Translate {
                prop_assert!(b.translated_text.is_none());
            }
            if reached(a, Stage::Filter) && reached(b, Stage::Filter) && stage != Stage::Filter && stage != Stage::Translate {
                prop_assert_eq!(a.alignment_score, b.alignment_score);
            }
            // Anything the full run kept, the reduced run keeps too. Without
            // translation the filter scores different text, so that case is exempt.
            if a.status.is_kept() && stage != Stage::Translate {
                prop_assert!(b.status.is_kept());
            }
            if let Status::Dropped(k) = a.status {
                if k != stage {
                    let b_dropped_same = b.status == a.status;
                    let b_dropped_earlier = matches!(b.status, Status::Dropped(j) if j < k);
                    prop_assert!(b_dropped_same || !b_dropped_earlier);
                }
            }
        }
    }

    #[test]
    fn output_per_transcript_is_independent_of_batch(spec in arb_transcripts()) {
        let c = corpus();
        let cfg = config();
        let s = suite();
        let batch = run(&c, build(&c, &spec), &s, &cfg);
        let serial_cfg = PipelineConfig { concurrency: 1, ..config() };
        for (i, one) in build(&c, &spec).into_iter().enumerate() {
            let alone = run(&c, vec![one], &s, &serial_cfg);
            prop_assert_eq!(&alone.records[0], &batch.records[i]);
        }
    }
}

#[test]
fn everything_passes_when_every_gate_passes() {
    let c = corpus();
    let s = BackendSuite {
        image_text_scorer: Arc::new(TableScorer {
            default: 0.9,
            ..Default::default()
        }),
        ..suite()
    };
    let texts = ["The hug is happening again between monkeys.", "Paçoca eats a fruit", "Bento plays"];
    let ts: Vec<RawTranscript> = texts.iter().enumerate().map(|(i, t)| transcript(&c, i, t, 0.5, 2.0)).collect();
    let cfg = config();
    let out = run(&c, ts, &s, &cfg);
    assert_eq!(out.report.kept, texts.len());
    assert_eq!(out.manifest.len(), texts.len());
    assert_eq!(out.records[1].translated_text.as_deref(), Some("The monkey eats a fruit"));
    assert_eq!(out.records[0].behaviors.as_deref(), Some(&["Hug".to_string()][..]));
    check_kept(&out, &cfg);
}

#[test]
fn filter_boundary_through_the_pipeline() {
    let c = corpus();
    let table = TableScorer {
        scores: HashMap::from([("monkeys hug a".to_string(), 0.32), ("monkeys hug b".to_string(), 0.31)]),
        default: 0.0,
    };
    let s = BackendSuite {
        image_text_scorer: Arc::new(table),
        ..suite()
    };
    let ts = vec![
        transcript(&c, 0, "monkeys hug a", 0.0, 2.0),
        transcript(&c, 1, "monkeys hug b", 0.0, 2.0),
    ];
    let out = run(&c, ts, &s, &config());
    assert_eq!(out.records[0].status, Status::Kept);
    assert_eq!(out.records[1].status, Status::Dropped(Stage::Filter));
    assert_eq!(out.records[1].alignment_score, Some(0.31));
}

#[test]
fn quality_zero_carries_no_later_annotations() {
    let c = corpus();
    let out = run(&c, vec![transcript(&c, 0, "We will go after the monkey.", 0.0, 2.0)], &suite(), &config());
    let r = &out.records[0];
    assert_eq!(r.status, Status::Dropped(Stage::Quality));
    assert_eq!(r.quality, Some(0));
    assert!(r.behaviors.is_none() && r.translated_text.is_none() && r.alignment_score.is_none());
}

#[test]
fn backend_failures_are_tallied_not_fatal() {
    let c = corpus();
    let s = BackendSuite {
        quality_judge: Arc::new(Failing(BackendError::Protocol("garbled".into()))),
        ..suite()
    };
    let ts: Vec<RawTranscript> = (0..5).map(|i| transcript(&c, i, "monkeys hug", 0.0, 2.0)).collect();
    let out = run(&c, ts, &s, &config());
    assert_eq!(out.report.stage(Stage::Quality).dropped, 5);
    assert_eq!(out.report.failures["quality.protocol"], 5);
    assert!(out.records.iter().all(|r| r.reason.as_deref().unwrap().contains("garbled")));

    let s = BackendSuite {
        image_text_scorer: Arc::new(Failing(BackendError::Transport("scorer down".into()))),
        ..suite()
    };
    let out = run(&c, vec![transcript(&c, 0, "monkeys hug", 0.0, 2.0)], &s, &config());
    assert_eq!(out.records[0].status, Status::Dropped(Stage::Filter));
    assert_eq!(out.report.failures["filter.transport"], 1);
}

#[test]
fn labels_outside_the_ethogram_are_discarded() {
    let c = corpus();
    let classifier = ScriptedClassifier {
        replies: HashMap::from([
            ("a".to_string(), vec!["Dancing".to_string(), "Hug".to_string()]),
            ("b".to_string(), vec!["Dancing".to_string()]),
        ]),
    };
    let s = BackendSuite {
        behavior_classifier: Arc::new(classifier),
        image_text_scorer: Arc::new(TableScorer {
            default: 1.0,
            ..Default::default()
        }),
        ..suite()
    };
    let ts = vec![transcript(&c, 0, "a", 0.0, 2.0), transcript(&c, 1, "b", 0.0, 2.0)];
    let out = run(&c, ts, &s, &config());
    assert_eq!(out.records[0].behaviors.as_deref(), Some(&["Hug".to_string()][..]));
    assert!(out.records[0].status.is_kept());
    assert_eq!(out.records[1].status, Status::Dropped(Stage::Behavior));
    assert_eq!(out.records[1].detectable, Some(0));
    assert_eq!(out.report.failures["behavior.unknown_label"], 2);
}

#[test]
fn end_to_end_from_videos_writes_a_valid_manifest() {
    let c = corpus();
    let mut scripts = std::collections::BTreeMap::new();
    for (i, a) in c.assets.iter().enumerate() {
        scripts.insert(
            a.id.clone(),
            vec![
                Segment {
                    start: 2.0,
                    end: 4.0,
                    text: format!("Paçoca hugs Bento, take {i}"),
                },
                Segment {
                    start: 0.0,
                    end: 1.5,
                    text: "We shall try to observe something.".into(),
                },
                Segment {
                    start: 1.0,
                    end: 9.0,
                    text: "the monkeys play".into(),
                },
            ],
        );
    }
    let s = BackendSuite {
        image_text_scorer: Arc::new(HashScorer),
        ..BackendSuite::fakes(ScriptedTranscriber::new(scripts), &Ethogram::capuchin())
    };
    let mut cfg = config();
    cfg.filter.threshold = -1.0;
    cfg.test_videos.insert(c.assets[0].id.clone());
    let mut failing = c.assets.clone();
    failing.push(ethoclip::corpus::VideoAsset {
        id: "broken".into(),
        ..c.assets[0].clone()
    });
    let out = run_pipeline(&c.assets, &c.source, &s, &Ethogram::capuchin(), &cfg).unwrap();
    let n = c.assets.len();
    assert_eq!(out.report.videos, n);
    assert_eq!(out.report.transcripts, 3 * n);
    // Ordered by start time within each video.
    assert_eq!(out.records[0].transcript.t_init, 0.0);
    assert_eq!(out.report.stage(Stage::Transcribe).dropped, n);
    assert_eq!(out.report.stage(Stage::Quality).dropped, n);
    assert_eq!(out.report.kept, n);
    check_funnel(&out, 3 * n);
    check_kept(&out, &cfg);

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("manifest.jsonl");
    write_manifest(&out.manifest, &path).unwrap();
    let back = read_manifest(&path).unwrap();
    assert_eq!(back, out.manifest);
    assert_eq!(back.iter().filter(|m| m.split == Split::Test).count(), 1);
    for m in &back {
        assert!(m.text.starts_with("The monkey hugs the monkey"), "{}", m.text);
        assert_eq!(m.behaviors, ["Hug"]);
        assert!(m.extra["source_text"].as_str().unwrap().contains("Paçoca"));
    }

    let json: serde_json::Value = serde_json::from_str(&out.report.to_json()).unwrap();
    let st = &json["stages"][1];
    assert_eq!(st["stage"], "quality");
    assert!(st["entered"].is_u64() && st["dropped"].is_u64() && st["kept"].is_u64());

    let s = BackendSuite {
        transcriber: Arc::new(Failing(BackendError::Transport("asr down".into()))),
        ..s
    };
    let out = run_pipeline(&failing, &c.source, &s, &Ethogram::capuchin(), &cfg).unwrap();
    assert_eq!(out.report.videos_failed, n + 1);
    assert_eq!(out.report.failures["transcribe.transport"], n + 1);
    assert_eq!(out.report.transcripts, 0);
}
