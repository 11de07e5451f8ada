use std::path::Path;

use clap::Parser;
use ethoclip_cli::{run, Cli};
use serde_json::{json, Value};

fn cli(args: &[&str]) -> anyhow::Result<Value> {
    let mut full = vec!["ethoclip"];
    full.extend_from_slice(args);
    run(Cli::try_parse_from(full)?)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_vec(v).unwrap()).unwrap();
}

#[test]
fn synth_train_eval_index_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    write(&d.join("spec.json"), &json!({"clips_per_archetype": 6, "test_per_archetype": 3, "frame_size": 16}));
    let s = cli(&["corpus", "synth", "--out", p(&corpus), "--spec", p(&d.join("spec.json")), "--seed", "3"]).unwrap();
    assert_eq!(s["records"], 24);
    assert_eq!(s["test"], 12);

    let manifest = corpus.join("manifest.jsonl");
    let frames = corpus.join("frames");
    let v = cli(&["corpus", "validate", "--manifest", p(&manifest), "--source", p(&frames)]).unwrap();
    assert_eq!(v["behaviors"]["Hug"], 6);

    let model = json!({"embed_dim": 16, "encoder_width": 16, "max_text_len": 16, "frame_height": 16,
        "frame_width": 16, "vision_layers": 2, "text_layers": 2, "attention_heads": 2, "mlp_ratio": 2});
    write(&d.join("model.json"), &model);
    write(&d.join("train.json"), &json!({"epochs": 2, "grad_accumulation_steps": 1, "weight_decay": 0.01}));
    let ex = cli(&["corpus", "extract", "--manifest", p(&manifest), "--source", p(&frames), "--out", p(&d.join("montages")),
        "--model-config", p(&d.join("model.json"))]).unwrap();
    assert_eq!(ex["clips"], 24);
    let png = image::open(std::fs::read_dir(d.join("montages")).unwrap().next().unwrap().unwrap().path()).unwrap();
    assert_eq!((png.width(), png.height()), (16 * 8, 16));

    let base = d.join("base");
    let b = cli(&["train", "--full", "--manifest", p(&manifest), "--source", p(&frames), "--frames", "8",
        "--model-config", p(&d.join("model.json")), "--config", p(&d.join("train.json")), "--out", p(&base)]).unwrap();
    assert!(b["final_loss"].as_f64().unwrap().is_finite());
    let base_ckpt = base.join("final.ckpt");

    let ft = d.join("ft");
    let train_cfg = d.join("train.json");
    let lora = |out: &Path, frames_per_clip: &str| {
        cli(&["train", "--manifest", p(&manifest), "--source", p(&frames), "--frames", frames_per_clip,
            "--base", p(&base_ckpt), "--rank", "2", "--placement", "vertical",
            "--config", p(&train_cfg), "--out", p(out)])
    };
    let one = lora(&ft, "8").unwrap();
    let history: Value = serde_json::from_slice(&std::fs::read(ft.join("history.json")).unwrap()).unwrap();
    assert_eq!(history.as_array().unwrap().len(), one["updates"].as_u64().unwrap() as usize);
    let err = lora(&d.join("bad"), "16").unwrap_err();
    assert!(err.to_string().contains("8-frame"), "{err}");

    let ckpt = ft.join("final.ckpt");
    let r = cli(&["eval", "retrieval", "--manifest", p(&manifest), "--source", p(&frames), "--checkpoint", p(&ckpt)]).unwrap();
    for k in [1, 2, 3, 5, 10] {
        let h = r["hits"][format!("Hits@{k}")].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&h));
    }
    assert_eq!(r["N"], 12);
    assert_eq!(r["hits"]["Hits@10"].as_f64().unwrap() >= r["hits"]["Hits@1"].as_f64().unwrap(), true);
    let z = cli(&["eval", "zeroshot", "--manifest", p(&manifest), "--source", p(&frames), "--checkpoint", p(&ckpt)]).unwrap();
    for key in ["Top1", "Top5", "Top10"] {
        assert!(z[key].is_number(), "{key} missing from {z}");
    }

    let idx = d.join("clips.idx");
    let built = cli(&["index", "build", "--manifest", p(&manifest), "--source", p(&frames), "--checkpoint", p(&ckpt),
        "--out", p(&idx)]).unwrap();
    assert_eq!(built["entries"], 24);
    let ins = cli(&["index", "inspect", "--index", p(&idx), "--entries"]).unwrap();
    assert_eq!(ins["count"], 24);
    assert_eq!(ins["fingerprint"], built["fingerprint"]);
    assert_eq!(ins["entries"].as_array().unwrap().len(), 24);

    // Serving the index with the base checkpoint is refused before binding.
    let err = cli(&["serve", "--index", p(&idx), "--checkpoint", p(&base_ckpt), "--bind", "127.0.0.1:0"]).unwrap_err();
    assert!(err.to_string().contains("checkpoint"), "{err}");

    // The sweep CLI runs a one-cell grid end to end.
    write(&d.join("grid.json"), &json!({"ranks": [1], "placements": ["upper"],
        "train": {"epochs": 1, "grad_accumulation_steps": 1}}));
    let sw = cli(&["sweep", "--grid", p(&d.join("grid.json")), "--manifest", p(&manifest), "--source", p(&frames),
        "--base", p(&base_ckpt)]).unwrap();
    assert_eq!(sw["cells"].as_array().unwrap().len(), 1);
    assert_eq!(sw["best_retrieval"], 0);
}

#[test]
fn resume_continues_where_a_run_stopped() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    write(&d.join("spec.json"), &json!({"clips_per_archetype": 4, "test_per_archetype": 1, "frame_size": 16}));
    cli(&["corpus", "synth", "--out", p(&corpus), "--spec", p(&d.join("spec.json"))]).unwrap();
    let manifest = corpus.join("manifest.jsonl");
    let frames = corpus.join("frames");
    write(&d.join("model.json"), &json!({"embed_dim": 8, "encoder_width": 8, "max_text_len": 12, "frame_height": 16,
        "frame_width": 16, "vision_layers": 1, "text_layers": 1, "attention_heads": 2, "mlp_ratio": 2}));
    let (model_cfg, train_cfg) = (d.join("model.json"), d.join("t.json"));
    write(&train_cfg, &json!({"epochs": 3, "grad_accumulation_steps": 1, "batch_size": 4}));
    let train = |out: &Path, resume: bool| {
        let mut args = vec!["train", "--full", "--manifest", p(&manifest), "--source", p(&frames), "--frames", "8",
            "--model-config", p(&model_cfg), "--config", p(&train_cfg), "--out", p(out)];
        if resume {
            args.push("--resume");
        }
        cli(&args).unwrap()
    };
    let whole = train(&d.join("whole"), false);
    assert_eq!(whole["updates"], 9);
    // Stopping after four updates leaves a bundle and no final checkpoint.
    let part = d.join("part");
    let first = cli(&["train", "--full", "--manifest", p(&manifest), "--source", p(&frames), "--frames", "8",
        "--model-config", p(&d.join("model.json")), "--config", p(&d.join("t.json")), "--out", p(&part),
        "--max-updates", "4"]).unwrap();
    assert_eq!(first["done"], false);
    assert!(!part.join("final.ckpt").exists());
    let h: Vec<Value> = serde_json::from_slice(&std::fs::read(part.join("history.json")).unwrap()).unwrap();
    assert_eq!(h.len(), 4);
    let resumed = train(&part, true);
    assert_eq!(resumed["done"], true);
    assert_eq!(resumed["updates"], 9);
    let a = std::fs::read(d.join("whole/final.ckpt")).unwrap();
    let b = std::fs::read(part.join("final.ckpt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pipeline_run_with_fakes_writes_manifest_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    write(&d.join("spec.json"), &json!({"clips_per_archetype": 2, "test_per_archetype": 1, "frame_size": 8}));
    cli(&["corpus", "synth", "--out", p(&corpus), "--spec", p(&d.join("spec.json"))]).unwrap();
    let assets: Vec<Value> = serde_json::from_slice(&std::fs::read(corpus.join("assets.json")).unwrap()).unwrap();
    let first = assets[0]["id"].as_str().unwrap().to_string();
    let second = assets[1]["id"].as_str().unwrap().to_string();
    write(&d.join("scripts.json"), &json!({
        first.clone(): [{"start": 0.0, "end": 2.0, "text": "The monkeys hug each other"},
                        {"start": 2.0, "end": 3.0, "text": "we shall go home now"}],
        second.clone(): [{"start": 0.5, "end": 3.5, "text": "one of them is chasing the other"}],
    }));
    write(&d.join("cfg.json"), &json!({"filter": {"threshold": -1.0}, "test_videos": [second.clone()]}));
    let out = d.join("pairs.jsonl");
    let report = cli(&["pipeline", "run", "--assets", p(&corpus.join("assets.json")), "--source", p(&corpus.join("frames")),
        "--transcripts", p(&d.join("scripts.json")), "--config", p(&d.join("cfg.json")), "--out", p(&out),
        "--report", p(&d.join("report.json"))]).unwrap();
    assert_eq!(report["transcripts"], 3);
    assert_eq!(report["kept"], 2);
    let recs = ethoclip::corpus::read_manifest(&out).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].behaviors, vec!["Hug".to_string()]);
    assert_eq!(recs[1].behaviors, vec!["Chase".to_string()]);
    assert_eq!(recs[1].split, ethoclip::corpus::Split::Test);
    let on_disk: Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(on_disk, report);

    // Fake backends without scripted transcripts are a usage error.
    assert!(cli(&["pipeline", "run", "--assets", p(&corpus.join("assets.json")), "--source", p(&corpus.join("frames")),
        "--out", p(&out)]).is_err());
}

#[test]
fn usage_errors_are_rejected_by_the_parser() {
    assert!(Cli::try_parse_from(["ethoclip", "train", "--manifest", "m", "--source", "s", "--frames", "12", "--full", "--out", "o"]).is_err());
    assert!(Cli::try_parse_from(["ethoclip", "train", "--manifest", "m", "--source", "s", "--frames", "8", "--out", "o"]).is_err());
    assert!(Cli::try_parse_from(["ethoclip", "train", "--manifest", "m", "--source", "s", "--frames", "8", "--out", "o",
        "--base", "b", "--rank", "4", "--placement", "sideways"]).is_err());
    assert!(Cli::try_parse_from(["ethoclip", "train", "--manifest", "m", "--source", "s", "--frames", "16", "--out", "o",
        "--base", "b", "--rank", "4", "--placement", "Vertical"]).is_ok());
}
