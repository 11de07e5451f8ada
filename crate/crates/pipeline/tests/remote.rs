use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use ethoclip::corpus::VideoAsset;
use ethoclip::ethogram::Ethogram;
use ethoclip_pipeline::backend::{BackendError, BehaviorClassifier, ImageTextScorer, QualityJudge, Transcriber};
use ethoclip_pipeline::prompts::PromptSet;
use ethoclip_pipeline::remote::{
    AsrClient, ChatClient, HttpService, Limiter, LlmClassifier, LlmJudge, RemoteScorer, RetryPolicy,
};
use serde_json::{json, Value};

/// Serves canned `(status, body)` replies in order and records request bodies.
struct Mock {
    url: String,
    requests: Arc<Mutex<Vec<(String, String, Value)>>>,
}

fn mock(replies: Vec<(u16, String)>) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let log = requests.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
            let (mut len, mut auth) = (0, String::new());
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                let lower = h.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = h["authorization:".len()..].trim().to_string();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let req: Value = serde_json::from_slice(&buf).unwrap_or(Value::Null);
            log.lock().unwrap().push((path, auth, req));
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    Mock { url, requests }
}

fn service(url: &str, key: Option<&str>) -> HttpService {
    let retry = RetryPolicy {
        attempts: 3,
        base_delay: Duration::from_millis(5),
        timeout: Duration::from_secs(5),
    };
    HttpService::new(url, key.map(String::from), retry, Arc::new(Limiter::new(2))).unwrap()
}

fn chat_reply(content: &str) -> (u16, String) {
    (200, json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string())
}

#[test]
fn retries_transport_errors_then_succeeds() {
    let m = mock(vec![(503, "{}".into()), (502, "{}".into()), chat_reply("1")]);
    let judge = LlmJudge {
        chat: ChatClient {
            service: service(&m.url, Some("secret")),
            model: "judge-model".into(),
        },
        template: PromptSet::default().quality,
    };
    assert_eq!(judge.score("The hug is happening again between monkeys.").unwrap(), 1);
    let reqs = m.requests.lock().unwrap();
    assert_eq!(reqs.len(), 3);
    let (path, auth, body) = &reqs[2];
    assert_eq!(path, "/chat/completions");
    assert_eq!(auth, "Bearer secret");
    assert_eq!(body["model"], "judge-model");
    let prompt = body["messages"][0]["content"].as_str().unwrap();
    assert!(prompt.contains("The hug is happening again between monkeys."));
}

#[test]
fn gives_up_after_three_attempts() {
    let m = mock(vec![(503, "{}".into()), (503, "{}".into()), (503, "{}".into())]);
    let err = service(&m.url, None).post("score", &json!({})).unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)), "{err}");
    assert_eq!(m.requests.lock().unwrap().len(), 3);
}

#[test]
fn unreachable_service_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = service(&format!("http://127.0.0.1:{port}"), None).post("x", &json!({})).unwrap_err();
    assert!(err.is_retryable());
}

#[test]
fn malformed_replies_are_protocol_errors_without_retry() {
    let m = mock(vec![chat_reply("perhaps"), (200, "not json".into()), (400, "bad".into())]);
    let chat = ChatClient {
        service: service(&m.url, None),
        model: "m".into(),
    };
    let judge = LlmJudge {
        chat: chat.clone(),
        template: PromptSet::default().quality,
    };
    assert!(matches!(judge.score("x"), Err(BackendError::Protocol(_))));
    assert!(matches!(chat.complete("x"), Err(BackendError::Protocol(_))));
    assert!(matches!(chat.complete("x"), Err(BackendError::Protocol(_))));
    assert_eq!(m.requests.lock().unwrap().len(), 3);
}

#[test]
fn classifier_prompt_embeds_the_ethogram() {
    let m = mock(vec![chat_reply("[\"Hug\", \"Dancing\"]")]);
    let c = LlmClassifier {
        chat: ChatClient {
            service: service(&m.url, None),
            model: "m".into(),
        },
        template: PromptSet::default().behavior,
    };
    let e = Ethogram::capuchin();
    assert_eq!(c.classify("they hug", &e).unwrap(), vec!["Hug", "Dancing"]);
    let reqs = m.requests.lock().unwrap();
    let prompt = reqs[0].2["messages"][0]["content"].as_str().unwrap();
    assert!(prompt.contains("- Nose Wipe: Touches own nose.") && prompt.contains("they hug"));
}

#[test]
fn transcription_and_scoring_protocols() {
    let m = mock(vec![
        (200, json!({"segments": [{"start": 0.5, "end": 1.5, "text": "olha o abraço"}]}).to_string()),
        (415, "{\"error\": \"cannot decode\"}".into()),
        (200, json!({"scores": [0.1, 0.4]}).to_string()),
    ]);
    let asr = AsrClient {
        service: service(&m.url, None),
    };
    let video = VideoAsset {
        id: "v1".into(),
        path: "clips/v1.mp4".into(),
        fps: 8.0,
        duration: 4.0,
        total_frames: 32,
    };
    let segs = asr.transcribe(&video, "pt").unwrap();
    assert_eq!(segs.len(), 1);
    assert_eq!(segs[0].text, "olha o abraço");
    assert!(matches!(asr.transcribe(&video, "pt"), Err(BackendError::Input(_))));

    let scorer = RemoteScorer {
        service: service(&m.url, None),
    };
    let frames = vec![image::RgbImage::new(4, 4); 2];
    assert_eq!(scorer.score_frames(&frames, "monkeys").unwrap(), vec![0.1, 0.4]);
    let reqs = m.requests.lock().unwrap();
    assert_eq!(reqs[0].0, "/transcriptions");
    assert_eq!(reqs[0].2["language"], "pt");
    assert_eq!(reqs[2].0, "/score");
    assert_eq!(reqs[2].2["images"].as_array().unwrap().len(), 2);
}
