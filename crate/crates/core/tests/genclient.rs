use image::{Rgb, RgbImage};
use lookmark::clock::FixedClock;
use lookmark::genclient::{
    generate_report, run_batch, CallError, ChatAdapter, ErrorClass, GenerationCache, ModelEndpoint,
    OpenAiChatAdapter,
};
use lookmark::promptkit::{build_prompt, PromptTemplate, DEFAULT_TEMPLATE};
use lookmark::{
    BoundingBox, DictatedReport, Fixation, MethodFlags, PromptBundle, RenderSpec, StudyRecord,
};
use serde_json::{json, Value};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

fn bundle(study: &str, flags: MethodFlags) -> PromptBundle {
    let record = StudyRecord {
        study_id: study.into(),
        image_path: "x.png".into(),
        width: 32,
        height: 32,
        boxes: vec![BoundingBox::new(4.0, 4.0, 20.0, 20.0, "Nodule")],
        fixations: vec![Fixation::new(10.0, 10.0, 0.4, 0)],
        references: vec![DictatedReport {
            text: "Nodule.".into(),
            source_id: "r".into(),
        }],
    };
    let image = RgbImage::from_pixel(32, 32, Rgb([100, 100, 100]));
    let template = PromptTemplate::parse(DEFAULT_TEMPLATE).unwrap();
    build_prompt(
        &record,
        &image,
        flags,
        &[],
        &template,
        &RenderSpec::default(),
    )
    .unwrap()
}

fn clock() -> FixedClock {
    FixedClock::parse("2025-03-01T12:00:00Z").unwrap()
}

/// Replays a fixed list of outcomes and keeps every request body.
struct Scripted {
    script: Mutex<Vec<Result<String, CallError>>>,
    seen: Mutex<Vec<Value>>,
}

impl Scripted {
    fn new(mut script: Vec<Result<String, CallError>>) -> Self {
        script.reverse();
        Self {
            script: Mutex::new(script),
            seen: Mutex::new(Vec::new()),
        }
    }
}

impl ChatAdapter for Scripted {
    fn send(&self, _ep: &ModelEndpoint, body: &Value) -> Result<String, CallError> {
        self.seen.lock().unwrap().push(body.clone());
        self.script
            .lock()
            .unwrap()
            .pop()
            .unwrap_or_else(|| Ok("Findings: none.".into()))
    }
}

#[test]
fn temperature_refusal_falls_back_once() {
    let ep = ModelEndpoint::named("CXR-LLaVA");
    let adapter = Scripted::new(vec![Err(CallError::new(
        ErrorClass::TemperatureRejected,
        "temperature must be > 0",
    ))]);
    let rec = generate_report(
        &ep,
        &adapter,
        &bundle("s1", MethodFlags::BASELINE),
        &clock(),
    )
    .unwrap();
    assert_eq!(rec.attempts, 2);
    assert_eq!(rec.decode.temperature, 0.1);
    assert_eq!(rec.decode.max_new_tokens, 512);
    let seen = adapter.seen.lock().unwrap();
    let temps: Vec<f64> = seen
        .iter()
        .map(|b| b["temperature"].as_f64().unwrap())
        .collect();
    assert_eq!(temps, [0.0, 0.1]);
    assert!(seen.iter().all(|b| b["max_tokens"] == 512));
}

#[test]
fn second_refusal_is_a_failure() {
    let ep = ModelEndpoint::named("m");
    let refuse = || Err(CallError::new(ErrorClass::TemperatureRejected, "no"));
    let adapter = Scripted::new(vec![refuse(), refuse()]);
    let f = generate_report(
        &ep,
        &adapter,
        &bundle("s1", MethodFlags::BASELINE),
        &clock(),
    )
    .unwrap_err();
    assert_eq!(f.error_class, ErrorClass::TemperatureRejected);
    assert_eq!(f.attempts, 2);
}

#[test]
fn transient_errors_retry_then_give_up() {
    let ep = ModelEndpoint {
        max_retries: 2,
        ..ModelEndpoint::named("m")
    };
    let timeout = || Err(CallError::new(ErrorClass::Timeout, "slow"));
    let adapter = Scripted::new(vec![timeout(), timeout(), timeout(), Ok("late".into())]);
    let f = generate_report(
        &ep,
        &adapter,
        &bundle("s1", MethodFlags::BASELINE),
        &clock(),
    )
    .unwrap_err();
    assert_eq!(f.error_class, ErrorClass::Timeout);
    assert_eq!(f.attempts, 3);

    let adapter = Scripted::new(vec![Err(CallError::new(ErrorClass::Auth, "bad key"))]);
    let f = generate_report(
        &ep,
        &adapter,
        &bundle("s1", MethodFlags::BASELINE),
        &clock(),
    )
    .unwrap_err();
    assert_eq!((f.error_class, f.attempts), (ErrorClass::Auth, 1));
}

#[test]
fn batch_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cache = GenerationCache::open(dir.path()).unwrap();
    let ep = ModelEndpoint::named("m");
    let bundles: Vec<PromptBundle> = ["s2", "s1", "s3"]
        .iter()
        .flat_map(|s| MethodFlags::ALL[..4].iter().map(move |f| bundle(s, *f)))
        .collect();
    let adapter = Scripted::new(vec![Err(CallError::new(
        ErrorClass::Rejection,
        "bad image",
    ))]);
    let first = run_batch(&bundles, &ep, &adapter, &cache, 3, &clock()).unwrap();
    assert_eq!(
        (first.generated, first.cache_hits, first.failures.len()),
        (12, 0, 1)
    );
    assert_eq!(first.records.len(), 11);
    let order: Vec<(String, String)> = first
        .records
        .iter()
        .map(|r| (r.study_id.clone(), r.flags.label()))
        .collect();
    let mut sorted = order.clone();
    sorted.sort_by_key(|(s, l)| {
        (
            s.clone(),
            MethodFlags::ALL.iter().position(|f| &f.label() == l),
        )
    });
    assert_eq!(order, sorted);

    let again = run_batch(&bundles, &ep, &adapter, &cache, 3, &clock()).unwrap();
    assert_eq!(
        (again.generated, again.cache_hits, again.failures.len()),
        (1, 11, 0)
    );
    let third = run_batch(&bundles, &ep, &adapter, &cache, 3, &clock()).unwrap();
    assert_eq!((third.generated, third.cache_hits), (0, 12));
    assert_eq!(adapter.seen.lock().unwrap().len(), 13);

    let hotter = ModelEndpoint {
        temperature_policy: vec![0.1],
        ..ep.clone()
    };
    let other = run_batch(&bundles, &hotter, &adapter, &cache, 3, &clock()).unwrap();
    assert_eq!(
        other.generated, 12,
        "decode parameters are part of the cache key"
    );
}

struct MockServer {
    base: String,
    bodies: Arc<Mutex<Vec<Value>>>,
}

/// Answers each request with the next scripted (status, body); `None`
/// reads the request and never answers.
fn mock_server(script: Vec<Option<(u16, String)>>) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = bodies.clone();
    std::thread::spawn(move || {
        let mut held = Vec::new();
        for (stream, step) in listener.incoming().zip(script) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.trim().is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            seen.lock()
                .unwrap()
                .push(serde_json::from_slice(&body).unwrap());
            match step {
                Some((status, text)) => {
                    let resp = format!(
                        "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                        text.len()
                    );
                    stream.write_all(resp.as_bytes()).unwrap();
                }
                None => held.push(stream),
            }
        }
        std::thread::sleep(Duration::from_secs(5));
    });
    MockServer { base, bodies }
}

fn completion(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

#[test]
fn http_endpoint_temperature_fallback() {
    let srv = mock_server(vec![
        Some((
            400,
            json!({"error": "temperature 0 is not supported"}).to_string(),
        )),
        Some((200, completion("Findings: small nodule."))),
    ]);
    let ep = ModelEndpoint {
        base_url: srv.base.clone(),
        model_id: Some("wire-name".into()),
        ..ModelEndpoint::named("LLaVA-OV")
    };
    let rec = generate_report(
        &ep,
        &OpenAiChatAdapter,
        &bundle("s1", MethodFlags::new(true, true, false)),
        &clock(),
    )
    .unwrap();
    assert_eq!(rec.output_text, "Findings: small nodule.");
    assert_eq!((rec.attempts, rec.decode.temperature), (2, 0.1));
    let bodies = srv.bodies.lock().unwrap();
    assert_eq!(bodies.len(), 2);
    for b in bodies.iter() {
        assert_eq!(b["max_tokens"], 512);
        assert_eq!(b["model"], "wire-name");
        let user = b["messages"].as_array().unwrap().last().unwrap();
        assert!(user["content"][0]["text"]
            .as_str()
            .unwrap()
            .contains("Fixation Data: [Abnormality bounding box: Nodule"));
        assert!(user["content"][1]["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png;base64,"));
    }
    assert_eq!(bodies[0]["temperature"], 0.0);
    assert_eq!(bodies[1]["temperature"], 0.1);
}

#[test]
fn http_endpoint_timeouts_exhaust_retries() {
    let srv = mock_server(vec![None, None, None]);
    let ep = ModelEndpoint {
        base_url: srv.base.clone(),
        request_timeout_s: 1,
        max_retries: 2,
        ..ModelEndpoint::named("m")
    };
    let f = generate_report(
        &ep,
        &OpenAiChatAdapter,
        &bundle("s1", MethodFlags::BASELINE),
        &clock(),
    )
    .unwrap_err();
    assert_eq!(f.error_class, ErrorClass::Timeout);
    assert_eq!(f.attempts, 3);
    assert_eq!(srv.bodies.lock().unwrap().len(), 3);
}

#[test]
fn http_status_classes() {
    let srv = mock_server(vec![
        Some((401, "{}".into())),
        Some((200, "not json".into())),
    ]);
    let ep = ModelEndpoint {
        base_url: srv.base.clone(),
        ..ModelEndpoint::named("m")
    };
    let b = bundle("s1", MethodFlags::BASELINE);
    assert_eq!(
        generate_report(&ep, &OpenAiChatAdapter, &b, &clock())
            .unwrap_err()
            .error_class,
        ErrorClass::Auth
    );
    assert_eq!(
        generate_report(&ep, &OpenAiChatAdapter, &b, &clock())
            .unwrap_err()
            .error_class,
        ErrorClass::Malformed
    );
}
