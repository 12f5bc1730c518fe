use std::net::SocketAddr;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use dve_core::io::{decode_label_map, write_map3d, write_volume, BankEntry};
use dve_core::map3d::MapBuilder;
use dve_core::synth::{self, to_f32};
use dve_core::{
    classify_argmax, cosine_similarity, DenseEmbeddingMap, Dtype, EmbeddingBank, EmbeddingVector, ProbeWeights,
    ReferenceSet, IGNORE_LABEL,
};
use dve_service::handlers::Stats;
use dve_service::{
    embed_prompt, handle_query, handle_segment, query_with_vectors, router, AppState, EmbedderConfig, QueryArtifact,
    QueryRequest, SegmentMode, SegmentRequest, ServiceError, Session, SessionStore,
};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn ev(v: &[f32]) -> EmbeddingVector {
    EmbeddingVector::new(v.to_vec()).unwrap()
}

fn bank(dim: usize, entries: &[(&str, Vec<f32>)]) -> EmbeddingBank {
    EmbeddingBank::new(
        dim,
        entries
            .iter()
            .map(|(n, v)| BankEntry {
                name: n.to_string(),
                vector: ev(v),
            })
            .collect(),
    )
    .unwrap()
}

/// Provider stub: `/embed` answers with a vector derived from the prompt length,
/// `/wrong-dim` answers with 512 values, `/slow` never answers in time.
async fn stub_provider(dim: usize) -> SocketAddr {
    let app = Router::new()
        .route(
            "/embed",
            post(move |Json(body): Json<Value>| async move {
                let n = body["prompt"].as_str().unwrap().len();
                let mut v = vec![0.0f32; dim];
                v[n % dim] = 1.0;
                Json(json!({"dim": dim, "vector": v}))
            }),
        )
        .route(
            "/wrong-dim",
            post(|| async { Json(json!({"dim": 512, "vector": vec![0.5f32; 512]})) }),
        )
        .route(
            "/slow",
            post(|| async {
                tokio::time::sleep(Duration::from_secs(5)).await;
                Json(json!({}))
            }),
        );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    addr
}

fn external(addr: SocketAddr, path: &str, timeout_ms: u64) -> EmbedderConfig {
    EmbedderConfig::external(format!("http://{addr}{path}"), timeout_ms).unwrap()
}

#[tokio::test]
async fn bank_hits_skip_the_network() {
    let b = bank(2, &[("chair", vec![1.0, 0.0]), ("chair", vec![0.0, 1.0]), ("desk", vec![1.0, 1.0])]);
    // port 9 on localhost is not listening; a network call would fail
    let cfg = EmbedderConfig::external("http://127.0.0.1:9/embed", 200).unwrap();
    let client = reqwest::Client::new();
    let v = embed_prompt("chair", &cfg, &b, &client).await.unwrap();
    assert_eq!(v, vec![ev(&[1.0, 0.0]), ev(&[0.0, 1.0])]);

    let miss = embed_prompt("lamp", &EmbedderConfig::BankOnly, &b, &client).await;
    assert!(matches!(miss, Err(ServiceError::NoEmbedderConfigured(_))));
    assert!(matches!(
        embed_prompt("", &EmbedderConfig::BankOnly, &b, &client).await,
        Err(ServiceError::EmptyPrompt)
    ));
    assert!(matches!(
        embed_prompt("lamp", &cfg, &b, &client).await,
        Err(ServiceError::ProviderUnreachable(_))
    ));
}

#[tokio::test]
async fn provider_protocol() {
    let addr = stub_provider(768).await;
    let b = bank(768, &[]);
    let client = reqwest::Client::new();
    let v = embed_prompt("lamp", &external(addr, "/embed", 2000), &b, &client).await.unwrap();
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].as_slice()[4], 1.0);

    let wrong = embed_prompt("lamp", &external(addr, "/wrong-dim", 2000), &b, &client).await;
    assert!(matches!(wrong, Err(ServiceError::DimMismatch { expected: 768, found: 512 })));

    let slow = embed_prompt("lamp", &external(addr, "/slow", 100), &b, &client).await;
    assert!(matches!(slow, Err(ServiceError::ProviderTimeout(100))));

    let missing = embed_prompt("lamp", &external(addr, "/nope", 2000), &b, &client).await;
    assert!(matches!(missing, Err(ServiceError::BadProviderResponse(_))));

    assert!(EmbedderConfig::external("  ", 100).is_err());
}

#[tokio::test]
async fn query_examples() {
    let client = reqwest::Client::new();
    let b = bank(3, &[("chair", vec![0.0, 0.6, 0.8])]);
    let s = Session::new(b, EmbedderConfig::BankOnly)
        .with_volume("one", DenseEmbeddingMap::new(1, 1, 3, vec![0.0, 0.6, 0.8]).unwrap(), None)
        .unwrap()
        .with_volume(
            "ortho",
            DenseEmbeddingMap::new(1, 2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.8, -0.6]).unwrap(),
            None,
        )
        .unwrap();
    let req = |target: &str| QueryRequest {
        target: target.into(),
        prompt: "chair".into(),
        top_k: None,
    };
    let QueryArtifact::Image(img) = handle_query(&s, &req("one"), &client).await.unwrap() else {
        panic!("image expected")
    };
    assert_eq!(
        img.stats,
        Stats {
            min: 1.0,
            max: 1.0,
            mean: 1.0
        }
    );
    assert_eq!(img.pgm, b"P5\n1 1\n255\n\xff");

    let QueryArtifact::Image(img) = handle_query(&s, &req("ortho"), &client).await.unwrap() else {
        panic!("image expected")
    };
    assert_eq!(
        img.stats,
        Stats {
            min: 0.0,
            max: 0.0,
            mean: 0.0
        }
    );

    assert!(matches!(
        handle_query(&s, &req("nope"), &client).await,
        Err(ServiceError::UnknownImage(_))
    ));
    assert!(matches!(
        handle_query(&s, &req("map"), &client).await,
        Err(ServiceError::NoMapLoaded)
    ));
}

#[tokio::test]
async fn image_query_matches_pairwise_cosine() {
    let mut rng = synth::rng(11);
    let vol = synth::random_volume(&mut rng, 4, 4, 6);
    let q = to_f32(&synth::random_unit(&mut rng, 6));
    let s = Session::new(bank(6, &[("q", q.clone())]), EmbedderConfig::BankOnly)
        .with_volume("img", vol.clone(), None)
        .unwrap();
    let req = QueryRequest {
        target: "img".into(),
        prompt: "q".into(),
        top_k: None,
    };
    let QueryArtifact::Image(img) = handle_query(&s, &req, &reqwest::Client::new()).await.unwrap() else {
        panic!("image expected")
    };
    for p in 0..16 {
        let direct = cosine_similarity(&ev(vol.pixel(p)), &ev(&q)).unwrap();
        assert!((img.similarities[p] - direct).abs() <= 1e-6);
    }
}

#[test]
fn map_query_ranks_and_truncates() {
    let mut b = MapBuilder::new(1.0, 2).unwrap();
    b.insert(&[
        ([0.5, 0.5, 0.5], [1.0f32, 0.0]),
        ([1.5, 0.5, 0.5], [0.0, 1.0]),
        ([2.5, 0.5, 0.5], [1.0, 1.0]),
    ])
    .unwrap();
    let (map, _) = b.freeze();
    let s = Session::new(bank(2, &[("x", vec![1.0, 0.0])]), EmbedderConfig::BankOnly)
        .with_map(map)
        .unwrap();
    let QueryArtifact::Map(hits) = query_with_vectors(&s, "map", &[ev(&[1.0, 0.0])], Some(2)).unwrap() else {
        panic!("map expected")
    };
    assert_eq!(hits.len(), 2);
    assert_eq!(hits[0].key, [0, 0, 0]);
    assert_eq!(hits[1].key, [2, 0, 0]);
    assert!((hits[1].similarity - 0.5f64.sqrt()).abs() < 1e-6);
    let json = QueryArtifact::Map(hits).to_json();
    assert_eq!(json["target"], "map");
    assert_eq!(json["results"][0]["key"], json!([0, 0, 0]));
}

#[test]
fn segment_examples() {
    let vol = DenseEmbeddingMap::new(1, 3, 2, vec![1.0, 0.0, 0.0, 0.0, -1.0, 0.5]).unwrap();
    let probe = ProbeWeights::new(3, 2, vec![0.0; 6], vec![0.0, 2.0, 1.0]).unwrap();
    let s = Session::new(bank(2, &[("chair", vec![1.0, 0.0])]), EmbedderConfig::BankOnly)
        .with_volume("img", vol, None)
        .unwrap();
    let req = |mode| SegmentRequest {
        image: "img".into(),
        mode,
    };

    let text = handle_segment(&s, &req(SegmentMode::Text)).unwrap();
    assert_eq!(text.labels.labels(), &[0, IGNORE_LABEL, 0]);
    assert_eq!(text.legend[0].name, "chair");
    assert_eq!(decode_label_map(&text.lmap).unwrap(), text.labels);

    assert!(matches!(
        handle_segment(&s, &req(SegmentMode::Probe)),
        Err(ServiceError::MissingProbe)
    ));
    assert!(matches!(
        handle_segment(&s, &req(SegmentMode::Mean)),
        Err(ServiceError::MissingReferences("mean"))
    ));
    let s = s.with_probe(probe).unwrap();
    let out = handle_segment(&s, &req(SegmentMode::Probe)).unwrap();
    assert_eq!(out.labels.labels(), &[1, 1, 1]);
    assert_eq!(out.legend.len(), 3);
    assert!(matches!(
        handle_segment(&s, &SegmentRequest {
            image: "other".into(),
            mode: SegmentMode::Text
        }),
        Err(ServiceError::UnknownImage(_))
    ));
}

#[test]
fn mean_mode_equals_library_argmax() {
    let scene = synth::two_clusters(4, 8, 8, 16, 0.2, 0.05);
    let refs = bank(
        16,
        &[("a", to_f32(&scene.centers[0])), ("b", to_f32(&scene.centers[1]))],
    );
    let s = Session::new(bank(16, &[]), EmbedderConfig::BankOnly)
        .with_volume("img", scene.map.clone(), None)
        .unwrap()
        .with_references(refs.clone())
        .unwrap();
    let out = handle_segment(
        &s,
        &SegmentRequest {
            image: "img".into(),
            mode: SegmentMode::Mean,
        },
    )
    .unwrap();
    let lib = classify_argmax(&scene.map, &refs.reference_set().unwrap()).unwrap();
    assert_eq!(out.labels, lib.labels);
    let names: Vec<_> = out.legend.iter().map(|l| l.name.as_str()).collect();
    assert_eq!(names, ["a", "b"]);
    let _: ReferenceSet = refs.reference_set().unwrap();
}

#[test]
fn session_rejects_mixed_dimensions() {
    let s = Session::new(bank(3, &[]), EmbedderConfig::BankOnly);
    let err = s.clone().with_volume("x", DenseEmbeddingMap::zeros(1, 1, 2), None);
    assert!(matches!(err, Err(ServiceError::DimMismatch { expected: 3, found: 2 })));
    assert!(s.clone().with_volume("map", DenseEmbeddingMap::zeros(1, 1, 3), None).is_err());
    let s = s.with_volume("x", DenseEmbeddingMap::zeros(1, 1, 3), None).unwrap();
    assert!(s.with_bank(bank(2, &[])).is_err());
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn as_json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test]
async fn http_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = synth::rng(2);
    let vol = synth::random_volume(&mut rng, 3, 5, 4);
    write_volume(&vol, Dtype::F32, dir.path().join("a.dvem")).unwrap();
    std::fs::write(dir.path().join("a.png"), b"not really a png").unwrap();
    let mut b = MapBuilder::new(0.1, 4).unwrap();
    b.insert(&[([0.0, 0.0, 0.0], vol.pixel(0)), ([1.0, 0.0, 0.0], vol.pixel(1))]).unwrap();
    write_map3d(&b.freeze().0, dir.path().join("m.dve3")).unwrap();
    std::fs::write(
        dir.path().join("probe.json"),
        serde_json::to_string(&ProbeWeights::new(2, 4, vec![0.0; 8], vec![0.0, 1.0]).unwrap()).unwrap(),
    )
    .unwrap();

    let q = to_f32(&synth::random_unit(&mut rng, 4));
    let addr = stub_provider(4).await;
    let session = Session::new(bank(4, &[("thing", q)]), external(addr, "/embed", 2000));
    let app = router(AppState::new(SessionStore::new(session)));

    let (st, body) = call(&app, "GET", "/session", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(as_json(&body)["volumes"], json!([]));
    assert_eq!(as_json(&body)["embedder"]["mode"], "external");

    let load = json!({"kind": "volume", "id": "a", "path": dir.path().join("a.dvem"), "image": dir.path().join("a.png")});
    let (st, body) = call(&app, "POST", "/load", Some(load)).await;
    assert_eq!(st, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    assert_eq!(as_json(&body)["volumes"][0]["height"], 3);
    for (kind, file) in [("map", "m.dve3"), ("probe", "probe.json")] {
        let (st, _) = call(&app, "POST", "/load", Some(json!({"kind": kind, "path": dir.path().join(file)}))).await;
        assert_eq!(st, StatusCode::OK);
    }
    let (st, body) = call(&app, "POST", "/load", Some(json!({"kind": "map", "path": "/does/not/exist"}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(as_json(&body)["error"], "InvalidArtifact");

    // bank hit and provider miss both answer, byte-identically on repeat
    for prompt in ["thing", "something else"] {
        let q = json!({"target": "a", "prompt": prompt});
        let (st, first) = call(&app, "POST", "/query", Some(q.clone())).await;
        assert_eq!(st, StatusCode::OK, "{}", String::from_utf8_lossy(&first));
        let (_, second) = call(&app, "POST", "/query", Some(q)).await;
        assert_eq!(first, second);
        let v = as_json(&first);
        let pgm = B64.decode(v["pgm"].as_str().unwrap()).unwrap();
        assert!(pgm.starts_with(b"P5\n5 3\n255\n"));
        assert_eq!(pgm.len(), 11 + 15);
    }
    let (st, body) = call(&app, "POST", "/query", Some(json!({"target": "map", "prompt": "thing", "top_k": 1}))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(as_json(&body)["results"].as_array().unwrap().len(), 1);

    let seg = json!({"image": "a", "mode": "probe"});
    let (st, first) = call(&app, "POST", "/segment", Some(seg.clone())).await;
    assert_eq!(st, StatusCode::OK);
    let (_, second) = call(&app, "POST", "/segment", Some(seg)).await;
    assert_eq!(first, second);
    let lm = decode_label_map(&B64.decode(as_json(&first)["lmap"].as_str().unwrap()).unwrap()).unwrap();
    assert!(lm.labels().iter().all(|&l| l == 1));

    let (st, body) = call(&app, "GET", "/image/a", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body, b"not really a png");

    let (st, body) = call(&app, "POST", "/query", Some(json!({"target": "zzz", "prompt": "thing"}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(as_json(&body)["error"], "UnknownImage");
    let (st, _) = call(&app, "POST", "/segment", Some(json!({"image": "a", "mode": "mean"}))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, _) = call(&app, "GET", "/image/zzz", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn readers_keep_their_snapshot_across_loads() {
    let dir = tempfile::tempdir().unwrap();
    let vol = DenseEmbeddingMap::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
    write_volume(&vol, Dtype::F32, dir.path().join("v.dvem")).unwrap();
    let store = SessionStore::new(Session::new(bank(2, &[]), EmbedderConfig::BankOnly));
    let before = store.snapshot();
    store
        .load(serde_json::from_value(json!({"kind": "volume", "id": "v", "path": dir.path().join("v.dvem")})).unwrap())
        .await
        .unwrap();
    assert_eq!(before.volumes().count(), 0);
    assert_eq!(store.snapshot().volumes().count(), 1);

    // a failing load leaves the published session untouched
    let bad = serde_json::from_value(json!({"kind": "bank", "path": dir.path().join("missing.json")})).unwrap();
    assert!(store.load(bad).await.is_err());
    assert_eq!(store.snapshot().volumes().count(), 1);
}
