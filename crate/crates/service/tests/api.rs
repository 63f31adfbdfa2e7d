use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use base64::Engine;
use facehop_core::active::{self, ActiveConfig, ActivePool, GroundTruth, TestSet};
use facehop_core::dataio::{self, FacePair, ImageStore, SyntheticSpec};
use facehop_core::pipeline::{self, FeatureExtractor, TrainConfig};
use facehop_core::preprocess::PreprocessConfig;
use facehop_core::{RgbImage, Strategy};
use facehop_service::{pair_id, router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

struct Env {
    data: TempDir,
    store: TempDir,
}

fn synthetic_root() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::new(10, 6, 25.0, 4).with_pairs(60).with_folds(5);
    dataio::make_synthetic(&spec).unwrap().write_to(dir.path()).unwrap();
    dir
}

fn env() -> Env {
    Env { data: synthetic_root(), store: tempfile::tempdir().unwrap() }
}

async fn app(env: &Env, token: Option<&str>, model: Option<&Path>) -> Router {
    let mut cfg = ServiceConfig::new(env.data.path(), env.store.path());
    cfg.token = token.map(str::to_string);
    cfg.model_path = model.map(Path::to_path_buf);
    router(AppState::open(cfg).await.unwrap())
}

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|_| panic!("not JSON: {}", String::from_utf8_lossy(&self.body)))
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>, extra: &[(&str, &str)]) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    for (k, v) in extra {
        req = req.header(*k, *v);
    }
    let req = match body {
        Some(v) => req.header(header::CONTENT_TYPE, "application/json").body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

fn session_body(strategy: &str, batch: usize, budget: usize, seed: u64) -> Value {
    json!({"strategy": strategy, "batch_size": batch, "budget": budget, "seed": seed})
}

async fn create(app: &Router, body: Value) -> String {
    let r = call(app, Method::POST, "/api/sessions", Some(body), &[]).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&r.body));
    r.json()["id"].as_str().unwrap().to_string()
}

/// Poll until the session has pairs to label or is finished.
async fn next_batch(app: &Router, id: &str) -> Value {
    for _ in 0..2000 {
        let r = call(app, Method::GET, &format!("/api/sessions/{id}/queries"), None, &[]).await;
        assert_eq!(r.status, StatusCode::OK);
        let v = r.json();
        if v["status"] != "retraining" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("session {id} kept retraining");
}

fn ids(batch: &Value) -> Vec<String> {
    batch["pairs"].as_array().unwrap().iter().map(|p| p["pair_id"].as_str().unwrap().to_string()).collect()
}

/// Ground truth and split of the written dataset, computed independently of
/// the service.
struct Truth {
    pool_pairs: Vec<FacePair>,
    pool_labels: Vec<bool>,
    test_pairs: Vec<FacePair>,
    test_labels: Vec<bool>,
    ids: Vec<String>,
}

fn truth(root: &Path) -> Truth {
    let mut protocol = dataio::parse_pairs_file(&root.join("pairs.txt"), root).unwrap();
    dataio::resolve_images(&mut protocol).unwrap();
    let n = protocol.folds.len();
    let pool_pairs: Vec<FacePair> = protocol.folds[..n - 1].iter().flat_map(|f| f.pairs().cloned()).collect();
    let test_pairs: Vec<FacePair> = protocol.folds[n - 1].pairs().cloned().collect();
    let lab = |p: &[FacePair]| p.iter().map(|x| x.label.unwrap()).collect::<Vec<_>>();
    Truth {
        ids: pool_pairs.iter().map(|p| pair_id(root, p)).collect(),
        pool_labels: lab(&pool_pairs),
        test_labels: lab(&test_pairs),
        pool_pairs,
        test_pairs,
    }
}

impl Truth {
    fn label_of(&self, id: &str) -> bool {
        self.pool_labels[self.ids.iter().position(|x| x == id).unwrap()]
    }

    fn labels_for(&self, ids: &[String]) -> Value {
        Value::Array(ids.iter().map(|id| json!({"pair_id": id, "match": self.label_of(id)})).collect())
    }
}

/// Label every batch from ground truth; returns the pair ids in the order
/// they were labeled.
async fn run_scripted(app: &Router, id: &str, t: &Truth) -> Vec<String> {
    let mut order = Vec::new();
    loop {
        let batch = next_batch(app, id).await;
        if batch["status"] == "done" {
            return order;
        }
        let ids = ids(&batch);
        let r = call(
            app,
            Method::POST,
            &format!("/api/sessions/{id}/labels"),
            Some(json!({"labels": t.labels_for(&ids)})),
            &[],
        )
        .await;
        assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.body));
        order.extend(ids);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_session_matches_the_library_loop() {
    let env = env();
    let app = app(&env, None, None).await;
    let t = truth(env.data.path());

    for strategy in ["entropy", "qbc", "coreset"] {
        let id = create(&app, json!({"strategy": strategy, "batch_size": 8, "budget": 40, "seed": 9, "seed_from_ground_truth": false})).await;
        let order = run_scripted(&app, &id, &t).await;

        let store = ImageStore::new(PreprocessConfig::default(), 256);
        let ex = FeatureExtractor::fit(&store, &dataio::distinct_images(&t.pool_pairs), &TrainConfig::default()).unwrap();
        let pool = ActivePool::new(ex.pair_features(&store, &t.pool_pairs).unwrap()).unwrap();
        let test = ex.pair_features(&store, &t.test_pairs).unwrap();
        let config = ActiveConfig::new(strategy.parse::<Strategy>().unwrap(), 8, 40, 9);
        let reference = active::run_active_loop(
            &pool,
            TestSet { features: &test, labels: &t.test_labels },
            config,
            &mut GroundTruth { labels: &t.pool_labels },
        )
        .unwrap();

        let expected: Vec<String> = reference.labeled.iter().map(|s| t.ids[s.index].clone()).collect();
        assert_eq!(order, expected, "{strategy}: query sequence");
        let csv = call(&app, Method::GET, &format!("/api/sessions/{id}/metrics?format=csv"), None, &[]).await;
        assert_eq!(csv.status, StatusCode::OK);
        assert!(csv.headers[header::CONTENT_TYPE].to_str().unwrap().starts_with("text/csv"));
        assert_eq!(String::from_utf8(csv.body).unwrap(), active::trace_csv(&reference.trace), "{strategy}: trace");
    }
}

#[tokio::test]
async fn session_creation_validates_and_is_idempotent() {
    let env = env();
    let app = app(&env, None, None).await;
    let key = [("idempotency-key", "abc-123")];
    let first = call(&app, Method::POST, "/api/sessions", Some(session_body("entropy", 5, 30, 1)), &key).await;
    assert_eq!(first.status, StatusCode::CREATED);
    assert!(first.headers.contains_key(header::LOCATION));
    let again = call(&app, Method::POST, "/api/sessions", Some(session_body("entropy", 5, 30, 1)), &key).await;
    assert_eq!(again.status, StatusCode::OK);
    assert_eq!(first.json()["id"], again.json()["id"]);
    let other = create(&app, session_body("entropy", 5, 30, 1)).await;
    assert_ne!(other, first.json()["id"].as_str().unwrap());

    for (body, reason) in [
        (session_body("entropy", 0, 30, 1), "invalid_config"),
        (session_body("entropy", 50, 30, 1), "invalid_config"),
        (session_body("margin", 5, 30, 1), "invalid_config"),
        (session_body("entropy", 5, 100_000, 1), "invalid_config"),
        (json!({"strategy": "qbc", "batch_size": 5, "budget": 30, "dataset": {"pairs": "../x.txt"}}), "invalid_dataset"),
        (json!({"strategy": "qbc", "batch_size": 5, "budget": 30, "dataset": {"pairs": "none.txt"}}), "dataset_unavailable"),
    ] {
        let r = call(&app, Method::POST, "/api/sessions", Some(body.clone()), &[]).await;
        assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        assert_eq!(r.headers[header::CONTENT_TYPE], "application/problem+json");
        let p = r.json();
        assert_eq!(p["reason"], reason, "{body}: {p}");
        assert_eq!(p["status"], 422);
    }
    let r = call(&app, Method::POST, "/api/sessions", Some(json!({"batch_size": "x"})), &[]).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let r = call(&app, Method::GET, "/api/sessions/nope/queries", None, &[]).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn label_protocol_errors_and_replays() {
    let env = env();
    let app = app(&env, None, None).await;
    let t = truth(env.data.path());
    let id = create(&app, json!({"strategy": "entropy", "batch_size": 6, "budget": 16, "seed": 2, "seed_from_ground_truth": false})).await;
    let url = format!("/api/sessions/{id}/labels");

    let first = next_batch(&app, &id).await;
    assert_eq!(first["status"], "awaiting_labels");
    // GET is idempotent until labels arrive.
    assert_eq!(ids(&next_batch(&app, &id).await), ids(&first));
    let d0 = ids(&first);
    assert_eq!(d0.len(), 5, "5% of a 96-pair pool");

    let r = call(&app, Method::POST, &url, Some(json!({"labels": [{"pair_id": "ffff", "match": true}]})), &[]).await;
    assert_eq!((r.status, r.json()["reason"].clone()), (StatusCode::CONFLICT, json!("unknown_pair")));
    let not_queried = t.ids.iter().find(|x| !d0.contains(x)).unwrap();
    let r = call(&app, Method::POST, &url, Some(json!({"labels": [{"pair_id": not_queried, "match": true}]})), &[]).await;
    assert_eq!(r.status, StatusCode::CONFLICT);

    // Partial post, then its replay, then a duplicate label.
    let post = json!({"request_id": "r1", "labels": t.labels_for(&d0[..2])});
    let r = call(&app, Method::POST, &url, Some(post.clone()), &[]).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["labeled"], 2);
    let r = call(&app, Method::POST, &url, Some(post), &[]).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["replayed"], true);
    assert_eq!(r.json()["labeled"], 2);
    let r = call(&app, Method::POST, &url, Some(json!({"labels": t.labels_for(&d0[..1])})), &[]).await;
    assert_eq!((r.status, r.json()["reason"].clone()), (StatusCode::CONFLICT, json!("already_labeled")));
    // A rejected batch changes nothing.
    let mixed = json!({"labels": [{"pair_id": d0[2], "match": true}, {"pair_id": "ffff", "match": true}]});
    assert_eq!(call(&app, Method::POST, &url, Some(mixed), &[]).await.status, StatusCode::CONFLICT);
    assert_eq!(ids(&next_batch(&app, &id).await), d0[2..].to_vec());

    let r = call(&app, Method::POST, &url, Some(json!({"labels": t.labels_for(&d0[2..])})), &[]).await;
    assert_eq!(r.json()["pending"], 0);
    let second = next_batch(&app, &id).await;
    let round1 = ids(&second);
    assert_eq!(round1.len(), 6);
    assert!(round1.iter().all(|x| !d0.contains(x)), "batches are disjoint");

    let order = run_scripted(&app, &id, &t).await;
    assert_eq!(order.len(), 11);
    let done = next_batch(&app, &id).await;
    assert_eq!(done["status"], "done");
    let r = call(&app, Method::POST, &url, Some(json!({"labels": t.labels_for(&round1[..1])})), &[]).await;
    assert_eq!(r.status, StatusCode::GONE);
    let m = call(&app, Method::GET, &format!("/api/sessions/{id}/metrics"), None, &[]).await.json();
    assert_eq!(m["labeled"], 16);
    assert_eq!(m["trace"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn accepted_labels_survive_a_restart() {
    let env = env();
    let t = truth(env.data.path());
    let id;
    let d0;
    {
        let app = app(&env, None, None).await;
        id = create(&app, json!({"strategy": "coreset", "batch_size": 5, "budget": 14, "seed": 8, "seed_from_ground_truth": false})).await;
        d0 = ids(&next_batch(&app, &id).await);
        let r = call(
            &app,
            Method::POST,
            &format!("/api/sessions/{id}/labels"),
            Some(json!({"request_id": "q", "labels": t.labels_for(&d0[..1])})),
            &[],
        )
        .await;
        assert_eq!(r.status, StatusCode::OK);
    }
    let app = app(&env, None, None).await;
    let url = format!("/api/sessions/{id}/labels");
    assert_eq!(ids(&next_batch(&app, &id).await), d0[1..].to_vec());
    let replay = call(&app, Method::POST, &url, Some(json!({"request_id": "q", "labels": t.labels_for(&d0[..1])})), &[]).await;
    assert_eq!(replay.json()["replayed"], true);
    let r = call(&app, Method::POST, &url, Some(json!({"labels": t.labels_for(&d0[1..])})), &[]).await;
    assert_eq!(r.status, StatusCode::OK);
    run_scripted(&app, &id, &t).await;
    let m = call(&app, Method::GET, &format!("/api/sessions/{id}/metrics"), None, &[]).await.json();
    assert_eq!(m["status"], "done");
    assert_eq!(m["labeled"], 14);
}

#[tokio::test]
async fn seed_set_can_come_from_ground_truth() {
    let env = env();
    let app = app(&env, None, None).await;
    let id = create(&app, session_body("entropy", 5, 20, 3)).await;
    let batch = next_batch(&app, &id).await;
    assert_eq!(batch["round"], 1);
    assert_eq!(batch["labeled"], 5);
    assert_eq!(ids(&batch).len(), 5);
}

#[tokio::test]
async fn images_are_served_as_the_model_sees_them() {
    let env = env();
    let app = app(&env, Some("s3cret"), None).await;
    let auth = [("authorization", "Bearer s3cret")];
    let r = call(&app, Method::POST, "/api/sessions", Some(session_body("entropy", 5, 20, 3)), &[]).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    assert_eq!(r.json()["reason"], "unauthorized");
    let r = call(&app, Method::POST, "/api/sessions", Some(session_body("entropy", 5, 20, 3)), &[("authorization", "Bearer nope")]).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    let r = call(&app, Method::POST, "/api/sessions", Some(session_body("entropy", 5, 20, 3)), &auth).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let id = r.json()["id"].as_str().unwrap().to_string();

    let q = call(&app, Method::GET, &format!("/api/sessions/{id}/queries"), None, &auth).await.json();
    let url = q["pairs"][0]["image_a"].as_str().map(str::to_string);
    let url = match url {
        Some(u) => u,
        None => {
            let t = truth(env.data.path());
            format!("/api/pairs/{}/images/a", t.ids[0])
        }
    };
    assert_eq!(call(&app, Method::GET, &url, None, &[]).await.status, StatusCode::UNAUTHORIZED);
    for r in [
        call(&app, Method::GET, &url, None, &auth).await,
        call(&app, Method::GET, &format!("{url}?token=s3cret"), None, &[]).await,
    ] {
        assert_eq!(r.status, StatusCode::OK);
        assert_eq!(r.headers[header::CONTENT_TYPE], "image/png");
        let img = RgbImage::decode_png(&r.body).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
    }
    // The query-string token only opens image URLs.
    let r = call(&app, Method::GET, &format!("/api/sessions/{id}?token=s3cret"), None, &[]).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    let r = call(&app, Method::GET, "/api/pairs/0000/images/a", None, &auth).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = call(&app, Method::GET, &url.replace("/a", "/c"), None, &auth).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn verify_endpoint_scores_uploaded_images() {
    let env = env();
    let no_model = app(&env, None, None).await;
    let face = |name: &str, i: usize| -> Vec<u8> {
        let path = dataio::image_path(env.data.path(), name, i, "ppm");
        RgbImage::load(&path).unwrap().encode_png().unwrap()
    };
    let b64 = |b: &[u8]| base64::engine::general_purpose::STANDARD.encode(b);
    let body = json!({"image_a": b64(&face("person000", 1)), "image_b": b64(&face("person000", 2))});
    let r = call(&no_model, Method::POST, "/api/verify", Some(body.clone()), &[]).await;
    assert_eq!((r.status, r.json()["reason"].clone()), (StatusCode::SERVICE_UNAVAILABLE, json!("no_model")));

    let spec = SyntheticSpec::new(10, 6, 8.0, 4).with_pairs(60).with_folds(5);
    let data = dataio::make_synthetic(&spec).unwrap();
    let model = pipeline::train_verifier(&data.store(), &data.pairs, &TrainConfig::default()).unwrap();
    let model_path = env.store.path().join("model.sslf");
    facehop_core::container::save_model(&model, &model_path).unwrap();
    let app = app(&env, None, Some(&model_path)).await;

    let r = call(&app, Method::POST, "/api/verify", Some(body), &[]).await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.body));
    let v = r.json();
    let p = v["probability"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));

    let same = json!({"image_a": b64(&face("person003", 2)), "image_b": b64(&face("person003", 2))});
    assert_eq!(call(&app, Method::POST, "/api/verify", Some(same), &[]).await.json()["is_match"], true);
    let ppm = std::fs::read(dataio::image_path(env.data.path(), "person001", 1, "ppm")).unwrap();
    let mixed = json!({"image_a": b64(&ppm), "image_b": b64(&face("person001", 1))});
    let r = call(&app, Method::POST, "/api/verify", Some(mixed), &[]).await;
    assert_eq!(r.status, StatusCode::OK);

    let bad = json!({"image_a": "%%%", "image_b": b64(&face("person000", 1))});
    assert_eq!(call(&app, Method::POST, "/api/verify", Some(bad), &[]).await.status, StatusCode::BAD_REQUEST);
    let junk = json!({"image_a": b64(b"not an image"), "image_b": b64(&face("person000", 1))});
    let r = call(&app, Method::POST, "/api/verify", Some(junk), &[]).await;
    assert_eq!((r.status, r.json()["reason"].clone()), (StatusCode::UNPROCESSABLE_ENTITY, json!("bad_image")));
}

#[tokio::test]
async fn concurrent_posts_to_one_session_are_serialized() {
    let env = env();
    let app = app(&env, None, None).await;
    let t = Arc::new(truth(env.data.path()));
    let id = create(&app, json!({"strategy": "entropy", "batch_size": 5, "budget": 20, "seed": 6, "seed_from_ground_truth": false})).await;
    let d0 = ids(&next_batch(&app, &id).await);
    // Everyone posts the same label; exactly one wins.
    let mut handles = Vec::new();
    for _ in 0..8 {
        let (app, url, body) = (app.clone(), format!("/api/sessions/{id}/labels"), json!({"labels": t.labels_for(&d0[..1])}));
        handles.push(tokio::spawn(async move { call(&app, Method::POST, &url, Some(body), &[]).await.status }));
    }
    let mut ok = 0;
    for h in handles {
        match h.await.unwrap() {
            StatusCode::OK => ok += 1,
            s => assert_eq!(s, StatusCode::CONFLICT),
        }
    }
    assert_eq!(ok, 1);
    let s = call(&app, Method::GET, &format!("/api/sessions/{id}"), None, &[]).await.json();
    assert_eq!(s["labeled"], 1);
}
