mod common;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine as _;
use common::*;
use protorec_core::persistence::{import_dataset, replay, LOG_FILE_NAME};
use protorec_core::recognition::Outcome;
use protorec_server::config::DescriptorKind;
use protorec_server::MessageCatalog;
use protorec_core::Metric;
use serde_json::{json, Value};

#[tokio::test]
async fn vector_query_against_seeded_store() {
    let s = seeded();
    let (st, body) = s.query("alice", &[1.0, 0.1, 0.0, 0.0]).await;
    assert_eq!(st, StatusCode::OK, "{body}");
    check_schema("query_response.json", &body);
    assert_eq!(body["proposed"]["class_synset"], "dog.n.01");
    assert_eq!(body["proposed"]["lemma"], "dog");
    assert!(body["proposed"]["definition"].as_str().unwrap().contains("Canis"));
    assert_eq!(body["outcome"], json!({"kind": "certain"}));
    assert_eq!(body["message"], "I'm pretty sure that this is dog.");
    assert!(!body["alternatives"].as_array().unwrap().is_empty());
    assert_eq!(body["alternatives"][0]["class_synset"], "dog.n.01");
}

#[tokio::test]
async fn schemas_reject_malformed_payloads() {
    let s = seeded();
    let (_, mut body) = s.query("alice", &[1.0, 0.1, 0.0, 0.0]).await;
    body["outcome"] = json!({"kind": "level", "level": 12});
    assert!(!schema_errors("query_response.json", &body).is_empty());
    body["outcome"] = json!({"kind": "level", "level": 3});
    body["alternatives"] = json!([{"lemma": "dog"}]);
    assert!(!schema_errors("query_response.json", &body).is_empty());
}

#[tokio::test]
async fn query_is_side_effect_free() {
    let s = seeded();
    let log = s.dir.path().join(LOG_FILE_NAME);
    let before = std::fs::read(&log).unwrap();
    for _ in 0..3 {
        assert_eq!(s.query("alice", &[0.3, 0.9, 0.0, 0.1]).await.0, StatusCode::OK);
    }
    assert_eq!(s.state.engine.len(), 3);
    assert_eq!(std::fs::read(&log).unwrap(), before);
    assert_eq!(s.state.engine.pending_tokens(), 3);
}

#[tokio::test]
async fn malformed_and_invalid_queries() {
    let s = seeded();
    let (st, body) = s.query("alice", &[0.0; 4]).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    check_schema("error.json", &body);
    assert_eq!(s.query("alice", &[1.0, 0.0, 0.0]).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let req = Request::post("/query")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    let (st, body) = s.raw(req).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    check_schema("error.json", &body);
    let (st, _) = s.call("POST", "/query", Some(json!({"user_id": "a"})), None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = s.call("POST", "/query", Some(json!({"user_id": "", "descriptor": [1, 0, 0, 0]})), None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = s.call("POST", "/query", Some(json!({"user_id": "a", "descriptor": "x"})), None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = s
        .call("POST", "/query", Some(json!({"user_id": "a", "descriptor": [1, 0, 0, 0], "bogus": 1})), None)
        .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    // this store takes vectors only
    let image = json!({"width": 1, "height": 1, "pixels_b64": "AAAA"});
    let (st, _) = s
        .call("POST", "/query", Some(json!({"user_id": "a", "image": image, "roi": {"x": 0, "y": 0, "w": 1, "h": 1}})), None)
        .await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn empty_store_is_unavailable() {
    let s = start(4);
    let (st, body) = s.query("alice", &[1.0, 0.0, 0.0, 0.0]).await;
    assert_eq!(st, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"], "empty_store");
}

#[tokio::test]
async fn own_scope_without_images_yields_unknown_payload() {
    let s = seeded();
    let body = json!({"user_id": "newcomer", "scope": "own", "descriptor": [1.0, 0.0, 0.0, 0.0]});
    let (st, resp) = s.call("POST", "/query", Some(body.clone()), None).await;
    assert_eq!(st, StatusCode::OK);
    check_schema("query_response.json", &resp);
    assert_eq!(resp["outcome"], json!({"kind": "unknown"}));
    assert_eq!(resp["proposed"], Value::Null);
    assert_eq!(resp["alternatives"], json!([]));
    assert_eq!(resp["message"], MessageCatalog::bundled().outcome(Outcome::Unknown, ""));

    // the unknown path still accepts a manual pick, and the user then owns an image
    let id = resp["response_id"].as_str().unwrap();
    let (st, v) = s.validate(id, "pick_manual", Some("dog.n.01")).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["closeness"], Value::Null);
    let (_, resp) = s.call("POST", "/query", Some(body), None).await;
    assert_eq!(resp["proposed"]["class_synset"], "dog.n.01");
    assert_eq!(resp["proposed"]["prototype_id"], v["prototype_id"]);
}

#[tokio::test]
async fn confirm_grows_store_and_second_confirm_conflicts() {
    let s = seeded();
    let (_, q) = s.query("alice", &[1.0, 0.2, 0.0, 0.0]).await;
    let id = q["response_id"].as_str().unwrap().to_string();
    let seq_before = s.state.engine.last_log_seq().unwrap();

    let (st, v) = s.validate(&id, "confirm", None).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    check_schema("validate_response.json", &v);
    assert_eq!(v["stored"], true);
    assert_eq!(v["class_synset"], "dog.n.01");
    assert_eq!(v["store_size"], 4);
    assert_eq!(v["sequence"], seq_before + 1);
    assert_eq!(v["closeness"]["key"], "correct");

    let (st, body) = s.validate(&id, "confirm", None).await;
    assert_eq!(st, StatusCode::CONFLICT);
    check_schema("error.json", &body);
    assert_eq!(s.state.engine.len(), 4);

    let replayed = replay(s.dir.path().join(LOG_FILE_NAME)).unwrap();
    assert_eq!(replayed.last_seq, seq_before + 1);
    assert_eq!(replayed.state.len(), 4);
}

#[tokio::test]
async fn validation_errors() {
    let s = seeded();
    let (_, q) = s.query("alice", &[1.0, 0.2, 0.0, 0.0]).await;
    let id = q["response_id"].as_str().unwrap();
    assert_eq!(s.validate(id, "pick_manual", Some("bogus.n.99")).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(s.validate(id, "pick_alternative", Some("key.n.01")).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(s.validate(id, "pick_manual", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(s.validate("deadbeef", "confirm", None).await.0, StatusCode::NOT_FOUND);
    let (st, _) = s.call("POST", "/validate", Some(json!({"response_id": id, "decision": "maybe"})), None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    // failed attempts leave the token usable
    assert_eq!(s.validate(id, "pick_manual", Some("chair.n.01")).await.0, StatusCode::OK);
}

#[tokio::test]
async fn closeness_reflects_taxonomy_distance() {
    let s = seeded();
    let (_, q) = s.query("alice", &[1.0, 0.2, 0.0, 0.0]).await;
    let (st, v) = s.validate(q["response_id"].as_str().unwrap(), "pick_manual", Some("chair.n.01")).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["closeness"]["key"], "totally_wrong");
    assert_eq!(v["closeness"]["message"], "I was totally wrong.");
}

#[tokio::test]
async fn reject_unknown_stores_nothing() {
    let s = seeded();
    let (_, q) = s.query("alice", &[0.0, 0.0, 0.0, 1.0]).await;
    assert_eq!(q["outcome"]["kind"], "unknown");
    let seq = s.state.engine.last_log_seq();
    let (st, v) = s.validate(q["response_id"].as_str().unwrap(), "reject_unknown", None).await;
    assert_eq!(st, StatusCode::OK);
    check_schema("validate_response.json", &v);
    assert_eq!(v["stored"], false);
    assert_eq!(s.state.engine.last_log_seq(), seq);
    assert_eq!(s.validate(q["response_id"].as_str().unwrap(), "reject_unknown", None).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn label_propagates_to_near_duplicate_queries() {
    let s = seeded();
    let (_, q) = s.query("alice", &[1.0, 0.05, 0.0, 0.0]).await;
    let id = s.validate(q["response_id"].as_str().unwrap(), "confirm", None).await.1["prototype_id"]
        .as_u64()
        .unwrap();
    let (st, img) = s
        .call("PATCH", &format!("/images/{id}"), Some(json!({"label": "My dog Toby"})), None)
        .await;
    assert_eq!(st, StatusCode::OK, "{img}");
    check_schema("image.json", &img);
    assert_eq!(img["user_label"], "My dog Toby");

    let (_, q) = s.query("bob", &[1.0, 0.05, 0.0, 0.0]).await;
    assert_eq!(q["proposed"]["prototype_id"], id);
    assert_eq!(q["proposed"]["user_label"], "My dog Toby");

    let (_, img) = s.call("PATCH", &format!("/images/{id}"), Some(json!({"label": null})), None).await;
    assert_eq!(img["user_label"], Value::Null);
}

#[tokio::test]
async fn my_pics_listing() {
    let s = seeded();
    let (st, list) = s.call("GET", "/images?user=alice", None, None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(list, json!({"images": []}));
    let (_, q) = s.query("alice", &[0.1, 1.0, 0.0, 0.0]).await;
    s.validate(q["response_id"].as_str().unwrap(), "confirm", None).await;
    let (_, list) = s.call("GET", "/images?user=alice", None, None).await;
    check_schema("image_list.json", &list);
    assert_eq!(list["images"].as_array().unwrap().len(), 1);
    assert_eq!(list["images"][0]["class_synset"], "chair.n.01");
    assert_eq!(list["images"][0]["lemma"], "chair");
    let (_, list) = s.call("GET", "/images?user=seed", None, None).await;
    assert_eq!(list["images"].as_array().unwrap().len(), 3);
    assert_eq!(s.call("GET", "/images", None, None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(
        s.call("PATCH", "/images/999", Some(json!({"label": "x"})), None).await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn admin_endpoints_need_the_token() {
    let s = seeded();
    let patch = Some(json!({"reliable": false}));
    assert_eq!(s.call("PATCH", "/images/1", patch.clone(), None).await.0, StatusCode::FORBIDDEN);
    assert_eq!(s.call("PATCH", "/images/1", patch.clone(), Some("wrong")).await.0, StatusCode::FORBIDDEN);
    assert_eq!(s.call("GET", "/export", None, None).await.0, StatusCode::FORBIDDEN);
    assert_eq!(s.call("POST", "/admin/rebuild", None, Some("nope")).await.0, StatusCode::FORBIDDEN);

    let (st, img) = s.call("PATCH", "/images/1", patch, Some(ADMIN)).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(img["reliable"], false);
    // the dog prototype is gone, so a dog-like query falls back to unknown
    let (_, q) = s.query("alice", &[1.0, 0.0, 0.0, 0.0]).await;
    assert_eq!(q["outcome"]["kind"], "unknown");
    s.call("PATCH", "/images/1", Some(json!({"reliable": true})), Some(ADMIN)).await;
    let (_, q) = s.query("alice", &[1.0, 0.0, 0.0, 0.0]).await;
    assert_eq!(q["proposed"]["class_synset"], "dog.n.01");
}

#[tokio::test]
async fn admin_endpoints_closed_without_configured_token() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 4);
    cfg.server.admin_token = None;
    let s = start_with(cfg, dir);
    assert_eq!(s.call("POST", "/admin/rebuild", None, Some(ADMIN)).await.0, StatusCode::FORBIDDEN);
}

#[tokio::test]
async fn rebuild_reports_drained_overflow() {
    let s = seeded();
    let (st, r) = s.call("POST", "/admin/rebuild", None, Some(ADMIN)).await;
    assert_eq!(st, StatusCode::OK);
    check_schema("rebuild_response.json", &r);
    // the seeds were added after startup and sit in overflow
    assert_eq!(r["drained"], 3);
    let (_, r) = s.call("POST", "/admin/rebuild", None, Some(ADMIN)).await;
    assert_eq!(r["drained"], 0);
    assert_eq!(r["overflow_after"], 0);
    assert_eq!(r["indexed"], 3);
    assert!(s.dir.path().join(protorec_server::INDEX_FILE_NAME).exists());
}

#[tokio::test]
async fn taxonomy_search_by_lemma() {
    let s = seeded();
    let (st, r) = s.call("GET", "/taxonomy/search?lemma=chair", None, None).await;
    assert_eq!(st, StatusCode::OK);
    check_schema("taxonomy_search.json", &r);
    assert_eq!(r["results"][0]["synset_id"], "chair.n.01");
    assert!(!r["results"][0]["definition"].as_str().unwrap().is_empty());
    let (_, r) = s.call("GET", "/taxonomy/search?lemma=key", None, None).await;
    assert_eq!(r["results"].as_array().unwrap().len(), 2);
    let (_, r) = s.call("GET", "/taxonomy/search?lemma=zebra%20crossing", None, None).await;
    assert_eq!(r["results"], json!([]));
    assert_eq!(s.call("GET", "/taxonomy/search", None, None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn export_round_trips() {
    let s = seeded();
    s.call("PATCH", "/images/2", Some(json!({"reliable": false})), Some(ADMIN)).await;
    let (st, r) = s.call("GET", "/export?reliable_only=true", None, Some(ADMIN)).await;
    assert_eq!(st, StatusCode::OK, "{r}");
    assert_eq!(r["manifest"]["count"], 2);
    let imported = import_dataset(r["path"].as_str().unwrap()).unwrap();
    assert_eq!(imported.prototypes.len(), 2);
    assert!(imported.prototypes.values().all(|p| p.reliable));
}

#[tokio::test]
async fn restart_replays_the_log() {
    let s = seeded();
    let (_, q) = s.query("alice", &[1.0, 0.3, 0.0, 0.0]).await;
    s.validate(q["response_id"].as_str().unwrap(), "confirm", None).await;
    s.call("PATCH", "/images/4", Some(json!({"label": "Rex"})), None).await;
    let Server { state, app, dir } = s;
    let before = state.engine.prototypes(None);
    drop((app, state));
    let cfg = config(dir.path(), 4);
    let s = start_with(cfg, dir);
    assert_eq!(s.state.engine.prototypes(None), before);
    let (_, q) = s.query("bob", &[1.0, 0.3, 0.0, 0.0]).await;
    assert_eq!(q["proposed"]["user_label"], "Rex");
}

#[tokio::test]
async fn seed_dataset_populates_an_empty_store() {
    let s = seeded();
    let (_, r) = s.call("GET", "/export", None, Some(ADMIN)).await;
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 4);
    cfg.store.seed_dataset = Some(r["path"].as_str().unwrap().into());
    let t = start_with(cfg, dir);
    assert_eq!(t.state.engine.len(), 3);
    assert_eq!(replay(t.dir.path().join(LOG_FILE_NAME)).unwrap().state.len(), 3);
    let (_, q) = t.query("alice", &[0.0, 0.0, 1.0, 0.1]).await;
    assert_eq!(q["proposed"]["class_synset"], "key.n.01");
}

#[tokio::test]
async fn storage_full_maps_to_507() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 4);
    cfg.store.log_limit_bytes = Some(600);
    let s = start_with(cfg, dir);
    s.state
        .engine
        .add_prototype(protorec_core::Descriptor::euclidean(vec![1.0, 0.0, 0.0, 0.0]).unwrap(), "dog.n.01", Default::default(), "u", None)
        .unwrap();
    let mut last = StatusCode::OK;
    for _ in 0..10 {
        let (_, q) = s.query("alice", &[1.0, 0.1, 0.0, 0.0]).await;
        last = s.validate(q["response_id"].as_str().unwrap(), "confirm", None).await.0;
        if last != StatusCode::OK {
            break;
        }
    }
    assert_eq!(last, StatusCode::INSUFFICIENT_STORAGE);
}

#[tokio::test]
async fn messages_and_health() {
    let s = seeded();
    let (st, m) = s.call("GET", "/messages", None, None).await;
    assert_eq!(st, StatusCode::OK);
    for o in Outcome::all() {
        assert!(m["outcomes"][o.key()].is_string(), "{o}");
    }
    let (_, h) = s.call("GET", "/health", None, None).await;
    assert_eq!(h["prototypes"], 3);
    assert_eq!(h["reliable"], 3);
    assert_eq!(h["last_sequence"], 3);
}

fn histogram_server() -> Server {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 64);
    cfg.store.descriptor = DescriptorKind::ColorHistogram;
    cfg.store.metric = Metric::JensenShannon;
    cfg.store.l2_normalize = false;
    cfg.server.max_image_bytes = 64 * 64 * 3;
    start_with(cfg, dir)
}

fn image(w: u32, h: u32, rgb: [u8; 3]) -> Value {
    let pixels: Vec<u8> = (0..w * h).flat_map(|_| rgb).collect();
    json!({"width": w, "height": h, "pixels_b64": base64::engine::general_purpose::STANDARD.encode(pixels)})
}

#[tokio::test]
async fn image_queries_compute_histograms() {
    let s = histogram_server();
    let roi = json!({"x": 2, "y": 2, "w": 8, "h": 8});
    let (st, q) = s
        .call("POST", "/query", Some(json!({"user_id": "a", "scope": "own", "image": image(16, 16, [200, 30, 30]), "roi": roi})), None)
        .await;
    assert_eq!(st, StatusCode::OK, "{q}");
    let (st, v) = s.validate(q["response_id"].as_str().unwrap(), "pick_manual", Some("key.n.01")).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let stored = s.state.engine.get(v["prototype_id"].as_u64().unwrap()).unwrap();
    assert_eq!(stored.descriptor.dim(), 64);
    assert_eq!(stored.roi, Some(protorec_core::RegionOfInterest::new(2, 2, 8, 8)));

    let (_, q) = s
        .call("POST", "/query", Some(json!({"user_id": "b", "image": image(12, 12, [200, 30, 30]), "roi": roi})), None)
        .await;
    assert_eq!(q["outcome"]["kind"], "certain");
    assert_eq!(q["proposed"]["class_synset"], "key.n.01");

    let (st, _) = s
        .call("POST", "/query", Some(json!({"user_id": "b", "image": image(12, 12, [1, 2, 3])})), None)
        .await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let bad_roi = json!({"x": 8, "y": 8, "w": 8, "h": 8});
    let (st, _) = s
        .call("POST", "/query", Some(json!({"user_id": "b", "image": image(12, 12, [1, 2, 3]), "roi": bad_roi})), None)
        .await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = s
        .call("POST", "/query", Some(json!({"user_id": "b", "image": image(65, 64, [1, 2, 3]), "roi": roi})), None)
        .await;
    assert_eq!(st, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn openapi_document_lists_every_route() {
    let doc = std::fs::read_to_string(schema_dir().join("../openapi.yaml")).unwrap();
    for route in [
        "/query:",
        "/validate:",
        "/images:",
        "/images/{id}:",
        "/export:",
        "/admin/rebuild:",
        "/taxonomy/search:",
        "/messages:",
        "/health:",
    ] {
        assert!(doc.contains(route), "{route}");
    }
}
