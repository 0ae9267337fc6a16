#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use protorec_server::{bootstrap, router, AppState, ServiceConfig};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use tower::ServiceExt;

pub const ADMIN: &str = "test-admin-token";

pub struct Server {
    pub state: AppState,
    pub app: Router,
    pub dir: tempfile::TempDir,
}

pub fn config(dir: &Path, dim: usize) -> ServiceConfig {
    let mut cfg = ServiceConfig::default();
    cfg.store.dim = dim;
    cfg.store.data_dir = Some(dir.to_path_buf());
    cfg.server.admin_token = Some(ADMIN.into());
    cfg.index.n_trees = 10;
    cfg
}

pub fn start_with(cfg: ServiceConfig, dir: tempfile::TempDir) -> Server {
    let state = bootstrap(cfg).expect("bootstrap");
    let app = router(state.clone());
    Server { state, app, dir }
}

pub fn start(dim: usize) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), dim);
    start_with(cfg, dir)
}

/// dog along e0, chair along e1, key along e2, all owned by `seed`.
pub fn seeded() -> Server {
    let s = start(4);
    for (class, axis) in [("dog.n.01", 0), ("chair.n.01", 1), ("key.n.01", 2)] {
        let mut v = vec![0.0; 4];
        v[axis] = 1.0;
        s.state
            .engine
            .add_prototype(
                protorec_core::Descriptor::euclidean(v).unwrap(),
                class,
                Default::default(),
                "seed",
                None,
            )
            .unwrap();
    }
    s
}

impl Server {
    pub async fn call(&self, method: &str, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let req = match body {
            Some(b) => req
                .header("content-type", "application/json")
                .body(Body::from(serde_json::to_vec(&b).unwrap())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        self.raw(req).await
    }

    pub async fn raw(&self, req: Request<Body>) -> (StatusCode, Value) {
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, value)
    }

    pub async fn query(&self, user: &str, v: &[f64]) -> (StatusCode, Value) {
        self.call("POST", "/query", Some(json!({"user_id": user, "descriptor": v})), None).await
    }

    pub async fn validate(&self, id: &str, decision: &str, class: Option<&str>) -> (StatusCode, Value) {
        let mut body = json!({"response_id": id, "decision": decision});
        if let Some(c) = class {
            body["class"] = json!(c);
        }
        self.call("POST", "/validate", Some(body), None).await
    }
}

pub fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schema")
}

/// Validates `instance` against `docs/schema/<name>`.
pub fn check_schema(name: &str, instance: &Value) {
    let errors = schema_errors(name, instance);
    assert!(errors.is_empty(), "{name}: {errors:?}\n{instance:#}");
}

pub fn schema_errors(name: &str, instance: &Value) -> Vec<String> {
    let dir = schema_dir();
    let load = |n: &str| -> Value { serde_json::from_str(&std::fs::read_to_string(dir.join(n)).unwrap()).unwrap() };
    let mut schema = load(name);
    // inline the sibling schemas referenced by file name
    inline_refs(&mut schema, &load);
    let v = jsonschema::validator_for(&schema).expect("valid schema");
    v.iter_errors(instance).map(|e| e.to_string()).collect()
}

fn inline_refs(v: &mut Value, load: &dyn Fn(&str) -> Value) {
    match v {
        Value::Object(map) => {
            if let Some(Value::String(r)) = map.get("$ref") {
                if r.ends_with(".json") {
                    let mut sub = load(r);
                    if let Value::Object(o) = &mut sub {
                        o.remove("$schema");
                        o.remove("$id");
                    }
                    inline_refs(&mut sub, load);
                    *v = sub;
                    return;
                }
            }
            map.values_mut().for_each(|x| inline_refs(x, load));
        }
        Value::Array(a) => a.iter_mut().for_each(|x| inline_refs(x, load)),
        _ => {}
    }
}
