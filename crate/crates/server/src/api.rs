//! Request and response bodies, and the route handlers.

use crate::error::ApiError;
use crate::AppState;
use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Query as QueryParams, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::Json;
use base64::Engine as _;
use protorec_core::ann::PrototypeId;
use protorec_core::features::{ingest_embedding, ycbcr_histogram, EmbeddingManifest, RasterImage, RegionOfInterest};
use protorec_core::metadata::MetadataRecord;
use protorec_core::ontology::{closeness_message, Closeness, RootCategory};
use protorec_core::persistence::{export_dataset, ExportManifest};
use protorec_core::recognition::{Decision, Outcome, Prototype, Query, RecognitionError, Scope};
use protorec_core::vector::Descriptor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use std::path::PathBuf;

use crate::config::DescriptorKind;
use crate::messages::MessageCatalog;

/// JSON body extractor whose rejections use the service error format.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(ApiJson(v)),
            Err(JsonRejection::BytesRejection(e)) if e.status() == StatusCode::PAYLOAD_TOO_LARGE => {
                Err(ApiError::PayloadTooLarge(0))
            }
            Err(e) => Err(ApiError::BadRequest(e.body_text())),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePayload {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB bytes, base64 encoded.
    pub pixels_b64: String,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub user_id: String,
    #[serde(default)]
    pub scope: Scope,
    #[serde(default)]
    pub descriptor: Option<Vec<f64>>,
    #[serde(default)]
    pub image: Option<ImagePayload>,
    #[serde(default)]
    pub roi: Option<RegionOfInterest>,
    #[serde(default)]
    pub metadata: MetadataRecord,
    #[serde(default)]
    pub rerank: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassInfo {
    pub class_synset: String,
    pub lemma: String,
    pub definition: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProposedClass {
    #[serde(flatten)]
    pub class: ClassInfo,
    pub distance: f64,
    pub prototype_id: PrototypeId,
    pub user_label: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HitBody {
    pub prototype_id: PrototypeId,
    pub distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QueryResponse {
    pub response_id: String,
    pub outcome: Outcome,
    /// Catalog key of `outcome`.
    pub outcome_key: String,
    pub message: String,
    pub proposed: Option<ProposedClass>,
    pub alternatives: Vec<ClassInfo>,
    pub hits: Vec<HitBody>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Confirm,
    PickAlternative,
    PickManual,
    RejectUnknown,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateRequest {
    pub response_id: String,
    pub decision: DecisionKind,
    #[serde(default)]
    pub class: Option<String>,
}

impl ValidateRequest {
    fn decision(&self) -> Result<Decision, ApiError> {
        let class = || {
            self.class
                .clone()
                .ok_or_else(|| ApiError::BadRequest("`class` is required for this decision".into()))
        };
        Ok(match self.decision {
            DecisionKind::Confirm => Decision::Confirm,
            DecisionKind::PickAlternative => Decision::PickAlternative(class()?),
            DecisionKind::PickManual => Decision::PickManual(class()?),
            DecisionKind::RejectUnknown => Decision::RejectUnknown,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClosenessBody {
    pub key: Closeness,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ValidateResponse {
    pub stored: bool,
    pub prototype_id: Option<PrototypeId>,
    pub class_synset: Option<String>,
    /// Log sequence number of the append, when the store is persistent.
    pub sequence: Option<u64>,
    pub closeness: Option<ClosenessBody>,
    pub store_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageBody {
    pub id: PrototypeId,
    pub class_synset: String,
    pub lemma: String,
    pub user_id: String,
    pub timestamp: i64,
    pub roi: Option<RegionOfInterest>,
    pub reliable: bool,
    pub user_label: Option<String>,
    pub metadata: MetadataRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageList {
    pub images: Vec<ImageBody>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ImagesParams {
    pub user: String,
}

fn some<'de, D: Deserializer<'de>, T: Deserialize<'de>>(d: D) -> Result<Option<T>, D::Error> {
    T::deserialize(d).map(Some)
}

#[derive(Debug, Clone, Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PatchImage {
    /// Absent leaves the label, `null` or `""` clears it.
    #[serde(default, deserialize_with = "some")]
    pub label: Option<Option<String>>,
    /// Admin only.
    #[serde(default)]
    pub reliable: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ExportParams {
    #[serde(default)]
    pub reliable_only: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExportResponse {
    pub path: PathBuf,
    pub manifest: ExportManifest,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RebuildResponse {
    pub snapshot_id: u64,
    pub drained: usize,
    pub overflow_after: usize,
    pub indexed: usize,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SearchParams {
    pub lemma: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynsetBody {
    pub synset_id: String,
    pub lemmas: Vec<String>,
    pub definition: String,
    pub root_category: RootCategory,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SearchResponse {
    pub lemma: String,
    pub results: Vec<SynsetBody>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HealthResponse {
    pub status: String,
    pub prototypes: usize,
    pub reliable: usize,
    pub indexed: usize,
    pub overflow: usize,
    pub snapshot_id: u64,
    pub last_sequence: Option<u64>,
}

fn class_info(state: &AppState, class: &str) -> ClassInfo {
    let s = state.engine.taxonomy().get(class);
    ClassInfo {
        class_synset: class.to_string(),
        lemma: s.and_then(|s| s.lemmas.first().cloned()).unwrap_or_else(|| class.to_string()),
        definition: s.map(|s| s.definition.clone()).unwrap_or_default(),
    }
}

fn require_admin(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(expected) = state.config.server.admin_token.as_deref() else {
        return Err(ApiError::Forbidden);
    };
    let given = headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or(ApiError::Forbidden)?;
    let same = given.len() == expected.len()
        && given.bytes().zip(expected.bytes()).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0;
    if same {
        Ok(())
    } else {
        Err(ApiError::Forbidden)
    }
}

fn query_descriptor(state: &AppState, req: &QueryRequest) -> Result<Descriptor, ApiError> {
    let store = &state.config.store;
    match (&req.descriptor, &req.image) {
        (Some(_), Some(_)) => Err(ApiError::BadRequest("send either `descriptor` or `image`, not both".into())),
        (None, None) => Err(ApiError::BadRequest("one of `descriptor` or `image` is required".into())),
        (Some(raw), None) => {
            if raw.iter().all(|v| *v == 0.0) {
                return Err(ApiError::Unprocessable("descriptor is the zero vector".into()));
            }
            let manifest = EmbeddingManifest::new("query", store.dim, store.metric);
            Ok(ingest_embedding(raw, &manifest, false)?)
        }
        (None, Some(img)) => {
            if store.descriptor != DescriptorKind::ColorHistogram {
                return Err(ApiError::Unprocessable("this store takes descriptors, not images".into()));
            }
            let roi = req
                .roi
                .ok_or_else(|| ApiError::Unprocessable("image queries need a region of interest".into()))?;
            let decoded_cap = state.config.server.max_image_bytes;
            if img.pixels_b64.len() / 4 * 3 > decoded_cap + 3 {
                return Err(ApiError::PayloadTooLarge(decoded_cap));
            }
            let pixels = base64::engine::general_purpose::STANDARD
                .decode(img.pixels_b64.as_bytes())
                .map_err(|e| ApiError::BadRequest(format!("pixels_b64: {e}")))?;
            if pixels.len() > decoded_cap {
                return Err(ApiError::PayloadTooLarge(decoded_cap));
            }
            let raster = RasterImage::new(img.width, img.height, pixels)?;
            Ok(ycbcr_histogram(&raster, &roi, store.histogram_bins, store.sigma_fraction)?)
        }
    }
}

pub async fn query(State(state): State<AppState>, ApiJson(req): ApiJson<QueryRequest>) -> Result<Json<QueryResponse>, ApiError> {
    if req.user_id.trim().is_empty() {
        return Err(ApiError::BadRequest("`user_id` must be nonempty".into()));
    }
    if let Some(roi) = &req.roi {
        if roi.w == 0 || roi.h == 0 {
            return Err(ApiError::Unprocessable("region of interest is empty".into()));
        }
    }
    let descriptor = query_descriptor(&state, &req)?;
    let q = Query {
        descriptor,
        metadata: req.metadata.clone(),
        user_id: req.user_id.clone(),
        roi: req.roi,
    };
    if req.scope == Scope::All && state.engine.reliable_len() == 0 {
        return Err(ApiError::EmptyStore);
    }
    let rerank = req.rerank.unwrap_or(state.config.recognition.rerank);
    let engine = state.engine.clone();
    let resp = tokio::task::spawn_blocking(move || match engine.classify(&q, req.scope, rerank) {
        Err(RecognitionError::UnknownUser(_)) => engine.unknown_response(&q),
        other => other,
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;

    let proposed = resp.proposed.as_ref().map(|p| ProposedClass {
        class: class_info(&state, &p.class_synset),
        distance: p.distance,
        prototype_id: p.prototype_id,
        user_label: p.user_label.clone(),
    });
    let (outcome, message) = match &proposed {
        Some(p) => (resp.outcome, state.messages.outcome(resp.outcome, &p.class.lemma)),
        None => (Outcome::Unknown, state.messages.outcome(Outcome::Unknown, "")),
    };
    Ok(Json(QueryResponse {
        outcome_key: outcome.key(),
        outcome,
        message,
        proposed,
        alternatives: resp.alternatives.iter().map(|c| class_info(&state, c)).collect(),
        hits: resp
            .hits
            .iter()
            .map(|h| HitBody {
                prototype_id: h.prototype_id,
                distance: h.distance,
            })
            .collect(),
        response_id: resp.response_id,
    }))
}

fn closeness(state: &AppState, catalog: &MessageCatalog, proposed: &str, stored: &str) -> Option<ClosenessBody> {
    let tax = state.engine.taxonomy();
    let shared = tax.common_ancestor_depth(proposed, stored).ok()?;
    let depth = tax.depth(proposed).ok()?;
    let key = closeness_message(shared, depth);
    Some(ClosenessBody {
        key,
        message: catalog.closeness(key).to_string(),
    })
}

pub async fn validate(
    State(state): State<AppState>,
    ApiJson(req): ApiJson<ValidateRequest>,
) -> Result<Json<ValidateResponse>, ApiError> {
    let decision = req.decision()?;
    let engine = state.engine.clone();
    let id = req.response_id.clone();
    let v = tokio::task::spawn_blocking(move || engine.validate(&id, &decision))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    let closeness = match (&v.proposed, &v.prototype) {
        (Some(proposed), Some(p)) => closeness(&state, &state.messages, proposed, &p.class_synset),
        _ => None,
    };
    Ok(Json(ValidateResponse {
        stored: v.prototype.is_some(),
        prototype_id: v.prototype.as_ref().map(|p| p.id),
        class_synset: v.prototype.as_ref().map(|p| p.class_synset.clone()),
        sequence: v.sequence,
        closeness,
        store_size: state.engine.len(),
    }))
}

fn image_body(state: &AppState, p: Prototype) -> ImageBody {
    ImageBody {
        lemma: class_info(state, &p.class_synset).lemma,
        id: p.id,
        class_synset: p.class_synset,
        user_id: p.user_id,
        timestamp: p.timestamp,
        roi: p.roi,
        reliable: p.reliable,
        user_label: p.user_label,
        metadata: p.metadata,
    }
}

pub async fn list_images(
    State(state): State<AppState>,
    params: Result<QueryParams<ImagesParams>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<ImageList>, ApiError> {
    let QueryParams(params) = params.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let images = state
        .engine
        .prototypes(Some(&params.user))
        .into_iter()
        .map(|p| image_body(&state, p))
        .collect();
    Ok(Json(ImageList { images }))
}

pub async fn patch_image(
    State(state): State<AppState>,
    Path(id): Path<PrototypeId>,
    headers: HeaderMap,
    ApiJson(patch): ApiJson<PatchImage>,
) -> Result<Json<ImageBody>, ApiError> {
    if state.engine.get(id).is_none() {
        return Err(RecognitionError::UnknownPrototype(id).into());
    }
    if patch.reliable.is_some() {
        require_admin(&state, &headers)?;
    }
    let mut current = state.engine.get(id);
    if let Some(label) = patch.label {
        let label = label.map(|l| l.trim().to_string()).filter(|l| !l.is_empty());
        current = Some(state.engine.set_label(id, label)?);
    }
    if let Some(reliable) = patch.reliable {
        current = Some(state.engine.admin_flag(id, reliable)?);
    }
    let p = current.ok_or(RecognitionError::UnknownPrototype(id))?;
    Ok(Json(image_body(&state, p)))
}

pub async fn export(
    State(state): State<AppState>,
    headers: HeaderMap,
    params: Result<QueryParams<ExportParams>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<ExportResponse>, ApiError> {
    require_admin(&state, &headers)?;
    let QueryParams(params) = params.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let base = state.data_dir.clone().unwrap_or_else(std::env::temp_dir).join("exports");
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let dir = base.join(format!("export-{stamp}"));
    let engine = state.engine.clone();
    let out = dir.clone();
    let manifest = tokio::task::spawn_blocking(move || {
        let all = engine.prototypes(None);
        export_dataset(all.iter(), engine.taxonomy(), &out, params.reliable_only)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(ExportResponse { path: dir, manifest }))
}

pub async fn rebuild(State(state): State<AppState>, headers: HeaderMap) -> Result<Json<RebuildResponse>, ApiError> {
    require_admin(&state, &headers)?;
    let engine = state.engine.clone();
    let snapshot = state.data_dir.as_ref().map(|d| d.join(crate::INDEX_FILE_NAME));
    let report = tokio::task::spawn_blocking(move || {
        let r = engine.rebuild()?;
        if let Some(path) = snapshot {
            engine.save_index(path)?;
        }
        Ok::<_, RecognitionError>(r)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(RebuildResponse {
        snapshot_id: report.snapshot_id,
        drained: report.drained,
        overflow_after: report.overflow_after,
        indexed: report.indexed,
    }))
}

pub async fn taxonomy_search(
    State(state): State<AppState>,
    params: Result<QueryParams<SearchParams>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<SearchResponse>, ApiError> {
    let QueryParams(params) = params.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let tax = state.engine.taxonomy();
    let results = tax
        .lookup_lemma(&params.lemma)
        .into_iter()
        .filter_map(|(id, _)| tax.get(id))
        .map(|s| SynsetBody {
            synset_id: s.synset_id.clone(),
            lemmas: s.lemmas.clone(),
            definition: s.definition.clone(),
            root_category: s.root_category,
        })
        .collect();
    Ok(Json(SearchResponse {
        lemma: params.lemma,
        results,
    }))
}

pub async fn messages(State(state): State<AppState>) -> Json<MessageCatalog> {
    Json((*state.messages).clone())
}

pub async fn health(State(state): State<AppState>) -> Json<HealthResponse> {
    let (indexed, overflow, snapshot_id) = state.engine.index_stats();
    Json(HealthResponse {
        status: "ok".into(),
        prototypes: state.engine.len(),
        reliable: state.engine.reliable_len(),
        indexed,
        overflow,
        snapshot_id,
        last_sequence: state.engine.last_log_seq(),
    })
}
