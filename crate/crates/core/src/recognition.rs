//! Query-time engine: nearest-prototype retrieval, confidence bands,
//! alternatives, optional feature-code reranking, and the validation flow
//! that grows the store.

use crate::ann::{AnnForest, ForestParams, IndexError, PrototypeId, RankedHit, SearchBudget};
use crate::features::RegionOfInterest;
use crate::metadata::{rerank_with_feature_code, FeatureCodeHistograms, MetadataRecord, DEFAULT_RHO};
use crate::ontology::Taxonomy;
use crate::pca::{PcaError, PcaModel};
use crate::persistence::{LogOp, PersistenceError, PrototypeLog};
use crate::vector::{Descriptor, Metric, VectorError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};
use thiserror::Error;

/// Neighbors retrieved per query.
pub const DEFAULT_K: usize = 10;
pub const DEFAULT_LAMBDA: f64 = 0.6;
pub const DEFAULT_THETA: f64 = 1.2;
pub const DEFAULT_TOKEN_TTL_MS: i64 = 24 * 60 * 60 * 1000;

#[derive(Debug, Error)]
pub enum RecognitionError {
    #[error("descriptor has {actual} components, the store expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("descriptor uses {actual}, the store uses {expected}")]
    MetricMismatch { expected: Metric, actual: Metric },
    #[error("user `{0}` has no images")]
    UnknownUser(String),
    #[error("unknown or expired response id")]
    UnknownResponse,
    #[error("response was already validated")]
    AlreadyValidated,
    #[error("unknown synset `{0}`")]
    UnknownSynset(String),
    #[error("`{0}` is not among the offered alternatives")]
    NotAnAlternative(String),
    #[error("the response proposed no class to confirm")]
    NothingToConfirm,
    #[error("unknown prototype {0}")]
    UnknownPrototype(PrototypeId),
    #[error("thresholds need 0 <= lambda < theta (got {lambda}, {theta})")]
    InvalidThresholds { lambda: f64, theta: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Persistence(#[from] PersistenceError),
}

/// A stored, labeled descriptor. `descriptor` is kept as submitted; the
/// index holds the pipeline-transformed copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub id: PrototypeId,
    pub descriptor: Descriptor,
    pub class_synset: String,
    #[serde(default)]
    pub metadata: MetadataRecord,
    pub user_id: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: i64,
    #[serde(default)]
    pub roi: Option<RegionOfInterest>,
    pub reliable: bool,
    #[serde(default)]
    pub user_label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawThresholds")]
pub struct ConfidenceThresholds {
    pub lambda: f64,
    pub theta: f64,
}

#[derive(Deserialize)]
struct RawThresholds {
    lambda: f64,
    theta: f64,
}

impl TryFrom<RawThresholds> for ConfidenceThresholds {
    type Error = RecognitionError;

    fn try_from(r: RawThresholds) -> Result<Self, Self::Error> {
        Self::new(r.lambda, r.theta)
    }
}

impl ConfidenceThresholds {
    pub fn new(lambda: f64, theta: f64) -> Result<Self, RecognitionError> {
        if !(lambda >= 0.0 && lambda < theta && theta.is_finite()) {
            return Err(RecognitionError::InvalidThresholds { lambda, theta });
        }
        Ok(Self { lambda, theta })
    }
}

impl Default for ConfidenceThresholds {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            theta: DEFAULT_THETA,
        }
    }
}

/// Confidence band. The derived order runs from most to least confident.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "level", rename_all = "snake_case")]
pub enum Outcome {
    Certain,
    Level(u8),
    Unknown,
}

impl Outcome {
    /// Message-catalog key: `certain`, `level_0` .. `level_9`, `unknown`.
    pub fn key(self) -> String {
        match self {
            Outcome::Certain => "certain".into(),
            Outcome::Level(l) => format!("level_{l}"),
            Outcome::Unknown => "unknown".into(),
        }
    }

    pub fn all() -> impl Iterator<Item = Outcome> {
        std::iter::once(Outcome::Certain)
            .chain((0..10).map(Outcome::Level))
            .chain(std::iter::once(Outcome::Unknown))
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Maps the best distance to a band: certain below lambda, ten levels over
/// the closed range [lambda, theta], unknown above theta.
pub fn confidence_level(d_min: f64, thr: ConfidenceThresholds) -> Outcome {
    if d_min < thr.lambda {
        Outcome::Certain
    } else if d_min <= thr.theta {
        let l = (10.0 * (d_min - thr.lambda) / (thr.theta - thr.lambda)).floor();
        Outcome::Level(l.clamp(0.0, 9.0) as u8)
    } else {
        Outcome::Unknown
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Only the querying user's images.
    Own,
    #[default]
    All,
}

/// What a client submits.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub descriptor: Descriptor,
    pub metadata: MetadataRecord,
    pub user_id: String,
    pub roi: Option<RegionOfInterest>,
}

impl Query {
    pub fn new(descriptor: Descriptor, user_id: impl Into<String>) -> Self {
        Self {
            descriptor,
            metadata: MetadataRecord::new(),
            user_id: user_id.into(),
            roi: None,
        }
    }

    pub fn with_metadata(mut self, metadata: MetadataRecord) -> Self {
        self.metadata = metadata;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub class_synset: String,
    pub distance: f64,
    pub prototype_id: PrototypeId,
    pub user_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionResponse {
    pub response_id: String,
    pub proposed: Option<Proposal>,
    pub alternatives: Vec<String>,
    pub outcome: Outcome,
    pub hits: Vec<RankedHit>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "class", rename_all = "snake_case")]
pub enum Decision {
    Confirm,
    PickAlternative(String),
    PickManual(String),
    RejectUnknown,
}

/// Result of a validation: the stored prototype (none for `RejectUnknown`),
/// the class the response had proposed and the log sequence of the append.
#[derive(Debug, Clone, PartialEq)]
pub struct Validated {
    pub prototype: Option<Prototype>,
    pub proposed: Option<String>,
    pub sequence: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifyOptions {
    pub k: usize,
    pub thresholds: ConfidenceThresholds,
    pub rerank: bool,
    pub rho: f64,
    pub budget: SearchBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Dimension of submitted descriptors.
    pub dim: usize,
    pub metric: Metric,
    pub l2_normalize: bool,
    pub k: usize,
    pub thresholds: ConfidenceThresholds,
    pub rho: f64,
    pub forest: ForestParams,
    pub budget: SearchBudget,
    pub token_ttl_ms: i64,
}

impl EngineConfig {
    pub fn new(dim: usize, metric: Metric) -> Self {
        Self {
            dim,
            metric,
            l2_normalize: true,
            k: DEFAULT_K,
            thresholds: ConfidenceThresholds::default(),
            rho: DEFAULT_RHO,
            forest: ForestParams::default(),
            budget: SearchBudget::default(),
            token_ttl_ms: DEFAULT_TOKEN_TTL_MS,
        }
    }

    pub fn options(&self, rerank: bool) -> ClassifyOptions {
        ClassifyOptions {
            k: self.k,
            thresholds: self.thresholds,
            rerank,
            rho: self.rho,
            budget: self.budget,
        }
    }
}

pub trait Clock: Send + Sync + fmt::Debug {
    fn now_ms(&self) -> i64;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> i64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as i64)
    }
}

/// Settable clock for tests.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(ms: i64) -> Self {
        Self(AtomicI64::new(ms))
    }

    pub fn advance(&self, ms: i64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RebuildReport {
    pub snapshot_id: u64,
    /// Overflow items folded into the new trees.
    pub drained: usize,
    /// Items added while the rebuild ran, now in the new overflow table.
    pub overflow_after: usize,
    pub indexed: usize,
}

#[derive(Debug)]
struct State {
    prototypes: BTreeMap<PrototypeId, Prototype>,
    index: AnnForest,
    next_id: PrototypeId,
    by_user: HashMap<String, Vec<PrototypeId>>,
    /// Feature-code counts over reliable prototypes.
    code_counts: BTreeMap<String, BTreeMap<String, usize>>,
    reliable: usize,
    log: Option<PrototypeLog>,
    snapshot_id: u64,
}

#[derive(Debug)]
struct Pending {
    issued_at: i64,
    query: Query,
    proposed: Option<String>,
    alternatives: Vec<String>,
    consumed: bool,
}

#[derive(Debug, Default)]
struct Tokens {
    by_id: HashMap<String, Pending>,
    order: VecDeque<(i64, String)>,
}

/// The prototype store plus its index. Reads run concurrently; writes take
/// the store lock one at a time and hit the log before memory.
#[derive(Debug)]
pub struct Recognizer {
    config: EngineConfig,
    taxonomy: Arc<Taxonomy>,
    pca: Option<PcaModel>,
    state: RwLock<State>,
    tokens: Mutex<Tokens>,
    rebuild_lock: Mutex<()>,
    clock: Arc<dyn Clock>,
}

impl Recognizer {
    pub fn new(config: EngineConfig, taxonomy: Arc<Taxonomy>) -> Result<Self, RecognitionError> {
        Self::with_parts(config, taxonomy, None, Arc::new(SystemClock))
    }

    pub fn with_parts(
        config: EngineConfig,
        taxonomy: Arc<Taxonomy>,
        pca: Option<PcaModel>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, RecognitionError> {
        if config.dim == 0 {
            return Err(RecognitionError::InvalidConfig("dim must be positive".into()));
        }
        if config.k == 0 {
            return Err(RecognitionError::InvalidConfig("k must be positive".into()));
        }
        if let Some(p) = &pca {
            if p.input_dim() != config.dim {
                return Err(RecognitionError::InvalidConfig(format!(
                    "PCA model expects {}-d input, store dim is {}",
                    p.input_dim(),
                    config.dim
                )));
            }
        }
        let (index_dim, index_metric) = match &pca {
            Some(p) => (p.n_components(), Metric::Euclidean),
            None => (config.dim, config.metric),
        };
        let index = AnnForest::empty(index_dim, index_metric, config.forest);
        Ok(Self {
            state: RwLock::new(State {
                prototypes: BTreeMap::new(),
                index,
                next_id: 1,
                by_user: HashMap::new(),
                code_counts: BTreeMap::new(),
                reliable: 0,
                log: None,
                snapshot_id: 0,
            }),
            config,
            taxonomy,
            pca,
            tokens: Mutex::new(Tokens::default()),
            rebuild_lock: Mutex::new(()),
            clock,
        })
    }

    /// Loads existing prototypes (from a replayed log or an import) and
    /// builds the index over them. Later writes go to `log` when given.
    pub fn restore(
        &self,
        prototypes: impl IntoIterator<Item = Prototype>,
        log: Option<PrototypeLog>,
    ) -> Result<(), RecognitionError> {
        let mut st = self.state.write().unwrap();
        if !st.prototypes.is_empty() {
            return Err(RecognitionError::InvalidConfig("restore needs an empty store".into()));
        }
        let mut prepared = Vec::new();
        let mut loaded = BTreeMap::new();
        for p in prototypes {
            self.check_class(&p.class_synset)?;
            prepared.push((p.id, self.prepare(&p.descriptor)?));
            loaded.insert(p.id, p);
        }
        st.index = if prepared.is_empty() {
            AnnForest::empty(st.index.dim(), st.index.metric(), self.config.forest)
        } else {
            AnnForest::build(&prepared, self.config.forest)?
        };
        for (_, p) in loaded {
            st.next_id = st.next_id.max(p.id + 1);
            register(&mut st, p);
        }
        st.log = log;
        st.snapshot_id += 1;
        Ok(())
    }

    pub fn attach_log(&self, log: PrototypeLog) {
        self.state.write().unwrap().log = Some(log);
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn taxonomy(&self) -> &Arc<Taxonomy> {
        &self.taxonomy
    }

    pub fn len(&self) -> usize {
        self.state.read().unwrap().prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn reliable_len(&self) -> usize {
        self.state.read().unwrap().reliable
    }

    pub fn get(&self, id: PrototypeId) -> Option<Prototype> {
        self.state.read().unwrap().prototypes.get(&id).cloned()
    }

    /// All prototypes, optionally those of one user, by id.
    pub fn prototypes(&self, user: Option<&str>) -> Vec<Prototype> {
        let st = self.state.read().unwrap();
        st.prototypes
            .values()
            .filter(|p| user.is_none_or(|u| p.user_id == u))
            .cloned()
            .collect()
    }

    pub fn index_stats(&self) -> (usize, usize, u64) {
        let st = self.state.read().unwrap();
        (st.index.indexed_len(), st.index.overflow().len(), st.snapshot_id)
    }

    pub fn last_log_seq(&self) -> Option<u64> {
        self.state.read().unwrap().log.as_ref().map(PrototypeLog::last_seq)
    }

    /// Histograms of feature codes over reliable prototypes.
    pub fn feature_code_histograms(&self) -> FeatureCodeHistograms {
        let st = self.state.read().unwrap();
        histograms_for(&st.code_counts, None)
    }

    /// Checks and transforms a submitted descriptor into index space.
    fn prepare(&self, d: &Descriptor) -> Result<Descriptor, RecognitionError> {
        if d.dim() != self.config.dim {
            return Err(RecognitionError::DimensionMismatch {
                expected: self.config.dim,
                actual: d.dim(),
            });
        }
        if d.metric() != self.config.metric {
            return Err(RecognitionError::MetricMismatch {
                expected: self.config.metric,
                actual: d.metric(),
            });
        }
        let d = if self.config.l2_normalize {
            d.l2_normalized()?
        } else {
            d.clone()
        };
        Ok(match &self.pca {
            Some(p) => p.transform(&d)?,
            None => d,
        })
    }

    fn check_class(&self, class: &str) -> Result<(), RecognitionError> {
        if self.taxonomy.contains(class) {
            Ok(())
        } else {
            Err(RecognitionError::UnknownSynset(class.to_string()))
        }
    }

    pub fn classify(&self, q: &Query, scope: Scope, rerank: bool) -> Result<RecognitionResponse, RecognitionError> {
        self.classify_with(q, scope, &self.config.options(rerank))
    }

    pub fn classify_with(&self, q: &Query, scope: Scope, opts: &ClassifyOptions) -> Result<RecognitionResponse, RecognitionError> {
        if opts.k == 0 {
            return Err(RecognitionError::Index(IndexError::InvalidK));
        }
        let prepared = self.prepare(&q.descriptor)?;
        let thr = opts.thresholds;
        let (hits, classes, labels) = {
            let st = self.state.read().unwrap();
            let hits = match scope {
                Scope::All if st.reliable == 0 => Vec::new(),
                Scope::All => st.index.search_filtered(&prepared, opts.k, opts.budget, |id| {
                    st.prototypes.get(&id).is_some_and(|p| p.reliable)
                })?,
                Scope::Own => {
                    let ids = st
                        .by_user
                        .get(&q.user_id)
                        .ok_or_else(|| RecognitionError::UnknownUser(q.user_id.clone()))?;
                    let reliable: Vec<PrototypeId> =
                        ids.iter().copied().filter(|id| st.prototypes[id].reliable).collect();
                    if reliable.is_empty() {
                        Vec::new()
                    } else {
                        st.index.rank_among(&prepared, opts.k, &reliable)?
                    }
                }
            };
            // best distance and nearest prototype per class, in rank order
            let mut classes: Vec<(String, f64)> = Vec::new();
            let mut labels: HashMap<String, (PrototypeId, Option<String>)> = HashMap::new();
            for h in hits.iter().filter(|h| h.distance <= thr.theta) {
                let p = &st.prototypes[&h.prototype_id];
                if !labels.contains_key(&p.class_synset) {
                    labels.insert(p.class_synset.clone(), (p.id, p.user_label.clone()));
                    classes.push((p.class_synset.clone(), h.distance));
                }
            }
            if opts.rerank && classes.len() >= 2 {
                if let Some(code) = q.metadata.feature_code() {
                    let top: Vec<&str> = classes.iter().take(2).map(|(c, _)| c.as_str()).collect();
                    let hists = histograms_for(&st.code_counts, Some(&top));
                    classes = rerank_with_feature_code(&classes, Some(&code), &hists, opts.rho);
                }
            }
            (hits, classes, labels)
        };

        let outcome = hits.first().map_or(Outcome::Unknown, |h| confidence_level(h.distance, thr));
        let alternatives: Vec<String> = classes.iter().map(|(c, _)| c.clone()).collect();
        let proposed = match outcome {
            Outcome::Unknown => None,
            _ => classes.first().map(|(c, d)| {
                let (prototype_id, user_label) = labels[c].clone();
                Proposal {
                    class_synset: c.clone(),
                    distance: *d,
                    prototype_id,
                    user_label,
                }
            }),
        };
        let response_id = self.issue_token(Pending {
            issued_at: 0,
            query: q.clone(),
            proposed: proposed.as_ref().map(|p| p.class_synset.clone()),
            alternatives: alternatives.clone(),
            consumed: false,
        });
        Ok(RecognitionResponse {
            response_id,
            proposed,
            alternatives,
            outcome,
            hits,
        })
    }

    /// An unknown-outcome response for `q` without searching, e.g. when an
    /// own-scope user has no images yet. The token accepts `PickManual`.
    pub fn unknown_response(&self, q: &Query) -> Result<RecognitionResponse, RecognitionError> {
        self.prepare(&q.descriptor)?;
        let response_id = self.issue_token(Pending {
            issued_at: 0,
            query: q.clone(),
            proposed: None,
            alternatives: Vec::new(),
            consumed: false,
        });
        Ok(RecognitionResponse {
            response_id,
            proposed: None,
            alternatives: Vec::new(),
            outcome: Outcome::Unknown,
            hits: Vec::new(),
        })
    }

    fn issue_token(&self, mut pending: Pending) -> String {
        let now = self.clock.now_ms();
        pending.issued_at = now;
        let mut tokens = self.tokens.lock().unwrap();
        let ttl = self.config.token_ttl_ms;
        while let Some((t, _)) = tokens.order.front() {
            if now - t <= ttl {
                break;
            }
            let (_, id) = tokens.order.pop_front().unwrap();
            tokens.by_id.remove(&id);
        }
        let id = loop {
            let id = format!("{:032x}", rand::random::<u128>());
            if !tokens.by_id.contains_key(&id) {
                break id;
            }
        };
        tokens.order.push_back((now, id.clone()));
        tokens.by_id.insert(id.clone(), pending);
        id
    }

    /// Resolves a pending response. Stores one prototype, except for
    /// `RejectUnknown`, which only consumes the token.
    pub fn validate(&self, response_id: &str, decision: &Decision) -> Result<Validated, RecognitionError> {
        let mut tokens = self.tokens.lock().unwrap();
        let now = self.clock.now_ms();
        let pending = tokens.by_id.get(response_id).ok_or(RecognitionError::UnknownResponse)?;
        if now - pending.issued_at > self.config.token_ttl_ms {
            return Err(RecognitionError::UnknownResponse);
        }
        if pending.consumed {
            return Err(RecognitionError::AlreadyValidated);
        }
        let class = match decision {
            Decision::Confirm => Some(pending.proposed.clone().ok_or(RecognitionError::NothingToConfirm)?),
            Decision::PickAlternative(c) => {
                self.check_class(c)?;
                if !pending.alternatives.contains(c) {
                    return Err(RecognitionError::NotAnAlternative(c.clone()));
                }
                Some(c.clone())
            }
            Decision::PickManual(s) => {
                self.check_class(s)?;
                Some(s.clone())
            }
            Decision::RejectUnknown => None,
        };
        let (stored, sequence) = match class {
            Some(class) => {
                let q = &pending.query;
                let (p, seq) = self.insert(q.descriptor.clone(), class, q.metadata.clone(), q.user_id.clone(), q.roi, true)?;
                (Some(p), seq)
            }
            None => (None, None),
        };
        let pending = tokens.by_id.get_mut(response_id).expect("token present");
        pending.consumed = true;
        Ok(Validated {
            prototype: stored,
            proposed: pending.proposed.clone(),
            sequence,
        })
    }

    /// Adds a prototype directly (seeding, batch import).
    pub fn add_prototype(
        &self,
        descriptor: Descriptor,
        class_synset: &str,
        metadata: MetadataRecord,
        user_id: &str,
        roi: Option<RegionOfInterest>,
    ) -> Result<Prototype, RecognitionError> {
        self.check_class(class_synset)?;
        Ok(self.insert(descriptor, class_synset.to_string(), metadata, user_id.to_string(), roi, true)?.0)
    }

    fn insert(
        &self,
        descriptor: Descriptor,
        class_synset: String,
        metadata: MetadataRecord,
        user_id: String,
        roi: Option<RegionOfInterest>,
        reliable: bool,
    ) -> Result<(Prototype, Option<u64>), RecognitionError> {
        let prepared = self.prepare(&descriptor)?;
        let mut st = self.state.write().unwrap();
        let p = Prototype {
            id: st.next_id,
            descriptor,
            class_synset,
            metadata,
            user_id,
            timestamp: self.clock.now_ms(),
            roi,
            reliable,
            user_label: None,
        };
        let seq = match st.log.as_mut() {
            Some(log) => Some(log.append(&LogOp::Add { prototype: p.clone() })?),
            None => None,
        };
        st.index.add(p.id, prepared)?;
        st.next_id += 1;
        register(&mut st, p.clone());
        Ok((p, seq))
    }

    /// Marks a prototype reliable or not; unreliable ones are never retrieved.
    pub fn admin_flag(&self, id: PrototypeId, reliable: bool) -> Result<Prototype, RecognitionError> {
        let mut st = self.state.write().unwrap();
        let was = st.prototypes.get(&id).ok_or(RecognitionError::UnknownPrototype(id))?.reliable;
        if let Some(log) = st.log.as_mut() {
            log.append(&LogOp::Flag { id, reliable })?;
        }
        if was != reliable {
            let p = st.prototypes[&id].clone();
            count_code(&mut st, &p, !reliable);
            st.reliable = if reliable { st.reliable + 1 } else { st.reliable - 1 };
        }
        let p = st.prototypes.get_mut(&id).expect("checked above");
        p.reliable = reliable;
        Ok(p.clone())
    }

    pub fn set_label(&self, id: PrototypeId, label: Option<String>) -> Result<Prototype, RecognitionError> {
        let mut st = self.state.write().unwrap();
        if !st.prototypes.contains_key(&id) {
            return Err(RecognitionError::UnknownPrototype(id));
        }
        if let Some(log) = st.log.as_mut() {
            log.append(&LogOp::Label { id, label: label.clone() })?;
        }
        let p = st.prototypes.get_mut(&id).expect("checked above");
        p.user_label = label;
        Ok(p.clone())
    }

    /// Rebuilds the forest over every stored item without blocking queries,
    /// then swaps it in. Items added meanwhile carry over as overflow.
    pub fn rebuild(&self) -> Result<RebuildReport, RecognitionError> {
        let _only_one = self.rebuild_lock.lock().unwrap();
        let (items, drained, dim, metric, seed) = {
            let st = self.state.read().unwrap();
            let seed = self.config.forest.seed.wrapping_add(st.snapshot_id);
            (st.index.items(), st.index.overflow().len(), st.index.dim(), st.index.metric(), seed)
        };
        let params = ForestParams {
            seed,
            ..self.config.forest
        };
        let mut fresh = if items.is_empty() {
            AnnForest::empty(dim, metric, params)
        } else {
            AnnForest::build(&items, params)?
        };
        let mut st = self.state.write().unwrap();
        for (id, d) in st.index.overflow().iter() {
            if !fresh.contains(*id) {
                fresh.add(*id, d.clone())?;
            }
        }
        st.index = fresh;
        st.snapshot_id += 1;
        Ok(RebuildReport {
            snapshot_id: st.snapshot_id,
            drained,
            overflow_after: st.index.overflow().len(),
            indexed: st.index.indexed_len(),
        })
    }

    /// Writes the current forest snapshot.
    pub fn save_index(&self, path: impl AsRef<std::path::Path>) -> Result<(), RecognitionError> {
        Ok(self.state.read().unwrap().index.save_snapshot(path)?)
    }

    pub fn pending_tokens(&self) -> usize {
        self.tokens.lock().unwrap().by_id.len()
    }
}

fn register(st: &mut State, p: Prototype) {
    st.by_user.entry(p.user_id.clone()).or_default().push(p.id);
    if p.reliable {
        st.reliable += 1;
        count_code(st, &p, false);
    }
    st.prototypes.insert(p.id, p);
}

fn count_code(st: &mut State, p: &Prototype, remove: bool) {
    let Some(code) = p.metadata.feature_code() else {
        return;
    };
    let class = st.code_counts.entry(p.class_synset.clone()).or_default();
    if remove {
        if let Some(n) = class.get_mut(&code) {
            *n -= 1;
            if *n == 0 {
                class.remove(&code);
            }
        }
        if class.is_empty() {
            st.code_counts.remove(&p.class_synset);
        }
    } else {
        *class.entry(code).or_default() += 1;
    }
}

fn histograms_for(counts: &BTreeMap<String, BTreeMap<String, usize>>, only: Option<&[&str]>) -> FeatureCodeHistograms {
    let mut pairs = Vec::new();
    for (class, codes) in counts {
        if only.is_some_and(|o| !o.contains(&class.as_str())) {
            continue;
        }
        for (code, n) in codes {
            pairs.extend(std::iter::repeat_n((class.as_str(), code.as_str()), *n));
        }
    }
    FeatureCodeHistograms::build(pairs)
}
