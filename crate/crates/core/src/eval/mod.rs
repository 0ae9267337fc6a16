//! Evaluation harness: stratified k-fold top-1/top-10, accuracy over time,
//! minimum-samples sweep, PCA report, fusion sweep, metadata kNN and
//! timing benchmarks.

pub mod synth;
mod timing;

pub use timing::{timing_benchmark, TimingConfig, TimingReport, TimingRow};

use crate::ann::{top_k, AnnForest, ForestParams, IndexError, RankedHit, SearchBudget};
use crate::features::{read_embedding_file, write_embedding_file, EmbeddingManifest, EmbeddingRecord, FeatureError};
use crate::metadata::{
    metadata_knn_classify, rerank_with_feature_code, FeatureCodeHistograms, HierarchyLevel, MetadataEncoder, MetadataError,
    MetadataRecord, MetadataSchema, DEFAULT_RHO,
};
use crate::ontology::Taxonomy;
use crate::pca::{PcaError, PcaModel};
use crate::persistence::{export_dataset, import_dataset, PersistenceError};
use crate::recognition::Prototype;
use crate::vector::{self, unit_scaled, Descriptor, FusionWeight, Metric, VectorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

pub const DEFAULT_FOLDS: usize = 5;
pub const TOP_N: usize = 10;
pub const SECOND_CHANNEL_FILE: &str = "channel2.tsv";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Persistence(#[from] PersistenceError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One labeled vector of an evaluation corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub class: String,
    pub values: Vec<f64>,
    /// Optional second descriptor channel for distance fusion.
    pub second: Option<Vec<f64>>,
    pub metadata: MetadataRecord,
    pub timestamp: i64,
}

impl Sample {
    pub fn new(id: u64, class: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            id,
            class: class.into(),
            values,
            second: None,
            metadata: MetadataRecord::new(),
            timestamp: id as i64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub metric: Metric,
    pub second_metric: Option<Metric>,
    pub samples: Vec<Sample>,
    pub taxonomy: Option<Taxonomy>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.values.len())
    }

    /// Sorted distinct class ids.
    pub fn classes(&self) -> Vec<String> {
        let mut c: Vec<String> = self.samples.iter().map(|s| s.class.clone()).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn class_sizes(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for s in &self.samples {
            *m.entry(s.class.clone()).or_insert(0) += 1;
        }
        m
    }

    /// Keeps classes with at least `min` samples.
    pub fn with_min_samples(&self, min: usize) -> Dataset {
        let sizes = self.class_sizes();
        Dataset {
            samples: self.samples.iter().filter(|s| sizes[&s.class] >= min).cloned().collect(),
            ..self.clone()
        }
    }

    fn check(&self) -> Result<(), EvalError> {
        let dim = self.dim();
        for s in &self.samples {
            if s.values.len() != dim {
                return Err(EvalError::InvalidConfig(format!("sample {} has dimension {}", s.id, s.values.len())));
            }
        }
        Ok(())
    }

    /// Loads an export directory (reliable prototypes only) or a single
    /// embedding file.
    pub fn load(path: impl AsRef<Path>) -> Result<Dataset, EvalError> {
        let path = path.as_ref();
        if path.is_dir() {
            let imported = import_dataset(path)?;
            let metric = imported.manifest.metric.unwrap_or(Metric::Euclidean);
            let mut samples: Vec<Sample> = imported
                .prototypes
                .into_values()
                .filter(|p| p.reliable)
                .map(|p| Sample {
                    id: p.id,
                    class: p.class_synset,
                    values: p.descriptor.into_values(),
                    second: None,
                    metadata: p.metadata,
                    timestamp: p.timestamp,
                })
                .collect();
            let mut second_metric = None;
            let second = path.join(SECOND_CHANNEL_FILE);
            if second.exists() {
                let (m, records) = read_embedding_file(BufReader::new(std::fs::File::open(second)?))?;
                second_metric = Some(m.metric);
                let by_id: HashMap<String, Vec<f64>> = records.into_iter().map(|r| (r.external_id, r.values)).collect();
                for s in &mut samples {
                    s.second = by_id.get(&s.id.to_string()).cloned();
                }
            }
            Ok(Dataset {
                metric,
                second_metric,
                samples,
                taxonomy: Some(imported.taxonomy),
            })
        } else {
            let (m, records) = read_embedding_file(BufReader::new(std::fs::File::open(path)?))?;
            let samples = records
                .into_iter()
                .enumerate()
                .map(|(i, r)| Sample::new(i as u64, r.class_synset, r.values))
                .collect();
            Ok(Dataset {
                metric: m.metric,
                second_metric: None,
                samples,
                taxonomy: None,
            })
        }
    }

    /// Writes the export directory layout, plus the second channel if any.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), EvalError> {
        let dir = dir.as_ref();
        let prototypes = self
            .samples
            .iter()
            .map(|s| {
                Ok(Prototype {
                    id: s.id,
                    descriptor: Descriptor::new(s.values.clone(), self.metric)?,
                    class_synset: s.class.clone(),
                    metadata: s.metadata.clone(),
                    user_id: "synthetic".into(),
                    timestamp: s.timestamp,
                    roi: None,
                    reliable: true,
                    user_label: None,
                })
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        let taxonomy = match &self.taxonomy {
            Some(t) => t.clone(),
            None => synth::taxonomy_for(self.samples.iter().map(|s| s.class.as_str())),
        };
        export_dataset(prototypes.iter(), &taxonomy, dir, false)?;
        if let Some(metric) = self.second_metric {
            let records: Vec<EmbeddingRecord> = self
                .samples
                .iter()
                .filter_map(|s| {
                    s.second.as_ref().map(|v| EmbeddingRecord {
                        external_id: s.id.to_string(),
                        class_synset: s.class.clone(),
                        values: v.clone(),
                    })
                })
                .collect();
            let dim = records.first().map_or(0, |r| r.values.len());
            let mut w = BufWriter::new(std::fs::File::create(dir.join(SECOND_CHANNEL_FILE))?);
            write_embedding_file(&mut w, &EmbeddingManifest::new("channel2", dim, metric), &records)?;
            w.flush()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum IndexMode {
    Brute,
    Ann(SearchBudget),
}

impl fmt::Display for IndexMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IndexMode::Brute => f.write_str("brute"),
            IndexMode::Ann(b) => write!(f, "ann:{b}"),
        }
    }
}

impl FromStr for IndexMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "brute" => Ok(IndexMode::Brute),
            None if s == "ann" => Ok(IndexMode::Ann(SearchBudget::default())),
            Some(("ann", b)) => Ok(IndexMode::Ann(b.parse().map_err(|e| format!("budget `{b}`: {e}"))?)),
            _ => Err(format!("index mode `{s}` is neither `brute` nor `ann:<budget>`")),
        }
    }
}

impl From<IndexMode> for String {
    fn from(m: IndexMode) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for IndexMode {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub folds: usize,
    /// Neighbors voting for the top-1 class.
    pub k: usize,
    pub l2: bool,
    /// Variance threshold; `None` disables PCA. Fitted per training fold.
    pub pca_threshold: Option<f64>,
    pub index: IndexMode,
    pub forest: ForestParams,
    pub seed: u64,
    /// Rerank the two best classes by feature code.
    pub rerank: bool,
    pub rho: f64,
    /// Fuse the two channels with this weight on the first.
    pub fusion: Option<FusionWeight>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            folds: DEFAULT_FOLDS,
            k: 1,
            l2: true,
            pca_threshold: None,
            index: IndexMode::Brute,
            forest: ForestParams::default(),
            seed: 0,
            rerank: false,
            rho: DEFAULT_RHO,
            fusion: None,
        }
    }
}

impl ExperimentConfig {
    fn check(&self, ds: &Dataset) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidConfig(m.into()));
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.fusion.is_some() {
            if ds.second_metric.is_none() || ds.samples.iter().any(|s| s.second.is_none()) {
                return bad("fusion needs a second channel on every sample");
            }
            if self.index != IndexMode::Brute || self.pca_threshold.is_some() {
                return bad("fusion runs with the brute index and without PCA");
            }
        }
        if self.l2 && (ds.metric == Metric::JensenShannon || ds.second_metric == Some(Metric::JensenShannon)) {
            return bad("l2 normalization breaks Jensen-Shannon histograms");
        }
        Ok(())
    }
}

/// Fold assignment per sample; `None` marks training-only samples (classes
/// smaller than the fold count).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldPlan {
    pub folds: usize,
    pub assignment: Vec<Option<usize>>,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == Some(fold)).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != Some(fold)).collect()
    }

    pub fn training_only(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_none()).count()
    }
}

/// Stratified assignment: each class is shuffled and dealt round-robin
/// from a running offset so fold sizes stay balanced across classes.
pub fn stratified_folds<S: AsRef<str>>(labels: &[S], folds: usize, seed: u64) -> FoldPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l.as_ref()).or_default().push(i);
    }
    let mut assignment = vec![None; labels.len()];
    let mut offset = 0;
    for idx in by_class.values_mut() {
        if idx.len() < folds {
            continue;
        }
        idx.shuffle(&mut rng);
        for (j, &i) in idx.iter().enumerate() {
            assignment[i] = Some((offset + j) % folds);
        }
        offset = (offset + idx.len()) % folds;
    }
    FoldPlan { folds, assignment }
}

/// Per-query outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Hit {
    top1: bool,
    top10: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub queries: usize,
    pub train: usize,
    pub top1: f64,
    pub top10: f64,
    /// Output dimension after PCA, when enabled.
    pub pca_components: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KFoldReport {
    pub config: ExperimentConfig,
    pub samples: usize,
    pub classes: usize,
    pub training_only: usize,
    pub folds: Vec<FoldResult>,
    pub mean_top1: f64,
    pub mean_top10: f64,
}

impl KFoldReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,queries,train,top1,top10\n");
        for f in &self.folds {
            s.push_str(&format!("{},{},{},{:.6},{:.6}\n", f.fold, f.queries, f.train, f.top1, f.top10));
        }
        s.push_str(&format!("mean,,,{:.6},{:.6}\n", self.mean_top1, self.mean_top10));
        s
    }
}

/// Row-major matrix of prepared vectors.
#[derive(Debug, Clone)]
pub(crate) struct Rows {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Rows {
    pub fn from_vecs<'a>(dim: usize, vs: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut data = Vec::new();
        for v in vs {
            data.extend_from_slice(v);
        }
        Self { dim, data }
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Exhaustive top-n over `rows`, ids are row positions, order is
/// (distance, id) like the forest.
pub(crate) fn brute_top(metric: Metric, rows: &Rows, q: &[f64], n: usize) -> Vec<RankedHit> {
    let hits = (0..rows.len())
        .map(|i| RankedHit {
            prototype_id: i as u64,
            distance: vector::distance_unchecked(metric, q, rows.row(i)),
        })
        .collect();
    top_k(hits, n.max(1))
}

fn prepare(values: &[f64], l2: bool) -> Result<Vec<f64>, EvalError> {
    if !l2 {
        return Ok(values.to_vec());
    }
    let n = vector::dot(values, values).sqrt();
    if n <= vector::ZERO_NORM_GUARD {
        return Err(VectorError::ZeroVector.into());
    }
    Ok(values.iter().map(|v| v / n).collect())
}

struct FoldSpace {
    metric: Metric,
    train: Rows,
    train_second: Option<Rows>,
    queries: Vec<Vec<f64>>,
    queries_second: Vec<Vec<f64>>,
    pca_components: Option<usize>,
}

fn fold_space(ds: &Dataset, train: &[usize], test: &[usize], cfg: &ExperimentConfig) -> Result<FoldSpace, EvalError> {
    let prep = |idx: &[usize]| -> Result<Vec<Vec<f64>>, EvalError> {
        idx.iter().map(|&i| prepare(&ds.samples[i].values, cfg.l2)).collect()
    };
    let mut tr = prep(train)?;
    let mut te = prep(test)?;
    let mut metric = ds.metric;
    let mut pca_components = None;
    if let Some(t) = cfg.pca_threshold {
        let model = PcaModel::fit(&tr, t)?;
        tr = tr.iter().map(|r| model.project(r)).collect::<Result<_, _>>()?;
        te = te.iter().map(|r| model.project(r)).collect::<Result<_, _>>()?;
        metric = Metric::Euclidean;
        pca_components = Some(model.n_components());
    }
    let dim = tr.first().map_or(0, Vec::len);
    let (train_second, queries_second) = if cfg.fusion.is_some() {
        let second = |idx: &[usize]| -> Result<Vec<Vec<f64>>, EvalError> {
            idx.iter()
                .map(|&i| prepare(ds.samples[i].second.as_ref().expect("checked"), cfg.l2))
                .collect()
        };
        let tr2 = second(train)?;
        let d2 = tr2.first().map_or(0, Vec::len);
        (Some(Rows::from_vecs(d2, tr2.iter().map(Vec::as_slice))), second(test)?)
    } else {
        (None, Vec::new())
    };
    Ok(FoldSpace {
        metric,
        train: Rows::from_vecs(dim, tr.iter().map(Vec::as_slice)),
        train_second,
        queries: te,
        queries_second,
        pca_components,
    })
}

/// Ranked neighbors (ids are positions in the fold's training list).
fn neighbors(
    space: &FoldSpace,
    forest: Option<&AnnForest>,
    cfg: &ExperimentConfig,
    ds: &Dataset,
    qi: usize,
    n: usize,
) -> Result<Vec<RankedHit>, EvalError> {
    let q = &space.queries[qi];
    if let (Some(w), Some(second)) = (cfg.fusion, &space.train_second) {
        let q2 = &space.queries_second[qi];
        let m2 = ds.second_metric.expect("checked");
        let hits = (0..space.train.len())
            .map(|i| {
                let d_t = unit_scaled(vector::distance_unchecked(space.metric, q, space.train.row(i)), space.metric, cfg.l2);
                let d_c = unit_scaled(vector::distance_unchecked(m2, q2, second.row(i)), m2, cfg.l2);
                RankedHit {
                    prototype_id: i as u64,
                    distance: vector::fuse_distance(d_t, d_c, w),
                }
            })
            .collect();
        return Ok(top_k(hits, n));
    }
    match (cfg.index, forest) {
        (IndexMode::Ann(budget), Some(f)) => {
            let d = Descriptor::new(q.clone(), space.metric)?;
            Ok(f.search(&d, n, budget)?)
        }
        _ => Ok(brute_top(space.metric, &space.train, q, n)),
    }
}

/// Majority class among the first `k` hits; ties prefer the smaller mean
/// distance, then the smaller class id.
fn vote<'a>(hits: &[RankedHit], k: usize, class_of: impl Fn(u64) -> &'a str) -> Option<&'a str> {
    let mut votes: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for h in hits.iter().take(k) {
        let e = votes.entry(class_of(h.prototype_id)).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += h.distance;
    }
    votes
        .into_iter()
        .min_by(|(ca, (na, sa)), (cb, (nb, sb))| {
            nb.cmp(na)
                .then((sa / *na as f64).total_cmp(&(sb / *nb as f64)))
                .then(ca.cmp(cb))
        })
        .map(|(c, _)| c)
}

/// Deduplicated class list with each class's best distance, in rank order.
fn class_list<'a>(hits: &[RankedHit], class_of: impl Fn(u64) -> &'a str) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for h in hits {
        let c = class_of(h.prototype_id);
        if !out.iter().any(|(x, _)| x == c) {
            out.push((c.to_string(), h.distance));
        }
    }
    out
}

fn run_fold(ds: &Dataset, train: &[usize], test: &[usize], cfg: &ExperimentConfig) -> Result<(Vec<Hit>, Option<usize>), EvalError> {
    let space = fold_space(ds, train, test, cfg)?;
    let forest = match cfg.index {
        IndexMode::Ann(_) if cfg.fusion.is_none() => {
            let items = (0..space.train.len())
                .map(|i| Ok((i as u64, Descriptor::new(space.train.row(i).to_vec(), space.metric)?)))
                .collect::<Result<Vec<_>, EvalError>>()?;
            Some(AnnForest::build(&items, cfg.forest)?)
        }
        _ => None,
    };
    let hists = cfg.rerank.then(|| {
        FeatureCodeHistograms::build(train.iter().filter_map(|&i| {
            let s = &ds.samples[i];
            s.metadata.feature_code().map(|c| (s.class.as_str(), c))
        }).collect::<Vec<_>>().iter().map(|(c, f)| (*c, f.as_str())))
    });
    let class_of = |id: u64| ds.samples[train[id as usize]].class.as_str();
    let n = cfg.k.max(TOP_N);
    let mut out = Vec::with_capacity(test.len());
    for (qi, &ti) in test.iter().enumerate() {
        let truth = ds.samples[ti].class.as_str();
        let hits = neighbors(&space, forest.as_ref(), cfg, ds, qi, n)?;
        let predicted = match &hists {
            Some(h) => {
                let classes = class_list(&hits, class_of);
                let code = ds.samples[ti].metadata.feature_code();
                rerank_with_feature_code(&classes, code.as_deref(), h, cfg.rho)
                    .into_iter()
                    .next()
                    .map(|(c, _)| c)
            }
            None => vote(&hits, cfg.k, class_of).map(str::to_string),
        };
        let top1 = predicted.as_deref() == Some(truth);
        let top10 = top1 || hits.iter().take(TOP_N).any(|h| class_of(h.prototype_id) == truth);
        out.push(Hit { top1, top10 });
    }
    Ok((out, space.pca_components))
}

/// Stratified k-fold top-1 / top-10 accuracy.
pub fn kfold_accuracy(ds: &Dataset, cfg: &ExperimentConfig) -> Result<KFoldReport, EvalError> {
    ds.check()?;
    cfg.check(ds)?;
    if ds.classes().len() < 2 {
        return Err(EvalError::DatasetTooSmall("need at least two classes".into()));
    }
    let labels: Vec<&str> = ds.samples.iter().map(|s| s.class.as_str()).collect();
    let plan = stratified_folds(&labels, cfg.folds, cfg.seed);
    let mut folds = Vec::new();
    for f in 0..cfg.folds {
        let test = plan.test_indices(f);
        let train = plan.train_indices(f);
        if test.is_empty() {
            return Err(EvalError::DatasetTooSmall(format!("fold {f} has no queries")));
        }
        let (hits, pca_components) = run_fold(ds, &train, &test, cfg)?;
        let q = hits.len() as f64;
        folds.push(FoldResult {
            fold: f,
            queries: hits.len(),
            train: train.len(),
            top1: hits.iter().filter(|h| h.top1).count() as f64 / q,
            top10: hits.iter().filter(|h| h.top10).count() as f64 / q,
            pca_components,
        });
    }
    let nf = folds.len() as f64;
    Ok(KFoldReport {
        config: cfg.clone(),
        samples: ds.len(),
        classes: ds.classes().len(),
        training_only: plan.training_only(),
        mean_top1: folds.iter().map(|f| f.top1).sum::<f64>() / nf,
        mean_top10: folds.iter().map(|f| f.top10).sum::<f64>() / nf,
        folds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimePoint {
    pub prefix: usize,
    pub queries: usize,
    pub classes: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeCurve {
    pub step: usize,
    pub points: Vec<TimePoint>,
}

impl TimeCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("prefix,queries,classes,top1\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{},{:.6}\n", p.prefix, p.queries, p.classes, p.top1));
        }
        s
    }

    /// Least-squares slope of top-1 against prefix size, per 1000 samples.
    pub fn slope_per_thousand(&self) -> f64 {
        let n = self.points.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let mx = self.points.iter().map(|p| p.prefix as f64).sum::<f64>() / n;
        let my = self.points.iter().map(|p| p.top1).sum::<f64>() / n;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for p in &self.points {
            let dx = p.prefix as f64 - mx;
            sxy += dx * (p.top1 - my);
            sxx += dx * dx;
        }
        1000.0 * sxy / sxx
    }
}

/// Leave-one-out top-1 (k = 1) on growing prefixes of the time-ordered
/// dataset. Queries whose class has no other member in the prefix are
/// skipped; prefixes without any query are omitted.
pub fn accuracy_over_time(ds: &Dataset, step: usize, l2: bool) -> Result<TimeCurve, EvalError> {
    ds.check()?;
    if step == 0 {
        return Err(EvalError::InvalidConfig("step must be positive".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by_key(|&i| (ds.samples[i].timestamp, ds.samples[i].id));
    let prepared = order
        .iter()
        .map(|&i| prepare(&ds.samples[i].values, l2))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = Rows::from_vecs(ds.dim(), prepared.iter().map(Vec::as_slice));
    let class = |pos: usize| ds.samples[order[pos]].class.as_str();
    let mut points = Vec::new();
    let mut prefix = step;
    while prefix <= ds.len() {
        let mut sizes: HashMap<&str, usize> = HashMap::new();
        for p in 0..prefix {
            *sizes.entry(class(p)).or_default() += 1;
        }
        let (mut queries, mut correct) = (0usize, 0usize);
        for qi in 0..prefix {
            if sizes[class(qi)] < 2 {
                continue;
            }
            let q = rows.row(qi);
            let best = (0..prefix)
                .filter(|&j| j != qi)
                .map(|j| (vector::distance_unchecked(ds.metric, q, rows.row(j)), j))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .expect("prefix holds another member");
            queries += 1;
            correct += usize::from(class(best.1) == class(qi));
        }
        if queries > 0 {
            points.push(TimePoint {
                prefix,
                queries,
                classes: sizes.len(),
                top1: correct as f64 / queries as f64,
            });
        }
        prefix += step;
    }
    if points.is_empty() {
        return Err(EvalError::DatasetTooSmall(format!("no prefix of step {step} has a leave-one-out query")));
    }
    Ok(TimeCurve { step, points })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinSamplesPoint {
    pub min_samples: usize,
    pub classes: usize,
    pub samples: usize,
    /// `None` where too few classes qualify.
    pub top1: Option<f64>,
    pub top10: Option<f64>,
}

/// k-fold accuracy restricted to classes with at least `min` samples, for
/// each `min` in the range. Unevaluable points are reported as gaps.
pub fn min_samples_sweep(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    mins: impl IntoIterator<Item = usize>,
) -> Result<Vec<MinSamplesPoint>, EvalError> {
    let mut out = Vec::new();
    for m in mins {
        let sub = ds.with_min_samples(m);
        let point = match kfold_accuracy(&sub, cfg) {
            Ok(r) => MinSamplesPoint {
                min_samples: m,
                classes: r.classes,
                samples: r.samples,
                top1: Some(r.mean_top1),
                top10: Some(r.mean_top10),
            },
            Err(EvalError::DatasetTooSmall(_)) => MinSamplesPoint {
                min_samples: m,
                classes: sub.classes().len(),
                samples: sub.len(),
                top1: None,
                top10: None,
            },
            Err(e) => return Err(e),
        };
        out.push(point);
    }
    Ok(out)
}

pub fn min_samples_csv(points: &[MinSamplesPoint]) -> String {
    let mut s = String::from("min_samples,classes,samples,top1,top10\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for p in points {
        s.push_str(&format!("{},{},{},{},{}\n", p.min_samples, p.classes, p.samples, opt(p.top1), opt(p.top10)));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcaReportRow {
    pub threshold: f64,
    pub components: usize,
    pub input_dim: usize,
    pub top1: f64,
    pub top10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcaReport {
    pub baseline_top1: f64,
    pub baseline_top10: f64,
    /// Cumulative explained variance over the whole dataset.
    pub cumulative_variance: Vec<f64>,
    pub rows: Vec<PcaReportRow>,
}

/// Accuracy with and without PCA at each threshold (models fitted per fold).
pub fn pca_report(ds: &Dataset, cfg: &ExperimentConfig, thresholds: &[f64]) -> Result<PcaReport, EvalError> {
    let base = kfold_accuracy(ds, &ExperimentConfig { pca_threshold: None, ..cfg.clone() })?;
    let rows_all = ds.samples.iter().map(|s| prepare(&s.values, cfg.l2)).collect::<Result<Vec<_>, _>>()?;
    let full = PcaModel::fit(&rows_all, 1.0)?;
    let mut acc = 0.0;
    let cumulative_variance = full
        .explained_variance_ratio()
        .iter()
        .map(|r| {
            acc += r;
            acc
        })
        .collect();
    let mut rows = Vec::new();
    for &t in thresholds {
        let r = kfold_accuracy(ds, &ExperimentConfig { pca_threshold: Some(t), ..cfg.clone() })?;
        let comps: Vec<usize> = r.folds.iter().filter_map(|f| f.pca_components).collect();
        rows.push(PcaReportRow {
            threshold: t,
            components: comps.iter().sum::<usize>() / comps.len().max(1),
            input_dim: ds.dim(),
            top1: r.mean_top1,
            top10: r.mean_top10,
        });
    }
    Ok(PcaReport {
        baseline_top1: base.mean_top1,
        baseline_top10: base.mean_top10,
        cumulative_variance,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionPoint {
    pub w: f64,
    pub top1: f64,
    pub top10: f64,
}

/// k-fold accuracy of the fused distance at each weight.
pub fn fusion_sweep(ds: &Dataset, cfg: &ExperimentConfig, weights: &[f64]) -> Result<Vec<FusionPoint>, EvalError> {
    weights
        .iter()
        .map(|&w| {
            let c = ExperimentConfig {
                fusion: Some(FusionWeight::new(w)?),
                ..cfg.clone()
            };
            let r = kfold_accuracy(ds, &c)?;
            Ok(FusionPoint {
                w,
                top1: r.mean_top1,
                top10: r.mean_top10,
            })
        })
        .collect()
}

/// `0, 0.1, ..., 1`.
pub fn default_fusion_weights() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetadataKnnReport {
    pub level: HierarchyLevel,
    pub k: usize,
    pub accuracy: f64,
    /// Accuracy of always answering the most frequent training label.
    pub majority_baseline: f64,
    pub queries: usize,
}

/// Metadata-only kNN over stratified folds.
pub fn metadata_knn_eval(
    records: &[(MetadataRecord, String)],
    schema: &MetadataSchema,
    taxonomy: &Taxonomy,
    level: HierarchyLevel,
    k: usize,
    folds: usize,
    seed: u64,
) -> Result<MetadataKnnReport, EvalError> {
    let labels: Vec<&str> = records.iter().map(|(_, c)| c.as_str()).collect();
    let plan = stratified_folds(&labels, folds, seed);
    let (mut correct, mut base_correct, mut queries) = (0usize, 0usize, 0usize);
    for f in 0..folds {
        let train = plan.train_indices(f);
        let test = plan.test_indices(f);
        let mut enc = MetadataEncoder::new(schema.clone());
        enc.fit_imputation(train.iter().map(|&i| &records[i].0));
        let train_vecs = train
            .iter()
            .map(|&i| Ok((enc.encode(&records[i].0)?, records[i].1.clone())))
            .collect::<Result<Vec<_>, EvalError>>()?;
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for (_, c) in &train_vecs {
            *freq.entry(crate::metadata::level_label(taxonomy, c, level, false)?).or_default() += 1;
        }
        let majority = freq.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(c, _)| c.clone());
        for &i in &test {
            let truth = crate::metadata::level_label(taxonomy, &records[i].1, level, false)?;
            let q = enc.encode(&records[i].0)?;
            let got = metadata_knn_classify(&q, &train_vecs, k, level, taxonomy, false)?;
            queries += 1;
            correct += usize::from(got == truth);
            base_correct += usize::from(majority.as_deref() == Some(truth.as_str()));
        }
    }
    if queries == 0 {
        return Err(EvalError::DatasetTooSmall("no metadata queries".into()));
    }
    Ok(MetadataKnnReport {
        level,
        k,
        accuracy: correct as f64 / queries as f64,
        majority_baseline: base_correct as f64 / queries as f64,
        queries,
    })
}

#[cfg(test)]
mod tests {
    use super::synth::*;
    use super::*;

    fn small(seed: u64) -> Dataset {
        gaussian_clusters(&ClusterParams {
            noise: 0.3,
            ..ClusterParams::balanced(6, 20, 8, seed)
        })
    }

    #[test]
    fn folds_partition_and_reproduce() {
        let ds = small(1);
        let labels: Vec<&str> = ds.samples.iter().map(|s| s.class.as_str()).collect();
        let a = stratified_folds(&labels, 5, 7);
        assert_eq!(a, stratified_folds(&labels, 5, 7));
        assert_ne!(a, stratified_folds(&labels, 5, 8));
        let mut seen = vec![0; ds.len()];
        for f in 0..5 {
            for i in a.test_indices(f) {
                seen[i] += 1;
            }
            let test = a.test_indices(f);
            let train = a.train_indices(f);
            assert_eq!(test.len() + train.len(), ds.len());
            assert!(test.iter().all(|i| !train.contains(i)));
            assert_eq!(test.len(), 24);
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn small_classes_stay_in_training() {
        let labels = ["a", "a", "a", "a", "a", "b", "b", "c"];
        let plan = stratified_folds(&labels, 5, 0);
        assert_eq!(plan.training_only(), 3);
        assert!(plan.assignment[5..].iter().all(Option::is_none));
    }

    #[test]
    fn duplicates_give_perfect_top1() {
        let mut ds = small(2);
        for s in &mut ds.samples {
            let c: usize = s.class[5..8].parse().unwrap();
            s.values = (0..8).map(|j| ((c * 8 + j) as f64).sin() + 2.0).collect();
        }
        let r = kfold_accuracy(&ds, &ExperimentConfig::default()).unwrap();
        assert_eq!(r.mean_top1, 1.0);
    }

    #[test]
    fn shuffled_labels_are_near_chance() {
        let mut total = 0.0;
        for seed in 0..10 {
            let mut ds = gaussian_clusters(&ClusterParams::balanced(10, 30, 8, seed));
            shuffle_labels(&mut ds, seed + 100);
            total += kfold_accuracy(&ds, &ExperimentConfig { seed, ..Default::default() }).unwrap().mean_top1;
        }
        let mean = total / 10.0;
        assert!((mean - 0.10).abs() <= 0.03, "mean top-1 {mean}");
    }

    #[test]
    fn top10_contains_top1_and_ann_unbounded_equals_brute() {
        let ds = small(3);
        for k in [1, 3, 15] {
            let brute = ExperimentConfig { k, ..Default::default() };
            let b = kfold_accuracy(&ds, &brute).unwrap();
            for f in &b.folds {
                assert!(f.top10 >= f.top1);
            }
            let ann = ExperimentConfig {
                index: IndexMode::Ann(SearchBudget::Unbounded),
                forest: ForestParams { n_trees: 5, ..ForestParams::default() },
                ..brute
            };
            let a = kfold_accuracy(&ds, &ann).unwrap();
            assert_eq!(a.folds, b.folds);
        }
    }

    #[test]
    fn config_errors() {
        let ds = small(4);
        let bad = ExperimentConfig { folds: 1, ..Default::default() };
        assert!(matches!(kfold_accuracy(&ds, &bad), Err(EvalError::InvalidConfig(_))));
        let fused = ExperimentConfig {
            fusion: Some(FusionWeight::DEFAULT),
            ..Default::default()
        };
        assert!(matches!(kfold_accuracy(&ds, &fused), Err(EvalError::InvalidConfig(_))));
        let one = ds.with_min_samples(1000);
        assert!(matches!(kfold_accuracy(&one, &ExperimentConfig::default()), Err(EvalError::DatasetTooSmall(_))));
    }

    #[test]
    fn index_mode_parsing() {
        assert_eq!("brute".parse::<IndexMode>().unwrap(), IndexMode::Brute);
        assert_eq!("ann:500".parse::<IndexMode>().unwrap(), IndexMode::Ann(SearchBudget::Nodes(500)));
        assert_eq!("ann:inf".parse::<IndexMode>().unwrap(), IndexMode::Ann(SearchBudget::Unbounded));
        assert!("hnsw".parse::<IndexMode>().is_err());
        assert_eq!(IndexMode::Ann(SearchBudget::Nodes(7)).to_string(), "ann:7");
    }

    #[test]
    fn min_samples_one_equals_plain_kfold_and_gaps_are_reported() {
        let ds = gaussian_clusters(&ClusterParams {
            samples_per_class: vec![5, 8, 12, 20],
            ..ClusterParams::balanced(0, 0, 6, 5)
        });
        let cfg = ExperimentConfig::default();
        let plain = kfold_accuracy(&ds, &cfg).unwrap();
        let sweep = min_samples_sweep(&ds, &cfg, [1, 10, 50]).unwrap();
        assert_eq!(sweep[0].top1, Some(plain.mean_top1));
        assert_eq!(sweep[1].classes, 2);
        assert!(sweep[2].top1.is_none());
        assert!(min_samples_csv(&sweep).lines().count() == 4);
    }

    #[test]
    fn min_samples_curve_rises_with_class_size() {
        let ds = gaussian_clusters(&ClusterParams {
            samples_per_class: (0..40).map(|i| 2 + i * 98 / 39).collect(),
            dim: 16,
            center_spread: 1.0,
            noise: 0.9,
            norm_jitter: 0.0,
            seed: 9,
        });
        let pts = min_samples_sweep(&ds, &ExperimentConfig::default(), [1, 10, 20, 40, 60, 80]).unwrap();
        let acc: Vec<f64> = pts.iter().filter_map(|p| p.top1).collect();
        assert!(acc.len() >= 5);
        for w in acc.windows(2) {
            assert!(w[1] >= w[0] - 0.03, "curve {acc:?}");
        }
    }

    #[test]
    fn over_time_curves() {
        let flat = temporal_stream(20, 3000, 16, 0.8, 0.8, 11);
        let c = accuracy_over_time(&flat, 500, true).unwrap();
        assert_eq!(c.points.len(), 6);
        let after: Vec<f64> = c.points[1..].iter().map(|p| p.top1).collect();
        let mean = after.iter().sum::<f64>() / after.len() as f64;
        assert!(after.iter().all(|a| (a - mean).abs() <= 0.05), "curve {after:?}");
        assert!(c.points.windows(2).all(|w| w[1].classes >= w[0].classes));

        let degrading = temporal_stream(20, 3000, 16, 0.6, 1.4, 11);
        let d = accuracy_over_time(&degrading, 500, true).unwrap();
        assert!(d.slope_per_thousand() < c.slope_per_thousand());
        assert!(c.to_csv().starts_with("prefix,"));

        let one = Dataset {
            samples: flat.samples[..1].to_vec(),
            ..flat.clone()
        };
        assert!(matches!(accuracy_over_time(&one, 1, true), Err(EvalError::DatasetTooSmall(_))));
    }

    #[test]
    fn metadata_knn_beats_majority() {
        let records = metadata_records(4, 50, 0.8, 21);
        let taxonomy = taxonomy_for(records.iter().map(|(_, c)| c.as_str()));
        let r = metadata_knn_eval(&records, &MetadataSchema::default(), &taxonomy, HierarchyLevel::Leaf, 80, 5, 1).unwrap();
        assert_eq!(r.queries, 200);
        assert!(r.accuracy > r.majority_baseline, "{r:?}");
    }

    #[test]
    fn save_and_load_round_trip() {
        let mut ds = complementary_channels(2, 2, 6, 4, 0.2, 1);
        assign_feature_codes(&mut ds, 0.5, 3);
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
    }
}
