//! Image metadata: schema-driven encoding into real vectors, metadata-only
//! kNN classification at three hierarchy levels, per-class feature-code
//! histograms and the two-stage feature-code reranker.

use crate::ontology::{OntologyError, RootCategory, Taxonomy};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// Distance-gap threshold below which the reranker consults feature codes.
pub const DEFAULT_RHO: f64 = 0.02;
/// Neighbors used by the metadata-only classifier.
pub const DEFAULT_METADATA_K: usize = 80;
/// Name of the attribute the reranker reads.
pub const FEATURE_CODE_ATTRIBUTE: &str = "gis_feature_code";
pub const UNKNOWN_CATEGORY: &str = "unknown";

const ONE_HOT_LEVEL: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Error)]
pub enum MetadataError {
    #[error("attribute `{name}` value {value} outside [{min}, {max}]")]
    OutOfRange { name: String, value: f64, min: f64, max: f64 },
    #[error("attribute `{name}` has value `{value}` outside its domain")]
    UnknownCategory { name: String, value: String },
    #[error("attribute `{name}` expects a {expected} value")]
    TypeMismatch { name: String, expected: &'static str },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("vector has {actual} components, encoder produces {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A raw metadata value as it arrives in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetaValue {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl MetaValue {
    fn as_category(&self) -> String {
        match self {
            MetaValue::Bool(b) => b.to_string(),
            MetaValue::Number(n) if n.fract() == 0.0 && n.abs() < 1e15 => format!("{}", *n as i64),
            MetaValue::Number(n) => n.to_string(),
            MetaValue::Text(t) => t.clone(),
        }
    }
}

impl fmt::Display for MetaValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_category())
    }
}

/// Attribute name to value; absent attributes are missing.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetadataRecord(pub BTreeMap<String, MetaValue>);

impl MetadataRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: MetaValue) -> Self {
        self.0.insert(name.to_string(), value);
        self
    }

    pub fn number(self, name: &str, v: f64) -> Self {
        self.with(name, MetaValue::Number(v))
    }

    pub fn text(self, name: &str, v: &str) -> Self {
        self.with(name, MetaValue::Text(v.to_string()))
    }

    pub fn get(&self, name: &str) -> Option<&MetaValue> {
        self.0.get(name)
    }

    pub fn feature_code(&self) -> Option<String> {
        self.get(FEATURE_CODE_ATTRIBUTE).map(MetaValue::as_category)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttributeSpec {
    Numeric { name: String, min: f64, max: f64 },
    Categorical { name: String, domain: Vec<String> },
}

impl AttributeSpec {
    pub fn name(&self) -> &str {
        match self {
            AttributeSpec::Numeric { name, .. } | AttributeSpec::Categorical { name, .. } => name,
        }
    }

    fn width(&self) -> usize {
        match self {
            AttributeSpec::Numeric { .. } => 1,
            AttributeSpec::Categorical { domain, .. } => domain.len() + 1,
        }
    }
}

/// Ordered attribute declarations. Encoding follows this order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataSchema {
    pub attributes: Vec<AttributeSpec>,
}

impl MetadataSchema {
    pub fn new(attributes: Vec<AttributeSpec>) -> Result<Self, MetadataError> {
        let schema = Self { attributes };
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetadataError> {
        let schema: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<(), MetadataError> {
        let mut names = std::collections::HashSet::new();
        for a in &self.attributes {
            if !names.insert(a.name()) {
                return Err(MetadataError::InvalidSchema(format!("duplicate attribute `{}`", a.name())));
            }
            match a {
                AttributeSpec::Numeric { name, min, max } if !(min < max) => {
                    return Err(MetadataError::InvalidSchema(format!("`{name}` needs min < max")))
                }
                AttributeSpec::Categorical { name, domain } if domain.iter().any(|d| d == UNKNOWN_CATEGORY) => {
                    return Err(MetadataError::InvalidSchema(format!("`{name}` lists the reserved `unknown` value")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Length of every encoded vector.
    pub fn encoded_len(&self) -> usize {
        self.attributes.iter().map(AttributeSpec::width).sum()
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeSpec> {
        self.attributes.iter().find(|a| a.name() == name)
    }
}

impl Default for MetadataSchema {
    /// The most representative attributes: sensor, location and EXIF fields.
    fn default() -> Self {
        let num = |name: &str, min: f64, max: f64| AttributeSpec::Numeric {
            name: name.into(),
            min,
            max,
        };
        let cat = |name: &str, domain: &[&str]| AttributeSpec::Categorical {
            name: name.into(),
            domain: domain.iter().map(|s| s.to_string()).collect(),
        };
        let yes_no = ["true", "false"];
        Self {
            attributes: vec![
                num("pitch", -180.0, 180.0),
                num("selected_area", 0.0, 1.0),
                num("sharpness", 0.0, 2.0),
                num("focal_length", 0.0, 300.0),
                num("brightness_value", -10.0, 20.0),
                num("subject_area", 0.0, 1.0),
                cat("wifi", &yes_no),
                cat("flash", &yes_no),
                cat("reliable_location", &yes_no),
                cat(
                    "country",
                    &["AR", "BR", "CA", "CN", "DE", "ES", "FR", "GB", "IN", "IT", "JP", "MX", "NL", "PT", "US"],
                ),
                cat("ocean", &["none", "atlantic", "pacific", "indian", "arctic", "southern"]),
                cat(
                    FEATURE_CODE_ATTRIBUTE,
                    &[
                        "PPL", "PPLA", "PPLC", "PPLX", "ZOO", "MALL", "UNIV", "SCH", "BCH", "PRK", "MUS", "HTL", "REST",
                        "MKT", "AIRP", "STDM", "HSP", "CH", "FRM", "LK", "MT", "FRST", "GDN",
                    ],
                ),
                cat("gis_feature_class", &["A", "H", "L", "P", "R", "S", "T", "U", "V"]),
                cat("color_space", &["sRGB", "AdobeRGB", "uncalibrated"]),
            ],
        }
    }
}

/// Turns records into vectors: numerics scaled to [0, 1], categoricals
/// one-hot with an extra `unknown` slot. One-hot entries are `1/sqrt(2)` so
/// a category mismatch adds exactly 1 to the squared Euclidean distance.
#[derive(Debug, Clone, PartialEq)]
pub struct MetadataEncoder {
    schema: MetadataSchema,
    /// Imputed normalized value per attribute (numeric ones only).
    imputed: Vec<f64>,
}

impl MetadataEncoder {
    pub fn new(schema: MetadataSchema) -> Self {
        let imputed = vec![0.5; schema.attributes.len()];
        Self { schema, imputed }
    }

    /// Learns imputation means for missing numerics from training records.
    /// Records failing to encode an attribute are skipped for that attribute.
    pub fn fit_imputation<'a>(&mut self, records: impl IntoIterator<Item = &'a MetadataRecord>) {
        let mut sums = vec![(0.0, 0usize); self.schema.attributes.len()];
        for r in records {
            for (i, spec) in self.schema.attributes.iter().enumerate() {
                if let AttributeSpec::Numeric { .. } = spec {
                    if let Some(Ok(v)) = r.get(spec.name()).map(|v| normalize_numeric(spec, v)) {
                        sums[i].0 += v;
                        sums[i].1 += 1;
                    }
                }
            }
        }
        for (i, (s, n)) in sums.into_iter().enumerate() {
            if n > 0 {
                self.imputed[i] = s / n as f64;
            }
        }
    }

    pub fn schema(&self) -> &MetadataSchema {
        &self.schema
    }

    pub fn encoded_len(&self) -> usize {
        self.schema.encoded_len()
    }

    pub fn encode(&self, r: &MetadataRecord) -> Result<Vec<f64>, MetadataError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        for (i, spec) in self.schema.attributes.iter().enumerate() {
            match spec {
                AttributeSpec::Numeric { .. } => out.push(match r.get(spec.name()) {
                    Some(v) => normalize_numeric(spec, v)?,
                    None => self.imputed[i],
                }),
                AttributeSpec::Categorical { name, domain } => {
                    let slot = match r.get(name).map(MetaValue::as_category) {
                        None => domain.len(),
                        Some(v) if v == UNKNOWN_CATEGORY => domain.len(),
                        Some(v) => domain.iter().position(|d| *d == v).ok_or_else(|| {
                            MetadataError::UnknownCategory {
                                name: name.clone(),
                                value: v.clone(),
                            }
                        })?,
                    };
                    let start = out.len();
                    out.resize(start + domain.len() + 1, 0.0);
                    out[start + slot] = ONE_HOT_LEVEL;
                }
            }
        }
        Ok(out)
    }
}

/// Encodes with the schema's default imputation.
pub fn encode_metadata(r: &MetadataRecord, schema: &MetadataSchema) -> Result<Vec<f64>, MetadataError> {
    MetadataEncoder::new(schema.clone()).encode(r)
}

fn normalize_numeric(spec: &AttributeSpec, v: &MetaValue) -> Result<f64, MetadataError> {
    let AttributeSpec::Numeric { name, min, max } = spec else {
        unreachable!("numeric spec expected")
    };
    let x = match v {
        MetaValue::Number(x) if x.is_finite() => *x,
        _ => {
            return Err(MetadataError::TypeMismatch {
                name: name.clone(),
                expected: "finite numeric",
            })
        }
    };
    if x < *min || x > *max {
        return Err(MetadataError::OutOfRange {
            name: name.clone(),
            value: x,
            min: *min,
            max: *max,
        });
    }
    Ok((x - min) / (max - min))
}

/// Granularity at which class labels are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HierarchyLevel {
    Root,
    Second,
    Leaf,
}

/// Label of `class` at the requested level. With `split_objects`, classes
/// under the objects root are told apart by their second-level ancestor
/// (for instance artifacts versus natural objects).
pub fn level_label(taxonomy: &Taxonomy, class: &str, level: HierarchyLevel, split_objects: bool) -> Result<String, MetadataError> {
    let label = match level {
        HierarchyLevel::Leaf => {
            taxonomy.depth(class)?;
            class
        }
        HierarchyLevel::Second => taxonomy.ancestor_at_depth(class, 2)?,
        HierarchyLevel::Root => {
            let objects = taxonomy.get(class).map(|s| s.root_category) == Some(RootCategory::Objects);
            if split_objects && objects {
                taxonomy.ancestor_at_depth(class, 2)?
            } else {
                taxonomy.root_of(class)?
            }
        }
    };
    Ok(label.to_string())
}

/// Majority vote among the `k` nearest training vectors (Euclidean), with
/// labels first mapped to `level`. Ties prefer the smaller mean distance,
/// then the lexicographically smaller label.
pub fn metadata_knn_classify(
    q: &[f64],
    train: &[(Vec<f64>, String)],
    k: usize,
    level: HierarchyLevel,
    taxonomy: &Taxonomy,
    split_objects: bool,
) -> Result<String, MetadataError> {
    if train.is_empty() {
        return Err(MetadataError::EmptyTrainingSet);
    }
    let mut scored: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, (v, _))| {
            if v.len() != q.len() {
                Err(MetadataError::DimensionMismatch {
                    expected: q.len(),
                    actual: v.len(),
                })
            } else {
                Ok((crate::vector::euclidean(q, v), i))
            }
        })
        .collect::<Result<_, _>>()?;
    let k = k.clamp(1, scored.len());
    scored.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for &(d, i) in &scored[..k] {
        let label = level_label(taxonomy, &train[i].1, level, split_objects)?;
        let e = votes.entry(label).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += d;
    }
    let (label, _) = votes
        .into_iter()
        .min_by(|(la, (na, sa)), (lb, (nb, sb))| {
            nb.cmp(na)
                .then((sa / *na as f64).total_cmp(&(sb / *nb as f64)))
                .then(la.cmp(lb))
        })
        .expect("k >= 1 votes");
    Ok(label)
}

/// Per-class normalized histograms of feature codes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureCodeHistograms {
    hists: BTreeMap<String, BTreeMap<String, f64>>,
}

impl FeatureCodeHistograms {
    pub fn build<'a, I>(train: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for (class, code) in train {
            *counts.entry(class.to_string()).or_default().entry(code.to_string()).or_default() += 1;
        }
        let hists = counts
            .into_iter()
            .map(|(class, codes)| {
                let total: usize = codes.values().sum();
                let h = codes.into_iter().map(|(c, n)| (c, n as f64 / total as f64)).collect();
                (class, h)
            })
            .collect();
        Self { hists }
    }

    /// Relative frequency of `code` in `class`; 0 when either is absent.
    pub fn value(&self, class: &str, code: &str) -> f64 {
        self.hists
            .get(class)
            .and_then(|h| h.get(code))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn histogram(&self, class: &str) -> Option<&BTreeMap<String, f64>> {
        self.hists.get(class)
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.hists.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.hists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hists.is_empty()
    }
}

/// Convenience over (class, code) pairs.
pub fn build_feature_code_histograms(train: &[(String, String)]) -> FeatureCodeHistograms {
    FeatureCodeHistograms::build(train.iter().map(|(c, f)| (c.as_str(), f.as_str())))
}

/// Swaps the first two (class, distance) pairs when their distance gap is
/// below `rho` and the query's feature code is strictly more frequent in
/// the second class. Everything else is returned unchanged.
pub fn rerank_with_feature_code(
    ranked: &[(String, f64)],
    query_code: Option<&str>,
    hists: &FeatureCodeHistograms,
    rho: f64,
) -> Vec<(String, f64)> {
    let mut out = ranked.to_vec();
    if out.len() < 2 {
        return out;
    }
    let Some(code) = query_code else {
        return out;
    };
    let gap = out[1].1 - out[0].1;
    if gap < rho && hists.value(&out[1].0, code) > hists.value(&out[0].0, code) {
        out.swap(0, 1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::TOY_FIXTURE;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schema() -> MetadataSchema {
        MetadataSchema::new(vec![
            AttributeSpec::Numeric {
                name: "pitch".into(),
                min: -90.0,
                max: 90.0,
            },
            AttributeSpec::Categorical {
                name: "country".into(),
                domain: vec!["ES".into(), "FR".into(), "US".into()],
            },
        ])
        .unwrap()
    }

    #[test]
    fn numeric_midpoint_is_half() {
        let v = encode_metadata(&MetadataRecord::new().number("pitch", 0.0), &schema()).unwrap();
        assert_eq!(v[0], 0.5);
    }

    #[test]
    fn one_hot_country() {
        let v = encode_metadata(&MetadataRecord::new().text("country", "ES"), &schema()).unwrap();
        assert_eq!(v.len(), 1 + 4);
        assert!(v[1] > 0.0);
        assert!(v[2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn categorical_mismatch_costs_exactly_one() {
        let s = schema();
        let a = encode_metadata(&MetadataRecord::new().number("pitch", 10.0).text("country", "ES"), &s).unwrap();
        let b = encode_metadata(&MetadataRecord::new().number("pitch", 10.0).text("country", "US"), &s).unwrap();
        // raw one-hot difference [1, 0, -1, 0] has squared norm 2; scaled by 1/sqrt(2) per entry -> 1
        let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        assert!((sq - 1.0).abs() < 1e-12);
        assert_eq!(crate::vector::squared_euclidean(&a, &a), 0.0);
    }

    #[test]
    fn encode_errors() {
        let s = schema();
        assert!(matches!(
            encode_metadata(&MetadataRecord::new().number("pitch", 120.0), &s),
            Err(MetadataError::OutOfRange { .. })
        ));
        assert!(matches!(
            encode_metadata(&MetadataRecord::new().text("country", "ZZ"), &s),
            Err(MetadataError::UnknownCategory { .. })
        ));
        assert!(matches!(
            encode_metadata(&MetadataRecord::new().text("pitch", "high"), &s),
            Err(MetadataError::TypeMismatch { .. })
        ));
        assert!(MetadataSchema::new(vec![AttributeSpec::Numeric {
            name: "x".into(),
            min: 1.0,
            max: 1.0
        }])
        .is_err());
    }

    #[test]
    fn missing_values_use_unknown_slot_and_training_mean() {
        let s = schema();
        let mut enc = MetadataEncoder::new(s.clone());
        let train = [
            MetadataRecord::new().number("pitch", -90.0),
            MetadataRecord::new().number("pitch", 0.0),
        ];
        enc.fit_imputation(train.iter());
        let v = enc.encode(&MetadataRecord::new()).unwrap();
        assert_eq!(v.len(), enc.encoded_len());
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!(v[4] > 0.0);
        let explicit = enc.encode(&MetadataRecord::new().text("country", "unknown")).unwrap();
        assert_eq!(explicit[1..], v[1..]);
    }

    #[test]
    fn default_schema_length_is_constant() {
        let enc = MetadataEncoder::new(MetadataSchema::default());
        let full = MetadataRecord::new()
            .number("pitch", 12.0)
            .with("wifi", MetaValue::Bool(true))
            .text("country", "ES")
            .text("gis_feature_code", "ZOO");
        assert_eq!(enc.encode(&full).unwrap().len(), enc.encoded_len());
        assert_eq!(enc.encode(&MetadataRecord::new()).unwrap().len(), enc.encoded_len());
    }

    #[test]
    fn record_json_shape() {
        let r: MetadataRecord = serde_json::from_str(r#"{"pitch": 3.5, "wifi": true, "country": "ES"}"#).unwrap();
        assert_eq!(r.get("pitch"), Some(&MetaValue::Number(3.5)));
        assert_eq!(r.get("wifi"), Some(&MetaValue::Bool(true)));
        let enc = MetadataEncoder::new(MetadataSchema::default());
        assert!(enc.encode(&r).is_ok());
    }

    fn toy() -> Taxonomy {
        let text = format!("{TOY_FIXTURE}table\tfurniture\ttable\ta flat-topped piece of furniture\n");
        Taxonomy::parse(&text).unwrap()
    }

    #[test]
    fn knn_examples() {
        let t = toy();
        let train = vec![
            (vec![0.0, 0.0], "chair".to_string()),
            (vec![1.0, 0.0], "dog".to_string()),
            (vec![0.0, 1.0], "table".to_string()),
        ];
        assert_eq!(metadata_knn_classify(&[1.0, 0.0], &train, 1, HierarchyLevel::Leaf, &t, false).unwrap(), "dog");
        assert_eq!(
            metadata_knn_classify(&[1.0, 0.0], &train, 3, HierarchyLevel::Root, &t, false).unwrap(),
            "objects"
        );
        assert_eq!(
            metadata_knn_classify(&[1.0, 0.0], &train, 3, HierarchyLevel::Second, &t, false).unwrap(),
            "furniture"
        );
        let same: Vec<_> = train.iter().map(|(v, _)| (v.clone(), "dog".to_string())).collect();
        assert_eq!(metadata_knn_classify(&[5.0, 5.0], &same, 2, HierarchyLevel::Leaf, &t, false).unwrap(), "dog");
        assert!(matches!(
            metadata_knn_classify(&[0.0], &[], 3, HierarchyLevel::Leaf, &t, false),
            Err(MetadataError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn knn_tie_prefers_closer_class_then_name() {
        let t = toy();
        let train = vec![
            (vec![1.0], "dog".to_string()),
            (vec![-2.0], "chair".to_string()),
        ];
        assert_eq!(metadata_knn_classify(&[0.0], &train, 2, HierarchyLevel::Leaf, &t, false).unwrap(), "dog");
        let train = vec![(vec![1.0], "dog".to_string()), (vec![-1.0], "chair".to_string())];
        assert_eq!(metadata_knn_classify(&[0.0], &train, 2, HierarchyLevel::Leaf, &t, false).unwrap(), "chair");
    }

    #[test]
    fn root_level_with_single_root_is_constant() {
        let t = Taxonomy::parse("o\tROOT:objects\to\troot\na\to\ta\tx\nb\to\tb\ty\n").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train: Vec<_> = (0..30)
            .map(|i| (vec![rng.random::<f64>()], if i % 2 == 0 { "a" } else { "b" }.to_string()))
            .collect();
        for _ in 0..20 {
            let q = [rng.random::<f64>()];
            assert_eq!(metadata_knn_classify(&q, &train, 5, HierarchyLevel::Root, &t, false).unwrap(), "o");
        }
    }

    #[test]
    fn split_objects_distinguishes_second_level() {
        let t = crate::ontology::bundled();
        assert_eq!(level_label(&t, "chair.n.01", HierarchyLevel::Root, false).unwrap(), "object.n.01");
        assert_eq!(level_label(&t, "chair.n.01", HierarchyLevel::Root, true).unwrap(), "artifact.n.01");
        assert_eq!(level_label(&t, "rock.n.01", HierarchyLevel::Root, true).unwrap(), "natural_object.n.01");
        assert_eq!(level_label(&t, "dog.n.01", HierarchyLevel::Root, true).unwrap(), "animal.n.01");
    }

    #[test]
    fn histogram_counting() {
        let train: Vec<(String, String)> = ["ZOO", "ZOO", "MALL"].iter().map(|c| ("dog".to_string(), c.to_string())).collect();
        let h = build_feature_code_histograms(&train);
        assert!((h.value("dog", "ZOO") - 2.0 / 3.0).abs() < 1e-12);
        assert!((h.value("dog", "MALL") - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(h.value("cat", "ZOO"), 0.0);
        let single = build_feature_code_histograms(&[("cat".into(), "BCH".into())]);
        assert_eq!(single.value("cat", "BCH"), 1.0);
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn histogram_law_of_large_numbers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let codes = ["A", "B", "C", "D"];
        let train: Vec<(String, String)> = (0..10_000)
            .map(|_| ("c".to_string(), codes[rng.random_range(0..4)].to_string()))
            .collect();
        let h = build_feature_code_histograms(&train);
        let hist = h.histogram("c").unwrap();
        assert!((hist.values().sum::<f64>() - 1.0).abs() < 1e-6);
        for c in codes {
            assert!((h.value("c", c) - 0.25).abs() < 0.02);
        }
    }

    fn hists() -> FeatureCodeHistograms {
        let mut pairs = Vec::new();
        for _ in 0..8 {
            pairs.push(("c2".to_string(), "ZOO".to_string()));
        }
        pairs.push(("c2".to_string(), "MALL".to_string()));
        pairs.push(("c2".to_string(), "MALL".to_string()));
        pairs.push(("c1".to_string(), "ZOO".to_string()));
        for _ in 0..9 {
            pairs.push(("c1".to_string(), "MALL".to_string()));
        }
        build_feature_code_histograms(&pairs)
    }

    fn ranked(d1: f64, d2: f64) -> Vec<(String, f64)> {
        vec![("c1".into(), d1), ("c2".into(), d2), ("c3".into(), 0.9)]
    }

    #[test]
    fn rerank_examples() {
        let h = hists();
        assert_eq!(h.value("c2", "ZOO"), 0.8);
        assert_eq!(h.value("c1", "ZOO"), 0.1);
        assert_eq!(rerank_with_feature_code(&ranked(0.30, 0.35), Some("ZOO"), &h, DEFAULT_RHO), ranked(0.30, 0.35));
        let swapped = rerank_with_feature_code(&ranked(0.30, 0.31), Some("ZOO"), &h, DEFAULT_RHO);
        assert_eq!(swapped[0], ("c2".to_string(), 0.31));
        assert_eq!(swapped[1], ("c1".to_string(), 0.30));
        assert_eq!(swapped[2], ("c3".to_string(), 0.9));
        let even = build_feature_code_histograms(&[("c1".into(), "ZOO".into()), ("c2".into(), "ZOO".into())]);
        assert_eq!(rerank_with_feature_code(&ranked(0.30, 0.31), Some("ZOO"), &even, DEFAULT_RHO), ranked(0.30, 0.31));
        assert_eq!(rerank_with_feature_code(&ranked(0.30, 0.31), None, &h, DEFAULT_RHO), ranked(0.30, 0.31));
        let one = vec![("c1".to_string(), 0.1)];
        assert_eq!(rerank_with_feature_code(&one, Some("ZOO"), &h, DEFAULT_RHO), one);
    }

    #[test]
    fn rerank_is_idempotent_and_permutes_only_the_head() {
        let h = hists();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let mut d: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..0.1)).collect();
            d.sort_by(f64::total_cmp);
            let list: Vec<(String, f64)> = ["c1", "c2", "c3", "c4"]
                .iter()
                .zip(&d)
                .map(|(c, d)| (c.to_string(), *d))
                .collect();
            let code = ["ZOO", "MALL", "BCH"][rng.random_range(0..3)];
            let once = rerank_with_feature_code(&list, Some(code), &h, DEFAULT_RHO);
            let twice = rerank_with_feature_code(&once, Some(code), &h, DEFAULT_RHO);
            assert_eq!(once, twice);
            assert_eq!(once[2..], list[2..]);
            let mut a = once.clone();
            let mut b = list.clone();
            a.sort_by(|x, y| x.0.cmp(&y.0));
            b.sort_by(|x, y| x.0.cmp(&y.0));
            assert_eq!(a, b);
        }
    }
}
