//! Seed-deterministic synthetic corpora standing in for real image codes.

use super::{Dataset, Sample};
use crate::metadata::{MetaValue, MetadataRecord, FEATURE_CODE_ATTRIBUTE};
use crate::ontology::Taxonomy;
use crate::vector::Metric;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};

/// Synset-style id of synthetic class `i`.
pub fn class_name(i: usize) -> String {
    format!("class{i:03}.n.01")
}

/// A flat taxonomy with one root over the given classes.
pub fn taxonomy_for<'a>(classes: impl IntoIterator<Item = &'a str>) -> Taxonomy {
    let mut text = String::from("synthetic.n.01\tROOT:objects\tsynthetic\tsynthetic classes\n");
    let mut seen: Vec<&str> = classes.into_iter().collect();
    seen.sort_unstable();
    seen.dedup();
    for c in seen {
        let lemma = c.split('.').next().unwrap_or(c);
        text.push_str(&format!("{c}\tsynthetic.n.01\t{lemma}\tsynthetic class {lemma}\n"));
    }
    Taxonomy::parse(&text).expect("generated taxonomy parses")
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sigma
        })
        .collect()
}

/// Cluster-per-class Gaussian data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterParams {
    pub samples_per_class: Vec<usize>,
    pub dim: usize,
    /// Standard deviation of the class centers.
    pub center_spread: f64,
    /// Within-class standard deviation.
    pub noise: f64,
    /// Log-normal sigma of a per-sample scale factor; 0 disables it.
    pub norm_jitter: f64,
    pub seed: u64,
}

impl ClusterParams {
    pub fn balanced(n_classes: usize, per_class: usize, dim: usize, seed: u64) -> Self {
        Self {
            samples_per_class: vec![per_class; n_classes],
            dim,
            center_spread: 1.0,
            noise: 0.5,
            norm_jitter: 0.0,
            seed,
        }
    }
}

/// Samples are emitted in class-major order with timestamps equal to their
/// position.
pub fn gaussian_clusters(p: &ClusterParams) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let jitter = (p.norm_jitter > 0.0).then(|| LogNormal::new(0.0, p.norm_jitter).expect("valid sigma"));
    let mut samples = Vec::new();
    for (c, &n) in p.samples_per_class.iter().enumerate() {
        let center = gaussian_vec(&mut rng, p.dim, p.center_spread);
        for _ in 0..n {
            let scale = jitter.map_or(1.0, |j| j.sample(&mut rng));
            let values = center
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * (m + p.noise * z)
                })
                .collect();
            samples.push(Sample::new(samples.len() as u64, class_name(c), values));
        }
    }
    finish(samples, Metric::Euclidean)
}

/// Class clusters living near a random `latent`-dimensional subspace of
/// `dim`-space, plus isotropic noise of standard deviation `ambient_noise`.
/// Mimics the low intrinsic dimensionality of network activations.
pub fn low_rank_clusters(
    n_classes: usize,
    per_class: usize,
    dim: usize,
    latent: usize,
    noise: f64,
    ambient_noise: f64,
    seed: u64,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis: Vec<Vec<f64>> = (0..latent).map(|_| gaussian_vec(&mut rng, dim, 1.0 / (dim as f64).sqrt())).collect();
    let mut samples = Vec::with_capacity(n_classes * per_class);
    let mut values = vec![0.0; dim];
    for c in 0..n_classes {
        let center = gaussian_vec(&mut rng, latent, 1.0);
        for _ in 0..per_class {
            values.iter_mut().for_each(|v| *v = 0.0);
            for (b, &m) in basis.iter().zip(&center) {
                let z: f64 = StandardNormal.sample(&mut rng);
                let coef = m + noise * z;
                values.iter_mut().zip(b).for_each(|(v, &bj)| *v += coef * bj);
            }
            for v in values.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += ambient_noise * z;
            }
            samples.push(Sample::new(samples.len() as u64, class_name(c), values.clone()));
        }
    }
    finish(samples, Metric::Euclidean)
}

/// Class clusters under a random per-sample magnitude: direction carries
/// the class, the norm is pure nuisance.
pub fn norm_confounded(n_classes: usize, per_class: usize, dim: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = LogNormal::new(0.0, 0.8).expect("valid sigma");
    let mut samples = Vec::new();
    for c in 0..n_classes {
        let center = gaussian_vec(&mut rng, dim, 1.0);
        for _ in 0..per_class {
            let s = scale.sample(&mut rng);
            let v = center
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s * (m + noise * z)
                })
                .collect();
            samples.push(Sample::new(samples.len() as u64, class_name(c), v));
        }
    }
    finish(samples, Metric::Euclidean)
}

/// Two descriptor channels that each resolve half of the class identity.
/// Class `(a, b)` draws channel one around center `A[a]` and channel two
/// around `B[b]`, so neither channel alone separates all classes.
pub fn complementary_channels(n_a: usize, n_b: usize, per_class: usize, dim: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a_centers: Vec<Vec<f64>> = (0..n_a).map(|_| gaussian_vec(&mut rng, dim, 1.0)).collect();
    let b_centers: Vec<Vec<f64>> = (0..n_b).map(|_| gaussian_vec(&mut rng, dim, 1.0)).collect();
    let mut samples = Vec::new();
    for a in 0..n_a {
        for b in 0..n_b {
            let class = class_name(a * n_b + b);
            for _ in 0..per_class {
                let around = |rng: &mut ChaCha8Rng, c: &[f64]| -> Vec<f64> {
                    c.iter()
                        .map(|&m| {
                            let z: f64 = StandardNormal.sample(rng);
                            m + noise * z
                        })
                        .collect()
                };
                let t = around(&mut rng, &a_centers[a]);
                let c = around(&mut rng, &b_centers[b]);
                let mut s = Sample::new(samples.len() as u64, class.clone(), t);
                s.second = Some(c);
                samples.push(s);
            }
        }
    }
    let mut ds = finish(samples, Metric::Euclidean);
    ds.second_metric = Some(Metric::Euclidean);
    ds
}

/// Time-ordered stream: classes appear progressively and the within-class
/// noise interpolates from `noise_start` to `noise_end` along the stream.
pub fn temporal_stream(
    n_classes: usize,
    total: usize,
    dim: usize,
    noise_start: f64,
    noise_end: f64,
    seed: u64,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..n_classes).map(|_| gaussian_vec(&mut rng, dim, 1.0)).collect();
    let mut samples = Vec::with_capacity(total);
    for t in 0..total {
        let frac = t as f64 / total.max(1) as f64;
        // the active class pool grows with time from a quarter of the classes
        let active = ((0.25 + 0.75 * frac) * n_classes as f64).ceil().max(1.0) as usize;
        let c = rng.random_range(0..active.min(n_classes));
        let noise = noise_start + (noise_end - noise_start) * frac;
        let v = centers[c]
            .iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + noise * z
            })
            .collect();
        let mut s = Sample::new(t as u64, class_name(c), v);
        s.timestamp = t as i64;
        samples.push(s);
    }
    finish(samples, Metric::Euclidean)
}

/// Pairs of classes with nearly identical centers (visually confusable),
/// each class tagged with a dominant feature code it carries with
/// probability `code_fidelity`.
pub fn confusable_pairs(
    n_pairs: usize,
    per_class: usize,
    dim: usize,
    pair_gap: f64,
    noise: f64,
    code_fidelity: f64,
    seed: u64,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for pair in 0..n_pairs {
        let base = gaussian_vec(&mut rng, dim, 1.0);
        for member in 0..2 {
            let offset = gaussian_vec(&mut rng, dim, pair_gap);
            let c = pair * 2 + member;
            for _ in 0..per_class {
                let v = base
                    .iter()
                    .zip(&offset)
                    .map(|(&m, &o)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + o + noise * z
                    })
                    .collect();
                samples.push(Sample::new(samples.len() as u64, class_name(c), v));
            }
        }
    }
    let mut ds = finish(samples, Metric::Euclidean);
    assign_feature_codes(&mut ds, code_fidelity, seed ^ 0x5eed);
    ds
}

/// Codes drawn by [`assign_feature_codes`].
pub const SYNTHETIC_CODES: [&str; 8] = ["PPL", "ZOO", "MALL", "UNIV", "BCH", "PRK", "MUS", "HTL"];

/// Gives each class a dominant feature code (cycling through
/// [`SYNTHETIC_CODES`]; partner classes in a pair differ) and tags each
/// sample with it with probability `fidelity`, else with a uniform code.
pub fn assign_feature_codes(ds: &mut Dataset, fidelity: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = ds.classes();
    for s in &mut ds.samples {
        let ci = classes.binary_search(&s.class).expect("class listed");
        let code = if rng.random_bool(fidelity.clamp(0.0, 1.0)) {
            SYNTHETIC_CODES[ci % SYNTHETIC_CODES.len()]
        } else {
            SYNTHETIC_CODES[rng.random_range(0..SYNTHETIC_CODES.len())]
        };
        s.metadata.0.insert(FEATURE_CODE_ATTRIBUTE.into(), MetaValue::Text(code.into()));
    }
}

/// Metadata-only records: class-correlated feature code plus uninformative
/// numerics, for the default schema.
pub fn metadata_records(n_classes: usize, per_class: usize, fidelity: f64, seed: u64) -> Vec<(MetadataRecord, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pitch = Normal::new(0.0, 30.0).expect("valid sigma");
    let mut out = Vec::new();
    for c in 0..n_classes {
        for _ in 0..per_class {
            let code = if rng.random_bool(fidelity) {
                SYNTHETIC_CODES[c % SYNTHETIC_CODES.len()]
            } else {
                SYNTHETIC_CODES[rng.random_range(0..SYNTHETIC_CODES.len())]
            };
            let p: f64 = pitch.sample(&mut rng);
            let r = MetadataRecord::new()
                .number("pitch", p.clamp(-180.0, 180.0))
                .number("selected_area", rng.random_range(0.05..1.0))
                .with("wifi", MetaValue::Bool(rng.random_bool(0.5)))
                .text(FEATURE_CODE_ATTRIBUTE, code);
            out.push((r, class_name(c)));
        }
    }
    out
}

/// Reassigns labels uniformly at random (keeps class sizes).
pub fn shuffle_labels(ds: &mut Dataset, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<String> = ds.samples.iter().map(|s| s.class.clone()).collect();
    labels.shuffle(&mut rng);
    for (s, l) in ds.samples.iter_mut().zip(labels) {
        s.class = l;
    }
}

fn finish(samples: Vec<Sample>, metric: Metric) -> Dataset {
    let taxonomy = taxonomy_for(samples.iter().map(|s| s.class.as_str()));
    Dataset {
        metric,
        second_metric: None,
        samples,
        taxonomy: Some(taxonomy),
    }
}
