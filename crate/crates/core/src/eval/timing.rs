use super::{brute_top, prepare, Dataset, EvalError, Rows};
use crate::ann::{AnnForest, ForestParams, SearchBudget};
use crate::pca::PcaModel;
use crate::vector::{Descriptor, Metric};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::HashSet;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingConfig {
    pub queries: usize,
    pub warmup: usize,
    pub k: usize,
    pub l2: bool,
    pub pca_threshold: f64,
    /// Rows used to fit PCA (a random subset of the indexed set).
    pub pca_fit_rows: usize,
    pub forest: ForestParams,
    pub budget: SearchBudget,
    pub seed: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            queries: 1000,
            warmup: 50,
            k: 10,
            l2: true,
            pca_threshold: 0.95,
            pca_fit_rows: 2000,
            forest: ForestParams::default(),
            budget: SearchBudget::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub variant: String,
    pub dim: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub queries: usize,
    pub build_ms: f64,
    /// Fraction of queries whose nearest neighbor matches brute NC.
    pub recall_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub items: usize,
    pub input_dim: usize,
    pub rows: Vec<TimingRow>,
}

impl TimingReport {
    pub fn row(&self, variant: &str) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,dim,mean_ms,std_ms,queries,build_ms,recall_at_1\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{},{:.1},{:.4}\n",
                r.variant, r.dim, r.mean_ms, r.std_ms, r.queries, r.build_ms, r.recall_at_1
            ));
        }
        s
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v.sqrt())
}

fn time_queries<F>(queries: &[Vec<f64>], warmup: usize, mut search: F) -> Result<(Vec<f64>, Vec<u64>), EvalError>
where
    F: FnMut(&[f64]) -> Result<u64, EvalError>,
{
    for q in queries.iter().cycle().take(warmup) {
        std::hint::black_box(search(q)?);
    }
    let mut times = Vec::with_capacity(queries.len());
    let mut firsts = Vec::with_capacity(queries.len());
    for q in queries {
        let t = Instant::now();
        let first = std::hint::black_box(search(q)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
        firsts.push(first);
    }
    Ok((times, firsts))
}

/// Mean query time for brute and forest search over raw and PCA-compressed
/// codes. Queries are drawn from the dataset and left out of the index.
/// Query-side projection is part of the measured time.
pub fn timing_benchmark(ds: &Dataset, cfg: &TimingConfig) -> Result<TimingReport, EvalError> {
    ds.check()?;
    if ds.len() <= cfg.queries + 1 {
        return Err(EvalError::DatasetTooSmall(format!("{} samples for {} queries", ds.len(), cfg.queries)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let q_idx: HashSet<usize> = sample(&mut rng, ds.len(), cfg.queries).into_iter().collect();
    let mut indexed = Vec::new();
    let mut queries = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let v = prepare(&s.values, cfg.l2)?;
        if q_idx.contains(&i) {
            queries.push(v);
        } else {
            indexed.push(v);
        }
    }
    let dim = ds.dim();
    let metric = ds.metric;
    let rows = Rows::from_vecs(dim, indexed.iter().map(Vec::as_slice));
    let k = cfg.k.max(1);

    let fit_idx = sample(&mut rng, indexed.len(), cfg.pca_fit_rows.min(indexed.len()));
    let fit_rows: Vec<&[f64]> = fit_idx.iter().map(|i| indexed[i].as_slice()).collect();
    let t = Instant::now();
    let pca = PcaModel::fit(&fit_rows, cfg.pca_threshold)?;
    let projected: Vec<Vec<f64>> = indexed.iter().map(|r| pca.project(r)).collect::<Result<_, _>>()?;
    let pca_build = t.elapsed().as_secs_f64() * 1e3;
    let pdim = pca.n_components();
    let prows = Rows::from_vecs(pdim, projected.iter().map(Vec::as_slice));
    drop(indexed);

    let mut out = Vec::new();
    let (times, truth) = time_queries(&queries, cfg.warmup, |q| Ok(brute_top(metric, &rows, q, k)[0].prototype_id))?;
    out.push(row("brute NC", dim, &times, 0.0, &truth, &truth));

    let (times, firsts) = time_queries(&queries, cfg.warmup, |q| {
        let p = pca.project(q)?;
        Ok(brute_top(Metric::Euclidean, &prows, &p, k)[0].prototype_id)
    })?;
    out.push(row("brute PCA", pdim, &times, pca_build, &firsts, &truth));
    drop(prows);

    let build = |rows: &Rows, metric: Metric| -> Result<(AnnForest, f64), EvalError> {
        let t = Instant::now();
        let items = (0..rows.len())
            .map(|i| Ok((i as u64, Descriptor::new(rows.row(i).to_vec(), metric)?)))
            .collect::<Result<Vec<_>, EvalError>>()?;
        let f = AnnForest::build(&items, cfg.forest)?;
        Ok((f, t.elapsed().as_secs_f64() * 1e3))
    };
    let (forest, build_ms) = build(&rows, metric)?;
    drop(rows);
    let (times, firsts) = time_queries(&queries, cfg.warmup, |q| {
        let d = Descriptor::new(q.to_vec(), metric)?;
        Ok(forest.search(&d, k, cfg.budget)?[0].prototype_id)
    })?;
    out.push(row("ann NC", dim, &times, build_ms, &firsts, &truth));
    drop(forest);

    let prows = Rows::from_vecs(pdim, projected.iter().map(Vec::as_slice));
    drop(projected);
    let (forest, build_ms) = build(&prows, Metric::Euclidean)?;
    drop(prows);
    let (times, firsts) = time_queries(&queries, cfg.warmup, |q| {
        let d = Descriptor::euclidean(pca.project(q)?)?;
        Ok(forest.search(&d, k, cfg.budget)?[0].prototype_id)
    })?;
    out.push(row("ann PCA", pdim, &times, build_ms + pca_build, &firsts, &truth));

    Ok(TimingReport {
        items: ds.len() - cfg.queries,
        input_dim: dim,
        rows: out,
    })
}

fn row(variant: &str, dim: usize, times: &[f64], build_ms: f64, firsts: &[u64], truth: &[u64]) -> TimingRow {
    let (mean_ms, std_ms) = mean_std(times);
    let hits = firsts.iter().zip(truth).filter(|(a, b)| a == b).count();
    TimingRow {
        variant: variant.into(),
        dim,
        mean_ms,
        std_ms,
        queries: times.len(),
        build_ms,
        recall_at_1: hits as f64 / truth.len().max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::synth::{gaussian_clusters, ClusterParams};

    #[test]
    fn report_has_four_rows_and_stable_means() {
        let ds = gaussian_clusters(&ClusterParams {
            noise: 0.2,
            ..ClusterParams::balanced(20, 100, 32, 1)
        });
        let cfg = TimingConfig {
            queries: 200,
            warmup: 20,
            pca_fit_rows: 500,
            forest: ForestParams {
                n_trees: 10,
                ..ForestParams::default()
            },
            budget: SearchBudget::Nodes(100),
            ..TimingConfig::default()
        };
        let a = timing_benchmark(&ds, &cfg).unwrap();
        assert_eq!(a.rows.len(), 4);
        assert_eq!(a.row("brute NC").unwrap().recall_at_1, 1.0);
        assert!(a.row("brute PCA").unwrap().dim < 32);
        let b = timing_benchmark(&ds, &cfg).unwrap();
        let (ra, rb) = (a.row("brute NC").unwrap(), b.row("brute NC").unwrap());
        assert!((ra.mean_ms - rb.mean_ms).abs() <= 3.0 * ra.std_ms.max(rb.std_ms).max(1e-3));
        assert_eq!(a.to_csv().lines().count(), 5);
    }
}
