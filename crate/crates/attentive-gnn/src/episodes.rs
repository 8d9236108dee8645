//! Datasets of per-class feature vectors and N-way K-shot task sampling.
//!
//! A task is a complete graph over `N*K` labeled support nodes plus `Q`
//! query nodes. Support label rows are one-hot; query rows start uniform
//! at `1/N` or all zero depending on the configured initialization. All
//! sampling is driven by ChaCha8 seeded with an explicit 64-bit seed, so a
//! `(dataset, shape, seed)` triple fully determines the task.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::QueryInit;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Query/support arrangement of a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// One query node per task.
    Inductive,
    /// All queries classified jointly in one graph.
    Transductive,
}

/// How query classes are drawn in the transductive setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryDist {
    /// Exactly `q` queries from each of the N classes.
    Uniform,
    /// `N*q` queries with classes drawn i.i.d. uniform over the N classes.
    Random,
}

/// Which experimental split a dataset represents. Bookkeeping only; the
/// CSV format does not carry it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    #[default]
    Train,
    Val,
    Test,
}

/// Feature vectors grouped under one class label.
#[derive(Clone, Debug)]
pub struct ClassSamples {
    pub label: String,
    pub samples: Vec<Vec<f64>>,
}

/// Per-class lists of fixed-dimension feature vectors.
#[derive(Clone, Debug)]
pub struct FeatureDataset {
    classes: Vec<ClassSamples>,
    dim: usize,
    split: SplitTag,
}

impl FeatureDataset {
    pub fn from_classes(classes: Vec<ClassSamples>) -> Result<Self> {
        let dim = classes
            .iter()
            .flat_map(|c| c.samples.first())
            .map(|s| s.len())
            .next()
            .unwrap_or(0);
        for class in &classes {
            for sample in &class.samples {
                if sample.len() != dim {
                    return Err(Error::InvalidArg(format!(
                        "class {}: sample dimension {} does not match dataset dimension {}",
                        class.label,
                        sample.len(),
                        dim
                    )));
                }
            }
        }
        Ok(FeatureDataset {
            classes,
            dim,
            split: SplitTag::Train,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassSamples] {
        &self.classes
    }

    pub fn total_samples(&self) -> usize {
        self.classes.iter().map(|c| c.samples.len()).sum()
    }

    /// Write as CSV with header `label,f0,...,f{d-1}`. Floats are printed
    /// with the shortest representation that parses back exactly.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let write = |out: &mut std::io::BufWriter<std::fs::File>, line: &str| {
            out.write_all(line.as_bytes())
                .and_then(|_| out.write_all(b"\n"))
                .map_err(|e| Error::io(path, e))
        };
        let header: Vec<String> = std::iter::once("label".to_string())
            .chain((0..self.dim).map(|i| format!("f{i}")))
            .collect();
        write(&mut out, &header.join(","))?;
        for class in &self.classes {
            for sample in &class.samples {
                let mut fields = Vec::with_capacity(self.dim + 1);
                fields.push(class.label.clone());
                fields.extend(sample.iter().map(|v| v.to_string()));
                write(&mut out, &fields.join(","))?;
            }
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Load a dataset written by [`FeatureDataset::save_csv`]. The feature
    /// dimension is inferred from the header; classes appear in order of
    /// first appearance.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let path_str = path.display().to_string();
        let mut lines = text.lines().enumerate();

        let (_, header) = lines.next().ok_or_else(|| Error::Parse {
            path: path_str.clone(),
            line: 1,
            msg: "missing header".into(),
        })?;
        let head: Vec<&str> = header.split(',').collect();
        let dim = head.len().saturating_sub(1);
        let header_ok = head.first() == Some(&"label")
            && dim >= 1
            && head[1..]
                .iter()
                .enumerate()
                .all(|(i, f)| *f == format!("f{i}"));
        if !header_ok {
            return Err(Error::Parse {
                path: path_str,
                line: 1,
                msg: "expected header label,f0,...,f{d-1}".into(),
            });
        }

        let mut order: Vec<String> = Vec::new();
        let mut by_label: HashMap<String, Vec<Vec<f64>>> = HashMap::new();
        for (idx, raw) in lines {
            let line_no = (idx + 1) as u64;
            if raw.is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(Error::Parse {
                    path: path_str,
                    line: line_no,
                    msg: format!("expected {} fields, got {}", dim + 1, fields.len()),
                });
            }
            let mut sample = Vec::with_capacity(dim);
            for (f, field) in fields[1..].iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    path: path_str.clone(),
                    line: line_no,
                    msg: format!("non-numeric value {field:?} in column f{f}"),
                })?;
                sample.push(v);
            }
            let label = fields[0].to_string();
            if !by_label.contains_key(&label) {
                order.push(label.clone());
            }
            by_label.entry(label).or_default().push(sample);
        }

        if order.is_empty() {
            return Err(Error::Capacity(format!("{path_str}: no samples")));
        }
        let classes = order
            .into_iter()
            .map(|label| {
                let samples = by_label.remove(&label).unwrap_or_default();
                ClassSamples { label, samples }
            })
            .collect();
        FeatureDataset::from_classes(classes)
    }
}

/// Class means drawn from N(0, between_sigma^2 I), samples from
/// N(mean, within_sigma^2 I). Fully determined by the seed; `within_sigma`
/// of 0 degenerates to every sample equaling its class mean.
pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    dim: usize,
    between_sigma: f64,
    within_sigma: f64,
    seed: u64,
) -> FeatureDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes);
    for c in 0..classes {
        let mean: Vec<f64> = (0..dim)
            .map(|_| between_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let samples = (0..per_class)
            .map(|_| {
                mean.iter()
                    .map(|&m| m + within_sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        out.push(ClassSamples {
            label: c.to_string(),
            samples,
        });
    }
    FeatureDataset {
        classes: out,
        dim,
        split: SplitTag::Train,
    }
}

/// One episodic task over a complete graph.
///
/// Nodes are ordered support-first (grouped by episode class), then
/// queries. `truth` holds the episode-class index of each query node, in
/// `query_indices` order.
#[derive(Clone, Debug)]
pub struct TaskGraph {
    pub features: Tensor,
    pub labels_init: Tensor,
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
    pub truth: Vec<usize>,
}

impl TaskGraph {
    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.labels_init.cols()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Episode-class index of any node: argmax of the one-hot row for
    /// support nodes, ground truth for query nodes.
    pub fn node_class(&self, node: usize) -> usize {
        if let Some(pos) = self.query_indices.iter().position(|&q| q == node) {
            return self.truth[pos];
        }
        let row = self.labels_init.row(node);
        row.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    pub fn is_query(&self, node: usize) -> bool {
        self.query_indices.contains(&node)
    }
}

/// Assemble a task graph from already-sampled feature vectors.
///
/// `support` rows are taken in the given order (callers group them by
/// class); query label rows are initialized per `query_init`.
pub fn build_task_graph(
    support: &[Vec<f64>],
    support_classes: &[usize],
    queries: &[Vec<f64>],
    query_classes: &[usize],
    n_classes: usize,
    query_init: QueryInit,
) -> Result<TaskGraph> {
    if support.len() != support_classes.len() || queries.len() != query_classes.len() {
        return Err(Error::InvalidArg(
            "build_task_graph: sample/class length mismatch".into(),
        ));
    }
    if let Some(&bad) = support_classes
        .iter()
        .chain(query_classes)
        .find(|&&c| c >= n_classes)
    {
        return Err(Error::InvalidArg(format!(
            "build_task_graph: class index {bad} out of range for {n_classes} classes"
        )));
    }
    let rows: Vec<Vec<f64>> = support.iter().chain(queries).cloned().collect();
    let features = Tensor::from_rows(&rows)?;
    let v = rows.len();

    let mut labels = Tensor::zeros(v, n_classes);
    for (i, &c) in support_classes.iter().enumerate() {
        labels.data_mut()[i * n_classes + c] = 1.0;
    }
    let query_row = match query_init {
        QueryInit::Uniform => 1.0 / n_classes as f64,
        QueryInit::Zero => 0.0,
    };
    for i in support.len()..v {
        for j in 0..n_classes {
            labels.data_mut()[i * n_classes + j] = query_row;
        }
    }

    Ok(TaskGraph {
        features,
        labels_init: labels,
        support_indices: (0..support.len()).collect(),
        query_indices: (support.len()..v).collect(),
        truth: query_classes.to_vec(),
    })
}

/// Sample one N-way K-shot task. Support and query samples are disjoint
/// within every class; the episode is fully determined by the arguments.
#[allow(clippy::too_many_arguments)]
pub fn sample_task(
    ds: &FeatureDataset,
    n_way: usize,
    k_shot: usize,
    queries_per_class: usize,
    setting: Setting,
    query_dist: QueryDist,
    query_init: QueryInit,
    seed: u64,
) -> Result<TaskGraph> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::InvalidArg("sample_task: N and K must be >= 1".into()));
    }
    if ds.num_classes() < n_way {
        return Err(Error::Capacity(format!(
            "need {} classes, dataset has {}",
            n_way,
            ds.num_classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut class_order: Vec<usize> = (0..ds.num_classes()).collect();
    class_order.shuffle(&mut rng);
    let chosen = &class_order[..n_way];

    // How many queries each episode class contributes.
    let mut query_counts = vec![0usize; n_way];
    match setting {
        Setting::Inductive => {
            query_counts[rng.gen_range(0..n_way)] = 1;
        }
        Setting::Transductive => match query_dist {
            QueryDist::Uniform => query_counts.iter_mut().for_each(|c| *c = queries_per_class),
            QueryDist::Random => {
                for _ in 0..n_way * queries_per_class {
                    query_counts[rng.gen_range(0..n_way)] += 1;
                }
            }
        },
    }

    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut support_classes = Vec::with_capacity(n_way * k_shot);
    let mut queries = Vec::new();
    let mut query_classes = Vec::new();
    for (episode_class, &ds_class) in chosen.iter().enumerate() {
        let class = &ds.classes()[ds_class];
        let need = k_shot + query_counts[episode_class];
        if class.samples.len() < need {
            return Err(Error::Capacity(format!(
                "class {} has {} samples, task needs {}",
                class.label,
                class.samples.len(),
                need
            )));
        }
        let mut order: Vec<usize> = (0..class.samples.len()).collect();
        order.shuffle(&mut rng);
        for &i in &order[..k_shot] {
            support.push(class.samples[i].clone());
            support_classes.push(episode_class);
        }
        for &i in &order[k_shot..need] {
            queries.push(class.samples[i].clone());
            query_classes.push(episode_class);
        }
    }

    build_task_graph(
        &support,
        &support_classes,
        &queries,
        &query_classes,
        n_way,
        query_init,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn toy_dataset() -> FeatureDataset {
        generate_synthetic(6, 8, 4, 5.0, 1.0, 99)
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(3, 4, 5, 2.0, 0.5, 42);
        let b = generate_synthetic(3, 4, 5, 2.0, 0.5, 42);
        for (ca, cb) in a.classes().iter().zip(b.classes()) {
            assert_eq!(ca.label, cb.label);
            assert_eq!(ca.samples, cb.samples);
        }
        let c = generate_synthetic(3, 4, 5, 2.0, 0.5, 43);
        assert_ne!(a.classes()[0].samples, c.classes()[0].samples);
    }

    #[test]
    fn zero_within_sigma_collapses_classes() {
        let ds = generate_synthetic(2, 5, 3, 1.0, 0.0, 7);
        for class in ds.classes() {
            for s in &class.samples {
                assert_eq!(s, &class.samples[0]);
            }
        }
    }

    #[test]
    fn centroid_classifier_separates_synthetic_data() {
        // Nearest-class-centroid oracle on held-out samples; confirms the
        // default synthetic parameters produce a learnable dataset.
        let ds = generate_synthetic(20, 30, 16, 5.0, 1.0, 1234);
        let mut correct = 0;
        let mut total = 0;
        let centroids: Vec<Vec<f64>> = ds
            .classes()
            .iter()
            .map(|c| {
                let mut mean = vec![0.0; ds.dim()];
                for s in &c.samples[..20] {
                    for (m, v) in mean.iter_mut().zip(s) {
                        *m += v / 20.0;
                    }
                }
                mean
            })
            .collect();
        for (ci, class) in ds.classes().iter().enumerate() {
            for s in &class.samples[20..] {
                let nearest = centroids
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da: f64 = a.iter().zip(s).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = b.iter().zip(s).map(|(x, y)| (x - y).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                correct += (nearest == ci) as usize;
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.95, "centroid accuracy {acc}");
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("features.csv");
        let ds = toy_dataset();
        ds.save_csv(&path).unwrap();
        let loaded = FeatureDataset::load_csv(&path).unwrap();
        assert_eq!(loaded.dim(), ds.dim());
        assert_eq!(loaded.num_classes(), ds.num_classes());
        for (a, b) in ds.classes().iter().zip(loaded.classes()) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.samples, b.samples);
        }
    }

    #[test]
    fn csv_ragged_row_names_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "label,f0,f1\na,1.0,2.0\nb,3.0\n").unwrap();
        let err = FeatureDataset::load_csv(&path).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
        assert!(err.contains("expected 3 fields"), "{err}");
    }

    #[test]
    fn csv_non_numeric_feature_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "label,f0\na,1.0\nb,oops\n").unwrap();
        let err = FeatureDataset::load_csv(&path).unwrap_err().to_string();
        assert!(err.contains(":3:") && err.contains("non-numeric"), "{err}");
    }

    #[test]
    fn csv_header_only_is_no_samples() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "label,f0,f1\n").unwrap();
        let err = FeatureDataset::load_csv(&path).unwrap_err().to_string();
        assert!(err.contains("no samples"), "{err}");
    }

    #[test]
    fn csv_missing_file_errors_with_path() {
        let err = FeatureDataset::load_csv(Path::new("/nonexistent/x.csv"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("/nonexistent/x.csv"));
    }

    #[test]
    fn inductive_task_has_single_query() {
        let ds = toy_dataset();
        let task = sample_task(
            &ds,
            5,
            1,
            5,
            Setting::Inductive,
            QueryDist::Uniform,
            QueryInit::Uniform,
            42,
        )
        .unwrap();
        assert_eq!(task.num_nodes(), 6);
        assert_eq!(task.query_indices.len(), 1);
        assert_eq!(task.support_indices.len(), 5);
    }

    #[test]
    fn transductive_uniform_covers_every_class() {
        let ds = toy_dataset();
        let task = sample_task(
            &ds,
            5,
            1,
            5,
            Setting::Transductive,
            QueryDist::Uniform,
            QueryInit::Uniform,
            42,
        )
        .unwrap();
        assert_eq!(task.num_nodes(), 30);
        assert_eq!(task.truth.len(), 25);
        for c in 0..5 {
            assert_eq!(task.truth.iter().filter(|&&t| t == c).count(), 5);
        }
    }

    #[test]
    fn transductive_random_fixes_total_but_not_counts() {
        let ds = generate_synthetic(6, 40, 4, 5.0, 1.0, 5);
        let mut saw_uneven = false;
        for seed in 0..20 {
            let task = sample_task(
                &ds,
                5,
                1,
                5,
                Setting::Transductive,
                QueryDist::Random,
                QueryInit::Uniform,
                seed,
            )
            .unwrap();
            assert_eq!(task.truth.len(), 25);
            let counts: Vec<usize> = (0..5)
                .map(|c| task.truth.iter().filter(|&&t| t == c).count())
                .collect();
            saw_uneven |= counts.iter().any(|&c| c != 5);
        }
        assert!(saw_uneven, "random query classes never deviated from uniform");
    }

    #[test]
    fn task_sampling_is_deterministic() {
        let ds = toy_dataset();
        let sample = |seed| {
            sample_task(
                &ds,
                4,
                2,
                3,
                Setting::Transductive,
                QueryDist::Uniform,
                QueryInit::Uniform,
                seed,
            )
            .unwrap()
        };
        let (a, b) = (sample(7), sample(7));
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels_init, b.labels_init);
        assert_eq!(a.truth, b.truth);
        let c = sample(8);
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn support_and_query_samples_are_disjoint() {
        // Every sample of every chosen class is used exactly once when
        // per_class == k + q, so any overlap would show up as a duplicate.
        let ds = generate_synthetic(4, 5, 3, 5.0, 1.0, 31);
        let task = sample_task(
            &ds,
            4,
            2,
            3,
            Setting::Transductive,
            QueryDist::Uniform,
            QueryInit::Uniform,
            3,
        )
        .unwrap();
        let mut rows: Vec<Vec<u64>> = (0..task.num_nodes())
            .map(|i| task.features.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        let before = rows.len();
        rows.dedup();
        assert_eq!(rows.len(), before, "duplicate sample in task graph");
    }

    #[test]
    fn capacity_errors_are_reported() {
        let ds = generate_synthetic(3, 4, 2, 5.0, 1.0, 1);
        assert!(matches!(
            sample_task(
                &ds,
                5,
                1,
                1,
                Setting::Inductive,
                QueryDist::Uniform,
                QueryInit::Uniform,
                0
            ),
            Err(Error::Capacity(_))
        ));
        assert!(matches!(
            sample_task(
                &ds,
                3,
                2,
                4,
                Setting::Transductive,
                QueryDist::Uniform,
                QueryInit::Uniform,
                0
            ),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn split_tag_defaults_to_train_and_is_settable() {
        let ds = toy_dataset();
        assert_eq!(ds.split(), SplitTag::Train);
        let test_ds = ds.with_split(SplitTag::Test);
        assert_eq!(test_ds.split(), SplitTag::Test);
    }

    #[test]
    fn query_rows_follow_init_mode() {
        let support = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let classes = vec![0, 1];
        let queries = vec![vec![0.5, 0.5]];
        let qc = vec![1];
        let uniform =
            build_task_graph(&support, &classes, &queries, &qc, 2, QueryInit::Uniform).unwrap();
        assert_eq!(uniform.labels_init.row(2), &[0.5, 0.5]);
        let zero =
            build_task_graph(&support, &classes, &queries, &qc, 2, QueryInit::Zero).unwrap();
        assert_eq!(zero.labels_init.row(2), &[0.0, 0.0]);
        // support rows are exact one-hots either way
        assert_eq!(zero.labels_init.row(0), &[1.0, 0.0]);
        assert_eq!(zero.labels_init.row(1), &[0.0, 1.0]);
    }
}
