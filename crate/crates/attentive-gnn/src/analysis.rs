//! Over-smoothing diagnostics and parameter accounting.
//!
//! Two per-layer metrics quantify feature collapse: the residual of the
//! best rank-M approximation (projection loss, computed from singular
//! values) and the Frobenius distance to the rank-1 "all rows equal"
//! consensus matrix. A stack smooths at the first layer whose projection
//! loss drops below epsilon; the associated dimensionality reduction is
//! that layer's feature width minus its numerical rank.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attention::ModelParams;
use crate::episodes::TaskGraph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Singular values in descending order, via one-sided Jacobi on the
/// thinner orientation of the matrix. Exact to roundoff at the scales this
/// crate works with (V up to a few hundred).
pub fn singular_values(x: &Tensor) -> Vec<f64> {
    // work on B with rows >= cols so we orthogonalize few columns
    let mut b = if x.rows() >= x.cols() {
        x.clone()
    } else {
        x.transposed()
    };
    let (rows, cols) = b.shape();
    if cols == 0 || rows == 0 {
        return Vec::new();
    }
    let tol = f64::EPSILON * f64::EPSILON * 4.0;
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..rows {
                    let (vp, vq) = (b.get(i, p), b.get(i, q));
                    app += vp * vp;
                    aqq += vq * vq;
                    apq += vp * vq;
                }
                if apq * apq <= tol * app * aqq || apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (vp, vq) = (b.get(i, p), b.get(i, q));
                    b.data_mut()[i * cols + p] = c * vp - s * vq;
                    b.data_mut()[i * cols + q] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| b.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    sigma
}

/// Residual Frobenius norm of the best rank-M approximation:
/// sqrt(sum of squared singular values past the first M).
pub fn rank_projection_loss(x: &Tensor, m: usize) -> Result<f64> {
    let limit = x.rows().min(x.cols());
    if m == 0 || m > limit {
        return Err(Error::InvalidArg(format!(
            "rank_projection_loss: M={} out of range [1, {}] for {}x{}",
            m,
            limit,
            x.rows(),
            x.cols()
        )));
    }
    let sigma = singular_values(x);
    Ok(sigma[m..].iter().map(|s| s * s).sum::<f64>().sqrt())
}

/// Frobenius distance to the matrix whose rows all equal the column mean.
pub fn consensus_distance(x: &Tensor) -> f64 {
    let (rows, cols) = x.shape();
    if rows == 0 {
        return 0.0;
    }
    let mut mean = vec![0.0; cols];
    for i in 0..rows {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / rows as f64;
        }
    }
    let mut total = 0.0;
    for i in 0..rows {
        for (j, &v) in x.row(i).iter().enumerate() {
            total += (v - mean[j]).powi(2);
        }
    }
    total.sqrt()
}

/// Per-layer smoothing metrics for one stack of feature matrices.
#[derive(Clone, Debug, Serialize)]
pub struct SmoothingProfile {
    /// Rank-M projection loss per layer (M clamped to each layer's
    /// min(V, d) when necessary).
    pub rank_losses: Vec<f64>,
    /// Consensus distance per layer.
    pub consensus: Vec<f64>,
    pub epsilon: f64,
    /// Requested rank for the projection loss.
    pub rank_m: usize,
    /// First layer index whose projection loss is below epsilon.
    pub smoothing_layer: Option<usize>,
    /// Feature width minus numerical rank (count of singular values above
    /// epsilon) at the smoothing layer, or at the last layer when none.
    pub dim_reduction: usize,
}

/// Compute both smoothing metrics for every layer's feature matrix.
pub fn smoothing_profile(
    layer_features: &[Tensor],
    epsilon: f64,
    rank_m: usize,
) -> Result<SmoothingProfile> {
    if layer_features.is_empty() {
        return Err(Error::InvalidArg("smoothing_profile: no layers".into()));
    }
    if epsilon <= 0.0 || epsilon.is_nan() {
        return Err(Error::InvalidArg(format!(
            "smoothing_profile: epsilon must be > 0, got {epsilon}"
        )));
    }
    if rank_m == 0 {
        return Err(Error::InvalidArg("smoothing_profile: M must be >= 1".into()));
    }
    let mut rank_losses = Vec::with_capacity(layer_features.len());
    let mut consensus = Vec::with_capacity(layer_features.len());
    for x in layer_features {
        let m_eff = rank_m.min(x.rows().min(x.cols())).max(1);
        rank_losses.push(rank_projection_loss(x, m_eff)?);
        consensus.push(consensus_distance(x));
    }
    let smoothing_layer = rank_losses.iter().position(|&l| l < epsilon);
    let probe = smoothing_layer.unwrap_or(layer_features.len() - 1);
    let probe_features = &layer_features[probe];
    let numerical_rank = singular_values(probe_features)
        .iter()
        .filter(|&&s| s > epsilon)
        .count();
    let dim_reduction = probe_features.cols().saturating_sub(numerical_rank);
    Ok(SmoothingProfile {
        rank_losses,
        consensus,
        epsilon,
        rank_m,
        smoothing_layer,
        dim_reduction,
    })
}

/// Model component selector for parameter counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamComponent {
    /// The two fusion scalars.
    Fusion,
    /// Layer k's transform W^(k) plus its adjacency MLP.
    GnnLayer(usize),
    /// Layer k's adjacency MLP alone.
    AdjacencyMlp(usize),
    Readout,
    Total,
}

/// Exact count of trainable scalars in a component.
pub fn count_trainable_params(params: &ModelParams, component: ParamComponent) -> Result<usize> {
    let mlp_count = |k: usize| -> Result<usize> {
        let layer = params.layers.get(k).ok_or_else(|| {
            Error::InvalidArg(format!(
                "no layer {k}; model has {} layers",
                params.layers.len()
            ))
        })?;
        Ok(layer.mlp.iter().map(|l| l.weight.len() + l.bias.len()).sum())
    };
    match component {
        ParamComponent::Fusion => Ok(params.fusion_w1.len() + params.fusion_w2.len()),
        ParamComponent::AdjacencyMlp(k) => mlp_count(k),
        ParamComponent::GnnLayer(k) => {
            let layer = params.layers.get(k).ok_or_else(|| {
                Error::InvalidArg(format!(
                    "no layer {k}; model has {} layers",
                    params.layers.len()
                ))
            })?;
            Ok(layer.transform.len() + mlp_count(k)?)
        }
        ParamComponent::Readout => Ok(params.readout.len()),
        ParamComponent::Total => Ok(params
            .named_tensors()
            .iter()
            .map(|(_, t)| t.len())
            .sum()),
    }
}

/// One line of a smoothing report: metrics for one layer of one task.
#[derive(Clone, Debug, Serialize)]
pub struct ProfileRecord {
    pub task: usize,
    pub layer: usize,
    pub rank_loss: f64,
    pub consensus: f64,
    /// rank_loss < epsilon.
    pub flagged: bool,
}

impl SmoothingProfile {
    pub fn records(&self, task: usize) -> Vec<ProfileRecord> {
        self.rank_losses
            .iter()
            .zip(&self.consensus)
            .enumerate()
            .map(|(layer, (&rank_loss, &consensus))| ProfileRecord {
                task,
                layer,
                rank_loss,
                consensus,
                flagged: rank_loss < self.epsilon,
            })
            .collect()
    }
}

/// Append profile records as line-delimited JSON.
pub fn write_profile_records(path: &Path, records: &[ProfileRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::InvalidArg(format!("profile serialization: {e}")))?;
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Write one CSV per layer with node index, split tag, true class, and the
/// layer's feature columns. Returns the created paths. Intended for
/// external embedding/visualization tools.
pub fn export_features(
    layer_features: &[Tensor],
    task: &TaskGraph,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(layer_features.len());
    for (layer, features) in layer_features.iter().enumerate() {
        let path = dir.join(format!("layer_{layer}.csv"));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let mut write = |line: &str| {
            out.write_all(line.as_bytes())
                .and_then(|_| out.write_all(b"\n"))
                .map_err(|e| Error::io(&path, e))
        };
        let header: Vec<String> = ["node", "split", "class"]
            .into_iter()
            .map(String::from)
            .chain((0..features.cols()).map(|i| format!("f{i}")))
            .collect();
        write(&header.join(","))?;
        for node in 0..features.rows() {
            let split = if task.is_query(node) { "query" } else { "support" };
            let mut fields = vec![
                node.to_string(),
                split.to_string(),
                task.node_class(node).to_string(),
            ];
            fields.extend(features.row(node).iter().map(|v| v.to_string()));
            write(&fields.join(","))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionConfig, QueryInit};
    use crate::episodes::build_task_graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap()
    }

    #[test]
    fn rank_one_matrix_has_zero_loss_at_rank_one() {
        // outer product u v^T
        let u = [1.0, -2.0, 0.5];
        let v = [3.0, 1.0];
        let data: Vec<f64> = u.iter().flat_map(|&a| v.iter().map(move |&b| a * b)).collect();
        let x = Tensor::new(3, 2, data).unwrap();
        let loss = rank_projection_loss(&x, 1).unwrap();
        assert!(loss.abs() < 1e-10, "loss {loss}");
    }

    #[test]
    fn identity_loss_is_remaining_singular_value() {
        let x = Tensor::identity(3);
        let loss = rank_projection_loss(&x, 2).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_values_match_nalgebra_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (rows, cols) in [(10, 6), (6, 10), (8, 8), (12, 3)] {
            let x = random_tensor(&mut rng, rows, cols);
            let ours = singular_values(&x);
            let m = nalgebra::DMatrix::from_row_slice(rows, cols, x.data());
            let mut oracle: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
            oracle.sort_by(|a, b| b.total_cmp(a));
            assert_eq!(ours.len(), oracle.len());
            for (a, b) in ours.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn projection_loss_matches_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&mut rng, 10, 6);
        let m = nalgebra::DMatrix::from_row_slice(10, 6, x.data());
        let mut sv: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        for rank in 1..=6 {
            let expect = sv[rank..].iter().map(|s| s * s).sum::<f64>().sqrt();
            let got = rank_projection_loss(&x, rank).unwrap();
            assert!((got - expect).abs() < 1e-8, "rank {rank}: {got} vs {expect}");
        }
    }

    #[test]
    fn projection_loss_shrinks_with_rank_and_vanishes_at_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, 7, 5);
        let mut prev = f64::INFINITY;
        for m in 1..=5 {
            let loss = rank_projection_loss(&x, m).unwrap();
            assert!(loss <= prev + 1e-12);
            prev = loss;
        }
        assert!(rank_projection_loss(&x, 5).unwrap() < 1e-10);
        assert!(rank_projection_loss(&x, 0).is_err());
        assert!(rank_projection_loss(&x, 6).is_err());
    }

    #[test]
    fn consensus_distance_cases() {
        // all rows equal -> 0
        let x = Tensor::from_rows(&[vec![2.0, -1.0], vec![2.0, -1.0]]).unwrap();
        assert_eq!(consensus_distance(&x), 0.0);
        // rows [1,0], [0,1]: residuals +-0.5 in every slot -> distance 1
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((consensus_distance(&x) - 1.0).abs() < 1e-12);
        // translation invariance
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_tensor(&mut rng, 5, 4);
        let shifted = Tensor::new(
            5,
            4,
            x.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + [10.0, -3.0, 0.5, 7.0][i % 4])
                .collect(),
        )
        .unwrap();
        assert!((consensus_distance(&x) - consensus_distance(&shifted)).abs() < 1e-9);
        // nonnegative, zero iff all rows equal
        assert!(consensus_distance(&x) > 1e-10);
    }

    #[test]
    fn smoothing_profile_flags_first_layer_below_epsilon() {
        // single layer with equal rows smooths immediately
        let flat = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let p = smoothing_profile(std::slice::from_ref(&flat), 1e-2, 1).unwrap();
        assert_eq!(p.smoothing_layer, Some(0));

        // metric sequence [3, 2, 0.5] with epsilon 1 flags layer 2: scale a
        // base with singular values (2, 1) so the rank-1 residual is the scale
        let base = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let layers: Vec<Tensor> = [3.0, 2.0, 0.5]
            .iter()
            .map(|&s| base.map(|v| v * s))
            .collect();
        for (t, expect) in layers.iter().zip([3.0, 2.0, 0.5]) {
            let loss = rank_projection_loss(t, 1).unwrap();
            assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
        }
        let p = smoothing_profile(&layers, 1.0, 1).unwrap();
        assert_eq!(p.smoothing_layer, Some(2));
        assert_eq!(p.rank_losses.len(), 3);

        // none below epsilon
        let p = smoothing_profile(&layers, 0.1, 1).unwrap();
        assert_eq!(p.smoothing_layer, None);
    }

    #[test]
    fn profile_matches_independent_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layers: Vec<Tensor> = (0..6).map(|_| random_tensor(&mut rng, 8, 5)).collect();
        let p = smoothing_profile(&layers, 1e-2, 3).unwrap();
        for (i, x) in layers.iter().enumerate() {
            assert_eq!(p.rank_losses[i], rank_projection_loss(x, 3).unwrap());
            assert_eq!(p.consensus[i], consensus_distance(x));
        }
        let records = p.records(4);
        assert_eq!(records.len(), 6);
        assert!(records.iter().all(|r| r.task == 4));
        for (i, r) in records.iter().enumerate() {
            assert_eq!(r.layer, i);
            assert_eq!(r.flagged, r.rank_loss < 1e-2);
        }
    }

    #[test]
    fn fusion_always_counts_two() {
        for d in [4, 8, 16] {
            for widths in [vec![8, 4, 1], vec![4, 1], vec![16, 8, 4, 1]] {
                let cfg = AttentionConfig {
                    mlp_widths: Some(widths),
                    ..Default::default()
                };
                let params = ModelParams::init(&cfg, 5, d, 3).unwrap();
                assert_eq!(
                    count_trainable_params(&params, ParamComponent::Fusion).unwrap(),
                    2
                );
            }
        }
    }

    #[test]
    fn layer_counts_match_closed_form() {
        // d_k = 10, m = 5, widths [20, 10, 1]:
        // W: 2*10*5 = 100; MLP: (10+1)*20 + (20+1)*10 + (10+1)*1 = 441
        let cfg = AttentionConfig {
            layers: 1,
            hidden_m: 5,
            mlp_widths: Some(vec![20, 10, 1]),
            ..Default::default()
        };
        // d + N = 10 -> d = 8, N = 2
        let params = ModelParams::init(&cfg, 2, 8, 3).unwrap();
        assert_eq!(
            count_trainable_params(&params, ParamComponent::AdjacencyMlp(0)).unwrap(),
            441
        );
        assert_eq!(
            count_trainable_params(&params, ParamComponent::GnnLayer(0)).unwrap(),
            100 + 441
        );
        assert!(count_trainable_params(&params, ParamComponent::GnnLayer(1)).is_err());
    }

    #[test]
    fn total_is_sum_of_disjoint_components() {
        let cfg = AttentionConfig {
            layers: 3,
            hidden_m: 6,
            ..Default::default()
        };
        let params = ModelParams::init(&cfg, 4, 9, 5).unwrap();
        let total = count_trainable_params(&params, ParamComponent::Total).unwrap();
        let mut sum = count_trainable_params(&params, ParamComponent::Fusion).unwrap()
            + count_trainable_params(&params, ParamComponent::Readout).unwrap();
        for k in 0..3 {
            sum += count_trainable_params(&params, ParamComponent::GnnLayer(k)).unwrap();
        }
        assert_eq!(total, sum);
    }

    #[test]
    fn export_round_trips_and_has_expected_shape() {
        let support = vec![vec![1.5, -2.0], vec![0.25, 0.125]];
        let queries = vec![vec![0.1, 0.9]];
        let task = build_task_graph(
            &support,
            &[0, 1],
            &queries,
            &[1],
            2,
            QueryInit::Uniform,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layers = vec![random_tensor(&mut rng, 3, 4), random_tensor(&mut rng, 3, 2)];
        let dir = tempdir().unwrap();
        let paths = export_features(&layers, &task, dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        for (path, features) in paths.iter().zip(&layers) {
            let text = std::fs::read_to_string(path).unwrap();
            let lines: Vec<&str> = text.lines().collect();
            assert_eq!(lines.len(), 1 + 3, "header plus V rows");
            let header_fields = lines[0].split(',').count();
            assert_eq!(header_fields, 3 + features.cols());
            for (node, line) in lines[1..].iter().enumerate() {
                let fields: Vec<&str> = line.split(',').collect();
                assert_eq!(fields.len(), 3 + features.cols());
                assert_eq!(fields[0], node.to_string());
                for (j, raw) in fields[3..].iter().enumerate() {
                    let parsed: f64 = raw.parse().unwrap();
                    assert_eq!(parsed, features.get(node, j), "full-precision round trip");
                }
            }
            // split tags: first two nodes support, last query
            assert!(lines[1].contains("support") && lines[3].contains("query"));
        }
    }
}
