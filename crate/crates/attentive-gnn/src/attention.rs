//! The three attention mechanisms and the model forward pass.
//!
//! A task graph flows through:
//!
//! 1. node self-attention: sample correlation `Cx = softmax(X X^T ⊙ M)`
//!    (M is the inverse norm product, i.e. cosine similarity) and label
//!    correlation `Cy = softmax(Y Y^T)` are fused as `Cf = w1 Cx + w2 Cy`
//!    with trainable scalars, then `X1 = Cf X` and
//!    `Y1 = alpha Y + (1 - alpha) Cf Y`;
//! 2. K GNN layers, each scoring node pairs with an MLP on |x_i - x_j|,
//!    sparsifying every adjacency row to its top `ceil(beta * V)` entries
//!    by magnitude, aggregating `leaky([A X || X] W)`, and attaching layer
//!    memory (dense feature concat or the label block);
//! 3. a linear readout from query-node features to class logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::TaskGraph;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Added to the norm product in the sample-correlation scaling so zero
/// feature rows stay finite.
pub const NORM_EPSILON: f64 = 1e-12;

/// What each layer concatenates onto its fresh features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    /// Keep all earlier features: X^(k+1) = [X^(k), F_k].
    Dense,
    /// Keep only the updated label block: X^(k+1) = [F_k, Y1].
    LabelConcat,
    /// Plain stack: X^(k+1) = F_k.
    None,
}

/// Initialization of query label rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryInit {
    /// Every entry 1/N.
    Uniform,
    /// Every entry 0.
    Zero,
}

/// Model hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    /// Label-fusion weight in [0, 1]; 1 keeps initial labels untouched.
    pub alpha: f64,
    /// Fraction of adjacency entries kept per row, in (0, 1].
    pub beta: f64,
    /// Number of GNN layers.
    pub layers: usize,
    /// Fresh feature columns added by each layer.
    pub hidden_m: usize,
    /// Output widths of the adjacency MLP layers, ending in 1. `None`
    /// derives `[2*d_k, d_k, 1]` from each layer's input width.
    pub mlp_widths: Option<Vec<usize>>,
    pub memory_mode: MemoryMode,
    pub query_init: QueryInit,
    pub leaky_slope: f64,
    /// Rescale retained adjacency entries to sum to 1 after sparsification.
    pub row_renormalize_adjacency: bool,
    /// Pass the fusion weights through a two-way softmax.
    pub normalize_fusion: bool,
    /// Disable to skip the self-attention stage: X^(1) = [X, Y].
    pub node_self_attention: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            alpha: 0.5,
            beta: 0.7,
            layers: 3,
            hidden_m: 16,
            mlp_widths: None,
            memory_mode: MemoryMode::Dense,
            query_init: QueryInit::Uniform,
            leaky_slope: 0.2,
            row_renormalize_adjacency: false,
            normalize_fusion: false,
            node_self_attention: true,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("model.alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return fail(format!("model.beta must be in (0, 1], got {}", self.beta));
        }
        if self.layers == 0 {
            return fail("model.layers must be >= 1".into());
        }
        if self.hidden_m == 0 {
            return fail("model.hidden_m must be >= 1".into());
        }
        if let Some(widths) = &self.mlp_widths {
            if widths.is_empty() {
                return fail("model.mlp_widths must be non-empty".into());
            }
            if widths.last() != Some(&1) {
                return fail("model.mlp_widths must end in width 1".into());
            }
            if widths.contains(&0) {
                return fail("model.mlp_widths entries must be >= 1".into());
            }
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return fail(format!(
                "model.leaky_slope must be in (0, 1), got {}",
                self.leaky_slope
            ));
        }
        Ok(())
    }

    /// Adjacency MLP output widths for a layer whose input width is `d_k`.
    pub fn mlp_widths_for(&self, d_k: usize) -> Vec<usize> {
        self.mlp_widths
            .clone()
            .unwrap_or_else(|| vec![2 * d_k, d_k, 1])
    }

    /// Node feature widths [d_1, ..., d_{K+1}]: d_1 = d + N is the input to
    /// the first layer, the last entry feeds the readout.
    pub fn feature_dims(&self, feature_dim: usize, n_classes: usize) -> Vec<usize> {
        let mut dims = vec![feature_dim + n_classes];
        for _ in 0..self.layers {
            let prev = *dims.last().expect("non-empty");
            dims.push(match self.memory_mode {
                MemoryMode::Dense => prev + self.hidden_m,
                MemoryMode::LabelConcat => self.hidden_m + n_classes,
                MemoryMode::None => self.hidden_m,
            });
        }
        dims
    }
}

/// One linear layer of the adjacency MLP.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Trainables of one GNN layer: the adjacency MLP and the transform W^(k).
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub mlp: Vec<LinearParams>,
    /// 2*d_k x m, applied to [A X || X].
    pub transform: Tensor,
}

/// All trainable values of the model.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub fusion_w1: Tensor,
    pub fusion_w2: Tensor,
    pub layers: Vec<LayerParams>,
    /// d_final x N map from query features to logits.
    pub readout: Tensor,
}

/// Uniform init bound 1/sqrt(fan_in).
fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl ModelParams {
    /// Fresh parameters for a model over `feature_dim`-dimensional inputs
    /// and `n_classes`-way tasks. Weights are uniform in
    /// [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero, fusion weights 0.5.
    pub fn init(
        cfg: &AttentionConfig,
        n_classes: usize,
        feature_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if n_classes == 0 || feature_dim == 0 {
            return Err(Error::InvalidArg(
                "ModelParams::init: n_classes and feature_dim must be >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = cfg.feature_dims(feature_dim, n_classes);
        let mut layers = Vec::with_capacity(cfg.layers);
        for &d_k in &dims[..cfg.layers] {
            let mut mlp = Vec::new();
            let mut fan_in = d_k;
            for w in cfg.mlp_widths_for(d_k) {
                mlp.push(LinearParams {
                    weight: Tensor::uniform(fan_in, w, init_bound(fan_in), &mut rng),
                    bias: Tensor::zeros(1, w),
                });
                fan_in = w;
            }
            let transform =
                Tensor::uniform(2 * d_k, cfg.hidden_m, init_bound(2 * d_k), &mut rng);
            layers.push(LayerParams { mlp, transform });
        }
        let d_final = *dims.last().expect("non-empty");
        Ok(ModelParams {
            fusion_w1: Tensor::scalar(0.5),
            fusion_w2: Tensor::scalar(0.5),
            layers,
            readout: Tensor::uniform(d_final, n_classes, init_bound(d_final), &mut rng),
        })
    }

    /// Canonical (name, tensor) listing; the order defines how gradients
    /// and optimizer state line up across the crate.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("fusion_w1".into(), &self.fusion_w1),
            ("fusion_w2".into(), &self.fusion_w2),
        ];
        for (k, layer) in self.layers.iter().enumerate() {
            for (j, lin) in layer.mlp.iter().enumerate() {
                out.push((format!("layer{k}_mlp{j}_weight"), &lin.weight));
                out.push((format!("layer{k}_mlp{j}_bias"), &lin.bias));
            }
            out.push((format!("layer{k}_transform"), &layer.transform));
        }
        out.push(("readout".into(), &self.readout));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("fusion_w1".into(), &mut self.fusion_w1),
            ("fusion_w2".into(), &mut self.fusion_w2),
        ];
        for (k, layer) in self.layers.iter_mut().enumerate() {
            for (j, lin) in layer.mlp.iter_mut().enumerate() {
                out.push((format!("layer{k}_mlp{j}_weight"), &mut lin.weight));
                out.push((format!("layer{k}_mlp{j}_bias"), &mut lin.bias));
            }
            out.push((format!("layer{k}_transform"), &mut layer.transform));
        }
        out.push(("readout".into(), &mut self.readout));
        out
    }
}

/// Tape handles for one layer's trainables.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub mlp: Vec<LinearVars>,
    pub transform: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

/// [`ModelParams`] registered on a tape as trainable nodes. `ordered`
/// follows [`ModelParams::named_tensors`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub fusion_w1: Var,
    pub fusion_w2: Var,
    pub layers: Vec<LayerVars>,
    pub readout: Var,
    pub ordered: Vec<Var>,
}

pub fn register_params(tape: &mut Tape, params: &ModelParams) -> ParamVars {
    let mut ordered = Vec::new();
    let fusion_w1 = tape.trainable(params.fusion_w1.clone());
    let fusion_w2 = tape.trainable(params.fusion_w2.clone());
    ordered.extend([fusion_w1, fusion_w2]);
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let mut mlp = Vec::with_capacity(layer.mlp.len());
        for lin in &layer.mlp {
            let weight = tape.trainable(lin.weight.clone());
            let bias = tape.trainable(lin.bias.clone());
            ordered.extend([weight, bias]);
            mlp.push(LinearVars { weight, bias });
        }
        let transform = tape.trainable(layer.transform.clone());
        ordered.push(transform);
        layers.push(LayerVars { mlp, transform });
    }
    let readout = tape.trainable(params.readout.clone());
    ordered.push(readout);
    ParamVars {
        fusion_w1,
        fusion_w2,
        layers,
        readout,
        ordered,
    }
}

// ── Node self-attention ──────────────────────────────────────────────

/// Cx = softmax(X X^T ⊙ M) over the complete graph, with
/// M(i,j) = 1 / (|x_i||x_j| + eps).
pub fn sample_correlation(tape: &mut Tape, x: Var) -> Result<Var> {
    let gram = tape.cosine_gram(x, NORM_EPSILON);
    tape.row_softmax(gram, None)
}

/// Cy = softmax(Y Y^T) over the complete graph.
pub fn label_correlation(tape: &mut Tape, y: Var) -> Result<Var> {
    let yt = tape.transpose(y);
    let gram = tape.matmul(y, yt)?;
    tape.row_softmax(gram, None)
}

/// Cf = w1 Cx + w2 Cy. With `normalize`, (w1, w2) pass through a two-way
/// softmax first.
pub fn fuse_attention(
    tape: &mut Tape,
    cx: Var,
    cy: Var,
    w1: Var,
    w2: Var,
    normalize: bool,
) -> Result<Var> {
    let (a, b) = if normalize {
        // softmax over two scalars: sigmoid of the differences
        let d1 = tape.sub(w1, w2)?;
        let d2 = tape.sub(w2, w1)?;
        (tape.sigmoid(d1), tape.sigmoid(d2))
    } else {
        (w1, w2)
    };
    let sx = tape.scale_by_scalar(cx, a)?;
    let sy = tape.scale_by_scalar(cy, b)?;
    tape.add(sx, sy)
}

/// Feature and label update: X1 = Cf X, Y1 = alpha Y + (1 - alpha) Cf Y.
/// The caller concatenates the pair into the first-layer node features.
pub fn apply_node_self_attention(
    tape: &mut Tape,
    x: Var,
    y: Var,
    alpha: f64,
    fused: Var,
) -> Result<(Var, Var)> {
    let x1 = tape.matmul(fused, x)?;
    let mixed = tape.matmul(fused, y)?;
    let kept = tape.scale(y, alpha);
    let scaled_mix = tape.scale(mixed, 1.0 - alpha);
    let y1 = tape.add(kept, scaled_mix)?;
    Ok((x1, y1))
}

/// The self-attention stage written as a plain GNN layer: Cf [X, Y] I with
/// identity transform and no activation. With alpha = 0 this reproduces
/// [`apply_node_self_attention`] exactly.
pub fn self_attention_as_gnn_layer(tape: &mut Tape, x: Var, y: Var, fused: Var) -> Result<Var> {
    let xy = tape.concat_cols(x, y)?;
    let aggregated = tape.matmul(fused, xy)?;
    let identity = {
        let n = tape.value(aggregated).cols();
        tape.leaf(Tensor::identity(n))
    };
    tape.matmul(aggregated, identity)
}

// ── Graph neighbor attention ─────────────────────────────────────────

/// Adjacency MLP applied to a stack of difference vectors. Leaky-ReLU
/// between layers, none on the final scalar.
fn mlp_forward(tape: &mut Tape, input: Var, mlp: &[LinearVars], slope: f64) -> Result<Var> {
    let mut h = input;
    for (i, lin) in mlp.iter().enumerate() {
        h = tape.matmul(h, lin.weight)?;
        h = tape.add_row_broadcast(h, lin.bias)?;
        if i + 1 < mlp.len() {
            h = tape.leaky_relu(h, slope);
        }
    }
    Ok(h)
}

/// Raw pair scores U(i,j) = MLP(|x_i - x_j|), symmetric by construction.
pub fn adjacency_logits(tape: &mut Tape, x: Var, mlp: &[LinearVars], slope: f64) -> Result<Var> {
    let v = tape.value(x).rows();
    let diffs = tape.pairwise_abs_diff(x);
    let scores = mlp_forward(tape, diffs, mlp, slope)?;
    if tape.value(scores).cols() != 1 {
        return Err(Error::InvalidArg(format!(
            "adjacency MLP must end in width 1, got {}",
            tape.value(scores).cols()
        )));
    }
    tape.reshape(scores, v, v)
}

/// Pair scores normalized per row over off-diagonal entries; the diagonal
/// is exactly 0 (self information enters through the identity branch of
/// the layer).
pub fn adjacency_scores(tape: &mut Tape, x: Var, mlp: &[LinearVars], slope: f64) -> Result<Var> {
    let v = tape.value(x).rows();
    let logits = adjacency_logits(tape, x, mlp, slope)?;
    let mask: Vec<bool> = (0..v * v).map(|i| i / v != i % v).collect();
    tape.row_softmax(logits, Some(mask))
}

/// Number of entries kept per adjacency row: ceil(beta * V).
pub fn sparsity_k(beta: f64, v: usize) -> usize {
    ((beta * v as f64).ceil() as usize).clamp(1, v.max(1))
}

/// Projection of each row onto the l0 ball: keep the ceil(beta * V)
/// entries of largest magnitude, zero the rest. beta = 1 is the identity.
pub fn sparsify_topk(tape: &mut Tape, u: Var, beta: f64, renormalize: bool) -> Result<Var> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidArg(format!(
            "sparsify_topk: beta must be in (0, 1], got {beta}"
        )));
    }
    let cols = tape.value(u).cols();
    let masked = tape.topk_rows(u, sparsity_k(beta, cols))?;
    Ok(if renormalize {
        tape.row_renormalize(masked)
    } else {
        masked
    })
}

// ── Layer body ───────────────────────────────────────────────────────

/// leaky([A X || X] W): aggregated and self features concatenated per
/// node, transformed, activated.
pub fn gnn_layer(tape: &mut Tape, x: Var, a_hat: Var, w: Var, slope: f64) -> Result<Var> {
    let aggregated = tape.matmul(a_hat, x)?;
    let stacked = tape.concat_cols(aggregated, x)?;
    let transformed = tape.matmul(stacked, w)?;
    Ok(tape.leaky_relu(transformed, slope))
}

/// Attach layer memory to fresh features.
pub fn memory_update(
    tape: &mut Tape,
    x_k: Var,
    f_k: Var,
    y1: Var,
    mode: MemoryMode,
) -> Result<Var> {
    match mode {
        MemoryMode::Dense => tape.concat_cols(x_k, f_k),
        MemoryMode::LabelConcat => tape.concat_cols(f_k, y1),
        MemoryMode::None => Ok(f_k),
    }
}

// ── Full model ───────────────────────────────────────────────────────

/// Forward pass producing query logits on an existing tape. `trace`, when
/// given, receives the node feature matrix after the self-attention stage
/// and after every layer's memory update.
fn forward_impl(
    tape: &mut Tape,
    task: &TaskGraph,
    pv: &ParamVars,
    cfg: &AttentionConfig,
    mut trace: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let x0 = tape.leaf(task.features.clone());
    let y0 = tape.leaf(task.labels_init.clone());

    let (x1, y1) = if cfg.node_self_attention {
        let cx = sample_correlation(tape, x0)?;
        let cy = label_correlation(tape, y0)?;
        let fused = fuse_attention(
            tape,
            cx,
            cy,
            pv.fusion_w1,
            pv.fusion_w2,
            cfg.normalize_fusion,
        )?;
        apply_node_self_attention(tape, x0, y0, cfg.alpha, fused)?
    } else {
        (x0, y0)
    };
    let mut x_k = tape.concat_cols(x1, y1)?;
    if let Some(t) = trace.as_deref_mut() {
        t.push(tape.value(x_k).clone());
    }

    for layer in &pv.layers {
        let scores = adjacency_scores(tape, x_k, &layer.mlp, cfg.leaky_slope)?;
        let a_hat = sparsify_topk(tape, scores, cfg.beta, cfg.row_renormalize_adjacency)?;
        let fresh = gnn_layer(tape, x_k, a_hat, layer.transform, cfg.leaky_slope)?;
        x_k = memory_update(tape, x_k, fresh, y1, cfg.memory_mode)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(tape.value(x_k).clone());
        }
    }

    let query_features = tape.select_rows(x_k, &task.query_indices)?;
    tape.matmul(query_features, pv.readout)
}

/// Forward pass on an existing tape; use with [`register_params`] when
/// gradients are needed.
pub fn model_forward_on_tape(
    tape: &mut Tape,
    task: &TaskGraph,
    pv: &ParamVars,
    cfg: &AttentionConfig,
) -> Result<Var> {
    forward_impl(tape, task, pv, cfg, None)
}

/// Query logits for a task. Deterministic given (params, task).
pub fn model_forward(
    task: &TaskGraph,
    params: &ModelParams,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = register_params(&mut tape, params);
    let logits = model_forward_on_tape(&mut tape, task, &pv, cfg)?;
    Ok(tape.value(logits).clone())
}

/// Logits plus the node feature matrices seen at every stage: entry 0 is
/// the post-self-attention input X^(1), entry k is the output of layer k.
pub struct ForwardTrace {
    pub logits: Tensor,
    pub layer_features: Vec<Tensor>,
}

pub fn model_forward_trace(
    task: &TaskGraph,
    params: &ModelParams,
    cfg: &AttentionConfig,
) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let pv = register_params(&mut tape, params);
    let mut features = Vec::with_capacity(cfg.layers + 1);
    let logits = forward_impl(&mut tape, task, &pv, cfg, Some(&mut features))?;
    Ok(ForwardTrace {
        logits: tape.value(logits).clone(),
        layer_features: features,
    })
}
