//! Training: hand-written reverse-mode gradients and momentum SGD.
//!
//! In parametric-attention mode the similarity edge weight between the
//! current query and the labeled node is recomputed from the live attention
//! parameters on every pass, so gradients flow from the loss through the
//! normalized adjacency (including its degree terms), the clamped cosine
//! similarity, the aggregated query vector, the softmax, and the scorer.

use serde::{Deserialize, Serialize};

use crate::attention::{softmax, AttentionMode, ParametricAttention};
use crate::error::{Error, Result};
use crate::graph::{ConversationGraph, EdgeKind, Label, NodeId, NodeKind};

use super::matrix::Matrix;
use super::{ahat_with_degrees, bce_loss, weighted_adjacency, GcnModel};

/// One supervised example: a conversation graph frozen after augmentation
/// and pruning, the query node to score, and the ground-truth label.
/// `query_history` and `retrieved` (the raw exemplar vector behind the
/// labeled node) let parametric attention re-derive the similarity edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub graph: ConversationGraph,
    pub target: NodeId,
    pub label: Label,
    #[serde(default)]
    pub query_history: Vec<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub layers: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub attention: AttentionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 64,
            layers: 2,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 50,
            batch_size: 16,
            seed: 0,
            patience: 10,
            attention: AttentionMode::Parametric,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "hidden, layers, epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation parameters when a validation set was given, else the
    /// final parameters.
    pub model: GcnModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Gradients shaped like the model parameters.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub layers: Vec<(Matrix, Vec<f64>)>,
    pub head_w: Vec<f64>,
    pub head_b: f64,
    pub attn: Option<AttnGrads>,
}

#[derive(Clone, Debug)]
pub struct AttnGrads {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub u: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &GcnModel) -> Gradients {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.w.rows(), l.w.cols()), vec![0.0; l.b.len()]))
                .collect(),
            head_w: vec![0.0; model.head_w.len()],
            head_b: 0.0,
            attn: model.attention.proj.as_ref().map(|p| AttnGrads {
                w: Matrix::zeros(p.w.rows(), p.w.cols()),
                b: vec![0.0; p.b.len()],
                u: vec![0.0; p.u.len()],
            }),
        }
    }

    /// Same order as [`GcnModel::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&self.head_w);
        out.push(self.head_b);
        if let Some(a) = &self.attn {
            out.extend_from_slice(a.w.data());
            out.extend_from_slice(&a.b);
            out.extend_from_slice(&a.u);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Similarity-link endpoints within the node ordering.
#[derive(Clone, Debug)]
struct Link {
    r: usize,
    s: usize,
    stored: f64,
}

/// An example lowered to tensors once; reused across epochs.
#[derive(Clone, Debug)]
pub(crate) struct Prepared {
    x: Matrix,
    /// Weighted adjacency without self-loops and without the similarity link.
    a_base: Matrix,
    target: usize,
    label: Label,
    link: Option<Link>,
    history: Vec<Vec<f32>>,
    retrieved: Option<Vec<f64>>,
}

pub(crate) fn prepare(example: &TrainExample, dim: usize) -> Result<Prepared> {
    let node = example
        .graph
        .node(&example.target)
        .ok_or_else(|| Error::UnknownNode(example.target.as_str().to_string()))?;
    if node.kind != NodeKind::Query {
        return Err(Error::InvalidInput(format!(
            "target {} is not a query node",
            example.target
        )));
    }
    let x = super::node_features(&example.graph, dim)?;
    let (ids, mut a_base) = weighted_adjacency(&example.graph);
    let target = ids
        .iter()
        .position(|id| *id == example.target)
        .expect("target present in ordering");

    let link = example
        .graph
        .edges()
        .find(|e| e.kind == EdgeKind::SimilarityLink && e.touches(&example.target))
        .map(|e| {
            let r = ids.iter().position(|id| *id == e.from).unwrap();
            let s = ids.iter().position(|id| *id == e.to).unwrap();
            (r, s, e.weight)
        });
    let link = link.map(|(r, s, stored)| {
        a_base.set(r, s, 0.0);
        a_base.set(s, r, 0.0);
        Link { r, s, stored }
    });

    for v in &example.query_history {
        if v.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: v.len(),
            });
        }
    }
    let retrieved = match &example.retrieved {
        None => None,
        Some(v) => {
            if v.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            Some(v.iter().map(|x| f64::from(*x)).collect())
        }
    };
    Ok(Prepared {
        x,
        a_base,
        target,
        label: example.label,
        link,
        history: example.query_history.clone(),
        retrieved,
    })
}

/// Everything the attention chain produced on the way to the link weight.
struct AttnChain {
    alpha: Vec<f64>,
    /// tanh of the scorer pre-activations, history × hidden.
    tanh_z: Matrix,
    v_agg: Vec<f64>,
    na: f64,
    nb: f64,
    sim: f64,
    w: f64,
}

fn attention_chain(p: &ParametricAttention, history: &[Vec<f32>], retrieved: &[f64]) -> AttnChain {
    let m = history.len();
    let hidden = p.u.len();
    let dim = p.w.cols();
    let mut tanh_z = Matrix::zeros(m, hidden);
    let mut scores = vec![0.0f64; m];
    for (i, v) in history.iter().enumerate() {
        let mut score = 0.0;
        for h in 0..hidden {
            let mut z = p.b[h];
            let row = p.w.row(h);
            for d in 0..dim {
                z += row[d] * f64::from(v[d]);
            }
            let th = z.tanh();
            tanh_z.set(i, h, th);
            score += p.u[h] * th;
        }
        scores[i] = score;
    }
    let alpha = softmax(&scores);
    let mut v_agg = vec![0.0f64; dim];
    for (a, v) in alpha.iter().zip(history) {
        for (o, x) in v_agg.iter_mut().zip(v) {
            *o += a * f64::from(*x);
        }
    }
    let mut dot = 0.0;
    let mut na2 = 0.0;
    let mut nb2 = 0.0;
    for d in 0..dim {
        dot += v_agg[d] * retrieved[d];
        na2 += v_agg[d] * v_agg[d];
        nb2 += retrieved[d] * retrieved[d];
    }
    let (na, nb) = (na2.sqrt(), nb2.sqrt());
    let sim = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
    AttnChain {
        alpha,
        tanh_z,
        v_agg,
        na,
        nb,
        sim,
        w: sim.clamp(0.0, 1.0),
    }
}

/// Adjacency the model actually sees for this example under its current
/// parameters, plus the degree vector and the chain cache when live.
fn effective_adjacency(
    model: &GcnModel,
    prep: &Prepared,
) -> (Matrix, Vec<f64>, Option<AttnChain>) {
    let chain = match (&model.attention.proj, &prep.link, &prep.retrieved) {
        (Some(p), Some(_), Some(retrieved)) if !prep.history.is_empty() => {
            Some(attention_chain(p, &prep.history, retrieved))
        }
        _ => None,
    };
    let mut a = prep.a_base.clone();
    if let Some(link) = &prep.link {
        let w = chain.as_ref().map_or(link.stored, |c| c.w);
        a.set(link.r, link.s, w);
        a.set(link.s, link.r, w);
    }
    let (ahat, t) = ahat_with_degrees(&a);
    (ahat, t, chain)
}

/// Forward only: (loss, correct at 0.5).
pub(crate) fn example_loss(model: &GcnModel, prep: &Prepared) -> Result<(f64, bool)> {
    let (ahat, _, _) = effective_adjacency(model, prep);
    let fwd = model.forward_cached(&ahat, &prep.x, prep.target)?;
    let predicted = if fwd.probability >= 0.5 {
        Label::Harmful
    } else {
        Label::Benign
    };
    Ok((bce_loss(fwd.logit, prep.label), predicted == prep.label))
}

/// Forward + backward: (loss, correct, gradients).
pub(crate) fn example_pass(model: &GcnModel, prep: &Prepared) -> Result<(f64, bool, Gradients)> {
    let (ahat, t, chain) = effective_adjacency(model, prep);
    let fwd = model.forward_cached(&ahat, &prep.x, prep.target)?;
    let loss = bce_loss(fwd.logit, prep.label);
    let predicted = if fwd.probability >= 0.5 {
        Label::Harmful
    } else {
        Label::Benign
    };

    let n = ahat.rows();
    let last = model.layers.len() - 1;
    let y = match prep.label {
        Label::Harmful => 1.0,
        Label::Benign => 0.0,
    };
    let dlogit = fwd.probability - y;

    let mut grads = Gradients::zeros_like(model);
    let h_last = fwd.h.last().expect("layers present");
    for (j, g) in grads.head_w.iter_mut().enumerate() {
        *g = dlogit * h_last.get(prep.target, j);
    }
    grads.head_b = dlogit;

    let mut dh = Matrix::zeros(n, model.head_w.len());
    for (j, w) in model.head_w.iter().enumerate() {
        dh.set(prep.target, j, dlogit * w);
    }

    // dL/dÂ is only needed when the link weight is trainable.
    let mut dahat = chain.as_ref().map(|_| Matrix::zeros(n, n));
    for l in (0..=last).rev() {
        let mut dz = dh;
        if l < last {
            dz.mask_nonpositive(&fwd.z[l]);
        }
        let dw = fwd.p[l].transpose().matmul(&dz);
        let db = dz.column_sums();
        let dp = dz.matmul(&model.layers[l].w.transpose());
        if let Some(da) = &mut dahat {
            da.add_assign(&dp.matmul(&fwd.h[l].transpose()));
        }
        // Â is symmetric, so the pullback through P = Â·H is Â·dP.
        dh = ahat.matmul(&dp);
        grads.layers[l] = (dw, db);
    }

    if let (Some(chain), Some(da), Some(link), Some(retrieved)) =
        (&chain, &dahat, &prep.link, &prep.retrieved)
    {
        backward_attention(model, prep, chain, da, &ahat, &t, link, retrieved, &mut grads);
    }

    Ok((loss, predicted == prep.label, grads))
}

/// Pulls dL/dÂ back through the link weight, the clamp, the cosine, the
/// aggregation, the softmax, and the tanh scorer.
#[allow(clippy::too_many_arguments)]
fn backward_attention(
    model: &GcnModel,
    prep: &Prepared,
    chain: &AttnChain,
    dahat: &Matrix,
    ahat: &Matrix,
    t: &[f64],
    link: &Link,
    retrieved: &[f64],
    grads: &mut Gradients,
) {
    let n = ahat.rows();
    let (r, s) = (link.r, link.s);
    // Â_ij = M_ij/√(t_i t_j); the link weight adds to M at (r,s),(s,r) and
    // to the degrees t_r, t_s, so every entry in rows/columns r and s moves.
    let mut dw_link = 0.0;
    for i in 0..n {
        for j in 0..n {
            let g = dahat.get(i, j);
            if g == 0.0 {
                continue;
            }
            let dm = if (i == r && j == s) || (i == s && j == r) {
                1.0
            } else {
                0.0
            };
            let dti = if i == r || i == s { 1.0 } else { 0.0 };
            let dtj = if j == r || j == s { 1.0 } else { 0.0 };
            let mut dval = -0.5 * ahat.get(i, j) * (dti / t[i] + dtj / t[j]);
            if dm != 0.0 {
                dval += dm / (t[i] * t[j]).sqrt();
            }
            dw_link += g * dval;
        }
    }

    // clamp(sim, 0, 1) passes gradient only strictly inside the interval.
    let dsim = if chain.sim > 0.0 && chain.sim < 1.0 {
        dw_link
    } else {
        0.0
    };
    if dsim == 0.0 || chain.na == 0.0 || chain.nb == 0.0 {
        return;
    }

    let dim = chain.v_agg.len();
    let mut dvagg = vec![0.0f64; dim];
    for d in 0..dim {
        dvagg[d] = dsim
            * (retrieved[d] / (chain.na * chain.nb)
                - chain.sim * chain.v_agg[d] / (chain.na * chain.na));
    }

    let m = prep.history.len();
    let mut dalpha = vec![0.0f64; m];
    for (i, v) in prep.history.iter().enumerate() {
        dalpha[i] = v
            .iter()
            .zip(&dvagg)
            .map(|(x, g)| f64::from(*x) * g)
            .sum();
    }
    let weighted: f64 = chain.alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
    let dscore: Vec<f64> = (0..m)
        .map(|k| chain.alpha[k] * (dalpha[k] - weighted))
        .collect();

    let p = model
        .attention
        .proj
        .as_ref()
        .expect("chain implies parametric attention");
    let attn = grads.attn.as_mut().expect("parametric gradient slot");
    let hidden = p.u.len();
    for (i, v) in prep.history.iter().enumerate() {
        let dsi = dscore[i];
        if dsi == 0.0 {
            continue;
        }
        for h in 0..hidden {
            let th = chain.tanh_z.get(i, h);
            attn.u[h] += dsi * th;
            let gz = dsi * p.u[h] * (1.0 - th * th);
            attn.b[h] += gz;
            for d in 0..v.len() {
                attn.w.add_at(h, d, gz * f64::from(v[d]));
            }
        }
    }
}

/// Distances to the non-smooth points that break finite differencing:
/// the minimum |pre-activation| over all ReLU layers, and for a live
/// attention chain the similarity (near its clamp bounds) and the
/// aggregate norm. Used by the gradient checker to resample configurations
/// whose loss is not locally smooth.
pub(crate) fn smoothness_margins(
    model: &GcnModel,
    prep: &Prepared,
) -> Result<(f64, Option<(f64, f64)>)> {
    let (ahat, _, chain) = effective_adjacency(model, prep);
    let fwd = model.forward_cached(&ahat, &prep.x, prep.target)?;
    let mut min_z = f64::INFINITY;
    let last = model.layers.len() - 1;
    for (l, z) in fwd.z.iter().enumerate() {
        if l == last {
            break;
        }
        for v in z.data() {
            min_z = min_z.min(v.abs());
        }
    }
    Ok((min_z, chain.map(|c| (c.sim, c.na))))
}

fn infer_dim(dataset: &[TrainExample]) -> Result<usize> {
    let first = &dataset[0];
    let node = first
        .graph
        .node(&first.target)
        .ok_or_else(|| Error::UnknownNode(first.target.as_str().to_string()))?;
    Ok(node.embedding.len())
}

#[cfg(feature = "parallel")]
fn map_batch(
    model: &GcnModel,
    prepared: &[Prepared],
    batch: &[usize],
) -> Result<Vec<(f64, bool, Vec<f64>)>> {
    use rayon::prelude::*;
    batch
        .par_iter()
        .map(|&i| example_pass(model, &prepared[i]).map(|(l, c, g)| (l, c, g.flatten())))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn map_batch(
    model: &GcnModel,
    prepared: &[Prepared],
    batch: &[usize],
) -> Result<Vec<(f64, bool, Vec<f64>)>> {
    map_batch_seq(model, prepared, batch)
}

/// Sequential twin of [`map_batch`]; the parallel version must match it
/// bitwise because each example's gradient is summed in batch order.
#[cfg_attr(feature = "parallel", allow(dead_code))]
fn map_batch_seq(
    model: &GcnModel,
    prepared: &[Prepared],
    batch: &[usize],
) -> Result<Vec<(f64, bool, Vec<f64>)>> {
    batch
        .iter()
        .map(|&i| example_pass(model, &prepared[i]).map(|(l, c, g)| (l, c, g.flatten())))
        .collect()
}

fn score_prepared(model: &GcnModel, prepared: &[Prepared]) -> Result<(f64, f64)> {
    #[cfg(feature = "parallel")]
    let results: Vec<(f64, bool)> = {
        use rayon::prelude::*;
        prepared
            .par_iter()
            .map(|p| example_loss(model, p))
            .collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<(f64, bool)> = prepared
        .iter()
        .map(|p| example_loss(model, p))
        .collect::<Result<_>>()?;
    let loss: f64 = results.iter().map(|(l, _)| l).sum::<f64>() / results.len() as f64;
    let acc = results.iter().filter(|(_, c)| *c).count() as f64 / results.len() as f64;
    Ok((loss, acc))
}

/// Mean loss and accuracy of a model over raw examples.
pub fn evaluate_examples(model: &GcnModel, examples: &[TrainExample]) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("no examples to evaluate".into()));
    }
    let prepared: Vec<Prepared> = examples
        .iter()
        .map(|e| prepare(e, model.dim))
        .collect::<Result<_>>()?;
    score_prepared(model, &prepared)
}

/// Trains a fresh model with momentum SGD over shuffled mini-batches.
///
/// With a validation set, training stops once validation loss has not
/// improved for `patience` epochs and the best-validation parameters are
/// returned; otherwise it runs all epochs and returns the final parameters.
pub fn train(
    dataset: &[TrainExample],
    val: Option<&[TrainExample]>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    use rand::{RngExt, SeedableRng};
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let dim = infer_dim(dataset)?;
    let mut model = GcnModel::init(dim, config.hidden, config.layers, config.attention, config.seed);
    let prepared: Vec<Prepared> = dataset
        .iter()
        .map(|e| prepare(e, dim))
        .collect::<Result<_>>()?;
    let val_prepared: Option<Vec<Prepared>> = match val {
        None => None,
        Some(v) => Some(v.iter().map(|e| prepare(e, dim)).collect::<Result<_>>()?),
    };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut velocity = vec![0.0f64; model.params().len()];
    let mut history = Vec::new();
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    let mut since_improve = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let results = map_batch(&model, &prepared, batch)?;
            let scale = 1.0 / batch.len() as f64;
            let mut gsum = vec![0.0f64; velocity.len()];
            for (loss, ok, flat) in &results {
                loss_sum += loss;
                correct += usize::from(*ok);
                for (acc, g) in gsum.iter_mut().zip(flat) {
                    *acc += g;
                }
            }
            let mut params = model.params();
            for i in 0..params.len() {
                velocity[i] =
                    config.momentum * velocity[i] - config.learning_rate * gsum[i] * scale;
                params[i] += velocity[i];
            }
            model.set_params(&params);
        }

        let train_loss = loss_sum / prepared.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                loss: train_loss,
            });
        }
        let train_accuracy = correct as f64 / prepared.len() as f64;
        let (val_loss, val_accuracy) = match &val_prepared {
            None => (None, None),
            Some(vp) => {
                let (l, a) = score_prepared(&model, vp)?;
                if !l.is_finite() {
                    return Err(Error::TrainingDiverged { epoch, loss: l });
                }
                (Some(l), Some(a))
            }
        };
        history.push(EpochStats {
            epoch,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
        });

        if let Some(vl) = val_loss {
            let improved = best.as_ref().map_or(true, |(b, _, _)| vl < *b);
            if improved {
                best = Some((vl, model.params(), epoch));
                since_improve = 0;
            } else {
                since_improve += 1;
                if since_improve >= config.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let best_epoch = best.as_ref().map(|(_, _, e)| *e);
    if let Some((_, params, _)) = best {
        model.set_params(&params);
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attend, augment, AttentionParams};
    use crate::embed::StubEmbedder;
    use crate::extract::{EntitySpan, ExtractionResult};
    use crate::graph::build_turn_graph;
    use crate::store::{LabeledQueryEntry, VectorStore};
    use crate::Embedder;

    const DIM: usize = 12;

    /// Builds an augmented two-turn example around `text` with the given
    /// label; exercises the full link machinery.
    pub(crate) fn example_for(text: &str, label: Label) -> TrainExample {
        let embedder = StubEmbedder::new(DIM);
        let store = VectorStore::from_entries(
            vec![
                LabeledQueryEntry {
                    id: "harm".into(),
                    text: "how to exploit stolen credentials".into(),
                    label: Label::Harmful,
                    embedding: embedder.embed("how to exploit stolen credentials").unwrap(),
                },
                LabeledQueryEntry {
                    id: "ok".into(),
                    text: "how to bake fresh bread".into(),
                    label: Label::Benign,
                    embedding: embedder.embed("how to bake fresh bread").unwrap(),
                },
            ],
            DIM,
        )
        .unwrap();

        let mut graph = ConversationGraph::new();
        let ext1 = ExtractionResult {
            entities: vec![EntitySpan {
                name: "topic".into(),
                description: String::new(),
            }],
            relations: vec![],
            dropped_relations: 0,
        };
        let t1 = build_turn_graph(1, "tell me about the topic", &ext1, &embedder).unwrap();
        graph.merge(&t1).unwrap();
        let t2 = build_turn_graph(2, text, &ExtractionResult::default(), &embedder).unwrap();
        graph.merge(&t2).unwrap();

        let history = vec![
            embedder.embed("tell me about the topic").unwrap(),
            embedder.embed(text).unwrap(),
        ];
        let weights = attend(&history, &AttentionParams::deterministic());
        let refs: Vec<&[f32]> = history.iter().map(Vec::as_slice).collect();
        let v_agg = crate::attention::aggregate_refs(&refs, &weights).unwrap();
        let out = augment(&mut graph, &v_agg, &store, &embedder).unwrap();
        let info = out.retrieval.unwrap();
        let retrieved = store
            .entries()
            .iter()
            .find(|e| e.id == info.retrieved_id)
            .unwrap()
            .embedding
            .clone();

        TrainExample {
            target: graph.current_query.clone().unwrap(),
            graph,
            label,
            query_history: history,
            retrieved: Some(retrieved),
        }
    }

    fn tiny_config(attention: AttentionMode) -> TrainConfig {
        TrainConfig {
            hidden: 8,
            layers: 2,
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 300,
            batch_size: 4,
            seed: 7,
            patience: 10,
            attention,
        }
    }

    #[test]
    fn single_example_is_memorized() {
        for mode in [AttentionMode::Deterministic, AttentionMode::Parametric] {
            let data = vec![example_for("how to exploit stolen credentials", Label::Harmful)];
            let out = train(&data, None, &tiny_config(mode)).unwrap();
            let last = out.history.last().unwrap();
            assert!(
                last.train_loss < 1e-2,
                "loss {} too high in {:?} mode",
                last.train_loss,
                mode
            );
            assert_eq!(last.train_accuracy, 1.0);
        }
    }

    #[test]
    fn two_class_toy_set_separates() {
        let data = vec![
            example_for("how to exploit stolen credentials", Label::Harmful),
            example_for("how to bake fresh bread", Label::Benign),
        ];
        let out = train(&data, None, &tiny_config(AttentionMode::Parametric)).unwrap();
        let (loss, acc) = evaluate_examples(&out.model, &data).unwrap();
        assert!(loss < 0.1, "loss {loss}");
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = vec![
            example_for("how to exploit stolen credentials", Label::Harmful),
            example_for("how to bake fresh bread", Label::Benign),
        ];
        let mut config = tiny_config(AttentionMode::Parametric);
        config.epochs = 20;
        let a = train(&data, None, &config).unwrap();
        let b = train(&data, None, &config).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.history, b.history);
        config.seed = 8;
        let c = train(&data, None, &config).unwrap();
        assert_ne!(a.model.params(), c.model.params());
    }

    #[test]
    fn contradictory_labels_at_huge_learning_rate_diverge() {
        let a = example_for("same text both labels", Label::Harmful);
        let mut b = a.clone();
        b.label = Label::Benign;
        let mut config = tiny_config(AttentionMode::Deterministic);
        config.learning_rate = 1e8;
        config.epochs = 50;
        let err = train(&[a, b], None, &config).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { .. }), "got {err:?}");
    }

    #[test]
    fn validation_early_stopping_restores_best_epoch() {
        let train_set = vec![
            example_for("how to exploit stolen credentials", Label::Harmful),
            example_for("how to bake fresh bread", Label::Benign),
        ];
        // Contradictory validation labels: val loss must eventually rise.
        let val_set = vec![
            example_for("how to exploit stolen credentials", Label::Benign),
            example_for("how to bake fresh bread", Label::Harmful),
        ];
        let mut config = tiny_config(AttentionMode::Deterministic);
        config.epochs = 200;
        let out = train(&train_set, Some(&val_set), &config).unwrap();
        assert!(out.stopped_early, "expected early stop");
        assert!(out.history.len() < 200);
        let best = out.best_epoch.unwrap();
        let best_loss = out.history[best - 1].val_loss.unwrap();
        for e in &out.history {
            assert!(e.val_loss.unwrap() >= best_loss - 1e-12);
        }
        let (vl, _) = evaluate_examples(&out.model, &val_set).unwrap();
        assert!((vl - best_loss).abs() < 1e-9, "restored {vl} vs best {best_loss}");
    }

    #[test]
    fn non_query_target_is_rejected() {
        let mut ex = example_for("how to bake fresh bread", Label::Benign);
        ex.target = NodeId::entity("topic");
        assert!(prepare(&ex, DIM).is_err());
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_batch_gradients_match_sequential_bitwise() {
        let data: Vec<TrainExample> = (0..12)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Harmful } else { Label::Benign };
                example_for(&format!("variation {i} of the question"), label)
            })
            .collect();
        let prepared: Vec<Prepared> =
            data.iter().map(|e| prepare(e, DIM).unwrap()).collect();
        let model = GcnModel::init(DIM, 8, 2, AttentionMode::Parametric, 3);
        let batch: Vec<usize> = (0..12).collect();
        let par = map_batch(&model, &prepared, &batch).unwrap();
        let seq = map_batch_seq(&model, &prepared, &batch).unwrap();
        assert_eq!(par.len(), seq.len());
        for (p, s) in par.iter().zip(&seq) {
            assert_eq!(p.0.to_bits(), s.0.to_bits());
            for (a, b) in p.2.iter().zip(&s.2) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn saturated_logit_gives_vanishing_gradients() {
        let ex = example_for("how to exploit stolen credentials", Label::Harmful);
        let mut model = GcnModel::init(DIM, 8, 2, AttentionMode::Deterministic, 1);
        // Blow up the head bias so the example is classified harmful with
        // overwhelming confidence; the matching label then yields ~0 grads.
        model.head_b = 80.0;
        let prep = prepare(&ex, DIM).unwrap();
        let (loss, correct, grads) = example_pass(&model, &prep).unwrap();
        assert!(loss < 1e-30);
        assert!(correct);
        assert!(grads.max_abs() < 1e-20, "max grad {}", grads.max_abs());
    }

    #[test]
    fn deterministic_mode_has_no_attention_gradient_slot() {
        let ex = example_for("how to bake fresh bread", Label::Benign);
        let model = GcnModel::init(DIM, 8, 2, AttentionMode::Deterministic, 1);
        let prep = prepare(&ex, DIM).unwrap();
        let (_, _, grads) = example_pass(&model, &prep).unwrap();
        assert!(grads.attn.is_none());
        assert_eq!(grads.flatten().len(), model.params().len());
    }
}
