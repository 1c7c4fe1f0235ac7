//! Attention over the conversation's query history, aggregation of query
//! vectors into a retrieval key, cosine similarity, and augmentation of the
//! conversation graph with the retrieved labeled exemplar.

use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::gnn::Matrix;
use crate::graph::{ConversationGraph, Edge, EdgeKind, Label, Node, NodeId, NodeKind};
use crate::store::VectorStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// score_i = u · tanh(W v_i + b); parameters trained jointly with the GCN.
    Parametric,
    /// score_i = v_i · mean(v_1..v_n); zero parameters, fully reproducible.
    Deterministic,
}

/// Trainable half of the parametric scorer: W ∈ R^{H×D}, b, u ∈ R^H.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParametricAttention {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub mode: AttentionMode,
    /// Present iff mode == Parametric.
    pub proj: Option<ParametricAttention>,
}

impl AttentionParams {
    pub fn deterministic() -> Self {
        AttentionParams {
            mode: AttentionMode::Deterministic,
            proj: None,
        }
    }

    pub fn parametric(w: Matrix, b: Vec<f64>, u: Vec<f64>) -> Self {
        AttentionParams {
            mode: AttentionMode::Parametric,
            proj: Some(ParametricAttention { w, b, u }),
        }
    }

    pub fn is_finite(&self) -> bool {
        match &self.proj {
            None => true,
            Some(p) => {
                p.w.is_finite()
                    && p.b.iter().all(|v| v.is_finite())
                    && p.u.iter().all(|v| v.is_finite())
            }
        }
    }
}

/// Per-query attention weights in turn order. Each α ∈ [0,1], Σα = 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights(pub Vec<(NodeId, f64)>);

impl AttentionWeights {
    pub fn alpha(&self, id: &NodeId) -> Option<f64> {
        self.0.iter().find(|(n, _)| n == id).map(|(_, a)| *a)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

pub(crate) fn attention_scores(query_vectors: &[&[f32]], params: &AttentionParams) -> Vec<f64> {
    match params.mode {
        AttentionMode::Deterministic => {
            let n = query_vectors.len();
            let dim = query_vectors[0].len();
            let mut mean = vec![0.0f64; dim];
            for v in query_vectors {
                for (m, x) in mean.iter_mut().zip(*v) {
                    *m += f64::from(*x);
                }
            }
            for m in &mut mean {
                *m /= n as f64;
            }
            query_vectors
                .iter()
                .map(|v| v.iter().zip(&mean).map(|(x, m)| f64::from(*x) * m).sum())
                .collect()
        }
        AttentionMode::Parametric => {
            let p = params
                .proj
                .as_ref()
                .expect("parametric attention carries projection parameters");
            query_vectors
                .iter()
                .map(|v| {
                    let mut score = 0.0;
                    for h in 0..p.u.len() {
                        let row = p.w.row(h);
                        let mut z = p.b[h];
                        for (w, x) in row.iter().zip(*v) {
                            z += w * f64::from(*x);
                        }
                        score += p.u[h] * z.tanh();
                    }
                    score
                })
                .collect()
        }
    }
}

/// Attention over the query history; entry i belongs to turn i+1.
pub fn attend_refs(query_vectors: &[&[f32]], params: &AttentionParams) -> AttentionWeights {
    assert!(!query_vectors.is_empty(), "attend over an empty history");
    let alphas = softmax(&attention_scores(query_vectors, params));
    AttentionWeights(
        alphas
            .into_iter()
            .enumerate()
            .map(|(i, a)| (NodeId::query(i as u32 + 1), a))
            .collect(),
    )
}

pub fn attend(query_vectors: &[Vec<f32>], params: &AttentionParams) -> AttentionWeights {
    let refs: Vec<&[f32]> = query_vectors.iter().map(Vec::as_slice).collect();
    attend_refs(&refs, params)
}

/// Exact weighted sum of the query vectors (no renormalization).
pub fn aggregate_refs(query_vectors: &[&[f32]], weights: &AttentionWeights) -> Result<Vec<f64>> {
    if query_vectors.len() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "{} query vectors but {} attention weights",
            query_vectors.len(),
            weights.len()
        )));
    }
    let dim = query_vectors.first().map_or(0, |v| v.len());
    let mut out = vec![0.0f64; dim];
    for (v, (_, alpha)) in query_vectors.iter().zip(&weights.0) {
        if v.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        for (o, x) in out.iter_mut().zip(*v) {
            *o += alpha * f64::from(*x);
        }
    }
    Ok(out)
}

pub fn aggregate(query_vectors: &[Vec<f32>], weights: &AttentionWeights) -> Result<Vec<f64>> {
    let refs: Vec<&[f32]> = query_vectors.iter().map(Vec::as_slice).collect();
    aggregate_refs(&refs, weights)
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        Ok(0.0)
    } else {
        Ok(dot / (na.sqrt() * nb.sqrt()))
    }
}

/// Retrieval metadata surfaced in the verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalInfo {
    pub retrieved_id: String,
    pub retrieved_text: String,
    pub retrieved_label: Label,
    /// Unclamped cosine similarity in [-1, 1].
    pub similarity: f64,
}

/// Everything needed to splice the labeled node in, computed before any
/// graph mutation so a failed embedding call cannot leave a half-applied
/// augmentation.
#[derive(Clone, Debug)]
pub struct AugmentPlan {
    pub info: RetrievalInfo,
    pub template_text: String,
    pub embedding: Vec<f32>,
}

pub fn labeled_template(label: Label, exemplar_text: &str) -> String {
    match label {
        Label::Harmful => format!("It is harmful. {exemplar_text}"),
        Label::Benign => format!("It is benign. {exemplar_text}"),
    }
}

/// Retrieves the nearest exemplar for `v_agg` and embeds its labeled
/// template. Returns None when the store is empty (augmentation skipped).
pub fn plan_augment(
    v_agg: &[f64],
    store: &VectorStore,
    embedder: &dyn Embedder,
) -> Result<Option<AugmentPlan>> {
    if store.is_empty() {
        return Ok(None);
    }
    let (entry, sim) = store.top1(v_agg)?;
    let template_text = labeled_template(entry.label, &entry.text);
    let embedding = embedder.embed(&template_text)?;
    Ok(Some(AugmentPlan {
        info: RetrievalInfo {
            retrieved_id: entry.id.clone(),
            retrieved_text: entry.text.clone(),
            retrieved_label: entry.label,
            similarity: sim,
        },
        template_text,
        embedding,
    }))
}

/// Splices the planned labeled node into the graph: removes the previous
/// labeled node (one labeled node per graph), inserts the new one for the
/// current turn, and links it to the current query with a similarity-weighted
/// edge (clamped to [0,1]; the adjacency needs non-negative weights).
pub fn apply_augment(graph: &mut ConversationGraph, plan: &AugmentPlan) -> Result<RetrievalInfo> {
    let Some(current) = graph.current_query.clone() else {
        return Err(Error::InvalidInput("graph has no current query".into()));
    };
    if let Some(stale) = graph.labeled_node().map(|n| n.id.clone()) {
        graph.remove_node(&stale);
    }
    let turn = graph.turn_count;
    let id = NodeId::labeled(turn);
    graph.insert_node(Node {
        id: id.clone(),
        kind: NodeKind::Labeled,
        text: plan.template_text.clone(),
        description: String::new(),
        embedding: plan.embedding.clone(),
        label: Some(plan.info.retrieved_label),
        turn_index: turn,
    });
    graph.insert_edge(Edge::new(
        current,
        id,
        EdgeKind::SimilarityLink,
        plan.info.similarity.clamp(0.0, 1.0),
    ));
    Ok(plan.info.clone())
}

/// Outcome of augmentation; `retrieval` is None when the store was empty.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentOutcome {
    pub retrieval: Option<RetrievalInfo>,
    pub skipped: bool,
}

/// One-shot augmentation: retrieve, template, embed, splice.
pub fn augment(
    graph: &mut ConversationGraph,
    v_agg: &[f64],
    store: &VectorStore,
    embedder: &dyn Embedder,
) -> Result<AugmentOutcome> {
    if graph.current_query.is_none() {
        return Err(Error::InvalidInput("graph has no current query".into()));
    }
    match plan_augment(v_agg, store, embedder)? {
        None => Ok(AugmentOutcome {
            retrieval: None,
            skipped: true,
        }),
        Some(plan) => {
            let info = apply_augment(graph, &plan)?;
            Ok(AugmentOutcome {
                retrieval: Some(info),
                skipped: false,
            })
        }
    }
}
