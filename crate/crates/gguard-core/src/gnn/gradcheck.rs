//! Finite-difference verification of the hand-written gradients.
//!
//! Central differences are only meaningful where the loss is locally smooth,
//! so the bundled example generator resamples configurations that sit too
//! close to a ReLU kink, a similarity clamp bound, or a vanishing aggregate
//! norm.

use rand::{RngExt, SeedableRng};

use crate::attention::{attend, aggregate_refs, augment, AttentionMode, AttentionParams};
use crate::embed::{Embedder, StubEmbedder};
use crate::error::Result;
use crate::extract::{EntitySpan, ExtractionResult, RelationSpan};
use crate::graph::{build_turn_graph, ConversationGraph, Label};
use crate::store::{LabeledQueryEntry, VectorStore};

use super::train::{example_loss, example_pass, prepare, smoothness_margins, TrainExample};
use super::GcnModel;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Number of parameters compared.
    pub parameters: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst parameter; see [`param_name`].
    pub worst_index: usize,
}

/// Compares every analytic parameter gradient against a central finite
/// difference of the loss. Relative error uses a floored denominator so
/// near-zero gradient pairs are compared absolutely against the floor.
pub fn gradient_check(
    model: &GcnModel,
    example: &TrainExample,
    eps: f64,
) -> Result<GradCheckReport> {
    let prep = prepare(example, model.dim())?;
    let (_, _, grads) = example_pass(model, &prep)?;
    let analytic = grads.flatten();
    let base = model.params();
    assert_eq!(analytic.len(), base.len());

    let mut probe = model.clone();
    let mut shifted = base.clone();
    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    for i in 0..base.len() {
        shifted[i] = base[i] + eps;
        probe.set_params(&shifted);
        let (loss_plus, _) = example_loss(&probe, &prep)?;
        shifted[i] = base[i] - eps;
        probe.set_params(&shifted);
        let (loss_minus, _) = example_loss(&probe, &prep)?;
        shifted[i] = base[i];

        let numeric = (loss_plus - loss_minus) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-4);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        parameters: base.len(),
        max_rel_err: max_rel,
        worst_index: worst,
    })
}

/// Human-readable name of a flat parameter index.
pub fn param_name(model: &GcnModel, index: usize) -> String {
    let mut at = index;
    for (l, layer) in model.layers().iter().enumerate() {
        let wn = layer.w.rows() * layer.w.cols();
        if at < wn {
            return format!("layer{l}.w[{},{}]", at / layer.w.cols(), at % layer.w.cols());
        }
        at -= wn;
        if at < layer.b.len() {
            return format!("layer{l}.b[{at}]");
        }
        at -= layer.b.len();
    }
    let (head_w, _) = model.head();
    if at < head_w.len() {
        return format!("head.w[{at}]");
    }
    at -= head_w.len();
    if at == 0 {
        return "head.b".into();
    }
    at -= 1;
    if let Some(p) = &model.attention_params().proj {
        let wn = p.w.rows() * p.w.cols();
        if at < wn {
            return format!("attention.w[{},{}]", at / p.w.cols(), at % p.w.cols());
        }
        at -= wn;
        if at < p.b.len() {
            return format!("attention.b[{at}]");
        }
        at -= p.b.len();
        if at < p.u.len() {
            return format!("attention.u[{at}]");
        }
    }
    format!("<out of range +{at}>")
}

/// True when the pair is safe for finite differencing at ε ≈ 1e-4.
pub fn is_smooth(model: &GcnModel, example: &TrainExample) -> bool {
    let Ok(prep) = prepare(example, model.dim()) else {
        return false;
    };
    let Ok((min_z, chain)) = smoothness_margins(model, &prep) else {
        return false;
    };
    if min_z <= 1e-2 {
        return false;
    }
    match chain {
        None => true,
        Some((sim, na)) => sim > 0.02 && sim < 0.98 && na > 0.05,
    }
}

/// Deterministically generates a small augmented conversation (≤ 12 nodes)
/// and a freshly initialized model in the requested attention mode,
/// resampling until the configuration is smooth enough to difference.
pub fn random_check_example(
    seed: u64,
    dim: usize,
    mode: AttentionMode,
) -> (GcnModel, TrainExample) {
    const ENTITY_POOL: [&str; 8] = [
        "ledger", "cache", "protocol", "socket", "parser", "index", "daemon", "kernel",
    ];
    const TOPICS: [&str; 6] = ["storage", "network", "audio", "imaging", "sensors", "queues"];
    const ORDINALS: [&str; 3] = ["first", "second", "third"];

    for attempt in 0..200u64 {
        let mut rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1013).wrapping_add(attempt));
        let embedder = StubEmbedder::new(dim);
        let turns = rng.random_range(2..=3usize);
        let mut graph = ConversationGraph::new();
        let mut history: Vec<Vec<f32>> = Vec::new();
        for t in 1..=turns {
            let text = format!(
                "{} question about {}",
                ORDINALS[t - 1],
                TOPICS[rng.random_range(0..TOPICS.len())]
            );
            let mut entities = Vec::new();
            for _ in 0..rng.random_range(0..=2usize) {
                entities.push(EntitySpan {
                    name: ENTITY_POOL[rng.random_range(0..ENTITY_POOL.len())].into(),
                    description: String::new(),
                });
            }
            let mut relations = Vec::new();
            if entities.len() == 2 && rng.random_bool(0.5) {
                relations.push(RelationSpan {
                    source: entities[0].name.clone(),
                    target: entities[1].name.clone(),
                    description: "mentioned together".into(),
                });
            }
            let ext = ExtractionResult {
                entities,
                relations,
                dropped_relations: 0,
            };
            let turn = build_turn_graph(t as u32, &text, &ext, &embedder).unwrap();
            graph.merge(&turn).unwrap();
            history.push(embedder.embed(&text).unwrap());
        }

        let entry = |id: &str, text: &str, label: Label| LabeledQueryEntry {
            id: id.into(),
            text: text.into(),
            label,
            embedding: embedder.embed(text).unwrap(),
        };
        let store = VectorStore::from_entries(
            vec![
                entry("m1", "planning credential theft operations", Label::Harmful),
                entry("m2", "seasonal gardening advice for beginners", Label::Benign),
                entry("m3", "comparing storage network sensor designs", Label::Benign),
            ],
            dim,
        )
        .unwrap();
        let weights = attend(&history, &AttentionParams::deterministic());
        let refs: Vec<&[f32]> = history.iter().map(Vec::as_slice).collect();
        let v_agg = aggregate_refs(&refs, &weights).unwrap();
        let out = augment(&mut graph, &v_agg, &store, &embedder).unwrap();
        let info = out.retrieval.unwrap();
        let retrieved = store
            .entries()
            .iter()
            .find(|e| e.id == info.retrieved_id)
            .unwrap()
            .embedding
            .clone();

        assert!(graph.node_count() <= 12, "check graph grew past 12 nodes");
        let example = TrainExample {
            target: graph.current_query.clone().unwrap(),
            graph,
            label: if rng.random_bool(0.5) {
                Label::Harmful
            } else {
                Label::Benign
            },
            query_history: history,
            retrieved: Some(retrieved),
        };
        let model = GcnModel::init(
            dim,
            6,
            2,
            mode,
            seed.wrapping_mul(31).wrapping_add(attempt.wrapping_mul(7)).wrapping_add(99),
        );
        if is_smooth(&model, &example) {
            return (model, example);
        }
    }
    panic!("no smooth gradient-check configuration found for seed {seed}");
}
