//! Attention-guided subgraph selection.
//!
//! When a conversation graph outgrows the node budget, classification runs on
//! a pruned view: the current turn's neighborhood is always kept, and prior
//! query nodes buy their way in by attention weight, bringing along the
//! entities that belong exclusively to already-kept queries.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::graph::{ConversationGraph, Node, NodeId, NodeKind};

/// Smallest workable budget: current query, labeled node, one entity.
pub const MIN_PRUNE_THRESHOLD: usize = 3;

/// Diagnostics for one pruning pass, surfaced in verdicts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruningInfo {
    /// True iff at least one node was dropped.
    pub pruned: bool,
    pub nodes_before: usize,
    pub nodes_after: usize,
    /// Turn indices of dropped query nodes, ascending.
    pub dropped_queries: Vec<u32>,
    /// The mandatory set alone exceeded the budget; it was kept in full
    /// rather than truncating the current turn.
    pub budget_exceeded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub graph: ConversationGraph,
    pub info: PruningInfo,
}

/// Selects the subgraph the classifier runs on.
///
/// If the graph fits the budget it is returned unchanged. Otherwise the
/// mandatory set (current query, its adjacent entities, the labeled node) is
/// kept unconditionally, then prior query nodes are walked in attention order
/// (ties: more recent turn first). Each query is added together with its
/// exclusive entities, the adjacent entities whose query-neighbors are all
/// already kept or are this query, when the bundle fits the budget; a bundle
/// that does not fit is skipped and the walk continues, since a later,
/// smaller bundle may still fit. The result is the induced subgraph on the
/// kept nodes.
pub fn select_subgraph(
    graph: &ConversationGraph,
    weights: &AttentionWeights,
    threshold: usize,
) -> Result<PruneOutcome> {
    if threshold < MIN_PRUNE_THRESHOLD {
        return Err(Error::BudgetTooSmall(threshold));
    }
    let nodes_before = graph.node_count();
    if nodes_before <= threshold {
        return Ok(PruneOutcome {
            graph: graph.clone(),
            info: PruningInfo {
                pruned: false,
                nodes_before,
                nodes_after: nodes_before,
                dropped_queries: Vec::new(),
                budget_exceeded: false,
            },
        });
    }

    let Some(current) = graph.current_query.clone() else {
        return Err(Error::InvalidInput(
            "cannot prune a graph with no current query".into(),
        ));
    };

    // The selection runs on integer indices: the walk below reads the
    // neighbor sets of every ranked query and candidate entity, and doing
    // that with string-id lookups or per-node edge scans makes a single
    // pruning pass quadratic in conversation length.
    let nodes: Vec<&Node> = graph.nodes().collect();
    let mut index: HashMap<&NodeId, usize> = HashMap::with_capacity(nodes.len());
    for (i, node) in nodes.iter().enumerate() {
        index.insert(&node.id, i);
    }
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for edge in graph.edges() {
        if let (Some(&f), Some(&t)) = (index.get(&edge.from), index.get(&edge.to)) {
            adjacency[f].push(t);
            adjacency[t].push(f);
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
        list.dedup();
    }
    let cur = *index
        .get(&current)
        .ok_or_else(|| Error::UnknownNode(current.as_str().to_string()))?;

    let mut keep = vec![false; nodes.len()];
    let mut kept = 0usize;
    keep[cur] = true;
    kept += 1;
    for &neighbor in &adjacency[cur] {
        if nodes[neighbor].kind == NodeKind::Entity && !keep[neighbor] {
            keep[neighbor] = true;
            kept += 1;
        }
    }
    if let Some(labeled) = graph.labeled_node() {
        let li = index[&labeled.id];
        if !keep[li] {
            keep[li] = true;
            kept += 1;
        }
    }
    let budget_exceeded = kept > threshold;

    // Prior queries by attention weight descending; ties favor recency.
    let mut ranked: Vec<(usize, f64, u32)> = (0..nodes.len())
        .filter(|&i| nodes[i].kind == NodeKind::Query && i != cur)
        .map(|i| {
            let alpha = weights
                .alpha(&nodes[i].id)
                .filter(|a| a.is_finite())
                .unwrap_or(0.0);
            (i, alpha, nodes[i].turn_index)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(b.2.cmp(&a.2)));

    if !budget_exceeded {
        for &(query, _, _) in &ranked {
            if kept >= threshold {
                // Every bundle holds at least its query; none can fit now.
                break;
            }
            let mut bundle = vec![query];
            for &entity in &adjacency[query] {
                if keep[entity] || nodes[entity].kind != NodeKind::Entity {
                    continue;
                }
                let exclusive = adjacency[entity].iter().all(|&q| {
                    nodes[q].kind != NodeKind::Query || keep[q] || q == query
                });
                if exclusive {
                    bundle.push(entity);
                }
            }
            if kept + bundle.len() <= threshold {
                for i in bundle {
                    if !keep[i] {
                        keep[i] = true;
                        kept += 1;
                    }
                }
            }
        }
    }

    let mut pruned_graph = ConversationGraph::new();
    pruned_graph.turn_count = graph.turn_count;
    pruned_graph.current_query = Some(current);
    for (i, node) in nodes.iter().enumerate() {
        if keep[i] {
            pruned_graph.insert_node((*node).clone());
        }
    }
    for edge in graph.edges() {
        if let (Some(&f), Some(&t)) = (index.get(&edge.from), index.get(&edge.to)) {
            if keep[f] && keep[t] {
                pruned_graph.insert_edge(edge.clone());
            }
        }
    }
    for (id, alpha) in &graph.attention {
        if index.get(id).is_some_and(|&i| keep[i]) {
            pruned_graph.attention.insert(id.clone(), *alpha);
        }
    }

    let mut dropped_queries: Vec<u32> = (0..nodes.len())
        .filter(|&i| nodes[i].kind == NodeKind::Query && !keep[i])
        .map(|i| nodes[i].turn_index)
        .collect();
    dropped_queries.sort_unstable();

    let nodes_after = pruned_graph.node_count();
    Ok(PruneOutcome {
        graph: pruned_graph,
        info: PruningInfo {
            pruned: nodes_after < nodes_before,
            nodes_before,
            nodes_after,
            dropped_queries,
            budget_exceeded,
        },
    })
}
