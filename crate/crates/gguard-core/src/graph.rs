//! Conversation graph data model: typed nodes and undirected weighted edges,
//! per-turn graph construction, and cross-turn merging.
//!
//! Ids are deterministic. Entities are keyed by their canonical name form so
//! the same concept mentioned in different turns lands on one node; query and
//! labeled nodes are keyed by turn index. Rebuilding the same conversation
//! always yields an identical graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::extract::ExtractionResult;

/// Binary ground-truth label carried by exemplars and labeled nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Harmful,
    Benign,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Harmful => write!(f, "harmful"),
            Label::Benign => write!(f, "benign"),
        }
    }
}

/// Canonical form of an entity name: case-folded, whitespace-collapsed, with
/// punctuation stripped from both ends of the whole name. Internal
/// punctuation (hyphens, apostrophes, dots) survives.
pub fn canonical_key(entity_name: &str) -> String {
    let lowered = entity_name.to_lowercase();
    let collapsed: Vec<&str> = lowered.split_whitespace().collect();
    let joined = collapsed.join(" ");
    joined
        .trim_matches(|c: char| !c.is_alphanumeric() && !c.is_whitespace())
        .trim()
        .to_string()
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    /// Entity ids are namespaced with "e:" so a pathological entity named
    /// "q:1" can never collide with a query node id.
    pub fn entity(canonical: &str) -> Self {
        NodeId(format!("e:{canonical}"))
    }

    pub fn query(turn_index: u32) -> Self {
        NodeId(format!("q:{turn_index}"))
    }

    pub fn labeled(turn_index: u32) -> Self {
        NodeId(format!("l:{turn_index}"))
    }

    /// For deserializers that already hold a namespaced id string.
    pub(crate) fn raw(id: &str) -> Self {
        NodeId(id.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Turn index for query/labeled ids; None for entity ids.
    pub fn turn(&self) -> Option<u32> {
        self.0
            .strip_prefix("q:")
            .or_else(|| self.0.strip_prefix("l:"))
            .and_then(|t| t.parse().ok())
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Entity,
    Query,
    Labeled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Relation,
    Membership,
    SimilarityLink,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    /// Entity name, full query text, or labeled template text.
    pub text: String,
    /// Extraction description; empty for query and labeled nodes.
    pub description: String,
    /// Unit vector of the configured dimension, or all-zeros for empty text.
    pub embedding: Vec<f32>,
    /// Present iff kind == Labeled.
    pub label: Option<Label>,
    /// Turn the node belongs to; first-seen turn for entities.
    pub turn_index: u32,
}

/// Undirected edge; `from`/`to` are stored in canonical NodeId order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    pub kind: EdgeKind,
    /// Relation sentence; empty for membership and similarity edges.
    pub description: String,
    /// Relation edges carry the embedded relation text; unused by the GCN,
    /// which consumes only the scalar weight.
    pub embedding: Option<Vec<f32>>,
    /// In [0, 1]. Relations and memberships weigh 1.0; similarity links carry
    /// the clamped retrieval similarity.
    pub weight: f64,
}

impl Edge {
    /// Normalizes endpoint order. Self-loops are a programming error: the
    /// stored edge set never contains them.
    pub fn new(a: NodeId, b: NodeId, kind: EdgeKind, weight: f64) -> Self {
        assert!(a != b, "self-loop edge {a}");
        let (from, to) = if a <= b { (a, b) } else { (b, a) };
        Edge {
            from,
            to,
            kind,
            description: String::new(),
            embedding: None,
            weight,
        }
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }

    pub fn with_embedding(mut self, embedding: Vec<f32>) -> Self {
        self.embedding = Some(embedding);
        self
    }

    pub fn key(&self) -> (NodeId, NodeId, EdgeKind) {
        (self.from.clone(), self.to.clone(), self.kind)
    }

    pub fn touches(&self, id: &NodeId) -> bool {
        &self.from == id || &self.to == id
    }

    pub fn other(&self, id: &NodeId) -> Option<&NodeId> {
        if &self.from == id {
            Some(&self.to)
        } else if &self.to == id {
            Some(&self.from)
        } else {
            None
        }
    }
}

/// Graph of a single turn: one query node, this turn's entities, their
/// relations, and a membership edge from the query to every entity.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnGraph {
    pub turn_index: u32,
    /// Query node plus entity nodes.
    pub nodes: Vec<Node>,
    /// Relation edges plus membership edges.
    pub edges: Vec<Edge>,
    /// Relations dropped because an endpoint was unknown or both endpoints
    /// collapsed into one entity.
    pub dropped_relations: u32,
}

impl TurnGraph {
    pub fn query_id(&self) -> NodeId {
        NodeId::query(self.turn_index)
    }

    pub fn query(&self) -> &Node {
        self.nodes
            .iter()
            .find(|n| n.kind == NodeKind::Query)
            .expect("turn graph always holds its query node")
    }

    pub fn entity_count(&self) -> usize {
        self.nodes.len() - 1
    }
}

/// Builds the graph of one turn. Entities are deduplicated by canonical key;
/// each surviving entity gets a membership edge to the query node. Entity and
/// relation texts are embedded as "name: description", the query as raw text.
pub fn build_turn_graph(
    turn_index: u32,
    query_text: &str,
    extraction: &ExtractionResult,
    embedder: &dyn Embedder,
) -> Result<TurnGraph> {
    if turn_index < 1 {
        return Err(Error::InvalidInput("turn_index must be ≥ 1".into()));
    }
    let validated = crate::extract::validate(extraction.clone());
    let query_id = NodeId::query(turn_index);

    let mut nodes = Vec::with_capacity(validated.entities.len() + 1);
    nodes.push(Node {
        id: query_id.clone(),
        kind: NodeKind::Query,
        text: query_text.to_string(),
        description: String::new(),
        embedding: embedder.embed(query_text)?,
        label: None,
        turn_index,
    });

    let mut by_key: BTreeMap<String, NodeId> = BTreeMap::new();
    let mut edges = Vec::new();
    for entity in &validated.entities {
        let key = canonical_key(&entity.name);
        let id = NodeId::entity(&key);
        let embed_text = if entity.description.is_empty() {
            entity.name.clone()
        } else {
            format!("{}: {}", entity.name, entity.description)
        };
        nodes.push(Node {
            id: id.clone(),
            kind: NodeKind::Entity,
            text: entity.name.clone(),
            description: entity.description.clone(),
            embedding: embedder.embed(&embed_text)?,
            label: None,
            turn_index,
        });
        edges.push(Edge::new(query_id.clone(), id.clone(), EdgeKind::Membership, 1.0));
        by_key.insert(key, id);
    }

    let mut dropped = validated.dropped_relations;
    for rel in &validated.relations {
        let src = by_key.get(&canonical_key(&rel.source));
        let dst = by_key.get(&canonical_key(&rel.target));
        match (src, dst) {
            (Some(a), Some(b)) if a != b => {
                let embed_text = if rel.description.is_empty() {
                    format!("{} {}", rel.source, rel.target)
                } else {
                    format!("{} {}: {}", rel.source, rel.target, rel.description)
                };
                edges.push(
                    Edge::new(a.clone(), b.clone(), EdgeKind::Relation, 1.0)
                        .with_description(rel.description.clone())
                        .with_embedding(embedder.embed(&embed_text)?),
                );
            }
            _ => dropped += 1,
        }
    }

    Ok(TurnGraph {
        turn_index,
        nodes,
        edges,
        dropped_relations: dropped,
    })
}

/// The growing cross-turn graph of one conversation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConversationGraph {
    nodes: BTreeMap<NodeId, Node>,
    edges: BTreeMap<(NodeId, NodeId, EdgeKind), Edge>,
    pub turn_count: u32,
    /// None only for the empty graph (turn_count == 0).
    pub current_query: Option<NodeId>,
    /// Latest attention weights per query node, written by the pipeline.
    pub attention: BTreeMap<NodeId, f64>,
}

impl ConversationGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    /// Nodes in ascending NodeId order (the order used for GCN tensors).
    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.values()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.keys()
    }

    /// The single labeled node, if one is present.
    pub fn labeled_node(&self) -> Option<&Node> {
        self.nodes.values().find(|n| n.kind == NodeKind::Labeled)
    }

    pub fn insert_node(&mut self, node: Node) {
        self.nodes.insert(node.id.clone(), node);
    }

    /// Inserts an edge, collapsing duplicates by keeping the maximum weight
    /// and the first-seen description/embedding.
    pub fn insert_edge(&mut self, edge: Edge) {
        match self.edges.entry(edge.key()) {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(edge);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                if edge.weight > o.get().weight {
                    o.get_mut().weight = edge.weight;
                }
            }
        }
    }

    /// Removes a node and every incident edge. No-op for unknown ids.
    pub fn remove_node(&mut self, id: &NodeId) {
        if self.nodes.remove(id).is_none() {
            return;
        }
        self.edges.retain(|_, e| !e.touches(id));
        self.attention.remove(id);
        if self.current_query.as_ref() == Some(id) {
            self.current_query = None;
        }
    }

    /// All nodes sharing an edge with `id`.
    pub fn neighbors(&self, id: &NodeId) -> Result<BTreeSet<NodeId>> {
        if !self.nodes.contains_key(id) {
            return Err(Error::UnknownNode(id.as_str().to_string()));
        }
        Ok(self
            .edges
            .values()
            .filter_map(|e| e.other(id).cloned())
            .collect())
    }

    /// Folds one turn into the conversation. Entities already present keep
    /// their first-seen embedding and description; duplicate edges collapse
    /// keeping the maximum weight.
    pub fn merge(&mut self, turn: &TurnGraph) -> Result<()> {
        let expected = self.turn_count + 1;
        if turn.turn_index != expected {
            return Err(Error::TurnOrder {
                expected,
                got: turn.turn_index,
            });
        }
        for node in &turn.nodes {
            if !self.nodes.contains_key(&node.id) {
                self.insert_node(node.clone());
            }
        }
        for edge in &turn.edges {
            self.insert_edge(edge.clone());
        }
        self.turn_count = turn.turn_index;
        self.current_query = Some(turn.query_id());
        Ok(())
    }

    /// JSON-exportable view; embeddings included only on request.
    pub fn export(&self, with_vectors: bool) -> GraphExport {
        GraphExport {
            nodes: self
                .nodes
                .values()
                .map(|n| NodeExport {
                    id: n.id.clone(),
                    kind: n.kind,
                    text: n.text.clone(),
                    description: n.description.clone(),
                    label: n.label,
                    turn: n.turn_index,
                    embedding: with_vectors.then(|| n.embedding.clone()),
                })
                .collect(),
            edges: self
                .edges
                .values()
                .map(|e| EdgeExport {
                    from: e.from.clone(),
                    to: e.to.clone(),
                    kind: e.kind,
                    weight: e.weight,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub nodes: Vec<NodeExport>,
    pub edges: Vec<EdgeExport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeExport {
    pub id: NodeId,
    pub kind: NodeKind,
    pub text: String,
    pub description: String,
    pub label: Option<Label>,
    pub turn: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeExport {
    pub from: NodeId,
    pub to: NodeId,
    pub kind: EdgeKind,
    pub weight: f64,
}
