//! Per-conversation sessions and the end-to-end turn flow:
//! extract → embed/build → merge → attend → augment → prune → classify.
//!
//! Turn processing is staged for atomicity. Every fallible backend call
//! (extraction, embedding, retrieval-template embedding) runs against an
//! immutable session first; only when all of them have succeeded is the
//! session mutated, so a turn that fails leaves the session byte-identical
//! and can simply be retried.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{
    aggregate_refs, apply_augment, attend_refs, plan_augment, AttentionMode, AttentionParams,
    AttentionWeights, AugmentPlan, RetrievalInfo,
};
use crate::codec::{Reader, Writer};
use crate::embed::{Embedder, RemoteEmbedder, StubEmbedder, DEFAULT_DIM};
use crate::error::{Error, Result};
use crate::extract::{Extractor, RuleExtractor};
use crate::gnn::{GcnModel, StageTimings, Verdict};
use crate::graph::{
    build_turn_graph, ConversationGraph, Edge, EdgeKind, Label, Node, NodeId, NodeKind, TurnGraph,
};
use crate::prune::{select_subgraph, MIN_PRUNE_THRESHOLD};
use crate::store::VectorStore;

/// Node budget handed to the pruner each turn.
pub const DEFAULT_PRUNE_THRESHOLD: usize = 64;

/// Hard cap on stored session graph nodes; beyond it the oldest turns are
/// evicted outright.
pub const DEFAULT_SESSION_NODE_CAP: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderMode {
    /// Deterministic hashed bag-of-words; no network.
    Stub,
    /// JSON client for an embedding service.
    Remote,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorMode {
    /// Deterministic capitalized-run + lexicon extractor; no network.
    Rule,
    /// JSON client for an LLM-backed extraction service.
    Remote,
}

/// Everything the engine needs to run. Validated before use; remote modes
/// require their endpoint URLs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub embedder: EmbedderMode,
    pub dim: usize,
    pub embeddings_url: Option<String>,
    pub embedding_model: String,
    pub extractor: ExtractorMode,
    pub extractor_url: Option<String>,
    pub store_path: Option<PathBuf>,
    pub attention: AttentionMode,
    pub prune_threshold: usize,
    pub session_node_cap: usize,
    pub decision_threshold: f64,
    pub model_path: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            embedder: EmbedderMode::Stub,
            dim: DEFAULT_DIM,
            embeddings_url: None,
            embedding_model: "default".into(),
            extractor: ExtractorMode::Rule,
            extractor_url: None,
            store_path: None,
            attention: AttentionMode::Deterministic,
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
            session_node_cap: DEFAULT_SESSION_NODE_CAP,
            decision_threshold: 0.5,
            model_path: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 1 || self.dim > (1 << 20) {
            return Err(Error::Config(format!(
                "embedding dimension {} out of range 1..=2^20",
                self.dim
            )));
        }
        if self.prune_threshold < MIN_PRUNE_THRESHOLD {
            return Err(Error::Config(format!(
                "prune threshold {} below minimum {MIN_PRUNE_THRESHOLD}",
                self.prune_threshold
            )));
        }
        if self.session_node_cap < self.prune_threshold {
            return Err(Error::Config(format!(
                "session node cap {} below prune threshold {}",
                self.session_node_cap, self.prune_threshold
            )));
        }
        if !(self.decision_threshold.is_finite()
            && (0.0..=1.0).contains(&self.decision_threshold))
        {
            return Err(Error::Config(format!(
                "decision threshold {} outside [0, 1]",
                self.decision_threshold
            )));
        }
        if self.embedder == EmbedderMode::Remote && self.embeddings_url.is_none() {
            return Err(Error::Config(
                "remote embedder requires embeddings_url".into(),
            ));
        }
        if self.extractor == ExtractorMode::Remote && self.extractor_url.is_none() {
            return Err(Error::Config(
                "remote extractor requires extractor_url".into(),
            ));
        }
        Ok(())
    }

    /// The per-session slice of the config, frozen into each session at
    /// creation so later engine reconfiguration cannot change a conversation
    /// mid-flight.
    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            dim: self.dim,
            attention: self.attention,
            prune_threshold: self.prune_threshold,
            session_node_cap: self.session_node_cap,
            decision_threshold: self.decision_threshold,
        }
    }
}

/// Snapshot of the config values that shape one conversation's processing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub dim: usize,
    pub attention: AttentionMode,
    pub prune_threshold: usize,
    pub session_node_cap: usize,
    pub decision_threshold: f64,
}

/// One conversation's state. The graph holds every surviving node across
/// turns; `query_vector_history` keeps the embedding of every query ever
/// processed (append-only, even when old turns are evicted from the graph)
/// because attention always runs over the full history.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub conversation_id: String,
    pub graph: ConversationGraph,
    pub query_vector_history: Vec<Vec<f32>>,
    /// Unix epoch milliseconds.
    pub created_ms: u64,
    pub updated_ms: u64,
    pub config: SessionConfig,
    /// Turns removed from the graph by the session node cap, ascending.
    pub evicted_turns: Vec<u32>,
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"GGSN";
const SNAPSHOT_VERSION: u32 = 1;
/// Caps on snapshot element counts; payloads claiming more are corrupt.
const MAX_SNAPSHOT_ITEMS: u32 = 1 << 24;

impl Session {
    pub fn new(config: SessionConfig) -> Session {
        let now = now_ms();
        Session {
            conversation_id: uuid::Uuid::new_v4().to_string(),
            graph: ConversationGraph::new(),
            query_vector_history: Vec::new(),
            created_ms: now,
            updated_ms: now,
            config,
            evicted_turns: Vec::new(),
        }
    }

    pub fn turn_count(&self) -> u32 {
        self.graph.turn_count
    }

    /// Serializes the full session losslessly: graph (nodes, edges, attention
    /// cache), query vector history, eviction record, config, timestamps.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_magic(SNAPSHOT_MAGIC);
        w.put_u32(SNAPSHOT_VERSION);
        w.put_str(&self.conversation_id);
        w.put_u64(self.created_ms);
        w.put_u64(self.updated_ms);
        w.put_str(&serde_json::to_string(&self.config).expect("config serializes"));

        w.put_u32(self.graph.turn_count);
        match &self.graph.current_query {
            None => w.put_u8(0),
            Some(id) => {
                w.put_u8(1);
                w.put_str(id.as_str());
            }
        }

        w.put_u32(self.graph.node_count() as u32);
        for node in self.graph.nodes() {
            w.put_str(node.id.as_str());
            w.put_u8(encode_node_kind(node.kind));
            w.put_str(&node.text);
            w.put_str(&node.description);
            put_f32_vec(&mut w, &node.embedding);
            w.put_u8(encode_label(node.label));
            w.put_u32(node.turn_index);
        }

        w.put_u32(self.graph.edge_count() as u32);
        for edge in self.graph.edges() {
            w.put_str(edge.from.as_str());
            w.put_str(edge.to.as_str());
            w.put_u8(encode_edge_kind(edge.kind));
            w.put_str(&edge.description);
            match &edge.embedding {
                None => w.put_u8(0),
                Some(v) => {
                    w.put_u8(1);
                    put_f32_vec(&mut w, v);
                }
            }
            w.put_f64(edge.weight);
        }

        w.put_u32(self.graph.attention.len() as u32);
        for (id, alpha) in &self.graph.attention {
            w.put_str(id.as_str());
            w.put_f64(*alpha);
        }

        w.put_u32(self.query_vector_history.len() as u32);
        for v in &self.query_vector_history {
            put_f32_vec(&mut w, v);
        }

        w.put_u32(self.evicted_turns.len() as u32);
        for t in &self.evicted_turns {
            w.put_u32(*t);
        }
        w.into_bytes()
    }

    /// Inverse of [`snapshot`](Self::snapshot). Rejects other versions,
    /// truncation, trailing bytes, and payloads that violate session
    /// invariants, without ever panicking.
    pub fn restore(bytes: &[u8]) -> Result<Session> {
        let mut r = Reader::new(bytes);
        r.expect_magic(SNAPSHOT_MAGIC)?;
        let version = r.get_u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Version {
                got: version,
                supported: SNAPSHOT_VERSION,
            });
        }
        let conversation_id = r.get_str()?;
        let created_ms = r.get_u64()?;
        let updated_ms = r.get_u64()?;
        let config: SessionConfig = serde_json::from_str(&r.get_str()?)
            .map_err(|e| Error::Corrupt(format!("config snapshot: {e}")))?;

        let mut graph = ConversationGraph::new();
        graph.turn_count = r.get_u32()?;
        graph.current_query = match r.get_u8()? {
            0 => None,
            1 => Some(NodeId::from_snapshot(&r.get_str()?)?),
            other => return Err(Error::Corrupt(format!("current-query flag {other}"))),
        };

        let node_count = checked_count(r.get_u32()?, "node")?;
        for _ in 0..node_count {
            let id = NodeId::from_snapshot(&r.get_str()?)?;
            let kind = decode_node_kind(r.get_u8()?)?;
            let text = r.get_str()?;
            let description = r.get_str()?;
            let embedding = get_f32_vec(&mut r)?;
            let label = decode_label(r.get_u8()?)?;
            let turn_index = r.get_u32()?;
            graph.insert_node(Node {
                id,
                kind,
                text,
                description,
                embedding,
                label,
                turn_index,
            });
        }

        let edge_count = checked_count(r.get_u32()?, "edge")?;
        for _ in 0..edge_count {
            let from = NodeId::from_snapshot(&r.get_str()?)?;
            let to = NodeId::from_snapshot(&r.get_str()?)?;
            if from == to {
                return Err(Error::Corrupt(format!("self-loop edge {from}")));
            }
            if !graph.contains(&from) || !graph.contains(&to) {
                return Err(Error::Corrupt(format!(
                    "edge {from} — {to} references a missing node"
                )));
            }
            let kind = decode_edge_kind(r.get_u8()?)?;
            let description = r.get_str()?;
            let embedding = match r.get_u8()? {
                0 => None,
                1 => Some(get_f32_vec(&mut r)?),
                other => return Err(Error::Corrupt(format!("edge-embedding flag {other}"))),
            };
            let weight = r.get_f64()?;
            if !weight.is_finite() {
                return Err(Error::Corrupt("non-finite edge weight".into()));
            }
            let mut edge = Edge::new(from, to, kind, weight).with_description(description);
            edge.embedding = embedding;
            graph.insert_edge(edge);
        }

        let attention_count = checked_count(r.get_u32()?, "attention")?;
        for _ in 0..attention_count {
            let id = NodeId::from_snapshot(&r.get_str()?)?;
            let alpha = r.get_f64()?;
            graph.attention.insert(id, alpha);
        }

        let history_count = checked_count(r.get_u32()?, "history")?;
        let mut query_vector_history = Vec::with_capacity(history_count.min(1024));
        for _ in 0..history_count {
            query_vector_history.push(get_f32_vec(&mut r)?);
        }

        let evicted_count = checked_count(r.get_u32()?, "evicted-turn")?;
        let mut evicted_turns = Vec::with_capacity(evicted_count.min(1024));
        for _ in 0..evicted_count {
            evicted_turns.push(r.get_u32()?);
        }
        r.finish()?;

        if query_vector_history.len() as u32 != graph.turn_count {
            return Err(Error::Corrupt(format!(
                "{} history vectors for turn count {}",
                query_vector_history.len(),
                graph.turn_count
            )));
        }
        if graph.turn_count > 0 && graph.current_query.is_none() {
            return Err(Error::Corrupt("missing current query".into()));
        }

        Ok(Session {
            conversation_id,
            graph,
            query_vector_history,
            created_ms,
            updated_ms,
            config,
            evicted_turns,
        })
    }
}

fn checked_count(n: u32, what: &str) -> Result<usize> {
    if n > MAX_SNAPSHOT_ITEMS {
        return Err(Error::Corrupt(format!("{what} count {n} is implausible")));
    }
    Ok(n as usize)
}

fn put_f32_vec(w: &mut Writer, v: &[f32]) {
    w.put_u32(v.len() as u32);
    for x in v {
        w.put_f32(*x);
    }
}

fn get_f32_vec(r: &mut Reader) -> Result<Vec<f32>> {
    let len = checked_count(r.get_u32()?, "vector element")?;
    let mut v = Vec::with_capacity(len.min(1 << 16));
    for _ in 0..len {
        v.push(r.get_f32()?);
    }
    Ok(v)
}

fn encode_node_kind(kind: NodeKind) -> u8 {
    match kind {
        NodeKind::Entity => 0,
        NodeKind::Query => 1,
        NodeKind::Labeled => 2,
    }
}

fn decode_node_kind(byte: u8) -> Result<NodeKind> {
    match byte {
        0 => Ok(NodeKind::Entity),
        1 => Ok(NodeKind::Query),
        2 => Ok(NodeKind::Labeled),
        other => Err(Error::Corrupt(format!("node kind {other}"))),
    }
}

fn encode_edge_kind(kind: EdgeKind) -> u8 {
    match kind {
        EdgeKind::Relation => 0,
        EdgeKind::Membership => 1,
        EdgeKind::SimilarityLink => 2,
    }
}

fn decode_edge_kind(byte: u8) -> Result<EdgeKind> {
    match byte {
        0 => Ok(EdgeKind::Relation),
        1 => Ok(EdgeKind::Membership),
        2 => Ok(EdgeKind::SimilarityLink),
        other => Err(Error::Corrupt(format!("edge kind {other}"))),
    }
}

fn encode_label(label: Option<Label>) -> u8 {
    match label {
        None => 0,
        Some(Label::Harmful) => 1,
        Some(Label::Benign) => 2,
    }
}

fn decode_label(byte: u8) -> Result<Option<Label>> {
    match byte {
        0 => Ok(None),
        1 => Ok(Some(Label::Harmful)),
        2 => Ok(Some(Label::Benign)),
        other => Err(Error::Corrupt(format!("label {other}"))),
    }
}

impl NodeId {
    fn from_snapshot(s: &str) -> Result<NodeId> {
        if s.starts_with("e:") || s.starts_with("q:") || s.starts_with("l:") {
            Ok(NodeId::raw(s))
        } else {
            Err(Error::Corrupt(format!("node id \"{s}\"")))
        }
    }
}

/// All backend work for one turn, computed against an immutable session.
struct StagedTurn {
    turn: TurnGraph,
    query_vec: Vec<f32>,
    weights: AttentionWeights,
    plan: Option<AugmentPlan>,
    extraction_fallback: bool,
    timings: StageTimings,
}

/// What a committed turn changed, for callers that classify separately
/// (dataset building) or not at all.
#[derive(Clone, Debug)]
pub struct TurnOutcome {
    pub turn: u32,
    pub weights: AttentionWeights,
    pub retrieval: Option<RetrievalInfo>,
    pub extraction_fallback: bool,
    /// extract/embed/attend/augment filled; prune/classify/total zero.
    pub timings: StageTimings,
}

/// Shared read-only pipeline: embedder, extractor, exemplar store, model.
/// Sessions are owned by the caller and passed in per turn; the engine itself
/// is safe to share across threads.
pub struct Engine {
    config: PipelineConfig,
    embedder: Arc<dyn Embedder>,
    extractor: Arc<dyn Extractor>,
    fallback: RuleExtractor,
    store: VectorStore,
    model: Option<GcnModel>,
    attention: AttentionParams,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.config)
            .field("store_len", &self.store.len())
            .field("has_model", &self.model.is_some())
            .finish_non_exhaustive()
    }
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Backend failures that abort the turn with a service-unavailable verdict
/// instead of an error: the caller can retry the same turn later.
fn is_backend_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::Transport(_) | Error::Extraction(_) | Error::DimMismatch { .. }
    )
}

impl Engine {
    /// Builds the engine from config alone: constructs the embedder and
    /// extractor, ingests the exemplar store, loads the model.
    pub fn new(config: PipelineConfig) -> Result<Engine> {
        config.validate()?;
        let embedder: Arc<dyn Embedder> = match config.embedder {
            EmbedderMode::Stub => Arc::new(StubEmbedder::new(config.dim)),
            EmbedderMode::Remote => Arc::new(RemoteEmbedder::new(
                config.embeddings_url.clone().expect("validated"),
                config.embedding_model.clone(),
                config.dim,
            )?),
        };
        let extractor: Arc<dyn Extractor> = match config.extractor {
            ExtractorMode::Rule => Arc::new(RuleExtractor::new()),
            ExtractorMode::Remote => Arc::new(crate::extract::RemoteExtractor::new(
                config.extractor_url.clone().expect("validated"),
            )?),
        };
        let store = match &config.store_path {
            Some(path) => VectorStore::ingest(path, embedder.as_ref())?,
            None => VectorStore::empty(config.dim),
        };
        let model = match &config.model_path {
            Some(path) => Some(crate::gnn::GcnModel::load(path)?),
            None => None,
        };
        Engine::from_parts(config, embedder, extractor, store, model)
    }

    /// Assembles an engine from already-built parts; used by tests, training,
    /// and evaluation. Cross-checks every dimension and the attention mode.
    pub fn from_parts(
        config: PipelineConfig,
        embedder: Arc<dyn Embedder>,
        extractor: Arc<dyn Extractor>,
        store: VectorStore,
        model: Option<GcnModel>,
    ) -> Result<Engine> {
        config.validate()?;
        if embedder.dim() != config.dim {
            return Err(Error::Config(format!(
                "embedder dimension {} != configured {}",
                embedder.dim(),
                config.dim
            )));
        }
        if store.dim() != config.dim {
            return Err(Error::Config(format!(
                "store dimension {} != configured {}",
                store.dim(),
                config.dim
            )));
        }
        let attention = match &model {
            Some(m) => {
                if m.dim() != config.dim {
                    return Err(Error::Config(format!(
                        "model dimension {} != configured {}",
                        m.dim(),
                        config.dim
                    )));
                }
                if m.attention_mode() != config.attention {
                    return Err(Error::Config(format!(
                        "model attention mode {:?} != configured {:?}",
                        m.attention_mode(),
                        config.attention
                    )));
                }
                m.attention_params().clone()
            }
            // Without a model (dataset building) attention falls back to the
            // deterministic scorer; parametric weights only exist in a model.
            None => AttentionParams::deterministic(),
        };
        Ok(Engine {
            config,
            embedder,
            extractor,
            fallback: RuleExtractor::new(),
            store,
            model,
            attention,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &VectorStore {
        &self.store
    }

    pub fn model(&self) -> Option<&GcnModel> {
        self.model.as_ref()
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn open_session(&self) -> Session {
        Session::new(self.config.session_config())
    }

    /// Runs every backend call for the turn without touching the session.
    fn stage_turn(&self, session: &Session, text: &str) -> Result<StagedTurn> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(Error::EmptyTurnText);
        }
        if session.config.dim != self.config.dim {
            return Err(Error::Config(format!(
                "session was created for dimension {}, engine runs {}",
                session.config.dim, self.config.dim
            )));
        }
        let turn_index = session.graph.turn_count + 1;

        let t = Instant::now();
        let (extraction, extraction_fallback) = match self.extractor.extract(trimmed) {
            Ok(extraction) => (extraction, false),
            // Unusable output from a responding extractor: degrade to rules.
            Err(Error::Extraction(_)) => (self.fallback.extract(trimmed)?, true),
            Err(e) => return Err(e),
        };
        let extract = ms(t);

        let t = Instant::now();
        let turn = build_turn_graph(turn_index, trimmed, &extraction, self.embedder.as_ref())?;
        let embed = ms(t);
        let query_vec = turn.query().embedding.clone();

        let t = Instant::now();
        let mut refs: Vec<&[f32]> = session
            .query_vector_history
            .iter()
            .map(Vec::as_slice)
            .collect();
        refs.push(&query_vec);
        let weights = attend_refs(&refs, &self.attention);
        let v_agg = aggregate_refs(&refs, &weights)?;
        let attend = ms(t);

        let t = Instant::now();
        let plan = plan_augment(&v_agg, &self.store, self.embedder.as_ref())?;
        let augment = ms(t);

        Ok(StagedTurn {
            turn,
            query_vec,
            weights,
            plan,
            extraction_fallback,
            timings: StageTimings {
                extract,
                embed,
                attend,
                augment,
                ..StageTimings::default()
            },
        })
    }

    /// Applies a staged turn: merge, splice the labeled node, extend history,
    /// refresh the attention cache, enforce the node cap.
    fn commit_turn(&self, session: &mut Session, staged: StagedTurn) -> Result<TurnOutcome> {
        session.graph.merge(&staged.turn)?;
        let retrieval = match &staged.plan {
            Some(plan) => Some(apply_augment(&mut session.graph, plan)?),
            None => None,
        };
        session.query_vector_history.push(staged.query_vec);
        session.graph.attention.clear();
        for (id, alpha) in &staged.weights.0 {
            if session.graph.contains(id) {
                session.graph.attention.insert(id.clone(), *alpha);
            }
        }
        let evicted = evict_to_cap(&mut session.graph, session.config.session_node_cap);
        session.evicted_turns.extend(evicted);
        session.updated_ms = now_ms();
        Ok(TurnOutcome {
            turn: session.graph.turn_count,
            weights: staged.weights,
            retrieval,
            extraction_fallback: staged.extraction_fallback,
            timings: staged.timings,
        })
    }

    /// Advances the session by one turn without classifying: the shared
    /// front half of turn processing, also used to build training datasets.
    /// Backend failures surface as raw errors and leave the session intact.
    pub fn advance_turn(&self, session: &mut Session, text: &str) -> Result<TurnOutcome> {
        let staged = self.stage_turn(session, text)?;
        self.commit_turn(session, staged)
    }

    /// Full turn processing. Backend failures (unreachable embedder or
    /// extractor, bad remote dimensions) return a service-unavailable verdict
    /// and leave the session unchanged; programming and config errors are
    /// returned as errors.
    pub fn process_turn(&self, session: &mut Session, text: &str) -> Result<Verdict> {
        let model = self.model.as_ref().ok_or(Error::NoModel)?;
        let total = Instant::now();
        let staged = match self.stage_turn(session, text) {
            Ok(staged) => staged,
            Err(e) if is_backend_failure(&e) => {
                return Ok(Verdict::unavailable(
                    session.graph.turn_count + 1,
                    e.to_string(),
                ));
            }
            Err(e) => return Err(e),
        };
        let outcome = self.commit_turn(session, staged)?;

        let t = Instant::now();
        let view = select_subgraph(
            &session.graph,
            &outcome.weights,
            session.config.prune_threshold,
        )?;
        let prune = ms(t);

        let t = Instant::now();
        let mut verdict = model.predict(
            &view.graph,
            &outcome.weights,
            session.config.decision_threshold,
        )?;
        let classify = ms(t);

        verdict.retrieval = outcome.retrieval;
        verdict.pruning = view.info;
        verdict.extraction_fallback = outcome.extraction_fallback;
        verdict.timings_ms = StageTimings {
            prune,
            classify,
            total: ms(total),
            ..outcome.timings
        };
        Ok(verdict)
    }
}

/// Evicts whole turns, oldest first, until the graph fits the cap: the turn's
/// query node goes, then every entity left without a query neighbor. The
/// current turn is never evicted, so the cap can be exceeded by a single
/// oversized turn (mirroring the pruner's mandatory-set rule).
fn evict_to_cap(graph: &mut ConversationGraph, cap: usize) -> Vec<u32> {
    let mut evicted = Vec::new();
    while graph.node_count() > cap {
        let Some(current) = graph.current_query.clone() else {
            break;
        };
        let Some(oldest) = graph
            .nodes()
            .filter(|n| n.kind == NodeKind::Query && n.id != current)
            .map(|n| n.turn_index)
            .min()
        else {
            break;
        };
        graph.remove_node(&NodeId::query(oldest));
        let orphans: Vec<NodeId> = graph
            .nodes()
            .filter(|n| n.kind == NodeKind::Entity)
            .filter(|n| {
                graph
                    .neighbors(&n.id)
                    .map(|adj| {
                        !adj.iter()
                            .any(|m| graph.node(m).map(|x| x.kind) == Some(NodeKind::Query))
                    })
                    .unwrap_or(false)
            })
            .map(|n| n.id.clone())
            .collect();
        for orphan in &orphans {
            graph.remove_node(orphan);
        }
        evicted.push(oldest);
    }
    evicted
}
