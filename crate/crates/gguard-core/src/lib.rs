//! Conversation-safety engine that classifies each turn of a multi-turn
//! dialogue as harmful or benign.
//!
//! Per turn, the pipeline extracts entities and relations from the message,
//! embeds them, grows a cross-turn conversation graph, computes attention
//! over the query history, retrieves the most similar labeled exemplar from
//! a vector store and splices it in as a labeled node, prunes the graph to a
//! node budget guided by the attention weights, and classifies the current
//! query node with a graph convolutional network.
//!
//! The crate is organized bottom-up:
//!
//! * [`graph`] — conversation graph data model, per-turn construction, merging.
//! * [`embed`] — text-to-unit-vector embedders (deterministic stub + remote client).
//! * [`extract`] — rule-based and remote entity/relation extraction.
//! * [`store`] — labeled exemplar store with exact top-1 cosine retrieval.
//! * [`attention`] — attention over query history, aggregation, graph augmentation.
//! * [`prune`] — attention-guided subgraph selection under a node budget.
//! * [`gnn`] — graph convolutional classifier with manual backprop and training.
//! * [`pipeline`] — per-conversation sessions and the end-to-end turn flow.
//! * [`eval`] — synthetic corpora, metrics, ablation and scaling experiments.
//!
//! The default `parallel` feature routes the heavy kernels (store scans,
//! matrix products, batch gradients, corpus evaluation) through rayon.
//! Every parallel kernel has a sequential twin with an identical reduction
//! order, so results are bitwise-equal with the feature on or off.

pub mod attention;
pub mod codec;
pub mod embed;
pub mod error;
pub mod eval;
pub mod extract;
pub mod gnn;
pub mod graph;
pub mod pipeline;
pub mod prune;
pub mod store;

pub use attention::{AttentionMode, AttentionParams, AttentionWeights, RetrievalInfo};
pub use embed::{Embedder, StubEmbedder};
pub use error::{Error, Result};
pub use eval::{
    build_dataset, compute_metrics, evaluate, generate_long_conversation,
    generate_store_entries, generate_synthetic_corpus, make_report, metrics_of, read_corpus,
    run_ablation, run_scaling, split_corpus, train_and_eval, write_corpus, write_scaling_csv,
    AblationReport, CorpusSpec, EvalConversation, Metrics, MetricsReport, Prediction,
    ScalingConfig, ScalingPoint, ScalingReport, SplitResult, SHIFTED_RISK_TERMS,
    TRAIN_RISK_TERMS,
};
pub use extract::{ExtractionResult, Extractor, RuleExtractor};
pub use gnn::{
    evaluate_examples, GcnModel, ModelInfo, StageTimings, TrainConfig, TrainExample, Verdict,
};
pub use graph::{ConversationGraph, Edge, EdgeKind, Label, Node, NodeId, NodeKind, TurnGraph};
pub use pipeline::{
    EmbedderMode, Engine, ExtractorMode, PipelineConfig, Session, SessionConfig, TurnOutcome,
    DEFAULT_PRUNE_THRESHOLD, DEFAULT_SESSION_NODE_CAP,
};
pub use prune::{select_subgraph, PruneOutcome, PruningInfo};
pub use store::{LabeledQueryEntry, VectorStore};
