//! Entity/relation extraction from a single turn's text: a deterministic
//! rule-based extractor (capitalized runs + a risk-keyword lexicon) and a
//! client for a remote LLM-backed extraction service.

use std::collections::{BTreeMap, HashSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::canonical_key;

/// Prompt sent (by reference, as `prompt_version`) to the remote extractor.
pub const EXTRACTION_PROMPT: &str = include_str!("../assets/extraction_prompt.txt");
pub const EXTRACTION_PROMPT_VERSION: &str = "v1";

const STOPWORDS: &str = include_str!("../assets/stopwords.txt");
const RISK_LEXICON: &str = include_str!("../assets/risk_lexicon.txt");

fn load_wordlist(raw: &str) -> HashSet<String> {
    raw.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub name: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpan {
    pub source: String,
    pub target: String,
    pub description: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub entities: Vec<EntitySpan>,
    pub relations: Vec<RelationSpan>,
    /// Relations dropped by validation (unknown endpoint, self-relation,
    /// duplicate pair).
    #[serde(default)]
    pub dropped_relations: u32,
}

pub trait Extractor: Send + Sync {
    fn extract(&self, text: &str) -> Result<ExtractionResult>;
}

/// Cleans up an extraction result so downstream graph construction can trust
/// it: drops empty-named entities, dedups entities by canonical key (first
/// seen wins), remaps relation endpoints to surviving entities, and drops
/// relations that reference unknown entities, collapse into self-relations,
/// or repeat an already-seen pair. Idempotent.
pub fn validate(result: ExtractionResult) -> ExtractionResult {
    let mut entities: Vec<EntitySpan> = Vec::new();
    let mut by_key: BTreeMap<String, usize> = BTreeMap::new();
    for entity in result.entities {
        let key = canonical_key(&entity.name);
        if key.is_empty() {
            continue;
        }
        if !by_key.contains_key(&key) {
            by_key.insert(key, entities.len());
            entities.push(entity);
        }
    }

    let mut dropped = result.dropped_relations;
    let mut seen_pairs: HashSet<(String, String)> = HashSet::new();
    let mut relations = Vec::new();
    for rel in result.relations {
        let src = canonical_key(&rel.source);
        let dst = canonical_key(&rel.target);
        if !by_key.contains_key(&src) || !by_key.contains_key(&dst) || src == dst {
            dropped += 1;
            continue;
        }
        let pair = if src <= dst { (src, dst) } else { (dst, src) };
        if !seen_pairs.insert(pair) {
            dropped += 1;
            continue;
        }
        relations.push(rel);
    }

    ExtractionResult {
        entities,
        relations,
        dropped_relations: dropped,
    }
}

/// Deterministic extractor. Entities are (a) maximal runs of capitalized
/// tokens with stopwords trimmed from the run's ends, and (b) lexicon
/// keywords matched exactly on lowercased tokens. The containing sentence
/// becomes the description, and every pair of entities co-occurring in a
/// sentence yields a relation. Total: never errors.
pub struct RuleExtractor {
    stopwords: HashSet<String>,
    lexicon: HashSet<String>,
}

impl RuleExtractor {
    pub fn new() -> Self {
        RuleExtractor {
            stopwords: load_wordlist(STOPWORDS),
            lexicon: load_wordlist(RISK_LEXICON),
        }
    }

    /// Extends the keyword lexicon (config-driven).
    pub fn with_extra_keywords<I: IntoIterator<Item = String>>(mut self, extra: I) -> Self {
        self.lexicon.extend(extra.into_iter().map(|k| k.to_lowercase()));
        self
    }

    pub fn lexicon_len(&self) -> usize {
        self.lexicon.len()
    }

    pub fn stopword_count(&self) -> usize {
        self.stopwords.len()
    }

    fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(&token.to_lowercase())
    }

    fn sentence_entities(&self, sentence: &str) -> Vec<String> {
        // Tokens keep internal punctuation ("e-mail") but shed edge
        // punctuation ("Bob." -> "Bob").
        let tokens: Vec<&str> = sentence
            .split_whitespace()
            .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
            .filter(|t| !t.is_empty())
            .collect();

        let capitalized = |t: &str| t.chars().next().is_some_and(char::is_uppercase);
        let mut consumed = vec![false; tokens.len()];
        let mut names = Vec::new();

        let mut i = 0;
        while i < tokens.len() {
            if !capitalized(tokens[i]) {
                i += 1;
                continue;
            }
            let mut j = i;
            while j < tokens.len() && capitalized(tokens[j]) {
                j += 1;
            }
            // Trim stopwords from both ends of the run ("The Yahoo Data
            // Breach" keeps "Yahoo Data Breach"; a bare "What" vanishes).
            let mut lo = i;
            let mut hi = j;
            while lo < hi && self.is_stopword(tokens[lo]) {
                lo += 1;
            }
            while hi > lo && self.is_stopword(tokens[hi - 1]) {
                hi -= 1;
            }
            if lo < hi {
                names.push(tokens[lo..hi].join(" "));
                for flag in consumed.iter_mut().take(hi).skip(lo) {
                    *flag = true;
                }
            }
            i = j;
        }

        for (i, token) in tokens.iter().enumerate() {
            if consumed[i] {
                continue;
            }
            let lower = token.to_lowercase();
            if self.lexicon.contains(&lower) && !self.stopwords.contains(&lower) {
                names.push(token.to_string());
            }
        }
        names
    }
}

impl Default for RuleExtractor {
    fn default() -> Self {
        RuleExtractor::new()
    }
}

impl Extractor for RuleExtractor {
    fn extract(&self, text: &str) -> Result<ExtractionResult> {
        let mut entities = Vec::new();
        let mut relations = Vec::new();
        for sentence in text.split(['.', '!', '?']) {
            let sentence = sentence.trim();
            if sentence.is_empty() {
                continue;
            }
            let mut names = self.sentence_entities(sentence);
            // Dedup within the sentence, keeping first occurrence, so
            // co-occurrence pairs are well-defined.
            let mut seen = HashSet::new();
            names.retain(|n| seen.insert(canonical_key(n)));

            for name in &names {
                entities.push(EntitySpan {
                    name: name.clone(),
                    description: sentence.to_string(),
                });
            }
            for a in 0..names.len() {
                for b in a + 1..names.len() {
                    relations.push(RelationSpan {
                        source: names[a].clone(),
                        target: names[b].clone(),
                        description: sentence.to_string(),
                    });
                }
            }
        }
        Ok(validate(ExtractionResult {
            entities,
            relations,
            dropped_relations: 0,
        }))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RemoteExtractionRequest {
    text: String,
    prompt_version: String,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireExtraction {
    entities: Vec<WireEntity>,
    relations: Vec<WireRelation>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireEntity {
    name: String,
    description: String,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRelation {
    source: String,
    target: String,
    description: String,
}

/// Client for a remote extraction service speaking
/// `POST {text, prompt_version} -> {entities, relations}`.
///
/// The response is parsed strictly; on a parse failure the request is retried
/// once with a "reply with only JSON" reminder appended, then the error
/// surfaces (the pipeline falls back to the rule extractor).
pub struct RemoteExtractor {
    client: reqwest::blocking::Client,
    url: String,
}

impl RemoteExtractor {
    pub fn new(url: impl Into<String>) -> Result<Self> {
        Ok(RemoteExtractor {
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()
                .map_err(|e| Error::Config(e.to_string()))?,
            url: url.into(),
        })
    }

    fn post(&self, text: &str) -> Result<String> {
        let request = RemoteExtractionRequest {
            text: text.to_string(),
            prompt_version: EXTRACTION_PROMPT_VERSION.to_string(),
        };
        let resp = self
            .client
            .post(&self.url)
            .json(&request)
            .send()
            .map_err(|e| Error::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::Transport(format!("HTTP {}", resp.status())));
        }
        resp.text()
            .map_err(|e| Error::Transport(format!("bad response body: {e}")))
    }

    fn parse(raw: &str) -> Result<ExtractionResult> {
        let wire: WireExtraction = serde_json::from_str(raw)
            .map_err(|e| Error::Extraction(format!("invalid extraction JSON: {e}")))?;
        Ok(validate(ExtractionResult {
            entities: wire
                .entities
                .into_iter()
                .map(|e| EntitySpan {
                    name: e.name,
                    description: e.description,
                })
                .collect(),
            relations: wire
                .relations
                .into_iter()
                .map(|r| RelationSpan {
                    source: r.source,
                    target: r.target,
                    description: r.description,
                })
                .collect(),
            dropped_relations: 0,
        }))
    }
}

impl Extractor for RemoteExtractor {
    fn extract(&self, text: &str) -> Result<ExtractionResult> {
        match Self::parse(&self.post(text)?) {
            Ok(result) => Ok(result),
            Err(_) => {
                let nudged = format!("{text}\n\nreply with only JSON");
                Self::parse(&self.post(&nudged)?)
            }
        }
    }
}
