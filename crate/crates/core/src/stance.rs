//! Stance annotation and state-label propagation.
//!
//! Each response gets a binary stance toward its parent post (0 = agrees or
//! believes, 1 = denies or doubts). A node's state toward the source post is the
//! exclusive-or of the stances along its root path, so direct replies copy their
//! stance and deeper replies flip their parent's state whenever they disagree.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tree::PropagationTree;

pub const PROMPT_VERSION: &str = "stance-v1";

const ROOT_TEMPLATE: &str = "- Source post: '{source_sentence}'\n\
- Responsive post: '{response_sentence}'\n\
- Based on the content of the response comment, determine its attitude towards the source post and choose one of the following options: The response comment believes the source post: 0, The response comment does not believe (or doubts) the source post: 1. If the response comment only contains '@' someone(s) without any other content, then you can consider that the response is believing the source post. You only need to select one label from the options above as the final result, no additional text is required.";

const REPLY_TEMPLATE: &str = "- Source post: '{source_sentence}'\n\
- Responsive post: '{response_sentence}'\n\
- Based on the content of the response sentence, determine its attitude towards the source sentence and choose one of the following options: The response sentence agrees with the source sentence: 0, The response sentence disagrees (or doubts) the source sentence:1. If the response sentence only contains '@' someone(s) without any other content, then you can consider that the response is agreeing to the source sentence. You only need to select one label from the options above as the final result, no additional text is required.";

const DENY_LEXICON: [&str; 8] = ["fake", "false", "doubt", "rumor", "lie", "假", "谣言", "骗"];

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("could not find a 0/1 stance in {0:?}")]
    UnparseableStance(String),
    #[error("stance provider failed: {0}")]
    Provider(#[from] ProviderError),
    #[error("tree {0} has no responses to label")]
    NoResponses(String),
    #[error("label cache i/o: {0}")]
    Cache(#[from] std::io::Error),
    #[error("malformed cache record at line {line}: {message}")]
    CacheRecord { line: usize, message: String },
}

#[derive(Debug, Error, Clone)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    Response(String),
    #[error("missing credential: environment variable {0} is not set")]
    MissingToken(String),
}

/// Prompt pair used to query a chat model. `{source_sentence}` and
/// `{response_sentence}` are substituted in a single pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub version: String,
    pub root: String,
    pub reply: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            version: PROMPT_VERSION.to_string(),
            root: ROOT_TEMPLATE.to_string(),
            reply: REPLY_TEMPLATE.to_string(),
        }
    }
}

impl PromptTemplates {
    pub fn render(&self, parent_text: &str, child_text: &str, parent_is_root: bool) -> String {
        let template = if parent_is_root { &self.root } else { &self.reply };
        substitute(template, parent_text, child_text)
    }
}

fn substitute(template: &str, source: &str, response: &str) -> String {
    const SOURCE: &str = "{source_sentence}";
    const RESPONSE: &str = "{response_sentence}";
    let mut out = String::with_capacity(template.len() + source.len() + response.len());
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix(SOURCE) {
            out.push_str(source);
            rest = after;
        } else if let Some(after) = tail.strip_prefix(RESPONSE) {
            out.push_str(response);
            rest = after;
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    out
}

/// Renders the default prompt for one parent/child pair.
pub fn render_prompt(parent_text: &str, child_text: &str, parent_is_root: bool) -> String {
    PromptTemplates::default().render(parent_text, child_text, parent_is_root)
}

/// First standalone `0` or `1` token in a model reply.
pub fn parse_stance(raw: &str) -> Result<u8, LabelError> {
    raw.trim()
        .split(|c: char| !c.is_alphanumeric())
        .find_map(|tok| match tok {
            "0" => Some(0),
            "1" => Some(1),
            _ => None,
        })
        .ok_or_else(|| LabelError::UnparseableStance(raw.to_string()))
}

/// Lexicon stance used as a deterministic stand-in for a chat model.
pub fn mock_stance(_parent_text: &str, child_text: &str) -> u8 {
    let lower = child_text.to_lowercase();
    let hit = DENY_LEXICON.iter().any(|word| {
        if word.is_ascii() {
            lower
                .split(|c: char| !c.is_alphanumeric())
                .any(|tok| tok == *word)
        } else {
            lower.contains(word)
        }
    });
    u8::from(hit)
}

/// Anything that maps a (parent, child) pair to a raw model reply.
pub trait StanceProvider: Send + Sync {
    fn id(&self) -> String;
    /// Participates in cache keys; changing prompts must change this.
    fn prompt_version(&self) -> String;
    fn query(
        &self,
        parent_text: &str,
        child_text: &str,
        parent_is_root: bool,
    ) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockProvider;

impl StanceProvider for MockProvider {
    fn id(&self) -> String {
        "mock-lexicon".to_string()
    }

    fn prompt_version(&self) -> String {
        "lexicon-v1".to_string()
    }

    fn query(&self, parent: &str, child: &str, _parent_is_root: bool) -> Result<String, ProviderError> {
        Ok(mock_stance(parent, child).to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    /// Full URL of an OpenAI-compatible `/chat/completions` endpoint.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    /// Name of the environment variable holding the bearer token, if any.
    pub token_env: Option<String>,
    pub timeout_secs: u64,
}

impl Default for HttpProviderConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".to_string(),
            model: "gemma-2-9b-it".to_string(),
            temperature: 0.2,
            token_env: Some("EIN_LLM_TOKEN".to_string()),
            timeout_secs: 60,
        }
    }
}

/// Chat-completion client.
pub struct HttpProvider {
    config: HttpProviderConfig,
    templates: PromptTemplates,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(config: HttpProviderConfig, templates: PromptTemplates) -> Result<Self, ProviderError> {
        let token = match &config.token_env {
            Some(var) => std::env::var(var).ok(),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            config,
            templates,
            token,
            agent,
        })
    }

    /// Fails fast when a token variable is configured but unset.
    pub fn require_token(&self) -> Result<(), ProviderError> {
        match (&self.config.token_env, &self.token) {
            (Some(var), None) => Err(ProviderError::MissingToken(var.clone())),
            _ => Ok(()),
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: [ChatMessage<'a>; 1],
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

impl StanceProvider for HttpProvider {
    fn id(&self) -> String {
        format!("http:{}", self.config.model)
    }

    fn prompt_version(&self) -> String {
        self.templates.version.clone()
    }

    fn query(&self, parent: &str, child: &str, parent_is_root: bool) -> Result<String, ProviderError> {
        let prompt = self.templates.render(parent, child, parent_is_root);
        let body = ChatRequest {
            model: &self.config.model,
            temperature: self.config.temperature,
            messages: [ChatMessage {
                role: "user",
                content: &prompt,
            }],
        };
        let mut request = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ProviderError::Transport(format!("HTTP {status}: {text}")));
        }
        let json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ProviderError::Response(e.to_string()))?;
        json.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Response(format!("no message content in {text}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCacheEntry {
    pub key: String,
    pub stance: u8,
    pub provider_id: String,
    pub prompt_version: String,
}

/// Stable key of one annotation request.
pub fn cache_key(parent_text: &str, child_text: &str, parent_is_root: bool, prompt_version: &str) -> String {
    let mut hasher = Sha256::new();
    for field in [parent_text, child_text, prompt_version] {
        hasher.update((field.len() as u64).to_le_bytes());
        hasher.update(field.as_bytes());
    }
    hasher.update([u8::from(parent_is_root)]);
    hex::encode(hasher.finalize())
}

/// Append-only stance cache, optionally backed by a line-delimited file.
#[derive(Default)]
pub struct LabelCache {
    entries: HashMap<String, LabelCacheEntry>,
    writer: Option<BufWriter<File>>,
    path: Option<PathBuf>,
}

impl LabelCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, LabelError> {
        let path = path.as_ref();
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: LabelCacheEntry =
                    serde_json::from_str(&line).map_err(|e| LabelError::CacheRecord {
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                entries.insert(entry.key.clone(), entry);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries,
            writer: Some(BufWriter::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&LabelCacheEntry> {
        self.entries.get(key)
    }

    /// Entries are immutable: inserting an existing key keeps the first value.
    pub fn insert(&mut self, entry: LabelCacheEntry) -> Result<(), LabelError> {
        if self.entries.contains_key(&entry.key) {
            return Ok(());
        }
        if let Some(w) = self.writer.as_mut() {
            serde_json::to_writer(&mut *w, &entry).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.entries.insert(entry.key.clone(), entry);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_backoff_ms: 250,
        }
    }
}

impl RetryPolicy {
    pub fn no_backoff() -> Self {
        Self {
            base_backoff_ms: 0,
            ..Self::default()
        }
    }
}

/// Queries the provider until a stance parses or attempts run out.
pub fn query_stance(
    provider: &dyn StanceProvider,
    parent_text: &str,
    child_text: &str,
    parent_is_root: bool,
    policy: &RetryPolicy,
) -> Result<u8, LabelError> {
    let attempts = policy.max_attempts.max(1);
    let mut last = None;
    for attempt in 0..attempts {
        if attempt > 0 && policy.base_backoff_ms > 0 {
            thread::sleep(Duration::from_millis(policy.base_backoff_ms << (attempt - 1)));
        }
        let outcome = provider
            .query(parent_text, child_text, parent_is_root)
            .map_err(LabelError::from)
            .and_then(|raw| parse_stance(&raw));
        match outcome {
            Ok(stance) => return Ok(stance),
            Err(e) => {
                log::debug!("stance attempt {} failed: {e}", attempt + 1);
                last = Some(e);
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Per-node stance and state labels of one tree. Keys are canonical node
/// indices; the root carries no label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLabels {
    pub event_id: String,
    pub states: BTreeMap<usize, u8>,
    pub stances: BTreeMap<usize, u8>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LabelMismatch {
    #[error("labels cover {got} nodes, expected {expected}")]
    Coverage { got: usize, expected: usize },
    #[error("node {0} breaks the state/stance parity rule")]
    Parity(usize),
    #[error("node {0} has a non-binary label")]
    NotBinary(usize),
}

impl StateLabels {
    /// Derives states from per-node stances by root-path parity.
    pub fn from_stances(tree: &PropagationTree, stances: BTreeMap<usize, u8>) -> Self {
        let mut states = BTreeMap::new();
        for v in 1..tree.len() {
            let stance = stances[&v];
            let parent = tree.parent(v).expect("non-root");
            let state = if parent == 0 { stance } else { states[&parent] ^ stance };
            states.insert(v, state);
        }
        Self {
            event_id: tree.event_id().to_string(),
            states,
            stances,
        }
    }

    /// Derives stances from states, so that propagation reproduces them.
    pub fn from_states(tree: &PropagationTree, states: BTreeMap<usize, u8>) -> Self {
        let stances = (1..tree.len())
            .map(|v| {
                let parent = tree.parent(v).expect("non-root");
                let s = if parent == 0 { states[&v] } else { states[&v] ^ states[&parent] };
                (v, s)
            })
            .collect();
        Self {
            event_id: tree.event_id().to_string(),
            states,
            stances,
        }
    }

    pub fn validate(&self, tree: &PropagationTree) -> Result<(), LabelMismatch> {
        let expected = tree.len().saturating_sub(1);
        for map in [&self.states, &self.stances] {
            if map.len() != expected || map.keys().any(|&k| k == 0 || k >= tree.len()) {
                return Err(LabelMismatch::Coverage {
                    got: map.len(),
                    expected,
                });
            }
        }
        for v in 1..tree.len() {
            let (state, stance) = (self.states[&v], self.stances[&v]);
            if state > 1 || stance > 1 {
                return Err(LabelMismatch::NotBinary(v));
            }
            let parent = tree.parent(v).expect("non-root");
            let parent_state = if parent == 0 { 0 } else { self.states[&parent] };
            if state != parent_state ^ stance {
                return Err(LabelMismatch::Parity(v));
            }
        }
        Ok(())
    }
}

/// Labels every response of `tree`, consulting `cache` before the provider.
pub fn label_tree(
    tree: &PropagationTree,
    provider: &dyn StanceProvider,
    cache: &mut LabelCache,
    policy: &RetryPolicy,
) -> Result<StateLabels, LabelError> {
    if tree.len() < 2 {
        return Err(LabelError::NoResponses(tree.event_id().to_string()));
    }
    let version = provider.prompt_version();
    let mut stances = BTreeMap::new();
    for v in 1..tree.len() {
        let parent = tree.parent(v).expect("non-root");
        let (ptext, ctext) = (&tree.node(parent).text, &tree.node(v).text);
        let key = cache_key(ptext, ctext, parent == 0, &version);
        let stance = match cache.get(&key) {
            Some(entry) => entry.stance,
            None => {
                let stance = query_stance(provider, ptext, ctext, parent == 0, policy)?;
                cache.insert(LabelCacheEntry {
                    key,
                    stance,
                    provider_id: provider.id(),
                    prompt_version: version.clone(),
                })?;
                stance
            }
        };
        stances.insert(v, stance);
    }
    Ok(StateLabels::from_stances(tree, stances))
}

/// Labels a whole dataset. Distinct uncached pairs are queried with at most
/// `concurrency` requests in flight; cache writes happen on the calling thread.
/// A tree whose pairs could not be labeled gets an error entry.
pub fn label_dataset(
    trees: &[PropagationTree],
    provider: &dyn StanceProvider,
    cache: &mut LabelCache,
    policy: &RetryPolicy,
    concurrency: usize,
) -> Result<Vec<Result<StateLabels, LabelError>>, LabelError> {
    let version = provider.prompt_version();
    let mut pending: BTreeMap<String, (String, String, bool)> = BTreeMap::new();
    for tree in trees {
        for v in 1..tree.len() {
            let parent = tree.parent(v).expect("non-root");
            let (p, c) = (&tree.node(parent).text, &tree.node(v).text);
            let key = cache_key(p, c, parent == 0, &version);
            if cache.get(&key).is_none() {
                pending
                    .entry(key)
                    .or_insert_with(|| (p.clone(), c.clone(), parent == 0));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| LabelError::Provider(ProviderError::Transport(e.to_string())))?;
    let answers: Vec<(String, Result<u8, LabelError>)> = pool.install(|| {
        pending
            .into_par_iter()
            .map(|(key, (p, c, root))| {
                let r = query_stance(provider, &p, &c, root, policy);
                (key, r)
            })
            .collect()
    });

    let mut failures: HashMap<String, String> = HashMap::new();
    for (key, answer) in answers {
        match answer {
            Ok(stance) => cache.insert(LabelCacheEntry {
                key,
                stance,
                provider_id: provider.id(),
                prompt_version: version.clone(),
            })?,
            Err(e) => {
                failures.insert(key, e.to_string());
            }
        }
    }

    let mut out = Vec::with_capacity(trees.len());
    for tree in trees {
        if tree.len() < 2 {
            out.push(Err(LabelError::NoResponses(tree.event_id().to_string())));
            continue;
        }
        let mut stances = BTreeMap::new();
        let mut failed = None;
        for v in 1..tree.len() {
            let parent = tree.parent(v).expect("non-root");
            let key = cache_key(&tree.node(parent).text, &tree.node(v).text, parent == 0, &version);
            match cache.get(&key) {
                Some(e) => {
                    stances.insert(v, e.stance);
                }
                None => {
                    let msg = failures.get(&key).cloned().unwrap_or_default();
                    failed = Some(LabelError::Provider(ProviderError::Response(msg)));
                    break;
                }
            }
        }
        out.push(match failed {
            Some(e) => Err(e),
            None => Ok(StateLabels::from_stances(tree, stances)),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{build_tree, RawNode};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Scripted {
        answers: HashMap<String, &'static str>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(pairs: &[(&str, &'static str)]) -> Self {
            Self {
                answers: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl StanceProvider for Scripted {
        fn id(&self) -> String {
            "scripted".into()
        }
        fn prompt_version(&self) -> String {
            "t".into()
        }
        fn query(&self, _p: &str, child: &str, _r: bool) -> Result<String, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.answers
                .get(child)
                .map(|s| s.to_string())
                .ok_or_else(|| ProviderError::Transport("down".into()))
        }
    }

    fn tree(spec: &[(i64, Option<i64>, &str)]) -> PropagationTree {
        build_tree(
            "t",
            0,
            spec.iter().map(|&(i, p, t)| RawNode::new(i, p, t)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn prompts_follow_templates() {
        let root = render_prompt("Earthquake hit city X", "I saw it too", true);
        assert!(root.contains("believes the source post: 0"));
        assert!(root.contains("does not believe (or doubts) the source post: 1"));
        assert!(root.contains("only contains '@' someone(s)"));
        assert!(root.starts_with("- Source post: 'Earthquake hit city X'\n- Responsive post: 'I saw it too'\n"));
        let reply = render_prompt("a", "b", false);
        assert!(reply.contains("agrees with the source sentence: 0"));
        assert!(reply.contains("disagrees (or doubts) the source sentence:1"));
        assert_ne!(render_prompt("s", "r", true), render_prompt("s", "r", false));
    }

    #[test]
    fn placeholders_are_not_rescanned() {
        let out = render_prompt("{response_sentence}", "x{", true);
        assert!(out.starts_with("- Source post: '{response_sentence}'\n- Responsive post: 'x{'"));
    }

    #[test]
    fn stance_parsing() {
        assert_eq!(parse_stance("0").unwrap(), 0);
        assert_eq!(parse_stance(" 1\n").unwrap(), 1);
        assert_eq!(parse_stance("Label: 1.").unwrap(), 1);
        assert_eq!(parse_stance("10 then 0").unwrap(), 0);
        assert!(matches!(parse_stance("maybe"), Err(LabelError::UnparseableStance(_))));
    }

    #[test]
    fn mock_lexicon() {
        assert_eq!(mock_stance("x", "this is fake"), 1);
        assert_eq!(mock_stance("x", "so sad, praying"), 0);
        assert_eq!(mock_stance("x", "谣言别传"), 1);
        assert_eq!(mock_stance("x", "I believe it"), 0);
        assert_eq!(mock_stance("x", "FALSE!!"), 1);
    }

    #[test]
    fn chain_states_follow_parity() {
        let t = tree(&[(0, None, "src"), (1, Some(0), "a"), (2, Some(1), "b"), (3, Some(2), "c")]);
        let p = Scripted::new(&[("a", "0"), ("b", "1"), ("c", "1")]);
        let labels = label_tree(&t, &p, &mut LabelCache::in_memory(), &RetryPolicy::no_backoff()).unwrap();
        assert_eq!(labels.states.values().copied().collect::<Vec<_>>(), [0, 1, 0]);
        labels.validate(&t).unwrap();
    }

    #[test]
    fn star_states_copy_stances() {
        let t = tree(&[(0, None, "src"), (1, Some(0), "a"), (2, Some(0), "b"), (3, Some(0), "c")]);
        let p = Scripted::new(&[("a", "1"), ("b", "0"), ("c", "1")]);
        let labels = label_tree(&t, &p, &mut LabelCache::in_memory(), &RetryPolicy::no_backoff()).unwrap();
        assert_eq!(labels.states.values().copied().collect::<Vec<_>>(), [1, 0, 1]);
    }

    #[test]
    fn warm_cache_skips_provider() {
        let t = tree(&[(0, None, "src"), (1, Some(0), "a"), (2, Some(1), "b")]);
        let p = Scripted::new(&[("a", "1"), ("b", "1")]);
        let mut cache = LabelCache::in_memory();
        let first = label_tree(&t, &p, &mut cache, &RetryPolicy::no_backoff()).unwrap();
        assert_eq!(p.calls.load(Ordering::SeqCst), 2);
        let second = label_tree(&t, &p, &mut cache, &RetryPolicy::no_backoff()).unwrap();
        assert_eq!(p.calls.load(Ordering::SeqCst), 2);
        assert_eq!(first, second);
    }

    #[test]
    fn cache_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let t = tree(&[(0, None, "src"), (1, Some(0), "fake news"), (2, Some(1), "agree")]);
        {
            let mut cache = LabelCache::open(&path).unwrap();
            label_tree(&t, &MockProvider, &mut cache, &RetryPolicy::no_backoff()).unwrap();
        }
        let cache = LabelCache::open(&path).unwrap();
        assert_eq!(cache.len(), 2);
        let key = cache_key("src", "fake news", true, "lexicon-v1");
        let entry = cache.get(&key).unwrap();
        assert_eq!(entry.stance, 1);
        assert_eq!(entry.provider_id, "mock-lexicon");
    }

    #[test]
    fn retries_then_fails() {
        let t = tree(&[(0, None, "src"), (1, Some(0), "unknown")]);
        let p = Scripted::new(&[]);
        let err = label_tree(&t, &p, &mut LabelCache::in_memory(), &RetryPolicy::no_backoff()).unwrap_err();
        assert!(matches!(err, LabelError::Provider(_)));
        assert_eq!(p.calls.load(Ordering::SeqCst), 3);

        let garbled = Scripted::new(&[("unknown", "no idea")]);
        let err = label_tree(&t, &garbled, &mut LabelCache::in_memory(), &RetryPolicy::no_backoff()).unwrap_err();
        assert!(matches!(err, LabelError::UnparseableStance(_)));
    }

    #[test]
    fn root_only_tree_has_nothing_to_label() {
        let t = tree(&[(0, None, "src")]);
        assert!(matches!(
            label_tree(&t, &MockProvider, &mut LabelCache::in_memory(), &RetryPolicy::default()),
            Err(LabelError::NoResponses(_))
        ));
    }

    #[test]
    fn dataset_labeling_dedupes_and_isolates_failures() {
        let good = tree(&[(0, None, "src"), (1, Some(0), "a"), (2, Some(0), "a")]);
        let bad = tree(&[(0, None, "src"), (1, Some(0), "zzz")]);
        let p = Scripted::new(&[("a", "1")]);
        let mut cache = LabelCache::in_memory();
        let out = label_dataset(&[good.clone(), bad], &p, &mut cache, &RetryPolicy::no_backoff(), 4).unwrap();
        assert!(out[0].is_ok());
        assert!(out[1].is_err());
        // one distinct good pair, one failing pair tried three times
        assert_eq!(p.calls.load(Ordering::SeqCst), 4);
        let single = label_tree(&good, &p, &mut cache, &RetryPolicy::no_backoff()).unwrap();
        assert_eq!(out[0].as_ref().unwrap(), &single);
    }

    #[test]
    fn validate_catches_broken_parity() {
        let t = tree(&[(0, None, "src"), (1, Some(0), "a"), (2, Some(1), "b")]);
        let mut labels = StateLabels::from_states(&t, BTreeMap::from([(1, 1), (2, 1)]));
        assert_eq!(labels.stances[&2], 0);
        labels.validate(&t).unwrap();
        labels.states.insert(2, 0);
        assert_eq!(labels.validate(&t), Err(LabelMismatch::Parity(2)));
    }
}
