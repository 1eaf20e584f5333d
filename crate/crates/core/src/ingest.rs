//! Dataset ingestion: format adapters, node featurization and splitting.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{read_ndtree, FormatError, LabeledTree};
use crate::tree::{build_tree, PropagationTree, RawNode};

pub const DEFAULT_FEATURE_DIM: usize = 200;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unknown dataset format {0:?} (expected native, weibo-style or pheme-style)")]
    UnknownFormat(String),
    #[error("no valid events found in {0}")]
    EmptyDataset(PathBuf),
    #[error("split needs at least 5 events, got {0}")]
    TooSmall(usize),
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios((f64, f64, f64)),
    #[error("embedding table line {line}: {message}")]
    EmbeddingTable { line: usize, message: String },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    Native,
    WeiboStyle,
    PhemeStyle,
}

impl FromStr for DatasetFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(Self::Native),
            "weibo-style" | "weibo" => Ok(Self::WeiboStyle),
            "pheme-style" | "pheme" => Ok(Self::PhemeStyle),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Default)]
pub struct Dataset {
    pub trees: Vec<LabeledTree>,
    pub skipped: usize,
}

/// Parses a dataset in one of the supported layouts.
///
/// * `native`: a `.ndtree` file.
/// * `weibo-style`: a directory holding an index file (`*.txt`, one
///   `eid:<id>\tlabel:<0|1>\t...` line per event) and a subdirectory of
///   `<eid>.json` files, each a JSON array of posts with `mid`, `parent`
///   (`null` for the source), `text` and optional `t`.
/// * `pheme-style`: the thread layout
///   `<event>/<rumours|non-rumours>/<thread>/{source-tweets,reactions,structure.json}`;
///   tweets carry `id_str` and `text`, edges come from the nested
///   `structure.json`, labels from the enclosing directory name.
///
/// Invalid events are skipped and counted.
pub fn parse_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset, IngestError> {
    let dataset = match format {
        DatasetFormat::Native => {
            let out = read_ndtree(path)?;
            Dataset {
                trees: out.trees,
                skipped: out.skipped,
            }
        }
        DatasetFormat::WeiboStyle => parse_weibo(path)?,
        DatasetFormat::PhemeStyle => parse_pheme(path)?,
    };
    if dataset.skipped > 0 {
        log::warn!("{}: skipped {} malformed events", path.display(), dataset.skipped);
    }
    if dataset.trees.is_empty() {
        return Err(IngestError::EmptyDataset(path.to_path_buf()));
    }
    Ok(dataset)
}

#[derive(Deserialize)]
struct WeiboPost {
    mid: serde_json::Value,
    parent: Option<serde_json::Value>,
    #[serde(default)]
    text: String,
    #[serde(default)]
    t: Option<f64>,
}

fn json_id(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn intern(ids: &mut HashMap<String, i64>, key: String) -> i64 {
    let next = ids.len() as i64;
    *ids.entry(key).or_insert(next)
}

fn parse_weibo(dir: &Path) -> Result<Dataset, IngestError> {
    let mut labels: BTreeMap<String, u8> = BTreeMap::new();
    let mut json_dirs = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            json_dirs.push(p);
        } else if p.extension().is_some_and(|e| e == "txt") {
            for line in BufReader::new(File::open(&p)?).lines() {
                let line = line?;
                let mut eid = None;
                let mut label = None;
                for field in line.split_whitespace() {
                    if let Some(v) = field.strip_prefix("eid:") {
                        eid = Some(v.to_string());
                    } else if let Some(v) = field.strip_prefix("label:") {
                        label = v.parse::<u8>().ok();
                    }
                }
                if let (Some(e), Some(l)) = (eid, label) {
                    labels.insert(e, l);
                }
            }
        }
    }
    json_dirs.sort();
    let mut ds = Dataset::default();
    for (eid, label) in labels {
        let Some(file) = json_dirs
            .iter()
            .map(|d| d.join(format!("{eid}.json")))
            .find(|f| f.exists())
        else {
            ds.skipped += 1;
            continue;
        };
        let parsed = fs::read_to_string(&file)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str::<Vec<WeiboPost>>(&s).map_err(|e| e.to_string()))
            .and_then(|posts| {
                let mut ids = HashMap::new();
                let raw = posts
                    .into_iter()
                    .map(|p| {
                        let id = intern(&mut ids, json_id(&p.mid));
                        let parent = p
                            .parent
                            .filter(|v| !v.is_null())
                            .map(|v| intern(&mut ids, json_id(&v)));
                        RawNode {
                            id,
                            parent,
                            text: p.text,
                            timestamp: p.t,
                        }
                    })
                    .collect::<Vec<_>>();
                build_tree(eid.clone(), label, raw).map_err(|e| e.to_string())
            });
        match parsed {
            Ok(t) => ds.trees.push(LabeledTree::unlabeled(t)),
            Err(e) => {
                log::warn!("event {eid}: {e}");
                ds.skipped += 1;
            }
        }
    }
    Ok(ds)
}

fn read_tweet(path: &Path) -> Option<(String, String, Option<String>)> {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).ok()?).ok()?;
    let id = v
        .get("id_str")
        .and_then(|x| x.as_str())
        .map(str::to_string)
        .or_else(|| v.get("id").map(json_id))?;
    let text = v.get("text").and_then(|x| x.as_str()).unwrap_or_default().to_string();
    let reply_to = v
        .get("in_reply_to_status_id_str")
        .and_then(|x| x.as_str())
        .map(str::to_string);
    Some((id, text, reply_to))
}

fn structure_edges(node: &serde_json::Value, parent: &str, out: &mut Vec<(String, String)>) {
    if let serde_json::Value::Object(map) = node {
        for (child, sub) in map {
            out.push((parent.to_string(), child.clone()));
            structure_edges(sub, child, out);
        }
    }
}

fn pheme_thread(thread: &Path, label: u8) -> Result<PropagationTree, String> {
    let mut tweets: HashMap<String, (String, Option<String>)> = HashMap::new();
    let mut source = None;
    for (sub, is_source) in [("source-tweets", true), ("reactions", false)] {
        let Ok(entries) = fs::read_dir(thread.join(sub)) else {
            continue;
        };
        for entry in entries.flatten() {
            if let Some((id, text, reply)) = read_tweet(&entry.path()) {
                if is_source {
                    source = Some(id.clone());
                }
                tweets.insert(id, (text, reply));
            }
        }
    }
    let source = source.ok_or("no source tweet")?;

    let mut parent_of: HashMap<String, String> = HashMap::new();
    if let Ok(s) = fs::read_to_string(thread.join("structure.json")) {
        let v: serde_json::Value = serde_json::from_str(&s).map_err(|e| e.to_string())?;
        if let Some(sub) = v.get(&source) {
            let mut edges = Vec::new();
            structure_edges(sub, &source, &mut edges);
            for (p, c) in edges {
                parent_of.entry(c).or_insert(p);
            }
        }
    }
    for (id, (_, reply)) in &tweets {
        if let Some(r) = reply {
            parent_of.entry(id.clone()).or_insert_with(|| r.clone());
        }
    }

    // Keep reactions whose whole ancestor chain is present on disk.
    let mut ids = HashMap::new();
    let src_id = intern(&mut ids, source.clone());
    let mut raw = vec![RawNode::new(src_id, None, tweets[&source].0.clone())];
    let mut keys: Vec<&String> = tweets.keys().filter(|k| **k != source).collect();
    keys.sort();
    for key in keys {
        let mut cur = key.clone();
        let mut ok = false;
        for _ in 0..tweets.len() {
            match parent_of.get(&cur) {
                Some(p) if *p == source => {
                    ok = true;
                    break;
                }
                Some(p) if tweets.contains_key(p) => cur = p.clone(),
                _ => break,
            }
        }
        if ok {
            let id = intern(&mut ids, key.clone());
            let parent = intern(&mut ids, parent_of[key].clone());
            raw.push(RawNode::new(id, Some(parent), tweets[key].0.clone()));
        }
    }
    let event = thread
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    build_tree(event, label, raw).map_err(|e| e.to_string())
}

fn parse_pheme(root: &Path) -> Result<Dataset, IngestError> {
    let mut threads: Vec<(PathBuf, u8)> = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| std::io::Error::other(e.to_string()))?;
        let p = entry.path();
        if !entry.file_type().is_dir() || !p.join("source-tweets").is_dir() {
            continue;
        }
        let label = p.ancestors().skip(1).find_map(|a| {
            match a.file_name()?.to_str()? {
                "rumours" => Some(1),
                "non-rumours" => Some(0),
                _ => None,
            }
        });
        if let Some(l) = label {
            threads.push((p.to_path_buf(), l));
        }
    }
    let mut ds = Dataset::default();
    for (thread, label) in threads {
        match pheme_thread(&thread, label) {
            Ok(t) => ds.trees.push(LabeledTree::unlabeled(t)),
            Err(e) => {
                log::warn!("{}: {e}", thread.display());
                ds.skipped += 1;
            }
        }
    }
    Ok(ds)
}

/// Lowercases and splits on whitespace and punctuation; CJK characters become
/// one token each.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if is_cjk(ch) {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            tokens.push(ch.to_string());
        } else if ch.is_alphanumeric() {
            cur.push(ch);
        } else if !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x2A6DF | 0xF900..=0xFAFF
        | 0x3040..=0x30FF | 0xAC00..=0xD7AF)
}

/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Featurizer {
    /// Token counts hashed into `dim` buckets, rows L2-normalized.
    Hashing { dim: usize },
    /// Mean of pretrained token vectors; unknown tokens are ignored.
    EmbeddingTable {
        dim: usize,
        table: HashMap<String, Array1<f64>>,
    },
}

impl Default for Featurizer {
    fn default() -> Self {
        Featurizer::Hashing {
            dim: DEFAULT_FEATURE_DIM,
        }
    }
}

impl Featurizer {
    pub fn dim(&self) -> usize {
        match self {
            Featurizer::Hashing { dim } | Featurizer::EmbeddingTable { dim, .. } => *dim,
        }
    }

    /// Loads a `token<TAB>v1 v2 ... vh` table.
    pub fn load_embedding_table(path: &Path) -> Result<Self, IngestError> {
        let mut table = HashMap::new();
        let mut dim = None;
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| IngestError::EmbeddingTable { line: i + 1, message };
            let (token, values) = line.split_once('\t').ok_or_else(|| err("missing tab".into()))?;
            let v: Vec<f64> = values
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e: std::num::ParseFloatError| err(e.to_string()))?;
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => return Err(err(format!("expected {d} values, got {}", v.len()))),
                _ => {}
            }
            table.insert(token.to_lowercase(), Array1::from(v));
        }
        let dim = dim.ok_or_else(|| IngestError::EmbeddingTable {
            line: 0,
            message: "empty table".into(),
        })?;
        Ok(Featurizer::EmbeddingTable { dim, table })
    }

    pub fn featurize_text(&self, text: &str) -> Array1<f64> {
        let tokens = tokenize(text);
        match self {
            Featurizer::Hashing { dim } => {
                let mut row = Array1::<f64>::zeros(*dim);
                for tok in &tokens {
                    row[(fnv1a(tok.as_bytes()) % *dim as u64) as usize] += 1.0;
                }
                let norm = row.dot(&row).sqrt();
                if norm > 0.0 {
                    row /= norm;
                }
                row
            }
            Featurizer::EmbeddingTable { dim, table } => {
                let mut row = Array1::zeros(*dim);
                let mut hits = 0usize;
                for tok in &tokens {
                    if let Some(v) = table.get(tok) {
                        row += v;
                        hits += 1;
                    }
                }
                if hits > 0 {
                    row /= hits as f64;
                }
                row
            }
        }
    }

    pub fn featurize(&self, tree: PropagationTree) -> PropagationTree {
        let mut x = Array2::zeros((tree.len(), self.dim()));
        for (i, node) in tree.nodes().iter().enumerate() {
            x.row_mut(i).assign(&self.featurize_text(&node.text));
        }
        tree.with_features(x).expect("one row per node")
    }

    /// Featurizes trees that do not already carry features.
    pub fn featurize_missing(&self, trees: Vec<LabeledTree>) -> Vec<LabeledTree> {
        trees
            .into_par_iter()
            .map(|mut t| {
                if t.tree.features().is_none() {
                    t.tree = self.featurize(t.tree);
                }
                t
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: (0.6, 0.2, 0.2),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn select<T: Clone>(&self, items: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect();
        (pick(&self.train), pick(&self.val), pick(&self.test))
    }
}

/// Largest-remainder allocation of `total` items, class quotas `ratio * size`,
/// capped by `room`.
fn allocate(total: usize, ratio: f64, sizes: &[usize], room: &[usize]) -> Vec<usize> {
    let exact: Vec<f64> = sizes.iter().map(|&s| ratio * s as f64).collect();
    let mut alloc: Vec<usize> = exact
        .iter()
        .zip(room)
        .map(|(&e, &r)| (e.floor() as usize).min(r))
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(alloc.iter().sum());
    while left > 0 {
        let before = left;
        for &c in &order {
            if left > 0 && alloc[c] < room[c] {
                alloc[c] += 1;
                left -= 1;
            }
        }
        if left == before {
            break;
        }
    }
    alloc
}

/// Label-stratified split. Validation and test sizes are the floors of their
/// ratios; the rounding remainder goes to training.
pub fn split(labels: &[u8], spec: &SplitSpec) -> Result<SplitIndices, IngestError> {
    let (tr, va, te) = spec.ratios;
    if tr <= 0.0 || va <= 0.0 || te <= 0.0 || (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(IngestError::BadRatios(spec.ratios));
    }
    let n = labels.len();
    if n < 5 {
        return Err(IngestError::TooSmall(n));
    }
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
    }
    let sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
    let n_val = (n as f64 * va + 1e-9).floor() as usize;
    let n_test = (n as f64 * te + 1e-9).floor() as usize;
    let val_alloc = allocate(n_val, va, &sizes, &sizes);
    let room: Vec<usize> = sizes.iter().zip(&val_alloc).map(|(s, v)| s - v).collect();
    let test_alloc = allocate(n_test, te, &sizes, &room);

    let mut out = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (c, members) in by_class.values().enumerate() {
        let (v, t) = (val_alloc[c], test_alloc[c]);
        out.val.extend(&members[..v]);
        out.test.extend(&members[v..v + t]);
        out.train.extend(&members[v + t..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hashing_features() {
        let f = Featurizer::default();
        let empty = f.featurize_text("");
        assert_eq!(empty.len(), 200);
        assert!(empty.iter().all(|&v| v == 0.0));

        let row = f.featurize_text("a a b");
        let nonzero: Vec<f64> = row.iter().copied().filter(|&v| v != 0.0).collect();
        assert!(nonzero.len() <= 2);
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        let a = row[(fnv1a(b"a") % 200) as usize];
        let b = row[(fnv1a(b"b") % 200) as usize];
        assert!((a - 2.0 / 5f64.sqrt()).abs() < 1e-12);
        assert!((b - 1.0 / 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn tokenizer_handles_mixed_scripts() {
        assert_eq!(tokenize("Hello, World! 谣言别传"), ["hello", "world", "谣", "言", "别", "传"]);
        assert_eq!(tokenize("@user:fake-news"), ["user", "fake", "news"]);
    }

    #[test]
    fn featurize_keeps_topology() {
        let t = build_tree(
            "e",
            1,
            vec![
                RawNode::new(0, None, "same words"),
                RawNode::new(1, Some(0), "same words"),
                RawNode::new(2, Some(0), ""),
            ],
        )
        .unwrap();
        let f = Featurizer::Hashing { dim: 16 };
        let out = f.featurize(t.clone());
        let x = out.features().unwrap();
        assert_eq!(x.dim(), (3, 16));
        assert_eq!(x.row(0), x.row(1));
        assert_eq!(out.clone().without_features(), t);
    }

    #[test]
    fn embedding_table_mode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        fs::write(&path, "cat\t1 0 0\ndog\t0 1 0\n").unwrap();
        let f = Featurizer::load_embedding_table(&path).unwrap();
        assert_eq!(f.dim(), 3);
        assert_eq!(f.featurize_text("Cat dog bird").to_vec(), [0.5, 0.5, 0.0]);
        assert_eq!(f.featurize_text("bird").to_vec(), [0.0, 0.0, 0.0]);

        fs::write(&path, "cat\t1 0 0\ndog\t0 1\n").unwrap();
        assert!(matches!(
            Featurizer::load_embedding_table(&path),
            Err(IngestError::EmbeddingTable { line: 2, .. })
        ));
    }

    #[test]
    fn split_sizes_and_balance() {
        let labels: Vec<u8> = (0..10).map(|i| (i % 2) as u8).collect();
        let spec = SplitSpec { seed: 7, ..Default::default() };
        let s = split(&labels, &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        for part in [&s.val, &s.test] {
            let pos = part.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(pos, 1);
        }
        assert_eq!(split(&labels, &spec).unwrap(), s);
        assert!(matches!(split(&labels[..4], &spec), Err(IngestError::TooSmall(4))));
    }

    #[test]
    fn split_at_dataset_scale() {
        let mut labels = vec![0u8; 3185];
        labels.extend(std::iter::repeat_n(1u8, 2852));
        let s = split(&labels, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (3623, 1207, 1207));
    }

    #[test]
    fn format_names() {
        assert_eq!("pheme-style".parse::<DatasetFormat>().unwrap(), DatasetFormat::PhemeStyle);
        assert!(matches!("csv".parse::<DatasetFormat>(), Err(IngestError::UnknownFormat(_))));
    }

    proptest! {
        #[test]
        fn split_partitions_and_stratifies(labels in proptest::collection::vec(0u8..2, 5..300), seed in any::<u64>()) {
            let s = split(&labels, &SplitSpec { ratios: (0.6, 0.2, 0.2), seed }).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
            for (part, r) in [(&s.val, 0.2), (&s.test, 0.2)] {
                let got = part.iter().filter(|&&i| labels[i] == 1).count() as f64;
                prop_assert!((got - pos * r).abs() <= 1.0 + 1e-9, "got {} expected {}", got, pos * r);
            }
        }

        #[test]
        fn hashing_rows_are_unit_or_zero(text in "\\PC{0,60}") {
            let row = Featurizer::Hashing { dim: 32 }.featurize_text(&text);
            let norm = row.dot(&row).sqrt();
            prop_assert!(norm <= 1.0 + 1e-12);
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-12);
        }
    }
}
