//! Synthetic labeled cascades with known state dynamics.
//!
//! Each class is a regime with its own transition rates. A tree grows by
//! attaching every new post to a uniformly chosen existing post whose depth is
//! below the regime's limit. Every response independently ends up in Support
//! with probability `alpha / (alpha + beta)` and in Denial otherwise; stances
//! are then derived so that root-path parity reproduces those states, and the
//! response text is chosen so the lexicon stance provider recovers them.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::format::LabeledTree;
use crate::stance::StateLabels;
use crate::tree::{build_tree, PropagationTree, RawNode};

const AGREE_TEXTS: [&str; 6] = [
    "i agree with this",
    "so sad, praying",
    "thanks for sharing",
    "this is true",
    "@friend look",
    "stay safe everyone",
];
const DENY_TEXTS: [&str; 6] = [
    "this is fake",
    "i doubt it",
    "rumor, do not share",
    "that is a lie",
    "false news again",
    "谣言别传",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeneratorError {
    #[error("regime {0}: {1}")]
    Regime(usize, String),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub alpha: f64,
    pub beta: f64,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub max_depth: usize,
}

impl Regime {
    pub fn support_probability(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Regime `i` produces events labeled `i`.
    pub regimes: Vec<Regime>,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Length of the two orthogonal state pattern vectors.
    pub signal: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            regimes: vec![
                Regime {
                    alpha: 0.6,
                    beta: 0.2,
                    min_nodes: 5,
                    max_nodes: 30,
                    max_depth: 4,
                },
                Regime {
                    alpha: 0.2,
                    beta: 0.6,
                    min_nodes: 10,
                    max_nodes: 50,
                    max_depth: 8,
                },
            ],
            feature_dim: 32,
            noise_sigma: 1.0,
            signal: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        if self.regimes.is_empty() || self.regimes.len() > 2 {
            return Err(GeneratorError::Config("need one or two regimes (binary labels)".into()));
        }
        if self.feature_dim < 2 {
            return Err(GeneratorError::Config("feature_dim must be at least 2".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(GeneratorError::Config("noise_sigma must be finite and >= 0".into()));
        }
        for (i, r) in self.regimes.iter().enumerate() {
            let bad = |m: &str| Err(GeneratorError::Regime(i, m.to_string()));
            if !(r.alpha >= 0.0 && r.beta >= 0.0 && r.alpha + r.beta > 0.0) {
                return bad("rates must be >= 0 with a positive sum");
            }
            if r.min_nodes == 0 || r.min_nodes > r.max_nodes {
                return bad("need 1 <= min_nodes <= max_nodes");
            }
            if r.max_depth == 0 && r.max_nodes > 1 {
                return bad("max_depth must be positive when responses are allowed");
            }
        }
        Ok(())
    }

    /// Orthogonal Support/Denial patterns: indicator vectors of the two halves of
    /// the feature space, scaled to length `signal`.
    pub fn patterns(&self) -> (Array1<f64>, Array1<f64>) {
        let h = self.feature_dim;
        let half = h / 2;
        let ms: Array1<f64> = Array1::from_shape_fn(h, |j| if j < half { 1.0 } else { 0.0 });
        let md: Array1<f64> = Array1::from_shape_fn(h, |j| if j >= half { 1.0 } else { 0.0 });
        let (ns, nd) = (ms.dot(&ms).sqrt(), md.dot(&md).sqrt());
        (ms * (self.signal / ns), md * (self.signal / nd))
    }
}

pub struct SyntheticGenerator {
    config: GeneratorConfig,
    support_pattern: Array1<f64>,
    denial_pattern: Array1<f64>,
}

impl SyntheticGenerator {
    pub fn new(config: GeneratorConfig) -> Result<Self, GeneratorError> {
        config.validate()?;
        let (support_pattern, denial_pattern) = config.patterns();
        Ok(Self {
            config,
            support_pattern,
            denial_pattern,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// One event of class `class`.
    pub fn generate<R: Rng>(
        &self,
        event_id: &str,
        class: usize,
        rng: &mut R,
    ) -> Result<(PropagationTree, StateLabels), GeneratorError> {
        let regime = self
            .config
            .regimes
            .get(class)
            .ok_or_else(|| GeneratorError::Config(format!("no regime for class {class}")))?;
        let n = rng.random_range(regime.min_nodes..=regime.max_nodes);

        let mut parent = vec![None; n];
        let mut depth = vec![0usize; n];
        let mut open: Vec<usize> = vec![0];
        for v in 1..n {
            let p = open[rng.random_range(0..open.len())];
            parent[v] = Some(p);
            depth[v] = depth[p] + 1;
            if depth[v] < regime.max_depth {
                open.push(v);
            }
        }

        let p_support = regime.support_probability();
        let mut state = vec![0u8; n];
        for s in state.iter_mut().skip(1) {
            *s = u8::from(!rng.random_bool(p_support));
        }

        let mut raw = Vec::with_capacity(n);
        raw.push(RawNode::new(0, None, format!("source post {event_id}")));
        for v in 1..n {
            let p = parent[v].expect("non-root");
            let parent_state = if p == 0 { 0 } else { state[p] };
            let texts = if state[v] ^ parent_state == 1 { &DENY_TEXTS } else { &AGREE_TEXTS };
            raw.push(RawNode::new(
                v as i64,
                Some(p as i64),
                texts[rng.random_range(0..texts.len())],
            ));
        }

        let h = self.config.feature_dim;
        let noise = Normal::new(0.0, self.config.noise_sigma)
            .map_err(|e| GeneratorError::Config(e.to_string()))?;
        let mut x = Array2::zeros((n, h));
        for (v, &st) in state.iter().enumerate().take(n) {
            let base = if v == 0 {
                (&self.support_pattern + &self.denial_pattern) * 0.5
            } else if st == 0 {
                self.support_pattern.clone()
            } else {
                self.denial_pattern.clone()
            };
            let mut row = x.row_mut(v);
            for j in 0..h {
                let eps = if self.config.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                row[j] = base[j] + eps;
            }
        }

        // Generation order is parent-before-child but not necessarily
        // breadth-first; carry rows and states over to canonical positions.
        let tree = build_tree(event_id, class as u8, raw)
            .map_err(|e| GeneratorError::Config(e.to_string()))?;
        let order = canonical_order(&depth);
        let mut xc = Array2::zeros((n, h));
        let mut states = BTreeMap::new();
        for (c, &o) in order.iter().enumerate() {
            xc.row_mut(c).assign(&x.row(o));
            if c > 0 {
                states.insert(c, state[o]);
            }
        }
        let labels = StateLabels::from_states(&tree, states);
        let tree = tree.with_features(xc).expect("row count matches");
        Ok((tree, labels))
    }

    /// `count` events, classes assigned round-robin, each drawn from its own
    /// stream of the seeded generator so the result does not depend on thread count.
    pub fn generate_dataset(&self, count: usize, seed: u64) -> Result<Vec<LabeledTree>, GeneratorError> {
        let classes = self.config.regimes.len();
        (0..count)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let (tree, labels) = self.generate(&format!("synth-{seed}-{i}"), i % classes, &mut rng)?;
                Ok(LabeledTree {
                    tree,
                    labels: Some(labels),
                })
            })
            .collect()
    }
}

/// Generation index of each canonical node: level by level, generation
/// index within a level, the same rule `build_tree` applies to ids.
fn canonical_order(depth: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..depth.len()).collect();
    order.sort_by_key(|&v| (depth[v], v));
    order
}
