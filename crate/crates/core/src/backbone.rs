//! Graph-convolution backbones over a propagation tree and the fusion head.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{add_outer, glorot, softmax};
use crate::tree::PropagationTree;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("tree '{0}' has no node features")]
    MissingFeatures(String),
    #[error("invalid backbone config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    #[default]
    Gcn,
    Resgcn,
    Bigcn,
}

impl std::str::FromStr for BackboneKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gcn" => Ok(Self::Gcn),
            "resgcn" => Ok(Self::Resgcn),
            "bigcn" => Ok(Self::Bigcn),
            other => Err(format!("unknown backbone '{other}' (expected gcn, resgcn or bigcn)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Gcn,
            layers: 2,
            hidden: 64,
            dropout: 0.2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(ModelError::Config("layers and hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            BackboneKind::Bigcn => 2 * self.hidden,
            _ => self.hidden,
        }
    }

    fn directions(&self) -> &'static [Direction] {
        match self.kind {
            BackboneKind::Bigcn => &[Direction::Down, Direction::Up],
            _ => &[Direction::Sym],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Each post aggregates from its parent.
    Down,
    /// Each post aggregates from its children.
    Up,
    Sym,
}

/// Row-sparse normalised adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseAdjacency {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// `A · x`.
    pub fn matmul(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows.len(), x.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            let mut dst = out.row_mut(i);
            for &(j, w) in row {
                dst.scaled_add(w, &x.row(j));
            }
        }
        out
    }

    /// `Aᵀ · x`.
    pub fn t_matmul(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows.len(), x.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out.row_mut(j).scaled_add(w, &x.row(i));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.rows.len();
        let mut m = Array2::zeros((n, n));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                m[[i, j]] += w;
            }
        }
        m
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` from a parent vector, with `D` the row sums of
/// `A + I`.
pub fn adjacency_from_parents(parents: &[Option<usize>], direction: Direction) -> SparseAdjacency {
    let n = parents.len();
    let mut rows: Vec<Vec<(usize, f64)>> = (0..n).map(|i| vec![(i, 1.0)]).collect();
    for (child, parent) in parents.iter().enumerate() {
        let Some(p) = *parent else { continue };
        match direction {
            Direction::Down => rows[child].push((p, 1.0)),
            Direction::Up => rows[p].push((child, 1.0)),
            Direction::Sym => {
                rows[child].push((p, 1.0));
                rows[p].push((child, 1.0));
            }
        }
    }
    let degree: Vec<f64> = rows.iter().map(|r| r.len() as f64).collect();
    for (i, row) in rows.iter_mut().enumerate() {
        row.sort_unstable_by_key(|&(j, _)| j);
        for (j, w) in row.iter_mut() {
            *w = 1.0 / (degree[i] * degree[*j]).sqrt();
        }
    }
    SparseAdjacency { rows }
}

pub fn normalized_adjacency(tree: &PropagationTree, direction: Direction) -> SparseAdjacency {
    adjacency_from_parents(&tree.parents(), direction)
}

/// Affine map `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((output, input)),
            b: Array1::zeros(output),
        }
    }

    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: glorot(output, input, rng),
            b: Array1::zeros(output),
        }
    }
}

/// One layer stack per adjacency direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub stacks: Vec<Vec<Dense>>,
}

impl BackboneParams {
    fn build(input: usize, cfg: &BackboneConfig, mut layer: impl FnMut(usize, usize) -> Dense) -> Self {
        let stacks = cfg
            .directions()
            .iter()
            .map(|_| {
                (0..cfg.layers)
                    .map(|l| layer(if l == 0 { input } else { cfg.hidden }, cfg.hidden))
                    .collect()
            })
            .collect();
        Self { stacks }
    }

    pub fn zeros(input: usize, cfg: &BackboneConfig) -> Self {
        Self::build(input, cfg, Dense::zeros)
    }

    pub fn init<R: Rng>(input: usize, cfg: &BackboneConfig, rng: &mut R) -> Self {
        Self::build(input, cfg, |i, o| Dense::init(i, o, rng))
    }

    pub fn input_dim(&self) -> usize {
        self.stacks[0][0].w.ncols()
    }
}

#[derive(Debug, Clone)]
struct LayerTrace {
    mask: Option<Array2<f64>>,
    /// `A · h_in`
    propagated: Array2<f64>,
    pre: Array2<f64>,
}

#[derive(Debug, Clone)]
struct StackTrace {
    adjacency: SparseAdjacency,
    layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone)]
pub struct BackboneTrace {
    pub x_f: Array1<f64>,
    stacks: Vec<StackTrace>,
    nodes: usize,
}

fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v.max(0.0))
}

fn forward_stack<R: Rng>(
    adjacency: SparseAdjacency,
    x: &Array2<f64>,
    layers: &[Dense],
    residual: bool,
    dropout: Option<(f64, &mut R)>,
) -> (Array1<f64>, StackTrace) {
    let mut dropout = dropout;
    let mut h = x.clone();
    let mut trace = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let (h_in, mask) = match dropout.as_mut() {
            Some((p, rng)) if *p > 0.0 => {
                let keep = 1.0 - *p;
                let mask = Array2::from_shape_simple_fn(h.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                (&h * &mask, Some(mask))
            }
            _ => (h.clone(), None),
        };
        let propagated = adjacency.matmul(&h_in);
        let pre = propagated.dot(&layer.w.t()) + &layer.b;
        let act = relu(&pre);
        h = if residual && l > 0 { act + &h } else { act };
        trace.push(LayerTrace {
            mask,
            propagated,
            pre,
        });
    }
    let pooled = h.mean_axis(Axis(0)).expect("at least one node");
    (
        pooled,
        StackTrace {
            adjacency,
            layers: trace,
        },
    )
}

/// Backbone over an explicit parent vector and feature matrix in matching
/// order. Pass an RNG to apply dropout (training mode).
pub fn backbone_forward_parts<R: Rng>(
    parents: &[Option<usize>],
    x: &Array2<f64>,
    cfg: &BackboneConfig,
    params: &BackboneParams,
    mut rng: Option<&mut R>,
) -> Result<BackboneTrace, ModelError> {
    if x.nrows() != parents.len() || x.nrows() == 0 {
        return Err(ModelError::Shape(format!(
            "{} feature rows for {} nodes",
            x.nrows(),
            parents.len()
        )));
    }
    if x.ncols() != params.input_dim() {
        return Err(ModelError::Shape(format!(
            "features have {} columns, first layer expects {}",
            x.ncols(),
            params.input_dim()
        )));
    }
    let residual = cfg.kind == BackboneKind::Resgcn;
    let mut pooled = Vec::new();
    let mut stacks = Vec::new();
    for (dir, layers) in cfg.directions().iter().zip(&params.stacks) {
        let adjacency = adjacency_from_parents(parents, *dir);
        let dropout = rng.as_deref_mut().map(|r| (cfg.dropout, r));
        let (p, trace) = forward_stack(adjacency, x, layers, residual, dropout);
        pooled.push(p);
        stacks.push(trace);
    }
    let views: Vec<_> = pooled.iter().map(|p| p.view()).collect();
    let x_f = concatenate(Axis(0), &views).expect("1-d pooled outputs");
    Ok(BackboneTrace {
        x_f,
        stacks,
        nodes: x.nrows(),
    })
}

pub fn backbone_forward<R: Rng>(
    tree: &PropagationTree,
    cfg: &BackboneConfig,
    params: &BackboneParams,
    rng: Option<&mut R>,
) -> Result<BackboneTrace, ModelError> {
    let x = tree
        .features()
        .ok_or_else(|| ModelError::MissingFeatures(tree.event_id().to_string()))?;
    backbone_forward_parts(&tree.parents(), x, cfg, params, rng)
}

/// Accumulates parameter gradients given `g_xf = dL/dx_f`.
pub fn backbone_backward(
    trace: &BackboneTrace,
    cfg: &BackboneConfig,
    params: &BackboneParams,
    g_xf: &Array1<f64>,
    grads: &mut BackboneParams,
) {
    let residual = cfg.kind == BackboneKind::Resgcn;
    let hidden = cfg.hidden;
    for (k, stack) in trace.stacks.iter().enumerate() {
        let g_pool = g_xf.slice(s![k * hidden..(k + 1) * hidden]);
        let mut g_h = Array2::from_shape_fn((trace.nodes, hidden), |(_, j)| {
            g_pool[j] / trace.nodes as f64
        });
        for l in (0..stack.layers.len()).rev() {
            let lt = &stack.layers[l];
            let layer = &params.stacks[k][l];
            let g_pre = &g_h * &lt.pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let g = &mut grads.stacks[k][l];
            g.w += &g_pre.t().dot(&lt.propagated);
            g.b += &g_pre.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            let g_prop = g_pre.dot(&layer.w);
            let mut g_in = stack.adjacency.t_matmul(&g_prop);
            if let Some(mask) = &lt.mask {
                g_in *= mask;
            }
            if residual {
                g_in += &g_h;
            }
            g_h = g_in;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `2 × d`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl HeadParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            w: Array2::zeros((2, d)),
            b: Array1::zeros(2),
        }
    }

    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        Self {
            w: glorot(2, d, rng),
            b: Array1::zeros(2),
        }
    }
}

/// Class distribution over (non-rumor, rumor).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: [f64; 2],
    pub logits: [f64; 2],
}

impl Prediction {
    pub fn rumor_probability(&self) -> f64 {
        self.probs[1]
    }
}

pub fn fuse_predict(
    x_f: &Array1<f64>,
    x_g: &Array1<f64>,
    head: &HeadParams,
) -> Result<Prediction, ModelError> {
    if x_f.len() != x_g.len() || x_f.len() != head.w.ncols() {
        return Err(ModelError::Shape(format!(
            "x_f {} / x_g {} / head {}",
            x_f.len(),
            x_g.len(),
            head.w.ncols()
        )));
    }
    let fused = x_f + x_g;
    let z = head.w.dot(&fused) + &head.b;
    let logits = [z[0], z[1]];
    Ok(Prediction {
        probs: softmax(logits),
        logits,
    })
}

/// Gradient of the head given `g_logits`; returns `dL/d(x_f + x_g)`.
pub fn head_backward(
    x_f: &Array1<f64>,
    x_g: &Array1<f64>,
    head: &HeadParams,
    g_logits: &[f64; 2],
    grads: &mut HeadParams,
) -> Array1<f64> {
    let fused = x_f + x_g;
    let g = Array1::from(g_logits.to_vec());
    add_outer(&mut grads.w, &g, &fused);
    grads.b += &g;
    head.w.t().dot(&g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{build_tree, RawNode};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    fn sample_tree() -> PropagationTree {
        build_tree(
            "t",
            1,
            vec![
                RawNode::new(0, None, "a"),
                RawNode::new(1, Some(0), "b"),
                RawNode::new(2, Some(0), "c"),
                RawNode::new(3, Some(1), "d"),
                RawNode::new(4, Some(3), "e"),
            ],
        )
        .unwrap()
    }

    #[test]
    fn adjacency_examples() {
        let single = adjacency_from_parents(&[None], Direction::Sym).to_dense();
        assert_eq!(single, ndarray::arr2(&[[1.0]]));
        let pair = adjacency_from_parents(&[None, Some(0)], Direction::Sym).to_dense();
        assert_eq!(pair, ndarray::arr2(&[[0.5, 0.5], [0.5, 0.5]]));
    }

    #[test]
    fn down_and_up_are_transposed_patterns() {
        let parents = sample_tree().parents();
        let pattern = |d| adjacency_from_parents(&parents, d).to_dense().mapv(|v| f64::from(v != 0.0));
        assert_eq!(pattern(Direction::Down), pattern(Direction::Up).t());
        // 1 + degree entries per row of the symmetric pattern
        let sym = pattern(Direction::Sym);
        let degree = [2.0, 2.0, 1.0, 2.0, 1.0];
        for (i, d) in degree.iter().enumerate() {
            assert_eq!(sym.row(i).sum(), 1.0 + d);
        }
    }

    #[test]
    fn sparse_transpose_product_matches_dense() {
        let a = adjacency_from_parents(&sample_tree().parents(), Direction::Down);
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64 - 4.0);
        let diff = a.matmul(&x) - a.to_dense().dot(&x);
        assert!(diff.iter().all(|v| v.abs() < 1e-12));
        let diff = a.t_matmul(&x) - a.to_dense().t().dot(&x);
        assert!(diff.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_node_and_zero_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = BackboneConfig {
            kind: BackboneKind::Gcn,
            layers: 1,
            hidden: 3,
            dropout: 0.0,
        };
        let params = BackboneParams::init(2, &cfg, &mut rng);
        let x = ndarray::arr2(&[[0.5, -1.0]]);
        let out = backbone_forward_parts::<NoRng>(&[None], &x, &cfg, &params, None).unwrap();
        let l = &params.stacks[0][0];
        assert_eq!(out.x_f, (l.w.dot(&x.row(0)) + &l.b).mapv(|v| v.max(0.0)));

        let zero = BackboneParams::zeros(2, &cfg);
        let out = backbone_forward_parts::<NoRng>(&[None, Some(0)], &Array2::zeros((2, 2)), &cfg, &zero, None)
            .unwrap();
        assert_eq!(out.x_f, Array1::<f64>::zeros(3));
        assert!(backbone_forward_parts::<NoRng>(&[None], &Array2::zeros((1, 4)), &cfg, &params, None).is_err());
    }

    #[test]
    fn permutation_invariance_for_all_kinds() {
        let tree = sample_tree();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = crate::nn::glorot(5, 4, &mut rng);
        let parents = tree.parents();
        for kind in [BackboneKind::Gcn, BackboneKind::Resgcn, BackboneKind::Bigcn] {
            let cfg = BackboneConfig {
                kind,
                layers: 3,
                hidden: 6,
                dropout: 0.0,
            };
            let params = BackboneParams::init(4, &cfg, &mut rng);
            let base = backbone_forward_parts::<NoRng>(&parents, &x, &cfg, &params, None).unwrap();
            assert_eq!(base.x_f.len(), cfg.output_dim());
            for _ in 0..10 {
                let mut perm: Vec<usize> = (0..5).collect();
                perm.shuffle(&mut rng);
                // new position k holds old node perm[k]
                let mut inv = [0; 5];
                for (k, &o) in perm.iter().enumerate() {
                    inv[o] = k;
                }
                let pp: Vec<Option<usize>> = perm.iter().map(|&o| parents[o].map(|p| inv[p])).collect();
                let px = Array2::from_shape_fn((5, 4), |(k, j)| x[[perm[k], j]]);
                let out = backbone_forward_parts::<NoRng>(&pp, &px, &cfg, &params, None).unwrap();
                for (a, b) in out.x_f.iter().zip(&base.x_f) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fusion_examples() {
        let head = HeadParams::zeros(3);
        let xf = Array1::from(vec![1.0, 2.0, 3.0]);
        let xg = Array1::from(vec![-0.5, 0.0, 4.0]);
        assert_eq!(fuse_predict(&xf, &xg, &head).unwrap().probs, [0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = HeadParams::init(3, &mut rng);
        assert_eq!(fuse_predict(&xf, &xg, &head).unwrap(), fuse_predict(&xg, &xf, &head).unwrap());
        let with_zero = fuse_predict(&xf, &Array1::zeros(3), &head).unwrap();
        assert_eq!(with_zero.logits[0], head.w.row(0).dot(&xf));
        assert!(fuse_predict(&xf, &Array1::zeros(2), &head).is_err());
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let tree = sample_tree();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = crate::nn::glorot(5, 3, &mut rng) * 3.0;
        let parents = tree.parents();
        for kind in [BackboneKind::Gcn, BackboneKind::Resgcn, BackboneKind::Bigcn] {
            let cfg = BackboneConfig {
                kind,
                layers: 2,
                hidden: 4,
                dropout: 0.0,
            };
            let mut params = BackboneParams::init(3, &cfg, &mut rng);
            for st in &mut params.stacks {
                for l in st {
                    l.b.fill(0.1);
                }
            }
            let weights = crate::nn::uniform_vec(cfg.output_dim(), 1.0, &mut rng);
            let loss = |p: &BackboneParams| {
                backbone_forward_parts::<NoRng>(&parents, &x, &cfg, p, None).unwrap().x_f.dot(&weights)
            };
            let trace = backbone_forward_parts::<NoRng>(&parents, &x, &cfg, &params, None).unwrap();
            let mut grads = BackboneParams::zeros(3, &cfg);
            backbone_backward(&trace, &cfg, &params, &weights, &mut grads);
            for k in 0..params.stacks.len() {
                for l in 0..cfg.layers {
                    let shape = params.stacks[k][l].w.dim();
                    for i in 0..shape.0 {
                        for j in 0..shape.1 {
                            let mut p = params.clone();
                            p.stacks[k][l].w[[i, j]] += 1e-6;
                            let mut m = params.clone();
                            m.stacks[k][l].w[[i, j]] -= 1e-6;
                            let fd = (loss(&p) - loss(&m)) / 2e-6;
                            let an = grads.stacks[k][l].w[[i, j]];
                            assert!((fd - an).abs() < 1e-6, "{kind:?} w[{k}][{l}][{i},{j}] {fd} vs {an}");
                        }
                        let mut p = params.clone();
                        p.stacks[k][l].b[i] += 1e-6;
                        let mut m = params.clone();
                        m.stacks[k][l].b[i] -= 1e-6;
                        let fd = (loss(&p) - loss(&m)) / 2e-6;
                        assert!((fd - grads.stacks[k][l].b[i]).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
