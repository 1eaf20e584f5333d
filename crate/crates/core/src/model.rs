//! The full classifier: backbone embedding plus encoder embedding, fused by a
//! linear head. Also the flat parameter view used by the optimiser and the
//! on-disk checkpoint.

use std::path::Path;

use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    backbone_backward, backbone_forward, fuse_predict, head_backward, BackboneConfig, BackboneParams,
    BackboneTrace, HeadParams, ModelError, Prediction,
};
use crate::encoder::{encode, encoder_backward, Dynamics, EncoderParams, Encoding};
use crate::tree::PropagationTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub dynamics: Dynamics,
    /// Without the encoder the head sees only the backbone embedding.
    #[serde(default = "default_true")]
    pub use_encoder: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub backbone: BackboneParams,
    pub head: HeadParams,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.backbone.output_dim();
        Self {
            encoder: EncoderParams::zeros(cfg.input_dim, d),
            backbone: BackboneParams::zeros(cfg.input_dim, &cfg.backbone),
            head: HeadParams::zeros(d),
        }
    }

    pub fn init<R: Rng>(cfg: &ModelConfig, alpha0: f64, beta0: f64, rng: &mut R) -> Self {
        let d = cfg.backbone.output_dim();
        Self {
            backbone: BackboneParams::init(cfg.input_dim, &cfg.backbone, rng),
            head: HeadParams::init(d, rng),
            encoder: EncoderParams::init(cfg.input_dim, d, alpha0, beta0, rng),
        }
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        let e = &self.encoder;
        f("encoder.w_u0", slice1(&e.w_u0));
        f("encoder.b_s", slice1(&e.b_s));
        f("encoder.b_d", slice1(&e.b_d));
        f("encoder.w_u", slice2(&e.w_u));
        f("encoder.w_s", slice2(&e.w_s));
        f("encoder.w_d", slice2(&e.w_d));
        f("encoder.w_x", slice2(&e.w_x));
        f("encoder.score_u", slice1(&e.score_u));
        f("encoder.score_s", slice1(&e.score_s));
        f("encoder.score_d", slice1(&e.score_d));
        f("encoder.alpha_raw", std::slice::from_ref(&e.alpha_raw));
        f("encoder.beta_raw", std::slice::from_ref(&e.beta_raw));
        for (k, stack) in self.backbone.stacks.iter().enumerate() {
            for (l, layer) in stack.iter().enumerate() {
                f(&format!("backbone.{k}.{l}.w"), slice2(&layer.w));
                f(&format!("backbone.{k}.{l}.b"), slice1(&layer.b));
            }
        }
        f("head.w", slice2(&self.head.w));
        f("head.b", slice1(&self.head.b));
    }

    /// Mutable counterpart of [`ModelParams::visit`], same order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        let e = &mut self.encoder;
        f("encoder.w_u0", slice1_mut(&mut e.w_u0));
        f("encoder.b_s", slice1_mut(&mut e.b_s));
        f("encoder.b_d", slice1_mut(&mut e.b_d));
        f("encoder.w_u", slice2_mut(&mut e.w_u));
        f("encoder.w_s", slice2_mut(&mut e.w_s));
        f("encoder.w_d", slice2_mut(&mut e.w_d));
        f("encoder.w_x", slice2_mut(&mut e.w_x));
        f("encoder.score_u", slice1_mut(&mut e.score_u));
        f("encoder.score_s", slice1_mut(&mut e.score_s));
        f("encoder.score_d", slice1_mut(&mut e.score_d));
        f("encoder.alpha_raw", std::slice::from_mut(&mut e.alpha_raw));
        f("encoder.beta_raw", std::slice::from_mut(&mut e.beta_raw));
        for (k, stack) in self.backbone.stacks.iter_mut().enumerate() {
            for (l, layer) in stack.iter_mut().enumerate() {
                f(&format!("backbone.{k}.{l}.w"), slice2_mut(&mut layer.w));
                f(&format!("backbone.{k}.{l}.b"), slice1_mut(&mut layer.b));
            }
        }
        f("head.w", slice2_mut(&mut self.head.w));
        f("head.b", slice1_mut(&mut self.head.b));
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, s| n += s.len());
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.visit(&mut |_, s| out.extend_from_slice(s));
        out
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, scale: f64, other: &ModelParams) {
        let flat = other.to_flat();
        let mut off = 0;
        self.visit_mut(&mut |_, s| {
            let len = s.len();
            for (x, y) in s.iter_mut().zip(&flat[off..off + len]) {
                *x += scale * y;
            }
            off += len;
        });
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}
fn slice2(a: &ndarray::Array2<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}
fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}
fn slice2_mut(a: &mut ndarray::Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}

/// Forward pass retained for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub backbone: BackboneTrace,
    pub encoding: Encoding,
    /// The encoder embedding actually fused (zero when the encoder is off).
    pub x_g: Array1<f64>,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new<R: Rng>(config: ModelConfig, alpha0: f64, beta0: f64, rng: &mut R) -> Result<Self, ModelError> {
        config.backbone.validate()?;
        Ok(Self {
            params: ModelParams::init(&config, alpha0, beta0, rng),
            config,
        })
    }

    /// Passing an RNG switches dropout on.
    pub fn forward(&self, tree: &PropagationTree, rng: Option<&mut ChaCha8Rng>) -> Result<ForwardTrace, ModelError> {
        let backbone = backbone_forward(tree, &self.config.backbone, &self.params.backbone, rng)?;
        let encoding = encode(tree, &self.params.encoder, self.config.dynamics);
        let x_g = if self.config.use_encoder {
            encoding.x_g.clone()
        } else {
            Array1::zeros(backbone.x_f.len())
        };
        let prediction = fuse_predict(&backbone.x_f, &x_g, &self.params.head)?;
        Ok(ForwardTrace {
            backbone,
            encoding,
            x_g,
            prediction,
        })
    }

    pub fn predict(&self, tree: &PropagationTree) -> Result<Prediction, ModelError> {
        Ok(self.forward(tree, None)?.prediction)
    }

    /// Gradients of a loss with partials `g_logits` (head logits) and
    /// `g_scores` (per-stage encoder scores).
    pub fn backward(&self, trace: &ForwardTrace, g_logits: &[f64; 2], g_scores: &[[f64; 3]]) -> ModelParams {
        let mut grads = ModelParams::zeros(&self.config);
        let g_fused = head_backward(
            &trace.backbone.x_f,
            &trace.x_g,
            &self.params.head,
            g_logits,
            &mut grads.head,
        );
        backbone_backward(
            &trace.backbone,
            &self.config.backbone,
            &self.params.backbone,
            &g_fused,
            &mut grads.backbone,
        );
        let g_xg = if self.config.use_encoder {
            g_fused
        } else {
            Array1::zeros(self.params.encoder.out_dim())
        };
        encoder_backward(&trace.encoding, &self.params.encoder, &g_xg, g_scores, &mut grads.encoder);
        grads
    }
}

/// Identifies the code that produced an artifact.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Self-describing model file: configuration, seed and named tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub code_version: String,
    pub seed: u64,
    /// The full run configuration that produced the model.
    pub run_config: serde_json::Value,
    pub model: Model,
    pub epochs_trained: usize,
    pub best_epoch: usize,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let text = serde_json::to_string(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneKind;
    use rand::SeedableRng;

    fn config(kind: BackboneKind) -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            backbone: BackboneConfig {
                kind,
                layers: 2,
                hidden: 4,
                dropout: 0.0,
            },
            dynamics: Dynamics::Eusd,
            use_encoder: true,
        }
    }

    #[test]
    fn flat_view_round_trips() {
        let cfg = config(BackboneKind::Bigcn);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ModelParams::init(&cfg, 0.3, 0.2, &mut rng);
        let mut names = Vec::new();
        p.visit(&mut |n, _| names.push(n.to_string()));
        let mut q = ModelParams::zeros(&cfg);
        let mut names_mut = Vec::new();
        q.visit_mut(&mut |n, _| names_mut.push(n.to_string()));
        assert_eq!(names, names_mut);
        q.add_scaled(1.0, &p);
        assert_eq!(q, p);
        assert_eq!(p.len(), p.to_flat().len());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(config(BackboneKind::Resgcn), 0.5, 0.5, &mut rng).unwrap();
        let ck = Checkpoint {
            code_version: CODE_VERSION.into(),
            seed: 7,
            run_config: serde_json::json!({"train": {"lambda": 0.5}}),
            model,
            epochs_trained: 3,
            best_epoch: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
