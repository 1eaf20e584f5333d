//! Epidemiology-informed tree encoder.
//!
//! Three state embeddings (Unknown, Support, Denial) are initialised from the
//! tree size and unrolled for one stage per tree level:
//!
//! ```text
//! U_0 = n (1 - a - b) w_u0          S_0 = b_s        D_0 = b_d
//! U_{t+1} = (1 - a - b) U_t
//! S_{t+1} = W_s (S_t + a W_u U_t)   D_{t+1} = W_d (D_t + b W_u U_t)
//! x_g = W_x [U_T; S_T; D_T]
//! ```
//!
//! The encoder sees a tree only through its size and depth. Per-stage state
//! distributions come from projecting each state onto a learned vector and
//! taking a softmax over the three scores.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{add_outer, glorot, logit, sigmoid, softmax, uniform_vec};
use crate::tree::PropagationTree;

pub const RATE_MIN: f64 = 1e-4;
pub const RATE_MAX: f64 = 1.0 - 1e-4;

/// Rate recursion used by the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dynamics {
    /// Transitions driven by the source post only.
    #[default]
    Eusd,
    /// Transitions proportional to the current Support/Denial mass (ablation).
    /// Runs on fractions: the size factor in the initial Unknown state is 1.
    Usd,
}

impl std::str::FromStr for Dynamics {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "eusd" => Ok(Self::Eusd),
            "usd" => Ok(Self::Usd),
            other => Err(format!("unknown dynamics '{other}' (expected eusd or usd)")),
        }
    }
}

/// Maps an unconstrained parameter to a rate in `[RATE_MIN, RATE_MAX]`.
pub fn rate(raw: f64) -> f64 {
    sigmoid(raw).clamp(RATE_MIN, RATE_MAX)
}

/// Preimage of a rate, with the target clamped into the admissible range first.
pub fn rate_to_raw(r: f64) -> f64 {
    logit(r.clamp(RATE_MIN, RATE_MAX))
}

/// Derivative of `rate` used in backpropagation. The clamp is treated as
/// transparent so that a parameter parked at a bound can still move back.
fn rate_slope(raw: f64) -> f64 {
    let s = sigmoid(raw);
    s * (1.0 - s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w_u0: Array1<f64>,
    pub b_s: Array1<f64>,
    pub b_d: Array1<f64>,
    pub w_u: Array2<f64>,
    pub w_s: Array2<f64>,
    pub w_d: Array2<f64>,
    /// `d_out × 3h`.
    pub w_x: Array2<f64>,
    pub score_u: Array1<f64>,
    pub score_s: Array1<f64>,
    pub score_d: Array1<f64>,
    pub alpha_raw: f64,
    pub beta_raw: f64,
}

impl EncoderParams {
    pub fn zeros(h: usize, d_out: usize) -> Self {
        Self {
            w_u0: Array1::zeros(h),
            b_s: Array1::zeros(h),
            b_d: Array1::zeros(h),
            w_u: Array2::zeros((h, h)),
            w_s: Array2::zeros((h, h)),
            w_d: Array2::zeros((h, h)),
            w_x: Array2::zeros((d_out, 3 * h)),
            score_u: Array1::zeros(h),
            score_s: Array1::zeros(h),
            score_d: Array1::zeros(h),
            alpha_raw: 0.0,
            beta_raw: 0.0,
        }
    }

    /// Transition matrices start at the identity; vectors are small uniform
    /// draws; `W_x` is Glorot.
    pub fn init<R: Rng>(h: usize, d_out: usize, alpha0: f64, beta0: f64, rng: &mut R) -> Self {
        let scale = 1.0 / (h as f64).sqrt();
        Self {
            w_u0: uniform_vec(h, scale, rng),
            b_s: uniform_vec(h, scale, rng),
            b_d: uniform_vec(h, scale, rng),
            w_u: Array2::eye(h),
            w_s: Array2::eye(h),
            w_d: Array2::eye(h),
            w_x: glorot(d_out, 3 * h, rng),
            score_u: uniform_vec(h, scale, rng),
            score_s: uniform_vec(h, scale, rng),
            score_d: uniform_vec(h, scale, rng),
            alpha_raw: rate_to_raw(alpha0),
            beta_raw: rate_to_raw(beta0),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_u0.len()
    }

    pub fn out_dim(&self) -> usize {
        self.w_x.nrows()
    }

    pub fn alpha(&self) -> f64 {
        rate(self.alpha_raw)
    }

    pub fn beta(&self) -> f64 {
        rate(self.beta_raw)
    }

    /// Keeps the raw rates inside the preimage of the admissible interval.
    pub fn project(&mut self) {
        let (lo, hi) = (logit(RATE_MIN), logit(RATE_MAX));
        self.alpha_raw = self.alpha_raw.clamp(lo, hi);
        self.beta_raw = self.beta_raw.clamp(lo, hi);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub u: Array1<f64>,
    pub s: Array1<f64>,
    pub d: Array1<f64>,
}

/// Initial states for a tree of `node_count` posts.
pub fn init_states(node_count: f64, params: &EncoderParams) -> EncoderState {
    let keep = 1.0 - params.alpha() - params.beta();
    EncoderState {
        u: &params.w_u0 * (node_count * keep),
        s: params.b_s.clone(),
        d: params.b_d.clone(),
    }
}

fn step(state: &EncoderState, params: &EncoderParams, dynamics: Dynamics) -> EncoderState {
    let (a, b) = (params.alpha(), params.beta());
    match dynamics {
        Dynamics::Eusd => {
            let wu = params.w_u.dot(&state.u);
            EncoderState {
                u: &state.u * (1.0 - a - b),
                s: params.w_s.dot(&(&state.s + &(&wu * a))),
                d: params.w_d.dot(&(&state.d + &(&wu * b))),
            }
        }
        Dynamics::Usd => {
            let ms = &state.u * &state.s;
            let md = &state.u * &state.d;
            EncoderState {
                u: &state.u - &(&ms * a) - &(&md * b),
                s: params.w_s.dot(&(&state.s + &(params.w_u.dot(&ms) * a))),
                d: params.w_d.dot(&(&state.d + &(params.w_u.dot(&md) * b))),
            }
        }
    }
}

/// States for stages `1..=stages`.
pub fn unroll(
    stages: usize,
    init: &EncoderState,
    params: &EncoderParams,
    dynamics: Dynamics,
) -> Vec<EncoderState> {
    let mut out: Vec<EncoderState> = Vec::with_capacity(stages);
    for _ in 0..stages {
        let next = step(out.last().unwrap_or(init), params, dynamics);
        out.push(next);
    }
    out
}

/// Number of unrolled stages for a tree: its depth, or one for a lone root.
pub fn stage_count(tree: &PropagationTree) -> usize {
    tree.depth().max(1)
}

/// Per-stage state distributions.
pub fn state_scores(states: &[EncoderState], params: &EncoderParams) -> Vec<[f64; 3]> {
    states
        .iter()
        .map(|st| {
            softmax([
                params.score_u.dot(&st.u),
                params.score_s.dot(&st.s),
                params.score_d.dot(&st.d),
            ])
        })
        .collect()
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub x_g: Array1<f64>,
    /// Stages `0..=T`.
    pub states: Vec<EncoderState>,
    /// Stages `1..=T`.
    pub distributions: Vec<[f64; 3]>,
    pub node_scale: f64,
    pub dynamics: Dynamics,
}

impl Encoding {
    pub fn stages(&self) -> usize {
        self.states.len() - 1
    }
}

pub fn encode_size_depth(
    node_count: usize,
    stages: usize,
    params: &EncoderParams,
    dynamics: Dynamics,
) -> Encoding {
    let node_scale = match dynamics {
        Dynamics::Eusd => node_count as f64,
        Dynamics::Usd => 1.0,
    };
    let init = init_states(node_scale, params);
    let mut states = vec![init];
    states.extend(unroll(stages, &states[0], params, dynamics));
    let last = states.last().expect("at least the initial state");
    let cat = concatenate![Axis(0), last.u, last.s, last.d];
    let x_g = params.w_x.dot(&cat);
    let distributions = state_scores(&states[1..], params);
    Encoding {
        x_g,
        states,
        distributions,
        node_scale,
        dynamics,
    }
}

pub fn encode(tree: &PropagationTree, params: &EncoderParams, dynamics: Dynamics) -> Encoding {
    encode_size_depth(tree.len(), stage_count(tree), params, dynamics)
}

/// Accumulates into `grads` the gradient of a loss whose partials are `g_xg`
/// (with respect to `x_g`) and `g_scores[t-1]` (with respect to the three
/// pre-softmax scores at stage `t`).
pub fn encoder_backward(
    enc: &Encoding,
    params: &EncoderParams,
    g_xg: &Array1<f64>,
    g_scores: &[[f64; 3]],
    grads: &mut EncoderParams,
) {
    let h = params.dim();
    let big_t = enc.stages();
    let (a, b) = (params.alpha(), params.beta());
    let keep = 1.0 - a - b;

    let last = &enc.states[big_t];
    let cat = concatenate![Axis(0), last.u, last.s, last.d];
    add_outer(&mut grads.w_x, g_xg, &cat);
    let g_cat = params.w_x.t().dot(g_xg);
    let mut gu = g_cat.slice(s![0..h]).to_owned();
    let mut gs = g_cat.slice(s![h..2 * h]).to_owned();
    let mut gd = g_cat.slice(s![2 * h..]).to_owned();

    let (mut g_a, mut g_b, mut g_keep) = (0.0, 0.0, 0.0);
    for t in (1..=big_t).rev() {
        let cur = &enc.states[t];
        if let Some(gz) = g_scores.get(t - 1) {
            gu.scaled_add(gz[0], &params.score_u);
            gs.scaled_add(gz[1], &params.score_s);
            gd.scaled_add(gz[2], &params.score_d);
            grads.score_u.scaled_add(gz[0], &cur.u);
            grads.score_s.scaled_add(gz[1], &cur.s);
            grads.score_d.scaled_add(gz[2], &cur.d);
        }
        let prev = &enc.states[t - 1];
        match enc.dynamics {
            Dynamics::Eusd => {
                let wu = params.w_u.dot(&prev.u);
                let r_s = &prev.s + &(&wu * a);
                let r_d = &prev.d + &(&wu * b);
                add_outer(&mut grads.w_s, &gs, &r_s);
                add_outer(&mut grads.w_d, &gd, &r_d);
                let g_rs = params.w_s.t().dot(&gs);
                let g_rd = params.w_d.t().dot(&gd);
                g_a += g_rs.dot(&wu);
                g_b += g_rd.dot(&wu);
                let g_wu = &g_rs * a + &g_rd * b;
                add_outer(&mut grads.w_u, &g_wu, &prev.u);
                g_keep += gu.dot(&prev.u);
                gu = params.w_u.t().dot(&g_wu) + &gu * keep;
                gs = g_rs;
                gd = g_rd;
            }
            Dynamics::Usd => {
                let ms = &prev.u * &prev.s;
                let md = &prev.u * &prev.d;
                let wms = params.w_u.dot(&ms);
                let wmd = params.w_u.dot(&md);
                let r_s = &prev.s + &(&wms * a);
                let r_d = &prev.d + &(&wmd * b);
                add_outer(&mut grads.w_s, &gs, &r_s);
                add_outer(&mut grads.w_d, &gd, &r_d);
                let g_rs = params.w_s.t().dot(&gs);
                let g_rd = params.w_d.t().dot(&gd);
                g_a += g_rs.dot(&wms) - gu.dot(&ms);
                g_b += g_rd.dot(&wmd) - gu.dot(&md);
                add_outer(&mut grads.w_u, &(&g_rs * a), &ms);
                add_outer(&mut grads.w_u, &(&g_rd * b), &md);
                let g_ms = params.w_u.t().dot(&g_rs) * a - &gu * a;
                let g_md = params.w_u.t().dot(&g_rd) * b - &gu * b;
                let new_gu = &gu + &(&g_ms * &prev.s) + &(&g_md * &prev.d);
                gs = &g_rs + &(&g_ms * &prev.u);
                gd = &g_rd + &(&g_md * &prev.u);
                gu = new_gu;
            }
        }
    }

    // U_0 = scale * keep * w_u0
    grads.w_u0.scaled_add(enc.node_scale * keep, &gu);
    g_keep += enc.node_scale * gu.dot(&params.w_u0);
    grads.b_s += &gs;
    grads.b_d += &gd;

    g_a -= g_keep;
    g_b -= g_keep;
    grads.alpha_raw += g_a * rate_slope(params.alpha_raw);
    grads.beta_raw += g_b * rate_slope(params.beta_raw);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{build_tree, RawNode};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(h: usize, seed: u64, alpha: f64, beta: f64) -> EncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = EncoderParams::init(h, 5, alpha, beta, &mut rng);
        p.w_u = glorot(h, h, &mut rng);
        p.w_s = glorot(h, h, &mut rng) + Array2::<f64>::eye(h) * 0.5;
        p.w_d = glorot(h, h, &mut rng) + Array2::<f64>::eye(h) * 0.5;
        p
    }

    #[test]
    fn initial_states_by_hand() {
        let mut p = EncoderParams::zeros(3, 2);
        p.alpha_raw = rate_to_raw(0.25);
        p.beta_raw = rate_to_raw(0.25);
        p.w_u0.fill(1.0);
        let init = init_states(4.0, &p);
        assert!(init.u.iter().all(|&v| (v - 2.0).abs() < 1e-12));
        let doubled = init_states(8.0, &p);
        assert!(doubled.u.iter().zip(&init.u).all(|(a, b)| (a - 2.0 * b).abs() < 1e-12));
        assert_eq!(init_states(0.0, &p).u, Array1::<f64>::zeros(3));
        assert_eq!(doubled.s, init.s);
    }

    #[test]
    fn one_stage_halves_unknown() {
        let mut p = params(4, 1, 0.25, 0.25);
        p.alpha_raw = rate_to_raw(0.25);
        p.beta_raw = rate_to_raw(0.25);
        let init = init_states(3.0, &p);
        let out = unroll(1, &init, &p, Dynamics::Eusd);
        assert!(out[0].u.iter().zip(&init.u).all(|(a, b)| (a - 0.5 * b).abs() < 1e-12));
    }

    #[test]
    fn frozen_dynamics_keep_support_and_denial() {
        let mut p = params(4, 2, 0.5, 0.5);
        p.w_u = Array2::eye(4);
        p.w_s = Array2::eye(4);
        p.w_d = Array2::eye(4);
        p.alpha_raw = -1e3;
        p.beta_raw = -1e3;
        // The clamp keeps a tiny positive rate, so compare with the frozen limit loosely.
        let init = init_states(2.0, &p);
        for st in unroll(5, &init, &p, Dynamics::Eusd) {
            for (x, y) in st.s.iter().zip(&p.b_s) {
                assert!((x - y).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn equal_size_and_depth_give_identical_embedding() {
        let p = params(6, 3, 0.3, 0.2);
        let chain = build_tree(
            "a",
            0,
            vec![
                RawNode::new(0, None, "x"),
                RawNode::new(1, Some(0), "y"),
                RawNode::new(2, Some(1), "z"),
                RawNode::new(3, Some(0), "w"),
            ],
        )
        .unwrap();
        let other = build_tree(
            "b",
            1,
            vec![
                RawNode::new(0, None, "p"),
                RawNode::new(1, Some(0), "q"),
                RawNode::new(2, Some(0), "r"),
                RawNode::new(3, Some(2), "s"),
            ],
        )
        .unwrap();
        let (ea, eb) = (encode(&chain, &p, Dynamics::Eusd), encode(&other, &p, Dynamics::Eusd));
        assert_eq!(ea.x_g, eb.x_g);
        let mut zero = p.clone();
        zero.w_x.fill(0.0);
        assert_eq!(encode(&chain, &zero, Dynamics::Eusd).x_g, Array1::<f64>::zeros(5));
        let root = build_tree("r", 0, vec![RawNode::new(0, None, "x")]).unwrap();
        assert_eq!(encode(&root, &p, Dynamics::Eusd).stages(), 1);
    }

    #[test]
    fn scores_are_distributions() {
        let p = params(5, 4, 0.3, 0.2);
        let enc = encode_size_depth(7, 4, &p, Dynamics::Eusd);
        assert_eq!(enc.distributions.len(), 4);
        for d in &enc.distributions {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(d.iter().all(|&v| v > 0.0));
        }
    }

    fn scalar_loss(enc: &Encoding, wx: &Array1<f64>, ws: &[[f64; 3]]) -> f64 {
        let mut l = enc.x_g.dot(wx);
        for (t, d) in enc.distributions.iter().enumerate() {
            let z: Vec<f64> = d.iter().map(|p| p.ln()).collect();
            l += (0..3).map(|k| ws[t][k] * z[k]).sum::<f64>();
        }
        l
    }

    fn check_gradients(dynamics: Dynamics) {
        let h = 4;
        let mut p = params(h, 7, 0.3, 0.2);
        if dynamics == Dynamics::Usd {
            p.b_s.mapv_inplace(f64::abs);
            p.b_d.mapv_inplace(f64::abs);
        }
        let (n, stages) = (5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let wx = uniform_vec(5, 1.0, &mut rng);
        let ws: Vec<[f64; 3]> = (0..stages)
            .map(|_| std::array::from_fn(|_| rand::Rng::random::<f64>(&mut rng)))
            .collect();

        let enc = encode_size_depth(n, stages, &p, dynamics);
        // log-softmax loss: d/dz_k = w_k - p_k * sum(w)
        let g_scores: Vec<[f64; 3]> = enc
            .distributions
            .iter()
            .zip(&ws)
            .map(|(d, w)| {
                let sw: f64 = w.iter().sum();
                std::array::from_fn(|k| w[k] - d[k] * sw)
            })
            .collect();
        let mut grads = EncoderParams::zeros(h, 5);
        encoder_backward(&enc, &p, &wx, &g_scores, &mut grads);

        let loss = |q: &EncoderParams| scalar_loss(&encode_size_depth(n, stages, q, dynamics), &wx, &ws);
        let eps = 1e-5;
        let check = |name: &str, analytic: f64, perturb: &dyn Fn(&mut EncoderParams, f64)| {
            let mut plus = p.clone();
            perturb(&mut plus, eps);
            let mut minus = p.clone();
            perturb(&mut minus, -eps);
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let tol = 1e-3 * fd.abs().max(analytic.abs()).max(1e-4);
            assert!((fd - analytic).abs() <= tol, "{name}: fd {fd} analytic {analytic}");
        };
        for i in 0..h {
            check("w_u0", grads.w_u0[i], &|q, e| q.w_u0[i] += e);
            check("b_s", grads.b_s[i], &|q, e| q.b_s[i] += e);
            check("b_d", grads.b_d[i], &|q, e| q.b_d[i] += e);
            check("score_u", grads.score_u[i], &|q, e| q.score_u[i] += e);
            check("score_s", grads.score_s[i], &|q, e| q.score_s[i] += e);
            check("score_d", grads.score_d[i], &|q, e| q.score_d[i] += e);
            for j in 0..h {
                check("w_u", grads.w_u[[i, j]], &|q, e| q.w_u[[i, j]] += e);
                check("w_s", grads.w_s[[i, j]], &|q, e| q.w_s[[i, j]] += e);
                check("w_d", grads.w_d[[i, j]], &|q, e| q.w_d[[i, j]] += e);
            }
        }
        for i in 0..5 {
            for j in 0..3 * h {
                check("w_x", grads.w_x[[i, j]], &|q, e| q.w_x[[i, j]] += e);
            }
        }
        check("alpha_raw", grads.alpha_raw, &|q, e| q.alpha_raw += e);
        check("beta_raw", grads.beta_raw, &|q, e| q.beta_raw += e);
    }

    #[test]
    fn eusd_gradients_match_finite_differences() {
        check_gradients(Dynamics::Eusd);
    }

    #[test]
    fn usd_gradients_match_finite_differences() {
        check_gradients(Dynamics::Usd);
    }

    #[test]
    fn projection_keeps_rates_in_range() {
        let mut p = EncoderParams::zeros(2, 2);
        p.alpha_raw = 1e6;
        p.beta_raw = -1e6;
        p.project();
        assert!(p.alpha() <= RATE_MAX && p.beta() >= RATE_MIN);
        assert!((p.alpha_raw - logit(RATE_MAX)).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn unknown_state_has_closed_form(
            stages in 1usize..=32, seed in 0u64..1000,
            alpha in 0.01f64..0.6, beta in 0.01f64..0.39, n in 1usize..200,
        ) {
            let p = params(4, seed, alpha, beta);
            let enc = encode_size_depth(n, stages, &p, Dynamics::Eusd);
            let keep = 1.0 - p.alpha() - p.beta();
            let expect = &enc.states[0].u * keep.powi(stages as i32);
            for (x, y) in enc.states[stages].u.iter().zip(&expect) {
                prop_assert!((x - y).abs() <= 1e-10 * y.abs().max(1e-300));
            }
        }
    }
}
