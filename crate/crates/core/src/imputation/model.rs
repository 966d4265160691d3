//! The masked conditional latent-variable sequence model.
//!
//! A bidirectional gated recurrent encoder maps the observed coordinates
//! and mask to a Gaussian posterior over a sequence-level latent; a
//! recurrent decoder conditioned on the same observations and the latent
//! reconstructs the full trajectory tensor. All gradients are exact,
//! computed on the reverse-mode tape, and are verified against central
//! finite differences in the tests.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ImputationError, LatentConfig, ObservedSequence};
use crate::tape::{NodeId, Tape};

/// Weights of one gated recurrent cell. Update/reset/candidate matrices
/// act on the concatenation `[input, state]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub w_z: Array2<f64>,
    pub w_r: Array2<f64>,
    pub w_h: Array2<f64>,
    pub b_z: Array2<f64>,
    pub b_r: Array2<f64>,
    pub b_h: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearWeights {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

/// All trainable weights of the imputer, dimensioned for a fixed agent
/// count. Both the encoder and the decoder are bidirectional; the decoder
/// reconstructs every frame from the two recurrent states plus the
/// conditioning inputs, so a gap is constrained by the observations on
/// both of its sides.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputerParams {
    pub n_agents: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub enc_fwd: GruWeights,
    pub enc_bwd: GruWeights,
    pub mu_head: LinearWeights,
    pub logvar_head: LinearWeights,
    pub dec_fwd: GruWeights,
    pub dec_bwd: GruWeights,
    pub out: LinearWeights,
}

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// Loss terms of one objective evaluation; `total` is the weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub smoothness: f64,
    pub formation: f64,
    pub collision: f64,
}

fn gru_dims(input: usize, hidden: usize) -> [(usize, usize); 6] {
    [
        (input + hidden, hidden),
        (input + hidden, hidden),
        (input + hidden, hidden),
        (1, hidden),
        (1, hidden),
        (1, hidden),
    ]
}

/// Shapes of every tensor in canonical (serialization) order.
fn tensor_dims(n_agents: usize, latent: usize, hidden: usize) -> Vec<(usize, usize)> {
    let enc_in = 3 * n_agents;
    let dec_in = 3 * n_agents + latent;
    let mut dims = Vec::new();
    dims.extend(gru_dims(enc_in, hidden));
    dims.extend(gru_dims(enc_in, hidden));
    dims.push((2 * hidden, latent));
    dims.push((1, latent));
    dims.push((2 * hidden, latent));
    dims.push((1, latent));
    dims.extend(gru_dims(dec_in, hidden));
    dims.extend(gru_dims(dec_in, hidden));
    // Output head reads both decoder states plus the current frame's
    // conditioning features (skip connection).
    dims.push((2 * hidden + 3 * n_agents, 2 * n_agents));
    dims.push((1, 2 * n_agents));
    dims
}

impl GruWeights {
    fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_z: Array2::zeros((input + hidden, hidden)),
            w_r: Array2::zeros((input + hidden, hidden)),
            w_h: Array2::zeros((input + hidden, hidden)),
            b_z: Array2::zeros((1, hidden)),
            b_r: Array2::zeros((1, hidden)),
            b_h: Array2::zeros((1, hidden)),
        }
    }

    fn tensors(&self) -> [&Array2<f64>; 6] {
        [&self.w_z, &self.w_r, &self.w_h, &self.b_z, &self.b_r, &self.b_h]
    }
}

impl ImputerParams {
    pub fn zeros(n_agents: usize, cfg: &LatentConfig) -> Self {
        let enc_in = 3 * n_agents;
        let dec_in = 3 * n_agents + cfg.latent_dim;
        let h = cfg.hidden_dim;
        let l = cfg.latent_dim;
        Self {
            n_agents,
            latent_dim: l,
            hidden_dim: h,
            enc_fwd: GruWeights::zeros(enc_in, h),
            enc_bwd: GruWeights::zeros(enc_in, h),
            mu_head: LinearWeights {
                w: Array2::zeros((2 * h, l)),
                b: Array2::zeros((1, l)),
            },
            logvar_head: LinearWeights {
                w: Array2::zeros((2 * h, l)),
                b: Array2::zeros((1, l)),
            },
            dec_fwd: GruWeights::zeros(dec_in, h),
            dec_bwd: GruWeights::zeros(dec_in, h),
            out: LinearWeights {
                w: Array2::zeros((2 * h + 3 * n_agents, 2 * n_agents)),
                b: Array2::zeros((1, 2 * n_agents)),
            },
        }
    }

    /// Deterministic initialization: weights uniform in +/- 1/sqrt(fan_in),
    /// biases zero except the update gates, which start at -1 so the
    /// recurrent state persists across multi-frame gaps from the outset.
    pub fn seeded(n_agents: usize, cfg: &LatentConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = Self::zeros(n_agents, cfg);
        let mut flat = params.to_flat();
        let mut offset = 0;
        for (rows, cols) in tensor_dims(n_agents, cfg.latent_dim, cfg.hidden_dim) {
            let count = rows * cols;
            if rows > 1 {
                let bound = 1.0 / (rows as f64).sqrt();
                for v in &mut flat[offset..offset + count] {
                    *v = (rand::Rng::random::<f64>(&mut rng) * 2.0 - 1.0) * bound;
                }
            }
            offset += count;
        }
        params.assign_flat(&flat);
        for g in [
            &mut params.enc_fwd,
            &mut params.enc_bwd,
            &mut params.dec_fwd,
            &mut params.dec_bwd,
        ] {
            g.b_z.fill(-1.0);
        }
        params
    }

    pub fn parameter_count(&self) -> usize {
        tensor_dims(self.n_agents, self.latent_dim, self.hidden_dim)
            .iter()
            .map(|(r, c)| r * c)
            .sum()
    }

    fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = Vec::new();
        out.extend(self.enc_fwd.tensors());
        out.extend(self.enc_bwd.tensors());
        out.push(&self.mu_head.w);
        out.push(&self.mu_head.b);
        out.push(&self.logvar_head.w);
        out.push(&self.logvar_head.b);
        out.extend(self.dec_fwd.tensors());
        out.extend(self.dec_bwd.tensors());
        out.push(&self.out.w);
        out.push(&self.out.b);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = Vec::new();
        let Self {
            enc_fwd,
            enc_bwd,
            mu_head,
            logvar_head,
            dec_fwd,
            dec_bwd,
            out: out_head,
            ..
        } = self;
        for g in [enc_fwd, enc_bwd] {
            out.push(&mut g.w_z);
            out.push(&mut g.w_r);
            out.push(&mut g.w_h);
            out.push(&mut g.b_z);
            out.push(&mut g.b_r);
            out.push(&mut g.b_h);
        }
        out.push(&mut mu_head.w);
        out.push(&mut mu_head.b);
        out.push(&mut logvar_head.w);
        out.push(&mut logvar_head.b);
        for g in [dec_fwd, dec_bwd] {
            out.push(&mut g.w_z);
            out.push(&mut g.w_r);
            out.push(&mut g.w_h);
            out.push(&mut g.b_z);
            out.push(&mut g.b_r);
            out.push(&mut g.b_h);
        }
        out.push(&mut out_head.w);
        out.push(&mut out_head.b);
        out
    }

    /// Flattens all tensors row-major in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.parameter_count());
        for t in self.tensors() {
            flat.extend(t.iter().copied());
        }
        flat
    }

    /// Overwrites all tensors from a flat vector in canonical order.
    pub fn assign_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.parameter_count(), "flat parameter length mismatch");
        let mut offset = 0;
        for t in self.tensors_mut() {
            let count = t.len();
            for (dst, src) in t.iter_mut().zip(&values[offset..offset + count]) {
                *dst = *src;
            }
            offset += count;
        }
    }

    pub fn from_flat(
        n_agents: usize,
        latent_dim: usize,
        hidden_dim: usize,
        values: &[f64],
    ) -> Result<Self, ImputationError> {
        let cfg = LatentConfig {
            latent_dim,
            hidden_dim,
            ..LatentConfig::default()
        };
        let mut params = Self::zeros(n_agents, &cfg);
        if values.len() != params.parameter_count() {
            return Err(ImputationError::DimensionError {
                what: format!(
                    "flat parameter vector has {} values, expected {}",
                    values.len(),
                    params.parameter_count()
                ),
            });
        }
        params.assign_flat(values);
        Ok(params)
    }
}

struct GruNodes {
    w_z: NodeId,
    w_r: NodeId,
    w_h: NodeId,
    b_z: NodeId,
    b_r: NodeId,
    b_h: NodeId,
}

struct ParamNodes {
    enc_fwd: GruNodes,
    enc_bwd: GruNodes,
    mu_w: NodeId,
    mu_b: NodeId,
    logvar_w: NodeId,
    logvar_b: NodeId,
    dec_fwd: GruNodes,
    dec_bwd: GruNodes,
    out_w: NodeId,
    out_b: NodeId,
    /// Every parameter node in canonical order, for gradient collection.
    ordered: Vec<NodeId>,
}

fn insert_gru(tape: &mut Tape, g: &GruWeights, ordered: &mut Vec<NodeId>) -> GruNodes {
    let nodes = GruNodes {
        w_z: tape.param(g.w_z.clone()),
        w_r: tape.param(g.w_r.clone()),
        w_h: tape.param(g.w_h.clone()),
        b_z: tape.param(g.b_z.clone()),
        b_r: tape.param(g.b_r.clone()),
        b_h: tape.param(g.b_h.clone()),
    };
    ordered.extend([nodes.w_z, nodes.w_r, nodes.w_h, nodes.b_z, nodes.b_r, nodes.b_h]);
    nodes
}

fn insert_params(tape: &mut Tape, p: &ImputerParams) -> ParamNodes {
    let mut ordered = Vec::new();
    let enc_fwd = insert_gru(tape, &p.enc_fwd, &mut ordered);
    let enc_bwd = insert_gru(tape, &p.enc_bwd, &mut ordered);
    let mu_w = tape.param(p.mu_head.w.clone());
    let mu_b = tape.param(p.mu_head.b.clone());
    let logvar_w = tape.param(p.logvar_head.w.clone());
    let logvar_b = tape.param(p.logvar_head.b.clone());
    ordered.extend([mu_w, mu_b, logvar_w, logvar_b]);
    let dec_fwd = insert_gru(tape, &p.dec_fwd, &mut ordered);
    let dec_bwd = insert_gru(tape, &p.dec_bwd, &mut ordered);
    let out_w = tape.param(p.out.w.clone());
    let out_b = tape.param(p.out.b.clone());
    ordered.extend([out_w, out_b]);
    ParamNodes {
        enc_fwd,
        enc_bwd,
        mu_w,
        mu_b,
        logvar_w,
        logvar_b,
        dec_fwd,
        dec_bwd,
        out_w,
        out_b,
        ordered,
    }
}

/// Per-frame conditioning features: interleaved coordinates of every
/// agent followed by the observation flags.
///
/// Unobserved coordinates carry a linear interpolation (or hold, at the
/// edges) between the agent's nearest observed frames instead of zeros.
/// This is a deterministic function of the observations and the mask; it
/// hands the network a sensible anchor so learning concentrates on the
/// residual motion structure.
pub(crate) fn conditioning_features(seq: &ObservedSequence) -> Vec<Array2<f64>> {
    let (n, t) = (seq.n_agents(), seq.n_frames());
    let mut feats = vec![Array2::zeros((1, 3 * n)); t];
    for i in 0..n {
        let observed: Vec<usize> = (0..t).filter(|&s| seq.is_observed(i, s)).collect();
        for s in 0..t {
            let coord = |frame: usize, k: usize| seq.x_obs()[(i, frame, k)];
            let (x, y) = if seq.is_observed(i, s) {
                (coord(s, 0), coord(s, 1))
            } else if observed.is_empty() {
                (0.0, 0.0)
            } else {
                match (
                    observed.iter().rev().find(|&&o| o < s),
                    observed.iter().find(|&&o| o > s),
                ) {
                    (Some(&lo), Some(&hi)) => {
                        let alpha = (s - lo) as f64 / (hi - lo) as f64;
                        (
                            coord(lo, 0) + alpha * (coord(hi, 0) - coord(lo, 0)),
                            coord(lo, 1) + alpha * (coord(hi, 1) - coord(lo, 1)),
                        )
                    }
                    (Some(&lo), None) => (coord(lo, 0), coord(lo, 1)),
                    (None, Some(&hi)) => (coord(hi, 0), coord(hi, 1)),
                    (None, None) => (0.0, 0.0),
                }
            };
            feats[s][(0, 2 * i)] = x;
            feats[s][(0, 2 * i + 1)] = y;
            feats[s][(0, 2 * n + i)] = if seq.is_observed(i, s) { 1.0 } else { 0.0 };
        }
    }
    feats
}

fn gru_cell(tape: &mut Tape, g: &GruNodes, x: NodeId, h_prev: NodeId) -> NodeId {
    let cat = tape.concat_cols(&[x, h_prev]);
    let z_lin = tape.matmul(cat, g.w_z);
    let z_lin = tape.add(z_lin, g.b_z);
    let z = tape.sigmoid(z_lin);
    let r_lin = tape.matmul(cat, g.w_r);
    let r_lin = tape.add(r_lin, g.b_r);
    let r = tape.sigmoid(r_lin);
    let rh = tape.mul(r, h_prev);
    let cat2 = tape.concat_cols(&[x, rh]);
    let hh_lin = tape.matmul(cat2, g.w_h);
    let hh_lin = tape.add(hh_lin, g.b_h);
    let hh = tape.tanh(hh_lin);
    // h = h_prev + z * (hh - h_prev)
    let delta = tape.sub(hh, h_prev);
    let zdelta = tape.mul(z, delta);
    tape.add(h_prev, zdelta)
}

fn encoder_nodes(tape: &mut Tape, pn: &ParamNodes, feats: &[NodeId], hidden: usize) -> (NodeId, NodeId) {
    let mut h = tape.constant(Array2::zeros((1, hidden)));
    for &f in feats {
        h = gru_cell(tape, &pn.enc_fwd, f, h);
    }
    let h_fwd = h;
    let mut h = tape.constant(Array2::zeros((1, hidden)));
    for &f in feats.iter().rev() {
        h = gru_cell(tape, &pn.enc_bwd, f, h);
    }
    let summary = tape.concat_cols(&[h_fwd, h]);
    let mu = tape.matmul(summary, pn.mu_w);
    let mu = tape.add(mu, pn.mu_b);
    let logvar = tape.matmul(summary, pn.logvar_w);
    let logvar = tape.add(logvar, pn.logvar_b);
    (mu, logvar)
}

fn decoder_nodes(tape: &mut Tape, pn: &ParamNodes, feats: &[NodeId], z: NodeId, hidden: usize) -> Vec<NodeId> {
    let t = feats.len();
    let inputs: Vec<NodeId> = feats.iter().map(|&f| tape.concat_cols(&[f, z])).collect();
    let mut h = tape.constant(Array2::zeros((1, hidden)));
    let mut fwd = Vec::with_capacity(t);
    for &inp in &inputs {
        h = gru_cell(tape, &pn.dec_fwd, inp, h);
        fwd.push(h);
    }
    let mut h = tape.constant(Array2::zeros((1, hidden)));
    let mut bwd = vec![h; t];
    for (s, &inp) in inputs.iter().enumerate().rev() {
        h = gru_cell(tape, &pn.dec_bwd, inp, h);
        bwd[s] = h;
    }
    (0..t)
        .map(|s| {
            let state = tape.concat_cols(&[fwd[s], bwd[s], feats[s]]);
            let y = tape.matmul(state, pn.out_w);
            tape.add(y, pn.out_b)
        })
        .collect()
}

fn check_compat(params: &ImputerParams, seq: &ObservedSequence) -> Result<(), ImputationError> {
    if params.n_agents != seq.n_agents() {
        return Err(ImputationError::DimensionError {
            what: format!(
                "parameters built for {} agents, sequence has {}",
                params.n_agents,
                seq.n_agents()
            ),
        });
    }
    Ok(())
}

/// Runs the bidirectional encoder and returns the Gaussian posterior over
/// the latent. Deterministic given parameters and input.
pub fn encode(params: &ImputerParams, seq: &ObservedSequence) -> Result<GaussianPosterior, ImputationError> {
    check_compat(params, seq)?;
    let mut tape = Tape::new();
    let pn = insert_params(&mut tape, params);
    let feats: Vec<NodeId> = (0..seq.n_frames())
        .map(|s| {
            let f = frame_features(seq, s);
            tape.constant(f)
        })
        .collect();
    let (mu, logvar) = encoder_nodes(&mut tape, &pn, &feats, params.hidden_dim);
    let mu_v: Vec<f64> = tape.value(mu).iter().copied().collect();
    let logvar_v: Vec<f64> = tape.value(logvar).iter().copied().collect();
    if mu_v.iter().chain(&logvar_v).any(|v| !v.is_finite()) {
        return Err(ImputationError::NumericalInstability { term: "encoder" });
    }
    Ok(GaussianPosterior {
        mu: mu_v,
        logvar: logvar_v,
    })
}

/// Decodes a full trajectory tensor conditioned on the observations and a
/// latent vector.
pub fn decode(params: &ImputerParams, z: &[f64], seq: &ObservedSequence) -> Result<Array3<f64>, ImputationError> {
    check_compat(params, seq)?;
    if z.len() != params.latent_dim {
        return Err(ImputationError::DimensionError {
            what: format!("latent has length {}, expected {}", z.len(), params.latent_dim),
        });
    }
    let mut tape = Tape::new();
    let pn = insert_params(&mut tape, params);
    let feats: Vec<NodeId> = (0..seq.n_frames())
        .map(|s| {
            let f = frame_features(seq, s);
            tape.constant(f)
        })
        .collect();
    let z_node = tape.constant(Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("latent shape"));
    let ys = decoder_nodes(&mut tape, &pn, &feats, z_node, params.hidden_dim);

    let (n, t) = (seq.n_agents(), seq.n_frames());
    let mut recon = Array3::zeros((n, t, 2));
    for (s, y) in ys.iter().enumerate() {
        let row = tape.value(*y);
        for i in 0..n {
            recon[(i, s, 0)] = row[(0, 2 * i)];
            recon[(i, s, 1)] = row[(0, 2 * i + 1)];
        }
    }
    if recon.iter().any(|v| !v.is_finite()) {
        return Err(ImputationError::NumericalInstability { term: "decoder" });
    }
    Ok(recon)
}

/// Graph of the full objective; returns the tape, the ordered parameter
/// nodes, the total-loss node and the per-term values.
fn build_objective(
    params: &ImputerParams,
    seq: &ObservedSequence,
    x_true: &Array3<f64>,
    cfg: &LatentConfig,
    eps: &[f64],
) -> Result<(Tape, Vec<NodeId>, NodeId, ElboBreakdown), ImputationError> {
    check_compat(params, seq)?;
    cfg.validate()?;
    if params.latent_dim != cfg.latent_dim || params.hidden_dim != cfg.hidden_dim {
        return Err(ImputationError::DimensionError {
            what: format!(
                "parameters are {}x{} (latent x hidden), config wants {}x{}",
                params.latent_dim, params.hidden_dim, cfg.latent_dim, cfg.hidden_dim
            ),
        });
    }
    let (n, t) = (seq.n_agents(), seq.n_frames());
    if x_true.dim() != (n, t, 2) {
        return Err(ImputationError::DimensionError {
            what: format!("ground truth has shape {:?}, expected ({n}, {t}, 2)", x_true.dim()),
        });
    }
    if x_true.iter().any(|v| !v.is_finite()) {
        return Err(ImputationError::NumericalInstability { term: "ground truth" });
    }

    let mut tape = Tape::new();
    let pn = insert_params(&mut tape, params);
    let feats: Vec<NodeId> = (0..t)
        .map(|s| {
            let f = frame_features(seq, s);
            tape.constant(f)
        })
        .collect();

    let (mu, logvar) = encoder_nodes(&mut tape, &pn, &feats, params.hidden_dim);

    // Reparameterized single-sample latent.
    let eps_node = tape.constant(Array2::from_shape_vec((1, eps.len()), eps.to_vec()).expect("eps shape"));
    let half_logvar = tape.scale(logvar, 0.5);
    let std = tape.exp(half_logvar);
    let noise = tape.mul(std, eps_node);
    let z = tape.add(mu, noise);

    let ys = decoder_nodes(&mut tape, &pn, &feats, z, params.hidden_dim);

    // Masked reconstruction: squared error on unobserved entries only.
    let mut recon_acc: Option<NodeId> = None;
    for s in 0..t {
        let mut truth = Array2::zeros((1, 2 * n));
        let mut unobserved = Array2::zeros((1, 2 * n));
        for i in 0..n {
            truth[(0, 2 * i)] = x_true[(i, s, 0)];
            truth[(0, 2 * i + 1)] = x_true[(i, s, 1)];
            if !seq.is_observed(i, s) {
                unobserved[(0, 2 * i)] = 1.0;
                unobserved[(0, 2 * i + 1)] = 1.0;
            }
        }
        if unobserved.iter().all(|v| *v == 0.0) {
            continue;
        }
        let truth_node = tape.constant(truth);
        let sel = tape.constant(unobserved);
        let diff = tape.sub(ys[s], truth_node);
        let masked = tape.mul(diff, sel);
        let term = tape.sum_squares(masked);
        recon_acc = Some(match recon_acc {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let recon = recon_acc.unwrap_or_else(|| tape.constant(Array2::zeros((1, 1))));

    // KL(q || N(0, I)) = 0.5 * sum(exp(logvar) + mu^2 - 1 - logvar).
    let var = tape.exp(logvar);
    let mu_sq = tape.mul(mu, mu);
    let s1 = tape.add(var, mu_sq);
    let s2 = tape.add_scalar(s1, -1.0);
    let s3 = tape.sub(s2, logvar);
    let ksum = tape.sum(s3);
    let kl = tape.scale(ksum, 0.5);

    // Squared second temporal differences of the reconstruction.
    let smooth = if cfg.lambda_smooth > 0.0 && t >= 3 {
        let mut acc: Option<NodeId> = None;
        for s in 1..t - 1 {
            let twice = tape.scale(ys[s], 2.0);
            let a = tape.sub(ys[s + 1], twice);
            let b = tape.add(a, ys[s - 1]);
            let term = tape.sum_squares(b);
            acc = Some(match acc {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
        acc.unwrap()
    } else {
        tape.constant(Array2::zeros((1, 1)))
    };

    // Pairwise distances per frame, shared by the formation and collision
    // terms.
    let want_pairs = (cfg.lambda_form > 0.0 || cfg.lambda_coll > 0.0) && n >= 2;
    let mut form = tape.constant(Array2::zeros((1, 1)));
    let mut coll = tape.constant(Array2::zeros((1, 1)));
    if want_pairs {
        // Reference distances: the fully observed frame nearest to each
        // frame, if any exists.
        let full_frames: Vec<usize> = (0..t)
            .filter(|&s| (0..n).all(|i| seq.is_observed(i, s)))
            .collect();
        let mut form_devs = Vec::new();
        let mut coll_hinges = Vec::new();
        for s in 0..t {
            let agent_slices: Vec<NodeId> = (0..n).map(|i| tape.slice_cols(ys[s], 2 * i, 2)).collect();
            let reference = full_frames
                .iter()
                .min_by_key(|&&r| (r as i64 - s as i64).unsigned_abs())
                .copied();
            for i in 0..n {
                for j in i + 1..n {
                    let d = tape.sub(agent_slices[i], agent_slices[j]);
                    let dsq = tape.mul(d, d);
                    let ssum = tape.sum(dsq);
                    let safe = tape.add_scalar(ssum, 1e-12);
                    let dist = tape.sqrt(safe);
                    if cfg.lambda_form > 0.0 {
                        if let Some(r) = reference {
                            let dx = seq.x_obs()[(i, r, 0)] - seq.x_obs()[(j, r, 0)];
                            let dy = seq.x_obs()[(i, r, 1)] - seq.x_obs()[(j, r, 1)];
                            let ref_dist = (dx * dx + dy * dy).sqrt();
                            form_devs.push(tape.add_scalar(dist, -ref_dist));
                        }
                    }
                    if cfg.lambda_coll > 0.0 {
                        let neg = tape.scale(dist, -1.0);
                        let margin = tape.add_scalar(neg, cfg.collision_radius);
                        coll_hinges.push(tape.relu(margin));
                    }
                }
            }
        }
        if !form_devs.is_empty() {
            let cat = tape.concat_cols(&form_devs);
            form = tape.sum_squares(cat);
        }
        if !coll_hinges.is_empty() {
            let cat = tape.concat_cols(&coll_hinges);
            coll = tape.sum_squares(cat);
        }
    }

    let breakdown_raw = [
        ("reconstruction", tape.scalar(recon)),
        ("kl", tape.scalar(kl)),
        ("smoothness", tape.scalar(smooth)),
        ("formation", tape.scalar(form)),
        ("collision", tape.scalar(coll)),
    ];
    for (term, value) in breakdown_raw {
        if !value.is_finite() {
            return Err(ImputationError::NumericalInstability { term });
        }
    }

    let kl_w = tape.scale(kl, cfg.beta);
    let sm_w = tape.scale(smooth, cfg.lambda_smooth);
    let fo_w = tape.scale(form, cfg.lambda_form);
    let co_w = tape.scale(coll, cfg.lambda_coll);
    let mut total = tape.add(recon, kl_w);
    total = tape.add(total, sm_w);
    total = tape.add(total, fo_w);
    total = tape.add(total, co_w);
    let total_value = tape.scalar(total);
    if !total_value.is_finite() {
        return Err(ImputationError::NumericalInstability { term: "total" });
    }

    let breakdown = ElboBreakdown {
        total: total_value,
        reconstruction: breakdown_raw[0].1,
        kl: breakdown_raw[1].1,
        smoothness: breakdown_raw[2].1,
        formation: breakdown_raw[3].1,
        collision: breakdown_raw[4].1,
    };
    Ok((tape, pn.ordered, total, breakdown))
}

fn sample_eps(latent_dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..latent_dim)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect()
}

/// Evaluates the training objective on one sequence with a single
/// reparameterized latent sample drawn from `seed`, returning the loss
/// terms and the exact gradient with respect to the flattened parameters.
pub fn elbo_loss(
    params: &ImputerParams,
    seq: &ObservedSequence,
    x_true: &Array3<f64>,
    cfg: &LatentConfig,
    seed: u64,
) -> Result<(ElboBreakdown, Vec<f64>), ImputationError> {
    let eps = sample_eps(params.latent_dim, seed);
    let (mut tape, ordered, total, breakdown) = build_objective(params, seq, x_true, cfg, &eps)?;
    tape.backward(total);
    let mut grad = Vec::with_capacity(params.parameter_count());
    for id in ordered {
        grad.extend(tape.grad(id).iter().copied());
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(ImputationError::NumericalInstability { term: "gradient" });
    }
    Ok((breakdown, grad))
}

/// Objective value without the backward pass, for cheap evaluation loops.
pub(crate) fn elbo_value(
    params: &ImputerParams,
    seq: &ObservedSequence,
    x_true: &Array3<f64>,
    cfg: &LatentConfig,
    seed: u64,
) -> Result<ElboBreakdown, ImputationError> {
    let eps = sample_eps(params.latent_dim, seed);
    let (_, _, _, breakdown) = build_objective(params, seq, x_true, cfg, &eps)?;
    Ok(breakdown)
}

/// Distillation term: squared difference between the learner's decoding
/// of the masked sequence and a demonstrator's decoding of the full one.
///
/// Returns the weighted term value and its gradient with respect to the
/// learner's parameters; the demonstrator's output is a constant target.
pub fn distill_step(
    learner: &ImputerParams,
    demonstrator: &ImputerParams,
    seq_full: &ObservedSequence,
    seq_masked: &ObservedSequence,
    weight: f64,
) -> Result<(f64, Vec<f64>), ImputationError> {
    check_compat(learner, seq_masked)?;
    check_compat(demonstrator, seq_full)?;
    if seq_full.n_frames() != seq_masked.n_frames() || seq_full.n_agents() != seq_masked.n_agents() {
        return Err(ImputationError::DimensionError {
            what: "full and masked sequences must share shape".into(),
        });
    }

    let demo_posterior = encode(demonstrator, seq_full)?;
    let target = decode(demonstrator, &demo_posterior.mu, seq_full)?;

    let (n, t) = (seq_masked.n_agents(), seq_masked.n_frames());
    let mut tape = Tape::new();
    let pn = insert_params(&mut tape, learner);
    let feats: Vec<NodeId> = (0..t)
        .map(|s| {
            let f = frame_features(seq_masked, s);
            tape.constant(f)
        })
        .collect();
    let (mu, _) = encoder_nodes(&mut tape, &pn, &feats, learner.hidden_dim);
    let ys = decoder_nodes(&mut tape, &pn, &feats, mu, learner.hidden_dim);

    let mut acc: Option<NodeId> = None;
    for s in 0..t {
        let mut row = Array2::zeros((1, 2 * n));
        for i in 0..n {
            row[(0, 2 * i)] = target[(i, s, 0)];
            row[(0, 2 * i + 1)] = target[(i, s, 1)];
        }
        let target_node = tape.constant(row);
        let diff = tape.sub(ys[s], target_node);
        let term = tape.sum_squares(diff);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let loss = tape.scale(acc.expect("at least one frame"), weight);
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(ImputationError::NumericalInstability { term: "distillation" });
    }
    tape.backward(loss);
    let mut grad = Vec::with_capacity(learner.parameter_count());
    for id in pn.ordered {
        grad.extend(tape.grad(id).iter().copied());
    }
    Ok((value, grad))
}
