//! Forward pass: featurization, joint encoding, masking, fusion, decoding.

use super::{
    FusionStrategy, GateWeights, JointStates, Modality, ModelConfig, Params, QueryOutput,
    TXT_POS_DIM, VIS_POS_DIM,
};
use crate::boxes::{BoxXYWH, MIN_EXTENT};
use crate::error::{Error, Result};
use crate::event::VoxelGrid;
use crate::frame::GrayImage;
use crate::linalg::{axpy, dot};
use crate::matching::softmax;
use crate::text::AttributeMask;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

// Tunable while the architecture settles; read once per process.
pub(super) fn attn_temp() -> f64 {
    static V: std::sync::OnceLock<f64> = std::sync::OnceLock::new();
    *V.get_or_init(|| env_f64("EVG_ATTN_TEMP", 4.0))
}

pub(super) fn extent_gain() -> f64 {
    static V: std::sync::OnceLock<f64> = std::sync::OnceLock::new();
    *V.get_or_init(|| env_f64("EVG_EXTENT_GAIN", 2.0))
}

/// Patch-pooled sensor features plus token ids for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFeatures {
    /// `visual_len x (2 * bins)` mean event counts per patch, or None in
    /// frame-only mode.
    pub event_patches: Option<Vec<f64>>,
    /// Per-patch mean intensity centered at 0, or None in event-only mode.
    pub frame_patches: Option<Vec<f64>>,
    pub token_ids: Vec<usize>,
}

impl SampleFeatures {
    pub fn c_tok(&self) -> usize {
        self.token_ids.len()
    }
}

/// Per-(polarity, bin) pooled statistics of each patch: total count plus
/// count-weighted pixel offsets within the patch. All three are linear
/// projections of the grid; the offset channels preserve sub-patch
/// localization that plain pooling would destroy.
pub const GRID_STATS: usize = 3;

/// Pooled statistics of each frame patch: mean intensity plus
/// intensity-weighted pixel offsets.
pub const FRAME_STATS: usize = 3;

/// Pool a voxel grid into `visual_len x (2 * bins * GRID_STATS)` features,
/// laid out channel-major then bin, with `[count, count*dx, count*dy]` per
/// (polarity, bin). Offsets are relative to the patch center in units of the
/// patch size.
pub fn featurize_grid(grid: &VoxelGrid, patch: usize) -> Result<Vec<f64>> {
    if patch == 0
        || grid.width as usize % patch != 0
        || grid.height as usize % patch != 0
    {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} must divide the {}x{} grid",
            grid.width, grid.height
        )));
    }
    let rows = grid.height as usize / patch;
    let cols = grid.width as usize / patch;
    let feat_dim = 2 * grid.bins * GRID_STATS;
    // an edge sweep deposits on the order of `patch` events per bin in a
    // patch, so dividing by `patch` keeps features near unit scale
    let norm = 1.0 / patch as f64;
    let mut out = vec![0.0; rows * cols * feat_dim];
    let half = (patch as f64 - 1.0) / 2.0;
    for c in 0..2 {
        for b in 0..grid.bins {
            for y in 0..grid.height as usize {
                for x in 0..grid.width as usize {
                    let count = grid.get(c, b, y, x);
                    if count > 0 {
                        let v = (y / patch) * cols + x / patch;
                        let dx = (x % patch) as f64 - half;
                        let dy = (y % patch) as f64 - half;
                        let base = v * feat_dim + (c * grid.bins + b) * GRID_STATS;
                        let w = count as f64 * norm;
                        out[base] += w;
                        out[base + 1] += w * dx / patch as f64;
                        out[base + 2] += w * dy / patch as f64;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Pool a grayscale frame into `visual_len x FRAME_STATS` features: centered
/// mean intensity plus intensity-weighted pixel offsets.
pub fn featurize_frame(frame: &GrayImage, patch: usize) -> Result<Vec<f64>> {
    if patch == 0
        || frame.width as usize % patch != 0
        || frame.height as usize % patch != 0
    {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} must divide the {}x{} frame",
            frame.width, frame.height
        )));
    }
    let rows = frame.height as usize / patch;
    let cols = frame.width as usize / patch;
    let half = (patch as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; rows * cols * FRAME_STATS];
    for y in 0..frame.height as usize {
        for x in 0..frame.width as usize {
            let v = (y / patch) * cols + x / patch;
            let dx = (x % patch) as f64 - half;
            let dy = (y % patch) as f64 - half;
            // centered intensity so the mid-gray background contributes nothing
            let val = 2.0 * (frame.get(x, y) as f64 / 255.0 - 0.5) / (patch * patch) as f64;
            out[v * FRAME_STATS] += val;
            out[v * FRAME_STATS + 1] += val * dx / patch as f64;
            out[v * FRAME_STATS + 2] += val * dy / patch as f64;
        }
    }
    Ok(out)
}

pub(super) fn vis_pos_features(row: usize, col: usize, rows: usize, cols: usize) -> [f64; VIS_POS_DIM] {
    let r = (row as f64 + 0.5) / rows as f64;
    let c = (col as f64 + 0.5) / cols as f64;
    let mut out = [0.0; VIS_POS_DIM];
    for (q, f) in [1.0, 2.0, 4.0, 8.0].iter().enumerate() {
        out[2 * q] = (std::f64::consts::PI * f * r).sin();
        out[2 * q + 1] = (std::f64::consts::PI * f * r).cos();
        out[8 + 2 * q] = (std::f64::consts::PI * f * c).sin();
        out[8 + 2 * q + 1] = (std::f64::consts::PI * f * c).cos();
    }
    out
}

pub(super) fn txt_pos_features(index: usize) -> [f64; TXT_POS_DIM] {
    let t = index as f64 / 64.0;
    let mut out = [0.0; TXT_POS_DIM];
    for (q, f) in [1.0, 2.0, 4.0, 8.0].iter().enumerate() {
        out[2 * q] = (2.0 * std::f64::consts::PI * f * t).sin();
        out[2 * q + 1] = (2.0 * std::f64::consts::PI * f * t).cos();
    }
    out
}

/// One attribute branch of the forward pass.
#[derive(Debug, Clone)]
pub struct BranchTrace {
    /// Masked joint states, `L x C`.
    pub masked: Vec<f64>,
    /// tanh activations of the expert's hidden layer, `L x hidden`.
    pub hidden: Vec<f64>,
    /// Refined expert features, `L x C`.
    pub expert: Vec<f64>,
    /// Mean over the sequence dimension of `expert`, length `C`.
    pub descriptor: Vec<f64>,
}

/// Refined per-attribute tensors and their mean-pooled descriptors.
#[derive(Debug, Clone)]
pub struct ExpertFeatures {
    pub refined: Vec<JointStates>,
    pub descriptors: Vec<Vec<f64>>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub visual_len: usize,
    pub c_tok: usize,
    pub channels: usize,
    /// Input embeddings, `L x C`.
    pub x: Vec<f64>,
    /// tanh activations of the two encoder blocks, `L x C` each.
    pub enc_tanh: [Vec<f64>; 2],
    /// States after block 1, `L x C`.
    pub h1: Vec<f64>,
    /// Encoder output states.
    pub states: JointStates,
    pub branches: Vec<BranchTrace>,
    /// Gating noise drawn this pass (one draw per active attribute).
    pub gate_noise: Vec<f64>,
    /// Softmax weights over active attributes (internal order).
    pub active_lambda: Vec<f64>,
    pub gate: GateWeights,
    /// Fused representation, `L x C`.
    pub fused: Vec<f64>,
    /// Decoder attention rows, `Q x L` (already softmaxed).
    pub attn: Vec<f64>,
    /// Attended values, `Q x C`.
    pub attended: Vec<f64>,
    /// Pre-squash box activations, `Q x 4` (before the anchor offset).
    pub box_z: Vec<f64>,
    /// Per-query visual attention centroid.
    pub anchors: Vec<(f64, f64)>,
    /// Per-query attention standard deviation around the centroid.
    pub spreads: Vec<(f64, f64)>,
    /// Per-query attention mass on visual positions.
    pub vis_mass: Vec<f64>,
    /// Mean of the fused text states.
    pub text_summary: Vec<f64>,
    /// Text-conditioned query vectors, `Q x C`.
    pub eff_queries: Vec<f64>,
    /// Query-side alignment vectors, `Q x C`.
    pub r_align: Vec<f64>,
    /// Token-side alignment vectors, `C_tok x C`.
    pub u_align: Vec<f64>,
    pub output: QueryOutput,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.visual_len + self.c_tok
    }

    pub fn expert_features(&self) -> ExpertFeatures {
        let refined = self
            .branches
            .iter()
            .map(|b| JointStates {
                data: b.expert.clone(),
                seq_len: self.seq_len(),
                channels: self.channels,
                visual_len: self.visual_len,
            })
            .collect();
        let descriptors = self.branches.iter().map(|b| b.descriptor.clone()).collect();
        ExpertFeatures { refined, descriptors }
    }
}

fn embed_inputs(params: &Params, config: &ModelConfig, features: &SampleFeatures) -> Result<Vec<f64>> {
    let c = config.channel_width;
    let v_len = config.visual_len();
    let c_tok = features.c_tok();
    let l = v_len + c_tok;
    let rows = config.patch_rows();
    let cols = config.patch_cols();

    match config.modality {
        Modality::EventOnly if features.event_patches.is_none() => {
            return Err(Error::InvalidArgument("event-only model needs event features".into()))
        }
        Modality::FrameOnly if features.frame_patches.is_none() => {
            return Err(Error::InvalidArgument("frame-only model needs frame features".into()))
        }
        Modality::Fusion
            if features.event_patches.is_none() || features.frame_patches.is_none() =>
        {
            return Err(Error::InvalidArgument("fusion model needs event and frame features".into()))
        }
        _ => {}
    }
    if let Some(ev) = &features.event_patches {
        if ev.len() != v_len * config.event_feature_dim() {
            return Err(Error::InvalidArgument("event feature size mismatch".into()));
        }
    }
    if let Some(fr) = &features.frame_patches {
        if fr.len() != v_len * config.frame_feature_dim() {
            return Err(Error::InvalidArgument("frame feature size mismatch".into()));
        }
    }
    for &id in &features.token_ids {
        if id >= config.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "token id {id} outside vocabulary of {}",
                config.vocab_size
            )));
        }
    }

    let mut x = vec![0.0; l * c];
    let event_dim = config.event_feature_dim();
    for v in 0..v_len {
        let row = &mut x[v * c..(v + 1) * c];
        if config.modality != Modality::FrameOnly {
            let w = params.w_event.as_ref().expect("event projection present");
            let u = &features.event_patches.as_ref().unwrap()[v * event_dim..(v + 1) * event_dim];
            for (ci, o) in row.iter_mut().enumerate() {
                *o += dot(w.row(ci), u);
            }
        }
        if config.modality != Modality::EventOnly {
            let w = params.w_frame.as_ref().expect("frame projection present");
            let fdim = config.frame_feature_dim();
            let f = &features.frame_patches.as_ref().unwrap()[v * fdim..(v + 1) * fdim];
            for (ci, o) in row.iter_mut().enumerate() {
                *o += dot(w.row(ci), f);
            }
        }
        let pos = vis_pos_features(v / cols, v % cols, rows, cols);
        for (ci, o) in row.iter_mut().enumerate() {
            *o += dot(params.w_vis_pos.row(ci), &pos) + params.b_vis[ci];
        }
    }
    for (j, &id) in features.token_ids.iter().enumerate() {
        let row = &mut x[(v_len + j) * c..(v_len + j + 1) * c];
        row.copy_from_slice(params.embed.row(id));
        let pos = txt_pos_features(j);
        for (ci, o) in row.iter_mut().enumerate() {
            *o += dot(params.w_txt_pos.row(ci), &pos) + params.b_txt[ci];
        }
    }
    Ok(x)
}

fn encoder_block(w: &crate::linalg::Mat, b: &[f64], input: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let l = input.len() / c;
    let mut tanh_out = vec![0.0; l * c];
    let mut out = input.to_vec();
    for li in 0..l {
        let x_row = &input[li * c..(li + 1) * c];
        let t_row = &mut tanh_out[li * c..(li + 1) * c];
        for ci in 0..c {
            t_row[ci] = (dot(w.row(ci), x_row) + b[ci]).tanh();
        }
        let o_row = &mut out[li * c..(li + 1) * c];
        for ci in 0..c {
            o_row[ci] += t_row[ci];
        }
    }
    (tanh_out, out)
}

/// Encode sensor inputs and tokens into joint hidden states.
///
/// Visual features are patch-pooled linear projections of the grid and/or
/// frame (with fixed sinusoidal position features mixed in through learned
/// projections); text features are learned token embeddings. The concatenated
/// sequence passes through two residual tanh blocks.
pub fn encode(
    grid: Option<&VoxelGrid>,
    frame: Option<&GrayImage>,
    token_ids: &[usize],
    params: &Params,
    config: &ModelConfig,
) -> Result<JointStates> {
    let features = SampleFeatures {
        event_patches: match (config.modality, grid) {
            (Modality::FrameOnly, _) => None,
            (_, Some(g)) => Some(featurize_grid(g, config.visual_patch)?),
            (_, None) => None,
        },
        frame_patches: match (config.modality, frame) {
            (Modality::EventOnly, _) => None,
            (_, Some(f)) => Some(featurize_frame(f, config.visual_patch)?),
            (_, None) => None,
        },
        token_ids: token_ids.to_vec(),
    };
    encode_features(&features, params, config)
}

/// [`encode`] over pre-pooled features.
pub fn encode_features(
    features: &SampleFeatures,
    params: &Params,
    config: &ModelConfig,
) -> Result<JointStates> {
    config.validate()?;
    let c = config.channel_width;
    let x = embed_inputs(params, config, features)?;
    let (_, h1) = encoder_block(&params.enc1_w, &params.enc1_b, &x, c);
    let (_, h2) = encoder_block(&params.enc2_w, &params.enc2_b, &h1, c);
    Ok(JointStates {
        data: h2,
        seq_len: config.visual_len() + features.c_tok(),
        channels: c,
        visual_len: config.visual_len(),
    })
}

/// Zero whole positions of the states where the mask bit is 0.
pub fn mask_states(states: &JointStates, mask: &AttributeMask) -> Result<JointStates> {
    if mask.bits.len() != states.seq_len {
        return Err(Error::InvalidArgument(format!(
            "mask length {} does not match sequence length {}",
            mask.bits.len(),
            states.seq_len
        )));
    }
    let mut out = states.clone();
    for (l, &bit) in mask.bits.iter().enumerate() {
        if !bit {
            out.position_mut(l).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

fn expert_forward(
    expert: &super::Expert,
    masked: &[f64],
    c: usize,
    hd: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let l = masked.len() / c;
    let mut hidden = vec![0.0; l * hd];
    let mut out = vec![0.0; l * c];
    let mut descriptor = vec![0.0; c];
    for li in 0..l {
        let x_row = &masked[li * c..(li + 1) * c];
        let h_row = &mut hidden[li * hd..(li + 1) * hd];
        for hi in 0..hd {
            h_row[hi] = (dot(expert.w1.row(hi), x_row) + expert.b1[hi]).tanh();
        }
        let o_row = &mut out[li * c..(li + 1) * c];
        for ci in 0..c {
            o_row[ci] = dot(expert.w2.row(ci), h_row) + expert.b2[ci];
        }
        axpy(1.0, o_row, &mut descriptor);
    }
    let scale = 1.0 / l as f64;
    descriptor.iter_mut().for_each(|v| *v *= scale);
    (hidden, out, descriptor)
}

fn padded_lambda(config: &ModelConfig, active: &[f64]) -> [f64; 4] {
    let mut lambda = [0.0; 4];
    for (slot, kind) in config.active_attributes().iter().enumerate() {
        lambda[kind.index()] = active[slot];
    }
    lambda
}

/// Noisy-gated mixture fusion of masked per-attribute states.
///
/// Each input is refined by its (unshared) expert, mean-pooled into a
/// descriptor, and the concatenated descriptors are projected to gating
/// logits. With noise enabled, `sigma * eps` with iid standard-normal `eps`
/// perturbs the logits before the softmax. The fused states are the
/// lambda-weighted sum of the expert tensors.
pub fn moee_fuse(
    masked: &[JointStates],
    params: &Params,
    config: &ModelConfig,
    noise_enabled: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(JointStates, GateWeights)> {
    if config.fusion != FusionStrategy::Moee {
        return Err(Error::InvalidConfiguration("model is not configured for MoEE fusion".into()));
    }
    let k = config.active_attributes().len();
    if masked.len() != k {
        return Err(Error::InvalidArgument(format!(
            "expected {k} masked state tensors, got {}",
            masked.len()
        )));
    }
    let first = &masked[0];
    if masked.iter().any(|m| m.seq_len != first.seq_len || m.channels != first.channels) {
        return Err(Error::InvalidArgument("masked states differ in shape".into()));
    }

    let c = config.channel_width;
    let hd = config.hidden_dim();
    let mut branches = Vec::with_capacity(k);
    for (i, states) in masked.iter().enumerate() {
        let (hidden, expert, descriptor) = expert_forward(&params.experts[i], &states.data, c, hd);
        branches.push((hidden, expert, descriptor));
    }
    let (lambda, noise, sigma) = gate_lambda(params, config, &branches, noise_enabled, rng)?;

    let mut fused = vec![0.0; first.data.len()];
    for (i, (_, expert, _)) in branches.iter().enumerate() {
        axpy(lambda[i], expert, &mut fused);
    }
    let gate = GateWeights {
        lambda: padded_lambda(config, &lambda),
        sigma,
        noise_enabled: noise_enabled && !noise.is_empty(),
    };
    Ok((
        JointStates {
            data: fused,
            seq_len: first.seq_len,
            channels: c,
            visual_len: first.visual_len,
        },
        gate,
    ))
}

fn gate_lambda(
    params: &Params,
    config: &ModelConfig,
    branches: &[(Vec<f64>, Vec<f64>, Vec<f64>)],
    noise_enabled: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let k = branches.len();
    let c = config.channel_width;
    let w_gate = params
        .w_gate
        .as_ref()
        .ok_or_else(|| Error::InvalidConfiguration("gate projection missing".into()))?;
    let sigma = params.sigma.map(|s| s[0].max(0.0)).unwrap_or(0.0);

    let mut concat = vec![0.0; k * c];
    for (i, (_, _, descriptor)) in branches.iter().enumerate() {
        concat[i * c..(i + 1) * c].copy_from_slice(descriptor);
    }
    // logits = concat^T W_gate, one logit per attribute column
    let mut logits = vec![0.0; k];
    for (m, &cm) in concat.iter().enumerate() {
        let row = w_gate.row(m);
        for (j, l) in logits.iter_mut().enumerate() {
            *l += cm * row[j];
        }
    }
    let mut noise = Vec::new();
    if noise_enabled {
        let rng = rng.ok_or_else(|| {
            Error::InvalidArgument("noise enabled but no generator supplied".into())
        })?;
        for l in logits.iter_mut() {
            let eps: f64 = StandardNormal.sample(rng);
            *l += sigma * eps;
            noise.push(eps);
        }
    }
    Ok((softmax(&logits), noise, sigma))
}

/// Decode fused states into per-query boxes and token logits.
///
/// Each learned query vector attends once over the fused sequence; the box
/// head squashes around the query's visual attention centroid (so attention
/// directly steers localization) and token logits are scaled dot products
/// between projected query and text-position vectors.
pub fn decode(fused: &JointStates, params: &Params, config: &ModelConfig) -> Result<QueryOutput> {
    Ok(decode_traced(fused, params, config)?.output)
}

/// Normalized patch-center coordinates of every visual position.
pub(super) fn patch_centers(config: &ModelConfig) -> Vec<(f64, f64)> {
    let rows = config.patch_rows();
    let cols = config.patch_cols();
    (0..rows * cols)
        .map(|v| {
            let r = (v / cols) as f64;
            let c = (v % cols) as f64;
            ((c + 0.5) / cols as f64, (r + 0.5) / rows as f64)
        })
        .collect()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Centroid and standard deviation of an attention row over the visual
/// positions: `(ax, ay, sx, sy)`.
pub(super) fn attention_moments(
    weights: &[f64],
    centers: &[(f64, f64)],
    v_len: usize,
) -> (f64, f64, f64, f64) {
    let mass: f64 = weights[..v_len].iter().sum();
    let mut ax = 0.0;
    let mut ay = 0.0;
    for (li, &w) in weights[..v_len].iter().enumerate() {
        ax += w * centers[li].0;
        ay += w * centers[li].1;
    }
    ax /= mass;
    ay /= mass;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (li, &w) in weights[..v_len].iter().enumerate() {
        var_x += w * (centers[li].0 - ax) * (centers[li].0 - ax);
        var_y += w * (centers[li].1 - ay) * (centers[li].1 - ay);
    }
    let sx = (var_x / mass).max(1e-8).sqrt();
    let sy = (var_y / mass).max(1e-8).sqrt();
    (ax, ay, sx, sy)
}

pub(super) struct DecodeTrace {
    pub output: QueryOutput,
    /// Mean of the fused text states; shifts every query.
    pub text_summary: Vec<f64>,
    /// Effective per-query vectors `q_n + W_qtext * text_summary`, `Q x C`.
    pub eff_queries: Vec<f64>,
    pub attn: Vec<f64>,
    pub attended: Vec<f64>,
    pub box_z: Vec<f64>,
    pub r_align: Vec<f64>,
    pub u_align: Vec<f64>,
    /// Per-query visual attention centroid `(ax, ay)`.
    pub anchors: Vec<(f64, f64)>,
    /// Per-query attention standard deviation `(sx, sy)` around the centroid.
    pub spreads: Vec<(f64, f64)>,
    /// Per-query total attention mass on visual positions.
    pub vis_mass: Vec<f64>,
}

pub(super) fn decode_traced(
    fused: &JointStates,
    params: &Params,
    config: &ModelConfig,
) -> Result<DecodeTrace> {
    let c = config.channel_width;
    let q = config.num_queries;
    let l = fused.seq_len;
    let v_len = fused.visual_len;
    let c_tok = l - v_len;
    let scale = 1.0 / (c as f64).sqrt();
    let centers = patch_centers(config);

    let mut attn = vec![0.0; q * l];
    let mut attended = vec![0.0; q * c];
    let mut anchors = Vec::with_capacity(q);
    let mut spreads = Vec::with_capacity(q);
    let mut vis_mass = Vec::with_capacity(q);
    let uniform = vec![1.0 / l as f64; l];
    let neutral = attention_moments(&uniform, &centers, v_len);
    let neutral_spread = (neutral.2, neutral.3);

    // queries are conditioned on the expression via the pooled text states
    let mut text_summary = vec![0.0; c];
    for j in 0..c_tok {
        axpy(1.0 / c_tok as f64, fused.position(v_len + j), &mut text_summary);
    }
    let mut eff_queries = vec![0.0; q * c];
    for n in 0..q {
        let row = &mut eff_queries[n * c..(n + 1) * c];
        for ci in 0..c {
            row[ci] = params.queries.row(n)[ci] + dot(params.w_qtext.row(ci), &text_summary);
        }
    }
    for n in 0..q {
        let query = &eff_queries[n * c..(n + 1) * c];
        let logits: Vec<f64> =
            (0..l).map(|li| attn_temp() * dot(query, fused.position(li))).collect();
        let weights = softmax(&logits);
        let v_row = &mut attended[n * c..(n + 1) * c];
        for (li, &w) in weights.iter().enumerate() {
            axpy(w, fused.position(li), v_row);
        }
        let (ax, ay, sx, sy) = attention_moments(&weights, &centers, v_len);
        let mass: f64 = weights[..v_len].iter().sum();
        anchors.push((ax, ay));
        spreads.push((sx, sy));
        vis_mass.push(mass);
        attn[n * l..(n + 1) * l].copy_from_slice(&weights);
    }

    // box head: logistic squash around the attention centroid, with the
    // extent prior taken from the attention spread
    let mut box_z = vec![0.0; q * 4];
    let mut boxes = Vec::with_capacity(q);
    for n in 0..q {
        let v_row = &attended[n * c..(n + 1) * c];
        let z_row = &mut box_z[n * 4..(n + 1) * 4];
        for k in 0..4 {
            z_row[k] = dot(params.w_box.row(k), v_row) + params.b_box[k];
            if k >= 2 {
                z_row[k] += dot(params.w_box_text.row(k - 2), &text_summary);
            }
        }
        let s = sigmoid;
        let (ax, ay) = anchors[n];
        let (sx, sy) = spreads[n];
        boxes.push(BoxXYWH {
            cx: s(z_row[0] + logit(ax)),
            cy: s(z_row[1] + logit(ay)),
            w: s(z_row[2] + extent_gain() * (sx - neutral_spread.0)).max(MIN_EXTENT),
            h: s(z_row[3] + extent_gain() * (sy - neutral_spread.1)).max(MIN_EXTENT),
        });
    }

    // token alignment head, residual so the bilinear form is alive at init
    let mut r_align = vec![0.0; q * c];
    for n in 0..q {
        let v_row = &attended[n * c..(n + 1) * c];
        let r_row = &mut r_align[n * c..(n + 1) * c];
        for ci in 0..c {
            r_row[ci] = v_row[ci] + dot(params.w_qalign.row(ci), v_row) + params.b_qalign[ci];
        }
    }
    let mut u_align = vec![0.0; c_tok * c];
    for j in 0..c_tok {
        let f_row = fused.position(fused.visual_len + j);
        let u_row = &mut u_align[j * c..(j + 1) * c];
        for ci in 0..c {
            u_row[ci] = f_row[ci] + dot(params.w_talign.row(ci), f_row);
        }
    }
    let mut token_logits = Vec::with_capacity(q);
    for n in 0..q {
        let r_row = &r_align[n * c..(n + 1) * c];
        let row: Vec<f64> =
            (0..c_tok).map(|j| scale * dot(r_row, &u_align[j * c..(j + 1) * c])).collect();
        token_logits.push(row);
    }

    Ok(DecodeTrace { output: QueryOutput { boxes, token_logits }, text_summary, eff_queries, attn, attended, box_z, r_align, u_align, anchors, spreads, vis_mass })
}

/// Full forward pass with the intermediate activations kept for backward.
pub fn forward(
    params: &Params,
    config: &ModelConfig,
    features: &SampleFeatures,
    masks: &[AttributeMask],
    noise_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardTrace> {
    config.validate()?;
    let c = config.channel_width;
    let hd = config.hidden_dim();
    let v_len = config.visual_len();
    let c_tok = features.c_tok();
    let l = v_len + c_tok;

    let x = embed_inputs(params, config, features)?;
    let (t1, h1) = encoder_block(&params.enc1_w, &params.enc1_b, &x, c);
    let (t2, h2) = encoder_block(&params.enc2_w, &params.enc2_b, &h1, c);
    let states = JointStates { data: h2, seq_len: l, channels: c, visual_len: v_len };

    let k = config.active_attributes().len();
    let mut branches = Vec::new();
    let mut active_lambda = vec![1.0];
    let mut gate_noise = Vec::new();
    let mut gate = GateWeights::uniform_over(config.active_attributes());
    let fused;

    if config.fusion == FusionStrategy::None {
        fused = states.data.clone();
    } else {
        if masks.len() != k {
            return Err(Error::InvalidArgument(format!(
                "expected {k} attribute masks, got {}",
                masks.len()
            )));
        }
        for (slot, mask) in masks.iter().enumerate() {
            if mask.kind != config.active_attributes()[slot] {
                return Err(Error::InvalidArgument(
                    "masks must follow the configured attribute order".into(),
                ));
            }
            if mask.bits.len() != l {
                return Err(Error::InvalidArgument(format!(
                    "mask length {} does not match sequence length {l}",
                    mask.bits.len()
                )));
            }
            let mut masked = states.data.clone();
            for (li, &bit) in mask.bits.iter().enumerate() {
                if !bit {
                    masked[li * c..(li + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            let (hidden, expert, descriptor) =
                expert_forward(&params.experts[slot], &masked, c, hd);
            branches.push(BranchTrace { masked, hidden, expert, descriptor });
        }

        match config.fusion {
            FusionStrategy::Add => {
                active_lambda = vec![1.0 / k as f64; k];
            }
            FusionStrategy::Moee => {
                let tuples: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = branches
                    .iter()
                    .map(|b| (Vec::new(), Vec::new(), b.descriptor.clone()))
                    .collect();
                let noise_on = noise_rng.is_some();
                let (lambda, noise, sigma) =
                    gate_lambda(params, config, &tuples, noise_on, noise_rng)?;
                gate = GateWeights {
                    lambda: padded_lambda(config, &lambda),
                    sigma,
                    noise_enabled: noise_on,
                };
                active_lambda = lambda;
                gate_noise = noise;
            }
            FusionStrategy::Attention => {
                let u = params
                    .u_attn
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfiguration("attention vector missing".into()))?;
                let scale = 1.0 / (c as f64).sqrt();
                let logits: Vec<f64> =
                    branches.iter().map(|b| scale * dot(u, &b.descriptor)).collect();
                active_lambda = softmax(&logits);
                gate = GateWeights {
                    lambda: padded_lambda(config, &active_lambda),
                    sigma: 0.0,
                    noise_enabled: false,
                };
            }
            FusionStrategy::Concat => {
                active_lambda = vec![1.0 / k as f64; k];
            }
            FusionStrategy::None => unreachable!(),
        }

        match config.fusion {
            FusionStrategy::Concat => {
                let w_cat = params
                    .w_cat
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfiguration("concat projection missing".into()))?;
                let b_cat = params.b_cat.as_ref().unwrap();
                let mut out = vec![0.0; l * c];
                let mut concat_row = vec![0.0; k * c];
                for li in 0..l {
                    for (i, b) in branches.iter().enumerate() {
                        concat_row[i * c..(i + 1) * c]
                            .copy_from_slice(&b.expert[li * c..(li + 1) * c]);
                    }
                    let o_row = &mut out[li * c..(li + 1) * c];
                    for ci in 0..c {
                        o_row[ci] = dot(w_cat.row(ci), &concat_row) + b_cat[ci];
                    }
                }
                fused = out;
            }
            _ => {
                let mut out = vec![0.0; l * c];
                for (i, b) in branches.iter().enumerate() {
                    axpy(active_lambda[i], &b.expert, &mut out);
                }
                fused = out;
            }
        }
    }

    let fused_states = JointStates { data: fused, seq_len: l, channels: c, visual_len: v_len };
    let decoded = decode_traced(&fused_states, params, config)?;

    Ok(ForwardTrace {
        visual_len: v_len,
        c_tok,
        channels: c,
        x,
        enc_tanh: [t1, t2],
        h1,
        states,
        branches,
        gate_noise,
        active_lambda,
        gate,
        fused: fused_states.data,
        attn: decoded.attn,
        attended: decoded.attended,
        box_z: decoded.box_z,
        anchors: decoded.anchors,
        spreads: decoded.spreads,
        vis_mass: decoded.vis_mass,
        text_summary: decoded.text_summary,
        eff_queries: decoded.eff_queries,
        r_align: decoded.r_align,
        u_align: decoded.u_align,
        output: decoded.output,
    })
}

pub(super) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
