//! Analytic backward pass through the full network.

use super::forward::{
    attn_temp, extent_gain, txt_pos_features, vis_pos_features, ForwardTrace, SampleFeatures,
};
use super::{FusionStrategy, Modality, ModelConfig, Params, TrainSample};
use crate::boxes::MIN_EXTENT;
use crate::error::Result;
use crate::linalg::{axpy, dot};
use crate::matching::{
    build_cost_matrix, hungarian_assign, pair_cost_with_grad, Assignment, LossBreakdown,
    LossWeights,
};
use crate::text::{AttributeMask, SoftTokenMap};

/// Loss breakdown plus parameter gradients for one sample.
pub struct SampleGradients {
    pub breakdown: LossBreakdown,
    pub grads: Params,
}

/// Backpropagate output-space gradients (`d loss / d boxes`,
/// `d loss / d token logits`) through the trace, accumulating into `grads`.
/// `masks` must be the same masks the forward pass saw (empty for
/// fusion strategy `none`).
pub fn backward(
    params: &Params,
    config: &ModelConfig,
    features: &SampleFeatures,
    masks: &[AttributeMask],
    trace: &ForwardTrace,
    d_boxes: &[[f64; 4]],
    d_logits: &[Vec<f64>],
    grads: &mut Params,
) {
    let c = config.channel_width;
    let q = config.num_queries;
    let l = trace.seq_len();
    let v_len = trace.visual_len;
    let c_tok = trace.c_tok;
    let scale = 1.0 / (c as f64).sqrt();

    let mut d_attended = vec![0.0; q * c];
    let mut d_fused = vec![0.0; l * c];
    let mut d_text_summary = vec![0.0; c];

    // box head: cx/cy = sigmoid(z + logit(centroid)),
    // w/h = sigmoid(z + logit(clamped spread)) floored at MIN_EXTENT
    let mut d_anchor = vec![(0.0, 0.0); q];
    let mut d_spread = vec![(0.0, 0.0); q];
    for n in 0..q {
        let b = &trace.output.boxes[n];
        let values = [b.cx, b.cy, b.w, b.h];
        let (ax, ay) = trace.anchors[n];
        let mut dz = [0.0; 4];
        for k in 0..4 {
            let floored = k >= 2 && values[k] <= MIN_EXTENT;
            if !floored {
                // the sigmoid output is the box value itself
                dz[k] = d_boxes[n][k] * values[k] * (1.0 - values[k]);
            }
        }
        // centroid offsets: d logit(a) / d a = 1 / (a (1 - a))
        d_anchor[n] = (dz[0] / (ax * (1.0 - ax)), dz[1] / (ay * (1.0 - ay)));
        // extent offsets are linear in the spread
        d_spread[n] = (dz[2] * extent_gain(), dz[3] * extent_gain());
        let v_row = &trace.attended[n * c..(n + 1) * c];
        for k in 0..4 {
            if dz[k] != 0.0 {
                grads.w_box.outer_acc_row(k, dz[k], v_row);
                grads.b_box[k] += dz[k];
                axpy(dz[k], params.w_box.row(k), &mut d_attended[n * c..(n + 1) * c]);
                if k >= 2 {
                    grads.w_box_text.outer_acc_row(k - 2, dz[k], &trace.text_summary);
                    axpy(dz[k], params.w_box_text.row(k - 2), &mut d_text_summary);
                }
            }
        }
    }

    // token head: m[n][j] = scale * r_n . u_j
    let mut d_r = vec![0.0; q * c];
    let mut d_u = vec![0.0; c_tok * c];
    for n in 0..q {
        let r_row = &trace.r_align[n * c..(n + 1) * c];
        for j in 0..c_tok {
            let g = d_logits[n][j];
            if g == 0.0 {
                continue;
            }
            let u_row = &trace.u_align[j * c..(j + 1) * c];
            axpy(scale * g, u_row, &mut d_r[n * c..(n + 1) * c]);
            axpy(scale * g, r_row, &mut d_u[j * c..(j + 1) * c]);
        }
    }
    // r = W_qalign v + b
    for n in 0..q {
        let dr_row = &d_r[n * c..(n + 1) * c];
        if dr_row.iter().all(|&v| v == 0.0) {
            continue;
        }
        let v_row = &trace.attended[n * c..(n + 1) * c];
        grads.w_qalign.outer_acc(dr_row, v_row);
        axpy(1.0, dr_row, &mut grads.b_qalign);
        let da_row = &mut d_attended[n * c..(n + 1) * c];
        axpy(1.0, dr_row, da_row);
        params.w_qalign.matvec_t_acc(dr_row, da_row);
    }
    // u_j = W_talign F_(v_len+j) + b
    for j in 0..c_tok {
        let du_row = &d_u[j * c..(j + 1) * c];
        if du_row.iter().all(|&v| v == 0.0) {
            continue;
        }
        let f_row = &trace.fused[(v_len + j) * c..(v_len + j + 1) * c];
        grads.w_talign.outer_acc(du_row, f_row);
        let df_row = &mut d_fused[(v_len + j) * c..(v_len + j + 1) * c];
        axpy(1.0, du_row, df_row);
        params.w_talign.matvec_t_acc(du_row, df_row);
    }

    // attention: v_n = sum_l a_nl F_l plus the centroid path through the
    // box head; a = softmax(ATTN_TEMP * q_eff . F_l)
    let centers = super::forward::patch_centers(config);
    for n in 0..q {
        let dv_row = &d_attended[n * c..(n + 1) * c];
        let (dax, day) = d_anchor[n];
        let (dsx, dsy) = d_spread[n];
        if dv_row.iter().all(|&v| v == 0.0)
            && dax == 0.0
            && day == 0.0
            && dsx == 0.0
            && dsy == 0.0
        {
            continue;
        }
        let a_row = &trace.attn[n * l..(n + 1) * l];
        let (ax, ay) = trace.anchors[n];
        let (sx, sy) = trace.spreads[n];
        let mass = trace.vis_mass[n];
        // d spread = d var / (2 s); d var / d a_l = ((p_l - a)^2 - var) / mass
        let dvx = dsx / (2.0 * sx);
        let dvy = dsy / (2.0 * sy);
        let var_x = sx * sx;
        let var_y = sy * sy;
        let mut da = vec![0.0; l];
        for li in 0..l {
            da[li] = dot(dv_row, &trace.fused[li * c..(li + 1) * c]);
            if li < v_len {
                let ex = centers[li].0 - ax;
                let ey = centers[li].1 - ay;
                da[li] += dax * ex / mass + day * ey / mass;
                da[li] += dvx * (ex * ex - var_x) / mass + dvy * (ey * ey - var_y) / mass;
            }
            axpy(a_row[li], dv_row, &mut d_fused[li * c..(li + 1) * c]);
        }
        let inner: f64 = a_row.iter().zip(&da).map(|(a, d)| a * d).sum();
        let query = &trace.eff_queries[n * c..(n + 1) * c];
        let mut dq_eff = vec![0.0; c];
        for li in 0..l {
            let dalpha = a_row[li] * (da[li] - inner);
            if dalpha == 0.0 {
                continue;
            }
            let f_row = &trace.fused[li * c..(li + 1) * c];
            axpy(attn_temp() * dalpha, f_row, &mut dq_eff);
            axpy(attn_temp() * dalpha, query, &mut d_fused[li * c..(li + 1) * c]);
        }
        // q_eff = q_n + W_qtext t_bar
        axpy(1.0, &dq_eff, grads.queries.row_mut(n));
        grads.w_qtext.outer_acc(&dq_eff, &trace.text_summary);
        params.w_qtext.matvec_t_acc(&dq_eff, &mut d_text_summary);
    }
    // t_bar is the mean of the fused text states
    if d_text_summary.iter().any(|&v| v != 0.0) {
        for j in 0..c_tok {
            axpy(
                1.0 / c_tok as f64,
                &d_text_summary,
                &mut d_fused[(v_len + j) * c..(v_len + j + 1) * c],
            );
        }
    }

    // fusion backward into d_states
    let mut d_states = vec![0.0; l * c];
    if config.fusion == FusionStrategy::None {
        d_states.copy_from_slice(&d_fused);
    } else {
        let k = config.active_attributes().len();
        let mut d_experts: Vec<Vec<f64>> = vec![vec![0.0; l * c]; k];
        match config.fusion {
            FusionStrategy::Add => {
                for d_exp in d_experts.iter_mut() {
                    axpy(1.0 / k as f64, &d_fused, d_exp);
                }
            }
            FusionStrategy::Concat => {
                let w_cat = params.w_cat.as_ref().unwrap();
                let g_cat = grads.w_cat.as_mut().unwrap();
                let gb_cat = grads.b_cat.as_mut().unwrap();
                let mut concat_row = vec![0.0; k * c];
                for li in 0..l {
                    let df_row = &d_fused[li * c..(li + 1) * c];
                    if df_row.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for (i, b) in trace.branches.iter().enumerate() {
                        concat_row[i * c..(i + 1) * c]
                            .copy_from_slice(&b.expert[li * c..(li + 1) * c]);
                    }
                    g_cat.outer_acc(df_row, &concat_row);
                    axpy(1.0, df_row, gb_cat);
                    let mut d_concat = vec![0.0; k * c];
                    w_cat.matvec_t_acc(df_row, &mut d_concat);
                    for (i, d_exp) in d_experts.iter_mut().enumerate() {
                        axpy(1.0, &d_concat[i * c..(i + 1) * c], &mut d_exp[li * c..(li + 1) * c]);
                    }
                }
            }
            FusionStrategy::Moee | FusionStrategy::Attention => {
                let lambda = &trace.active_lambda;
                let mut d_lambda = vec![0.0; k];
                for (i, b) in trace.branches.iter().enumerate() {
                    d_lambda[i] = dot(&d_fused, &b.expert);
                    axpy(lambda[i], &d_fused, &mut d_experts[i]);
                }
                // softmax backward
                let inner: f64 = lambda.iter().zip(&d_lambda).map(|(a, d)| a * d).sum();
                let d_logits_gate: Vec<f64> =
                    lambda.iter().zip(&d_lambda).map(|(a, d)| a * (d - inner)).collect();

                let mut d_descriptors = vec![vec![0.0; c]; k];
                if config.fusion == FusionStrategy::Moee {
                    let w_gate = params.w_gate.as_ref().unwrap();
                    let g_gate = grads.w_gate.as_mut().unwrap();
                    for (i, b) in trace.branches.iter().enumerate() {
                        for (m, &dm) in b.descriptor.iter().enumerate() {
                            let row = m + i * c;
                            for (j, &dg) in d_logits_gate.iter().enumerate() {
                                g_gate.data[row * k + j] += dm * dg;
                                d_descriptors[i][m] += w_gate.data[row * k + j] * dg;
                            }
                        }
                    }
                    // sigma reaches the logits only through the noise term,
                    // and only while unclamped
                    if !trace.gate_noise.is_empty()
                        && params.sigma.map(|s| s[0] > 0.0).unwrap_or(false)
                    {
                        if let Some(gs) = grads.sigma.as_mut() {
                            for (eps, dg) in trace.gate_noise.iter().zip(&d_logits_gate) {
                                gs[0] += eps * dg;
                            }
                        }
                    }
                } else {
                    let u = params.u_attn.as_ref().unwrap();
                    let gu = grads.u_attn.as_mut().unwrap();
                    for (i, b) in trace.branches.iter().enumerate() {
                        let dg = d_logits_gate[i];
                        if dg == 0.0 {
                            continue;
                        }
                        axpy(scale * dg, &b.descriptor, gu);
                        axpy(scale * dg, u, &mut d_descriptors[i]);
                    }
                }
                // descriptor = mean over L of the expert tensor
                let inv_l = 1.0 / l as f64;
                for (i, d_exp) in d_experts.iter_mut().enumerate() {
                    let dd = &d_descriptors[i];
                    if dd.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for li in 0..l {
                        axpy(inv_l, dd, &mut d_exp[li * c..(li + 1) * c]);
                    }
                }
            }
            FusionStrategy::None => unreachable!(),
        }

        // expert FFN backward per branch
        let hd = config.hidden_dim();
        for (i, branch) in trace.branches.iter().enumerate() {
            let expert = &params.experts[i];
            let g_expert = &mut grads.experts[i];
            let d_exp = &d_experts[i];
            let mask_bits = &masks[i].bits;
            for li in 0..l {
                let de_row = &d_exp[li * c..(li + 1) * c];
                if de_row.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let h_row = &branch.hidden[li * hd..(li + 1) * hd];
                let x_row = &branch.masked[li * c..(li + 1) * c];
                g_expert.w2.outer_acc(de_row, h_row);
                axpy(1.0, de_row, &mut g_expert.b2);
                let mut dt = vec![0.0; hd];
                expert.w2.matvec_t_acc(de_row, &mut dt);
                for (d, &t) in dt.iter_mut().zip(h_row) {
                    *d *= 1.0 - t * t;
                }
                g_expert.w1.outer_acc(&dt, x_row);
                axpy(1.0, &dt, &mut g_expert.b1);
                // gradient reaches the shared states only where the mask passes
                if mask_bits[li] {
                    let mut dx = vec![0.0; c];
                    expert.w1.matvec_t_acc(&dt, &mut dx);
                    axpy(1.0, &dx, &mut d_states[li * c..(li + 1) * c]);
                }
            }
        }
    }

    // encoder backward: h2 = h1 + tanh(W2 h1 + b2), h1 = x + tanh(W1 x + b1)
    let mut d_h1 = vec![0.0; l * c];
    for li in 0..l {
        let dh2_row = &d_states[li * c..(li + 1) * c];
        if dh2_row.iter().all(|&v| v == 0.0) {
            continue;
        }
        let t_row = &trace.enc_tanh[1][li * c..(li + 1) * c];
        let h1_row = &trace.h1[li * c..(li + 1) * c];
        let dz: Vec<f64> = dh2_row.iter().zip(t_row).map(|(&d, &t)| d * (1.0 - t * t)).collect();
        grads.enc2_w.outer_acc(&dz, h1_row);
        axpy(1.0, &dz, &mut grads.enc2_b);
        let dh1_row = &mut d_h1[li * c..(li + 1) * c];
        axpy(1.0, dh2_row, dh1_row);
        params.enc2_w.matvec_t_acc(&dz, dh1_row);
    }
    let mut d_x = vec![0.0; l * c];
    for li in 0..l {
        let dh1_row = &d_h1[li * c..(li + 1) * c];
        if dh1_row.iter().all(|&v| v == 0.0) {
            continue;
        }
        let t_row = &trace.enc_tanh[0][li * c..(li + 1) * c];
        let x_row = &trace.x[li * c..(li + 1) * c];
        let dz: Vec<f64> = dh1_row.iter().zip(t_row).map(|(&d, &t)| d * (1.0 - t * t)).collect();
        grads.enc1_w.outer_acc(&dz, x_row);
        axpy(1.0, &dz, &mut grads.enc1_b);
        let dx_row = &mut d_x[li * c..(li + 1) * c];
        axpy(1.0, dh1_row, dx_row);
        params.enc1_w.matvec_t_acc(&dz, dx_row);
    }

    // embedding backward
    let rows = config.patch_rows();
    let cols = config.patch_cols();
    let event_dim = config.event_feature_dim();
    for v in 0..v_len {
        let dx_row = &d_x[v * c..(v + 1) * c];
        if dx_row.iter().all(|&g| g == 0.0) {
            continue;
        }
        if config.modality != Modality::FrameOnly {
            let u = &features.event_patches.as_ref().unwrap()[v * event_dim..(v + 1) * event_dim];
            grads.w_event.as_mut().unwrap().outer_acc(dx_row, u);
        }
        if config.modality != Modality::EventOnly {
            let fdim = config.frame_feature_dim();
            let f = &features.frame_patches.as_ref().unwrap()[v * fdim..(v + 1) * fdim];
            grads.w_frame.as_mut().unwrap().outer_acc(dx_row, f);
        }
        let pos = vis_pos_features(v / cols, v % cols, rows, cols);
        grads.w_vis_pos.outer_acc(dx_row, &pos);
        axpy(1.0, dx_row, &mut grads.b_vis);
    }
    for (j, &id) in features.token_ids.iter().enumerate() {
        let dx_row = &d_x[(v_len + j) * c..(v_len + j + 1) * c];
        if dx_row.iter().all(|&g| g == 0.0) {
            continue;
        }
        axpy(1.0, dx_row, grads.embed.row_mut(id));
        let pos = txt_pos_features(j);
        grads.w_txt_pos.outer_acc(dx_row, &pos);
        axpy(1.0, dx_row, &mut grads.b_txt);
    }
}

/// Run forward (optionally with gate noise), match queries to pseudo-targets,
/// and return the loss breakdown together with all parameter gradients.
/// The assignment is held fixed during backpropagation.
pub fn sample_gradients(
    params: &Params,
    config: &ModelConfig,
    sample: &TrainSample,
    weights: &LossWeights,
    noise_rng: Option<&mut rand_chacha::ChaCha8Rng>,
    fixed_assignment: Option<Assignment>,
) -> Result<(SampleGradients, ForwardTrace)> {
    let trace = super::forward(params, config, &sample.features, &sample.masks, noise_rng)?;
    let maps: Vec<&SoftTokenMap> = sample.target_maps.iter().collect();
    let assignment = match fixed_assignment {
        Some(a) => a,
        None => {
            let costs = build_cost_matrix(&trace.output, &sample.target_box, &maps, weights)?;
            hungarian_assign(&costs)?
        }
    };

    let q = config.num_queries;
    let mut d_boxes = vec![[0.0; 4]; q];
    let mut d_logits: Vec<Vec<f64>> = (0..q).map(|_| vec![0.0; sample.features.c_tok()]).collect();
    let mut breakdown = LossBreakdown {
        total: 0.0,
        l1: 0.0,
        giou_term: 0.0,
        attr: 0.0,
        assignment: assignment.clone(),
    };
    for (i, &n) in assignment.pairs.iter().enumerate() {
        let (cost, terms, box_grad, logit_grad) = pair_cost_with_grad(
            &trace.output.boxes[n],
            &trace.output.token_logits[n],
            &sample.target_box,
            maps[i],
            weights,
        )?;
        breakdown.total += cost;
        breakdown.l1 += terms.l1;
        breakdown.giou_term += terms.giou_term;
        breakdown.attr += terms.attr;
        for k in 0..4 {
            d_boxes[n][k] += box_grad[k];
        }
        for (d, g) in d_logits[n].iter_mut().zip(&logit_grad) {
            *d += g;
        }
    }
    if !breakdown.total.is_finite() {
        return Err(crate::error::Error::NumericalFailure("loss is not finite".into()));
    }

    let mut grads = Params::zeros(config);
    backward(params, config, &sample.features, &sample.masks, &trace, &d_boxes, &d_logits, &mut grads);
    Ok((SampleGradients { breakdown, grads }, trace))
}
