//! Trainable parameters: deterministic initialization, flat views, and
//! named-tensor iteration for checkpointing and finite differences.

use super::{FusionStrategy, Modality, ModelConfig};
use crate::linalg::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One attribute expert: a two-layer tanh feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

/// All trainable weights of the grounding network.
///
/// Which tensors exist depends on the modality (event/frame projections) and
/// the fusion strategy (gate, concat projection, attention vector).
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub w_event: Option<Mat>,
    pub w_frame: Option<Mat>,
    pub w_vis_pos: Mat,
    pub b_vis: Vec<f64>,
    pub embed: Mat,
    pub w_txt_pos: Mat,
    pub b_txt: Vec<f64>,
    pub enc1_w: Mat,
    pub enc1_b: Vec<f64>,
    pub enc2_w: Mat,
    pub enc2_b: Vec<f64>,
    pub experts: Vec<Expert>,
    pub w_gate: Option<Mat>,
    pub sigma: Option<[f64; 1]>,
    pub w_cat: Option<Mat>,
    pub b_cat: Option<Vec<f64>>,
    pub u_attn: Option<Vec<f64>>,
    pub queries: Mat,
    pub w_qtext: Mat,
    pub w_box: Mat,
    pub w_box_text: Mat,
    pub b_box: Vec<f64>,
    pub w_qalign: Mat,
    pub b_qalign: Vec<f64>,
    pub w_talign: Mat,
}

fn fill_uniform(rng: &mut ChaCha8Rng, data: &mut [f64], fan_in: usize) {
    let limit = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in data.iter_mut() {
        *v = rng.random_range(-limit..limit);
    }
}

fn init_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    fill_uniform(rng, &mut m.data, fan_in);
    m
}

impl Params {
    /// Deterministic initialization from `config.seed`: weights uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero, sigma at its
    /// configured start value.
    pub fn init(config: &ModelConfig) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.channel_width;
        let hd = config.hidden_dim();
        let k = config.active_attributes().len();
        let event_dim = config.event_feature_dim();

        let w_event = (config.modality != Modality::FrameOnly)
            .then(|| init_mat(&mut rng, c, event_dim, event_dim));
        let w_frame = (config.modality != Modality::EventOnly).then(|| {
            init_mat(&mut rng, c, config.frame_feature_dim(), config.frame_feature_dim())
        });
        let w_vis_pos = init_mat(&mut rng, c, super::VIS_POS_DIM, super::VIS_POS_DIM);
        let b_vis = vec![0.0; c];
        let embed = init_mat(&mut rng, config.vocab_size, c, c);
        let w_txt_pos = init_mat(&mut rng, c, super::TXT_POS_DIM, super::TXT_POS_DIM);
        let b_txt = vec![0.0; c];
        let enc1_w = init_mat(&mut rng, c, c, c);
        let enc1_b = vec![0.0; c];
        let enc2_w = init_mat(&mut rng, c, c, c);
        let enc2_b = vec![0.0; c];

        let experts = if config.fusion == FusionStrategy::None {
            Vec::new()
        } else {
            (0..k)
                .map(|_| Expert {
                    w1: init_mat(&mut rng, hd, c, c),
                    b1: vec![0.0; hd],
                    w2: init_mat(&mut rng, c, hd, hd),
                    b2: vec![0.0; c],
                })
                .collect()
        };

        let w_gate = (config.fusion == FusionStrategy::Moee)
            .then(|| init_mat(&mut rng, k * c, k, k * c));
        let sigma = (config.fusion == FusionStrategy::Moee).then(|| [config.sigma_init]);
        let w_cat = (config.fusion == FusionStrategy::Concat)
            .then(|| init_mat(&mut rng, c, k * c, k * c));
        let b_cat = (config.fusion == FusionStrategy::Concat).then(|| vec![0.0; c]);
        let u_attn = (config.fusion == FusionStrategy::Attention).then(|| {
            let mut v = vec![0.0; c];
            fill_uniform(&mut rng, &mut v, c);
            v
        });

        let queries = init_mat(&mut rng, config.num_queries, c, c);
        let w_qtext = init_mat(&mut rng, c, c, c);
        let w_box = init_mat(&mut rng, 4, c, c);
        // text informs the extent rows only; positions must come from vision
        let w_box_text = init_mat(&mut rng, 2, c, c);
        let b_box = vec![0.0; 4];
        let w_qalign = init_mat(&mut rng, c, c, c);
        let b_qalign = vec![0.0; c];
        let w_talign = init_mat(&mut rng, c, c, c);

        Params {
            w_event,
            w_frame,
            w_vis_pos,
            b_vis,
            embed,
            w_txt_pos,
            b_txt,
            enc1_w,
            enc1_b,
            enc2_w,
            enc2_b,
            experts,
            w_gate,
            sigma,
            w_cat,
            b_cat,
            u_attn,
            queries,
            w_qtext,
            w_box,
            w_box_text,
            b_box,
            w_qalign,
            b_qalign,
            w_talign,
        }
    }

    /// Same tensor layout as [`Params::init`] with every value zero
    /// (sigma included); used for gradients and tests.
    pub fn zeros(config: &ModelConfig) -> Params {
        let mut p = Params::init(config);
        p.for_each_mut(|_, data| data.iter_mut().for_each(|v| *v = 0.0));
        p
    }

    /// Visit every tensor in a fixed order: `(name, [rows, cols], data)`.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, [usize; 2], &'a [f64])) {
        if let Some(m) = &self.w_event {
            f("w_event", [m.rows, m.cols], &m.data);
        }
        if let Some(m) = &self.w_frame {
            f("w_frame", [m.rows, m.cols], &m.data);
        }
        f("w_vis_pos", [self.w_vis_pos.rows, self.w_vis_pos.cols], &self.w_vis_pos.data);
        f("b_vis", [1, self.b_vis.len()], &self.b_vis);
        f("embed", [self.embed.rows, self.embed.cols], &self.embed.data);
        f("w_txt_pos", [self.w_txt_pos.rows, self.w_txt_pos.cols], &self.w_txt_pos.data);
        f("b_txt", [1, self.b_txt.len()], &self.b_txt);
        f("enc1_w", [self.enc1_w.rows, self.enc1_w.cols], &self.enc1_w.data);
        f("enc1_b", [1, self.enc1_b.len()], &self.enc1_b);
        f("enc2_w", [self.enc2_w.rows, self.enc2_w.cols], &self.enc2_w.data);
        f("enc2_b", [1, self.enc2_b.len()], &self.enc2_b);
        for (i, e) in self.experts.iter().enumerate() {
            f(&format!("expert{i}_w1"), [e.w1.rows, e.w1.cols], &e.w1.data);
            f(&format!("expert{i}_b1"), [1, e.b1.len()], &e.b1);
            f(&format!("expert{i}_w2"), [e.w2.rows, e.w2.cols], &e.w2.data);
            f(&format!("expert{i}_b2"), [1, e.b2.len()], &e.b2);
        }
        if let Some(m) = &self.w_gate {
            f("w_gate", [m.rows, m.cols], &m.data);
        }
        if let Some(s) = &self.sigma {
            f("sigma", [1, 1], s.as_slice());
        }
        if let Some(m) = &self.w_cat {
            f("w_cat", [m.rows, m.cols], &m.data);
        }
        if let Some(b) = &self.b_cat {
            f("b_cat", [1, b.len()], b);
        }
        if let Some(u) = &self.u_attn {
            f("u_attn", [1, u.len()], u);
        }
        f("queries", [self.queries.rows, self.queries.cols], &self.queries.data);
        f("w_qtext", [self.w_qtext.rows, self.w_qtext.cols], &self.w_qtext.data);
        f("w_box", [self.w_box.rows, self.w_box.cols], &self.w_box.data);
        f("w_box_text", [self.w_box_text.rows, self.w_box_text.cols], &self.w_box_text.data);
        f("b_box", [1, self.b_box.len()], &self.b_box);
        f("w_qalign", [self.w_qalign.rows, self.w_qalign.cols], &self.w_qalign.data);
        f("b_qalign", [1, self.b_qalign.len()], &self.b_qalign);
        f("w_talign", [self.w_talign.rows, self.w_talign.cols], &self.w_talign.data);
    }

    /// Mutable visit in the same fixed order as [`Params::for_each`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        if let Some(m) = &mut self.w_event {
            f("w_event", &mut m.data);
        }
        if let Some(m) = &mut self.w_frame {
            f("w_frame", &mut m.data);
        }
        f("w_vis_pos", &mut self.w_vis_pos.data);
        f("b_vis", &mut self.b_vis);
        f("embed", &mut self.embed.data);
        f("w_txt_pos", &mut self.w_txt_pos.data);
        f("b_txt", &mut self.b_txt);
        f("enc1_w", &mut self.enc1_w.data);
        f("enc1_b", &mut self.enc1_b);
        f("enc2_w", &mut self.enc2_w.data);
        f("enc2_b", &mut self.enc2_b);
        for (i, e) in self.experts.iter_mut().enumerate() {
            f(&format!("expert{i}_w1"), &mut e.w1.data);
            f(&format!("expert{i}_b1"), &mut e.b1);
            f(&format!("expert{i}_w2"), &mut e.w2.data);
            f(&format!("expert{i}_b2"), &mut e.b2);
        }
        if let Some(m) = &mut self.w_gate {
            f("w_gate", &mut m.data);
        }
        if let Some(s) = &mut self.sigma {
            f("sigma", s.as_mut_slice());
        }
        if let Some(m) = &mut self.w_cat {
            f("w_cat", &mut m.data);
        }
        if let Some(b) = &mut self.b_cat {
            f("b_cat", b);
        }
        if let Some(u) = &mut self.u_attn {
            f("u_attn", u);
        }
        f("queries", &mut self.queries.data);
        f("w_qtext", &mut self.w_qtext.data);
        f("w_box", &mut self.w_box.data);
        f("w_box_text", &mut self.w_box_text.data);
        f("b_box", &mut self.b_box);
        f("w_qalign", &mut self.w_qalign.data);
        f("b_qalign", &mut self.b_qalign);
        f("w_talign", &mut self.w_talign.data);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _, data| n += data.len());
        n
    }

    /// Concatenation of all tensors in iteration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        self.for_each(|_, _, data| flat.extend_from_slice(data));
        flat
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.for_each_mut(|_, data| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        });
        assert_eq!(offset, flat.len(), "flat vector length mismatch");
    }

    /// Add `delta` to the parameter at flat index `index`.
    pub fn perturb(&mut self, index: usize, delta: f64) {
        let mut offset = 0;
        let mut done = false;
        self.for_each_mut(|_, data| {
            if !done && index < offset + data.len() {
                data[index - offset] += delta;
                done = true;
            }
            offset += data.len();
        });
        assert!(done, "flat index {index} out of range");
    }

    /// `self += scale * other`, tensor by tensor. Used for SGD updates and
    /// gradient accumulation; both sides must share one layout.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        let mut slices: Vec<&[f64]> = Vec::new();
        other.for_each(|_, _, data| slices.push(data));
        let mut i = 0;
        self.for_each_mut(|_, data| {
            let src = slices[i];
            assert_eq!(src.len(), data.len(), "parameter layout mismatch");
            for (d, s) in data.iter_mut().zip(src) {
                *d += scale * s;
            }
            i += 1;
        });
    }

    /// Euclidean norm over every tensor.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        self.for_each(|_, _, data| {
            for v in data {
                acc += v * v;
            }
        });
        acc.sqrt()
    }

    /// Scale every tensor by `factor`.
    pub fn scale(&mut self, factor: f64) {
        self.for_each_mut(|_, data| data.iter_mut().for_each(|v| *v *= factor));
    }

    /// Clamp sigma to stay non-negative after an update.
    pub fn clamp_sigma(&mut self) {
        if let Some(s) = &mut self.sigma {
            if s[0] < 0.0 {
                s[0] = 0.0;
            }
        }
    }
}
