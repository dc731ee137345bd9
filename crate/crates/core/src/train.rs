//! Preprocessing, the SGD training loop, and evaluation over a corpus.

use crate::checkpoint::{CheckpointMeta, CHECKPOINT_VERSION};
use crate::config::TrainConfig;
use crate::dataset::{Corpus, GroundingSample, Split};
use crate::error::{Error, Result};
use crate::event::{normalize_strengths, response_strength, strength_bin, voxelize};
use crate::fusion::{ground, GroundingResult};
use crate::labels::ClassLabel;
use crate::metrics::{
    expert_activation_profile, report, ActivationEntry, EvalRecord, MetricsReport,
};
use crate::model::{
    featurize_frame, featurize_grid, forward, sample_gradients, FusionStrategy, Modality,
    ModelConfig, Params, SampleFeatures, TrainSample,
};
use crate::text::{
    build_attribute_mask, build_public_context, fuzzy_match_spans, soften, tokenize,
    AttributeKind, PositiveMap, SoftTokenMap, SynonymTable, TokenSeq,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeSet, HashMap};

/// Token-to-id mapping built from the training split; id 0 is `<unk>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>) -> Vocabulary {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words, index }
    }

    pub fn build(expressions: impl IntoIterator<Item = TokenSeq>) -> Vocabulary {
        let mut set = BTreeSet::new();
        for seq in expressions {
            for token in seq.tokens {
                set.insert(token);
            }
        }
        let mut words = vec!["<unk>".to_string()];
        words.extend(set);
        Vocabulary::from_words(words)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// A preprocessed sample ready for the model, plus evaluation metadata.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub train: TrainSample,
    /// Per active attribute, the soft map used for inference scoring
    /// (public-context fallback already applied).
    pub score_maps: Vec<(AttributeKind, SoftTokenMap)>,
    /// True when every attribute map was empty and scoring fell back to the
    /// public context for all slots.
    pub fallback_used: bool,
    pub class_label: ClassLabel,
    pub objects_in_scene: usize,
    pub strength_raw: u64,
    pub split: Split,
}

/// Positive maps for one expression under the current supervision mode:
/// fuzzy cue-phrase matching when positive word matching is on, otherwise
/// the class-name-only baseline.
fn attribute_maps(
    tokens: &TokenSeq,
    sample: &GroundingSample,
    config: &TrainConfig,
    synonyms: &SynonymTable,
) -> [PositiveMap; 4] {
    if config.pwm_on {
        AttributeKind::ALL.map(|kind| fuzzy_match_spans(tokens, &sample.spans, kind, synonyms))
    } else {
        let class = sample.objects[sample.referred_index].0;
        let mut spans = crate::text::AttributeSpans::default();
        for kind in AttributeKind::ALL {
            *spans.get_mut(kind) = vec![class.name().to_string()];
        }
        AttributeKind::ALL.map(|kind| fuzzy_match_spans(tokens, &spans, kind, synonyms))
    }
}

fn soft_with_fallback(map: &PositiveMap, public_soft: &SoftTokenMap) -> (SoftTokenMap, bool) {
    let soft = soften(map);
    if soft.empty {
        (public_soft.clone(), true)
    } else {
        (soft, false)
    }
}

/// Turn one loaded sample into model inputs, masks, pseudo-targets, and
/// scoring maps.
pub fn prepare_sample(
    sample: &GroundingSample,
    corpus: &Corpus,
    config: &TrainConfig,
    vocab: &Vocabulary,
    synonyms: &SynonymTable,
) -> Result<PreparedSample> {
    let grid = voxelize(&sample.window, corpus.bins)?;
    let strength_raw = response_strength(&grid).raw;

    let event_patches = (config.modality != Modality::FrameOnly)
        .then(|| featurize_grid(&grid, config.visual_patch))
        .transpose()?;
    let frame_patches = match (config.modality, &sample.frame) {
        (Modality::EventOnly, _) => None,
        (_, Some(frame)) => Some(featurize_frame(frame, config.visual_patch)?),
        (_, None) => {
            return Err(Error::InvalidConfiguration(
                "modality needs frames but the sample has none".into(),
            ))
        }
    };

    let tokens = tokenize(&sample.expression)?;
    let token_ids: Vec<usize> = tokens.tokens.iter().map(|t| vocab.id(t)).collect();
    let features = SampleFeatures { event_patches, frame_patches, token_ids };

    let maps = attribute_maps(&tokens, sample, config, synonyms);
    let public = build_public_context(&maps)?;
    let mut public_soft = soften(&public);
    if public_soft.empty {
        // every token claimed by some attribute: fall back to uniform mass
        let c_tok = tokens.len();
        public_soft = SoftTokenMap { probs: vec![1.0 / c_tok as f64; c_tok], empty: false };
    }

    let visual_len = (corpus.width as usize / config.visual_patch)
        * (corpus.height as usize / config.visual_patch);

    let mut masks = Vec::new();
    let mut score_maps = Vec::new();
    let mut all_empty = true;
    for kind in &config.attributes {
        let map = &maps[kind.index()];
        masks.push(build_attribute_mask(map, &public, visual_len)?);
        let (soft, fell_back) = soft_with_fallback(map, &public_soft);
        all_empty &= fell_back;
        score_maps.push((*kind, soft));
    }

    let target_maps: Vec<SoftTokenMap> = if config.maf_on {
        score_maps.iter().map(|(_, m)| m.clone()).collect()
    } else {
        // single pseudo-target: union of the active attribute maps
        let mut union = vec![false; tokens.len()];
        for kind in &config.attributes {
            for (u, &b) in union.iter_mut().zip(&maps[kind.index()].bits) {
                *u |= b;
            }
        }
        let union_map = PositiveMap {
            bits: union,
            kind: crate::text::MapKind::Attribute(config.attributes[0]),
        };
        let (soft, _) = soft_with_fallback(&union_map, &public_soft);
        vec![soft]
    };

    Ok(PreparedSample {
        train: TrainSample {
            features,
            masks: if config.fusion_strategy == FusionStrategy::None { Vec::new() } else { masks },
            target_box: sample.gt_box,
            target_maps,
        },
        score_maps,
        fallback_used: all_empty,
        class_label: sample.objects[sample.referred_index].0,
        objects_in_scene: sample.objects.len(),
        strength_raw,
        split: sample.split,
    })
}

/// Assemble the model configuration for a corpus.
pub fn model_config(config: &TrainConfig, corpus: &Corpus, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        channel_width: config.channels,
        num_queries: config.queries,
        visual_patch: config.visual_patch,
        sigma_init: config.sigma_init,
        modality: config.modality,
        fusion: config.fusion_strategy,
        attributes: config.attributes.clone(),
        seed: config.model_seed,
        sensor_width: corpus.width,
        sensor_height: corpus.height,
        bins: corpus.bins,
        vocab_size,
    }
}

/// One line of the training log.
#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub box_l1: f64,
    pub giou_term: f64,
    pub attr: f64,
    pub lambda_mean: [f64; 4],
}

impl StepLog {
    pub fn to_line(&self) -> String {
        format!(
            "step={} total={:.6} box_l1={:.6} giou={:.6} attr={:.6} lambda={:.4},{:.4},{:.4},{:.4}",
            self.step,
            self.total,
            self.box_l1,
            self.giou_term,
            self.attr,
            self.lambda_mean[0],
            self.lambda_mean[1],
            self.lambda_mean[2],
            self.lambda_mean[3],
        )
    }
}

/// A trained model with everything needed to evaluate or persist it.
pub struct TrainOutcome {
    pub meta: CheckpointMeta,
    pub params: Params,
    pub log: Vec<StepLog>,
}

/// Preprocess a whole corpus. Returns the prepared samples (all splits) and
/// the vocabulary built from the training split.
pub fn prepare_corpus(
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<(Vec<PreparedSample>, Vocabulary)> {
    let synonyms = SynonymTable::default_classes();
    let train_tokens = corpus
        .samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| tokenize(&s.expression))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::build(train_tokens);
    let prepared = corpus
        .samples
        .iter()
        .map(|s| prepare_sample(s, corpus, config, &vocab, &synonyms))
        .collect::<Result<Vec<_>>>()?;
    Ok((prepared, vocab))
}

/// Train with plain SGD at a fixed rate. Gate noise is on during training;
/// every step logs the loss breakdown and mean gate weights of its batch.
pub fn train(config: &TrainConfig, corpus: &Corpus, manifest_hash: String) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.samples.is_empty() {
        return Err(Error::InvalidArgument("corpus is empty".into()));
    }
    let (prepared, vocab) = prepare_corpus(corpus, config)?;
    let train_set: Vec<&PreparedSample> =
        prepared.iter().filter(|p| p.split == Split::Train).collect();
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }

    let model = model_config(config, corpus, vocab.len());
    model.validate()?;
    let mut params = Params::init(&model);
    let weights = config.loss_weights();
    // batch sampling and gate noise share one stream, separate from init
    let mut rng = ChaCha8Rng::seed_from_u64(config.model_seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut grads = Params::zeros(&model);
        let mut total = 0.0;
        let mut box_l1 = 0.0;
        let mut giou_term = 0.0;
        let mut attr = 0.0;
        let mut lambda_mean = [0.0; 4];
        for _ in 0..config.batch_size {
            let pick = rng.random_range(0..train_set.len());
            let sample = &train_set[pick].train;
            let (result, trace) =
                sample_gradients(&params, &model, sample, &weights, Some(&mut rng), None)
                    .map_err(|e| {
                        Error::NumericalFailure(format!("step {step}, sample {pick}: {e}"))
                    })?;
            if !result.breakdown.total.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "non-finite loss at step {step} (sample {pick})"
                )));
            }
            grads.add_scaled(&result.grads, 1.0 / config.batch_size as f64);
            total += result.breakdown.total / config.batch_size as f64;
            box_l1 += result.breakdown.l1 / config.batch_size as f64;
            giou_term += result.breakdown.giou_term / config.batch_size as f64;
            attr += result.breakdown.attr / config.batch_size as f64;
            for (m, l) in lambda_mean.iter_mut().zip(&trace.gate.lambda) {
                *m += l / config.batch_size as f64;
            }
        }
        if config.clip_norm > 0.0 {
            let norm = grads.norm();
            if norm > config.clip_norm {
                grads.scale(config.clip_norm / norm);
            }
        }
        params.add_scaled(&grads, -config.learning_rate);
        params.clamp_sigma();
        log.push(StepLog { step, total, box_l1, giou_term, attr, lambda_mean });
    }

    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        model,
        train: config.clone(),
        vocab: vocab.words,
        manifest_hash,
    };
    Ok(TrainOutcome { meta, params, log })
}

/// Ground one prepared sample with noise off.
pub fn ground_sample(
    params: &Params,
    model: &ModelConfig,
    prepared: &PreparedSample,
) -> Result<GroundingResult> {
    let trace = forward(params, model, &prepared.train.features, &prepared.train.masks, None)?;
    let maps: Vec<(AttributeKind, &SoftTokenMap)> =
        prepared.score_maps.iter().map(|(k, m)| (*k, m)).collect();
    ground(&trace.output, &maps, &trace.gate, prepared.fallback_used)
}

/// Evaluate prepared samples: full inference per sample, response-strength
/// stratification over the evaluated set, and the aggregated report with
/// expert activations attached.
pub fn evaluate_prepared(
    params: &Params,
    model: &ModelConfig,
    samples: &[&PreparedSample],
    theta: f64,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::UndefinedMetric("no samples to evaluate".into()));
    }
    let strengths: Vec<crate::event::ResponseStrength> = samples
        .iter()
        .map(|p| crate::event::ResponseStrength { raw: p.strength_raw, normalized: None })
        .collect();
    let normalized = normalize_strengths(&strengths)?;

    let mut records = Vec::with_capacity(samples.len());
    let mut activations = Vec::with_capacity(samples.len());
    for (prepared, strength) in samples.iter().zip(&normalized) {
        let result = ground_sample(params, model, prepared)?;
        let bin = strength_bin(strength.normalized.unwrap())?;
        records.push(EvalRecord {
            predicted: result.bbox,
            truth: prepared.train.target_box,
            class_label: prepared.class_label,
            objects_in_scene: prepared.objects_in_scene,
            strength_bin: Some(bin),
        });
        activations.push(ActivationEntry {
            lambda: result.gate_weights,
            class_label: prepared.class_label,
            strength_bin: Some(bin),
        });
    }
    let mut metrics = report(&records, theta)?;
    metrics.activations = Some(expert_activation_profile(&activations)?);
    Ok(metrics)
}

/// Evaluate a checkpointed model over one split of a corpus.
pub fn evaluate(
    params: &Params,
    meta: &CheckpointMeta,
    corpus: &Corpus,
    split: Option<Split>,
    theta: f64,
) -> Result<MetricsReport> {
    if corpus.width != meta.model.sensor_width
        || corpus.height != meta.model.sensor_height
        || corpus.bins != meta.model.bins
    {
        return Err(Error::InvalidConfiguration(format!(
            "checkpoint was trained on {}x{} with {} bins, corpus is {}x{} with {}",
            meta.model.sensor_width,
            meta.model.sensor_height,
            meta.model.bins,
            corpus.width,
            corpus.height,
            corpus.bins,
        )));
    }
    let vocab = Vocabulary::from_words(meta.vocab.clone());
    let synonyms = SynonymTable::default_classes();
    let selected: Vec<&GroundingSample> = corpus
        .samples
        .iter()
        .filter(|s| split.is_none() || Some(s.split) == split)
        .collect();
    if selected.is_empty() {
        return Err(Error::UndefinedMetric("selected split is empty".into()));
    }
    let prepared = selected
        .iter()
        .map(|s| prepare_sample(s, corpus, &meta.train, &vocab, &synonyms))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PreparedSample> = prepared.iter().collect();
    evaluate_prepared(params, &meta.model, &refs, theta)
}
