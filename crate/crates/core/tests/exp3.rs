use evground::config::TrainConfig;
use evground::dataset::{Corpus, GroundingSample, Split};
use evground::matching::{build_cost_matrix, hungarian_assign};
use evground::model::forward;
use evground::synth::{gen_scenes, split_indices, SceneGeometry};
use evground::text::SoftTokenMap;
use evground::train::{ground_sample, model_config, prepare_corpus, train};

fn build_corpus(seed: u64, scenes: usize) -> Corpus {
    let geometry = SceneGeometry::default();
    let samples = gen_scenes(seed, scenes, (3, 3), &geometry).unwrap();
    let (train_idx, _) = split_indices(seed, scenes);
    let t: std::collections::HashSet<usize> = train_idx.into_iter().collect();
    let grounding = samples.iter().enumerate().map(|(i, s)| GroundingSample {
        window: s.window.clone(), frame: Some(s.frame.clone()), t_0: s.geometry.t_0(),
        objects: s.objects.iter().zip(s.boxes_at_t0()).map(|(o, b)| (o.class_label, b)).collect(),
        referred_index: s.referred_index, expression: s.expression.clone(), spans: s.spans.clone(),
        gt_box: s.gt_box, split: if t.contains(&i) { Split::Train } else { Split::Val },
    }).collect();
    Corpus { width: geometry.width, height: geometry.height, bins: geometry.bins, samples: grounding }
}

#[test]
fn inspect() {
    let env = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let corpus = build_corpus(42, env("SCENES", 200.0) as usize);
    let config = TrainConfig {
        steps: env("STEPS", 3000.0) as usize,
        batch_size: env("BATCH", 4.0) as usize,
        learning_rate: env("LR", 0.05),
        beta_box: env("BETA_BOX", 2.0),
        beta_attr: env("BETA_ATTR", 1.0),
        queries: env("QUERIES", 16.0) as usize,
        theta: 0.5,
        ..TrainConfig::default()
    };
    let outcome = train(&config, &corpus, "exp".into()).unwrap();
    let (prepared, vocab) = prepare_corpus(&corpus, &config).unwrap();
    let model = model_config(&config, &corpus, vocab.len());
    let weights = config.loss_weights();

    // oracle: pick the best box among ALL queries / among matched queries
    let mut best_any = 0usize;
    let mut best_matched = 0usize;
    let mut sel_hits = 0usize;
    let mut matched_union = std::collections::HashSet::new();
    let mut n_eval = 0usize;
    for p in prepared.iter().filter(|p| p.split == Split::Val) {
        let trace = forward(&outcome.params, &model, &p.train.features, &p.train.masks, None).unwrap();
        let maps: Vec<&SoftTokenMap> = p.train.target_maps.iter().collect();
        let costs = build_cost_matrix(&trace.output, &p.train.target_box, &maps, &weights).unwrap();
        let a = hungarian_assign(&costs).unwrap();
        for &n in &a.pairs { matched_union.insert(n); }
        let iou_of = |b: &evground::boxes::BoxXYWH| evground::boxes::iou(b, &p.train.target_box);
        if trace.output.boxes.iter().any(|b| iou_of(b) > 0.5) { best_any += 1; }
        if a.pairs.iter().any(|&n| iou_of(&trace.output.boxes[n]) > 0.5) { best_matched += 1; }
        let r = ground_sample(&outcome.params, &model, p).unwrap();
        if iou_of(&r.bbox) > 0.5 { sel_hits += 1; }
        n_eval += 1;
    }
    println!("oracle-any top1={:.3} oracle-matched top1={:.3} selected top1={:.3} queries-ever-matched={}",
        best_any as f64 / n_eval as f64, best_matched as f64 / n_eval as f64, sel_hits as f64 / n_eval as f64, matched_union.len());
    for p in prepared.iter().filter(|p| p.split == Split::Val).take(4) {
        let trace = forward(&outcome.params, &model, &p.train.features, &p.train.masks, None).unwrap();
        // attention entropy per query (average)
        let l = trace.seq_len();
        let q = model.num_queries;
        let mut mean_entropy = 0.0;
        for n in 0..q {
            let row = &trace.attn[n * l..(n + 1) * l];
            let h: f64 = -row.iter().filter(|&&a| a > 1e-12).map(|&a| a * a.ln()).sum::<f64>();
            mean_entropy += h / q as f64;
        }
        let maps: Vec<&SoftTokenMap> = p.train.target_maps.iter().collect();
        let costs = build_cost_matrix(&trace.output, &p.train.target_box, &maps, &weights).unwrap();
        let a = hungarian_assign(&costs).unwrap();
        let r = ground_sample(&outcome.params, &model, p).unwrap();
        println!(
            "gt=({:.2},{:.2},{:.2},{:.2}) attn_H={:.2}(max {:.2}) matched={:?}",
            p.train.target_box.cx, p.train.target_box.cy, p.train.target_box.w, p.train.target_box.h,
            mean_entropy, (l as f64).ln(), a.pairs
        );
        for &n in &a.pairs {
            let b = &trace.output.boxes[n];
            println!("   matched q{n}: box=({:.2},{:.2},{:.2},{:.2})", b.cx, b.cy, b.w, b.h);
        }
        println!("   selected q{} box=({:.2},{:.2},{:.2},{:.2}) score={:.3}", r.query_index, r.bbox.cx, r.bbox.cy, r.bbox.w, r.bbox.h, r.score);
    }
}
