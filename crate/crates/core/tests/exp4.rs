use evground::config::TrainConfig;
use evground::dataset::{Corpus, GroundingSample, Split};
use evground::fusion::score_queries;
use evground::matching::{build_cost_matrix, hungarian_assign};
use evground::model::forward;
use evground::synth::{gen_scenes, split_indices, SceneGeometry};
use evground::text::{AttributeKind, SoftTokenMap};
use evground::train::{model_config, prepare_corpus, train};

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
fn table() {
    let env = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let corpus = build_corpus(42, env("SCENES", 300.0) as usize);
    let config = TrainConfig {
        steps: env("STEPS", 5000.0) as usize,
        batch_size: env("BATCH", 6.0) as usize,
        learning_rate: env("LR", 0.05),
        beta_box: env("BETA_BOX", 8.0),
        beta_attr: env("BETA_ATTR", 1.0),
        queries: env("QUERIES", 16.0) as usize,
        theta: 0.5, ..TrainConfig::default()
    };
    let outcome = train(&config, &corpus, "exp".into()).unwrap();
    let (prepared, vocab) = prepare_corpus(&corpus, &config).unwrap();
    let model = model_config(&config, &corpus, vocab.len());
    let weights = config.loss_weights();

    for (p, s) in prepared.iter().zip(&corpus.samples).filter(|(p, _)| p.split == Split::Val).take(4) {
        let trace = forward(&outcome.params, &model, &p.train.features, &p.train.masks, None).unwrap();
        let maps: Vec<&SoftTokenMap> = p.train.target_maps.iter().collect();
        let costs = build_cost_matrix(&trace.output, &p.train.target_box, &maps, &weights).unwrap();
        let a = hungarian_assign(&costs).unwrap();
        let score_maps: Vec<(AttributeKind, &SoftTokenMap)> =
            p.score_maps.iter().map(|(k, m)| (*k, m)).collect();
        let table = score_queries(&trace.output, &score_maps).unwrap();
        println!("expr: {}", s.expression);
        println!("gt=({:.2},{:.2},{:.2},{:.2}) matched={:?}", p.train.target_box.cx, p.train.target_box.cy, p.train.target_box.w, p.train.target_box.h, a.pairs);
        for n in 0..model.num_queries {
            let b = &trace.output.boxes[n];
            let giou = evground::boxes::iou(b, &p.train.target_box);
            let marker = if a.pairs.contains(&n) { "*" } else { " " };
            println!(
                "{marker}q{n:02} iou={giou:.2} scores app={:.3} sta={:.3} vie={:.3} oth={:.3}",
                table.get(n, AttributeKind::Appearance),
                table.get(n, AttributeKind::Status),
                table.get(n, AttributeKind::RelationToViewer),
                table.get(n, AttributeKind::RelationToOthers),
            );
        }
    }
}
