use evground::config::TrainConfig;
use evground::dataset::{Corpus, GroundingSample, Split};
use evground::synth::{gen_scenes, split_indices, SceneGeometry};
use evground::train::{evaluate, prepare_corpus, train, model_config, ground_sample};

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
fn diagnose() {
    let corpus = build_corpus(42, 60);
    let config = TrainConfig {
        steps: 2000, batch_size: 4, learning_rate: 0.05, theta: 0.5,
        ..TrainConfig::default()
    };
    let outcome = train(&config, &corpus, "exp".into()).unwrap();
    for chunk in outcome.log.chunks(200) {
        let n = chunk.len() as f64;
        let avg = |f: fn(&evground::train::StepLog) -> f64| chunk.iter().map(f).sum::<f64>() / n;
        println!(
            "step {:4}: total={:6.2} l1={:5.2} giou={:5.2} attr={:5.2} lam={:.2},{:.2},{:.2},{:.2}",
            chunk[0].step, avg(|l| l.total), avg(|l| l.box_l1), avg(|l| l.giou_term), avg(|l| l.attr),
            avg(|l| l.lambda_mean[0]), avg(|l| l.lambda_mean[1]), avg(|l| l.lambda_mean[2]), avg(|l| l.lambda_mean[3]),
        );
    }
    // inspect predictions on 5 train samples
    let (prepared, vocab) = prepare_corpus(&corpus, &config).unwrap();
    let model = model_config(&config, &corpus, vocab.len());
    for p in prepared.iter().take(5) {
        let r = ground_sample(&outcome.params, &model, p).unwrap();
        println!(
            "gt=({:.2},{:.2},{:.2},{:.2}) pred=({:.2},{:.2},{:.2},{:.2}) q={} attr={} score={:.3}",
            p.train.target_box.cx, p.train.target_box.cy, p.train.target_box.w, p.train.target_box.h,
            r.bbox.cx, r.bbox.cy, r.bbox.w, r.bbox.h, r.query_index, r.attribute, r.score
        );
    }
    let rep = evaluate(&outcome.params, &outcome.meta, &corpus, Some(Split::Train), 0.5).unwrap();
    println!("train top1={:.3} miou={:.3}", rep.overall.top1, rep.overall.miou);
}
