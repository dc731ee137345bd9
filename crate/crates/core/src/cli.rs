//! Command-line surface: generate, voxelize, train, eval, report, ground.

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::TrainConfig;
use crate::dataset::{load_dataset, load_manifest, manifest_hash, Split};
use crate::error::{Error, Result};
use crate::event::{read_events_auto, response_strength, voxelize, EventWindow};
use crate::metrics::MetricsReport;
use crate::synth::{gen_corpus, SceneGeometry};
use crate::train::{evaluate, ground_sample, prepare_sample, train, Vocabulary};
use crate::text::SynonymTable;
use clap::{Parser, Subcommand};
use std::fs;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "evground", version, about = "Event-camera referring-expression grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grounding corpus
    Generate {
        /// Number of scenes
        #[arg(long)]
        scenes: usize,
        /// Data seed
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        min_objects: usize,
        #[arg(long, default_value_t = 4)]
        max_objects: usize,
        #[arg(long, default_value_t = 128)]
        width: u16,
        #[arg(long, default_value_t = 64)]
        height: u16,
        #[arg(long, default_value_t = 5)]
        bins: usize,
    },
    /// Bin an event stream into a voxel grid and print its statistics
    Voxelize {
        /// Event stream file (binary EVT0 or JSON fixture)
        #[arg(long)]
        events: PathBuf,
        #[arg(long, default_value_t = 5)]
        bins: usize,
        /// Window start; defaults to the earliest event
        #[arg(long)]
        t_a: Option<i64>,
        /// Window end; defaults to the latest event
        #[arg(long)]
        t_b: Option<i64>,
    },
    /// Train a grounding model on a corpus
    Train {
        /// Corpus directory
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        /// Flat key=value config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model seed override
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint and write a metrics report
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report JSON output path
        #[arg(long)]
        report: PathBuf,
        /// IoU threshold override
        #[arg(long)]
        theta: Option<f64>,
        /// Which split to evaluate: val, train, or all
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Re-render a saved report, optionally plotting gate weights per bin
    Report {
        #[arg(long)]
        report: PathBuf,
        /// Write an SVG of mean gate weights per response-strength bin
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Ground one sample and print the structured result
    Ground {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample index within the corpus
        #[arg(long)]
        index: usize,
        /// Replace the stored expression (attribute spans are then unknown
        /// and scoring falls back to the public context)
        #[arg(long)]
        expression: Option<String>,
    },
}

/// Run the CLI: 0 on success, 1 on usage errors, 2 on runtime errors.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(parsed) => parsed,
        Err(e) => {
            // clap renders --help/--version as "errors" with success status
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            return code;
        }
    };
    match run(parsed.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate {
            scenes,
            seed,
            out,
            min_objects,
            max_objects,
            width,
            height,
            bins,
        } => {
            let geometry = SceneGeometry { width, height, bins, ..SceneGeometry::default() };
            let manifest = gen_corpus(seed, scenes, (min_objects, max_objects), &geometry, &out)?;
            println!(
                "wrote {} scenes ({} train, {} val) to {}",
                manifest.num_scenes,
                manifest.train_count,
                manifest.val_count,
                out.display()
            );
            Ok(())
        }
        Command::Voxelize { events, bins, t_a, t_b } => {
            let bytes = fs::read(&events)?;
            let (width, height, stream) = read_events_auto(&bytes)?;
            let t_a = t_a.or_else(|| stream.iter().map(|e| e.t).min()).unwrap_or(0);
            let t_b = t_b.or_else(|| stream.iter().map(|e| e.t).max()).unwrap_or(1);
            let window = EventWindow::new(stream, t_a, t_b, width, height)?;
            let grid = voxelize(&window, bins)?;
            let strength = response_strength(&grid);
            println!("sensor={width}x{height} events={}", window.len());
            println!("window=[{t_a}, {t_b}] bins={bins}");
            println!("binned={} nonzero_voxels={}", grid.total(), strength.raw);
            for b in 0..bins {
                let mut total = 0u64;
                for c in 0..2 {
                    for y in 0..height as usize {
                        for x in 0..width as usize {
                            total += grid.get(c, b, y, x) as u64;
                        }
                    }
                }
                println!("bin[{b}]={total}");
            }
            Ok(())
        }
        Command::Train { data, out, config, seed } => {
            let mut train_config = match config {
                Some(path) => TrainConfig::parse(&fs::read_to_string(path)?)?,
                None => TrainConfig::default(),
            };
            if let Some(seed) = seed {
                train_config.model_seed = seed;
            }
            let corpus = load_dataset(&data)?;
            let hash = manifest_hash(&load_manifest(&data)?.to_text());
            let outcome = train(&train_config, &corpus, hash)?;
            for line in &outcome.log {
                println!("{}", line.to_line());
            }
            save_checkpoint(&out, &outcome.meta, &outcome.params)?;
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
        Command::Eval { checkpoint, data, report, theta, split } => {
            let (meta, params) = load_checkpoint(&checkpoint)?;
            let corpus = load_dataset(&data)?;
            let split = match split.as_str() {
                "val" => Some(Split::Val),
                "train" => Some(Split::Train),
                "all" => None,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown split '{other}' (expected val, train, or all)"
                    )))
                }
            };
            let theta = theta.unwrap_or(meta.train.theta);
            let metrics = evaluate(&params, &meta, &corpus, split, theta)?;
            let mut json = serde_json::to_vec_pretty(&metrics)?;
            json.push(b'\n');
            fs::write(&report, json)?;
            print_report(&metrics);
            println!("report written to {}", report.display());
            Ok(())
        }
        Command::Report { report, plot } => {
            let metrics: MetricsReport = serde_json::from_slice(&fs::read(&report)?)?;
            print_report(&metrics);
            if let Some(path) = plot {
                fs::write(&path, activation_svg(&metrics))?;
                println!("plot written to {}", path.display());
            }
            Ok(())
        }
        Command::Ground { checkpoint, data, index, expression } => {
            let (meta, params) = load_checkpoint(&checkpoint)?;
            let corpus = load_dataset(&data)?;
            let Some(sample) = corpus.samples.get(index) else {
                return Err(Error::InvalidArgument(format!(
                    "sample index {index} out of range ({} samples)",
                    corpus.samples.len()
                )));
            };
            let mut sample = sample.clone();
            if let Some(expression) = expression {
                sample.expression = expression;
                sample.spans = Default::default();
            }
            let vocab = Vocabulary::from_words(meta.vocab.clone());
            let synonyms = SynonymTable::default_classes();
            let prepared = prepare_sample(&sample, &corpus, &meta.train, &vocab, &synonyms)?;
            let result = ground_sample(&params, &meta.model, &prepared)?;
            if result.fallback_warning {
                eprintln!(
                    "warning: no attribute cues matched; scored against the public context"
                );
            }
            println!(
                "box={:.6},{:.6},{:.6},{:.6} query={} attribute={} score={:.6} lambda={:.4},{:.4},{:.4},{:.4}",
                result.bbox.cx,
                result.bbox.cy,
                result.bbox.w,
                result.bbox.h,
                result.query_index,
                result.attribute,
                result.score,
                result.gate_weights[0],
                result.gate_weights[1],
                result.gate_weights[2],
                result.gate_weights[3],
            );
            Ok(())
        }
    }
}

fn print_report(metrics: &MetricsReport) {
    println!(
        "theta={:.2} samples={} top1={:.4} miou={:.4}",
        metrics.theta, metrics.overall.count, metrics.overall.top1, metrics.overall.miou
    );
    println!(
        "class-mean: top1={:.4} miou={:.4}",
        metrics.class_mean_top1, metrics.class_mean_miou
    );
    for (class, agg) in &metrics.per_class {
        println!(
            "  class {class}: count={} top1={:.4} miou={:.4}",
            agg.count, agg.top1, agg.miou
        );
    }
    for (objects, agg) in &metrics.per_complexity {
        println!(
            "  {objects} objects: count={} top1={:.4} miou={:.4}",
            agg.count, agg.top1, agg.miou
        );
    }
    for (bin, agg) in &metrics.per_strength_bin {
        println!(
            "  strength bin {bin}: count={} top1={:.4} miou={:.4}",
            agg.count, agg.top1, agg.miou
        );
    }
    if let Some(activations) = &metrics.activations {
        for (bin, summary) in &activations.per_strength_bin {
            println!(
                "  bin {bin} gate: lambda={:.3},{:.3},{:.3},{:.3} top1={} top2={}",
                summary.mean_lambda[0],
                summary.mean_lambda[1],
                summary.mean_lambda[2],
                summary.mean_lambda[3],
                summary.top1_attribute,
                summary.top2_attribute,
            );
        }
    }
}

/// Stacked-bar SVG of mean gate weights per response-strength bin.
fn activation_svg(metrics: &MetricsReport) -> String {
    const COLORS: [&str; 4] = ["#d14b4b", "#4b78d1", "#4bd17a", "#8a8a8a"];
    const NAMES: [&str; 4] = ["appearance", "status", "viewer", "others"];
    let width = 560;
    let height = 320;
    let chart_left = 50.0;
    let chart_bottom = 260.0;
    let chart_height = 220.0;
    let bar_width = 48.0;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">Mean gate weight by response-strength bin</text>\n",
        chart_left
    ));

    let empty = Default::default();
    let activations = metrics.activations.as_ref().unwrap_or(&empty);
    for bin in 1..=crate::event::STRENGTH_BINS {
        let x = chart_left + (bin as f64 - 1.0) * (bar_width + 18.0);
        if let Some(summary) = activations.per_strength_bin.get(&bin) {
            let mut y = chart_bottom;
            for (i, lambda) in summary.mean_lambda.iter().enumerate() {
                let h = lambda * chart_height;
                y -= h;
                svg.push_str(&format!(
                    "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_width}\" height=\"{h:.1}\" fill=\"{}\"/>\n",
                    COLORS[i]
                ));
            }
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{bin}</text>\n",
            x + bar_width / 2.0 - 4.0,
            chart_bottom + 18.0
        ));
    }
    for (i, name) in NAMES.iter().enumerate() {
        let y = 40.0 + i as f64 * 18.0;
        svg.push_str(&format!(
            "<rect x=\"470\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{}\"/>\n",
            y - 10.0,
            COLORS[i]
        ));
        svg.push_str(&format!(
            "<text x=\"486\" y=\"{y:.1}\" font-family=\"sans-serif\" font-size=\"11\">{name}</text>\n"
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
