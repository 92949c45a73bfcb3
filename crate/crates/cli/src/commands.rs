//! One function per subcommand. Each resolves its inputs, writes its outputs
//! and the resolved configuration, and returns a short summary.

use std::fs;
use std::path::PathBuf;

use a2fpn::attention::Variant;
use a2fpn::bench::{crossover, emit_curves, run_timing, TimingConfig, TimingRow};
use a2fpn::model::load_checkpoint;
use a2fpn::selftest::{self, PropertyResult};
use a2fpn::synth::{corpus_checksum, make_corpus, read_manifest, write_pgm, Split, MANIFEST_FILE};
use a2fpn::{Error, Result};

use crate::config::RunConfig;
use crate::train::{self, load_split, model_predictor, TrainOutcome};

pub const EVAL_METRICS_FILE: &str = "eval_metrics.csv";
pub const CURVES_FILE: &str = "attention_curves.csv";
pub const SELFTEST_FILE: &str = "selftest.csv";

#[derive(Clone, Debug)]
pub struct GenOutcome {
    pub manifest: PathBuf,
    pub checksum: String,
    pub pairs: usize,
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<GenOutcome> {
    let manifest = make_corpus(&cfg.corpus_spec(), &cfg.corpus)?;
    let checksum = corpus_checksum(&manifest, &cfg.corpus)?;
    cfg.persist(&cfg.corpus)?;
    let path = cfg.corpus.join(MANIFEST_FILE);
    println!("manifest {}", path.display());
    println!("checksum {checksum}");
    Ok(GenOutcome {
        manifest: path,
        checksum,
        pairs: manifest.entries.len(),
    })
}

fn open_manifest(cfg: &RunConfig) -> Result<a2fpn::synth::Manifest> {
    let path = cfg.corpus.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Usage(format!(
            "no corpus manifest at {}; run `a2fpn gen` first",
            path.display()
        )));
    }
    let manifest = read_manifest(&path)?;
    if manifest.scene.num_classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "corpus has {} classes, configuration says {}",
            manifest.scene.num_classes, cfg.num_classes
        )));
    }
    Ok(manifest)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let manifest = open_manifest(cfg)?;
    let train_set = load_split(&manifest, &cfg.corpus, Split::Train)?;
    let val_set = load_split(&manifest, &cfg.corpus, Split::Val)?;
    cfg.persist(&cfg.out)?;
    let outcome = train::train(cfg, &train_set, &val_set)?;
    for r in &outcome.records {
        println!("epoch {:>3}  loss {:.4}  val mIoU {:.4}", r.epoch, r.train_loss, r.val_miou);
    }
    println!("checkpoint {} (epoch {})", outcome.checkpoint.display(), outcome.best_epoch);
    Ok(outcome)
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub overall_accuracy: f64,
    pub mean_iou: f64,
    pub mean_f1: f64,
    pub metrics: PathBuf,
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalOutcome> {
    let mut cfg = cfg.clone();
    let model = load_checkpoint(&cfg.checkpoint_path())?;
    let mc = &model.config;
    if mc.num_classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes, configuration has {}",
            mc.num_classes, cfg.num_classes
        )));
    }
    // Architecture always comes from the checkpoint.
    cfg.variant = mc.kind;
    cfg.d_p = mc.backbone.pyramid_channels;
    cfg.stem_channels = mc.backbone.stem_channels;
    cfg.stage_channels = mc.backbone.stage_channels;
    cfg.blocks_per_stage = mc.backbone.blocks_per_stage;

    let manifest = open_manifest(&cfg)?;
    let split: Split = cfg.eval_split.parse().map_err(|e: Error| Error::Usage(e.to_string()))?;
    let samples = load_split(&manifest, &cfg.corpus, split)?;
    cfg.persist(&cfg.out)?;

    let pred_dir = cfg.out.join("predictions");
    if cfg.write_predictions {
        fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
    }
    let entries: Vec<_> = manifest.split(split).collect();
    let mut predictor = model_predictor(&model, cfg.tta);
    let mut index = 0;
    let cm = train::score(&samples, cfg.num_classes, |s| {
        let pred = predictor(s)?;
        if cfg.write_predictions {
            let path = pred_dir.join(format!("{:08}.pgm", entries[index].seed));
            write_pgm(&path, s.height, s.width, &pred)?;
        }
        index += 1;
        Ok(pred)
    })?;

    let metrics = cfg.out.join(EVAL_METRICS_FILE);
    fs::write(&metrics, cm.to_csv()?).map_err(|e| Error::io(&metrics, e))?;
    let outcome = EvalOutcome {
        overall_accuracy: cm.overall_accuracy()?,
        mean_iou: cm.mean_iou()?,
        mean_f1: cm.f1_scores()?.mean,
        metrics,
    };
    println!(
        "{split}: OA {:.4}  mIoU {:.4}  mean F1 {:.4}  ({})",
        outcome.overall_accuracy,
        outcome.mean_iou,
        outcome.mean_f1,
        outcome.metrics.display()
    );
    Ok(outcome)
}

fn doublings(from: usize, to: usize) -> Vec<usize> {
    std::iter::successors(Some(from), |&n| Some(n * 2)).take_while(|&n| n <= to).collect()
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<TimingRow>> {
    let timing = TimingConfig {
        repetitions: cfg.bench_repetitions,
        seed: cfg.seed,
        cap_bytes: cfg.bench_cap_bytes,
        ..TimingConfig::default()
    };
    cfg.persist(&cfg.out)?;
    let mut rows = Vec::new();
    for (variant, max_n) in [(Variant::DotProduct, cfg.bench_dot_max_n), (Variant::Linear, cfg.bench_linear_max_n)] {
        let ns = doublings(256, max_n);
        for (n, row) in ns.iter().zip(run_timing(variant, &ns, &timing)?) {
            match row {
                Ok(row) => rows.push(row),
                Err(e @ Error::Capacity { .. }) => {
                    eprintln!("{variant} N={n}: {e}");
                    rows.push(TimingRow::modelled(variant, *n, timing.d_k, timing.d_v));
                }
                Err(e) => return Err(e),
            }
        }
    }
    let path = cfg.out.join(CURVES_FILE);
    fs::write(&path, emit_curves(&rows)?).map_err(|e| Error::io(&path, e))?;
    println!(
        "{} rows, analytic crossover at N = {} ({})",
        rows.len(),
        crossover(timing.d_k, timing.d_v),
        path.display()
    );
    Ok(rows)
}

pub fn cmd_selftest(cfg: &RunConfig) -> Result<Vec<PropertyResult>> {
    let results = selftest::run(&selftest::registry(cfg.seed));
    let report = selftest::report_csv(&results);
    cfg.persist(&cfg.out)?;
    let path = cfg.out.join(SELFTEST_FILE);
    fs::write(&path, &report).map_err(|e| Error::io(&path, e))?;
    print!("{report}");
    Ok(results)
}
