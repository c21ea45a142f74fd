//! Command-line entry points for the prediction-transfer toolkit.
//!
//! Exit codes: 0 on success, 1 on any runtime failure (bad files, invalid
//! parameters), 2 on command-line usage errors.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rpt::adapt::{
    adapt, evaluate, init_networks, predict_labels, prepare_adaptation, pretrain, refresh_state,
    load_split,
};
use rpt::color::rgb_to_lab;
use rpt::config::TrainConfig;
use rpt::error::{Result, RptError};
use rpt::logic::{build_column_sequences, recovery_accuracy, train_logic, LogicModel};
use rpt::losses::{ccr_loss, pcr_loss, slr_loss};
use rpt::model::SegHead;
use rpt::render::{write_ppm, Palette};
use rpt::scene::{gen_dataset, DomainParams, NUM_CLASSES};
use rpt::slic::{slic, SlicParams};
use rpt::stats::{dominative_categories, kmeans, pool_features, RetainedSet};
use rpt::tensor::{Image, LabelMap, Tensor};

#[derive(Parser)]
#[command(
    name = "rpt",
    version,
    about = "Domain-adaptive segmentation with prediction-transfer regularization"
)]
struct Cli {
    /// Worker threads (0 uses all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a two-domain street-scene benchmark with a manifest.
    GenData {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Scenes per domain.
        #[arg(long, default_value_t = 8)]
        images: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Base seed; scene i derives its own seed from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the target domain's hue rotation (radians).
        #[arg(long)]
        hue_shift: Option<f64>,
        /// Override the target domain's noise level.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Segment one image tensor into superpixels.
    Slic {
        /// Input image tensor (h x w x 3, values in [0,1]).
        #[arg(long)]
        image: PathBuf,
        /// Output superpixel-id tensor (u16, h x w).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        superpixels: usize,
        #[arg(long, default_value_t = 10.0)]
        compactness: f64,
        #[arg(long, default_value_t = 10)]
        iters: usize,
    },
    /// Cluster target superpixels by pooled appearance across a dataset.
    Cluster {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Output text table: scene,superpixel,cluster.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        k: usize,
        #[arg(long, default_value_t = 192)]
        superpixels: usize,
        #[arg(long, default_value_t = 10.0)]
        compactness: f64,
        #[arg(long, default_value_t = 50)]
        kmeans_iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit the spatial-logic model to source ground-truth sequences.
    TrainLogic {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Directory to write the model into.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        hidden: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 4)]
        strips: usize,
        #[arg(long, default_value_t = 192)]
        superpixels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Report the regularizer losses of a saved model on target scenes.
    Regularize {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Saved segmentation model directory.
        #[arg(long)]
        model: PathBuf,
        /// Optional configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override single configuration keys, e.g. --set threshold_pc=0.3.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Pretrain on source, adapt to target, and write run artifacts.
    Adapt {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for artifacts (config, metrics, model, renders).
        #[arg(long)]
        out: PathBuf,
        /// Optional configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override single configuration keys, e.g. --set adapt_iters=500.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Shorthand for --set seed=N.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a saved segmentation model (prints mean IoU).
    Eval {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Saved segmentation model directory.
        #[arg(long)]
        model: PathBuf,
        /// Which domain's scenes to score.
        #[arg(long, value_enum, default_value_t = DomainArg::Target)]
        domain: DomainArg,
    },
    /// Render a label tensor to a PPM image with the built-in palette.
    Render {
        /// Input label tensor (u8, h x w).
        #[arg(long)]
        labels: PathBuf,
        /// Output PPM path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Ignore failures: the global pool can only be set once, which is
        // fine for a short-lived process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn resolve_config(
    config: Option<PathBuf>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(path) => TrainConfig::load(&path)?,
        None => TrainConfig::default(),
    };
    for kv in sets {
        let Some((key, value)) = kv.split_once('=') else {
            return Err(RptError::Format(format!(
                "--set expects KEY=VALUE, got: {kv}"
            )));
        };
        cfg.set(key, value)?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            out,
            images,
            size,
            seed,
            hue_shift,
            noise,
        } => {
            let src = DomainParams::source(seed);
            let mut tgt = DomainParams::target(seed);
            if let Some(h) = hue_shift {
                tgt.hue_shift = h;
            }
            if let Some(n) = noise {
                tgt.noise_sigma = n;
            }
            let manifest = gen_dataset(&src, &tgt, images, images, size, size, &out)?;
            println!(
                "wrote {} source + {} target scenes ({}x{}) to {}",
                images,
                images,
                size,
                size,
                manifest.display()
            );
        }
        Command::Slic {
            image,
            out,
            superpixels,
            compactness,
            iters,
        } => {
            let img = Image::from_tensor(&Tensor::read(&image)?)?;
            let lab = rgb_to_lab(&img)?;
            let params = SlicParams {
                n_target: superpixels,
                compactness,
                max_iters: iters,
                ..SlicParams::default()
            };
            let result = slic(&lab, &params)?;
            result.map.to_tensor().write(&out)?;
            println!(
                "{} superpixels in {} iterations -> {}",
                result.map.count,
                result.iterations,
                out.display()
            );
        }
        Command::Cluster {
            data,
            out,
            k,
            superpixels,
            compactness,
            kmeans_iters,
            seed,
        } => {
            let (_, target) = load_split(&data)?;
            if target.is_empty() {
                return Err(RptError::Invalid("manifest has no target scenes".into()));
            }
            let params = SlicParams {
                n_target: superpixels,
                compactness,
                ..SlicParams::default()
            };
            let mut vectors = Vec::new();
            let mut counts = Vec::new();
            let mut dim = 0;
            for scene in &target {
                let lab = rgb_to_lab(&scene.image)?;
                let map = slic(&lab, &params)?.map;
                vectors.extend(pool_features(&scene.features, &map)?);
                counts.push(map.count);
                dim = scene.features.depth;
            }
            let n: usize = counts.iter().sum();
            let km = kmeans(&vectors, n, dim, k.min(n), kmeans_iters, seed)?;
            let mut table = String::from("scene,superpixel,cluster\n");
            let mut offset = 0;
            for (i, &c) in counts.iter().enumerate() {
                for id in 0..c {
                    table.push_str(&format!("{i},{id},{}\n", km.assignment[offset + id]));
                }
                offset += c;
            }
            fs::write(&out, table).map_err(|e| RptError::io(&out, e))?;
            let objective = km.objective_trace.last().copied().unwrap_or(0.0);
            println!(
                "clustered {n} superpixels from {} scenes into {} groups (objective {objective:.4}) -> {}",
                target.len(),
                km.k,
                out.display()
            );
        }
        Command::TrainLogic {
            data,
            out,
            hidden,
            epochs,
            lr,
            strips,
            superpixels,
            seed,
        } => {
            let (source, _) = load_split(&data)?;
            if source.is_empty() {
                return Err(RptError::Invalid("manifest has no source scenes".into()));
            }
            let params = SlicParams {
                n_target: superpixels,
                ..SlicParams::default()
            };
            let mut sequences = Vec::new();
            for scene in &source {
                let lab = rgb_to_lab(&scene.image)?;
                let map = slic(&lab, &params)?.map;
                let stats = dominative_categories(&map, &scene.labels, NUM_CLASSES)?;
                let all = RetainedSet {
                    retained: vec![true; map.count],
                    count: map.count,
                };
                sequences.extend(build_column_sequences(&map, &stats, &all, strips)?);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = LogicModel::init(NUM_CLASSES, hidden, 0.1, &mut rng);
            let report = train_logic(&mut model, &sequences, epochs, lr, seed.wrapping_add(1))?;
            model.save(&out)?;
            let (correct, total) = recovery_accuracy(&model, &sequences)?;
            println!(
                "trained on {} sequences for {} epochs; final loss {:.4}; recovery {correct}/{total} -> {}",
                sequences.len(),
                epochs,
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Regularize {
            data,
            model,
            config,
            sets,
        } => {
            let cfg = resolve_config(config, &sets, None)?;
            let (source, target) = load_split(&data)?;
            let head = SegHead::load(&model)?;
            let ctx = prepare_adaptation(&source, &target, &cfg)?;
            let state = refresh_state(&head, &target, &ctx, &cfg, 0)?;
            let (mut tot_pc, mut tot_cc, mut tot_sl) = (0.0, 0.0, 0.0);
            for (i, scene) in target.iter().enumerate() {
                let fwd = head.forward(&scene.features)?;
                let st = &state.images[i];
                let map = &ctx.maps[i];
                let pcr = pcr_loss(&fwd.logits, map, &st.stats, &st.retained, cfg.threshold_pc)?;
                let ccr = ccr_loss(
                    &fwd.logits,
                    map,
                    &st.cluster_targets,
                    &st.retained,
                    cfg.threshold_cc,
                )?;
                let slr = slr_loss(
                    &fwd.logits,
                    map,
                    &st.stats,
                    &st.scores,
                    &st.retained,
                    cfg.threshold_sl,
                )?;
                println!(
                    "scene {i}: pc {:.4} ({} px), cc {:.4} ({} px), sl {:.4} ({} px)",
                    pcr.loss, pcr.punished_count, ccr.loss, ccr.punished_count, slr.loss,
                    slr.punished_count
                );
                tot_pc += pcr.loss;
                tot_cc += ccr.loss;
                tot_sl += slr.loss;
            }
            println!("total: pc {tot_pc:.4}, cc {tot_cc:.4}, sl {tot_sl:.4}");
        }
        Command::Adapt {
            data,
            out,
            config,
            sets,
            seed,
        } => {
            let cfg = resolve_config(config, &sets, seed)?;
            let (source, target) = load_split(&data)?;
            if source.is_empty() || target.is_empty() {
                return Err(RptError::Invalid(
                    "manifest needs scenes in both domains".into(),
                ));
            }
            fs::create_dir_all(&out).map_err(|e| RptError::io(&out, e))?;
            cfg.save(&out.join("config.txt"))?;
            let palette = Palette::default_checked_in();
            let (mut head, mut disc) = init_networks(&cfg);
            pretrain(&mut head, &source, &cfg)?;
            let pretrain_miou = evaluate(&head, &target)?;
            write_ppm(
                &out.join("pred_before.ppm"),
                &predict_labels(&head, &target[0])?,
                &palette,
            )?;
            let report = adapt(&mut head, &mut disc, &source, &target, &cfg)?;
            let adapted_miou = evaluate(&head, &target)?;
            write_ppm(
                &out.join("pred_after.ppm"),
                &predict_labels(&head, &target[0])?,
                &palette,
            )?;
            let metrics_path = out.join("metrics.csv");
            fs::write(&metrics_path, &report.metrics_csv)
                .map_err(|e| RptError::io(&metrics_path, e))?;
            head.save(&out.join("model"))?;
            let eval_path = out.join("eval.txt");
            fs::write(
                &eval_path,
                format!(
                    "pretrain_miou {pretrain_miou}\nadapted_miou {adapted_miou}\nrefreshes {}\n",
                    report.refresh_iters.len()
                ),
            )
            .map_err(|e| RptError::io(&eval_path, e))?;
            println!("pretrain mIoU {pretrain_miou:.4}");
            println!("adapted mIoU {adapted_miou:.4}");
            println!("artifacts in {}", out.display());
        }
        Command::Eval {
            data,
            model,
            domain,
        } => {
            let (source, target) = load_split(&data)?;
            let scenes = match domain {
                DomainArg::Source => source,
                DomainArg::Target => target,
            };
            if scenes.is_empty() {
                return Err(RptError::Invalid("no scenes in that domain".into()));
            }
            let head = SegHead::load(&model)?;
            let miou = evaluate(&head, &scenes)?;
            println!("mIoU {miou:.4}");
        }
        Command::Render { labels, out } => {
            let map = LabelMap::from_tensor(&Tensor::read(&labels)?)?;
            write_ppm(&out, &map, &Palette::default_checked_in())?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
