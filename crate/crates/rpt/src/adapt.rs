//! Domain-adaptation orchestration.
//!
//! Pipeline: pretrain the segmentation head on labeled source scenes, then
//! adapt it to unlabeled target scenes by alternating discriminator and
//! model steps. The model step combines
//!
//! - source cross-entropy,
//! - the three prediction-transfer regularizers on the target prediction
//!   (patch vote, cluster vote, spatial logic), and
//! - a fooling term that pushes hidden features toward domain confusion.
//!
//! What is frozen when: superpixel geometry, appearance clusters, and the
//! spatial-logic model (trained on source ground-truth sequences) are fixed
//! for the whole run. The voted targets, retained sets, and logic scores
//! are state: they are recomputed from the current predictions a fixed
//! number of times at evenly spaced refresh marks (plus once up front) and
//! frozen in between. Punishment masks, by contrast, are always evaluated
//! live against the logits being trained.
//!
//! Regularizer losses are sums over punished pixels; their gradients are
//! divided by the pixel count before the step so all loss terms move the
//! parameters at commensurate scales. Reported losses stay unnormalized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::color::rgb_to_lab;
use crate::config::TrainConfig;
use crate::error::{Result, RptError};
use crate::logic::{build_column_sequences, score_logic, train_logic, LogicModel, LogicScores};
use crate::losses::{ccr_loss, pcr_loss, rpt_sum, seg_loss, slr_loss};
use crate::metrics::Confusion;
use crate::model::{adv_loss, Discriminator, SegHead};
use crate::scene::{LoadedScene, NUM_CLASSES};
use crate::slic::{slic, SlicParams, SuperpixelMap};
use crate::stats::{
    argmax_labels, cluster_dominative, complexity_filter, dominative_categories, kmeans,
    pool_features, RetainedSet, SuperpixelStats,
};
use crate::tensor::LabelMap;

/// Salts mixed into the master seed so each stochastic stage draws from an
/// independent stream.
const SALT_SEG_INIT: u64 = 0x9d3f_8a11_c2e4_55b7;
const SALT_DISC_INIT: u64 = 0x51ab_3c77_e9d0_1f23;
const SALT_KMEANS: u64 = 0x2fb8_64d9_90ce_a5e1;
const SALT_LOGIC: u64 = 0x6c1d_57f3_1842_bb09;

/// Parameter scale for uniform initialization of the networks.
pub const INIT_SCALE: f64 = 0.1;

pub fn derive_seed(base: u64, salt: u64) -> u64 {
    base ^ salt
}

/// Polynomial decay: `base * (1 - iter/total)^power`.
pub fn poly_lr(base: f64, iter: usize, total: usize, power: f64) -> f64 {
    debug_assert!(iter < total);
    base * (1.0 - iter as f64 / total as f64).powf(power)
}

/// Iterations at which the voted targets are recomputed: `refreshes` marks
/// spaced evenly through the run, `round(j * iters / (refreshes + 1))`.
/// Marks that collide with the start or fall outside the run are dropped.
pub fn refresh_marks(iters: usize, refreshes: usize) -> Vec<usize> {
    let mut marks: Vec<usize> = (1..=refreshes)
        .map(|j| ((j * iters) as f64 / (refreshes + 1) as f64).round() as usize)
        .filter(|&m| m > 0 && m < iters)
        .collect();
    marks.dedup();
    marks
}

/// The objective bookkeeping used for every metrics row:
/// `l_seg + (l_pc + l_cc + l_sl) - adv_weight * l_adv`.
pub fn total_objective(
    l_seg: f64,
    l_pc: f64,
    l_cc: f64,
    l_sl: f64,
    adv_weight: f64,
    l_adv: f64,
) -> f64 {
    l_seg + (l_pc + l_cc + l_sl) - adv_weight * l_adv
}

/// One metrics row; `{}` float formatting round-trips exactly through
/// `str::parse::<f64>`.
pub fn format_metrics_row(
    iter: usize,
    lr: f64,
    l_seg: f64,
    l_pc: f64,
    l_cc: f64,
    l_sl: f64,
    l_adv: f64,
    adv_weight: f64,
) -> String {
    let total = total_objective(l_seg, l_pc, l_cc, l_sl, adv_weight, l_adv);
    format!("{iter},{lr},{l_seg},{l_pc},{l_cc},{l_sl},{l_adv},{total}")
}

pub const METRICS_HEADER: &str = "iter,lr,l_seg,l_pc,l_cc,l_sl,l_adv,total";

/// Freshly initialized networks for a run seeded from the master seed.
pub fn init_networks(cfg: &TrainConfig) -> (SegHead, Discriminator) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_SEG_INIT));
    let head = SegHead::init_uniform(cfg.seg_hidden, NUM_CLASSES, INIT_SCALE, &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_DISC_INIT));
    let disc = Discriminator::init_uniform(cfg.seg_hidden, INIT_SCALE, &mut rng);
    (head, disc)
}

/// Argmax prediction for one scene.
pub fn predict_labels(head: &SegHead, scene: &LoadedScene) -> Result<LabelMap> {
    let fwd = head.forward(&scene.features)?;
    Ok(argmax_labels(&fwd.logits.prob_map()))
}

/// Mean IoU of the head over a set of labeled scenes (pooled confusion).
pub fn evaluate(head: &SegHead, scenes: &[LoadedScene]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(RptError::Invalid("nothing to evaluate".into()));
    }
    let preds: Vec<LabelMap> = scenes
        .par_iter()
        .map(|s| predict_labels(head, s))
        .collect::<Result<_>>()?;
    let mut conf = Confusion::new(NUM_CLASSES);
    for (pred, scene) in preds.iter().zip(scenes) {
        conf.accumulate(pred, &scene.labels)?;
    }
    conf.mean_iou()
        .ok_or_else(|| RptError::Invalid("no labeled pixels to evaluate".into()))
}

/// Supervised pretraining on source scenes with polynomial learning-rate
/// decay, visiting the scenes round-robin.
pub fn pretrain(head: &mut SegHead, source: &[LoadedScene], cfg: &TrainConfig) -> Result<()> {
    if source.is_empty() {
        return Err(RptError::Invalid("no source scenes to pretrain on".into()));
    }
    for iter in 0..cfg.pretrain_iters {
        let scene = &source[iter % source.len()];
        let lr = poly_lr(cfg.pretrain_lr, iter, cfg.pretrain_iters, cfg.poly_power);
        let fwd = head.forward(&scene.features)?;
        let seg = seg_loss(&fwd.logits, &scene.labels)?;
        if seg.degenerate {
            continue;
        }
        let mut grads = head.grads();
        head.backward(&fwd, &seg.grad_logits, None, &mut grads)?;
        head.sgd(&grads, lr);
    }
    Ok(())
}

fn everything_retained(count: usize) -> RetainedSet {
    RetainedSet {
        retained: vec![true; count],
        count,
    }
}

/// Everything frozen for a whole adaptation run: target superpixel maps,
/// their appearance-cluster membership, and the spatial-logic model trained
/// on source ground-truth sequences.
pub struct AdaptContext {
    pub maps: Vec<SuperpixelMap>,
    /// Cluster id per superpixel, per target image.
    pub cluster_of: Vec<Vec<u32>>,
    pub k: usize,
    /// `None` when the source scenes yielded no usable sequences.
    pub logic: Option<LogicModel>,
}

fn superpixels_of(scene: &LoadedScene, cfg: &TrainConfig) -> Result<SuperpixelMap> {
    let lab = rgb_to_lab(&scene.image)?;
    let params = SlicParams {
        n_target: cfg.superpixels,
        compactness: cfg.compactness,
        max_iters: cfg.slic_iters,
        ..SlicParams::default()
    };
    Ok(slic(&lab, &params)?.map)
}

/// Build the frozen context: segment the target scenes, cluster pooled
/// appearance features across images, and fit the logic model to the
/// source domain's ground-truth category sequences.
pub fn prepare_adaptation(
    source: &[LoadedScene],
    target: &[LoadedScene],
    cfg: &TrainConfig,
) -> Result<AdaptContext> {
    // Target geometry.
    let maps: Vec<SuperpixelMap> = target
        .par_iter()
        .map(|s| superpixels_of(s, cfg))
        .collect::<Result<_>>()?;
    // Appearance clusters across all target superpixels.
    let mut vectors = Vec::new();
    let mut counts = Vec::with_capacity(maps.len());
    for (scene, map) in target.iter().zip(&maps) {
        vectors.extend(pool_features(&scene.features, map)?);
        counts.push(map.count);
    }
    let n: usize = counts.iter().sum();
    let dim = scene_feature_dim(target)?;
    let k = cfg.kmeans_k.min(n);
    let km = kmeans(
        &vectors,
        n,
        dim,
        k,
        cfg.kmeans_iters,
        derive_seed(cfg.seed, SALT_KMEANS),
    )?;
    let mut cluster_of = Vec::with_capacity(maps.len());
    let mut offset = 0;
    for &c in &counts {
        cluster_of.push(km.assignment[offset..offset + c].to_vec());
        offset += c;
    }
    // Spatial logic from source ground truth. Sequences use every valid
    // superpixel so the model sees complete columns.
    let src_maps: Vec<SuperpixelMap> = source
        .par_iter()
        .map(|s| superpixels_of(s, cfg))
        .collect::<Result<_>>()?;
    let mut sequences = Vec::new();
    for (scene, map) in source.iter().zip(&src_maps) {
        let stats = dominative_categories(map, &scene.labels, NUM_CLASSES)?;
        let all = everything_retained(map.count);
        sequences.extend(build_column_sequences(map, &stats, &all, cfg.logic_strips)?);
    }
    let logic = if sequences.is_empty() {
        None
    } else {
        let seed = derive_seed(cfg.seed, SALT_LOGIC);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = LogicModel::init(NUM_CLASSES, cfg.logic_hidden, INIT_SCALE, &mut rng);
        train_logic(
            &mut model,
            &sequences,
            cfg.logic_epochs,
            cfg.logic_lr,
            seed.wrapping_add(1),
        )?;
        Some(model)
    };
    Ok(AdaptContext {
        maps,
        cluster_of,
        k,
        logic,
    })
}

fn scene_feature_dim(scenes: &[LoadedScene]) -> Result<usize> {
    let dim = scenes
        .first()
        .ok_or_else(|| RptError::Invalid("no scenes".into()))?
        .features
        .depth;
    if scenes.iter().any(|s| s.features.depth != dim) {
        return Err(RptError::Invalid("scenes have mixed feature depths".into()));
    }
    Ok(dim)
}

/// Per-image frozen targets for the regularizers.
pub struct ImageState {
    pub stats: SuperpixelStats,
    pub retained: RetainedSet,
    /// Voted category of the superpixel's appearance cluster.
    pub cluster_targets: Vec<Option<u8>>,
    pub scores: LogicScores,
}

/// Snapshot of all voted targets at one refresh.
pub struct AdaptState {
    pub version: usize,
    pub images: Vec<ImageState>,
}

/// Recompute voted targets from the current predictions on every target
/// scene. Cluster membership and the logic model stay frozen; votes,
/// retained sets, cluster votes, and logic scores are refreshed.
pub fn refresh_state(
    head: &SegHead,
    target: &[LoadedScene],
    ctx: &AdaptContext,
    cfg: &TrainConfig,
    version: usize,
) -> Result<AdaptState> {
    if target.len() != ctx.maps.len() {
        return Err(RptError::Invalid(
            "adaptation context does not match target scenes".into(),
        ));
    }
    let per: Vec<(SuperpixelStats, RetainedSet)> = target
        .par_iter()
        .zip(&ctx.maps)
        .map(|(scene, map)| {
            let pred = predict_labels(head, scene)?;
            let stats = dominative_categories(map, &pred, NUM_CLASSES)?;
            let retained = complexity_filter(&stats, cfg.keep_fraction)?;
            Ok((stats, retained))
        })
        .collect::<Result<_>>()?;
    // Cluster votes across all images: retained superpixels vote with
    // their current category.
    let mut global_dom = Vec::new();
    let mut global_assign = Vec::new();
    for (i, (stats, retained)) in per.iter().enumerate() {
        for id in 0..stats.count {
            global_dom.push(if retained.contains(id) {
                stats.dominative[id]
            } else {
                None
            });
            global_assign.push(ctx.cluster_of[i][id]);
        }
    }
    let cluster_votes = cluster_dominative(&global_assign, ctx.k, &global_dom, NUM_CLASSES)?;
    let mut images = Vec::with_capacity(target.len());
    let mut offset = 0;
    for (i, (stats, retained)) in per.into_iter().enumerate() {
        let count = stats.count;
        let cluster_targets: Vec<Option<u8>> = (0..count)
            .map(|id| cluster_votes[global_assign[offset + id] as usize])
            .collect();
        // Logic scores over complete columns of valid superpixels;
        // punishment is gated later by the retained set.
        let scores = match &ctx.logic {
            Some(model) => {
                let all = everything_retained(count);
                let seqs = build_column_sequences(&ctx.maps[i], &stats, &all, cfg.logic_strips)?;
                score_logic(model, &seqs, count)?
            }
            None => LogicScores {
                scores: vec![None; count],
            },
        };
        offset += count;
        images.push(ImageState {
            stats,
            retained,
            cluster_targets,
            scores,
        });
    }
    Ok(AdaptState { version, images })
}

/// Outcome of an adaptation run.
pub struct AdaptReport {
    /// Full metrics table (header plus one row per logging interval).
    pub metrics_csv: String,
    /// Iterations at which the state was refreshed (beyond the initial one).
    pub refresh_iters: Vec<usize>,
}

/// Adversarial adaptation with prediction-transfer regularization.
///
/// Each iteration pairs one source and one target scene (round-robin),
/// takes one discriminator step on the current hidden features, then one
/// model step against the updated discriminator.
pub fn adapt(
    head: &mut SegHead,
    disc: &mut Discriminator,
    source: &[LoadedScene],
    target: &[LoadedScene],
    cfg: &TrainConfig,
) -> Result<AdaptReport> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(RptError::Invalid(
            "adaptation needs source and target scenes".into(),
        ));
    }
    if disc.w.len() != head.hidden {
        return Err(RptError::Invalid(
            "discriminator width does not match the head's hidden layer".into(),
        ));
    }
    let ctx = prepare_adaptation(source, target, cfg)?;
    let mut state = refresh_state(head, target, &ctx, cfg, 0)?;
    let marks = refresh_marks(cfg.adapt_iters, cfg.state_refreshes);
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut refresh_iters = Vec::new();
    for iter in 0..cfg.adapt_iters {
        if marks.contains(&iter) {
            state = refresh_state(head, target, &ctx, cfg, state.version + 1)?;
            refresh_iters.push(iter);
        }
        let s_idx = iter % source.len();
        let t_idx = iter % target.len();
        let src = &source[s_idx];
        let tgt = &target[t_idx];
        let lr = poly_lr(cfg.adapt_lr, iter, cfg.adapt_iters, cfg.poly_power);

        let src_fwd = head.forward(&src.features)?;
        let tgt_fwd = head.forward(&tgt.features)?;

        // Discriminator minimization step on the current activations.
        let first = adv_loss(disc, &tgt_fwd.hidden, &src_fwd.hidden)?;
        disc.sgd(&first.d_grads, cfg.disc_lr);
        // Model step fools the updated discriminator.
        let adv = adv_loss(disc, &tgt_fwd.hidden, &src_fwd.hidden)?;

        let seg = seg_loss(&src_fwd.logits, &src.labels)?;
        let st = &state.images[t_idx];
        let map = &ctx.maps[t_idx];
        let pcr = pcr_loss(&tgt_fwd.logits, map, &st.stats, &st.retained, cfg.threshold_pc)?;
        let ccr = ccr_loss(
            &tgt_fwd.logits,
            map,
            &st.cluster_targets,
            &st.retained,
            cfg.threshold_cc,
        )?;
        let slr = slr_loss(
            &tgt_fwd.logits,
            map,
            &st.stats,
            &st.scores,
            &st.retained,
            cfg.threshold_sl,
        )?;
        let rpt = rpt_sum(&pcr, &ccr, &slr)?;

        let mut grads = head.grads();
        let dh_src: Vec<f64> = adv
            .dhidden_src
            .iter()
            .map(|g| -cfg.adv_weight * g)
            .collect();
        head.backward(&src_fwd, &seg.grad_logits, Some(&dh_src), &mut grads)?;
        let inv_px = 1.0 / tgt_fwd.logits.pixels() as f64;
        let dl_tgt: Vec<f64> = rpt.grad_logits.iter().map(|g| g * inv_px).collect();
        let dh_tgt: Vec<f64> = adv
            .dhidden_tgt
            .iter()
            .map(|g| -cfg.adv_weight * g)
            .collect();
        head.backward(&tgt_fwd, &dl_tgt, Some(&dh_tgt), &mut grads)?;
        head.sgd(&grads, lr);

        if iter % cfg.metrics_every == 0 || iter + 1 == cfg.adapt_iters {
            metrics.push_str(&format_metrics_row(
                iter,
                lr,
                seg.loss,
                pcr.loss,
                ccr.loss,
                slr.loss,
                adv.loss,
                cfg.adv_weight,
            ));
            metrics.push('\n');
        }
    }
    Ok(AdaptReport {
        metrics_csv: metrics,
        refresh_iters,
    })
}

/// Pretrain/adapt comparison on freshly generated scenes (all in memory).
#[derive(Debug, Clone, Copy)]
pub struct BenchmarkOutcome {
    pub pretrain_miou: f64,
    pub rpt1_miou: f64,
    pub rpt3_miou: f64,
}

/// Generate `n_images` scenes per domain from `base_seed`, pretrain on
/// source, then adapt twice from the same pretrained weights: once with a
/// single state refresh and once with three. Evaluation is on the target
/// scenes (their labels exist for scoring only).
pub fn run_benchmark(
    base_seed: u64,
    cfg: &TrainConfig,
    n_images: usize,
    size: usize,
) -> Result<BenchmarkOutcome> {
    let source = generate_in_memory(crate::scene::DomainParams::source(base_seed), n_images, size, 0)?;
    let target = generate_in_memory(
        crate::scene::DomainParams::target(base_seed),
        n_images,
        size,
        crate::scene::TARGET_SEED_OFFSET,
    )?;
    let mut cfg = cfg.clone();
    cfg.seed = base_seed;
    let (mut head, _) = init_networks(&cfg);
    pretrain(&mut head, &source, &cfg)?;
    let pretrain_miou = evaluate(&head, &target)?;
    let run = |refreshes: usize| -> Result<f64> {
        let mut h = head.clone();
        let (_, mut d) = init_networks(&cfg);
        let mut c = cfg.clone();
        c.state_refreshes = refreshes;
        adapt(&mut h, &mut d, &source, &target, &c)?;
        evaluate(&h, &target)
    };
    Ok(BenchmarkOutcome {
        pretrain_miou,
        rpt1_miou: run(1)?,
        rpt3_miou: run(3)?,
    })
}

/// Generate scenes without touching disk, using the dataset seed layout.
pub fn generate_in_memory(
    params: crate::scene::DomainParams,
    n: usize,
    size: usize,
    seed_offset: u64,
) -> Result<Vec<LoadedScene>> {
    use crate::scene::{gen_scene, Domain, ManifestEntry};
    let jobs: Vec<crate::scene::DomainParams> = (0..n)
        .map(|i| {
            let mut p = params.clone();
            p.seed = params.seed.wrapping_add(seed_offset + i as u64);
            p
        })
        .collect();
    jobs.par_iter()
        .map(|p| {
            let scene = gen_scene(p, size, size)?;
            Ok(LoadedScene {
                entry: ManifestEntry {
                    domain: if seed_offset == 0 {
                        Domain::Source
                    } else {
                        Domain::Target
                    },
                    split: "train".into(),
                    image_path: Default::default(),
                    label_path: Default::default(),
                    feature_path: Default::default(),
                    eval_only: seed_offset != 0,
                },
                image: scene.image,
                labels: scene.labels,
                features: scene.features,
            })
        })
        .collect()
}

/// Split loaded scenes into (source, target) in manifest order.
pub fn load_split(manifest: &std::path::Path) -> Result<(Vec<LoadedScene>, Vec<LoadedScene>)> {
    let entries = crate::scene::load_manifest(manifest)?;
    let scenes: Vec<LoadedScene> = entries
        .par_iter()
        .map(crate::scene::load_scene)
        .collect::<Result<_>>()?;
    let mut source = Vec::new();
    let mut target = Vec::new();
    for s in scenes {
        match s.entry.domain {
            crate::scene::Domain::Source => source.push(s),
            crate::scene::Domain::Target => target.push(s),
        }
    }
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::DomainParams;

    #[test]
    fn poly_decay_matches_formula() {
        assert_eq!(poly_lr(0.3, 0, 100, 0.9), 0.3);
        let mid = poly_lr(0.3, 50, 100, 0.9);
        assert!((mid - 0.3 * 0.5f64.powf(0.9)).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for iter in 0..100 {
            let lr = poly_lr(0.3, iter, 100, 0.9);
            assert!(lr > 0.0 && lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn refresh_marks_are_evenly_spaced() {
        assert_eq!(refresh_marks(1500, 3), vec![375, 750, 1125]);
        assert_eq!(refresh_marks(1500, 1), vec![750]);
        assert_eq!(refresh_marks(1500, 0), vec![]);
        assert_eq!(refresh_marks(10, 3), vec![3, 5, 8]);
        // Tiny runs drop marks that would collide with the start.
        assert_eq!(refresh_marks(1, 3), vec![]);
    }

    #[test]
    fn total_objective_is_the_documented_expression() {
        let t = total_objective(1.5, 0.2, 0.3, -0.1, 0.1, 2.0);
        assert_eq!(t, 1.5 + (0.2 + 0.3 + -0.1) - 0.1 * 2.0);
        let row = format_metrics_row(7, 0.1, 1.5, 0.2, 0.3, -0.1, 2.0, 0.1);
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 8);
        let parsed: f64 = cols[7].parse().unwrap();
        assert_eq!(parsed, t);
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            seed: 3,
            superpixels: 32,
            kmeans_k: 8,
            kmeans_iters: 20,
            logic_hidden: 8,
            logic_epochs: 4,
            logic_strips: 2,
            seg_hidden: 6,
            pretrain_iters: 40,
            adapt_iters: 12,
            metrics_every: 5,
            state_refreshes: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_scenes(cfg: &TrainConfig) -> (Vec<LoadedScene>, Vec<LoadedScene>) {
        let source =
            generate_in_memory(DomainParams::source(cfg.seed), 2, 32, 0).unwrap();
        let target = generate_in_memory(
            DomainParams::target(cfg.seed),
            2,
            32,
            crate::scene::TARGET_SEED_OFFSET,
        )
        .unwrap();
        (source, target)
    }

    #[test]
    fn pretraining_reduces_source_loss_and_scores_target() {
        let cfg = tiny_config();
        let (source, target) = tiny_scenes(&cfg);
        let (mut head, _) = init_networks(&cfg);
        let before = {
            let fwd = head.forward(&source[0].features).unwrap();
            seg_loss(&fwd.logits, &source[0].labels).unwrap().loss
        };
        pretrain(&mut head, &source, &cfg).unwrap();
        let after = {
            let fwd = head.forward(&source[0].features).unwrap();
            seg_loss(&fwd.logits, &source[0].labels).unwrap().loss
        };
        assert!(after < before, "{before} -> {after}");
        let miou = evaluate(&head, &target).unwrap();
        assert!((0.0..=1.0).contains(&miou));
    }

    #[test]
    fn adaptation_runs_refreshes_and_logs_deterministically() {
        let cfg = tiny_config();
        let (source, target) = tiny_scenes(&cfg);
        let run = || {
            let (mut head, mut disc) = init_networks(&cfg);
            pretrain(&mut head, &source, &cfg).unwrap();
            let report = adapt(&mut head, &mut disc, &source, &target, &cfg).unwrap();
            (report, head)
        };
        let (report_a, head_a) = run();
        let (report_b, head_b) = run();
        assert_eq!(report_a.metrics_csv, report_b.metrics_csv);
        assert_eq!(head_a, head_b);
        assert_eq!(report_a.refresh_iters, refresh_marks(12, 2));
        // Table shape: header + rows at 0,5,10 and the final iteration 11.
        let lines: Vec<&str> = report_a.metrics_csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 1 + 4);
        // Every total column re-derives bit-exactly from its components.
        for row in &lines[1..] {
            let cols: Vec<f64> = row.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
            let want = total_objective(cols[1], cols[2], cols[3], cols[4], cfg.adv_weight, cols[5]);
            assert_eq!(cols[6], want);
        }
    }

    #[test]
    fn state_refresh_tracks_changing_predictions() {
        let cfg = tiny_config();
        let (source, target) = tiny_scenes(&cfg);
        let (mut head, _) = init_networks(&cfg);
        let ctx = prepare_adaptation(&source, &target, &cfg).unwrap();
        let s0 = refresh_state(&head, &target, &ctx, &cfg, 0).unwrap();
        pretrain(&mut head, &source, &cfg).unwrap();
        let s1 = refresh_state(&head, &target, &ctx, &cfg, 1).unwrap();
        assert_eq!(s0.version, 0);
        assert_eq!(s1.version, 1);
        assert_eq!(s0.images.len(), 2);
        // Votes exist and differ somewhere once the head has trained.
        let any_differs = s0
            .images
            .iter()
            .zip(&s1.images)
            .any(|(a, b)| a.stats.dominative != b.stats.dominative);
        assert!(any_differs);
        // Retained sets keep exactly round(keep * count) superpixels.
        for img in &s1.images {
            let want = (cfg.keep_fraction * img.stats.count as f64).round() as usize;
            assert_eq!(img.retained.count, want.min(img.stats.count));
        }
        // Cluster targets agree with the global cluster vote arity.
        for img in &s1.images {
            assert_eq!(img.cluster_targets.len(), img.stats.count);
            assert_eq!(img.scores.scores.len(), img.stats.count);
        }
    }

    #[test]
    fn adapt_rejects_mismatched_discriminator() {
        let cfg = tiny_config();
        let (source, target) = tiny_scenes(&cfg);
        let (mut head, _) = init_networks(&cfg);
        let mut disc = Discriminator::zeros(cfg.seg_hidden + 1);
        assert!(adapt(&mut head, &mut disc, &source, &target, &cfg).is_err());
    }
}
