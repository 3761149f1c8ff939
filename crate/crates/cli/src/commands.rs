//! The eleven subcommands. Each takes the resolved config and an open
//! run directory, writes its artifacts there, and returns deterministic
//! metrics plus a one-line summary.
//!
//! Commands that need a trained artifact load it from the paths in
//! `[data]` (or the matching command-line flags); commands that need
//! example data synthesize it from the configured archetypes, so every
//! command runs end to end without any external files.

use std::path::{Path, PathBuf};

use cellwarp::bank::{
    augmentation_label_policy, build_augmented_bank, load_bank, save_bank, BankEntry, CellBank,
};
use cellwarp::error::{Error, Result};
use cellwarp::invariant::{
    embed_bank, load_encoder, match_patch, save_encoder, train_invariant, EncoderModel,
};
use cellwarp::mapping::{
    load_mapper, oracle_register, register, save_mapper, save_registration, train_mapping,
    transfer_label, MapperModel, RegistrationResult,
};
use cellwarp::patch::{
    extract_patch, load_centroids_csv, CellPatch, LabelChannel, LabelStack, WholeImage,
};
use cellwarp::pipeline::{
    build_grid_scene, circular_mean_angle, evaluate_detections, load_detections_csv,
    mean_angle_error_deg, mean_instance_dice, sample_background, save_detections_csv,
    save_instances_png, scan_count, segment_few_shot, SyntheticScene,
};
use cellwarp::rng::{derive, substream};
use cellwarp::synth::metrics::{
    dice, iou, l1_field, l1_image, ncc_field, summarize, write_report_csv, write_report_json,
    BenchmarkRow,
};
use cellwarp::synth::{default_archetypes, gen_pair, gen_shape, orientation_archetypes, ShapeSpec};
use cellwarp::theory::{verify_bound, write_bound_report};
use cellwarp::warp::{
    apply_warp_labels, apply_warp_patch, make_warp, sample_diffeo, InterpPolicy, WarpField,
};
use serde::Serialize;
use serde_json::Value;

use crate::config::{stream_seed, streams, ArchetypeSet, Resolved};
use crate::rundir::RunDir;

/// Deterministic metrics plus a human summary line.
pub struct Outcome {
    pub metrics: Value,
    pub summary: String,
}

fn outcome<M: Serialize>(metrics: &M, summary: String) -> Result<Outcome> {
    let metrics = serde_json::to_value(metrics)
        .map_err(|e| Error::Format(format!("cannot encode metrics: {e}")))?;
    Ok(Outcome { metrics, summary })
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str, key: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| {
        Error::Config(format!("{what} is required: pass --{key} or set data.{key}"))
    })
}

/// The configured archetype list, reduced to a seeded random subset when
/// `data.subset` asks for one.
fn archetype_specs(cfg: &Resolved) -> Result<Vec<ShapeSpec>> {
    let n = cfg.data.patch_size;
    let mut specs = match cfg.data.archetypes {
        ArchetypeSet::Default => default_archetypes(n),
        ArchetypeSet::Oriented => orientation_archetypes(n),
    };
    let k = cfg.data.subset;
    if k > 0 && k < specs.len() {
        let mut rng = substream(stream_seed(cfg.root_seed(), streams::SUBSET), "indices");
        let mut indices: Vec<usize> = (0..specs.len()).collect();
        for i in (1..indices.len()).rev() {
            let j = rand_index(&mut rng, i + 1);
            indices.swap(i, j);
        }
        let mut chosen = indices[..k].to_vec();
        chosen.sort_unstable();
        specs = chosen.into_iter().map(|i| specs[i].clone()).collect();
    }
    Ok(specs)
}

fn rand_index<R: rand::Rng>(rng: &mut R, bound: usize) -> usize {
    rng.gen_range(0..bound)
}

fn load_bank_input(cfg: &Resolved, run: &mut RunDir) -> Result<CellBank<f32>> {
    let path = require(&cfg.data.bank, "a cell bank", "bank")?;
    run.record_input("bank", path)?;
    load_bank(path)
}

fn load_encoder_input(cfg: &Resolved, run: &mut RunDir) -> Result<EncoderModel<f32>> {
    let path = require(&cfg.data.encoder, "an encoder checkpoint", "encoder")?;
    run.record_input("encoder", path)?;
    load_encoder(path)
}

fn load_mapper_input(cfg: &Resolved, run: &mut RunDir) -> Result<MapperModel<f32>> {
    let path = require(&cfg.data.mapper, "a mapper checkpoint", "mapper")?;
    run.record_input("mapper", path)?;
    load_mapper(path)
}

/// The grid scene every image-level command falls back to when no
/// `--image` is given. Built from the configured archetypes so it shows
/// the same cells the bank was built from.
fn grid_scene(cfg: &Resolved) -> Result<SyntheticScene<f32>> {
    let specs = archetype_specs(cfg)?;
    build_grid_scene(
        &specs,
        cfg.data.patch_size,
        cfg.data.scene_rows,
        cfg.data.scene_cols,
        cfg.data.scene_spacing,
        &cfg.augmentation,
        stream_seed(cfg.root_seed(), streams::SCENE),
    )
}

/// The input image for count/segment: either the configured file or a
/// synthetic grid scene with its ground truth.
fn load_or_build_image(
    cfg: &Resolved,
    run: &mut RunDir,
) -> Result<(WholeImage<f32>, Option<SyntheticScene<f32>>)> {
    match &cfg.data.image {
        Some(path) => {
            run.record_input("image", path)?;
            Ok((WholeImage::load(path)?, None))
        }
        None => {
            let scene = grid_scene(cfg)?;
            scene.image.save_png(&run.artifact("scene.png"))?;
            Ok((scene.image.clone(), Some(scene)))
        }
    }
}

fn mask_of<'a>(labels: &'a LabelStack<f32>, what: &str) -> Result<&'a LabelChannel<f32>> {
    labels.channel("mask").ok_or_else(|| Error::Config(format!("{what} has no mask channel")))
}

// ---------------------------------------------------------------- bank

#[derive(Serialize)]
struct BankBuildMetrics {
    entries: usize,
    patch_size: usize,
    background: usize,
    channels: Vec<String>,
    subset: usize,
}

pub fn bank_build(cfg: &Resolved, run: &mut RunDir) -> Result<Outcome> {
    let n = cfg.data.patch_size;
    let root = cfg.root_seed();
    let specs = archetype_specs(cfg)?;
    let shapes_seed = stream_seed(root, streams::BANK_SHAPES);
    let entries: Vec<BankEntry<f32>> = specs
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let (patch, labels) = gen_shape::<f32>(spec, n, derive(shapes_seed, &j.to_string()))?;
            Ok(BankEntry { patch, labels })
        })
        .collect::<Result<_>>()?;
    let mut bank = CellBank::new(entries)?;
    if cfg.data.background_count > 0 {
        let scene = build_grid_scene::<f32>(
            &specs,
            n,
            cfg.data.scene_rows,
            cfg.data.scene_cols,
            cfg.data.scene_spacing,
            &cfg.augmentation,
            stream_seed(root, streams::BACKGROUND_SCENE),
        )?;
        bank.background = sample_background(
            &scene.image,
            &scene.centroids(),
            n,
            cfg.data.background_count,
            stream_seed(root, streams::BACKGROUND),
        )?;
    }
    save_bank(&run.artifact("bank"), &bank)?;
    run.write_seeds(&[
        (streams::BANK_SHAPES, shapes_seed),
        (streams::BACKGROUND_SCENE, stream_seed(root, streams::BACKGROUND_SCENE)),
        (streams::BACKGROUND, stream_seed(root, streams::BACKGROUND)),
    ])?;
    let mut channels: Vec<String> = bank.entries[0]
        .labels
        .channels
        .iter()
        .map(|c| c.name.clone())
        .collect();
    channels.sort();
    let metrics = BankBuildMetrics {
        entries: bank.entries.len(),
        patch_size: n,
        background: bank.background.len(),
        channels,
        subset: cfg.data.subset,
    };
    let summary = format!(
        "{} entries at {n} px, {} background exemplars",
        bank.entries.len(),
        bank.background.len()
    );
    outcome(&metrics, summary)
}

#[derive(Serialize)]
struct AugmentMetrics {
    entries: usize,
    augmentations_per_entry: usize,
    records: usize,
    kinds: Vec<String>,
}

pub fn augment(cfg: &Resolved, run: &mut RunDir) -> Result<Outcome> {
    let bank = load_bank_input(cfg, run)?;
    let seed = stream_seed(cfg.root_seed(), streams::AUGMENT);
    let m = cfg.bank.augmentations_per_entry;
    let augmented = build_augmented_bank(&bank, m, &cfg.augmentation, seed)?;
    save_bank(&run.artifact("bank"), &augmented)?;
    run.write_seeds(&[(streams::AUGMENT, seed)])?;
    let mut kinds: Vec<String> = cfg
        .augmentation
        .kinds
        .iter()
        .filter(|k| k.weight > 0.0)
        .map(|k| k.kind.name().to_string())
        .collect();
    kinds.sort();
    let metrics = AugmentMetrics {
        entries: augmented.entries.len(),
        augmentations_per_entry: m,
        records: augmented.augmented.len(),
        kinds,
    };
    let summary = format!(
        "{} records ({} entries x {m} augmentations)",
        augmented.augmented.len(),
        augmented.entries.len()
    );
    outcome(&metrics, summary)
}

// --------------------------------------------------------------- train

#[derive(Serialize)]
struct TrainMetrics {
    epochs: usize,
    first_loss: Option<f64>,
    final_loss: Option<f64>,
    detail: Value,
}

pub fn train_invariant_cmd(cfg: &Resolved, run: &mut RunDir) -> Result<Outcome> {
    let bank = load_bank_input(cfg, run)?;
    let model = train_invariant(&bank, &cfg.invariant_net)?;
    save_encoder(&run.artifact("encoder.cwt"), &model)?;
    run.write_seeds(&[(streams::INVARIANT_TRAIN, cfg.invariant_net.seed)])?;
    let metrics = TrainMetrics {
        epochs: model.fingerprint.epochs,
        first_loss: model.fingerprint.loss_history.first().copied(),
        final_loss: model.fingerprint.loss_history.last().copied(),
        detail: serde_json::json!({ "latent_dim": cfg.invariant_net.latent_dim }),
    };
    let summary = format!(
        "encoder trained {} epochs, final loss {:.4}",
        model.fingerprint.epochs,
        metrics.final_loss.unwrap_or(f64::NAN)
    );
    outcome(&metrics, summary)
}

pub fn train_mapping_cmd(cfg: &Resolved, run: &mut RunDir) -> Result<Outcome> {
    let bank = load_bank_input(cfg, run)?;
    let model = train_mapping(&bank, &cfg.mapping_net)?;
    save_mapper(&run.artifact("mapper.cwt"), &model)?;
    run.write_seeds(&[(streams::MAPPING_TRAIN, cfg.mapping_net.seed)])?;
    let kind = serde_json::to_value(cfg.mapping_net.kind)
        .map_err(|e| Error::Format(format!("cannot encode mapper kind: {e}")))?;
    let metrics = TrainMetrics {
        epochs: model.fingerprint.epochs,
        first_loss: model.fingerprint.loss_history.first().copied(),
        final_loss: model.fingerprint.loss_history.last().copied(),
        detail: serde_json::json!({ "kind": kind }),
    };
    let summary = format!(
        "mapper trained {} epochs, final loss {:.4}",
        model.fingerprint.epochs,
        metrics.final_loss.unwrap_or(f64::NAN)
    );
    outcome(&metrics, summary)
}

// --------------------------------------------------------------- infer

#[derive(Serialize)]
struct MatchMetrics {
    queries: usize,
    accuracy: Option<f64>,
    mean_latent_distance: f64,
}

pub fn match_cmd(cfg: &Resolved, run: &mut RunDir) -> Result<Outcome> {
    let mut bank = load_bank_input(cfg, run)?;
    let encoder = load_encoder_input(cfg, run)?;
    if bank.augmented.is_empty() {
        return Err(Error::Config(
            "the bank has no augmented records; run `augment` first".to_string(),
        ));
    }
    embed_bank(&encoder, &mut bank)?;
    let n = cfg.data.patch_size;

    // Queries: extracted around given centroids, or synthetic warps of
    // the bank's own archetypes (whose true entry is then known).
    let mut queries: Vec<CellPatch<f32>> = Vec::new();
    let mut truth: Vec<Option<usize>> = Vec::new();
    match (&cfg.data.image, &cfg.data.centroids) {
        (Some(image_path), Some(centroid_path)) => {
            run.record_input("image", image_path)?;
            run.record_input("centroids", centroid_path)?;
            let image = WholeImage::<f32>::load(image_path)?;
            for c in load_centroids_csv(centroid_path)? {
                queries.push(extract_patch(&image, [c[0] as i64, c[1] as i64], n)?);
                truth.push(None);
            }
        }
        _ => {
            let qseed = stream_seed(cfg.root_seed(), streams::MATCH_QUERIES);
            for (j, entry) in bank.entries.iter().enumerate() {
                for q in 0..cfg.data.queries {
                    let mut rng = substream(qseed, &format!("{j}/{q}"));
                    let spec = sample_diffeo(&cfg.augmentation, &mut rng)?;
                    let field = make_warp::<f32>(&spec, n, n)?;
                    queries.push(apply_warp_patch(
                        &field,
                        &entry.patch,
                        &InterpPolicy::for_images(),
                    )?);
                    truth.push(Some(j));
                }
            }
        }
    }
    if queries.is_empty() {
        return Err(Error::Config("no queries: centroid list is empty".to_string()));
    }

    let mut csv = String::from("query,entry,record,latent_distance,cosine_distance,true_entry\n");
    let mut correct = 0usize;
    let mut labeled = 0usize;
    let mut total_distance = 0.0;
    for (i, query) in queries.iter().enumerate() {
        let m = match_patch(&encoder, query, &bank)?;
        total_distance += m.latent_distance;
        let true_field = match truth[i] {
            Some(t) => {
                labeled += 1;
                if t == m.entry_index {
                    correct += 1;
                }
                t.to_string()
            }
            None => String::new(),
        };
        csv.push_str(&format!(
            "{i},{},{},{},{},{true_field}\n",
            m.entry_index, m.record_index, m.latent_distance, m.cosine_distance
        ));
    }
    std::fs::write(run.artifact("matches.csv"), csv)?;
    run.write_seeds(&[(streams::MATCH_QUERIES, stream_seed(cfg.root_seed(), streams::MATCH_QUERIES))])?;
    let accuracy =
        if labeled > 0 { Some(correct as f64 / labeled as f64) } else { None };
    let metrics = MatchMetrics {
        queries: queries.len(),
        accuracy,
        mean_latent_distance: total_distance / queries.len() as f64,
    };
    let summary = match accuracy {
        Some(a) => format!("{} queries, accuracy {a:.3}", queries.len()),
        None => format!("{} queries matched", queries.len()),
    };
    outcome(&metrics, summary)
}

#[derive(Serialize)]
struct RegisterMetrics {
    pairs: usize,
    mean_dice: f64,
    mean_iou: f64,
    mean_l1_before: f64,
    mean_l1_after: f64,
    improved_fraction: f64,
    mean_alignment_residual: f64,
    mean_cycle_residual: f64,
}

/// Registers synthetic (archetype, warped archetype) pairs and reports
/// label-transfer quality against the known ground truth.
pub fn register_cmd(cfg: &Resolved, run: &mut RunDir) -> Result<Outcome> {
    let mapper = load_mapper_input(cfg, run)?;
    let specs = archetype_specs(cfg)?;
    let n = cfg.data.patch_size;
    let pair_seed = stream_seed(cfg.root_seed(), streams::PAIRS);
    let policy = augmentation_label_policy();
    let count = cfg.data.pairs.max(1);

    let (mut d_sum, mut i_sum, mut before_sum, mut after_sum) = (0.0, 0.0, 0.0, 0.0);
    let (mut align_sum, mut cycle_sum) = (0.0, 0.0);
    let mut improved = 0usize;
    for i in 0..count {
        let spec = &specs[i % specs.len()];
        let mut rng = substream(pair_seed, &i.to_string());
        let diffeo = sample_diffeo(&cfg.augmentation, &mut rng)?;
        let pair = gen_pair::<f32>(spec, &diffeo, n, derive(pair_seed, &format!("shape/{i}")))?;
        let result = register(&mapper, &pair.fixed, &pair.moving)?;
        if i == 0 {
            save_registration(&run.artifact("registrations"), "pair-000", &result)?;
        }
        let transferred = transfer_label(&result, &pair.fixed_labels, &policy)?;
        let t_mask = &mask_of(&transferred, "transfer")?.data;
        let m_mask = &mask_of(&pair.moving_labels, "pair")?.data;
        d_sum += dice(t_mask, m_mask)?;
        i_sum += iou(t_mask, m_mask)?;
        let moved = apply_warp_patch(&result.forward, &pair.moving, &InterpPolicy::for_images())?;
        let before = l1_image(&pair.moving.intensities, &pair.fixed.intensities)?;
        let after = l1_image(&moved.intensities, &pair.fixed.intensities)?;
        before_sum += before;
        after_sum += after;
        if after < before {
            improved += 1;
        }
        align_sum += result.alignment_residual;
        cycle_sum += result.cycle_residual;
    }
    run.write_seeds(&[(streams::PAIRS, pair_seed)])?;
    let k = count as f64;
    let metrics = RegisterMetrics {
        pairs: count,
        mean_dice: d_sum / k,
        mean_iou: i_sum / k,
        mean_l1_before: before_sum / k,
        mean_l1_after: after_sum / k,
        improved_fraction: improved as f64 / k,
        mean_alignment_residual: align_sum / k,
        mean_cycle_residual: cycle_sum / k,
    };
    let summary = format!(
        "{count} pairs, mean DSC {:.3}, L1 {:.4} -> {:.4}",
        metrics.mean_dice, metrics.mean_l1_before, metrics.mean_l1_after
    );
    outcome(&metrics, summary)
}

// ---------------------------------------------------------------- apps

#[derive(Serialize)]
struct CountMetrics {
    detections: usize,
    evaluation: Option<cellwarp::pipeline::CountingEval>,
}

pub fn count_cmd(cfg: &Resolved, run: &mut RunDir) -> Result<Outcome> {
    let mut bank = load_bank_input(cfg, run)?;
    let encoder = load_encoder_input(cfg, run)?;
    check_patch_sizes(&bank, cfg)?;
    embed_bank(&encoder, &mut bank)?;
    let (image, scene) = load_or_build_image(cfg, run)?;
    let truth: Option<Vec<[f64; 2]>> = match (&cfg.data.centroids, &scene) {
        (Some(path), _) => {
            run.record_input("centroids", path)?;
            Some(load_centroids_csv(path)?)
        }
        (None, Some(scene)) => Some(scene.centroids()),
        (None, None) => None,
    };
    let detections = scan_count(&image, &encoder, &bank, &cfg.pipeline)?;
    save_detections_csv(&run.artifact("detections.csv"), &detections)?;
    run.write_seeds(&[(streams::SCENE, stream_seed(cfg.root_seed(), streams::SCENE))])?;
    let evaluation =
        truth.map(|t| evaluate_detections(&detections, &t, cfg.pipeline.match_radius));
    let summary = match &evaluation {
        Some(e) => format!(
            "{} detections, F1 {:.3} (tp {}, fp {}, fn {})",
            detections.len(),
            e.f1,
            e.true_positives,
            e.false_positives,
            e.false_negatives
        ),
        None => format!("{} detections", detections.len()),
    };
    let metrics = CountMetrics { detections: detections.len(), evaluation };
    outcome(&metrics, summary)
}

#[derive(Serialize)]
struct OrientMetrics {
    queries: usize,
    mean_angle_error_deg: Option<f64>,
    baseline_angle_error_deg: Option<f64>,
}

pub fn orient_cmd(cfg: &Resolved, run: &mut RunDir) -> Result<Outcome> {
    let mut bank = load_bank_input(cfg, run)?;
    let encoder = load_encoder_input(cfg, run)?;
    let mapper = load_mapper_input(cfg, run)?;
    if bank.augmented.is_empty() {
        return Err(Error::Config(
            "the bank has no augmented records; run `augment` first".to_string(),
        ));
    }
    embed_bank(&encoder, &mut bank)?;
    let n = cfg.data.patch_size;

    let mut queries: Vec<CellPatch<f32>> = Vec::new();
    let mut truth: Vec<Option<f64>> = Vec::new();
    match (&cfg.data.image, &cfg.data.centroids) {
        (Some(image_path), Some(centroid_path)) => {
            run.record_input("image", image_path)?;
            run.record_input("centroids", centroid_path)?;
            let image = WholeImage::<f32>::load(image_path)?;
            for c in load_centroids_csv(centroid_path)? {
                queries.push(extract_patch(&image, [c[0] as i64, c[1] as i64], n)?);
                truth.push(None);
            }
        }
        _ => {
            let qseed = stream_seed(cfg.root_seed(), streams::ORIENT_QUERIES);
            let policy = augmentation_label_policy();
            for (j, entry) in bank.entries.iter().enumerate() {
                for q in 0..cfg.data.queries {
                    let mut rng = substream(qseed, &format!("{j}/{q}"));
                    let spec = sample_diffeo(&cfg.augmentation, &mut rng)?;
                    let field = make_warp::<f32>(&spec, n, n)?;
                    queries.push(apply_warp_patch(
                        &field,
                        &entry.patch,
                        &InterpPolicy::for_images(),
                    )?);
                    let warped_labels = apply_warp_labels(&field, &entry.labels, &policy)?;
                    truth.push(Some(circular_mean_angle(&warped_labels)?));
                }
            }
        }
    }
    if queries.is_empty() {
        return Err(Error::Config("no queries: centroid list is empty".to_string()));
    }
    let predictions =
        cellwarp::pipeline::predict_orientation(&queries, &encoder, &mapper, &bank)?;

    let mut csv =
        String::from("query,predicted_deg,baseline_deg,true_deg,entry,record\n");
    for (i, p) in predictions.iter().enumerate() {
        let true_field = truth[i].map(|t| format!("{}", t.to_degrees())).unwrap_or_default();
        csv.push_str(&format!(
            "{i},{},{},{true_field},{},{}\n",
            p.angle.to_degrees(),
            p.baseline_angle.to_degrees(),
            p.entry_index,
            p.record_index
        ));
    }
    std::fs::write(run.artifact("orientations.csv"), csv)?;
    run.write_seeds(&[(
        streams::ORIENT_QUERIES,
        stream_seed(cfg.root_seed(), streams::ORIENT_QUERIES),
    )])?;

    let labeled: Vec<(f64, f64, f64)> = predictions
        .iter()
        .zip(&truth)
        .filter_map(|(p, t)| t.map(|t| (p.angle, p.baseline_angle, t)))
        .collect();
    let (mean_err, baseline_err) = if labeled.is_empty() {
        (None, None)
    } else {
        let angles: Vec<f64> = labeled.iter().map(|(a, _, _)| *a).collect();
        let baselines: Vec<f64> = labeled.iter().map(|(_, b, _)| *b).collect();
        let truths: Vec<f64> = labeled.iter().map(|(_, _, t)| *t).collect();
        (
            Some(mean_angle_error_deg(&angles, &truths)?),
            Some(mean_angle_error_deg(&baselines, &truths)?),
        )
    };
    let metrics = OrientMetrics {
        queries: queries.len(),
        mean_angle_error_deg: mean_err,
        baseline_angle_error_deg: baseline_err,
    };
    let summary = match mean_err {
        Some(e) => format!(
            "{} queries, mean angular error {e:.2} deg (copy baseline {:.2})",
            queries.len(),
            baseline_err.unwrap_or(f64::NAN)
        ),
        None => format!("{} queries oriented", queries.len()),
    };
    outcome(&metrics, summary)
}

#[derive(Serialize)]
struct SegmentMetrics {
    detections: usize,
    mean_instance_dice: Option<f64>,
}

pub fn segment_cmd(cfg: &Resolved, run: &mut RunDir) -> Result<Outcome> {
    let mut bank = load_bank_input(cfg, run)?;
    let encoder = load_encoder_input(cfg, run)?;
    let mapper = load_mapper_input(cfg, run)?;
    check_patch_sizes(&bank, cfg)?;
    embed_bank(&encoder, &mut bank)?;
    let (image, scene) = load_or_build_image(cfg, run)?;
    let provided = match &cfg.data.detections {
        Some(path) => {
            run.record_input("detections", path)?;
            Some(load_detections_csv(path)?)
        }
        None => None,
    };
    let result = segment_few_shot(&image, &encoder, &mapper, &bank, &cfg.pipeline, provided)?;
    save_instances_png(&run.artifact("instances.png"), &result.instances)?;
    save_detections_csv(&run.artifact("detections.csv"), &result.detections)?;
    run.write_seeds(&[(streams::SCENE, stream_seed(cfg.root_seed(), streams::SCENE))])?;
    let mean_dice = match &scene {
        Some(scene) => Some(mean_instance_dice(&result.instances, &scene.truth)?),
        None => None,
    };
    let metrics =
        SegmentMetrics { detections: result.detections.len(), mean_instance_dice: mean_dice };
    let summary = match mean_dice {
        Some(d) => format!("{} instances, mean DSC {d:.3}", result.detections.len()),
        None => format!("{} instances", result.detections.len()),
    };
    outcome(&metrics, summary)
}

// --------------------------------------------------------------- bench

#[derive(Serialize)]
struct BenchMetrics {
    rows: Vec<BenchmarkRow>,
}

/// Per-pair warp-prediction scores for one registration method.
struct BenchSamples {
    ncc_field: Vec<f64>,
    l1_field: Vec<f64>,
    l1_image: Vec<f64>,
    dice: Vec<f64>,
    iou: Vec<f64>,
}

impl BenchSamples {
    fn new() -> Self {
        BenchSamples {
            ncc_field: Vec::new(),
            l1_field: Vec::new(),
            l1_image: Vec::new(),
            dice: Vec::new(),
            iou: Vec::new(),
        }
    }

    fn rows(&self, architecture: &str) -> Vec<BenchmarkRow> {
        vec![
            summarize(architecture, "ncc_field", &self.ncc_field),
            summarize(architecture, "l1_field", &self.l1_field),
            summarize(architecture, "l1_image", &self.l1_image),
            summarize(architecture, "dice", &self.dice),
            summarize(architecture, "iou", &self.iou),
        ]
    }
}

/// Benchmarks warp prediction on synthetic pairs: an identity baseline,
/// the direct-optimization reference, and the learned mapper when a
/// checkpoint is configured. Rows mirror report.json and report.csv.
pub fn synth_bench(cfg: &Resolved, run: &mut RunDir) -> Result<Outcome> {
    let mapper = match &cfg.data.mapper {
        Some(path) => {
            run.record_input("mapper", path)?;
            Some(load_mapper::<f32>(path)?)
        }
        None => None,
    };
    let specs = archetype_specs(cfg)?;
    let n = cfg.data.patch_size;
    let pair_seed = stream_seed(cfg.root_seed(), streams::PAIRS);
    let policy = augmentation_label_policy();
    let count = cfg.data.pairs.max(1);

    let mut identity = BenchSamples::new();
    let mut oracle = BenchSamples::new();
    let mut learned = BenchSamples::new();
    for i in 0..count {
        let spec = &specs[i % specs.len()];
        let mut rng = substream(pair_seed, &i.to_string());
        let diffeo = sample_diffeo(&cfg.augmentation, &mut rng)?;
        let pair = gen_pair::<f32>(spec, &diffeo, n, derive(pair_seed, &format!("shape/{i}")))?;
        let fixed_mask = &mask_of(&pair.fixed_labels, "pair")?.data;
        let moving_mask = &mask_of(&pair.moving_labels, "pair")?.data;

        let zero = WarpField::<f32>::zeros(n, n);
        identity.ncc_field.push(ncc_field(&zero, &pair.gt_inverse)?);
        identity.l1_field.push(l1_field(&zero, &pair.gt_inverse)?);
        identity.l1_image.push(l1_image(&pair.moving.intensities, &pair.fixed.intensities)?);
        identity.dice.push(dice(fixed_mask, moving_mask)?);
        identity.iou.push(iou(fixed_mask, moving_mask)?);

        let score = |samples: &mut BenchSamples,
                         result: &RegistrationResult<f32>|
         -> Result<()> {
            samples.ncc_field.push(ncc_field(&result.forward, &pair.gt_inverse)?);
            samples.l1_field.push(l1_field(&result.forward, &pair.gt_inverse)?);
            let moved =
                apply_warp_patch(&result.forward, &pair.moving, &InterpPolicy::for_images())?;
            samples.l1_image.push(l1_image(&moved.intensities, &pair.fixed.intensities)?);
            let transferred = transfer_label(result, &pair.fixed_labels, &policy)?;
            let t_mask = &mask_of(&transferred, "transfer")?.data;
            samples.dice.push(dice(t_mask, moving_mask)?);
            samples.iou.push(iou(t_mask, moving_mask)?);
            Ok(())
        };
        let oracle_result = oracle_register(
            &pair.fixed,
            &pair.moving,
            cfg.data.oracle_smoothness,
            cfg.data.oracle_iterations,
        )?;
        score(&mut oracle, &oracle_result)?;
        if let Some(model) = &mapper {
            let result = register(model, &pair.fixed, &pair.moving)?;
            score(&mut learned, &result)?;
        }
    }
    run.write_seeds(&[(streams::PAIRS, pair_seed)])?;

    let mut rows = identity.rows("identity");
    rows.extend(oracle.rows("oracle"));
    if let Some(model) = &mapper {
        let kind = serde_json::to_value(model.kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_else(|| "unknown".to_string());
        rows.extend(learned.rows(&format!("learned-{kind}")));
    }
    write_report_json(&run.artifact("report.json"), &rows)?;
    write_report_csv(&run.artifact("report.csv"), &rows)?;
    let architectures = rows.len() / 5;
    let metrics = BenchMetrics { rows };
    let summary = format!("{count} pairs, {architectures} architectures benchmarked");
    outcome(&metrics, summary)
}

pub fn verify_theory(cfg: &Resolved, run: &mut RunDir) -> Result<Outcome> {
    let bank = load_bank_input(cfg, run)?;
    let encoder = load_encoder_input(cfg, run)?;
    let report = verify_bound(&encoder, &bank, &cfg.augmentation, &cfg.theory)?;
    write_bound_report(&run.artifact("bound_report.json"), &report)?;
    run.write_seeds(&[(streams::THEORY, cfg.theory.seed)])?;
    let summary = format!(
        "epsilon* {:.4} at m={}, bound holds {:.1}%",
        report.epsilon_star,
        cfg.theory.densities.last().copied().unwrap_or(0),
        100.0 * report.holds_fraction
    );
    let metrics = serde_json::to_value(&report)
        .map_err(|e| Error::Format(format!("cannot encode report: {e}")))?;
    Ok(Outcome { metrics, summary })
}

fn check_patch_sizes(bank: &CellBank<f32>, cfg: &Resolved) -> Result<()> {
    if let Some(bank_size) = bank.patch_size() {
        if bank_size != cfg.pipeline.patch_size {
            return Err(Error::Config(format!(
                "bank patches are {bank_size} px but pipeline.patch_size is {}",
                cfg.pipeline.patch_size
            )));
        }
    }
    Ok(())
}
