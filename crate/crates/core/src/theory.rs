//! Empirical checks of the sampling-density story: how finely the
//! deformation group must be sampled for latent matching to stay
//! accurate.
//!
//! Three pieces: a covering radius for a finite set of deformation specs
//! under a declared parameter-space metric, Lipschitz estimates for an
//! encoder (both reported as lower bounds on the true constant), and a
//! bound-verification experiment that densifies the bank, matches fresh
//! deformed queries, and checks the latent error against
//! `L * eps * ||s|| + c * ||residual||^2` with a fitted scalar `c`.

use ndarray::{Array1, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{build_augmented_bank, CellBank};
use crate::error::{Error, Result};
use crate::invariant::{embed_bank, match_patch, EncoderModel};
use crate::num::{cast, Scalar};
use crate::rng::{derive, substream};
use crate::warp::{
    apply_warp_patch, make_warp, sample_diffeo, AugmentationConfig, DiffeoKind, DiffeoKindTag,
    DiffeoSpec, InterpPolicy,
};

/// Grid density for [`sample_reference_domain`]: points per parameter
/// dimension, with a cap on the total sample count.
pub const REFERENCE_POINTS_PER_DIM: usize = 32;
pub const REFERENCE_SAMPLE_CAP: usize = 100_000;

/// A finite subset of the deformation group, with the metric it should
/// be measured under.
#[derive(Clone, Debug)]
pub struct GroupSample {
    pub specs: Vec<DiffeoSpec>,
    pub metric: SpecMetric,
}

/// Parameter-space distance between deformation specs.
///
/// Same-kind distance is the Euclidean norm of per-parameter terms, each
/// normalized to its legal range: rotation angles live on the circle
/// (shortest arc, divided by pi), stretch factors and lengths divide by
/// the scales below, directions compare as axes (a direction and its
/// negation are the same stretch axis, so the angle between them is at
/// most pi/2), and center offsets divide by `center_scale`. Specs of
/// distinct kinds are a flat 1 apart.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SpecMetric {
    /// Divisor for center offsets, typically the patch size.
    pub center_scale: f64,
    /// Divisor for stretch-factor differences.
    pub stretch_scale: f64,
    /// Divisor for region radii and blend widths, typically the patch size.
    pub length_scale: f64,
}

impl SpecMetric {
    pub fn for_patch(patch_size: usize) -> Self {
        SpecMetric {
            center_scale: patch_size as f64,
            stretch_scale: 1.0,
            length_scale: patch_size as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("center_scale", self.center_scale),
            ("stretch_scale", self.stretch_scale),
            ("length_scale", self.length_scale),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Distance between two specs; symmetric, zero iff parameters match.
    pub fn distance(&self, a: &DiffeoSpec, b: &DiffeoSpec) -> f64 {
        let dx = a.center[0] - b.center[0];
        let dy = a.center[1] - b.center[1];
        let mut terms: Vec<f64> = vec![(dx * dx + dy * dy).sqrt() / self.center_scale];
        match (&a.kind, &b.kind) {
            (DiffeoKind::Rotation { angle: ta }, DiffeoKind::Rotation { angle: tb }) => {
                terms.push(circular_distance(*ta, *tb) / std::f64::consts::PI);
            }
            (
                DiffeoKind::UniformStretch { factor: fa },
                DiffeoKind::UniformStretch { factor: fb },
            ) => {
                terms.push((fa - fb).abs() / self.stretch_scale);
            }
            (
                DiffeoKind::DirectionalStretch { factor: fa, direction: da },
                DiffeoKind::DirectionalStretch { factor: fb, direction: db },
            )
            | (
                DiffeoKind::VolumePreservingStretch { factor: fa, direction: da },
                DiffeoKind::VolumePreservingStretch { factor: fb, direction: db },
            ) => {
                terms.push((fa - fb).abs() / self.stretch_scale);
                terms.push(axis_angle(da, db) / std::f64::consts::FRAC_PI_2);
            }
            (
                DiffeoKind::PartialStretch { factor: fa, region_radius: ra, blend_width: ba },
                DiffeoKind::PartialStretch { factor: fb, region_radius: rb, blend_width: bb },
            ) => {
                terms.push((fa - fb).abs() / self.stretch_scale);
                terms.push((ra - rb).abs() / self.length_scale);
                terms.push((ba - bb).abs() / self.length_scale);
            }
            _ => return 1.0,
        }
        terms.iter().map(|t| t * t).sum::<f64>().sqrt()
    }
}

/// Shortest angular distance on the circle, in [0, pi].
fn circular_distance(a: f64, b: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let d = (a - b).rem_euclid(tau);
    d.min(tau - d)
}

/// Angle between two stretch axes in [0, pi/2]; v and -v are one axis.
fn axis_angle(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    let cos = ((a[0] * b[0] + a[1] * b[1]) / (na * nb)).abs().clamp(0.0, 1.0);
    cos.acos()
}

/// Covering radius of `candidates` over `reference`: the farthest any
/// reference spec sits from its nearest candidate.
pub fn covering_radius(candidates: &GroupSample, reference: &GroupSample) -> Result<f64> {
    candidates.metric.validate()?;
    if candidates.specs.is_empty() {
        return Err(Error::argument("covering radius needs at least one candidate".to_string()));
    }
    if reference.specs.is_empty() {
        return Err(Error::argument("covering radius needs reference points".to_string()));
    }
    let metric = candidates.metric;
    let radius = reference
        .specs
        .par_iter()
        .map(|r| {
            candidates
                .specs
                .iter()
                .map(|c| metric.distance(r, c))
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| 0.0, f64::max);
    Ok(radius)
}

fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points <= 1 || hi <= lo {
        return vec![lo];
    }
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

/// Densely samples the legal parameter box of `config` on a grid:
/// [`REFERENCE_POINTS_PER_DIM`] points per parameter dimension, halving
/// the density until the total fits [`REFERENCE_SAMPLE_CAP`]. All specs
/// share the config's center; partial-stretch blend widths derive from
/// the region radius exactly as sampling does.
pub fn sample_reference_domain(
    config: &AugmentationConfig,
    patch_size: usize,
) -> Result<GroupSample> {
    config.validate()?;
    let center = config.center;
    let mut per_dim = REFERENCE_POINTS_PER_DIM;
    loop {
        let mut specs: Vec<DiffeoSpec> = Vec::new();
        for kw in &config.kinds {
            if kw.weight <= 0.0 {
                continue;
            }
            let [r0, r1] = config.rotation_range;
            let [s0, s1] = config.stretch_range;
            let [g0, g1] = config.region_radius_range;
            match kw.kind {
                DiffeoKindTag::Rotation => {
                    for angle in linspace(r0, r1, per_dim) {
                        specs.push(DiffeoSpec { kind: DiffeoKind::Rotation { angle }, center });
                    }
                }
                DiffeoKindTag::UniformStretch => {
                    for factor in linspace(s0, s1, per_dim) {
                        specs.push(DiffeoSpec {
                            kind: DiffeoKind::UniformStretch { factor },
                            center,
                        });
                    }
                }
                DiffeoKindTag::DirectionalStretch | DiffeoKindTag::VolumePreservingStretch => {
                    for factor in linspace(s0, s1, per_dim) {
                        for angle in linspace(0.0, std::f64::consts::PI, per_dim) {
                            let direction = [angle.cos(), angle.sin()];
                            let kind = if kw.kind == DiffeoKindTag::DirectionalStretch {
                                DiffeoKind::DirectionalStretch { factor, direction }
                            } else {
                                DiffeoKind::VolumePreservingStretch { factor, direction }
                            };
                            specs.push(DiffeoSpec { kind, center });
                        }
                    }
                }
                DiffeoKindTag::PartialStretch => {
                    for factor in linspace(s0, s1, per_dim) {
                        for region_radius in linspace(g0, g1, per_dim) {
                            specs.push(DiffeoSpec {
                                kind: DiffeoKind::PartialStretch {
                                    factor,
                                    region_radius,
                                    blend_width: config.blend_width_factor * region_radius,
                                },
                                center,
                            });
                        }
                    }
                }
            }
        }
        if specs.len() <= REFERENCE_SAMPLE_CAP || per_dim <= 2 {
            return Ok(GroupSample { specs, metric: SpecMetric::for_patch(patch_size) });
        }
        per_dim /= 2;
    }
}

/// How [`lipschitz_estimate`] probes the map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LipschitzMode {
    /// max ||f(a) - f(b)|| / ||a - b|| over all probe pairs.
    PairwiseRatio,
    /// max input-Jacobian spectral norm over probes, by power iteration.
    JacobianPowerIteration,
}

/// Anything that maps an image to a latent vector and can pull a latent
/// gradient back to the input.
pub trait LatentMap<S: Scalar> {
    fn apply(&self, x: &Array3<S>) -> Result<Array1<S>>;
    /// Jacobian-transpose times `u` at `x`.
    fn vjp(&self, x: &Array3<S>, u: &Array1<S>) -> Result<Array3<S>>;
}

impl<S: Scalar> LatentMap<S> for EncoderModel<S> {
    fn apply(&self, x: &Array3<S>) -> Result<Array1<S>> {
        self.encode(x)
    }

    fn vjp(&self, x: &Array3<S>, u: &Array1<S>) -> Result<Array3<S>> {
        self.encode_vjp(x, u)
    }
}

const POWER_ITERATIONS: usize = 40;
const JVP_STEP: f64 = 1e-4;

fn l2<S: Scalar>(x: &Array1<S>) -> f64 {
    x.iter().map(|v| v.to_f64().unwrap_or(0.0).powi(2)).sum::<f64>().sqrt()
}

fn l2_image<S: Scalar>(x: &Array3<S>) -> f64 {
    x.iter().map(|v| v.to_f64().unwrap_or(0.0).powi(2)).sum::<f64>().sqrt()
}

/// Directional derivative of `map` at `x` along `v`, by central
/// differences.
fn jvp<S: Scalar, M: LatentMap<S>>(map: &M, x: &Array3<S>, v: &Array3<S>) -> Result<Array1<S>> {
    let h = cast::<S>(JVP_STEP);
    let plus = map.apply(&(x + &v.mapv(|e| e * h)))?;
    let minus = map.apply(&(x - &v.mapv(|e| e * h)))?;
    Ok((&plus - &minus).mapv(|e| e / (cast::<S>(2.0) * h)))
}

/// Largest singular value of the Jacobian at `x`, by power iteration on
/// J^T J with finite-difference forward products and exact pull-backs.
fn jacobian_spectral_norm<S: Scalar, M: LatentMap<S>>(map: &M, x: &Array3<S>) -> Result<f64> {
    let mut rng = substream(0x4a63, "power-iteration");
    let mut v = Array3::<S>::from_shape_fn(x.dim(), |_| {
        cast::<S>(rand::Rng::gen_range(&mut rng, -1.0..1.0))
    });
    let norm = l2_image(&v);
    if norm < 1e-12 {
        return Ok(0.0);
    }
    v.mapv_inplace(|e| e / cast::<S>(norm));
    let mut sigma = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let jv = jvp(map, x, &v)?;
        sigma = l2(&jv);
        if sigma < 1e-12 {
            return Ok(0.0);
        }
        let w = map.vjp(x, &jv)?;
        let wn = l2_image(&w);
        if wn < 1e-12 {
            return Ok(sigma);
        }
        v = w.mapv(|e| e / cast::<S>(wn));
    }
    Ok(sigma)
}

/// Lower-bound estimate of the Lipschitz constant of `map` over the
/// probe set. Coincident probe pairs are skipped with a warning.
pub fn lipschitz_estimate<S: Scalar, M: LatentMap<S>>(
    map: &M,
    probes: &[Array3<S>],
    mode: LipschitzMode,
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::argument("lipschitz estimate needs probes".to_string()));
    }
    match mode {
        LipschitzMode::PairwiseRatio => {
            if probes.len() < 2 {
                return Err(Error::argument("pairwise mode needs at least two probes".to_string()));
            }
            let latents: Vec<Array1<S>> =
                probes.iter().map(|p| map.apply(p)).collect::<Result<_>>()?;
            let mut best = f64::NEG_INFINITY;
            let mut used = 0usize;
            for i in 0..probes.len() {
                for j in i + 1..probes.len() {
                    let dx = l2_image(&(&probes[i] - &probes[j]));
                    if dx < 1e-12 {
                        log::warn!("skipping coincident probe pair ({i}, {j})");
                        continue;
                    }
                    let dz = l2(&(&latents[i] - &latents[j]));
                    best = best.max(dz / dx);
                    used += 1;
                }
            }
            if used == 0 {
                return Err(Error::argument("all probe pairs coincident".to_string()));
            }
            Ok(best)
        }
        LipschitzMode::JacobianPowerIteration => {
            let mut best: f64 = 0.0;
            for p in probes {
                best = best.max(jacobian_spectral_norm(map, p)?);
            }
            Ok(best)
        }
    }
}

/// Hyperparameters for [`verify_bound`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    /// Augmentations per entry for each densification step.
    pub densities: Vec<usize>,
    pub queries_per_entry: usize,
    /// Fraction of each entry's queries used to fit the quadratic-term
    /// constant; the rest validate it.
    pub calibration_fraction: f64,
    pub seed: u64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            densities: vec![2, 4, 8, 16],
            queries_per_entry: 8,
            calibration_fraction: 0.5,
            seed: 0,
        }
    }
}

impl BoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.densities.is_empty() {
            return Err(Error::Config("densities must be non-empty".to_string()));
        }
        if self.densities[0] == 0 || self.densities.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "densities must be positive and strictly increasing".to_string(),
            ));
        }
        if self.queries_per_entry == 0 {
            return Err(Error::Config("queries_per_entry must be >= 1".to_string()));
        }
        if !(self.calibration_fraction > 0.0 && self.calibration_fraction < 1.0) {
            return Err(Error::Config(format!(
                "calibration fraction {} outside (0, 1)",
                self.calibration_fraction
            )));
        }
        Ok(())
    }
}

/// One densification step of the bound experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerMReport {
    pub m: usize,
    /// Worst per-entry covering radius at this density.
    pub epsilon_star: f64,
    pub median_error: f64,
    /// Fraction of validation queries whose latent error stays under the
    /// fitted bound.
    pub holds_fraction: f64,
}

/// Outcome of the matching-error bound experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundReport {
    /// Covering radius at the densest setting.
    pub epsilon_star: f64,
    pub l_hat: f64,
    pub c_fit: f64,
    /// Overall validation fraction satisfying the fitted bound.
    pub holds_fraction: f64,
    pub per_m: Vec<PerMReport>,
    /// False when the encoder reports zero training epochs; the density
    /// trend is not expected to hold for random weights.
    pub trained: bool,
}

struct QueryRecord {
    m: usize,
    error: f64,
    linear_term: f64,
    residual_sq: f64,
    calibration: bool,
}

/// Runs the densification experiment: for each density `m`, rebuilds the
/// augmented bank, matches fresh deformed queries against it, and records
/// latent errors next to the linear term `l_hat * eps*(entry) * ||s||`. A
/// scalar `c` fitted on the calibration split absorbs the quadratic
/// residual term; the report carries per-density covering radii, median
/// errors, and the fraction of validation queries within the bound.
///
/// An untrained encoder only logs a warning; the report's `trained` flag
/// records it.
pub fn verify_bound<S: Scalar>(
    model: &EncoderModel<S>,
    bank: &CellBank<S>,
    augmentation: &AugmentationConfig,
    config: &BoundConfig,
) -> Result<BoundReport> {
    config.validate()?;
    bank.validate()?;
    if bank.entries.is_empty() {
        return Err(Error::argument("bound experiment needs a non-empty bank".to_string()));
    }
    let trained = model.fingerprint.epochs > 0;
    if !trained {
        log::warn!("bound experiment on an untrained encoder; density trend may not hold");
    }
    let n = bank.patch_size().expect("non-empty bank");
    let reference = sample_reference_domain(augmentation, n)?;
    let metric = reference.metric;

    // Lipschitz estimate over the entry patches, both modes, larger wins.
    let probes: Vec<Array3<S>> = bank.entries.iter().map(|e| e.patch.to_gray_chw()).collect();
    let pairwise = if probes.len() >= 2 {
        lipschitz_estimate(model, &probes, LipschitzMode::PairwiseRatio)?
    } else {
        0.0
    };
    let jacobian = lipschitz_estimate(model, &probes, LipschitzMode::JacobianPowerIteration)?;
    let l_hat = pairwise.max(jacobian);

    let policy = InterpPolicy::for_images();
    let query_root = derive(config.seed, "bound-queries");
    let calibration_count =
        ((config.queries_per_entry as f64) * config.calibration_fraction).ceil() as usize;
    let mut records: Vec<QueryRecord> = Vec::new();
    let mut per_m_radius: Vec<(usize, f64)> = Vec::new();
    for &m in &config.densities {
        let mut dense = build_augmented_bank(bank, m, augmentation, config.seed)?;
        embed_bank(model, &mut dense)?;
        let entry_radius: Vec<f64> = (0..dense.entries.len())
            .map(|j| {
                let specs: Vec<DiffeoSpec> = dense
                    .augmented
                    .iter()
                    .filter(|r| r.entry_index == j)
                    .map(|r| r.spec.clone())
                    .collect();
                covering_radius(&GroupSample { specs, metric }, &reference)
            })
            .collect::<Result<_>>()?;
        let eps_worst = entry_radius.iter().cloned().fold(0.0, f64::max);
        per_m_radius.push((m, eps_worst));

        let slots: Vec<(usize, usize)> = (0..dense.entries.len())
            .flat_map(|j| (0..config.queries_per_entry).map(move |q| (j, q)))
            .collect();
        let batch: Vec<QueryRecord> = slots
            .par_iter()
            .map(|&(j, q)| -> Result<QueryRecord> {
                let mut rng = substream(query_root, &format!("{m}/{j}/{q}"));
                let spec = sample_diffeo(augmentation, &mut rng)?;
                let field = make_warp::<S>(&spec, n, n)?;
                let query = apply_warp_patch(&field, &dense.entries[j].patch, &policy)?;
                let outcome = match_patch(model, &query, &dense)?;
                let matched_entry = &dense.entries[outcome.entry_index];
                let matched_record = &dense.augmented[outcome.record_index];
                let s_norm = l2_image(&matched_entry.patch.to_gray_chw());
                let residual =
                    l2_image(&(&query.to_gray_chw() - &matched_record.patch.to_gray_chw()));
                Ok(QueryRecord {
                    m,
                    error: outcome.latent_distance,
                    linear_term: l_hat * entry_radius[outcome.entry_index] * s_norm,
                    residual_sq: residual * residual,
                    calibration: q < calibration_count,
                })
            })
            .collect::<Result<_>>()?;
        records.extend(batch);
    }

    // c = smallest constant making the bound hold on every calibration
    // query; validation measures how well that generalizes.
    let c_fit = records
        .iter()
        .filter(|r| r.calibration)
        .map(|r| ((r.error - r.linear_term) / r.residual_sq.max(1e-12)).max(0.0))
        .fold(0.0, f64::max);

    let holds = |r: &QueryRecord| r.error <= r.linear_term + c_fit * r.residual_sq + 1e-9;
    let mut per_m = Vec::new();
    for &(m, eps) in &per_m_radius {
        let mut errors: Vec<f64> = records.iter().filter(|r| r.m == m).map(|r| r.error).collect();
        errors.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
        let median = match errors.len() {
            0 => 0.0,
            len if len % 2 == 0 => (errors[len / 2 - 1] + errors[len / 2]) / 2.0,
            len => errors[len / 2],
        };
        let validation: Vec<&QueryRecord> =
            records.iter().filter(|r| r.m == m && !r.calibration).collect();
        let holds_fraction = if validation.is_empty() {
            1.0
        } else {
            validation.iter().filter(|r| holds(r)).count() as f64 / validation.len() as f64
        };
        per_m.push(PerMReport { m, epsilon_star: eps, median_error: median, holds_fraction });
    }

    let validation_all: Vec<&QueryRecord> = records.iter().filter(|r| !r.calibration).collect();
    let holds_fraction = if validation_all.is_empty() {
        1.0
    } else {
        validation_all.iter().filter(|r| holds(r)).count() as f64 / validation_all.len() as f64
    };
    Ok(BoundReport {
        epsilon_star: per_m.last().expect("non-empty densities").epsilon_star,
        l_hat,
        c_fit,
        holds_fraction,
        per_m,
        trained,
    })
}

/// Writes a [`BoundReport`] as pretty-printed JSON.
pub fn write_bound_report(path: &std::path::Path, report: &BoundReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::format(format!("cannot encode bound report: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Spearman rank correlation between two equal-length samples.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dimension(format!(
            "sample lengths differ: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::argument("spearman needs at least two points".to_string()));
    }
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).expect("finite values"));
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < order.len() {
            // Tied values share the mean of their positions.
            let mut j = i;
            while j + 1 < order.len() && vals[order[j + 1]] == vals[order[i]] {
                j += 1;
            }
            let mean = (i + j) as f64 / 2.0;
            for k in i..=j {
                ranks[order[k]] = mean;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let mx = rx.iter().sum::<f64>() / rx.len() as f64;
    let my = ry.iter().sum::<f64>() / ry.len() as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..rx.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx < 1e-12 || vy < 1e-12 {
        return Err(Error::argument("spearman undefined for constant ranks".to_string()));
    }
    Ok(cov / (vx * vy).sqrt())
}
