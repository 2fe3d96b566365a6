//! Latent-space ablation: the same data and training config for every
//! latent, reported as comparable metrics.

use serde::{Deserialize, Serialize};

use crate::data::{raster_rows, ImageSet};
use crate::error::Result;
use crate::tda::{bottleneck_l2, rips_ph_with, DistanceMatrix, PersistenceDiagram, RipsOptions};
use crate::vae::{latent_variance, reconstruct, train, Architecture, LatentSpec, TrainConfig, VaeModel};

/// Bottleneck distances between data and reconstruction diagrams over one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDistance {
    pub field: u32,
    /// One entry per dimension `0..=max_dim`.
    pub per_dim: Vec<f64>,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub latent: LatentSpec,
    pub initial_elbo: f64,
    pub final_elbo: f64,
    pub latent_var: f64,
    pub bottleneck: Vec<FieldDistance>,
    pub diverged: Option<String>,
}

/// Diagrams of two clouds over `fields`, cut at a shared threshold (the
/// larger enclosing radius) with surviving bars closed there, so the two
/// always have the same infinite-bar structure.
pub fn paired_diagrams(
    a: &DistanceMatrix,
    b: &DistanceMatrix,
    max_dim: usize,
    field: u32,
) -> Result<(PersistenceDiagram, PersistenceDiagram)> {
    let t = a.enclosing_radius().max(b.enclosing_radius());
    let opts = RipsOptions {
        threshold: Some(t),
        ..RipsOptions::new(max_dim, field)
    };
    Ok((
        rips_ph_with(a, opts)?.truncated(t),
        rips_ph_with(b, opts)?.truncated(t),
    ))
}

/// Trains one model per latent with `cfg` and compares the persistence of
/// `held` with that of its reconstruction over ℤ₂ and ℤ₃.
pub fn run_ablation(
    data: &ImageSet,
    held: &ImageSet,
    hidden: &[usize],
    cfg: &TrainConfig,
    latents: &[LatentSpec],
    max_dim: usize,
) -> Result<Vec<AblationRow>> {
    let truth = DistanceMatrix::from_points(&raster_rows(held.raster()))?;
    let dims: Vec<usize> = (0..=max_dim).collect();
    let mut rows = Vec::with_capacity(latents.len());
    for &latent in latents {
        let arch = Architecture::new(latent, data.pixels_per_image(), hidden.to_vec());
        let mut model = VaeModel::new(arch, cfg.kl_weight, cfg.seed)?;
        let report = train(&mut model, data, cfg, None)?;
        let rec = reconstruct(&model, held)?;
        let cloud = DistanceMatrix::from_points(&raster_rows(rec.raster()))?;
        let mut bottleneck = Vec::new();
        for field in [2, 3] {
            let (p, q) = paired_diagrams(&truth, &cloud, max_dim, field)?;
            let (l2, per_dim) = bottleneck_l2(&p, &q, &dims)?;
            bottleneck.push(FieldDistance { field, per_dim, l2 });
        }
        let first = report.log.first().map_or(f64::NAN, |l| l.elbo);
        let last = report.log.last().map_or(f64::NAN, |l| l.elbo);
        log::info!("ablation {latent}: elbo {first:.2} -> {last:.2}");
        rows.push(AblationRow {
            latent,
            initial_elbo: first,
            final_elbo: last,
            latent_var: latent_variance(&model, held)?,
            bottleneck,
            diverged: report.diverged,
        });
    }
    Ok(rows)
}
