//! Synthetic-region generators: lattice graphs, covariates with the shape of
//! the recruitment application (distances, access times, practitioner
//! density, proximity zones), known effects, and seeded binomial draws.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use inla_core::likelihood::expit;
use inla_core::model::Dataset;
use inla_core::oracle::{simulate_dataset, TrueEffects};
use inla_core::priors::AdjacencyGraph;
use inla_core::Result;

/// A generated fixture: data, graph, truth, and the effect pieces used.
pub struct SyntheticRegion {
    pub dataset: Dataset,
    pub graph: AdjacencyGraph,
    pub eta_true: Vec<f64>,
    pub pi_true: Vec<f64>,
    pub seed: u64,
    pub label: String,
}

/// Rectangular lattice with 4-neighbor adjacency.
pub fn lattice_graph(width: usize, height: usize) -> AdjacencyGraph {
    let mut edges = Vec::new();
    for r in 0..height {
        for c in 0..width {
            let u = r * width + c;
            if c + 1 < width {
                edges.push((u, u + 1));
            }
            if r + 1 < height {
                edges.push((u, u + width));
            }
        }
    }
    AdjacencyGraph::new(width * height, &edges).expect("lattice edges are valid")
}

fn unit_coords(width: usize, n: usize) -> Vec<(f64, f64)> {
    (0..n).map(|u| ((u % width) as f64, (u / width) as f64)).collect()
}

fn euclid(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// A 377-unit lattice region (29 x 13) mimicking the scale of a dense
/// municipality grid: one central provider, a second provider to the
/// north-west, seven proximity zones, and all covariates the presets read.
pub fn region_like(seed: u64) -> Result<SyntheticRegion> {
    build_region(29, 13, seed, "region-like")
}

/// A small square-ish lattice fixture with the same covariate layout.
pub fn units(k: usize, seed: u64) -> Result<SyntheticRegion> {
    let width = (k as f64).sqrt().ceil() as usize;
    let height = k.div_ceil(width);
    // trim the grid to exactly k units by rebuilding the graph on k nodes
    let full = lattice_graph(width, height);
    let mut edges = Vec::new();
    for u in 0..k {
        for &v in full.neighbors(u) {
            if v < k && v > u {
                edges.push((u, v));
            }
        }
    }
    let graph = AdjacencyGraph::new(k, &edges)?;
    build_region_on(graph, width, seed, &format!("units-{k}"))
}

fn build_region(width: usize, height: usize, seed: u64, label: &str) -> Result<SyntheticRegion> {
    build_region_on(lattice_graph(width, height), width, seed, label)
}

fn build_region_on(graph: AdjacencyGraph, width: usize, seed: u64, label: &str) -> Result<SyntheticRegion> {
    let n = graph.n_units();
    let coords = unit_coords(width, n);
    let height = coords.iter().map(|c| c.1 as usize).max().unwrap_or(0) + 1;
    let provider = (width as f64 * 0.5, height as f64 * 0.45);
    let second = (width as f64 * 0.15, height as f64 * 0.9);

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(2654435761).wrapping_add(17));
    let km_per_cell = 3.0;

    let mut distance = Vec::with_capacity(n);
    let mut access_time = Vec::with_capacity(n);
    let mut dist_second = Vec::with_capacity(n);
    let mut density = Vec::with_capacity(n);
    let mut populations = Vec::with_capacity(n);
    for u in 0..n {
        let d1 = euclid(coords[u], provider) * km_per_cell;
        let d2 = euclid(coords[u], second) * km_per_cell;
        distance.push(d1 + rng.gen_range(0.0..1.0));
        access_time.push(d1 * 1.2 + rng.gen_range(0.0..4.0));
        dist_second.push(d2 + rng.gen_range(0.0..1.0));
        density.push((0.4 + rng.gen_range(0.0f64..1.2)).max(0.05));
        let pop = (7.0 + 0.9 * rng.gen_range(-1.0..1.0f64)).exp();
        populations.push((pop as u64).max(60));
    }

    // seven proximity zones by nearest center; zone 7 holds the provider
    let zone_centers: Vec<(f64, f64)> = vec![
        (width as f64 * 0.1, height as f64 * 0.2),
        (width as f64 * 0.9, height as f64 * 0.15),
        (width as f64 * 0.25, height as f64 * 0.6),
        (width as f64 * 0.85, height as f64 * 0.7),
        (width as f64 * 0.55, height as f64 * 0.9),
        (width as f64 * 0.75, height as f64 * 0.35),
        provider,
    ];
    let zone: Vec<String> = (0..n)
        .map(|u| {
            let mut best = (f64::INFINITY, 0usize);
            for (z, c) in zone_centers.iter().enumerate() {
                let d = euclid(coords[u], *c);
                if d < best.0 {
                    best = (d, z);
                }
            }
            format!("{}", best.1 + 1)
        })
        .collect();

    // true effects: spatial bump south-east of the provider plus a smooth
    // decay in access time, both centered
    let bump = (width as f64 * 0.65, height as f64 * 0.35);
    let scale = width as f64 * 0.25;
    let mut spatial: Vec<f64> = (0..n)
        .map(|u| {
            let d = euclid(coords[u], bump);
            0.9 * (-0.5 * (d / scale).powi(2)).exp()
        })
        .collect();
    let mean_s = spatial.iter().sum::<f64>() / n as f64;
    for s in spatial.iter_mut() {
        *s -= mean_s;
    }
    let mut time_effect: Vec<f64> = access_time.iter().map(|t| 0.8 * (-t / 25.0).exp()).collect();
    let mean_t = time_effect.iter().sum::<f64>() / n as f64;
    for t in time_effect.iter_mut() {
        *t -= mean_t;
    }

    let effects = TrueEffects {
        intercept: -3.1,
        spatial: Some(spatial),
        unstructured: None,
        covariate_contributions: vec![("access_time".into(), time_effect)],
    };

    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<String>>();
    let mut covariates: BTreeMap<String, Vec<String>> = BTreeMap::new();
    covariates.insert("distance".into(), fmt(&distance));
    covariates.insert("access_time".into(), fmt(&access_time));
    covariates.insert("dist_second".into(), fmt(&dist_second));
    covariates.insert("density".into(), fmt(&density));
    covariates.insert("zone".into(), zone);

    let (dataset, eta_true) = simulate_dataset(&graph, &effects, &populations, covariates, seed)?;
    let pi_true = eta_true.iter().map(|&e| expit(e)).collect();
    Ok(SyntheticRegion { dataset, graph, eta_true, pi_true, seed, label: label.to_string() })
}
