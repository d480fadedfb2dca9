//! Named model presets for the recruitment-mapping workflow, one per row of
//! the comparison table plus the convolution variant.

use inla_core::model::{BinRule, ModelSpec, Term};
use inla_core::{Error, Result};

pub const PRESET_NAMES: [&str; 7] = [
    "icar-only",
    "convolution",
    "icar-dist",
    "icar-time",
    "icar-dist2",
    "icar-zone",
    "icar-density",
];

/// The six models of the comparison table, in table order.
pub const COMPARE_PRESETS: [&str; 6] = [
    "icar-only",
    "icar-dist",
    "icar-time",
    "icar-dist2",
    "icar-zone",
    "icar-density",
];

fn rw2(covariate: &str, bin: BinRule) -> Term {
    Term::SmoothRw2 { covariate: covariate.into(), bin }
}

pub fn preset(name: &str) -> Result<ModelSpec> {
    let (display, terms): (&str, Vec<Term>) = match name {
        "icar-only" => ("ICAR alone", vec![Term::Intercept, Term::SpatialIcar]),
        "convolution" => (
            "Convolution (ICAR and heterogeneity)",
            vec![Term::Intercept, Term::SpatialIcar, Term::IidUnit],
        ),
        "icar-dist" => (
            "ICAR and distance to provider",
            vec![
                Term::Intercept,
                rw2("distance", BinRule::FixedWidth { width: 5.0, origin: Some(0.0) }),
                Term::SpatialIcar,
            ],
        ),
        "icar-time" => (
            "ICAR and access time to provider",
            vec![
                Term::Intercept,
                rw2("access_time", BinRule::FixedWidth { width: 5.0, origin: Some(0.0) }),
                Term::SpatialIcar,
            ],
        ),
        "icar-dist2" => (
            "ICAR and distance to the second provider",
            vec![
                Term::Intercept,
                rw2("dist_second", BinRule::FixedWidth { width: 5.0, origin: Some(0.0) }),
                Term::SpatialIcar,
            ],
        ),
        "icar-zone" => (
            "ICAR and proximity zone (as factor)",
            vec![
                Term::Intercept,
                Term::ZoneFactor { covariate: "zone".into(), reference: "7".into(), random: false },
                Term::SpatialIcar,
            ],
        ),
        "icar-density" => (
            "ICAR and medical density",
            vec![Term::Intercept, rw2("density", BinRule::Quantile { k: 8 }), Term::SpatialIcar],
        ),
        other => {
            return Err(Error::Input(format!(
                "unknown preset {other:?}; available: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    ModelSpec::new(display, terms)
}

/// Covariates a preset reads from the dataset.
pub fn required_covariates(name: &str) -> Vec<&'static str> {
    match name {
        "icar-dist" => vec!["distance"],
        "icar-time" => vec!["access_time"],
        "icar-dist2" => vec!["dist_second"],
        "icar-zone" => vec!["zone"],
        "icar-density" => vec!["density"],
        _ => vec![],
    }
}
