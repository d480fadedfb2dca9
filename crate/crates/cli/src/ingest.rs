//! Data-file ingestion: the unit-level CSV and the adjacency list.

use std::collections::BTreeMap;
use std::path::Path;

use inla_core::likelihood::ObservationRow;
use inla_core::model::Dataset;
use inla_core::priors::AdjacencyGraph;
use inla_core::{Error, Result};

/// Load and validate `unit_id,y,N,<covariate...>` rows plus the adjacency
/// file. Any malformed row aborts the run with its line number.
pub fn ingest(data_path: &Path, adjacency_path: &Path) -> Result<(Dataset, AdjacencyGraph)> {
    let adj_text = std::fs::read_to_string(adjacency_path)
        .map_err(|e| Error::Input(format!("cannot read adjacency file {}: {e}", adjacency_path.display())))?;
    let graph = AdjacencyGraph::parse(&adj_text)?;

    let text = std::fs::read_to_string(data_path)
        .map_err(|e| Error::Input(format!("cannot read data file {}: {e}", data_path.display())))?;
    let dataset = parse_dataset(&text, graph.n_units())?;
    Ok((dataset, graph))
}

pub fn parse_dataset(text: &str, n_units: usize) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Input("data file is empty".into()))?;
    let columns: Vec<&str> = header.split(',').map(|s| s.trim()).collect();
    if columns.len() < 3 || columns[0] != "unit_id" || columns[1] != "y" || columns[2] != "N" {
        return Err(Error::Input(format!(
            "data header must start with `unit_id,y,N`, got {header:?}"
        )));
    }
    let covariate_names: Vec<String> = columns[3..].iter().map(|s| s.to_string()).collect();

    let mut rows: Vec<ObservationRow> = Vec::new();
    let mut covariates: BTreeMap<String, Vec<String>> =
        covariate_names.iter().map(|n| (n.clone(), Vec::new())).collect();
    let mut seen = vec![false; n_units];
    for (lineno, line) in lines {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
        if fields.len() != columns.len() {
            return Err(Error::Input(format!(
                "line {line_no}: expected {} fields, got {}",
                columns.len(),
                fields.len()
            )));
        }
        let unit_id: usize = fields[0]
            .parse()
            .map_err(|_| Error::Input(format!("line {line_no}: bad unit_id {:?}", fields[0])))?;
        if unit_id >= n_units {
            return Err(Error::Input(format!(
                "line {line_no}: unit {unit_id} not in the adjacency graph (0..{})",
                n_units - 1
            )));
        }
        if seen[unit_id] {
            return Err(Error::Input(format!("line {line_no}: unit {unit_id} appears twice")));
        }
        seen[unit_id] = true;
        let y: u64 = fields[1]
            .parse()
            .map_err(|_| Error::Input(format!("line {line_no}: bad count y {:?}", fields[1])))?;
        let n: u64 = fields[2]
            .parse()
            .map_err(|_| Error::Input(format!("line {line_no}: bad population N {:?}", fields[2])))?;
        let row = ObservationRow::new(unit_id, y, n)
            .map_err(|e| Error::Input(format!("line {line_no}: {e}")))?;
        rows.push(row);
        for (name, value) in covariate_names.iter().zip(&fields[3..]) {
            covariates.get_mut(name).unwrap().push(value.to_string());
        }
    }
    if rows.is_empty() {
        return Err(Error::Input("data file has no observation rows".into()));
    }
    Ok(Dataset { rows, covariates })
}
