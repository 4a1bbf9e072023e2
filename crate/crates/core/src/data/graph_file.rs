use std::fs;
use std::path::Path;

use sfad_tensor::Tensor;

use crate::error::{Error, Result};

/// A fixed adjacency read from an edge list.
#[derive(Clone, Debug, PartialEq)]
pub struct PredefinedGraph {
    pub adjacency: Tensor<f64>,
    pub warnings: Vec<String>,
}

/// Reads `from,to[,weight]` rows (header optional, weight defaults to 1).
/// Self-loops are dropped with a warning; unless `directed`, each edge is
/// mirrored.
pub fn load_predefined_graph(path: &Path, nodes: usize, directed: bool) -> Result<PredefinedGraph> {
    let ingest = |row: usize, message: String| Error::Ingestion {
        file: path.to_path_buf(),
        location: format!("row {row}"),
        message,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut adj = vec![0.0; nodes * nodes];
    let mut warnings = Vec::new();
    let mut edges = 0usize;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| ingest(row, e.to_string()))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if i == 0 && record.get(0).is_some_and(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        if !(2..=3).contains(&record.len()) {
            return Err(ingest(row, format!("expected from,to[,weight], found {} fields", record.len())));
        }
        let id = |k: usize| -> Result<usize> {
            let cell = &record[k];
            let v: usize = cell.parse().map_err(|_| ingest(row, format!("bad node id `{cell}`")))?;
            if v >= nodes {
                return Err(ingest(row, format!("node id {v} out of range for {nodes} nodes")));
            }
            Ok(v)
        };
        let (from, to) = (id(0)?, id(1)?);
        let weight = match record.get(2) {
            Some(w) => w
                .parse::<f64>()
                .ok()
                .filter(|w| w.is_finite() && *w >= 0.0)
                .ok_or_else(|| ingest(row, format!("weight `{w}` is not a non-negative number")))?,
            None => 1.0,
        };
        if from == to {
            warnings.push(format!("row {row}: self-loop on node {from} dropped"));
            continue;
        }
        adj[from * nodes + to] = weight;
        if !directed {
            adj[to * nodes + from] = weight;
        }
        edges += 1;
    }
    if edges == 0 {
        warnings.push(format!("{} holds no edges; adjacency is all zeros", path.display()));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(PredefinedGraph { adjacency: Tensor::new(vec![nodes, nodes], adj)?, warnings })
}
