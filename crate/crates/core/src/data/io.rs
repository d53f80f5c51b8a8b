//! Dataset directory format.
//!
//! ```text
//! manifest.json   num_nodes, num_relations, feature_dim, relation_names, files
//! features.bin    n × k little-endian f32, row-major
//! labels.csv      node_id,label
//! edges_<r>.csv   src,dst with src < dst, one undirected edge per line
//! ```
//!
//! The CSV files start with a header line; readers skip a first line whose
//! fields are not integers.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::MultiRelationGraph;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFiles {
    pub features: String,
    pub labels: String,
    pub edges: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_nodes: usize,
    pub num_relations: usize,
    pub feature_dim: usize,
    pub relation_names: Vec<String>,
    pub files: DatasetFiles,
}

/// A loaded graph with its manifest and per-file SHA-256 digests.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: MultiRelationGraph,
    pub manifest: DatasetManifest,
    pub checksums: BTreeMap<String, String>,
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn default_names(r: usize) -> Vec<String> {
    (0..r).map(|i| format!("r{i}")).collect()
}

/// Writes `graph` to `dir`, creating it if needed. Features are stored as f32.
pub fn save_dataset(
    graph: &MultiRelationGraph,
    dir: &Path,
    relation_names: Option<&[String]>,
) -> Result<DatasetManifest> {
    let r = graph.num_relations();
    let names = match relation_names {
        Some(n) if n.len() == r => n.to_vec(),
        Some(n) => return Err(Error::Mismatch(format!("{} relation names for {r} relations", n.len()))),
        None => default_names(r),
    };
    fs::create_dir_all(dir)?;
    let edges: Vec<String> = names
        .iter()
        .enumerate()
        .map(|(i, n)| format!("edges_{i}_{}.csv", sanitize(n)))
        .collect();
    let manifest = DatasetManifest {
        num_nodes: graph.num_nodes(),
        num_relations: r,
        feature_dim: graph.feature_dim(),
        relation_names: names,
        files: DatasetFiles {
            features: "features.bin".into(),
            labels: "labels.csv".into(),
            edges,
        },
    };

    let mut f = BufWriter::new(fs::File::create(dir.join(&manifest.files.features))?);
    for &v in graph.features() {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    f.flush()?;

    let mut f = BufWriter::new(fs::File::create(dir.join(&manifest.files.labels))?);
    writeln!(f, "node_id,label")?;
    for (i, y) in graph.labels().iter().enumerate() {
        writeln!(f, "{i},{y}")?;
    }
    f.flush()?;

    for (rel, file) in manifest.files.edges.iter().enumerate() {
        let mut f = BufWriter::new(fs::File::create(dir.join(file))?);
        writeln!(f, "src,dst")?;
        for (a, b) in graph.relation(rel)?.edges() {
            writeln!(f, "{a},{b}")?;
        }
        f.flush()?;
    }

    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Rows of comma-separated unsigned integers, skipping blank lines and a
/// non-numeric header.
fn read_int_rows(path: &Path, width: usize) -> Result<Vec<Vec<usize>>> {
    let reader = BufReader::new(open(path)?);
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<usize>, _> = fields.iter().map(|f| f.parse::<usize>()).collect();
        match parsed {
            Ok(v) if v.len() == width => rows.push(v),
            Err(_) if lineno == 0 => continue,
            _ => {
                return Err(Error::Malformed(format!(
                    "{}:{}: expected {width} integer fields, got {line:?}",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(rows)
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<u8>> {
    let mut labels = vec![None; n];
    for row in read_int_rows(path, 2)? {
        let (i, y) = (row[0], row[1]);
        if i >= n {
            return Err(Error::out_of_range("label node", i, n));
        }
        if y > 1 {
            return Err(Error::Malformed(format!("label {y} for node {i}")));
        }
        if labels[i].replace(y as u8).is_some() {
            return Err(Error::Malformed(format!("node {i} labeled twice")));
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, y)| y.ok_or_else(|| Error::Mismatch(format!("label row count mismatch: node {i} has no label"))))
        .collect()
}

fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    Ok(read_int_rows(path, 2)?.into_iter().map(|r| (r[0], r[1])).collect())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", dir.join(MANIFEST_FILE).display()),
        ))
    })?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    if m.relation_names.len() != m.num_relations || m.files.edges.len() != m.num_relations {
        return Err(Error::Mismatch(format!(
            "manifest declares {} relations but lists {} names and {} edge files",
            m.num_relations,
            m.relation_names.len(),
            m.files.edges.len()
        )));
    }
    Ok(m)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let (n, k) = (manifest.num_nodes, manifest.feature_dim);
    let mut checksums = BTreeMap::new();
    let path_of = |f: &str| -> PathBuf { dir.join(f) };

    let feat_path = path_of(&manifest.files.features);
    let bytes = fs::read(&feat_path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", feat_path.display()))))?;
    if bytes.len() != 4 * n * k {
        return Err(Error::Mismatch(format!(
            "feature row count mismatch: {} bytes hold {} rows of {k} features, manifest declares {n}",
            bytes.len(),
            if k == 0 { 0 } else { bytes.len() / (4 * k) }
        )));
    }
    let features: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    checksums.insert(manifest.files.features.clone(), hex::encode(Sha256::digest(&bytes)));

    let labels_path = path_of(&manifest.files.labels);
    let labels = read_labels(&labels_path, n)?;
    checksums.insert(manifest.files.labels.clone(), sha256_file(&labels_path)?);

    let mut edges = Vec::with_capacity(manifest.num_relations);
    for file in &manifest.files.edges {
        let p = path_of(file);
        edges.push(read_edges(&p)?);
        checksums.insert(file.clone(), sha256_file(&p)?);
    }
    checksums.insert(MANIFEST_FILE.into(), sha256_file(&dir.join(MANIFEST_FILE))?);

    let graph = MultiRelationGraph::build(&edges, features, k, labels)?;
    Ok(Dataset {
        graph,
        manifest,
        checksums,
    })
}

/// Raw inputs for [`convert`]: a feature CSV with one row of `k` reals per
/// node (in node order), a `node_id,label` CSV, and one `src,dst` CSV per
/// relation. Edges may repeat, appear in both directions, or be self-loops.
#[derive(Debug, Clone)]
pub struct RawDump {
    pub features_csv: PathBuf,
    pub labels_csv: PathBuf,
    pub relations: Vec<(String, PathBuf)>,
}

fn read_feature_rows(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let reader = BufReader::new(open(path)?);
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let row = match parsed {
            Ok(v) => v,
            Err(_) if lineno == 0 => continue,
            Err(e) => return Err(Error::Malformed(format!("{}:{}: {e}", path.display(), lineno + 1))),
        };
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Malformed(format!(
                    "{}:{}: {} fields, expected {w}",
                    path.display(),
                    lineno + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    Ok((data, rows, width.unwrap_or(0)))
}

/// Builds a dataset directory from raw CSV dumps.
pub fn convert(raw: &RawDump, out: &Path) -> Result<DatasetManifest> {
    let (features, n, k) = read_feature_rows(&raw.features_csv)?;
    let labels = read_labels(&raw.labels_csv, n)?;
    let edges = raw
        .relations
        .iter()
        .map(|(_, p)| read_edges(p))
        .collect::<Result<Vec<_>>>()?;
    let graph = MultiRelationGraph::build(&edges, features, k, labels)?;
    let names: Vec<String> = raw.relations.iter().map(|(n, _)| n.clone()).collect();
    save_dataset(&graph, out, Some(&names))
}
