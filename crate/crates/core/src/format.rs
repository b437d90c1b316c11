// SPDX-License-Identifier: Apache-2.0

//! On-disk documents. Everything is JSON; field names are listed in
//! `docs/format.md`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CircuitGraph, EdgeRecord, Lut, LutId, NodeRecord, FEATURE_SCHEMA};

pub const CIRCUIT_FORMAT: &str = "preroute-circuit";
pub const LABEL_FORMAT: &str = "preroute-labels";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CircuitDocument {
    format: String,
    version: u32,
    name: String,
    feature_schema: Vec<String>,
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
    luts: BTreeMap<LutId, Lut>,
}

/// Parses and validates a circuit document. Invalid graphs are rejected,
/// never repaired.
pub fn parse_circuit(bytes: &[u8]) -> Result<CircuitGraph> {
    let doc: CircuitDocument =
        serde_json::from_slice(bytes).map_err(|e| Error::Malformed(e.to_string()))?;
    if doc.format != CIRCUIT_FORMAT {
        return Err(Error::Malformed(format!(
            "expected format `{CIRCUIT_FORMAT}`, found `{}`",
            doc.format
        )));
    }
    if doc.version != FORMAT_VERSION {
        return Err(Error::Malformed(format!(
            "unsupported version {}",
            doc.version
        )));
    }
    if doc.feature_schema != FEATURE_SCHEMA {
        return Err(Error::Malformed(format!(
            "feature schema {:?} does not match {:?}",
            doc.feature_schema, FEATURE_SCHEMA
        )));
    }
    let graph = CircuitGraph {
        name: doc.name,
        nodes: doc.nodes,
        edges: doc.edges,
        luts: doc.luts,
    };
    let report = graph.validate();
    if !report.is_empty() {
        return Err(Error::InvalidGraph(report));
    }
    Ok(graph)
}

pub fn serialize_circuit(graph: &CircuitGraph) -> Vec<u8> {
    let doc = CircuitDocument {
        format: CIRCUIT_FORMAT.into(),
        version: FORMAT_VERSION,
        name: graph.name.clone(),
        feature_schema: FEATURE_SCHEMA.iter().map(|s| s.to_string()).collect(),
        nodes: graph.nodes.clone(),
        edges: graph.edges.clone(),
        luts: graph.luts.clone(),
    };
    to_json(&doc)
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("documents always serialize");
    v.push(b'\n');
    v
}

pub fn from_json<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Malformed(e.to_string()))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
    }
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_circuit(path: &Path) -> Result<CircuitGraph> {
    parse_circuit(&read_file(path)?)
}

pub fn save_circuit(path: &Path, graph: &CircuitGraph) -> Result<()> {
    write_atomic(path, &serialize_circuit(graph))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::chain3;
    use crate::graph::EdgeKind;

    #[test]
    fn chain_document_parses() {
        let bytes = serialize_circuit(&chain3());
        let g = parse_circuit(&bytes).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.count_edges(EdgeKind::Net), 1);
        assert_eq!(g.count_edges(EdgeKind::NetInv), 1);
        assert_eq!(g.count_edges(EdgeKind::Cell), 1);
        assert_eq!(g, chain3());
    }

    #[test]
    fn missing_mirror_is_rejected_with_edge() {
        let mut g = chain3();
        g.edges.retain(|e| e.kind != EdgeKind::NetInv);
        let err = parse_circuit(&serialize_circuit(&g)).unwrap_err();
        assert_eq!(
            err.to_string(),
            "invalid circuit graph: missing net_inv mirror for edge (0,1)"
        );
    }

    #[test]
    fn malformed_documents() {
        assert!(matches!(parse_circuit(b"{"), Err(Error::Malformed(_))));
        let text = String::from_utf8(serialize_circuit(&chain3())).unwrap();
        let bad = text.replace("\"capacitance\"", "\"cap\"");
        assert!(matches!(
            parse_circuit(bad.as_bytes()),
            Err(Error::Malformed(_))
        ));
        let bad = text.replace(CIRCUIT_FORMAT, "other");
        assert!(matches!(
            parse_circuit(bad.as_bytes()),
            Err(Error::Malformed(_))
        ));
    }

    #[test]
    fn dangling_lut_is_rejected() {
        let mut g = chain3();
        g.luts.clear();
        let err = parse_circuit(&serialize_circuit(&g)).unwrap_err();
        assert!(err.to_string().contains("missing lut 0"), "{err}");
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/c.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        let leftovers: Vec<_> = std::fs::read_dir(p.parent().unwrap())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }
}
