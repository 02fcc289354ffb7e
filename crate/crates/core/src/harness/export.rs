use std::path::{Path, PathBuf};

use super::pipeline::write_text;
use crate::error::{Error, Result};
use crate::graphbuild::ImageGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    /// One Graphviz file per graph.
    Dot,
    /// One JSON object per line in a single file.
    JsonLines,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(ExportFormat::Dot),
            "jsonl" | "json-lines" => Ok(ExportFormat::JsonLines),
            _ => Err(Error::config(format!("unknown export format `{s}` (expected dot or jsonl)"))),
        }
    }
}

/// Writes `graphs` into `out_dir` as `graph_00000.dot`, ... or `graphs.jsonl`
/// and returns the written paths.
pub fn export_graphs(graphs: &[ImageGraph], format: ExportFormat, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match format {
        ExportFormat::Dot => graphs
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let path = dir.join(format!("graph_{i:05}.dot"));
                write_text(&path, &g.to_dot())?;
                Ok(path)
            })
            .collect(),
        ExportFormat::JsonLines => {
            let path = dir.join("graphs.jsonl");
            super::pipeline::write_graphs_jsonl(&path, graphs)?;
            Ok(vec![path])
        }
    }
}
