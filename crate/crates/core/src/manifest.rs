//! Registry manifests: one JSON record per line.
//!
//! ```text
//! {"kind":"seed","seed":42}
//! {"kind":"backbone","path":"backbone.ccoe"}
//! {"kind":"expert","id":0,"domain":"copy","path":"experts/0.ccoe","positions":[0,2,4,6]}
//! {"kind":"mapping","domain":"copy","experts":[0]}
//! {"kind":"planner","path":"planner.ccoe"}
//! ```
//!
//! Relative paths resolve against the manifest's directory. An expert entry
//! may give a strategy name and layer count instead of explicit positions.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::InsertionStrategy;
use crate::checkpoint::{load_backbone, load_expert, load_planner, write_atomic};
use crate::error::{Error, Result};
use crate::lifecycle::ExpertRegistry;
use crate::routing::MappingMatrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertEntry {
    pub id: u32,
    pub domain: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
}

impl ExpertEntry {
    /// Explicit positions, or the strategy's positions for `n_layers`.
    pub fn resolve_positions(&self, n_layers: usize) -> Result<Option<Vec<usize>>> {
        if let Some(p) = &self.positions {
            return Ok(Some(p.clone()));
        }
        match (&self.strategy, self.layers) {
            (Some(s), Some(l)) => {
                let s = InsertionStrategy::parse(s)
                    .ok_or_else(|| Error::Config(format!("unknown insertion strategy {s:?}")))?;
                Ok(Some(s.positions(n_layers, l)?))
            }
            (None, None) => Ok(None),
            _ => Err(Error::Config(format!("expert {} needs both strategy and layers", self.id))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Seed { seed: u64 },
    Backbone { path: PathBuf },
    Expert(ExpertEntry),
    Mapping { domain: String, experts: Vec<u32> },
    Planner { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub seed: u64,
    pub backbone: Option<PathBuf>,
    pub experts: Vec<ExpertEntry>,
    /// `(domain, expert ids)` rows of the gating table.
    pub mapping: Vec<(String, Vec<u32>)>,
    pub planner: Option<PathBuf>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(line).map_err(|e| Error::Config(format!("manifest line {}: {e}", i + 1)))?;
            match rec {
                Record::Seed { seed } => m.seed = seed,
                Record::Backbone { path } => m.backbone = Some(path),
                Record::Expert(e) => {
                    if m.experts.iter().any(|x| x.id == e.id) {
                        return Err(Error::Config(format!("expert {} listed twice", e.id)));
                    }
                    m.experts.push(e)
                }
                Record::Mapping { domain, experts } => m.mapping.push((domain, experts)),
                Record::Planner { path } => m.planner = Some(path),
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut recs = vec![Record::Seed { seed: self.seed }];
        if let Some(p) = &self.backbone {
            recs.push(Record::Backbone { path: p.clone() });
        }
        let mut experts = self.experts.clone();
        experts.sort_by_key(|e| e.id);
        recs.extend(experts.into_iter().map(Record::Expert));
        for (d, ids) in &self.mapping {
            recs.push(Record::Mapping { domain: d.clone(), experts: ids.clone() });
        }
        if let Some(p) = &self.planner {
            recs.push(Record::Planner { path: p.clone() });
        }
        recs.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn expert(&self, id: u32) -> Option<&ExpertEntry> {
        self.experts.iter().find(|e| e.id == id)
    }

    /// Replaces the mapping rows with the registry's current table.
    pub fn sync_mapping(&mut self, m: &MappingMatrix) {
        self.mapping = m
            .domains()
            .map(|d| (d.to_string(), m.experts_for(d).unwrap_or(&[]).to_vec()))
            .collect();
    }

    /// Loads every referenced checkpoint (verifying digests) and assembles
    /// the registry.
    pub fn build_registry(&self, base: &Path) -> Result<ExpertRegistry> {
        let bpath = self.backbone.as_ref().ok_or_else(|| Error::Config("manifest has no backbone".into()))?;
        let backbone = load_backbone(&base.join(bpath))?;
        let config = *backbone.config();
        let mut reg = ExpertRegistry::new(backbone, self.seed)?;
        for e in &self.experts {
            if let Some(p) = e.resolve_positions(config.n_layers)? {
                reg.declare_positions(e.id, p)?;
            }
            let expert = load_expert(&base.join(&e.path), &config)?;
            if expert.id != e.id || expert.domain != e.domain {
                return Err(Error::Config(format!(
                    "{} holds expert {} ({}), manifest says {} ({})",
                    e.path.display(),
                    expert.id,
                    expert.domain,
                    e.id,
                    e.domain
                )));
            }
            reg.push(expert)?;
        }
        if !self.mapping.is_empty() {
            let ids = reg.expert_ids();
            let mut m = MappingMatrix::new();
            for &id in &ids {
                m.add_expert(id);
            }
            for (d, row) in &self.mapping {
                m.add_domain(d);
                for &id in row {
                    m.set(d, id, true)?;
                }
            }
            reg.set_mapping(m)?;
        }
        if let Some(p) = &self.planner {
            reg.set_planner(load_planner(&base.join(p), &config)?)?;
        }
        Ok(reg)
    }
}

/// Exclusive advisory lock on `<manifest>.lock`, released on drop.
pub struct ManifestLock {
    _file: File,
}

impl ManifestLock {
    /// Fails without creating anything if the manifest does not exist.
    pub fn acquire(manifest: &Path) -> Result<Self> {
        if !manifest.is_file() {
            return Err(Error::Config(format!("manifest {} does not exist", manifest.display())));
        }
        let mut name = manifest.as_os_str().to_owned();
        name.push(".lock");
        let file = File::options().create(true).truncate(false).write(true).open(PathBuf::from(name))?;
        file.lock()?;
        Ok(Self { _file: file })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let text = concat!(
            "{\"kind\":\"seed\",\"seed\":7}\n",
            "{\"kind\":\"backbone\",\"path\":\"b.ccoe\"}\n",
            "{\"kind\":\"expert\",\"id\":1,\"domain\":\"copy\",\"path\":\"e1.ccoe\",\"strategy\":\"GL\",\"layers\":4}\n",
            "{\"kind\":\"mapping\",\"domain\":\"copy\",\"experts\":[1]}\n",
        );
        let m = Manifest::parse(text).unwrap();
        assert_eq!(m.seed, 7);
        assert_eq!(m.experts[0].resolve_positions(8).unwrap(), Some(vec![0, 2, 4, 6]));
        assert_eq!(Manifest::parse(&m.to_jsonl()).unwrap(), m);
        assert_eq!(m.to_jsonl(), text);
        assert!(Manifest::parse("{\"kind\":\"nope\"}").is_err());
    }
}
