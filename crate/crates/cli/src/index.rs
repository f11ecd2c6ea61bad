//! Directory of encoded descriptors. `index.tsv` holds one
//! `image_path<TAB>descriptor_file<TAB>label[<TAB>group]` line per image;
//! mirrored descriptors, when present, sit next to the plain ones with a
//! `.flip.desc` suffix.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use lhs_core::Descriptor;

pub const INDEX_FILE: &str = "index.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub image: PathBuf,
    /// Descriptor file name relative to the index directory.
    pub file: String,
    pub label: String,
    pub group: Option<String>,
}

pub fn flip_name(file: &str) -> String {
    match file.strip_suffix(".desc") {
        Some(stem) => format!("{stem}.flip.desc"),
        None => format!("{file}.flip"),
    }
}

/// Canonical form used to match image paths across files.
pub fn path_key(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn write_index(dir: &Path, entries: &[IndexEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{}\t{}\t{}", e.image.display(), e.file, e.label));
        if let Some(g) = &e.group {
            text.push_str(&format!("\t{g}"));
        }
        text.push('\n');
    }
    let path = dir.join(INDEX_FILE);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// Loaded descriptor directory.
pub struct DescriptorSet {
    pub entries: Vec<IndexEntry>,
    pub plain: Vec<Descriptor>,
    pub flipped: Option<Vec<Descriptor>>,
    by_image: HashMap<PathBuf, usize>,
}

impl DescriptorSet {
    /// Reads the index and every descriptor. Mirrored descriptors are
    /// loaded when `with_flips` is set and must then exist for every entry.
    pub fn load(dir: &Path, with_flips: bool) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&fields.len()) {
                bail!("{}:{}: expected 3 or 4 tab-separated fields", path.display(), i + 1);
            }
            entries.push(IndexEntry {
                image: PathBuf::from(fields[0]),
                file: fields[1].to_string(),
                label: fields[2].to_string(),
                group: fields.get(3).map(|g| g.to_string()),
            });
        }
        if entries.is_empty() {
            bail!("{} lists no descriptors", path.display());
        }
        let load = |name: &str| Descriptor::load(dir.join(name)).with_context(|| format!("loading descriptor {name}"));
        let plain = entries.iter().map(|e| load(&e.file)).collect::<Result<Vec<_>>>()?;
        let flipped = if with_flips {
            Some(entries.iter().map(|e| load(&flip_name(&e.file))).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let by_image = entries.iter().enumerate().map(|(i, e)| (path_key(&e.image), i)).collect();
        Ok(DescriptorSet {
            entries,
            plain,
            flipped,
            by_image,
        })
    }

    pub fn position(&self, image: &Path) -> Result<usize> {
        self.by_image
            .get(&path_key(image))
            .copied()
            .with_context(|| format!("no descriptor for {}", image.display()))
    }

    pub fn flip(&self, i: usize) -> Option<&Descriptor> {
        self.flipped.as_ref().map(|f| &f[i])
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        self.plain.iter().map(|d| d.values.clone()).collect()
    }

    pub fn labels(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.label.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_names() {
        assert_eq!(flip_name("000001.desc"), "000001.flip.desc");
        assert_eq!(flip_name("x"), "x.flip");
    }
}
