//! Dataset manifests: one `image<TAB>label[<TAB>mask]` record per line.
//! Lines starting with `#` are comments, except `#split=<tag>`.
//! Relative paths resolve against the manifest's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut split = Split::default();
        let mut entries = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let line = line.trim_end_matches(['\n', '\r']);
            if let Some(tag) = line.strip_prefix("#split=") {
                split = tag.trim().parse()?;
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let resolve = |p: &str| {
                let p = Path::new(p);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                }
            };
            let fields: Vec<&str> = line.split('\t').collect();
            match fields[..] {
                [img, lbl] => entries.push(ManifestEntry { image: resolve(img), label: resolve(lbl), mask: None }),
                [img, lbl, msk] => entries.push(ManifestEntry {
                    image: resolve(img),
                    label: resolve(lbl),
                    mask: Some(resolve(msk)),
                }),
                _ => {
                    return Err(Error::Parse {
                        offset: start,
                        msg: format!("expected 2 or 3 tab-separated paths, got {}", fields.len()),
                    })
                }
            }
        }
        if entries.is_empty() {
            return Err(Error::Parse { offset, msg: "manifest has no records".into() });
        }
        Ok(DatasetManifest { entries, split })
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&text, base)?;
        for e in &m.entries {
            for p in [Some(&e.image), Some(&e.label), e.mask.as_ref()].into_iter().flatten() {
                if !p.is_file() {
                    return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest but missing")));
                }
            }
        }
        Ok(m)
    }

    /// Writes paths relative to `path`'s directory when possible.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut out = format!("#split={}\n", self.split);
        for e in &self.entries {
            out.push_str(&rel(&e.image));
            out.push('\t');
            out.push_str(&rel(&e.label));
            if let Some(m) = &e.mask {
                out.push('\t');
                out.push_str(&rel(m));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_records_and_split() {
        let m = DatasetManifest::parse("#split=test\n# note\na.pgm\tb.pgm\n/x/c.pgm\td.pgm\tm.pgm\n", Path::new("/data")).unwrap();
        assert_eq!(m.split, Split::Test);
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].image, Path::new("/data/a.pgm"));
        assert_eq!(m.entries[1].image, Path::new("/x/c.pgm"));
        assert_eq!(m.entries[1].mask.as_deref(), Some(Path::new("/data/m.pgm")));
    }

    #[test]
    fn rejects_bad_records() {
        assert!(DatasetManifest::parse("only-one-field\n", Path::new(".")).is_err());
        assert!(DatasetManifest::parse("# nothing\n", Path::new(".")).is_err());
        assert!(DatasetManifest::parse("#split=holdout\na\tb\n", Path::new(".")).is_err());
    }
}
