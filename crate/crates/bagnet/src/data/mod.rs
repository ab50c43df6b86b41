//! Dataset manifests and sample loading.
//!
//! A manifest is a plain tab-separated text file, one sample per line:
//!
//! ```text
//! # any comment
//! #! target_size<TAB>64<TAB>64
//! #! seed<TAB>7
//! lesion_000<TAB>images/lesion_000.png<TAB>masks/lesion_000.png<TAB>0
//! ```
//!
//! Columns are `id`, `image path`, `mask path` and an optional fold index.
//! Lines starting with `#!` are typed directives, plain `#` lines are
//! comments. Paths are kept verbatim; call
//! [`DatasetManifest::resolved`] to join relative paths onto the manifest's
//! directory before loading.

mod image_io;
mod synth;

pub use image_io::{
    load_gray_image, load_sample, resize_bilinear, resize_nearest, write_boundary_overlay,
};
pub use synth::synth_dataset;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub fold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub samples: Vec<Sample>,
    /// `(h, w)` every sample is resized to; both divisible by 16.
    pub target_size: (usize, usize),
    pub seed: u64,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.target_size;
        if h == 0 || w == 0 || !h.is_multiple_of(16) || !w.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "manifest target_size {h}x{w} must be divisible by 16"
            )));
        }
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(&s.id) {
                return Err(Error::Config(format!("duplicate sample id '{}'", s.id)));
            }
        }
        Ok(())
    }

    /// Copy with every relative path joined onto `base`.
    pub fn resolved(&self, base: &Path) -> DatasetManifest {
        let join = |p: &PathBuf| {
            if p.is_absolute() {
                p.clone()
            } else {
                base.join(p)
            }
        };
        DatasetManifest {
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    id: s.id.clone(),
                    image_path: join(&s.image_path),
                    mask_path: join(&s.mask_path),
                    fold: s.fold,
                })
                .collect(),
            ..self.clone()
        }
    }

    /// Samples whose image or mask file does not exist; parse keeps them
    /// (with a warning at the CLI), loading fails on them.
    pub fn missing_files(&self) -> Vec<(String, PathBuf)> {
        let mut out = Vec::new();
        for s in &self.samples {
            for p in [&s.image_path, &s.mask_path] {
                if !p.exists() {
                    out.push((s.id.clone(), p.clone()));
                }
            }
        }
        out
    }
}

pub fn parse_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_str(&text)
}

pub fn parse_manifest_str(text: &str) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest {
        samples: Vec::new(),
        target_size: (64, 64),
        seed: 0,
    };
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        if let Some(directive) = line.strip_prefix("#!") {
            let fields: Vec<&str> = directive.trim().split('\t').collect();
            match fields.as_slice() {
                ["target_size", h, w] => {
                    manifest.target_size = (
                        parse_num(h, line_no, "target_size height")?,
                        parse_num(w, line_no, "target_size width")?,
                    );
                }
                ["seed", s] => {
                    manifest.seed = parse_num(s, line_no, "seed")?;
                }
                other => {
                    return Err(Error::Manifest {
                        line: line_no,
                        message: format!("unknown directive {other:?}"),
                    })
                }
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::Manifest {
                line: line_no,
                message: format!(
                    "expected 3 or 4 tab-separated fields (id, image, mask, [fold]), got {}",
                    fields.len()
                ),
            });
        }
        let id = fields[0].to_string();
        if id.is_empty() {
            return Err(Error::Manifest {
                line: line_no,
                message: "empty sample id".into(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(Error::Manifest {
                line: line_no,
                message: format!("duplicate id '{id}'"),
            });
        }
        let fold = match fields.get(3) {
            None | Some(&"") => None,
            Some(f) => Some(parse_num(f, line_no, "fold")?),
        };
        manifest.samples.push(Sample {
            id,
            image_path: PathBuf::from(fields[1]),
            mask_path: PathBuf::from(fields[2]),
            fold,
        });
    }
    manifest.validate()?;
    Ok(manifest)
}

fn parse_num<N: std::str::FromStr>(text: &str, line: usize, what: &str) -> Result<N> {
    text.parse().map_err(|_| Error::Manifest {
        line,
        message: format!("cannot parse {what} from '{text}'"),
    })
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    std::fs::write(path, manifest_to_string(manifest)).map_err(|e| Error::io(path, e))
}

pub fn manifest_to_string(manifest: &DatasetManifest) -> String {
    let mut out = String::new();
    out.push_str("# dataset manifest: id, image, mask, optional fold (tab-separated)\n");
    let (h, w) = manifest.target_size;
    let _ = writeln!(out, "#! target_size\t{h}\t{w}");
    let _ = writeln!(out, "#! seed\t{}", manifest.seed);
    for s in &manifest.samples {
        let _ = write!(
            out,
            "{}\t{}\t{}",
            s.id,
            s.image_path.display(),
            s.mask_path.display()
        );
        if let Some(f) = s.fold {
            let _ = write!(out, "\t{f}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_manifest() -> DatasetManifest {
        DatasetManifest {
            samples: vec![
                Sample {
                    id: "a".into(),
                    image_path: "images/a.png".into(),
                    mask_path: "masks/a.png".into(),
                    fold: Some(0),
                },
                Sample {
                    id: "b".into(),
                    image_path: "images/b.png".into(),
                    mask_path: "masks/b.png".into(),
                    fold: None,
                },
                Sample {
                    id: "c".into(),
                    image_path: "/abs/c.png".into(),
                    mask_path: "/abs/c_mask.png".into(),
                    fold: Some(2),
                },
            ],
            target_size: (32, 48),
            seed: 9,
        }
    }

    #[test]
    fn roundtrip_equality() {
        let m = sample_manifest();
        let text = manifest_to_string(&m);
        let back = parse_manifest_str(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn empty_sample_list_is_valid() {
        let m = parse_manifest_str("#! target_size\t64\t64\n#! seed\t0\n").unwrap();
        assert!(m.samples.is_empty());
    }

    #[test]
    fn duplicate_id_is_named_in_the_error() {
        let text = "x\ta.png\tb.png\nx\tc.png\td.png\n";
        let err = parse_manifest_str(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("'x'"), "{msg}");
    }

    #[test]
    fn malformed_rows_carry_line_numbers() {
        let err = parse_manifest_str("onlyone\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = parse_manifest_str("a\tb.png\tc.png\tnot_a_number\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = parse_manifest_str("#! target_size\t64\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn target_size_must_divide_16() {
        let err = parse_manifest_str("#! target_size\t60\t64\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn resolved_joins_only_relative_paths() {
        let m = sample_manifest().resolved(Path::new("/data"));
        assert_eq!(m.samples[0].image_path, PathBuf::from("/data/images/a.png"));
        assert_eq!(m.samples[2].image_path, PathBuf::from("/abs/c.png"));
    }
}
