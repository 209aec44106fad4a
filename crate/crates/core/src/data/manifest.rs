//! Tab-separated dataset manifests.
//!
//! One record per line: `id<TAB>label<TAB>audio-path<TAB>text-path`. Lines
//! starting with `#` are comments; a `# dims audio=<d> text=<d>` comment
//! declares the feature dimensions every referenced file must have. Relative
//! paths are resolved against the manifest's directory. A label of `-` marks
//! an unlabelled utterance.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{class_index, features::read_features, Utterance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub label: Option<usize>,
    pub audio_path: PathBuf,
    pub text_path: PathBuf,
    /// 1-based line number in the source manifest.
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub class_names: Vec<String>,
    pub audio_dim: Option<usize>,
    pub text_dim: Option<usize>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads the feature files of one entry and checks them against the header.
    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<Utterance> {
        let audio = read_features(&entry.audio_path)?;
        let text = read_features(&entry.text_path)?;
        let check = |what: &str, declared: Option<usize>, actual: usize| {
            match declared {
                Some(d) if d != actual => Err(Error::Manifest {
                    path: self.path.clone(),
                    line: entry.line,
                    reason: format!("{what} features of {} have dim {actual}, header declares {d}", entry.id),
                }),
                _ => Ok(()),
            }
        };
        check("audio", self.audio_dim, audio.shape()[1])?;
        check("text", self.text_dim, text.shape()[1])?;
        Utterance::new(entry.id.clone(), audio, text, entry.label)
    }

    pub fn load_all(&self) -> Result<Vec<Utterance>> {
        self.entries.iter().map(|e| self.load_entry(e)).collect()
    }

    /// `(id, label)` pairs without touching feature files.
    pub fn labels(&self) -> Vec<(String, Option<usize>)> {
        self.entries.iter().map(|e| (e.id.clone(), e.label)).collect()
    }
}

fn parse_dims(comment: &str) -> Option<(Option<usize>, Option<usize>)> {
    let rest = comment.trim_start_matches('#').trim();
    let rest = rest.strip_prefix("dims")?;
    let mut audio = None;
    let mut text = None;
    for kv in rest.split_whitespace() {
        match kv.split_once('=') {
            Some(("audio", v)) => audio = v.parse().ok(),
            Some(("text", v)) => text = v.parse().ok(),
            _ => {}
        }
    }
    Some((audio, text))
}

/// Parses a manifest and checks that every referenced feature file exists.
/// Feature data itself is read lazily by [`Manifest::load_entry`].
pub fn load_manifest(path: &Path, class_names: &[String]) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut manifest = Manifest {
        path: path.to_path_buf(),
        class_names: class_names.to_vec(),
        audio_dim: None,
        text_dim: None,
        entries: Vec::new(),
    };
    let err = |line: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if let Some((a, t)) = parse_dims(line) {
                manifest.audio_dim = a;
                manifest.text_dim = t;
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, label, audio, text_path] = fields[..] else {
            return Err(err(line_no, format!("expected 4 tab-separated fields, got {}", fields.len())));
        };
        if id.is_empty() {
            return Err(err(line_no, "empty utterance id".into()));
        }
        let label = match label {
            "-" | "" => None,
            name => Some(class_index(class_names, name).ok_or_else(|| {
                err(line_no, format!("unknown label {name:?}; expected one of {class_names:?}"))
            })?),
        };
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
        };
        let entry = ManifestEntry {
            id: id.to_string(),
            label,
            audio_path: resolve(audio),
            text_path: resolve(text_path),
            line: line_no,
        };
        for p in [&entry.audio_path, &entry.text_path] {
            if !p.is_file() {
                return Err(err(line_no, format!("missing feature file {}", p.display())));
            }
        }
        manifest.entries.push(entry);
    }
    Ok(manifest)
}

/// Writes a manifest atomically (temporary file, then rename). Paths inside
/// the manifest directory are stored relative to it.
pub fn write_manifest(
    path: &Path,
    entries: &[ManifestEntry],
    class_names: &[String],
    dims: Option<(usize, usize)>,
) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let rel = |p: &Path| -> String {
        p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
    };
    let mut out = String::from("# id\tlabel\taudio\ttext\n");
    if let Some((a, t)) = dims {
        out.push_str(&format!("# dims audio={a} text={t}\n"));
    }
    for e in entries {
        if e.id.contains(['\t', '\n']) {
            return Err(Error::InvalidArgument(format!("utterance id {:?} contains a tab or newline", e.id)));
        }
        let label = match e.label {
            Some(y) => class_names
                .get(y)
                .ok_or_else(|| Error::InvalidArgument(format!("label {y} out of range")))?
                .as_str(),
            None => "-",
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.id,
            label,
            rel(&e.audio_path),
            rel(&e.text_path)
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
