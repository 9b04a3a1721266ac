//! On-disk dataset layout: one directory per class plus an optional severity CSV.
//!
//! ```text
//! root/
//!   physical_damage/ bird_dropping/ clean/ electrical_fault/ snow_cover/
//!   soiling/ cell_damage/ breakage/ dust/
//!   severity.csv        image_id,grade   (image_id = "<class dir>/<file>")
//! ```

mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::severity::SeverityGrade;
use crate::vit::DefectClass;

pub use synthetic::{generate, render_panel, write_synthetic, SyntheticConfig, SyntheticImage};

pub const SEVERITY_CSV: &str = "severity.csv";

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// One image of the dataset. `id` is its path relative to the dataset root,
/// always with `/` separators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub path: PathBuf,
    pub class: DefectClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Directory name per class, indexed by class code.
    pub class_dirs: Vec<String>,
    pub severity_csv: Option<PathBuf>,
}

impl DatasetManifest {
    /// Resolves the nine class directories under `root`.
    pub fn open(root: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut found: BTreeMap<DefectClass, String> = BTreeMap::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            if !entry.path().is_dir() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            let Ok(class) = name.parse::<DefectClass>() else {
                continue;
            };
            if let Some(prev) = found.insert(class, name.clone()) {
                return Err(Error::Manifest(format!(
                    "directories `{prev}` and `{name}` both map to class {class}"
                )));
            }
        }
        let missing: Vec<&str> = DefectClass::ALL
            .iter()
            .filter(|c| !found.contains_key(c))
            .map(|c| c.slug())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Manifest(format!(
                "{} is missing class director{} {}",
                root.display(),
                if missing.len() == 1 { "y" } else { "ies" },
                missing.join(", ")
            )));
        }
        let csv = root.join(SEVERITY_CSV);
        Ok(Self {
            root: root.to_path_buf(),
            class_dirs: DefectClass::ALL.iter().map(|c| found[c].clone()).collect(),
            severity_csv: csv.is_file().then_some(csv),
        })
    }

    /// Every image, ordered by class code then file name.
    pub fn samples(&self) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for (class, dir) in DefectClass::ALL.iter().zip(&self.class_dirs) {
            let path = self.root.join(dir);
            let mut files: Vec<PathBuf> = std::fs::read_dir(&path)
                .map_err(|e| Error::io(&path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image_file(p))
                .collect();
            files.sort();
            for f in files {
                let name = f.file_name().unwrap().to_string_lossy().into_owned();
                out.push(Sample {
                    id: format!("{dir}/{name}"),
                    path: f,
                    class: *class,
                });
            }
        }
        Ok(out)
    }

    /// Severity labels keyed by image id; empty when the dataset has no CSV.
    pub fn severity_labels(&self) -> Result<BTreeMap<String, SeverityGrade>> {
        match &self.severity_csv {
            Some(p) => read_severity_csv(p),
            None => Ok(BTreeMap::new()),
        }
    }
}

/// Reads `image_id,grade` rows (header required).
pub fn read_severity_csv(path: &Path) -> Result<BTreeMap<String, SeverityGrade>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::format(path, format!("missing `{name}` column")))
    };
    let (id_col, grade_col) = (col("image_id")?, col("grade")?);
    let mut out = BTreeMap::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let id = rec.get(id_col).unwrap_or("").trim().to_string();
        let grade = rec
            .get(grade_col)
            .unwrap_or("")
            .parse::<SeverityGrade>()
            .map_err(|e| Error::format(path, format!("row {}: {e}", line + 2)))?;
        out.insert(id, grade);
    }
    Ok(out)
}

pub fn write_severity_csv(path: &Path, labels: &[(String, SeverityGrade)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["image_id", "grade"]).map_err(|e| csv_error(path, e))?;
    for (id, g) in labels {
        w.write_record([id.as_str(), g.name()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Test,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Test => "test",
        }
    }
}

/// `id,class_code,train|test` lines, one per image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub entries: Vec<(String, DefectClass, Partition)>,
}

impl SplitManifest {
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(id, c, p)| format!("{id},{},{}\n", c.code(), p.name()))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::format(path, format!("line {}: expected `path,class_code,train|test`", n + 1));
            let mut parts = line.rsplitn(3, ',');
            let part = parts.next().ok_or_else(bad)?;
            let code = parts.next().ok_or_else(bad)?;
            let id = parts.next().ok_or_else(bad)?;
            let class = DefectClass::from_code(code.trim().parse().map_err(|_| bad())?).map_err(|_| bad())?;
            let partition = match part.trim() {
                "train" => Partition::Train,
                "test" => Partition::Test,
                _ => return Err(bad()),
            };
            entries.push((id.to_string(), class, partition));
        }
        Ok(Self { entries })
    }

    pub fn ids(&self, partition: Partition) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, _, p)| *p == partition)
            .map(|(id, _, _)| id.as_str())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn make_layout(root: &Path, skip: Option<DefectClass>) {
        for c in DefectClass::ALL {
            if Some(c) == skip {
                continue;
            }
            std::fs::create_dir_all(root.join(c.slug())).unwrap();
        }
    }

    #[test]
    fn missing_class_directory_is_named() {
        let dir = tempfile::tempdir().unwrap();
        make_layout(dir.path(), Some(DefectClass::Dust));
        match DatasetManifest::open(dir.path()) {
            Err(Error::Manifest(msg)) => assert!(msg.contains("dust"), "{msg}"),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn samples_are_ordered_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        make_layout(dir.path(), None);
        let img = crate::imaging::RgbImage::filled(2, 2, [0.5; 3]);
        for name in ["b.png", "a.png"] {
            img.save_png(&dir.path().join("clean").join(name)).unwrap();
        }
        img.save_png(&dir.path().join("dust").join("z.png")).unwrap();
        std::fs::write(dir.path().join("dust").join("notes.txt"), "x").unwrap();
        let m = DatasetManifest::open(dir.path()).unwrap();
        let ids: Vec<String> = m.samples().unwrap().into_iter().map(|s| s.id).collect();
        assert_eq!(ids, vec!["clean/a.png", "clean/b.png", "dust/z.png"]);
        assert!(m.severity_csv.is_none());
    }

    #[test]
    fn severity_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_severity_csv(
            &p,
            &[
                ("clean/a.png".into(), SeverityGrade::Nil),
                ("dust/b.png".into(), SeverityGrade::Major),
            ],
        )
        .unwrap();
        let m = read_severity_csv(&p).unwrap();
        assert_eq!(m["dust/b.png"], SeverityGrade::Major);
        std::fs::write(&p, "image_id,grade\nx.png,awful\n").unwrap();
        assert!(read_severity_csv(&p).is_err());
    }

    #[test]
    fn split_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.txt");
        let m = SplitManifest {
            entries: vec![
                ("clean/a,b.png".into(), DefectClass::Clean, Partition::Train),
                ("dust/z.png".into(), DefectClass::Dust, Partition::Test),
            ],
        };
        m.write(&p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "clean/a,b.png,2,train\ndust/z.png,8,test\n"
        );
        assert_eq!(SplitManifest::read(&p).unwrap(), m);
        assert_eq!(m.ids(Partition::Test), vec!["dust/z.png"]);
    }
}
