use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_CLASSES: usize = 7;

/// Cell types of the seven-class labelling, indexed by `class - 1`.
pub const CLASS_NAMES: [&str; N_CLASSES] = [
    "Superficial squamous epithelial",
    "Intermediate squamous epithelial",
    "Columnar epithelial",
    "Mild squamous non-keratinizing dysplasia",
    "Moderate squamous non-keratinizing dysplasia",
    "Severe squamous non-keratinizing dysplasia",
    "Squamous cell carcinoma in situ intermediate",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Normal,
    Abnormal,
}

impl Category {
    /// Classes 1-3 are normal, 4-7 abnormal.
    pub fn of_class(class_label: u8) -> Category {
        if class_label <= 3 {
            Category::Normal
        } else {
            Category::Abnormal
        }
    }

    pub fn index(self) -> usize {
        match self {
            Category::Normal => 0,
            Category::Abnormal => 1,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Normal => "normal",
            Category::Abnormal => "abnormal",
        })
    }
}

/// Classification task: normal vs abnormal, or the seven cell types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "2class")]
    TwoClass,
    #[serde(rename = "7class")]
    SevenClass,
}

impl Task {
    pub fn n_classes(self) -> usize {
        match self {
            Task::TwoClass => 2,
            Task::SevenClass => N_CLASSES,
        }
    }

    /// Zero-based network target for a 1-7 class label.
    pub fn target(self, class_label: u8) -> usize {
        match self {
            Task::TwoClass => Category::of_class(class_label).index(),
            Task::SevenClass => class_label as usize - 1,
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "2class" | "2" => Some(Task::TwoClass),
            "7class" | "7" => Some(Task::SevenClass),
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::TwoClass => "2class",
            Task::SevenClass => "7class",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub segmentation: PathBuf,
    pub class_label: u8,
    pub patient_id: String,
}

impl ManifestEntry {
    pub fn category(&self) -> Category {
        Category::of_class(self.class_label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory that relative entry paths resolve against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestOptions {
    /// Give every cell its own patient id. Patient-level splitting then
    /// degenerates to cell-level splitting.
    pub cell_as_patient: bool,
    pub check_files: bool,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        ManifestOptions {
            cell_as_patient: false,
            check_files: true,
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest_with(path, ManifestOptions::default())
}

pub fn load_manifest_with(path: &Path, opts: ManifestOptions) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::from_reader(file, root, opts).map_err(|e| match e {
        Error::Csv { source, .. } => Error::Csv {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

impl DatasetManifest {
    pub fn from_reader(reader: impl Read, root: PathBuf, opts: ManifestOptions) -> Result<Self> {
        let csv_err = |source| Error::Csv {
            path: PathBuf::from("<manifest>"),
            source,
        };
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let need = |name: &str| col(name).ok_or_else(|| Error::MissingColumn(name.to_string()));
        let (image_col, seg_col, class_col) = (need("image")?, need("segmentation")?, need("class")?);
        let patient_col = match col("patient") {
            Some(c) => Some(c),
            None if opts.cell_as_patient => None,
            None => return Err(Error::MissingColumn("patient".into())),
        };
        let mut entries = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record.map_err(csv_err)?;
            // Line 1 is the header.
            let line = i + 2;
            let field = |c: usize| record.get(c).unwrap_or("").to_string();
            let raw_class = field(class_col);
            let class_label = match raw_class.parse::<u8>() {
                Ok(c) if (1..=7).contains(&c) => c,
                _ => return Err(Error::InvalidClass { line, value: raw_class }),
            };
            let patient_id = if opts.cell_as_patient {
                format!("cell-{i:05}")
            } else {
                let p = patient_col.map(field).unwrap_or_default();
                if p.is_empty() {
                    return Err(Error::EmptyPatient { line });
                }
                p
            };
            entries.push(ManifestEntry {
                image: PathBuf::from(field(image_col)),
                segmentation: PathBuf::from(field(seg_col)),
                class_label,
                patient_id,
            });
        }
        let manifest = DatasetManifest { root, entries };
        if opts.check_files {
            for i in 0..manifest.len() {
                for p in [manifest.image_path(i), manifest.segmentation_path(i)] {
                    if !p.is_file() {
                        return Err(Error::MissingFile(p));
                    }
                }
            }
        }
        Ok(manifest)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].image)
    }

    pub fn segmentation_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].segmentation)
    }

    /// Writes the manifest as CSV with paths relative to `root`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let wrap = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        w.write_record(["image", "segmentation", "class", "patient"])
            .map_err(wrap)?;
        for e in &self.entries {
            w.write_record([
                e.image.to_string_lossy().as_ref(),
                e.segmentation.to_string_lossy().as_ref(),
                &e.class_label.to_string(),
                &e.patient_id,
            ])
            .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub total: usize,
    /// Index `c` counts class `c + 1`.
    pub per_class: [usize; N_CLASSES],
    pub normal: usize,
    pub abnormal: usize,
    pub per_patient: BTreeMap<String, usize>,
}

pub fn dataset_stats(manifest: &DatasetManifest) -> DatasetStats {
    let mut stats = DatasetStats {
        total: manifest.len(),
        per_class: [0; N_CLASSES],
        normal: 0,
        abnormal: 0,
        per_patient: BTreeMap::new(),
    };
    for e in &manifest.entries {
        stats.per_class[usize::from(e.class_label) - 1] += 1;
        match e.category() {
            Category::Normal => stats.normal += 1,
            Category::Abnormal => stats.abnormal += 1,
        }
        *stats.per_patient.entry(e.patient_id.clone()).or_default() += 1;
    }
    stats
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<9} {:>5}  {:<46} {:>5}", "Category", "Class", "Cell type", "Num.")?;
        for (i, n) in self.per_class.iter().enumerate() {
            let class = i as u8 + 1;
            writeln!(
                f,
                "{:<9} {:>5}  {:<46} {:>5}",
                Category::of_class(class).to_string(),
                class,
                CLASS_NAMES[i],
                n
            )?;
        }
        writeln!(
            f,
            "total {} cells ({} normal, {} abnormal) from {} patients",
            self.total,
            self.normal,
            self.abnormal,
            self.per_patient.len()
        )
    }
}
