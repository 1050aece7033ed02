//! Line-delimited dataset manifest: one JSON record per image.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{ensure_parent, load_image, load_mask};

/// Facial region covered by a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Eyes,
    Nose,
    Mouth,
}

impl Region {
    /// Priority order used when resolving overlaps.
    pub const ALL: [Region; 3] = [Region::Eyes, Region::Nose, Region::Mouth];

    pub fn name(self) -> &'static str {
        match self {
            Region::Eyes => "eyes",
            Region::Nose => "nose",
            Region::Mouth => "mouth",
        }
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eyes" => Ok(Region::Eyes),
            "nose" => Ok(Region::Nose),
            "mouth" => Ok(Region::Mouth),
            other => Err(Error::Argument(format!(
                "unknown region {other:?}; expected eyes, nose or mouth"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub image_path: String,
    pub identity_id: String,
    pub eyes_mask: String,
    pub nose_mask: String,
    pub mouth_mask: String,
    pub landmark_path: String,
}

impl ManifestRow {
    pub fn mask(&self, region: Region) -> &str {
        match region {
            Region::Eyes => &self.eyes_mask,
            Region::Nose => &self.nose_mask,
            Region::Mouth => &self.mouth_mask,
        }
    }

    /// File stem of the image, used to key generated outputs.
    pub fn key(&self) -> String {
        Path::new(&self.image_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_path.clone())
    }
}

/// Manifest rows plus the directory relative paths are resolved against.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: ManifestRow = serde_json::from_str(line).map_err(|e| {
                Error::Data(format!(
                    "{}:{}: invalid manifest row: {e}",
                    path.display(),
                    i + 1
                ))
            })?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Data(format!("manifest {} is empty", path.display())));
        }
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            rows,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let mut out = Vec::new();
        for row in &self.rows {
            serde_json::to_writer(&mut out, row)?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Checks that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            for p in [
                &row.image_path,
                &row.eyes_mask,
                &row.nose_mask,
                &row.mouth_mask,
                &row.landmark_path,
            ] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Data(format!(
                        "manifest row {}: missing file {}",
                        i + 1,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Dense class ids (sorted identity names) and the name table.
    pub fn identity_labels(&self) -> (Vec<usize>, Vec<String>) {
        let mut names: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &self.rows {
            names.insert(&r.identity_id, 0);
        }
        for (i, v) in names.values_mut().enumerate() {
            *v = i;
        }
        let labels = self
            .rows
            .iter()
            .map(|r| names[r.identity_id.as_str()])
            .collect();
        let table = names.keys().map(|s| s.to_string()).collect();
        (labels, table)
    }

    /// All images stacked as `[N, 3, H, W]`.
    pub fn load_images(&self) -> Result<Tensor> {
        let imgs = self
            .rows
            .iter()
            .map(|r| load_image(&self.resolve(&r.image_path)))
            .collect::<Result<Vec<_>>>()?;
        stack_same_size(&imgs, "image")
    }

    /// Masks of one region stacked as `[N, 1, H, W]`.
    pub fn load_masks(&self, region: Region) -> Result<Tensor> {
        let masks = self
            .rows
            .iter()
            .map(|r| load_mask(&self.resolve(r.mask(region))))
            .collect::<Result<Vec<_>>>()?;
        stack_same_size(&masks, "mask")
    }
}

pub(crate) fn stack_same_size(items: &[Tensor], what: &str) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::Data(format!("no {what}s to stack")))?;
    for t in items {
        if t.dims() != first.dims() {
            return Err(Error::Data(format!(
                "{what} sizes differ: {:?} vs {:?}",
                first.dims(),
                t.dims()
            )));
        }
    }
    Ok(Tensor::stack(items, 0)?)
}
