//! Dataset directories: rasters plus CSV manifests.
//!
//! ```text
//! manifest.csv   split,image,label,mask,distance
//! negatives.csv  image,alpha
//! toy.csv        split,x,y,role
//! ```
//! Paths are relative to the dataset root. Distance rasters hold whole meters.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::augment::NegativePatch;
use super::pnm::{read_pgm, read_ppm, write_pgm, write_ppm, GrayImage};
use super::toy::{ToyPoint, ToyPointSet, ToyRole};
use super::SceneSample;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::losses::PixelRoleMask;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const NEGATIVES_FILE: &str = "negatives.csv";
pub const TOY_FILE: &str = "toy.csv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub split: String,
    pub image: String,
    pub label: String,
    pub mask: String,
    #[serde(default)]
    pub distance: Option<String>,
}

/// A scene read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedScene {
    pub name: String,
    pub sample: SceneSample,
    pub distance: Option<Vec<f64>>,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r =
        csv::Reader::from_path(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn stem(split: &str, index: usize) -> String {
    format!("{split}_{index:04}")
}

/// Writes every sample of each split plus an optional distance raster per sample.
pub fn write_scenes(
    root: &Path,
    splits: &[(&str, &[SceneSample])],
    distance: Option<&[f64]>,
) -> Result<Vec<ManifestRow>> {
    for dir in ["images", "labels", "masks", "distance"] {
        fs::create_dir_all(root.join(dir))?;
    }
    let mut rows = Vec::new();
    for &(split, samples) in splits {
        for (i, s) in samples.iter().enumerate() {
            let name = stem(split, i);
            let (h, w) = (s.height(), s.width());
            let row = ManifestRow {
                split: split.to_string(),
                image: format!("images/{name}.ppm"),
                label: format!("labels/{name}.pgm"),
                mask: format!("masks/{name}.pgm"),
                distance: distance.map(|_| format!("distance/{name}.pgm")),
            };
            write_ppm(&root.join(&row.image), &s.image)?;
            write_pgm(
                &root.join(&row.label),
                &GrayImage::new(h, w, s.labels.values().to_vec())?,
            )?;
            write_pgm(&root.join(&row.mask), &GrayImage::new(h, w, s.mask.codes())?)?;
            if let (Some(d), Some(p)) = (distance, &row.distance) {
                if d.len() != h * w {
                    return Err(Error::shape(h * w, d.len()));
                }
                let q = d.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
                write_pgm(&root.join(p), &GrayImage::new(h, w, q)?)?;
            }
            rows.push(row);
        }
    }
    write_csv(&root.join(MANIFEST_FILE), &rows)?;
    Ok(rows)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Data(format!("no manifest at {}", path.display())));
    }
    read_csv(&path)
}

fn resolve(root: &Path, rel: &str) -> PathBuf {
    root.join(rel)
}

pub fn load_row(root: &Path, row: &ManifestRow, num_classes: usize) -> Result<LoadedScene> {
    let image = read_ppm(&resolve(root, &row.image))?;
    let labels = read_pgm(&resolve(root, &row.label))?;
    let mask = read_pgm(&resolve(root, &row.mask))?;
    let (h, w) = (image.height(), image.width());
    for (what, g) in [("label", &labels), ("mask", &mask)] {
        if (g.height, g.width) != (h, w) {
            return Err(Error::Data(format!(
                "{what} raster {}x{} does not match image {h}x{w} ({})",
                g.height, g.width, row.image
            )));
        }
    }
    let distance = match &row.distance {
        Some(p) if !p.is_empty() => {
            let d = read_pgm(&resolve(root, p))?;
            if (d.height, d.width) != (h, w) {
                return Err(Error::Data(format!("distance raster size mismatch ({p})")));
            }
            Some(d.values.iter().map(|&v| v as f64).collect())
        }
        _ => None,
    };
    let sample = SceneSample {
        image,
        labels: LabelMap::new(h, w, num_classes, labels.values)?,
        mask: PixelRoleMask::from_codes(h, w, &mask.values)?,
    };
    sample.validate()?;
    let name = Path::new(&row.image)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(LoadedScene { name, sample, distance })
}

/// All samples of `split`, in manifest order.
pub fn load_split(root: &Path, split: &str, num_classes: usize) -> Result<Vec<LoadedScene>> {
    read_manifest(root)?
        .iter()
        .filter(|r| r.split == split)
        .map(|r| load_row(root, r, num_classes))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct NegativeRow {
    image: String,
    alpha: String,
}

/// Alpha rasters store 255 inside the instance and 0 elsewhere.
pub fn write_negatives(root: &Path, patches: &[NegativePatch]) -> Result<()> {
    fs::create_dir_all(root.join("negatives"))?;
    let mut rows = Vec::with_capacity(patches.len());
    for (i, p) in patches.iter().enumerate() {
        let row = NegativeRow {
            image: format!("negatives/neg_{i:04}.ppm"),
            alpha: format!("negatives/neg_{i:04}_alpha.pgm"),
        };
        write_ppm(&root.join(&row.image), &p.image)?;
        let alpha = p.alpha.iter().map(|&a| if a { 255 } else { 0 }).collect();
        write_pgm(&root.join(&row.alpha), &GrayImage::new(p.height(), p.width(), alpha)?)?;
        rows.push(row);
    }
    write_csv(&root.join(NEGATIVES_FILE), &rows)
}

pub fn read_negatives(root: &Path) -> Result<Vec<NegativePatch>> {
    let path = root.join(NEGATIVES_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_csv::<NegativeRow>(&path)?
        .iter()
        .map(|r| {
            let image = read_ppm(&root.join(&r.image))?;
            let alpha = read_pgm(&root.join(&r.alpha))?;
            if (alpha.height, alpha.width) != (image.height(), image.width()) {
                return Err(Error::Data(format!("alpha size mismatch for {}", r.image)));
            }
            NegativePatch::new(image, alpha.values.iter().map(|&v| v > 127).collect())
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ToyRow {
    split: String,
    x: f64,
    y: f64,
    role: String,
}

pub fn role_name(role: ToyRole) -> String {
    match role {
        ToyRole::Inlier(c) => format!("inlier{c}"),
        ToyRole::Negative => "negative".into(),
        ToyRole::Anomaly => "anomaly".into(),
    }
}

fn parse_role(s: &str) -> Result<ToyRole> {
    match s {
        "negative" => Ok(ToyRole::Negative),
        "anomaly" => Ok(ToyRole::Anomaly),
        _ => s
            .strip_prefix("inlier")
            .and_then(|c| c.parse().ok())
            .map(ToyRole::Inlier)
            .ok_or_else(|| Error::Data(format!("unknown toy role {s:?}"))),
    }
}

pub fn write_toy(path: &Path, train: &ToyPointSet, test: &ToyPointSet) -> Result<()> {
    let rows: Vec<ToyRow> = [("train", train), ("test", test)]
        .iter()
        .flat_map(|(split, set)| {
            set.points.iter().map(move |p| ToyRow {
                split: split.to_string(),
                x: p.x,
                y: p.y,
                role: role_name(p.role),
            })
        })
        .collect();
    write_csv(path, &rows)
}

pub fn read_toy(path: &Path) -> Result<(ToyPointSet, ToyPointSet)> {
    let mut train = ToyPointSet::default();
    let mut test = ToyPointSet::default();
    for r in read_csv::<ToyRow>(path)? {
        let p = ToyPoint {
            x: r.x,
            y: r.y,
            role: parse_role(&r.role)?,
        };
        match r.split.as_str() {
            "train" => train.points.push(p),
            "test" => test.points.push(p),
            other => return Err(Error::Data(format!("unknown toy split {other:?}"))),
        }
    }
    Ok((train, test))
}
