//! On-disk bag datasets: `bags/<bag_id>/<patch_idx>.ppm` (binary 8-bit PPM),
//! `labels.csv` (`bag_id,label`) and `splits.csv` (`bag_id,split`).

use std::collections::HashMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};
use serde::{Deserialize, Serialize};

use crate::augment::ToyImage;
use crate::error::{Error, Result};
use crate::mil::Split;
use crate::prs::BagImages;

pub const LABELS_FILE: &str = "labels.csv";
pub const SPLITS_FILE: &str = "splits.csv";
pub const BAGS_DIR: &str = "bags";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub bags: Vec<BagImages>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn ids_in(&self, split: Split) -> Vec<String> {
        self.bags
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(b, _)| b.id.clone())
            .collect()
    }

    pub fn patches_in(&self, split: Split) -> Vec<ToyImage> {
        self.bags
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .flat_map(|(b, _)| b.patches.iter().cloned())
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    bag_id: String,
    label: u32,
}

#[derive(Serialize, Deserialize)]
struct SplitRow {
    bag_id: String,
    split: Split,
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= u16::MAX as usize
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "bag id {id:?} must be non-empty and use only ASCII letters, digits, '-', '_' or '.'"
        )))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    }
}

/// Quantises each channel to 8 bits.
pub fn write_ppm(image: &ToyImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&bytes, image.width() as u32, image.height() as u32, ExtendedColorType::Rgb8)
        .map_err(|e| image_error(path, e))
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

pub fn read_ppm(path: &Path) -> Result<ToyImage> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    ToyImage::new(w as usize, h as usize, data)
}

/// Writes the dataset under `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    if data.bags.len() != data.splits.len() {
        return Err(Error::invalid("every bag needs exactly one split"));
    }
    let bags_dir = dir.join(BAGS_DIR);
    fs::create_dir_all(&bags_dir).map_err(|e| Error::io(&bags_dir, e))?;
    for bag in &data.bags {
        check_id(&bag.id)?;
        let bag_dir = bags_dir.join(&bag.id);
        fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
        for (i, patch) in bag.patches.iter().enumerate() {
            write_ppm(patch, &bag_dir.join(format!("{i}.ppm")))?;
        }
    }
    let path = dir.join(LABELS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for bag in &data.bags {
        w.serialize(LabelRow {
            bag_id: bag.id.clone(),
            label: bag.label,
        })
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join(SPLITS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for (bag, split) in data.bags.iter().zip(&data.splits) {
        w.serialize(SplitRow {
            bag_id: bag.id.clone(),
            split: *split,
        })
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn patch_files(bag_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut indexed = Vec::new();
    for entry in fs::read_dir(bag_dir).map_err(|e| Error::io(bag_dir, e))? {
        let path = entry.map_err(|e| Error::io(bag_dir, e))?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            let idx: usize = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format {
                    path: path.clone(),
                    reason: "patch file name must be <index>.ppm".into(),
                })?;
            indexed.push((idx, path));
        }
    }
    indexed.sort();
    if indexed.is_empty() || indexed.iter().enumerate().any(|(i, (idx, _))| i != *idx) {
        return Err(Error::Format {
            path: bag_dir.to_path_buf(),
            reason: "patches must be numbered 0..n without gaps".into(),
        });
    }
    Ok(indexed.into_iter().map(|(_, p)| p).collect())
}

/// Bag ids and splits from `splits.csv` alone, in file order.
pub fn read_split_index(dir: &Path) -> Result<Vec<(String, Split)>> {
    let rows: Vec<SplitRow> = read_rows(&dir.join(SPLITS_FILE))?;
    let mut seen = std::collections::HashSet::new();
    rows.into_iter()
        .map(|row| {
            check_id(&row.bag_id)?;
            if !seen.insert(row.bag_id.clone()) {
                return Err(Error::invalid(format!("bag {} listed twice in {SPLITS_FILE}", row.bag_id)));
            }
            Ok((row.bag_id, row.split))
        })
        .collect()
}

/// Ids of `split` in `index`.
pub fn ids_in_split(index: &[(String, Split)], split: Split) -> Vec<String> {
    index.iter().filter(|(_, s)| *s == split).map(|(id, _)| id.clone()).collect()
}

/// Loads bags in `labels.csv` order. Every labelled bag needs a split entry
/// and vice versa.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let labels: Vec<LabelRow> = read_rows(&dir.join(LABELS_FILE))?;
    let split_of: HashMap<String, Split> = read_split_index(dir)?.into_iter().collect();
    if split_of.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{LABELS_FILE} lists {} bags but {SPLITS_FILE} lists {}",
            labels.len(),
            split_of.len()
        )));
    }
    let mut bags = Vec::with_capacity(labels.len());
    let mut splits = Vec::with_capacity(labels.len());
    for row in labels {
        check_id(&row.bag_id)?;
        let split = *split_of
            .get(&row.bag_id)
            .ok_or_else(|| Error::invalid(format!("bag {} has a label but no split", row.bag_id)))?;
        let bag_dir = dir.join(BAGS_DIR).join(&row.bag_id);
        let patches = patch_files(&bag_dir)?
            .iter()
            .map(|p| read_ppm(p))
            .collect::<Result<Vec<_>>>()?;
        bags.push(BagImages {
            id: row.bag_id,
            label: row.label,
            patches,
        });
        splits.push(split);
    }
    Ok(Dataset { bags, splits })
}
