//! Market-1501 directory layout: `bounding_box_train/`, `query/` and
//! `bounding_box_test/`, with identity and camera encoded in each file name.

use std::fs;
use std::path::Path;

use super::record::{parse_market_name, DatasetIndex, ImageRecord, ImageSource, Split};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];

fn load_split(root: &Path, split: Split) -> Result<Vec<ImageRecord>> {
    let dir = root.join(split.dir_name());
    if !dir.is_dir() {
        return Err(Error::Data(format!(
            "missing split directory {}",
            dir.display()
        )));
    }
    let mut names: Vec<String> = fs::read_dir(&dir)?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.file_type().map(|t| t.is_file()).unwrap_or(false))
        .filter_map(|entry| entry.file_name().into_string().ok())
        .collect();
    names.sort();
    let mut records = Vec::with_capacity(names.len());
    for name in names {
        let ext_ok = Path::new(&name)
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        let parsed = ext_ok.then(|| parse_market_name(&name)).flatten();
        let Some((identity, camera)) = parsed else {
            log::warn!(
                "skipping {}: not an `<id>_c<cam>` image name",
                dir.join(&name).display()
            );
            continue;
        };
        records.push(ImageRecord {
            source: ImageSource::Path(dir.join(&name)),
            name,
            identity,
            camera,
            split,
        });
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "split directory {} contains no usable images",
            dir.display()
        )));
    }
    Ok(records)
}

/// Indexes a dataset in the Market-1501 layout. Records are ordered by
/// split, then by file name.
pub fn load_dataset_index(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let mut records = Vec::new();
    for split in [Split::Train, Split::Query, Split::Gallery] {
        records.extend(load_split(root, split)?);
    }
    DatasetIndex::from_records(records)
}

/// Indexes only `bounding_box_train/`, for runs that evaluate on the
/// training identities.
pub fn load_training_split(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    DatasetIndex::from_records(load_split(root.as_ref(), Split::Train)?)
}

/// Writes every record as PNG under the Market-1501 layout. In-memory
/// records are encoded; path-backed records are decoded and re-encoded.
pub fn write_market_layout(index: &DatasetIndex, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for split in [Split::Train, Split::Query, Split::Gallery] {
        fs::create_dir_all(root.join(split.dir_name()))?;
    }
    for record in index.records() {
        let pixels = record.load()?;
        let stem = Path::new(&record.name)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&record.name);
        let path = root
            .join(record.split.dir_name())
            .join(format!("{stem}.png"));
        pixels.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
    }
    Ok(())
}
