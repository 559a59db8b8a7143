use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity value marking junk images excluded from scoring.
pub const JUNK_IDENTITY: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    /// Directory name in the Market-1501 layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "bounding_box_train",
            Split::Query => "query",
            Split::Gallery => "bounding_box_test",
        }
    }
}

#[derive(Debug, Clone)]
pub enum ImageSource {
    Path(PathBuf),
    Pixels(Arc<RgbImage>),
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    /// File name (Market naming convention), also used for ordering.
    pub name: String,
    pub source: ImageSource,
    pub identity: i64,
    pub camera: u32,
    pub split: Split,
}

impl ImageRecord {
    pub fn is_junk(&self) -> bool {
        self.identity == JUNK_IDENTITY
    }

    pub fn load(&self) -> Result<Arc<RgbImage>> {
        match &self.source {
            ImageSource::Pixels(p) => Ok(Arc::clone(p)),
            ImageSource::Path(path) => image::open(path)
                .map(|img| Arc::new(img.to_rgb8()))
                .map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                }),
        }
    }

    pub fn display_path(&self) -> String {
        match &self.source {
            ImageSource::Path(p) => p.display().to_string(),
            ImageSource::Pixels(_) => self.name.clone(),
        }
    }
}

/// All records of a dataset plus the training-identity bookkeeping.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    records: Vec<ImageRecord>,
    train_by_identity: BTreeMap<i64, Vec<usize>>,
    class_of: BTreeMap<i64, usize>,
}

impl DatasetIndex {
    pub fn from_records(records: Vec<ImageRecord>) -> Result<Self> {
        let mut train_by_identity: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.identity < JUNK_IDENTITY {
                return Err(Error::Data(format!(
                    "record {} has invalid identity {}",
                    r.name, r.identity
                )));
            }
            if r.split == Split::Train && !r.is_junk() {
                train_by_identity.entry(r.identity).or_default().push(i);
            }
        }
        let class_of = train_by_identity
            .keys()
            .enumerate()
            .map(|(c, &id)| (id, c))
            .collect();
        Ok(Self {
            records,
            train_by_identity,
            class_of,
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &ImageRecord {
        &self.records[i]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of distinct training identities, `N_c`.
    pub fn num_classes(&self) -> usize {
        self.train_by_identity.len()
    }

    /// Training identities in ascending order.
    pub fn train_identities(&self) -> impl Iterator<Item = i64> + '_ {
        self.train_by_identity.keys().copied()
    }

    pub fn train_records_of(&self, identity: i64) -> &[usize] {
        self.train_by_identity
            .get(&identity)
            .map_or(&[], Vec::as_slice)
    }

    /// Classifier index of a training identity.
    pub fn class_of(&self, identity: i64) -> Option<usize> {
        self.class_of.get(&identity).copied()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    /// Batches per training "epoch": `floor(N_c / P)`.
    pub fn batches_per_epoch(&self, p: usize) -> usize {
        self.num_classes().checked_div(p).unwrap_or(0)
    }

    /// Appends query/gallery copies of the training records: per identity
    /// and camera the first image becomes a query, the rest join the gallery.
    pub fn with_held_in_split(&self) -> Result<Self> {
        let mut records: Vec<ImageRecord> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .cloned()
            .collect();
        let mut seen = std::collections::BTreeSet::new();
        let extra: Vec<ImageRecord> = records
            .iter()
            .map(|r| {
                let split = if seen.insert((r.identity, r.camera)) {
                    Split::Query
                } else {
                    Split::Gallery
                };
                ImageRecord { split, ..r.clone() }
            })
            .collect();
        records.extend(extra);
        Self::from_records(records)
    }
}

/// Parses `<id>_c<cam>...` file names; `-1` identities are junk.
pub fn parse_market_name(name: &str) -> Option<(i64, u32)> {
    use std::sync::OnceLock;
    static PATTERN: OnceLock<regex::Regex> = OnceLock::new();
    let re = PATTERN.get_or_init(|| regex::Regex::new(r"^(-?\d+)_c(\d+)").expect("valid pattern"));
    let caps = re.captures(name)?;
    let id: i64 = caps[1].parse().ok()?;
    let cam: u32 = caps[2].parse().ok()?;
    (id >= JUNK_IDENTITY).then_some((id, cam))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_market_names() {
        assert_eq!(parse_market_name("0002_c1s1_000451_03.jpg"), Some((2, 1)));
        assert_eq!(parse_market_name("-1_c3s2_011191_05.jpg"), Some((-1, 3)));
        assert_eq!(
            parse_market_name("1501_c6s4_001877_04.jpg"),
            Some((1501, 6))
        );
        assert_eq!(parse_market_name("Thumbs.db"), None);
        assert_eq!(parse_market_name("0002-c1.jpg"), None);
    }

    fn rec(identity: i64, camera: u32, split: Split) -> ImageRecord {
        ImageRecord {
            name: format!("{identity:04}_c{camera}"),
            source: ImageSource::Pixels(Arc::new(RgbImage::new(1, 1))),
            identity,
            camera,
            split,
        }
    }

    #[test]
    fn class_indices_follow_sorted_identities() {
        let idx = DatasetIndex::from_records(vec![
            rec(9, 1, Split::Train),
            rec(3, 2, Split::Train),
            rec(9, 2, Split::Train),
            rec(5, 1, Split::Query),
            rec(-1, 1, Split::Gallery),
        ])
        .unwrap();
        assert_eq!(idx.num_classes(), 2);
        assert_eq!(idx.class_of(3), Some(0));
        assert_eq!(idx.class_of(9), Some(1));
        assert_eq!(idx.class_of(5), None);
        assert_eq!(idx.train_records_of(9), &[0, 2]);
        assert!(idx.record(4).is_junk());
    }

    #[test]
    fn epoch_length_is_floor_of_classes_over_p() {
        let records = (0..751).map(|i| rec(i, 1, Split::Train)).collect();
        let idx = DatasetIndex::from_records(records).unwrap();
        assert_eq!(idx.batches_per_epoch(32), 23);
        assert_eq!(idx.batches_per_epoch(16), 46);
    }

    #[test]
    fn held_in_split_has_one_query_per_identity_camera() {
        let idx = DatasetIndex::from_records(vec![
            rec(1, 1, Split::Train),
            rec(1, 1, Split::Train),
            rec(1, 2, Split::Train),
            rec(2, 1, Split::Train),
        ])
        .unwrap()
        .with_held_in_split()
        .unwrap();
        assert_eq!(idx.count(Split::Train), 4);
        assert_eq!(idx.count(Split::Query), 3);
        assert_eq!(idx.count(Split::Gallery), 1);
    }
}
