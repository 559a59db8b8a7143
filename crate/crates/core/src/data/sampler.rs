use rand::seq::index;
use rand::Rng;

use super::record::{DatasetIndex, ImageRecord};
use crate::error::{Error, Result};

/// Identity-balanced mini-batch: `p` identities with `k` records each,
/// stored identity-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkBatch {
    pub p: usize,
    pub k: usize,
    /// Indices into the dataset records.
    pub records: Vec<usize>,
    pub identities: Vec<i64>,
}

impl PkBatch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter_records<'a>(
        &'a self,
        index: &'a DatasetIndex,
    ) -> impl Iterator<Item = &'a ImageRecord> + 'a {
        self.records.iter().map(move |&i| index.record(i))
    }

    /// Each of `p` distinct identities appears exactly `k` times.
    pub fn check(&self) -> Result<()> {
        let mut counts = std::collections::BTreeMap::<i64, usize>::new();
        for &id in &self.identities {
            *counts.entry(id).or_default() += 1;
        }
        if self.records.len() != self.p * self.k
            || counts.len() != self.p
            || counts.values().any(|&c| c != self.k)
        {
            return Err(Error::BatchStructure(format!(
                "expected {} identities x {} images, got counts {counts:?}",
                self.p, self.k
            )));
        }
        Ok(())
    }
}

/// Draws `p` distinct training identities, then `k` of their images. An
/// identity with fewer than `k` images is sampled with replacement.
pub fn pk_sample<R: Rng + ?Sized>(
    index: &DatasetIndex,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<PkBatch> {
    if p == 0 {
        return Err(Error::Config("P must be at least 1".into()));
    }
    if k < 2 {
        return Err(Error::Config(format!(
            "K must be at least 2 so anchors have positives, got {k}"
        )));
    }
    let ids: Vec<i64> = index.train_identities().collect();
    if p > ids.len() {
        return Err(Error::Config(format!(
            "P = {p} exceeds the {} available training identities",
            ids.len()
        )));
    }
    let mut records = Vec::with_capacity(p * k);
    let mut identities = Vec::with_capacity(p * k);
    for pick in index::sample(rng, ids.len(), p) {
        let id = ids[pick];
        let pool = index.train_records_of(id);
        if pool.len() >= k {
            records.extend(
                index::sample(rng, pool.len(), k)
                    .into_iter()
                    .map(|j| pool[j]),
            );
        } else {
            records.extend((0..k).map(|_| pool[rng.random_range(0..pool.len())]));
        }
        identities.extend(std::iter::repeat_n(id, k));
    }
    Ok(PkBatch {
        p,
        k,
        records,
        identities,
    })
}
