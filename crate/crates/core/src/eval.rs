//! Retrieval evaluation: Euclidean distance matrices, CMC curves and mAP
//! under the Market-1501 protocol.
//!
//! For every query the gallery is ranked by ascending distance (ties keep
//! gallery order). Junk gallery entries (identity -1) and entries sharing
//! both identity and camera with the query are removed before scoring.
//! Queries without any remaining same-identity entry do not count.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::JUNK_IDENTITY;
use crate::error::{Error, Result};

/// Identity and camera of each row of a distance matrix side.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalMeta {
    pub identities: Vec<i64>,
    pub cameras: Vec<u32>,
}

impl RetrievalMeta {
    pub fn new(identities: Vec<i64>, cameras: Vec<u32>) -> Result<Self> {
        if identities.len() != cameras.len() {
            return Err(Error::shape(
                "retrieval metadata",
                identities.len(),
                cameras.len(),
            ));
        }
        Ok(Self {
            identities,
            cameras,
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

/// Descriptors with aligned identity/camera metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Array2<f64>,
    pub meta: RetrievalMeta,
}

impl EmbeddingSet {
    pub fn new(vectors: Array2<f64>, identities: Vec<i64>, cameras: Vec<u32>) -> Result<Self> {
        let meta = RetrievalMeta::new(identities, cameras)?;
        if vectors.nrows() != meta.len() {
            return Err(Error::shape("embedding rows", meta.len(), vectors.nrows()));
        }
        if let Some(bad) = vectors.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: "embedding".into(),
                value: *bad,
            });
        }
        Ok(Self { vectors, meta })
    }

    pub fn from_rows(
        rows: &[Array1<f64>],
        identities: Vec<i64>,
        cameras: Vec<u32>,
    ) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::shape("embedding dimension", dim, r.len()));
        }
        let views: Vec<ArrayView1<f64>> = rows.iter().map(|r| r.view()).collect();
        let vectors = if views.is_empty() {
            Array2::zeros((0, 0))
        } else {
            ndarray::stack(Axis(0), &views).expect("equal lengths")
        };
        Self::new(vectors, identities, cameras)
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Mean descriptor per `(identity, camera)`, in order of first appearance.
    pub fn aggregate_by_identity_camera(&self) -> Self {
        let mut order: Vec<(i64, u32)> = Vec::new();
        let mut groups: BTreeMap<(i64, u32), Vec<usize>> = BTreeMap::new();
        for (i, key) in self
            .meta
            .identities
            .iter()
            .copied()
            .zip(self.meta.cameras.iter().copied())
            .enumerate()
        {
            let members = groups.entry(key).or_default();
            if members.is_empty() {
                order.push(key);
            }
            members.push(i);
        }
        let rows: Vec<Array1<f64>> = order
            .iter()
            .map(|key| {
                let members = &groups[key];
                let mut acc = Array1::zeros(self.dim());
                for &i in members {
                    acc += &self.vectors.row(i);
                }
                acc / members.len() as f64
            })
            .collect();
        let (identities, cameras) = order.into_iter().unzip();
        Self::from_rows(&rows, identities, cameras).expect("aggregated rows are consistent")
    }
}

/// `D[i][j] = ||q_i - g_j||_2`.
pub fn pairwise_distances(query: ArrayView2<f64>, gallery: ArrayView2<f64>) -> Result<Array2<f64>> {
    if query.ncols() != gallery.ncols() {
        return Err(Error::shape(
            "descriptor dimension",
            query.ncols(),
            gallery.ncols(),
        ));
    }
    let mut out = Array2::zeros((query.nrows(), gallery.nrows()));
    for (i, q) in query.outer_iter().enumerate() {
        for (j, g) in gallery.outer_iter().enumerate() {
            out[[i, j]] = q
                .iter()
                .zip(g.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    Ok(out)
}

/// Outcome of ranking the gallery for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRanking {
    /// Gallery entries left after junk and same-camera removal.
    pub valid: usize,
    /// 1-based ranks of the relevant entries among the valid ones.
    pub hit_ranks: Vec<usize>,
}

impl QueryRanking {
    pub fn has_positive(&self) -> bool {
        !self.hit_ranks.is_empty()
    }

    pub fn average_precision(&self) -> Option<f64> {
        if self.hit_ranks.is_empty() {
            return None;
        }
        let sum: f64 = self
            .hit_ranks
            .iter()
            .enumerate()
            .map(|(n, &r)| (n + 1) as f64 / r as f64)
            .sum();
        Some(sum / self.hit_ranks.len() as f64)
    }
}

pub fn rank_query(
    distances: ArrayView1<f64>,
    identity: i64,
    camera: u32,
    gallery: &RetrievalMeta,
) -> QueryRanking {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let mut valid = 0;
    let mut hit_ranks = Vec::new();
    for j in order {
        let (gid, gcam) = (gallery.identities[j], gallery.cameras[j]);
        if gid == JUNK_IDENTITY || (gid == identity && gcam == camera) {
            continue;
        }
        valid += 1;
        if gid == identity && identity != JUNK_IDENTITY {
            hit_ranks.push(valid);
        }
    }
    QueryRanking { valid, hit_ranks }
}

fn check_dims(
    dist: &ArrayView2<f64>,
    query: &RetrievalMeta,
    gallery: &RetrievalMeta,
) -> Result<()> {
    if dist.dim() != (query.len(), gallery.len()) {
        return Err(Error::shape(
            "distance matrix",
            (query.len(), gallery.len()),
            dist.dim(),
        ));
    }
    if gallery.is_empty() {
        return Err(Error::Eval("gallery is empty".into()));
    }
    Ok(())
}

pub fn rank_all(
    dist: ArrayView2<f64>,
    query: &RetrievalMeta,
    gallery: &RetrievalMeta,
) -> Result<Vec<QueryRanking>> {
    check_dims(&dist, query, gallery)?;
    Ok(dist
        .outer_iter()
        .enumerate()
        .map(|(i, row)| {
            let r = rank_query(row, query.identities[i], query.cameras[i], gallery);
            if r.valid == 0 {
                log::warn!("query {i} has no valid gallery entries and is dropped");
            }
            r
        })
        .collect())
}

fn cmc_from(rankings: &[QueryRanking], k_max: usize) -> Result<Vec<f64>> {
    if k_max == 0 {
        return Err(Error::Eval("k_max must be at least 1".into()));
    }
    let mut counts = vec![0usize; k_max];
    let mut valid = 0usize;
    for r in rankings.iter().filter(|r| r.has_positive()) {
        valid += 1;
        let first = r.hit_ranks[0];
        if first <= k_max {
            counts[first - 1] += 1;
        }
    }
    if valid == 0 {
        return Err(Error::Eval(
            "no query has a valid positive in the gallery".into(),
        ));
    }
    let mut acc = 0;
    Ok(counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / valid as f64
        })
        .collect())
}

fn map_from(rankings: &[QueryRanking]) -> Result<f64> {
    let aps: Vec<f64> = rankings
        .iter()
        .filter_map(QueryRanking::average_precision)
        .collect();
    if aps.is_empty() {
        return Err(Error::Eval(
            "no query has a valid positive in the gallery".into(),
        ));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// `cmc[k-1]`: fraction of scored queries whose first match is within rank `k`.
pub fn cmc_curve(
    dist: ArrayView2<f64>,
    query: &RetrievalMeta,
    gallery: &RetrievalMeta,
    k_max: usize,
) -> Result<Vec<f64>> {
    cmc_from(&rank_all(dist, query, gallery)?, k_max)
}

pub fn mean_average_precision(
    dist: ArrayView2<f64>,
    query: &RetrievalMeta,
    gallery: &RetrievalMeta,
) -> Result<f64> {
    map_from(&rank_all(dist, query, gallery)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryMode {
    /// One descriptor per query image.
    Single,
    /// Query images sharing identity and camera are averaged into one descriptor.
    Multi,
}

impl std::str::FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(QueryMode::Single),
            "multi" => Ok(QueryMode::Multi),
            other => Err(Error::Config(format!(
                "unknown query mode `{other}` (expected single or multi)"
            ))),
        }
    }
}

impl std::fmt::Display for QueryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QueryMode::Single => "single",
            QueryMode::Multi => "multi",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub identity: i64,
    pub camera: u32,
    /// `None` when the query had no valid positive.
    pub ap: Option<f64>,
    pub first_hit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_query: Vec<QueryResult>,
    pub num_valid_queries: usize,
}

impl EvalReport {
    /// CMC at rank `k` (1-based); ranks beyond the curve repeat its last value.
    pub fn rank(&self, k: usize) -> f64 {
        let i = k.clamp(1, self.cmc.len()) - 1;
        self.cmc[i]
    }

    /// `rank1=`, `rank5=`, `rank10=`, `mAP=` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in [1, 5, 10] {
            let _ = writeln!(s, "rank{k}={:.6}", self.rank(k));
        }
        let _ = writeln!(s, "mAP={:.6}", self.map);
        s
    }

    /// Tab-separated per-query table with a header row.
    pub fn per_query_table(&self) -> String {
        let mut s = String::from("query\tidentity\tcamera\tap\tfirst_hit\n");
        for (i, q) in self.per_query.iter().enumerate() {
            let ap = q.ap.map_or_else(|| "na".to_string(), |v| format!("{v:.6}"));
            let hit = q
                .first_hit
                .map_or_else(|| "na".to_string(), |v| v.to_string());
            let _ = writeln!(s, "{i}\t{}\t{}\t{ap}\t{hit}", q.identity, q.camera);
        }
        s
    }
}

/// Ranks the gallery for every query and summarizes CMC and mAP.
pub fn evaluate(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    mode: QueryMode,
    k_max: usize,
) -> Result<EvalReport> {
    if gallery.is_empty() {
        return Err(Error::Eval("gallery is empty".into()));
    }
    let aggregated;
    let query = match mode {
        QueryMode::Single => query,
        QueryMode::Multi => {
            aggregated = query.aggregate_by_identity_camera();
            &aggregated
        }
    };
    let dist = pairwise_distances(query.vectors.view(), gallery.vectors.view())?;
    let rankings = rank_all(dist.view(), &query.meta, &gallery.meta)?;
    let cmc = cmc_from(&rankings, k_max)?;
    let map = map_from(&rankings)?;
    let per_query = rankings
        .iter()
        .zip(query.meta.identities.iter().zip(&query.meta.cameras))
        .map(|(r, (&identity, &camera))| QueryResult {
            identity,
            camera,
            ap: r.average_precision(),
            first_hit: r.hit_ranks.first().copied(),
        })
        .collect();
    let num_valid_queries = rankings.iter().filter(|r| r.has_positive()).count();
    Ok(EvalReport {
        cmc,
        map,
        per_query,
        num_valid_queries,
    })
}

/// Averages CMC and mAP over several evaluation splits.
pub fn average_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Eval("no reports to average".into()))?;
    let k = first.cmc.len();
    if reports.iter().any(|r| r.cmc.len() != k) {
        return Err(Error::Eval("reports have different CMC lengths".into()));
    }
    let n = reports.len() as f64;
    let cmc = (0..k)
        .map(|i| reports.iter().map(|r| r.cmc[i]).sum::<f64>() / n)
        .collect();
    let map = reports.iter().map(|r| r.map).sum::<f64>() / n;
    Ok(EvalReport {
        cmc,
        map,
        per_query: reports
            .iter()
            .flat_map(|r| r.per_query.iter().cloned())
            .collect(),
        num_valid_queries: reports.iter().map(|r| r.num_valid_queries).sum(),
    })
}

/// One evaluation split: record names for the query and gallery sides.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitFile {
    pub query: Vec<String>,
    pub gallery: Vec<String>,
}

impl SplitFile {
    /// Lines of `query <name>` or `gallery <name>`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut split = SplitFile::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once(char::is_whitespace) {
                Some(("query", name)) => split.query.push(name.trim().to_string()),
                Some(("gallery", name)) => split.gallery.push(name.trim().to_string()),
                _ => {
                    return Err(Error::Data(format!(
                        "split file line {}: expected `query|gallery <name>`",
                        n + 1
                    )))
                }
            }
        }
        Ok(split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn meta(ids: &[i64], cams: &[u32]) -> RetrievalMeta {
        RetrievalMeta::new(ids.to_vec(), cams.to_vec()).unwrap()
    }

    #[test]
    fn three_four_five() {
        let d = pairwise_distances(array![[0.0, 0.0]].view(), array![[3.0, 4.0]].view()).unwrap();
        assert_eq!(d[[0, 0]], 5.0);
    }

    #[test]
    fn self_distances_have_zero_diagonal() {
        let x = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0], [0.0, 0.0, 0.0]];
        let d = pairwise_distances(x.view(), x.view()).unwrap();
        for i in 0..3 {
            assert_eq!(d[[i, i]], 0.0);
            for j in 0..3 {
                assert_eq!(d[[i, j]], d[[j, i]]);
            }
        }
        assert!(pairwise_distances(x.view(), array![[1.0]].view()).is_err());
    }

    #[test]
    fn hand_computed_average_precision() {
        // Relevant items at ranks 1 and 3 among 5.
        let dist = array![[0.1, 0.2, 0.3, 0.4, 0.5]];
        let q = meta(&[7], &[1]);
        let g = meta(&[7, 2, 7, 3, 4], &[2, 2, 2, 2, 2]);
        let map = mean_average_precision(dist.view(), &q, &g).unwrap();
        assert!((map - 5.0 / 6.0).abs() < 1e-15);
        let cmc = cmc_curve(dist.view(), &q, &g, 5).unwrap();
        assert_eq!(cmc, vec![1.0; 5]);
    }

    #[test]
    fn same_camera_and_junk_are_skipped() {
        let dist = array![[0.1, 0.2, 0.3, 0.4]];
        let q = meta(&[7], &[1]);
        // Same id/cam at rank 1 and junk at rank 2 are removed; the true match
        // at rank 4 becomes rank 2.
        let g = meta(&[7, -1, 5, 7], &[1, 2, 2, 3]);
        let r = rank_query(dist.row(0), 7, 1, &g);
        assert_eq!(
            r,
            QueryRanking {
                valid: 2,
                hit_ranks: vec![2]
            }
        );
        assert_eq!(
            cmc_curve(dist.view(), &q, &g, 3).unwrap(),
            vec![0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn queries_without_positives_are_dropped() {
        let dist = array![[0.1, 0.2], [0.1, 0.2]];
        let q = meta(&[1, 9], &[1, 1]);
        let g = meta(&[1, 2], &[2, 2]);
        let cmc = cmc_curve(dist.view(), &q, &g, 2).unwrap();
        assert_eq!(cmc, vec![1.0, 1.0]);
        let none = meta(&[9, 9], &[1, 1]);
        assert!(cmc_curve(dist.view(), &none, &g, 2).is_err());
    }

    #[test]
    fn multi_query_with_singletons_matches_single() {
        let q = EmbeddingSet::new(array![[0.0, 1.0], [2.0, 0.0]], vec![1, 2], vec![1, 1]).unwrap();
        let g = EmbeddingSet::new(
            array![[0.1, 1.0], [2.0, 0.2], [1.0, 1.0]],
            vec![1, 2, 3],
            vec![2, 2, 2],
        )
        .unwrap();
        let a = evaluate(&q, &g, QueryMode::Single, 3).unwrap();
        let b = evaluate(&q, &g, QueryMode::Multi, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rank(1), 1.0);
        assert_eq!(a.map, 1.0);
    }

    #[test]
    fn aggregation_averages_per_identity_camera() {
        let q =
            EmbeddingSet::new(array![[0.0], [2.0], [5.0]], vec![1, 1, 1], vec![1, 1, 2]).unwrap();
        let agg = q.aggregate_by_identity_camera();
        assert_eq!(agg.vectors, array![[1.0], [5.0]]);
        assert_eq!(agg.meta.cameras, vec![1, 2]);
    }

    #[test]
    fn report_text_format() {
        let r = EvalReport {
            cmc: vec![0.5, 0.75],
            map: 0.625,
            per_query: vec![],
            num_valid_queries: 2,
        };
        assert_eq!(
            r.to_text(),
            "rank1=0.500000\nrank5=0.750000\nrank10=0.750000\nmAP=0.625000\n"
        );
    }

    #[test]
    fn empty_gallery_is_an_error() {
        let q = EmbeddingSet::new(array![[0.0]], vec![1], vec![1]).unwrap();
        let g = EmbeddingSet::new(Array2::zeros((0, 1)), vec![], vec![]).unwrap();
        assert!(evaluate(&q, &g, QueryMode::Single, 5).is_err());
    }

    #[test]
    fn split_file_parsing() {
        let s =
            SplitFile::parse("# split 1\nquery a.png\ngallery b.png\n\ngallery c.png\n").unwrap();
        assert_eq!(s.query, vec!["a.png"]);
        assert_eq!(s.gallery, vec!["b.png", "c.png"]);
        assert!(SplitFile::parse("probe x").is_err());
    }
}
