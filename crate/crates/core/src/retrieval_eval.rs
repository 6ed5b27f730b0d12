//! Fused query-gallery distances, CMC/mAP under the cross-camera protocol,
//! ranked-list export and the feature file container.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::checkpoint::Reader;
use crate::error::{Error, Result};

/// One image's retrieval features and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryRecord {
    pub final_: Vec<f64>,
    pub backbone: Vec<f64>,
    pub identity: i64,
    pub camera: u32,
    pub path: String,
}

impl GalleryRecord {
    /// Copy with both feature rows scaled to unit length (zero rows kept).
    pub fn l2_normalized(&self) -> Self {
        let unit = |v: &[f64]| -> Vec<f64> {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter().map(|x| x / n).collect()
            } else {
                v.to_vec()
            }
        };
        Self {
            final_: unit(&self.final_),
            backbone: unit(&self.backbone),
            ..self.clone()
        }
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `||F_final^q - F_final^g|| + alpha * ||F_BB^q - F_BB^g||`.
pub fn fused_distance(q: &GalleryRecord, g: &GalleryRecord, alpha: f64) -> Result<f64> {
    if q.final_.len() != g.final_.len() || q.backbone.len() != g.backbone.len() {
        return Err(Error::Validation(format!(
            "record dims ({}, {}) vs ({}, {})",
            q.final_.len(),
            q.backbone.len(),
            g.final_.len(),
            g.backbone.len()
        )));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Validation(format!("alpha {alpha} must be finite and >= 0")));
    }
    Ok(euclidean(&q.final_, &g.final_) + alpha * euclidean(&q.backbone, &g.backbone))
}

/// Row-major `queries x gallery` distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    pub alpha: f64,
}

impl DistanceMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, alpha: f64) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Validation(
                "distance matrix must be non-empty and rectangular".into(),
            ));
        }
        if rows.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation("distances must be finite and nonnegative".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values: rows.concat(),
            alpha,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.rows
    }

    pub fn num_gallery(&self) -> usize {
        self.cols
    }

    pub fn get(&self, q: usize, g: usize) -> f64 {
        self.values[q * self.cols + g]
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.values[q * self.cols..(q + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let rows = (0..self.rows)
            .map(|q| self.row(q).iter().map(|&v| f(v)).collect())
            .collect();
        Self::from_rows(rows, self.alpha)
    }
}

pub fn distance_matrix(queries: &[GalleryRecord], gallery: &[GalleryRecord], alpha: f64) -> Result<DistanceMatrix> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Validation("query and gallery sets must be non-empty".into()));
    }
    let rows = queries
        .iter()
        .map(|q| gallery.iter().map(|g| fused_distance(q, g, alpha)).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    DistanceMatrix::from_rows(rows, alpha)
}

/// Protocol switches for [`cmc_map_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Protocol {
    /// Drop gallery entries sharing both identity and camera with the query.
    pub exclude_same_camera: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            exclude_same_camera: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    /// `cmc[k]` is the fraction of valid queries matched within the top `k + 1`.
    pub cmc: Vec<f64>,
    /// Average precision of each valid query, in query order.
    pub average_precisions: Vec<f64>,
    /// Indices of the queries that were scored.
    pub valid_queries: Vec<usize>,
    /// Queries without any valid positive after exclusion.
    pub skipped: usize,
}

impl EvalResult {
    /// `key = value` lines, keys prefixed with `prefix`.
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{prefix}rank1 = {}", self.rank1);
        let _ = writeln!(s, "{prefix}rank5 = {}", self.rank5);
        let _ = writeln!(s, "{prefix}rank10 = {}", self.rank10);
        let _ = writeln!(s, "{prefix}map = {}", self.map);
        let _ = writeln!(s, "{prefix}valid_queries = {}", self.valid_queries.len());
        let _ = writeln!(s, "{prefix}skipped_queries = {}", self.skipped);
        s
    }
}

pub fn cmc_map(
    dist: &DistanceMatrix,
    q_ids: &[i64],
    q_cams: &[u32],
    g_ids: &[i64],
    g_cams: &[u32],
) -> Result<EvalResult> {
    cmc_map_with(dist, q_ids, q_cams, g_ids, g_cams, Protocol::default())
}

/// CMC and mAP. Per query: drop junk gallery entries (same identity and
/// camera) when the protocol asks for it, rank the rest by ascending distance
/// with ties broken by gallery index, then score. AP averages the precision
/// at each correct hit. Queries with no positive left are skipped.
pub fn cmc_map_with(
    dist: &DistanceMatrix,
    q_ids: &[i64],
    q_cams: &[u32],
    g_ids: &[i64],
    g_cams: &[u32],
    protocol: Protocol,
) -> Result<EvalResult> {
    let (nq, ng) = (dist.num_queries(), dist.num_gallery());
    if q_ids.len() != nq || q_cams.len() != nq || g_ids.len() != ng || g_cams.len() != ng {
        return Err(Error::Validation(format!(
            "label tables ({}, {}, {}, {}) do not match a {nq}x{ng} matrix",
            q_ids.len(),
            q_cams.len(),
            g_ids.len(),
            g_cams.len()
        )));
    }
    let mut hits_at = vec![0usize; ng];
    let mut aps = Vec::new();
    let mut valid = Vec::new();
    let mut skipped = 0;
    let mut order: Vec<usize> = Vec::with_capacity(ng);
    for q in 0..nq {
        let row = dist.row(q);
        order.clear();
        order.extend(
            (0..ng).filter(|&j| !(protocol.exclude_same_camera && g_ids[j] == q_ids[q] && g_cams[j] == q_cams[q])),
        );
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let positives = order.iter().filter(|&&j| g_ids[j] == q_ids[q]).count();
        if positives == 0 {
            skipped += 1;
            continue;
        }
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (pos, &j) in order.iter().enumerate() {
            if g_ids[j] == q_ids[q] {
                found += 1;
                precision_sum += found as f64 / (pos + 1) as f64;
                first.get_or_insert(pos);
            }
        }
        if let Some(f) = first {
            hits_at[f] += 1;
        }
        aps.push(precision_sum / positives as f64);
        valid.push(q);
    }
    if valid.is_empty() {
        log::warn!("no query has a valid positive; all {skipped} skipped");
    } else if skipped > 0 {
        log::warn!("{skipped} queries had no valid positive and were skipped");
    }
    let denom = valid.len().max(1) as f64;
    let mut cmc = Vec::with_capacity(ng);
    let mut acc = 0usize;
    for h in hits_at {
        acc += h;
        cmc.push(acc as f64 / denom);
    }
    let at = |k: usize| cmc[k.min(ng) - 1];
    Ok(EvalResult {
        rank1: at(1),
        rank5: at(5),
        rank10: at(10),
        map: aps.iter().sum::<f64>() / denom,
        cmc,
        average_precisions: aps,
        valid_queries: valid,
        skipped,
    })
}

/// One line of an exported ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingRow {
    pub rank: usize,
    pub gallery_index: usize,
    pub path: String,
    pub distance: f64,
    pub correct: bool,
}

/// Top-`k` gallery entries for one query, by ascending distance with ties
/// broken by gallery index. No junk exclusion is applied.
pub fn export_ranking(
    query_index: usize,
    dist: &DistanceMatrix,
    query: &GalleryRecord,
    gallery: &[GalleryRecord],
    k: usize,
) -> Result<Vec<RankingRow>> {
    if query_index >= dist.num_queries() {
        return Err(Error::Validation(format!(
            "query index {query_index} out of range for {} queries",
            dist.num_queries()
        )));
    }
    if gallery.len() != dist.num_gallery() {
        return Err(Error::Validation("gallery records do not match the matrix".into()));
    }
    if k == 0 || k > gallery.len() {
        return Err(Error::Validation(format!("k = {k} must be in 1..={}", gallery.len())));
    }
    let row = dist.row(query_index);
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
    Ok(order
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(r, j)| RankingRow {
            rank: r + 1,
            gallery_index: j,
            path: gallery[j].path.clone(),
            distance: row[j],
            correct: gallery[j].identity == query.identity,
        })
        .collect())
}

/// Tab-separated ranking with a header line.
pub fn ranking_tsv(rows: &[RankingRow]) -> String {
    let mut s = String::from("rank\tgallery_index\tpath\tdistance\tcorrect\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            r.rank,
            r.gallery_index,
            r.path,
            r.distance,
            if r.correct { "correct" } else { "incorrect" }
        );
    }
    s
}

const FEATURE_MAGIC: &[u8; 8] = b"OCNETFEA";
const FEATURE_VERSION: u32 = 1;

/// Feature file: a set of records plus the alpha they are meant to be fused
/// with.
///
/// Layout (little-endian):
///
/// ```text
/// magic "OCNETFEA", version u32,
/// final_dim u32, backbone_dim u32, count u64, alpha f64,
/// count x final_dim f64, count x backbone_dim f64,
/// count x i64 identity, count x u32 camera,
/// count x (u32 length + UTF-8 path)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub alpha: f64,
    pub records: Vec<GalleryRecord>,
}

impl FeatureFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let fd = self.records.first().map_or(0, |r| r.final_.len());
        let bd = self.records.first().map_or(0, |r| r.backbone.len());
        if self
            .records
            .iter()
            .any(|r| r.final_.len() != fd || r.backbone.len() != bd)
        {
            return Err(Error::Validation("records have inconsistent dims".into()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(fd as u32).to_le_bytes());
        out.extend_from_slice(&(bd as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.alpha.to_le_bytes());
        for r in &self.records {
            r.final_.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for r in &self.records {
            r.backbone.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for r in &self.records {
            out.extend_from_slice(&r.identity.to_le_bytes());
        }
        for r in &self.records {
            out.extend_from_slice(&r.camera.to_le_bytes());
        }
        for r in &self.records {
            out.extend_from_slice(&(r.path.len() as u32).to_le_bytes());
            out.extend_from_slice(r.path.as_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != FEATURE_MAGIC {
            return Err(Error::Format("not a feature file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!("unsupported feature file version {version}")));
        }
        let fd = r.u32()? as usize;
        let bd = r.u32()? as usize;
        let count = r.u64()? as usize;
        let alpha = r.f64()?;
        let mut read_rows =
            |dim: usize| -> Result<Vec<Vec<f64>>> { (0..count).map(|_| (0..dim).map(|_| r.f64()).collect()).collect() };
        let finals = read_rows(fd)?;
        let backbones = read_rows(bd)?;
        let ids = (0..count).map(|_| r.i64()).collect::<Result<Vec<_>>>()?;
        let cams = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let mut paths = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            paths.push(r.string(len)?);
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes in feature file".into()));
        }
        let records = finals
            .into_iter()
            .zip(backbones)
            .zip(ids.into_iter().zip(cams))
            .zip(paths)
            .map(|(((final_, backbone), (identity, camera)), path)| GalleryRecord {
                final_,
                backbone,
                identity,
                camera,
                path,
            })
            .collect();
        Ok(Self { alpha, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(final_: &[f64], backbone: &[f64], identity: i64, camera: u32) -> GalleryRecord {
        GalleryRecord {
            final_: final_.to_vec(),
            backbone: backbone.to_vec(),
            identity,
            camera,
            path: format!("{identity}_{camera}.png"),
        }
    }

    #[test]
    fn fused_distance_hand_values() {
        let q = rec(&[0., 0.], &[0., 0., 0.], 1, 1);
        let g = rec(&[3., 0.], &[0., 4., 0.], 1, 2);
        assert_eq!(fused_distance(&q, &q, 1.0).unwrap(), 0.0);
        assert_eq!(fused_distance(&q, &g, 0.0).unwrap(), 3.0);
        assert_eq!(fused_distance(&q, &g, 1.0).unwrap(), 7.0);
        let bad = rec(&[0.], &[0., 0., 0.], 1, 1);
        assert!(fused_distance(&q, &bad, 1.0).is_err());
        assert!(fused_distance(&q, &g, -1.0).is_err());
    }

    #[test]
    fn matrix_basics() {
        let recs = vec![rec(&[1.], &[2.], 1, 1), rec(&[4.], &[6.], 2, 1)];
        let m = distance_matrix(&recs, &recs, 1.0).unwrap();
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(1, 1), 0.0);
        assert_eq!(m.get(0, 1), 7.0);
        let one = distance_matrix(&recs[..1], &recs[1..], 1.0).unwrap();
        assert_eq!(one.get(0, 0), fused_distance(&recs[0], &recs[1], 1.0).unwrap());
        assert!(distance_matrix(&[], &recs, 1.0).is_err());
    }

    #[test]
    fn single_query_cases() {
        let d = DistanceMatrix::from_rows(vec![vec![0.1, 0.9]], 1.0).unwrap();
        let r = cmc_map(&d, &[5], &[1], &[5, 7], &[2, 2]).unwrap();
        assert_eq!((r.rank1, r.map), (1.0, 1.0));
        let r = cmc_map(&d, &[5], &[1], &[7, 5], &[2, 2]).unwrap();
        assert_eq!((r.rank1, r.map), (0.0, 0.5));
        assert_eq!(r.rank5, 1.0);
    }

    #[test]
    fn same_camera_positives_are_junk() {
        let d = DistanceMatrix::from_rows(vec![vec![0.0, 0.5, 0.2]], 1.0).unwrap();
        let r = cmc_map(&d, &[1], &[1], &[1, 1, 2], &[1, 2, 1]).unwrap();
        assert_eq!(r.rank1, 0.0);
        assert_eq!(r.map, 0.5);
        let r = cmc_map(&d, &[1], &[1], &[1, 3, 2], &[1, 2, 1]).unwrap();
        assert_eq!(r.skipped, 1);
        assert!(r.valid_queries.is_empty());
        let open = Protocol {
            exclude_same_camera: false,
        };
        let r = cmc_map_with(&d, &[1], &[1], &[1, 3, 2], &[1, 2, 1], open).unwrap();
        assert_eq!(r.rank1, 1.0);
    }

    #[test]
    fn ties_follow_gallery_order() {
        let d = DistanceMatrix::from_rows(vec![vec![0.3, 0.3]], 1.0).unwrap();
        let r = cmc_map(&d, &[1], &[1], &[2, 1], &[2, 2]).unwrap();
        assert_eq!(r.rank1, 0.0);
        let r = cmc_map(&d, &[1], &[1], &[1, 2], &[2, 2]).unwrap();
        assert_eq!(r.rank1, 1.0);
    }

    #[test]
    fn ranking_export() {
        let gallery = vec![
            rec(&[2.], &[0.], 1, 1),
            rec(&[0.], &[0.], 2, 1),
            rec(&[1.], &[0.], 2, 2),
        ];
        let query = rec(&[0.], &[0.], 2, 1);
        let d = distance_matrix(std::slice::from_ref(&query), &gallery, 1.0).unwrap();
        let rows = export_ranking(0, &d, &query, &gallery, 1).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(
            (rows[0].gallery_index, rows[0].distance, rows[0].correct),
            (1, 0.0, true)
        );
        let rows = export_ranking(0, &d, &query, &gallery, 3).unwrap();
        assert_eq!(rows.iter().map(|r| r.gallery_index).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert!(!rows[2].correct);
        let tsv = ranking_tsv(&rows);
        assert_eq!(tsv.lines().count(), 4);
        assert!(tsv.lines().nth(3).unwrap().ends_with("\tincorrect"));
        assert!(export_ranking(1, &d, &query, &gallery, 1).is_err());
        assert!(export_ranking(0, &d, &query, &gallery, 4).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let f = FeatureFile {
            alpha: 0.75,
            records: vec![rec(&[1., -2.], &[0.5], 3, 2), rec(&[0., 9.], &[-1.], -1, 6)],
        };
        let bytes = f.encode().unwrap();
        assert_eq!(FeatureFile::decode(&bytes).unwrap(), f);
        assert!(FeatureFile::decode(&bytes[..bytes.len() - 2]).is_err());
    }
}
