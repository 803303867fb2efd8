//! On-disk formats: binary embeddings, models and checkpoints, CSV tables.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constraints::Localization;
use crate::model::{
    ClusterModel, ConstraintSet, EmbeddingSet, Eye, FilterClass, HardLink, LinkSource, MetricModel, PatchRecord,
    SoftLink, Split,
};
use crate::{Error, Result};

const EMB_MAGIC: &[u8; 8] = b"TCEMB001";
const MET_MAGIC: &[u8; 8] = b"TCMET001";
const CLU_MAGIC: &[u8; 8] = b"TCCLU001";

struct Reader<R> {
    inner: R,
    path: String,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::format(&self.path, format!("truncated: {e}")))?;
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn len(&mut self, what: &str, limit: u64) -> Result<usize> {
        let v = self.u64()?;
        if v > limit {
            return Err(Error::format(&self.path, format!("implausible {what} {v}")));
        }
        Ok(v as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut raw = vec![0u8; n * 4];
        self.inner
            .read_exact(&mut raw)
            .map_err(|e| Error::format(&self.path, format!("truncated: {e}")))?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let m: [u8; 8] = self.bytes()?;
        if &m != expected {
            return Err(Error::format(
                &self.path,
                format!("bad magic, expected {}", String::from_utf8_lossy(expected)),
            ));
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        let mut rest = [0u8; 1];
        match self.inner.read(&mut rest)? {
            0 => Ok(()),
            _ => Err(Error::format(&self.path, "trailing bytes")),
        }
    }
}

fn open(path: &Path) -> Result<Reader<BufReader<File>>> {
    Ok(Reader {
        inner: BufReader::new(File::open(path)?),
        path: path.display().to_string(),
    })
}

const MAX_LEN: u64 = 1 << 40;

/// `TCEMB001`, `n`, `dim` (u64 LE), f32 LE values row-major, then `n` u64
/// patch ids.
pub fn write_embeddings(path: &Path, emb: &EmbeddingSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EMB_MAGIC)?;
    w.write_all(&(emb.n_patches() as u64).to_le_bytes())?;
    w.write_all(&(emb.dim as u64).to_le_bytes())?;
    for v in &emb.values {
        w.write_all(&v.to_le_bytes())?;
    }
    for id in &emb.patch_ids {
        w.write_all(&id.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let mut r = open(path)?;
    r.magic(EMB_MAGIC)?;
    let n = r.len("row count", MAX_LEN)?;
    let dim = r.len("dimension", MAX_LEN)?;
    let values = r.f32s(n.checked_mul(dim).ok_or_else(|| Error::format(path, "size overflow"))?)?;
    let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    EmbeddingSet::new(dim, values, ids)
}

/// `TCMET001`, `in_dim`, `out_dim` (u64 LE), then `W` and `b` as f32 LE.
pub fn write_metric(path: &Path, m: &MetricModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MET_MAGIC)?;
    w.write_all(&(m.in_dim as u64).to_le_bytes())?;
    w.write_all(&(m.out_dim as u64).to_le_bytes())?;
    for v in m.weights.iter().chain(&m.bias) {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Training hyperparameters are not stored and take the defaults.
pub fn read_metric(path: &Path) -> Result<MetricModel> {
    let mut r = open(path)?;
    r.magic(MET_MAGIC)?;
    let din = r.len("input width", 1 << 20)?;
    let dout = r.len("output width", 1 << 20)?;
    let mut m = MetricModel::identity(din, dout).map_err(|e| Error::format(path, e.to_string()))?;
    m.weights = r.f32s(din * dout)?.into_iter().map(f64::from).collect();
    m.bias = r.f32s(dout)?.into_iter().map(f64::from).collect();
    r.finish()?;
    Ok(m)
}

/// `TCCLU001`, `k`, `dim`, `n` (u64 LE), centroids (f64 LE), assignments
/// (u32 LE), objective (f64 LE), iterations (u64 LE).
pub fn write_cluster_model(path: &Path, m: &ClusterModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CLU_MAGIC)?;
    for v in [m.k, m.dim, m.assignments.len()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for c in &m.centroids {
        w.write_all(&c.to_le_bytes())?;
    }
    for a in &m.assignments {
        w.write_all(&a.to_le_bytes())?;
    }
    w.write_all(&m.objective.to_le_bytes())?;
    w.write_all(&(m.iterations_run as u64).to_le_bytes())?;
    w.flush()?;
    Ok(())
}

/// Chunklets and the objective trace are not stored.
pub fn read_cluster_model(path: &Path) -> Result<ClusterModel> {
    let mut r = open(path)?;
    r.magic(CLU_MAGIC)?;
    let k = r.len("k", 1 << 32)?;
    let dim = r.len("dimension", 1 << 32)?;
    let n = r.len("row count", MAX_LEN)?;
    let centroids = r.f64s(k * dim)?;
    let assignments = (0..n)
        .map(|_| Ok(u32::from_le_bytes(r.bytes()?)))
        .collect::<Result<Vec<_>>>()?;
    let objective = f64::from_le_bytes(r.bytes()?);
    let iterations_run = r.u64()? as usize;
    r.finish()?;
    if assignments.iter().any(|&a| a as usize >= k) {
        return Err(Error::format(path, "assignment outside 0..k"));
    }
    Ok(ClusterModel {
        k,
        dim,
        centroids,
        assignments,
        chunklets: Vec::new(),
        objective,
        iterations_run,
        objective_trace: Vec::new(),
    })
}

#[derive(Serialize, Deserialize)]
struct ConstraintRow {
    kind: String,
    a: u64,
    b: u64,
    value: String,
}

/// Rows `hard,a,b,<source>`, `soft,a,b,<confidence>` and
/// `cannot,a,b,<weight>` under a `kind,a,b,value` header.
pub fn write_constraints(path: &Path, set: &ConstraintSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for l in &set.hard_links {
        w.serialize(ConstraintRow {
            kind: "hard".into(),
            a: l.a,
            b: l.b,
            value: l.source.to_string(),
        })?;
    }
    for (kind, links) in [("soft", &set.soft_links), ("cannot", &set.cannot_links)] {
        for l in links {
            w.serialize(ConstraintRow {
                kind: kind.into(),
                a: l.a,
                b: l.b,
                value: format!("{:?}", l.confidence),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_constraints(path: &Path) -> Result<ConstraintSet> {
    let mut set = ConstraintSet::default();
    let mut rdr = csv::Reader::from_path(path)?;
    for (line, row) in rdr.deserialize::<ConstraintRow>().enumerate() {
        let row = row?;
        let bad = |what: &str| Error::format(path, format!("row {}: {what}", line + 2));
        let weight = || -> Result<f64> {
            let w: f64 = row.value.parse().map_err(|_| bad("confidence is not a number"))?;
            if !(w > 0.0 && w <= 1.0) {
                return Err(bad("confidence outside (0, 1]"));
            }
            Ok(w)
        };
        match row.kind.as_str() {
            "hard" => set.hard_links.push(HardLink {
                a: row.a,
                b: row.b,
                source: row.value.parse().map_err(|_| bad("unknown link source"))?,
            }),
            "soft" => set.soft_links.push(SoftLink {
                a: row.a,
                b: row.b,
                confidence: weight()?,
                source: LinkSource::Neighbor,
            }),
            "cannot" => set.cannot_links.push(SoftLink {
                a: row.a,
                b: row.b,
                confidence: weight()?,
                source: LinkSource::Neighbor,
            }),
            other => return Err(bad(&format!("unknown kind {other:?}"))),
        }
    }
    Ok(set)
}

#[derive(Serialize, Deserialize)]
struct PatchRow {
    patch_id: u64,
    image_id: u64,
    center_row: i64,
    center_col: i64,
    patch_size: u32,
    depth_mean: f32,
    site: i64,
    drive: i64,
    pose: i64,
    rsm_count: i64,
    eye: Eye,
    filter_class: FilterClass,
    split: Split,
}

/// Patch table without per-pixel depth (re-derived from depth maps on load
/// when needed).
pub fn write_patches(path: &Path, patches: &[PatchRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in patches {
        w.serialize(PatchRow {
            patch_id: p.patch_id,
            image_id: p.image_id,
            center_row: p.center_row,
            center_col: p.center_col,
            patch_size: p.patch_size,
            depth_mean: p.depth_mean,
            site: p.site,
            drive: p.drive,
            pose: p.pose,
            rsm_count: p.rsm_count,
            eye: p.eye,
            filter_class: p.filter_class,
            split: p.split,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_patches(path: &Path) -> Result<Vec<PatchRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize::<PatchRow>()
        .map(|row| {
            let r = row?;
            Ok(PatchRecord {
                patch_id: r.patch_id,
                image_id: r.image_id,
                center_row: r.center_row,
                center_col: r.center_col,
                patch_size: r.patch_size,
                depth_pixels: None,
                depth_mean: r.depth_mean,
                site: r.site,
                drive: r.drive,
                pose: r.pose,
                rsm_count: r.rsm_count,
                eye: r.eye,
                filter_class: r.filter_class,
                split: r.split,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    patch_id: u64,
    label: u32,
}

#[derive(Serialize, Deserialize)]
struct AssignmentRow {
    patch_id: u64,
    cluster: u32,
}

/// `patch_id,cluster` rows in the given order.
pub fn write_assignments(path: &Path, patch_ids: &[u64], assignments: &[u32]) -> Result<()> {
    if patch_ids.len() != assignments.len() {
        return Err(Error::arg("patch ids and assignments differ in length"));
    }
    let mut w = csv::Writer::from_path(path)?;
    for (&patch_id, &cluster) in patch_ids.iter().zip(assignments) {
        w.serialize(AssignmentRow { patch_id, cluster })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_assignments(path: &Path) -> Result<Vec<(u64, u32)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize::<AssignmentRow>()
        .map(|r| r.map(|r| (r.patch_id, r.cluster)).map_err(Error::from))
        .collect()
}

/// `patch_id,label` rows.
pub fn write_labels(path: &Path, labels: &[(u64, u32)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for &(patch_id, label) in labels {
        w.serialize(LabelRow { patch_id, label })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<HashMap<u64, u32>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize::<LabelRow>()
        .map(|r| r.map(|r| (r.patch_id, r.label)).map_err(Error::from))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct MatchRow {
    left_image: u64,
    right_image: u64,
    row: f64,
    col: f64,
    scale_row: f64,
    scale_col: f64,
    score: f64,
}

/// Externally computed stereo localizations, one row per (left, right)
/// image pair: `left_image,right_image,row,col,scale_row,scale_col,score`.
pub fn read_lr_matches(path: &Path) -> Result<HashMap<(u64, u64), Localization>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize::<MatchRow>()
        .map(|r| {
            let r = r?;
            Ok((
                (r.left_image, r.right_image),
                Localization {
                    row: r.row,
                    col: r.col,
                    scale_row: r.scale_row,
                    scale_col: r.scale_col,
                    score: r.score,
                },
            ))
        })
        .collect()
}

pub fn write_lr_matches(path: &Path, matches: &[((u64, u64), Localization)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for &((left_image, right_image), l) in matches {
        w.serialize(MatchRow {
            left_image,
            right_image,
            row: l.row,
            col: l.col,
            scale_row: l.scale_row,
            scale_col: l.scale_col,
            score: l.score,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::patch;

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let emb = EmbeddingSet::new(2, vec![1.0, -2.5, 3.25, 0.0], vec![7, 9]).unwrap();
        write_embeddings(&path, &emb).unwrap();
        assert_eq!(read_embeddings(&path).unwrap(), emb);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"TCEMB001");
        assert_eq!(bytes.len(), 8 + 16 + 16 + 16);
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn metric_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut m = MetricModel::identity(3, 2).unwrap();
        m.weights[1] = 0.5;
        m.bias[1] = -1.0;
        write_metric(&path, &m).unwrap();
        assert_eq!(read_metric(&path).unwrap(), m);
    }

    #[test]
    fn constraints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let set = ConstraintSet {
            hard_links: vec![HardLink {
                a: 1,
                b: 2,
                source: LinkSource::Rsm,
            }],
            soft_links: vec![SoftLink {
                a: 3,
                b: 4,
                confidence: 0.8123456789,
                source: LinkSource::Neighbor,
            }],
            cannot_links: vec![],
        };
        write_constraints(&path, &set).unwrap();
        assert_eq!(read_constraints(&path).unwrap(), set);
        std::fs::write(&path, "kind,a,b,value\nsoft,1,2,1.5\n").unwrap();
        assert!(read_constraints(&path).is_err());
    }

    #[test]
    fn patches_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let ps = vec![patch(0, 0, 64, 64, 128), patch(1, 2, 96, 64, 64)];
        write_patches(&path, &ps).unwrap();
        assert_eq!(read_patches(&path).unwrap(), ps);
    }
}
