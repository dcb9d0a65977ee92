//! Flat latent store over the training corpus and exact nearest-neighbour
//! retrieval by L2 distance.

use std::cmp::Ordering;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::ModelBundle;
use crate::error::{Error, Result};
use crate::geometry::l2_unchecked;

pub const INDEX_MAGIC: &[u8; 4] = b"XLIX";
pub const INDEX_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Default neighbour pool size.
pub const DEFAULT_POOL: usize = 50;

fn default_split() -> String {
    "train".into()
}

/// One training record; also the entry format of dataset manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub image_path: String,
    pub label: usize,
    #[serde(default = "default_split")]
    pub split: String,
}

/// Reads a dataset manifest (JSON array of [`RecordMeta`]); relative image
/// paths are resolved against the manifest's directory.
pub fn read_dataset_manifest(path: impl AsRef<Path>) -> Result<Vec<RecordMeta>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries: Vec<RecordMeta> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for e in &mut entries {
        let p = Path::new(&e.image_path);
        if p.is_relative() {
            e.image_path = base.join(p).to_string_lossy().into_owned();
        }
    }
    Ok(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OnUnreadable {
    /// Log and leave the image out of the index.
    Skip,
    #[default]
    Abort,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentIndex {
    dim: usize,
    latents: Vec<f32>,
    meta: Vec<RecordMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub row_id: usize,
    pub distance: f32,
    pub image_path: String,
    pub label: usize,
}

/// Nearest rows, ascending by distance then row id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborPool {
    pub entries: Vec<Neighbor>,
}

impl NeighborPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Computes one latent per manifest entry, in manifest order.
pub fn build_index(bundle: &ModelBundle, entries: &[RecordMeta], on_unreadable: OnUnreadable) -> Result<LatentIndex> {
    let dim = bundle.d_latent();
    let rows: Vec<Result<Option<Vec<f32>>>> = entries
        .par_iter()
        .map(|e| {
            let latent = bundle
                .load_image(&e.image_path)
                .and_then(|img| bundle.forward(&img))
                .map(|p| p.latent.into_inner());
            match (latent, on_unreadable) {
                (Ok(v), _) => Ok(Some(v)),
                (Err(err), OnUnreadable::Skip) => {
                    warn!("skipping {}: {err}", e.image_path);
                    Ok(None)
                }
                (Err(err), OnUnreadable::Abort) => Err(err.at("build-index")),
            }
        })
        .collect();
    let mut latents = Vec::with_capacity(entries.len() * dim);
    let mut meta = Vec::with_capacity(entries.len());
    for (entry, row) in entries.iter().zip(rows) {
        if let Some(v) = row? {
            latents.extend_from_slice(&v);
            meta.push(entry.clone());
        }
    }
    LatentIndex::new(dim, latents, meta)
}

impl LatentIndex {
    pub fn new(dim: usize, latents: Vec<f32>, meta: Vec<RecordMeta>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidValue("index dimension must be > 0".into()));
        }
        if latents.len() != dim * meta.len() {
            return Err(Error::dim("index latents", dim * meta.len(), latents.len()));
        }
        if let Some(at) = latents.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite latent in row {}", at / dim)));
        }
        Ok(LatentIndex { dim, latents, meta })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.latents[row * self.dim..(row + 1) * self.dim]
    }

    pub fn meta(&self, row: usize) -> &RecordMeta {
        &self.meta[row]
    }

    pub fn records(&self) -> &[RecordMeta] {
        &self.meta
    }

    /// The `n` rows closest to `q` (all rows when `n > count`).
    pub fn query(&self, q: &[f32], n: usize) -> Result<NeighborPool> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if q.len() != self.dim {
            return Err(Error::dim("query latent", self.dim, q.len()));
        }
        if n == 0 {
            return Err(Error::Parameter("pool size must be >= 1".into()));
        }
        let mut scored: Vec<(f32, usize)> = self
            .latents
            .par_chunks(self.dim)
            .enumerate()
            .map(|(row, v)| (l2_unchecked(q, v), row))
            .collect();
        let by_distance = |a: &(f32, usize), b: &(f32, usize)| -> Ordering {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        };
        let n = n.min(scored.len());
        if n < scored.len() {
            scored.select_nth_unstable_by(n - 1, by_distance);
            scored.truncate(n);
        }
        scored.sort_unstable_by(by_distance);
        Ok(NeighborPool {
            entries: scored
                .into_iter()
                .map(|(distance, row_id)| Neighbor {
                    row_id,
                    distance,
                    image_path: self.meta[row_id].image_path.clone(),
                    label: self.meta[row_id].label,
                })
                .collect(),
        })
    }

    /// Path of the JSON sidecar holding record metadata.
    pub fn meta_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(HEADER_LEN + self.latents.len() * 4);
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.count() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.latents {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        let meta_path = Self::meta_path(path);
        let json = serde_json::to_vec_pretty(&self.meta)?;
        std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let fail = |offset: usize, reason: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason,
        };
        if bytes.len() < HEADER_LEN {
            return Err(fail(bytes.len(), format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != INDEX_MAGIC {
            return Err(fail(0, "bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(fail(16, "zero dimension".into()));
        }
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| fail(8, "row count overflows".into()))?;
        if bytes.len() != expected {
            return Err(fail(
                bytes.len().min(expected),
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let latents: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let meta_path = Self::meta_path(path);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Vec<RecordMeta> = serde_json::from_str(&text)?;
        if meta.len() != count {
            return Err(fail(8, format!("header count {count} but sidecar has {} records", meta.len())));
        }
        Self::new(dim, latents, meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta(n: usize) -> Vec<RecordMeta> {
        (0..n)
            .map(|k| RecordMeta {
                image_path: format!("img{k}.png"),
                label: k % 3,
                split: "train".into(),
            })
            .collect()
    }

    fn rows(pool: &NeighborPool) -> Vec<usize> {
        pool.entries.iter().map(|e| e.row_id).collect()
    }

    #[test]
    fn one_dimensional_example() {
        let idx = LatentIndex::new(1, vec![1.0, 5.0, 2.0], meta(3)).unwrap();
        let pool = idx.query(&[1.4], 2).unwrap();
        assert_eq!(rows(&pool), vec![0, 2]);
    }

    #[test]
    fn identity_retrieval_and_overlarge_n() {
        let idx = LatentIndex::new(2, vec![0.0, 1.0, 3.0, 3.0, -1.0, 2.0], meta(3)).unwrap();
        let pool = idx.query(&[3.0, 3.0], 10).unwrap();
        assert_eq!(pool.entries[0].row_id, 1);
        assert_eq!(pool.entries[0].distance, 0.0);
        assert_eq!(pool.len(), 3);
    }

    #[test]
    fn ties_break_on_row_id() {
        let idx = LatentIndex::new(1, vec![2.0, 0.0, 2.0, 0.0], meta(4)).unwrap();
        assert_eq!(rows(&idx.query(&[1.0], 4).unwrap()), vec![0, 1, 2, 3]);
    }

    #[test]
    fn query_errors() {
        let empty = LatentIndex::new(4, vec![], vec![]).unwrap();
        assert!(matches!(empty.query(&[0.0; 4], 1), Err(Error::EmptyIndex)));
        let idx = LatentIndex::new(2, vec![0.0; 4], meta(2)).unwrap();
        assert!(matches!(idx.query(&[0.0], 1), Err(Error::Dimension { .. })));
        assert!(matches!(idx.query(&[0.0, 0.0], 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.xlix");
        let idx = LatentIndex::new(2, vec![0.5, -1.0, 3.25, 7.0, 1e-8, 2.0], meta(3)).unwrap();
        idx.save(&path).unwrap();
        assert_eq!(LatentIndex::load(&path).unwrap(), idx);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match LatentIndex::load(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 3),
            other => panic!("expected format error, got {other:?}"),
        }
        std::fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(LatentIndex::load(&path), Err(Error::Format { offset: 10, .. })));
        let mut bad = bytes.clone();
        bad[0] = b'Y';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(LatentIndex::load(&path), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn dataset_manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        std::fs::write(&path, r#"[{"image_path": "a.png", "label": 2}, {"image_path": "/abs/b.png", "label": 0, "split": "val"}]"#).unwrap();
        let entries = read_dataset_manifest(&path).unwrap();
        assert_eq!(entries[0].image_path, dir.path().join("a.png").to_string_lossy());
        assert_eq!(entries[0].split, "train");
        assert_eq!(entries[1].image_path, "/abs/b.png");
    }

    proptest! {
        #[test]
        fn query_is_prefix_monotone(
            vals in proptest::collection::vec(-4i8..4, 3..60),
            q in proptest::collection::vec(-4i8..4, 3),
            n in 1usize..20,
        ) {
            let count = vals.len() / 3;
            prop_assume!(count > 0);
            let latents: Vec<f32> = vals[..count * 3].iter().map(|v| *v as f32).collect();
            let idx = LatentIndex::new(3, latents, meta(count)).unwrap();
            let q: Vec<f32> = q.iter().map(|v| *v as f32).collect();
            let a = idx.query(&q, n).unwrap();
            let b = idx.query(&q, n + 1).unwrap();
            prop_assert_eq!(&b.entries[..a.len()], &a.entries[..]);
            prop_assert!(a.entries.windows(2).all(|w| w[0].distance <= w[1].distance));
        }
    }
}
