//! Content-addressed artifact store.
//!
//! Artifacts live in memory and, when the store is rooted at a directory,
//! on disk as `<id>.aimg` plus a `<id>.json` sidecar holding provenance and
//! meta. Several processes may share one directory: files are written to a
//! temporary name and renamed into place, and an id always names the same
//! bytes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::StoreError;
use crate::image::{decode_artifact, ArtifactId, ImageArtifact};

#[derive(Serialize, Deserialize)]
struct Sidecar {
    provenance: String,
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Default)]
pub struct ArtifactStore {
    root: Option<PathBuf>,
    items: RwLock<HashMap<ArtifactId, Arc<ImageArtifact>>>,
    writes: AtomicU64,
}

impl ArtifactStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root: Some(root),
            ..Self::default()
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Stores an image, returning its id. The first stored copy of a given
    /// content wins; later stores of the same content are no-ops.
    pub fn put(&self, image: ImageArtifact) -> Result<ArtifactId, StoreError> {
        image.check()?;
        let id = image.id.clone();
        if self.contains(&id) {
            return Ok(id);
        }
        if let Some(root) = &self.root {
            self.persist(root, &image)?;
        }
        let mut items = self.items.write().expect("store lock poisoned");
        if !items.contains_key(&id) {
            items.insert(id.clone(), Arc::new(image));
            self.writes.fetch_add(1, Ordering::Relaxed);
        }
        Ok(id)
    }

    pub fn get(&self, id: &ArtifactId) -> Result<Arc<ImageArtifact>, StoreError> {
        if let Some(found) = self.items.read().expect("store lock poisoned").get(id) {
            return Ok(found.clone());
        }
        let Some(root) = &self.root else {
            return Err(StoreError::UnknownArtifact(id.to_string()));
        };
        let image = Arc::new(load(root, id)?);
        self.items
            .write()
            .expect("store lock poisoned")
            .entry(id.clone())
            .or_insert_with(|| image.clone());
        Ok(image)
    }

    pub fn contains(&self, id: &ArtifactId) -> bool {
        if self.items.read().expect("store lock poisoned").contains_key(id) {
            return true;
        }
        self.root
            .as_ref()
            .is_some_and(|root| root.join(format!("{id}.aimg")).exists())
    }

    /// Number of distinct artifacts inserted by this handle.
    pub fn distinct_writes(&self) -> u64 {
        self.writes.load(Ordering::Relaxed)
    }

    fn persist(&self, root: &Path, image: &ImageArtifact) -> Result<(), StoreError> {
        let target = root.join(format!("{}.aimg", image.id));
        if target.exists() {
            return Ok(());
        }
        let sidecar = Sidecar {
            provenance: image.provenance.clone(),
            meta: image.meta.clone(),
        };
        let meta_bytes = serde_json::to_vec(&sidecar).expect("sidecar serializes");
        write_atomic(&root.join(format!("{}.json", image.id)), &meta_bytes)?;
        write_atomic(&target, &image.encode())?;
        Ok(())
    }
}

fn load(root: &Path, id: &ArtifactId) -> Result<ImageArtifact, StoreError> {
    let path = root.join(format!("{id}.aimg"));
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(StoreError::UnknownArtifact(id.to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    let mut image = decode_artifact(&bytes)?;
    if &image.id != id {
        return Err(StoreError::CorruptMeta {
            id: id.to_string(),
            message: format!("payload hashes to {}", image.id),
        });
    }
    if let Ok(meta_bytes) = fs::read(root.join(format!("{id}.json"))) {
        let sidecar: Sidecar =
            serde_json::from_slice(&meta_bytes).map_err(|e| StoreError::CorruptMeta {
                id: id.to_string(),
                message: e.to_string(),
            })?;
        image.provenance = sidecar.provenance;
        image.meta = sidecar.meta;
    }
    Ok(image)
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "tmp.{}.{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::content_id;
    use rand::{Rng, SeedableRng};
    use sha2::{Digest, Sha256};

    #[test]
    fn identical_content_same_id_one_copy() {
        let store = ArtifactStore::in_memory();
        let a = store.put(ImageArtifact::new(2, 2, vec![0.0; 4]).unwrap()).unwrap();
        let b = store.put(ImageArtifact::new(2, 2, vec![0.0; 4]).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(store.distinct_writes(), 1);
    }

    #[test]
    fn rejects_out_of_range_pixel() {
        let store = ArtifactStore::in_memory();
        let mut img = ImageArtifact::new(1, 1, vec![0.0]).unwrap();
        img.pixels[0] = 1.5;
        assert!(matches!(
            store.put(img),
            Err(StoreError::Artifact(crate::ArtifactError::InvalidPixel { .. }))
        ));
    }

    #[test]
    fn id_matches_independent_rehash() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(16);
        let pixels: Vec<f32> = (0..256).map(|_| rng.gen::<f32>()).collect();
        // Hand-assembled AIMG1 stream, independent of the encoder.
        let mut stream = b"AIMG1".to_vec();
        stream.extend_from_slice(&[16, 0, 0, 0, 16, 0, 0, 0, 1, 0]);
        for p in &pixels {
            stream.extend_from_slice(&p.to_le_bytes());
        }
        let expected = hex::encode(Sha256::digest(&stream).as_slice());
        let store = ArtifactStore::in_memory();
        let id = store.put(ImageArtifact::new(16, 16, pixels.clone()).unwrap()).unwrap();
        assert_eq!(id.as_str(), expected);
        assert_eq!(content_id(16, 16, 1, &pixels).as_str(), expected);
    }

    #[test]
    fn directory_store_shares_between_handles() {
        let dir = tempfile::tempdir().unwrap();
        let writer = ArtifactStore::open(dir.path()).unwrap();
        let img = ImageArtifact::new(3, 1, vec![0.1, 0.2, 0.3])
            .unwrap()
            .with_meta("scene.seed", "9")
            .with_provenance("test");
        let id = writer.put(img.clone()).unwrap();
        let reader = ArtifactStore::open(dir.path()).unwrap();
        assert!(reader.contains(&id));
        let back = reader.get(&id).unwrap();
        assert_eq!(*back, img);
        let missing = ArtifactId::new("00ff").unwrap();
        assert!(matches!(reader.get(&missing), Err(StoreError::UnknownArtifact(_))));
    }
}
