//! On-disk datasets: one `case_NNNN/` directory per volume holding
//! `volume.stuw` (tensors `image` and `labels`, both `f32`) and a
//! `meta.json` sidecar `{spacing, classes}`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::volume::{LabelMap, Volume};
use crate::error::{Error, Result};
use crate::weights::{self, WeightStore};

pub const VOLUME_FILE: &str = "volume.stuw";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub spacing: [f64; 3],
    /// Number of classes including background.
    pub classes: usize,
}

pub fn case_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("case_{index:04}"))
}

pub fn save_volume(dir: &Path, vol: &Volume, classes: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut store = WeightStore::new();
    store.insert("image", vol.image.clone())?;
    store.insert("labels", vol.labels.to_tensor())?;
    weights::save(&store, dir.join(VOLUME_FILE))?;
    let meta = CaseMeta { spacing: vol.spacing, classes };
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn load_volume(dir: &Path) -> Result<(Volume, CaseMeta)> {
    let meta: CaseMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(META_FILE))?)?;
    let store = weights::load(dir.join(VOLUME_FILE))?;
    let get = |name: &str| {
        store.get(name).ok_or_else(|| Error::MissingParameters(vec![format!("{}: {name}", dir.display())]))
    };
    let labels = LabelMap::from_tensor(get("labels")?)?;
    let vol = Volume::new(get("image")?.clone(), labels, meta.spacing)?;
    Ok((vol, meta))
}

pub fn save_dataset(root: &Path, volumes: &[Volume], classes: usize) -> Result<()> {
    for (i, v) in volumes.iter().enumerate() {
        save_volume(&case_dir(root, i), v, classes)?;
    }
    Ok(())
}

/// Case directories under `root`, sorted by name.
pub fn list_cases(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join(META_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// All cases under `root` plus the class count they agree on.
pub fn load_dataset(root: &Path) -> Result<(Vec<Volume>, usize)> {
    let mut vols = Vec::new();
    let mut classes = None;
    for dir in list_cases(root)? {
        let (v, meta) = load_volume(&dir)?;
        match classes {
            None => classes = Some(meta.classes),
            Some(c) if c != meta.classes => {
                return Err(Error::invalid(format!("{} declares {} classes, expected {c}", dir.display(), meta.classes)));
            }
            _ => {}
        }
        vols.push(v);
    }
    let classes = classes.ok_or_else(|| Error::invalid(format!("no cases found under {}", root.display())))?;
    Ok((vols, classes))
}

pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut store = WeightStore::new();
    store.insert("labels", labels.to_tensor())?;
    weights::save(&store, path)
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let store = weights::load(path)?;
    let t = store.get("labels").ok_or_else(|| Error::MissingParameters(vec![format!("{}: labels", path.display())]))?;
    LabelMap::from_tensor(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[2, 3, 3, 3], |i| i as f32 * 0.1);
        let labels = LabelMap::new([3, 3, 3], (0..27).map(|i| (i % 3) as u16).collect()).unwrap();
        let v = Volume::new(img, labels, [1.5, 1.5, 2.0]).unwrap();
        save_dataset(dir.path(), &[v.clone(), v.clone()], 3).unwrap();
        assert!(dir.path().join("case_0001").join("volume.stuw").exists());
        let (back, classes) = load_dataset(dir.path()).unwrap();
        assert_eq!(classes, 3);
        assert_eq!(back, vec![v.clone(), v]);
    }
}
