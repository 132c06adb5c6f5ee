//! Datasets: loading, augmentation, balancing, splits and synthetic data.
//!
//! Images are `c×h×w` tensors with values in `[0, 1]`. The network sees
//! them remapped to `[−1, 1]` (see [`AugmentConfig::normalize`]).

mod augment;
mod image_io;
mod manifest;
mod split;
mod synthetic;

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mining::TripletBatch;
use crate::tensor::Tensor;
use crate::{ClassId, Error, Result};

pub use augment::{augment, flip_horizontal, transform, AugmentConfig};
pub use image_io::{decode_image, encode_ppm, read_image, read_ppm, resize_bilinear, write_ppm};
pub use manifest::{read_manifest, write_manifest, ManifestRow, SplitName};
pub use split::{split, split_indices, SplitIndices, SplitSpec};
pub use synthetic::{make_synthetic, write_synthetic, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Loaded,
    Synthetic,
}

/// Labelled images sharing one shape.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<Tensor>,
    labels: Vec<ClassId>,
    class_names: Vec<String>,
    paths: Vec<Option<PathBuf>>,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(
        images: Vec<Tensor>,
        labels: Vec<ClassId>,
        class_names: Vec<String>,
        provenance: Provenance,
    ) -> Result<Self> {
        let paths = vec![None; images.len()];
        Self::with_paths(images, labels, class_names, paths, provenance)
    }

    pub fn with_paths(
        images: Vec<Tensor>,
        labels: Vec<ClassId>,
        class_names: Vec<String>,
        paths: Vec<Option<PathBuf>>,
        provenance: Provenance,
    ) -> Result<Self> {
        if images.len() != labels.len() || images.len() != paths.len() {
            return Err(Error::InvalidInput(format!(
                "{} images, {} labels and {} paths",
                images.len(),
                labels.len(),
                paths.len()
            )));
        }
        if let Some(first) = images.first() {
            if first.ndim() != 3 {
                return Err(Error::InvalidInput(format!(
                    "images must be c×h×w, got {:?}",
                    first.shape()
                )));
            }
            if let Some(bad) = images.iter().find(|t| t.shape() != first.shape()) {
                return Err(Error::InvalidInput(format!(
                    "mixed image shapes {:?} and {:?}",
                    first.shape(),
                    bad.shape()
                )));
            }
        }
        crate::losses::check_labels(&labels, class_names.len())?;
        Ok(Self {
            images,
            labels,
            class_names,
            paths,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn paths(&self) -> &[Option<PathBuf>] {
        &self.paths
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> ClassId {
        self.labels[i]
    }

    /// `c×h×w` of every image, if there is any.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.images
            .first()
            .map(|t| [t.shape()[0], t.shape()[1], t.shape()[2]])
    }

    /// Sample indices grouped by class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_indices().iter().map(Vec::len).collect()
    }

    /// The samples at `indices`, keeping class names and provenance.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            paths: indices.iter().map(|&i| self.paths[i].clone()).collect(),
            provenance: self.provenance,
        }
    }

    /// Stacks the samples at `indices` into a batch without triplets.
    pub fn batch(&self, indices: &[usize]) -> Result<TripletBatch> {
        let images: Vec<Tensor> = indices
            .iter()
            .map(|&i| {
                self.images
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("sample {i} out of range")))
            })
            .collect::<Result<_>>()?;
        Ok(TripletBatch {
            images: Tensor::stack(&images)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            triplets: Vec::new(),
            indices: indices.to_vec(),
        })
    }
}

/// Reads `root/<class>/<image>` into a dataset, resizing every image to
/// `height×width` with bilinear interpolation. Class ids follow the sorted
/// subdirectory names; files are read in sorted order.
pub fn load_directory(root: &Path, height: usize, width: usize) -> Result<Dataset> {
    let class_names = list_class_dirs(root)?;
    if class_names.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} has no class subdirectories",
            root.display()
        )));
    }
    let mut files = Vec::new();
    for (label, name) in class_names.iter().enumerate() {
        let dir = root.join(name);
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && !is_hidden(p))
            .collect();
        entries.sort();
        if entries.is_empty() {
            return Err(Error::InvalidInput(format!(
                "class directory {} is empty",
                dir.display()
            )));
        }
        files.extend(entries.into_iter().map(|p| (p, label)));
    }
    load_files(&files, class_names, height, width)
}

/// Decodes `(path, label)` pairs in parallel, resizing to `height×width`.
pub fn load_files(
    files: &[(PathBuf, ClassId)],
    class_names: Vec<String>,
    height: usize,
    width: usize,
) -> Result<Dataset> {
    let images: Vec<Tensor> = files
        .par_iter()
        .map(|(path, _)| read_image(path).and_then(|img| Ok(resize_bilinear(&img, height, width)?)))
        .collect::<Result<_>>()?;
    Dataset::with_paths(
        images,
        files.iter().map(|f| f.1).collect(),
        class_names,
        files.iter().map(|f| Some(f.0.clone())).collect(),
        Provenance::Loaded,
    )
}

/// Loads the files listed in `root/manifest.csv`, returning the dataset and
/// the split recorded for each sample.
pub fn load_manifest_dataset(
    root: &Path,
    height: usize,
    width: usize,
) -> Result<(Dataset, Vec<SplitName>)> {
    let rows = read_manifest(&root.join(manifest::MANIFEST_FILE))?;
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} lists no samples",
            root.join(manifest::MANIFEST_FILE).display()
        )));
    }
    let k = rows.iter().map(|r| r.class_id).max().unwrap_or(0) + 1;
    let mut class_names = vec![String::new(); k];
    for row in &rows {
        let name = Path::new(&row.path)
            .parent()
            .and_then(Path::file_name)
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("class_{}", row.class_id));
        let slot = &mut class_names[row.class_id];
        if slot.is_empty() {
            *slot = name;
        }
    }
    for (i, name) in class_names.iter_mut().enumerate() {
        if name.is_empty() {
            *name = format!("class_{i}");
        }
    }
    let files: Vec<(PathBuf, ClassId)> = rows
        .iter()
        .map(|r| (root.join(&r.path), r.class_id))
        .collect();
    let ds = load_files(&files, class_names, height, width)?;
    Ok((ds, rows.into_iter().map(|r| r.split).collect()))
}

pub use manifest::MANIFEST_FILE;

fn list_class_dirs(root: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| !n.starts_with('.'))
        .collect();
    names.sort();
    Ok(names)
}

fn is_hidden(p: &Path) -> bool {
    p.file_name()
        .is_some_and(|n| n.to_string_lossy().starts_with('.'))
        || p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Brings every class to exactly `target` samples.
///
/// Larger classes are subsampled uniformly (keeping dataset order); smaller
/// ones keep all originals and gain augmented copies of randomly chosen
/// members.
pub fn balance_classes<R: Rng + ?Sized>(
    ds: &Dataset,
    target: usize,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<Dataset> {
    if target == 0 {
        return Err(Error::InvalidInput(
            "balance target must be at least 1".into(),
        ));
    }
    let mut images = Vec::with_capacity(target * ds.num_classes());
    let mut labels = Vec::with_capacity(images.capacity());
    let mut paths = Vec::with_capacity(images.capacity());
    for (class, members) in ds.class_indices().into_iter().enumerate() {
        if members.is_empty() {
            return Err(Error::InvalidInput(format!(
                "class {} has no samples",
                ds.class_names[class]
            )));
        }
        let kept: Vec<usize> = if members.len() > target {
            let mut picked = index::sample(rng, members.len(), target).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| members[i]).collect()
        } else {
            members.clone()
        };
        for &i in &kept {
            images.push(ds.images[i].clone());
            labels.push(class);
            paths.push(ds.paths[i].clone());
        }
        for _ in kept.len()..target {
            let src = members[rng.gen_range(0..members.len())];
            images.push(augment(&ds.images[src], config, rng)?);
            labels.push(class);
            paths.push(None);
        }
    }
    Dataset::with_paths(images, labels, ds.class_names.clone(), paths, ds.provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(counts: &[usize]) -> Dataset {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                images.push(Tensor::full(vec![1, 2, 2], (c * 10 + i) as f64 / 100.0).unwrap());
                labels.push(c);
            }
        }
        let names = (0..counts.len()).map(|c| format!("c{c}")).collect();
        Dataset::new(images, labels, names, Provenance::Synthetic).unwrap()
    }

    #[test]
    fn rejects_mixed_shapes_and_bad_labels() {
        let a = Tensor::zeros(vec![1, 2, 2]).unwrap();
        let b = Tensor::zeros(vec![1, 3, 2]).unwrap();
        assert!(Dataset::new(
            vec![a.clone(), b],
            vec![0, 0],
            vec!["x".into()],
            Provenance::Loaded
        )
        .is_err());
        assert!(Dataset::new(vec![a], vec![1], vec!["x".into()], Provenance::Loaded).is_err());
    }

    #[test]
    fn balancing_counts() {
        let ds = tiny(&[10, 3, 7]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = balance_classes(&ds, 7, &AugmentConfig::default(), &mut rng).unwrap();
        assert_eq!(out.class_counts(), vec![7, 7, 7]);
        assert_eq!(out.len(), 21);

        // Already balanced at target: originals retained in order.
        let same = balance_classes(&tiny(&[4, 4]), 4, &AugmentConfig::default(), &mut rng).unwrap();
        assert_eq!(same.images(), tiny(&[4, 4]).images());
    }

    #[test]
    fn deficit_is_filled_with_copies() {
        let ds = tiny(&[10, 40]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = balance_classes(&ds, 40, &AugmentConfig::default(), &mut rng).unwrap();
        let class0 = &out.class_indices()[0];
        assert_eq!(class0.len(), 40);
        assert!(class0.iter().all(|&i| out.label(i) == 0));
        // The first ten are the originals.
        for (j, &i) in class0.iter().take(10).enumerate() {
            assert_eq!(out.image(i), ds.image(j));
        }
    }

    #[test]
    fn batch_stacks_images() {
        let ds = tiny(&[2, 2]);
        let b = ds.batch(&[3, 0]).unwrap();
        assert_eq!(b.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(b.labels, vec![1, 0]);
        assert!(ds.batch(&[9]).is_err());
    }
}
