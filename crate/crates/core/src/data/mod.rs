//! Class-per-directory datasets, stratified splits and a synthetic
//! shape/texture set.

mod image;
mod synth;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use image::{
    decode_pnm, encode_pgm, encode_ppm, normalize, read_image, resize_bilinear, ImageFormat,
};
pub use synth::{gen_synthetic, render_synthetic, SynthClass};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default side every image is resized to.
pub const RESOLUTION: usize = 224;

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    /// Normalized `[3, side, side]` tensor.
    Memory(Arc<Tensor>),
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub source: Source,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub class_names: Vec<String>,
    pub resolution: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    /// The normalized `[3, resolution, resolution]` image of item `i`.
    pub fn image(&self, i: usize) -> Result<Tensor> {
        match &self.items[i].source {
            Source::Memory(t) => Ok(t.as_ref().clone()),
            Source::File(p) => load_image(p, self.resolution),
        }
    }

    /// Stacks items `idx` into `[n, 3, s, s]`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let s = self.resolution;
        let mut data = Vec::with_capacity(idx.len() * 3 * s * s);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.image(i)?.data());
            labels.push(self.items[i].label);
        }
        Ok((Tensor::new(&[idx.len(), 3, s, s], data)?, labels))
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            items: idx.iter().map(|&i| self.items[i].clone()).collect(),
            class_names: self.class_names.clone(),
            resolution: self.resolution,
        }
    }

    /// Decodes every file-backed item now.
    pub fn materialize(&self) -> Result<Dataset> {
        let items = (0..self.len())
            .map(|i| {
                Ok(Item {
                    source: Source::Memory(Arc::new(self.image(i)?)),
                    label: self.items[i].label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            items,
            class_names: self.class_names.clone(),
            resolution: self.resolution,
        })
    }

    /// Writes the set as `<root>/<class>/<nnnn>.ppm`, de-normalized.
    pub fn write_ppm_tree(&self, root: &Path) -> Result<()> {
        for name in &self.class_names {
            let dir = root.join(name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for i in 0..self.len() {
            let mut img = self.image(i)?;
            img.data_mut().iter_mut().for_each(|v| *v = *v * 0.5 + 0.5);
            let path = root
                .join(&self.class_names[self.items[i].label])
                .join(format!("{i:04}.ppm"));
            std::fs::write(&path, encode_ppm(&img)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Decodes, resizes to `side` and normalizes one file.
pub fn load_image(path: &Path, side: usize) -> Result<Tensor> {
    let img = read_image(path)?;
    let mut img = resize_bilinear(&img, side, side)?;
    normalize(&mut img);
    Ok(img)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut v = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden {
            v.push(entry.path());
        }
    }
    v.sort();
    Ok(v)
}

/// Scans `root/<class>/<files>`; classes are sorted by name. Every file is
/// decoded once so bad headers surface here; pixels stay on disk.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    load_dataset_at(root, RESOLUTION)
}

pub fn load_dataset_at(root: &Path, resolution: usize) -> Result<Dataset> {
    let mut class_names = Vec::new();
    let mut items = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = class_names.len();
        let files: Vec<PathBuf> = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.is_file())
            .collect();
        if files.is_empty() {
            return Err(Error::EmptyClass(dir));
        }
        for f in files {
            read_image(&f)?;
            items.push(Item {
                source: Source::File(f),
                label,
            });
        }
        class_names.push(
            dir.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
        );
    }
    if class_names.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no class directories",
            root.display()
        )));
    }
    Ok(Dataset {
        items,
        class_names,
        resolution,
    })
}

/// Per-class seeded shuffle, then `round(n·r_train)` train, `round(n·r_val)`
/// val and the remainder test.
pub fn split_dataset(
    ds: &Dataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for class in 0..ds.classes() {
        let mut idx: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.items[i].label == class)
            .collect();
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = (n * a).round() as usize;
        let n_val = ((n * b).round() as usize).min(idx.len() - n_train);
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..n_train + n_val]);
        test.extend_from_slice(&idx[n_train + n_val..]);
    }
    for part in [&mut train, &mut val, &mut test] {
        part.sort_unstable();
    }
    Ok((ds.subset(&train), ds.subset(&val), ds.subset(&test)))
}
