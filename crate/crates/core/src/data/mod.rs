//! Labeled image datasets: loading from class-folder trees, label encoding,
//! class balancing, stratified splits, batching and a synthetic generator
//! for tests and demos.

mod split;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

pub use split::{kfold_split, kfold_split_indices, split_dataset, split_indices, BatchIter, Fold, Split};
pub use synth::synth_dataset;

use crate::augment::{augment_sample, sample_rng, AugmentConfig};
use crate::error::{Error, Result};
use crate::image::{load_image, Image};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    /// File the image was decoded from; `None` for generated samples.
    pub source: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    class_names: Vec<String>,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Class names must be strictly ascending in byte order and every label
    /// must index into them.
    pub fn new(class_names: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        if class_names.windows(2).any(|w| w[0].as_bytes() >= w[1].as_bytes()) {
            return Err(Error::invalid(
                "class names must be unique and sorted in byte order",
            ));
        }
        if let Some(s) = samples.iter().find(|s| s.label >= class_names.len()) {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                s.label,
                class_names.len()
            )));
        }
        Ok(Dataset {
            class_names,
            samples,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Samples per class.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Dataset indices grouped by class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_names.len()];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.label].push(i);
        }
        out
    }
}

/// Label `k` of `classes` as a one-hot vector.
pub fn one_hot(k: usize, classes: usize) -> Result<Tensor> {
    if k >= classes {
        return Err(Error::invalid(format!(
            "class {k} out of range for {classes} classes"
        )));
    }
    let mut t = Tensor::zeros(vec![classes]);
    t.data_mut()[k] = 1.0;
    Ok(t)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.retain(|p| {
        p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| !n.starts_with('.'))
    });
    entries.sort_by(|a, b| a.as_os_str().as_encoded_bytes().cmp(b.as_os_str().as_encoded_bytes()));
    Ok(entries)
}

/// Loads `root/<class>/<image>` trees, or the rows of `root/manifest.csv`
/// (`path,class`, paths relative to `root`) when that file exists.
///
/// Classes are ordered by name (byte order) and samples by path, so the
/// result does not depend on directory iteration order.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = root.join("manifest.csv");
    let mut by_class: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    if manifest.is_file() {
        let mut rdr = csv::Reader::from_path(&manifest)?;
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "class"] {
            return Err(Error::invalid(format!(
                "{} must have the header `path,class`",
                manifest.display()
            )));
        }
        for row in rdr.records() {
            let row = row?;
            by_class
                .entry(row[1].to_string())
                .or_default()
                .push(root.join(&row[0]));
        }
        for files in by_class.values_mut() {
            files.sort_by(|a, b| {
                a.as_os_str()
                    .as_encoded_bytes()
                    .cmp(b.as_os_str().as_encoded_bytes())
            });
        }
    } else {
        for dir in sorted_entries(root)? {
            if !dir.is_dir() {
                continue;
            }
            let name = dir
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::invalid(format!("non UTF-8 class folder {}", dir.display())))?
                .to_string();
            let files: Vec<PathBuf> = sorted_entries(&dir)?
                .into_iter()
                .filter(|p| p.is_file())
                .collect();
            by_class.insert(name, files);
        }
    }
    if by_class.is_empty() {
        return Err(Error::invalid(format!(
            "no class folders found under {}",
            root.display()
        )));
    }

    let mut class_names = Vec::with_capacity(by_class.len());
    let mut samples = Vec::new();
    for (label, (name, files)) in by_class.into_iter().enumerate() {
        if files.is_empty() {
            log::warn!("class `{name}` has no images");
        }
        for path in files {
            let image = load_image(&path)?;
            samples.push(Sample {
                image,
                label,
                source: Some(path),
            });
        }
        class_names.push(name);
    }
    Dataset::new(class_names, samples)
}

/// Appends augmented copies of randomly chosen members to every class below
/// `target` (default: the largest class count) until all classes reach it.
/// Empty classes stay empty.
pub fn balance_by_augmentation(
    ds: &Dataset,
    cfg: &AugmentConfig,
    target: Option<usize>,
) -> Result<Dataset> {
    cfg.validate()?;
    let counts = ds.counts();
    let max = counts.iter().copied().max().unwrap_or(0);
    let target = target.unwrap_or(max).max(max);
    let mut samples = ds.samples.clone();
    for (class, members) in ds.indices_by_class().into_iter().enumerate() {
        if members.is_empty() {
            if target > 0 {
                log::warn!("cannot balance empty class `{}`", ds.class_names[class]);
            }
            continue;
        }
        let mut pick = sample_rng(cfg.seed ^ 0xBA1A_9CE0, class as u64);
        for _ in members.len()..target {
            let src = &ds.samples[members[pick.gen_range(0..members.len())]];
            let mut rng = sample_rng(cfg.seed, samples.len() as u64);
            samples.push(Sample {
                image: augment_sample(&src.image, cfg, &mut rng)?,
                label: class,
                source: None,
            });
        }
    }
    Dataset::new(ds.class_names.clone(), samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_cases() {
        assert_eq!(one_hot(0, 3).unwrap().data(), &[1.0, 0.0, 0.0]);
        assert_eq!(one_hot(2, 3).unwrap().data(), &[0.0, 0.0, 1.0]);
        for k in 0..5 {
            assert_eq!(one_hot(k, 5).unwrap().sum(), 1.0);
        }
        assert!(one_hot(3, 3).is_err());
    }

    #[test]
    fn unsorted_class_names_rejected() {
        assert!(Dataset::new(vec!["b".into(), "a".into()], vec![]).is_err());
        assert!(Dataset::new(vec!["a".into(), "a".into()], vec![]).is_err());
    }

    fn fixture(counts: &[usize]) -> Dataset {
        let names = (0..counts.len()).map(|c| format!("c{c}")).collect();
        let mut samples = Vec::new();
        for (label, &n) in counts.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample {
                    image: Image::filled(1, 4, 4, (i as f64 / 10.0).min(1.0)),
                    label,
                    source: None,
                });
            }
        }
        Dataset::new(names, samples).unwrap()
    }

    #[test]
    fn balancing_counts() {
        let cfg = AugmentConfig::standard(3);
        let ds = fixture(&[4, 4]);
        assert_eq!(balance_by_augmentation(&ds, &cfg, None).unwrap().counts(), vec![4, 4]);
        let ds = fixture(&[4, 2]);
        assert_eq!(balance_by_augmentation(&ds, &cfg, None).unwrap().counts(), vec![4, 4]);
        let ds = fixture(&[3, 3, 3]);
        assert_eq!(
            balance_by_augmentation(&ds, &cfg, Some(5)).unwrap().counts(),
            vec![5, 5, 5]
        );
        let a = balance_by_augmentation(&fixture(&[5, 1]), &cfg, None).unwrap();
        let b = balance_by_augmentation(&fixture(&[5, 1]), &cfg, None).unwrap();
        assert_eq!(a, b);
    }
}
