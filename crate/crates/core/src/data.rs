//! Samples, datasets, sensitive-attribute encoding and the on-disk layout.
//!
//! Layout of a dataset root:
//!
//! ```text
//! root/images/<id>.png   image (grayscale or RGB, 8/16 bit)
//! root/masks/<id>.png    label mask, pixel value = class id
//! root/metadata.csv      header `id,sex,age`; sex in {F, M}, age in years
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use fairseg_nn::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FairsegError, IoContext, Result};
use crate::imageio;

/// One image with its mask and sensitive attribute.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `[C, H, W]`, values in [0, 1].
    pub image: Tensor,
    /// `H*W` class ids.
    pub mask: Vec<u8>,
    pub attribute: usize,
    pub raw_attribute: Option<f64>,
}

impl Sample {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.image.shape();
        (s[0], s[1], s[2])
    }
}

/// Ordered samples partitioned into `num_subgroups` attribute subgroups.
#[derive(Debug, Clone)]
pub struct SegDataset {
    samples: Vec<Sample>,
    num_subgroups: usize,
    num_classes: usize,
    attribute_name: String,
    subgroup_labels: Vec<String>,
}

impl SegDataset {
    /// Validates every sample against the declared `K` and `L`.
    pub fn new(
        samples: Vec<Sample>,
        num_classes: usize,
        attribute_name: impl Into<String>,
        subgroup_labels: Vec<String>,
    ) -> Result<Self> {
        let num_subgroups = subgroup_labels.len();
        if num_subgroups == 0 {
            return Err(FairsegError::Invalid("dataset needs at least one subgroup".into()));
        }
        let mut dims = None;
        for s in &samples {
            if s.image.shape().len() != 3 {
                return Err(FairsegError::Shape(format!(
                    "sample {}: image must be [C,H,W], got {:?}",
                    s.id,
                    s.image.shape()
                )));
            }
            let (c, h, w) = s.dims();
            if s.mask.len() != h * w {
                return Err(FairsegError::Shape(format!(
                    "sample {}: mask has {} pixels, image is {h}x{w}",
                    s.id,
                    s.mask.len()
                )));
            }
            if *dims.get_or_insert((c, h, w)) != (c, h, w) {
                return Err(FairsegError::Shape(format!(
                    "sample {} is {c}x{h}x{w}, dataset is {:?}",
                    s.id, dims
                )));
            }
            if s.attribute >= num_subgroups {
                return Err(FairsegError::Invalid(format!(
                    "sample {}: attribute {} >= K={num_subgroups}",
                    s.id, s.attribute
                )));
            }
            if let Some(&bad) = s.mask.iter().find(|&&m| usize::from(m) >= num_classes) {
                return Err(FairsegError::Invalid(format!(
                    "sample {}: mask class {bad} >= L={num_classes}",
                    s.id
                )));
            }
        }
        let ds = Self {
            samples,
            num_subgroups,
            num_classes,
            attribute_name: attribute_name.into(),
            subgroup_labels,
        };
        for k in ds.empty_subgroups() {
            log::warn!(
                "subgroup {k} ({}) of `{}` has no samples",
                ds.subgroup_labels[k],
                ds.attribute_name
            );
        }
        Ok(ds)
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

    pub fn num_subgroups(&self) -> usize {
        self.num_subgroups
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn attribute_name(&self) -> &str {
        &self.attribute_name
    }

    pub fn subgroup_labels(&self) -> &[String] {
        &self.subgroup_labels
    }

    /// `(C, H, W)` of every sample, if any.
    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(Sample::dims)
    }

    pub fn subgroup_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_subgroups];
        for s in &self.samples {
            counts[s.attribute] += 1;
        }
        counts
    }

    /// Sample indices of each subgroup, in dataset order.
    pub fn subgroup_indices(&self) -> Vec<Vec<usize>> {
        let mut idx = vec![Vec::new(); self.num_subgroups];
        for (i, s) in self.samples.iter().enumerate() {
            idx[s.attribute].push(i);
        }
        idx
    }

    pub fn empty_subgroups(&self) -> Vec<usize> {
        self.subgroup_counts()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn attributes(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.attribute).collect()
    }

    /// New dataset holding `indices` (kept in ascending id order).
    pub fn subset(&self, indices: &[usize]) -> SegDataset {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        idx.dedup();
        SegDataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            num_subgroups: self.num_subgroups,
            num_classes: self.num_classes,
            attribute_name: self.attribute_name.clone(),
            subgroup_labels: self.subgroup_labels.clone(),
        }
    }

    /// Batch `[B, C, H, W]` images and flattened masks for `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>, Vec<usize>) {
        let (c, h, w) = self.image_dims().expect("non-empty dataset");
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut mask = Vec::with_capacity(indices.len() * h * w);
        let mut attrs = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            data.extend_from_slice(s.image.data());
            mask.extend(s.mask.iter().map(|&m| usize::from(m)));
            attrs.push(s.attribute);
        }
        let images = Tensor::new(&[indices.len(), c, h, w], data).expect("batch shape");
        (images, mask, attrs)
    }
}

/// How a metadata column maps onto subgroup ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttributeKind {
    /// Category strings, mapped to their position.
    Categorical { categories: Vec<String> },
    /// Half-open bins `[e_k, e_{k+1})`, the last bin closed.
    BinnedNumeric { edges: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: AttributeKind,
}

impl AttributeSpec {
    /// `sex`: F -> 0, M -> 1.
    pub fn sex() -> Self {
        Self {
            name: "sex".into(),
            kind: AttributeKind::Categorical {
                categories: vec!["F".into(), "M".into()],
            },
        }
    }

    /// `age` in five 20-year bins over [0, 100].
    pub fn age() -> Self {
        Self {
            name: "age".into(),
            kind: AttributeKind::BinnedNumeric {
                edges: vec![0.0, 20.0, 40.0, 60.0, 80.0, 100.0],
            },
        }
    }

    /// Built-in spec for a metadata column name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "sex" => Ok(Self::sex()),
            "age" => Ok(Self::age()),
            other => Err(FairsegError::config(
                "attribute",
                format!("unknown attribute `{other}` (expected sex or age)"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            AttributeKind::Categorical { categories } if categories.is_empty() => Err(
                FairsegError::config("categories", "need at least one category"),
            ),
            AttributeKind::BinnedNumeric { edges } => {
                if edges.len() < 2 {
                    return Err(FairsegError::config("bins", "need at least two edges"));
                }
                if edges.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(FairsegError::config("bins", "edges must be strictly increasing"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn num_subgroups(&self) -> usize {
        match &self.kind {
            AttributeKind::Categorical { categories } => categories.len(),
            AttributeKind::BinnedNumeric { edges } => edges.len() - 1,
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match &self.kind {
            AttributeKind::Categorical { categories } => categories.clone(),
            AttributeKind::BinnedNumeric { edges } => edges
                .windows(2)
                .map(|w| format!("{}-{}", w[0], w[1]))
                .collect(),
        }
    }

    /// Subgroup id and numeric raw value for one metadata cell.
    pub fn encode(&self, raw: &str) -> Result<(usize, Option<f64>)> {
        let raw = raw.trim();
        match &self.kind {
            AttributeKind::Categorical { categories } => categories
                .iter()
                .position(|c| c == raw)
                .map(|k| (k, None))
                .ok_or_else(|| {
                    FairsegError::Load(format!(
                        "`{raw}` is not a category of `{}` ({categories:?})",
                        self.name
                    ))
                }),
            AttributeKind::BinnedNumeric { .. } => {
                let v: f64 = raw.parse().map_err(|_| {
                    FairsegError::Load(format!("`{raw}` is not a number for `{}`", self.name))
                })?;
                Ok((bin_attribute(v, self)?, Some(v)))
            }
        }
    }
}

/// Bin index of `value`: `[e_k, e_{k+1})`, with the last bin `[e_{K-1}, e_K]`.
pub fn bin_attribute(value: f64, spec: &AttributeSpec) -> Result<usize> {
    let AttributeKind::BinnedNumeric { edges } = &spec.kind else {
        return Err(FairsegError::Invalid(format!(
            "attribute `{}` is categorical, not binned",
            spec.name
        )));
    };
    let (low, high) = (edges[0], edges[edges.len() - 1]);
    if !(value >= low && value <= high) {
        return Err(FairsegError::OutOfRange {
            value,
            attribute: spec.name.clone(),
            low,
            high,
        });
    }
    let k = edges.partition_point(|&e| e <= value);
    Ok((k - 1).min(edges.len() - 2))
}

/// Options for [`load_dataset`].
#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Square output resolution; `None` keeps the stored size.
    pub resolution: Option<usize>,
    pub num_classes: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            resolution: Some(256),
            num_classes: 2,
        }
    }
}

#[derive(Debug, Deserialize)]
struct MetaRow {
    id: String,
    sex: String,
    age: String,
}

/// Load the standard layout, grouping samples by `spec`. Sample order is
/// sorted by id.
pub fn load_dataset(root: &Path, spec: &AttributeSpec, opts: &LoadOptions) -> Result<SegDataset> {
    spec.validate()?;
    let meta_path = root.join("metadata.csv");
    let mut reader = csv::Reader::from_path(&meta_path)
        .map_err(|e| FairsegError::Load(format!("{}: {e}", meta_path.display())))?;
    let mut rows = BTreeMap::new();
    for row in reader.deserialize::<MetaRow>() {
        let row = row.map_err(|e| FairsegError::Load(format!("{}: {e}", meta_path.display())))?;
        let cell = match spec.name.as_str() {
            "sex" => row.sex.clone(),
            "age" => row.age.clone(),
            other => {
                return Err(FairsegError::Load(format!("metadata has no column `{other}`")))
            }
        };
        if rows.insert(row.id.clone(), cell).is_some() {
            return Err(FairsegError::Load(format!("duplicate metadata id `{}`", row.id)));
        }
    }

    let image_dir = root.join("images");
    let mut image_ids = Vec::new();
    for entry in fs::read_dir(&image_dir).at(&image_dir)? {
        let path = entry.at(&image_dir)?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                image_ids.push(stem.to_string());
            }
        }
    }
    image_ids.sort();
    for id in &image_ids {
        if !rows.contains_key(id) {
            return Err(FairsegError::Load(format!("image `{id}` has no metadata row")));
        }
    }
    if let Some(id) = rows.keys().find(|id| image_ids.binary_search(id).is_err()) {
        return Err(FairsegError::Load(format!("metadata id `{id}` has no image")));
    }

    let mut samples = Vec::with_capacity(image_ids.len());
    for id in image_ids {
        let mask_path = root.join("masks").join(format!("{id}.png"));
        if !mask_path.exists() {
            return Err(FairsegError::Load(format!("missing mask for `{id}`")));
        }
        let planes = imageio::read_image(&image_dir.join(format!("{id}.png")))?;
        let (mh, mw, mask) = imageio::read_mask(&mask_path)?;
        if (mh, mw) != (planes.height, planes.width) {
            return Err(FairsegError::Load(format!(
                "`{id}`: mask is {mh}x{mw}, image is {}x{}",
                planes.height, planes.width
            )));
        }
        let (planes, mask) = match opts.resolution {
            Some(r) => (
                imageio::resize_bilinear(&planes, r, r),
                imageio::resize_nearest(&mask, mh, mw, r, r),
            ),
            None => (planes, mask),
        };
        let (attribute, raw_attribute) = spec
            .encode(&rows[&id])
            .map_err(|e| FairsegError::Load(format!("`{id}`: {e}")))?;
        let image = Tensor::new(&[planes.channels, planes.height, planes.width], planes.data)?;
        samples.push(Sample {
            id,
            image,
            mask,
            attribute,
            raw_attribute,
        });
    }
    SegDataset::new(samples, opts.num_classes, spec.name.clone(), spec.labels())
}

/// Write `ds` in the standard layout. `extra` supplies the metadata cells
/// `(sex, age)` per sample.
pub fn write_dataset(
    root: &Path,
    ds: &SegDataset,
    metadata: impl Fn(&Sample) -> (String, String),
) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    fs::create_dir_all(&images).at(&images)?;
    fs::create_dir_all(&masks).at(&masks)?;
    let meta_path = root.join("metadata.csv");
    let mut meta = csv::Writer::from_path(&meta_path)?;
    meta.write_record(["id", "sex", "age"])?;
    for s in ds.samples() {
        let (c, h, w) = s.dims();
        if c != 1 {
            return Err(FairsegError::Invalid("only grayscale samples can be written".into()));
        }
        let px: Vec<u8> = s
            .image
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        imageio::write_gray(&images.join(format!("{}.png", s.id)), w, h, &px)?;
        imageio::write_gray(&masks.join(format!("{}.png", s.id)), w, h, &s.mask)?;
        let (sex, age) = metadata(s);
        meta.write_record([s.id.as_str(), sex.as_str(), age.as_str()])?;
    }
    meta.flush().at(&meta_path)?;
    Ok(())
}

/// Ceil-rounded train count for one subgroup.
fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize
}

/// Stratified split: each subgroup contributes `ceil(ratio * |D_k|)` samples
/// to train, the rest to test. Subgroups with fewer than two samples go
/// entirely to train.
pub fn split_dataset(ds: &SegDataset, ratio: f64, seed: u64) -> Result<(SegDataset, SegDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(FairsegError::config("ratio", format!("{ratio} not in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, mut idx) in ds.subgroup_indices().into_iter().enumerate() {
        if idx.len() < 2 {
            if !idx.is_empty() {
                log::warn!(
                    "subgroup {k} of `{}` has {} sample(s); placing it entirely in train",
                    ds.attribute_name(),
                    idx.len()
                );
            }
            train.extend(idx);
            continue;
        }
        idx.shuffle(&mut rng);
        let n_train = train_count(idx.len(), ratio);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    Ok((ds.subset(&train), ds.subset(&test)))
}
