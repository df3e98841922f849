//! Tensors, multi-channel images, atlases and datasets.
//!
//! Every image in a [`Dataset`] lives on the same registered grid, so a
//! [`RoiMask`] computed once from the [`Atlas`] addresses the same voxels in
//! all of them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::{atomic_write, f64s_to_le_bytes, le_bytes_to_f64s, read_json, write_json};
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const ATLAS_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const BLOB_DIR: &str = "blobs";

/// A dense row-major array of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("extents must be positive: {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite value {} at flat index {i}",
                values[i]
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Flat offset of a multi-index, or `None` when out of bounds.
    pub fn offset(&self, index: &[usize]) -> Option<usize> {
        flat_offset(&self.shape, index)
    }

    pub fn get(&self, index: &[usize]) -> Option<f64> {
        self.offset(index).map(|o| self.values[o])
    }
}

fn flat_offset(shape: &[usize], index: &[usize]) -> Option<usize> {
    if index.len() != shape.len() {
        return None;
    }
    let mut off = 0;
    for (&i, &n) in index.iter().zip(shape) {
        if i >= n {
            return None;
        }
        off = off * n + i;
    }
    Some(off)
}

fn unravel(shape: &[usize], mut offset: usize) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (slot, &n) in idx.iter_mut().zip(shape).rev() {
        *slot = offset % n;
        offset /= n;
    }
    idx
}

/// A `channels × spatial` image; the spatial part is 2D or 3D.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelImage {
    data: Tensor,
}

impl ChannelImage {
    pub fn new(channels: usize, spatial_shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let mut shape = Vec::with_capacity(spatial_shape.len() + 1);
        shape.push(channels);
        shape.extend_from_slice(spatial_shape);
        Self::from_tensor(Tensor::new(shape, values)?)
    }

    /// Interprets axis 0 as channels.
    pub fn from_tensor(data: Tensor) -> Result<Self> {
        match data.shape().len() {
            3 | 4 => Ok(ChannelImage { data }),
            n => Err(Error::Shape(format!(
                "channel image needs 2 or 3 spatial axes, got {}",
                n.saturating_sub(1)
            ))),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.data.shape()[1..]
    }

    pub fn spatial_len(&self) -> usize {
        self.spatial_shape().iter().product()
    }

    /// Full shape, channels first.
    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn values(&self) -> &[f64] {
        self.data.values()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial_len();
        &self.data.values[c * n..(c + 1) * n]
    }

    /// Overwrites the ROI voxels in place with `v` (channel-major order).
    pub fn replace_roi_in_place(&mut self, roi: &RoiMask, v: &[f64]) -> Result<()> {
        self.check_mask(roi)?;
        let expected = self.channels() * roi.len();
        if v.len() != expected {
            return Err(Error::Shape(format!(
                "ROI {} vector has length {}, expected {expected}",
                roi.roi_id,
                v.len()
            )));
        }
        let n = self.spatial_len();
        let mut it = v.iter();
        for c in 0..self.channels() {
            let base = c * n;
            for &off in &roi.offsets {
                self.data.values[base + off] = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    fn check_mask(&self, roi: &RoiMask) -> Result<()> {
        if roi.spatial_shape != self.spatial_shape() {
            return Err(Error::OutOfBounds(format!(
                "ROI {} is defined on grid {:?}, image grid is {:?}",
                roi.roi_id,
                roi.spatial_shape,
                self.spatial_shape()
            )));
        }
        Ok(())
    }
}

/// Flattens the ROI of `img`: channel-major, voxels in sorted coordinate order.
pub fn extract_roi(img: &ChannelImage, roi: &RoiMask) -> Result<Vec<f64>> {
    img.check_mask(roi)?;
    let n = img.spatial_len();
    let mut out = Vec::with_capacity(img.channels() * roi.len());
    for c in 0..img.channels() {
        let chan = &img.values()[c * n..(c + 1) * n];
        out.extend(roi.offsets.iter().map(|&o| chan[o]));
    }
    Ok(out)
}

/// Returns a copy of `img` whose ROI voxels are replaced by `v`.
pub fn replace_roi(img: &ChannelImage, roi: &RoiMask, v: &[f64]) -> Result<ChannelImage> {
    let mut out = img.clone();
    out.replace_roi_in_place(roi, v)?;
    Ok(out)
}

/// The voxels carrying one atlas label.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    pub roi_id: u32,
    spatial_shape: Vec<usize>,
    // sorted, unique; row-major order equals lexicographic coordinate order
    offsets: Vec<usize>,
}

impl RoiMask {
    pub fn new(roi_id: u32, spatial_shape: &[usize], voxels: &[Vec<usize>]) -> Result<Self> {
        if roi_id == 0 {
            return Err(Error::InvalidArgument("ROI id 0 is background".into()));
        }
        if voxels.is_empty() {
            return Err(Error::Empty(format!("ROI {roi_id} has no voxels")));
        }
        let mut offsets = voxels
            .iter()
            .map(|v| {
                flat_offset(spatial_shape, v).ok_or_else(|| {
                    Error::OutOfBounds(format!(
                        "voxel {v:?} outside grid {spatial_shape:?} in ROI {roi_id}"
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        offsets.sort_unstable();
        let before = offsets.len();
        offsets.dedup();
        if offsets.len() != before {
            return Err(Error::InvalidArgument(format!(
                "ROI {roi_id} lists duplicate voxels"
            )));
        }
        Ok(RoiMask {
            roi_id,
            spatial_shape: spatial_shape.to_vec(),
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.spatial_shape
    }

    /// Row-major flat offsets of the voxels, ascending.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn voxels(&self) -> Vec<Vec<usize>> {
        self.offsets
            .iter()
            .map(|&o| unravel(&self.spatial_shape, o))
            .collect()
    }
}

/// An integer label field; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    spatial_shape: Vec<usize>,
    labels: Vec<u32>,
    roi_ids: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AtlasFile {
    version: u32,
    spatial_shape: Vec<usize>,
    labels: Vec<u32>,
}

impl Atlas {
    pub fn new(spatial_shape: &[usize], labels: Vec<u32>) -> Result<Self> {
        if !(2..=3).contains(&spatial_shape.len()) || spatial_shape.contains(&0) {
            return Err(Error::Shape(format!(
                "atlas grid must be 2D or 3D with positive extents, got {spatial_shape:?}"
            )));
        }
        let n: usize = spatial_shape.iter().product();
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "atlas grid {spatial_shape:?} needs {n} labels, got {}",
                labels.len()
            )));
        }
        let roi_ids: Vec<u32> = labels
            .iter()
            .copied()
            .filter(|&l| l != 0)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if roi_ids.is_empty() {
            return Err(Error::Empty("atlas has no ROI labels".into()));
        }
        Ok(Atlas {
            spatial_shape: spatial_shape.to_vec(),
            labels,
            roi_ids,
        })
    }

    /// Builds an atlas from a scalar volume (e.g. a NIfTI label file). Values
    /// must be non-negative integers; a trailing time axis of extent 1 is dropped.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let mut shape = t.shape().to_vec();
        while shape.len() > 3 && shape.last() == Some(&1) {
            shape.pop();
        }
        let labels = t
            .values()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                    Ok(v as u32)
                } else {
                    Err(Error::InvalidArgument(format!("atlas label {v} is not a non-negative integer")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Atlas::new(&shape, labels)
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.spatial_shape
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn roi_ids(&self) -> &[u32] {
        &self.roi_ids
    }

    /// One mask per ROI id, ascending by id.
    pub fn rois(&self) -> Vec<RoiMask> {
        let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (off, &l) in self.labels.iter().enumerate() {
            if l != 0 {
                by_id.entry(l).or_default().push(off);
            }
        }
        by_id
            .into_iter()
            .map(|(roi_id, offsets)| RoiMask {
                roi_id,
                spatial_shape: self.spatial_shape.clone(),
                offsets,
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &AtlasFile {
                version: ATLAS_VERSION,
                spatial_shape: self.spatial_shape.clone(),
                labels: self.labels.clone(),
            },
        )
    }

    /// Loads a JSON atlas, or a NIfTI label volume when the path ends in `.nii`.
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "nii") {
            return Atlas::from_tensor(&crate::nifti::load_nifti(path)?);
        }
        check_version(path, ATLAS_VERSION)?;
        let f: AtlasFile = read_json(path)?;
        Atlas::new(&f.spatial_shape, f.labels)
    }
}

/// Free-function form of [`Atlas::rois`].
pub fn atlas_rois(atlas: &Atlas) -> Vec<RoiMask> {
    atlas.rois()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub label: u8,
    pub image: ChannelImage,
}

/// Labelled images on one registered grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    channels: usize,
    spatial_shape: Vec<usize>,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(channels: usize, spatial_shape: &[usize], samples: Vec<Sample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.image.channels() != channels || s.image.spatial_shape() != spatial_shape {
                return Err(Error::Shape(format!(
                    "sample {i} has shape {:?}, dataset grid is {channels}×{spatial_shape:?}",
                    s.image.shape()
                )));
            }
            if s.label > 1 {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has label {}, expected 0 or 1",
                    s.label
                )));
            }
        }
        Ok(Dataset {
            channels,
            spatial_shape: spatial_shape.to_vec(),
            samples,
        })
    }

    /// Zips parallel lists; the grid is taken from the first image.
    pub fn from_parts(
        images: Vec<ChannelImage>,
        labels: Vec<u8>,
        subject_ids: Vec<String>,
    ) -> Result<Self> {
        if images.len() != labels.len() || images.len() != subject_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images, {} labels, {} subject ids",
                images.len(),
                labels.len(),
                subject_ids.len()
            )));
        }
        let first = images
            .first()
            .ok_or_else(|| Error::Empty("dataset needs at least one image".into()))?;
        let (channels, spatial) = (first.channels(), first.spatial_shape().to_vec());
        let samples = images
            .into_iter()
            .zip(labels)
            .zip(subject_ids)
            .map(|((image, label), subject_id)| Sample {
                subject_id,
                label,
                image,
            })
            .collect();
        Dataset::new(channels, &spatial, samples)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.spatial_shape
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

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        let mut one = Dataset::new(self.channels, &self.spatial_shape, vec![sample])?;
        self.samples.append(&mut one.samples);
        Ok(())
    }

    /// Samples with the given label, in dataset order.
    pub fn class(&self, label: u8) -> Vec<Sample> {
        self.samples
            .iter()
            .filter(|s| s.label == label)
            .cloned()
            .collect()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for s in &self.samples {
            c[s.label as usize] += 1;
        }
        c
    }

    pub fn require_both_classes(&self) -> Result<()> {
        let [n0, n1] = self.class_counts();
        if n0 == 0 || n1 == 0 {
            return Err(Error::Empty(format!(
                "both classes are required (class 0: {n0}, class 1: {n1})"
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    channels: usize,
    spatial_shape: Vec<usize>,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    subject_id: String,
    label: u8,
    blob: String,
    shape: Vec<usize>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

fn check_version(path: &Path, expected: u32) -> Result<()> {
    let probe: VersionProbe = read_json(path)?;
    if probe.version != expected {
        return Err(Error::Version {
            found: probe.version,
            expected,
        });
    }
    Ok(())
}

/// Reads a dataset manifest and its little-endian `f64` blobs.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    check_version(manifest_path, MANIFEST_VERSION)?;
    let m: Manifest = read_json(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut expected_shape = vec![m.channels];
    expected_shape.extend_from_slice(&m.spatial_shape);
    let mut samples = Vec::with_capacity(m.entries.len());
    for e in m.entries {
        if e.shape != expected_shape {
            return Err(Error::Shape(format!(
                "entry {} has shape {:?}, manifest declares {expected_shape:?}",
                e.subject_id, e.shape
            )));
        }
        let blob_path = root.join(&e.blob);
        let bytes = fs::read(&blob_path).map_err(|err| Error::io(&blob_path, err))?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != 8 * n {
            return Err(Error::Shape(format!(
                "blob {} has {} bytes, shape {:?} needs {}",
                blob_path.display(),
                bytes.len(),
                e.shape,
                8 * n
            )));
        }
        let image = ChannelImage::from_tensor(Tensor::new(e.shape, le_bytes_to_f64s(&bytes)?)?)?;
        samples.push(Sample {
            subject_id: e.subject_id,
            label: e.label,
            image,
        });
    }
    Dataset::new(m.channels, &m.spatial_shape, samples)
}

/// Writes `dir/manifest.json` plus content-addressed blobs under `dir/blobs/`.
/// Blobs referenced only by a previous manifest in `dir` are removed.
pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<PathBuf> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let previous: Vec<String> = read_json::<Manifest>(&manifest_path)
        .map(|m| m.entries.into_iter().map(|e| e.blob).collect())
        .unwrap_or_default();

    let mut entries = Vec::with_capacity(d.len());
    for s in &d.samples {
        let bytes = f64s_to_le_bytes(s.image.values());
        let digest = Sha256::digest(&bytes);
        let name: String = digest[..12].iter().map(|b| format!("{b:02x}")).collect();
        let rel = format!("{BLOB_DIR}/{name}.f64");
        let path = dir.join(&rel);
        if !path.exists() {
            atomic_write(&path, &bytes)?;
        }
        entries.push(ManifestEntry {
            subject_id: s.subject_id.clone(),
            label: s.label,
            blob: rel,
            shape: s.image.shape().to_vec(),
        });
    }
    let live: BTreeSet<&str> = entries.iter().map(|e| e.blob.as_str()).collect();
    let stale: Vec<String> = previous
        .into_iter()
        .filter(|b| !live.contains(b.as_str()))
        .collect();
    write_json(
        &manifest_path,
        &Manifest {
            version: MANIFEST_VERSION,
            channels: d.channels,
            spatial_shape: d.spatial_shape.clone(),
            entries,
        },
    )?;
    for b in stale {
        let p = dir.join(&b);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(manifest_path)
}
