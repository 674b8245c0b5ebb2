//! Label rasters, the per-class train/test split, and raster files.
//!
//! Raster files are a flat little-endian payload `<name>.raw` stored band
//! sequentially, with a JSON sidecar `<name>.hdr.json`:
//!
//! ```json
//! {"height": 32, "width": 32, "bands": 16, "dtype": "f32le", "interleave": "bsq"}
//! ```
//!
//! Cubes use `f32le`, label masks `u16le` with one band, split masks `u8`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::write_atomic;
use crate::rng::seeded;
use crate::spectra::HsiCube;
use crate::tensor::Tensor;

/// Per-pixel class labels; `0` is background, classes are `1..=class_count`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    class_count: u16,
    labels: Vec<u16>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, class_count: u16, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label raster {height}x{width} with {} values",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > class_count) {
            return Err(Error::InvalidParameter(format!(
                "label {bad} exceeds class count {class_count}"
            )));
        }
        if labels.iter().all(|&l| l == 0) {
            return Err(Error::InvalidParameter("mask has no labeled pixel".into()));
        }
        Ok(Self {
            height,
            width,
            class_count,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn class_count(&self) -> u16 {
        self.class_count
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// Zero-based class index per pixel, `None` for background.
    pub fn targets(&self) -> Vec<Option<usize>> {
        self.labels
            .iter()
            .map(|&l| (l > 0).then(|| l as usize - 1))
            .collect()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    pub fn class_pixel_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count as usize];
        for &l in &self.labels {
            if l > 0 {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }

    /// Copy with every pixel outside `region` set to background. The result
    /// may have no labeled pixel.
    pub fn restricted(&self, region: &[bool]) -> LabelMask {
        assert_eq!(region.len(), self.labels.len(), "region size");
        let labels = self
            .labels
            .iter()
            .zip(region)
            .map(|(&l, &keep)| if keep { l } else { 0 })
            .collect();
        LabelMask { labels, ..*self }
    }

    /// Nearest-neighbour resampling to `(height, width)`.
    pub fn downsample_nearest(&self, height: usize, width: usize) -> LabelMask {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = crate::kernels::nearest_index(y, self.height, height);
            for x in 0..width {
                let sx = crate::kernels::nearest_index(x, self.width, width);
                labels.push(self.get(sy, sx));
            }
        }
        LabelMask {
            height,
            width,
            class_count: self.class_count,
            labels,
        }
    }
}

/// Disjoint train/test pixel sets covering the labeled pixels of a mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMask {
    pub height: usize,
    pub width: usize,
    pub train: Vec<bool>,
    pub test: Vec<bool>,
}

impl SplitMask {
    pub fn train_count(&self) -> usize {
        self.train.iter().filter(|&&t| t).count()
    }

    pub fn test_count(&self) -> usize {
        self.test.iter().filter(|&&t| t).count()
    }
}

const SPLIT_STREAM: u64 = 0x5711;

/// Number of training pixels drawn from a class of `n` pixels.
pub fn train_quota(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n)
}

/// Draws `max(1, round(ratio * n_c))` training pixels uniformly from each
/// class; every other labeled pixel goes to test.
pub fn split(mask: &LabelMask, ratio: f64, seed: u64) -> Result<SplitMask> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "split ratio {ratio} outside (0, 1)"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); mask.class_count as usize];
    for (i, &l) in mask.labels.iter().enumerate() {
        if l > 0 {
            by_class[l as usize - 1].push(i);
        }
    }
    let n = mask.labels.len();
    let mut train = vec![false; n];
    let mut test = vec![false; n];
    let mut rng = seeded(seed, SPLIT_STREAM);
    for (c, pixels) in by_class.iter_mut().enumerate() {
        if pixels.is_empty() {
            return Err(Error::EmptyClass(c as u16 + 1));
        }
        let quota = train_quota(pixels.len(), ratio);
        pixels.shuffle(&mut rng);
        for (k, &p) in pixels.iter().enumerate() {
            if k < quota {
                train[p] = true;
            } else {
                test[p] = true;
            }
        }
    }
    Ok(SplitMask {
        height: mask.height,
        width: mask.width,
        train,
        test,
    })
}


/// `[H, W, C_g]` indicator tensor; background pixels are all-zero.
pub fn one_hot(mask: &LabelMask) -> Tensor {
    let c = mask.class_count as usize;
    let mut data = vec![0.0; mask.labels.len() * c];
    for (px, &l) in data.chunks_mut(c).zip(&mask.labels) {
        if l > 0 {
            px[l as usize - 1] = 1.0;
        }
    }
    Tensor::from_vec(vec![mask.height, mask.width, c], data).expect("shape")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterHeader {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub dtype: String,
    pub interleave: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<u16>,
}

impl RasterHeader {
    fn new(height: usize, width: usize, bands: usize, dtype: &str) -> Self {
        Self {
            height,
            width,
            bands,
            dtype: dtype.to_string(),
            interleave: "bsq".to_string(),
            classes: None,
        }
    }

    fn element_size(&self) -> Result<usize> {
        match self.dtype.as_str() {
            "f32le" => Ok(4),
            "u16le" => Ok(2),
            "u8" => Ok(1),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }
}

/// Sidecar header path for a payload path: `scene.raw` → `scene.hdr.json`.
pub fn header_path(payload: &Path) -> PathBuf {
    payload.with_extension("hdr.json")
}

fn write_raster(path: &Path, header: &RasterHeader, payload: &[u8]) -> Result<()> {
    write_atomic(path, payload)?;
    let text = serde_json::to_string_pretty(header)?;
    write_atomic(&header_path(path), text.as_bytes())
}

fn read_raster(path: &Path, dtype: &str) -> Result<(RasterHeader, Vec<u8>)> {
    let header: RasterHeader = serde_json::from_str(&fs::read_to_string(header_path(path))?)?;
    let elem = header.element_size()?;
    if header.dtype != dtype {
        return Err(Error::UnsupportedDtype(header.dtype));
    }
    if header.interleave != "bsq" {
        return Err(Error::HeaderMismatch {
            path: path.to_path_buf(),
            reason: format!("unsupported interleave `{}`", header.interleave),
        });
    }
    if header.height == 0 || header.width == 0 || header.bands == 0 {
        return Err(Error::HeaderMismatch {
            path: path.to_path_buf(),
            reason: "zero dimension".into(),
        });
    }
    let payload = fs::read(path)?;
    let expected = header.height * header.width * header.bands * elem;
    if payload.len() != expected {
        return Err(Error::HeaderMismatch {
            path: path.to_path_buf(),
            reason: format!("payload is {} bytes, header implies {expected}", payload.len()),
        });
    }
    Ok((header, payload))
}

/// Band-sequential little-endian `f32` payload of a cube.
pub fn cube_payload(cube: &HsiCube) -> Vec<u8> {
    let (h, w, b) = cube.dims();
    let mut out = Vec::with_capacity(h * w * b * 4);
    for band in 0..b {
        for px in cube.data().chunks(b) {
            out.extend_from_slice(&px[band].to_le_bytes());
        }
    }
    out
}

pub fn save_cube(cube: &HsiCube, path: &Path) -> Result<()> {
    let (h, w, b) = cube.dims();
    write_raster(path, &RasterHeader::new(h, w, b, "f32le"), &cube_payload(cube))
}

pub fn load_cube(path: &Path) -> Result<HsiCube> {
    let (hdr, payload) = read_raster(path, "f32le")?;
    let plane = hdr.height * hdr.width;
    let mut data = vec![0f32; plane * hdr.bands];
    for (i, bytes) in payload.chunks_exact(4).enumerate() {
        let (band, px) = (i / plane, i % plane);
        data[px * hdr.bands + band] = f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    }
    HsiCube::new(hdr.height, hdr.width, hdr.bands, data)
}

pub fn save_labels(mask: &LabelMask, path: &Path) -> Result<()> {
    let mut header = RasterHeader::new(mask.height, mask.width, 1, "u16le");
    header.classes = Some(mask.class_count);
    let payload: Vec<u8> = mask.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    write_raster(path, &header, &payload)
}

pub fn load_labels(path: &Path) -> Result<LabelMask> {
    let (hdr, payload) = read_raster(path, "u16le")?;
    if hdr.bands != 1 {
        return Err(Error::HeaderMismatch {
            path: path.to_path_buf(),
            reason: format!("label raster must have 1 band, header says {}", hdr.bands),
        });
    }
    let labels: Vec<u16> = payload
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let classes = hdr
        .classes
        .unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0));
    LabelMask::new(hdr.height, hdr.width, classes, labels)
}

/// Paths of the two `u8` rasters a split is stored in.
pub fn split_paths(base: &Path) -> (PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut s = base.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with(".train.raw"), with(".test.raw"))
}

pub fn save_split(split: &SplitMask, base: &Path) -> Result<()> {
    let (train_path, test_path) = split_paths(base);
    let header = RasterHeader::new(split.height, split.width, 1, "u8");
    let bytes = |v: &[bool]| v.iter().map(|&b| b as u8).collect::<Vec<u8>>();
    write_raster(&train_path, &header, &bytes(&split.train))?;
    write_raster(&test_path, &header, &bytes(&split.test))
}

pub fn load_split(base: &Path) -> Result<SplitMask> {
    let (train_path, test_path) = split_paths(base);
    let (th, train) = read_raster(&train_path, "u8")?;
    let (sh, test) = read_raster(&test_path, "u8")?;
    if (th.height, th.width) != (sh.height, sh.width) {
        return Err(Error::HeaderMismatch {
            path: test_path,
            reason: "train and test rasters differ in size".into(),
        });
    }
    let flags = |v: Vec<u8>| v.into_iter().map(|b| b != 0).collect::<Vec<bool>>();
    let split = SplitMask {
        height: th.height,
        width: th.width,
        train: flags(train),
        test: flags(test),
    };
    if split.train.iter().zip(&split.test).any(|(&a, &b)| a && b) {
        return Err(Error::InvalidParameter("train and test overlap".into()));
    }
    Ok(split)
}
