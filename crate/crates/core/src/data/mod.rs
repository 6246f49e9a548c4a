//! Hyperspectral cubes, label rasters and the sampling pipeline.

mod io;
mod patch;
mod split;
mod synth;


pub use io::{load_cube, write_scene, MANIFEST_VERSION};
pub use patch::{batch_iter, extract_patch, patch_batch, Batches};
pub use split::{train_count, stratified_split, Sample, SampleSplit};
pub use synth::{default_palette, synth_scene, SynthParams};

use crate::error::{Error, Result};

/// Reflectance cube, band-sequential: `data[(band * height + row) * width + col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
    /// Band centers in nm, when known.
    pub wavelengths: Option<Vec<f64>>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::InvalidArgument(format!(
                "cube extents must be positive, got {height}×{width}×{bands}"
            )));
        }
        if data.len() != height * width * bands {
            return Err(Error::InvalidArgument(format!(
                "{height}×{width}×{bands} cube needs {} values, got {}",
                height * width * bands,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite reflectance at index {i}")));
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            data,
            wavelengths: None,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn band(&self, b: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f64 {
        self.data[(band * self.height + row) * self.width + col]
    }

    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f64> {
        (0..self.bands).map(|b| self.get(b, row, col)).collect()
    }
}

/// Per-band min-max scaling to `[0, 1]`; constant bands become 0.
pub fn normalize(cube: &HsiCube) -> HsiCube {
    let n = cube.height * cube.width;
    let mut data = cube.data.clone();
    for band in data.chunks_mut(n) {
        let lo = band.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = band.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        for v in band {
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
    }
    HsiCube { data, ..cube.clone() }
}

/// Label raster: 0 is unlabeled, `1..=n` index `classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    height: usize,
    width: usize,
    labels: Vec<u16>,
    classes: Vec<String>,
    palette: Vec<[u8; 3]>,
}

impl GroundTruth {
    pub fn new(
        height: usize,
        width: usize,
        labels: Vec<u16>,
        classes: Vec<String>,
        palette: Vec<[u8; 3]>,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "{height}×{width} raster needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if palette.len() != classes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} classes but {} palette colors",
                classes.len(),
                palette.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > classes.len()) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                classes: classes.len(),
            });
        }
        Ok(GroundTruth {
            height,
            width,
            labels,
            classes,
            palette,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn palette(&self) -> &[[u8; 3]] {
        &self.palette
    }

    /// Pixel count of each class `1..=n`, indexed from 0.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for &l in &self.labels {
            if l > 0 {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }

    /// Every labeled pixel in row-major order, with 0-based class.
    pub fn labeled(&self) -> Vec<Sample> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 0)
            .map(|(i, &l)| Sample {
                row: i / self.width,
                col: i % self.width,
                label: l as usize - 1,
            })
            .collect()
    }
}
