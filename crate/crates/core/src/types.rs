//! Shared domain types: class palettes, grayscale slices, label masks and
//! dense feature maps.

use std::collections::HashSet;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rgb(pub [u8; 3]);

impl Rgb {
    pub const BLACK: Rgb = Rgb([0, 0, 0]);
    pub const WHITE: Rgb = Rgb([255, 255, 255]);
}

/// Ordered class names with display colors. Index `0..n` is the canonical
/// encoding used by every [`LabelMask`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PaletteRepr", into = "PaletteRepr")]
pub struct ClassPalette {
    names: Vec<String>,
    colors: Vec<Rgb>,
}

#[derive(Serialize, Deserialize)]
struct PaletteRepr {
    names: Vec<String>,
    #[serde(default)]
    colors: Vec<Rgb>,
}

impl TryFrom<PaletteRepr> for ClassPalette {
    type Error = Error;

    fn try_from(r: PaletteRepr) -> Result<Self> {
        if r.colors.is_empty() {
            let n = r.names.len();
            ClassPalette::new(r.names, default_colors(n))
        } else {
            ClassPalette::new(r.names, r.colors)
        }
    }
}

impl From<ClassPalette> for PaletteRepr {
    fn from(p: ClassPalette) -> Self {
        PaletteRepr {
            names: p.names,
            colors: p.colors,
        }
    }
}

/// Qualitative colors, cycled when more classes are requested.
const TABLEAU: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

pub fn default_colors(n: usize) -> Vec<Rgb> {
    (0..n).map(|i| Rgb(TABLEAU[i % TABLEAU.len()])).collect()
}

impl ClassPalette {
    pub fn new(names: Vec<String>, colors: Vec<Rgb>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::invalid(format!(
                "palette needs at least 2 classes, got {}",
                names.len()
            )));
        }
        if names.len() > u8::MAX as usize + 1 {
            return Err(Error::invalid("palette holds at most 256 classes"));
        }
        if colors.len() != names.len() {
            return Err(Error::invalid(format!(
                "palette has {} names but {} colors",
                names.len(),
                colors.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names, colors })
    }

    /// Palette with generic names `class0..class{n-1}`.
    pub fn indexed(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| format!("class{i}")).collect(), default_colors(n))
    }

    /// Carbonates segmentation classes in GT encoding order.
    pub fn carbonates() -> Self {
        Self::new(
            vec!["crude_oil".into(), "brine".into(), "rock_matrix".into()],
            vec![Rgb([230, 159, 0]), Rgb([86, 180, 233]), Rgb([120, 120, 120])],
        )
        .expect("static palette is valid")
    }

    /// Ten sandstone sample identities used for image classification.
    pub fn sandstones() -> Self {
        let names = [
            "bandera_brown",
            "bandera_gray",
            "bentheimer",
            "berea",
            "berea_sister_gray",
            "berea_upper_gray",
            "buff_berea",
            "castlegate",
            "kirby",
            "leopard",
        ];
        let names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        let n = names.len();
        Self::new(names, default_colors(n)).expect("static palette is valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn colors(&self) -> &[Rgb] {
        &self.colors
    }

    pub fn color(&self, class: u8) -> Rgb {
        self.colors[class as usize]
    }

    pub fn index_of(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8)
    }

    /// Reorders classes: new class `i` is old class `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::invalid("permutation length differs from palette"));
        }
        Self::new(
            order.iter().map(|&i| self.names[i].clone()).collect(),
            order.iter().map(|&i| self.colors[i]).collect(),
        )
    }
}

/// One 2D grayscale slice with intensities normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraySlice {
    pixels: Array2<f32>,
    pub sample_id: String,
    pub slice_index: usize,
}

impl GraySlice {
    pub fn new(pixels: Array2<f32>, sample_id: impl Into<String>, slice_index: usize) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::invalid(format!("empty slice {h}x{w}")));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!(
                "slice intensities must be finite and within [0, 1], found {v}"
            )));
        }
        Ok(Self {
            pixels,
            sample_id: sample_id.into(),
            slice_index,
        })
    }

    /// Builds a slice, clamping values into `[0, 1]`. Non-finite values are
    /// still rejected.
    pub fn from_clamped(pixels: Array2<f32>, sample_id: impl Into<String>, slice_index: usize) -> Result<Self> {
        Self::new(pixels.mapv(|v| if v.is_nan() { v } else { v.clamp(0.0, 1.0) }), sample_id, slice_index)
    }

    /// Same provenance, new pixels.
    pub fn with_pixels(&self, pixels: Array2<f32>) -> Result<Self> {
        Self::new(pixels, self.sample_id.clone(), self.slice_index)
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f32> {
        self.pixels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn id(&self) -> String {
        format!("{}#{}", self.sample_id, self.slice_index)
    }
}

/// Per-pixel class indices tied to a palette.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    labels: Array2<u8>,
    palette: Arc<ClassPalette>,
}

impl LabelMask {
    pub fn new(labels: Array2<u8>, palette: impl Into<Arc<ClassPalette>>) -> Result<Self> {
        let palette = palette.into();
        let n = palette.len();
        if let Some(v) = labels.iter().find(|&&v| v as usize >= n) {
            return Err(Error::invalid(format!(
                "label {v} out of range for a {n}-class palette"
            )));
        }
        Ok(Self { labels, palette })
    }

    pub fn filled(h: usize, w: usize, class: u8, palette: impl Into<Arc<ClassPalette>>) -> Result<Self> {
        Self::new(Array2::from_elem((h, w), class), palette)
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn into_labels(self) -> Array2<u8> {
        self.labels
    }

    pub fn palette(&self) -> &ClassPalette {
        &self.palette
    }

    pub fn palette_arc(&self) -> Arc<ClassPalette> {
        Arc::clone(&self.palette)
    }

    pub fn n_classes(&self) -> usize {
        self.palette.len()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn with_labels(&self, labels: Array2<u8>) -> Result<Self> {
        Self::new(labels, self.palette_arc())
    }

    /// Pixel count per class.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.n_classes()];
        for &v in &self.labels {
            counts[v as usize] += 1;
        }
        counts
    }

    /// Relabels through `map[old] = new` into a different palette.
    pub fn remap(&self, map: &[u8], palette: impl Into<Arc<ClassPalette>>) -> Result<Self> {
        if map.len() < self.n_classes() {
            return Err(Error::invalid("class map shorter than palette"));
        }
        Self::new(self.labels.mapv(|v| map[v as usize]), palette)
    }
}

/// Dense `H x W x k` feature tensor with extractor provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array3<f32>,
    pub extractor: String,
    pub source: Option<String>,
}

impl FeatureMap {
    pub fn new(values: Array3<f32>, extractor: impl Into<String>) -> Result<Self> {
        let (h, w, k) = values.dim();
        if h == 0 || w == 0 || k == 0 {
            return Err(Error::invalid(format!("empty feature map {h}x{w}x{k}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(Self {
            values,
            extractor: extractor.into(),
            source: None,
        })
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f32> {
        self.values
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }

    pub fn pixel(&self, y: usize, x: usize) -> ArrayView1<'_, f32> {
        self.values.slice(ndarray::s![y, x, ..])
    }
}
