//! TIFF to array-file conversion.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult};

use super::io::save_slice;
use crate::error::{Error, Result};
use crate::types::GraySlice;

/// Per-slice provenance written next to the converted arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertedSlice {
    pub file: String,
    pub source: String,
    pub page: usize,
    pub bit_depth: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertManifest {
    pub slices: Vec<ConvertedSlice>,
}

pub const MANIFEST_FILE: &str = "convert_manifest.json";

/// A decoded TIFF page before normalization.
pub struct RawPage {
    pub width: usize,
    pub height: usize,
    pub bit_depth: u8,
    pub data: RawData,
}

pub enum RawData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl RawPage {
    /// Integer data divided by the bit-depth maximum; float data clamped to `[0, 1]`.
    pub fn normalized(&self) -> Array2<f32> {
        let v: Vec<f32> = match &self.data {
            RawData::U8(d) => d.iter().map(|&x| x as f32 / u8::MAX as f32).collect(),
            RawData::U16(d) => d.iter().map(|&x| (x as f64 / u16::MAX as f64) as f32).collect(),
            RawData::F32(d) => d.iter().map(|&x| x.clamp(0.0, 1.0)).collect(),
        };
        Array2::from_shape_vec((self.height, self.width), v).expect("decoder returned full page")
    }

    /// Integer values as class labels; fails on values above 255.
    pub fn labels(&self) -> Result<Array2<u8>> {
        let v: Vec<u8> = match &self.data {
            RawData::U8(d) => d.clone(),
            RawData::U16(d) => d
                .iter()
                .map(|&x| u8::try_from(x).map_err(|_| Error::invalid(format!("label {x} exceeds 255"))))
                .collect::<Result<_>>()?,
            RawData::F32(_) => return Err(Error::invalid("float TIFF cannot hold labels")),
        };
        Ok(Array2::from_shape_vec((self.height, self.width), v).expect("decoder returned full page"))
    }
}

/// Reads every page of a grayscale TIFF.
pub fn read_tiff_pages(path: &Path) -> Result<Vec<RawPage>> {
    let mut dec = Decoder::new(BufReader::new(File::open(path)?))?;
    let mut pages = Vec::new();
    loop {
        let (w, h) = dec.dimensions()?;
        let color = dec.colortype()?;
        let bits = match color {
            tiff::ColorType::Gray(b) => b,
            other => return Err(Error::invalid(format!("{}: unsupported color type {other:?}", path.display()))),
        };
        let data = match dec.read_image()? {
            DecodingResult::U8(d) => RawData::U8(d),
            DecodingResult::U16(d) => RawData::U16(d),
            DecodingResult::F32(d) => RawData::F32(d),
            _ => return Err(Error::invalid(format!("{}: unsupported sample format", path.display()))),
        };
        pages.push(RawPage {
            width: w as usize,
            height: h as usize,
            bit_depth: bits,
            data,
        });
        if !dec.more_images() {
            break;
        }
        dec.next_image()?;
    }
    Ok(pages)
}

fn tiff_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingDataset {
            path: dir.to_path_buf(),
            hint: "expected a directory of TIFF slices or a multi-page TIFF volume".into(),
        });
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("tif") || e.eq_ignore_ascii_case("tiff"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn convert_dir(raw_dir: &Path, out_dir: &Path, labels: bool) -> Result<usize> {
    let files = tiff_files(raw_dir)?;
    fs::create_dir_all(out_dir)?;
    let mut manifest = ConvertManifest { slices: Vec::new() };
    for f in &files {
        let pages = match read_tiff_pages(f) {
            Ok(p) => p,
            Err(e) => {
                warn!("skipping unreadable file {}: {e}", f.display());
                continue;
            }
        };
        for (page_idx, page) in pages.iter().enumerate() {
            let idx = manifest.slices.len();
            let name = format!("slice_{idx:05}.npy");
            let path = out_dir.join(&name);
            if labels {
                ndarray_npy::write_npy(&path, &page.labels()?)?;
            } else {
                let slice = GraySlice::new(page.normalized(), "", idx)?;
                save_slice(&path, &slice)?;
            }
            manifest.slices.push(ConvertedSlice {
                file: name,
                source: f.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                page: page_idx,
                bit_depth: page.bit_depth,
            });
        }
    }
    if manifest.slices.is_empty() {
        return Err(Error::NoSlices(raw_dir.to_path_buf()));
    }
    fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest.slices.len())
}

/// Converts TIFF slices (or multi-page volumes) into one normalized array
/// file per slice, ordered by filename then page. Returns the slice count.
pub fn convert(raw_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<usize> {
    convert_dir(raw_dir.as_ref(), out_dir.as_ref(), false)
}

/// Like [`convert`] but keeps integer values as class labels.
pub fn convert_labels(raw_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<usize> {
    convert_dir(raw_dir.as_ref(), out_dir.as_ref(), true)
}
