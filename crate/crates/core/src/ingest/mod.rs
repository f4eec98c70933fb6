//! Data ingestion: TIFF conversion, contrast normalization, catalog and splits.

pub mod catalog;
pub mod contrast;
pub mod convert;
pub mod io;

pub use catalog::{
    make_classification_split, make_split, CatalogEntry, DatasetCatalog, SampleRole, SliceRef, SplitSpec,
};
pub use contrast::{auto_contrast, DEFAULT_SATURATION};
pub use convert::{convert, convert_labels, read_tiff_pages, ConvertManifest, MANIFEST_FILE};
pub use io::{load_features, load_mask, load_slice, save_features, save_mask, save_slice};
