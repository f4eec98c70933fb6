//! Embedding analysis and static figure output.

pub mod figure;
pub mod pca;
pub mod plots;
pub mod tsne;

pub use figure::{Anchor, Figure};
pub use pca::{pca_rgb, PcaView};
pub use plots::{
    barycenter_figure, center_crop_slice, confusion_values, coords_csv, gray_to_rgb, mask_gallery, mask_to_rgb, pca_figure,
    render_confusion, scatter_figure, sweep_figure, GalleryRow, Normalize,
};
pub use tsne::{tsne_embed, EmbeddingSet, TsneConfig, TsneInit};
