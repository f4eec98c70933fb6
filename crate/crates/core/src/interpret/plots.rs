//! Figure builders: sweep curves, embedding scatters, confusion heatmaps,
//! mask galleries and PCA views.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::figure::{text_width, Anchor, Figure, BLACK, GRAY, GLYPH};
use super::pca::PcaView;
use crate::bench::Aggregate;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::types::{default_colors, GraySlice, LabelMask, Rgb};

pub const CROP: usize = 128;

pub fn gray_to_rgb(slice: &GraySlice) -> RgbImage {
    let (h, w) = slice.dim();
    let px = slice.pixels();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (px[[y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([v, v, v])
    })
}

/// Colors each pixel with its class's palette color.
pub fn mask_to_rgb(mask: &LabelMask) -> RgbImage {
    let (h, w) = mask.dim();
    let l = mask.labels();
    let pal = mask.palette();
    RgbImage::from_fn(w as u32, h as u32, |x, y| image::Rgb(pal.color(l[[y as usize, x as usize]]).0))
}

fn label_order(labels: &[String]) -> Vec<String> {
    let mut seen = Vec::new();
    for l in labels {
        if !seen.contains(l) {
            seen.push(l.clone());
        }
    }
    seen
}

/// `index,label,x,y` rows for external replotting.
pub fn coords_csv(coords: &Array2<f64>, labels: &[String]) -> String {
    let mut s = String::from("index,label,x,y\n");
    for (i, r) in coords.outer_iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{}", crate::metrics::csv_escape(&labels[i]), r[0], r[1]);
    }
    s
}

struct Frame {
    x0: f32,
    y0: f32,
    w: f32,
    h: f32,
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Frame {
    fn fit(coords: &Array2<f64>, x0: f32, y0: f32, w: f32, h: f32) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for r in coords.outer_iter() {
            for k in 0..2 {
                lo[k] = lo[k].min(r[k]);
                hi[k] = hi[k].max(r[k]);
            }
        }
        for k in 0..2 {
            let pad = ((hi[k] - lo[k]) * 0.05).max(1e-9);
            lo[k] -= pad;
            hi[k] += pad;
        }
        Self { x0, y0, w, h, lo, hi }
    }

    fn map(&self, x: f64, y: f64) -> (f32, f32) {
        let tx = (x - self.lo[0]) / (self.hi[0] - self.lo[0]);
        let ty = (y - self.lo[1]) / (self.hi[1] - self.lo[1]);
        (self.x0 + tx as f32 * self.w, self.y0 + (1.0 - ty as f32) * self.h)
    }
}

fn check_coords(coords: &Array2<f64>, labels: &[String]) -> Result<()> {
    if coords.ncols() != 2 {
        return Err(Error::shape("N x 2 coordinates", format!("N x {}", coords.ncols())));
    }
    if coords.nrows() != labels.len() {
        return Err(Error::shape(coords.nrows(), labels.len()));
    }
    if coords.nrows() == 0 {
        return Err(Error::invalid("no points to plot"));
    }
    Ok(())
}

fn legend(fig: &mut Figure, x: f32, y: f32, names: &[String], colors: &[Rgb]) {
    for (i, (n, c)) in names.iter().zip(colors).enumerate() {
        let yy = y + i as f32 * 14.0;
        fig.rect(x, yy, 10.0, 10.0, Some(*c), None);
        fig.text(x + 14.0, yy + 1.0, n, 1, BLACK, Anchor::Start);
    }
}

/// Embedding scatter colored by label.
pub fn scatter_figure(coords: &Array2<f64>, labels: &[String], title: &str) -> Result<Figure> {
    check_coords(coords, labels)?;
    let names = label_order(labels);
    let colors = default_colors(names.len());
    let legend_w = names.iter().map(|n| text_width(n, 1)).fold(0.0, f32::max) + 30.0;
    let (pw, ph) = (480.0, 480.0);
    let mut fig = Figure::new((pw + legend_w + 40.0) as u32, (ph + 60.0) as u32);
    fig.text((pw + 40.0) / 2.0, 8.0, title, 2, BLACK, Anchor::Middle);
    let fr = Frame::fit(coords, 20.0, 40.0, pw, ph - 20.0);
    fig.rect(fr.x0, fr.y0, fr.w, fr.h, None, Some(GRAY));
    for (r, l) in coords.outer_iter().zip(labels) {
        let k = names.iter().position(|n| n == l).unwrap_or(0);
        let (x, y) = fr.map(r[0], r[1]);
        fig.dot(x, y, 2.5, colors[k]);
    }
    legend(&mut fig, pw + 30.0, 40.0, &names, &colors);
    Ok(fig)
}

/// Central `size` x `size` window (smaller when the slice is smaller).
pub fn center_crop_slice(slice: &GraySlice, size: usize) -> Result<GraySlice> {
    let (h, w) = slice.dim();
    let (ch, cw) = (size.min(h), size.min(w));
    let (y0, x0) = ((h - ch) / 2, (w - cw) / 2);
    slice.with_pixels(slice.pixels().slice(ndarray::s![y0..y0 + ch, x0..x0 + cw]).to_owned())
}

/// Per label: the point nearest the label's centroid, with a 128x128 center
/// crop of its slice placed at the centroid.
pub fn barycenter_figure(coords: &Array2<f64>, labels: &[String], slices: &[GraySlice]) -> Result<Figure> {
    check_coords(coords, labels)?;
    if slices.len() != labels.len() {
        return Err(Error::shape(labels.len(), slices.len()));
    }
    let names = label_order(labels);
    let colors = default_colors(names.len());
    let (pw, ph) = (640.0, 640.0);
    let thumb = 96.0;
    let mut fig = Figure::new(pw as u32 + 200, ph as u32 + 60);
    fig.text(pw / 2.0, 8.0, "barycenters", 2, BLACK, Anchor::Middle);
    let fr = Frame::fit(coords, thumb / 2.0 + 10.0, 40.0 + thumb / 2.0, pw - thumb - 20.0, ph - thumb - 20.0);
    for (r, l) in coords.outer_iter().zip(labels) {
        let k = names.iter().position(|n| n == l).unwrap_or(0);
        let (x, y) = fr.map(r[0], r[1]);
        fig.dot(x, y, 1.5, colors[k]);
    }
    for (k, name) in names.iter().enumerate() {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| &labels[i] == name).collect();
        let c = [0, 1].map(|d| idx.iter().map(|&i| coords[[i, d]]).sum::<f64>() / idx.len() as f64);
        let best = idx
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let da = (coords[[a, 0]] - c[0]).powi(2) + (coords[[a, 1]] - c[1]).powi(2);
                let db = (coords[[b, 0]] - c[0]).powi(2) + (coords[[b, 1]] - c[1]).powi(2);
                da.total_cmp(&db)
            })
            .expect("label has members");
        let (x, y) = fr.map(c[0], c[1]);
        let crop = gray_to_rgb(&center_crop_slice(&slices[best], CROP)?);
        fig.image(x - thumb / 2.0, y - thumb / 2.0, thumb, thumb, Arc::new(crop));
        fig.rect(x - thumb / 2.0 - 2.0, y - thumb / 2.0 - 2.0, thumb + 4.0, thumb + 4.0, None, Some(colors[k]));
    }
    legend(&mut fig, pw + 10.0, 40.0, &names, &colors);
    Ok(fig)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    /// Percent of each GT row.
    #[default]
    Row,
    None,
}

/// Heatmap cell values; rows are GT classes, columns predictions.
pub fn confusion_values(report: &EvalReport, normalize: Normalize) -> Vec<Vec<f64>> {
    match normalize {
        Normalize::Row => report
            .confusion
            .row_normalized()
            .into_iter()
            .map(|r| r.into_iter().map(|v| v * 100.0).collect())
            .collect(),
        Normalize::None => report
            .confusion
            .rows()
            .into_iter()
            .map(|r| r.into_iter().map(|v| v as f64).collect())
            .collect(),
    }
}

pub fn render_confusion(report: &EvalReport, normalize: Normalize) -> Figure {
    let vals = confusion_values(report, normalize);
    let n = vals.len();
    let cell = 64.0;
    let label_w = report.class_names.iter().map(|s| text_width(s, 1)).fold(0.0, f32::max) + 16.0;
    let (ox, oy) = (label_w + 20.0, 60.0);
    let mut fig = Figure::new((ox + n as f32 * cell + 20.0) as u32, (oy + n as f32 * cell + 50.0) as u32);
    let title = if report.method_name.is_empty() { "confusion".to_string() } else { report.method_name.clone() };
    fig.text(fig.width as f32 / 2.0, 8.0, &title, 2, BLACK, Anchor::Middle);
    let vmax = match normalize {
        Normalize::Row => 100.0,
        Normalize::None => vals.iter().flatten().copied().fold(0.0, f64::max).max(1.0),
    };
    for (i, row) in vals.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = (v / vmax).clamp(0.0, 1.0);
            let col = Rgb([
                (247.0 - t * (247.0 - 8.0)) as u8,
                (251.0 - t * (251.0 - 48.0)) as u8,
                (255.0 - t * (255.0 - 107.0)) as u8,
            ]);
            let (x, y) = (ox + j as f32 * cell, oy + i as f32 * cell);
            fig.rect(x, y, cell, cell, Some(col), Some(GRAY));
            let txt = match normalize {
                Normalize::Row => format!("{v:.1}%"),
                Normalize::None => format!("{v:.0}"),
            };
            let tc = if t > 0.5 { Rgb([255, 255, 255]) } else { BLACK };
            fig.text(x + cell / 2.0, y + cell / 2.0 - 4.0, &txt, 1, tc, Anchor::Middle);
        }
    }
    for (i, name) in report.class_names.iter().enumerate() {
        fig.text(ox - 8.0, oy + i as f32 * cell + cell / 2.0 - 4.0, name, 1, BLACK, Anchor::End);
        let short: String = name.chars().take((cell / GLYPH as f32) as usize).collect();
        fig.text(ox + i as f32 * cell + cell / 2.0, oy - 14.0, &short, 1, BLACK, Anchor::Middle);
    }
    fig.text(ox + n as f32 * cell / 2.0, oy + n as f32 * cell + 16.0, "predicted", 1, BLACK, Anchor::Middle);
    fig.text(8.0, oy - 14.0, "true", 1, BLACK, Anchor::Start);
    fig
}

/// One gallery row: the input slice, its GT and any number of predictions.
#[derive(Debug, Clone)]
pub struct GalleryRow {
    pub image: GraySlice,
    pub gt: LabelMask,
    pub predictions: Vec<LabelMask>,
}

/// Grid with one row per sample; `captions` label the columns
/// (image, GT, then one per prediction).
pub fn mask_gallery(rows: &[GalleryRow], captions: &[String]) -> Result<Figure> {
    let first = rows.first().ok_or_else(|| Error::invalid("mask gallery needs at least one row"))?;
    let ncol = 2 + first.predictions.len();
    if captions.len() != ncol {
        return Err(Error::shape(format!("{ncol} captions"), captions.len()));
    }
    for (r, row) in rows.iter().enumerate() {
        if row.predictions.len() + 2 != ncol {
            return Err(Error::shape(format!("{ncol} columns"), format!("{} in row {r}", row.predictions.len() + 2)));
        }
        let d = row.image.dim();
        for m in std::iter::once(&row.gt).chain(&row.predictions) {
            if m.dim() != d {
                return Err(Error::shape(format!("{d:?}"), format!("{:?} in row {r}", m.dim())));
            }
        }
    }
    let (h, w) = first.image.dim();
    // integer down-scaling keeps palette colors exact under nearest sampling
    let step = h.max(w).div_ceil(256).max(1);
    let (th, tw) = ((h / step).max(1) as f32, (w / step).max(1) as f32);
    let gap = 8.0;
    let top = 30.0;
    let mut fig = Figure::new(
        (ncol as f32 * (tw + gap) + gap) as u32,
        (top + rows.len() as f32 * (th + gap) + gap) as u32,
    );
    for (c, cap) in captions.iter().enumerate() {
        fig.text(gap + c as f32 * (tw + gap) + tw / 2.0, 10.0, cap, 1, BLACK, Anchor::Middle);
    }
    for (r, row) in rows.iter().enumerate() {
        let y = top + r as f32 * (th + gap);
        let tile = |img: RgbImage| -> Arc<RgbImage> {
            if step == 1 {
                Arc::new(img)
            } else {
                Arc::new(RgbImage::from_fn(tw as u32, th as u32, |x, y| *img.get_pixel(x * step as u32, y * step as u32)))
            }
        };
        let mut imgs = vec![gray_to_rgb(&row.image), mask_to_rgb(&row.gt)];
        imgs.extend(row.predictions.iter().map(mask_to_rgb));
        for (c, img) in imgs.into_iter().enumerate() {
            fig.image(gap + c as f32 * (tw + gap), y, tw, th, tile(img));
        }
    }
    Ok(fig)
}

pub fn pca_figure(view: &PcaView, title: &str) -> Figure {
    let (w, h) = (view.rgb.width(), view.rgb.height());
    let scale = (384 / w.max(h)).max(1);
    let (dw, dh) = ((w * scale) as f32, (h * scale) as f32);
    let mut fig = Figure::new(dw as u32 + 20, dh as u32 + 56);
    fig.text(dw / 2.0 + 10.0, 6.0, title, 1, BLACK, Anchor::Middle);
    fig.image(10.0, 24.0, dw, dh, Arc::new(view.rgb.clone()));
    let ev = view.explained_variance;
    let caption = format!("var {:.3} {:.3} {:.3}", ev[0], ev[1], ev[2]);
    fig.text(dw / 2.0 + 10.0, dh + 32.0, &caption, 1, BLACK, Anchor::Middle);
    fig
}

const LEFT: f32 = 60.0;
const TOP: f32 = 40.0;
const PLOT_W: f32 = 520.0;
const PLOT_H: f32 = 360.0;

/// Mean IoU against training-set size (log axis), one line per method,
/// error bars at one standard deviation across seeds.
pub fn sweep_figure(rows: &[Aggregate]) -> Result<Figure> {
    if rows.is_empty() {
        return Err(Error::invalid("sweep figure needs at least one result row"));
    }
    let methods = label_order(&rows.iter().map(|r| r.method.clone()).collect::<Vec<_>>());
    let colors = default_colors(methods.len());
    let sizes: BTreeSet<usize> = rows.iter().map(|r| r.n_train.max(1)).collect();
    let lo = (*sizes.first().unwrap() as f64).log10();
    let hi = (*sizes.last().unwrap() as f64).log10();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |n: usize| LEFT + 20.0 + ((n.max(1) as f64).log10() - lo) as f32 / span as f32 * (PLOT_W - 40.0);
    let py = |v: f64| TOP + (1.0 - v.clamp(0.0, 1.0) as f32) * PLOT_H;
    let legend_w = methods.iter().map(|n| text_width(n, 1)).fold(0.0, f32::max) + 30.0;
    let mut fig = Figure::new((LEFT + PLOT_W + legend_w + 20.0) as u32, (TOP + PLOT_H + 60.0) as u32);
    fig.text(LEFT + PLOT_W / 2.0, 10.0, "mean IoU vs training images", 2, BLACK, Anchor::Middle);
    fig.rect(LEFT, TOP, PLOT_W, PLOT_H, None, Some(BLACK));
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let y = py(v);
        fig.line(LEFT - 4.0, y, LEFT, y, BLACK, 1.0);
        fig.text(LEFT - 8.0, y - 4.0, &format!("{v:.1}"), 1, BLACK, Anchor::End);
    }
    for &n in &sizes {
        let x = px(n);
        fig.line(x, TOP + PLOT_H, x, TOP + PLOT_H + 4.0, BLACK, 1.0);
        fig.text(x, TOP + PLOT_H + 8.0, &n.to_string(), 1, BLACK, Anchor::Middle);
    }
    fig.text(LEFT + PLOT_W / 2.0, TOP + PLOT_H + 28.0, "training images (log scale)", 1, BLACK, Anchor::Middle);
    for (m, name) in methods.iter().enumerate() {
        let mut pts: Vec<&Aggregate> = rows.iter().filter(|r| &r.method == name).collect();
        pts.sort_by_key(|r| r.n_train);
        let c = colors[m];
        for w in pts.windows(2) {
            fig.line(px(w[0].n_train), py(w[0].mean_iou), px(w[1].n_train), py(w[1].mean_iou), c, 1.5);
        }
        for r in &pts {
            let x = px(r.n_train);
            if r.std_iou > 0.0 {
                let (a, b) = (py(r.mean_iou - r.std_iou), py(r.mean_iou + r.std_iou));
                fig.line(x, a, x, b, c, 1.0);
                fig.line(x - 3.0, a, x + 3.0, a, c, 1.0);
                fig.line(x - 3.0, b, x + 3.0, b, c, 1.0);
            }
            fig.dot(x, py(r.mean_iou), 3.0, c);
        }
    }
    legend(&mut fig, LEFT + PLOT_W + 12.0, TOP, &methods, &colors);
    Ok(fig)
}
