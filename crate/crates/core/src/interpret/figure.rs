//! A small display list that renders to PNG (raster) and PDF (vector).
//!
//! Text uses an 8x8 bitmap font in both outputs, so layouts match exactly
//! and re-rendering is byte-identical.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use image::RgbImage;

use crate::error::Result;
use crate::types::Rgb;

pub const GLYPH: u32 = 8;

pub const BLACK: Rgb = Rgb([0, 0, 0]);
pub const WHITE: Rgb = Rgb([255, 255, 255]);
pub const GRAY: Rgb = Rgb([160, 160, 160]);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    Start,
    Middle,
    End,
}

#[derive(Debug, Clone)]
enum Op {
    Rect {
        x: f32,
        y: f32,
        w: f32,
        h: f32,
        fill: Option<Rgb>,
        stroke: Option<Rgb>,
    },
    Line {
        x0: f32,
        y0: f32,
        x1: f32,
        y1: f32,
        color: Rgb,
        width: f32,
    },
    Dot {
        x: f32,
        y: f32,
        r: f32,
        color: Rgb,
    },
    Text {
        x: f32,
        y: f32,
        text: String,
        scale: u32,
        color: Rgb,
    },
    Image {
        x: f32,
        y: f32,
        w: f32,
        h: f32,
        img: Arc<RgbImage>,
    },
}

/// Drawing surface in pixel units, origin top-left.
#[derive(Debug, Clone)]
pub struct Figure {
    pub width: u32,
    pub height: u32,
    ops: Vec<Op>,
}

pub fn text_width(text: &str, scale: u32) -> f32 {
    (text.chars().count() as u32 * GLYPH * scale) as f32
}

fn glyph(c: char) -> [u8; 8] {
    let i = c as usize;
    if i < 128 {
        font8x8::legacy::BASIC_LEGACY[i]
    } else {
        font8x8::legacy::BASIC_LEGACY[b'?' as usize]
    }
}

/// Horizontal pixel runs `(col, row, len)` of a string in glyph units.
fn text_runs(text: &str) -> Vec<(u32, u32, u32)> {
    let mut runs = Vec::new();
    for (ci, c) in text.chars().enumerate() {
        let g = glyph(c);
        for (row, bits) in g.iter().enumerate() {
            let mut col = 0;
            while col < 8 {
                if bits >> col & 1 == 1 {
                    let start = col;
                    while col < 8 && bits >> col & 1 == 1 {
                        col += 1;
                    }
                    runs.push((ci as u32 * GLYPH + start, row as u32, col - start));
                } else {
                    col += 1;
                }
            }
        }
    }
    runs
}

impl Figure {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            ops: Vec::new(),
        }
    }

    pub fn rect(&mut self, x: f32, y: f32, w: f32, h: f32, fill: Option<Rgb>, stroke: Option<Rgb>) {
        self.ops.push(Op::Rect { x, y, w, h, fill, stroke });
    }

    pub fn line(&mut self, x0: f32, y0: f32, x1: f32, y1: f32, color: Rgb, width: f32) {
        self.ops.push(Op::Line {
            x0,
            y0,
            x1,
            y1,
            color,
            width,
        });
    }

    pub fn dot(&mut self, x: f32, y: f32, r: f32, color: Rgb) {
        self.ops.push(Op::Dot { x, y, r, color });
    }

    /// Text with its top edge at `y`, horizontally anchored at `x`.
    pub fn text(&mut self, x: f32, y: f32, text: &str, scale: u32, color: Rgb, anchor: Anchor) {
        let w = text_width(text, scale);
        let x = match anchor {
            Anchor::Start => x,
            Anchor::Middle => x - w / 2.0,
            Anchor::End => x - w,
        };
        self.ops.push(Op::Text {
            x,
            y,
            text: text.to_string(),
            scale,
            color,
        });
    }

    pub fn image(&mut self, x: f32, y: f32, w: f32, h: f32, img: Arc<RgbImage>) {
        self.ops.push(Op::Image { x, y, w, h, img });
    }

    pub fn n_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn render(&self) -> RgbImage {
        let mut c = RgbImage::from_pixel(self.width, self.height, image::Rgb(WHITE.0));
        let (wi, hi) = (self.width as i64, self.height as i64);
        let mut put = |c: &mut RgbImage, x: i64, y: i64, col: Rgb| {
            if x >= 0 && y >= 0 && x < wi && y < hi {
                c.put_pixel(x as u32, y as u32, image::Rgb(col.0));
            }
        };
        let fill_rect = |c: &mut RgbImage, put: &mut dyn FnMut(&mut RgbImage, i64, i64, Rgb), x: f32, y: f32, w: f32, h: f32, col: Rgb| {
            let (x0, y0) = (x.round() as i64, y.round() as i64);
            let (x1, y1) = ((x + w).round() as i64, (y + h).round() as i64);
            for yy in y0..y1 {
                for xx in x0..x1 {
                    put(c, xx, yy, col);
                }
            }
        };
        for op in &self.ops {
            match op {
                Op::Rect { x, y, w, h, fill, stroke } => {
                    if let Some(f) = fill {
                        fill_rect(&mut c, &mut put, *x, *y, *w, *h, *f);
                    }
                    if let Some(s) = stroke {
                        fill_rect(&mut c, &mut put, *x, *y, *w, 1.0, *s);
                        fill_rect(&mut c, &mut put, *x, *y + *h - 1.0, *w, 1.0, *s);
                        fill_rect(&mut c, &mut put, *x, *y, 1.0, *h, *s);
                        fill_rect(&mut c, &mut put, *x + *w - 1.0, *y, 1.0, *h, *s);
                    }
                }
                Op::Line {
                    x0,
                    y0,
                    x1,
                    y1,
                    color,
                    width,
                } => {
                    let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
                    let steps = (len.ceil() as usize).max(1) * 2;
                    let half = (width / 2.0).max(0.5);
                    for i in 0..=steps {
                        let t = i as f32 / steps as f32;
                        let (px, py) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
                        fill_rect(&mut c, &mut put, px - half, py - half, 2.0 * half, 2.0 * half, *color);
                    }
                }
                Op::Dot { x, y, r, color } => {
                    let ri = r.ceil() as i64;
                    let (cx, cy) = (x.round() as i64, y.round() as i64);
                    for dy in -ri..=ri {
                        for dx in -ri..=ri {
                            if ((dx * dx + dy * dy) as f32) <= r * r {
                                put(&mut c, cx + dx, cy + dy, *color);
                            }
                        }
                    }
                }
                Op::Text {
                    x,
                    y,
                    text,
                    scale,
                    color,
                } => {
                    let s = *scale as f32;
                    for (col, row, len) in text_runs(text) {
                        fill_rect(&mut c, &mut put, x + col as f32 * s, y + row as f32 * s, len as f32 * s, s, *color);
                    }
                }
                Op::Image { x, y, w, h, img } => {
                    let (x0, y0) = (x.round() as i64, y.round() as i64);
                    let (pw, ph) = (w.round().max(1.0) as i64, h.round().max(1.0) as i64);
                    for yy in 0..ph {
                        let sy = (yy * img.height() as i64 / ph) as u32;
                        for xx in 0..pw {
                            let sx = (xx * img.width() as i64 / pw) as u32;
                            put(&mut c, x0 + xx, y0 + yy, Rgb(img.get_pixel(sx, sy).0));
                        }
                    }
                }
            }
        }
        c
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.render().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// Single-page PDF with vector paths and embedded raster images.
    pub fn to_pdf(&self) -> Result<Vec<u8>> {
        let h = self.height as f32;
        let mut content = String::new();
        let mut images: Vec<&RgbImage> = Vec::new();
        let col = |c: Rgb| format!("{:.4} {:.4} {:.4}", c.0[0] as f32 / 255.0, c.0[1] as f32 / 255.0, c.0[2] as f32 / 255.0);
        for op in &self.ops {
            match op {
                Op::Rect { x, y, w, h: rh, fill, stroke } => {
                    if let Some(f) = fill {
                        let _ = writeln!(content, "{} rg {x:.2} {:.2} {w:.2} {rh:.2} re f", col(*f), h - y - rh);
                    }
                    if let Some(s) = stroke {
                        let _ = writeln!(
                            content,
                            "{} RG 1 w {:.2} {:.2} {:.2} {:.2} re S",
                            col(*s),
                            x + 0.5,
                            h - y - rh + 0.5,
                            w - 1.0,
                            rh - 1.0
                        );
                    }
                }
                Op::Line {
                    x0,
                    y0,
                    x1,
                    y1,
                    color,
                    width,
                } => {
                    let _ = writeln!(
                        content,
                        "{} RG {width:.2} w {x0:.2} {:.2} m {x1:.2} {:.2} l S",
                        col(*color),
                        h - y0,
                        h - y1
                    );
                }
                Op::Dot { x, y, r, color } => {
                    // four Bezier arcs
                    let k = 0.5523 * r;
                    let cy = h - y;
                    let _ = writeln!(
                        content,
                        "{c} rg {a:.2} {cy:.2} m {a:.2} {b1:.2} {c1:.2} {t:.2} {x:.2} {t:.2} c {c2:.2} {t:.2} {d:.2} {b1:.2} {d:.2} {cy:.2} c {d:.2} {b2:.2} {c2:.2} {bo:.2} {x:.2} {bo:.2} c {c1:.2} {bo:.2} {a:.2} {b2:.2} {a:.2} {cy:.2} c f",
                        c = col(*color),
                        a = x - r,
                        d = x + r,
                        t = cy + r,
                        bo = cy - r,
                        b1 = cy + k,
                        b2 = cy - k,
                        c1 = x - k,
                        c2 = x + k,
                    );
                }
                Op::Text {
                    x,
                    y,
                    text,
                    scale,
                    color,
                } => {
                    let s = *scale as f32;
                    let _ = writeln!(content, "{} rg", col(*color));
                    for (cx, row, len) in text_runs(text) {
                        let _ = writeln!(
                            content,
                            "{:.2} {:.2} {:.2} {s:.2} re",
                            x + cx as f32 * s,
                            h - (y + (row + 1) as f32 * s),
                            len as f32 * s
                        );
                    }
                    content.push_str("f\n");
                }
                Op::Image { x, y, w, h: ih, img } => {
                    let _ = writeln!(content, "q {w:.2} 0 0 {ih:.2} {x:.2} {:.2} cm /Im{} Do Q", h - y - ih, images.len());
                    images.push(img);
                }
            }
        }
        let deflate = |bytes: &[u8]| -> Result<Vec<u8>> {
            let mut e = ZlibEncoder::new(Vec::new(), Compression::default());
            e.write_all(bytes)?;
            Ok(e.finish()?)
        };
        // objects: 1 catalog, 2 pages, 3 page, 4 content, 5.. images
        let mut objs: Vec<Vec<u8>> = Vec::new();
        objs.push(b"<< /Type /Catalog /Pages 2 0 R >>".to_vec());
        objs.push(b"<< /Type /Pages /Kids [3 0 R] /Count 1 >>".to_vec());
        let xobjs: String = (0..images.len()).map(|i| format!("/Im{i} {} 0 R ", 5 + i)).collect();
        objs.push(
            format!(
                "<< /Type /Page /Parent 2 0 R /MediaBox [0 0 {} {}] /Contents 4 0 R /Resources << /XObject << {xobjs}>> >> >>",
                self.width, self.height
            )
            .into_bytes(),
        );
        let stream = |dict: String, data: Vec<u8>| -> Vec<u8> {
            let mut o = format!("{dict} /Length {} >>\nstream\n", data.len()).into_bytes();
            o.extend(data);
            o.extend(b"\nendstream");
            o
        };
        objs.push(stream("<< /Filter /FlateDecode".into(), deflate(content.as_bytes())?));
        for img in &images {
            objs.push(stream(
                format!(
                    "<< /Type /XObject /Subtype /Image /Width {} /Height {} /ColorSpace /DeviceRGB /BitsPerComponent 8 /Filter /FlateDecode",
                    img.width(),
                    img.height()
                ),
                deflate(img.as_raw())?,
            ));
        }
        let mut out = b"%PDF-1.4\n".to_vec();
        let mut offsets = Vec::new();
        for (i, o) in objs.iter().enumerate() {
            offsets.push(out.len());
            out.extend(format!("{} 0 obj\n", i + 1).into_bytes());
            out.extend(o);
            out.extend(b"\nendobj\n");
        }
        let xref = out.len();
        out.extend(format!("xref\n0 {}\n0000000000 65535 f \n", objs.len() + 1).into_bytes());
        for off in offsets {
            out.extend(format!("{off:010} 00000 n \n").into_bytes());
        }
        out.extend(format!("trailer\n<< /Size {} /Root 1 0 R >>\nstartxref\n{xref}\n%%EOF\n", objs.len() + 1).into_bytes());
        Ok(out)
    }

    /// Writes `<stem>.png` and `<stem>.pdf`.
    pub fn save(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        if let Some(d) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(d)?;
        }
        let png = stem.with_extension("png");
        let pdf = stem.with_extension("pdf");
        std::fs::write(&png, self.to_png()?)?;
        std::fs::write(&pdf, self.to_pdf()?)?;
        Ok((png, pdf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Figure {
        let mut f = Figure::new(64, 48);
        f.rect(2.0, 2.0, 20.0, 10.0, Some(Rgb([255, 0, 0])), Some(BLACK));
        f.line(0.0, 40.0, 63.0, 40.0, BLACK, 1.0);
        f.dot(40.0, 20.0, 3.0, Rgb([0, 0, 255]));
        f.text(32.0, 30.0, "Ab", 1, BLACK, Anchor::Middle);
        f.image(50.0, 2.0, 8.0, 8.0, Arc::new(RgbImage::from_pixel(2, 2, image::Rgb([0, 255, 0]))));
        f
    }

    #[test]
    fn raster_draws_ops() {
        let img = sample().render();
        assert_eq!(img.get_pixel(10, 6).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(2, 2).0, [0, 0, 0]);
        assert_eq!(img.get_pixel(40, 20).0, [0, 0, 255]);
        assert_eq!(img.get_pixel(53, 5).0, [0, 255, 0]);
        assert_eq!(img.get_pixel(60, 30).0, [255, 255, 255]);
    }

    #[test]
    fn outputs_are_byte_identical() {
        assert_eq!(sample().to_png().unwrap(), sample().to_png().unwrap());
        let a = sample().to_pdf().unwrap();
        assert_eq!(a, sample().to_pdf().unwrap());
        assert!(a.starts_with(b"%PDF-1.4"));
        assert!(a.ends_with(b"%%EOF\n"));
    }
}
