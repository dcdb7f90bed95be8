//! Pixel grids, patchification and raw-image ingestion.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb};

use crate::autograd::Mat;
use crate::error::{Error, Result};

/// Row-major `H×W×C` pixels with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image", "height and width must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid("image", format!("{channels} channels; expected 1 or 3")));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(
                "image",
                format!("{} values for {height}x{width}x{channels}", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("image", format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// `m` flattened `P×P×C` patches in row-major grid order. Inside a patch the
/// layout is row-major `(py, px, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub p: usize,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl PatchGrid {
    pub fn new(p: usize, channels: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if p == 0 || rows == 0 || cols == 0 {
            return Err(Error::invalid("patches", "p, rows and cols must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid("patches", format!("{channels} channels; expected 1 or 3")));
        }
        if data.len() != rows * cols * p * p * channels {
            return Err(Error::invalid(
                "patches",
                format!(
                    "{} values for a {rows}x{cols} grid of {p}x{p}x{channels} patches",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            p,
            channels,
            rows,
            cols,
            data,
        })
    }

    /// Patch count.
    pub fn m(&self) -> usize {
        self.rows * self.cols
    }

    /// Length of one flattened patch, `P²·C`.
    pub fn dim(&self) -> usize {
        self.p * self.p * self.channels
    }

    pub fn patch(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.data[k * d..(k + 1) * d]
    }

    pub fn patch_mut(&mut self, k: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.data[k * d..(k + 1) * d]
    }

    /// `m × P²C` matrix view, copied.
    pub fn to_matrix(&self) -> Mat {
        Mat::from_shape_vec((self.m(), self.dim()), self.data.clone()).expect("shape checked at construction")
    }

    /// Same geometry, all values zero.
    pub fn zeroed(&self) -> Self {
        Self {
            data: vec![0.0; self.data.len()],
            ..self.clone()
        }
    }
}

/// Splits an image into non-overlapping `P×P` patches. `H` and `W` must be multiples of `P`.
pub fn patchify(img: &PixelGrid, p: usize) -> Result<PatchGrid> {
    if p == 0 || !img.height.is_multiple_of(p) || !img.width.is_multiple_of(p) {
        return Err(Error::invalid(
            "patch_size",
            format!(
                "{}x{} image is not divisible into {p}x{p} patches; crop first",
                img.height, img.width
            ),
        ));
    }
    let (rows, cols, c) = (img.height / p, img.width / p, img.channels);
    let mut data = Vec::with_capacity(img.data.len());
    for gr in 0..rows {
        for gc in 0..cols {
            for py in 0..p {
                let y = gr * p + py;
                let start = (y * img.width + gc * p) * c;
                data.extend_from_slice(&img.data[start..start + p * c]);
            }
        }
    }
    PatchGrid::new(p, c, rows, cols, data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(grid: &PatchGrid) -> PixelGrid {
    let (p, c) = (grid.p, grid.channels);
    let (height, width) = (grid.rows * p, grid.cols * p);
    let mut data = vec![0.0; height * width * c];
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let patch = grid.patch(gr * grid.cols + gc);
            for py in 0..p {
                let y = gr * p + py;
                let start = (y * width + gc * p) * c;
                data[start..start + p * c].copy_from_slice(&patch[py * p * c..(py + 1) * p * c]);
            }
        }
    }
    PixelGrid {
        height,
        width,
        channels: c,
        data,
    }
}

/// Reads a binary PPM (P6, maxval 255) or PGM (P5) image.
pub fn load_ppm(path: &Path) -> Result<PixelGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().channel_count() == 1 {
        let buf = img.to_luma32f();
        PixelGrid::new(h, w, 1, buf.into_raw().into_iter().map(f64::from).collect())
    } else {
        let buf = img.to_rgb32f();
        PixelGrid::new(h, w, 3, buf.into_raw().into_iter().map(f64::from).collect())
    }
}

/// Target size after scaling the shorter edge to `short_edge` while keeping the
/// longer edge at most `max_long_edge`, aspect ratio preserved.
pub fn resized_dims(height: usize, width: usize, short_edge: usize, max_long_edge: usize) -> (usize, usize) {
    let (short, long) = (height.min(width) as f64, height.max(width) as f64);
    let mut scale = short_edge as f64 / short;
    if long * scale > max_long_edge as f64 {
        scale = max_long_edge as f64 / long;
    }
    let h = ((height as f64 * scale).round() as usize).max(1);
    let w = ((width as f64 * scale).round() as usize).max(1);
    (h, w)
}

/// Bilinear resize followed by a center crop to the nearest multiples of `p`.
pub fn resize_and_crop(img: &PixelGrid, short_edge: usize, max_long_edge: usize, p: usize) -> Result<PixelGrid> {
    let (h, w) = resized_dims(img.height, img.width, short_edge, max_long_edge);
    let resized = resize_bilinear(img, h, w);
    center_crop_to_multiple(&resized, p)
}

pub fn resize_bilinear(img: &PixelGrid, height: usize, width: usize) -> PixelGrid {
    let data: Vec<f32> = img.data.iter().map(|&v| v as f32).collect();
    let (iw, ih) = (img.width as u32, img.height as u32);
    let out: Vec<f32> = if img.channels == 1 {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(iw, ih, data).expect("sized");
        imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle).into_raw()
    } else {
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_raw(iw, ih, data).expect("sized");
        imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle).into_raw()
    };
    PixelGrid {
        height,
        width,
        channels: img.channels,
        data: out.into_iter().map(|v| f64::from(v).clamp(0.0, 1.0)).collect(),
    }
}

pub fn center_crop_to_multiple(img: &PixelGrid, p: usize) -> Result<PixelGrid> {
    if p == 0 || img.height < p || img.width < p {
        return Err(Error::invalid(
            "patch_size",
            format!("{}x{} image is smaller than one {p}x{p} patch", img.height, img.width),
        ));
    }
    let (h, w) = (img.height / p * p, img.width / p * p);
    let (y0, x0) = ((img.height - h) / 2, (img.width - w) / 2);
    let mut data = Vec::with_capacity(h * w * img.channels);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            for c in 0..img.channels {
                data.push(img.at(y, x, c));
            }
        }
    }
    PixelGrid::new(h, w, img.channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> PixelGrid {
        let data = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
        PixelGrid::new(h, w, c, data).unwrap()
    }

    #[test]
    fn patch_count_for_vilt_geometry() {
        let img = PixelGrid::new(384, 640, 1, vec![0.0; 384 * 640]).unwrap();
        assert_eq!(patchify(&img, 32).unwrap().m(), 240);
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 32, 32, 3);
        let g = patchify(&img, 32).unwrap();
        assert_eq!(g.m(), 1);
        assert_eq!(g.patch(0), img.data.as_slice());
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let p = rng.random_range(1..=6);
            let (gr, gc) = (rng.random_range(1..=5), rng.random_range(1..=5));
            let c = if rng.random::<bool>() { 3 } else { 1 };
            let img = random_image(&mut rng, gr * p, gc * p, c);
            let g = patchify(&img, p).unwrap();
            assert_eq!(g.m(), gr * gc);
            assert_eq!(unpatchify(&g), img);
        }
    }

    #[test]
    fn patch_order_is_row_major() {
        // 2x4 single-channel image, P = 2: patches are the 2x2 blocks left to right
        let data: Vec<f64> = (0..8).map(|v| v as f64 / 10.0).collect();
        let img = PixelGrid::new(2, 4, 1, data).unwrap();
        let g = patchify(&img, 2).unwrap();
        assert_eq!(g.patch(0), &[0.0, 0.1, 0.4, 0.5]);
        assert_eq!(g.patch(1), &[0.2, 0.3, 0.6, 0.7]);
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let img = PixelGrid::new(33, 32, 1, vec![0.0; 33 * 32]).unwrap();
        assert!(patchify(&img, 32).is_err());
    }

    #[test]
    fn invalid_pixel_grids_are_rejected() {
        assert!(PixelGrid::new(0, 2, 1, vec![]).is_err());
        assert!(PixelGrid::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(PixelGrid::new(1, 1, 1, vec![1.5]).is_err());
    }

    #[test]
    fn resize_rule_matches_short_and_long_limits() {
        assert_eq!(resized_dims(480, 640, 384, 640), (384, 512));
        // very wide image: long edge capped
        assert_eq!(resized_dims(100, 1000, 384, 640), (64, 640));
        assert_eq!(resized_dims(640, 480, 384, 640), (512, 384));
    }

    #[test]
    fn crop_makes_dims_divisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 50, 70, 3);
        let out = resize_and_crop(&img, 40, 64, 8).unwrap();
        assert_eq!((out.height % 8, out.width % 8), (0, 0));
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(patchify(&out, 8).is_ok());
    }

    #[test]
    fn ppm_is_decoded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        std::fs::write(&path, bytes).unwrap();
        let img = load_ppm(&path).unwrap();
        assert_eq!((img.height, img.width, img.channels), (1, 2, 3));
        assert_eq!(img.data, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
