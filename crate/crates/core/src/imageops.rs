//! Small image-processing helpers shared by data generation, the encoders and
//! the perturbation suite. Images are handled as planar `f64` arrays with
//! values on the 0..=255 scale.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageFormat, RgbImage};
use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// (3, H, W) planes.
pub fn to_planes(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(ch, r, c)| {
        img.get_pixel(c as u32, r as u32).0[ch] as f64
    })
}

pub fn from_planes(planes: &Array3<f64>) -> RgbImage {
    let (_, h, w) = planes.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            planes[[ch, y as usize, x as usize]]
                .round()
                .clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn luma(planes: &Array3<f64>) -> Array2<f64> {
    let r = planes.index_axis(Axis(0), 0);
    let g = planes.index_axis(Axis(0), 1);
    let b = planes.index_axis(Axis(0), 2);
    &r * 0.299 + &g * 0.587 + &b * 0.114
}

/// Normalised 1-D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

fn convolve_rows(plane: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let radius = (taps.len() / 2) as isize;
    Array2::from_shape_fn((h, w), |(r, c)| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| {
                let cc = (c as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                t * plane[[r, cc]]
            })
            .sum()
    })
}

/// Separable Gaussian blur with replicated borders.
pub fn blur_plane(plane: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return plane.clone();
    }
    let taps = gaussian_kernel(sigma);
    let horiz = convolve_rows(plane, &taps);
    convolve_rows(&horiz.t().to_owned(), &taps).t().to_owned()
}

pub fn blur_planes(planes: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let mut out = planes.clone();
    for ch in 0..planes.dim().0 {
        let blurred = blur_plane(&planes.index_axis(Axis(0), ch).to_owned(), sigma);
        out.index_axis_mut(Axis(0), ch).assign(&blurred);
    }
    out
}

/// Sample positions and weights for half-pixel-centred linear resampling
/// of an axis from `src` to `dst` samples.
pub fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub fn resize_bilinear(plane: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    let rt = linear_taps(h, height);
    let ct = linear_taps(w, width);
    Array2::from_shape_fn((height, width), |(r, c)| {
        let (r0, r1, fr) = rt[r];
        let (c0, c1, fc) = ct[c];
        let top = plane[[r0, c0]] * (1.0 - fc) + plane[[r0, c1]] * fc;
        let bot = plane[[r1, c0]] * (1.0 - fc) + plane[[r1, c1]] * fc;
        top * (1.0 - fr) + bot * fr
    })
}

/// 2×2 box downsample followed by bilinear upsample back to the input size.
pub fn down_up(plane: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    let (hh, hw) = (h.div_ceil(2), w.div_ceil(2));
    let small = Array2::from_shape_fn((hh, hw), |(r, c)| {
        let mut s = 0.0;
        let mut n = 0.0;
        for rr in 2 * r..(2 * r + 2).min(h) {
            for cc in 2 * c..(2 * c + 2).min(w) {
                s += plane[[rr, cc]];
                n += 1.0;
            }
        }
        s / n
    });
    resize_bilinear(&small, h, w)
}

/// Central-difference derivatives (d/drow, d/dcol) with replicated borders.
pub fn gradients(plane: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = plane.dim();
    let at = |r: isize, c: isize| {
        plane[[
            r.clamp(0, h as isize - 1) as usize,
            c.clamp(0, w as isize - 1) as usize,
        ]]
    };
    let gr = Array2::from_shape_fn((h, w), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        0.5 * (at(r + 1, c) - at(r - 1, c))
    });
    let gc = Array2::from_shape_fn((h, w), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        0.5 * (at(r, c + 1) - at(r, c - 1))
    });
    (gr, gc)
}

/// Five-point Laplacian with replicated borders.
pub fn laplacian(plane: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    let at = |r: isize, c: isize| {
        plane[[
            r.clamp(0, h as isize - 1) as usize,
            c.clamp(0, w as isize - 1) as usize,
        ]]
    };
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        at(r + 1, c) + at(r - 1, c) + at(r, c + 1) + at(r, c - 1) - 4.0 * at(r, c)
    })
}

/// Bilinearly interpolated lattice noise in [-1, 1] with lattice spacing
/// `scale` pixels.
pub fn value_noise<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    scale: f64,
    rng: &mut R,
) -> Array2<f64> {
    let scale = scale.max(1.0);
    let gh = (height as f64 / scale).ceil() as usize + 2;
    let gw = (width as f64 / scale).ceil() as usize + 2;
    let lattice = Array2::from_shape_fn((gh, gw), |_| rng.random_range(-1.0..=1.0));
    Array2::from_shape_fn((height, width), |(r, c)| {
        let y = r as f64 / scale;
        let x = c as f64 / scale;
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = lattice[[y0, x0]] * (1.0 - fx) + lattice[[y0, x0 + 1]] * fx;
        let bot = lattice[[y0 + 1, x0]] * (1.0 - fx) + lattice[[y0 + 1, x0 + 1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

pub fn jpeg_round_trip(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode_image(img)?;
    Ok(image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)?.to_rgb8())
}

pub fn encode_png(img: &image::DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Stable 64-bit content hash of an image (dimensions and pixels).
pub fn image_hash(img: &RgbImage) -> u64 {
    let mut h = Sha256::new();
    h.update(img.width().to_le_bytes());
    h.update(img.height().to_le_bytes());
    h.update(img.as_raw());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 digest is 32 bytes"))
}

/// Stable 64-bit hash of arbitrary byte strings, used to derive seeds.
pub fn hash_bytes(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 digest is 32 bytes"))
}

/// Mean squared gradient magnitude of the luma channel.
pub fn gradient_energy(img: &RgbImage) -> f64 {
    let l = luma(&to_planes(img));
    let (gr, gc) = gradients(&l);
    (gr.mapv(|v| v * v) + gc.mapv(|v| v * v))
        .mean()
        .unwrap_or(0.0)
}
