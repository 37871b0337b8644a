//! Frame-level image utilities: preprocessing, edge maps, seeded synthetic
//! frames, and numbered-PNG directory IO.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use thiserror::Error;

use crate::seed::SeedRng;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to encode image {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("no frames found in {0}")]
    NoFrames(PathBuf),
}

/// Center-crop to a square and resize to `resolution`×`resolution`.
pub fn preprocess_frame(frame: &RgbImage, resolution: u32) -> RgbImage {
    let (w, h) = frame.dimensions();
    let side = w.min(h);
    let x0 = (w - side) / 2;
    let y0 = (h - side) / 2;
    let cropped = imageops::crop_imm(frame, x0, y0, side, side).to_image();
    if side == resolution {
        cropped
    } else {
        imageops::resize(&cropped, resolution, resolution, FilterType::Triangle)
    }
}

/// Normalized gradient-magnitude edge map, average-pooled to `out_w`×`out_h`.
///
/// Sobel on the grayscale image, then max-normalized to [0, 1]; constant
/// frames therefore map to all zeros.
pub fn edge_map(frame: &RgbImage, out_w: usize, out_h: usize) -> Vec<f64> {
    let (w, h) = frame.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut gray = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = frame.get_pixel(x as u32, y as u32);
            gray[y * w + x] =
                (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0;
        }
    }
    let at = |x: isize, y: isize| -> f64 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        gray[yc * w + xc]
    };
    let mut mag = vec![0.0f64; w * h];
    let mut max_mag = 0.0f64;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1);
            let m = (gx * gx + gy * gy).sqrt();
            mag[y as usize * w + x as usize] = m;
            if m > max_mag {
                max_mag = m;
            }
        }
    }
    if max_mag > 0.0 {
        for v in &mut mag {
            *v /= max_mag;
        }
    }
    // Average-pool onto the target grid.
    let mut out = vec![0.0f64; out_w * out_h];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let x0 = ox * w / out_w;
            let x1 = (((ox + 1) * w).div_ceil(out_w)).max(x0 + 1).min(w);
            let y0 = oy * h / out_h;
            let y1 = (((oy + 1) * h).div_ceil(out_h)).max(y0 + 1).min(h);
            let mut sum = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += mag[y * w + x];
                }
            }
            out[oy * out_w + ox] = sum / ((x1 - x0) * (y1 - y0)) as f64;
        }
    }
    out
}

/// Seeded synthetic frame: a smooth field of random sinusoids per channel.
/// Used by the toy backend's pretraining corpus and by test fixtures.
pub fn synthetic_frame(seed: u64, width: u32, height: u32) -> RgbImage {
    let mut rng = SeedRng::new(seed);
    let mut waves = Vec::new();
    for _ in 0..3 {
        let mut chan = Vec::new();
        for _ in 0..3 {
            chan.push((
                rng.next_f64() * 0.15 + 0.02,           // fx
                rng.next_f64() * 0.15 + 0.02,           // fy
                rng.next_f64() * std::f64::consts::TAU, // phase
                rng.next_f64() * 0.5 + 0.2,             // amplitude
            ));
        }
        waves.push(chan);
    }
    let mut img = RgbImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let mut px = [0u8; 3];
            for (c, chan) in waves.iter().enumerate() {
                let mut v = 0.5;
                for &(fx, fy, phase, amp) in chan {
                    v += amp * 0.33 * (fx * x as f64 + fy * y as f64 + phase).sin();
                }
                px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x, y, image::Rgb(px));
        }
    }
    img
}

/// List the PNG files of a directory in ascending filename order.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>, ImagingError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|source| ImagingError::Io { path: dir.to_path_buf(), source })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(ImagingError::NoFrames(dir.to_path_buf()));
    }
    Ok(files)
}

pub fn load_frame(path: &Path) -> Result<RgbImage, ImagingError> {
    let img = image::open(path)
        .map_err(|source| ImagingError::Decode { path: path.to_path_buf(), source })?;
    Ok(img.to_rgb8())
}

pub fn load_frames_dir(dir: &Path) -> Result<Vec<RgbImage>, ImagingError> {
    list_frame_files(dir)?.iter().map(|p| load_frame(p)).collect()
}

pub fn save_frame(path: &Path, frame: &RgbImage) -> Result<(), ImagingError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|source| ImagingError::Io { path: parent.to_path_buf(), source })?;
        }
    }
    frame
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| ImagingError::Encode { path: path.to_path_buf(), source })
}

/// `%06d.png` name for frame `index`.
pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocess_center_crops_and_resizes() {
        let img = RgbImage::from_fn(100, 60, |x, _| {
            if (20..80).contains(&x) {
                image::Rgb([0, 255, 0])
            } else {
                image::Rgb([255, 0, 0])
            }
        });
        let out = preprocess_frame(&img, 32);
        assert_eq!(out.dimensions(), (32, 32));
        // The red side bands lie outside the 60×60 center crop.
        assert_eq!(*out.get_pixel(0, 0), image::Rgb([0, 255, 0]));
    }

    #[test]
    fn constant_frame_has_zero_edges() {
        let img = RgbImage::from_pixel(32, 32, image::Rgb([120, 40, 200]));
        let edges = edge_map(&img, 16, 16);
        assert!(edges.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_edge_responds_on_the_edge_band() {
        // Vertical step at x = 16 on a 32-wide image.
        let img = RgbImage::from_fn(32, 32, |x, _| {
            if x < 16 {
                image::Rgb([0, 0, 0])
            } else {
                image::Rgb([255, 255, 255])
            }
        });
        let w = 16;
        let edges = edge_map(&img, w, 16);
        // Edge falls into output columns 7..=8 after 2x pooling.
        for y in 0..16 {
            assert!(edges[y * w + 7] > 0.0 || edges[y * w + 8] > 0.0, "row {y} misses the edge");
            assert_eq!(edges[y * w + 2], 0.0);
            assert_eq!(edges[y * w + 13], 0.0);
        }
    }

    #[test]
    fn synthetic_frames_are_deterministic_and_distinct() {
        let a = synthetic_frame(5, 16, 16);
        let b = synthetic_frame(5, 16, 16);
        let c = synthetic_frame(6, 16, 16);
        assert_eq!(a.as_raw(), b.as_raw());
        assert_ne!(a.as_raw(), c.as_raw());
    }
}
