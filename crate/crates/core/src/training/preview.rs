//! Worst-case validation previews.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const PREVIEW_FILES: [&str; 5] = ["input.png", "label.png", "prediction.png", "expected_overlay.png", "actual_overlay.png"];

const CLASS_COLORS: [[u8; 3]; 6] = [[255, 0, 0], [0, 200, 0], [0, 90, 255], [255, 210, 0], [255, 0, 255], [0, 220, 220]];
const OVERLAY_ALPHA: f32 = 0.5;

fn class_color(k: i64) -> [u8; 3] {
    CLASS_COLORS[(k.max(1) as usize - 1) % CLASS_COLORS.len()]
}

/// Index of the lowest score; ties go to the lowest index. NaN counts as
/// the worst possible score.
pub fn worst_case_index(scores: &[f64]) -> Option<usize> {
    let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s };
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.map_or(true, |(_, b)| key(s) < b) {
            best = Some((i, key(s)));
        }
    }
    best.map(|(i, _)| i)
}

/// A 2D slice in row-major order.
struct Plane<T> {
    w: usize,
    h: usize,
    data: Vec<T>,
}

/// Extracts 2D planes from a `(C, ...)` tensor's first channel: the image
/// itself for 2D, the three central orthogonal slices for 3D.
fn planes<T: candle_core::WithDType + Copy>(t: &Tensor) -> Result<Vec<Plane<T>>> {
    let dims = t.dims().to_vec();
    let data: Vec<T> = t.narrow(0, 0, 1)?.flatten_all()?.to_vec1()?;
    match dims.len() {
        3 => Ok(vec![Plane { h: dims[1], w: dims[2], data }]),
        4 => {
            let (d, h, w) = (dims[1], dims[2], dims[3]);
            let at = |z: usize, y: usize, x: usize| data[(z * h + y) * w + x];
            let (cz, cy, cx) = (d / 2, h / 2, w / 2);
            let axial = Plane { w, h, data: (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| at(cz, y, x)).collect() };
            let coronal = Plane { w, h: d, data: (0..d).flat_map(|z| (0..w).map(move |x| (z, x))).map(|(z, x)| at(z, cy, x)).collect() };
            let sagittal = Plane { w: h, h: d, data: (0..d).flat_map(|z| (0..h).map(move |y| (z, y))).map(|(z, y)| at(z, y, cx)).collect() };
            Ok(vec![axial, coronal, sagittal])
        }
        _ => Err(Error::Shape(format!("preview expects a (C, H, W) or (C, D, H, W) tensor, got {dims:?}"))),
    }
}

/// Places planes side by side, separated by a 2-pixel gap.
fn montage(parts: Vec<RgbImage>) -> RgbImage {
    let w: u32 = parts.iter().map(|p| p.width()).sum::<u32>() + 2 * (parts.len() as u32).saturating_sub(1);
    let h = parts.iter().map(|p| p.height()).max().unwrap_or(1);
    let mut out = RgbImage::new(w.max(1), h);
    let mut ox = 0;
    for p in parts {
        image::imageops::replace(&mut out, &p, ox as i64, 0);
        ox += p.width() + 2;
    }
    out
}

fn gray(plane: &Plane<f32>) -> RgbImage {
    let (lo, hi) = plane.data.iter().filter(|v| v.is_finite()).fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(plane.w as u32, plane.h as u32, |x, y| {
        let v = plane.data[y as usize * plane.w + x as usize];
        let g = if v.is_finite() { ((v - lo) / span * 255.0).round() as u8 } else { 0 };
        Rgb([g, g, g])
    })
}

fn classes(plane: &Plane<i64>) -> RgbImage {
    RgbImage::from_fn(plane.w as u32, plane.h as u32, |x, y| {
        let k = plane.data[y as usize * plane.w + x as usize];
        Rgb(if k > 0 { class_color(k) } else { [0, 0, 0] })
    })
}

fn overlay(base: &RgbImage, plane: &Plane<i64>) -> RgbImage {
    let mut out = base.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let k = plane.data[y as usize * plane.w + x as usize];
        if k > 0 {
            let c = class_color(k);
            for i in 0..3 {
                px.0[i] = ((1.0 - OVERLAY_ALPHA) * px.0[i] as f32 + OVERLAY_ALPHA * c[i] as f32).round() as u8;
            }
        }
    }
    out
}

/// Writes the five preview images for one case into `dir`. `image` is
/// `(C, ...)`; `label` and `prediction` are `(1, ...)` class maps.
pub fn save_previews(dir: &Path, image: &Tensor, label: &Tensor, prediction: &Tensor) -> Result<Vec<PathBuf>> {
    if label.dims()[1..] != image.dims()[1..] || prediction.dims() != label.dims() {
        return Err(Error::Shape(format!(
            "preview tensors disagree: image {:?}, label {:?}, prediction {:?}",
            image.dims(),
            label.dims(),
            prediction.dims()
        )));
    }
    let img = planes::<f32>(&image.to_dtype(DType::F32)?)?;
    let lab = planes::<i64>(&label.to_dtype(DType::I64)?)?;
    let pred = planes::<i64>(&prediction.to_dtype(DType::I64)?)?;
    let base: Vec<RgbImage> = img.iter().map(gray).collect();
    let renders = [
        montage(base.clone()),
        montage(lab.iter().map(classes).collect()),
        montage(pred.iter().map(classes).collect()),
        montage(base.iter().zip(&lab).map(|(b, l)| overlay(b, l)).collect()),
        montage(base.iter().zip(&pred).map(|(b, p)| overlay(b, p)).collect()),
    ];
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (name, render) in PREVIEW_FILES.iter().zip(renders) {
        let path = dir.join(name);
        render.save(&path)?;
        written.push(path);
    }
    Ok(written)
}
