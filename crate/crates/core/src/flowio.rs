//! File formats: Middlebury `.flo`, KITTI 16-bit flow PNG, 8-bit label and
//! image PNG, plus color codings for flow, perturbations and TTC maps.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::diffcore::Field2D;
use crate::error::{Error, Result};
use crate::ttc::TtcMap;
use crate::types::{Category, FlowField, Image, LabelMap};

/// Magic number opening every `.flo` file ("PIEH" as little-endian bytes).
pub const FLO_MAGIC: f32 = 202021.25;
const FLO_HEADER: usize = 12;
/// Sanity cap on each `.flo` dimension.
pub const FLO_MAX_SIDE: usize = 1 << 15;

/// KITTI stores `u * 64 + 2^15` in 16 bits.
pub const KITTI_SCALE: f64 = 64.0;
pub const KITTI_OFFSET: f64 = 32768.0;

fn format_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w) = flow.shape();
    let mut out = Vec::with_capacity(FLO_HEADER + 8 * h * w);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (u, v) in flow.u.data().iter().zip(flow.v.data()) {
        out.extend_from_slice(&(*u as f32).to_le_bytes());
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Parses `.flo` bytes; `path` is only used in diagnostics.
pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<FlowField> {
    let word = |at: usize| -> [u8; 4] { bytes[at..at + 4].try_into().unwrap() };
    if bytes.len() < FLO_HEADER {
        return Err(format_err(path, bytes.len(), format!("truncated header ({} bytes)", bytes.len())));
    }
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(format_err(path, 0, format!("bad magic {magic}, expected {FLO_MAGIC}")));
    }
    let side = |at: usize, name: &str| -> Result<usize> {
        let n = i32::from_le_bytes(word(at));
        if n <= 0 || n as usize > FLO_MAX_SIDE {
            return Err(format_err(path, at, format!("{name} {n} out of range 1..={FLO_MAX_SIDE}")));
        }
        Ok(n as usize)
    };
    let w = side(4, "width")?;
    let h = side(8, "height")?;
    let expected = FLO_HEADER + 8 * w * h;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            bytes.len().min(expected),
            format!("payload size mismatch: file has {} bytes, {w}x{h} needs {expected}", bytes.len()),
        ));
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for i in 0..w * h {
        for (k, dst) in [&mut u, &mut v].into_iter().enumerate() {
            let at = FLO_HEADER + 8 * i + 4 * k;
            let x = f32::from_le_bytes(word(at));
            if !x.is_finite() {
                return Err(format_err(path, at, "non-finite flow value"));
            }
            dst.push(x as f64);
        }
    }
    FlowField::new(Field2D::new(h, w, u)?, Field2D::new(h, w, v)?)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    fs::write(path, encode_flo(flow)).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes, path)
}

fn kitti_encode(x: f64) -> u16 {
    (x * KITTI_SCALE + KITTI_OFFSET).round().clamp(0.0, u16::MAX as f64) as u16
}

fn kitti_decode(raw: u16) -> f64 {
    (raw as f64 - KITTI_OFFSET) / KITTI_SCALE
}

/// KITTI flow PNG: 16-bit RGB, channels u, v and validity. `valid` defaults to
/// every pixel; values outside the representable range saturate.
pub fn write_kitti_png(path: &Path, flow: &FlowField, valid: Option<&[bool]>) -> Result<()> {
    let (h, w) = flow.shape();
    if valid.is_some_and(|v| v.len() != h * w) {
        return Err(Error::ShapeMismatch {
            op: "write_kitti_png",
            expected: format!("{} validity flags", h * w),
            found: valid.unwrap().len().to_string(),
        });
    }
    let img = ImageBuffer::<Rgb<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let ok = valid.is_none_or(|v| v[i]);
        Rgb([
            kitti_encode(flow.u.data()[i]),
            kitti_encode(flow.v.data()[i]),
            ok as u16,
        ])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Reads a KITTI flow PNG; returns the flow and per-pixel validity.
pub fn read_kitti_png(path: &Path) -> Result<(FlowField, Vec<bool>)> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    if img.color() != image::ColorType::Rgb16 {
        return Err(Error::invalid(format!(
            "{}: KITTI flow PNG must be 16-bit RGB, found {:?}",
            path.display(),
            img.color()
        )));
    }
    let img = img.into_rgb16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut valid = Vec::with_capacity(w * h);
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for p in img.pixels() {
        u.push(kitti_decode(p[0]));
        v.push(kitti_decode(p[1]));
        valid.push(p[2] > 0);
    }
    Ok((FlowField::new(Field2D::new(h, w, u)?, Field2D::new(h, w, v)?)?, valid))
}

/// Quantizes a flow to the KITTI grid (what a round trip through PNG yields).
pub fn kitti_quantize(flow: &FlowField) -> FlowField {
    FlowField {
        u: flow.u.map(|x| kitti_decode(kitti_encode(x))),
        v: flow.v.map(|x| kitti_decode(kitti_encode(x))),
    }
}

/// 8-bit grayscale PNG holding category ids.
pub fn write_labels_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = labels.shape();
    let img = ImageBuffer::<Luma<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        Luma([labels.get(y as usize, x as usize).id()])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn read_labels_png(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut labels = Vec::with_capacity(w * h);
    for (i, p) in img.pixels().enumerate() {
        let c = Category::from_id(p[0]).ok_or_else(|| {
            Error::invalid(format!(
                "{}: pixel ({}, {}) has unknown category id {}",
                path.display(),
                i / w,
                i % w,
                p[0]
            ))
        })?;
        labels.push(c);
    }
    LabelMap::new(h, w, labels)
}

/// 8-bit RGB PNG of an image in [0, 1].
pub fn write_image_png(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = image.shape();
    let img = ImageBuffer::<Rgb<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        Rgb([0, 1, 2].map(|c| (image.get(y as usize, x as usize, c).clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Reads an 8- or 16-bit PNG (gray or color) into [0, 1] intensities.
pub fn read_image_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_rgb16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Image::from_fn(h, w, |y, x, c| img.get_pixel(x as u32, y as u32)[c] as f64 / u16::MAX as f64)
}

/// TTC map in `.flo` layout: first channel TTC, second channel validity (0/1).
pub fn write_ttc_map(path: &Path, map: &TtcMap) -> Result<()> {
    let (h, w) = map.shape();
    let valid = Field2D::from_fn(h, w, |y, x| map.valid()[y * w + x] as u8 as f64);
    write_flo(
        path,
        &FlowField {
            u: map.ttc().clone(),
            v: valid,
        },
    )
}

pub fn read_ttc_map(path: &Path) -> Result<TtcMap> {
    let f = read_flo(path)?;
    let valid = f.v.data().iter().map(|&x| x > 0.5).collect();
    TtcMap::new(f.u, valid)
}

const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;

/// The 55-entry Middlebury color wheel, values in 0..=255.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let ramp = |i: usize, n: usize| (255.0 * i as f64 / n as f64).floor();
    let mut wheel = Vec::with_capacity(RY + YG + GC + CB + BM + MR);
    wheel.extend((0..RY).map(|i| [255.0, ramp(i, RY), 0.0]));
    wheel.extend((0..YG).map(|i| [255.0 - ramp(i, YG), 255.0, 0.0]));
    wheel.extend((0..GC).map(|i| [0.0, 255.0, ramp(i, GC)]));
    wheel.extend((0..CB).map(|i| [0.0, 255.0 - ramp(i, CB), 255.0]));
    wheel.extend((0..BM).map(|i| [ramp(i, BM), 0.0, 255.0]));
    wheel.extend((0..MR).map(|i| [255.0, 0.0, 255.0 - ramp(i, MR)]));
    wheel
}

/// 99th percentile of the flow magnitude, or 1 for an all-zero flow.
pub fn auto_max_magnitude(flow: &FlowField) -> f64 {
    let mut mags: Vec<f64> = flow.u.data().iter().zip(flow.v.data()).map(|(u, v)| u.hypot(*v)).collect();
    mags.sort_by(f64::total_cmp);
    let idx = ((mags.len() - 1) as f64 * 0.99).round() as usize;
    let m = mags[idx];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Middlebury color coding. Magnitudes are normalized by `max_magnitude`
/// (the 99th percentile when `None`); zero flow is white.
pub fn flow_to_color(flow: &FlowField, max_magnitude: Option<f64>) -> Result<Image> {
    let max = match max_magnitude {
        Some(m) if m > 0.0 && m.is_finite() => m,
        Some(m) => return Err(Error::invalid(format!("max magnitude must be positive, got {m}"))),
        None => auto_max_magnitude(flow),
    };
    let wheel = color_wheel();
    let ncols = wheel.len();
    let (h, w) = flow.shape();
    let colors: Vec<[f64; 3]> = flow
        .u
        .data()
        .iter()
        .zip(flow.v.data())
        .map(|(&u, &v)| {
            let (u, v) = (u / max, v / max);
            let rad = u.hypot(v);
            let a = (-v).atan2(-u) / std::f64::consts::PI;
            let fk = (a + 1.0) / 2.0 * (ncols - 1) as f64;
            let k0 = fk.floor() as usize % ncols;
            let k1 = (k0 + 1) % ncols;
            let f = fk - fk.floor();
            [0, 1, 2].map(|c| {
                let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
                if rad <= 1.0 {
                    1.0 - rad * (1.0 - col)
                } else {
                    col * 0.75
                }
            })
        })
        .collect();
    Ok(Image::from_channels_unchecked(
        [0, 1, 2].map(|c| Field2D::from_fn(h, w, |y, x| colors[y * w + x][c])),
    ))
}

/// Grayscale map of the per-pixel mean absolute perturbation, normalized to
/// its maximum (black where untouched).
pub fn perturbation_heatmap(perturbed: &Image, original: &Image) -> Result<Image> {
    if perturbed.shape() != original.shape() {
        return Err(Error::ShapeMismatch {
            op: "perturbation_heatmap",
            expected: format!("{:?}", original.shape()),
            found: format!("{:?}", perturbed.shape()),
        });
    }
    let (h, w) = original.shape();
    let mag = Field2D::from_fn(h, w, |y, x| {
        (0..3).map(|c| (perturbed.get(y, x, c) - original.get(y, x, c)).abs()).sum::<f64>() / 3.0
    });
    let peak = mag.max_abs();
    let t = if peak > 0.0 { mag.map(|m| m / peak) } else { mag };
    Ok(Image::from_channels_unchecked([t.clone(), t.clone(), t]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_flow() -> FlowField {
        FlowField::from_fn(5, 7, |y, x| (x as f64 * 0.25 - 1.0, y as f64 * -0.5))
    }

    #[test]
    fn flo_bytes_round_trip() {
        let f = sample_flow();
        let bytes = encode_flo(&f);
        assert_eq!(bytes.len(), 12 + 8 * 35);
        assert_eq!(&bytes[0..4], b"PIEH");
        assert_eq!(decode_flo(&bytes, Path::new("x.flo")).unwrap(), f);
    }

    #[test]
    fn flo_errors_carry_offsets() {
        let p = Path::new("bad.flo");
        let mut bytes = encode_flo(&sample_flow());
        let err = decode_flo(&bytes[..7], p).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        bytes[0] = b'X';
        assert!(decode_flo(&bytes, p).unwrap_err().to_string().contains("offset 0"));
        let mut bytes = encode_flo(&sample_flow());
        bytes[8..12].copy_from_slice(&(-3i32).to_le_bytes());
        assert!(decode_flo(&bytes, p).unwrap_err().to_string().contains("offset 8"));
        let mut bytes = encode_flo(&sample_flow());
        bytes.pop();
        assert!(decode_flo(&bytes, p).unwrap_err().to_string().contains("size mismatch"));
        let mut bytes = encode_flo(&sample_flow());
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_flo(&bytes, p).unwrap_err().to_string().contains("offset 20"));
    }

    #[test]
    fn kitti_codec_saturates() {
        assert_eq!(kitti_encode(0.0), 32768);
        assert_eq!(kitti_encode(1e6), u16::MAX);
        assert_eq!(kitti_encode(-1e6), 0);
        assert_eq!(kitti_decode(kitti_encode(1.5)), 1.5);
    }

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_color(&FlowField::zeros(3, 3), None).unwrap();
        for c in 0..3 {
            assert_eq!(img.channel(c), &Field2D::filled(3, 3, 1.0));
        }
    }

    #[test]
    fn wheel_has_55_colors_starting_red() {
        let w = color_wheel();
        assert_eq!(w.len(), 55);
        assert_eq!(w[0], [255.0, 0.0, 0.0]);
    }

    #[test]
    fn unit_rightward_flow_is_saturated_hue() {
        let f = FlowField::from_fn(1, 1, |_, _| (1.0, 0.0));
        let img = flow_to_color(&f, Some(1.0)).unwrap();
        let px = [img.get(0, 0, 0), img.get(0, 0, 1), img.get(0, 0, 2)];
        assert!(px.iter().any(|&c| c < 0.2), "{px:?}");
    }

    #[test]
    fn heatmap_is_black_without_perturbation() {
        let img = Image::gray(Field2D::filled(4, 4, 0.4)).unwrap();
        let h = perturbation_heatmap(&img, &img).unwrap();
        assert_eq!(h.channel(0).max_abs(), 0.0);
    }
}
