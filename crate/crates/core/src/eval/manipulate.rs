//! Image manipulations used to probe the sensitivity of FID.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use wurstkit_tensor::ops::resize::{resize, ResampleKernel};
use wurstkit_tensor::Tensor;

use crate::image::{from_rgb8, to_rgb8};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleKind {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Manipulation {
    Identity,
    /// JPEG round trip at quality `q ∈ [1, 100]`.
    Jpeg(u8),
    /// Resampling to the extractor input size with the given kernel.
    Resample(ResampleKind),
    Palette256,
    /// `x·(1 + p/100)`, `p ∈ [-100, 100]`.
    Brightness(f64),
    /// `(x - 0.5)·(1 + p/100) + 0.5`.
    Contrast(f64),
}

impl Manipulation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Manipulation::Jpeg(q) if !(1..=100).contains(&q) => {
                Err(Error::Domain(format!("JPEG quality {q} outside [1, 100]")))
            }
            Manipulation::Brightness(p) | Manipulation::Contrast(p) if !(p.is_finite() && p.abs() <= 100.0) => {
                Err(Error::Domain(format!("percentage {p} outside [-100, 100]")))
            }
            _ => Ok(()),
        }
    }

    /// The audit rows: JPEG 95..50, both resampling kernels, palette and
    /// ±10% brightness and contrast.
    pub fn audit_set() -> Vec<Manipulation> {
        let mut v: Vec<Manipulation> = [95, 90, 80, 70, 60, 50].into_iter().map(Manipulation::Jpeg).collect();
        v.extend([
            Manipulation::Resample(ResampleKind::Nearest),
            Manipulation::Resample(ResampleKind::Bilinear),
            Manipulation::Palette256,
            Manipulation::Brightness(10.0),
            Manipulation::Brightness(-10.0),
            Manipulation::Contrast(10.0),
            Manipulation::Contrast(-10.0),
        ]);
        v
    }
}

impl fmt::Display for Manipulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Manipulation::Identity => write!(f, "identity"),
            Manipulation::Jpeg(q) => write!(f, "jpeg:{q}"),
            Manipulation::Resample(ResampleKind::Nearest) => write!(f, "resample:nearest"),
            Manipulation::Resample(ResampleKind::Bilinear) => write!(f, "resample:bilinear"),
            Manipulation::Palette256 => write!(f, "palette256"),
            Manipulation::Brightness(p) => write!(f, "brightness:{p:+}"),
            Manipulation::Contrast(p) => write!(f, "contrast:{p:+}"),
        }
    }
}

impl FromStr for Manipulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown manipulation {s:?}"));
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        let m = match kind {
            "identity" => Manipulation::Identity,
            "palette256" => Manipulation::Palette256,
            "jpeg" => Manipulation::Jpeg(arg.parse().map_err(|_| bad())?),
            "resample" => match arg {
                "nearest" => Manipulation::Resample(ResampleKind::Nearest),
                "bilinear" => Manipulation::Resample(ResampleKind::Bilinear),
                _ => return Err(bad()),
            },
            "brightness" => Manipulation::Brightness(arg.parse().map_err(|_| bad())?),
            "contrast" => Manipulation::Contrast(arg.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        m.validate()?;
        Ok(m)
    }
}

/// Applies `m` to a `[3, H, W]` image. Resampling targets `size × size`;
/// every other manipulation keeps the shape.
pub fn manipulate(img: &Tensor<f32>, m: Manipulation, size: usize) -> Result<Tensor<f32>> {
    m.validate()?;
    check_image(img)?;
    let out = match m {
        Manipulation::Identity => img.clone(),
        Manipulation::Jpeg(q) => jpeg_roundtrip(img, q)?,
        Manipulation::Resample(kind) => {
            let k = match kind {
                ResampleKind::Nearest => ResampleKernel::Nearest,
                ResampleKind::Bilinear => ResampleKernel::Bilinear,
            };
            let (h, w) = (img.dim(1), img.dim(2));
            resize(&img.reshape([1, 3, h, w])?, size, size, k)?.reshape([3, size, size])?
        }
        Manipulation::Palette256 => palette_quantize(img, 256)?,
        Manipulation::Brightness(p) => {
            let f = (1.0 + p / 100.0) as f32;
            img.map(|x| x * f)
        }
        Manipulation::Contrast(p) => {
            let f = (1.0 + p / 100.0) as f32;
            img.map(|x| (x - 0.5) * f + 0.5)
        }
    };
    Ok(out.clamp(0.0, 1.0))
}

fn check_image(img: &Tensor<f32>) -> Result<()> {
    if img.rank() != 3 || img.dim(0) != 3 || img.dim(1) == 0 || img.dim(2) == 0 {
        return Err(Error::Shape(format!("expected a [3, H, W] image, got {:?}", img.shape())));
    }
    Ok(())
}

/// Area-weighted (box filter) resampling; the exact average of the source
/// pixels covered by each target pixel.
pub fn resize_area(img: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    check_image(img)?;
    if height == 0 || width == 0 {
        return Err(Error::Shape("zero-size resize target".into()));
    }
    let (h, w) = (img.dim(1), img.dim(2));
    let wy = area_weights(h, height);
    let wx = area_weights(w, width);
    let d = img.data();
    let mut out = vec![0f32; 3 * height * width];
    for c in 0..3 {
        for (oy, ry) in wy.iter().enumerate() {
            for (ox, rx) in wx.iter().enumerate() {
                let mut acc = 0f64;
                for &(iy, fy) in ry {
                    for &(ix, fx) in rx {
                        acc += fy * fx * d[(c * h + iy) * w + ix] as f64;
                    }
                }
                out[(c * height + oy) * width + ox] = acc as f32;
            }
        }
    }
    Ok(Tensor::new([3, height, width], out))
}

/// For each output cell, the source indices it overlaps and their weights
/// (summing to one).
fn area_weights(input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut v = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < input {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    v.push((i, overlap / scale));
                }
                i += 1;
            }
            v
        })
        .collect()
}

/// Baseline JPEG encode (standard tables scaled by quality, 4:2:0 chroma)
/// and decode, on the 8-bit quantized image.
pub fn jpeg_roundtrip(img: &Tensor<f32>, quality: u8) -> Result<Tensor<f32>> {
    let bytes = jpeg_encode(img, quality)?;
    jpeg_decode(&bytes)
}

pub fn jpeg_encode(img: &Tensor<f32>, quality: u8) -> Result<Vec<u8>> {
    check_image(img)?;
    let (h, w) = (img.dim(1), img.dim(2));
    let (hh, ww) = (u16::try_from(h), u16::try_from(w));
    let (Ok(hh), Ok(ww)) = (hh, ww) else {
        return Err(Error::Image("image too large for JPEG".into()));
    };
    let rgb = to_rgb8(img);
    let mut out = Vec::new();
    let mut enc = jpeg_encoder::Encoder::new(&mut out, quality);
    enc.set_sampling_factor(jpeg_encoder::SamplingFactor::R_4_2_0);
    enc.encode(&rgb, ww, hh, jpeg_encoder::ColorType::Rgb).map_err(|e| Error::Image(format!("jpeg encode: {e}")))?;
    Ok(out)
}

pub fn jpeg_decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut dec = jpeg_decoder::Decoder::new(bytes);
    let pixels = dec.decode().map_err(|e| Error::Image(format!("jpeg decode: {e}")))?;
    let info = dec.info().ok_or_else(|| Error::Image("jpeg without frame header".into()))?;
    if info.pixel_format != jpeg_decoder::PixelFormat::RGB24 {
        return Err(Error::Image(format!("unsupported jpeg pixel format {:?}", info.pixel_format)));
    }
    from_rgb8(info.width as usize, info.height as usize, &pixels)
}

/// Median-cut palette quantization of the 8-bit image to at most `colors`
/// colours. Images that already have few enough colours are returned as
/// their 8-bit quantization.
pub fn palette_quantize(img: &Tensor<f32>, colors: usize) -> Result<Tensor<f32>> {
    check_image(img)?;
    if colors == 0 {
        return Err(Error::Domain("palette needs at least one colour".into()));
    }
    let (h, w) = (img.dim(1), img.dim(2));
    let rgb = to_rgb8(img);
    let mut hist: std::collections::BTreeMap<[u8; 3], usize> = Default::default();
    for px in rgb.chunks_exact(3) {
        *hist.entry([px[0], px[1], px[2]]).or_default() += 1;
    }
    let palette_of: std::collections::BTreeMap<[u8; 3], [u8; 3]> = if hist.len() <= colors {
        hist.keys().map(|&c| (c, c)).collect()
    } else {
        median_cut(hist.into_iter().collect(), colors)
    };
    let mapped: Vec<u8> = rgb.chunks_exact(3).flat_map(|px| palette_of[&[px[0], px[1], px[2]]]).collect();
    from_rgb8(w, h, &mapped)
}

type ColorCount = ([u8; 3], usize);

fn median_cut(colors: Vec<ColorCount>, target: usize) -> std::collections::BTreeMap<[u8; 3], [u8; 3]> {
    let mut boxes: Vec<Vec<ColorCount>> = vec![colors];
    while boxes.len() < target {
        // split the box with the widest channel range (ties: the first)
        let pick = boxes
            .iter()
            .enumerate()
            .filter(|(_, b)| b.len() > 1)
            .max_by(|(ia, a), (ib, b)| widest(a).1.cmp(&widest(b).1).then(ib.cmp(ia)))
            .map(|(i, _)| i);
        let Some(i) = pick else { break };
        let mut b = boxes.swap_remove(i);
        let (ch, _) = widest(&b);
        b.sort_by_key(|(c, _)| (c[ch], *c));
        let total: usize = b.iter().map(|(_, n)| n).sum();
        let mut acc = 0;
        let mut cut = 1;
        for (j, (_, n)) in b.iter().enumerate() {
            acc += n;
            if acc * 2 >= total {
                cut = (j + 1).clamp(1, b.len() - 1);
                break;
            }
        }
        let rest = b.split_off(cut);
        boxes.push(b);
        boxes.push(rest);
    }
    let mut map = std::collections::BTreeMap::new();
    for b in boxes {
        let total: usize = b.iter().map(|(_, n)| n).sum();
        let mut mean = [0u8; 3];
        for (ch, m) in mean.iter_mut().enumerate() {
            let s: usize = b.iter().map(|(c, n)| c[ch] as usize * n).sum();
            *m = ((s as f64 / total as f64).round()) as u8;
        }
        for (c, _) in b {
            map.insert(c, mean);
        }
    }
    map
}

fn widest(b: &[ColorCount]) -> (usize, u8) {
    let mut best = (0, 0);
    for ch in 0..3 {
        let lo = b.iter().map(|(c, _)| c[ch]).min().unwrap_or(0);
        let hi = b.iter().map(|(c, _)| c[ch]).max().unwrap_or(0);
        if hi - lo > best.1 {
            best = (ch, hi - lo);
        }
    }
    best
}
