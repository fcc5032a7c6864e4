//! RGB images as `[3, H, W]` tensors in `[0, 1]`, PNG I/O and pixel metrics.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use wurstkit_tensor::{Scalar, Tensor};

use crate::{Error, Result};

/// Converts bytes (RGB interleaved, row-major) to a `[3, H, W]` tensor.
pub fn from_rgb8<T: Scalar>(width: usize, height: usize, rgb: &[u8]) -> Result<Tensor<T>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Image(format!("expected {} bytes, got {}", width * height * 3, rgb.len())));
    }
    let plane = width * height;
    let mut data = vec![T::zero(); 3 * plane];
    for (p, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = T::c(px[c] as f64 / 255.0);
        }
    }
    Ok(Tensor::new([3, height, width], data))
}

/// Quantizes a `[3, H, W]` image to interleaved RGB bytes (clipped, rounded).
pub fn to_rgb8<T: Scalar>(img: &Tensor<T>) -> Vec<u8> {
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    assert_eq!(c, 3, "expected an RGB image");
    let plane = h * w;
    let d = img.data();
    let mut out = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            out.push(quantize_u8(d[ch * plane + p].f64()));
        }
    }
    out
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn clip01<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    img.clamp(T::zero(), T::one())
}

pub fn read_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let decoder = png::Decoder::new(File::open(path)?);
    let mut reader = decoder.read_info().map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image(format!("{}: only 8-bit PNGs are supported", path.display())));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => bytes.to_vec(),
        png::ColorType::Rgba => bytes.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => bytes.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => bytes.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::Image(format!("{}: indexed PNGs are not supported", path.display()))),
    };
    from_rgb8(w, h, &rgb)
}

pub fn encode_png<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = (img.dim(1), img.dim(2));
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        writer.write_image_data(&to_rgb8(img)).map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(out)
}

/// Writes a PNG atomically.
pub fn write_png<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    crate::io::atomic_write(path, &encode_png(img)?)
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>() / a.numel() as f64
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

/// Per-channel means of a `[3, H, W]` image.
pub fn channel_means<T: Scalar>(img: &Tensor<T>) -> [f64; 3] {
    let plane = img.dim(1) * img.dim(2);
    let d = img.data();
    let mut m = [0.0; 3];
    for (c, v) in m.iter_mut().enumerate() {
        *v = d[c * plane..(c + 1) * plane].iter().map(|x| x.f64()).sum::<f64>() / plane as f64;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_roundtrip_is_exact() {
        let bytes: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img: Tensor<f32> = from_rgb8(4, 3, &bytes).unwrap();
        assert_eq!(img.shape(), &[3, 3, 4]);
        assert_eq!(to_rgb8(&img), bytes);
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let bytes: Vec<u8> = (0..5 * 2 * 3).map(|i| (i * 31 % 256) as u8).collect();
        let img: Tensor<f32> = from_rgb8(5, 2, &bytes).unwrap();
        write_png(&p, &img).unwrap();
        let back: Tensor<f32> = read_png(&p).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn psnr_of_uniform_error() {
        let a = Tensor::<f64>::zeros([3, 2, 2]);
        let b = Tensor::<f64>::full([3, 2, 2], 0.1);
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a), f64::INFINITY);
    }
}
