//! Binary PPM/PGM reading and writing for `[C, H, W]` tensors in `[0, 1]`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{FrptError, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, e: impl ToString) -> FrptError {
    FrptError::Image { path: path.to_path_buf(), message: e.to_string() }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaved 8-bit samples of a `[C, H, W]` tensor.
pub fn to_bytes(image: &Tensor<f32>) -> Vec<u8> {
    let s = image.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    let d = image.data();
    (0..plane).flat_map(|p| (0..c).map(move |ch| quantize(d[ch * plane + p]))).collect()
}

fn encode(path: &Path, bytes: &[u8], w: usize, h: usize, subtype: PnmSubtype, color: ExtendedColorType) -> Result<()> {
    let file = File::create(path).map_err(|e| FrptError::io(path, e))?;
    let mut out = BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(bytes, w as u32, h as u32, color)
        .map_err(|e| image_err(path, e))?;
    out.flush().map_err(|e| FrptError::io(path, e))
}

/// Writes a `[3, H, W]` tensor as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(FrptError::Shape(format!("PPM needs [3,H,W], got {s:?}")));
    }
    encode(path, &to_bytes(image), s[2], s[1], PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
}

/// Writes a `[H, W]` or `[1, H, W]` tensor as binary PGM.
pub fn write_pgm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    let (h, w) = match s {
        [h, w] | [1, h, w] => (*h, *w),
        _ => return Err(FrptError::Shape(format!("PGM needs [H,W], got {s:?}"))),
    };
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    encode(path, &bytes, w, h, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
}

/// Reads any PNM image as a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| FrptError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| FrptError::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Rec. 601 luma of a `[3, H, W]` tensor as `[H, W]`.
pub fn luminance(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(FrptError::Shape(format!("luminance needs [3,H,W], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let d = image.data();
    let data = (0..plane).map(|p| 0.299 * d[p] + 0.587 * d[plane + p] + 0.114 * d[2 * plane + p]).collect();
    Tensor::new(&[s[1], s[2]], data)
}

/// Min-max rescaling to `[0, 1]` for display; constant input maps to 0.
pub fn stretch(values: &Tensor<f32>) -> Tensor<f32> {
    let lo = values.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let data = values.data().iter().map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect();
    Tensor::new(values.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ppm_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = Tensor::<f32>::uniform(&[3, 5, 7], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        write_ppm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6"));
        let back = read_rgb(&path).unwrap();
        assert_eq!(back.shape(), [3, 5, 7]);
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
        write_ppm(&path, &back).unwrap();
        assert_eq!(read_rgb(&path).unwrap(), back);
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        write_pgm(&path, &Tensor::full(&[4, 6], 0.5)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(bytes[bytes.len() - 24..], [128u8; 24]);
    }

    #[test]
    fn stretch_spans_unit_range() {
        let t = Tensor::new(&[3], vec![2.0f32, 4.0, 3.0]).unwrap();
        assert_eq!(stretch(&t).data(), [0.0, 1.0, 0.5]);
        assert_eq!(stretch(&Tensor::full(&[2], 7.0f32)).data(), [0.0, 0.0]);
    }
}
