//! 8-bit PGM/PPM frames, cropping and resampling.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::imageops::{self, FilterType};
use image::{
    DynamicImage, ExtendedColorType, GrayImage, ImageBuffer, ImageEncoder, ImageFormat, Luma, Pixel, Rgb, RgbImage,
};

use super::{BBox, DataConfig, Region};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A decoded 8-bit frame, interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    /// 1 (PGM) or 3 (PPM).
    pub channels: u8,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn gray(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        Self::check(width, height, 1, data)
    }

    pub fn rgb(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        Self::check(width, height, 3, data)
    }

    fn check(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize * channels as usize {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height}x{channels} frame needs {} bytes, got {}",
                width as usize * height as usize * channels as usize,
                data.len()
            )));
        }
        Ok(Frame {
            width,
            height,
            channels,
            data,
        })
    }

    fn to_dynamic(&self) -> DynamicImage {
        let data = self.data.clone();
        match self.channels {
            1 => DynamicImage::ImageLuma8(GrayImage::from_raw(self.width, self.height, data).expect("checked size")),
            _ => DynamicImage::ImageRgb8(RgbImage::from_raw(self.width, self.height, data).expect("checked size")),
        }
    }
}

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads a binary PGM (P5) or PPM (P6) file.
pub fn read_frame(path: &Path) -> Result<Frame> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let img = image::load(BufReader::new(file), ImageFormat::Pnm).map_err(|e| image_error(path, e))?;
    let (width, height) = (img.width(), img.height());
    match img {
        DynamicImage::ImageLuma8(b) => Frame::gray(width, height, b.into_raw()),
        DynamicImage::ImageRgb8(b) => Frame::rgb(width, height, b.into_raw()),
        other => Err(image_error(
            path,
            format!("unsupported pixel format {:?}", other.color()),
        )),
    }
}

/// Reads only the header of a PGM/PPM file.
pub(crate) fn frame_dimensions(path: &Path) -> Result<(u32, u32)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .into_dimensions()
        .map_err(|e| image_error(path, e))
}

/// Writes a binary PGM or PPM depending on the channel count.
pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let (subtype, color) = match frame.channels {
        1 => (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8),
        _ => (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8),
    };
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(&frame.data, frame.width, frame.height, color)
        .map_err(|e| image_error(path, e))
}

/// Antialiased bilinear (triangle filter) resampling of one plane. Equal
/// sizes copy the input unchanged.
pub fn resize_plane(src: &[f32], width: u32, height: u32, out_w: u32, out_h: u32) -> Vec<f32> {
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(width, height, src.to_vec()).expect("plane size matches extents");
    imageops::resize(&buf, out_w, out_h, FilterType::Triangle).into_raw()
}

fn resample<P>(img: &ImageBuffer<P, Vec<f32>>, b: &BBox, out_w: u32, out_h: u32) -> Vec<f32>
where
    P: Pixel<Subpixel = f32> + 'static,
{
    let crop = imageops::crop_imm(img, b.x, b.y, b.w, b.h).to_image();
    let out = imageops::resize(&crop, out_w, out_h, FilterType::Triangle);
    // interleaved -> planar
    let c = P::CHANNEL_COUNT as usize;
    let raw = out.into_raw();
    let plane = raw.len() / c;
    let mut planar = vec![0.0; raw.len()];
    for (i, px) in raw.chunks(c).enumerate() {
        for (ch, v) in px.iter().enumerate() {
            planar[ch * plane + i] = v.clamp(0.0, 1.0);
        }
    }
    planar
}

/// Crops the face and the five regions from `frame` and resamples them.
/// Returns the `ch x H x W` face tensor and the `5*ch x h x w` region stack.
pub fn crop_and_resize(
    frame: &Frame,
    face: &BBox,
    regions: &[BBox; 5],
    config: &DataConfig,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    config.validate()?;
    let check = |what: &str, b: &BBox| {
        b.validate(frame.width, frame.height)
            .map_err(|m| Error::InvalidArgument(format!("{what}: {m}")))
    };
    check("face_bbox", face)?;
    for r in Region::ALL {
        check(r.name(), &regions[r.index()])?;
    }
    let [gh, gw] = config.global_size;
    let [rh, rw] = config.region_size;
    let ch = config.channels;
    let img = frame.to_dynamic();
    let (global, local) = if ch == 1 {
        let buf = img.to_luma32f();
        let g = resample(&buf, face, gw as u32, gh as u32);
        let l: Vec<f32> = regions
            .iter()
            .flat_map(|b| resample(&buf, b, rw as u32, rh as u32))
            .collect();
        (g, l)
    } else {
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = img.to_rgb32f();
        let g = resample(&buf, face, gw as u32, gh as u32);
        let l: Vec<f32> = regions
            .iter()
            .flat_map(|b| resample(&buf, b, rw as u32, rh as u32))
            .collect();
        (g, l)
    };
    Ok((
        Tensor::new(vec![ch, gh, gw], global)?,
        Tensor::new(vec![5 * ch, rh, rw], local)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let src: Vec<f32> = (0..12).map(|i| i as f32 / 11.0).collect();
        assert_eq!(resize_plane(&src, 4, 3, 4, 3), src);
        let flat = vec![0.3f32; 40 * 30];
        for v in resize_plane(&flat, 40, 30, 13, 17) {
            assert!((v - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn pnm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = Frame::gray(3, 2, vec![0, 10, 20, 30, 40, 255]).unwrap();
        let p = dir.path().join("a.pgm");
        write_frame(&p, &f).unwrap();
        assert_eq!(&std::fs::read(&p).unwrap()[..2], b"P5");
        assert_eq!(read_frame(&p).unwrap(), f);
        assert_eq!(frame_dimensions(&p).unwrap(), (3, 2));
        let c = Frame::rgb(1, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let p = dir.path().join("b.ppm");
        write_frame(&p, &c).unwrap();
        assert_eq!(&std::fs::read(&p).unwrap()[..2], b"P6");
        assert_eq!(read_frame(&p).unwrap(), c);
    }
}
