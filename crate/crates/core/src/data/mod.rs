//! Samples, labels, facial regions and dataset assembly.

mod frames;
mod manifest;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Real, Tensor};

pub use frames::{crop_and_resize, read_frame, resize_plane, write_frame, Frame};
pub use manifest::{load_manifest, parse_manifest, write_manifest, ManifestRecord};
pub use synth::{synth_generate, synth_records, write_synth, SynthConfig, SynthSample};

/// The five facial regions, in the channel order used by the local branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    OcularBrow,
    Oral,
    Mandibular,
    Cheek,
    Nasal,
}

impl Region {
    pub const ALL: [Region; 5] = [
        Region::OcularBrow,
        Region::Oral,
        Region::Mandibular,
        Region::Cheek,
        Region::Nasal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::OcularBrow => "ocular_brow",
            Region::Oral => "oral",
            Region::Mandibular => "mandibular",
            Region::Cheek => "cheek",
            Region::Nasal => "nasal",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Action units assigned to this region.
    pub fn action_units(self) -> &'static [u32] {
        match self {
            Region::OcularBrow => &[1, 2, 4, 5, 7],
            Region::Oral => &[10, 12, 14, 15, 16, 25, 26],
            Region::Mandibular => &[17],
            Region::Cheek => &[6],
            Region::Nasal => &[9, 38],
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Region::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown region `{s}`")))
    }
}

/// The region containing `au`, or `None` for an unmapped action unit.
pub fn region_for_au(au: u32) -> Option<Region> {
    Region::ALL.into_iter().find(|r| r.action_units().contains(&au))
}

/// Merged emotion classes; the discriminant is the class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EmotionClass {
    Happiness,
    Surprise,
    Disgust,
    Repression,
    Others,
}

pub const NUM_CLASSES: usize = 5;

impl EmotionClass {
    pub const ALL: [EmotionClass; NUM_CLASSES] = [
        EmotionClass::Happiness,
        EmotionClass::Surprise,
        EmotionClass::Disgust,
        EmotionClass::Repression,
        EmotionClass::Others,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EmotionClass::Happiness => "Happiness",
            EmotionClass::Surprise => "Surprise",
            EmotionClass::Disgust => "Disgust",
            EmotionClass::Repression => "Repression",
            EmotionClass::Others => "Others",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for EmotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Maps a raw annotation label to its merged class. Fear and Sadness are too
/// rare to stand alone and fold into Others.
pub fn merge_label(raw: &str) -> Result<EmotionClass> {
    Ok(match raw {
        "Happiness" => EmotionClass::Happiness,
        "Surprise" => EmotionClass::Surprise,
        "Disgust" => EmotionClass::Disgust,
        "Repression" => EmotionClass::Repression,
        "Others" | "Fear" | "Sadness" => EmotionClass::Others,
        other => return Err(Error::InvalidArgument(format!("unknown emotion label `{other}`"))),
    })
}

/// Pixel rectangle `(x, y, w, h)` with its origin at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        BBox { x, y, w, h }
    }

    pub fn is_degenerate(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x as u64 + self.w as u64 <= width as u64 && self.y as u64 + self.h as u64 <= height as u64
    }

    /// Checks the box against an image of `width x height`.
    pub fn validate(&self, width: u32, height: u32) -> Result<(), String> {
        if self.is_degenerate() {
            return Err(format!("degenerate box {self}"));
        }
        if !self.fits(width, height) {
            return Err(format!("box {self} exceeds {width}x{height} image"));
        }
        Ok(())
    }
}

impl From<[u32; 4]> for BBox {
    fn from([x, y, w, h]: [u32; 4]) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x, self.y, self.w, self.h)
    }
}

/// Region boxes as fractions `(x, y, w, h)` of the face box.
const DEFAULT_LAYOUT: [(Region, [f64; 4]); 5] = [
    (Region::OcularBrow, [0.39, 0.22, 0.22, 0.18]),
    (Region::Oral, [0.39, 0.62, 0.22, 0.18]),
    (Region::Mandibular, [0.39, 0.81, 0.22, 0.18]),
    (Region::Cheek, [0.12, 0.48, 0.22, 0.18]),
    (Region::Nasal, [0.39, 0.42, 0.22, 0.18]),
];

/// Fixed-proportion region boxes for a face, in [`Region::ALL`] order.
pub fn default_region_boxes(face: &BBox) -> [BBox; 5] {
    let mut out = [BBox::new(0, 0, 0, 0); 5];
    for (region, [fx, fy, fw, fh]) in DEFAULT_LAYOUT {
        let (w, h) = (face.w as f64, face.h as f64);
        out[region.index()] = BBox {
            x: face.x + (fx * w).round() as u32,
            y: face.y + (fy * h).round() as u32,
            w: ((fw * w).round() as u32).max(1),
            h: ((fh * h).round() as u32).max(1),
        };
    }
    out
}

/// Shapes the pipeline produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Face tensor extent `[H, W]`.
    pub global_size: [usize; 2],
    /// Region crop extent `[H, W]`.
    pub region_size: [usize; 2],
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
}

impl DataConfig {
    /// Paper geometry: 282 x 231 faces, 64 x 64 regions, RGB.
    pub fn paper() -> Self {
        DataConfig {
            global_size: [282, 231],
            region_size: [64, 64],
            channels: 3,
        }
    }

    pub fn for_model(config: &ModelConfig) -> Self {
        DataConfig {
            global_size: config.global_size,
            region_size: config.region_size,
            channels: config.in_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.global_size.contains(&0) || self.region_size.contains(&0) {
            return Err(Error::Config("image sizes must be positive".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        Ok(())
    }
}

/// One preprocessed instance. Pixel values lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub subject: String,
    /// `ch x H x W`
    pub onset: Tensor<f32>,
    /// `ch x H x W`
    pub apex: Tensor<f32>,
    /// `5*ch x h x w`, region-major.
    pub regions: Tensor<f32>,
    pub label: EmotionClass,
}

/// Mini-batch tensors for the model.
pub struct Batch<T> {
    pub global: Tensor<T>,
    pub regions: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> Batch<T> {
    /// Stacks the apex frames and region crops of `samples[i]` for each `i`.
    pub fn gather(samples: &[Sample], indices: &[usize]) -> Result<Self> {
        let first = indices
            .first()
            .map(|&i| &samples[i])
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (gs, rs) = (first.apex.shape().to_vec(), first.regions.shape().to_vec());
        let mut global = Vec::with_capacity(indices.len() * first.apex.numel());
        let mut regions = Vec::with_capacity(indices.len() * first.regions.numel());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &samples[i];
            if s.apex.shape() != gs.as_slice() || s.regions.shape() != rs.as_slice() {
                return Err(Error::shape(
                    "batch",
                    format!(
                        "sample `{}` has shapes {:?}/{:?}, expected {gs:?}/{rs:?}",
                        s.sample_id,
                        s.apex.shape(),
                        s.regions.shape()
                    ),
                ));
            }
            global.extend(s.apex.data().iter().map(|&v| T::from_f64(v as f64)));
            regions.extend(s.regions.data().iter().map(|&v| T::from_f64(v as f64)));
            labels.push(s.label.index());
        }
        let n = indices.len();
        Ok(Batch {
            global: Tensor::new([&[n][..], &gs].concat(), global)?,
            regions: Tensor::new([&[n][..], &rs].concat(), regions)?,
            labels,
        })
    }
}

/// Loads every manifest record and preprocesses it.
pub fn load_dataset(path: &std::path::Path, config: &DataConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    let records = load_manifest(path)?;
    let base = path.parent().unwrap_or(std::path::Path::new("."));
    records.iter().map(|r| r.to_sample(base, config)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_lookup() {
        assert_eq!(region_for_au(12), Some(Region::Oral));
        assert_eq!(region_for_au(17), Some(Region::Mandibular));
        assert_eq!(region_for_au(9), Some(Region::Nasal));
        assert_eq!(region_for_au(3), None);
        for r in Region::ALL {
            assert_eq!(r.name().parse::<Region>().unwrap(), r);
        }
    }

    #[test]
    fn label_merging() {
        assert_eq!(merge_label("Fear").unwrap(), EmotionClass::Others);
        assert_eq!(merge_label("Sadness").unwrap(), EmotionClass::Others);
        assert_eq!(merge_label("Disgust").unwrap(), EmotionClass::Disgust);
        assert!(merge_label("Contempt").is_err());
    }

    #[test]
    fn default_boxes_fit_face() {
        let face = BBox::new(8, 10, 112, 140);
        for b in default_region_boxes(&face) {
            assert!(b.x >= face.x && b.y >= face.y);
            assert!(b.x + b.w <= face.x + face.w && b.y + b.h <= face.y + face.h);
        }
    }
}
