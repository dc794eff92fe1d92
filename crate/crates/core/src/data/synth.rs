//! Seeded synthetic faces for dataset-free training and testing.
//!
//! Each class is defined by two cues. A horizontal brightness ramp across
//! the forehead points left or right; it survives downsampling to the face
//! tensor but lies outside every region crop. A fine grating with a random
//! phase covers all five regions and runs horizontally everywhere except in
//! one class-specific region, where it runs vertically; the grating is
//! averaged away in the face tensor but resolved in the region crops.
//!
//! | class      | ramp  | vertical grating |
//! |------------|-------|------------------|
//! | Happiness  | left  | oral             |
//! | Surprise   | left  | ocular_brow      |
//! | Disgust    | right | ocular_brow      |
//! | Repression | right | oral             |
//! | Others     | random| cheek            |
//!
//! Either cue alone leaves pairs of classes confusable; both together
//! identify the class.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::frames::{crop_and_resize, write_frame, Frame};
use super::manifest::write_manifest;
use super::{default_region_boxes, BBox, DataConfig, EmotionClass, ManifestRecord, Region, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    pub face_bbox: BBox,
    pub subjects: usize,
    pub ramp_amplitude: f64,
    pub grating_amplitude: f64,
    /// Grating period in source pixels.
    pub grating_period: f64,
    /// Cue strength of the onset frame relative to the apex.
    pub onset_scale: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 128,
            height: 160,
            face_bbox: BBox::new(8, 10, 112, 140),
            subjects: 10,
            ramp_amplitude: 0.18,
            grating_amplitude: 0.25,
            grating_period: 4.0,
            onset_scale: 0.2,
            noise: 0.03,
        }
    }
}

/// A generated record together with its frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub record: ManifestRecord,
    pub onset: Frame,
    pub apex: Frame,
}

struct Cues {
    ramp_sign: f64,
    vertical: Region,
    phases: [f64; 5],
    offset: f64,
}

fn class_cues(class: EmotionClass, rng: &mut ChaCha8Rng) -> (f64, Region) {
    match class {
        EmotionClass::Happiness => (1.0, Region::Oral),
        EmotionClass::Surprise => (1.0, Region::OcularBrow),
        EmotionClass::Disgust => (-1.0, Region::OcularBrow),
        EmotionClass::Repression => (-1.0, Region::Oral),
        EmotionClass::Others => (if rng.gen_bool(0.5) { 1.0 } else { -1.0 }, Region::Cheek),
    }
}

fn action_units(class: EmotionClass) -> Vec<u32> {
    match class {
        EmotionClass::Happiness => vec![12],
        EmotionClass::Surprise => vec![1, 2],
        EmotionClass::Disgust => vec![4],
        EmotionClass::Repression => vec![14],
        EmotionClass::Others => vec![6],
    }
}

fn render(cfg: &SynthConfig, cues: &Cues, scale: f64, rng: &mut ChaCha8Rng) -> Frame {
    let face = cfg.face_bbox;
    let regions = default_region_boxes(&face);
    let (fw, fh) = (face.w as f64, face.h as f64);
    let mut data = Vec::with_capacity((cfg.width * cfg.height) as usize);
    for py in 0..cfg.height {
        for px in 0..cfg.width {
            let u = (px as f64 + 0.5 - face.x as f64) / fw;
            let v = (py as f64 + 0.5 - face.y as f64) / fh;
            let d = ((u - 0.5) / 0.5).powi(2) + ((v - 0.5) / 0.5).powi(2);
            let mut val = if d <= 1.0 { 0.55 + 0.1 * (1.0 - d) } else { 0.2 };
            val += cues.offset;
            if (0.04..0.18).contains(&v) && (0.15..0.85).contains(&u) {
                // left-bright for positive sign
                val -= scale * cues.ramp_sign * cfg.ramp_amplitude * (u - 0.5) / 0.35;
            }
            for r in Region::ALL {
                let b = &regions[r.index()];
                if px >= b.x && px < b.x + b.w && py >= b.y && py < b.y + b.h {
                    let coord = if r == cues.vertical { px } else { py } as f64;
                    val += scale
                        * cfg.grating_amplitude
                        * (2.0 * PI * coord / cfg.grating_period + cues.phases[r.index()]).sin();
                }
            }
            val += rng.gen_range(-cfg.noise..=cfg.noise);
            data.push((val.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Frame::gray(cfg.width, cfg.height, data).expect("frame extents")
}

fn check(n: usize, cfg: &SynthConfig) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic dataset size must be positive".into()));
    }
    if cfg.subjects == 0 || !(cfg.grating_period > 0.0 && cfg.grating_period.is_finite()) {
        return Err(Error::Config(
            "synth: subjects and grating_period must be positive".into(),
        ));
    }
    cfg.face_bbox
        .validate(cfg.width, cfg.height)
        .map_err(|m| Error::Config(format!("synth face_bbox: {m}")))
}

/// Generates `n` records with in-memory frames. Sample `i` has class
/// `i mod 5` and subject `(i / 5) mod subjects`; its randomness comes from
/// stream `i` of the seeded generator, so any prefix is stable.
pub fn synth_records(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    check(n, cfg)?;
    let regions = default_region_boxes(&cfg.face_bbox);
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let class = EmotionClass::ALL[i % 5];
            let (ramp_sign, vertical) = class_cues(class, &mut rng);
            let cues = Cues {
                ramp_sign,
                vertical,
                phases: std::array::from_fn(|_| rng.gen_range(0.0..2.0 * PI)),
                offset: rng.gen_range(-0.04..=0.04),
            };
            let apex = render(cfg, &cues, 1.0, &mut rng);
            let onset = render(cfg, &cues, cfg.onset_scale, &mut rng);
            let raw_label = match class {
                EmotionClass::Others => ["Others", "Fear", "Sadness"][(i / 5) % 3],
                c => c.name(),
            };
            let id = format!("syn{i:05}");
            let record = ManifestRecord {
                sample_id: id.clone(),
                subject: format!("sub{:02}", (i / 5) % cfg.subjects),
                onset_path: PathBuf::from(format!("frames/{id}_onset.pgm")),
                apex_path: PathBuf::from(format!("frames/{id}_apex.pgm")),
                raw_label: raw_label.to_string(),
                action_units: action_units(class),
                face_bbox: cfg.face_bbox,
                region_bboxes: Some(Region::ALL.into_iter().map(|r| (r, regions[r.index()])).collect()),
            };
            Ok(SynthSample { record, onset, apex })
        })
        .collect()
}

/// Generates `n` preprocessed samples, identical to writing them with
/// [`write_synth`] and loading the manifest back.
pub fn synth_generate(n: usize, seed: u64, cfg: &SynthConfig, data: &DataConfig) -> Result<Vec<Sample>> {
    synth_records(n, seed, cfg)?
        .into_iter()
        .map(|s| {
            let regions = s.record.regions();
            let (apex, crops) = crop_and_resize(&s.apex, &s.record.face_bbox, &regions, data)?;
            let (onset, _) = crop_and_resize(&s.onset, &s.record.face_bbox, &regions, data)?;
            Ok(Sample {
                label: super::merge_label(&s.record.raw_label)?,
                sample_id: s.record.sample_id,
                subject: s.record.subject,
                onset,
                apex,
                regions: crops,
            })
        })
        .collect()
}

/// Writes frames under `dir/frames` and the manifest to
/// `dir/manifest.jsonl`. Returns the manifest path.
pub fn write_synth(dir: &Path, n: usize, seed: u64, cfg: &SynthConfig) -> Result<PathBuf> {
    let samples = synth_records(n, seed, cfg)?;
    let frames = dir.join("frames");
    std::fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    for s in &samples {
        write_frame(&dir.join(&s.record.onset_path), &s.onset)?;
        write_frame(&dir.join(&s.record.apex_path), &s.apex)?;
    }
    let manifest = dir.join("manifest.jsonl");
    let records: Vec<ManifestRecord> = samples.into_iter().map(|s| s.record).collect();
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
