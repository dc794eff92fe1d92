//! Line-oriented JSON manifests.
//!
//! One JSON object per line with the fields of [`ManifestRecord`]. Blank
//! lines and lines starting with `#` are skipped. Boxes are `[x, y, w, h]`
//! arrays; image paths are relative to the manifest's directory unless
//! absolute.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use super::frames::{crop_and_resize, frame_dimensions, read_frame};
use super::{default_region_boxes, merge_label, BBox, DataConfig, Region, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub subject: String,
    pub onset_path: PathBuf,
    pub apex_path: PathBuf,
    pub raw_label: String,
    pub action_units: Vec<u32>,
    pub face_bbox: BBox,
    /// All five regions, or `None` to derive them from the face box.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region_bboxes: Option<BTreeMap<Region, BBox>>,
}

impl ManifestRecord {
    /// Region boxes in [`Region::ALL`] order.
    pub fn regions(&self) -> [BBox; 5] {
        match &self.region_bboxes {
            Some(map) => Region::ALL.map(|r| map[&r]),
            None => default_region_boxes(&self.face_bbox),
        }
    }

    fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// Reads both frames (paths relative to `base`) and preprocesses them.
    pub fn to_sample(&self, base: &Path, config: &DataConfig) -> Result<Sample> {
        let label = merge_label(&self.raw_label)?;
        let regions = self.regions();
        let apex = read_frame(&Self::resolve(base, &self.apex_path))?;
        let onset = read_frame(&Self::resolve(base, &self.onset_path))?;
        let (apex, crops) = crop_and_resize(&apex, &self.face_bbox, &regions, config)?;
        let (onset, _) = crop_and_resize(&onset, &self.face_bbox, &regions, config)?;
        Ok(Sample {
            sample_id: self.sample_id.clone(),
            subject: self.subject.clone(),
            onset,
            apex,
            regions: crops,
            label,
        })
    }
}

struct LineCtx<'a> {
    path: &'a Path,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Manifest {
            path: self.path.to_path_buf(),
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn string(&self, obj: &Map<String, Value>, field: &str) -> Result<String> {
        match obj.get(field) {
            Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
            Some(Value::String(_)) => Err(self.err(field, "must not be empty")),
            Some(_) => Err(self.err(field, "expected a string")),
            None => Err(self.err(field, "missing")),
        }
    }

    fn bbox(&self, v: &Value, field: &str) -> Result<BBox> {
        let arr = v
            .as_array()
            .filter(|a| a.len() == 4)
            .ok_or_else(|| self.err(field, "expected [x, y, w, h]"))?;
        let mut out = [0u32; 4];
        for (o, v) in out.iter_mut().zip(arr) {
            *o = v
                .as_u64()
                .and_then(|n| u32::try_from(n).ok())
                .ok_or_else(|| self.err(field, "coordinates must be non-negative integers"))?;
        }
        let b = BBox::from(out);
        if b.is_degenerate() {
            return Err(self.err(field, format!("degenerate box {b}")));
        }
        Ok(b)
    }

    fn record(&self, text: &str) -> Result<ManifestRecord> {
        let value: Value = serde_json::from_str(text).map_err(|e| self.err("<record>", e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| self.err("<record>", "expected a JSON object"))?;
        const KNOWN: [&str; 8] = [
            "sample_id",
            "subject",
            "onset_path",
            "apex_path",
            "raw_label",
            "action_units",
            "face_bbox",
            "region_bboxes",
        ];
        if let Some(k) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            return Err(self.err(k, "unknown field"));
        }
        let raw_label = self.string(obj, "raw_label")?;
        merge_label(&raw_label).map_err(|e| self.err("raw_label", e.to_string()))?;
        let action_units = match obj.get("action_units") {
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| v.as_u64().and_then(|n| u32::try_from(n).ok()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| self.err("action_units", "expected non-negative integers"))?,
            Some(_) => return Err(self.err("action_units", "expected an array")),
            None => return Err(self.err("action_units", "missing")),
        };
        let face_bbox = self.bbox(
            obj.get("face_bbox").ok_or_else(|| self.err("face_bbox", "missing"))?,
            "face_bbox",
        )?;
        let region_bboxes = match obj.get("region_bboxes") {
            None | Some(Value::Null) => None,
            Some(Value::Object(m)) => {
                let mut map = BTreeMap::new();
                for (k, v) in m {
                    let field = format!("region_bboxes.{k}");
                    let region: Region = k.parse().map_err(|_| self.err(&field, "unknown region"))?;
                    map.insert(region, self.bbox(v, &field)?);
                }
                if let Some(r) = Region::ALL.iter().find(|r| !map.contains_key(r)) {
                    return Err(self.err(&format!("region_bboxes.{r}"), "missing; give all five regions or none"));
                }
                Some(map)
            }
            Some(_) => return Err(self.err("region_bboxes", "expected an object")),
        };
        Ok(ManifestRecord {
            sample_id: self.string(obj, "sample_id")?,
            subject: self.string(obj, "subject")?,
            onset_path: self.string(obj, "onset_path")?.into(),
            apex_path: self.string(obj, "apex_path")?.into(),
            raw_label,
            action_units,
            face_bbox,
            region_bboxes,
        })
    }
}

/// Parses manifest text without touching the referenced files. `origin`
/// only labels diagnostics.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let ctx = LineCtx {
            path: origin,
            line: i + 1,
        };
        out.push(ctx.record(trimmed)?);
    }
    Ok(out)
}

/// Parses and validates a manifest: every frame must exist, the onset and
/// apex frames must agree in size, and all boxes must lie inside them.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let records = parse_manifest(&text, path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut line_of = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim().starts_with('#'))
        .map(|(i, _)| i + 1);
    for r in &records {
        let ctx = LineCtx {
            path,
            line: line_of.next().unwrap_or(0),
        };
        let apex = frame_dimensions(&ManifestRecord::resolve(base, &r.apex_path))?;
        let onset = frame_dimensions(&ManifestRecord::resolve(base, &r.onset_path))?;
        if apex != onset {
            return Err(ctx.err(
                "onset_path",
                format!("onset is {}x{}, apex is {}x{}", onset.0, onset.1, apex.0, apex.1),
            ));
        }
        r.face_bbox
            .validate(apex.0, apex.1)
            .map_err(|m| ctx.err("face_bbox", m))?;
        for region in Region::ALL {
            r.regions()[region.index()]
                .validate(apex.0, apex.1)
                .map_err(|m| ctx.err(&format!("region_bboxes.{region}"), m))?;
        }
    }
    Ok(records)
}

/// Writes records one per line in field order.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = Vec::new();
    for r in records {
        serde_json::to_writer(&mut text, r)?;
        text.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"sample_id":"s1","subject":"01","onset_path":"a.pgm","apex_path":"b.pgm","raw_label":"Fear","action_units":[4,7],"face_bbox":[0,0,10,12]}"#;

    #[test]
    fn parses_and_skips_comments() {
        let text = format!("# header\n\n{LINE}\n");
        let recs = parse_manifest(&text, Path::new("m.jsonl")).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].face_bbox, BBox::new(0, 0, 10, 12));
        assert!(parse_manifest("", Path::new("m")).unwrap().is_empty());
    }

    #[test]
    fn errors_name_line_and_field() {
        let bad = LINE.replace("[4,7]", "\"4+7\"");
        let err = parse_manifest(&format!("# c\n{bad}"), Path::new("m")).unwrap_err();
        match err {
            Error::Manifest { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "action_units");
            }
            e => panic!("{e}"),
        }
        let err = parse_manifest(&LINE.replace("Fear", "Joy"), Path::new("m")).unwrap_err();
        assert!(err.to_string().contains("raw_label"), "{err}");
        let err = parse_manifest(&LINE.replace("[0,0,10,12]", "[0,0,0,12]"), Path::new("m")).unwrap_err();
        assert!(err.to_string().contains("face_bbox"), "{err}");
    }
}
