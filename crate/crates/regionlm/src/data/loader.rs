//! Line-delimited JSON dataset reader and writer.
//!
//! Each line is one record: `{id, image, depth?, masks, turns, category?}`.
//! Images and depth maps may be inline nested arrays or paths relative to the
//! dataset file; paths load as PNG (8-bit RGB for images, 16-bit grayscale
//! millimeters for depth).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::types::{ConversationSample, DataError, QuestionType, RegionMask, Turn};

#[derive(Serialize, Deserialize)]
struct RecordWire {
    id: String,
    image: ImageSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<DepthSource>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    masks: Vec<RegionMask>,
    turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<QuestionType>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ImageSource {
    Path(String),
    Inline(Vec<Vec<Vec<f64>>>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DepthSource {
    Path(String),
    Inline(Vec<Vec<f64>>),
}

fn image_from_inline(rows: Vec<Vec<Vec<f64>>>) -> Result<Array3<f64>, String> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 {
        return Err("empty inline image".to_string());
    }
    let mut out = Array3::zeros((h, w, 3));
    for (y, row) in rows.iter().enumerate() {
        if row.len() != w {
            return Err(format!("image row {y} has {} pixels, expected {w}", row.len()));
        }
        for (x, px) in row.iter().enumerate() {
            if px.len() != 3 {
                return Err(format!("pixel ({y}, {x}) has {} channels, expected 3", px.len()));
            }
            for (c, &v) in px.iter().enumerate() {
                out[(y, x, c)] = v;
            }
        }
    }
    Ok(out)
}

fn depth_from_inline(rows: Vec<Vec<f64>>) -> Result<Array2<f64>, String> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 {
        return Err("empty inline depth".to_string());
    }
    let mut out = Array2::zeros((h, w));
    for (y, row) in rows.iter().enumerate() {
        if row.len() != w {
            return Err(format!("depth row {y} has {} values, expected {w}", row.len()));
        }
        for (x, &v) in row.iter().enumerate() {
            out[(y, x)] = v;
        }
    }
    Ok(out)
}

fn image_from_png(path: &Path) -> Result<Array3<f64>, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[(y as usize, x as usize, c)] = f64::from(px.0[c]) / 255.0;
        }
    }
    Ok(out)
}

fn depth_from_png(path: &Path) -> Result<Array2<f64>, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    match img {
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            let mut out = Array2::zeros((h as usize, w as usize));
            for (x, y, px) in buf.enumerate_pixels() {
                out[(y as usize, x as usize)] = f64::from(px.0[0]) / 1000.0;
            }
            Ok(out)
        }
        other => Err(DataError::Image {
            path: path.to_path_buf(),
            reason: format!(
                "depth must be 16-bit grayscale millimeters or an inline array, got {other:?}"
            ),
        }),
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn sample_from_wire(wire: RecordWire, base: &Path) -> Result<ConversationSample, DataError> {
    let id = wire.id.clone();
    let bad = |reason: String| DataError::Invalid {
        sample_id: id.clone(),
        reason,
    };
    let image = match wire.image {
        ImageSource::Inline(rows) => image_from_inline(rows).map_err(bad)?,
        ImageSource::Path(rel) => image_from_png(&resolve(base, &rel))?,
    };
    let depth = match wire.depth {
        None => None,
        Some(DepthSource::Inline(rows)) => Some(depth_from_inline(rows).map_err(|r| {
            DataError::Invalid {
                sample_id: id.clone(),
                reason: r,
            }
        })?),
        Some(DepthSource::Path(rel)) => Some(depth_from_png(&resolve(base, &rel))?),
    };
    let sample = ConversationSample {
        sample_id: wire.id,
        image,
        depth,
        masks: wire.masks,
        turns: wire.turns,
        category: wire.category,
    };
    sample.validate()?;
    Ok(sample)
}

fn wire_from_sample(sample: &ConversationSample) -> RecordWire {
    let (h, w, _) = sample.image.dim();
    let image = (0..h)
        .map(|y| {
            (0..w)
                .map(|x| (0..3).map(|c| sample.image[(y, x, c)]).collect())
                .collect()
        })
        .collect();
    let depth = sample.depth.as_ref().map(|d| {
        DepthSource::Inline(
            (0..h)
                .map(|y| (0..w).map(|x| d[(y, x)]).collect())
                .collect(),
        )
    });
    RecordWire {
        id: sample.sample_id.clone(),
        image: ImageSource::Inline(image),
        depth,
        masks: sample.masks.clone(),
        turns: sample.turns.clone(),
        category: sample.category,
    }
}

/// Reads and validates every record in a line-delimited JSON dataset file.
pub fn load_dataset(path: &Path) -> Result<Vec<ConversationSample>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let wire: RecordWire =
            serde_json::from_str(line).map_err(|e| DataError::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        let sample = sample_from_wire(wire, base)?;
        if !seen.insert(sample.sample_id.clone()) {
            return Err(DataError::Invalid {
                sample_id: sample.sample_id,
                reason: "duplicate sample id".to_string(),
            });
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(DataError::MalformedRecord {
            path: path.to_path_buf(),
            line: 0,
            reason: "dataset contains no records".to_string(),
        });
    }
    Ok(samples)
}

/// Writes samples as line-delimited JSON with inline pixel data.
pub fn write_dataset(samples: &[ConversationSample], path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for sample in samples {
        let wire = wire_from_sample(sample);
        let line = serde_json::to_string(&wire).expect("record serialization cannot fail");
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses and validates a single record line. Path references resolve
/// against `base`; callers feeding untrusted input should point `base` at an
/// empty directory so path lookups fail cleanly.
pub fn parse_record_line(line: &str, base: &Path) -> Result<ConversationSample, DataError> {
    let wire: RecordWire = serde_json::from_str(line).map_err(|e| DataError::MalformedRecord {
        path: base.to_path_buf(),
        line: 1,
        reason: e.to_string(),
    })?;
    sample_from_wire(wire, base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MaskPayload;

    fn tiny_sample() -> ConversationSample {
        ConversationSample {
            sample_id: "t0".into(),
            image: Array3::from_elem((2, 2, 3), 0.5),
            depth: Some(Array2::from_elem((2, 2), 1.25)),
            masks: vec![RegionMask {
                h: 2,
                w: 2,
                payload: MaskPayload::Rle { counts: vec![1, 2, 1] },
            }],
            turns: vec![
                Turn {
                    role: crate::data::Role::User,
                    text: "<image>\nwhere is <mask>?".into(),
                },
                Turn {
                    role: crate::data::Role::Assistant,
                    text: "left.".into(),
                },
            ],
            category: Some(QuestionType::LeftRight),
        }
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let sample = tiny_sample();
        write_dataset(std::slice::from_ref(&sample), &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].sample_id, sample.sample_id);
        assert_eq!(loaded[0].image, sample.image);
        assert_eq!(loaded[0].depth, sample.depth);
        assert_eq!(loaded[0].masks, sample.masks);
        assert_eq!(loaded[0].turns, sample.turns);
        assert_eq!(loaded[0].category, sample.category);
    }

    #[test]
    fn missing_depth_with_masks_is_rejected() {
        let mut sample = tiny_sample();
        sample.depth = None;
        match sample.validate() {
            Err(DataError::MissingDepth { sample_id }) => assert_eq!(sample_id, "t0"),
            other => panic!("expected MissingDepth, got {other:?}"),
        }
    }

    #[test]
    fn mask_count_mismatch_is_rejected() {
        let mut sample = tiny_sample();
        sample.masks.push(sample.masks[0].clone());
        assert!(matches!(
            sample.validate(),
            Err(DataError::MaskCountMismatch { masks: 2, placeholders: 1, .. })
        ));
    }

    #[test]
    fn bad_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        std::fs::write(&path, "{\"id\": \"a\"\n").unwrap();
        match load_dataset(&path) {
            Err(DataError::MalformedRecord { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
    }

    #[test]
    fn png_image_loads() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("img.png");
        let buf = image::RgbImage::from_fn(2, 2, |x, y| image::Rgb([(x * 255) as u8, (y * 255) as u8, 128]));
        buf.save(&img_path).unwrap();
        let loaded = image_from_png(&img_path).unwrap();
        assert_eq!(loaded.dim(), (2, 2, 3));
        assert!((loaded[(0, 1, 0)] - 1.0).abs() < 1e-12);
        assert!((loaded[(0, 0, 2)] - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn depth_png_requires_sixteen_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p8 = dir.path().join("d8.png");
        image::GrayImage::from_pixel(2, 2, image::Luma([7u8])).save(&p8).unwrap();
        assert!(depth_from_png(&p8).is_err());
        let p16 = dir.path().join("d16.png");
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_pixel(2, 2, image::Luma([1500u16]))
            .save(&p16)
            .unwrap();
        let d = depth_from_png(&p16).unwrap();
        assert!((d[(0, 0)] - 1.5).abs() < 1e-12);
    }
}
