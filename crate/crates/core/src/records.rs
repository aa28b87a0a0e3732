//! Line-delimited dataset and result records, plus scene PNG I/O.
//!
//! Annotation line: `image_id,marker_id,8 corner floats,S*S*2 grid floats,bits`
//! (bits as a contiguous 0/1 string). Detection line:
//! `image_id,4 box floats,8 corner floats,objectness,confidence,id|REJECT`.
//! Floats use shortest round-trip formatting, so write/read is exact.

use std::fs;
use std::path::Path;

use crate::codec::Message;
use crate::detector::{BoxF, Detection};
use crate::render::Annotation;
use crate::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("expected an rgb image with [3,H,W] layout")]
    BadShape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: usize,
    pub marker_id: usize,
    pub corners: [(f64, f64); 4],
    pub grid: Vec<(f64, f64)>,
    pub bits: Vec<u8>,
}

impl AnnotationRecord {
    pub fn from_annotation(image_id: usize, ann: &Annotation) -> Self {
        AnnotationRecord {
            image_id,
            marker_id: ann.marker_id,
            corners: ann.corners,
            grid: ann.grid.clone(),
            bits: ann.message.bits().to_vec(),
        }
    }

    pub fn grid_side(&self) -> usize {
        (self.grid.len() as f64).sqrt() as usize
    }

    pub fn bbox(&self) -> BoxF {
        hull(&self.corners)
    }

    pub fn message(&self) -> Message {
        Message::new(self.bits.clone())
    }

    fn to_line(&self) -> String {
        let mut parts = vec![self.image_id.to_string(), self.marker_id.to_string()];
        for &(x, y) in &self.corners {
            parts.push(x.to_string());
            parts.push(y.to_string());
        }
        for &(x, y) in &self.grid {
            parts.push(x.to_string());
            parts.push(y.to_string());
        }
        parts.push(self.bits.iter().map(|b| (b + b'0') as char).collect());
        parts.join(",")
    }

    fn parse_line(line: &str, lineno: usize) -> Result<Self, RecordError> {
        let err = |reason: &str| RecordError::Parse { line: lineno, reason: reason.to_string() };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 11 {
            return Err(err("too few fields"));
        }
        let image_id = fields[0].parse().map_err(|_| err("bad image_id"))?;
        let marker_id = fields[1].parse().map_err(|_| err("bad marker_id"))?;
        let bits_str = fields[fields.len() - 1];
        let bits: Vec<u8> = bits_str
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(err("bits must be 0/1")),
            })
            .collect::<Result<_, _>>()?;
        let floats: Vec<f64> = fields[2..fields.len() - 1]
            .iter()
            .map(|f| f.parse().map_err(|_| err("bad float")))
            .collect::<Result<_, _>>()?;
        if floats.len() < 8 || (floats.len() - 8) % 2 != 0 {
            return Err(err("corner/grid field count"));
        }
        let mut corners = [(0.0, 0.0); 4];
        for k in 0..4 {
            corners[k] = (floats[2 * k], floats[2 * k + 1]);
        }
        let grid = floats[8..].chunks(2).map(|c| (c[0], c[1])).collect();
        Ok(AnnotationRecord { image_id, marker_id, corners, grid, bits })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image_id: usize,
    pub bbox: BoxF,
    pub corners: [(f64, f64); 4],
    pub objectness: f64,
    pub confidence: f64,
    /// `None` encodes a REJECT verdict.
    pub matched_id: Option<usize>,
    pub bits: Vec<u8>,
}

impl DetectionRecord {
    pub fn from_detection(image_id: usize, det: &Detection) -> Self {
        DetectionRecord {
            image_id,
            bbox: det.bbox,
            corners: det.corners,
            objectness: det.objectness,
            confidence: det.confidence,
            matched_id: det.matched_id,
            bits: det.soft_bits.iter().map(|&b| u8::from(b >= 0.5)).collect(),
        }
    }

    fn to_line(&self) -> String {
        let mut parts = vec![self.image_id.to_string()];
        for v in [self.bbox.0, self.bbox.1, self.bbox.2, self.bbox.3] {
            parts.push(v.to_string());
        }
        for &(x, y) in &self.corners {
            parts.push(x.to_string());
            parts.push(y.to_string());
        }
        parts.push(self.objectness.to_string());
        parts.push(self.confidence.to_string());
        parts.push(match self.matched_id {
            Some(id) => id.to_string(),
            None => "REJECT".to_string(),
        });
        parts.push(self.bits.iter().map(|b| (b + b'0') as char).collect());
        parts.join(",")
    }

    fn parse_line(line: &str, lineno: usize) -> Result<Self, RecordError> {
        let err = |reason: &str| RecordError::Parse { line: lineno, reason: reason.to_string() };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 17 {
            return Err(err("expected 17 fields"));
        }
        let num =
            |s: &str| -> Result<f64, RecordError> { s.parse().map_err(|_| err("bad float")) };
        let mut corners = [(0.0, 0.0); 4];
        for k in 0..4 {
            corners[k] = (num(f[5 + 2 * k])?, num(f[6 + 2 * k])?);
        }
        let matched_id = if f[15] == "REJECT" {
            None
        } else {
            Some(f[15].parse().map_err(|_| err("bad id"))?)
        };
        let bits = f[16]
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(err("bits must be 0/1")),
            })
            .collect::<Result<_, _>>()?;
        Ok(DetectionRecord {
            image_id: f[0].parse().map_err(|_| err("bad image_id"))?,
            bbox: (num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?),
            corners,
            objectness: num(f[13])?,
            confidence: num(f[14])?,
            matched_id,
            bits,
        })
    }
}

fn hull(corners: &[(f64, f64); 4]) -> BoxF {
    let xs = corners.map(|c| c.0);
    let ys = corners.map(|c| c.1);
    (
        xs.iter().copied().fold(f64::INFINITY, f64::min),
        ys.iter().copied().fold(f64::INFINITY, f64::min),
        xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    )
}

pub fn write_annotations(path: &Path, recs: &[AnnotationRecord]) -> Result<(), RecordError> {
    let mut s = String::new();
    for r in recs {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, RecordError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| AnnotationRecord::parse_line(l.trim(), i + 1))
        .collect()
}

pub fn write_detections(path: &Path, recs: &[DetectionRecord]) -> Result<(), RecordError> {
    let mut s = String::new();
    for r in recs {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>, RecordError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| DetectionRecord::parse_line(l.trim(), i + 1))
        .collect()
}

/// Save a linear-light `[3,H,W]` tensor as an 8-bit PNG (gamma 2.2 encode).
pub fn save_scene_png(path: &Path, img: &Tensor) -> Result<(), RecordError> {
    if img.shape.len() != 3 || img.shape[0] != 3 {
        return Err(RecordError::BadShape);
    }
    let (h, w) = (img.shape[1], img.shape[2]);
    let hw = h * w;
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                let v = img.data[c * hw + y * w + x].clamp(0.0, 1.0);
                (v.powf(1.0 / 2.2) * 255.0).round() as u8
            });
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out.save(path)?;
    Ok(())
}

/// Save a `[3,H,W]` tensor that is already display-encoded (no transfer
/// curve applied; values clamped to [0,1] and quantized to 8 bits).
pub fn save_display_png(path: &Path, img: &Tensor) -> Result<(), RecordError> {
    if img.shape.len() != 3 || img.shape[0] != 3 {
        return Err(RecordError::BadShape);
    }
    let (h, w) = (img.shape[1], img.shape[2]);
    let hw = h * w;
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                (img.data[c * hw + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
            });
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out.save(path)?;
    Ok(())
}

/// Load a PNG as a display-encoded `[3,H,W]` tensor (values in [0,1], no
/// transfer curve applied).
pub fn load_display_png(path: &Path) -> Result<Tensor, RecordError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[c * hw + y * w + x] = px[c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor { shape: vec![3, h, w], data })
}

/// Load a PNG back to a linear-light `[3,H,W]` tensor (gamma 2.2 decode).
pub fn load_scene_png(path: &Path) -> Result<Tensor, RecordError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[c * hw + y * w + x] = (px[c] as f64 / 255.0).powf(2.2);
            }
        }
    }
    Ok(Tensor { shape: vec![3, h, w], data })
}
