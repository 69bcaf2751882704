//! Annotated grayscale sequences and their on-disk layout.
//!
//! A sequence directory holds binary PGM (P5) frames named `000001.pgm`,
//! `000002.pgm`, ..., a `groundtruth.txt` with one `x,y,w,h` line per
//! frame (decimal fractions allowed), and an optional `meta.json`
//! recording how the sequence was generated.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit grayscale frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Axis-aligned box, top-left origin, pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    /// Intersect with the frame rectangle [0,w) x [0,h).
    pub fn clip(&self, frame_w: usize, frame_h: usize) -> Self {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(frame_w as f64);
        let y1 = (self.y + self.h).min(frame_h as f64);
        Self {
            x: x0,
            y: y0,
            w: (x1 - x0).max(0.0),
            h: (y1 - y0).max(0.0),
        }
    }
}

/// Generation provenance stored next to the frames.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SequenceMeta {
    pub seed: u64,
    pub config: serde_json::Value,
}

/// Ordered frames with one annotated box per frame for the primary object.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSequence {
    pub name: String,
    pub class_tag: String,
    pub frames: Vec<Frame>,
    pub boxes: Vec<BoundingBox>,
    pub meta: Option<SequenceMeta>,
}

impl AnnotatedSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

// ---------------------------------------------------------------- PGM I/O

pub fn write_pgm(frame: &Frame, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", frame.width, frame.height)?;
    f.write_all(&frame.data)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Frame> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?
        .read_to_end(&mut bytes)?;
    let malformed = |detail: &str| Error::Malformed {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    // Header: magic, width, height, maxval as whitespace-separated tokens.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P5" {
        return Err(malformed("not a binary PGM (P5)"));
    }
    let width: usize = token(&bytes)?.parse().map_err(|_| malformed("bad width"))?;
    let height: usize = token(&bytes)?.parse().map_err(|_| malformed("bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| malformed("bad maxval"))?;
    if maxval != 255 {
        return Err(malformed("only 8-bit depth supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(malformed(&format!(
            "pixel payload truncated: need {} bytes, have {}",
            need,
            bytes.len().saturating_sub(pos)
        )));
    }
    Ok(Frame {
        width,
        height,
        data: bytes[pos..pos + need].to_vec(),
    })
}

// ------------------------------------------------------------ annotations

fn parse_box_line(line: &str, path: &Path, lineno: usize) -> Result<BoundingBox> {
    let parts: Vec<&str> = line.trim().split(',').collect();
    let malformed = |detail: String| Error::Malformed {
        path: path.display().to_string(),
        detail,
    };
    if parts.len() != 4 {
        return Err(malformed(format!(
            "line {}: expected x,y,w,h got {:?}",
            lineno, line
        )));
    }
    let mut vals = [0.0f64; 4];
    for (i, p) in parts.iter().enumerate() {
        vals[i] = p
            .trim()
            .parse()
            .map_err(|_| malformed(format!("line {}: bad number {:?}", lineno, p)))?;
    }
    Ok(BoundingBox::new(vals[0], vals[1], vals[2], vals[3]))
}

/// Write frames, groundtruth.txt, and meta.json (when present).
pub fn write_sequence(seq: &AnnotatedSequence, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, frame) in seq.frames.iter().enumerate() {
        write_pgm(frame, &dir.join(format!("{:06}.pgm", i + 1)))?;
    }
    let mut gt = String::new();
    for b in &seq.boxes {
        gt.push_str(&format!("{},{},{},{}\n", b.x, b.y, b.w, b.h));
    }
    std::fs::write(dir.join("groundtruth.txt"), gt)?;
    let info = serde_json::json!({ "class": seq.class_tag });
    match &seq.meta {
        Some(m) => {
            let mut v = serde_json::to_value(m)?;
            v["class"] = info["class"].clone();
            std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&v)?)?;
        }
        None => std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&info)?)?,
    }
    Ok(())
}

/// Read a sequence directory written by [`write_sequence`].
pub fn read_sequence(dir: &Path) -> Result<AnnotatedSequence> {
    let gt_path = dir.join("groundtruth.txt");
    if !gt_path.exists() {
        return Err(Error::MissingFile(gt_path.display().to_string()));
    }
    let gt = std::fs::read_to_string(&gt_path)?;
    let mut boxes = Vec::new();
    for (i, line) in gt.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        boxes.push(parse_box_line(line, &gt_path, i + 1)?);
    }
    let mut frames = Vec::with_capacity(boxes.len());
    for i in 0..boxes.len() {
        let fp = dir.join(format!("{:06}.pgm", i + 1));
        frames.push(read_pgm(&fp).map_err(|e| match e {
            Error::Malformed { path, detail } => Error::Malformed {
                path,
                detail: format!("frame {}: {}", i + 1, detail),
            },
            other => other,
        })?);
    }
    let (class_tag, meta) = match std::fs::read_to_string(dir.join("meta.json")) {
        Ok(text) => {
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Malformed {
                path: dir.join("meta.json").display().to_string(),
                detail: e.to_string(),
            })?;
            let class = v["class"].as_str().unwrap_or("object").to_string();
            let meta = serde_json::from_value::<SequenceMeta>(v.clone()).ok();
            (class, meta)
        }
        Err(_) => ("object".to_string(), None),
    };
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".to_string());
    Ok(AnnotatedSequence {
        name,
        class_tag,
        frames,
        boxes,
        meta,
    })
}

/// All sequence subdirectories of `dir`, sorted by name.
pub fn read_dataset(dir: &Path) -> Result<Vec<AnnotatedSequence>> {
    if !dir.exists() {
        return Err(Error::MissingFile(dir.display().to_string()));
    }
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir() && e.path().join("groundtruth.txt").exists())
        .map(|e| e.path())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::MissingFile(format!(
            "{} contains no sequence directories",
            dir.display()
        )));
    }
    names.iter().map(|p| read_sequence(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_sequence() -> AnnotatedSequence {
        let frames: Vec<Frame> = (0..3)
            .map(|k| Frame {
                width: 8,
                height: 6,
                data: (0..48).map(|i| ((i * 5 + k * 11) % 256) as u8).collect(),
            })
            .collect();
        let boxes = vec![
            BoundingBox::new(1.0, 1.0, 3.0, 2.0),
            BoundingBox::new(1.5, 1.25, 3.0, 2.0),
            BoundingBox::new(2.0, 1.5, 3.0, 2.0),
        ];
        AnnotatedSequence {
            name: "demo".into(),
            class_tag: "blob".into(),
            frames,
            boxes,
            meta: Some(SequenceMeta {
                seed: 9,
                config: serde_json::json!({"frames": 3}),
            }),
        }
    }

    #[test]
    fn write_read_round_trip() {
        let dir = std::env::temp_dir().join("tirsiam_seq_rt");
        std::fs::remove_dir_all(&dir).ok();
        let seq = demo_sequence();
        write_sequence(&seq, &dir).unwrap();
        let back = read_sequence(&dir).unwrap();
        assert_eq!(back.frames, seq.frames);
        assert_eq!(back.boxes, seq.boxes);
        assert_eq!(back.class_tag, seq.class_tag);
        assert_eq!(back.meta, seq.meta);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn fractional_annotation_parses() {
        let b = parse_box_line("10.5,20,30,40", Path::new("gt.txt"), 1).unwrap();
        assert_eq!(b, BoundingBox::new(10.5, 20.0, 30.0, 40.0));
    }

    #[test]
    fn malformed_annotation_names_line() {
        let err = parse_box_line("1,2,3", Path::new("gt.txt"), 7).unwrap_err();
        match err {
            Error::Malformed { detail, .. } => assert!(detail.contains("line 7"), "{detail}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_frame_names_index() {
        let dir = std::env::temp_dir().join("tirsiam_seq_trunc");
        std::fs::remove_dir_all(&dir).ok();
        let seq = demo_sequence();
        write_sequence(&seq, &dir).unwrap();
        // Chop the second frame's payload.
        let p = dir.join("000002.pgm");
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        let err = read_sequence(&dir).unwrap_err();
        match err {
            Error::Malformed { detail, .. } => {
                assert!(detail.contains("frame 2"), "{detail}");
                assert!(detail.contains("truncated"), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pgm_bytes_are_exact() {
        let dir = std::env::temp_dir().join("tirsiam_pgm_exact");
        std::fs::create_dir_all(&dir).unwrap();
        let frame = Frame {
            width: 4,
            height: 2,
            data: vec![0, 255, 13, 128, 7, 9, 200, 64],
        };
        let p = dir.join("f.pgm");
        write_pgm(&frame, &p).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!(back, frame);
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(&raw[..9], b"P5\n4 2\n25");
        std::fs::remove_dir_all(&dir).ok();
    }
}
