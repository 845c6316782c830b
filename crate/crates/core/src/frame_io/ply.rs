//! Binary little-endian PLY for labeled surface points.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::Label;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub position: [f32; 3],
    pub color: [u8; 3],
    pub label: Label,
    pub instance: u16,
    pub confidence: f32,
}

/// Bytes per vertex: 3 f32 + 3 u8 + 2 u16 + f32.
pub const PLY_RECORD_SIZE: usize = 23;

const PROPERTIES: [(&str, &str); 9] = [
    ("float", "x"),
    ("float", "y"),
    ("float", "z"),
    ("uchar", "red"),
    ("uchar", "green"),
    ("uchar", "blue"),
    ("ushort", "label"),
    ("ushort", "instance"),
    ("float", "confidence"),
];

pub fn ply_header(count: usize) -> String {
    let mut h = format!("ply\nformat binary_little_endian 1.0\nelement vertex {count}\n");
    for (ty, name) in PROPERTIES {
        h.push_str(&format!("property {ty} {name}\n"));
    }
    h.push_str("end_header\n");
    h
}

pub fn write_labeled_cloud(points: &[LabeledPoint], path: &Path) -> Result<()> {
    if points.is_empty() {
        return Err(Error::invalid("point cloud", "refusing to write an empty cloud"));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(ply_header(points.len()).as_bytes()).map_err(io)?;
    let mut rec = [0u8; PLY_RECORD_SIZE];
    for p in points {
        for (i, c) in p.position.iter().enumerate() {
            rec[i * 4..i * 4 + 4].copy_from_slice(&c.to_le_bytes());
        }
        rec[12..15].copy_from_slice(&p.color);
        rec[15..17].copy_from_slice(&p.label.to_le_bytes());
        rec[17..19].copy_from_slice(&p.instance.to_le_bytes());
        rec[19..23].copy_from_slice(&p.confidence.to_le_bytes());
        w.write_all(&rec).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a cloud written by [`write_labeled_cloud`]. The vertex properties
/// must match that layout exactly.
pub fn read_labeled_cloud(path: &Path) -> Result<Vec<LabeledPoint>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::format(path.display().to_string(), msg);
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| bad("missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("non-utf8 header".into()))?;
    let mut lines = header.lines().filter(|l| !l.starts_with("comment"));
    if lines.next() != Some("ply") {
        return Err(bad("not a PLY file".into()));
    }
    if lines.next() != Some("format binary_little_endian 1.0") {
        return Err(bad("only binary_little_endian 1.0 is supported".into()));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| bad("expected `element vertex N`".into()))?;
    for (ty, name) in PROPERTIES {
        let expected = format!("property {ty} {name}");
        match lines.next() {
            Some(l) if l.trim() == expected => {}
            other => return Err(bad(format!("expected `{expected}`, found {other:?}"))),
        }
    }
    if let Some(extra) = lines.next() {
        return Err(bad(format!("unexpected header line `{extra}`")));
    }
    let body = &bytes[end + END.len()..];
    if body.len() != count * PLY_RECORD_SIZE {
        return Err(bad(format!(
            "expected {} body bytes, found {}",
            count * PLY_RECORD_SIZE,
            body.len()
        )));
    }
    let f32_at = |r: &[u8], o: usize| f32::from_le_bytes([r[o], r[o + 1], r[o + 2], r[o + 3]]);
    Ok(body
        .chunks_exact(PLY_RECORD_SIZE)
        .map(|r| LabeledPoint {
            position: [f32_at(r, 0), f32_at(r, 4), f32_at(r, 8)],
            color: [r[12], r[13], r[14]],
            label: u16::from_le_bytes([r[15], r[16]]),
            instance: u16::from_le_bytes([r[17], r[18]]),
            confidence: f32_at(r, 19),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_point_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.ply");
        let p = LabeledPoint {
            position: [0.0, 0.0, 0.0],
            color: [10, 20, 30],
            label: 3,
            instance: 1,
            confidence: 0.75,
        };
        write_labeled_cloud(&[p], &path).unwrap();
        assert_eq!(read_labeled_cloud(&path).unwrap(), vec![p]);
    }

    #[test]
    fn empty_cloud_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_labeled_cloud(&[], &dir.path().join("e.ply")).is_err());
    }

    #[test]
    fn million_points_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.ply");
        let n = 1_000_000;
        let pts = vec![
            LabeledPoint {
                position: [1.0, 2.0, 3.0],
                color: [1, 2, 3],
                label: 7,
                instance: 0,
                confidence: 1.0,
            };
            n
        ];
        write_labeled_cloud(&pts, &path).unwrap();
        let size = fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(size, ply_header(n).len() + n * PLY_RECORD_SIZE);
    }

    #[test]
    fn unwritable_path_errors() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let p = LabeledPoint {
            position: [0.0; 3],
            color: [0; 3],
            label: 0,
            instance: 0,
            confidence: 0.0,
        };
        assert!(write_labeled_cloud(&[p], &blocker.join("sub/out.ply")).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn roundtrip_is_lossless(pts in prop::collection::vec(
            (prop::array::uniform3(-1e3f32..1e3), prop::array::uniform3(any::<u8>()),
             any::<u16>(), any::<u16>(), 0f32..1e3),
            1..50,
        )) {
            let pts: Vec<LabeledPoint> = pts.into_iter().map(|(position, color, label, instance, confidence)| {
                LabeledPoint { position, color, label, instance, confidence }
            }).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.ply");
            write_labeled_cloud(&pts, &path).unwrap();
            prop_assert_eq!(read_labeled_cloud(&path).unwrap(), pts);
        }
    }
}
