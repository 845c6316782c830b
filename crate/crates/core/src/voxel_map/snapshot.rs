//! Versioned binary map snapshot: a fixed header followed by one flat record
//! per voxel (key, then every voxel field), little-endian.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{MapParams, Voxel, VoxelKey, VoxelMap};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VMAP";
const VERSION: u32 = 1;
const RECORD: usize = 12 + 4 + 2 + 12 + 2 + 4 + 4 + 2 + 4 + 2 + 4 + 1 + 12;

pub fn write_snapshot(map: &VoxelMap, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let p = map.params();
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&p.voxel_size.to_le_bytes());
    head.extend_from_slice(&p.truncation.to_le_bytes());
    head.extend_from_slice(&p.weight_cap.to_le_bytes());
    head.extend_from_slice(&p.surface_band.to_le_bytes());
    head.extend_from_slice(&p.extract_band.to_le_bytes());
    head.extend_from_slice(&p.objectness_init.to_le_bytes());
    head.extend_from_slice(&p.objectness_step.to_le_bytes());
    head.extend_from_slice(&(map.len() as u64).to_le_bytes());
    w.write_all(&head).map_err(io)?;
    let mut rec = Vec::with_capacity(RECORD);
    for (key, v) in map.keys().iter().zip(map.voxels()) {
        rec.clear();
        for c in [key.i, key.j, key.k] {
            rec.extend_from_slice(&c.to_le_bytes());
        }
        rec.extend_from_slice(&v.tsdf.to_le_bytes());
        rec.extend_from_slice(&v.weight.to_le_bytes());
        for c in v.color {
            rec.extend_from_slice(&c.to_le_bytes());
        }
        rec.extend_from_slice(&v.label.to_le_bytes());
        rec.extend_from_slice(&v.label_conf.to_le_bytes());
        rec.extend_from_slice(&v.objectness.to_le_bytes());
        rec.extend_from_slice(&v.instance.to_le_bytes());
        rec.extend_from_slice(&v.instance_conf.to_le_bytes());
        rec.extend_from_slice(&v.segment.to_le_bytes());
        rec.extend_from_slice(&v.cluster.to_le_bytes());
        rec.push(u8::from(v.normal.is_some()));
        for c in v.normal.unwrap_or([0.0; 3]) {
            rec.extend_from_slice(&c.to_le_bytes());
        }
        debug_assert_eq!(rec.len(), RECORD);
        w.write_all(&rec).map_err(io)?;
    }
    w.flush().map_err(io)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.bytes[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        out
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn i32(&mut self) -> i32 {
        i32::from_le_bytes(self.take())
    }
}

pub fn read_snapshot(path: &Path) -> Result<VoxelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path.display().to_string(), msg.to_string());
    const HEAD: usize = 4 + 4 + 8 + 8 + 2 + 4 * 4 + 8;
    if bytes.len() < HEAD || &bytes[..4] != MAGIC {
        return Err(bad("not a map snapshot"));
    }
    let mut c = Cursor { bytes: &bytes, pos: 4 };
    let version = c.u32();
    if version != VERSION {
        return Err(bad(&format!("unsupported snapshot version {version}")));
    }
    let params = MapParams {
        voxel_size: f64::from_le_bytes(c.take()),
        truncation: f64::from_le_bytes(c.take()),
        weight_cap: c.u16(),
        surface_band: c.f32(),
        extract_band: c.f32(),
        objectness_init: c.f32(),
        objectness_step: c.f32(),
    };
    let count = u64::from_le_bytes(c.take()) as usize;
    if bytes.len() != HEAD + count * RECORD {
        return Err(bad("truncated or oversized snapshot"));
    }
    let mut map = VoxelMap::new(params);
    for _ in 0..count {
        let key = VoxelKey::new(c.i32(), c.i32(), c.i32());
        let tsdf = c.f32();
        let weight = c.u16();
        let color = [c.f32(), c.f32(), c.f32()];
        let label = c.u16();
        let label_conf = c.f32();
        let objectness = c.f32();
        let instance = c.u16();
        let instance_conf = c.f32();
        let segment = c.u16();
        let cluster = c.u32();
        let has_normal = c.take::<1>()[0] != 0;
        let n = [c.f32(), c.f32(), c.f32()];
        let voxel = Voxel {
            tsdf,
            weight,
            color,
            label,
            label_conf,
            objectness,
            instance,
            instance_conf,
            segment,
            cluster,
            normal: has_normal.then_some(n),
        };
        if map.id_of(key).is_some() {
            return Err(bad("duplicate voxel key"));
        }
        map.insert_voxel(key, voxel);
    }
    Ok(map)
}
