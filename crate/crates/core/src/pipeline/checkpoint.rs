use std::fs;
use std::path::Path;

use super::GtTally;
use crate::error::{Error, Result};
use crate::instance::InstanceRegistry;
use crate::voxel_map::{read_snapshot, write_snapshot, VoxelMap};

const MAP_FILE: &str = "map.vmap";
const REGISTRY_FILE: &str = "registry.txt";
const GT_FILE: &str = "gt.txt";
const STATE_FILE: &str = "state.txt";

/// Everything needed to continue a run: the map (with super-voxel
/// assignments), the instance registry, the ground-truth tally and the next
/// frame index. The state file is written last and marks a complete
/// checkpoint.
pub struct Checkpoint {
    pub map: VoxelMap,
    pub registry: InstanceRegistry,
    pub gt: GtTally,
    pub next_frame: usize,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn write(
        dir: &Path,
        map: &VoxelMap,
        registry: &InstanceRegistry,
        gt: &GtTally,
        next_frame: usize,
    ) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let state = dir.join(STATE_FILE);
        if state.exists() {
            fs::remove_file(&state).map_err(|e| Error::io(&state, e))?;
        }
        write_snapshot(map, &dir.join(MAP_FILE))?;
        write_text(&dir.join(REGISTRY_FILE), &registry.dump())?;
        let mut s = String::new();
        for (v, list) in gt.votes.iter().enumerate() {
            for &(l, i, c) in list {
                s += &format!("{v} {l} {i} {c}\n");
            }
        }
        write_text(&dir.join(GT_FILE), &s)?;
        write_text(&state, &format!("next_frame {next_frame}\n"))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let state_path = dir.join(STATE_FILE);
        let state = read_text(&state_path)?;
        let next_frame = state
            .trim()
            .strip_prefix("next_frame ")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::format("checkpoint state", "expected `next_frame N`"))?;
        let map = read_snapshot(&dir.join(MAP_FILE))?;
        let registry = InstanceRegistry::parse(&read_text(&dir.join(REGISTRY_FILE))?)?;
        let mut gt = GtTally::default();
        for (n, line) in read_text(&dir.join(GT_FILE))?.lines().enumerate() {
            let f: Vec<u32> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format("checkpoint tally", format!("line {}: {e}", n + 1)))?;
            let [v, l, i, c] = f[..] else {
                return Err(Error::format(
                    "checkpoint tally",
                    format!("line {}: expected 4 fields", n + 1),
                ));
            };
            if v as usize >= map.len() || l > u32::from(u16::MAX) || i > u32::from(u16::MAX) {
                return Err(Error::format(
                    "checkpoint tally",
                    format!("line {}: out of range", n + 1),
                ));
            }
            for _ in 0..c {
                gt.vote(v, l as u16, i as u16);
            }
        }
        Ok(Checkpoint {
            map,
            registry,
            gt,
            next_frame,
        })
    }
}
