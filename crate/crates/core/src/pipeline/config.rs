use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::crf::{CrfWeights, RelationForm};
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::supervoxel::ClusterParams;
use crate::voxel_map::MapParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Semantic,
    SemanticInstance,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "semantic" => Ok(Mode::Semantic),
            "semantic+instance" | "instance" => Ok(Mode::SemanticInstance),
            _ => Err(format!("unknown mode `{s}` (semantic | semantic+instance)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Sequence directory or manifest, or a scene file rendered in memory.
    pub sequence: PathBuf,
    pub out_dir: PathBuf,
    pub scene_name: String,
    pub method: String,
    pub mode: Mode,
    /// Seed for scene files rendered in memory; overrides the file's seed.
    pub seed: Option<u64>,
    /// Worker threads, 0 for the rayon default.
    pub threads: usize,
    /// Process at most this many frames.
    pub max_frames: Option<usize>,
    pub map: MapParams,
    pub cluster: ClusterParams,
    pub proposal_k: f64,
    pub proposal_min_size: usize,
    /// Off: labels come straight from fusion.
    pub crf_enabled: bool,
    pub weights: CrfWeights,
    pub enable_pair: bool,
    pub enable_obj: bool,
    pub enable_cons: bool,
    pub enable_rel: bool,
    pub tau: f64,
    pub crf_iterations: usize,
    /// Pairwise radius as a multiple of the seed spacing.
    pub pair_radius: f64,
    pub cooccurrence: Option<PathBuf>,
    /// Prediction stride; `None` uses the sequence's.
    pub prediction_stride: Option<usize>,
    pub offline_iterations: usize,
    pub mesh_cap: usize,
    pub min_spawn: usize,
    pub checkpoint_every: Option<usize>,
    pub write_cloud: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sequence: PathBuf::new(),
            out_dir: PathBuf::from("out"),
            scene_name: "scene".into(),
            method: "crf".into(),
            mode: Mode::Semantic,
            seed: None,
            threads: 0,
            max_frames: None,
            map: MapParams::default(),
            cluster: ClusterParams::default(),
            proposal_k: 0.5,
            proposal_min_size: 3,
            crf_enabled: true,
            weights: CrfWeights::default(),
            enable_pair: true,
            enable_obj: true,
            enable_cons: true,
            enable_rel: true,
            tau: 0.5,
            crf_iterations: 1,
            pair_radius: 2.0,
            cooccurrence: None,
            prediction_stride: None,
            offline_iterations: 10,
            mesh_cap: 200_000,
            min_spawn: 5,
            checkpoint_every: None,
            write_cloud: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::invalid("config", format!("`{key} = {value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::invalid(
            "config",
            format!("`{key} = {value}`: expected a boolean"),
        )),
    }
}

impl PipelineConfig {
    /// Reads a config file; relative paths resolve against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let kv = KvFile::read(path)?;
        let mut cfg = PipelineConfig::default();
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &kv.entries {
            cfg.set(&e.key, &e.value)
                .map_err(|err| kv.error(Some(e), err.to_string()))?;
        }
        for p in [&mut cfg.sequence, &mut cfg.out_dir] {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
        if let Some(c) = &mut cfg.cooccurrence {
            if c.is_relative() {
                *c = base.join(&*c);
            }
        }
        Ok(cfg)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "sequence" => self.sequence = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "scene_name" => self.scene_name = value.to_string(),
            "method" => self.method = value.to_string(),
            "mode" => self.mode = parse(key, value)?,
            "seed" => self.seed = Some(parse(key, value)?),
            "threads" => self.threads = parse(key, value)?,
            "max_frames" => self.max_frames = Some(parse(key, value)?),
            "map.voxel_size" => self.map.voxel_size = parse(key, value)?,
            "map.truncation" => self.map.truncation = parse(key, value)?,
            "map.weight_cap" => self.map.weight_cap = parse(key, value)?,
            "map.objectness_step" => self.map.objectness_step = parse(key, value)?,
            "map.objectness_init" => self.map.objectness_init = parse(key, value)?,
            "cluster.spacing" => {
                let s: f64 = parse(key, value)?;
                self.cluster.spacing = s;
                self.cluster.spatial_norm = s * s;
            }
            "cluster.alpha" => self.cluster.alpha = parse(key, value)?,
            "cluster.beta" => self.cluster.beta = parse(key, value)?,
            "cluster.color_norm" => self.cluster.color_norm = parse(key, value)?,
            "proposal.k" => self.proposal_k = parse(key, value)?,
            "proposal.min_size" => self.proposal_min_size = parse(key, value)?,
            "crf.enabled" => self.crf_enabled = parse_bool(key, value)?,
            "crf.w_unary" => self.weights.unary = parse(key, value)?,
            "crf.w_pair" => self.weights.pair = parse(key, value)?,
            "crf.w_obj" => self.weights.obj = parse(key, value)?,
            "crf.w_cons" => self.weights.cons = parse(key, value)?,
            "crf.w_rel" => self.weights.rel = parse(key, value)?,
            "crf.theta_alpha" => self.weights.theta_alpha = parse(key, value)?,
            "crf.theta_beta" => self.weights.theta_beta = parse(key, value)?,
            "crf.relation" => {
                self.weights.relation = match value {
                    "coupled" => RelationForm::Coupled,
                    "separable" => RelationForm::Separable,
                    _ => return Err(Error::invalid("config", format!("`{key}`: coupled | separable"))),
                }
            }
            "crf.enable_pair" => self.enable_pair = parse_bool(key, value)?,
            "crf.enable_obj" => self.enable_obj = parse_bool(key, value)?,
            "crf.enable_cons" => self.enable_cons = parse_bool(key, value)?,
            "crf.enable_rel" => self.enable_rel = parse_bool(key, value)?,
            "crf.tau" => self.tau = parse(key, value)?,
            "crf.iterations" => self.crf_iterations = parse(key, value)?,
            "crf.pair_radius" => self.pair_radius = parse(key, value)?,
            "crf.cooccurrence" => self.cooccurrence = Some(PathBuf::from(value)),
            "crf.offline_iterations" => self.offline_iterations = parse(key, value)?,
            "crf.mesh_cap" => self.mesh_cap = parse(key, value)?,
            "pipeline.prediction_stride" => self.prediction_stride = Some(parse(key, value)?),
            "instance.min_spawn" => self.min_spawn = parse(key, value)?,
            "checkpoint.every" => self.checkpoint_every = Some(parse(key, value)?),
            "output.cloud" => self.write_cloud = parse_bool(key, value)?,
            _ => return Err(Error::invalid("config", format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::invalid("config override", format!("expected key=value, got `{o}`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::invalid("config", "crf.tau must lie in [0, 1]"));
        }
        if self.crf_iterations == 0 || self.offline_iterations == 0 {
            return Err(Error::invalid("config", "CRF iteration counts must be >= 1"));
        }
        if self.prediction_stride == Some(0) {
            return Err(Error::invalid("config", "prediction stride must be >= 1"));
        }
        if !(self.proposal_k > 0.0) {
            return Err(Error::invalid("config", "proposal.k must be positive"));
        }
        if !(self.map.voxel_size > 0.0 && self.map.truncation > 0.0) {
            return Err(Error::invalid("config", "voxel size and truncation must be positive"));
        }
        if !(self.pair_radius >= 0.0) {
            return Err(Error::invalid("config", "crf.pair_radius must be non-negative"));
        }
        self.cluster.validate()?;
        self.weights.validate()
    }

    /// CRF weights after the ablation switches.
    pub fn effective_weights(&self) -> CrfWeights {
        let mut w = self.weights;
        if !self.enable_pair {
            w.pair = 0.0;
        }
        if !self.enable_obj {
            w.obj = 0.0;
        }
        if !self.enable_cons {
            w.cons = 0.0;
        }
        if !self.enable_rel {
            w.rel = 0.0;
        }
        w
    }
}
