//! On-disk formats: tensors, adapter containers, worlds, experiment configs,
//! run logs and CSV exports.
//!
//! Tensor file: `b"LRT1"`, rows as u32 LE, cols as u32 LE, then rows·cols
//! f32 LE values in row-major order. Values are narrowed from `f64` with
//! round-to-nearest-even on write and widened exactly on read.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::lowrank::{Adapter, AdapterRepository, LowRankError, LowRankPair, Matrix};
use crate::oracle::{OracleError, ValidationSet};
use crate::pipeline::{MergeSolution, StageConfig};
use crate::synth::{Relevance, SynthSpec, SynthWorld};

pub const TENSOR_MAGIC: &[u8; 4] = b"LRT1";
const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected \"LRT1\"")]
    BadMagic { path: PathBuf, found: Vec<u8> },
    #[error("{path}: truncated ({len} bytes)")]
    Truncated { path: PathBuf, len: usize },
    #[error("{path}: header declares {expected} values but payload holds {found}")]
    SizeMismatch { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: manifest declares {manifest:?} but tensor is {tensor:?}")]
    ShapeMismatch { path: PathBuf, manifest: (usize, usize), tensor: (usize, usize) },
    #[error("{path}: invalid manifest: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    LowRank(#[from] LowRankError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

pub type Result<T> = std::result::Result<T, IoError>;

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(fs_err(parent))?;
    }
    fs::write(path, bytes).map_err(fs_err(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(fs_err(path))
}

pub fn encode_tensor(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.data().len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(IoError::Truncated { path: path.to_path_buf(), len: bytes.len() });
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(IoError::BadMagic { path: path.to_path_buf(), found: bytes[..4].to_vec() });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(4), word(8));
    let payload = &bytes[HEADER_LEN..];
    if !payload.len().is_multiple_of(4) {
        return Err(IoError::Truncated { path: path.to_path_buf(), len: bytes.len() });
    }
    let expected = rows * cols;
    if payload.len() / 4 != expected {
        return Err(IoError::SizeMismatch { path: path.to_path_buf(), expected, found: payload.len() / 4 });
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Matrix::new(rows, cols, data).map_err(|e| IoError::Format { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn write_tensor(path: &Path, m: &Matrix) -> Result<()> {
    write_file(path, &encode_tensor(m))
}

pub fn read_tensor(path: &Path) -> Result<Matrix> {
    decode_tensor(&read_file(path)?, path)
}

fn read_tensor_shaped(path: &Path, shape: (usize, usize)) -> Result<Matrix> {
    let m = read_tensor(path)?;
    if m.shape() != shape {
        return Err(IoError::ShapeMismatch { path: path.to_path_buf(), manifest: shape, tensor: m.shape() });
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub d: usize,
    pub k: usize,
    pub a_file: String,
    pub b_file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub rank: usize,
    pub layers: Vec<LayerEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn to_json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable");
    out.push(b'\n');
    out
}

/// Writes `adapter` as a container directory: `manifest.json` plus one tensor
/// file per factor.
pub fn write_adapter(dir: &Path, name: &str, adapter: &Adapter) -> Result<()> {
    let rank = adapter
        .values()
        .next()
        .map(LowRankPair::rank)
        .ok_or_else(|| IoError::Manifest { path: dir.to_path_buf(), reason: "adapter has no layers".into() })?;
    let mut layers = Vec::with_capacity(adapter.len());
    for (layer, pair) in adapter {
        if pair.rank() != rank {
            return Err(IoError::Manifest {
                path: dir.to_path_buf(),
                reason: format!("layer {layer} has rank {}", pair.rank()),
            });
        }
        let entry = LayerEntry {
            name: layer.clone(),
            d: pair.d(),
            k: pair.k(),
            a_file: format!("{layer}.a.lrt"),
            b_file: format!("{layer}.b.lrt"),
        };
        write_tensor(&dir.join(&entry.a_file), pair.a())?;
        write_tensor(&dir.join(&entry.b_file), pair.b())?;
        layers.push(entry);
    }
    let manifest = Manifest { name: name.to_string(), rank, layers };
    write_file(&dir.join(MANIFEST_FILE), &to_json_pretty(&manifest))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = read_file(&path)?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| IoError::Manifest { path: path.clone(), reason: e.to_string() })?;
    if manifest.rank == 0 || manifest.layers.is_empty() {
        return Err(IoError::Manifest { path, reason: "rank and layer list must be non-empty".into() });
    }
    for entry in &manifest.layers {
        let escapes = |f: &str| f.contains('/') || f.contains('\\') || f == ".." || f.is_empty();
        if escapes(&entry.a_file) || escapes(&entry.b_file) {
            return Err(IoError::Manifest {
                path,
                reason: format!("layer {} names a file outside the container", entry.name),
            });
        }
    }
    Ok(manifest)
}

pub fn read_adapter(dir: &Path) -> Result<Adapter> {
    let manifest = read_manifest(dir)?;
    let mut adapter = Adapter::new();
    for entry in &manifest.layers {
        let a = read_tensor_shaped(&dir.join(&entry.a_file), (manifest.rank, entry.k))?;
        let b = read_tensor_shaped(&dir.join(&entry.b_file), (entry.d, manifest.rank))?;
        if adapter.insert(entry.name.clone(), LowRankPair::new(a, b)?).is_some() {
            return Err(IoError::Manifest {
                path: dir.join(MANIFEST_FILE),
                reason: format!("duplicate layer {}", entry.name),
            });
        }
    }
    Ok(adapter)
}

/// Writes each adapter to `dir/NNN/`.
pub fn write_repository(dir: &Path, repo: &AdapterRepository) -> Result<()> {
    for (i, adapter) in repo.adapters().iter().enumerate() {
        write_adapter(&dir.join(format!("{i:03}")), &format!("adapter-{i:03}"), adapter)?;
    }
    Ok(())
}

/// Reads every container subdirectory of `dir`, in name order.
pub fn read_repository(dir: &Path) -> Result<AdapterRepository> {
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(fs_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(IoError::Format { path: dir.to_path_buf(), reason: "no adapter containers found".into() });
    }
    let adapters = subdirs.iter().map(|d| read_adapter(d)).collect::<Result<Vec<_>>>()?;
    Ok(AdapterRepository::new(adapters)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WorldRecord {
    spec: SynthSpec,
    relevance: Vec<Relevance>,
    teacher_loss: f64,
    labels: Vec<usize>,
}

pub const WORLD_FILE: &str = "world.json";

/// Materialises a world as a directory tree.
pub fn write_world(dir: &Path, world: &SynthWorld) -> Result<()> {
    for (layer, w) in &world.base {
        write_tensor(&dir.join("base").join(format!("{layer}.lrt")), w)?;
    }
    write_adapter(&dir.join("target"), "target", &world.target)?;
    write_repository(&dir.join("adapters"), &world.repo)?;
    write_tensor(&dir.join("val_inputs.lrt"), world.val.inputs())?;
    let record = WorldRecord {
        spec: world.spec.clone(),
        relevance: world.relevance.clone(),
        teacher_loss: world.teacher_loss,
        labels: world.val.labels().to_vec(),
    };
    write_file(&dir.join(WORLD_FILE), &to_json_pretty(&record))
}

pub fn read_world(dir: &Path) -> Result<SynthWorld> {
    let path = dir.join(WORLD_FILE);
    let record: WorldRecord = serde_json::from_slice(&read_file(&path)?)
        .map_err(|e| IoError::Format { path: path.clone(), reason: e.to_string() })?;
    let spec = record.spec;
    let mut base = std::collections::BTreeMap::new();
    for layer in spec.layer_names() {
        let m = read_tensor_shaped(&dir.join("base").join(format!("{layer}.lrt")), (spec.class_count, spec.input_dim))?;
        base.insert(layer, m);
    }
    let target = read_adapter(&dir.join("target"))?;
    let repo = read_repository(&dir.join("adapters"))?;
    if repo.len() != record.relevance.len() {
        return Err(IoError::Format { path, reason: "relevance labels do not match the adapter count".into() });
    }
    let inputs = read_tensor_shaped(&dir.join("val_inputs.lrt"), (spec.n_val, spec.input_dim))?;
    let val = ValidationSet::new(inputs, record.labels, spec.class_count)?;
    Ok(SynthWorld { spec, base, target, repo, relevance: record.relevance, val, teacher_loss: record.teacher_loss })
}

/// Where the fitness oracle lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum OracleMode {
    #[default]
    Local,
    Remote {
        endpoint: String,
    },
}

/// Stage settings as written in a config file; absent fields fall back to
/// the stage's preset.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageOverrides {
    lambda_reg: Option<f64>,
    generations: Option<usize>,
    population: Option<usize>,
    sigma0: Option<f64>,
    beta_bound: Option<f64>,
    seed: Option<u64>,
    #[serde(default)]
    pinned: std::collections::BTreeMap<usize, f64>,
}

impl StageOverrides {
    fn over(self, preset: StageConfig) -> StageConfig {
        StageConfig {
            lambda_reg: self.lambda_reg.unwrap_or(preset.lambda_reg),
            generations: self.generations.unwrap_or(preset.generations),
            population: self.population.unwrap_or(preset.population),
            sigma0: self.sigma0.unwrap_or(preset.sigma0),
            beta_bound: self.beta_bound.unwrap_or(preset.beta_bound),
            seed: self.seed.unwrap_or(preset.seed),
            pinned: if self.pinned.is_empty() { preset.pinned } else { self.pinned },
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperimentConfig {
    #[serde(default)]
    seed: u64,
    synth: Option<SynthSpec>,
    repository: Option<PathBuf>,
    #[serde(default)]
    stage1: StageOverrides,
    #[serde(default)]
    stage2: StageOverrides,
    #[serde(default)]
    oracle: OracleMode,
    out_dir: Option<PathBuf>,
}

impl From<RawExperimentConfig> for ExperimentConfig {
    fn from(raw: RawExperimentConfig) -> Self {
        Self {
            seed: raw.seed,
            synth: raw.synth,
            repository: raw.repository,
            stage1: raw.stage1.over(StageConfig::stage1(0)),
            stage2: raw.stage2.over(StageConfig::stage2_large_pool(0)),
            oracle: raw.oracle,
            out_dir: raw.out_dir,
        }
    }
}

/// A full experiment. `seed` is the master seed: the world and both stage
/// seeds are derived from it. Stage 1 defaults to 20 generations, stage 2 to
/// the 40-generation large-pool budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawExperimentConfig")]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    /// A world directory written by `gen`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repository: Option<PathBuf>,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub oracle: OracleMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: Some(SynthSpec::default()),
            repository: None,
            stage1: StageConfig::stage1(0),
            stage2: StageConfig::stage2_large_pool(0),
            oracle: OracleMode::Local,
            out_dir: None,
        }
    }
}

/// SplitMix64 step, used to derive independent sub-seeds from one seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
            IoError::Config(match line {
                Some(l) => format!("line {l}: {}", e.message().trim()),
                None => e.message().trim().to_string(),
            })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(fs_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.synth, &self.repository) {
            (Some(_), Some(_)) => Err(IoError::Config("set either synth or repository, not both".into())),
            (None, None) => Err(IoError::Config("one of synth or repository is required".into())),
            _ => Ok(()),
        }
    }

    /// Applies a seed override and propagates the master seed to the world
    /// and both stages.
    pub fn resolved(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(spec) = &mut self.synth {
            spec.seed = self.seed;
        }
        self.stage1.seed = derive_seed(self.seed, 1);
        self.stage2.seed = derive_seed(self.seed, 2);
        self
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("serializable record");
        out.push(b'\n');
    }
    write_file(path, &out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(fs_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| IoError::Format { path: path.to_path_buf(), reason: format!("line {}: {e}", i + 1) })
        })
        .collect()
}

/// The decision vectors and scores of a finished merge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub alphas_star: Vec<f64>,
    pub betas_star: Vec<f64>,
    pub best_fitness_stage1: f64,
    pub best_fitness_stage2: f64,
    pub best_loss_stage2: f64,
}

impl From<&MergeSolution> for SolutionRecord {
    fn from(s: &MergeSolution) -> Self {
        Self {
            alphas_star: s.alphas_star.as_slice().to_vec(),
            betas_star: s.betas_star.as_slice().to_vec(),
            best_fitness_stage1: s.best_fitness_stage1,
            best_fitness_stage2: s.best_fitness_stage2,
            best_loss_stage2: s.best_loss_stage2,
        }
    }
}

pub const SOLUTION_FILE: &str = "solution.json";
pub const RUN_LOG_FILE: &str = "run_log.jsonl";
pub const EVALUATIONS_FILE: &str = "evaluations.jsonl";
pub const MERGED_DIR: &str = "merged";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

/// Writes a merge result: solution record, generation log, evaluation log,
/// merged adapter container and the resolved config.
pub fn write_merge_output(dir: &Path, config: &ExperimentConfig, solution: &MergeSolution) -> Result<()> {
    write_file(&dir.join(SOLUTION_FILE), &to_json_pretty(&SolutionRecord::from(solution)))?;
    write_jsonl(&dir.join(RUN_LOG_FILE), &solution.history)?;
    write_jsonl(&dir.join(EVALUATIONS_FILE), &solution.evaluations)?;
    write_adapter(&dir.join(MERGED_DIR), "merged", &solution.merged)?;
    write_file(&dir.join(CONFIG_ECHO_FILE), config.to_toml().as_bytes())
}

pub fn read_solution(dir: &Path) -> Result<SolutionRecord> {
    let path = dir.join(SOLUTION_FILE);
    serde_json::from_slice(&read_file(&path)?).map_err(|e| IoError::Format { path, reason: e.to_string() })
}

/// Writes a CSV file with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{}", header.join(",")).expect("vec write");
    for row in rows {
        writeln!(out, "{}", row.join(",")).expect("vec write");
    }
    write_file(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_world;

    #[test]
    fn float_encoding_is_little_endian_f32() {
        let m = Matrix::new(1, 2, vec![1.5, -2.0]).unwrap();
        let bytes = encode_tensor(&m);
        assert_eq!(&bytes[..4], b"LRT1");
        assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[0x00, 0x00, 0xC0, 0x3F]);
        assert_eq!(&bytes[16..20], &[0x00, 0x00, 0x00, 0xC0]);
    }

    #[test]
    fn narrowing_rounds_to_nearest_even() {
        // 1 + 2^-24 is exactly halfway between 1 and the next f32; ties go to even (1.0).
        let m = Matrix::new(1, 1, vec![1.0 + 2f64.powi(-24)]).unwrap();
        let back = decode_tensor(&encode_tensor(&m), Path::new("x")).unwrap();
        assert_eq!(back.data()[0], 1.0);
    }

    #[test]
    fn tensor_errors_are_distinct() {
        let p = Path::new("t.lrt");
        assert!(matches!(decode_tensor(b"LRT1\x01", p), Err(IoError::Truncated { .. })));
        assert!(matches!(decode_tensor(b"XXXX\x01\0\0\0\x01\0\0\0\0\0\0\0", p), Err(IoError::BadMagic { .. })));
        let mut bytes = encode_tensor(&Matrix::zeros(8, 4));
        bytes.truncate(HEADER_LEN + 28 * 4);
        assert!(matches!(decode_tensor(&bytes, p), Err(IoError::SizeMismatch { expected: 32, found: 28, .. })));
        bytes.push(0);
        assert!(matches!(decode_tensor(&bytes, p), Err(IoError::Truncated { .. })));
    }

    #[test]
    fn config_requires_exactly_one_source() {
        assert!(ExperimentConfig::from_toml("seed = 1\n[synth]\n").is_ok());
        assert!(matches!(ExperimentConfig::from_toml("seed = 1\n"), Err(IoError::Config(_))));
        assert!(ExperimentConfig::from_toml("repository = \"w\"\n[synth]\n").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1\n[synth]\n").is_err());
    }

    #[test]
    fn config_parses_stages_and_oracle() {
        let text = r#"
seed = 7
[synth]
n_adapters = 6
n_relevant = 2
[stage1]
generations = 3
[stage2]
lambda_reg = 0.1
[oracle]
mode = "remote"
endpoint = "http://127.0.0.1:9000"
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap().resolved(None);
        assert_eq!(cfg.synth.as_ref().unwrap().n_adapters, 6);
        assert_eq!(cfg.synth.as_ref().unwrap().seed, 7);
        assert_eq!(cfg.stage1.generations, 3);
        assert_eq!(cfg.stage1.population, 20);
        assert_eq!(cfg.stage2.generations, 40);
        assert_eq!(cfg.stage2.lambda_reg, 0.1);
        assert_eq!(cfg.oracle, OracleMode::Remote { endpoint: "http://127.0.0.1:9000".into() });
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn world_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { n_adapters: 4, n_relevant: 2, n_val: 20, layers: 2, seed: 5, ..SynthSpec::default() };
        let world = generate_world(&spec).unwrap();
        write_world(dir.path(), &world).unwrap();
        assert_eq!(read_world(dir.path()).unwrap(), world);
    }
}
