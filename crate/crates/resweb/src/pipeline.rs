//! Config ingestion, staged orchestration and deterministic caching.
//!
//! Stages: web -> cover -> classify -> reduce -> channel -> barrier -> verify.
//! Every stage reads only the config and earlier artifacts, writes its own
//! artifacts into the output directory, and records their checksums in a
//! manifest. Re-running with an unchanged config skips stages whose artifacts
//! still match. Artifacts are byte-deterministic: fixed seeds, ordered maps,
//! and shortest-round-trip float formatting.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::averaged::{
    alpha_beta, embed_channel, overlap_check, scan_channel, ChannelOptions, MechanicalSystem,
    OrbitOptions,
};
use crate::estimates::{verify_deviation, DeviationOptions};
use crate::fourier::FourierSeries3;
use crate::lattice::IVec3;
use crate::model::{ConvexHamiltonian, NearlyIntegrableSystem};
use crate::normalform::{reduce, symmetry_check, NfOptions, NormalForm, TransformChain};
use crate::poly::Poly;
use crate::resonance::{
    candidate_path, classify, dirichlet_cover, trace_circle, ClassifyThresholds, DoubleResonance,
    ResonanceCircle, Strength,
};
use crate::weakkam::{
    argmin_components, barrier, build_kernel, elementary_solutions, lax_oleinik, Cover, Direction,
    ElementaryOptions, Field2D, KernelOptions, SolveOptions, TorusGrid,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("numerical failure in stage {stage}: {message}")]
    Numerical { stage: &'static str, message: String },
    #[error("output directory is locked by another run ({0})")]
    Locked(PathBuf),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 3,
        }
    }

    fn numerical<E: std::fmt::Display>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
        move |e| PipelineError::Numerical { stage, message: e.to_string() }
    }
}

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModeConfig {
    pub k: IVec3,
    pub coeff: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sin: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SystemConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic: Option<[[f64; 3]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polynomial: Option<String>,
    #[serde(default)]
    pub modes: Vec<ModeConfig>,
    pub eps: f64,
    pub energy: f64,
    #[serde(default = "default_smoothness")]
    pub smoothness: u32,
    #[serde(default = "default_domain_radius")]
    pub domain_radius: f64,
}

fn default_smoothness() -> u32 {
    6
}

fn default_domain_radius() -> f64 {
    3.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeometryConfig {
    pub kappa: f64,
    #[serde(default = "default_one")]
    pub k_star: f64,
    #[serde(default = "default_one")]
    pub eta: f64,
    #[serde(default = "default_delta_prime")]
    pub delta_prime: f64,
    #[serde(default = "default_theta")]
    pub theta_classify: f64,
    /// 0 derives xi from the measured deviation constants.
    #[serde(default)]
    pub xi: f64,
}

fn default_one() -> f64 {
    1.0
}
fn default_delta_prime() -> f64 {
    0.25
}
fn default_theta() -> f64 {
    0.25
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TargetsConfig {
    pub p_star: [f64; 3],
    pub p_target: [f64; 3],
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_k_search")]
    pub k_search: i64,
    #[serde(default = "default_g")]
    pub g: [i64; 2],
}

fn default_delta() -> f64 {
    0.2
}
fn default_k_search() -> i64 {
    2
}
fn default_g() -> [i64; 2] {
    [0, 1]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NumericsConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_circle_samples")]
    pub circle_samples: usize,
    #[serde(default = "default_cover_checks")]
    pub cover_checks: usize,
    #[serde(default = "default_orbit_nodes")]
    pub orbit_nodes: usize,
    #[serde(default = "default_multi_starts")]
    pub multi_starts: usize,
    #[serde(default = "default_lambda_range")]
    pub lambda_range: [f64; 2],
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: usize,
    #[serde(default = "default_wk_grid")]
    pub wk_grid: [usize; 2],
    #[serde(default = "default_wk_tau")]
    pub wk_tau: f64,
    #[serde(default = "default_wk_tol")]
    pub wk_tol: f64,
    #[serde(default = "default_wk_iters")]
    pub wk_max_iters: usize,
    #[serde(default = "default_wk_speed")]
    pub wk_speed_bound: f64,
    #[serde(default = "default_flow_steps")]
    pub flow_steps: usize,
    #[serde(default = "default_remainder_eps")]
    pub remainder_eps: Vec<f64>,
    #[serde(default = "default_sites")]
    pub sites: Vec<usize>,
    #[serde(default = "default_barrier_c")]
    pub barrier_c: Vec<[f64; 2]>,
    #[serde(default = "default_dev_omega")]
    pub deviation_omega: [f64; 3],
    #[serde(default = "default_remainder_eps")]
    pub deviation_eps: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_sites: Option<[usize; 2]>,
    #[serde(default = "default_y_cap")]
    pub y_cap: f64,
    #[serde(default = "default_penalty_levels")]
    pub penalty_levels: Vec<f64>,
}

fn default_seed() -> u64 {
    7
}
fn default_circle_samples() -> usize {
    512
}
fn default_cover_checks() -> usize {
    10000
}
fn default_orbit_nodes() -> usize {
    256
}
fn default_multi_starts() -> usize {
    8
}
fn default_lambda_range() -> [f64; 2] {
    [0.5, 2.0]
}
fn default_lambda_grid() -> usize {
    16
}
fn default_wk_grid() -> [usize; 2] {
    [64, 32]
}
fn default_wk_tau() -> f64 {
    0.2
}
fn default_wk_tol() -> f64 {
    1e-9
}
fn default_wk_iters() -> usize {
    4000
}
fn default_wk_speed() -> f64 {
    2.6
}
fn default_flow_steps() -> usize {
    128
}
fn default_remainder_eps() -> Vec<f64> {
    vec![1e-2, 1e-3, 1e-4]
}
fn default_sites() -> Vec<usize> {
    vec![0]
}
fn default_barrier_c() -> Vec<[f64; 2]> {
    vec![[0.0, 0.0]]
}
fn default_dev_omega() -> [f64; 3] {
    [0.63, 1.0, 0.77]
}
fn default_y_cap() -> f64 {
    1.0
}
fn default_penalty_levels() -> Vec<f64> {
    vec![0.4, 0.2]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OutputConfig {
    pub dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub geometry: GeometryConfig,
    pub targets: TargetsConfig,
    #[serde(default = "default_numerics")]
    pub numerics: NumericsConfig,
    pub output: OutputConfig,
}

fn default_numerics() -> NumericsConfig {
    toml::from_str("").expect("all numerics fields have defaults")
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if !(0.0 < self.geometry.kappa && self.geometry.kappa < 1.0 / 6.0) {
            return err(format!("kappa = {} outside (0, 1/6)", self.geometry.kappa));
        }
        if !(0.0 < self.geometry.delta_prime && self.geometry.delta_prime < 0.5) {
            return err(format!(
                "delta_prime = {} outside (0, 1/2)",
                self.geometry.delta_prime
            ));
        }
        if self.system.eps < 0.0 {
            return err("eps must be nonnegative".into());
        }
        if self.system.quadratic.is_none() && self.system.polynomial.is_none() {
            return err("system needs either `quadratic` or `polynomial`".into());
        }
        for (name, v) in [
            ("wk_tol", self.numerics.wk_tol),
            ("wk_tau", self.numerics.wk_tau),
            ("y_cap", self.numerics.y_cap),
        ] {
            if v <= 0.0 {
                return err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Canonical serialization; the config hash and the round-trip contract
    /// are defined on this form.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        hex(&h.finalize())
    }

    pub fn build_system(&self) -> Result<NearlyIntegrableSystem, PipelineError> {
        let h = if let Some(q) = &self.system.quadratic {
            let m = Matrix3::from_fn(|i, j| q[i][j]);
            ConvexHamiltonian::quadratic(m, self.system.domain_radius)
        } else {
            let p = Poly::parse(self.system.polynomial.as_ref().unwrap())
                .map_err(|e| PipelineError::Config(e.to_string()))?;
            ConvexHamiltonian::polynomial(p, self.system.domain_radius)
        };
        let mut pert = FourierSeries3::new();
        for m in &self.system.modes {
            let coeff =
                Poly::parse(&m.coeff).map_err(|e| PipelineError::Config(e.to_string()))?;
            pert.add_cos(m.k, coeff);
            if let Some(s) = &m.sin {
                let sc = Poly::parse(s).map_err(|e| PipelineError::Config(e.to_string()))?;
                pert.add_sin(m.k, sc);
            }
        }
        NearlyIntegrableSystem::new(
            h,
            pert,
            self.system.eps,
            self.system.energy,
            self.system.smoothness,
        )
        .map_err(|e| PipelineError::Config(e.to_string()))
    }

    fn orbit_options(&self) -> OrbitOptions {
        OrbitOptions {
            n_nodes: self.numerics.orbit_nodes,
            n_starts: self.numerics.multi_starts,
            seed: self.numerics.seed,
            ..Default::default()
        }
    }

    fn nf_options(&self) -> NfOptions {
        NfOptions {
            flow_steps: self.numerics.flow_steps,
            y_cap: self.numerics.y_cap,
            ..Default::default()
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Artifact schemas

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircleArtifact {
    pub k: IVec3,
    #[serde(rename = "E")]
    pub energy: f64,
    pub samples: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoubleResonanceArtifact {
    pub p: [f64; 3],
    pub k2: IVec3,
    #[serde(rename = "T")]
    pub period: i64,
    pub radius: f64,
    pub strength: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    /// Index of the circle the point lies on.
    pub circle: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoveringArtifact {
    pub uncovered: Vec<f64>,
    pub max_period: i64,
    pub n_checked: usize,
    pub d_empirical: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WebArtifact {
    pub circles: Vec<CircleArtifact>,
    pub double_resonances: Vec<DoubleResonanceArtifact>,
    pub covering: Option<CoveringArtifact>,
    pub k_star: IVec3,
    pub k_target: IVec3,
}

impl WebArtifact {
    pub fn circle(&self, idx: usize) -> ResonanceCircle {
        let c = &self.circles[idx];
        let samples: Vec<Vector3<f64>> =
            c.samples.iter().map(|s| Vector3::new(s[0], s[1], s[2])).collect();
        let mut cum = vec![0.0];
        for w in samples.windows(2) {
            cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
        }
        ResonanceCircle { k: c.k, energy: c.energy, samples, cum_len: cum }
    }

    pub fn resonance(&self, idx: usize) -> DoubleResonance {
        let d = &self.double_resonances[idx];
        let kpb = {
            let triple = crate::lattice::unimodular_complete(&self.circles[d.circle].k).unwrap();
            crate::lattice::mat_mul_vec(&triple.m0_inv_t(), &d.k2)
        };
        DoubleResonance {
            p_dd: Vector3::new(d.p[0], d.p[1], d.p[2]),
            k_prime: self.circles[d.circle].k,
            k_second: d.k2,
            kpp_bar: kpb,
            period: d.period,
            freq: Vector3::zeros(),
            disc_radius: d.radius,
            strength: match d.strength.as_str() {
                "strong" => Strength::Strong,
                "weak" => Strength::Weak,
                _ => Strength::Unclassified,
            },
            margin: d.margin,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteArtifact {
    pub site: usize,
    pub b: [[f64; 2]; 2],
    pub b_prime: [f64; 2],
    pub b_dprime: f64,
    pub v_modes: Vec<(i64, i64, f64, f64)>,
    pub kpp_abs: i64,
    pub domain_inner: f64,
    pub domain_outer: f64,
    pub remainder: crate::normalform::RemainderReport,
    pub chain: TransformChain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelArtifact {
    pub site: usize,
    pub g: [i64; 2],
    pub channel: crate::averaged::ChannelData,
    pub alpha: crate::averaged::AlphaBeta,
    pub embedded: Vec<[f64; 3]>,
    pub embedding_diameter: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyArtifact {
    pub deviation_pass: bool,
    pub symmetry: Vec<(usize, f64)>,
    pub symmetry_pass: bool,
    pub overlap: Option<crate::averaged::OverlapReport>,
    pub overlap_pass: bool,
    pub translation_identity_error: f64,
    pub translation_pass: bool,
    pub all_pass: bool,
}

// ---------------------------------------------------------------------------
// Manifest and caching

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub artifacts: BTreeMap<String, String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    fn load(path: &Path) -> Option<RunManifest> {
        let text = fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn save(&self, path: &Path) -> Result<(), PipelineError> {
        write_bytes(path, serde_json::to_string_pretty(self).unwrap().as_bytes())
    }
}

fn file_hash(path: &Path) -> Option<String> {
    let data = fs::read(path).ok()?;
    let mut h = Sha256::new();
    h.update(&data);
    Some(hex(&h.finalize()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub struct Workspace {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub cache_dir: PathBuf,
    manifest: RunManifest,
    _lock: LockGuard,
}

struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub const STAGES: &[&str] =
    &["web", "cover", "classify", "reduce", "channel", "barrier", "verify"];

impl Workspace {
    pub fn open(config: RunConfig, out_override: Option<&Path>) -> Result<Self, PipelineError> {
        let out_dir = out_override
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from(&config.output.dir));
        fs::create_dir_all(&out_dir)?;
        let cache_dir = std::env::var_os("RESWEB_CACHE")
            .map(PathBuf::from)
            .unwrap_or_else(|| out_dir.clone());
        fs::create_dir_all(&cache_dir)?;
        let lock_path = out_dir.join(".lock");
        if lock_path.exists() {
            return Err(PipelineError::Locked(lock_path));
        }
        write_bytes(&lock_path, format!("{}\n", std::process::id()).as_bytes())?;
        let manifest_path = cache_dir.join("manifest.json");
        let mut manifest = RunManifest::load(&manifest_path).unwrap_or_default();
        let hash = config.hash();
        if manifest.config_hash != hash {
            manifest = RunManifest {
                version: env!("CARGO_PKG_VERSION").to_string(),
                config_hash: hash,
                stages: BTreeMap::new(),
            };
        }
        Ok(Workspace {
            config,
            out_dir,
            cache_dir,
            manifest,
            _lock: LockGuard { path: lock_path },
        })
    }

    fn manifest_path(&self) -> PathBuf {
        self.cache_dir.join("manifest.json")
    }

    pub fn artifact_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Expected on-disk hash of an artifact: the record of the last stage
    /// (in pipeline order) that wrote it. Stages sharing a file (the web
    /// stages all update web.json) stay cached as long as the final chain
    /// output is intact.
    fn expected_hash(&self, name: &str) -> Option<&str> {
        STAGES
            .iter()
            .rev()
            .find_map(|s| self.manifest.stages.get(*s)?.artifacts.get(name))
            .map(|s| s.as_str())
    }

    fn is_cached(&self, stage: &str) -> bool {
        match self.manifest.stages.get(stage) {
            None => false,
            Some(rec) => rec.artifacts.keys().all(|name| {
                match (file_hash(&self.artifact_path(name)), self.expected_hash(name)) {
                    (Some(actual), Some(expected)) => actual == expected,
                    _ => false,
                }
            }),
        }
    }

    fn record(&mut self, stage: &str, names: &[String], seconds: f64) -> Result<(), PipelineError> {
        let mut artifacts = BTreeMap::new();
        for n in names {
            let h = file_hash(&self.artifact_path(n))
                .ok_or_else(|| PipelineError::Config(format!("missing artifact {n}")))?;
            artifacts.insert(n.clone(), h);
        }
        self.manifest
            .stages
            .insert(stage.to_string(), StageRecord { artifacts, seconds });
        self.manifest.save(&self.manifest_path())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), PipelineError> {
        let mut text = serde_json::to_string_pretty(value).unwrap();
        text.push('\n');
        write_bytes(&self.artifact_path(name), text.as_bytes())
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T, PipelineError> {
        let text = fs::read_to_string(self.artifact_path(name))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("artifact {name}: {e}")))
    }

    /// Run one stage (honoring the cache); returns `true` when cached.
    pub fn run_stage(&mut self, stage: &str) -> Result<bool, PipelineError> {
        if self.is_cached(stage) {
            return Ok(true);
        }
        let t0 = std::time::Instant::now();
        let names = match stage {
            "web" => self.stage_web()?,
            "cover" => self.stage_cover()?,
            "classify" => self.stage_classify()?,
            "reduce" => self.stage_reduce()?,
            "channel" => self.stage_channel()?,
            "barrier" => self.stage_barrier()?,
            "verify" => self.stage_verify()?,
            other => return Err(PipelineError::Config(format!("unknown stage {other}"))),
        };
        self.record(stage, &names, t0.elapsed().as_secs_f64())?;
        Ok(false)
    }

    /// Run a stage and everything it depends on.
    pub fn run_through(&mut self, stage: &str) -> Result<Vec<(String, bool)>, PipelineError> {
        let idx = STAGES
            .iter()
            .position(|s| *s == stage)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage {stage}")))?;
        let mut out = Vec::new();
        for s in &STAGES[..=idx] {
            let cached = self.run_stage(s)?;
            out.push((s.to_string(), cached));
        }
        Ok(out)
    }

    // -- stages ------------------------------------------------------------

    fn stage_web(&mut self) -> Result<Vec<String>, PipelineError> {
        let sys = self.config.build_system()?;
        let t = &self.config.targets;
        let path = candidate_path(
            &sys,
            &Vector3::new(t.p_star[0], t.p_star[1], t.p_star[2]),
            &Vector3::new(t.p_target[0], t.p_target[1], t.p_target[2]),
            t.k_search,
            t.delta,
        )
        .map_err(PipelineError::numerical("web"))?;
        let mut circles = vec![path.circle_star.clone()];
        if path.k_target != path.k_star {
            circles.push(path.circle_target.clone());
        }
        // Retrace at the configured resolution for the artifact.
        let circles: Vec<ResonanceCircle> = circles
            .iter()
            .map(|c| {
                trace_circle(&sys.h, sys.energy, &c.k, self.config.numerics.circle_samples)
                    .map_err(PipelineError::numerical("web"))
            })
            .collect::<Result<_, _>>()?;
        let mut drs = Vec::new();
        for (ci, circle) in circles.iter().enumerate() {
            let rep = crate::resonance::find_double_resonances(
                &sys.h,
                circle,
                sys.eps,
                self.config.geometry.kappa,
                self.config.geometry.k_star,
            )
            .map_err(PipelineError::numerical("web"))?;
            for d in rep.found {
                drs.push(DoubleResonanceArtifact {
                    p: [d.p_dd.x, d.p_dd.y, d.p_dd.z],
                    k2: d.k_second,
                    period: d.period,
                    radius: d.disc_radius,
                    strength: "unclassified".into(),
                    margin: None,
                    circle: ci,
                });
            }
        }
        let artifact = WebArtifact {
            circles: circles
                .iter()
                .map(|c| CircleArtifact {
                    k: c.k,
                    energy: c.energy,
                    samples: c.samples.iter().map(|s| [s.x, s.y, s.z]).collect(),
                })
                .collect(),
            double_resonances: drs,
            covering: None,
            k_star: path.k_star,
            k_target: path.k_target,
        };
        self.write_json("web.json", &artifact)?;
        Ok(vec!["web.json".into()])
    }

    fn stage_cover(&mut self) -> Result<Vec<String>, PipelineError> {
        let sys = self.config.build_system()?;
        let mut web: WebArtifact = self.read_json("web.json")?;
        let mut uncovered = Vec::new();
        let mut max_period = 0;
        let mut d_emp = 0.0f64;
        let mut checked = 0;
        for i in 0..web.circles.len() {
            let circle = web.circle(i);
            let rep = dirichlet_cover(
                &sys.h,
                &circle,
                sys.eps,
                self.config.geometry.kappa,
                self.config.geometry.k_star,
                self.config.numerics.cover_checks,
            )
            .map_err(PipelineError::numerical("cover"))?;
            uncovered.extend(rep.uncovered_samples.iter().cloned());
            max_period = max_period.max(rep.max_period);
            d_emp = d_emp.max(rep.d_empirical);
            checked += rep.n_checked;
        }
        web.covering = Some(CoveringArtifact {
            uncovered,
            max_period,
            n_checked: checked,
            d_empirical: d_emp,
        });
        self.write_json("web.json", &web)?;
        Ok(vec!["web.json".into()])
    }

    fn stage_classify(&mut self) -> Result<Vec<String>, PipelineError> {
        let sys = self.config.build_system()?;
        let mut web: WebArtifact = self.read_json("web.json")?;
        let thresholds = ClassifyThresholds {
            theta: self.config.geometry.theta_classify,
            ..Default::default()
        };
        for i in 0..web.double_resonances.len() {
            let mut dr = web.resonance(i);
            dr.freq = sys.h.grad(&dr.p_dd);
            match classify(&sys, &dr, &thresholds) {
                Ok((s, diag)) => {
                    web.double_resonances[i].strength = match s {
                        Strength::Strong => "strong".into(),
                        Strength::Weak => "weak".into(),
                        Strength::Unclassified => "unclassified".into(),
                    };
                    web.double_resonances[i].margin = Some(diag.margin);
                }
                Err(crate::resonance::ResonanceError::DegenerateSingleResonance(c)) => {
                    web.double_resonances[i].strength = format!("degenerate({c:.3e})");
                }
                Err(e) => return Err(PipelineError::numerical("classify")(e)),
            }
        }
        self.write_json("web.json", &web)?;
        Ok(vec!["web.json".into()])
    }

    fn load_site(&self, site: usize) -> Result<(NearlyIntegrableSystem, DoubleResonance), PipelineError> {
        let sys = self.config.build_system()?;
        let web: WebArtifact = self.read_json("web.json")?;
        if site >= web.double_resonances.len() {
            return Err(PipelineError::Config(format!(
                "site {site} out of range ({} resonances)",
                web.double_resonances.len()
            )));
        }
        let mut dr = web.resonance(site);
        dr.freq = sys.h.grad(&dr.p_dd);
        Ok((sys, dr))
    }

    fn stage_reduce(&mut self) -> Result<Vec<String>, PipelineError> {
        let mut names = Vec::new();
        for &site in &self.config.numerics.sites.clone() {
            let (sys, dr) = self.load_site(site)?;
            let (nf, chain) = reduce(
                &sys,
                &dr,
                self.config.geometry.kappa,
                self.config.geometry.eta,
                self.config.geometry.delta_prime,
                &self.config.nf_options(),
            )
            .map_err(PipelineError::numerical("reduce"))?;
            let artifact = SiteArtifact {
                site,
                b: [[nf.b[(0, 0)], nf.b[(0, 1)]], [nf.b[(1, 0)], nf.b[(1, 1)]]],
                b_prime: [nf.b_prime.x, nf.b_prime.y],
                b_dprime: nf.b_dprime,
                v_modes: nf
                    .v
                    .modes()
                    .map(|(n, (re, im))| (n.0, n.1, *re, *im))
                    .collect(),
                kpp_abs: nf.kpp_abs,
                domain_inner: nf.domain_inner,
                domain_outer: nf.domain_outer,
                remainder: nf.remainder.clone(),
                chain,
            };
            let name = format!("nf_{site}.json");
            self.write_json(&name, &artifact)?;
            names.push(name);
        }
        Ok(names)
    }

    fn site_normal_form(&self, site: usize) -> Result<(SiteArtifact, NormalForm), PipelineError> {
        let art: SiteArtifact = self.read_json(&format!("nf_{site}.json"))?;
        let mut v = crate::fourier::Fourier2::new();
        for (a, b, re, im) in &art.v_modes {
            if (*a, *b) == (0, 0) || (*a, *b) > (-*a, -*b) {
                v.add_mode((*a, *b), num_complex::Complex64::new(*re, *im));
            }
        }
        let nf = NormalForm {
            b: nalgebra::Matrix2::new(art.b[0][0], art.b[0][1], art.b[1][0], art.b[1][1]),
            b_prime: Vector2::new(art.b_prime[0], art.b_prime[1]),
            b_dprime: art.b_dprime,
            v,
            kpp_abs: art.kpp_abs,
            domain_inner: art.domain_inner,
            domain_outer: art.domain_outer,
            remainder: art.remainder.clone(),
        };
        Ok((art, nf))
    }

    fn stage_channel(&mut self) -> Result<Vec<String>, PipelineError> {
        let mut names = Vec::new();
        let g = self.config.targets.g;
        for &site in &self.config.numerics.sites.clone() {
            let (art, nf) = self.site_normal_form(site)?;
            let ms = MechanicalSystem::from_normal_form(&nf);
            let opts = ChannelOptions { orbit: self.config.orbit_options(), ..Default::default() };
            let lr = self.config.numerics.lambda_range;
            let channel = scan_channel(
                &ms,
                g,
                (lr[0], lr[1]),
                self.config.numerics.lambda_grid,
                &opts,
            )
            .map_err(PipelineError::numerical("channel"))?;
            let lambda_grid: Vec<f64> = (0..self.config.numerics.lambda_grid)
                .map(|i| {
                    lr[0] + (lr[1] - lr[0]) * i as f64
                        / (self.config.numerics.lambda_grid - 1) as f64
                })
                .collect();
            let ab = alpha_beta(&ms, g, &lambda_grid, &self.config.orbit_options())
                .map_err(PipelineError::numerical("channel"))?;
            let emb = embed_channel(&ab, &art.chain);
            let channel_art = ChannelArtifact {
                site,
                g,
                channel,
                alpha: ab.clone(),
                embedded: emb.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
                embedding_diameter: emb.diameter(),
            };
            let name = format!("channel_{site}_{}_{}.json", g[0], g[1]);
            self.write_json(&name, &channel_art)?;
            names.push(name);
            // CSV of the alpha/beta scan for plotting.
            let mut csv = String::from("lambda,beta,mu,alpha\n");
            for i in 0..ab.lambda.len() {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    ab.lambda[i], ab.beta[i], ab.mu[i], ab.alpha[i]
                ));
            }
            let csv_name = format!("alpha_{site}.csv");
            write_bytes(&self.artifact_path(&csv_name), csv.as_bytes())?;
            names.push(csv_name);
        }
        Ok(names)
    }

    fn stage_barrier(&mut self) -> Result<Vec<String>, PipelineError> {
        let mut names = Vec::new();
        for &site in &self.config.numerics.sites.clone() {
            let (_, nf) = self.site_normal_form(site)?;
            let ms = MechanicalSystem::from_normal_form(&nf);
            let grid = TorusGrid::new(
                Cover::DoubleQ1,
                self.config.numerics.wk_grid[0],
                self.config.numerics.wk_grid[1],
            )
            .map_err(PipelineError::numerical("barrier"))?;
            let kernel = build_kernel(
                &ms,
                grid,
                self.config.numerics.wk_tau,
                &KernelOptions {
                    speed_bound: self.config.numerics.wk_speed_bound,
                    probe_fraction: 0.002,
                },
            )
            .map_err(PipelineError::numerical("barrier"))?;
            for (ci, c) in self.config.numerics.barrier_c.iter().enumerate() {
                let bundle = elementary_solutions(
                    &kernel,
                    Vector2::new(c[0], c[1]),
                    &self.config.numerics.penalty_levels,
                    &ElementaryOptions {
                        solve: SolveOptions {
                            tol: self.config.numerics.wk_tol,
                            max_iters: self.config.numerics.wk_max_iters,
                            polish: true,
                        },
                        ..Default::default()
                    },
                )
                .map_err(PipelineError::numerical("barrier"))?;
                let bf = barrier(&bundle.ul_minus, &bundle.ur_plus);
                let name = format!("barrier_{site}_{ci}.csv");
                let mut csv = format!(
                    "# cover=double_q1 n1={} n2={} gauge=mean_zero min={}\n",
                    grid.n1, grid.n2, bf.min
                );
                for i1 in 0..grid.n1 {
                    let row: Vec<String> = (0..grid.n2)
                        .map(|i2| format!("{}", bf.b.at(i1, i2)))
                        .collect();
                    csv.push_str(&row.join(","));
                    csv.push('\n');
                }
                write_bytes(&self.artifact_path(&name), csv.as_bytes())?;
                names.push(name);
                let rep = argmin_components(&bf, 10.0 * self.config.numerics.wk_tol.max(1e-6), &[]);
                let rep_name = format!("argmin_{site}_{ci}.json");
                self.write_json(&rep_name, &rep)?;
                names.push(rep_name);
            }
        }
        Ok(names)
    }

    fn stage_verify(&mut self) -> Result<Vec<String>, PipelineError> {
        let sys = self.config.build_system()?;
        // Deviation sweep.
        let omega = self.config.numerics.deviation_omega;
        let dev = verify_deviation(
            &sys,
            &Vector3::new(omega[0], omega[1], omega[2]),
            &self.config.numerics.deviation_eps,
            &DeviationOptions::default(),
        )
        .map_err(PipelineError::numerical("verify"))?;
        let mut csv = String::from(
            "eps,deviation,bound,pass,nu,nu_ratio,deviation_location,bound_location,pass_location,flagged\n",
        );
        for r in &dev.rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.eps,
                r.deviation,
                r.bound,
                r.pass_size,
                r.nu,
                r.nu_ratio,
                r.deviation_location,
                r.bound_location,
                r.pass_location,
                r.flagged
            ));
        }
        write_bytes(&self.artifact_path("deviation.csv"), csv.as_bytes())?;

        // Symmetry checks on the reduced sites.
        let mut symmetry = Vec::new();
        let mut symmetry_pass = true;
        for &site in &self.config.numerics.sites.clone() {
            let (art, nf) = self.site_normal_form(site)?;
            let rep = symmetry_check(&sys, &art.chain, &nf, 100, &self.config.nf_options())
                .map_err(PipelineError::numerical("verify"))?;
            symmetry_pass &= rep.max_discrepancy < 1e-9;
            symmetry.push((site, rep.max_discrepancy));
        }

        // Overlap of adjacent channels.
        let (overlap, overlap_pass) = if let Some([a, b]) = self.config.numerics.overlap_sites {
            let web: WebArtifact = self.read_json("web.json")?;
            let (art_a, _) = self.site_normal_form(a)?;
            let (art_b, _) = self.site_normal_form(b)?;
            let xi = if self.config.geometry.xi > 0.0 {
                self.config.geometry.xi
            } else {
                // Derived from the measured constants: oscillation is read
                // from the channel artifacts when present, else zero.
                4.0 * (dev.d_h + dev.c_h)
            };
            let circle_idx = web.double_resonances[a].circle;
            let rep = overlap_check(&web.circle(circle_idx), &art_a.chain, &art_b.chain, xi, 4096);
            let pass = rep.passes;
            (Some(rep), pass)
        } else {
            (None, true)
        };

        // Translation identity on the first site's barrier setup.
        let translation_error = self.translation_identity()?;
        let translation_pass = translation_error < 1e-9;

        let artifact = VerifyArtifact {
            deviation_pass: dev.all_pass(),
            symmetry,
            symmetry_pass,
            overlap,
            overlap_pass,
            translation_identity_error: translation_error,
            translation_pass,
            all_pass: dev.all_pass() && symmetry_pass && overlap_pass && translation_pass,
        };
        self.write_json("verify.json", &artifact)?;
        Ok(vec!["deviation.csv".into(), "verify.json".into()])
    }

    fn translation_identity(&self) -> Result<f64, PipelineError> {
        let site = *self.config.numerics.sites.first().unwrap_or(&0);
        let (_, nf) = self.site_normal_form(site)?;
        let ms = MechanicalSystem::from_normal_form(&nf);
        let grid = TorusGrid::new(Cover::Base, 32.max(self.config.numerics.wk_grid[0] / 2), 32)
            .map_err(PipelineError::numerical("verify"))?;
        let kernel = build_kernel(
            &ms,
            grid,
            self.config.numerics.wk_tau,
            &KernelOptions {
                speed_bound: self.config.numerics.wk_speed_bound,
                probe_fraction: 0.0,
            },
        )
        .map_err(PipelineError::numerical("verify"))?;
        let sol = match lax_oleinik(
            &kernel,
            Vector2::zeros(),
            None,
            Direction::Backward,
            &SolveOptions {
                tol: self.config.numerics.wk_tol,
                max_iters: self.config.numerics.wk_max_iters,
                polish: false,
            },
        ) {
            Ok(s) => s,
            Err(e) => match *e {
                crate::weakkam::WeakKamError::NotConverged { partial, .. } => *partial,
                other => return Err(PipelineError::numerical("verify")(other)),
            },
        };
        let bump = Field2D::from_fn(grid, |q1, q2| {
            let d1 = (q1 - 1.0).rem_euclid(grid.len1());
            let d1 = d1.min(grid.len1() - d1);
            let d2 = (q2 - 2.0).rem_euclid(std::f64::consts::TAU);
            let d2 = d2.min(std::f64::consts::TAU - d2);
            let r2 = d1 * d1 + d2 * d2;
            if r2 < 0.2 {
                1e-3 * (1.0 - r2 / 0.2).powi(2)
            } else {
                0.0
            }
        });
        let base =
            crate::weakkam::lax_oleinik_step(&kernel, &sol.u, &Vector2::zeros(), Direction::Backward, None, None);
        let bumped = crate::weakkam::lax_oleinik_step(
            &kernel,
            &sol.u,
            &Vector2::zeros(),
            Direction::Backward,
            None,
            Some(&bump),
        );
        let mut worst = 0.0f64;
        for i in 0..grid.len() {
            worst = worst.max(((bumped.data[i] - base.data[i]) - bump.data[i]).abs());
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI_CONFIG: &str = r#"
[system]
quadratic = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
modes = [{ k = [1, 0, 0], coeff = "1.0" }]
eps = 1e-4
energy = 0.5

[geometry]
kappa = 0.1
eta = 0.5

[targets]
p_star = [0.0, 0.0, 1.0]
p_target = [0.0, 1.0, 0.0]

[output]
dir = "out"
"#;

    #[test]
    fn config_round_trips_bit_identically() {
        let cfg: RunConfig = toml::from_str(MINI_CONFIG).unwrap();
        cfg.validate().unwrap();
        let canon = cfg.canonical();
        let cfg2: RunConfig = toml::from_str(&canon).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(canon, cfg2.canonical());
        assert_eq!(cfg.hash(), cfg2.hash());
    }

    #[test]
    fn config_rejects_bad_ranges() {
        let mut cfg: RunConfig = toml::from_str(MINI_CONFIG).unwrap();
        cfg.geometry.kappa = 0.2;
        assert!(cfg.validate().is_err());
        let mut cfg: RunConfig = toml::from_str(MINI_CONFIG).unwrap();
        cfg.geometry.delta_prime = 0.7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn system_builds_from_config() {
        let cfg: RunConfig = toml::from_str(MINI_CONFIG).unwrap();
        let sys = cfg.build_system().unwrap();
        assert_eq!(sys.eps, 1e-4);
        assert_eq!(sys.pert.len(), 2); // one cosine pair
    }
}
