//! Config-driven experiment runner behind the command-line tool.
//!
//! Every command writes into its own output directory and finishes with a
//! `manifest.json` carrying the SHA-256 of the effective configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{build_masks, run_attack, AttackConfig, AttackResult, AttackSetting};
use crate::defense::{assess_perturbed, DefenseMethod, Downstream, DEFAULT_MAGNITUDES};
use crate::diffcore::Field2D;
use crate::error::{Error, Result};
use crate::flowio::{
    flow_to_color, perturbation_heatmap, read_flo, read_image_png, read_kitti_png, read_labels_png,
    write_flo, write_image_png, write_labels_png, write_ttc_map,
};
use crate::flowmodel::{estimate_flow, model_family, FlowModelParams};
use crate::metrics::{epe_masked, per_category_report};
use crate::scenegen::{render, scene_suite_sized, SceneInstance};
use crate::stats::{sign_test_less, spearman_negative};
use crate::ttc::{ttc_colormap, ttc_error_masked, ttc_from_flow};
use crate::types::{FlowField, Image};

/// Default consistency grid of the alpha sweep.
pub const DEFAULT_SWEEP_ALPHAS: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneSource {
    /// Seeded synthetic suite.
    Synthetic {
        count: usize,
        #[serde(default)]
        base_seed: u64,
        #[serde(default = "default_side")]
        width: usize,
        #[serde(default = "default_side")]
        height: usize,
    },
    /// KITTI-like directory: `NNNNNN_10.png`, `NNNNNN_11.png`,
    /// `NNNNNN_sem.png` and optionally `NNNNNN_flow.flo`.
    Directory { path: PathBuf },
}

fn default_side() -> usize {
    64
}

impl Default for SceneSource {
    fn default() -> Self {
        SceneSource::Synthetic {
            count: 20,
            base_seed: 0,
            width: 64,
            height: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyConfig {
    pub size: usize,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self { size: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Attack whose settings are reused with every alpha; defaults to the first attack.
    pub attack: Option<String>,
    pub alphas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            attack: None,
            alphas: DEFAULT_SWEEP_ALPHAS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub attack: Option<String>,
    pub alphas: Vec<f64>,
    pub magnitudes: Vec<f64>,
    /// Adds the unattacked point (magnitude 0) to every curve.
    pub include_baseline: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            attack: None,
            alphas: vec![0.0, 10.0],
            magnitudes: DEFAULT_MAGNITUDES.to_vec(),
            include_baseline: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtcConfig {
    pub window: usize,
}

impl Default for TtcConfig {
    fn default() -> Self {
        Self { window: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Added to every attack's `rng_seed`.
    pub seed: u64,
    pub scenes: SceneSource,
    pub model: FlowModelParams,
    pub family: FamilyConfig,
    /// Named attack variants, run in name order.
    pub attacks: BTreeMap<String, AttackConfig>,
    pub sweep: SweepConfig,
    pub detect: DetectConfig,
    pub ttc: TtcConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut attacks = BTreeMap::new();
        for alpha in [0.0, 10.0] {
            attacks.insert(
                format!("global_alpha{alpha}"),
                AttackConfig {
                    alpha,
                    setting: AttackSetting::Global,
                    ..Default::default()
                },
            );
        }
        Self {
            seed: 0,
            scenes: SceneSource::default(),
            model: FlowModelParams::default(),
            family: FamilyConfig::default(),
            attacks,
            sweep: SweepConfig::default(),
            detect: DetectConfig::default(),
            ttc: TtcConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.attacks.is_empty() {
            return Err(Error::Config("at least one [attacks.<name>] table is required".into()));
        }
        for (name, a) in &self.attacks {
            a.validate().map_err(|e| Error::Config(format!("attack `{name}`: {e}")))?;
        }
        if let SceneSource::Synthetic { count, .. } = self.scenes {
            if count == 0 {
                return Err(Error::Config("scenes.count must be at least 1".into()));
            }
        }
        for name in [&self.sweep.attack, &self.detect.attack].into_iter().flatten() {
            if !self.attacks.contains_key(name) {
                return Err(Error::Config(format!("unknown attack `{name}`")));
            }
        }
        check_ascending("sweep.alphas", &self.sweep.alphas, 0.0)?;
        check_ascending("detect.alphas", &self.detect.alphas, 0.0)?;
        check_ascending("detect.magnitudes", &self.detect.magnitudes, f64::MIN_POSITIVE)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    fn attack(&self, name: Option<&String>) -> Result<(&String, &AttackConfig)> {
        match name {
            Some(n) => self
                .attacks
                .get_key_value(n)
                .ok_or_else(|| Error::Config(format!("unknown attack `{n}`"))),
            None => Ok(self.attacks.iter().next().expect("validated non-empty")),
        }
    }

    fn seeded(&self, cfg: &AttackConfig) -> AttackConfig {
        AttackConfig {
            rng_seed: cfg.rng_seed.wrapping_add(self.seed),
            ..cfg.clone()
        }
    }
}

fn check_ascending(name: &str, xs: &[f64], min: f64) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Config(format!("{name} must not be empty")));
    }
    if xs.iter().any(|&x| !(x >= min && x.is_finite())) || xs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("{name} must be finite, at least {min} and strictly ascending")));
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

/// Per-run options shared by all commands.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Worker threads; 0 lets the pool decide.
    pub workers: usize,
    /// Restricts the run to one scene id.
    pub scene: Option<String>,
}

#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub id: String,
    pub scene: SceneInstance,
    /// False when the directory had no ground-truth flow (zeros are stored).
    pub has_gt_flow: bool,
}

pub fn load_scenes(source: &SceneSource) -> Result<Vec<LoadedScene>> {
    match source {
        SceneSource::Synthetic {
            count,
            base_seed,
            width,
            height,
        } => scene_suite_sized(*count, *base_seed, *width, *height)?
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                Ok(LoadedScene {
                    id: format!("{i:06}"),
                    scene: render(spec)?,
                    has_gt_flow: true,
                })
            })
            .collect(),
        SceneSource::Directory { path } => load_directory(path),
    }
}

fn load_directory(dir: &Path) -> Result<Vec<LoadedScene>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_10.png") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Config(format!("{}: no `*_10.png` frames found", dir.display())));
    }
    ids.into_iter()
        .map(|id| {
            let need = |suffix: &str| -> Result<PathBuf> {
                let p = dir.join(format!("{id}{suffix}"));
                if !p.exists() {
                    return Err(Error::Config(format!("scene {id}: missing file {}", p.display())));
                }
                Ok(p)
            };
            let i1 = read_image_png(&need("_10.png")?)?;
            let i2 = read_image_png(&need("_11.png")?)?;
            let labels = read_labels_png(&need("_sem.png")?)?;
            let flo = dir.join(format!("{id}_flow.flo"));
            let kitti = dir.join(format!("{id}_flow.png"));
            let (gt_flow, has_gt_flow) = if flo.exists() {
                (read_flo(&flo)?, true)
            } else if kitti.exists() {
                (read_kitti_png(&kitti)?.0, true)
            } else {
                (FlowField::zeros(i1.height(), i1.width()), false)
            };
            if i2.shape() != i1.shape() || labels.shape() != i1.shape() || gt_flow.shape() != i1.shape() {
                return Err(Error::Config(format!("scene {id}: frames, labels and flow differ in size")));
            }
            Ok(LoadedScene {
                id,
                scene: SceneInstance {
                    i1,
                    i2,
                    gt_flow,
                    labels,
                },
                has_gt_flow,
            })
        })
        .collect()
}

fn select_scenes(all: Vec<LoadedScene>, wanted: Option<&str>) -> Result<Vec<LoadedScene>> {
    let Some(w) = wanted else { return Ok(all) };
    let matches = |id: &str| id == w || (w.parse::<u64>().is_ok() && id.parse::<u64>().ok() == w.parse::<u64>().ok());
    let found: Vec<_> = all.into_iter().filter(|s| matches(&s.id)).collect();
    if found.is_empty() {
        return Err(Error::Config(format!("scene `{w}` not found")));
    }
    Ok(found)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    seed: u64,
    scenes: Vec<String>,
    package_version: &'static str,
}

fn write_manifest(cmd: &str, cfg: &ExperimentConfig, opts: &RunOptions, scenes: &[LoadedScene]) -> Result<()> {
    write_json(
        &opts.out.join("manifest.json"),
        &Manifest {
            command: cmd,
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            scenes: scenes.iter().map(|s| s.id.clone()).collect(),
            package_version: env!("CARGO_PKG_VERSION"),
        },
    )
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn context(scene: &str, attack: &str, e: Error) -> Error {
    Error::invalid(format!("scene {scene}, attack `{attack}`: {e}"))
}

fn fmt(x: f64) -> String {
    format!("{x:.9e}")
}

#[derive(Serialize)]
struct AttackSummary {
    scene: String,
    attack: String,
    alpha: f64,
    setting: AttackSetting,
    budget: f64,
    iterations: usize,
    converged: bool,
    final_mean_abs_perturbation: String,
    on_target_epe: String,
    off_target_epe: String,
}

fn write_attack_outputs(dir: &Path, scene: &LoadedScene, name: &str, cfg: &AttackConfig, r: &AttackResult) -> Result<()> {
    create_dir(dir)?;
    let s = &scene.scene;
    write_image_png(&dir.join("perturbed.png"), &r.perturbed_image)?;
    write_flo(&dir.join("attacked.flo"), &r.attacked_flow)?;
    write_flo(&dir.join("original.flo"), &r.original_flow)?;
    let max = crate::flowio::auto_max_magnitude(&r.original_flow);
    write_image_png(&dir.join("flow_original.png"), &flow_to_color(&r.original_flow, Some(max))?)?;
    write_image_png(&dir.join("flow_attacked.png"), &flow_to_color(&r.attacked_flow, Some(max))?)?;
    write_image_png(&dir.join("perturbation.png"), &perturbation_heatmap(&r.perturbed_image, &s.i1)?)?;
    write_text(&dir.join("trace.csv"), &r.trace_csv())?;
    let report = per_category_report(&r.attacked_flow, &r.original_flow, &s.labels, cfg.target_category)?;
    write_text(&dir.join("report.csv"), &report.to_csv())?;
    write_json(&dir.join("report.json"), &report)?;
    write_json(
        &dir.join("summary.json"),
        &AttackSummary {
            scene: scene.id.clone(),
            attack: name.to_string(),
            alpha: cfg.alpha,
            setting: cfg.setting,
            budget: cfg.budget,
            iterations: r.iterations.len(),
            converged: r.converged,
            final_mean_abs_perturbation: fmt(r.final_mean_abs_perturbation),
            on_target_epe: fmt(epe_masked(&r.attacked_flow, &r.original_flow, &r.masks.target)?),
            off_target_epe: fmt(epe_masked(&r.attacked_flow, &r.original_flow, &r.masks.target.complement())?),
        },
    )
}

/// Runs every configured attack on the selected scene (the first scene when
/// none is given) and writes per-attack result directories.
pub fn cmd_attack(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    let all = load_scenes(&cfg.scenes)?;
    let scenes = match opts.scene.as_deref() {
        Some(_) => select_scenes(all, opts.scene.as_deref())?,
        None => all.into_iter().take(1).collect(),
    };
    create_dir(&opts.out)?;
    let jobs: Vec<(&LoadedScene, &String, &AttackConfig)> = scenes
        .iter()
        .flat_map(|s| cfg.attacks.iter().map(move |(n, a)| (s, n, a)))
        .collect();
    with_pool(opts.workers, || {
        jobs.par_iter()
            .map(|(scene, name, attack)| {
                let a = cfg.seeded(attack);
                let s = &scene.scene;
                let r = run_attack(&s.i1, &s.i2, &s.labels, &a, &cfg.model).map_err(|e| context(&scene.id, name, e))?;
                write_attack_outputs(&opts.out.join(&scene.id).join(name.as_str()), scene, name, &a, &r)
            })
            .collect::<Result<Vec<()>>>()
    })??;
    write_manifest("attack", cfg, opts, &scenes)
}

/// Per-scene EPE pair (on, off) of one attack.
fn attack_epes(scene: &LoadedScene, name: &str, a: &AttackConfig, params: &FlowModelParams) -> Result<(f64, f64, bool)> {
    let s = &scene.scene;
    let r = run_attack(&s.i1, &s.i2, &s.labels, a, params).map_err(|e| context(&scene.id, name, e))?;
    Ok((
        epe_masked(&r.attacked_flow, &r.original_flow, &r.masks.target)?,
        epe_masked(&r.attacked_flow, &r.original_flow, &r.masks.target.complement())?,
        r.converged,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub mean_on_target_epe: f64,
    pub mean_off_target_epe: f64,
    pub converged_fraction: f64,
}

/// Suite means of on- and off-target EPE for every alpha.
pub fn cmd_sweep_alpha(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<SweepRow>> {
    let scenes = select_scenes(load_scenes(&cfg.scenes)?, opts.scene.as_deref())?;
    let (name, template) = cfg.attack(cfg.sweep.attack.as_ref())?;
    create_dir(&opts.out)?;
    let alphas = &cfg.sweep.alphas;
    let jobs: Vec<(usize, usize)> = (0..alphas.len()).flat_map(|a| (0..scenes.len()).map(move |s| (a, s))).collect();
    let results = with_pool(opts.workers, || {
        jobs.par_iter()
            .map(|&(ai, si)| {
                let a = AttackConfig {
                    alpha: alphas[ai],
                    ..cfg.seeded(template)
                };
                attack_epes(&scenes[si], name, &a, &cfg.model)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let n = scenes.len() as f64;
    let mut rows = Vec::new();
    let mut per_scene = String::from("alpha,scene,on_target_epe,off_target_epe,converged\n");
    for (ai, &alpha) in alphas.iter().enumerate() {
        let chunk = &results[ai * scenes.len()..(ai + 1) * scenes.len()];
        for (si, (on, off, conv)) in chunk.iter().enumerate() {
            writeln!(per_scene, "{alpha},{},{},{},{conv}", scenes[si].id, fmt(*on), fmt(*off)).unwrap();
        }
        rows.push(SweepRow {
            alpha,
            mean_on_target_epe: chunk.iter().map(|r| r.0).sum::<f64>() / n,
            mean_off_target_epe: chunk.iter().map(|r| r.1).sum::<f64>() / n,
            converged_fraction: chunk.iter().filter(|r| r.2).count() as f64 / n,
        });
    }
    let mut csv = String::from("alpha,mean_on_target_epe,mean_off_target_epe,converged_fraction\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{}",
            r.alpha,
            fmt(r.mean_on_target_epe),
            fmt(r.mean_off_target_epe),
            r.converged_fraction
        )
        .unwrap();
    }
    write_text(&opts.out.join("sweep.csv"), &csv)?;
    write_text(&opts.out.join("sweep_scenes.csv"), &per_scene)?;
    if rows.len() >= 2 {
        let xs: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.mean_off_target_epe).collect();
        write_json(&opts.out.join("sweep_trend.json"), &spearman_negative(&xs, &ys)?)?;
    }
    write_manifest("sweep-alpha", cfg, opts, &scenes)?;
    Ok(rows)
}

/// `matrix[source][target]`: mean on-target EPE when the perturbation crafted
/// against `source` is evaluated under `target`.
pub fn transfer_matrix(
    scenes: &[LoadedScene],
    attack_name: &str,
    attack: &AttackConfig,
    family: &[FlowModelParams],
) -> Result<Vec<Vec<f64>>> {
    let k = family.len();
    let per_scene = scenes
        .par_iter()
        .map(|scene| {
            let s = &scene.scene;
            let target = build_masks(&s.labels, attack)?.target;
            let clean = family
                .iter()
                .map(|p| estimate_flow(&s.i1, &s.i2, p))
                .collect::<Result<Vec<_>>>()?;
            let mut m = vec![vec![0.0; k]; k];
            for (src, p_src) in family.iter().enumerate() {
                let r = run_attack(&s.i1, &s.i2, &s.labels, attack, p_src).map_err(|e| context(&scene.id, attack_name, e))?;
                for (dst, p_dst) in family.iter().enumerate() {
                    let flow = if dst == src {
                        r.attacked_flow.clone()
                    } else {
                        estimate_flow(&r.perturbed_image, &s.i2, p_dst)?
                    };
                    m[src][dst] = epe_masked(&flow, &clean[dst], &target)?;
                }
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = scenes.len() as f64;
    Ok((0..k)
        .map(|i| (0..k).map(|j| per_scene.iter().map(|m| m[i][j]).sum::<f64>() / n).collect())
        .collect())
}

/// Mean of the off-diagonal entries.
pub fn off_diagonal_mean(m: &[Vec<f64>]) -> f64 {
    let k = m.len();
    let mut s = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                s += v;
            }
        }
    }
    s / (k * (k - 1)) as f64
}

pub fn cmd_blackbox(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<BTreeMap<String, Vec<Vec<f64>>>> {
    if cfg.family.size < 2 {
        return Err(Error::Config("black-box transfer needs family.size >= 2".into()));
    }
    let scenes = select_scenes(load_scenes(&cfg.scenes)?, opts.scene.as_deref())?;
    let family = model_family(&cfg.model, cfg.family.size)?;
    create_dir(&opts.out)?;
    write_json(&opts.out.join("family.json"), &family)?;
    let mut out = BTreeMap::new();
    for (name, attack) in &cfg.attacks {
        let a = cfg.seeded(attack);
        let m = with_pool(opts.workers, || transfer_matrix(&scenes, name, &a, &family))??;
        let mut csv = String::from("source");
        for j in 0..m.len() {
            write!(csv, ",target{j}").unwrap();
        }
        csv.push('\n');
        for (i, row) in m.iter().enumerate() {
            write!(csv, "model{i}").unwrap();
            for v in row {
                write!(csv, ",{}", fmt(*v)).unwrap();
            }
            csv.push('\n');
        }
        write_text(&opts.out.join(format!("blackbox_{name}.csv")), &csv)?;
        out.insert(name.clone(), m);
    }
    let mut summary = String::from("attack,alpha,white_box_mean,transfer_mean\n");
    for (name, m) in &out {
        let diag = (0..m.len()).map(|i| m[i][i]).sum::<f64>() / m.len() as f64;
        writeln!(
            summary,
            "{name},{},{},{}",
            cfg.attacks[name].alpha,
            fmt(diag),
            fmt(off_diagonal_mean(m))
        )
        .unwrap();
    }
    write_text(&opts.out.join("blackbox_summary.csv"), &summary)?;
    write_manifest("blackbox", cfg, opts, &scenes)?;
    Ok(out)
}

fn image_to_bytes(img: &Image) -> Vec<u8> {
    let (h, w) = img.shape();
    let mut out = Vec::with_capacity(16 + 24 * h * w);
    out.extend_from_slice(&(h as u64).to_le_bytes());
    out.extend_from_slice(&(w as u64).to_le_bytes());
    for c in img.channels() {
        for x in c.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn image_from_bytes(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |offset, reason: &str| Error::Format {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    };
    if bytes.len() < 16 {
        return Err(bad(0, "truncated cache header"));
    }
    let h = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let w = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if h.checked_mul(w).and_then(|n| n.checked_mul(24)).map(|n| n + 16) != Some(bytes.len()) {
        return Err(bad(16, "cache payload size does not match its header"));
    }
    let mut vals = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut chan = || Field2D::new(h, w, vals.by_ref().take(h * w).collect());
    Image::new([chan()?, chan()?, chan()?])
}

/// Perturbed image for (scene, attack), read from `cache_dir` when present.
pub fn cached_perturbation(
    cache_dir: &Path,
    config_hash: &str,
    scene: &LoadedScene,
    attack: &AttackConfig,
    params: &FlowModelParams,
) -> Result<Image> {
    let key_src = serde_json::json!({
        "config": config_hash,
        "scene": scene.id,
        "attack": attack,
        "model": params,
    })
    .to_string();
    let path = cache_dir.join(format!("{}.bin", hex(&Sha256::digest(key_src.as_bytes()))));
    if path.exists() {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        return image_from_bytes(&bytes, &path);
    }
    let s = &scene.scene;
    let r = run_attack(&s.i1, &s.i2, &s.labels, attack, params)?;
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, image_to_bytes(&r.perturbed_image)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(r.perturbed_image)
}

pub const DOWNSTREAMS: [Downstream; 2] = [Downstream::TtcError, Downstream::TargetEpe];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectRow {
    pub method: DefenseMethod,
    pub alpha: f64,
    pub magnitude: f64,
    pub detection_score: f64,
    pub ttc_error: f64,
    pub target_epe: f64,
}

/// Detection-versus-impact curves for every defense, alpha and downstream measure.
pub fn cmd_detect(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<DetectRow>> {
    let scenes = select_scenes(load_scenes(&cfg.scenes)?, opts.scene.as_deref())?;
    let (name, template) = cfg.attack(cfg.detect.attack.as_ref())?;
    let mut magnitudes = cfg.detect.magnitudes.clone();
    if cfg.detect.include_baseline {
        magnitudes.insert(0, 0.0);
    }
    let cache = opts.out.join("cache");
    create_dir(&cache)?;
    let hash = cfg.hash();
    let methods = DefenseMethod::ALL;
    let alphas = &cfg.detect.alphas;
    let (n_mag, n_scenes) = (magnitudes.len(), scenes.len());
    let jobs: Vec<(usize, usize, usize)> = (0..alphas.len())
        .flat_map(|a| (0..n_mag).flat_map(move |m| (0..n_scenes).map(move |s| (a, m, s))))
        .collect();
    let results = with_pool(opts.workers, || {
        jobs.par_iter()
            .map(|&(ai, mi, si)| {
                let scene = &scenes[si];
                let s = &scene.scene;
                let attack = AttackConfig {
                    alpha: alphas[ai],
                    budget: if magnitudes[mi] > 0.0 { magnitudes[mi] } else { template.budget },
                    ..cfg.seeded(template)
                };
                let image = if magnitudes[mi] == 0.0 {
                    s.i1.clone()
                } else {
                    cached_perturbation(&cache, &hash, scene, &attack, &cfg.model)
                        .map_err(|e| context(&scene.id, name, e))?
                };
                let original = estimate_flow(&s.i1, &s.i2, &cfg.model)?;
                let target = build_masks(&s.labels, &attack)?.target;
                assess_perturbed(&image, &s.i2, &original, &target, &methods, &DOWNSTREAMS, &cfg.model)
                    .map_err(|e| context(&scene.id, name, e))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let n = scenes.len() as f64;
    let mut rows = Vec::new();
    for (ai, &alpha) in alphas.iter().enumerate() {
        for (mi, &magnitude) in magnitudes.iter().enumerate() {
            let base = (ai * magnitudes.len() + mi) * scenes.len();
            let chunk = &results[base..base + scenes.len()];
            let mean_impact = |k: usize| chunk.iter().map(|r| r.impacts[k]).sum::<f64>() / n;
            for (k, &method) in methods.iter().enumerate() {
                rows.push(DetectRow {
                    method,
                    alpha,
                    magnitude,
                    detection_score: chunk.iter().map(|r| r.scores[k]).sum::<f64>() / n,
                    ttc_error: mean_impact(0),
                    target_epe: mean_impact(1),
                });
            }
        }
    }
    for (k, label) in [(0, "ttc_error"), (1, "target_epe")] {
        let mut csv = String::from("method,alpha,magnitude,detection_score,impact\n");
        for r in &rows {
            let impact = if k == 0 { r.ttc_error } else { r.target_epe };
            writeln!(csv, "{},{},{},{},{}", r.method, r.alpha, fmt(r.magnitude), fmt(r.detection_score), fmt(impact)).unwrap();
        }
        write_text(&opts.out.join(format!("detect_{label}.csv")), &csv)?;
    }
    write_manifest("detect", cfg, opts, &scenes)?;
    Ok(rows)
}

/// TTC maps of the clean and attacked flows of one scene.
pub fn cmd_ttc(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    let all = load_scenes(&cfg.scenes)?;
    let scenes = match opts.scene.as_deref() {
        Some(_) => select_scenes(all, opts.scene.as_deref())?,
        None => all.into_iter().take(1).collect(),
    };
    create_dir(&opts.out)?;
    for scene in &scenes {
        let dir = opts.out.join(&scene.id);
        create_dir(&dir)?;
        let s = &scene.scene;
        let original = estimate_flow(&s.i1, &s.i2, &cfg.model)?;
        let t_orig = ttc_from_flow(&original, cfg.ttc.window)?;
        write_ttc_map(&dir.join("ttc_original.flo"), &t_orig)?;
        write_image_png(&dir.join("ttc_original.png"), &ttc_colormap(&t_orig))?;
        let mut csv = String::from("attack,mean_relative_error,jointly_valid,validity_churn\n");
        for (name, attack) in &cfg.attacks {
            let a = cfg.seeded(attack);
            let r = run_attack(&s.i1, &s.i2, &s.labels, &a, &cfg.model).map_err(|e| context(&scene.id, name, e))?;
            let t = ttc_from_flow(&r.attacked_flow, cfg.ttc.window)?;
            write_ttc_map(&dir.join(format!("ttc_{name}.flo")), &t)?;
            write_image_png(&dir.join(format!("ttc_{name}.png")), &ttc_colormap(&t))?;
            match ttc_error_masked(&t, &t_orig, Some(&r.masks.target)) {
                Ok(e) => writeln!(
                    csv,
                    "{name},{},{},{}",
                    fmt(e.mean_relative_error),
                    e.jointly_valid,
                    fmt(e.validity_churn)
                )
                .unwrap(),
                Err(_) => writeln!(csv, "{name},,0,").unwrap(),
            }
        }
        write_text(&dir.join("ttc_error.csv"), &csv)?;
    }
    write_manifest("ttc", cfg, opts, &scenes)
}

/// Writes the suite in the directory layout read by [`SceneSource::Directory`].
pub fn cmd_gen_scenes(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    let scenes = select_scenes(load_scenes(&cfg.scenes)?, opts.scene.as_deref())?;
    create_dir(&opts.out)?;
    for scene in &scenes {
        let s = &scene.scene;
        let base = |suffix: &str| opts.out.join(format!("{}{suffix}", scene.id));
        write_image_png(&base("_10.png"), &s.i1)?;
        write_image_png(&base("_11.png"), &s.i2)?;
        write_labels_png(&base("_sem.png"), &s.labels)?;
        if scene.has_gt_flow {
            write_flo(&base("_flow.flo"), &s.gt_flow)?;
        }
    }
    write_manifest("gen-scenes", cfg, opts, &scenes)
}

/// Color-codes a `.flo` or KITTI flow PNG.
pub fn cmd_viz(input: &Path, out: &Path, max_magnitude: Option<f64>) -> Result<()> {
    let flow = match input.extension().and_then(|e| e.to_str()) {
        Some("flo") => read_flo(input)?,
        Some("png") => read_kitti_png(input)?.0,
        _ => return Err(Error::invalid(format!("{}: expected a .flo or .png flow file", input.display()))),
    };
    let target = if out.extension().is_some() {
        out.to_path_buf()
    } else {
        create_dir(out)?;
        out.join("flow.png")
    };
    write_image_png(&target, &flow_to_color(&flow, max_magnitude)?)
}

/// Paired comparison of two per-scene samples, lower `a` being better.
pub fn paired_summary(a: &[f64], b: &[f64]) -> Result<serde_json::Value> {
    let t = sign_test_less(a, b)?;
    Ok(serde_json::json!({
        "wins": t.wins, "losses": t.losses, "ties": t.ties, "p_value": t.p_value,
        "mean_a": a.iter().sum::<f64>() / a.len() as f64,
        "mean_b": b.iter().sum::<f64>() / b.len() as f64,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn rejects_unknown_keys_and_empty_lists() {
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.detect.magnitudes.clear();
        assert!(cfg.validate().unwrap_err().to_string().contains("magnitudes"));
        let mut cfg = ExperimentConfig::default();
        cfg.attacks.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cache_codec_round_trips() {
        let img = Image::from_fn(3, 4, |y, x, c| (y * 12 + x * 3 + c) as f64 / 40.0).unwrap();
        let bytes = image_to_bytes(&img);
        assert_eq!(image_from_bytes(&bytes, Path::new("c")).unwrap(), img);
        assert!(image_from_bytes(&bytes[..bytes.len() - 1], Path::new("c")).is_err());
    }

    #[test]
    fn off_diagonal_mean_skips_diagonal() {
        let m = vec![vec![100.0, 1.0], vec![3.0, 100.0]];
        assert_eq!(off_diagonal_mean(&m), 2.0);
    }
}
