//! Staged experiment pipeline behind the CLI: one seeded configuration
//! drives data generation, source training, crop alignment, target/
//! baseline training and closed-loop evaluation into a content-addressed
//! run directory. Rerunning any stage from the same config reproduces its
//! artifacts byte for byte.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    balance_steering, collect_expert, collect_recovery, for_each_sample, read_container,
    write_container, Domain, Histogram, Sample, WeavePath,
};
use crate::error::{Error, Result};
use crate::eval::{
    build_report, drive_course, trajectory_from_csv, trajectory_to_csv, DrivePolicy, EvalConfig,
    MetricsReport, PolicyKind, Trajectory,
};
use crate::imageio::Image;
use crate::model::{
    grad_check, load_checkpoint, save_checkpoint, Checkpoint, NetworkConfig, NetworkParams,
    HEAD_TARGET_STEER,
};
use crate::nn::AdamHyper;
use crate::sim::{
    expert_steer, generate_track, CourseProfile, CourseSpec, DomainStyle, ExpertParams,
    OffroadTexture, SimConfig, StyleConfig, Track, VehicleState,
};
use crate::tensor::Tensor;
use crate::train::{
    precompute_target_features, quantize_input, train_full_network, train_target_head, GateMode,
    JointMode, TrainOptions, TrainSample,
};
use crate::transfer::{
    align_crop_search, crop_resize, CropGrid, CropRect, GateParams,
};
use crate::util::{derive_seed, derive_seed_n, fnv1a64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StylesConfig {
    pub source: StyleConfig,
    pub target: StyleConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTrainConfig {
    pub cycles: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatesConfig {
    pub training: GateParams,
    pub driving: GateParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSearchConfig {
    /// Horizontal inset bound/step as fractions of frame width.
    pub da_max: f64,
    pub da_step: f64,
    /// Vertical inset bound/step as fractions of the bottom-half height.
    pub db_max: f64,
    pub db_step: f64,
    pub min_frames: usize,
}

impl Default for CropSearchConfig {
    fn default() -> Self {
        CropSearchConfig {
            da_max: 0.25,
            da_step: 0.02,
            db_max: 0.40,
            db_step: 0.02,
            min_frames: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetsConfig {
    pub source_profiles: Vec<CourseProfile>,
    pub target_profiles: Vec<CourseProfile>,
    /// Weaving pre-defined paths driven per source track in addition to
    /// the centered lap.
    pub source_weaves: Vec<WeavePath>,
    pub histogram_bins: usize,
    pub source_cap_ratio: f64,
    pub target_cap_ratio: f64,
    /// Recovery start offsets in LDL units; both signs are used.
    pub recovery_ldls: Vec<f64>,
    /// Recovery start heading errors, radians.
    pub recovery_headings: Vec<f64>,
    /// Planted LDLs of the labeled alignment frames.
    pub alignment_ldls: Vec<f64>,
    /// Arc positions per alignment track.
    pub alignment_positions: usize,
}

impl Default for DatasetsConfig {
    fn default() -> Self {
        DatasetsConfig {
            source_profiles: vec![
                CourseProfile::StraightStyled,
                CourseProfile::Gentle,
                CourseProfile::Mixed,
                CourseProfile::Mixed,
                CourseProfile::MostlySharp,
                CourseProfile::MostlySharp,
            ],
            target_profiles: vec![
                CourseProfile::StraightStyled,
                CourseProfile::StraightStyled,
                CourseProfile::StraightStyled,
                CourseProfile::Gentle,
                CourseProfile::Gentle,
                CourseProfile::Gentle,
                CourseProfile::Gentle,
                CourseProfile::StraightStyled,
            ],
            source_weaves: vec![
                WeavePath {
                    amplitude_m: 1.3,
                    wavelength_m: 36.0,
                },
                WeavePath {
                    amplitude_m: 0.8,
                    wavelength_m: 55.0,
                },
            ],
            histogram_bins: 41,
            source_cap_ratio: 2.0,
            target_cap_ratio: 6.0,
            recovery_ldls: vec![0.15, 0.3, 0.45, 0.6, 0.75, 0.9],
            recovery_headings: vec![-0.35, -0.25, -0.12, 0.0, 0.12, 0.25, 0.35],
            alignment_ldls: vec![-0.8, -0.6, -0.4, -0.2, 0.0, 0.2, 0.4, 0.6, 0.8],
            alignment_positions: 18,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub courses: Vec<u8>,
    #[serde(flatten)]
    pub eval: EvalConfig,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            courses: vec![1, 2, 3, 4],
            eval: EvalConfig::default(),
        }
    }
}

/// The one experiment configuration. Hashing its canonical serialization
/// names the run directory, so artifacts are content-addressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub master_seed: u64,
    pub sim: SimConfig,
    pub expert: ExpertParams,
    pub styles: StylesConfig,
    pub network: NetworkConfig,
    pub optimizer: AdamHyper,
    pub lambda1: f32,
    pub train_source: StageTrainConfig,
    pub train_target: StageTrainConfig,
    pub train_baseline: StageTrainConfig,
    pub gates: GatesConfig,
    pub crop_search: CropSearchConfig,
    pub datasets: DatasetsConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 20260808,
            sim: SimConfig::default(),
            expert: ExpertParams::default(),
            styles: StylesConfig {
                source: default_source_style(),
                target: default_target_style(),
            },
            network: NetworkConfig::default(),
            optimizer: AdamHyper::default(),
            lambda1: 1.0,
            train_source: StageTrainConfig {
                cycles: 45,
                batch_size: 16,
                val_fraction: 0.05,
            },
            train_target: StageTrainConfig {
                cycles: 45,
                batch_size: 16,
                val_fraction: 0.05,
            },
            train_baseline: StageTrainConfig {
                cycles: 30,
                batch_size: 16,
                val_fraction: 0.05,
            },
            gates: GatesConfig {
                training: GateParams::desk_training(),
                driving: GateParams::desk_driving(),
            },
            crop_search: CropSearchConfig::default(),
            datasets: DatasetsConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

/// Source camera: 160x80, 60 degree FOV, square pixels, principal point
/// centered, 1.2 m mount.
pub fn default_source_style() -> StyleConfig {
    StyleConfig {
        width: 160,
        height: 80,
        hfov_deg: 60.0,
        pixel_aspect: 1.0,
        cy_offset_px: 0.0,
        cam_height_m: 1.2,
        far_clip_m: 60.0,
        road_rgb: vec![[70, 70, 74]],
        line_rgb: [235, 235, 235],
        line_width_m: 0.15,
        line_dash: Some((12.0, 0.5)),
        offroad: OffroadTexture::Speckle {
            rgb: [88, 118, 72],
            amplitude: 10,
        },
        horizon_rgb: [150, 160, 170],
        sky_rgb: [170, 200, 230],
        skyline: None,
        noise_amp: 2,
        shoulder_m: 0.25,
    }
}

/// Target camera: 256x144, wider FOV and a letterboxed principal point,
/// so the optimal crop insets are (15.36, 14.4) px — deliberately off the
/// (0, 0) cell of the alignment grid.
pub fn default_target_style() -> StyleConfig {
    StyleConfig {
        width: 256,
        height: 144,
        hfov_deg: 66.53614655020037,
        pixel_aspect: 1.0227272727272727,
        cy_offset_px: 14.4,
        cam_height_m: 1.2,
        far_clip_m: 60.0,
        // asphalt default plus cement / tunnel / worn variants used by
        // the surface schedule of styled courses.
        road_rgb: vec![
            [52, 50, 54],
            [122, 120, 112],
            [36, 34, 40],
            [84, 62, 52],
        ],
        line_rgb: [220, 205, 90],
        line_width_m: 0.25,
        line_dash: Some((12.0, 0.5)),
        offroad: OffroadTexture::Flat { rgb: [110, 92, 66] },
        horizon_rgb: [140, 135, 150],
        sky_rgb: [188, 196, 224],
        // Distant scenery above the horizon; only crops that reach past
        // the letterboxed horizon see it.
        skyline: Some((0.08, [96, 88, 104], 38)),
        noise_amp: 2,
        shoulder_m: 0.25,
    }
}

/// Expected optimal crop insets implied by two camera configs: where the
/// target crop reproduces the source camera's ray bundle exactly.
pub fn planted_crop_truth(source: &StyleConfig, target: &StyleConfig) -> (f64, f64) {
    let cam_s = source.camera();
    let cam_t = target.camera();
    // Tangents of the source bottom-half edges.
    let t_top = (source.height as f64 / 2.0 - cam_s.cy) / cam_s.fy;
    let da = target.width as f64 / 2.0
        - cam_t.fx * (source.width as f64 / 2.0) / cam_s.fx;
    let db = cam_t.cy + cam_t.fy * t_top - target.height as f64 / 2.0;
    (da, db)
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Config(format!("config file not found: {}", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Self::from_toml(&text)
    }

    /// 16-hex content hash of the canonical serialization.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.to_toml().as_bytes()))
    }

    pub fn source_style(&self) -> DomainStyle {
        self.styles.source.clone().build()
    }

    pub fn target_style(&self) -> DomainStyle {
        self.styles.target.clone().build()
    }

    fn train_opts(&self, stage: &StageTrainConfig, tag: &str) -> TrainOptions {
        TrainOptions {
            cycles: stage.cycles,
            batch_size: stage.batch_size,
            val_fraction: stage.val_fraction,
            hyper: self.optimizer,
            seed: derive_seed(self.master_seed, &[tag]),
        }
    }
}

/// Layout of one run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(out_root: &Path, hash: &str) -> Self {
        RunPaths {
            root: out_root.join("runs").join(hash),
        }
    }

    pub fn datasets(&self) -> PathBuf {
        self.root.join("datasets")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn alignment(&self) -> PathBuf {
        self.root.join("alignment")
    }
    pub fn trajectories(&self) -> PathBuf {
        self.root.join("trajectories")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn source_container(&self) -> PathBuf {
        self.datasets().join("source.ldset")
    }
    pub fn target_container(&self) -> PathBuf {
        self.datasets().join("target.ldset")
    }
    pub fn align_container(&self) -> PathBuf {
        self.datasets().join("align.ldset")
    }
    pub fn source_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("source.ckpt")
    }
    pub fn proposed_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("proposed.ckpt")
    }
    pub fn baseline_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("baseline.ckpt")
    }
    pub fn crop_json(&self) -> PathBuf {
        self.alignment().join("crop.json")
    }

    /// Exclusive lock for the run directory; released on drop.
    pub fn lock(&self) -> Result<RunLock> {
        fs::create_dir_all(&self.root)?;
        let path = self.root.join(".lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = write!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::LockHeld(path.display().to_string()))
            }
            Err(e) => Err(Error::Io(e)),
        }
    }

    /// Persist the resolved config next to the artifacts.
    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        fs::write(self.root.join("config.toml"), cfg.to_toml())?;
        Ok(())
    }
}

pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn histogram_csv(before: &Histogram, after: &Histogram) -> String {
    let mut out = String::from("bin_center,count_before,count_after\n");
    for i in 0..before.bin_centers.len() {
        out.push_str(&format!(
            "{:?},{},{}\n",
            before.bin_centers[i], before.counts[i], after.counts[i]
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct GenDataSummary {
    pub source_samples: usize,
    pub target_samples: usize,
    pub alignment_frames: usize,
    pub recovery_episodes: u32,
    pub recovery_dropped: u32,
    /// Condition 1: post-balance max/median bin ratio per domain.
    pub source_hist_ratio: f64,
    pub target_hist_ratio: f64,
    /// Condition 2: recovery coverage of |ldl| > 0.5, per sign.
    pub recovery_high_ldl_pos: usize,
    pub recovery_high_ldl_neg: usize,
}

fn hist_ratio(h: &Histogram) -> f64 {
    let mut nonempty: Vec<u64> = h.counts.iter().copied().filter(|&c| c > 0).collect();
    if nonempty.is_empty() {
        return 0.0;
    }
    nonempty.sort_unstable();
    let median = nonempty[nonempty.len() / 2];
    *nonempty.last().unwrap() as f64 / median as f64
}

/// Stage 1: build the source dataset (expert laps on varied tracks plus
/// the recovery grid, balanced), the target dataset (expert laps on
/// straight/gentle tracks, lightly balanced) and the labeled alignment
/// frames.
pub fn gen_data(cfg: &RunConfig, paths: &RunPaths) -> Result<GenDataSummary> {
    fs::create_dir_all(paths.datasets())?;
    let source_style = cfg.source_style();
    let target_style = cfg.target_style();
    let seed = cfg.master_seed;

    // Source: expert laps.
    let source_tracks: Result<Vec<Track>> = cfg
        .datasets
        .source_profiles
        .iter()
        .enumerate()
        .map(|(i, p)| generate_track(*p, derive_seed_n(seed, &["source_track"], i as u64), &cfg.sim))
        .collect();
    let source_tracks = source_tracks?;
    let mut source_samples = collect_expert(
        &source_tracks,
        &source_style,
        &cfg.sim,
        &cfg.expert,
        Domain::Source,
        derive_seed(seed, &["collect", "source"]),
        0,
    )?;

    // Weaving pre-defined paths widen the steering histogram and sweep
    // the LDL labels across the lane.
    for (wi, weave) in cfg.datasets.source_weaves.iter().enumerate() {
        source_samples.extend(crate::data::collect_expert_path(
            &source_tracks,
            &source_style,
            &cfg.sim,
            &cfg.expert,
            Domain::Source,
            derive_seed_n(seed, &["collect", "weave"], wi as u64),
            1_000 * (wi as u32 + 1),
            Some(*weave),
        )?);
    }

    // Source: recovery grid, both offset signs.
    let mut recovery_ldls: Vec<f64> = Vec::new();
    for &l in &cfg.datasets.recovery_ldls {
        recovery_ldls.push(l);
        recovery_ldls.push(-l);
    }
    // Dedicated low-curvature tracks guarantee enough recovery runway in
    // addition to whatever straight stretches the lap tracks offer.
    let mut recovery_tracks = source_tracks.clone();
    for i in 0..2u64 {
        recovery_tracks.push(generate_track(
            CourseProfile::Gentle,
            derive_seed_n(seed, &["recovery_track"], i),
            &cfg.sim,
        )?);
    }
    let recovery = collect_recovery(
        &recovery_tracks,
        &source_style,
        &cfg.sim,
        &cfg.expert,
        &recovery_ldls,
        &cfg.datasets.recovery_headings,
        Domain::Source,
        derive_seed(seed, &["collect", "recovery"]),
        10_000,
    )?;
    let recovery_high_pos = recovery
        .samples
        .iter()
        .filter(|s| s.ldl > 0.5)
        .count();
    let recovery_high_neg = recovery
        .samples
        .iter()
        .filter(|s| s.ldl < -0.5)
        .count();
    source_samples.extend(recovery.samples);

    let source_balanced = balance_steering(
        source_samples,
        cfg.datasets.histogram_bins,
        cfg.datasets.source_cap_ratio,
        derive_seed(seed, &["balance", "source"]),
    )?;
    write_container(&paths.source_container(), &source_balanced.samples)?;
    fs::write(
        paths.datasets().join("histogram_source.csv"),
        histogram_csv(&source_balanced.before, &source_balanced.after),
    )?;

    // Target: expert laps only (no recovery), lightly balanced.
    let target_tracks: Result<Vec<Track>> = cfg
        .datasets
        .target_profiles
        .iter()
        .enumerate()
        .map(|(i, p)| generate_track(*p, derive_seed_n(seed, &["target_track"], i as u64), &cfg.sim))
        .collect();
    let target_tracks = target_tracks?;
    let target_samples = collect_expert(
        &target_tracks,
        &target_style,
        &cfg.sim,
        &cfg.expert,
        Domain::Target,
        derive_seed(seed, &["collect", "target"]),
        20_000,
    )?;
    let target_balanced = balance_steering(
        target_samples,
        cfg.datasets.histogram_bins,
        cfg.datasets.target_cap_ratio,
        derive_seed(seed, &["balance", "target"]),
    )?;
    write_container(&paths.target_container(), &target_balanced.samples)?;
    fs::write(
        paths.datasets().join("histogram_target.csv"),
        histogram_csv(&target_balanced.before, &target_balanced.after),
    )?;

    // Labeled alignment frames: planted offsets across two target tracks.
    let align_tracks = [
        generate_track(
            CourseProfile::Gentle,
            derive_seed_n(seed, &["align_track"], 0),
            &cfg.sim,
        )?,
        generate_track(
            CourseProfile::StraightStyled,
            derive_seed_n(seed, &["align_track"], 1),
            &cfg.sim,
        )?,
    ];
    let mut align_samples = Vec::new();
    let mut episode = 30_000u32;
    for track in &align_tracks {
        for pos in 0..cfg.datasets.alignment_positions {
            let s = 40.0
                + (track.length - 80.0) * pos as f64 / cfg.datasets.alignment_positions as f64;
            for &ldl in &cfg.datasets.alignment_ldls {
                let offset = ldl * track.lane_width / 2.0;
                let (x, y, heading) = track.pose_at(s, offset);
                let state = VehicleState::at(x, y, heading, cfg.sim.speed_ms());
                let frame_seed = derive_seed_n(seed, &["align_frame"], episode as u64);
                let (image, _) = crate::sim::render(track, &state, &target_style, frame_seed);
                let (cmd, _) = expert_steer(track, &state, &cfg.expert, &cfg.sim.vehicle, None);
                align_samples.push(Sample {
                    image,
                    steering: cmd as f32,
                    ldl: ldl as f32,
                    domain: Domain::Target,
                    episode,
                    tick: 0,
                });
                episode += 1;
            }
        }
    }
    write_container(&paths.align_container(), &align_samples)?;

    Ok(GenDataSummary {
        source_samples: source_balanced.samples.len(),
        target_samples: target_balanced.samples.len(),
        alignment_frames: align_samples.len(),
        recovery_episodes: recovery.episodes,
        recovery_dropped: recovery.dropped,
        source_hist_ratio: hist_ratio(&source_balanced.after),
        target_hist_ratio: hist_ratio(&target_balanced.after),
        recovery_high_ldl_pos: recovery_high_pos,
        recovery_high_ldl_neg: recovery_high_neg,
    })
}

/// Container -> training samples at network-input resolution (crop,
/// resize, quantize). Raw frames are dropped as they stream through.
pub fn load_train_samples(
    path: &Path,
    rect: &CropRect,
    network: &NetworkConfig,
) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    let mut err: Option<Error> = None;
    for_each_sample(path, |s| {
        if err.is_some() {
            return;
        }
        match crop_resize(&s.image, rect, &network.input) {
            Ok(t) => out.push(TrainSample {
                pixels: quantize_input(&t),
                steering: s.steering,
                ldl: s.ldl,
            }),
            Err(e) => err = Some(e),
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub samples: usize,
    pub cycles: usize,
    pub best_cycle: usize,
    pub best_val_loss: f64,
    pub final_train_loss: f64,
}

fn train_summary(log: &crate::train::TrainLog, samples: usize) -> TrainSummary {
    let best = &log.rows[log.best_cycle - 1];
    TrainSummary {
        samples,
        cycles: log.rows.len(),
        best_cycle: log.best_cycle,
        best_val_loss: best.val_loss,
        final_train_loss: log.rows.last().unwrap().train_loss,
    }
}

/// Stage 2: joint source training (steering + LDL), best-validation
/// checkpoint.
pub fn train_source(cfg: &RunConfig, paths: &RunPaths) -> Result<TrainSummary> {
    fs::create_dir_all(paths.checkpoints())?;
    fs::create_dir_all(paths.logs())?;
    let samples = load_train_samples(
        &paths.source_container(),
        &CropRect::IDENTITY,
        &cfg.network,
    )?;
    let outcome = train_full_network(
        &samples,
        cfg.network,
        JointMode::Joint {
            lambda1: cfg.lambda1,
        },
        &cfg.train_opts(&cfg.train_source, "train_source"),
    )?;
    save_checkpoint(&paths.source_checkpoint(), &outcome.params, &outcome.stats)?;
    fs::write(paths.logs().join("train_source.csv"), outcome.log.to_csv())?;
    Ok(train_summary(&outcome.log, samples.len()))
}

#[derive(Debug, Clone, Serialize)]
pub struct AlignSummary {
    pub best: CropRect,
    pub best_r: f64,
    pub origin_r: Option<f64>,
    pub cells: usize,
}

/// Stage 3: crop-alignment search against the labeled target frames.
pub fn align_crop(cfg: &RunConfig, paths: &RunPaths) -> Result<AlignSummary> {
    fs::create_dir_all(paths.alignment())?;
    let ckpt = load_checkpoint(&paths.source_checkpoint())?;
    let frames: Vec<(Image, f64)> = read_container(&paths.align_container())?
        .into_iter()
        .map(|s| (s.image, s.ldl as f64))
        .collect();
    let grid = CropGrid::from_fractions(
        cfg.styles.target.width,
        cfg.styles.target.height,
        cfg.crop_search.da_max,
        cfg.crop_search.da_step,
        cfg.crop_search.db_max,
        cfg.crop_search.db_step,
    );
    let result = align_crop_search(
        &ckpt.params,
        &ckpt.stats,
        &frames,
        &grid,
        cfg.crop_search.min_frames,
    )?;

    let mut csv = String::from("delta_a,delta_b,pearson_r\n");
    for cell in &result.cells {
        let r = cell.r.map(|r| format!("{r:?}")).unwrap_or_default();
        csv.push_str(&format!("{},{},{r}\n", cell.delta_a, cell.delta_b));
    }
    fs::write(paths.alignment().join("grid.csv"), csv)?;

    let chosen = serde_json::json!({
        "delta_a": result.best.delta_a,
        "delta_b": result.best.delta_b,
        "base_row": CropRect::base_row(cfg.styles.target.height),
        "pearson_r": result.best_r,
    });
    fs::write(
        paths.crop_json(),
        serde_json::to_string_pretty(&chosen).unwrap(),
    )?;

    let origin_r = result
        .cells
        .iter()
        .find(|c| c.delta_a == 0 && c.delta_b == 0)
        .and_then(|c| c.r);
    Ok(AlignSummary {
        best: result.best,
        best_r: result.best_r,
        origin_r,
        cells: result.cells.len(),
    })
}

pub fn read_crop_json(paths: &RunPaths) -> Result<CropRect> {
    let text = fs::read_to_string(paths.crop_json()).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: paths.crop_json().display().to_string(),
                produced_by: "align-crop".into(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("crop.json: {e}")))?;
    Ok(CropRect {
        delta_a: v["delta_a"].as_u64().unwrap_or(0) as usize,
        delta_b: v["delta_b"].as_u64().unwrap_or(0) as usize,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetTrainSummary {
    pub proposed: TrainSummary,
    pub baseline: TrainSummary,
    pub mean_gate: f64,
}

/// Stage 4: gated target-head training on frozen source features, plus
/// the from-scratch baseline network on the same data.
pub fn train_target(cfg: &RunConfig, paths: &RunPaths) -> Result<TargetTrainSummary> {
    fs::create_dir_all(paths.checkpoints())?;
    fs::create_dir_all(paths.logs())?;
    let source = load_checkpoint(&paths.source_checkpoint())?;
    let crop = read_crop_json(paths)?;
    let samples = load_train_samples(&paths.target_container(), &crop, &cfg.network)?;

    // Gated head training; conv stack and source heads stay frozen.
    let features = precompute_target_features(&source.params, &samples, &source.stats)?;
    let head_out = train_target_head(
        &source.params,
        &features,
        GateMode::Logistic(cfg.gates.training),
        &cfg.train_opts(&cfg.train_target, "train_target"),
    )?;
    let mut proposed = source.params.clone();
    proposed.heads[HEAD_TARGET_STEER] = head_out.head;
    save_checkpoint(&paths.proposed_checkpoint(), &proposed, &source.stats)?;
    fs::write(paths.logs().join("train_target.csv"), head_out.log.to_csv())?;

    // Baseline: full network from scratch on the target labels.
    let bl_out = train_full_network(
        &samples,
        cfg.network,
        JointMode::SteerOnly,
        &cfg.train_opts(&cfg.train_baseline, "train_baseline"),
    )?;
    save_checkpoint(&paths.baseline_checkpoint(), &bl_out.params, &bl_out.stats)?;
    fs::write(paths.logs().join("train_baseline.csv"), bl_out.log.to_csv())?;

    let mean_gate = head_out.log.rows.last().and_then(|r| r.mean_gate).unwrap_or(0.0);
    Ok(TargetTrainSummary {
        proposed: train_summary(&head_out.log, samples.len()),
        baseline: train_summary(&bl_out.log, samples.len()),
        mean_gate,
    })
}

fn build_policy(
    kind: PolicyKind,
    cfg: &RunConfig,
    paths: &RunPaths,
    crop: &CropRect,
) -> Result<DrivePolicy> {
    let load = |p: &Path, produced_by: &str| -> Result<Checkpoint> {
        if !p.exists() {
            return Err(Error::MissingArtifact {
                path: p.display().to_string(),
                produced_by: produced_by.into(),
            });
        }
        load_checkpoint(p)
    };
    let policy = match kind {
        PolicyKind::Expert => DrivePolicy::expert(cfg.expert),
        PolicyKind::Bl => {
            let ck = load(&paths.baseline_checkpoint(), "train-target")?;
            DrivePolicy {
                kind,
                net: Some(ck.params),
                stats: Some(ck.stats),
                crop: *crop,
                gate_driving: cfg.gates.driving,
                expert: cfg.expert,
            }
        }
        PolicyKind::Sn => {
            let ck = load(&paths.source_checkpoint(), "train-source")?;
            DrivePolicy {
                kind,
                net: Some(ck.params),
                stats: Some(ck.stats),
                crop: *crop,
                gate_driving: cfg.gates.driving,
                expert: cfg.expert,
            }
        }
        PolicyKind::Prop1 | PolicyKind::Prop2 => {
            let ck = load(&paths.proposed_checkpoint(), "train-target")?;
            DrivePolicy {
                kind,
                net: Some(ck.params),
                stats: Some(ck.stats),
                crop: *crop,
                gate_driving: cfg.gates.driving,
                expert: cfg.expert,
            }
        }
    };
    Ok(policy)
}

pub fn eval_course_track(cfg: &RunConfig, id: u8) -> Result<Track> {
    let spec = CourseSpec::course(id)?;
    generate_track(
        spec.profile,
        derive_seed_n(cfg.master_seed, &["eval_course"], id as u64),
        &cfg.sim,
    )
}

fn traj_filename(policy: &str, course: u8, run: usize) -> String {
    format!("{policy}_c{course}_r{run}.csv")
}

/// Stage 5: drive the requested policies around the requested courses,
/// writing trajectory CSVs, the report JSON and the two metric tables.
pub fn drive_eval(
    cfg: &RunConfig,
    paths: &RunPaths,
    kinds: &[PolicyKind],
    courses: &[u8],
) -> Result<MetricsReport> {
    fs::create_dir_all(paths.trajectories())?;
    fs::create_dir_all(paths.reports())?;
    let crop = if kinds.iter().any(|k| *k != PolicyKind::Expert) {
        read_crop_json(paths)?
    } else {
        CropRect::IDENTITY
    };
    let style = cfg.target_style();

    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut ground_truth: Vec<(u8, Vec<(f64, f64)>)> = Vec::new();

    for &course in courses {
        let track = eval_course_track(cfg, course)?;
        fs::write(
            paths.trajectories().join(format!("course{course}.csv")),
            track.to_csv(),
        )?;

        // Ground truth: the expert's centered closed-loop run.
        let gt_policy = DrivePolicy::expert(cfg.expert);
        let gt_eval = EvalConfig {
            runs: 1,
            start_ldls: vec![0.0],
            ..cfg.evaluation.eval.clone()
        };
        let gt_runs = drive_course(
            &gt_policy,
            &track,
            &style,
            &cfg.sim,
            &gt_eval,
            course,
            derive_seed(cfg.master_seed, &["gt"]),
        )?;
        let gt = &gt_runs[0];
        if !gt.completed {
            return Err(Error::ExpertLeftCorridor(format!(
                "ground-truth run failed on course {course}"
            )));
        }
        fs::write(
            paths.trajectories().join(format!("gt_c{course}.csv")),
            trajectory_to_csv(gt),
        )?;
        ground_truth.push((course, gt.points.iter().map(|p| (p.x, p.y)).collect()));

        for &kind in kinds {
            let policy = build_policy(kind, cfg, paths, &crop)?;
            let runs = drive_course(
                &policy,
                &track,
                &style,
                &cfg.sim,
                &cfg.evaluation.eval,
                course,
                derive_seed(cfg.master_seed, &["drive"]),
            )?;
            for t in &runs {
                fs::write(
                    paths
                        .trajectories()
                        .join(traj_filename(&t.policy, course, t.run)),
                    trajectory_to_csv(t),
                )?;
            }
            trajectories.extend(runs);
        }
    }

    let report = build_report(&trajectories, &ground_truth, cfg.evaluation.eval.vyr_l)?;
    write_report_files(paths, &report)?;
    Ok(report)
}

fn write_report_files(paths: &RunPaths, report: &MetricsReport) -> Result<()> {
    fs::create_dir_all(paths.reports())?;
    fs::write(
        paths.reports().join("report.json"),
        serde_json::to_string_pretty(report).unwrap(),
    )?;
    fs::write(paths.reports().join("vyr_table.csv"), report.table_csv("vyr"))?;
    fs::write(
        paths.reports().join("d2gt_table.csv"),
        report.table_csv("d2gt"),
    )?;
    Ok(())
}

/// Stage 6: rebuild the report purely from persisted trajectory CSVs.
/// Byte-identical to the report drive-eval wrote.
pub fn rebuild_report(cfg: &RunConfig, paths: &RunPaths) -> Result<MetricsReport> {
    let dir = paths.trajectories();
    if !dir.exists() {
        return Err(Error::MissingArtifact {
            path: dir.display().to_string(),
            produced_by: "drive-eval".into(),
        });
    }
    let mut names: Vec<String> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();

    let mut trajectories = Vec::new();
    let mut ground_truth: Vec<(u8, Vec<(f64, f64)>)> = Vec::new();
    for name in names {
        if !name.ends_with(".csv") || name.starts_with("course") {
            continue;
        }
        let t = trajectory_from_csv(&fs::read_to_string(dir.join(&name))?)?;
        if name.starts_with("gt_c") {
            ground_truth.push((t.course, t.points.iter().map(|p| (p.x, p.y)).collect()));
        } else {
            trajectories.push(t);
        }
    }
    if trajectories.is_empty() {
        return Err(Error::MissingArtifact {
            path: dir.join("<policy>_c<course>_r<run>.csv").display().to_string(),
            produced_by: "drive-eval".into(),
        });
    }
    let report = build_report(&trajectories, &ground_truth, cfg.evaluation.eval.vyr_l)?;
    write_report_files(paths, &report)?;
    Ok(report)
}

/// Finite-difference gradient verification on the miniature three-head
/// network: the number reported is the max relative error over all
/// parameters and inputs.
pub fn run_grad_check(seed: u64, inputs: usize, epsilon: f64) -> Result<f64> {
    let config = NetworkConfig::verification();
    let params = NetworkParams::<f64>::init(config, derive_seed(seed, &["gradcheck"]))?;
    let mut worst = 0.0f64;
    for i in 0..inputs {
        let img = random_unit_image(&config, derive_seed_n(seed, &["gradcheck_input"], i as u64));
        let targets = [0.3, -0.2, 0.1];
        let err = grad_check(&params, &img, targets, epsilon)?;
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

fn random_unit_image(config: &NetworkConfig, seed: u64) -> Tensor<f64> {
    use rand_chacha::rand_core::Rng;
    let mut rng = crate::util::rng_from(seed);
    let data: Vec<f64> = (0..config.input.pixel_count())
        .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0)
        .collect();
    Tensor::from_vec(&config.input.shape(), data).unwrap()
}

/// All stages in order.
pub fn full_pipeline(
    cfg: &RunConfig,
    paths: &RunPaths,
    kinds: &[PolicyKind],
    courses: &[u8],
) -> Result<MetricsReport> {
    gen_data(cfg, paths)?;
    train_source(cfg, paths)?;
    align_crop(cfg, paths)?;
    train_target(cfg, paths)?;
    drive_eval(cfg, paths, kinds, courses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        let mut c = RunConfig::default();
        c.master_seed += 1;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn planted_truth_matches_designed_style() {
        let (da, db) = planted_crop_truth(&default_source_style(), &default_target_style());
        assert!((da - 15.36).abs() < 1e-9, "da {da}");
        assert!((db - 14.4).abs() < 1e-9, "db {db}");
    }

    #[test]
    fn lock_excludes_second_holder() {
        let dir = std::env::temp_dir().join(format!("lanekeep-lock-{}", std::process::id()));
        let paths = RunPaths {
            root: dir.clone(),
        };
        let lock = paths.lock().unwrap();
        assert!(matches!(paths.lock(), Err(Error::LockHeld(_))));
        drop(lock);
        let lock2 = paths.lock().unwrap();
        drop(lock2);
        let _ = fs::remove_dir_all(&dir);
    }
}
