//! Dataset construction and persistence: expert and recovery episode
//! collection, steering-histogram balancing, normalization statistics,
//! train/validation splitting and the on-disk sample container.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::scalar::Scalar;
use crate::sim::{
    expert_steer, lateral_offset, render, speed_control, step_vehicle, DomainStyle, ExpertParams,
    SimConfig, Track, VehicleState,
};
use crate::tensor::Tensor;
use crate::util::{derive_seed, derive_seed_n, shuffled_indices};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn code(&self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Domain::Source),
            1 => Ok(Domain::Target),
            other => Err(Error::InvalidParameter(format!(
                "unknown domain code {other}"
            ))),
        }
    }
}

/// One observation: frame at style resolution, expert steering command,
/// exact simulator LDL, provenance tags. Target-domain LDL labels exist
/// only to drive the crop-alignment search, never a target training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub steering: f32,
    pub ldl: f32,
    pub domain: Domain,
    pub episode: u32,
    pub tick: u32,
}

/// Per-channel normalization statistics of a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Accumulate per-channel mean/std over [0,1] HWC tensors. Population
/// variance; errors when any channel is constant.
pub fn compute_stats<'a, I>(images: I) -> Result<DatasetStats>
where
    I: IntoIterator<Item = &'a Tensor<f32>>,
{
    let mut n: u64 = 0;
    let mut sum = [0.0f64; 16];
    let mut sum_sq = [0.0f64; 16];
    let mut channels = 0usize;
    for img in images {
        let c = *img.shape().last().unwrap();
        channels = c;
        assert!(c <= 16, "channel accumulator limit");
        for px in img.data().chunks_exact(c) {
            for (ch, &v) in px.iter().enumerate() {
                sum[ch] += v as f64;
                sum_sq[ch] += v as f64 * v as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("compute_stats: no pixels".into()));
    }
    let mut mean = Vec::with_capacity(channels);
    let mut std = Vec::with_capacity(channels);
    for ch in 0..channels {
        let m = sum[ch] / n as f64;
        let var = (sum_sq[ch] / n as f64 - m * m).max(0.0);
        if var <= 0.0 {
            return Err(Error::ZeroVariance { channel: ch });
        }
        mean.push(m as f32);
        std.push(var.sqrt() as f32);
    }
    Ok(DatasetStats { mean, std })
}

/// Accumulate stats straight from 8-bit interleaved pixel buffers
/// (values scaled to [0,1] as `v / 255`).
pub fn stats_from_u8<'a, I>(buffers: I, channels: usize) -> Result<DatasetStats>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut n: u64 = 0;
    let mut sum = vec![0.0f64; channels];
    let mut sum_sq = vec![0.0f64; channels];
    for buf in buffers {
        for px in buf.chunks_exact(channels) {
            for (ch, &v) in px.iter().enumerate() {
                let x = v as f64 / 255.0;
                sum[ch] += x;
                sum_sq[ch] += x * x;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("stats_from_u8: no pixels".into()));
    }
    let mut mean = Vec::with_capacity(channels);
    let mut std = Vec::with_capacity(channels);
    for ch in 0..channels {
        let m = sum[ch] / n as f64;
        let var = (sum_sq[ch] / n as f64 - m * m).max(0.0);
        if var <= 0.0 {
            return Err(Error::ZeroVariance { channel: ch });
        }
        mean.push(m as f32);
        std.push(var.sqrt() as f32);
    }
    Ok(DatasetStats { mean, std })
}

/// `(pixel - mean) / std` per channel.
pub fn apply_normalization<T: Scalar>(image: &Tensor<T>, stats: &DatasetStats) -> Result<Tensor<T>> {
    let c = *image.shape().last().unwrap();
    if c != stats.mean.len() {
        return Err(Error::ShapeMismatch {
            context: "apply_normalization".into(),
            expected: format!("{} channels", stats.mean.len()),
            got: format!("{c}"),
        });
    }
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for (ch, v) in px.iter_mut().enumerate() {
            *v = (*v - T::from_f32(stats.mean[ch]).unwrap())
                / T::from_f32(stats.std[ch]).unwrap();
        }
    }
    Ok(out)
}

/// Inverse of [`apply_normalization`].
pub fn undo_normalization<T: Scalar>(image: &Tensor<T>, stats: &DatasetStats) -> Result<Tensor<T>> {
    let c = *image.shape().last().unwrap();
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for (ch, v) in px.iter_mut().enumerate() {
            *v = *v * T::from_f32(stats.std[ch]).unwrap()
                + T::from_f32(stats.mean[ch]).unwrap();
        }
    }
    Ok(out)
}

/// Sinusoidal lateral displacement of the expert's pre-defined path,
/// used to widen the steering histogram and the LDL label coverage of
/// collected laps.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeavePath {
    pub amplitude_m: f64,
    pub wavelength_m: f64,
}

impl WeavePath {
    fn offset_at(&self, s: f64) -> f64 {
        self.amplitude_m * (2.0 * std::f64::consts::PI * s / self.wavelength_m).sin()
    }
}

/// Closed-loop expert collection over a set of tracks at the simulator
/// rate. Episode ids start at `episode_base` and increase per track.
pub fn collect_expert(
    tracks: &[Track],
    style: &DomainStyle,
    cfg: &SimConfig,
    ep: &ExpertParams,
    domain: Domain,
    seed: u64,
    episode_base: u32,
) -> Result<Vec<Sample>> {
    collect_expert_path(tracks, style, cfg, ep, domain, seed, episode_base, None)
}

/// Expert laps along a possibly weaving pre-defined path. The recorded
/// steering follows the path; the recorded LDL is always the true
/// distance to the lane center.
#[allow(clippy::too_many_arguments)]
pub fn collect_expert_path(
    tracks: &[Track],
    style: &DomainStyle,
    cfg: &SimConfig,
    ep: &ExpertParams,
    domain: Domain,
    seed: u64,
    episode_base: u32,
    weave: Option<WeavePath>,
) -> Result<Vec<Sample>> {
    let offset_at = move |s: f64| weave.map(|w| w.offset_at(s)).unwrap_or(0.0);
    let mut samples = Vec::new();
    for (ti, track) in tracks.iter().enumerate() {
        let episode = episode_base + ti as u32;
        let (x, y, yaw) = track.pose_at(2.0, offset_at(2.0));
        let mut state = VehicleState::at(x, y, yaw, cfg.speed_ms());
        let mut hint = None;
        let max_ticks = (3.0 * track.length / cfg.speed_ms() / cfg.dt) as u32;
        for tick in 0..max_ticks {
            let (loc, ldl, flagged) = lateral_offset(track, state.x, state.y, hint);
            if flagged {
                return Err(Error::ExpertLeftCorridor(format!(
                    "episode {episode} tick {tick}: offset {:.2} m",
                    loc.offset
                )));
            }
            if loc.s >= track.length - 2.0 {
                break;
            }
            let frame_seed = derive_seed_n(seed, &["frame", &episode.to_string()], tick as u64);
            let (image, _) = render(track, &state, style, frame_seed);
            let (cmd, idx) =
                crate::sim::expert::expert_steer_path(track, &state, ep, &cfg.vehicle, hint, &offset_at);
            hint = Some(idx);
            samples.push(Sample {
                image,
                steering: cmd as f32,
                ldl: ldl as f32,
                domain,
                episode,
                tick,
            });
            let accel = speed_control(&state, cfg.speed_ms(), &cfg.vehicle);
            state = step_vehicle(&state, cmd, accel, cfg.dt, &cfg.vehicle);
        }
    }
    Ok(samples)
}

/// Return-to-center collection: episodes start at planted lateral offsets
/// and heading errors, the expert drives back, recording stops after the
/// car holds |ldl| < 0.05 for one second. Episodes that fail to converge
/// within 30 s are dropped (counted in the report).
#[derive(Debug)]
pub struct RecoveryReport {
    pub samples: Vec<Sample>,
    pub episodes: u32,
    pub dropped: u32,
}

/// Start positions with a low-curvature runway ahead, so the expert can
/// settle inside the 0.05-LDL band (pure pursuit holds a residual offset
/// on tight bends). Tracks without such a stretch contribute none.
fn recovery_start_candidates(track: &Track, runway_m: f64, kappa_max: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut s = 30.0;
    while s + runway_m < track.length - 20.0 {
        let mut ok = true;
        let mut probe = s;
        while probe < s + runway_m {
            if track.point_at(probe).curvature.abs() > kappa_max {
                ok = false;
                break;
            }
            probe += 5.0;
        }
        if ok {
            out.push(s);
            s += 40.0;
        } else {
            s += 10.0;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn collect_recovery(
    tracks: &[Track],
    style: &DomainStyle,
    cfg: &SimConfig,
    ep: &ExpertParams,
    start_ldls: &[f64],
    heading_errors: &[f64],
    domain: Domain,
    seed: u64,
    episode_base: u32,
) -> Result<RecoveryReport> {
    let mut samples = Vec::new();
    let mut episode = episode_base;
    let mut dropped = 0u32;
    let mut episodes = 0u32;
    for track in tracks {
        let candidates = recovery_start_candidates(track, 110.0, 0.012);
        if candidates.is_empty() {
            continue;
        }
        let mut candidate_idx = 0usize;
        for &ldl0 in start_ldls {
            for &dh in heading_errors {
                episodes += 1;
                let start_s = candidates[candidate_idx % candidates.len()];
                candidate_idx += 1;
                let offset0 = ldl0 * track.lane_width / 2.0;
                let (x, y, heading) = track.pose_at(start_s, offset0);
                let mut state = VehicleState::at(x, y, heading + dh, cfg.speed_ms());
                let mut hint = None;
                let mut settled = 0u32;
                let mut converged = false;
                let mut episode_samples = Vec::new();
                let max_ticks = (30.0 / cfg.dt) as u32;
                for tick in 0..max_ticks {
                    let (loc, ldl, _) = lateral_offset(track, state.x, state.y, hint);
                    if loc.s >= track.length - 5.0 {
                        break;
                    }
                    let frame_seed =
                        derive_seed_n(seed, &["recovery", &episode.to_string()], tick as u64);
                    let (image, _) = render(track, &state, style, frame_seed);
                    let (cmd, idx) = expert_steer(track, &state, ep, &cfg.vehicle, hint);
                    hint = Some(idx);
                    episode_samples.push(Sample {
                        image,
                        steering: cmd as f32,
                        ldl: ldl as f32,
                        domain,
                        episode,
                        tick,
                    });
                    let accel = speed_control(&state, cfg.speed_ms(), &cfg.vehicle);
                    state = step_vehicle(&state, cmd, accel, cfg.dt, &cfg.vehicle);
                    if ldl.abs() < 0.05 {
                        settled += 1;
                        if settled as f64 * cfg.dt >= 1.0 {
                            converged = true;
                            break;
                        }
                    } else {
                        settled = 0;
                    }
                }
                if converged {
                    samples.extend(episode_samples);
                } else {
                    dropped += 1;
                }
                episode += 1;
            }
        }
    }
    Ok(RecoveryReport {
        samples,
        episodes,
        dropped,
    })
}

/// Steering histogram over [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_centers: Vec<f64>,
    pub counts: Vec<u64>,
}

pub fn steering_histogram(samples: &[Sample], bins: usize) -> Histogram {
    let mut counts = vec![0u64; bins];
    for s in samples {
        counts[bin_index(s.steering, bins)] += 1;
    }
    let bin_centers = (0..bins)
        .map(|i| -1.0 + (2.0 * i as f64 + 1.0) / bins as f64)
        .collect();
    Histogram {
        bin_centers,
        counts,
    }
}

fn bin_index(steering: f32, bins: usize) -> usize {
    let t = ((steering as f64 + 1.0) / 2.0 * bins as f64).floor() as isize;
    t.clamp(0, bins as isize - 1) as usize
}

#[derive(Debug)]
pub struct BalanceOutcome {
    pub samples: Vec<Sample>,
    pub before: Histogram,
    pub after: Histogram,
    pub cap: u64,
}

/// Per-bin capping at `cap_ratio` times the median non-empty bin count.
/// Removal is seeded-random within over-cap bins; the relative order of
/// surviving samples is preserved and bins at or below the cap are
/// untouched.
pub fn balance_steering(
    samples: Vec<Sample>,
    bins: usize,
    cap_ratio: f64,
    seed: u64,
) -> Result<BalanceOutcome> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("balance_steering".into()));
    }
    if cap_ratio < 1.0 {
        return Err(Error::InvalidParameter(format!(
            "cap_ratio must be >= 1, got {cap_ratio}"
        )));
    }
    let before = steering_histogram(&samples, bins);
    let mut nonempty: Vec<u64> = before.counts.iter().copied().filter(|&c| c > 0).collect();
    if nonempty.len() < 2 {
        return Err(Error::Unbalanceable(
            "all samples fall into a single steering bin".into(),
        ));
    }
    nonempty.sort_unstable();
    let median = nonempty[nonempty.len() / 2];
    let cap = ((cap_ratio * median as f64).floor() as u64).max(1);

    // Seeded keep-set per over-cap bin, original order preserved.
    let mut keep = vec![true; samples.len()];
    let mut bin_members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for (i, s) in samples.iter().enumerate() {
        bin_members[bin_index(s.steering, bins)].push(i);
    }
    for (b, members) in bin_members.iter().enumerate() {
        if members.len() as u64 <= cap {
            continue;
        }
        let order = shuffled_indices(members.len(), derive_seed_n(seed, &["balance"], b as u64));
        for &drop_pos in order.iter().skip(cap as usize) {
            keep[members[drop_pos]] = false;
        }
    }
    let samples: Vec<Sample> = samples
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect();
    let after = steering_histogram(&samples, bins);
    Ok(BalanceOutcome {
        samples,
        before,
        after,
        cap,
    })
}

/// Seeded shuffle, then split off `fraction` (at least one sample) for
/// validation. Returns (train, val) index lists.
pub fn split_train_val(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptyInput("split_train_val".into()));
    }
    let n_val = ((n as f64 * fraction).floor() as usize).max(1);
    if n_val >= n {
        return Err(Error::InvalidParameter(format!(
            "validation fraction {fraction} leaves no training data for n={n}"
        )));
    }
    let order = shuffled_indices(n, derive_seed(seed, &["split"]));
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

// --- container format -----------------------------------------------------
//
// magic   b"LDSET1"
// version u32 (= 1)
// domain  u8
// img     h u32, w u32, c u32
// count   u64
// record  episode u32, tick u32, steering f32, ldl f32, image bytes
// crc32   over everything above, little-endian, trailing

const MAGIC: &[u8; 6] = b"LDSET1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 6 + 4 + 1 + 12 + 8;

pub fn write_container(path: &Path, samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("write_container".into()));
    }
    let domain = samples[0].domain;
    let (w, h) = (samples[0].image.width, samples[0].image.height);
    for s in samples {
        if s.domain != domain {
            return Err(Error::DomainMismatch {
                expected: format!("{domain:?}").to_lowercase(),
                got: format!("{:?}", s.domain).to_lowercase(),
            });
        }
        if s.image.width != w || s.image.height != h {
            return Err(Error::ShapeMismatch {
                context: "container image dims".into(),
                expected: format!("{w}x{h}"),
                got: format!("{}x{}", s.image.width, s.image.height),
            });
        }
        if !s.steering.is_finite() || !s.ldl.is_finite() {
            return Err(Error::InvalidParameter(
                "non-finite label in sample".into(),
            ));
        }
    }

    let rec_len = 4 + 4 + 4 + 4 + w * h * 3;
    let mut buf = Vec::with_capacity(HEADER_LEN + samples.len() * rec_len + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(domain.code());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&3u32.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        buf.extend_from_slice(&s.episode.to_le_bytes());
        buf.extend_from_slice(&s.tick.to_le_bytes());
        buf.extend_from_slice(&s.steering.to_le_bytes());
        buf.extend_from_slice(&s.ldl.to_le_bytes());
        buf.extend_from_slice(&s.image.data);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct ContainerHeader {
    domain: Domain,
    height: usize,
    width: usize,
    count: u64,
}

fn read_header(bytes: &[u8], path: &Path) -> Result<ContainerHeader> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Truncated {
            reading: format!("container header of {}", path.display()),
        });
    }
    if &bytes[..6] != MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..6]).into_owned(),
        });
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let domain = Domain::from_code(bytes[10])?;
    let height = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[15..19].try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(bytes[19..23].try_into().unwrap()) as usize;
    if channels != 3 {
        return Err(Error::InvalidParameter(format!(
            "container declares {channels} channels, expected 3"
        )));
    }
    let count = u64::from_le_bytes(bytes[23..31].try_into().unwrap());
    Ok(ContainerHeader {
        domain,
        height,
        width,
        count,
    })
}

/// Stream records through a callback without retaining raw frames.
pub fn for_each_sample<F: FnMut(Sample)>(path: &Path, mut f: F) -> Result<ContainerInfo> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.display().to_string(),
                produced_by: "gen-data".into(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    let header = read_header(&bytes, path)?;
    let rec_len = 16 + header.width * header.height * 3;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < 4 {
        return Err(Error::Truncated {
            reading: "container checksum".into(),
        });
    }
    let (records, crc_bytes) = payload.split_at(payload.len() - 4);
    if records.len() % rec_len != 0 {
        return Err(Error::Truncated {
            reading: format!("container records of {}", path.display()),
        });
    }
    let found = (records.len() / rec_len) as u64;
    if found != header.count {
        return Err(Error::CountMismatch {
            declared: header.count,
            found,
        });
    }
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..bytes.len() - 4]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    for rec in records.chunks_exact(rec_len) {
        let episode = u32::from_le_bytes(rec[0..4].try_into().unwrap());
        let tick = u32::from_le_bytes(rec[4..8].try_into().unwrap());
        let steering = f32::from_le_bytes(rec[8..12].try_into().unwrap());
        let ldl = f32::from_le_bytes(rec[12..16].try_into().unwrap());
        if !steering.is_finite() || !ldl.is_finite() {
            return Err(Error::InvalidParameter(
                "non-finite label in container record".into(),
            ));
        }
        f(Sample {
            image: Image::from_raw(header.width, header.height, rec[16..].to_vec())?,
            steering,
            ldl,
            domain: header.domain,
            episode,
            tick,
        });
    }
    Ok(ContainerInfo {
        domain: header.domain,
        width: header.width,
        height: header.height,
        count: header.count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerInfo {
    pub domain: Domain,
    pub width: usize,
    pub height: usize,
    pub count: u64,
}

pub fn read_container(path: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for_each_sample(path, |s| out.push(s))?;
    Ok(out)
}
