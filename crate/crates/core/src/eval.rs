//! Closed-loop evaluation: drive trained policies around the four
//! courses, record trajectories, score them with yaw-rate variance (VYR)
//! and distance to the ground-truth trajectory (D2GT), and assemble the
//! comparison tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetStats;
use crate::error::{Error, Result};
use crate::model::{forward_all, NetworkParams};
use crate::sim::{
    expert_steer, lateral_offset, render, speed_control, step_vehicle, DomainStyle, ExpertParams,
    SimConfig, Track, VehicleState,
};
use crate::transfer::{blend_command, gate, CropRect, GateParams};
use crate::util::derive_seed_n;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    /// Pure-pursuit expert reading simulator state (the ground-truth
    /// generator).
    Expert,
    /// Network trained from scratch on the target dataset alone.
    Bl,
    /// Source network driving the target domain through the aligned crop.
    Sn,
    /// Target head on frozen source features.
    Prop1,
    /// Gated blend of the target and source steering heads.
    Prop2,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Expert => "expert",
            PolicyKind::Bl => "bl",
            PolicyKind::Sn => "sn",
            PolicyKind::Prop1 => "prop1",
            PolicyKind::Prop2 => "prop2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(PolicyKind::Expert),
            "bl" => Ok(PolicyKind::Bl),
            "sn" => Ok(PolicyKind::Sn),
            "prop1" => Ok(PolicyKind::Prop1),
            "prop2" => Ok(PolicyKind::Prop2),
            other => Err(Error::InvalidParameter(format!(
                "unknown policy '{other}' (expected bl, sn, prop1, prop2, expert)"
            ))),
        }
    }
}

/// A driveable policy: which command rule to apply plus the artifacts it
/// needs. Network policies carry their own normalization statistics and
/// the aligned crop.
pub struct DrivePolicy {
    pub kind: PolicyKind,
    pub net: Option<NetworkParams<f32>>,
    pub stats: Option<DatasetStats>,
    pub crop: CropRect,
    pub gate_driving: GateParams,
    pub expert: ExpertParams,
}

impl DrivePolicy {
    pub fn expert(expert: ExpertParams) -> Self {
        DrivePolicy {
            kind: PolicyKind::Expert,
            net: None,
            stats: None,
            crop: CropRect::IDENTITY,
            gate_driving: GateParams::desk_driving(),
            expert,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajPoint {
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub yaw_rate: f64,
    pub speed: f64,
    pub command: f64,
    pub ldl_hat: Option<f32>,
    pub gate_w: Option<f32>,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub policy: String,
    pub course: u8,
    pub run: usize,
    pub dt: f64,
    pub completed: bool,
    pub failure: Option<String>,
    pub points: Vec<TrajPoint>,
}

/// Closed-loop termination rules. A run fails when |offset| exceeds
/// `corridor_lanewidths` lane widths for `corridor_hold_s` seconds
/// straight, instantly when it exceeds `hard_off_m`, or on timeout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub runs: usize,
    /// Planted start offsets (LDL units), cycled per run.
    pub start_ldls: Vec<f64>,
    pub corridor_lanewidths: f64,
    pub corridor_hold_s: f64,
    pub hard_off_m: f64,
    /// VYR half-window; the window is `2l+1` samples.
    pub vyr_l: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            runs: 3,
            start_ldls: vec![0.25, 0.55, -0.55],
            corridor_lanewidths: 2.0,
            corridor_hold_s: 3.0,
            hard_off_m: 8.0,
            vyr_l: 5,
        }
    }
}

/// Sustained-excursion failure detector over the offset series.
#[derive(Debug, Clone)]
pub struct FailureDetector {
    corridor_m: f64,
    hold_ticks: u32,
    hard_m: f64,
    counter: u32,
}

impl FailureDetector {
    pub fn new(lane_width: f64, cfg: &EvalConfig, dt: f64) -> Self {
        FailureDetector {
            corridor_m: cfg.corridor_lanewidths * lane_width,
            hold_ticks: (cfg.corridor_hold_s / dt).round() as u32,
            hard_m: cfg.hard_off_m,
            counter: 0,
        }
    }

    /// Feed one |offset|; Some(reason) once the rule trips.
    pub fn step(&mut self, offset_abs: f64) -> Option<&'static str> {
        if offset_abs > self.hard_m {
            return Some("left_track");
        }
        if offset_abs > self.corridor_m {
            self.counter += 1;
            if self.counter >= self.hold_ticks {
                return Some("left_corridor");
            }
        } else {
            self.counter = 0;
        }
        None
    }
}

/// Drive one policy around one course `cfg.runs` times. Runs differ only
/// in their planted start offset and are independent, so they execute in
/// parallel and are returned in run order.
#[allow(clippy::too_many_arguments)]
pub fn drive_course(
    policy: &DrivePolicy,
    track: &Track,
    style: &DomainStyle,
    sim: &SimConfig,
    eval: &EvalConfig,
    course: u8,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let runs: Result<Vec<Trajectory>> = (0..eval.runs)
        .into_par_iter()
        .map(|run| drive_single(policy, track, style, sim, eval, course, seed, run))
        .collect();
    runs
}

#[allow(clippy::too_many_arguments)]
fn drive_single(
    policy: &DrivePolicy,
    track: &Track,
    style: &DomainStyle,
    sim: &SimConfig,
    eval: &EvalConfig,
    course: u8,
    seed: u64,
    run: usize,
) -> Result<Trajectory> {
    let start_ldl = eval.start_ldls[run % eval.start_ldls.len()];
    let (x, y, yaw) = track.pose_at(2.0, start_ldl * track.lane_width / 2.0);
    let mut state = VehicleState::at(x, y, yaw, sim.speed_ms());
    let mut hint = None;
    let mut detector = FailureDetector::new(track.lane_width, eval, sim.dt);
    let max_ticks = (3.0 * track.length / sim.speed_ms() / sim.dt) as u32;

    let mut points = Vec::new();
    let mut completed = false;
    let mut failure: Option<String> = None;

    for tick in 0..max_ticks {
        let (loc, _ldl_true, _) = lateral_offset(track, state.x, state.y, hint);
        if loc.s >= track.length - 2.0 {
            completed = true;
            break;
        }
        if let Some(reason) = detector.step(loc.offset.abs()) {
            failure = Some(reason.to_string());
            break;
        }

        let (command, ldl_hat, gate_w, idx_hint) = match policy.kind {
            PolicyKind::Expert => {
                let (cmd, idx) = expert_steer(track, &state, &policy.expert, &sim.vehicle, hint);
                (cmd, None, None, Some(idx))
            }
            _ => {
                let net = policy.net.as_ref().ok_or_else(|| {
                    Error::InvalidParameter("network policy without parameters".into())
                })?;
                let stats = policy.stats.as_ref().ok_or_else(|| {
                    Error::InvalidParameter("network policy without statistics".into())
                })?;
                let frame_seed = derive_seed_n(
                    seed,
                    &["drive", policy.kind.name(), &course.to_string(), &run.to_string()],
                    tick as u64,
                );
                let (frame, _) = render(track, &state, style, frame_seed);
                let input =
                    crate::transfer::preprocess_crop(&frame, &policy.crop, &net.config.input, stats)?;
                let out = forward_all(net, &input)?;
                let (cmd, gate_w) = match policy.kind {
                    PolicyKind::Bl | PolicyKind::Sn => (out.y_source as f64, None),
                    PolicyKind::Prop1 => (out.y_target as f64, None),
                    PolicyKind::Prop2 => {
                        let w: f32 = gate(out.ldl_source.abs(), &policy.gate_driving);
                        let cmd = blend_command(
                            out.y_target,
                            out.y_source,
                            out.ldl_source,
                            &policy.gate_driving,
                        );
                        (cmd as f64, Some(w))
                    }
                    PolicyKind::Expert => unreachable!(),
                };
                (cmd, Some(out.ldl_source), gate_w, None)
            }
        };
        if let Some(idx) = idx_hint {
            hint = Some(idx);
        } else {
            hint = Some(loc.index);
        }

        points.push(TrajPoint {
            time: tick as f64 * sim.dt,
            x: state.x,
            y: state.y,
            yaw: state.yaw,
            yaw_rate: state.yaw_rate,
            speed: state.speed,
            command,
            ldl_hat,
            gate_w,
            offset: loc.offset,
        });

        let accel = speed_control(&state, sim.speed_ms(), &sim.vehicle);
        state = step_vehicle(&state, command, accel, sim.dt, &sim.vehicle);
    }
    if !completed && failure.is_none() {
        failure = Some("timeout".to_string());
    }
    Ok(Trajectory {
        policy: policy.kind.name().to_string(),
        course,
        run,
        dt: sim.dt,
        completed,
        failure,
        points,
    })
}

/// Sliding-window yaw-rate variance, literal form:
/// `VYR(k) = mean(yr^2) - mean(yr)^2` over the `2l+1` window centered at
/// `k`. Only full windows count; returns the per-k series and its mean.
pub fn vyr(yaw_rates: &[f64], l: usize) -> Result<(Vec<f64>, f64)> {
    let window = 2 * l + 1;
    if yaw_rates.len() < window {
        return Err(Error::InvalidParameter(format!(
            "trajectory too short for VYR: {} samples, window {}",
            yaw_rates.len(),
            window
        )));
    }
    let lf = window as f64;
    let mut series = Vec::with_capacity(yaw_rates.len() - window + 1);
    for k in l..yaw_rates.len() - l {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for t in k - l..=k + l {
            sum += yaw_rates[t];
            sum_sq += yaw_rates[t] * yaw_rates[t];
        }
        series.push(sum_sq / lf - (sum / lf) * (sum / lf));
    }
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    Ok((series, mean))
}

/// Distance to the ground-truth trajectory: for each point, the distance
/// to the line through its two nearest ground-truth points (falling back
/// to the point distance when they coincide). Returns the per-tick series
/// and its mean.
pub fn d2gt(points: &[(f64, f64)], ground_truth: &[(f64, f64)]) -> Result<(Vec<f64>, f64)> {
    if ground_truth.len() < 2 {
        return Err(Error::InvalidParameter(
            "ground-truth trajectory needs at least two points".into(),
        ));
    }
    if points.is_empty() {
        return Err(Error::EmptyInput("d2gt points".into()));
    }
    let mut series = Vec::with_capacity(points.len());
    for &(x, y) in points {
        // Two nearest ground-truth points by Euclidean distance.
        let mut b1 = (f64::INFINITY, 0usize);
        let mut b2 = (f64::INFINITY, 0usize);
        for (i, &(gx, gy)) in ground_truth.iter().enumerate() {
            let d = (gx - x) * (gx - x) + (gy - y) * (gy - y);
            if d < b1.0 {
                b2 = b1;
                b1 = (d, i);
            } else if d < b2.0 {
                b2 = (d, i);
            }
        }
        let (x1, y1) = ground_truth[b1.1];
        let (x2, y2) = ground_truth[b2.1];
        let a = y2 - y1;
        let b = x1 - x2;
        let c = x2 * y1 - x1 * y2;
        let norm = (a * a + b * b).sqrt();
        let dist = if norm < 1e-12 {
            // Coincident pair: plain point distance.
            ((x - x1) * (x - x1) + (y - y1) * (y - y1)).sqrt()
        } else {
            (a * x + b * y + c).abs() / norm
        };
        series.push(dist);
    }
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    Ok((series, mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub policy: String,
    pub course: u8,
    pub run: usize,
    pub completed: bool,
    pub failure: Option<String>,
    pub mean_vyr: Option<f64>,
    pub mean_d2gt: Option<f64>,
}

/// One table cell: averages over the course's runs, present only when
/// every run completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseCell {
    pub vyr: Option<f64>,
    pub d2gt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policies: Vec<String>,
    pub courses: Vec<u8>,
    pub runs: Vec<RunMetrics>,
    /// `cells[policy][course]`.
    pub cells: Vec<Vec<CourseCell>>,
    /// Policy-level averages, present only when every course cell is.
    pub avg_vyr: Vec<Option<f64>>,
    pub avg_d2gt: Vec<Option<f64>>,
}

/// Score trajectories against per-course ground truth and assemble the
/// tables. Incomplete runs yield blank metric entries; a course cell is
/// blank unless all its runs completed; a policy average is blank unless
/// all its course cells are filled.
pub fn build_report(
    trajectories: &[Trajectory],
    ground_truth: &[(u8, Vec<(f64, f64)>)],
    vyr_l: usize,
) -> Result<MetricsReport> {
    // Canonical ordering so the report does not depend on the order the
    // trajectories arrived in (drive order vs directory order).
    let mut policies: Vec<String> = Vec::new();
    for t in trajectories {
        if !policies.contains(&t.policy) {
            policies.push(t.policy.clone());
        }
    }
    policies.sort();
    let mut courses: Vec<u8> = Vec::new();
    for t in trajectories {
        if !courses.contains(&t.course) {
            courses.push(t.course);
        }
    }
    courses.sort_unstable();

    let gt_for = |course: u8| -> Result<&Vec<(f64, f64)>> {
        ground_truth
            .iter()
            .find(|(c, _)| *c == course)
            .map(|(_, g)| g)
            .ok_or_else(|| {
                Error::InvalidParameter(format!("no ground-truth trajectory for course {course}"))
            })
    };

    let mut runs = Vec::new();
    for t in trajectories {
        let (mean_vyr, mean_d2gt) = if t.completed {
            let yr: Vec<f64> = t.points.iter().map(|p| p.yaw_rate).collect();
            let xy: Vec<(f64, f64)> = t.points.iter().map(|p| (p.x, p.y)).collect();
            let (_, v) = vyr(&yr, vyr_l)?;
            let (_, d) = d2gt(&xy, gt_for(t.course)?)?;
            (Some(v), Some(d))
        } else {
            (None, None)
        };
        runs.push(RunMetrics {
            policy: t.policy.clone(),
            course: t.course,
            run: t.run,
            completed: t.completed,
            failure: t.failure.clone(),
            mean_vyr,
            mean_d2gt,
        });
    }
    runs.sort_by(|a, b| {
        (&a.policy, a.course, a.run).cmp(&(&b.policy, b.course, b.run))
    });

    let mut cells = Vec::with_capacity(policies.len());
    let mut avg_vyr = Vec::with_capacity(policies.len());
    let mut avg_d2gt = Vec::with_capacity(policies.len());
    for p in &policies {
        let mut row = Vec::with_capacity(courses.len());
        for &c in &courses {
            let members: Vec<&RunMetrics> = runs
                .iter()
                .filter(|r| &r.policy == p && r.course == c)
                .collect();
            let all_done = !members.is_empty() && members.iter().all(|r| r.completed);
            if all_done {
                let v = members.iter().map(|r| r.mean_vyr.unwrap()).sum::<f64>()
                    / members.len() as f64;
                let d = members.iter().map(|r| r.mean_d2gt.unwrap()).sum::<f64>()
                    / members.len() as f64;
                row.push(CourseCell {
                    vyr: Some(v),
                    d2gt: Some(d),
                });
            } else {
                row.push(CourseCell {
                    vyr: None,
                    d2gt: None,
                });
            }
        }
        let complete = row.iter().all(|c| c.vyr.is_some());
        avg_vyr.push(
            complete
                .then(|| row.iter().map(|c| c.vyr.unwrap()).sum::<f64>() / row.len() as f64),
        );
        avg_d2gt.push(
            complete
                .then(|| row.iter().map(|c| c.d2gt.unwrap()).sum::<f64>() / row.len() as f64),
        );
        cells.push(row);
    }

    Ok(MetricsReport {
        policies,
        courses,
        runs,
        cells,
        avg_vyr,
        avg_d2gt,
    })
}

impl MetricsReport {
    /// Table CSV (one metric): rows course 1..n plus `average`, one
    /// column per policy, blank cells where runs failed.
    pub fn table_csv(&self, metric: &str) -> String {
        let mut out = String::from("course");
        for p in &self.policies {
            out.push(',');
            out.push_str(p);
        }
        out.push('\n');
        for (ci, c) in self.courses.iter().enumerate() {
            out.push_str(&c.to_string());
            for (pi, _) in self.policies.iter().enumerate() {
                out.push(',');
                let v = match metric {
                    "vyr" => self.cells[pi][ci].vyr,
                    _ => self.cells[pi][ci].d2gt,
                };
                if let Some(v) = v {
                    out.push_str(&format!("{v:?}"));
                }
            }
            out.push('\n');
        }
        out.push_str("average");
        for (pi, _) in self.policies.iter().enumerate() {
            out.push(',');
            let v = match metric {
                "vyr" => self.avg_vyr[pi],
                _ => self.avg_d2gt[pi],
            };
            if let Some(v) = v {
                out.push_str(&format!("{v:?}"));
            }
        }
        out.push('\n');
        out
    }

    pub fn cell(&self, policy: &str, course: u8) -> Option<&CourseCell> {
        let pi = self.policies.iter().position(|p| p == policy)?;
        let ci = self.courses.iter().position(|c| *c == course)?;
        Some(&self.cells[pi][ci])
    }
}

// --- trajectory CSV -------------------------------------------------------

/// Columns: time_s, x_m, y_m, yaw_rad, yaw_rate_rad_s, speed_m_s,
/// command, ldl_hat, gate_w, offset_m. A `#` metadata line leads the file
/// so a trajectory round-trips losslessly through its CSV.
pub fn trajectory_to_csv(t: &Trajectory) -> String {
    let mut out = format!(
        "# policy={} course={} run={} dt={:?} completed={} failure={}\n",
        t.policy,
        t.course,
        t.run,
        t.dt,
        t.completed,
        t.failure.as_deref().unwrap_or("none")
    );
    out.push_str("time_s,x_m,y_m,yaw_rad,yaw_rate_rad_s,speed_m_s,command,ldl_hat,gate_w,offset_m\n");
    for p in &t.points {
        let ldl = p.ldl_hat.map(|v| format!("{v:?}")).unwrap_or_default();
        let gw = p.gate_w.map(|v| format!("{v:?}")).unwrap_or_default();
        out.push_str(&format!(
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{ldl},{gw},{:?}\n",
            p.time, p.x, p.y, p.yaw, p.yaw_rate, p.speed, p.command, p.offset
        ));
    }
    out
}

pub fn trajectory_from_csv(text: &str) -> Result<Trajectory> {
    let mut lines = text.lines();
    let meta = lines
        .next()
        .ok_or_else(|| Error::EmptyInput("trajectory csv".into()))?;
    if !meta.starts_with("# ") {
        return Err(Error::InvalidParameter(
            "trajectory csv missing metadata line".into(),
        ));
    }
    let mut policy = String::new();
    let mut course = 0u8;
    let mut run = 0usize;
    let mut dt = 0.0f64;
    let mut completed = false;
    let mut failure = None;
    for kv in meta[2..].split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            Error::InvalidParameter(format!("bad trajectory metadata entry '{kv}'"))
        })?;
        match k {
            "policy" => policy = v.to_string(),
            "course" => course = v.parse().map_err(bad_meta)?,
            "run" => run = v.parse().map_err(bad_meta)?,
            "dt" => dt = v.parse().map_err(bad_meta)?,
            "completed" => completed = v.parse().map_err(bad_meta)?,
            "failure" => failure = (v != "none").then(|| v.to_string()),
            _ => {}
        }
    }
    let header = lines.next();
    if header != Some("time_s,x_m,y_m,yaw_rad,yaw_rate_rad_s,speed_m_s,command,ldl_hat,gate_w,offset_m") {
        return Err(Error::InvalidParameter(
            "trajectory csv missing column header".into(),
        ));
    }
    let mut points = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 10 {
            return Err(Error::InvalidParameter(format!(
                "trajectory row has {} columns",
                cols.len()
            )));
        }
        points.push(TrajPoint {
            time: cols[0].parse().map_err(bad_meta)?,
            x: cols[1].parse().map_err(bad_meta)?,
            y: cols[2].parse().map_err(bad_meta)?,
            yaw: cols[3].parse().map_err(bad_meta)?,
            yaw_rate: cols[4].parse().map_err(bad_meta)?,
            speed: cols[5].parse().map_err(bad_meta)?,
            command: cols[6].parse().map_err(bad_meta)?,
            ldl_hat: parse_opt(cols[7])?,
            gate_w: parse_opt(cols[8])?,
            offset: cols[9].parse().map_err(bad_meta)?,
        });
    }
    Ok(Trajectory {
        policy,
        course,
        run,
        dt,
        completed,
        failure,
        points,
    })
}

fn parse_opt(s: &str) -> Result<Option<f32>> {
    if s.is_empty() {
        Ok(None)
    } else {
        Ok(Some(s.parse().map_err(bad_meta)?))
    }
}

fn bad_meta<E: std::fmt::Display>(e: E) -> Error {
    Error::InvalidParameter(format!("trajectory csv parse error: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vyr_constant_yaw_rate_is_zero() {
        let yr = vec![0.37; 40];
        let (series, mean) = vyr(&yr, 5).unwrap();
        assert!(series.iter().all(|&v| v.abs() < 1e-15));
        assert!(mean.abs() < 1e-15);
    }

    #[test]
    fn vyr_window_one_through_eleven_is_ten() {
        // mean of squares 46, squared mean 36.
        let yr: Vec<f64> = (1..=11).map(|v| v as f64).collect();
        let (series, mean) = vyr(&yr, 5).unwrap();
        assert_eq!(series.len(), 1);
        assert!((series[0] - 10.0).abs() < 1e-12);
        assert!((mean - 10.0).abs() < 1e-12);
    }

    #[test]
    fn vyr_matches_two_pass_oracle() {
        use rand_chacha::rand_core::Rng;
        let mut rng = crate::util::rng_from(3);
        let yr: Vec<f64> = (0..200)
            .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0)
            .collect();
        let l = 5;
        let (series, _) = vyr(&yr, l).unwrap();
        for (i, k) in (l..yr.len() - l).enumerate() {
            let win = &yr[k - l..=k + l];
            let m = win.iter().sum::<f64>() / win.len() as f64;
            let var = win.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / win.len() as f64;
            assert!(
                (series[i] - var).abs() < 1e-9,
                "k={k}: {} vs {var}",
                series[i]
            );
        }
    }

    #[test]
    fn vyr_rejects_short_series() {
        assert!(vyr(&[0.0; 10], 5).is_err());
    }

    #[test]
    fn d2gt_axis_cases() {
        // Horizontal line through (0,0),(1,0); car at (0.5, 2) -> 2.
        let gt = vec![(0.0, 0.0), (1.0, 0.0)];
        let (_, mean) = d2gt(&[(0.5, 2.0)], &gt).unwrap();
        assert!((mean - 2.0).abs() < 1e-12);
        // Vertical line through (0,0),(0,1); car at (3, 0.5) -> 3.
        let gt = vec![(0.0, 0.0), (0.0, 1.0)];
        let (_, mean) = d2gt(&[(3.0, 0.5)], &gt).unwrap();
        assert!((mean - 3.0).abs() < 1e-12);
    }

    #[test]
    fn d2gt_matches_exhaustive_oracle() {
        use rand_chacha::rand_core::Rng;
        let mut rng = crate::util::rng_from(8);
        let mut draw = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 20.0 - 10.0;
        let gt: Vec<(f64, f64)> = (0..60).map(|_| (draw(), draw())).collect();
        let pts: Vec<(f64, f64)> = (0..40).map(|_| (draw(), draw())).collect();
        let (series, _) = d2gt(&pts, &gt).unwrap();
        for (i, &(x, y)) in pts.iter().enumerate() {
            // Oracle: sort all gt points by distance, take the first two,
            // compute the projection distance via the cross product.
            let mut order: Vec<usize> = (0..gt.len()).collect();
            order.sort_by(|&a, &b| {
                let da = (gt[a].0 - x).powi(2) + (gt[a].1 - y).powi(2);
                let db = (gt[b].0 - x).powi(2) + (gt[b].1 - y).powi(2);
                da.partial_cmp(&db).unwrap()
            });
            let (x1, y1) = gt[order[0]];
            let (x2, y2) = gt[order[1]];
            let cross = ((x2 - x1) * (y1 - y) - (x1 - x) * (y2 - y1)).abs();
            let len = ((x2 - x1).powi(2) + (y2 - y1).powi(2)).sqrt();
            let expected = cross / len;
            assert!(
                (series[i] - expected).abs() < 1e-9,
                "point {i}: {} vs {expected}",
                series[i]
            );
        }
    }

    #[test]
    fn d2gt_of_ground_truth_against_itself_is_tiny() {
        // A curved path; every point lies on a line through itself and
        // its nearest neighbor, so the distance is ~0.
        let gt: Vec<(f64, f64)> = (0..100)
            .map(|i| {
                let t = i as f64 * 0.1;
                (t, (t * 0.3).sin())
            })
            .collect();
        let (series, _) = d2gt(&gt, &gt).unwrap();
        for v in series {
            assert!(v < 1e-9);
        }
    }

    #[test]
    fn noisy_yaw_series_has_larger_vyr() {
        use rand_chacha::rand_core::Rng;
        let mut rng = crate::util::rng_from(12);
        let clean: Vec<f64> = (0..300).map(|i| (i as f64 * 0.05).sin() * 0.2).collect();
        let noisy: Vec<f64> = clean
            .iter()
            .map(|v| v + ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.2)
            .collect();
        let (_, m_clean) = vyr(&clean, 5).unwrap();
        let (_, m_noisy) = vyr(&noisy, 5).unwrap();
        assert!(m_noisy > m_clean);
    }

    #[test]
    fn failure_detector_monotone_in_threshold() {
        use rand_chacha::rand_core::Rng;
        let mut rng = crate::util::rng_from(5);
        let offsets: Vec<f64> = (0..400)
            .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 9.0)
            .collect();
        let trip = |corridor: f64| -> bool {
            let cfg = EvalConfig {
                corridor_lanewidths: corridor,
                ..EvalConfig::default()
            };
            let mut det = FailureDetector::new(3.5, &cfg, 0.1);
            offsets.iter().any(|&o| det.step(o).is_some())
        };
        // Raising the corridor threshold can only turn failures into passes.
        let mut prev_failed = true;
        for c in [0.2, 0.5, 1.0, 1.5, 2.0, 3.0] {
            let failed = trip(c);
            assert!(
                !failed || prev_failed,
                "corridor {c}: failed although a tighter one passed"
            );
            prev_failed = failed;
        }
    }

    #[test]
    fn trajectory_csv_round_trip_is_lossless() {
        let t = Trajectory {
            policy: "prop2".into(),
            course: 3,
            run: 1,
            dt: 0.1,
            completed: true,
            failure: None,
            points: vec![
                TrajPoint {
                    time: 0.0,
                    x: 1.25e-3,
                    y: -7.5,
                    yaw: 0.31,
                    yaw_rate: -0.017,
                    speed: 8.333333333333334,
                    command: 0.12345678901234567,
                    ldl_hat: Some(0.123456789),
                    gate_w: Some(0.99),
                    offset: -0.001,
                },
                TrajPoint {
                    time: 0.1,
                    x: std::f64::consts::PI,
                    y: 2.0,
                    yaw: -3.14,
                    yaw_rate: 0.0,
                    speed: 8.0,
                    command: -1.0,
                    ldl_hat: None,
                    gate_w: None,
                    offset: 4.2,
                },
            ],
        };
        let csv = trajectory_to_csv(&t);
        let back = trajectory_from_csv(&csv).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn report_blank_rules() {
        let mk = |policy: &str, course: u8, run: usize, completed: bool| Trajectory {
            policy: policy.into(),
            course,
            run,
            dt: 0.1,
            completed,
            failure: (!completed).then(|| "left_corridor".into()),
            points: (0..30)
                .map(|i| TrajPoint {
                    time: i as f64 * 0.1,
                    x: i as f64,
                    y: 0.0,
                    yaw: 0.0,
                    yaw_rate: 0.01 * (i % 3) as f64,
                    speed: 8.3,
                    command: 0.0,
                    ldl_hat: None,
                    gate_w: None,
                    offset: 0.0,
                })
                .collect(),
        };
        let gt: Vec<(u8, Vec<(f64, f64)>)> = vec![
            (1, (0..40).map(|i| (i as f64, 0.0)).collect()),
            (2, (0..40).map(|i| (i as f64, 0.0)).collect()),
        ];
        let trajs = vec![
            mk("sn", 1, 0, true),
            mk("sn", 1, 1, true),
            mk("sn", 2, 0, true),
            mk("sn", 2, 1, true),
            mk("bl", 1, 0, true),
            mk("bl", 1, 1, true),
            mk("bl", 2, 0, true),
            mk("bl", 2, 1, false),
        ];
        let report = build_report(&trajs, &gt, 5).unwrap();
        // bl course 2 had a failed run: blank cell, blank aggregate.
        assert!(report.cell("bl", 2).unwrap().vyr.is_none());
        assert!(report.cell("bl", 1).unwrap().vyr.is_some());
        let bi = report.policies.iter().position(|p| p == "bl").unwrap();
        assert!(report.avg_vyr[bi].is_none());
        // sn completed everything: aggregates present.
        let si = report.policies.iter().position(|p| p == "sn").unwrap();
        assert!(report.avg_vyr[si].is_some());
        assert!(report.avg_d2gt[si].is_some());
        // Report round-trips through JSON.
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
