//! Procedural tracks: piecewise clothoid/arc centerlines with a surface
//! schedule, plus point-to-centerline projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::SimConfig;
use crate::util::{derive_seed, rng_from};
use crate::Result as CrateResult;

use rand_chacha::rand_core::Rng;

/// Sampling step of the precomputed centerline polyline, meters.
const POLYLINE_STEP: f64 = 0.25;

/// Curvature profile families for the four evaluation courses and the
/// dataset tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CourseProfile {
    /// Mostly straight with surface-style changes along the way.
    StraightStyled,
    /// Long sweeping bends.
    Gentle,
    /// Straights alternating with medium curves.
    Mixed,
    /// Predominantly sharp alternating curves.
    MostlySharp,
}

/// One of the four evaluation courses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CourseSpec {
    /// Course number, 1-4.
    pub id: u8,
    pub profile: CourseProfile,
}

impl CourseSpec {
    pub fn course(id: u8) -> Result<Self> {
        let profile = match id {
            1 => CourseProfile::StraightStyled,
            2 => CourseProfile::Gentle,
            3 => CourseProfile::Mixed,
            4 => CourseProfile::MostlySharp,
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "course id must be 1-4, got {id}"
                )))
            }
        };
        Ok(CourseSpec { id, profile })
    }
}

/// Curvature ramps linearly from `kappa0` to `kappa1` over `length`
/// (equal values give an arc or straight, differing values a clothoid).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub length: f64,
    pub kappa0: f64,
    pub kappa1: f64,
}

/// Point of the precomputed centerline.
#[derive(Debug, Clone, Copy)]
pub struct CenterlinePoint {
    pub s: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub curvature: f64,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub segments: Vec<Segment>,
    pub lane_width: f64,
    pub length: f64,
    /// (start arc length, surface variant index) pairs, ascending.
    pub surface_zones: Vec<(f64, usize)>,
    points: Vec<CenterlinePoint>,
}

/// Result of projecting a world point onto the centerline.
#[derive(Debug, Clone, Copy)]
pub struct Location {
    /// Arc length of the closest centerline point, meters.
    pub s: f64,
    /// Signed lateral offset, positive right of the centerline.
    pub offset: f64,
    /// Centerline heading at the projection.
    pub heading: f64,
    /// Polyline index hint for warm-started queries.
    pub index: usize,
    /// True when the query point projects beyond either track end.
    pub beyond_end: bool,
}

impl Track {
    /// Build a track from explicit segments, integrating the centerline.
    pub fn from_segments(
        segments: Vec<Segment>,
        lane_width: f64,
        surface_zones: Vec<(f64, usize)>,
    ) -> Self {
        let length: f64 = segments.iter().map(|s| s.length).sum();
        let mut points = Vec::with_capacity((length / POLYLINE_STEP) as usize + 2);
        let mut x = 0.0;
        let mut y = 0.0;
        let mut heading = 0.0;
        let mut s = 0.0;
        let curvature_at = |s: f64| -> f64 {
            let mut acc = 0.0;
            for seg in &segments {
                if s <= acc + seg.length {
                    let t = ((s - acc) / seg.length).clamp(0.0, 1.0);
                    return seg.kappa0 + (seg.kappa1 - seg.kappa0) * t;
                }
                acc += seg.length;
            }
            segments.last().map(|sg| sg.kappa1).unwrap_or(0.0)
        };
        points.push(CenterlinePoint {
            s,
            x,
            y,
            heading,
            curvature: curvature_at(0.0),
        });
        while s < length {
            let step = POLYLINE_STEP.min(length - s);
            let k_mid = curvature_at(s + 0.5 * step);
            let h_mid = heading + 0.5 * k_mid * step;
            x += step * h_mid.cos();
            y += step * h_mid.sin();
            heading += k_mid * step;
            s += step;
            points.push(CenterlinePoint {
                s,
                x,
                y,
                heading,
                curvature: curvature_at(s),
            });
        }
        Track {
            segments,
            lane_width,
            length,
            surface_zones,
            points,
        }
    }

    pub fn points(&self) -> &[CenterlinePoint] {
        &self.points
    }

    pub fn point_at(&self, s: f64) -> CenterlinePoint {
        let idx = ((s / POLYLINE_STEP).floor() as isize).clamp(0, self.points.len() as isize - 1);
        self.points[idx as usize]
    }

    /// Pose on the centerline at arc length `s`, displaced laterally by
    /// `offset` meters (positive right).
    pub fn pose_at(&self, s: f64, offset: f64) -> (f64, f64, f64) {
        let p = self.point_at(s);
        let (sin_h, cos_h) = p.heading.sin_cos();
        (p.x + offset * sin_h, p.y - offset * cos_h, p.heading)
    }

    /// Surface variant index at arc length `s`.
    pub fn surface_at(&self, s: f64) -> usize {
        let mut v = 0;
        for &(start, idx) in &self.surface_zones {
            if s >= start {
                v = idx;
            } else {
                break;
            }
        }
        v
    }

    /// Fraction of arc length where |curvature| is at or above `threshold`.
    pub fn sharp_fraction(&self, threshold: f64) -> f64 {
        let total = self.points.len().max(1);
        let sharp = self
            .points
            .iter()
            .filter(|p| p.curvature.abs() >= threshold)
            .count();
        sharp as f64 / total as f64
    }

    /// Nearest-centerline projection with an optional warm-start hint.
    /// Falls back to a coarse global scan when no hint is given or the
    /// local descent stalls far away.
    pub fn locate(&self, x: f64, y: f64, hint: Option<usize>) -> Location {
        let d2 = |i: usize| -> f64 {
            let p = &self.points[i];
            (p.x - x) * (p.x - x) + (p.y - y) * (p.y - y)
        };
        let n = self.points.len();
        let mut best = match hint {
            Some(h) => h.min(n - 1),
            None => {
                let mut bi = 0;
                let mut bd = f64::INFINITY;
                let stride = 16.max(n / 256);
                let mut i = 0;
                while i < n {
                    let d = d2(i);
                    if d < bd {
                        bd = d;
                        bi = i;
                    }
                    i += stride;
                }
                bi
            }
        };
        // Discrete hill descent along the polyline.
        let mut best_d = d2(best);
        loop {
            let mut improved = false;
            if best + 1 < n && d2(best + 1) < best_d {
                best += 1;
                best_d = d2(best);
                improved = true;
            } else if best > 0 && d2(best - 1) < best_d {
                best -= 1;
                best_d = d2(best);
                improved = true;
            }
            if !improved {
                break;
            }
        }

        // Refine by projecting on the two adjacent polyline edges.
        let mut result: Option<(f64, f64, f64, f64)> = None; // (dist2, s, offset, heading)
        let mut beyond = false;
        for (i0, i1) in [(best.saturating_sub(1), best), (best, (best + 1).min(n - 1))] {
            if i0 == i1 {
                continue;
            }
            let a = &self.points[i0];
            let b = &self.points[i1];
            let ex = b.x - a.x;
            let ey = b.y - a.y;
            let len2 = ex * ex + ey * ey;
            if len2 == 0.0 {
                continue;
            }
            let t_raw = ((x - a.x) * ex + (y - a.y) * ey) / len2;
            let t = t_raw.clamp(0.0, 1.0);
            if (i0 == 0 && t_raw < 0.0) || (i1 == n - 1 && t_raw > 1.0) {
                beyond = true;
            }
            let px = a.x + t * ex;
            let py = a.y + t * ey;
            let dx = x - px;
            let dy = y - py;
            let dist2 = dx * dx + dy * dy;
            let heading = a.heading + t * (b.heading - a.heading);
            // Right-of-track normal is (sin h, -cos h).
            let offset = dx * heading.sin() - dy * heading.cos();
            let s = a.s + t * (b.s - a.s);
            if result.map(|r| dist2 < r.0).unwrap_or(true) {
                result = Some((dist2, s, offset, heading));
            }
        }
        let (_, s, offset, heading) = result.unwrap_or_else(|| {
            let p = &self.points[best];
            let dx = x - p.x;
            let dy = y - p.y;
            (
                dx * dx + dy * dy,
                p.s,
                dx * p.heading.sin() - dy * p.heading.cos(),
                p.heading,
            )
        });
        Location {
            s,
            offset,
            heading,
            index: best,
            beyond_end: beyond,
        }
    }

    /// Centerline polyline as CSV: `s,x,y,curvature`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,x,y,curvature\n");
        for p in &self.points {
            out.push_str(&format!("{:?},{:?},{:?},{:?}\n", p.s, p.x, p.y, p.curvature));
        }
        out
    }
}

/// Signed lateral offset, arc position and clamped LDL of a vehicle pose.
/// The flag is set when the car is beyond the recoverable corridor
/// (|offset| > 2 lane widths); that is data, not an error.
pub fn lateral_offset(
    track: &Track,
    x: f64,
    y: f64,
    hint: Option<usize>,
) -> (Location, f64, bool) {
    let loc = track.locate(x, y, hint);
    let ldl = (2.0 * loc.offset / track.lane_width).clamp(-1.0, 1.0);
    let flagged = loc.offset.abs() > 2.0 * track.lane_width;
    (loc, ldl, flagged)
}

fn uniform(rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    lo + u * (hi - lo)
}

/// Deterministic track generation per (profile, seed).
///
/// Tracks are built from hold segments (constant curvature) joined by
/// clothoid transitions, then validated against the configured curvature
/// cap and, for the extreme profiles, their sharp-curvature budget.
pub fn generate_track(
    profile: CourseProfile,
    seed: u64,
    cfg: &SimConfig,
) -> CrateResult<Track> {
    let mut rng = rng_from(derive_seed(seed, &["track"]));
    let target_len = cfg.track_length;
    let thr = cfg.sharp_curvature;

    let mut segments: Vec<Segment> = Vec::new();
    let mut built = 0.0;
    let mut kappa = 0.0;
    let mut sign = if rng.next_u64() % 2 == 0 { 1.0 } else { -1.0 };

    // Lead-in so every track starts straight.
    let lead = 20.0;
    segments.push(Segment {
        length: lead,
        kappa0: 0.0,
        kappa1: 0.0,
    });
    built += lead;

    while built < target_len {
        let (hold_len, hold_kappa, gap_len): (f64, f64, f64) = match profile {
            CourseProfile::StraightStyled => {
                // 94% straight, occasional near-straight drift.
                if uniform(&mut rng, 0.0, 1.0) < 0.12 {
                    (uniform(&mut rng, 25.0, 45.0), sign * uniform(&mut rng, 0.004, 0.008), 12.0)
                } else {
                    (uniform(&mut rng, 60.0, 110.0), 0.0, 0.0)
                }
            }
            CourseProfile::Gentle => (
                uniform(&mut rng, 50.0, 90.0),
                sign * uniform(&mut rng, 0.005, 0.0125),
                15.0,
            ),
            CourseProfile::Mixed => {
                if uniform(&mut rng, 0.0, 1.0) < 0.45 {
                    (uniform(&mut rng, 30.0, 60.0), 0.0, 10.0)
                } else {
                    (
                        uniform(&mut rng, 35.0, 60.0),
                        sign * uniform(&mut rng, 0.012, 0.03),
                        12.0,
                    )
                }
            }
            CourseProfile::MostlySharp => (
                uniform(&mut rng, 45.0, 70.0),
                sign * uniform(&mut rng, 0.028, 0.06),
                11.0,
            ),
        };
        // Clothoid transition whenever curvature changes.
        if kappa != hold_kappa {
            let gap = gap_len.max(8.0);
            segments.push(Segment {
                length: gap,
                kappa0: kappa,
                kappa1: hold_kappa,
            });
            built += gap;
        }
        segments.push(Segment {
            length: hold_len,
            kappa0: hold_kappa,
            kappa1: hold_kappa,
        });
        built += hold_len;
        kappa = hold_kappa;
        sign = -sign;
    }
    // Ease out to straight at the end.
    segments.push(Segment {
        length: 15.0,
        kappa0: kappa,
        kappa1: 0.0,
    });

    if segments
        .iter()
        .any(|s| s.kappa0.abs() > cfg.curvature_max || s.kappa1.abs() > cfg.curvature_max)
    {
        return Err(Error::InfeasibleTrack(format!(
            "curvature exceeds configured max {}",
            cfg.curvature_max
        )));
    }

    // Surface schedule: StraightStyled cycles variants; others keep one.
    let mut zones = vec![(0.0, 0usize)];
    if profile == CourseProfile::StraightStyled {
        let mut s = uniform(&mut rng, 50.0, 80.0);
        let mut v = 1usize;
        while s < target_len {
            zones.push((s, v));
            v = (v % 3) + 1; // cycle variants 1..=3
            s += uniform(&mut rng, 55.0, 95.0);
        }
    }

    let track = Track::from_segments(segments, cfg.lane_width, zones);

    match profile {
        CourseProfile::MostlySharp => {
            let f = track.sharp_fraction(thr);
            if f < 0.6 {
                return Err(Error::InfeasibleTrack(format!(
                    "sharp profile reached only {f:.2} sharp fraction"
                )));
            }
        }
        CourseProfile::StraightStyled => {
            let f = track.sharp_fraction(thr);
            if f > 0.05 {
                return Err(Error::InfeasibleTrack(format!(
                    "straight profile has {f:.2} sharp fraction"
                )));
            }
        }
        _ => {}
    }
    Ok(track)
}
