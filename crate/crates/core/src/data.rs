//! Trajectory CSV ingestion, resampling, windowing, splits and displacement
//! metrics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{dist, wrap_angle, Point};

/// Displacements below this length do not define a heading.
pub const HEADING_MIN_DISPLACEMENT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentType {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentType {
    pub const ALL: [AgentType; 3] = [AgentType::Vehicle, AgentType::Pedestrian, AgentType::Cyclist];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentType::Vehicle => "vehicle",
            AgentType::Pedestrian => "pedestrian",
            AgentType::Cyclist => "cyclist",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AgentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vehicle" | "car" => Ok(AgentType::Vehicle),
            "pedestrian" | "ped" => Ok(AgentType::Pedestrian),
            "cyclist" | "bicycle" => Ok(AgentType::Cyclist),
            other => Err(Error::UnknownAgentType(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    /// Seconds.
    pub t: f64,
    pub x: f64,
    pub y: f64,
    /// Speed, m/s.
    pub v: f64,
    /// Heading, radians in (-π, π].
    pub psi: f64,
}

impl TrajectorySample {
    pub fn pos(&self) -> Point {
        [self.x, self.y]
    }

    pub fn velocity(&self) -> Point {
        [self.v * self.psi.cos(), self.v * self.psi.sin()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrajectory {
    pub agent_id: i64,
    pub agent_type: AgentType,
    pub samples: Vec<TrajectorySample>,
}

impl AgentTrajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positions(&self) -> Vec<Point> {
        self.samples.iter().map(TrajectorySample::pos).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonConfig {
    pub t_h: usize,
    pub t_f: usize,
    /// Seconds per step.
    pub dt: f64,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self {
            t_h: 8,
            t_f: 12,
            dt: 0.4,
        }
    }
}

impl HorizonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_h == 0 || self.t_f == 0 {
            return Err(Error::Config(format!(
                "history and future horizons must be >= 1 (got t_h={}, t_f={})",
                self.t_h, self.t_f
            )));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be > 0 s, got {}", self.dt)));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.t_h + self.t_f
    }
}

/// How raw CSV frames map to time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Seconds between consecutive frame ids.
    pub frame_dt: f64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self { frame_dt: 0.1 }
    }
}

struct RawRow {
    frame: i64,
    x: f64,
    y: f64,
    v: Option<f64>,
    psi: Option<f64>,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Vec<AgentTrajectory>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

/// Parse trajectory rows with columns `frame_id, agent_id, agent_type, x, y`
/// and optional `v, psi`. Agents are returned sorted by id.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Vec<AgentTrajectory>> {
    if !(schema.frame_dt > 0.0) {
        return Err(Error::Config(format!("frame_dt must be > 0, got {}", schema.frame_dt)));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| {
        col(name).ok_or_else(|| Error::Data(format!("missing required column `{name}`")))
    };
    let (c_frame, c_agent, c_type) = (required("frame_id")?, required("agent_id")?, required("agent_type")?);
    let (c_x, c_y) = (required("x")?, required("y")?);
    let (c_v, c_psi) = (col("v"), col("psi"));

    let mut seen = HashSet::new();
    let mut agents: BTreeMap<i64, (AgentType, Vec<RawRow>)> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let num = |c: usize, name: &str| -> Result<f64> {
            let s = field(c);
            let v: f64 = s
                .parse()
                .map_err(|_| Error::Data(format!("line {line}: bad {name} `{s}`")))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("line {line}: non-finite {name}")));
            }
            Ok(v)
        };
        let opt = |c: Option<usize>, name: &str| -> Result<Option<f64>> {
            match c {
                Some(c) if !field(c).is_empty() => num(c, name).map(Some),
                _ => Ok(None),
            }
        };
        let int = |c: usize, name: &str| -> Result<i64> {
            let s = field(c);
            s.parse::<i64>()
                .or_else(|_| match s.parse::<f64>() {
                    Ok(f) if f.fract() == 0.0 => Ok(f as i64),
                    _ => Err(()),
                })
                .map_err(|_| Error::Data(format!("line {line}: bad {name} `{s}`")))
        };
        let frame = int(c_frame, "frame_id")?;
        let agent = int(c_agent, "agent_id")?;
        let ty: AgentType = field(c_type).parse()?;
        if !seen.insert((frame, agent)) {
            return Err(Error::Data(format!(
                "line {line}: duplicate row for frame {frame}, agent {agent}"
            )));
        }
        let row = RawRow {
            frame,
            x: num(c_x, "x")?,
            y: num(c_y, "y")?,
            v: opt(c_v, "v")?,
            psi: opt(c_psi, "psi")?,
        };
        let entry = agents.entry(agent).or_insert_with(|| (ty, Vec::new()));
        if entry.0 != ty {
            return Err(Error::Data(format!(
                "line {line}: agent {agent} changes type from {} to {ty}",
                entry.0
            )));
        }
        if let Some(prev) = entry.1.last() {
            if frame <= prev.frame {
                return Err(Error::Data(format!(
                    "line {line}: frames of agent {agent} not increasing ({} then {frame})",
                    prev.frame
                )));
            }
        }
        entry.1.push(row);
    }

    Ok(agents
        .into_iter()
        .map(|(agent_id, (agent_type, rows))| AgentTrajectory {
            agent_id,
            agent_type,
            samples: derive_kinematics(&rows, schema.frame_dt),
        })
        .collect())
}

/// Fill in speed and heading where the file omits them: speed from central
/// differences (one-sided at the ends), heading from the displacement
/// direction, held at the previous value when the agent barely moves.
fn derive_kinematics(rows: &[RawRow], frame_dt: f64) -> Vec<TrajectorySample> {
    let n = rows.len();
    let t: Vec<f64> = rows.iter().map(|r| r.frame as f64 * frame_dt).collect();
    let mut heading = 0.0;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let (a, b) = if n == 1 {
            (0, 0)
        } else if k == 0 {
            (0, 1)
        } else if k == n - 1 {
            (n - 2, n - 1)
        } else {
            (k - 1, k + 1)
        };
        let (dx, dy) = (rows[b].x - rows[a].x, rows[b].y - rows[a].y);
        let span = t[b] - t[a];
        let disp = dx.hypot(dy);
        if disp >= HEADING_MIN_DISPLACEMENT {
            heading = dy.atan2(dx);
        }
        let v = rows[k]
            .v
            .unwrap_or(if span > 0.0 { disp / span } else { 0.0 })
            .max(0.0);
        let psi = rows[k].psi.map(wrap_angle).unwrap_or(heading);
        out.push(TrajectorySample {
            t: t[k],
            x: rows[k].x,
            y: rows[k].y,
            v,
            psi,
        });
    }
    out
}

/// Grid index of time `t` on a uniform grid of spacing `dt`.
pub fn step_index(t: f64, dt: f64) -> i64 {
    (t / dt).round() as i64
}

/// Linearly interpolate onto the global grid `t = k·dt` over the span the
/// trajectory covers. Heading is interpolated along the shorter arc.
pub fn resample(traj: &AgentTrajectory, dt: f64) -> Result<AgentTrajectory> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    let s = &traj.samples;
    let mut samples = Vec::new();
    if let (Some(first), Some(last)) = (s.first(), s.last()) {
        let tol = 1e-9 * dt;
        let k0 = ((first.t - tol) / dt).ceil() as i64;
        let k1 = ((last.t + tol) / dt).floor() as i64;
        let mut j = 0;
        for k in k0..=k1 {
            let t = k as f64 * dt;
            while j + 1 < s.len() && s[j + 1].t < t - tol {
                j += 1;
            }
            let a = &s[j];
            let sample = if j + 1 >= s.len() || (t - a.t).abs() <= tol {
                TrajectorySample { t, ..*a }
            } else {
                let b = &s[j + 1];
                let w = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
                let lerp = |p: f64, q: f64| p + w * (q - p);
                TrajectorySample {
                    t,
                    x: lerp(a.x, b.x),
                    y: lerp(a.y, b.y),
                    v: lerp(a.v, b.v),
                    psi: wrap_angle(a.psi + w * wrap_angle(b.psi - a.psi)),
                }
            };
            samples.push(sample);
        }
    }
    Ok(AgentTrajectory {
        samples,
        ..traj.clone()
    })
}

/// Identifies the recording a window came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneTag {
    pub scene_id: String,
    /// Spatial site; context maps are shared by recordings of one location.
    pub location: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub scene: SceneTag,
    /// Grid index of the first step.
    pub start_step: i64,
    pub dt: f64,
    pub t_h: usize,
    pub t_f: usize,
    /// Every trajectory holds exactly `t_h + t_f` samples on a shared grid.
    pub trajectories: Vec<AgentTrajectory>,
}

impl SceneSample {
    pub fn n_agents(&self) -> usize {
        self.trajectories.len()
    }

    pub fn horizon(&self) -> HorizonConfig {
        HorizonConfig {
            t_h: self.t_h,
            t_f: self.t_f,
            dt: self.dt,
        }
    }

    /// Future positions as `[t_f][n_agents]`.
    pub fn future_positions(&self) -> Vec<Vec<Point>> {
        (self.t_h..self.t_h + self.t_f)
            .map(|k| self.trajectories.iter().map(|a| a.samples[k].pos()).collect())
            .collect()
    }

    /// Same window with agents reordered: agent `r` of the result is agent
    /// `perm[r]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> SceneSample {
        SceneSample {
            trajectories: perm.iter().map(|&i| self.trajectories[i].clone()).collect(),
            ..self.clone()
        }
    }
}

/// Slide windows of `t_h + t_f` steps over resampled trajectories with the
/// given stride. Agents that do not cover a whole window are left out of it;
/// windows without agents are skipped.
pub fn make_samples(
    trajectories: &[AgentTrajectory],
    horizon: &HorizonConfig,
    scene: &SceneTag,
    stride: usize,
) -> Result<Vec<SceneSample>> {
    horizon.validate()?;
    let stride = stride.max(1);
    let len = horizon.total();
    let dt = horizon.dt;
    let spans: Vec<(i64, i64)> = trajectories
        .iter()
        .filter_map(|a| {
            let first = a.samples.first()?;
            let last = a.samples.last()?;
            Some((step_index(first.t, dt), step_index(last.t, dt)))
        })
        .collect();
    let (Some(lo), Some(hi)) = (
        spans.iter().map(|s| s.0).min(),
        spans.iter().map(|s| s.1).max(),
    ) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    let mut start = lo;
    while start + len as i64 - 1 <= hi {
        let end = start + len as i64 - 1;
        let mut members = Vec::new();
        for a in trajectories {
            let Some(first) = a.samples.first() else { continue };
            let off = start - step_index(first.t, dt);
            if off < 0 || (off as usize) + len > a.samples.len() {
                continue;
            }
            let window = &a.samples[off as usize..off as usize + len];
            if step_index(window[len - 1].t, dt) != end {
                continue;
            }
            members.push(AgentTrajectory {
                agent_id: a.agent_id,
                agent_type: a.agent_type,
                samples: window.to_vec(),
            });
        }
        if !members.is_empty() {
            out.push(SceneSample {
                scene: scene.clone(),
                start_step: start,
                dt,
                t_h: horizon.t_h,
                t_f: horizon.t_f,
                trajectories: members,
            });
        }
        start += stride as i64;
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

/// Scene counts per part: floors of `ratio·n`, then the leftover scenes go
/// one each to the parts with the largest fractional remainders (ties to the
/// earlier part).
pub fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| r * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Shuffle scene ids with `seed` and partition whole scenes, so windows of
/// one recording never straddle parts.
pub fn split(samples: Vec<SceneSample>, ratios: [f64; 3], seed: u64) -> Result<DataSplit> {
    if samples.is_empty() {
        return Err(Error::Data("cannot split an empty sample set".into()));
    }
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let mut scenes: Vec<String> = samples
        .iter()
        .map(|s| s.scene.scene_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scenes.shuffle(&mut rng);
    let [n_train, n_val, _] = apportion(scenes.len(), ratios);
    let part: BTreeMap<String, usize> = scenes
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let p = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            (s, p)
        })
        .collect();
    let mut out = DataSplit::default();
    for s in samples {
        match part[&s.scene.scene_id] {
            0 => out.train.push(s),
            1 => out.val.push(s),
            _ => out.test.push(s),
        }
    }
    Ok(out)
}

/// Average and final displacement error for positions laid out
/// `[t_f][n_agents]`.
pub fn ade_fde(predicted: &[Vec<Point>], truth: &[Vec<Point>]) -> Result<(f64, f64)> {
    if predicted.len() != truth.len()
        || predicted.is_empty()
        || predicted.iter().zip(truth).any(|(p, t)| p.len() != t.len() || p.is_empty())
    {
        return Err(Error::shape(
            "ade_fde",
            format!(
                "predicted {}x{} vs truth {}x{}",
                predicted.len(),
                predicted.first().map_or(0, Vec::len),
                truth.len(),
                truth.first().map_or(0, Vec::len)
            ),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, t) in predicted.iter().zip(truth) {
        for (a, b) in p.iter().zip(t) {
            total += dist(*a, *b);
            count += 1;
        }
    }
    let (p_last, t_last) = (predicted.last().unwrap(), truth.last().unwrap());
    let fde = p_last.iter().zip(t_last).map(|(a, b)| dist(*a, *b)).sum::<f64>() / p_last.len() as f64;
    Ok((total / count as f64, fde))
}

/// Lowest ADE over `pred_sets` together with the FDE of that same set.
pub fn best_of_k(pred_sets: &[Vec<Vec<Point>>], truth: &[Vec<Point>]) -> Result<(f64, f64)> {
    if pred_sets.is_empty() {
        return Err(Error::InvalidArgument("best_of_k needs K >= 1".into()));
    }
    let mut best = (f64::INFINITY, f64::INFINITY);
    for p in pred_sets {
        let (ade, fde) = ade_fde(p, truth)?;
        if ade < best.0 {
            best = (ade, fde);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ade: f64,
    pub fde: f64,
    pub min_ade: f64,
    pub min_fde: f64,
    /// Future steps scored.
    pub horizon: usize,
    pub n_samples: usize,
}

/// Write trajectories in the loader's schema, frame ids taken as
/// `round(t / frame_dt)`.
pub fn write_csv<W: std::io::Write>(
    writer: W,
    trajectories: &[AgentTrajectory],
    frame_dt: f64,
) -> Result<()> {
    let mut rows: Vec<(i64, i64, AgentType, TrajectorySample)> = trajectories
        .iter()
        .flat_map(|a| {
            a.samples
                .iter()
                .map(move |s| (step_index(s.t, frame_dt), a.agent_id, a.agent_type, *s))
        })
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["frame_id", "agent_id", "agent_type", "x", "y", "v", "psi"])?;
    for (frame, id, ty, s) in rows {
        w.write_record(&[
            frame.to_string(),
            id.to_string(),
            ty.as_str().to_string(),
            s.x.to_string(),
            s.y.to_string(),
            s.v.to_string(),
            s.psi.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, trajectories: &[AgentTrajectory], frame_dt: f64) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(std::io::BufWriter::new(file), trajectories, frame_dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_csv(n_agents: usize, frames: usize, with_kin: bool) -> String {
        let mut s = String::from(if with_kin {
            "frame_id,agent_id,agent_type,x,y,v,psi\n"
        } else {
            "frame_id,agent_id,agent_type,x,y\n"
        });
        for f in 0..frames {
            for a in 0..n_agents {
                if with_kin {
                    s += &format!("{f},{a},pedestrian,{},{},1.0,0.0\n", f as f64, a as f64);
                } else {
                    s += &format!("{f},{a},pedestrian,{},{}\n", f as f64, a as f64);
                }
            }
        }
        s
    }

    fn straight(id: i64, steps: std::ops::Range<i64>, dt: f64) -> AgentTrajectory {
        AgentTrajectory {
            agent_id: id,
            agent_type: AgentType::Vehicle,
            samples: steps
                .map(|k| TrajectorySample {
                    t: k as f64 * dt,
                    x: k as f64,
                    y: 0.0,
                    v: 1.0 / dt,
                    psi: 0.0,
                })
                .collect(),
        }
    }

    fn tag(id: &str) -> SceneTag {
        SceneTag {
            scene_id: id.into(),
            location: "site".into(),
        }
    }

    #[test]
    fn loads_full_columns() {
        let trajs = read_csv(line_csv(2, 20, true).as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(trajs.len(), 2);
        assert!(trajs.iter().all(|t| t.len() == 20));
    }

    #[test]
    fn derives_speed_and_heading_from_a_line() {
        let trajs = read_csv(line_csv(1, 10, false).as_bytes(), &CsvSchema { frame_dt: 0.5 }).unwrap();
        for s in &trajs[0].samples {
            assert!((s.v - 2.0).abs() < 1e-12);
            assert_eq!(s.psi, 0.0);
        }
    }

    #[test]
    fn stationary_agent_holds_initial_heading() {
        let csv = "frame_id,agent_id,agent_type,x,y\n0,1,pedestrian,3,3\n1,1,pedestrian,3,3\n2,1,pedestrian,3,3\n";
        let t = read_csv(csv.as_bytes(), &CsvSchema::default()).unwrap();
        assert!(t[0].samples.iter().all(|s| s.psi == 0.0 && s.v == 0.0));
    }

    #[test]
    fn heading_held_through_a_stop() {
        let csv = "frame_id,agent_id,agent_type,x,y\n0,1,vehicle,0,0\n1,1,vehicle,0,1\n2,1,vehicle,0,2\n3,1,vehicle,0,2\n4,1,vehicle,0,2\n";
        let t = read_csv(csv.as_bytes(), &CsvSchema::default()).unwrap();
        let half_pi = std::f64::consts::FRAC_PI_2;
        assert!(t[0].samples.iter().all(|s| (s.psi - half_pi).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_rows() {
        let schema = CsvSchema::default();
        let dup = "frame_id,agent_id,agent_type,x,y\n0,1,vehicle,0,0\n0,1,vehicle,1,0\n";
        assert!(matches!(read_csv(dup.as_bytes(), &schema), Err(Error::Data(_))));
        let back = "frame_id,agent_id,agent_type,x,y\n1,1,vehicle,0,0\n0,1,vehicle,1,0\n";
        assert!(matches!(read_csv(back.as_bytes(), &schema), Err(Error::Data(_))));
        let ty = "frame_id,agent_id,agent_type,x,y\n0,1,tram,0,0\n";
        assert!(matches!(read_csv(ty.as_bytes(), &schema), Err(Error::UnknownAgentType(_))));
        let missing = "frame_id,agent_id,x,y\n0,1,0,0\n";
        assert!(read_csv(missing.as_bytes(), &schema).is_err());
    }

    #[test]
    fn resample_halves_rate() {
        let t = straight(0, 0..11, 0.1);
        let r = resample(&t, 0.2).unwrap();
        assert_eq!(r.len(), 6);
        for (k, s) in r.samples.iter().enumerate() {
            assert!((s.x - 2.0 * k as f64).abs() < 1e-9);
        }
        let up = resample(&t, 0.05).unwrap();
        assert_eq!(up.len(), 21);
        assert!((up.samples[1].x - 0.5).abs() < 1e-9);
    }

    #[test]
    fn window_counts() {
        let h = HorizonConfig { t_h: 8, t_f: 12, dt: 0.1 };
        assert_eq!(make_samples(&[straight(0, 0..20, 0.1)], &h, &tag("a"), 1).unwrap().len(), 1);
        assert_eq!(make_samples(&[straight(0, 0..19, 0.1)], &h, &tag("a"), 1).unwrap().len(), 0);
    }

    #[test]
    fn partial_overlap_windows() {
        let h = HorizonConfig { t_h: 8, t_f: 12, dt: 0.1 };
        let trajs = [straight(0, 0..30, 0.1), straight(1, 0..20, 0.1)];
        let s = make_samples(&trajs, &h, &tag("a"), 1).unwrap();
        // Windows start at steps 0..=10; only the first holds both agents.
        assert_eq!(s.len(), 11);
        assert_eq!(s[0].n_agents(), 2);
        assert!(s[1..].iter().all(|w| w.n_agents() == 1));
    }

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion(10, [0.7, 0.1, 0.2]), [7, 1, 2]);
        assert_eq!(apportion(3, [0.7, 0.1, 0.2]), [2, 0, 1]);
        assert_eq!(apportion(1, [0.7, 0.1, 0.2]), [1, 0, 0]);
    }

    #[test]
    fn split_by_scene_is_deterministic() {
        let h = HorizonConfig { t_h: 2, t_f: 2, dt: 0.1 };
        let mut samples = Vec::new();
        for i in 0..10 {
            samples.extend(make_samples(&[straight(0, 0..6, 0.1)], &h, &tag(&format!("s{i}")), 1).unwrap());
        }
        let a = split(samples.clone(), [0.7, 0.1, 0.2], 4).unwrap();
        let b = split(samples.clone(), [0.7, 0.1, 0.2], 4).unwrap();
        assert_eq!(a, b);
        let scenes = |v: &[SceneSample]| v.iter().map(|s| s.scene.scene_id.clone()).collect::<BTreeSet<_>>();
        assert_eq!((scenes(&a.train).len(), scenes(&a.val).len(), scenes(&a.test).len()), (7, 1, 2));
        assert!(scenes(&a.train).is_disjoint(&scenes(&a.test)));
        assert_eq!(a.train.len() + a.val.len() + a.test.len(), samples.len());
        assert!(split(Vec::new(), [0.7, 0.1, 0.2], 0).is_err());
    }

    #[test]
    fn displacement_errors() {
        let truth = vec![vec![[0.0, 0.0], [1.0, 1.0]]; 4];
        assert_eq!(ade_fde(&truth, &truth).unwrap(), (0.0, 0.0));
        let off: Vec<Vec<Point>> = truth
            .iter()
            .map(|s| s.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect())
            .collect();
        let (ade, fde) = ade_fde(&off, &truth).unwrap();
        assert!((ade - 5.0).abs() < 1e-12 && (fde - 5.0).abs() < 1e-12);
        assert!(ade_fde(&off[..3], &truth).is_err());
        assert_eq!(best_of_k(&[off.clone()], &truth).unwrap(), (ade, fde));
        assert_eq!(best_of_k(&[off, truth.clone()], &truth).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn csv_round_trip() {
        let t = vec![straight(3, 0..5, 0.1), straight(7, 2..6, 0.1)];
        let mut buf = Vec::new();
        write_csv(&mut buf, &t, 0.1).unwrap();
        let back = read_csv(buf.as_slice(), &CsvSchema { frame_dt: 0.1 }).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].samples[0].x, 2.0);
        assert!((back[1].samples[0].t - 0.2).abs() < 1e-12);
    }
}
