//! Global occupancy-density and mean-velocity grids, and agent-centred
//! rotated crops sampled from them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::AgentTrajectory;
use crate::error::{Error, Result};
use crate::geom::{to_local, to_world, Point};

/// Axis-aligned world rectangle in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Point,
    pub max: Point,
}

impl Bounds {
    /// Smallest rectangle holding every observation, grown by `margin`.
    pub fn covering(trajectories: &[AgentTrajectory], margin: f64) -> Option<Bounds> {
        let mut it = trajectories.iter().flat_map(|t| t.samples.iter());
        let first = it.next()?;
        let mut b = Bounds {
            min: first.pos(),
            max: first.pos(),
        };
        for s in it {
            b.min = [b.min[0].min(s.x), b.min[1].min(s.y)];
            b.max = [b.max[0].max(s.x), b.max[1].max(s.y)];
        }
        Some(b.grown(margin))
    }

    pub fn grown(&self, margin: f64) -> Bounds {
        Bounds {
            min: [self.min[0] - margin, self.min[1] - margin],
            max: [self.max[0] + margin, self.max[1] + margin],
        }
    }

    pub fn union(&self, other: &Bounds) -> Bounds {
        Bounds {
            min: [self.min[0].min(other.min[0]), self.min[1].min(other.min[1])],
            max: [self.max[0].max(other.max[0]), self.max[1].max(other.max[1])],
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }
}

/// Which data a map was built from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapProvenance {
    /// Name of the split, `"train"` for maps a model may consume.
    pub split: String,
    pub scene_ids: BTreeSet<String>,
}

impl MapProvenance {
    pub fn train(scene_ids: impl IntoIterator<Item = String>) -> Self {
        Self {
            split: "train".into(),
            scene_ids: scene_ids.into_iter().collect(),
        }
    }

    /// Error if the map saw any of `scene_ids` or was not built from a
    /// training split.
    pub fn check_disjoint<'a>(&self, scene_ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        if self.split != "train" {
            return Err(Error::Data(format!(
                "context map was built from the `{}` split, not `train`",
                self.split
            )));
        }
        for s in scene_ids {
            if self.scene_ids.contains(s) {
                return Err(Error::Data(format!(
                    "context map includes held-out scene `{s}`"
                )));
            }
        }
        Ok(())
    }
}

/// Row `r` spans `y ∈ [origin.y + r·cell, origin.y + (r+1)·cell)`, column `c`
/// likewise along x.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextMap {
    pub origin: Point,
    pub cell_size: f64,
    pub rows: usize,
    pub cols: usize,
    /// Normalized observation frequency per cell, `rows·cols`.
    pub density: Vec<f64>,
    /// Mean observed velocity per cell, `rows·cols·2` (vx, vy), m/s.
    pub velocity: Vec<f64>,
    pub counts: Vec<u64>,
    /// False when no observation fell on the grid (density all zero).
    pub has_observations: bool,
    pub provenance: MapProvenance,
}

impl ContextMap {
    fn empty(bounds: &Bounds, cell_size: f64, provenance: MapProvenance) -> Result<Self> {
        if !(cell_size > 0.0) {
            return Err(Error::InvalidArgument(format!("cell_size must be > 0, got {cell_size}")));
        }
        let w = bounds.max[0] - bounds.min[0];
        let h = bounds.max[1] - bounds.min[1];
        if !(w >= 0.0 && h >= 0.0) {
            return Err(Error::InvalidArgument(format!("degenerate bounds {bounds:?}")));
        }
        let cols = ((w / cell_size).floor() as usize + 1).max(1);
        let rows = ((h / cell_size).floor() as usize + 1).max(1);
        Ok(Self {
            origin: bounds.min,
            cell_size,
            rows,
            cols,
            density: vec![0.0; rows * cols],
            velocity: vec![0.0; rows * cols * 2],
            counts: vec![0; rows * cols],
            has_observations: false,
            provenance,
        })
    }

    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        let c = ((p[0] - self.origin[0]) / self.cell_size).floor();
        let r = ((p[1] - self.origin[1]) / self.cell_size).floor();
        if c < 0.0 || r < 0.0 || c as usize >= self.cols || r as usize >= self.rows {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// World position of the centre of cell `(r, c)`.
    pub fn cell_center(&self, r: usize, c: usize) -> Point {
        [
            self.origin[0] + (c as f64 + 0.5) * self.cell_size,
            self.origin[1] + (r as f64 + 0.5) * self.cell_size,
        ]
    }

    pub fn max_density(&self) -> f64 {
        self.density.iter().copied().fold(0.0, f64::max)
    }

    /// Bilinear interpolation between cell centres of density, vx and vy,
    /// with zero outside the grid.
    pub fn sample(&self, p: Point) -> [f64; 3] {
        let u = (p[0] - self.origin[0]) / self.cell_size - 0.5;
        let v = (p[1] - self.origin[1]) / self.cell_size - 0.5;
        let (c0, r0) = (u.floor(), v.floor());
        let (fu, fv) = (u - c0, v - r0);
        let mut out = [0.0; 3];
        for (dr, wr) in [(0.0, 1.0 - fv), (1.0, fv)] {
            for (dc, wc) in [(0.0, 1.0 - fu), (1.0, fu)] {
                let w = wr * wc;
                if w == 0.0 {
                    continue;
                }
                let (r, c) = (r0 + dr, c0 + dc);
                if r < 0.0 || c < 0.0 || r as usize >= self.rows || c as usize >= self.cols {
                    continue;
                }
                let i = r as usize * self.cols + c as usize;
                out[0] += w * self.density[i];
                out[1] += w * self.velocity[2 * i];
                out[2] += w * self.velocity[2 * i + 1];
            }
        }
        out
    }

    /// Writes `<stem>.bin` (planes density, vx, vy, count as little-endian
    /// f64, row-major) and `<stem>.json`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let n = self.rows * self.cols;
        let mut bytes = Vec::with_capacity(n * 4 * 8);
        let planes = [
            self.density.clone(),
            (0..n).map(|i| self.velocity[2 * i]).collect(),
            (0..n).map(|i| self.velocity[2 * i + 1]).collect(),
            self.counts.iter().map(|&c| c as f64).collect::<Vec<_>>(),
        ];
        for plane in &planes {
            for v in plane {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let bin = stem.with_extension("bin");
        std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let sidecar = MapSidecar {
            origin: self.origin,
            cell_size: self.cell_size,
            h_g: self.rows,
            w_g: self.cols,
            channels: ["density", "vx", "vy", "count"].map(String::from).to_vec(),
            has_observations: self.has_observations,
            provenance: self.provenance.clone(),
        };
        let json = stem.with_extension("json");
        std::fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let json = stem.with_extension("json");
        let sidecar: MapSidecar = serde_json::from_str(
            &std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?,
        )?;
        let bin = stem.with_extension("bin");
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let n = sidecar.h_g * sidecar.w_g;
        if bytes.len() != n * 4 * 8 {
            return Err(Error::Data(format!(
                "{}: expected {} bytes for a {}x{} map, found {}",
                bin.display(),
                n * 32,
                sidecar.h_g,
                sidecar.w_g,
                bytes.len()
            )));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut velocity = vec![0.0; 2 * n];
        for i in 0..n {
            velocity[2 * i] = vals[n + i];
            velocity[2 * i + 1] = vals[2 * n + i];
        }
        Ok(Self {
            origin: sidecar.origin,
            cell_size: sidecar.cell_size,
            rows: sidecar.h_g,
            cols: sidecar.w_g,
            density: vals[..n].to_vec(),
            velocity,
            counts: vals[3 * n..].iter().map(|&c| c as u64).collect(),
            has_observations: sidecar.has_observations,
            provenance: sidecar.provenance,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MapSidecar {
    origin: Point,
    cell_size: f64,
    #[serde(rename = "H_g")]
    h_g: usize,
    #[serde(rename = "W_g")]
    w_g: usize,
    channels: Vec<String>,
    has_observations: bool,
    provenance: MapProvenance,
}

/// Accumulate every observation into a grid over `bounds`: per-cell counts
/// normalized to a frequency distribution, and the arithmetic mean velocity.
/// Trajectories are binned in parallel and merged in input order.
pub fn build_global(
    trajectories: &[AgentTrajectory],
    bounds: &Bounds,
    cell_size: f64,
    provenance: MapProvenance,
) -> Result<ContextMap> {
    let mut map = ContextMap::empty(bounds, cell_size, provenance)?;
    let partials: Vec<Result<Vec<(usize, [f64; 2])>>> = trajectories
        .par_iter()
        .map(|t| {
            t.samples
                .iter()
                .map(|s| {
                    let (r, c) = map.cell_of(s.pos()).ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "observation ({}, {}) of agent {} outside map bounds",
                            s.x, s.y, t.agent_id
                        ))
                    })?;
                    Ok((r * map.cols + c, s.velocity()))
                })
                .collect()
        })
        .collect();
    let mut vsum = vec![0.0; map.rows * map.cols * 2];
    for part in partials {
        for (i, v) in part? {
            map.counts[i] += 1;
            vsum[2 * i] += v[0];
            vsum[2 * i + 1] += v[1];
        }
    }
    let total: u64 = map.counts.iter().sum();
    map.has_observations = total > 0;
    for (i, &n) in map.counts.iter().enumerate() {
        if n > 0 {
            map.density[i] = n as f64 / total as f64;
            map.velocity[2 * i] = vsum[2 * i] / n as f64;
            map.velocity[2 * i + 1] = vsum[2 * i + 1] / n as f64;
        }
    }
    Ok(map)
}

/// Agent-centred crop. Cell `(r, c)` samples the local point
/// `((c − W/2)·cell, (r − H/2)·cell)` in a frame whose +x axis is the agent
/// heading, so the agent sits at `(H/2, W/2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalContext {
    pub height: usize,
    pub width: usize,
    pub density: Vec<f64>,
    /// Local-frame velocity, `H·W·2`.
    pub velocity: Vec<f64>,
    pub center: Point,
    pub rotation: f64,
}

impl LocalContext {
    /// Channels `[density, vx, vy]` per cell, row-major.
    pub fn stacked(&self, density_scale: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.height * self.width * 3);
        for i in 0..self.height * self.width {
            out.push(self.density[i] * density_scale);
            out.push(self.velocity[2 * i]);
            out.push(self.velocity[2 * i + 1]);
        }
        out
    }
}

pub fn extract_local(map: &ContextMap, position: Point, heading: f64, height: usize, width: usize) -> Result<LocalContext> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("crop size must be positive, got {height}x{width}")));
    }
    let n = height * width;
    let mut density = Vec::with_capacity(n);
    let mut velocity = Vec::with_capacity(2 * n);
    let (hr, hc) = ((height / 2) as f64, (width / 2) as f64);
    for r in 0..height {
        for c in 0..width {
            let local = [(c as f64 - hc) * map.cell_size, (r as f64 - hr) * map.cell_size];
            let off = to_world(local, heading);
            let s = map.sample([position[0] + off[0], position[1] + off[1]]);
            let v = to_local([s[1], s[2]], heading);
            density.push(s[0]);
            velocity.extend_from_slice(&v);
        }
    }
    Ok(LocalContext {
        height,
        width,
        density,
        velocity,
        center: position,
        rotation: heading,
    })
}

/// Maps keyed by location.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ContextLibrary {
    pub maps: BTreeMap<String, ContextMap>,
}

impl ContextLibrary {
    /// One map per location from the given `(location, scene_id,
    /// trajectories)` recordings, which must all belong to the training
    /// split.
    pub fn build_train<'a>(
        recordings: impl IntoIterator<Item = (&'a str, &'a str, &'a [AgentTrajectory])>,
        cell_size: f64,
        margin: f64,
    ) -> Result<Self> {
        let mut grouped: BTreeMap<String, (Vec<AgentTrajectory>, BTreeSet<String>)> = BTreeMap::new();
        for (loc, scene, trajs) in recordings {
            let e = grouped.entry(loc.to_string()).or_default();
            e.0.extend_from_slice(trajs);
            e.1.insert(scene.to_string());
        }
        let mut maps = BTreeMap::new();
        for (loc, (trajs, scenes)) in grouped {
            let Some(bounds) = Bounds::covering(&trajs, margin) else {
                continue;
            };
            maps.insert(loc, build_global(&trajs, &bounds, cell_size, MapProvenance::train(scenes))?);
        }
        Ok(Self { maps })
    }

    pub fn get(&self, location: &str) -> Option<&ContextMap> {
        self.maps.get(location)
    }

    /// One `<location>.bin` / `<location>.json` pair per map in `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (loc, map) in &self.maps {
            if loc.is_empty() || loc.contains(['/', '\\']) || loc.starts_with('.') {
                return Err(Error::Data(format!("location `{loc}` is not usable as a file name")));
            }
            map.save(dir.join(loc))?;
        }
        Ok(())
    }

    /// Every map saved in `dir`, keyed by file stem.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut stems = BTreeSet::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|e| e == "bin") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    stems.insert(stem.to_string());
                }
            }
        }
        let maps = stems
            .into_iter()
            .map(|s| Ok((s.clone(), ContextMap::load(dir.join(&s))?)))
            .collect::<Result<_>>()?;
        Ok(Self { maps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AgentType, TrajectorySample};
    use std::f64::consts::FRAC_PI_2;

    fn traj(points: &[(f64, f64, f64, f64)]) -> AgentTrajectory {
        AgentTrajectory {
            agent_id: 0,
            agent_type: AgentType::Vehicle,
            samples: points
                .iter()
                .enumerate()
                .map(|(k, &(x, y, v, psi))| TrajectorySample {
                    t: k as f64,
                    x,
                    y,
                    v,
                    psi,
                })
                .collect(),
        }
    }

    fn square(n: f64) -> Bounds {
        Bounds {
            min: [0.0, 0.0],
            max: [n, n],
        }
    }

    #[test]
    fn single_cell_density() {
        let t = traj(&[(1.5, 1.5, 0., 0.); 4]);
        let m = build_global(&[t], &square(4.0), 1.0, MapProvenance::default()).unwrap();
        let (r, c) = m.cell_of([1.5, 1.5]).unwrap();
        assert_eq!(m.density[r * m.cols + c], 1.0);
        assert!((m.density.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn density_fractions_and_mean_velocity() {
        let t = traj(&[(0.5, 0.5, 1., 0.), (0.5, 0.5, 3., 0.), (0.5, 0.5, 2., 0.), (2.5, 0.5, 1., 0.)]);
        let m = build_global(&[t], &square(3.0), 1.0, MapProvenance::default()).unwrap();
        assert_eq!(m.density[0], 0.75);
        assert_eq!(m.density[2], 0.25);
        assert!((m.velocity[0] - 2.0).abs() < 1e-12 && m.velocity[1].abs() < 1e-12);
        assert_eq!(m.velocity[2], 0.0);
    }

    #[test]
    fn empty_and_out_of_bounds() {
        let m = build_global(&[], &square(3.0), 1.0, MapProvenance::default()).unwrap();
        assert!(!m.has_observations && m.density.iter().all(|&d| d == 0.0));
        let t = traj(&[(10.0, 0.5, 1., 0.)]);
        assert!(build_global(&[t], &square(3.0), 1.0, MapProvenance::default()).is_err());
    }

    fn hot_map(hot: Point) -> ContextMap {
        let mut m = ContextMap::empty(&square(40.0), 1.0, MapProvenance::default()).unwrap();
        let (r, c) = m.cell_of(hot).unwrap();
        m.density[r * m.cols + c] = 1.0;
        m
    }

    #[test]
    fn crop_axis_aligned_and_rotated() {
        let agent = [20.5, 20.5];
        let m = hot_map([25.5, 20.5]);
        let crop = extract_local(&m, agent, 0.0, 16, 16).unwrap();
        assert_eq!(crop.density[8 * 16 + 8 + 5], 1.0);
        let m = hot_map([20.5, 25.5]);
        let crop = extract_local(&m, agent, FRAC_PI_2, 16, 16).unwrap();
        assert!((crop.density[8 * 16 + 8 + 5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn velocity_rotated_into_agent_frame() {
        let mut m = ContextMap::empty(&square(10.0), 1.0, MapProvenance::default()).unwrap();
        for i in 0..m.rows * m.cols {
            m.velocity[2 * i + 1] = 2.0;
        }
        let crop = extract_local(&m, [5.0, 5.0], FRAC_PI_2, 4, 4).unwrap();
        let i = 2 * 4 + 2;
        assert!((crop.velocity[2 * i] - 2.0).abs() < 1e-12);
        assert!(crop.velocity[2 * i + 1].abs() < 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        let t = traj(&[(0.5, 0.5, 1., 0.3), (2.5, 1.5, 2., -1.0)]);
        let m = build_global(&[t], &square(3.0), 1.0, MapProvenance::train(["s1".to_string()])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("map");
        m.save(&stem).unwrap();
        assert_eq!(ContextMap::load(&stem).unwrap(), m);
    }

    #[test]
    fn provenance_guard() {
        let p = MapProvenance::train(["a".to_string(), "b".to_string()]);
        assert!(p.check_disjoint(["c"]).is_ok());
        assert!(p.check_disjoint(["b"]).is_err());
    }
}
