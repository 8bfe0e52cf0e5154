//! Street scenario: vehicles, base stations with cameras, per-slot
//! association, simulated image detections and dataset assembly.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    csi_to_real, synthesize_channel, ChannelConfig, ChannelError, CsiMatrix, CsiTensor, LsEstimator,
    PilotBlock,
};
use crate::geometry::{pixel_to_polar, polar_to_world, world_to_pixel, CameraConfig, GeometryError, WorldCoord2D};
use crate::rng::{stream, task_rng, TaskRng};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid world configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("inconsistent dataset sizes: {0}")]
    InconsistentSizes(String),
    #[error("could not fill the {what} split within {slots} generated slots")]
    Insufficient { what: &'static str, slots: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, p: WorldCoord2D) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn centre(&self) -> WorldCoord2D {
        WorldCoord2D::new(0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn sample(&self, rng: &mut TaskRng) -> WorldCoord2D {
        WorldCoord2D::new(
            rng.random_range(self.x_min..=self.x_max),
            rng.random_range(self.y_min..=self.y_max),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub bs_positions: Vec<WorldCoord2D>,
    /// Cameras mounted at each base station; every BS carries the same count.
    pub camera_configs: Vec<Vec<CameraConfig>>,
    pub street_bounds: Rect,
    /// Inclusive range of vehicles placed per slot.
    pub vehicles_per_slot: [usize; 2],
    /// Minimum distance between vehicle reference points (m).
    pub min_vehicle_separation: f64,
    pub detection_distance_noise_std: f64,
    pub detection_miss_prob: f64,
    pub x_axis_cutoff: f64,
    pub dedup_radius: f64,
    pub a3_hysteresis: f64,
}

impl WorldConfig {
    pub fn n_bs(&self) -> usize {
        self.bs_positions.len()
    }

    pub fn cameras_per_bs(&self) -> usize {
        self.camera_configs.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::InvalidConfig(m));
        if self.bs_positions.is_empty() {
            return bad("at least one base station is required".into());
        }
        if self.camera_configs.len() != self.n_bs() {
            return bad(format!(
                "camera_configs lists {} stations but bs_positions has {}",
                self.camera_configs.len(),
                self.n_bs()
            ));
        }
        let c = self.cameras_per_bs();
        if c == 0 || self.camera_configs.iter().any(|v| v.len() != c) {
            return bad("every base station needs the same non-zero number of cameras".into());
        }
        for (b, cams) in self.camera_configs.iter().enumerate() {
            for (i, cam) in cams.iter().enumerate() {
                cam.validate()
                    .map_err(|e| ScenarioError::InvalidConfig(format!("camera {i} of bs {b}: {e}")))?;
            }
        }
        let r = &self.street_bounds;
        if !(r.x_max > r.x_min && r.y_max > r.y_min) {
            return bad("street_bounds must have positive extent".into());
        }
        if self.vehicles_per_slot[0] > self.vehicles_per_slot[1] {
            return bad("vehicles_per_slot lower bound exceeds upper bound".into());
        }
        if !(self.x_axis_cutoff > 0.0) {
            return bad(format!("x_axis_cutoff must be positive, got {}", self.x_axis_cutoff));
        }
        if !(self.dedup_radius > 0.0) {
            return bad(format!("dedup_radius must be positive, got {}", self.dedup_radius));
        }
        if !(0.0..=1.0).contains(&self.detection_miss_prob) {
            return bad(format!(
                "detection_miss_prob must be in [0, 1], got {}",
                self.detection_miss_prob
            ));
        }
        if !(self.detection_distance_noise_std >= 0.0) || !(self.a3_hysteresis >= 0.0) {
            return bad("noise std and hysteresis must be non-negative".into());
        }
        if !(self.min_vehicle_separation >= 0.0) {
            return bad("min_vehicle_separation must be non-negative".into());
        }
        Ok(())
    }

    /// Two stations on opposite kerbs of a straight street, three cameras
    /// each fanned across the carriageway.
    pub fn two_station_street() -> Self {
        let bs_positions = vec![WorldCoord2D::new(50.0, -12.0), WorldCoord2D::new(110.0, 12.0)];
        let normals = [FRAC_PI_2, -FRAC_PI_2];
        let spread = 60f64.to_radians();
        let camera_configs = bs_positions
            .iter()
            .zip(normals)
            .map(|(&pos, normal)| {
                [-spread, 0.0, spread]
                    .iter()
                    .map(|off| CameraConfig {
                        mount_position: pos,
                        yaw: crate::geometry::wrap_angle(normal + off),
                        axis_polar: 60f64.to_radians(),
                        fov_azimuth: 70f64.to_radians(),
                        fov_elevation: 56f64.to_radians(),
                        image_width: 1280,
                        image_height: 720,
                        mount_height_delta: 6.0,
                    })
                    .collect()
            })
            .collect();
        Self {
            bs_positions,
            camera_configs,
            street_bounds: Rect { x_min: 0.0, x_max: 160.0, y_min: -8.0, y_max: 8.0 },
            vehicles_per_slot: [4, 8],
            min_vehicle_separation: 4.0,
            detection_distance_noise_std: 1.0,
            detection_miss_prob: 0.15,
            x_axis_cutoff: 55.0,
            dedup_radius: 1.0,
            a3_hysteresis: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: u32,
    pub position: WorldCoord2D,
    /// Direction of travel along the street, `+1` or `-1`.
    pub heading: i8,
}

/// Ground-truth correspondence for one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthLink {
    pub bs: usize,
    pub csi_index: usize,
    pub detection: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub vehicles: Vec<Vehicle>,
    /// Serving base station per vehicle.
    pub association: Vec<usize>,
    /// CSI reported to each base station.
    pub csi: Vec<Vec<CsiMatrix>>,
    /// Vehicle index owning each CSI, parallel to `csi`.
    pub csi_owner: Vec<Vec<usize>>,
    /// Fused image-derived positions.
    pub detections: Vec<WorldCoord2D>,
    /// One entry per vehicle.
    pub truth_links: Vec<TruthLink>,
}

impl Snapshot {
    pub fn n_csi(&self) -> usize {
        self.csi.iter().map(Vec::len).sum()
    }

    /// `(bs, csi_index)` for every CSI in BS-major order; this is the row
    /// order of the matching cost matrix.
    pub fn rows(&self) -> Vec<(usize, usize)> {
        self.csi
            .iter()
            .enumerate()
            .flat_map(|(b, list)| (0..list.len()).map(move |i| (b, i)))
            .collect()
    }

    pub fn row_index(&self, bs: usize, csi_index: usize) -> usize {
        self.csi[..bs].iter().map(Vec::len).sum::<usize>() + csi_index
    }

    /// Vehicle that produced detection `j`.
    pub fn detection_owner(&self, j: usize) -> Option<usize> {
        self.truth_links.iter().position(|l| l.detection == Some(j))
    }

    /// True position of the vehicle behind each row.
    pub fn row_truth(&self) -> Vec<WorldCoord2D> {
        self.rows()
            .into_iter()
            .map(|(b, i)| self.vehicles[self.csi_owner[b][i]].position)
            .collect()
    }

    /// Ground-truth detection index for every row (`None` when undetected).
    pub fn row_truth_detection(&self) -> Vec<Option<usize>> {
        self.rows()
            .into_iter()
            .map(|(b, i)| self.truth_links[self.csi_owner[b][i]].detection)
            .collect()
    }
}

/// Greedily collapses the closest pair of points lying strictly within
/// `radius` into their midpoint until no such pair remains. Returns the fused
/// points together with the input indices merged into each.
pub fn fuse_detections(points: &[WorldCoord2D], radius: f64) -> Vec<(WorldCoord2D, Vec<usize>)> {
    let mut clusters: Vec<(WorldCoord2D, Vec<usize>)> =
        points.iter().enumerate().map(|(i, &p)| (p, vec![i])).collect();
    let r2 = radius * radius;
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let d2 = clusters[i].0.distance_sq(clusters[j].0);
                if d2 < r2 && best.is_none_or(|(bd, _, _)| d2 < bd) {
                    best = Some((d2, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        let (pj, mj) = clusters.swap_remove(j);
        let (pi, mi) = &mut clusters[i];
        *pi = pi.midpoint(pj);
        mi.extend(mj);
    }
    clusters
}

/// Synthesises slots for a fixed world and radio configuration.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub world: WorldConfig,
    pub channel: ChannelConfig,
    estimator: LsEstimator,
}

impl Simulator {
    pub fn new(world: WorldConfig, channel: ChannelConfig) -> Result<Self, ScenarioError> {
        world.validate()?;
        channel.validate()?;
        let estimator = LsEstimator::new(&PilotBlock::from_config(&channel)?)?;
        Ok(Self { world, channel, estimator })
    }

    fn nearest_bs(&self, p: WorldCoord2D) -> usize {
        let mut best = 0;
        for (b, bs) in self.world.bs_positions.iter().enumerate() {
            if bs.distance(p) < self.world.bs_positions[best].distance(p) {
                best = b;
            }
        }
        best
    }

    /// A3-style association: the vehicle keeps the station it was served by
    /// upstream unless the nearest station is better by more than the
    /// hysteresis margin.
    pub fn associate(&self, v: &Vehicle) -> usize {
        let w = &self.world;
        let nearest = self.nearest_bs(v.position);
        let upstream =
            v.position - WorldCoord2D::new(f64::from(v.heading) * 2.0 * w.a3_hysteresis, 0.0);
        let previous = self.nearest_bs(upstream);
        let gain = w.bs_positions[previous].distance(v.position) - w.bs_positions[nearest].distance(v.position);
        if gain > w.a3_hysteresis {
            nearest
        } else {
            previous
        }
    }

    fn place_vehicles(&self, rng: &mut TaskRng) -> Vec<Vehicle> {
        let [lo, hi] = self.world.vehicles_per_slot;
        let n = rng.random_range(lo..=hi);
        let mut out: Vec<Vehicle> = Vec::with_capacity(n);
        let sep = self.world.min_vehicle_separation;
        for _ in 0..n {
            for _attempt in 0..100 {
                let p = self.world.street_bounds.sample(rng);
                if out.iter().all(|v| v.position.distance(p) >= sep) {
                    let heading = if rng.random_bool(0.5) { 1 } else { -1 };
                    out.push(Vehicle { id: out.len() as u32, position: p, heading });
                    break;
                }
            }
        }
        out
    }

    pub fn generate_snapshot(&self, rng: &mut TaskRng) -> Result<Snapshot, ScenarioError> {
        let w = &self.world;
        let n_bs = w.n_bs();
        let vehicles = self.place_vehicles(rng);
        let association: Vec<usize> = vehicles.iter().map(|v| self.associate(v)).collect();

        let mut csi = vec![Vec::new(); n_bs];
        let mut csi_owner = vec![Vec::new(); n_bs];
        let mut csi_index = vec![0usize; vehicles.len()];
        for (vi, v) in vehicles.iter().enumerate() {
            let b = association[vi];
            let truth = synthesize_channel(w.bs_positions[b], v.position, &self.channel);
            csi_index[vi] = csi[b].len();
            csi[b].push(self.estimator.estimate(&truth, rng)?);
            csi_owner[b].push(vi);
        }

        // Image ranging error is a property of the vehicle in this slot,
        // applied along the line from its serving station.
        let ranged: Vec<WorldCoord2D> = vehicles
            .iter()
            .zip(&association)
            .map(|(v, &b)| {
                let bs = w.bs_positions[b];
                let rel = v.position - bs;
                let d = rel.norm();
                let e: f64 = rng.sample::<f64, _>(StandardNormal) * w.detection_distance_noise_std;
                let d_noisy = (d + e).max(0.1);
                bs + rel.scale(d_noisy / d)
            })
            .collect();

        let mut raw = Vec::new();
        let mut raw_owner = Vec::new();
        for (b, cams) in w.camera_configs.iter().enumerate() {
            for cam in cams {
                for (vi, v) in vehicles.iter().enumerate() {
                    let visible = world_to_pixel(v.position, cam).is_ok();
                    let missed = rng.random_bool(w.detection_miss_prob);
                    if !visible || missed {
                        continue;
                    }
                    if let Some(p) = detect(ranged[vi], cam) {
                        if (p.x - w.bs_positions[b].x).abs() <= w.x_axis_cutoff {
                            raw.push(p);
                            raw_owner.push(vi);
                        }
                    }
                }
            }
        }

        let fused = fuse_detections(&raw, w.dedup_radius);
        let mut link_det: Vec<Option<usize>> = vec![None; vehicles.len()];
        let mut detections = Vec::with_capacity(fused.len());
        for (p, members) in fused {
            let mut owners: Vec<usize> = members.iter().map(|&m| raw_owner[m]).collect();
            owners.sort_unstable();
            owners.dedup();
            let free: Vec<usize> = owners.iter().copied().filter(|&o| link_det[o].is_none()).collect();
            let pool = if free.is_empty() { &owners } else { &free };
            let owner = *pool
                .iter()
                .min_by(|&&a, &&b| {
                    vehicles[a].position.distance_sq(p).total_cmp(&vehicles[b].position.distance_sq(p))
                })
                .expect("cluster has members");
            link_det[owner] = Some(detections.len());
            detections.push(p);
        }

        let truth_links = (0..vehicles.len())
            .map(|vi| TruthLink { bs: association[vi], csi_index: csi_index[vi], detection: link_det[vi] })
            .collect();
        Ok(Snapshot { vehicles, association, csi, csi_owner, detections, truth_links })
    }
}

/// Camera measurement of a (range-perturbed) point: project, back-project.
fn detect(point: WorldCoord2D, cam: &CameraConfig) -> Option<WorldCoord2D> {
    let px = world_to_pixel(point, cam).ok()?;
    let dir = pixel_to_polar(px, cam).ok()?;
    polar_to_world(dir, cam).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub csi: CsiTensor,
    pub position: WorldCoord2D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub labeled_per_bs: usize,
    pub validation_per_bs: usize,
    pub multimodal: usize,
    pub test: usize,
    pub max_slots: usize,
}

impl DatasetSizes {
    /// Validation split sized at one third of the labeled split.
    pub fn from_labeled(labeled_per_bs: usize, multimodal: usize, test: usize) -> Self {
        Self {
            labeled_per_bs,
            validation_per_bs: labeled_per_bs / 3,
            multimodal,
            test,
            max_slots: 100 * (labeled_per_bs + multimodal + test + 10),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.validation_per_bs != self.labeled_per_bs / 3 {
            return Err(ScenarioError::InconsistentSizes(format!(
                "validation_per_bs must be labeled_per_bs / 3 = {}, got {}",
                self.labeled_per_bs / 3,
                self.validation_per_bs
            )));
        }
        if self.labeled_per_bs == 0 || self.validation_per_bs == 0 {
            return Err(ScenarioError::InconsistentSizes(
                "labeled and validation splits must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub labeled: Vec<Vec<LabeledSample>>,
    pub validation: Vec<Vec<LabeledSample>>,
    pub multimodal: Vec<Snapshot>,
    pub test: Vec<Snapshot>,
}

const CHUNK: usize = 64;

struct SlotStream<'a> {
    sim: &'a Simulator,
    seed: u64,
    next: usize,
    buffer: std::collections::VecDeque<Snapshot>,
}

impl SlotStream<'_> {
    fn pull(&mut self) -> Result<Snapshot, ScenarioError> {
        if self.buffer.is_empty() {
            let start = self.next;
            let batch: Result<Vec<Snapshot>, ScenarioError> = (start..start + CHUNK)
                .into_par_iter()
                .map(|s| self.sim.generate_snapshot(&mut task_rng(self.seed, &[stream::SLOT, s as u64])))
                .collect();
            self.buffer.extend(batch?);
        }
        self.next += 1;
        Ok(self.buffer.pop_front().expect("buffer refilled"))
    }
}

/// Generates all splits from one seeded slot stream. Labeled and validation
/// samples come from the first slots, then the multimodal and test splits
/// take the following non-empty slots in order.
pub fn build_datasets(sim: &Simulator, sizes: DatasetSizes, seed: u64) -> Result<DatasetBundle, ScenarioError> {
    sizes.validate()?;
    let n_bs = sim.world.n_bs();
    let mut slots = SlotStream { sim, seed, next: 0, buffer: Default::default() };
    let mut labeled = vec![Vec::with_capacity(sizes.labeled_per_bs); n_bs];
    let mut validation = vec![Vec::with_capacity(sizes.validation_per_bs); n_bs];

    let full = |l: &Vec<Vec<LabeledSample>>, v: &Vec<Vec<LabeledSample>>| {
        l.iter().all(|x| x.len() >= sizes.labeled_per_bs) && v.iter().all(|x| x.len() >= sizes.validation_per_bs)
    };
    while !full(&labeled, &validation) {
        if slots.next >= sizes.max_slots {
            return Err(ScenarioError::Insufficient { what: "labeled/validation", slots: slots.next });
        }
        let snap = slots.pull()?;
        for (b, list) in snap.csi.iter().enumerate() {
            for (i, h) in list.iter().enumerate() {
                let sample = LabeledSample {
                    csi: csi_to_real(h),
                    position: snap.vehicles[snap.csi_owner[b][i]].position,
                };
                if labeled[b].len() < sizes.labeled_per_bs {
                    labeled[b].push(sample);
                } else if validation[b].len() < sizes.validation_per_bs {
                    validation[b].push(sample);
                }
            }
        }
    }

    let mut take = |count: usize, what: &'static str| -> Result<Vec<Snapshot>, ScenarioError> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if slots.next >= sizes.max_slots {
                return Err(ScenarioError::Insufficient { what, slots: slots.next });
            }
            let snap = slots.pull()?;
            if !snap.vehicles.is_empty() {
                out.push(snap);
            }
        }
        Ok(out)
    };
    let multimodal = take(sizes.multimodal, "multimodal")?;
    let test = take(sizes.test, "test")?;
    Ok(DatasetBundle { labeled, validation, multimodal, test })
}

/// Replaces each detection, independently with probability `fraction`, by a
/// point drawn uniformly over `bounds`. Truth links are left untouched, so the
/// corrupted detection becomes a wrong label for its vehicle. Returns the
/// number of corrupted detections.
pub fn corrupt_detections(snapshots: &mut [Snapshot], fraction: f64, bounds: &Rect, seed: u64) -> usize {
    let mut count = 0;
    for (k, snap) in snapshots.iter_mut().enumerate() {
        let mut rng = task_rng(seed, &[stream::CORRUPTION, k as u64]);
        for d in &mut snap.detections {
            if rng.random_bool(fraction) {
                *d = bounds.sample(&mut rng);
                count += 1;
            }
        }
    }
    count
}
