use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb, Vec3};
use crate::seed::{rng_for, STREAM_SCENE};
use crate::sim::scenario::Scenario;

const PLACEMENT_ATTEMPTS: usize = 64;

/// One snapshot of vehicle positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: usize,
    pub vehicles: Vec<Aabb>,
}

impl Scene {
    pub fn empty(scene_id: usize) -> Self {
        Self {
            scene_id,
            vehicles: Vec::new(),
        }
    }

    /// Draws vehicles for scene `scene_id` from the stream
    /// `derive_seed(seed, STREAM_SCENE, scene_id)`.
    ///
    /// Per lane: count `n ~ U{vehicles_min, vehicles_max}`, then each vehicle
    /// picks a class by weight and a uniform x position; placements that
    /// would violate `min_gap` are retried and finally skipped.
    pub fn generate(scenario: &Scenario, seed: u64, scene_id: usize) -> Self {
        let mut rng = rng_for(seed, STREAM_SCENE, scene_id as u64);
        let total_weight: f64 = scenario.vehicle_classes.iter().map(|c| c.weight).sum();
        let mut vehicles = Vec::new();
        for lane in &scenario.lanes {
            let n = rng.gen_range(lane.vehicles_min..=lane.vehicles_max);
            let mut placed: Vec<(f64, f64)> = Vec::new();
            for _ in 0..n {
                let mut pick = rng.gen::<f64>() * total_weight;
                let class = scenario
                    .vehicle_classes
                    .iter()
                    .find(|c| {
                        pick -= c.weight;
                        pick < 0.0
                    })
                    .unwrap_or_else(|| scenario.vehicle_classes.last().unwrap());
                let room = lane.x_max - lane.x_min - class.length;
                if room < 0.0 {
                    continue;
                }
                for _ in 0..PLACEMENT_ATTEMPTS {
                    let x0 = lane.x_min + rng.gen::<f64>() * room;
                    let x1 = x0 + class.length;
                    let clear = placed
                        .iter()
                        .all(|&(a, b)| x1 + lane.min_gap <= a || x0 >= b + lane.min_gap);
                    if clear {
                        placed.push((x0, x1));
                        let hw = class.width / 2.0;
                        vehicles.push(Aabb::new(
                            Vec3::new(x0, lane.y_center - hw, 0.0),
                            Vec3::new(x1, lane.y_center + hw, class.height),
                        ));
                        break;
                    }
                }
            }
        }
        Self { scene_id, vehicles }
    }
}
