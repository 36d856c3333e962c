//! Direct path plus first-order image-method reflections.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::sim::scenario::{Scenario, SPEED_OF_LIGHT};
use crate::sim::scene::Scene;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mpc {
    pub gain: Complex64,
    pub azimuth: f64,
    pub elevation: f64,
    pub delay: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MpcSet {
    pub paths: Vec<Mpc>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum SemanticLabel {
    Los = 0,
    Dnlos = 1,
    Snlos = 2,
}

impl SemanticLabel {
    pub const ALL: [SemanticLabel; 3] = [Self::Los, Self::Dnlos, Self::Snlos];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Los => "LOS",
            Self::Dnlos => "DNLOS",
            Self::Snlos => "SNLOS",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObstacleKind {
    Building,
    Vehicle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obstacle {
    pub aabb: Aabb,
    pub kind: ObstacleKind,
}

/// Buildings first, then the scene's vehicles.
pub fn obstacles(scenario: &Scenario, scene: &Scene) -> Vec<Obstacle> {
    let b = scenario.buildings.iter().map(|&aabb| Obstacle {
        aabb,
        kind: ObstacleKind::Building,
    });
    let v = scene.vehicles.iter().map(|&aabb| Obstacle {
        aabb,
        kind: ObstacleKind::Vehicle,
    });
    b.chain(v).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathKind {
    Direct,
    /// Specular bounce off face `(axis, upper)` of obstacle `obstacle`.
    Reflection {
        obstacle: usize,
        axis: usize,
        upper: bool,
    },
}

/// A geometric path candidate before occlusion filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub kind: PathKind,
    /// BS, optional bounce point, UE.
    pub vertices: Vec<Vec3>,
    pub length: f64,
}

impl Candidate {
    pub fn segments(&self) -> impl Iterator<Item = (Vec3, Vec3)> + '_ {
        self.vertices.windows(2).map(|w| (w[0], w[1]))
    }

    fn reflector(&self) -> Option<usize> {
        match self.kind {
            PathKind::Direct => None,
            PathKind::Reflection { obstacle, .. } => Some(obstacle),
        }
    }

    /// Obstacles (by index) whose interior any segment of this path crosses.
    pub fn blockers(&self, obstacles: &[Obstacle]) -> Vec<usize> {
        let skip = self.reflector();
        (0..obstacles.len())
            .filter(|&i| Some(i) != skip)
            .filter(|&i| {
                self.segments()
                    .any(|(a, b)| obstacles[i].aabb.blocks_segment(a, b))
            })
            .collect()
    }
}

/// Direct path and every geometrically valid first-order reflection.
///
/// A face reflects when both endpoints lie strictly in front of its plane and
/// the segment from the mirrored BS to the UE meets the plane inside the face.
pub fn candidates(bs: Vec3, ue: Vec3, obstacles: &[Obstacle]) -> Vec<Candidate> {
    let mut out = vec![Candidate {
        kind: PathKind::Direct,
        vertices: vec![bs, ue],
        length: bs.distance(ue),
    }];
    for (i, ob) in obstacles.iter().enumerate() {
        for axis in 0..3 {
            for upper in [false, true] {
                let plane = if upper {
                    ob.aabb.max.get(axis)
                } else {
                    ob.aabb.min.get(axis)
                };
                let sign = if upper { 1.0 } else { -1.0 };
                if sign * (bs.get(axis) - plane) <= 0.0 || sign * (ue.get(axis) - plane) <= 0.0 {
                    continue;
                }
                let mut image = bs;
                image.set(axis, 2.0 * plane - bs.get(axis));
                let t = (plane - image.get(axis)) / (ue.get(axis) - image.get(axis));
                let mut q = image + (ue - image) * t;
                q.set(axis, plane);
                let inside = (0..3).filter(|&a| a != axis).all(|a| {
                    q.get(a) >= ob.aabb.min.get(a) && q.get(a) <= ob.aabb.max.get(a)
                });
                if inside {
                    out.push(Candidate {
                        kind: PathKind::Reflection {
                            obstacle: i,
                            axis,
                            upper,
                        },
                        vertices: vec![bs, q, ue],
                        length: image.distance(ue),
                    });
                }
            }
        }
    }
    out
}

/// Label from the set of obstacles crossing the direct segment.
pub fn label_from_blockers(blockers: &[usize], obstacles: &[Obstacle]) -> SemanticLabel {
    if blockers.is_empty() {
        SemanticLabel::Los
    } else if blockers
        .iter()
        .any(|&i| obstacles[i].kind == ObstacleKind::Building)
    {
        SemanticLabel::Snlos
    } else {
        SemanticLabel::Dnlos
    }
}

/// Azimuth and elevation (from zenith) of the departure direction `d`.
pub fn departure_angles(d: Vec3) -> (f64, f64) {
    let n = d.norm();
    ((d.y).atan2(d.x), (d.z / n).clamp(-1.0, 1.0).acos())
}

/// Traces one link, keeping at most `max_paths` strongest surviving paths.
pub fn trace_paths(
    scenario: &Scenario,
    scene: &Scene,
    ue: Vec3,
    max_paths: usize,
) -> Result<(MpcSet, SemanticLabel)> {
    let obstacles = obstacles(scenario, scene);
    let bs = scenario.bs_position;
    let lambda = scenario.wavelength();
    let mut label = SemanticLabel::Los;
    let mut paths = Vec::new();
    for cand in candidates(bs, ue, &obstacles) {
        let blockers = cand.blockers(&obstacles);
        if cand.kind == PathKind::Direct {
            label = label_from_blockers(&blockers, &obstacles);
        }
        if !blockers.is_empty() {
            continue;
        }
        let d = cand.length;
        let mut gain =
            Complex64::from_polar(lambda / (4.0 * std::f64::consts::PI * d), -2.0 * std::f64::consts::PI * d / lambda);
        if cand.kind != PathKind::Direct {
            gain *= scenario.reflection_coeff;
        }
        let (azimuth, elevation) = departure_angles(cand.vertices[1] - bs);
        paths.push(Mpc {
            gain,
            azimuth,
            elevation,
            delay: d / SPEED_OF_LIGHT,
        });
    }
    if paths.is_empty() {
        return Err(Error::EmptyLink);
    }
    paths.sort_by(|a, b| b.gain.norm().total_cmp(&a.gain.norm()));
    paths.truncate(max_paths);
    Ok((MpcSet { paths }, label))
}
