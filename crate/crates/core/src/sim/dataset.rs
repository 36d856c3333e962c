//! Dataset generation and on-disk format.
//!
//! A dataset directory holds `manifest.json` plus raw little-endian tensors:
//! `cfr.bin` (f32 re/im interleaved, `[sample][antenna][subcarrier]`),
//! `coords.bin` (f32 `[sample][3]`, meters) and `labels.bin` (u8 `[sample]`).
//! Samples are ordered by (scene, grid index) with dropped links omitted.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{invalid, Error, Result};
use crate::seed::{rng_for, STREAM_LINK};
use crate::sim::channel::{add_noise, synth_cfr, CfrMatrix};
use crate::sim::scenario::Scenario;
use crate::sim::scene::Scene;
use crate::sim::trace::{trace_paths, SemanticLabel};

pub const DATASET_FORMAT: &str = "semloc-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_order: String,
}

impl TensorSpec {
    pub fn new(file: &str, shape: Vec<usize>, dtype: &str) -> Self {
        Self {
            file: file.into(),
            shape,
            dtype: dtype.into(),
            byte_order: "little".into(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedLink {
    pub scene: usize,
    pub grid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub n_scenes: usize,
    pub n_grid: usize,
    pub n_samples: usize,
    pub antenna_order: String,
    pub label_names: Vec<String>,
    pub dropped: Vec<DroppedLink>,
    pub cfr: TensorSpec,
    pub coords: TensorSpec,
    pub labels: TensorSpec,
    pub scenario: Scenario,
}

impl DatasetManifest {
    /// Scene index of every emitted sample, rebuilt from the drop list.
    pub fn scene_ids(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.n_samples);
        let mut drops = self.dropped.iter().peekable();
        for t in 0..self.n_scenes {
            for l in 0..self.n_grid {
                if drops.peek().is_some_and(|d| d.scene == t && d.grid == l) {
                    drops.next();
                } else {
                    ids.push(t);
                }
            }
        }
        ids
    }

    /// Grid index of every emitted sample.
    pub fn grid_ids(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.n_samples);
        let mut drops = self.dropped.iter().peekable();
        for t in 0..self.n_scenes {
            for l in 0..self.n_grid {
                if drops.peek().is_some_and(|d| d.scene == t && d.grid == l) {
                    drops.next();
                } else {
                    ids.push(l);
                }
            }
        }
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// `[sample][antenna][subcarrier][re, im]`.
    pub cfr: Vec<f32>,
    pub coords: Vec<f32>,
    pub labels: Vec<u8>,
}

struct LinkSample {
    cfr: CfrMatrix,
    label: SemanticLabel,
    coords: [f64; 3],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_antennas(&self) -> usize {
        self.manifest.cfr.shape[1]
    }

    pub fn n_subcarriers(&self) -> usize {
        self.manifest.cfr.shape[2]
    }

    pub fn cfr_matrix(&self, i: usize) -> CfrMatrix {
        let (m, k) = (self.n_antennas(), self.n_subcarriers());
        let chunk = &self.cfr[i * m * k * 2..(i + 1) * m * k * 2];
        CfrMatrix {
            m,
            k,
            data: chunk
                .chunks_exact(2)
                .map(|c| num_complex::Complex64::new(c[0] as f64, c[1] as f64))
                .collect(),
        }
    }

    pub fn coord(&self, i: usize) -> [f64; 3] {
        let c = &self.coords[i * 3..i * 3 + 3];
        [c[0] as f64, c[1] as f64, c[2] as f64]
    }

    pub fn label(&self, i: usize) -> SemanticLabel {
        SemanticLabel::from_u8(self.labels[i]).expect("labels validated on load")
    }

    /// Sample count per label, indexed by label value.
    pub fn label_histogram(&self) -> [usize; 3] {
        let mut h = [0; 3];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        binio::create_dir(dir)?;
        binio::write_f32(&dir.join(&self.manifest.cfr.file), self.cfr.iter().copied())?;
        binio::write_f32(&dir.join(&self.manifest.coords.file), self.coords.iter().copied())?;
        binio::write_bytes(&dir.join(&self.manifest.labels.file), &self.labels)?;
        binio::write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = binio::read_json(&dir.join("manifest.json"))?;
        let bad = |reason: String| Error::InvalidData {
            path: dir.to_path_buf(),
            reason,
        };
        if manifest.format != DATASET_FORMAT {
            return Err(bad(format!("not a dataset directory (format {:?})", manifest.format)));
        }
        let n = manifest.n_samples;
        if manifest.cfr.shape.len() != 4 || manifest.cfr.shape[0] != n || manifest.cfr.shape[3] != 2 {
            return Err(bad(format!("bad cfr shape {:?}", manifest.cfr.shape)));
        }
        if manifest.n_scenes * manifest.n_grid != n + manifest.dropped.len() {
            return Err(bad("sample count disagrees with scenes × grid − dropped".into()));
        }
        let cfr = binio::read_f32(&dir.join(&manifest.cfr.file), manifest.cfr.numel())?;
        let coords = binio::read_f32(&dir.join(&manifest.coords.file), n * 3)?;
        let labels = binio::read_u8(&dir.join(&manifest.labels.file), n)?;
        if labels.iter().any(|&l| SemanticLabel::from_u8(l).is_none()) {
            return Err(bad("label outside {0, 1, 2}".into()));
        }
        Ok(Self {
            manifest,
            cfr,
            coords,
            labels,
        })
    }
}

fn trace_link(scenario: &Scenario, scene: &Scene, seed: u64, grid: usize, ue: crate::geometry::Vec3) -> Result<LinkSample> {
    let n_grid = scenario.ue_grid.len() as u64;
    let mut rng = rng_for(seed, STREAM_LINK, scene.scene_id as u64 * n_grid + grid as u64);
    let p = match scenario.min_paths {
        Some(min) => rng.gen_range(min..=scenario.max_paths),
        None => scenario.max_paths,
    };
    let (mpcs, label) = trace_paths(scenario, scene, ue, p)?;
    let mut cfr = synth_cfr(&mpcs, scenario, &scenario.array)?;
    if let Some(snr) = scenario.snr_db {
        add_noise(&mut cfr, snr, &mut rng);
    }
    Ok(LinkSample {
        cfr,
        label,
        coords: [ue.x, ue.y, ue.z],
    })
}

/// Simulates `n_scenes` scenes over every grid point.
///
/// Scenes are traced in parallel; output order is (scene, grid index) and
/// every random draw is keyed by (seed, scene, grid), so the result does not
/// depend on scheduling.
pub fn generate_dataset(scenario: &Scenario, n_scenes: usize, seed: u64) -> Result<Dataset> {
    scenario.validate()?;
    if n_scenes == 0 {
        return Err(invalid("need at least one scene"));
    }
    let points = scenario.ue_grid.points();
    let per_scene: Vec<Vec<(usize, Result<LinkSample>)>> = (0..n_scenes)
        .into_par_iter()
        .map(|t| {
            let scene = Scene::generate(scenario, seed, t);
            points
                .iter()
                .enumerate()
                .map(|(l, &ue)| (l, trace_link(scenario, &scene, seed, l, ue)))
                .collect()
        })
        .collect();

    let (m, k) = (scenario.array.n_antennas(), scenario.n_subcarriers);
    let mut cfr = Vec::new();
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = Vec::new();
    for (t, links) in per_scene.into_iter().enumerate() {
        for (l, res) in links {
            match res {
                Ok(s) => {
                    cfr.extend(s.cfr.data.iter().flat_map(|z| [z.re as f32, z.im as f32]));
                    coords.extend(s.coords.iter().map(|&c| c as f32));
                    labels.push(s.label as u8);
                }
                Err(Error::EmptyLink) => dropped.push(DroppedLink { scene: t, grid: l }),
                Err(e) => return Err(e),
            }
        }
    }
    let n = labels.len();
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: 1,
        seed,
        n_scenes,
        n_grid: points.len(),
        n_samples: n,
        antenna_order: "m_y-major, m_z-minor".into(),
        label_names: SemanticLabel::ALL.iter().map(|l| l.name().to_string()).collect(),
        dropped,
        cfr: TensorSpec::new("cfr.bin", vec![n, m, k, 2], "f32"),
        coords: TensorSpec::new("coords.bin", vec![n, 3], "f32"),
        labels: TensorSpec::new("labels.bin", vec![n], "u8"),
        scenario: scenario.clone(),
    };
    Ok(Dataset {
        manifest,
        cfr,
        coords,
        labels,
    })
}
