//! CSI fingerprints (ADP, SCM, RCSI) and input normalization.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::sim::dataset::{Dataset, DatasetManifest, TensorSpec};
use crate::sim::{ArrayGeometry, CfrMatrix};

pub const FEATURES_FORMAT: &str = "semloc-features";
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FingerprintKind {
    Adp,
    Scm,
    Rcsi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationScheme {
    /// Each antenna row scaled to unit max-abs.
    Aw,
    /// Each subcarrier column scaled to unit max-abs.
    Sw,
    /// Whole tensor scaled to unit max-abs.
    Mw,
    /// Identity.
    Na,
}

macro_rules! text_enum {
    ($t:ty, $($v:ident => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok(Self::$v),)+
                    other => Err(format!("unknown value {other:?}")),
                }
            }
        }
    };
}

text_enum!(FingerprintKind, Adp => "adp", Scm => "scm", Rcsi => "rcsi");
text_enum!(NormalizationScheme, Aw => "aw", Sw => "sw", Mw => "mw", Na => "na");

impl FingerprintKind {
    /// Per-sample tensor shape for `m` antennas and `k` subcarriers.
    pub fn shape(self, m: usize, k: usize) -> Vec<usize> {
        match self {
            Self::Adp => vec![m, k],
            Self::Scm => vec![2, m, m],
            Self::Rcsi => vec![2, m, k],
        }
    }

    /// Network input shape `[C, H, W]`.
    pub fn input_shape(self, m: usize, k: usize) -> [usize; 3] {
        match self {
            Self::Adp => [1, m, k],
            Self::Scm => [2, m, m],
            Self::Rcsi => [2, m, k],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fingerprint {
    pub kind: FingerprintKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Fingerprint {
    /// Rows are the second-to-last axis, columns the last; leading planes are pooled.
    fn rows_cols(&self) -> (usize, usize, usize) {
        let r = self.shape.len();
        let (rows, cols) = (self.shape[r - 2], self.shape[r - 1]);
        (self.data.len() / (rows * cols), rows, cols)
    }
}

/// `(1/√n)·exp(−j2π·i·k/n)`.
pub fn unitary_dft(n: usize) -> CfrMatrix {
    let s = 1.0 / (n as f64).sqrt();
    CfrMatrix::from_fn(n, n, |i, k| {
        let e = ((i * k) % n) as f64 / n as f64;
        Complex64::from_polar(s, -2.0 * std::f64::consts::PI * e)
    })
}

/// `(1/√m)·exp(−j2π·i·(k − m/2)/m)`.
pub fn shifted_dft(m: usize) -> CfrMatrix {
    let s = 1.0 / (m as f64).sqrt();
    CfrMatrix::from_fn(m, m, |i, k| {
        let phase = -2.0 * std::f64::consts::PI * i as f64 * (k as f64 - m as f64 / 2.0) / m as f64;
        Complex64::from_polar(s, phase)
    })
}

/// Precomputed angle-delay transform for a fixed array and subcarrier count.
///
/// `G = (1/√(MK))·(V_yᴴ ⊗ V_zᴴ)·H·F*` is evaluated separably: the Kronecker
/// factor acts on the (m_y, m_z) axes of H and `F*` is an inverse FFT along
/// subcarriers.
pub struct AdpTransform {
    array: ArrayGeometry,
    k: usize,
    vy_h: CfrMatrix,
    vz_h: CfrMatrix,
    ifft: Arc<dyn Fft<f64>>,
}

fn conj_transpose(a: &CfrMatrix) -> CfrMatrix {
    CfrMatrix::from_fn(a.k, a.m, |i, j| a.get(j, i).conj())
}

impl AdpTransform {
    pub fn new(array: ArrayGeometry, k: usize) -> Self {
        Self {
            array,
            k,
            vy_h: conj_transpose(&shifted_dft(array.m_y)),
            vz_h: conj_transpose(&shifted_dft(array.m_z)),
            ifft: FftPlanner::new().plan_fft_inverse(k),
        }
    }

    /// Complex angle-delay matrix `G`, shape `[M, K]`.
    pub fn g(&self, h: &CfrMatrix) -> Result<CfrMatrix> {
        let (my, mz, k) = (self.array.m_y, self.array.m_z, self.k);
        if h.m != my * mz || h.k != k {
            return Err(Error::ShapeMismatch(format!(
                "adp expects {}x{}, got {}x{}",
                my * mz,
                k,
                h.m,
                h.k
            )));
        }
        let zero = Complex64::new(0.0, 0.0);
        // apply V_zᴴ along m_z
        let mut t = vec![zero; my * mz * k];
        for y in 0..my {
            for b in 0..mz {
                let out = &mut t[(y * mz + b) * k..(y * mz + b + 1) * k];
                for z in 0..mz {
                    let c = self.vz_h.get(b, z);
                    let row = &h.data[(y * mz + z) * k..(y * mz + z + 1) * k];
                    out.iter_mut().zip(row).for_each(|(o, v)| *o += c * v);
                }
            }
        }
        // apply V_yᴴ along m_y
        let mut g = vec![zero; my * mz * k];
        for a in 0..my {
            for y in 0..my {
                let c = self.vy_h.get(a, y);
                for b in 0..mz {
                    let src = &t[(y * mz + b) * k..(y * mz + b + 1) * k];
                    let out = &mut g[(a * mz + b) * k..(a * mz + b + 1) * k];
                    out.iter_mut().zip(src).for_each(|(o, v)| *o += c * v);
                }
            }
        }
        // F* = conj of unitary DFT: unnormalized inverse FFT times 1/√K
        let scale = 1.0 / ((my * mz * k) as f64).sqrt() / (k as f64).sqrt();
        for row in g.chunks_exact_mut(k) {
            self.ifft.process(row);
            row.iter_mut().for_each(|v| *v *= scale);
        }
        Ok(CfrMatrix {
            m: my * mz,
            k,
            data: g,
        })
    }

    pub fn adp(&self, h: &CfrMatrix) -> Result<Fingerprint> {
        let g = self.g(h)?;
        Ok(Fingerprint {
            kind: FingerprintKind::Adp,
            shape: vec![g.m, g.k],
            data: g.data.iter().map(|z| z.norm_sqr()).collect(),
        })
    }
}

/// Angle-delay power `X = |G|²`.
pub fn adp(h: &CfrMatrix, array: &ArrayGeometry) -> Result<Fingerprint> {
    AdpTransform::new(*array, h.k).adp(h)
}

/// `C = (1/K)·H·Hᴴ` as re/im planes, shape `[2, M, M]`.
pub fn scm(h: &CfrMatrix) -> Fingerprint {
    let (m, k) = (h.m, h.k);
    let mut data = vec![0.0; 2 * m * m];
    for i in 0..m {
        for j in 0..m {
            let ri = &h.data[i * k..(i + 1) * k];
            let rj = &h.data[j * k..(j + 1) * k];
            let c: Complex64 = ri.iter().zip(rj).map(|(a, b)| a * b.conj()).sum::<Complex64>() / k as f64;
            data[i * m + j] = c.re;
            data[m * m + i * m + j] = c.im;
        }
    }
    Fingerprint {
        kind: FingerprintKind::Scm,
        shape: vec![2, m, m],
        data,
    }
}

/// Re/im planes of `H`, shape `[2, M, K]`.
pub fn rcsi(h: &CfrMatrix) -> Fingerprint {
    let mut data: Vec<f64> = h.data.iter().map(|z| z.re).collect();
    data.extend(h.data.iter().map(|z| z.im));
    Fingerprint {
        kind: FingerprintKind::Rcsi,
        shape: vec![2, h.m, h.k],
        data,
    }
}

/// Max-abs scaling over rows (AW), columns (SW) or the whole tensor (MW).
/// Divisors are floored at [`NORM_EPS`].
pub fn normalize(x: &Fingerprint, scheme: NormalizationScheme) -> Fingerprint {
    let (planes, rows, cols) = x.rows_cols();
    let idx = |p: usize, r: usize, c: usize| (p * rows + r) * cols + c;
    let mut out = x.clone();
    match scheme {
        NormalizationScheme::Na => {}
        NormalizationScheme::Mw => {
            let d = x.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(NORM_EPS);
            out.data.iter_mut().for_each(|v| *v /= d);
        }
        NormalizationScheme::Aw => {
            for r in 0..rows {
                let mut d = 0.0f64;
                for p in 0..planes {
                    for c in 0..cols {
                        d = d.max(x.data[idx(p, r, c)].abs());
                    }
                }
                let d = d.max(NORM_EPS);
                for p in 0..planes {
                    for c in 0..cols {
                        out.data[idx(p, r, c)] /= d;
                    }
                }
            }
        }
        NormalizationScheme::Sw => {
            for c in 0..cols {
                let mut d = 0.0f64;
                for p in 0..planes {
                    for r in 0..rows {
                        d = d.max(x.data[idx(p, r, c)].abs());
                    }
                }
                let d = d.max(NORM_EPS);
                for p in 0..planes {
                    for r in 0..rows {
                        out.data[idx(p, r, c)] /= d;
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub format: String,
    pub version: u32,
    pub kind: FingerprintKind,
    pub normalization: NormalizationScheme,
    pub sample_shape: Vec<usize>,
    pub n_samples: usize,
    pub features: TensorSpec,
    pub coords: TensorSpec,
    pub labels: TensorSpec,
    /// Manifest of the dataset the features were extracted from.
    pub source: DatasetManifest,
}

/// Fingerprints for every sample of a dataset, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub manifest: FeatureManifest,
    pub data: Vec<f32>,
    pub coords: Vec<f32>,
    pub labels: Vec<u8>,
}

impl FeatureSet {
    pub fn extract(ds: &Dataset, kind: FingerprintKind, norm: NormalizationScheme) -> Result<Self> {
        let array = ds.manifest.scenario.array;
        let (m, k) = (ds.n_antennas(), ds.n_subcarriers());
        if array.n_antennas() != m {
            return Err(Error::ShapeMismatch("array size disagrees with cfr tensor".into()));
        }
        let transform = AdpTransform::new(array, k);
        let per_sample: Vec<Vec<f32>> = (0..ds.len())
            .into_par_iter()
            .map(|i| {
                let h = ds.cfr_matrix(i);
                let fp = match kind {
                    FingerprintKind::Adp => transform.adp(&h)?,
                    FingerprintKind::Scm => scm(&h),
                    FingerprintKind::Rcsi => rcsi(&h),
                };
                Ok(normalize(&fp, norm).data.iter().map(|&v| v as f32).collect())
            })
            .collect::<Result<_>>()?;
        let shape = kind.shape(m, k);
        let n = ds.len();
        let mut full = vec![n];
        full.extend(&shape);
        Ok(Self {
            manifest: FeatureManifest {
                format: FEATURES_FORMAT.into(),
                version: 1,
                kind,
                normalization: norm,
                sample_shape: shape,
                n_samples: n,
                features: TensorSpec::new("features.bin", full, "f32"),
                coords: TensorSpec::new("coords.bin", vec![n, 3], "f32"),
                labels: TensorSpec::new("labels.bin", vec![n], "u8"),
                source: ds.manifest.clone(),
            },
            data: per_sample.concat(),
            coords: ds.coords.clone(),
            labels: ds.labels.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        binio::create_dir(dir)?;
        binio::write_f32(&dir.join(&self.manifest.features.file), self.data.iter().copied())?;
        binio::write_f32(&dir.join(&self.manifest.coords.file), self.coords.iter().copied())?;
        binio::write_bytes(&dir.join(&self.manifest.labels.file), &self.labels)?;
        binio::write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: FeatureManifest = binio::read_json(&dir.join("manifest.json"))?;
        if manifest.format != FEATURES_FORMAT {
            return Err(Error::InvalidData {
                path: dir.to_path_buf(),
                reason: format!("not a feature directory (format {:?})", manifest.format),
            });
        }
        let n = manifest.n_samples;
        let data = binio::read_f32(&dir.join(&manifest.features.file), manifest.features.numel())?;
        let coords = binio::read_f32(&dir.join(&manifest.coords.file), n * 3)?;
        let labels = binio::read_u8(&dir.join(&manifest.labels.file), n)?;
        Ok(Self {
            manifest,
            data,
            coords,
            labels,
        })
    }
}
