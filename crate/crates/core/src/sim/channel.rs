use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::scenario::{ArrayGeometry, Scenario};
use crate::sim::trace::MpcSet;

/// Complex antennas × subcarriers matrix, row-major (antenna index `m_y·m_z_count + m_z`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfrMatrix {
    pub m: usize,
    pub k: usize,
    pub data: Vec<Complex64>,
}

impl CfrMatrix {
    pub fn zeros(m: usize, k: usize) -> Self {
        Self {
            m,
            k,
            data: vec![Complex64::new(0.0, 0.0); m * k],
        }
    }

    pub fn from_fn(m: usize, k: usize, f: impl Fn(usize, usize) -> Complex64) -> Self {
        let data = (0..m).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| f(i, j)).collect();
        Self { m, k, data }
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.k + j]
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }
}

/// UPA response: element `(m_y, m_z)` is
/// `exp(j2π·spacing·(m_y·sinθ·sinφ + m_z·cosθ))`, flattened `m_y`-major.
pub fn steering_vector(azimuth: f64, elevation: f64, array: &ArrayGeometry) -> Vec<Complex64> {
    let two_pi_d = 2.0 * std::f64::consts::PI * array.spacing;
    let u = elevation.sin() * azimuth.sin();
    let w = elevation.cos();
    (0..array.m_y)
        .flat_map(|my| {
            (0..array.m_z)
                .map(move |mz| Complex64::from_polar(1.0, two_pi_d * (my as f64 * u + mz as f64 * w)))
        })
        .collect()
}

/// `H[:, k] = Σ_p α_p·a(φ_p, θ_p)·exp(−j2π f_k τ_p)`.
pub fn synth_cfr(mpcs: &MpcSet, scenario: &Scenario, array: &ArrayGeometry) -> Result<CfrMatrix> {
    if mpcs.paths.is_empty() {
        return Err(Error::EmptyLink);
    }
    let freqs = scenario.subcarrier_freqs();
    let (m, k) = (array.n_antennas(), freqs.len());
    let mut h = CfrMatrix::zeros(m, k);
    let mut phasor = vec![Complex64::new(0.0, 0.0); k];
    for p in &mpcs.paths {
        let a = steering_vector(p.azimuth, p.elevation, array);
        for (ph, f) in phasor.iter_mut().zip(&freqs) {
            *ph = p.gain * Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * f * p.delay);
        }
        for (row, ai) in h.data.chunks_exact_mut(k).zip(&a) {
            for (hv, ph) in row.iter_mut().zip(&phasor) {
                *hv += ai * ph;
            }
        }
    }
    Ok(h)
}

/// Adds circular complex Gaussian noise with variance `mean|H|² / 10^(snr/10)`.
pub fn add_noise(h: &mut CfrMatrix, snr_db: f64, rng: &mut impl Rng) {
    let signal = h.frobenius_sq() / h.data.len() as f64;
    let sigma = (signal / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
    for z in &mut h.data {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *z += Complex64::new(re * sigma, im * sigma);
    }
}
