#![allow(dead_code)]

use semloc_core::geometry::{Aabb, Vec3};

/// Signed distance proxy of point `p` to box `b` (negative strictly inside).
fn box_depth(b: &Aabb, p: Vec3) -> f64 {
    (0..3)
        .map(|a| {
            let c = 0.5 * (b.min.get(a) + b.max.get(a));
            let h = 0.5 * (b.max.get(a) - b.min.get(a));
            (p.get(a) - c).abs() - h
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Brute-force occlusion test: golden-section minimization of the convex
/// depth function along the segment.
pub fn oracle_blocks(b: &Aabb, p0: Vec3, p1: Vec3) -> bool {
    let f = |t: f64| box_depth(b, p0 + (p1 - p0) * t);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (1e-9, 1.0 - 1e-9);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    let best = [f(lo), f(hi), f1, f2, f(1e-9), f(1.0 - 1e-9)]
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    best < -1e-12
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
