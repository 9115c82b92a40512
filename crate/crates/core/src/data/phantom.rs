//! Procedural head phantoms: two dark ellipsoidal cavities in textured tissue,
//! with optional bright lesions on the cavity wall.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{AnomalyKind, Side, Volume};
use crate::seed;

pub const HEAD_EXTENT: usize = 128;
/// Cavity voxels of a normal sinus never reach this intensity.
pub const TISSUE_THRESHOLD: f32 = 0.3;

const TISSUE_LEVEL: f32 = 0.55;
const AIR_LEVEL: f32 = 0.05;
const AIR_JITTER: f32 = 0.03;
const LESION_LEVEL: f32 = 0.85;

/// Smooth lattice noise in roughly `[-1, 1]`.
struct ValueNoise {
    cell: f32,
    n: usize,
    values: Vec<f32>,
}

impl ValueNoise {
    fn new(extent: usize, cell: f32, rng: &mut ChaCha8Rng) -> Self {
        let n = (extent as f32 / cell).ceil() as usize + 2;
        let values = (0..n * n * n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Self { cell, n, values }
    }

    fn at(&self, z: f32, y: f32, x: f32) -> f32 {
        let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
        let (z, y, x) = (z / self.cell, y / self.cell, x / self.cell);
        let (z0, y0, x0) = (z.floor() as usize, y.floor() as usize, x.floor() as usize);
        let (tz, ty, tx) = (smooth(z.fract()), smooth(y.fract()), smooth(x.fract()));
        let n = self.n;
        let v = |a: usize, b: usize, c: usize| self.values[((z0 + a) * n + y0 + b) * n + x0 + c];
        let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
        let c00 = lerp(v(0, 0, 0), v(0, 0, 1), tx);
        let c01 = lerp(v(0, 1, 0), v(0, 1, 1), tx);
        let c10 = lerp(v(1, 0, 0), v(1, 0, 1), tx);
        let c11 = lerp(v(1, 1, 0), v(1, 1, 1), tx);
        lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz)
    }
}

/// Lesion geometry inside one cavity.
#[derive(Clone, Debug, PartialEq)]
enum Lesion {
    None,
    /// Wall layer of `thickness` voxels where `dot(dir, axis) > cos_limit`.
    Rim {
        axis: [f32; 3],
        cos_limit: f32,
        thickness: f32,
    },
    /// Ball intersected with the cavity.
    Ball { center: [f32; 3], radius: f32 },
}

/// Ground truth for one side of a generated head. Coordinates are `[z, y, x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SideTruth {
    pub kind: AnomalyKind,
    pub center: [f32; 3],
    pub radii: [f32; 3],
    /// Mean voxel intensity inside the cavity ellipsoid.
    pub cavity_mean: f32,
    lesion: Lesion,
}

impl SideTruth {
    /// Normalized ellipsoid radius of a point; `< 1` inside the cavity.
    fn rho(&self, p: [f32; 3]) -> f32 {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f32>()
            .sqrt()
    }

    pub fn in_cavity(&self, z: usize, y: usize, x: usize) -> bool {
        self.rho([z as f32, y as f32, x as f32]) < 1.0
    }

    fn in_lesion(&self, p: [f32; 3], rho: f32) -> bool {
        match &self.lesion {
            Lesion::None => false,
            Lesion::Rim {
                axis,
                cos_limit,
                thickness,
            } => {
                let d: [f32; 3] = [0, 1, 2].map(|i| p[i] - self.center[i]);
                let dist = d.iter().map(|v| v * v).sum::<f32>().sqrt();
                if dist == 0.0 {
                    return false;
                }
                let depth = dist * (1.0 / rho - 1.0);
                let cos = (0..3).map(|i| d[i] * axis[i]).sum::<f32>() / dist;
                depth < *thickness && cos > *cos_limit
            }
            Lesion::Ball { center, radius } => {
                (0..3).map(|i| (p[i] - center[i]).powi(2)).sum::<f32>() < radius * radius
            }
        }
    }

    fn mirrored(&self) -> Self {
        let flip = |p: [f32; 3]| [p[0], p[1], (HEAD_EXTENT - 1) as f32 - p[2]];
        let lesion = match &self.lesion {
            Lesion::None => Lesion::None,
            Lesion::Rim {
                axis,
                cos_limit,
                thickness,
            } => Lesion::Rim {
                axis: [axis[0], axis[1], -axis[2]],
                cos_limit: *cos_limit,
                thickness: *thickness,
            },
            Lesion::Ball { center, radius } => Lesion::Ball {
                center: flip(*center),
                radius: *radius,
            },
        };
        Self {
            kind: self.kind,
            center: flip(self.center),
            radii: self.radii,
            cavity_mean: self.cavity_mean,
            lesion,
        }
    }
}

/// A generated 128^3 head with per-side ground truth.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Volume,
    pub left: SideTruth,
    pub right: SideTruth,
}

impl Phantom {
    pub fn side(&self, side: Side) -> &SideTruth {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
}

fn unit(v: [f32; 3]) -> [f32; 3] {
    let n = v.iter().map(|a| a * a).sum::<f32>().sqrt();
    v.map(|a| a / n)
}

fn random_direction(rng: &mut ChaCha8Rng) -> [f32; 3] {
    loop {
        let v = [0; 3].map(|_| rng.random_range(-1.0f32..1.0));
        let n2: f32 = v.iter().map(|a| a * a).sum();
        if n2 > 1e-3 && n2 <= 1.0 {
            return unit(v);
        }
    }
}

/// Point on the ellipsoid wall along direction `u` from the center.
fn wall_point(center: [f32; 3], radii: [f32; 3], u: [f32; 3]) -> [f32; 3] {
    let t = 1.0 / (0..3).map(|i| (u[i] / radii[i]).powi(2)).sum::<f32>().sqrt();
    [0, 1, 2].map(|i| center[i] + u[i] * t)
}

/// Draws cavity pose and lesion for the left side (cavity near x = 40).
fn left_side(kind: AnomalyKind, rng: &mut ChaCha8Rng) -> SideTruth {
    let mid = HEAD_EXTENT as f32 / 2.0;
    let center = [
        mid + rng.random_range(-3.0..3.0),
        mid + rng.random_range(-3.0..3.0),
        40.0 + rng.random_range(-3.0..3.0),
    ];
    let radii = [
        rng.random_range(11.0..16.0),
        rng.random_range(12.0..17.0),
        rng.random_range(10.0..14.0),
    ];
    let lesion = match kind {
        AnomalyKind::None => Lesion::None,
        AnomalyKind::Thickening => Lesion::Rim {
            axis: random_direction(rng),
            cos_limit: rng.random_range(-0.2..0.4),
            thickness: rng.random_range(1.0..4.0),
        },
        AnomalyKind::Polyp => {
            let radius = rng.random_range(3.0..6.0);
            let u = random_direction(rng);
            let w = wall_point(center, radii, u);
            let inset = rng.random_range(0.0..radius / 2.0);
            Lesion::Ball {
                center: [0, 1, 2].map(|i| w[i] - u[i] * inset),
                radius,
            }
        }
        AnomalyKind::Cyst => {
            // dome rising from the cavity floor
            let u = unit([-1.0, rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)]);
            Lesion::Ball {
                center: wall_point(center, radii, u),
                radius: rng.random_range(5.0..9.0),
            }
        }
    };
    SideTruth {
        kind,
        center,
        radii,
        cavity_mean: 0.0,
        lesion,
    }
}

/// Right-side truth: independent pose drawn in the left frame, then mirrored.
fn right_side(kind: AnomalyKind, rng: &mut ChaCha8Rng) -> SideTruth {
    left_side(kind, rng).mirrored()
}

/// Generates a head phantom. With `mirrored`, the right half is an exact
/// mirror image of the left half and `right` is ignored.
pub fn generate_head(left: AnomalyKind, right: AnomalyKind, seed: u64, mirrored: bool) -> Phantom {
    let n = HEAD_EXTENT;
    let mut left_truth = left_side(left, &mut seed::rng(seed::derive_str(seed, "left")));
    let mut right_truth = if mirrored {
        left_truth.mirrored()
    } else {
        right_side(right, &mut seed::rng(seed::derive_str(seed, "right")))
    };
    let mut tex_rng = seed::rng(seed::derive_str(seed, "texture"));
    let coarse = ValueNoise::new(n, 24.0, &mut tex_rng);
    let fine = ValueNoise::new(n, 6.0, &mut tex_rng);
    let noise_seed = seed::derive_str(seed, "noise");
    let sides = [&left_truth, &right_truth];

    let mut voxels = vec![0.0f32; n * n * n];
    voxels.par_chunks_mut(n * n).enumerate().for_each(|(z, slab)| {
        let mut rng = seed::rng(seed::derive(noise_seed, z as u64));
        let gauss = Normal::new(0.0f32, 0.02).unwrap();
        for y in 0..n {
            for x in 0..n {
                let (zf, yf, xf) = (z as f32, y as f32, x as f32);
                let texture = 0.08 * coarse.at(zf, yf, xf) + 0.04 * fine.at(zf, yf, xf);
                let g = gauss.sample(&mut rng);
                let side = sides[usize::from(x >= n / 2)];
                let p = [zf, yf, xf];
                let rho = side.rho(p);
                slab[y * n + x] = if rho >= 1.0 {
                    TISSUE_LEVEL + texture + g
                } else if side.in_lesion(p, rho) {
                    (LESION_LEVEL + 0.5 * texture + g).clamp(0.7, 1.0)
                } else {
                    AIR_LEVEL + (0.3 * texture + g).clamp(-AIR_JITTER, AIR_JITTER)
                };
            }
        }
    });

    if mirrored {
        for row in voxels.chunks_mut(n) {
            for x in 0..n / 2 {
                row[n - 1 - x] = row[x];
            }
        }
    }
    let volume = Volume::new([n; 3], [1.0; 3], voxels).expect("extent matches voxel count");
    for truth in [&mut left_truth, &mut right_truth] {
        truth.cavity_mean = cavity_mean(&volume, truth);
    }
    Phantom {
        volume,
        left: left_truth,
        right: right_truth,
    }
}

fn cavity_mean(volume: &Volume, truth: &SideTruth) -> f32 {
    let [d, h, w] = volume.extents();
    let (mut sum, mut count) = (0.0f64, 0usize);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if truth.in_cavity(z, y, x) {
                    sum += volume.get(z, y, x) as f64;
                    count += 1;
                }
            }
        }
    }
    (sum / count.max(1) as f64) as f32
}

/// A head whose two sinuses share `kind`; returns the volume and its label.
pub fn generate_phantom(kind: AnomalyKind, seed: u64) -> (Volume, usize) {
    (generate_head(kind, kind, seed, false).volume, kind.label())
}
