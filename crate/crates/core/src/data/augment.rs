use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SinusSample, Volume};
use crate::seed;

/// Intensity used for voxels sampled from outside the source volume.
pub const OUT_OF_BOUNDS: f32 = -1.0;

/// Random affine, flip and noise transform set applied to training views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Maximum absolute rotation in degrees about the z, y and x axes.
    pub rotation_deg: [f64; 3],
    /// Maximum absolute translation in voxels per axis.
    pub translation: f64,
    /// Isotropic scale range `[lo, hi]`.
    pub scale: [f64; 2],
    pub flip_prob: f64,
    /// Axes (`z`, `y`, `x`) eligible for random flips.
    pub flip_axes: [bool; 3],
    pub noise_sigma: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            rotation_deg: [10.0; 3],
            translation: 2.0,
            scale: [0.9, 1.1],
            flip_prob: 0.5,
            flip_axes: [false, false, true],
            noise_sigma: 0.05,
        }
    }
}

impl AugmentationPolicy {
    /// Policy that leaves every volume unchanged.
    pub fn identity() -> Self {
        Self {
            rotation_deg: [0.0; 3],
            translation: 0.0,
            scale: [1.0, 1.0],
            flip_prob: 0.0,
            flip_axes: [false; 3],
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !self.rotation_deg.iter().all(|&r| finite_nonneg(r) && r <= 180.0) {
            return Err(format!("rotation range {:?} must lie in [0, 180]", self.rotation_deg));
        }
        if !finite_nonneg(self.translation) {
            return Err(format!("translation {} must be non-negative", self.translation));
        }
        let [lo, hi] = self.scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(format!("scale range {:?} must satisfy 0 < lo <= hi", self.scale));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(format!("flip probability {} outside [0, 1]", self.flip_prob));
        }
        if !finite_nonneg(self.noise_sigma) {
            return Err(format!("noise sigma {} must be non-negative", self.noise_sigma));
        }
        Ok(())
    }
}

fn rotation(angles_deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [a, b, c] = angles_deg.map(f64::to_radians);
    // rotations about z, y and x of [z, y, x] coordinates, composed Rz * Ry * Rx
    let rz = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rx = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
    let mul = |p: [[f64; 3]; 3], q: [[f64; 3]; 3]| {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| p[i][k] * q[k][j]).sum();
            }
        }
        out
    };
    mul(mul(rz, ry), rx)
}

fn sample_trilinear(v: &Volume, p: [f64; 3]) -> f32 {
    let ext = v.extents();
    let vox = v.voxels();
    let base = p.map(f64::floor);
    let i0 = base.map(|b| b as i64);
    let f: [f32; 3] = [0, 1, 2].map(|i| (p[i] - base[i]) as f32);
    let (sy, sz) = (ext[2], ext[1] * ext[2]);
    if (0..3).all(|a| i0[a] >= 0 && (i0[a] as usize) + 1 < ext[a]) {
        let o = i0[0] as usize * sz + i0[1] as usize * sy + i0[2] as usize;
        let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
        let row = |o: usize| lerp(vox[o], vox[o + 1], f[2]);
        let plane = |o: usize| lerp(row(o), row(o + sy), f[1]);
        return lerp(plane(o), plane(o + sz), f[0]);
    }
    let mut acc = 0.0f32;
    for corner in 0..8 {
        let mut w = 1.0f32;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for axis in 0..3 {
            let upper = (corner >> (2 - axis)) & 1 == 1;
            w *= if upper { f[axis] } else { 1.0 - f[axis] };
            let i = i0[axis] + i64::from(upper);
            inside &= i >= 0 && (i as usize) < ext[axis];
            idx[axis] = i.max(0) as usize;
        }
        if w == 0.0 {
            continue;
        }
        acc += w * if inside { v.get(idx[0], idx[1], idx[2]) } else { OUT_OF_BOUNDS };
    }
    acc
}

fn affine(v: &Volume, rot: [[f64; 3]; 3], shift: [f64; 3], scale: f64) -> Volume {
    let ext = v.extents();
    let center = ext.map(|e| (e as f64 - 1.0) / 2.0);
    // source = R^T (q - center - shift) / scale + center, affine in q
    let m: [[f64; 3]; 3] = [0, 1, 2].map(|i| [0, 1, 2].map(|k| rot[k][i] / scale));
    let offset: [f64; 3] = [0, 1, 2].map(|i| center[i] - (0..3).map(|k| m[i][k] * (center[k] + shift[k])).sum::<f64>());
    let mut out = Vec::with_capacity(v.len());
    for z in 0..ext[0] {
        for y in 0..ext[1] {
            let row: [f64; 3] = [0, 1, 2].map(|i| offset[i] + m[i][0] * z as f64 + m[i][1] * y as f64);
            for x in 0..ext[2] {
                let src = [0, 1, 2].map(|i| row[i] + m[i][2] * x as f64);
                out.push(sample_trilinear(v, src));
            }
        }
    }
    Volume::new(ext, v.spacing(), out).expect("same extents")
}

/// Applies affine, flips, then noise and clamping, drawing from `draw_seed`.
pub fn augment_volume(v: &Volume, policy: &AugmentationPolicy, draw_seed: u64) -> Volume {
    let mut rng = seed::rng(draw_seed);
    let angles = policy.rotation_deg.map(|r| rng.random_range(-r..=r));
    let shift = [0; 3].map(|_| rng.random_range(-policy.translation..=policy.translation));
    let scale = rng.random_range(policy.scale[0]..=policy.scale[1]);
    let flips = policy.flip_axes.map(|allowed| {
        let draw: f64 = rng.random();
        allowed && draw < policy.flip_prob
    });

    let mut out = if angles == [0.0; 3] && shift == [0.0; 3] && scale == 1.0 {
        v.clone()
    } else {
        affine(v, rotation(angles), shift, scale)
    };
    for (axis, &flip) in flips.iter().enumerate() {
        if flip {
            out = super::preprocess::flip_axis(&out, axis);
        }
    }
    if policy.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, policy.noise_sigma as f32).expect("validated sigma");
        for x in out.voxels_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    for x in out.voxels_mut() {
        *x = x.clamp(-1.0, 1.0);
    }
    out
}

/// Augmented copy of a sample; label and identity are preserved.
pub fn augment(sample: &SinusSample, policy: &AugmentationPolicy, draw_seed: u64) -> SinusSample {
    SinusSample {
        volume: augment_volume(&sample.volume, policy, draw_seed),
        ..sample.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_policy_is_valid() {
        AugmentationPolicy::default().validate().unwrap();
        AugmentationPolicy::identity().validate().unwrap();
        let bad = AugmentationPolicy {
            scale: [1.2, 0.8],
            ..AugmentationPolicy::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = rotation([7.0, -4.0, 9.5]);
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                assert!((d - f64::from(u8::from(i == j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_outside_fills_minus_one() {
        let v = Volume::filled([4, 4, 4], [1.0; 3], 0.5).unwrap();
        assert_eq!(sample_trilinear(&v, [-3.0, 1.0, 1.0]), OUT_OF_BOUNDS);
        assert_eq!(sample_trilinear(&v, [1.0, 2.0, 3.0]), 0.5);
        assert!((sample_trilinear(&v, [3.5, 1.0, 1.0]) - (-0.25)).abs() < 1e-6);
    }
}
