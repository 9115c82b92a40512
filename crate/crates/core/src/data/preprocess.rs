use serde::{Deserialize, Serialize};

use super::phantom::HEAD_EXTENT;
use super::{AnomalyKind, DataError, SinusSample, Side, Volume};

/// Model input extent after resizing.
pub const SAMPLE_EXTENT: usize = 32;

/// Axis-aligned box in `[z, y, x]` voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

/// Fixed per-side crop boxes in the registered head frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropConfig {
    pub left: CropBox,
    pub right: CropBox,
}

impl Default for CropConfig {
    /// 48^3 boxes placed symmetrically about the sagittal midplane of a 128^3 head.
    fn default() -> Self {
        let size = [48; 3];
        let x0 = 16;
        Self {
            left: CropBox {
                origin: [40, 40, x0],
                size,
            },
            right: CropBox {
                origin: [40, 40, HEAD_EXTENT - x0 - size[2]],
                size,
            },
        }
    }
}

impl CropConfig {
    pub fn get(&self, side: Side) -> CropBox {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
        }
    }
}

pub fn crop(volume: &Volume, b: CropBox) -> Result<Volume, DataError> {
    let ext = volume.extents();
    if (0..3).any(|i| b.size[i] == 0 || b.origin[i] + b.size[i] > ext[i]) {
        return Err(DataError::CropOutOfBounds {
            origin: b.origin,
            size: b.size,
            extents: ext,
        });
    }
    let [d, h, w] = b.size;
    let [z0, y0, x0] = b.origin;
    let mut voxels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            let start = volume.index(z0 + z, y0 + y, x0);
            voxels.extend_from_slice(&volume.voxels()[start..start + w]);
        }
    }
    Volume::new(b.size, volume.spacing(), voxels)
}

/// Left and right sinus crops of a head volume.
pub fn extract_sinus_subvolumes(head: &Volume, crops: &CropConfig) -> Result<(Volume, Volume), DataError> {
    Ok((crop(head, crops.left)?, crop(head, crops.right)?))
}

/// Reverses the left-right (`x`) axis of every coronal plane.
pub fn flip_right_to_left(volume: &Volume) -> Volume {
    flip_axis(volume, 2)
}

/// Reverses one axis (`0 = z`, `1 = y`, `2 = x`).
pub fn flip_axis(volume: &Volume, axis: usize) -> Volume {
    let [d, h, w] = volume.extents();
    let src = volume.voxels();
    let mut out = vec![0.0; src.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (sz, sy, sx) = match axis {
                    0 => (d - 1 - z, y, x),
                    1 => (z, h - 1 - y, x),
                    _ => (z, y, w - 1 - x),
                };
                out[(z * h + y) * w + x] = src[(sz * h + sy) * w + sx];
            }
        }
    }
    Volume::new(volume.extents(), volume.spacing(), out).expect("same extents")
}

/// Corner-aligned trilinear resampling to `target` voxels per axis.
pub fn resize_trilinear(volume: &Volume, target: [usize; 3]) -> Result<Volume, DataError> {
    let src = volume.extents();
    if src.iter().any(|&e| e < 2) || target.iter().any(|&e| e < 2) {
        return Err(DataError::DegenerateExtent { from: src, target });
    }
    let scale: [f64; 3] = [0, 1, 2].map(|i| (src[i] - 1) as f64 / (target[i] - 1) as f64);
    // per-axis (lower index, weight of upper neighbor)
    let taps = |axis: usize| -> Vec<(usize, f32)> {
        (0..target[axis])
            .map(|i| {
                let pos = i as f64 * scale[axis];
                let lo = (pos.floor() as usize).min(src[axis] - 2);
                (lo, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let (tz, ty, tx) = (taps(0), taps(1), taps(2));
    let v = volume.voxels();
    let [_, h, w] = src;
    let at = |z: usize, y: usize, x: usize| v[(z * h + y) * w + x];
    let mut out = Vec::with_capacity(target.iter().product());
    for &(z, wz) in &tz {
        for &(y, wy) in &ty {
            for &(x, wx) in &tx {
                let lerp = |a: f32, b: f32, t: f32| if t == 0.0 { a } else { a + (b - a) * t };
                let c00 = lerp(at(z, y, x), at(z, y, x + 1), wx);
                let c01 = lerp(at(z, y + 1, x), at(z, y + 1, x + 1), wx);
                let c10 = lerp(at(z + 1, y, x), at(z + 1, y, x + 1), wx);
                let c11 = lerp(at(z + 1, y + 1, x), at(z + 1, y + 1, x + 1), wx);
                out.push(lerp(lerp(c00, c01, wy), lerp(c10, c11, wy), wz));
            }
        }
    }
    let spacing = [0, 1, 2].map(|i| (volume.spacing()[i] as f64 * scale[i]) as f32);
    Volume::new(target, spacing, out)
}

/// Affine map of `[min, max]` onto `[-1, 1]`; constant volumes become zeros.
pub fn normalize_minus1_1(volume: &Volume) -> Volume {
    let (lo, hi) = volume.min_max();
    let voxels = if lo == hi {
        vec![0.0; volume.len()]
    } else if lo == -1.0 && hi == 1.0 {
        volume.voxels().to_vec()
    } else {
        let (lo, range) = (lo as f64, hi as f64 - lo as f64);
        volume
            .voxels()
            .iter()
            .map(|&v| ((2.0 * (v as f64 - lo) / range - 1.0) as f32).clamp(-1.0, 1.0))
            .collect()
    };
    Volume::new(volume.extents(), volume.spacing(), voxels).expect("same extents")
}

/// Crop, mirror (right side only), resize and normalize one side of a head.
pub fn preprocess_side(head: &Volume, crops: &CropConfig, side: Side, extent: usize) -> Result<Volume, DataError> {
    let mut v = crop(head, crops.get(side))?;
    if side == Side::Right {
        v = flip_right_to_left(&v);
    }
    let v = resize_trilinear(&v, [extent; 3])?;
    Ok(normalize_minus1_1(&v))
}

/// Both sinus samples of one head, each with its own label.
pub fn preprocess_pipeline(
    head: &Volume,
    crops: &CropConfig,
    patient_id: &str,
    left: AnomalyKind,
    right: AnomalyKind,
) -> Result<[SinusSample; 2], DataError> {
    let make = |side: Side, kind: AnomalyKind| -> Result<SinusSample, DataError> {
        SinusSample::new(
            preprocess_side(head, crops, side, SAMPLE_EXTENT)?,
            patient_id.to_string(),
            side,
            kind,
        )
    };
    Ok([make(Side::Left, left)?, make(Side::Right, right)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(ext: [usize; 3]) -> Volume {
        let [d, h, w] = ext;
        let v = (0..d * h * w).map(|i| (i % w) as f32).collect();
        Volume::new(ext, [1.0; 3], v).unwrap()
    }

    #[test]
    fn default_crops_mirror_each_other() {
        let c = CropConfig::default();
        assert_eq!(c.left.origin[2] + c.right.origin[2] + c.right.size[2], HEAD_EXTENT);
    }

    #[test]
    fn flip_moves_index_three_to_twenty_eight() {
        let mut v = Volume::filled([1, 1, 32], [1.0; 3], 0.0).unwrap();
        v.voxels_mut()[3] = 1.0;
        assert_eq!(flip_right_to_left(&v).voxels()[28], 1.0);
    }

    #[test]
    fn ramp_resizes_to_ramp() {
        let v = ramp([4, 4, 64]);
        let r = resize_trilinear(&v, [4, 4, 32]).unwrap();
        for (i, &x) in r.voxels()[..32].iter().enumerate() {
            let want = i as f32 * 63.0 / 31.0;
            assert!((x - want).abs() < 1e-4, "{i}: {x} vs {want}");
        }
    }

    #[test]
    fn normalize_hand_case() {
        let v = Volume::new([1, 1, 3], [1.0; 3], vec![0.0, 5.0, 10.0]).unwrap();
        assert_eq!(normalize_minus1_1(&v).voxels(), &[-1.0, 0.0, 1.0]);
        let c = Volume::filled([2, 2, 2], [1.0; 3], 4.2).unwrap();
        assert!(normalize_minus1_1(&c).voxels().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn crop_bounds_are_checked() {
        let v = Volume::filled([8, 8, 8], [1.0; 3], 1.0).unwrap();
        let b = CropBox {
            origin: [4, 0, 0],
            size: [5, 2, 2],
        };
        assert!(matches!(crop(&v, b), Err(DataError::CropOutOfBounds { .. })));
    }
}
