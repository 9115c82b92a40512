use std::path::Path;

use super::DataError;

const MAGIC: &[u8; 4] = b"VOL1";
const HEADER_LEN: usize = 4 + 3 * 4 + 3 * 4;

/// Dense single-channel volume stored z-major: index `(z * h + y) * w + x`.
///
/// `x` is the left-right axis, `y` anterior-posterior, `z` inferior-superior.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing: [f32; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f32; 3], voxels: Vec<f32>) -> Result<Self, DataError> {
        if extents.contains(&0) {
            return Err(DataError::InvalidExtent(extents));
        }
        if !spacing.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(DataError::InvalidSpacing(spacing));
        }
        let expected = extents.iter().product::<usize>();
        if voxels.len() != expected {
            return Err(DataError::ExtentMismatch {
                expected,
                actual: voxels.len(),
            });
        }
        Ok(Self {
            extents,
            spacing,
            voxels,
        })
    }

    pub fn filled(extents: [usize; 3], spacing: [f32; 3], value: f32) -> Result<Self, DataError> {
        Self::new(extents, spacing, vec![value; extents.iter().product()])
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.voxels.iter().map(|&v| v as f64).sum::<f64>() / self.voxels.len() as f64
    }
}

pub fn encode_volume(volume: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * volume.len());
    out.extend_from_slice(MAGIC);
    for &e in &volume.extents {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &s in &volume.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for &v in &volume.voxels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume, DataError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let word = |i: usize| <[u8; 4]>::try_from(&bytes[4 + 4 * i..8 + 4 * i]).unwrap();
    let extents = [0, 1, 2].map(|i| u32::from_le_bytes(word(i)) as usize);
    let spacing = [3, 4, 5].map(|i| f32::from_le_bytes(word(i)));
    let count = extents
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or(DataError::InvalidExtent(extents))?;
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(DataError::InvalidExtent(extents))?;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::ExtentMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let voxels = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(extents, spacing, voxels)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_volume(&bytes)
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    std::fs::write(path, encode_volume(volume)).map_err(|e| DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_and_errors() {
        let v = Volume::new([1, 2, 3], [0.5, 0.75, 0.75], (0..6).map(|i| i as f32).collect()).unwrap();
        let bytes = encode_volume(&v);
        assert_eq!(&bytes[..4], b"VOL1");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes.len(), HEADER_LEN + 24);
        assert_eq!(decode_volume(&bytes).unwrap(), v);

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_volume(&bad), Err(DataError::BadMagic)));
        assert!(matches!(
            decode_volume(&bytes[..bytes.len() - 4]),
            Err(DataError::Truncated { .. })
        ));
        assert!(matches!(decode_volume(&bytes[..10]), Err(DataError::Truncated { .. })));
        let mut long = bytes;
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_volume(&long), Err(DataError::ExtentMismatch { .. })));
    }

    #[test]
    fn invalid_volumes_are_rejected() {
        assert!(Volume::new([0, 1, 1], [1.0; 3], vec![]).is_err());
        assert!(Volume::new([1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]).is_err());
        assert!(Volume::new([2, 1, 1], [1.0; 3], vec![0.0]).is_err());
    }
}
