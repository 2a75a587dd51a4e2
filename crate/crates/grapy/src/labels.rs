use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LabelError {
    #[error("label {label} at pixel {pixel} is out of range for {classes} classes")]
    OutOfRange {
        pixel: usize,
        label: usize,
        classes: usize,
    },
    #[error("label map is {got:?} but {expected:?} was expected")]
    SizeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("label buffer has {len} values for a {height}x{width} map")]
    Length {
        height: usize,
        width: usize,
        len: usize,
    },
}

/// Per-pixel class indices at one level of a taxonomy.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: usize,
    values: Vec<usize>,
}

impl LabelMap {
    pub fn new(
        height: usize,
        width: usize,
        classes: usize,
        values: Vec<usize>,
    ) -> Result<Self, LabelError> {
        if values.len() != height * width {
            return Err(LabelError::Length {
                height,
                width,
                len: values.len(),
            });
        }
        if let Some((pixel, &label)) = values.iter().enumerate().find(|(_, &v)| v >= classes) {
            return Err(LabelError::OutOfRange {
                pixel,
                label,
                classes,
            });
        }
        Ok(Self {
            height,
            width,
            classes,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, classes: usize, label: usize) -> Self {
        assert!(label < classes);
        Self {
            height,
            width,
            classes,
            values: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.values[row * self.width + col]
    }

    pub fn pixels(&self) -> usize {
        self.values.len()
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &v in &self.values {
            counts[v] += 1;
        }
        counts
    }

    /// One boolean mask per class; together they partition the image.
    pub fn masks(&self) -> Vec<Vec<bool>> {
        (0..self.classes)
            .map(|k| self.values.iter().map(|&v| v == k).collect())
            .collect()
    }

    /// Rebuilds a label map from per-class boolean masks. Fails unless every
    /// pixel is claimed by exactly one mask.
    pub fn from_masks(height: usize, width: usize, masks: &[Vec<bool>]) -> Option<Self> {
        let mut values = vec![usize::MAX; height * width];
        for (k, mask) in masks.iter().enumerate() {
            if mask.len() != values.len() {
                return None;
            }
            for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                if values[p] != usize::MAX {
                    return None;
                }
                values[p] = k;
            }
        }
        if values.contains(&usize::MAX) {
            return None;
        }
        Some(Self {
            height,
            width,
            classes: masks.len(),
            values,
        })
    }

    /// One-hot encoding as an `H×W×K` tensor.
    pub fn one_hot(&self) -> Tensor {
        let k = self.classes;
        let mut data = vec![0.0; self.values.len() * k];
        for (p, &v) in self.values.iter().enumerate() {
            data[p * k + v] = 1.0;
        }
        Tensor::new(vec![self.height, self.width, k], data).expect("one-hot shape")
    }

    pub(crate) fn ensure_size(&self, height: usize, width: usize) -> Result<(), LabelError> {
        if self.size() != (height, width) {
            return Err(LabelError::SizeMismatch {
                expected: (height, width),
                got: self.size(),
            });
        }
        Ok(())
    }
}

/// Per-pixel argmax over the trailing channel axis of an `H×W×K` tensor.
///
/// Ties resolve to the lowest index. This is not recorded on any tape.
pub fn argmax_channel(t: &Tensor) -> LabelMap {
    let shape = t.shape();
    assert_eq!(shape.len(), 3, "argmax_channel expects H×W×K, got {shape:?}");
    let (h, w, k) = (shape[0], shape[1], shape[2]);
    let values = t
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    LabelMap {
        height: h,
        width: w,
        classes: k,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        let err = LabelMap::new(1, 3, 2, vec![0, 1, 2]).unwrap_err();
        assert_eq!(
            err,
            LabelError::OutOfRange {
                pixel: 2,
                label: 2,
                classes: 2
            }
        );
    }

    #[test]
    fn argmax_recovers_one_hot() {
        let m = LabelMap::new(2, 3, 4, vec![0, 3, 2, 1, 1, 0]).unwrap();
        assert_eq!(argmax_channel(&m.one_hot()), m);
    }

    #[test]
    fn masks_round_trip() {
        let m = LabelMap::new(2, 2, 3, vec![2, 0, 0, 1]).unwrap();
        let back = LabelMap::from_masks(2, 2, &m.masks()).unwrap();
        assert_eq!(back, m);
        let overlapping = vec![vec![true; 4], vec![true, false, false, false]];
        assert!(LabelMap::from_masks(2, 2, &overlapping).is_none());
    }
}
