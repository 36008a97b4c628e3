use crate::error::{FsError, Result};
use crate::tensor::Tensor;

/// Row-major `{0, 1}` grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(FsError::shape(format!("empty mask {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(FsError::shape(format!(
                "mask {height}x{width} needs {} cells, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(FsError::Data(format!(
                "mask value {} at cell {pos} is not 0 or 1",
                data[pos]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0; height * width]).expect("valid zero mask")
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![1; height * width]).expect("valid ones mask")
    }

    /// Foreground where `pred(y, x)` holds.
    pub fn from_fn(height: usize, width: usize, mut pred: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(pred(y, x) as u8);
            }
        }
        Self::new(height, width, data).expect("from_fn produces a valid mask")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground_count() == 0
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn background_count(&self) -> usize {
        self.len() - self.foreground_count()
    }

    pub fn invert(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("mask values are finite")
    }

    /// Majority-vote downsampling to `h x w`.
    ///
    /// Each output cell is foreground iff at least half of its source block
    /// is foreground; an exact half counts as foreground.
    pub fn downsample(&self, h: usize, w: usize) -> Result<BinaryMask> {
        if h == 0 || w == 0 || !self.height.is_multiple_of(h) || !self.width.is_multiple_of(w) {
            return Err(FsError::shape(format!(
                "cannot downsample {}x{} mask to {h}x{w}",
                self.height, self.width
            )));
        }
        let (fh, fw) = (self.height / h, self.width / w);
        let block = fh * fw;
        let mut data = Vec::with_capacity(h * w);
        for by in 0..h {
            for bx in 0..w {
                let mut count = 0usize;
                for y in by * fh..(by + 1) * fh {
                    let row = &self.data[y * self.width + bx * fw..y * self.width + (bx + 1) * fw];
                    count += row.iter().map(|&v| v as usize).sum::<usize>();
                }
                // count / block >= 1/2 without floating point
                data.push((2 * count >= block) as u8);
            }
        }
        BinaryMask::new(h, w, data)
    }
}

/// Free-function form of [`BinaryMask::downsample`].
pub fn downsample_mask(mask: &BinaryMask, h: usize, w: usize) -> Result<BinaryMask> {
    mask.downsample(h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn rejects_non_binary() {
        assert!(BinaryMask::new(1, 2, vec![0, 2]).is_err());
        assert!(BinaryMask::new(1, 2, vec![0]).is_err());
    }

    #[test]
    fn all_ones_stays_ones() {
        let m = BinaryMask::ones(12, 8);
        for (h, w) in [(1, 1), (3, 2), (6, 4), (12, 8)] {
            assert_eq!(m.downsample(h, w).unwrap(), BinaryMask::ones(h, w));
        }
    }

    #[test]
    fn half_block_ties_to_foreground() {
        let m = BinaryMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(m.downsample(1, 1).unwrap().data(), &[1]);
        let m = BinaryMask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        assert_eq!(m.downsample(1, 1).unwrap().data(), &[0]);
    }

    #[test]
    fn non_divisible_is_shape_error() {
        let m = BinaryMask::ones(8, 8);
        assert!(matches!(m.downsample(3, 4), Err(FsError::Shape(_))));
    }

    #[test]
    fn random_8x8_matches_block_count() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let m = BinaryMask::from_fn(8, 8, |_, _| rng.uniform() < 0.5);
            let d = m.downsample(4, 4).unwrap();
            for by in 0..4 {
                for bx in 0..4 {
                    let c = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .filter(|(dy, dx)| m.get(2 * by + dy, 2 * bx + dx))
                        .count();
                    assert_eq!(d.get(by, bx), c >= 2);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn downsample_is_monotone(bits in proptest::collection::vec(0u8..2, 64), extra in proptest::collection::vec(0u8..2, 64)) {
            let a = BinaryMask::new(8, 8, bits.clone()).unwrap();
            let b = BinaryMask::new(8, 8, bits.iter().zip(&extra).map(|(x, y)| x | y).collect()).unwrap();
            let (da, db) = (a.downsample(2, 4).unwrap(), b.downsample(2, 4).unwrap());
            for (x, y) in da.data().iter().zip(db.data()) {
                prop_assert!(x <= y);
            }
        }
    }
}
