use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Binary image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask", format!("{} values for {height}x{width}", data.len())));
        }
        Ok(Mask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Accepts exactly `0` and `1` in the trailing two axes (leading extents must be 1).
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().any(|&e| e != 1) {
            return Err(Error::shape("mask", format!("expected [H, W], got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let mut data = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v == T::one() {
                data.push(true);
            } else if v == T::zero() {
                data.push(false);
            } else {
                return Err(Error::Validation(format!("mask value {v} is not binary")));
            }
        }
        Mask::new(h, w, data)
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(vec![self.height, self.width], data).expect("non-empty mask")
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Foreground pixels with a background 4-neighbour or on the image border, as `(y, x)`.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.get(y, x) {
                    continue;
                }
                let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
                if edge
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1)
                {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

/// `p ≥ threshold` elementwise over the trailing `[H, W]`.
pub fn binarize<T: Element>(prob: &Tensor<T>, threshold: f64) -> Result<Mask> {
    let s = prob.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&e| e != 1) {
        return Err(Error::shape("binarize", format!("expected [H, W], got {s:?}")));
    }
    let t = T::from_f64(threshold);
    Mask::new(
        s[s.len() - 2],
        s[s.len() - 1],
        prob.data().iter().map(|&v| v >= t).collect(),
    )
}
