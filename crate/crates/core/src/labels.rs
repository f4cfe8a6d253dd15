use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel class indices for a batch, laid out `[B, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if batch * height * width != data.len() || data.is_empty() {
            return Err(Error::invalid(
                "label_map",
                format!("[{batch}, {height}, {width}] does not fit {} labels", data.len()),
            ));
        }
        Ok(Self {
            batch,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.height, self.width]
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// `[B, K, H, W]` indicator tensor.
    pub fn one_hot(&self, classes: usize) -> Result<Tensor> {
        if self.max_label() as usize >= classes {
            return Err(Error::invalid(
                "one_hot",
                format!("label {} out of range for {classes} classes", self.max_label()),
            ));
        }
        let hw = self.pixels_per_image();
        let mut t = Tensor::zeros(&[self.batch, classes, self.height, self.width]);
        let d = t.data_mut();
        for (i, &k) in self.data.iter().enumerate() {
            let (b, s) = (i / hw, i % hw);
            d[(b * classes + k as usize) * hw + s] = 1.0;
        }
        Ok(t)
    }

    /// Stores labels as a float tensor `[B, H, W]` for the CRAT container.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.batch, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("shape checked on construction")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (b, h, w) = match t.shape() {
            &[b, h, w] => (b, h, w),
            &[h, w] => (1, h, w),
            s => return Err(Error::invalid("label_map", format!("expected [B, H, W], got {s:?}"))),
        };
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                    Ok(v as u32)
                } else {
                    Err(Error::invalid("label_map", format!("non-integer label {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(b, h, w, data)
    }

    pub fn stack(parts: &[LabelMap]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("label_map", "nothing to stack"))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            if (p.height, p.width) != (first.height, first.width) {
                return Err(Error::ShapeMismatch {
                    op: "label_map stack",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            batch += p.batch;
            data.extend_from_slice(&p.data);
        }
        Self::new(batch, first.height, first.width, data)
    }

    pub fn image(&self, b: usize) -> LabelMap {
        let hw = self.pixels_per_image();
        LabelMap {
            batch: 1,
            height: self.height,
            width: self.width,
            data: self.data[b * hw..(b + 1) * hw].to_vec(),
        }
    }

    /// A `[B, h, w]` window with top-left corner `(y0, x0)` in every image.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<LabelMap> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::invalid("crop", format!("{h}x{w} at ({y0}, {x0}) exceeds {}x{}", self.height, self.width)));
        }
        let mut data = Vec::with_capacity(self.batch * h * w);
        for b in 0..self.batch {
            for y in y0..y0 + h {
                let row = (b * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        LabelMap::new(self.batch, h, w, data)
    }
}

/// A `[B, C, h, w]` window of a `[B, C, H, W]` tensor.
pub fn crop_tensor(t: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, ht, wt) = t.dims4()?;
    if y0 + h > ht || x0 + w > wt || h == 0 || w == 0 {
        return Err(Error::invalid("crop", format!("{h}x{w} at ({y0}, {x0}) exceeds {ht}x{wt}")));
    }
    let mut data = Vec::with_capacity(b * c * h * w);
    for plane in 0..b * c {
        for y in y0..y0 + h {
            let row = (plane * ht + y) * wt;
            data.extend_from_slice(&t.data()[row + x0..row + x0 + w]);
        }
    }
    Tensor::new(vec![b, c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_layout() {
        let m = LabelMap::new(1, 1, 3, vec![2, 0, 1]).unwrap();
        let t = m.one_hot(3).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 3]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(m.one_hot(2).is_err());
    }

    #[test]
    fn tensor_round_trip_and_validation() {
        let m = LabelMap::new(2, 2, 2, vec![0, 1, 2, 3, 4, 0, 1, 2]).unwrap();
        assert_eq!(LabelMap::from_tensor(&m.to_tensor()).unwrap(), m);
        let bad = Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap();
        assert!(LabelMap::from_tensor(&bad).is_err());
    }

    #[test]
    fn crops_agree_between_labels_and_tensors() {
        let m = LabelMap::new(2, 3, 4, (0..24).collect()).unwrap();
        let c = m.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.data(), &[6, 7, 10, 11, 18, 19, 22, 23]);
        let t = crop_tensor(&m.to_tensor().reshaped(&[2, 1, 3, 4]).unwrap(), 1, 2, 2, 2).unwrap();
        assert_eq!(t.data(), &[6.0, 7.0, 10.0, 11.0, 18.0, 19.0, 22.0, 23.0]);
        assert!(m.crop(2, 0, 2, 1).is_err());
    }
}
