//! Integer label maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tissue classes. Index 0 is background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tissue {
    Csf = 1,
    Gm = 2,
    Wm = 3,
}

impl Tissue {
    pub const ALL: [Tissue; 3] = [Tissue::Csf, Tissue::Gm, Tissue::Wm];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Csf => "CSF",
            Tissue::Gm => "GM",
            Tissue::Wm => "WM",
        }
    }

    /// The two tissues other than `self`.
    pub fn others(self) -> [Tissue; 2] {
        match self {
            Tissue::Csf => [Tissue::Gm, Tissue::Wm],
            Tissue::Gm => [Tissue::Csf, Tissue::Wm],
            Tissue::Wm => [Tissue::Csf, Tissue::Gm],
        }
    }
}

/// Batch of 2-D label maps, `[batch, height, width]`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if batch * height * width != data.len() || data.is_empty() {
            return Err(Error::Shape(format!(
                "label map {batch}x{height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self { batch, height, width, data })
    }

    pub fn filled(batch: usize, height: usize, width: usize, class: u8) -> Self {
        Self { batch, height, width, data: vec![class; batch * height * width] }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.height + y) * self.width + x]
    }

    pub fn sample(&self, n: usize) -> LabelMap {
        let p = self.plane();
        LabelMap { batch: 1, height: self.height, width: self.width, data: self.data[n * p..(n + 1) * p].to_vec() }
    }

    /// Concatenates single-or-multi-sample maps of equal extents.
    pub fn stack(maps: &[LabelMap]) -> Result<LabelMap> {
        let first = maps.first().ok_or_else(|| Error::InvalidArgument("stack of no label maps".into()))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for m in maps {
            if m.height != first.height || m.width != first.width {
                return Err(Error::Shape("label maps with different extents".into()));
            }
            data.extend_from_slice(&m.data);
            batch += m.batch;
        }
        LabelMap::new(batch, first.height, first.width, data)
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&c| c == class).count()
    }

    /// One-hot encoding `[batch, classes, height, width]`.
    pub fn one_hot(&self, classes: usize) -> Result<Tensor> {
        if self.max_class() as usize >= classes {
            return Err(Error::InvalidArgument(format!(
                "label value {} out of range for {classes} classes",
                self.max_class()
            )));
        }
        let p = self.plane();
        let mut out = vec![0.0; self.batch * classes * p];
        for n in 0..self.batch {
            for (i, &c) in self.data[n * p..(n + 1) * p].iter().enumerate() {
                out[(n * classes + c as usize) * p + i] = 1.0;
            }
        }
        Tensor::new(vec![self.batch, classes, self.height, self.width], out)
    }

    /// Stores the labels as a float tensor `[batch, height, width]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts_unchecked(
            vec![self.batch, self.height, self.width],
            self.data.iter().map(|&c| c as f64).collect(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (batch, height, width) = match t.shape() {
            [h, w] => (1, *h, *w),
            [n, h, w] => (*n, *h, *w),
            s => return Err(Error::Shape(format!("label tensor of shape {s:?}"))),
        };
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v <= 255.0 && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::InvalidArgument(format!("non-integer label value {v}")))
                }
            })
            .collect::<Result<_>>()?;
        LabelMap::new(batch, height, width, data)
    }

    /// Per-sample class indices of the channel-wise argmax of `[N, C, H, W]`
    /// logits. Ties resolve to the lowest class index.
    pub fn argmax(logits: &Tensor) -> Result<LabelMap> {
        let [n, c, h, w] = logits.shape() else {
            return Err(Error::Shape(format!("argmax expects NCHW, got {:?}", logits.shape())));
        };
        let (n, c, h, w) = (*n, *c, *h, *w);
        let p = h * w;
        let d = logits.data();
        let mut out = vec![0u8; n * p];
        for b in 0..n {
            for i in 0..p {
                let mut best = 0;
                for k in 1..c {
                    if d[(b * c + k) * p + i] > d[(b * c + best) * p + i] {
                        best = k;
                    }
                }
                out[b * p + i] = best as u8;
            }
        }
        LabelMap::new(n, h, w, out)
    }

    /// Horizontal mirror of every sample.
    pub fn flip_horizontal(&self) -> LabelMap {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        LabelMap { data, ..self.clone() }
    }

    /// `data[n, y, x] == class` as a boolean mask of one sample.
    pub fn mask(&self, n: usize, class: u8) -> Vec<bool> {
        let p = self.plane();
        self.data[n * p..(n + 1) * p].iter().map(|&c| c == class).collect()
    }
}
