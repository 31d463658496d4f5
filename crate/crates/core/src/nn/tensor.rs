use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// A C×H×W feature map, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor buffer length");
        Self { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.plane()..(c + 1) * self.plane()]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        (self.c, self.h, self.w) == (other.c, other.h, other.w)
    }

    /// Channel-wise concatenation.
    pub fn concat(parts: &[&Tensor]) -> Tensor {
        let (h, w) = (parts[0].h, parts[0].w);
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.data.len()).sum());
        for t in parts {
            assert_eq!((t.h, t.w), (h, w), "concat spatial mismatch");
            data.extend_from_slice(&t.data);
        }
        Tensor {
            c: parts.iter().map(|t| t.c).sum(),
            h,
            w,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`] given the channel counts.
    pub fn split(&self, channels: &[usize]) -> Vec<Tensor> {
        assert_eq!(channels.iter().sum::<usize>(), self.c);
        let mut out = Vec::with_capacity(channels.len());
        let mut start = 0;
        for &c in channels {
            let len = c * self.plane();
            out.push(Tensor::from_vec(
                c,
                self.h,
                self.w,
                self.data[start..start + len].to_vec(),
            ));
            start += len;
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// A learnable buffer with its accumulated gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Vec<f32>,
    #[serde(skip)]
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, len: usize) -> Self {
        Self::new(name, vec![0.0; len])
    }

    /// Zero-mean normal initialization.
    pub fn normal<R: Rng + ?Sized>(name: impl Into<String>, len: usize, std: f32, rng: &mut R) -> Self {
        let dist = Normal::new(0.0f32, std).expect("finite std");
        Self::new(name, (0..len).map(|_| dist.sample(rng)).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        } else {
            self.grad.fill(0.0);
        }
    }
}
