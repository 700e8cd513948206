//! Dense row-major `f32` tensors and the `LHT1` file format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LHT1";

/// Row-major tensor of rank 1 to 4 in batch-channel-height-width order.
///
/// Leading extents may be zero (an empty batch of RoIs); the gradient buffer,
/// when present, always has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::InvalidArgument(format!(
                "tensor rank must be 1..=4, got {}",
                dims.len()
            )));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor of dims {dims:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        let n = dims.iter().product();
        Self::new(dims, vec![value; n]).expect("rank checked by caller")
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(&[1], vec![value]).unwrap()
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = dims.iter().product();
        Self::new(dims, (0..n).map(&mut f).collect()).expect("rank checked by caller")
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn randn<R: Rng>(dims: &[usize], std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std.max(0.0)).unwrap();
        Self::from_fn(dims, |_| normal.sample(rng))
    }

    /// Fan-in-scaled Gaussian, `std = sqrt(2 / fan_in)`.
    pub fn he_normal<R: Rng>(dims: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in.max(1) as f32).sqrt();
        Self::randn(dims, std, rng)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.dims[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same data under new dims with an equal element count.
    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.is_empty() || dims.len() > 4 {
            return Err(Error::InvalidArgument(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Extents padded on the left to rank 4.
    pub fn nchw(&self) -> [usize; 4] {
        let mut out = [1; 4];
        let off = 4 - self.dims.len();
        out[off..].copy_from_slice(&self.dims);
        out
    }

    pub fn at(&self, idx: &[usize]) -> f32 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f32) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let rank = read_u32(&mut r)? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Format(format!("unsupported rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Format(format!("payload shorter than {n} values")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(&dims, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Convolution geometry. Depthwise convolution is `groups == in_channels == out_channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding for odd kernels.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            pad_h: kernel / 2,
            pad_w: kernel / 2,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        Self::new(channels, channels, kernel)
            .with_stride(stride)
            .with_groups(channels)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_pad(mut self, pad_h: usize, pad_w: usize) -> Self {
        self.pad_h = pad_h;
        self.pad_w = pad_w;
        self
    }

    pub fn with_kernel(mut self, kernel_h: usize, kernel_w: usize) -> Self {
        self.kernel_h = kernel_h;
        self.kernel_w = kernel_w;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_channels,
            self.out_channels,
            self.kernel_h,
            self.kernel_w,
            self.stride,
            self.dilation,
            self.groups,
        ];
        if positive.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "conv spec has a zero extent: {self:?}"
            )));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::InvalidArgument(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels.checked_div(self.groups).unwrap_or(0),
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels.checked_div(self.groups).unwrap_or(0) * self.kernel_h * self.kernel_w
    }

    /// Output extent along one axis, `None` when the window does not fit.
    pub fn out_extent(&self, input: usize, pad: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * pad;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            self.out_extent(h, self.pad_h, self.kernel_h)?,
            self.out_extent(w, self.pad_w, self.kernel_w)?,
        ))
    }

    /// Multiply-accumulates for one image at the given input size.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        match self.output_hw(h, w) {
            Some((ho, wo)) => (ho * wo * self.out_channels * self.fan_in()) as u64,
            None => 0,
        }
    }

    pub fn param_count(&self, bias: bool) -> u64 {
        let w: usize = self.weight_dims().iter().product();
        (w + if bias { self.out_channels } else { 0 }) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lht1_layout_is_bit_exact() {
        let t = Tensor::new(&[1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let mut expected = b"LHT1".to_vec();
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(Tensor::read_from(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn lht1_rejects_garbage() {
        assert!(Tensor::read_from(&b"LHT2\x01\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        Tensor::zeros(&[3]).write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(
            Tensor::read_from(buf.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn length_invariant_enforced() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(&[0, 4], vec![]).is_ok());
    }

    #[test]
    fn output_extent_formula() {
        // floor((H + 2p - d(k-1) - 1)/s) + 1
        for &(h, k, s, p, d) in &[
            (7, 3, 1, 1, 1),
            (7, 3, 2, 1, 1),
            (9, 3, 1, 2, 2),
            (10, 5, 3, 0, 1),
            (8, 3, 1, 0, 2),
        ] {
            let spec = ConvSpec::new(1, 1, k)
                .with_stride(s)
                .with_pad(p, p)
                .with_dilation(d);
            let expect = (h + 2 * p - d * (k - 1) - 1) / s + 1;
            assert_eq!(spec.out_extent(h, p, k), Some(expect));
        }
        assert_eq!(ConvSpec::new(1, 1, 5).with_pad(0, 0).out_extent(3, 0, 5), None);
    }
}
