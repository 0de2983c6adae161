//! Dense row-major tensors and the handful of kernels the networks need.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element dtype tag, also the STLW dtype code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    const DTYPE: DType;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!("tensor shape {shape:?} needs rank >= 1 and nonzero dimensions")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        assert!(!data.is_empty(), "empty tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len()).expect("length fits")
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        if self.shape != other.shape {
            return false;
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (&x, &y) in self.data.iter().zip(&other.data) {
            a.clear();
            b.clear();
            x.write_le(&mut a);
            y.write_le(&mut b);
            if a != b {
                return false;
            }
        }
        true
    }
}

/// `out[o] = Σ_i w[i, o] · x[i]`.
pub fn matvec<T: Real>(w: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if w.rank() != 2 || x.rank() != 1 || w.shape[0] != x.shape[0] {
        return Err(Error::dim("matvec", &w.shape, &x.shape));
    }
    let (rows, cols) = (w.shape[0], w.shape[1]);
    let mut out = vec![T::zero(); cols];
    for i in 0..rows {
        let xi = x.data[i];
        let row = &w.data[i * cols..(i + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o = *o + wv * xi;
        }
    }
    Ok(Tensor {
        shape: vec![cols],
        data: out,
    })
}

/// Row-major `[n × k] · [k × m]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); n * m];
    matmul_into(&a.data, &b.data, &mut out, n, k, m);
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for r in 0..n {
        let orow = &mut out[r * m..(r + 1) * m];
        for (p, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Numerically stable softmax of a vector.
pub fn softmax<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    if z.data.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in softmax input".into()));
    }
    let mut out = z.data.clone();
    softmax_in_place(&mut out);
    Ok(Tensor {
        shape: z.shape.clone(),
        data: out,
    })
}

/// Softmax over consecutive groups of `group` entries.
pub fn softmax_groups<T: Real>(z: &Tensor<T>, group: usize) -> Result<Tensor<T>> {
    if group == 0 || !z.len().is_multiple_of(group) {
        return Err(Error::dim("softmax_groups", &z.shape, &[group]));
    }
    if z.data.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in softmax input".into()));
    }
    let mut out = z.data.clone();
    for chunk in out.chunks_mut(group) {
        softmax_in_place(chunk);
    }
    Ok(Tensor {
        shape: z.shape.clone(),
        data: out,
    })
}

pub(crate) fn softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in v.iter_mut() {
        *x = *x / total;
    }
}

pub(crate) fn log_softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = v.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    for x in v.iter_mut() {
        *x = *x - lse;
    }
}

/// Index of the largest entry; lowest index wins ties.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

const STLW_MAGIC: &[u8; 4] = b"STLW";
const STLW_VERSION: u16 = 1;

impl<T: Real> Tensor<T> {
    /// Serialize as an STLW blob: magic, u16 version, u8 dtype, u8 rank,
    /// u64 dims, then the little-endian payload.
    pub fn to_stlw(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.rank() + T::DTYPE.size() * self.len());
        out.extend_from_slice(STLW_MAGIC);
        out.extend_from_slice(&STLW_VERSION.to_le_bytes());
        out.push(T::DTYPE.code());
        out.push(self.rank() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn write_stlw<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.to_stlw())?;
        Ok(())
    }

    /// Read one STLW tensor, converting the payload to `T` if the stored
    /// dtype differs.
    pub fn read_stlw<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 8];
        r.read_exact(&mut head)?;
        if &head[0..4] != STLW_MAGIC {
            return Err(Error::Format("bad STLW magic".into()));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != STLW_VERSION {
            return Err(Error::Format(format!("unsupported STLW version {version}")));
        }
        let dtype = DType::from_code(head[6])?;
        let rank = head[7] as usize;
        if rank == 0 {
            return Err(Error::Format("STLW rank 0".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let d = u64::from_le_bytes(b);
            shape.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("element count overflow".into()))?;
        let mut payload = vec![0u8; n * dtype.size()];
        r.read_exact(&mut payload)?;
        let data: Vec<T> = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| T::lit(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| T::lit(f64::read_le(c)))
                .collect(),
        };
        Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_stlw())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_stlw(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matvec_identity() {
        let out = matvec(&Tensor::<f64>::identity(2), &t(&[2], &[3.0, 7.0])).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matvec_zeros() {
        let out = matvec(&Tensor::<f64>::zeros(&[3, 2]), &t(&[3], &[1.0, -4.0, 9.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn matvec_hand_example() {
        let w = t(&[2, 2], &[0.5, 1.0, 0.5, 0.0]);
        let out = matvec(&w, &t(&[2], &[1.0, -1.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0]);
    }

    #[test]
    fn matvec_mismatch_names_shapes() {
        let err = matvec(&Tensor::<f64>::zeros(&[3, 2]), &t(&[2], &[1.0, 1.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 2]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[3], &[7.5, 7.5, 7.5])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let s = softmax(&t(&[2], &[0.0, 1.0])).unwrap();
        assert!((s.data()[0] - 0.268_941_4).abs() < 1e-4);
        assert!((s.data()[1] - 0.731_058_6).abs() < 1e-4);
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(matches!(
            softmax(&t(&[2], &[f64::NAN, 0.0])),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0f32, 2.0]), 0);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Tensor::<f32>::new(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn stlw_header_layout() {
        let x = Tensor::<f32>::from_vec(vec![1.0, 2.0]);
        let bytes = x.to_stlw();
        assert_eq!(&bytes[0..4], b"STLW");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn stlw_rejects_bad_magic() {
        let mut bytes = Tensor::<f64>::scalar(1.0).to_stlw();
        bytes[0] = b'X';
        assert!(matches!(
            Tensor::<f64>::read_stlw(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(z in prop::collection::vec(-50.0f64..50.0, 1..10)) {
            let s = softmax(&Tensor::from_vec(z)).unwrap();
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
            prop_assert!((s.sum() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn softmax_shift_invariant(z in prop::collection::vec(-20.0f64..20.0, 1..10), c in -100.0f64..100.0) {
            let a = softmax(&Tensor::from_vec(z.clone())).unwrap();
            let b = softmax(&Tensor::from_vec(z.iter().map(|v| v + c).collect())).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn stlw_roundtrip(shape in prop::collection::vec(1usize..4, 1..5), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed ^ i as u64) as f64).sin()).collect();
            let x = Tensor::new(&shape, data).unwrap();
            let back = Tensor::<f64>::read_stlw(&mut x.to_stlw().as_slice()).unwrap();
            prop_assert!(x.bit_eq(&back));
        }
    }
}
