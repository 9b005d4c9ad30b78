//! Single- and multi-level 2D Haar transforms.
//!
//! Every non-overlapping 2x2 block `[[a, b], [c, d]]` of each channel is
//! mapped to four subbands by correlating it with the stencils in
//! [`HAAR`], scaled by 1/2. The scaled filter bank is orthonormal, so the
//! inverse is the transpose and the transform preserves energy.
//!
//! Subbands are interleaved per input channel: input channel `c` becomes
//! output channels `4c..4c+4` in the order LL, LH, HL, HH.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// The four 2x2 Haar stencils and the normalization applied to them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HaarFilters {
    pub ll: [[i8; 2]; 2],
    pub lh: [[i8; 2]; 2],
    pub hl: [[i8; 2]; 2],
    pub hh: [[i8; 2]; 2],
    pub scale: f64,
}

pub const HAAR: HaarFilters = HaarFilters {
    ll: [[1, 1], [1, 1]],
    lh: [[-1, -1], [1, 1]],
    hl: [[-1, 1], [-1, 1]],
    hh: [[1, -1], [-1, 1]],
    scale: 0.5,
};

impl HaarFilters {
    /// Stencils in subband order LL, LH, HL, HH.
    pub fn stencils(&self) -> [[[i8; 2]; 2]; 4] {
        [self.ll, self.lh, self.hl, self.hh]
    }

    /// Rows are the flattened, scaled stencils.
    pub fn analysis_matrix(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for (row, s) in m.iter_mut().zip(self.stencils()) {
            for i in 0..2 {
                for j in 0..2 {
                    row[i * 2 + j] = self.scale * f64::from(s[i][j]);
                }
            }
        }
        m
    }
}

fn coefficients<T: Scalar>() -> [[T; 4]; 4] {
    HAAR.analysis_matrix().map(|row| row.map(T::from_f64_lossy))
}

/// Result of one analysis level: `(n, 4c, h/2, w/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandStack<T = f32>(Tensor<T>);

impl<T: Scalar> SubbandStack<T> {
    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        let c = t.shape().c;
        if !c.is_multiple_of(4) {
            return Err(Error::ChannelsNotDivisible { channels: c });
        }
        Ok(SubbandStack(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }

    /// Number of channels of the image this stack came from.
    pub fn source_channels(&self) -> usize {
        self.0.shape().c / 4
    }
}

pub fn dwt_forward<T: Scalar>(input: &Tensor<T>) -> Result<SubbandStack<T>> {
    let s = input.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::OddDimension { height: s.h, width: s.w });
    }
    let (h2, w2) = (s.h / 2, s.w / 2);
    let f = coefficients::<T>();
    let mut out = Tensor::zeros(Shape::new(s.n, 4 * s.c, h2, w2));
    let src = input.data();
    let dst = out.data_mut();
    let plane_in = s.plane();
    let plane_out = h2 * w2;
    for nc in 0..s.n * s.c {
        let x = &src[nc * plane_in..(nc + 1) * plane_in];
        let base = nc * 4 * plane_out;
        for y in 0..h2 {
            for xx in 0..w2 {
                let top = 2 * y * s.w + 2 * xx;
                let block = [x[top], x[top + 1], x[top + s.w], x[top + s.w + 1]];
                for (band, row) in f.iter().enumerate() {
                    let v = row[0] * block[0] + row[1] * block[1] + row[2] * block[2] + row[3] * block[3];
                    dst[base + band * plane_out + y * w2 + xx] = v;
                }
            }
        }
    }
    Ok(SubbandStack(out))
}

pub fn iwt_forward<T: Scalar>(subbands: &SubbandStack<T>) -> Result<Tensor<T>> {
    let s = subbands.shape();
    if !s.c.is_multiple_of(4) {
        return Err(Error::ChannelsNotDivisible { channels: s.c });
    }
    let c = s.c / 4;
    let (h, w) = (2 * s.h, 2 * s.w);
    let f = coefficients::<T>();
    let mut out = Tensor::zeros(Shape::new(s.n, c, h, w));
    let src = subbands.tensor().data();
    let dst = out.data_mut();
    let plane_in = s.plane();
    for nc in 0..s.n * c {
        let base = nc * 4 * plane_in;
        let img = &mut dst[nc * h * w..(nc + 1) * h * w];
        for y in 0..s.h {
            for xx in 0..s.w {
                let at = y * s.w + xx;
                let bands = [
                    src[base + at],
                    src[base + plane_in + at],
                    src[base + 2 * plane_in + at],
                    src[base + 3 * plane_in + at],
                ];
                let top = 2 * y * w + 2 * xx;
                let offsets = [top, top + 1, top + w, top + w + 1];
                for (pos, &o) in offsets.iter().enumerate() {
                    img[o] = f[0][pos] * bands[0] + f[1][pos] * bands[1] + f[2][pos] * bands[2] + f[3][pos] * bands[3];
                }
            }
        }
    }
    Ok(out)
}

/// The analysis map is orthogonal, so its adjoint is the synthesis map.
pub fn dwt_backward<T: Scalar>(grad_out: &SubbandStack<T>) -> Result<Tensor<T>> {
    iwt_forward(grad_out)
}

pub fn iwt_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<SubbandStack<T>> {
    dwt_forward(grad_out)
}

/// Multi-level decomposition along the LL path.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLevel<T = f32> {
    /// Coarsest approximation, `(n, c, h/2^L, w/2^L)`.
    pub approx: Tensor<T>,
    /// Detail bands per level, finest first; each is `(n, 3c, ..)` in LH, HL, HH order.
    pub details: Vec<Tensor<T>>,
}

pub fn dwt_multilevel<T: Scalar>(input: &Tensor<T>, levels: usize) -> Result<MultiLevel<T>> {
    let mut approx = input.clone();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let stack = dwt_forward(&approx)?.into_tensor();
        let s = stack.shape();
        let c = s.c / 4;
        let plane = s.plane();
        let mut ll = Vec::with_capacity(s.n * c * plane);
        let mut rest = Vec::with_capacity(s.n * 3 * c * plane);
        for group in stack.data().chunks(4 * plane) {
            ll.extend_from_slice(&group[..plane]);
            rest.extend_from_slice(&group[plane..]);
        }
        approx = Tensor::from_vec(Shape::new(s.n, c, s.h, s.w), ll)?;
        details.push(Tensor::from_vec(Shape::new(s.n, 3 * c, s.h, s.w), rest)?);
    }
    Ok(MultiLevel { approx, details })
}

pub fn iwt_multilevel<T: Scalar>(levels: &MultiLevel<T>) -> Result<Tensor<T>> {
    let mut approx = levels.approx.clone();
    for detail in levels.details.iter().rev() {
        let a = approx.shape();
        let d = detail.shape();
        if d != Shape::new(a.n, 3 * a.c, a.h, a.w) {
            return Err(Error::shape("iwt_multilevel", Shape::new(a.n, 3 * a.c, a.h, a.w), d));
        }
        let plane = a.plane();
        let mut data = Vec::with_capacity(4 * a.len());
        for (ll, rest) in approx.data().chunks(plane).zip(detail.data().chunks(3 * plane)) {
            data.extend_from_slice(ll);
            data.extend_from_slice(rest);
        }
        let stack = SubbandStack::from_tensor(Tensor::from_vec(Shape::new(a.n, 4 * a.c, a.h, a.w), data)?)?;
        approx = iwt_forward(&stack)?;
    }
    Ok(approx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn filter_bank_is_orthonormal() {
        let m = HAAR.analysis_matrix();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..4).map(|k| m[i][k] * m[j][k]).sum();
                assert_eq!(dot, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn constant_image() {
        let x = Tensor::full(Shape::new(1, 1, 4, 6), 3.0f32);
        let s = dwt_forward(&x).unwrap();
        for y in 0..2 {
            for xx in 0..3 {
                assert_eq!(s.tensor().get(0, 0, y, xx), 6.0);
                for band in 1..4 {
                    assert_eq!(s.tensor().get(0, band, y, xx), 0.0);
                }
            }
        }
        assert_eq!(iwt_forward(&s).unwrap(), x);
    }

    #[test]
    fn single_block() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let s = dwt_forward(&x).unwrap();
        assert_eq!(s.tensor().data(), &[5.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn channel_layout_interleaves_bands() {
        let mut x = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2));
        for i in 0..4 {
            x.data_mut()[4 + i] = 1.0;
        }
        let s = dwt_forward(&x).unwrap();
        assert_eq!(s.tensor().data(), &[0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.source_channels(), 2);
    }

    #[test]
    fn energy_is_preserved() {
        let x = random(Shape::new(1, 1, 8, 8), 11).cast::<f64>();
        let s = dwt_forward(&x).unwrap();
        let (a, b) = (x.sum_squares(), s.tensor().sum_squares());
        assert!((a - b).abs() <= 1e-6 * a);
    }

    #[test]
    fn round_trips() {
        let x = random(Shape::new(2, 3, 8, 10), 12);
        let back = iwt_forward(&dwt_forward(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-5);

        let s = SubbandStack::from_tensor(random(Shape::new(2, 8, 3, 5), 13)).unwrap();
        let again = dwt_forward(&iwt_forward(&s).unwrap()).unwrap();
        assert!(again.tensor().max_abs_diff(s.tensor()).unwrap() < 1e-5);
    }

    #[test]
    fn zero_and_constant_inverse() {
        let z = SubbandStack::from_tensor(Tensor::<f32>::zeros(Shape::new(1, 4, 3, 3))).unwrap();
        assert!(iwt_forward(&z).unwrap().data().iter().all(|&v| v == 0.0));

        let mut t = Tensor::<f32>::zeros(Shape::new(1, 4, 2, 2));
        for i in 0..4 {
            t.data_mut()[i] = 2.5;
        }
        let img = iwt_forward(&SubbandStack::from_tensor(t).unwrap()).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn rejects_bad_shapes() {
        let err = dwt_forward(&Tensor::<f32>::zeros(Shape::new(1, 1, 3, 4))).unwrap_err();
        assert!(matches!(err, Error::OddDimension { height: 3, width: 4 }));
        let err = SubbandStack::from_tensor(Tensor::<f32>::zeros(Shape::new(1, 6, 2, 2))).unwrap_err();
        assert!(matches!(err, Error::ChannelsNotDivisible { channels: 6 }));
    }

    #[test]
    fn backward_of_ones_is_synthesis_of_ones() {
        let ones = SubbandStack::from_tensor(Tensor::full(Shape::new(1, 4, 2, 2), 1.0f64)).unwrap();
        let g = dwt_backward(&ones).unwrap();
        // brute-force adjoint: <dwt(e_i), ones> for each basis image e_i
        for i in 0..16 {
            let mut e = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4));
            e.data_mut()[i] = 1.0;
            let col: f64 = dwt_forward(&e).unwrap().tensor().data().iter().sum();
            assert!((g.data()[i] - col).abs() < 1e-15);
        }
        let zero = iwt_backward(&Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4))).unwrap();
        assert!(zero.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multilevel_round_trip() {
        let x = random(Shape::new(1, 2, 16, 8), 14);
        let ml = dwt_multilevel(&x, 3).unwrap();
        assert_eq!(ml.approx.shape(), Shape::new(1, 2, 2, 1));
        assert_eq!(ml.details.len(), 3);
        let back = iwt_multilevel(&ml).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-5);
        assert!(dwt_multilevel(&x, 4).is_err());
    }
}
