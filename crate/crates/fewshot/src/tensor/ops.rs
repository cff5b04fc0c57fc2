use std::rc::Rc;

use super::tape::{recording_active, BackFn};
use super::{Scalar, Tensor, TensorError};

// Cotangent math inside backward closures; shapes are consistent by
// construction, so contract failures there are bugs, not user errors.
macro_rules! ix {
    ($e:expr) => {
        $e.expect("autodiff internal shape invariant")
    };
}

/// Registers `out` as the result of an op over `inputs`. `back` receives the
/// upstream cotangent and emits input cotangents by position in `inputs`;
/// emissions for non-grad inputs are dropped.
fn record<F: Scalar>(
    out: Tensor<F>,
    inputs: &[&Tensor<F>],
    back: impl Fn(&Tensor<F>, &mut dyn FnMut(usize, Tensor<F>)) + 'static,
) -> Tensor<F> {
    let Some(tape) = recording_active::<F>() else {
        return out;
    };
    if !inputs.iter().any(|t| t.grad_enabled()) {
        return out;
    }
    let ids: Vec<Option<usize>> = inputs
        .iter()
        .map(|t| {
            if t.grad_enabled() {
                Some(tape.leaf_id(t))
            } else {
                None
            }
        })
        .collect();
    let node: BackFn<F> = Box::new(move |g, emit| {
        back(g, &mut |local, cot| {
            if let Some(id) = ids[local] {
                emit(id, cot);
            }
        })
    });
    let id = tape.push_node(Some(node));
    out.set_tracked(tape.track_slot(id));
    out
}

fn zip<F: Scalar>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Ok(Tensor::plain(data, a.shape().to_vec()))
}

fn map<F: Scalar>(a: &Tensor<F>, f: impl Fn(F) -> F) -> Tensor<F> {
    Tensor::plain(a.data().iter().map(|&x| f(x)).collect(), a.shape().to_vec())
}

impl<F: Scalar> Tensor<F> {
    /// Elementwise map with no gradient recording (masks, constants).
    pub fn map_plain(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        map(self, f)
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let out = zip("add", self, other, |x, y| x + y)?;
        Ok(record(out, &[self, other], move |g, emit| {
            emit(0, g.clone());
            emit(1, g.clone());
        }))
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let out = zip("sub", self, other, |x, y| x - y)?;
        Ok(record(out, &[self, other], move |g, emit| {
            emit(0, g.clone());
            emit(1, g.neg());
        }))
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let out = zip("mul", self, other, |x, y| x * y)?;
        let (a, b) = (self.clone(), other.clone());
        let (na, nb) = (self.grad_enabled(), other.grad_enabled());
        Ok(record(out, &[self, other], move |g, emit| {
            if na {
                emit(0, ix!(g.mul(&b)));
            }
            if nb {
                emit(1, ix!(g.mul(&a)));
            }
        }))
    }

    pub fn div(&self, other: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let out = zip("div", self, other, |x, y| x / y)?;
        let (a, b) = (self.clone(), other.clone());
        let (na, nb) = (self.grad_enabled(), other.grad_enabled());
        Ok(record(out, &[self, other], move |g, emit| {
            if na {
                emit(0, ix!(g.div(&b)));
            }
            if nb {
                let bb = ix!(b.mul(&b));
                emit(1, ix!(ix!(g.mul(&a)).div(&bb)).neg());
            }
        }))
    }

    pub fn neg(&self) -> Tensor<F> {
        let out = map(self, |x| -x);
        record(out, &[self], move |g, emit| emit(0, g.neg()))
    }

    pub fn scale(&self, c: f64) -> Tensor<F> {
        let cf = F::from_f64(c);
        let out = map(self, |x| x * cf);
        record(out, &[self], move |g, emit| emit(0, g.scale(c)))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<F> {
        let cf = F::from_f64(c);
        let out = map(self, |x| x + cf);
        record(out, &[self], move |g, emit| emit(0, g.clone()))
    }

    pub fn exp(&self) -> Tensor<F> {
        let out = map(self, |x| x.exp());
        let y = out.clone();
        record(out, &[self], move |g, emit| emit(0, ix!(g.mul(&y))))
    }

    pub fn ln(&self) -> Tensor<F> {
        let out = map(self, |x| x.ln());
        let a = self.clone();
        record(out, &[self], move |g, emit| emit(0, ix!(g.div(&a))))
    }

    pub fn sqrt(&self) -> Tensor<F> {
        let out = map(self, |x| x.sqrt());
        let y = out.clone();
        record(out, &[self], move |g, emit| {
            emit(0, ix!(g.div(&y)).scale(0.5));
        })
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        let out = map(self, |x| {
            // Stable in both tails.
            if x.to_f64() >= 0.0 {
                F::ONE / (F::ONE + (-x).exp())
            } else {
                let e = x.exp();
                e / (F::ONE + e)
            }
        });
        let y = out.clone();
        record(out, &[self], move |g, emit| {
            let one_minus = y.neg().add_scalar(1.0);
            emit(0, ix!(ix!(g.mul(&y)).mul(&one_minus)));
        })
    }

    pub fn relu(&self) -> Tensor<F> {
        let out = map(self, |x| x.maxv(F::ZERO));
        let mask = self.map_plain(|x| if x > F::ZERO { F::ONE } else { F::ZERO });
        record(out, &[self], move |g, emit| emit(0, ix!(g.mul(&mask))))
    }

    /// max(x, c); gradient passes only where x > c.
    pub fn clamp_min(&self, c: f64) -> Tensor<F> {
        let cf = F::from_f64(c);
        let out = map(self, |x| x.maxv(cf));
        let mask = self.map_plain(|x| if x > cf { F::ONE } else { F::ZERO });
        record(out, &[self], move |g, emit| emit(0, ix!(g.mul(&mask))))
    }

    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let out = Tensor::plain(matmul_data(self.data(), other.data(), m, k, n), vec![m, n]);
        let (a, b) = (self.clone(), other.clone());
        let (na, nb) = (self.grad_enabled(), other.grad_enabled());
        Ok(record(out, &[self, other], move |g, emit| {
            if na {
                emit(0, ix!(g.matmul(&b.transpose2())));
            }
            if nb {
                emit(1, ix!(a.transpose2().matmul(g)));
            }
        }))
    }

    pub fn transpose2(&self) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2, "transpose2 needs a matrix");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut data = vec![F::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::plain(data, vec![n, m]);
        record(out, &[self], move |g, emit| emit(0, g.transpose2()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                details: format!("{:?} -> {:?}", self.shape(), shape),
            });
        }
        let out = Tensor::plain(self.data().to_vec(), shape.to_vec());
        let orig = self.shape().to_vec();
        Ok(record(out, &[self], move |g, emit| {
            emit(0, ix!(g.reshape(&orig)));
        }))
    }

    /// Collapses all axes after the first: [B, ...] -> [B, prod(...)].
    pub fn flatten2(&self) -> Tensor<F> {
        let b = self.shape()[0];
        let rest = self.len() / b.max(1);
        ix!(self.reshape(&[b, rest]))
    }

    pub fn sum_all(&self) -> Tensor<F> {
        let mut acc = F::ZERO;
        for &v in self.data() {
            acc += v;
        }
        let out = Tensor::scalar(acc);
        let shape = self.shape().to_vec();
        record(out, &[self], move |g, emit| {
            emit(0, g.spread_scalar(&shape));
        })
    }

    pub fn mean_all(&self) -> Tensor<F> {
        self.sum_all().scale(1.0 / self.len() as f64)
    }

    /// [1] -> constant-filled `shape`; adjoint of sum_all.
    pub(crate) fn spread_scalar(&self, shape: &[usize]) -> Tensor<F> {
        assert_eq!(self.len(), 1);
        let out = Tensor::full(shape, self.item());
        record(out, &[self], move |g, emit| emit(0, g.sum_all()))
    }

    /// [m,n] -> [n], summing over rows.
    pub fn sum_axis0(&self) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2, "sum_axis0 needs a matrix");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut data = vec![F::ZERO; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += src[i * n + j];
            }
        }
        let out = Tensor::plain(data, vec![n]);
        record(out, &[self], move |g, emit| emit(0, g.broadcast_rows(m)))
    }

    /// [m,n] -> [m], summing over columns.
    pub fn sum_axis1(&self) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2, "sum_axis1 needs a matrix");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut data = vec![F::ZERO; m];
        for i in 0..m {
            for j in 0..n {
                data[i] += src[i * n + j];
            }
        }
        let out = Tensor::plain(data, vec![m]);
        record(out, &[self], move |g, emit| emit(0, g.broadcast_cols(n)))
    }

    /// [n] -> [m,n], repeating the vector as every row.
    pub fn broadcast_rows(&self, m: usize) -> Tensor<F> {
        assert_eq!(self.shape().len(), 1, "broadcast_rows needs a vector");
        let n = self.len();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(self.data());
        }
        let out = Tensor::plain(data, vec![m, n]);
        record(out, &[self], move |g, emit| emit(0, g.sum_axis0()))
    }

    /// [m] -> [m,n], repeating the vector as every column.
    pub fn broadcast_cols(&self, n: usize) -> Tensor<F> {
        assert_eq!(self.shape().len(), 1, "broadcast_cols needs a vector");
        let m = self.len();
        let src = self.data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for _ in 0..n {
                data.push(src[i]);
            }
        }
        let out = Tensor::plain(data, vec![m, n]);
        record(out, &[self], move |g, emit| emit(0, g.sum_axis1()))
    }

    /// out[i] = self[i, idx[i]].
    pub fn gather_axis1(&self, idx: &[usize]) -> Result<Tensor<F>, TensorError> {
        assert_eq!(self.shape().len(), 2, "gather_axis1 needs a matrix");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        if idx.len() != m {
            return Err(TensorError::InvalidShape {
                op: "gather_axis1",
                details: format!("{} indices for {} rows", idx.len(), m),
            });
        }
        for &j in idx {
            if j >= n {
                return Err(TensorError::InvalidLabel {
                    index: j,
                    n_classes: n,
                });
            }
        }
        let src = self.data();
        let data: Vec<F> = idx.iter().enumerate().map(|(i, &j)| src[i * n + j]).collect();
        let out = Tensor::plain(data, vec![m]);
        let idx: Rc<Vec<usize>> = Rc::new(idx.to_vec());
        Ok(record(out, &[self], move |g, emit| {
            emit(0, g.scatter_axis1(&idx, n));
        }))
    }

    /// [m] -> [m,n] zeros with self[i] placed at column idx[i].
    pub fn scatter_axis1(&self, idx: &[usize], n: usize) -> Tensor<F> {
        assert_eq!(self.shape().len(), 1, "scatter_axis1 needs a vector");
        let m = self.len();
        assert_eq!(idx.len(), m);
        let src = self.data();
        let mut data = vec![F::ZERO; m * n];
        for (i, &j) in idx.iter().enumerate() {
            data[i * n + j] += src[i];
        }
        let out = Tensor::plain(data, vec![m, n]);
        let idx: Rc<Vec<usize>> = Rc::new(idx.to_vec());
        record(out, &[self], move |g, emit| {
            emit(0, ix!(g.gather_axis1(&idx)));
        })
    }

    /// First-axis gather: out[i, ...] = self[idx[i], ...]. Works on any rank.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor<F>, TensorError> {
        let rows = self.shape().first().copied().unwrap_or(0);
        let stride: usize = self.shape()[1..].iter().product();
        for &i in idx {
            if i >= rows {
                return Err(TensorError::InvalidShape {
                    op: "select_rows",
                    details: format!("row {} out of {}", i, rows),
                });
            }
        }
        let src = self.data();
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            data.extend_from_slice(&src[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        let out = Tensor::plain(data, shape);
        let idx: Rc<Vec<usize>> = Rc::new(idx.to_vec());
        Ok(record(out, &[self], move |g, emit| {
            emit(0, g.scatter_rows(&idx, rows));
        }))
    }

    /// First-axis scatter-add into `rows` zero rows; adjoint of select_rows
    /// (duplicate indices accumulate).
    pub fn scatter_rows(&self, idx: &[usize], rows: usize) -> Tensor<F> {
        let stride: usize = self.shape()[1..].iter().product();
        assert_eq!(idx.len(), self.shape()[0]);
        let src = self.data();
        let mut data = vec![F::ZERO; rows * stride];
        for (k, &i) in idx.iter().enumerate() {
            let dst = &mut data[i * stride..(i + 1) * stride];
            let s = &src[k * stride..(k + 1) * stride];
            for (d, &v) in dst.iter_mut().zip(s) {
                *d += v;
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = rows;
        let out = Tensor::plain(data, shape);
        let idx: Rc<Vec<usize>> = Rc::new(idx.to_vec());
        record(out, &[self], move |g, emit| {
            emit(0, ix!(g.select_rows(&idx)));
        })
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(parts: &[&Tensor<F>]) -> Result<Tensor<F>, TensorError> {
        assert!(!parts.is_empty());
        let tail = &parts[0].shape()[1..];
        let stride: usize = tail.iter().product();
        let mut total = 0;
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            total += p.shape()[0];
        }
        let mut data = Vec::with_capacity(total * stride);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let mut shape = parts[0].shape().to_vec();
        shape[0] = total;
        let out = Tensor::plain(data, shape);
        let row_counts: Vec<usize> = parts.iter().map(|p| p.shape()[0]).collect();
        let refs: Vec<&Tensor<F>> = parts.to_vec();
        Ok(record(out, &refs, move |g, emit| {
            let mut start = 0;
            for (local, &rc) in row_counts.iter().enumerate() {
                let idx: Vec<usize> = (start..start + rc).collect();
                emit(local, ix!(g.select_rows(&idx)));
                start += rc;
            }
        }))
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat_ch(&self, other: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls.len() != 4 || rs.len() != 4 || ls[0] != rs[0] || ls[2] != rs[2] || ls[3] != rs[3] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_ch",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let (b, c1, h, w) = (ls[0], ls[1], ls[2], ls[3]);
        let c2 = rs[1];
        let plane = h * w;
        let mut data = Vec::with_capacity(b * (c1 + c2) * plane);
        for bi in 0..b {
            data.extend_from_slice(&self.data()[bi * c1 * plane..(bi + 1) * c1 * plane]);
            data.extend_from_slice(&other.data()[bi * c2 * plane..(bi + 1) * c2 * plane]);
        }
        let out = Tensor::plain(data, vec![b, c1 + c2, h, w]);
        Ok(record(out, &[self, other], move |g, emit| {
            emit(0, ix!(g.slice_ch(0, c1)));
            emit(1, ix!(g.slice_ch(c1, c1 + c2)));
        }))
    }

    /// Channel slice [from, to) of an NCHW tensor.
    pub fn slice_ch(&self, from: usize, to: usize) -> Result<Tensor<F>, TensorError> {
        let s = self.shape();
        if s.len() != 4 || to > s[1] || from >= to {
            return Err(TensorError::InvalidShape {
                op: "slice_ch",
                details: format!("channels {}..{} of {:?}", from, to, s),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let cw = to - from;
        let mut data = Vec::with_capacity(b * cw * plane);
        for bi in 0..b {
            let base = (bi * c + from) * plane;
            data.extend_from_slice(&self.data()[base..base + cw * plane]);
        }
        let out = Tensor::plain(data, vec![b, cw, h, w]);
        Ok(record(out, &[self], move |g, emit| {
            emit(0, g.embed_ch(from, c));
        }))
    }

    /// Embeds an NCHW tensor into `c_total` channels of zeros at offset.
    pub(crate) fn embed_ch(&self, from: usize, c_total: usize) -> Tensor<F> {
        let s = self.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let mut data = vec![F::ZERO; b * c_total * plane];
        for bi in 0..b {
            let dst = (bi * c_total + from) * plane;
            let src = bi * c * plane;
            data[dst..dst + c * plane].copy_from_slice(&self.data()[src..src + c * plane]);
        }
        let out = Tensor::plain(data, vec![b, c_total, h, w]);
        record(out, &[self], move |g, emit| {
            emit(0, ix!(g.slice_ch(from, from + c)));
        })
    }

    /// Gather by precomputed flat indices; out[j] = self[idx[j]].
    pub(crate) fn gather_flat(&self, idx: Rc<Vec<u32>>, out_shape: &[usize]) -> Tensor<F> {
        let src = self.data();
        let data: Vec<F> = idx.iter().map(|&i| src[i as usize]).collect();
        let out = Tensor::plain(data, out_shape.to_vec());
        let in_shape = self.shape().to_vec();
        record(out, &[self], move |g, emit| {
            emit(0, g.scatter_flat(Rc::clone(&idx), &in_shape));
        })
    }

    /// Scatter-add by flat indices into zeros of `in_shape`; adjoint of
    /// gather_flat.
    pub(crate) fn scatter_flat(&self, idx: Rc<Vec<u32>>, in_shape: &[usize]) -> Tensor<F> {
        let mut data = vec![F::ZERO; in_shape.iter().product()];
        for (j, &i) in idx.iter().enumerate() {
            data[i as usize] += self.data()[j];
        }
        let out = Tensor::plain(data, in_shape.to_vec());
        let out_shape = self.shape().to_vec();
        record(out, &[self], move |g, emit| {
            emit(0, g.gather_flat(Rc::clone(&idx), &out_shape));
        })
    }

    /// 2x2 (or k x k) max pooling with stride k; trailing remainder rows and
    /// columns are dropped. Ties route the gradient to the first index.
    pub fn max_pool2d(&self, k: usize) -> Result<Tensor<F>, TensorError> {
        let s = self.shape();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(TensorError::InvalidShape {
                op: "max_pool2d",
                details: format!("window {} on {:?}", k, s),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let src = self.data();
        let mut idx = Vec::with_capacity(b * c * oh * ow);
        for bc in 0..b * c {
            let base = bc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (oy * k) * w + ox * k;
                    let mut best_v = src[best];
                    for ky in 0..k {
                        for kx in 0..k {
                            let p = base + (oy * k + ky) * w + (ox * k + kx);
                            if src[p] > best_v {
                                best_v = src[p];
                                best = p;
                            }
                        }
                    }
                    idx.push(best as u32);
                }
            }
        }
        Ok(self.gather_flat(Rc::new(idx), &[b, c, oh, ow]))
    }

    /// Patch-extraction for convolution: NCHW -> [B*OH*OW, C*kh*kw], zero
    /// padded. Errors unless (H + 2p - kh) and (W + 2p - kw) divide by stride.
    pub fn im2col(
        &self,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<F>, TensorError> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "im2col",
                details: format!("expected NCHW, got {:?}", s),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad)?;
        let src = self.data();
        let cols = c * kh * kw;
        let mut data = vec![F::ZERO; b * oh * ow * cols];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * cols;
                    for ci in 0..c {
                        let in_base = (bi * c + ci) * h * w;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ixp = (ox * stride + kx) as isize - pad as isize;
                                if ixp < 0 || ixp >= w as isize {
                                    continue;
                                }
                                data[row + (ci * kh + ky) * kw + kx] =
                                    src[in_base + iy as usize * w + ixp as usize];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::plain(data, vec![b * oh * ow, cols]);
        let in_shape = [b, c, h, w];
        Ok(record(out, &[self], move |g, emit| {
            emit(0, g.col2im(in_shape, kh, kw, stride, pad));
        }))
    }

    /// Adjoint of im2col: accumulates patch columns back into NCHW.
    pub(crate) fn col2im(
        &self,
        in_shape: [usize; 4],
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Tensor<F> {
        let [b, c, h, w] = in_shape;
        let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad).expect("col2im geometry");
        let cols = c * kh * kw;
        let src = self.data();
        let mut data = vec![F::ZERO; b * c * h * w];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * cols;
                    for ci in 0..c {
                        let in_base = (bi * c + ci) * h * w;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ixp = (ox * stride + kx) as isize - pad as isize;
                                if ixp < 0 || ixp >= w as isize {
                                    continue;
                                }
                                data[in_base + iy as usize * w + ixp as usize] +=
                                    src[row + (ci * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::plain(data, vec![b, c, h, w]);
        record(out, &[self], move |g, emit| {
            emit(0, ix!(g.im2col(kh, kw, stride, pad)));
        })
    }

    /// [B*OH*OW, O] -> [B, O, OH, OW]; layout shim after the conv matmul.
    pub(crate) fn to_nchw(&self, b: usize, o: usize, oh: usize, ow: usize) -> Tensor<F> {
        assert_eq!(self.shape(), &[b * oh * ow, o]);
        let src = self.data();
        let mut data = vec![F::ZERO; b * o * oh * ow];
        for bi in 0..b {
            for y in 0..oh {
                for x in 0..ow {
                    let row = ((bi * oh + y) * ow + x) * o;
                    for oc in 0..o {
                        data[((bi * o + oc) * oh + y) * ow + x] = src[row + oc];
                    }
                }
            }
        }
        let out = Tensor::plain(data, vec![b, o, oh, ow]);
        record(out, &[self], move |g, emit| emit(0, g.from_nchw()))
    }

    /// Inverse of to_nchw: [B, O, OH, OW] -> [B*OH*OW, O].
    pub(crate) fn from_nchw(&self) -> Tensor<F> {
        let s = self.shape();
        let (b, o, oh, ow) = (s[0], s[1], s[2], s[3]);
        let src = self.data();
        let mut data = vec![F::ZERO; b * o * oh * ow];
        for bi in 0..b {
            for y in 0..oh {
                for x in 0..ow {
                    let row = ((bi * oh + y) * ow + x) * o;
                    for oc in 0..o {
                        data[row + oc] = src[((bi * o + oc) * oh + y) * ow + x];
                    }
                }
            }
        }
        let out = Tensor::plain(data, vec![b * oh * ow, o]);
        record(out, &[self], move |g, emit| {
            emit(0, g.to_nchw(b, o, oh, ow));
        })
    }

    /// Adds a per-channel bias to an NCHW tensor.
    pub fn add_channel_bias(&self, bias: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let s = self.shape();
        if s.len() != 4 || bias.shape() != [s[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: s.to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        let bc = bias.broadcast_channel(b, h, w);
        self.add(&bc)
    }

    /// [C] -> [B,C,H,W] constant over batch and space.
    pub fn broadcast_channel(&self, b: usize, h: usize, w: usize) -> Tensor<F> {
        assert_eq!(self.shape().len(), 1, "broadcast_channel needs a vector");
        let c = self.len();
        let plane = h * w;
        let mut data = Vec::with_capacity(b * c * plane);
        for _ in 0..b {
            for ci in 0..c {
                let v = self.data()[ci];
                data.extend(std::iter::repeat(v).take(plane));
            }
        }
        let out = Tensor::plain(data, vec![b, c, h, w]);
        record(out, &[self], move |g, emit| emit(0, g.sum_nonchannel()))
    }

    /// NCHW -> [C], summing over batch and space; adjoint of
    /// broadcast_channel.
    pub fn sum_nonchannel(&self) -> Tensor<F> {
        let s = self.shape();
        assert_eq!(s.len(), 4, "sum_nonchannel needs NCHW");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let src = self.data();
        let mut data = vec![F::ZERO; c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let mut acc = F::ZERO;
                for &v in &src[base..base + plane] {
                    acc += v;
                }
                data[ci] += acc;
            }
        }
        let out = Tensor::plain(data, vec![c]);
        record(out, &[self], move |g, emit| {
            emit(0, g.broadcast_channel(b, h, w));
        })
    }

    /// Row-wise max as a detached constant (numerical-stability shifts).
    pub fn row_max_detached(&self) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2);
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let data: Vec<F> = (0..m)
            .map(|i| {
                let row = &src[i * n..(i + 1) * n];
                row.iter().copied().fold(row[0], |a, b| a.maxv(b))
            })
            .collect();
        Tensor::plain(data, vec![m])
    }

    /// Row-wise argmax; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        assert_eq!(self.shape().len(), 2);
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        (0..m)
            .map(|i| {
                let row = &src[i * n..(i + 1) * n];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

fn matmul_data<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(crate) fn conv_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize), TensorError> {
    if stride == 0 || kh == 0 || kw == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(TensorError::InvalidShape {
            op: "conv2d",
            details: format!("kernel {}x{} stride {} pad {} on {}x{}", kh, kw, stride, pad, h, w),
        });
    }
    let dh = h + 2 * pad - kh;
    let dw = w + 2 * pad - kw;
    if dh % stride != 0 || dw % stride != 0 {
        return Err(TensorError::InvalidShape {
            op: "conv2d",
            details: format!(
                "output size not integral: ({} + 2*{} - {}) / {} + 1",
                h, pad, kh, stride
            ),
        });
    }
    Ok((dh / stride + 1, dw / stride + 1))
}

/// Cross-correlation of NCHW input with [O, C, kh, kw] weights.
pub fn conv2d<F: Scalar>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>, TensorError> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let (b, _c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad)?;
    let cols = x.im2col(kh, kw, stride, pad)?;
    let wmat = weight.reshape(&[o, ws[1] * kh * kw])?.transpose2();
    let out = cols.matmul(&wmat)?.to_nchw(b, o, oh, ow);
    match bias {
        Some(bv) => out.add_channel_bias(bv),
        None => Ok(out),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with current-batch statistics. `update_running` is off in
    /// adaptation inner loops so meta-learning never pollutes running stats.
    Train { update_running: bool },
    /// Normalize with the stored running statistics.
    Eval,
}

/// Batch norm over NCHW channels. Returns the normalized tensor and, in
/// training mode with updates on, the new (running_mean, running_var);
/// running variance uses the unbiased estimate, normalization the biased one.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    running_mean: &[F],
    running_var: &[F],
    eps: f64,
    momentum: f64,
    mode: BnMode,
) -> Result<(Tensor<F>, Option<(Vec<F>, Vec<F>)>), TensorError> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::InvalidShape {
            op: "batch_norm",
            details: format!("expected NCHW, got {:?}", s),
        });
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if gamma.shape() != [c] || beta.shape() != [c] || running_mean.len() != c || running_var.len() != c
    {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm",
            lhs: s.to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    match mode {
        BnMode::Train { update_running } => {
            if b < 2 {
                return Err(TensorError::BatchTooSmall {
                    op: "batch_norm",
                    batch: b,
                });
            }
            let n = (b * h * w) as f64;
            let mu = x.sum_nonchannel().scale(1.0 / n);
            let xc = x.sub(&mu.broadcast_channel(b, h, w))?;
            let var = xc.mul(&xc)?.sum_nonchannel().scale(1.0 / n);
            let std = var.add_scalar(eps).sqrt();
            let xhat = xc.div(&std.broadcast_channel(b, h, w))?;
            let out = xhat
                .mul(&gamma.broadcast_channel(b, h, w))?
                .add(&beta.broadcast_channel(b, h, w))?;
            let updated = if update_running {
                let unbias = n / (n - 1.0);
                let new_mean: Vec<F> = running_mean
                    .iter()
                    .zip(mu.data())
                    .map(|(&r, &m)| {
                        F::from_f64((1.0 - momentum) * r.to_f64() + momentum * m.to_f64())
                    })
                    .collect();
                let new_var: Vec<F> = running_var
                    .iter()
                    .zip(var.data())
                    .map(|(&r, &v)| {
                        F::from_f64((1.0 - momentum) * r.to_f64() + momentum * v.to_f64() * unbias)
                    })
                    .collect();
                Some((new_mean, new_var))
            } else {
                None
            };
            Ok((out, updated))
        }
        BnMode::Eval => {
            let rm = Tensor::plain(running_mean.to_vec(), vec![c]);
            let inv: Vec<F> = running_var
                .iter()
                .map(|&v| F::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
                .collect();
            let inv = Tensor::plain(inv, vec![c]);
            let xhat = x
                .sub(&rm.broadcast_channel(b, h, w))?
                .mul(&inv.broadcast_channel(b, h, w))?;
            let out = xhat
                .mul(&gamma.broadcast_channel(b, h, w))?
                .add(&beta.broadcast_channel(b, h, w))?;
            Ok((out, None))
        }
    }
}

/// Row-wise softmax of a [B, N] logit matrix; rows sum to 1.
pub fn softmax<F: Scalar>(logits: &Tensor<F>) -> Tensor<F> {
    let n = logits.shape()[1];
    let m = logits.row_max_detached();
    let z = ix!(logits.sub(&m.broadcast_cols(n)));
    let e = z.exp();
    ix!(e.div(&e.sum_axis1().broadcast_cols(n)))
}

/// Mean negative log-likelihood of `labels` under softmax of `logits`,
/// stabilized by a detached row-max shift.
pub fn softmax_cross_entropy<F: Scalar>(
    logits: &Tensor<F>,
    labels: &[usize],
) -> Result<Tensor<F>, TensorError> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(TensorError::InvalidShape {
            op: "softmax_cross_entropy",
            details: format!("expected [batch, classes], got {:?}", s),
        });
    }
    let (b, n) = (s[0], s[1]);
    if labels.len() != b {
        return Err(TensorError::InvalidShape {
            op: "softmax_cross_entropy",
            details: format!("{} labels for batch {}", labels.len(), b),
        });
    }
    for &l in labels {
        if l >= n {
            return Err(TensorError::InvalidLabel {
                index: l,
                n_classes: n,
            });
        }
    }
    let m = logits.row_max_detached();
    let z = logits.sub(&m.broadcast_cols(n))?;
    let lse = z.exp().sum_axis1().ln();
    let zt = z.gather_axis1(labels)?;
    Ok(lse.sub(&zt)?.sum_all().scale(1.0 / b as f64))
}

/// Mean squared error over all elements.
pub fn mse<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
    let d = pred.sub(target)?;
    Ok(d.mul(&d)?.mean_all())
}

/// Mean binary cross-entropy from logits, stable for large |logit|:
/// max(z,0) - z*t + ln(1 + exp(-|z|)).
pub fn bce_with_logits<F: Scalar>(
    logits: &Tensor<F>,
    targets: &Tensor<F>,
) -> Result<Tensor<F>, TensorError> {
    if logits.shape() != targets.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "bce_with_logits",
            lhs: logits.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let sign = logits.map_plain(|v| {
        if v > F::ZERO {
            F::ONE
        } else if v < F::ZERO {
            -F::ONE
        } else {
            F::ZERO
        }
    });
    let absz = logits.mul(&sign)?;
    let softplus = absz.neg().exp().add_scalar(1.0).ln();
    let elems = logits.relu().sub(&logits.mul(targets)?)?.add(&softplus)?;
    Ok(elems.mean_all())
}

/// x @ W^T + b for a [B, I] batch and [O, I] weight.
pub fn linear<F: Scalar>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
) -> Result<Tensor<F>, TensorError> {
    let out = x.matmul(&weight.transpose2())?;
    match bias {
        Some(b) => {
            let m = out.shape()[0];
            out.add(&b.broadcast_rows(m))
        }
        None => Ok(out),
    }
}
