//! Elementwise, reduction, shape and matrix operations.

use super::{unbroadcast, Tape, Var};
use crate::scalar::Scalar;
use ndarray::{concatenate, Array2, ArrayD, ArrayView2, Axis, Ix2, Ix3, IxDyn, Slice, Zip};
use rand::Rng;

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.push(out, &[a, b], move |args| {
            vec![
                args.needs[0].then(|| unbroadcast(args.grad.clone(), &sa)),
                args.needs[1].then(|| unbroadcast(args.grad.clone(), &sb)),
            ]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.push(out, &[a, b], move |args| {
            vec![
                args.needs[0].then(|| unbroadcast(args.grad.clone(), &sa)),
                args.needs[1].then(|| unbroadcast(args.grad.mapv(|x| -x), &sb)),
            ]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.push(out, &[a, b], move |args| {
            vec![
                args.needs[0].then(|| unbroadcast(args.grad * args.inputs[1], &sa)),
                args.needs[1].then(|| unbroadcast(args.grad * args.inputs[0], &sb)),
            ]
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) / self.value(b);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.push(out, &[a, b], move |args| {
            let (x, y) = (args.inputs[0], args.inputs[1]);
            vec![
                args.needs[0].then(|| unbroadcast(args.grad / y, &sa)),
                args.needs[1].then(|| {
                    let g = args.grad * x / &(y * y);
                    unbroadcast(g.mapv(|v| -v), &sb)
                }),
            ]
        })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).mapv(|x| x * c);
        self.push(out, &[a], move |args| vec![Some(args.grad.mapv(|g| g * c))])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).mapv(|x| x + c);
        self.push(out, &[a], |args| vec![Some(args.grad.clone())])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(T::exp);
        self.push(out, &[a], |args| vec![Some(args.grad * args.output)])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(T::ln);
        self.push(out, &[a], |args| vec![Some(args.grad / args.inputs[0])])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, &[a], |args| {
            let two = T::c(2.0);
            let mut g = args.grad.clone();
            Zip::from(&mut g)
                .and(args.inputs[0])
                .for_each(|g, &x| *g = *g * two * x);
            vec![Some(g)]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, &[a], |args| {
            let mut g = args.grad.clone();
            Zip::from(&mut g).and(args.inputs[0]).for_each(|g, &x| {
                if x <= T::zero() {
                    *g = T::zero();
                }
            });
            vec![Some(g)]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, &[a], |args| {
            let mut g = args.grad.clone();
            Zip::from(&mut g)
                .and(args.output)
                .for_each(|g, &y| *g = *g * y * (T::one() - y));
            vec![Some(g)]
        })
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(out, &[a], |args| {
            let mut g = args.grad.clone();
            Zip::from(&mut g).and(args.inputs[0]).for_each(|g, &x| {
                let s = sigmoid(x);
                *g = *g * (s + x * s * (T::one() - s));
            });
            vec![Some(g)]
        })
    }

    /// Clamp into `[lo, hi]`; the gradient is passed through only strictly inside the range.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).mapv(|x| x.max(lo).min(hi));
        self.push(out, &[a], move |args| {
            let mut g = args.grad.clone();
            Zip::from(&mut g).and(args.inputs[0]).for_each(|g, &x| {
                if x < lo || x > hi {
                    *g = T::zero();
                }
            });
            vec![Some(g)]
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        let shape = self.shape(a).to_vec();
        self.push(out, &[a], move |args| {
            let g = args.grad.iter().next().copied().unwrap_or_else(T::zero);
            vec![Some(ArrayD::from_elem(IxDyn(&shape), g))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keep_dim: bool) -> Var {
        let mut out = self.value(a).sum_axis(Axis(axis));
        if keep_dim {
            out = out.insert_axis(Axis(axis));
        }
        let shape = self.shape(a).to_vec();
        self.push(out, &[a], move |args| {
            let mut g = args.grad.clone();
            if !keep_dim {
                g = g.insert_axis(Axis(axis));
            }
            let g = g
                .broadcast(IxDyn(&shape))
                .expect("sum_axis broadcast")
                .to_owned();
            vec![Some(g)]
        })
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keep_dim: bool) -> Var {
        let n = self.shape(a)[axis].max(1);
        let s = self.sum_axis(a, axis, keep_dim);
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src = self.shape(a).to_vec();
        let out = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count");
        self.push(out, &[a], move |args| {
            let g = args
                .grad
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(&src))
                .expect("reshape back");
            vec![Some(g)]
        })
    }

    /// Reorder axes; output is stored in standard layout.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let out = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .into_owned();
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.push(out, &[a], move |args| {
            let g = args
                .grad
                .view()
                .permuted_axes(IxDyn(&inv))
                .as_standard_layout()
                .into_owned();
            vec![Some(g)]
        })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        self.push(out, parts, move |args| {
            let mut start = 0;
            sizes
                .iter()
                .zip(&args.needs)
                .map(|(&n, &need)| {
                    let g = need.then(|| {
                        args.grad
                            .slice_axis(Axis(axis), Slice::from(start..start + n))
                            .to_owned()
                    });
                    start += n;
                    g
                })
                .collect()
        })
    }

    /// Contiguous range `start..end` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let out = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        let shape = self.shape(a).to_vec();
        self.push(out, &[a], move |args| {
            let mut g = ArrayD::zeros(IxDyn(&shape));
            g.slice_axis_mut(Axis(axis), Slice::from(start..end))
                .assign(args.grad);
            vec![Some(g)]
        })
    }

    /// Gather sub-arrays along `axis`; repeated indices accumulate in the gradient.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Var {
        let out = self.value(a).select(Axis(axis), indices);
        let shape = self.shape(a).to_vec();
        let idx = indices.to_vec();
        self.push(out, &[a], move |args| {
            let mut g = ArrayD::<T>::zeros(IxDyn(&shape));
            for (j, &src) in idx.iter().enumerate() {
                let mut dst = g.index_axis_mut(Axis(axis), src);
                dst += &args.grad.index_axis(Axis(axis), j);
            }
            vec![Some(g)]
        })
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = mm(view2(self.value(a)), view2(self.value(b))).into_dyn();
        self.push(out, &[a, b], |args| {
            let g = view2(args.grad);
            let (x, y) = (view2(args.inputs[0]), view2(args.inputs[1]));
            vec![
                args.needs[0].then(|| mm(g, y.t()).into_dyn()),
                args.needs[1].then(|| mm(x.t(), g).into_dyn()),
            ]
        })
    }

    /// Batched `[n, m, k] x [n, k, p]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let x = self
            .value(a)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm lhs rank 3");
        let y = self
            .value(b)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm rhs rank 3");
        let (n, m, _) = x.dim();
        let p = y.dim().2;
        let mut out = ndarray::Array3::<T>::zeros((n, m, p));
        for i in 0..n {
            out.index_axis_mut(Axis(0), i)
                .assign(&mm(x.index_axis(Axis(0), i), y.index_axis(Axis(0), i)));
        }
        self.push(out.into_dyn(), &[a, b], |args| {
            let g = args
                .grad
                .view()
                .into_dimensionality::<Ix3>()
                .expect("rank 3");
            let x = args.inputs[0]
                .view()
                .into_dimensionality::<Ix3>()
                .expect("rank 3");
            let y = args.inputs[1]
                .view()
                .into_dimensionality::<Ix3>()
                .expect("rank 3");
            let n = g.dim().0;
            let ga = args.needs[0].then(|| {
                let mut ga = ndarray::Array3::<T>::zeros(x.raw_dim());
                for i in 0..n {
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&mm(g.index_axis(Axis(0), i), y.index_axis(Axis(0), i).t()));
                }
                ga.into_dyn()
            });
            let gb = args.needs[1].then(|| {
                let mut gb = ndarray::Array3::<T>::zeros(y.raw_dim());
                for i in 0..n {
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&mm(x.index_axis(Axis(0), i).t(), g.index_axis(Axis(0), i)));
                }
                gb.into_dyn()
            });
            vec![ga, gb]
        })
    }

    /// Affine map over the last axis: `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let shape = self.shape(x).to_vec();
        let d_in = *shape.last().expect("linear input rank >= 1");
        let d_out = self.shape(w)[1];
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, d_in]);
        let mut y = self.matmul(flat, w);
        if let Some(b) = b {
            y = self.add(y, b);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = d_out;
        self.reshape(y, &out_shape)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let mut out = self.value(a).as_standard_layout().into_owned();
        let d = *out.shape().last().expect("softmax rank >= 1");
        for row in out.as_slice_mut().expect("standard layout").chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        self.push(out, &[a], move |args| {
            let y = args.output.as_slice().expect("standard layout");
            let g = args.grad.as_standard_layout();
            let g = g.as_slice().expect("standard layout");
            let mut dx = vec![T::zero(); y.len()];
            for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((o, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(
                ArrayD::from_shape_vec(args.output.raw_dim(), dx).expect("shape"),
            )]
        })
    }

    /// Gated linear unit along `axis`: first half times sigmoid of the second half.
    pub fn glu(&mut self, a: Var, axis: usize) -> Var {
        let n = self.shape(a)[axis];
        assert!(n % 2 == 0, "glu needs an even axis");
        let lhs = self.narrow(a, axis, 0, n / 2);
        let rhs = self.narrow(a, axis, n / 2, n);
        let gate = self.sigmoid(rhs);
        self.mul(lhs, gate)
    }

    /// Inverted dropout with a caller-supplied RNG; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = T::c(1.0 / (1.0 - p));
        let mask = ArrayD::from_shape_simple_fn(self.value(a).raw_dim(), || {
            if rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Average over non-overlapping windows of `factor` along `axis`.
    pub fn mean_pool_axis(&mut self, a: Var, axis: usize, factor: usize) -> Var {
        let shape = self.shape(a).to_vec();
        assert!(
            shape[axis] % factor == 0,
            "pool factor must divide the axis"
        );
        let mut split = shape.clone();
        split[axis] = shape[axis] / factor;
        split.insert(axis + 1, factor);
        let r = self.reshape(a, &split);
        self.mean_axis(r, axis + 1, false)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn view2<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 array")
}

pub(crate) fn mm<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    a.dot(&b)
}
