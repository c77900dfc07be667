//! Convolution and pooling kernels on `[batch, channel, time, freq]` tensors.

use super::ops::mm;
use super::{Tape, Var};
use crate::scalar::Scalar;
use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn n(&self) -> usize {
        self.h * self.w
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }
}

/// Unfold one sample `[cin, h, w]` into `[cin*kh*kw, h*w]` with zero "same" padding.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (h, w, kh, kw) = (g.h, g.w, g.kh, g.kw);
    let (ph, pw) = (kh / 2, kw / 2);
    let n = g.n();
    for c in 0..g.cin {
        let plane = &x[c * n..(c + 1) * n];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((c * kh + ky) * kw + kx) * n..][..n];
                let w_lo = pw.saturating_sub(kx);
                let w_hi = (w + pw).saturating_sub(kx).min(w);
                for oy in 0..h {
                    let dst = &mut row[oy * w..(oy + 1) * w];
                    let iy = oy + ky;
                    if iy < ph || iy - ph >= h || w_lo >= w_hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - ph) * w..(iy - ph + 1) * w];
                    dst[..w_lo].fill(T::zero());
                    dst[w_hi..].fill(T::zero());
                    let shift = w_lo + kx - pw;
                    dst[w_lo..w_hi].copy_from_slice(&src[shift..shift + (w_hi - w_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into a sample gradient.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, w, kh, kw) = (g.h, g.w, g.kh, g.kw);
    let (ph, pw) = (kh / 2, kw / 2);
    let n = g.n();
    for c in 0..g.cin {
        let plane = &mut dx[c * n..(c + 1) * n];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((c * kh + ky) * kw + kx) * n..][..n];
                let w_lo = pw.saturating_sub(kx);
                let w_hi = (w + pw).saturating_sub(kx).min(w);
                if w_lo >= w_hi {
                    continue;
                }
                for oy in 0..h {
                    let iy = oy + ky;
                    if iy < ph || iy - ph >= h {
                        continue;
                    }
                    let shift = w_lo + kx - pw;
                    let dst = &mut plane[(iy - ph) * w + shift..][..w_hi - w_lo];
                    let src = &row[oy * w + w_lo..oy * w + w_hi];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Stride-1 2-D convolution with "same" zero padding (odd kernels).
    ///
    /// `x: [b, cin, h, w]`, `weight: [cout, cin, kh, kw]`, `bias: [cout]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be rank 4");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert!(ws[2] % 2 == 1 && ws[3] % 2 == 1, "conv2d needs odd kernels");
        let geom = ConvGeom {
            cin: ws[1],
            cout: ws[0],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
        };
        let b = xs[0];
        let xv = self.value(x).as_standard_layout().into_owned();
        let wv = self.value(weight).as_standard_layout().into_owned();
        let w2 = ArrayView2::from_shape((geom.cout, geom.k()), wv.as_slice().expect("contiguous"))
            .expect("weight shape");
        let xsl = xv.as_slice().expect("contiguous");
        let (n, k) = (geom.n(), geom.k());
        let mut out = vec![T::zero(); b * geom.cout * n];
        let mut cols = if geom.pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * n]
        };
        for bi in 0..b {
            let xb = &xsl[bi * geom.cin * n..(bi + 1) * geom.cin * n];
            let colv = if geom.pointwise() {
                ArrayView2::from_shape((k, n), xb).expect("cols")
            } else {
                im2col(xb, &geom, &mut cols);
                ArrayView2::from_shape((k, n), &cols[..]).expect("cols")
            };
            let yb = mm(w2, colv);
            out[bi * geom.cout * n..(bi + 1) * geom.cout * n]
                .copy_from_slice(yb.as_slice().expect("contiguous"));
        }
        let out =
            ArrayD::from_shape_vec(IxDyn(&[b, geom.cout, geom.h, geom.w]), out).expect("conv out");
        let y = self.push(out, &[x, weight], move |args| {
            let xv = args.inputs[0].as_standard_layout();
            let xsl = xv.as_slice().expect("contiguous");
            let wv = args.inputs[1].as_standard_layout();
            let w2 = ArrayView2::from_shape((geom.cout, k), wv.as_slice().expect("contiguous"))
                .expect("weight");
            let gv = args.grad.as_standard_layout();
            let gsl = gv.as_slice().expect("contiguous");
            let mut dw = Array2::<T>::zeros((geom.cout, k));
            let mut dx = args.needs[0].then(|| vec![T::zero(); xsl.len()]);
            let mut cols = if geom.pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); k * n]
            };
            for bi in 0..b {
                let gb = ArrayView2::from_shape(
                    (geom.cout, n),
                    &gsl[bi * geom.cout * n..(bi + 1) * geom.cout * n],
                )
                .expect("grad slice");
                let xb = &xsl[bi * geom.cin * n..(bi + 1) * geom.cin * n];
                if args.needs[1] {
                    let colv = if geom.pointwise() {
                        ArrayView2::from_shape((k, n), xb).expect("cols")
                    } else {
                        im2col(xb, &geom, &mut cols);
                        ArrayView2::from_shape((k, n), &cols[..]).expect("cols")
                    };
                    ndarray::linalg::general_mat_mul(T::one(), &gb, &colv.t(), T::one(), &mut dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dcols = mm(w2.t(), gb);
                    let dsl = dcols.as_slice().expect("contiguous");
                    let dxb = &mut dx[bi * geom.cin * n..(bi + 1) * geom.cin * n];
                    if geom.pointwise() {
                        dxb.copy_from_slice(dsl);
                    } else {
                        col2im(dsl, &geom, dxb);
                    }
                }
            }
            vec![
                dx.map(|d| {
                    ArrayD::from_shape_vec(IxDyn(&[b, geom.cin, geom.h, geom.w]), d).expect("dx")
                }),
                args.needs[1].then(|| {
                    dw.into_shape_with_order(IxDyn(&[geom.cout, geom.cin, geom.kh, geom.kw]))
                        .expect("dw")
                }),
            ]
        });
        match bias {
            Some(bv) => {
                let c = geom.cout;
                let bb = self.reshape(bv, &[1, c, 1, 1]);
                self.add(y, bb)
            }
            None => y,
        }
    }

    /// Max pooling with kernel and stride `(1, k)`: only the last axis shrinks.
    pub fn max_pool_last(&mut self, x: Var, k: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let f = *xs.last().expect("rank >= 1");
        assert!(
            k >= 1 && f % k == 0,
            "pool kernel must divide the last axis"
        );
        if k == 1 {
            return x;
        }
        let xv = self.value(x).as_standard_layout().into_owned();
        let src = xv.as_slice().expect("contiguous");
        let fo = f / k;
        let mut out = Vec::with_capacity(src.len() / k);
        let mut arg = Vec::with_capacity(src.len() / k);
        for (ci, chunk) in src.chunks(k).enumerate() {
            let mut best = 0;
            for j in 1..k {
                if chunk[j] > chunk[best] {
                    best = j;
                }
            }
            out.push(chunk[best]);
            arg.push((ci * k + best) as u32);
        }
        let mut os = xs.clone();
        *os.last_mut().expect("non-empty") = fo;
        let out = ArrayD::from_shape_vec(IxDyn(&os), out).expect("pool out");
        self.push(out, &[x], move |args| {
            let g = args.grad.as_standard_layout();
            let gs = g.as_slice().expect("contiguous");
            let mut dx = vec![T::zero(); gs.len() * k];
            for (&a, &gv) in arg.iter().zip(gs) {
                dx[a as usize] = dx[a as usize] + gv;
            }
            vec![Some(
                ArrayD::from_shape_vec(IxDyn(&xs), dx).expect("pool dx"),
            )]
        })
    }

    /// Depthwise 1-D convolution along time with "same" padding.
    ///
    /// `x: [b, t, d]`, `weight: [d, k]` (odd `k`).
    pub fn depthwise_conv1d(&mut self, x: Var, weight: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (b, t, d) = (xs[0], xs[1], xs[2]);
        let k = self.shape(weight)[1];
        assert_eq!(self.shape(weight)[0], d, "depthwise channel mismatch");
        assert!(k % 2 == 1, "depthwise kernel must be odd");
        let p = k / 2;
        let xv = self.value(x).as_standard_layout().into_owned();
        let wv = self.value(weight).as_standard_layout().into_owned();
        let (xsl, wsl) = (xv.as_slice().expect("c"), wv.as_slice().expect("c"));
        let mut out = vec![T::zero(); b * t * d];
        for bi in 0..b {
            for ti in 0..t {
                let orow = &mut out[(bi * t + ti) * d..][..d];
                for j in 0..k {
                    let src_t = ti + j;
                    if src_t < p || src_t - p >= t {
                        continue;
                    }
                    let irow = &xsl[(bi * t + src_t - p) * d..][..d];
                    for c in 0..d {
                        orow[c] = orow[c] + wsl[c * k + j] * irow[c];
                    }
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[b, t, d]), out).expect("dw out");
        self.push(out, &[x, weight], move |args| {
            let xv = args.inputs[0].as_standard_layout();
            let wv = args.inputs[1].as_standard_layout();
            let gv = args.grad.as_standard_layout();
            let (xsl, wsl, gsl) = (
                xv.as_slice().expect("c"),
                wv.as_slice().expect("c"),
                gv.as_slice().expect("c"),
            );
            let mut dx = vec![T::zero(); xsl.len()];
            let mut dw = vec![T::zero(); wsl.len()];
            for bi in 0..b {
                for ti in 0..t {
                    let grow = &gsl[(bi * t + ti) * d..][..d];
                    for j in 0..k {
                        let src_t = ti + j;
                        if src_t < p || src_t - p >= t {
                            continue;
                        }
                        let base = (bi * t + src_t - p) * d;
                        for c in 0..d {
                            dx[base + c] = dx[base + c] + wsl[c * k + j] * grow[c];
                            dw[c * k + j] = dw[c * k + j] + xsl[base + c] * grow[c];
                        }
                    }
                }
            }
            vec![
                args.needs[0].then(|| ArrayD::from_shape_vec(IxDyn(&[b, t, d]), dx).expect("dx")),
                args.needs[1].then(|| ArrayD::from_shape_vec(IxDyn(&[d, k]), dw).expect("dw")),
            ]
        })
    }

    /// Adaptive average pooling of the last two axes to `(oh, ow)` bins.
    ///
    /// Bin `i` covers `floor(i*H/oh) .. ceil((i+1)*H/oh)`, so output sizes larger
    /// than the input repeat elements instead of failing.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let r = xs.len();
        let (h, w) = (xs[r - 2], xs[r - 1]);
        let lead: usize = xs[..r - 2].iter().product();
        let hb = bins(h, oh);
        let wb = bins(w, ow);
        let xv = self.value(x).as_standard_layout().into_owned();
        let src = xv.as_slice().expect("c");
        let mut out = vec![T::zero(); lead * oh * ow];
        for l in 0..lead {
            let plane = &src[l * h * w..(l + 1) * h * w];
            for (i, &(h0, h1)) in hb.iter().enumerate() {
                for (j, &(w0, w1)) in wb.iter().enumerate() {
                    let mut acc = T::zero();
                    for y in h0..h1 {
                        for v in &plane[y * w + w0..y * w + w1] {
                            acc = acc + *v;
                        }
                    }
                    out[(l * oh + i) * ow + j] = acc / T::from_usize_lossy((h1 - h0) * (w1 - w0));
                }
            }
        }
        let mut os = xs.clone();
        os[r - 2] = oh;
        os[r - 1] = ow;
        let out = ArrayD::from_shape_vec(IxDyn(&os), out).expect("pool out");
        self.push(out, &[x], move |args| {
            let g = args.grad.as_standard_layout();
            let gs = g.as_slice().expect("c");
            let mut dx = vec![T::zero(); lead * h * w];
            for l in 0..lead {
                for (i, &(h0, h1)) in hb.iter().enumerate() {
                    for (j, &(w0, w1)) in wb.iter().enumerate() {
                        let share =
                            gs[(l * oh + i) * ow + j] / T::from_usize_lossy((h1 - h0) * (w1 - w0));
                        for y in h0..h1 {
                            for v in &mut dx[l * h * w + y * w + w0..l * h * w + y * w + w1] {
                                *v = *v + share;
                            }
                        }
                    }
                }
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&xs), dx).expect("dx"))]
        })
    }

    /// Nearest-neighbour resize of `axis` to `size` elements.
    pub fn resize_nearest(&mut self, x: Var, axis: usize, size: usize) -> Var {
        let n = self.shape(x)[axis];
        if n == size {
            return x;
        }
        let idx: Vec<usize> = (0..size).map(|i| (i * n) / size).collect();
        self.index_select(x, axis, &idx)
    }
}

fn bins(n: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| {
            let start = (i * n) / out;
            let end = ((i + 1) * n).div_ceil(out);
            (start, end.max(start + 1))
        })
        .collect()
}
