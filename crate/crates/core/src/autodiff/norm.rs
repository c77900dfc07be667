//! Fused normalization kernels.

use super::{Tape, Var};
use crate::scalar::Scalar;
use ndarray::{Array1, ArrayD, Axis, IxDyn, Zip};

/// Batch statistics produced by a training-mode batch-norm pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Array1<T>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var_unbiased: Array1<T>,
}

impl<T: Scalar> Tape<T> {
    /// Training-mode batch normalization over every axis except `channel_axis`.
    ///
    /// `gamma` and `beta` have shape `[c]`. Returns the normalized output and
    /// the batch statistics for the caller to fold into running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        channel_axis: usize,
        eps: f64,
    ) -> (Var, BatchStats<T>) {
        let xv = self.value(x).clone();
        let c = xv.shape()[channel_axis];
        let count = xv.len() / c.max(1);
        let cnt = T::from_usize_lossy(count);
        let eps = T::c(eps);
        let mut mean = Array1::<T>::zeros(c);
        let mut var = Array1::<T>::zeros(c);
        for (ci, lane) in xv.axis_iter(Axis(channel_axis)).enumerate() {
            let m = lane.sum() / cnt;
            let v = lane.fold(T::zero(), |acc, &x| acc + (x - m) * (x - m)) / cnt;
            mean[ci] = m;
            var[ci] = v;
        }
        let inv_std: Array1<T> = var.mapv(|v| T::one() / (v + eps).sqrt());
        let bshape: Vec<usize> = (0..xv.ndim())
            .map(|i| if i == channel_axis { c } else { 1 })
            .collect();
        let rs = |a: &Array1<T>| {
            a.clone()
                .into_shape_with_order(IxDyn(&bshape))
                .expect("bshape")
        };
        let xhat = (&xv - &rs(&mean)) * &rs(&inv_std);
        let gamma_v = self
            .value(gamma)
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("gamma rank 1");
        let beta_v = self
            .value(beta)
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("beta rank 1");
        let out = &xhat * &rs(&gamma_v) + &rs(&beta_v);
        let stats = BatchStats {
            mean: mean.clone(),
            var_unbiased: if count > 1 {
                var.mapv(|v| v * cnt / T::from_usize_lossy(count - 1))
            } else {
                var.clone()
            },
        };
        let y = self.push(out, &[x, gamma, beta], move |args| {
            let g = args.grad;
            let gamma = args.inputs[1].as_standard_layout();
            let gamma = gamma.as_slice().expect("gamma contiguous");
            let mut dgamma = Array1::<T>::zeros(c);
            let mut dbeta = Array1::<T>::zeros(c);
            let mut sum_dxhat = Array1::<T>::zeros(c);
            let mut sum_dxhat_xhat = Array1::<T>::zeros(c);
            for ci in 0..c {
                let gl = g.index_axis(Axis(channel_axis), ci);
                let xl = xhat.index_axis(Axis(channel_axis), ci);
                let mut sg = T::zero();
                let mut sgx = T::zero();
                Zip::from(&gl).and(&xl).for_each(|&gv, &xh| {
                    sg = sg + gv;
                    sgx = sgx + gv * xh;
                });
                dbeta[ci] = sg;
                dgamma[ci] = sgx;
                sum_dxhat[ci] = sg * gamma[ci];
                sum_dxhat_xhat[ci] = sgx * gamma[ci];
            }
            let dx = args.needs[0].then(|| {
                let mut dx = ArrayD::<T>::zeros(g.raw_dim());
                for ci in 0..c {
                    let k = inv_std[ci] / cnt;
                    let (s1, s2, gm) = (sum_dxhat[ci], sum_dxhat_xhat[ci], gamma[ci]);
                    Zip::from(dx.index_axis_mut(Axis(channel_axis), ci))
                        .and(g.index_axis(Axis(channel_axis), ci))
                        .and(xhat.index_axis(Axis(channel_axis), ci))
                        .for_each(|d, &gv, &xh| {
                            *d = k * (cnt * gm * gv - s1 - xh * s2);
                        });
                }
                dx
            });
            vec![
                dx,
                args.needs[1].then(|| dgamma.into_dyn()),
                args.needs[2].then(|| dbeta.into_dyn()),
            ]
        });
        (y, stats)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of shape `[d]`.
    pub fn layer_norm_last(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x).as_standard_layout().into_owned();
        let d = *xv.shape().last().expect("rank >= 1");
        let dn = T::from_usize_lossy(d);
        let eps = T::c(eps);
        let gam = self.value(gamma).as_standard_layout().into_owned();
        let bet = self.value(beta).as_standard_layout().into_owned();
        let (gs, bs) = (
            gam.as_slice().expect("c").to_vec(),
            bet.as_slice().expect("c").to_vec(),
        );
        let src = xv.as_slice().expect("c");
        let rows = src.len() / d.max(1);
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let m = row.iter().copied().sum::<T>() / dn;
            let v = row.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / dn;
            let is = T::one() / (v + eps).sqrt();
            inv[r] = is;
            for j in 0..d {
                let xh = (row[j] - m) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gs[j] + bs[j];
            }
        }
        let shape = xv.shape().to_vec();
        let out = ArrayD::from_shape_vec(IxDyn(&shape), out).expect("ln out");
        self.push(out, &[x, gamma, beta], move |args| {
            let g = args.grad.as_standard_layout();
            let gsl = g.as_slice().expect("c");
            let mut dx = vec![T::zero(); gsl.len()];
            let mut dg = vec![T::zero(); d];
            let mut db = vec![T::zero(); d];
            for r in 0..rows {
                let gr = &gsl[r * d..(r + 1) * d];
                let xr = &xhat[r * d..(r + 1) * d];
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for j in 0..d {
                    let dxh = gr[j] * gs[j];
                    s1 = s1 + dxh;
                    s2 = s2 + dxh * xr[j];
                    dg[j] = dg[j] + gr[j] * xr[j];
                    db[j] = db[j] + gr[j];
                }
                let k = inv[r] / dn;
                for j in 0..d {
                    let dxh = gr[j] * gs[j];
                    dx[r * d + j] = k * (dn * dxh - s1 - xr[j] * s2);
                }
            }
            vec![
                args.needs[0].then(|| ArrayD::from_shape_vec(IxDyn(&shape), dx).expect("dx")),
                args.needs[1].then(|| ArrayD::from_shape_vec(IxDyn(&[d]), dg).expect("dg")),
                args.needs[2].then(|| ArrayD::from_shape_vec(IxDyn(&[d]), db).expect("db")),
            ]
        })
    }
}
