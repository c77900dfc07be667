//! Parameterized layers built on the autodiff tape.

use crate::autodiff::{Tape, Var};
use crate::params::{kaiming_uniform, ones, zeros, ParamId, ParamStore};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization, dropout active.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

/// State threaded through one forward pass of a model.
pub struct Ctx<'s, T> {
    pub tape: Tape<T>,
    pub store: &'s ParamStore<T>,
    pub mode: Mode,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(ParamId, ArrayD<T>)>,
}

impl<'s, T: Scalar> Ctx<'s, T> {
    /// Training context; `seed` drives dropout masks only.
    pub fn train(store: &'s ParamStore<T>, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode: Mode::Train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
        }
    }

    /// Inference context without gradient recording.
    pub fn eval(store: &'s ParamStore<T>) -> Self {
        Self {
            tape: Tape::no_grad(),
            store,
            mode: Mode::Eval,
            rng: ChaCha8Rng::seed_from_u64(0),
            buffer_updates: Vec::new(),
        }
    }

    /// Eval-mode forward that still records gradients (used for gradient checks of frozen statistics).
    pub fn eval_with_grad(store: &'s ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            ..Self::eval(store)
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training() || p <= 0.0 {
            return x;
        }
        self.tape.dropout(x, p, &mut self.rng)
    }

    /// Split into the tape and the pending running-statistic updates.
    pub fn finish(self) -> (Tape<T>, Vec<(ParamId, ArrayD<T>)>) {
        (self.tape, self.buffer_updates)
    }
}

/// Write running-statistic updates collected by [`Ctx::finish`] into the store.
pub fn apply_buffer_updates<T: Scalar>(
    store: &mut ParamStore<T>,
    updates: Vec<(ParamId, ArrayD<T>)>,
) {
    for (id, value) in updates {
        *store.value_mut(id) = value;
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = kaiming_uniform(&[cout, cin, kernel, kernel], fan_in, 2f64.sqrt(), rng);
        let weight = store.trainable(format!("{name}.weight"), w);
        let bias = bias.then(|| store.trainable(format!("{name}.bias"), zeros(&[cout])));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channel_axis: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        channel_axis: usize,
    ) -> Self {
        Self {
            gamma: store.trainable(format!("{name}.gamma"), ones(&[channels])),
            beta: store.trainable(format!("{name}.beta"), zeros(&[channels])),
            running_mean: store.buffer(format!("{name}.running_mean"), zeros(&[channels])),
            running_var: store.buffer(format!("{name}.running_var"), ones(&[channels])),
            channel_axis,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let c = ctx.tape.shape(gamma)[0];
        let ndim = ctx.tape.shape(x).len();
        if ctx.training() {
            let (y, stats) = ctx
                .tape
                .batch_norm_train(x, gamma, beta, self.channel_axis, self.eps);
            let m = T::c(self.momentum);
            let keep = T::one() - m;
            let rm = ctx.store.value(self.running_mean);
            let rv = ctx.store.value(self.running_var);
            let new_mean = rm.mapv(|v| v * keep) + &stats.mean.mapv(|v| v * m).into_dyn();
            let new_var = rv.mapv(|v| v * keep) + &stats.var_unbiased.mapv(|v| v * m).into_dyn();
            ctx.buffer_updates.push((self.running_mean, new_mean));
            ctx.buffer_updates.push((self.running_var, new_var));
            y
        } else {
            let eps = T::c(self.eps);
            let rv = ctx.store.value(self.running_var);
            let inv_std = ctx.tape.constant(rv.mapv(|v| T::one() / (v + eps).sqrt()));
            let mean = ctx
                .tape
                .constant(ctx.store.value(self.running_mean).clone());
            let scale = ctx.tape.mul(gamma, inv_std);
            let ms = ctx.tape.mul(mean, scale);
            let shift = ctx.tape.sub(beta, ms);
            let bshape: Vec<usize> = (0..ndim)
                .map(|i| if i == self.channel_axis { c } else { 1 })
                .collect();
            let scale = ctx.tape.reshape(scale, &bshape);
            let shift = ctx.tape.reshape(shift, &bshape);
            let y = ctx.tape.mul(x, scale);
            ctx.tape.add(y, shift)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = kaiming_uniform(&[d_in, d_out], d_in, 1.0, rng);
        Self {
            weight: store.trainable(format!("{name}.weight"), w),
            bias: store.trainable(format!("{name}.bias"), zeros(&[d_out])),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.trainable(format!("{name}.gamma"), ones(&[d])),
            beta: store.trainable(format!("{name}.beta"), zeros(&[d])),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.tape.layer_norm_last(x, g, b, 1e-5)
    }
}

/// Convenience: an owned scalar array of shape `[]`.
pub fn scalar_array<T: Scalar>(v: T) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(&[]), v)
}
