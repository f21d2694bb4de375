use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{ConvSpec, ParamId, ParamStore, Tape, Var};
use super::tensor::{Real, Tensor};

/// 2-D convolution with square kernel and optional bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    /// He-normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let data: Vec<f64> = (0..cout * cin * kernel * kernel).map(|_| normal.sample(rng)).collect();
        let w = store.add(format!("{name}.w"), Tensor::from_f64(&[cout, cin, kernel, kernel], &data));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[cout])));
        Self {
            w,
            b,
            spec: ConvSpec {
                stride,
                pad: kernel / 2,
            },
        }
    }

    /// Same as `new` but with an explicit padding (used by the condition stem).
    #[allow(clippy::too_many_arguments)]
    pub fn with_pad<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let mut c = Self::new(store, name, cin, cout, kernel, stride, true, rng);
        c.spec.pad = pad;
        c
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.spec)
    }

    pub fn out_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.w).shape()[0]
    }

    pub fn in_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.w).shape()[1]
    }

    /// Sets weights and bias to zero.
    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.w).data_mut().fill(T::zero());
        if let Some(b) = self.b {
            store.get_mut(b).data_mut().fill(T::zero());
        }
    }

    /// Scales the initial weights; used to start residual branches small.
    pub fn scale_weights<T: Real>(&self, store: &mut ParamStore<T>, s: f64) {
        let s = T::from_f64_lossy(s);
        for v in store.get_mut(self.w).data_mut() {
            *v *= s;
        }
    }
}

/// Applies a conv to a `d x n` token matrix by viewing it as a `d x n x 1` map.
pub fn conv_tokens<T: Real>(tape: &mut Tape<'_, T>, conv: &Conv, x: Var) -> Var {
    let s = tape.shape(x).to_vec();
    let m = tape.reshape(x, &[s[0], s[1], 1]);
    let y = conv.forward(tape, m);
    let c = tape.shape(y)[0];
    tape.reshape(y, &[c, s[1]])
}
