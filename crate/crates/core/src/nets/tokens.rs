//! Condition tokens appended to the image token sequence, followed by one
//! transformer encoder layer.
//!
//! Sequences are stored as `dim x n` matrices (one column per token).

use rand::Rng;

use super::layers::{conv_tokens, Conv};
use super::tape::{ParamStore, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const CONDITION_TOKEN_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Image,
    Condition,
}

/// Plain-array view of a token sequence, `n x dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<f64>,
    pub count: usize,
    pub dim: usize,
    pub provenance: Provenance,
}

impl TokenSequence {
    /// Reads a `dim x n` tape value (optionally a column range) into token rows.
    pub fn from_columns(data: &[f64], dim: usize, cols: usize, start: usize, count: usize, provenance: Provenance) -> Self {
        let mut tokens = Vec::with_capacity(count * dim);
        for t in start..start + count {
            for d in 0..dim {
                tokens.push(data[d * cols + t]);
            }
        }
        Self {
            tokens,
            count,
            dim,
            provenance,
        }
    }
}

/// 2-D sinusoidal encoding: the first half of the channels encodes the row,
/// the second half the column. Returns `dim x (h*w)`.
pub fn positional_encoding(dim: usize, h: usize, w: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim * h * w];
    for y in 0..h {
        for x in 0..w {
            let n = y * w + x;
            for d in 0..dim {
                let (pos, i) = if d < half { (y as f64, d) } else { (x as f64, d - half) };
                let span = half.max(1) as f64;
                let freq = 1.0 / 100f64.powf((i / 2 * 2) as f64 / span);
                out[d * h * w + n] = if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenEncoder {
    pub cond_proj: Conv,
    pub q: Conv,
    pub k: Conv,
    pub v: Conv,
    pub o: Conv,
    pub ff1: Conv,
    pub ff2: Conv,
    pub dim: usize,
}

impl TokenEncoder {
    /// Image and condition tokens share one sequence, so the condition
    /// projection also produces `dim` channels (`CONDITION_TOKEN_DIM` in the models).
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        cond_channels: usize,
        rng: &mut R,
    ) -> Self {
        let e = Self {
            cond_proj: Conv::new(store, &format!("{name}.cond"), cond_channels, dim, 1, 1, true, rng),
            q: Conv::new(store, &format!("{name}.q"), dim, dim, 1, 1, true, rng),
            k: Conv::new(store, &format!("{name}.k"), dim, dim, 1, 1, true, rng),
            v: Conv::new(store, &format!("{name}.v"), dim, dim, 1, 1, true, rng),
            o: Conv::new(store, &format!("{name}.o"), dim, dim, 1, 1, true, rng),
            ff1: Conv::new(store, &format!("{name}.ff1"), dim, 2 * dim, 1, 1, true, rng),
            ff2: Conv::new(store, &format!("{name}.ff2"), 2 * dim, dim, 1, 1, true, rng),
            dim,
        };
        e.o.scale_weights(store, 0.5);
        e.ff2.scale_weights(store, 0.5);
        e
    }

    /// `X (+) Y`: the image tokens (`d x N`) followed by projected condition
    /// tokens. `cond` must be a `Cc x H x W` map on the token grid.
    pub fn condition_tokens<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        cond: Var,
        image_tokens: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let cs = tape.shape(cond).to_vec();
        let ts = tape.shape(image_tokens).to_vec();
        let cc = self.cond_proj.in_channels(tape.store());
        if cs.len() != 3 || cs[0] != cc || cs[1] != grid.0 || cs[2] != grid.1 {
            return Err(Error::shape(&cs, &[cc, grid.0, grid.1], "condition vs token grid"));
        }
        if ts.len() != 2 || ts[1] != grid.0 * grid.1 || ts[0] != self.dim {
            return Err(Error::shape(&ts, &[self.dim, grid.0 * grid.1], "image tokens vs token grid"));
        }
        let y = self.cond_proj.forward(tape, cond);
        let y = tape.reshape(y, &[self.dim, grid.0 * grid.1]);
        Ok(tape.concat_cols(image_tokens, y))
    }

    /// One encoder layer over `seq` (`d x 2N`); returns the updated image tokens (`d x N`).
    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, seq: Var, grid: (usize, usize)) -> Var {
        let (d, m) = (tape.shape(seq)[0], tape.shape(seq)[1]);
        let n = grid.0 * grid.1;
        let pe = positional_encoding(d, grid.0, grid.1);
        let mut pe2 = Vec::with_capacity(d * m);
        for row in pe.chunks(n) {
            for _ in 0..m / n {
                pe2.extend_from_slice(row);
            }
        }
        let pe = tape.constant(Tensor::from_f64(&[d, m], &pe2));
        let x = tape.add(seq, pe);

        let q = conv_tokens(tape, &self.q, x);
        let k = conv_tokens(tape, &self.k, x);
        let v = conv_tokens(tape, &self.v, x);
        let logits = tape.matmul(q, k, true, false);
        let logits = tape.scale(logits, T::from_f64_lossy(1.0 / (d as f64).sqrt()));
        let a = tape.softmax_rows(logits);
        let att = tape.matmul(v, a, false, true);
        let att = conv_tokens(tape, &self.o, att);
        let x = tape.add(x, att);

        let h = conv_tokens(tape, &self.ff1, x);
        let h = tape.relu(h);
        let h = conv_tokens(tape, &self.ff2, h);
        let x = tape.add(x, h);
        tape.slice_cols(x, 0, n)
    }
}
