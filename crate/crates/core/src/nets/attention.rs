//! Conditional attention: the condition supplies the queries, image features
//! the keys and values.
//!
//! Orientation: for the position map, row `j` is a feature position and column
//! `i` a condition position, `s_ji = softmax_i(Q_i . K_j)` and `P_j = sum_i s_ji V_i`.
//! The channel map uses the same reading over channels:
//! `x_ji = softmax_i(C_i . F_j)` and `E_j = sum_i x_ji F_i`.
//! Every row of both maps therefore sums to one.

use rand::Rng;

use super::layers::Conv;
use super::tape::{ParamStore, Tape, Var};
use super::tensor::Real;
use crate::error::{Error, Result};

/// Intermediate values of one attention pass, as plain row-major arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub channels: usize,
    pub positions: usize,
    /// `C x N`
    pub q: Vec<f64>,
    /// `C x N`
    pub k: Vec<f64>,
    /// `C x N`
    pub v: Vec<f64>,
    /// `N x N`, rows sum to one.
    pub s: Vec<f64>,
    /// `C x C`, rows sum to one.
    pub x_ch: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct PositionTrace {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub s: Var,
    pub p: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ChannelTrace {
    pub x: Var,
    pub e: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionAttention {
    pub feat_conv: Conv,
    pub cond_conv: Conv,
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub out: Conv,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelAttention {
    pub cond_conv: Conv,
    pub out: Conv,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coam {
    pub position: PositionAttention,
    pub channel: ChannelAttention,
}

fn check_shapes(f: &[usize], c: &[usize], channels: usize, cond_channels: usize) -> Result<()> {
    if f.len() != 3 || c.len() != 3 || f[1..] != c[1..] || f[0] != channels || c[0] != cond_channels {
        return Err(Error::shape(f, c, "attention feature vs condition"));
    }
    Ok(())
}

impl PositionAttention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cond_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            feat_conv: Conv::new(store, &format!("{name}.feat"), channels, channels, 3, 1, true, rng),
            cond_conv: Conv::new(store, &format!("{name}.cond"), cond_channels, cond_channels, 3, 1, true, rng),
            query: Conv::new(store, &format!("{name}.q"), cond_channels, channels, 1, 1, true, rng),
            key: Conv::new(store, &format!("{name}.k"), channels, channels, 1, 1, true, rng),
            value: Conv::new(store, &format!("{name}.v"), channels, channels, 1, 1, true, rng),
            out: Conv::new(store, &format!("{name}.out"), channels, channels, 1, 1, true, rng),
        }
    }

    pub fn forward_traced<T: Real>(&self, tape: &mut Tape<'_, T>, feat: Var, cond: Var) -> Result<(Var, PositionTrace)> {
        let c = self.out.out_channels(tape.store());
        let cc = self.cond_conv.in_channels(tape.store());
        check_shapes(tape.shape(feat), tape.shape(cond), c, cc)?;
        let (h, w) = (tape.shape(feat)[1], tape.shape(feat)[2]);
        let n = h * w;

        let fp = self.feat_conv.forward(tape, feat);
        let k = self.key.forward(tape, fp);
        let k = tape.reshape(k, &[c, n]);
        let v = self.value.forward(tape, fp);
        let v = tape.reshape(v, &[c, n]);
        let cp = self.cond_conv.forward(tape, cond);
        let q = self.query.forward(tape, cp);
        let q = tape.reshape(q, &[c, n]);

        // logits[j][i] = K_j . Q_i
        let logits = tape.matmul(k, q, true, false);
        let s = tape.softmax_rows(logits);
        // P[:, j] = sum_i s_ji V[:, i]
        let p = tape.matmul(v, s, false, true);
        let p = tape.reshape(p, &[c, h, w]);
        let out = self.out.forward(tape, p);
        Ok((out, PositionTrace { q, k, v, s, p }))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, feat: Var, cond: Var) -> Result<Var> {
        self.forward_traced(tape, feat, cond).map(|(o, _)| o)
    }
}

impl ChannelAttention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cond_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            cond_conv: Conv::new(store, &format!("{name}.cond"), cond_channels, channels, 3, 1, true, rng),
            out: Conv::new(store, &format!("{name}.out"), channels, channels, 1, 1, true, rng),
        }
    }

    pub fn forward_traced<T: Real>(&self, tape: &mut Tape<'_, T>, feat: Var, cond: Var) -> Result<(Var, ChannelTrace)> {
        let c = self.out.out_channels(tape.store());
        let cc = self.cond_conv.in_channels(tape.store());
        check_shapes(tape.shape(feat), tape.shape(cond), c, cc)?;
        let (h, w) = (tape.shape(feat)[1], tape.shape(feat)[2]);
        let n = h * w;

        let f = tape.reshape(feat, &[c, n]);
        let cp = self.cond_conv.forward(tape, cond);
        let cp = tape.reshape(cp, &[c, n]);
        // logits[j][i] = F_j . C_i
        let logits = tape.matmul(f, cp, false, true);
        let x = tape.softmax_rows(logits);
        // E_j = sum_i x_ji F_i
        let e = tape.matmul(x, f, false, false);
        let e = tape.reshape(e, &[c, h, w]);
        let out = self.out.forward(tape, e);
        Ok((out, ChannelTrace { x, e }))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, feat: Var, cond: Var) -> Result<Var> {
        self.forward_traced(tape, feat, cond).map(|(o, _)| o)
    }
}

impl Coam {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cond_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            position: PositionAttention::new(store, &format!("{name}.pos"), channels, cond_channels, rng),
            channel: ChannelAttention::new(store, &format!("{name}.ch"), channels, cond_channels, rng),
        }
    }

    /// `M = F + P + E` where `P` and `E` are the projected submodule outputs.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, feat: Var, cond: Var) -> Result<Var> {
        self.forward_traced(tape, feat, cond).map(|(m, _)| m)
    }

    pub fn forward_traced<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        feat: Var,
        cond: Var,
    ) -> Result<(Var, AttentionState)> {
        let (p, pt) = self.position.forward_traced(tape, feat, cond)?;
        let (e, ct) = self.channel.forward_traced(tape, feat, cond)?;
        let pe = tape.add(p, e);
        let m = tape.add(feat, pe);
        let to64 = |t: &Tape<'_, T>, v: Var| t.value(v).to_f64_vec();
        let state = AttentionState {
            channels: tape.shape(pt.q)[0],
            positions: tape.shape(pt.q)[1],
            q: to64(tape, pt.q),
            k: to64(tape, pt.k),
            v: to64(tape, pt.v),
            s: to64(tape, pt.s),
            x_ch: to64(tape, ct.x),
        };
        Ok((m, state))
    }

    /// Zeroes both output projections, which turns the module into the identity.
    pub fn zero_outputs<T: Real>(&self, store: &mut ParamStore<T>) {
        self.position.out.zero(store);
        self.channel.out.zero(store);
    }
}
