use rand::Rng;

use super::layers::Conv;
use super::tape::{ParamStore, Tape, Var};
use super::tensor::Real;
use crate::error::{Error, Result};

/// Early fusion: two 7x7 convs on the image, one on the condition, summed.
///
/// Both branches reduce resolution by four, so the fused map can replace the
/// backbone stem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreNet {
    pub image1: Conv,
    pub image2: Conv,
    pub cond: Conv,
}

impl PreNet {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        image_channels: usize,
        cond_channels: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            image1: Conv::new(store, &format!("{name}.img1"), image_channels, width, 7, 2, true, rng),
            image2: Conv::new(store, &format!("{name}.img2"), width, width, 7, 2, true, rng),
            cond: Conv::with_pad(store, &format!("{name}.cond"), cond_channels, width, 7, 4, 3, rng),
        }
    }

    pub fn image_branch<T: Real>(&self, tape: &mut Tape<'_, T>, image: Var) -> Var {
        let x = self.image1.forward(tape, image);
        let x = tape.relu(x);
        self.image2.forward(tape, x)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, image: Var, cond: Var) -> Result<Var> {
        let (is, cs) = (tape.shape(image).to_vec(), tape.shape(cond).to_vec());
        let ic = self.image1.in_channels(tape.store());
        let cc = self.cond.in_channels(tape.store());
        if is.len() != 3 || cs.len() != 3 || is[1..] != cs[1..] || is[0] != ic || cs[0] != cc {
            return Err(Error::shape(&is, &cs, "prenet image vs condition"));
        }
        if is[1] % 4 != 0 || is[2] % 4 != 0 {
            return Err(Error::shape(&is, &[4, 4], "prenet input must be divisible by 4"));
        }
        let img = self.image_branch(tape, image);
        let c = self.cond.forward(tape, cond);
        Ok(tape.add(img, c))
    }
}
