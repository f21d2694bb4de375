//! Miniature two-branch backbone and the conditional top-down network built on it.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::Coam;
use super::layers::Conv;
use super::prenet::PreNet;
use super::tape::{ParamStore, Tape, Var};
use super::tensor::Real;
use super::tokens::{TokenEncoder, CONDITION_TOKEN_DIM};
use crate::error::{Error, Result};

pub const NUM_STAGES: usize = 4;
pub const DEFAULT_INSERT_STAGE: usize = 2;
/// Heatmap cells per input pixel along each axis.
pub const OUTPUT_STRIDE: usize = 4;
/// Channel widths of the high- and low-resolution branches.
pub const WIDTHS: [usize; 2] = [16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Coam,
    Prenet,
    Tokens,
    /// No condition input: the unconditioned top-down baseline.
    Plain,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::Coam => "coam",
            Arch::Prenet => "prenet",
            Arch::Tokens => "tokens",
            Arch::Plain => "plain",
        }
    }

    pub fn uses_condition(&self) -> bool {
        !matches!(self, Arch::Plain)
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coam" => Ok(Arch::Coam),
            "prenet" => Ok(Arch::Prenet),
            "tokens" => Ok(Arch::Tokens),
            "plain" => Ok(Arch::Plain),
            _ => Err(format!("unknown arch `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Fusion {
    block1: Conv,
    block2: Conv,
    up: Conv,
    down: Conv,
}

/// Stem-less backbone: stage 1 runs on the high-resolution branch only,
/// stage 2 opens the low-resolution branch, stages 2 to 4 exchange
/// information between the branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    stage1: Conv,
    transition: Conv,
    fused: Vec<Fusion>,
}

fn residual<T: Real>(tape: &mut Tape<'_, T>, conv: &Conv, x: Var) -> Var {
    let y = conv.forward(tape, x);
    let y = tape.relu(y);
    tape.add(y, x)
}

impl Backbone {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Self {
        let [w1, w2] = WIDTHS;
        let stage1 = Conv::new(store, &format!("{name}.s1.block"), w1, w1, 3, 1, true, rng);
        stage1.scale_weights(store, 0.5);
        let transition = Conv::new(store, &format!("{name}.s2.trans"), w1, w2, 3, 2, true, rng);
        let fused = (2..=NUM_STAGES)
            .map(|s| {
                let f = Fusion {
                    block1: Conv::new(store, &format!("{name}.s{s}.block1"), w1, w1, 3, 1, true, rng),
                    block2: Conv::new(store, &format!("{name}.s{s}.block2"), w2, w2, 3, 1, true, rng),
                    up: Conv::new(store, &format!("{name}.s{s}.up"), w2, w1, 1, 1, true, rng),
                    down: Conv::new(store, &format!("{name}.s{s}.down"), w1, w2, 3, 2, true, rng),
                };
                for c in [&f.block1, &f.block2, &f.up, &f.down] {
                    c.scale_weights(store, 0.5);
                }
                f
            })
            .collect();
        Self {
            stage1,
            transition,
            fused,
        }
    }

    /// Runs all stages on a stem output. `after_stage(s, branches)` may rewrite
    /// the branch features after stage `s`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        mut after_stage: impl FnMut(&mut Tape<'_, T>, usize, &mut Vec<Var>) -> Result<()>,
    ) -> Result<Var> {
        let b1 = residual(tape, &self.stage1, x);
        let mut branches = vec![b1];
        after_stage(tape, 1, &mut branches)?;
        let t = self.transition.forward(tape, branches[0]);
        let t = tape.relu(t);
        branches.push(t);
        for (i, f) in self.fused.iter().enumerate() {
            let b1 = residual(tape, &f.block1, branches[0]);
            let b2 = residual(tape, &f.block2, branches[1]);
            let up = f.up.forward(tape, b2);
            let up = tape.upsample(up, 2);
            let n1 = tape.add(b1, up);
            let n1 = tape.relu(n1);
            let down = f.down.forward(tape, b1);
            let n2 = tape.add(b2, down);
            let n2 = tape.relu(n2);
            branches = vec![n1, n2];
            after_stage(tape, i + 2, &mut branches)?;
        }
        Ok(branches[0])
    }
}

/// Two stride-2 3x3 convolutions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stem {
    conv1: Conv,
    conv2: Conv,
}

impl Stem {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, rng: &mut R) -> Self {
        let w = WIDTHS[0];
        Self {
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, w, 3, 2, true, rng),
            conv2: Conv::new(store, &format!("{name}.conv2"), w, w, 3, 2, true, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let y = self.conv1.forward(tape, x);
        let y = tape.relu(y);
        let y = self.conv2.forward(tape, y);
        tape.relu(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtdSpec {
    pub arch: Arch,
    pub insert_stage: usize,
    pub num_keypoints: usize,
    pub image_channels: usize,
    pub cond_channels: usize,
}

impl CtdSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=NUM_STAGES).contains(&self.insert_stage) {
            return Err(Error::Config(format!(
                "insert_stage must be in 1..={NUM_STAGES}, got {}",
                self.insert_stage
            )));
        }
        if self.num_keypoints == 0 || self.image_channels == 0 {
            return Err(Error::Config("network needs keypoints and image channels".into()));
        }
        if self.arch.uses_condition() && self.cond_channels == 0 {
            return Err(Error::Config("conditioned arch needs condition channels".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Conditioning {
    None,
    Coam(Vec<Coam>),
    Prenet(PreNet),
    Tokens { embed: Conv, encoder: TokenEncoder },
}

/// Conditional top-down network: crop plus condition in, `K` heatmaps at stride 4 out.
#[derive(Debug, Clone, PartialEq)]
pub struct CtdNet {
    pub spec: CtdSpec,
    stem: Option<Stem>,
    backbone: Backbone,
    conditioning: Conditioning,
    head: Conv,
}

impl CtdNet {
    pub fn new<T: Real, R: Rng>(spec: CtdSpec, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let cc = spec.cond_channels;
        let (stem, pre) = match spec.arch {
            Arch::Prenet => (None, Some(PreNet::new(store, "prenet", spec.image_channels, cc, WIDTHS[0], rng))),
            _ => (Some(Stem::new(store, "stem", spec.image_channels, rng)), None),
        };
        let backbone = Backbone::new(store, "backbone", rng);
        let conditioning = match spec.arch {
            Arch::Plain => Conditioning::None,
            Arch::Prenet => Conditioning::Prenet(pre.expect("built above")),
            Arch::Coam => {
                let branches = if spec.insert_stage == 1 { 1 } else { 2 };
                Conditioning::Coam(
                    (0..branches)
                        .map(|b| {
                            let m = Coam::new(store, &format!("coam.b{}", b + 1), WIDTHS[b], cc, rng);
                            m.position.out.scale_weights(store, 0.25);
                            m.channel.out.scale_weights(store, 0.25);
                            m
                        })
                        .collect(),
                )
            }
            Arch::Tokens => Conditioning::Tokens {
                embed: Conv::new(store, "tokens.embed", WIDTHS[0], CONDITION_TOKEN_DIM, 1, 1, true, rng),
                encoder: TokenEncoder::new(store, "tokens.enc", CONDITION_TOKEN_DIM, cc, rng),
            },
        };
        let head_in = match spec.arch {
            Arch::Tokens => CONDITION_TOKEN_DIM,
            _ => WIDTHS[0],
        };
        let head = Conv::new(store, "head", head_in, spec.num_keypoints, 1, 1, true, rng);
        head.scale_weights(store, 0.1);
        Ok(Self {
            spec,
            stem,
            backbone,
            conditioning,
            head,
        })
    }

    /// Returns the `K x S/4 x S/4` heatmap logits for one crop.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, image: Var, cond: Option<Var>) -> Result<Var> {
        let is = tape.shape(image).to_vec();
        if is.len() != 3 || is[0] != self.spec.image_channels || is[1] % 8 != 0 || is[2] % 8 != 0 {
            return Err(Error::shape(&is, &[self.spec.image_channels, 8, 8], "crop image (sides divisible by 8)"));
        }
        let cond = match (self.spec.arch.uses_condition(), cond) {
            (true, Some(c)) => {
                let cs = tape.shape(c).to_vec();
                if cs.len() != 3 || cs[0] != self.spec.cond_channels || cs[1..] != is[1..] {
                    return Err(Error::shape(&is, &cs, "crop image vs condition"));
                }
                Some(c)
            }
            (true, None) => return Err(Error::Config(format!("arch {} needs a condition", self.spec.arch.name()))),
            (false, _) => None,
        };

        let x = match (&self.conditioning, &self.stem) {
            (Conditioning::Prenet(p), _) => {
                let f = p.forward(tape, image, cond.expect("checked"))?;
                tape.relu(f)
            }
            (_, Some(stem)) => stem.forward(tape, image),
            _ => unreachable!("stem exists for every non-prenet arch"),
        };

        let insert = self.spec.insert_stage;
        let b1 = match &self.conditioning {
            Conditioning::Coam(modules) => {
                let cond = cond.expect("checked");
                self.backbone.forward(tape, x, |tape, stage, branches| {
                    if stage != insert {
                        return Ok(());
                    }
                    for (b, m) in modules.iter().enumerate() {
                        let pooled = tape.avg_pool(cond, OUTPUT_STRIDE << b);
                        branches[b] = m.forward(tape, branches[b], pooled)?;
                    }
                    Ok(())
                })?
            }
            _ => self.backbone.forward(tape, x, |_, _, _| Ok(()))?,
        };

        let feat = match &self.conditioning {
            Conditioning::Tokens { embed, encoder } => {
                let s = tape.shape(b1).to_vec();
                let grid = (s[1], s[2]);
                let t = embed.forward(tape, b1);
                let t = tape.reshape(t, &[CONDITION_TOKEN_DIM, grid.0 * grid.1]);
                let pooled = tape.avg_pool(cond.expect("checked"), OUTPUT_STRIDE);
                let seq = encoder.condition_tokens(tape, pooled, t, grid)?;
                let out = encoder.encode(tape, seq, grid);
                tape.reshape(out, &[CONDITION_TOKEN_DIM, grid.0, grid.1])
            }
            _ => b1,
        };
        Ok(self.head.forward(tape, feat))
    }
}

/// Bottom-up network: full scene in, `K` keypoint heatmaps, one center heatmap
/// and `2K` center-to-keypoint offsets (in heatmap cells) out, all at stride 4.
#[derive(Debug, Clone, PartialEq)]
pub struct BuNet {
    pub num_keypoints: usize,
    stem: Stem,
    backbone: Backbone,
    head: Conv,
}

impl BuNet {
    pub fn new<T: Real, R: Rng>(num_keypoints: usize, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let stem = Stem::new(store, "stem", 3, rng);
        let backbone = Backbone::new(store, "backbone", rng);
        let head = Conv::new(store, "head", WIDTHS[0], 3 * num_keypoints + 1, 1, 1, true, rng);
        head.scale_weights(store, 0.1);
        Self {
            num_keypoints,
            stem,
            backbone,
            head,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, image: Var) -> Result<Var> {
        let is = tape.shape(image).to_vec();
        if is.len() != 3 || is[0] != 3 || is[1] % 8 != 0 || is[2] % 8 != 0 {
            return Err(Error::shape(&is, &[3, 8, 8], "scene image (sides divisible by 8)"));
        }
        let x = self.stem.forward(tape, image);
        let b1 = self.backbone.forward(tape, x, |_, _, _| Ok(()))?;
        Ok(self.head.forward(tape, b1))
    }
}
