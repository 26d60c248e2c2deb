//! UNet confidence estimator: five down blocks, five up blocks with skip
//! connections, dropout throughout, and a sigmoid head. Takes the image
//! concatenated with a (detached) prediction map and scores per-pixel
//! uncertainty in (0,1).

use crate::params::{Fwd, ParamSet};
use crate::scalar::Scalar;
use crate::tape::Var;
use rand_chacha::ChaCha8Rng;

const DROP_P: f64 = 0.5;

#[derive(Clone, Copy, Debug)]
pub struct ConfConfig {
    /// Widths of the five UNet levels, finest first.
    pub widths: [usize; 5],
}

impl Default for ConfConfig {
    fn default() -> Self {
        ConfConfig { widths: [8, 16, 32, 32, 32] }
    }
}

impl ConfConfig {
    pub fn tiny() -> Self {
        ConfConfig { widths: [2, 3, 4, 4, 4] }
    }
}

/// Register every β parameter in canonical order.
pub fn init_conf<S: Scalar>(p: &mut ParamSet<S>, rng: &mut ChaCha8Rng, cfg: &ConfConfig) {
    let w = cfg.widths;
    let ins = [4, w[0], w[1], w[2], w[3]];
    for n in 0..5 {
        init_pair(p, rng, &format!("down{}", n + 1), ins[n], w[n]);
    }
    // bottom-most up block: conv pair on C5, no upsampling
    init_pair(p, rng, "up5", w[4], w[4]);
    for n in (1..=4).rev() {
        let below = w[n]; // width of the level beneath this one
        let target = w[n - 1];
        p.add_tconv(rng, &format!("up{n}.t"), below, target, 2);
        init_pair(p, rng, &format!("up{n}"), 2 * target, target);
    }
    p.add_zero_conv("head", 1, w[0], 1);
}

fn init_pair<S: Scalar>(p: &mut ParamSet<S>, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize) {
    p.add_conv(rng, &format!("{name}.a.c"), o, i, 3);
    p.add_bn(&format!("{name}.a.n"), o);
    p.add_conv(rng, &format!("{name}.b.c"), o, o, 3);
    p.add_bn(&format!("{name}.b.n"), o);
}

fn conv_pair<S: Scalar>(fwd: &mut Fwd<S>, name: &str, x: Var) -> Var {
    let a = fwd.cbl(&format!("{name}.a"), x, 1, 1);
    fwd.cbl(&format!("{name}.b"), a, 1, 1)
}

/// Levels 2–5 open with a 2×2 max-pool; all levels end in dropout.
pub fn down_block<S: Scalar>(fwd: &mut Fwd<S>, level: usize, x: Var) -> Var {
    assert!((1..=5).contains(&level), "down_block level must be 1..=5");
    let pooled = if level > 1 { fwd.tape.max_pool2d(x, 2) } else { x };
    let y = conv_pair(fwd, &format!("down{level}"), pooled);
    fwd.dropout(y, DROP_P)
}

/// Transposed-conv upsample of `below`, dropout, concat with the skip,
/// conv pair, dropout.
pub fn up_block<S: Scalar>(fwd: &mut Fwd<S>, level: usize, skip: Var, below: Var) -> Var {
    assert!((1..=4).contains(&level), "up_block level must be 1..=4");
    let up = fwd.tconv(&format!("up{level}.t"), below, 2);
    {
        let (s, u) = (fwd.tape.value(skip), fwd.tape.value(up));
        assert!(
            s.h() == u.h() && s.w() == u.w(),
            "up_block level {level} size mismatch: skip {:?} vs upsampled {:?}",
            s.shape(),
            u.shape()
        );
    }
    let up = fwd.dropout(up, DROP_P);
    let cat = fwd.tape.concat_channels(&[skip, up]);
    let y = conv_pair(fwd, &format!("up{level}"), cat);
    fwd.dropout(y, DROP_P)
}

/// c = g_β(∐(image, prediction)). The prediction must already be detached
/// from whatever tape produced it; here it is an ordinary constant input.
pub fn confidence_forward<S: Scalar>(fwd: &mut Fwd<S>, image: Var, prediction: Var) -> Var {
    let cat = fwd.tape.concat_channels(&[image, prediction]);
    let c1 = down_block(fwd, 1, cat);
    let c2 = down_block(fwd, 2, c1);
    let c3 = down_block(fwd, 3, c2);
    let c4 = down_block(fwd, 4, c3);
    let c5 = down_block(fwd, 5, c4);
    let bottom = conv_pair(fwd, "up5", c5);
    let u5 = fwd.dropout(bottom, DROP_P);
    let u4 = up_block(fwd, 4, c4, u5);
    let u3 = up_block(fwd, 3, c3, u4);
    let u2 = up_block(fwd, 2, c2, u3);
    let u1 = up_block(fwd, 1, c1, u2);
    let logits = fwd.conv("head", u1, 1, 0);
    fwd.tape.sigmoid(logits)
}
