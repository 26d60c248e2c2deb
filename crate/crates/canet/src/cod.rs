//! Camouflaged object detection network: 5-stage conv encoder, progressive
//! fusion modules with residual channel attention, holistic attention over
//! the initial prediction, and two sigmoid heads (initial + refined).
//!
//! Parameter names are dotted paths registered in a fixed order; the
//! refinement branch (`res7`, `res8`, `fmr.*`) is registered even when a
//! run never uses it, so checkpoints from every mode share one layout.

use crate::kernels::gaussian_kernel;
use crate::params::{Fwd, ParamSet};
use crate::scalar::Scalar;
use crate::tape::Var;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct CodConfig {
    /// Encoder stage widths, strides 1..16.
    pub widths: [usize; 5],
    /// Common width inside fusion modules.
    pub fm_width: usize,
}

impl Default for CodConfig {
    fn default() -> Self {
        CodConfig { widths: [16, 32, 64, 64, 64], fm_width: 32 }
    }
}

impl CodConfig {
    /// Miniature variant for gradient checking.
    pub fn tiny() -> Self {
        CodConfig { widths: [2, 3, 4, 4, 4], fm_width: 3 }
    }
}

pub struct CodOut {
    /// ŷ_ini at input resolution, in (0,1).
    pub y_ini: Var,
    /// ŷ_ref at input resolution; equals `y_ini` when refinement is off.
    pub y_ref: Var,
    /// ŷ_ini at F3 resolution (feeds the attention path).
    pub y_ini_coarse: Var,
    /// ŷ_ref at F2 resolution; aliases `y_ini_coarse` when refinement is off.
    pub y_ref_coarse: Var,
    /// Holistic attention map, when the refinement branch ran.
    pub attention: Option<Var>,
}

// ── parameter registration ──────────────────────────────────────────────

fn init_cbl<S: Scalar>(p: &mut ParamSet<S>, rng: &mut ChaCha8Rng, name: &str, o: usize, i: usize) {
    p.add_conv(rng, &format!("{name}.c"), o, i, 3);
    p.add_bn(&format!("{name}.n"), o);
}

fn init_rcab<S: Scalar>(p: &mut ParamSet<S>, rng: &mut ChaCha8Rng, name: &str, c: usize) {
    let hidden = (c / 4).max(1);
    p.add_conv(rng, &format!("{name}.c1"), c, c, 3);
    p.add_conv(rng, &format!("{name}.c2"), c, c, 3);
    p.add_conv(rng, &format!("{name}.g1"), hidden, c, 1);
    p.add_conv(rng, &format!("{name}.g2"), c, hidden, 1);
}

/// Fusion module over features ordered low→high; `chs` are their channel
/// widths, the last being the top feature that seeds the accumulator.
fn init_fm<S: Scalar>(
    p: &mut ParamSet<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    chs: &[usize],
    fm_width: usize,
) {
    let top_ch = *chs.last().unwrap();
    for i in (0..chs.len() - 1).rev() {
        let lv = format!("{name}.lv{i}");
        let acc_ch = if i + 2 == chs.len() { top_ch } else { fm_width };
        p.add_conv(rng, &format!("{lv}.accp"), fm_width, acc_ch, 1);
        p.add_conv(rng, &format!("{lv}.topp"), fm_width, top_ch, 1);
        p.add_conv(rng, &format!("{lv}.featp"), fm_width, chs[i], 1);
        init_cbl(p, rng, &format!("{lv}.fuse"), fm_width, 3 * fm_width);
        init_rcab(p, rng, &format!("{lv}.rcab"), fm_width);
    }
    let head_in = if chs.len() > 1 { fm_width } else { top_ch };
    p.add_zero_conv(&format!("{name}.head"), 1, head_in, 1);
}

fn init_res<S: Scalar>(p: &mut ParamSet<S>, rng: &mut ChaCha8Rng, name: &str, c: usize) {
    init_cbl(p, rng, &format!("{name}.a"), c, c);
    p.add_conv(rng, &format!("{name}.b.c"), c, c, 3);
    p.add_bn(&format!("{name}.b.n"), c);
}

/// Register every θ parameter in canonical order.
pub fn init_cod<S: Scalar>(p: &mut ParamSet<S>, rng: &mut ChaCha8Rng, cfg: &CodConfig) {
    let w = cfg.widths;
    let ins = [3, w[0], w[1], w[2], w[3]];
    for s in 0..5 {
        init_cbl(p, rng, &format!("enc{}.a", s + 1), w[s], ins[s]);
        init_cbl(p, rng, &format!("enc{}.b", s + 1), w[s], w[s]);
    }
    init_fm(p, rng, "fmi", &[w[2], w[3], w[4]], cfg.fm_width);
    init_res(p, rng, "res7", w[2]);
    init_res(p, rng, "res8", w[2]);
    init_fm(p, rng, "fmr", &[w[1], w[2], w[2], w[2]], cfg.fm_width);
}

// ── forward ─────────────────────────────────────────────────────────────

fn resize_to<S: Scalar>(fwd: &mut Fwd<S>, v: Var, h: usize, w: usize) -> Var {
    let t = fwd.tape.value(v);
    if t.h() == h && t.w() == w {
        v
    } else {
        fwd.tape.bilinear_resize(v, h, w)
    }
}

fn enc_stage<S: Scalar>(fwd: &mut Fwd<S>, s: usize, x: Var) -> Var {
    let stride = if s == 0 { 1 } else { 2 };
    let a = fwd.cbl(&format!("enc{}.a", s + 1), x, stride, 1);
    fwd.cbl(&format!("enc{}.b", s + 1), a, 1, 1)
}

pub fn encoder_forward<S: Scalar>(fwd: &mut Fwd<S>, x: Var) -> [Var; 5] {
    let (h, w) = {
        let t = fwd.tape.value(x);
        (t.h(), t.w())
    };
    assert!(
        h % 16 == 0 && w % 16 == 0,
        "encoder input must be divisible by 16, got {h}x{w}"
    );
    let f1 = enc_stage(fwd, 0, x);
    let f2 = enc_stage(fwd, 1, f1);
    let f3 = enc_stage(fwd, 2, f2);
    let f4 = enc_stage(fwd, 3, f3);
    let f5 = enc_stage(fwd, 4, f4);
    [f1, f2, f3, f4, f5]
}

fn rcab<S: Scalar>(fwd: &mut Fwd<S>, name: &str, x: Var) -> Var {
    let c1 = fwd.conv(&format!("{name}.c1"), x, 1, 1);
    let r = fwd.tape.relu(c1);
    let body = fwd.conv(&format!("{name}.c2"), r, 1, 1);
    let pooled = fwd.tape.global_avg_pool(body);
    let g1 = fwd.conv(&format!("{name}.g1"), pooled, 1, 0);
    let g1r = fwd.tape.relu(g1);
    let g2 = fwd.conv(&format!("{name}.g2"), g1r, 1, 0);
    let gate = fwd.tape.sigmoid(g2);
    let scaled = fwd.tape.mul_chan(body, gate);
    fwd.tape.add(x, scaled)
}

/// Progressive fusion: accumulate from the top feature down to the lowest,
/// then project to a 1-channel logit map at the lowest level's resolution.
pub fn fusion_module<S: Scalar>(fwd: &mut Fwd<S>, name: &str, feats: &[Var]) -> Var {
    assert!(!feats.is_empty(), "fusion module needs at least one feature");
    let top = *feats.last().unwrap();
    let mut acc = top;
    for i in (0..feats.len() - 1).rev() {
        let lv = format!("{name}.lv{i}");
        let f = feats[i];
        let (th, tw) = {
            let t = fwd.tape.value(f);
            (t.h(), t.w())
        };
        let up_acc = resize_to(fwd, acc, th, tw);
        let up_top = resize_to(fwd, top, th, tw);
        let pa = fwd.conv(&format!("{lv}.accp"), up_acc, 1, 0);
        let pt = fwd.conv(&format!("{lv}.topp"), up_top, 1, 0);
        let pf = fwd.conv(&format!("{lv}.featp"), f, 1, 0);
        let cat = fwd.tape.concat_channels(&[pa, pt, pf]);
        let fused = fwd.cbl(&format!("{lv}.fuse"), cat, 1, 1);
        acc = rcab(fwd, &format!("{lv}.rcab"), fused);
    }
    fwd.conv(&format!("{name}.head"), acc, 1, 0)
}

/// A = max(gaussian_blur(p), p); F6 = F3 ⊙ A.
pub fn holistic_attention<S: Scalar>(fwd: &mut Fwd<S>, f3: Var, p_coarse: Var) -> (Var, Var) {
    {
        let (a, b) = (fwd.tape.value(f3), fwd.tape.value(p_coarse));
        assert!(
            a.h() == b.h() && a.w() == b.w(),
            "holistic attention spatial mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
    }
    let blur_w = fwd.constant(gaussian_kernel(5, 1.5));
    let blurred = fwd.tape.conv2d(p_coarse, blur_w, None, 1, 2);
    let a = fwd.tape.max_elem(blurred, p_coarse);
    let f6 = fwd.tape.mul_map(f3, a);
    (a, f6)
}

fn res_block<S: Scalar>(fwd: &mut Fwd<S>, name: &str, x: Var) -> Var {
    let a = fwd.cbl(&format!("{name}.a"), x, 1, 1);
    let c = fwd.conv(&format!("{name}.b.c"), a, 1, 1);
    let n = fwd.bn(&format!("{name}.b.n"), c);
    fwd.tape.add(x, n)
}

/// Full detection forward. `refine = false` disables the second branch and
/// aliases ŷ_ref to ŷ_ini; its parameters stay untouched.
pub fn cod_forward<S: Scalar>(fwd: &mut Fwd<S>, x: Var, refine: bool) -> CodOut {
    let (h, w) = {
        let t = fwd.tape.value(x);
        (t.h(), t.w())
    };
    let f = encoder_forward(fwd, x);
    let ini_logits = fusion_module(fwd, "fmi", &[f[2], f[3], f[4]]);
    let y_ini_coarse = fwd.tape.sigmoid(ini_logits);
    let y_ini = resize_to(fwd, y_ini_coarse, h, w);
    if !refine {
        return CodOut {
            y_ini,
            y_ref: y_ini,
            y_ini_coarse,
            y_ref_coarse: y_ini_coarse,
            attention: None,
        };
    }
    let (attention, f6) = holistic_attention(fwd, f[2], y_ini_coarse);
    let f7 = res_block(fwd, "res7", f6);
    let f8 = res_block(fwd, "res8", f7);
    let ref_logits = fusion_module(fwd, "fmr", &[f[1], f6, f7, f8]);
    let y_ref_coarse = fwd.tape.sigmoid(ref_logits);
    let y_ref = resize_to(fwd, y_ref_coarse, h, w);
    CodOut { y_ini, y_ref, y_ini_coarse, y_ref_coarse, attention: Some(attention) }
}
