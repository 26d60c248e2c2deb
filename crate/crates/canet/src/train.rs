//! Training loop: per-batch steps follow Algorithm 1's line order — detection
//! forward, dynamic supervision on detached predictions, confidence update,
//! fresh confidence maps for the weights, detection update. Modes select
//! which lines run: `m1` drops refinement and confidence, `m2` restores
//! refinement, `m3` trains the estimator adversarially, `ours` supervises it
//! with the disagreement targets.
//!
//! Every stochastic choice (shuffle order, dropout masks, label perturbation)
//! draws from a stream keyed by (seed, purpose, epoch), so a checkpoint plus
//! its epoch counter is the complete rng state and resumed runs continue
//! bit-exactly.

use crate::checkpoint::{
    self, entries_from_moments, entries_from_params, read_checkpoint, write_checkpoint,
    TensorEntry,
};
use crate::cod::{cod_forward, init_cod, CodConfig};
use crate::confidence::{confidence_forward, init_conf, ConfConfig};
use crate::data::{read_pgm, read_ppm, DatasetManifest};
use crate::error::{Error, Result};
use crate::loss::{
    adversarial_confidence, adversarial_confidence_loss, average_pair, confidence_loss,
    confidence_weight, dynamic_supervision, lambda_schedule, perturb_labels, structure_loss,
    LambdaMode, LossConfig, SupervisionMode,
};
use crate::optim::Adam;
use crate::params::{Fwd, ParamSet};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

// ── configuration ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ours,
    M1,
    M2,
    M3,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Ours => "ours",
            Mode::M1 => "m1",
            Mode::M2 => "m2",
            Mode::M3 => "m3",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Mode::Ours),
            "m1" => Ok(Mode::M1),
            "m2" => Ok(Mode::M2),
            "m3" => Ok(Mode::M3),
            other => Err(Error::Config(format!(
                "unknown mode {other}, expected ours|m1|m2|m3"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr_cod: f64,
    pub lr_conf: f64,
    pub lr_scale: f64,
    pub image_size: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub checkpoint_every: u32,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 10,
            lr_cod: 2.5e-5,
            lr_conf: 1.5e-5,
            lr_scale: 20.0,
            image_size: 64,
            loss: LossConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            mode: Mode::Ours,
        }
    }
}

/// Minimum batch size: batch-norm statistics degenerate below this.
pub const MIN_BATCH: usize = 4;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < MIN_BATCH {
            return Err(Error::Config(format!(
                "batch_size {} is below the minimum {MIN_BATCH}",
                self.batch_size
            )));
        }
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 16",
                self.image_size
            )));
        }
        for (name, v) in [
            ("lr_cod", self.lr_cod),
            ("lr_conf", self.lr_conf),
            ("lr_scale", self.lr_scale),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        self.loss.validate().map_err(Error::Config)
    }

    pub fn lr_cod_effective(&self) -> f64 {
        self.lr_cod * self.lr_scale
    }

    pub fn lr_conf_effective(&self) -> f64 {
        self.lr_conf * self.lr_scale
    }

    /// Project the mode onto the loss machinery it enables: m1/m2 run the
    /// detector alone (unit weights, estimator untouched), m3 forces the
    /// adversarial objective, ours honors the configured supervision. The
    /// estimator runs only when a supervision signal exists, so `ours` with
    /// supervision `none` and a fixed λ of 0 is m2 by construction.
    pub fn effective(&self) -> Effective {
        let mut loss = self.loss;
        let refine = match self.mode {
            Mode::M1 | Mode::M2 => {
                loss.supervision_mode = SupervisionMode::None;
                loss.lambda_mode = LambdaMode::Fixed(0.0);
                self.mode == Mode::M2
            }
            Mode::M3 => {
                loss.supervision_mode = SupervisionMode::Adversarial;
                true
            }
            Mode::Ours => true,
        };
        let use_cem = loss.supervision_mode != SupervisionMode::None;
        Effective { loss, refine, use_cem }
    }
}

/// The mode-resolved training recipe.
#[derive(Clone, Copy, Debug)]
pub struct Effective {
    pub loss: LossConfig,
    pub refine: bool,
    pub use_cem: bool,
}

// ── dataset in memory ───────────────────────────────────────────────────

pub fn cast_from_f64<S: Scalar>(t: &Tensor<f64>) -> Tensor<S> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| S::fr(v)).collect())
}

pub fn cast_to_f64<S: Scalar>(t: &Tensor<S>) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v.as_f64()).collect())
}

pub struct Dataset<S: Scalar> {
    pub ids: Vec<String>,
    /// [3, size, size] each.
    pub images: Vec<Tensor<S>>,
    /// [1, size, size] each, strictly binary.
    pub masks: Vec<Tensor<S>>,
    pub size: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let mut images = Vec::with_capacity(manifest.count);
        let mut masks = Vec::with_capacity(manifest.count);
        for id in &manifest.ids {
            let ip = manifest.image_path(dir, id);
            let img = read_ppm(&fs::read(&ip).map_err(|e| Error::io(&ip, e))?)?;
            let mp = manifest.mask_path(dir, id);
            let mask = read_pgm(&fs::read(&mp).map_err(|e| Error::io(&mp, e))?)?;
            let (h, w) = (mask.shape()[0], mask.shape()[1]);
            let bin: Vec<S> = mask
                .data()
                .iter()
                .map(|&v| S::fr(if v >= 0.5 { 1.0 } else { 0.0 }))
                .collect();
            images.push(cast_from_f64(&img));
            masks.push(Tensor::new(vec![1, h, w], bin));
        }
        Ok(Dataset { ids: manifest.ids, images, masks, size: manifest.size })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stack the indexed samples into [B,3,H,W] / [B,1,H,W] batch tensors.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<S>, Tensor<S>) {
        let b = idx.len();
        let s = self.size;
        let mut xs = Vec::with_capacity(b * 3 * s * s);
        let mut ys = Vec::with_capacity(b * s * s);
        for &i in idx {
            xs.extend_from_slice(self.images[i].data());
            ys.extend_from_slice(self.masks[i].data());
        }
        (Tensor::new(vec![b, 3, s, s], xs), Tensor::new(vec![b, 1, s, s], ys))
    }
}

// ── model state ─────────────────────────────────────────────────────────

pub struct Model<S: Scalar> {
    pub theta: ParamSet<S>,
    pub beta: ParamSet<S>,
}

/// Both networks at their published widths, initialized from `seed`.
pub fn init_model<S: Scalar>(seed: u64) -> Model<S> {
    let mut theta = ParamSet::new();
    init_cod(&mut theta, &mut stream(seed, "init-theta", 0), &CodConfig::default());
    let mut beta = ParamSet::new();
    init_conf(&mut beta, &mut stream(seed, "init-beta", 0), &ConfConfig::default());
    Model { theta, beta }
}

pub struct TrainState<S: Scalar> {
    pub config: TrainConfig,
    pub model: Model<S>,
    pub opt_theta: Adam<S>,
    pub opt_beta: Adam<S>,
    /// Completed epochs; also the rng stream cursor.
    pub epoch: u32,
}

pub fn fresh_state<S: Scalar>(config: TrainConfig) -> TrainState<S> {
    let model = init_model(config.seed);
    let opt_theta = Adam::new(config.lr_cod_effective());
    let opt_beta = Adam::new(config.lr_conf_effective());
    TrainState { config, model, opt_theta, opt_beta, epoch: 0 }
}

// ── one Algorithm 1 step ────────────────────────────────────────────────

pub struct StepStats {
    pub loss_s: f64,
    pub loss_c: f64,
    pub yc_sum: f64,
    pub yc_count: usize,
}

fn finite_or(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Train(format!("{name} is not finite ({v})")))
    }
}

/// Reusable eval-mode confidence pass: maps for both heads, with the
/// adversarial readout applied when the estimator is a discriminator.
fn confidence_maps<S: Scalar>(
    beta: &mut ParamSet<S>,
    mode: SupervisionMode,
    x: &Tensor<S>,
    pred_ini: &Tensor<S>,
    pred_ref: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let mut fwd = Fwd::new(beta, false, false, None, false);
    let xv = fwd.input(x.clone());
    let pi = fwd.input(pred_ini.clone());
    let pr = fwd.input(pred_ref.clone());
    let ci = confidence_forward(&mut fwd, xv, pi);
    let cr = confidence_forward(&mut fwd, xv, pr);
    let mut ci = fwd.tape.value(ci).clone();
    let mut cr = fwd.tape.value(cr).clone();
    if mode == SupervisionMode::Adversarial {
        ci = adversarial_confidence(&ci);
        cr = adversarial_confidence(&cr);
    }
    (ci, cr)
}

pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    opt_theta: &mut Adam<S>,
    opt_beta: &mut Adam<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    eff: &Effective,
    lambda: f64,
    dropout_rng: &mut ChaCha8Rng,
    perturb_rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    // detection forward; the same tape later carries the structure loss
    let mut fwd = Fwd::new(&mut model.theta, true, true, None, true);
    let xv = fwd.input(x.clone());
    let out = cod_forward(&mut fwd, xv, eff.refine);
    let pred_ini = fwd.tape.value(out.y_ini).clone();
    let pred_ref = fwd.tape.value(out.y_ref).clone();

    // disagreement targets on detached predictions
    let yc_ini = dynamic_supervision(y, &pred_ini);
    let yc_ref = dynamic_supervision(y, &pred_ref);
    let yc_sum: f64 = yc_ini
        .data()
        .iter()
        .chain(yc_ref.data().iter())
        .map(|&v| v.as_f64())
        .sum();
    let yc_count = yc_ini.numel() + yc_ref.numel();

    // confidence estimator update
    let mut loss_c = 0.0;
    if eff.use_cem {
        let mut cfwd = Fwd::new(&mut model.beta, true, true, Some(dropout_rng), true);
        let xc = cfwd.input(x.clone());
        let pi = cfwd.input(pred_ini.clone());
        let pr = cfwd.input(pred_ref.clone());
        let lc = match eff.loss.supervision_mode {
            SupervisionMode::Dynamic => {
                let ci = confidence_forward(&mut cfwd, xc, pi);
                let cr = confidence_forward(&mut cfwd, xc, pr);
                confidence_loss(&mut cfwd.tape, ci, cr, &yc_ini, &yc_ref)
            }
            SupervisionMode::Adversarial => {
                let pert = perturb_labels(y, eff.loss.perturbation_band, perturb_rng);
                let pg = cfwd.input(pert);
                let di = confidence_forward(&mut cfwd, xc, pi);
                let dr = confidence_forward(&mut cfwd, xc, pr);
                let dg = confidence_forward(&mut cfwd, xc, pg);
                adversarial_confidence_loss(&mut cfwd.tape, di, dr, dg)
            }
            SupervisionMode::None => unreachable!("use_cem implies a supervision signal"),
        };
        let name = match eff.loss.supervision_mode {
            SupervisionMode::Adversarial => "adversarial confidence loss",
            _ => "confidence loss",
        };
        loss_c = finite_or(name, cfwd.tape.value(lc).data()[0].as_f64())?;
        cfwd.tape.backward(lc);
        let grads = cfwd.collect_grads();
        drop(cfwd);
        opt_beta.step(&mut model.beta, &grads)?;
    }

    // weights from freshly recomputed confidences (unit when λ or the
    // estimator is absent)
    let (w_ini, w_ref) = if eff.use_cem && lambda > 0.0 {
        let (ci, cr) = confidence_maps(
            &mut model.beta,
            eff.loss.supervision_mode,
            x,
            &pred_ini,
            &pred_ref,
        );
        (confidence_weight(&ci, lambda), confidence_weight(&cr, lambda))
    } else {
        (Tensor::full(y.shape().to_vec(), 1.0), Tensor::full(y.shape().to_vec(), 1.0))
    };

    // detection update
    let ls_ini = structure_loss(&mut fwd.tape, out.y_ini, y, &w_ini, eff.loss.dice_smoothing);
    let ls_ref = structure_loss(&mut fwd.tape, out.y_ref, y, &w_ref, eff.loss.dice_smoothing);
    let ls = average_pair(&mut fwd.tape, ls_ini, ls_ref);
    let loss_s = finite_or("structure loss", fwd.tape.value(ls).data()[0].as_f64())?;
    fwd.tape.backward(ls);
    let grads = fwd.collect_grads();
    drop(fwd);
    opt_theta.step(&mut model.theta, &grads)?;

    Ok(StepStats { loss_s, loss_c, yc_sum, yc_count })
}

// ── epoch driver ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: u32,
    pub loss_s: f64,
    pub loss_c: f64,
    pub mean_yc: f64,
    pub lambda: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,loss_s,loss_c,mean_yc,lambda,seconds";

impl EpochRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.loss_s, self.loss_c, self.mean_yc, self.lambda, self.seconds
        )
    }
}

pub fn log_path(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.log.csv", out.display()))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Split `n` samples into batches of `bs`, folding a tail shorter than
/// `MIN_BATCH` into the preceding batch.
pub fn batch_ranges(n: usize, bs: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        out.push((start, end));
        start = end;
    }
    if out.len() > 1 {
        let last = out[out.len() - 1];
        if last.1 - last.0 < MIN_BATCH {
            out.pop();
            out.last_mut().unwrap().1 = last.1;
        }
    }
    out
}

fn run_training<S: Scalar>(
    mut st: TrainState<S>,
    data_dir: &Path,
    out: &Path,
    fresh_log: bool,
) -> Result<(TrainState<S>, Vec<EpochRow>)> {
    st.config.validate()?;
    let ds = Dataset::<S>::load(data_dir)?;
    if ds.size != st.config.image_size {
        return Err(Error::Config(format!(
            "dataset images are {0}x{0} but the configuration trains at {1}x{1}",
            ds.size, st.config.image_size
        )));
    }
    if ds.len() < MIN_BATCH {
        return Err(Error::Data(format!(
            "dataset has {} samples, fewer than the minimum batch of {MIN_BATCH}",
            ds.len()
        )));
    }
    let eff = st.config.effective();
    let lpath = log_path(out);
    if fresh_log || !lpath.exists() {
        fs::write(&lpath, format!("{LOG_HEADER}\n")).map_err(|e| Error::io(&lpath, e))?;
    }

    let mut rows = Vec::new();
    let seed = st.config.seed;
    for t in st.epoch + 1..=st.config.epochs {
        let clock = Instant::now();
        let lambda = lambda_schedule(&eff.loss, t as u64);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut stream(seed, "shuffle", t as u64));
        let mut dropout_rng = stream(seed, "conf-dropout", t as u64);
        let mut perturb_rng = stream(seed, "perturb", t as u64);

        let (mut sum_s, mut sum_c, mut sum_yc, mut n_yc) = (0.0, 0.0, 0.0, 0usize);
        for (a, b) in batch_ranges(ds.len(), st.config.batch_size) {
            let (x, y) = ds.batch(&order[a..b]);
            let stats = train_step(
                &mut st.model,
                &mut st.opt_theta,
                &mut st.opt_beta,
                &x,
                &y,
                &eff,
                lambda,
                &mut dropout_rng,
                &mut perturb_rng,
            )?;
            let bn = (b - a) as f64;
            sum_s += stats.loss_s * bn;
            sum_c += stats.loss_c * bn;
            sum_yc += stats.yc_sum;
            n_yc += stats.yc_count;
        }
        let n = ds.len() as f64;
        let row = EpochRow {
            epoch: t,
            loss_s: sum_s / n,
            loss_c: sum_c / n,
            mean_yc: sum_yc / n_yc as f64,
            lambda,
            seconds: clock.elapsed().as_secs_f64(),
        };
        append_line(&lpath, &row.csv())?;
        rows.push(row);
        st.epoch = t;
        if st.config.checkpoint_every > 0 && t % st.config.checkpoint_every == 0 {
            save_state(&st, &PathBuf::from(format!("{}.epoch{t}", out.display())))?;
        }
    }
    save_state(&st, out)?;
    Ok((st, rows))
}

pub fn train_fresh<S: Scalar>(
    config: TrainConfig,
    data_dir: &Path,
    out: &Path,
) -> Result<(TrainState<S>, Vec<EpochRow>)> {
    config.validate()?;
    run_training(fresh_state(config), data_dir, out, true)
}

/// Continue from a checkpoint: its embedded configuration governs the run.
pub fn train_resume<S: Scalar>(
    ckpt: &Path,
    data_dir: &Path,
    out: &Path,
) -> Result<(TrainState<S>, Vec<EpochRow>)> {
    run_training(load_state(ckpt)?, data_dir, out, false)
}

// ── state persistence ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CkptMeta {
    version: u32,
    config: TrainConfig,
    epoch: u32,
    opt_theta_step: u64,
    opt_beta_step: u64,
}

pub fn save_state<S: Scalar>(st: &TrainState<S>, path: &Path) -> Result<()> {
    let meta = CkptMeta {
        version: checkpoint::FORMAT_VERSION,
        config: st.config,
        epoch: st.epoch,
        opt_theta_step: st.opt_theta.step_count(),
        opt_beta_step: st.opt_beta.step_count(),
    };
    let meta = serde_json::to_string(&meta)
        .map_err(|e| Error::Checkpoint(format!("metadata serialization failed: {e}")))?;
    let mut entries: Vec<TensorEntry> = entries_from_params("theta", &st.model.theta);
    entries.extend(entries_from_params("beta", &st.model.beta));
    let (m, v) = st.opt_theta.moments();
    entries.extend(entries_from_moments("opt_theta.m", &st.model.theta, m));
    entries.extend(entries_from_moments("opt_theta.v", &st.model.theta, v));
    let (m, v) = st.opt_beta.moments();
    entries.extend(entries_from_moments("opt_beta.m", &st.model.beta, m));
    entries.extend(entries_from_moments("opt_beta.v", &st.model.beta, v));
    write_checkpoint(path, &meta, &entries)
}

pub fn load_state<S: Scalar>(path: &Path) -> Result<TrainState<S>> {
    let (meta, entries) = read_checkpoint(path)?;
    let meta: CkptMeta = serde_json::from_str(&meta)
        .map_err(|e| Error::Checkpoint(format!("metadata parse failed: {e}")))?;
    if meta.version != checkpoint::FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported metadata version {}",
            meta.version
        )));
    }
    let index = checkpoint::index_entries(&entries);
    let mut model: Model<S> = init_model(meta.config.seed);
    checkpoint::apply_params("theta", &index, &mut model.theta)?;
    checkpoint::apply_params("beta", &index, &mut model.beta)?;
    let tm = checkpoint::moments_from_entries("opt_theta.m", &index, &model.theta)?;
    let tv = checkpoint::moments_from_entries("opt_theta.v", &index, &model.theta)?;
    let bm = checkpoint::moments_from_entries("opt_beta.m", &index, &model.beta)?;
    let bv = checkpoint::moments_from_entries("opt_beta.v", &index, &model.beta)?;
    Ok(TrainState {
        opt_theta: Adam::restore(meta.config.lr_cod_effective(), meta.opt_theta_step, tm, tv),
        opt_beta: Adam::restore(meta.config.lr_conf_effective(), meta.opt_beta_step, bm, bv),
        config: meta.config,
        model,
        epoch: meta.epoch,
    })
}

// ── inference ───────────────────────────────────────────────────────────

/// Eval-mode refined prediction and its confidence map for one [3,H,W]
/// image; both returned as [1,1,H,W] in [0,1].
pub fn predict<S: Scalar>(
    config: &TrainConfig,
    model: &mut Model<S>,
    image: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    assert_eq!(image.shape()[0], 3, "predict expects a [3,H,W] image");
    let eff = config.effective();
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let batched = Tensor::new(vec![1, 3, h, w], image.data().to_vec());

    let mut fwd = Fwd::new(&mut model.theta, false, false, None, false);
    let xv = fwd.input(batched.clone());
    let out = cod_forward(&mut fwd, xv, eff.refine);
    let pred = fwd.tape.value(out.y_ref).clone();
    drop(fwd);

    let mut cfwd = Fwd::new(&mut model.beta, false, false, None, false);
    let xv = cfwd.input(batched);
    let pv = cfwd.input(pred.clone());
    let cv = confidence_forward(&mut cfwd, xv, pv);
    let mut conf = cfwd.tape.value(cv).clone();
    if eff.loss.supervision_mode == SupervisionMode::Adversarial {
        conf = adversarial_confidence(&conf);
    }
    (pred, conf)
}

/// CLI `infer`: read one PPM, write prediction and confidence PGMs.
pub fn infer_files<S: Scalar>(
    ckpt: &Path,
    image: &Path,
    pred_out: &Path,
    conf_out: &Path,
) -> Result<()> {
    let mut st = load_state::<S>(ckpt)?;
    let img = read_ppm(&fs::read(image).map_err(|e| Error::io(image, e))?)?;
    let s = st.config.image_size;
    if img.shape() != [3, s, s] {
        return Err(Error::Config(format!(
            "image is {}x{} but the checkpoint was trained at {s}x{s}",
            img.shape()[1],
            img.shape()[2]
        )));
    }
    let (pred, conf) = predict(&st.config, &mut st.model, &cast_from_f64(&img));
    fs::write(pred_out, crate::data::write_pgm(&cast_to_f64(&pred)))
        .map_err(|e| Error::io(pred_out, e))?;
    fs::write(conf_out, crate::data::write_pgm(&cast_to_f64(&conf)))
        .map_err(|e| Error::io(conf_out, e))
}

/// Write `pred_<id>.pgm` maps for a whole dataset into `pred_dir`.
pub fn predict_dataset<S: Scalar>(
    st: &mut TrainState<S>,
    data_dir: &Path,
    pred_dir: &Path,
) -> Result<()> {
    let ds = Dataset::<S>::load(data_dir)?;
    if ds.size != st.config.image_size {
        return Err(Error::Config(format!(
            "dataset images are {0}x{0} but the checkpoint was trained at {1}x{1}",
            ds.size, st.config.image_size
        )));
    }
    fs::create_dir_all(pred_dir).map_err(|e| Error::io(pred_dir, e))?;
    for (i, id) in ds.ids.iter().enumerate() {
        let (pred, _) = predict(&st.config, &mut st.model, &ds.images[i]);
        let path = pred_dir.join(format!("pred_{id}.pgm"));
        fs::write(&path, crate::data::write_pgm(&cast_to_f64(&pred)))
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
