//! Training loops for the three regimes.
//!
//! * `det`: one backbone and one head trained on all classes at once.
//! * `int`: one backbone and scalar head per class.
//! * `pat-t`: one backbone with image, patch and weight heads. Per image
//!   the loss is `l(p, y) + l(q_agg, y)`, where `q_agg` aggregates the
//!   patch-head logits of the four quadrant patches with softmax weights
//!   computed from the weight head. Every patch carries the full label
//!   vector of its image.
//!
//! The per-class loss is separable, and Adam and EMA act elementwise, so
//! `int` members are trained side by side in one loop over shared
//! minibatches; each member still only ever sees its own class.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::losses::{loss, LossConfig, LossKind};
use crate::metrics::{mean_average_precision, PredictionSet, ScoreKind, DEFAULT_THRESHOLD};
use crate::numcore::{adam_step, ema_update, AdamHyper, AdamState, Dims, HeadRole, ModelParams};
use crate::patching::{
    aggregate_patch_logits, patch_matrix, patch_weights, predict_fused, predict_plain, FusionConfig,
    PredictionTable, WeightSource, PATCHES,
};
use crate::rng::{indexed_stream, substream};
use crate::synthgen::Dataset;

pub use crate::numcore::Arch as TrainMode;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// EMA decay; `None` disables averaging.
    pub ema: Option<f64>,
    /// Linear warmup length in optimizer steps.
    pub warmup: usize,
    pub hidden: usize,
    pub loss: LossConfig,
    /// Temperature used in training; temperature and `lambda` at evaluation.
    pub fusion: FusionConfig,
    /// Also supervise the weight head with `l(sum_j w_j q^w_j, y)`.
    pub aux_weight_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 20,
            batch: 32,
            seed: 0,
            ema: None,
            warmup: 0,
            hidden: 256,
            loss: LossConfig::default(),
            fusion: FusionConfig {
                weight_source: WeightSource::ThetaHead,
                ..FusionConfig::default()
            },
            aux_weight_loss: false,
        }
    }
}

/// Keys written by [`TrainConfig::to_kv`].
pub const TRAIN_KEYS: &[&str] = &[
    "fusion.lambda",
    "fusion.tau",
    "loss.clip",
    "loss.eps_log",
    "loss.gamma_neg",
    "loss.gamma_pos",
    "loss.kind",
    "train.aux_weight_loss",
    "train.batch",
    "train.ema",
    "train.epochs",
    "train.hidden",
    "train.lr",
    "train.seed",
    "train.warmup",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("train.hidden must be at least 1".into()));
        }
        if let Some(d) = self.ema {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("train.ema must lie in [0,1), got {d}")));
            }
        }
        self.loss.validate()?;
        self.fusion.validate()
    }

    pub fn to_kv(&self, map: &mut KvMap) {
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("train.lr", self.lr.to_string());
        put("train.epochs", self.epochs.to_string());
        put("train.batch", self.batch.to_string());
        put("train.seed", self.seed.to_string());
        put("train.ema", self.ema.map_or_else(|| "off".to_string(), |d| d.to_string()));
        put("train.warmup", self.warmup.to_string());
        put("train.hidden", self.hidden.to_string());
        put("train.aux_weight_loss", self.aux_weight_loss.to_string());
        put("loss.kind", self.loss.kind.to_string());
        put("loss.gamma_pos", self.loss.gamma_pos.to_string());
        put("loss.gamma_neg", self.loss.gamma_neg.to_string());
        put("loss.clip", self.loss.clip.to_string());
        put("loss.eps_log", self.loss.eps_log.to_string());
        put("fusion.tau", self.fusion.tau.to_string());
        put("fusion.lambda", self.fusion.lambda.to_string());
    }

    /// Reads the keys of [`TRAIN_KEYS`] that are present; absent keys keep
    /// their defaults. Choosing `loss.kind=bce` resets the other loss
    /// settings to their BCE values before explicit keys are applied.
    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let mut cfg = Self::default();
        let opt = |key: &str| map.get(key).map(String::as_str);
        fn parse<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
            raw.parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: '{raw}'")))
        }
        if let Some(v) = opt("loss.kind") {
            cfg.loss = match v.parse::<LossKind>()? {
                LossKind::Bce => LossConfig::bce(),
                LossKind::Asl => LossConfig::asl(),
            };
        }
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = opt($key) {
                    $field = parse($key, v)?;
                }
            };
        }
        set!("train.lr", cfg.lr);
        set!("train.epochs", cfg.epochs);
        set!("train.batch", cfg.batch);
        set!("train.seed", cfg.seed);
        set!("train.warmup", cfg.warmup);
        set!("train.hidden", cfg.hidden);
        set!("train.aux_weight_loss", cfg.aux_weight_loss);
        set!("loss.gamma_pos", cfg.loss.gamma_pos);
        set!("loss.gamma_neg", cfg.loss.gamma_neg);
        set!("loss.clip", cfg.loss.clip);
        set!("loss.eps_log", cfg.loss.eps_log);
        set!("fusion.tau", cfg.fusion.tau);
        set!("fusion.lambda", cfg.fusion.lambda);
        if let Some(v) = opt("train.ema") {
            cfg.ema = match v {
                "off" | "none" => None,
                other => Some(parse("train.ema", other)?),
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn lr_at(&self, step: u64) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }
}

/// Mean per-image loss of one minibatch, split by term.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLoss {
    pub image: f64,
    pub patch: f64,
    pub aux: f64,
}

impl BatchLoss {
    pub fn total(&self) -> f64 {
        self.image + self.patch + self.aux
    }
}

fn label_row(labels: ArrayView2<'_, u8>, i: usize) -> Vec<u8> {
    labels.row(i).to_vec()
}

/// Loss and parameter gradients of `l(p, y)` on image logits, averaged
/// over the batch. Works for `det` and `int` models.
pub fn plain_objective(
    model: &ModelParams,
    x: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, u8>,
    cfg: &LossConfig,
) -> Result<(BatchLoss, ModelParams)> {
    let n = x.nrows();
    let roles = [HeadRole::Image];
    let pass = model.forward(x, &roles)?;
    let logits = &pass.logits[0];
    let mut up = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for i in 0..n {
        let out = loss(cfg, &logits.row(i).to_vec(), &label_row(labels, i))?;
        total += out.value;
        for (u, g) in up.row_mut(i).iter_mut().zip(&out.grad) {
            *u = g / n as f64;
        }
    }
    let grads = model.backward(x, &pass, &roles, &[up])?;
    let l = BatchLoss {
        image: total / n as f64,
        ..BatchLoss::default()
    };
    Ok((l, grads))
}

/// Loss and gradients of the patch objective, averaged over the batch.
///
/// Images and their patches go through the backbone as one stacked
/// `(5B, S*S)` matrix. With weights `w = softmax_j(q^w / tau)` and
/// `q_agg = sum_j w_j q_j`, the gradient reaching the weight head is
/// `dq_agg_k / dq^w_jk = w_jk (q_jk - q_agg_k) / tau`.
pub fn pat_t_objective(
    model: &ModelParams,
    x: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, u8>,
    cfg: &LossConfig,
    tau: f64,
    aux_weight_loss: bool,
) -> Result<(BatchLoss, ModelParams)> {
    let n = x.nrows();
    let q = model.dims.classes;
    let patches = patch_matrix(x, model.dims.side)?;
    let stacked = concatenate(Axis(0), &[x, patches.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    let roles = [HeadRole::Image, HeadRole::Patch, HeadRole::Weight];
    let pass = model.forward(stacked.view(), &roles)?;
    let (p_all, q_all, w_all) = (&pass.logits[0], &pass.logits[1], &pass.logits[2]);

    let rows = stacked.nrows();
    let mut up_image = Array2::zeros((rows, q));
    let mut up_patch = Array2::zeros((rows, q));
    let mut up_weight = Array2::zeros((rows, q));
    let mut acc = BatchLoss::default();
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let y = label_row(labels, i);
        let image = loss(cfg, &p_all.row(i).to_vec(), &y)?;
        acc.image += image.value;
        for (u, g) in up_image.row_mut(i).iter_mut().zip(&image.grad) {
            *u = g * scale;
        }

        let block = s![n + PATCHES * i..n + PATCHES * (i + 1), ..];
        let q_i = q_all.slice(block);
        let qw_i = w_all.slice(block);
        let w = patch_weights(qw_i, tau)?;
        let agg = aggregate_patch_logits(q_i, w.view())?;
        let patch = loss(cfg, &agg.to_vec(), &y)?;
        acc.patch += patch.value;
        let aux = if aux_weight_loss {
            let agg_w = aggregate_patch_logits(qw_i, w.view())?;
            let out = loss(cfg, &agg_w.to_vec(), &y)?;
            acc.aux += out.value;
            Some((agg_w, out.grad))
        } else {
            None
        };

        for j in 0..PATCHES {
            let r = n + PATCHES * i + j;
            for k in 0..q {
                let g = patch.grad[k] * scale;
                let wjk = w[[j, k]];
                up_patch[[r, k]] = g * wjk;
                let mut dw = g * wjk * (q_i[[j, k]] - agg[k]) / tau;
                if let Some((agg_w, grad_w)) = &aux {
                    let ga = grad_w[k] * scale;
                    dw += ga * (wjk + wjk * (qw_i[[j, k]] - agg_w[k]) / tau);
                }
                up_weight[[r, k]] = dw;
            }
        }
    }
    let grads = model.backward(stacked.view(), &pass, &roles, &[up_image, up_patch, up_weight])?;
    Ok((
        BatchLoss {
            image: acc.image * scale,
            patch: acc.patch * scale,
            aux: acc.aux * scale,
        },
        grads,
    ))
}

/// Optimizer state for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub mode: TrainMode,
    pub params: ModelParams,
    pub ema: Option<ModelParams>,
    pub adam: AdamState,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(mode: TrainMode, dims: Dims, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = if mode == TrainMode::Int {
            // one stream per member, so a member does not depend on the class count
            let members = (0..dims.classes)
                .map(|k| {
                    let mut rng = indexed_stream(cfg.seed, "init/int", k as u64);
                    ModelParams::init(mode, Dims { classes: 1, ..dims }, &mut rng)
                })
                .collect();
            ModelParams::assemble_int(members)?
        } else {
            ModelParams::init(mode, dims, &mut substream(cfg.seed, "init"))
        };
        Ok(Self::from_params(mode, params, None, cfg))
    }

    /// Continues from existing parameters with a fresh optimizer state.
    pub fn from_params(mode: TrainMode, params: ModelParams, ema: Option<ModelParams>, cfg: &TrainConfig) -> Self {
        let adam = AdamState::new(&params, AdamHyper::default());
        let ema = cfg.ema.map(|_| ema.unwrap_or_else(|| params.clone()));
        Self {
            mode,
            params,
            ema,
            adam,
            cfg: cfg.clone(),
        }
    }

    /// One optimizer step on a minibatch.
    pub fn step(&mut self, x: ArrayView2<'_, f64>, labels: ArrayView2<'_, u8>) -> Result<BatchLoss> {
        let next = self.adam.step + 1;
        let (l, grads) = match self.mode {
            TrainMode::Det | TrainMode::Int => plain_objective(&self.params, x, labels, &self.cfg.loss)?,
            TrainMode::PatT => pat_t_objective(
                &self.params,
                x,
                labels,
                &self.cfg.loss,
                self.cfg.fusion.tau,
                self.cfg.aux_weight_loss,
            )?,
        };
        if !l.total().is_finite() {
            return Err(Error::NonFinite {
                step: next,
                what: "loss".into(),
            });
        }
        let lr = self.cfg.lr_at(self.adam.step);
        adam_step(&mut self.params, &grads, &mut self.adam, lr)?;
        if let (Some(avg), Some(decay)) = (self.ema.as_mut(), self.cfg.ema) {
            ema_update(avg, &self.params, decay)?;
        }
        Ok(l)
    }

    /// Parameters used for evaluation: the average when EMA is on.
    pub fn eval_params(&self) -> &ModelParams {
        self.ema.as_ref().unwrap_or(&self.params)
    }
}

/// `pat-t` step on a batch: loss terms plus an in-place update.
pub fn pat_t_step(trainer: &mut Trainer, x: ArrayView2<'_, f64>, labels: ArrayView2<'_, u8>) -> Result<BatchLoss> {
    if trainer.mode != TrainMode::PatT {
        return Err(Error::Config("pat_t_step needs a pat-t trainer".into()));
    }
    trainer.step(x, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: BatchLoss,
    pub test_map: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,image_loss,patch_loss,aux_loss,test_map";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.loss.total(),
            self.loss.image,
            self.loss.patch,
            self.loss.aux,
            self.test_map.map_or_else(|| "NA".to_string(), |m| m.to_string())
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Predictions of a trained model on `images`. `pat-t` models use fused
/// scores with weights from the weight head; others use image logits.
pub fn predict(mode: TrainMode, params: &ModelParams, fusion: &FusionConfig, images: ArrayView2<'_, f64>) -> Result<PredictionTable> {
    match mode {
        TrainMode::PatT => predict_fused(
            params,
            images,
            &FusionConfig {
                weight_source: WeightSource::ThetaHead,
                ..*fusion
            },
        ),
        TrainMode::Det | TrainMode::Int => predict_plain(params, images),
    }
}

/// Test mAP of a prediction table against a dataset's labels.
pub fn table_map(table: &PredictionTable, data: &Dataset) -> Result<f64> {
    let preds = PredictionSet::new(table.scores(), data.label_matrix(), ScoreKind::Probability, DEFAULT_THRESHOLD)?;
    Ok(mean_average_precision(&preds)?.map)
}

fn check_data(data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    Ok(())
}

/// Runs `cfg.epochs` epochs. When `resume` is given, training continues
/// from its parameters, which must match `mode` and the data dimensions.
pub fn train(
    mode: TrainMode,
    data: &Dataset,
    cfg: &TrainConfig,
    eval: Option<&Dataset>,
    resume: Option<&Checkpoint>,
) -> Result<TrainRun> {
    check_data(data)?;
    cfg.validate()?;
    let dims = Dims {
        side: data.side,
        hidden: cfg.hidden,
        classes: data.classes,
    };
    let (mut trainer, start_epoch) = match resume {
        None => (Trainer::new(mode, dims, cfg)?, 0),
        Some(ck) => {
            if ck.mode != mode {
                return Err(Error::Config(format!(
                    "checkpoint was trained in {} mode, not {}",
                    ck.mode, mode
                )));
            }
            if ck.params.dims != dims {
                return Err(Error::Config("checkpoint dimensions differ from data and config".into()));
            }
            (
                Trainer::from_params(mode, ck.params.clone(), ck.ema.clone(), cfg),
                ck.epoch,
            )
        }
    };

    let n = data.len();
    let labels = data.label_matrix();
    let eval_images = eval.map(|d| d.pixels(&(0..d.len()).collect::<Vec<_>>()));
    let mut log = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let epoch = start_epoch + e + 1;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut indexed_stream(cfg.seed, "shuffle", epoch as u64));
        let mut sum = BatchLoss::default();
        for chunk in order.chunks(cfg.batch) {
            let x = data.pixels(chunk);
            let y = labels.select(Axis(0), chunk);
            let l = trainer.step(x.view(), y.view())?;
            let w = chunk.len() as f64;
            sum.image += l.image * w;
            sum.patch += l.patch * w;
            sum.aux += l.aux * w;
        }
        let mean = BatchLoss {
            image: sum.image / n as f64,
            patch: sum.patch / n as f64,
            aux: sum.aux / n as f64,
        };
        let test_map = match (eval, &eval_images) {
            (Some(d), Some(images)) => {
                let table = predict(mode, trainer.eval_params(), &cfg.fusion, images.view())?;
                Some(table_map(&table, d)?)
            }
            _ => None,
        };
        log.push(EpochLog {
            epoch,
            loss: mean,
            test_map,
        });
    }

    let mut metrics = KvMap::new();
    if let Some(last) = log.last() {
        metrics.insert("train_loss".into(), last.loss.total().to_string());
        if let Some(m) = last.test_map {
            metrics.insert("test_map".into(), m.to_string());
        }
    }
    let Trainer { params, ema, .. } = trainer;
    Ok(TrainRun {
        checkpoint: Checkpoint {
            mode,
            params,
            ema,
            config: cfg.clone(),
            epoch: start_epoch + cfg.epochs,
            metrics,
            int_class: None,
        },
        log,
    })
}

pub fn train_det(data: &Dataset, cfg: &TrainConfig, eval: Option<&Dataset>) -> Result<TrainRun> {
    train(TrainMode::Det, data, cfg, eval, None)
}

pub fn pat_t_train(data: &Dataset, cfg: &TrainConfig, eval: Option<&Dataset>) -> Result<TrainRun> {
    train(TrainMode::PatT, data, cfg, eval, None)
}

/// Independent per-class training. Returns the joint run (whose
/// checkpoint holds all members) and one single-class checkpoint per class.
pub fn train_int(data: &Dataset, cfg: &TrainConfig, eval: Option<&Dataset>) -> Result<(TrainRun, Vec<Checkpoint>)> {
    let run = train(TrainMode::Int, data, cfg, eval, None)?;
    let members = split_int(&run.checkpoint)?;
    Ok((run, members))
}

/// Splits a joint `int` checkpoint into single-class checkpoints.
pub fn split_int(ck: &Checkpoint) -> Result<Vec<Checkpoint>> {
    let params = ck.params.int_members()?;
    let emas = match &ck.ema {
        Some(e) => e.int_members()?.into_iter().map(Some).collect(),
        None => vec![None; params.len()],
    };
    Ok(params
        .into_iter()
        .zip(emas)
        .enumerate()
        .map(|(k, (params, ema))| Checkpoint {
            mode: TrainMode::Int,
            params,
            ema,
            config: ck.config.clone(),
            epoch: ck.epoch,
            metrics: ck.metrics.clone(),
            int_class: Some(k),
        })
        .collect())
}

/// Reassembles single-class checkpoints, ordered by class, into one.
pub fn join_int(members: &[Checkpoint]) -> Result<Checkpoint> {
    let mut sorted: Vec<&Checkpoint> = members.iter().collect();
    sorted.sort_by_key(|c| c.int_class);
    for (k, c) in sorted.iter().enumerate() {
        if c.mode != TrainMode::Int || c.int_class != Some(k) {
            return Err(Error::Model(format!("int member for class {k} is missing")));
        }
    }
    let params = ModelParams::assemble_int(sorted.iter().map(|c| c.params.clone()).collect())?;
    let ema = if sorted.iter().all(|c| c.ema.is_some()) {
        Some(ModelParams::assemble_int(
            sorted.iter().map(|c| c.ema.clone().expect("checked")).collect(),
        )?)
    } else {
        None
    };
    let first = sorted[0];
    Ok(Checkpoint {
        mode: TrainMode::Int,
        params,
        ema,
        config: first.config.clone(),
        epoch: first.epoch,
        metrics: first.metrics.clone(),
        int_class: None,
    })
}

/// Scores that predict each class's training frequency for every image.
pub fn prior_scores(train: &Dataset, n: usize) -> Array2<f64> {
    let counts = train.positives_per_class();
    let total = train.len().max(1) as f64;
    Array2::from_shape_fn((n, train.classes), |(_, k)| counts[k] as f64 / total)
}
