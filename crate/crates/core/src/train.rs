//! Alternating optimisation: descend the loss in the regular weights with B
//! frozen, then ascend the routing objective in B with the weights frozen.

use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{Batch, BatchStream, DatasetSplit, LabelSet, Source};
use crate::error::{Error, Result};
use crate::loss::{margin_loss, margin_loss_grad, recon_loss, recon_loss_grad, MarginConfig};
use crate::model::{
    backward, forward, reconstruct, reconstruct_backward, CapsNetParams, ModelConfig, RouteWith,
};
use crate::rng::SeedStream;
use crate::routing::{delta_signs, update_l1, update_l2, RoutingConfig, RoutingMode};
use crate::tensor::{Scalar, Tensor};

/// Entries of B with `|b|` below this count as zero in the sparsity metric.
pub const SPARSITY_THRESHOLD: f64 = 1e-3;
/// Abort when ‖B‖∞ exceeds this multiple of its initial value.
pub const DIVERGENCE_FACTOR: f64 = 1e3;
pub const CSV_HEADER: &str = "iteration,loss,eval_error_pct,sec_per_100,b_sparsity";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: Source,
    pub model: ModelConfig,
    pub routing: RoutingConfig,
    pub margin: MarginConfig,
    pub recon_weight: f64,
    pub batch_size: usize,
    /// Descent steps on the weights per iteration.
    pub w_steps: usize,
    pub iterations: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_interval: usize,
    pub optimizer: OptimizerKind,
    pub eval_interval: usize,
    pub eval_batch: usize,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// MultiMNIST composites generated per split.
    pub multi_train: usize,
    pub multi_test: usize,
    pub checkpoint_interval: usize,
    pub seed: u64,
    /// Leave wall-clock columns empty so metrics files are reproducible byte for byte.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: Source::Mnist,
            model: ModelConfig::default(),
            routing: RoutingConfig::default(),
            margin: MarginConfig::default(),
            recon_weight: 5e-4,
            batch_size: 32,
            w_steps: 1,
            iterations: 2000,
            lr: 1e-3,
            lr_decay: 0.96,
            lr_interval: 1000,
            optimizer: OptimizerKind::Sgd,
            eval_interval: 100,
            eval_batch: 100,
            train_limit: None,
            test_limit: None,
            multi_train: 60_000,
            multi_test: 10_000,
            checkpoint_interval: 0,
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.routing.validate()?;
        self.margin.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("w_steps", self.w_steps),
            ("lr_interval", self.lr_interval),
            ("eval_interval", self.eval_interval),
            ("eval_batch", self.eval_batch),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("train.{name} must be >= 1")));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "train.lr must be >= 0, got {}",
                self.lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "train.lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if !(self.recon_weight >= 0.0 && self.recon_weight.is_finite()) {
            return Err(Error::Config(format!(
                "recon_weight must be >= 0, got {}",
                self.recon_weight
            )));
        }
        Ok(())
    }
}

/// `lr₀ · factor^⌊iteration / interval⌋`
pub fn lr_schedule(iteration: usize, lr0: f64, factor: f64, interval: usize) -> f64 {
    lr0 * factor.powi((iteration / interval.max(1)) as i32)
}

/// Loss value and weight gradients for one batch.
pub struct LossEval<T> {
    pub loss: T,
    pub margin: T,
    pub recon: T,
    pub grads: CapsNetParams<T>,
    pub lengths: Tensor<T>,
}

/// Margin loss (+ weighted reconstruction loss when the model has a decoder)
/// and its gradient w.r.t. every weight tensor. B is read, never written.
pub fn loss_and_grads<T: Scalar>(
    params: &CapsNetParams<T>,
    cfg: &ModelConfig,
    images: &Tensor<T>,
    labels: &[LabelSet],
    route: RouteWith<'_, T>,
    margin: &MarginConfig,
    recon_weight: f64,
) -> Result<LossEval<T>> {
    let trace = forward(images, params, cfg, route)?;
    let targets = delta_signs(labels, cfg.classes)?.targets::<T>();
    let s = trace.output();
    let margin_value = margin_loss(trace.lengths(), &targets, margin)?;
    let mut ds = margin_loss_grad(trace.lengths(), s, &targets, margin)?;
    let mut grads = params.zeros_like();
    let mut recon_value = T::zero();
    if params.recon.is_some() {
        let r = reconstruct(s, labels, params)?;
        let p = images.shape()[0];
        let target = images.clone().reshape(&[p, images.len() / p])?;
        recon_value = recon_loss(&r.output, &target, recon_weight)?;
        let dr = recon_loss_grad(&r.output, &target, recon_weight)?;
        let ds_recon = reconstruct_backward(s, labels, params, &r, &dr, &mut grads)?;
        ds.axpy(T::one(), &ds_recon)?;
    }
    backward(&trace, params, cfg, route, &ds, &mut grads)?;
    let loss = margin_value + recon_value;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(LossEval {
        loss,
        margin: margin_value,
        recon: recon_value,
        grads,
        lengths: trace.digits.lengths,
    })
}

/// First-order optimiser over the weight tensors (B is never touched here).
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam {
        m: Vec<Tensor<f32>>,
        v: Vec<Tensor<f32>>,
        t: i32,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &CapsNetParams<f32>) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => {
                let zeros: Vec<Tensor<f32>> = params
                    .weight_tensors()
                    .iter()
                    .map(|(_, t)| Tensor::zeros_like(t))
                    .collect();
                Optimizer::Adam {
                    m: zeros.clone(),
                    v: zeros,
                    t: 0,
                }
            }
        }
    }

    pub fn step(
        &mut self,
        params: &mut CapsNetParams<f32>,
        grads: &CapsNetParams<f32>,
        lr: f64,
    ) -> Result<()> {
        let grads = grads.weight_tensors();
        let targets = params.weight_tensors_mut();
        match self {
            Optimizer::Sgd => {
                for (w, (_, g)) in targets.into_iter().zip(&grads) {
                    w.axpy(-(lr as f32), g)?;
                }
            }
            Optimizer::Adam { m, v, t } => {
                const B1: f32 = 0.9;
                const B2: f32 = 0.999;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                for (((w, (_, g)), mi), vi) in targets.into_iter().zip(&grads).zip(m).zip(v) {
                    for (((x, &gx), mx), vx) in w
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(mi.data_mut())
                        .zip(vi.data_mut())
                    {
                        *mx = B1 * *mx + (1.0 - B1) * gx;
                        *vx = B2 * *vx + (1.0 - B2) * gx * gx;
                        *x -= lr as f32 * (*mx / c1) / ((*vx / c2).sqrt() + 1e-8);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Mutable state of one training run.
pub struct TrainState {
    pub params: CapsNetParams<f32>,
    pub optimizer: Optimizer,
    pub iteration: usize,
    /// ‖B‖∞ at initialisation, for the divergence guard.
    pub b_init_max: f64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, model: &ModelConfig) -> Result<Self> {
        let seeds = SeedStream::new(cfg.seed);
        let params = CapsNetParams::init(model, cfg.routing.mode.uses_coefficients(), seeds)?;
        Ok(Self::from_params(cfg, params))
    }

    pub fn from_params(cfg: &TrainConfig, params: CapsNetParams<f32>) -> Self {
        let b_init_max = params
            .coefficients
            .as_ref()
            .map_or(0.0, |b| b.tensor().max_abs() as f64);
        TrainState {
            optimizer: Optimizer::new(cfg.optimizer, &params),
            params,
            iteration: 0,
            b_init_max,
        }
    }
}

/// Routing selection for the current parameters.
pub fn route_for<'a>(
    params: &'a CapsNetParams<f32>,
    routing: &RoutingConfig,
) -> Result<RouteWith<'a, f32>> {
    match routing.mode {
        RoutingMode::Dynamic => Ok(RouteWith::Dynamic {
            iters: routing.dynamic_iters,
        }),
        _ => params
            .coefficients
            .as_ref()
            .map(RouteWith::Coefficients)
            .ok_or_else(|| {
                Error::Config(format!(
                    "routing mode {} needs coefficients B",
                    routing.mode
                ))
            }),
    }
}

/// One outer iteration on `batch`: `w_steps` descent steps on the weights with
/// B frozen, then `routing.steps` ascent steps on B with the weights frozen.
/// Returns the loss before the first weight update.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    model: &ModelConfig,
) -> Result<f32> {
    let loss = weight_step(state, batch, cfg, model)?;
    routing_step(state, batch, cfg, model)?;
    state.iteration += 1;
    Ok(loss)
}

/// The descent half of an iteration; B is not touched.
pub fn weight_step(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    model: &ModelConfig,
) -> Result<f32> {
    let lr = lr_schedule(state.iteration, cfg.lr, cfg.lr_decay, cfg.lr_interval);
    let mut first_loss = None;
    for _ in 0..cfg.w_steps {
        let eval = {
            let route = route_for(&state.params, &cfg.routing)?;
            loss_and_grads(
                &state.params,
                model,
                &batch.images,
                &batch.labels,
                route,
                &cfg.margin,
                cfg.recon_weight,
            )?
        };
        first_loss.get_or_insert(eval.loss);
        state.optimizer.step(&mut state.params, &eval.grads, lr)?;
    }
    if !state.params.is_finite() {
        return Err(Error::NonFinite("weight update"));
    }
    Ok(first_loss.expect("w_steps >= 1"))
}

/// The ascent half of an iteration: `routing.steps` updates of B on the
/// batch's projections. Weights are not touched; no-op in dr/none modes.
pub fn routing_step(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    model: &ModelConfig,
) -> Result<()> {
    let r = &cfg.routing;
    if !matches!(r.mode, RoutingMode::L2 | RoutingMode::L1) || r.steps == 0 {
        return Ok(());
    }
    let b = state
        .params
        .coefficients
        .as_ref()
        .expect("coefficient mode");
    let trace = forward(
        &batch.images,
        &state.params,
        model,
        RouteWith::Coefficients(b),
    )?;
    let signs = delta_signs(&batch.labels, model.classes)?;
    let mut b = b.clone();
    for _ in 0..r.steps {
        b = match r.mode {
            RoutingMode::L2 => update_l2(&b, &trace.projected, &signs, r.lambda, r.gamma)?,
            _ => update_l1(&b, &trace.projected, &signs, r.lambda, r.gamma)?,
        };
    }
    let max = b.tensor().max_abs() as f64;
    if state.b_init_max > 0.0 && max > DIVERGENCE_FACTOR * state.b_init_max {
        return Err(Error::Divergence(format!(
            "max |b| grew from {:.3e} to {max:.3e} at iteration {}; reduce routing.gamma",
            state.b_init_max, state.iteration
        )));
    }
    state.params.coefficients = Some(b);
    Ok(())
}

/// Predicted class set: argmax length, or the `k` longest capsules.
pub fn predict(lengths: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| lengths[b].total_cmp(&lengths[a]).then(a.cmp(&b)));
    let mut top: Vec<usize> = order.into_iter().take(k).collect();
    top.sort_unstable();
    top
}

/// Percentage of items whose predicted class set differs from the label set.
/// Single-label items use the argmax; two-label items the two longest capsules.
pub fn error_rate(lengths: &Tensor<f32>, labels: &[LabelSet]) -> Result<f64> {
    if lengths.rank() != 2 || lengths.shape()[0] != labels.len() {
        return Err(Error::dim(
            "error_rate",
            format!("{:?} vs {} labels", lengths.shape(), labels.len()),
        ));
    }
    let nd = lengths.shape()[1];
    let wrong = labels
        .iter()
        .zip(lengths.data().chunks_exact(nd))
        .filter(|(l, row)| predict(row, l.len()) != l.iter().collect::<Vec<_>>())
        .count();
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

/// Test error (%) of the current parameters on `split`.
pub fn evaluate(
    params: &CapsNetParams<f32>,
    model: &ModelConfig,
    routing: &RoutingConfig,
    split: &DatasetSplit,
    batch_size: usize,
) -> Result<f64> {
    let route = route_for(params, routing)?;
    let mut all = Vec::with_capacity(split.len() * model.classes);
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = split.gather(chunk)?;
        let trace = forward(&batch.images, params, model, route)?;
        all.extend_from_slice(trace.lengths().data());
    }
    let lengths = Tensor::new(&[split.len(), model.classes], all)?;
    error_rate(&lengths, split.labels())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub loss: f64,
    pub eval_error_pct: f64,
    pub sec_per_100: Option<f64>,
    pub b_sparsity: Option<f64>,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        let mut s = format!(
            "{},{:.6},{:.4},",
            self.iteration, self.loss, self.eval_error_pct
        );
        if let Some(t) = self.sec_per_100 {
            let _ = write!(s, "{t:.3}");
        }
        s.push(',');
        if let Some(b) = self.b_sparsity {
            let _ = write!(s, "{b:.6}");
        }
        s
    }
}

/// Input geometry taken from the data; architecture from the config.
pub fn model_for(cfg: &TrainConfig, split: &DatasetSplit) -> ModelConfig {
    let [c, h, w] = split.image_shape();
    ModelConfig {
        in_channels: c,
        height: h,
        width: w,
        ..cfg.model.clone()
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub model: ModelConfig,
    pub rows: Vec<MetricsRow>,
}

/// Runs `cfg.iterations` iterations, evaluating every `eval_interval`.
/// `on_row` sees each metrics row as soon as it is produced; `on_checkpoint`
/// is called every `checkpoint_interval` iterations (if non-zero).
pub fn train(
    cfg: &TrainConfig,
    train_split: &DatasetSplit,
    test_split: &DatasetSplit,
    mut on_row: impl FnMut(&MetricsRow) -> Result<()>,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = model_for(cfg, train_split);
    model.validate()?;
    if test_split.image_shape() != train_split.image_shape() {
        return Err(Error::Data("train and test image shapes differ".into()));
    }
    let mut state = TrainState::new(cfg, &model)?;
    let mut stream = BatchStream::new(
        train_split,
        cfg.batch_size,
        SeedStream::new(cfg.seed).split("batches"),
    )?;
    let mut rows = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut window = Instant::now();
    while state.iteration < cfg.iterations {
        let batch = stream.next().expect("endless stream");
        loss_sum += train_step(&mut state, &batch, cfg, &model)? as f64;
        loss_count += 1;
        let it = state.iteration;
        if it % cfg.eval_interval == 0 || it == cfg.iterations {
            let elapsed = window.elapsed().as_secs_f64();
            let eval_error_pct = evaluate(
                &state.params,
                &model,
                &cfg.routing,
                test_split,
                cfg.eval_batch,
            )?;
            let row = MetricsRow {
                iteration: it,
                loss: loss_sum / loss_count as f64,
                eval_error_pct,
                sec_per_100: (!cfg.deterministic).then(|| elapsed * 100.0 / loss_count as f64),
                b_sparsity: state
                    .params
                    .coefficients
                    .as_ref()
                    .map(|b| b.sparsity(SPARSITY_THRESHOLD)),
            };
            on_row(&row)?;
            rows.push(row);
            loss_sum = 0.0;
            loss_count = 0;
            window = Instant::now();
        }
        if cfg.checkpoint_interval > 0 && it % cfg.checkpoint_interval == 0 {
            on_checkpoint(&state)?;
        }
    }
    Ok(TrainOutcome { state, model, rows })
}
