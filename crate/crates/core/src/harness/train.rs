use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::data::{flip_horizontal, Sample};
use crate::convdet::{make_anchor_grid, AnchorGrid};
use crate::error::{Error, Result};
use crate::loss::{assign_anchors, total_loss, LossBreakdown, LossWeights};
use crate::network::{bind_params, forward_tape, init_weights, ModelSpec, WeightStore};
use crate::tensor::{lr_schedule, SgdMomentum, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_step: usize,
    pub momentum: f64,
    pub loss_weights: LossWeights,
    pub flip: bool,
    /// Rescales the full gradient to at most this L2 norm.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 20,
            max_steps: 2000,
            lr0: 0.01,
            decay_factor: 0.5,
            decay_step: 10_000,
            momentum: 0.9,
            loss_weights: LossWeights::default(),
            flip: false,
            max_grad_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: &str = "step,lr,bbox,conf_pos,conf_neg,class,total";

impl LogRow {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.lr, l.bbox, l.conf_pos, l.conf_neg, l.class, l.total
        )
    }
}

pub fn write_log(rows: &[LogRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub weights: WeightStore,
    pub log: Vec<LogRow>,
}

/// Grid for an input resolution, checked against the model's head.
pub fn anchor_grid_for(model: &ModelSpec, h: usize, w: usize) -> Result<AnchorGrid> {
    if !model.has_head() {
        return Err(Error::Spec("missing head: model has no convdet layer".into()));
    }
    let (gw, gh) = model.grid_size(h, w)?;
    make_anchor_grid(&model.detector, gw, gh, w as f64, h as f64)
}

/// One loss evaluation and backward pass; returns the breakdown and the
/// gradients in weight-store order.
pub fn loss_and_grads(
    model: &ModelSpec,
    weights: &WeightStore,
    batch: &[(Tensor, crate::loss::GroundTruth)],
    grid: &AnchorGrid,
    loss_weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let images: Vec<Tensor> = batch.iter().map(|(i, _)| i.clone()).collect();
    let assignments = batch
        .iter()
        .map(|(_, g)| assign_anchors(g, grid))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let params = bind_params(&mut tape, weights, true);
    let x = tape.constant(Tensor::stack(&images)?);
    let out = forward_tape(&mut tape, model, &params, x)?;
    let head = out.head.ok_or_else(|| Error::Spec("missing head".into()))?;
    let loss = total_loss(&mut tape, head, &assignments, grid, &model.detector, loss_weights)?;
    tape.backward(loss.total)?;
    let grads = params
        .values()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();
    Ok((loss.breakdown, grads))
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// assign → forward → loss → backward → momentum SGD, for `max_steps` steps.
/// `on_step` sees each log row as it is produced.
pub fn train(
    model: &ModelSpec,
    data: &[Sample],
    config: &TrainConfig,
    init: Option<WeightStore>,
    mut on_step: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    if config.batch_size == 0 || config.max_steps == 0 {
        return Err(Error::InvalidArgument("batch size and steps must be positive".into()));
    }
    let first = data.first().ok_or_else(|| Error::Dataset("empty dataset".into()))?;
    let [_, _, h, w] = first.image.dims4()?;
    if data.iter().any(|s| s.image.shape() != first.image.shape()) {
        return Err(Error::Dataset("all images must share one resolution".into()));
    }
    let grid = anchor_grid_for(model, h, w)?;
    let mut weights = match init {
        Some(ws) => {
            ws.check_against(model)?;
            ws
        }
        None => init_weights(model, config.seed),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = SgdMomentum::new(&weights.tensors().cloned().collect::<Vec<_>>(), config.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(config.max_steps);

    for step in 0..config.max_steps {
        let picks: Vec<usize> = if config.batch_size >= data.len() {
            (0..data.len()).collect()
        } else {
            (0..config.batch_size)
                .map(|_| {
                    if cursor == order.len() {
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    cursor += 1;
                    order[cursor - 1]
                })
                .collect()
        };
        let batch = picks
            .iter()
            .map(|&i| {
                let s = &data[i];
                if config.flip && rng.random_bool(0.5) {
                    flip_horizontal(&s.image, &s.gts)
                } else {
                    Ok((s.image.clone(), s.gts.clone()))
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let lr = lr_schedule(step, config.lr0, config.decay_factor, config.decay_step);
        let (loss, mut grads) = match loss_and_grads(model, &weights, &batch, &grid, &config.loss_weights) {
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step }),
            other => other?,
        };
        if !loss.total.is_finite() {
            return Err(Error::Diverged { step });
        }
        let row = LogRow { step, lr, loss };
        on_step(&row);
        log.push(row);
        if let Some(max) = config.max_grad_norm {
            clip(&mut grads, max);
        }
        let mut params: Vec<Tensor> = weights.tensors().cloned().collect();
        opt.step(&mut params, &grads, lr)?;
        for (dst, src) in weights.tensors_mut().zip(params) {
            *dst = src;
        }
    }
    Ok(TrainOutcome { weights, log })
}
