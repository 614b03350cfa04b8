//! SGD training of the contact head with plateau-based learning-rate decay.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{DEFAULT_GN_GROUPS, DEFAULT_MAPS};
use crate::error::{Error, Result};
use crate::features::Example;
use crate::head::{contact_loss, predict, ContactLogits, ContactModel, ContactState, HeadConfig, DEFAULT_FC_WIDTH, NUM_STATES};
use crate::tensor::{bce_with_logits, sgd_step, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_steps: usize,
    /// Steps without held-out improvement before the learning rate decays.
    pub plateau_patience: usize,
    pub min_delta: f64,
    pub lr_decay: f64,
    pub eval_every: usize,
    pub holdout_fraction: f64,
    pub lambda: f64,
    pub ablate_cross: bool,
    pub ablate_spatial: bool,
    pub fc_width: usize,
    pub gn_groups: usize,
    pub maps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch: 1,
            max_steps: 5000,
            plateau_patience: 500,
            min_delta: 1e-4,
            lr_decay: 0.1,
            eval_every: 250,
            holdout_fraction: 0.1,
            lambda: 1.0,
            ablate_cross: false,
            ablate_spatial: false,
            fc_width: DEFAULT_FC_WIDTH,
            gn_groups: DEFAULT_GN_GROUPS,
            maps: DEFAULT_MAPS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {} must be finite and non-negative", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::Config(format!("lr_decay = {} must lie in (0, 1)", self.lr_decay)));
        }
        if self.batch == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch and eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout_fraction = {} must lie in [0, 1)",
                self.holdout_fraction
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda = {} must be non-negative", self.lambda)));
        }
        Ok(())
    }

    pub fn head_config(&self, n: usize, d: usize) -> HeadConfig {
        HeadConfig {
            n,
            d,
            fc_width: self.fc_width,
            gn_groups: self.gn_groups,
            maps: self.maps,
            use_cross: !self.ablate_cross,
            use_spatial: !self.ablate_spatial,
            learn_gn_affine: true,
            seed: self.seed,
        }
    }
}

/// Held-out loss and per-state accuracy at threshold 0.5. Unsure labels are
/// excluded from both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: [Option<f64>; NUM_STATES],
}

impl Metrics {
    pub fn min_accuracy(&self) -> Option<f64> {
        self.accuracy.iter().flatten().copied().reduce(f64::min)
    }
}

pub fn evaluate(model: &ContactModel, examples: &[Example], lambda: f64) -> Result<Metrics> {
    let mut loss = 0.0;
    let mut correct = [0usize; NUM_STATES];
    let mut total = [0usize; NUM_STATES];
    for ex in examples {
        let logits = model.infer(&ex.hand, &ex.unions)?;
        let probs = predict(&logits);
        for s in ContactState::ALL {
            let i = s.index();
            if let Some(t) = ex.label.get(s).target() {
                loss += lambda * bce_with_logits(logits.0[i], t);
                total[i] += 1;
                if (probs[i] > 0.5) == (t > 0.5) {
                    correct[i] += 1;
                }
            }
        }
    }
    let n = examples.len().max(1) as f64;
    Ok(Metrics {
        loss: loss / n,
        accuracy: std::array::from_fn(|i| (total[i] > 0).then(|| correct[i] as f64 / total[i] as f64)),
    })
}

/// One line of the metric trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout: Option<Metrics>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: usize,
    pub final_lr: f64,
    pub trace: Vec<TraceRecord>,
    pub heldout: Option<Metrics>,
}

impl TrainReport {
    /// Mean training loss over the last `window` steps.
    pub fn trailing_loss(&self, window: usize) -> f64 {
        let tail = &self.trace[self.trace.len().saturating_sub(window)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Seeded shuffle split into (train, held-out) indices.
pub fn split_holdout(len: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    idx.shuffle(&mut rng);
    let held = ((len as f64) * fraction).round() as usize;
    let train = idx.split_off(held);
    (train, idx)
}

fn check_example(model: &ContactModel, ex: &Example) -> Result<()> {
    let cfg = model.config();
    let expect = [cfg.n, cfg.d];
    for m in std::iter::once(&ex.hand).chain(&ex.unions) {
        if m.tensor().shape() != expect {
            return Err(Error::dim("example features", m.tensor().shape(), &expect));
        }
    }
    Ok(())
}

/// Forward and backward for one example; returns the loss.
pub fn accumulate_example(model: &mut ContactModel, ex: &Example, lambda: f64, scale: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, &ex.hand, &ex.unions)?;
    let loss = contact_loss(&mut tape, logits, &ex.label, lambda * scale)?;
    let value = tape.value(loss).item().expect("scalar loss") / scale;
    tape.backward_into(loss, model.store_mut())?;
    Ok(value)
}

/// Runs SGD over `train`, evaluating on `heldout` every `eval_every` steps
/// and once at the end. Trace records are also streamed to `sink`.
pub fn train(
    model: &mut ContactModel,
    train: &[Example],
    heldout: &[Example],
    cfg: &TrainConfig,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    for ex in train.iter().chain(heldout) {
        check_example(model, ex)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut lr = cfg.lr;
    let mut best = f64::INFINITY;
    let mut last_improvement = 0;
    let mut trace = Vec::with_capacity(cfg.max_steps);
    let mut heldout_metrics = None;
    let scale = 1.0 / cfg.batch as f64;

    let mut emit = |rec: TraceRecord, trace: &mut Vec<TraceRecord>| -> Result<()> {
        if let Some(w) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        trace.push(rec);
        Ok(())
    };

    for step in 0..cfg.max_steps {
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            loss += accumulate_example(model, &train[order[cursor]], cfg.lambda, scale).map_err(|e| diverged(e, step))? * scale;
            cursor += 1;
        }
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        sgd_step(model.store_mut(), lr)?;

        let done = step + 1;
        let eval_now = !heldout.is_empty() && (done % cfg.eval_every == 0 || done == cfg.max_steps);
        let metrics = if eval_now {
            let m = evaluate(model, heldout, cfg.lambda).map_err(|e| diverged(e, step))?;
            if !m.loss.is_finite() {
                return Err(Error::Divergence { step, loss: m.loss });
            }
            if m.loss < best - cfg.min_delta {
                best = m.loss;
                last_improvement = done;
            } else if done - last_improvement >= cfg.plateau_patience {
                lr *= cfg.lr_decay;
                last_improvement = done;
                log::info!("step {done}: held-out loss plateaued at {:.5}; lr -> {lr:e}", m.loss);
            }
            log::debug!("step {done}: held-out loss {:.5}, accuracy {:?}", m.loss, m.accuracy);
            heldout_metrics = Some(m);
            Some(m)
        } else {
            None
        };
        emit(
            TraceRecord {
                step: done,
                lr,
                loss,
                heldout: metrics,
            },
            &mut trace,
        )?;
    }
    Ok(TrainReport {
        steps: cfg.max_steps,
        final_lr: lr,
        trace,
        heldout: heldout_metrics,
    })
}

fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(_) => Error::Divergence { step, loss: f64::NAN },
        e => e,
    }
}

/// Builds a model sized for `examples`, splits off a held-out set and trains.
pub fn fit(examples: &[Example], cfg: &TrainConfig, sink: Option<&mut dyn Write>) -> Result<(ContactModel, TrainReport)> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Contract("training set is empty".into()))?;
    let mut model = ContactModel::new(cfg.head_config(first.hand.n(), first.hand.d()))?;
    let (tr, ho) = split_holdout(examples.len(), cfg.holdout_fraction, cfg.seed);
    let tr: Vec<Example> = tr.into_iter().map(|i| examples[i].clone()).collect();
    let ho: Vec<Example> = ho.into_iter().map(|i| examples[i].clone()).collect();
    let report = train(&mut model, &tr, &ho, cfg, sink)?;
    Ok((model, report))
}

/// Probabilities for one example.
pub fn probabilities(model: &ContactModel, ex: &Example) -> Result<[f64; NUM_STATES]> {
    let logits: ContactLogits = model.infer(&ex.hand, &ex.unions)?;
    Ok(predict(&logits))
}
