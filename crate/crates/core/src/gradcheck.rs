//! Finite-difference verification of the tape's analytic gradients for the
//! attention modules, the pair scorer and the contact loss.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{cross_attend, spatial_scores, CrossAttentionParams, SpatialAttentionParams};
use crate::error::{Error, Result};
use crate::head::{contact_loss, ContactLabel, ContactModel, HeadConfig, TriState, NUM_STATES};
use crate::init::normal;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradCheckTarget {
    CrossAttend,
    SpatialScores,
    PairScore,
    ContactLoss,
    /// `contact_loss(pair_score(H, U), label)` end to end.
    PairLoss,
}

impl GradCheckTarget {
    pub const ALL: [GradCheckTarget; 5] = [
        GradCheckTarget::CrossAttend,
        GradCheckTarget::SpatialScores,
        GradCheckTarget::PairScore,
        GradCheckTarget::ContactLoss,
        GradCheckTarget::PairLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradCheckTarget::CrossAttend => "cross_attend",
            GradCheckTarget::SpatialScores => "spatial_scores",
            GradCheckTarget::PairScore => "pair_score",
            GradCheckTarget::ContactLoss => "contact_loss",
            GradCheckTarget::PairLoss => "pair_loss",
        }
    }
}

impl fmt::Display for GradCheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradCheckTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown grad-check module `{s}`")))
    }
}

/// Shapes `(n, d)` cycled through by successive trials.
pub const TRIAL_SHAPES: [(usize, usize); 5] = [(4, 8), (3, 4), (5, 6), (2, 8), (6, 2)];

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub targets: Vec<GradCheckTarget>,
    pub trials: usize,
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    /// Magnitude below which errors are measured absolutely rather than
    /// relative to the gradient.
    pub floor: f64,
    pub maps: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            targets: GradCheckTarget::ALL.to_vec(),
            trials: TRIAL_SHAPES.len(),
            tolerance: 1e-4,
            step: 1e-5,
            floor: 1e-6,
            maps: 3,
            seed: 0,
        }
    }
}

/// Worst element of one checked tensor.
#[derive(Debug, Clone, Serialize)]
pub struct TensorReport {
    pub target: GradCheckTarget,
    pub trial: usize,
    pub shape_nd: (usize, usize),
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn max_rel_err_for(&self, target: GradCheckTarget) -> f64 {
        self.tensors
            .iter()
            .filter(|t| t.target == target)
            .map(|t| t.rel_err)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorReport> {
        self.tensors.iter().filter(|t| !(t.rel_err < self.tolerance))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

type Objective<'a> = dyn Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var> + 'a;

struct Case<'a> {
    target: GradCheckTarget,
    trial: usize,
    shape_nd: (usize, usize),
    store: ParamStore,
    inputs: Vec<(String, Tensor)>,
    objective: Box<Objective<'a>>,
}

impl Case<'_> {
    fn eval(&self, store: &ParamStore, inputs: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (self.objective)(&mut tape, store, &vars)?;
        tape.value(out)
            .item()
            .ok_or_else(|| Error::Contract("objective must be scalar".into()))
    }

    fn run(mut self, cfg: &GradCheckConfig) -> Result<Vec<TensorReport>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|(_, t)| tape.input(t.clone())).collect();
        let out = (self.objective)(&mut tape, &self.store, &vars)?;
        let grads = tape.backward(out)?;

        let mut analytic: Vec<(String, Option<crate::tensor::ParamId>, Tensor)> = Vec::new();
        for ((name, t), &v) in self.inputs.iter().zip(&vars) {
            let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            analytic.push((name.clone(), None, g));
        }
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let p = self.store.get(id);
            if p.is_frozen() {
                continue;
            }
            let v = tape.param(&self.store, id);
            let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value().shape()));
            analytic.push((p.name().to_string(), Some(id), g));
        }
        drop(tape);

        let h = cfg.step;
        let mut reports = Vec::with_capacity(analytic.len());
        let inputs: Vec<Tensor> = self.inputs.iter().map(|(_, t)| t.clone()).collect();
        for (input_idx, (name, pid, grad)) in analytic.into_iter().enumerate() {
            let mut worst = TensorReport {
                target: self.target,
                trial: self.trial,
                shape_nd: self.shape_nd,
                tensor: name,
                index: 0,
                analytic: 0.0,
                numeric: 0.0,
                rel_err: 0.0,
            };
            for j in 0..grad.numel() {
                let numeric = match pid {
                    None => {
                        let mut plus = inputs.clone();
                        plus[input_idx].data_mut()[j] += h;
                        let mut minus = inputs.clone();
                        minus[input_idx].data_mut()[j] -= h;
                        (self.eval(&self.store, &plus)? - self.eval(&self.store, &minus)?) / (2.0 * h)
                    }
                    Some(id) => {
                        let orig = self.store.get(id).value().data()[j];
                        self.store.get_mut(id).value_mut().data_mut()[j] = orig + h;
                        let fp = self.eval(&self.store, &inputs)?;
                        self.store.get_mut(id).value_mut().data_mut()[j] = orig - h;
                        let fm = self.eval(&self.store, &inputs)?;
                        self.store.get_mut(id).value_mut().data_mut()[j] = orig;
                        (fp - fm) / (2.0 * h)
                    }
                };
                let a = grad.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
                if !(rel <= worst.rel_err) {
                    worst.index = j;
                    worst.analytic = a;
                    worst.numeric = numeric;
                    worst.rel_err = rel;
                }
            }
            reports.push(worst);
        }
        Ok(reports)
    }
}

fn random_label(rng: &mut ChaCha8Rng) -> ContactLabel {
    let mut states = [TriState::No; NUM_STATES];
    for s in &mut states {
        *s = match rng.random_range(0..3) {
            0 => TriState::Yes,
            1 => TriState::No,
            _ => TriState::Unsure,
        };
    }
    // keep at least one active term
    states[rng.random_range(0..NUM_STATES)] = TriState::from_bool(rng.random_bool(0.5));
    ContactLabel::new(states)
}

/// Redraws every parameter so attention weights are far from uniform.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        let shape = p.value().shape().to_vec();
        let fresh = normal(rng, &shape, 0.5);
        let is_scale = p.name().ends_with("gn_scale");
        let v = p.value_mut();
        for (dst, src) in v.data_mut().iter_mut().zip(fresh.data()) {
            *dst = if is_scale { 1.0 + src } else { *src };
        }
    }
}

fn projection(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    normal(rng, shape, 1.0)
}

fn project(tape: &mut Tape, out: Var, dir: &Tensor) -> Result<Var> {
    let w = tape.constant(dir.clone());
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

fn build_case(target: GradCheckTarget, trial: usize, cfg: &GradCheckConfig) -> Result<Case<'static>> {
    let (n, d) = TRIAL_SHAPES[trial % TRIAL_SHAPES.len()];
    let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(trial as u64 * 97 + target as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = (d / 2).max(1);
    let hand = normal(&mut rng, &[n, d], 1.0);
    let union = normal(&mut rng, &[n, d], 1.0);
    let mut store = ParamStore::new();

    let (inputs, objective): (Vec<(String, Tensor)>, Box<Objective<'static>>) = match target {
        GradCheckTarget::CrossAttend => {
            let params = CrossAttentionParams::register(&mut store, "cross", d, groups, true, &mut rng)?;
            let dir = projection(&mut rng, &[n, d]);
            (
                vec![("H".into(), hand), ("U".into(), union)],
                Box::new(move |tape, store, v| {
                    let out = cross_attend(tape, store, &params, v[0], v[1])?;
                    project(tape, out, &dir)
                }),
            )
        }
        GradCheckTarget::SpatialScores => {
            let params = SpatialAttentionParams::register(&mut store, "spatial", d, cfg.maps, &mut rng)?;
            let dir = projection(&mut rng, &[NUM_STATES]);
            (
                vec![("U".into(), union)],
                Box::new(move |tape, store, v| {
                    let out = spatial_scores(tape, store, &params, v[0])?;
                    project(tape, out, &dir)
                }),
            )
        }
        GradCheckTarget::ContactLoss => {
            let logits = normal(&mut rng, &[NUM_STATES], 2.0);
            let label = random_label(&mut rng);
            (
                vec![("logits".into(), logits)],
                Box::new(move |tape, _, v| contact_loss(tape, v[0], &label, 1.0)),
            )
        }
        GradCheckTarget::PairScore | GradCheckTarget::PairLoss => {
            let model = ContactModel::new(HeadConfig {
                n,
                d,
                fc_width: 8,
                gn_groups: groups,
                maps: cfg.maps,
                seed,
                ..HeadConfig::default()
            })?;
            store = model.store().clone();
            let dir = projection(&mut rng, &[NUM_STATES]);
            let label = random_label(&mut rng);
            let with_loss = target == GradCheckTarget::PairLoss;
            (
                vec![("H".into(), hand), ("U".into(), union)],
                Box::new(move |tape, store, v| {
                    let mut m = model.clone();
                    *m.store_mut() = store.clone();
                    let s = m.pair_score(tape, v[0], v[1])?;
                    if with_loss {
                        contact_loss(tape, s, &label, 1.0)
                    } else {
                        project(tape, s, &dir)
                    }
                }),
            )
        }
    };
    randomize(&mut store, &mut rng);
    Ok(Case {
        target,
        trial,
        shape_nd: (n, d),
        store,
        inputs,
        objective,
    })
}

/// Runs every selected target over `trials` seeded shapes.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(cfg.tolerance > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {}", cfg.tolerance)));
    }
    if cfg.trials == 0 {
        return Err(Error::Config("at least one grad-check trial is required".into()));
    }
    let mut tensors = Vec::new();
    for &target in &cfg.targets {
        for trial in 0..cfg.trials {
            tensors.extend(build_case(target, trial, cfg)?.run(cfg)?);
        }
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        tensors,
    })
}
