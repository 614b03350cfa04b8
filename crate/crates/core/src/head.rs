//! Contact-estimation head: per hand-object pair scoring, max combination
//! over pairs, and the masked multi-label loss.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_attend, spatial_scores, CrossAttentionParams, FeatureMap, SpatialAttentionParams,
    DEFAULT_GN_GROUPS, DEFAULT_MAPS,
};
use crate::error::{Error, Result};
use crate::init::he_normal;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const NUM_STATES: usize = 4;
pub const DEFAULT_FC_WIDTH: usize = 1024;

/// The four contact states, in logit order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContactState {
    NoContact = 0,
    SelfContact = 1,
    OtherPerson = 2,
    Object = 3,
}

impl ContactState {
    pub const ALL: [ContactState; NUM_STATES] = [
        ContactState::NoContact,
        ContactState::SelfContact,
        ContactState::OtherPerson,
        ContactState::Object,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ContactState::NoContact => "no_contact",
            ContactState::SelfContact => "self_contact",
            ContactState::OtherPerson => "other_person_contact",
            ContactState::Object => "object_contact",
        }
    }
}

/// Annotator answer for one contact state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriState {
    Yes,
    No,
    Unsure,
}

impl TriState {
    /// BCE target, or `None` when the state is masked.
    pub fn target(self) -> Option<f64> {
        match self {
            TriState::Yes => Some(1.0),
            TriState::No => Some(0.0),
            TriState::Unsure => None,
        }
    }

    pub fn from_bool(yes: bool) -> Self {
        if yes {
            TriState::Yes
        } else {
            TriState::No
        }
    }
}

impl FromStr for TriState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "yes" => Ok(TriState::Yes),
            "no" => Ok(TriState::No),
            "unsure" => Ok(TriState::Unsure),
            other => Err(Error::Contract(format!(
                "contact label must be yes/no/unsure, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for TriState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TriState::Yes => "yes",
            TriState::No => "no",
            TriState::Unsure => "unsure",
        })
    }
}

/// Per-state tri-state labels of one hand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContactLabel {
    pub states: [TriState; NUM_STATES],
}

impl ContactLabel {
    pub fn new(states: [TriState; NUM_STATES]) -> Self {
        Self { states }
    }

    pub fn all(state: TriState) -> Self {
        Self {
            states: [state; NUM_STATES],
        }
    }

    pub fn get(&self, state: ContactState) -> TriState {
        self.states[state.index()]
    }

    pub fn targets(&self) -> [Option<f64>; NUM_STATES] {
        self.states.map(TriState::target)
    }
}

/// Raw scores for the four contact states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactLogits(pub [f64; NUM_STATES]);

impl ContactLogits {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let values: [f64; NUM_STATES] = t
            .data()
            .try_into()
            .map_err(|_| Error::dim("contact_logits", t.shape(), &[NUM_STATES]))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite contact logits {values:?}")));
        }
        Ok(Self(values))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[NUM_STATES], self.0.to_vec()).expect("length 4")
    }
}

/// Element-wise maximum over the per-pair scores of one hand.
pub fn combine(scores: &[ContactLogits]) -> Result<ContactLogits> {
    let (first, rest) = scores
        .split_first()
        .ok_or_else(|| Error::Contract("cannot combine an empty list of pair scores".into()))?;
    let mut out = first.0;
    for s in rest {
        for (o, &v) in out.iter_mut().zip(&s.0) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(ContactLogits(out))
}

/// Independent per-state probabilities.
pub fn predict(logits: &ContactLogits) -> [f64; NUM_STATES] {
    logits.0.map(crate::tensor::sigmoid)
}

/// `λ · Σ_i BCE(logit_i, label_i)` over states not labelled Unsure.
pub fn contact_loss(tape: &mut Tape, logits: Var, label: &ContactLabel, lambda: f64) -> Result<Var> {
    let raw = tape.bce_with_logits(logits, &label.targets())?;
    Ok(if lambda == 1.0 { raw } else { tape.scale(raw, lambda) })
}

/// Architecture of the head. Serialised into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Spatial locations per region (`h·w`).
    pub n: usize,
    /// Channels per location.
    pub d: usize,
    pub fc_width: usize,
    pub gn_groups: usize,
    pub maps: usize,
    pub use_cross: bool,
    pub use_spatial: bool,
    pub learn_gn_affine: bool,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            n: 49,
            d: 256,
            fc_width: DEFAULT_FC_WIDTH,
            gn_groups: DEFAULT_GN_GROUPS,
            maps: DEFAULT_MAPS,
            use_cross: true,
            use_spatial: true,
            learn_gn_affine: true,
            seed: 0,
        }
    }
}

/// Fully-connected layer `y = x W + b` on a `1×in` row.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.register(format!("{name}.weight"), he_normal(rng, fan_in, fan_out))?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row_vector(y, b)
    }
}

/// All trainable state of the contact head.
#[derive(Debug, Clone)]
pub struct ContactModel {
    config: HeadConfig,
    store: ParamStore,
    cross: Option<CrossAttentionParams>,
    spatial: Option<SpatialAttentionParams>,
    fc_psi: Option<Dense>,
    fc_hand: Dense,
    fc_union: Dense,
    fuse_hidden: Dense,
    fuse_out: Dense,
}

impl ContactModel {
    pub fn new(config: HeadConfig) -> Result<Self> {
        let HeadConfig { n, d, fc_width, .. } = config;
        if n == 0 || d == 0 || fc_width == 0 {
            return Err(Error::Config(format!(
                "head dimensions must be positive (n={n}, d={d}, fc_width={fc_width})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let cross = config
            .use_cross
            .then(|| {
                CrossAttentionParams::register(
                    &mut store,
                    "cross",
                    d,
                    config.gn_groups,
                    config.learn_gn_affine,
                    &mut rng,
                )
            })
            .transpose()?;
        let spatial = config
            .use_spatial
            .then(|| SpatialAttentionParams::register(&mut store, "spatial", d, config.maps, &mut rng))
            .transpose()?;
        let flat = n * d;
        let fc_psi = config
            .use_cross
            .then(|| Dense::register(&mut store, "fc_psi", flat, fc_width, &mut rng))
            .transpose()?;
        let fc_hand = Dense::register(&mut store, "fc_hand", flat, fc_width, &mut rng)?;
        let fc_union = Dense::register(&mut store, "fc_union", flat, fc_width, &mut rng)?;
        let paths = if config.use_cross { 3 } else { 2 };
        let fuse_hidden =
            Dense::register(&mut store, "fuse_hidden", paths * fc_width, fc_width, &mut rng)?;
        let fuse_out = Dense::register(&mut store, "fuse_out", fc_width, NUM_STATES, &mut rng)?;
        Ok(Self {
            config,
            store,
            cross,
            spatial,
            fc_psi,
            fc_hand,
            fc_union,
            fuse_hidden,
            fuse_out,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn cross_params(&self) -> Option<&CrossAttentionParams> {
        self.cross.as_ref()
    }

    pub fn spatial_params(&self) -> Option<&SpatialAttentionParams> {
        self.spatial.as_ref()
    }

    /// Zeroes every weight, bias and normalisation affine.
    pub fn zero_all(&mut self) {
        for p in self.store.iter_mut() {
            p.value_mut().data_mut().fill(0.0);
        }
    }

    fn check_map(&self, tape: &Tape, v: Var) -> Result<()> {
        let expected = [self.config.n, self.config.d];
        if tape.shape(v) != expected {
            return Err(Error::dim("head input", tape.shape(v), &expected));
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape, layer: &Dense, map: Var) -> Result<Var> {
        let flat = tape.reshape(map, &[1, self.config.n * self.config.d])?;
        let y = layer.forward(tape, &self.store, flat)?;
        Ok(tape.relu(y))
    }

    /// Hand-path embedding, shared by every pair of one hand.
    pub fn hand_embedding(&self, tape: &mut Tape, hand: Var) -> Result<Var> {
        self.check_map(tape, hand)?;
        self.embed(tape, &self.fc_hand, hand)
    }

    /// First score set from the fully-connected paths.
    fn fc_scores(&self, tape: &mut Tape, hand: Var, hand_emb: Var, union: Var) -> Result<Var> {
        let union_emb = self.embed(tape, &self.fc_union, union)?;
        let mut parts = Vec::with_capacity(3);
        if let (Some(cross), Some(fc_psi)) = (&self.cross, &self.fc_psi) {
            let psi = cross_attend(tape, &self.store, cross, hand, union)?;
            parts.push(self.embed(tape, fc_psi, psi)?);
        }
        parts.push(hand_emb);
        parts.push(union_emb);
        let joined = tape.concat_lastdim(&parts)?;
        let hidden = self.fuse_hidden.forward(tape, &self.store, joined)?;
        let hidden = tape.relu(hidden);
        let out = self.fuse_out.forward(tape, &self.store, hidden)?;
        tape.reshape(out, &[NUM_STATES])
    }

    /// Scores of one hand-object pair: fully-connected scores plus spatial
    /// attention scores (each omitted when ablated).
    pub fn pair_score(&self, tape: &mut Tape, hand: Var, union: Var) -> Result<Var> {
        let hand_emb = self.hand_embedding(tape, hand)?;
        self.pair_score_with(tape, hand, hand_emb, union)
    }

    fn pair_score_with(&self, tape: &mut Tape, hand: Var, hand_emb: Var, union: Var) -> Result<Var> {
        self.check_map(tape, union)?;
        let s1 = self.fc_scores(tape, hand, hand_emb, union)?;
        match &self.spatial {
            Some(spatial) => {
                let s2 = spatial_scores(tape, &self.store, spatial, union)?;
                tape.add(s1, s2)
            }
            None => Ok(s1),
        }
    }

    /// Hand scores: per-pair scores max-combined over all unions.
    /// An empty union list is a contract error; see [`Self::forward`].
    pub fn hand_scores(&self, tape: &mut Tape, hand: Var, unions: &[Var]) -> Result<Var> {
        if unions.is_empty() {
            return Err(Error::Contract("cannot combine an empty list of pair scores".into()));
        }
        let hand_emb = self.hand_embedding(tape, hand)?;
        let pairs = unions
            .iter()
            .map(|&u| self.pair_score_with(tape, hand, hand_emb, u))
            .collect::<Result<Vec<_>>>()?;
        if pairs.len() == 1 {
            Ok(pairs[0])
        } else {
            tape.elementwise_max(&pairs)
        }
    }

    /// Binds feature maps as constants and scores the hand. With no union
    /// regions the hand's own region stands in as the single union.
    pub fn forward(&self, tape: &mut Tape, hand: &FeatureMap, unions: &[FeatureMap]) -> Result<Var> {
        let h = tape.constant(hand.tensor().clone());
        let us: Vec<Var> = if unions.is_empty() {
            vec![h]
        } else {
            unions.iter().map(|u| tape.constant(u.tensor().clone())).collect()
        };
        self.hand_scores(tape, h, &us)
    }

    /// Inference-only scoring.
    pub fn infer(&self, hand: &FeatureMap, unions: &[FeatureMap]) -> Result<ContactLogits> {
        let mut tape = Tape::new();
        let s = self.forward(&mut tape, hand, unions)?;
        ContactLogits::from_tensor(tape.value(s))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }
}
