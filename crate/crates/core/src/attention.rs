//! Cross-feature affinity pooling and spatial attention over `n×d` region
//! features.
//!
//! Both modules consume feature maps flattened to `n = h·w` spatial rows of
//! `d` channels. Every `1×1` convolution is a right-multiplication by a
//! `d×k` weight matrix in this layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::normal;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Default number of channel groups in the pooled-term normalisation.
pub const DEFAULT_GN_GROUPS: usize = 8;
pub const DEFAULT_GN_EPS: f64 = 1e-5;
/// Default number of spatial attention maps.
pub const DEFAULT_MAPS: usize = 32;
/// Std of the zero-mean normal used for attention weights.
pub const ATTENTION_INIT_STD: f64 = 0.01;

/// Dense `n×d` feature block for a hand or hand-object union region.
/// Serialised as a list of `n` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.dims2().is_none() {
            return Err(Error::dim("feature_map", values.shape(), &[0, 0]));
        }
        Ok(Self { values })
    }

    pub fn from_vec(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(&[n, d], data)?)
    }

    /// Every spatial location carries the same feature vector `row`.
    pub fn constant_rows(n: usize, row: &[f64]) -> Result<Self> {
        let data = (0..n).flat_map(|_| row.iter().copied()).collect();
        Self::from_vec(n, row.len(), data)
    }

    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    pub fn row(&self, p: usize) -> &[f64] {
        let d = self.d();
        &self.values.data()[p * d..(p + 1) * d]
    }
}

impl TryFrom<Vec<Vec<f64>>> for FeatureMap {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Contract(format!(
                "ragged feature map: rows of length {d} and {}",
                bad.len()
            )));
        }
        Self::from_vec(n, d, rows.into_iter().flatten().collect())
    }
}

impl From<FeatureMap> for Vec<Vec<f64>> {
    fn from(m: FeatureMap) -> Self {
        let d = m.d();
        m.values.data().chunks(d).map(<[f64]>::to_vec).collect()
    }
}

fn check_pair(tape: &Tape, h: Var, u: Var, d: usize) -> Result<()> {
    let (hs, us) = (tape.shape(h), tape.shape(u));
    if hs.len() != 2 || hs != us {
        return Err(Error::dim("hand/union features", hs, us));
    }
    if hs[1] != d {
        return Err(Error::dim("feature channels", hs, &[hs[0], d]));
    }
    Ok(())
}

/// Weights of the cross-feature affinity pooling.
#[derive(Debug, Clone)]
pub struct CrossAttentionParams {
    pub w_alpha: ParamId,
    pub w_beta: ParamId,
    pub gn_scale: ParamId,
    pub gn_shift: ParamId,
    pub gn_groups: usize,
    pub gn_eps: f64,
    pub d: usize,
}

impl CrossAttentionParams {
    /// Registers `{prefix}.w_alpha`, `{prefix}.w_beta`, `{prefix}.gn_scale`
    /// and `{prefix}.gn_shift`. Affinity weights start near zero, the
    /// normalisation affine at scale 1 / shift 0.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        gn_groups: usize,
        learn_gn_affine: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if gn_groups == 0 || !d.is_multiple_of(gn_groups) {
            return Err(Error::Config(format!(
                "feature width {d} is not divisible by {gn_groups} norm groups"
            )));
        }
        let w_alpha = store.register(
            format!("{prefix}.w_alpha"),
            normal(rng, &[d, d], ATTENTION_INIT_STD),
        )?;
        let w_beta = store.register(
            format!("{prefix}.w_beta"),
            normal(rng, &[d, d], ATTENTION_INIT_STD),
        )?;
        let gn_scale = store.register(format!("{prefix}.gn_scale"), Tensor::ones(&[d]))?;
        let gn_shift = store.register(format!("{prefix}.gn_shift"), Tensor::zeros(&[d]))?;
        store.set_frozen(gn_scale, !learn_gn_affine);
        store.set_frozen(gn_shift, !learn_gn_affine);
        Ok(Self {
            w_alpha,
            w_beta,
            gn_scale,
            gn_shift,
            gn_groups,
            gn_eps: DEFAULT_GN_EPS,
            d,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w_alpha, self.w_beta, self.gn_scale, self.gn_shift]
    }
}

/// Affinity matrix `A = (H W_α)(U W_β)ᵀ`, shape `n×n`. No temperature scaling.
pub fn affinity(
    tape: &mut Tape,
    store: &ParamStore,
    params: &CrossAttentionParams,
    hand: Var,
    union: Var,
) -> Result<Var> {
    check_pair(tape, hand, union, params.d)?;
    let wa = tape.param(store, params.w_alpha);
    let wb = tape.param(store, params.w_beta);
    let query = tape.matmul(hand, wa)?;
    let key = tape.matmul(union, wb)?;
    let key_t = tape.transpose(key)?;
    tape.matmul(query, key_t)
}

/// Affinity-weighted pooling of union features onto hand locations,
/// `softmax(A)·U`, before normalisation.
pub fn pooled_union(
    tape: &mut Tape,
    store: &ParamStore,
    params: &CrossAttentionParams,
    hand: Var,
    union: Var,
) -> Result<Var> {
    let a = affinity(tape, store, params, hand, union)?;
    let weights = tape.softmax_lastdim(a)?;
    tape.matmul(weights, union)
}

/// `Ψ(H, U) = H + GN(softmax(A)·U)`.
pub fn cross_attend(
    tape: &mut Tape,
    store: &ParamStore,
    params: &CrossAttentionParams,
    hand: Var,
    union: Var,
) -> Result<Var> {
    let pooled = pooled_union(tape, store, params, hand, union)?;
    let scale = tape.param(store, params.gn_scale);
    let shift = tape.param(store, params.gn_shift);
    let normed = tape.group_norm(pooled, params.gn_groups, scale, shift, params.gn_eps)?;
    tape.add(hand, normed)
}

/// Weights of the spatial attention scorer.
#[derive(Debug, Clone)]
pub struct SpatialAttentionParams {
    /// `d×L`; column `l` produces attention logits for map `l`.
    pub w: ParamId,
    /// `L×d×4`; slice `l` maps features to per-location state scores.
    pub theta: ParamId,
    pub maps: usize,
    pub d: usize,
}

impl SpatialAttentionParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        maps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if maps == 0 {
            return Err(Error::Config("spatial attention needs at least one map".into()));
        }
        let w = store.register(
            format!("{prefix}.w"),
            normal(rng, &[d, maps], ATTENTION_INIT_STD),
        )?;
        let theta = store.register(
            format!("{prefix}.theta"),
            normal(rng, &[maps, d, 4], ATTENTION_INIT_STD),
        )?;
        Ok(Self { w, theta, maps, d })
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.theta]
    }
}

/// Attention maps `a_l = softmax(U w_l)` as the columns of an `n×L` matrix.
pub fn spatial_attention_maps(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SpatialAttentionParams,
    union: Var,
) -> Result<Var> {
    let maps_t = maps_by_row(tape, store, params, union)?;
    tape.transpose(maps_t)
}

/// `L×n`, row `l` is `a_l`.
fn maps_by_row(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SpatialAttentionParams,
    union: Var,
) -> Result<Var> {
    check_pair(tape, union, union, params.d)?;
    let w = tape.param(store, params.w);
    let logits = tape.matmul(union, w)?;
    let logits_t = tape.transpose(logits)?;
    tape.softmax_lastdim(logits_t)
}

/// Spatial-attention contact scores: `Z_l = a_l ⊙ (U Θ_l)`, `t_l` the
/// column sums of `Z_l`, and the result the mean of `t_l` over all maps.
pub fn spatial_scores(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SpatialAttentionParams,
    union: Var,
) -> Result<Var> {
    let maps = maps_by_row(tape, store, params, union)?;
    let theta = tape.param(store, params.theta);
    let mut total: Option<Var> = None;
    for l in 0..params.maps {
        let a_l = tape.select(maps, l)?;
        let theta_l = tape.select(theta, l)?;
        let per_location = tape.matmul(union, theta_l)?;
        let z_l = tape.broadcast_mul(per_location, a_l)?;
        let t_l = tape.sum_axis(z_l, 0)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, t_l)?,
            None => t_l,
        });
    }
    let total = total.expect("at least one map");
    Ok(tape.scale(total, 1.0 / params.maps as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(
        d: usize,
        seed: u64,
    ) -> (ParamStore, CrossAttentionParams, SpatialAttentionParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cross = CrossAttentionParams::register(&mut store, "cross", d, 2, true, &mut rng).unwrap();
        let spatial = SpatialAttentionParams::register(&mut store, "spatial", d, 3, &mut rng).unwrap();
        (store, cross, spatial, rng)
    }

    #[test]
    fn zero_alpha_gives_zero_affinity() {
        let (mut store, cross, _, mut rng) = setup(8, 1);
        *store.get_mut(cross.w_alpha).value_mut() = Tensor::zeros(&[8, 8]);
        let mut tape = Tape::new();
        let h = tape.constant(normal(&mut rng, &[4, 8], 1.0));
        let u = tape.constant(normal(&mut rng, &[4, 8], 1.0));
        let a = affinity(&mut tape, &store, &cross, h, u).unwrap();
        assert!(tape.value(a).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weights_on_orthonormal_rows_give_identity_affinity() {
        let (mut store, cross, _, _) = setup(4, 2);
        *store.get_mut(cross.w_alpha).value_mut() = Tensor::eye(4);
        *store.get_mut(cross.w_beta).value_mut() = Tensor::eye(4);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::eye(4));
        let a = affinity(&mut tape, &store, &cross, h, h).unwrap();
        assert_eq!(tape.value(a), &Tensor::eye(4));
    }

    #[test]
    fn mismatched_maps_are_rejected() {
        let (store, cross, spatial, _) = setup(8, 3);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[4, 8]));
        let u = tape.constant(Tensor::zeros(&[5, 8]));
        assert!(matches!(
            cross_attend(&mut tape, &store, &cross, h, u),
            Err(Error::Dimension { .. })
        ));
        let narrow = tape.constant(Tensor::zeros(&[4, 6]));
        assert!(spatial_scores(&mut tape, &store, &spatial, narrow).is_err());
    }

    #[test]
    fn zero_map_weights_give_uniform_attention() {
        let (mut store, _, spatial, mut rng) = setup(8, 4);
        *store.get_mut(spatial.w).value_mut() = Tensor::zeros(&[8, 3]);
        let mut tape = Tape::new();
        let u = tape.constant(normal(&mut rng, &[5, 8], 1.0));
        let a = spatial_attention_maps(&mut tape, &store, &spatial, u).unwrap();
        assert_eq!(tape.shape(a), &[5, 3]);
        assert!(tape.value(a).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn single_location_maps_are_one() {
        let (store, _, spatial, mut rng) = setup(8, 5);
        let mut tape = Tape::new();
        let u = tape.constant(normal(&mut rng, &[1, 8], 1.0));
        let a = spatial_attention_maps(&mut tape, &store, &spatial, u).unwrap();
        assert!(tape.value(a).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_theta_gives_zero_scores() {
        let (mut store, _, spatial, mut rng) = setup(8, 6);
        *store.get_mut(spatial.theta).value_mut() = Tensor::zeros(&[3, 8, 4]);
        let mut tape = Tape::new();
        let u = tape.constant(normal(&mut rng, &[4, 8], 1.0));
        let s = spatial_scores(&mut tape, &store, &spatial, u).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0; 4]);
    }

    #[test]
    fn register_rejects_bad_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(CrossAttentionParams::register(&mut store, "c", 6, 4, true, &mut rng).is_err());
        assert!(SpatialAttentionParams::register(&mut store, "s", 6, 0, &mut rng).is_err());
    }
}
