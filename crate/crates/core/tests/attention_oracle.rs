mod common;

use common::{max_abs_diff, naive_affinity, naive_cross_attend, naive_spatial_scores, rows, Rows};
use handcontact::attention::{
    affinity, cross_attend, spatial_attention_maps, spatial_scores, CrossAttentionParams,
    SpatialAttentionParams, DEFAULT_GN_EPS,
};
use handcontact::tensor::{ParamId, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn fill(store: &mut ParamStore, id: ParamId, t: Tensor) {
    *store.get_mut(id).value_mut() = t;
}

struct Setup {
    store: ParamStore,
    cross: CrossAttentionParams,
    spatial: SpatialAttentionParams,
}

fn setup(rng: &mut ChaCha8Rng, d: usize, groups: usize, maps: usize) -> Setup {
    let mut store = ParamStore::new();
    let cross = CrossAttentionParams::register(&mut store, "c", d, groups, true, rng).unwrap();
    let spatial = SpatialAttentionParams::register(&mut store, "s", d, maps, rng).unwrap();
    fill(&mut store, cross.w_alpha, random(rng, &[d, d], 1.0));
    fill(&mut store, cross.w_beta, random(rng, &[d, d], 1.0));
    fill(&mut store, cross.gn_scale, random(rng, &[d], 2.0));
    fill(&mut store, cross.gn_shift, random(rng, &[d], 1.0));
    fill(&mut store, spatial.w, random(rng, &[d, maps], 1.0));
    fill(&mut store, spatial.theta, random(rng, &[maps, d, 4], 1.0));
    Setup { store, cross, spatial }
}

fn value(s: &Setup, id: ParamId) -> Rows {
    rows(s.store.get(id).value())
}

#[test]
fn forward_passes_match_loop_oracles() {
    let (n, d, maps) = (4, 8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let groups = [1, 2, 4, 8][trial % 4];
        let s = setup(&mut rng, d, groups, maps);
        let h = random(&mut rng, &[n, d], 1.0);
        let u = random(&mut rng, &[n, d], 1.0);
        let (hr, ur) = (rows(&h), rows(&u));
        let (wa, wb) = (value(&s, s.cross.w_alpha), value(&s, s.cross.w_beta));

        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let uv = tape.constant(u.clone());
        let a = affinity(&mut tape, &s.store, &s.cross, hv, uv).unwrap();
        worst = worst.max(max_abs_diff(&rows(tape.value(a)), &naive_affinity(&hr, &ur, &wa, &wb)));

        let psi = cross_attend(&mut tape, &s.store, &s.cross, hv, uv).unwrap();
        let gamma = s.store.get(s.cross.gn_scale).value().data().to_vec();
        let beta = s.store.get(s.cross.gn_shift).value().data().to_vec();
        let want = naive_cross_attend(&hr, &ur, &wa, &wb, &gamma, &beta, groups, DEFAULT_GN_EPS);
        worst = worst.max(max_abs_diff(&rows(tape.value(psi)), &want));

        let t = spatial_scores(&mut tape, &s.store, &s.spatial, uv).unwrap();
        let w = value(&s, s.spatial.w);
        let theta: Vec<Rows> = s
            .store
            .get(s.spatial.theta)
            .value()
            .data()
            .chunks(d * 4)
            .map(|c| c.chunks(4).map(<[f64]>::to_vec).collect())
            .collect();
        let want = naive_spatial_scores(&ur, &w, &theta);
        for (g, w) in tape.value(t).data().iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
    }
    assert!(worst <= 1e-12, "worst deviation {worst:e}");
}

#[test]
fn zero_weights_leave_hand_features_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let s = {
            let mut s = setup(&mut rng, 8, 8, 2);
            fill(&mut s.store, s.cross.w_alpha, Tensor::zeros(&[8, 8]));
            fill(&mut s.store, s.cross.w_beta, Tensor::zeros(&[8, 8]));
            fill(&mut s.store, s.cross.gn_scale, Tensor::ones(&[8]));
            fill(&mut s.store, s.cross.gn_shift, Tensor::zeros(&[8]));
            s
        };
        let h = random(&mut rng, &[4, 8], 3.0);
        let u = random(&mut rng, &[4, 8], 3.0);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let uv = tape.constant(u);
        let psi = cross_attend(&mut tape, &s.store, &s.cross, hv, uv).unwrap();
        assert_eq!(tape.value(psi).data(), h.data());
    }
}

#[test]
fn outputs_are_invariant_to_union_row_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = setup(&mut rng, 6, 3, 4);
    let h = random(&mut rng, &[5, 6], 1.0);
    let u = random(&mut rng, &[5, 6], 1.0);
    let ur = rows(&u);
    let perm = [3, 0, 4, 1, 2];
    let shuffled = Tensor::new(&[5, 6], perm.iter().flat_map(|&i| ur[i].clone()).collect()).unwrap();

    let run = |u: &Tensor| {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let uv = tape.constant(u.clone());
        let psi = cross_attend(&mut tape, &s.store, &s.cross, hv, uv).unwrap();
        let t = spatial_scores(&mut tape, &s.store, &s.spatial, uv).unwrap();
        (rows(tape.value(psi)), tape.value(t).data().to_vec())
    };
    let (psi_a, t_a) = run(&u);
    let (psi_b, t_b) = run(&shuffled);
    assert!(max_abs_diff(&psi_a, &psi_b) < 1e-12);
    for (a, b) in t_a.iter().zip(&t_b) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_maps_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = setup(&mut rng, 8, 4, 5);
    let u = random(&mut rng, &[7, 8], 4.0);
    let mut tape = Tape::new();
    let uv = tape.constant(u);
    let maps = spatial_attention_maps(&mut tape, &s.store, &s.spatial, uv).unwrap();
    let m = tape.value(maps);
    assert_eq!(m.shape(), &[7, 5]);
    for l in 0..5 {
        let col: f64 = (0..7).map(|p| m.data()[p * 5 + l]).sum();
        assert!((col - 1.0).abs() < 1e-12);
    }
    assert!(m.data().iter().all(|&v| v > 0.0));
}
