mod common;

use common::{brute_force, rng};
use proptest::prelude::*;
use rand::Rng;
use stipple::lap;
use stipple::points::dist2;
use stipple::transport::{self, stratum_center, OtGrid, TransportError};
use stipple::PointSet;

#[test]
fn assignment_matches_exhaustive_enumeration() {
    for n in 7..=9 {
        for inst in 0..50u64 {
            let mut r = rng(n as u64 * 1000 + inst);
            // half the instances geometric, half arbitrary matrices
            let cost: Vec<f64> = if inst % 2 == 0 {
                let a: Vec<[f64; 2]> = (0..n).map(|_| [r.random(), r.random()]).collect();
                let b: Vec<[f64; 2]> = (0..n).map(|_| [r.random(), r.random()]).collect();
                (0..n * n).map(|i| dist2(a[i / n], b[i % n])).collect()
            } else {
                (0..n * n).map(|_| r.random_range(0.0..10.0)).collect()
            };
            let got = lap::solve(n, |i, j| cost[i * n + j]);
            let (best, perm) = brute_force(n, &cost);
            let got_cost = lap::assignment_cost(&got, |i, j| cost[i * n + j]);
            assert!((got_cost - best).abs() < 1e-12, "n={n} inst={inst}: {got_cost} vs {best}");
            assert_eq!(got, perm, "n={n} inst={inst}");
        }
    }
}

#[test]
fn three_by_three_grid_matches_all_permutations() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let pts: Vec<[f64; 2]> = (0..9).map(|_| [r.random(), r.random()]).collect();
        let set = PointSet::new(pts.clone());
        // rows strata, columns points
        let cost: Vec<f64> = (0..81).map(|i| dist2(stratum_center(3, i / 9), pts[i % 9])).collect();
        let (best, _) = brute_force(9, &cost);
        let map = transport::assign(&set).unwrap();
        assert!((transport::assignment_cost(&set, &map) - best).abs() < 1e-12);
    }
}

#[test]
fn optimal_beats_greedy_at_1024() {
    for seed in 0..3 {
        let mut r = rng(seed);
        let set = PointSet::new((0..1024).map(|_| [r.random(), r.random()]).collect());
        let opt = transport::assignment_cost(&set, &transport::assign(&set).unwrap());
        let greedy = transport::assignment_cost(&set, &transport::greedy_assign(&set).unwrap());
        assert!(opt <= greedy, "{opt} > {greedy}");
    }
}

#[test]
fn centres_map_to_identity_with_zero_cost() {
    let k = 5;
    let set = PointSet::new((0..k * k).map(|s| stratum_center(k, s)).collect());
    let map = transport::assign(&set).unwrap();
    assert_eq!(map, (0..k * k).collect::<Vec<_>>());
    assert_eq!(transport::assignment_cost(&set, &map), 0.0);
}

#[test]
fn lattice_has_zero_offsets_and_jitter_stays_in_cells() {
    let k = 32;
    let lattice = PointSet::new((0..k * k).map(|s| stratum_center(k, s)).collect());
    let t = transport::encode(&lattice).unwrap().to_tensor::<f32>();
    assert!(t.data().iter().all(|&v| v == 0.0));

    let mut r = rng(4);
    let k = 8;
    let h = 0.5 / k as f64;
    let jitter: Vec<[f64; 2]> = (0..k * k)
        .map(|s| {
            let c = stratum_center(k, s);
            [c[0] + r.random_range(-h * 0.99..h * 0.99), c[1] + r.random_range(-h * 0.99..h * 0.99)]
        })
        .collect();
    let g = transport::encode(&PointSet::new(jitter)).unwrap();
    assert!(g.offsets().iter().all(|d| d[0].abs() < h && d[1].abs() < h));
}

#[test]
fn non_square_budgets_name_neighbours() {
    let set = PointSet::new(vec![[0.5, 0.5]; 1000]);
    match transport::encode(&set) {
        Err(TransportError::NotSquare { n, below, above }) => assert_eq!((n, below, above), (1000, 961, 1024)),
        other => panic!("expected NotSquare, got {other:?}"),
    }
}

#[test]
fn hundred_round_trips_preserve_the_multiset() {
    let mut r = rng(77);
    for _ in 0..100 {
        let pts: Vec<[f64; 2]> = (0..16).map(|_| [r.random(), r.random()]).collect();
        let back = transport::decode(&transport::encode(&PointSet::new(pts.clone())).unwrap());
        let sort = |v: &mut Vec<[f64; 2]>| v.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        let (mut a, mut b) = (pts, back.points);
        sort(&mut a);
        sort(&mut b);
        for (p, q) in a.iter().zip(&b) {
            assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
        }
    }
}

fn point_sets() -> impl Strategy<Value = Vec<[f64; 2]>> {
    (1usize..=6).prop_flat_map(|k| prop::collection::vec([0.0f64..=1.0, 0.0f64..=1.0], k * k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignment_ignores_input_order(pts in point_sets(), shift in 0usize..36) {
        let n = pts.len();
        let mut rotated = pts.clone();
        rotated.rotate_left(shift % n);
        let a = PointSet::new(pts);
        let b = PointSet::new(rotated);
        let ca = transport::assignment_cost(&a, &transport::assign(&a).unwrap());
        let cb = transport::assignment_cost(&b, &transport::assign(&b).unwrap());
        prop_assert!((ca - cb).abs() < 1e-12);
    }

    #[test]
    fn optimal_never_worse_than_greedy(pts in point_sets()) {
        let s = PointSet::new(pts);
        let opt = transport::assignment_cost(&s, &transport::assign(&s).unwrap());
        let greedy = transport::assignment_cost(&s, &transport::greedy_assign(&s).unwrap());
        prop_assert!(opt <= greedy + 1e-12);
    }

    #[test]
    fn encode_decode_is_a_permutation(pts in point_sets()) {
        let grid = transport::encode(&PointSet::new(pts.clone())).unwrap();
        let back = grid.positions();
        let mut used = vec![false; pts.len()];
        for q in &back {
            let i = (0..pts.len()).find(|&i| !used[i] && dist2(pts[i], *q) < 1e-18);
            prop_assert!(i.is_some());
            used[i.unwrap()] = true;
        }
    }

    #[test]
    fn grid_binary_and_tensor_round_trip(pts in point_sets()) {
        let grid = transport::encode(&PointSet::new(pts)).unwrap();
        let mut buf = Vec::new();
        grid.write_to(&mut buf).unwrap();
        prop_assert_eq!(&buf[..4], b"OTG1");
        let back = OtGrid::read_from(&buf[..]).unwrap();
        // the file stores f32
        for (a, b) in grid.offsets().iter().zip(back.offsets()) {
            prop_assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
        let t = grid.to_tensor::<f64>();
        let again = OtGrid::from_tensor(&t).unwrap();
        for (a, b) in grid.offsets().iter().zip(again.offsets()) {
            prop_assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }
}
