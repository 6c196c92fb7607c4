//! Structural invariants of routes, scans, attention maps and gates.

mod common;

use common::*;
use mtair::attention::{self, ChannelAttnWeights};
use mtair::blocks::{self, DimWeights};
use mtair::ops;
use mtair::prompt::{self, PromptCodebook, PromptDims};
use mtair::ssm::{self, ScanDirection, Ssm2d};
use mtair::weights::DType;
use mtair::{Tape, Tensor};
use proptest::prelude::*;

#[test]
fn routes_match_hand_enumerated_fixture() {
    let text = include_str!("fixtures/routes_3x3.txt");
    let rows: Vec<(&str, &str)> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split_whitespace();
            (it.next().unwrap(), it.next().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 4);
    let labels = Tensor::<f64>::from_fn([1, 3, 3, 1], |[_, y, x, _]| (y * 3 + x) as f64);
    for (dir, (name, want)) in ScanDirection::ALL.iter().zip(rows) {
        assert_eq!(dir.name(), name);
        let seq = ssm::route_flatten(&labels, *dir);
        let got: String = seq.data().iter().map(|&v| (b'a' + v as u8) as char).collect();
        assert_eq!(got, want, "{name}");
    }
}

fn identical_routes(seed: u64, c: usize, s: usize) -> Ssm2d<f64> {
    let store = random_weights(seed, DType::F64, |src| Ssm2d::<f64>::new(src, "ssm", c, s));
    let w: Ssm2d<f64> = load(&store, |r| Ssm2d::new(r, "ssm", c, s));
    let r0 = w.routes[0].clone();
    Ssm2d { routes: [r0.clone(), r0.clone(), r0.clone(), r0] }
}

fn reverse_seq(t: &Tensor<f64>) -> Tensor<f64> {
    let s = t.shape();
    Tensor::from_fn(s, |[n, _, l, c]| t.at(n, 0, s.w() - 1 - l, c))
}

fn rotate_180(t: &Tensor<f64>) -> Tensor<f64> {
    let s = t.shape();
    Tensor::from_fn(s, |[n, y, x, c]| t.at(n, s.h() - 1 - y, s.w() - 1 - x, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn route_round_trip_is_bit_exact(h in 1usize..=16, w in 1usize..=16, c in 1usize..=3, seed in any::<u64>()) {
        let x = random_tensor([2, h, w, c], seed, -1e3, 1e3);
        for dir in ScanDirection::ALL {
            let back = ssm::route_unflatten(&ssm::route_flatten(&x, dir), dir, h, w).unwrap();
            prop_assert_eq!(back.data(), x.data());
        }
    }

    #[test]
    fn orders_are_permutations(h in 1usize..=16, w in 1usize..=16) {
        for dir in ScanDirection::ALL {
            let mut o = dir.order(h, w);
            o.sort_unstable();
            prop_assert_eq!(o, (0..h * w).collect::<Vec<_>>());
        }
        let fwd = ScanDirection::TopLeft.order(h, w);
        let mut rev = ScanDirection::BottomRight.order(h, w);
        rev.reverse();
        prop_assert_eq!(fwd, rev);
    }

    #[test]
    fn route_two_is_reversed_route_one(h in 1usize..=16, w in 1usize..=16, seed in any::<u64>()) {
        let store = random_weights(seed, DType::F64, |s| Ssm2d::<f64>::new(s, "ssm", 2, 2));
        let p: Ssm2d<f64> = load(&store, |r| Ssm2d::new(r, "ssm", 2, 2));
        let x = random_tensor([1, h, w, 2], seed ^ 1, -1.0, 1.0);
        let t = Tape::inference();
        let direct = p.route(&t, &t.constant(x.clone()), ScanDirection::BottomRight).unwrap().into_tensor();
        let seq = reverse_seq(&ssm::route_flatten(&x, ScanDirection::TopLeft));
        let y = reverse_seq(&ssm::selective_scan_1d(&seq, &p.routes[1]).unwrap());
        let dual = ssm::route_unflatten(&y, ScanDirection::TopLeft, h, w).unwrap();
        prop_assert_eq!(direct.data(), dual.data());
    }

    #[test]
    fn softmax_slices_sum_to_one(scale in 1.0f64..1e4, seed in any::<u64>(), axis in 1usize..4) {
        let x = random_tensor([2, 3, 4, 5], seed, -scale, scale);
        let y = ops::softmax(&x, axis).unwrap();
        let s = x.shape();
        let len = [s.n(), s.h(), s.w(), s.c()][axis];
        let total: f64 = y.data().iter().sum();
        prop_assert!((total - (s.numel() / len) as f64).abs() < 1e-6 * s.numel() as f64);
        prop_assert!(y.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn attention_rows_sum_to_one(
        heads in prop::sample::select(vec![1usize, 2, 4]),
        normalize in any::<bool>(),
        side in 1usize..=6,
        scale in 0.1f64..30.0,
        seed in any::<u64>(),
    ) {
        let store = random_weights(seed, DType::F64, |s| ChannelAttnWeights::<f64>::new(s, "a", 8, heads, normalize));
        let w: ChannelAttnWeights<f64> = load(&store, |r| ChannelAttnWeights::new(r, "a", 8, heads, normalize));
        let x = random_tensor([1, side, side, 8], seed ^ 7, -scale, scale);
        let maps = attention::attention_maps(&x, &w).unwrap();
        for row in maps.data().chunks_exact(8 / heads) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row sum {}", s);
        }
    }

    #[test]
    fn prompt_weights_are_a_distribution(entries in 2usize..=6, scale in 0.1f64..100.0, seed in any::<u64>()) {
        let dims = PromptDims { channels: 8, entries, height: 3, width: 3, heads: 2, reduction: 4 };
        let store = random_weights(seed, DType::F64, |s| PromptCodebook::<f64>::new(s, "p", dims, false));
        let cb: PromptCodebook<f64> = load(&store, |r| PromptCodebook::new(r, "p", dims, false));
        let x = random_tensor([2, 4, 4, 8], seed ^ 3, -scale, scale);
        let w = prompt::pam(&x, &cb).unwrap().weights;
        for item in w.data().chunks_exact(entries) {
            prop_assert!(item.iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!((item.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn gates_lie_strictly_inside_unit_interval(scale in 0.1f64..10.0, seed in any::<u64>()) {
        let store = random_weights(seed, DType::F64, |s| DimWeights::<f64>::new(s, "d", 8, 4));
        let w: DimWeights<f64> = load(&store, |r| DimWeights::new(r, "d", 8, 4));
        let x = random_tensor([1, 5, 5, 8], seed ^ 5, -scale, scale);
        let gc = blocks::atten_c(&x, &w).unwrap();
        let gs = blocks::atten_s(&x, &w).unwrap();
        prop_assert_eq!(gc.shape().0, [1, 1, 1, 8]);
        prop_assert_eq!(gs.shape().0, [1, 5, 5, 1]);
        prop_assert!(gc.data().iter().chain(gs.data()).all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn identical_routes_commute_with_half_turn() {
    let p = identical_routes(40, 3, 4);
    let raw = random_tensor([1, 5, 6, 3], 41, -1.0, 1.0);
    // average with the rotated copy to get a half-turn symmetric image
    let x = Tensor::from_fn(raw.shape(), |[n, y, xx, c]| {
        0.5 * (raw.at(n, y, xx, c) + rotate_180(&raw).at(n, y, xx, c))
    });
    let y = ssm::ssm_2d(&x, &p).unwrap();
    let y_rot = ssm::ssm_2d(&rotate_180(&x), &p).unwrap();
    assert!(oracle_max_abs(&y, &rotate_180(&y)) <= 1e-12);
    assert!(oracle_max_abs(&y_rot, &rotate_180(&y)) <= 1e-12);
}

fn oracle_max_abs(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn memoryless_routes_agree() {
    let mut store = random_weights(42, DType::F64, |s| Ssm2d::<f64>::new(s, "ssm", 3, 4));
    store.map_prefix("", |name, v| if name.ends_with("a_log") { 50.0 } else { v });
    let w: Ssm2d<f64> = load(&store, |r| Ssm2d::new(r, "ssm", 3, 4));
    let p = Ssm2d { routes: std::array::from_fn(|_| w.routes[0].clone()) };
    let x = random_tensor([1, 4, 5, 3], 43, -1.0, 1.0);
    let t = Tape::inference();
    let xv = t.constant(x.clone());
    let single = p.route(&t, &xv, ScanDirection::TopLeft).unwrap().into_tensor();
    for dir in ScanDirection::ALL {
        let y = p.route(&t, &xv, dir).unwrap().into_tensor();
        assert!(oracle_max_abs(&y, &single) <= 1e-14, "{dir:?}");
    }
    let merged = ssm::ssm_2d(&x, &p).unwrap();
    assert!(oracle_max_abs(&merged, &single.map(|v| 4.0 * v)) <= 1e-13);
}

#[test]
fn huge_temperature_flattens_attention() {
    let mut store = random_weights(44, DType::F64, |s| ChannelAttnWeights::<f64>::new(s, "a", 8, 2, false));
    let x = random_tensor([1, 4, 4, 8], 45, -1.0, 1.0);
    let base: ChannelAttnWeights<f64> = load(&store, |r| ChannelAttnWeights::new(r, "a", 8, 2, false));
    let before = attention::attention_maps(&x, &base).unwrap();
    store.map_prefix("a.temperature", |_, v| v * 1e6);
    let hot: ChannelAttnWeights<f64> = load(&store, |r| ChannelAttnWeights::new(r, "a", 8, 2, false));
    let maps = attention::attention_maps(&x, &hot).unwrap();
    assert!(maps.data().iter().all(|&v| (v - 0.25).abs() <= 1e-3));
    assert!(before.data().iter().any(|&v| (v - 0.25).abs() > 1e-2));
}

#[test]
fn misaligned_merge_breaks_duality() {
    let store = random_weights(46, DType::F64, |s| Ssm2d::<f64>::new(s, "ssm", 2, 2));
    let p: Ssm2d<f64> = load(&store, |r| Ssm2d::new(r, "ssm", 2, 2));
    let x = random_tensor([1, 3, 4, 2], 47, -1.0, 1.0);
    let t = Tape::inference();
    let xv = t.constant(x);
    let good = p.forward(&t, &xv).unwrap().into_tensor();
    let mut align = ScanDirection::ALL;
    align[1] = ScanDirection::TopLeft;
    let bad = p.forward_aligned(&t, &xv, align).unwrap().into_tensor();
    assert!(oracle_max_abs(&good, &bad) > 1e-3);
}
