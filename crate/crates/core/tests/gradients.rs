//! Tape gradients against central finite differences, 64-bit.
//!
//! The assertions use the well-conditioned columns of the report: the
//! directional derivative for every case, and additionally the extrapolated
//! per-entry difference for primitives. The plain per-entry column at h=1e-4
//! is printed; for composite blocks it is limited by truncation and rounding
//! on entries whose gradient is tiny, not by the tape.

mod common;

use common::*;
use mtair::attention::ChannelAttnWeights;
use mtair::blocks::{BlockOptions, DimWeights, MtDhb};
use mtair::grad::{fd_check, FdConfig, FdReport};
use mtair::network::{Network, NetworkConfig};
use mtair::ops::{Activation, BinaryOp, ConvSpec, Rearrange};
use mtair::params::{Init, ParamReader, ParamSource};
use mtair::prompt::{PromptCodebook, PromptDims};
use mtair::ssm::{ScanDirection, ScanInputs, Ssm2d};
use mtair::weights::{DType, WeightStore};
use mtair::{Result, Tape, Tensor, Var};

fn put(store: &mut WeightStore, name: &str, t: &Tensor<f64>) {
    store.insert_tensor(name, t.shape().0.to_vec(), t, DType::F64).unwrap();
}

fn var(t: &Tape<f64>, r: &mut ParamReader<'_>, s: &WeightStore, name: &str) -> Result<Var<f64>> {
    let dims = s.get(name).unwrap().dims.clone();
    Ok(t.param(&r.take(name, &dims, Init::Zeros)?))
}

/// Bound of the uniform test weights: the 1/sqrt(fan-in) default for an
/// 8-channel pointwise layer.
const WEIGHT_SCALE: f64 = 0.35;

fn assert_report(report: &FdReport, tol: f64) {
    println!("{}", report.to_table());
    assert!(report.directional_rel_err() <= tol, "\n{}", report.to_table());
}

fn assert_entries(report: &FdReport, tol: f64) {
    assert_report(report, tol);
    let x = report.extrapolated_max_rel_err().unwrap();
    assert!(x <= tol, "\n{}", report.to_table());
}

fn cfg(tol: f64) -> FdConfig {
    FdConfig { tol, ..FdConfig::default() }
}

/// Every primitive with a unary tensor input on random 1×3×3×4 data.
#[test]
fn primitive_vjps() {
    type Unary = fn(&Tape<f64>, &Var<f64>, &Var<f64>) -> Result<Var<f64>>;
    let cases: Vec<(&str, Unary)> = vec![
        ("silu", |t, x, _| t.silu(x)),
        ("gelu", |t, x, _| t.gelu(x)),
        ("sigmoid", |t, x, _| t.sigmoid(x)),
        ("softplus", |t, x, _| t.softplus(x)),
        ("relu", |t, x, _| t.relu(x)),
        ("softmax_c", |t, x, _| t.softmax(x, 3)),
        ("softmax_w", |t, x, _| t.softmax(x, 2)),
        ("pool", |t, x, _| t.global_avg_pool(x)),
        ("to_channel", |t, x, _| t.pixel_rearrange(&t.crop(x, 2, 2)?, 2, Rearrange::ToChannel)),
        ("to_space", |t, x, _| t.pixel_rearrange(x, 2, Rearrange::ToSpace)),
        ("resize_up", |t, x, _| t.resize_bilinear(x, 5, 4)),
        ("resize_down", |t, x, _| t.resize_bilinear(x, 2, 2)),
        ("pad", |t, x, _| t.reflect_pad(x, 2, 1)),
        ("normalize", |t, x, _| t.normalize_spatial(x, 1e-12)),
        ("concat", |t, x, y| t.concat_channels(x, y)),
        ("narrow", |t, x, _| t.narrow_channels(x, 1, 2)),
        ("mean", |t, x, _| t.mean(x)),
        ("add", |t, x, y| t.binary(x, y, BinaryOp::Add)),
        ("sub", |t, x, y| t.binary(x, y, BinaryOp::Sub)),
        ("mul", |t, x, y| t.binary(x, y, BinaryOp::Mul)),
        ("div", |t, x, y| t.div(x, &t.add(&t.mul(y, y)?, &t.constant(Tensor::full([1, 1, 1, 1], 1.0)))?)),
        ("mul_bcast_c", |t, x, y| t.mul(x, &t.narrow_channels(y, 0, 1)?)),
        ("mul_bcast_hw", |t, x, y| t.mul(x, &t.global_avg_pool(y)?)),
        ("gram", |t, x, y| t.channel_gram(x, y, 2)),
        ("head_mix", |t, x, y| t.head_mix(&t.reshape(&t.narrow_channels(&t.crop(x, 2, 1)?, 0, 4)?, [1, 2, 2, 2])?, y, 2)),
        ("layer_norm", |t, x, y| {
            let g = t.reshape(&t.crop(y, 1, 1)?, [1, 1, 1, 4])?;
            t.layer_norm(x, &g, &t.narrow_channels(&t.global_avg_pool(y)?, 0, 4)?, 1e-5)
        }),
        ("conv3", |t, x, y| {
            let k = t.reshape(&t.concat_channels(y, y)?, [2, 3, 3, 4])?;
            t.conv2d(x, &k, None, ConvSpec::same3())
        }),
        ("depthwise", |t, x, y| {
            let k = t.reshape(y, [4, 3, 3, 1])?;
            t.conv2d(x, &k, Some(&t.global_avg_pool(y)?), ConvSpec::depthwise3(4))
        }),
        ("route", |t, x, _| {
            let s = t.route_flatten(x, ScanDirection::TopRight)?;
            t.route_unflatten(&t.scale(&s, 2.0)?, ScanDirection::BottomLeft, 3, 3)
        }),
    ];
    let mut worst = 0.0f64;
    for (name, f) in cases {
        let mut store = WeightStore::new();
        put(&mut store, "x", &random_tensor([1, 3, 3, 4], 1, -1.0, 1.0));
        put(&mut store, "y", &random_tensor([1, 3, 3, 4], 2, -1.0, 1.0));
        let report = fd_check(
            |t, s| {
                let mut r = ParamReader::new(s);
                let x = var(t, &mut r, s, "x")?;
                let y = var(t, &mut r, s, "y")?;
                f(t, &x, &y)
            },
            &store,
            cfg(1e-7),
        )
        .unwrap();
        let x = report.extrapolated_max_rel_err().unwrap();
        println!(
            "{name:<14} plain {:.3e} extrapolated {x:.3e} directional {:.3e}",
            report.max_rel_err(),
            report.directional_rel_err()
        );
        worst = worst.max(x).max(report.directional_rel_err());
    }
    assert!(worst <= 1e-7);
}

#[test]
fn codebook_mix_vjp() {
    let mut store = WeightStore::new();
    put(&mut store, "w", &random_tensor([2, 1, 1, 3], 3, 0.0, 1.0));
    put(&mut store, "cb", &random_tensor([3, 2, 2, 4], 4, -1.0, 1.0));
    let report = fd_check(
        |t, s| {
            let mut r = ParamReader::new(s);
            let w = var(t, &mut r, s, "w")?;
            let cb = var(t, &mut r, s, "cb")?;
            t.codebook_mix(&w, &cb)
        },
        &store,
        cfg(1e-7),
    )
    .unwrap();
    assert_entries(&report, 1e-7);
}

#[test]
fn abs_and_activation_enum() {
    for kind in [Activation::Abs, Activation::Relu, Activation::Silu] {
        let mut store = WeightStore::new();
        put(&mut store, "x", &random_tensor([1, 3, 3, 4], 5, -1.0, 1.0));
        let report = fd_check(
            |t, s| {
                let mut r = ParamReader::new(s);
                t.act(&var(t, &mut r, s, "x")?, kind)
            },
            &store,
            cfg(1e-7),
        )
        .unwrap();
        assert_entries(&report, 1e-7);
    }
}

/// Scan backward checked on input, step sizes, B, C, A_log and D at once.
#[test]
fn selective_scan_all_operands() {
    let mut store = WeightStore::new();
    put(&mut store, "u", &random_tensor([2, 1, 7, 3], 6, -1.0, 1.0));
    put(&mut store, "delta", &random_tensor([2, 1, 7, 3], 7, 0.05, 1.0));
    put(&mut store, "b", &random_tensor([2, 1, 7, 4], 8, -1.0, 1.0));
    put(&mut store, "c", &random_tensor([2, 1, 7, 4], 9, -1.0, 1.0));
    put(&mut store, "a_log", &random_tensor([1, 1, 3, 4], 10, -1.0, 1.0));
    put(&mut store, "d", &random_tensor([1, 1, 1, 3], 11, -1.0, 1.0));
    let report = fd_check(
        |t, s| {
            let mut r = ParamReader::new(s);
            let mut v = |n: &str| var(t, &mut r, s, n);
            t.selective_scan(ScanInputs { u: v("u")?, delta: v("delta")?, b: v("b")?, c: v("c")?, a_log: v("a_log")?, d: v("d")? })
        },
        &store,
        cfg(1e-6),
    )
    .unwrap();
    assert_eq!(report.params.len(), 6);
    assert_entries(&report, 1e-6);
}

#[test]
fn ssm_2d_with_projections() {
    let mut store = scaled_weights(12, WEIGHT_SCALE, |s| Ssm2d::<f64>::new(s, "ssm", 4, 3));
    put(&mut store, "input", &random_tensor([1, 3, 4, 4], 13, -1.0, 1.0));
    let report = fd_check(
        |t, s| {
            let mut r = ParamReader::new(s);
            let w = Ssm2d::new(&mut r, "ssm", 4, 3)?;
            let x = var(t, &mut r, s, "input")?;
            w.forward(t, &x)
        },
        &store,
        cfg(1e-6),
    )
    .unwrap();
    assert_report(&report, 1e-6);
}

#[test]
fn channel_attention_block() {
    for normalize in [false, true] {
        let mut store = scaled_weights(14, WEIGHT_SCALE, |s| ChannelAttnWeights::<f64>::new(s, "attn", 8, 2, normalize));
        put(&mut store, "input", &random_tensor([1, 4, 4, 8], 15, -1.0, 1.0));
        let report = fd_check(
            |t, s| {
                let mut r = ParamReader::new(s);
                let w = ChannelAttnWeights::new(&mut r, "attn", 8, 2, normalize)?;
                w.forward(t, &var(t, &mut r, s, "input")?)
            },
            &store,
            cfg(1e-6),
        )
        .unwrap();
        assert_report(&report, 1e-6);
    }
}

#[test]
fn dual_interaction() {
    let mut store = scaled_weights(16, WEIGHT_SCALE, |s| DimWeights::<f64>::new(s, "dim", 8, 4));
    for (name, seed) in [("xc", 17), ("xs", 18), ("x0", 19)] {
        put(&mut store, name, &random_tensor([1, 4, 4, 8], seed, -1.0, 1.0));
    }
    let report = fd_check(
        |t, s| {
            let mut r = ParamReader::new(s);
            let w = DimWeights::new(&mut r, "dim", 8, 4)?;
            let (xc, xs, x0) = (var(t, &mut r, s, "xc")?, var(t, &mut r, s, "xs")?, var(t, &mut r, s, "x0")?);
            w.mt_dim(t, &xc, &xs, &x0)
        },
        &store,
        cfg(1e-6),
    )
    .unwrap();
    assert_report(&report, 1e-6);
}

#[test]
fn hybrid_block() {
    let opt = BlockOptions { d_state: 4, ..BlockOptions::default() };
    let mut store = scaled_weights(20, WEIGHT_SCALE, |s| MtDhb::<f64>::new(s, "blk", 8, 2, &opt));
    put(&mut store, "input", &random_tensor([1, 4, 4, 8], 21, -1.0, 1.0));
    let report = fd_check(
        |t, s| {
            let mut r = ParamReader::new(s);
            let w = MtDhb::new(&mut r, "blk", 8, 2, &opt)?;
            w.forward(t, &var(t, &mut r, s, "input")?)
        },
        &store,
        cfg(1e-6),
    )
    .unwrap();
    assert_report(&report, 1e-6);
}

#[test]
fn prompt_block() {
    let dims = PromptDims { channels: 8, entries: 3, height: 4, width: 4, heads: 2, reduction: 4 };
    let mut store = scaled_weights(22, WEIGHT_SCALE, |s| PromptCodebook::<f64>::new(s, "p", dims, false));
    put(&mut store, "input", &random_tensor([1, 4, 4, 8], 23, -1.0, 1.0));
    let report = fd_check(
        |t, s| {
            let mut r = ParamReader::new(s);
            let w = PromptCodebook::new(&mut r, "p", dims, false)?;
            w.forward(t, &var(t, &mut r, s, "input")?)
        },
        &store,
        cfg(1e-6),
    )
    .unwrap();
    assert_report(&report, 1e-6);
    // resized spatial prompts
    let dims = PromptDims { height: 3, width: 2, ..dims };
    let mut store = scaled_weights(24, WEIGHT_SCALE, |s| PromptCodebook::<f64>::new(s, "p", dims, false));
    put(&mut store, "input", &random_tensor([1, 4, 4, 8], 25, -1.0, 1.0));
    let report = fd_check(
        |t, s| {
            let mut r = ParamReader::new(s);
            let w = PromptCodebook::new(&mut r, "p", dims, false)?;
            w.forward(t, &var(t, &mut r, s, "input")?)
        },
        &store,
        cfg(1e-6),
    )
    .unwrap();
    assert_report(&report, 1e-6);
}

/// The prompt-weight path (pool, down, gelu, out, sigmoid, softmax) with its
/// mixing weights and mixed prompts as the output, where it is not damped by
/// the attention behind it.
#[test]
fn prompt_weight_path() {
    let dims = PromptDims { channels: 8, entries: 3, height: 4, width: 4, heads: 2, reduction: 4 };
    let mut store = scaled_weights(31, WEIGHT_SCALE, |s| PromptCodebook::<f64>::new(s, "p", dims, false));
    put(&mut store, "input", &random_tensor([1, 4, 4, 8], 32, -1.0, 1.0));
    let report = fd_check(
        |t, s| {
            let mut r = ParamReader::new(s);
            let w = PromptCodebook::new(&mut r, "p", dims, false)?;
            let m = w.pam(t, &var(t, &mut r, s, "input")?)?;
            let spatial = t.reshape(&m.spatial, [1, 1, 1, 16])?;
            t.concat_channels(&t.concat_channels(&m.weights, &m.channel)?, &spatial)
        },
        &store,
        cfg(1e-6),
    )
    .unwrap();
    // attention parameters are declared but unused here
    assert_report(&report, 1e-6);
    for p in report.params.iter().filter(|p| p.name.contains("weight_")) {
        assert!(p.max_rel_err <= 1e-6, "{}", report.to_table());
    }
}

/// Mean squared error through a two-level network with one block per level.
/// The gates inside the skip prompts reach the loss through several
/// attention stages, so their whole gradient is small and the directional
/// check needs a longer step to rise above rounding.
#[test]
fn tiny_network_mse() {
    let mut config = NetworkConfig::tiny();
    config.patch_size = 4;
    config.block.d_state = 2;
    config.prompt_entries = 2;
    let mut store = scaled_weights(26, WEIGHT_SCALE, |s| Network::<f64>::new(s, &config));
    let target = random_tensor([1, 4, 4, 3], 28, 0.0, 1.0);
    put(&mut store, "input", &random_tensor([1, 4, 4, 3], 27, 0.0, 1.0));
    let report = fd_check(
        |t, s| {
            let mut r = ParamReader::new(s);
            let net = Network::new(&mut r, &config)?;
            let y = net.forward(t, &var(t, &mut r, s, "input")?)?;
            let d = t.sub(&y, &t.constant(target.clone()))?;
            t.mean(&t.mul(&d, &d)?)
        },
        &store,
        FdConfig { directional_step: 1e-2, ..cfg(1e-6) },
    )
    .unwrap();
    assert_report(&report, 1e-6);
}

#[test]
fn identical_tapes_give_identical_gradients() {
    let mut store = scaled_weights(29, WEIGHT_SCALE, |s| ChannelAttnWeights::<f64>::new(s, "attn", 8, 2, false));
    put(&mut store, "input", &random_tensor([1, 4, 4, 8], 30, -1.0, 1.0));
    let run = || {
        let t = Tape::recording();
        let mut r = ParamReader::new(&store);
        let w = ChannelAttnWeights::new(&mut r, "attn", 8, 2, false).unwrap();
        let x = var(&t, &mut r, &store, "input").unwrap();
        let loss = t.sum(&w.forward(&t, &x).unwrap()).unwrap();
        t.backward(&loss).unwrap().into_named()
    };
    assert_eq!(run(), run());
}
