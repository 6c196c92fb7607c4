//! The invariant suite behind `mtair check`: fast kernels against the
//! brute-force references, scan-route bijections and duality, normalization
//! of attention maps and prompt weights, and optionally gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, ChannelAttnWeights};
use crate::blocks::{self, DimWeights};
use crate::error::Result;
use crate::grad::{gradcheck, FdConfig, GradBlock, Tape};
use crate::oracle;
use crate::params::{randomize, Initializer, ParamReader, Spread};
use crate::prompt::{self, PromptCodebook, PromptDims};
use crate::ssm::{self, ScanDirection, Ssm2d};
use crate::tensor::{Scalar, Tensor};
use crate::weights::{DType, WeightStore};

pub const ORACLE_TOL: f64 = 1e-5;
pub const NORMALIZATION_TOL: f64 = 1e-6;
pub const GRADIENT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub property: String,
    pub tolerance: f64,
    pub observed: f64,
    pub pass: bool,
}

impl CheckResult {
    /// Passes when `observed <= tolerance`; NaN never passes.
    pub fn at_most(property: impl Into<String>, tolerance: f64, observed: f64) -> Self {
        CheckResult {
            property: property.into(),
            tolerance,
            observed,
            pass: observed <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl CheckReport {
    pub fn new(checks: Vec<CheckResult>) -> Self {
        CheckReport {
            passed: checks.iter().all(|c| c.pass),
            checks,
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<48} {:>11} {:>11}  status\n", "property", "tolerance", "observed");
        for c in &self.checks {
            s += &format!(
                "{:<48} {:>11.3e} {:>11.3e}  {}\n",
                c.property,
                c.tolerance,
                c.observed,
                if c.pass { "ok" } else { "FAIL" }
            );
        }
        let failed = self.failures().count();
        s += &format!("{} checks, {failed} failed\n", self.checks.len());
        s
    }
}

/// Deliberate corruptions, for showing that the suite notices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// The bottom-right route is mapped back with the top-left order.
    MisalignedMerge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    pub route_grids: usize,
    pub normalization_trials: usize,
    pub gradients: bool,
    pub fault: Option<Fault>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            route_grids: 100,
            normalization_trials: 1000,
            gradients: false,
            fault: None,
        }
    }
}

pub fn run_suite(opt: &SuiteOptions) -> Result<CheckReport> {
    let mut checks = oracle_checks(opt.seed)?;
    checks.extend(route_checks(opt.seed, opt.route_grids, opt.fault)?);
    checks.extend(normalization_checks(opt.seed, opt.normalization_trials)?);
    if opt.gradients {
        checks.extend(gradient_checks(opt.seed)?);
    }
    Ok(CheckReport::new(checks))
}

const CHANNELS: usize = 8;
const HEADS: usize = 2;
const REDUCTION: usize = 4;
const D_STATE: usize = 8;
const ORACLE_SHAPES: [[usize; 4]; 3] = [[1, 8, 8, 8], [1, 5, 7, 8], [2, 4, 6, 8]];

fn random_store<W>(seed: u64, declare: impl FnOnce(&mut Initializer<'_>) -> Result<W>) -> Result<WeightStore> {
    let mut store = WeightStore::new();
    declare(&mut Initializer::new(&mut store, seed, DType::F64))?;
    randomize(&mut store, seed ^ 0x9e37, Spread::WIDE);
    Ok(store)
}

fn load<W>(store: &WeightStore, declare: impl FnOnce(&mut ParamReader<'_>) -> Result<W>) -> Result<W> {
    declare(&mut ParamReader::new(store))
}

fn uniform(shape: [usize; 4], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Largest elementwise error relative to the largest reference magnitude.
fn normwise<T: Scalar>(got: &Tensor<T>, want: &Tensor<f64>) -> f64 {
    let scale = want.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    got.data()
        .iter()
        .zip(want.data())
        .map(|(a, b)| (a.to_f64() - b).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Accumulates the 64-bit elementwise and 32-bit normwise errors of one
/// module over several trials.
#[derive(Default)]
struct OracleErr {
    f64_rel: f64,
    f32_norm: f64,
}

impl OracleErr {
    fn add(&mut self, got64: &Tensor<f64>, got32: &Tensor<f32>, want: &Tensor<f64>) {
        self.f64_rel = self.f64_rel.max(oracle::max_rel_diff(got64, want, 1e-8));
        self.f32_norm = self.f32_norm.max(normwise(got32, want));
    }

    fn rows(&self, module: &str) -> [CheckResult; 2] {
        [
            CheckResult::at_most(format!("oracle.{module}.f64_elementwise"), ORACLE_TOL, self.f64_rel),
            CheckResult::at_most(format!("oracle.{module}.f32_normwise"), ORACLE_TOL, self.f32_norm),
        ]
    }
}

/// Fast path at 64 and 32 bits against the loop references, on random
/// weights and inputs up to 8×8×8.
pub fn oracle_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scan = OracleErr::default();
    let mut attn = OracleErr::default();
    let mut dim = OracleErr::default();
    let mut pam = OracleErr::default();
    let mut pim = OracleErr::default();
    for (trial, &shape) in ORACLE_SHAPES.iter().enumerate() {
        let ws = seed.wrapping_add(trial as u64 * 101);
        let x = uniform(shape, &mut rng, 1.0);
        let x32: Tensor<f32> = x.cast();

        let store = random_store(ws, |s| Ssm2d::<f64>::new(s, "ssm", CHANNELS, D_STATE))?;
        let p64: Ssm2d<f64> = load(&store, |r| Ssm2d::new(r, "ssm", CHANNELS, D_STATE))?;
        let p32: Ssm2d<f32> = load(&store, |r| Ssm2d::new(r, "ssm", CHANNELS, D_STATE))?;
        scan.add(&ssm::ssm_2d(&x, &p64)?, &ssm::ssm_2d(&x32, &p32)?, &oracle::ssm_2d(&x, &p64));

        let store = random_store(ws + 1, |s| ChannelAttnWeights::<f64>::new(s, "attn", CHANNELS, HEADS, false))?;
        let a64: ChannelAttnWeights<f64> = load(&store, |r| ChannelAttnWeights::new(r, "attn", CHANNELS, HEADS, false))?;
        let a32: ChannelAttnWeights<f32> = load(&store, |r| ChannelAttnWeights::new(r, "attn", CHANNELS, HEADS, false))?;
        attn.add(
            &attention::channel_attention(&x, &a64)?,
            &attention::channel_attention(&x32, &a32)?,
            &oracle::channel_attention(&x, &a64),
        );

        let store = random_store(ws + 2, |s| DimWeights::<f64>::new(s, "dim", CHANNELS, REDUCTION))?;
        let d64: DimWeights<f64> = load(&store, |r| DimWeights::new(r, "dim", CHANNELS, REDUCTION))?;
        let d32: DimWeights<f32> = load(&store, |r| DimWeights::new(r, "dim", CHANNELS, REDUCTION))?;
        let (xs, x0) = (uniform(shape, &mut rng, 1.0), uniform(shape, &mut rng, 1.0));
        dim.add(
            &blocks::mt_dim(&x, &xs, &x0, &d64)?,
            &blocks::mt_dim(&x32, &xs.cast(), &x0.cast(), &d32)?,
            &oracle::mt_dim(&x, &xs, &x0, &d64),
        );

        let dims = PromptDims {
            channels: CHANNELS,
            entries: 5,
            height: 4,
            width: 4,
            heads: HEADS,
            reduction: REDUCTION,
        };
        let store = random_store(ws + 3, |s| PromptCodebook::<f64>::new(s, "prompt", dims, false))?;
        let c64: PromptCodebook<f64> = load(&store, |r| PromptCodebook::new(r, "prompt", dims, false))?;
        let c32: PromptCodebook<f32> = load(&store, |r| PromptCodebook::new(r, "prompt", dims, false))?;
        let (m64, m32, want) = (prompt::pam(&x, &c64)?, prompt::pam(&x32, &c32)?, oracle::pam(&x, &c64));
        pam.add(&m64.weights, &m32.weights, &want.weights);
        pam.add(&m64.channel, &m32.channel, &want.channel);
        pam.add(&m64.spatial, &m32.spatial, &want.spatial);
        let (ch32, sp32) = (want.channel.cast(), want.spatial.cast());
        pim.add(
            &prompt::sc_pim(&x, &want.channel, &want.spatial, &c64)?,
            &prompt::sc_pim(&x32, &ch32, &sp32, &c32)?,
            &oracle::sc_pim(&x, &want.channel, &want.spatial, &c64),
        );
    }
    let mut out = Vec::new();
    for (module, e) in [("ssm_2d", scan), ("channel_attention", attn), ("mt_dim", dim), ("pam", pam), ("sc_pim", pim)] {
        out.extend(e.rows(module));
    }
    Ok(out)
}

fn reverse_sequence(t: &Tensor<f64>) -> Tensor<f64> {
    let s = t.shape();
    Tensor::from_fn(s, |[n, _, l, c]| t.at(n, 0, s.w() - 1 - l, c))
}

fn mismatches(a: &Tensor<f64>, b: &Tensor<f64>) -> usize {
    if a.shape() != b.shape() {
        return a.numel().max(b.numel());
    }
    a.data().iter().zip(b.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count()
}

const ROUTES_3X3: [&str; 4] = ["abcdefghi", "ihgfedcba", "cfibehadg", "gdahebifc"];

/// Route bijections, the hand-enumerated 3×3 orders, and the duality of the
/// bottom-right route with the reversed top-left sequence as seen through
/// the merged output. All comparisons are bit-exact.
pub fn route_checks(seed: u64, grids: usize, fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7075);
    let labels = Tensor::<f64>::from_fn([1, 3, 3, 1], |[_, y, x, _]| (y * 3 + x) as f64);
    let wrong_3x3 = ScanDirection::ALL
        .iter()
        .zip(ROUTES_3X3)
        .filter(|(dir, want)| {
            let got: String = ssm::route_flatten(&labels, **dir).data().iter().map(|&v| (b'a' + v as u8) as char).collect();
            got != *want
        })
        .count();

    let mut align = ScanDirection::ALL;
    if fault == Some(Fault::MisalignedMerge) {
        align[ScanDirection::BottomRight.index()] = ScanDirection::TopLeft;
    }
    let (mut round_trip, mut non_permutations, mut duality) = (0usize, 0usize, 0usize);
    for g in 0..grids {
        let (h, w, c) = (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=3));
        let x = uniform([1, h, w, c], &mut rng, 1.0);
        for dir in ScanDirection::ALL {
            let back = ssm::route_unflatten(&ssm::route_flatten(&x, dir), dir, h, w)?;
            round_trip += mismatches(&back, &x);
            let mut order = dir.order(h, w);
            order.sort_unstable();
            non_permutations += usize::from(order != (0..h * w).collect::<Vec<_>>());
        }
        let store = random_store(seed.wrapping_add(g as u64), |s| Ssm2d::<f64>::new(s, "ssm", c, 2))?;
        let p: Ssm2d<f64> = load(&store, |r| Ssm2d::new(r, "ssm", c, 2))?;
        let t = Tape::inference();
        let xv = t.constant(x.clone());
        let merged = p.forward_aligned(&t, &xv, align)?.into_tensor();
        // the bottom-right route rebuilt from the reversed top-left sequence
        let seq = reverse_sequence(&ssm::route_flatten(&x, ScanDirection::TopLeft));
        let y = reverse_sequence(&ssm::selective_scan_1d(&seq, &p.routes[1])?);
        let dual = t.constant(ssm::route_unflatten(&y, ScanDirection::TopLeft, h, w)?);
        let mut acc = p.route(&t, &xv, ScanDirection::TopLeft)?;
        acc = t.add(&acc, &dual)?;
        for dir in [ScanDirection::TopRight, ScanDirection::BottomLeft] {
            acc = t.add(&acc, &p.route(&t, &xv, dir)?)?;
        }
        duality += mismatches(&merged, &acc.into_tensor());
    }
    Ok(vec![
        CheckResult::at_most("route.orders_3x3", 0.0, wrong_3x3 as f64),
        CheckResult::at_most("route.orders_are_permutations", 0.0, non_permutations as f64),
        CheckResult::at_most("route.round_trip_mismatches", 0.0, round_trip as f64),
        CheckResult::at_most("route.duality_mismatches", 0.0, duality as f64),
    ])
}

/// Attention-map rows and prompt weights over `trials` random draws at 32
/// bits, the inference precision.
pub fn normalization_checks(seed: u64, trials: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f);
    let (mut row_err, mut weight_err, mut outside) = (0.0f64, 0.0f64, 0usize);
    for trial in 0..trials {
        let ws = seed.wrapping_add(trial as u64);
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let normalize = rng.gen_bool(0.5);
        let side = rng.gen_range(1..=6);
        let scale = rng.gen_range(0.1..30.0);
        let store = random_store(ws, |s| ChannelAttnWeights::<f64>::new(s, "attn", CHANNELS, heads, normalize))?;
        let w: ChannelAttnWeights<f32> = load(&store, |r| ChannelAttnWeights::new(r, "attn", CHANNELS, heads, normalize))?;
        let x: Tensor<f32> = uniform([1, side, side, CHANNELS], &mut rng, scale).cast();
        for row in attention::attention_maps(&x, &w)?.data().chunks_exact(CHANNELS / heads) {
            let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
            row_err = row_err.max((s - 1.0).abs());
        }

        let entries = rng.gen_range(2..=6);
        let dims = PromptDims {
            channels: CHANNELS,
            entries,
            height: 3,
            width: 3,
            heads: HEADS,
            reduction: REDUCTION,
        };
        let store = random_store(ws ^ 0x55, |s| PromptCodebook::<f64>::new(s, "prompt", dims, false))?;
        let cb: PromptCodebook<f32> = load(&store, |r| PromptCodebook::new(r, "prompt", dims, false))?;
        let scale = rng.gen_range(0.1..100.0);
        let x: Tensor<f32> = uniform([2, 4, 4, CHANNELS], &mut rng, scale).cast();
        for item in prompt::pam(&x, &cb)?.weights.data().chunks_exact(entries) {
            let s: f64 = item.iter().map(|&v| f64::from(v)).sum();
            weight_err = weight_err.max((s - 1.0).abs());
            outside += item.iter().filter(|&&v| !(v > 0.0 && v < 1.0)).count();
        }
    }
    Ok(vec![
        CheckResult::at_most("normalization.attention_row_sum", NORMALIZATION_TOL, row_err),
        CheckResult::at_most("normalization.prompt_weight_sum", NORMALIZATION_TOL, weight_err),
        CheckResult::at_most("normalization.prompt_weights_outside_open_unit", 0.0, outside as f64),
    ])
}

pub const GRADIENT_BLOCKS: [GradBlock; 4] = [
    GradBlock::ChannelAttention,
    GradBlock::SelectiveScan,
    GradBlock::MtDhb,
    GradBlock::ScPromptBlock,
];

/// Worst per-entry central-difference error (h = 1e-4) of each block on a
/// 1×4×4×8 input.
pub fn gradient_checks(seed: u64) -> Result<Vec<CheckResult>> {
    GRADIENT_BLOCKS
        .iter()
        .map(|&b| {
            let r = gradcheck(b, 4, CHANNELS, seed, FdConfig { extrapolate: false, ..FdConfig::default() })?;
            Ok(CheckResult::at_most(format!("gradient.{b}"), GRADIENT_TOL, r.max_rel_err()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nan_never_passes() {
        assert!(!CheckResult::at_most("x", 1.0, f64::NAN).pass);
        assert!(CheckResult::at_most("x", 0.0, 0.0).pass);
    }

    #[test]
    fn report_round_trips_through_json() {
        let r = CheckReport::new(vec![
            CheckResult::at_most("a", 1e-6, 3.5e-7),
            CheckResult::at_most("b", 0.0, 2.0),
        ]);
        assert!(!r.passed);
        let back: CheckReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.failures().map(|c| c.property.as_str()).collect::<Vec<_>>(), ["b"]);
    }

    #[test]
    fn route_checks_pass_and_catch_the_fault() {
        let good = route_checks(1, 12, None).unwrap();
        assert!(good.iter().all(|c| c.pass), "{good:?}");
        let bad = route_checks(1, 12, Some(Fault::MisalignedMerge)).unwrap();
        let failed: Vec<_> = bad.iter().filter(|c| !c.pass).map(|c| c.property.as_str()).collect();
        assert_eq!(failed, ["route.duality_mismatches"]);
    }
}
