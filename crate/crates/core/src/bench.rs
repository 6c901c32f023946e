//! Wall-clock comparison of the convolution variants with analytic multiply counts.

use std::fmt::Write as _;
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{QuanError, Result};
use crate::layers::{init_weights, qconv2d_forward, qconv2d_forward_unfused, ConvMode, ConvSpec, InitScheme, OpCounter, QConvParams};
use crate::tensor::{QTensor, Shape};

pub const MIN_REPEATS: usize = 30;
/// Fused and multi-pass outputs must agree this closely before anything is timed.
pub const SELF_CHECK_TOLERANCE: f64 = 1e-6;
pub const CSV_HEADER: &str = "case,mode,median_ms,mults";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Single pass over the taps with the sign mixing folded in.
    Separable,
    /// Four separate component convolutions, then mixing.
    SeparableNaive,
    FullHamilton,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Separable, Variant::SeparableNaive, Variant::FullHamilton];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Separable => "separable",
            Variant::SeparableNaive => "separable_naive",
            Variant::FullHamilton => "full_hamilton",
        }
    }

    fn mode(self) -> ConvMode {
        match self {
            Variant::FullHamilton => ConvMode::FullHamilton,
            _ => ConvMode::Separable,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchCase {
    pub name: String,
    pub input: Shape,
    /// Mode is set per variant.
    pub spec: ConvSpec,
}

impl BenchCase {
    pub fn new(name: impl Into<String>, input: Shape, spec: ConvSpec) -> Self {
        BenchCase {
            name: name.into(),
            input,
            spec,
        }
    }

    /// `B × C × H × W` input with a `C → C` same-padded square kernel.
    pub fn square(batch: usize, channels: usize, side: usize, kernel: usize) -> Self {
        BenchCase::new(
            format!("{batch}x{channels}x{side}x{side}_k{kernel}"),
            Shape::new(batch, channels, side, side),
            ConvSpec::new(channels, channels, kernel).same(),
        )
    }
}

pub fn default_cases() -> Vec<BenchCase> {
    vec![
        BenchCase::square(1, 32, 64, 3),
        BenchCase::square(1, 16, 32, 3),
        BenchCase::square(4, 8, 32, 5),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub case: String,
    pub variant: Variant,
    pub input: Shape,
    pub kernel: [usize; 5],
    pub median_ms: f64,
    pub mults: u64,
    /// Largest relative deviation of the fused output from the multi-pass one.
    pub self_check: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub repeats: usize,
}

impl BenchReport {
    fn row(&self, case: &str, v: Variant) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.case == case && r.variant == v)
    }

    /// Full-Hamilton over separable multiplies.
    pub fn mult_ratio(&self, case: &str) -> Option<f64> {
        let full = self.row(case, Variant::FullHamilton)?;
        let sep = self.row(case, Variant::Separable)?;
        Some(full.mults as f64 / sep.mults as f64)
    }

    /// Median wall-clock time of `num` over that of `den`.
    pub fn time_ratio(&self, case: &str, num: Variant, den: Variant) -> Option<f64> {
        Some(self.row(case, num)?.median_ms / self.row(case, den)?.median_ms)
    }

    pub fn cases(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.case.as_str()) {
                out.push(&r.case);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.case, r.variant.name(), r.median_ms, r.mults).expect("writing to a String");
        }
        s
    }

    /// Human-readable table with the per-case ratios.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for case in self.cases() {
            let full = self.time_ratio(case, Variant::FullHamilton, Variant::Separable).unwrap_or(f64::NAN);
            let naive = self.time_ratio(case, Variant::SeparableNaive, Variant::Separable).unwrap_or(f64::NAN);
            let mults = self.mult_ratio(case).unwrap_or(f64::NAN);
            writeln!(
                s,
                "{case}: multiplies full/separable {mults:.1}, time full/separable {full:.2}, naive/fused {naive:.2}"
            )
            .expect("writing to a String");
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn max_relative_deviation(a: &QTensor<f32>, b: &QTensor<f32>) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max((*v as f64).abs())).max(1e-12);
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((*x as f64 - *y as f64).abs()))
        / scale
}

/// Median milliseconds per closure. Repeats are interleaved across the
/// closures so slow periods on a shared machine hit every variant alike.
fn time_interleaved(repeats: usize, fs: &mut [Box<dyn FnMut() -> Result<QTensor<f32>> + '_>]) -> Result<Vec<f64>> {
    // One untimed warm-up call each.
    for f in fs.iter_mut() {
        f()?;
    }
    let mut samples = vec![Vec::with_capacity(repeats); fs.len()];
    for _ in 0..repeats {
        for (f, out) in fs.iter_mut().zip(&mut samples) {
            let t = Instant::now();
            std::hint::black_box(f()?);
            out.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(samples.into_iter().map(median).collect())
}

/// Times every variant on every case in `f32`. Each mode's fused output is
/// checked against its multi-pass evaluation first; a failed check aborts
/// the run without reporting times.
pub fn bench_conv(cases: &[BenchCase], repeats: usize, seed: u64) -> Result<BenchReport> {
    if repeats < MIN_REPEATS {
        return Err(QuanError::Range(format!(
            "benchmark needs at least {MIN_REPEATS} repeats, got {repeats}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-1.0f64, 1.0).expect("finite bounds");
    let mut report = BenchReport {
        rows: Vec::new(),
        repeats,
    };
    for case in cases {
        let s = case.input;
        let data = (0..s.numel()).map(|_| dist.sample(&mut rng) as f32).collect();
        let x = QTensor::from_vec(s.dims(), data)?;
        let weights: Vec<f32> = init_weights(case.spec.weight_dims(), InitScheme::QuaternionUniform, &mut rng);
        let bias: Vec<f32> = (0..case.spec.bias_len()).map(|_| dist.sample(&mut rng) as f32).collect();

        let mut checks = [0.0f64; 2];
        for (slot, mode) in [ConvMode::Separable, ConvMode::FullHamilton].into_iter().enumerate() {
            let p = QConvParams::new(case.spec.mode(mode), &weights, Some(&bias))?;
            let fused = qconv2d_forward(&x, &p)?;
            let multi = qconv2d_forward_unfused(&x, &p, &mut OpCounter::default())?;
            let dev = max_relative_deviation(&fused, &multi);
            if dev.is_nan() || dev > SELF_CHECK_TOLERANCE {
                return Err(QuanError::Numeric(format!(
                    "{}: fused {} output deviates from the multi-pass result by {dev:e}",
                    case.name,
                    mode.name()
                )));
            }
            checks[slot] = dev;
        }

        let params: Vec<QConvParams<'_, f32>> = Variant::ALL
            .iter()
            .map(|v| QConvParams::new(case.spec.mode(v.mode()), &weights, Some(&bias)))
            .collect::<Result<_>>()?;
        let mut runs: Vec<Box<dyn FnMut() -> Result<QTensor<f32>> + '_>> = Variant::ALL
            .iter()
            .zip(&params)
            .map(|(v, p)| -> Box<dyn FnMut() -> Result<QTensor<f32>> + '_> {
                match v {
                    Variant::SeparableNaive => Box::new(|| qconv2d_forward_unfused(&x, p, &mut OpCounter::default())),
                    _ => Box::new(|| qconv2d_forward(&x, p)),
                }
            })
            .collect();
        let medians = time_interleaved(repeats, &mut runs)?;
        drop(runs);
        for ((v, p), median_ms) in Variant::ALL.into_iter().zip(&params).zip(medians) {
            report.rows.push(BenchRow {
                case: case.name.clone(),
                variant: v,
                input: s,
                kernel: p.spec.weight_dims(),
                median_ms,
                mults: p.spec.multiplies(s)?,
                self_check: checks[usize::from(v == Variant::FullHamilton)],
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn small_case_report() {
        let cases = [BenchCase::square(1, 2, 6, 3)];
        assert!(bench_conv(&cases, 5, 0).is_err());
        let r = bench_conv(&cases, MIN_REPEATS, 0).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.mult_ratio("1x2x6x6_k3"), Some(4.0));
        assert!(r.rows.iter().all(|row| row.self_check <= SELF_CHECK_TOLERANCE && row.median_ms >= 0.0));
        let csv = r.to_csv();
        assert!(csv.starts_with("case,mode,median_ms,mults\n1x2x6x6_k3,separable,"));
        assert_eq!(csv.lines().count(), 4);
    }
}
