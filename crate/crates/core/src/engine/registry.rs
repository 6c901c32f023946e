//! Every differentiable layer and loss, paired with a gradient check.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::gradcheck::{check_loss, check_module, GradReport};
use crate::error::Result;
use crate::layers::{
    Activation, ActivationKind, BlockConfig, ConvMode, ConvSpec, GlobalAvgPool, InitScheme, Iqbn, Module,
    ParamKind, PoolSpec, QBottleneck, QC2PSA, QC3k2, QConv, QMaxPool, QSPPF,
};
use crate::losses::{
    angular_loss, ciou_loss, cls_loss, reg_loss, smooth_loss, total_loss, BoxXywh, ClsMode, LossTerms,
    LossWeights,
};
use crate::quaternion::Quaternion;
use crate::tensor::{QTensor, Shape};

/// Pass threshold for the 64-bit gradient suite.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseKind {
    Layer,
    Loss,
}

impl CaseKind {
    pub fn name(self) -> &'static str {
        match self {
            CaseKind::Layer => "layer",
            CaseKind::Loss => "loss",
        }
    }
}

pub struct GradcheckCase {
    pub name: &'static str,
    pub kind: CaseKind,
    run: fn(u64) -> Result<GradReport>,
}

impl GradcheckCase {
    /// Runs the check on three random instances derived from `seed`.
    pub fn run(&self, seed: u64) -> Result<GradReport> {
        (self.run)(seed)
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckRow {
    pub name: &'static str,
    pub kind: CaseKind,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Coordinates with no influence on the output, e.g. kernel components
    /// cancelled by a component mean.
    pub inert: usize,
    pub error: Option<String>,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error.is_finite() && self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

type Builder = fn(usize, Shape, &mut ChaCha8Rng) -> Result<Box<dyn Module<f64>>>;

fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> QTensor<f64> {
    let unit = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let mut t = QTensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = unit.sample(rng));
    t
}

/// Moves affine parameters off their initial constants so their gradients
/// are exercised at a generic point.
fn jitter(module: &mut dyn Module<f64>, rng: &mut ChaCha8Rng) {
    for p in module.params_mut() {
        if matches!(p.kind, ParamKind::Scale | ParamKind::Shift | ParamKind::Slope | ParamKind::Bias) {
            p.value.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
}

fn layer_case(seed: u64, shapes: [[usize; 4]; 3], build: Builder) -> Result<GradReport> {
    let mut report = GradReport::default();
    for (i, s) in shapes.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let shape = Shape::new(s[0], s[1], s[2], s[3]);
        let mut m = build(i, shape, &mut rng)?;
        jitter(m.as_mut(), &mut rng);
        let x = random_tensor(shape, &mut rng);
        report = report.merge(check_module(m.as_mut(), &x, rng.random())?);
    }
    Ok(report)
}

fn conv_case(mode: ConvMode, seed: u64) -> Result<GradReport> {
    let build: Builder = match mode {
        ConvMode::Separable => |i, s, rng| {
            let spec = match i {
                0 => ConvSpec::new(s.channels, 2, 3).padding(1),
                1 => ConvSpec::new(s.channels, 3, 3).stride(2),
                _ => ConvSpec::new(s.channels, 2, 1),
            };
            Ok(Box::new(QConv::new("conv", spec, true, InitScheme::QuaternionUniform, rng)?))
        },
        ConvMode::FullHamilton => |i, s, rng| {
            let spec = match i {
                0 => ConvSpec::new(s.channels, 2, 3),
                1 => ConvSpec::new(s.channels, 3, 3).stride(2).padding(1),
                _ => ConvSpec::new(s.channels, 2, 1),
            };
            let spec = spec.mode(ConvMode::FullHamilton);
            Ok(Box::new(QConv::new("conv", spec, true, InitScheme::ComponentHe, rng)?))
        },
    };
    layer_case(seed, [[2, 3, 5, 5], [1, 2, 6, 5], [2, 1, 4, 4]], build)
}

fn activation_case(kind: ActivationKind, seed: u64) -> Result<GradReport> {
    let build: Builder = match kind {
        ActivationKind::Silu => |_, _, _| Ok(Box::new(Activation::new("act", ActivationKind::Silu))),
        ActivationKind::Relu => |_, _, _| Ok(Box::new(Activation::new("act", ActivationKind::Relu))),
        ActivationKind::Qprelu => |_, _, _| Ok(Box::new(Activation::new("act", ActivationKind::Qprelu))),
    };
    layer_case(seed, [[2, 2, 3, 3], [1, 1, 4, 5], [3, 2, 2, 2]], build)
}

fn cfg() -> BlockConfig {
    BlockConfig::default()
}

fn random_box(rng: &mut ChaCha8Rng) -> BoxXywh {
    BoxXywh::new(
        rng.random_range(-0.6..0.6),
        rng.random_range(-0.6..0.6),
        rng.random_range(0.5..2.5),
        rng.random_range(0.5..2.5),
    )
}

fn random_quaternion(rng: &mut ChaCha8Rng) -> Quaternion {
    Quaternion::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    )
}

type LossFn = fn(&[f64]) -> Result<(f64, Vec<f64>)>;

fn loss_case(seed: u64, point: fn(&mut ChaCha8Rng) -> Vec<f64>, f: LossFn) -> Result<GradReport> {
    let mut report = GradReport::default();
    for i in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i));
        let x = point(&mut rng);
        report = report.merge(check_loss(f, &x, rng.random())?);
    }
    Ok(report)
}

const CLS_BATCH: usize = 3;
const CLS_CLASSES: usize = 5;
const CLS_LABELS: [usize; CLS_BATCH] = [4, 0, 2];

fn logits_point(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..CLS_BATCH * CLS_CLASSES).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn quat(x: &[f64]) -> Quaternion {
    Quaternion::new(x[0], x[1], x[2], x[3])
}

/// Fixed targets shared by the loss cases; the checked point is the prediction.
fn ciou_target() -> BoxXywh {
    BoxXywh::new(0.1, -0.2, 1.7, 0.9)
}

fn angle_target() -> Quaternion {
    Quaternion::new(0.3, -0.5, 0.7, 0.1).normalized().expect("nonzero")
}

fn total_value(x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let w = LossWeights::default();
    let n = CLS_BATCH * CLS_CLASSES;
    let (cls, g_cls) = cls_loss(&x[..n], &CLS_LABELS, CLS_CLASSES, ClsMode::Binary)?;
    let b = BoxXywh::from_array([x[n], x[n + 1], x[n + 2], x[n + 3]]);
    let (ciou, g_box) = ciou_loss(b, ciou_target())?;
    let q = quat(&x[n + 4..n + 8]);
    let (angular, g_ang) = angular_loss(q, angle_target())?;
    let (reg, g_reg) = reg_loss(q);
    let seq: Vec<Quaternion> = x[n + 8..].chunks_exact(4).map(quat).collect();
    let (smooth, g_seq) = smooth_loss(&seq)?;
    let terms = LossTerms {
        cls,
        ciou,
        angular,
        reg,
        smooth,
    };
    let value = total_loss(&terms, &w)?;
    let c = w.coefficients();
    let mut g: Vec<f64> = g_cls.iter().map(|v| c[0] * v).collect();
    g.extend(g_box.iter().map(|v| c[1] * v));
    g.extend((g_ang.scale(c[2]) + g_reg.scale(c[3])).to_array());
    for q in g_seq {
        g.extend(q.scale(c[4]).to_array());
    }
    Ok((value, g))
}

/// The full registry, layers first.
pub fn registry() -> Vec<GradcheckCase> {
    use CaseKind::{Layer, Loss};
    vec![
        GradcheckCase {
            name: "qconv_separable",
            kind: Layer,
            run: |s| conv_case(ConvMode::Separable, s),
        },
        GradcheckCase {
            name: "qconv_full_hamilton",
            kind: Layer,
            run: |s| conv_case(ConvMode::FullHamilton, s),
        },
        GradcheckCase {
            name: "iqbn",
            kind: Layer,
            run: |s| {
                layer_case(s, [[2, 2, 3, 3], [4, 1, 2, 2], [1, 3, 4, 4]], |_, sh, _| {
                    Ok(Box::new(Iqbn::new("bn", sh.channels)))
                })
            },
        },
        GradcheckCase {
            name: "silu",
            kind: Layer,
            run: |s| activation_case(ActivationKind::Silu, s),
        },
        GradcheckCase {
            name: "relu",
            kind: Layer,
            run: |s| activation_case(ActivationKind::Relu, s),
        },
        GradcheckCase {
            name: "qprelu",
            kind: Layer,
            run: |s| activation_case(ActivationKind::Qprelu, s),
        },
        GradcheckCase {
            name: "qmaxpool",
            kind: Layer,
            run: |s| {
                layer_case(s, [[1, 2, 4, 4], [2, 1, 5, 5], [1, 1, 6, 5]], |i, _, _| {
                    let spec = match i {
                        0 => PoolSpec::new(2, 2),
                        1 => PoolSpec::new(3, 1).padding(1),
                        _ => PoolSpec::new(2, 1),
                    };
                    Ok(Box::new(QMaxPool::new(spec)))
                })
            },
        },
        GradcheckCase {
            name: "global_avg_pool",
            kind: Layer,
            run: |s| layer_case(s, [[2, 2, 3, 3], [1, 1, 4, 5], [3, 1, 1, 2]], |_, _, _| Ok(Box::new(GlobalAvgPool::new()))),
        },
        GradcheckCase {
            name: "qbottleneck",
            kind: Layer,
            run: |s| {
                layer_case(s, [[1, 2, 4, 4], [2, 1, 3, 3], [1, 2, 3, 5]], |i, sh, rng| {
                    let out = if i == 2 { 3 } else { sh.channels };
                    Ok(Box::new(QBottleneck::new("bottleneck", sh.channels, out, cfg(), rng)?))
                })
            },
        },
        GradcheckCase {
            name: "qsppf",
            kind: Layer,
            run: |s| {
                layer_case(s, [[1, 2, 5, 5], [1, 1, 6, 6], [2, 2, 4, 4]], |i, sh, rng| {
                    let (k, out) = [(3, 2), (5, 2), (3, 4)][i];
                    Ok(Box::new(QSPPF::new("sppf", sh.channels, out, k, cfg(), rng)?))
                })
            },
        },
        GradcheckCase {
            name: "qc3k2",
            kind: Layer,
            run: |s| {
                layer_case(s, [[1, 4, 6, 6], [2, 2, 4, 4], [1, 4, 5, 3]], |i, sh, rng| {
                    let out = [4, 2, 6][i];
                    Ok(Box::new(QC3k2::new("c3k2", sh.channels, out, cfg(), rng)?))
                })
            },
        },
        GradcheckCase {
            name: "qc2psa",
            kind: Layer,
            run: |s| {
                layer_case(s, [[1, 4, 5, 5], [2, 2, 3, 3], [1, 6, 4, 4]], |i, sh, rng| {
                    let out = [4, 2, 3][i];
                    Ok(Box::new(QC2PSA::new("psa", sh.channels, out, cfg(), rng)?))
                })
            },
        },
        GradcheckCase {
            name: "cls_softmax",
            kind: Loss,
            run: |s| loss_case(s, logits_point, |x| cls_loss(x, &CLS_LABELS, CLS_CLASSES, ClsMode::Softmax)),
        },
        GradcheckCase {
            name: "cls_bce",
            kind: Loss,
            run: |s| loss_case(s, logits_point, |x| cls_loss(x, &CLS_LABELS, CLS_CLASSES, ClsMode::Binary)),
        },
        GradcheckCase {
            name: "ciou",
            kind: Loss,
            run: |s| {
                loss_case(
                    s,
                    |rng| random_box(rng).to_array().to_vec(),
                    |x| {
                        let (v, g) = ciou_loss(BoxXywh::from_array([x[0], x[1], x[2], x[3]]), ciou_target())?;
                        Ok((v, g.to_vec()))
                    },
                )
            },
        },
        GradcheckCase {
            name: "angular",
            kind: Loss,
            run: |s| {
                loss_case(
                    s,
                    |rng| random_quaternion(rng).to_array().to_vec(),
                    |x| {
                        let (v, g) = angular_loss(quat(x), angle_target())?;
                        Ok((v, g.to_array().to_vec()))
                    },
                )
            },
        },
        GradcheckCase {
            name: "reg",
            kind: Loss,
            run: |s| {
                loss_case(
                    s,
                    |rng| random_quaternion(rng).to_array().to_vec(),
                    |x| {
                        let (v, g) = reg_loss(quat(x));
                        Ok((v, g.to_array().to_vec()))
                    },
                )
            },
        },
        GradcheckCase {
            name: "smooth",
            kind: Loss,
            run: |s| {
                loss_case(
                    s,
                    |rng| (0..5).flat_map(|_| random_quaternion(rng).to_array()).collect(),
                    |x| {
                        let seq: Vec<Quaternion> = x.chunks_exact(4).map(quat).collect();
                        let (v, g) = smooth_loss(&seq)?;
                        Ok((v, g.iter().flat_map(|q| q.to_array()).collect()))
                    },
                )
            },
        },
        GradcheckCase {
            name: "total",
            kind: Loss,
            run: |s| {
                loss_case(
                    s,
                    |rng| {
                        let mut x = logits_point(rng);
                        x.extend(random_box(rng).to_array());
                        for _ in 0..4 {
                            x.extend(random_quaternion(rng).to_array());
                        }
                        x
                    },
                    total_value,
                )
            },
        },
    ]
}

/// Seed used by the shipped suite and the `gradcheck` command.
pub const DEFAULT_SEED: u64 = 0;

/// Runs every registered case.
pub fn run_all(seed: u64) -> Vec<GradcheckRow> {
    registry()
        .into_iter()
        .map(|case| {
            let (report, error) = match case.run(seed) {
                Ok(r) => (r, None),
                Err(e) => (
                    GradReport {
                        max_rel_error: f64::NAN,
                        ..GradReport::default()
                    },
                    Some(e.to_string()),
                ),
            };
            GradcheckRow {
                name: case.name,
                kind: case.kind,
                max_rel_error: report.max_rel_error,
                max_abs_error: report.max_abs_error,
                checked: report.checked,
                inert: report.inert,
                error,
            }
        })
        .collect()
}
