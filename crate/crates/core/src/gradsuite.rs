//! Finite-difference checks over every tensor op, the attention block and both losses.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::apra::{apra_forward, camera_head, ApraConfig, ApraParams, ApraVars};
use crate::error::Result;
use crate::exec::{map_indexed, Exec};
use crate::tensor::{grad_check_scaled, GradCheckReport, OpKind, PoolMode, Shape, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const SMOOTH_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_SEEDS: usize = 20;

#[derive(Debug, Clone, Copy)]
pub struct SuiteConfig {
    pub seeds: usize,
    pub base_seed: u64,
    pub step: f64,
    /// Doubles the backward rule of this op in every case, to prove the suite notices.
    pub fault: Option<OpKind>,
    pub exec: Exec,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seeds: DEFAULT_SEEDS,
            base_seed: 0,
            step: STEP,
            fault: None,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub smooth: bool,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub worst: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
    pub fault: Option<OpKind>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases.iter().filter(|c| !c.passed()).collect()
    }

    pub fn case(&self, name: &str) -> Option<&CaseResult> {
        self.cases.iter().find(|c| c.name == name)
    }
}

type Eval = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

struct Instance {
    inputs: Vec<Tensor>,
    eval: Eval,
    /// Expected ratio of analytic to numeric gradient.
    factor: f64,
}

impl Instance {
    fn new(inputs: Vec<Tensor>, eval: Eval) -> Self {
        Instance {
            inputs,
            eval,
            factor: 1.0,
        }
    }
}

pub struct Case {
    pub name: &'static str,
    pub smooth: bool,
    build: fn(&mut ChaCha8Rng) -> Instance,
}

impl Case {
    pub fn tolerance(&self) -> f64 {
        if self.smooth { SMOOTH_TOLERANCE } else { TOLERANCE }
    }
}

/// Shuffled, evenly spaced magnitudes in `[0.1, 1)` with random signs: no
/// value sits near a ReLU kink and no two values nearly tie under a max.
fn sample(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.numel();
    let spacing = 0.9 / n as f64;
    let mut data: Vec<f64> = (0..n)
        .map(|i| 0.1 + spacing * (i as f64 + rng.random_range(0.25..0.75)))
        .collect();
    data.shuffle(rng);
    for v in &mut data {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    Tensor::from_vec(shape, data).expect("shape matches length")
}

fn scaled(shape: Shape, factor: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = sample(shape, rng);
    t.data_mut().iter_mut().for_each(|v| *v *= factor);
    t
}

/// Scalarizes `out` against fixed weights so every coordinate contributes.
fn weighted(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul_broadcast(out, w)?;
    tape.sum(p)
}

fn unary(
    rng: &mut ChaCha8Rng,
    shape: Shape,
    out_shape: Shape,
    op: fn(&mut Tape, Var) -> Result<Var>,
) -> Instance {
    let x = sample(shape, rng);
    let w = sample(out_shape, rng);
    Instance::new(
        vec![x],
        Box::new(move |tape, v| {
            let y = op(tape, v[0])?;
            weighted(tape, y, &w)
        }),
    )
}

fn binary(
    rng: &mut ChaCha8Rng,
    a: Shape,
    b: Shape,
    out_shape: Shape,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Instance {
    let inputs = vec![sample(a, rng), sample(b, rng)];
    let w = sample(out_shape, rng);
    Instance::new(
        inputs,
        Box::new(move |tape, v| {
            let y = op(tape, v[0], v[1])?;
            weighted(tape, y, &w)
        }),
    )
}

const X: Shape = Shape([2, 8, 8, 8]);
const SMALL: Shape = Shape([2, 8, 4, 4]);

fn conv_case(rng: &mut ChaCha8Rng, x: Shape, k: Shape, stride: usize) -> Instance {
    let out = Shape::new(x.n(), k.n(), x.h().div_ceil(stride), x.w().div_ceil(stride));
    let inputs = vec![
        sample(x, rng),
        scaled(k, 0.5, rng),
        sample(Shape::new(1, k.n(), 1, 1), rng),
    ];
    let w = sample(out, rng);
    Instance::new(
        inputs,
        Box::new(move |tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], stride)?;
            weighted(tape, y, &w)
        }),
    )
}

fn pairwise_distances(rows: &[&[f64]]) -> Vec<f64> {
    let n = rows.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    d
}

/// True when hardest-example selection and every hinge are at least `gap`
/// away from switching.
fn triplet_well_separated(emb: &Tensor, labels: &[usize], margin: f64, gap: f64) -> bool {
    let rows: Vec<&[f64]> = emb.rows().collect();
    let n = rows.len();
    let d = pairwise_distances(&rows);
    (0..n).all(|a| {
        let mut pos: Vec<f64> = (0..n).filter(|&j| j != a && labels[j] == labels[a]).map(|j| d[a * n + j]).collect();
        let mut neg: Vec<f64> = (0..n).filter(|&j| labels[j] != labels[a]).map(|j| d[a * n + j]).collect();
        pos.sort_by(|x, y| y.total_cmp(x));
        neg.sort_by(f64::total_cmp);
        let clear = |v: &[f64]| v.len() < 2 || v[1] - v[0] >= gap || v[0] - v[1] >= gap;
        clear(&pos) && clear(&neg) && (pos[0] - neg[0] + margin).abs() >= gap
    })
}

fn triplet_instance(rng: &mut ChaCha8Rng) -> Instance {
    let labels: Vec<usize> = (0..9).map(|i| i / 3).collect();
    let margin = 1.0;
    let emb = loop {
        let e = sample(Shape::new(9, 4, 1, 1), rng);
        if triplet_well_separated(&e, &labels, margin, 1e-3) {
            break e;
        }
    };
    Instance::new(
        vec![emb],
        Box::new(move |tape, v| tape.triplet_batch_hard(v[0], &labels, margin)),
    )
}

fn apra_instance(rng: &mut ChaCha8Rng) -> Instance {
    let mut config = ApraConfig::new(16);
    config.reduction_ratio = 4;
    let mut params = ApraParams::init(&config, 3, rng);
    for layer in params.layers_mut() {
        let s = layer.bias.shape();
        layer.bias = scaled(s, 0.2, rng);
    }
    // The block sits after a conv + relu, so its input is non-negative.
    let mut f = sample(Shape::new(2, 16, 6, 6), rng);
    f.data_mut().iter_mut().for_each(|v| *v = v.abs());
    let w_person = sample(Shape::new(2, 16, 6, 6), rng);
    let w_camera = sample(Shape::new(2, 3, 1, 1), rng);
    let mut inputs = vec![f];
    inputs.extend(params.tensors());
    Instance::new(
        inputs,
        Box::new(move |tape, v| {
            let vars = ApraVars::from_slice(&v[1..])?;
            let out = apra_forward(tape, v[0], &vars)?;
            let logits = camera_head(tape, out.camera, &vars)?;
            let a = weighted(tape, out.person, &w_person)?;
            let b = weighted(tape, logits, &w_camera)?;
            tape.add(a, b)
        }),
    )
}

pub fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "mul_broadcast/channel",
            smooth: true,
            build: |r| binary(r, SMALL, Shape::new(2, 8, 1, 1), SMALL, Tape::mul_broadcast),
        },
        Case {
            name: "mul_broadcast/spatial",
            smooth: true,
            build: |r| binary(r, SMALL, Shape::new(2, 1, 4, 4), SMALL, Tape::mul_broadcast),
        },
        Case {
            name: "add",
            smooth: true,
            build: |r| binary(r, SMALL, SMALL, SMALL, Tape::add),
        },
        Case {
            name: "relu",
            smooth: false,
            build: |r| unary(r, X, X, Tape::relu),
        },
        Case {
            name: "sigmoid",
            smooth: true,
            build: |r| unary(r, X, X, Tape::sigmoid),
        },
        Case {
            name: "pool_global/avg",
            smooth: true,
            build: |r| unary(r, X, Shape::new(2, 8, 1, 1), |t, x| t.pool_global(x, PoolMode::Avg)),
        },
        Case {
            name: "pool_global/max",
            smooth: false,
            build: |r| unary(r, X, Shape::new(2, 8, 1, 1), |t, x| t.pool_global(x, PoolMode::Max)),
        },
        Case {
            name: "pool_channel/avg",
            smooth: true,
            build: |r| unary(r, X, Shape::new(2, 1, 8, 8), |t, x| t.pool_channel(x, PoolMode::Avg)),
        },
        Case {
            name: "pool_channel/max",
            smooth: false,
            build: |r| unary(r, X, Shape::new(2, 1, 8, 8), |t, x| t.pool_channel(x, PoolMode::Max)),
        },
        Case {
            name: "dense",
            smooth: true,
            build: |r| {
                let inputs = vec![
                    sample(Shape::new(4, 8, 1, 1), r),
                    sample(Shape::new(6, 8, 1, 1), r),
                    sample(Shape::new(1, 6, 1, 1), r),
                ];
                let w = sample(Shape::new(4, 6, 1, 1), r);
                Instance::new(
                    inputs,
                    Box::new(move |tape, v| {
                        let y = tape.dense(v[0], v[1], v[2])?;
                        weighted(tape, y, &w)
                    }),
                )
            },
        },
        Case {
            name: "conv2d/3x3",
            smooth: true,
            build: |r| conv_case(r, X, Shape::new(4, 8, 3, 3), 1),
        },
        Case {
            name: "conv2d/7x7-stride2",
            smooth: true,
            build: |r| conv_case(r, Shape::new(1, 2, 8, 8), Shape::new(3, 2, 7, 7), 2),
        },
        Case {
            name: "concat_channel",
            smooth: true,
            build: |r| {
                binary(
                    r,
                    Shape::new(2, 3, 4, 4),
                    Shape::new(2, 5, 4, 4),
                    SMALL,
                    Tape::concat_channel,
                )
            },
        },
        Case {
            name: "one_minus",
            smooth: true,
            build: |r| unary(r, SMALL, SMALL, Tape::one_minus),
        },
        Case {
            name: "scale",
            smooth: true,
            build: |r| {
                let factor = r.random_range(-2.0..2.0);
                let x = sample(SMALL, r);
                let w = sample(SMALL, r);
                Instance::new(
                    vec![x],
                    Box::new(move |tape, v| {
                        let y = tape.scale(v[0], factor)?;
                        weighted(tape, y, &w)
                    }),
                )
            },
        },
        Case {
            name: "gradient_reversal",
            smooth: true,
            build: |r| {
                let mu = r.random_range(0.25..2.0);
                let x = sample(SMALL, r);
                let w = sample(SMALL, r);
                Instance {
                    inputs: vec![x],
                    eval: Box::new(move |tape, v| {
                        let y = tape.gradient_reversal(v[0], mu)?;
                        let y = tape.sigmoid(y)?;
                        weighted(tape, y, &w)
                    }),
                    factor: -mu,
                }
            },
        },
        Case {
            name: "sum",
            smooth: true,
            build: |r| {
                let x = sample(X, r);
                Instance::new(vec![x], Box::new(|tape, v| tape.sum(v[0])))
            },
        },
        Case {
            name: "cross_entropy",
            smooth: true,
            build: |r| {
                let logits = scaled(Shape::new(8, 5, 1, 1), 3.0, r);
                let labels: Vec<usize> = (0..8).map(|_| r.random_range(0..5)).collect();
                Instance::new(
                    vec![logits],
                    Box::new(move |tape, v| tape.cross_entropy(v[0], &labels)),
                )
            },
        },
        Case {
            name: "triplet",
            smooth: false,
            build: triplet_instance,
        },
        Case {
            name: "apra_block",
            smooth: false,
            build: apra_instance,
        },
    ]
}

fn run_case(case: &Case, index: usize, config: &SuiteConfig) -> Result<CaseResult> {
    let runs = map_indexed(config.exec, config.seeds, |s| {
        let seed = config.base_seed.wrapping_add(s as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let inst = (case.build)(&mut rng);
        let fault = config.fault;
        let f = |tape: &mut Tape, v: &[Var]| {
            if let Some(kind) = fault {
                tape.inject_fault(kind);
            }
            (inst.eval)(tape, v)
        };
        grad_check_scaled(f, &inst.inputs, config.step, inst.factor).map(|r| (seed, r))
    });
    let mut worst: Option<(u64, GradCheckReport)> = None;
    for run in runs {
        let (seed, rep) = run?;
        let worse = match &worst {
            None => true,
            Some((_, w)) => rep.max_rel_error > w.max_rel_error || rep.max_rel_error.is_nan(),
        };
        if worse {
            worst = Some((seed, rep));
        }
    }
    let (worst_seed, worst) = worst.ok_or_else(|| crate::Error::invalid("suite needs at least one seed"))?;
    Ok(CaseResult {
        name: case.name,
        smooth: case.smooth,
        tolerance: case.tolerance(),
        max_rel_error: worst.max_rel_error,
        worst_seed,
        worst,
    })
}

pub fn run_suite(config: &SuiteConfig) -> Result<SuiteReport> {
    let cases = cases()
        .iter()
        .enumerate()
        .map(|(i, c)| run_case(c, i, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        cases,
        fault: config.fault,
    })
}
