//! Finite-difference audit of every differentiable op and of a tiny model
//! in each configuration the harness trains.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xview_core::check::model_gradcheck;
use xview_core::incontext::{assemble_channel_concat, assemble_ego2exo, assemble_exo2ego, channel_concat_variant};
use xview_core::{AxisSplit, Dit, Init, LatentGrid, LoraConfig, ModelConfig, PositionMode, Task, UnifiedSequence};
use xview_tensor::{finite_diff_check, Graph, Tensor, Var};

use crate::error::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const MODEL_COORDS: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub lines: Vec<CheckLine>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&CheckLine> {
        self.lines.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Every check under [`TOLERANCE`]; a `NaN` error fails.
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.max_rel_error < TOLERANCE)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            let mark = if l.max_rel_error < TOLERANCE { "ok  " } else { "FAIL" };
            s.push_str(&format!("{mark} {:<40} max rel err {:.3e}\n", l.name, l.max_rel_error));
        }
        s
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scalar reduction with fixed random weights, so every output coordinate
/// receives a distinct upstream gradient.
fn weighted<'g>(g: &'g Graph<f64>, y: Var<'g, f64>, seed: u64) -> xview_tensor::Result<Var<'g, f64>> {
    let w = g.constant(Tensor::randn(y.shape(), 1.0, &mut rng(seed)));
    y.mul(w)?.sum()
}

type OpFn = Box<dyn for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> xview_tensor::Result<Var<'g, f64>>>;

fn op_cases(inject_fault: bool) -> Vec<(String, Tensor<f64>, OpFn)> {
    let mut cases: Vec<(String, Tensor<f64>, OpFn)> = Vec::new();
    let mut add = |name: &str, x: Tensor<f64>, f: OpFn| cases.push((name.to_string(), x, f));
    let m = |r, c, s| Tensor::<f64>::randn([r, c], 1.0, &mut rng(s));

    let (a, b) = (m(5, 4, 1), m(4, 3, 2));
    let bt = b.transpose().expect("rank 2");
    {
        let b = b.clone();
        add("matmul (lhs)", a.clone(), Box::new(move |g, x| weighted(g, x.matmul(g.constant(b.clone()))?, 9)));
    }
    {
        let a = a.clone();
        add("matmul (rhs)", b.clone(), Box::new(move |g, x| weighted(g, g.constant(a.clone()).matmul(x)?, 9)));
    }
    {
        let bt = bt.clone();
        add("matmul_nt (lhs)", a.clone(), Box::new(move |g, x| weighted(g, x.matmul_nt(g.constant(bt.clone()))?, 9)));
    }
    {
        let a = a.clone();
        add("matmul_nt (rhs)", bt, Box::new(move |g, x| weighted(g, g.constant(a.clone()).matmul_nt(x)?, 9)));
    }

    let (x0, other) = (m(3, 5, 5), m(3, 5, 4));
    for (name, k) in [("add", 0), ("sub (lhs)", 1), ("sub (rhs)", 2), ("mul", 3)] {
        let o = other.clone();
        add(
            name,
            x0.clone(),
            Box::new(move |g, x| {
                let c = g.constant(o.clone());
                let y = match k {
                    0 => x.add(c)?,
                    1 => x.sub(c)?,
                    2 => c.sub(x)?,
                    _ => x.mul(c)?,
                };
                weighted(g, y, 1)
            }),
        );
    }
    add("affine", x0.clone(), Box::new(|g, x| weighted(g, x.affine(-1.7, 0.3)?, 1)));
    add("scale", x0.clone(), Box::new(|g, x| weighted(g, x.scale(0.6)?, 1)));
    add("silu", x0.clone(), Box::new(|g, x| weighted(g, x.silu()?, 1)));
    add("transpose", x0.clone(), Box::new(|g, x| weighted(g, x.transpose()?, 1)));

    let (mat, row) = (m(4, 6, 6), Tensor::<f64>::randn([6], 1.0, &mut rng(7)));
    for (name, k) in [("add_row (matrix)", 0), ("add_row (row)", 1), ("mul_row (matrix)", 2), ("mul_row (row)", 3)] {
        let (mat2, row2) = (mat.clone(), row.clone());
        let x = if k % 2 == 0 { mat.clone() } else { row.clone() };
        add(
            name,
            x,
            Box::new(move |g, x| {
                let y = match k {
                    0 => x.add_row(g.constant(row2.clone()))?,
                    1 => g.constant(mat2.clone()).add_row(x)?,
                    2 => x.mul_row(g.constant(row2.clone()))?,
                    _ => g.constant(mat2.clone()).mul_row(x)?,
                };
                weighted(g, y, 2)
            }),
        );
    }

    for shape in [vec![7], vec![3, 7], vec![2, 3, 7]] {
        let x = Tensor::<f64>::randn(shape.clone(), 1.0, &mut rng(8));
        let gain = Tensor::<f64>::randn([7], 1.0, &mut rng(10));
        add(&format!("softmax {shape:?}"), x.clone(), Box::new(|g, x| weighted(g, x.softmax_lastdim()?, 3)));
        {
            let gain = gain.clone();
            add(
                &format!("rms_norm {shape:?} (input)"),
                x.clone(),
                Box::new(move |g, x| weighted(g, x.rms_norm(g.constant(gain.clone()), 1e-6)?, 3)),
            );
        }
        add(
            &format!("rms_norm {shape:?} (gain)"),
            gain,
            Box::new(move |g, gn| weighted(g, g.constant(x.clone()).rms_norm(gn, 1e-6)?, 3)),
        );
    }

    let s = m(6, 8, 11);
    add("slice_rows", s.clone(), Box::new(|g, x| weighted(g, x.slice_rows(2, 3)?, 4)));
    add("slice_cols", s.clone(), Box::new(|g, x| weighted(g, x.slice_cols(3, 4)?, 4)));
    add(
        "concat_rows",
        s.clone(),
        Box::new(|g, x| weighted(g, Var::concat_rows(&[x.slice_rows(4, 2)?, x, x.slice_rows(0, 1)?])?, 4)),
    );
    add(
        "concat_cols",
        s.clone(),
        Box::new(|g, x| weighted(g, Var::concat_cols(&[x.slice_cols(5, 3)?, x.slice_cols(0, 2)?, x])?, 4)),
    );
    let index: Rc<[usize]> = Rc::from(vec![5, 0, 5, 2, 3, 3, 1]);
    add("gather_rows", s.clone(), Box::new(move |g, x| weighted(g, x.gather_rows(index.clone())?, 4)));
    let angles = Tensor::<f64>::randn([6, 4], 2.0, &mut rng(12));
    let (cos, sin) = (Rc::new(angles.map(f64::cos)), Rc::new(angles.map(f64::sin)));
    add("rotate_pairs", s.clone(), Box::new(move |g, x| weighted(g, x.rotate_pairs(cos.clone(), sin.clone())?, 4)));
    add("sum", s.clone(), Box::new(|_, x| x.mul(x)?.sum()));
    add("mean", s, Box::new(|_, x| x.mul(x)?.mean()));
    let target = Rc::new(m(5, 3, 13));
    let mask: Rc<[bool]> = Rc::from(vec![true, false, true, true, false]);
    add("masked_mse", m(5, 3, 14), Box::new(move |_, x| x.masked_mse(target.clone(), mask.clone())));

    if inject_fault {
        // Backward of x² reported as 3x instead of 2x.
        add(
            "injected fault (x² with a 3x backward)",
            Tensor::randn([4], 1.0, &mut rng(30)),
            Box::new(|g, x| {
                g.custom(
                    &[x],
                    |v| Ok(v[0].map(|a| a * a)),
                    Rc::new(|gout, parents, _| Ok(vec![gout.mul(&parents[0].scale(3.0))?])),
                )?
                .sum()
            }),
        );
    }
    cases
}

/// Small enough that every parameter coordinate subset checks in seconds.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        depth: 2,
        mlp_ratio: 2,
        axis_split: AxisSplit { frame: 4, height: 2, width: 2 },
        patch: 1,
        channels: 1,
        time_freq_dim: 8,
        ..ModelConfig::default()
    }
}

fn grid(f: usize, seed: u64) -> LatentGrid<f64> {
    LatentGrid::new(Tensor::randn([f, 4, 2, 2], 1.0, &mut rng(seed))).expect("rank 4")
}

fn model_cases() -> Result<Vec<(String, Dit<f64>, UnifiedSequence<f64>)>> {
    let cfg = tiny_model_config();
    let mut out = Vec::new();

    let seq = assemble_exo2ego(&grid(2, 1), &grid(2, 2), 0.4)?;
    let base = Dit::<f64>::new(cfg.clone(), Init::Randomized { std: 0.3 }, &mut rng(21))?;
    out.push(("tiny model, exo2ego".to_string(), base.clone(), seq));

    let seq = assemble_ego2exo(&grid(1, 3), &grid(2, 4), &grid(2, 5), 0.6)?.with_positions(PositionMode::Uniform);
    let mut adapted = base;
    adapted.attach_lora(LoraConfig { rank: 2, alpha: None }, &mut rng(22))?;
    adapted.randomize(0.3, &mut rng(23));
    out.push(("tiny model + adapters, ego2exo".to_string(), adapted, seq));

    let wide = Dit::<f64>::new(ModelConfig { extra_channels: 4, ..cfg }, Init::Randomized { std: 0.3 }, &mut rng(31))?;
    let stacked = channel_concat_variant(&grid(2, 6), &grid(2, 7))?;
    let seq = assemble_channel_concat(Task::Ego2Exo, &stacked, Some(&grid(1, 8)), 0.7)?;
    out.push(("tiny model, channel concat".to_string(), wide, seq));
    Ok(out)
}

/// Runs all op checks, then the tiny models parameter by parameter (the
/// line reports the worst parameter).
pub fn run_gradcheck(inject_fault: bool) -> Result<GradcheckReport> {
    let mut lines = Vec::new();
    for (name, x, f) in op_cases(inject_fault) {
        let err = finite_diff_check(|g, v| f(g, v), &x, STEP)?;
        lines.push(CheckLine { name: format!("op {name}"), max_rel_error: err });
    }
    for (name, model, seq) in model_cases()? {
        let target = Tensor::randn(seq.tokens.shape(), 1.0, &mut rng(99));
        let checks = model_gradcheck(&model, &seq, &target, STEP, MODEL_COORDS)?;
        let worst = checks
            .iter()
            .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
            .expect("model has parameters");
        lines.push(CheckLine {
            name: format!("{name} ({} params, worst {})", checks.len(), worst.name),
            max_rel_error: worst.report.max_rel_error,
        });
    }
    Ok(GradcheckReport { lines })
}
