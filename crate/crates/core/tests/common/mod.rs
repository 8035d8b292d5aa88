#![allow(dead_code)]

use highmmt_core::tensor::gradcheck::{self, GradCheckReport};
use highmmt_core::{Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sum(v ⊙ R)` for a fixed pseudo-random `R`, so every output entry
/// contributes to the checked gradient.
pub fn weighted_sum(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let mut r = rng(0xfeed);
    let w = tape.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut r));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
    /// keeps inputs away from non-differentiable points
    pub away_from_zero: bool,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
        away_from_zero: false,
    }
}

pub fn op_cases() -> Vec<OpCase> {
    let mut cases = vec![
        case("matmul_sum", &[&[3, 3], &[3, 3]], |t, v| {
            let p = t.matmul(v[0], v[1])?;
            Ok(t.sum(p))
        }),
        case(
            "matmul_batched_broadcast",
            &[&[2, 3, 4], &[4, 2]],
            |t, v| {
                let p = t.matmul(v[0], v[1])?;
                weighted_sum(t, p)
            },
        ),
        case("matmul_batched", &[&[2, 2, 3], &[2, 3, 2]], |t, v| {
            let p = t.matmul(v[0], v[1])?;
            weighted_sum(t, p)
        }),
        case("add_broadcast", &[&[2, 3, 4], &[4]], |t, v| {
            let p = t.add(v[0], v[1])?;
            weighted_sum(t, p)
        }),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| {
            let p = t.mul(v[0], v[1])?;
            weighted_sum(t, p)
        }),
        case("scale", &[&[5]], |t, v| {
            let p = t.scale(v[0], -2.5);
            weighted_sum(t, p)
        }),
        case("concat_axis1", &[&[2, 3], &[2, 2]], |t, v| {
            let p = t.concat(&[v[0], v[1]], 1)?;
            weighted_sum(t, p)
        }),
        case("slice", &[&[3, 5]], |t, v| {
            let p = t.slice(v[0], 1, 1, 3)?;
            weighted_sum(t, p)
        }),
        case("reshape_swap_axes", &[&[2, 3, 4]], |t, v| {
            let p = t.swap_axes(v[0], 0, 2)?;
            let p = t.reshape(p, &[4, 6])?;
            weighted_sum(t, p)
        }),
        case("transpose", &[&[3, 2]], |t, v| {
            let p = t.transpose(v[0])?;
            weighted_sum(t, p)
        }),
        case("broadcast_leading", &[&[2, 3]], |t, v| {
            let p = t.broadcast_leading(v[0], &[4]);
            weighted_sum(t, p)
        }),
        case("mean", &[&[3, 3]], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.mean(sq))
        }),
        case("gelu", &[&[10]], |t, v| {
            let p = t.gelu(v[0]);
            weighted_sum(t, p)
        }),
        case("softmax_last", &[&[3, 4]], |t, v| {
            let p = t.softmax(v[0], 1)?;
            weighted_sum(t, p)
        }),
        case("softmax_first", &[&[3, 4]], |t, v| {
            let p = t.softmax(v[0], 0)?;
            weighted_sum(t, p)
        }),
        case("layer_norm", &[&[3, 4], &[4], &[4]], |t, v| {
            let p = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, p)
        }),
        case("batch_norm_train", &[&[5, 3], &[3], &[3]], |t, v| {
            let p = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.out;
            weighted_sum(t, p)
        }),
        case("batch_norm_eval", &[&[4, 3], &[3], &[3]], |t, v| {
            let p =
                t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
            weighted_sum(t, p)
        }),
        case("cross_entropy", &[&[4, 3]], |t, v| {
            t.cross_entropy(v[0], &[0, 2, 1, 2])
        }),
        case("mse", &[&[3, 2]], |t, v| {
            let target = Tensor::new(vec![3, 2], vec![0.5, -1.0, 0.0, 2.0, 1.0, -0.5])?;
            t.mse(v[0], &target)
        }),
        case("embedding", &[&[4, 3]], |t, v| {
            let p = t.embedding(v[0], &[2, 0, 2, 3])?;
            weighted_sum(t, p)
        }),
        case("pick", &[&[3, 4]], |t, v| {
            let p = t.pick(v[0], &[1, 3, 0])?;
            weighted_sum(t, p)
        }),
        case(
            "softmax_matmul_chain",
            &[&[2, 3], &[3, 4], &[4, 2]],
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let s = t.softmax(h, 1)?;
                let o = t.matmul(s, v[2])?;
                weighted_sum(t, o)
            },
        ),
    ];
    let mut relu = case("relu", &[&[10]], |t, v| {
        let p = t.relu(v[0]);
        weighted_sum(t, p)
    });
    relu.away_from_zero = true;
    cases.push(relu);
    cases
}

/// Runs one case at `points` random input draws; returns the worst report.
pub fn run_case(c: &OpCase, points: usize, seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut worst: Option<GradCheckReport> = None;
    for _ in 0..points {
        let inputs: Vec<Tensor> = c
            .shapes
            .iter()
            .map(|s| {
                let mut x = Tensor::uniform(s, -1.0, 1.0, &mut r);
                if c.away_from_zero {
                    for v in x.data_mut() {
                        *v += 0.1f64.copysign(*v);
                    }
                }
                x
            })
            .collect();
        let rep = gradcheck::check(&inputs, |t, v| (c.build)(t, v), STEP)?;
        if worst
            .as_ref()
            .is_none_or(|w| rep.max_rel_error > w.max_rel_error)
        {
            worst = Some(rep);
        }
    }
    Ok(worst.expect("points > 0"))
}
