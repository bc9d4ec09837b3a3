//! Central finite-difference checks shared by the gradient and acceptance
//! suites.

use std::time::{Duration, Instant};

use rand::Rng as _;
use zsmt::data::PAD;
use zsmt::model::{attention, AttnMask, AttnVars, Example, Pass};
use zsmt::rng::{purpose, Rng, SeedStream};
use zsmt::{DropoutMode, Model64, ModelConfig, Tape, Tensor64, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Relative error with a floor on the denominator; structurally zero
/// gradients (key biases under softmax shift invariance) only see rounding.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Tensor whose entries stay at least 0.05 away from zero, so that ReLU
/// kinks are not straddled by the finite difference.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// `Σ w ⊙ y` for a fixed random `w`, which probes the full Jacobian.
fn project(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let mut rng = SeedStream::new(seed).stream(purpose::INIT, 77);
    let w = rand_tensor(&mut rng, &shape);
    let p = tape.mul_const(y, w).unwrap();
    tape.sum(p)
}

struct Checker {
    instances: usize,
    worst: f64,
}

impl Checker {
    /// Compare tape gradients of `f` with central differences for every
    /// entry of every input.
    fn check(&mut self, name: &str, inputs: &[Tensor64], f: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars);
        assert_eq!(tape.value(out).numel(), 1, "{name}: output must be scalar");
        tape.backward(out).unwrap();
        let analytic: Vec<Tensor64> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor64::zeros(t.shape())))
            .collect();

        let eval = |inputs: &[Tensor64]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).item()
        };
        for (k, t) in inputs.iter().enumerate() {
            for i in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += H;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= H;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
                let a = analytic[k].data()[i];
                let e = rel_err(a, numeric);
                self.worst = self.worst.max(e);
                assert!(
                    e <= TOL,
                    "{name}: input {k} entry {i}: analytic {a:.10e} numeric {numeric:.10e} rel err {e:.2e}"
                );
            }
        }
        self.instances += 1;
    }
}

fn dims(rng: &mut Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

pub struct GradReport {
    pub instances: usize,
    pub worst: f64,
    pub elapsed: Duration,
}

/// Every differentiable op on three random instances each; panics on the
/// first entry whose relative error exceeds the tolerance.
pub fn check_all_ops() -> GradReport {
    let start = Instant::now();
    let mut c = Checker { instances: 0, worst: 0.0 };
    for trial in 0..3u64 {
        let rng = &mut SeedStream::new(100 + trial).stream(purpose::INIT, 0);
        let (m, k, n) = dims(rng);
        let s = trial;

        let (a, b) = (rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n]));
        c.check("matmul", &[a, b], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            project(t, y, s)
        });
        let (a, b) = (rand_tensor(rng, &[m, k]), rand_tensor(rng, &[n, k]));
        c.check("matmul_nt", &[a, b], |t, v| {
            let y = t.matmul_nt(v[0], v[1]).unwrap();
            project(t, y, s)
        });
        let (a, b) = (rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n]));
        c.check("add", &[a.clone(), b.clone()], |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            project(t, y, s)
        });
        c.check("mul", &[a.clone(), b], |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            project(t, y, s)
        });
        c.check("add to itself", std::slice::from_ref(&a), |t, v| {
            let y = t.mul(v[0], v[0]).unwrap();
            let y = t.add(y, v[0]).unwrap();
            project(t, y, s)
        });
        let bias = rand_tensor(rng, &[n]);
        c.check("add_row", &[a.clone(), bias], |t, v| {
            let y = t.add_row(v[0], v[1]).unwrap();
            project(t, y, s)
        });
        c.check("scale", std::slice::from_ref(&a), |t, v| {
            let y = t.scale(v[0], -1.7);
            project(t, y, s)
        });
        let w = rand_tensor(rng, &[m, n]);
        c.check("mul_const", std::slice::from_ref(&a), |t, v| {
            let y = t.mul_const(v[0], w.clone()).unwrap();
            project(t, y, s)
        });
        c.check("relu", &[away_from_zero(rng, &[m, n])], |t, v| {
            let y = t.relu(v[0]);
            project(t, y, s)
        });
        let x3 = rand_tensor(rng, &[m, k, n + 1]);
        for axis in 0..3 {
            c.check("softmax", std::slice::from_ref(&x3), |t, v| {
                let y = t.softmax(v[0], axis).unwrap();
                project(t, y, s)
            });
        }
        let d = n + 1;
        let (x, g, bb) = (rand_tensor(rng, &[m, d]), rand_tensor(rng, &[d]), rand_tensor(rng, &[d]));
        c.check("layer_norm", &[x, g, bb], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            project(t, y, s)
        });
        for mode in [DropoutMode::Elementwise, DropoutMode::Variational] {
            let x = rand_tensor(rng, &[m + 2, n + 1]);
            c.check("dropout", &[x], |t, v| {
                let mut r = SeedStream::new(s).stream(purpose::DROPOUT, 0);
                let y = t.dropout_segments(v[0], &[2, m], 0.3, mode, &mut r).unwrap();
                project(t, y, s)
            });
        }
        let table = rand_tensor(rng, &[5, n]);
        c.check("gather", &[table], |t, v| {
            let y = t.gather(v[0], &[3, 0, 3, 4]).unwrap();
            project(t, y, s)
        });
        let x = rand_tensor(rng, &[m + 2, n + 2]);
        c.check("block", &[x], |t, v| {
            let y = t.block(v[0], 1..m + 1, 1..n + 2).unwrap();
            project(t, y, s)
        });
        let (p, q) = (rand_tensor(rng, &[m, k]), rand_tensor(rng, &[m, n]));
        c.check("concat_cols", &[p, q], |t, v| {
            let y = t.concat_cols(&[v[0], v[1], v[0]]).unwrap();
            project(t, y, s)
        });
        let (p, q) = (rand_tensor(rng, &[m, n]), rand_tensor(rng, &[k, n]));
        c.check("concat_rows", &[p, q], |t, v| {
            let y = t.concat_rows(&[v[1], v[0]]).unwrap();
            project(t, y, s)
        });
        c.check("sum", &[rand_tensor(rng, &[m, k])], |t, v| t.sum(v[0]));
        let logits = rand_tensor(rng, &[4, 6]);
        c.check("cross_entropy", &[logits], |t, v| {
            t.cross_entropy(v[0], &[2, PAD, 5, 1], 0.1, PAD).unwrap()
        });

        // Multi-head attention over two packed segments, with each mask kind.
        let dm = 4;
        let lens = [2usize, 3];
        let mut inputs = vec![rand_tensor(rng, &[5, dm]), rand_tensor(rng, &[5, dm])];
        for _ in 0..4 {
            inputs.push(rand_tensor(rng, &[dm, dm]));
            inputs.push(rand_tensor(rng, &[dm]));
        }
        let blocked = [false, true, false, true, false];
        let masks = [AttnMask::None, AttnMask::Causal, AttnMask::BlockedKeys(&blocked)];
        for mask in &masks {
            c.check("attention", &inputs, |t, v| {
                let p = AttnVars {
                    wq: v[2],
                    bq: v[3],
                    wk: v[4],
                    bk: v[5],
                    wv: v[6],
                    bv: v[7],
                    wo: v[8],
                    bo: v[9],
                };
                let kv = if matches!(mask, AttnMask::Causal) { v[0] } else { v[1] };
                // A key mask is shared by all segments, so use one segment.
                let lens: &[usize] = if matches!(mask, AttnMask::BlockedKeys(_)) { &[5] } else { &lens };
                let (y, _) = attention(t, &p, v[0], kv, lens, lens, mask, 2).unwrap();
                project(t, y, s)
            });
        }
    }
    GradReport {
        instances: c.instances,
        worst: c.worst,
        elapsed: start.elapsed(),
    }
}

/// Tape gradients of the full translation loss against finite differences on
/// a sample of entries of every parameter tensor.
pub fn check_model_loss() -> usize {
    let mut total = 0;
    for (removal, position_query) in [(None, false), (Some(2), false), (Some(2), true)] {
        let cfg = ModelConfig {
            num_encoder_layers: 3,
            num_decoder_layers: 1,
            d_model: 8,
            num_heads: 2,
            d_ff: 12,
            vocab_size: 14,
            num_languages: 2,
            max_positions: 12,
            residual_removal_layer: removal,
            position_query_enabled: position_query,
            ..Default::default()
        };
        let mut model = Model64::new(cfg, SeedStream::new(5)).unwrap();
        let srcs = [vec![6usize, 7, 8, 2], vec![9usize, 10, 2]];
        let tin = [vec![4usize, 11, 12], vec![5usize, 13]];
        let tout = [vec![11usize, 12, 2], vec![13usize, 2]];
        let loss = |m: &Model64| {
            let ex: Vec<Example> = (0..2)
                .map(|i| Example {
                    source: &srcs[i],
                    target_in: &tin[i],
                    target_out: &tout[i],
                    target_lang: i,
                })
                .collect();
            let mut rng = SeedStream::new(9).stream(purpose::DROPOUT, 0);
            let mut tape = Tape::new();
            let l = m.loss_on_tape(&mut tape, &ex, &mut Pass::Train(&mut rng)).unwrap();
            tape.backward(l).unwrap();
            let grads: Vec<Option<Tensor64>> = tape.param_grads().map(|(_, g)| g.cloned()).collect();
            let ids: Vec<usize> = tape.param_grads().map(|(id, _)| id.0).collect();
            (tape.value(l).item(), ids, grads)
        };
        let (_, ids, grads) = loss(&model);
        let mut pick = SeedStream::new(1).stream(purpose::INIT, 3);
        let mut checked = 0;
        for (id, g) in ids.iter().zip(&grads) {
            let Some(g) = g else { continue };
            let pid = zsmt::ParamId(*id);
            for _ in 0..3 {
                let i = pick.random_range(0..g.numel());
                let orig = model.params().get(pid).data()[i];
                model.params_mut().get_mut(pid).data_mut()[i] = orig + H;
                let up = loss(&model).0;
                model.params_mut().get_mut(pid).data_mut()[i] = orig - H;
                let down = loss(&model).0;
                model.params_mut().get_mut(pid).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * H);
                let e = rel_err(g.data()[i], numeric);
                assert!(
                    e <= TOL,
                    "{}: analytic {} numeric {numeric} (removal {removal:?}, pq {position_query})",
                    model.params().name(pid),
                    g.data()[i]
                );
                checked += 1;
            }
        }
        assert!(checked > 60);
        total += checked;
    }
    total
}
