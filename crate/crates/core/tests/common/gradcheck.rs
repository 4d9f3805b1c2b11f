//! Finite-difference checks of every differentiable primitive and of the
//! four training losses, in f64 with central differences (h = 1e-5).
//! Each instance reports the norm-wise relative error
//! `|analytic - numeric| / (|analytic| + |numeric|)` over the checked
//! coordinates, which must stay at or below 1e-4.

use munmt::corpus::LangId;
use munmt::model::{init_params, ModelConfig, ModelParams};
use munmt::objectives::{back_translation_loss, cross_entropy_loss, cross_translation_loss, mass_loss};
use munmt::rng::stream;
use munmt::tensor::{AttentionSpec, Graph, Tensor, Var};
use rand::Rng;

const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: usize = 100;

/// Outcome of one checked function over its random instances.
#[derive(Clone, Debug)]
pub struct Case {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

impl Case {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.worst <= TOL
    }
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nn < 1e-12 {
        0.0
    } else {
        diff / (na + nn)
    }
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Relative error of `f` at `inputs`; `f` builds a scalar from leaves
/// holding the inputs, in order.
fn check_inputs<F>(inputs: Vec<Tensor<f64>>, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let ga = grads
            .of(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * H));
            analytic.push(ga.data()[j]);
        }
    }
    rel_err(&analytic, &numeric)
}

/// Scalar probe `sum(out * r)` with a fixed random `r`.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let r = rand_tensor(&mut stream(seed, "probe"), &shape);
    let r = g.constant(r);
    let m = g.mul(out, r).unwrap();
    g.sum(m)
}

fn run_primitive<F>(name: &'static str, mut case: F) -> Case
where
    F: FnMut(&mut munmt::rng::Rng, u64) -> f64,
{
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = stream(i as u64, name);
        worst = worst.max(case(&mut rng, i as u64));
    }
    Case {
        name,
        instances: INSTANCES,
        worst,
    }
}

pub fn matmul_and_transpose() -> Vec<Case> {
    vec![
        run_primitive("matmul", |rng, s| {
            let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            let a = rand_tensor(rng, &[m, k]);
            let b = rand_tensor(rng, &[k, n]);
            check_inputs(vec![a, b], |g, v| {
                let o = g.matmul(v[0], v[1]).unwrap();
                probe(g, o, s)
            })
        }),
        run_primitive("matmul_t", |rng, s| {
            let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            let a = rand_tensor(rng, &[m, k]);
            let b = rand_tensor(rng, &[n, k]);
            check_inputs(vec![a, b], |g, v| {
                let o = g.matmul_t(v[0], v[1]).unwrap();
                probe(g, o, s)
            })
        }),
    ]
}

pub fn linear_with_and_without_bias() -> Vec<Case> {
    vec![run_primitive("linear", |rng, s| {
        let (m, k, n) = (rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..5));
        let with_bias = s % 2 == 0;
        let mut inputs = vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])];
        if with_bias {
            inputs.push(rand_tensor(rng, &[n]));
        }
        check_inputs(inputs, |g, v| {
            let o = g.linear(v[0], v[1], v.get(2).copied()).unwrap();
            probe(g, o, s)
        })
    })]
}

pub fn elementwise_ops() -> Vec<Case> {
    vec![
        run_primitive("add", |rng, s| {
            let shape = [rng.random_range(1..5), rng.random_range(1..5)];
            let (a, b) = (rand_tensor(rng, &shape), rand_tensor(rng, &shape));
            check_inputs(vec![a, b], |g, v| {
                let o = g.add(v[0], v[1]).unwrap();
                probe(g, o, s)
            })
        }),
        run_primitive("add_row", |rng, s| {
            let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
            let (a, b) = (rand_tensor(rng, &[r, c]), rand_tensor(rng, &[c]));
            check_inputs(vec![a, b], |g, v| {
                let o = g.add_row(v[0], v[1]).unwrap();
                probe(g, o, s)
            })
        }),
        run_primitive("mul", |rng, s| {
            let shape = [rng.random_range(1..5), rng.random_range(1..5)];
            let (a, b) = (rand_tensor(rng, &shape), rand_tensor(rng, &shape));
            check_inputs(vec![a, b], |g, v| {
                let o = g.mul(v[0], v[1]).unwrap();
                probe(g, o, s)
            })
        }),
        run_primitive("scale", |rng, s| {
            let c: f64 = rng.random_range(-2.0..2.0);
            let rows = rng.random_range(1..5);
            let a = rand_tensor(rng, &[rows, 3]);
            check_inputs(vec![a], |g, v| {
                let o = g.scale(v[0], c);
                probe(g, o, s)
            })
        }),
        run_primitive("relu", |rng, s| {
            // Keep inputs away from the kink at zero.
            let rows = rng.random_range(1..5);
            let mut a = rand_tensor(rng, &[rows, 4]);
            for x in a.data_mut() {
                if x.abs() < 0.05 {
                    *x += 0.1f64.copysign(*x);
                }
            }
            check_inputs(vec![a], |g, v| {
                let o = g.relu(v[0]);
                probe(g, o, s)
            })
        }),
        run_primitive("sum", |rng, _| {
            let shape = [rng.random_range(1..5), rng.random_range(1..5)];
            let a = rand_tensor(rng, &shape);
            check_inputs(vec![a], |g, v| {
                let o = g.sum(v[0]);
                let o2 = g.mul(o, o).unwrap();
                g.sum(o2)
            })
        }),
    ]
}

pub fn normalization_and_softmax() -> Vec<Case> {
    vec![
        run_primitive("layer_norm", |rng, s| {
            let (r, c) = (rng.random_range(1..5), rng.random_range(2..7));
            let x = rand_tensor(rng, &[r, c]);
            let gain = rand_tensor(rng, &[c]);
            let bias = rand_tensor(rng, &[c]);
            check_inputs(vec![x, gain, bias], |g, v| {
                let o = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                probe(g, o, s)
            })
        }),
        run_primitive("softmax", |rng, s| {
            let shape = [rng.random_range(1..5), rng.random_range(1..6)];
            let x = rand_tensor(rng, &shape);
            check_inputs(vec![x], |g, v| {
                let o = g.softmax(v[0]);
                probe(g, o, s)
            })
        }),
    ]
}

pub fn gather_and_select() -> Vec<Case> {
    vec![
        run_primitive("gather", |rng, s| {
            let (rows, c) = (rng.random_range(1..6), rng.random_range(1..4));
            let ids: Vec<usize> = (0..rng.random_range(1..7)).map(|_| rng.random_range(0..rows)).collect();
            let t = rand_tensor(rng, &[rows, c]);
            check_inputs(vec![t], |g, v| {
                let o = g.gather(v[0], &ids).unwrap();
                probe(g, o, s)
            })
        }),
        run_primitive("select", |rng, s| {
            let l = rng.random_range(1..4);
            let idx = rng.random_range(0..l);
            let bank = if s % 2 == 0 {
                rand_tensor(rng, &[l, 3, 2])
            } else {
                rand_tensor(rng, &[l, 4])
            };
            check_inputs(vec![bank], |g, v| {
                let o = g.select(v[0], idx).unwrap();
                probe(g, o, s)
            })
        }),
    ]
}

pub fn attention_with_masks() -> Vec<Case> {
    vec![run_primitive("attention", |rng, s| {
        let batch = rng.random_range(1..3);
        let heads = rng.random_range(1..3);
        let d = heads * rng.random_range(1..3);
        let causal = s % 2 == 0;
        let q_len = rng.random_range(1..4);
        let k_len = if causal { q_len } else { rng.random_range(1..4) };
        let mut key_valid: Vec<bool> = (0..batch * k_len).map(|_| rng.random_bool(0.8)).collect();
        for b in 0..batch {
            key_valid[b * k_len] = true;
        }
        let q = rand_tensor(rng, &[batch * q_len, d]);
        let k = rand_tensor(rng, &[batch * k_len, d]);
        let v = rand_tensor(rng, &[batch * k_len, d]);
        let spec = AttentionSpec {
            batch,
            q_len,
            k_len,
            heads,
            causal,
            key_valid,
        };
        check_inputs(vec![q, k, v], |g, vs| {
            let o = g.attention(vs[0], vs[1], vs[2], spec.clone()).unwrap();
            probe(g, o, s)
        })
    })]
}

pub fn cross_entropy_primitive() -> Vec<Case> {
    vec![run_primitive("cross_entropy", |rng, _| {
        let (rows, vocab) = (rng.random_range(1..6), rng.random_range(2..7));
        let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..vocab)).collect();
        let mut valid: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.7)).collect();
        valid[0] = true;
        let logits = rand_tensor(rng, &[rows, vocab]);
        check_inputs(vec![logits], |g, v| g.cross_entropy(v[0], &targets, &valid).unwrap())
    })]
}

pub fn primitives() -> Vec<Case> {
    let mut out = matmul_and_transpose();
    out.extend(linear_with_and_without_bias());
    out.extend(elementwise_ops());
    out.extend(normalization_and_softmax());
    out.extend(gather_and_select());
    out.extend(attention_with_masks());
    out.extend(cross_entropy_primitive());
    out
}

// ---------------------------------------------------------------------------
// Losses over a small model

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        layers: 1,
        hidden: 8,
        ffn: 12,
        heads: 2,
        vocab_size: 14,
        num_languages: 3,
        max_positions: 16,
    }
}

fn sentence(rng: &mut impl Rng, min: usize) -> Vec<u32> {
    (0..rng.random_range(min..6)).map(|_| rng.random_range(5..14)).collect()
}

fn batch(rng: &mut impl Rng, min: usize) -> Vec<Vec<u32>> {
    (0..rng.random_range(1..4)).map(|_| sentence(rng, min)).collect()
}

/// Relative error of a model loss on random parameter coordinates, or
/// `None` when the loss is undefined (every decode came out empty).
fn check_params<F>(name: &str, seed: u64, loss: F) -> Option<f64>
where
    F: Fn(&ModelParams<f64>, &mut Graph<f64>) -> Option<Var>,
{
    let mut rng = stream(seed, name);
    let mut params = init_params(&tiny_cfg(), seed).unwrap().cast::<f64>();
    // Larger weights make the check sensitive to every path.
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x *= 2.0;
        }
    }
    let value = |p: &ModelParams<f64>| -> f64 {
        let mut g = Graph::new();
        let l = loss(p, &mut g).expect("loss defined");
        g.value(l).item()
    };
    let mut g = Graph::new();
    let l = loss(&params, &mut g)?;
    let grads = g.backward(l).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..24 {
        let id = rng.random_range(0..params.tensors().len());
        let j = rng.random_range(0..params.tensors()[id].len());
        let a = grads.param(id).map_or(0.0, |t| t.data()[j]);
        let orig = params.tensors()[id].data()[j];
        params.tensors_mut()[id].data_mut()[j] = orig + H;
        let up = value(&params);
        params.tensors_mut()[id].data_mut()[j] = orig - H;
        let down = value(&params);
        params.tensors_mut()[id].data_mut()[j] = orig;
        analytic.push(a);
        numeric.push((up - down) / (2.0 * H));
    }
    Some(rel_err(&analytic, &numeric))
}

/// Runs seeds until `INSTANCES` of them have a defined loss (at most ten
/// times as many seeds).
fn run_loss<F>(name: &'static str, mut instance: F) -> Case
where
    F: FnMut(u64) -> Option<f64>,
{
    let mut case = Case {
        name,
        instances: 0,
        worst: 0.0,
    };
    for seed in 0..(10 * INSTANCES) as u64 {
        if case.instances == INSTANCES {
            break;
        }
        if let Some(e) = instance(seed) {
            case.instances += 1;
            case.worst = case.worst.max(e);
        }
    }
    case
}

pub fn cross_entropy_loss_gradients() -> Case {
    run_loss("ce loss", |i| {
        let mut rng = stream(i, "ce-data");
        let src = batch(&mut rng, 1);
        let tgt: Vec<Vec<u32>> = src.iter().map(|_| sentence(&mut rng, 1)).collect();
        let lang = LangId(rng.random_range(0..3));
        check_params("ce", i, |p, g| {
            Some(cross_entropy_loss(p, g, &src, &tgt, lang).unwrap())
        })
    })
}

pub fn mass_loss_gradients() -> Case {
    run_loss("mass loss", |i| {
        let mut rng = stream(i, "mass-data");
        let xs = batch(&mut rng, 2);
        let lang = LangId(rng.random_range(0..3));
        check_params("mass", i, |p, g| {
            let mut mask_rng = stream(i, "mass-mask");
            Some(mass_loss(p, g, &xs, lang, &mut mask_rng).unwrap())
        })
    })
}

pub fn back_translation_loss_gradients() -> Case {
    run_loss("bt loss", |i| {
        let mut rng = stream(i, "bt-data");
        let xs = batch(&mut rng, 1);
        let x_lang = LangId(rng.random_range(0..3));
        let l_y = LangId((x_lang.0 + rng.random_range(1..3)) % 3);
        check_params("bt", i, |p, g| {
            back_translation_loss(p, g, &xs, x_lang, l_y, 16).unwrap().loss
        })
    })
}

pub fn cross_translation_loss_gradients() -> Case {
    run_loss("ct loss", |i| {
        let mut rng = stream(i, "ct-data");
        let xs = batch(&mut rng, 1);
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = xs.into_iter().map(|x| (x, sentence(&mut rng, 1))).collect();
        check_params("ct", i, |p, g| {
            cross_translation_loss(p, g, &pairs, LangId(1), LangId(0), LangId(2), 16)
                .unwrap()
                .loss
        })
    })
}

pub fn losses() -> Vec<Case> {
    vec![
        cross_entropy_loss_gradients(),
        mass_loss_gradients(),
        back_translation_loss_gradients(),
        cross_translation_loss_gradients(),
    ]
}
