//! Central-difference gradient oracle.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub eps: f64,
    /// Denominator floor in the relative error.
    pub floor: f64,
    /// Coordinates checked per input; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { eps: 1e-6, floor: 1e-4, max_coords: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
}

impl GradReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let v = g.value(root).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("function value".to_string()));
    }
    Ok(v)
}

/// Compare the tape gradient of scalar `f` at `inputs` with central
/// differences. `f` receives one leaf per input, in order.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F, opts: &CheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    if !g.value(root).item().is_finite() {
        return Err(Error::NonFinite("function value".to_string()));
    }
    let grads = g.backward(root)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0f64;
    let mut coords = 0;
    let mut point: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let zeros = alloc::vec![0.0; n];
        let analytic = grads.get(v).unwrap_or(&zeros).to_vec();
        let picks: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let base = point[i].data()[j];
            point[i].data_mut()[j] = base + opts.eps;
            let up = eval(&f, &point)?;
            point[i].data_mut()[j] = base - opts.eps;
            let down = eval(&f, &point)?;
            point[i].data_mut()[j] = base;
            let numeric = (up - down) / (2.0 * opts.eps);
            worst = worst.max(rel_err(analytic[j], numeric, opts.floor));
            coords += 1;
        }
    }
    Ok(GradReport { name: name.to_string(), max_rel_err: worst, coords })
}


fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    use rand::Rng;
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero, for kernels with a kink there.
fn rand_signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::Rng;
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Scalar readout `Σ y ⊙ w` with fixed random `w`, so every output coordinate
/// carries a distinct weight.
fn readout(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(w.clone().reshape(&shape)?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type KernelFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

struct KernelCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    out_len: usize,
    body: KernelFn,
}

fn kernel_cases(rng: &mut ChaCha8Rng) -> Vec<KernelCase> {
    use crate::graph::DeformLayout;
    use rand::Rng;
    let (m, k, n) = (rng.random_range(1..4), rng.random_range(2..5), rng.random_range(1..4));
    let mut cases = Vec::new();
    let mut case = |name, inputs: Vec<Tensor<f64>>, out_len, body: KernelFn| {
        cases.push(KernelCase { name, inputs, out_len, body });
    };
    case("matmul", alloc::vec![rand_tensor(rng, &[m, k], -1.0, 1.0), rand_tensor(rng, &[k, n], -1.0, 1.0)], m * n, |g, v| {
        g.matmul(v[0], v[1])
    });
    case(
        "matmul_nt",
        alloc::vec![rand_tensor(rng, &[m, k], -1.0, 1.0), rand_tensor(rng, &[n, k], -1.0, 1.0)],
        m * n,
        |g, v| g.matmul_nt(v[0], v[1]),
    );
    case(
        "linear",
        alloc::vec![
            rand_tensor(rng, &[m, k], -1.0, 1.0),
            rand_tensor(rng, &[k, n], -1.0, 1.0),
            rand_tensor(rng, &[n], -1.0, 1.0)
        ],
        m * n,
        |g, v| g.linear(v[0], v[1], v[2]),
    );
    let pair = |rng: &mut ChaCha8Rng| alloc::vec![rand_tensor(rng, &[m, k], -1.0, 1.0), rand_tensor(rng, &[m, k], -1.0, 1.0)];
    case("add", pair(rng), m * k, |g, v| g.add(v[0], v[1]));
    case("sub", pair(rng), m * k, |g, v| g.sub(v[0], v[1]));
    case("mul", pair(rng), m * k, |g, v| g.mul(v[0], v[1]));
    case("div", alloc::vec![rand_tensor(rng, &[m, k], -1.0, 1.0), rand_tensor(rng, &[m, k], 0.5, 2.0)], m * k, |g, v| {
        g.div(v[0], v[1])
    });
    let x = |rng: &mut ChaCha8Rng| alloc::vec![rand_tensor(rng, &[m, k], -2.0, 2.0)];
    case("affine", x(rng), m * k, |g, v| Ok(g.affine(v[0], -1.7, 0.3)));
    case("sum", x(rng), 1, |g, v| Ok(g.sum(v[0])));
    case("mean", x(rng), 1, |g, v| Ok(g.mean(v[0])));
    case("sum_last", x(rng), m, |g, v| Ok(g.sum_last(v[0])));
    case("mean_rows", x(rng), k, |g, v| Ok(g.mean_rows(v[0])));
    case("softmax", x(rng), m * k, |g, v| Ok(g.softmax(v[0])));
    case("log_softmax", x(rng), m * k, |g, v| Ok(g.log_softmax(v[0])));
    case("masked_softmax", alloc::vec![rand_tensor(rng, &[4, 3], -2.0, 2.0)], 12, |g, v| {
        // second mask row is fully masked and exercises the fallback
        g.masked_softmax(v[0], &[false, true, false, true, true, true], 2)
    });
    case("sigmoid", x(rng), m * k, |g, v| Ok(g.sigmoid(v[0])));
    case("gelu", x(rng), m * k, |g, v| Ok(g.gelu(v[0])));
    case("abs", alloc::vec![rand_signed(rng, &[m, k])], m * k, |g, v| Ok(g.abs(v[0])));
    case(
        "layer_norm",
        alloc::vec![rand_tensor(rng, &[m, 4], -2.0, 2.0), rand_tensor(rng, &[4], 0.5, 1.5), rand_tensor(rng, &[4], -0.5, 0.5)],
        m * 4,
        |g, v| g.layer_norm(v[0], v[1], v[2]),
    );
    case("normalize_rows", alloc::vec![rand_signed(rng, &[m, 3])], m * 3, |g, v| Ok(g.normalize_rows(v[0])));
    case("reshape_transpose", x(rng), m * k, |g, v| {
        let s = g.shape(v[0]).to_vec();
        let r = g.reshape(v[0], &[s[1], s[0]])?;
        g.transpose(r)
    });
    case("concat_cols", alloc::vec![rand_tensor(rng, &[2, 3], -1.0, 1.0), rand_tensor(rng, &[2, 1], -1.0, 1.0)], 8, |g, v| {
        g.concat_cols(&[v[0], v[1], v[0]]).and_then(|c| g.slice_cols(c, 1, 4))
    });
    case("concat_rows", alloc::vec![rand_tensor(rng, &[2, 3], -1.0, 1.0), rand_tensor(rng, &[1, 3], -1.0, 1.0)], 6, |g, v| {
        g.concat_rows(&[v[0], v[1], v[0]]).and_then(|c| g.slice_rows(c, 1, 2))
    });
    case("gather_rows", alloc::vec![rand_tensor(rng, &[3, 2], -1.0, 1.0)], 8, |g, v| g.gather_rows(v[0], &[2, 0, 2, 1]));
    case("im2col", alloc::vec![rand_tensor(rng, &[5, 4, 2], -1.0, 1.0)], 3 * 2 * 18, |g, v| g.im2col(v[0], 3, 2, 1));
    case(
        "bilinear_sample",
        alloc::vec![rand_tensor(rng, &[3, 4, 2], -1.0, 1.0), {
            let mut p = rand_tensor(rng, &[5, 2], 0.1, 0.9);
            for (i, c) in p.data_mut().iter_mut().enumerate() {
                *c += (i % 3) as f64;
            }
            p
        }],
        10,
        |g, v| g.bilinear_sample(v[0], v[1]),
    );
    case(
        "deform_sample",
        alloc::vec![
            rand_tensor(rng, &[2 * 2, 4], -1.0, 1.0),
            rand_tensor(rng, &[4 * 4, 4], -1.0, 1.0),
            rand_tensor(rng, &[3, 2 * 2 * 2 * 2], -0.7, 0.7)
        ],
        3 * 2 * 4 * 2,
        |g, v| {
            let layout = DeformLayout { heads: 2, points: 2, head_dim: 2, levels: alloc::vec![(2, 2), (4, 4)] };
            g.deform_sample(&v[..2], v[2], &[[0.37, 0.41], [0.62, 0.28], [0.55, 0.66]], &layout)
        },
    );
    case(
        "head_scores",
        alloc::vec![rand_tensor(rng, &[3, 4], -1.0, 1.0), rand_tensor(rng, &[5, 4], -1.0, 1.0)],
        3 * 2 * 5,
        |g, v| g.head_scores(v[0], v[1], 2, 0.7),
    );
    case(
        "head_mix",
        alloc::vec![rand_tensor(rng, &[3 * 2, 5], 0.0, 1.0), rand_tensor(rng, &[5, 4], -1.0, 1.0)],
        12,
        |g, v| g.head_mix(v[0], v[1], 2),
    );
    case(
        "sampled_mix",
        alloc::vec![rand_tensor(rng, &[3 * 2, 4], 0.0, 1.0), rand_tensor(rng, &[3 * 2 * 4, 3], -1.0, 1.0)],
        18,
        |g, v| g.sampled_mix(v[0], v[1], 2),
    );
    case("bce_with_logits", x(rng), m * k, |g, v| {
        let n = g.value(v[0]).len();
        let t: Vec<f64> = (0..n).map(|i| [0.0, 1.0, 0.3][i % 3]).collect();
        g.bce_with_logits(v[0], &t)
    });
    case("smooth_l1", alloc::vec![rand_tensor(rng, &[m, k], -3.0, 3.0)], m * k, |g, v| {
        let n = g.value(v[0]).len();
        let t: Vec<f64> = (0..n).map(|i| 0.37 * i as f64 - 0.5).collect();
        g.smooth_l1(v[0], &t, 1.0)
    });
    case(
        "giou",
        alloc::vec![{
            let mut b = rand_tensor(rng, &[3, 4], 0.3, 0.7);
            for r in 0..3 {
                b.data_mut()[4 * r + 2] = 0.2 + 0.1 * r as f64;
            }
            b
        }],
        3,
        |g, v| g.giou(v[0], &[0.5, 0.5, 0.3, 0.4, 0.4, 0.6, 0.2, 0.2, 0.9, 0.1, 0.1, 0.1]),
    );
    case("cosine", alloc::vec![rand_signed(rng, &[5]), rand_signed(rng, &[5])], 1, |g, v| g.cosine(v[0], v[1]));
    cases
}

/// Names of every kernel covered by [`kernel_suite`].
pub fn kernel_names() -> Vec<&'static str> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    kernel_cases(&mut rng).iter().map(|c| c.name).collect()
}

/// Check every differentiable kernel on small random shapes. When `corrupt`
/// names a kernel, its output gradient is scaled by 1.5 to confirm the
/// oracle notices.
pub fn kernel_suite(seed: u64, corrupt: Option<&str>) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = CheckOptions { seed, ..CheckOptions::default() };
    let mut out = Vec::new();
    for c in kernel_cases(&mut rng) {
        let w = rand_tensor(&mut rng, &[c.out_len], -1.0, 1.0);
        let bad = corrupt == Some(c.name);
        let body = c.body;
        let r = check(
            c.name,
            &c.inputs,
            |g, v| {
                let mut y = body(g, v)?;
                if bad {
                    y = g.grad_scale(y, 1.5);
                }
                readout(g, y, &w)
            },
            &opts,
        )?;
        out.push(r);
    }
    Ok(out)
}
