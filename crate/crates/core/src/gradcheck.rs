//! Central finite-difference checks of every analytic gradient in f64.
//!
//! Each op is wrapped into a scalar functional `s(x) = sum(r * op(x))` with a
//! random probe `r`, and every input and parameter coordinate is compared
//! against `(s(x + eps) - s(x - eps)) / (2 eps)`. Coordinates whose one-sided
//! slopes disagree (a ReLU or max-pool switch inside `[x - eps, x + eps]`)
//! are counted as kinks and skipped.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{self, Mode, ModelSpec, ModelState};
use crate::sc_loss::{self, FeatureBatch};
use crate::tensor::{self, ConvGeometry, Tensor};

pub const EPS: f64 = 1e-5;
/// Magnitude below which errors are measured in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;
/// Second-difference slope change flagging a non-differentiable point.
const KINK: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Comparison {
    pub max_rel_error: f64,
    pub checked: usize,
    pub kinks: usize,
}

impl Comparison {
    pub fn merge(&mut self, other: &Comparison) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.kinks += other.kinks;
    }
}

/// Compares `analytic` with central differences of `f` around `x`.
pub fn compare(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Comparison {
    assert_eq!(x.len(), analytic.len());
    let f0 = f(x);
    let mut probe = x.to_vec();
    let mut out = Comparison::default();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = f(&probe);
        probe[i] = x[i] - eps;
        let fm = f(&probe);
        probe[i] = x[i];
        let right = (fp - f0) / eps;
        let left = (f0 - fm) / eps;
        if (right - left).abs() > KINK * right.abs().max(left.abs()).max(1.0) {
            out.kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        out.max_rel_error = out.max_rel_error.max(relative_error(analytic[i], numeric));
        out.checked += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub trials: usize,
    pub result: Comparison,
}

impl OpReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.result.checked > 0 && self.result.max_rel_error < tolerance
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).expect("finite")
}

/// Values at least `gap` apart in random order, keeping argmax and ReLU
/// decisions stable under `EPS` perturbations.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0 + 0.25) * gap)
        .collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).expect("finite")
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn probe_sum(out: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
    out.data()
        .iter()
        .zip(probe.data())
        .map(|(a, b)| a * b)
        .sum()
}

fn with_data(like: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::new(like.shape().to_vec(), data.to_vec()).expect("finite probe")
}

fn check_conv(rng: &mut ChaCha8Rng) -> Comparison {
    let (n, c, k) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4));
    let (h, w) = (dim(rng, 2, 4), dim(rng, 2, 4));
    let pad = dim(rng, 0, 1);
    let kh = dim(rng, 1, (h + 2 * pad).min(3));
    let kw = dim(rng, 1, (w + 2 * pad).min(3));
    let geom = ConvGeometry::new(dim(rng, 1, 2), pad);
    let x = randn(rng, &[n, c, h, w]);
    let wt = randn(rng, &[k, c, kh, kw]);
    let b = randn(rng, &[k]);
    let y = tensor::conv2d(&x, &wt, &b, geom).unwrap();
    let r = randn(rng, y.shape());
    let g = tensor::conv2d_backward(&x, &wt, &r, geom).unwrap();
    let s = |x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>| {
        probe_sum(&tensor::conv2d(x, wt, b, geom).unwrap(), &r)
    };
    let mut cmp = compare(
        |d| s(&with_data(&x, d), &wt, &b),
        x.data(),
        g.input.data(),
        EPS,
    );
    cmp.merge(&compare(
        |d| s(&x, &with_data(&wt, d), &b),
        wt.data(),
        g.weight.data(),
        EPS,
    ));
    cmp.merge(&compare(
        |d| s(&x, &wt, &with_data(&b, d)),
        b.data(),
        g.bias.data(),
        EPS,
    ));
    cmp
}

fn check_maxpool(rng: &mut ChaCha8Rng) -> Comparison {
    let size = dim(rng, 1, 2);
    let stride = dim(rng, 1, 2);
    let shape = [
        dim(rng, 1, 2),
        dim(rng, 1, 3),
        dim(rng, size, 4),
        dim(rng, size, 4),
    ];
    let x = spaced(rng, &shape, 0.01);
    let (y, idx) = tensor::maxpool2d(&x, size, stride).unwrap();
    let r = randn(rng, y.shape());
    let g = tensor::maxpool2d_backward(&idx, &r).unwrap();
    compare(
        |d| {
            probe_sum(
                &tensor::maxpool2d(&with_data(&x, d), size, stride)
                    .unwrap()
                    .0,
                &r,
            )
        },
        x.data(),
        g.data(),
        EPS,
    )
}

fn check_relu(rng: &mut ChaCha8Rng) -> Comparison {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let x = spaced(rng, &shape, 0.05);
    let r = randn(rng, &shape);
    let g = tensor::relu_backward(&x, &r).unwrap();
    compare(
        |d| probe_sum(&tensor::relu(&with_data(&x, d)).unwrap(), &r),
        x.data(),
        g.data(),
        EPS,
    )
}

fn check_affine(rng: &mut ChaCha8Rng) -> Comparison {
    let (n, din, dout) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    let x = randn(rng, &[n, din]);
    let wt = randn(rng, &[dout, din]);
    let b = randn(rng, &[dout]);
    let r = randn(rng, &[n, dout]);
    let g = tensor::affine_backward(&x, &wt, &r).unwrap();
    let s = |x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>| {
        probe_sum(&tensor::affine(x, wt, b).unwrap(), &r)
    };
    let mut cmp = compare(
        |d| s(&with_data(&x, d), &wt, &b),
        x.data(),
        g.input.data(),
        EPS,
    );
    cmp.merge(&compare(
        |d| s(&x, &with_data(&wt, d), &b),
        wt.data(),
        g.weight.data(),
        EPS,
    ));
    cmp.merge(&compare(
        |d| s(&x, &wt, &with_data(&b, d)),
        b.data(),
        g.bias.data(),
        EPS,
    ));
    cmp
}

fn check_gap(rng: &mut ChaCha8Rng) -> Comparison {
    let shape = [
        dim(rng, 1, 4),
        dim(rng, 1, 4),
        dim(rng, 1, 4),
        dim(rng, 1, 4),
    ];
    let x = randn(rng, &shape);
    let r = randn(rng, &shape[..2]);
    let g = tensor::global_avg_pool_backward(&shape, &r).unwrap();
    compare(
        |d| probe_sum(&tensor::global_avg_pool(&with_data(&x, d)).unwrap(), &r),
        x.data(),
        g.data(),
        EPS,
    )
}

/// The composed toy network used by the end-to-end check: two conv layers
/// with ReLU and max pooling between, global pooling and an affine head,
/// tapping both the second conv block and the pooled features.
pub fn toy_network_spec() -> ModelSpec {
    ModelSpec::parse(
        "input 2 6 6\n\
         conv 3 3 1 1\n\
         relu\n\
         maxpool 2\n\
         conv 4 3 1 1\n\
         relu\n\
         gap\n\
         affine 3\n\
         tap 4 0.5\n\
         tap 5 1.0\n",
    )
    .expect("toy spec parses")
}

fn param_vector(state: &ModelState<f64>) -> Vec<(String, Tensor<f64>)> {
    state
        .params
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

fn with_param(state: &ModelState<f64>, name: &str, data: &[f64]) -> ModelState<f64> {
    let mut s = state.clone();
    let t = s.params.get_mut(name).expect("param");
    *t = with_data(t, data);
    s
}

/// Logits through the whole network against a random probe.
fn check_network_logits(rng: &mut ChaCha8Rng) -> Comparison {
    let spec = toy_network_spec();
    let state: ModelState<f64> = model::init_params(&spec, rng.random()).unwrap();
    let n = dim(rng, 1, 3);
    let x = randn(rng, &[n, 2, 6, 6]);
    let fwd = model::forward(&spec, &state, &x, Mode::Logits).unwrap();
    let r = randn(rng, fwd.output().shape());
    let grads = model::backward(&spec, &state, &fwd, std::slice::from_ref(&r)).unwrap();
    let s = |st: &ModelState<f64>, x: &Tensor<f64>| {
        probe_sum(
            model::infer(&spec, st, x, Mode::Logits).unwrap().output(),
            &r,
        )
    };
    let mut cmp = compare(
        |d| s(&state, &with_data(&x, d)),
        x.data(),
        grads.input.data(),
        EPS,
    );
    for (name, p) in param_vector(&state) {
        cmp.merge(&compare(
            |d| s(&with_param(&state, &name, d), &x),
            p.data(),
            grads.params[&name].data(),
            EPS,
        ));
    }
    cmp
}

/// Two-tap contrastive loss through the network, anchors and positives both
/// flowing back into the shared parameters.
fn check_network_sc(rng: &mut ChaCha8Rng) -> Comparison {
    let spec = toy_network_spec();
    let state: ModelState<f64> = model::init_params(&spec, rng.random()).unwrap();
    let n = dim(rng, 2, 4);
    let xa = randn(rng, &[n, 2, 6, 6]);
    let xp = randn(rng, &[n, 2, 6, 6]);
    let weights: Vec<f64> = spec.taps.iter().map(|t| t.weight).collect();
    let (_, grads) = crate::trainer::sc_step_gradients(&spec, &state, &xa, &xp, &weights).unwrap();
    let loss = |st: &ModelState<f64>| {
        let fa = model::infer(&spec, st, &xa, Mode::Features).unwrap();
        let fp = model::infer(&spec, st, &xp, Mode::Features).unwrap();
        let batches: Vec<_> = fa
            .outputs
            .into_iter()
            .zip(fp.outputs)
            .map(|(a, p)| FeatureBatch::new(a, p).unwrap())
            .collect();
        sc_loss::sc_multi_tap_loss(&batches, &weights).unwrap().loss
    };
    let mut cmp = Comparison::default();
    for (name, p) in param_vector(&state) {
        cmp.merge(&compare(
            |d| loss(&with_param(&state, &name, d)),
            p.data(),
            grads[&name].data(),
            EPS,
        ));
    }
    cmp
}

fn check_sc_loss(rng: &mut ChaCha8Rng) -> Comparison {
    let (n, d) = (dim(rng, 1, 6), dim(rng, 1, 8));
    let f1 = randn(rng, &[n, d]);
    let f2 = randn(rng, &[n, d]);
    let r = sc_loss::sc_batch_loss(&FeatureBatch::new(f1.clone(), f2.clone()).unwrap()).unwrap();
    let l = |a: &Tensor<f64>, b: &Tensor<f64>| {
        sc_loss::sc_batch_loss(&FeatureBatch::new(a.clone(), b.clone()).unwrap())
            .unwrap()
            .loss
    };
    let mut cmp = compare(
        |x| l(&with_data(&f1, x), &f2),
        f1.data(),
        r.grad_f1.data(),
        1e-6,
    );
    cmp.merge(&compare(
        |x| l(&f1, &with_data(&f2, x)),
        f2.data(),
        r.grad_f2.data(),
        1e-6,
    ));
    cmp
}

type Check = fn(&mut ChaCha8Rng) -> Comparison;

pub const OPS: [(&str, Check); 8] = [
    ("conv2d", check_conv),
    ("maxpool2d", check_maxpool),
    ("relu", check_relu),
    ("affine", check_affine),
    ("global_avg_pool", check_gap),
    ("network_logits", check_network_logits),
    ("network_sc", check_network_sc),
    ("sc_batch_loss", check_sc_loss),
];

/// Runs `trials` random trials of every check, seeding each op's stream
/// from `seed`.
pub fn run_suite(seed: u64, trials: usize) -> Vec<OpReport> {
    OPS.iter()
        .enumerate()
        .map(|(i, (op, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut result = Comparison::default();
            for _ in 0..trials {
                result.merge(&check(&mut rng));
            }
            OpReport { op, trials, result }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compare_accepts_exact_gradient_of_a_cubic() {
        let x = [0.3, -1.1, 2.0];
        let analytic: Vec<f64> = x.iter().map(|v| 3.0 * v * v).collect();
        let c = compare(|x| x.iter().map(|v| v * v * v).sum(), &x, &analytic, EPS);
        assert!(c.max_rel_error < 1e-8, "{c:?}");
        assert_eq!(c.checked, 3);
    }

    #[test]
    fn compare_flags_a_wrong_gradient() {
        let c = compare(|x| x[0] * x[0], &[1.0], &[3.0], EPS);
        assert!(c.max_rel_error > 0.3);
    }

    #[test]
    fn compare_skips_kinks() {
        let c = compare(|x| x[0].abs(), &[0.0], &[0.0], EPS);
        assert_eq!((c.checked, c.kinks), (0, 1));
    }
}
