//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

pub mod grad_cases;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniseg::network::ParameterSet;
use uniseg::{Graph, ModelConfig, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sum(out * weights)` so that every output element gets a distinct
/// upstream gradient.
pub fn weighted_sum(graph: &mut Graph, out: Var, weights: &Tensor) -> Var {
    let w = graph.constant(weights.clone());
    let prod = graph.mul(out, w).unwrap();
    graph.sum(prod)
}

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    pub tol: f64,
    /// Check this many random coordinates instead of all of them.
    pub samples: Option<usize>,
    /// Redraw coordinates whose one-sided slopes disagree (ReLU/maxpool kinks).
    pub skip_kinks: bool,
    pub seed: u64,
}

impl FdOptions {
    pub fn new(step: f64, tol: f64) -> Self {
        Self {
            step,
            tol,
            samples: None,
            skip_kinks: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
    pub failures: Vec<String>,
}

impl FdReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences against the tape's gradients. `build`
/// records the function on a fresh graph from the given inputs and returns
/// the scalar loss plus the var standing for each input.
pub fn gradcheck<F>(inputs: &[Tensor], build: F, opts: FdOptions) -> FdReport
where
    F: Fn(&mut Graph, &[Tensor]) -> (Var, Vec<Var>),
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let (loss, _) = build(&mut g, xs);
        g.value(loss).item().unwrap()
    };
    let mut g = Graph::new();
    let (loss, vars) = build(&mut g, inputs);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let mut order: Vec<usize> = (0..coords.len()).collect();
    let mut r = rng(opts.seed);
    if opts.samples.is_some() {
        order = sample_indices(&mut r, coords.len(), coords.len()).into_vec();
    }
    let wanted = opts.samples.unwrap_or(coords.len()).min(coords.len());
    let f0 = eval(inputs);
    let mut report = FdReport::default();
    let mut xs = inputs.to_vec();
    for &c in &order {
        if report.checked >= wanted {
            break;
        }
        let (i, j) = coords[c];
        let orig = xs[i].data()[j];
        xs[i].data_mut()[j] = orig + opts.step;
        let fp = eval(&xs);
        xs[i].data_mut()[j] = orig - opts.step;
        let fm = eval(&xs);
        xs[i].data_mut()[j] = orig;
        if opts.skip_kinks {
            let (up, down) = ((fp - f0) / opts.step, (f0 - fm) / opts.step);
            if rel_err(up, down) > 0.05 && (up - down).abs() > 1e-7 {
                report.skipped += 1;
                continue;
            }
        }
        let numeric = (fp - fm) / (2.0 * opts.step);
        let a = analytic[i].data()[j];
        let e = rel_err(a, numeric);
        report.max_rel = report.max_rel.max(e);
        report.checked += 1;
        if e > opts.tol {
            report.failures.push(format!(
                "input {i}[{j}]: analytic {a:.9e} vs numeric {numeric:.9e} (rel {e:.2e})"
            ));
        }
    }
    report
}

/// Binds `tensors` as leaves under the names of `template`.
pub fn named(template: &ParameterSet, tensors: &[Tensor]) -> ParameterSet {
    let mut p = ParameterSet::new();
    for ((name, _), t) in template.iter().zip(tensors) {
        p.insert(name, t.clone()).unwrap();
    }
    p
}

// ---- straight-line reference implementations ----

pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }
}

pub fn naive_conv(x: &Map, weight: &Tensor, bias: Option<&Tensor>, pad: usize) -> Map {
    let s = weight.shape();
    let (cout, cin, k) = (s[0], s[1], s[2]);
    assert_eq!(cin, x.c);
    let (oh, ow) = (x.h + 2 * pad - k + 1, x.w + 2 * pad - k + 1);
    let mut v = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = ((y + ky) as isize - pad as isize, (xx + kx) as isize - pad as isize);
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            acc +=
                                weight.data()[((co * cin + ci) * k + ky) * k + kx] * x.at(ci, iy as usize, ix as usize);
                        }
                    }
                }
                v[(co * oh + y) * ow + xx] = acc;
            }
        }
    }
    Map {
        c: cout,
        h: oh,
        w: ow,
        v,
    }
}

pub fn naive_conv_transpose(x: &Map, weight: &Tensor, bias: &Tensor) -> Map {
    let cout = weight.shape()[1];
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let mut v = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for y in 0..oh {
            for xx in 0..ow {
                let (i, a, j, b) = (y / 2, y % 2, xx / 2, xx % 2);
                let mut acc = bias.data()[co];
                for ci in 0..x.c {
                    acc += weight.data()[((ci * cout + co) * 2 + a) * 2 + b] * x.at(ci, i, j);
                }
                v[(co * oh + y) * ow + xx] = acc;
            }
        }
    }
    Map {
        c: cout,
        h: oh,
        w: ow,
        v,
    }
}

pub fn naive_maxpool(x: &Map) -> Map {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut v = Vec::with_capacity(x.c * oh * ow);
    for c in 0..x.c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    m = m.max(x.at(c, 2 * y + dy, 2 * xx + dx));
                }
                v.push(m);
            }
        }
    }
    Map {
        c: x.c,
        h: oh,
        w: ow,
        v,
    }
}

pub fn naive_relu(mut x: Map) -> Map {
    x.v.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

pub fn naive_sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn block(x: &Map, p: &ParameterSet, prefix: &str) -> Map {
    let get = |n: &str| p.get(&format!("{prefix}.{n}")).unwrap();
    let h = naive_relu(naive_conv(x, get("conv1.weight"), Some(get("conv1.bias")), 1));
    naive_relu(naive_conv(&h, get("conv2.weight"), Some(get("conv2.bias")), 1))
}

fn gate(x: &Map, g: &Map, p: &ParameterSet, prefix: &str) -> Map {
    let get = |n: &str| p.get(&format!("{prefix}.{n}")).unwrap();
    let theta = naive_conv(x, get("wx.weight"), None, 0);
    let phi = naive_conv(g, get("wg.weight"), Some(get("wg.bias")), 0);
    let fused = Map {
        c: theta.c,
        h: theta.h,
        w: theta.w,
        v: theta.v.iter().zip(&phi.v).map(|(a, b)| (a + b).max(0.0)).collect(),
    };
    let psi = naive_conv(&fused, get("psi.weight"), Some(get("psi.bias")), 0);
    let plane = x.h * x.w;
    let v = (0..x.c * plane)
        .map(|i| x.v[i] * naive_sigmoid(psi.v[i % plane]))
        .collect();
    Map {
        c: x.c,
        h: x.h,
        w: x.w,
        v,
    }
}

/// The full forward pass, written out without the tape, for one image.
pub fn naive_forward(config: &ModelConfig, p: &ParameterSet, image: Map) -> Vec<f64> {
    let stages = config.stage_channels.len();
    let mut skips = Vec::new();
    let mut h = image;
    for s in 1..=stages {
        let f = block(&h, p, &format!("enc{s}"));
        h = naive_maxpool(&f);
        skips.push(f);
    }
    h = block(&h, p, "bottleneck");
    for s in (1..=stages).rev() {
        let up = naive_conv_transpose(
            &h,
            p.get(&format!("up{s}.weight")).unwrap(),
            p.get(&format!("up{s}.bias")).unwrap(),
        );
        let gated = gate(&skips[s - 1], &up, p, &format!("gate{s}"));
        let mut v = gated.v;
        v.extend_from_slice(&up.v);
        let merged = Map {
            c: gated.c + up.c,
            h: up.h,
            w: up.w,
            v,
        };
        h = block(&merged, p, &format!("dec{s}"));
    }
    let logits = naive_conv(&h, p.get("head.weight").unwrap(), Some(p.get("head.bias").unwrap()), 0);
    logits.v.into_iter().map(naive_sigmoid).collect()
}

// ---- metric oracles ----

/// `(tp, fp, tn, fn)` by looking at every pixel.
pub fn brute_confusion(pred: &[bool], truth: &[bool]) -> (u64, u64, u64, u64) {
    let mut c = (0, 0, 0, 0);
    for i in 0..pred.len() {
        match (pred[i], truth[i]) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, false) => c.2 += 1,
            (false, true) => c.3 += 1,
        }
    }
    c
}

/// AUC as the fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut concordant = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        if !labels[i] {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                concordant += 1.0;
            } else if scores[i] == scores[j] {
                concordant += 0.5;
            }
        }
    }
    concordant / pairs
}

/// Random 16x16 mask/score pair with the given foreground rate and coarse
/// score levels so that ties occur.
pub fn random_mask_scores<R: Rng>(r: &mut R, n: usize) -> (Vec<bool>, Vec<f64>, Vec<bool>) {
    let rate = r.random_range(0.05..0.6);
    let truth: Vec<bool> = (0..n).map(|_| r.random::<f64>() < rate).collect();
    let scores: Vec<f64> = truth
        .iter()
        .map(|&t| {
            let base: f64 = r.random();
            let s = if t {
                0.6 * base + 0.4 * r.random::<f64>()
            } else {
                0.7 * base
            };
            (s * 32.0).round() / 32.0
        })
        .collect();
    let pred: Vec<bool> = (0..n).map(|_| r.random::<f64>() < 0.4).collect();
    (truth, scores, pred)
}
