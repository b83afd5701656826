//! Finite-difference cases for every differentiable op and the tiny network.
//! Each case returns its name and report so callers can assert or tabulate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uniseg::losses::{batch_modality_loss_node, Domain, LossParams, LossTable};
use uniseg::network::{attention_gate, BoundParams, ParameterSet};
use uniseg::{AttentionUNet, ModelConfig, Tensor};

use super::{gradcheck, named, rng, weighted_sum, FdOptions, FdReport};

pub type Case = (String, FdReport);

fn kinked(step: f64, tol: f64) -> FdOptions {
    FdOptions {
        skip_kinks: true,
        ..FdOptions::new(step, tol)
    }
}

pub fn conv2d() -> Vec<Case> {
    let mut r = rng(1);
    [(1, 1), (1, 0), (1, 2)]
        .into_iter()
        .map(|(stride, padding)| {
            let inputs = vec![
                Tensor::randn([2, 3, 8, 8], 1.0, &mut r),
                Tensor::randn([4, 3, 3, 3], 0.5, &mut r),
                Tensor::randn([4], 0.5, &mut r),
            ];
            let probe = uniseg::ops::conv2d(&inputs[0], &inputs[1], &inputs[2], stride, padding).unwrap();
            let weights = Tensor::randn(probe.shape(), 1.0, &mut r);
            let report = gradcheck(
                &inputs,
                |g, xs| {
                    let v: Vec<_> = xs.iter().map(|t| g.param(t.clone())).collect();
                    let out = g.conv2d(v[0], v[1], v[2], stride, padding).unwrap();
                    (weighted_sum(g, out, &weights), v)
                },
                FdOptions::new(1e-3, 1e-4),
            );
            (format!("conv2d stride {stride} pad {padding}"), report)
        })
        .collect()
}

pub fn conv_transpose() -> Case {
    let mut r = rng(2);
    let inputs = vec![
        Tensor::randn([1, 2, 4, 4], 1.0, &mut r),
        Tensor::randn([2, 3, 2, 2], 0.5, &mut r),
        Tensor::randn([3], 0.5, &mut r),
    ];
    let weights = Tensor::randn([1, 3, 8, 8], 1.0, &mut r);
    let report = gradcheck(
        &inputs,
        |g, xs| {
            let v: Vec<_> = xs.iter().map(|t| g.param(t.clone())).collect();
            let out = g.conv_transpose2d(v[0], v[1], v[2]).unwrap();
            (weighted_sum(g, out, &weights), v)
        },
        FdOptions::new(1e-3, 1e-4),
    );
    ("conv_transpose2d".into(), report)
}

pub fn pointwise() -> Vec<Case> {
    let mut r = rng(3);
    let x = Tensor::randn([2, 3, 4, 4], 1.5, &mut r);
    let w = Tensor::randn([2, 3, 4, 4], 1.0, &mut r);
    let relu = gradcheck(
        std::slice::from_ref(&x),
        |g, xs| {
            let v = g.param(xs[0].clone());
            let out = g.relu(v);
            (weighted_sum(g, out, &w), vec![v])
        },
        kinked(1e-3, 1e-4),
    );
    let sigmoid = gradcheck(
        std::slice::from_ref(&x),
        |g, xs| {
            let v = g.param(xs[0].clone());
            let out = g.sigmoid(v);
            (weighted_sum(g, out, &w), vec![v])
        },
        FdOptions::new(1e-4, 1e-6),
    );
    let scale = gradcheck(
        std::slice::from_ref(&x),
        |g, xs| {
            let v = g.param(xs[0].clone());
            let out = g.scale(v, -2.5);
            (weighted_sum(g, out, &w), vec![v])
        },
        FdOptions::new(1e-3, 1e-6),
    );
    vec![
        ("relu".into(), relu),
        ("sigmoid".into(), sigmoid),
        ("scale".into(), scale),
    ]
}

pub fn maxpool() -> Case {
    let mut r = rng(4);
    let x = Tensor::randn([2, 2, 6, 6], 1.0, &mut r);
    let w = Tensor::randn([2, 2, 3, 3], 1.0, &mut r);
    let report = gradcheck(
        &[x],
        |g, xs| {
            let v = g.param(xs[0].clone());
            let out = g.maxpool2d(v).unwrap();
            (weighted_sum(g, out, &w), vec![v])
        },
        kinked(1e-3, 1e-4),
    );
    ("maxpool2d".into(), report)
}

pub fn structural() -> Vec<Case> {
    let mut r = rng(5);
    let a = Tensor::randn([2, 3, 4, 4], 1.0, &mut r);
    let b = Tensor::randn([2, 2, 4, 4], 1.0, &mut r);
    let gate = Tensor::randn([2, 1, 4, 4], 1.0, &mut r);
    let w5 = Tensor::randn([2, 5, 4, 4], 1.0, &mut r);
    let w3 = Tensor::randn([2, 3, 4, 4], 1.0, &mut r);
    let concat = gradcheck(
        &[a.clone(), b],
        |g, xs| {
            let v: Vec<_> = xs.iter().map(|t| g.param(t.clone())).collect();
            let out = g.concat_channels(v[0], v[1]).unwrap();
            (weighted_sum(g, out, &w5), v)
        },
        FdOptions::new(1e-3, 1e-6),
    );
    let mul = gradcheck(
        &[a.clone(), gate],
        |g, xs| {
            let v: Vec<_> = xs.iter().map(|t| g.param(t.clone())).collect();
            let out = g.mul(v[0], v[1]).unwrap();
            (weighted_sum(g, out, &w3), v)
        },
        FdOptions::new(1e-3, 1e-6),
    );
    let add = gradcheck(
        &[a.clone(), a.map(|v| v * 0.5 - 1.0)],
        |g, xs| {
            let v: Vec<_> = xs.iter().map(|t| g.param(t.clone())).collect();
            let out = g.add(v[0], v[1]).unwrap();
            (weighted_sum(g, out, &w3), v)
        },
        FdOptions::new(1e-3, 1e-6),
    );
    vec![
        ("concat".into(), concat),
        ("broadcast mul".into(), mul),
        ("add".into(), add),
    ]
}

pub fn dropout() -> Case {
    let mut r = rng(6);
    let x = Tensor::randn([1, 2, 5, 5], 1.0, &mut r);
    let w = Tensor::randn([1, 2, 5, 5], 1.0, &mut r);
    let report = gradcheck(
        &[x],
        |g, xs| {
            let v = g.param(xs[0].clone());
            let mut mask_rng = ChaCha8Rng::seed_from_u64(77);
            let out = g.dropout(v, 0.3, true, &mut mask_rng).unwrap();
            (weighted_sum(g, out, &w), vec![v])
        },
        FdOptions::new(1e-3, 1e-6),
    );
    ("dropout".into(), report)
}

pub fn gate() -> Case {
    let mut r = rng(7);
    let (f, inter) = (4, 2);
    let mut template = ParameterSet::new();
    template
        .insert("gate.wx.weight", Tensor::randn([inter, f, 1, 1], 0.7, &mut r))
        .unwrap();
    template
        .insert("gate.wg.weight", Tensor::randn([inter, f, 1, 1], 0.7, &mut r))
        .unwrap();
    template
        .insert("gate.wg.bias", Tensor::randn([inter], 0.3, &mut r))
        .unwrap();
    template
        .insert("gate.psi.weight", Tensor::randn([1, inter, 1, 1], 0.7, &mut r))
        .unwrap();
    template
        .insert("gate.psi.bias", Tensor::randn([1], 0.3, &mut r))
        .unwrap();
    let mut inputs: Vec<Tensor> = template.iter().map(|(_, t)| t.clone()).collect();
    let n_params = inputs.len();
    inputs.push(Tensor::randn([1, f, 4, 4], 1.0, &mut r));
    inputs.push(Tensor::randn([1, f, 4, 4], 1.0, &mut r));
    let w = Tensor::randn([1, f, 4, 4], 1.0, &mut r);
    let report = gradcheck(
        &inputs,
        |g, xs| {
            let params = named(&template, &xs[..n_params]);
            let bound = BoundParams::bind(g, &params);
            let x = g.param(xs[n_params].clone());
            let gs = g.param(xs[n_params + 1].clone());
            let (gated, _) = attention_gate(g, x, gs, &bound, "gate").unwrap();
            let mut vars = bound.vars().to_vec();
            vars.extend([x, gs]);
            (weighted_sum(g, gated, &w), vars)
        },
        kinked(1e-4, 1e-4),
    );
    ("attention gate".into(), report)
}

pub fn focal_tversky() -> Case {
    let mut r = rng(8);
    let p = Tensor::rand_uniform([2, 1, 6, 6], 0.05, 0.95, &mut r);
    let truth = Tensor::rand_uniform([2, 1, 6, 6], 0.0, 1.0, &mut r).map(|v| (v > 0.6) as u8 as f64);
    let table = LossTable {
        mri: LossParams::new(0.7, 0.3, 4.0 / 3.0),
        ct: LossParams::new(0.5, 0.5, 4.0 / 3.0),
    };
    let domains = [Domain::Mri, Domain::Ct];
    let report = gradcheck(
        &[p],
        |g, xs| {
            let v = g.param(xs[0].clone());
            let (loss, _) = batch_modality_loss_node(g, v, &truth, &domains, &table).unwrap();
            (loss, vec![v])
        },
        FdOptions::new(1e-6, 1e-6),
    );
    ("focal tversky".into(), report)
}

/// 200 random coordinates of the [8, 16] network, parameters and input.
pub fn tiny_network() -> Case {
    let config = ModelConfig::with_stages(vec![8, 16]);
    let model = AttentionUNet::new(config, &mut rng(9)).unwrap();
    let mut r = rng(10);
    let mut inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let n_params = inputs.len();
    inputs.push(Tensor::rand_uniform([1, 4, 16, 16], 0.0, 1.0, &mut r));
    let w = Tensor::randn([1, 1, 16, 16], 1.0, &mut r);
    let template = model.params.clone();
    let report = gradcheck(
        &inputs,
        |g, xs| {
            let net = AttentionUNet {
                config: model.config.clone(),
                params: named(&template, &xs[..n_params]),
            };
            let bound = BoundParams::bind(g, &net.params);
            let x = g.param(xs[n_params].clone());
            let out = net.forward(g, &bound, x, false, &mut rng(0)).unwrap();
            let mut vars = bound.vars().to_vec();
            vars.push(x);
            (weighted_sum(g, out, &w), vars)
        },
        FdOptions {
            step: 1e-5,
            tol: 1e-3,
            samples: Some(200),
            skip_kinks: true,
            seed: 11,
        },
    );
    ("attention u-net".into(), report)
}

pub fn all() -> Vec<Case> {
    let mut cases = conv2d();
    cases.push(conv_transpose());
    cases.extend(pointwise());
    cases.push(maxpool());
    cases.extend(structural());
    cases.push(dropout());
    cases.push(gate());
    cases.push(focal_tversky());
    cases.push(tiny_network());
    cases
}
