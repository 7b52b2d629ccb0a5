use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check_gradients, project};
use crate::autodiff::{OpKind, Tape, Var};
use crate::error::Result;
use crate::eval::{micro_candidates, micro_model};
use crate::neck::{compose_loss, LossMode, Neck, NeckConfig, NeckVariant, TRIPLET_MARGIN};
use crate::nn::{check_model_gradients, ParamBuilder, ParamStore};
use crate::search::{check_alpha_gradient, AlphaParams, SearchConfig, Searcher};
use crate::space::{BackboneOutput, BlockConfig, CBlock};
use crate::tensor::Tensor;

use super::{CheckLine, SuiteReport};

pub const GRAD_TOLERANCE: f64 = 1e-6;
const STEP: f64 = 1e-5;
/// Entries probed per parameter tensor in composite checks.
const PROBES: usize = 6;

type Case = fn(&mut ChaCha8Rng, Option<OpKind>) -> Result<f64>;

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Uniform values with magnitude at least 0.05, clear of the ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn nchw(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(2..6), rng.gen_range(2..6)]
}

fn worst(inputs: &[Tensor<f64>], fault: Option<OpKind>, seed: u64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let r = check_gradients(inputs, STEP, fault, |tape, v| {
        let y = f(tape, v)?;
        if tape.value(y).len() == 1 {
            Ok(y)
        } else {
            project(tape, y, seed)
        }
    })?;
    Ok(r.max_error())
}

fn labels_pk(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let classes = n / 2;
    let mut l: Vec<usize> = (0..n).map(|i| (i / 2).min(classes - 1)).collect();
    for i in (1..n).rev() {
        l.swap(i, rng.gen_range(0..=i));
    }
    l
}

fn binary(rng: &mut ChaCha8Rng, fault: Option<OpKind>, op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Result<f64> {
    let s = nchw(rng);
    let inputs = [uniform(rng, s.clone()), uniform(rng, s)];
    worst(&inputs, fault, rng.gen(), move |t, v| op(t, v[0], v[1]))
}

fn case_add(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    binary(rng, fault, |t, a, b| t.add(a, b))
}

fn case_sub(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    binary(rng, fault, |t, a, b| t.sub(a, b))
}

fn case_mul(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    binary(rng, fault, |t, a, b| t.mul(a, b))
}

fn case_scale(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let c: f64 = rng.gen_range(-2.0..2.0);
    let s = nchw(rng);
    let x = uniform(rng, s);
    worst(&[x], fault, rng.gen(), move |t, v| t.scale(v[0], c))
}

fn case_affine(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let (a, b): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0));
    let s = nchw(rng);
    let x = uniform(rng, s);
    worst(&[x], fault, rng.gen(), move |t, v| t.affine(v[0], a, b))
}

fn case_relu(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let s = nchw(rng);
    let x = off_kink(rng, s);
    worst(&[x], fault, rng.gen(), |t, v| t.relu(v[0]))
}

fn case_sigmoid(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let s = nchw(rng);
    let x = uniform(rng, s).map(|v| 3.0 * v);
    worst(&[x], fault, rng.gen(), |t, v| t.sigmoid(v[0]))
}

fn case_conv2d(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let groups = rng.gen_range(1..3);
    let (cin, cout) = (groups * rng.gen_range(1..3), groups * rng.gen_range(1..3));
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let stride = rng.gen_range(1..3);
    let pad = rng.gen_range(0..=k / 2);
    let (h, w) = (k + rng.gen_range(0..4), k + rng.gen_range(0..4));
    let n = rng.gen_range(1..3);
    let x = uniform(rng, vec![n, cin, h, w]);
    let wt = uniform(rng, vec![cout, cin / groups, k, k]);
    worst(&[x, wt], fault, rng.gen(), move |t, v| t.conv2d(v[0], v[1], stride, pad, groups))
}

fn case_batch_norm_train(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let mut s = nchw(rng);
    s[0] = rng.gen_range(2..4);
    let c = s[1];
    let inputs = [uniform(rng, s), uniform(rng, vec![c]), uniform(rng, vec![c])];
    worst(&inputs, fault, rng.gen(), |t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5))
}

fn case_batch_norm_eval(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let s = nchw(rng);
    let c = s[1];
    let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
    let inputs = [uniform(rng, s), uniform(rng, vec![c]), uniform(rng, vec![c])];
    worst(&inputs, fault, rng.gen(), move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5))
}

fn case_channel_weighted_sum(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let s = nchw(rng);
    let nc = vec![s[0], s[1]];
    let inputs = [uniform(rng, s.clone()), uniform(rng, nc.clone()), uniform(rng, s), uniform(rng, nc)];
    worst(&inputs, fault, rng.gen(), |t, v| t.channel_weighted_sum(v[0], v[1], v[2], v[3]))
}

fn case_global_avg_pool(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let s = nchw(rng);
    let x = uniform(rng, s);
    worst(&[x], fault, rng.gen(), |t, v| t.global_avg_pool(v[0]))
}

fn case_stripe_avg_pool(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let s = nchw(rng);
    let start = rng.gen_range(0..s[2]);
    let end = rng.gen_range(start + 1..=s[2]);
    let x = uniform(rng, s);
    worst(&[x], fault, rng.gen(), move |t, v| t.stripe_avg_pool(v[0], start, end))
}

fn case_linear(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let (n, din, dout) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
    let mut inputs = vec![uniform(rng, vec![n, din]), uniform(rng, vec![dout, din])];
    let bias = rng.gen_bool(0.5);
    if bias {
        inputs.push(uniform(rng, vec![dout]));
    }
    worst(&inputs, fault, rng.gen(), move |t, v| t.linear(v[0], v[1], bias.then(|| v[2])))
}

fn case_softmax(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let shape = vec![rng.gen_range(1..4), rng.gen_range(2..7)];
    let x = uniform(rng, shape).map(|v| 2.0 * v);
    worst(&[x], fault, rng.gen(), |t, v| t.softmax(v[0]))
}

fn case_max_pool(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let mut s = nchw(rng);
    s[2] += 1;
    s[3] += 1;
    let x = uniform(rng, s);
    worst(&[x], fault, rng.gen(), |t, v| t.max_pool3s2(v[0]))
}

fn case_avg_pool(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let s = nchw(rng);
    let x = uniform(rng, s);
    worst(&[x], fault, rng.gen(), |t, v| t.avg_pool2s2(v[0]))
}

fn case_concat(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let s = nchw(rng);
    let mut s2 = s.clone();
    s2[1] = rng.gen_range(1..4);
    let inputs = [uniform(rng, s), uniform(rng, s2)];
    worst(&inputs, fault, rng.gen(), |t, v| t.concat(v[0], v[1]))
}

fn case_scale_by_entry(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let len = rng.gen_range(1..6);
    let entry = rng.gen_range(0..len);
    let s = nchw(rng);
    let inputs = [uniform(rng, s), uniform(rng, vec![len])];
    worst(&inputs, fault, rng.gen(), move |t, v| t.scale_by_entry(v[0], v[1], entry))
}

fn case_sum(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let s = nchw(rng);
    let x = uniform(rng, s);
    let w = uniform(rng, x.shape().to_vec());
    worst(&[x, w], fault, rng.gen(), |t, v| {
        let p = t.mul(v[0], v[1])?;
        t.sum(p)
    })
}

fn case_mean(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let s = nchw(rng);
    let x = uniform(rng, s);
    let w = uniform(rng, x.shape().to_vec());
    worst(&[x, w], fault, rng.gen(), |t, v| {
        let p = t.mul(v[0], v[1])?;
        t.mean(p)
    })
}

fn case_cross_entropy(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let (n, c) = (rng.gen_range(1..6), rng.gen_range(2..6));
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let x = uniform(rng, vec![n, c]).map(|v| 2.0 * v);
    worst(&[x], fault, rng.gen(), move |t, v| t.cross_entropy(v[0], &labels))
}

fn case_triplet(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let n = 2 * rng.gen_range(2..5);
    let labels = labels_pk(rng, n);
    let d = rng.gen_range(2..6);
    let x = uniform(rng, vec![n, d]);
    let margin = rng.gen_range(0.5..2.0);
    worst(&[x], fault, rng.gen(), move |t, v| t.triplet_batch_hard(v[0], &labels, margin))
}

fn case_cblock(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let (k1, k2) = ([3, 5, 7][rng.gen_range(0..3)], [3, 5, 7][rng.gen_range(0..3)]);
    let channels = 4 * rng.gen_range(2..4);
    let mut store = ParamStore::<f64>::new();
    let init = rng.gen();
    let block = CBlock::build(&mut ParamBuilder::new(&mut store, init), k1, k2, channels, &BlockConfig::default())?;
    let shape = vec![2, channels, rng.gen_range(2..5), rng.gen_range(2..4)];
    let x = uniform(rng, shape);
    let seed = rng.gen();
    let r = check_model_gradients(&store, &[x], STEP, PROBES, seed, fault, |ctx, v| {
        let y = block.forward(ctx, v[0])?;
        project(&mut ctx.tape, y, seed)
    })?;
    Ok(r.max_error())
}

fn case_neck(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let variant = [NeckVariant::Fbl, NeckVariant::Bl, NeckVariant::Bn][rng.gen_range(0..3)];
    let (global, c2, classes) = (rng.gen_range(3..7), rng.gen_range(2..5), 3);
    let cfg = NeckConfig {
        partitions: rng.gen_range(1..3),
        stripe_width: rng.gen_range(2..5),
        ..NeckConfig::new(global, classes, variant)
    };
    let mut store = ParamStore::<f64>::new();
    let init = rng.gen();
    let neck = Neck::build(&mut ParamBuilder::new(&mut store, init), cfg, Some(c2))?;
    let labels = labels_pk(rng, 6);
    let inputs = [
        uniform(rng, vec![6, global, 2, 1]),
        uniform(rng, vec![6, c2, 2 * cfg.partitions, 2]),
    ];
    let probe_seed = rng.gen();
    let r = check_model_gradients(&store, &inputs, STEP, PROBES, probe_seed, fault, |ctx, v| {
        let out = BackboneOutput {
            fmap2: Some(v[1]),
            fmap3: v[0],
        };
        let bundle = neck.forward(ctx, &out, true)?;
        Ok(compose_loss(ctx, &bundle, &labels, LossMode::Train, TRIPLET_MARGIN)?.0)
    })?;
    Ok(r.max_error())
}

/// Architecture gradient of a two-position micro supernet under the
/// frozen-gate protocol.
fn case_alpha(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let space = vec![micro_candidates(); 2];
    let mut store = ParamStore::<f64>::new();
    let init = rng.gen();
    let model = micro_model(&mut store, init, &space, 8, 4)?;
    let alpha = AlphaParams::new((0..2).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())?;
    let cfg = SearchConfig {
        k: rng.gen_range(1..3),
        ..SearchConfig::default()
    };
    let searcher = Searcher::new(&model, store, alpha, cfg)?.with_fault(fault);
    let labels = labels_pk(rng, 8);
    let images = uniform(rng, vec![8, 3, 8, 4]);
    Ok(check_alpha_gradient(&searcher, &images, &labels)?.max_error())
}

const FAMILIES: &[(&str, Case)] = &[
    ("add", case_add),
    ("sub", case_sub),
    ("mul", case_mul),
    ("scale", case_scale),
    ("affine", case_affine),
    ("relu", case_relu),
    ("sigmoid", case_sigmoid),
    ("conv2d", case_conv2d),
    ("batch_norm_train", case_batch_norm_train),
    ("batch_norm_eval", case_batch_norm_eval),
    ("channel_weighted_sum", case_channel_weighted_sum),
    ("global_avg_pool", case_global_avg_pool),
    ("stripe_avg_pool", case_stripe_avg_pool),
    ("linear", case_linear),
    ("softmax", case_softmax),
    ("max_pool3s2", case_max_pool),
    ("avg_pool2s2", case_avg_pool),
    ("concat", case_concat),
    ("scale_by_entry", case_scale_by_entry),
    ("sum", case_sum),
    ("mean", case_mean),
    ("cross_entropy", case_cross_entropy),
    ("triplet_batch_hard", case_triplet),
    ("cblock", case_cblock),
    ("neck_loss", case_neck),
    ("alpha_frozen_gate", case_alpha),
];

pub fn gradient_families() -> impl Iterator<Item = &'static str> {
    FAMILIES.iter().map(|(n, _)| *n)
}

/// Runs `cases` random finite-difference checks per family. With `fault`
/// set, every backward rule of that op family is corrupted.
pub fn gradient_suite(cases: usize, seed: u64, fault: Option<OpKind>) -> Result<SuiteReport> {
    let mut lines = Vec::with_capacity(FAMILIES.len());
    for (i, (name, case)) in FAMILIES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let e = case(&mut rng, fault)?;
            worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
        }
        lines.push(CheckLine {
            name: (*name).to_string(),
            cases,
            worst,
            passed: worst < GRAD_TOLERANCE,
        });
    }
    Ok(SuiteReport {
        suite: "gradients",
        lines,
    })
}

