//! Finite-difference verification of every differentiable primitive and of
//! full bag forward passes, shared by the `gradcheck` command and the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{EmbedderConfig, MilModel, ModelConfig};
use crate::tensor::{gradient_check, gradient_check_coords, gradient_check_extrapolated_coords, Tape, Tensor, Var};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
/// Step for tensors the loss depends on smoothly (no relu or maxpool
/// between them and the output), used with extrapolated differences.
const SMOOTH_EPS: f64 = 1e-2;
const HEAD_GAIN: f64 = 3.0;
const MAX_FIXTURE_DRAWS: usize = 64;
/// Required distance of embedding pre-activations from the relu kink. A step
/// on an input or conv weight reaches them amplified by both conv blocks.
const EMBED_MARGIN: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero: |v| ∈ [0.1, 1].
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// A shuffled grid with spacing 0.05 plus small jitter, so no two entries
/// are within finite-difference reach of each other.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| i as f64 * 0.05 - n as f64 * 0.025 + rng.random_range(0.0..0.01))
        .collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Reduces any output to a scalar through fixed random weights, so every
/// output coordinate contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Relative error of every primitive op on random float64 inputs.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut check = |name: &str,
                     x: Tensor<f64>,
                     f: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var>|
     -> Result<()> {
        let err = gradient_check(|t, v| { let y = f(t, v)?; weighted_sum(t, y, 99) }, &x, EPS)?;
        out.push(CheckResult {
            name: name.to_string(),
            max_rel_error: err,
            tolerance: PRIMITIVE_TOLERANCE,
        });
        Ok(())
    };

    let b = uniform(&mut rng, &[4, 2], -1.0, 1.0);
    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    check("matmul/lhs", a.clone(), &|t, v| { let c = t.constant(b.clone()); t.matmul(v, c) })?;
    check("matmul/rhs", b.clone(), &|t, v| { let c = t.constant(a.clone()); t.matmul(c, v) })?;

    let w = uniform(&mut rng, &[5, 4], -1.0, 1.0);
    let bias = uniform(&mut rng, &[5], -1.0, 1.0);
    check("linear/input", a.clone(), &|t, v| {
        let (w, b) = (t.constant(w.clone()), t.constant(bias.clone()));
        t.linear(v, w, Some(b))
    })?;
    check("linear/weight", w.clone(), &|t, v| {
        let (x, b) = (t.constant(a.clone()), t.constant(bias.clone()));
        t.linear(x, v, Some(b))
    })?;
    check("linear/bias", bias.clone(), &|t, v| {
        let (x, w) = (t.constant(a.clone()), t.constant(w.clone()));
        t.linear(x, w, Some(v))
    })?;

    let img = uniform(&mut rng, &[2, 5, 5], -1.0, 1.0);
    let kern = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let kb = uniform(&mut rng, &[3], -1.0, 1.0);
    check("conv2d/input", img.clone(), &|t, v| {
        let (k, b) = (t.constant(kern.clone()), t.constant(kb.clone()));
        t.conv2d(v, k, b)
    })?;
    check("conv2d/kernels", kern.clone(), &|t, v| {
        let (x, b) = (t.constant(img.clone()), t.constant(kb.clone()));
        t.conv2d(x, v, b)
    })?;
    check("conv2d/bias", kb.clone(), &|t, v| {
        let (x, k) = (t.constant(img.clone()), t.constant(kern.clone()));
        t.conv2d(x, k, v)
    })?;

    check("maxpool2", distinct(&mut rng, &[1, 6, 6]), &|t, v| t.maxpool2(v))?;
    check("relu", away_from_zero(&mut rng, &[3, 4]), &|t, v| Ok(t.relu(v)))?;
    check("tanh", uniform(&mut rng, &[7], -2.0, 2.0), &|t, v| Ok(t.tanh(v)))?;
    check("sigmoid", uniform(&mut rng, &[7], -3.0, 3.0), &|t, v| Ok(t.sigmoid(v)))?;
    check("neg", uniform(&mut rng, &[4], -1.0, 1.0), &|t, v| Ok(t.neg(v)))?;
    check("scale", uniform(&mut rng, &[4], -1.0, 1.0), &|t, v| Ok(t.scale(v, -2.5)))?;

    let other = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    let x23 = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    check("add", x23.clone(), &|t, v| { let o = t.constant(other.clone()); t.add(v, o) })?;
    check("sub/lhs", x23.clone(), &|t, v| { let o = t.constant(other.clone()); t.sub(v, o) })?;
    check("sub/rhs", x23.clone(), &|t, v| { let o = t.constant(other.clone()); t.sub(o, v) })?;
    check("mul", x23.clone(), &|t, v| { let o = t.constant(other.clone()); t.mul(v, o) })?;
    check("sum", x23.clone(), &|t, v| Ok(t.sum(v)))?;
    check("max", distinct(&mut rng, &[6]), &|t, v| t.max(v))?;
    check("logsumexp/T=1", uniform(&mut rng, &[5], -2.0, 2.0), &|t, v| t.logsumexp(v, 1.0))?;
    check("logsumexp/T=3", uniform(&mut rng, &[5], -2.0, 2.0), &|t, v| t.logsumexp(v, 3.0))?;
    check("softmax/vector", uniform(&mut rng, &[5], -2.0, 2.0), &|t, v| t.softmax(v, 0, 1.0))?;
    check("softmax/rows T=0.5", uniform(&mut rng, &[3, 4], -1.0, 1.0), &|t, v| t.softmax(v, 1, 0.5))?;
    check("softmax/cols", uniform(&mut rng, &[3, 4], -1.0, 1.0), &|t, v| t.softmax(v, 0, 1.0))?;
    check("reshape", x23.clone(), &|t, v| t.reshape(v, [3, 2]))?;
    let sib = uniform(&mut rng, &[4], -1.0, 1.0);
    check("stack", uniform(&mut rng, &[4], -1.0, 1.0), &|t, v| {
        let s = t.constant(sib.clone());
        t.stack(&[s, v, s])
    })?;
    check("pick", uniform(&mut rng, &[5], -1.0, 1.0), &|t, v| t.pick(v, 3))?;
    Ok(out)
}

/// Noise image with an instance-specific contrast and a bright band at an
/// instance-specific height, so attention scores differ across the bag.
fn distinct_image(rng: &mut ChaCha8Rng, k: usize) -> Tensor<f64> {
    let contrast = 0.4 + 0.3 * k as f64;
    let band = 4 + 8 * (k % 3);
    let data = (0..784)
        .map(|i| {
            let row = i / 28;
            let lift = if (band..band + 6).contains(&row) { 0.5 } else { 0.0 };
            rng.random_range(0.0..1.0) * contrast + lift
        })
        .collect();
    Tensor::new([1, 28, 28], data).unwrap()
}

/// Model with O(1) random weights so that no gradient coordinate drowns
/// in finite-difference noise. The attention and classifier weights get an
/// extra gain, otherwise attention stays near uniform and its gradients
/// shrink towards round-off.
fn conditioned(config: ModelConfig, seed: u64) -> Result<MilModel<f64>> {
    let mut model = MilModel::<f64>::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in model.parameters_mut() {
        let fan_in: usize = t.shape()[1..].iter().product::<usize>().max(1);
        let gain = if MilModel::<f64>::is_embedder_param(name) { 1.0 } else { HEAD_GAIN };
        let bound = if name.ends_with("bias") { 0.5 } else { gain * (3.0 / fan_in as f64).sqrt() };
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
    }
    Ok(model)
}

/// Distance of a conv28 fixture from the nearest non-smooth point of its
/// embedder: the smallest |relu pre-activation| or gap between the two
/// largest positive values of a maxpool window in the conv blocks, and the
/// smallest |pre-activation| of the embedding layer.
fn kink_margins(model: &MilModel<f64>, bag: &[Tensor<f64>]) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let params = model.register_params(&mut tape, |_| false);
    let p = |name: &str| params[model.parameters().iter().position(|(n, _)| n == name).expect("layout")];
    let mut margin = f64::INFINITY;
    let mut relu_margin = |v: &[f64]| v.iter().for_each(|z| margin = margin.min(z.abs()));
    let mut flat = Vec::new();
    let mut pool_gaps = Vec::new();
    for x in bag {
        let x = tape.constant(x.clone());
        let mut y = x;
        for layer in ["conv1", "conv2"] {
            let z = tape.conv2d(y, p(&format!("embedder.{layer}.weight")), p(&format!("embedder.{layer}.bias")))?;
            relu_margin(tape.value(z));
            let r = tape.relu(z);
            let shape = tape.shape(r).to_vec();
            pool_gaps.push(window_gaps(tape.value(r), &shape));
            y = tape.maxpool2(r)?;
        }
        let n = tape.value(y).len();
        flat.push(tape.reshape(y, [n])?);
    }
    let stacked = tape.stack(&flat)?;
    let conv = pool_gaps.into_iter().flatten().fold(margin, f64::min);
    let h = tape.linear(stacked, p("embedder.fc.weight"), Some(p("embedder.fc.bias")))?;
    let embed = tape.value(h).iter().fold(f64::INFINITY, |m, z| m.min(z.abs()));
    Ok((conv, embed))
}

fn window_gaps(v: &[f64], shape: &[usize]) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut gaps = Vec::new();
    for ch in 0..c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let mut win: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(a, b)| v[ch * h * w + (2 * i + a) * w + 2 * j + b])
                    .collect();
                win.sort_by(|a, b| b.total_cmp(a));
                if win[1] > 0.0 {
                    gaps.push(win[0] - win[1]);
                }
            }
        }
    }
    gaps
}

/// Cross-entropy of one bag, differentiated with respect to one parameter
/// tensor or one instance.
fn bag_loss_check(
    model: &MilModel<f64>,
    bag: &[Tensor<f64>],
    target: Target,
    coords: Option<&[usize]>,
) -> Result<f64> {
    let x = match target {
        Target::Param(k) => model.parameters()[k].1.clone(),
        Target::Input(k) => bag[k].clone(),
    };
    let all: Vec<usize> = (0..x.numel()).collect();
    let coords = coords.unwrap_or(&all);
    // Differentiate towards the non-predicted class so the loss is far
    // from saturation and every path carries a usable gradient.
    let z = model.forward(bag)?.logits;
    let label = u8::from(z[1] <= z[0]);
    let kink_free = match target {
        Target::Param(k) => !MilModel::<f64>::is_embedder_param(&model.parameters()[k].0),
        Target::Input(_) => false,
    } || matches!(model.config().embedder, EmbedderConfig::Identity { .. });
    let loss = |tape: &mut Tape<f64>, v: Var| {
        let mut params = model.register_params(tape, |_| false);
        if let Target::Param(k) = target {
            params[k] = v;
        }
        let inputs: Vec<Var> = bag
            .iter()
            .enumerate()
            .map(|(i, x)| match target {
                Target::Input(k) if k == i => v,
                _ => tape.constant(x.clone()),
            })
            .collect();
        let f = model.forward_vars(tape, &params, &inputs)?;
        MilModel::cross_entropy(tape, f.logits, label)
    };
    // Head gradients can cancel across instances to many orders of magnitude
    // below the loss; the extrapolated difference still resolves them.
    if kink_free {
        gradient_check_extrapolated_coords(loss, &x, SMOOTH_EPS, coords)
    } else {
        gradient_check_coords(loss, &x, EPS, coords)
    }
}

#[derive(Clone, Copy)]
enum Target {
    Param(usize),
    Input(usize),
}

fn model_suite(label: &str, model: &MilModel<f64>, bag: &[Tensor<f64>], sample: Option<usize>, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick_coords = |n: usize| -> Option<Vec<usize>> {
        sample.filter(|&s| s < n).map(|s| (0..s).map(|_| rng.random_range(0..n)).collect())
    };
    let mut out = Vec::new();
    for (k, (name, t)) in model.parameters().iter().enumerate() {
        let coords = pick_coords(t.numel());
        out.push(CheckResult {
            name: format!("{label}/{name}"),
            max_rel_error: bag_loss_check(model, bag, Target::Param(k), coords.as_deref())?,
            tolerance: MODEL_TOLERANCE,
        });
    }
    for (k, x) in bag.iter().enumerate() {
        let coords = pick_coords(x.numel());
        out.push(CheckResult {
            name: format!("{label}/input[{k}]"),
            max_rel_error: bag_loss_check(model, bag, Target::Input(k), coords.as_deref())?,
            tolerance: MODEL_TOLERANCE,
        });
    }
    Ok(out)
}

struct Fixture {
    reduced: MilModel<f64>,
    full: Option<MilModel<f64>>,
    images: Vec<Tensor<f64>>,
    rng: ChaCha8Rng,
}

fn conv_fixture(seed: u64, include_full_size: bool) -> Result<Fixture> {
    let reduced = conditioned(
        ModelConfig::new(
            EmbedderConfig::Conv28 {
                conv1_channels: 8,
                conv2_channels: 12,
                kernel: 5,
                embed_dim: 24,
            },
            16,
        ),
        seed,
    )?;
    let full = if include_full_size {
        Some(conditioned(ModelConfig::new(EmbedderConfig::conv28(), 128), seed + 2)?)
    } else {
        None
    };
    // Redraw the bag until every relu input and maxpool gap is clear of the
    // distance a finite-difference step can move it.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    for attempt in 0..=MAX_FIXTURE_DRAWS {
        if attempt == MAX_FIXTURE_DRAWS {
            return Err(Error::Numeric(format!(
                "no smooth gradcheck fixture found in {MAX_FIXTURE_DRAWS} draws"
            )));
        }
        images = (0..3).map(|k| distinct_image(&mut rng, k)).collect();
        let (conv, embed) = kink_margins(&reduced, &images)?;
        let mut smooth = conv >= EPS && embed >= EMBED_MARGIN;
        // The default model has too many embedding units to clear the wider
        // margin; it is only checked on sampled coordinates.
        if let (true, Some(full)) = (smooth, &full) {
            smooth = kink_margins(full, &images)?.0 >= EPS;
        }
        if smooth {
            break;
        }
    }

    Ok(Fixture { reduced, full, images, rng })
}

/// Full bag forward checks: a reduced-width conv28 model and an identity model on
/// every coordinate, and the default conv28 model on sampled coordinates.
pub fn model_checks(seed: u64, include_full_size: bool) -> Result<Vec<CheckResult>> {
    let Fixture { reduced, full, images, mut rng } = conv_fixture(seed, include_full_size)?;
    let mut out = model_suite("conv28-reduced", &reduced, &images, None, seed)?;

    let identity = conditioned(ModelConfig::new(EmbedderConfig::Identity { dim: 6 }, 5), seed + 1)?;
    let vectors: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&mut rng, &[6], -1.0, 1.0)).collect();
    out.extend(model_suite("identity", &identity, &vectors, None, seed)?);

    if let Some(full) = &full {
        out.extend(model_suite("conv28", full, &images, Some(24), seed)?);
    }
    Ok(out)
}
