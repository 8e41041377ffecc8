//! Central-difference gradient checks in f64: every differentiable op plus
//! the composite fire module and pooling heads.

use ccnn::arch::{
    declare_conv, declare_fire, declare_head, fire_forward, head_forward, FireSpec, Graph, HeadKind, HeadSpec,
    ParamDecl, ParamKind, Parameters, TapeGraph,
};
use ccnn::ops::{Mode, Padding};
use ccnn::{GradientTape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;
/// Below this, both derivatives are indistinguishable from rounding noise.
const ABS_FLOOR: f64 = 1e-9;
pub const INSTANCES: u64 = 20;
/// Coordinates probed per tensor.
const PROBES: usize = 12;

type Build = dyn Fn(&mut TapeGraph<'_, f64>, Var) -> ccnn::Result<Var>;
/// Pre-activation values of every ReLU inside a composite build.
type Kinks = dyn Fn(&mut TapeGraph<'_, f64>, Var) -> ccnn::Result<Vec<Var>>;

struct Case {
    x: Tensor<f64>,
    params: Parameters<f64>,
    kinks: Option<Box<Kinks>>,
}

impl Case {
    fn plain(x: Tensor<f64>, params: Parameters<f64>) -> Self {
        Self { x, params, kinks: None }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[0.05, 1)`, random sign.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn random_params(rng: &mut ChaCha8Rng, decls: &[ParamDecl]) -> Parameters<f64> {
    let mut p = Parameters::new();
    for d in decls {
        let value = match d.kind {
            ParamKind::BnVar => uniform(rng, &d.shape, 0.5, 1.5),
            ParamKind::BnGamma => uniform(rng, &d.shape, 0.5, 1.5),
            // Batch norm makes its input conv scale-invariant, so curvature
            // grows like 1/|w|^2; keep weights away from zero.
            ParamKind::ConvWeight => off_kink(rng, &d.shape).map(|v| v * 0.5 + 0.3 * v.signum()),
            _ => uniform(rng, &d.shape, -0.5, 0.5),
        };
        p.insert(d.name.clone(), d.kind, value);
    }
    p
}

/// Reduces `out` to a scalar through a fixed random projection.
fn project(tape: &mut GradientTape<f64>, out: Var, proj: &Tensor<f64>) -> Var {
    let n = tape.value(out).len();
    let flat = tape.reshape(out, &[1, n]).unwrap();
    let w = tape.constant(proj.clone().reshape(&[n, 1]).unwrap());
    let b = tape.constant(Tensor::zeros(&[1]));
    tape.linear(flat, w, b).unwrap()
}

fn output_len(case: &Case, build: &Build) -> usize {
    let mut tape = GradientTape::new();
    let all = |_: &str| true;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = TapeGraph::new(&mut tape, &case.params, &all, &mut rng);
    let x = g.tape.variable(case.x.clone());
    let out = build(&mut g, x).unwrap();
    tape.value(out).len()
}

fn loss(x: &Tensor<f64>, params: &Parameters<f64>, build: &Build, proj: &Tensor<f64>) -> f64 {
    let mut tape = GradientTape::new();
    let all = |_: &str| true;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = TapeGraph::new(&mut tape, params, &all, &mut rng);
    let xv = g.tape.variable(x.clone());
    let out = build(&mut g, xv).unwrap();
    let root = project(&mut tape, out, proj);
    tape.value(root).data()[0]
}

/// ReLU on/off pattern; a probe whose two sides disagree straddles a kink
/// and has no meaningful central difference.
fn pattern(x: &Tensor<f64>, params: &Parameters<f64>, kinks: &Kinks) -> Vec<bool> {
    let mut tape = GradientTape::new();
    let all = |_: &str| true;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = TapeGraph::new(&mut tape, params, &all, &mut rng);
    let xv = g.tape.variable(x.clone());
    let vars = kinks(&mut g, xv).unwrap();
    vars.iter().flat_map(|&v| tape.value(v).data().iter().map(|&a| a > 0.0).collect::<Vec<_>>()).collect()
}

fn straddles(case: &Case, a: (&Tensor<f64>, &Parameters<f64>), b: (&Tensor<f64>, &Parameters<f64>)) -> bool {
    case.kinks.as_ref().is_some_and(|k| pattern(a.0, a.1, k) != pattern(b.0, b.1, k))
}

fn agree(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= ABS_FLOOR || diff <= REL_TOL * analytic.abs().max(numeric.abs())
}

fn probe_indices(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    if len <= PROBES {
        (0..len).collect()
    } else {
        (0..PROBES).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// Compares tape gradients with central differences for the input and every
/// parameter the build touches. Returns `(probes, skipped at kinks)`.
fn check(label: &str, case: &Case, build: &Build, seed: u64) -> (usize, usize) {
    let (mut probes, mut skipped) = (0, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n_out = output_len(case, build);
    let proj = uniform(&mut rng, &[n_out], -1.0, 1.0);

    let mut tape = GradientTape::new();
    let all = |_: &str| true;
    let mut drng = ChaCha8Rng::seed_from_u64(0);
    let mut g = TapeGraph::new(&mut tape, &case.params, &all, &mut drng);
    let xv = g.tape.variable(case.x.clone());
    let out = build(&mut g, xv).unwrap();
    let bound = g.bound().clone();
    let root = project(&mut tape, out, &proj);
    let grads = tape.backward(root).unwrap();

    let gx = grads.get(xv).expect("input gradient");
    for i in probe_indices(&mut rng, case.x.len()) {
        let (mut up, mut down) = (case.x.clone(), case.x.clone());
        up.data_mut()[i] += STEP;
        down.data_mut()[i] -= STEP;
        probes += 1;
        if straddles(case, (&up, &case.params), (&down, &case.params)) {
            skipped += 1;
            continue;
        }
        let numeric = (loss(&up, &case.params, build, &proj) - loss(&down, &case.params, build, &proj)) / (2.0 * STEP);
        let analytic = gx.data()[i];
        assert!(agree(analytic, numeric), "{label} seed {seed}: d/dx[{i}] analytic {analytic} numeric {numeric}");
    }

    let mut names: Vec<_> = bound.keys().cloned().collect();
    names.sort();
    for name in names {
        if !case.params.kind(&name).unwrap().is_trainable() {
            continue;
        }
        let g = grads.get(bound[&name]).unwrap_or_else(|| panic!("{label}: no gradient for {name}"));
        for i in probe_indices(&mut rng, g.len()) {
            let (mut up, mut down) = (case.params.clone(), case.params.clone());
            up.get_mut(&name).unwrap().data_mut()[i] += STEP;
            down.get_mut(&name).unwrap().data_mut()[i] -= STEP;
            probes += 1;
            if straddles(case, (&case.x, &up), (&case.x, &down)) {
                skipped += 1;
                continue;
            }
            let numeric = (loss(&case.x, &up, build, &proj) - loss(&case.x, &down, build, &proj)) / (2.0 * STEP);
            let analytic = g.data()[i];
            assert!(agree(analytic, numeric), "{label} seed {seed}: d/d{name}[{i}] analytic {analytic} numeric {numeric}");
        }
    }
    (probes, skipped)
}

fn run(label: &str, make: impl Fn(&mut ChaCha8Rng) -> (Case, Box<Build>)) {
    let (mut probes, mut skipped) = (0, 0);
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (case, build) = make(&mut rng);
        let (p, s) = check(label, &case, &build, seed);
        probes += p;
        skipped += s;
    }
    assert!(skipped * 20 <= probes, "{label}: {skipped} of {probes} probes straddled a ReLU kink");
}

pub fn conv2d() {
    run("conv2d", |rng| {
        let (b, c, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..3);
        let padding = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
        let size = rng.gen_range(k..k + 4);
        let x = uniform(rng, &[b, c, size, size], -1.0, 1.0);
        let mut params = Parameters::new();
        params.insert("w", ParamKind::ConvWeight, uniform(rng, &[o, c, k, k], -1.0, 1.0));
        let build: Box<Build> = Box::new(move |g, x| {
            let w = g.param("w")?;
            g.conv2d(&x, &w, stride, padding)
        });
        (Case::plain(x, params), build)
    });
}

pub fn maxpool() {
    run("maxpool", |rng| {
        let (b, c) = (rng.gen_range(1..3), rng.gen_range(1..3));
        let (h, w) = (2 * rng.gen_range(1..4), 2 * rng.gen_range(1..4));
        let n = b * c * h * w;
        // Distinct values spaced well beyond the step: no ties inside a window.
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let x = Tensor::new(&[b, c, h, w], order.iter().map(|&v| v as f64 * 0.01 - 0.3).collect()).unwrap();
        let build: Box<Build> = Box::new(|g, x| g.maxpool(&x));
        (Case::plain(x, Parameters::new()), build)
    });
}

fn bn_params(rng: &mut ChaCha8Rng, c: usize) -> Parameters<f64> {
    let mut decls = Vec::new();
    declare_conv(&mut decls, "p", 1, c, 1);
    decls.retain(|d| d.kind.is_batchnorm());
    random_params(rng, &decls)
}

pub fn batchnorm_train() {
    run("batchnorm_train", |rng| {
        let (b, c) = (rng.gen_range(2..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(1..4), rng.gen_range(2..4));
        let x = uniform(rng, &[b, c, h, w], -2.0, 2.0);
        let params = bn_params(rng, c);
        let build: Box<Build> = Box::new(|g, x| g.batchnorm(&x, "p", Mode::Train));
        (Case::plain(x, params), build)
    });
}

pub fn batchnorm_infer() {
    run("batchnorm_infer", |rng| {
        let (b, c) = (rng.gen_range(1..3), rng.gen_range(1..4));
        let x = uniform(rng, &[b, c, 3, 3], -2.0, 2.0);
        let params = bn_params(rng, c);
        let build: Box<Build> = Box::new(|g, x| g.batchnorm(&x, "p", Mode::Infer));
        (Case::plain(x, params), build)
    });
}

pub fn relu() {
    run("relu", |rng| {
        let shape = [rng.gen_range(1..3), rng.gen_range(1..4), 3, 3];
        // Away from zero, so no probe crosses the kink.
        let x = off_kink(rng, &shape);
        let build: Box<Build> = Box::new(|g, x| g.relu(&x));
        (Case::plain(x, Parameters::new()), build)
    });
}

pub fn softmax_cross_entropy() {
    run("softmax_xent", |rng| {
        let (b, k) = (rng.gen_range(1..5), rng.gen_range(2..7));
        let x = uniform(rng, &[b, k], -3.0, 3.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let build: Box<Build> = Box::new(move |g, x| g.tape.softmax_xent(x, &labels));
        (Case::plain(x, Parameters::new()), build)
    });
}

pub fn dropout_fixed_mask() {
    run("dropout", |rng| {
        let rate: f64 = rng.gen_range(0.1..0.7);
        let shape = [rng.gen_range(1..3), rng.gen_range(2..9)];
        let n = shape[0] * shape[1];
        let x = uniform(rng, &shape, -1.0, 1.0);
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen_bool(rate) { 0.0 } else { 1.0 / (1.0 - rate) }).collect();
        let build: Box<Build> = Box::new(move |g, x| g.tape.dropout_with_mask(x, mask.clone()));
        (Case::plain(x, Parameters::new()), build)
    });
}

pub fn gwap() {
    run("gwap", |rng| {
        let (b, c, h, w) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5));
        let x = uniform(rng, &[b, c, h, w], -1.0, 1.0);
        let mut params = Parameters::new();
        params.insert("w", ParamKind::GwapWeight, uniform(rng, &[c, h, w], -1.0, 1.0));
        let build: Box<Build> = Box::new(|g, x| {
            let w = g.param("w")?;
            g.gwap(&x, &w)
        });
        (Case::plain(x, params), build)
    });
}

pub fn gap() {
    run("gap", |rng| {
        let shape = [rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5)];
        let x = uniform(rng, &shape, -1.0, 1.0);
        let build: Box<Build> = Box::new(|g, x| g.gap(&x));
        (Case::plain(x, Parameters::new()), build)
    });
}

pub fn linear() {
    run("linear", |rng| {
        let (b, i, o) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6));
        let x = uniform(rng, &[b, i], -1.0, 1.0);
        let mut params = Parameters::new();
        params.insert("w", ParamKind::ClassifierWeight, uniform(rng, &[i, o], -1.0, 1.0));
        params.insert("b", ParamKind::ClassifierBias, uniform(rng, &[o], -1.0, 1.0));
        let build: Box<Build> = Box::new(|g, x| {
            let (w, b) = (g.param("w")?, g.param("b")?);
            g.linear(&x, &w, &b)
        });
        (Case::plain(x, params), build)
    });
}

pub fn concat() {
    run("concat", |rng| {
        let (ca, cb) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let x = uniform(rng, &[2, ca, 3, 2], -1.0, 1.0);
        let mut params = Parameters::new();
        params.insert("other", ParamKind::ConvWeight, uniform(rng, &[2, cb, 3, 2], -1.0, 1.0));
        let build: Box<Build> = Box::new(|g, x| {
            let other = g.param("other")?;
            g.concat(&x, &other)
        });
        (Case::plain(x, params), build)
    });
}

pub fn fire_module() {
    run("fire", |rng| {
        let cin = rng.gen_range(2..6);
        let cout = 8 * rng.gen_range(1..3);
        let spec = FireSpec::standard(cin, cout).unwrap();
        let mut decls = Vec::new();
        declare_fire(&mut decls, "fire", &spec);
        let params = random_params(rng, &decls);
        let size = rng.gen_range(3..6);
        let x = uniform(rng, &[2, cin, size, size], -1.0, 1.0);
        let build: Box<Build> = Box::new(|g, x| fire_forward(g, &x, "fire", Mode::Train));
        let kinks: Box<Kinks> = Box::new(|g, x| {
            let pre = |g: &mut TapeGraph<'_, f64>, x: Var, p: &str| -> ccnn::Result<Var> {
                let w = g.param(&format!("fire/{p}/w"))?;
                let y = g.conv2d(&x, &w, 1, Padding::Same)?;
                g.batchnorm(&y, &format!("fire/{p}"), Mode::Train)
            };
            let s = pre(g, x, "squeeze")?;
            let sr = g.relu(&s)?;
            Ok(vec![s, pre(g, sr, "expand1x1")?, pre(g, sr, "expand3x3")?])
        });
        (Case { x, params, kinks: Some(kinks) }, build)
    });
}

fn head_case(rng: &mut ChaCha8Rng, kind: HeadKind) -> (Case, Box<Build>) {
    let (c, h, w) = (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..4));
    let head = HeadSpec { kind, num_classes: rng.gen_range(2..6), dropout: 0.0 };
    let mut decls = Vec::new();
    declare_head(&mut decls, "head", &head, [c, h, w]);
    let params = random_params(rng, &decls);
    let x = uniform(rng, &[2, c, h, w], -1.0, 1.0);
    let kinks: Option<Box<Kinks>> = matches!(kind, HeadKind::Fc { .. }).then(|| -> Box<Kinks> {
        Box::new(|g, x| {
            let flat = g.flatten(&x)?;
            let (w, b) = (g.param("head/fc/w")?, g.param("head/fc/b")?);
            Ok(vec![g.linear(&flat, &w, &b)?])
        })
    });
    let build: Box<Build> = Box::new(move |g, x| head_forward(g, &x, "head", &head, Mode::Train, 0.0));
    (Case { x, params, kinks }, build)
}

pub fn wap_head() {
    run("wap_head", |rng| head_case(rng, HeadKind::Wap));
}

pub fn gap_head() {
    run("gap_head", |rng| head_case(rng, HeadKind::Gap));
}

pub fn fc_head() {
    run("fc_head", |rng| head_case(rng, HeadKind::Fc { hidden: 6 }));
}

pub fn softmax_xent_over_head() {
    run("head+xent", |rng| {
        let (case, head) = head_case(rng, HeadKind::Wap);
        let labels = vec![0, 1];
        let build: Box<Build> = Box::new(move |g, x| {
            let logits = head(g, x)?;
            g.tape.softmax_xent(logits, &labels)
        });
        (case, build)
    });
}


/// Every check, by name.
pub const ALL: &[(&str, fn())] = &[
    ("conv2d", conv2d),
    ("maxpool", maxpool),
    ("batchnorm_train", batchnorm_train),
    ("batchnorm_infer", batchnorm_infer),
    ("relu", relu),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("dropout_fixed_mask", dropout_fixed_mask),
    ("gwap", gwap),
    ("gap", gap),
    ("linear", linear),
    ("concat", concat),
    ("fire_module", fire_module),
    ("wap_head", wap_head),
    ("gap_head", gap_head),
    ("fc_head", fc_head),
    ("softmax_xent_over_head", softmax_xent_over_head),
];
