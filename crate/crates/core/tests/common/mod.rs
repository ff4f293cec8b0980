//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use localnorm::model::{Block, Model, ModelConfig, Routing, Stats};
use localnorm::norm::{NormSpec, PartitionKind};
use localnorm::tensor::Tape;
use localnorm::{Rng, Tensor};

/// Element coordinates of flat NHWC index `i`.
pub fn coords(shape: [usize; 4], i: usize) -> [usize; 4] {
    let [_, h, w, c] = shape;
    [i / (h * w * c), (i / (w * c)) % h, (i / c) % w, i % c]
}

/// Group-membership predicate written directly from the variant definitions.
pub fn same_group(kind: PartitionKind, shape: [usize; 4], a: usize, b: usize) -> bool {
    let [n, _, _, c] = shape;
    let [na, _, _, ca] = coords(shape, a);
    let [nb, _, _, cb] = coords(shape, b);
    match kind {
        PartitionKind::Batch => ca == cb,
        PartitionKind::Layer => na == nb,
        PartitionKind::Group(k) => na == nb && ca / (c / k) == cb / (c / k),
        PartitionKind::Instance => na == nb && ca == cb,
        PartitionKind::Local(k) => ca == cb && na / (n / k) == nb / (n / k),
    }
}

/// Members of every group, found by scanning with [`same_group`].
pub fn oracle_groups(kind: PartitionKind, shape: [usize; 4]) -> Vec<Vec<usize>> {
    let m: usize = shape.iter().product();
    let mut owner = vec![usize::MAX; m];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..m {
        if owner[i] != usize::MAX {
            continue;
        }
        let g = groups.len();
        let members: Vec<usize> = (i..m).filter(|&j| owner[j] == usize::MAX && same_group(kind, shape, i, j)).collect();
        for &j in &members {
            owner[j] = g;
        }
        groups.push(members);
    }
    groups
}

/// Two-pass biased `(mean, var)` of the listed elements.
pub fn mean_var(x: &[f64], idx: &[usize]) -> (f64, f64) {
    let m = idx.len() as f64;
    let mean = idx.iter().map(|&i| x[i]).sum::<f64>() / m;
    let var = idx.iter().map(|&i| (x[i] - mean).powi(2)).sum::<f64>() / m;
    (mean, var)
}

/// Per-element `(mean, var)` of the element's group.
pub fn element_stats(x: &[f64], kind: PartitionKind, shape: [usize; 4]) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); x.len()];
    for g in oracle_groups(kind, shape) {
        let s = mean_var(x, &g);
        for i in g {
            out[i] = s;
        }
    }
    out
}

/// Scalar-loop normalization. `gamma`/`beta` are `[P, C]` row-major; sample `n`
/// uses row `set_of(n)`.
pub fn reference_normalize(
    x: &[f64],
    shape: [usize; 4],
    kind: PartitionKind,
    gamma: &[f64],
    beta: &[f64],
    set_of: impl Fn(usize) -> usize,
    eps: f64,
) -> Vec<f64> {
    let c = shape[3];
    let stats = element_stats(x, kind, shape);
    (0..x.len())
        .map(|i| {
            let [n, _, _, ci] = coords(shape, i);
            let p = set_of(n) * c + ci;
            let (mu, var) = stats[i];
            gamma[p] * (x[i] - mu) / (var + eps).sqrt() + beta[p]
        })
        .collect()
}

/// Scalar-loop SwitchNorm with explicit simplex weights over
/// (batch, layer, instance) statistics.
pub fn reference_switch(
    x: &[f64],
    shape: [usize; 4],
    wm: [f64; 3],
    wv: [f64; 3],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let parts: Vec<Vec<(f64, f64)>> = [PartitionKind::Batch, PartitionKind::Layer, PartitionKind::Instance]
        .iter()
        .map(|&k| element_stats(x, k, shape))
        .collect();
    (0..x.len())
        .map(|i| {
            let ci = i % shape[3];
            let mu: f64 = (0..3).map(|k| wm[k] * parts[k][i].0).sum();
            let var: f64 = (0..3).map(|k| wv[k] * parts[k][i].1).sum();
            gamma[ci] * (x[i] - mu) / (var + eps).sqrt() + beta[ci]
        })
        .collect()
}

/// Random NHWC shape with every extent in `1..=max`, N a multiple of `n_mult`
/// and C a multiple of `c_mult`.
pub fn random_shape(rng: &mut Rng, max: [usize; 4], n_mult: usize, c_mult: usize) -> [usize; 4] {
    let pick = |rng: &mut Rng, hi: usize, mult: usize| {
        let steps = (hi / mult).max(1);
        (rng.below(steps) + 1) * mult
    };
    [pick(rng, max[0], n_mult), pick(rng, max[1], 1), pick(rng, max[2], 1), pick(rng, max[3], c_mult)]
}

pub fn to_f64(t: &Tensor<f64>) -> Vec<f64> {
    t.data().to_vec()
}

/// Relative error used by the gradient checks.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central difference of `f` at coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Location of the MNIST IDX files used by the data-dependent tests.
pub fn mnist_dir() -> std::path::PathBuf {
    std::env::var_os("LOCALNORM_MNIST_DIR")
        .map(Into::into)
        .unwrap_or_else(|| std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

/// Hand-assembled IDX image file: magic 0x00000803, big-endian dims, pixel
/// `(i * 7 + 3) % 256` at flat index `i`.
pub fn idx_images_fixture(n: usize, h: usize, w: usize) -> Vec<u8> {
    let mut b = vec![0, 0, 0x08, 3];
    for d in [n, h, w] {
        b.extend_from_slice(&(d as u32).to_be_bytes());
    }
    b.extend((0..n * h * w).map(|i| ((i * 7 + 3) % 256) as u8));
    b
}

/// Hand-assembled IDX label file: magic 0x00000801, labels `i % 10`.
pub fn idx_labels_fixture(n: usize) -> Vec<u8> {
    let mut b = vec![0, 0, 0x08, 1];
    b.extend_from_slice(&(n as u32).to_be_bytes());
    b.extend((0..n).map(|i| (i % 10) as u8));
    b
}

/// Hand-assembled CIFAR-10 binary batch: per record a label byte, then the red,
/// green and blue 32x32 planes. Plane `c` of record `r` holds `(r + c * 50 + p) % 256`.
pub fn cifar_fixture(records: usize) -> Vec<u8> {
    let mut b = Vec::new();
    for r in 0..records {
        b.push((r % 10) as u8);
        for c in 0..3 {
            b.extend((0..1024).map(|p| ((r + c * 50 + p) % 256) as u8));
        }
    }
    b
}

/// Two convolutions and a dense layer, each followed by LocalNorm (K = 2).
pub fn grad_check_model(rng: &mut Rng) -> Model<f64> {
    let cfg = ModelConfig {
        input: [6, 6, 1],
        classes: 3,
        blocks: vec![Block::Conv { filters: 3, kernel: 3 }, Block::Conv { filters: 3, kernel: 3 }, Block::Dense { units: 5 }],
        norm: NormSpec::local(2),
    };
    let mut m = Model::<f64>::new(cfg, rng).unwrap();
    // Break the symmetric init so every parameter has a generic gradient.
    for p in m.params_mut() {
        let noise = Tensor::<f64>::uniform(p.shape(), -0.3, 0.3, rng);
        *p = p.add(&noise).unwrap();
    }
    m
}

fn model_loss(m: &Model<f64>, x: &Tensor<f64>, labels: &[usize], routing: &Routing) -> f64 {
    let mut tape = Tape::no_grad();
    let xv = tape.input(x.clone()).unwrap();
    let f = m.forward(&mut tape, xv, &Stats::Dynamic(routing.clone())).unwrap();
    let l = tape.softmax_cross_entropy(f.logits, labels).unwrap();
    tape.value(l).unwrap().item().unwrap()
}

pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub at: String,
    /// Biases feeding a norm have analytic and numeric gradients near zero.
    pub bias_ok: bool,
}

/// Analytic parameter gradients of [`grad_check_model`] against central
/// differences with step `h`.
pub fn model_grad_check(seed: u64, h: f64) -> GradReport {
    let mut rng = Rng::new(seed);
    let mut m = grad_check_model(&mut rng);
    // Three samples per group: with two, a normalized dense unit is always +-1.
    let x = Tensor::<f64>::uniform(&[6, 6, 6, 1], 0.0, 1.0, &mut rng);
    let labels = [0, 2, 1, 2, 1, 0];
    let routing = Routing::blocks(6, 2, 2).unwrap();
    let mut tape = Tape::new();
    let xv = tape.input(x.clone()).unwrap();
    let f = m.forward(&mut tape, xv, &Stats::Dynamic(routing.clone())).unwrap();
    let l = tape.softmax_cross_entropy(f.logits, &labels).unwrap();
    let grads = tape.backward(l).unwrap();
    let analytic: Vec<Tensor<f64>> = f.params.iter().map(|v| grads.get(*v).unwrap().clone()).collect();

    let mut r = GradReport { checked: 0, worst: 0.0, at: String::new(), bias_ok: true };
    for (pi, name) in m.param_names().to_vec().iter().enumerate() {
        let n = m.params()[pi].numel();
        // Every coordinate of small tensors, a strided sample of large ones.
        let step = (n / 12).max(1);
        for i in (0..n).step_by(step) {
            let mut data = m.params()[pi].data().to_vec();
            let num = central_diff(&mut data, i, h, |d| {
                m.params_mut()[pi].data_mut().copy_from_slice(d);
                model_loss(&m, &x, &labels, &routing)
            });
            m.params_mut()[pi].data_mut().copy_from_slice(&data);
            let a = analytic[pi].data()[i];
            // Biases feeding a normalization have an identically zero gradient;
            // the relative error is meaningless there, so check the magnitude.
            if (name.starts_with("conv") || name.starts_with("dense")) && name.ends_with(".b") {
                r.bias_ok &= a.abs() < 1e-12 && num.abs() < 1e-8;
                continue;
            }
            let e = rel_err(a, num);
            if e > r.worst {
                r.worst = e;
                r.at = format!("{name}[{i}] analytic {a:e} numeric {num:e}");
            }
            r.checked += 1;
        }
    }
    r
}
