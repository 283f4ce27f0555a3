//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. Optional arguments name the criteria
//! to run.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use brainseg_core::checkpoint::encode;
use brainseg_core::io::parse_nifti;
use brainseg_core::layers::{
    conv_block_backward, conv_block_forward, cross_entropy_logit_grad, cross_entropy_loss, dense_backward,
    dense_forward, dropout_backward, dropout_forward, init_params, relu, relu_backward, softmax, DropoutState,
    LayerParams, LayerShape,
};
use brainseg_core::phantom::{default_phantom, DEFAULT_EXTENTS, DEFAULT_NOISE_SIGMA, DEFAULT_SPACING};
use brainseg_core::training::draw_epoch;
use brainseg_core::{
    balanced_sample, conv2d_valid, default_config, dice, evaluate, generate_context_phantom, maxpool_2x2,
    mean_surface_distance, read_volume, scale_intensities, segment, shape_chain, train, write_volume, BranchSpec,
    BrainMask, DataType, Error, Geometry, LabelVolume, LabeledImage, Mode, Model, NetworkConfig, Plane, Tensor,
    TrainingConfig, Volume,
};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// Gradient check

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared on an absolute scale.
const GRAD_FLOOR: f64 = 1e-7;
const GRAD_SEEDS: u64 = 10;

#[derive(Default)]
struct GradStats {
    max_rel: f64,
    checked: usize,
    skipped: usize,
    worst: String,
}

impl GradStats {
    fn record(&mut self, analytic: f64, numeric: f64, what: &dyn Fn() -> String) {
        let scale = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        let rel = (analytic - numeric).abs() / scale;
        self.checked += 1;
        if rel > self.max_rel {
            self.max_rel = rel;
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", what());
        }
    }

    fn merge(&mut self, other: GradStats) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut StdRng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn random_params(shape: LayerShape, rng: &mut StdRng) -> LayerParams<f64> {
    let mut p: LayerParams<f64> = init_params(shape, rng);
    for b in p.biases.data_mut() {
        *b = rng.random_range(-0.1..0.1);
    }
    p
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central differences of `f` along every element of `x`. `f` returns the
/// loss and a signature of its piecewise-linear region; probes whose
/// signature differs from the unperturbed one straddle a kink and are
/// skipped.
fn probe_all(
    stats: &mut GradStats,
    x: &mut Tensor<f64>,
    analytic: &Tensor<f64>,
    label: &str,
    f: &mut dyn FnMut(&Tensor<f64>) -> (f64, u64),
) {
    let (_, sig0) = f(x);
    for j in 0..x.len() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + H;
        let (lp, sp) = f(x);
        x.data_mut()[j] = orig - H;
        let (lm, sm) = f(x);
        x.data_mut()[j] = orig;
        if sp != sig0 || sm != sig0 {
            stats.skipped += 1;
            continue;
        }
        stats.record(analytic.data()[j], (lp - lm) / (2.0 * H), &|| format!("{label}[{j}]"));
    }
}

fn hash_bits(bits: impl Iterator<Item = u64>) -> u64 {
    use std::hash::{DefaultHasher, Hasher};
    let mut h = DefaultHasher::new();
    bits.for_each(|b| h.write_u64(b));
    h.finish()
}

fn check_dense(seed: u64) -> GradStats {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut stats = GradStats::default();
    let x = random_tensor(&[3, 7], 1.0, &mut rng);
    let mut params = random_params(LayerShape::Dense { f_in: 7, f_out: 5 }, &mut rng);
    let r = random_tensor(&[3, 5], 1.0, &mut rng);
    let gx = dense_backward(&x, &mut params, &r).unwrap();
    let (gw, gb) = (params.weight_grad.clone(), params.bias_grad.clone());
    let p = params.clone();
    probe_all(&mut stats, &mut x.clone(), &gx, "dense input", &mut |x| {
        (dot(&dense_forward(x, &p).unwrap(), &r), 0)
    });
    let mut w = params.weights.clone();
    probe_all(&mut stats, &mut w, &gw, "dense weights", &mut |w| {
        let q = LayerParams::new(w.clone(), p.biases.clone());
        (dot(&dense_forward(&x, &q).unwrap(), &r), 0)
    });
    let mut b = params.biases.clone();
    probe_all(&mut stats, &mut b, &gb, "dense biases", &mut |b| {
        let q = LayerParams::new(p.weights.clone(), b.clone());
        (dot(&dense_forward(&x, &q).unwrap(), &r), 0)
    });
    stats
}

/// Conv, ReLU and optional pooling on an odd extent, so the mirrored
/// pooling border is exercised.
fn check_conv_block(seed: u64, pool: bool) -> GradStats {
    let mut rng = StdRng::seed_from_u64(seed ^ 0xc0);
    let mut stats = GradStats::default();
    let x = random_tensor(&[2, 9, 9], 1.0, &mut rng);
    let params = random_params(LayerShape::Conv { c_in: 2, c_out: 3, k: 3 }, &mut rng);
    let out_extent = if pool { 4 } else { 7 };
    let r = random_tensor(&[3, out_extent, out_extent], 1.0, &mut rng);
    let eval = |x: &Tensor<f64>, p: &LayerParams<f64>| {
        let (out, _) = conv_block_forward(x, p, pool).unwrap();
        let act = relu(&conv2d_valid(x, &p.weights, &p.biases).unwrap());
        let mut bits: Vec<u64> = act.data().iter().map(|&v| (v > 0.0) as u64).collect();
        if pool {
            bits.extend(maxpool_2x2(&act).unwrap().1.iter().map(|&i| i as u64));
        }
        (dot(&out, &r), hash_bits(bits.into_iter()))
    };
    let mut analytic = params.clone();
    let (_, cache) = conv_block_forward(&x, &analytic, pool).unwrap();
    let gx = conv_block_backward(&cache, &mut analytic, &r, true).unwrap().unwrap();
    let label = if pool { "conv+pool" } else { "conv" };
    probe_all(&mut stats, &mut x.clone(), &gx, &format!("{label} input"), &mut |x| eval(x, &params));
    probe_all(&mut stats, &mut params.weights.clone(), &analytic.weight_grad, &format!("{label} weights"), &mut |w| {
        eval(&x, &LayerParams::new(w.clone(), params.biases.clone()))
    });
    probe_all(&mut stats, &mut params.biases.clone(), &analytic.bias_grad, &format!("{label} biases"), &mut |b| {
        eval(&x, &LayerParams::new(params.weights.clone(), b.clone()))
    });
    stats
}

fn check_pointwise(seed: u64) -> GradStats {
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5f);
    let mut stats = GradStats::default();

    // ReLU.
    let x = random_tensor(&[4, 6], 1.0, &mut rng);
    let r = random_tensor(&[4, 6], 1.0, &mut rng);
    let g = relu_backward(&relu(&x), &r).unwrap();
    probe_all(&mut stats, &mut x.clone(), &g, "relu", &mut |x| {
        (dot(&relu(x), &r), hash_bits(x.data().iter().map(|&v| (v > 0.0) as u64)))
    });

    // Dropout with a fixed mask.
    let mut state = DropoutState::new(0.5, Mode::Training).unwrap();
    let mask_seed = rng.random::<u64>();
    dropout_forward(&x, &mut state, &mut StdRng::seed_from_u64(mask_seed));
    let g = dropout_backward(&r, &state).unwrap();
    probe_all(&mut stats, &mut x.clone(), &g, "dropout", &mut |x| {
        let mut s = DropoutState::new(0.5, Mode::Training).unwrap();
        (dot(&dropout_forward(x, &mut s, &mut StdRng::seed_from_u64(mask_seed)), &r), 0)
    });

    // Softmax with mean cross-entropy.
    let logits = random_tensor(&[3, 4], 3.0, &mut rng);
    let targets: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    let g = cross_entropy_logit_grad(&softmax(&logits).unwrap(), &targets, 1.0 / 3.0).unwrap();
    probe_all(&mut stats, &mut logits.clone(), &g, "softmax+xent", &mut |z| {
        (cross_entropy_loss(&softmax(z).unwrap(), &targets).unwrap(), 0)
    });
    stats
}

fn reduced_config(seed: u64) -> NetworkConfig {
    let counts = [4, 6, 8];
    let branch = |patch, kernels: [usize; 3], pools: [bool; 3]| BranchSpec::new(patch, &kernels, &counts, &pools, 5).unwrap();
    NetworkConfig {
        branches: vec![
            branch(9, [3, 2, 2], [true, false, false]),
            branch(13, [3, 3, 2], [true, false, false]),
            branch(17, [5, 3, 3], [true, true, false]),
        ],
        num_classes: 3,
        dropout_keep: 0.5,
        seed,
        input_offset: 511.5,
        input_scale: 1.0 / 511.5,
        plane: Plane::Axial,
    }
}

/// The full three-branch network with dropout active, against its mean
/// cross-entropy: every parameter and every input element.
fn check_network(seed: u64) -> GradStats {
    let mut rng = StdRng::seed_from_u64(seed ^ 0x4e);
    let mut stats = GradStats::default();
    let mut model = Model::<f64>::new(reduced_config(seed)).unwrap();
    for l in model.layers_mut() {
        for b in l.biases.data_mut() {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    let batch = 3;
    let inputs: Vec<Vec<Tensor<f64>>> = (0..batch)
        .map(|_| [9, 13, 17].iter().map(|&s| random_tensor(&[1, s, s], 1.0, &mut rng)).collect())
        .collect();
    let targets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..3)).collect();
    let dropout_seed = rng.random::<u64>();
    let eval = |m: &Model<f64>, inputs: &[Vec<Tensor<f64>>]| {
        let pass = m
            .forward_inputs(inputs, Mode::Training, &mut StdRng::seed_from_u64(dropout_seed))
            .unwrap();
        (Model::loss(&pass, &targets).unwrap(), pass.activation_signature())
    };

    let mut grads = model.clone();
    grads.zero_grad();
    let pass = grads
        .forward_inputs(&inputs, Mode::Training, &mut StdRng::seed_from_u64(dropout_seed))
        .unwrap();
    let input_grads = grads.backward(&pass, &targets, 1.0 / batch as f64, true).unwrap().unwrap();
    let analytic: Vec<(Tensor<f64>, Tensor<f64>)> = grads
        .layers()
        .iter()
        .map(|l| (l.weight_grad.clone(), l.bias_grad.clone()))
        .collect();

    let nlayers = analytic.len();
    for li in 0..nlayers {
        for which in 0..2 {
            let mut t = {
                let l = &model.layers()[li];
                if which == 0 { l.weights.clone() } else { l.biases.clone() }
            };
            let target = if which == 0 { &analytic[li].0 } else { &analytic[li].1 };
            let label = format!("network layer {li} {}", if which == 0 { "weights" } else { "biases" });
            let base = model.clone();
            probe_all(&mut stats, &mut t, target, &label, &mut |t| {
                let mut m = base.clone();
                let l = &mut m.layers_mut()[li];
                if which == 0 {
                    l.weights = t.clone();
                } else {
                    l.biases = t.clone();
                }
                eval(&m, &inputs)
            });
        }
    }
    for s in 0..batch {
        for b in 0..3 {
            let mut t = inputs[s][b].clone();
            probe_all(&mut stats, &mut t, &input_grads[s][b], &format!("network input {s}/{b}"), &mut |t| {
                let mut probe = inputs.clone();
                probe[s][b] = t.clone();
                eval(&model, &probe)
            });
        }
    }
    stats
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut total = GradStats::default();
    let mut per_type = Vec::new();
    for seed in 0..GRAD_SEEDS {
        let parts = [
            ("dense", check_dense(seed)),
            ("conv", check_conv_block(seed, false)),
            ("conv+pool", check_conv_block(seed, true)),
            ("pointwise", check_pointwise(seed)),
            ("network", check_network(seed)),
        ];
        for (name, s) in parts {
            if seed == 0 {
                per_type.push(name);
            }
            total.merge(s);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = total.max_rel < GRAD_TOL && secs < 120.0 && total.checked > 0;
    outcome(
        pass,
        format!(
            "max rel err {:.2e} (< {GRAD_TOL:e}) over {} coordinates, {} kink probes skipped, {GRAD_SEEDS} seeds, \
             layer types {per_type:?}, {secs:.1} s (< 120 s); worst {}",
            total.max_rel, total.checked, total.skipped, total.worst
        ),
    )
}

// ---------------------------------------------------------------------------
// Shape chains

fn shape_chains() -> Outcome {
    let cfg = default_config(9).unwrap();
    let got: Vec<(usize, usize, Vec<usize>)> = cfg
        .branches
        .iter()
        .map(|b| (b.patch_size, b.final_extent(), shape_chain(b).unwrap()))
        .collect();
    let expected = [
        (25, 3, vec![25, 21, 11, 9, 5, 3]),
        (51, 4, vec![51, 45, 23, 19, 10, 8, 4]),
        (75, 5, vec![75, 67, 34, 28, 14, 10, 5]),
    ];
    let pass = got.len() == 3 && got.iter().zip(&expected).all(|(g, e)| g.0 == e.0 && g.1 == e.1 && g.2 == e.2);
    let finals: Vec<String> = got.iter().map(|(p, e, _)| format!("{p}: {e}×{e}")).collect();
    outcome(pass, format!("final maps {} (expected 3×3, 4×4, 5×5); chains {:?}", finals.join(", "), got))
}

// ---------------------------------------------------------------------------
// Metric oracle

fn brute_boundary(m: &[bool], e: [usize; 3]) -> Vec<bool> {
    let idx = |x: usize, y: usize, z: usize| x + e[0] * (y + e[1] * z);
    let mut out = vec![false; m.len()];
    for z in 0..e[2] {
        for y in 0..e[1] {
            for x in 0..e[0] {
                if !m[idx(x, y, z)] {
                    continue;
                }
                let c = [x as isize, y as isize, z as isize];
                out[idx(x, y, z)] = (0..3).any(|a| {
                    [-1isize, 1].iter().any(|&d| {
                        let mut n = c;
                        n[a] += d;
                        n[a] < 0
                            || n[a] >= e[a] as isize
                            || !m[idx(n[0] as usize, n[1] as usize, n[2] as usize)]
                    })
                });
            }
        }
    }
    out
}

fn brute_msd(a: &[bool], b: &[bool], e: [usize; 3], s: [f32; 3]) -> Option<f64> {
    if !a.contains(&true) || !b.contains(&true) {
        return None;
    }
    let coord = |i: usize| [i % e[0], (i / e[0]) % e[1], i / (e[0] * e[1])];
    let points = |m: &[bool]| -> Vec<[f64; 3]> {
        brute_boundary(m, e)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| {
                let c = coord(i);
                [c[0] as f64 * s[0] as f64, c[1] as f64 * s[1] as f64, c[2] as f64 * s[2] as f64]
            })
            .collect()
    };
    let (pa, pb) = (points(a), points(b));
    let nearest = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let sum: f64 = pa.iter().map(|p| nearest(p, &pb)).sum::<f64>() + pb.iter().map(|p| nearest(p, &pa)).sum::<f64>();
    Some(sum / (pa.len() + pb.len()) as f64)
}

fn brute_dice(a: &[bool], b: &[bool]) -> Option<f64> {
    let na = a.iter().filter(|&&v| v).count();
    let nb = b.iter().filter(|&&v| v).count();
    let both = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    (na + nb > 0).then(|| 2.0 * both as f64 / (na + nb) as f64)
}

fn metric_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(2024);
    let (mut dice_bad, mut msd_worst, mut msd_none_bad, mut cases) = (0, 0f64, 0, 0);
    for pair in 0..200 {
        let e = [rng.random_range(1..=10), rng.random_range(1..=10), rng.random_range(1..=10)];
        let s = [rng.random_range(0.3f32..3.0), rng.random_range(0.3f32..3.0), rng.random_range(0.3f32..3.0)];
        let g = Geometry::new(e, s).unwrap();
        // Three classes with pair-dependent densities, including empty ones.
        let density = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let draw = |rng: &mut StdRng| -> Vec<u8> {
            (0..g.len())
                .map(|_| {
                    let u: f64 = rng.random();
                    if pair % 17 == 0 {
                        0
                    } else if u < density[0] * 0.5 {
                        1
                    } else if u < density[0] * 0.5 + density[1] * 0.5 {
                        2
                    } else {
                        0
                    }
                })
                .collect()
        };
        let (la, lb) = (draw(&mut rng), draw(&mut rng));
        let pa = LabelVolume::new(g, Plane::Axial, 3, la.clone()).unwrap();
        let pb = LabelVolume::new(g, Plane::Axial, 3, lb.clone()).unwrap();
        for class in 1..3u8 {
            let ma: Vec<bool> = la.iter().map(|&l| l == class).collect();
            let mb: Vec<bool> = lb.iter().map(|&l| l == class).collect();
            cases += 1;
            if dice(&pa, &pb, class as usize).unwrap() != brute_dice(&ma, &mb) {
                dice_bad += 1;
            }
            match (mean_surface_distance(&pa, &pb, class as usize).unwrap(), brute_msd(&ma, &mb, e, s)) {
                (Some(x), Some(y)) => msd_worst = msd_worst.max((x - y).abs()),
                (None, None) => {}
                _ => msd_none_bad += 1,
            }
        }
    }
    let pass = dice_bad == 0 && msd_none_bad == 0 && msd_worst <= 1e-9;
    outcome(
        pass,
        format!(
            "200 random pairs ({cases} class comparisons): Dice mismatches {dice_bad} (exact), \
             max MSD deviation {msd_worst:.2e} mm (<= 1e-9), definedness mismatches {msd_none_bad}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Balanced sampler

/// A label map whose masked classes have exactly the requested sizes, the
/// remainder of the mask being background, scattered by a seeded shuffle.
fn sized_labels(extents: [usize; 3], sizes: &[usize], outside: usize, seed: u64) -> (LabelVolume, BrainMask) {
    let g = Geometry::new(extents, [1.0; 3]).unwrap();
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.shuffle(&mut StdRng::seed_from_u64(seed));
    let mut labels = vec![0u8; g.len()];
    let mut mask = vec![true; g.len()];
    let mut it = order.into_iter();
    for i in it.by_ref().take(outside) {
        mask[i] = false;
    }
    for (c, &n) in sizes.iter().enumerate() {
        for i in it.by_ref().take(n) {
            labels[i] = c as u8 + 1;
        }
    }
    (
        LabelVolume::new(g, Plane::Axial, sizes.len() + 1, labels).unwrap(),
        BrainMask::new(g, mask).unwrap(),
    )
}

fn sampler_contract() -> Outcome {
    let mut problems = Vec::new();
    let sizes = [200, 5_000, 400_000];
    let (labels, mask) = sized_labels([200, 200, 12], &sizes, 1_000, 1);
    let mut available = vec![0usize; 4];
    for i in mask.indices() {
        available[labels.labels()[i] as usize] += 1;
    }
    for k in [1, 150, 2_000, 50_000, 500_000] {
        let drawn = balanced_sample(&labels, &mask, k, &mut StdRng::seed_from_u64(k as u64)).unwrap();
        for (c, coords) in drawn.iter().enumerate() {
            let want = k.min(available[c]);
            if coords.len() != want {
                problems.push(format!("K={k} class {c}: {} drawn, expected {want}", coords.len()));
            }
            let mut idx: Vec<usize> = coords.iter().map(|&p| labels.geometry.index(p)).collect();
            if coords.iter().any(|&p| !mask.contains(p) || labels.at(p) as usize != c) {
                problems.push(format!("K={k} class {c}: coordinate outside mask or of another class"));
            }
            idx.sort_unstable();
            idx.dedup();
            if idx.len() != coords.len() {
                problems.push(format!("K={k} class {c}: repeated coordinates"));
            }
        }
    }

    // Per image per epoch through the epoch sampler, with two differently
    // sized images.
    let (l2, m2) = sized_labels([60, 60, 4], &[3_000, 90, 10_000], 400, 2);
    let images: Vec<LabeledImage> = [(labels.clone(), mask.clone()), (l2, m2)]
        .into_iter()
        .map(|(l, m)| {
            let v = Volume::new(l.geometry, Plane::Axial, vec![0.0; l.geometry.len()]).unwrap();
            LabeledImage::new(v, l, m).unwrap()
        })
        .collect();
    let k = 2_000;
    for epoch in 0..3 {
        let samples = draw_epoch(&images, k, 5, epoch).unwrap();
        for (ii, img) in images.iter().enumerate() {
            let mut avail = vec![0usize; 4];
            for i in img.mask.indices() {
                avail[img.labels.labels()[i] as usize] += 1;
            }
            for c in 0..4 {
                let got = samples.iter().filter(|s| s.image == ii && s.label as usize == c).count();
                if got != k.min(avail[c]) {
                    problems.push(format!("epoch {epoch} image {ii} class {c}: {got}, expected {}", k.min(avail[c])));
                }
            }
        }
    }
    let pass = problems.is_empty();
    outcome(
        pass,
        if pass {
            format!("class sizes {sizes:?} (+{} masked background): count = min(K, available) for K in {{1, 150, 2000, 50000, 500000}} and per image per epoch over 3 epochs", available[0])
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------------------
// Shared helpers for the training criteria

fn labeled(p: &brainseg_core::Phantom) -> LabeledImage {
    let v = scale_intensities(&p.volume, &p.mask).unwrap().volume;
    LabeledImage::new(v, p.labels.clone(), p.mask.clone()).unwrap()
}

fn class_dice(pred: &LabelVolume, reference: &LabelVolume) -> Vec<Option<f64>> {
    evaluate(pred, reference).unwrap().classes.iter().map(|c| c.dice).collect()
}

fn fmt_dice(d: &[Option<f64>]) -> String {
    d.iter()
        .map(|v| v.map_or("n/a".into(), |v| format!("{v:.4}")))
        .collect::<Vec<_>>()
        .join(", ")
}

fn mean_dice(d: &[Option<f64>]) -> f64 {
    let v: Vec<f64> = d.iter().flatten().copied().collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// End-to-end phantom benchmark

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let images: Vec<LabeledImage> = (0..3).map(|s| labeled(&default_phantom(4, s).unwrap())).collect();
    let held_out = default_phantom(4, 100).unwrap();
    let mut model = Model::<f32>::new(default_config(4).unwrap()).unwrap();
    let cfg = TrainingConfig {
        samples_per_class: 2_000,
        epochs: 10,
        ..TrainingConfig::default()
    };
    let history = train(&mut model, &images, &cfg, &[]).unwrap();
    let trained = start.elapsed().as_secs_f64();
    let test = labeled(&held_out);
    let seg = segment(&test.volume, &test.mask, &model, 512, 1, false).unwrap();
    let report = evaluate(&seg.labels, &held_out.labels).unwrap();
    let d: Vec<Option<f64>> = report.classes.iter().map(|c| c.dice).collect();
    let msd: Vec<String> = report
        .classes
        .iter()
        .map(|c| c.msd.map_or("n/a".into(), |v| format!("{v:.3}")))
        .collect();
    let pass = d.len() == 3 && d.iter().all(|v| v.is_some_and(|v| v >= 0.90));
    let losses: Vec<String> = history.epochs.iter().map(|e| format!("{:.3}", e.mean_loss)).collect();
    outcome(
        pass,
        format!(
            "held-out Dice per class [{}] (each >= 0.90), MSD mm [{}]; epoch losses [{}]; train {trained:.0} s, total {:.0} s",
            fmt_dice(&d),
            msd.join(", "),
            losses.join(", "),
            start.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// Multi-scale ablation

fn ablation() -> Outcome {
    let start = Instant::now();
    let context = |seed| generate_context_phantom(DEFAULT_EXTENTS, DEFAULT_SPACING, DEFAULT_NOISE_SIGMA, seed).unwrap();
    let images: Vec<LabeledImage> = (0..2).map(|s| labeled(&context(s))).collect();
    let held_out = context(100);
    let test = labeled(&held_out);
    let cfg = TrainingConfig {
        samples_per_class: 1_000,
        epochs: 4,
        ..TrainingConfig::default()
    };
    let full = default_config(4).unwrap();
    let mut results = Vec::new();
    for sizes in [vec![25, 51, 75], vec![25], vec![51], vec![75]] {
        let mut model = Model::<f32>::new(full.with_branches(&sizes).unwrap()).unwrap();
        train(&mut model, &images, &cfg, &[]).unwrap();
        let seg = segment(&test.volume, &test.mask, &model, 512, 1, false).unwrap();
        let d = class_dice(&seg.labels, &held_out.labels);
        results.push((sizes, mean_dice(&d), d));
    }
    let multi = results[0].1;
    let pass = results[1..].iter().all(|r| multi > r.1);
    let lines: Vec<String> = results
        .iter()
        .map(|(s, m, d)| format!("{s:?}: mean {m:.4} [{}]", fmt_dice(d)))
        .collect();
    outcome(
        pass,
        format!(
            "context phantom, mean Dice {} (3-branch must strictly exceed each single branch); {:.0} s",
            lines.join("; "),
            start.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// Determinism and probability conservation

fn small_config(seed: u64) -> NetworkConfig {
    NetworkConfig {
        branches: vec![
            BranchSpec::new(13, &[3, 3], &[4, 6], &[true, false], 8).unwrap(),
            BranchSpec::new(25, &[5, 3, 3], &[4, 6, 8], &[true, true, false], 8).unwrap(),
        ],
        seed,
        ..default_config(4).unwrap()
    }
}

fn small_run(images: &[LabeledImage], threads: usize) -> Model<f32> {
    let mut model = Model::<f32>::new(small_config(3)).unwrap();
    let cfg = TrainingConfig {
        samples_per_class: 150,
        epochs: 2,
        batch_size: 32,
        seed: 9,
        threads,
        ..TrainingConfig::default()
    };
    train(&mut model, images, &cfg, &[]).unwrap();
    model
}

fn determinism() -> Outcome {
    let images: Vec<LabeledImage> = (0..2).map(|s| labeled(&default_phantom(4, s).unwrap())).collect();
    let test = labeled(&default_phantom(4, 50).unwrap());
    let (a, b) = (small_run(&images, 1), small_run(&images, 1));
    let ckpt_same = encode(&a) == encode(&b);
    let la = segment(&test.volume, &test.mask, &a, 512, 1, false).unwrap().labels;
    let lb = segment(&test.volume, &test.mask, &b, 512, 1, false).unwrap().labels;
    let labels_same = la.labels() == lb.labels();
    // Worker count only changes scheduling.
    let c = small_run(&images, 3);
    let lc = segment(&test.volume, &test.mask, &c, 97, 3, false).unwrap().labels;
    let threads_same = encode(&c) == encode(&a) && lc.labels() == la.labels();
    outcome(
        ckpt_same && labels_same,
        format!(
            "two single-threaded runs: checkpoints identical {ckpt_same} ({} bytes), label volumes identical {labels_same}; \
             3-thread run also identical {threads_same}",
            encode(&a).len()
        ),
    )
}

fn probability_conservation() -> Outcome {
    let images: Vec<LabeledImage> = (0..2).map(|s| labeled(&default_phantom(4, s).unwrap())).collect();
    let model = small_run(&images, 1);
    let test = labeled(&default_phantom(4, 51).unwrap());
    let seg = segment(&test.volume, &test.mask, &model, 512, 1, true).unwrap();
    let probs = seg.probabilities.unwrap();
    let mut worst = 0f64;
    let mut outside = 0f64;
    for i in 0..test.volume.geometry.len() {
        let sum: f64 = probs.iter().map(|p| p.data()[i] as f64).sum();
        if test.mask.values()[i] {
            worst = worst.max((sum - 1.0).abs());
        } else {
            outside = outside.max(sum.abs());
        }
    }
    outcome(
        worst <= 1e-5,
        format!(
            "{} masked voxels: max |Σp − 1| = {worst:.2e} (<= 1e-5); outside the mask max Σp = {outside:.1e}",
            test.mask.count()
        ),
    )
}

// ---------------------------------------------------------------------------
// I/O round trip and corruption

fn random_volume(rng: &mut StdRng) -> Volume {
    let e = [rng.random_range(1..=12), rng.random_range(1..=12), rng.random_range(1..=12)];
    let s = [rng.random_range(0.1f32..4.0), rng.random_range(0.1f32..4.0), rng.random_range(0.1f32..4.0)];
    let g = Geometry::new(e, s).unwrap();
    let plane = [Plane::Axial, Plane::Coronal, Plane::Sagittal][rng.random_range(0..3)];
    let dtype = [DataType::U8, DataType::I16, DataType::F32][rng.random_range(0..3)];
    let data = (0..g.len())
        .map(|_| match dtype {
            DataType::U8 => rng.random_range(0..=255u8) as f32,
            DataType::I16 => rng.random::<i16>() as f32,
            DataType::F32 => loop {
                let v = f32::from_bits(rng.random());
                if v.is_finite() {
                    break v;
                }
            },
        })
        .collect();
    Volume::new(g, plane, data).unwrap().with_dtype(dtype)
}

fn same_bits(a: &Volume, b: &Volume) -> bool {
    a.geometry == b.geometry
        && a.plane == b.plane
        && a.dtype == b.dtype
        && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn io_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = StdRng::seed_from_u64(77);
    let (mut cases, mut mismatches, mut truncation_accepted, mut corrupt_cases, mut panics) = (0, 0, 0, 0, 0);
    let normal = Normal::new(0.0, 40.0).unwrap();
    for case in 0..300 {
        let v = random_volume(&mut rng);
        let ext = if case % 2 == 0 { "nii" } else { "vhdr" };
        let path = dir.path().join(format!("v{case}.{ext}"));
        write_volume(&v, &path).unwrap();
        cases += 1;
        if !read_volume(&path).is_ok_and(|back| same_bits(&v, &back)) {
            mismatches += 1;
        }
        // Truncation: the image file itself for NIfTI, the payload for the
        // sidecar format.
        let data_path = if ext == "nii" { path.clone() } else { path.with_extension("raw") };
        let bytes = std::fs::read(&data_path).unwrap();
        for _ in 0..4 {
            let cut = rng.random_range(0..bytes.len());
            std::fs::write(&data_path, &bytes[..cut]).unwrap();
            match catch_unwind(AssertUnwindSafe(|| read_volume(&path))) {
                Ok(Err(Error::Format { .. })) => {}
                Ok(_) => truncation_accepted += 1,
                Err(_) => panics += 1,
            }
        }
        std::fs::write(&data_path, &bytes).unwrap();
        // Corruption: random byte edits inside the header.
        let header = std::fs::read(&path).unwrap();
        let header_len = if ext == "nii" { 352 } else { header.len() };
        for _ in 0..4 {
            let mut bad = header.clone();
            for _ in 0..rng.random_range(1..=3) {
                let at = (normal.sample(&mut rng) as f64).abs() as usize % header_len;
                bad[at] = rng.random();
            }
            corrupt_cases += 1;
            let result = if ext == "nii" {
                catch_unwind(AssertUnwindSafe(|| parse_nifti(&bad).map(|_| ())))
            } else {
                std::fs::write(&path, &bad).unwrap();
                catch_unwind(AssertUnwindSafe(|| read_volume(&path).map(|_| ())))
            };
            if result.is_err() {
                panics += 1;
            }
        }
        std::fs::write(&path, &header).unwrap();
    }
    let pass = mismatches == 0 && truncation_accepted == 0 && panics == 0;
    outcome(
        pass,
        format!(
            "{cases} fuzzed volumes (u8/i16/f32, NIfTI and raw sidecar): {mismatches} round-trip mismatches; \
             {} truncations, {truncation_accepted} accepted; {corrupt_cases} header corruptions; {panics} panics",
            cases * 4
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient-check", gradient_check),
        ("shape-chain", shape_chains),
        ("metric-oracle", metric_oracle),
        ("balanced-sampler", sampler_contract),
        ("determinism", determinism),
        ("probability-conservation", probability_conservation),
        ("io-round-trip", io_round_trip),
        ("end-to-end-phantom", end_to_end),
        ("multi-scale-ablation", ablation),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        if !selected.is_empty() && !selected.iter().any(|s| s == name) {
            continue;
        }
        let o = match catch_unwind(run) {
            Ok(o) => o,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                outcome(false, format!("panicked: {msg}"))
            }
        };
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} failed: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
}
